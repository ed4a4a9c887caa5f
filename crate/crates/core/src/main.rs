use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use conceptlab::config::ConceptConfig;
use conceptlab::harness::metrics::{intended_marginal, leakage, rank_report, LeakageReport, LEAKAGE_NOTE};
use conceptlab::harness::{self, OracleChoice, RunOptions};
use conceptlab::oracle::protocol::{protocol_check, read_transcript, record_transcript, write_transcript};
use conceptlab::oracle::{AnalyticOracle, ReferenceServer};
use conceptlab::sampler::read_samples;
use conceptlab::schedule::{Schedule, ScheduleParams};
use conceptlab::{Error, Result};

#[derive(Parser)]
#[command(name = "conceptlab", version, about = "Concept algebra on analytic score worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Analytic,
    Remote,
}

#[derive(clap::Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = ScheduleParams::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = ScheduleParams::default().beta_min)]
    beta_min: f64,
    #[arg(long, default_value_t = ScheduleParams::default().beta_max)]
    beta_max: f64,
}

impl ScheduleArgs {
    fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file, or replay a scenario manifest.
    Run {
        path: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `out/<scenario name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, value_enum)]
        oracle: Option<OracleKind>,
        /// `host:port` of the remote oracle.
        #[arg(long)]
        remote: Option<String>,
    },
    /// Numerical ranks of concept field differences at random points.
    Rank {
        /// World configuration.
        #[arg(long)]
        config: PathBuf,
        /// Concept factor; repeat for a composite concept.
        #[arg(long = "concept", required = true)]
        concept: Vec<String>,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leakage between two persisted runs.
    Leakage {
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the edited samples.
        #[arg(long)]
        edited: PathBuf,
        /// Run directory holding the unedited samples.
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        target_space: String,
        #[arg(long)]
        off_space: String,
        /// Prompt whose target-space marginal is the intended distribution.
        #[arg(long)]
        intended: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a score server against the wire protocol.
    ProtocolCheck {
        addr: String,
        /// Replay a recorded transcript and require identical responses.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Record a transcript from this server instead of checking it.
        #[arg(long, conflicts_with = "transcript")]
        record: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Serve a world's analytic oracle over the wire protocol.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn analytic_oracle(config: &Path, schedule: Schedule) -> Result<AnalyticOracle> {
    let cfg = ConceptConfig::load(config)?;
    let world = cfg.world()?.clone();
    AnalyticOracle::new(Arc::new(world), cfg.prompts, Arc::new(schedule))
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { path, seed, out, threads, oracle, remote } => {
            let (scenario, manifest) = harness::load_any(&path)?;
            let oracle = match (oracle, remote) {
                (Some(OracleKind::Remote), Some(addr)) | (None, Some(addr)) => OracleChoice::Remote(addr),
                (Some(OracleKind::Remote), None) => {
                    return Err(Error::Config(vec!["--oracle remote needs --remote <host:port>".into()]))
                }
                (Some(OracleKind::Analytic), _) => OracleChoice::Analytic,
                (None, None) => manifest.as_ref().map(|m| m.oracle.clone()).unwrap_or_default(),
            };
            let seed = seed.or(manifest.as_ref().map(|m| m.seed));
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&scenario.doc.name));
            let opts = RunOptions { seed, threads, oracle };
            let (_, report) = harness::run_scenario(&scenario, &opts, &out)?;
            emit(
                &json!({"status": "ok", "scenario": report.name, "seed": report.seed, "out": out.display().to_string()}),
                None,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Rank { config, concept, probes, points, seed, schedule, out } => {
            let oracle = analytic_oracle(&config, schedule.schedule()?)?;
            let c: Vec<&str> = concept.iter().map(String::as_str).collect();
            let report = rank_report(&oracle, &c, probes, points, seed)?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Leakage { config, edited, original, target_space, off_space, intended, out } => {
            let cfg = ConceptConfig::load(&config)?;
            let world = cfg.world()?;
            let target = intended_marginal(&cfg.prompts, &[(1.0, intended.as_str())], &target_space)?;
            let row = leakage(
                &edited.display().to_string(),
                world,
                cfg.prompts.marginal(),
                &read_samples(&edited)?,
                &read_samples(&original)?,
                &target_space,
                &off_space,
                &target,
            )?;
            let report = LeakageReport { rows: vec![row], note: LEAKAGE_NOTE.into() };
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ProtocolCheck { addr, transcript, record, timeout_secs } => {
            let timeout = Duration::from_secs(timeout_secs);
            if let Some(path) = record {
                let entries = record_transcript(&addr, timeout)?;
                write_transcript(&path, &entries)?;
                emit(&json!({"status": "recorded", "entries": entries.len(), "path": path.display().to_string()}), None)?;
                return Ok(ExitCode::SUCCESS);
            }
            let entries = match &transcript {
                Some(p) => Some(read_transcript(p)?),
                None => None,
            };
            let report = protocol_check(&addr, entries.as_deref(), timeout);
            emit(&serde_json::to_value(&report)?, None)?;
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Serve { config, addr, schedule } => {
            let oracle = analytic_oracle(&config, schedule.schedule()?)?;
            let server = ReferenceServer::spawn(Arc::new(oracle), &addr)?;
            eprintln!("serving on {}", server.addr());
            server.join();
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string(), "problems": e.problems()}});
            eprintln!("{}", serde_json::to_string_pretty(&body).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(2)
        }
    }
}
