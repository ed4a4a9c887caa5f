//! Scenario files: which worlds to load, which edit plans to sample, and which
//! metrics to compute over the resulting samples.
//!
//! A scenario run writes into `<out>.partial` and renames it to `<out>` only
//! once everything succeeded:
//!
//! ```text
//! <out>/manifest.json        scenario, world sources, digests, seed
//! <out>/report.json          every metric
//! <out>/<metric>.csv         one table per metric kind
//! <out>/runs/<label>/        sampler artifact per run
//! ```
//!
//! Every run of a scenario shares the scenario seed, so an edited run and its
//! unedited counterpart see the same noise.

pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::ConceptConfig;
use crate::digest::{bytes_digest, json_digest};
use crate::edit::{EditMethod, EditPlan, EditTarget, SubspaceMethod};
use crate::error::{Error, Result};
use crate::oracle::{AnalyticOracle, RemoteOracle};
use crate::sampler::{ddpm_sample, samples_csv, RunArtifact, SamplerParams, UpdateRule};
use crate::schedule::{Schedule, ScheduleParams};
use crate::subspace::{MaskParams, DEFAULT_MASK_THRESHOLD};
use metrics::{
    intended_marginal, leakage, map_histogram, mask_recovery, mean_posterior, moments, occupancy, rank_report,
    LeakageReport, LeakageRow, MaskReport, Moments, OccupancyReport, RankReport, LEAKAGE_NOTE,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

fn default_steps() -> usize {
    ScheduleParams::default().steps
}
fn default_beta_min() -> f64 {
    ScheduleParams::default().beta_min
}
fn default_beta_max() -> f64 {
    ScheduleParams::default().beta_max
}
fn default_guidance() -> f64 {
    1.0
}
fn default_mask_threshold() -> f64 {
    DEFAULT_MASK_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerDoc {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    pub samples: usize,
    #[serde(default)]
    pub update: UpdateRule,
}

impl SamplerDoc {
    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams { steps: self.steps, beta_min: self.beta_min, beta_max: self.beta_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDoc {
    pub label: String,
    pub plan: EditPlan,
    /// World configuration for this run; defaults to the scenario's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricDoc {
    Leakage {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        edited: String,
        original: String,
        target_space: String,
        off_space: String,
        intended: EditTarget,
    },
    Occupancy {
        run: String,
        prompt: String,
    },
    Posterior {
        run: String,
        space: String,
    },
    Moments {
        run: String,
    },
    Rank {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world: Option<String>,
        concept: Vec<String>,
        probes: usize,
        points: usize,
    },
    Mask {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world: Option<String>,
        pair: Vec<String>,
        t: usize,
        #[serde(default = "default_mask_threshold")]
        threshold: f64,
        #[serde(default)]
        blur_sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<(usize, usize)>,
        expected: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    /// Path of the default world configuration, relative to the scenario file.
    pub world: String,
    pub seed: u64,
    pub sampler: SamplerDoc,
    #[serde(default)]
    pub runs: Vec<RunDoc>,
    #[serde(default)]
    pub metrics: Vec<MetricDoc>,
}

/// Which oracle sampling runs use. Metrics always use the local world.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    #[default]
    Analytic,
    Remote(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: usize,
    pub oracle: OracleChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSource {
    pub digest: String,
    pub text: String,
}

/// Everything needed to reproduce a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub code_version: String,
    pub name: String,
    pub seed: u64,
    pub oracle: OracleChoice,
    pub scenario: ScenarioDoc,
    pub scenario_digest: String,
    pub config_digest: String,
    pub worlds: BTreeMap<String, WorldSource>,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub dir: String,
    pub samples_digest: String,
    pub artifact: RunArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricOutput {
    Leakage(LeakageReport),
    Occupancy { run: String, prompt: String, report: OccupancyReport },
    Posterior { run: String, space: String, values: Vec<String>, map_histogram: Vec<f64>, mean_posterior: Vec<f64> },
    Moments { run: String, moments: Moments },
    Rank(RankReport),
    Mask(MaskReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub code_version: String,
    pub config_digest: String,
    pub metrics: Vec<MetricOutput>,
}

impl ScenarioReport {
    pub fn leakage_rows(&self) -> impl Iterator<Item = &LeakageRow> {
        self.metrics.iter().filter_map(|m| match m {
            MetricOutput::Leakage(r) => Some(r.rows.iter()),
            _ => None,
        }).flatten()
    }

    pub fn leakage_row(&self, label: &str) -> Option<&LeakageRow> {
        self.leakage_rows().find(|r| r.label == label)
    }
}

struct LoadedWorld {
    config: ConceptConfig,
    world: Arc<crate::World>,
}

/// A parsed scenario with all of its world configurations loaded.
pub struct Scenario {
    pub doc: ScenarioDoc,
    sources: BTreeMap<String, WorldSource>,
    worlds: BTreeMap<String, LoadedWorld>,
    pub schedule: Arc<Schedule>,
}

fn label_ok(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Scenario {
    /// Loads a scenario file, resolving world paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let doc: ScenarioDoc = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut sources = BTreeMap::new();
        let mut problems = Vec::new();
        for r in world_refs(&doc) {
            let p = base.join(&r);
            match std::fs::read_to_string(&p) {
                Ok(text) => {
                    sources.insert(r, WorldSource { digest: bytes_digest(text.as_bytes()), text });
                }
                Err(e) => problems.push(format!("world {:?} ({}): {e}", r, p.display())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Self::from_parts(doc, sources)
    }

    /// Rebuilds the scenario recorded in a manifest, without touching the
    /// original world files.
    pub fn from_manifest(manifest: &ScenarioManifest) -> Result<Self> {
        for (r, src) in &manifest.worlds {
            if bytes_digest(src.text.as_bytes()) != src.digest {
                return Err(Error::Config(vec![format!("world {r:?} does not match its recorded digest")]));
            }
        }
        Self::from_parts(manifest.scenario.clone(), manifest.worlds.clone())
    }

    pub fn from_parts(doc: ScenarioDoc, sources: BTreeMap<String, WorldSource>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut worlds = BTreeMap::new();
        for r in world_refs(&doc) {
            let Some(src) = sources.get(&r) else {
                problems.push(format!("world {r:?} has no source"));
                continue;
            };
            match ConceptConfig::from_json(&src.text) {
                Ok(config) => match config.world.clone() {
                    Some(w) => {
                        worlds.insert(r, LoadedWorld { world: Arc::new(w), config });
                    }
                    None => problems.push(format!("world {r:?}: configuration defines no world")),
                },
                Err(e) => problems.extend(e.problems().into_iter().map(|p| format!("world {r:?}: {p}"))),
            }
        }
        let schedule = match Schedule::new(doc.sampler.schedule_params()) {
            Ok(s) => Some(Arc::new(s)),
            Err(e) => {
                problems.push(format!("sampler: {e}"));
                None
            }
        };
        if !problems.is_empty() {
            // Later checks need the worlds and the schedule.
            return Err(Error::Config(problems));
        }
        let s = Self { doc, sources, worlds, schedule: schedule.expect("checked") };
        let problems = s.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(s)
    }

    fn world_of(&self, r: Option<&String>) -> &LoadedWorld {
        &self.worlds[r.unwrap_or(&self.doc.world)]
    }

    fn run_world(&self, label: &str) -> Option<&LoadedWorld> {
        self.doc.runs.iter().find(|r| r.label == label).map(|r| self.world_of(r.world.as_ref()))
    }

    fn analytic(&self, w: &LoadedWorld) -> Result<AnalyticOracle> {
        AnalyticOracle::new(w.world.clone(), w.config.prompts.clone(), self.schedule.clone())
    }

    /// Every problem with the scenario; empty when it can run.
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let doc = &self.doc;
        let sp = &doc.sampler;
        if sp.samples == 0 {
            out.push("sampler: samples must be at least 1".into());
        }
        if !sp.guidance.is_finite() {
            out.push(format!("sampler: guidance {} is not finite", sp.guidance));
        }
        let mut labels = BTreeSet::new();
        for run in &doc.runs {
            let ctx = format!("run {:?}", run.label);
            if !label_ok(&run.label) {
                out.push(format!("{ctx}: labels may only contain letters, digits, '-' and '_'"));
            }
            if !labels.insert(run.label.as_str()) {
                out.push(format!("{ctx}: duplicate label"));
            }
            out.extend(run.plan.problems().into_iter().map(|p| format!("{ctx}: {p}")));
            let w = self.world_of(run.world.as_ref());
            for p in run.plan.prompts() {
                if !w.config.prompts.contains(p) {
                    out.push(format!("{ctx}: unknown prompt {p:?}"));
                }
            }
            for c in &run.plan.concept {
                if w.world.factor_index(c).is_err() {
                    out.push(format!("{ctx}: unknown concept factor {c:?}"));
                }
            }
            out.extend(run.plan.spanning_problems(&w.config.prompts).into_iter().map(|p| format!("{ctx}: {p}")));
            if let (EditMethod::Projection, SubspaceMethod::Mask(MaskParams { grid: Some((r, c)), .. })) =
                (run.plan.method, &run.plan.subspace)
            {
                if r * c != w.world.dim() {
                    out.push(format!("{ctx}: mask grid {r}x{c} does not cover {} coordinates", w.world.dim()));
                }
            }
        }
        let has_space = |w: &LoadedWorld, s: &str| w.world.factor_index(s).is_ok();
        for (i, m) in doc.metrics.iter().enumerate() {
            let ctx = format!("metric {i}");
            let need_run = |label: &str, out: &mut Vec<String>| -> Option<&LoadedWorld> {
                let w = self.run_world(label);
                if w.is_none() {
                    out.push(format!("{ctx}: unknown run {label:?}"));
                }
                w
            };
            match m {
                MetricDoc::Leakage { edited, original, target_space, off_space, intended, .. } => {
                    let a = need_run(edited, &mut out);
                    let b = need_run(original, &mut out);
                    if let (Some(a), Some(b)) = (a, b) {
                        if !Arc::ptr_eq(&a.world, &b.world) {
                            out.push(format!("{ctx}: {edited:?} and {original:?} use different worlds"));
                        }
                        for s in [target_space, off_space] {
                            if !has_space(a, s) {
                                out.push(format!("{ctx}: unknown space {s:?}"));
                            }
                        }
                        for (_, p) in target_components(intended) {
                            if !a.config.prompts.contains(p) {
                                out.push(format!("{ctx}: unknown prompt {p:?}"));
                            }
                        }
                    }
                }
                MetricDoc::Occupancy { run, prompt } => {
                    if let Some(w) = need_run(run, &mut out) {
                        if !w.config.prompts.contains(prompt) {
                            out.push(format!("{ctx}: unknown prompt {prompt:?}"));
                        }
                    }
                }
                MetricDoc::Posterior { run, space } => {
                    if let Some(w) = need_run(run, &mut out) {
                        if !has_space(w, space) {
                            out.push(format!("{ctx}: unknown space {space:?}"));
                        }
                    }
                }
                MetricDoc::Moments { run } => {
                    need_run(run, &mut out);
                }
                MetricDoc::Rank { world, concept, probes, .. } => {
                    let w = self.world_of(world.as_ref());
                    if concept.is_empty() {
                        out.push(format!("{ctx}: empty concept"));
                    }
                    let idx: Vec<Option<usize>> = concept.iter().map(|c| w.world.factor_index(c).ok()).collect();
                    for (c, i) in concept.iter().zip(&idx) {
                        if i.is_none() {
                            out.push(format!("{ctx}: unknown concept factor {c:?}"));
                        }
                    }
                    let idx: Vec<usize> = idx.into_iter().flatten().collect();
                    if idx.windows(2).any(|p| p[1] != p[0] + 1) {
                        out.push(format!("{ctx}: concept factors must be adjacent and in world order"));
                    }
                    if *probes < 2 {
                        out.push(format!("{ctx}: at least two probes are needed"));
                    }
                }
                MetricDoc::Mask { world, pair, t, threshold, blur_sigma, grid, expected } => {
                    let w = self.world_of(world.as_ref());
                    if pair.len() != 2 {
                        out.push(format!("{ctx}: pair must name two prompts"));
                    }
                    for p in pair {
                        if !w.config.prompts.contains(p) {
                            out.push(format!("{ctx}: unknown prompt {p:?}"));
                        }
                    }
                    for f in expected {
                        if !has_space(w, f) {
                            out.push(format!("{ctx}: unknown factor {f:?}"));
                        }
                    }
                    if *t > sp.steps {
                        out.push(format!("{ctx}: t={t} exceeds T={}", sp.steps));
                    }
                    if !(*threshold >= 0.0) || !(*blur_sigma >= 0.0) {
                        out.push(format!("{ctx}: threshold and blur_sigma must be non-negative"));
                    }
                    if *blur_sigma > 0.0 && grid.is_none() {
                        out.push(format!("{ctx}: blur needs a grid"));
                    }
                    if let Some((r, c)) = grid {
                        if r * c != w.world.dim() {
                            out.push(format!("{ctx}: grid {r}x{c} does not cover {} coordinates", w.world.dim()));
                        }
                    }
                }
            }
        }
        out
    }

    /// Digest over the scenario document and every world source.
    pub fn config_digest(&self) -> String {
        json_digest(&(&self.doc, self.sources.values().map(|s| &s.digest).collect::<Vec<_>>()))
    }

    /// Samples every run.
    pub fn sample_runs(&self, opts: &RunOptions) -> Result<Vec<(String, RunArtifact)>> {
        let seed = opts.seed.unwrap_or(self.doc.seed);
        let sp = &self.doc.sampler;
        let params = SamplerParams { guidance: sp.guidance, samples: sp.samples, update: sp.update, threads: opts.threads };
        let mut out = Vec::with_capacity(self.doc.runs.len());
        for run in &self.doc.runs {
            let w = self.world_of(run.world.as_ref());
            let art = match &opts.oracle {
                OracleChoice::Analytic => ddpm_sample(&self.analytic(w)?, &run.plan, &self.schedule, &params, seed)?,
                OracleChoice::Remote(addr) => {
                    let remote = RemoteOracle::connect(addr)?.expect_shape(w.world.dim(), sp.steps)?;
                    ddpm_sample(&remote, &run.plan, &self.schedule, &params, seed)?
                }
            };
            out.push((run.label.clone(), art));
        }
        Ok(out)
    }

    /// Computes every metric from samples keyed by run label.
    pub fn compute_metrics(&self, samples: &BTreeMap<String, Vec<Vec<f64>>>, seed: u64) -> Result<Vec<MetricOutput>> {
        let get = |label: &str| {
            samples
                .get(label)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::InvalidPlan(format!("no samples for run {label:?}")))
        };
        let mut out: Vec<MetricOutput> = Vec::new();
        let mut leak_rows = Vec::new();
        for (i, m) in self.doc.metrics.iter().enumerate() {
            let mseed = seed.wrapping_add(i as u64 + 1);
            match m {
                MetricDoc::Leakage { label, edited, original, target_space, off_space, intended } => {
                    let w = self.run_world(edited).expect("validated");
                    let comps = target_components(intended);
                    let target = intended_marginal(&w.config.prompts, &comps, target_space)?;
                    leak_rows.push(leakage(
                        label.as_deref().unwrap_or(edited),
                        &w.world,
                        w.config.prompts.marginal(),
                        get(edited)?,
                        get(original)?,
                        target_space,
                        off_space,
                        &target,
                    )?);
                }
                MetricDoc::Occupancy { run, prompt } => {
                    let w = self.run_world(run).expect("validated");
                    let report = occupancy(&w.world, w.config.prompts.get(prompt)?, get(run)?)?;
                    out.push(MetricOutput::Occupancy { run: run.clone(), prompt: prompt.clone(), report });
                }
                MetricDoc::Posterior { run, space } => {
                    let w = self.run_world(run).expect("validated");
                    let prior = w.config.prompts.marginal();
                    let values = w.config.space(space)?.values().to_vec();
                    out.push(MetricOutput::Posterior {
                        run: run.clone(),
                        space: space.clone(),
                        values,
                        map_histogram: map_histogram(&w.world, prior, get(run)?, space)?,
                        mean_posterior: mean_posterior(&w.world, prior, get(run)?, space)?,
                    });
                }
                MetricDoc::Moments { run } => {
                    out.push(MetricOutput::Moments { run: run.clone(), moments: moments(get(run)?)? });
                }
                MetricDoc::Rank { world, concept, probes, points } => {
                    let oracle = self.analytic(self.world_of(world.as_ref()))?;
                    let c: Vec<&str> = concept.iter().map(String::as_str).collect();
                    out.push(MetricOutput::Rank(rank_report(&oracle, &c, *probes, *points, mseed)?));
                }
                MetricDoc::Mask { world, pair, t, threshold, blur_sigma, grid, expected } => {
                    let oracle = self.analytic(self.world_of(world.as_ref()))?;
                    let params = MaskParams { threshold: *threshold, blur_sigma: *blur_sigma, grid: *grid };
                    let e: Vec<&str> = expected.iter().map(String::as_str).collect();
                    out.push(MetricOutput::Mask(mask_recovery(&oracle, (&pair[0], &pair[1]), *t, &params, &e, mseed)?));
                }
            }
        }
        if !leak_rows.is_empty() {
            out.insert(0, MetricOutput::Leakage(LeakageReport { rows: leak_rows, note: LEAKAGE_NOTE.into() }));
        }
        Ok(out)
    }
}

fn world_refs(doc: &ScenarioDoc) -> BTreeSet<String> {
    let mut refs = BTreeSet::from([doc.world.clone()]);
    refs.extend(doc.runs.iter().filter_map(|r| r.world.clone()));
    for m in &doc.metrics {
        if let MetricDoc::Rank { world: Some(w), .. } | MetricDoc::Mask { world: Some(w), .. } = m {
            refs.insert(w.clone());
        }
    }
    refs
}

fn target_components(t: &EditTarget) -> Vec<(f64, &str)> {
    match t {
        EditTarget::Prompt(p) => vec![(1.0, p.as_str())],
        EditTarget::Mixture(c) => c.iter().map(|w| (w.weight, w.prompt.as_str())).collect(),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

/// Plot-ready tables, keyed by file name.
pub fn metric_tables(metrics: &[MetricOutput]) -> BTreeMap<&'static str, String> {
    let mut t: BTreeMap<&'static str, String> = BTreeMap::new();
    for m in metrics {
        match m {
            MetricOutput::Leakage(r) => {
                let s = t.entry("leakage.csv").or_insert_with(|| {
                    "label,target_space,off_space,target_shift,off_target_leakage\n".into()
                });
                for row in &r.rows {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:?},{:?}",
                        row.label, row.target_space, row.off_space, row.target_shift, row.off_target_leakage
                    );
                }
            }
            MetricOutput::Occupancy { run, prompt, report } => {
                let s = t
                    .entry("occupancy.csv")
                    .or_insert_with(|| "run,prompt,component,weight,occupancy,mean,estimate\n".into());
                for c in &report.components {
                    let _ = writeln!(
                        s,
                        "{run},{prompt:?},{},{:?},{:?},{},{}",
                        c.values.join("|"),
                        c.weight,
                        c.occupancy,
                        fmt_list(&c.mean),
                        fmt_list(&c.estimate)
                    );
                }
            }
            MetricOutput::Posterior { run, space, values, map_histogram, mean_posterior } => {
                let s = t
                    .entry("posterior.csv")
                    .or_insert_with(|| "run,space,value,map_fraction,mean_posterior\n".into());
                for ((v, a), b) in values.iter().zip(map_histogram).zip(mean_posterior) {
                    let _ = writeln!(s, "{run},{space},{v},{a:?},{b:?}");
                }
            }
            MetricOutput::Moments { run, moments } => {
                let s = t.entry("moments.csv").or_insert_with(|| "run,coordinate,mean,variance\n".into());
                for (i, mu) in moments.mean.iter().enumerate() {
                    let _ = writeln!(s, "{run},{i},{mu:?},{:?}", moments.covariance[i][i]);
                }
            }
            MetricOutput::Rank(r) => {
                let s = t.entry("rank.csv").or_insert_with(|| "concept,bound,t,rank\n".into());
                for p in &r.points {
                    let _ = writeln!(s, "{},{},{},{}", r.concept.join("|"), r.bound, p.t, p.rank);
                }
            }
            MetricOutput::Mask(r) => {
                let s = t.entry("mask.csv").or_insert_with(|| "t,threshold,expected,recovered,iou\n".into());
                let _ = writeln!(s, "{},{:?},{},{},{:?}", r.t, r.threshold, r.expected.len(), r.recovered.len(), r.iou);
            }
        }
    }
    t
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
    name.push(".partial");
    out.with_file_name(name)
}

/// Runs a loaded scenario and writes its outputs to `out`. Nothing is left
/// at `out` unless the whole run succeeds; an earlier scenario output there
/// is replaced.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions, out: &Path) -> Result<(ScenarioManifest, ScenarioReport)> {
    if out.exists() && !out.join(MANIFEST_FILE).exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(vec![format!(
            "{} exists and is not a scenario output; refusing to replace it",
            out.display()
        )]));
    }
    let seed = opts.seed.unwrap_or(scenario.doc.seed);
    let tmp = partial_path(out);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    let result = (|| {
        std::fs::create_dir_all(&tmp)?;
        let runs = scenario.sample_runs(opts)?;
        let samples: BTreeMap<String, Vec<Vec<f64>>> =
            runs.iter().map(|(l, a)| (l.clone(), a.samples.clone())).collect();
        let metrics = scenario.compute_metrics(&samples, seed)?;
        let config_digest = scenario.config_digest();
        let mut records = Vec::new();
        for (label, art) in &runs {
            let dir = format!("runs/{label}");
            art.write(&tmp.join(&dir))?;
            records.push(RunRecord {
                label: label.clone(),
                dir,
                samples_digest: bytes_digest(samples_csv(&art.samples).as_bytes()),
                artifact: art.clone(),
            });
        }
        let manifest = ScenarioManifest {
            code_version: CODE_VERSION.into(),
            name: scenario.doc.name.clone(),
            seed,
            oracle: opts.oracle.clone(),
            scenario: scenario.doc.clone(),
            scenario_digest: json_digest(&scenario.doc),
            config_digest: config_digest.clone(),
            worlds: scenario.sources.clone(),
            runs: records,
        };
        let report = ScenarioReport {
            name: scenario.doc.name.clone(),
            seed,
            code_version: CODE_VERSION.into(),
            config_digest,
            metrics,
        };
        std::fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::write(tmp.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        for (name, body) in metric_tables(&report.metrics) {
            std::fs::write(tmp.join(name), body)?;
        }
        Ok((manifest, report))
    })();
    match result {
        Ok(v) => {
            if out.exists() {
                std::fs::remove_dir_all(out)?;
            }
            std::fs::rename(&tmp, out)?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Reads a scenario manifest written by [`run_scenario`].
pub fn read_manifest(path: &Path) -> Result<ScenarioManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
}

/// Loads either a scenario file or a manifest. For a manifest, the recorded
/// seed and oracle become the defaults.
pub fn load_any(path: &Path) -> Result<(Scenario, Option<ScenarioManifest>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    if value.get("code_version").is_some() && value.get("scenario").is_some() {
        let manifest: ScenarioManifest =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Ok((Scenario::from_manifest(&manifest)?, Some(manifest)))
    } else {
        Ok((Scenario::load(path)?, None))
    }
}

/// Recomputes a scenario's metrics from the artifacts in a finished output
/// directory.
pub fn recompute_metrics(out: &Path) -> Result<Vec<MetricOutput>> {
    let manifest = read_manifest(&out.join(MANIFEST_FILE))?;
    let scenario = Scenario::from_manifest(&manifest)?;
    let mut samples = BTreeMap::new();
    for r in &manifest.runs {
        samples.insert(r.label.clone(), crate::sampler::read_samples(&out.join(&r.dir))?);
    }
    scenario.compute_metrics(&samples, manifest.seed)
}
