//! DDPM ancestral sampling with classifier-free guidance and per-step edits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::EMPTY_PROMPT;
use crate::digest::json_digest;
use crate::edit::{edited_epsilon, EditPlan};
use crate::error::{Error, Result};
use crate::oracle::{OracleRequest, ScoreOracle};
use crate::schedule::Schedule;
use crate::subspace::SubspaceWarning;

/// How the mean of `y_{t-1}` is formed from `y_t` and the noise prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `(y - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
    #[default]
    Ddpm,
    /// `y - eps`; kept for comparison, does not sample the model distribution.
    Literal,
}

/// `(1 - w) eps_uncond + w eps_cond`, i.e. `eps_uncond + w (eps_cond - eps_uncond)`
/// arranged so that `w = 0` and `w = 1` reproduce their inputs exactly.
pub fn guidance_combine(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::DimensionMismatch { expected: eps_uncond.len(), got: eps_cond.len() });
    }
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| (1.0 - w) * u + w * c).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub guidance: f64,
    pub samples: usize,
    #[serde(default)]
    pub update: UpdateRule,
    /// Worker threads; 0 uses rayon's default.
    #[serde(default, skip_serializing)]
    pub threads: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self { guidance: 1.0, samples: 1000, update: UpdateRule::Ddpm, threads: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRef {
    pub chain: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarningSummary {
    pub kind: SubspaceWarning,
    pub count: usize,
    pub first: StepRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub seed: u64,
    pub schedule_digest: String,
    pub plan_digest: String,
    pub guidance: f64,
    pub update: UpdateRule,
    pub warnings: Vec<WarningSummary>,
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

/// Runs `params.samples` independent chains. Chain `i` draws from a ChaCha20
/// stream keyed by `(seed, i)`, so results do not depend on scheduling.
pub fn ddpm_sample<O: ScoreOracle + ?Sized>(
    oracle: &O,
    plan: &EditPlan,
    schedule: &Schedule,
    params: &SamplerParams,
    seed: u64,
) -> Result<RunArtifact> {
    plan.validate()?;
    if oracle.steps() != schedule.steps() {
        return Err(Error::InvalidSchedule(format!(
            "oracle runs T={}, schedule has T={}",
            oracle.steps(),
            schedule.steps()
        )));
    }
    if !params.guidance.is_finite() {
        return Err(Error::InvalidPlan(format!("guidance scale {} is not finite", params.guidance)));
    }
    let run = || -> Result<Vec<(Vec<f64>, Vec<(SubspaceWarning, usize)>)>> {
        (0..params.samples)
            .into_par_iter()
            .map(|chain| run_chain(oracle, plan, schedule, params, seed, chain))
            .collect()
    };
    let chains = if params.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(params.threads)
            .build()
            .map_err(|e| Error::InvalidPlan(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    let mut warnings: BTreeMap<String, WarningSummary> = BTreeMap::new();
    let mut samples = Vec::with_capacity(chains.len());
    for (chain, (y, warns)) in chains.into_iter().enumerate() {
        for (kind, t) in warns {
            warnings
                .entry(format!("{kind:?}"))
                .and_modify(|w| w.count += 1)
                .or_insert(WarningSummary { kind, count: 1, first: StepRef { chain, t } });
        }
        samples.push(y);
    }
    Ok(RunArtifact {
        seed,
        schedule_digest: schedule.digest(),
        plan_digest: json_digest(plan),
        guidance: params.guidance,
        update: params.update,
        warnings: warnings.into_values().collect(),
        samples,
    })
}

type ChainOutput = (Vec<f64>, Vec<(SubspaceWarning, usize)>);

fn run_chain<O: ScoreOracle + ?Sized>(
    oracle: &O,
    plan: &EditPlan,
    schedule: &Schedule,
    params: &SamplerParams,
    seed: u64,
    chain: usize,
) -> Result<ChainOutput> {
    let abort = |t: usize, reason: String| Error::ChainAborted { chain, t, reason };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    let m = oracle.dim();
    let mut y: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut warnings = Vec::new();
    let w = params.guidance;
    for t in (1..=schedule.steps()).rev() {
        let cond = edited_epsilon(oracle, plan, &y, t).map_err(|e| abort(t, e.to_string()))?;
        if let Some(kind) = cond.warning {
            warnings.push((kind, t));
        }
        let eps = if w == 1.0 {
            cond.eps
        } else {
            let uncond = oracle
                .evaluate(&OracleRequest::new(EMPTY_PROMPT, &y, t))
                .map_err(|e| abort(t, e.to_string()))?;
            guidance_combine(&uncond, &cond.eps, w)?
        };
        if let Some(i) = eps.iter().position(|v| !v.is_finite()) {
            return Err(abort(t, format!("non-finite noise prediction at coordinate {i}: {:?}", eps[i])));
        }
        let mean: Vec<f64> = match params.update {
            UpdateRule::Ddpm => {
                let c = schedule.beta(t) / schedule.eps_scale(t);
                let s = schedule.alpha(t).sqrt();
                y.iter().zip(&eps).map(|(v, e)| (v - c * e) / s).collect()
            }
            UpdateRule::Literal => y.iter().zip(&eps).map(|(v, e)| v - e).collect(),
        };
        y = if t == 1 {
            mean
        } else {
            let sigma = schedule.sigma(t);
            mean.iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + sigma * z
                })
                .collect()
        };
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(abort(t, format!("sample diverged at coordinate {i}")));
        }
    }
    Ok((y, warnings))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";

/// CSV with header `y0,y1,...`; values use the shortest decimal that
/// round-trips to the same `f64`.
pub fn samples_csv(samples: &[Vec<f64>]) -> String {
    let m = samples.first().map_or(0, Vec::len);
    let mut out = (0..m).map(|i| format!("y{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in samples {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config(vec!["samples file is empty".into()]))?;
    let m = header.split(',').filter(|s| !s.is_empty()).count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: std::result::Result<Vec<f64>, _> = l.split(',').map(|v| v.trim().parse::<f64>()).collect();
            match row {
                Ok(r) if r.len() == m => Ok(r),
                Ok(r) => Err(Error::DimensionMismatch { expected: m, got: r.len() }),
                Err(e) => Err(Error::Config(vec![format!("samples row {}: {e}", i + 1)])),
            }
        })
        .collect()
}

impl RunArtifact {
    /// Writes `manifest.json` and `samples.csv` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join(SAMPLES_FILE), samples_csv(&self.samples))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut art: RunArtifact = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        art.samples = read_samples(dir)?;
        Ok(art)
    }
}

pub fn read_samples(dir: &Path) -> Result<Vec<Vec<f64>>> {
    parse_samples_csv(&std::fs::read_to_string(dir.join(SAMPLES_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn guidance_endpoints() {
        let u = [0.1, -3.0, 7.25];
        let c = [2.0, 0.5, -1.0];
        assert_eq!(guidance_combine(&u, &c, 0.0).unwrap(), u.to_vec());
        assert_eq!(guidance_combine(&u, &c, 1.0).unwrap(), c.to_vec());
        assert!(guidance_combine(&u, &c[..2], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn guidance_affine_in_w(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            c in proptest::collection::vec(-5.0f64..5.0, 4),
            w in -3.0f64..3.0,
        ) {
            let at = |w| guidance_combine(&u, &c, w).unwrap();
            let (a0, a1, aw) = (at(0.0), at(1.0), at(w));
            for i in 0..4 {
                prop_assert!((aw[i] - (a0[i] + w * (a1[i] - a0[i]))).abs() < 1e-12);
            }
            let a2 = at(2.0);
            for i in 0..4 {
                prop_assert!((a2[i] - (2.0 * a1[i] - a0[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn csv_round_trips(rows in proptest::collection::vec(proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), 1..5)) {
            let back = parse_samples_csv(&samples_csv(&rows)).unwrap();
            prop_assert_eq!(back, rows);
        }
    }
}
