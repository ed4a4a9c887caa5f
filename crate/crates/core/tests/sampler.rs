mod common;

use conceptlab::edit::EditPlan;
use conceptlab::harness::metrics::{map_histogram, moments};
use conceptlab::oracle::{OracleRequest, ScoreOracle};
use conceptlab::sampler::{ddpm_sample, SamplerParams, UpdateRule};
use conceptlab::{Error, OracleError, Schedule};

fn params(samples: usize, update: UpdateRule) -> SamplerParams {
    SamplerParams { guidance: 1.0, samples, update, threads: 1 }
}

fn gaussian_moment_errors(update: UpdateRule) -> (f64, f64) {
    let oracle = common::oracle("standard-gaussian.json");
    let art = ddpm_sample(&oracle, &EditPlan::none(""), &common::schedule(), &params(4000, update), 31).unwrap();
    let m = moments(&art.samples).unwrap();
    let mean_err = m.mean.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut cov_err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { 1.0 } else { 0.0 };
            cov_err = cov_err.max((m.covariance[i][j] - want).abs());
        }
    }
    (mean_err, cov_err)
}

#[test]
fn standard_gaussian_moments() {
    // sd of a mean over 4000 draws is 0.0158; of a variance about 0.022.
    let (mean_err, cov_err) = gaussian_moment_errors(UpdateRule::Ddpm);
    assert!(mean_err < 0.07, "mean error {mean_err}");
    assert!(cov_err < 0.1, "covariance error {cov_err}");
}

#[test]
fn literal_update_does_not_sample_the_model() {
    let (mean_err, cov_err) = gaussian_moment_errors(UpdateRule::Literal);
    assert!(mean_err >= 0.07 || cov_err >= 0.1, "mean {mean_err}, covariance {cov_err}");
}

fn male_rate(n: usize, seed: u64) -> f64 {
    let cfg = common::load("fixture-a.json");
    let oracle = common::oracle("fixture-a.json");
    let art = ddpm_sample(&oracle, &EditPlan::none("a man mathematician"), &common::schedule(), &params(n, UpdateRule::Ddpm), seed)
        .unwrap();
    map_histogram(oracle.world(), cfg.prompts.marginal(), &art.samples, "sex").unwrap()[0]
}

#[test]
fn conditional_samples_classify_at_the_derived_rate() {
    // A male sample is classified male iff z > 0, z ~ N(1, 0.25): Phi(2).
    let expected = 0.977_249_868;
    let n = 2000;
    let sd = (expected * (1.0 - expected) / n as f64).sqrt();
    let got = male_rate(n, 32);
    assert!((got - expected).abs() <= 3.0 * sd, "male rate {got}, expected {expected} +- {}", 3.0 * sd);
}

#[test]
#[ignore = "fixture emissions overlap: the attainable rate is Phi(2) = 0.977, see conditional_samples_classify_at_the_derived_rate"]
fn conditional_samples_are_at_least_99_percent_male() {
    let rate = male_rate(2000, 33);
    assert!(rate >= 0.99, "male rate {rate}");
}

#[test]
fn same_seed_same_samples_across_thread_counts() {
    let oracle = common::oracle("fixture-a.json");
    let plan = EditPlan::none("a crowd");
    let sched = common::schedule();
    let mut p = params(64, UpdateRule::Ddpm);
    let a = ddpm_sample(&oracle, &plan, &sched, &p, 34).unwrap();
    p.threads = 4;
    let b = ddpm_sample(&oracle, &plan, &sched, &p, 34).unwrap();
    p.threads = 0;
    let c = ddpm_sample(&oracle, &plan, &sched, &p, 34).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.samples, c.samples);
    let d = ddpm_sample(&oracle, &plan, &sched, &p, 35).unwrap();
    assert_ne!(a.samples, d.samples);
}

#[test]
fn zero_guidance_is_the_unconditional_run() {
    let oracle = common::oracle("fixture-a.json");
    let sched = common::schedule();
    let mut p = params(16, UpdateRule::Ddpm);
    let uncond = ddpm_sample(&oracle, &EditPlan::none(""), &sched, &p, 36).unwrap();
    p.guidance = 0.0;
    let guided = ddpm_sample(&oracle, &EditPlan::none("a man"), &sched, &p, 36).unwrap();
    assert_eq!(uncond.samples, guided.samples);
}

struct Faulty {
    inner: conceptlab::oracle::AnalyticOracle,
    at: usize,
    nan: bool,
}

impl ScoreOracle for Faulty {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn steps(&self) -> usize {
        self.inner.steps()
    }
    fn evaluate(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        if req.t != self.at {
            return self.inner.evaluate(req);
        }
        if self.nan {
            Ok(vec![f64::NAN; self.dim()])
        } else {
            Err(OracleError::Transport("link down".into()))
        }
    }
}

#[test]
fn chains_abort_with_context() {
    for nan in [false, true] {
        let oracle = Faulty { inner: common::oracle("fixture-a.json"), at: 500, nan };
        let err = ddpm_sample(&oracle, &EditPlan::none("a man"), &common::schedule(), &params(3, UpdateRule::Ddpm), 37)
            .unwrap_err();
        match err {
            Error::ChainAborted { chain, t, reason } => {
                assert_eq!((chain, t), (0, 500));
                assert!(reason.contains(if nan { "non-finite" } else { "link down" }), "{reason}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }
}

#[test]
fn schedule_must_match_the_oracle() {
    let oracle = common::oracle("fixture-a.json");
    let short = Schedule::linear(100, 1e-4, 0.02).unwrap();
    assert!(matches!(
        ddpm_sample(&oracle, &EditPlan::none("a man"), &short, &params(1, UpdateRule::Ddpm), 38),
        Err(Error::InvalidSchedule(_))
    ));
    let mut bad = EditPlan::none("a man");
    bad.strength = -1.0;
    bad.method = conceptlab::edit::EditMethod::Negative;
    assert!(ddpm_sample(&oracle, &bad, &common::schedule(), &params(1, UpdateRule::Ddpm), 38).is_err());
}
