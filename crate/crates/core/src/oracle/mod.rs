//! The score-oracle contract: noise predictions `eps(y, t | prompt)`.
//!
//! Everything downstream (subspace estimation, editing, sampling) consumes
//! noise predictions. For the analytic oracle they are derived from exact
//! scores through [`EpsilonConversion`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::concept::{ConceptDistribution, PromptTable};
use crate::error::{OracleError, Result};
use crate::schedule::Schedule;
use crate::world::{PreparedConcepts, World};

pub mod protocol;
pub mod remote;
pub mod server;

pub use remote::RemoteOracle;
pub use server::ReferenceServer;

#[derive(Debug, Clone, Copy)]
pub struct OracleRequest<'a> {
    pub y: &'a [f64],
    pub t: usize,
    pub prompt: &'a str,
}

impl<'a> OracleRequest<'a> {
    pub fn new(prompt: &'a str, y: &'a [f64], t: usize) -> Self {
        Self { y, t, prompt }
    }
}

pub trait ScoreOracle: Send + Sync {
    /// Dimension `m` of the output space.
    fn dim(&self) -> usize;

    /// Number of diffusion steps `T`.
    fn steps(&self) -> usize;

    /// The noise prediction for `req.prompt` at `(req.y, req.t)`.
    fn evaluate(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError>;

    /// Evaluates several prompts at one point. Equal to per-prompt evaluation.
    fn evaluate_batch(&self, prompts: &[&str], y: &[f64], t: usize) -> Result<Vec<Vec<f64>>, OracleError> {
        prompts.iter().map(|p| self.evaluate(&OracleRequest::new(p, y, t))).collect()
    }

    /// The vector field subspace estimators difference. It is the noise
    /// prediction whenever that carries information; an oracle that can do
    /// better where the prediction degenerates (at `t = 0`, where the noise
    /// scale vanishes) overrides this with a positively proportional field.
    fn field(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        self.evaluate(req)
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for Arc<O> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn steps(&self) -> usize {
        (**self).steps()
    }
    fn evaluate(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        (**self).evaluate(req)
    }
    fn evaluate_batch(&self, prompts: &[&str], y: &[f64], t: usize) -> Result<Vec<Vec<f64>>, OracleError> {
        (**self).evaluate_batch(prompts, y, t)
    }
    fn field(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        (**self).field(req)
    }
}

/// `eps(y, t) = -sqrt(1 - alpha_bar_t) * s_t(y)`.
#[derive(Debug, Clone)]
pub struct EpsilonConversion {
    schedule: Arc<Schedule>,
}

impl EpsilonConversion {
    pub fn new(schedule: Arc<Schedule>) -> Self {
        Self { schedule }
    }

    pub fn to_epsilon(&self, score: &[f64], t: usize) -> Vec<f64> {
        let c = self.schedule.eps_scale(t);
        score.iter().map(|s| -c * s).collect()
    }

    /// Inverse conversion; undefined at `t = 0`, where the scale vanishes.
    pub fn to_score(&self, eps: &[f64], t: usize) -> Option<Vec<f64>> {
        if t == 0 {
            return None;
        }
        let c = self.schedule.eps_scale(t);
        Some(eps.iter().map(|e| -e / c).collect())
    }
}

/// Exact noise predictions from an analytic world.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    world: Arc<World>,
    prompts: PromptTable,
    schedule: Arc<Schedule>,
    conversion: EpsilonConversion,
    prepared: HashMap<String, PreparedConcepts>,
}

impl AnalyticOracle {
    pub fn new(world: Arc<World>, prompts: PromptTable, schedule: Arc<Schedule>) -> Result<Self> {
        let prepared = prompts
            .iter()
            .map(|(name, q)| Ok((name.to_string(), world.prepare(q)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            conversion: EpsilonConversion::new(schedule.clone()),
            world,
            prompts,
            schedule,
            prepared,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn prompts(&self) -> &PromptTable {
        &self.prompts
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn conversion(&self) -> &EpsilonConversion {
        &self.conversion
    }

    fn check(&self, y: &[f64], t: usize) -> Result<(), OracleError> {
        if y.len() != self.world.dim() {
            return Err(OracleError::DimensionMismatch { expected: self.world.dim(), got: y.len() });
        }
        if t > self.schedule.steps() {
            return Err(OracleError::TimestepOutOfRange { t, steps: self.schedule.steps() });
        }
        Ok(())
    }

    fn prepared(&self, prompt: &str) -> Result<&PreparedConcepts, OracleError> {
        self.prepared.get(prompt).ok_or_else(|| OracleError::UnknownPrompt(prompt.to_string()))
    }

    /// Exact score `grad_y log p_t(y | prompt)`, defined at every `t` including 0.
    pub fn score(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        self.check(req.y, req.t)?;
        let prep = self.prepared(req.prompt)?;
        Ok(self
            .world
            .score_prepared(prep, req.y, self.schedule.alpha_bar(req.t))
            .expect("checked inputs"))
    }

    /// Noise prediction for an arbitrary concept distribution over the world's factors.
    pub fn evaluate_distribution(&self, q: &ConceptDistribution, y: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(y, t)?;
        let s = self.world.score(q, y, self.schedule.alpha_bar(t))?;
        Ok(self.conversion.to_epsilon(&s, t))
    }

    /// [`ScoreOracle::field`] for an arbitrary concept distribution.
    pub fn field_distribution(&self, q: &ConceptDistribution, y: &[f64], t: usize) -> Result<Vec<f64>> {
        if t == 0 {
            self.check(y, t)?;
            let s = self.world.score(q, y, 1.0)?;
            return Ok(s.iter().map(|v| -v).collect());
        }
        self.evaluate_distribution(q, y, t)
    }
}

impl ScoreOracle for AnalyticOracle {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn evaluate(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        let s = self.score(req)?;
        Ok(self.conversion.to_epsilon(&s, req.t))
    }

    /// At `t = 0` returns `-s_0(y)`, the limit of `eps / sqrt(1 - alpha_bar)`.
    fn field(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        if req.t == 0 {
            return Ok(self.score(req)?.into_iter().map(|v| -v).collect());
        }
        self.evaluate(req)
    }
}
