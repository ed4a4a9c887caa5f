//! Edited noise-prediction fields: projection edits and the composition and
//! negative-prompting baselines they are compared against.

use serde::{Deserialize, Serialize};

use crate::concept::{PromptTable, EMPTY_PROMPT};
use crate::error::{Error, Result};
use crate::oracle::{OracleRequest, ScoreOracle};
use crate::subspace::{
    delta_matrix, find_subspace_basis, find_subspace_mask, MaskParams, ProjectorForm, SubspaceProjector,
    SubspaceWarning, DEFAULT_THRES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMethod {
    Projection,
    Composition,
    Negative,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrompt {
    pub weight: f64,
    pub prompt: String,
}

impl WeightedPrompt {
    pub fn new(weight: f64, prompt: &str) -> Self {
        Self { weight, prompt: prompt.into() }
    }
}

/// The replacement field inside the concept subspace: a prompt, or a convex
/// combination of prompts' fields that need not correspond to any prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EditTarget {
    Prompt(String),
    Mixture(Vec<WeightedPrompt>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubspaceMethod {
    Basis {
        #[serde(default = "default_thres")]
        thres: f64,
    },
    Mask(MaskParams),
}

fn default_thres() -> f64 {
    DEFAULT_THRES
}

impl Default for SubspaceMethod {
    fn default() -> Self {
        SubspaceMethod::Basis { thres: DEFAULT_THRES }
    }
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPlan {
    pub method: EditMethod,
    pub x_orig: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_new: Option<EditTarget>,
    /// Spanning prompts; the first is the reference. A mask uses the first two.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spanning: Vec<String>,
    #[serde(default)]
    pub subspace: SubspaceMethod,
    /// Concept factors the spanning prompts vary; used to check them against
    /// an analytic prompt table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concept: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<WeightedPrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// Fraction of the earliest (noisiest) sampling steps that use `x_orig`
    /// unedited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_fraction: Option<f64>,
}

impl EditPlan {
    pub fn none(x_orig: &str) -> Self {
        Self {
            method: EditMethod::None,
            x_orig: x_orig.into(),
            x_new: None,
            spanning: Vec::new(),
            subspace: SubspaceMethod::default(),
            concept: Vec::new(),
            attachments: Vec::new(),
            negative: None,
            strength: 1.0,
            switch_fraction: None,
        }
    }

    pub fn projection(x_orig: &str, x_new: EditTarget, spanning: &[&str]) -> Self {
        Self {
            method: EditMethod::Projection,
            x_new: Some(x_new),
            spanning: spanning.iter().map(|s| s.to_string()).collect(),
            ..Self::none(x_orig)
        }
    }

    pub fn composition(x_orig: &str, attachments: Vec<WeightedPrompt>) -> Self {
        Self { method: EditMethod::Composition, attachments, ..Self::none(x_orig) }
    }

    pub fn negative(x_orig: &str, x_neg: &str, strength: f64) -> Self {
        Self { method: EditMethod::Negative, negative: Some(x_neg.into()), strength, ..Self::none(x_orig) }
    }

    /// Every prompt name the plan evaluates.
    pub fn prompts(&self) -> Vec<&str> {
        let mut out = vec![self.x_orig.as_str()];
        match &self.x_new {
            Some(EditTarget::Prompt(p)) => out.push(p),
            Some(EditTarget::Mixture(c)) => out.extend(c.iter().map(|w| w.prompt.as_str())),
            None => {}
        }
        out.extend(self.spanning.iter().map(String::as_str));
        out.extend(self.attachments.iter().map(|w| w.prompt.as_str()));
        out.extend(self.negative.as_deref());
        if matches!(self.method, EditMethod::Composition | EditMethod::Negative) {
            out.push(EMPTY_PROMPT);
        }
        out
    }

    /// All structural problems with the plan.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.method {
            EditMethod::Projection => {
                if self.spanning.len() < 2 {
                    out.push("projection needs at least two spanning prompts".to_string());
                }
                if self.x_new.is_none() {
                    out.push("projection needs x_new".to_string());
                }
                match &self.subspace {
                    SubspaceMethod::Basis { thres } if !(*thres > 0.0 && *thres <= 1.0) => {
                        out.push(format!("thres {thres} outside (0, 1]"))
                    }
                    SubspaceMethod::Mask(m) if !(m.threshold >= 0.0) || !(m.blur_sigma >= 0.0) => {
                        out.push("mask threshold and blur must be non-negative".to_string())
                    }
                    SubspaceMethod::Mask(m) if m.blur_sigma > 0.0 && m.grid.is_none() => {
                        out.push("mask blur needs a grid".to_string())
                    }
                    _ => {}
                }
            }
            EditMethod::Negative => {
                if self.negative.is_none() {
                    out.push("negative prompting needs a negative prompt".to_string());
                }
                if !(self.strength >= 0.0 && self.strength.is_finite()) {
                    out.push(format!("strength {} must be finite and non-negative", self.strength));
                }
            }
            EditMethod::Composition | EditMethod::None => {}
        }
        if let Some(EditTarget::Mixture(c)) = &self.x_new {
            if c.is_empty() {
                out.push("mixture target has no components".to_string());
            }
            let total: f64 = c.iter().map(|w| w.weight).sum();
            if c.iter().any(|w| !w.weight.is_finite() || w.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
                out.push(format!("mixture target weights must be non-negative and sum to 1 (sum {total})"));
            }
        }
        if self.attachments.iter().any(|w| !w.weight.is_finite()) {
            out.push("attachment weights must be finite".to_string());
        }
        if let Some(f) = self.switch_fraction {
            if !(0.0..=1.0).contains(&f) {
                out.push(format!("switch_fraction {f} outside [0, 1]"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidPlan(p.join("; ")))
        }
    }

    /// Problems with the spanning prompts against an analytic prompt table:
    /// every spanning prompt must factor as `Q_Z x Q_W` with one shared `Q_W`.
    pub fn spanning_problems(&self, table: &PromptTable) -> Vec<String> {
        let mut out = Vec::new();
        if self.method != EditMethod::Projection || self.concept.is_empty() {
            return out;
        }
        let mut shared: Option<Vec<f64>> = None;
        for name in &self.spanning {
            let Ok(q) = table.get(name) else { continue };
            let z: Vec<&str> = self.concept.iter().map(String::as_str).collect();
            let w: Vec<&str> = q.space_names().into_iter().filter(|s| !z.contains(s)).collect();
            let (Ok(qz), Ok(qw)) = (q.marginal(&z), q.marginal(&w)) else {
                out.push(format!("spanning prompt {name:?} lacks concept factors {z:?}"));
                continue;
            };
            let mut order: Vec<&str> = z.clone();
            order.extend(&w);
            let joint = q.marginal(&order).map(|m| m.joint()).unwrap_or_default();
            let prod = qz.product(&qw).map(|p| p.joint()).unwrap_or_default();
            if joint.iter().zip(&prod).any(|(a, b)| (a - b).abs() > 1e-12) {
                out.push(format!("spanning prompt {name:?} is not a product over the concept and the rest"));
            }
            let wj = qw.joint();
            match &shared {
                None => shared = Some(wj),
                Some(s) if s.iter().zip(&wj).any(|(a, b)| (a - b).abs() > 1e-12) => out.push(format!(
                    "spanning prompt {name:?} changes the distribution outside the concept"
                )),
                _ => {}
            }
        }
        out
    }

    /// Whether step `t` of a `steps`-step run still uses `x_orig` unedited.
    pub fn in_warmup(&self, t: usize, steps: usize) -> bool {
        match self.switch_fraction {
            Some(f) => (t as f64) > steps as f64 * (1.0 - f),
            None => false,
        }
    }
}

/// An edited noise prediction and any warning raised while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct Edited {
    pub eps: Vec<f64>,
    pub warning: Option<SubspaceWarning>,
}

fn eval<O: ScoreOracle + ?Sized>(oracle: &O, prompt: &str, y: &[f64], t: usize) -> Result<Vec<f64>> {
    Ok(oracle.evaluate(&OracleRequest::new(prompt, y, t))?)
}

/// `(I - P) eps_orig + P eps_new`.
pub fn apply_projection(p: &SubspaceProjector, eps_orig: &[f64], eps_new: &[f64]) -> Result<Vec<f64>> {
    if eps_orig.len() != p.dim() || eps_new.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: eps_orig.len().max(eps_new.len()) });
    }
    match p.form() {
        ProjectorForm::Mask(bits) => Ok(bits
            .iter()
            .zip(eps_orig.iter().zip(eps_new))
            .map(|(&b, (o, n))| if b { *n } else { *o })
            .collect()),
        ProjectorForm::Basis(_) => {
            let diff: Vec<f64> = eps_new.iter().zip(eps_orig).map(|(n, o)| n - o).collect();
            let moved = p.project(&diff)?;
            Ok(eps_orig.iter().zip(&moved).map(|(o, d)| o + d).collect())
        }
    }
}

/// Builds the projector a plan uses at `(y, t)`.
pub fn plan_projector<O: ScoreOracle + ?Sized>(oracle: &O, plan: &EditPlan, y: &[f64], t: usize) -> Result<SubspaceProjector> {
    match &plan.subspace {
        SubspaceMethod::Basis { thres } => {
            let prompts: Vec<&str> = plan.spanning.iter().map(String::as_str).collect();
            find_subspace_basis(&delta_matrix(oracle, y, t, &prompts)?, *thres)
        }
        SubspaceMethod::Mask(params) => {
            let [a, b, ..] = plan.spanning.as_slice() else {
                return Err(Error::InvalidPlan("mask needs two spanning prompts".into()));
            };
            find_subspace_mask(oracle, y, t, (a, b), params)
        }
    }
}

/// `sum_i w_i eps(y, t | x_i)`.
pub fn mixture_target_epsilon<O: ScoreOracle + ?Sized>(
    oracle: &O,
    components: &[WeightedPrompt],
    y: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; y.len()];
    for c in components {
        let e = eval(oracle, &c.prompt, y, t)?;
        out.iter_mut().zip(&e).for_each(|(o, v)| *o += c.weight * v);
    }
    Ok(out)
}

fn target_epsilon<O: ScoreOracle + ?Sized>(oracle: &O, target: &EditTarget, y: &[f64], t: usize) -> Result<Vec<f64>> {
    match target {
        EditTarget::Prompt(p) => eval(oracle, p, y, t),
        EditTarget::Mixture(c) => mixture_target_epsilon(oracle, c, y, t),
    }
}

/// `eps(y, t | q) - eps(y, t | q0)`.
pub fn centered_epsilon<O: ScoreOracle + ?Sized>(oracle: &O, prompt: &str, baseline: &str, y: &[f64], t: usize) -> Result<Vec<f64>> {
    let a = eval(oracle, prompt, y, t)?;
    let b = eval(oracle, baseline, y, t)?;
    Ok(a.iter().zip(&b).map(|(x, z)| x - z).collect())
}

/// `eps(x_orig) + sum_i w_i (eps(x_i) - eps(""))`.
pub fn composed_epsilon<O: ScoreOracle + ?Sized>(
    oracle: &O,
    x_orig: &str,
    attachments: &[WeightedPrompt],
    y: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let mut out = eval(oracle, x_orig, y, t)?;
    if attachments.is_empty() {
        return Ok(out);
    }
    let empty = eval(oracle, EMPTY_PROMPT, y, t)?;
    for a in attachments {
        let e = eval(oracle, &a.prompt, y, t)?;
        for ((o, v), u) in out.iter_mut().zip(&e).zip(&empty) {
            *o += a.weight * (v - u);
        }
    }
    Ok(out)
}

/// `eps(x_orig) - strength (eps(x_neg) - eps(""))`.
pub fn negative_epsilon<O: ScoreOracle + ?Sized>(
    oracle: &O,
    x_orig: &str,
    x_neg: &str,
    strength: f64,
    y: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    if !(strength >= 0.0) {
        return Err(Error::InvalidPlan(format!("strength {strength} is negative")));
    }
    let mut out = eval(oracle, x_orig, y, t)?;
    let neg = eval(oracle, x_neg, y, t)?;
    let empty = eval(oracle, EMPTY_PROMPT, y, t)?;
    for ((o, n), u) in out.iter_mut().zip(&neg).zip(&empty) {
        *o -= strength * (n - u);
    }
    Ok(out)
}

/// The conditional noise prediction a plan produces at `(y, t)`.
pub fn edited_epsilon<O: ScoreOracle + ?Sized>(oracle: &O, plan: &EditPlan, y: &[f64], t: usize) -> Result<Edited> {
    if plan.in_warmup(t, oracle.steps()) {
        return Ok(Edited { eps: eval(oracle, &plan.x_orig, y, t)?, warning: None });
    }
    match plan.method {
        EditMethod::None => Ok(Edited { eps: eval(oracle, &plan.x_orig, y, t)?, warning: None }),
        EditMethod::Projection => {
            let target = plan
                .x_new
                .as_ref()
                .ok_or_else(|| Error::InvalidPlan("projection needs x_new".into()))?;
            let p = plan_projector(oracle, plan, y, t)?;
            let orig = eval(oracle, &plan.x_orig, y, t)?;
            if p.rank() == 0 {
                return Ok(Edited { eps: orig, warning: p.warning() });
            }
            let new = target_epsilon(oracle, target, y, t)?;
            Ok(Edited { eps: apply_projection(&p, &orig, &new)?, warning: p.warning() })
        }
        EditMethod::Composition => Ok(Edited {
            eps: composed_epsilon(oracle, &plan.x_orig, &plan.attachments, y, t)?,
            warning: None,
        }),
        EditMethod::Negative => {
            let neg = plan
                .negative
                .as_deref()
                .ok_or_else(|| Error::InvalidPlan("negative prompting needs a negative prompt".into()))?;
            Ok(Edited { eps: negative_epsilon(oracle, &plan.x_orig, neg, plan.strength, y, t)?, warning: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_extremes() {
        let orig = [1.0, -2.0, 0.5];
        let new = [0.3, 4.0, -1.0];
        assert_eq!(apply_projection(&SubspaceProjector::zero(3), &orig, &new).unwrap(), orig.to_vec());
        assert_eq!(apply_projection(&SubspaceProjector::identity(3), &orig, &new).unwrap(), new.to_vec());
        let p = SubspaceProjector::from_span(&nalgebra::DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 2.0]));
        assert_eq!(apply_projection(&p, &orig, &orig).unwrap(), orig.to_vec());
    }

    #[test]
    fn plan_validation() {
        let mut p = EditPlan::projection("a", EditTarget::Prompt("b".into()), &["a"]);
        assert!(p.validate().is_err());
        p.spanning.push("b".into());
        assert!(p.validate().is_ok());
        p.x_new = Some(EditTarget::Mixture(vec![WeightedPrompt::new(0.5, "a"), WeightedPrompt::new(0.4, "b")]));
        assert!(p.validate().is_err());
        assert!(EditPlan::negative("a", "b", -1.0).validate().is_err());
        let mut n = EditPlan::none("a");
        n.switch_fraction = Some(1.5);
        assert!(n.validate().is_err());
    }

    #[test]
    fn warmup_covers_the_noisiest_steps() {
        let mut p = EditPlan::none("a");
        p.switch_fraction = Some(0.2);
        let warm: Vec<usize> = (1..=10).filter(|&t| p.in_warmup(t, 10)).collect();
        assert_eq!(warm, vec![9, 10]);
    }

    proptest! {
        #[test]
        fn projection_affine_identity(
            orig in proptest::collection::vec(-10.0f64..10.0, 5),
            new in proptest::collection::vec(-10.0f64..10.0, 5),
            bits in proptest::collection::vec(any::<bool>(), 5),
        ) {
            let p = SubspaceProjector::from_mask(bits);
            let a = apply_projection(&p, &orig, &new).unwrap();
            let b = apply_projection(&p.complement(), &orig, &new).unwrap();
            for i in 0..5 {
                prop_assert_eq!(a[i] + b[i], orig[i] + new[i]);
            }
        }

        #[test]
        fn projection_affine_identity_basis(
            orig in proptest::collection::vec(-10.0f64..10.0, 4),
            new in proptest::collection::vec(-10.0f64..10.0, 4),
            span in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let m = nalgebra::DMatrix::from_column_slice(4, 2, &span);
            prop_assume!(m.clone().svd(false, false).singular_values.min() > 1e-3);
            let p = SubspaceProjector::from_span(&m);
            let a = apply_projection(&p, &orig, &new).unwrap();
            let b = apply_projection(&p.complement(), &orig, &new).unwrap();
            for i in 0..4 {
                prop_assert!((a[i] + b[i] - orig[i] - new[i]).abs() < 1e-10);
            }
        }
    }
}
