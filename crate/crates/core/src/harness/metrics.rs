//! Sample-level statistics. Everything here depends only on a world and
//! persisted samples, so it can be recomputed offline.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptDistribution, PromptTable};
use crate::error::{Error, Result};
use crate::oracle::{AnalyticOracle, ScoreOracle};
use crate::subspace::{find_subspace_mask, numerical_rank, DeltaMatrix, MaskParams, RANK_TOL};
use crate::world::World;

/// Total-variation distance between two histograms over the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Normalized histogram of MAP labels for `space` over clean samples,
/// classified under `prior`.
pub fn map_histogram(world: &World, prior: &ConceptDistribution, samples: &[Vec<f64>], space: &str) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidPlan("no samples to classify".into()));
    }
    let prep = world.prepare(prior)?;
    let l = world.factors()[world.factor_index(space)?].len();
    let mut hist = vec![0.0; l];
    for y in samples {
        hist[argmax(&world.posterior_prepared(&prep, y, 1.0, space)?)] += 1.0;
    }
    let n = samples.len() as f64;
    Ok(hist.into_iter().map(|c| c / n).collect())
}

/// Average soft posterior over `space`.
pub fn mean_posterior(world: &World, prior: &ConceptDistribution, samples: &[Vec<f64>], space: &str) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidPlan("no samples to classify".into()));
    }
    let prep = world.prepare(prior)?;
    let l = world.factors()[world.factor_index(space)?].len();
    let mut acc = vec![0.0; l];
    for y in samples {
        for (a, p) in acc.iter_mut().zip(world.posterior_prepared(&prep, y, 1.0, space)?) {
            *a += p;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|c| c / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub label: String,
    pub target_space: String,
    pub off_space: String,
    /// TV between the edited run's target histogram and the intended distribution.
    pub target_shift: f64,
    /// TV between the off-target histograms of the edited and original runs.
    pub off_target_leakage: f64,
    pub intended: Vec<f64>,
    pub edited_target: Vec<f64>,
    pub edited_off: Vec<f64>,
    pub original_off: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub rows: Vec<LeakageRow>,
    pub note: String,
}

pub const LEAKAGE_NOTE: &str = "MAP-histogram total variation; a mechanical stand-in, not a human evaluation";

/// Target shift and off-target leakage of an edited run against its unedited
/// counterpart. Samples are classified at `t = 0` under `prior`.
#[allow(clippy::too_many_arguments)]
pub fn leakage(
    label: &str,
    world: &World,
    prior: &ConceptDistribution,
    edited: &[Vec<f64>],
    original: &[Vec<f64>],
    target_space: &str,
    off_space: &str,
    intended: &[f64],
) -> Result<LeakageRow> {
    if edited.is_empty() || original.is_empty() {
        return Err(Error::InvalidPlan("leakage needs nonempty sample sets".into()));
    }
    let edited_target = map_histogram(world, prior, edited, target_space)?;
    let edited_off = map_histogram(world, prior, edited, off_space)?;
    let original_off = map_histogram(world, prior, original, off_space)?;
    Ok(LeakageRow {
        label: label.into(),
        target_space: target_space.into(),
        off_space: off_space.into(),
        target_shift: total_variation(&edited_target, intended)?,
        off_target_leakage: total_variation(&edited_off, &original_off)?,
        intended: intended.to_vec(),
        edited_target,
        edited_off,
        original_off,
    })
}

/// Marginal over `space` of a convex combination of prompts.
pub fn intended_marginal(table: &PromptTable, components: &[(f64, &str)], space: &str) -> Result<Vec<f64>> {
    let mut out: Option<Vec<f64>> = None;
    for (w, name) in components {
        let m = table.get(name)?.marginal(&[space])?.joint();
        match &mut out {
            None => out = Some(m.iter().map(|v| w * v).collect()),
            Some(acc) => acc.iter_mut().zip(&m).for_each(|(a, v)| *a += w * v),
        }
    }
    out.ok_or_else(|| Error::InvalidPlan("intended distribution has no components".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    /// Value labels, one per world factor.
    pub values: Vec<String>,
    pub weight: f64,
    pub occupancy: f64,
    pub mean: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    /// Output coordinates on which the component means are not all equal.
    pub coordinates: Vec<usize>,
    pub components: Vec<ComponentFit>,
    pub max_occupancy_error: f64,
    pub max_mean_error: f64,
}

/// Soft-assignment fit of samples against the clean mixture of `q`: each
/// component's occupancy is its mean responsibility, and its mean estimate is
/// the responsibility-weighted sample mean on the coordinates that separate
/// components.
pub fn occupancy(world: &World, q: &ConceptDistribution, samples: &[Vec<f64>]) -> Result<OccupancyReport> {
    if samples.is_empty() {
        return Err(Error::InvalidPlan("no samples".into()));
    }
    let comps = world.mixture_components(q, 1.0)?;
    let m = world.dim();
    let coordinates: Vec<usize> = (0..m)
        .filter(|&i| comps.iter().any(|c| c.mean[i] != comps[0].mean[i]))
        .collect();
    let mut factors = Vec::with_capacity(comps.len());
    for c in &comps {
        let chol = c
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidWorld("component covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        factors.push((chol, log_det));
    }
    let k = comps.len();
    let mut occ = vec![0.0; k];
    let mut sums = vec![vec![0.0; coordinates.len()]; k];
    let mut logp = vec![0.0; k];
    for y in samples {
        if y.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: y.len() });
        }
        let yv = DVector::from_column_slice(y);
        for (j, c) in comps.iter().enumerate() {
            let d = &yv - &c.mean;
            let sol = factors[j].0.solve(&d);
            logp[j] = c.weight.ln() - 0.5 * (d.dot(&sol) + factors[j].1);
        }
        let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..k {
            let r = (logp[j] - mx).exp() / z;
            occ[j] += r;
            for (s, &i) in sums[j].iter_mut().zip(&coordinates) {
                *s += r * y[i];
            }
        }
    }
    let n = samples.len() as f64;
    let mut out = Vec::with_capacity(k);
    let (mut max_occ, mut max_mean) = (0.0f64, 0.0f64);
    for (j, c) in comps.iter().enumerate() {
        let mean: Vec<f64> = coordinates.iter().map(|&i| c.mean[i]).collect();
        let estimate: Vec<f64> = sums[j].iter().map(|s| s / occ[j]).collect();
        max_occ = max_occ.max((occ[j] / n - c.weight).abs());
        for (a, b) in mean.iter().zip(&estimate) {
            max_mean = max_mean.max((a - b).abs());
        }
        let values = c
            .values
            .iter()
            .zip(world.factors())
            .map(|(&v, f)| f.values()[v].clone())
            .collect();
        out.push(ComponentFit { values, weight: c.weight, occupancy: occ[j] / n, mean, estimate });
    }
    Ok(OccupancyReport { coordinates, components: out, max_occupancy_error: max_occ, max_mean_error: max_mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Row-major sample covariance (denominator `n - 1`).
    pub covariance: Vec<Vec<f64>>,
}

pub fn moments(samples: &[Vec<f64>]) -> Result<Moments> {
    if samples.len() < 2 {
        return Err(Error::InvalidPlan("moments need at least two samples".into()));
    }
    let m = samples[0].len();
    let n = samples.len();
    let x = DMatrix::from_fn(n, m, |i, j| samples[i][j]);
    let mean: Vec<f64> = (0..m).map(|j| x.column(j).sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    Ok(Moments { mean, covariance: (0..m).map(|i| cov.row(i).iter().cloned().collect()).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub t: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub concept: Vec<String>,
    /// `sum_k (L_k - 1)` over the concept's factors.
    pub bound: usize,
    pub probes: usize,
    pub points: Vec<RankPoint>,
}

impl RankReport {
    pub fn max_rank(&self) -> usize {
        self.points.iter().map(|p| p.rank).max().unwrap_or(0)
    }

    /// Fraction of points at which the rank reaches the bound.
    pub fn full_rank_fraction(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().filter(|p| p.rank == self.bound).count() as f64 / self.points.len() as f64
    }
}

fn random_simplex(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `q_z` over the concept factors combined with each remaining factor's
/// marginal under `prior`, in world factor order. Concept factors must be
/// contiguous and listed in world order.
pub fn with_concept(world: &World, prior: &ConceptDistribution, concept: &[&str], q_z: &ConceptDistribution) -> Result<ConceptDistribution> {
    let idx: Vec<usize> = concept.iter().map(|c| world.factor_index(c)).collect::<Result<_>>()?;
    if idx.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::InvalidPlan(format!("concept factors {concept:?} must be adjacent and in world order")));
    }
    let mut out = ConceptDistribution::trivial();
    let mut placed = false;
    for (i, f) in world.factors().iter().enumerate() {
        if idx.contains(&i) {
            if !placed {
                out = out.product(q_z)?;
                placed = true;
            }
        } else {
            out = out.product(&prior.marginal(&[f.name()])?)?;
        }
    }
    Ok(out)
}

/// Numerical ranks of the field-difference matrix built from `probes`
/// random concept distributions at `points` random `(y, t)`. `y` is drawn
/// from the world's prior mixture and noised to a uniformly drawn level.
pub fn rank_report(oracle: &AnalyticOracle, concept: &[&str], probes: usize, points: usize, seed: u64) -> Result<RankReport> {
    if probes < 2 {
        return Err(Error::InvalidPlan("rank report needs at least two probes".into()));
    }
    let world = oracle.world();
    let prior = oracle.prompts().marginal().clone();
    let spaces: Vec<_> = concept
        .iter()
        .map(|c| world.factor_index(c).map(|i| world.factors()[i].clone()))
        .collect::<Result<_>>()?;
    let bound = spaces.iter().map(|s| s.len() - 1).sum();
    let cells: usize = spaces.iter().map(|s| s.len()).product();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let qs: Vec<ConceptDistribution> = (0..probes)
        .map(|_| {
            let q_z = ConceptDistribution::from_joint(spaces.clone(), random_simplex(&mut rng, cells))?;
            with_concept(world, &prior, concept, &q_z)
        })
        .collect::<Result<_>>()?;
    let clean = world.sample_ground_truth(&prior, points, rng.random())?;
    let steps = oracle.steps();
    let mut out = Vec::with_capacity(points);
    for y0 in &clean {
        let t = rng.random_range(1..=steps);
        let y = World::noise_samples(std::slice::from_ref(y0), oracle.schedule().alpha_bar(t), rng.random()).remove(0);
        let fields: Vec<Vec<f64>> = qs.iter().map(|q| oracle.field_distribution(q, &y, t)).collect::<Result<_>>()?;
        let dm = DeltaMatrix::from_fields(&fields[0], &fields[1..])?;
        let sv = dm.singular_values();
        out.push(RankPoint { t, rank: numerical_rank(&sv, RANK_TOL), singular_values: sv });
    }
    Ok(RankReport { concept: concept.iter().map(|s| s.to_string()).collect(), bound, probes, points: out })
}

/// Intersection over union of two index sets; two empty sets score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub t: usize,
    pub threshold: f64,
    pub expected: Vec<usize>,
    pub recovered: Vec<usize>,
    pub iou: f64,
}

/// Recovers a mask from a prompt pair at a point drawn from the prior and
/// noised to `t`, and scores it against the coordinates of `expected` factors.
pub fn mask_recovery(
    oracle: &AnalyticOracle,
    pair: (&str, &str),
    t: usize,
    params: &MaskParams,
    expected_factors: &[&str],
    seed: u64,
) -> Result<MaskReport> {
    let world = oracle.world();
    let prior = oracle.prompts().marginal().clone();
    let y0 = world.sample_ground_truth(&prior, 1, seed)?;
    let y = World::noise_samples(&y0, oracle.schedule().alpha_bar(t), seed.wrapping_add(1)).remove(0);
    let p = find_subspace_mask(oracle, &y, t, pair, params)?;
    let bits = p.mask().expect("mask projector").to_vec();
    let expected = world.coordinates_of(expected_factors)?;
    let mut want = vec![false; world.dim()];
    for &i in &expected {
        want[i] = true;
    }
    Ok(MaskReport {
        t,
        threshold: params.threshold,
        recovered: (0..bits.len()).filter(|&i| bits[i]).collect(),
        iou: iou(&bits, &want),
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_extremes() {
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(total_variation(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[true, false, true], &[true, false, true]), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]), 0.0);
        assert_eq!(iou(&[false, false], &[false, false]), 1.0);
        assert_eq!(iou(&[true, true, false], &[true, false, false]), 0.5);
    }

    #[test]
    fn moments_of_two_points() {
        let m = moments(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(m.mean, vec![1.0, 2.0]);
        assert_eq!(m.covariance, vec![vec![2.0, 2.0], vec![2.0, 2.0]]);
    }
}
