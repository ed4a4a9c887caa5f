//! Analytic generative worlds with Gaussian emissions.
//!
//! A world is a set of categorical factors and a list of emission blocks. Each
//! block owns a contiguous run of internal coordinates and draws them from a
//! diagonal Gaussian selected by the values of its parent factors, followed by
//! an invertible affine map acting on that block alone. An optional output
//! permutation scatters the internal coordinates.
//!
//! When every block has parents entirely inside or entirely outside a concept
//! set Z, the world is causally separable with respect to Z. Because the
//! mixing map is block-diagonal, variance-preserving noising
//! `Y_t = sqrt(abar) Y + sqrt(1 - abar) eps` keeps every block independent, so
//! separability holds at every noise level.
//!
//! Densities are evaluated per cluster: factors coupled through a weight group
//! of the concept distribution or through a shared block are evaluated
//! together, everything else independently. Blocks in different clusters
//! therefore never see each other's numbers.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concept::{strides, unravel, ConceptDistribution, ConceptSpace};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Raw (pre-transform) diagonal Gaussian emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmission {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    /// Row-major square matrix.
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
}

/// Declarative description of one emission block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Factor names whose values select the emission, row-major in this order.
    #[serde(default)]
    pub parents: Vec<String>,
    pub emissions: Vec<GaussianEmission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<AffineSpec>,
}

#[derive(Debug, Clone)]
enum Covariance {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone)]
enum Transform {
    Identity,
    Diagonal { scale: Vec<f64>, offset: Vec<f64> },
    Full { matrix: DMatrix<f64>, offset: DVector<f64> },
}

impl Transform {
    fn apply(&self, raw: &[f64]) -> Vec<f64> {
        match self {
            Transform::Identity => raw.to_vec(),
            Transform::Diagonal { scale, offset } => {
                raw.iter().zip(scale).zip(offset).map(|((x, a), b)| a * x + b).collect()
            }
            Transform::Full { matrix, offset } => {
                (matrix * DVector::from_column_slice(raw) + offset).as_slice().to_vec()
            }
        }
    }
}

/// Post-transform moments of one block component at t = 0.
#[derive(Debug, Clone)]
struct Moments {
    mean: Vec<f64>,
    cov: Covariance,
}

#[derive(Debug, Clone)]
struct Block {
    spec: BlockSpec,
    dim: usize,
    offset: usize,
    parents: Vec<usize>,
    parent_strides: Vec<usize>,
    transform: Transform,
    moments: Vec<Moments>,
}

impl Block {
    fn config_of(&self, values: &[usize]) -> usize {
        self.parents.iter().zip(&self.parent_strides).map(|(&p, s)| values[p] * s).sum()
    }

    /// Log density and gradient of component `k` at noise level `alpha_bar`.
    fn log_normal(&self, k: usize, y: &[f64], alpha_bar: f64, grad: &mut [f64]) -> f64 {
        let m = &self.moments[k];
        let scale = alpha_bar.sqrt();
        match &m.cov {
            Covariance::Diagonal(v) => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    let var = alpha_bar * v[i] + (1.0 - alpha_bar);
                    let r = y[i] - scale * m.mean[i];
                    grad[i] = -r / var;
                    acc += r * r / var + var.ln();
                }
                -0.5 * (acc + self.dim as f64 * LN_2PI)
            }
            Covariance::Full(c) => {
                let cov = c * alpha_bar + DMatrix::identity(self.dim, self.dim) * (1.0 - alpha_bar);
                let chol = Cholesky::new(cov).expect("noised covariance is positive definite");
                let r = DVector::from_iterator(
                    self.dim,
                    (0..self.dim).map(|i| y[i] - scale * m.mean[i]),
                );
                let sol = chol.solve(&r);
                let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
                for i in 0..self.dim {
                    grad[i] = -sol[i];
                }
                -0.5 * (r.dot(&sol) + log_det + self.dim as f64 * LN_2PI)
            }
        }
    }
}

/// A causally structured Gaussian-emission world.
#[derive(Debug, Clone)]
pub struct World {
    factors: Vec<ConceptSpace>,
    blocks: Vec<Block>,
    dim: usize,
    permutation: Option<Vec<usize>>,
}

/// A concept distribution compiled against a world.
#[derive(Debug, Clone)]
pub struct PreparedConcepts {
    clusters: Vec<Cluster>,
    free_blocks: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Cluster {
    factors: Vec<usize>,
    blocks: Vec<usize>,
    cells: Vec<Cell>,
}

#[derive(Debug, Clone)]
struct Cell {
    log_weight: f64,
    /// Value index per cluster factor.
    values: Vec<usize>,
    /// Component index per cluster block.
    configs: Vec<usize>,
}

/// One Gaussian component of a world's mixture, in output coordinates.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub values: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut j = i;
    while parent[j] != r {
        let next = parent[j];
        parent[j] = r;
        j = next;
    }
    r
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

impl World {
    pub fn new(
        factors: Vec<ConceptSpace>,
        specs: Vec<BlockSpec>,
        permutation: Option<Vec<usize>>,
    ) -> Result<Self> {
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].iter().any(|o| o.name() == f.name()) {
                return Err(Error::InvalidWorld(format!("factor `{}` listed twice", f.name())));
            }
        }
        if specs.is_empty() {
            return Err(Error::InvalidWorld("world has no emission blocks".into()));
        }
        let mut blocks = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in specs {
            let block = Self::build_block(&factors, spec, offset)?;
            offset += block.dim;
            blocks.push(block);
        }
        let dim = offset;
        if let Some(p) = &permutation {
            let mut seen = vec![false; dim];
            if p.len() != dim {
                return Err(Error::InvalidWorld(format!(
                    "permutation has {} entries for {dim} coordinates",
                    p.len()
                )));
            }
            for &i in p {
                if i >= dim || seen[i] {
                    return Err(Error::InvalidWorld("permutation is not a bijection".into()));
                }
                seen[i] = true;
            }
        }
        Ok(Self { factors, blocks, dim, permutation })
    }

    fn build_block(factors: &[ConceptSpace], spec: BlockSpec, offset: usize) -> Result<Block> {
        let bad = |msg: String| Error::InvalidWorld(format!("block `{}`: {msg}", spec.name));
        let mut parents = Vec::with_capacity(spec.parents.len());
        for p in &spec.parents {
            let idx = factors
                .iter()
                .position(|f| f.name() == p)
                .ok_or_else(|| bad(format!("unknown parent factor `{p}`")))?;
            if parents.contains(&idx) {
                return Err(bad(format!("parent `{p}` listed twice")));
            }
            parents.push(idx);
        }
        let cards: Vec<usize> = parents.iter().map(|&p| factors[p].len()).collect();
        let configs: usize = cards.iter().product();
        if spec.emissions.len() != configs {
            return Err(bad(format!(
                "{} emissions for {configs} parent configurations",
                spec.emissions.len()
            )));
        }
        let dim = spec.emissions[0].mean.len();
        if dim == 0 {
            return Err(bad("zero-dimensional block".into()));
        }
        for e in &spec.emissions {
            if e.mean.len() != dim || e.variance.len() != dim {
                return Err(bad("emission dimensions disagree".into()));
            }
            if e.mean.iter().any(|m| !m.is_finite()) {
                return Err(bad("non-finite emission mean".into()));
            }
            if e.variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(bad("emission variances must be positive".into()));
            }
        }
        let transform = match &spec.transform {
            None => Transform::Identity,
            Some(a) => {
                if a.matrix.len() != dim || a.matrix.iter().any(|r| r.len() != dim) {
                    return Err(bad(format!("transform must be {dim}x{dim}")));
                }
                let offset = a.offset.clone().unwrap_or_else(|| vec![0.0; dim]);
                if offset.len() != dim {
                    return Err(bad("transform offset has wrong length".into()));
                }
                let matrix = DMatrix::from_fn(dim, dim, |i, j| a.matrix[i][j]);
                if matrix.iter().any(|x| !x.is_finite()) || offset.iter().any(|x| !x.is_finite()) {
                    return Err(bad("non-finite transform".into()));
                }
                let diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || matrix[(i, j)] == 0.0));
                if diagonal {
                    let scale: Vec<f64> = (0..dim).map(|i| matrix[(i, i)]).collect();
                    if scale.iter().any(|s| *s == 0.0) {
                        return Err(bad("transform is singular".into()));
                    }
                    Transform::Diagonal { scale, offset }
                } else {
                    let det = matrix.clone().lu().determinant();
                    if det == 0.0 || !det.is_finite() {
                        return Err(bad("transform is singular".into()));
                    }
                    Transform::Full { matrix, offset: DVector::from_vec(offset) }
                }
            }
        };
        let moments = spec
            .emissions
            .iter()
            .map(|e| match &transform {
                Transform::Identity => {
                    Moments { mean: e.mean.clone(), cov: Covariance::Diagonal(e.variance.clone()) }
                }
                Transform::Diagonal { scale, .. } => Moments {
                    mean: transform.apply(&e.mean),
                    cov: Covariance::Diagonal(
                        e.variance.iter().zip(scale).map(|(v, a)| a * a * v).collect(),
                    ),
                },
                Transform::Full { matrix, .. } => {
                    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&e.variance));
                    Moments {
                        mean: transform.apply(&e.mean),
                        cov: Covariance::Full(matrix * d * matrix.transpose()),
                    }
                }
            })
            .collect();
        Ok(Block {
            parent_strides: strides(&cards),
            spec,
            dim,
            offset,
            parents,
            transform,
            moments,
        })
    }

    pub fn factors(&self) -> &[ConceptSpace] {
        &self.factors
    }

    pub fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name() == name)
            .ok_or_else(|| Error::InvalidWorld(format!("no factor named `{name}`")))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_specs(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().map(|b| &b.spec)
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        self.permutation.as_deref()
    }

    /// Output coordinates of the named block.
    pub fn block_coordinates(&self, name: &str) -> Result<Vec<usize>> {
        let b = self
            .blocks
            .iter()
            .find(|b| b.spec.name == name)
            .ok_or_else(|| Error::InvalidWorld(format!("no block named `{name}`")))?;
        Ok((b.offset..b.offset + b.dim).map(|i| self.output_index(i)).collect())
    }

    /// Output coordinates driven by blocks with a parent in `factors`.
    pub fn coordinates_of(&self, factors: &[&str]) -> Result<Vec<usize>> {
        let idx: Vec<usize> = factors.iter().map(|f| self.factor_index(f)).collect::<Result<_>>()?;
        let mut out: Vec<usize> = self
            .blocks
            .iter()
            .filter(|b| b.parents.iter().any(|p| idx.contains(p)))
            .flat_map(|b| (b.offset..b.offset + b.dim).map(|i| self.output_index(i)))
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    fn output_index(&self, internal: usize) -> usize {
        match &self.permutation {
            Some(p) => p[internal],
            None => internal,
        }
    }

    /// True when every block's parents lie entirely inside or entirely
    /// outside `z_factors`.
    pub fn is_separable(&self, z_factors: &[&str]) -> Result<bool> {
        let idx: Vec<usize> = z_factors.iter().map(|f| self.factor_index(f)).collect::<Result<_>>()?;
        Ok(self.blocks.iter().all(|b| {
            let inside = b.parents.iter().filter(|p| idx.contains(p)).count();
            inside == 0 || inside == b.parents.len()
        }))
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        Ok(())
    }

    fn check_level(alpha_bar: f64) -> Result<()> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::InvalidWorld(format!("noise level alpha_bar={alpha_bar} outside (0, 1]")));
        }
        Ok(())
    }

    fn to_internal(&self, y: &[f64]) -> Vec<f64> {
        match &self.permutation {
            Some(p) => p.iter().map(|&o| y[o]).collect(),
            None => y.to_vec(),
        }
    }

    fn to_output(&self, internal: Vec<f64>) -> Vec<f64> {
        match &self.permutation {
            Some(p) => {
                let mut out = vec![0.0; internal.len()];
                for (i, v) in internal.into_iter().enumerate() {
                    out[p[i]] = v;
                }
                out
            }
            None => internal,
        }
    }

    /// Compiles `q` into per-cluster cell tables.
    pub fn prepare(&self, q: &ConceptDistribution) -> Result<PreparedConcepts> {
        q.check_over(&self.factors)?;
        let n = self.factors.len();
        let mut parent: Vec<usize> = (0..n).collect();
        for g in q.groups() {
            for i in g.start + 1..g.start + g.len {
                union(&mut parent, g.start, i);
            }
        }
        for b in &self.blocks {
            for w in b.parents.windows(2) {
                union(&mut parent, w[0], w[1]);
            }
        }
        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        let mut root_list = roots.clone();
        root_list.sort_unstable();
        root_list.dedup();

        let cards = q.cardinalities();
        let mut clusters = Vec::with_capacity(root_list.len());
        for root in root_list {
            let factors: Vec<usize> = (0..n).filter(|&i| roots[i] == root).collect();
            let blocks: Vec<usize> = self
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.parents.first().is_some_and(|&p| roots[p] == root))
                .map(|(i, _)| i)
                .collect();
            let table = q.marginal_table(&factors);
            let sub_cards: Vec<usize> = factors.iter().map(|&f| cards[f]).collect();
            let mut cells = Vec::new();
            let mut full = vec![0usize; n];
            for (k, &w) in table.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let values = unravel(k, &sub_cards);
                for (slot, &f) in values.iter().zip(&factors) {
                    full[f] = *slot;
                }
                let configs = blocks.iter().map(|&b| self.blocks[b].config_of(&full)).collect();
                cells.push(Cell { log_weight: w.ln(), values, configs });
            }
            clusters.push(Cluster { factors, blocks, cells });
        }
        let free_blocks = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.parents.is_empty())
            .map(|(i, _)| i)
            .collect();
        Ok(PreparedConcepts { clusters, free_blocks })
    }

    /// Log density and score (in internal coordinates) of one cluster.
    /// Returns per-cell responsibilities when `resp` is given.
    fn eval_cluster(
        &self,
        cluster: &Cluster,
        y: &[f64],
        alpha_bar: f64,
        grad: Option<&mut [f64]>,
        resp: Option<&mut Vec<f64>>,
    ) -> f64 {
        if cluster.cells.is_empty() {
            return f64::NEG_INFINITY;
        }
        // Per block, per component: log density and gradient.
        let mut terms: Vec<Vec<f64>> = Vec::with_capacity(cluster.blocks.len());
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(cluster.blocks.len());
        for &bi in &cluster.blocks {
            let b = &self.blocks[bi];
            let yb = &y[b.offset..b.offset + b.dim];
            let mut g = vec![0.0; b.moments.len() * b.dim];
            let t: Vec<f64> = (0..b.moments.len())
                .map(|k| b.log_normal(k, yb, alpha_bar, &mut g[k * b.dim..(k + 1) * b.dim]))
                .collect();
            terms.push(t);
            grads.push(g);
        }
        let logs: Vec<f64> = cluster
            .cells
            .iter()
            .map(|c| {
                c.configs
                    .iter()
                    .zip(&terms)
                    .fold(c.log_weight, |acc, (&k, t)| acc + t[k])
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let log_p = max + total.ln();
        let r: Vec<f64> = exps.iter().map(|e| e / total).collect();
        if let Some(grad) = grad {
            for (j, &bi) in cluster.blocks.iter().enumerate() {
                let b = &self.blocks[bi];
                let mut agg = vec![0.0; b.moments.len()];
                for (c, rc) in cluster.cells.iter().zip(&r) {
                    agg[c.configs[j]] += rc;
                }
                let out = &mut grad[b.offset..b.offset + b.dim];
                out.iter_mut().for_each(|v| *v = 0.0);
                for (k, a) in agg.iter().enumerate() {
                    if *a == 0.0 {
                        continue;
                    }
                    for (o, g) in out.iter_mut().zip(&grads[j][k * b.dim..(k + 1) * b.dim]) {
                        *o += a * g;
                    }
                }
            }
        }
        if let Some(resp) = resp {
            *resp = r;
        }
        log_p
    }

    fn eval_prepared(
        &self,
        prep: &PreparedConcepts,
        y_internal: &[f64],
        alpha_bar: f64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let mut log_p = 0.0;
        for cluster in &prep.clusters {
            log_p += self.eval_cluster(cluster, y_internal, alpha_bar, grad.as_deref_mut(), None);
        }
        for &bi in &prep.free_blocks {
            let b = &self.blocks[bi];
            let yb = &y_internal[b.offset..b.offset + b.dim];
            let mut g = vec![0.0; b.dim];
            log_p += b.log_normal(0, yb, alpha_bar, &mut g);
            if let Some(grad) = grad.as_deref_mut() {
                grad[b.offset..b.offset + b.dim].copy_from_slice(&g);
            }
        }
        log_p
    }

    /// `log p_t(y | q)` where `p_t` is the law of
    /// `sqrt(alpha_bar) Y + sqrt(1 - alpha_bar) eps`.
    pub fn log_density(&self, q: &ConceptDistribution, y: &[f64], alpha_bar: f64) -> Result<f64> {
        let prep = self.prepare(q)?;
        self.log_density_prepared(&prep, y, alpha_bar)
    }

    pub fn log_density_prepared(&self, prep: &PreparedConcepts, y: &[f64], alpha_bar: f64) -> Result<f64> {
        self.check_point(y)?;
        Self::check_level(alpha_bar)?;
        Ok(self.eval_prepared(prep, &self.to_internal(y), alpha_bar, None))
    }

    /// Gradient of [`World::log_density`] with respect to `y`.
    pub fn score(&self, q: &ConceptDistribution, y: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        let prep = self.prepare(q)?;
        self.score_prepared(&prep, y, alpha_bar)
    }

    pub fn score_prepared(&self, prep: &PreparedConcepts, y: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        self.check_point(y)?;
        Self::check_level(alpha_bar)?;
        let mut grad = vec![0.0; self.dim];
        self.eval_prepared(prep, &self.to_internal(y), alpha_bar, Some(&mut grad));
        Ok(self.to_output(grad))
    }

    /// Bayes posterior over `space` given `Y_t = y` under prior `q_prior`.
    pub fn posterior(
        &self,
        y: &[f64],
        alpha_bar: f64,
        space: &str,
        q_prior: &ConceptDistribution,
    ) -> Result<ConceptDistribution> {
        let prep = self.prepare(q_prior)?;
        let table = self.posterior_prepared(&prep, y, alpha_bar, space)?;
        let f = self.factor_index(space)?;
        ConceptDistribution::from_joint(vec![self.factors[f].clone()], table)
    }

    /// Posterior weights over the values of `space`.
    pub fn posterior_prepared(
        &self,
        prep: &PreparedConcepts,
        y: &[f64],
        alpha_bar: f64,
        space: &str,
    ) -> Result<Vec<f64>> {
        self.check_point(y)?;
        Self::check_level(alpha_bar)?;
        let f = self.factor_index(space)?;
        let cluster = prep
            .clusters
            .iter()
            .find(|c| c.factors.contains(&f))
            .expect("every factor belongs to a cluster");
        let pos = cluster.factors.iter().position(|&g| g == f).unwrap();
        let mut r = Vec::new();
        self.eval_cluster(cluster, &self.to_internal(y), alpha_bar, None, Some(&mut r));
        let mut out = vec![0.0; self.factors[f].len()];
        for (c, rc) in cluster.cells.iter().zip(&r) {
            out[c.values[pos]] += rc;
        }
        Ok(out)
    }

    /// Enumerates the Gaussian mixture of `Y_t` under `q`, in output
    /// coordinates. Cells of zero weight are skipped.
    pub fn mixture_components(&self, q: &ConceptDistribution, alpha_bar: f64) -> Result<Vec<MixtureComponent>> {
        q.check_over(&self.factors)?;
        Self::check_level(alpha_bar)?;
        let cards = q.cardinalities();
        let joint = q.joint();
        let scale = alpha_bar.sqrt();
        let mut out = Vec::new();
        for (c, &w) in joint.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let values = unravel(c, &cards);
            let mut mean = vec![0.0; self.dim];
            let mut cov = DMatrix::zeros(self.dim, self.dim);
            for b in &self.blocks {
                let m = &b.moments[b.config_of(&values)];
                for i in 0..b.dim {
                    mean[b.offset + i] = scale * m.mean[i];
                    for j in 0..b.dim {
                        let c0 = match &m.cov {
                            Covariance::Diagonal(v) => {
                                if i == j {
                                    v[i]
                                } else {
                                    0.0
                                }
                            }
                            Covariance::Full(c) => c[(i, j)],
                        };
                        let noise = if i == j { 1.0 - alpha_bar } else { 0.0 };
                        cov[(b.offset + i, b.offset + j)] = alpha_bar * c0 + noise;
                    }
                }
            }
            let (mean, cov) = match &self.permutation {
                None => (DVector::from_vec(mean), cov),
                Some(p) => {
                    let mut pm = DVector::zeros(self.dim);
                    let mut pc = DMatrix::zeros(self.dim, self.dim);
                    for i in 0..self.dim {
                        pm[p[i]] = mean[i];
                        for j in 0..self.dim {
                            pc[(p[i], p[j])] = cov[(i, j)];
                        }
                    }
                    (pm, pc)
                }
            };
            out.push(MixtureComponent { weight: w, values, mean, cov });
        }
        Ok(out)
    }

    /// Ancestral samples of `Y = Y_0` under `q`; deterministic given `seed`.
    pub fn sample_ground_truth(&self, q: &ConceptDistribution, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        q.check_over(&self.factors)?;
        let cards = q.cardinalities();
        let joint = q.joint();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut cell = joint.len() - 1;
            for (c, w) in joint.iter().enumerate() {
                acc += w;
                if u < acc && *w > 0.0 {
                    cell = c;
                    break;
                }
            }
            while joint[cell] <= 0.0 {
                cell -= 1;
            }
            let values = unravel(cell, &cards);
            let mut y = vec![0.0; self.dim];
            for b in &self.blocks {
                let e = &b.spec.emissions[b.config_of(&values)];
                let raw: Vec<f64> = e
                    .mean
                    .iter()
                    .zip(&e.variance)
                    .map(|(m, v)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + v.sqrt() * z
                    })
                    .collect();
                y[b.offset..b.offset + b.dim].copy_from_slice(&b.transform.apply(&raw));
            }
            out.push(self.to_output(y));
        }
        Ok(out)
    }

    /// Forward-noises clean samples to level `alpha_bar`.
    pub fn noise_samples(samples: &[Vec<f64>], alpha_bar: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        samples
            .iter()
            .map(|y| {
                y.iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        a * v + s * z
                    })
                    .collect()
            })
            .collect()
    }
}
