//! Categorical concept spaces, distributions over their products, and the
//! prompt table binding prompt names to concept distributions.
//!
//! A [`ConceptDistribution`] is stored as a product of independent weight
//! groups. Each group is a dense table over a contiguous run of spaces, so a
//! product of two distributions keeps its factors verbatim and marginalizing
//! back onto a factor returns it bit-for-bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const MIX_SUM_TOL: f64 = 1e-9;

/// The reserved prompt bound to the world's marginal concept distribution.
pub const EMPTY_PROMPT: &str = "";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptSpace {
    name: String,
    values: Vec<String>,
}

impl ConceptSpace {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidSpace("space name is empty".into()));
        }
        if values.len() < 2 {
            return Err(Error::InvalidSpace(format!(
                "space `{name}` needs at least 2 values, got {}",
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.is_empty() {
                return Err(Error::InvalidSpace(format!("space `{name}` has an empty value")));
            }
            if values[..i].contains(v) {
                return Err(Error::InvalidSpace(format!(
                    "space `{name}` lists `{v}` more than once"
                )));
            }
        }
        Ok(Self { name, values })
    }

    pub fn from_strs(name: &str, values: &[&str]) -> Result<Self> {
        Self::new(name, values.iter().map(|s| s.to_string()).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, value: &str) -> Result<usize> {
        self.values
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| Error::UnknownValue {
                space: self.name.clone(),
                value: value.to_string(),
            })
    }
}

/// A dense weight table over `spaces[start..start + len]`, row-major with the
/// last space varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    pub start: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDistribution {
    spaces: Vec<ConceptSpace>,
    groups: Vec<WeightGroup>,
}

fn check_weights(weights: &[f64], what: &str) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("{what}: weight {w} is negative or not finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!("{what}: weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_disjoint(spaces: &[ConceptSpace]) -> Result<()> {
    for (i, s) in spaces.iter().enumerate() {
        if spaces[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::OverlappingSpaces(format!("space `{}` appears twice", s.name)));
        }
    }
    Ok(())
}

/// Row-major strides for a list of cardinalities.
pub(crate) fn strides(cards: &[usize]) -> Vec<usize> {
    let mut out = vec![1; cards.len()];
    for i in (0..cards.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * cards[i + 1];
    }
    out
}

/// Splits a flat row-major index into per-space value indices.
pub(crate) fn unravel(mut index: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for i in (0..cards.len()).rev() {
        out[i] = index % cards[i];
        index /= cards[i];
    }
    out
}

impl ConceptDistribution {
    /// A dense joint table over `spaces`.
    pub fn from_joint(spaces: Vec<ConceptSpace>, weights: Vec<f64>) -> Result<Self> {
        check_disjoint(&spaces)?;
        let cells: usize = spaces.iter().map(ConceptSpace::len).product();
        if weights.len() != cells {
            return Err(Error::InvalidWeights(format!(
                "table over {} cells has {} weights",
                cells,
                weights.len()
            )));
        }
        check_weights(&weights, "joint table")?;
        let len = spaces.len();
        Ok(Self {
            spaces,
            groups: vec![WeightGroup { start: 0, len, weights }],
        })
    }

    /// The distribution over no spaces at all: a single cell of mass one.
    pub fn trivial() -> Self {
        Self {
            spaces: Vec::new(),
            groups: vec![WeightGroup { start: 0, len: 0, weights: vec![1.0] }],
        }
    }

    pub fn delta(space: &ConceptSpace, value: &str) -> Result<Self> {
        let idx = space.index_of(value)?;
        let mut weights = vec![0.0; space.len()];
        weights[idx] = 1.0;
        Self::from_joint(vec![space.clone()], weights)
    }

    pub fn uniform(space: &ConceptSpace) -> Self {
        let n = space.len();
        Self {
            spaces: vec![space.clone()],
            groups: vec![WeightGroup { start: 0, len: 1, weights: vec![1.0 / n as f64; n] }],
        }
    }

    /// Independent product. The factors are kept as separate groups.
    pub fn product(&self, other: &Self) -> Result<Self> {
        for s in &other.spaces {
            if self.spaces.iter().any(|o| o.name == s.name) {
                return Err(Error::OverlappingSpaces(format!(
                    "space `{}` is in both factors",
                    s.name
                )));
            }
        }
        let offset = self.spaces.len();
        let mut spaces = self.spaces.clone();
        spaces.extend(other.spaces.iter().cloned());
        let mut groups: Vec<WeightGroup> =
            self.groups.iter().filter(|g| g.len > 0).cloned().collect();
        groups.extend(other.groups.iter().filter(|g| g.len > 0).map(|g| WeightGroup {
            start: g.start + offset,
            ..g.clone()
        }));
        if groups.is_empty() {
            return Ok(Self::trivial());
        }
        Ok(Self { spaces, groups })
    }

    /// Convex combination of distributions over identical spaces.
    ///
    /// Mixture weights within 1e-9 of summing to one are renormalized. When
    /// the resulting joint factors exactly into per-space marginals it is
    /// stored in product form.
    pub fn mix(components: &[(f64, &ConceptDistribution)]) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return Err(Error::InvalidWeights("mixture has no components".into()));
        };
        let mut total = 0.0;
        for (w, q) in components {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidWeights(format!("mixture weight {w} is invalid")));
            }
            if q.spaces != first.spaces {
                return Err(Error::SpaceMismatch(format!(
                    "mixture components over [{}] and [{}]",
                    first.space_names().join(", "),
                    q.space_names().join(", ")
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > MIX_SUM_TOL {
            return Err(Error::InvalidWeights(format!("mixture weights sum to {total}, not 1")));
        }
        let mut joint = vec![0.0; first.cell_count()];
        for (w, q) in components {
            let w = w / total;
            for (acc, p) in joint.iter_mut().zip(q.joint()) {
                *acc += w * p;
            }
        }
        let spaces = first.spaces.clone();
        if spaces.is_empty() {
            return Ok(Self::trivial());
        }
        Ok(Self::factor_exact(spaces, joint))
    }

    /// Stores `joint` per space when it equals the product of its marginals
    /// bit-for-bit, and as a single dense group otherwise.
    fn factor_exact(spaces: Vec<ConceptSpace>, joint: Vec<f64>) -> Self {
        let dense = Self {
            groups: vec![WeightGroup { start: 0, len: spaces.len(), weights: joint.clone() }],
            spaces,
        };
        if dense.spaces.len() < 2 {
            return dense;
        }
        let marginals: Vec<Vec<f64>> =
            (0..dense.spaces.len()).map(|i| dense.marginal_table(&[i])).collect();
        let cards = dense.cardinalities();
        let exact = joint.iter().enumerate().all(|(c, &w)| {
            let idx = unravel(c, &cards);
            let p = idx.iter().zip(&marginals).fold(1.0, |acc, (&v, m)| acc * m[v]);
            p == w
        });
        if !exact {
            return dense;
        }
        let groups = marginals
            .into_iter()
            .enumerate()
            .map(|(i, weights)| WeightGroup { start: i, len: 1, weights })
            .collect();
        Self { spaces: dense.spaces, groups }
    }

    pub fn spaces(&self) -> &[ConceptSpace] {
        &self.spaces
    }

    pub fn space_names(&self) -> Vec<&str> {
        self.spaces.iter().map(ConceptSpace::name).collect()
    }

    pub fn groups(&self) -> &[WeightGroup] {
        &self.groups
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.spaces.iter().map(ConceptSpace::len).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.spaces.iter().map(ConceptSpace::len).product()
    }

    pub fn position(&self, space: &str) -> Option<usize> {
        self.spaces.iter().position(|s| s.name == space)
    }

    /// Weight of the cell given by per-space value indices.
    pub fn weight_at(&self, values: &[usize]) -> f64 {
        let cards = self.cardinalities();
        self.groups.iter().fold(1.0, |acc, g| {
            let sub = &cards[g.start..g.start + g.len];
            let st = strides(sub);
            let k: usize = (0..g.len).map(|i| values[g.start + i] * st[i]).sum();
            acc * g.weights[k]
        })
    }

    /// The full joint table, row-major over `spaces`.
    pub fn joint(&self) -> Vec<f64> {
        let cards = self.cardinalities();
        (0..self.cell_count())
            .map(|c| self.weight_at(&unravel(c, &cards)))
            .collect()
    }

    /// Joint table of the marginal over the given space positions, row-major
    /// in the order given. Exact when the positions are a union of groups
    /// listed in storage order.
    pub(crate) fn marginal_table(&self, positions: &[usize]) -> Vec<f64> {
        let whole = self.groups.iter().all(|g| {
            let inside = (g.start..g.start + g.len).filter(|p| positions.contains(p)).count();
            inside == 0 || inside == g.len
        });
        if !whole {
            return self.marginal_table_dense(positions);
        }
        // Groups outside the request sum to one and drop out.
        let cards = self.cardinalities();
        let sub_cards: Vec<usize> = positions.iter().map(|&p| cards[p]).collect();
        let groups_in: Vec<&WeightGroup> = self
            .groups
            .iter()
            .filter(|g| g.len > 0 && positions.contains(&g.start))
            .collect();
        (0..sub_cards.iter().product())
            .map(|k| {
                let sub_idx = unravel(k, &sub_cards);
                groups_in.iter().fold(1.0, |acc, g| {
                    let gs = strides(&cards[g.start..g.start + g.len]);
                    let off: usize = (0..g.len)
                        .map(|i| {
                            let pos = positions.iter().position(|&p| p == g.start + i).unwrap();
                            sub_idx[pos] * gs[i]
                        })
                        .sum();
                    acc * g.weights[off]
                })
            })
            .collect()
    }

    fn marginal_table_dense(&self, positions: &[usize]) -> Vec<f64> {
        let cards = self.cardinalities();
        let sub_cards: Vec<usize> = positions.iter().map(|&p| cards[p]).collect();
        let sub_strides = strides(&sub_cards);
        let mut out = vec![0.0; sub_cards.iter().product()];
        for (c, w) in self.joint().into_iter().enumerate() {
            let idx = unravel(c, &cards);
            let k: usize = positions.iter().zip(&sub_strides).map(|(&p, s)| idx[p] * s).sum();
            out[k] += w;
        }
        out
    }

    /// Marginal distribution over the named spaces, in the order given.
    pub fn marginal(&self, names: &[&str]) -> Result<Self> {
        let mut positions = Vec::with_capacity(names.len());
        for n in names {
            let p = self.position(n).ok_or_else(|| {
                Error::SpaceMismatch(format!(
                    "space `{n}` not in [{}]",
                    self.space_names().join(", ")
                ))
            })?;
            positions.push(p);
        }
        if positions.is_empty() {
            return Ok(Self::trivial());
        }
        let spaces: Vec<ConceptSpace> = positions.iter().map(|&p| self.spaces[p].clone()).collect();
        check_disjoint(&spaces)?;
        // Keep the group structure when the request is a union of whole groups
        // in storage order.
        let sorted = positions.windows(2).all(|w| w[0] < w[1]);
        let whole = self.groups.iter().all(|g| {
            let inside = (g.start..g.start + g.len).filter(|p| positions.contains(p)).count();
            inside == 0 || inside == g.len
        });
        if sorted && whole {
            let mut groups = Vec::new();
            for g in &self.groups {
                if g.len > 0 && positions.contains(&g.start) {
                    let start = positions.iter().position(|&p| p == g.start).unwrap();
                    groups.push(WeightGroup { start, len: g.len, weights: g.weights.clone() });
                }
            }
            return Ok(Self { spaces, groups });
        }
        let table = self.marginal_table(&positions);
        let len = spaces.len();
        Ok(Self { spaces, groups: vec![WeightGroup { start: 0, len, weights: table }] })
    }

    /// Errors unless this distribution is over exactly `spaces`, in order.
    pub fn check_over(&self, spaces: &[ConceptSpace]) -> Result<()> {
        if self.spaces != spaces {
            return Err(Error::SpaceMismatch(format!(
                "distribution over [{}], expected [{}]",
                self.space_names().join(", "),
                spaces.iter().map(ConceptSpace::name).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }
}

/// Binds prompt names to concept distributions. The empty prompt is always
/// present.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    entries: BTreeMap<String, ConceptDistribution>,
}

impl PromptTable {
    pub fn new(entries: BTreeMap<String, ConceptDistribution>) -> Result<Self> {
        if !entries.contains_key(EMPTY_PROMPT) {
            return Err(Error::UnknownPrompt {
                name: EMPTY_PROMPT.into(),
                available: entries.keys().cloned().collect(),
            });
        }
        Ok(Self { entries })
    }

    pub fn resolve(&self, name: &str) -> Result<ConceptDistribution> {
        self.get(name).cloned()
    }

    pub fn get(&self, name: &str) -> Result<&ConceptDistribution> {
        self.entries.get(name).ok_or_else(|| Error::UnknownPrompt {
            name: name.to_string(),
            available: self.entries.keys().map(|k| format!("{k:?}")).collect(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn marginal(&self) -> &ConceptDistribution {
        &self.entries[EMPTY_PROMPT]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConceptDistribution)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds or replaces a binding.
    pub fn insert(&mut self, name: impl Into<String>, q: ConceptDistribution) {
        self.entries.insert(name.into(), q);
    }
}
