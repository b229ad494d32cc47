//! Categorical distribution primitives.
//!
//! Everything downstream (verification kernels, clustering, decoding engines and
//! the measurement harness) consumes dense [`Pmf`] vectors over the token
//! vocabulary. All arithmetic is `f64`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Sum tolerance accepted by [`Pmf::new`] before renormalizing.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn new(id: usize) -> Self {
        Self(id as u32)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Pre-softmax scores for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteLogits(i));
        }
        Ok(Self(scores))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }
}

/// A normalized probability mass function over `[0, V)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Pmf {
    probs: Vec<f64>,
}

impl Pmf {
    /// Validates and renormalizes. Entries must be finite and non-negative and the
    /// total must lie within [`NORMALIZATION_TOLERANCE`] of one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPmf("empty support".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidPmf(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidPmf(format!("entries sum to {total}")));
        }
        let mut pmf = Self { probs };
        if total != 1.0 {
            pmf.probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(pmf)
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidPmf(format!("weight {i} is {w}")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidPmf("weights have zero total mass".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab > 0, "uniform pmf needs a non-empty vocabulary");
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn point(vocab: usize, token: TokenId) -> Self {
        assert!(token.index() < vocab);
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    /// Largest probability.
    pub fn top1(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Most likely token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId::new(best)
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Inverse-CDF draw against an explicit uniform `u ∈ [0, 1)`.
    pub fn sample_with_uniform(&self, u: f64) -> TokenId {
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return TokenId::new(i);
            }
        }
        // rounding left u just above the accumulated total
        TokenId::new(last_positive)
    }

    pub fn sample(&self, rng: &mut RngStream) -> TokenId {
        self.sample_with_uniform(rng.uniform())
    }
}

fn check_lengths(p: &Pmf, q: &Pmf) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// Softmax of `scores / temperature` restricted to the `top_k` largest scores.
///
/// Ties at the cut are resolved toward the lower token id. Entries outside the
/// kept set are exactly zero.
pub fn pmf_from_logits(logits: &Logits, top_k: usize, temperature: f64) -> Result<Pmf> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top-K must be at least 1".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scores = logits.scores();
    if scores.is_empty() {
        return Err(Error::InvalidPmf("empty logits".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteLogits(i));
    }
    let v = scores.len();
    let k = top_k.min(v);

    let by_rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..v).collect();
    if k < v {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }

    let max = order
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; v];
    let mut total = 0.0;
    for &i in &order {
        let w = ((scores[i] - max) / temperature).exp();
        probs[i] = w;
        total += w;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(Pmf { probs })
}

pub fn sample(pmf: &Pmf, rng: &mut RngStream) -> TokenId {
    pmf.sample(rng)
}

/// Half the L1 distance.
pub fn tv_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    check_lengths(p, q)?;
    let l1: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * l1)
}

/// Expected acceptance rate of the exact speculative test, `Σ min(p, q)`.
pub fn expected_accept_sd(p: &Pmf, q: &Pmf) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| a.min(*b)).sum())
}

/// `norm(max(0, p − q))`, the rejection-correction law.
pub fn residual(p: &Pmf, q: &Pmf) -> Result<Pmf> {
    check_lengths(p, q)?;
    let excess: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let total: f64 = excess.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyResidual);
    }
    Ok(Pmf {
        probs: excess.into_iter().map(|e| e / total).collect(),
    })
}

/// Disjoint cover of the vocabulary by `num_clusters` non-empty clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_clusters: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_clusters: usize) -> Result<Self> {
        if num_clusters == 0 || assignment.is_empty() {
            return Err(Error::InvalidPartition("no clusters".into()));
        }
        let mut seen = vec![false; num_clusters];
        for (token, &c) in assignment.iter().enumerate() {
            if c >= num_clusters {
                return Err(Error::InvalidPartition(format!(
                    "token {token} assigned to cluster {c} >= {num_clusters}"
                )));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("cluster {c} is empty")));
        }
        Ok(Self {
            assignment,
            num_clusters,
        })
    }

    /// Builds a partition from explicit groups; every token must appear exactly once.
    pub fn from_groups(vocab: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut assignment = vec![usize::MAX; vocab];
        for (c, group) in groups.iter().enumerate() {
            for &t in group {
                if t >= vocab || assignment[t] != usize::MAX {
                    return Err(Error::InvalidPartition(format!(
                        "token {t} is out of range or repeated"
                    )));
                }
                assignment[t] = c;
            }
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::InvalidPartition("groups do not cover the vocabulary".into()));
        }
        Self::new(assignment, groups.len())
    }

    pub fn singletons(vocab: usize) -> Self {
        Self {
            assignment: (0..vocab).collect(),
            num_clusters: vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, token: TokenId) -> usize {
        self.assignment[token.index()]
    }

    pub fn members(&self, cluster: usize) -> Vec<TokenId> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(t, _)| TokenId::new(t))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Cluster-summed masses `p'(C_i) = Σ_{x ∈ C_i} p(x)`.
pub fn grouped_mass(pmf: &Pmf, partition: &Partition) -> Result<Pmf> {
    if pmf.len() != partition.len() {
        return Err(Error::LengthMismatch {
            expected: pmf.len(),
            actual: partition.len(),
        });
    }
    let mut mass = vec![0.0; partition.num_clusters()];
    for (&c, &p) in partition.assignment.iter().zip(&pmf.probs) {
        mass[c] += p;
    }
    Ok(Pmf { probs: mass })
}
