//! Cluster construction for grouped verification.
//!
//! The dynamic strategies sort the vocabulary by probability (descending, lower
//! token id first on ties), locate the draft token by identity, and take a window
//! of `G` neighbouring ranks. The static strategy looks the draft up in a fixed
//! k-means partition of the codebook.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmf::{Partition, Pmf, TokenId};
use crate::toy::DistanceMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterKind {
    /// Fixed codebook partition; thresholds are ignored.
    StaticEmbedding(Partition),
    /// Window over the draft distribution's ranking.
    DraftSortedWindow,
    /// Window over the target distribution's ranking.
    ExpertSortedWindow,
    /// Target-ranked window with probability-gap and embedding-distance filters.
    ExpertSortedWindowFiltered,
}

impl ClusterKind {
    pub fn label(&self) -> &'static str {
        match self {
            ClusterKind::StaticEmbedding(_) => "embed",
            ClusterKind::DraftSortedWindow => "q",
            ClusterKind::ExpertSortedWindow => "p",
            ClusterKind::ExpertSortedWindowFiltered => "p-filtered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStrategy {
    pub kind: ClusterKind,
    pub group_size: usize,
    /// Maximum `|p(y) − p(draft)|` for a member (δ).
    pub prob_threshold: f64,
    /// Maximum embedding distance from the draft for a member (d).
    pub embed_threshold: f64,
}

impl ClusterStrategy {
    pub fn new(kind: ClusterKind, group_size: usize, prob_threshold: f64, embed_threshold: f64) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidConfig("group size G must be at least 1".into()));
        }
        if !(prob_threshold >= 0.0) || !(embed_threshold >= 0.0) {
            return Err(Error::InvalidConfig("thresholds must be non-negative".into()));
        }
        Ok(Self {
            kind,
            group_size,
            prob_threshold,
            embed_threshold,
        })
    }

    pub fn expert_window(group_size: usize) -> Self {
        Self {
            kind: ClusterKind::ExpertSortedWindow,
            group_size,
            prob_threshold: f64::INFINITY,
            embed_threshold: f64::INFINITY,
        }
    }

    /// Singleton clusters, so grouped acceptance reduces to the exact test.
    pub fn is_singleton(&self) -> bool {
        match &self.kind {
            ClusterKind::StaticEmbedding(p) => p.num_clusters() == p.len(),
            _ => self.group_size == 1,
        }
    }
}

/// `C(draft)`: the tokens whose masses are pooled for the draft's acceptance test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterWindow {
    pub member_ids: Vec<TokenId>,
    pub anchor: TokenId,
}

impl ClusterWindow {
    pub fn contains(&self, token: TokenId) -> bool {
        self.member_ids.contains(&token)
    }

    pub fn masses(&self, p: &Pmf, q: &Pmf) -> (f64, f64) {
        self.member_ids
            .iter()
            .fold((0.0, 0.0), |(a, b), &t| (a + p.prob(t), b + q.prob(t)))
    }
}

/// Token ids sorted by descending probability, lower id first among equals.
pub fn descending_order(pmf: &Pmf) -> Vec<usize> {
    let probs = pmf.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Rank range `[lo, hi)` of the window around rank `idx`: `G` ranks starting
/// `⌊G/2⌋` before the anchor, clamped to the vocabulary without wrap-around.
pub fn window_bounds(idx: usize, group_size: usize, vocab: usize) -> (usize, usize) {
    let lo = idx as i64 - (group_size / 2) as i64;
    let hi = lo + group_size as i64;
    (lo.max(0) as usize, (hi.min(vocab as i64)) as usize)
}

pub fn build_cluster(
    p: &Pmf,
    q: &Pmf,
    draft: TokenId,
    strategy: &ClusterStrategy,
    dist: Option<&DistanceMatrix>,
) -> ClusterWindow {
    let ranked_by = match &strategy.kind {
        ClusterKind::StaticEmbedding(partition) => {
            let members = partition.members(partition.cluster_of(draft));
            return ClusterWindow {
                member_ids: members,
                anchor: draft,
            };
        }
        ClusterKind::DraftSortedWindow => q,
        ClusterKind::ExpertSortedWindow | ClusterKind::ExpertSortedWindowFiltered => p,
    };
    if strategy.group_size <= 1 {
        return ClusterWindow {
            member_ids: vec![draft],
            anchor: draft,
        };
    }

    let order = descending_order(ranked_by);
    let idx = order
        .iter()
        .position(|&t| t == draft.index())
        .expect("draft token is inside the vocabulary");
    let (lo, hi) = window_bounds(idx, strategy.group_size, order.len());
    let mut members: Vec<TokenId> = order[lo..hi].iter().map(|&t| TokenId::new(t)).collect();
    if !members.contains(&draft) {
        members.push(draft);
    }

    if strategy.kind == ClusterKind::ExpertSortedWindowFiltered {
        let anchor_p = p.prob(draft);
        members.retain(|&y| {
            if y == draft {
                return true;
            }
            let gap_ok = (p.prob(y) - anchor_p).abs() <= strategy.prob_threshold;
            let dist_ok = dist.is_none_or(|m| m.get(draft, y) <= strategy.embed_threshold);
            gap_ok && dist_ok
        });
    }

    ClusterWindow {
        member_ids: members,
        anchor: draft,
    }
}
