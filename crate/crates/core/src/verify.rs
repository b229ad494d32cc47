//! Parallel verification of a block of draft tokens.
//!
//! Every criterion shares one loop: scan drafts left to right, accept token `k`
//! when `r < a_k` for a fresh uniform `r`, and on the first rejection emit a
//! correction drawn from the token-level residual `norm(max(0, p_k − q_k))`.
//! Only the acceptance probability `a_k` differs between criteria.

use serde::{Deserialize, Serialize};

use crate::cluster::{build_cluster, descending_order, window_bounds, ClusterKind, ClusterStrategy};
use crate::error::{Error, Result};
use crate::pmf::{residual, Pmf, TokenId};
use crate::rng::RngStream;
use crate::toy::DistanceMatrix;

/// `min(1, num / den)` with `a / 0 = 1` for `a > 0` and `0 / 0 = 0`.
pub fn acceptance_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).min(1.0)
    } else if num > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum LossyCriterion {
    /// `min(1, k·p/q)`
    Amplify(f64),
    /// `min(1, (p + ε)/q)`
    Addition(f64),
}

impl LossyCriterion {
    pub fn validate(self) -> Result<Self> {
        match self {
            LossyCriterion::Amplify(k) if !(k >= 1.0) || !k.is_finite() => Err(Error::InvalidConfig(
                format!("amplify factor must be >= 1, got {k}"),
            )),
            LossyCriterion::Addition(e) if !(e >= 0.0) || !e.is_finite() => Err(Error::InvalidConfig(
                format!("addition offset must be >= 0, got {e}"),
            )),
            c => Ok(c),
        }
    }
}

/// Acceptance rule plugged into the shared verification loop.
#[derive(Debug, Clone, Copy)]
pub enum Criterion<'a> {
    Exact,
    Grouped {
        strategy: &'a ClusterStrategy,
        dist: Option<&'a DistanceMatrix>,
    },
    Lossy(LossyCriterion),
}

impl Criterion<'_> {
    /// Acceptance probability of `draft` at one position.
    pub fn accept_prob(&self, p: &Pmf, q: &Pmf, draft: TokenId) -> f64 {
        match *self {
            Criterion::Exact => acceptance_ratio(p.prob(draft), q.prob(draft)),
            Criterion::Grouped { strategy, dist } => {
                let window = build_cluster(p, q, draft, strategy, dist);
                let (pm, qm) = window.masses(p, q);
                acceptance_ratio(pm, qm)
            }
            Criterion::Lossy(LossyCriterion::Amplify(k)) => acceptance_ratio(k * p.prob(draft), q.prob(draft)),
            Criterion::Lossy(LossyCriterion::Addition(e)) => acceptance_ratio(p.prob(draft) + e, q.prob(draft)),
        }
    }

    /// Acceptance probability for every token of the vocabulary.
    ///
    /// Unfiltered dynamic windows use prefix sums over one sort instead of
    /// rebuilding a window per token; other rules evaluate [`Self::accept_prob`]
    /// token by token.
    pub fn accept_profile(&self, p: &Pmf, q: &Pmf) -> Vec<f64> {
        let v = p.len();
        match *self {
            Criterion::Grouped { strategy, .. } if strategy.is_singleton() => {
                (0..v).map(|x| Criterion::Exact.accept_prob(p, q, TokenId::new(x))).collect()
            }
            Criterion::Grouped { strategy, .. }
                if matches!(
                    strategy.kind,
                    ClusterKind::ExpertSortedWindow | ClusterKind::DraftSortedWindow
                ) =>
            {
                let ranked = if strategy.kind == ClusterKind::DraftSortedWindow { q } else { p };
                let order = descending_order(ranked);
                let mut pre_p = vec![0.0; v + 1];
                let mut pre_q = vec![0.0; v + 1];
                for (r, &t) in order.iter().enumerate() {
                    pre_p[r + 1] = pre_p[r] + p.probs()[t];
                    pre_q[r + 1] = pre_q[r] + q.probs()[t];
                }
                let mut profile = vec![0.0; v];
                for (r, &t) in order.iter().enumerate() {
                    let (lo, hi) = window_bounds(r, strategy.group_size, v);
                    profile[t] = acceptance_ratio(pre_p[hi] - pre_p[lo], pre_q[hi] - pre_q[lo]);
                }
                profile
            }
            Criterion::Grouped { strategy, .. } if matches!(strategy.kind, ClusterKind::StaticEmbedding(_)) => {
                let ClusterKind::StaticEmbedding(partition) = &strategy.kind else {
                    unreachable!()
                };
                let k = partition.num_clusters();
                let (mut pm, mut qm) = (vec![0.0; k], vec![0.0; k]);
                for (x, &c) in partition.assignment().iter().enumerate() {
                    pm[c] += p.probs()[x];
                    qm[c] += q.probs()[x];
                }
                partition
                    .assignment()
                    .iter()
                    .map(|&c| acceptance_ratio(pm[c], qm[c]))
                    .collect()
            }
            _ => (0..v).map(|x| self.accept_prob(p, q, TokenId::new(x))).collect(),
        }
    }
}

/// Outcome of one acceptance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptDecision {
    pub accepted: bool,
    pub accept_prob: f64,
    /// Correction token, present exactly when the draft was rejected.
    pub resampled: Option<TokenId>,
}

/// One loop body: test `draft`, and draw the residual correction on rejection.
pub fn decide(p: &Pmf, q: &Pmf, draft: TokenId, criterion: &Criterion, rng: &mut RngStream) -> Result<AcceptDecision> {
    let accept_prob = criterion.accept_prob(p, q, draft);
    let r = rng.uniform();
    if r < accept_prob {
        return Ok(AcceptDecision {
            accepted: true,
            accept_prob,
            resampled: None,
        });
    }
    let correction = residual(p, q)?.sample(rng);
    Ok(AcceptDecision {
        accepted: false,
        accept_prob,
        resampled: Some(correction),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// Residual sample replacing the first rejected draft.
    Correction(TokenId),
    /// Extra token from the pmf after the last draft, when every draft passed.
    Bonus(TokenId),
    /// Every draft passed and no further pmf was supplied.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Length of the accepted draft prefix.
    pub accepted: usize,
    /// Accepted drafts followed by the correction or bonus token, if any.
    pub tokens: Vec<TokenId>,
    pub tail: Tail,
    pub decisions: Vec<AcceptDecision>,
}

/// Shared verification loop. `p_list` may carry one pmf more than `drafts`, in
/// which case a fully accepted block earns a bonus token sampled from it.
pub fn verify(
    drafts: &[TokenId],
    p_list: &[Pmf],
    q_list: &[Pmf],
    criterion: &Criterion,
    rng: &mut RngStream,
) -> Result<VerifyOutcome> {
    let l = drafts.len();
    if q_list.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: q_list.len(),
        });
    }
    if p_list.len() < l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: p_list.len(),
        });
    }
    let mut tokens = Vec::with_capacity(l + 1);
    let mut decisions = Vec::with_capacity(l);
    for k in 0..l {
        let decision = decide(&p_list[k], &q_list[k], drafts[k], criterion, rng)?;
        let resampled = decision.resampled;
        decisions.push(decision);
        if let Some(correction) = resampled {
            tokens.push(correction);
            return Ok(VerifyOutcome {
                accepted: k,
                tokens,
                tail: Tail::Correction(correction),
                decisions,
            });
        }
        tokens.push(drafts[k]);
    }
    let tail = match p_list.get(l) {
        Some(bonus_pmf) => {
            let bonus = bonus_pmf.sample(rng);
            tokens.push(bonus);
            Tail::Bonus(bonus)
        }
        None => Tail::None,
    };
    Ok(VerifyOutcome {
        accepted: l,
        tokens,
        tail,
        decisions,
    })
}

pub fn verify_sd(drafts: &[TokenId], p_list: &[Pmf], q_list: &[Pmf], rng: &mut RngStream) -> Result<VerifyOutcome> {
    verify(drafts, p_list, q_list, &Criterion::Exact, rng)
}

pub fn verify_gsd(
    drafts: &[TokenId],
    p_list: &[Pmf],
    q_list: &[Pmf],
    strategy: &ClusterStrategy,
    dist: Option<&DistanceMatrix>,
    rng: &mut RngStream,
) -> Result<VerifyOutcome> {
    verify(drafts, p_list, q_list, &Criterion::Grouped { strategy, dist }, rng)
}

pub fn verify_lossy(
    drafts: &[TokenId],
    p_list: &[Pmf],
    q_list: &[Pmf],
    criterion: LossyCriterion,
    rng: &mut RngStream,
) -> Result<VerifyOutcome> {
    verify(drafts, p_list, q_list, &Criterion::Lossy(criterion.validate()?), rng)
}

/// Exact law of the token emitted at one position when the draft is drawn from `q`:
/// `q(x)·a(x) + (Σ_y q(y)(1 − a(y)))·residual(x)`.
pub fn emission_law_from_profile(p: &Pmf, q: &Pmf, accept: &[f64]) -> Result<Vec<f64>> {
    let mut law: Vec<f64> = q.probs().iter().zip(accept).map(|(qx, a)| qx * a).collect();
    let reject_mass: f64 = q.probs().iter().zip(accept).map(|(qx, a)| qx * (1.0 - a)).sum();
    if reject_mass > 0.0 {
        let res = residual(p, q)?;
        for (l, r) in law.iter_mut().zip(res.probs()) {
            *l += reject_mass * r;
        }
    }
    Ok(law)
}

pub fn emission_law(p: &Pmf, q: &Pmf, criterion: &Criterion) -> Result<Vec<f64>> {
    emission_law_from_profile(p, q, &criterion.accept_profile(p, q))
}

/// `TV(emission law, p)`: how far one verification step is from sampling `p`.
pub fn emission_tv(p: &Pmf, q: &Pmf, criterion: &Criterion) -> Result<f64> {
    let law = emission_law(p, q, criterion)?;
    Ok(0.5 * law.iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmf::Partition;

    fn pmf(v: &[f64]) -> Pmf {
        Pmf::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(acceptance_ratio(0.2, 0.0), 1.0);
        assert_eq!(acceptance_ratio(0.0, 0.0), 0.0);
        assert_eq!(acceptance_ratio(0.2, 0.4), 0.5);
        assert_eq!(acceptance_ratio(0.9, 0.4), 1.0);
    }

    #[test]
    fn identical_pmfs_accept_everything_plus_bonus() {
        let p = pmf(&[0.1, 0.2, 0.3, 0.4]);
        let mut rng = RngStream::new(1);
        for _ in 0..50 {
            let drafts: Vec<TokenId> = (0..4).map(|_| p.sample(&mut rng)).collect();
            let ps = vec![p.clone(); 5];
            let qs = vec![p.clone(); 4];
            let out = verify_sd(&drafts, &ps, &qs, &mut rng).unwrap();
            assert_eq!(out.accepted, 4);
            assert_eq!(out.tokens.len(), 5);
            assert!(matches!(out.tail, Tail::Bonus(_)));
            assert!(out.decisions.iter().all(|d| d.accept_prob == 1.0));
        }
    }

    #[test]
    fn no_bonus_without_extra_pmf() {
        let p = pmf(&[0.5, 0.5]);
        let mut rng = RngStream::new(0);
        let out = verify_sd(&[TokenId(0)], &[p.clone()], &[p.clone()], &mut rng).unwrap();
        assert_eq!(out.tail, Tail::None);
        assert_eq!(out.tokens, vec![TokenId(0)]);
    }

    #[test]
    fn two_token_rejection_path() {
        let p = pmf(&[0.75, 0.25]);
        let q = pmf(&[0.25, 0.75]);
        assert!((Criterion::Exact.accept_prob(&p, &q, TokenId(1)) - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = RngStream::new(3);
        let mut rejected = 0;
        for _ in 0..2000 {
            let out = verify_sd(&[TokenId(1)], &[p.clone()], &[q.clone()], &mut rng).unwrap();
            if let Tail::Correction(c) = out.tail {
                assert_eq!(c, TokenId(0));
                assert_eq!(out.accepted, 0);
                rejected += 1;
            }
        }
        // rejection probability 2/3
        assert!((rejected as f64 / 2000.0 - 2.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn two_token_one_step_law() {
        // enumerate: P(emit 0) = q0·a0 + (q0(1 − a0) + q1(1 − a1))·res0
        let p = pmf(&[0.75, 0.25]);
        let q = pmf(&[0.25, 0.75]);
        let (a0, a1) = (1.0f64.min(0.75 / 0.25), 1.0f64.min(0.25 / 0.75));
        let reject = 0.25 * (1.0 - a0) + 0.75 * (1.0 - a1);
        let emit0 = 0.25 * a0 + reject * 1.0;
        assert!((emit0 - 0.75).abs() < 1e-15);
        let law = emission_law(&p, &q, &Criterion::Exact).unwrap();
        assert!((law[0] - emit0).abs() < 1e-15);
        assert!((law[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_draft_mass_conventions() {
        let p = pmf(&[0.5, 0.5, 0.0]);
        let q = pmf(&[0.5, 0.0, 0.5]);
        assert_eq!(Criterion::Exact.accept_prob(&p, &q, TokenId(1)), 1.0);
        let p0 = pmf(&[1.0, 0.0, 0.0]);
        let q0 = pmf(&[1.0, 0.0, 0.0]);
        assert_eq!(Criterion::Exact.accept_prob(&p0, &q0, TokenId(2)), 0.0);
    }

    #[test]
    fn grouped_example_clamped_window() {
        let p = pmf(&[0.10, 0.12, 0.39, 0.39]);
        let q = pmf(&[0.22, 0.24, 0.27, 0.27]);
        let s = ClusterStrategy::expert_window(2);
        let a = Criterion::Grouped { strategy: &s, dist: None }.accept_prob(&p, &q, TokenId(0));
        assert!((a - 0.22 / 0.46).abs() < 1e-15);
    }

    #[test]
    fn lossy_examples() {
        let p = pmf(&[0.2, 0.8]);
        let q = pmf(&[0.5, 0.5]);
        let amp = Criterion::Lossy(LossyCriterion::Amplify(2.0)).accept_prob(&p, &q, TokenId(0));
        assert!((amp - 0.8).abs() < 1e-15);
        let add = Criterion::Lossy(LossyCriterion::Addition(0.1)).accept_prob(&p, &q, TokenId(0));
        assert!((add - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lossy_parameters_validated() {
        assert!(LossyCriterion::Amplify(0.5).validate().is_err());
        assert!(LossyCriterion::Addition(-0.1).validate().is_err());
        assert!(LossyCriterion::Amplify(1.0).validate().is_ok());
    }

    #[test]
    fn lossy_amplify_is_biased() {
        let p = pmf(&[0.75, 0.25]);
        let q = pmf(&[0.25, 0.75]);
        let err = emission_tv(&p, &q, &Criterion::Lossy(LossyCriterion::Amplify(2.0))).unwrap();
        assert!(err > 0.05);
    }

    #[test]
    fn reductions_are_pathwise_identical() {
        let s = ClusterStrategy::expert_window(1);
        let mut seed_rng = RngStream::new(42);
        for trial in 0..200 {
            let v = 2 + seed_rng.below(10);
            let l = 1 + seed_rng.below(6);
            let rand_pmf = |r: &mut RngStream| Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let ps: Vec<Pmf> = (0..=l).map(|_| rand_pmf(&mut seed_rng)).collect();
            let qs: Vec<Pmf> = (0..l).map(|_| rand_pmf(&mut seed_rng)).collect();
            let drafts: Vec<TokenId> = qs.iter().map(|q| q.sample(&mut seed_rng)).collect();
            let base = verify_sd(&drafts, &ps, &qs, &mut RngStream::new(trial)).unwrap();
            let g = verify_gsd(&drafts, &ps, &qs, &s, None, &mut RngStream::new(trial)).unwrap();
            let a = verify_lossy(&drafts, &ps, &qs, LossyCriterion::Amplify(1.0), &mut RngStream::new(trial)).unwrap();
            let e = verify_lossy(&drafts, &ps, &qs, LossyCriterion::Addition(0.0), &mut RngStream::new(trial)).unwrap();
            assert_eq!(base, g);
            assert_eq!(base, a);
            assert_eq!(base, e);
        }
    }

    #[test]
    fn lossy_monotone_in_parameter() {
        let mut r = RngStream::new(8);
        for _ in 0..500 {
            let v = 2 + r.below(6);
            let p = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let q = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let x = TokenId::new(r.below(v));
            let mut prev = 0.0;
            for k in [1.0, 1.5, 2.0, 3.0, 10.0] {
                let a = Criterion::Lossy(LossyCriterion::Amplify(k)).accept_prob(&p, &q, x);
                assert!(a >= prev);
                prev = a;
            }
            prev = 0.0;
            for e in [0.0, 0.01, 0.1, 0.3, 1.0] {
                let a = Criterion::Lossy(LossyCriterion::Addition(e)).accept_prob(&p, &q, x);
                assert!(a >= prev);
                prev = a;
            }
        }
    }

    #[test]
    fn fixed_partition_uplift_is_nonnegative() {
        let mut r = RngStream::new(5);
        for _ in 0..300 {
            let v = 2 + r.below(63);
            let p = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let q = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let k = 1 + r.below(v);
            let assignment: Vec<usize> = (0..v).map(|t| if t < k { t } else { r.below(k) }).collect();
            let part = Partition::new(assignment, k).unwrap();
            let s = ClusterStrategy::new(ClusterKind::StaticEmbedding(part), 1, 0.0, 0.0).unwrap();
            let grouped = Criterion::Grouped { strategy: &s, dist: None };
            let lhs: f64 = (0..v)
                .map(|x| q.probs()[x] * grouped.accept_prob(&p, &q, TokenId::new(x)))
                .sum();
            let rhs = crate::pmf::expected_accept_sd(&p, &q).unwrap();
            assert!(lhs >= rhs - 1e-12);
        }
    }

    #[test]
    fn fast_profile_matches_per_token_route() {
        let mut r = RngStream::new(12);
        for _ in 0..200 {
            let v = 2 + r.below(40);
            let p = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let q = Pmf::from_weights((0..v).map(|_| r.uniform()).collect()).unwrap();
            let g = 1 + r.below(12);
            for kind in [ClusterKind::ExpertSortedWindow, ClusterKind::DraftSortedWindow] {
                let s = ClusterStrategy::new(kind, g, 0.0, 0.0).unwrap();
                let c = Criterion::Grouped { strategy: &s, dist: None };
                let fast = c.accept_profile(&p, &q);
                for x in 0..v {
                    let slow = c.accept_prob(&p, &q, TokenId::new(x));
                    assert!((fast[x] - slow).abs() <= 1e-12, "{} vs {}", fast[x], slow);
                }
            }
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let p = pmf(&[0.5, 0.5]);
        let mut rng = RngStream::new(0);
        assert!(verify_sd(&[TokenId(0), TokenId(1)], &[p.clone()], &[p.clone(), p.clone()], &mut rng).is_err());
        assert!(verify_sd(&[TokenId(0)], &[p.clone()], &[], &mut rng).is_err());
    }
}
