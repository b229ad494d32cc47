//! Measurement and validation layer: identity checkers, exactness testers,
//! acceptance-uplift and per-position diagnostics, and parameter sweeps.
//!
//! Every stochastic routine takes a master seed; trial `i` runs on its own seed
//! derived from `(master, i)`, so results do not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterKind, ClusterStrategy};
use crate::engine::{decode, decode_sd_with_diagnostics, ClusterMode, DecodeConfig, DecodeTrace, Method, Models, PositionDiagnostics};
use crate::error::{Error, Result};
use crate::model::TokenModel;
use crate::pmf::{expected_accept_sd, grouped_mass, tv_distance, Partition, Pmf, TokenId};
use crate::rng::RngStream;
use crate::toy::{
    distance_matrix, make_embeddings, make_perturbed_draft, static_partition, DistanceMatrix, EmbeddingTable,
    MarkovParams, MarkovTableModel, ModelFile, PerturbedDraftModel,
};
use crate::verify::{emission_law, Criterion};

/// Largest joint state space `V^len` that [`test_sequence_exactness`] will histogram.
pub const MAX_JOINT_STATES: u128 = 4096;

/// Seed for trial `index` of a run with master seed `master` (splitmix64 finalizer).
pub fn trial_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random pmf for property checks: dense uniform weights, with a sparse variant
/// (roughly half the entries zeroed) one time in four.
pub fn random_pmf(vocab: usize, rng: &mut RngStream) -> Pmf {
    let sparse = rng.below(4) == 0;
    loop {
        let w: Vec<f64> = (0..vocab)
            .map(|_| {
                let x = rng.uniform();
                if sparse && rng.below(2) == 0 {
                    0.0
                } else {
                    x
                }
            })
            .collect();
        if let Ok(p) = Pmf::from_weights(w) {
            return p;
        }
    }
}

/// Random partition of `[0, vocab)` into a random number of non-empty clusters.
pub fn random_partition(vocab: usize, rng: &mut RngStream) -> Partition {
    let k = 1 + rng.below(vocab);
    let mut assignment: Vec<usize> = (0..vocab).map(|t| if t < k { t } else { rng.below(k) }).collect();
    // shuffle so that the guaranteed representatives are not always tokens 0..k
    for i in (1..vocab).rev() {
        let j = rng.below(i + 1);
        assignment.swap(i, j);
    }
    Partition::new(assignment, k).expect("every cluster has a representative")
}

/// Largest `|Σ min(p, q) − (1 − TV(p, q))|` over `trials` random pairs.
pub fn check_proposition1(trials: usize, vocab: usize, seed: u64) -> Result<f64> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(trial_seed(seed, i as u64));
            let p = random_pmf(vocab, &mut rng);
            let q = random_pmf(vocab, &mut rng);
            Ok((expected_accept_sd(&p, &q)? - (1.0 - tv_distance(&p, &q)?)).abs())
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Largest `TV(p′, q′) − TV(p, q)` over random pairs and random partitions
/// (non-positive when grouping never increases TV).
pub fn check_theorem1(trials: usize, vocab: usize, seed: u64) -> Result<f64> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(trial_seed(seed, i as u64));
            let p = random_pmf(vocab, &mut rng);
            let q = random_pmf(vocab, &mut rng);
            let part = random_partition(vocab, &mut rng);
            let grouped = tv_distance(&grouped_mass(&p, &part)?, &grouped_mass(&q, &part)?)?;
            Ok(grouped - tv_distance(&p, &q)?)
        })
        .try_reduce(|| f64::NEG_INFINITY, |a, b| Ok(a.max(b)))
}

/// `max_x |law(x) − p(x)|` for the exact one-position emission law of `criterion`.
pub fn test_onestep_exactness(p: &Pmf, q: &Pmf, criterion: &Criterion) -> Result<f64> {
    let law = emission_law(p, q, criterion)?;
    Ok(law
        .iter()
        .zip(p.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessReport {
    pub method: String,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub length: usize,
    pub trials: usize,
    pub seed: u64,
    pub tv_empirical: f64,
    pub threshold: f64,
    /// Expected TV of a sample of this size drawn from the oracle itself, plus
    /// five standard deviations.
    pub noise_floor: f64,
    pub passed: bool,
}

/// Pass threshold: 0.02 at 10^5 trials, scaled as `1/√trials`.
pub fn exactness_threshold(trials: usize) -> f64 {
    0.02 * (1e5 / trials.max(1) as f64).sqrt()
}

/// Upper bound on the mean TV between an empirical histogram of `trials` draws and
/// its source law over `cells` outcomes, plus five standard deviations.
pub fn noise_floor(cells: usize, trials: usize) -> f64 {
    let n = trials.max(1) as f64;
    let mean_bound = (cells as f64 / (2.0 * std::f64::consts::PI * n)).sqrt();
    let sd = 0.5 * ((1.0 - 2.0 / std::f64::consts::PI) / n).sqrt();
    mean_bound + 5.0 * sd
}

/// Exact law of the generated continuation under plain ancestral sampling,
/// indexed by the base-`V` encoding of the continuation.
pub fn vanilla_sequence_law(model: &dyn TokenModel, config: &DecodeConfig, prompt: &[TokenId], length: usize) -> Result<Vec<f64>> {
    let v = model.vocab_size();
    let cells = joint_states(v, length)?;
    let mut law = vec![0.0; cells];
    let mut stack: Vec<(Vec<TokenId>, usize, f64)> = vec![(prompt.to_vec(), 0, 1.0)];
    while let Some((ctx, code, mass)) = stack.pop() {
        if ctx.len() - prompt.len() == length {
            law[code] += mass;
            continue;
        }
        let p = crate::pmf::pmf_from_logits(&model.forward(&ctx, &[])[0], config.top_k, config.temperature)?;
        for (x, &px) in p.probs().iter().enumerate() {
            if px > 0.0 {
                let mut next = ctx.clone();
                next.push(TokenId::new(x));
                stack.push((next, code * v + x, mass * px));
            }
        }
    }
    Ok(law)
}

fn joint_states(vocab: usize, length: usize) -> Result<usize> {
    let states = (vocab as u128).checked_pow(length as u32).unwrap_or(u128::MAX);
    if states > MAX_JOINT_STATES {
        return Err(Error::StateSpaceTooLarge {
            states,
            limit: MAX_JOINT_STATES,
        });
    }
    Ok(states as usize)
}

fn encode(tokens: &[TokenId], vocab: usize) -> usize {
    tokens.iter().fold(0, |acc, t| acc * vocab + t.index())
}

/// Monte Carlo TV between the sequences a method generates and the exact
/// ancestral-sampling law of the target. The generated length is
/// `config.max_len − prompt.len()`.
pub fn test_sequence_exactness(
    models: Models<'_>,
    config: &DecodeConfig,
    prompt: &[TokenId],
    trials: usize,
    seed: u64,
) -> Result<ExactnessReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let v = models.target.vocab_size();
    let length = config.max_len.saturating_sub(prompt.len());
    let cells = joint_states(v, length)?;
    let oracle = vanilla_sequence_law(models.target, config, prompt, length)?;

    let counts = (0..trials)
        .into_par_iter()
        .map(|i| {
            let cfg = DecodeConfig {
                seed: trial_seed(seed, i as u64),
                ..config.clone()
            };
            let trace = decode(models, &cfg, prompt)?;
            Ok(encode(trace.generated(), v))
        })
        .try_fold(
            || vec![0u64; cells],
            |mut acc, code: Result<usize>| {
                acc[code?] += 1;
                Ok::<_, Error>(acc)
            },
        )
        .try_reduce(
            || vec![0u64; cells],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;

    let n = trials as f64;
    let tv = 0.5
        * counts
            .iter()
            .zip(&oracle)
            .map(|(&c, &o)| (c as f64 / n - o).abs())
            .sum::<f64>();
    let threshold = exactness_threshold(trials);
    Ok(ExactnessReport {
        method: config.label(),
        vocab: v,
        length,
        trials,
        seed,
        tv_empirical: tv,
        threshold,
        noise_floor: noise_floor(cells, trials),
        passed: tv <= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    /// `E_{x∼q}[a_grouped(x) − a_exact(x)]` at every generated position.
    pub per_position: Vec<f64>,
    pub mean: f64,
    pub min: f64,
}

/// Exact expected acceptance uplift of `strategy` over the exact test, at every
/// position of `sequence` past the prompt, using the true conditionals of both models.
pub fn measure_accept_uplift(
    target: &dyn TokenModel,
    draft: &dyn TokenModel,
    config: &DecodeConfig,
    strategy: &ClusterStrategy,
    dist: Option<&DistanceMatrix>,
    sequence: &[TokenId],
    prompt_len: usize,
) -> Result<UpliftReport> {
    let grouped = Criterion::Grouped { strategy, dist };
    let per_position = (prompt_len.max(1)..sequence.len())
        .map(|t| {
            let ctx = &sequence[..t];
            let p = crate::pmf::pmf_from_logits(&target.forward(ctx, &[])[0], config.top_k, config.temperature)?;
            let q = crate::pmf::pmf_from_logits(&draft.forward(ctx, &[])[0], config.top_k, config.temperature)?;
            let a_g = grouped.accept_profile(&p, &q);
            let a_s = Criterion::Exact.accept_profile(&p, &q);
            Ok(q.probs()
                .iter()
                .zip(a_g.iter().zip(&a_s))
                .map(|(qx, (g, s))| qx * (g - s))
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = if per_position.is_empty() {
        0.0
    } else {
        per_position.iter().sum::<f64>() / per_position.len() as f64
    };
    let min = per_position.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(UpliftReport { per_position, mean, min })
}

/// Per-position diagnostics of one speculative decode with the draft model. The
/// grouped column uses `strategy`; the decoded tokens do not depend on it.
pub fn diagnose_positions(
    target: &dyn TokenModel,
    draft: &dyn TokenModel,
    config: &DecodeConfig,
    strategy: &ClusterStrategy,
    dist: Option<&DistanceMatrix>,
    prompt: &[TokenId],
) -> Result<Vec<PositionDiagnostics>> {
    Ok(decode_sd_with_diagnostics(target, draft, config, prompt, Some((strategy, dist)))?.per_position)
}

/// Target model, codebook and draft models of one experiment.
#[derive(Debug)]
pub struct Lab {
    pub target: MarkovTableModel,
    pub embeddings: EmbeddingTable,
    pub dist: DistanceMatrix,
    pub seed: u64,
    pub entropy_mix: f64,
    partitions: Mutex<HashMap<usize, Partition>>,
    drafts: Mutex<HashMap<(u64, u64), std::sync::Arc<PerturbedDraftModel>>>,
}

/// Embedding dimension used when none is given.
pub const DEFAULT_DIM: usize = 32;

impl Lab {
    pub fn new(target: MarkovTableModel, embeddings: EmbeddingTable, seed: u64, entropy_mix: f64) -> Result<Self> {
        if embeddings.vocab() != target.vocab() {
            return Err(Error::VocabMismatch {
                target: target.vocab(),
                draft: embeddings.vocab(),
            });
        }
        let dist = distance_matrix(&embeddings);
        Ok(Self {
            target,
            embeddings,
            dist,
            seed,
            entropy_mix,
            partitions: Mutex::default(),
            drafts: Mutex::default(),
        })
    }

    pub fn generate(vocab: usize, entropy_mix: f64, dim: usize, seed: u64) -> Result<Self> {
        let target = MarkovTableModel::generate(&MarkovParams::new(vocab, entropy_mix, seed))?;
        let embeddings = make_embeddings(vocab, dim, seed)?;
        Self::new(target, embeddings, seed, entropy_mix)
    }

    /// Every state high-entropy: many plausible next tokens.
    pub fn high_entropy(vocab: usize, seed: u64) -> Result<Self> {
        Self::generate(vocab, 1.0, DEFAULT_DIM, seed)
    }

    /// Every state low-entropy: long confident runs.
    pub fn low_entropy(vocab: usize, seed: u64) -> Result<Self> {
        Self::generate(vocab, 0.0, DEFAULT_DIM, seed)
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let (seed, mix) = (file.seed, file.entropy_mix);
        let (target, embeddings) = file.into_parts()?;
        Self::new(target, embeddings, seed, mix)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile::new(&self.target, &self.embeddings, self.seed, self.entropy_mix)
    }

    pub fn vocab(&self) -> usize {
        self.target.vocab()
    }

    /// Perturbed copy of the target. Draft noise is seeded by `seed`.
    pub fn draft(&self, sigma: f64, seed: u64) -> Result<std::sync::Arc<PerturbedDraftModel>> {
        let key = (sigma.to_bits(), seed);
        let mut cache = self.drafts.lock().expect("draft cache poisoned");
        if let Some(d) = cache.get(&key) {
            return Ok(d.clone());
        }
        let d = std::sync::Arc::new(make_perturbed_draft(&self.target, sigma, seed)?);
        cache.insert(key, d.clone());
        Ok(d)
    }

    /// Static k-means partition for group size `G`, seeded by the lab seed.
    pub fn partition(&self, group_size: usize) -> Result<Partition> {
        let mut cache = self.partitions.lock().expect("partition cache poisoned");
        if let Some(p) = cache.get(&group_size) {
            return Ok(p.clone());
        }
        let p = static_partition(&self.embeddings, group_size, self.seed)?;
        cache.insert(group_size, p.clone());
        Ok(p)
    }

    pub fn strategy(&self, config: &DecodeConfig) -> Result<ClusterStrategy> {
        let kind = match config.cluster {
            ClusterMode::Embed => ClusterKind::StaticEmbedding(self.partition(config.group_size)?),
            ClusterMode::Q => ClusterKind::DraftSortedWindow,
            ClusterMode::P => ClusterKind::ExpertSortedWindow,
            ClusterMode::PFiltered => ClusterKind::ExpertSortedWindowFiltered,
        };
        ClusterStrategy::new(kind, config.group_size, config.prob_threshold, config.embed_threshold)
    }

    /// Decodes with the method in `config`; `draft` gives `(σ, noise seed)` for
    /// methods that need a draft model.
    pub fn decode(&self, config: &DecodeConfig, draft: Option<(f64, u64)>, prompt: &[TokenId]) -> Result<DecodeTrace> {
        let draft_model = match (config.method.needs_draft_model(), draft) {
            (true, Some((sigma, seed))) => Some(self.draft(sigma, seed)?),
            (true, None) => {
                return Err(Error::InvalidConfig("this method needs a draft noise scale".into()));
            }
            (false, _) => None,
        };
        let strategy = if config.method == Method::Gsd {
            Some(self.strategy(config)?)
        } else {
            None
        };
        let models = Models {
            target: &self.target,
            draft: draft_model.as_deref().map(|d| d as &dyn TokenModel),
            strategy: strategy.as_ref(),
            dist: Some(&self.dist),
        };
        decode(models, config, prompt)
    }
}

/// One grid point of a sweep: a decode configuration (its seed is replaced by
/// each sweep seed) and the draft noise scale for methods that use a draft model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub config: DecodeConfig,
    pub sigma: f64,
}

/// Aggregate over seeds for one grid point. Columns that do not apply to the
/// method are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(rename = "G")]
    pub group_size: Option<usize>,
    pub delta: Option<f64>,
    pub d: Option<f64>,
    pub sigma: Option<f64>,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub mean_nfe: f64,
    pub mean_accept_rate: f64,
    pub mean_tv: f64,
    pub seeds_used: String,
}

/// One (grid point, seed) decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    #[serde(rename = "G")]
    pub group_size: Option<usize>,
    pub delta: Option<f64>,
    pub d: Option<f64>,
    pub sigma: Option<f64>,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub seed: u64,
    pub nfe_target: usize,
    pub nfe_draft: usize,
    pub accept_rate: f64,
    pub mean_tv: f64,
    pub generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub cell: usize,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
    pub errors: Vec<CellError>,
}

/// `0-3,7,9-10` style summary of a seed set.
pub fn format_seed_ranges(seeds: &[u64]) -> String {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            i += 1;
            end = sorted[i];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        i += 1;
    }
    parts.join(",")
}

impl SweepCell {
    fn record(&self, seed: u64, vocab: usize, trace: &DecodeTrace) -> RunRecord {
        let (g, delta, d, sigma) = self.columns();
        RunRecord {
            method: self.config.label(),
            group_size: g,
            delta,
            d,
            sigma,
            vocab,
            seed,
            nfe_target: trace.nfe_target,
            nfe_draft: trace.nfe_draft,
            accept_rate: trace.accept_rate(),
            mean_tv: trace.mean_emission_tv(),
            generated: trace.generated().len(),
        }
    }

    fn columns(&self) -> (Option<usize>, Option<f64>, Option<f64>, Option<f64>) {
        let c = &self.config;
        let gsd = c.method == Method::Gsd;
        let filtered = gsd && c.cluster == ClusterMode::PFiltered;
        (
            gsd.then_some(c.group_size),
            filtered.then_some(c.prob_threshold),
            filtered.then_some(c.embed_threshold),
            c.method.needs_draft_model().then_some(self.sigma),
        )
    }
}

/// Runs every cell for every seed and aggregates per cell. Invalid cells are
/// reported in `errors` and skipped; the rest of the grid still runs.
pub fn run_sweep(lab: &Lab, cells: &[SweepCell], seeds: &[u64], prompt: &[TokenId]) -> Result<SweepResult> {
    if cells.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();

    let mut errors = Vec::new();
    let mut valid = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let check = cell.config.validate().and_then(|_| {
            if cell.config.method.needs_draft_model() && !(cell.sigma >= 0.0) {
                Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", cell.sigma)))
            } else {
                Ok(())
            }
        });
        match check {
            Ok(()) => valid.push(i),
            Err(e) => errors.push(CellError {
                cell: i,
                method: cell.config.label(),
                message: e.to_string(),
            }),
        }
    }

    let jobs: Vec<(usize, u64)> = valid.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes: Vec<(usize, u64, Result<DecodeTrace>)> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let cfg = DecodeConfig {
                seed,
                ..cell.config.clone()
            };
            (c, seed, lab.decode(&cfg, Some((cell.sigma, lab.seed.wrapping_add(1))), prompt))
        })
        .collect();

    let mut by_cell: BTreeMap<usize, Vec<RunRecord>> = BTreeMap::new();
    let mut failed: BTreeMap<usize, String> = BTreeMap::new();
    for (c, seed, outcome) in outcomes {
        match outcome {
            Ok(trace) => by_cell.entry(c).or_default().push(cells[c].record(seed, lab.vocab(), &trace)),
            Err(e) => {
                failed.entry(c).or_insert_with(|| e.to_string());
            }
        }
    }

    let mut result = SweepResult {
        errors,
        ..SweepResult::default()
    };
    for (c, message) in failed {
        by_cell.remove(&c);
        result.errors.push(CellError {
            cell: c,
            method: cells[c].config.label(),
            message,
        });
    }
    result.errors.sort_by_key(|e| e.cell);
    for (c, mut runs) in by_cell {
        runs.sort_by_key(|r| r.seed);
        let n = runs.len() as f64;
        let (g, delta, d, sigma) = cells[c].columns();
        let used: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        result.rows.push(SweepRow {
            method: cells[c].config.label(),
            group_size: g,
            delta,
            d,
            sigma,
            vocab: lab.vocab(),
            mean_nfe: runs.iter().map(|r| r.nfe_target as f64).sum::<f64>() / n,
            mean_accept_rate: runs.iter().map(|r| r.accept_rate).sum::<f64>() / n,
            mean_tv: runs.iter().map(|r| r.mean_tv).sum::<f64>() / n,
            seeds_used: format_seed_ranges(&used),
        });
        result.runs.extend(runs);
    }
    Ok(result)
}

/// A lossy point set against the grouped curve at the same cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoComparison {
    pub method: String,
    pub nfe: f64,
    pub tv: f64,
    /// Grouped TV interpolated at `nfe`, when `nfe` lies within 5% of the
    /// grouped curve's NFE range.
    pub grouped_tv: Option<f64>,
}

impl ParetoComparison {
    pub fn grouped_wins(&self) -> Option<bool> {
        self.grouped_tv.map(|g| g < self.tv)
    }
}

/// Compares each `other` row with the piecewise-linear (NFE, TV) curve through
/// the `grouped` rows. Points more than `tolerance` (relative) outside the
/// curve's NFE range are left unmatched.
pub fn pareto_compare(grouped: &[SweepRow], others: &[SweepRow], tolerance: f64) -> Vec<ParetoComparison> {
    let mut curve: Vec<(f64, f64)> = grouped.iter().map(|r| (r.mean_nfe, r.mean_tv)).collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    others
        .iter()
        .map(|r| ParetoComparison {
            method: r.method.clone(),
            nfe: r.mean_nfe,
            tv: r.mean_tv,
            grouped_tv: interpolate(&curve, r.mean_nfe, tolerance),
        })
        .collect()
}

fn interpolate(curve: &[(f64, f64)], x: f64, tolerance: f64) -> Option<f64> {
    let (lo, hi) = (curve.first()?, curve.last()?);
    if x < lo.0 {
        return (x >= lo.0 * (1.0 - tolerance)).then_some(lo.1);
    }
    if x > hi.0 {
        return (x <= hi.0 * (1.0 + tolerance)).then_some(hi.1);
    }
    curve.windows(2).find(|w| x >= w[0].0 && x <= w[1].0).map(|w| {
        let (a, b) = (w[0], w[1]);
        if b.0 == a.0 {
            a.1.min(b.1)
        } else {
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        }
    }).or(Some(lo.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::make_markov_model;
    use crate::verify::LossyCriterion;

    #[test]
    fn trial_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| trial_seed(7, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_ne!(trial_seed(1, 0), trial_seed(2, 0));
    }

    #[test]
    fn proposition1_holds() {
        assert!(check_proposition1(2000, 128, 1).unwrap() <= 1e-12);
    }

    #[test]
    fn theorem1_has_no_violation() {
        assert!(check_theorem1(2000, 128, 1).unwrap() <= 1e-12);
    }

    #[test]
    fn identity_checks_vanish_on_equal_pmfs() {
        let mut rng = RngStream::new(4);
        for _ in 0..100 {
            let p = random_pmf(32, &mut rng);
            let part = random_partition(32, &mut rng);
            assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
            assert!((expected_accept_sd(&p, &p).unwrap() - 1.0).abs() <= 1e-12);
            let g = grouped_mass(&p, &part).unwrap();
            assert_eq!(tv_distance(&g, &g).unwrap(), 0.0);
        }
    }

    #[test]
    fn onestep_exactness_of_exact_kernels() {
        let mut rng = RngStream::new(2);
        let singleton = ClusterStrategy::expert_window(1);
        for v in [2, 4, 8, 16] {
            for _ in 0..250 {
                let p = random_pmf(v, &mut rng);
                let q = random_pmf(v, &mut rng);
                assert!(test_onestep_exactness(&p, &q, &Criterion::Exact).unwrap() <= 1e-12);
                let g = Criterion::Grouped { strategy: &singleton, dist: None };
                assert!(test_onestep_exactness(&p, &q, &g).unwrap() <= 1e-12);
            }
        }
        let p = Pmf::new(vec![0.75, 0.25]).unwrap();
        let q = Pmf::new(vec![0.25, 0.75]).unwrap();
        let amp = Criterion::Lossy(LossyCriterion::Amplify(2.0));
        assert!(test_onestep_exactness(&p, &q, &amp).unwrap() > 0.05);
    }

    #[test]
    fn vanilla_law_sums_to_one() {
        let model = make_markov_model(4, 0.5, 1).unwrap();
        let cfg = DecodeConfig::new(Method::Vanilla, 4);
        let law = vanilla_sequence_law(&model, &DecodeConfig { top_k: 4, ..cfg }, &[TokenId(0)], 3).unwrap();
        assert_eq!(law.len(), 64);
        assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_exactness_rejects_large_state_spaces() {
        let model = make_markov_model(64, 0.5, 1).unwrap();
        let cfg = DecodeConfig {
            max_len: 4,
            ..DecodeConfig::new(Method::Sjd, 64)
        };
        let err = test_sequence_exactness(Models::target_only(&model), &cfg, &[TokenId(0)], 10, 0).unwrap_err();
        assert!(matches!(err, Error::StateSpaceTooLarge { .. }));
    }

    #[test]
    fn sequence_exactness_small_run_is_reproducible() {
        let model = make_markov_model(4, 0.5, 3).unwrap();
        let cfg = DecodeConfig {
            max_len: 3,
            top_k: 4,
            draft_len: 2,
            ..DecodeConfig::new(Method::Sjd, 4)
        };
        let a = test_sequence_exactness(Models::target_only(&model), &cfg, &[TokenId(1)], 4000, 9).unwrap();
        let b = test_sequence_exactness(Models::target_only(&model), &cfg, &[TokenId(1)], 4000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.tv_empirical <= a.noise_floor);
    }

    #[test]
    fn uplift_is_zero_for_singletons() {
        let lab = Lab::high_entropy(64, 1).unwrap();
        let draft = lab.draft(0.5, 2).unwrap();
        let cfg = DecodeConfig {
            max_len: 40,
            ..DecodeConfig::new(Method::Sd, 64)
        };
        let trace = lab.decode(&cfg, Some((0.5, 2)), &[TokenId(0)]).unwrap();
        let r = measure_accept_uplift(&lab.target, draft.as_ref(), &cfg, &ClusterStrategy::expert_window(1), None, &trace.sequence, 1).unwrap();
        assert!(r.per_position.iter().all(|&u| u == 0.0));
        assert_eq!(r.per_position.len(), 39);
    }

    #[test]
    fn diagnostics_with_exact_draft_have_zero_tv() {
        let lab = Lab::high_entropy(32, 5).unwrap();
        let draft = lab.draft(0.0, 1).unwrap();
        let cfg = DecodeConfig {
            max_len: 50,
            ..DecodeConfig::new(Method::Sd, 32)
        };
        let diag = diagnose_positions(&lab.target, draft.as_ref(), &cfg, &ClusterStrategy::expert_window(4), None, &[TokenId(0)]).unwrap();
        assert!(!diag.is_empty());
        assert!(diag.iter().all(|d| d.tv == 0.0 && d.sd_accept_prob == 1.0));
    }

    #[test]
    fn seed_ranges_format() {
        assert_eq!(format_seed_ranges(&[3, 0, 1, 2, 7, 9, 10]), "0-3,7,9-10");
        assert_eq!(format_seed_ranges(&[5]), "5");
        assert_eq!(format_seed_ranges(&(0..100).collect::<Vec<_>>()), "0-99");
    }

    fn small_grid(v: usize) -> Vec<SweepCell> {
        let base = DecodeConfig {
            max_len: 40,
            draft_len: 4,
            ..DecodeConfig::new(Method::Sjd, v)
        };
        let mut cells = vec![SweepCell { config: base.clone(), sigma: 0.5 }];
        for g in [1, 4] {
            cells.push(SweepCell {
                config: DecodeConfig {
                    method: Method::Gsd,
                    group_size: g,
                    ..base.clone()
                },
                sigma: 0.5,
            });
        }
        cells
    }

    #[test]
    fn sweep_is_order_independent() {
        let lab = Lab::high_entropy(32, 2).unwrap();
        let cells = small_grid(32);
        let a = run_sweep(&lab, &cells, &[0, 1, 2, 3], &[TokenId(0)]).unwrap();
        let b = run_sweep(&lab, &cells, &[3, 1, 0, 2], &[TokenId(0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.runs.len(), 12);
        assert_eq!(a.rows[0].seeds_used, "0-3");
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_accept_rate)));
    }

    #[test]
    fn sweep_reports_invalid_cells_and_continues() {
        let lab = Lab::high_entropy(32, 2).unwrap();
        let mut cells = small_grid(32);
        cells[1].config.draft_len = 0;
        let r = run_sweep(&lab, &cells, &[0], &[TokenId(0)]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].cell, 1);
    }

    #[test]
    fn single_cell_single_seed_gives_one_row() {
        let lab = Lab::high_entropy(32, 2).unwrap();
        let r = run_sweep(&lab, &small_grid(32)[..1], &[4], &[TokenId(0)]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].seeds_used, "4");
    }

    fn row(method: &str, nfe: f64, tv: f64) -> SweepRow {
        SweepRow {
            method: method.into(),
            group_size: None,
            delta: None,
            d: None,
            sigma: None,
            vocab: 8,
            mean_nfe: nfe,
            mean_accept_rate: 0.5,
            mean_tv: tv,
            seeds_used: "0".into(),
        }
    }

    #[test]
    fn pareto_interpolates_and_flags_unmatched() {
        let curve = vec![row("gsd", 100.0, 0.2), row("gsd", 120.0, 0.1)];
        let others = vec![row("a", 110.0, 0.2), row("b", 50.0, 0.9), row("c", 124.0, 0.05)];
        let cmp = pareto_compare(&curve, &others, 0.05);
        assert!((cmp[0].grouped_tv.unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(cmp[0].grouped_wins(), Some(true));
        assert_eq!(cmp[1].grouped_tv, None);
        assert_eq!(cmp[2].grouped_wins(), Some(false));
    }
}
