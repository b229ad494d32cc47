use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenModel;
use crate::pmf::{pmf_from_logits, tv_distance, Logits, Pmf, TokenId};
use crate::rng::RngStream;

use super::embedding::EmbeddingTable;

/// Floor applied before taking logs so that underflowed Dirichlet draws stay finite.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyClass {
    Low,
    High,
}

/// Top-1 ceiling for high-entropy rows. `0.1` is infeasible below `V = 20`, so tiny
/// vocabularies get `2 / V` instead.
pub fn high_entropy_cap(vocab: usize) -> f64 {
    0.1f64.max(2.0 / vocab as f64)
}

/// Top-1 floor for low-entropy rows.
pub const LOW_ENTROPY_FLOOR: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovParams {
    pub vocab: usize,
    /// Fraction of states whose rows are high-entropy.
    pub entropy_mix: f64,
    pub seed: u64,
    /// Mean Dirichlet shape per entry for high-entropy rows. Larger is flatter and
    /// makes rows of different states closer to each other.
    pub concentration: f64,
    /// Standard deviation of the shared log-prior that all high-entropy rows scatter around.
    pub prior_spread: f64,
}

impl MarkovParams {
    pub fn new(vocab: usize, entropy_mix: f64, seed: u64) -> Self {
        Self {
            vocab,
            entropy_mix,
            seed,
            concentration: 4.0,
            prior_spread: 0.5,
        }
    }
}

/// Order-1 Markov model: row `s` holds the next-token logits after token `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTableModel {
    vocab: usize,
    logits: Vec<f64>,
    entropy_profile: Vec<EntropyClass>,
}

impl MarkovTableModel {
    pub fn from_rows(rows: Vec<Vec<f64>>, entropy_profile: Vec<EntropyClass>) -> Result<Self> {
        let vocab = rows.len();
        if vocab < 2 {
            return Err(Error::InvalidConfig("vocabulary must have at least 2 tokens".into()));
        }
        if entropy_profile.len() != vocab {
            return Err(Error::LengthMismatch {
                expected: vocab,
                actual: entropy_profile.len(),
            });
        }
        let mut logits = Vec::with_capacity(vocab * vocab);
        for row in rows {
            if row.len() != vocab {
                return Err(Error::LengthMismatch {
                    expected: vocab,
                    actual: row.len(),
                });
            }
            if let Some(i) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLogits(i));
            }
            logits.extend(row);
        }
        Ok(Self {
            vocab,
            logits,
            entropy_profile,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, state: TokenId) -> &[f64] {
        let s = state.index();
        &self.logits[s * self.vocab..(s + 1) * self.vocab]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.logits.chunks(self.vocab).map(<[f64]>::to_vec).collect()
    }

    pub fn entropy_profile(&self) -> &[EntropyClass] {
        &self.entropy_profile
    }

    pub fn class(&self, state: TokenId) -> EntropyClass {
        self.entropy_profile[state.index()]
    }

    pub fn pmf_row(&self, state: TokenId, top_k: usize, temperature: f64) -> Result<Pmf> {
        pmf_from_logits(&Logits(self.row(state).to_vec()), top_k, temperature)
    }
}

impl TokenModel for MarkovTableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn forward(&self, context: &[TokenId], candidates: &[TokenId]) -> Vec<Logits> {
        markov_forward(self.vocab, &self.logits, context, candidates)
    }
}

fn markov_forward(
    vocab: usize,
    logits: &[f64],
    context: &[TokenId],
    candidates: &[TokenId],
) -> Vec<Logits> {
    let first = *context.last().expect("Markov model needs a non-empty context");
    std::iter::once(first)
        .chain(candidates.iter().copied())
        .map(|s| {
            let s = s.index();
            Logits(logits[s * vocab..(s + 1) * vocab].to_vec())
        })
        .collect()
}

fn mass_cover(probs: &[f64], fraction: f64) -> usize {
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, p) in sorted.iter().enumerate() {
        acc += p;
        if acc >= fraction {
            return i + 1;
        }
    }
    sorted.len()
}

fn high_entropy_row(prior: &[f64], params: &MarkovParams, rng: &mut RngStream) -> Vec<f64> {
    let v = params.vocab;
    let cap = high_entropy_cap(v);
    let min_cover = v.div_ceil(4);
    let gammas: Vec<Gamma<f64>> = prior
        .iter()
        .map(|m| Gamma::new(params.concentration * v as f64 * m, 1.0).expect("positive shape"))
        .collect();
    loop {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng.inner_mut())).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        let probs: Vec<f64> = draws.iter().map(|d| d / total).collect();
        let top1 = probs.iter().copied().fold(0.0, f64::max);
        if top1 <= cap && mass_cover(&probs, 0.5) >= min_cover {
            return probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        }
    }
}

/// The token every low-entropy row concentrates on: the lowest-id low-entropy
/// state, which therefore loops on itself. Long runs of it play the part of flat
/// image regions. `None` when every state is high-entropy.
pub fn background_token(profile: &[EntropyClass]) -> Option<usize> {
    profile.iter().position(|c| *c == EntropyClass::Low)
}

/// Confident row: `dominant` holds at least [`LOW_ENTROPY_FLOOR`] of the mass,
/// the remainder is spread at random over the other tokens.
fn low_entropy_row(dominant: usize, vocab: usize, rng: &mut RngStream) -> Vec<f64> {
    let keep = LOW_ENTROPY_FLOOR + 0.02 + 0.07 * rng.uniform();
    let exp1 = Gamma::new(1.0, 1.0).expect("valid");
    let mut rest: Vec<f64> = (0..vocab).map(|_| exp1.sample(rng.inner_mut())).collect();
    rest[dominant] = 0.0;
    let total: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|r| *r *= (1.0 - keep) / total);
    rest[dominant] = keep;
    rest.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
}

pub fn make_markov_model(vocab: usize, entropy_mix: f64, seed: u64) -> Result<MarkovTableModel> {
    MarkovTableModel::generate(&MarkovParams::new(vocab, entropy_mix, seed))
}

impl MarkovTableModel {
    /// Seeded generator. High-entropy rows are Dirichlet draws around a shared
    /// prior, redrawn until the top-1 cap and the mass-spread floor hold.
    pub fn generate(params: &MarkovParams) -> Result<Self> {
        let v = params.vocab;
        if v < 2 {
            return Err(Error::InvalidConfig("vocabulary must have at least 2 tokens".into()));
        }
        if !(0.0..=1.0).contains(&params.entropy_mix) {
            return Err(Error::InvalidConfig(format!(
                "entropy mix {} outside [0, 1]",
                params.entropy_mix
            )));
        }
        if !(params.concentration > 0.0) || !(params.prior_spread >= 0.0) {
            return Err(Error::InvalidConfig(
                "concentration must be positive and prior spread non-negative".into(),
            ));
        }
        let mut rng = RngStream::new(params.seed);

        let raw: Vec<f64> = (0..v)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng.inner_mut());
                (params.prior_spread * z).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let prior: Vec<f64> = raw.iter().map(|r| r / total).collect();

        let high_count = (params.entropy_mix * v as f64).round() as usize;
        let mut states: Vec<usize> = (0..v).collect();
        states.shuffle(rng.inner_mut());
        let mut profile = vec![EntropyClass::Low; v];
        for &s in &states[..high_count] {
            profile[s] = EntropyClass::High;
        }

        let background = background_token(&profile);
        let rows = (0..v)
            .map(|s| match profile[s] {
                EntropyClass::High => high_entropy_row(&prior, params, &mut rng),
                EntropyClass::Low => low_entropy_row(background.unwrap_or(s), v, &mut rng),
            })
            .collect();
        Self::from_rows(rows, profile)
    }
}

/// Draft model: the target's logits plus fixed seeded Gaussian noise of scale `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedDraftModel {
    vocab: usize,
    sigma: f64,
    seed: u64,
    logits: Vec<f64>,
}

pub fn make_perturbed_draft(
    base: &MarkovTableModel,
    sigma: f64,
    seed: u64,
) -> Result<PerturbedDraftModel> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("noise scale must be >= 0, got {sigma}")));
    }
    let mut rng = RngStream::new(seed);
    let logits = base
        .logits
        .iter()
        .map(|l| {
            let z: f64 = StandardNormal.sample(rng.inner_mut());
            l + sigma * z
        })
        .collect();
    Ok(PerturbedDraftModel {
        vocab: base.vocab,
        sigma,
        seed,
        logits,
    })
}

impl PerturbedDraftModel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, state: TokenId) -> &[f64] {
        let s = state.index();
        &self.logits[s * self.vocab..(s + 1) * self.vocab]
    }

    pub fn pmf_row(&self, state: TokenId, top_k: usize, temperature: f64) -> Result<Pmf> {
        pmf_from_logits(&Logits(self.row(state).to_vec()), top_k, temperature)
    }

    /// Mean over states of `TV(target row, draft row)` after truncation.
    pub fn mean_row_tv(&self, base: &MarkovTableModel, top_k: usize, temperature: f64) -> Result<f64> {
        let mut acc = 0.0;
        for s in 0..self.vocab {
            let t = TokenId::new(s);
            acc += tv_distance(
                &base.pmf_row(t, top_k, temperature)?,
                &self.pmf_row(t, top_k, temperature)?,
            )?;
        }
        Ok(acc / self.vocab as f64)
    }
}

impl TokenModel for PerturbedDraftModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn forward(&self, context: &[TokenId], candidates: &[TokenId]) -> Vec<Logits> {
        markov_forward(self.vocab, &self.logits, context, candidates)
    }
}

/// JSON form of a generated toy: target logits plus the codebook embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub seed: u64,
    pub entropy_mix: f64,
    pub entropy_profile: Vec<EntropyClass>,
    pub logits: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn new(model: &MarkovTableModel, embeddings: &EmbeddingTable, seed: u64, entropy_mix: f64) -> Self {
        Self {
            vocab: model.vocab,
            embed_dim: embeddings.dim(),
            seed,
            entropy_mix,
            entropy_profile: model.entropy_profile.clone(),
            logits: model.rows(),
            embeddings: embeddings.rows(),
        }
    }

    pub fn into_parts(self) -> Result<(MarkovTableModel, EmbeddingTable)> {
        if self.logits.len() != self.vocab || self.embeddings.len() != self.vocab {
            return Err(Error::LengthMismatch {
                expected: self.vocab,
                actual: self.logits.len().min(self.embeddings.len()),
            });
        }
        let model = MarkovTableModel::from_rows(self.logits, self.entropy_profile)?;
        let table = EmbeddingTable::from_rows(self.embeddings)?;
        Ok((model, table))
    }
}
