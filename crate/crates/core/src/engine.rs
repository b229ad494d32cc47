//! End-to-end decoding protocols with function-evaluation accounting.
//!
//! * vanilla: one target forward per token;
//! * SD: `L` sequential draft forwards, then one parallel target forward;
//! * Jacobi: greedy fixed-point iteration over a block of `L` candidates;
//! * SJD / GSD / lossy: a single model whose previous parallel pass supplies the
//!   draft pmfs for the next one, verified with the exact, grouped or lossy rule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterStrategy;
use crate::error::{Error, Result};
use crate::model::TokenModel;
use crate::pmf::{pmf_from_logits, tv_distance, Logits, Pmf, TokenId};
use crate::rng::RngStream;
use crate::toy::DistanceMatrix;
use crate::verify::{emission_law_from_profile, verify, Criterion, LossyCriterion, Tail, VerifyOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Sd,
    Jacobi,
    Sjd,
    Gsd,
    Amplify,
    Addition,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vanilla,
        Method::Sd,
        Method::Jacobi,
        Method::Sjd,
        Method::Gsd,
        Method::Amplify,
        Method::Addition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Sd => "sd",
            Method::Jacobi => "jacobi",
            Method::Sjd => "sjd",
            Method::Gsd => "gsd",
            Method::Amplify => "amplify",
            Method::Addition => "addition",
        }
    }

    pub fn needs_draft_model(self) -> bool {
        self == Method::Sd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidConfig(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// How GSD builds the cluster around a draft token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    /// Static k-means blocks of the embedding table.
    Embed,
    /// Window over the draft pmf's ranking.
    Q,
    /// Window over the target pmf's ranking.
    P,
    /// Target-ranked window with δ and d filters.
    PFiltered,
}

impl ClusterMode {
    pub fn name(self) -> &'static str {
        match self {
            ClusterMode::Embed => "embed",
            ClusterMode::Q => "q",
            ClusterMode::P => "p",
            ClusterMode::PFiltered => "p-filtered",
        }
    }
}

impl FromStr for ClusterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(ClusterMode::Embed),
            "q" => Ok(ClusterMode::Q),
            "p" => Ok(ClusterMode::P),
            "p-filtered" => Ok(ClusterMode::PFiltered),
            _ => Err(Error::InvalidConfig(format!(
                "unknown cluster mode `{s}` (expected embed, q, p or p-filtered)"
            ))),
        }
    }
}

/// Decoding parameters. Fields that do not apply to the chosen method are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub method: Method,
    /// Draft block length `L`.
    #[serde(rename = "L")]
    pub draft_len: usize,
    /// Maximum sequence length `N`, prompt included.
    #[serde(rename = "N")]
    pub max_len: usize,
    #[serde(rename = "K")]
    pub top_k: usize,
    #[serde(rename = "tau")]
    pub temperature: f64,
    #[serde(rename = "G")]
    pub group_size: usize,
    #[serde(rename = "delta")]
    pub prob_threshold: f64,
    #[serde(rename = "d")]
    pub embed_threshold: f64,
    pub cluster: ClusterMode,
    #[serde(rename = "k_amp")]
    pub amplify: f64,
    #[serde(rename = "eps")]
    pub addition: f64,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn new(method: Method, vocab: usize) -> Self {
        Self {
            method,
            draft_len: 16,
            max_len: 256,
            top_k: default_top_k(vocab),
            temperature: 1.0,
            group_size: 1,
            prob_threshold: 0.15,
            embed_threshold: 1.0,
            cluster: ClusterMode::P,
            amplify: 2.0,
            addition: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.draft_len == 0 {
            return bad("L must be at least 1".into());
        }
        if self.max_len == 0 {
            return bad("N must be at least 1".into());
        }
        if self.top_k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.group_size == 0 {
            return bad("G must be at least 1".into());
        }
        if !(self.prob_threshold >= 0.0) || !(self.embed_threshold >= 0.0) {
            return bad("delta and d must be non-negative".into());
        }
        match self.method {
            Method::Amplify => {
                LossyCriterion::Amplify(self.amplify).validate()?;
            }
            Method::Addition => {
                LossyCriterion::Addition(self.addition).validate()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Method label that carries the lossy parameter, e.g. `amplify(k=2)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Amplify => format!("amplify(k={})", self.amplify),
            Method::Addition => format!("addition(eps={})", self.addition),
            m => m.name().to_string(),
        }
    }

    fn to_pmf(&self, logits: &Logits) -> Result<Pmf> {
        pmf_from_logits(logits, self.top_k, self.temperature)
    }
}

/// Top-K default scaled to the vocabulary: one eighth of it, at least 2.
pub fn default_top_k(vocab: usize) -> usize {
    (vocab / 8).max(2).min(vocab.max(1))
}

/// Per acceptance test: how the two pmfs compared at that position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDiagnostics {
    /// Index in the sequence of the token being decided.
    pub position: usize,
    pub top1_p: f64,
    pub top1_q: f64,
    pub tv: f64,
    pub sd_accept_prob: f64,
    pub gsd_accept_prob: f64,
    /// TV between the law of the emitted token and `p` (zero for exact rules).
    pub emission_tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Prompt followed by the generated tokens.
    pub sequence: Vec<TokenId>,
    pub prompt_len: usize,
    pub nfe_target: usize,
    pub nfe_draft: usize,
    pub outer_iterations: usize,
    /// Draft tokens put through an acceptance test.
    pub drafts_tested: usize,
    /// Accepted drafts, one entry per outer iteration.
    pub per_iteration_accept_counts: Vec<usize>,
    pub corrections: usize,
    /// Tokens sampled straight from a target pmf (bonus tokens, and every token
    /// of vanilla decoding).
    pub bonuses: usize,
    /// Sum over generated tokens of the per-token emission TV.
    pub emission_tv_total: f64,
    pub per_position: Vec<PositionDiagnostics>,
}

impl DecodeTrace {
    fn start(prompt: &[TokenId], max_len: usize) -> Self {
        let mut sequence = Vec::with_capacity(max_len.max(prompt.len()));
        sequence.extend_from_slice(prompt);
        Self {
            sequence,
            prompt_len: prompt.len(),
            nfe_target: 0,
            nfe_draft: 0,
            outer_iterations: 0,
            drafts_tested: 0,
            per_iteration_accept_counts: Vec::new(),
            corrections: 0,
            bonuses: 0,
            emission_tv_total: 0.0,
            per_position: Vec::new(),
        }
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.sequence[self.prompt_len..]
    }

    pub fn accepted(&self) -> usize {
        self.per_iteration_accept_counts.iter().sum()
    }

    /// Accepted over tested drafts; 0 when nothing was tested.
    pub fn accept_rate(&self) -> f64 {
        if self.drafts_tested == 0 {
            0.0
        } else {
            self.accepted() as f64 / self.drafts_tested as f64
        }
    }

    /// Per generated token emission TV; 0 for an empty generation.
    pub fn mean_emission_tv(&self) -> f64 {
        let n = self.generated().len();
        if n == 0 {
            0.0
        } else {
            self.emission_tv_total / n as f64
        }
    }

    fn commit(&mut self, outcome: &VerifyOutcome) {
        self.sequence.extend_from_slice(&outcome.tokens);
        self.drafts_tested += outcome.decisions.len();
        self.per_iteration_accept_counts.push(outcome.accepted);
        match outcome.tail {
            Tail::Correction(_) => self.corrections += 1,
            Tail::Bonus(_) => self.bonuses += 1,
            Tail::None => {}
        }
    }
}

/// Models and clustering inputs for one decode.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub target: &'a dyn TokenModel,
    pub draft: Option<&'a dyn TokenModel>,
    pub strategy: Option<&'a ClusterStrategy>,
    pub dist: Option<&'a DistanceMatrix>,
}

impl<'a> Models<'a> {
    pub fn target_only(target: &'a dyn TokenModel) -> Self {
        Self {
            target,
            draft: None,
            strategy: None,
            dist: None,
        }
    }
}

/// Runs the method named in `config`.
pub fn decode(models: Models<'_>, config: &DecodeConfig, prompt: &[TokenId]) -> Result<DecodeTrace> {
    match config.method {
        Method::Vanilla => decode_vanilla(models.target, config, prompt),
        Method::Jacobi => decode_jacobi(models.target, config, prompt),
        Method::Sjd => decode_sjd(models.target, config, prompt),
        Method::Sd => {
            let draft = models
                .draft
                .ok_or_else(|| Error::InvalidConfig("speculative decoding needs a draft model".into()))?;
            decode_sd(models.target, draft, config, prompt)
        }
        Method::Gsd => {
            let strategy = models
                .strategy
                .ok_or_else(|| Error::InvalidConfig("grouped decoding needs a cluster strategy".into()))?;
            decode_gsd(models.target, config, strategy, models.dist, prompt)
        }
        Method::Amplify => decode_lossy(models.target, config, LossyCriterion::Amplify(config.amplify), prompt),
        Method::Addition => decode_lossy(models.target, config, LossyCriterion::Addition(config.addition), prompt),
    }
}

fn check_inputs(vocab: usize, config: &DecodeConfig, prompt: &[TokenId]) -> Result<()> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must hold at least one token".into()));
    }
    if let Some(t) = prompt.iter().find(|t| t.index() >= vocab) {
        return Err(Error::InvalidConfig(format!("prompt token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn diagnose(
    position: usize,
    p: &Pmf,
    q: &Pmf,
    draft: TokenId,
    criterion: &Criterion,
    grouped: Option<&Criterion>,
) -> Result<PositionDiagnostics> {
    let sd_accept_prob = Criterion::Exact.accept_prob(p, q, draft);
    let gsd_accept_prob = grouped.map_or(sd_accept_prob, |g| g.accept_prob(p, q, draft));
    let law = emission_law_from_profile(p, q, &criterion.accept_profile(p, q))?;
    let emission_tv = 0.5 * law.iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(PositionDiagnostics {
        position,
        top1_p: p.top1(),
        top1_q: q.top1(),
        tv: tv_distance(p, q)?,
        sd_accept_prob,
        gsd_accept_prob,
        emission_tv,
    })
}

fn record_decisions(
    trace: &mut DecodeTrace,
    outcome: &VerifyOutcome,
    drafts: &[TokenId],
    ps: &[Pmf],
    qs: &[Pmf],
    criterion: &Criterion,
    grouped: Option<&Criterion>,
) -> Result<()> {
    let base = trace.sequence.len();
    for k in 0..outcome.decisions.len() {
        let d = diagnose(base + k, &ps[k], &qs[k], drafts[k], criterion, grouped)?;
        trace.emission_tv_total += d.emission_tv;
        trace.per_position.push(d);
    }
    Ok(())
}

/// `p_list` handed to the verifier: one extra row (for a bonus) only when the
/// sequence has room for a token beyond the `m` verified drafts.
fn verifier_rows(ps: &[Pmf], m: usize, remaining: usize) -> &[Pmf] {
    if m < remaining {
        &ps[..=m]
    } else {
        &ps[..m]
    }
}

pub fn decode_vanilla(model: &dyn TokenModel, config: &DecodeConfig, prompt: &[TokenId]) -> Result<DecodeTrace> {
    check_inputs(model.vocab_size(), config, prompt)?;
    let mut rng = RngStream::new(config.seed);
    let mut trace = DecodeTrace::start(prompt, config.max_len);
    while trace.sequence.len() < config.max_len {
        let rows = model.forward(&trace.sequence, &[]);
        trace.nfe_target += 1;
        trace.outer_iterations += 1;
        let p = config.to_pmf(&rows[0])?;
        trace.sequence.push(p.sample(&mut rng));
        trace.per_iteration_accept_counts.push(0);
        trace.bonuses += 1;
    }
    Ok(trace)
}

/// Two-model speculative decoding.
pub fn decode_sd(
    target: &dyn TokenModel,
    draft: &dyn TokenModel,
    config: &DecodeConfig,
    prompt: &[TokenId],
) -> Result<DecodeTrace> {
    decode_sd_with_diagnostics(target, draft, config, prompt, None)
}

/// [`decode_sd`] that also reports the grouped acceptance probability a given
/// strategy would have assigned at every tested position. The decoded tokens do
/// not depend on `grouped`.
pub fn decode_sd_with_diagnostics(
    target: &dyn TokenModel,
    draft: &dyn TokenModel,
    config: &DecodeConfig,
    prompt: &[TokenId],
    grouped: Option<(&ClusterStrategy, Option<&DistanceMatrix>)>,
) -> Result<DecodeTrace> {
    let v = target.vocab_size();
    if draft.vocab_size() != v {
        return Err(Error::VocabMismatch {
            target: v,
            draft: draft.vocab_size(),
        });
    }
    check_inputs(v, config, prompt)?;
    let grouped = grouped.map(|(strategy, dist)| Criterion::Grouped { strategy, dist });
    let l = config.draft_len;
    let mut rng = RngStream::new(config.seed);
    let mut trace = DecodeTrace::start(prompt, config.max_len);
    let mut drafts = Vec::with_capacity(l);
    let mut qs = Vec::with_capacity(l);

    while trace.sequence.len() < config.max_len {
        let remaining = config.max_len - trace.sequence.len();
        let m = l.min(remaining);
        drafts.clear();
        qs.clear();
        for _ in 0..l {
            let rows = draft.forward(&trace.sequence, &drafts);
            let q = config.to_pmf(rows.last().expect("forward returns at least one row"))?;
            drafts.push(q.sample(&mut rng));
            qs.push(q);
        }
        trace.nfe_draft += l;

        let rows = target.forward(&trace.sequence, &drafts[..m]);
        trace.nfe_target += 1;
        trace.outer_iterations += 1;
        let ps = rows.iter().map(|r| config.to_pmf(r)).collect::<Result<Vec<_>>>()?;

        let outcome = verify(&drafts[..m], verifier_rows(&ps, m, remaining), &qs[..m], &Criterion::Exact, &mut rng)?;
        record_decisions(&mut trace, &outcome, &drafts, &ps, &qs, &Criterion::Exact, grouped.as_ref())?;
        trace.commit(&outcome);
    }
    Ok(trace)
}

pub fn decode_sjd(target: &dyn TokenModel, config: &DecodeConfig, prompt: &[TokenId]) -> Result<DecodeTrace> {
    self_speculative(target, config, prompt, Criterion::Exact)
}

pub fn decode_gsd(
    target: &dyn TokenModel,
    config: &DecodeConfig,
    strategy: &ClusterStrategy,
    dist: Option<&DistanceMatrix>,
    prompt: &[TokenId],
) -> Result<DecodeTrace> {
    self_speculative(target, config, prompt, Criterion::Grouped { strategy, dist })
}

pub fn decode_lossy(
    target: &dyn TokenModel,
    config: &DecodeConfig,
    criterion: LossyCriterion,
    prompt: &[TokenId],
) -> Result<DecodeTrace> {
    self_speculative(target, config, prompt, Criterion::Lossy(criterion.validate()?))
}

/// Shared SJD loop. The draft buffer holds `L` tokens with the pmfs they were
/// drawn from. After each pass the target pmfs past the committed tokens become
/// the next draft pmfs and their tokens are redrawn from them; the remaining
/// slots get uniform tokens under a uniform pmf.
fn self_speculative(
    target: &dyn TokenModel,
    config: &DecodeConfig,
    prompt: &[TokenId],
    criterion: Criterion,
) -> Result<DecodeTrace> {
    let v = target.vocab_size();
    check_inputs(v, config, prompt)?;
    let l = config.draft_len;
    let grouped = matches!(criterion, Criterion::Grouped { .. }).then_some(criterion);
    let uniform = Pmf::uniform(v);
    let mut rng = RngStream::new(config.seed);
    let mut trace = DecodeTrace::start(prompt, config.max_len);
    let mut tokens: Vec<TokenId> = Vec::with_capacity(l);
    let mut qs: Vec<Pmf> = Vec::with_capacity(l);
    refill(&mut tokens, &mut qs, l, &uniform, &mut rng);

    while trace.sequence.len() < config.max_len {
        let remaining = config.max_len - trace.sequence.len();
        let m = l.min(remaining);
        let rows = target.forward(&trace.sequence, &tokens);
        trace.nfe_target += 1;
        trace.outer_iterations += 1;
        let ps = rows.iter().map(|r| config.to_pmf(r)).collect::<Result<Vec<_>>>()?;

        let outcome = verify(&tokens[..m], verifier_rows(&ps, m, remaining), &qs[..m], &criterion, &mut rng)?;
        record_decisions(&mut trace, &outcome, &tokens, &ps, &qs, &criterion, grouped.as_ref())?;
        trace.commit(&outcome);

        let committed = outcome.tokens.len();
        tokens.clear();
        qs.clear();
        for p in ps.into_iter().skip(committed) {
            tokens.push(p.sample(&mut rng));
            qs.push(p);
        }
        refill(&mut tokens, &mut qs, l, &uniform, &mut rng);
    }
    Ok(trace)
}

fn refill(tokens: &mut Vec<TokenId>, qs: &mut Vec<Pmf>, l: usize, uniform: &Pmf, rng: &mut RngStream) {
    while tokens.len() < l {
        tokens.push(TokenId::new(rng.below(uniform.len())));
        qs.push(uniform.clone());
    }
}

/// Greedy Jacobi iteration. Every candidate is replaced by the argmax of its row;
/// the unchanged prefix plus the first updated token (whose context is fully
/// known) is committed. Fresh slots copy the last known token.
pub fn decode_jacobi(target: &dyn TokenModel, config: &DecodeConfig, prompt: &[TokenId]) -> Result<DecodeTrace> {
    check_inputs(target.vocab_size(), config, prompt)?;
    let l = config.draft_len;
    let mut trace = DecodeTrace::start(prompt, config.max_len);
    let last = *prompt.last().expect("prompt checked non-empty");
    let mut cands = vec![last; l];

    while trace.sequence.len() < config.max_len {
        let remaining = config.max_len - trace.sequence.len();
        let rows = target.forward(&trace.sequence, &cands);
        trace.nfe_target += 1;
        trace.outer_iterations += 1;
        let ps = rows.iter().map(|r| config.to_pmf(r)).collect::<Result<Vec<_>>>()?;
        let updated: Vec<TokenId> = ps.iter().map(Pmf::argmax).collect();
        let unchanged = (0..l).find(|&j| updated[j] != cands[j]).unwrap_or(l);
        let committed = (unchanged + 1).min(remaining);
        let tested = committed.min(l);

        let base = trace.sequence.len();
        for j in 0..committed {
            let emission_tv = 1.0 - ps[j].prob(updated[j]);
            trace.emission_tv_total += emission_tv;
            if j < tested {
                let q = Pmf::point(ps[j].len(), cands[j]);
                let sd = Criterion::Exact.accept_prob(&ps[j], &q, cands[j]);
                trace.per_position.push(PositionDiagnostics {
                    position: base + j,
                    top1_p: ps[j].top1(),
                    top1_q: 1.0,
                    tv: tv_distance(&ps[j], &q)?,
                    sd_accept_prob: sd,
                    gsd_accept_prob: sd,
                    emission_tv,
                });
            }
        }
        trace.sequence.extend_from_slice(&updated[..committed]);
        trace.drafts_tested += tested;
        trace.per_iteration_accept_counts.push(unchanged.min(committed));
        if committed > unchanged {
            if unchanged < l {
                trace.corrections += 1;
            } else {
                trace.bonuses += 1;
            }
        }

        cands.clear();
        cands.extend_from_slice(&updated[(unchanged + 1).min(l + 1)..]);
        let fill = *trace.sequence.last().expect("sequence is non-empty");
        let fill = cands.last().copied().unwrap_or(fill);
        cands.resize(l, fill);
    }
    Ok(trace)
}
