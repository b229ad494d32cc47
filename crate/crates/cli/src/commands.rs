use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use gsd_core::engine::{ClusterMode, DecodeConfig, Method, Models, PositionDiagnostics};
use gsd_core::harness::{
    check_proposition1, check_theorem1, diagnose_positions, measure_accept_uplift, run_sweep,
    test_sequence_exactness, SweepCell,
};
use gsd_core::model::TokenModel;
use serde::Serialize;
use serde_json::json;

use crate::output::OutputDir;
use crate::settings::{ConfigFile, DecodeArgs, DraftArgs, ModelArgs, DEFAULT_SIGMA};

/// Tolerance for the exact identities checked by `theorem-check`.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

pub enum Outcome {
    Passed,
    Failed(String),
}

pub struct Context {
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub args: Vec<String>,
}

impl Context {
    fn file(&self) -> Result<ConfigFile> {
        ConfigFile::load(self.config.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct DecodeCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    draft: DraftArgs,
    #[command(flatten)]
    decode: DecodeArgs,
}

impl DecodeCmd {
    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        let file = ctx.file()?;
        let spec = self.model.resolve(&file);
        let lab = spec.build()?;
        let cfg = self.decode.config(&file, lab.vocab(), Method::Gsd)?;
        let prompt = self.decode.prompt(&file, lab.vocab())?;
        let draft = if cfg.method.needs_draft_model() {
            Some(self.draft.resolve(&file, &lab)?)
        } else {
            None
        };
        let trace = lab.decode(&cfg, draft, &prompt)?;

        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_json("trace.json", &trace)?;
        out.write_csv("diagnostics.csv", &trace.per_position)?;
        println!(
            "{}: generated {} tokens, nfe_target {}, nfe_draft {}, accept rate {:.4}, mean emission TV {:.4}",
            cfg.label(),
            trace.generated().len(),
            trace.nfe_target,
            trace.nfe_draft,
            trace.accept_rate(),
            trace.mean_emission_tv()
        );
        let config = json!({ "model": spec, "decode": cfg, "draft": draft.map(|(s, seed)| json!({"sigma": s, "seed": seed})) });
        out.finish("decode", &ctx.args, config, vec![cfg.seed], start.elapsed(), vec![])?;
        Ok(Outcome::Passed)
    }
}

#[derive(Debug, Args)]
pub struct ExactnessCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    draft: DraftArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Generated length; `V^len` may not exceed 4096.
    #[arg(long, default_value_t = 3)]
    len: usize,
    /// Monte Carlo trials.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
}

impl ExactnessCmd {
    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        let file = ctx.file()?;
        let spec = self.model.resolve(&file);
        let lab = spec.build()?;
        let prompt = self.decode.prompt(&file, lab.vocab())?;
        let mut cfg = self.decode.config(&file, lab.vocab(), Method::Sjd)?;
        cfg.max_len = prompt.len() + self.len;
        let draft_params = self.draft.resolve(&file, &lab)?;
        let draft = lab.draft(draft_params.0, draft_params.1)?;
        let strategy = lab.strategy(&cfg)?;
        let models = Models {
            target: &lab.target,
            draft: Some(draft.as_ref() as &dyn TokenModel),
            strategy: Some(&strategy),
            dist: Some(&lab.dist),
        };
        let report = test_sequence_exactness(models, &cfg, &prompt, self.trials, cfg.seed)?;

        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_json("exactness.json", &report)?;
        println!(
            "{} V={} len={} trials={}: TV {:.5} (threshold {:.5}, noise floor {:.5}) {}",
            report.method,
            report.vocab,
            report.length,
            report.trials,
            report.tv_empirical,
            report.threshold,
            report.noise_floor,
            if report.passed { "PASS" } else { "FAIL" }
        );
        let config = json!({ "model": spec, "decode": cfg, "len": self.len, "trials": self.trials,
            "draft": {"sigma": draft_params.0, "seed": draft_params.1} });
        out.finish("verify-exactness", &ctx.args, config, vec![cfg.seed], start.elapsed(), vec![])?;
        Ok(if report.passed {
            Outcome::Passed
        } else {
            Outcome::Failed(format!(
                "sequence TV {:.5} above threshold {:.5}",
                report.tv_empirical, report.threshold
            ))
        })
    }
}

#[derive(Debug, Args)]
pub struct TheoremCmd {
    /// Random instances per check.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Vocabulary size of the random pmfs.
    #[arg(long = "V", default_value_t = 128)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct TheoremReport {
    trials: usize,
    #[serde(rename = "V")]
    vocab: usize,
    seed: u64,
    tolerance: f64,
    identity_max_error: f64,
    max_violation: f64,
    passed: bool,
}

impl TheoremCmd {
    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        if self.trials == 0 || self.vocab == 0 {
            bail!("--trials and --V must be at least 1");
        }
        let prop = check_proposition1(self.trials, self.vocab, self.seed)?;
        let viol = check_theorem1(self.trials, self.vocab, self.seed)?;
        let report = TheoremReport {
            trials: self.trials,
            vocab: self.vocab,
            seed: self.seed,
            tolerance: IDENTITY_TOLERANCE,
            identity_max_error: prop,
            max_violation: viol,
            passed: prop <= IDENTITY_TOLERANCE && viol <= IDENTITY_TOLERANCE,
        };
        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_json("theorem_check.json", &report)?;
        println!(
            "acceptance identity max error {prop:.3e}; grouping TV max violation {viol:.3e}: {}",
            if report.passed { "PASS" } else { "FAIL" }
        );
        let config = json!({ "trials": self.trials, "V": self.vocab });
        out.finish("theorem-check", &ctx.args, config, vec![self.seed], start.elapsed(), vec![])?;
        Ok(if report.passed {
            Outcome::Passed
        } else {
            Outcome::Failed("identity check exceeded tolerance".into())
        })
    }
}

/// Parses `0..99` (inclusive), `0..=99`, `3,5,8` or mixtures such as `0..3,9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let b = b.strip_prefix('=').unwrap_or(b);
            let (a, b): (u64, u64) = (
                a.trim().parse().with_context(|| format!("bad seed range `{part}`"))?,
                b.trim().parse().with_context(|| format!("bad seed range `{part}`"))?,
            );
            if a > b {
                bail!("empty seed range `{part}`");
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: gsd_core::Error| e.to_string())
}

fn parse_cluster(s: &str) -> Result<ClusterMode, String> {
    s.parse().map_err(|e: gsd_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Methods to run, comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "sjd,gsd")]
    methods: Vec<Method>,
    /// Group sizes for gsd.
    #[arg(long = "G", value_delimiter = ',')]
    group_sizes: Vec<usize>,
    /// Probability-gap thresholds for gsd with the p-filtered cluster mode.
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    /// Embedding-distance thresholds for gsd with the p-filtered cluster mode.
    #[arg(long, value_delimiter = ',')]
    d: Vec<f64>,
    /// Draft noise scales for sd.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Amplify factors.
    #[arg(long, value_delimiter = ',')]
    k_amp: Vec<f64>,
    /// Addition offsets.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Seeds, e.g. `0..99` (inclusive) or `1,2,5`.
    #[arg(long, default_value = "0..9")]
    seeds: String,
    #[arg(long, value_parser = parse_cluster)]
    cluster: Option<ClusterMode>,
    #[arg(long = "L")]
    draft_len: Option<usize>,
    #[arg(long = "N")]
    max_len: Option<usize>,
    #[arg(long = "K")]
    top_k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<u32>>,
}

fn or_file<T: Copy>(list: &[T], file: Option<T>, default: T) -> Vec<T> {
    if !list.is_empty() {
        list.to_vec()
    } else {
        vec![file.unwrap_or(default)]
    }
}

impl SweepCmd {
    fn grid(&self, file: &ConfigFile, vocab: usize) -> Vec<SweepCell> {
        let base = DecodeConfig {
            cluster: self.cluster.or(file.cluster).unwrap_or(ClusterMode::P),
            draft_len: self.draft_len.or(file.draft_len).unwrap_or(16),
            max_len: self.max_len.or(file.max_len).unwrap_or(256),
            top_k: self.top_k.or(file.top_k).unwrap_or(gsd_core::engine::default_top_k(vocab)),
            temperature: self.tau.or(file.tau).unwrap_or(1.0),
            ..DecodeConfig::new(Method::Sjd, vocab)
        };
        let defaults = DecodeConfig::new(Method::Sjd, vocab);
        let gs = or_file(&self.group_sizes, file.group_size, 1);
        let deltas = or_file(&self.delta, file.delta, defaults.prob_threshold);
        let ds = or_file(&self.d, file.d, defaults.embed_threshold);
        let sigmas = or_file(&self.sigma, file.sigma, DEFAULT_SIGMA);
        let ks = or_file(&self.k_amp, file.k_amp, defaults.amplify);
        let eps = or_file(&self.eps, file.eps, defaults.addition);

        let cell = |method: Method, sigma: f64| SweepCell {
            config: DecodeConfig {
                method,
                ..base.clone()
            },
            sigma,
        };
        let mut cells = Vec::new();
        for &method in &self.methods {
            match method {
                Method::Gsd => {
                    let filtered = base.cluster == ClusterMode::PFiltered;
                    for &g in &gs {
                        if filtered {
                            for &delta in &deltas {
                                for &d in &ds {
                                    let mut c = cell(method, DEFAULT_SIGMA);
                                    c.config.group_size = g;
                                    c.config.prob_threshold = delta;
                                    c.config.embed_threshold = d;
                                    cells.push(c);
                                }
                            }
                        } else {
                            let mut c = cell(method, DEFAULT_SIGMA);
                            c.config.group_size = g;
                            cells.push(c);
                        }
                    }
                }
                Method::Sd => cells.extend(sigmas.iter().map(|&s| cell(method, s))),
                Method::Amplify => cells.extend(ks.iter().map(|&k| {
                    let mut c = cell(method, DEFAULT_SIGMA);
                    c.config.amplify = k;
                    c
                })),
                Method::Addition => cells.extend(eps.iter().map(|&e| {
                    let mut c = cell(method, DEFAULT_SIGMA);
                    c.config.addition = e;
                    c
                })),
                _ => cells.push(cell(method, DEFAULT_SIGMA)),
            }
        }
        cells
    }

    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        let file = ctx.file()?;
        let spec = self.model.resolve(&file);
        let lab = spec.build()?;
        let seeds = parse_seeds(&self.seeds)?;
        let ids = self.prompt.clone().or_else(|| file.prompt.clone()).unwrap_or_else(|| vec![0]);
        if ids.is_empty() || ids.iter().any(|&t| t as usize >= lab.vocab()) {
            bail!("prompt must be non-empty and inside the vocabulary");
        }
        let prompt: Vec<_> = ids.into_iter().map(gsd_core::TokenId).collect();
        let cells = self.grid(&file, lab.vocab());
        let result = run_sweep(&lab, &cells, &seeds, &prompt)?;

        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_csv("sweep.csv", &result.rows)?;
        out.write_csv("sweep_runs.csv", &result.runs)?;
        for row in &result.rows {
            println!(
                "{:<22} G={:<4} nfe {:>9.3}  accept {:.4}  tv {:.5}",
                row.method,
                row.group_size.map_or("-".to_string(), |g| g.to_string()),
                row.mean_nfe,
                row.mean_accept_rate,
                row.mean_tv
            );
        }
        let notes: Vec<String> = result
            .errors
            .iter()
            .map(|e| format!("cell {} ({}): {}", e.cell, e.method, e.message))
            .collect();
        for n in &notes {
            eprintln!("skipped {n}");
        }
        let config = json!({ "model": spec, "cells": cells });
        out.finish("sweep", &ctx.args, config, seeds, start.elapsed(), notes.clone())?;
        Ok(if notes.is_empty() {
            Outcome::Passed
        } else {
            Outcome::Failed(format!("{} grid cell(s) were invalid", notes.len()))
        })
    }
}

#[derive(Debug, Args)]
pub struct DiagnoseCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    draft: DraftArgs,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Serialize)]
struct DiagnoseSummary {
    positions: usize,
    mean_top1_p: f64,
    mean_top1_q: f64,
    mean_tv: f64,
    mean_sd_accept: f64,
    mean_gsd_accept: f64,
    mean_uplift: f64,
    min_uplift: f64,
}

fn mean(rows: &[PositionDiagnostics], f: impl Fn(&PositionDiagnostics) -> f64) -> f64 {
    if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    }
}

impl DiagnoseCmd {
    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        let file = ctx.file()?;
        let spec = self.model.resolve(&file);
        let lab = spec.build()?;
        let mut cfg = self.decode.config(&file, lab.vocab(), Method::Sd)?;
        if cfg.method != Method::Sd {
            bail!("diagnose runs speculative decoding with the draft model; drop --method or pass --method sd");
        }
        if self.decode.group_size.is_none() && file.group_size.is_none() {
            cfg.group_size = 8;
        }
        let prompt = self.decode.prompt(&file, lab.vocab())?;
        let (sigma, draft_seed) = self.draft.resolve(&file, &lab)?;
        let draft = lab.draft(sigma, draft_seed)?;
        let strategy = lab.strategy(&cfg)?;
        let rows = diagnose_positions(&lab.target, draft.as_ref(), &cfg, &strategy, Some(&lab.dist), &prompt)?;
        let trace = lab.decode(&cfg, Some((sigma, draft_seed)), &prompt)?;
        let uplift = measure_accept_uplift(
            &lab.target,
            draft.as_ref(),
            &cfg,
            &strategy,
            Some(&lab.dist),
            &trace.sequence,
            trace.prompt_len,
        )?;
        let summary = DiagnoseSummary {
            positions: rows.len(),
            mean_top1_p: mean(&rows, |r| r.top1_p),
            mean_top1_q: mean(&rows, |r| r.top1_q),
            mean_tv: mean(&rows, |r| r.tv),
            mean_sd_accept: mean(&rows, |r| r.sd_accept_prob),
            mean_gsd_accept: mean(&rows, |r| r.gsd_accept_prob),
            mean_uplift: uplift.mean,
            min_uplift: uplift.min,
        };
        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_csv("diagnose.csv", &rows)?;
        out.write_json("diagnose_summary.json", &summary)?;
        println!(
            "{} positions: top1_p {:.4}, top1_q {:.4}, TV {:.4}, sd accept {:.4}, grouped accept {:.4}, uplift {:.4}",
            summary.positions,
            summary.mean_top1_p,
            summary.mean_top1_q,
            summary.mean_tv,
            summary.mean_sd_accept,
            summary.mean_gsd_accept,
            summary.mean_uplift
        );
        let config = json!({ "model": spec, "decode": cfg, "draft": {"sigma": sigma, "seed": draft_seed} });
        out.finish("diagnose", &ctx.args, config, vec![cfg.seed], start.elapsed(), vec![])?;
        Ok(Outcome::Passed)
    }
}

#[derive(Debug, Args)]
pub struct GenModelCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "model.json")]
    name: String,
}

impl GenModelCmd {
    pub fn run(self, ctx: &Context) -> Result<Outcome> {
        let start = Instant::now();
        let file = ctx.file()?;
        let spec = self.model.resolve(&file);
        if spec.model.is_some() {
            bail!("gen-model generates a model; --model is not accepted here");
        }
        if self.name.contains(['/', '\\']) {
            bail!("--name must be a plain file name");
        }
        let lab = spec.build()?;
        let mut out = OutputDir::create(&ctx.out_dir)?;
        out.write_json(&self.name, &lab.to_file())?;
        println!("wrote {} (V={}, D={})", out.path(&self.name).display(), lab.vocab(), lab.embeddings.dim());
        out.finish("gen-model", &ctx.args, json!({ "model": spec }), vec![spec.model_seed], start.elapsed(), vec![])?;
        Ok(Outcome::Passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("0..=2,7").unwrap(), vec![0, 1, 2, 7]);
        assert_eq!(parse_seeds("0..99").unwrap().len(), 100);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }
}
