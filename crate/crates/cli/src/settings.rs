//! Resolution of run settings: command-line flags override values from the
//! `--config` JSON file, which override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gsd_core::engine::{default_top_k, ClusterMode, DecodeConfig, Method};
use gsd_core::harness::{Lab, DEFAULT_DIM};
use gsd_core::toy::ModelFile;
use gsd_core::TokenId;
use serde::{Deserialize, Serialize};

pub const DEFAULT_VOCAB: usize = 256;
pub const DEFAULT_MIX: f64 = 1.0;
pub const DEFAULT_SIGMA: f64 = 0.5;

/// Every field of the `--config` file. All are optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub method: Option<Method>,
    #[serde(rename = "L")]
    pub draft_len: Option<usize>,
    #[serde(rename = "N")]
    pub max_len: Option<usize>,
    #[serde(rename = "K")]
    pub top_k: Option<usize>,
    pub tau: Option<f64>,
    #[serde(rename = "G")]
    pub group_size: Option<usize>,
    pub delta: Option<f64>,
    pub d: Option<f64>,
    pub cluster: Option<ClusterMode>,
    pub k_amp: Option<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    #[serde(rename = "V")]
    pub vocab: Option<usize>,
    pub mix: Option<f64>,
    #[serde(rename = "D")]
    pub dim: Option<usize>,
    pub model_seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub draft_seed: Option<u64>,
    pub prompt: Option<Vec<u32>>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: gsd_core::Error| e.to_string())
}

fn parse_cluster(s: &str) -> Result<ClusterMode, String> {
    s.parse().map_err(|e: gsd_core::Error| e.to_string())
}

/// Target model: either a saved model file or generator parameters.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model file written by `gen-model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Vocabulary size of a generated model.
    #[arg(long = "V")]
    pub vocab: Option<usize>,
    /// Fraction of high-entropy states in a generated model.
    #[arg(long)]
    pub mix: Option<f64>,
    /// Embedding dimension of a generated model.
    #[arg(long = "D")]
    pub dim: Option<usize>,
    /// Seed of a generated model.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSpec {
    pub model: Option<PathBuf>,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub mix: f64,
    #[serde(rename = "D")]
    pub dim: usize,
    pub model_seed: u64,
}

impl ModelArgs {
    pub fn resolve(&self, file: &ConfigFile) -> ModelSpec {
        ModelSpec {
            model: self.model.clone().or_else(|| file.model.clone()),
            vocab: self.vocab.or(file.vocab).unwrap_or(DEFAULT_VOCAB),
            mix: self.mix.or(file.mix).unwrap_or(DEFAULT_MIX),
            dim: self.dim.or(file.dim).unwrap_or(DEFAULT_DIM),
            model_seed: self.model_seed.or(file.model_seed).unwrap_or(0),
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Lab> {
        match &self.model {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading model file {}", path.display()))?;
                let file: ModelFile =
                    serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))?;
                Ok(Lab::from_file(file)?)
            }
            None => Ok(Lab::generate(self.vocab, self.mix, self.dim, self.model_seed)?),
        }
    }
}

/// Draft model for speculative decoding: the target plus seeded logit noise.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DraftArgs {
    /// Logit noise scale of the draft model.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Noise seed of the draft model (default: model seed + 1).
    #[arg(long)]
    pub draft_seed: Option<u64>,
}

impl DraftArgs {
    pub fn resolve(&self, file: &ConfigFile, lab: &Lab) -> Result<(f64, u64)> {
        let sigma = self.sigma.or(file.sigma).unwrap_or(DEFAULT_SIGMA);
        if !(sigma >= 0.0) {
            bail!("--sigma must be non-negative, got {sigma}");
        }
        Ok((sigma, self.draft_seed.or(file.draft_seed).unwrap_or(lab.seed.wrapping_add(1))))
    }
}

/// Decoding parameters shared by the commands that run a decoder.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DecodeArgs {
    /// vanilla, sd, jacobi, sjd, gsd, amplify or addition.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Draft block length.
    #[arg(long = "L")]
    pub draft_len: Option<usize>,
    /// Maximum sequence length, prompt included.
    #[arg(long = "N")]
    pub max_len: Option<usize>,
    /// Top-K truncation (default: V/8).
    #[arg(long = "K")]
    pub top_k: Option<usize>,
    /// Sampling temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Cluster size for grouped decoding.
    #[arg(long = "G")]
    pub group_size: Option<usize>,
    /// Probability-gap filter of the p-filtered cluster mode.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Embedding-distance filter of the p-filtered cluster mode.
    #[arg(long)]
    pub d: Option<f64>,
    /// embed, q, p or p-filtered.
    #[arg(long, value_parser = parse_cluster)]
    pub cluster: Option<ClusterMode>,
    /// Amplify factor k.
    #[arg(long)]
    pub k_amp: Option<f64>,
    /// Addition offset epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Decoding seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',')]
    pub prompt: Option<Vec<u32>>,
}

impl DecodeArgs {
    pub fn config(&self, file: &ConfigFile, vocab: usize, default_method: Method) -> Result<DecodeConfig> {
        let method = self.method.or(file.method).unwrap_or(default_method);
        let defaults = DecodeConfig::new(method, vocab);
        let cfg = DecodeConfig {
            method,
            draft_len: self.draft_len.or(file.draft_len).unwrap_or(defaults.draft_len),
            max_len: self.max_len.or(file.max_len).unwrap_or(defaults.max_len),
            top_k: self.top_k.or(file.top_k).unwrap_or(default_top_k(vocab)),
            temperature: self.tau.or(file.tau).unwrap_or(defaults.temperature),
            group_size: self.group_size.or(file.group_size).unwrap_or(defaults.group_size),
            prob_threshold: self.delta.or(file.delta).unwrap_or(defaults.prob_threshold),
            embed_threshold: self.d.or(file.d).unwrap_or(defaults.embed_threshold),
            cluster: self.cluster.or(file.cluster).unwrap_or(defaults.cluster),
            amplify: self.k_amp.or(file.k_amp).unwrap_or(defaults.amplify),
            addition: self.eps.or(file.eps).unwrap_or(defaults.addition),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prompt(&self, file: &ConfigFile, vocab: usize) -> Result<Vec<TokenId>> {
        let ids = self.prompt.clone().or_else(|| file.prompt.clone()).unwrap_or_else(|| vec![0]);
        if ids.is_empty() {
            bail!("--prompt needs at least one token");
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            bail!("prompt token {bad} is outside the vocabulary of {vocab}");
        }
        Ok(ids.into_iter().map(TokenId).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_decode_args() -> DecodeArgs {
        DecodeArgs {
            method: None,
            draft_len: None,
            max_len: None,
            top_k: None,
            tau: None,
            group_size: None,
            delta: None,
            d: None,
            cluster: None,
            k_amp: None,
            eps: None,
            seed: None,
            prompt: None,
        }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file: ConfigFile = serde_json::from_str(r#"{"L": 4, "G": 8, "method": "gsd"}"#).unwrap();
        let mut args = empty_decode_args();
        args.group_size = Some(2);
        let cfg = args.config(&file, 256, Method::Vanilla).unwrap();
        assert_eq!(cfg.method, Method::Gsd);
        assert_eq!(cfg.draft_len, 4);
        assert_eq!(cfg.group_size, 2);
        assert_eq!(cfg.top_k, 32);
        assert_eq!(cfg.max_len, 256);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(serde_json::from_str::<ConfigFile>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn prompt_is_checked_against_vocabulary() {
        let mut args = empty_decode_args();
        args.prompt = Some(vec![3, 9]);
        assert!(args.prompt(&ConfigFile::default(), 8).is_err());
        assert_eq!(args.prompt(&ConfigFile::default(), 16).unwrap(), vec![TokenId(3), TokenId(9)]);
    }
}
