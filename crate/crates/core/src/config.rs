//! Pipeline configuration.
//!
//! A sectioned TOML file; every key is optional and unknown keys are
//! rejected. Mock switches left unset resolve to `true` when no API key is
//! present in the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ranker::{Ablation, CandidateStrategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw review and metadata records.
    pub input: PathBuf,
    /// Directory for every produced artifact.
    pub workdir: PathBuf,
    pub cache: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    /// Candidate slates for the `file` strategy.
    pub slates: Option<PathBuf>,
    /// Recorded log-probability responses to score with instead of a server.
    pub replay: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            input: PathBuf::from("data/reviews.jsonl"),
            workdir: PathBuf::from("artifacts"),
            cache: None,
            adapter: None,
            index: None,
            reports: None,
            slates: None,
            replay: None,
        }
    }
}

impl PathsConfig {
    pub fn corpus(&self) -> PathBuf {
        self.workdir.join("corpus.jsonl")
    }

    pub fn features(&self) -> PathBuf {
        self.workdir.join("features.jsonl")
    }

    pub fn trainset(&self) -> PathBuf {
        self.workdir.join("trainset.jsonl")
    }

    pub fn train_trace(&self) -> PathBuf {
        self.workdir.join("train_trace.jsonl")
    }

    pub fn cache(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.workdir.join("extraction_cache.jsonl"))
    }

    pub fn adapter(&self) -> PathBuf {
        self.adapter.clone().unwrap_or_else(|| self.workdir.join("adapter.bin"))
    }

    pub fn index(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.workdir.join("index.bin"))
    }

    pub fn reports(&self) -> PathBuf {
        self.reports.clone().unwrap_or_else(|| self.workdir.join("reports"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub completion_model: String,
    /// Dimension of the embedding service (or of the mock embedder).
    pub embedding_dim: usize,
    pub concurrency: usize,
    pub max_retries: u32,
    /// 0 disables rate limiting.
    pub requests_per_second: f64,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            base_url: "http://localhost:8000/v1".into(),
            chat_model: "qwen2.5-72b-instruct".into(),
            embedding_model: "text-embedding-3-small".into(),
            completion_model: "qwen2.5-7b-instruct".into(),
            embedding_dim: 384,
            concurrency: 4,
            max_retries: 3,
            requests_per_second: 0.0,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kcore: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { kcore: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefragConfig {
    pub window: usize,
    pub negatives: usize,
    pub stride: usize,
    pub pad_negatives: bool,
    pub tau: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub step_size: f64,
    pub init_noise: f64,
    /// Projection output dimension; defaults to the embedding dimension.
    pub out_dim: Option<usize>,
    pub seed: u64,
}

impl Default for PrefragConfig {
    fn default() -> Self {
        PrefragConfig {
            window: 20,
            negatives: 40,
            stride: 1,
            pad_negatives: false,
            tau: 1.0,
            epochs: 5,
            batch_size: 16,
            step_size: 0.05,
            init_noise: 1e-3,
            out_dim: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub top_k: usize,
    pub slate_size: usize,
    pub strategy: CandidateStrategy,
    pub inject: bool,
    pub seed: u64,
    /// Most recent reviews used for rank-time preferences.
    pub preference_reviews: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            top_k: 2,
            slate_size: 20,
            strategy: CandidateStrategy::Popularity,
            inject: true,
            seed: 42,
            preference_reviews: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    pub mock_extraction: Option<bool>,
    pub mock_embedding: Option<bool>,
    pub mock_scoring: Option<bool>,
    pub ablation: Ablation,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            mock_extraction: None,
            mock_embedding: None,
            mock_scoring: None,
            ablation: Ablation::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Evaluation fails when more users than this fraction are skipped.
    pub max_skipped_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            max_skipped_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub client: ClientConfig,
    pub corpus: CorpusConfig,
    pub prefrag: PrefragConfig,
    pub ranker: RankerConfig,
    pub mode: ModeConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Fill unset mock switches: mock unless an API key is available.
    pub fn resolve_modes(&mut self, api_key_present: bool) {
        for flag in [
            &mut self.mode.mock_extraction,
            &mut self.mode.mock_embedding,
            &mut self.mode.mock_scoring,
        ] {
            flag.get_or_insert(!api_key_present);
        }
    }

    pub fn mock_extraction(&self) -> bool {
        self.mode.mock_extraction.unwrap_or(true)
    }

    pub fn mock_embedding(&self) -> bool {
        self.mode.mock_embedding.unwrap_or(true)
    }

    pub fn mock_scoring(&self) -> bool {
        self.mode.mock_scoring.unwrap_or(true)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.prefrag;
        let r = &self.ranker;
        let c = &self.client;
        let checks: [(bool, &str); 16] = [
            (self.corpus.kcore >= 1, "corpus.kcore must be at least 1"),
            (p.window >= 2, "prefrag.window must be at least 2"),
            (p.negatives >= 1, "prefrag.negatives must be at least 1"),
            (p.stride >= 1, "prefrag.stride must be at least 1"),
            (p.tau > 0.0 && p.tau.is_finite(), "prefrag.tau must be positive"),
            ((1..=5).contains(&p.epochs) || p.epochs == 0, "prefrag.epochs must be in 0..=5"),
            (p.batch_size >= 1, "prefrag.batch_size must be at least 1"),
            (p.step_size > 0.0 && p.step_size.is_finite(), "prefrag.step_size must be positive"),
            (p.init_noise >= 0.0 && p.init_noise.is_finite(), "prefrag.init_noise must be non-negative"),
            (p.out_dim != Some(0), "prefrag.out_dim must be positive"),
            (r.top_k >= 1, "ranker.top_k must be at least 1"),
            ((2..=26).contains(&r.slate_size), "ranker.slate_size must be in 2..=26"),
            (r.preference_reviews >= 1, "ranker.preference_reviews must be at least 1"),
            (c.embedding_dim >= 1 && c.concurrency >= 1 && c.max_retries >= 1, "client.embedding_dim, concurrency and max_retries must be positive"),
            (!self.eval.ks.is_empty() && self.eval.ks.iter().all(|&k| k >= 1), "eval.ks must be nonempty positive integers"),
            ((0.0..=1.0).contains(&self.eval.max_skipped_fraction), "eval.max_skipped_fraction must be in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid(msg.to_string())),
            None => Ok(()),
        }
    }

    /// Stable hash of every field.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&[&serde_json::to_string(self).expect("config serializes")])
    }
}

/// sha256 over length-prefixed parts, hex encoded.
pub fn fingerprint_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}
