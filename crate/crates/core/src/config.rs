//! Run configuration: one TOML file, every field explicit.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::RecommendLimits;
use crate::grpo::GrpoParams;
use crate::indexer::{GlobalMemoryConfig, NegativeSampleConfig, NegativeSampler};
use crate::memory::ChunkParams;
use crate::retriever::RetrievalBackend;
use crate::reward::RewardWeights;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config field {field}: {reason}")]
    Field { field: String, reason: String },
}

impl ConfigError {
    fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Dotted path of the offending field, when known.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { field, .. } => Some(field),
            ConfigError::Read { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    pub queries: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatBackend {
    Scripted,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: ChatBackend,
    /// Directory of per-stage scripts (`index_local.json`, `eval.json`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub chat_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackend {
    Hash,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingBackend,
    pub model: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub backend: RetrievalBackend,
    pub k_mem: usize,
    pub k_items: usize,
    pub k_hints: usize,
    pub max_turns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexingConfig {
    pub per_query_negatives: usize,
    pub sampler: NegativeSampler,
    pub queries_per_scenario: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mpc_mrc: bool,
    pub tau: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub gateway: GatewayConfig,
    pub embedding: EmbeddingConfig,
    pub chunking: ChunkParams,
    pub retrieval: RetrievalConfig,
    pub indexing: IndexingConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    /// Directory of the config file; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Joins `path` and a serde "missing field `x`" message into `path.x`.
fn field_path(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, missing) {
        (".", Some(f)) | ("", Some(f)) => f.to_string(),
        (p, Some(f)) => format!("{p}.{f}"),
        (".", None) | ("", None) => "<root>".to_string(),
        (p, None) => p.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            ConfigError::field(field_path(&path, &message), message)
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and checks that every referenced input path exists.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, &base)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("retrieval.k_mem", self.retrieval.k_mem),
            ("retrieval.k_items", self.retrieval.k_items),
            ("retrieval.k_hints", self.retrieval.k_hints),
            ("retrieval.max_turns", self.retrieval.max_turns),
            (
                "indexing.per_query_negatives",
                self.indexing.per_query_negatives,
            ),
            (
                "indexing.queries_per_scenario",
                self.indexing.queries_per_scenario,
            ),
            ("embedding.dim", self.embedding.dim),
            ("chunking.max_chars", self.chunking.max_chars),
            ("grpo.steps", self.grpo.steps),
            ("gateway.max_tokens", self.gateway.max_tokens as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::field(name, "must be at least 1"));
            }
        }
        if self.chunking.overlap_chars >= self.chunking.max_chars {
            return Err(ConfigError::field(
                "chunking.overlap_chars",
                "must be smaller than max_chars",
            ));
        }
        if self.grpo.group_size < 2 {
            return Err(ConfigError::field("grpo.group_size", "must be at least 2"));
        }
        let finite = [
            ("reward.w_format", self.reward.w_format),
            ("reward.w_rec", self.reward.w_rec),
            ("reward.w_mem", self.reward.w_mem),
            ("grpo.epsilon", self.grpo.epsilon),
            ("grpo.std_epsilon", self.grpo.std_epsilon),
            ("grpo.learning_rate", self.grpo.learning_rate),
            ("gateway.temperature", self.gateway.temperature),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(ConfigError::field(name, "must be finite"));
            }
        }
        if !(self.grpo.epsilon > 0.0 && self.grpo.epsilon < 1.0) {
            return Err(ConfigError::field("grpo.epsilon", "must lie in (0, 1)"));
        }
        match self.gateway.backend {
            ChatBackend::Scripted if self.gateway.script_dir.is_none() => Err(ConfigError::field(
                "gateway.script_dir",
                "required for the scripted backend",
            )),
            ChatBackend::Http if self.gateway.endpoint.is_none() => Err(ConfigError::field(
                "gateway.endpoint",
                "required for the http backend",
            )),
            _ if self.embedding.backend == EmbeddingBackend::Http
                && self.gateway.endpoint.is_none() =>
            {
                Err(ConfigError::field(
                    "gateway.endpoint",
                    "required for http embeddings",
                ))
            }
            _ => Ok(()),
        }
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let mut required = vec![
            ("corpus.interactions", &self.corpus.interactions),
            ("corpus.catalog", &self.corpus.catalog),
            ("corpus.queries", &self.corpus.queries),
        ];
        if let Some(dir) = &self.gateway.script_dir {
            required.push(("gateway.script_dir", dir));
        }
        for (name, p) in required {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(ConfigError::field(
                    name,
                    format!("{} does not exist", full.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn limits(&self) -> RecommendLimits {
        RecommendLimits {
            max_turns: self.retrieval.max_turns,
            k_mem: self.retrieval.k_mem,
            k_items: self.retrieval.k_items,
            k_hints: self.retrieval.k_hints,
        }
    }

    pub fn grpo_params(&self) -> GrpoParams {
        GrpoParams {
            group_size: self.grpo.group_size,
            epsilon: self.grpo.epsilon,
            std_epsilon: self.grpo.std_epsilon,
        }
    }

    pub fn global_memory(&self) -> GlobalMemoryConfig {
        GlobalMemoryConfig {
            negatives: NegativeSampleConfig {
                per_query_negatives: self.indexing.per_query_negatives,
                sampler: self.indexing.sampler,
            },
            queries_per_scenario: self.indexing.queries_per_scenario,
            chunk: self.chunking,
        }
    }
}

/// A complete scripted-backend configuration with every default filled in.
pub const EXAMPLE_CONFIG: &str = r#"seed = 7
out_dir = "out"

[corpus]
interactions = "interactions.jsonl"
catalog = "catalog.jsonl"
queries = "queries.jsonl"

[gateway]
backend = "scripted"
script_dir = "scripts"
chat_model = "qwen2.5-3b-instruct"
temperature = 1.0
max_tokens = 768
timeout_secs = 60
max_retries = 2

[embedding]
backend = "hash"
model = "qwen3-embedding-0.6b"
dim = 64

[chunking]
max_chars = 600
overlap_chars = 80

[retrieval]
backend = "dense"
k_mem = 3
k_items = 1000
k_hints = 3
max_turns = 4

[indexing]
per_query_negatives = 4
sampler = "bm25_similar"
queries_per_scenario = 5

[reward]
w_format = 0.1
w_rec = 5.0
w_mem = 0.1

[grpo]
group_size = 5
epsilon = 0.2
std_epsilon = 1e-8
learning_rate = 0.5
steps = 200

[eval]
mpc_mrc = true
tau = 1
"#;

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn example_parses_with_defaults() {
        let cfg = parse(EXAMPLE_CONFIG).unwrap();
        assert_eq!(cfg.retrieval.k_mem, 3);
        assert_eq!(cfg.retrieval.k_items, 1000);
        assert_eq!(cfg.reward, RewardWeights::default());
        assert_eq!(cfg.grpo_params(), GrpoParams::default());
        assert_eq!(cfg.chunking, ChunkParams::default());
        assert_eq!(cfg.resolve(Path::new("x")), Path::new("/base/x"));
    }

    #[test]
    fn missing_field_named_by_path() {
        let text = EXAMPLE_CONFIG.replace("k_mem = 3\n", "");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.field_path(), Some("retrieval.k_mem"));
        let err = parse(&EXAMPLE_CONFIG.replace("seed = 7\n", "")).unwrap_err();
        assert_eq!(err.field_path(), Some("seed"));
    }

    #[test]
    fn invalid_values() {
        let err = parse(&EXAMPLE_CONFIG.replace("k_items = 1000", "k_items = 0")).unwrap_err();
        assert_eq!(err.field_path(), Some("retrieval.k_items"));
        let err = parse(&EXAMPLE_CONFIG.replace("backend = \"dense\"", "backend = \"faiss\""))
            .unwrap_err();
        assert_eq!(err.field_path(), Some("retrieval.backend"));
        let err = parse(&EXAMPLE_CONFIG.replace("tau = 1", "tau = 1\nextra = 2")).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
        let err = parse(&EXAMPLE_CONFIG.replace("script_dir = \"scripts\"\n", "")).unwrap_err();
        assert_eq!(err.field_path(), Some("gateway.script_dir"));
    }

    #[test]
    fn round_trip() {
        let cfg = parse(EXAMPLE_CONFIG).unwrap();
        let again = parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_toml(), again.to_toml());
    }
}
