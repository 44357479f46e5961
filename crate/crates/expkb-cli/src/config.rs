//! Service and CLI configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::Context;
use expkb::builder::BuildConfig;
use expkb::evolution::EvolutionConfig;
use expkb::pipeline::PipelineConfig;
use expkb::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};

/// Where an external model endpoint lives. `api_key_env` names the
/// environment variable holding the credential; the credential value itself
/// never appears in config files, logs, or serialized state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key_env: Option<String>,
    /// Model name forwarded to the endpoint, when it expects one.
    pub model: Option<String>,
    /// Vector dimension; required for embedding endpoints, ignored otherwise.
    pub dim: Option<usize>,
}

impl EndpointConfig {
    /// Resolves the credential from the environment. `None` when no
    /// credential is configured; an error when the named variable is unset.
    pub fn api_key(&self) -> anyhow::Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .with_context(|| format!("credential variable {name} is not set")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Address the service binds, e.g. "127.0.0.1:8377".
    pub bind: String,
    /// Directory holding the knowledge-base file and prune reports.
    pub data_dir: PathBuf,
    pub retrieval: RetrievalConfig,
    pub evolution: EvolutionConfig,
    pub pipeline: PipelineConfig,
    pub build: BuildConfig,
    /// Dimension of the deterministic hashing embedder used when no
    /// embedding endpoint is configured.
    pub stub_embedding_dim: usize,
    pub embedding: Option<EndpointConfig>,
    pub reasoner: Option<EndpointConfig>,
    /// Optional endpoint that executes plans and returns trajectories.
    pub executor: Option<EndpointConfig>,
    /// Environment variable naming the shared bearer token. Unset disables
    /// authentication.
    pub auth_token_env: Option<String>,
    /// Maximum pipeline runs in flight at once.
    pub max_concurrent_pipelines: usize,
    /// Tracing filter, e.g. "info" or "expkb=debug".
    pub log_verbosity: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8377".to_string(),
            data_dir: PathBuf::from("data"),
            retrieval: RetrievalConfig::default(),
            evolution: EvolutionConfig::default(),
            pipeline: PipelineConfig::default(),
            build: BuildConfig::default(),
            stub_embedding_dim: 384,
            embedding: None,
            reasoner: None,
            executor: None,
            auth_token_env: None,
            max_concurrent_pipelines: 2,
            log_verbosity: "info".to_string(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ServiceConfig =
            toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.retrieval.validate().map_err(anyhow::Error::from)?;
        let evo = &self.evolution;
        anyhow::ensure!(
            evo.decay_rate >= 0.0 && evo.decay_rate.is_finite(),
            "evolution.decay_rate must be a finite non-negative number"
        );
        anyhow::ensure!(
            (0.0..=1.0).contains(&evo.quality_learning_rate),
            "evolution.quality_learning_rate must lie in [0, 1]"
        );
        anyhow::ensure!(
            (0.0..=1.0).contains(&evo.merge_similarity),
            "evolution.merge_similarity must lie in [0, 1]"
        );
        anyhow::ensure!(
            self.stub_embedding_dim >= 2,
            "stub_embedding_dim must be at least 2 (one bias slot plus one token slot)"
        );
        anyhow::ensure!(
            self.max_concurrent_pipelines >= 1,
            "max_concurrent_pipelines must be at least 1"
        );
        Ok(())
    }

    /// The knowledge-base file inside the data directory.
    pub fn kb_file(&self) -> PathBuf {
        self.data_dir.join("kb.jsonl")
    }

    /// Resolves the shared bearer token, if authentication is configured.
    pub fn auth_token(&self) -> anyhow::Result<Option<String>> {
        match &self.auth_token_env {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .with_context(|| format!("auth token variable {name} is not set")),
        }
    }
}
