//! TOML configuration shared by every command.

use std::path::{Path, PathBuf};

use kgdx_core::builder::{BuildConfig, HierarchyConfig, DEFAULT_MERGE_THRESHOLD};
use kgdx_core::engine::{EngineConfig, QuestioningConfig};
use kgdx_core::eval::{DEFAULT_SEED, TABLE_RATIOS};
use kgdx_core::llm::HttpConfig;
use kgdx_core::matcher::MatchConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerSection,
    pub paths: PathsSection,
    pub backend: BackendSection,
    pub mock: MockSection,
    pub matcher: MatcherSection,
    pub retriever: RetrieverSection,
    pub questioning: QuestioningConfig,
    pub hierarchy: HierarchyConfig,
    pub builder: BuilderSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub listen: String,
    /// Sessions are written here on shutdown and restored on startup.
    pub snapshot_path: Option<PathBuf>,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            listen: "127.0.0.1:8080".into(),
            snapshot_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub kg: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub templates: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub mode: BackendMode,
    pub base_url: String,
    pub chat_path: String,
    pub embed_path: String,
    pub chat_model: String,
    pub embed_model: String,
    pub api_key_env: String,
    pub auth_header: String,
    pub timeout_secs: u64,
    pub temperature: f64,
    /// Shared request budget for chat and embedding calls; unset for none.
    pub requests_per_second: Option<f64>,
    pub burst: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpConfig::default();
        BackendSection {
            mode: BackendMode::Mock,
            base_url: http.base_url,
            chat_path: http.chat_path,
            embed_path: http.embed_path,
            chat_model: http.chat_model,
            embed_model: http.embed_model,
            api_key_env: http.api_key_env,
            auth_header: http.auth_header,
            timeout_secs: http.timeout_secs,
            temperature: http.temperature,
            requests_per_second: None,
            burst: 4,
        }
    }
}

impl BackendSection {
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            chat_path: self.chat_path.clone(),
            embed_path: self.embed_path.clone(),
            chat_model: self.chat_model.clone(),
            embed_model: self.embed_model.clone(),
            api_key_env: self.api_key_env.clone(),
            auth_header: self.auth_header.clone(),
            timeout_secs: self.timeout_secs,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    /// JSON object of transcript key → response.
    pub transcript_path: Option<PathBuf>,
    /// Response for prompts missing from the transcript.
    pub fallback: Option<String>,
    /// JSON object of text → vector.
    pub embedding_table_path: Option<PathBuf>,
    /// Dimension of hashed vectors when no table fixes it.
    pub dimension: usize,
}

impl Default for MockSection {
    fn default() -> Self {
        MockSection {
            transcript_path: None,
            fallback: None,
            embedding_table_path: None,
            dimension: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherSection {
    pub m: usize,
    pub t_matching: f64,
}

impl Default for MatcherSection {
    fn default() -> Self {
        let d = MatchConfig::default();
        MatcherSection {
            m: d.m,
            t_matching: d.t_matching,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub k: usize,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        RetrieverSection {
            k: MatchConfig::default().k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderSection {
    pub merge_threshold: f64,
    pub augment: bool,
}

impl Default for BuilderSection {
    fn default() -> Self {
        BuilderSection {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub mask_ratios: Vec<f64>,
    /// Re-add deleted features that the follow-up questions ask about.
    pub restore: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seed: DEFAULT_SEED,
            mask_ratios: TABLE_RATIOS.to_vec(),
            restore: true,
        }
    }
}

impl Config {
    /// Parses a TOML document. Relative paths are kept as written.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [&mut p.kg, &mut p.index, &mut p.templates, &mut p.corpus, &mut p.cases, &mut p.aliases] {
            fix(slot);
        }
        fix(&mut self.server.snapshot_path);
        fix(&mut self.mock.transcript_path);
        fix(&mut self.mock.embedding_table_path);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.engine()
            .matcher
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.questioning
            .mask
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.mock.dimension == 0 {
            return Err(ConfigError::Invalid("mock.dimension must be positive".into()));
        }
        if self.backend.requests_per_second.is_some_and(|r| r <= 0.0) || self.backend.burst == 0 {
            return Err(ConfigError::Invalid("backend rate limit must be positive".into()));
        }
        if let Some(r) = self.eval.mask_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ConfigError::Invalid(format!("mask ratio {r} is outside [0, 1]")));
        }
        Ok(())
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            matcher: MatchConfig {
                m: self.matcher.m,
                t_matching: self.matcher.t_matching,
                k: self.retriever.k,
            },
            questioning: self.questioning.clone(),
        }
    }

    pub fn build(&self, augment: bool) -> BuildConfig {
        BuildConfig {
            merge_threshold: self.builder.merge_threshold,
            hierarchy: self.hierarchy,
            augment,
        }
    }
}
