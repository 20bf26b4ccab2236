//! Run configuration: one TOML or JSON file, environment overrides for the
//! remote endpoint, and command-line overrides applied by the CLI.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fir::FirConfig;
use crate::instruction::Variant;
use crate::llm::ModelRoles;
use crate::metrics::MacroAveraging;
use crate::retrieval::Paradigm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic in-process agents; see [`crate::llm::SimulatedAgents`].
    Simulated,
    /// A JSON [`crate::llm::MockScript`].
    Script,
    /// An OpenAI-compatible endpoint at `LLM_API_BASE`.
    Remote,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Simulated => "simulated",
            BackendKind::Script => "script",
            BackendKind::Remote => "remote",
        }
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simulated" => Ok(BackendKind::Simulated),
            "script" => Ok(BackendKind::Script),
            "remote" => Ok(BackendKind::Remote),
            _ => Err(format!("unknown backend {s:?} (simulated, script, remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub script: Option<PathBuf>,
    /// Overridden by `LLM_API_BASE`. The key is only ever read from `LLM_API_KEY`.
    pub api_base: Option<String>,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub simulated_recall: f64,
    pub simulated_confusion: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulated,
            script: None,
            api_base: None,
            max_retries: 5,
            retry_base_ms: 500,
            simulated_recall: 0.6,
            simulated_confusion: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Dimension of the hashing embedder.
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hashing,
            dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub paradigm: Paradigm,
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            paradigm: Paradigm::SemanticKnn,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub n: usize,
    pub subset_fraction: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            n: 10,
            subset_fraction: 0.01,
        }
    }
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".ttprompt-cache")
}

fn default_parallelism() -> usize {
    4
}

fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub models: ModelRoles,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    /// Maximum backend calls for one command; cache hits are free.
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub strategies: StrategyConfig,
    #[serde(default)]
    pub fir: FirConfig,
    #[serde(default)]
    pub macro_averaging: MacroAveraging,
    /// Prompt template file; the built-in layout when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            backend: BackendConfig::default(),
            models: ModelRoles::default(),
            embedder: EmbedderConfig::default(),
            cache_dir: default_cache_dir(),
            budget: None,
            parallelism: default_parallelism(),
            retrieval: RetrievalConfig::default(),
            variant: default_variant(),
            strategies: StrategyConfig::default(),
            fir: FirConfig {
                seed,
                ..FirConfig::default()
            },
            macro_averaging: MacroAveraging::default(),
            template: None,
            output_dir: None,
        }
    }

    /// TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?
        };
        cfg.fir.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(base) = std::env::var("LLM_API_BASE") {
            if !base.trim().is_empty() {
                self.backend.api_base = Some(base);
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism == 0 {
            return Err("parallelism must be at least 1".into());
        }
        if self.retrieval.k == 0 {
            return Err("retrieval.k must be at least 1".into());
        }
        if self.strategies.n == 0 {
            return Err("strategies.n must be at least 1".into());
        }
        if !(self.strategies.subset_fraction > 0.0 && self.strategies.subset_fraction <= 1.0) {
            return Err("strategies.subset_fraction must be in (0, 1]".into());
        }
        self.fir.validate().map_err(|e| e.to_string())?;
        let m = &self.models;
        for (role, id) in [
            ("executor", &m.executor),
            ("reflector", &m.reflector),
            ("editor", &m.editor),
            ("strategist", &m.strategist),
            ("guideline_writer", &m.guideline_writer),
            ("embedder", &m.embedder),
        ] {
            if id.trim().is_empty() {
                return Err(format!("model id for role {role} is empty"));
            }
        }
        match self.backend.kind {
            BackendKind::Script if self.backend.script.is_none() => {
                return Err("backend.kind = script needs backend.script".into());
            }
            BackendKind::Remote if self.backend.api_base.is_none() => {
                return Err("backend.kind = remote needs LLM_API_BASE or backend.api_base".into());
            }
            _ => {}
        }
        if self.embedder.kind == EmbedderKind::Remote && self.backend.api_base.is_none() {
            return Err("embedder.kind = remote needs LLM_API_BASE or backend.api_base".into());
        }
        if self.embedder.dim == 0 {
            return Err("embedder.dim must be positive".into());
        }
        Ok(())
    }

    /// Responses from different backends never share a cache directory.
    pub fn llm_cache_root(&self) -> PathBuf {
        self.cache_dir.join(self.backend.kind.as_str())
    }

    /// Hash of everything that can change a result; where files go is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.cache_dir = PathBuf::new();
        c.output_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("configs serialize")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(serde_json::from_str::<RunConfig>("{}").is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.variant, Variant::Full);
        assert_eq!(cfg.fir.epochs, 5);
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 3\nbudget = 100\n[fir]\nepochs = 2\n[retrieval]\nk = 4\nparadigm = \"entity_density\"\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(
            &j,
            r#"{"seed":3,"budget":100,"fir":{"epochs":2},"retrieval":{"k":4,"paradigm":"entity_density"}}"#,
        )
        .unwrap();
        let a = RunConfig::load(&t).unwrap();
        let b = RunConfig::load(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fir.seed, 3);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed":1,"sede":2}"#).is_err());
        let mut cfg = RunConfig::with_seed(1);
        cfg.backend.kind = BackendKind::Remote;
        cfg.backend.api_base = None;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::with_seed(1);
        cfg.models.editor = String::new();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::with_seed(1).validate().is_ok());
    }
}
