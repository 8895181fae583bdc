//! Run configuration, read from one TOML file with a section per stage.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use fire_core::classifier::{Hyperparams, SearchSpace};
use fire_core::corpus::{CorpusFormat, SplitRatios};
use fire_core::llm::{BackendKind, GatewayConfig};
use fire_core::prompts::{DomainName, DomainProfile};

use crate::error::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run data-parallel loops on one thread.
    pub sequential: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            output_dir: PathBuf::from("out"),
            sequential: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    #[serde(default)]
    pub split: SplitRatios,
}

fn default_format() -> String {
    "jsonl".into()
}

fn default_min_interactions() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub name: String,
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    pub k_u: Option<usize>,
    pub k_i: Option<usize>,
    pub max_iter: Option<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_representatives")]
    pub representatives: usize,
}

fn default_restarts() -> usize {
    5
}

fn default_representatives() -> usize {
    5
}

impl Default for ClusteringSection {
    fn default() -> Self {
        ClusteringSection {
            k_u: None,
            k_i: None,
            max_iter: None,
            restarts: default_restarts(),
            representatives: default_representatives(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Explicit hyperparameters; the domain preset is used when absent.
    pub params: Option<Hyperparams>,
    /// Random-search trials; 0 keeps the configured parameters.
    pub tune_budget: usize,
    pub search: SearchSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerSection {
    pub top_k: usize,
}

impl Default for ExplainerSection {
    fn default() -> Self {
        ExplainerSection { top_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub domain: DomainSection,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub explainer: ExplainerSection,
}

/// Per-domain defaults for cluster count and iterations.
fn domain_defaults(domain: DomainName) -> (usize, usize, Hyperparams) {
    match domain {
        DomainName::MoviesTv => (90, 25, Hyperparams::amazon()),
        DomainName::Restaurant => (90, 50, Hyperparams::yelp()),
        DomainName::Accommodation | DomainName::Custom => (52, 100, Hyperparams::tripadvisor()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(vec![e.to_string()]))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.run.output_dir);
        if let Some(d) = self.domain.prompt_dir.as_mut() {
            fix(d);
        }
        if let Some(d) = self.gateway.cache_dir.as_mut() {
            fix(d);
        }
    }

    /// Secrets and endpoints may come from the environment.
    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var("FIRE_API_KEY") {
            self.gateway.api_key = key;
        }
        if let Ok(url) = std::env::var("FIRE_BASE_URL") {
            self.gateway.base_url = url;
        }
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, backend: Option<BackendKind>) {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        if let Some(b) = backend {
            self.gateway.backend = b;
        }
    }

    pub fn domain_name(&self) -> Result<DomainName, String> {
        DomainName::from_str(&self.domain.name).map_err(|e| e.to_string())
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat, String> {
        CorpusFormat::from_str(&self.dataset.format).map_err(|e| e.to_string())
    }

    pub fn k_u(&self) -> usize {
        self.clustering.k_u.unwrap_or_else(|| self.preset().0)
    }

    pub fn k_i(&self) -> usize {
        self.clustering.k_i.unwrap_or_else(|| self.preset().0)
    }

    pub fn max_iter(&self) -> usize {
        self.clustering.max_iter.unwrap_or_else(|| self.preset().1)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.classifier.params.clone().unwrap_or_else(|| self.preset().2)
    }

    fn preset(&self) -> (usize, usize, Hyperparams) {
        domain_defaults(self.domain_name().unwrap_or(DomainName::Custom))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.gateway
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.run.output_dir.join("cache"))
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            cache_dir: Some(self.cache_dir()),
            seed: self.run.seed,
            ..self.gateway.clone()
        }
    }

    pub fn profile(&self) -> Result<DomainProfile, RunError> {
        let name = self.domain_name().map_err(|e| RunError::Config(vec![e]))?;
        DomainProfile::resolve(name, self.domain.prompt_dir.as_deref()).map_err(|e| RunError::Config(vec![e.to_string()]))
    }

    /// Every problem at once, so one edit fixes them all.
    pub fn validate(&self) -> Result<(), RunError> {
        let mut problems = Vec::new();
        if !self.dataset.path.is_file() {
            problems.push(format!("dataset.path {} does not exist", self.dataset.path.display()));
        }
        if let Err(e) = self.corpus_format() {
            problems.push(format!("dataset.format: {e}"));
        }
        let s = self.dataset.split;
        if !(s.train > 0.0 && s.valid >= 0.0 && s.test > 0.0) || ![s.train, s.valid, s.test].iter().all(|v| v.is_finite()) {
            problems.push("dataset.split ratios must be finite, train and test positive".into());
        }
        match self.domain_name() {
            Err(e) => problems.push(format!("domain.name: {e}")),
            Ok(DomainName::Custom) if self.domain.prompt_dir.is_none() => {
                problems.push("domain.prompt_dir is required for a custom domain".into())
            }
            Ok(_) => {}
        }
        if let Some(dir) = &self.domain.prompt_dir {
            if !dir.is_dir() {
                problems.push(format!("domain.prompt_dir {} does not exist", dir.display()));
            }
        }
        if let Err(e) = self.gateway.validate() {
            problems.push(format!("gateway: {e}"));
        }
        if self.gateway.backend == BackendKind::Remote && self.gateway.api_key.is_empty() {
            problems.push("gateway: the remote backend needs an API key (set FIRE_API_KEY)".into());
        }
        if self.k_u() == 0 || self.k_i() == 0 {
            problems.push("clustering.k_u and clustering.k_i must be positive".into());
        }
        if self.max_iter() == 0 || self.clustering.restarts == 0 {
            problems.push("clustering.max_iter and clustering.restarts must be positive".into());
        }
        if self.clustering.representatives == 0 {
            problems.push("clustering.representatives must be positive".into());
        }
        if let Err(e) = self.hyperparams().validate() {
            problems.push(format!("classifier.params: {e}"));
        }
        if self.explainer.top_k == 0 {
            problems.push("explainer.top_k must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(problems))
        }
    }
}
