use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::bkt::EmConfig;
use crate::dataset::ColumnMapping;
use crate::llm::{ClientSettings, LlmMode, PromptTemplate, TemplateFilter};
use crate::logreg::LrConfig;
use crate::neural::{DktConfig, SaktConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Train models on separate threads.
    #[serde(default)]
    pub parallel_models: bool,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub llm: LlmConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Two files with one user id per line.
    External { train_users: PathBuf, test_users: PathBuf },
    /// Shuffle users with the experiment seed.
    Seeded {
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mean,
    Nap,
    NapSkills,
    Bkt,
    BestLr,
    Dkt,
    Sakt,
    FtMinimal,
    FtExtended,
    ZeroShot,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Mean,
        ModelKind::Nap,
        ModelKind::NapSkills,
        ModelKind::Bkt,
        ModelKind::BestLr,
        ModelKind::Dkt,
        ModelKind::Sakt,
        ModelKind::FtMinimal,
        ModelKind::FtExtended,
        ModelKind::ZeroShot,
    ];

    pub fn family(self) -> &'static str {
        match self {
            ModelKind::Mean | ModelKind::Nap | ModelKind::NapSkills => "Naive Baselines",
            ModelKind::FtMinimal | ModelKind::FtExtended | ModelKind::ZeroShot => "LLM",
            ModelKind::Bkt => "Markov Model",
            ModelKind::BestLr => "Logistic Regression",
            ModelKind::Dkt => "DL: RNN",
            ModelKind::Sakt => "DL: Transformer",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Mean => "Mean",
            ModelKind::Nap => "NaP",
            ModelKind::NapSkills => "NaP Skills",
            ModelKind::Bkt => "BKT",
            ModelKind::BestLr => "Best-LR",
            ModelKind::Dkt => "DKT",
            ModelKind::Sakt => "SAKT",
            ModelKind::FtMinimal => "FT Min",
            ModelKind::FtExtended => "FT Ext",
            ModelKind::ZeroShot => "0-Shot",
        }
    }

    /// Identifier used in file names and on the command line.
    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Mean => "mean",
            ModelKind::Nap => "nap",
            ModelKind::NapSkills => "nap-skills",
            ModelKind::Bkt => "bkt",
            ModelKind::BestLr => "best-lr",
            ModelKind::Dkt => "dkt",
            ModelKind::Sakt => "sakt",
            ModelKind::FtMinimal => "ft-minimal",
            ModelKind::FtExtended => "ft-extended",
            ModelKind::ZeroShot => "zero-shot",
        }
    }

    pub fn from_slug(s: &str) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|k| k.slug() == s)
    }

    pub fn llm_mode(self) -> Option<LlmMode> {
        match self {
            ModelKind::FtMinimal => Some(LlmMode::Finetuned(PromptTemplate::Minimal)),
            ModelKind::FtExtended => Some(LlmMode::Finetuned(PromptTemplate::Extended)),
            ModelKind::ZeroShot => Some(LlmMode::ZeroShot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub kind: ModelKind,
    /// Hyperparameters for the model's own config type.
    #[serde(default)]
    pub params: toml::Table,
    /// Wall-clock training budget; training stops early when it runs out.
    #[serde(default)]
    pub budget_secs: Option<f64>,
    /// Record the row as failed instead of keeping a truncated fit.
    #[serde(default)]
    pub abort_on_budget: bool,
}

/// A model entry with its hyperparameters parsed.
#[derive(Debug, Clone)]
pub enum ModelParams {
    Naive,
    Bkt(EmConfig),
    BestLr(LrConfig),
    Dkt(DktConfig),
    Sakt(SaktConfig),
    Llm(LlmMode),
}

impl ModelEntry {
    /// Parses `params` for this kind. Model seeds default to the experiment
    /// seed unless the table sets one.
    pub fn parsed(&self, seed: u64) -> Result<ModelParams, HarnessError> {
        let mut table = self.params.clone();
        let naive = matches!(self.kind, ModelKind::Mean | ModelKind::Nap | ModelKind::NapSkills);
        if !naive && self.kind.llm_mode().is_none() && !table.contains_key("seed") {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let bad = |e: toml::de::Error| HarnessError::Config(format!("[{}] params: {e}", self.kind.slug()));
        let v = toml::Value::Table(table);
        Ok(match self.kind {
            ModelKind::Mean
            | ModelKind::Nap
            | ModelKind::NapSkills
            | ModelKind::FtMinimal
            | ModelKind::FtExtended
            | ModelKind::ZeroShot => {
                if !self.params.is_empty() {
                    return Err(HarnessError::Config(format!("[{}] takes no params", self.kind.slug())));
                }
                match self.kind.llm_mode() {
                    Some(mode) => ModelParams::Llm(mode),
                    None => ModelParams::Naive,
                }
            }
            ModelKind::Bkt => ModelParams::Bkt(v.try_into().map_err(bad)?),
            ModelKind::BestLr => ModelParams::BestLr(v.try_into().map_err(bad)?),
            ModelKind::Dkt => ModelParams::Dkt(v.try_into().map_err(bad)?),
            ModelKind::Sakt => ModelParams::Sakt(v.try_into().map_err(bad)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default)]
    pub backend: BackendKind,
    /// `[B, C, D, E]` weights of the mock.
    #[serde(default = "default_mock_weights")]
    pub mock_weights: [f64; 4],
    #[serde(default)]
    pub mock_accepts: TemplateFilter,
    #[serde(default)]
    pub replay_file: Option<PathBuf>,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Environment variable that holds the API key.
    #[serde(default = "default_key_var")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub client: ClientSettings,
}

fn default_mock_weights() -> [f64; 4] {
    [0.1, -0.1, 0.2, -0.2]
}

fn default_key_var() -> String {
    crate::llm::DEFAULT_API_KEY_VAR.to_string()
}

fn default_timeout() -> u64 {
    60
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::Mock,
            mock_weights: default_mock_weights(),
            mock_accepts: TemplateFilter::Any,
            replay_file: None,
            base_url: None,
            api_key_env: default_key_var(),
            timeout_secs: default_timeout(),
            client: ClientSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.output_dir);
        if let SplitConfig::External {
            train_users,
            test_users,
        } = &mut self.split
        {
            fix(train_users);
            fix(test_users);
        }
        if let Some(p) = &mut self.llm.replay_file {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.models.is_empty() {
            return Err(HarnessError::Config("at least one [[models]] entry is required".into()));
        }
        if let SplitConfig::Seeded { train_fraction } = self.split {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(HarnessError::Config(format!(
                    "train_fraction {train_fraction} must lie strictly between 0 and 1"
                )));
            }
        }
        for m in &self.models {
            m.parsed(self.seed)?;
            if m.budget_secs.is_some_and(|b| b.is_nan() || b <= 0.0) {
                return Err(HarnessError::Config(format!(
                    "[{}] budget_secs must be positive",
                    m.kind.slug()
                )));
            }
        }
        let uses_llm = self.models.iter().any(|m| m.kind.llm_mode().is_some());
        if uses_llm {
            match self.llm.backend {
                BackendKind::Replay if self.llm.replay_file.is_none() => {
                    return Err(HarnessError::Config("replay backend needs llm.replay_file".into()))
                }
                BackendKind::Http if self.llm.base_url.is_none() => {
                    return Err(HarnessError::Config("http backend needs llm.base_url".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
output_dir = "out"

[dataset]
name = "toy"
path = "toy.csv"

[split]
mode = "seeded"
train_fraction = 0.75

[[models]]
kind = "mean"

[[models]]
kind = "bkt"
params = { restarts = 1, max_iter = 20 }

[[models]]
kind = "dkt"
params = { hidden_size = 8, epochs = 2 }
budget_secs = 30.0

[[models]]
kind = "ft-extended"

[llm]
backend = "mock"
mock_weights = [0.5, -0.5, 0.0, 0.0]
"#;

    #[test]
    fn parses_sample() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.models.len(), 4);
        match cfg.models[1].parsed(cfg.seed).unwrap() {
            ModelParams::Bkt(em) => {
                assert_eq!((em.restarts, em.max_iter, em.seed), (1, 20, 3));
            }
            other => panic!("{other:?}"),
        }
        match cfg.models[2].parsed(cfg.seed).unwrap() {
            ModelParams::Dkt(d) => assert_eq!((d.hidden_size, d.epochs, d.max_seq_len), (8, 2, 200)),
            other => panic!("{other:?}"),
        }
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("kind = \"mean\"", "kind = \"svm\"")).is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("restarts = 1", "restart = 1")).is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("hidden_size = 8", "hidden_size = -8")).is_err());
        assert!(ExperimentConfig::from_toml(
            &SAMPLE.replace("kind = \"ft-extended\"", "kind = \"ft-extended\"\nparams = { x = 1 }")
        )
        .is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("0.75", "1.5")).is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("backend = \"mock\"", "backend = \"replay\"")).is_err());
        let no_models: String = SAMPLE.split("[[models]]").next().unwrap().to_string();
        assert!(ExperimentConfig::from_toml(&no_models).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.models[1].params.insert("tol".into(), toml::Value::Float(1e-3));
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.llm.mock_weights[3] = 0.1;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn slugs_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::from_slug(k.slug()), Some(k));
        }
    }
}
