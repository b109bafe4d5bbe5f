use std::path::{Path, PathBuf};

use cushion_core::analysis::LayerSelection;
use cushion_core::data::{Corpus, DEFAULT_SPLIT};
use cushion_core::eval::DeployConfig;
use cushion_core::model::{TrainConfig, TransformerConfig};
use cushion_core::search::SearchConfig;
use cushion_core::tuning::TuneConfig;
use cushion_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// UTF-8 text file; the bundled text when absent.
    pub path: Option<PathBuf>,
    /// Leading fraction used for training, search and tuning.
    pub split: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            split: DEFAULT_SPLIT,
        }
    }
}

impl CorpusConfig {
    pub fn load(&self) -> Result<Corpus> {
        match &self.path {
            Some(p) => Corpus::load(p, self.split),
            None if self.split == DEFAULT_SPLIT => Ok(Corpus::bundled()),
            None => Corpus::from_text(cushion_core::data::BUNDLED_TEXT, self.split, cushion_core::data::BUNDLED_NAME),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Consecutive held-out windows.
    pub texts: usize,
    pub text_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            texts: 8,
            text_len: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub outlier_texts: usize,
    pub outlier_len: usize,
    pub layers: LayerSelection,
    pub sink_text_len: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            outlier_texts: 10,
            outlier_len: 256,
            layers: LayerSelection::All,
            sink_text_len: 64,
        }
    }
}

/// Everything a run needs. Section seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub tune: TuneConfig,
    pub deploy: DeployConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            tune: TuneConfig::default(),
            deploy: DeployConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
        .with_seed(0)
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.search.seed = seed.wrapping_add(1);
        self.tune.seed = seed.wrapping_add(2);
        self.deploy.seed = seed.wrapping_add(3);
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.clone().with_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.search.validate()?;
        self.tune.validate()?;
        self.deploy.weights.validate()?;
        self.deploy.activations.validate()?;
        if self.eval.texts == 0 || self.eval.text_len < 2 {
            return Err(Error::Config("eval needs at least one text of two or more tokens".into()));
        }
        if self.analysis.outlier_texts == 0 {
            return Err(Error::Config("analysis.outlier_texts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default().with_seed(9);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("seed = 4\n[search]\ntau = 0.25\n").unwrap();
        assert_eq!(cfg.search.tau, 0.25);
        assert_eq!(cfg.search.max_len, 16);
        assert_eq!(cfg.tune.seed, 6);
        assert_eq!(cfg.tune.lambda, 0.01);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("sead = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[search]\ntaw = 1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[search]\ntau = -1.0\n").is_err());
        assert!(RunConfig::parse("[tune]\nlambda = -0.5\n").is_err());
    }
}
