//! Pipeline configuration: one TOML file, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crawl::CrawlConfig;
use crate::crf::CrfConfig;
use crate::error::{Error, Result};
use crate::labels::{CategoryTable, VOC_CATEGORIES};
use crate::nfm::NfmConfig;
use crate::qfilter::QualityConfig;
use crate::regions::BoundaryStat;
use crate::synth::SynthConfig;

/// Input directories produced outside the pipeline, relative to the work
/// directory unless absolute. Files inside are named `<image id>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub saliency: PathBuf,
    pub attention: Option<PathBuf>,
    pub edges: PathBuf,
    pub ground_truth: PathBuf,
    /// Score maps of the segmentation learner; the surrogate stage writes here.
    pub scores: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            saliency: "saliency".into(),
            attention: None,
            edges: "edges".into(),
            ground_truth: "gt".into(),
            scores: "scores".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionsConfig {
    /// Hierarchy cut used for snapping; 0 keeps the finest partition.
    pub threshold: f64,
    pub boundary: BoundaryStat,
}

impl Default for RegionsConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            boundary: BoundaryStat::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NfmStageConfig {
    /// Apply noise filtering in round 1; disabled means the snapped maps
    /// pass through unchanged.
    pub enabled: bool,
    #[serde(flatten)]
    pub model: NfmConfig,
}

impl Default for NfmStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            model: NfmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub bins_per_channel: usize,
    pub prior_strength: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            bins_per_channel: crate::color::DEFAULT_BINS,
            prior_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Search keywords, one per category, in label-id order.
    pub keywords: Vec<String>,
    pub paths: PathsConfig,
    pub crawl: CrawlConfig,
    pub quality: QualityConfig,
    pub regions: RegionsConfig,
    pub nfm: NfmStageConfig,
    pub crf: CrfConfig,
    pub surrogate: SurrogateConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            keywords: VOC_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            paths: PathsConfig::default(),
            crawl: CrawlConfig::default(),
            quality: QualityConfig::default(),
            regions: RegionsConfig::default(),
            nfm: NfmStageConfig::default(),
            crf: CrfConfig::default(),
            surrogate: SurrogateConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults for the bundled synthetic data set: keywords follow the
    /// synthetic categories.
    pub fn synthetic() -> Self {
        let synth = SynthConfig::default();
        Self {
            keywords: synth.categories.iter().map(|c| c.0.clone()).collect(),
            synth,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn table(&self) -> Result<CategoryTable> {
        CategoryTable::new(self.keywords.iter().cloned()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.table()?;
        self.quality.validate()?;
        self.crf.validate()?;
        if !(0.0..=1.0).contains(&self.regions.threshold) {
            return Err(Error::Config(format!(
                "region threshold must lie in [0, 1], got {}",
                self.regions.threshold
            )));
        }
        if let BoundaryStat::Percentile(p) = self.regions.boundary {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("boundary percentile {p} outside [0, 100]")));
            }
        }
        let m = &self.nfm.model;
        let sgd = &m.sgd;
        if m.hidden == 0 || m.bins_per_channel < 2 || !(m.fg_epsilon >= 0.0) {
            return Err(Error::Config("nfm needs hidden >= 1, bins >= 2 and epsilon >= 0".into()));
        }
        let rates = [sgd.base_lr, sgd.hidden_lr_mult, sgd.output_lr_mult, sgd.weight_decay];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(0.0..1.0).contains(&sgd.momentum) {
            return Err(Error::Config("nfm learning rates must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.surrogate.bins_per_channel < 2 || !(self.surrogate.prior_strength > 0.0) {
            return Err(Error::Config("surrogate needs bins >= 2 and a positive prior".into()));
        }
        if self.crawl.workers == 0 || self.crawl.limit == 0 {
            return Err(Error::Config("crawl needs at least one worker and a positive limit".into()));
        }
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for cfg in [PipelineConfig::default(), PipelineConfig::synthetic()] {
            cfg.validate().unwrap();
            assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn shipped_hyperparameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.quality.blur_threshold, 50.0);
        assert_eq!(cfg.quality.sv_threshold, 20.0);
        assert_eq!(cfg.regions.threshold, 0.0);
        assert_eq!(cfg.crf.lambda, 2.0);
        assert_eq!(cfg.nfm.model.sgd.weight_decay, 5e-4);
        assert_eq!(cfg.nfm.model.sgd.momentum, 0.9);
        assert_eq!(cfg.table().unwrap().len(), 20);
    }

    #[test]
    fn partial_files_override_only_what_they_name() {
        let cfg = PipelineConfig::from_toml("seed = 9\n[crf]\nlambda = 0.5\n[nfm]\nenabled = false\nhidden = 64\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.crf.lambda, 0.5);
        assert_eq!(cfg.crf.iterations, 10);
        assert!(!cfg.nfm.enabled);
        assert_eq!(cfg.nfm.model.hidden, 64);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[quality]\nblur_threshold = -1.0\n",
            "[regions]\nthreshold = 1.5\n",
            "[crf]\nlambda = -2.0\n",
            "keywords = []\n",
            "keywords = [\"cat\", \"cat\"]\n",
            "unknown_field = 1\n",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
