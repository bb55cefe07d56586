//! Experiment configuration: strict JSON parsing with defaults materialized
//! and every embedded invariant checked at parse time.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hypernet::HyperNetConfig;
use crate::target::ArchDescriptor;
use crate::trainer::{DiversityMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// 2-D Gaussian-mixture sampling with a 1-D latent.
    Toy,
    /// Classifier-weight generation for the MNIST-scale target network.
    Mnist,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding (or receiving) the IDX dataset files.
    pub dir: PathBuf,
    /// Training examples when the corpus is synthesized.
    pub train_count: usize,
    /// Held-out examples when the corpus is synthesized.
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data"), train_count: 12_000, test_count: 2_000 }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Bank size drawn by `sample`.
    pub sample_count: usize,
    pub histogram_bins: usize,
    /// Points per weight-space path.
    pub path_points: usize,
    /// Endpoint pairs evaluated by `paths`.
    pub path_pairs: usize,
    pub pca_components: usize,
    pub adversarial: crate::analysis::AdversarialConfig,
    pub filter_layer: usize,
    pub filter_index: usize,
    /// Members shown in a filter grid.
    pub filter_count: usize,
    /// Uniform z count for the toy profile.
    pub toy_profile_points: usize,
    /// Evaluation minibatch size.
    pub eval_chunk: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_count: 100,
            histogram_bins: 20,
            path_points: 20,
            path_pairs: 10,
            pca_components: 2,
            adversarial: crate::analysis::AdversarialConfig::default(),
            filter_layer: 0,
            filter_index: 0,
            filter_count: 25,
            toy_profile_points: 400,
            eval_chunk: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Target architecture; defaults to the standard one for `mnist` and
    /// stays empty for `toy`.
    #[serde(default)]
    pub arch: Option<ArchDescriptor>,
    /// Generator; defaults to the kind's standard configuration.
    #[serde(default)]
    pub hypernet: Option<HyperNetConfig>,
    /// Training settings; defaults to the kind's standard configuration.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Fill unset optional sections with the experiment kind's defaults.
    pub fn materialize(&mut self) {
        match self.experiment {
            ExperimentKind::Mnist => {
                if self.arch.is_none() {
                    self.arch = Some(ArchDescriptor::mnist());
                }
                if self.hypernet.is_none() {
                    self.hypernet = Some(HyperNetConfig::mnist_default());
                }
                if self.train.is_none() {
                    self.train = Some(TrainConfig::default());
                }
            }
            ExperimentKind::Toy => {
                if self.hypernet.is_none() {
                    self.hypernet = Some(HyperNetConfig::toy_default());
                }
                if self.train.is_none() {
                    self.train = Some(TrainConfig::toy_default());
                }
            }
        }
    }

    pub fn train(&self) -> &TrainConfig {
        self.train.as_ref().expect("materialized configuration")
    }

    pub fn arch(&self) -> Result<&ArchDescriptor> {
        self.arch
            .as_ref()
            .ok_or_else(|| Error::Config("no target architecture in a toy experiment".into()))
    }

    pub fn hypernet(&self) -> &HyperNetConfig {
        self.hypernet.as_ref().expect("materialized configuration")
    }

    /// Stable textual identity of the generator setup, hashed into
    /// parameter-checkpoint containers.
    pub fn phi_descriptor(&self) -> String {
        let hn = serde_json::to_string(self.hypernet()).expect("config serializes");
        match (&self.experiment, &self.arch) {
            (ExperimentKind::Toy, _) => format!("toy|{hn}"),
            (ExperimentKind::Mnist, Some(a)) => format!("{}|{hn}", a.canonical_string()),
            (ExperimentKind::Mnist, None) => unreachable!("materialized configuration"),
        }
    }

    /// Every embedded invariant, checked after materialization.
    pub fn validate(&self) -> Result<()> {
        let hn = self
            .hypernet
            .as_ref()
            .ok_or_else(|| Error::Config("configuration not materialized".into()))?;
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("configuration not materialized".into()))?;
        train.validate()?;
        match self.experiment {
            ExperimentKind::Toy => {
                if self.arch.is_some() {
                    return Err(Error::Config("toy experiments have no target architecture".into()));
                }
                match hn {
                    HyperNetConfig::DirectMlp { z_dim, out_dim, .. } => {
                        if *z_dim != 1 || *out_dim != 2 {
                            return Err(Error::Config(format!(
                                "toy generator must map a 1-D latent to 2-D points, got {z_dim} → {out_dim}"
                            )));
                        }
                    }
                    HyperNetConfig::Structured { .. } => {
                        return Err(Error::Config(
                            "toy experiments use a direct MLP generator, not the structured hypernetwork".into(),
                        ))
                    }
                }
                match train.diversity {
                    DiversityMode::L2Reg => {}
                    DiversityMode::WeightEntropy => {
                        if train.gauge {
                            return Err(Error::Config(
                                "gauge fixing needs a target architecture; disable it for toy runs".into(),
                            ));
                        }
                    }
                    DiversityMode::OutputEntropy | DiversityMode::EnsembleAggregate => {
                        return Err(Error::Config(
                            "output-space diversity needs a classifier experiment".into(),
                        ))
                    }
                }
            }
            ExperimentKind::Mnist => {
                let arch = self.arch()?;
                let layout = arch.layout().map_err(|e| Error::Config(e.to_string()))?;
                if !matches!(hn, HyperNetConfig::Structured { .. }) {
                    return Err(Error::Config(
                        "classifier experiments use the structured hypernetwork".into(),
                    ));
                }
                // Wiring must be constructible: widths, codes, counts.
                crate::hypernet::build(hn, Some(arch), &mut crate::rng::stream(0, "validate"))
                    .map_err(|e| Error::Config(format!("hypernet incompatible with arch: {e}")))?;
                let _ = layout;
                if train.images_per_z == 0 {
                    return Err(Error::Config("images_per_z must be ≥ 1".into()));
                }
            }
        }
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::Config("dataset counts must be ≥ 1".into()));
        }
        let a = &self.analysis;
        for (name, v) in [
            ("sample_count", a.sample_count),
            ("histogram_bins", a.histogram_bins),
            ("path_pairs", a.path_pairs),
            ("pca_components", a.pca_components),
            ("filter_count", a.filter_count),
            ("eval_chunk", a.eval_chunk),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("analysis.{name} must be ≥ 1")));
            }
        }
        if a.path_points < 2 || a.toy_profile_points < 2 {
            return Err(Error::Config("paths and toy profiles need ≥ 2 points".into()));
        }
        Ok(())
    }
}

/// Strict parse: unknown keys rejected with the path to the offending key,
/// syntax errors reported with line and column, defaults materialized, and
/// all invariants checked.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let path = e.path().to_string();
        if path == "." {
            Error::Config(format!("line {}, column {}: {}", inner.line(), inner.column(), inner))
        } else {
            Error::Config(format!(
                "at `{path}` (line {}, column {}): {}",
                inner.line(),
                inner.column(),
                inner
            ))
        }
    })?;
    cfg.materialize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
    parse_config_str(&text)
}
