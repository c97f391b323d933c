use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_idx, synthetic_digits, GlyphStyle, RawDigitSet, SplitSpec};
use crate::detectors::DetectorKind;
use crate::error::{Error, Result};
use crate::generator::{BlendSpec, GeneratorTrainConfig};
use crate::network::NetworkSpec;
use crate::numerics::tensor::argmax;
use crate::objective::LossWeights;

/// Environment variable naming the default root for relative data paths.
pub const DATA_DIR_ENV: &str = "OSDG_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Grayscale digits in IDX format. Relative paths resolve against `OSDG_DATA_DIR`.
    Idx { images: PathBuf, labels: PathBuf },
    /// Procedurally rendered digits.
    Synthetic { count: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<RawDigitSet> {
        match self {
            DataSource::Idx { images, labels } => {
                load_idx(&resolve_data_path(images), &resolve_data_path(labels))
            }
            DataSource::Synthetic { count, seed } => {
                synthetic_digits(*count, *seed, &GlyphStyle::default())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic { count: 0, .. } => Err(Error::Config(
                "synthetic data count must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => Path::new(&root).join(p),
        None => p.to_path_buf(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_feature_dim() -> usize {
    64
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![128],
            feature_dim: default_feature_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball coefficient; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 10,
            batch_size: 64,
            momentum: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Oracle,
    /// A learned autoencoder loaded from `checkpoint`; `train` configures `train-g`.
    Learned {
        checkpoint: PathBuf,
        #[serde(default)]
        train: GeneratorTrainConfig,
    },
}

/// Ranges for the random hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    /// Log-uniform.
    pub lr: [f64; 2],
    /// Log-uniform.
    pub zeta1: [f64; 2],
    /// Log-uniform.
    pub zeta2: [f64; 2],
    /// Uniform.
    pub gamma: [f64; 2],
    pub runs_per_trial: usize,
    pub trials: usize,
    /// Minimum share of ID digit classes that some trial holds out as OOD.
    pub min_ood_coverage: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: [1e-4, 1e-1],
            zeta1: [1e-3, 10.0],
            zeta2: [1e-3, 10.0],
            gamma: [-15.0, -1.0],
            runs_per_trial: 30,
            trials: 3,
            min_ood_coverage: 0.5,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2], positive: bool| {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0)
            {
                Err(Error::Config(format!(
                    "search range {name} = {r:?} is invalid"
                )))
            } else {
                Ok(())
            }
        };
        ordered("lr", self.lr, true)?;
        ordered("zeta1", self.zeta1, true)?;
        ordered("zeta2", self.zeta2, true)?;
        ordered("gamma", self.gamma, false)?;
        if self.gamma[1] >= 0.0 {
            return Err(Error::Config(
                "search range gamma must stay negative".into(),
            ));
        }
        if self.runs_per_trial == 0 || self.trials == 0 {
            return Err(Error::Config(
                "runs_per_trial and trials must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_ood_coverage) {
            return Err(Error::Config("min_ood_coverage must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which objective a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Cross-entropy only.
    Erm,
    /// Cross-entropy plus both regularizers.
    Fsi,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Erm => "erm",
            Arm::Fsi => "fsi",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Arm::Erm),
            "fsi" => Ok(Arm::Fsi),
            other => Err(Error::Config(format!(
                "unknown arm '{other}' (expected erm or fsi)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_generator")]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub blend: BlendSpec,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<DetectorKind>,
    #[serde(default = "default_ridge")]
    pub ddu_ridge: f64,
    #[serde(default)]
    pub search: SearchSpace,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_generator() -> GeneratorConfig {
    GeneratorConfig::Oracle
}

fn default_detectors() -> Vec<DetectorKind> {
    vec![
        DetectorKind::Energy,
        DetectorKind::Msp,
        DetectorKind::GaussianDensity,
    ]
}

fn default_ridge() -> f64 {
    1e-3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.loss.validate()?;
        self.blend.validate()?;
        self.search.validate()?;
        if self.network.feature_dim == 0 || self.network.hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.train.lr
            )));
        }
        if self.train.batch_size < 2 || self.train.epochs == 0 {
            return Err(Error::Config(
                "batch_size must be ≥ 2 and epochs ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector is required".into()));
        }
        if !(self.ddu_ridge >= 0.0 && self.ddu_ridge.is_finite()) {
            return Err(Error::Config("ddu_ridge must be non-negative".into()));
        }
        if self.split.num_classes() < 2 {
            return Err(Error::Config(
                "at least two ID classes are needed to synthesize outliers".into(),
            ));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: crate::datasets::COLOR_PIXELS,
            hidden: self.network.hidden.clone(),
            feature_dim: self.network.feature_dim,
            num_classes: self.split.num_classes(),
        }
    }

    /// The same configuration with the regularizers switched off.
    pub fn for_arm(&self, arm: Arm) -> ExperimentConfig {
        let mut cfg = self.clone();
        if arm == Arm::Erm {
            cfg.loss.zeta1 = 0.0;
            cfg.loss.zeta2 = 0.0;
        }
        cfg
    }

    pub fn arm(&self) -> Arm {
        if self.loss.zeta1 == 0.0 && self.loss.zeta2 == 0.0 {
            Arm::Erm
        } else {
            Arm::Fsi
        }
    }
}

/// Closed-set prediction from one logit row.
pub(crate) fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}
