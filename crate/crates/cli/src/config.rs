//! Run configuration: a sectioned `key = value` file, overridden by flags.
//!
//! ```text
//! [sampling]
//! ratio = 3
//! [train]
//! iterations = 3000
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crackseg::dataset::{PatchGeometry, Ratio, SamplingPolicy, SyntheticSpec};
use crackseg::evaluation::{Aggregation, Metric, Tolerance};
use crackseg::experiments::ExperimentConfig;
use crackseg::inference::NormMode;
use crackseg::network::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub synthetic: bool,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_size: usize,
    pub synthetic_channels: usize,
    pub synthetic_seed: u64,
    pub half_width: usize,
    pub structure: usize,
    pub ratio: Ratio,
    pub total_cap: Option<usize>,
    pub sampling_seed: u64,
    pub per_image: bool,
    pub train: TrainConfig,
    pub norm_mode: NormMode,
    pub threshold: f32,
    pub inference_batch: usize,
    pub tolerance: u32,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geometry = PatchGeometry::default();
        let sampling = SamplingPolicy::default();
        Self {
            data: None,
            manifest: None,
            synthetic: false,
            synthetic_train: 20,
            synthetic_test: 10,
            synthetic_size: 128,
            synthetic_channels: 1,
            synthetic_seed: 0,
            half_width: geometry.half_width,
            structure: geometry.structure,
            ratio: sampling.ratio,
            total_cap: sampling.total_cap,
            sampling_seed: sampling.seed,
            per_image: sampling.per_image,
            train: TrainConfig::default(),
            norm_mode: NormMode::Mean,
            threshold: 0.5,
            inference_batch: crackseg::inference::DEFAULT_BATCH,
            tolerance: Tolerance::default().distance,
            metric: Metric::Euclidean,
            aggregation: Aggregation::Both,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data.dataset" => self.data = opt_path(v),
            "data.manifest" => self.manifest = opt_path(v),
            "data.synthetic" => self.synthetic = boolean(key, v)?,
            "data.synthetic_train" => self.synthetic_train = num(key, v)?,
            "data.synthetic_test" => self.synthetic_test = num(key, v)?,
            "data.synthetic_size" => self.synthetic_size = num(key, v)?,
            "data.synthetic_channels" => self.synthetic_channels = num(key, v)?,
            "data.synthetic_seed" => self.synthetic_seed = num(key, v)?,
            "geometry.h" => self.half_width = num(key, v)?,
            "geometry.s" => self.structure = num(key, v)?,
            "sampling.ratio" => {
                self.ratio = Ratio::parse(v).map_err(|e| CliError::Config(e.to_string()))?
            }
            "sampling.total_cap" => {
                self.total_cap = match v {
                    "" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "sampling.seed" => self.sampling_seed = num(key, v)?,
            "sampling.per_image" => self.per_image = boolean(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.iterations" => self.train.iterations = num(key, v)?,
            "train.beta" => self.train.beta = num(key, v)?,
            "train.dropout" => self.train.dropout_p = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "inference.norm_mode" => {
                self.norm_mode = NormMode::parse(v).map_err(|e| CliError::Config(e.to_string()))?
            }
            "inference.threshold" => self.threshold = num(key, v)?,
            "inference.batch" => self.inference_batch = num(key, v)?,
            "evaluation.tolerance" => self.tolerance = num(key, v)?,
            "evaluation.metric" => {
                self.metric = Metric::parse(v).map_err(|e| CliError::Config(e.to_string()))?
            }
            "evaluation.aggregation" => {
                self.aggregation =
                    Aggregation::parse(v).map_err(|e| CliError::Config(e.to_string()))?
            }
            "output.dir" => self.out = PathBuf::from(v),
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected key = value", i + 1))
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: crackseg::Error| CliError::Config(e.to_string());
        PatchGeometry::new(self.half_width, self.structure).map_err(cfg)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.train.dropout_p) {
            return Err(CliError::Config(format!(
                "dropout {} outside [0, 1)",
                self.train.dropout_p
            )));
        }
        if self.train.batch_size == 0 || self.inference_batch == 0 {
            return Err(CliError::Config("batch sizes must be ≥ 1".into()));
        }
        if self.synthetic_channels != 1 && self.synthetic_channels != 3 {
            return Err(CliError::Config("synthetic_channels must be 1 or 3".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry::new(self.half_width, self.structure).expect("validated")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            geometry: self.geometry(),
            sampling: SamplingPolicy {
                ratio: self.ratio,
                total_cap: self.total_cap,
                seed: self.sampling_seed,
                per_image: self.per_image,
            },
            train: self.train.clone(),
            norm_mode: self.norm_mode,
            threshold: self.threshold,
            tolerance: Tolerance {
                distance: self.tolerance,
                metric: self.metric,
            },
            aggregation: self.aggregation,
            inference_batch: self.inference_batch,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.synthetic_size,
            width: self.synthetic_size,
            channels: self.synthetic_channels,
            ..SyntheticSpec::default()
        }
    }

    /// Every setting with defaults expanded, in the file format.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        let mut out = String::new();
        let t = &self.train;
        let _ = write!(
            out,
            "[data]\ndataset = {}\nmanifest = {}\nsynthetic = {}\nsynthetic_train = {}\nsynthetic_test = {}\nsynthetic_size = {}\nsynthetic_channels = {}\nsynthetic_seed = {}\n\n",
            path(&self.data),
            path(&self.manifest),
            self.synthetic,
            self.synthetic_train,
            self.synthetic_test,
            self.synthetic_size,
            self.synthetic_channels,
            self.synthetic_seed
        );
        let _ = write!(
            out,
            "[geometry]\nh = {}\ns = {}\n\n",
            self.half_width, self.structure
        );
        let _ = write!(
            out,
            "[sampling]\nratio = {}\ntotal_cap = {}\nseed = {}\nper_image = {}\n\n",
            self.ratio,
            self.total_cap.map_or("none".to_string(), |c| c.to_string()),
            self.sampling_seed,
            self.per_image
        );
        let _ = write!(
            out,
            "[train]\nlearning_rate = {}\nbatch_size = {}\niterations = {}\nbeta = {}\ndropout = {}\nseed = {}\ncheckpoint_every = {}\n\n",
            t.learning_rate, t.batch_size, t.iterations, t.beta, t.dropout_p, t.seed, t.checkpoint_every
        );
        let _ = write!(
            out,
            "[inference]\nnorm_mode = {}\nthreshold = {}\nbatch = {}\n\n",
            self.norm_mode, self.threshold, self.inference_batch
        );
        let _ = write!(
            out,
            "[evaluation]\ntolerance = {}\nmetric = {}\naggregation = {}\n\n",
            self.tolerance, self.metric, self.aggregation
        );
        let _ = writeln!(out, "[output]\ndir = {}", self.out.display());
        out
    }
}
