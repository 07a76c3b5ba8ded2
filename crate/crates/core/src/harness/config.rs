//! Experiment configuration: flat `key = value` lines, `#` comments, unknown
//! keys rejected.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, UcdError};
use crate::losses::{LossWeights, PseudoThresholds};
use crate::mining::{MiningOptions, DEFAULT_CHUNK_ROWS};
use crate::model::Arch;
use crate::tasks::{IncrementalSchedule, ShapesParams, SplitMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ft,
    Joint,
    Mib,
    Plop,
    MibUcd,
    PlopUcd,
    CdOnly,
    UcdOnly,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ft,
        Method::Joint,
        Method::Mib,
        Method::Plop,
        Method::MibUcd,
        Method::PlopUcd,
        Method::CdOnly,
        Method::UcdOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Joint => "joint",
            Method::Mib => "mib",
            Method::Plop => "plop",
            Method::MibUcd => "mib_ucd",
            Method::PlopUcd => "plop_ucd",
            Method::CdOnly => "cd_only",
            Method::UcdOnly => "ucd_only",
        }
    }

    /// Uses a contrastive distillation term from step 2 on.
    pub fn uses_contrast(&self) -> bool {
        matches!(
            self,
            Method::MibUcd | Method::PlopUcd | Method::CdOnly | Method::UcdOnly
        )
    }

    /// Contrast weighted by same-class probabilities (vs. plain `L_cd`).
    pub fn uses_uncertainty(&self) -> bool {
        matches!(self, Method::MibUcd | Method::PlopUcd | Method::UcdOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = UcdError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UcdError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_images: usize,
    pub n_test_images: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub noise_std: f64,
    /// Classes per step, e.g. `"3-1"`.
    pub schedule: String,
    pub mode: SplitMode,
    pub method: Method,
    pub weights: LossWeights,
    pub arch: Arch,
    pub stride: usize,
    pub lr_first: f64,
    pub lr_later: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output: PathBuf,
    pub chunk_rows: usize,
    pub exclude_background: bool,
    pub include_old_model_old_classes: bool,
    pub pod_scales: Vec<usize>,
    pub plop_thresholds: PseudoThresholds,
    pub ignore_background: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 64,
            n_test_images: 32,
            height: 16,
            width: 16,
            n_classes: 4,
            noise_std: ShapesParams::default().noise_std,
            schedule: "3-1".into(),
            mode: SplitMode::Overlapped,
            method: Method::MibUcd,
            weights: LossWeights::default(),
            arch: Arch::default(),
            stride: 4,
            lr_first: 1e-2,
            lr_later: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            output: PathBuf::from("runs/default"),
            chunk_rows: DEFAULT_CHUNK_ROWS,
            exclude_background: true,
            include_old_model_old_classes: true,
            pod_scales: vec![1, 2],
            plop_thresholds: PseudoThresholds::uniform(0.0),
            ignore_background: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UcdError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(UcdError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UcdError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UcdError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(UcdError::Config(format!("duplicate key {key}")));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_images" => self.n_images = parse(key, v)?,
            "n_test_images" => self.n_test_images = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "schedule" => self.schedule = v.to_string(),
            "mode" => self.mode = v.parse()?,
            "method" => self.method = v.parse()?,
            "tau" => self.weights.tau = parse(key, v)?,
            "lambda_ucd" => self.weights.lambda_ucd = parse(key, v)?,
            "lambda_kd" => self.weights.lambda_kd = parse(key, v)?,
            "lambda_pod" => self.weights.lambda_pod = parse(key, v)?,
            "patch_size" => self.arch.patch_size = parse(key, v)?,
            "hidden_dim" => self.arch.hidden_dim = parse(key, v)?,
            "feature_dim" => self.arch.feature_dim = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "lr_first" => self.lr_first = parse(key, v)?,
            "lr_later" => self.lr_later = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "chunk_rows" => self.chunk_rows = parse(key, v)?,
            "exclude_background" => self.exclude_background = parse_bool(key, v)?,
            "include_old_model_old_classes" => {
                self.include_old_model_old_classes = parse_bool(key, v)?
            }
            "pod_scales" => {
                self.pod_scales = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "plop_threshold" => self.plop_thresholds.default = parse(key, v)?,
            "ignore_background" => self.ignore_background = parse_bool(key, v)?,
            other => {
                if let Some(class) = other.strip_prefix("plop_threshold.") {
                    let class: usize = parse(key, class)?;
                    self.plop_thresholds.per_class.insert(class, parse(key, v)?);
                } else {
                    return Err(UcdError::Config(format!("unknown key {other:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights
            .validate()
            .map_err(|e| UcdError::Config(e.to_string()))?;
        let bad = |msg: &str| Err(UcdError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.chunk_rows == 0 {
            return bad("chunk_rows must be at least 1");
        }
        if self.n_images == 0 || self.n_test_images == 0 {
            return bad("image counts must be positive");
        }
        if self.stride == 0 || !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return bad("stride must divide height and width");
        }
        if self.pod_scales.is_empty() || self.pod_scales.contains(&0) {
            return bad("pod_scales must be positive integers");
        }
        let (h, w) = (self.height / self.stride, self.width / self.stride);
        if self.pod_scales.iter().any(|&s| s > h || s > w) {
            return bad("pod scale exceeds the feature grid");
        }
        for lr in [self.lr_first, self.lr_later] {
            if !(lr >= 0.0) {
                return bad("learning rates must be non-negative");
            }
        }
        let schedule = self.build_schedule()?;
        schedule
            .validate_against(self.n_classes)
            .map_err(|e| UcdError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<IncrementalSchedule> {
        IncrementalSchedule::from_counts(&self.schedule, self.mode)
    }

    pub fn mining_options(&self) -> MiningOptions {
        MiningOptions {
            exclude_background: self.exclude_background,
            include_old_model_old_classes: self.include_old_model_old_classes,
        }
    }

    /// Renders every key, so the output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_images", self.n_images.to_string());
        kv("n_test_images", self.n_test_images.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("schedule", self.schedule.clone());
        kv("mode", self.mode.to_string());
        kv("method", self.method.to_string());
        kv("tau", self.weights.tau.to_string());
        kv("lambda_ucd", self.weights.lambda_ucd.to_string());
        kv("lambda_kd", self.weights.lambda_kd.to_string());
        kv("lambda_pod", self.weights.lambda_pod.to_string());
        kv("patch_size", self.arch.patch_size.to_string());
        kv("hidden_dim", self.arch.hidden_dim.to_string());
        kv("feature_dim", self.arch.feature_dim.to_string());
        kv("stride", self.stride.to_string());
        kv("lr_first", self.lr_first.to_string());
        kv("lr_later", self.lr_later.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("output", self.output.display().to_string());
        kv("chunk_rows", self.chunk_rows.to_string());
        kv("exclude_background", self.exclude_background.to_string());
        kv(
            "include_old_model_old_classes",
            self.include_old_model_old_classes.to_string(),
        );
        kv(
            "pod_scales",
            self.pod_scales
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("plop_threshold", self.plop_thresholds.default.to_string());
        for (c, t) in &self.plop_thresholds.per_class {
            kv(&format!("plop_threshold.{c}"), t.to_string());
        }
        kv("ignore_background", self.ignore_background.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_weights() {
        let c = ExperimentConfig::default();
        assert_eq!(c.weights.tau, 0.07);
        assert_eq!(c.weights.lambda_ucd, 0.01);
        assert_eq!(c.weights.lambda_pod, 0.01);
        assert_eq!(c.weights.lambda_kd, 10.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ExperimentConfig::parse(
            "# comment\nmethod = plop\nseed=3\nplop_threshold.2 = 0.5 # inline\npod_scales = 1,2\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::Plop);
        assert_eq!(c.seed, 3);
        assert_eq!(c.plop_thresholds.threshold(2), 0.5);
        assert_eq!(c.plop_thresholds.threshold(1), 0.0);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("batch_size = 0").is_err());
        assert!(ExperimentConfig::parse("tau = 0").is_err());
        assert!(ExperimentConfig::parse("method = ewc").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("schedule = 3-2").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ExperimentConfig::default();
        c.plop_thresholds.per_class.insert(3, 0.25);
        c.method = Method::UcdOnly;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
