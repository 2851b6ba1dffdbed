//! Run configuration: flat `key=value` files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anomaly_ae::data::{Augment, SplitFractions};
use anomaly_ae::models::{ModelConfig, ModelKind, DESK_SIZE, FULL_SIZE};

/// Keys taking a value, shared by config files and `--flags`.
pub const VALUE_KEYS: &[(&str, &str)] = &[
    ("model", "cae, cvae or vqvae"),
    ("data", "dataset root with healthy/ and diseased/"),
    ("size", "input extent: 256, or 32 for desk mode"),
    ("epochs", "epoch budget (default per model: 200/100/50)"),
    ("time-budget", "wall-clock training budget in seconds"),
    ("batch-size", "mini-batch size"),
    ("lr", "Adam learning rate"),
    ("beta", "VQ-VAE commitment weight"),
    ("codebook-size", "VQ-VAE codebook size K"),
    ("seed", "seed for splitting, initialization and shuffling"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint file to write (train) or read"),
    ("image", "image to localize"),
    (
        "threshold-percentile",
        "percentile of healthy validation scores used as threshold",
    ),
    ("contrast-percentile", "clip percentile for --high-contrast"),
    (
        "repeat",
        "training repeats per model in compare (median time)",
    ),
    ("mode", "compare mode: epochs or time-equivalent"),
    (
        "augment",
        "comma-separated flip_h, flip_v, rot90, rot180, rot270",
    ),
    ("val-fraction", "share of healthy images for validation"),
    ("test-fraction", "share of healthy images for test"),
];

/// Boolean switches.
pub const FLAG_KEYS: &[(&str, &str)] = &[("high-contrast", "also write the high-contrast heatmap")];

/// A bad configuration value; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

fn canonical(key: &str) -> String {
    key.trim().replace('_', "-")
}

fn known(key: &str) -> bool {
    VALUE_KEYS.iter().chain(FLAG_KEYS).any(|(k, _)| *k == key)
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config_text(
    text: &str,
    origin: &Path,
) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            err(format!(
                "{}:{}: expected key=value, got {line:?}",
                origin.display(),
                i + 1
            ))
        })?;
        let key = canonical(k);
        if !known(&key) {
            return Err(err(format!(
                "{}:{}: unknown key {key:?}",
                origin.display(),
                i + 1
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareMode {
    Epochs,
    TimeEquivalent,
}

impl FromStr for CompareMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "epochs" => Ok(CompareMode::Epochs),
            "time-equivalent" | "time_equivalent" | "te" => Ok(CompareMode::TimeEquivalent),
            _ => Err(err(format!(
                "mode must be epochs or time-equivalent, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub data: Option<PathBuf>,
    pub size: usize,
    pub epochs: Option<usize>,
    pub time_budget: Option<f64>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub codebook_size: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub threshold_percentile: f64,
    pub contrast_percentile: f64,
    pub high_contrast: bool,
    pub repeat: usize,
    pub mode: CompareMode,
    pub augment: Vec<Augment>,
    pub fractions: SplitFractions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cae,
            data: None,
            size: FULL_SIZE,
            epochs: None,
            time_budget: None,
            batch_size: 32,
            lr: 1e-3,
            beta: 0.25,
            codebook_size: None,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            image: None,
            threshold_percentile: 95.0,
            contrast_percentile: 99.0,
            high_contrast: false,
            repeat: 1,
            mode: CompareMode::Epochs,
            augment: Vec::new(),
            fractions: SplitFractions::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| err(format!("invalid value {v:?} for {key}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(err(format!(
            "invalid value {v:?} for {key}: expected true or false"
        ))),
    }
}

impl RunConfig {
    /// Builds and validates a config from merged `key → value` settings.
    pub fn from_settings(settings: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        for (key, v) in settings {
            match key.as_str() {
                "model" => {
                    c.model = v.parse().map_err(|e| err(format!("model: {e}")))?;
                }
                "data" => c.data = Some(PathBuf::from(v)),
                "size" => c.size = parse(key, v)?,
                "epochs" => c.epochs = Some(parse(key, v)?),
                "time-budget" => c.time_budget = Some(parse(key, v)?),
                "batch-size" => c.batch_size = parse(key, v)?,
                "lr" => c.lr = parse(key, v)?,
                "beta" => c.beta = parse(key, v)?,
                "codebook-size" => c.codebook_size = Some(parse(key, v)?),
                "seed" => c.seed = parse(key, v)?,
                "out" => c.out = PathBuf::from(v),
                "checkpoint" => c.checkpoint = Some(PathBuf::from(v)),
                "image" => c.image = Some(PathBuf::from(v)),
                "threshold-percentile" => c.threshold_percentile = parse(key, v)?,
                "contrast-percentile" => c.contrast_percentile = parse(key, v)?,
                "high-contrast" => c.high_contrast = parse_bool(key, v)?,
                "repeat" => c.repeat = parse(key, v)?,
                "mode" => c.mode = v.parse()?,
                "augment" => {
                    c.augment = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse::<Augment>()
                                .map_err(|e| err(format!("augment: {e}")))
                        })
                        .collect::<Result<_, _>>()?;
                }
                "val-fraction" => c.fractions.validation = parse(key, v)?,
                "test-fraction" => c.fractions.test = parse(key, v)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.size != FULL_SIZE && self.size != DESK_SIZE {
            return Err(err(format!(
                "size must be {FULL_SIZE} or {DESK_SIZE}, got {}",
                self.size
            )));
        }
        if self.epochs.is_some() && self.time_budget.is_some() {
            return Err(err("epochs and time-budget are mutually exclusive"));
        }
        if self.epochs == Some(0) {
            return Err(err("epochs must be > 0"));
        }
        if let Some(t) = self.time_budget {
            if !(t.is_finite() && t > 0.0) {
                return Err(err(format!("time-budget must be > 0 seconds, got {t}")));
            }
        }
        if self.batch_size == 0 {
            return Err(err("batch-size must be > 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(err(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(err(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.codebook_size == Some(0) {
            return Err(err("codebook-size must be > 0"));
        }
        let p = self.threshold_percentile;
        if !(p > 0.0 && p <= 100.0) {
            return Err(err(format!(
                "threshold-percentile must be in (0,100], got {p}"
            )));
        }
        let p = self.contrast_percentile;
        if !(p > 50.0 && p < 100.0) {
            return Err(err(format!(
                "contrast-percentile must be in (50,100), got {p}"
            )));
        }
        if self.repeat == 0 {
            return Err(err("repeat must be ≥ 1"));
        }
        self.fractions.validate().map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Model hyper-parameters for `kind` under this run.
    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let mut m = ModelConfig::new(kind, self.size);
        if let Some(e) = self.epochs {
            m.epochs = e;
        }
        m.batch_size = self.batch_size;
        m.learning_rate = self.lr;
        m.beta = self.beta;
        if let Some(k) = self.codebook_size {
            m.codebook_size = k;
        }
        m.seed = self.seed;
        m
    }

    pub fn require_data(&self) -> Result<&Path, ConfigError> {
        self.data
            .as_deref()
            .ok_or_else(|| err("this command needs --data DIR"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.lae"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn file_parsing() {
        let text = "# run\nmodel = vqvae\nbatch_size=8  # small\n\nsize=32\n";
        let s = parse_config_text(text, Path::new("a.cfg")).unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        assert_eq!(c.model, ModelKind::Vqvae);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.size, 32);
    }

    #[test]
    fn bad_lines_are_named() {
        let e = parse_config_text("model cae", Path::new("x.cfg")).unwrap_err();
        assert!(e.0.contains("x.cfg:1"));
        let e = parse_config_text("colour=red", Path::new("x.cfg")).unwrap_err();
        assert!(e.0.contains("colour"));
    }

    #[test]
    fn invalid_values() {
        for pairs in [
            vec![("model", "gan")],
            vec![("size", "64")],
            vec![("epochs", "3"), ("time-budget", "2")],
            vec![("lr", "-1")],
            vec![("contrast-percentile", "50")],
            vec![("augment", "shear")],
            vec![("mode", "fast")],
        ] {
            assert!(
                RunConfig::from_settings(&settings(&pairs)).is_err(),
                "{pairs:?}"
            );
        }
    }

    #[test]
    fn model_config_overrides() {
        let c = RunConfig::from_settings(&settings(&[
            ("size", "32"),
            ("epochs", "3"),
            ("codebook-size", "64"),
            ("augment", "flip_h, rot90"),
        ]))
        .unwrap();
        let m = c.model_config(ModelKind::Vqvae);
        assert_eq!((m.epochs, m.codebook_size, m.image_size), (3, 64, 32));
        assert_eq!(c.augment, vec![Augment::FlipH, Augment::Rot90]);
        let d = RunConfig::default().model_config(ModelKind::Cvae);
        assert_eq!(d.epochs, 100);
    }
}
