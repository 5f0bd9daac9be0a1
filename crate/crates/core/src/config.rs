//! Experiment configuration: run mode, optimization settings, data source,
//! and a flat `key = value` file format with strict unknown-key handling.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{default_table, SyntheticConfig};
use crate::error::{DllError, Result};
use crate::kdl::KDLConfig;
use crate::params::OptimizerMode;
use crate::pdl::PDLConfig;

/// Which parts of the method a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Joint encoder and head, plain multi-label loss.
    Baseline,
    /// Decoupled branches with the adversarial probes and calibration.
    Pdl,
    /// Joint encoder with the correlation-matrix losses.
    Kdl,
    /// Decoupled branches plus the correlation-matrix losses.
    Dll,
}

impl FromStr for Mode {
    type Err = DllError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "pdl" => Ok(Mode::Pdl),
            "kdl" => Ok(Mode::Kdl),
            "dll" => Ok(Mode::Dll),
            other => Err(DllError::InvalidConfig(format!(
                "unknown mode '{other}' (expected baseline, pdl, kdl, or dll)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Pdl => "pdl",
            Mode::Kdl => "kdl",
            Mode::Dll => "dll",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files {
        train: PathBuf,
        test: PathBuf,
        vocab: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerMode,
    pub lr: f64,
    /// Branch feature width.
    pub hidden: usize,
    pub pdl: PDLConfig,
    pub kdl: KDLConfig,
    pub metric_ks: Vec<usize>,
    /// Label-mass share defining the head classes.
    pub head_quantile: f64,
    /// Checkpoint every N epochs; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Dll,
            seed: 0,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerMode::Adam,
            lr: 1e-3,
            hidden: 64,
            pdl: PDLConfig::default(),
            kdl: KDLConfig::default(),
            metric_ks: vec![1, 5, 10],
            head_quantile: 0.8,
            checkpoint_every: 1,
            data: DataSource::Synthetic(
                SyntheticConfig::default_for(8, 6, 30).expect("default table fits"),
            ),
        }
    }
}

const KEYS: &[&str] = &[
    "mode",
    "seed",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "hidden",
    "lambda",
    "eta",
    "mc_steps",
    "alpha0",
    "beta",
    "warmup_epochs",
    "gamma_base",
    "metric_ks",
    "head_quantile",
    "checkpoint_every",
    "data",
    "n_a",
    "n_s",
    "n_p",
    "d",
    "zipf_s",
    "noise_sigma",
    "extra_pattern_prob",
    "n_train",
    "n_test",
    "data_seed",
    "train_path",
    "test_path",
    "vocab_path",
];

impl ExperimentConfig {
    /// Parse the flat `key = value` format: one pair per line, `#` comments,
    /// unknown and repeated keys rejected. Unset keys keep their defaults.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut pairs: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| DllError::Parse {
                path: path.to_string(),
                line: lineno,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key '{key}'")));
            }
            if pairs.insert(key, (lineno, value)).is_some() {
                return Err(err(format!("key '{key}' set twice")));
            }
        }

        let get = |key: &str| pairs.get(key).copied();
        let parse_field = |key: &str, lineno: usize, value: &str, what: &str| DllError::Parse {
            path: path.to_string(),
            line: lineno,
            message: format!("key '{key}': expected {what}, got '{value}'"),
        };
        macro_rules! scalar {
            ($key:literal, $slot:expr, $ty:ty, $what:literal) => {
                if let Some((lineno, value)) = get($key) {
                    $slot = value
                        .parse::<$ty>()
                        .map_err(|_| parse_field($key, lineno, value, $what))?;
                }
            };
        }

        let mut cfg = ExperimentConfig::default();
        scalar!("mode", cfg.mode, Mode, "baseline, pdl, kdl, or dll");
        scalar!("seed", cfg.seed, u64, "an unsigned integer");
        scalar!("epochs", cfg.epochs, usize, "an unsigned integer");
        scalar!("batch_size", cfg.batch_size, usize, "an unsigned integer");
        scalar!("optimizer", cfg.optimizer, OptimizerMode, "sgd or adam");
        scalar!("lr", cfg.lr, f64, "a number");
        scalar!("hidden", cfg.hidden, usize, "an unsigned integer");
        scalar!("lambda", cfg.pdl.lambda, f64, "a number");
        scalar!("eta", cfg.pdl.eta, f64, "a number");
        scalar!("mc_steps", cfg.pdl.mc_steps, usize, "an unsigned integer");
        scalar!("alpha0", cfg.kdl.alpha0, f64, "a number");
        scalar!("beta", cfg.kdl.beta, f64, "a number");
        scalar!("warmup_epochs", cfg.kdl.warmup_epochs, usize, "an unsigned integer");
        scalar!("gamma_base", cfg.kdl.gamma_base, f64, "a number");
        scalar!("head_quantile", cfg.head_quantile, f64, "a number");
        scalar!("checkpoint_every", cfg.checkpoint_every, usize, "an unsigned integer");

        if let Some((lineno, value)) = get("metric_ks") {
            let mut ks = Vec::new();
            for part in value.split(',') {
                let k = part.trim().parse::<usize>().map_err(|_| {
                    parse_field("metric_ks", lineno, value, "comma-separated integers")
                })?;
                ks.push(k);
            }
            cfg.metric_ks = ks;
        }

        let source = get("data").map(|(_, v)| v).unwrap_or("synthetic");
        match source {
            "synthetic" => {
                let mut n_a = 8usize;
                let mut n_s = 6usize;
                let mut n_p = 30usize;
                scalar!("n_a", n_a, usize, "an unsigned integer");
                scalar!("n_s", n_s, usize, "an unsigned integer");
                scalar!("n_p", n_p, usize, "an unsigned integer");
                let mut syn = SyntheticConfig::with_table(n_a, n_s, default_table(n_a, n_s, n_p)?);
                scalar!("d", syn.d, usize, "an unsigned integer");
                scalar!("zipf_s", syn.zipf_s, f64, "a number");
                scalar!("noise_sigma", syn.noise_sigma, f64, "a number");
                scalar!("extra_pattern_prob", syn.extra_pattern_prob, f64, "a number");
                scalar!("n_train", syn.n_train, usize, "an unsigned integer");
                scalar!("n_test", syn.n_test, usize, "an unsigned integer");
                scalar!("data_seed", syn.data_seed, u64, "an unsigned integer");
                cfg.data = DataSource::Synthetic(syn);
            }
            "files" => {
                let path_of = |key: &str| -> Result<PathBuf> {
                    match get(key) {
                        Some((_, v)) if !v.is_empty() => Ok(PathBuf::from(v)),
                        _ => Err(DllError::InvalidConfig(format!(
                            "data = files requires '{key}'"
                        ))),
                    }
                };
                cfg.data = DataSource::Files {
                    train: path_of("train_path")?,
                    test: path_of("test_path")?,
                    vocab: path_of("vocab_path")?,
                };
            }
            other => {
                let (lineno, _) = get("data").expect("key present");
                return Err(DllError::Parse {
                    path: path.to_string(),
                    line: lineno,
                    message: format!("key 'data': expected synthetic or files, got '{other}'"),
                });
            }
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(DllError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DllError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(DllError::InvalidConfig("hidden must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DllError::InvalidConfig(format!(
                "lr must be finite and positive, got {}",
                self.lr
            )));
        }
        if self.metric_ks.is_empty() || self.metric_ks.contains(&0) {
            return Err(DllError::InvalidConfig(
                "metric_ks needs at least one k, all at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.head_quantile) {
            return Err(DllError::InvalidConfig(format!(
                "head_quantile must be in [0, 1], got {}",
                self.head_quantile
            )));
        }
        self.pdl.validate()?;
        self.kdl.validate()?;
        if let DataSource::Synthetic(syn) = &self.data {
            syn.validate()?;
        }
        Ok(())
    }

    /// Serialize back to the flat format, every key explicit.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "optimizer = {}", self.optimizer);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "hidden = {}", self.hidden);
        let _ = writeln!(out, "lambda = {}", self.pdl.lambda);
        let _ = writeln!(out, "eta = {}", self.pdl.eta);
        let _ = writeln!(out, "mc_steps = {}", self.pdl.mc_steps);
        let _ = writeln!(out, "alpha0 = {}", self.kdl.alpha0);
        let _ = writeln!(out, "beta = {}", self.kdl.beta);
        let _ = writeln!(out, "warmup_epochs = {}", self.kdl.warmup_epochs);
        let _ = writeln!(out, "gamma_base = {}", self.kdl.gamma_base);
        let ks: Vec<String> = self.metric_ks.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "metric_ks = {}", ks.join(","));
        let _ = writeln!(out, "head_quantile = {}", self.head_quantile);
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        match &self.data {
            DataSource::Synthetic(syn) => {
                let _ = writeln!(out, "data = synthetic");
                let _ = writeln!(out, "n_a = {}", syn.n_a);
                let _ = writeln!(out, "n_s = {}", syn.n_s);
                let _ = writeln!(out, "n_p = {}", syn.n_p());
                let _ = writeln!(out, "d = {}", syn.d);
                let _ = writeln!(out, "zipf_s = {}", syn.zipf_s);
                let _ = writeln!(out, "noise_sigma = {}", syn.noise_sigma);
                let _ = writeln!(out, "extra_pattern_prob = {}", syn.extra_pattern_prob);
                let _ = writeln!(out, "n_train = {}", syn.n_train);
                let _ = writeln!(out, "n_test = {}", syn.n_test);
                let _ = writeln!(out, "data_seed = {}", syn.data_seed);
            }
            DataSource::Files { train, test, vocab } => {
                let _ = writeln!(out, "data = files");
                let _ = writeln!(out, "train_path = {}", train.display());
                let _ = writeln!(out, "test_path = {}", test.display());
                let _ = writeln!(out, "vocab_path = {}", vocab.display());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_file_format() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_file_string();
        let parsed = ExperimentConfig::parse(&text, "cfg").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn empty_text_is_all_defaults() {
        let cfg = ExperimentConfig::parse("", "cfg").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_apply_and_comments_are_ignored() {
        let text = "\
# experiment
mode = pdl   # decoupled only
seed = 7
lambda = 0.5
metric_ks = 1, 3
n_p = 8
n_a = 4
n_s = 3
";
        let cfg = ExperimentConfig::parse(text, "cfg").unwrap();
        assert_eq!(cfg.mode, Mode::Pdl);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pdl.lambda, 0.5);
        assert_eq!(cfg.metric_ks, vec![1, 3]);
        match &cfg.data {
            DataSource::Synthetic(syn) => {
                assert_eq!(syn.n_p(), 8);
                assert_eq!(syn.n_a, 4);
            }
            _ => panic!("expected synthetic"),
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_name_the_line() {
        let err = ExperimentConfig::parse("seed = 1\nlearning_rate = 0.1\n", "exp.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exp.cfg:2"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");

        let err = ExperimentConfig::parse("seed = 1\nseed = 2\n", "exp.cfg").unwrap_err();
        assert!(err.to_string().contains("exp.cfg:2"));
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn bad_values_name_key_and_expectation() {
        let err = ExperimentConfig::parse("epochs = soon\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochs") && msg.contains("unsigned integer"), "{msg}");

        let err = ExperimentConfig::parse("mode = full\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("baseline, pdl, kdl, or dll") && msg.contains("'full'"), "{msg}");

        let err = ExperimentConfig::parse("data = stream\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("synthetic or files"));
    }

    #[test]
    fn files_source_requires_all_three_paths() {
        let err =
            ExperimentConfig::parse("data = files\ntrain_path = a\ntest_path = b\n", "cfg")
                .unwrap_err();
        assert!(err.to_string().contains("vocab_path"));

        let cfg = ExperimentConfig::parse(
            "data = files\ntrain_path = a\ntest_path = b\nvocab_path = c\n",
            "cfg",
        )
        .unwrap();
        assert!(matches!(cfg.data, DataSource::Files { .. }));
    }

    #[test]
    fn validation_rejects_out_of_range_settings() {
        assert!(ExperimentConfig::parse("eta = 1.5\n", "cfg").is_err());
        assert!(ExperimentConfig::parse("lr = 0\n", "cfg").is_err());
        assert!(ExperimentConfig::parse("metric_ks = 0,5\n", "cfg").is_err());
        assert!(ExperimentConfig::parse("head_quantile = 1.2\n", "cfg").is_err());
        assert!(ExperimentConfig::parse("epochs = 0\n", "cfg").is_err());
        assert!(ExperimentConfig::parse("extra_pattern_prob = -0.1\n", "cfg").is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in [Mode::Baseline, Mode::Pdl, Mode::Kdl, Mode::Dll] {
            assert_eq!(mode.to_string().parse::<Mode>().unwrap(), mode);
        }
    }
}
