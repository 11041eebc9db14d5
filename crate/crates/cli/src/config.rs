//! `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment. Lists are comma separated and may
//! be wrapped in brackets. Later assignments (and `--set` overrides, applied
//! after the file) win. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use dgcrf::inference::HqsSchedule;
use dgcrf::train::{InitMode, TrainConfig};
use dgcrf::SoftmaxVariant;

use crate::error::{CliError, CliResult};

pub const KEYS: &[&str] = &[
    "d",
    "K",
    "T",
    "betaMultipliers",
    "sigma255List",
    "cascade",
    "shareBank",
    "shareBias",
    "softmax",
    "lbfgsMemory",
    "maxIters",
    "c1",
    "c2",
    "gradTol",
    "relTol",
    "seed",
    "cropSize",
    "quantizeNoise",
    "init",
    "initScale",
    "emIters",
    "gmmSamples",
    "preflight",
    "train-dir",
    "test-dir",
    "model",
    "out-dir",
    "evalSigmas",
    "evalSeed",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub eval_sigmas: Option<Vec<f64>>,
    pub eval_seed: u64,
    init_scale: f64,
    init_random: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            train_dir: None,
            test_dir: None,
            model: None,
            out_dir: None,
            eval_sigmas: None,
            eval_seed: 0,
            init_scale: 0.1,
            init_random: false,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("{key}: cannot parse {value:?} as {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> CliResult<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

pub fn parse_list(key: &str, value: &str) -> CliResult<Vec<f64>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| parse_num(key, s.trim(), "a number"))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.train;
        match key {
            "d" => t.d = parse_num(key, value, "an integer")?,
            "K" => t.k = parse_num(key, value, "an integer")?,
            "T" => t.t = parse_num(key, value, "an integer")?,
            "betaMultipliers" => {
                t.beta_multipliers =
                    HqsSchedule::new(parse_list(key, value)?).map_err(|e| CliError::Config(format!("{key}: {e}")))?
            }
            "sigma255List" => t.sigma255_list = parse_list(key, value)?,
            "cascade" => t.cascade = parse_bool(key, value)?,
            "shareBank" => t.share_bank = parse_bool(key, value)?,
            "shareBias" => t.share_bias = parse_bool(key, value)?,
            "softmax" => {
                t.softmax = match value {
                    "exp" | "exponential" => SoftmaxVariant::Exponential,
                    "plain" => SoftmaxVariant::Plain,
                    _ => return Err(bad(key, value, "exp or plain")),
                }
            }
            "lbfgsMemory" => t.lbfgs_memory = parse_num(key, value, "an integer")?,
            "maxIters" => t.max_iters = parse_num(key, value, "an integer")?,
            "c1" => t.c1 = parse_num(key, value, "a number")?,
            "c2" => t.c2 = parse_num(key, value, "a number")?,
            "gradTol" => t.grad_tol = parse_num(key, value, "a number")?,
            "relTol" => t.rel_tol = parse_num(key, value, "a number")?,
            "seed" => t.seed = parse_num(key, value, "an integer")?,
            "cropSize" => t.crop_size = parse_num(key, value, "an integer")?,
            "quantizeNoise" => t.quantize_noise = parse_bool(key, value)?,
            "init" => {
                self.init_random = match value {
                    "gmm" => false,
                    "random" => true,
                    _ => return Err(bad(key, value, "gmm or random")),
                }
            }
            "initScale" => self.init_scale = parse_num(key, value, "a number")?,
            "emIters" => t.em_iters = parse_num(key, value, "an integer")?,
            "gmmSamples" => t.gmm_samples = parse_num(key, value, "an integer")?,
            "preflight" => t.preflight = parse_bool(key, value)?,
            "train-dir" => self.train_dir = Some(PathBuf::from(value)),
            "test-dir" => self.test_dir = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "out-dir" => self.out_dir = Some(PathBuf::from(value)),
            "evalSigmas" => self.eval_sigmas = Some(parse_list(key, value)?),
            "evalSeed" => self.eval_seed = parse_num(key, value, "an integer")?,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown key {key:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        self.train.init = if self.init_random {
            InitMode::Random { scale: self.init_scale }
        } else {
            InitMode::Gmm
        };
        Ok(())
    }

    /// Applies every assignment in `text`. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    /// `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

fn strip(e: CliError) -> String {
    match e {
        CliError::Config(m) => m,
        other => other.to_string(),
    }
}
