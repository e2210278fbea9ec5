//! Flat `key = value` configuration shared by every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use si_core::importance::Metric;
use si_core::induction::{MonotoneMap, NormKind, SiConfig, Stage};
use si_core::masking::SparsityPattern;

pub const SCHEMA: &str = "\
CONFIG FILE
  One `key = value` per line; `#` starts a comment. Flags override the file.

  model = <path>                  TensorFile model (default: toy model)
  toy = depth,d_model,d_hidden    toy model shape, seeded by `seed` [2,32,64]
  calib = <path>                  TensorFile holding a `calib` tensor (d_in x n)
  calib_synth = <n>               synthetic calibration columns [128]
  pattern = <rate>|<n>:<m>        sparsity pattern [0.5]
  metric = magnitude|wanda|wanda-fast                          [wanda-fast]
  seed = <u64>                                                 [0]
  out_dir = <path>                                             [out]
  si.stage = off|distribution|feature|both   [prune: off, otherwise distribution]
  si.lr = <f64>                                                [0.5]
  si.epochs = <n>                                              [4]
  si.batch_size = <n>                                          [32]
  si.mask_refresh_period = <n>    0 keeps masks frozen         [8]
  si.optimize_delta = true|false                               [true]
  si.optimize_attention = true|false                           [true]
  si.materialize_bias = true|false                             [false]
  si.dist_weight = <f64>          per-layer term in `both`     [1]
  si.lambda = <f64>                                            [0.1]
  si.alpha = <f64>                                             [0.01]
  si.p = <f64 >= 1>|spectral                                   [2]
  si.g = identity|affine:a,b                                   [identity]
  si.eps_init = <f64>                                          [0.0001]
  eval.bins = <n>                                              [32]
  bench.d_in = <n>                                             [2048]
  bench.n_samples = <n>                                        [128]
  bench.iters = <n>                                            [128]

ENVIRONMENT
  SI_THREADS = <n>                caps worker threads";

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyShape {
    pub depth: usize,
    pub d_model: usize,
    pub d_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: Option<PathBuf>,
    pub toy: ToyShape,
    pub calib: Option<PathBuf>,
    pub calib_synth: usize,
    pub pattern: SparsityPattern,
    pub metric: Metric,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `None` until set; `Some(None)` means SI is off.
    pub stage: Option<Option<Stage>>,
    pub si: SiConfig,
    pub bins: usize,
    pub bench_d_in: usize,
    pub bench_n_samples: usize,
    pub bench_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: None,
            toy: ToyShape {
                depth: 2,
                d_model: 32,
                d_hidden: 64,
            },
            calib: None,
            calib_synth: 128,
            pattern: SparsityPattern::Unstructured { rate: 0.5 },
            metric: Metric::WandaFast,
            seed: 0,
            out_dir: PathBuf::from("out"),
            stage: None,
            si: SiConfig::default(),
            bins: 32,
            bench_d_in: 2048,
            bench_n_samples: 128,
            bench_iters: 128,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(key, format!("cannot parse `{value}`: {e}")))
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    match parse::<usize>(key, value)? {
        0 => Err(bad(key, "must be positive")),
        n => Ok(n),
    }
}

fn finite(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, format!("must be finite, got `{value}`")))
    }
}

fn parse_toy(key: &str, value: &str) -> Result<ToyShape, ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [depth, d_model, d_hidden] = parts[..] else {
        return Err(bad(key, format!("expected depth,d_model,d_hidden, got `{value}`")));
    };
    Ok(ToyShape {
        depth: positive(key, depth)?,
        d_model: positive(key, d_model)?,
        d_hidden: positive(key, d_hidden)?,
    })
}

fn parse_g(key: &str, value: &str) -> Result<MonotoneMap, ConfigError> {
    if value == "identity" {
        return Ok(MonotoneMap::Identity);
    }
    let Some(rest) = value.strip_prefix("affine:") else {
        return Err(bad(key, format!("expected identity or affine:a,b, got `{value}`")));
    };
    let Some((a, b)) = rest.split_once(',') else {
        return Err(bad(key, format!("expected affine:a,b, got `{value}`")));
    };
    let a = finite(key, a.trim())?;
    if a <= 0.0 {
        return Err(bad(key, "affine slope must be positive"));
    }
    Ok(MonotoneMap::Affine {
        a,
        b: finite(key, b.trim())?,
    })
}

impl PipelineConfig {
    /// Applies one setting; the error names `key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let si = &mut self.si;
        match key {
            "model" => self.model = Some(PathBuf::from(value)),
            "toy" => self.toy = parse_toy(key, value)?,
            "calib" => self.calib = Some(PathBuf::from(value)),
            "calib_synth" => self.calib_synth = positive(key, value)?,
            "pattern" => self.pattern = parse(key, value)?,
            "metric" => self.metric = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "si.stage" => {
                self.stage = Some(if value == "off" { None } else { Some(parse(key, value)?) })
            }
            "si.lr" => si.lr = finite(key, value)?,
            "si.epochs" => si.epochs = parse(key, value)?,
            "si.batch_size" => si.batch_size = positive(key, value)?,
            "si.mask_refresh_period" => si.mask_refresh_period = parse(key, value)?,
            "si.optimize_delta" => si.optimize_shift = parse(key, value)?,
            "si.optimize_attention" => si.optimize_attention = parse(key, value)?,
            "si.materialize_bias" => si.materialize_bias = parse(key, value)?,
            "si.dist_weight" => si.dist_weight = finite(key, value)?,
            "si.lambda" => si.feature.lambda = finite(key, value)?,
            "si.alpha" => si.feature.alpha = finite(key, value)?,
            "si.p" => {
                si.feature.norm = if value == "spectral" {
                    NormKind::Spectral
                } else {
                    NormKind::Entrywise(finite(key, value)?)
                }
            }
            "si.g" => si.feature.g = parse_g(key, value)?,
            "si.eps_init" => si.feature.eps_init = finite(key, value)?,
            "eval.bins" => self.bins = positive(key, value)?,
            "bench.d_in" => self.bench_d_in = positive(key, value)?,
            "bench.n_samples" => self.bench_n_samples = positive(key, value)?,
            "bench.iters" => self.bench_iters = positive(key, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        if key.starts_with("si.") && key != "si.stage" {
            self.si
                .validate()
                .map_err(|e| bad(key, e.to_string()))?;
        }
        Ok(())
    }

    /// Applies every line of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(&format!("line {}", no + 1), format!("expected key = value, got `{line}`")));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// The SI stage in effect, with `fallback` when none was configured.
    pub fn stage_or(&self, fallback: Option<Stage>) -> Option<Stage> {
        self.stage.unwrap_or(fallback)
    }
}
