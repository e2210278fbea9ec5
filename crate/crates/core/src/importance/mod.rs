//! Per-weight importance scores.
//!
//! * magnitude: `|W|`
//! * activation-aware: `|W| ∘ sqrt(diag(H))`, where `diag(H)` is the
//!   diagonal of the empirical input second moment `E[x x^T]`
//! * fast refresh: when inputs are rescaled per channel by `s`, the cached
//!   diagonal updates as `s^2 ∘ diag(H)` in O(d_in), with no pass over the
//!   calibration data.

mod bench;

use std::fmt;
use std::str::FromStr;

pub use bench::{benchmark_refresh, classical_refresh, RefreshBenchmark};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{note_pass, Matrix, Vector};

/// Calibration inputs; columns are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    x: Matrix,
}

impl CalibSet {
    pub fn new(x: Matrix) -> Self {
        CalibSet { x }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::Domain("calibration set has no samples".into()))?;
        let d = first.len();
        if columns.iter().any(|c| c.len() != d) {
            return Err(Error::Domain("calibration samples differ in length".into()));
        }
        let data = (0..d)
            .flat_map(|i| columns.iter().map(move |c| c[i]))
            .collect();
        Ok(CalibSet {
            x: Matrix::new(d, columns.len(), data)?,
        })
    }

    /// Seeded synthetic activations: channel `j` is
    /// `mean_j + spread_j * z` with `mean_j ~ N(0, 1)`,
    /// `spread_j` log-uniform in [0.5, 2] and `z ~ N(0, 1)`.
    pub fn synthetic(d_in: usize, n_samples: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || n_samples == 0 {
            return Err(Error::Domain(format!(
                "synthetic calibration needs positive sizes, got {d_in}x{n_samples}"
            )));
        }
        let mut rng = Rng::new(seed ^ 0x5EED_CA11_B0A7_0001);
        let means = rng.normal_vector(d_in);
        let spreads = rng.log_uniform_vector(d_in, 0.5, 2.0);
        let z = rng.normal_matrix(d_in, n_samples);
        let x = Matrix::from_fn(d_in, n_samples, |j, k| means[j] + spreads[j] * z.get(j, k));
        Ok(CalibSet { x })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.cols()
    }
}

/// Diagonal of the empirical input second moment for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDiag {
    pub layer_name: String,
    pub d: Vector,
}

/// `d[j] = (1/n) sum_k x[j,k]^2`.
pub fn hessian_diag(layer_name: &str, calib: &CalibSet) -> Result<HessianDiag> {
    let x = calib.x();
    if x.cols() == 0 {
        return Err(Error::Domain("empty calibration set".into()));
    }
    note_pass();
    let n = x.cols() as f64;
    let d: Vec<f64> = (0..x.rows())
        .map(|j| x.row(j).iter().map(|v| v * v).sum::<f64>() / n)
        .collect();
    Ok(HessianDiag {
        layer_name: layer_name.to_string(),
        d: Vector::new(d)?,
    })
}

/// `d'[j] = s[j]^2 d[j]`; O(d_in).
pub fn fast_refresh(diag: &HessianDiag, s: &[f64]) -> Result<HessianDiag> {
    if s.len() != diag.d.len() {
        return Err(Error::Shape {
            op: "fast_refresh",
            left: (diag.d.len(), 1),
            right: (s.len(), 1),
        });
    }
    if let Some(bad) = s.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("scales must be positive, got {bad}")));
    }
    let d: Vec<f64> = diag.d.iter().zip(s).map(|(d, s)| s * s * d).collect();
    Ok(HessianDiag {
        layer_name: diag.layer_name.clone(),
        d: Vector::new(d)?,
    })
}

/// `|W|`.
pub fn score_magnitude(w: &Matrix) -> Matrix {
    w.abs()
}

/// `score[i][j] = |w[i][j]| * sqrt(d[j])`.
pub fn score_activation(w: &Matrix, diag: &HessianDiag) -> Result<Matrix> {
    if diag.d.len() != w.cols() {
        return Err(Error::Shape {
            op: "score_activation",
            left: w.shape(),
            right: (diag.d.len(), 1),
        });
    }
    let root: Vec<f64> = diag.d.iter().map(|v| v.sqrt()).collect();
    w.abs().scale_cols(&root)
}

/// Cached per-channel first and second moments of a layer's inputs.
///
/// Lets the diagonal for shifted inputs `x - delta` be refreshed in O(d_in):
/// `E[(x - delta)^2] = E[x^2] - 2 delta E[x] + delta^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub layer_name: String,
    pub mean: Vector,
    pub second: HessianDiag,
}

impl ChannelMoments {
    pub fn of(layer_name: &str, calib: &CalibSet) -> Result<Self> {
        let second = hessian_diag(layer_name, calib)?;
        let n = calib.n_samples() as f64;
        let mean: Vec<f64> = (0..calib.dim())
            .map(|j| calib.x().row(j).iter().sum::<f64>() / n)
            .collect();
        Ok(ChannelMoments {
            layer_name: layer_name.to_string(),
            mean: Vector::new(mean)?,
            second,
        })
    }

    pub fn shifted(&self, shift: &[f64]) -> Result<HessianDiag> {
        if shift.len() != self.mean.len() {
            return Err(Error::Shape {
                op: "shifted",
                left: (self.mean.len(), 1),
                right: (shift.len(), 1),
            });
        }
        if shift.iter().all(|&v| v == 0.0) {
            return Ok(self.second.clone());
        }
        let d: Vec<f64> = self
            .second
            .d
            .iter()
            .zip(self.mean.iter())
            .zip(shift)
            .map(|((sq, mu), dl)| (sq - 2.0 * dl * mu + dl * dl).max(0.0))
            .collect();
        Ok(HessianDiag {
            layer_name: self.layer_name.clone(),
            d: Vector::new(d)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Magnitude,
    /// Activation-aware score with the diagonal recomputed from the data.
    Wanda,
    /// Activation-aware score with the diagonal refreshed from cached moments.
    WandaFast,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Magnitude => "magnitude",
            Metric::Wanda => "wanda",
            Metric::WandaFast => "wanda-fast",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "magnitude" => Ok(Metric::Magnitude),
            "wanda" => Ok(Metric::Wanda),
            "wanda-fast" => Ok(Metric::WandaFast),
            other => Err(Error::Domain(format!(
                "unknown metric `{other}` (expected magnitude | wanda | wanda-fast)"
            ))),
        }
    }
}

/// Inputs seen by one weight matrix, with cached statistics.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    pub calib: CalibSet,
    pub moments: ChannelMoments,
}

impl ScoreContext {
    pub fn new(key: &str, calib: CalibSet) -> Result<Self> {
        let moments = ChannelMoments::of(key, &calib)?;
        Ok(ScoreContext { calib, moments })
    }
}

/// Scores of `W` under an absorbable per-channel transform.
///
/// `col_scale` (`s`) and `shift` (`delta`) act on input channels, giving
/// the activation diagonal of `Diag(s)(X - delta)`; `row_scale` multiplies
/// output rows of `W`. With all three absent this is the plain metric.
pub fn transformed_scores(
    metric: Metric,
    w: &Matrix,
    ctx: &ScoreContext,
    col_scale: Option<&[f64]>,
    shift: Option<&[f64]>,
    row_scale: Option<&[f64]>,
) -> Result<Matrix> {
    let w = match row_scale {
        Some(r) => w.scale_rows(r)?,
        None => w.clone(),
    };
    match metric {
        Metric::Magnitude => {
            let a = score_magnitude(&w);
            match col_scale {
                Some(s) => a.scale_cols(s),
                None => Ok(a),
            }
        }
        Metric::Wanda => {
            let d = classical_refresh(ctx.calib.x(), &ctx.moments.layer_name, col_scale, shift)?;
            score_activation(&w, &d)
        }
        Metric::WandaFast => {
            let base = match shift {
                Some(dl) => ctx.moments.shifted(dl)?,
                None => ctx.moments.second.clone(),
            };
            let d = match col_scale {
                Some(s) => fast_refresh(&base, s)?,
                None => base,
            };
            score_activation(&w, &d)
        }
    }
}
