//! Wall-clock comparison of diagonal refresh strategies.

use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::importance::{fast_refresh, hessian_diag, CalibSet, HessianDiag};
use crate::rng::Rng;
use crate::tensor::{Matrix, OpCounts};

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshBenchmark {
    pub d_in: usize,
    pub n_samples: usize,
    pub iters: usize,
    pub classical_total_s: f64,
    pub fast_total_s: f64,
    pub classical_ops: OpCounts,
    pub fast_ops: OpCounts,
}

impl RefreshBenchmark {
    pub fn classical_per_iter_s(&self) -> f64 {
        self.classical_total_s / self.iters as f64
    }

    pub fn fast_per_iter_s(&self) -> f64 {
        self.fast_total_s / self.iters as f64
    }

    pub fn speedup(&self) -> f64 {
        self.classical_total_s / self.fast_total_s.max(f64::MIN_POSITIVE)
    }
}

/// Recomputes the diagonal of `Diag(s)(X - shift)` from the raw inputs.
pub fn classical_refresh(
    x: &Matrix,
    layer_name: &str,
    scale: Option<&[f64]>,
    shift: Option<&[f64]>,
) -> Result<HessianDiag> {
    let shifted = match shift {
        Some(dl) => x.shift_rows(dl)?,
        None => x.clone(),
    };
    let scaled = match scale {
        Some(s) => shifted.scale_rows(s)?,
        None => shifted,
    };
    hessian_diag(layer_name, &CalibSet::new(scaled))
}

/// Times `iters` refreshes of a `d_in`-channel diagonal under fresh random
/// scalings: classical recompute from `n_samples` cached inputs versus
/// `fast_refresh` from the cached diagonal.
pub fn benchmark_refresh(d_in: usize, n_samples: usize, iters: usize, seed: u64) -> Result<RefreshBenchmark> {
    if d_in == 0 || n_samples == 0 || iters == 0 {
        return Err(Error::Domain("benchmark sizes must be positive".into()));
    }
    let calib = CalibSet::synthetic(d_in, n_samples, seed)?;
    let base = hessian_diag("bench", &calib)?;
    let mut rng = Rng::new(seed.wrapping_add(1));
    let scalings: Vec<Vec<f64>> = (0..iters)
        .map(|_| (0..d_in).map(|_| rng.log_uniform(0.5, 2.0)).collect())
        .collect();

    let before = OpCounts::snapshot();
    let start = Instant::now();
    for s in &scalings {
        black_box(classical_refresh(black_box(calib.x()), "bench", Some(s), None)?);
    }
    let classical_total_s = start.elapsed().as_secs_f64();
    let classical_ops = OpCounts::snapshot().since(before);

    let before = OpCounts::snapshot();
    let start = Instant::now();
    for s in &scalings {
        black_box(fast_refresh(black_box(&base), s)?);
    }
    let fast_total_s = start.elapsed().as_secs_f64();
    let fast_ops = OpCounts::snapshot().since(before);

    Ok(RefreshBenchmark {
        d_in,
        n_samples,
        iters,
        classical_total_s,
        fast_total_s,
        classical_ops,
        fast_ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_path_has_no_matrix_work() {
        let b = benchmark_refresh(64, 16, 8, 0).unwrap();
        assert_eq!(b.fast_ops, OpCounts::default());
        assert_eq!(b.classical_ops.matmuls, 0);
        assert!(b.classical_ops.dense_passes >= 8);
        assert!(b.speedup() > 0.0);
    }

    #[test]
    fn rejects_zero_sizes() {
        assert!(benchmark_refresh(0, 4, 4, 0).is_err());
        assert!(benchmark_refresh(4, 4, 0, 0).is_err());
    }
}
