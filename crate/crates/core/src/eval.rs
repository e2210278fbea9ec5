//! Distortion, sparsity accounting, score histograms and rank agreement.

use std::io::Write;

use crate::error::{Error, Result};
use crate::importance::CalibSet;
use crate::masking::{MaskSet, SparsityPattern};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    pub layer_name: String,
    /// Frobenius norm of the output difference over the batch.
    pub frob: f64,
    /// `frob / ||Y||_F`, or 0 when the reference output vanishes.
    pub rel: f64,
    /// Column norms of the output difference.
    pub per_sample: Vector,
}

/// `dY = (W - W_hat) X` over the calibration batch.
pub fn distortion(w: &Matrix, w_hat: &Matrix, calib: &CalibSet) -> Result<DistortionReport> {
    if w.shape() != w_hat.shape() {
        return Err(Error::Shape {
            op: "distortion",
            left: w.shape(),
            right: w_hat.shape(),
        });
    }
    let y = w.matmul(calib.x())?;
    let dy = w.sub(w_hat)?.matmul(calib.x())?;
    report_from("", &y, &dy)
}

/// Distortion between two output batches, `other` measured against `reference`.
pub fn output_distortion(layer_name: &str, reference: &Matrix, other: &Matrix) -> Result<DistortionReport> {
    let dy = other.sub(reference)?;
    report_from(layer_name, reference, &dy)
}

fn report_from(layer_name: &str, y: &Matrix, dy: &Matrix) -> Result<DistortionReport> {
    let frob = dy.frobenius_norm();
    let y_norm = y.frobenius_norm();
    let rel = if y_norm == 0.0 || frob == 0.0 { 0.0 } else { frob / y_norm };
    Ok(DistortionReport {
        layer_name: layer_name.to_string(),
        frob,
        rel,
        per_sample: dy.col_l2_norms(),
    })
}

impl DistortionReport {
    pub fn named(mut self, layer_name: impl Into<String>) -> Self {
        self.layer_name = layer_name.into();
        self
    }
}

pub fn write_distortion_csv<W: Write>(out: W, rows: &[DistortionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "frob", "rel"])?;
    for r in rows {
        w.write_record([r.layer_name.clone(), r.frob.to_string(), r.rel.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub layer_name: String,
    pub zeros: usize,
    pub total: usize,
    pub rate: f64,
    pub pattern_ok: bool,
}

pub fn sparsity_reports(masks: &MaskSet, pattern: &SparsityPattern) -> Vec<SparsityReport> {
    masks
        .iter()
        .map(|(key, m)| {
            let (r, c) = m.shape();
            let zeros = m.zeros();
            SparsityReport {
                layer_name: key.clone(),
                zeros,
                total: r * c,
                rate: zeros as f64 / (r * c) as f64,
                pattern_ok: m.satisfies(pattern),
            }
        })
        .collect()
}

pub fn write_sparsity_csv<W: Write>(out: W, rows: &[SparsityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "zeros", "total", "rate", "pattern_ok"])?;
    for r in rows {
        w.write_record([
            r.layer_name.clone(),
            r.zeros.to_string(),
            r.total.to_string(),
            r.rate.to_string(),
            r.pattern_ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; every bin is half-open except the
/// last, which also holds the maximum. Constant scores give a single bin.
pub fn score_histogram(scores: &Matrix, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    let v = scores.as_slice();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(vec![HistogramBin {
            low: lo,
            high: hi,
            count: v.len(),
        }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in v {
        let idx = (((x - lo) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            low: lo + width * i as f64,
            high: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

/// One block of rows per labelled histogram, in the given order.
pub fn write_histogram_csv<W: Write>(out: W, histograms: &[(String, Vec<HistogramBin>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "bin_low", "bin_high", "count"])?;
    for (label, bins) in histograms {
        for b in bins {
            w.write_record([label.clone(), b.low.to_string(), b.high.to_string(), b.count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Kendall's tau-b between two rankings, in `O(n log n)`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "kendall_tau",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Domain("rank correlation needs at least two items".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall_tau"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));

    let pairs = |t: u64| t * (t.saturating_sub(1)) / 2;
    let n0 = pairs(n as u64);
    let (mut ties_a, mut ties_joint) = (0u64, 0u64);
    let (mut run_a, mut run_ab) = (1u64, 1u64);
    for k in 1..n {
        let (p, q) = (idx[k - 1], idx[k]);
        if a[p] == a[q] {
            run_a += 1;
            if b[p] == b[q] {
                run_ab += 1;
            } else {
                ties_joint += pairs(run_ab);
                run_ab = 1;
            }
        } else {
            ties_a += pairs(run_a);
            ties_joint += pairs(run_ab);
            run_a = 1;
            run_ab = 1;
        }
    }
    ties_a += pairs(run_a);
    ties_joint += pairs(run_ab);

    let mut seq: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = seq.clone();
    let swaps = merge_count(&mut seq, &mut buf);

    let mut ties_b = 0u64;
    let mut run_b = 1u64;
    for k in 1..n {
        if seq[k] == seq[k - 1] {
            run_b += 1;
        } else {
            ties_b += pairs(run_b);
            run_b = 1;
        }
    }
    ties_b += pairs(run_b);

    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Domain("rank correlation undefined for constant input".into()));
    }
    let num = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_joint as f64 - 2.0 * swaps as f64;
    Ok(num / denom)
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{make_mask, Mask};
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn distortion_examples() {
        let w = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let calib = CalibSet::new(Matrix::from_rows(&[[0.0], [3.0]]).unwrap());
        let same = distortion(&w, &w, &calib).unwrap();
        assert_eq!((same.frob, same.rel), (0.0, 0.0));
        let r = distortion(&w, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), &calib).unwrap();
        assert_eq!(r.frob, 3.0);
        assert_eq!(r.rel, 1.0);
        assert!(distortion(&w, &Matrix::zeros(2, 1), &calib).is_err());
    }

    #[test]
    fn per_sample_norms_decompose_frobenius() {
        let mut rng = Rng::new(0);
        let w = rng.normal_matrix(5, 7);
        let w_hat = w.map(|v| if v.abs() < 0.5 { 0.0 } else { v });
        let r = distortion(&w, &w_hat, &CalibSet::new(rng.normal_matrix(7, 13))).unwrap();
        let sum: f64 = r.per_sample.iter().map(|v| v * v).sum();
        assert!((sum - r.frob * r.frob).abs() <= 1e-12 * r.frob * r.frob);
    }

    #[test]
    fn histogram_examples() {
        let zeros = score_histogram(&Matrix::zeros(3, 2), 5).unwrap();
        assert_eq!(zeros.len(), 1);
        assert_eq!(zeros[0].count, 6);
        let h = score_histogram(&Matrix::from_rows(&[[0.0, 1.0, 2.0, 3.0]]).unwrap(), 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!((h[1].low, h[1].high), (1.5, 3.0));
        assert!(score_histogram(&Matrix::zeros(1, 1), 0).is_err());
    }

    #[test]
    fn sparsity_accounting() {
        let m = Mask::new("l", Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0]]).unwrap()).unwrap();
        let masks: MaskSet = [("l".to_string(), m)].into_iter().collect();
        let r = &sparsity_reports(&masks, &SparsityPattern::nm(2, 4).unwrap())[0];
        assert_eq!((r.zeros, r.total, r.rate, r.pattern_ok), (2, 4, 0.5, true));
        let r = &sparsity_reports(&masks, &SparsityPattern::nm(1, 4).unwrap())[0];
        assert!(!r.pattern_ok);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        let rows = vec![DistortionReport {
            layer_name: "l".into(),
            frob: 0.5,
            rel: 0.25,
            per_sample: Vector::zeros(1),
        }];
        write_distortion_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layer,frob,rel\nl,0.5,0.25\n");

        let mut buf = Vec::new();
        let bin = |low, high, count| HistogramBin { low, high, count };
        let hists = vec![
            ("a".to_string(), vec![bin(0.0, 1.0, 2), bin(1.0, 2.0, 1)]),
            ("b".to_string(), vec![bin(3.0, 3.0, 4)]),
        ];
        write_histogram_csv(&mut buf, &hists).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "label,bin_low,bin_high,count\na,0,1,2\na,1,2,1\nb,3,3,4\n"
        );
    }

    fn naive_tau(a: &[f64], b: &[f64]) -> f64 {
        let (mut c, mut d, mut ta, mut tb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let x = (a[i] - a[j]).signum() * if a[i] == a[j] { 0.0 } else { 1.0 };
                let y = (b[i] - b[j]).signum() * if b[i] == b[j] { 0.0 } else { 1.0 };
                if x == 0.0 && y == 0.0 {
                    continue;
                }
                if x == 0.0 {
                    ta += 1.0;
                } else if y == 0.0 {
                    tb += 1.0;
                } else if x == y {
                    c += 1.0;
                } else {
                    d += 1.0;
                }
            }
        }
        (c - d) / ((c + d + ta) * (c + d + tb)).sqrt()
    }

    #[test]
    fn tau_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(kendall_tau(&a, &[1.0; 4]).is_err());
        assert!(kendall_tau(&a, &a[..3]).is_err());
    }

    proptest! {
        #[test]
        fn tau_matches_quadratic_count(pairs in prop::collection::vec((0u8..6, 0u8..6), 2..60)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let naive = naive_tau(&a, &b);
            match kendall_tau(&a, &b) {
                Ok(t) => prop_assert!((t - naive).abs() < 1e-12, "{} vs {}", t, naive),
                Err(_) => prop_assert!(naive.is_nan()),
            }
        }

        #[test]
        fn histogram_conserves_counts(v in prop::collection::vec(-1e3f64..1e3, 1..200), bins in 1usize..20) {
            let m = Matrix::new(1, v.len(), v.clone()).unwrap();
            let h = score_histogram(&m, bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), v.len());
            prop_assert_eq!(score_histogram(&m, bins).unwrap(), h);
        }

        #[test]
        fn dense_mask_has_zero_distortion(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let w = rng.normal_matrix(4, 6);
            let m = make_mask("l", &w.abs(), &SparsityPattern::unstructured(0.0).unwrap()).unwrap();
            let w_hat = crate::masking::apply_mask(&w, &m).unwrap();
            let r = distortion(&w, &w_hat, &CalibSet::new(rng.normal_matrix(6, 5))).unwrap();
            prop_assert_eq!(r.frob, 0.0);
        }
    }
}
