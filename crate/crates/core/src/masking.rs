//! Score-to-mask selection under unstructured or N:M sparsity.
//!
//! Unstructured selection is per layer: exactly `floor(rate * rows * cols)`
//! entries are zeroed. N:M groups are `m` consecutive entries along a row;
//! each keeps exactly its `n` best scores. Ties keep the lower row-major
//! index first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Tensor, TensorFile};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityPattern {
    Unstructured { rate: f64 },
    NM { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn unstructured(rate: f64) -> Result<Self> {
        let p = SparsityPattern::Unstructured { rate };
        p.validate()?;
        Ok(p)
    }

    pub fn nm(n: usize, m: usize) -> Result<Self> {
        let p = SparsityPattern::NM { n, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Unstructured { rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::Pattern(format!("rate {rate} outside [0, 1]")));
                }
            }
            SparsityPattern::NM { n, m } => {
                if n == 0 || n >= m {
                    return Err(Error::Pattern(format!("{n}:{m} needs 0 < n < m")));
                }
            }
        }
        Ok(())
    }

    /// Checks the pattern against a weight with `cols` columns.
    pub fn check_cols(&self, cols: usize) -> Result<()> {
        self.validate()?;
        if let SparsityPattern::NM { n, m } = *self {
            if cols % m != 0 {
                return Err(Error::Pattern(format!(
                    "{n}:{m} needs the column count ({cols}) to be a multiple of {m}"
                )));
            }
        }
        Ok(())
    }

    /// Number of zeros a mask of this shape must contain.
    pub fn zero_count(&self, rows: usize, cols: usize) -> usize {
        match *self {
            SparsityPattern::Unstructured { rate } => (rate * (rows * cols) as f64).floor() as usize,
            SparsityPattern::NM { n, m } => rows * (cols / m) * (m - n),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(*self, SparsityPattern::Unstructured { rate } if rate == 0.0)
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityPattern::Unstructured { rate } => write!(f, "{rate}"),
            SparsityPattern::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

/// Parses `"0.5"` as a rate or `"2:4"` as N:M.
impl FromStr for SparsityPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, m)) = s.split_once(':') {
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Pattern(format!("bad N:M pattern `{s}`")))
            };
            SparsityPattern::nm(parse(n)?, parse(m)?)
        } else {
            let rate = s
                .parse::<f64>()
                .map_err(|_| Error::Pattern(format!("bad sparsity rate `{s}`")))?;
            SparsityPattern::unstructured(rate)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub layer_name: String,
    bits: Matrix,
}

impl Mask {
    pub fn new(layer_name: impl Into<String>, bits: Matrix) -> Result<Self> {
        if !bits.is_binary() {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        Ok(Mask {
            layer_name: layer_name.into(),
            bits,
        })
    }

    pub fn dense(layer_name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Mask {
            layer_name: layer_name.into(),
            bits: Matrix::ones(rows, cols),
        }
    }

    pub fn bits(&self) -> &Matrix {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }

    pub fn zeros(&self) -> usize {
        self.bits.as_slice().iter().filter(|&&v| v == 0.0).count()
    }

    /// Whether the mask satisfies every constraint of `pattern`.
    pub fn satisfies(&self, pattern: &SparsityPattern) -> bool {
        let (rows, cols) = self.shape();
        if pattern.check_cols(cols).is_err() {
            return false;
        }
        match *pattern {
            SparsityPattern::Unstructured { .. } => self.zeros() == pattern.zero_count(rows, cols),
            SparsityPattern::NM { n, m } => (0..rows).all(|i| {
                self.bits
                    .row(i)
                    .chunks(m)
                    .all(|g| g.iter().filter(|&&v| v == 1.0).count() == n)
            }),
        }
    }
}

/// Masks keyed by weight name (see [`crate::model::Model::weights`]).
pub type MaskSet = BTreeMap<String, Mask>;

/// Orders candidate indices best-first: higher score, then lower index.
fn rank_desc(scores: &[f64], idx: &mut [usize]) {
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
}

/// Keeps the highest-scoring entries of `scores` according to `pattern`.
pub fn make_mask(layer_name: &str, scores: &Matrix, pattern: &SparsityPattern) -> Result<Mask> {
    let (rows, cols) = scores.shape();
    pattern.check_cols(cols)?;
    let s = scores.as_slice();
    let mut bits = vec![0.0; rows * cols];
    match *pattern {
        SparsityPattern::Unstructured { .. } => {
            let keep = rows * cols - pattern.zero_count(rows, cols);
            let mut idx: Vec<usize> = (0..rows * cols).collect();
            if keep < idx.len() {
                rank_desc(s, &mut idx);
            }
            for &i in &idx[..keep] {
                bits[i] = 1.0;
            }
        }
        SparsityPattern::NM { n, m } => {
            let mut idx = Vec::with_capacity(m);
            for start in (0..rows * cols).step_by(m) {
                idx.clear();
                idx.extend(start..start + m);
                rank_desc(s, &mut idx);
                for &i in &idx[..n] {
                    bits[i] = 1.0;
                }
            }
        }
    }
    Ok(Mask {
        layer_name: layer_name.to_string(),
        bits: Matrix::new(rows, cols, bits)?,
    })
}

/// `W ⊙ M`.
pub fn apply_mask(w: &Matrix, mask: &Mask) -> Result<Matrix> {
    w.hadamard(&mask.bits)
}

/// One 0/1 tensor per weight key.
pub fn masks_to_tensor_file(masks: &MaskSet) -> Result<TensorFile> {
    let mut file = TensorFile::default();
    for (key, mask) in masks {
        file.push(key.clone(), Tensor::from_matrix(&mask.bits)?)?;
    }
    Ok(file)
}

pub fn masks_from_tensor_file(file: &TensorFile) -> Result<MaskSet> {
    file.entries()
        .iter()
        .map(|(key, t)| Ok((key.clone(), Mask::new(key.clone(), t.to_matrix()?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn mask_file_round_trip() {
        let mut masks = MaskSet::new();
        masks.insert("a.weight".into(), Mask::new("a.weight", m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap());
        masks.insert("b.wq".into(), Mask::dense("b.wq", 1, 3));
        let file = masks_to_tensor_file(&masks).unwrap();
        assert_eq!(masks_from_tensor_file(&TensorFile::decode(&file.encode()).unwrap()).unwrap(), masks);
    }

    #[test]
    fn nm_keeps_group_top() {
        let mask = make_mask("w", &m(&[&[4.0, 3.0, 2.0, 1.0]]), &SparsityPattern::nm(2, 4).unwrap()).unwrap();
        assert_eq!(mask.bits(), &m(&[&[1.0, 1.0, 0.0, 0.0]]));
    }

    #[test]
    fn unstructured_drops_smallest() {
        let mask = make_mask(
            "w",
            &m(&[&[1.0, 2.0], &[3.0, 4.0]]),
            &SparsityPattern::unstructured(0.5).unwrap(),
        )
        .unwrap();
        assert_eq!(mask.bits(), &m(&[&[0.0, 0.0], &[1.0, 1.0]]));
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let mask = make_mask("w", &m(&[&[0.0, -1.0, 5.0]]), &SparsityPattern::unstructured(0.0).unwrap()).unwrap();
        assert_eq!(mask.bits(), &Matrix::ones(1, 3));
    }

    #[test]
    fn ties_keep_lower_index() {
        let scores = m(&[&[1.0, 1.0, 1.0, 1.0]]);
        let mask = make_mask("w", &scores, &SparsityPattern::nm(2, 4).unwrap()).unwrap();
        assert_eq!(mask.bits(), &m(&[&[1.0, 1.0, 0.0, 0.0]]));
        let mask = make_mask("w", &scores, &SparsityPattern::unstructured(0.25).unwrap()).unwrap();
        assert_eq!(mask.bits(), &m(&[&[1.0, 1.0, 1.0, 0.0]]));
    }

    #[test]
    fn nm_requires_divisible_columns() {
        let err = make_mask("w", &Matrix::ones(2, 6), &SparsityPattern::nm(2, 4).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Pattern(_)));
    }

    #[test]
    fn apply_mask_examples() {
        let w = m(&[&[5.0, 6.0]]);
        let half = Mask::new("w", m(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(apply_mask(&w, &half).unwrap(), m(&[&[5.0, 0.0]]));
        assert_eq!(apply_mask(&w, &Mask::dense("w", 1, 2)).unwrap(), w);
        let none = Mask::new("w", Matrix::zeros(1, 2)).unwrap();
        assert_eq!(apply_mask(&w, &none).unwrap(), Matrix::zeros(1, 2));
        assert!(apply_mask(&w, &Mask::dense("w", 2, 1)).is_err());
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("0.5".parse::<SparsityPattern>().unwrap(), SparsityPattern::Unstructured { rate: 0.5 });
        assert_eq!("2:4".parse::<SparsityPattern>().unwrap(), SparsityPattern::NM { n: 2, m: 4 });
        for bad in ["1.5", "-0.1", "4:4", "0:4", "a:b", "x"] {
            assert!(bad.parse::<SparsityPattern>().is_err(), "{bad}");
        }
        assert!(Mask::new("w", m(&[&[0.5]])).is_err());
    }

    mod props {
        use super::*;
        use crate::rng::Rng;
        use proptest::prelude::*;

        fn pattern() -> impl Strategy<Value = SparsityPattern> {
            prop_oneof![
                (0.0..=1.0f64).prop_map(|rate| SparsityPattern::Unstructured { rate }),
                Just(SparsityPattern::NM { n: 2, m: 4 }),
                Just(SparsityPattern::NM { n: 4, m: 8 }),
                Just(SparsityPattern::NM { n: 1, m: 2 }),
            ]
        }

        proptest! {
            #[test]
            fn masks_meet_their_pattern(seed in 0u64..10_000, rows in 1usize..9, groups in 1usize..5, p in pattern()) {
                let mut rng = Rng::new(seed);
                let cols = groups * 8;
                let scores = rng.normal_matrix(rows, cols);
                let mask = make_mask("w", &scores, &p).unwrap();
                prop_assert!(mask.bits().is_binary());
                prop_assert!(mask.satisfies(&p));
                prop_assert_eq!(mask.zeros(), p.zero_count(rows, cols));
            }

            #[test]
            fn argtop_invariance_under_exp(seed in 0u64..10_000, p in pattern()) {
                let mut rng = Rng::new(seed);
                let scores = rng.uniform_matrix(4, 16, -5.0, 5.0);
                let a = make_mask("w", &scores, &p).unwrap();
                let b = make_mask("w", &scores.map(f64::exp), &p).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn unstructured_commutes_with_permutation(seed in 0u64..10_000, rate in 0.0..=1.0f64) {
                let mut rng = Rng::new(seed);
                let (rows, cols) = (3, 8);
                let scores = rng.normal_matrix(rows, cols);
                // Fisher-Yates permutation of flat indices
                let mut perm: Vec<usize> = (0..rows * cols).collect();
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.index(i + 1));
                }
                let permuted = Matrix::from_fn(rows, cols, |i, j| scores.as_slice()[perm[i * cols + j]]);
                let p = SparsityPattern::Unstructured { rate };
                let direct = make_mask("w", &scores, &p).unwrap();
                let via = make_mask("w", &permuted, &p).unwrap();
                for k in 0..rows * cols {
                    prop_assert_eq!(via.bits().as_slice()[k], direct.bits().as_slice()[perm[k]]);
                }
            }

            #[test]
            fn nm_commutes_with_in_group_permutation(seed in 0u64..10_000) {
                let mut rng = Rng::new(seed);
                let scores = rng.normal_matrix(3, 8);
                let perm = [3usize, 0, 2, 1];
                let permuted = Matrix::from_fn(3, 8, |i, j| scores.get(i, (j / 4) * 4 + perm[j % 4]));
                let p = SparsityPattern::NM { n: 2, m: 4 };
                let direct = make_mask("w", &scores, &p).unwrap();
                let via = make_mask("w", &permuted, &p).unwrap();
                for i in 0..3 {
                    for j in 0..8 {
                        prop_assert_eq!(via.bits().get(i, j), direct.bits().get(i, (j / 4) * 4 + perm[j % 4]));
                    }
                }
            }
        }
    }
}
