use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::rng::Rng;
use crate::tensor::{Matrix, Vector};

/// Shape and seed of a generated toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub depth: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub seed: u64,
}

/// Smallest and largest per-channel factor used to imbalance input channels.
pub const CHANNEL_FACTOR_RANGE: (f64, f64) = (0.1, 10.0);

/// Builds `depth` blocks of `[blkN.attn, blkN.fc1, blkN.fc2]`.
///
/// Weights are i.i.d. standard normal scaled by `1/sqrt(d_in)`, then every
/// input column is multiplied by a log-uniform factor in [0.1, 10]. One
/// column of each matrix is pinned to 0.1 and another to 10 so the
/// max/min channel ratio is always 100. Linear layers carry biases drawn
/// from N(0, 0.5^2).
pub fn build_toy_model(spec: &ToySpec) -> Result<Model> {
    if spec.depth < 1 || spec.d_model < 2 || spec.d_hidden < 2 {
        return Err(Error::Domain(format!(
            "toy model needs depth >= 1 and dims >= 2, got {spec:?}"
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let mut layers = Vec::with_capacity(3 * spec.depth);
    for b in 0..spec.depth {
        let wq = imbalanced_weight(&mut rng, spec.d_model, spec.d_model);
        let wk = imbalanced_weight(&mut rng, spec.d_model, spec.d_model);
        layers.push(Layer::attention(format!("blk{b}.attn"), wq, wk)?);

        let w1 = imbalanced_weight(&mut rng, spec.d_hidden, spec.d_model);
        let b1 = bias(&mut rng, spec.d_hidden);
        layers.push(Layer::linear(format!("blk{b}.fc1"), w1, Some(b1))?);

        let w2 = imbalanced_weight(&mut rng, spec.d_model, spec.d_hidden);
        let b2 = bias(&mut rng, spec.d_model);
        layers.push(Layer::linear(format!("blk{b}.fc2"), w2, Some(b2))?);
    }
    Model::sequential(layers)
}

/// Per-column factors for a weight with `d_in` inputs; contains both
/// range endpoints.
pub(crate) fn channel_factors(rng: &mut Rng, d_in: usize) -> Vec<f64> {
    let (lo, hi) = CHANNEL_FACTOR_RANGE;
    let mut f: Vec<f64> = (0..d_in).map(|_| rng.log_uniform(lo, hi)).collect();
    let low = rng.index(d_in);
    let high = (low + 1 + rng.index(d_in - 1)) % d_in;
    f[low] = lo;
    f[high] = hi;
    f
}

fn imbalanced_weight(rng: &mut Rng, d_out: usize, d_in: usize) -> Matrix {
    let base = 1.0 / (d_in as f64).sqrt();
    let w = rng.normal_matrix(d_out, d_in).scale(base);
    let factors = channel_factors(rng, d_in);
    w.scale_cols(&factors).expect("factor count matches columns")
}

fn bias(rng: &mut Rng, len: usize) -> Vector {
    rng.normal_vector(len).map(|v| 0.5 * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    #[test]
    fn deterministic_per_seed() {
        let spec = ToySpec {
            depth: 2,
            d_model: 8,
            d_hidden: 16,
            seed: 11,
        };
        let a = build_toy_model(&spec).unwrap();
        let b = build_toy_model(&spec).unwrap();
        assert_eq!(a.to_tensor_file().unwrap().encode(), b.to_tensor_file().unwrap().encode());
        let c = build_toy_model(&ToySpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_bookkeeping() {
        let model = build_toy_model(&ToySpec {
            depth: 1,
            d_model: 4,
            d_hidden: 8,
            seed: 0,
        })
        .unwrap();
        assert_eq!(model.layers().len(), 3);
        let shapes: Vec<Vec<(usize, usize)>> = model
            .ordered_layers()
            .map(|l| match l.kind() {
                LayerKind::AttentionQK { wq, wk } => vec![wq.shape(), wk.shape()],
                LayerKind::Linear { weight, .. } => vec![weight.shape()],
            })
            .collect();
        assert_eq!(shapes, vec![vec![(4, 4), (4, 4)], vec![(8, 4)], vec![(4, 8)]]);
    }

    #[test]
    fn channel_factor_ratio_at_least_ten() {
        let mut rng = Rng::new(5);
        for d in 2..40 {
            let f = channel_factors(&mut rng, d);
            let max = f.iter().cloned().fold(f64::MIN, f64::max);
            let min = f.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max / min >= 10.0, "d={d}: {f:?}");
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        for spec in [
            ToySpec { depth: 0, d_model: 4, d_hidden: 4, seed: 0 },
            ToySpec { depth: 1, d_model: 1, d_hidden: 4, seed: 0 },
            ToySpec { depth: 1, d_model: 4, d_hidden: 1, seed: 0 },
        ] {
            assert!(build_toy_model(&spec).is_err());
        }
    }
}
