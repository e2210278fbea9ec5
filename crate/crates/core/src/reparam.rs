//! Function-preserving per-channel reparameterizations and their absorption.
//!
//! A linear layer `Y = W X + b` with scale `s > 0` and shift `delta` on its
//! input channels is rewritten as `W~ X~ + b~` where
//! `W~ = W diag(s)`, `b~ = b + W delta` and `X~ = diag(s)^-1 (X - delta)`.
//! An attention pair scales query rows by `s_a` and key rows by `1/s_a`,
//! which leaves `Q K^T` unchanged.
//!
//! Scales are stored as logarithms so positivity holds structurally.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{InputTransform, Layer, LayerKind, Model, Tensor, TensorFile};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift {
    pub layer_name: String,
    log_scale: Vector,
    shift: Vector,
}

impl ScaleShift {
    pub fn identity(layer_name: impl Into<String>, d_in: usize) -> Self {
        ScaleShift {
            layer_name: layer_name.into(),
            log_scale: Vector::zeros(d_in),
            shift: Vector::zeros(d_in),
        }
    }

    pub fn new(layer_name: impl Into<String>, scale: &[f64], shift: &[f64]) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::Domain("scale and shift lengths differ".into()));
        }
        if let Some(bad) = scale.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("scale entries must be positive, got {bad}")));
        }
        Ok(ScaleShift {
            layer_name: layer_name.into(),
            log_scale: Vector::new(scale.iter().map(|v| v.ln()).collect())?,
            shift: Vector::new(shift.to_vec())?,
        })
    }

    pub fn from_log(layer_name: impl Into<String>, log_scale: Vector, shift: Vector) -> Result<Self> {
        if log_scale.len() != shift.len() {
            return Err(Error::Domain("scale and shift lengths differ".into()));
        }
        Ok(ScaleShift {
            layer_name: layer_name.into(),
            log_scale,
            shift,
        })
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn log_scale(&self) -> &Vector {
        &self.log_scale
    }

    pub fn scale(&self) -> Vector {
        self.log_scale.map(f64::exp)
    }

    pub fn shift(&self) -> &Vector {
        &self.shift
    }

    pub fn has_shift(&self) -> bool {
        !self.shift.is_all(0.0)
    }

    pub fn is_identity(&self) -> bool {
        self.log_scale.is_all(0.0) && !self.has_shift()
    }

    pub fn input_transform(&self) -> InputTransform {
        InputTransform {
            scale: self.scale(),
            shift: self.shift.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnScale {
    pub pair_name: String,
    log_scale: Vector,
}

impl AttnScale {
    pub fn identity(pair_name: impl Into<String>, d_k: usize) -> Self {
        AttnScale {
            pair_name: pair_name.into(),
            log_scale: Vector::zeros(d_k),
        }
    }

    pub fn new(pair_name: impl Into<String>, scale: &[f64]) -> Result<Self> {
        if let Some(bad) = scale.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("attention scales must be positive, got {bad}")));
        }
        Ok(AttnScale {
            pair_name: pair_name.into(),
            log_scale: Vector::new(scale.iter().map(|v| v.ln()).collect())?,
        })
    }

    pub fn from_log(pair_name: impl Into<String>, log_scale: Vector) -> Self {
        AttnScale {
            pair_name: pair_name.into(),
            log_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.log_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_scale.is_empty()
    }

    pub fn log_scale(&self) -> &Vector {
        &self.log_scale
    }

    pub fn scale(&self) -> Vector {
        self.log_scale.map(f64::exp)
    }

    pub fn inverse_scale(&self) -> Vector {
        self.log_scale.map(|v| (-v).exp())
    }

    pub fn is_identity(&self) -> bool {
        self.log_scale.is_all(0.0)
    }
}

/// Learned induction parameters for a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transforms {
    pub linear: BTreeMap<String, ScaleShift>,
    pub attention: BTreeMap<String, AttnScale>,
}

impl Transforms {
    pub fn identity_for(model: &Model) -> Self {
        let mut t = Transforms::default();
        for layer in model.ordered_layers() {
            match layer.kind() {
                LayerKind::Linear { weight, .. } => {
                    t.linear.insert(
                        layer.name().to_string(),
                        ScaleShift::identity(layer.name(), weight.cols()),
                    );
                }
                LayerKind::AttentionQK { wq, .. } => {
                    t.attention.insert(
                        layer.name().to_string(),
                        AttnScale::identity(layer.name(), wq.rows()),
                    );
                }
            }
        }
        t
    }

    pub fn is_identity(&self) -> bool {
        self.linear.values().all(ScaleShift::is_identity)
            && self.attention.values().all(AttnScale::is_identity)
    }

    /// Serializes as `<layer>.log_scale`, `<layer>.shift` and `<pair>.attn_log_scale`.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::default();
        for (name, t) in &self.linear {
            file.push(format!("{name}.log_scale"), Tensor::from_vector(&t.log_scale)?)?;
            file.push(format!("{name}.shift"), Tensor::from_vector(&t.shift)?)?;
        }
        for (name, a) in &self.attention {
            file.push(format!("{name}.attn_log_scale"), Tensor::from_vector(&a.log_scale)?)?;
        }
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let mut out = Transforms::default();
        for (name, tensor) in file.entries() {
            let Some((layer, role)) = name.rsplit_once('.') else {
                return Err(Error::Topology(format!("tensor `{name}` has no `.<role>` suffix")));
            };
            match role {
                "log_scale" => {
                    let shift = file
                        .get(&format!("{layer}.shift"))
                        .ok_or_else(|| Error::layer(layer, "log_scale without shift"))?;
                    out.linear.insert(
                        layer.to_string(),
                        ScaleShift::from_log(layer, tensor.to_vector()?, shift.to_vector()?)?,
                    );
                }
                "shift" if file.get(&format!("{layer}.log_scale")).is_some() => {}
                "attn_log_scale" => {
                    out.attention
                        .insert(layer.to_string(), AttnScale::from_log(layer, tensor.to_vector()?));
                }
                _ => return Err(Error::Topology(format!("unknown transform tensor `{name}`"))),
            }
        }
        Ok(out)
    }
}

/// Result of reparameterizing one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamLinear {
    pub layer: Layer,
    /// Transform to apply to the layer's inputs: `X~ = diag(s)^-1 (X - delta)`.
    pub input: InputTransform,
}

/// `W~ = W diag(s)`, `b~ = b + W delta` (a zero bias is created when absent).
pub fn reparam_linear(layer: &Layer, t: &ScaleShift) -> Result<ReparamLinear> {
    let LayerKind::Linear { weight, bias } = layer.kind() else {
        return Err(Error::layer(layer.name(), "scale/shift needs a linear layer"));
    };
    if t.len() != weight.cols() {
        return Err(Error::layer(
            layer.name(),
            format!("transform has {} channels, layer has {} inputs", t.len(), weight.cols()),
        ));
    }
    let s = t.scale();
    let w_t = weight.scale_cols(&s)?;
    let wd = weight.mul_vec(t.shift())?;
    let b: Vec<f64> = match bias {
        Some(b) => b.iter().zip(wd.iter()).map(|(b, w)| b + w).collect(),
        None => wd.into_vec(),
    };
    Ok(ReparamLinear {
        layer: Layer::linear(layer.name(), w_t, Some(Vector::new(b)?))?,
        input: t.input_transform(),
    })
}

/// Rows of `Wq` scaled by `s_a`, rows of `Wk` by `1/s_a`.
pub fn reparam_attention(layer: &Layer, a: &AttnScale) -> Result<Layer> {
    let LayerKind::AttentionQK { wq, wk } = layer.kind() else {
        return Err(Error::layer(layer.name(), "attention scale needs an attention layer"));
    };
    if a.len() != wq.rows() {
        return Err(Error::layer(
            layer.name(),
            format!("attention scale has {} entries, head dimension is {}", a.len(), wq.rows()),
        ));
    }
    Layer::attention(
        layer.name(),
        wq.scale_rows(&a.scale())?,
        wk.scale_rows(&a.inverse_scale())?,
    )
}

/// Whether a layer's input shift can be folded into existing weights: the
/// layer must carry a bias (or be allowed to grow one) and no attention
/// layer may read the same stream, because query/key projections have no
/// bias to absorb the shift.
pub fn shift_absorbable(model: &Model, layer: &str, materialize_bias: bool) -> bool {
    let Some(l) = model.layer(layer) else {
        return false;
    };
    let LayerKind::Linear { bias, .. } = l.kind() else {
        return false;
    };
    if bias.is_none() && !materialize_bias {
        return false;
    }
    model
        .input_stream_of(layer)
        .map(|s| s.attention_consumers.is_empty())
        .unwrap_or(false)
}

fn check_transforms(model: &Model, transforms: &Transforms) -> Result<()> {
    for (name, t) in &transforms.linear {
        let layer = model
            .layer(name)
            .ok_or_else(|| Error::layer(name, "transform targets an unknown layer"))?;
        match layer.kind() {
            LayerKind::Linear { weight, .. } if weight.cols() == t.len() => {}
            LayerKind::Linear { .. } => {
                return Err(Error::layer(name, "transform length does not match input width"))
            }
            _ => return Err(Error::layer(name, "scale/shift targets a non-linear layer")),
        }
    }
    for (name, a) in &transforms.attention {
        let layer = model
            .layer(name)
            .ok_or_else(|| Error::layer(name, "transform targets an unknown layer"))?;
        match layer.kind() {
            LayerKind::AttentionQK { wq, .. } if wq.rows() == a.len() => {}
            LayerKind::AttentionQK { .. } => {
                return Err(Error::layer(name, "attention scale length does not match d_k"))
            }
            _ => return Err(Error::layer(name, "attention scale targets a linear layer")),
        }
    }
    Ok(())
}

/// Folds every transform into the model's weights.
///
/// Each linear layer's input transform is pushed into whatever produces
/// its input: the upstream linear layer's rows and bias, or the recorded
/// model input transform at the boundary. Attention layers reading the
/// same stream get their columns rescaled to compensate. A nonzero shift
/// on a stream read by an attention layer cannot be compensated and is
/// reported as an error listing the offending edges.
pub fn absorb(model: &Model, transforms: &Transforms) -> Result<Model> {
    check_transforms(model, transforms)?;
    let active = |name: &str| transforms.linear.get(name).filter(|t| !t.is_identity());

    let mut offending = Vec::new();
    for stream in model.streams() {
        let Some(consumer) = stream.linear_consumer.as_deref() else {
            continue;
        };
        if let Some(t) = active(consumer) {
            if t.has_shift() {
                let from = stream.producer.clone().unwrap_or_else(|| "<input>".into());
                for a in &stream.attention_consumers {
                    offending.push((from.clone(), a.clone()));
                }
            }
        }
    }
    if !offending.is_empty() {
        return Err(Error::Absorption { edges: offending });
    }

    let mut out = model.clone();
    // Own input-side transforms, computed from the original weights.
    for (name, t) in &transforms.linear {
        if t.is_identity() {
            continue;
        }
        let layer = model.layer(name).expect("checked");
        let r = reparam_linear(layer, t)?;
        let keep_bias_absent = matches!(layer.kind(), LayerKind::Linear { bias: None, .. }) && !t.has_shift();
        let new_kind = match r.layer.kind().clone() {
            LayerKind::Linear { weight, .. } if keep_bias_absent => LayerKind::Linear { weight, bias: None },
            other => other,
        };
        *out.layer_mut(name).expect("exists").kind_mut() = new_kind;
    }
    for (name, a) in &transforms.attention {
        if a.is_identity() {
            continue;
        }
        let r = reparam_attention(model.layer(name).expect("checked"), a)?;
        *out.layer_mut(name).expect("exists").kind_mut() = r.kind().clone();
    }
    // Compensating input transforms, pushed upstream.
    let mut input_transform = model.input_transform().cloned();
    for stream in model.streams() {
        let Some(consumer) = stream.linear_consumer.as_deref() else {
            continue;
        };
        let Some(t) = active(consumer) else {
            continue;
        };
        let s = t.scale();
        for a in &stream.attention_consumers {
            if let LayerKind::AttentionQK { wq, wk } = out.layer_mut(a).expect("exists").kind_mut() {
                *wq = wq.scale_cols(&s)?;
                *wk = wk.scale_cols(&s)?;
            }
        }
        match &stream.producer {
            Some(p) => {
                let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
                if let LayerKind::Linear { weight, bias } = out.layer_mut(p).expect("exists").kind_mut() {
                    *weight = weight.scale_rows(&inv)?;
                    let shifted = match bias.take() {
                        Some(b) => Some(b.iter().zip(t.shift().iter()).map(|(b, d)| b - d).collect::<Vec<_>>()),
                        None if t.has_shift() => Some(t.shift().iter().map(|d| -d).collect()),
                        None => None,
                    };
                    *bias = match shifted {
                        Some(v) => Some(Vector::new(v.iter().zip(&inv).map(|(b, i)| b * i).collect())?),
                        None => None,
                    };
                }
            }
            None => {
                input_transform = Some(match input_transform {
                    // (x - d0)/s0 followed by (. - d1)/s1
                    Some(prev) => InputTransform {
                        scale: Vector::new(prev.scale.iter().zip(s.iter()).map(|(a, b)| a * b).collect())?,
                        shift: Vector::new(
                            prev.shift
                                .iter()
                                .zip(prev.scale.iter())
                                .zip(t.shift().iter())
                                .map(|((d0, s0), d1)| d0 + s0 * d1)
                                .collect(),
                        )?,
                    },
                    None => t.input_transform(),
                });
            }
        }
    }
    out.set_input_transform(input_transform)?;
    Ok(out)
}

/// Dense weights of `model` after absorbing `transforms`, keyed like
/// [`Model::weights`]; convenience for inspection.
pub fn absorbed_weights(model: &Model, transforms: &Transforms) -> Result<BTreeMap<String, Matrix>> {
    let m = absorb(model, transforms)?;
    Ok(m.weights().into_iter().map(|(k, w)| (k, w.clone())).collect())
}
