//! Named-layer models and their sequential evaluation.
//!
//! A model is an ordered list of layers plus a topology (the order in which
//! they are evaluated). Linear layers transform the running activation
//! stream. An attention layer reads the stream without changing it and
//! contributes the logit map `(Wq X)^T (Wk X)` to the forward trace.

mod tensorfile;
mod toy;

use std::collections::{BTreeMap, HashSet};

pub use tensorfile::{Tensor, TensorFile};
pub use toy::{build_toy_model, ToySpec};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

const INPUT_TRANSFORM: &str = "input_transform";

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Linear {
        weight: Matrix,
        bias: Option<Vector>,
    },
    AttentionQK {
        wq: Matrix,
        wk: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    kind: LayerKind,
}

impl Layer {
    pub fn linear(name: impl Into<String>, weight: Matrix, bias: Option<Vector>) -> Result<Self> {
        let name = name.into();
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::layer(
                    name,
                    format!("bias length {} != weight rows {}", b.len(), weight.rows()),
                ));
            }
        }
        Ok(Layer {
            name,
            kind: LayerKind::Linear { weight, bias },
        })
    }

    pub fn attention(name: impl Into<String>, wq: Matrix, wk: Matrix) -> Result<Self> {
        let name = name.into();
        if wq.shape() != wk.shape() {
            return Err(Error::layer(
                name,
                format!("wq {:?} and wk {:?} differ in shape", wq.shape(), wk.shape()),
            ));
        }
        Ok(Layer {
            name,
            kind: LayerKind::AttentionQK { wq, wk },
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub(crate) fn kind_mut(&mut self) -> &mut LayerKind {
        &mut self.kind
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. })
    }

    /// Width of the activation stream this layer reads.
    pub fn input_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Linear { weight, .. } => weight.cols(),
            LayerKind::AttentionQK { wq, .. } => wq.cols(),
        }
    }

    /// Applies a linear layer to a batch (columns are samples).
    pub fn apply_linear(&self, x: &Matrix) -> Result<Matrix> {
        match &self.kind {
            LayerKind::Linear { weight, bias } => {
                let y = weight.matmul(x).map_err(|e| Error::layer(&self.name, e.to_string()))?;
                match bias {
                    Some(b) => y.add_col_vector(b),
                    None => Ok(y),
                }
            }
            LayerKind::AttentionQK { .. } => {
                Err(Error::layer(&self.name, "not a linear layer"))
            }
        }
    }

    /// Attention logit map `(Wq X)^T (Wk X)`.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        match &self.kind {
            LayerKind::AttentionQK { wq, wk } => {
                let wrap = |e: Error| Error::layer(&self.name, e.to_string());
                let q = wq.matmul(x).map_err(wrap)?;
                let k = wk.matmul(x).map_err(wrap)?;
                q.transpose().matmul(&k)
            }
            LayerKind::Linear { .. } => Err(Error::layer(&self.name, "not an attention layer")),
        }
    }

    /// Prunable weight matrices keyed by their mask name.
    pub fn weights(&self) -> Vec<(String, &Matrix)> {
        match &self.kind {
            LayerKind::Linear { weight, .. } => vec![(self.name.clone(), weight)],
            LayerKind::AttentionQK { wq, wk } => vec![
                (query_key(&self.name), wq),
                (key_key(&self.name), wk),
            ],
        }
    }
}

/// Mask / score key of an attention layer's query projection.
pub fn query_key(layer: &str) -> String {
    format!("{layer}.wq")
}

/// Mask / score key of an attention layer's key projection.
pub fn key_key(layer: &str) -> String {
    format!("{layer}.wk")
}

/// Per-channel input transform `x -> (x - shift) / scale` applied to raw
/// inputs before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTransform {
    pub scale: Vector,
    pub shift: Vector,
}

impl InputTransform {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let inv: Vec<f64> = self.scale.iter().map(|s| 1.0 / s).collect();
        x.shift_rows(&self.shift)?.scale_rows(&inv)
    }
}

/// One activation stream: the output of a linear producer (or the raw
/// input) and every layer that reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    pub producer: Option<String>,
    pub attention_consumers: Vec<String>,
    pub linear_consumer: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Matrix,
    pub logits: Vec<(String, Matrix)>,
}

impl ForwardTrace {
    /// Final output with every logit map appended below it.
    pub fn stacked(&self) -> Result<Matrix> {
        let mut blocks = vec![&self.output];
        blocks.extend(self.logits.iter().map(|(_, l)| l));
        Matrix::vstack(&blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    topology: Vec<String>,
    input_transform: Option<InputTransform>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, topology: Vec<String>) -> Result<Self> {
        let model = Model {
            layers,
            topology,
            input_transform: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Model evaluated in layer order.
    pub fn sequential(layers: Vec<Layer>) -> Result<Self> {
        let topology = layers.iter().map(|l| l.name.clone()).collect();
        Model::new(layers, topology)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for l in &self.layers {
            if l.name == INPUT_TRANSFORM || l.name.is_empty() {
                return Err(Error::Topology(format!("reserved layer name `{}`", l.name)));
            }
            if !names.insert(l.name.as_str()) {
                return Err(Error::Topology(format!("duplicate layer name `{}`", l.name)));
            }
        }
        if self.topology.is_empty() {
            return Err(Error::Topology("empty topology".into()));
        }
        let mut seen = HashSet::new();
        let mut width: Option<usize> = None;
        for name in &self.topology {
            if !seen.insert(name.as_str()) {
                return Err(Error::Topology(format!("`{name}` appears twice in topology")));
            }
            let layer = self
                .layer(name)
                .ok_or_else(|| Error::Topology(format!("unknown layer `{name}`")))?;
            let d_in = layer.input_dim();
            if let Some(w) = width {
                if w != d_in {
                    return Err(Error::layer(
                        name,
                        format!("expects input width {d_in} but the stream carries {w}"),
                    ));
                }
            }
            width = Some(match &layer.kind {
                LayerKind::Linear { weight, .. } => weight.rows(),
                LayerKind::AttentionQK { .. } => d_in,
            });
        }
        if let Some(t) = &self.input_transform {
            let d = self.input_dim();
            if t.scale.len() != d || t.shift.len() != d || t.scale.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Topology("invalid input transform".into()));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn topology(&self) -> &[String] {
        &self.topology
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub(crate) fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Layers in evaluation order.
    pub fn ordered_layers(&self) -> impl Iterator<Item = &Layer> {
        self.topology.iter().map(|n| self.layer(n).expect("validated topology"))
    }

    pub fn input_dim(&self) -> usize {
        self.ordered_layers().next().expect("non-empty topology").input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.ordered_layers().fold(self.input_dim(), |w, l| match &l.kind {
            LayerKind::Linear { weight, .. } => weight.rows(),
            LayerKind::AttentionQK { .. } => w,
        })
    }

    pub fn input_transform(&self) -> Option<&InputTransform> {
        self.input_transform.as_ref()
    }

    pub(crate) fn set_input_transform(&mut self, t: Option<InputTransform>) -> Result<()> {
        self.input_transform = t;
        self.validate()
    }

    /// Every prunable weight matrix in topology order, keyed by mask name.
    pub fn weights(&self) -> Vec<(String, &Matrix)> {
        self.ordered_layers().flat_map(|l| l.weights()).collect()
    }

    pub fn weight(&self, key: &str) -> Option<&Matrix> {
        self.weights().into_iter().find(|(k, _)| k == key).map(|(_, w)| w)
    }

    pub(crate) fn weight_mut(&mut self, key: &str) -> Option<&mut Matrix> {
        for layer in &mut self.layers {
            match &mut layer.kind {
                LayerKind::Linear { weight, .. } if layer.name == key => return Some(weight),
                LayerKind::AttentionQK { wq, wk } => {
                    if query_key(&layer.name) == key {
                        return Some(wq);
                    }
                    if key_key(&layer.name) == key {
                        return Some(wk);
                    }
                }
                _ => {}
            }
        }
        None
    }

    /// Activation streams in evaluation order.
    pub fn streams(&self) -> Vec<Stream> {
        let mut out = Vec::new();
        let mut current = Stream {
            producer: None,
            attention_consumers: Vec::new(),
            linear_consumer: None,
        };
        for layer in self.ordered_layers() {
            if layer.is_linear() {
                current.linear_consumer = Some(layer.name.clone());
                out.push(current);
                current = Stream {
                    producer: Some(layer.name.clone()),
                    attention_consumers: Vec::new(),
                    linear_consumer: None,
                };
            } else {
                current.attention_consumers.push(layer.name.clone());
            }
        }
        out.push(current);
        out
    }

    /// The stream a layer reads.
    pub fn input_stream_of(&self, layer: &str) -> Option<Stream> {
        self.streams().into_iter().find(|s| {
            s.linear_consumer.as_deref() == Some(layer)
                || s.attention_consumers.iter().any(|a| a == layer)
        })
    }

    pub(crate) fn prepare_input(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            let first = &self.topology[0];
            return Err(Error::layer(
                first.as_str(),
                format!("input has {} rows, layer expects {}", x.rows(), self.input_dim()),
            ));
        }
        match &self.input_transform {
            Some(t) => t.apply(x),
            None => Ok(x.clone()),
        }
    }

    /// Final stream output for a batch whose columns are samples.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.prepare_input(x)?;
        for layer in self.ordered_layers() {
            if layer.is_linear() {
                h = layer.apply_linear(&h)?;
            }
        }
        Ok(h)
    }

    /// Final output plus every attention logit map, in topology order.
    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        let mut h = self.prepare_input(x)?;
        let mut logits = Vec::new();
        for layer in self.ordered_layers() {
            if layer.is_linear() {
                h = layer.apply_linear(&h)?;
            } else {
                logits.push((layer.name.clone(), layer.logits(&h)?));
            }
        }
        Ok(ForwardTrace { output: h, logits })
    }

    /// The batch each layer receives during a dense forward pass.
    pub fn layer_inputs(&self, x: &Matrix) -> Result<BTreeMap<String, Matrix>> {
        let mut h = self.prepare_input(x)?;
        let mut out = BTreeMap::new();
        for layer in self.ordered_layers() {
            out.insert(layer.name.clone(), h.clone());
            if layer.is_linear() {
                h = layer.apply_linear(&h)?;
            }
        }
        Ok(out)
    }

    /// Serializes the model into named tensors: `<layer>.weight`,
    /// `<layer>.bias`, `<layer>.wq`, `<layer>.wk`, and
    /// `input_transform.scale` / `input_transform.shift` when present.
    /// Layers are written in topology order, then any unordered ones.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::default();
        if let Some(t) = &self.input_transform {
            file.push(format!("{INPUT_TRANSFORM}.scale"), Tensor::from_vector(&t.scale)?)?;
            file.push(format!("{INPUT_TRANSFORM}.shift"), Tensor::from_vector(&t.shift)?)?;
        }
        let in_topology: HashSet<&str> = self.topology.iter().map(String::as_str).collect();
        let ordered = self
            .ordered_layers()
            .chain(self.layers.iter().filter(|l| !in_topology.contains(l.name.as_str())));
        for layer in ordered {
            match &layer.kind {
                LayerKind::Linear { weight, bias } => {
                    file.push(format!("{}.weight", layer.name), Tensor::from_matrix(weight)?)?;
                    if let Some(b) = bias {
                        file.push(format!("{}.bias", layer.name), Tensor::from_vector(b)?)?;
                    }
                }
                LayerKind::AttentionQK { wq, wk } => {
                    file.push(format!("{}.wq", layer.name), Tensor::from_matrix(wq)?)?;
                    file.push(format!("{}.wk", layer.name), Tensor::from_matrix(wk)?)?;
                }
            }
        }
        Ok(file)
    }

    /// Rebuilds a sequential model from tensors named as in [`Model::to_tensor_file`].
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        #[derive(Default)]
        struct Parts {
            weight: Option<Matrix>,
            bias: Option<Vector>,
            wq: Option<Matrix>,
            wk: Option<Matrix>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut parts: BTreeMap<String, Parts> = BTreeMap::new();
        let mut scale = None;
        let mut shift = None;
        for (name, tensor) in file.entries() {
            let (prefix, suffix) = name.rsplit_once('.').ok_or_else(|| {
                Error::Topology(format!("tensor `{name}` has no `.<role>` suffix"))
            })?;
            if prefix == INPUT_TRANSFORM {
                match suffix {
                    "scale" => scale = Some(tensor.to_vector()?),
                    "shift" => shift = Some(tensor.to_vector()?),
                    _ => return Err(Error::Topology(format!("unknown tensor `{name}`"))),
                }
                continue;
            }
            if !parts.contains_key(prefix) {
                order.push(prefix.to_string());
            }
            let p = parts.entry(prefix.to_string()).or_default();
            match suffix {
                "weight" => p.weight = Some(tensor.to_matrix()?),
                "bias" => p.bias = Some(tensor.to_vector()?),
                "wq" => p.wq = Some(tensor.to_matrix()?),
                "wk" => p.wk = Some(tensor.to_matrix()?),
                _ => return Err(Error::Topology(format!("unknown tensor role in `{name}`"))),
            }
        }
        let mut layers = Vec::with_capacity(order.len());
        for name in order {
            let p = parts.remove(&name).expect("recorded");
            let layer = match (p.weight, p.wq, p.wk) {
                (Some(w), None, None) => Layer::linear(&name, w, p.bias)?,
                (None, Some(q), Some(k)) if p.bias.is_none() => Layer::attention(&name, q, k)?,
                _ => {
                    return Err(Error::layer(
                        name,
                        "expected either weight[+bias] or a wq/wk pair",
                    ))
                }
            };
            layers.push(layer);
        }
        let mut model = Model::sequential(layers)?;
        match (scale, shift) {
            (Some(scale), Some(shift)) => {
                model.set_input_transform(Some(InputTransform { scale, shift }))?
            }
            (None, None) => {}
            _ => return Err(Error::Topology("input transform needs both scale and shift".into())),
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Model::from_tensor_file(&TensorFile::load(path)?)
    }

    /// Copy of the model with every value rounded through f32, as it would be
    /// after a save/load cycle.
    pub fn quantized_f32(&self) -> Result<Model> {
        Model::from_tensor_file(&self.to_tensor_file()?)
    }
}
