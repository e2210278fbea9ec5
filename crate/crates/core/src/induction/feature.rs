use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::descent::{descend, DescentConfig, Group, Problem};
use super::distribution::{attention_row_errors, attention_terms, linear_terms};
use super::{Induction, Layout, SiConfig, Stage, TraceRow};
use crate::error::{Error, Result};
use crate::importance::{CalibSet, Metric, ScoreContext};
use crate::masking::{apply_mask, MaskSet, SparsityPattern};
use crate::model::{key_key, query_key, Layer, LayerKind, Model};
use crate::pipeline::{apply_masks, compute_masks, score_contexts};
use crate::reparam::{shift_absorbable, ScaleShift, Transforms};
use crate::tensor::{Matrix, Vector};

/// Norm applied to absorbed weights in the regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// `(sum |a|^p)^(1/p)`, `p >= 1`.
    Entrywise(f64),
    /// Largest singular value.
    Spectral,
}

/// Strictly increasing map applied to channel means in the scale init.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MonotoneMap {
    Identity,
    Affine { a: f64, b: f64 },
}

impl MonotoneMap {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            MonotoneMap::Identity => v,
            MonotoneMap::Affine { a, b } => a * v + b,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            MonotoneMap::Affine { a, b } if !(a > 0.0) || !a.is_finite() || !b.is_finite() => Err(Error::Domain(
                format!("affine map needs a finite positive slope, got a={a}, b={b}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub norm: NormKind,
    pub g: MonotoneMap,
    /// Floor for initial scales.
    pub eps_init: f64,
}

impl Default for FeatureLossConfig {
    fn default() -> Self {
        FeatureLossConfig {
            lambda: 0.1,
            alpha: 0.01,
            norm: NormKind::Entrywise(2.0),
            g: MonotoneMap::Identity,
            eps_init: 1e-4,
        }
    }
}

impl FeatureLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Domain(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let NormKind::Entrywise(p) = self.norm {
            if !(p >= 1.0) || !p.is_finite() {
                return Err(Error::Domain(format!("norm order must be >= 1, got {p}")));
            }
        }
        if !(self.eps_init > 0.0) {
            return Err(Error::Domain(format!("eps_init must be positive, got {}", self.eps_init)));
        }
        self.g.validate()
    }
}

/// Per-channel median and mean of a layer's outputs over calibration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustStats {
    pub median: Vector,
    pub mean: Vector,
}

impl RobustStats {
    pub fn of(y: &Matrix) -> Self {
        let (median, mean) = y.row_stats();
        RobustStats { median, mean }
    }
}

/// Initial scales for the channels `layer` produces:
/// `max((median - g(mean))^2, eps_init)` of its bias-free outputs `W x`.
pub fn init_scales(layer: &Layer, inputs: &Matrix, cfg: &FeatureLossConfig) -> Result<Vector> {
    cfg.validate()?;
    let LayerKind::Linear { weight, .. } = layer.kind() else {
        return Err(Error::layer(layer.name(), "scale init needs a linear producer"));
    };
    if weight.cols() != inputs.rows() {
        return Err(Error::layer(layer.name(), "calibration width does not match layer input"));
    }
    let stats = RobustStats::of(&weight.matmul(inputs)?);
    Vector::new(
        stats
            .median
            .iter()
            .zip(stats.mean.iter())
            .map(|(m, mu)| (m - cfg.g.apply(*mu)).powi(2).max(cfg.eps_init))
            .collect(),
    )
}

/// Transforms used to start the feature stage: each linear layer's input
/// scale comes from the statistics of the layer producing that input; layers
/// reading the model input start at one.
pub fn init_transforms(model: &Model, calib: &CalibSet, cfg: &FeatureLossConfig) -> Result<Transforms> {
    let inputs = model.layer_inputs(calib.x())?;
    let mut t = Transforms::identity_for(model);
    for stream in model.streams() {
        let (Some(producer), Some(consumer)) = (&stream.producer, &stream.linear_consumer) else {
            continue;
        };
        let p = model.layer(producer).expect("stream producers exist");
        let s = init_scales(p, &inputs[producer], cfg)?;
        let n = s.len();
        t.linear
            .insert(consumer.clone(), ScaleShift::new(consumer.clone(), &s, &vec![0.0; n])?);
    }
    Ok(t)
}

fn norm_with_grad(a: &Matrix, kind: NormKind) -> Result<(f64, Matrix)> {
    match kind {
        NormKind::Entrywise(p) => {
            let n = a.entrywise_p_norm(p)?;
            if n == 0.0 {
                return Ok((0.0, Matrix::zeros(a.rows(), a.cols())));
            }
            let scale = n.powf(1.0 - p);
            Ok((n, a.map(|v| v.signum() * v.abs().powf(p - 1.0) * scale)))
        }
        NormKind::Spectral => {
            let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
            let svd = m.svd(true, true);
            let (k, sigma) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            let u = svd.u.as_ref().expect("requested").column(k).into_owned();
            let vt = svd.v_t.as_ref().expect("requested").row(k).into_owned();
            Ok((sigma, Matrix::from_fn(a.rows(), a.cols(), |i, j| u[i] * vt[j])))
        }
    }
}

/// Value of [`NormKind`] on a matrix.
pub fn weight_norm(a: &Matrix, kind: NormKind) -> Result<f64> {
    norm_with_grad(a, kind).map(|(n, _)| n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLoss {
    pub total: f64,
    pub mse: f64,
    pub reg: f64,
}

/// Output mismatch of the masked induced model against the dense model,
/// plus `lambda * exp(-alpha * sum of weight norms)` over `layers` of the
/// induced model (both projections for attention layers).
pub fn feature_loss(
    dense: &Model,
    induced: &Model,
    masks: &MaskSet,
    calib: &CalibSet,
    layers: &[String],
    cfg: &FeatureLossConfig,
) -> Result<FeatureLoss> {
    cfg.validate()?;
    let target = dense.forward(calib.x())?;
    let out = apply_masks(induced, masks)?.forward(calib.x())?;
    let diff = out.sub(&target)?;
    let mse = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    let mut norms = 0.0;
    for name in layers {
        let layer = induced
            .layer(name)
            .ok_or_else(|| Error::layer(name, "not in the induced model"))?;
        for (_, w) in layer.weights() {
            norms += weight_norm(w, cfg.norm)?;
        }
    }
    let reg = (-cfg.alpha * norms).exp();
    Ok(FeatureLoss {
        total: mse + cfg.lambda * reg,
        mse,
        reg,
    })
}

struct FeatureFit<'a> {
    model: &'a Model,
    cfg: &'a SiConfig,
    metric: Metric,
    pattern: &'a SparsityPattern,
    contexts: BTreeMap<String, ScoreContext>,
    layer_inputs: BTreeMap<String, Matrix>,
    x0: Matrix,
    target: Matrix,
    linears: Vec<&'a Layer>,
    /// Linear layer reading each linear layer's output.
    next_linear: BTreeMap<String, String>,
    /// Linear layer reading the same stream as each attention layer.
    sibling_linear: BTreeMap<String, String>,
    layout: Layout,
    masks: MaskSet,
}

struct Step {
    xt: Matrix,
    wm: Matrix,
    s: Vec<f64>,
}

impl FeatureFit<'_> {
    fn add(&self, grad: &mut [f64], layer: &str, group: Group, values: &[f64], sign: f64) {
        if let Some(slot) = self.layout.find(layer, group) {
            for (g, v) in grad[slot.offset..slot.offset + slot.len].iter_mut().zip(values) {
                *g += sign * v;
            }
        }
    }

    fn evaluate(&self, p: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let t = self.layout.transforms(self.model, p)?;
        let mut grad = vec![0.0; self.layout.len];

        let mut h = self.x0.clone();
        let mut steps = Vec::with_capacity(self.linears.len());
        for layer in &self.linears {
            let LayerKind::Linear { weight, bias } = layer.kind() else { unreachable!() };
            let ss = &t.linear[layer.name()];
            let s = ss.scale().into_vec();
            let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
            let xt = h.shift_rows(ss.shift())?.scale_rows(&inv)?;
            let wm = apply_mask(&weight.scale_cols(&s)?, &self.masks[layer.name()])?;
            let mut y = wm.matmul(&xt)?;
            let wd = weight.mul_vec(ss.shift())?;
            let b: Vec<f64> = match bias {
                Some(b) => b.iter().zip(wd.iter()).map(|(b, w)| b + w).collect(),
                None => wd.into_vec(),
            };
            y = y.add_col_vector(&b)?;
            steps.push(Step { xt, wm, s });
            h = y;
        }
        let diff = h.sub(&self.target)?;
        let count = diff.len() as f64;
        let mse = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / count;

        if want_grad {
            let mut g = diff.scale(2.0 / count);
            for (idx, (layer, st)) in self.linears.iter().zip(&steps).enumerate().rev() {
                let LayerKind::Linear { weight, .. } = layer.kind() else { unreachable!() };
                let name = layer.name();
                let gsum: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                let d_bias_shift = weight.transpose().mul_vec(&gsum)?;
                let dwm = g.matmul(&st.xt.transpose())?;
                let dxt = st.wm.transpose().matmul(&g)?;
                let d = weight.cols();
                let mut du = vec![0.0; d];
                let mut dd = d_bias_shift.into_vec();
                for i in 0..dwm.rows() {
                    for (j, (a, b)) in dwm.row(i).iter().zip(st.wm.row(i)).enumerate() {
                        du[j] += a * b;
                    }
                }
                for j in 0..d {
                    let (sum, dot) = dxt
                        .row(j)
                        .iter()
                        .zip(st.xt.row(j))
                        .fold((0.0, 0.0), |(a, b), (gv, xv)| (a + gv, b + gv * xv));
                    du[j] -= dot;
                    dd[j] -= sum / st.s[j];
                }
                self.add(&mut grad, name, Group::LogScale, &du, 1.0);
                self.add(&mut grad, name, Group::Shift, &dd, 1.0);
                if idx > 0 {
                    let inv: Vec<f64> = st.s.iter().map(|v| 1.0 / v).collect();
                    g = dxt.scale_rows(&inv)?;
                }
            }
        }

        let fc = &self.cfg.feature;
        let mut total = mse;
        if fc.lambda > 0.0 {
            let mut norms = 0.0;
            let mut dn = vec![0.0; self.layout.len];
            let ones = |n: usize| vec![1.0; n];
            for layer in self.model.ordered_layers() {
                let name = layer.name();
                match layer.kind() {
                    LayerKind::Linear { weight, .. } => {
                        let c = t.linear[name].scale().into_vec();
                        let next = self.next_linear.get(name);
                        let r = match next {
                            Some(nx) => t.linear[nx].log_scale().iter().map(|v| (-v).exp()).collect(),
                            None => ones(weight.rows()),
                        };
                        let a = weight.scale_rows(&r)?.scale_cols(&c)?;
                        let (n, gamma) = norm_with_grad(&a, fc.norm)?;
                        norms += n;
                        if want_grad {
                            let (dc, dr) = log_scale_grads(&gamma, &a);
                            self.add(&mut dn, name, Group::LogScale, &dc, 1.0);
                            if let Some(nx) = next {
                                self.add(&mut dn, nx, Group::LogScale, &dr, -1.0);
                            }
                        }
                    }
                    LayerKind::AttentionQK { wq, wk } => {
                        let sib = self.sibling_linear.get(name);
                        let c = match sib {
                            Some(l) => t.linear[l].scale().into_vec(),
                            None => ones(wq.cols()),
                        };
                        let sa = &t.attention[name];
                        for (w, r, sign) in [(wq, sa.scale(), 1.0), (wk, sa.inverse_scale(), -1.0)] {
                            let a = w.scale_rows(&r)?.scale_cols(&c)?;
                            let (n, gamma) = norm_with_grad(&a, fc.norm)?;
                            norms += n;
                            if want_grad {
                                let (dc, dr) = log_scale_grads(&gamma, &a);
                                if let Some(l) = sib {
                                    self.add(&mut dn, l, Group::LogScale, &dc, 1.0);
                                }
                                self.add(&mut dn, name, Group::AttnLogScale, &dr, sign);
                            }
                        }
                    }
                }
            }
            let reg = (-fc.alpha * norms).exp();
            total += fc.lambda * reg;
            let k = -fc.lambda * fc.alpha * reg;
            for (g, d) in grad.iter_mut().zip(&dn) {
                *g += k * d;
            }
        }

        let w = self.cfg.dist_weight;
        if self.cfg.stage == Stage::Both && w > 0.0 {
            for layer in self.model.ordered_layers() {
                let name = layer.name();
                let x = &self.layer_inputs[name];
                match layer.kind() {
                    LayerKind::Linear { weight, .. } => {
                        let ss = &t.linear[name];
                        let (j, du, dd) = linear_terms(weight, x, ss.log_scale(), ss.shift(), &self.masks[name])?;
                        total += w * j;
                        self.add(&mut grad, name, Group::LogScale, &du, w);
                        self.add(&mut grad, name, Group::Shift, &dd, w);
                    }
                    LayerKind::AttentionQK { wq, wk } => {
                        let (eq, ek) = attention_row_errors(
                            wq,
                            wk,
                            x,
                            &self.masks[&query_key(name)],
                            &self.masks[&key_key(name)],
                        )?;
                        let (j, dv) = attention_terms(&eq, &ek, t.attention[name].log_scale(), x.cols() as f64);
                        total += w * j;
                        self.add(&mut grad, name, Group::AttnLogScale, &dv, w);
                    }
                }
            }
        }
        Ok((total, grad))
    }
}

/// `dN/dlog c_j = sum_i G_ij A_ij` and `dN/dlog r_i = sum_j G_ij A_ij` for
/// `A = diag(r) W diag(c)`.
fn log_scale_grads(gamma: &Matrix, a: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut dc = vec![0.0; a.cols()];
    let mut dr = vec![0.0; a.rows()];
    for i in 0..a.rows() {
        for (j, (g, v)) in gamma.row(i).iter().zip(a.row(i)).enumerate() {
            dc[j] += g * v;
            dr[i] += g * v;
        }
    }
    (dc, dr)
}

impl Problem for FeatureFit<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.evaluate(p, false).map(|(v, _)| v)
    }

    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(p, true)
    }

    fn refresh(&mut self, p: &[f64]) -> Result<()> {
        let t = self.layout.transforms(self.model, p)?;
        self.masks = compute_masks(self.model, &self.contexts, self.metric, self.pattern, &t)?;
        Ok(())
    }

    fn masks(&self) -> &MaskSet {
        &self.masks
    }
}

fn build_fit<'a>(
    model: &'a Model,
    calib: &CalibSet,
    pattern: &'a SparsityPattern,
    metric: Metric,
    cfg: &'a SiConfig,
) -> Result<FeatureFit<'a>> {
    let mut layout = Layout::default();
    for layer in model.ordered_layers() {
        let name = layer.name();
        match layer.kind() {
            LayerKind::Linear { weight, .. } => {
                layout.push(name, Group::LogScale, weight.cols());
                if cfg.optimize_shift && shift_absorbable(model, name, cfg.materialize_bias) {
                    layout.push(name, Group::Shift, weight.cols());
                }
            }
            LayerKind::AttentionQK { wq, .. } if cfg.optimize_attention => {
                layout.push(name, Group::AttnLogScale, wq.rows());
            }
            LayerKind::AttentionQK { .. } => {}
        }
    }
    let mut next_linear = BTreeMap::new();
    let mut sibling_linear = BTreeMap::new();
    for stream in model.streams() {
        let Some(consumer) = &stream.linear_consumer else {
            continue;
        };
        if let Some(p) = &stream.producer {
            next_linear.insert(p.clone(), consumer.clone());
        }
        for a in &stream.attention_consumers {
            sibling_linear.insert(a.clone(), consumer.clone());
        }
    }
    Ok(FeatureFit {
        model,
        cfg,
        metric,
        pattern,
        contexts: score_contexts(model, calib)?,
        layer_inputs: model.layer_inputs(calib.x())?,
        x0: model.prepare_input(calib.x())?,
        target: model.forward(calib.x())?,
        linears: model.ordered_layers().filter(|l| l.is_linear()).collect(),
        next_linear,
        sibling_linear,
        layout,
        masks: MaskSet::new(),
    })
}

/// Fits all transforms jointly against the dense model's output, starting
/// from the statistics-based scale init. With [`Stage::Both`] the summed
/// per-layer pruning errors are added with weight `dist_weight`.
pub fn optimize_features(
    model: &Model,
    calib: &CalibSet,
    pattern: &SparsityPattern,
    metric: Metric,
    cfg: &SiConfig,
) -> Result<Induction> {
    cfg.validate()?;
    pattern.validate()?;
    let init = init_transforms(model, calib, &cfg.feature)?;
    let mut fit = build_fit(model, calib, pattern, metric, cfg)?;
    let p0 = fit.layout.pack(&init);
    fit.refresh(&p0)?;
    let descent = DescentConfig {
        lr: cfg.lr,
        steps: cfg.steps(calib.n_samples()),
        refresh_period: cfg.mask_refresh_period,
    };
    let groups = fit.layout.groups();
    let d = descend(&mut fit, p0, &groups, &descent, "<joint>")?;
    let stage = if cfg.stage == Stage::Both { Stage::Both } else { Stage::Feature };
    Ok(Induction {
        transforms: fit.layout.transforms(model, &d.params)?,
        masks: d.masks,
        initial_objective: d.initial,
        final_objective: d.best,
        trace: d
            .trace
            .into_iter()
            .map(|(step, objective)| TraceRow {
                stage,
                layer: "*".into(),
                step,
                objective,
            })
            .collect(),
    })
}

/// The joint objective over a flat parameter vector with masks held
/// fixed; exposed for verification.
pub struct JointObjective<'a> {
    fit: FeatureFit<'a>,
}

impl<'a> JointObjective<'a> {
    pub fn new(
        model: &'a Model,
        calib: &CalibSet,
        pattern: &'a SparsityPattern,
        metric: Metric,
        cfg: &'a SiConfig,
        masks: &MaskSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut fit = build_fit(model, calib, pattern, metric, cfg)?;
        fit.masks = masks.clone();
        Ok(JointObjective { fit })
    }

    pub fn pack(&self, t: &Transforms) -> Vec<f64> {
        self.fit.layout.pack(t)
    }

    pub fn transforms(&self, p: &[f64]) -> Result<Transforms> {
        self.fit.layout.transforms(self.fit.model, p)
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        self.fit.value(p)
    }

    pub fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.fit.value_grad(p)
    }
}
