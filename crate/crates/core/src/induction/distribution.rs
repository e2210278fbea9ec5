use std::collections::BTreeMap;

use rayon::prelude::*;

use super::descent::{descend, DescentConfig, Group, Problem};
use super::{Induction, Layout, SiConfig, Stage, TraceRow};
use crate::error::{Error, Result};
use crate::importance::{CalibSet, Metric, ScoreContext};
use crate::masking::{apply_mask, Mask, MaskSet, SparsityPattern};
use crate::model::{key_key, query_key, Layer, LayerKind, Model};
use crate::pipeline::{layer_masks, score_contexts};
use crate::reparam::{reparam_attention, reparam_linear, shift_absorbable, AttnScale, ScaleShift, Transforms};
use crate::tensor::{Matrix, Vector};

fn sum_sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

/// Pruning error `(1/n) ||(W~ - W~ * M) X~||^2` of a reparameterized layer.
pub fn preadapt_objective(layer: &Layer, t: &ScaleShift, mask: &Mask, calib: &CalibSet) -> Result<f64> {
    let r = reparam_linear(layer, t)?;
    let LayerKind::Linear { weight, .. } = r.layer.kind() else {
        unreachable!("reparam_linear returns a linear layer")
    };
    let xt = r.input.apply(calib.x())?;
    let residual = weight.sub(&apply_mask(weight, mask)?)?;
    Ok(sum_sq(&residual.matmul(&xt)?) / calib.n_samples() as f64)
}

/// Objective and its gradient with respect to `log s` and `delta`, masks fixed.
pub fn preadapt_gradient(
    layer: &Layer,
    t: &ScaleShift,
    mask: &Mask,
    calib: &CalibSet,
) -> Result<(f64, Vector, Vector)> {
    let LayerKind::Linear { weight, .. } = layer.kind() else {
        return Err(Error::layer(layer.name(), "expected a linear layer"));
    };
    if t.len() != weight.cols() {
        return Err(Error::layer(layer.name(), "transform length does not match input width"));
    }
    let (j, du, dd) = linear_terms(weight, calib.x(), t.log_scale(), t.shift(), mask)?;
    Ok((j, Vector::new(du)?, Vector::new(dd)?))
}

pub(crate) fn linear_terms(
    w: &Matrix,
    x: &Matrix,
    u: &[f64],
    delta: &[f64],
    mask: &Mask,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = w.cols();
    let s: Vec<f64> = u.iter().map(|v| v.exp()).collect();
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    let wt = w.scale_cols(&s)?;
    let r = wt.sub(&apply_mask(&wt, mask)?)?;
    let xt = x.shift_rows(delta)?.scale_rows(&inv)?;
    let e = r.matmul(&xt)?;
    let n = x.cols() as f64;
    let j = sum_sq(&e) / n;

    let ge = e.scale(2.0 / n);
    let gr = ge.matmul(&xt.transpose())?;
    let gx = r.transpose().matmul(&ge)?;
    let mut du = vec![0.0; d];
    let mut dd = vec![0.0; d];
    for i in 0..r.rows() {
        for (jj, (g, rv)) in gr.row(i).iter().zip(r.row(i)).enumerate() {
            du[jj] += g * rv;
        }
    }
    for jj in 0..d {
        let (gsum, gx_dot) = gx
            .row(jj)
            .iter()
            .zip(xt.row(jj))
            .fold((0.0, 0.0), |(a, b), (g, xv)| (a + g, b + g * xv));
        du[jj] -= gx_dot;
        dd[jj] = -gsum * inv[jj];
    }
    Ok((j, du, dd))
}

/// Pruning error of the query and key projections after scaling query
/// rows by `s_a` and key rows by `1/s_a`.
pub fn attention_objective(
    layer: &Layer,
    a: &AttnScale,
    mask_q: &Mask,
    mask_k: &Mask,
    calib: &CalibSet,
) -> Result<f64> {
    let r = reparam_attention(layer, a)?;
    let LayerKind::AttentionQK { wq, wk } = r.kind() else {
        unreachable!("reparam_attention returns an attention layer")
    };
    let eq = wq.sub(&apply_mask(wq, mask_q)?)?.matmul(calib.x())?;
    let ek = wk.sub(&apply_mask(wk, mask_k)?)?.matmul(calib.x())?;
    Ok((sum_sq(&eq) + sum_sq(&ek)) / calib.n_samples() as f64)
}

/// Per-row squared pruning errors of the unscaled query and key projections.
pub(crate) fn attention_row_errors(
    wq: &Matrix,
    wk: &Matrix,
    x: &Matrix,
    mask_q: &Mask,
    mask_k: &Mask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = |w: &Matrix, m: &Mask| -> Result<Vec<f64>> {
        let e = w.sub(&apply_mask(w, m)?)?.matmul(x)?;
        Ok((0..e.rows()).map(|i| e.row(i).iter().map(|v| v * v).sum()).collect())
    };
    Ok((rows(wq, mask_q)?, rows(wk, mask_k)?))
}

/// Value and gradient in `v = log s_a` from cached row errors.
pub(crate) fn attention_terms(eq: &[f64], ek: &[f64], v: &[f64], n: f64) -> (f64, Vec<f64>) {
    let mut j = 0.0;
    let mut g = Vec::with_capacity(v.len());
    for ((q, k), vi) in eq.iter().zip(ek).zip(v) {
        let up = (2.0 * vi).exp() * q / n;
        let down = (-2.0 * vi).exp() * k / n;
        j += up + down;
        g.push(2.0 * (up - down));
    }
    (j, g)
}

/// Gradient of [`attention_objective`] with respect to `log s_a`.
pub fn attention_gradient(
    layer: &Layer,
    a: &AttnScale,
    mask_q: &Mask,
    mask_k: &Mask,
    calib: &CalibSet,
) -> Result<(f64, Vector)> {
    let LayerKind::AttentionQK { wq, wk } = layer.kind() else {
        return Err(Error::layer(layer.name(), "expected an attention layer"));
    };
    let (eq, ek) = attention_row_errors(wq, wk, calib.x(), mask_q, mask_k)?;
    let (j, g) = attention_terms(&eq, &ek, a.log_scale(), calib.n_samples() as f64);
    Ok((j, Vector::new(g)?))
}

struct Shared<'a> {
    model: &'a Model,
    contexts: &'a BTreeMap<String, ScoreContext>,
    metric: Metric,
    pattern: &'a SparsityPattern,
}

impl Shared<'_> {
    fn refreshed(&self, layer: &Layer, layout: &Layout, p: &[f64]) -> Result<MaskSet> {
        let t = layout.transforms(self.model, p)?;
        Ok(layer_masks(layer, self.contexts, self.metric, self.pattern, &t)?
            .into_iter()
            .map(|m| (m.layer_name.clone(), m))
            .collect())
    }
}

struct LinearFit<'a> {
    shared: &'a Shared<'a>,
    layer: &'a Layer,
    weight: &'a Matrix,
    x: &'a Matrix,
    layout: Layout,
    masks: MaskSet,
}

impl LinearFit<'_> {
    fn split<'p>(&self, p: &'p [f64]) -> (&'p [f64], Vec<f64>) {
        let d = self.weight.cols();
        let delta = if p.len() > d { p[d..].to_vec() } else { vec![0.0; d] };
        (&p[..d], delta)
    }

    fn mask(&self) -> &Mask {
        &self.masks[self.layer.name()]
    }
}

impl Problem for LinearFit<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.value_grad(p).map(|(v, _)| v)
    }

    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (u, delta) = self.split(p);
        let (j, mut du, dd) = linear_terms(self.weight, self.x, u, &delta, self.mask())?;
        if p.len() > u.len() {
            du.extend(dd);
        }
        Ok((j, du))
    }

    fn refresh(&mut self, p: &[f64]) -> Result<()> {
        self.masks = self.shared.refreshed(self.layer, &self.layout, p)?;
        Ok(())
    }

    fn masks(&self) -> &MaskSet {
        &self.masks
    }
}

struct AttentionFit<'a> {
    shared: &'a Shared<'a>,
    layer: &'a Layer,
    x: &'a Matrix,
    layout: Layout,
    masks: MaskSet,
    errors: (Vec<f64>, Vec<f64>),
}

impl AttentionFit<'_> {
    fn recompute_errors(&mut self) -> Result<()> {
        let LayerKind::AttentionQK { wq, wk } = self.layer.kind() else {
            unreachable!("attention fit holds an attention layer")
        };
        let name = self.layer.name();
        self.errors = attention_row_errors(wq, wk, self.x, &self.masks[&query_key(name)], &self.masks[&key_key(name)])?;
        Ok(())
    }
}

impl Problem for AttentionFit<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        self.value_grad(p).map(|(v, _)| v)
    }

    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(attention_terms(&self.errors.0, &self.errors.1, p, self.x.cols() as f64))
    }

    fn refresh(&mut self, p: &[f64]) -> Result<()> {
        self.masks = self.shared.refreshed(self.layer, &self.layout, p)?;
        self.recompute_errors()
    }

    fn masks(&self) -> &MaskSet {
        &self.masks
    }
}

fn masks_of(layer: &Layer, masks: &MaskSet) -> Result<MaskSet> {
    let keys: Vec<String> = match layer.kind() {
        LayerKind::Linear { .. } => vec![layer.name().to_string()],
        LayerKind::AttentionQK { .. } => vec![query_key(layer.name()), key_key(layer.name())],
    };
    keys.into_iter()
        .map(|k| {
            masks
                .get(&k)
                .cloned()
                .map(|m| (k.clone(), m))
                .ok_or_else(|| Error::layer(layer.name(), format!("no mask for `{k}`")))
        })
        .collect()
}

struct LayerOutcome {
    name: String,
    transforms: Option<Transforms>,
    masks: MaskSet,
    initial: f64,
    best: f64,
    trace: Vec<(usize, f64)>,
}

/// Fits each layer's transform independently (in parallel) to minimize its
/// own pruning error, starting from `masks` and identity transforms.
///
/// Shifts are learned only where they can later be absorbed.
pub fn optimize_distribution(
    model: &Model,
    masks: &MaskSet,
    calib: &CalibSet,
    pattern: &SparsityPattern,
    metric: Metric,
    cfg: &SiConfig,
) -> Result<Induction> {
    cfg.validate()?;
    pattern.validate()?;
    let contexts = score_contexts(model, calib)?;
    let inputs = model.layer_inputs(calib.x())?;
    let shared = Shared {
        model,
        contexts: &contexts,
        metric,
        pattern,
    };
    let descent = DescentConfig {
        lr: cfg.lr,
        steps: cfg.steps(calib.n_samples()),
        refresh_period: cfg.mask_refresh_period,
    };
    let layers: Vec<&Layer> = model.ordered_layers().collect();
    let outcomes: Vec<LayerOutcome> = layers
        .par_iter()
        .map(|&layer| -> Result<LayerOutcome> {
            let name = layer.name().to_string();
            let x = &inputs[&name];
            let start = masks_of(layer, masks)?;
            let mut layout = Layout::default();
            let d = match layer.kind() {
                LayerKind::Linear { weight, .. } => {
                    layout.push(&name, Group::LogScale, weight.cols());
                    if cfg.optimize_shift && shift_absorbable(model, &name, cfg.materialize_bias) {
                        layout.push(&name, Group::Shift, weight.cols());
                    }
                    let mut fit = LinearFit {
                        shared: &shared,
                        layer,
                        weight,
                        x,
                        layout: layout.clone(),
                        masks: start,
                    };
                    descend(&mut fit, vec![0.0; layout.len], &layout.groups(), &descent, &name)?
                }
                LayerKind::AttentionQK { wq, .. } if cfg.optimize_attention => {
                    layout.push(&name, Group::AttnLogScale, wq.rows());
                    let mut fit = AttentionFit {
                        shared: &shared,
                        layer,
                        x,
                        layout: layout.clone(),
                        masks: start,
                        errors: (Vec::new(), Vec::new()),
                    };
                    fit.recompute_errors()?;
                    descend(&mut fit, vec![0.0; layout.len], &layout.groups(), &descent, &name)?
                }
                LayerKind::AttentionQK { .. } => {
                    return Ok(LayerOutcome {
                        name,
                        transforms: None,
                        masks: start,
                        initial: 0.0,
                        best: 0.0,
                        trace: Vec::new(),
                    });
                }
            };
            Ok(LayerOutcome {
                transforms: Some(layout.transforms(model, &d.params)?),
                name,
                masks: d.masks,
                initial: d.initial,
                best: d.best,
                trace: d.trace,
            })
        })
        .collect::<Result<_>>()?;

    let mut transforms = Transforms::identity_for(model);
    let mut out_masks = MaskSet::new();
    let mut trace = Vec::new();
    let (mut initial, mut fin) = (0.0, 0.0);
    for o in outcomes {
        if let Some(t) = o.transforms {
            if let Some(ss) = t.linear.get(&o.name) {
                transforms.linear.insert(o.name.clone(), ss.clone());
            }
            if let Some(a) = t.attention.get(&o.name) {
                transforms.attention.insert(o.name.clone(), a.clone());
            }
        }
        out_masks.extend(o.masks);
        initial += o.initial;
        fin += o.best;
        trace.extend(o.trace.into_iter().map(|(step, objective)| TraceRow {
            stage: Stage::Distribution,
            layer: o.name.clone(),
            step,
            objective,
        }));
    }
    Ok(Induction {
        transforms,
        masks: out_masks,
        initial_objective: initial,
        final_objective: fin,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::induction::{gradient_discrepancy, numeric_gradient};
    use crate::masking::make_mask;
    use crate::rng::Rng;

    fn layer_and_mask(rng: &mut Rng) -> (Layer, Mask, CalibSet) {
        let w = rng.normal_matrix(6, 5);
        let layer = Layer::linear("l", w.clone(), Some(rng.normal_vector(6))).unwrap();
        let mask = make_mask("l", &w.abs(), &SparsityPattern::unstructured(0.5).unwrap()).unwrap();
        let x = rng.normal_matrix(5, 20).add_col_vector(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        (layer, mask, CalibSet::new(x))
    }

    #[test]
    fn identity_transform_gives_plain_pruning_error() {
        let mut rng = Rng::new(1);
        let (layer, mask, calib) = layer_and_mask(&mut rng);
        let LayerKind::Linear { weight, .. } = layer.kind() else { unreachable!() };
        let direct = sum_sq(&weight.sub(&apply_mask(weight, &mask).unwrap()).unwrap().matmul(calib.x()).unwrap()) / 20.0;
        let j = preadapt_objective(&layer, &ScaleShift::identity("l", 5), &mask, &calib).unwrap();
        assert!((j - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn scale_alone_does_not_change_error_for_fixed_mask() {
        let mut rng = Rng::new(2);
        let (layer, mask, calib) = layer_and_mask(&mut rng);
        let j0 = preadapt_objective(&layer, &ScaleShift::identity("l", 5), &mask, &calib).unwrap();
        let s: Vec<f64> = (0..5).map(|_| rng.log_uniform(0.1, 10.0)).collect();
        let j1 = preadapt_objective(&layer, &ScaleShift::new("l", &s, &[0.0; 5]).unwrap(), &mask, &calib).unwrap();
        assert!((j0 - j1).abs() <= 1e-10 * j0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let (layer, mask, calib) = layer_and_mask(&mut rng);
        let s: Vec<f64> = (0..5).map(|_| rng.log_uniform(0.5, 2.0)).collect();
        let d: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let t = ScaleShift::new("l", &s, &d).unwrap();
        let (_, du, dd) = preadapt_gradient(&layer, &t, &mask, &calib).unwrap();
        let mut p: Vec<f64> = t.log_scale().to_vec();
        p.extend_from_slice(t.shift());
        let f = |q: &[f64]| {
            let t = ScaleShift::from_log("l", Vector::new(q[..5].to_vec())?, Vector::new(q[5..].to_vec())?)?;
            preadapt_objective(&layer, &t, &mask, &calib)
        };
        let numeric = numeric_gradient(f, &p, 1e-5).unwrap();
        let mut analytic = du.into_vec();
        analytic.extend(dd.into_vec());
        assert!(gradient_discrepancy(&analytic, &numeric) <= 1e-6);
        assert!(analytic[..5].iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn mean_shift_is_the_optimal_centering() {
        let mut rng = Rng::new(4);
        let (layer, mask, calib) = layer_and_mask(&mut rng);
        let mean: Vec<f64> = (0..5).map(|j| calib.x().row(j).iter().sum::<f64>() / 20.0).collect();
        let t = ScaleShift::new("l", &[1.0; 5], &mean).unwrap();
        let (_, _, dd) = preadapt_gradient(&layer, &t, &mask, &calib).unwrap();
        assert!(dd.max_abs() < 1e-9, "{dd:?}");
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let wq = rng.normal_matrix(4, 6);
        let wk = rng.normal_matrix(4, 6);
        let layer = Layer::attention("a", wq.clone(), wk.clone()).unwrap();
        let p = SparsityPattern::unstructured(0.5).unwrap();
        let mq = make_mask("a.wq", &wq.abs(), &p).unwrap();
        let mk = make_mask("a.wk", &wk.abs(), &p).unwrap();
        let calib = CalibSet::new(rng.normal_matrix(6, 30));
        let v: Vec<f64> = (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let a = AttnScale::from_log("a", Vector::new(v.clone()).unwrap());
        let (j, g) = attention_gradient(&layer, &a, &mq, &mk, &calib).unwrap();
        let j_literal = attention_objective(&layer, &a, &mq, &mk, &calib).unwrap();
        assert!((j - j_literal).abs() <= 1e-12 * j);
        let f = |q: &[f64]| attention_objective(&layer, &AttnScale::from_log("a", Vector::new(q.to_vec())?), &mq, &mk, &calib);
        let numeric = numeric_gradient(f, &v, 1e-5).unwrap();
        assert!(gradient_discrepancy(&g, &numeric) <= 1e-6);
    }
}
