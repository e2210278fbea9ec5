//! Plain pruning, induced pruning, and their side-by-side comparison.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{output_distortion, DistortionReport};
use crate::importance::{transformed_scores, CalibSet, Metric, ScoreContext};
use crate::induction::{induce, Induction, SiConfig};
use crate::masking::{apply_mask, make_mask, Mask, MaskSet, SparsityPattern};
use crate::model::{key_key, query_key, Layer, LayerKind, Model};
use crate::reparam::{absorb, Transforms};
use crate::tensor::{Matrix, Vector};

/// Per-weight scoring context built from the dense model's layer inputs.
pub fn score_contexts(model: &Model, calib: &CalibSet) -> Result<BTreeMap<String, ScoreContext>> {
    let inputs = model.layer_inputs(calib.x())?;
    let mut out = BTreeMap::new();
    for layer in model.ordered_layers() {
        let x = &inputs[layer.name()];
        let keys = match layer.kind() {
            LayerKind::Linear { .. } => vec![layer.name().to_string()],
            LayerKind::AttentionQK { .. } => vec![query_key(layer.name()), key_key(layer.name())],
        };
        for k in keys {
            let ctx = ScoreContext::new(&k, CalibSet::new(x.clone()))?;
            out.insert(k, ctx);
        }
    }
    Ok(out)
}

fn context<'a>(contexts: &'a BTreeMap<String, ScoreContext>, key: &str) -> Result<&'a ScoreContext> {
    contexts
        .get(key)
        .ok_or_else(|| Error::layer(key, "no calibration context"))
}

/// Importance scores of one layer's weights under `transforms`, keyed like
/// [`Model::weights`].
pub fn layer_scores(
    layer: &Layer,
    contexts: &BTreeMap<String, ScoreContext>,
    metric: Metric,
    transforms: &Transforms,
) -> Result<Vec<(String, Matrix)>> {
    let name = layer.name();
    match layer.kind() {
        LayerKind::Linear { weight, .. } => {
            let (s, d) = match transforms.linear.get(name) {
                Some(t) if !t.is_identity() => (Some(t.scale().into_vec()), t.has_shift().then(|| t.shift().to_vec())),
                _ => (None, None),
            };
            let scores = transformed_scores(metric, weight, context(contexts, name)?, s.as_deref(), d.as_deref(), None)?;
            Ok(vec![(name.to_string(), scores)])
        }
        LayerKind::AttentionQK { wq, wk } => {
            let (up, down) = match transforms.attention.get(name) {
                Some(a) if !a.is_identity() => (Some(a.scale().into_vec()), Some(a.inverse_scale().into_vec())),
                _ => (None, None),
            };
            let (qk, kk) = (query_key(name), key_key(name));
            let sq = transformed_scores(metric, wq, context(contexts, &qk)?, None, None, up.as_deref())?;
            let sk = transformed_scores(metric, wk, context(contexts, &kk)?, None, None, down.as_deref())?;
            Ok(vec![(qk, sq), (kk, sk)])
        }
    }
}

/// Masks for one layer's weights, scored under `transforms`.
pub fn layer_masks(
    layer: &Layer,
    contexts: &BTreeMap<String, ScoreContext>,
    metric: Metric,
    pattern: &SparsityPattern,
    transforms: &Transforms,
) -> Result<Vec<Mask>> {
    layer_scores(layer, contexts, metric, transforms)?
        .iter()
        .map(|(key, scores)| make_mask(key, scores, pattern))
        .collect()
}

/// Masks for every weight of `model`, keyed like [`Model::weights`].
pub fn compute_masks(
    model: &Model,
    contexts: &BTreeMap<String, ScoreContext>,
    metric: Metric,
    pattern: &SparsityPattern,
    transforms: &Transforms,
) -> Result<MaskSet> {
    pattern.validate()?;
    let layers: Vec<&Layer> = model.ordered_layers().collect();
    let per_layer = layers
        .par_iter()
        .map(|l| layer_masks(l, contexts, metric, pattern, transforms))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_layer
        .into_iter()
        .flatten()
        .map(|m| (m.layer_name.clone(), m))
        .collect())
}

/// Copy of `model` with each masked weight multiplied by its mask; weights
/// without a mask stay dense.
pub fn apply_masks(model: &Model, masks: &MaskSet) -> Result<Model> {
    let mut out = model.clone();
    for (key, mask) in masks {
        let w = out
            .weight_mut(key)
            .ok_or_else(|| Error::layer(key, "mask targets an unknown weight"))?;
        *w = apply_mask(w, mask)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Pruned {
    pub model: Model,
    pub masks: MaskSet,
}

/// Scores, masks and applies in one pass without any induction.
pub fn prune_model(model: &Model, calib: &CalibSet, pattern: &SparsityPattern, metric: Metric) -> Result<Pruned> {
    let contexts = score_contexts(model, calib)?;
    let masks = compute_masks(model, &contexts, metric, pattern, &Transforms::identity_for(model))?;
    Ok(Pruned {
        model: apply_masks(model, &masks)?,
        masks,
    })
}

/// Per-weight output distortion in the original output coordinates.
///
/// Linear layers are measured on `W~ = W diag(s)` against the transformed
/// inputs, which equals `(W - W*M)(X - delta)`. Attention projections are
/// measured on the original weights; row scaling only changes which
/// entries the mask keeps.
pub fn layer_distortions(
    model: &Model,
    calib: &CalibSet,
    transforms: &Transforms,
    masks: &MaskSet,
) -> Result<Vec<DistortionReport>> {
    let inputs = model.layer_inputs(calib.x())?;
    let layers: Vec<&Layer> = model.ordered_layers().collect();
    let per_layer = layers
        .par_iter()
        .map(|layer| -> Result<Vec<DistortionReport>> {
            let name = layer.name();
            let x = &inputs[name];
            let mask = |k: &str| {
                masks
                    .get(k)
                    .ok_or_else(|| Error::layer(k, "no mask for weight"))
            };
            match layer.kind() {
                LayerKind::Linear { weight, .. } => {
                    let (w, xt) = match transforms.linear.get(name) {
                        Some(t) if !t.is_identity() => (weight.scale_cols(&t.scale())?, t.input_transform().apply(x)?),
                        _ => (weight.clone(), x.clone()),
                    };
                    let y = w.matmul(&xt)?;
                    let y_hat = apply_mask(&w, mask(name)?)?.matmul(&xt)?;
                    Ok(vec![output_distortion(name, &y, &y_hat)?])
                }
                LayerKind::AttentionQK { wq, wk } => {
                    let mut out = Vec::with_capacity(2);
                    for (k, w) in [(query_key(name), wq), (key_key(name), wk)] {
                        let y = w.matmul(x)?;
                        let y_hat = apply_mask(w, mask(&k)?)?.matmul(x)?;
                        out.push(output_distortion(&k, &y, &y_hat)?);
                    }
                    Ok(out)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_layer.into_iter().flatten().collect())
}

/// Aggregate of per-layer reports: norms combine as root-sum-of-squares.
pub fn total_distortion(rows: &[DistortionReport]) -> Result<DistortionReport> {
    let frob = rows.iter().map(|r| r.frob * r.frob).sum::<f64>().sqrt();
    let y2: f64 = rows
        .iter()
        .filter(|r| r.rel > 0.0)
        .map(|r| (r.frob / r.rel).powi(2))
        .sum();
    let n = rows.first().map_or(0, |r| r.per_sample.len());
    let mut per = vec![0.0; n];
    for r in rows {
        if r.per_sample.len() != n {
            return Err(Error::Domain("per-layer reports cover different batches".into()));
        }
        for (p, v) in per.iter_mut().zip(r.per_sample.iter()) {
            *p += v * v;
        }
    }
    Ok(DistortionReport {
        layer_name: "TOTAL".into(),
        frob,
        rel: if y2 > 0.0 { frob / y2.sqrt() } else { 0.0 },
        per_sample: Vector::new(per.into_iter().map(f64::sqrt).collect())?,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub masks: MaskSet,
    pub transforms: Transforms,
    /// Dense model with transforms folded in; equals the input without SI.
    pub absorbed: Model,
    pub layers: Vec<DistortionReport>,
    pub total: DistortionReport,
    pub end_to_end: DistortionReport,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: PipelineRun,
    pub induced: PipelineRun,
    pub induction: Option<Induction>,
    /// Total distortion with SI over total distortion without it.
    pub ratio: f64,
}

fn finish_run(model: &Model, calib: &CalibSet, transforms: Transforms, masks: MaskSet, absorbed: Model) -> Result<PipelineRun> {
    let layers = layer_distortions(model, calib, &transforms, &masks)?;
    let total = total_distortion(&layers)?;
    let dense_out = model.forward(calib.x())?;
    let pruned_out = apply_masks(&absorbed, &masks)?.forward(calib.x())?;
    let end_to_end = output_distortion("END_TO_END", &dense_out, &pruned_out)?;
    Ok(PipelineRun {
        masks,
        transforms,
        absorbed,
        layers,
        total,
        end_to_end,
    })
}

/// Prunes once without and once with induction and reports distortion of
/// both. With `si = None` the second run is the plain path again.
pub fn compare_pipelines(
    model: &Model,
    calib: &CalibSet,
    pattern: &SparsityPattern,
    metric: Metric,
    si: Option<&SiConfig>,
) -> Result<Comparison> {
    let plain = prune_model(model, calib, pattern, metric)?;
    let identity = Transforms::identity_for(model);
    let baseline = finish_run(model, calib, identity.clone(), plain.masks.clone(), model.clone())?;
    let (induced, induction) = match si {
        None => (finish_run(model, calib, identity, plain.masks, model.clone())?, None),
        Some(cfg) => {
            let ind = induce(model, calib, pattern, metric, cfg)?;
            let absorbed = absorb(model, &ind.transforms)?;
            let run = finish_run(model, calib, ind.transforms.clone(), ind.masks.clone(), absorbed)?;
            (run, Some(ind))
        }
    };
    let ratio = if baseline.total.frob == 0.0 {
        if induced.total.frob == 0.0 { 1.0 } else { f64::INFINITY }
    } else {
        induced.total.frob / baseline.total.frob
    };
    Ok(Comparison {
        baseline,
        induced,
        induction,
        ratio,
    })
}

impl Comparison {
    /// One row per weight, then `TOTAL` and `END_TO_END`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "frob_no_si", "frob_si", "rel_no_si", "rel_si", "ratio"])?;
        let ratio = |a: f64, b: f64| if a == 0.0 { if b == 0.0 { 1.0 } else { f64::INFINITY } } else { b / a };
        let rows = self
            .baseline
            .layers
            .iter()
            .zip(&self.induced.layers)
            .chain([
                (&self.baseline.total, &self.induced.total),
                (&self.baseline.end_to_end, &self.induced.end_to_end),
            ]);
        for (a, b) in rows {
            w.write_record([
                a.layer_name.clone(),
                a.frob.to_string(),
                b.frob.to_string(),
                a.rel.to_string(),
                b.rel.to_string(),
                ratio(a.frob, b.frob).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense output of `model` on the calibration batch.
pub fn dense_output(model: &Model, calib: &CalibSet) -> Result<Matrix> {
    model.forward(calib.x())
}
