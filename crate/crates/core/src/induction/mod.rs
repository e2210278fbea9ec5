//! Learning scales and shifts that make a model easier to prune.
//!
//! Two stages are available. The distribution stage fits each layer in
//! isolation to minimize its pruning error on calibration inputs. The
//! feature stage fits all layers jointly against the dense model's output,
//! with a norm-based regularizer on the absorbed weights.

mod descent;
mod distribution;
mod feature;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::importance::{CalibSet, Metric};
use crate::masking::{MaskSet, SparsityPattern};
use crate::model::Model;
use crate::reparam::{AttnScale, ScaleShift, Transforms};
use crate::tensor::Vector;

pub use distribution::{
    attention_gradient, attention_objective, optimize_distribution, preadapt_gradient, preadapt_objective,
};
pub use feature::{
    feature_loss, init_scales, init_transforms, optimize_features, weight_norm, FeatureLoss, FeatureLossConfig,
    JointObjective, MonotoneMap, NormKind, RobustStats,
};

use descent::Group;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Distribution,
    Feature,
    Both,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Distribution => "distribution",
            Stage::Feature => "feature",
            Stage::Both => "both",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "distribution" => Ok(Stage::Distribution),
            "feature" => Ok(Stage::Feature),
            "both" => Ok(Stage::Both),
            other => Err(Error::Domain(format!(
                "unknown stage `{other}` (expected distribution | feature | both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    /// Calibration columns per step; an epoch is `ceil(n / batch_size)` steps.
    pub batch_size: usize,
    /// Masks are recomputed every this many steps; 0 keeps them frozen.
    pub mask_refresh_period: usize,
    pub optimize_shift: bool,
    pub optimize_attention: bool,
    /// Allow a shift on bias-free layers by giving them a bias.
    pub materialize_bias: bool,
    /// Weight of the summed per-layer pruning error in the joint stage.
    pub dist_weight: f64,
    pub feature: FeatureLossConfig,
}

impl Default for SiConfig {
    fn default() -> Self {
        SiConfig {
            stage: Stage::Distribution,
            lr: 0.5,
            epochs: 4,
            batch_size: 32,
            mask_refresh_period: 8,
            optimize_shift: true,
            optimize_attention: true,
            materialize_bias: false,
            dist_weight: 1.0,
            feature: FeatureLossConfig::default(),
        }
    }
}

impl SiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if !(self.dist_weight >= 0.0) {
            return Err(Error::Domain("distribution weight must be non-negative".into()));
        }
        self.feature.validate()
    }

    pub(crate) fn steps(&self, n_samples: usize) -> usize {
        self.epochs * n_samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    /// Layer name, or `*` for the joint objective.
    pub layer: String,
    pub step: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Induction {
    pub transforms: Transforms,
    /// Masks selected together with the returned transforms, keyed by weight.
    pub masks: MaskSet,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "layer", "step", "objective"])?;
    for r in rows {
        w.write_record([r.stage.to_string(), r.layer.clone(), r.step.to_string(), r.objective.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured stage from scratch.
pub fn induce(
    model: &Model,
    calib: &CalibSet,
    pattern: &SparsityPattern,
    metric: Metric,
    cfg: &SiConfig,
) -> Result<Induction> {
    match cfg.stage {
        Stage::Distribution => {
            let contexts = crate::pipeline::score_contexts(model, calib)?;
            let identity = Transforms::identity_for(model);
            let masks = crate::pipeline::compute_masks(model, &contexts, metric, pattern, &identity)?;
            optimize_distribution(model, &masks, calib, pattern, metric, cfg)
        }
        Stage::Feature | Stage::Both => optimize_features(model, calib, pattern, metric, cfg),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub layer: String,
    pub group: Group,
    pub offset: usize,
    pub len: usize,
}

/// Placement of every learned parameter in one flat vector.
#[derive(Debug, Clone, Default)]
pub(crate) struct Layout {
    pub slots: Vec<Slot>,
    pub len: usize,
}

impl Layout {
    pub fn push(&mut self, layer: &str, group: Group, len: usize) {
        self.slots.push(Slot {
            layer: layer.to_string(),
            group,
            offset: self.len,
            len,
        });
        self.len += len;
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut g = Vec::with_capacity(self.len);
        for s in &self.slots {
            g.extend(std::iter::repeat_n(s.group, s.len));
        }
        g
    }

    pub fn find(&self, layer: &str, group: Group) -> Option<&Slot> {
        self.slots.iter().find(|s| s.layer == layer && s.group == group)
    }

    pub fn slice<'a>(&self, p: &'a [f64], layer: &str, group: Group) -> Option<&'a [f64]> {
        self.find(layer, group).map(|s| &p[s.offset..s.offset + s.len])
    }

    /// Transforms encoded by `p`; layers without slots stay identity.
    pub fn transforms(&self, model: &Model, p: &[f64]) -> Result<Transforms> {
        let mut t = Transforms::identity_for(model);
        for (name, ss) in t.linear.iter_mut() {
            let u = self.slice(p, name, Group::LogScale);
            let d = self.slice(p, name, Group::Shift);
            if u.is_some() || d.is_some() {
                let n = ss.len();
                *ss = ScaleShift::from_log(
                    name.clone(),
                    Vector::new(u.map_or_else(|| vec![0.0; n], <[f64]>::to_vec))?,
                    Vector::new(d.map_or_else(|| vec![0.0; n], <[f64]>::to_vec))?,
                )?;
            }
        }
        for (name, a) in t.attention.iter_mut() {
            if let Some(v) = self.slice(p, name, Group::AttnLogScale) {
                *a = AttnScale::from_log(name.clone(), Vector::new(v.to_vec())?);
            }
        }
        Ok(t)
    }

    pub fn pack(&self, t: &Transforms) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for s in &self.slots {
            let src: Option<&[f64]> = match s.group {
                Group::LogScale => t.linear.get(&s.layer).map(|x| x.log_scale().as_ref()),
                Group::Shift => t.linear.get(&s.layer).map(|x| x.shift().as_ref()),
                Group::AttnLogScale => t.attention.get(&s.layer).map(|x| x.log_scale().as_ref()),
            };
            if let Some(src) = src {
                p[s.offset..s.offset + s.len].copy_from_slice(src);
            }
        }
        p
    }
}

/// Relative disagreement of two gradient vectors: `max|a - b| / max(max|a|, max|b|)`,
/// zero when both vanish.
pub fn gradient_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` at `p` with step `h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> Result<f64>, p: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut q = p.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let hi = f(&q)?;
        q[i] = p[i] - h;
        let lo = f(&q)?;
        q[i] = p[i];
        g.push((hi - lo) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_model, ToySpec};

    #[test]
    fn layout_round_trip() {
        let model = build_toy_model(&ToySpec {
            depth: 1,
            d_model: 4,
            d_hidden: 6,
            seed: 0,
        })
        .unwrap();
        let mut layout = Layout::default();
        layout.push("blk0.fc1", Group::LogScale, 4);
        layout.push("blk0.fc2", Group::LogScale, 6);
        layout.push("blk0.fc2", Group::Shift, 6);
        layout.push("blk0.attn", Group::AttnLogScale, 4);
        let p: Vec<f64> = (0..layout.len).map(|i| 0.01 * i as f64).collect();
        let t = layout.transforms(&model, &p).unwrap();
        assert_eq!(layout.pack(&t), p);
        assert_eq!(t.linear["blk0.fc1"].shift().as_ref(), &[0.0; 4]);
        assert_eq!(layout.groups().len(), layout.len);
    }

    #[test]
    fn discrepancy_metric() {
        assert_eq!(gradient_discrepancy(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((gradient_discrepancy(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [TraceRow {
            stage: Stage::Feature,
            layer: "*".into(),
            step: 3,
            objective: 0.25,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "stage,layer,step,objective\nfeature,*,3,0.25\n");
    }

    #[test]
    fn stage_parsing() {
        for s in [Stage::Distribution, Stage::Feature, Stage::Both] {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("joint".parse::<Stage>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SiConfig::default().validate().is_ok());
        assert!(SiConfig { lr: 0.0, ..SiConfig::default() }.validate().is_err());
        assert!(SiConfig { batch_size: 0, ..SiConfig::default() }.validate().is_err());
        assert_eq!(SiConfig::default().steps(128), 16);
    }
}
