use crate::error::{Error, Result};
use crate::masking::MaskSet;

/// Largest change of a log-domain parameter in one step.
const MAX_LOG_STEP: f64 = 0.5;
/// Groups whose gradient is this small relative to the largest group are
/// left untouched for the run.
const STATIONARY_RATIO: f64 = 1e-9;
/// Step growth after an accepted step.
const GROW: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Group {
    LogScale,
    Shift,
    AttnLogScale,
}

impl Group {
    fn index(self) -> usize {
        match self {
            Group::LogScale => 0,
            Group::Shift => 1,
            Group::AttnLogScale => 2,
        }
    }

    fn is_log(self) -> bool {
        !matches!(self, Group::Shift)
    }
}

pub(crate) trait Problem {
    /// Objective under the current masks.
    fn value(&self, p: &[f64]) -> Result<f64>;
    fn value_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Recomputes masks from the transformed scores at `p`.
    fn refresh(&mut self, p: &[f64]) -> Result<()>;
    fn masks(&self) -> &MaskSet;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DescentConfig {
    pub lr: f64,
    pub steps: usize,
    pub refresh_period: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Descent {
    pub params: Vec<f64>,
    pub masks: MaskSet,
    pub initial: f64,
    pub best: f64,
    pub trace: Vec<(usize, f64)>,
}

fn check(label: &str, step: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            layer: label.to_string(),
            step,
            value,
        })
    }
}

/// Gradient descent with one Polyak-sized initial step per parameter
/// group; steps grow after accepted trials and halve after rejected ones. The best iterate
/// (with the masks it was scored under) is returned, so the result never
/// exceeds the starting objective.
pub(crate) fn descend<P: Problem>(
    problem: &mut P,
    init: Vec<f64>,
    groups: &[Group],
    cfg: &DescentConfig,
    label: &str,
) -> Result<Descent> {
    debug_assert_eq!(init.len(), groups.len());
    let mut params = init;
    let (mut value, mut grad) = problem.value_grad(&params)?;
    check(label, 0, value)?;
    let initial = value;
    let mut best = (params.clone(), problem.masks().clone(), value);
    let mut trace = vec![(0, value)];
    let mut steps: Option<[f64; 3]> = None;

    for t in 1..=cfg.steps {
        let rates = *steps.get_or_insert_with(|| initial_steps(value, &grad, groups, cfg.lr));
        let mut trial = params.clone();
        let mut moved = false;
        for ((p, g), grp) in trial.iter_mut().zip(&grad).zip(groups) {
            let mut delta = rates[grp.index()] * g;
            if grp.is_log() {
                delta = delta.clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
            }
            if delta != 0.0 {
                *p -= delta;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let trial_value = check(label, t, problem.value(&trial)?)?;
        if let Some(r) = steps.as_mut() {
            let factor = if trial_value < value { GROW } else { 0.5 };
            r.iter_mut().for_each(|v| *v *= factor);
        }
        if trial_value < value {
            params = trial;
        }
        if cfg.refresh_period > 0 && t % cfg.refresh_period == 0 {
            problem.refresh(&params)?;
        }
        let (v, g) = problem.value_grad(&params)?;
        value = check(label, t, v)?;
        grad = g;
        if value < best.2 {
            best = (params.clone(), problem.masks().clone(), value);
        }
        trace.push((t, value));
    }
    Ok(Descent {
        params: best.0,
        masks: best.1,
        initial,
        best: best.2,
        trace,
    })
}

fn initial_steps(value: f64, grad: &[f64], groups: &[Group], lr: f64) -> [f64; 3] {
    let mut norm2 = [0.0f64; 3];
    let mut peak = [0.0f64; 3];
    for (g, grp) in grad.iter().zip(groups) {
        let i = grp.index();
        norm2[i] += g * g;
        peak[i] = peak[i].max(g.abs());
    }
    let top = peak.iter().cloned().fold(0.0, f64::max);
    let mut out = [0.0; 3];
    for i in 0..3 {
        if norm2[i] > 0.0 && peak[i] > STATIONARY_RATIO * top {
            out[i] = lr * value / norm2[i];
        }
    }
    out
}
