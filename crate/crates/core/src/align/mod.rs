//! Distillation and supervision losses.

pub mod contrastive;
pub mod transport;

use serde::{Deserialize, Serialize};

use crate::error::{Error, TensorError};
use crate::tensor::{Graph, Var};

pub use contrastive::{decay_weighted_sum, feature_loss, info_nce};
pub use transport::{
    ot_loss, sinkhorn, OtAxis, OtConfig, OtGradient, OtLoss, SinkhornOptions, TransportPlan,
};

/// Floor on smape denominators.
pub const SMAPE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    SmoothL1,
    Smape,
    Mse,
}

impl TaskLoss {
    pub fn name(self) -> &'static str {
        match self {
            TaskLoss::SmoothL1 => "smooth_l1",
            TaskLoss::Smape => "smape",
            TaskLoss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smooth_l1" => Some(TaskLoss::SmoothL1),
            "smape" => Some(TaskLoss::Smape),
            "mse" => Some(TaskLoss::Mse),
            _ => None,
        }
    }
}

/// Mean supervised loss between equally shaped prediction and target.
///
/// smape is `(200/n)·Σ|e| / max(|y|+|ŷ|, 1e-8)`.
pub fn task_loss(g: &mut Graph, pred: Var, target: Var, kind: TaskLoss) -> Result<Var, TensorError> {
    let e = g.sub(pred, target)?;
    Ok(match kind {
        TaskLoss::SmoothL1 => {
            let s = g.smooth_l1(e);
            g.mean(s)
        }
        TaskLoss::Mse => {
            let s = g.square(e);
            g.mean(s)
        }
        TaskLoss::Smape => {
            let num = g.abs(e);
            let ay = g.abs(target);
            let ap = g.abs(pred);
            let den = g.add(ay, ap)?;
            let den = g.clamp_min(den, SMAPE_EPS);
            let ratio = g.div(num, den)?;
            let m = g.mean(ratio);
            g.scale(m, 200.0)
        }
    })
}

/// `task + α·feature + β·ot` on the graph, evaluated left to right.
pub fn combine_losses(
    g: &mut Graph,
    task: Var,
    feature: Var,
    ot: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var, TensorError> {
    let f = g.scale(feature, alpha);
    let o = g.scale(ot, beta);
    let t = g.add(task, f)?;
    g.add(t, o)
}

/// `task + α·feature + β·ot`, rejecting non-finite terms by name.
pub fn total_loss(task: f64, feature: f64, ot: f64, alpha: f64, beta: f64) -> Result<f64, Error> {
    for (term, v) in [("task", task), ("feature", feature), ("ot", ot)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
    }
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Model(format!(
            "loss weights must be nonnegative, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(task + alpha * feature + beta * ot)
}

/// Scalars of one loss evaluation plus the weights that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub feature_per_layer: Vec<f64>,
    pub feature: f64,
    pub ot: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub mu: f64,
}

impl LossBreakdown {
    /// Component-wise mean over several breakdowns sharing the same weights.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let layers = first.feature_per_layer.len();
        Some(LossBreakdown {
            task: avg(&|b| b.task),
            feature_per_layer: (0..layers)
                .map(|m| avg(&|b| b.feature_per_layer[m]))
                .collect(),
            feature: avg(&|b| b.feature),
            ot: avg(&|b| b.ot),
            total: avg(&|b| b.total),
            ..first.clone()
        })
    }
}
