//! Metric primitives and the attack objectives.
//!
//! Plain functions evaluate metrics on tensors; the `objective_*`
//! builders assemble the differentiable loss inside a graph. The
//! output-space fooling loss is task-specific: image translation uses
//! MAE + negative CC plus a feature-distance term from a held-out
//! surrogate model (standing in for a pretrained perceptual network);
//! saliency uses KL + MAE + negative CC. Terms carry unit weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Translation,
    Saliency,
}

/// Which fused feature distribution acts as the KL reference in the
/// feature-space loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    GuideReference,
    AdvReference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub task: Task,
    /// Weight of the perceptual term in the output objective.
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    /// Weight of the feature-space loss in the combined objective.
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_epsilon_kl")]
    pub epsilon_kl: f64,
    #[serde(default = "default_kl_direction")]
    pub kl_direction: KlDirection,
}

fn default_lambda1() -> f64 {
    1e-2
}
fn default_lambda2() -> f64 {
    1.0
}
fn default_epsilon_kl() -> f64 {
    1e-8
}
fn default_kl_direction() -> KlDirection {
    KlDirection::GuideReference
}

impl ObjectiveConfig {
    pub fn for_task(task: Task) -> Self {
        ObjectiveConfig {
            task,
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            epsilon_kl: default_epsilon_kl(),
            kl_direction: default_kl_direction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("epsilon_kl", self.epsilon_kl)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ── Plain metric functions ──────────────────────────────────────────

fn check_same_shape(op: &str, x: &Tensor, y: &Tensor) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::shape(op, format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same_shape("mae", x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.numel() as f64)
}

/// Negative Pearson correlation; errors on constant input.
pub fn neg_cc(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same_shape("neg_cc", x, y)?;
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let n = g.neg_cc(a, b)?;
    Ok(g.value(n).scalar_value())
}

/// Per-map KL divergence (smoothed, renormalized), averaged over maps.
pub fn kl_div(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<f64> {
    check_same_shape("kl_div", p, q)?;
    let mut g = Graph::new();
    let a = g.constant(p.clone());
    let b = g.constant(q.clone());
    let n = g.kl_div(a, b, epsilon)?;
    Ok(g.value(n).scalar_value())
}

/// Averaged L1 perturbation between a clean image and its adversary.
pub fn l1_perceptual(clean: &Tensor, adv: &Tensor) -> Result<f64> {
    check_same_shape("l1_perceptual", clean, adv)?;
    mae(clean, adv)
}

/// Mean squared error, the translation-task transfer metric.
pub fn mse_eval(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same_shape("mse_eval", x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

// ── Graph-side loss builders ────────────────────────────────────────

pub fn mae_node(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let d = g.sub(x, y)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Node handles for the output-space objective and its terms.
#[derive(Clone, Copy, Debug)]
pub struct OutputObjective {
    pub total: NodeId,
    pub fooling: NodeId,
    pub perceptual: NodeId,
}

/// Build `L_o`: the task fooling loss between the ensemble prediction
/// and the guide's ground-truth output, plus `lambda1` times the
/// averaged L1 between clean image and adversary.
///
/// For the translation task, `surrogate_features` carries the deepest
/// feature maps of a held-out zoo model evaluated on the ensemble
/// prediction and on the guide target; when absent the feature term is
/// omitted.
pub fn objective_output(
    g: &mut Graph,
    ensemble_pred: NodeId,
    guide_target: NodeId,
    clean: NodeId,
    adv: NodeId,
    surrogate_features: Option<(NodeId, NodeId)>,
    cfg: &ObjectiveConfig,
) -> Result<OutputObjective> {
    cfg.validate()?;
    let fooling = match cfg.task {
        Task::Translation => {
            let m = mae_node(g, ensemble_pred, guide_target)?;
            let c = g.neg_cc(ensemble_pred, guide_target)?;
            let mut f = g.add(m, c)?;
            if let Some((pred_feat, guide_feat)) = surrogate_features {
                let fm = mae_node(g, pred_feat, guide_feat)?;
                f = g.add(f, fm)?;
            }
            f
        }
        Task::Saliency => {
            let kl = g.kl_div(guide_target, ensemble_pred, cfg.epsilon_kl)?;
            let m = mae_node(g, ensemble_pred, guide_target)?;
            let c = g.neg_cc(ensemble_pred, guide_target)?;
            let t = g.add(kl, m)?;
            g.add(t, c)?
        }
    };
    let perceptual = mae_node(g, clean, adv)?;
    let weighted = g.scale(perceptual, cfg.lambda1);
    let total = g.add(fooling, weighted)?;
    Ok(OutputObjective { total, fooling, perceptual })
}

/// Node handles for the combined output + feature objective.
#[derive(Clone, Copy, Debug)]
pub struct CombinedObjective {
    pub total: NodeId,
    pub fooling: NodeId,
    pub perceptual: NodeId,
    pub feature: NodeId,
}

/// Build `L_{o,f} = L_o + lambda2 * L_3` where `L_3` is the KL between
/// the fused guide and adversary feature distributions.
#[allow(clippy::too_many_arguments)]
pub fn objective_combined(
    g: &mut Graph,
    ensemble_pred: NodeId,
    guide_target: NodeId,
    clean: NodeId,
    adv: NodeId,
    surrogate_features: Option<(NodeId, NodeId)>,
    fused_adv_features: NodeId,
    fused_guide_features: NodeId,
    cfg: &ObjectiveConfig,
) -> Result<CombinedObjective> {
    let out = objective_output(g, ensemble_pred, guide_target, clean, adv, surrogate_features, cfg)?;
    let feature = match cfg.kl_direction {
        KlDirection::GuideReference => g.kl_div(fused_guide_features, fused_adv_features, cfg.epsilon_kl)?,
        KlDirection::AdvReference => g.kl_div(fused_adv_features, fused_guide_features, cfg.epsilon_kl)?,
    };
    let weighted = g.scale(feature, cfg.lambda2);
    let total = g.add(out.total, weighted)?;
    Ok(CombinedObjective {
        total,
        fooling: out.fooling,
        perceptual: out.perceptual,
        feature,
    })
}
