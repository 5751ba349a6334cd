//! Intra-batch model ensembles in output space and feature space.
//!
//! Feature maps from the K batch models first get their channel counts
//! unified (CU) by one of three strategies, then are resized to a common
//! resolution (BI), softmax-normalized per map (SN), and combined by an
//! elementwise weighted sum. The pipeline order is part of the contract.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Evenly sample p channels at interval P_n / p.
    S1EvenSample,
    /// Average all channels into one map.
    S2ChannelPool,
    /// Average p contiguous channel groups.
    S3GroupPool,
}

/// Per-batch ensemble configuration; `sigma` weighs model outputs,
/// `omega` weighs model features, and `taps` names the layer tapped on
/// each model (parallel to the batch's model list).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub strategy: Strategy,
    /// Unified channel count; a power of two dividing every tapped P_n.
    pub p: usize,
    /// Common feature resolution (height, width) after resizing.
    pub target_hw: (usize, usize),
    pub taps: Vec<String>,
}

impl EnsembleSpec {
    pub fn uniform(k: usize, strategy: Strategy, p: usize, target_hw: (usize, usize), tap: &str) -> Self {
        EnsembleSpec {
            sigma: vec![1.0 / k as f64; k],
            omega: vec![1.0 / k as f64; k],
            strategy,
            p,
            target_hw,
            taps: vec![tap.to_string(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
        }
        if self.omega.len() != self.sigma.len() || self.taps.len() != self.sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "sigma ({}), omega ({}) and taps ({}) must all have length K",
                self.sigma.len(),
                self.omega.len(),
                self.taps.len()
            )));
        }
        check_weights(&self.sigma)?;
        check_weights(&self.omega)?;
        if !self.p.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "unified channel count p must be a power of two, got {}",
                self.p
            )));
        }
        if self.target_hw.0 == 0 || self.target_hw.1 == 0 {
            return Err(Error::InvalidArgument("target feature resolution is zero".into()));
        }
        Ok(())
    }
}

pub fn check_weights(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum(sum));
    }
    Ok(())
}

/// Elementwise weighted sum of the K model predictions.
pub fn output_ensemble(g: &mut Graph, predictions: &[NodeId], sigma: &[f64]) -> Result<NodeId> {
    if predictions.is_empty() || predictions.len() != sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} weights",
            predictions.len(),
            sigma.len()
        )));
    }
    check_weights(sigma)?;
    let shape0 = g.value(predictions[0]).shape().to_vec();
    for &p in &predictions[1..] {
        if g.value(p).shape() != shape0 {
            return Err(Error::shape(
                "output_ensemble",
                format!("{shape0:?}"),
                format!("{:?}", g.value(p).shape()),
            ));
        }
    }
    let parts: Vec<(NodeId, f64)> = predictions.iter().copied().zip(sigma.iter().copied()).collect();
    g.weighted_sum(&parts)
}

/// Channel unification for one model's tapped features.
pub fn select_features(g: &mut Graph, features: NodeId, strategy: Strategy, p: usize) -> Result<NodeId> {
    let channels = g.value(features).shape()[0];
    match strategy {
        Strategy::S1EvenSample => {
            if p == 0 || channels % p != 0 {
                return Err(Error::NonDivisibleChannels(channels, p));
            }
            let interval = channels / p;
            let indices: Vec<usize> = (0..p).map(|i| i * interval).collect();
            g.channel_select(features, indices)
        }
        Strategy::S2ChannelPool => g.channel_avg_pool(features, 1),
        Strategy::S3GroupPool => {
            if p == 0 || channels % p != 0 {
                return Err(Error::NonDivisibleChannels(channels, p));
            }
            g.channel_avg_pool(features, p)
        }
    }
}

/// BI + SN + weighted sum over per-model channel-unified features.
pub fn fuse_features(
    g: &mut Graph,
    selected: &[NodeId],
    omega: &[f64],
    target_hw: (usize, usize),
) -> Result<NodeId> {
    if selected.is_empty() || selected.len() != omega.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature stacks for {} weights",
            selected.len(),
            omega.len()
        )));
    }
    check_weights(omega)?;
    let c0 = g.value(selected[0]).shape()[0];
    for &f in &selected[1..] {
        let c = g.value(f).shape()[0];
        if c != c0 {
            return Err(Error::shape(
                "fuse_features channel count",
                format!("{c0}"),
                format!("{c}"),
            ));
        }
    }
    let mut normalized = Vec::with_capacity(selected.len());
    for &f in selected {
        let resized = g.bilinear_resize(f, target_hw.0, target_hw.1)?;
        normalized.push(g.softmax2d(resized)?);
    }
    let parts: Vec<(NodeId, f64)> = normalized.into_iter().zip(omega.iter().copied()).collect();
    g.weighted_sum(&parts)
}

/// Full feature-space pipeline (CU -> BI -> SN -> weighted sum) from the
/// raw tapped features of each batch model.
pub fn ensemble_features(g: &mut Graph, raw: &[NodeId], spec: &EnsembleSpec) -> Result<NodeId> {
    spec.validate()?;
    if raw.len() != spec.k() {
        return Err(Error::InvalidArgument(format!(
            "{} feature stacks for K={}",
            raw.len(),
            spec.k()
        )));
    }
    let mut selected = Vec::with_capacity(raw.len());
    for &f in raw {
        selected.push(select_features(g, f, spec.strategy, spec.p)?);
    }
    fuse_features(g, &selected, &spec.omega, spec.target_hw)
}
