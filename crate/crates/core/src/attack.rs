//! The serial mini-batch ensemble attack and its baselines.
//!
//! Intra-batch updates follow an Adam-style rule on the L1-normalized
//! gradient of the combined objective. Between batches the adversary,
//! both momentum vectors (weighted by beta1/beta2) and a loosened
//! perceptual bound carry over, and the bias corrections gain a
//! long-term term so the carried momentum decays slowly instead of at
//! the raw mu^t/(1-mu^t) rate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_features, output_ensemble, EnsembleSpec, Strategy};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{l1_perceptual, objective_combined, ObjectiveConfig};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// First-momentum decay.
    #[serde(default = "d_mu1")]
    pub mu1: f64,
    /// Second-momentum decay.
    #[serde(default = "d_mu2")]
    pub mu2: f64,
    /// Smoothing term in the update denominator.
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Maximum iterations X per mini-batch.
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    /// Step size alpha.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Long-term first-momentum weight.
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    /// Long-term second-momentum weight.
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Perceptual-bound decay.
    #[serde(default = "d_beta3")]
    pub beta3: f64,
    /// Maximum number of batches N.
    #[serde(default = "d_max_batches")]
    pub max_batches: usize,
    /// Perceptual bound of the first batch.
    #[serde(default = "d_t1_first")]
    pub t1_first: f64,
    /// Models per mini-batch.
    #[serde(default = "d_k")]
    pub k: usize,
}

fn d_mu1() -> f64 {
    0.9
}
fn d_mu2() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-8
}
fn d_max_iters() -> usize {
    20
}
fn d_alpha() -> f64 {
    2e-4
}
fn d_beta1() -> f64 {
    0.10
}
fn d_beta2() -> f64 {
    0.01
}
fn d_beta3() -> f64 {
    0.60
}
fn d_max_batches() -> usize {
    8
}
fn d_t1_first() -> f64 {
    1e-2
}
fn d_k() -> usize {
    4
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mu1: d_mu1(),
            mu2: d_mu2(),
            eps: d_eps(),
            max_iters: d_max_iters(),
            alpha: d_alpha(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            beta3: d_beta3(),
            max_batches: d_max_batches(),
            t1_first: d_t1_first(),
            k: d_k(),
        }
    }
}

impl AttackConfig {
    /// `eps == 0` is allowed: it is the configuration under which the
    /// step size is exactly scale-invariant.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu1) || !(0.0..1.0).contains(&self.mu2) {
            return Err(Error::InvalidArgument(format!(
                "momentum decays must lie in [0,1), got mu1={} mu2={}",
                self.mu1, self.mu2
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {b}")));
            }
        }
        if self.alpha <= 0.0 || self.eps < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need alpha > 0 and eps >= 0, got alpha={} eps={}",
                self.alpha, self.eps
            )));
        }
        if self.t1_first <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "t1_first must be positive, got {}",
                self.t1_first
            )));
        }
        if self.max_batches == 0 || self.k == 0 {
            return Err(Error::InvalidArgument("max_batches and k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-batch perceptual bounds from the recursive schedule
/// T1(i) = T1(i-1) + beta3^i * T1(1).
pub fn schedule_bounds(t1_first: f64, beta3: f64, n: usize) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(n);
    if n == 0 {
        return bounds;
    }
    bounds.push(t1_first);
    let mut pow = beta3;
    for _ in 2..=n {
        pow *= beta3;
        let last = *bounds.last().unwrap();
        bounds.push(last + pow * t1_first);
    }
    bounds
}

// ── Gradient normalization and update rules ─────────────────────────

/// Round to 32 significant bits. Keeps positive scale factors on the
/// normalized gradient cancelling bit-exactly instead of up to last-ulp
/// noise.
fn quantize32(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let bits = x.to_bits().wrapping_add(1u64 << 20);
    f64::from_bits(bits & !((1u64 << 21) - 1))
}

/// Divide by the L1 norm. A zero gradient comes back as zeros with a
/// logged warning rather than an error.
pub fn normalize_gradient(g: &Tensor) -> Tensor {
    let norm: f64 = g.data().iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        log::warn!("zero gradient; normalize_gradient returning zeros");
        return Tensor::zeros(g.shape().to_vec());
    }
    g.map(|v| quantize32(v / norm))
}

/// Exponential moving average step: mu * prev + (1 - mu) * sample.
pub fn momentum_update(prev: &Tensor, mu: f64, sample: &Tensor) -> Tensor {
    debug_assert!(prev.same_shape(sample));
    let data: Vec<f64> = prev
        .data()
        .iter()
        .zip(sample.data())
        .map(|(&m, &s)| mu * m + (1.0 - mu) * s)
        .collect();
    Tensor::new(prev.shape().to_vec(), data).unwrap()
}

/// Intra-batch bias correction m / (1 - mu^t).
pub fn bias_correct_intra(m: &Tensor, mu: f64, t: usize) -> Tensor {
    let denom = 1.0 - mu.powi(t as i32);
    m.map(|v| v / denom)
}

/// Inter-batch bias correction m / (1 - mu^t) + beta * carry.
pub fn bias_correct_inter(m: &Tensor, mu: f64, t: usize, beta: f64, carry: &Tensor) -> Tensor {
    debug_assert!(m.same_shape(carry));
    let denom = 1.0 - mu.powi(t as i32);
    let data: Vec<f64> = m
        .data()
        .iter()
        .zip(carry.data())
        .map(|(&mv, &cv)| mv / denom + beta * cv)
        .collect();
    Tensor::new(m.shape().to_vec(), data).unwrap()
}

/// Adversary update: clip(adv - alpha * m_hat / (sqrt(v_hat) + eps)).
pub fn adam_step(adv: &Tensor, m_hat: &Tensor, v_hat: &Tensor, alpha: f64, eps: f64) -> Tensor {
    debug_assert!(adv.same_shape(m_hat) && adv.same_shape(v_hat));
    let data: Vec<f64> = adv
        .data()
        .iter()
        .zip(m_hat.data().iter().zip(v_hat.data()))
        .map(|(&x, (&m, &v))| (x - alpha * m / (v.sqrt() + eps)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(adv.shape().to_vec(), data).unwrap()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_step(adv: &Tensor, direction: &Tensor, step: f64) -> Tensor {
    let data: Vec<f64> = adv
        .data()
        .iter()
        .zip(direction.data())
        .map(|(&x, &d)| (x - step * sign(d)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(adv.shape().to_vec(), data).unwrap()
}

// ── Attack state, traces, gradient sources ──────────────────────────

/// Loss term values at one evaluation point.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct IterationTerms {
    pub total: f64,
    pub fooling: f64,
    pub perceptual: f64,
    pub feature: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub batch: usize,
    pub iter: usize,
    pub objective: f64,
    pub fooling: f64,
    pub perceptual: f64,
    pub feature: f64,
    pub l1_after: f64,
}

#[derive(Clone, Debug)]
pub struct BatchSnapshot {
    pub batch: usize,
    pub realized_l1: f64,
    pub adv: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct AttackReport {
    pub records: Vec<IterRecord>,
    pub snapshots: Vec<BatchSnapshot>,
}

/// Adversary, momentum and carry state threaded through the batches.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub clean: Tensor,
    pub guide_target: Tensor,
    pub adv: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub m_carry: Tensor,
    pub v_carry: Tensor,
    pub t: usize,
    pub batch_index: usize,
    pub bound: f64,
}

impl AttackState {
    pub fn new(clean: &Tensor, guide_target: &Tensor, bound: f64) -> Self {
        let zeros = Tensor::zeros(clean.shape().to_vec());
        AttackState {
            clean: clean.clone(),
            guide_target: guide_target.clone(),
            adv: clean.clone(),
            m: zeros.clone(),
            v: zeros.clone(),
            m_carry: zeros.clone(),
            v_carry: zeros,
            t: 0,
            batch_index: 1,
            bound,
        }
    }

    pub fn realized_l1(&self) -> f64 {
        l1_perceptual(&self.clean, &self.adv).expect("state tensors share a shape")
    }
}

/// Supplies the raw objective gradient at the current adversary.
pub trait GradientSource {
    fn gradient(&mut self, adv: &Tensor) -> Result<(Tensor, IterationTerms)>;
}

/// Gradient source backed by a closure; handy for synthetic streams.
pub struct ClosureGradient<F: FnMut(&Tensor) -> Tensor>(pub F);

impl<F: FnMut(&Tensor) -> Tensor> GradientSource for ClosureGradient<F> {
    fn gradient(&mut self, adv: &Tensor) -> Result<(Tensor, IterationTerms)> {
        Ok(((self.0)(adv), IterationTerms::default()))
    }
}

/// Multiplies every raw gradient from an inner source by a constant.
pub struct ScaledGradient<S: GradientSource> {
    pub inner: S,
    pub factor: f64,
}

impl<S: GradientSource> GradientSource for ScaledGradient<S> {
    fn gradient(&mut self, adv: &Tensor) -> Result<(Tensor, IterationTerms)> {
        let (g, terms) = self.inner.gradient(adv)?;
        Ok((g.map(|v| v * self.factor), terms))
    }
}

/// Production source: K frozen models fused in output and feature
/// space, differentiated through the combined objective.
pub struct EnsembleGradient<'a> {
    models: Vec<&'a Model>,
    espec: &'a EnsembleSpec,
    ocfg: &'a ObjectiveConfig,
    clean: Tensor,
    guide_target: Tensor,
    fused_guide: Tensor,
    surrogate: Option<(&'a Model, String)>,
    surrogate_guide_features: Option<Tensor>,
}

/// Feature-space fusion of `image` across the batch models, evaluated
/// without gradient bookkeeping.
pub fn fused_features_of(models: &[&Model], espec: &EnsembleSpec, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let mut raw = Vec::with_capacity(models.len());
    for (model, tap) in models.iter().zip(&espec.taps) {
        let pass = model.forward_nodes(&mut g, x, &[tap.as_str()], false)?;
        raw.push(pass.tap_nodes[0]);
    }
    let fused = ensemble_features(&mut g, &raw, espec)?;
    Ok(g.value(fused).clone())
}

impl<'a> EnsembleGradient<'a> {
    pub fn new(
        models: Vec<&'a Model>,
        espec: &'a EnsembleSpec,
        ocfg: &'a ObjectiveConfig,
        clean: &Tensor,
        guide: &Tensor,
        guide_target: &Tensor,
        surrogate: Option<(&'a Model, &str)>,
    ) -> Result<Self> {
        espec.validate()?;
        ocfg.validate()?;
        if models.len() != espec.k() {
            return Err(Error::InvalidArgument(format!(
                "{} models for an ensemble of K={}",
                models.len(),
                espec.k()
            )));
        }
        if !matches!(espec.strategy, Strategy::S2ChannelPool) {
            for (model, tap) in models.iter().zip(&espec.taps) {
                let channels = model.spec().tap_channels(tap)?;
                if channels % espec.p != 0 {
                    return Err(Error::NonDivisibleChannels(channels, espec.p));
                }
            }
        }
        let fused_guide = fused_features_of(&models, espec, guide)?;
        let surrogate = surrogate.map(|(m, tap)| (m, tap.to_string()));
        let surrogate_guide_features = match &surrogate {
            Some((m, tap)) => {
                let (_, feats) = m.forward_with_features(guide_target, &[tap.as_str()])?;
                Some(feats.into_iter().next().unwrap())
            }
            None => None,
        };
        Ok(EnsembleGradient {
            models,
            espec,
            ocfg,
            clean: clean.clone(),
            guide_target: guide_target.clone(),
            fused_guide,
            surrogate,
            surrogate_guide_features,
        })
    }
}

impl GradientSource for EnsembleGradient<'_> {
    fn gradient(&mut self, adv: &Tensor) -> Result<(Tensor, IterationTerms)> {
        let mut g = Graph::new();
        let adv_node = g.variable(adv.clone());
        let clean_node = g.constant(self.clean.clone());
        let gt_node = g.constant(self.guide_target.clone());

        let mut preds = Vec::with_capacity(self.models.len());
        let mut raw_feats = Vec::with_capacity(self.models.len());
        for (model, tap) in self.models.iter().zip(&self.espec.taps) {
            let pass = model.forward_nodes(&mut g, adv_node, &[tap.as_str()], false)?;
            preds.push(pass.output);
            raw_feats.push(pass.tap_nodes[0]);
        }
        let ens_pred = output_ensemble(&mut g, &preds, &self.espec.sigma)?;
        let fused_adv = ensemble_features(&mut g, &raw_feats, self.espec)?;
        let fused_guide = g.constant(self.fused_guide.clone());

        let surrogate_features = match &self.surrogate {
            Some((model, tap)) => {
                let pass = model.forward_nodes(&mut g, ens_pred, &[tap.as_str()], false)?;
                let guide_feat = g.constant(self.surrogate_guide_features.clone().unwrap());
                Some((pass.tap_nodes[0], guide_feat))
            }
            None => None,
        };

        let obj = objective_combined(
            &mut g,
            ens_pred,
            gt_node,
            clean_node,
            adv_node,
            surrogate_features,
            fused_adv,
            fused_guide,
            self.ocfg,
        )?;
        g.backward(obj.total)?;

        let terms = IterationTerms {
            total: g.value(obj.total).scalar_value(),
            fooling: g.value(obj.fooling).scalar_value(),
            perceptual: g.value(obj.perceptual).scalar_value(),
            feature: g.value(obj.feature).scalar_value(),
        };
        Ok((g.grad(adv_node).unwrap().clone(), terms))
    }
}

// ── Intra- and inter-batch loops ────────────────────────────────────

fn record(report: &mut AttackReport, state: &AttackState, terms: IterationTerms) {
    report.records.push(IterRecord {
        batch: state.batch_index,
        iter: state.t,
        objective: terms.total,
        fooling: terms.fooling,
        perceptual: terms.perceptual,
        feature: terms.feature,
        l1_after: state.realized_l1(),
    });
}

/// First-batch loop: zero momentums, plain bias corrections.
pub fn intra_batch_run(
    state: &mut AttackState,
    source: &mut dyn GradientSource,
    cfg: &AttackConfig,
    report: &mut AttackReport,
) -> Result<()> {
    cfg.validate()?;
    if state.batch_index != 1 {
        return Err(Error::InvalidArgument(format!(
            "intra-batch rules apply to the first batch only, got batch {}",
            state.batch_index
        )));
    }
    while state.t < cfg.max_iters && state.realized_l1() <= state.bound {
        state.t += 1;
        let (raw, terms) = source.gradient(&state.adv)?;
        let ghat = normalize_gradient(&raw);
        let gsq = ghat.map(|v| v * v);
        state.m = momentum_update(&state.m, cfg.mu1, &ghat);
        state.v = momentum_update(&state.v, cfg.mu2, &gsq);
        let m_hat = bias_correct_intra(&state.m, cfg.mu1, state.t);
        let v_hat = bias_correct_intra(&state.v, cfg.mu2, state.t);
        state.adv = adam_step(&state.adv, &m_hat, &v_hat, cfg.alpha, cfg.eps);
        record(report, state, terms);
    }
    Ok(())
}

/// Move to batch i+1: carry the adversary, weight-carry the momentums,
/// reset the clock and install the batch's loosened bound.
pub fn advance_batch(state: &mut AttackState, cfg: &AttackConfig, new_bound: f64) {
    state.m_carry = state.m.clone();
    state.v_carry = state.v.clone();
    state.m = state.m_carry.map(|v| cfg.beta1 * v);
    state.v = state.v_carry.map(|v| cfg.beta2 * v);
    state.t = 0;
    state.batch_index += 1;
    state.bound = new_bound;
}

/// Later-batch loop with long-term bias corrections. The perceptual
/// guard keeps measuring against the original clean image.
pub fn inter_batch_run(
    state: &mut AttackState,
    source: &mut dyn GradientSource,
    cfg: &AttackConfig,
    report: &mut AttackReport,
) -> Result<()> {
    cfg.validate()?;
    if state.batch_index < 2 {
        return Err(Error::InvalidArgument(
            "inter-batch rules need carries from a previous batch (batch index >= 2)".into(),
        ));
    }
    while state.batch_index <= cfg.max_batches
        && state.t < cfg.max_iters
        && state.realized_l1() <= state.bound
    {
        state.t += 1;
        let (raw, terms) = source.gradient(&state.adv)?;
        let ghat = normalize_gradient(&raw);
        let gsq = ghat.map(|v| v * v);
        state.m = momentum_update(&state.m, cfg.mu1, &ghat);
        state.v = momentum_update(&state.v, cfg.mu2, &gsq);
        let m_hat = bias_correct_inter(&state.m, cfg.mu1, state.t, cfg.beta1, &state.m_carry);
        let v_hat = bias_correct_inter(&state.v, cfg.mu2, state.t, cfg.beta2, &state.v_carry);
        state.adv = adam_step(&state.adv, &m_hat, &v_hat, cfg.alpha, cfg.eps);
        record(report, state, terms);
    }
    Ok(())
}

/// Serial driver over per-batch gradient sources with given bounds.
pub fn run_smbea_with_sources(
    clean: &Tensor,
    guide_target: &Tensor,
    sources: &mut [Box<dyn GradientSource + '_>],
    cfg: &AttackConfig,
    bounds: &[f64],
) -> Result<(Tensor, AttackReport)> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument("attack needs at least one batch".into()));
    }
    if sources.len() > cfg.max_batches {
        return Err(Error::InvalidArgument(format!(
            "{} batches exceed the configured maximum N={}",
            sources.len(),
            cfg.max_batches
        )));
    }
    if bounds.len() != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bounds for {} batches",
            bounds.len(),
            sources.len()
        )));
    }
    let mut state = AttackState::new(clean, guide_target, bounds[0]);
    let mut report = AttackReport::default();
    intra_batch_run(&mut state, sources[0].as_mut(), cfg, &mut report)?;
    report.snapshots.push(BatchSnapshot {
        batch: 1,
        realized_l1: state.realized_l1(),
        adv: state.adv.clone(),
    });
    for (b, source) in sources.iter_mut().enumerate().skip(1) {
        advance_batch(&mut state, cfg, bounds[b]);
        inter_batch_run(&mut state, source.as_mut(), cfg, &mut report)?;
        report.snapshots.push(BatchSnapshot {
            batch: state.batch_index,
            realized_l1: state.realized_l1(),
            adv: state.adv.clone(),
        });
    }
    Ok((state.adv, report))
}

/// One mini-batch of source models plus its ensemble configuration.
pub struct BatchPlan<'a> {
    pub models: Vec<&'a Model>,
    pub espec: EnsembleSpec,
}

/// Full serial attack over model batches.
#[allow(clippy::too_many_arguments)]
pub fn run_smbea(
    clean: &Tensor,
    guide: &Tensor,
    guide_target: &Tensor,
    batches: &[BatchPlan<'_>],
    ocfg: &ObjectiveConfig,
    surrogate: Option<(&Model, &str)>,
    cfg: &AttackConfig,
    bounds: &[f64],
) -> Result<(Tensor, AttackReport)> {
    let mut sources: Vec<Box<dyn GradientSource + '_>> = Vec::with_capacity(batches.len());
    for plan in batches {
        sources.push(Box::new(EnsembleGradient::new(
            plan.models.clone(),
            &plan.espec,
            ocfg,
            clean,
            guide,
            guide_target,
            surrogate,
        )?));
    }
    run_smbea_with_sources(clean, guide_target, &mut sources, cfg, bounds)
}

// ── Baselines ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Fgsm,
    Ifgsm,
    Mim,
    Pgd,
}

#[derive(Clone, Debug)]
pub struct BaselineConfig {
    /// Per-iteration sign-step size (the full step for FGSM).
    pub step: f64,
    pub max_iters: usize,
    /// Averaged-L1 perturbation budget.
    pub budget: f64,
    /// MIM momentum decay.
    pub momentum: f64,
    /// PGD random-start amplitude as a fraction of the budget ball.
    pub start_scale: f64,
    /// Seed for the PGD random start.
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(step: f64, max_iters: usize, budget: f64, seed: u64) -> Self {
        BaselineConfig {
            step,
            max_iters,
            budget,
            momentum: 1.0,
            start_scale: 1.0,
            seed,
        }
    }
}

/// Targeted baseline attacks minimizing the same combined objective and
/// stopping at the same averaged-L1 budget.
pub fn run_baseline_with_source(
    kind: BaselineKind,
    clean: &Tensor,
    source: &mut dyn GradientSource,
    bcfg: &BaselineConfig,
) -> Result<(Tensor, AttackReport)> {
    if bcfg.step <= 0.0 || bcfg.budget <= 0.0 {
        return Err(Error::InvalidArgument("baseline step and budget must be positive".into()));
    }
    let mut report = AttackReport::default();
    let mut adv = clean.clone();

    match kind {
        BaselineKind::Fgsm => {
            let (raw, terms) = source.gradient(&adv)?;
            adv = sign_step(&adv, &raw, bcfg.step);
            report.records.push(IterRecord {
                batch: 1,
                iter: 1,
                objective: terms.total,
                fooling: terms.fooling,
                perceptual: terms.perceptual,
                feature: terms.feature,
                l1_after: l1_perceptual(clean, &adv)?,
            });
        }
        BaselineKind::Ifgsm | BaselineKind::Mim | BaselineKind::Pgd => {
            if kind == BaselineKind::Pgd {
                let amp = bcfg.budget * bcfg.start_scale.clamp(0.0, 1.0);
                if amp > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(bcfg.seed);
                    let start: Vec<f64> = clean
                        .data()
                        .iter()
                        .map(|&x| (x + rng.gen_range(-amp..amp)).clamp(0.0, 1.0))
                        .collect();
                    adv = Tensor::new(clean.shape().to_vec(), start)?;
                    debug_assert!(l1_perceptual(clean, &adv)? <= bcfg.budget);
                }
            }
            let mut m = Tensor::zeros(clean.shape().to_vec());
            let mut t = 0usize;
            while t < bcfg.max_iters && l1_perceptual(clean, &adv)? <= bcfg.budget {
                t += 1;
                let (raw, terms) = source.gradient(&adv)?;
                let direction = if kind == BaselineKind::Mim {
                    let ghat = normalize_gradient(&raw);
                    let data: Vec<f64> = m
                        .data()
                        .iter()
                        .zip(ghat.data())
                        .map(|(&mm, &gg)| bcfg.momentum * mm + gg)
                        .collect();
                    m = Tensor::new(m.shape().to_vec(), data)?;
                    m.clone()
                } else {
                    raw
                };
                adv = sign_step(&adv, &direction, bcfg.step);
                report.records.push(IterRecord {
                    batch: 1,
                    iter: t,
                    objective: terms.total,
                    fooling: terms.fooling,
                    perceptual: terms.perceptual,
                    feature: terms.feature,
                    l1_after: l1_perceptual(clean, &adv)?,
                });
            }
        }
    }
    report.snapshots.push(BatchSnapshot {
        batch: 1,
        realized_l1: l1_perceptual(clean, &adv)?,
        adv: adv.clone(),
    });
    Ok((adv, report))
}

/// Ensemble-backed baseline entry point.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    kind: BaselineKind,
    clean: &Tensor,
    guide: &Tensor,
    guide_target: &Tensor,
    models: Vec<&Model>,
    espec: &EnsembleSpec,
    ocfg: &ObjectiveConfig,
    surrogate: Option<(&Model, &str)>,
    bcfg: &BaselineConfig,
) -> Result<(Tensor, AttackReport)> {
    let mut source = EnsembleGradient::new(models, espec, ocfg, clean, guide, guide_target, surrogate)?;
    run_baseline_with_source(kind, clean, &mut source, bcfg)
}

/// Uniform noise scaled to land at (or just under) the budget.
pub fn run_noise(clean: &Tensor, budget: f64, seed: u64) -> Result<Tensor> {
    if budget <= 0.0 {
        return Err(Error::InvalidArgument("noise budget must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..clean.numel())
        .map(|_| rng.gen_range(-2.0 * budget..2.0 * budget))
        .collect();
    for _ in 0..8 {
        let adv: Vec<f64> = clean
            .data()
            .iter()
            .zip(&noise)
            .map(|(&x, &u)| (x + u).clamp(0.0, 1.0))
            .collect();
        let l1: f64 = clean
            .data()
            .iter()
            .zip(&adv)
            .map(|(&x, &a)| (x - a).abs())
            .sum::<f64>()
            / clean.numel() as f64;
        if l1 <= budget {
            return Tensor::new(clean.shape().to_vec(), adv);
        }
        let scale = budget / l1 * (1.0 - 1e-9);
        for u in noise.iter_mut() {
            *u *= scale;
        }
    }
    // Clipping interactions converge fast; eight halvings always land.
    unreachable!("noise rescaling failed to land inside the budget");
}

// ── Optimizer variants ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Msgd,
    Adagrad,
    Rmsprop,
    Adam,
}

/// Momentum slots for the optimizer comparison harness.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: usize,
}

impl OptimizerState {
    pub fn new(shape: &[usize]) -> Self {
        OptimizerState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
        }
    }
}

/// One update of the chosen optimizer on the adversary, given the
/// normalized gradient. The adam variant shares the intra-batch code
/// path exactly.
pub fn optimizer_variant_step(
    kind: OptimizerKind,
    state: &mut OptimizerState,
    adv: &Tensor,
    ghat: &Tensor,
    cfg: &AttackConfig,
) -> Tensor {
    match kind {
        OptimizerKind::Sgd => {
            let data: Vec<f64> = adv
                .data()
                .iter()
                .zip(ghat.data())
                .map(|(&x, &g)| (x - cfg.alpha * g).clamp(0.0, 1.0))
                .collect();
            Tensor::new(adv.shape().to_vec(), data).unwrap()
        }
        OptimizerKind::Msgd => {
            let data: Vec<f64> = state
                .m
                .data()
                .iter()
                .zip(ghat.data())
                .map(|(&m, &g)| cfg.mu1 * m + g)
                .collect();
            state.m = Tensor::new(state.m.shape().to_vec(), data).unwrap();
            let upd: Vec<f64> = adv
                .data()
                .iter()
                .zip(state.m.data())
                .map(|(&x, &m)| (x - cfg.alpha * m).clamp(0.0, 1.0))
                .collect();
            Tensor::new(adv.shape().to_vec(), upd).unwrap()
        }
        OptimizerKind::Adagrad => {
            let gsq = ghat.map(|v| v * v);
            let data: Vec<f64> = state
                .v
                .data()
                .iter()
                .zip(gsq.data())
                .map(|(&v, &s)| v + s)
                .collect();
            state.v = Tensor::new(state.v.shape().to_vec(), data).unwrap();
            let upd: Vec<f64> = adv
                .data()
                .iter()
                .zip(ghat.data().iter().zip(state.v.data()))
                .map(|(&x, (&g, &v))| (x - cfg.alpha * g / (v.sqrt() + cfg.eps)).clamp(0.0, 1.0))
                .collect();
            Tensor::new(adv.shape().to_vec(), upd).unwrap()
        }
        OptimizerKind::Rmsprop => {
            let gsq = ghat.map(|v| v * v);
            state.v = momentum_update(&state.v, cfg.mu2, &gsq);
            let upd: Vec<f64> = adv
                .data()
                .iter()
                .zip(ghat.data().iter().zip(state.v.data()))
                .map(|(&x, (&g, &v))| (x - cfg.alpha * g / (v.sqrt() + cfg.eps)).clamp(0.0, 1.0))
                .collect();
            Tensor::new(adv.shape().to_vec(), upd).unwrap()
        }
        OptimizerKind::Adam => {
            state.t += 1;
            let gsq = ghat.map(|v| v * v);
            state.m = momentum_update(&state.m, cfg.mu1, ghat);
            state.v = momentum_update(&state.v, cfg.mu2, &gsq);
            let m_hat = bias_correct_intra(&state.m, cfg.mu1, state.t);
            let v_hat = bias_correct_intra(&state.v, cfg.mu2, state.t);
            adam_step(adv, &m_hat, &v_hat, cfg.alpha, cfg.eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AttackConfig {
        AttackConfig::default()
    }

    #[test]
    fn normalize_gradient_examples() {
        let g = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let n = normalize_gradient(&g);
        assert_eq!(n.data(), &[0.5, -0.5]);

        let z = normalize_gradient(&Tensor::zeros(vec![4]));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_gradient_scale_cancellation_is_bitwise() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = Tensor::new(vec![64], data).unwrap();
            let base = normalize_gradient(&g);
            for c in [1e-3, 1.0, 1e3, 7.3] {
                let scaled = normalize_gradient(&g.map(|v| v * c));
                for (a, b) in base.data().iter().zip(scaled.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "scale {c} broke normalization");
                }
            }
        }
    }

    #[test]
    fn schedule_matches_direct_evaluation() {
        let bounds = schedule_bounds(1.0e-2, 0.6, 3);
        assert_eq!(bounds[0], 1.0e-2);
        assert_eq!(bounds[1], 1.0e-2 + 0.6 * 0.6 * 1.0e-2);
        assert_eq!(bounds[2], bounds[1] + 0.6 * 0.6 * 0.6 * 1.0e-2);
        // Spot the closed-form values.
        assert!((bounds[1] - 1.36e-2).abs() < 1e-17);
        assert!((bounds[2] - 1.576e-2).abs() < 1e-17);
    }

    #[test]
    fn schedule_is_strictly_increasing_with_decaying_increments() {
        let bounds = schedule_bounds(2.0e-2, 0.6, 8);
        let mut prev_inc = f64::INFINITY;
        for w in bounds.windows(2) {
            let inc = w[1] - w[0];
            assert!(inc > 0.0);
            assert!(inc < prev_inc);
            prev_inc = inc;
        }
    }

    #[test]
    fn zero_iterations_returns_clean_image() {
        let clean = Tensor::filled(vec![1, 2, 2], 0.5);
        let gt = Tensor::filled(vec![1, 2, 2], 0.5);
        let mut cfg = cfg();
        cfg.max_iters = 0;
        let mut sources: Vec<Box<dyn GradientSource>> =
            vec![Box::new(ClosureGradient(|_: &Tensor| Tensor::filled(vec![1, 2, 2], 1.0)))];
        let (adv, report) = run_smbea_with_sources(&clean, &gt, &mut sources, &cfg, &[1e-2]).unwrap();
        assert_eq!(adv, clean);
        assert!(report.records.is_empty());
    }

    #[test]
    fn first_step_is_a_signed_alpha_step() {
        let clean = Tensor::filled(vec![1, 2, 2], 0.5);
        let gt = clean.clone();
        let mut c = cfg();
        c.max_iters = 1;
        let grad = Tensor::new(vec![1, 2, 2], vec![3.0, -1.0, 2.0, -4.0]).unwrap();
        let mut state = AttackState::new(&clean, &gt, 1.0);
        let mut report = AttackReport::default();
        let g2 = grad.clone();
        let mut src = ClosureGradient(move |_: &Tensor| g2.clone());
        intra_batch_run(&mut state, &mut src, &c, &mut report).unwrap();

        let ghat = normalize_gradient(&grad);
        for ((&a, &x), &g) in state.adv.data().iter().zip(clean.data()).zip(ghat.data()) {
            let want = (x - c.alpha * g / (g.abs() + c.eps)).clamp(0.0, 1.0);
            assert_eq!(a, want);
        }
    }

    #[test]
    fn constant_stream_bias_corrections_are_exact() {
        // Intra: m_hat == ghat and v_hat == ghat^2 for all t.
        let ghat = Tensor::new(vec![3], vec![0.3, -0.2, 0.05]).unwrap();
        let gsq = ghat.map(|v| v * v);
        let c = cfg();
        let mut m = Tensor::zeros(vec![3]);
        let mut v = Tensor::zeros(vec![3]);
        for t in 1..=100 {
            m = momentum_update(&m, c.mu1, &ghat);
            v = momentum_update(&v, c.mu2, &gsq);
            let mh = bias_correct_intra(&m, c.mu1, t);
            let vh = bias_correct_intra(&v, c.mu2, t);
            for i in 0..3 {
                assert!((mh.data()[i] - ghat.data()[i]).abs() < 1e-12);
                assert!((vh.data()[i] - gsq.data()[i]).abs() < 1e-12);
            }
        }

        // Inter: corrected momentums carry beta * prev / (1 - mu^t).
        let m_prev = Tensor::new(vec![3], vec![0.7, -0.4, 0.1]).unwrap();
        let v_prev = Tensor::new(vec![3], vec![0.5, 0.2, 0.9]).unwrap();
        let mut m = m_prev.map(|x| c.beta1 * x);
        let mut v = v_prev.map(|x| c.beta2 * x);
        for t in 1..=100 {
            m = momentum_update(&m, c.mu1, &ghat);
            v = momentum_update(&v, c.mu2, &gsq);
            let mh = bias_correct_inter(&m, c.mu1, t, c.beta1, &m_prev);
            let vh = bias_correct_inter(&v, c.mu2, t, c.beta2, &v_prev);
            for i in 0..3 {
                let want_m = ghat.data()[i] + c.beta1 * m_prev.data()[i] / (1.0 - c.mu1.powi(t as i32));
                let want_v = gsq.data()[i] + c.beta2 * v_prev.data()[i] / (1.0 - c.mu2.powi(t as i32));
                assert!((mh.data()[i] - want_m).abs() < 1e-12, "t={t}");
                assert!((vh.data()[i] - want_v).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn slower_decay_claim_holds_numerically() {
        let mu2 = 0.99f64;
        for t in 1..=1000 {
            let p = mu2.powi(t);
            assert!(1.0 / (1.0 - p) > p / (1.0 - p), "t={t}");
        }
    }

    #[test]
    fn single_batch_run_equals_intra_alone() {
        let clean = Tensor::filled(vec![1, 3, 3], 0.4);
        let gt = clean.clone();
        let c = cfg();
        let mk = |seed: u64| {
            ClosureGradient(move |adv: &Tensor| {
                adv.map(|v| (v * 31.0 + seed as f64).sin())
            })
        };
        let mut sources: Vec<Box<dyn GradientSource>> = vec![Box::new(mk(3))];
        let (adv, _) = run_smbea_with_sources(&clean, &gt, &mut sources, &c, &[5e-3]).unwrap();

        let mut state = AttackState::new(&clean, &gt, 5e-3);
        let mut report = AttackReport::default();
        let mut src = mk(3);
        intra_batch_run(&mut state, &mut src, &c, &mut report).unwrap();
        assert_eq!(adv.data(), state.adv.data());
    }

    #[test]
    fn inter_requires_carries() {
        let clean = Tensor::filled(vec![1, 2, 2], 0.5);
        let mut state = AttackState::new(&clean, &clean, 1e-2);
        let mut src = ClosureGradient(|_: &Tensor| Tensor::filled(vec![1, 2, 2], 1.0));
        let mut report = AttackReport::default();
        assert!(inter_batch_run(&mut state, &mut src, &cfg(), &mut report).is_err());
        assert!(intra_batch_run(&mut state, &mut src, &cfg(), &mut report).is_ok());
    }

    #[test]
    fn zero_carry_weights_reduce_to_fresh_intra_run() {
        let clean = Tensor::filled(vec![1, 3, 3], 0.5);
        let gt = clean.clone();
        let mut c = cfg();
        c.beta1 = 0.0;
        c.beta2 = 0.0;
        c.max_iters = 6;
        let mk = || ClosureGradient(|adv: &Tensor| adv.map(|v| (v * 13.0).cos() - 0.3));

        // Two-batch run with zero carry weights.
        let mut sources: Vec<Box<dyn GradientSource>> = vec![Box::new(mk()), Box::new(mk())];
        let (two_batch, _) = run_smbea_with_sources(&clean, &gt, &mut sources, &c, &[1.0, 1.0]).unwrap();

        // Fresh intra-batch run started from the first batch's output.
        let mut state = AttackState::new(&clean, &gt, 1.0);
        let mut report = AttackReport::default();
        let mut src = mk();
        intra_batch_run(&mut state, &mut src, &c, &mut report).unwrap();
        let mut fresh = AttackState::new(&clean, &gt, 1.0);
        fresh.adv = state.adv.clone();
        let mut src2 = mk();
        intra_batch_run(&mut fresh, &mut src2, &c, &mut report).unwrap();

        for (a, b) in two_batch.data().iter().zip(fresh.adv.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mim_with_zero_momentum_reproduces_ifgsm() {
        let clean = Tensor::filled(vec![1, 3, 3], 0.5);
        let bcfg = BaselineConfig {
            momentum: 0.0,
            ..BaselineConfig::new(1e-3, 7, 1.0, 0)
        };
        let mk = || ClosureGradient(|adv: &Tensor| adv.map(|v| (v * 7.0).sin() - 0.2));
        let mut s1 = mk();
        let (a, _) = run_baseline_with_source(BaselineKind::Mim, &clean, &mut s1, &bcfg).unwrap();
        let mut s2 = mk();
        let (b, _) = run_baseline_with_source(BaselineKind::Ifgsm, &clean, &mut s2, &bcfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pgd_random_start_respects_budget() {
        let clean = Tensor::filled(vec![3, 4, 4], 0.5);
        let budget = 2e-2;
        let bcfg = BaselineConfig::new(1e-3, 0, budget, 7);
        let mut src = ClosureGradient(|_: &Tensor| Tensor::filled(vec![3, 4, 4], 1.0));
        let (adv, _) = run_baseline_with_source(BaselineKind::Pgd, &clean, &mut src, &bcfg).unwrap();
        assert!(l1_perceptual(&clean, &adv).unwrap() <= budget);
        assert!(crate::tensor::max_abs_diff(&clean, &adv) > 0.0);
    }

    #[test]
    fn fgsm_is_one_signed_step() {
        let clean = Tensor::new(vec![1, 1, 4], vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        let grad = Tensor::new(vec![1, 1, 4], vec![2.0, -3.0, -1.0, 4.0]).unwrap();
        let g2 = grad.clone();
        let mut src = ClosureGradient(move |_: &Tensor| g2.clone());
        let bcfg = BaselineConfig::new(0.1, 99, 1.0, 0);
        let (adv, report) = run_baseline_with_source(BaselineKind::Fgsm, &clean, &mut src, &bcfg).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(adv.data(), &[0.4, 0.6, 0.1, 0.9]);
    }

    #[test]
    fn noise_lands_at_or_under_budget() {
        let clean = Tensor::filled(vec![3, 8, 8], 0.3);
        for seed in 0..5 {
            let adv = run_noise(&clean, 1.5e-2, seed).unwrap();
            let l1 = l1_perceptual(&clean, &adv).unwrap();
            assert!(l1 <= 1.5e-2, "seed {seed}: {l1}");
            assert!(l1 > 5e-3, "noise should sit near the budget, got {l1}");
        }
    }

    #[test]
    fn sgd_step_is_definitional_and_adagrad_accumulates() {
        let c = cfg();
        let adv = Tensor::filled(vec![4], 0.5);
        let ghat = Tensor::new(vec![4], vec![0.2, -0.1, 0.4, -0.3]).unwrap();
        let mut st = OptimizerState::new(&[4]);
        let out = optimizer_variant_step(OptimizerKind::Sgd, &mut st, &adv, &ghat, &c);
        for ((&o, &x), &g) in out.data().iter().zip(adv.data()).zip(ghat.data()) {
            assert_eq!(o, (x - c.alpha * g).clamp(0.0, 1.0));
        }

        let mut st = OptimizerState::new(&[4]);
        let mut prev = st.v.clone();
        for _ in 0..5 {
            optimizer_variant_step(OptimizerKind::Adagrad, &mut st, &adv, &ghat, &c);
            for (a, b) in st.v.data().iter().zip(prev.data()) {
                assert!(a >= b);
            }
            prev = st.v.clone();
        }
    }

    #[test]
    fn adam_variant_matches_intra_batch_trajectory() {
        let clean = Tensor::filled(vec![1, 2, 2], 0.5);
        let gt = clean.clone();
        let mut c = cfg();
        c.max_iters = 9;
        let mk = || ClosureGradient(|adv: &Tensor| adv.map(|v| (v * 5.0).sin() + 0.1));

        let mut state = AttackState::new(&clean, &gt, 1.0);
        let mut report = AttackReport::default();
        let mut src = mk();
        intra_batch_run(&mut state, &mut src, &c, &mut report).unwrap();

        let mut adv = clean.clone();
        let mut ost = OptimizerState::new(clean.shape());
        let mut src2 = mk();
        for _ in 0..9 {
            let (raw, _) = src2.gradient(&adv).unwrap();
            let ghat = normalize_gradient(&raw);
            adv = optimizer_variant_step(OptimizerKind::Adam, &mut ost, &adv, &ghat, &c);
        }
        for (a, b) in adv.data().iter().zip(state.adv.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn records_are_strictly_ordered() {
        let clean = Tensor::filled(vec![1, 2, 2], 0.5);
        let gt = clean.clone();
        let mut c = cfg();
        c.max_iters = 4;
        let mk = || ClosureGradient(|adv: &Tensor| adv.map(|v| v + 1.0));
        let mut sources: Vec<Box<dyn GradientSource>> =
            vec![Box::new(mk()), Box::new(mk()), Box::new(mk())];
        let (_, report) = run_smbea_with_sources(&clean, &gt, &mut sources, &c, &[1.0, 1.0, 1.0]).unwrap();
        let keys: Vec<(usize, usize)> = report.records.iter().map(|r| (r.batch, r.iter)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
        assert_eq!(report.snapshots.len(), 3);
    }
}
