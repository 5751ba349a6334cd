//! Config-driven experiments: craft adversaries on source batches and
//! measure black-box transfer to hold-out models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    run_baseline_with_source, run_noise, run_smbea_with_sources, schedule_bounds, AttackConfig,
    BaselineConfig, BaselineKind, EnsembleGradient, GradientSource, IterRecord,
};
use crate::data::gen_dataset;
use crate::ensemble::{EnsembleSpec, Strategy};
use crate::error::{Error, Result};
use crate::losses::{l1_perceptual, neg_cc, mse_eval, ObjectiveConfig, Task};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::zoo::Zoo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[serde(rename = "none")]
    NoAttack,
    Noise,
    Fgsm,
    Ifgsm,
    Mim,
    Pgd,
    Smbea,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::NoAttack => "none",
            AttackKind::Noise => "noise",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Ifgsm => "ifgsm",
            AttackKind::Mim => "mim",
            AttackKind::Pgd => "pgd",
            AttackKind::Smbea => "smbea",
        }
    }

    fn needs_gradients(&self) -> bool {
        !matches!(self, AttackKind::NoAttack | AttackKind::Noise)
    }
}

/// How per-batch perceptual bounds are chosen: the recursive schedule
/// or explicit per-batch values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BudgetMode {
    Schedule,
    Fixed { bounds: Vec<f64> },
}

impl Default for BudgetMode {
    fn default() -> Self {
        BudgetMode::Schedule
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub zoo_dir: Option<String>,
    /// Attacks to run and tabulate together at shared budgets.
    pub attacks: Vec<AttackKind>,
    /// Source-model ids, one inner list per mini-batch of K.
    pub batches: Vec<Vec<String>>,
    pub holdouts: Vec<String>,
    /// Surrogate for the translation feature term; never a source or
    /// hold-out.
    #[serde(default)]
    pub perceptual_model: Option<String>,
    /// Batch-count columns to evaluate, ascending (default: all batches).
    #[serde(default)]
    pub eval_batches: Vec<usize>,
    #[serde(default = "d_strategy")]
    pub strategy: Strategy,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_tap")]
    pub tap: String,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub attack_cfg: AttackConfig,
    #[serde(default)]
    pub budget: BudgetMode,
    #[serde(default = "d_n_images")]
    pub n_images: usize,
    #[serde(default = "d_hw")]
    pub hw: usize,
    #[serde(default)]
    pub seed: u64,
    /// MIM momentum decay for the baseline comparisons.
    #[serde(default = "d_one")]
    pub mim_momentum: f64,
    /// PGD random-start amplitude as a fraction of the budget ball.
    #[serde(default = "d_one")]
    pub pgd_start_scale: f64,
    /// Where the CLI writes reports; overridable on the command line.
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn d_one() -> f64 {
    1.0
}

fn d_strategy() -> Strategy {
    Strategy::S3GroupPool
}
fn d_p() -> usize {
    8
}
fn d_tap() -> String {
    "deep".into()
}
fn d_n_images() -> usize {
    50
}
fn d_hw() -> usize {
    64
}

impl ExperimentConfig {
    pub fn columns(&self) -> Vec<usize> {
        if self.eval_batches.is_empty() {
            vec![self.batches.len()]
        } else {
            self.eval_batches.clone()
        }
    }

    pub fn bounds(&self) -> Result<Vec<f64>> {
        let n = self.batches.len();
        match &self.budget {
            BudgetMode::Schedule => Ok(schedule_bounds(
                self.attack_cfg.t1_first,
                self.attack_cfg.beta3,
                n,
            )),
            BudgetMode::Fixed { bounds } => {
                if bounds.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "{} fixed bounds for {n} batches",
                        bounds.len()
                    )));
                }
                if bounds.iter().any(|&b| b <= 0.0) {
                    return Err(Error::InvalidArgument("fixed bounds must be positive".into()));
                }
                Ok(bounds.clone())
            }
        }
    }

    pub fn validate(&self, zoo: &Zoo) -> Result<()> {
        self.attack_cfg.validate()?;
        self.objective.validate()?;
        if self.objective.task != self.task || zoo.task != self.task {
            return Err(Error::InvalidArgument(
                "task, objective task and zoo task must agree".into(),
            ));
        }
        if self.attacks.is_empty() {
            return Err(Error::InvalidArgument("no attacks configured".into()));
        }
        if self.batches.is_empty() {
            return Err(Error::InvalidArgument("no source batches configured".into()));
        }
        if self.batches.len() > self.attack_cfg.max_batches {
            return Err(Error::InvalidArgument(format!(
                "{} batches exceed max_batches {}",
                self.batches.len(),
                self.attack_cfg.max_batches
            )));
        }
        if self.holdouts.is_empty() {
            return Err(Error::InvalidArgument("need at least one hold-out model".into()));
        }
        let mut sources = std::collections::HashSet::new();
        for batch in &self.batches {
            if batch.len() != self.attack_cfg.k {
                return Err(Error::InvalidArgument(format!(
                    "batch of {} models but K={}",
                    batch.len(),
                    self.attack_cfg.k
                )));
            }
            for id in batch {
                zoo.model(id)?;
                if !sources.insert(id.clone()) {
                    return Err(Error::InvalidArgument(format!("model {id} appears in two batches")));
                }
            }
        }
        for id in &self.holdouts {
            zoo.model(id)?;
            if sources.contains(id) {
                return Err(Error::InvalidArgument(format!(
                    "hold-out {id} also appears in a source batch"
                )));
            }
        }
        match &self.perceptual_model {
            Some(id) => {
                zoo.model(id)?;
                if sources.contains(id) || self.holdouts.contains(id) {
                    return Err(Error::InvalidArgument(format!(
                        "perceptual surrogate {id} must be neither source nor hold-out"
                    )));
                }
            }
            None => {
                let wants_gradients = self.attacks.iter().any(|a| a.needs_gradients());
                if self.task == Task::Translation && wants_gradients {
                    return Err(Error::InvalidArgument(
                        "translation attacks need a perceptual surrogate model".into(),
                    ));
                }
            }
        }
        let cols = self.columns();
        if cols.is_empty() || cols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("eval_batches must be strictly ascending".into()));
        }
        if *cols.last().unwrap() > self.batches.len() || cols[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "eval column {} out of range for {} batches",
                cols.last().unwrap(),
                self.batches.len()
            )));
        }
        for batch in &self.batches {
            for id in batch {
                let model = zoo.model(id)?;
                let channels = model.spec().tap_channels(&self.tap)?;
                if !matches!(self.strategy, Strategy::S2ChannelPool) && channels % self.p != 0 {
                    return Err(Error::NonDivisibleChannels(channels, self.p));
                }
            }
        }
        self.bounds()?;
        Ok(())
    }

    /// Uniform-weight ensemble spec for one batch of models.
    pub fn espec_for(&self, models: &[&Model]) -> Result<EnsembleSpec> {
        let hw = (self.hw, self.hw);
        let mut target: Option<(usize, usize)> = None;
        for m in models {
            let r = m.spec().tap_hw(&self.tap, hw)?;
            if target.map_or(true, |t| r.0 * r.1 < t.0 * t.1) {
                target = Some(r);
            }
        }
        let target = target.ok_or_else(|| Error::InvalidArgument("empty model batch".into()))?;
        Ok(EnsembleSpec::uniform(
            models.len(),
            self.strategy,
            self.p,
            target,
            &self.tap,
        ))
    }
}

/// Per-hold-out transfer outcome, aggregated over test images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferResult {
    pub model_id: String,
    pub clean_metric: f64,
    pub adv_metric: f64,
    /// Performance drop: MSE_adv - MSE_clean for translation,
    /// CC_clean - CC_adv for saliency (positive means a stronger attack).
    pub drop: f64,
    pub realized_l1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnOutcome {
    pub batches_used: usize,
    pub budget: f64,
    pub per_holdout: Vec<TransferResult>,
    pub mean_drop: f64,
    pub mean_realized_l1: f64,
}

/// Per-sample tensors for one qualitative report panel.
#[derive(Clone, Debug)]
pub struct PanelSource {
    pub image_index: usize,
    pub clean: Tensor,
    pub adv: Tensor,
    pub clean_pred: Tensor,
    pub adv_pred: Tensor,
    pub guide_pred: Tensor,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub attack: AttackKind,
    pub columns: Vec<ColumnOutcome>,
    /// Iteration records per test image for the deepest column's run.
    pub traces: Vec<Vec<IterRecord>>,
    pub panels: Vec<PanelSource>,
}

struct ImageRun {
    /// Final adversary per evaluated column.
    column_advs: Vec<Tensor>,
    records: Vec<IterRecord>,
}

fn image_seed(seed: u64, image: usize, column: usize) -> u64 {
    seed ^ (0x5DEECE66D_u64.wrapping_mul(image as u64 + 1)).wrapping_add(column as u64)
}

fn craft_one(
    kind: AttackKind,
    cfg: &ExperimentConfig,
    zoo: &Zoo,
    clean: &Tensor,
    guide: &Tensor,
    guide_target: &Tensor,
    image_index: usize,
    bounds: &[f64],
    columns: &[usize],
) -> Result<ImageRun> {
    let surrogate: Option<(&Model, &str)> = match &cfg.perceptual_model {
        Some(id) if kind.needs_gradients() => Some((zoo.model(id)?, "deep")),
        _ => None,
    };

    match kind {
        AttackKind::NoAttack => Ok(ImageRun {
            column_advs: columns.iter().map(|_| clean.clone()).collect(),
            records: Vec::new(),
        }),
        AttackKind::Noise => {
            let mut advs = Vec::with_capacity(columns.len());
            for (ci, &col) in columns.iter().enumerate() {
                let adv = run_noise(clean, bounds[col - 1], image_seed(cfg.seed, image_index, ci))?;
                advs.push(adv);
            }
            Ok(ImageRun { column_advs: advs, records: Vec::new() })
        }
        AttackKind::Smbea => {
            let deepest = *columns.last().unwrap();
            let mut especs = Vec::with_capacity(deepest);
            let mut batch_models = Vec::with_capacity(deepest);
            let mut sources: Vec<Box<dyn GradientSource + '_>> = Vec::with_capacity(deepest);
            for batch in &cfg.batches[..deepest] {
                let models: Vec<&Model> = batch.iter().map(|id| zoo.model(id)).collect::<Result<_>>()?;
                especs.push(cfg.espec_for(&models)?);
                batch_models.push(models);
            }
            for (models, espec) in batch_models.iter().zip(&especs) {
                sources.push(Box::new(EnsembleGradient::new(
                    models.clone(),
                    espec,
                    &cfg.objective,
                    clean,
                    guide,
                    guide_target,
                    surrogate,
                )?));
            }
            let (_, report) =
                run_smbea_with_sources(clean, guide_target, &mut sources, &cfg.attack_cfg, &bounds[..deepest])?;
            let advs = columns
                .iter()
                .map(|&col| report.snapshots[col - 1].adv.clone())
                .collect();
            Ok(ImageRun { column_advs: advs, records: report.records })
        }
        AttackKind::Fgsm | AttackKind::Ifgsm | AttackKind::Mim | AttackKind::Pgd => {
            let bkind = match kind {
                AttackKind::Fgsm => BaselineKind::Fgsm,
                AttackKind::Ifgsm => BaselineKind::Ifgsm,
                AttackKind::Mim => BaselineKind::Mim,
                _ => BaselineKind::Pgd,
            };
            let models: Vec<&Model> = cfg.batches[0].iter().map(|id| zoo.model(id)).collect::<Result<_>>()?;
            let espec = cfg.espec_for(&models)?;
            let mut advs = Vec::with_capacity(columns.len());
            let mut records = Vec::new();
            for (ci, &col) in columns.iter().enumerate() {
                let budget = bounds[col - 1];
                let bcfg = BaselineConfig {
                    step: if bkind == BaselineKind::Fgsm { budget } else { cfg.attack_cfg.alpha },
                    max_iters: cfg.attack_cfg.max_iters * col,
                    budget,
                    momentum: cfg.mim_momentum,
                    start_scale: cfg.pgd_start_scale,
                    seed: image_seed(cfg.seed, image_index, ci),
                };
                let mut source = EnsembleGradient::new(
                    models.clone(),
                    &espec,
                    &cfg.objective,
                    clean,
                    guide,
                    guide_target,
                    surrogate,
                )?;
                let (adv, report) = run_baseline_with_source(bkind, clean, &mut source, &bcfg)?;
                advs.push(adv);
                records = report.records;
            }
            Ok(ImageRun { column_advs: advs, records })
        }
    }
}

fn holdout_metric(task: Task, pred: &Tensor, truth: &Tensor) -> Result<f64> {
    match task {
        Task::Translation => mse_eval(pred, truth),
        Task::Saliency => Ok(-neg_cc(pred, truth)?),
    }
}

/// Run one attack kind over the test set and measure hold-out transfer.
pub fn run_single_attack(zoo: &Zoo, cfg: &ExperimentConfig, kind: AttackKind) -> Result<ExperimentOutcome> {
    cfg.validate(zoo)?;
    let columns = cfg.columns();
    let bounds = cfg.bounds()?;
    let test = gen_dataset(cfg.task, cfg.n_images, cfg.hw, cfg.seed ^ 0x7465_7374)?;

    let holdout_models: Vec<&Model> = cfg.holdouts.iter().map(|id| zoo.model(id)).collect::<Result<_>>()?;
    let holdout_before: Vec<u64> = holdout_models.iter().map(|m| m.backward_count()).collect();
    let source_params: Vec<Vec<Tensor>> = cfg
        .batches
        .iter()
        .flatten()
        .map(|id| Ok(zoo.model(id)?.params().to_vec()))
        .collect::<Result<_>>()?;

    let runs: Vec<Result<ImageRun>> = (0..cfg.n_images)
        .into_par_iter()
        .map(|k| {
            let guide_idx = (k + 1) % cfg.n_images;
            let guide_target = crate::data::to_model_target(cfg.task, &test.targets[guide_idx]);
            craft_one(
                kind,
                cfg,
                zoo,
                &test.inputs[k],
                &test.inputs[guide_idx],
                &guide_target,
                k,
                &bounds,
                &columns,
            )
        })
        .collect();
    let runs: Vec<ImageRun> = runs.into_iter().collect::<Result<_>>()?;

    // Hold-out isolation: crafting must never touch hold-out gradients.
    for (m, &before) in holdout_models.iter().zip(&holdout_before) {
        if m.backward_count() != before {
            return Err(Error::InvalidArgument(format!(
                "hold-out {} participated in a backward pass during crafting",
                m.id()
            )));
        }
    }
    // Frozen sources must be bit-identical after the attack runs.
    for (params, id) in source_params.iter().zip(cfg.batches.iter().flatten()) {
        let model = zoo.model(id)?;
        for (a, b) in params.iter().zip(model.params()) {
            if a != b {
                return Err(Error::InvalidArgument(format!("source {id} parameters changed")));
            }
        }
    }

    let mut column_outcomes = Vec::with_capacity(columns.len());
    for (ci, &col) in columns.iter().enumerate() {
        let budget = bounds[col - 1];
        let mean_realized_l1 = runs
            .iter()
            .enumerate()
            .map(|(k, r)| l1_perceptual(&test.inputs[k], &r.column_advs[ci]).unwrap())
            .sum::<f64>()
            / runs.len() as f64;

        let mut per_holdout = Vec::with_capacity(holdout_models.len());
        for model in &holdout_models {
            let mut clean_acc = 0.0;
            let mut adv_acc = 0.0;
            for (k, run) in runs.iter().enumerate() {
                let truth = &test.targets[k];
                let clean_pred = model.predict(&test.inputs[k])?;
                let adv_pred = model.predict(&run.column_advs[ci])?;
                clean_acc += holdout_metric(cfg.task, &clean_pred, truth)?;
                adv_acc += holdout_metric(cfg.task, &adv_pred, truth)?;
            }
            let clean_metric = clean_acc / runs.len() as f64;
            let adv_metric = adv_acc / runs.len() as f64;
            let drop = match cfg.task {
                Task::Translation => adv_metric - clean_metric,
                Task::Saliency => clean_metric - adv_metric,
            };
            per_holdout.push(TransferResult {
                model_id: model.id().to_string(),
                clean_metric,
                adv_metric,
                drop,
                realized_l1: mean_realized_l1,
            });
        }
        let mean_drop = per_holdout.iter().map(|t| t.drop).sum::<f64>() / per_holdout.len() as f64;
        column_outcomes.push(ColumnOutcome {
            batches_used: col,
            budget,
            per_holdout,
            mean_drop,
            mean_realized_l1,
        });
    }

    let panel_model = holdout_models[0];
    let mut panels = Vec::new();
    for (k, run) in runs.iter().take(4).enumerate() {
        let guide_idx = (k + 1) % cfg.n_images;
        let adv = run.column_advs.last().unwrap().clone();
        panels.push(PanelSource {
            image_index: k,
            clean: test.inputs[k].clone(),
            adv: adv.clone(),
            clean_pred: panel_model.predict(&test.inputs[k])?,
            adv_pred: panel_model.predict(&adv)?,
            guide_pred: panel_model.predict(&test.inputs[guide_idx])?,
        });
    }

    Ok(ExperimentOutcome {
        attack: kind,
        columns: column_outcomes,
        traces: runs.into_iter().map(|r| r.records).collect(),
        panels,
    })
}

/// Run every configured attack at the shared budgets.
pub fn run_experiment(zoo: &Zoo, cfg: &ExperimentConfig) -> Result<Vec<ExperimentOutcome>> {
    cfg.validate(zoo)?;
    let mut outcomes = Vec::with_capacity(cfg.attacks.len());
    for &kind in &cfg.attacks {
        outcomes.push(
            run_single_attack(zoo, cfg, kind).map_err(|e| e.in_stage(format!("attack {}", kind.label())))?,
        );
    }
    Ok(outcomes)
}

// ── Ablation sweeps ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Sweep {
    Strategies(Vec<Strategy>),
    TapDepth(Vec<String>),
    /// (beta1, beta2) pairs; the (0, 0) no-carry control is always
    /// included.
    MomentumCarry(Vec<(f64, f64)>),
}

impl Sweep {
    pub fn strategies_default() -> Self {
        Sweep::Strategies(vec![Strategy::S1EvenSample, Strategy::S2ChannelPool, Strategy::S3GroupPool])
    }

    pub fn tap_depth_default() -> Self {
        Sweep::TapDepth(vec!["shallow".into(), "mid".into(), "deep".into()])
    }

    pub fn momentum_default(cfg: &AttackConfig) -> Self {
        Sweep::MomentumCarry(vec![(cfg.beta1, cfg.beta2), (0.0, 0.0)])
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub outcome: ExperimentOutcome,
}

/// Run the configured grid with shared seeds, one row per setting.
pub fn ablation_run(zoo: &Zoo, cfg: &ExperimentConfig, sweep: &Sweep) -> Result<Vec<AblationRow>> {
    if cfg.attacks.len() != 1 {
        return Err(Error::InvalidArgument("ablations sweep a single attack kind".into()));
    }
    let kind = cfg.attacks[0];
    let mut rows = Vec::new();
    match sweep {
        Sweep::Strategies(strategies) => {
            if strategies.is_empty() {
                return Err(Error::InvalidArgument("empty sweep".into()));
            }
            for &s in strategies {
                let mut c = cfg.clone();
                c.strategy = s;
                rows.push(AblationRow {
                    label: format!("{s:?}"),
                    outcome: run_single_attack(zoo, &c, kind)?,
                });
            }
        }
        Sweep::TapDepth(taps) => {
            if taps.is_empty() {
                return Err(Error::InvalidArgument("empty sweep".into()));
            }
            let reference = zoo.model(&cfg.batches[0][0])?;
            let mut ordered: Vec<(usize, String)> = taps
                .iter()
                .map(|t| Ok((reference.spec().tap_depth(t)?, t.clone())))
                .collect::<Result<_>>()?;
            ordered.sort();
            for (depth, tap) in ordered {
                let mut c = cfg.clone();
                c.tap = tap.clone();
                rows.push(AblationRow {
                    label: format!("tap {tap} (layer {depth})"),
                    outcome: run_single_attack(zoo, &c, kind)?,
                });
            }
        }
        Sweep::MomentumCarry(pairs) => {
            if pairs.is_empty() {
                return Err(Error::InvalidArgument("empty sweep".into()));
            }
            let mut pairs = pairs.clone();
            if !pairs.iter().any(|&(b1, b2)| b1 == 0.0 && b2 == 0.0) {
                pairs.push((0.0, 0.0));
            }
            for (b1, b2) in pairs {
                let mut c = cfg.clone();
                c.attack_cfg.beta1 = b1;
                c.attack_cfg.beta2 = b2;
                rows.push(AblationRow {
                    label: format!("beta1={b1} beta2={b2}"),
                    outcome: run_single_attack(zoo, &c, kind)?,
                });
            }
        }
    }
    Ok(rows)
}
