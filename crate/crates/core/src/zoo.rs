//! Build, persist and load the source-model zoo.
//!
//! Sixteen base architectures vary depth, width, kernel size and seed;
//! each also gets a dilated variant fine-tuned briefly on the same
//! data, giving 32 models per task. Every model exposes `shallow`,
//! `mid` and `deep` taps with power-of-two channel counts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_dataset, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::Task;
use crate::model::{augment_dilated, build_model, load_model, save_model, train_model, LayerSpec, Model, ModelSpec, TapSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooConfig {
    pub task: Task,
    pub n_base: usize,
    pub hw: usize,
    pub n_pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ZooConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        ZooConfig {
            task,
            n_base: 16,
            hw: 64,
            n_pairs: 200,
            epochs: 12,
            lr: 2e-3,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooModelMeta {
    pub id: String,
    pub variant: String,
    pub clean_val_mse: f64,
    pub clean_val_mae: f64,
    /// Validation MSE relative to the base model (1.0 for bases).
    pub val_mse_ratio: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug)]
pub struct ZooEntry {
    pub meta: ZooModelMeta,
    pub model: Model,
}

#[derive(Debug)]
pub struct Zoo {
    pub task: Task,
    pub entries: Vec<ZooEntry>,
}

impl Zoo {
    pub fn model(&self, id: &str) -> Result<&Model> {
        self.entries
            .iter()
            .find(|e| e.meta.id == id)
            .map(|e| &e.model)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn meta(&self, id: &str) -> Result<&ZooModelMeta> {
        self.entries
            .iter()
            .find(|e| e.meta.id == id)
            .map(|e| &e.meta)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.meta.id.clone()).collect()
    }
}

/// The deterministic architecture family. Width/depth/kernel cycle so
/// neighbors differ; the back half adds an extra mid block.
pub fn base_specs(task: Task, n_base: usize, seed: u64) -> Vec<ModelSpec> {
    let out_channels = match task {
        Task::Translation => 3,
        Task::Saliency => 1,
    };
    (0..n_base)
        .map(|j| {
            let kernel = if j % 2 == 0 { 3 } else { 5 };
            let (c1, c2) = [(16, 32), (32, 32), (16, 16), (32, 16)][(j / 2) % 4];
            let c3 = if (j / 4) % 2 == 0 { 16 } else { 32 };
            let extra = j >= n_base.div_ceil(2);
            let mut layers = vec![
                LayerSpec::Conv { out_channels: c1, kernel, stride: 2, dilation: 1 },
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: c2, kernel: 3, stride: 1, dilation: 1 },
                LayerSpec::Norm,
                LayerSpec::Relu,
            ];
            if extra {
                layers.push(LayerSpec::Conv { out_channels: c2, kernel: 3, stride: 1, dilation: 1 });
                layers.push(LayerSpec::Norm);
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Upsample2x);
            layers.push(LayerSpec::Conv { out_channels: c3, kernel: 3, stride: 1, dilation: 1 });
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
            let deep = layers.len() - 1;
            layers.push(LayerSpec::Conv { out_channels, kernel: 3, stride: 1, dilation: 1 });
            layers.push(LayerSpec::Sigmoid);
            ModelSpec {
                id: format!("m{j:02}"),
                input_channels: 3,
                output_channels: out_channels,
                layers,
                taps: vec![
                    TapSpec { name: "shallow".into(), layer: 2 },
                    TapSpec { name: "mid".into(), layer: 5 },
                    TapSpec { name: "deep".into(), layer: deep },
                ],
                seed: seed.wrapping_add(7919 * j as u64 + 1),
            }
        })
        .collect()
}

/// Train the 16 bases and their dilated variants. Dilated variants that
/// land above 1.2x the base validation MSE get extra fine-tune rounds.
pub fn build_zoo(cfg: &ZooConfig) -> Result<Zoo> {
    if cfg.n_base == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("zoo needs n_base >= 1 and epochs >= 1".into()));
    }
    let mut data = gen_dataset(cfg.task, cfg.n_pairs, cfg.hw, cfg.seed)?;
    data.targets = data
        .targets
        .iter()
        .map(|t| crate::data::to_model_target(cfg.task, t))
        .collect();
    let n_val = (cfg.n_pairs / 5).max(1);
    let (train, val) = data.split_tail(n_val);

    let specs = base_specs(cfg.task, cfg.n_base, cfg.seed);
    let results: Vec<Result<(ZooEntry, ZooEntry)>> = specs
        .into_par_iter()
        .map(|spec| build_pair(spec, &train, &val, cfg))
        .collect();

    let mut entries = Vec::with_capacity(2 * cfg.n_base);
    for r in results {
        let (base, dil) = r?;
        entries.push(base);
        entries.push(dil);
    }
    Ok(Zoo { task: cfg.task, entries })
}

fn build_pair(
    spec: ModelSpec,
    train: &PairedDataset,
    val: &PairedDataset,
    cfg: &ZooConfig,
) -> Result<(ZooEntry, ZooEntry)> {
    let mut base = build_model(spec)?;
    let mean_target: f64 = train
        .targets
        .iter()
        .map(|t| t.data().iter().sum::<f64>() / t.numel() as f64)
        .sum::<f64>()
        / train.targets.len() as f64;
    base.init_output_level(mean_target)?;
    let stats = train_model(&mut base, &train.inputs, &train.targets, cfg.epochs, cfg.lr)?;
    let base_mse = base.mean_mse(&val.inputs, &val.targets)?;
    let base_mae = base.mean_mae(&val.inputs, &val.targets)?;

    let mut dil = augment_dilated(&base, &train.inputs, &train.targets, cfg.epochs, cfg.lr)?;
    let mut dil_mse = dil.mean_mse(&val.inputs, &val.targets)?;
    let ft_epochs = (cfg.epochs / 5).max(1);
    let mut rounds = 0;
    while dil_mse > 1.2 * base_mse && rounds < 5 {
        dil.thaw();
        train_model(&mut dil, &train.inputs, &train.targets, ft_epochs, cfg.lr)?;
        dil_mse = dil.mean_mse(&val.inputs, &val.targets)?;
        rounds += 1;
    }
    let dil_mae = dil.mean_mae(&val.inputs, &val.targets)?;

    let base_meta = ZooModelMeta {
        id: base.id().to_string(),
        variant: "base".into(),
        clean_val_mse: base_mse,
        clean_val_mae: base_mae,
        val_mse_ratio: 1.0,
        epoch_losses: stats.epoch_losses,
    };
    let dil_meta = ZooModelMeta {
        id: dil.id().to_string(),
        variant: "dilated".into(),
        clean_val_mse: dil_mse,
        clean_val_mae: dil_mae,
        val_mse_ratio: dil_mse / base_mse,
        epoch_losses: Vec::new(),
    };
    Ok((
        ZooEntry { meta: base_meta, model: base },
        ZooEntry { meta: dil_meta, model: dil },
    ))
}

#[derive(Serialize, Deserialize)]
struct ZooManifest {
    task: Task,
    models: Vec<ZooModelMeta>,
}

pub fn save_zoo(zoo: &Zoo, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for e in &zoo.entries {
        save_model(&e.model, dir.join(&e.meta.id))?;
    }
    let manifest = ZooManifest {
        task: zoo.task,
        models: zoo.entries.iter().map(|e| e.meta.clone()).collect(),
    };
    std::fs::write(dir.join("zoo.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_zoo(dir: impl AsRef<Path>) -> Result<Zoo> {
    let dir = dir.as_ref();
    let manifest: ZooManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("zoo.json"))?)?;
    let mut entries = Vec::with_capacity(manifest.models.len());
    for meta in manifest.models {
        let model = load_model(dir.join(&meta.id))?;
        if model.id() != meta.id {
            return Err(Error::bad_format(
                "zoo manifest",
                format!("directory {} holds model {}", meta.id, model.id()),
            ));
        }
        entries.push(ZooEntry { meta, model });
    }
    Ok(Zoo { task: manifest.task, entries })
}

/// Max absolute prediction difference between two models on one input.
pub fn prediction_gap(a: &Model, b: &Model, input: &Tensor) -> Result<f64> {
    Ok(crate::tensor::max_abs_diff(&a.predict(input)?, &b.predict(input)?))
}

/// Moving-average smoothing used to judge training-loss trends.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    if losses.len() < window || window == 0 {
        return losses.to_vec();
    }
    losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
