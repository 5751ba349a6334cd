//! Report emission: comparison tables, iteration traces and
//! qualitative side-by-side panels. Reports regenerate byte-identically
//! from a persisted bundle.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::attack::IterRecord;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentOutcome, TransferResult};
use crate::losses::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SerdeTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for SerdeTensor {
    fn from(t: &Tensor) -> Self {
        SerdeTensor { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

impl SerdeTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableCell {
    pub batches_used: usize,
    pub budget: f64,
    pub mean_drop: f64,
    pub mean_realized_l1: f64,
    pub per_holdout: Vec<TransferResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub attack: String,
    pub cells: Vec<TableCell>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub task: Task,
    pub columns: Vec<usize>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub attack: String,
    pub image_index: usize,
    #[serde(flatten)]
    pub record: IterRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PanelRecord {
    pub attack: String,
    pub image_index: usize,
    pub clean: SerdeTensor,
    pub adv: SerdeTensor,
    pub clean_pred: SerdeTensor,
    pub adv_pred: SerdeTensor,
    pub guide_pred: SerdeTensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub table: ComparisonTable,
    pub traces: Vec<TraceRecord>,
    pub panels: Vec<PanelRecord>,
}

/// Assemble the bundle, enforcing budget parity: every attack in a
/// column shares the same realized budget cap.
pub fn build_bundle(task: Task, outcomes: &[ExperimentOutcome]) -> Result<ReportBundle> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("no outcomes to report".into()));
    }
    let columns: Vec<usize> = outcomes[0].columns.iter().map(|c| c.batches_used).collect();
    for o in outcomes {
        let cols: Vec<usize> = o.columns.iter().map(|c| c.batches_used).collect();
        if cols != columns {
            return Err(Error::InvalidArgument("outcomes disagree on batch columns".into()));
        }
        for (a, b) in o.columns.iter().zip(&outcomes[0].columns) {
            if a.budget != b.budget {
                return Err(Error::InvalidArgument(format!(
                    "budget parity violated in column {}: {} vs {}",
                    a.batches_used, a.budget, b.budget
                )));
            }
        }
    }
    let rows = outcomes
        .iter()
        .map(|o| TableRow {
            attack: o.attack.label().to_string(),
            cells: o
                .columns
                .iter()
                .map(|c| TableCell {
                    batches_used: c.batches_used,
                    budget: c.budget,
                    mean_drop: c.mean_drop,
                    mean_realized_l1: c.mean_realized_l1,
                    per_holdout: c.per_holdout.clone(),
                })
                .collect(),
        })
        .collect();
    let mut traces = Vec::new();
    let mut panels = Vec::new();
    for o in outcomes {
        for (k, records) in o.traces.iter().enumerate() {
            for r in records {
                traces.push(TraceRecord {
                    attack: o.attack.label().to_string(),
                    image_index: k,
                    record: r.clone(),
                });
            }
        }
        for p in &o.panels {
            panels.push(PanelRecord {
                attack: o.attack.label().to_string(),
                image_index: p.image_index,
                clean: (&p.clean).into(),
                adv: (&p.adv).into(),
                clean_pred: (&p.clean_pred).into(),
                adv_pred: (&p.adv_pred).into(),
                guide_pred: (&p.guide_pred).into(),
            });
        }
    }
    Ok(ReportBundle { table: ComparisonTable { task, columns, rows }, traces, panels })
}

pub fn save_bundle(bundle: &ReportBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("bundle.json"), serde_json::to_string(bundle)?)?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ReportBundle> {
    let dir = dir.as_ref();
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("bundle.json"))?)?)
}

/// Drop value as displayed: translation drops are positive-is-stronger
/// MSE deltas, saliency drops flip sign so stronger attacks print more
/// negative CC deltas.
fn displayed_drop(task: Task, drop: f64) -> f64 {
    match task {
        Task::Translation => drop,
        Task::Saliency => -drop,
    }
}

fn summary_text(table: &ComparisonTable) -> String {
    let metric = match table.task {
        Task::Translation => "dMSE (+ is stronger)",
        Task::Saliency => "dCC (- is stronger)",
    };
    let mut s = String::new();
    s.push_str(&format!("task: {:?}   metric: {}\n", table.task, metric));
    s.push_str(&format!("{:<10}", "attack"));
    for (c, cell0) in table.columns.iter().zip(&table.rows[0].cells) {
        s.push_str(&format!(" | {:<24}", format!("batches={c} budget={:.4e}", cell0.budget)));
    }
    s.push('\n');
    s.push_str(&format!("{:<10}", ""));
    for _ in &table.columns {
        s.push_str(&format!(" | {:<12}{:<12}", "drop", "l1"));
    }
    s.push('\n');
    for row in &table.rows {
        s.push_str(&format!("{:<10}", row.attack));
        for cell in &row.cells {
            s.push_str(&format!(
                " | {:<+12.6}{:<12.6}",
                displayed_drop(table.task, cell.mean_drop),
                cell.mean_realized_l1
            ));
        }
        s.push('\n');
    }
    s
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn tile_rgb(t: &Tensor) -> Result<Vec<[u8; 3]>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = match c {
                1 => {
                    let g = to_byte(t.at3(0, y, x));
                    [g, g, g]
                }
                3 => [to_byte(t.at3(0, y, x)), to_byte(t.at3(1, y, x)), to_byte(t.at3(2, y, x))],
                _ => return Err(Error::shape("panel tile", "1 or 3 channels", format!("{c}"))),
            };
            out.push(px);
        }
    }
    Ok(out)
}

/// Six tiles: clean, adversary, 10x amplified perturbation, clean
/// output, adversarial output, guide output.
fn render_panel(p: &PanelRecord, path: &Path) -> Result<()> {
    let clean = p.clean.to_tensor()?;
    let adv = p.adv.to_tensor()?;
    if !clean.same_shape(&adv) {
        return Err(Error::shape(
            "panel",
            format!("{:?}", clean.shape()),
            format!("{:?}", adv.shape()),
        ));
    }
    let perturb = Tensor::new(
        clean.shape().to_vec(),
        clean
            .data()
            .iter()
            .zip(adv.data())
            .map(|(&a, &b)| (10.0 * (a - b).abs()).clamp(0.0, 1.0))
            .collect(),
    )?;
    let tiles = [
        &clean,
        &adv,
        &perturb,
        &p.clean_pred.to_tensor()?,
        &p.adv_pred.to_tensor()?,
        &p.guide_pred.to_tensor()?,
    ];
    let h = tiles.iter().map(|t| t.shape()[1]).max().unwrap();
    let gap = 2usize;
    let total_w: usize = tiles.iter().map(|t| t.shape()[2]).sum::<usize>() + gap * (tiles.len() - 1);
    let mut img = RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    let mut x0 = 0usize;
    for t in tiles {
        let (th, tw) = (t.shape()[1], t.shape()[2]);
        let rgb = tile_rgb(t)?;
        for y in 0..th {
            for x in 0..tw {
                img.put_pixel((x0 + x) as u32, y as u32, image::Rgb(rgb[y * tw + x]));
            }
        }
        x0 += tw + gap;
    }
    img.save(path)?;
    Ok(())
}

/// One row per sweep setting: label plus per-column mean drops.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: Task,
    pub attack: String,
    pub columns: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn build_ablation_table(
    task: Task,
    rows: &[crate::experiment::AblationRow],
) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no ablation rows".into()));
    }
    let columns: Vec<usize> = rows[0].outcome.columns.iter().map(|c| c.batches_used).collect();
    Ok(AblationTable {
        task,
        attack: rows[0].outcome.attack.label().to_string(),
        columns,
        rows: rows
            .iter()
            .map(|r| {
                (
                    r.label.clone(),
                    r.outcome.columns.iter().map(|c| c.mean_drop).collect(),
                )
            })
            .collect(),
    })
}

pub fn write_ablation(table: &AblationTable, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(table)?)?;
    let mut s = String::new();
    s.push_str(&format!("task: {:?}   attack: {}\n", table.task, table.attack));
    s.push_str(&format!("{:<28}", "setting"));
    for c in &table.columns {
        s.push_str(&format!(" | batches={c:<3} drop  "));
    }
    s.push('\n');
    for (label, drops) in &table.rows {
        s.push_str(&format!("{label:<28}"));
        for d in drops {
            s.push_str(&format!(" | {:<+16.6}", displayed_drop(table.task, *d)));
        }
        s.push('\n');
    }
    std::fs::write(dir.join("ablation.txt"), s)?;
    Ok(())
}

/// Emit summary table, JSON results, the iteration trace stream and the
/// qualitative panels into `dir`.
pub fn write_report(bundle: &ReportBundle, dir: impl AsRef<Path>) -> Result<()> {
    if bundle.table.rows.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty report".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.txt"), summary_text(&bundle.table))?;
    std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(&bundle.table)?)?;

    let mut jsonl = String::new();
    for t in &bundle.traces {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("trace.jsonl"), jsonl)?;

    let panel_dir = dir.join("panels");
    std::fs::create_dir_all(&panel_dir)?;
    for p in &bundle.panels {
        let path = panel_dir.join(format!("{}_img{:02}.png", p.attack, p.image_index));
        render_panel(p, &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{AttackKind, ColumnOutcome, PanelSource};

    fn fake_outcome(attack: AttackKind, drop: f64, budget: f64) -> ExperimentOutcome {
        let clean = Tensor::filled(vec![3, 8, 8], 0.5);
        let adv = clean.map(|v| v + 0.02);
        let pred = Tensor::filled(vec![1, 8, 8], 0.25);
        ExperimentOutcome {
            attack,
            columns: vec![ColumnOutcome {
                batches_used: 1,
                budget,
                per_holdout: vec![TransferResult {
                    model_id: "h0".into(),
                    clean_metric: 0.8,
                    adv_metric: 0.8 - drop,
                    drop,
                    realized_l1: 0.01,
                }],
                mean_drop: drop,
                mean_realized_l1: 0.01,
            }],
            traces: vec![vec![IterRecord {
                batch: 1,
                iter: 1,
                objective: 1.0,
                fooling: 0.5,
                perceptual: 0.01,
                feature: 0.4,
                l1_after: 0.01,
            }]],
            panels: vec![PanelSource {
                image_index: 0,
                clean: clean.clone(),
                adv,
                clean_pred: pred.clone(),
                adv_pred: pred.clone(),
                guide_pred: pred,
            }],
        }
    }

    #[test]
    fn empty_outcomes_are_rejected() {
        assert!(build_bundle(Task::Saliency, &[]).is_err());
    }

    #[test]
    fn budget_parity_is_enforced() {
        let a = fake_outcome(AttackKind::Smbea, 0.1, 0.01);
        let b = fake_outcome(AttackKind::Mim, 0.05, 0.02);
        assert!(build_bundle(Task::Saliency, &[a, b]).is_err());
    }

    #[test]
    fn report_regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = fake_outcome(AttackKind::Smbea, 0.1, 0.01);
        let b = fake_outcome(AttackKind::Mim, 0.05, 0.01);
        let bundle = build_bundle(Task::Saliency, &[a, b]).unwrap();

        let d1 = dir.path().join("r1");
        save_bundle(&bundle, &d1).unwrap();
        write_report(&bundle, &d1).unwrap();

        let loaded = load_bundle(&d1).unwrap();
        let d2 = dir.path().join("r2");
        write_report(&loaded, &d2).unwrap();

        for f in ["summary.txt", "results.json", "trace.jsonl"] {
            assert_eq!(
                std::fs::read(d1.join(f)).unwrap(),
                std::fs::read(d2.join(f)).unwrap(),
                "{f} differs"
            );
        }
        assert_eq!(
            std::fs::read(d1.join("panels/smbea_img00.png")).unwrap(),
            std::fs::read(d2.join("panels/smbea_img00.png")).unwrap()
        );
        // Saliency drops are displayed with the negative-is-stronger sign.
        let summary = std::fs::read_to_string(d1.join("summary.txt")).unwrap();
        assert!(summary.contains("-0.1"), "summary:\n{summary}");
    }

    #[test]
    fn perturbation_panel_is_amplified_difference() {
        let dir = tempfile::tempdir().unwrap();
        let out = fake_outcome(AttackKind::Smbea, 0.1, 0.01);
        let bundle = build_bundle(Task::Saliency, &[out]).unwrap();
        write_report(&bundle, dir.path()).unwrap();
        let img = image::open(dir.path().join("panels/smbea_img00.png")).unwrap().to_rgb8();
        // Third tile starts after two 8px tiles and two 2px gaps; the
        // perturbation is uniformly 0.02, so 10x gives 0.2 -> 51.
        let px = img.get_pixel(8 + 2 + 8 + 2 + 3, 3);
        assert_eq!(px[0], 51);
    }
}
