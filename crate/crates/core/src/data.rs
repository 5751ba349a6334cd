//! Synthetic paired datasets for the two pixel-to-pixel tasks.
//!
//! Translation pairs: colored shape outlines over byte noise map to the
//! same shapes filled on black. Saliency pairs: scenes of colored
//! distractor shapes with exactly one red shape map to a normalized
//! Gaussian density centered on the red shape. All pixel values are
//! multiples of 1/255 on the input side, so PNG round-trips are
//! lossless; saliency targets are dense f64 maps.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Split off the last `n` pairs as a validation set.
    pub fn split_tail(mut self, n: usize) -> (PairedDataset, PairedDataset) {
        let cut = self.inputs.len().saturating_sub(n);
        let vi = self.inputs.split_off(cut);
        let vt = self.targets.split_off(cut);
        (self, PairedDataset { inputs: vi, targets: vt })
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Rect,
}

#[derive(Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    color: [u8; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Circle => {
                let (dx, dy) = (x - self.cx, y - self.cy);
                dx * dx + dy * dy <= self.r * self.r
            }
            ShapeKind::Rect => (x - self.cx).abs() <= self.r && (y - self.cy).abs() <= self.r,
        }
    }

    fn on_outline(&self, x: f64, y: f64, thickness: f64) -> bool {
        if !self.contains(x, y) {
            return false;
        }
        match self.kind {
            ShapeKind::Circle => {
                let (dx, dy) = (x - self.cx, y - self.cy);
                let inner = (self.r - thickness).max(0.0);
                dx * dx + dy * dy >= inner * inner
            }
            ShapeKind::Rect => {
                let inner = (self.r - thickness).max(0.0);
                (x - self.cx).abs() > inner || (y - self.cy).abs() > inner
            }
        }
    }
}

fn byte(v: u8) -> f64 {
    v as f64 / 255.0
}

fn paint(img: &mut Tensor, x: usize, y: usize, color: [u8; 3]) {
    for (c, &b) in color.iter().enumerate() {
        img.set3(c, y, x, byte(b));
    }
}

fn random_shape(rng: &mut ChaCha8Rng, hw: usize, color: [u8; 3]) -> Shape {
    let r = rng.gen_range(hw as f64 / 10.0..hw as f64 / 5.0);
    let margin = r + 2.0;
    let cx = rng.gen_range(margin..hw as f64 - margin);
    let cy = rng.gen_range(margin..hw as f64 - margin);
    let kind = if rng.gen_bool(0.5) { ShapeKind::Circle } else { ShapeKind::Rect };
    Shape { kind, cx, cy, r, color }
}

const PALETTE: [[u8; 3]; 6] = [
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [255, 128, 0],
];
const RED: [u8; 3] = [255, 0, 0];

fn translation_pair(rng: &mut ChaCha8Rng, hw: usize) -> (Tensor, Tensor) {
    let mut input = Tensor::zeros(vec![3, hw, hw]);
    for y in 0..hw {
        for x in 0..hw {
            for c in 0..3 {
                input.set3(c, y, x, byte(rng.gen_range(64..=192)));
            }
        }
    }
    // Fill colors stay inside [26, 230]/255 so sigmoid outputs can hit
    // them at finite preactivations.
    let mut target = Tensor::filled(vec![3, hw, hw], byte(26));
    let n_shapes = rng.gen_range(2..=4);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            random_shape(rng, hw, color)
        })
        .collect();
    let fill = |b: u8| -> u8 { b.clamp(26, 230) };
    for y in 0..hw {
        for x in 0..hw {
            let (fx, fy) = (x as f64, y as f64);
            for s in &shapes {
                if s.contains(fx, fy) {
                    target.set3(0, y, x, byte(fill(s.color[0])));
                    target.set3(1, y, x, byte(fill(s.color[1])));
                    target.set3(2, y, x, byte(fill(s.color[2])));
                }
                if s.on_outline(fx, fy, 2.0) {
                    paint(&mut input, x, y, s.color);
                }
            }
        }
    }
    (input, target)
}

fn saliency_pair(rng: &mut ChaCha8Rng, hw: usize) -> (Tensor, Tensor) {
    let mut input = Tensor::zeros(vec![3, hw, hw]);
    for y in 0..hw {
        for x in 0..hw {
            let g = rng.gen_range(96..=160);
            for c in 0..3 {
                input.set3(c, y, x, byte(g));
            }
        }
    }
    let n_distractors = rng.gen_range(2..=4);
    let mut shapes: Vec<Shape> = (0..n_distractors)
        .map(|_| {
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            random_shape(rng, hw, color)
        })
        .collect();
    let red = random_shape(rng, hw, RED);
    shapes.push(red);
    for y in 0..hw {
        for x in 0..hw {
            let (fx, fy) = (x as f64, y as f64);
            // Later shapes draw on top; the red shape is last.
            for s in &shapes {
                if s.contains(fx, fy) {
                    paint(&mut input, x, y, s.color);
                }
            }
        }
    }

    let sigma = hw as f64 / 8.0;
    let mut target = Tensor::zeros(vec![1, hw, hw]);
    let mut sum = 0.0;
    for y in 0..hw {
        for x in 0..hw {
            let (dx, dy) = (x as f64 - red.cx, y as f64 - red.cy);
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            target.set3(0, y, x, v);
            sum += v;
        }
    }
    let inv = 1.0 / sum;
    for v in target.data_mut() {
        *v *= inv;
    }
    (input, target)
}

/// Representation a model is trained to predict. Translation targets
/// pass through; saliency density maps are peak-normalized and then
/// compressed into [0.05, 0.95] so the sigmoid output layer reaches
/// them at finite preactivations instead of saturating toward exact
/// zeros. CC is invariant under the affine map and the KL losses
/// renormalize, so evaluation against the raw density maps is
/// unaffected.
pub fn to_model_target(task: Task, target: &Tensor) -> Tensor {
    match task {
        Task::Translation => target.clone(),
        Task::Saliency => {
            let peak = target.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if peak <= 0.0 {
                return target.clone();
            }
            target.map(|v| 0.05 + 0.90 * (v / peak))
        }
    }
}

/// Deterministic paired set; `hw` must be a power of two >= 32.
pub fn gen_dataset(task: Task, n: usize, hw: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    if !hw.is_power_of_two() || hw < 32 {
        return Err(Error::InvalidArgument(format!(
            "image extent must be a power of two >= 32, got {hw}"
        )));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64));
        let (x, y) = match task {
            Task::Translation => translation_pair(&mut rng, hw),
            Task::Saliency => saliency_pair(&mut rng, hw),
        };
        inputs.push(x);
        targets.push(y);
    }
    Ok(PairedDataset { inputs, targets })
}
