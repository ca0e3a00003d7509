//! A small single-stage grid detector.
//!
//! Three stride-2 3x3 convolutions (3 -> 16 -> 32 -> 32 channels, leaky
//! ReLU 0.1) reduce a 128x128 image to a 16x16 grid; a 1x1 head predicts
//! `(tx, ty, tw, th, to)` per cell against a single anchor.

use std::sync::Arc;

use autodiff::{logistic, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eot::TransformSample;
use crate::eval::iou;
use crate::optim::{adam_step, AdamState};
use crate::patch::RenderedPatch;
use crate::scene::{apply_patch, BoundingBox, LabeledScene};
use crate::{Error, Result};

pub const ARCH: &str = "capgen-grid-v1:conv3x3s2[16,32,32]+head1x1[5]";
pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
const CHANNELS: [usize; 4] = [3, 16, 32, 32];
const HEAD: usize = 5;
/// Initial objectness logit; most cells are background.
pub const OBJECTNESS_PRIOR: f64 = -4.0;
/// Total downsampling of the backbone.
pub const STRIDE: usize = 8;

pub const TENSOR_NAMES: [&str; 8] = ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "head.w", "head.b"];

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    /// Kernels and biases in [`TENSOR_NAMES`] order.
    pub weights: Vec<Tensor>,
    /// Anchor `(w, h)` in normalized units.
    pub anchor: (f64, f64),
    pub input_size: usize,
}

fn expected_shapes() -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for l in 0..3 {
        shapes.push(vec![CHANNELS[l + 1], CHANNELS[l], 3, 3]);
        shapes.push(vec![CHANNELS[l + 1]]);
    }
    shapes.push(vec![HEAD, CHANNELS[3], 1, 1]);
    shapes.push(vec![HEAD]);
    shapes
}

impl DetectorModel {
    /// Uniform He initialization; biases zero except the objectness bias,
    /// which starts at [`OBJECTNESS_PRIOR`].
    pub fn init(seed: u64, anchor: (f64, f64), input_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = expected_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                if i == 7 {
                    let mut b = Tensor::zeros(&shape);
                    b.data_mut()[4] = OBJECTNESS_PRIOR;
                    return b;
                }
                if i % 2 == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let gain = if i == 6 { 0.1 } else { 1.0 };
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape product")
            })
            .collect();
        Self::new(weights, anchor, input_size)
    }

    pub fn new(weights: Vec<Tensor>, anchor: (f64, f64), input_size: usize) -> Result<Self> {
        let shapes = expected_shapes();
        if weights.len() != shapes.len() {
            return Err(Error::invalid(format!("detector needs {} tensors, got {}", shapes.len(), weights.len())));
        }
        for ((w, s), name) in weights.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if w.shape() != s.as_slice() {
                return Err(Error::invalid(format!("{name}: expected shape {s:?}, got {:?}", w.shape())));
            }
            if !w.all_finite() {
                return Err(Error::invalid(format!("{name}: non-finite weights")));
            }
        }
        if !(anchor.0 > 0.0 && anchor.1 > 0.0) {
            return Err(Error::invalid(format!("anchor must be positive, got {anchor:?}")));
        }
        if input_size == 0 || input_size % STRIDE != 0 {
            return Err(Error::invalid(format!("input size must be a positive multiple of {STRIDE}")));
        }
        Ok(Self {
            weights,
            anchor,
            input_size,
        })
    }

    pub fn grid(&self) -> usize {
        self.input_size / STRIDE
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Puts the weights on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| if trainable { tape.leaf(w.clone()) } else { tape.constant(w.clone()) })
            .collect()
    }

    /// Head output `[5, S, S]` for a `[3, N, N]` image node.
    pub fn forward_on_tape(&self, tape: &mut Tape, weights: &[Var], image: Var) -> Result<Var> {
        let n = self.input_size;
        if tape.shape(image) != [3, n, n] {
            return Err(Error::invalid(format!(
                "detector expects a [3, {n}, {n}] image, got {:?}",
                tape.shape(image)
            )));
        }
        let mut x = image;
        for l in 0..3 {
            let y = tape.conv2d(x, weights[2 * l], Some(weights[2 * l + 1]), 2, 1)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(tape.conv2d(x, weights[6], Some(weights[7]), 1, 0)?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<GridPredictions> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, &w, x)?;
        Ok(GridPredictions::new(self.grid(), self.anchor, tape.value(out).data().to_vec()))
    }
}

/// Raw head output `[5, S, S]` with its decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPredictions {
    pub grid: usize,
    pub anchor: (f64, f64),
    pub raw: Vec<f64>,
}

impl GridPredictions {
    pub fn new(grid: usize, anchor: (f64, f64), raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), HEAD * grid * grid, "head output size");
        Self { grid, anchor, raw }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    fn channel(&self, c: usize, cell: usize) -> f64 {
        self.raw[c * self.cells() + cell]
    }

    pub fn objectness(&self, cell: usize) -> f64 {
        logistic(self.channel(4, cell))
    }

    pub fn cell_box(&self, cell: usize) -> BoundingBox {
        decode_cell(
            [0, 1, 2, 3].map(|c| self.channel(c, cell)),
            cell,
            self.grid,
            self.anchor,
        )
    }

    pub fn decode(&self, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
        let candidates = (0..self.cells())
            .filter_map(|cell| {
                let score = self.objectness(cell);
                (score >= conf_threshold).then(|| Detection {
                    bbox: self.cell_box(cell),
                    score,
                })
            })
            .collect();
        nms(candidates, nms_iou)
    }
}

/// Box of one cell from its `(tx, ty, tw, th)`.
pub fn decode_cell(t: [f64; 4], cell: usize, grid: usize, anchor: (f64, f64)) -> BoundingBox {
    let (row, col) = (cell / grid, cell % grid);
    BoundingBox::new(
        (col as f64 + logistic(t[0])) / grid as f64,
        (row as f64 + logistic(t[1])) / grid as f64,
        anchor.0 * t[2].exp(),
        anchor.1 * t[3].exp(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Greedy non-maximum suppression; ties keep the earlier candidate.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in candidates {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub negative_weight: f64,
    pub seed: u64,
    pub occlusion: Option<Occlusion>,
}

/// Cutout-style augmentation: with probability `prob` per object, a
/// mean-gray square covering a random fraction of the box is pasted near
/// the patch anchor, shifted by up to `jitter` of the box size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub prob: f64,
    pub ratio: (f64, f64),
    pub jitter: f64,
    pub fill: f64,
}

impl Default for Occlusion {
    fn default() -> Self {
        Self {
            prob: 0.5,
            ratio: (0.1, 0.35),
            jitter: 0.15,
            fill: 0.5,
        }
    }
}

fn occlude(scene: &LabeledScene, occ: &Occlusion, rng: &mut impl Rng) -> Result<LabeledScene> {
    let mut out = scene.clone();
    let flat = RenderedPatch::solid(4, 4, [occ.fill; 3]);
    for obj in &scene.objects {
        if rng.gen::<f64>() >= occ.prob {
            continue;
        }
        let ratio = rng.gen_range(occ.ratio.0..=occ.ratio.1);
        let mut shifted = *obj;
        shifted.cx += rng.gen_range(-occ.jitter..=occ.jitter) * obj.w;
        shifted.cy += rng.gen_range(-occ.jitter..=occ.jitter) * obj.h;
        let single = LabeledScene {
            image: out.image,
            objects: vec![shifted],
        };
        out.image = apply_patch(&single, &flat, ratio, &TransformSample::identity())?;
    }
    Ok(out)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 16,
            negative_weight: 0.5,
            seed: 0,
            occlusion: Some(Occlusion::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DetectorModel,
    /// Mean per-image loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean object size over the dataset.
pub fn mean_object_size(scenes: &[LabeledScene]) -> Result<(f64, f64)> {
    let boxes: Vec<&BoundingBox> = scenes.iter().flat_map(|s| &s.objects).collect();
    if boxes.is_empty() {
        return Err(Error::invalid("dataset has no objects"));
    }
    let n = boxes.len() as f64;
    Ok((
        boxes.iter().map(|b| b.w).sum::<f64>() / n,
        boxes.iter().map(|b| b.h).sum::<f64>() / n,
    ))
}

/// Per-cell training targets of one scene.
struct Targets {
    /// Objectness label per cell.
    labels: Vec<f64>,
    /// Per-cell BCE weight.
    weights: Vec<f64>,
    positives: Vec<usize>,
    /// Per positive: target offsets `(dx, dy)` and log sizes.
    offsets: Vec<f64>,
    log_sizes: Vec<f64>,
}

fn targets(scene: &LabeledScene, grid: usize, anchor: (f64, f64), negative_weight: f64) -> Targets {
    let cells = grid * grid;
    let mut labels = vec![0.0; cells];
    let mut owner: Vec<Option<usize>> = vec![None; cells];
    for (i, b) in scene.objects.iter().enumerate() {
        let col = ((b.cx * grid as f64) as usize).min(grid - 1);
        let row = ((b.cy * grid as f64) as usize).min(grid - 1);
        let cell = row * grid + col;
        // a larger object wins a shared cell
        if owner[cell].map_or(true, |j| scene.objects[j].area() < b.area()) {
            owner[cell] = Some(i);
        }
        labels[cell] = 1.0;
    }
    let weights = labels.iter().map(|&l| if l == 1.0 { 1.0 } else { negative_weight }).collect();
    let mut positives = Vec::new();
    let mut offsets = Vec::new();
    let mut log_sizes = Vec::new();
    for (cell, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            let b = scene.objects[*i];
            let (row, col) = (cell / grid, cell % grid);
            positives.push(cell);
            offsets.extend([b.cx * grid as f64 - col as f64, b.cy * grid as f64 - row as f64]);
            log_sizes.extend([(b.w / anchor.0).ln(), (b.h / anchor.1).ln()]);
        }
    }
    Targets {
        labels,
        weights,
        positives,
        offsets,
        log_sizes,
    }
}

/// Scalar training loss of one scene on `tape`.
fn scene_loss(tape: &mut Tape, model: &DetectorModel, weights: &[Var], scene: &LabeledScene, negative_weight: f64) -> Result<Var> {
    let grid = model.grid();
    let cells = grid * grid;
    let t = targets(scene, grid, model.anchor, negative_weight);
    let x = tape.constant(scene.image.tensor());
    let out = model.forward_on_tape(tape, weights, x)?;

    // objectness: w * (softplus(x) - y * x)
    let obj = tape.gather(out, Arc::new((4 * cells..5 * cells).collect()), &[cells])?;
    let e = tape.exp(obj);
    let e1 = tape.affine(e, 1.0, 1.0);
    let softplus = tape.log(e1);
    let w = tape.constant(Tensor::vector(t.weights.clone()));
    let wy: Vec<f64> = t.weights.iter().zip(&t.labels).map(|(w, y)| w * y).collect();
    let wy = tape.constant(Tensor::vector(wy));
    let a = tape.mul(softplus, w)?;
    let b = tape.mul(obj, wy)?;
    let bce = tape.sub(a, b)?;
    let mut loss = tape.sum(bce);

    if !t.positives.is_empty() {
        let p = t.positives.len();
        let xy_index: Vec<usize> = t.positives.iter().flat_map(|&c| [c, cells + c]).collect();
        let wh_index: Vec<usize> = t.positives.iter().flat_map(|&c| [2 * cells + c, 3 * cells + c]).collect();
        let txy = tape.gather(out, Arc::new(xy_index), &[2 * p])?;
        let sxy = tape.logistic(txy);
        let target = tape.constant(Tensor::vector(t.offsets));
        let dxy = tape.sub(sxy, target)?;
        let sq = tape.powf(dxy, 2.0);
        let lxy = tape.sum(sq);
        let twh = tape.gather(out, Arc::new(wh_index), &[2 * p])?;
        let target = tape.constant(Tensor::vector(t.log_sizes));
        let dwh = tape.sub(twh, target)?;
        let sq = tape.powf(dwh, 2.0);
        let lwh = tape.sum(sq);
        let box_loss = tape.add(lxy, lwh)?;
        loss = tape.add(loss, box_loss)?;
    }
    Ok(loss)
}

pub fn train_detector(scenes: &[LabeledScene], config: &TrainConfig) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::invalid("batch must be >= 1 and lr > 0"));
    }
    let size = scenes[0].image.width();
    if scenes.iter().any(|s| s.image.width() != size || s.image.height() != size) {
        return Err(Error::invalid("training scenes must share one square size"));
    }
    let anchor = mean_object_size(scenes)?;
    let mut model = DetectorModel::init(config.seed, anchor, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d37e_c70e);
    let sizes: Vec<usize> = model.weights.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut adam = AdamState::new(total);
    let mut flat: Vec<f64> = model.weights.iter().flat_map(|w| w.data().iter().copied()).collect();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch) {
            let mut grad = vec![0.0; total];
            for &i in batch {
                let augmented = match &config.occlusion {
                    Some(occ) => Some(occlude(&scenes[i], occ, &mut rng)?),
                    None => None,
                };
                let scene = augmented.as_ref().unwrap_or(&scenes[i]);
                let mut tape = Tape::new();
                let w = model.bind(&mut tape, true);
                let loss = scene_loss(&mut tape, &model, &w, scene, config.negative_weight)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("detector loss diverged in epoch {epoch}")));
                }
                epoch_loss += value;
                let grads = tape.backward(loss)?;
                let mut offset = 0;
                for (v, n) in w.iter().zip(&sizes) {
                    if let Some(g) = grads.get(*v) {
                        for (acc, gi) in grad[offset..offset + n].iter_mut().zip(g.data()) {
                            *acc += gi / batch.len() as f64;
                        }
                    }
                    offset += n;
                }
            }
            adam_step(&mut flat, &grad, &mut adam, config.lr)
                .map_err(|e| Error::Numerical(format!("detector training diverged in epoch {epoch}: {e}")))?;
            let mut offset = 0;
            for w in &mut model.weights {
                let n = w.numel();
                w.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        epoch_losses.push(epoch_loss / scenes.len() as f64);
    }
    Ok(TrainReport { model, epoch_losses })
}
