//! Patch optimization against the detector, and the pattern/color
//! decomposition built on it.
//!
//! Each step draws a batch of scenes and one transformation per image,
//! renders the patch, applies smoothing, photometric and geometric
//! perturbations, composites it onto every object, and lowers the largest
//! objectness among grid cells whose predicted box touches a target.

use autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::{DetectorModel, GridPredictions};
use crate::eot::{photometric_on_tape, sample_transform, smooth_on_tape, EotDomain, TransformRanges, TransformSample, DEFAULT_SMOOTHING_KERNEL, MATRIX_CLAMP};
use crate::eval::iou;
use crate::image::RgbImage;
use crate::io::PatchArtifact;
use crate::optim::{adam_step, AdamState};
use crate::palette::{extract_base_colors, BaseColorSet, DEFAULT_MAX_ITERS};
use crate::patch::{mixing_weights_on_tape, onehot_regularizer_on_tape, probabilities_to_weights, weights_to_image, PatchParams, RenderedPatch, DEFAULT_TAU};
use crate::scene::{composite_on_tape, BoundingBox, LabeledScene, DEFAULT_PATCH_RATIO};
use crate::{Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 16;
/// Half-width of the uniform logit range used by random allocation.
pub const RANDOM_ALLOCATION_RANGE: f64 = 3.0;
/// Temperature of the color-unrestricted baseline, soft enough that
/// mixtures of the cube corners cover the RGB cube.
pub const UNRESTRICTED_TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub lr: f64,
    pub batch: usize,
    /// One epoch is one shuffled pass over the attack scenes.
    pub epochs: usize,
    pub tau: f64,
    pub patch_ratio: f64,
    pub patch_size: (usize, usize),
    pub eot: TransformRanges,
    pub eot_samples: usize,
    pub smoothing: usize,
    pub domain: EotDomain,
    pub regularizer_weight: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            batch: 8,
            epochs: 200,
            tau: DEFAULT_TAU,
            patch_ratio: DEFAULT_PATCH_RATIO,
            patch_size: (DEFAULT_PATCH_SIZE, DEFAULT_PATCH_SIZE),
            eot: TransformRanges::default(),
            eot_samples: 1,
            smoothing: DEFAULT_SMOOTHING_KERNEL,
            domain: EotDomain::Pixel,
            regularizer_weight: 0.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.eot_samples == 0 {
            return Err(Error::invalid("batch and eot_samples must be at least 1"));
        }
        if self.patch_size.0 == 0 || self.patch_size.1 == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        self.eot.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub regularizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Parameters with the lowest recorded step loss.
    pub params: PatchParams,
    pub best_loss: f64,
    pub history: Vec<StepRecord>,
}

impl AttackResult {
    pub fn csv_rows(&self) -> Vec<(usize, f64, f64)> {
        self.history.iter().map(|r| (r.step, r.loss, r.regularizer)).collect()
    }
}

/// Grid cells whose decoded box overlaps any target. Falls back to the
/// cells whose centers lie inside a target, then to every cell.
pub fn overlapping_cells(pred: &GridPredictions, targets: &[BoundingBox]) -> Vec<usize> {
    let cells: Vec<usize> = (0..pred.cells())
        .filter(|&c| {
            let b = pred.cell_box(c);
            targets.iter().any(|t| iou(&b, t) > 0.0)
        })
        .collect();
    if !cells.is_empty() {
        return cells;
    }
    let g = pred.grid as f64;
    let inside: Vec<usize> = (0..pred.cells())
        .filter(|&c| {
            let (x, y) = (((c % pred.grid) as f64 + 0.5) / g, ((c / pred.grid) as f64 + 0.5) / g);
            targets.iter().any(|t| {
                let (x0, y0, x1, y1) = t.corners();
                x >= x0 && x <= x1 && y >= y0 && y <= y1
            })
        })
        .collect();
    if !inside.is_empty() {
        return inside;
    }
    (0..pred.cells()).collect()
}

/// Max objectness over target-overlapping cells of one `[3, N, N]` image.
pub fn attack_loss_on_tape(tape: &mut Tape, detector: &DetectorModel, weights: &[Var], image: Var, targets: &[BoundingBox]) -> Result<Var> {
    let out = detector.forward_on_tape(tape, weights, image)?;
    let pred = GridPredictions::new(detector.grid(), detector.anchor, tape.value(out).data().to_vec());
    let cells = overlapping_cells(&pred, targets);
    let n = pred.cells();
    let index: Vec<usize> = cells.iter().map(|c| 4 * n + c).collect();
    let len = index.len();
    let logits = tape.gather(out, std::sync::Arc::new(index), &[len])?;
    let obj = tape.logistic(logits);
    Ok(tape.max(obj)?)
}

/// Mean attack loss over already-patched images.
pub fn attack_loss(detector: &DetectorModel, images: &[RgbImage], targets: &[Vec<BoundingBox>]) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::invalid("attack loss needs a nonempty batch with one target list per image"));
    }
    let mut total = 0.0;
    for (img, t) in images.iter().zip(targets) {
        let mut tape = Tape::new();
        let w = detector.bind(&mut tape, false);
        let x = tape.constant(img.tensor());
        let l = attack_loss_on_tape(&mut tape, detector, &w, x, t)?;
        total += tape.value(l).item();
    }
    Ok(total / images.len() as f64)
}

/// Rendered and perturbed `[3, H, W]` patch node for logits `z`.
pub fn perturbed_patch_on_tape(
    tape: &mut Tape,
    z: Var,
    params: &PatchParams,
    palette: &BaseColorSet,
    sample: &TransformSample,
    smoothing: usize,
    domain: EotDomain,
) -> Result<Var> {
    if palette.k() != params.k() {
        return Err(Error::PaletteSize {
            expected: params.k(),
            found: palette.k(),
        });
    }
    let (w, h, k) = (params.width(), params.height(), params.k());
    match domain {
        EotDomain::Pixel => {
            let r = mixing_weights_on_tape(tape, z, params.tau())?;
            let img = weights_to_image(tape, r, palette, w, h)?;
            let img = smooth_on_tape(tape, img, smoothing)?;
            photometric_on_tape(tape, img, sample, (0.0, 1.0))
        }
        EotDomain::Matrix => {
            let m = tape.logistic(z);
            let planes = tape.transpose2d(m)?;
            let planes = tape.reshape(planes, &[k, h, w])?;
            let planes = smooth_on_tape(tape, planes, smoothing)?;
            let planes = photometric_on_tape(tape, planes, sample, MATRIX_CLAMP)?;
            let rows = tape.reshape(planes, &[k, h * w])?;
            let m = tape.transpose2d(rows)?;
            let r = probabilities_to_weights(tape, m, params.tau())?;
            weights_to_image(tape, r, palette, w, h)
        }
    }
}

/// Loss of one scene under one transformation, with its gradient in `z`.
pub fn scene_loss_and_grad(
    detector: &DetectorModel,
    scene: &LabeledScene,
    params: &PatchParams,
    palette: &BaseColorSet,
    sample: &TransformSample,
    config: &AttackConfig,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.leaf(params.z_tensor());
    let patch = perturbed_patch_on_tape(&mut tape, z, params, palette, sample, config.smoothing, config.domain)?;
    let (image, _) = composite_on_tape(&mut tape, scene, patch, config.patch_ratio, sample)?;
    let w = detector.bind(&mut tape, false);
    let loss = attack_loss_on_tape(&mut tape, detector, &w, image, &scene.objects)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = grads.take(z).unwrap_or_else(|| Tensor::zeros(&[params.pixels(), params.k()]));
    Ok((value, g))
}

pub fn optimize_patch(
    config: &AttackConfig,
    detector: &DetectorModel,
    scenes: &[LabeledScene],
    palette: &BaseColorSet,
    init: PatchParams,
) -> Result<AttackResult> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("attack needs at least one scene"));
    }
    if palette.k() != init.k() {
        return Err(Error::PaletteSize {
            expected: init.k(),
            found: palette.k(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let mut adam = AdamState::new(params.z().len());
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, params.clone());
    let mut order: Vec<usize> = (0..scenes.len()).collect();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let step = history.len();
            let draws = (batch.len() * config.eot_samples) as f64;
            let mut grad = vec![0.0; params.z().len()];
            let mut loss = 0.0;
            for &i in batch {
                for _ in 0..config.eot_samples {
                    let sample = sample_transform(&mut rng, &config.eot);
                    let (l, g) = scene_loss_and_grad(detector, &scenes[i], &params, palette, &sample, config)?;
                    loss += l / draws;
                    for (acc, gi) in grad.iter_mut().zip(g.data()) {
                        *acc += gi / draws;
                    }
                }
            }
            let mut regularizer = 0.0;
            if config.regularizer_weight > 0.0 {
                let mut tape = Tape::new();
                let z = tape.leaf(params.z_tensor());
                let r = onehot_regularizer_on_tape(&mut tape, z, params.tau())?;
                regularizer = tape.value(r).item();
                if let Some(g) = tape.backward(r)?.get(z) {
                    for (acc, gi) in grad.iter_mut().zip(g.data()) {
                        *acc += config.regularizer_weight * gi;
                    }
                }
            }
            let total = loss + config.regularizer_weight * regularizer;
            if !total.is_finite() {
                return Err(Error::Numerical(format!("attack loss is {total} at step {step}")));
            }
            history.push(StepRecord { step, loss, regularizer });
            if total < best.0 {
                best = (total, params.clone());
            }
            adam_step(params.z_mut(), &grad, &mut adam, config.lr)?;
        }
    }
    if history.is_empty() {
        return Ok(AttackResult {
            params,
            best_loss: f64::NAN,
            history,
        });
    }
    Ok(AttackResult {
        params: best.1,
        best_loss: best.0,
        history,
    })
}

/// Same logits, new colors.
pub fn swap_base_colors(params: &PatchParams, new_palette: &BaseColorSet) -> Result<(PatchParams, BaseColorSet)> {
    if new_palette.k() != params.k() {
        return Err(Error::PaletteSize {
            expected: params.k(),
            found: new_palette.k(),
        });
    }
    Ok((params.clone(), new_palette.clone()))
}

/// Logits drawn uniform in `[-3, 3]`; never optimized.
pub fn random_color_allocation(seed: u64, width: usize, height: usize, k: usize, tau: f64) -> Result<PatchParams> {
    PatchParams::random(width, height, k, tau, RANDOM_ALLOCATION_RANGE, seed)
}

/// Optimization started from a random allocation.
pub fn gradient_color_allocation(
    config: &AttackConfig,
    detector: &DetectorModel,
    scenes: &[LabeledScene],
    palette: &BaseColorSet,
    seed: u64,
) -> Result<AttackResult> {
    let (w, h) = config.patch_size;
    let init = random_color_allocation(seed, w, h, palette.k(), config.tau)?;
    optimize_patch(config, detector, scenes, palette, init)
}

/// Full optimization from the default near-uniform start.
pub fn full_attack(
    config: &AttackConfig,
    detector: &DetectorModel,
    scenes: &[LabeledScene],
    palette: &BaseColorSet,
) -> Result<AttackResult> {
    let (w, h) = config.patch_size;
    let init = PatchParams::init(w, h, palette.k(), config.tau, config.seed)?;
    optimize_patch(config, detector, scenes, palette, init)
}

/// Color-unrestricted baseline: the eight cube corners mixed at a soft
/// temperature.
pub fn unrestricted_attack(config: &AttackConfig, detector: &DetectorModel, scenes: &[LabeledScene]) -> Result<(AttackResult, BaseColorSet)> {
    let palette = BaseColorSet::rgb_cube();
    let cfg = AttackConfig {
        tau: UNRESTRICTED_TAU,
        ..config.clone()
    };
    Ok((full_attack(&cfg, detector, scenes, &palette)?, palette))
}

pub fn gray_patch(width: usize, height: usize) -> RenderedPatch {
    RenderedPatch::solid(width, height, [0.5; 3])
}

/// Recolors a trained pattern with the palette of new environment images.
pub fn fast_generate(artifact: &PatchArtifact, images: &[RgbImage], k: usize, seed: u64) -> Result<PatchArtifact> {
    if artifact.params.k() != k {
        return Err(Error::PaletteSize {
            expected: artifact.params.k(),
            found: k,
        });
    }
    let palette = extract_base_colors(images, k, seed, DEFAULT_MAX_ITERS)?;
    let (params, palette) = swap_base_colors(&artifact.params, &palette)?;
    let mut meta: Map<String, Value> = artifact.meta.clone();
    meta.insert("recolored_from".into(), Value::from(artifact.palette.source()));
    meta.insert("recolor_seed".into(), Value::from(seed));
    Ok(PatchArtifact { params, palette, meta })
}

/// `n` items drawn without replacement, kept in their original order.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), n.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}
