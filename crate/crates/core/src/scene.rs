//! Synthetic labeled scenes and patch compositing.
//!
//! Scenes are value-noise backgrounds with one to three pedestrian-like
//! figures (head ellipse over a striped torso and two legs). Patches are
//! placed on the torso of every figure, scaled so the patch covers a fixed
//! fraction of the figure's box.

use std::sync::Arc;

use autodiff::{SamplePlan, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eot::{inverse_offset, TransformSample};
use crate::eval::iou;
use crate::image::RgbImage;
use crate::palette::{BaseColorSet, Rgb};
use crate::patch::RenderedPatch;
use crate::{Error, Result};

pub const DEFAULT_SIZE: usize = 128;
pub const DEFAULT_TRAIN_SCENES: usize = 2000;
pub const DEFAULT_TEST_SCENES: usize = 300;
pub const DEFAULT_PATCH_RATIO: f64 = 0.25;
/// Vertical offset of the patch anchor from the box center, as a fraction
/// of box height (negative is up).
pub const ANCHOR_OFFSET: f64 = -0.1;

/// Axis-aligned box in normalized image coordinates (center and size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        let eps = 1e-9;
        self.w > 0.0 && self.h > 0.0 && x0 >= -eps && y0 >= -eps && x1 <= 1.0 + eps && y1 <= 1.0 + eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: RgbImage,
    pub objects: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_pairwise_iou: f64,
    /// Figure height as a fraction of image height.
    pub figure_height: (f64, f64),
    /// Figure width as a fraction of figure height.
    pub figure_aspect: (f64, f64),
    /// Background colors are drawn near these when given.
    pub tint: Option<BaseColorSet>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            min_objects: 1,
            max_objects: 3,
            max_pairwise_iou: 0.3,
            figure_height: (0.15, 0.3),
            figure_aspect: (0.35, 0.5),
            tint: None,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid(format!("scene too small: {}x{}", self.width, self.height)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid("object count range must satisfy 1 <= min <= max"));
        }
        let (lo, hi) = self.figure_height;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("figure height range must lie in (0, 1]"));
        }
        Ok(())
    }
}

pub fn synthesize_dataset(rng: &mut impl Rng, count: usize, config: &SceneConfig) -> Result<Vec<LabeledScene>> {
    if count == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    config.validate()?;
    let seeds: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    Ok(seeds.into_iter().map(|s| synthesize_scene(s, config)).collect())
}

pub fn synthesize_scene(seed: u64, config: &SceneConfig) -> LabeledScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let mut image = background(&mut rng, w, h, config.tint.as_ref());
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<BoundingBox> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let fh = (rng.gen_range(config.figure_height.0..=config.figure_height.1) * h as f64).round();
            let fw = (fh * rng.gen_range(config.figure_aspect.0..=config.figure_aspect.1)).round().max(4.0);
            if fw >= w as f64 || fh >= h as f64 {
                continue;
            }
            let x0 = rng.gen_range(0.0..=(w as f64 - fw)).floor();
            let y0 = rng.gen_range(0.0..=(h as f64 - fh)).floor();
            let candidate = BoundingBox::from_corners(x0 / w as f64, y0 / h as f64, (x0 + fw) / w as f64, (y0 + fh) / h as f64);
            if objects.iter().any(|o| iou(o, &candidate) >= config.max_pairwise_iou) {
                continue;
            }
            if let Some(tight) = draw_figure(&mut rng, &mut image, x0, y0, fw, fh) {
                objects.push(tight);
            }
            break;
        }
    }
    LabeledScene { image, objects }
}

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn near(rng: &mut impl Rng, c: Rgb, spread: f64) -> Rgb {
    c.map(|v| (v + rng.gen_range(-spread..=spread)).clamp(0.0, 1.0))
}

/// Multi-octave value noise in `[0, 1]`.
fn value_noise(rng: &mut impl Rng, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut amplitude = 1.0;
    let mut total = 0.0;
    for cells in [3usize, 6, 12, 24] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
                let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
                let bottom = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
                out[y * w + x] += amplitude * (top * (1.0 - sy) + bottom * sy);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn background(rng: &mut impl Rng, w: usize, h: usize, tint: Option<&BaseColorSet>) -> RgbImage {
    let (a, b) = match tint {
        Some(p) => {
            let i = rng.gen_range(0..p.k());
            let j = (i + rng.gen_range(1..p.k())) % p.k();
            (near(rng, p.color(i), 0.08), near(rng, p.color(j), 0.08))
        }
        None => (random_color(rng), random_color(rng)),
    };
    let n = value_noise(rng, w, h);
    let grain = value_noise(rng, w, h);
    let mut img = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let t = n[y * w + x];
            let g = 0.15 * (grain[y * w + x] - 0.5);
            let px = std::array::from_fn(|c| (a[c] * (1.0 - t) + b[c] * t + g).clamp(0.0, 1.0));
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// Paints a figure into the `fw x fh` box at `(x0, y0)` (pixels) and
/// returns its tight normalized box.
fn draw_figure(rng: &mut impl Rng, img: &mut RgbImage, x0: f64, y0: f64, fw: f64, fh: f64) -> Option<BoundingBox> {
    let skin = near(rng, [0.75, 0.55, 0.45], 0.2);
    let tone_a = random_color(rng);
    let mut tone_b = random_color(rng);
    while (0..3).map(|c| (tone_a[c] - tone_b[c]).abs()).sum::<f64>() < 0.6 {
        tone_b = random_color(rng);
    }
    let legs = near(rng, [0.2, 0.2, 0.25], 0.15);
    let period = (fh / rng.gen_range(8.0..10.0)).max(1.5);

    let cx = x0 + fw / 2.0;
    let head_ry = 0.1 * fh;
    let head_rx = (0.28 * fw).max(1.5);
    let head_cy = y0 + head_ry;
    let torso_top = y0 + 0.2 * fh;
    let legs_top = y0 + 0.6 * fh;
    let corner = 0.25 * fw;
    let gap = 0.08 * fw;

    let (w, h) = (img.width(), img.height());
    let mut extent = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in (y0 as usize)..((y0 + fh).ceil() as usize).min(h) {
        for x in (x0 as usize)..((x0 + fw).ceil() as usize).min(w) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let color = if ((px - cx) / head_rx).powi(2) + ((py - head_cy) / head_ry).powi(2) <= 1.0 {
                Some(skin)
            } else if py >= torso_top && py < legs_top && in_rounded_top(px, py, x0, torso_top, fw, corner) {
                let stripe = ((py - torso_top) / period).floor() as i64 % 2 == 0;
                Some(if stripe { tone_a } else { tone_b })
            } else if py >= legs_top && py < y0 + fh && px >= x0 + 0.1 * fw && px < x0 + 0.9 * fw && (px - cx).abs() > gap {
                Some(legs)
            } else {
                None
            };
            if let Some(c) = color {
                img.set_pixel(x, y, c);
                extent = (extent.0.min(x), extent.1.min(y), extent.2.max(x + 1), extent.3.max(y + 1));
            }
        }
    }
    if extent.0 == usize::MAX {
        return None;
    }
    Some(BoundingBox::from_corners(
        extent.0 as f64 / w as f64,
        extent.1 as f64 / h as f64,
        extent.2 as f64 / w as f64,
        extent.3 as f64 / h as f64,
    ))
}

/// Rectangle with its two top corners rounded by radius `r`.
fn in_rounded_top(px: f64, py: f64, x0: f64, y0: f64, w: f64, r: f64) -> bool {
    if px < x0 || px >= x0 + w {
        return false;
    }
    if py >= y0 + r {
        return true;
    }
    let ccx = px.clamp(x0 + r, x0 + w - r);
    (px - ccx).powi(2) + (py - (y0 + r)).powi(2) <= r * r
}

/// Where one patch instance lands in a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Anchor in scene pixels.
    pub anchor: (f64, f64),
    /// Scene pixels per patch pixel along each axis, jitter included.
    pub scale: (f64, f64),
    pub theta: f64,
}

/// Placement of a `pw x ph` patch on every object of a `w x h` scene.
pub fn placements(
    objects: &[BoundingBox],
    (w, h): (usize, usize),
    (pw, ph): (usize, usize),
    ratio: f64,
    sample: &TransformSample,
) -> Result<Vec<Placement>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("patch ratio must lie in (0, 1), got {ratio}")));
    }
    if !(sample.sx > 0.0 && sample.sy > 0.0) {
        return Err(Error::invalid("scale factors must be positive"));
    }
    objects
        .iter()
        .map(|b| {
            let box_area = b.w * w as f64 * b.h * h as f64;
            let s = (ratio * box_area / (pw * ph) as f64).sqrt();
            let scale = (s * sample.sx, s * sample.sy);
            if scale.0 * pw as f64 > w as f64 || scale.1 * ph as f64 > h as f64 {
                return Err(Error::invalid(format!(
                    "scaled patch {:.1}x{:.1} exceeds the {w}x{h} image",
                    scale.0 * pw as f64,
                    scale.1 * ph as f64
                )));
            }
            Ok(Placement {
                anchor: (b.cx * w as f64, (b.cy + ANCHOR_OFFSET * b.h) * h as f64),
                scale,
                theta: sample.theta,
            })
        })
        .collect()
}

/// Sampling plan from a `pw x ph` patch into a `w x h` scene. Later
/// placements win where instances overlap.
pub fn composite_plan(places: &[Placement], (w, h): (usize, usize), (pw, ph): (usize, usize)) -> SamplePlan {
    let (pcx, pcy) = (pw as f64 / 2.0, ph as f64 / 2.0);
    SamplePlan::new(ph, pw, h, w, |ox, oy| {
        places.iter().rev().find_map(|p| {
            let (dx, dy) = (ox as f64 + 0.5 - p.anchor.0, oy as f64 + 0.5 - p.anchor.1);
            let (ux, uy) = inverse_offset(dx, dy, p.theta, p.scale.0, p.scale.1);
            let (u, v) = (ux + pcx, uy + pcy);
            (u >= 0.0 && u < pw as f64 && v >= 0.0 && v < ph as f64).then_some((u - 0.5, v - 0.5))
        })
    })
}

/// Composites the `[3, ph, pw]` patch node onto every object of the scene.
/// Returns the `[3, H, W]` image node and the replaced-pixel mask.
pub fn composite_on_tape(
    tape: &mut Tape,
    scene: &LabeledScene,
    patch: Var,
    ratio: f64,
    sample: &TransformSample,
) -> Result<(Var, Vec<f64>)> {
    let &[3, ph, pw] = tape.shape(patch) else {
        return Err(Error::invalid(format!("patch node must be [3,H,W], got {:?}", tape.shape(patch))));
    };
    let dims = (scene.image.width(), scene.image.height());
    let places = placements(&scene.objects, dims, (pw, ph), ratio, sample)?;
    let plan = composite_plan(&places, dims, (pw, ph));
    let mask = plan.mask();
    let plane = dims.0 * dims.1;
    let mut kept = scene.image.data().to_vec();
    for (c, chunk) in kept.chunks_mut(plane).enumerate() {
        debug_assert!(c < 3);
        for (v, m) in chunk.iter_mut().zip(&mask) {
            if *m != 0.0 {
                *v = 0.0;
            }
        }
    }
    let base = tape.constant(Tensor::new(&[3, dims.1, dims.0], kept)?);
    let placed = tape.bilinear_sample(patch, Arc::new(plan))?;
    Ok((tape.add(base, placed)?, mask))
}

/// Value-level compositing of a rendered patch.
pub fn apply_patch(scene: &LabeledScene, patch: &RenderedPatch, ratio: f64, sample: &TransformSample) -> Result<RgbImage> {
    let mut tape = Tape::new();
    let p = tape.constant(patch.tensor());
    let (out, _) = composite_on_tape(&mut tape, scene, p, ratio, sample)?;
    RgbImage::new(scene.image.width(), scene.image.height(), tape.value(out).data().to_vec())
}
