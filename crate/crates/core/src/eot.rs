//! Expectation-over-transformation: random photometric and geometric
//! perturbations applied to the patch during optimization.
//!
//! The composition order is fixed: uniform smoothing, then contrast /
//! brightness / noise, then rotation and scaling about the patch center.

use std::sync::Arc;

use autodiff::{SamplePlan, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::patch::RenderedPatch;
use crate::{Error, Result};

pub const DEFAULT_SMOOTHING_KERNEL: usize = 3;
/// Clamp applied to probabilities after photometric perturbation in
/// matrix mode, keeping `log m` finite.
pub const MATRIX_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Sampling ranges for each transformation component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformRanges {
    pub contrast: Interval,
    pub brightness: Interval,
    pub noise: Interval,
    pub rotation_deg: Interval,
    /// Multiplicative jitter on top of the area-derived placement scale.
    pub scale: Interval,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            contrast: Interval::new(0.8, 1.2),
            brightness: Interval::new(0.9, 1.1),
            noise: Interval::new(0.0, 0.1),
            rotation_deg: Interval::new(-20.0, 20.0),
            scale: Interval::point(1.0),
        }
    }
}

impl TransformRanges {
    /// Ranges that always produce the identity transform.
    pub fn identity() -> Self {
        Self {
            contrast: Interval::point(1.0),
            brightness: Interval::point(1.0),
            noise: Interval::point(0.0),
            rotation_deg: Interval::point(0.0),
            scale: Interval::point(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("noise", self.noise),
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
        ];
        for (name, iv) in named {
            if !(iv.lo <= iv.hi) {
                return Err(Error::invalid(format!("{name} range is empty: [{}, {}]", iv.lo, iv.hi)));
            }
        }
        if self.noise.lo < 0.0 {
            return Err(Error::invalid("noise amplitude range must be non-negative"));
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::invalid("scale range must be positive"));
        }
        Ok(())
    }
}

/// One draw from the transformation distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub contrast: f64,
    pub brightness: f64,
    pub noise_seed: u64,
    pub noise_amplitude: f64,
    /// Rotation in radians.
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
}

impl TransformSample {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            brightness: 1.0,
            noise_seed: 0,
            noise_amplitude: 0.0,
            theta: 0.0,
            sx: 1.0,
            sy: 1.0,
        }
    }

    pub fn is_photometric_identity(&self) -> bool {
        self.contrast == 1.0 && self.brightness == 1.0 && self.noise_amplitude == 0.0
    }
}

pub fn sample_transform(rng: &mut impl Rng, ranges: &TransformRanges) -> TransformSample {
    let contrast = ranges.contrast.sample(rng);
    let brightness = ranges.brightness.sample(rng);
    let noise_amplitude = ranges.noise.sample(rng);
    let noise_seed = rng.gen();
    let theta = ranges.rotation_deg.sample(rng).to_radians();
    let s = ranges.scale.sample(rng);
    TransformSample {
        contrast,
        brightness,
        noise_seed,
        noise_amplitude,
        theta,
        sx: s,
        sy: s,
    }
}

/// Which representation the photometric and smoothing steps act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EotDomain {
    /// Rendered RGB pixels.
    #[default]
    Pixel,
    /// The color probability matrix, before rendering.
    Matrix,
}

/// Uniform `kernel x kernel` smoothing of a `[C, H, W]` node, replicate
/// padding, channels independent.
pub fn smooth_on_tape(tape: &mut Tape, x: Var, kernel: usize) -> Result<Var> {
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("smoothing kernel must be odd, got {kernel}")));
    }
    if kernel == 1 {
        return Ok(x);
    }
    let &[c, h, w] = tape.shape(x) else {
        return Err(Error::invalid(format!("smooth expects [C,H,W], got {:?}", tape.shape(x))));
    };
    let r = kernel / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = (y as isize - r as isize).clamp(0, h as isize - 1) as usize;
            for xx in 0..pw {
                let sx = (xx as isize - r as isize).clamp(0, w as isize - 1) as usize;
                index.push((ch * h + sy) * w + sx);
            }
        }
    }
    let padded = tape.gather(x, Arc::new(index), &[c, ph, pw])?;
    let weight = 1.0 / (kernel * kernel) as f64;
    let mut k = vec![0.0; c * c * kernel * kernel];
    for ch in 0..c {
        let base = (ch * c + ch) * kernel * kernel;
        k[base..base + kernel * kernel].fill(weight);
    }
    let kvar = tape.constant(Tensor::new(&[c, c, kernel, kernel], k)?);
    Ok(tape.conv2d(padded, kvar, None, 1, 0)?)
}

/// Per-element noise field, uniform in `[0, amplitude]`.
pub fn noise_field(seed: u64, amplitude: f64, len: usize) -> Vec<f64> {
    if amplitude == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen::<f64>() * amplitude).collect()
}

/// `clamp(D * x + (B - 1) + N, lo, hi)`.
pub fn photometric_on_tape(tape: &mut Tape, x: Var, sample: &TransformSample, bounds: (f64, f64)) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let mut y = tape.affine(x, sample.contrast, sample.brightness - 1.0);
    if sample.noise_amplitude > 0.0 {
        let n = noise_field(sample.noise_seed, sample.noise_amplitude, numel);
        let nv = tape.constant(Tensor::new(&shape, n)?);
        y = tape.add(y, nv)?;
    }
    Ok(tape.clamp(y, bounds.0, bounds.1))
}

/// Inverse map of the rotation-then-scale transform about a center:
/// returns the source offset for an output offset `(dx, dy)`.
///
/// The forward transform is `S * R(theta)` with
/// `R = [[cos, sin], [-sin, cos]]` and `S = diag(sx, sy)`.
pub fn inverse_offset(dx: f64, dy: f64, theta: f64, sx: f64, sy: f64) -> (f64, f64) {
    let (ux, uy) = (dx / sx, dy / sy);
    let (s, c) = theta.sin_cos();
    // R(theta)^-1 = R(theta)^T
    (c * ux - s * uy, s * ux + c * uy)
}

/// Sampling plan that rotates and scales a `h x w` patch about its center
/// onto an output grid of the same size.
pub fn geometric_plan(h: usize, w: usize, theta: f64, sx: f64, sy: f64) -> Result<SamplePlan> {
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::invalid(format!("scale factors must be positive, got ({sx}, {sy})")));
    }
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Ok(SamplePlan::new(h, w, h, w, |ox, oy| {
        let (ux, uy) = inverse_offset(ox as f64 + 0.5 - cx, oy as f64 + 0.5 - cy, theta, sx, sy);
        let (u, v) = (ux + cx, uy + cy);
        (u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64).then_some((u - 0.5, v - 0.5))
    }))
}

pub fn geometric_on_tape(tape: &mut Tape, x: Var, theta: f64, sx: f64, sy: f64) -> Result<(Var, Vec<f64>)> {
    let &[_, h, w] = tape.shape(x) else {
        return Err(Error::invalid(format!("geometric transform expects [C,H,W], got {:?}", tape.shape(x))));
    };
    let plan = geometric_plan(h, w, theta, sx, sy)?;
    let mask = plan.mask();
    Ok((tape.bilinear_sample(x, Arc::new(plan))?, mask))
}

fn run_on_patch(patch: &RenderedPatch, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<RenderedPatch> {
    let mut tape = Tape::new();
    let x = tape.constant(patch.tensor());
    let y = f(&mut tape, x)?;
    Ok(RenderedPatch {
        pixels: tape.value(y).data().to_vec(),
        ..patch.clone()
    })
}

pub fn smooth(patch: &RenderedPatch, kernel: usize) -> Result<RenderedPatch> {
    run_on_patch(patch, |t, x| smooth_on_tape(t, x, kernel))
}

pub fn apply_photometric(patch: &RenderedPatch, sample: &TransformSample) -> Result<RenderedPatch> {
    run_on_patch(patch, |t, x| photometric_on_tape(t, x, sample, (0.0, 1.0)))
}

/// Rotated and scaled patch plus its validity mask (`[H*W]`, 1 = sampled).
/// Masked pixels hold zero.
pub fn apply_geometric(patch: &RenderedPatch, theta: f64, sx: f64, sy: f64) -> Result<(RenderedPatch, Vec<f64>)> {
    let mut mask = Vec::new();
    let out = run_on_patch(patch, |t, x| {
        let (y, m) = geometric_on_tape(t, x, theta, sx, sy)?;
        mask = m;
        Ok(y)
    })?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_from(width: usize, height: usize, pixels: Vec<f64>) -> RenderedPatch {
        RenderedPatch {
            pixels,
            ..RenderedPatch::solid(width, height, [0.0; 3])
        }
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_transform(&mut rng, &TransformRanges::identity());
        assert!(s.is_photometric_identity());
        assert_eq!((s.theta, s.sx, s.sy), (0.0, 1.0, 1.0));
    }

    #[test]
    fn default_ranges() {
        let r = TransformRanges::default();
        assert_eq!(r.contrast, Interval::new(0.8, 1.2));
        assert_eq!(r.brightness, Interval::new(0.9, 1.1));
        assert_eq!(r.noise, Interval::new(0.0, 0.1));
        assert_eq!(r.rotation_deg, Interval::new(-20.0, 20.0));
    }

    #[test]
    fn contrast_mean_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = TransformRanges::default();
        let mean = (0..10_000).map(|_| sample_transform(&mut rng, &r).contrast).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = TransformRanges::default();
        for _ in 0..1000 {
            let s = sample_transform(&mut rng, &r);
            assert!(r.contrast.contains(s.contrast) && r.brightness.contains(s.brightness));
            assert!(r.noise.contains(s.noise_amplitude));
            assert!(r.rotation_deg.contains(s.theta.to_degrees()));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = TransformRanges::default();
        r.noise = Interval::new(-0.1, 0.1);
        assert!(r.validate().is_err());
        r = TransformRanges::default();
        r.contrast = Interval::new(1.2, 0.8);
        assert!(r.validate().is_err());
        assert!(TransformRanges::default().validate().is_ok());
    }

    #[test]
    fn smoothing_identity_constant_and_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = patch_from(5, 4, (0..60).map(|_| rng.gen()).collect());
        assert_eq!(smooth(&p, 1).unwrap(), p);

        let flat = RenderedPatch::solid(6, 6, [0.25, 0.5, 0.75]);
        let s = smooth(&flat, 3).unwrap();
        for (a, b) in s.pixels.iter().zip(&flat.pixels) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut impulse = RenderedPatch::solid(5, 5, [0.0; 3]);
        for ch in 0..3 {
            impulse.pixels[ch * 25 + 12] = 1.0;
        }
        let s = smooth(&impulse, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expected = if (1..=3).contains(&x) && (1..=3).contains(&y) { 1.0 / 9.0 } else { 0.0 };
                assert!((s.pixel(x, y)[0] - expected).abs() < 1e-15, "({x},{y})");
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(smooth(&RenderedPatch::solid(4, 4, [0.0; 3]), 2).is_err());
    }

    #[test]
    fn photometric_arithmetic_and_clamp() {
        let gray = RenderedPatch::solid(3, 3, [0.5; 3]);
        assert_eq!(apply_photometric(&gray, &TransformSample::identity()).unwrap(), gray);
        let s = TransformSample {
            contrast: 1.2,
            brightness: 1.1,
            ..TransformSample::identity()
        };
        let out = apply_photometric(&gray, &s).unwrap();
        assert!(out.pixels.iter().all(|v| (v - 0.70).abs() < 1e-12));
        let white = RenderedPatch::solid(2, 2, [1.0; 3]);
        let out = apply_photometric(&white, &TransformSample { contrast: 1.2, ..TransformSample::identity() }).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let a = noise_field(9, 0.1, 100);
        assert_eq!(a, noise_field(9, 0.1, 100));
        assert!(a.iter().all(|v| (0.0..=0.1).contains(v)));
    }

    #[test]
    fn geometric_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = patch_from(6, 5, (0..90).map(|_| rng.gen()).collect());
        let (out, mask) = apply_geometric(&p, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(out.pixels, p.pixels);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn quarter_turn_permutes_corners_counterclockwise() {
        // corners: TL=0.1, TR=0.2, BL=0.3, BR=0.4 (all channels)
        let vals = [0.1, 0.2, 0.3, 0.4];
        let p = patch_from(2, 2, vals.repeat(3));
        let (out, mask) = apply_geometric(&p, std::f64::consts::FRAC_PI_2, 1.0, 1.0).unwrap();
        assert!(mask.iter().all(|&m| m == 1.0));
        // counterclockwise on screen: TL -> BL, BL -> BR, BR -> TR, TR -> TL
        let expected = [0.2, 0.4, 0.1, 0.3];
        for (a, b) in out.pixels[..4].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", &out.pixels[..4]);
        }
    }

    #[test]
    fn rotation_round_trip_preserves_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // a smooth random field: bilinear round trips are only close for
        // band-limited content, so blur white noise first
        let raw = patch_from(24, 24, (0..24 * 24 * 3).map(|_| rng.gen()).collect());
        let p = smooth(&smooth(&raw, 5).unwrap(), 5).unwrap();
        let theta = 17f64.to_radians();
        let (fwd, _) = apply_geometric(&p, theta, 1.0, 1.0).unwrap();
        let (back, _) = apply_geometric(&fwd, -theta, 1.0, 1.0).unwrap();
        let c = 12.0;
        let mut worst: f64 = 0.0;
        for y in 0..24 {
            for x in 0..24 {
                // interior of the disc that survives both rotations
                let r = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
                if r <= c - 2.0 {
                    for ch in 0..3 {
                        let i = ch * 576 + y * 24 + x;
                        worst = worst.max((back.pixels[i] - p.pixels[i]).abs());
                    }
                }
            }
        }
        assert!(worst < 0.05, "L-inf {worst}");
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let p = RenderedPatch::solid(4, 4, [0.0; 3]);
        assert!(apply_geometric(&p, 0.0, 0.0, 1.0).is_err());
        assert!(apply_geometric(&p, 0.0, 1.0, -2.0).is_err());
    }
}
