//! Color probability parameters and patch rendering.
//!
//! A patch of `width x height` pixels over a palette of `k` colors is
//! parameterized by unconstrained logits `z` (row-major `[height, width, k]`).
//! The color probabilities are `m = logistic(z)`, the mixing weights are
//! `r = softmax(log(m) / tau)` over the palette axis, and each pixel is the
//! mixture `sum_k r_k * c_k`.

use autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::palette::{BaseColorSet, Rgb};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchParams {
    width: usize,
    height: usize,
    k: usize,
    z: Vec<f64>,
    tau: f64,
}

impl PatchParams {
    pub fn new(width: usize, height: usize, k: usize, z: Vec<f64>, tau: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("patch dimensions must be positive, got {width}x{height}")));
        }
        if k < 2 {
            return Err(Error::invalid(format!("palette size must be at least 2, got {k}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        if z.len() != width * height * k {
            return Err(Error::invalid(format!(
                "expected {} logits for a {width}x{height}x{k} patch, got {}",
                width * height * k,
                z.len()
            )));
        }
        Ok(Self { width, height, k, z, tau })
    }

    /// All-zero logits: every pixel is the uniform mixture.
    pub fn zeros(width: usize, height: usize, k: usize, tau: f64) -> Result<Self> {
        Self::new(width, height, k, vec![0.0; width * height * k], tau)
    }

    /// Logits drawn i.i.d. uniform in `[-spread, spread]`.
    pub fn random(width: usize, height: usize, k: usize, tau: f64, spread: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..width * height * k)
            .map(|_| rng.gen_range(-spread..=spread))
            .collect();
        Self::new(width, height, k, z, tau)
    }

    /// The default starting point for optimization: near-uniform mixtures.
    pub fn init(width: usize, height: usize, k: usize, tau: f64, seed: u64) -> Result<Self> {
        Self::random(width, height, k, tau, 0.1, seed)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn z_mut(&mut self) -> &mut [f64] {
        &mut self.z
    }

    pub fn set_z(&mut self, z: Vec<f64>) -> Result<()> {
        if z.len() != self.z.len() {
            return Err(Error::invalid("logit count changed"));
        }
        self.z = z;
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Logits as a `[H*W, k]` tensor.
    pub fn z_tensor(&self) -> Tensor {
        Tensor::new(&[self.pixels(), self.k], self.z.clone()).expect("shape checked at construction")
    }

    fn check_palette(&self, palette: &BaseColorSet) -> Result<()> {
        if palette.k() != self.k {
            return Err(Error::PaletteSize {
                expected: self.k,
                found: palette.k(),
            });
        }
        Ok(())
    }

    /// Mixing weights `r` in `[H*W, k]` row-major order.
    pub fn mixing_weights(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(self.z_tensor());
        let r = mixing_weights_on_tape(&mut tape, z, self.tau).expect("shape checked at construction");
        tape.value(r).data().to_vec()
    }

    /// Per-pixel palette index of the largest logit (lowest index on ties).
    pub fn argmax_map(&self) -> Vec<usize> {
        self.z
            .chunks(self.k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Where a rendered patch came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub palette: String,
    pub tau: f64,
    pub quantized: bool,
}

/// Rendered RGB patch, channel-planar `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPatch {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub provenance: Provenance,
}

impl RenderedPatch {
    /// A patch of one flat color.
    pub fn solid(width: usize, height: usize, rgb: Rgb) -> Self {
        let plane = width * height;
        let mut pixels = vec![0.0; 3 * plane];
        for (c, chunk) in pixels.chunks_mut(plane).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self {
            width,
            height,
            pixels,
            provenance: Provenance {
                palette: format!("solid{rgb:?}"),
                tau: 0.0,
                quantized: true,
            },
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.pixels[i], self.pixels[plane + i], self.pixels[2 * plane + i]]
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.pixels.clone()).expect("consistent dims")
    }
}

/// `softmax(log(logistic(z)) / tau)` over the last axis of `z`.
pub fn mixing_weights_on_tape(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let m = tape.logistic(z);
    probabilities_to_weights(tape, m, tau)
}

/// `softmax(log(m) / tau)` for probabilities `m` already on the tape.
pub fn probabilities_to_weights(tape: &mut Tape, m: Var, tau: f64) -> Result<Var> {
    let log_m = tape.log(m);
    let scaled = tape.affine(log_m, 1.0 / tau, 0.0);
    Ok(tape.softmax(scaled)?)
}

/// Mixes `[H*W, k]` weights with the palette into a `[3, H, W]` image.
pub fn weights_to_image(tape: &mut Tape, r: Var, palette: &BaseColorSet, width: usize, height: usize) -> Result<Var> {
    let colors = tape.constant(Tensor::new(&[palette.k(), 3], palette.matrix())?);
    let mixed = tape.matmul(r, colors)?;
    let planar = tape.transpose2d(mixed)?;
    Ok(tape.reshape(planar, &[3, height, width])?)
}

/// Differentiable render of logits `z` (a `[H*W, k]` node) to `[3, H, W]`.
pub fn render_on_tape(tape: &mut Tape, z: Var, params: &PatchParams, palette: &BaseColorSet) -> Result<Var> {
    params.check_palette(palette)?;
    let r = mixing_weights_on_tape(tape, z, params.tau)?;
    weights_to_image(tape, r, palette, params.width, params.height)
}

pub fn render_patch(params: &PatchParams, palette: &BaseColorSet) -> Result<RenderedPatch> {
    let mut tape = Tape::new();
    let z = tape.constant(params.z_tensor());
    let img = render_on_tape(&mut tape, z, params, palette)?;
    Ok(RenderedPatch {
        width: params.width,
        height: params.height,
        pixels: tape.value(img).data().to_vec(),
        provenance: Provenance {
            palette: palette.source().to_string(),
            tau: params.tau,
            quantized: false,
        },
    })
}

/// Hard render: each pixel takes the palette color of its largest logit.
pub fn quantize_patch(params: &PatchParams, palette: &BaseColorSet) -> Result<RenderedPatch> {
    params.check_palette(palette)?;
    let plane = params.pixels();
    let mut pixels = vec![0.0; 3 * plane];
    for (i, idx) in params.argmax_map().into_iter().enumerate() {
        let c = palette.color(idx);
        for ch in 0..3 {
            pixels[ch * plane + i] = c[ch];
        }
    }
    Ok(RenderedPatch {
        width: params.width,
        height: params.height,
        pixels,
        provenance: Provenance {
            palette: palette.source().to_string(),
            tau: params.tau,
            quantized: true,
        },
    })
}

/// Mean per-pixel Shannon entropy (nats) of the mixing weights; zero for
/// one-hot weights.
pub fn onehot_regularizer_on_tape(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let r = mixing_weights_on_tape(tape, z, tau)?;
    let pixels = tape.shape(r)[0] as f64;
    // r·log(r) with r clamped away from 0; the clamp only bites where the
    // term is already ~0.
    let safe = tape.clamp(r, 1e-300, 2.0);
    let log_r = tape.log(safe);
    let plogp = tape.mul(r, log_r)?;
    let total = tape.sum(plogp);
    Ok(tape.affine(total, -1.0 / pixels, 0.0))
}

pub fn onehot_regularizer(params: &PatchParams) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(params.z_tensor());
    let e = onehot_regularizer_on_tape(&mut tape, z, params.tau).expect("shape checked");
    tape.value(e).item()
}
