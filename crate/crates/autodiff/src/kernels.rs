//! Raw numeric kernels shared by forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `a` is `m x k`, `b` is `k x n`; the `trans_*` flags read the stored
/// matrix transposed (so a stored `k x m` buffer can act as `m x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // describe row-major (or transposed row-major) layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Calls `f(row, col, input_index)` for every in-bounds tap of the
    /// column matrix; zero-padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            f(row, oy * ow + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let positions = self.positions();
        let mut cols = vec![0.0; self.patch_len() * positions];
        self.for_each_tap(|row, col, idx| cols[row * positions + col] = input[idx]);
        cols
    }

    pub(crate) fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let positions = self.positions();
        self.for_each_tap(|row, col, idx| grad_input[idx] += cols[row * positions + col]);
    }
}

/// Precomputed bilinear sampling of a `[C, Hs, Ws]` source onto a
/// `[C, Ho, Wo]` output grid.
///
/// Each output pixel either reads four weighted source pixels (shared by
/// every channel) or is masked out and reads zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<Option<([usize; 4], [f64; 4])>>,
}

impl SamplePlan {
    /// Builds a plan from `locate(ox, oy)`, which returns the source
    /// coordinate (pixel-center units, `0..=W-1`) for an output pixel or
    /// `None` when that pixel should be masked out. Coordinates slightly
    /// outside the source are clamped to its border.
    pub fn new(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        mut locate: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                taps.push(locate(ox, oy).map(|(x, y)| bilinear_taps(src_h, src_w, x, y)));
            }
        }
        Self {
            src_h,
            src_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn src_dims(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Validity mask in output row-major order: 1 where a source pixel was
    /// sampled, 0 where the output is masked.
    pub fn mask(&self) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| if t.is_some() { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn covered(&self) -> usize {
        self.taps.iter().filter(|t| t.is_some()).count()
    }

    pub(crate) fn forward(&self, channels: usize, src: &[f64]) -> Vec<f64> {
        let (sp, op) = (self.src_h * self.src_w, self.out_h * self.out_w);
        let mut out = vec![0.0; channels * op];
        for c in 0..channels {
            let s = &src[c * sp..(c + 1) * sp];
            let o = &mut out[c * op..(c + 1) * op];
            for (dst, tap) in o.iter_mut().zip(&self.taps) {
                if let Some((idx, w)) = tap {
                    *dst = w[0] * s[idx[0]] + w[1] * s[idx[1]] + w[2] * s[idx[2]] + w[3] * s[idx[3]];
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, channels: usize, grad_out: &[f64], grad_src: &mut [f64]) {
        let (sp, op) = (self.src_h * self.src_w, self.out_h * self.out_w);
        for c in 0..channels {
            let g = &grad_out[c * op..(c + 1) * op];
            let s = &mut grad_src[c * sp..(c + 1) * sp];
            for (&go, tap) in g.iter().zip(&self.taps) {
                if let Some((idx, w)) = tap {
                    for t in 0..4 {
                        s[idx[t]] += w[t] * go;
                    }
                }
            }
        }
    }
}

fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> ([usize; 4], [f64; 4]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}
