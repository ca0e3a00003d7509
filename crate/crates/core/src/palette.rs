//! Base color extraction by k-means clustering.
//!
//! Pixels from every environment image are pooled, sorted (so the result
//! does not depend on image order), subsampled, and clustered with Lloyd's
//! algorithm from a k-means++ start. Centers are snapped to the 8-bit grid
//! used by palette files and sorted by luminance so that color indices are
//! reproducible.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::RgbImage;
use crate::{Error, Result};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_MAX_ITERS: usize = 100;
/// Upper bound on the number of pooled pixels that are clustered.
pub const MAX_SAMPLES: usize = 100_000;

pub type Rgb = [f64; 3];

/// The k base colors a camouflaged patch may display.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseColorSet {
    colors: Vec<Rgb>,
    source: String,
}

impl BaseColorSet {
    /// Validates and wraps `colors`: at least two, channels in `[0, 1]`,
    /// pairwise distinct.
    pub fn new(colors: Vec<Rgb>, source: impl Into<String>) -> Result<Self> {
        if colors.len() < 2 {
            return Err(Error::invalid(format!(
                "a palette needs at least 2 colors, got {}",
                colors.len()
            )));
        }
        for c in &colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("palette channel out of [0,1]: {c:?}")));
            }
        }
        for (i, a) in colors.iter().enumerate() {
            if colors[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate palette color {a:?}")));
            }
        }
        Ok(Self {
            colors,
            source: source.into(),
        })
    }

    pub fn from_rgb8(colors: &[[u8; 3]], source: impl Into<String>) -> Result<Self> {
        Self::new(
            colors.iter().map(|c| c.map(|v| f64::from(v) / 255.0)).collect(),
            source,
        )
    }

    /// `k` random 8-bit colors, pairwise distinct.
    pub fn random(k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut colors: Vec<[u8; 3]> = Vec::with_capacity(k);
        while colors.len() < k {
            let c = [rng.gen(), rng.gen(), rng.gen()];
            if !colors.contains(&c) {
                colors.push(c);
            }
        }
        Self::from_rgb8(&colors, format!("random(seed={seed})"))
    }

    /// The eight corners of the RGB cube; mixtures over them reach every
    /// color, so a patch over this palette is color-unrestricted.
    pub fn rgb_cube() -> Self {
        let colors = (0..8u8)
            .map(|i| [(i >> 2) & 1, (i >> 1) & 1, i & 1].map(f64::from))
            .collect();
        Self::new(colors, "rgb-cube").expect("cube corners are distinct")
    }

    /// This palette followed by `extra` random colors not already present.
    pub fn extended(&self, extra: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut colors = self.colors.clone();
        while colors.len() < self.k() + extra {
            let c: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let c = c.map(|v| f64::from(v) / 255.0);
            if !colors.contains(&c) {
                colors.push(c);
            }
        }
        Self::new(colors, format!("{}+{extra}(seed={seed})", self.source))
    }

    pub fn k(&self) -> usize {
        self.colors.len()
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn color(&self, i: usize) -> Rgb {
        self.colors[i]
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Channels rounded to 8 bits.
    pub fn to_rgb8(&self) -> Vec<[u8; 3]> {
        self.colors
            .iter()
            .map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect()
    }

    /// Palette as a `[k, 3]` row-major matrix.
    pub fn matrix(&self) -> Vec<f64> {
        self.colors.iter().flatten().copied().collect()
    }
}

pub fn luminance(c: &Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn dist2(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Mutable state of a Lloyd iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydState {
    pub centers: Vec<Rgb>,
    pub assignments: Vec<usize>,
}

impl LloydState {
    /// Assigns every point to its nearest center (lowest index on ties).
    /// Returns whether any assignment changed.
    pub fn assign(&mut self, points: &[Rgb]) -> bool {
        let mut changed = false;
        for (p, a) in points.iter().zip(self.assignments.iter_mut()) {
            let mut best = (0, f64::INFINITY);
            for (j, c) in self.centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            if *a != best.0 {
                *a = best.0;
                changed = true;
            }
        }
        changed
    }

    /// Moves centers to their cluster means; empty clusters keep their
    /// previous center. Returns the indices of empty clusters.
    pub fn update(&mut self, points: &[Rgb]) -> Vec<usize> {
        let k = self.centers.len();
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&self.assignments) {
            for c in 0..3 {
                sums[a][c] += p[c];
            }
            counts[a] += 1;
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                empty.push(j);
            } else {
                self.centers[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        empty
    }

    /// Within-cluster sum of squares for the current assignment.
    pub fn wcss(&self, points: &[Rgb]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| dist2(p, &self.centers[a]))
            .sum()
    }

    /// Reseeds every empty cluster to the point farthest from its assigned
    /// center, and reassigns that point. A no-op when no cluster is empty.
    pub fn repair_empty_clusters(&mut self, points: &[Rgb]) -> usize {
        let k = self.centers.len();
        let mut counts = vec![0usize; k];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        let mut repaired = 0;
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = points
                .iter()
                .zip(&self.assignments)
                .enumerate()
                .filter(|(_, (_, &a))| counts[a] > 1)
                .map(|(i, (p, &a))| (i, dist2(p, &self.centers[a])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((i, _)) = far else { break };
            counts[self.assignments[i]] -= 1;
            counts[j] = 1;
            self.assignments[i] = j;
            self.centers[j] = points[i];
            repaired += 1;
        }
        repaired
    }
}

/// Outcome of a k-means run.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub state: LloydState,
    /// WCSS after each assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn distinct_count(sorted: &[Rgb]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

fn kmeans_pp(points: &[Rgb], k: usize, rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments no
/// longer change or after `max_iters` assignment steps.
pub fn kmeans(points: &[Rgb], k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if points.len() < k {
        return Err(Error::TooFewColors {
            needed: k,
            found: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LloydState {
        centers: kmeans_pp(points, k, &mut rng),
        assignments: vec![usize::MAX; points.len()],
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        let changed = state.assign(points);
        iterations += 1;
        state.repair_empty_clusters(points);
        history.push(state.wcss(points));
        if !changed {
            converged = true;
            break;
        }
        let empty = state.update(points);
        if !empty.is_empty() {
            state.repair_empty_clusters(points);
        }
    }
    Ok(Clustering {
        state,
        wcss_history: history,
        iterations,
        converged,
    })
}

/// Pools, sorts and subsamples the pixels of `images`.
pub fn pooled_pixels(images: &[RgbImage], seed: u64) -> Vec<Rgb> {
    let mut pool: Vec<Rgb> = images.iter().flat_map(|im| im.pixels()).collect();
    pool.sort_unstable_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if pool.len() <= MAX_SAMPLES {
        return pool;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3b_1e00_0000);
    let mut picked = index::sample(&mut rng, pool.len(), MAX_SAMPLES).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// Extracts `k` base colors from a pool of environment images.
pub fn extract_base_colors(
    images: &[RgbImage],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<BaseColorSet> {
    if images.is_empty() {
        return Err(Error::invalid("no environment images supplied"));
    }
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let points = pooled_pixels(images, seed);
    let distinct = distinct_count(&points);
    if distinct < k {
        return Err(Error::TooFewColors {
            needed: k,
            found: distinct,
        });
    }
    let clustering = kmeans(&points, k, seed, max_iters)?;
    let mut centers: Vec<Rgb> = clustering
        .state
        .centers
        .iter()
        .map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect();
    centers.sort_by(|a, b| luminance(a).total_cmp(&luminance(b)));
    BaseColorSet::new(centers, format!("kmeans(k={k},seed={seed})"))
}
