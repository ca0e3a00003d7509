//! IoU, AP50 and patch evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectorModel, DEFAULT_NMS_IOU};
use crate::eot::{apply_photometric, sample_transform, smooth, TransformRanges, TransformSample, DEFAULT_SMOOTHING_KERNEL};
use crate::patch::RenderedPatch;
use crate::scene::{apply_patch, BoundingBox, LabeledScene, DEFAULT_PATCH_RATIO};
use crate::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;
/// Detections are kept down to this score so AP integrates the whole
/// precision-recall curve.
pub const EVAL_CONF_THRESHOLD: f64 = 0.001;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    // areas from the same corner arithmetic, so identical boxes give 1 exactly
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    inter / (area_a + area_b - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap50: f64,
    /// One point per ranked detection, recall non-decreasing.
    pub curve: Vec<PrPoint>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
}

/// Area under the precision envelope of `curve`.
pub fn interpolated_area(curve: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut running: f64 = 0.0;
    for (i, p) in curve.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[i] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.iter().zip(envelope) {
        area += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    area
}

/// Single-class AP at IoU 0.5, all-points interpolation. `detections[i]`
/// and `truths[i]` belong to scene `i`.
pub fn compute_ap50(detections: &[Vec<Detection>], truths: &[Vec<BoundingBox>]) -> Result<ApSummary> {
    if detections.len() != truths.len() {
        return Err(Error::invalid(format!(
            "detections cover {} scenes but ground truth covers {}",
            detections.len(),
            truths.len()
        )));
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().map(move |d| (s, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let ground_truths: usize = truths.iter().map(Vec::len).sum();
    let mut matched: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (s, d) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truths[s].iter().enumerate() {
            if matched[s][g] {
                continue;
            }
            let v = iou(&d.bbox, gt);
            if v >= MATCH_IOU && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                matched[s][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push(PrPoint {
            recall: if ground_truths == 0 { 0.0 } else { tp as f64 / ground_truths as f64 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(ApSummary {
        ap50: interpolated_area(&curve),
        curve,
        true_positives: tp,
        false_positives: fp,
        ground_truths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ratio: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Randomized transforms at evaluation time; identity when `None`.
    pub eot: Option<EvalEot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEot {
    pub ranges: TransformRanges,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_PATCH_RATIO,
            conf_threshold: EVAL_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            eot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub curve: Vec<PrPoint>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
    /// Detections kept per scene.
    pub detections_per_scene: Vec<usize>,
    pub config: EvalConfig,
    pub patch: Option<String>,
    pub detector: String,
}

/// The scene with the patch composited under `sample`.
pub fn patched_image(scene: &LabeledScene, patch: &RenderedPatch, ratio: f64, sample: &TransformSample, smoothing: usize) -> Result<crate::image::RgbImage> {
    let mut p = if smoothing > 1 { smooth(patch, smoothing)? } else { patch.clone() };
    if !sample.is_photometric_identity() {
        p = apply_photometric(&p, sample)?;
    }
    apply_patch(scene, &p, ratio, sample)
}

pub fn detect_scenes(detector: &DetectorModel, scenes: &[LabeledScene], patch: Option<&RenderedPatch>, config: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let mut rng = config.eot.as_ref().map(|e| ChaCha8Rng::seed_from_u64(e.seed));
    scenes
        .iter()
        .map(|scene| {
            let image = match patch {
                None => scene.image.clone(),
                Some(p) => match (&config.eot, rng.as_mut()) {
                    (Some(e), Some(r)) => {
                        let sample = sample_transform(r, &e.ranges);
                        patched_image(scene, p, config.ratio, &sample, DEFAULT_SMOOTHING_KERNEL)?
                    }
                    _ => patched_image(scene, p, config.ratio, &TransformSample::identity(), 1)?,
                },
            };
            Ok(detector.predict(&image.tensor())?.decode(config.conf_threshold, config.nms_iou))
        })
        .collect()
}

/// AP50 of `detector` on `scenes` with `patch` composited on every object
/// (clean scenes when `patch` is `None`).
pub fn evaluate_patch(detector: &DetectorModel, scenes: &[LabeledScene], patch: Option<&RenderedPatch>, config: &EvalConfig) -> Result<EvalReport> {
    let dets = detect_scenes(detector, scenes, patch, config)?;
    let truths: Vec<Vec<BoundingBox>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let summary = compute_ap50(&dets, &truths)?;
    Ok(EvalReport {
        ap50: summary.ap50,
        curve: summary.curve,
        true_positives: summary.true_positives,
        false_positives: summary.false_positives,
        ground_truths: summary.ground_truths,
        detections_per_scene: dets.iter().map(Vec::len).collect(),
        config: config.clone(),
        patch: patch.map(|p| p.provenance.palette.clone()),
        detector: format!("{}@{:016x}", crate::detector::ARCH, weight_fingerprint(detector)),
    })
}

/// FNV-1a over the weight bits; identifies a detector in reports.
pub fn weight_fingerprint(detector: &DetectorModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in &detector.weights {
        for v in w.data() {
            for byte in v.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub clean_ap50: f64,
    pub rows: Vec<VariantRow>,
    /// `deltas[i][j] = rows[i].ap50 - rows[j].ap50`.
    pub deltas: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn ap50(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.ap50)
    }
}

pub fn compare_variants(detector: &DetectorModel, scenes: &[LabeledScene], variants: &[(String, RenderedPatch)], config: &EvalConfig) -> Result<Comparison> {
    if let Some((_, first)) = variants.first() {
        if let Some((name, _)) = variants.iter().find(|(_, p)| (p.width, p.height) != (first.width, first.height)) {
            return Err(Error::invalid(format!("variant {name} differs in size from {}", variants[0].0)));
        }
    }
    let clean_ap50 = evaluate_patch(detector, scenes, None, config)?.ap50;
    let rows = variants
        .iter()
        .map(|(name, p)| {
            Ok(VariantRow {
                name: name.clone(),
                ap50: evaluate_patch(detector, scenes, Some(p), config)?.ap50,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas = rows.iter().map(|a| rows.iter().map(|b| a.ap50 - b.ap50).collect()).collect();
    Ok(Comparison { clean_ap50, rows, deltas })
}

pub const SWEEP_RATIOS: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];

/// `(ratio, AP50)` for each ratio.
pub fn size_sweep(detector: &DetectorModel, scenes: &[LabeledScene], patch: &RenderedPatch, ratios: &[f64], config: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&ratio| {
            let cfg = EvalConfig { ratio, ..config.clone() };
            Ok((ratio, evaluate_patch(detector, scenes, Some(patch), &cfg)?.ap50))
        })
        .collect()
}

/// Number of increases along `values` and the largest one.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    values.windows(2).fold((0, 0.0), |(n, worst), w| {
        if w[1] > w[0] {
            (n + 1, f64::max(worst, w[1] - w[0]))
        } else {
            (n, worst)
        }
    })
}
