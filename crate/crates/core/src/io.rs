//! Artifact files, PNG codecs and dataset directories.
//!
//! Every artifact is a single JSON document tagged with
//! [`FORMAT_VERSION`]. Real-valued arrays are embedded as base64 of
//! little-endian `f64`, so saving and loading is lossless.

use std::fs;
use std::path::Path;

use autodiff::Tensor;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::{DetectorModel, ARCH, TENSOR_NAMES};
use crate::eval::EvalReport;
use crate::image::RgbImage;
use crate::palette::BaseColorSet;
use crate::patch::PatchParams;
use crate::scene::{BoundingBox, LabeledScene};
use crate::{Error, Result, FORMAT_VERSION};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_version(found: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    Ok(())
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {} values ({} bytes)",
            bytes.len(),
            expected_len,
            expected_len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

// ---- palette ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PaletteDoc {
    version: String,
    k: usize,
    colors: Vec<[u8; 3]>,
    source: String,
}

impl PaletteDoc {
    fn from_palette(p: &BaseColorSet) -> Self {
        Self {
            version: FORMAT_VERSION.to_string(),
            k: p.k(),
            colors: p.to_rgb8(),
            source: p.source().to_string(),
        }
    }

    fn into_palette(self) -> Result<BaseColorSet> {
        check_version(&self.version)?;
        if self.colors.len() != self.k {
            return Err(Error::Format(format!("palette declares k = {} but lists {} colors", self.k, self.colors.len())));
        }
        BaseColorSet::from_rgb8(&self.colors, self.source)
    }
}

/// Palette as JSON; channels are written as 8-bit integers.
pub fn palette_to_json(p: &BaseColorSet) -> String {
    serde_json::to_string_pretty(&PaletteDoc::from_palette(p)).expect("palette serializes")
}

pub fn palette_from_json(text: &str) -> Result<BaseColorSet> {
    serde_json::from_str::<PaletteDoc>(text)?.into_palette()
}

pub fn save_palette(path: &Path, p: &BaseColorSet) -> Result<()> {
    write_bytes(path, palette_to_json(p).as_bytes())
}

pub fn load_palette(path: &Path) -> Result<BaseColorSet> {
    palette_from_json(&read_text(path)?)
}

// ---- patch artifact ---------------------------------------------------

/// Patch parameters together with the palette they render against.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchArtifact {
    pub params: PatchParams,
    pub palette: BaseColorSet,
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatchDoc {
    version: String,
    width: usize,
    height: usize,
    k: usize,
    tau: f64,
    palette: PaletteDoc,
    z: String,
    #[serde(default)]
    meta: Map<String, Value>,
}

pub fn patch_to_json(a: &PatchArtifact) -> String {
    let doc = PatchDoc {
        version: FORMAT_VERSION.to_string(),
        width: a.params.width(),
        height: a.params.height(),
        k: a.params.k(),
        tau: a.params.tau(),
        palette: PaletteDoc::from_palette(&a.palette),
        z: encode_f64s(a.params.z()),
        meta: a.meta.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("patch serializes")
}

pub fn patch_from_json(text: &str) -> Result<PatchArtifact> {
    let doc: PatchDoc = serde_json::from_str(text)?;
    check_version(&doc.version)?;
    let palette = doc.palette.into_palette()?;
    if palette.k() != doc.k {
        return Err(Error::PaletteSize {
            expected: doc.k,
            found: palette.k(),
        });
    }
    let z = decode_f64s(&doc.z, doc.width * doc.height * doc.k)?;
    Ok(PatchArtifact {
        params: PatchParams::new(doc.width, doc.height, doc.k, z, doc.tau)?,
        palette,
        meta: doc.meta,
    })
}

pub fn save_patch(path: &Path, a: &PatchArtifact) -> Result<()> {
    write_bytes(path, patch_to_json(a).as_bytes())
}

pub fn load_patch(path: &Path) -> Result<PatchArtifact> {
    patch_from_json(&read_text(path)?)
}

// ---- detector weights -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorDoc {
    version: String,
    arch: String,
    anchor: [f64; 2],
    input_size: usize,
    tensors: Vec<TensorDoc>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    meta: Map<String, Value>,
}

pub fn detector_to_json(m: &DetectorModel) -> String {
    detector_to_json_with_meta(m, &Map::new())
}

/// Like [`detector_to_json`] with a free-form `meta` object attached.
pub fn detector_to_json_with_meta(m: &DetectorModel, meta: &Map<String, Value>) -> String {
    let doc = DetectorDoc {
        version: FORMAT_VERSION.to_string(),
        arch: ARCH.to_string(),
        anchor: [m.anchor.0, m.anchor.1],
        input_size: m.input_size,
        tensors: m
            .weights
            .iter()
            .zip(TENSOR_NAMES)
            .map(|(t, name)| TensorDoc {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: encode_f64s(t.data()),
            })
            .collect(),
        meta: meta.clone(),
    };
    serde_json::to_string(&doc).expect("detector serializes")
}

pub fn detector_from_json(text: &str) -> Result<DetectorModel> {
    let doc: DetectorDoc = serde_json::from_str(text)?;
    check_version(&doc.version)?;
    if doc.arch != ARCH {
        return Err(Error::Format(format!("unknown detector architecture {:?}", doc.arch)));
    }
    let mut weights = Vec::with_capacity(doc.tensors.len());
    for (t, name) in doc.tensors.iter().zip(TENSOR_NAMES) {
        if t.name != name {
            return Err(Error::Format(format!("expected tensor {name}, found {}", t.name)));
        }
        let n = t.shape.iter().product();
        weights.push(Tensor::new(&t.shape, decode_f64s(&t.data, n)?)?);
    }
    DetectorModel::new(weights, (doc.anchor[0], doc.anchor[1]), doc.input_size)
}

pub fn save_detector(path: &Path, m: &DetectorModel) -> Result<()> {
    write_bytes(path, detector_to_json(m).as_bytes())
}

pub fn save_detector_with_meta(path: &Path, m: &DetectorModel, meta: &Map<String, Value>) -> Result<()> {
    write_bytes(path, detector_to_json_with_meta(m, meta).as_bytes())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    detector_from_json(&read_text(path)?)
}

// ---- eval report ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReportDoc {
    version: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn report_to_json(r: &EvalReport) -> String {
    let doc = ReportDoc {
        version: FORMAT_VERSION.to_string(),
        report: r.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    let doc: ReportDoc = serde_json::from_str(text)?;
    check_version(&doc.version)?;
    Ok(doc.report)
}

pub fn save_report(path: &Path, r: &EvalReport) -> Result<()> {
    write_bytes(path, report_to_json(r).as_bytes())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    report_from_json(&read_text(path)?)
}

// ---- loss history -----------------------------------------------------

/// `step,loss,regularizer` rows.
pub fn loss_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("step,loss,regularizer\n");
    for (step, loss, reg) in rows {
        out.push_str(&format!("{step},{loss:e},{reg:e}\n"));
    }
    out
}

// ---- images -----------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG encoding of a planar image.
pub fn encode_png(width: usize, height: usize, planar: &[f64]) -> Result<Vec<u8>> {
    let plane = width * height;
    if planar.len() != 3 * plane {
        return Err(Error::invalid("pixel buffer does not match dimensions"));
    }
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        rgb.extend([to_u8(planar[i]), to_u8(planar[plane + i]), to_u8(planar[2 * plane + i])]);
    }
    let buf = ::image::RgbImage::from_raw(width as u32, height as u32, rgb).expect("sized buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ::image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    RgbImage::new(w, h, data)
}

pub fn save_png(path: &Path, width: usize, height: usize, planar: &[f64]) -> Result<()> {
    write_bytes(path, &encode_png(width, height, planar)?)
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

/// Every `.png` in `dir`, in file-name order.
pub fn load_png_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_png(p)).collect()
}

// ---- datasets ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneEntry {
    file: String,
    objects: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationDoc {
    scenes: Vec<SceneEntry>,
}

/// Writes one PNG per scene plus the annotation file into `dir`.
pub fn save_dataset(dir: &Path, scenes: &[LabeledScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:05}.png");
        save_png(&dir.join(&file), s.image.width(), s.image.height(), s.image.data())?;
        entries.push(SceneEntry {
            file,
            objects: s.objects.clone(),
        });
    }
    let doc = serde_json::to_string_pretty(&AnnotationDoc { scenes: entries })?;
    write_bytes(&dir.join(ANNOTATIONS_FILE), doc.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledScene>> {
    let doc: AnnotationDoc = serde_json::from_str(&read_text(&dir.join(ANNOTATIONS_FILE))?)?;
    doc.scenes
        .into_iter()
        .map(|e| {
            if let Some(b) = e.objects.iter().find(|b| !b.is_valid()) {
                return Err(Error::Format(format!("{}: invalid box {b:?}", e.file)));
            }
            Ok(LabeledScene {
                image: load_png(&dir.join(&e.file))?,
                objects: e.objects,
            })
        })
        .collect()
}
