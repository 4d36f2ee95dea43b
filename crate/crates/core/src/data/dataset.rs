use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BBox, DetectedInstance, HoiTriplet, Verb, VerbTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// 8-bit RGB, row-major, `width * height * 3` bytes.
    pub pixels: Vec<u8>,
    pub detections: Vec<DetectedInstance>,
    pub ground_truth: Vec<HoiTriplet>,
}

impl ImageRecord {
    /// Channel-major `[3, height, width]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], data).expect("pixel buffer matches dims")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub verbs: VerbTable,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    verbs: Vec<Verb>,
    images: Vec<RawImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels_base64: Option<String>,
    #[serde(default)]
    detections: Vec<RawDetection>,
    #[serde(default)]
    ground_truth: Vec<RawTriplet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    category: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriplet {
    human_box: [f64; 4],
    object_box: Option<[f64; 4]>,
    verb: String,
}

struct Ctx<'a> {
    path: &'a Path,
}

impl Ctx<'_> {
    fn err(&self, field: impl Into<String>, detail: impl Into<String>) -> Error {
        Error::Load {
            path: self.path.to_path_buf(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    fn bbox(&self, field: &str, raw: [f64; 4], width: usize, height: usize) -> Result<BBox> {
        let b = BBox::try_from(raw).map_err(|e| self.err(field, strip_input(e)))?;
        b.clip(width, height)
            .map_err(|_| self.err(field, format!("box {raw:?} lies outside the {width}x{height} image")))
    }
}

fn strip_input(e: Error) -> String {
    match e {
        Error::Input(msg) => msg,
        other => other.to_string(),
    }
}

/// Read and fully validate a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = Ctx { path };
    let raw: RawDataset = serde_json::from_str(&text).map_err(|e| ctx.err("<root>", e.to_string()))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_raw(raw, &ctx, &base_dir)
}

fn from_raw(raw: RawDataset, ctx: &Ctx, base_dir: &Path) -> Result<Dataset> {
    let verbs = VerbTable::new(raw.verbs).map_err(|e| ctx.err("verbs", strip_input(e)))?;
    let mut images = Vec::with_capacity(raw.images.len());
    for (i, im) in raw.images.into_iter().enumerate() {
        let at = |f: &str| format!("images[{i}].{f}");
        if images.iter().any(|x: &ImageRecord| x.id == im.id) {
            return Err(ctx.err(at("id"), format!("duplicate image id `{}`", im.id)));
        }
        if im.width == 0 || im.height == 0 {
            return Err(ctx.err(at("width"), "image dimensions must be positive"));
        }
        let pixels = match (&im.pixels_file, &im.pixels_base64) {
            (Some(f), None) => {
                let p: PathBuf = base_dir.join(f);
                fs::read(&p).map_err(|e| ctx.err(at("pixels_file"), format!("{}: {e}", p.display())))?
            }
            (None, Some(b64)) => BASE64
                .decode(b64)
                .map_err(|e| ctx.err(at("pixels_base64"), e.to_string()))?,
            (None, None) => {
                return Err(ctx.err(at("pixels_file"), "one of pixels_file or pixels_base64 is required"))
            }
            (Some(_), Some(_)) => {
                return Err(ctx.err(at("pixels_file"), "pixels_file and pixels_base64 are exclusive"))
            }
        };
        let expected = im.width * im.height * 3;
        if pixels.len() != expected {
            return Err(ctx.err(
                at("pixels"),
                format!("expected {expected} RGB bytes, found {}", pixels.len()),
            ));
        }
        let mut detections = Vec::with_capacity(im.detections.len());
        for (j, d) in im.detections.into_iter().enumerate() {
            let f = at(&format!("detections[{j}]"));
            if !(0.0..=1.0).contains(&d.score) {
                return Err(ctx.err(format!("{f}.score"), format!("score {} outside [0, 1]", d.score)));
            }
            detections.push(DetectedInstance {
                bbox: ctx.bbox(&format!("{f}.box"), d.bbox, im.width, im.height)?,
                category: d.category,
                score: d.score,
            });
        }
        let mut ground_truth = Vec::with_capacity(im.ground_truth.len());
        for (j, t) in im.ground_truth.into_iter().enumerate() {
            let f = at(&format!("ground_truth[{j}]"));
            let verb = verbs
                .id(&t.verb)
                .ok_or_else(|| ctx.err(format!("{f}.verb"), format!("unknown verb `{}`", t.verb)))?;
            let human = ctx.bbox(&format!("{f}.human_box"), t.human_box, im.width, im.height)?;
            let object = t
                .object_box
                .map(|b| ctx.bbox(&format!("{f}.object_box"), b, im.width, im.height))
                .transpose()?;
            if verbs.requires_object(verb) != object.is_some() {
                return Err(ctx.err(
                    format!("{f}.object_box"),
                    format!(
                        "verb `{}` {} an object box",
                        t.verb,
                        if object.is_some() { "does not take" } else { "requires" }
                    ),
                ));
            }
            ground_truth.push(HoiTriplet {
                human,
                object,
                verb,
                score: 1.0,
            });
        }
        images.push(ImageRecord {
            id: im.id,
            width: im.width,
            height: im.height,
            pixels,
            detections,
            ground_truth,
        });
    }
    Ok(Dataset { verbs, images })
}

fn to_raw(d: &Dataset) -> RawDataset {
    RawDataset {
        verbs: d.verbs.iter().cloned().collect(),
        images: d
            .images
            .iter()
            .map(|im| RawImage {
                id: im.id.clone(),
                width: im.width,
                height: im.height,
                pixels_file: None,
                pixels_base64: Some(BASE64.encode(&im.pixels)),
                detections: im
                    .detections
                    .iter()
                    .map(|det| RawDetection {
                        bbox: det.bbox.into(),
                        category: det.category.clone(),
                        score: det.score,
                    })
                    .collect(),
                ground_truth: im
                    .ground_truth
                    .iter()
                    .map(|t| RawTriplet {
                        human_box: t.human.into(),
                        object_box: t.object.map(Into::into),
                        verb: d.verbs.name(t.verb).to_string(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Serialize with pixels inlined as base64.
pub fn dataset_to_json(d: &Dataset) -> String {
    let mut s = serde_json::to_string_pretty(&to_raw(d)).expect("dataset serializes");
    s.push('\n');
    s
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_json(d)).map_err(|e| Error::io(path, e))
}
