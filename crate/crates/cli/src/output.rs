//! File formats written and read by the commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gidnet_core::data::{BBox, Dataset, HoiTriplet, VerbTable};
use gidnet_core::eval::ImageTriplet;
use gidnet_core::model::LossRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// One scored triplet as stored in prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub human_box: BBox,
    pub object_box: Option<BBox>,
    pub verb: String,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(image_id: &str, t: &HoiTriplet, verbs: &VerbTable) -> Self {
        PredictionRecord {
            image_id: image_id.to_string(),
            human_box: t.human,
            object_box: t.object,
            verb: verbs.name(t.verb).to_string(),
            score: t.score,
        }
    }
}

/// Parse a prediction file: a bare array of records, or an object with a
/// `predictions` array.
pub fn parse_predictions(text: &str, origin: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let bad = |m: String| CliError::Validation(format!("input error: {}: {m}", origin.display()));
    let root: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let items = match root {
        Value::Array(items) => items,
        Value::Object(mut m) => match m.remove("predictions") {
            Some(Value::Array(items)) => items,
            _ => return Err(bad("expected a `predictions` array".into())),
        },
        _ => return Err(bad("expected an array of predictions".into())),
    };
    items
        .into_iter()
        .enumerate()
        .map(|(k, v)| serde_json::from_value(v).map_err(|e| bad(format!("predictions[{k}]: {e}"))))
        .collect()
}

/// Resolve records against a dataset: every image id must exist and every
/// verb must be in its vocabulary.
pub fn resolve_predictions(records: &[PredictionRecord], ds: &Dataset) -> Result<Vec<ImageTriplet>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if ds.image(&r.image_id).is_none() {
                return Err(CliError::Validation(format!(
                    "input error: predictions[{k}] refers to image `{}`, which the dataset does not contain",
                    r.image_id
                )));
            }
            let verb = ds.verbs.id(&r.verb).ok_or_else(|| {
                CliError::Validation(format!("input error: predictions[{k}] has unknown verb `{}`", r.verb))
            })?;
            Ok(ImageTriplet {
                image_id: r.image_id.clone(),
                triplet: HoiTriplet {
                    human: r.human_box,
                    object: r.object_box,
                    verb,
                    score: r.score,
                },
            })
        })
        .collect()
}

/// Ground truth of every image, scored 1.
pub fn ground_truth(ds: &Dataset) -> Vec<ImageTriplet> {
    ds.images
        .iter()
        .flat_map(|im| {
            im.ground_truth.iter().map(|t| ImageTriplet {
                image_id: im.id.clone(),
                triplet: t.clone(),
            })
        })
        .collect()
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// CSV loss log: a `#` comment line holding the config echo, the header,
/// then one row per iteration.
pub fn loss_csv(records: &[LossRecord], echo: &Value) -> String {
    let mut s = format!("# run_config {echo}\niteration,L_h,L_o,L_i,total\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.human, r.object, r.interaction, r.total);
    }
    s
}

/// Binary PGM of a row-major `height × width` map, min-max scaled to
/// 0..=255. A constant map is all zeros.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm dims");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Image ids made safe for file names.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
