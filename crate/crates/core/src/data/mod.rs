//! Boxes, detections, interaction triplets and the dataset file format.

mod dataset;
mod proposals;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, Dataset, ImageRecord};
pub use proposals::{propose_pairs, PairProposal, HUMAN_THRESHOLD, OBJECT_THRESHOLD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERSON: &str = "person";

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!(
                "box [{x1}, {y1}, {x2}, {y2}] has non-finite coordinates"
            )));
        }
        if x2 <= x1 {
            return Err(Error::Input(format!("box x2 ({x2}) must exceed x1 ({x1})")));
        }
        if y2 <= y1 {
            return Err(Error::Input(format!("box y2 ({y2}) must exceed y1 ({y1})")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn whole_image(width: usize, height: usize) -> Self {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: width as f64,
            y2: height as f64,
        }
    }

    /// Intersect with the image rectangle. Fails if nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Result<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width as f64),
            self.y2.min(height as f64),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn is_within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedInstance {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

impl DetectedInstance {
    pub fn is_person(&self) -> bool {
        self.category == PERSON
    }
}

/// A ⟨human, verb, object⟩ prediction or ground-truth annotation.
/// Ground truth carries score 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiTriplet {
    pub human: BBox,
    pub object: Option<BBox>,
    pub verb: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verb {
    pub name: String,
    pub requires_object: bool,
}

/// Ordered verb vocabulary; a verb's id is its index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerbTable {
    verbs: Vec<Verb>,
}

impl VerbTable {
    pub fn new(verbs: Vec<Verb>) -> Result<Self> {
        for (i, v) in verbs.iter().enumerate() {
            if verbs[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Input(format!("duplicate verb name `{}`", v.name)));
            }
        }
        Ok(VerbTable { verbs })
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v.name == name)
    }

    pub fn get(&self, id: usize) -> Option<&Verb> {
        self.verbs.get(id)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.verbs[id].name
    }

    pub fn requires_object(&self, id: usize) -> bool {
        self.verbs[id].requires_object
    }

    pub fn iter(&self) -> impl Iterator<Item = &Verb> {
        self.verbs.iter()
    }
}
