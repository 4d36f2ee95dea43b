//! Procedural scenes whose interaction labels are a pure function of pixels.
//!
//! Each image shows one person blob and, depending on the verb, one object
//! blob placed relative to it. Everything is drawn from a single seeded
//! ChaCha stream, so the same config and seed always produce the same bytes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_dataset, BBox, Dataset, DetectedInstance, HoiTriplet, ImageRecord, Verb, VerbTable, PERSON};
use crate::error::{Error, Result};

pub const BACKGROUND: [u8; 3] = [96, 112, 96];
pub const PERSON_COLOR: [u8; 3] = [224, 48, 48];
pub const BLUE: [u8; 3] = [40, 64, 224];
pub const GREEN: [u8; 3] = [40, 208, 64];
pub const YELLOW: [u8; 3] = [232, 208, 40];
/// Per-channel noise amplitude added to every pixel.
pub const NOISE: i32 = 6;

pub const OBJECT_CATEGORY: &str = "object";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthVariant {
    /// Object colour is keyed to the verb: lift (blue, above the person),
    /// hold (green, overlapping), walk (no object), kick (yellow, below).
    Standard,
    /// Verbs need layout and appearance together: lift (blue above),
    /// look (green above), hold (either colour overlapping), walk (no
    /// object). An undetected decoy blob of the other colour stands beside
    /// the person.
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_verbs: usize,
    pub samples: usize,
    /// Extra low-confidence object detections per image on empty background.
    pub distractors: usize,
    pub variant: SynthVariant,
    /// Prefix for image ids.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_verbs: 3,
            samples: 32,
            distractors: 1,
            variant: SynthVariant::Standard,
            id_prefix: "img".into(),
        }
    }
}

const STANDARD_VERBS: [(&str, bool); 4] =
    [("lift", true), ("hold", true), ("walk", false), ("kick", true)];
const CONTEXTUAL_VERBS: [(&str, bool); 4] =
    [("lift", true), ("look", true), ("hold", true), ("walk", false)];

/// Spatial relation of an object to the person.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Above,
    Overlap,
    Below,
    Beside,
}

pub fn layout(person: &BBox, object: &BBox) -> Layout {
    if person.intersection_area(object) > 0.0 {
        Layout::Overlap
    } else if object.y2 <= person.y1 {
        Layout::Above
    } else if object.y1 >= person.y2 {
        Layout::Below
    } else {
        Layout::Beside
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 48 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "synth image_size must be a multiple of 4 and at least 48, got {}",
                self.image_size
            )));
        }
        match self.variant {
            SynthVariant::Standard if !(2..=4).contains(&self.num_verbs) => Err(Error::Config(format!(
                "standard synth supports 2 to 4 verbs, got {}",
                self.num_verbs
            ))),
            SynthVariant::Contextual if self.num_verbs != 4 => Err(Error::Config(format!(
                "contextual synth uses exactly 4 verbs, got {}",
                self.num_verbs
            ))),
            _ => Ok(()),
        }
    }

    pub fn verb_table(&self) -> VerbTable {
        let list: &[(&str, bool)] = match self.variant {
            SynthVariant::Standard => &STANDARD_VERBS[..self.num_verbs],
            SynthVariant::Contextual => &CONTEXTUAL_VERBS,
        };
        VerbTable::new(
            list.iter()
                .map(|&(n, r)| Verb {
                    name: n.into(),
                    requires_object: r,
                })
                .collect(),
        )
        .expect("builtin verb names are unique")
    }
}

struct Canvas {
    size: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            for c in BACKGROUND {
                pixels.push(jitter(c, rng));
            }
        }
        Canvas { size, pixels }
    }

    fn fill(&mut self, b: &BBox, color: [u8; 3], rng: &mut ChaCha8Rng) {
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                let i = (y * self.size + x) * 3;
                for c in 0..3 {
                    self.pixels[i + c] = jitter(color[c], rng);
                }
            }
        }
    }
}

fn jitter(c: u8, rng: &mut ChaCha8Rng) -> u8 {
    (c as i32 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8
}

fn rect(x: usize, y: usize, w: usize, h: usize) -> BBox {
    BBox {
        x1: x as f64,
        y1: y as f64,
        x2: (x + w) as f64,
        y2: (y + h) as f64,
    }
}

/// Random object box of side `s` relative to `person`, or `None` when the
/// layout cannot fit.
fn place_object(rng: &mut ChaCha8Rng, size: usize, person: &BBox, s: usize, rel: Layout) -> Option<BBox> {
    let (px1, py1, px2, py2) = (person.x1 as usize, person.y1 as usize, person.x2 as usize, person.y2 as usize);
    let x_near = |rng: &mut ChaCha8Rng| {
        let lo = px1.saturating_sub(s / 2);
        let hi = (px2 - s / 2).min(size - s);
        rng.gen_range(lo..=hi.max(lo))
    };
    match rel {
        Layout::Above => {
            let gap = rng.gen_range(2..=5);
            (py1 >= s + gap).then(|| rect(x_near(rng), py1 - s - gap, s, s))
        }
        Layout::Below => {
            let gap = rng.gen_range(2..=5);
            (py2 + gap + s <= size).then(|| rect(x_near(rng), py2 + gap, s, s))
        }
        Layout::Overlap => {
            // Straddle a side edge, strictly inside the person vertically.
            let y = rng.gen_range(py1 + 2..=py2 - s - 2);
            let right = rng.gen_bool(0.5);
            let x = if right { Some(px2 - s / 2) } else { (px1 + s / 2).checked_sub(s) };
            x.filter(|&x| x + s <= size).map(|x| rect(x, y, s, s))
        }
        Layout::Beside => {
            let gap = rng.gen_range(3..=6);
            let y = rng.gen_range(py1..=py2 - s);
            let left_ok = px1 >= s + gap;
            let right_ok = px2 + gap + s <= size;
            let go_left = match (left_ok, right_ok) {
                (false, false) => return None,
                (true, false) => true,
                (false, true) => false,
                (true, true) => rng.gen_bool(0.5),
            };
            Some(if go_left {
                rect(px1 - s - gap, y, s, s)
            } else {
                rect(px2 + gap, y, s, s)
            })
        }
    }
}

fn generate_image(cfg: &SynthConfig, verbs: &VerbTable, index: usize, rng: &mut ChaCha8Rng) -> ImageRecord {
    let size = cfg.image_size;
    let verb = index % verbs.len();
    let verb_name = verbs.name(verb).to_string();
    let (rel, color) = match (cfg.variant, verb_name.as_str()) {
        (SynthVariant::Standard, "lift") => (Some(Layout::Above), BLUE),
        (SynthVariant::Standard, "hold") => (Some(Layout::Overlap), GREEN),
        (SynthVariant::Standard, "kick") => (Some(Layout::Below), YELLOW),
        (SynthVariant::Contextual, "lift") => (Some(Layout::Above), BLUE),
        (SynthVariant::Contextual, "look") => (Some(Layout::Above), GREEN),
        (SynthVariant::Contextual, "hold") => (Some(Layout::Overlap), if rng.gen_bool(0.5) { BLUE } else { GREEN }),
        _ => (None, BLUE),
    };

    let mut canvas = Canvas::new(size, rng);
    let (person, object) = loop {
        let w = rng.gen_range(size / 6..=size / 4);
        let h = rng.gen_range(size * 5 / 16..=size * 7 / 16);
        let x = rng.gen_range(2..=size - w - 2);
        let y = rng.gen_range(2..=size - h - 2);
        let person = rect(x, y, w, h);
        let Some(rel) = rel else { break (person, None) };
        let s = rng.gen_range(size / 10..=size / 7);
        if let Some(obj) = place_object(rng, size, &person, s, rel) {
            break (person, Some(obj));
        }
    };

    let mut decoy = None;
    if cfg.variant == SynthVariant::Contextual {
        let decoy_color = match object {
            Some(_) if color == BLUE => GREEN,
            Some(_) => BLUE,
            None if rng.gen_bool(0.5) => BLUE,
            None => GREEN,
        };
        for _ in 0..32 {
            let s = rng.gen_range(size / 10..=size / 7);
            if let Some(b) = place_object(rng, size, &person, s, Layout::Beside) {
                if object.map_or(true, |o| o.intersection_area(&b) == 0.0) {
                    decoy = Some((b, decoy_color));
                    break;
                }
            }
        }
    }

    canvas.fill(&person, PERSON_COLOR, rng);
    if let Some((b, c)) = decoy {
        canvas.fill(&b, c, rng);
    }
    if let Some(o) = &object {
        canvas.fill(o, color, rng);
    }

    let mut detections = vec![DetectedInstance {
        bbox: person,
        category: PERSON.into(),
        score: 0.99,
    }];
    if let Some(o) = object {
        detections.push(DetectedInstance {
            bbox: o,
            category: OBJECT_CATEGORY.into(),
            score: 0.99,
        });
    }
    let mut taken: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    taken.extend(decoy.map(|d| d.0));
    for _ in 0..cfg.distractors {
        for _ in 0..32 {
            let s = rng.gen_range(size / 10..=size / 6);
            let Some(b) = place_object(rng, size, &person, s, Layout::Beside) else { continue };
            if taken.iter().all(|t| t.intersection_area(&b) == 0.0) {
                taken.push(b);
                detections.push(DetectedInstance {
                    bbox: b,
                    category: OBJECT_CATEGORY.into(),
                    score: (rng.gen_range(30..70) as f64) / 100.0,
                });
                break;
            }
        }
    }

    ImageRecord {
        id: format!("{}_{index:04}", cfg.id_prefix),
        width: size,
        height: size,
        pixels: canvas.pixels,
        detections,
        ground_truth: vec![HoiTriplet {
            human: person,
            object,
            verb,
            score: 1.0,
        }],
    }
}

/// Build the dataset in memory. Pure function of `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let verbs = cfg.verb_table();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..cfg.samples)
        .map(|i| generate_image(cfg, &verbs, i, &mut rng))
        .collect();
    Ok(Dataset { verbs, images })
}

pub fn synth_write(cfg: &SynthConfig, seed: u64, path: impl AsRef<Path>) -> Result<Dataset> {
    let d = synth_generate(cfg, seed)?;
    save_dataset(&d, path)?;
    Ok(d)
}
