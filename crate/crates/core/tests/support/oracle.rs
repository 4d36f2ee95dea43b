//! Brute-force role mAP for small corpora with integer boxes.
//!
//! Matching enumerates every injective assignment of each image's
//! predictions to its ground truth and keeps the best greedy-consistent one:
//! predictions are visited in descending score order and the assignment
//! whose per-prediction outcomes are lexicographically largest wins, where
//! a match beats no match, higher min(human, object) IoU beats lower, and a
//! lower ground-truth index breaks the remaining ties. IoU is counted on the
//! unit-cell grid.

#![allow(dead_code)]

use gidnet_core::data::{BBox, HoiTriplet, Verb, VerbTable};
use gidnet_core::eval::ImageTriplet;
use rand::Rng;

const GRID: i64 = 16;

fn cells(b: &BBox) -> impl Iterator<Item = (i64, i64)> + '_ {
    (b.y1 as i64..b.y2 as i64).flat_map(move |y| (b.x1 as i64..b.x2 as i64).map(move |x| (x, y)))
}

fn covers(b: &BBox, (x, y): (i64, i64)) -> bool {
    (b.x1 as i64..b.x2 as i64).contains(&x) && (b.y1 as i64..b.y2 as i64).contains(&y)
}

pub fn count_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = cells(a).filter(|&c| covers(b, c)).count();
    let union = cells(a).count() + cells(b).count() - inter;
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Match quality, `None` when the pair is not a valid match.
fn quality(p: &HoiTriplet, g: &HoiTriplet) -> Option<f64> {
    if p.verb != g.verb {
        return None;
    }
    let h = count_iou(&p.human, &g.human);
    let q = match (&p.object, &g.object) {
        (None, None) => h,
        (Some(a), Some(b)) => h.min(count_iou(a, b)),
        _ => return None,
    };
    (h >= 0.5 && q >= 0.5).then_some(q)
}

/// Outcome key of one prediction; larger is better.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Outcome {
    Miss,
    Hit(f64, i64),
}

fn enumerate(
    k: usize,
    preds: &[&HoiTriplet],
    gts: &[&HoiTriplet],
    used: &mut Vec<bool>,
    current: &mut Vec<(Outcome, Option<usize>)>,
    best: &mut Option<Vec<(Outcome, Option<usize>)>>,
) {
    if k == preds.len() {
        let better = match best {
            None => true,
            Some(b) => {
                let keys = |v: &Vec<(Outcome, Option<usize>)>| v.iter().map(|x| x.0).collect::<Vec<_>>();
                keys(current).partial_cmp(&keys(b)) == Some(std::cmp::Ordering::Greater)
            }
        };
        if better {
            *best = Some(current.clone());
        }
        return;
    }
    current.push((Outcome::Miss, None));
    enumerate(k + 1, preds, gts, used, current, best);
    current.pop();
    for g in 0..gts.len() {
        if used[g] {
            continue;
        }
        if let Some(q) = quality(preds[k], gts[g]) {
            used[g] = true;
            current.push((Outcome::Hit(q, -(g as i64)), Some(g)));
            enumerate(k + 1, preds, gts, used, current, best);
            current.pop();
            used[g] = false;
        }
    }
}

/// All-point AP: precision at each true positive, raised to the best
/// precision at any later rank, averaged over the ground truth count.
fn ap(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let precision_at = |j: usize| flags[..=j].iter().filter(|f| **f).count() as f64 / (j + 1) as f64;
    let mut sum = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            sum += (k..flags.len()).map(precision_at).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    sum / num_gt as f64
}

pub struct OracleReport {
    /// `None` for verbs without ground truth.
    pub per_verb: Vec<Option<f64>>,
    pub map: f64,
    /// True-positive flag of every prediction, in input order.
    pub tp: Vec<bool>,
    /// Ground truth taken by every prediction, as an index into the ground
    /// truth of its image in input order.
    pub assigned: Vec<Option<usize>>,
}

pub fn brute_force(preds: &[ImageTriplet], gts: &[ImageTriplet], num_verbs: usize) -> OracleReport {
    let mut assigned = vec![None; preds.len()];
    let mut per_verb = Vec::new();
    for v in 0..num_verbs {
        let mut order: Vec<usize> = (0..preds.len()).filter(|&k| preds[k].triplet.verb == v).collect();
        // stable: equal scores keep input order
        order.sort_by(|&a, &b| preds[b].triplet.score.partial_cmp(&preds[a].triplet.score).unwrap());
        let mut images: Vec<&str> = order.iter().map(|&k| preds[k].image_id.as_str()).collect();
        images.sort();
        images.dedup();
        for im in images {
            let mine: Vec<usize> = order.iter().copied().filter(|&k| preds[k].image_id == im).collect();
            let ps: Vec<&HoiTriplet> = mine.iter().map(|&k| &preds[k].triplet).collect();
            let gs: Vec<&HoiTriplet> = gts.iter().filter(|g| g.image_id == im).map(|g| &g.triplet).collect();
            let mut best = None;
            enumerate(0, &ps, &gs, &mut vec![false; gs.len()], &mut Vec::new(), &mut best);
            for (&k, (_, g)) in mine.iter().zip(best.expect("the empty assignment always exists")) {
                assigned[k] = g;
            }
        }
        let num_gt = gts.iter().filter(|g| g.triplet.verb == v).count();
        let flags: Vec<bool> = order.iter().map(|&k| assigned[k].is_some()).collect();
        per_verb.push((num_gt > 0).then(|| ap(&flags, num_gt)));
    }
    let scored: Vec<f64> = per_verb.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    OracleReport {
        per_verb,
        map,
        tp: assigned.iter().map(Option::is_some).collect(),
        assigned,
    }
}

/// Verbs 0 and 1 take an object, verb 2 does not.
pub fn oracle_verbs() -> VerbTable {
    VerbTable::new(
        [("ride", true), ("hold", true), ("stand", false)]
            .into_iter()
            .map(|(n, o)| Verb {
                name: n.into(),
                requires_object: o,
            })
            .collect(),
    )
    .unwrap()
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.gen_range(0..GRID - 4);
    let y1 = rng.gen_range(0..GRID - 4);
    let x2 = rng.gen_range(x1 + 2..=(x1 + 8).min(GRID));
    let y2 = rng.gen_range(y1 + 2..=(y1 + 8).min(GRID));
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

/// Shift each edge by at most one cell, keeping the box valid.
fn jitter(b: &BBox, rng: &mut impl Rng) -> BBox {
    loop {
        let mut e = [b.x1, b.y1, b.x2, b.y2].map(|v| v + rng.gen_range(-1i32..=1) as f64);
        e.iter_mut().for_each(|v| *v = v.clamp(0.0, GRID as f64));
        if let Ok(j) = BBox::new(e[0], e[1], e[2], e[3]) {
            return j;
        }
    }
}

/// A random corpus with at most 5 predictions and 3 ground truths per
/// verb. Predictions are mostly jittered copies of ground truth so that
/// near-threshold matches, duplicates and score or quality ties are common.
pub fn random_case(rng: &mut impl Rng) -> (Vec<ImageTriplet>, Vec<ImageTriplet>) {
    let images = ["a", "b", "c"];
    let num_images = rng.gen_range(1..=3);
    let mut gts: Vec<ImageTriplet> = Vec::new();
    let mut preds = Vec::new();
    for verb in 0..3 {
        let has_object = verb != 2;
        let first = gts.len();
        for k in 0..rng.gen_range(0..=3) {
            // a repeated annotation makes equal-quality ties
            if k > 0 && rng.gen_bool(0.3) {
                let copy = gts[first].clone();
                gts.push(copy);
                continue;
            }
            let object = has_object.then(|| random_box(rng));
            gts.push(ImageTriplet {
                image_id: images[rng.gen_range(0..num_images)].into(),
                triplet: HoiTriplet {
                    human: random_box(rng),
                    object,
                    verb,
                    score: 1.0,
                },
            });
        }
        let same_verb: Vec<ImageTriplet> = gts.iter().filter(|g| g.triplet.verb == verb).cloned().collect();
        for _ in 0..rng.gen_range(0..=5) {
            let score = [0.2, 0.5, 0.5, 0.7, 0.9][rng.gen_range(0..5)];
            let p = if !same_verb.is_empty() && rng.gen_bool(0.75) {
                let g = &same_verb[rng.gen_range(0..same_verb.len())];
                let mut t = g.triplet.clone();
                t.human = jitter(&t.human, rng);
                t.object = t.object.map(|o| jitter(&o, rng));
                if rng.gen_bool(0.1) {
                    t.object = if has_object { None } else { Some(random_box(rng)) };
                }
                t.score = score;
                ImageTriplet {
                    image_id: if rng.gen_bool(0.9) {
                        g.image_id.clone()
                    } else {
                        images[rng.gen_range(0..num_images)].into()
                    },
                    triplet: t,
                }
            } else {
                ImageTriplet {
                    image_id: images[rng.gen_range(0..num_images)].into(),
                    triplet: HoiTriplet {
                        human: random_box(rng),
                        object: has_object.then(|| random_box(rng)),
                        verb,
                        score,
                    },
                }
            };
            preds.push(p);
        }
    }
    (preds, gts)
}
