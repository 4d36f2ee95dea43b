//! Role mAP over ⟨human, verb, object⟩ triplets and false-positive
//! diagnosis.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, HoiTriplet, VerbTable};
use crate::error::{Error, Result};

/// IoU at which a predicted box matches a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;
/// Below this IoU a box counts as not overlapping at all.
pub const LOC_IOU: f64 = 0.1;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A triplet tagged with the image it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub image_id: String,
    pub triplet: HoiTriplet,
}

/// Quality of `pred` as a match for `gt`, `None` when it is not a match:
/// `min(human IoU, object IoU)`, or the human IoU when neither side has an
/// object.
fn match_quality(pred: &HoiTriplet, gt: &HoiTriplet) -> Option<f64> {
    let h = iou(&pred.human, &gt.human);
    if h < MATCH_IOU {
        return None;
    }
    match (&pred.object, &gt.object) {
        (None, None) => Some(h),
        (Some(p), Some(g)) => {
            let o = iou(p, g);
            (o >= MATCH_IOU).then_some(h.min(o))
        }
        _ => None,
    }
}

/// Per-prediction outcome of greedy matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Ground-truth index matched by each prediction, `None` for a false
    /// positive.
    pub matched: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.matched.iter().map(Option::is_some).collect()
    }
}

/// Greedy matching of `preds` (already sorted by descending score) to
/// `gts` of one image. Each prediction takes the unmatched same-verb
/// ground truth of highest match quality, lowest index first on ties.
pub fn match_triplets(preds: &[HoiTriplet], gts: &[HoiTriplet], verb: usize) -> Result<MatchResult> {
    if let Some(p) = preds.iter().find(|p| p.verb != verb) {
        return Err(Error::Contract(format!(
            "match_triplets for verb {verb} received a prediction of verb {}",
            p.verb
        )));
    }
    let mut used = vec![false; gts.len()];
    let matched = preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.verb != verb {
                    continue;
                }
                if let Some(q) = match_quality(p, gt) {
                    if best.map_or(true, |(_, bq)| q > bq) {
                        best = Some((g, q));
                    }
                }
            }
            best.map(|(g, _)| {
                used[g] = true;
                g
            })
        })
        .collect();
    Ok(MatchResult { matched })
}

/// All-point interpolated AP of TP flags in score order: the precision
/// envelope (running maximum from the right) summed at each true positive,
/// divided by `num_gt`. Zero when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            tp += f as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let sum: f64 = flags
        .iter()
        .zip(&envelope)
        .filter(|(f, _)| **f)
        .map(|(_, p)| *p)
        .sum();
    sum / num_gt as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    IncorrectLabel,
    Bck,
    PersonMisloc,
    ObjectMisloc,
    MisPairing,
    ObjHallucination,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [
        ErrorType::IncorrectLabel,
        ErrorType::Bck,
        ErrorType::PersonMisloc,
        ErrorType::ObjectMisloc,
        ErrorType::MisPairing,
        ErrorType::ObjHallucination,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorType::IncorrectLabel => "incorrect_label",
            ErrorType::Bck => "bck",
            ErrorType::PersonMisloc => "person_misloc",
            ErrorType::ObjectMisloc => "object_misloc",
            ErrorType::MisPairing => "mis_pairing",
            ErrorType::ObjHallucination => "obj_hallucination",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub incorrect_label: usize,
    pub bck: usize,
    pub person_misloc: usize,
    pub object_misloc: usize,
    pub mis_pairing: usize,
    pub obj_hallucination: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, t: ErrorType) {
        *self.slot(t) += 1;
    }

    pub fn get(&self, t: ErrorType) -> usize {
        match t {
            ErrorType::IncorrectLabel => self.incorrect_label,
            ErrorType::Bck => self.bck,
            ErrorType::PersonMisloc => self.person_misloc,
            ErrorType::ObjectMisloc => self.object_misloc,
            ErrorType::MisPairing => self.mis_pairing,
            ErrorType::ObjHallucination => self.obj_hallucination,
        }
    }

    fn slot(&mut self, t: ErrorType) -> &mut usize {
        match t {
            ErrorType::IncorrectLabel => &mut self.incorrect_label,
            ErrorType::Bck => &mut self.bck,
            ErrorType::PersonMisloc => &mut self.person_misloc,
            ErrorType::ObjectMisloc => &mut self.object_misloc,
            ErrorType::MisPairing => &mut self.mis_pairing,
            ErrorType::ObjHallucination => &mut self.obj_hallucination,
        }
    }

    pub fn total(&self) -> usize {
        ErrorType::ALL.iter().map(|&t| self.get(t)).sum()
    }
}

fn objects_agree(pred: &HoiTriplet, gt: &HoiTriplet) -> bool {
    match (&pred.object, &gt.object) {
        (None, None) => true,
        (Some(p), Some(g)) => iou(p, g) >= MATCH_IOU,
        _ => false,
    }
}

/// Classify a false positive against the ground truth of its image. The
/// first rule that applies wins:
/// incorrect label, person mislocalization, object mislocalization,
/// mis-pairing, object hallucination, and background as the residual.
pub fn classify_false_positive(pred: &HoiTriplet, gts: &[HoiTriplet]) -> ErrorType {
    let h_iou = |g: &HoiTriplet| iou(&pred.human, &g.human);
    let same_verb = || gts.iter().filter(|g| g.verb == pred.verb);

    if gts
        .iter()
        .any(|g| g.verb != pred.verb && h_iou(g) >= MATCH_IOU && objects_agree(pred, g))
    {
        return ErrorType::IncorrectLabel;
    }
    let best_h = same_verb()
        .filter(|g| objects_agree(pred, g))
        .map(h_iou)
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    if best_h.is_some_and(|h| (LOC_IOU..MATCH_IOU).contains(&h)) {
        return ErrorType::PersonMisloc;
    }
    if let Some(po) = &pred.object {
        let best_o = same_verb()
            .filter(|g| h_iou(g) >= MATCH_IOU)
            .filter_map(|g| g.object.as_ref().map(|go| iou(po, go)))
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        if best_o.is_some_and(|o| (LOC_IOU..MATCH_IOU).contains(&o)) {
            return ErrorType::ObjectMisloc;
        }
        let h_hits: Vec<usize> = same_verb()
            .enumerate()
            .filter(|(_, g)| h_iou(g) >= MATCH_IOU)
            .map(|(k, _)| k)
            .collect();
        let o_hits: Vec<usize> = same_verb()
            .enumerate()
            .filter(|(_, g)| g.object.as_ref().is_some_and(|go| iou(po, go) >= MATCH_IOU))
            .map(|(k, _)| k)
            .collect();
        let both = h_hits.iter().any(|k| o_hits.contains(k));
        if !both && !h_hits.is_empty() && !o_hits.is_empty() {
            return ErrorType::MisPairing;
        }
        if gts
            .iter()
            .filter_map(|g| g.object.as_ref())
            .all(|go| iou(po, go) < LOC_IOU)
        {
            return ErrorType::ObjHallucination;
        }
    }
    ErrorType::Bck
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbAp {
    pub verb: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_verb: Vec<VerbAp>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub errors: ErrorCounts,
    pub num_predictions: usize,
    pub num_tp: usize,
    pub num_fp: usize,
}

/// One prediction after corpus-level matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessed {
    /// Index into the prediction list given to [`evaluate`].
    pub index: usize,
    /// `None` for a true positive.
    pub error: Option<ErrorType>,
}

/// Indices of `items` grouped by image id, in first-seen order.
fn by_image(items: &[ImageTriplet]) -> Vec<(&str, Vec<usize>)> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (k, t) in items.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == t.image_id) {
            Some((_, v)) => v.push(k),
            None => groups.push((t.image_id.as_str(), vec![k])),
        }
    }
    groups
}

/// Match each verb's predictions over the whole corpus in descending score
/// order (ties keep input order) and score them. Returns the report and
/// the per-prediction outcome.
pub fn evaluate(preds: &[ImageTriplet], gts: &[ImageTriplet], verbs: &VerbTable) -> Result<(EvalReport, Vec<Assessed>)> {
    for t in preds.iter().chain(gts) {
        if t.triplet.verb >= verbs.len() {
            return Err(Error::Input(format!(
                "triplet in image `{}` has verb id {} but only {} verbs exist",
                t.image_id,
                t.triplet.verb,
                verbs.len()
            )));
        }
        if !t.triplet.score.is_finite() || t.triplet.score < 0.0 {
            return Err(Error::Input(format!(
                "triplet in image `{}` has invalid score {}",
                t.image_id, t.triplet.score
            )));
        }
    }
    let gt_groups = by_image(gts);
    let gts_of = |id: &str| -> Vec<HoiTriplet> {
        gt_groups
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, v)| v.iter().map(|&k| gts[k].triplet.clone()).collect())
            .unwrap_or_default()
    };

    let mut outcome: Vec<Option<Option<ErrorType>>> = vec![None; preds.len()];
    let mut per_verb = Vec::with_capacity(verbs.len());
    for v in 0..verbs.len() {
        let mut order: Vec<usize> = (0..preds.len()).filter(|&k| preds[k].triplet.verb == v).collect();
        order.sort_by(|&a, &b| preds[b].triplet.score.total_cmp(&preds[a].triplet.score));
        let num_gt = gts.iter().filter(|g| g.triplet.verb == v).count();

        let mut flags = vec![false; order.len()];
        for (id, members) in by_image(&order.iter().map(|&k| preds[k].clone()).collect::<Vec<_>>()) {
            let image_gts = gts_of(id);
            let ps: Vec<HoiTriplet> = members.iter().map(|&m| preds[order[m]].triplet.clone()).collect();
            let res = match_triplets(&ps, &image_gts, v)?;
            for (&m, hit) in members.iter().zip(&res.matched) {
                flags[m] = hit.is_some();
                let k = order[m];
                outcome[k] = Some(if hit.is_some() {
                    None
                } else {
                    Some(classify_false_positive(&preds[k].triplet, &image_gts))
                });
            }
        }
        per_verb.push(VerbAp {
            verb: verbs.name(v).to_string(),
            ap: average_precision(&flags, num_gt),
            num_gt,
            num_pred: order.len(),
            tp: flags.iter().filter(|f| **f).count(),
        });
    }

    let scored: Vec<f64> = per_verb.iter().filter(|p| p.num_gt > 0).map(|p| p.ap).collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    let mut errors = ErrorCounts::default();
    let assessed: Vec<Assessed> = outcome
        .into_iter()
        .enumerate()
        .map(|(index, o)| {
            let error = o.expect("every prediction has a verb in range");
            if let Some(t) = error {
                errors.add(t);
            }
            Assessed { index, error }
        })
        .collect();
    let num_fp = errors.total();
    Ok((
        EvalReport {
            per_verb,
            map,
            errors,
            num_predictions: preds.len(),
            num_tp: preds.len() - num_fp,
            num_fp,
        },
        assessed,
    ))
}

pub fn role_map(preds: &[ImageTriplet], gts: &[ImageTriplet], verbs: &VerbTable) -> Result<EvalReport> {
    evaluate(preds, gts, verbs).map(|(r, _)| r)
}

/// Error type of every false positive, in prediction order.
pub fn diagnose_errors(preds: &[ImageTriplet], gts: &[ImageTriplet], verbs: &VerbTable) -> Result<Vec<(usize, ErrorType)>> {
    let (_, assessed) = evaluate(preds, gts, verbs)?;
    Ok(assessed
        .into_iter()
        .filter_map(|a| a.error.map(|e| (a.index, e)))
        .collect())
}
