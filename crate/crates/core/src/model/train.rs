use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bce_loss, forward_image, overall_loss, ModelConfig, ModelParams};
use crate::autodiff::{Gradients, Tape};
use crate::data::{propose_pairs, HoiTriplet, ImageRecord, PairProposal, VerbTable};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::nn::Parameters;
use crate::tensor::Tensor;

/// IoU a predicted box needs to inherit a ground-truth label.
const LABEL_IOU: f64 = 0.5;

/// Per-branch label matrices for the proposals of one image.
///
/// Each branch is labelled by what it can see: the human branch with the
/// verbs of every ground truth whose human box matches, the object branch
/// likewise through the object box, and the interaction branch only with
/// verbs whose full pair (or object-less human) matches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLabels {
    /// `[N, I]`
    pub human: Tensor,
    /// `[No, I]` over proposals with an object, `None` when there are none.
    pub object: Option<Tensor>,
    /// `[N, I]`
    pub interaction: Tensor,
}

pub fn build_labels(proposals: &[PairProposal], gts: &[HoiTriplet], verbs: &VerbTable) -> Result<BranchLabels> {
    let i = verbs.len();
    let n = proposals.len();
    if n == 0 {
        return Err(Error::Contract("build_labels needs at least one proposal".into()));
    }
    let mut human = vec![0.0; n * i];
    let mut interaction = vec![0.0; n * i];
    let mut object = Vec::new();
    for (k, p) in proposals.iter().enumerate() {
        let hb = &p.human.bbox;
        let mut orow = vec![0.0; i];
        for gt in gts {
            let h_ok = iou(hb, &gt.human) >= LABEL_IOU;
            if h_ok {
                human[k * i + gt.verb] = 1.0;
            }
            let o_ok = match (&p.object, &gt.object) {
                (Some(po), Some(go)) => {
                    let ok = iou(&po.bbox, go) >= LABEL_IOU;
                    if ok {
                        orow[gt.verb] = 1.0;
                    }
                    ok
                }
                (None, None) => true,
                _ => false,
            };
            if h_ok && o_ok && verbs.requires_object(gt.verb) == p.object.is_some() {
                interaction[k * i + gt.verb] = 1.0;
            }
        }
        if p.object.is_some() {
            object.extend(orow);
        }
    }
    let no = object.len() / i;
    Ok(BranchLabels {
        human: Tensor::new([n, i], human)?,
        object: if no > 0 { Some(Tensor::new([no, i], object)?) } else { None },
        interaction: Tensor::new([n, i], interaction)?,
    })
}

/// An image with its pixels, proposals and labels computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub id: String,
    pub image: Tensor,
    pub proposals: Vec<PairProposal>,
    pub labels: BranchLabels,
}

/// `None` when no detection survives the proposal thresholds.
pub fn prepare_image(record: &ImageRecord, verbs: &VerbTable) -> Result<Option<PreparedImage>> {
    let proposals = propose_pairs(&record.detections);
    if proposals.is_empty() {
        return Ok(None);
    }
    let labels = build_labels(&proposals, &record.ground_truth, verbs)?;
    Ok(Some(PreparedImage {
        id: record.id.clone(),
        image: record.to_tensor(),
        proposals,
        labels,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch image order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            seed: 0,
        }
    }
}

/// Branch losses of one step; disabled branches report 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based.
    pub iteration: usize,
    pub human: f64,
    pub object: f64,
    pub interaction: f64,
    pub total: f64,
}

/// SGD with momentum and L2 weight decay:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Update every parameter of `params`. Parameters absent from `grads`
    /// take a zero gradient. A non-finite gradient aborts before anything
    /// is modified.
    pub fn step(&mut self, params: &mut impl Parameters, grads: &Gradients) -> Result<()> {
        let mut gs: Vec<Option<Vec<f64>>> = Vec::new();
        let mut bad = None;
        params.visit(&mut |p| {
            let g = grads.param(&p.name);
            if bad.is_none() {
                if let Some(g) = &g {
                    if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                        bad = Some(Error::Training {
                            param: p.name.clone(),
                            detail: format!("non-finite gradient {} at index {j}", g[j]),
                        });
                    }
                }
            }
            gs.push(g);
        });
        if let Some(e) = bad {
            return Err(e);
        }
        if self.velocity.is_empty() {
            let mut v = Vec::new();
            params.visit(&mut |p| v.push(vec![0.0; p.value.len()]));
            self.velocity = v;
        }
        if self.velocity.len() != gs.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        let (lr, m, wd) = (self.lr, self.momentum, self.weight_decay);
        let mut k = 0;
        let velocity = &mut self.velocity;
        params.visit_mut(&mut |p| {
            let v = &mut velocity[k];
            let g = gs[k].as_deref();
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                v[j] = m * v[j] + gj + wd * *x;
                *x -= lr * v[j];
            }
            k += 1;
        });
        Ok(())
    }
}

/// Forward one prepared image and return the branch losses, the total and
/// the gradients.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    img: &PreparedImage,
) -> Result<(LossRecord, Gradients)> {
    let tape = Tape::new();
    let out = forward_image(&tape, &img.image, &img.proposals, params, cfg)?;
    let lh = match &out.human {
        Some(x) => Some(bce_loss(*x, &img.labels.human)?),
        None => None,
    };
    let lo = match (&out.object, &img.labels.object) {
        (Some(x), Some(z)) => Some(bce_loss(*x, z)?),
        _ => None,
    };
    let li = bce_loss(out.interaction, &img.labels.interaction)?;
    let total = overall_loss(lh, lo, li)?;
    let rec = LossRecord {
        iteration: 0,
        human: lh.map_or(Ok(0.0), |l| l.item())?,
        object: lo.map_or(Ok(0.0), |l| l.item())?,
        interaction: li.item()?,
        total: total.item()?,
    };
    let grads = tape.backward(total)?;
    Ok((rec, grads))
}

/// Run `tc.iterations` SGD steps, one image per step, visiting the images
/// in a fresh seeded order every epoch. `on_step` sees each record as it is
/// produced.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    images: &[PreparedImage],
    tc: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if tc.iterations > 0 && images.is_empty() {
        return Err(Error::Input("no training image has a proposal".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut sgd = Sgd::new(tc.lr, tc.momentum, tc.weight_decay);
    let mut records = Vec::with_capacity(tc.iterations);
    for it in 0..tc.iterations {
        let pos = it % images.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let (mut rec, grads) = loss_and_grads(params, cfg, &images[order[pos]])?;
        rec.iteration = it + 1;
        if !rec.total.is_finite() {
            return Err(Error::Training {
                param: "overall_loss".into(),
                detail: format!("loss became {} at iteration {}", rec.total, it + 1),
            });
        }
        sgd.step(params, &grads)?;
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}
