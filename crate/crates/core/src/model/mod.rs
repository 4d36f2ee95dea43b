//! The three-branch interaction network: backbone, human/object branches
//! with GID reasoning, the spatial-map interaction branch, losses, fusion,
//! training and checkpoints.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{bce_loss, fuse_scores, overall_loss};
pub use train::{
    build_labels, loss_and_grads, prepare_image, train, BranchLabels, LossRecord, PreparedImage, Sgd,
    TrainConfig,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::data::{BBox, HoiTriplet, ImageRecord, PairProposal, VerbTable};
use crate::error::{Error, Result};
use crate::gid::{gid_context, gid_instance, GidMode, GidParams, GlobalContext};
use crate::nn::{concat, conv2d, global_avg_pool, linear, roi_pool, Conv2dParams, LinearParams, Parameters};
use crate::tensor::Tensor;

/// How the reasoned feature joins the appearance feature in the human and
/// object branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Concat,
    Add,
    Multiply,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Concat, FusionMode::Add, FusionMode::Multiply];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::Multiply => "multiply",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}` (expected concat, add or multiply)")))
    }
}

/// Which of the three branches take part in training and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub human: bool,
    pub object: bool,
    pub interaction: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches {
            human: true,
            object: true,
            interaction: true,
        }
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.human, "human"),
            (self.object, "object"),
            (self.interaction, "interaction"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Branches {
    type Err = Error;

    /// Comma-separated subset of `human`, `object`, `interaction` (or
    /// `h`, `o`, `i`).
    fn from_str(s: &str) -> Result<Self> {
        let mut b = Branches {
            human: false,
            object: false,
            interaction: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "human" | "h" => &mut b.human,
                "object" | "o" => &mut b.object,
                "interaction" | "i" => &mut b.interaction,
                other => {
                    return Err(Error::Config(format!(
                        "unknown branch `{other}` (expected human, object or interaction)"
                    )))
                }
            };
            *slot = true;
        }
        if !b.interaction {
            return Err(Error::Config(
                "the interaction branch must be enabled; fused scores multiply by its output".into(),
            ));
        }
        Ok(b)
    }
}

/// Architecture and ablation settings. Everything a checkpoint needs to
/// rebuild the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_verbs: usize,
    pub image_size: usize,
    /// Depth of the stride-4 shared map.
    pub channels: usize,
    /// Depth of the appearance features.
    pub appearance_channels: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub roi_size: usize,
    pub spatial_grid: usize,
    pub spatial_channels: usize,
    pub gid_mode: GidMode,
    pub fusion_mode: FusionMode,
    pub branches: Branches,
}

impl ModelConfig {
    pub fn new(num_verbs: usize, image_size: usize) -> Self {
        let channels = 16;
        ModelConfig {
            num_verbs,
            image_size,
            channels,
            appearance_channels: 16,
            embed_dim: channels / 2,
            hidden: 64,
            roi_size: 7,
            spatial_grid: 64,
            spatial_channels: 8,
            gid_mode: GidMode::Both,
            fusion_mode: FusionMode::Concat,
            branches: Branches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_verbs", self.num_verbs),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("appearance_channels", self.appearance_channels),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("roi_size", self.roi_size),
            ("spatial_channels", self.spatial_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 4",
                self.image_size
            )));
        }
        if self.channels % 2 != 0 {
            return Err(Error::Config(format!("channels {} must be even", self.channels)));
        }
        if self.spatial_grid == 0 || self.spatial_grid % SPATIAL_PATCH != 0 {
            return Err(Error::Config(format!(
                "spatial_grid {} must be a positive multiple of {SPATIAL_PATCH}",
                self.spatial_grid
            )));
        }
        if !self.branches.interaction {
            return Err(Error::Config("the interaction branch must be enabled".into()));
        }
        Ok(())
    }

    /// Input width of the human and object heads.
    pub fn instance_head_input(&self) -> usize {
        match (self.gid_mode, self.fusion_mode) {
            (GidMode::Off, _) => self.appearance_channels,
            (_, FusionMode::Concat) => self.appearance_channels + self.embed_dim,
            _ => self.embed_dim,
        }
    }

    pub fn interaction_head_input(&self) -> usize {
        self.spatial_channels + 2 * self.appearance_channels
    }
}

/// Two fully connected layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl Head {
    pub fn init(name: &str, input: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            fc1: LinearParams::init_relu(&format!("{name}.fc1"), input, hidden, rng),
            fc2: LinearParams::init(&format!("{name}.fc2"), hidden, out, rng),
        }
    }

    /// `x: [N, input]` to `[N, out]` logits.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        linear(linear(x, &self.fc1)?.relu(), &self.fc2)
    }
}

impl Parameters for Head {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Stand-in backbone: two stride-2 conv+relu layers to the shared map and a
/// further conv+relu used as the appearance stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub stage5: Conv2dParams,
}

impl Backbone {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let half = cfg.channels / 2;
        Ok(Backbone {
            conv1: Conv2dParams::init("backbone.conv1", 3, half, 4, 2, 1, rng),
            conv2: Conv2dParams::init("backbone.conv2", half, cfg.channels, 4, 2, 1, rng),
            stage5: Conv2dParams::same("backbone.stage5", cfg.channels, cfg.appearance_channels, 3, rng)?,
        })
    }

    /// `[3, H, W]` image to the `[C, H/4, W/4]` shared map.
    pub fn stage4<'t>(&self, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Input(format!("backbone expects a [3, H, W] image, got {s:?}")));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::Input(format!(
                "image size {}x{} is not divisible by 4",
                s[2], s[1]
            )));
        }
        let x = conv2d(image, &self.conv1)?.relu();
        Ok(conv2d(x, &self.conv2)?.relu())
    }

    /// Appearance vector `[C5]` of any `[C, h, w]` map.
    pub fn stage5<'t>(&self, map: Var<'t>) -> Result<Var<'t>> {
        global_avg_pool(conv2d(map, &self.stage5)?.relu())
    }
}

impl Parameters for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.stage5.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.stage5.visit_mut(f);
    }
}

/// Side of the non-overlapping patches the first spatial layer reads.
pub const SPATIAL_PATCH: usize = 8;

/// Two conv+relu layers and GAP over the two-channel spatial map. The first
/// layer embeds `SPATIAL_PATCH`-sized patches, the second spans the whole
/// patch grid, so the pooled feature sees the full layout of the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEncoder {
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
}

impl Parameters for SpatialEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

impl SpatialEncoder {
    pub fn forward<'t>(&self, map: Var<'t>) -> Result<Var<'t>> {
        let x = conv2d(map, &self.conv1)?.relu();
        global_avg_pool(conv2d(x, &self.conv2)?.relu())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Backbone,
    pub gid_human: GidParams,
    pub gid_object: GidParams,
    pub human_head: Head,
    pub object_head: Head,
    pub spatial: SpatialEncoder,
    pub interaction_head: Head,
}

impl ModelParams {
    /// Deterministic initialization from `seed`. Every parameter is created
    /// regardless of the ablation switches, in a fixed order, so runs that
    /// differ only in switches share their initial weights where shapes
    /// agree.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(cfg, &mut rng)?;
        let gid = |name: &str, rng: &mut ChaCha8Rng| {
            GidParams::init(name, cfg.channels, cfg.appearance_channels, cfg.embed_dim, rng)
        };
        let gid_human = gid("gid_human", &mut rng);
        let gid_object = gid("gid_object", &mut rng);
        let spatial = SpatialEncoder {
            conv1: Conv2dParams::init("spatial.conv1", 2, cfg.spatial_channels, SPATIAL_PATCH, SPATIAL_PATCH, 0, &mut rng),
            conv2: Conv2dParams::init("spatial.conv2", cfg.spatial_channels, cfg.spatial_channels, cfg.spatial_grid / SPATIAL_PATCH, 1, 0, &mut rng),
        };
        let inst = cfg.instance_head_input();
        Ok(ModelParams {
            backbone,
            gid_human,
            gid_object,
            human_head: Head::init("human_head", inst, cfg.hidden, cfg.num_verbs, &mut rng),
            object_head: Head::init("object_head", inst, cfg.hidden, cfg.num_verbs, &mut rng),
            spatial,
            interaction_head: Head::init(
                "interaction_head",
                cfg.interaction_head_input(),
                cfg.hidden,
                cfg.num_verbs,
                &mut rng,
            ),
        })
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.value.all_finite());
        ok
    }
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit(f);
        self.gid_human.visit(f);
        self.gid_object.visit(f);
        self.human_head.visit(f);
        self.object_head.visit(f);
        self.spatial.visit(f);
        self.interaction_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.gid_human.visit_mut(f);
        self.gid_object.visit_mut(f);
        self.human_head.visit_mut(f);
        self.object_head.visit_mut(f);
        self.spatial.visit_mut(f);
        self.interaction_head.visit_mut(f);
    }
}

/// Two-plane binary map on a `grid` of `(rows, cols)` cells: a cell is 1 in
/// plane 0 (1) when its centre lies inside the human (object) box scaled to
/// the grid. An absent object leaves plane 1 empty.
pub fn encode_spatial_map(
    human: &BBox,
    object: Option<&BBox>,
    grid: (usize, usize),
    image_size: (usize, usize),
) -> Result<Tensor> {
    check_map_inputs(human, object, grid, image_size)?;
    let (height, width) = image_size;
    Ok(rasterize(human, object, grid, &BBox::whole_image(width, height)))
}

/// The spatial map of a pair drawn in the pair's own reference frame: the
/// union of the two boxes (the human box alone when there is no object)
/// is stretched over the grid.
pub fn encode_pair_map(
    human: &BBox,
    object: Option<&BBox>,
    grid: (usize, usize),
    image_size: (usize, usize),
) -> Result<Tensor> {
    check_map_inputs(human, object, grid, image_size)?;
    let frame = match object {
        Some(o) => BBox {
            x1: human.x1.min(o.x1),
            y1: human.y1.min(o.y1),
            x2: human.x2.max(o.x2),
            y2: human.y2.max(o.y2),
        },
        None => *human,
    };
    Ok(rasterize(human, object, grid, &frame))
}

fn check_map_inputs(human: &BBox, object: Option<&BBox>, grid: (usize, usize), image_size: (usize, usize)) -> Result<()> {
    let (height, width) = image_size;
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Input("spatial map grid must be positive".into()));
    }
    for b in std::iter::once(human).chain(object) {
        BBox::new(b.x1, b.y1, b.x2, b.y2)?;
        if !b.is_within(width, height) {
            return Err(Error::Input(format!(
                "box {:?} lies outside the {width}x{height} image",
                <[f64; 4]>::from(*b)
            )));
        }
    }
    Ok(())
}

fn rasterize(human: &BBox, object: Option<&BBox>, grid: (usize, usize), frame: &BBox) -> Tensor {
    let (rows, cols) = grid;
    let mut data = vec![0.0; 2 * rows * cols];
    let sy = frame.height() / rows as f64;
    let sx = frame.width() / cols as f64;
    for (plane, b) in [(0, Some(human)), (1, object)] {
        let Some(b) = b else { continue };
        for r in 0..rows {
            let cy = frame.y1 + (r as f64 + 0.5) * sy;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            for c in 0..cols {
                let cx = frame.x1 + (c as f64 + 0.5) * sx;
                if cx >= b.x1 && cx < b.x2 {
                    data[(plane * rows + r) * cols + c] = 1.0;
                }
            }
        }
    }
    Tensor::new([2, rows, cols], data).expect("map buffer matches grid")
}

/// Per-image shared computation: the stride-4 map, the whole-image
/// appearance feature and stage one of both GID blocks.
#[derive(Debug, Clone, Copy)]
pub struct SceneFeatures<'t> {
    pub shared: Var<'t>,
    pub f_global: Var<'t>,
    pub human_ctx: Option<GlobalContext<'t>>,
    pub object_ctx: Option<GlobalContext<'t>>,
}

/// One instance (human or object) as seen by its branch.
#[derive(Debug, Clone, Copy)]
pub struct InstanceFeatures<'t> {
    pub appearance: Var<'t>,
    pub logits: Var<'t>,
    /// `[h*w]` stage-two weights, when the GID block ran.
    pub stage2_weights: Option<Var<'t>>,
}

pub fn scene_features<'t>(
    image: Var<'t>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<SceneFeatures<'t>> {
    let shared = params.backbone.stage4(image)?;
    let f_global = params.backbone.stage5(shared)?;
    let human_ctx = if cfg.branches.human {
        gid_context(shared, f_global, &params.gid_human, cfg.gid_mode)?
    } else {
        None
    };
    let object_ctx = if cfg.branches.object {
        gid_context(shared, f_global, &params.gid_object, cfg.gid_mode)?
    } else {
        None
    };
    Ok(SceneFeatures {
        shared,
        f_global,
        human_ctx,
        object_ctx,
    })
}

/// ROI pool + appearance stage for one box.
pub fn instance_appearance<'t>(scene: &SceneFeatures<'t>, b: &BBox, params: &ModelParams, cfg: &ModelConfig) -> Result<Var<'t>> {
    let crop = roi_pool(
        scene.shared,
        b,
        (cfg.image_size, cfg.image_size),
        (cfg.roi_size, cfg.roi_size),
    )?;
    params.backbone.stage5(crop)
}

/// Fuse appearance with the reasoned feature and classify.
fn instance_branch<'t>(
    appearance: Var<'t>,
    ctx: Option<&GlobalContext<'t>>,
    gid: &GidParams,
    head: &Head,
    cfg: &ModelConfig,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let c5 = appearance.len();
    let (feature, w2) = match ctx {
        None => (appearance, None),
        Some(ctx) => {
            let out = gid_instance(ctx, appearance, gid, cfg.gid_mode)?;
            let fused = match cfg.fusion_mode {
                FusionMode::Concat => concat(&[appearance, out.reasoned], 0)?,
                FusionMode::Add | FusionMode::Multiply => {
                    let e = gid.embed_dim();
                    let q = linear(appearance.reshape([1, c5])?, &gid.instance_query)?.reshape([e])?;
                    if cfg.fusion_mode == FusionMode::Add {
                        q.add(out.reasoned)?
                    } else {
                        q.mul(out.reasoned)?
                    }
                }
            };
            (fused, Some(out.stage2_weights))
        }
    };
    let n = feature.len();
    let logits = head.forward(feature.reshape([1, n])?)?.reshape([cfg.num_verbs])?;
    Ok((logits, w2))
}

pub fn human_branch<'t>(
    scene: &SceneFeatures<'t>,
    b_h: &BBox,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<InstanceFeatures<'t>> {
    let appearance = instance_appearance(scene, b_h, params, cfg)?;
    let (logits, stage2_weights) = instance_branch(
        appearance,
        scene.human_ctx.as_ref(),
        &params.gid_human,
        &params.human_head,
        cfg,
    )?;
    Ok(InstanceFeatures {
        appearance,
        logits,
        stage2_weights,
    })
}

pub fn object_branch<'t>(
    scene: &SceneFeatures<'t>,
    b_o: &BBox,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<InstanceFeatures<'t>> {
    let appearance = instance_appearance(scene, b_o, params, cfg)?;
    let (logits, stage2_weights) = instance_branch(
        appearance,
        scene.object_ctx.as_ref(),
        &params.gid_object,
        &params.object_head,
        cfg,
    )?;
    Ok(InstanceFeatures {
        appearance,
        logits,
        stage2_weights,
    })
}

/// Spatial-map feature concatenated with the global and human appearance
/// features. The object appearance is deliberately not used.
pub fn interaction_branch<'t>(
    b_h: &BBox,
    b_o: Option<&BBox>,
    f_global: Var<'t>,
    f_human: Var<'t>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    let tape = f_global.tape();
    let grid = (cfg.spatial_grid, cfg.spatial_grid);
    let map = encode_pair_map(b_h, b_o, grid, (cfg.image_size, cfg.image_size))?;
    let f_sp = params.spatial.forward(tape.constant(map))?;
    let x = concat(&[f_sp, f_global, f_human], 0)?;
    let n = x.len();
    params.interaction_head.forward(x.reshape([1, n])?)?.reshape([cfg.num_verbs])
}

/// Logits of every enabled branch for every proposal of one image.
#[derive(Debug, Clone)]
pub struct ImageLogits<'t> {
    pub scene: SceneFeatures<'t>,
    /// `[N, I]`, one row per proposal.
    pub human: Option<Var<'t>>,
    /// `[No, I]` over proposals that carry an object.
    pub object: Option<Var<'t>>,
    /// Proposal index of each object row.
    pub object_rows: Vec<usize>,
    /// `[N, I]`
    pub interaction: Var<'t>,
    /// Stage-two human weights per proposal, when the human GID ran.
    pub human_stage2: Vec<Option<Var<'t>>>,
    /// Stage-two object weights per proposal with an object.
    pub object_stage2: Vec<Option<Var<'t>>>,
}

fn stack<'t>(rows: &[Var<'t>], width: usize) -> Result<Var<'t>> {
    let rows: Vec<Var> = rows
        .iter()
        .map(|r| r.reshape([1, width]))
        .collect::<Result<_>>()?;
    concat(&rows, 0)
}

/// Forward every proposal of one image. Instances shared across proposals
/// are computed once.
pub fn forward_image<'t>(
    tape: &'t Tape,
    image: &Tensor,
    proposals: &[PairProposal],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ImageLogits<'t>> {
    if proposals.is_empty() {
        return Err(Error::Contract("forward_image needs at least one proposal".into()));
    }
    let s = image.shape();
    if s != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Input(format!(
            "image of shape {s:?} does not match the configured size {}",
            cfg.image_size
        )));
    }
    let scene = scene_features(tape.constant(image.clone()), params, cfg)?;

    let mut humans: Vec<(BBox, InstanceFeatures)> = Vec::new();
    let mut objects: Vec<(BBox, InstanceFeatures)> = Vec::new();
    let lookup = |list: &mut Vec<(BBox, InstanceFeatures<'t>)>, b: &BBox, human: bool| -> Result<InstanceFeatures<'t>> {
        if let Some((_, f)) = list.iter().find(|(k, _)| k == b) {
            return Ok(*f);
        }
        let f = match (human, cfg.branches.human) {
            (true, true) => human_branch(&scene, b, params, cfg)?,
            // the interaction branch still needs the human appearance
            (true, false) => {
                let appearance = instance_appearance(&scene, b, params, cfg)?;
                InstanceFeatures {
                    appearance,
                    logits: appearance,
                    stage2_weights: None,
                }
            }
            (false, _) => object_branch(&scene, b, params, cfg)?,
        };
        list.push((*b, f));
        Ok(f)
    };

    let mut human_rows = Vec::new();
    let mut human_stage2 = Vec::new();
    let mut object_rows = Vec::new();
    let mut object_logits = Vec::new();
    let mut object_stage2 = Vec::new();
    let mut inter_rows = Vec::new();
    for (k, p) in proposals.iter().enumerate() {
        let h = lookup(&mut humans, &p.human.bbox, true)?;
        if cfg.branches.human {
            human_rows.push(h.logits);
            human_stage2.push(h.stage2_weights);
        }
        if let (Some(o), true) = (&p.object, cfg.branches.object) {
            let of = lookup(&mut objects, &o.bbox, false)?;
            object_rows.push(k);
            object_logits.push(of.logits);
            object_stage2.push(of.stage2_weights);
        }
        inter_rows.push(interaction_branch(
            &p.human.bbox,
            p.object.as_ref().map(|o| &o.bbox),
            scene.f_global,
            h.appearance,
            params,
            cfg,
        )?);
    }
    let i = cfg.num_verbs;
    Ok(ImageLogits {
        scene,
        human: if cfg.branches.human { Some(stack(&human_rows, i)?) } else { None },
        object: if object_logits.is_empty() { None } else { Some(stack(&object_logits, i)?) },
        object_rows,
        interaction: stack(&inter_rows, i)?,
        human_stage2,
        object_stage2,
    })
}

fn sigmoid_rows(x: &Var<'_>, i: usize) -> Vec<Vec<f64>> {
    x.sigmoid().data().chunks(i).map(|c| c.to_vec()).collect()
}

/// Per-proposal branch scores after the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalScores {
    pub human: Option<Vec<f64>>,
    pub object: Option<Vec<f64>>,
    pub interaction: Vec<f64>,
}

impl ImageLogits<'_> {
    pub fn scores(&self, num_verbs: usize) -> Vec<ProposalScores> {
        let human = self.human.as_ref().map(|h| sigmoid_rows(h, num_verbs));
        let object = self.object.as_ref().map(|o| sigmoid_rows(o, num_verbs));
        let inter = sigmoid_rows(&self.interaction, num_verbs);
        inter
            .into_iter()
            .enumerate()
            .map(|(k, interaction)| ProposalScores {
                human: human.as_ref().map(|h| h[k].clone()),
                object: object.as_ref().and_then(|o| {
                    self.object_rows.iter().position(|&r| r == k).map(|j| o[j].clone())
                }),
                interaction,
            })
            .collect()
    }
}

/// Fused triplets for every proposal and every verb of the matching kind:
/// verbs needing an object for pairs, object-less verbs otherwise.
pub fn triplets_from_scores(
    proposals: &[PairProposal],
    scores: &[ProposalScores],
    verbs: &VerbTable,
) -> Vec<HoiTriplet> {
    let mut out = Vec::new();
    for (p, s) in proposals.iter().zip(scores) {
        let fused = fuse_scores(s.human.as_deref(), s.object.as_deref(), &s.interaction);
        for (v, &score) in fused.iter().enumerate() {
            if verbs.requires_object(v) == p.object.is_some() {
                out.push(HoiTriplet {
                    human: p.human.bbox,
                    object: p.object.as_ref().map(|o| o.bbox),
                    verb: v,
                    score,
                });
            }
        }
    }
    out
}

/// Attention weights of one instance, for export.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub role: &'static str,
    pub bbox: BBox,
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
}

/// Everything inference produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub triplets: Vec<HoiTriplet>,
    /// `(h, w)` of the shared map the attention weights live on.
    pub map_size: (usize, usize),
    pub attention: Vec<AttentionRecord>,
}

pub fn predict_image(
    record: &ImageRecord,
    verbs: &VerbTable,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ImagePrediction> {
    let proposals = crate::data::propose_pairs(&record.detections);
    let cells = cfg.image_size / 4;
    if proposals.is_empty() {
        return Ok(ImagePrediction {
            triplets: Vec::new(),
            map_size: (cells, cells),
            attention: Vec::new(),
        });
    }
    let tape = Tape::inference();
    let out = forward_image(&tape, &record.to_tensor(), &proposals, params, cfg)?;
    let scores = out.scores(cfg.num_verbs);
    let triplets = triplets_from_scores(&proposals, &scores, verbs);

    let mut attention: Vec<AttentionRecord> = Vec::new();
    let mut push = |role: &'static str, bbox: BBox, ctx: Option<&GlobalContext>, w2: Option<&Var>| {
        if let (Some(ctx), Some(w2)) = (ctx, w2) {
            if !attention.iter().any(|a| a.role == role && a.bbox == bbox) {
                attention.push(AttentionRecord {
                    role,
                    bbox,
                    stage1: ctx.weights.data(),
                    stage2: w2.data(),
                });
            }
        }
    };
    for (k, p) in proposals.iter().enumerate() {
        if let Some(w2) = out.human_stage2.get(k).and_then(|w| w.as_ref()) {
            push("human", p.human.bbox, out.scene.human_ctx.as_ref(), Some(w2));
        }
    }
    for (j, &k) in out.object_rows.iter().enumerate() {
        let b = proposals[k].object.as_ref().expect("object row").bbox;
        push("object", b, out.scene.object_ctx.as_ref(), out.object_stage2[j].as_ref());
    }
    let map = out.scene.shared.shape();
    Ok(ImagePrediction {
        triplets,
        map_size: (map[1], map[2]),
        attention,
    })
}
