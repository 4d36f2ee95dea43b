//! Global-to-instance dependency reasoning.
//!
//! Stage one attends from a whole-image query over every cell of the shared
//! feature map and returns the map modulated by its attention weights. Stage
//! two attends from an instance query over that modulated map and pools it
//! into one feature vector per instance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, linear, LinearParams, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GidMode {
    #[default]
    Both,
    GlobalOnly,
    InstanceOnly,
    Off,
}

impl GidMode {
    pub const ALL: [GidMode; 4] = [
        GidMode::Both,
        GidMode::GlobalOnly,
        GidMode::InstanceOnly,
        GidMode::Off,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GidMode::Both => "both",
            GidMode::GlobalOnly => "global_only",
            GidMode::InstanceOnly => "instance_only",
            GidMode::Off => "off",
        }
    }
}

impl fmt::Display for GidMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GidMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GidMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gid mode `{s}` (expected both, global_only, instance_only or off)"
                ))
            })
    }
}

/// Embedded-Gaussian attention: `softmax(θᵀ W_θᵀ W_φ φ) · (W_g g)`.
///
/// `w_phi` and `w_g` are 1×1 convolutions, applied here as per-position
/// linear maps over position-major `[n, d]` keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[embed, query_dim]`
    pub w_theta: Param,
    pub w_phi: LinearParams,
    pub w_g: LinearParams,
}

impl AttentionParams {
    pub fn init(name: &str, query_dim: usize, key_dim: usize, embed: usize, rng: &mut impl Rng) -> Self {
        let w_theta = LinearParams::init(&format!("{name}.w_theta"), query_dim, embed, rng).weight;
        AttentionParams {
            w_theta,
            w_phi: LinearParams::init(&format!("{name}.w_phi"), key_dim, embed, rng),
            w_g: LinearParams::init(&format!("{name}.w_g"), key_dim, embed, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_theta.value.shape()[0]
    }
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w_theta);
        self.w_phi.visit(f);
        self.w_g.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_theta);
        self.w_phi.visit_mut(f);
        self.w_g.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GidParams {
    /// Projects the whole-image appearance feature to the stage-one query.
    pub global_query: LinearParams,
    pub global: AttentionParams,
    /// Projects an instance appearance feature to the stage-two query.
    pub instance_query: LinearParams,
    pub instance: AttentionParams,
}

impl GidParams {
    /// `map_channels` is the shared map depth, `appearance_dim` the pooled
    /// appearance feature size and `embed` the attention width.
    pub fn init(name: &str, map_channels: usize, appearance_dim: usize, embed: usize, rng: &mut impl Rng) -> Self {
        GidParams {
            global_query: LinearParams::init(&format!("{name}.global_query"), appearance_dim, embed, rng),
            global: AttentionParams::init(&format!("{name}.global"), embed, map_channels, embed, rng),
            instance_query: LinearParams::init(&format!("{name}.instance_query"), appearance_dim, embed, rng),
            instance: AttentionParams::init(&format!("{name}.instance"), embed, embed, embed, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.global.embed_dim()
    }
}

impl Parameters for GidParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.global_query.visit(f);
        self.global.visit(f);
        self.instance_query.visit(f);
        self.instance.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.global_query.visit_mut(f);
        self.global.visit_mut(f);
        self.instance_query.visit_mut(f);
        self.instance.visit_mut(f);
    }
}

/// Attention logits `[1, n]` of `query: [dq]` against `keys: [n, dk]`.
fn logits<'t>(query: Var<'t>, keys: Var<'t>, p: &AttentionParams) -> Result<Var<'t>> {
    let tape = query.tape();
    let dq = query.len();
    let w_theta = tape.param(&p.w_theta);
    let q = query.reshape([1, dq])?.matmul(w_theta.t()?)?;
    let phi = linear(keys, &p.w_phi)?;
    q.matmul(phi.t()?)
}

/// Attention-weighted pooling of `values: [n, dv]` under `query: [dq]`
/// against `keys: [n, dk]`. Returns the pooled `[embed]` vector and the
/// `[n]` attention weights.
pub fn attention_pool<'t>(
    query: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    p: &AttentionParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let (ks, vs) = (keys.shape(), values.shape());
    if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::dim("attention_pool", &ks, &vs));
    }
    let n = ks[0];
    let weights = logits(query, keys, p)?.softmax(1)?;
    let g = linear(values, &p.w_g)?;
    let pooled = weights.matmul(g)?.reshape([p.embed_dim()])?;
    Ok((pooled, weights.reshape([n])?))
}

/// Stage-one output: the attention-modulated map `[embed, h, w]` and the
/// `[h*w]` weights over the shared map.
#[derive(Debug, Clone, Copy)]
pub struct GlobalContext<'t> {
    pub map: Var<'t>,
    pub weights: Var<'t>,
}

fn position_major(map: Var<'_>) -> Result<(Var<'_>, usize, usize, usize)> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::dim("gid feature map", &s, &[3]));
    }
    let n = s[1] * s[2];
    Ok((map.reshape([s[0], n])?.t()?, s[0], s[1], s[2]))
}

/// Stage one over `shared_map: [C, h, w]` with the whole-image appearance
/// feature `f_global: [C5]` as query. Each embedded value column `G_j` is
/// scaled by `a_j · n`, so uniform attention returns `G` unchanged.
pub fn global_dependency<'t>(shared_map: Var<'t>, f_global: Var<'t>, p: &GidParams) -> Result<GlobalContext<'t>> {
    let (keys, _, h, w) = position_major(shared_map)?;
    let n = h * w;
    let e = p.embed_dim();
    let query = linear(f_global.reshape([1, f_global.len()])?, &p.global_query)?.reshape([e])?;
    let scaled = logits(query, keys, &p.global)?.softmax_scaled(1, n as f64)?;
    let g = linear(keys, &p.global.w_g)?.t()?;
    let map = g.mul(scaled.reshape([n])?)?.reshape([e, h, w])?;
    Ok(GlobalContext {
        map,
        weights: scaled.reshape([n])?.scale(1.0 / n as f64),
    })
}

/// Stage one with attention replaced by uniform weights.
fn uniform_global<'t>(shared_map: Var<'t>, p: &GidParams) -> Result<GlobalContext<'t>> {
    let (keys, _, h, w) = position_major(shared_map)?;
    let n = h * w;
    let e = p.embed_dim();
    let map = linear(keys, &p.global.w_g)?.t()?.reshape([e, h, w])?;
    let weights = shared_map.tape().constant(Tensor::full([n], 1.0 / n as f64));
    Ok(GlobalContext { map, weights })
}

/// Stage two: pool the stage-one map under the instance query derived from
/// `f_instance: [C5]`. Returns `f_att: [embed]` and the `[h*w]` weights.
pub fn instance_dependency<'t>(
    stage1_map: Var<'t>,
    f_instance: Var<'t>,
    p: &GidParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let (cells, ..) = position_major(stage1_map)?;
    let e = p.embed_dim();
    let query = linear(f_instance.reshape([1, f_instance.len()])?, &p.instance_query)?.reshape([e])?;
    attention_pool(query, cells, cells, &p.instance)
}

/// Everything one instance's GID pass produces.
#[derive(Debug, Clone, Copy)]
pub struct GidOutput<'t> {
    /// `f_att: [embed]`
    pub reasoned: Var<'t>,
    /// `[embed, h, w]`
    pub stage1_map: Var<'t>,
    /// `[h*w]`
    pub stage1_weights: Var<'t>,
    /// `[h*w]`
    pub stage2_weights: Var<'t>,
}

/// Stage one for an image, shared by all of its instances. `None` when the
/// block is off.
pub fn gid_context<'t>(
    shared_map: Var<'t>,
    f_global: Var<'t>,
    p: &GidParams,
    mode: GidMode,
) -> Result<Option<GlobalContext<'t>>> {
    match mode {
        GidMode::Off => Ok(None),
        GidMode::InstanceOnly => uniform_global(shared_map, p).map(Some),
        GidMode::Both | GidMode::GlobalOnly => global_dependency(shared_map, f_global, p).map(Some),
    }
}

/// Stage two for one instance on top of a precomputed [`GlobalContext`].
/// Without the instance stage the reasoned feature is the spatial mean of
/// the stage-one map.
pub fn gid_instance<'t>(
    ctx: &GlobalContext<'t>,
    f_instance: Var<'t>,
    p: &GidParams,
    mode: GidMode,
) -> Result<GidOutput<'t>> {
    let (reasoned, stage2_weights) = match mode {
        GidMode::Off => {
            return Err(Error::Contract("gid_instance called with the block off".into()));
        }
        GidMode::GlobalOnly => {
            let n = ctx.weights.len();
            let uniform = ctx.map.tape().constant(Tensor::full([n], 1.0 / n as f64));
            (global_avg_pool(ctx.map)?, uniform)
        }
        GidMode::Both | GidMode::InstanceOnly => instance_dependency(ctx.map, f_instance, p)?,
    };
    Ok(GidOutput {
        reasoned,
        stage1_map: ctx.map,
        stage1_weights: ctx.weights,
        stage2_weights,
    })
}

/// Both stages for a single instance.
pub fn gid_forward<'t>(
    shared_map: Var<'t>,
    f_global: Var<'t>,
    f_instance: Var<'t>,
    p: &GidParams,
    mode: GidMode,
) -> Result<Option<GidOutput<'t>>> {
    match gid_context(shared_map, f_global, p, mode)? {
        None => Ok(None),
        Some(ctx) => gid_instance(&ctx, f_instance, p, mode).map(Some),
    }
}

/// Inference-only convenience: run both stages on plain tensors.
pub fn gid_forward_tensors(
    shared_map: &Tensor,
    f_global: &Tensor,
    f_instance: &Tensor,
    p: &GidParams,
    mode: GidMode,
) -> Result<Option<(Tensor, Tensor, Tensor, Tensor)>> {
    let tape = Tape::inference();
    let out = gid_forward(
        tape.constant(shared_map.clone()),
        tape.constant(f_global.clone()),
        tape.constant(f_instance.clone()),
        p,
        mode,
    )?;
    Ok(out.map(|o| {
        (
            o.reasoned.value(),
            o.stage1_map.value(),
            o.stage1_weights.value(),
            o.stage2_weights.value(),
        )
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::rel_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..rows)
            .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
            .collect()
    }

    fn affine(p: &LinearParams, x: &[f64]) -> Vec<f64> {
        matvec(&p.weight.value, x)
            .into_iter()
            .zip(p.bias.value.data())
            .map(|(a, b)| a + b)
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Loop-by-loop attention over rows of `keys` / `values`.
    fn naive_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], p: &AttentionParams) -> (Vec<f64>, Vec<f64>) {
        let tq = matvec(&p.w_theta.value, q);
        let logits: Vec<f64> = keys.iter().map(|k| dot(&tq, &affine(&p.w_phi, k))).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut pooled = vec![0.0; p.embed_dim()];
        for (aj, v) in a.iter().zip(values) {
            for (o, g) in pooled.iter_mut().zip(affine(&p.w_g, v)) {
                *o += aj * g;
            }
        }
        (pooled, a)
    }

    /// Rows of a `[C, h, w]` map, one per spatial position.
    fn positions(map: &Tensor) -> Vec<Vec<f64>> {
        let s = map.shape();
        let n = s[1] * s[2];
        (0..n)
            .map(|j| (0..s[0]).map(|c| map.data()[c * n + j]).collect())
            .collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn mode_parsing() {
        for m in GidMode::ALL {
            assert_eq!(m.as_str().parse::<GidMode>().unwrap(), m);
        }
        assert!(matches!("sideways".parse::<GidMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_pools_its_embedded_value() {
        let mut r = rng(1);
        let p = AttentionParams::init("a", 4, 3, 5, &mut r);
        let (q, k, v) = (random(&mut r, &[4]), random(&mut r, &[1, 3]), random(&mut r, &[1, 3]));
        let tape = Tape::inference();
        let (pooled, w) = attention_pool(tape.constant(q), tape.constant(k), tape.constant(v.clone()), &p).unwrap();
        assert_eq!(w.data(), vec![1.0]);
        assert!(max_diff(&pooled.data(), &affine(&p.w_g, v.data())) < 1e-12);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut r = rng(2);
        let p = AttentionParams::init("a", 4, 3, 5, &mut r);
        let row = random(&mut r, &[3]);
        let keys = Tensor::new([4, 3], row.data().repeat(4)).unwrap();
        let tape = Tape::inference();
        let q = tape.constant(random(&mut r, &[4]));
        let (_, w) = attention_pool(q, tape.constant(keys.clone()), tape.constant(keys), &p).unwrap();
        assert!(max_diff(&w.data(), &[0.25; 4]) < 1e-12);
    }

    #[test]
    fn attention_pool_matches_loops() {
        let mut r = rng(3);
        let p = AttentionParams::init("a", 6, 3, 4, &mut r);
        let (q, k, v) = (random(&mut r, &[6]), random(&mut r, &[4, 3]), random(&mut r, &[4, 3]));
        let rows = |t: &Tensor| t.data().chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let (want_pooled, want_w) = naive_attention(q.data(), &rows(&k), &rows(&v), &p);
        let tape = Tape::inference();
        let (pooled, w) = attention_pool(tape.constant(q), tape.constant(k), tape.constant(v), &p).unwrap();
        assert!(max_diff(&pooled.data(), &want_pooled) < 1e-12);
        assert!(max_diff(&w.data(), &want_w) < 1e-12);
    }

    #[test]
    fn global_dependency_matches_loops() {
        let mut r = rng(4);
        let p = GidParams::init("gid", 5, 7, 4, &mut r);
        let map = random(&mut r, &[5, 3, 3]);
        let fg = random(&mut r, &[7]);
        let q = affine(&p.global_query, fg.data());
        let keys = positions(&map);
        let (_, a) = naive_attention(&q, &keys, &keys, &p.global);
        let tape = Tape::inference();
        let ctx = global_dependency(tape.constant(map), tape.constant(fg), &p).unwrap();
        assert!(max_diff(&ctx.weights.data(), &a) < 1e-10);
        let got = ctx.map.value();
        assert_eq!(got.shape(), &[4, 3, 3]);
        for (j, k) in keys.iter().enumerate() {
            let g = affine(&p.global.w_g, k);
            for (c, gc) in g.iter().enumerate() {
                let want = a[j] * 9.0 * gc;
                assert!((got.data()[c * 9 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_global_attention_returns_embedded_map_exactly() {
        let mut r = rng(5);
        let mut p = GidParams::init("gid", 5, 7, 4, &mut r);
        p.global.w_phi.weight.value = Tensor::zeros([4, 5]);
        // 7x7: (1/49)*49 is not 1 in floating point
        let map = random(&mut r, &[5, 7, 7]);
        let tape = Tape::inference();
        let ctx = global_dependency(tape.constant(map.clone()), tape.constant(random(&mut r, &[7])), &p).unwrap();
        let got = ctx.map.value();
        for (j, k) in positions(&map).iter().enumerate() {
            let g = affine(&p.global.w_g, k);
            for (c, gc) in g.iter().enumerate() {
                assert_eq!(got.data()[c * 49 + j], *gc);
            }
        }
    }

    #[test]
    fn dominant_logit_takes_almost_all_weight() {
        let mut p = GidParams::init("gid", 2, 2, 2, &mut rng(6));
        p.global_query.weight.value = Tensor::zeros([2, 2]);
        p.global_query.bias.value = Tensor::from_vec(vec![1.0, 1.0]);
        p.global.w_theta.value = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.global.w_phi.weight.value = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        p.global.w_phi.bias.value = Tensor::zeros([2]);
        let mut map = Tensor::zeros([2, 2, 2]);
        map.data_mut()[0] = 20.0;
        let tape = Tape::inference();
        let ctx = global_dependency(tape.constant(map), tape.constant(Tensor::zeros([2])), &p).unwrap();
        assert!(ctx.weights.data()[0] >= 1.0 - 1e-8);
    }

    #[test]
    fn single_cell_instance_dependency_is_affine() {
        let mut r = rng(7);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let m = random(&mut r, &[4, 1, 1]);
        let tape = Tape::inference();
        let (f, w) = instance_dependency(tape.constant(m.clone()), tape.constant(random(&mut r, &[5])), &p).unwrap();
        assert_eq!(w.data(), vec![1.0]);
        assert!(max_diff(&f.data(), &affine(&p.instance.w_g, m.data())) < 1e-12);
    }

    #[test]
    fn constant_map_gives_uniform_instance_weights() {
        let mut r = rng(8);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let mut data = Vec::new();
        for c in 0..4 {
            data.extend(std::iter::repeat(c as f64 * 0.3 - 0.5).take(6));
        }
        let m = Tensor::new([4, 2, 3], data).unwrap();
        let tape = Tape::inference();
        let (_, w) = instance_dependency(tape.constant(m), tape.constant(random(&mut r, &[5])), &p).unwrap();
        assert!(max_diff(&w.data(), &[1.0 / 6.0; 6]) < 1e-12);
    }

    #[test]
    fn instance_dependency_matches_loops() {
        let mut r = rng(9);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let m = random(&mut r, &[4, 3, 2]);
        let fi = random(&mut r, &[5]);
        let cells = positions(&m);
        let (want_f, want_w) = naive_attention(&affine(&p.instance_query, fi.data()), &cells, &cells, &p.instance);
        let tape = Tape::inference();
        let (f, w) = instance_dependency(tape.constant(m), tape.constant(fi), &p).unwrap();
        assert!(max_diff(&f.data(), &want_f) < 1e-10);
        assert!(max_diff(&w.data(), &want_w) < 1e-10);
    }

    #[test]
    fn one_by_one_map_reduces_to_chained_affine_maps() {
        let mut r = rng(10);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let x = random(&mut r, &[3, 1, 1]);
        let out = gid_forward_tensors(&x, &random(&mut r, &[5]), &random(&mut r, &[5]), &p, GidMode::Both)
            .unwrap()
            .unwrap();
        let want = affine(&p.instance.w_g, &affine(&p.global.w_g, x.data()));
        assert!(max_diff(out.0.data(), &want) < 1e-12);
        assert_eq!(out.2.data(), &[1.0]);
        assert_eq!(out.3.data(), &[1.0]);
    }

    #[test]
    fn both_mode_is_the_composition_of_the_stages() {
        let mut r = rng(11);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let (map, fg, fi) = (random(&mut r, &[3, 4, 4]), random(&mut r, &[5]), random(&mut r, &[5]));
        let tape = Tape::inference();
        let (m, g, i) = (tape.constant(map), tape.constant(fg), tape.constant(fi));
        let ctx = global_dependency(m, g, &p).unwrap();
        let (f, w2) = instance_dependency(ctx.map, i, &p).unwrap();
        let out = gid_forward(m, g, i, &p, GidMode::Both).unwrap().unwrap();
        assert_eq!(out.reasoned.data(), f.data());
        assert_eq!(out.stage1_map.data(), ctx.map.data());
        assert_eq!(out.stage2_weights.data(), w2.data());
    }

    #[test]
    fn ablation_modes() {
        let mut r = rng(12);
        let p = GidParams::init("gid", 3, 5, 4, &mut r);
        let (map, fg, fi) = (random(&mut r, &[3, 2, 2]), random(&mut r, &[5]), random(&mut r, &[5]));
        assert!(gid_forward_tensors(&map, &fg, &fi, &p, GidMode::Off).unwrap().is_none());

        let (f, m1, w1, w2) = gid_forward_tensors(&map, &fg, &fi, &p, GidMode::GlobalOnly).unwrap().unwrap();
        assert_eq!(w2.data(), &[0.25; 4]);
        let mean: Vec<f64> = m1.data().chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
        assert!(max_diff(f.data(), &mean) < 1e-12);
        assert!((w1.data().iter().sum::<f64>() - 1.0).abs() < 1e-10);

        let (_, m1, w1, _) = gid_forward_tensors(&map, &fg, &fi, &p, GidMode::InstanceOnly).unwrap().unwrap();
        assert_eq!(w1.data(), &[0.25; 4]);
        for (j, k) in positions(&map).iter().enumerate() {
            let g = affine(&p.global.w_g, k);
            for (c, gc) in g.iter().enumerate() {
                assert!((m1.data()[c * 4 + j] - gc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(13);
        let mut p = GidParams::init("gid", 3, 5, 4, &mut r);
        let (map, fg, fi) = (random(&mut r, &[3, 3, 3]), random(&mut r, &[5]), random(&mut r, &[5]));
        let target = random(&mut r, &[4]);
        let loss_of = |p: &GidParams, tape: &Tape| -> f64 {
            let out = gid_forward(
                tape.constant(map.clone()),
                tape.constant(fg.clone()),
                tape.constant(fi.clone()),
                p,
                GidMode::Both,
            )
            .unwrap()
            .unwrap();
            let t = tape.constant(target.clone());
            out.reasoned.mul(t).unwrap().sum().item().unwrap()
        };
        let tape = Tape::new();
        let out = gid_forward(
            tape.constant(map.clone()),
            tape.constant(fg.clone()),
            tape.constant(fi.clone()),
            &p,
            GidMode::Both,
        )
        .unwrap()
        .unwrap();
        let loss = out.reasoned.mul(tape.constant(target.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let mut names = Vec::new();
        p.visit(&mut |q| names.push((q.name.clone(), q.value.len())));
        let h = 1e-6;
        for (name, len) in names {
            let analytic = grads.param(&name).unwrap();
            let mut numeric = vec![0.0; len];
            for (i, num) in numeric.iter_mut().enumerate() {
                let shift = |p: &mut GidParams, delta: f64| {
                    p.visit_mut(&mut |q| {
                        if q.name == name {
                            q.value.data_mut()[i] += delta;
                        }
                    })
                };
                shift(&mut p, h);
                let plus = loss_of(&p, &Tape::inference());
                shift(&mut p, -2.0 * h);
                let minus = loss_of(&p, &Tape::inference());
                shift(&mut p, h);
                *num = (plus - minus) / (2.0 * h);
            }
            let scale = analytic.iter().chain(&numeric).map(|x| x.abs()).fold(0.0, f64::max);
            if scale < 1e-7 {
                // the stage-one phi bias only shifts every logit equally
                continue;
            }
            let err = rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    fn permute_positions(map: &Tensor, perm: &[usize]) -> Tensor {
        let s = map.shape();
        let n = s[1] * s[2];
        let mut out = map.clone();
        for c in 0..s[0] {
            for (j, &pj) in perm.iter().enumerate() {
                out.data_mut()[c * n + j] = map.data()[c * n + pj];
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn weights_are_distributions(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
            let mut r = rng(seed);
            let p = GidParams::init("gid", 3, 4, 3, &mut r);
            let map = random(&mut r, &[3, h, w]).reshape([3, h, w]).unwrap();
            let (_, _, w1, w2) = gid_forward_tensors(&map, &random(&mut r, &[4]), &random(&mut r, &[4]), &p, GidMode::Both)
                .unwrap().unwrap();
            for wt in [w1, w2] {
                prop_assert!((wt.data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
                prop_assert!(wt.data().iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn constant_logit_shift_is_invisible(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let mut r = rng(seed);
            let p = GidParams::init("gid", 3, 4, 3, &mut r);
            let (map, fg, fi) = (random(&mut r, &[3, 3, 2]), random(&mut r, &[4]), random(&mut r, &[4]));
            let base = gid_forward_tensors(&map, &fg, &fi, &p, GidMode::Both).unwrap().unwrap();
            // moving the phi bias by u adds (W_θ θ)·u to every logit of a stage
            let mut q = p.clone();
            for b in [&mut q.global.w_phi.bias, &mut q.instance.w_phi.bias] {
                for x in b.value.data_mut() {
                    *x += shift;
                }
            }
            let moved = gid_forward_tensors(&map, &fg, &fi, &q, GidMode::Both).unwrap().unwrap();
            prop_assert!(max_diff(base.0.data(), moved.0.data()) < 1e-10);
            prop_assert!(max_diff(base.2.data(), moved.2.data()) < 1e-10);
            prop_assert!(max_diff(base.3.data(), moved.3.data()) < 1e-10);
        }

        #[test]
        fn spatial_permutation_leaves_instance_feature(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let mut r = rng(seed);
            let p = GidParams::init("gid", 3, 4, 3, &mut r);
            let (map, fg, fi) = (random(&mut r, &[3, 2, 3]), random(&mut r, &[4]), random(&mut r, &[4]));
            let base = gid_forward_tensors(&map, &fg, &fi, &p, GidMode::Both).unwrap().unwrap();
            let moved = gid_forward_tensors(&permute_positions(&map, &perm), &fg, &fi, &p, GidMode::Both).unwrap().unwrap();
            prop_assert!(max_diff(base.0.data(), moved.0.data()) < 1e-10);
            let want = permute_positions(&base.1, &perm);
            prop_assert!(max_diff(want.data(), moved.1.data()) < 1e-10);
        }
    }
}
