//! Layers shared by the backbone, the GID block and the branch heads.

use rand::Rng;

use crate::autodiff::{Param, Var};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Walk every named parameter of a module tree.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }
}

/// `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))` weights.
fn uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape is consistent")
}

/// Bound gain giving weight variance `2 / fan_in`, for layers feeding a relu.
pub const RELU_GAIN: f64 = 2.449489742783178;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl LinearParams {
    pub fn init(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::init_with_gain(name, in_dim, out_dim, 1.0, rng)
    }

    /// Initialization for a layer whose output goes through a relu.
    pub fn init_relu(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::init_with_gain(name, in_dim, out_dim, RELU_GAIN, rng)
    }

    fn init_with_gain(name: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        LinearParams {
            weight: Param::new(format!("{name}.weight"), uniform(rng, vec![out_dim, in_dim], in_dim, gain)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Parameters for LinearParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub kernels: Param,
    /// `[out_ch]`
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Relu-scaled uniform kernels and zero bias.
    pub fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2dParams {
            kernels: Param::new(
                format!("{name}.kernels"),
                uniform(rng, vec![out_ch, in_ch, kernel, kernel], fan_in, RELU_GAIN),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([out_ch])),
            stride,
            padding,
        }
    }

    /// Stride-1 layer with `(k - 1) / 2` padding; `k` must be odd.
    pub fn same(name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "same padding needs an odd kernel, got {kernel}"
            )));
        }
        Ok(Self::init(name, in_ch, out_ch, kernel, 1, (kernel - 1) / 2, rng))
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.value.shape()[0]
    }
}

impl Parameters for Conv2dParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.kernels);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernels);
        f(&mut self.bias);
    }
}

/// `x · Wᵀ + b` for `x: [batch, in]`.
pub fn linear<'t>(x: Var<'t>, p: &LinearParams) -> Result<Var<'t>> {
    let tape = x.tape();
    let w = tape.param(&p.weight);
    let b = tape.param(&p.bias);
    x.matmul(w.t()?)?.add(b)
}

pub fn conv2d<'t>(x: Var<'t>, p: &Conv2dParams) -> Result<Var<'t>> {
    let tape = x.tape();
    let w = tape.param(&p.kernels);
    let b = tape.param(&p.bias);
    tape.conv2d(x, w, b, p.stride, p.padding)
}

/// Per-channel spatial mean of `[C, H, W]`.
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("global_avg_pool", &s, &[3]));
    }
    let hw = s[1] * s[2];
    Ok(x.reshape([s[0], hw])?.sum_axis(1)?.scale(1.0 / hw as f64))
}

pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    first.tape().concat(parts, axis)
}

/// Half-open bin boundaries of a projected region `[start, end)` split into
/// `bins` pieces. Bins that round to nothing collapse onto the nearest cell.
fn bin_ranges(start: usize, end: usize, bins: usize) -> Vec<(usize, usize)> {
    let len = end - start;
    (0..bins)
        .map(|p| {
            let lo = start + p * len / bins;
            let hi = (start + ((p + 1) * len).div_ceil(bins)).min(end);
            if hi > lo {
                (lo, hi)
            } else {
                let c = lo.min(end - 1);
                (c, c + 1)
            }
        })
        .collect()
}

/// Project an image-space interval onto a feature axis of `cells` cells.
fn project(lo: f64, hi: f64, stride: f64, cells: usize) -> (usize, usize) {
    let start = ((lo / stride).round() as usize).min(cells - 1);
    let end = ((hi / stride).round() as usize).clamp(start + 1, cells);
    (start, end)
}

/// Max-pool the region of `featmap: [C, h, w]` under `bbox` into
/// `[C, out.0, out.1]` bins.
///
/// `image_size` is `(height, width)` and must be an integer multiple of the
/// feature map with the same stride on both axes.
pub fn roi_pool<'t>(
    featmap: Var<'t>,
    bbox: &BBox,
    image_size: (usize, usize),
    out: (usize, usize),
) -> Result<Var<'t>> {
    let s = featmap.shape();
    if s.len() != 3 {
        return Err(Error::dim("roi_pool", &s, &[3]));
    }
    let (ch, fh, fw) = (s[0], s[1], s[2]);
    let (ih, iw) = image_size;
    if ih % fh != 0 || iw % fw != 0 || ih / fh != iw / fw {
        return Err(Error::Input(format!(
            "feature map {fh}x{fw} is not a uniform-stride view of a {ih}x{iw} image"
        )));
    }
    if bbox.area() <= 0.0 {
        return Err(Error::Input("roi_pool box has no area".into()));
    }
    if !bbox.is_within(iw, ih) {
        return Err(Error::Input(format!(
            "roi_pool box {:?} lies outside the {iw}x{ih} image",
            <[f64; 4]>::from(*bbox)
        )));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::Config("roi_pool output size must be positive".into()));
    }
    let stride = (ih / fh) as f64;
    let (ys, ye) = project(bbox.y1, bbox.y2, stride, fh);
    let (xs, xe) = project(bbox.x1, bbox.x2, stride, fw);
    let rows = bin_ranges(ys, ye, out.0);
    let cols = bin_ranges(xs, xe, out.1);

    let values = featmap.data();
    let mut indices = Vec::with_capacity(ch * out.0 * out.1);
    for c in 0..ch {
        let base = c * fh * fw;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut best = base + r0 * fw + c0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        let i = base + y * fw + x;
                        if values[i] > values[best] {
                            best = i;
                        }
                    }
                }
                indices.push(best);
            }
        }
    }
    featmap.tape().gather(featmap, indices, vec![ch, out.0, out.1])
}
