//! Two-headed fully convolutional network: shared backbone with three 2x2
//! poolings, a 64-channel detector head (one channel per pixel of an 8x8
//! cell, no dustbin) and a semi-dense descriptor head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use crate::grid::{Heatmap, Image, Tensor3};
use crate::nn::{self, Conv2d, ConvGrad};

/// Spatial downsampling of both heads.
pub const CELL: usize = 8;
pub const CELL_CHANNELS: usize = CELL * CELL;
/// Layout tag of the detector channels, stored in checkpoints.
pub const CHANNEL_ORDER: &str = "depth_to_space_row_major_8x8";
/// Pixel offset of the first semi-dense descriptor sample.
pub const DESCRIPTOR_GRID_OFFSET: f64 = 3.5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Conv widths of the four backbone stages; a 2x2 max-pool separates
    /// consecutive stages. A stage may be empty.
    pub stages: Vec<Vec<usize>>,
    pub head_channels: usize,
    pub descriptor_dim: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: vec![vec![64, 64], vec![64, 64], vec![128, 128], vec![128, 128]],
            head_channels: 256,
            descriptor_dim: 256,
            leaky_slope: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("network.{key}"), reason: reason.into() });
        if self.stages.len() != 4 {
            return bad("stages", "exactly four stages are required (downsampling factor 8)");
        }
        if self.stages.iter().flatten().any(|&c| c == 0) {
            return bad("stages", "channel counts must be positive");
        }
        if self.head_channels == 0 {
            return bad("head_channels", "must be positive");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim", "must be positive");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope", "must be in [0, 1)");
        }
        Ok(())
    }

    fn backbone_out(&self) -> usize {
        self.stages.iter().flatten().last().copied().unwrap_or(1)
    }
}

/// Index of each convolution inside [`Network::convs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// Backbone convs in order, then detector a/b, then descriptor a/b.
    pub convs: Vec<Conv2d>,
    names: Vec<String>,
    backbone: Vec<Op>,
}

/// Network outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `64 x H/8 x W/8` detector logits.
    pub logits: Tensor3,
    /// `D x H/8 x W/8` semi-dense descriptors.
    pub descriptors: Tensor3,
}

/// Activations retained for backpropagation.
pub struct ForwardCache {
    /// Input of every backbone op, plus the backbone output last.
    backbone_acts: Vec<Tensor3>,
    pool_args: Vec<Vec<usize>>,
    det_hidden: Tensor3,
    desc_hidden: Tensor3,
}

/// Gradient buffers for every convolution of a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub convs: Vec<ConvGrad>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self { convs: net.convs.iter().map(ConvGrad::zeros_like).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.convs {
            c.weight.iter_mut().chain(c.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &NetworkGrads) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.convs.iter().flat_map(|c| c.weight.iter().chain(&c.bias).copied()).collect()
    }
}

impl Network {
    fn layout(config: &NetworkConfig) -> (Vec<(usize, usize, usize)>, Vec<String>, Vec<Op>) {
        let mut shapes = Vec::new();
        let mut names = Vec::new();
        let mut ops = Vec::new();
        let mut ch = 1;
        for (s, stage) in config.stages.iter().enumerate() {
            for (j, &out) in stage.iter().enumerate() {
                ops.push(Op::Conv(shapes.len()));
                names.push(format!("backbone.stage{s}.conv{j}"));
                shapes.push((ch, out, 3));
                ch = out;
            }
            if s + 1 < config.stages.len() {
                ops.push(Op::Pool);
            }
        }
        let f = config.backbone_out();
        let heads = [
            ("detector.conv_a", f, config.head_channels, 3),
            ("detector.conv_b", config.head_channels, CELL_CHANNELS, 1),
            ("descriptor.conv_a", f, config.head_channels, 3),
            ("descriptor.conv_b", config.head_channels, config.descriptor_dim, 1),
        ];
        for (n, i, o, k) in heads {
            names.push(n.to_string());
            shapes.push((i, o, k));
        }
        (shapes, names, ops)
    }

    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (shapes, names, backbone) = Self::layout(&config);
        let convs = shapes.into_iter().map(|(i, o, k)| Conv2d::init(i, o, k, rng)).collect();
        Ok(Self { config, convs, names, backbone })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (shapes, names, backbone) = Self::layout(&config);
        let convs = shapes.into_iter().map(|(i, o, k)| Conv2d::zeros(i, o, k)).collect();
        Ok(Self { config, convs, names, backbone })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }

    pub fn conv_names(&self) -> &[String] {
        &self.names
    }

    fn head_start(&self) -> usize {
        self.convs.len() - 4
    }

    /// Whether conv `i` belongs to the detector head, the descriptor head, or the backbone.
    pub fn conv_role(&self, i: usize) -> ConvRole {
        let h = self.head_start();
        match i {
            _ if i < h => ConvRole::Backbone,
            _ if i < h + 2 => ConvRole::Detector,
            _ => ConvRole::Descriptor,
        }
    }

    /// Named parameter tensors in checkpoint order (`<conv>.weight`, `<conv>.bias`).
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.convs.len());
        for (name, c) in self.names.iter().zip(&self.convs) {
            out.push((format!("{name}.weight"), c.weight.as_slice()));
            out.push((format!("{name}.bias"), c.bias.as_slice()));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::with_capacity(2 * self.convs.len());
        for (name, c) in self.names.iter().zip(self.convs.iter_mut()) {
            out.push((format!("{name}.weight"), &mut c.weight));
            out.push((format!("{name}.bias"), &mut c.bias));
        }
        out
    }

    fn input_tensor(img: &Image) -> Result<Tensor3> {
        if img.width() % CELL != 0 || img.height() % CELL != 0 {
            return Err(Error::IndivisibleSize { width: img.width(), height: img.height() });
        }
        Tensor3::from_vec(1, img.height(), img.width(), img.data().to_vec())
    }

    pub fn forward(&self, img: &Image) -> Result<ForwardOutput> {
        self.forward_impl(img, false).map(|(o, _)| o)
    }

    pub fn forward_train(&self, img: &Image) -> Result<(ForwardOutput, ForwardCache)> {
        self.forward_impl(img, true).map(|(o, c)| (o, c.expect("cache requested")))
    }

    fn forward_impl(&self, img: &Image, keep: bool) -> Result<(ForwardOutput, Option<ForwardCache>)> {
        let slope = self.config.leaky_slope;
        let mut x = Self::input_tensor(img)?;
        let mut acts = Vec::new();
        let mut pool_args = Vec::new();
        for op in &self.backbone {
            let y = match *op {
                Op::Conv(i) => {
                    let mut y = self.convs[i].forward(&x);
                    nn::leaky_relu_inplace(&mut y, slope);
                    y
                }
                Op::Pool => {
                    let (y, arg) = nn::max_pool2(&x);
                    if keep {
                        pool_args.push(arg);
                    }
                    y
                }
            };
            if keep {
                acts.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        let h = self.head_start();
        let mut det_hidden = self.convs[h].forward(&x);
        nn::leaky_relu_inplace(&mut det_hidden, slope);
        let logits = self.convs[h + 1].forward(&det_hidden);
        let mut desc_hidden = self.convs[h + 2].forward(&x);
        nn::leaky_relu_inplace(&mut desc_hidden, slope);
        let descriptors = self.convs[h + 3].forward(&desc_hidden);
        let out = ForwardOutput { logits, descriptors };
        let cache = keep.then(|| {
            acts.push(x);
            ForwardCache { backbone_acts: acts, pool_args, det_hidden, desc_hidden }
        });
        Ok((out, cache))
    }

    /// Backpropagates output gradients; accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: Option<&Tensor3>,
        grad_descriptors: Option<&Tensor3>,
        grads: &mut NetworkGrads,
    ) {
        let slope = self.config.leaky_slope;
        let h = self.head_start();
        let feat = cache.backbone_acts.last().expect("backbone output");
        let mut grad_feat = Tensor3::zeros(feat.channels, feat.height, feat.width);
        let mut head = |a: usize, hidden: &Tensor3, g_out: &Tensor3, grads: &mut NetworkGrads| {
            let mut g_hidden = self.convs[a + 1]
                .backward(hidden, g_out, &mut grads.convs[a + 1], true)
                .expect("input grad");
            nn::leaky_relu_backward_inplace(hidden, &mut g_hidden, slope);
            let g = self.convs[a].backward(feat, &g_hidden, &mut grads.convs[a], true).expect("input grad");
            grad_feat.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
        };
        if let Some(g) = grad_logits {
            head(h, &cache.det_hidden, g, grads);
        }
        if let Some(g) = grad_descriptors {
            head(h + 2, &cache.desc_hidden, g, grads);
        }
        let mut grad = grad_feat;
        let mut pool_idx = cache.pool_args.len();
        for (k, op) in self.backbone.iter().enumerate().rev() {
            let input = &cache.backbone_acts[k];
            let output = &cache.backbone_acts[k + 1];
            match *op {
                Op::Conv(i) => {
                    nn::leaky_relu_backward_inplace(output, &mut grad, slope);
                    let need = k > 0;
                    match self.convs[i].backward(input, &grad, &mut grads.convs[i], need) {
                        Some(g) => grad = g,
                        None => break,
                    }
                }
                Op::Pool => {
                    pool_idx -= 1;
                    grad = nn::max_pool2_backward(
                        (input.channels, input.height, input.width),
                        &cache.pool_args[pool_idx],
                        &grad,
                    );
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    Backbone,
    Detector,
    Descriptor,
}

/// Per-cell softmax over the 64 detector channels followed by depth-to-space:
/// channel `c` of cell `(i, j)` lands on pixel `(8j + c % 8, 8i + c / 8)`.
pub fn heatmap_from_logits(logits: &Tensor3) -> Heatmap {
    assert_eq!(logits.channels, CELL_CHANNELS, "detector logits need 64 channels");
    let (hc, wc) = (logits.height, logits.width);
    let (w, h) = (wc * CELL, hc * CELL);
    let mut data = vec![0.0; w * h];
    let mut buf = [0.0f64; CELL_CHANNELS];
    for i in 0..hc {
        for j in 0..wc {
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = logits.at(c, i, j);
                max = max.max(*b);
            }
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                sum += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                let x = CELL * j + c % CELL;
                let y = CELL * i + c / CELL;
                data[y * w + x] = b / sum;
            }
        }
    }
    Image::from_raw(w, h, data)
}

/// Gradient of the detector logits given the heatmap and its gradient.
pub fn heatmap_backward(heatmap: &Heatmap, grad: &[f64]) -> Tensor3 {
    let (w, h) = (heatmap.width(), heatmap.height());
    let (wc, hc) = (w / CELL, h / CELL);
    let mut out = Tensor3::zeros(CELL_CHANNELS, hc, wc);
    for i in 0..hc {
        for j in 0..wc {
            let idx = |c: usize| (CELL * i + c / CELL) * w + CELL * j + c % CELL;
            let dot: f64 = (0..CELL_CHANNELS).map(|c| heatmap.data()[idx(c)] * grad[idx(c)]).sum();
            for c in 0..CELL_CHANNELS {
                let p = heatmap.data()[idx(c)];
                out.data[(c * hc + i) * wc + j] = p * (grad[idx(c)] - dot);
            }
        }
    }
    out
}

/// `N x D` row-major descriptor matrix.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Descriptors {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Descriptors {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Descriptors {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Descriptors { dim: self.dim, data }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Fractional semi-dense grid coordinate of a pixel, clamped to the grid.
fn grid_coord(p: Point, grid_w: usize, grid_h: usize) -> (f64, f64) {
    let gx = ((p.x - DESCRIPTOR_GRID_OFFSET) / CELL as f64).clamp(0.0, (grid_w - 1) as f64);
    let gy = ((p.y - DESCRIPTOR_GRID_OFFSET) / CELL as f64).clamp(0.0, (grid_h - 1) as f64);
    (gx, gy)
}

fn raw_descriptor(field: &Tensor3, p: Point, out: &mut [f64]) -> [(usize, f64); 4] {
    let (gx, gy) = grid_coord(p, field.width, field.height);
    let taps = crate::geometry::bilinear_taps(gx, gy, field.width, field.height).expect("clamped coordinate");
    for (c, o) in out.iter_mut().enumerate() {
        let plane = field.plane(c);
        *o = taps.iter().map(|&(i, w)| w * plane[i]).sum();
    }
    taps
}

/// Bilinear interpolation of the semi-dense field at pixel locations, followed
/// by L2 normalization of each row.
pub fn interpolate_descriptors(field: &Tensor3, points: &PointSet) -> Descriptors {
    let d = field.channels;
    let mut data = vec![0.0; points.len() * d];
    for (p, row) in points.points.iter().zip(data.chunks_exact_mut(d)) {
        raw_descriptor(field, *p, row);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Descriptors { dim: d, data }
}

/// Accumulates the semi-dense field gradient from gradients of the
/// normalized descriptors produced by [`interpolate_descriptors`].
pub fn interpolate_descriptors_backward(field: &Tensor3, points: &PointSet, grad: &Descriptors, out: &mut Tensor3) {
    let d = field.channels;
    let mut raw = vec![0.0; d];
    let plane = field.plane_len();
    for (p, g) in points.points.iter().zip(grad.rows()) {
        let taps = raw_descriptor(field, *p, &mut raw);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let dot: f64 = raw.iter().zip(g).map(|(r, g)| r / norm * g).sum();
        for c in 0..d {
            let gr = (g[c] - raw[c] / norm * dot) / norm;
            for &(i, w) in &taps {
                out.data[c * plane + i] += w * gr;
            }
        }
    }
}
