//! f64 CNN building blocks with explicit backprop.
//!
//! Feature maps are kept in NHWC layout so im2col rows stay contiguous and
//! convolutions reduce to one gemm per layer. Everything is deterministic:
//! no threading in the training path, and parameter init draws from a seeded
//! ChaCha stream in a fixed tensor order.

use ndarray::{concatenate, Array1, Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Prng;

/// One stage of the convolutional stack. Every `Conv` is followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvStage {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// Architecture of one siamese branch: conv stack then fully connected
/// layers, all ReLU. The last fc size is the embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    pub fc_sizes: Vec<usize>,
}

/// Pair-classification head: the two embeddings are concatenated and passed
/// through `hidden` ReLU layers, then a single logit unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub branch: BranchSpec,
    pub head: HeadSpec,
}

impl BranchSpec {
    /// (side length, channels) after each conv-stack stage.
    fn stage_dims(&self) -> Result<Vec<(usize, usize)>> {
        let mut side = self.input_size;
        let mut channels = self.in_channels;
        let mut dims = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let (k, s, c_out) = match *stage {
                ConvStage::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => (kernel, stride, out_channels),
                ConvStage::MaxPool { kernel, stride } => (kernel, stride, channels),
            };
            if k == 0 || s == 0 || c_out == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: zero kernel/stride/channels"
                )));
            }
            if side < k {
                return Err(Error::Config(format!(
                    "stage {i}: input side {side} smaller than kernel {k}"
                )));
            }
            side = (side - k) / s + 1;
            channels = c_out;
            dims.push((side, channels));
        }
        Ok(dims)
    }

    /// Flattened dimension entering the first fully connected layer.
    pub fn flat_dim(&self) -> Result<usize> {
        let dims = self.stage_dims()?;
        let (side, channels) = dims
            .last()
            .copied()
            .unwrap_or((self.input_size, self.in_channels));
        Ok(side * side * channels)
    }

    pub fn embedding_dim(&self) -> usize {
        *self.fc_sizes.last().expect("branch has at least one fc layer")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::Config("branch input must be non-empty".to_string()));
        }
        if self.fc_sizes.is_empty() || self.fc_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config(
                "branch needs at least one non-empty fc layer".to_string(),
            ));
        }
        self.stage_dims().map(|_| ())
    }
}

impl ModelSpec {
    /// The 200px AlexNet-like schedule with a 512-d embedding.
    pub fn paper() -> Self {
        ModelSpec {
            branch: BranchSpec {
                input_size: 200,
                in_channels: 1,
                stages: vec![
                    ConvStage::Conv { out_channels: 96, kernel: 11, stride: 4 },
                    ConvStage::MaxPool { kernel: 3, stride: 2 },
                    ConvStage::Conv { out_channels: 256, kernel: 5, stride: 1 },
                    ConvStage::MaxPool { kernel: 3, stride: 2 },
                    ConvStage::Conv { out_channels: 384, kernel: 3, stride: 1 },
                    ConvStage::Conv { out_channels: 384, kernel: 3, stride: 1 },
                    ConvStage::Conv { out_channels: 256, kernel: 3, stride: 1 },
                    ConvStage::MaxPool { kernel: 3, stride: 2 },
                ],
                fc_sizes: vec![1024, 512],
            },
            head: HeadSpec { hidden: vec![256] },
        }
    }

    /// A small three-conv schedule for patches down to ~30px; used for
    /// desk-scale runs on synthetic corpora.
    pub fn compact(input_size: usize, embedding_dim: usize) -> Self {
        ModelSpec {
            branch: BranchSpec {
                input_size,
                in_channels: 1,
                stages: vec![
                    ConvStage::Conv { out_channels: 12, kernel: 5, stride: 2 },
                    ConvStage::MaxPool { kernel: 2, stride: 2 },
                    ConvStage::Conv { out_channels: 24, kernel: 3, stride: 1 },
                    ConvStage::MaxPool { kernel: 2, stride: 2 },
                    ConvStage::Conv { out_channels: 32, kernel: 3, stride: 1 },
                    ConvStage::MaxPool { kernel: 2, stride: 2 },
                ],
                fc_sizes: vec![128, embedding_dim],
            },
            head: HeadSpec { hidden: vec![32] },
        }
    }

    /// Miniature two-conv branch on 8px inputs with a 4-d embedding; small
    /// enough for finite-difference verification.
    pub fn mini() -> Self {
        ModelSpec {
            branch: BranchSpec {
                input_size: 8,
                in_channels: 1,
                stages: vec![
                    ConvStage::Conv { out_channels: 3, kernel: 3, stride: 1 },
                    ConvStage::MaxPool { kernel: 2, stride: 2 },
                    ConvStage::Conv { out_channels: 4, kernel: 3, stride: 1 },
                ],
                fc_sizes: vec![4],
            },
            head: HeadSpec { hidden: vec![4] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.head.hidden.iter().any(|&n| n == 0) {
            return Err(Error::Config("head layers must be non-empty".to_string()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.branch.embedding_dim()
    }
}

/// Convolution weights in (out_channels, kh, kw, in_channels) layout, so the
/// reshaped (oc, k*k*ic) matrix lines up with im2col rows.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Array2<f64>, // (out, in)
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum BranchLayer {
    Conv(Conv2d),
    Pool { kernel: usize, stride: usize },
}

/// The full parameter set: conv stack, branch fc layers, head fc layers.
/// The same container holds gradients during backprop.
#[derive(Debug, Clone)]
pub(crate) struct ParamSet {
    pub conv: Vec<BranchLayer>,
    pub branch_fcs: Vec<Linear>,
    pub head_fcs: Vec<Linear>,
}

impl ParamSet {
    /// He-initialized parameters drawn in a fixed order from a seeded stream.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Prng::seed_from_u64(seed);
        let mut channels = spec.branch.in_channels;
        let mut conv = Vec::new();
        for stage in &spec.branch.stages {
            match *stage {
                ConvStage::Conv { out_channels, kernel, stride } => {
                    let fan_in = kernel * kernel * channels;
                    let w = he_tensor4(
                        (out_channels, kernel, kernel, channels),
                        fan_in,
                        &mut rng,
                    );
                    conv.push(BranchLayer::Conv(Conv2d {
                        w,
                        b: Array1::zeros(out_channels),
                        stride,
                    }));
                    channels = out_channels;
                }
                ConvStage::MaxPool { kernel, stride } => {
                    conv.push(BranchLayer::Pool { kernel, stride });
                }
            }
        }
        let mut in_dim = spec.branch.flat_dim()?;
        let mut branch_fcs = Vec::new();
        for &out in &spec.branch.fc_sizes {
            branch_fcs.push(Linear {
                w: he_tensor2((out, in_dim), in_dim, &mut rng),
                b: Array1::zeros(out),
            });
            in_dim = out;
        }
        let mut head_fcs = Vec::new();
        let mut dim = 2 * spec.embedding_dim();
        for &out in &spec.head.hidden {
            head_fcs.push(Linear {
                w: he_tensor2((out, dim), dim, &mut rng),
                b: Array1::zeros(out),
            });
            dim = out;
        }
        head_fcs.push(Linear {
            w: he_tensor2((1, dim), dim, &mut rng),
            b: Array1::zeros(1),
        });
        Ok(Self {
            conv,
            branch_fcs,
            head_fcs,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let conv = self
            .conv
            .iter()
            .map(|l| match l {
                BranchLayer::Conv(c) => BranchLayer::Conv(Conv2d {
                    w: Array4::zeros(c.w.raw_dim()),
                    b: Array1::zeros(c.b.raw_dim()),
                    stride: c.stride,
                }),
                BranchLayer::Pool { kernel, stride } => BranchLayer::Pool {
                    kernel: *kernel,
                    stride: *stride,
                },
            })
            .collect();
        let zero_fc = |fcs: &[Linear]| {
            fcs.iter()
                .map(|l| Linear {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            conv,
            branch_fcs: zero_fc(&self.branch_fcs),
            head_fcs: zero_fc(&self.head_fcs),
        }
    }

    /// Visits every parameter tensor as a flat slice, in the canonical order
    /// used by the flattened views.
    fn for_each_tensor(&self, mut f: impl FnMut(&[f64])) {
        for layer in &self.conv {
            if let BranchLayer::Conv(c) = layer {
                f(c.w.as_slice().expect("contiguous"));
                f(c.b.as_slice().expect("contiguous"));
            }
        }
        for fc in self.branch_fcs.iter().chain(self.head_fcs.iter()) {
            f(fc.w.as_slice().expect("contiguous"));
            f(fc.b.as_slice().expect("contiguous"));
        }
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.conv {
            if let BranchLayer::Conv(c) = layer {
                f(c.w.as_slice_mut().expect("contiguous"));
                f(c.b.as_slice_mut().expect("contiguous"));
            }
        }
        for fc in self
            .branch_fcs
            .iter_mut()
            .chain(self.head_fcs.iter_mut())
        {
            f(fc.w.as_slice_mut().expect("contiguous"));
            f(fc.b.as_slice_mut().expect("contiguous"));
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_tensor(|t| out.extend_from_slice(t));
        out
    }

    pub fn load_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector length {} does not match model ({})",
                src.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.for_each_tensor_mut(|t| {
            t.copy_from_slice(&src[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }
}

fn he_tensor2(shape: (usize, usize), fan_in: usize, rng: &mut Prng) -> Array2<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

fn he_tensor4(
    shape: (usize, usize, usize, usize),
    fan_in: usize,
    rng: &mut Prng,
) -> Array4<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Array4::from_shape_simple_fn(shape, || dist.sample(rng))
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct ConvCache {
    cols: Array2<f64>,
    mask: Vec<bool>,
    in_shape: (usize, usize, usize, usize),
    out_shape: (usize, usize, usize, usize),
}

struct PoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
    out_shape: (usize, usize, usize, usize),
}

enum StageCache {
    Conv(ConvCache),
    Pool(PoolCache),
}

struct FcCache {
    input: Array2<f64>,
    mask: Option<Vec<bool>>,
}

pub(crate) struct BranchCache {
    stages: Vec<StageCache>,
    fcs: Vec<FcCache>,
}

fn im2col(x: &Array4<f64>, kernel: usize, stride: usize) -> (Array2<f64>, (usize, usize)) {
    let (n, h, w, c) = x.dim();
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut cols = Array2::<f64>::zeros((n * oh * ow, kernel * kernel * c));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    let row_len = kernel * kernel * c;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh) + oy) * ow + ox;
                let dst_base = row * row_len;
                for ky in 0..kernel {
                    let src_base = ((ni * h + oy * stride + ky) * w + ox * stride) * c;
                    let dst = dst_base + ky * kernel * c;
                    cs[dst..dst + kernel * c]
                        .copy_from_slice(&xs[src_base..src_base + kernel * c]);
                }
            }
        }
    }
    (cols, (oh, ow))
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array4<f64> {
    let (n, h, w, c) = in_shape;
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut dx = Array4::<f64>::zeros(in_shape);
    let ds = dcols.as_slice().expect("contiguous");
    let xs = dx.as_slice_mut().expect("contiguous");
    let row_len = kernel * kernel * c;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh) + oy) * ow + ox;
                let src_base = row * row_len;
                for ky in 0..kernel {
                    let dst_base = ((ni * h + oy * stride + ky) * w + ox * stride) * c;
                    let src = src_base + ky * kernel * c;
                    for i in 0..kernel * c {
                        xs[dst_base + i] += ds[src + i];
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(x: &Array4<f64>, conv: &Conv2d) -> (Array4<f64>, ConvCache) {
    let (n, _, _, in_c) = x.dim();
    let (oc, kernel, _, _) = conv.w.dim();
    let (cols, (oh, ow)) = im2col(x, kernel, conv.stride);
    let w2 = conv
        .w
        .view()
        .into_shape_with_order((oc, kernel * kernel * in_c))
        .expect("conv weight reshapes");
    let mut y2 = cols.dot(&w2.t());
    y2 += &conv.b.view().insert_axis(Axis(0));
    let mut mask = vec![false; y2.len()];
    for (m, v) in mask.iter_mut().zip(y2.iter_mut()) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v = 0.0;
        }
    }
    let out_shape = (n, oh, ow, oc);
    let y = y2
        .into_shape_with_order(out_shape)
        .expect("gemm output reshapes");
    let cache = ConvCache {
        cols,
        mask,
        in_shape: x.dim(),
        out_shape,
    };
    (y, cache)
}

fn conv_backward(
    dy: &Array4<f64>,
    conv: &Conv2d,
    cache: &ConvCache,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, oh, ow, oc) = cache.out_shape;
    let (_, kernel, _, ic) = conv.w.dim();
    let mut dz = dy
        .view()
        .into_shape_with_order((n * oh * ow, oc))
        .expect("dy reshapes")
        .to_owned();
    for (v, &m) in dz.iter_mut().zip(cache.mask.iter()) {
        if !m {
            *v = 0.0;
        }
    }
    let dw2 = dz.t().dot(&cache.cols);
    let db = dz.sum_axis(Axis(0));
    let w2 = conv
        .w
        .view()
        .into_shape_with_order((oc, kernel * kernel * ic))
        .expect("conv weight reshapes");
    let dcols = dz.dot(&w2);
    let dx = col2im(&dcols, cache.in_shape, kernel, conv.stride);
    let dw = dw2
        .into_shape_with_order(conv.w.raw_dim())
        .expect("dw reshapes");
    (dx, dw, db)
}

fn pool_forward(x: &Array4<f64>, kernel: usize, stride: usize) -> (Array4<f64>, PoolCache) {
    let (n, h, w, c) = x.dim();
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Array4::<f64>::zeros((n, oh, ow, c));
    let mut argmax = vec![0usize; n * oh * ow * c];
    let xs = x.as_slice().expect("contiguous");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx =
                                ((ni * h + oy * stride + ky) * w + ox * stride + kx) * c + ci;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[[ni, oy, ox, ci]] = best;
                    argmax[((ni * oh + oy) * ow + ox) * c + ci] = best_idx;
                }
            }
        }
    }
    let cache = PoolCache {
        argmax,
        in_shape: (n, h, w, c),
        out_shape: (n, oh, ow, c),
    };
    (y, cache)
}

fn pool_backward(dy: &Array4<f64>, cache: &PoolCache) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(cache.in_shape);
    let dxs = dx.as_slice_mut().expect("contiguous");
    for (ds, &idx) in dy
        .as_slice()
        .expect("contiguous")
        .iter()
        .zip(cache.argmax.iter())
    {
        dxs[idx] += ds;
    }
    dx
}

fn fc_forward(x: &Array2<f64>, fc: &Linear, relu: bool) -> (Array2<f64>, FcCache) {
    let mut y = x.dot(&fc.w.t());
    y += &fc.b.view().insert_axis(Axis(0));
    let mask = if relu {
        let mut m = vec![false; y.len()];
        for (mi, v) in m.iter_mut().zip(y.iter_mut()) {
            if *v > 0.0 {
                *mi = true;
            } else {
                *v = 0.0;
            }
        }
        Some(m)
    } else {
        None
    };
    (
        y,
        FcCache {
            input: x.clone(),
            mask,
        },
    )
}

fn fc_backward(
    dy: &Array2<f64>,
    fc: &Linear,
    cache: &FcCache,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let mut dz = dy.clone();
    if let Some(mask) = &cache.mask {
        for (v, &m) in dz.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            }
        }
    }
    let dw = dz.t().dot(&cache.input);
    let db = dz.sum_axis(Axis(0));
    let dx = dz.dot(&fc.w);
    (dx, dw, db)
}

/// Runs the conv stack and branch fc layers on a batch of (n, s, s, c)
/// patches; returns (n, embedding) activations plus caches for backprop.
pub(crate) fn branch_forward_batch(
    params: &ParamSet,
    x: &Array4<f64>,
) -> (Array2<f64>, BranchCache) {
    let mut cur = x.clone();
    let mut stages = Vec::with_capacity(params.conv.len());
    for layer in &params.conv {
        match layer {
            BranchLayer::Conv(c) => {
                let (y, cache) = conv_forward(&cur, c);
                stages.push(StageCache::Conv(cache));
                cur = y;
            }
            BranchLayer::Pool { kernel, stride } => {
                let (y, cache) = pool_forward(&cur, *kernel, *stride);
                stages.push(StageCache::Pool(cache));
                cur = y;
            }
        }
    }
    let (n, h, w, c) = cur.dim();
    let mut flat = cur
        .into_shape_with_order((n, h * w * c))
        .expect("flatten is a view");
    let mut fcs = Vec::with_capacity(params.branch_fcs.len());
    for fc in &params.branch_fcs {
        let (y, cache) = fc_forward(&flat, fc, true);
        fcs.push(cache);
        flat = y;
    }
    (flat, BranchCache { stages, fcs })
}

/// Backpropagates an embedding gradient through one branch application,
/// accumulating parameter gradients into `grads`.
pub(crate) fn branch_backward_batch(
    params: &ParamSet,
    cache: &BranchCache,
    d_embedding: &Array2<f64>,
    grads: &mut ParamSet,
) {
    let mut d_flat = d_embedding.clone();
    for (i, (fc, fc_cache)) in params
        .branch_fcs
        .iter()
        .zip(cache.fcs.iter())
        .enumerate()
        .rev()
    {
        let (dx, dw, db) = fc_backward(&d_flat, fc, fc_cache);
        grads.branch_fcs[i].w += &dw;
        grads.branch_fcs[i].b += &db;
        d_flat = dx;
    }
    // unflatten to the conv stack's final output shape
    let last_shape = match cache.stages.last() {
        Some(StageCache::Conv(c)) => c.out_shape,
        Some(StageCache::Pool(p)) => p.out_shape,
        None => {
            let n = d_flat.nrows();
            let side = (d_flat.ncols() as f64).sqrt() as usize;
            (n, side, side, 1)
        }
    };
    let mut d_cur = d_flat
        .into_shape_with_order(last_shape)
        .expect("unflatten matches conv output");
    for (i, (layer, stage_cache)) in params
        .conv
        .iter()
        .zip(cache.stages.iter())
        .enumerate()
        .rev()
    {
        match (layer, stage_cache) {
            (BranchLayer::Conv(c), StageCache::Conv(cc)) => {
                let (dx, dw, db) = conv_backward(&d_cur, c, cc);
                if let BranchLayer::Conv(gc) = &mut grads.conv[i] {
                    gc.w += &dw;
                    gc.b += &db;
                } else {
                    unreachable!("grad layout mirrors params");
                }
                d_cur = dx;
            }
            (BranchLayer::Pool { .. }, StageCache::Pool(pc)) => {
                d_cur = pool_backward(&d_cur, pc);
            }
            _ => unreachable!("cache stages align with layers"),
        }
    }
}

pub(crate) struct HeadCache {
    fcs: Vec<FcCache>,
}

/// Head forward: concat(a, b) through hidden ReLU layers to a single logit
/// per pair.
pub(crate) fn head_forward_batch(
    params: &ParamSet,
    emb_a: &Array2<f64>,
    emb_b: &Array2<f64>,
) -> (Array1<f64>, HeadCache) {
    let mut cur = concatenate(Axis(1), &[emb_a.view(), emb_b.view()]).expect("same batch size");
    let mut fcs = Vec::with_capacity(params.head_fcs.len());
    let last = params.head_fcs.len() - 1;
    for (i, fc) in params.head_fcs.iter().enumerate() {
        let (y, cache) = fc_forward(&cur, fc, i != last);
        fcs.push(cache);
        cur = y;
    }
    let logits = cur.column(0).to_owned();
    (logits, HeadCache { fcs })
}

/// Head backward from d(logit); returns gradients w.r.t. the two embeddings.
pub(crate) fn head_backward_batch(
    params: &ParamSet,
    cache: &HeadCache,
    d_logits: &Array1<f64>,
    grads: &mut ParamSet,
) -> (Array2<f64>, Array2<f64>) {
    let mut d_cur = d_logits.view().insert_axis(Axis(1)).to_owned();
    for (i, (fc, fc_cache)) in params
        .head_fcs
        .iter()
        .zip(cache.fcs.iter())
        .enumerate()
        .rev()
    {
        let (dx, dw, db) = fc_backward(&d_cur, fc, fc_cache);
        grads.head_fcs[i].w += &dw;
        grads.head_fcs[i].b += &db;
        d_cur = dx;
    }
    let dim = d_cur.ncols() / 2;
    let da = d_cur.slice(ndarray::s![.., ..dim]).to_owned();
    let db = d_cur.slice(ndarray::s![.., dim..]).to_owned();
    (da, db)
}

/// Numerically stable binary cross-entropy on logits.
/// Returns per-pair mean loss and d(loss)/d(logit).
pub fn bce_with_logits(logits: &Array1<f64>, labels: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut dz = Array1::<f64>::zeros(logits.raw_dim());
    for (i, (&z, &y)) in logits.iter().zip(labels.iter()).enumerate() {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        dz[i] = (sigmoid(z) - y) / n;
    }
    (total / n, dz)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stacks (s, s) patches into an (n, s, s, 1) batch.
pub fn stack_patches(patches: &[ArrayView2<f64>]) -> Result<Array4<f64>> {
    if patches.is_empty() {
        return Err(Error::Shape("empty patch batch".to_string()));
    }
    let (h, w) = patches[0].dim();
    let mut out = Array4::<f64>::zeros((patches.len(), h, w, 1));
    for (i, p) in patches.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "patch {i} has shape {:?}, expected {:?}",
                p.dim(),
                (h, w)
            )));
        }
        out.slice_mut(ndarray::s![i, .., .., 0]).assign(p);
    }
    Ok(out)
}

/// ADAM optimizer state over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
