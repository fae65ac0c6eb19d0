//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward computation as a
//! flat `f64` buffer plus the operation that produced it. Nodes are created
//! in topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Graphs are rebuilt per iteration; batches
//! run one tape per image and merge parameter gradients afterwards.

mod adam;
mod checkpoint;
mod conv;
mod gemm;
pub mod gradcheck;

pub use adam::{AdamConfig, ParamSet, Parameter};
pub use checkpoint::{load_checkpoint_into, read_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use conv::ConvDims;
use std::sync::Arc;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// How a steerable-basis weight vector expands into a dense conv kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandKind {
    /// scalar field in, regular field out: one rotated filter per group element
    Lifting,
    /// regular in/out: filter rotation plus a cyclic shift of input group channels
    Regular,
}

/// Precomputed rotated basis atoms driving [`Tape::reconv_expand`].
#[derive(Debug, Clone)]
pub struct ExpandTable {
    pub kind: ExpandKind,
    pub fields_in: usize,
    pub fields_out: usize,
    pub n_rot: usize,
    pub n_atoms: usize,
    pub kernel_size: usize,
    /// `[n_rot][n_atoms][k*k]`, atom grids rotated by each group element.
    pub rotated: Vec<f64>,
}

impl ExpandTable {
    fn atom(&self, rot: usize, atom: usize) -> &[f64] {
        let kk = self.kernel_size * self.kernel_size;
        let base = (rot * self.n_atoms + atom) * kk;
        &self.rotated[base..base + kk]
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            ExpandKind::Lifting => self.fields_out * self.n_atoms,
            ExpandKind::Regular => self.fields_out * self.fields_in * self.n_rot * self.n_atoms,
        }
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let cin = match self.kind {
            ExpandKind::Lifting => 1,
            ExpandKind::Regular => self.fields_in * self.n_rot,
        };
        vec![
            self.fields_out * self.n_rot,
            cin,
            self.kernel_size,
            self.kernel_size,
        ]
    }
}

enum Op {
    Leaf,
    Param {
        slot: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        padding: usize,
    },
    BiasAdd {
        input: usize,
        bias: usize,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    AddScalar {
        input: usize,
    },
    MulScalar {
        input: usize,
        c: f64,
    },
    Log {
        input: usize,
    },
    Sqrt {
        input: usize,
    },
    SumAll {
        input: usize,
    },
    MeanAll {
        input: usize,
    },
    SumAxis {
        input: usize,
        axis: usize,
    },
    SoftmaxTemp {
        input: usize,
        t: f64,
    },
    Gather {
        input: usize,
        points: Vec<(usize, usize)>,
    },
    GatherChannels {
        input: usize,
        points: Vec<(usize, usize)>,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    L2NormChannels {
        input: usize,
        eps: f64,
    },
    BlockMax {
        input: usize,
        window: usize,
        argmax: Vec<usize>,
    },
    BlockMean {
        input: usize,
        window: usize,
    },
    BilinearGather {
        input: usize,
        samples: Arc<Vec<[(usize, f64); 4]>>,
    },
    ChannelGroupMean {
        input: usize,
        group: usize,
    },
    ReconvExpand {
        weights: usize,
        table: Arc<ExpandTable>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Bring a registered parameter onto the tape as a trainable leaf.
    pub fn param(&mut self, params: &ParamSet, slot: usize) -> TensorId {
        let p = params.get(slot);
        self.push(p.shape.clone(), p.data.clone(), Op::Param { slot })
    }

    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, padding: usize) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: ishape.clone(),
            rhs: kshape.clone(),
        };
        if ishape.len() != 3 || kshape.len() != 4 || ishape[0] != kshape[1] || kshape[2] != kshape[3] {
            return Err(mismatch());
        }
        let k = kshape[2];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: kernel size {k} must be odd")));
        }
        if ishape[1] + 2 * padding < k || ishape[2] + 2 * padding < k {
            return Err(mismatch());
        }
        let d = ConvDims::new(ishape[0], ishape[1], ishape[2], kshape[0], k, padding);
        let out = conv::conv2d_forward(&self.node(input).data, &self.node(kernel).data, &d);
        Ok(self.push(
            vec![d.c_out, d.h_out, d.w_out],
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                padding,
            },
        ))
    }

    pub fn bias_add(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 || bshape != vec![ishape[0]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: ishape,
                rhs: bshape,
            });
        }
        let plane = ishape[1] * ishape[2];
        let mut out = self.node(input).data.clone();
        for c in 0..ishape[0] {
            let b = self.node(bias).data[c];
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
        Ok(self.push(
            ishape,
            out,
            Op::BiasAdd {
                input: input.0,
                bias: bias.0,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.leaky_relu(input, 0.0)
    }

    pub fn leaky_relu(&mut self, input: TensorId, slope: f64) -> TensorId {
        let out: Vec<f64> = self
            .node(input)
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(
            shape,
            out,
            Op::LeakyRelu {
                input: input.0,
                slope,
            },
        )
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn add_scalar(&mut self, input: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.node(input).data.iter().map(|&x| x + c).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::AddScalar { input: input.0 })
    }

    pub fn mul_scalar(&mut self, input: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.node(input).data.iter().map(|&x| x * c).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::MulScalar { input: input.0, c })
    }

    pub fn log(&mut self, input: TensorId) -> TensorId {
        let out: Vec<f64> = self.node(input).data.iter().map(|&x| x.ln()).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Log { input: input.0 })
    }

    pub fn sqrt(&mut self, input: TensorId) -> TensorId {
        let out: Vec<f64> = self.node(input).data.iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Sqrt { input: input.0 })
    }

    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.node(input).data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { input: input.0 })
    }

    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let n = self.node(input).data.len() as f64;
        let s: f64 = self.node(input).data.iter().sum();
        self.push(vec![1], vec![s / n], Op::MeanAll { input: input.0 })
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = &self.node(input).data;
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].to_vec();
        oshape.extend_from_slice(&shape[axis + 1..]);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(
            oshape,
            out,
            Op::SumAxis {
                input: input.0,
                axis,
            },
        ))
    }

    /// Temperature softmax over every element, with max subtraction.
    pub fn softmax_temp(&mut self, input: TensorId, t: f64) -> Result<TensorId> {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {t}")));
        }
        let data = &self.node(input).data;
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = data.iter().map(|&x| ((x - max) / t).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxTemp { input: input.0, t }))
    }

    /// Read values at integer (row, col) locations of a `[H, W]` map.
    pub fn gather(&mut self, input: TensorId, points: &[(usize, usize)]) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("gather expects a [H, W] map"));
        }
        let (h, w) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(points.len());
        for &(r, c) in points {
            if r >= h || c >= w {
                return Err(Error::invalid(format!("gather: point ({r}, {c}) outside {h}x{w}")));
            }
            out.push(self.node(input).data[r * w + c]);
        }
        Ok(self.push(
            vec![points.len()],
            out,
            Op::Gather {
                input: input.0,
                points: points.to_vec(),
            },
        ))
    }

    /// Read whole channel vectors at (row, col) locations of `[C, H, W]` -> `[n, C]`.
    pub fn gather_channels(&mut self, input: TensorId, points: &[(usize, usize)]) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("gather_channels expects [C, H, W]"));
        }
        let (c_n, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(points.len() * c_n);
        for &(r, c) in points {
            if r >= h || c >= w {
                return Err(Error::invalid(format!(
                    "gather_channels: point ({r}, {c}) outside {h}x{w}"
                )));
            }
            for ch in 0..c_n {
                out.push(self.node(input).data[(ch * h + r) * w + c]);
            }
        }
        Ok(self.push(
            vec![points.len(), c_n],
            out,
            Op::GatherChannels {
                input: input.0,
                points: points.to_vec(),
            },
        ))
    }

    /// 2x max-pool; spatial dims must be even.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::invalid(format!(
                "maxpool2 expects [C, H, W] with even H and W, got {shape:?}"
            )));
        }
        let (c_n, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h / 2, w / 2);
        let data = &self.node(input).data;
        let mut out = vec![0.0; c_n * ho * wo];
        let mut argmax = vec![0usize; c_n * ho * wo];
        for c in 0..c_n {
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut besti = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (c * h + 2 * y + dy) * w + 2 * x + dx;
                            if data[idx] > best {
                                best = data[idx];
                                besti = idx;
                            }
                        }
                    }
                    let o = (c * ho + y) * wo + x;
                    out[o] = best;
                    argmax[o] = besti;
                }
            }
        }
        Ok(self.push(
            vec![c_n, ho, wo],
            out,
            Op::MaxPool2 {
                input: input.0,
                argmax,
            },
        ))
    }

    /// 2x nearest-neighbour upsample.
    pub fn upsample2_nearest(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("upsample2_nearest expects [C, H, W]"));
        }
        let (c_n, h, w) = (shape[0], shape[1], shape[2]);
        let data = &self.node(input).data;
        let mut out = vec![0.0; c_n * 4 * h * w];
        for c in 0..c_n {
            for y in 0..h {
                for x in 0..w {
                    let v = data[(c * h + y) * w + x];
                    let base = (c * 2 * h + 2 * y) * 2 * w + 2 * x;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + 2 * w] = v;
                    out[base + 2 * w + 1] = v;
                }
            }
        }
        Ok(self.push(vec![c_n, 2 * h, 2 * w], out, Op::Upsample2 { input: input.0 }))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Vec::with_capacity((sa[0] + sb[0]) * sa[1] * sa[2]);
        out.extend_from_slice(&self.node(a).data);
        out.extend_from_slice(&self.node(b).data);
        Ok(self.push(
            vec![sa[0] + sb[0], sa[1], sa[2]],
            out,
            Op::ConcatChannels { a: a.0, b: b.0 },
        ))
    }

    /// Normalize each pixel's channel vector to unit L2 norm.
    pub fn l2_normalize_channels(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("l2_normalize_channels expects [C, H, W]"));
        }
        let eps = 1e-12;
        let (c_n, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let data = &self.node(input).data;
        let mut out = vec![0.0; data.len()];
        for p in 0..plane {
            let mut s = 0.0;
            for c in 0..c_n {
                let v = data[c * plane + p];
                s += v * v;
            }
            let inv = 1.0 / (s + eps).sqrt();
            for c in 0..c_n {
                out[c * plane + p] = data[c * plane + p] * inv;
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::L2NormChannels {
                input: input.0,
                eps,
            },
        ))
    }

    fn block_grid(shape: &[usize], window: usize) -> Result<(usize, usize)> {
        if shape.len() != 2 {
            return Err(Error::invalid("block ops expect a [H, W] map"));
        }
        if window == 0 || window > shape[0] || window > shape[1] {
            return Err(Error::invalid(format!(
                "window {window} larger than map {}x{}",
                shape[0], shape[1]
            )));
        }
        Ok((shape[0].div_ceil(window), shape[1].div_ceil(window)))
    }

    /// Per-tile max over a non-overlapping `window` tiling (edge tiles may be partial).
    pub fn block_max(&mut self, input: TensorId, window: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let (gh, gw) = Self::block_grid(&shape, window)?;
        let (h, w) = (shape[0], shape[1]);
        let data = &self.node(input).data;
        let mut out = vec![0.0; gh * gw];
        let mut argmax = vec![0usize; gh * gw];
        for by in 0..gh {
            for bx in 0..gw {
                let mut best = f64::NEG_INFINITY;
                let mut besti = 0;
                for y in by * window..((by + 1) * window).min(h) {
                    for x in bx * window..((bx + 1) * window).min(w) {
                        if data[y * w + x] > best {
                            best = data[y * w + x];
                            besti = y * w + x;
                        }
                    }
                }
                out[by * gw + bx] = best;
                argmax[by * gw + bx] = besti;
            }
        }
        Ok(self.push(
            vec![gh * gw],
            out,
            Op::BlockMax {
                input: input.0,
                window,
                argmax,
            },
        ))
    }

    /// Per-tile mean over the same tiling as [`Tape::block_max`].
    pub fn block_mean(&mut self, input: TensorId, window: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let (gh, gw) = Self::block_grid(&shape, window)?;
        let (h, w) = (shape[0], shape[1]);
        let data = &self.node(input).data;
        let mut out = vec![0.0; gh * gw];
        for by in 0..gh {
            for bx in 0..gw {
                let mut s = 0.0;
                let mut n = 0usize;
                for y in by * window..((by + 1) * window).min(h) {
                    for x in bx * window..((bx + 1) * window).min(w) {
                        s += data[y * w + x];
                        n += 1;
                    }
                }
                out[by * gw + bx] = s / n as f64;
            }
        }
        Ok(self.push(
            vec![gh * gw],
            out,
            Op::BlockMean {
                input: input.0,
                window,
            },
        ))
    }

    /// Weighted 4-tap reads from a `[H, W]` map (bilinear warp support).
    pub fn bilinear_gather(
        &mut self,
        input: TensorId,
        samples: Arc<Vec<[(usize, f64); 4]>>,
    ) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("bilinear_gather expects a [H, W] map"));
        }
        let n = shape[0] * shape[1];
        let data = &self.node(input).data;
        let mut out = Vec::with_capacity(samples.len());
        for taps in samples.iter() {
            let mut v = 0.0;
            for &(idx, wgt) in taps {
                if idx >= n {
                    return Err(Error::invalid("bilinear_gather: tap outside the map"));
                }
                v += wgt * data[idx];
            }
            out.push(v);
        }
        Ok(self.push(
            vec![samples.len()],
            out,
            Op::BilinearGather {
                input: input.0,
                samples,
            },
        ))
    }

    /// Mean over consecutive channel groups: `[C, H, W]` -> `[C/group, H, W]`.
    pub fn channel_group_mean(&mut self, input: TensorId, group: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 || group == 0 || shape[0] % group != 0 {
            return Err(Error::invalid(format!(
                "channel_group_mean: cannot split {shape:?} into groups of {group}"
            )));
        }
        let (c_n, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let co = c_n / group;
        let data = &self.node(input).data;
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            for g in 0..group {
                let base = (o * group + g) * plane;
                for p in 0..plane {
                    out[o * plane + p] += data[base + p];
                }
            }
        }
        let inv = 1.0 / group as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(
            vec![co, h, w],
            out,
            Op::ChannelGroupMean {
                input: input.0,
                group,
            },
        ))
    }

    /// Materialize a steerable conv kernel from basis weights.
    pub fn reconv_expand(&mut self, weights: TensorId, table: Arc<ExpandTable>) -> Result<TensorId> {
        let wlen = self.node(weights).data.len();
        if wlen != table.weight_len() {
            return Err(Error::ShapeMismatch {
                op: "reconv_expand",
                lhs: vec![wlen],
                rhs: vec![table.weight_len()],
            });
        }
        let kshape = table.kernel_shape();
        let kk = table.kernel_size * table.kernel_size;
        let n = table.n_rot;
        let a_n = table.n_atoms;
        let wdata = &self.node(weights).data;
        let mut out = vec![0.0; numel(&kshape)];
        match table.kind {
            ExpandKind::Lifting => {
                for o in 0..table.fields_out {
                    for ro in 0..n {
                        let dst = (o * n + ro) * kk;
                        for a in 0..a_n {
                            let wv = wdata[o * a_n + a];
                            let atom = table.atom(ro, a);
                            for (i, av) in atom.iter().enumerate() {
                                out[dst + i] += wv * av;
                            }
                        }
                    }
                }
            }
            ExpandKind::Regular => {
                let cin = table.fields_in * n;
                for o in 0..table.fields_out {
                    for ro in 0..n {
                        for i in 0..table.fields_in {
                            for ri in 0..n {
                                let delta = (ri + n - ro) % n;
                                let wbase = ((o * table.fields_in + i) * n + delta) * a_n;
                                let dst = ((o * n + ro) * cin + i * n + ri) * kk;
                                for a in 0..a_n {
                                    let wv = wdata[wbase + a];
                                    let atom = table.atom(ro, a);
                                    for (j, av) in atom.iter().enumerate() {
                                        out[dst + j] += wv * av;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            kshape,
            out,
            Op::ReconvExpand {
                weights: weights.0,
                table,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Fills `grad` for every node the
    /// loss depends on; untouched nodes keep `grad = None`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            self.backward_node(i);
        }
        Ok(())
    }

    /// Gradients accumulated on parameter leaves, as `(slot, grad)` pairs.
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.grad) {
                (Op::Param { slot }, Some(g)) => Some((*slot, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    fn backward_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let Some(g) = node.grad.as_ref() else {
            return;
        };

        let acc = |nodes: &mut [Node], idx: usize, contrib: Vec<f64>| {
            let n = &mut nodes[idx];
            let grad = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
            for (gv, cv) in grad.iter_mut().zip(&contrib) {
                *gv += cv;
            }
        };

        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                padding,
            } => {
                let ishape = &before[*input].shape;
                let kshape = &before[*kernel].shape;
                let d = ConvDims::new(ishape[0], ishape[1], ishape[2], kshape[0], kshape[2], *padding);
                let (gin, gk) = conv::conv2d_backward(&before[*input].data, &before[*kernel].data, g, &d);
                acc(before, *input, gin);
                acc(before, *kernel, gk);
            }
            Op::BiasAdd { input, bias } => {
                let c_n = before[*bias].data.len();
                let plane = node.data.len() / c_n;
                let mut gb = vec![0.0; c_n];
                for c in 0..c_n {
                    gb[c] = g[c * plane..(c + 1) * plane].iter().sum();
                }
                acc(before, *input, g.clone());
                acc(before, *bias, gb);
            }
            Op::LeakyRelu { input, slope } => {
                let contrib: Vec<f64> = before[*input]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { slope * gv })
                    .collect();
                acc(before, *input, contrib);
            }
            Op::Add { a, b } => {
                let g = g.clone();
                acc(before, *a, g.clone());
                acc(before, *b, g);
            }
            Op::Sub { a, b } => {
                acc(before, *a, g.clone());
                acc(before, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = g.iter().zip(&before[*b].data).map(|(gv, bv)| gv * bv).collect();
                let gb: Vec<f64> = g.iter().zip(&before[*a].data).map(|(gv, av)| gv * av).collect();
                acc(before, *a, ga);
                acc(before, *b, gb);
            }
            Op::Div { a, b } => {
                let ga: Vec<f64> = g.iter().zip(&before[*b].data).map(|(gv, bv)| gv / bv).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&before[*a].data)
                    .zip(&before[*b].data)
                    .map(|((gv, av), bv)| -gv * av / (bv * bv))
                    .collect();
                acc(before, *a, ga);
                acc(before, *b, gb);
            }
            Op::AddScalar { input } => acc(before, *input, g.clone()),
            Op::MulScalar { input, c } => {
                acc(before, *input, g.iter().map(|gv| gv * c).collect());
            }
            Op::Log { input } => {
                let contrib: Vec<f64> = g.iter().zip(&before[*input].data).map(|(gv, xv)| gv / xv).collect();
                acc(before, *input, contrib);
            }
            Op::Sqrt { input } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gv, yv)| gv / (2.0 * yv))
                    .collect();
                acc(before, *input, contrib);
            }
            Op::SumAll { input } => {
                let n = before[*input].data.len();
                acc(before, *input, vec![g[0]; n]);
            }
            Op::MeanAll { input } => {
                let n = before[*input].data.len();
                acc(before, *input, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { input, axis } => {
                let shape = &before[*input].shape;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut contrib = vec![0.0; before[*input].data.len()];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for ii in 0..inner {
                            contrib[base + ii] = g[o * inner + ii];
                        }
                    }
                }
                acc(before, *input, contrib);
            }
            Op::SoftmaxTemp { input, t } => {
                let y = &node.data;
                let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| yv * (gv - dot) / t)
                    .collect();
                acc(before, *input, contrib);
            }
            Op::Gather { input, points } => {
                let w = before[*input].shape[1];
                let mut contrib = vec![0.0; before[*input].data.len()];
                for (gi, &(r, c)) in g.iter().zip(points) {
                    contrib[r * w + c] += gi;
                }
                acc(before, *input, contrib);
            }
            Op::GatherChannels { input, points } => {
                let shape = &before[*input].shape;
                let (c_n, h, w) = (shape[0], shape[1], shape[2]);
                let mut contrib = vec![0.0; before[*input].data.len()];
                for (pi, &(r, c)) in points.iter().enumerate() {
                    for ch in 0..c_n {
                        contrib[(ch * h + r) * w + c] += g[pi * c_n + ch];
                    }
                }
                acc(before, *input, contrib);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut contrib = vec![0.0; before[*input].data.len()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    contrib[idx] += gi;
                }
                acc(before, *input, contrib);
            }
            Op::Upsample2 { input } => {
                let shape = &before[*input].shape;
                let (c_n, h, w) = (shape[0], shape[1], shape[2]);
                let mut contrib = vec![0.0; before[*input].data.len()];
                for c in 0..c_n {
                    for y in 0..h {
                        for x in 0..w {
                            let base = (c * 2 * h + 2 * y) * 2 * w + 2 * x;
                            contrib[(c * h + y) * w + x] =
                                g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                        }
                    }
                }
                acc(before, *input, contrib);
            }
            Op::ConcatChannels { a, b } => {
                let na = before[*a].data.len();
                acc(before, *a, g[..na].to_vec());
                acc(before, *b, g[na..].to_vec());
            }
            Op::L2NormChannels { input, eps } => {
                let shape = &before[*input].shape;
                let (c_n, h, w) = (shape[0], shape[1], shape[2]);
                let plane = h * w;
                let x = &before[*input].data;
                let mut contrib = vec![0.0; x.len()];
                for p in 0..plane {
                    let mut s = 0.0;
                    let mut gdotx = 0.0;
                    for c in 0..c_n {
                        let v = x[c * plane + p];
                        s += v * v;
                        gdotx += g[c * plane + p] * v;
                    }
                    let norm2 = s + eps;
                    let inv = 1.0 / norm2.sqrt();
                    for c in 0..c_n {
                        contrib[c * plane + p] =
                            inv * (g[c * plane + p] - x[c * plane + p] * gdotx / norm2);
                    }
                }
                acc(before, *input, contrib);
            }
            Op::BlockMax { input, argmax, .. } => {
                let mut contrib = vec![0.0; before[*input].data.len()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    contrib[idx] += gi;
                }
                acc(before, *input, contrib);
            }
            Op::BlockMean { input, window } => {
                let shape = &before[*input].shape;
                let (h, w) = (shape[0], shape[1]);
                let gw = w.div_ceil(*window);
                let mut contrib = vec![0.0; before[*input].data.len()];
                for by in 0..h.div_ceil(*window) {
                    for bx in 0..gw {
                        let y1 = ((by + 1) * window).min(h);
                        let x1 = ((bx + 1) * window).min(w);
                        let n = (y1 - by * window) * (x1 - bx * window);
                        let gv = g[by * gw + bx] / n as f64;
                        for y in by * window..y1 {
                            for x in bx * window..x1 {
                                contrib[y * w + x] += gv;
                            }
                        }
                    }
                }
                acc(before, *input, contrib);
            }
            Op::BilinearGather { input, samples } => {
                let mut contrib = vec![0.0; before[*input].data.len()];
                for (gi, taps) in g.iter().zip(samples.iter()) {
                    for &(idx, wgt) in taps {
                        contrib[idx] += gi * wgt;
                    }
                }
                acc(before, *input, contrib);
            }
            Op::ChannelGroupMean { input, group } => {
                let shape = &before[*input].shape;
                let plane = shape[1] * shape[2];
                let co = shape[0] / group;
                let inv = 1.0 / *group as f64;
                let mut contrib = vec![0.0; before[*input].data.len()];
                for o in 0..co {
                    for gch in 0..*group {
                        let base = (o * group + gch) * plane;
                        for p in 0..plane {
                            contrib[base + p] = g[o * plane + p] * inv;
                        }
                    }
                }
                acc(before, *input, contrib);
            }
            Op::ReconvExpand { weights, table } => {
                let kk = table.kernel_size * table.kernel_size;
                let n = table.n_rot;
                let a_n = table.n_atoms;
                let mut gw = vec![0.0; before[*weights].data.len()];
                match table.kind {
                    ExpandKind::Lifting => {
                        for o in 0..table.fields_out {
                            for ro in 0..n {
                                let src = (o * n + ro) * kk;
                                for a in 0..a_n {
                                    let atom = table.atom(ro, a);
                                    let mut s = 0.0;
                                    for (j, av) in atom.iter().enumerate() {
                                        s += g[src + j] * av;
                                    }
                                    gw[o * a_n + a] += s;
                                }
                            }
                        }
                    }
                    ExpandKind::Regular => {
                        let cin = table.fields_in * n;
                        for o in 0..table.fields_out {
                            for ro in 0..n {
                                for i in 0..table.fields_in {
                                    for ri in 0..n {
                                        let delta = (ri + n - ro) % n;
                                        let wbase = ((o * table.fields_in + i) * n + delta) * a_n;
                                        let src = ((o * n + ro) * cin + i * n + ri) * kk;
                                        for a in 0..a_n {
                                            let atom = table.atom(ro, a);
                                            let mut s = 0.0;
                                            for (j, av) in atom.iter().enumerate() {
                                                s += g[src + j] * av;
                                            }
                                            gw[wbase + a] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(before, *weights, gw);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_map_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4, 4], vec![3.7; 16]).unwrap();
        let y = tape.softmax_temp(x, 2.5).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_element_analytic() {
        // [0, t*ln 3] at temperature t -> [0.25, 0.75]
        let t = 7.0;
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![0.0, t * 3.0_f64.ln()]).unwrap();
        let y = tape.softmax_temp(x, t).unwrap();
        assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![0.0, 1.0]).unwrap();
        assert!(tape.softmax_temp(x, 0.0).is_err());
        assert!(tape.softmax_temp(x, -1.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_stays_positive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let data: Vec<f64> = (0..64).map(|_| rng.random_range(-50.0..50.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&[8, 8], data).unwrap();
            let y = tape.softmax_temp(x, 3.0).unwrap();
            let s: f64 = tape.data(y).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(tape.data(y).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let p = tape.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn unreached_nodes_keep_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let q = tape.leaf(&[2], vec![5.0, 6.0]).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(q).is_none());
    }

    #[test]
    fn gather_backpropagates_to_single_cells() {
        let mut tape = Tape::new();
        let m = tape.leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = tape.gather(m, &[(1, 2), (0, 0), (1, 2)]).unwrap();
        assert_eq!(tape.data(v), &[6.0, 1.0, 6.0]);
        let s = tape.sum_all(v);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_and_pool_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let b = tape.leaf(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 4, 4]);
        let p = tape.maxpool2(c).unwrap();
        assert_eq!(tape.shape(p), &[3, 2, 2]);
        assert_eq!(tape.data(p)[0], 5.0);
        let u = tape.upsample2_nearest(p).unwrap();
        assert_eq!(tape.shape(u), &[3, 4, 4]);
    }

    #[test]
    fn l2_normalize_gives_unit_pixels() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&[3, 1, 2], vec![3.0, 1.0, 4.0, -2.0, 0.0, 2.0])
            .unwrap();
        let y = tape.l2_normalize_channels(x).unwrap();
        let d = tape.data(y);
        for p in 0..2 {
            let n: f64 = (0..3).map(|c| d[c * 2 + p] * d[c * 2 + p]).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let k = tape.leaf(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let err = tape.conv2d(x, k, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }
}
