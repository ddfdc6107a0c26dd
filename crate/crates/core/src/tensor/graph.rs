//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops record their inputs during the forward pass; `backward` walks the
//! tape in reverse and accumulates gradients into every `requires_grad`
//! leaf. Every forward op validates shapes up front and rejects non-finite
//! outputs instead of letting them propagate.
//!
//! Both execution modes produce bit-identical values: parallel mode only
//! partitions loops over independent output elements, leaving every
//! accumulation order unchanged. `Deterministic` additionally guarantees
//! single-sequence execution.

use rayon::prelude::*;

use super::{arg_err, shape_err, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Single-sequence execution; reductions run in fixed row-major order.
    Deterministic,
    /// Ops may partition work over output elements.
    Parallel,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias {
        a: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    BilinearSample {
        map: NodeId,
        coords: NodeId,
    },
    DskAggregate {
        features: NodeId,
        offsets: NodeId,
        modulation: NodeId,
        groups: usize,
        base: Vec<(f64, f64)>,
    },
    ConcatChannels(Vec<NodeId>),
    SliceChannels {
        input: NodeId,
        start: usize,
        len: usize,
    },
    AdaptiveAvgPool {
        input: NodeId,
        out_h: usize,
        out_w: usize,
    },
    UpsampleBilinear {
        input: NodeId,
        out_h: usize,
        out_w: usize,
    },
    Reshape(NodeId),
    ExtractPatches {
        input: NodeId,
        t: usize,
        p: usize,
    },
    ScatterPatches {
        input: NodeId,
        channels: usize,
        height: usize,
        width: usize,
        t: usize,
        p: usize,
    },
    MaskReplaceRows {
        tokens: NodeId,
        replacement: NodeId,
        mask: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    MaskedMse {
        pred: NodeId,
        target: Tensor<T>,
        mask: Vec<bool>,
        count: usize,
    },
    SoftCrossEntropy {
        logits: NodeId,
        target: Tensor<T>,
        weights: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients per node, populated for `requires_grad` leaves and interior
/// nodes reached during the backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: ExecMode,
}

#[inline]
fn idx3(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Clamped bilinear taps for a real-valued sample position.
/// Returns row/col index pairs and the four corner weights.
#[inline]
fn bilinear_taps<T: Real>(sy: T, sx: T, h: usize, w: usize) -> ([usize; 2], [usize; 2], [T; 4]) {
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    let y0f = sy.floor();
    let x0f = sx.floor();
    let fy = sy - y0f;
    let fx = sx - x0f;
    let y0 = y0f.to_f64() as isize;
    let x0 = x0f.to_f64() as isize;
    let i = [clamp(y0, h), clamp(y0 + 1, h)];
    let j = [clamp(x0, w), clamp(x0 + 1, w)];
    let one = T::one();
    let weights = [
        (one - fy) * (one - fx),
        (one - fy) * fx,
        fy * (one - fx),
        fy * fx,
    ];
    (i, j, weights)
}

/// Spatial derivative factors of a bilinear sample w.r.t. the fractional
/// offsets: (dvalue/dfy, dvalue/dfx) given the four tap values.
#[inline]
fn bilinear_spatial_grad<T: Real>(taps: [T; 4], fy: T, fx: T) -> (T, T) {
    let one = T::one();
    let [v00, v01, v10, v11] = taps;
    let dfy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
    let dfx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
    (dfy, dfx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_val<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Iteration geometry for ops that normalize along one axis.
fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(arg_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl<T: Real> Graph<T> {
    pub fn new(mode: ExecMode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, op_rec: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: op_rec,
            requires_grad,
        });
        Ok(id)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Inserts an input tensor. `requires_grad` marks it as a differentiable
    /// leaf for `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        rec: Op<T>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: sa.to_vec(),
            data,
        };
        let grad = self.any_grad(&[a, b]);
        self.push(op, value, rec, grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = Tensor {
            shape: self.shape_of(a).to_vec(),
            data: self.nodes[a.0].value.data().iter().map(|&x| x * c).collect(),
        };
        let grad = self.nodes[a.0].requires_grad;
        self.push("scale", value, Op::Scale(a, c), grad)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor {
            shape: self.shape_of(a).to_vec(),
            data: self.nodes[a.0].value.data().iter().map(|&x| gelu_val(x)).collect(),
        };
        let grad = self.nodes[a.0].requires_grad;
        self.push("gelu", value, Op::Gelu(a), grad)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expected rank-2 operands, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); m * n];
        let row = |i: usize, out_row: &mut [T]| {
            for kk in 0..k {
                let av = da[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        };
        if self.mode == ExecMode::Parallel && m >= 16 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
        } else {
            for (i, r) in out.chunks_mut(n).enumerate() {
                row(i, r);
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let grad = self.any_grad(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), grad)
    }

    /// `[N,E] + [E]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 2 || self.nodes[bias.0].value.numel() != sa[1] {
            return Err(shape_err(
                "add_row_bias",
                format!("{:?} + {:?}", sa, self.shape_of(bias)),
            ));
        }
        let e = sa[1];
        let db = self.nodes[bias.0].value.data();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + db[i % e])
            .collect();
        let value = Tensor { shape: sa, data };
        let grad = self.any_grad(&[a, bias]);
        self.push("add_row_bias", value, Op::AddRowBias { a, bias }, grad)
    }

    /// `input [C,H,W]` * `kernel [O,C,kh,kw]` with zero padding.
    /// Output height is `(H + 2*pad - kh)/stride + 1`; the geometry must
    /// divide exactly.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let si = self.shape_of(input).to_vec();
        let sk = self.shape_of(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(shape_err("conv2d", format!("input {si:?}, kernel {sk:?}")));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ck != c {
            return Err(shape_err("conv2d", format!("kernel channels {ck} != input channels {c}")));
        }
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be >= 1"));
        }
        let span_h = h as isize + 2 * pad as isize - kh as isize;
        let span_w = w as isize + 2 * pad as isize - kw as isize;
        if span_h < 0 || span_w < 0 || span_h % stride as isize != 0 || span_w % stride as isize != 0 {
            return Err(arg_err(
                "conv2d",
                format!("geometry not divisible: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            ));
        }
        let oh = span_h as usize / stride + 1;
        let ow = span_w as usize / stride + 1;
        if let Some(b) = bias {
            if self.nodes[b.0].value.numel() != o {
                return Err(shape_err("conv2d", format!("bias numel != out channels {o}")));
            }
        }
        let din = self.nodes[input.0].value.data();
        let dk = self.nodes[kernel.0].value.data();
        let dbias = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let mut out = vec![T::zero(); o * oh * ow];
        let run_oc = |oc: usize, plane: &mut [T]| {
            let b0 = dbias.as_ref().map(|b| b[oc]).unwrap_or_else(T::zero);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ic in 0..c {
                        for i in 0..kh {
                            let iy = (oy * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += din[idx3(ic, iy as usize, ix as usize, h, w)]
                                    * dk[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        };
        if self.mode == ExecMode::Parallel && o >= 2 {
            out.par_chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(oc, plane)| run_oc(oc, plane));
        } else {
            for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
                run_oc(oc, plane);
            }
        }
        let value = Tensor {
            shape: vec![o, oh, ow],
            data: out,
        };
        let mut ids = vec![input, kernel];
        if let Some(b) = bias {
            ids.push(b);
        }
        let grad = self.any_grad(&ids);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            grad,
        )
    }

    /// Normalizes along `axis` to zero mean / unit variance, then applies a
    /// per-position affine `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, "layer_norm")?;
        if self.nodes[gamma.0].value.numel() != len || self.nodes[beta.0].value.numel() != len {
            return Err(shape_err(
                "layer_norm",
                format!("gamma/beta must have {len} elements for axis {axis} of {shape:?}"),
            ));
        }
        let dx = self.nodes[x.0].value.data();
        let dg = self.nodes[gamma.0].value.data();
        let db = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); dx.len()];
        let mut means = vec![T::zero(); outer * inner];
        let mut rstds = vec![T::zero(); outer * inner];
        let epst = T::from_f64(eps);
        let lent = T::from_f64(len as f64);
        for oi in 0..outer {
            for ii in 0..inner {
                let at = |l: usize| (oi * len + l) * inner + ii;
                let mut mean = T::zero();
                for l in 0..len {
                    mean += dx[at(l)];
                }
                mean /= lent;
                let mut var = T::zero();
                for l in 0..len {
                    let d = dx[at(l)] - mean;
                    var += d * d;
                }
                var /= lent;
                let rstd = T::one() / (var + epst).sqrt();
                means[oi * inner + ii] = mean;
                rstds[oi * inner + ii] = rstd;
                for l in 0..len {
                    let xhat = (dx[at(l)] - mean) * rstd;
                    out[at(l)] = dg[l] * xhat + db[l];
                }
            }
        }
        let value = Tensor { shape, data: out };
        let grad = self.any_grad(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                mean: means,
                rstd: rstds,
            },
            grad,
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape_of(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, "softmax")?;
        let dx = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); dx.len()];
        for oi in 0..outer {
            for ii in 0..inner {
                let at = |l: usize| (oi * len + l) * inner + ii;
                let mut maxv = dx[at(0)];
                for l in 1..len {
                    maxv = maxv.max(dx[at(l)]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (dx[at(l)] - maxv).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let value = Tensor { shape, data: out };
        let grad = self.nodes[x.0].requires_grad;
        self.push("softmax", value, Op::Softmax { x, axis }, grad)
    }

    /// Samples `map [C,H,W]` at real-valued `coords [K,2]` (y, x) rows.
    /// Coordinates outside the grid clamp to the border. Output is `[C,K]`.
    pub fn bilinear_sample(&mut self, map: NodeId, coords: NodeId) -> Result<NodeId> {
        let sm = self.shape_of(map).to_vec();
        let sc = self.shape_of(coords).to_vec();
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("map {sm:?}, coords {sc:?}")));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let k = sc[0];
        let dm = self.nodes[map.0].value.data();
        let dc = self.nodes[coords.0].value.data();
        let mut out = vec![T::zero(); c * k];
        for ki in 0..k {
            let (i, j, wt) = bilinear_taps(dc[2 * ki], dc[2 * ki + 1], h, w);
            for ci in 0..c {
                let v = wt[0] * dm[idx3(ci, i[0], j[0], h, w)]
                    + wt[1] * dm[idx3(ci, i[0], j[1], h, w)]
                    + wt[2] * dm[idx3(ci, i[1], j[0], h, w)]
                    + wt[3] * dm[idx3(ci, i[1], j[1], h, w)];
                out[ci * k + ki] = v;
            }
        }
        let value = Tensor {
            shape: vec![c, k],
            data: out,
        };
        let grad = self.any_grad(&[map, coords]);
        self.push(
            "bilinear_sample",
            value,
            Op::BilinearSample { map, coords },
            grad,
        )
    }

    /// Deformable aggregation: for every pixel `q` and channel group `g`,
    /// sums `K` bilinear samples of the group's features at
    /// `q + base[k] + offsets[g,k]`, weighted by `modulation[g,k]`.
    ///
    /// `offsets` is `[G*K*2, H, W]` (dy, dx interleaved per point),
    /// `modulation` is `[G*K, H, W]` and is expected to be normalized over
    /// `K` by the caller.
    pub fn dsk_aggregate(
        &mut self,
        features: NodeId,
        offsets: NodeId,
        modulation: NodeId,
        groups: usize,
        base: Vec<(f64, f64)>,
    ) -> Result<NodeId> {
        let sf = self.shape_of(features).to_vec();
        let so = self.shape_of(offsets).to_vec();
        let sm = self.shape_of(modulation).to_vec();
        if sf.len() != 3 || so.len() != 3 || sm.len() != 3 {
            return Err(shape_err("dsk_aggregate", format!("features {sf:?}, offsets {so:?}, modulation {sm:?}")));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let k = base.len();
        if k == 0 {
            return Err(arg_err("dsk_aggregate", "base point set is empty"));
        }
        if groups == 0 || c % groups != 0 {
            return Err(arg_err("dsk_aggregate", format!("groups {groups} must divide channels {c}")));
        }
        if so != [groups * k * 2, h, w] || sm != [groups * k, h, w] {
            return Err(shape_err(
                "dsk_aggregate",
                format!("expected offsets [{},{h},{w}] and modulation [{},{h},{w}]", groups * k * 2, groups * k),
            ));
        }
        let cpg = c / groups;
        let df = self.nodes[features.0].value.data();
        let doff = self.nodes[offsets.0].value.data();
        let dmod = self.nodes[modulation.0].value.data();
        let mut out = vec![T::zero(); c * h * w];
        let run_group = |g: usize, chunk: &mut [T]| {
            for y in 0..h {
                for x in 0..w {
                    for ki in 0..k {
                        let gk = g * k + ki;
                        let m = dmod[idx3(gk, y, x, h, w)];
                        let sy = T::from_f64(y as f64 + base[ki].0) + doff[idx3(2 * gk, y, x, h, w)];
                        let sx = T::from_f64(x as f64 + base[ki].1) + doff[idx3(2 * gk + 1, y, x, h, w)];
                        let (i, j, wt) = bilinear_taps(sy, sx, h, w);
                        for cl in 0..cpg {
                            let ci = g * cpg + cl;
                            let v = wt[0] * df[idx3(ci, i[0], j[0], h, w)]
                                + wt[1] * df[idx3(ci, i[0], j[1], h, w)]
                                + wt[2] * df[idx3(ci, i[1], j[0], h, w)]
                                + wt[3] * df[idx3(ci, i[1], j[1], h, w)];
                            chunk[idx3(cl, y, x, h, w)] += m * v;
                        }
                    }
                }
            }
        };
        if self.mode == ExecMode::Parallel && groups >= 2 {
            out.par_chunks_mut(cpg * h * w)
                .enumerate()
                .for_each(|(g, chunk)| run_group(g, chunk));
        } else {
            for (g, chunk) in out.chunks_mut(cpg * h * w).enumerate() {
                run_group(g, chunk);
            }
        }
        let value = Tensor {
            shape: vec![c, h, w],
            data: out,
        };
        let grad = self.any_grad(&[features, offsets, modulation]);
        self.push(
            "dsk_aggregate",
            value,
            Op::DskAggregate {
                features,
                offsets,
                modulation,
                groups,
                base,
            },
            grad,
        )
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(arg_err("concat_channels", "no inputs"));
        }
        let first = self.shape_of(inputs[0]).to_vec();
        if first.len() != 3 {
            return Err(shape_err("concat_channels", format!("expected [C,H,W], got {first:?}")));
        }
        let (h, w) = (first[1], first[2]);
        let mut total_c = 0usize;
        for &id in inputs {
            let s = self.shape_of(id);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(shape_err("concat_channels", format!("{s:?} vs [{h},{w}] spatial dims")));
            }
            total_c += s[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &id in inputs {
            data.extend_from_slice(self.nodes[id.0].value.data());
        }
        let value = Tensor {
            shape: vec![total_c, h, w],
            data,
        };
        let grad = self.any_grad(inputs);
        self.push("concat_channels", value, Op::ConcatChannels(inputs.to_vec()), grad)
    }

    /// Channel range `[start, start+len)` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 || start + len > s[0] || len == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("range {start}..{} of {s:?}", start + len),
            ));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let data = self.nodes[input.0].value.data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor {
            shape: vec![len, h, w],
            data,
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push(
            "slice_channels",
            value,
            Op::SliceChannels { input, start, len },
            grad,
        )
    }

    /// Adaptive average pooling of `[C,H,W]` to `[C,out_h,out_w]`.
    pub fn adaptive_avg_pool(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err("adaptive_avg_pool", format!("{s:?} -> [{out_h},{out_w}]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.nodes[input.0].value.data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = pool_span(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_span(ox, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += d[idx3(ci, y, x, h, w)];
                        }
                    }
                    let n = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out[idx3(ci, oy, ox, out_h, out_w)] = acc / n;
                }
            }
        }
        let value = Tensor {
            shape: vec![c, out_h, out_w],
            data: out,
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push(
            "adaptive_avg_pool",
            value,
            Op::AdaptiveAvgPool { input, out_h, out_w },
            grad,
        )
    }

    /// Bilinear resize of `[C,H,W]` to `[C,out_h,out_w]` (half-pixel centers).
    pub fn upsample_bilinear(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err("upsample_bilinear", format!("{s:?} -> [{out_h},{out_w}]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ytab = resize_taps(h, out_h);
        let xtab = resize_taps(w, out_w);
        let d = self.nodes[input.0].value.data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = ytab[oy];
                let fy = T::from_f64(fy);
                for ox in 0..out_w {
                    let (x0, x1, fx) = xtab[ox];
                    let fx = T::from_f64(fx);
                    let one = T::one();
                    let v = (one - fy) * (one - fx) * d[idx3(ci, y0, x0, h, w)]
                        + (one - fy) * fx * d[idx3(ci, y0, x1, h, w)]
                        + fy * (one - fx) * d[idx3(ci, y1, x0, h, w)]
                        + fy * fx * d[idx3(ci, y1, x1, h, w)];
                    out[idx3(ci, oy, ox, out_h, out_w)] = v;
                }
            }
        }
        let value = Tensor {
            shape: vec![c, out_h, out_w],
            data: out,
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push(
            "upsample_bilinear",
            value,
            Op::UpsampleBilinear { input, out_h, out_w },
            grad,
        )
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.nodes[input.0].value.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape_of(input)),
            ));
        }
        let value = Tensor {
            shape,
            data: self.nodes[input.0].value.data().to_vec(),
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push("reshape", value, Op::Reshape(input), grad)
    }

    /// Rearranges `[C,H,W]` into non-overlapping `t x p x p` patches:
    /// output `[N, t*p*p]` with `N = (C/t)(H/p)(W/p)`.
    pub fn extract_patches(&mut self, input: NodeId, t: usize, p: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 {
            return Err(shape_err("extract_patches", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if t == 0 || p == 0 || c % t != 0 || h % p != 0 || w % p != 0 {
            return Err(arg_err(
                "extract_patches",
                format!("patch {t}x{p}x{p} does not divide [{c},{h},{w}]"),
            ));
        }
        let d = self.nodes[input.0].value.data();
        let out = patch_permute(d, c, h, w, t, p, true);
        let n = (c / t) * (h / p) * (w / p);
        let value = Tensor {
            shape: vec![n, t * p * p],
            data: out,
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push("extract_patches", value, Op::ExtractPatches { input, t, p }, grad)
    }

    /// Inverse of [`Graph::extract_patches`]: `[N, t*p*p]` back to `[C,H,W]`.
    pub fn scatter_patches(
        &mut self,
        input: NodeId,
        channels: usize,
        height: usize,
        width: usize,
        t: usize,
        p: usize,
    ) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if t == 0 || p == 0 || channels % t != 0 || height % p != 0 || width % p != 0 {
            return Err(arg_err(
                "scatter_patches",
                format!("patch {t}x{p}x{p} does not divide [{channels},{height},{width}]"),
            ));
        }
        let n = (channels / t) * (height / p) * (width / p);
        if s != [n, t * p * p] {
            return Err(shape_err(
                "scatter_patches",
                format!("expected [{n},{}], got {s:?}", t * p * p),
            ));
        }
        let d = self.nodes[input.0].value.data();
        let out = patch_permute(d, channels, height, width, t, p, false);
        let value = Tensor {
            shape: vec![channels, height, width],
            data: out,
        };
        let grad = self.nodes[input.0].requires_grad;
        self.push(
            "scatter_patches",
            value,
            Op::ScatterPatches {
                input,
                channels,
                height,
                width,
                t,
                p,
            },
            grad,
        )
    }

    /// Replaces the rows of `tokens [N,E]` listed in `mask` with a single
    /// `replacement [E]` row. Unmasked rows pass through untouched.
    pub fn mask_replace_rows(
        &mut self,
        tokens: NodeId,
        replacement: NodeId,
        mask: &[usize],
    ) -> Result<NodeId> {
        let st = self.shape_of(tokens).to_vec();
        if st.len() != 2 {
            return Err(shape_err("mask_replace_rows", format!("tokens {st:?}")));
        }
        let (n, e) = (st[0], st[1]);
        if self.nodes[replacement.0].value.numel() != e {
            return Err(shape_err("mask_replace_rows", format!("replacement numel != {e}")));
        }
        let mut seen = vec![false; n];
        for &i in mask {
            if i >= n {
                return Err(arg_err("mask_replace_rows", format!("mask index {i} >= {n} tokens")));
            }
            if seen[i] {
                return Err(arg_err("mask_replace_rows", format!("duplicate mask index {i}")));
            }
            seen[i] = true;
        }
        let dr = self.nodes[replacement.0].value.data().to_vec();
        let mut data = self.nodes[tokens.0].value.data().to_vec();
        for &i in mask {
            data[i * e..(i + 1) * e].copy_from_slice(&dr);
        }
        let value = Tensor { shape: st, data };
        let grad = self.any_grad(&[tokens, replacement]);
        self.push(
            "mask_replace_rows",
            value,
            Op::MaskReplaceRows {
                tokens,
                replacement,
                mask: mask.to_vec(),
            },
            grad,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let grad = self.nodes[a.0].requires_grad;
        self.push("sum", Tensor::scalar(acc), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let grad = self.nodes[a.0].requires_grad;
        self.push(
            "mean",
            Tensor::scalar(acc / T::from_f64(n as f64)),
            Op::Mean(a),
            grad,
        )
    }

    /// Half mean squared error over masked positions only:
    /// `0.5 * mean_{i in mask} (pred_i - target_i)^2`.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor<T>, mask: Vec<bool>) -> Result<NodeId> {
        let sp = self.shape_of(pred);
        if sp != target.shape() || mask.len() != target.numel() {
            return Err(shape_err(
                "masked_mse",
                format!("pred {sp:?}, target {:?}, mask len {}", target.shape(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(arg_err("masked_mse", "mask selects no elements"));
        }
        let dp = self.nodes[pred.0].value.data();
        let mut acc = T::zero();
        for i in 0..dp.len() {
            if mask[i] {
                let d = dp[i] - target.data()[i];
                acc += d * d;
            }
        }
        let loss = T::from_f64(0.5) * acc / T::from_f64(count as f64);
        let grad = self.nodes[pred.0].requires_grad;
        self.push(
            "masked_mse",
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            grad,
        )
    }

    /// Class-weighted soft-target cross-entropy over `[m,H,W]` logits with an
    /// internal log-sum-exp-stabilized softmax; the per-pixel losses are
    /// averaged. Every target pixel must sum to 1 within 1e-4.
    pub fn soft_cross_entropy(
        &mut self,
        logits: NodeId,
        target: Tensor<T>,
        weights: Vec<T>,
    ) -> Result<NodeId> {
        let s = self.shape_of(logits).to_vec();
        if s.len() != 3 || target.shape() != s.as_slice() {
            return Err(shape_err(
                "soft_cross_entropy",
                format!("logits {s:?}, target {:?}", target.shape()),
            ));
        }
        let (m, h, w) = (s[0], s[1], s[2]);
        if weights.len() != m {
            return Err(shape_err("soft_cross_entropy", format!("weights len != {m} classes")));
        }
        let px = h * w;
        let dt = target.data();
        for i in 0..px {
            let mut sum = T::zero();
            for j in 0..m {
                sum += dt[j * px + i];
            }
            if (sum - T::one()).abs() > T::from_f64(1e-4) {
                return Err(arg_err(
                    "soft_cross_entropy",
                    format!("target pixel {i} sums to {} (expected 1)", sum.to_f64()),
                ));
            }
        }
        let dl = self.nodes[logits.0].value.data();
        let mut acc = T::zero();
        for i in 0..px {
            let mut maxv = dl[i];
            for j in 1..m {
                maxv = maxv.max(dl[j * px + i]);
            }
            let mut sum = T::zero();
            for j in 0..m {
                sum += (dl[j * px + i] - maxv).exp();
            }
            let lse = maxv + sum.ln();
            for j in 0..m {
                acc += weights[j] * dt[j * px + i] * (lse - dl[j * px + i]);
            }
        }
        let loss = acc / T::from_f64(px as f64);
        let grad = self.nodes[logits.0].requires_grad;
        self.push(
            "soft_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target,
                weights,
            },
            grad,
        )
    }

    /// Accumulates `d(root)/d(node)` for every reachable `requires_grad`
    /// node. `root` must be a scalar. Traversal order is the fixed reverse
    /// tape order, so results are deterministic.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(arg_err("backward", "root is not part of this graph"));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(arg_err(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape_of(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let ga = Tensor {
                    shape: g.shape().to_vec(),
                    data: g.data().iter().zip(db).map(|(&gv, &bv)| gv * bv).collect(),
                };
                let gb = Tensor {
                    shape: g.shape().to_vec(),
                    data: g.data().iter().zip(da).map(|(&gv, &av)| gv * av).collect(),
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor {
                    shape: g.shape().to_vec(),
                    data: g.data().iter().map(|&gv| gv * *c).collect(),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let dx = self.nodes[a.0].value.data();
                let ga = Tensor {
                    shape: g.shape().to_vec(),
                    data: g
                        .data()
                        .iter()
                        .zip(dx)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let sa = self.shape_of(*a);
                let sb = self.shape_of(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let dg = g.data();
                // dA = G . B^T
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += dg[i * n + j] * db[kk * n + j];
                        }
                        ga[i * k + kk] = acc;
                    }
                }
                // dB = A^T . G
                let mut gb = vec![T::zero(); k * n];
                for kk in 0..k {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for i in 0..m {
                            acc += da[i * k + kk] * dg[i * n + j];
                        }
                        gb[kk * n + j] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: ga });
                self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: gb });
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(grads, *a, g.clone());
                let e = self.nodes[bias.0].value.numel();
                let mut gb = vec![T::zero(); e];
                for (i, &gv) in g.data().iter().enumerate() {
                    gb[i % e] += gv;
                }
                let shape = self.shape_of(*bias).to_vec();
                self.accumulate(grads, *bias, Tensor { shape, data: gb });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(*input, *kernel, *bias, *stride, *pad, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                mean,
                rstd,
            } => {
                let shape = self.shape_of(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis, "layer_norm")?;
                let dx = self.nodes[x.0].value.data();
                let dg = self.nodes[gamma.0].value.data();
                let gdat = g.data();
                let mut gx = vec![T::zero(); dx.len()];
                let mut ggamma = vec![T::zero(); len];
                let mut gbeta = vec![T::zero(); len];
                let lent = T::from_f64(len as f64);
                for oi in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (oi * len + l) * inner + ii;
                        let mu = mean[oi * inner + ii];
                        let r = rstd[oi * inner + ii];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for l in 0..len {
                            let xhat = (dx[at(l)] - mu) * r;
                            let dxhat = gdat[at(l)] * dg[l];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            ggamma[l] += gdat[at(l)] * xhat;
                            gbeta[l] += gdat[at(l)];
                        }
                        mean_dxhat /= lent;
                        mean_dxhat_xhat /= lent;
                        for l in 0..len {
                            let xhat = (dx[at(l)] - mu) * r;
                            let dxhat = gdat[at(l)] * dg[l];
                            gx[at(l)] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor { shape, data: gx });
                let gshape = self.shape_of(*gamma).to_vec();
                let bshape = self.shape_of(*beta).to_vec();
                self.accumulate(grads, *gamma, Tensor { shape: gshape, data: ggamma });
                self.accumulate(grads, *beta, Tensor { shape: bshape, data: gbeta });
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape_of(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis, "softmax")?;
                let y = node.value.data();
                let gdat = g.data();
                let mut gx = vec![T::zero(); y.len()];
                for oi in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (oi * len + l) * inner + ii;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += gdat[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (gdat[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor { shape, data: gx });
            }
            Op::BilinearSample { map, coords } => {
                let sm = self.shape_of(*map);
                let (c, h, w) = (sm[0], sm[1], sm[2]);
                let k = self.shape_of(*coords)[0];
                let dm = self.nodes[map.0].value.data();
                let dc = self.nodes[coords.0].value.data();
                let gdat = g.data();
                let mut gmap = vec![T::zero(); c * h * w];
                let mut gcoords = vec![T::zero(); k * 2];
                for ki in 0..k {
                    let sy = dc[2 * ki];
                    let sx = dc[2 * ki + 1];
                    let (i, j, wt) = bilinear_taps(sy, sx, h, w);
                    let fy = sy - sy.floor();
                    let fx = sx - sx.floor();
                    for ci in 0..c {
                        let gv = gdat[ci * k + ki];
                        gmap[idx3(ci, i[0], j[0], h, w)] += wt[0] * gv;
                        gmap[idx3(ci, i[0], j[1], h, w)] += wt[1] * gv;
                        gmap[idx3(ci, i[1], j[0], h, w)] += wt[2] * gv;
                        gmap[idx3(ci, i[1], j[1], h, w)] += wt[3] * gv;
                        let taps = [
                            dm[idx3(ci, i[0], j[0], h, w)],
                            dm[idx3(ci, i[0], j[1], h, w)],
                            dm[idx3(ci, i[1], j[0], h, w)],
                            dm[idx3(ci, i[1], j[1], h, w)],
                        ];
                        let (dfy, dfx) = bilinear_spatial_grad(taps, fy, fx);
                        gcoords[2 * ki] += dfy * gv;
                        gcoords[2 * ki + 1] += dfx * gv;
                    }
                }
                self.accumulate(grads, *map, Tensor { shape: vec![c, h, w], data: gmap });
                self.accumulate(grads, *coords, Tensor { shape: vec![k, 2], data: gcoords });
            }
            Op::DskAggregate {
                features,
                offsets,
                modulation,
                groups,
                base,
            } => self.dsk_backward(*features, *offsets, *modulation, *groups, base, g, grads),
            Op::ConcatChannels(inputs) => {
                let (h, w) = {
                    let s = self.shape_of(inputs[0]);
                    (s[1], s[2])
                };
                let gdat = g.data();
                let mut offset = 0usize;
                for &inp in inputs {
                    let ci = self.shape_of(inp)[0];
                    let len = ci * h * w;
                    let part = Tensor {
                        shape: vec![ci, h, w],
                        data: gdat[offset..offset + len].to_vec(),
                    };
                    self.accumulate(grads, inp, part);
                    offset += len;
                }
            }
            Op::SliceChannels { input, start, len } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let plane = h * w;
                let mut gi = vec![T::zero(); c * plane];
                gi[start * plane..(start + len) * plane].copy_from_slice(g.data());
                self.accumulate(grads, *input, Tensor { shape: vec![c, h, w], data: gi });
            }
            Op::AdaptiveAvgPool { input, out_h, out_w } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let gdat = g.data();
                let mut gi = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for oy in 0..*out_h {
                        let (y0, y1) = pool_span(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = pool_span(ox, w, *out_w);
                            let n = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let gv = gdat[idx3(ci, oy, ox, *out_h, *out_w)] / n;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    gi[idx3(ci, y, x, h, w)] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor { shape: vec![c, h, w], data: gi });
            }
            Op::UpsampleBilinear { input, out_h, out_w } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let ytab = resize_taps(h, *out_h);
                let xtab = resize_taps(w, *out_w);
                let gdat = g.data();
                let mut gi = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for oy in 0..*out_h {
                        let (y0, y1, fy) = ytab[oy];
                        let fy = T::from_f64(fy);
                        for ox in 0..*out_w {
                            let (x0, x1, fx) = xtab[ox];
                            let fx = T::from_f64(fx);
                            let one = T::one();
                            let gv = gdat[idx3(ci, oy, ox, *out_h, *out_w)];
                            gi[idx3(ci, y0, x0, h, w)] += (one - fy) * (one - fx) * gv;
                            gi[idx3(ci, y0, x1, h, w)] += (one - fy) * fx * gv;
                            gi[idx3(ci, y1, x0, h, w)] += fy * (one - fx) * gv;
                            gi[idx3(ci, y1, x1, h, w)] += fy * fx * gv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor { shape: vec![c, h, w], data: gi });
            }
            Op::Reshape(input) => {
                let shape = self.shape_of(*input).to_vec();
                let gi = Tensor {
                    shape,
                    data: g.data().to_vec(),
                };
                self.accumulate(grads, *input, gi);
            }
            Op::ExtractPatches { input, t, p } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let gi = patch_permute(g.data(), c, h, w, *t, *p, false);
                self.accumulate(grads, *input, Tensor { shape: vec![c, h, w], data: gi });
            }
            Op::ScatterPatches {
                input,
                channels,
                height,
                width,
                t,
                p,
            } => {
                let gi = patch_permute(g.data(), *channels, *height, *width, *t, *p, true);
                let n = (channels / t) * (height / p) * (width / p);
                self.accumulate(
                    grads,
                    *input,
                    Tensor {
                        shape: vec![n, t * p * p],
                        data: gi,
                    },
                );
            }
            Op::MaskReplaceRows {
                tokens,
                replacement,
                mask,
            } => {
                let st = self.shape_of(*tokens);
                let (n, e) = (st[0], st[1]);
                let mut gt = g.data().to_vec();
                let mut gr = vec![T::zero(); e];
                for &i in mask {
                    for (col, slot) in gr.iter_mut().enumerate() {
                        *slot += gt[i * e + col];
                    }
                    gt[i * e..(i + 1) * e].fill(T::zero());
                }
                self.accumulate(grads, *tokens, Tensor { shape: vec![n, e], data: gt });
                let rshape = self.shape_of(*replacement).to_vec();
                self.accumulate(grads, *replacement, Tensor { shape: rshape, data: gr });
            }
            Op::Sum(a) => {
                let gv = g.item();
                let shape = self.shape_of(*a).to_vec();
                let n: usize = shape.iter().product();
                self.accumulate(grads, *a, Tensor { shape, data: vec![gv; n] });
            }
            Op::Mean(a) => {
                let shape = self.shape_of(*a).to_vec();
                let n: usize = shape.iter().product();
                let gv = g.item() / T::from_f64(n as f64);
                self.accumulate(grads, *a, Tensor { shape, data: vec![gv; n] });
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let gv = g.item() / T::from_f64(*count as f64);
                let dp = self.nodes[pred.0].value.data();
                let mut gp = vec![T::zero(); dp.len()];
                for i in 0..dp.len() {
                    if mask[i] {
                        gp[i] = gv * (dp[i] - target.data()[i]);
                    }
                }
                let shape = self.shape_of(*pred).to_vec();
                self.accumulate(grads, *pred, Tensor { shape, data: gp });
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                weights,
            } => {
                let s = self.shape_of(*logits);
                let (m, h, w) = (s[0], s[1], s[2]);
                let px = h * w;
                let dl = self.nodes[logits.0].value.data();
                let dt = target.data();
                let gv = g.item() / T::from_f64(px as f64);
                let mut gl = vec![T::zero(); dl.len()];
                for i in 0..px {
                    let mut maxv = dl[i];
                    for j in 1..m {
                        maxv = maxv.max(dl[j * px + i]);
                    }
                    let mut sum = T::zero();
                    for j in 0..m {
                        sum += (dl[j * px + i] - maxv).exp();
                    }
                    let mut wsum = T::zero();
                    for j in 0..m {
                        wsum += weights[j] * dt[j * px + i];
                    }
                    for j in 0..m {
                        let p = (dl[j * px + i] - maxv).exp() / sum;
                        gl[j * px + i] = gv * (wsum * p - weights[j] * dt[j * px + i]);
                    }
                }
                let shape = s.to_vec();
                self.accumulate(grads, *logits, Tensor { shape, data: gl });
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let si = self.shape_of(input);
        let sk = self.shape_of(kernel);
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let so = g.shape();
        let (oh, ow) = (so[1], so[2]);
        let din = self.nodes[input.0].value.data();
        let dk = self.nodes[kernel.0].value.data();
        let dg = g.data();
        let parallel = self.mode == ExecMode::Parallel;

        if self.nodes[input.0].requires_grad {
            // Gather form: every input pixel sums the output positions whose
            // receptive field covers it.
            let mut gi = vec![T::zero(); c * h * w];
            let run_ic = |ic: usize, plane: &mut [T]| {
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = T::zero();
                        for i in 0..kh {
                            let ynum = iy as isize + pad as isize - i as isize;
                            if ynum < 0 || ynum % stride as isize != 0 {
                                continue;
                            }
                            let oy = (ynum / stride as isize) as usize;
                            if oy >= oh {
                                continue;
                            }
                            for j in 0..kw {
                                let xnum = ix as isize + pad as isize - j as isize;
                                if xnum < 0 || xnum % stride as isize != 0 {
                                    continue;
                                }
                                let ox = (xnum / stride as isize) as usize;
                                if ox >= ow {
                                    continue;
                                }
                                for oc in 0..o {
                                    acc += dg[idx3(oc, oy, ox, oh, ow)]
                                        * dk[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        plane[iy * w + ix] = acc;
                    }
                }
            };
            if parallel && c >= 2 {
                gi.par_chunks_mut(h * w)
                    .enumerate()
                    .for_each(|(ic, plane)| run_ic(ic, plane));
            } else {
                for (ic, plane) in gi.chunks_mut(h * w).enumerate() {
                    run_ic(ic, plane);
                }
            }
            self.accumulate(grads, input, Tensor { shape: vec![c, h, w], data: gi });
        }

        if self.nodes[kernel.0].requires_grad {
            let mut gk = vec![T::zero(); o * c * kh * kw];
            let run_oc = |oc: usize, chunk: &mut [T]| {
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += dg[idx3(oc, oy, ox, oh, ow)]
                                        * din[idx3(ic, iy as usize, ix as usize, h, w)];
                                }
                            }
                            chunk[(ic * kh + i) * kw + j] = acc;
                        }
                    }
                }
            };
            if parallel && o >= 2 {
                gk.par_chunks_mut(c * kh * kw)
                    .enumerate()
                    .for_each(|(oc, chunk)| run_oc(oc, chunk));
            } else {
                for (oc, chunk) in gk.chunks_mut(c * kh * kw).enumerate() {
                    run_oc(oc, chunk);
                }
            }
            self.accumulate(grads, kernel, Tensor { shape: vec![o, c, kh, kw], data: gk });
        }

        if let Some(b) = bias {
            if self.nodes[b.0].requires_grad {
                let mut gb = vec![T::zero(); o];
                for oc in 0..o {
                    let mut acc = T::zero();
                    for v in &dg[oc * oh * ow..(oc + 1) * oh * ow] {
                        acc += *v;
                    }
                    gb[oc] = acc;
                }
                let shape = self.shape_of(b).to_vec();
                self.accumulate(grads, b, Tensor { shape, data: gb });
            }
        }
    }

    fn dsk_backward(
        &self,
        features: NodeId,
        offsets: NodeId,
        modulation: NodeId,
        groups: usize,
        base: &[(f64, f64)],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let sf = self.shape_of(features);
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let k = base.len();
        let cpg = c / groups;
        let df = self.nodes[features.0].value.data();
        let doff = self.nodes[offsets.0].value.data();
        let dmod = self.nodes[modulation.0].value.data();
        let dg = g.data();
        let mut gfeat = vec![T::zero(); c * h * w];
        let mut goff = vec![T::zero(); groups * k * 2 * h * w];
        let mut gmod = vec![T::zero(); groups * k * h * w];
        for gi in 0..groups {
            for y in 0..h {
                for x in 0..w {
                    for ki in 0..k {
                        let gk = gi * k + ki;
                        let m = dmod[idx3(gk, y, x, h, w)];
                        let sy = T::from_f64(y as f64 + base[ki].0) + doff[idx3(2 * gk, y, x, h, w)];
                        let sx = T::from_f64(x as f64 + base[ki].1) + doff[idx3(2 * gk + 1, y, x, h, w)];
                        let (i, j, wt) = bilinear_taps(sy, sx, h, w);
                        let fy = sy - sy.floor();
                        let fx = sx - sx.floor();
                        let mut dmod_acc = T::zero();
                        let mut dy_acc = T::zero();
                        let mut dx_acc = T::zero();
                        for cl in 0..cpg {
                            let ci = gi * cpg + cl;
                            let gout = dg[idx3(ci, y, x, h, w)];
                            let taps = [
                                df[idx3(ci, i[0], j[0], h, w)],
                                df[idx3(ci, i[0], j[1], h, w)],
                                df[idx3(ci, i[1], j[0], h, w)],
                                df[idx3(ci, i[1], j[1], h, w)],
                            ];
                            let v = wt[0] * taps[0] + wt[1] * taps[1] + wt[2] * taps[2] + wt[3] * taps[3];
                            dmod_acc += v * gout;
                            let coef = m * gout;
                            gfeat[idx3(ci, i[0], j[0], h, w)] += wt[0] * coef;
                            gfeat[idx3(ci, i[0], j[1], h, w)] += wt[1] * coef;
                            gfeat[idx3(ci, i[1], j[0], h, w)] += wt[2] * coef;
                            gfeat[idx3(ci, i[1], j[1], h, w)] += wt[3] * coef;
                            let (dfy, dfx) = bilinear_spatial_grad(taps, fy, fx);
                            dy_acc += dfy * coef;
                            dx_acc += dfx * coef;
                        }
                        gmod[idx3(gk, y, x, h, w)] += dmod_acc;
                        goff[idx3(2 * gk, y, x, h, w)] += dy_acc;
                        goff[idx3(2 * gk + 1, y, x, h, w)] += dx_acc;
                    }
                }
            }
        }
        self.accumulate(grads, features, Tensor { shape: vec![c, h, w], data: gfeat });
        self.accumulate(
            grads,
            offsets,
            Tensor {
                shape: vec![groups * k * 2, h, w],
                data: goff,
            },
        );
        self.accumulate(
            grads,
            modulation,
            Tensor {
                shape: vec![groups * k, h, w],
                data: gmod,
            },
        );
    }
}

/// Inclusive-start/exclusive-end row span for adaptive pooling cell `o`.
/// Always non-empty and within bounds for `o < out`.
#[inline]
fn pool_span(o: usize, size: usize, out: usize) -> (usize, usize) {
    (o * size / out, ((o + 1) * size).div_ceil(out))
}

/// Per-output-row source taps for bilinear resize with half-pixel centers:
/// (low index, high index, fraction).
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Permutation between `[C,H,W]` pixels and `[N, t*p*p]` patch rows.
/// `forward` gathers pixels into patch rows; otherwise scatters them back.
fn patch_permute<T: Real>(
    data: &[T],
    c: usize,
    h: usize,
    w: usize,
    t: usize,
    p: usize,
    forward: bool,
) -> Vec<T> {
    let (ct, hp, wp) = (c / t, h / p, w / p);
    let cols = t * p * p;
    let mut out = vec![T::zero(); c * h * w];
    for tc in 0..ct {
        for ty in 0..hp {
            for tx in 0..wp {
                let n = (tc * hp + ty) * wp + tx;
                for dt in 0..t {
                    for dy in 0..p {
                        for dx in 0..p {
                            let col = (dt * p + dy) * p + dx;
                            let pix = idx3(tc * t + dt, ty * p + dy, tx * p + dx, h, w);
                            if forward {
                                out[n * cols + col] = data[pix];
                            } else {
                                out[pix] = data[n * cols + col];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> Graph<f64> {
        Graph::new(ExecMode::Deterministic)
    }

    #[test]
    fn matmul_identity() {
        let mut g = det();
        let a = g
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let eye = g
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false)
            .unwrap();
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let yy = g.matmul(eye, eye).unwrap();
        assert_eq!(g.value(yy).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = det();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = det();
        let x = g
            .leaf(Tensor::from_fn(&[1, 3, 3], |i| i as f64), false)
            .unwrap();
        let k = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_box_kernel_counts_overlap() {
        let mut g = det();
        let x = g.leaf(Tensor::full(&[1, 4, 4], 1.0), false).unwrap();
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &expected);
    }

    #[test]
    fn conv2d_rejects_nondivisible_geometry() {
        let mut g = det();
        let x = g.leaf(Tensor::zeros(&[1, 5, 5]), false).unwrap();
        let k = g.leaf(Tensor::zeros(&[1, 1, 2, 2]), false).unwrap();
        // (5 - 2) % 2 != 0
        assert!(g.conv2d(x, k, None, 2, 0).is_err());
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = det();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap(), false).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x2 = g
            .leaf(Tensor::new(vec![2], vec![(2.0f64).ln(), 0.0]).unwrap(), false)
            .unwrap();
        let y2 = g.softmax(x2, 0).unwrap();
        assert!((g.value(y2).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y2).data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let mut g = det();
        let x = g
            .leaf(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), false)
            .unwrap();
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-9);
        assert!(d[1] >= 0.0 && d[1] < 1e-9);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = det();
        let gamma = g.leaf(Tensor::full(&[2], 1.0), false).unwrap();
        let beta = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        let constant = g.leaf(Tensor::full(&[1, 2], 5.0), false).unwrap();
        let y0 = g.layer_norm(constant, gamma, beta, 1, 1e-5).unwrap();
        for &v in g.value(y0).data() {
            assert!(v.abs() < 1e-6);
        }
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap(), false).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bilinear_sample_exact_midpoint_and_clamp() {
        let mut g = det();
        #[rustfmt::skip]
        let map = g.leaf(Tensor::new(vec![1, 2, 2], vec![
            0.0, 0.0,
            2.0, 2.0,
        ]).unwrap(), false).unwrap();
        let coords = g
            .leaf(
                Tensor::new(vec![3, 2], vec![0.5, 0.5, 1.0, 0.0, -5.0, -5.0]).unwrap(),
                false,
            )
            .unwrap();
        let y = g.bilinear_sample(map, coords).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12); // midpoint of {0,0,2,2}
        assert!((d[1] - 2.0).abs() < 1e-12); // integer coordinate
        assert!((d[2] - 0.0).abs() < 1e-12); // clamped to (0,0)
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = det();
        let x = g
            .leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g2 = det();
        let x2 = g2
            .leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        let sq = g2.mul(x2, x2).unwrap();
        let s2 = g2.sum(sq).unwrap();
        let grads2 = g2.backward(s2).unwrap();
        assert_eq!(grads2.get(x2).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = det();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = det();
        let x = g.leaf(Tensor::full(&[2], 1e300), false).unwrap();
        // 1e300 * 1e300 overflows to +inf
        assert!(matches!(g.mul(x, x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn nan_leaf_is_rejected() {
        let mut g = det();
        assert!(g.leaf(Tensor::full(&[1], f64::NAN), false).is_err());
    }

    #[test]
    fn dsk_uniform_modulation_is_box_average() {
        // Zero offsets and uniform 1/9 modulation over a 3x3 base grid must
        // reduce to a clamped 3x3 box filter.
        let h = 8;
        let w = 8;
        let mut g = det();
        let feat = g
            .leaf(Tensor::from_fn(&[1, h, w], |i| (i as f64 * 0.37).sin()), false)
            .unwrap();
        let base: Vec<(f64, f64)> = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dy as f64, dx as f64)))
            .collect();
        let offsets = g.leaf(Tensor::zeros(&[18, h, w]), false).unwrap();
        let modulation = g.leaf(Tensor::full(&[9, h, w], 1.0 / 9.0), false).unwrap();
        let out = g.dsk_aggregate(feat, offsets, modulation, 1, base).unwrap();
        let f = g.value(feat).data().to_vec();
        let o = g.value(out).data();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += f[yy * w + xx];
                    }
                }
                assert!((o[y * w + x] - acc / 9.0).abs() < 1e-12, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn modes_agree_bitwise() {
        let build = |mode: ExecMode| -> Vec<f32> {
            let mut g: Graph<f32> = Graph::new(mode);
            let x = g
                .leaf(Tensor::from_fn(&[3, 8, 8], |i| ((i * 37 % 17) as f32) * 0.1 - 0.5), false)
                .unwrap();
            let k = g
                .leaf(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 11) as f32) * 0.05 - 0.2), false)
                .unwrap();
            let y = g.conv2d(x, k, None, 1, 1).unwrap();
            g.value(y).data().to_vec()
        };
        let a = build(ExecMode::Deterministic);
        let b = build(ExecMode::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn extract_then_scatter_is_identity() {
        let mut g = det();
        let x = g
            .leaf(Tensor::from_fn(&[4, 6, 6], |i| i as f64), false)
            .unwrap();
        let tok = g.extract_patches(x, 2, 3).unwrap();
        assert_eq!(g.value(tok).shape(), &[2 * 2 * 2, 2 * 3 * 3]);
        let back = g.scatter_patches(tok, 4, 6, 6, 2, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn masked_mse_reads_masked_positions_only() {
        let mut g = det();
        let pred = g.leaf(Tensor::new(vec![4], vec![2.0, 7.0, 2.0, -3.0]).unwrap(), false).unwrap();
        let target = Tensor::zeros(&[4]);
        let mask = vec![true, false, true, false];
        let loss = g.masked_mse(pred, target.clone(), mask.clone()).unwrap();
        // 0.5 * mean(4, 4) = 2
        assert!((g.value(loss).item() - 2.0).abs() < 1e-12);

        // Changing unmasked entries must not change the loss.
        let mut g2 = det();
        let pred2 = g2
            .leaf(Tensor::new(vec![4], vec![2.0, 100.0, 2.0, 55.0]).unwrap(), false)
            .unwrap();
        let loss2 = g2.masked_mse(pred2, target, mask).unwrap();
        assert_eq!(g.value(loss).item(), g2.value(loss2).item());
    }

    #[test]
    fn masked_mse_rejects_empty_mask() {
        let mut g = det();
        let pred = g.leaf(Tensor::zeros(&[3]), false).unwrap();
        assert!(g.masked_mse(pred, Tensor::zeros(&[3]), vec![false; 3]).is_err());
    }

    #[test]
    fn soft_cross_entropy_closed_form() {
        // Softmax of [0, ln 2, 0] is [0.25, 0.5, 0.25]; one-hot target on the
        // middle class gives -log(0.5).
        let mut g = det();
        let logits = g
            .leaf(Tensor::new(vec![3, 1, 1], vec![0.0, (2.0f64).ln(), 0.0]).unwrap(), false)
            .unwrap();
        let target = Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let loss = g.soft_cross_entropy(logits, target, vec![1.0; 3]).unwrap();
        assert!((g.value(loss).item() - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn soft_cross_entropy_rejects_unnormalized_target() {
        let mut g = det();
        let logits = g.leaf(Tensor::zeros(&[2, 1, 1]), false).unwrap();
        let target = Tensor::new(vec![2, 1, 1], vec![0.7, 0.2]).unwrap();
        assert!(g.soft_cross_entropy(logits, target, vec![1.0; 2]).is_err());
    }

    #[test]
    fn upsample_bilinear_preserves_constants() {
        let mut g = det();
        let x = g.leaf(Tensor::full(&[2, 3, 3], 4.25), false).unwrap();
        let y = g.upsample_bilinear(x, 7, 5).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_pool_global_is_mean() {
        let mut g = det();
        let x = g.leaf(Tensor::from_fn(&[1, 4, 4], |i| i as f64), false).unwrap();
        let y = g.adaptive_avg_pool(x, 1, 1).unwrap();
        assert!((g.value(y).item() - 7.5).abs() < 1e-12);
    }
}
