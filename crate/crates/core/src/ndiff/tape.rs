//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records enough on the tape to run one backward pass.
//! Leaf gradients (constants and parameters) survive the pass and can be
//! inspected through [`Tape::grad`]; parameter gradients are additionally
//! accumulated into the bound [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{for_each_lane, gemm, Tensor};
use super::NdiffError;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Matmul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    CircularShift {
        x: usize,
        axis: usize,
        offset: i64,
    },
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gelu {
        x: usize,
        // tanh of the inner polynomial, cached from the forward pass
        tanh_u: Vec<f64>,
    },
    Relu(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    TrackShift {
        x: usize,
        // (channel width, token offset) per contiguous channel segment
        segments: Vec<(usize, i64)>,
    },
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Log(usize),
    SumAll(usize),
    MeanAll(usize),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph; one forward pass, one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(usize, usize)>, // (node index, param index)
    adjoints: Vec<Option<Tensor>>,
    consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh via a Cephes-style split: odd rational approximation near zero,
/// exp-based elsewhere. Matches `f64::tanh` to within 1 ulp over the full
/// range but runs roughly 2.5x faster, which matters because the activation
/// is applied to every hidden entry of every block on both passes.
#[inline]
fn tanh64(x: f64) -> f64 {
    const P0: f64 = -9.643_991_794_250_522_4e-1;
    const P1: f64 = -9.928_772_310_019_185_9e1;
    const P2: f64 = -1.614_687_684_417_084_5e3;
    const Q0: f64 = 1.128_116_784_916_329_3e2;
    const Q1: f64 = 2.235_488_390_601_004_5e3;
    const Q2: f64 = 4.844_063_053_251_254_9e3;
    let z = x.abs();
    if z < 0.625 {
        let s = x * x;
        x + x * s * ((P0 * s + P1) * s + P2) / (((s + Q0) * s + Q1) * s + Q2)
    } else if z < 19.0 {
        (1.0 - 2.0 / ((2.0 * z).exp() + 1.0)).copysign(x)
    } else {
        1.0f64.copysign(x)
    }
}

fn mismatch(primitive: &'static str, detail: String) -> NdiffError {
    NdiffError::ShapeMismatch { primitive, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Leaf with retained gradient; no parameter binding.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf treated as a constant; gradient is computed but discarded by callers.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Bind a named parameter: copies its current value onto the tape and
    /// routes its gradient into the store's accumulator on backward.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, NdiffError> {
        let idx = store.lookup(name)?;
        let id = self.push(store.value(idx).clone(), Op::Param);
        self.param_nodes.push((id.0, idx));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul(a.0, b.0)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    /// `a + bias`, broadcasting `bias` (shape `[C]`) over all leading axes of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NdiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let c = sb[0];
        let mut v = self.value(a).clone();
        let bd = self.value(bias).data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bd[i % c];
        }
        Ok(self.push(v, Op::AddBias(a.0, bias.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Rotate along `axis`: output index i takes input index (i - offset) mod len.
    pub fn circular_shift(
        &mut self,
        a: NodeId,
        axis: usize,
        offset: i64,
    ) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(
                "circular_shift",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let value = shift_tensor(self.value(a), axis, offset);
        Ok(self.push(value, Op::CircularShift { x: a.0, axis, offset }))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId, NdiffError> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", format!("{first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut at = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = self.value(p).data();
            let src_stride = s_axis * inner;
            for o in 0..outer {
                let dst = o * out_stride + at * inner;
                out[dst..dst + src_stride]
                    .copy_from_slice(&src[o * src_stride..(o + 1) * src_stride]);
            }
            at += s_axis;
        }
        Ok(self.push(
            Tensor::new(out_shape, out),
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(
                "slice",
                format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; out_shape.iter().product()];
        let src = self.value(a).data();
        let src_stride = shape[axis] * inner;
        let dst_stride = len * inner;
        for o in 0..outer {
            let s = o * src_stride + start * inner;
            out[o * dst_stride..(o + 1) * dst_stride].copy_from_slice(&src[s..s + dst_stride]);
        }
        Ok(self.push(
            Tensor::new(out_shape, out),
            Op::Slice { x: a.0, axis, start },
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (shape, out, tanh_u) = {
            let src = self.value(a);
            let mut out = Vec::with_capacity(src.numel());
            let mut tanh_u = Vec::with_capacity(src.numel());
            for &x in src.data() {
                let t = tanh64(GELU_C * (x + GELU_A * x * x * x));
                tanh_u.push(t);
                out.push(0.5 * x * (1.0 + t));
            }
            (src.shape().to_vec(), out, tanh_u)
        };
        self.push(Tensor::new(shape, out), Op::Gelu { x: a.0, tanh_u })
    }

    /// Fused `x @ w + bias` in one dgemm: the output buffer is seeded with
    /// broadcast bias rows and the product is accumulated on top, avoiding
    /// the extra full-tensor pass a separate bias add would cost. `x` may
    /// have any rank; leading axes are treated as rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.is_empty()
            || sw.len() != 2
            || sb.len() != 1
            || *sx.last().unwrap() != sw[0]
            || sw[1] != sb[0]
        {
            return Err(mismatch("linear", format!("{sx:?} @ {sw:?} + {sb:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).numel() / k;
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            1.0,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(out_shape, out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    /// Normalize over the last axis (no affine parameters).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(mismatch("layer_norm", "scalar input".into()));
        }
        let c = *shape.last().unwrap();
        let rows = self.value(a).numel() / c;
        let mut out = self.value(a).data().to_vec();
        let mut inv_stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let lane = &mut out[r * c..(r + 1) * c];
            let mean = lane.iter().sum::<f64>() / c as f64;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for x in lane.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
            inv_stds.push(inv_std);
        }
        Ok(self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x: a.0,
                inv_std: inv_stds,
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let len = shape[axis];
        let mut out = self.value(a).data().to_vec();
        for_each_lane(&shape, axis, |base, stride| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(out[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (out[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * stride] /= sum;
            }
        });
        Ok(self.push(Tensor::new(shape, out), Op::Softmax { x: a.0, axis }))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(a.0))
    }

    /// Select rows of a 2-D tensor; duplicate indices allowed.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather_rows", format!("need 2-D, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&j| j >= r) {
            return Err(mismatch(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &j in rows {
            out.extend_from_slice(&src[j * c..(j + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out),
            Op::GatherRows {
                x: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NdiffError> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let v = self.value(a).reshaped(shape);
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    /// Inverted-scaling dropout; identity when `training` is false or rate 0.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        seed: u64,
        training: bool,
    ) -> Result<NodeId, NdiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(mismatch("dropout", format!("rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a); // exact identity: alias the input node
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut v = self.value(a).clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(v, Op::Dropout { x: a.0, mask }))
    }

    /// Circularly shift contiguous channel segments along the token axis
    /// (second-to-last axis), each by its own offset, in a single pass.
    /// `segments` is a (channel width, token offset) partition of the last
    /// axis. Equivalent to slice + per-slice shift + concat, fused.
    pub fn track_shift(
        &mut self,
        a: NodeId,
        segments: &[(usize, i64)],
    ) -> Result<NodeId, NdiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("track_shift", format!("need >= 2-D, got {shape:?}")));
        }
        let channels = *shape.last().unwrap();
        if segments.iter().map(|(w, _)| w).sum::<usize>() != channels {
            return Err(mismatch(
                "track_shift",
                format!("segments must partition {channels} channels"),
            ));
        }
        let value = track_shift_tensor(self.value(a), segments, false);
        Ok(self.push(
            value,
            Op::TrackShift {
                x: a.0,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Parameter gradients are accumulated
    /// into `params`; leaf gradients stay readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<(), NdiffError> {
        if self.consumed {
            return Err(NdiffError::TapeConsumed);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NdiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        ));

        for i in (0..n).rev() {
            let g = match self.nodes[i].op {
                // leaves retain their adjoint for inspection
                Op::Leaf | Op::Param => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut adj);
        }

        for &(node_idx, param_idx) in &self.param_nodes {
            if let Some(g) = &adj[node_idx] {
                params.accumulate_grad(param_idx, g);
            }
        }
        self.adjoints = adj;
        Ok(())
    }

    /// Gradient of the loss w.r.t. a leaf node, available after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|g| g.as_ref())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                {
                    let ga = ensure(adj, *a, sa);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.nodes[*b].value.data(),
                        true,
                        1.0,
                        ga.data_mut(),
                    );
                }
                let gb = ensure(adj, *b, sb);
                gemm(
                    k,
                    m,
                    n,
                    self.nodes[*a].value.data(),
                    true,
                    g.data(),
                    false,
                    1.0,
                    gb.data_mut(),
                );
            }
            Op::Add(a, b) => {
                set_or_add(adj, *a, self.nodes[*a].value.shape(), g.clone());
                set_or_add(adj, *b, self.nodes[*b].value.shape(), g.clone());
            }
            Op::AddBias(a, b) => {
                set_or_add(adj, *a, self.nodes[*a].value.shape(), g.clone());
                let c = self.nodes[*b].value.numel();
                let gb = ensure(adj, *b, self.nodes[*b].value.shape());
                for (i, x) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] += x;
                }
            }
            Op::Mul(a, b) => {
                {
                    let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                    for ((d, gv), bv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.nodes[*b].value.data())
                    {
                        *d += gv * bv;
                    }
                }
                let gb = ensure(adj, *b, self.nodes[*b].value.shape());
                for ((d, gv), av) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(self.nodes[*a].value.data())
                {
                    *d += gv * av;
                }
            }
            Op::Scale(a, c) => {
                let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                for (d, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += gv * c;
                }
            }
            Op::CircularShift { x, axis, offset } => {
                let shifted = shift_tensor(g, *axis, -*offset);
                set_or_add(adj, *x, self.nodes[*x].value.shape(), shifted);
            }
            Op::Concat { axis, parts } => {
                let shape = node.value.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let src_stride = shape[*axis] * inner;
                let mut at = 0;
                for &p in parts {
                    let p_axis = self.nodes[p].value.shape()[*axis];
                    let dst_stride = p_axis * inner;
                    let gp = ensure(adj, p, self.nodes[p].value.shape());
                    for o in 0..outer {
                        let s = o * src_stride + at * inner;
                        for (d, gv) in gp.data_mut()[o * dst_stride..(o + 1) * dst_stride]
                            .iter_mut()
                            .zip(&g.data()[s..s + dst_stride])
                        {
                            *d += gv;
                        }
                    }
                    at += p_axis;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.nodes[*x].value.shape().to_vec();
                let inner: usize = xshape[axis + 1..].iter().product();
                let outer: usize = xshape[..*axis].iter().product();
                let len = node.value.shape()[*axis];
                let src_stride = len * inner;
                let dst_stride = xshape[*axis] * inner;
                let gx = ensure(adj, *x, &xshape);
                for o in 0..outer {
                    let d0 = o * dst_stride + start * inner;
                    for (d, gv) in gx.data_mut()[d0..d0 + src_stride]
                        .iter_mut()
                        .zip(&g.data()[o * src_stride..(o + 1) * src_stride])
                    {
                        *d += gv;
                    }
                }
            }
            Op::Gelu { x, tanh_u } => {
                let ga = ensure(adj, *x, self.nodes[*x].value.shape());
                for (((d, gv), &x), &t) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(self.nodes[*x].value.data())
                    .zip(tanh_u)
                {
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
            Op::Linear { x, w, b } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let m = self.nodes[*x].value.numel() / k;
                {
                    let gx = ensure(adj, *x, sx);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.nodes[*w].value.data(),
                        true,
                        1.0,
                        gx.data_mut(),
                    );
                }
                {
                    let gw = ensure(adj, *w, sw);
                    gemm(
                        k,
                        m,
                        n,
                        self.nodes[*x].value.data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        gw.data_mut(),
                    );
                }
                let gb = ensure(adj, *b, self.nodes[*b].value.shape());
                for (i, gv) in g.data().iter().enumerate() {
                    gb.data_mut()[i % n] += gv;
                }
            }
            Op::TrackShift { x, segments } => {
                let unshifted = track_shift_tensor(g, segments, true);
                set_or_add(adj, *x, self.nodes[*x].value.shape(), unshifted);
            }
            Op::Relu(a) => {
                let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                for ((d, gv), &x) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(self.nodes[*a].value.data())
                {
                    *d += if x > 0.0 { *gv } else { 0.0 };
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let gx = ensure(adj, *x, self.nodes[*x].value.shape());
                for r in 0..inv_std.len() {
                    let lane = r * c..(r + 1) * c;
                    let gl = &g.data()[lane.clone()];
                    let yl = &y[lane.clone()];
                    let mean_g = gl.iter().sum::<f64>() / c as f64;
                    let mean_gy = gl.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, &gv), &yv) in gx.data_mut()[lane].iter_mut().zip(gl).zip(yl) {
                        *d += inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape().to_vec();
                let len = shape[*axis];
                let y = node.value.data();
                let gx = ensure(adj, *x, &shape);
                let gd = g.data();
                let out = gx.data_mut();
                for_each_lane(&shape, *axis, |base, stride| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        dot += gd[base + i * stride] * y[base + i * stride];
                    }
                    for i in 0..len {
                        let idx = base + i * stride;
                        out[idx] += y[idx] * (gd[idx] - dot);
                    }
                });
            }
            Op::Log(a) => {
                let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                for ((d, gv), &x) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(self.nodes[*a].value.data())
                {
                    *d += gv / x;
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                for d in ga.data_mut() {
                    *d += gv;
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                let gv = g.item() / n;
                let ga = ensure(adj, *a, self.nodes[*a].value.shape());
                for d in ga.data_mut() {
                    *d += gv;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.shape()[1];
                let gx = ensure(adj, *x, self.nodes[*x].value.shape());
                for (out_row, &src_row) in rows.iter().enumerate() {
                    for (d, gv) in gx.data_mut()[src_row * c..(src_row + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[out_row * c..(out_row + 1) * c])
                    {
                        *d += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                set_or_add(adj, *a, self.nodes[*a].value.shape(), g.clone());
            }
            Op::Dropout { x, mask } => {
                let gx = ensure(adj, *x, self.nodes[*x].value.shape());
                for ((d, gv), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *d += gv * m;
                }
            }
        }
    }
}

fn ensure<'a>(adj: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    adj[idx].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

/// Accumulate an already-materialized gradient into the adjoint slot, or
/// hand it over wholesale when the slot is vacant — the common
/// single-consumer case then costs only a shape relabel, not a pass.
fn set_or_add(adj: &mut [Option<Tensor>], idx: usize, shape: &[usize], g: Tensor) {
    match &mut adj[idx] {
        Some(t) => {
            for (d, v) in t.data_mut().iter_mut().zip(g.data()) {
                *d += v;
            }
        }
        slot @ None => *slot = Some(g.reshaped(shape.to_vec())),
    }
}

/// Apply (or, with `invert`, undo) per-segment token rotations in one pass.
/// Token axis is second-to-last, channels last; each output row is assembled
/// from the source rows the segment offsets point at.
fn track_shift_tensor(t: &Tensor, segments: &[(usize, i64)], invert: bool) -> Tensor {
    let shape = t.shape().to_vec();
    let channels = *shape.last().unwrap();
    let tokens = shape[shape.len() - 2];
    let outer: usize = shape[..shape.len() - 2].iter().product();
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    let stride = tokens * channels;
    for o in 0..outer {
        let base = o * stride;
        let mut c0 = 0;
        for &(width, offset) in segments {
            let off = if tokens == 0 {
                0
            } else {
                let signed = if invert { -offset } else { offset };
                signed.rem_euclid(tokens as i64) as usize
            };
            for i in 0..tokens {
                let from = (i + tokens - off) % tokens;
                let d = base + i * channels + c0;
                let s = base + from * channels + c0;
                out[d..d + width].copy_from_slice(&src[s..s + width]);
            }
            c0 += width;
        }
    }
    Tensor::new(shape, out)
}

fn shift_tensor(t: &Tensor, axis: usize, offset: i64) -> Tensor {
    let shape = t.shape().to_vec();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let off = if len == 0 {
        0
    } else {
        offset.rem_euclid(len as i64) as usize
    };
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    let stride = len * inner;
    for o in 0..outer {
        for i in 0..len {
            let from = (i + len - off) % len;
            out[o * stride + i * inner..o * stride + (i + 1) * inner]
                .copy_from_slice(&src[o * stride + from * inner..o * stride + (from + 1) * inner]);
        }
    }
    Tensor::new(shape, out)
}
