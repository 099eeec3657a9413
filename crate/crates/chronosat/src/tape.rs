//! Replayable operation tape with explicit per-op backward kernels.
//!
//! A [`Tape`] is a single-assignment arena of [`Tensor`] values. Forward
//! builders append one record per operation; [`Tape::backward`] replays the
//! records in reverse, accumulating vector-Jacobian products. Gradients are
//! only materialized along paths that reach a value flagged as needing them,
//! so frozen submodels cost nothing extra on the way back.

use crate::kernels::{self, Activation};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type VarId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Dense {
        x: VarId,
        w: VarId,
        b: VarId,
        act: Activation,
        pre: Option<Tensor>,
        out: VarId,
    },
    Conv3d {
        x: VarId,
        k: VarId,
        b: VarId,
        out: VarId,
    },
    Conv2d {
        x: VarId,
        k: VarId,
        b: VarId,
        stride: usize,
        out: VarId,
    },
    Upsample2 {
        x: VarId,
        out: VarId,
    },
    ConcatCh {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Scale {
        x: VarId,
        c: f64,
        out: VarId,
    },
    MulScalar {
        x: VarId,
        s: VarId,
        out: VarId,
    },
    Sigmoid {
        x: VarId,
        out: VarId,
    },
    Silu {
        x: VarId,
        out: VarId,
    },
    Softmax {
        x: VarId,
        out: VarId,
    },
    LayerNorm {
        x: VarId,
        scale: VarId,
        shift: VarId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
        out: VarId,
    },
    MatmulB {
        a: VarId,
        b: VarId,
        transpose_b: bool,
        out: VarId,
    },
    Permute {
        x: VarId,
        perm: Vec<usize>,
        out: VarId,
    },
    Reshape {
        x: VarId,
        out: VarId,
    },
    Tile {
        x: VarId,
        reps: usize,
        out: VarId,
    },
    MeanAxis {
        x: VarId,
        axis: usize,
        out: VarId,
    },
    MeanAll {
        x: VarId,
        out: VarId,
    },
    Stack {
        items: Vec<VarId>,
        out: VarId,
    },
}

impl Op {
    fn out(&self) -> VarId {
        match self {
            Op::Dense { out, .. }
            | Op::Conv3d { out, .. }
            | Op::Conv2d { out, .. }
            | Op::Upsample2 { out, .. }
            | Op::ConcatCh { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::MulScalar { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Silu { out, .. }
            | Op::Softmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::MatmulB { out, .. }
            | Op::Permute { out, .. }
            | Op::Reshape { out, .. }
            | Op::Tile { out, .. }
            | Op::MeanAxis { out, .. }
            | Op::MeanAll { out, .. }
            | Op::Stack { out, .. } => *out,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    needs: Vec<bool>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(String, VarId)>,
    grad_skew: Option<f64>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Verification hook: when set, the first dense weight gradient reached
    /// during backward is scaled by `1 + skew`. The finite-difference checker
    /// must flag the resulting mismatch; nothing else uses this.
    pub fn set_grad_skew(&mut self, skew: Option<f64>) {
        self.grad_skew = skew;
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.vals[v]
    }

    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.vals[v].shape()
    }

    fn push_val(&mut self, t: Tensor, needs: bool) -> VarId {
        self.vals.push(t);
        self.needs.push(needs);
        self.vals.len() - 1
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push_val(t, false)
    }

    /// Input that accumulates a gradient during backward.
    pub fn leaf_grad(&mut self, t: Tensor) -> VarId {
        self.push_val(t, true)
    }

    /// Registers a named parameter from the store. The value is copied in; the
    /// gradient path is only tracked when the parameter's partition is
    /// currently trainable. [`Tape::write_grads`] sends gradients back by name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> VarId {
        let entry = store.entry(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let needs = store.is_trainable(name);
        let id = self.push_val(entry.value.clone(), needs);
        self.bindings.push((name.to_string(), id));
        id
    }

    /// Accumulates the gradients of all registered parameters into the store.
    pub fn write_grads(&self, store: &mut ParamStore) {
        for (name, id) in &self.bindings {
            if let Some(g) = self.grad(*id) {
                store.accumulate_grad(name, g);
            }
        }
    }

    fn record(&mut self, op: Op) {
        self.ops.push(op);
    }

    // ── Forward builders ─────────────────────────────────────────────────────

    /// act(x @ w + b) over the last axis of `x`; w: [d_in, d_out], b: [d_out].
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId, act: Activation) -> VarId {
        let d_in = *self.vals[x].shape().last().expect("dense on rank-0");
        let w_shape = self.vals[w].shape();
        assert_eq!(w_shape.len(), 2, "dense weight must be rank 2");
        assert_eq!(w_shape[0], d_in, "dense weight rows != input features");
        let d_out = w_shape[1];
        assert_eq!(self.vals[b].shape(), &[d_out], "dense bias shape");
        let rows = self.vals[x].len() / d_in;
        let mut pre = vec![0.0; rows * d_out];
        for r in 0..rows {
            pre[r * d_out..(r + 1) * d_out].copy_from_slice(self.vals[b].data());
        }
        kernels::matmul_acc(self.vals[x].data(), self.vals[w].data(), rows, d_in, d_out, &mut pre);
        let mut out_shape = self.vals[x].shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let (out_data, saved_pre) = if act == Activation::None {
            (pre, None)
        } else {
            let out = pre.iter().map(|&v| act.apply(v)).collect();
            (out, Some(Tensor::new(vec![rows, d_out], pre)))
        };
        let needs = self.needs[x] || self.needs[w] || self.needs[b];
        let out = self.push_val(Tensor::new(out_shape, out_data), needs);
        self.record(Op::Dense { x, w, b, act, pre: saved_pre, out });
        out
    }

    /// Same-padding stride-1 cross-correlation.
    /// x: [B, Ci, T, H, W], k: [Co, Ci, Kt, Kh, Kw] (odd extents), b: [Co].
    pub fn conv3d(&mut self, x: VarId, k: VarId, b: VarId) -> VarId {
        let xs = self.vals[x].shape().to_vec();
        let ks = self.vals[k].shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be rank 5");
        assert_eq!(ks.len(), 5, "conv3d kernel must be rank 5");
        assert_eq!(ks[1], xs[1], "conv3d kernel in-channels");
        assert!(ks[2] % 2 == 1 && ks[3] % 2 == 1 && ks[4] % 2 == 1, "conv3d kernel extents must be odd");
        let out_shape = vec![xs[0], ks[0], xs[2], xs[3], xs[4]];
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::conv3d_acc(
            self.vals[x].data(),
            self.vals[k].data(),
            self.vals[b].data(),
            xs[0], xs[1], ks[0], xs[2], xs[3], xs[4], ks[2], ks[3], ks[4],
            &mut out,
        );
        let needs = self.needs[x] || self.needs[k] || self.needs[b];
        let out = self.push_val(Tensor::new(out_shape, out), needs);
        self.record(Op::Conv3d { x, k, b, out });
        out
    }

    /// Same-padding cross-correlation with stride 1 or 2.
    /// x: [B, Ci, H, W], k: [Co, Ci, Kh, Kw], b: [Co].
    pub fn conv2d(&mut self, x: VarId, k: VarId, b: VarId, stride: usize) -> VarId {
        let xs = self.vals[x].shape().to_vec();
        let ks = self.vals[k].shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ks[1], xs[1], "conv2d kernel in-channels");
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let out_shape = vec![xs[0], ks[0], xs[2].div_ceil(stride), xs[3].div_ceil(stride)];
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::conv2d_acc(
            self.vals[x].data(),
            self.vals[k].data(),
            self.vals[b].data(),
            xs[0], xs[1], ks[0], xs[2], xs[3], ks[2], ks[3], stride,
            &mut out,
        );
        let needs = self.needs[x] || self.needs[k] || self.needs[b];
        let out = self.push_val(Tensor::new(out_shape, out), needs);
        self.record(Op::Conv2d { x, k, b, stride, out });
        out
    }

    /// Nearest-neighbor 2x spatial upsampling of [B, C, H, W].
    pub fn upsample2(&mut self, x: VarId) -> VarId {
        let xs = self.vals[x].shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (b_n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; b_n * c * 4 * h * w];
        let src = self.vals[x].data();
        for p in 0..b_n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for ho in 0..2 * h {
                for wo in 0..2 * w {
                    d[ho * 2 * w + wo] = s[(ho / 2) * w + wo / 2];
                }
            }
        }
        let needs = self.needs[x];
        let out = self.push_val(Tensor::new(vec![b_n, c, 2 * h, 2 * w], out), needs);
        self.record(Op::Upsample2 { x, out });
        out
    }

    /// Channel concatenation of two [B, C, ...] tensors along axis 1.
    pub fn concat_ch(&mut self, a: VarId, b: VarId) -> VarId {
        let sa = self.vals[a].shape().to_vec();
        let sb = self.vals[b].shape().to_vec();
        assert!(sa.len() >= 2 && sa.len() == sb.len());
        assert_eq!(sa[0], sb[0], "concat batch");
        assert_eq!(&sa[2..], &sb[2..], "concat trailing dims");
        let rest: usize = sa[2..].iter().product();
        let (c1, c2) = (sa[1], sb[1]);
        let mut out_shape = sa.clone();
        out_shape[1] = c1 + c2;
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (self.vals[a].data(), self.vals[b].data());
        for i in 0..sa[0] {
            let dst = &mut out[i * (c1 + c2) * rest..(i + 1) * (c1 + c2) * rest];
            dst[..c1 * rest].copy_from_slice(&da[i * c1 * rest..(i + 1) * c1 * rest]);
            dst[c1 * rest..].copy_from_slice(&db[i * c2 * rest..(i + 1) * c2 * rest]);
        }
        let needs = self.needs[a] || self.needs[b];
        let out = self.push_val(Tensor::new(out_shape, out), needs);
        self.record(Op::ConcatCh { a, b, out });
        out
    }

    fn zip_elementwise(&mut self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "elementwise shape mismatch");
        let data = self.vals[a]
            .data()
            .iter()
            .zip(self.vals[b].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.vals[a].shape().to_vec(), data)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let t = self.zip_elementwise(a, b, |x, y| x + y);
        let needs = self.needs[a] || self.needs[b];
        let out = self.push_val(t, needs);
        self.record(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let t = self.zip_elementwise(a, b, |x, y| x - y);
        let needs = self.needs[a] || self.needs[b];
        let out = self.push_val(t, needs);
        self.record(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let t = self.zip_elementwise(a, b, |x, y| x * y);
        let needs = self.needs[a] || self.needs[b];
        let out = self.push_val(t, needs);
        self.record(Op::Mul { a, b, out });
        out
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let t = self.vals[x].map(|v| v * c);
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::Scale { x, c, out });
        out
    }

    /// Elementwise product with a single-element tensor variable (broadcast).
    pub fn mul_scalar(&mut self, x: VarId, s: VarId) -> VarId {
        assert_eq!(self.vals[s].len(), 1, "mul_scalar takes a [1] tensor");
        let sv = self.vals[s].item();
        let t = self.vals[x].map(|v| v * sv);
        let needs = self.needs[x] || self.needs[s];
        let out = self.push_val(t, needs);
        self.record(Op::MulScalar { x, s, out });
        out
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let t = self.vals[x].map(kernels::sigmoid);
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::Sigmoid { x, out });
        out
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let t = self.vals[x].map(|v| v * kernels::sigmoid(v));
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::Silu { x, out });
        out
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        let cols = *self.vals[x].shape().last().expect("softmax on rank-0");
        let rows = self.vals[x].len() / cols;
        let mut out = vec![0.0; rows * cols];
        let src = self.vals[x].data();
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let needs = self.needs[x];
        let shape = self.vals[x].shape().to_vec();
        let out = self.push_val(Tensor::new(shape, out), needs);
        self.record(Op::Softmax { x, out });
        out
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: VarId, scale: VarId, shift: VarId) -> VarId {
        let d = *self.vals[x].shape().last().expect("layer_norm on rank-0");
        assert_eq!(self.vals[scale].shape(), &[d]);
        assert_eq!(self.vals[shift].shape(), &[d]);
        let rows = self.vals[x].len() / d;
        let mut out = vec![0.0; rows * d];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        let src = self.vals[x].data();
        let ga = self.vals[scale].data();
        let be = self.vals[shift].data();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let dst = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                dst[j] = ga[j] * (row[j] - mean) * rstd + be[j];
            }
        }
        let needs = self.needs[x] || self.needs[scale] || self.needs[shift];
        let shape = self.vals[x].shape().to_vec();
        let out = self.push_val(Tensor::new(shape, out), needs);
        self.record(Op::LayerNorm { x, scale, shift, mean: means, rstd: rstds, out });
        out
    }

    /// Batched matrix product: a [S, M, K] @ b [S, K, N], or a @ b^T when
    /// `transpose_b` with b [S, N, K].
    pub fn matmul_b(&mut self, a: VarId, b: VarId, transpose_b: bool) -> VarId {
        let sa = self.vals[a].shape().to_vec();
        let sb = self.vals[b].shape().to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "batch dims differ");
        let (s_n, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            assert_eq!(sb[2], k, "matmul inner dim");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "matmul inner dim");
            sb[2]
        };
        let mut out = vec![0.0; s_n * m * n];
        let (da, db) = (self.vals[a].data(), self.vals[b].data());
        for s in 0..s_n {
            let av = &da[s * m * k..(s + 1) * m * k];
            let ov = &mut out[s * m * n..(s + 1) * m * n];
            if transpose_b {
                let bv = &db[s * n * k..(s + 1) * n * k];
                kernels::matmul_bt_acc(av, bv, m, k, n, ov);
            } else {
                let bv = &db[s * k * n..(s + 1) * k * n];
                kernels::matmul_acc(av, bv, m, k, n, ov);
            }
        }
        let needs = self.needs[a] || self.needs[b];
        let out = self.push_val(Tensor::new(vec![s_n, m, n], out), needs);
        self.record(Op::MatmulB { a, b, transpose_b, out });
        out
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> VarId {
        let t = permute_copy(&self.vals[x], perm);
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::Permute { x, perm: perm.to_vec(), out });
        out
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> VarId {
        let t = self.vals[x].clone().reshaped(shape);
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::Reshape { x, out });
        out
    }

    /// Appends `extra` trailing axes, repeating each element of `x` over them:
    /// out[i, e] = x[i].
    pub fn tile(&mut self, x: VarId, extra: &[usize]) -> VarId {
        let reps: usize = extra.iter().product();
        let mut shape = self.vals[x].shape().to_vec();
        shape.extend_from_slice(extra);
        let mut out = vec![0.0; self.vals[x].len() * reps];
        for (i, &v) in self.vals[x].data().iter().enumerate() {
            out[i * reps..(i + 1) * reps].fill(v);
        }
        let needs = self.needs[x];
        let out = self.push_val(Tensor::new(shape, out), needs);
        self.record(Op::Tile { x, reps, out });
        out
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> VarId {
        let xs = self.vals[x].shape().to_vec();
        assert!(axis < xs.len());
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let src = self.vals[x].data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let seg = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(seg) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= mid as f64;
            }
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs[x];
        let out = self.push_val(Tensor::new(out_shape, out), needs);
        self.record(Op::MeanAxis { x, axis, out });
        out
    }

    /// Mean of all elements; output shape [1].
    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.vals[x].len() as f64;
        let t = Tensor::scalar(self.vals[x].data().iter().sum::<f64>() / n);
        let needs = self.needs[x];
        let out = self.push_val(t, needs);
        self.record(Op::MeanAll { x, out });
        out
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[VarId]) -> VarId {
        assert!(!items.is_empty(), "stack of nothing");
        let shape = self.vals[items[0]].shape().to_vec();
        let each = self.vals[items[0]].len();
        let mut out = vec![0.0; items.len() * each];
        for (i, &v) in items.iter().enumerate() {
            assert_eq!(self.vals[v].shape(), &shape[..], "stack shape mismatch");
            out[i * each..(i + 1) * each].copy_from_slice(self.vals[v].data());
        }
        let mut out_shape = vec![items.len()];
        out_shape.extend_from_slice(&shape);
        let needs = items.iter().any(|&v| self.needs[v]);
        let out = self.push_val(Tensor::new(out_shape, out), needs);
        self.record(Op::Stack { items: items.to_vec(), out });
        out
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    fn accum(&mut self, v: VarId, delta: &[f64]) {
        if !self.needs[v] {
            return;
        }
        let g = self.grads[v].get_or_insert_with(|| Tensor::zeros(self.vals[v].shape().to_vec()));
        for (gd, &d) in g.data_mut().iter_mut().zip(delta) {
            *gd += d;
        }
    }

    /// Seeds d(loss) = 1 at a scalar variable and replays the tape in reverse.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(self.vals[loss].len(), 1, "backward target must be scalar");
        self.grads = vec![None; self.vals.len()];
        self.grads[loss] = Some(Tensor::scalar(1.0));
        let mut skew = self.grad_skew;
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            let out = op.out();
            if !self.needs[out] {
                continue;
            }
            let Some(d_out) = self.grads[out].take() else {
                continue;
            };
            self.backward_op(op, d_out.data(), &mut skew);
            // Keep output grads addressable for callers inspecting leaves that
            // are themselves op outputs is unnecessary: leaves are never op
            // outputs, so dropping d_out here is safe.
        }
        self.ops = ops;
    }

    fn backward_op(&mut self, op: &Op, d_out: &[f64], skew: &mut Option<f64>) {
        match op {
            Op::Dense { x, w, b, act, pre, out } => {
                let d_in = *self.vals[*x].shape().last().unwrap();
                let d_o = *self.vals[*out].shape().last().unwrap();
                let rows = self.vals[*x].len() / d_in;
                let d_pre: Vec<f64> = match act {
                    Activation::None => d_out.to_vec(),
                    _ => {
                        let pre = pre.as_ref().expect("saved pre-activation");
                        d_out
                            .iter()
                            .zip(pre.data())
                            .map(|(&g, &p)| g * act.grad(p))
                            .collect()
                    }
                };
                if self.needs[*x] {
                    let mut d_x = vec![0.0; rows * d_in];
                    kernels::matmul_bt_acc(&d_pre, self.vals[*w].data(), rows, d_o, d_in, &mut d_x);
                    self.accum(*x, &d_x);
                }
                if self.needs[*w] {
                    let mut d_w = vec![0.0; d_in * d_o];
                    kernels::matmul_at_acc(self.vals[*x].data(), &d_pre, rows, d_in, d_o, &mut d_w);
                    if let Some(s) = skew.take() {
                        for g in d_w.iter_mut() {
                            *g *= 1.0 + s;
                        }
                    }
                    self.accum(*w, &d_w);
                }
                if self.needs[*b] {
                    let mut d_b = vec![0.0; d_o];
                    for r in 0..rows {
                        for (db, &g) in d_b.iter_mut().zip(&d_pre[r * d_o..(r + 1) * d_o]) {
                            *db += g;
                        }
                    }
                    self.accum(*b, &d_b);
                }
            }
            Op::Conv3d { x, k, b, .. } => {
                let xs = self.vals[*x].shape().to_vec();
                let ks = self.vals[*k].shape().to_vec();
                let (b_n, ci, co) = (xs[0], xs[1], ks[0]);
                let (t, h, w) = (xs[2], xs[3], xs[4]);
                let (kt, kh, kw) = (ks[2], ks[3], ks[4]);
                if self.needs[*x] {
                    let mut d_x = vec![0.0; self.vals[*x].len()];
                    kernels::conv3d_grad_x_acc(
                        d_out, self.vals[*k].data(), b_n, ci, co, t, h, w, kt, kh, kw, &mut d_x,
                    );
                    self.accum(*x, &d_x);
                }
                if self.needs[*k] || self.needs[*b] {
                    let mut d_k = vec![0.0; self.vals[*k].len()];
                    let mut d_b = vec![0.0; co];
                    kernels::conv3d_grad_k_acc(
                        d_out, self.vals[*x].data(), b_n, ci, co, t, h, w, kt, kh, kw,
                        &mut d_k, &mut d_b,
                    );
                    self.accum(*k, &d_k);
                    self.accum(*b, &d_b);
                }
            }
            Op::Conv2d { x, k, b, stride, .. } => {
                let xs = self.vals[*x].shape().to_vec();
                let ks = self.vals[*k].shape().to_vec();
                let (b_n, ci, co) = (xs[0], xs[1], ks[0]);
                let (h, w) = (xs[2], xs[3]);
                let (kh, kw) = (ks[2], ks[3]);
                if self.needs[*x] {
                    let mut d_x = vec![0.0; self.vals[*x].len()];
                    kernels::conv2d_grad_x_acc(
                        d_out, self.vals[*k].data(), b_n, ci, co, h, w, kh, kw, *stride, &mut d_x,
                    );
                    self.accum(*x, &d_x);
                }
                if self.needs[*k] || self.needs[*b] {
                    let mut d_k = vec![0.0; self.vals[*k].len()];
                    let mut d_b = vec![0.0; co];
                    kernels::conv2d_grad_k_acc(
                        d_out, self.vals[*x].data(), b_n, ci, co, h, w, kh, kw, *stride,
                        &mut d_k, &mut d_b,
                    );
                    self.accum(*k, &d_k);
                    self.accum(*b, &d_b);
                }
            }
            Op::Upsample2 { x, .. } => {
                let xs = self.vals[*x].shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut d_x = vec![0.0; self.vals[*x].len()];
                for p in 0..planes {
                    let src = &d_out[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d_x[p * h * w..(p + 1) * h * w];
                    for ho in 0..2 * h {
                        for wo in 0..2 * w {
                            dst[(ho / 2) * w + wo / 2] += src[ho * 2 * w + wo];
                        }
                    }
                }
                self.accum(*x, &d_x);
            }
            Op::ConcatCh { a, b, .. } => {
                let sa = self.vals[*a].shape().to_vec();
                let sb = self.vals[*b].shape().to_vec();
                let rest: usize = sa[2..].iter().product();
                let (c1, c2) = (sa[1], sb[1]);
                if self.needs[*a] {
                    let mut d_a = vec![0.0; self.vals[*a].len()];
                    for i in 0..sa[0] {
                        d_a[i * c1 * rest..(i + 1) * c1 * rest].copy_from_slice(
                            &d_out[i * (c1 + c2) * rest..i * (c1 + c2) * rest + c1 * rest],
                        );
                    }
                    self.accum(*a, &d_a);
                }
                if self.needs[*b] {
                    let mut d_b = vec![0.0; self.vals[*b].len()];
                    for i in 0..sa[0] {
                        d_b[i * c2 * rest..(i + 1) * c2 * rest].copy_from_slice(
                            &d_out[i * (c1 + c2) * rest + c1 * rest..(i + 1) * (c1 + c2) * rest],
                        );
                    }
                    self.accum(*b, &d_b);
                }
            }
            Op::Add { a, b, .. } => {
                self.accum(*a, d_out);
                self.accum(*b, d_out);
            }
            Op::Sub { a, b, .. } => {
                self.accum(*a, d_out);
                if self.needs[*b] {
                    let neg: Vec<f64> = d_out.iter().map(|&g| -g).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b, .. } => {
                if self.needs[*a] {
                    let d: Vec<f64> =
                        d_out.iter().zip(self.vals[*b].data()).map(|(&g, &v)| g * v).collect();
                    self.accum(*a, &d);
                }
                if self.needs[*b] {
                    let d: Vec<f64> =
                        d_out.iter().zip(self.vals[*a].data()).map(|(&g, &v)| g * v).collect();
                    self.accum(*b, &d);
                }
            }
            Op::Scale { x, c, .. } => {
                if self.needs[*x] {
                    let d: Vec<f64> = d_out.iter().map(|&g| g * c).collect();
                    self.accum(*x, &d);
                }
            }
            Op::MulScalar { x, s, .. } => {
                if self.needs[*x] {
                    let sv = self.vals[*s].item();
                    let d: Vec<f64> = d_out.iter().map(|&g| g * sv).collect();
                    self.accum(*x, &d);
                }
                if self.needs[*s] {
                    let d: f64 =
                        d_out.iter().zip(self.vals[*x].data()).map(|(&g, &v)| g * v).sum();
                    self.accum(*s, &[d]);
                }
            }
            Op::Sigmoid { x, out } => {
                if self.needs[*x] {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(self.vals[*out].data())
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.accum(*x, &d);
                }
            }
            Op::Silu { x, .. } => {
                if self.needs[*x] {
                    let d: Vec<f64> = d_out
                        .iter()
                        .zip(self.vals[*x].data())
                        .map(|(&g, &v)| g * Activation::Silu.grad(v))
                        .collect();
                    self.accum(*x, &d);
                }
            }
            Op::Softmax { x, out } => {
                if self.needs[*x] {
                    let cols = *self.vals[*out].shape().last().unwrap();
                    let rows = self.vals[*out].len() / cols;
                    let y = self.vals[*out].data();
                    let mut d_x = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &d_out[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            d_x[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(*x, &d_x);
                }
            }
            Op::LayerNorm { x, scale, shift, mean, rstd, .. } => {
                let d = *self.vals[*x].shape().last().unwrap();
                let rows = self.vals[*x].len() / d;
                let src = self.vals[*x].data();
                let ga = self.vals[*scale].data();
                let mut d_x = if self.needs[*x] { vec![0.0; rows * d] } else { vec![] };
                let mut d_ga = if self.needs[*scale] { vec![0.0; d] } else { vec![] };
                let mut d_be = if self.needs[*shift] { vec![0.0; d] } else { vec![] };
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &d_out[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    if self.needs[*scale] || self.needs[*shift] {
                        for j in 0..d {
                            let xhat = (row[j] - mu) * rs;
                            if self.needs[*scale] {
                                d_ga[j] += gr[j] * xhat;
                            }
                            if self.needs[*shift] {
                                d_be[j] += gr[j];
                            }
                        }
                    }
                    if self.needs[*x] {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * ga[j];
                            let xhat = (row[j] - mu) * rs;
                            m1 += dxh;
                            m2 += dxh * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * ga[j];
                            let xhat = (row[j] - mu) * rs;
                            d_x[r * d + j] = rs * (dxh - m1 - xhat * m2);
                        }
                    }
                }
                if self.needs[*x] {
                    self.accum(*x, &d_x);
                }
                if self.needs[*scale] {
                    self.accum(*scale, &d_ga);
                }
                if self.needs[*shift] {
                    self.accum(*shift, &d_be);
                }
            }
            Op::MatmulB { a, b, transpose_b, .. } => {
                let sa = self.vals[*a].shape().to_vec();
                let (s_n, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b {
                    self.vals[*b].shape()[1]
                } else {
                    self.vals[*b].shape()[2]
                };
                let (need_a, need_b) = (self.needs[*a], self.needs[*b]);
                let mut d_a = if need_a { vec![0.0; s_n * m * k] } else { Vec::new() };
                let mut d_b = if need_b { vec![0.0; self.vals[*b].len()] } else { Vec::new() };
                {
                    let da = self.vals[*a].data();
                    let db = self.vals[*b].data();
                    for s in 0..s_n {
                        let g = &d_out[s * m * n..(s + 1) * m * n];
                        if need_a {
                            let dst = &mut d_a[s * m * k..(s + 1) * m * k];
                            if *transpose_b {
                                let bv = &db[s * n * k..(s + 1) * n * k];
                                kernels::matmul_acc(g, bv, m, n, k, dst);
                            } else {
                                let bv = &db[s * k * n..(s + 1) * k * n];
                                kernels::matmul_bt_acc(g, bv, m, n, k, dst);
                            }
                        }
                        if need_b {
                            let av = &da[s * m * k..(s + 1) * m * k];
                            if *transpose_b {
                                let dst = &mut d_b[s * n * k..(s + 1) * n * k];
                                kernels::matmul_at_acc(g, av, m, n, k, dst);
                            } else {
                                let dst = &mut d_b[s * k * n..(s + 1) * k * n];
                                kernels::matmul_at_acc(av, g, m, k, n, dst);
                            }
                        }
                    }
                }
                if need_a {
                    self.accum(*a, &d_a);
                }
                if need_b {
                    self.accum(*b, &d_b);
                }
            }
            Op::Permute { x, perm, .. } => {
                if self.needs[*x] {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape: Vec<usize> =
                        perm.iter().map(|&a| self.vals[*x].shape()[a]).collect();
                    let g = Tensor::new(out_shape, d_out.to_vec());
                    let d_x = permute_copy(&g, &inv);
                    self.accum(*x, d_x.data());
                }
            }
            Op::Reshape { x, .. } => {
                self.accum(*x, d_out);
            }
            Op::Tile { x, reps, .. } => {
                if self.needs[*x] {
                    let n = self.vals[*x].len();
                    let mut d_x = vec![0.0; n];
                    for i in 0..n {
                        d_x[i] = d_out[i * reps..(i + 1) * reps].iter().sum();
                    }
                    self.accum(*x, &d_x);
                }
            }
            Op::MeanAxis { x, axis, .. } => {
                if self.needs[*x] {
                    let xs = self.vals[*x].shape();
                    let outer: usize = xs[..*axis].iter().product();
                    let mid = xs[*axis];
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let mut d_x = vec![0.0; self.vals[*x].len()];
                    for o in 0..outer {
                        let g = &d_out[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut d_x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (dd, &gg) in dst.iter_mut().zip(g) {
                                *dd = gg / mid as f64;
                            }
                        }
                    }
                    self.accum(*x, &d_x);
                }
            }
            Op::MeanAll { x, .. } => {
                if self.needs[*x] {
                    let n = self.vals[*x].len();
                    let g = d_out[0] / n as f64;
                    let d_x = vec![g; n];
                    self.accum(*x, &d_x);
                }
            }
            Op::Stack { items, .. } => {
                let each = self.vals[items[0]].len();
                for (i, &v) in items.iter().enumerate() {
                    if self.needs[v] {
                        self.accum(v, &d_out[i * each..(i + 1) * each]);
                    }
                }
            }
        }
    }
}

fn permute_copy(src: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = src.shape();
    assert_eq!(perm.len(), in_shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&a| in_shape[a]).collect();
    let rank = perm.len();
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // For each input axis, the stride its index contributes in the output.
    let mut scatter = vec![0usize; rank];
    for (opos, &a) in perm.iter().enumerate() {
        scatter[a] = out_strides[opos];
    }
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for &v in src.data() {
        out[o] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o += scatter[ax];
            if idx[ax] < in_shape[ax] {
                break;
            }
            o -= scatter[ax] * in_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
