//! Flat-slice compute kernels shared by the tape's forward and backward passes.
//!
//! All functions accumulate into their output slice so backward passes can
//! reuse them for gradient accumulation. Shapes are passed explicitly; callers
//! are responsible for consistency (debug asserts guard the hot paths).

/// Dot product with four independent accumulators so the sum does not
/// serialize on a single add chain.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ac = a.chunks_exact(4);
    let bc = b.chunks_exact(4);
    let mut tail = 0.0;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail += x * y;
    }
    for (pa, pb) in ac.zip(bc) {
        acc[0] += pa[0] * pb[0];
        acc[1] += pa[1] * pb[1];
        acc[2] += pa[2] * pb[2];
        acc[3] += pa[3] * pb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out += alpha * x, elementwise over equal-length slices.
#[inline]
fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, &xv) in out.iter_mut().zip(x) {
        *o += alpha * xv;
    }
}

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m,n] += a[k,m]^T @ b[k,n]
pub fn matmul_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            axpy(av, b_row, &mut out[i * n..(i + 1) * n]);
        }
    }
}

// ── Activations ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Gelu,
    Sigmoid,
    Silu,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh-form gelu; smooth everywhere, which keeps finite differences honest.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

// ── 3-d convolution (stride 1, same padding, cross-correlation) ──────────────

/// Valid output range along one axis for a kernel tap displaced by `d`:
/// indices `o` with `0 <= o + d < extent`.
fn tap_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((extent as isize - d).max(0) as usize).min(extent);
    (lo, hi.max(lo))
}

/// Strided counterpart: output indices `o < out_n` with `0 <= o*stride + d < extent`.
fn tap_range_strided(extent: usize, out_n: usize, stride: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { ((-d) as usize).div_ceil(stride) } else { 0 };
    let lo = lo.min(out_n);
    let top = extent as isize - 1 - d;
    if top < 0 {
        return (lo, lo);
    }
    let hi = ((top as usize) / stride + 1).min(out_n);
    (lo, hi.max(lo))
}

/// x: [b_n, ci_n, t, h, w], k: [co_n, ci_n, kt, kh, kw] (odd extents),
/// bias: [co_n], out (+=): [b_n, co_n, t, h, w].
#[allow(clippy::too_many_arguments)]
pub fn conv3d_acc(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), b_n * ci_n * t * h * w);
    debug_assert_eq!(kernel.len(), co_n * ci_n * kt * kh * kw);
    debug_assert_eq!(out.len(), b_n * co_n * t * h * w);
    let thw = t * h * w;
    let (ot, oh, ow) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut buf = vec![0.0; w];
    for b in 0..b_n {
        for co in 0..co_n {
            let out_vol = &mut out[(b * co_n + co) * thw..(b * co_n + co + 1) * thw];
            for to in 0..t {
                for ho in 0..h {
                    buf.fill(bias[co]);
                    for ci in 0..ci_n {
                        let x_vol = &x[(b * ci_n + ci) * thw..(b * ci_n + ci + 1) * thw];
                        let k_vol = &kernel[(co * ci_n + ci) * kt * kh * kw..][..kt * kh * kw];
                        for it in 0..kt {
                            let ti = to as isize + it as isize - ot;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            for ih in 0..kh {
                                let hi = ho as isize + ih as isize - oh;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                let row0 = (ti as usize * h + hi as usize) * w;
                                let x_row = &x_vol[row0..row0 + w];
                                let k_row = &k_vol[(it * kh + ih) * kw..(it * kh + ih + 1) * kw];
                                row_taps_acc(k_row, ow, x_row, &mut buf);
                            }
                        }
                    }
                    let o0 = (to * h + ho) * w;
                    axpy(1.0, &buf, &mut out_vol[o0..o0 + w]);
                }
            }
        }
    }
}

/// Gradient of `conv3d_acc` w.r.t. its input; d_x is accumulated.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_grad_x_acc(
    d_out: &[f64],
    kernel: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    d_x: &mut [f64],
) {
    let thw = t * h * w;
    let (ot, oh, ow) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let ow_rev = (kw - 1) as isize - ow;
    let mut buf = vec![0.0; w];
    let mut rev = vec![0.0; co_n * kt * kh * kw];
    for b in 0..b_n {
        for ci in 0..ci_n {
            for co in 0..co_n {
                let k_vol = &kernel[(co * ci_n + ci) * kt * kh * kw..][..kt * kh * kw];
                for r in 0..kt * kh {
                    for m in 0..kw {
                        rev[(co * kt * kh + r) * kw + m] = k_vol[r * kw + (kw - 1 - m)];
                    }
                }
            }
            let dx_vol = &mut d_x[(b * ci_n + ci) * thw..(b * ci_n + ci + 1) * thw];
            for ti in 0..t {
                for hi in 0..h {
                    buf.fill(0.0);
                    for co in 0..co_n {
                        let dout_vol = &d_out[(b * co_n + co) * thw..(b * co_n + co + 1) * thw];
                        for it in 0..kt {
                            let to = ti as isize - (it as isize - ot);
                            if to < 0 || to >= t as isize {
                                continue;
                            }
                            for ih in 0..kh {
                                let ho = hi as isize - (ih as isize - oh);
                                if ho < 0 || ho >= h as isize {
                                    continue;
                                }
                                let row0 = (to as usize * h + ho as usize) * w;
                                let d_row = &dout_vol[row0..row0 + w];
                                let r = co * kt * kh + it * kh + ih;
                                row_taps_acc(&rev[r * kw..(r + 1) * kw], ow_rev, d_row, &mut buf);
                            }
                        }
                    }
                    let d0 = (ti * h + hi) * w;
                    axpy(1.0, &buf, &mut dx_vol[d0..d0 + w]);
                }
            }
        }
    }
}

/// Gradients of `conv3d_acc` w.r.t. kernel and bias; both accumulated.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_grad_k_acc(
    d_out: &[f64],
    x: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
) {
    let thw = t * h * w;
    let (ot, oh, ow) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    for b in 0..b_n {
        for co in 0..co_n {
            let dout_vol = &d_out[(b * co_n + co) * thw..(b * co_n + co + 1) * thw];
            d_bias[co] += dout_vol.iter().sum::<f64>();
            for ci in 0..ci_n {
                let x_vol = &x[(b * ci_n + ci) * thw..(b * ci_n + ci + 1) * thw];
                let dk_vol = &mut d_kernel[(co * ci_n + ci) * kt * kh * kw..][..kt * kh * kw];
                for it in 0..kt {
                    let dt = it as isize - ot;
                    let (t_lo, t_hi) = tap_range(t, dt);
                    for ih in 0..kh {
                        let dh = ih as isize - oh;
                        let (h_lo, h_hi) = tap_range(h, dh);
                        for iw in 0..kw {
                            let dw = iw as isize - ow;
                            let (w_lo, w_hi) = tap_range(w, dw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for to in t_lo..t_hi {
                                let ti = (to as isize + dt) as usize;
                                for ho in h_lo..h_hi {
                                    let hi = (ho as isize + dh) as usize;
                                    let dout_row =
                                        &dout_vol[(to * h + ho) * w + w_lo..(to * h + ho) * w + w_hi];
                                    let x_off =
                                        (ti * h + hi) as isize * w as isize + w_lo as isize + dw;
                                    let x_row =
                                        &x_vol[x_off as usize..x_off as usize + (w_hi - w_lo)];
                                    acc += dot(dout_row, x_row);
                                }
                            }
                            dk_vol[(it * kh + ih) * kw + iw] += acc;
                        }
                    }
                }
            }
        }
    }
}

// ── 2-d convolution (stride 1 or 2, same padding, cross-correlation) ─────────

/// x: [b_n, ci_n, h, w], k: [co_n, ci_n, kh, kw], out (+=): [b_n, co_n, ho_n, wo_n]
/// where `ho_n = ceil(h / stride)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_acc(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut [f64],
) {
    let (ho_n, wo_n) = (h.div_ceil(stride), w.div_ceil(stride));
    debug_assert_eq!(out.len(), b_n * co_n * ho_n * wo_n);
    let (oh, ow) = ((kh / 2) as isize, (kw / 2) as isize);
    if stride == 1 {
        // Output-stationary: accumulate one output row in a hot buffer across
        // every (ci, tap) contribution, then flush it once.
        let mut buf = vec![0.0; w];
        for b in 0..b_n {
            for co in 0..co_n {
                let out_pl = &mut out[(b * co_n + co) * h * w..(b * co_n + co + 1) * h * w];
                for ho in 0..h {
                    buf.fill(bias[co]);
                    for ci in 0..ci_n {
                        let x_pl = &x[(b * ci_n + ci) * h * w..(b * ci_n + ci + 1) * h * w];
                        let k_pl = &kernel[(co * ci_n + ci) * kh * kw..][..kh * kw];
                        for ih in 0..kh {
                            let hi = ho as isize + ih as isize - oh;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let x_row = &x_pl[hi as usize * w..(hi as usize + 1) * w];
                            row_taps_acc(&k_pl[ih * kw..ih * kw + kw], ow, x_row, &mut buf);
                        }
                    }
                    axpy(1.0, &buf, &mut out_pl[ho * w..(ho + 1) * w]);
                }
            }
        }
        return;
    }
    for b in 0..b_n {
        for co in 0..co_n {
            let out_pl = &mut out[(b * co_n + co) * ho_n * wo_n..(b * co_n + co + 1) * ho_n * wo_n];
            for o in out_pl.iter_mut() {
                *o += bias[co];
            }
            for ci in 0..ci_n {
                let x_pl = &x[(b * ci_n + ci) * h * w..(b * ci_n + ci + 1) * h * w];
                let k_pl = &kernel[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for ih in 0..kh {
                    let dh = ih as isize - oh;
                    for iw in 0..kw {
                        let dw = iw as isize - ow;
                        let kv = k_pl[ih * kw + iw];
                        if kv == 0.0 {
                            continue;
                        }
                        let (h_lo, h_hi) = tap_range_strided(h, ho_n, stride, dh);
                        let (w_lo, w_hi) = tap_range_strided(w, wo_n, stride, dw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        for ho in h_lo..h_hi {
                            let hi = (ho * stride) as isize + dh;
                            let x_start = (hi * w as isize + (w_lo * stride) as isize + dw) as usize;
                            let x_end = x_start + (w_hi - w_lo - 1) * stride + 1;
                            let out_row = &mut out_pl[ho * wo_n + w_lo..ho * wo_n + w_hi];
                            let x_it = x_pl[x_start..x_end].iter().step_by(stride);
                            for (o, &xv) in out_row.iter_mut().zip(x_it) {
                                *o += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One kernel row applied to one input row, accumulated into `buf` (`buf[j] +=
/// sum_iw k[iw] * x[j + iw - ow]`, out-of-range x treated as zero). The 3-tap
/// case runs as a single fused stencil pass.
fn row_taps_acc(k_row: &[f64], ow: isize, x_row: &[f64], buf: &mut [f64]) {
    let w = x_row.len();
    if k_row.len() == 3 && ow == 1 && w >= 2 {
        let (k0, k1, k2) = (k_row[0], k_row[1], k_row[2]);
        buf[0] += k1 * x_row[0] + k2 * x_row[1];
        let mid = &mut buf[1..w - 1];
        let (x0, x1, x2) = (&x_row[..w - 2], &x_row[1..w - 1], &x_row[2..]);
        for i in 0..mid.len() {
            mid[i] += k0 * x0[i] + k1 * x1[i] + k2 * x2[i];
        }
        buf[w - 1] += k0 * x_row[w - 2] + k1 * x_row[w - 1];
        return;
    }
    for (iw, &kv) in k_row.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        let dw = iw as isize - ow;
        let (w_lo, w_hi) = tap_range(w, dw);
        if w_lo >= w_hi {
            continue;
        }
        let x_off = (w_lo as isize + dw) as usize;
        axpy(kv, &x_row[x_off..x_off + (w_hi - w_lo)], &mut buf[w_lo..w_hi]);
    }
}

/// Gradient of `conv2d_acc` w.r.t. input (accumulated).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_x_acc(
    d_out: &[f64],
    kernel: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_x: &mut [f64],
) {
    let (ho_n, wo_n) = (h.div_ceil(stride), w.div_ceil(stride));
    let (oh, ow) = ((kh / 2) as isize, (kw / 2) as isize);
    if stride == 1 {
        // The input gradient of a stride-1 same-padding correlation is the
        // correlation of d_out with the spatially flipped kernel, so it reuses
        // the output-stationary row stencil with reversed rows.
        let ow_rev = (kw - 1) as isize - ow;
        let mut buf = vec![0.0; w];
        let mut rev = vec![0.0; co_n * kh * kw];
        for b in 0..b_n {
            for ci in 0..ci_n {
                for co in 0..co_n {
                    let k_pl = &kernel[(co * ci_n + ci) * kh * kw..][..kh * kw];
                    for ih in 0..kh {
                        for m in 0..kw {
                            rev[(co * kh + ih) * kw + m] = k_pl[ih * kw + (kw - 1 - m)];
                        }
                    }
                }
                let dx_pl = &mut d_x[(b * ci_n + ci) * h * w..(b * ci_n + ci + 1) * h * w];
                for hi in 0..h {
                    buf.fill(0.0);
                    for co in 0..co_n {
                        let dout_pl = &d_out[(b * co_n + co) * h * w..(b * co_n + co + 1) * h * w];
                        for ih in 0..kh {
                            let ho = hi as isize - (ih as isize - oh);
                            if ho < 0 || ho >= h as isize {
                                continue;
                            }
                            let d_row = &dout_pl[ho as usize * w..(ho as usize + 1) * w];
                            let k_row = &rev[(co * kh + ih) * kw..(co * kh + ih + 1) * kw];
                            row_taps_acc(k_row, ow_rev, d_row, &mut buf);
                        }
                    }
                    axpy(1.0, &buf, &mut dx_pl[hi * w..(hi + 1) * w]);
                }
            }
        }
        return;
    }
    for b in 0..b_n {
        for co in 0..co_n {
            let dout_pl = &d_out[(b * co_n + co) * ho_n * wo_n..(b * co_n + co + 1) * ho_n * wo_n];
            for ci in 0..ci_n {
                let dx_pl = &mut d_x[(b * ci_n + ci) * h * w..(b * ci_n + ci + 1) * h * w];
                let k_pl = &kernel[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for ih in 0..kh {
                    let dh = ih as isize - oh;
                    for iw in 0..kw {
                        let dw = iw as isize - ow;
                        let kv = k_pl[ih * kw + iw];
                        if kv == 0.0 {
                            continue;
                        }
                        let (h_lo, h_hi) = tap_range_strided(h, ho_n, stride, dh);
                        let (w_lo, w_hi) = tap_range_strided(w, wo_n, stride, dw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        for ho in h_lo..h_hi {
                            let hi = (ho * stride) as isize + dh;
                            let dx_start =
                                (hi * w as isize + (w_lo * stride) as isize + dw) as usize;
                            let dx_end = dx_start + (w_hi - w_lo - 1) * stride + 1;
                            let dout_row = &dout_pl[ho * wo_n + w_lo..ho * wo_n + w_hi];
                            let dx_it = dx_pl[dx_start..dx_end].iter_mut().step_by(stride);
                            for (dx, &g) in dx_it.zip(dout_row) {
                                *dx += kv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d_acc` w.r.t. kernel and bias (accumulated).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_k_acc(
    d_out: &[f64],
    x: &[f64],
    b_n: usize,
    ci_n: usize,
    co_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
) {
    let (ho_n, wo_n) = (h.div_ceil(stride), w.div_ceil(stride));
    let (oh, ow) = ((kh / 2) as isize, (kw / 2) as isize);
    for b in 0..b_n {
        for co in 0..co_n {
            let dout_pl = &d_out[(b * co_n + co) * ho_n * wo_n..(b * co_n + co + 1) * ho_n * wo_n];
            d_bias[co] += dout_pl.iter().sum::<f64>();
            for ci in 0..ci_n {
                let x_pl = &x[(b * ci_n + ci) * h * w..(b * ci_n + ci + 1) * h * w];
                let dk_pl = &mut d_kernel[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for ih in 0..kh {
                    let dh = ih as isize - oh;
                    for iw in 0..kw {
                        let dw = iw as isize - ow;
                        let mut acc = 0.0;
                        if stride == 1 {
                            let (h_lo, h_hi) = tap_range(h, dh);
                            let (w_lo, w_hi) = tap_range(w, dw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for ho in h_lo..h_hi {
                                let hi = (ho as isize + dh) as usize;
                                let x_off = hi as isize * w as isize + w_lo as isize + dw;
                                let x_row = &x_pl[x_off as usize..x_off as usize + (w_hi - w_lo)];
                                acc += dot(&dout_pl[ho * w + w_lo..ho * w + w_hi], x_row);
                            }
                        } else {
                            let (h_lo, h_hi) = tap_range_strided(h, ho_n, stride, dh);
                            let (w_lo, w_hi) = tap_range_strided(w, wo_n, stride, dw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for ho in h_lo..h_hi {
                                let hi = (ho * stride) as isize + dh;
                                let x_start =
                                    (hi * w as isize + (w_lo * stride) as isize + dw) as usize;
                                let x_end = x_start + (w_hi - w_lo - 1) * stride + 1;
                                let dout_row = &dout_pl[ho * wo_n + w_lo..ho * wo_n + w_hi];
                                let x_it = x_pl[x_start..x_end].iter().step_by(stride);
                                for (&g, &xv) in dout_row.iter().zip(x_it) {
                                    acc += g * xv;
                                }
                            }
                        }
                        dk_pl[ih * kw + iw] += acc;
                    }
                }
            }
        }
    }
}
