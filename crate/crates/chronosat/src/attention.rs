//! Single pre-norm multi-head self-attention block.
//!
//! Layout: `y = x + W_o · MHA(LN(x))`, optionally followed by a second
//! residual feed-forward sublayer (off by default). Dropout masks the
//! attention weights and is active only while a mask source is supplied;
//! passing `None` is inference behavior regardless of the configured rate.

use rand_chacha::ChaCha20Rng;

use crate::kernels::Activation;
use crate::params::{ParamStore, Partition};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub feed_forward: bool,
    pub ff_hidden: usize,
}

impl AttnConfig {
    pub fn new(dim: usize, heads: usize) -> AttnConfig {
        AttnConfig { dim, heads, dropout: 0.0, feed_forward: false, ff_hidden: 0 }
    }
}

pub fn attn_param_names(prefix: &str, cfg: &AttnConfig) -> Vec<String> {
    let mut names = vec![
        format!("{prefix}.ln1.scale"),
        format!("{prefix}.ln1.shift"),
        format!("{prefix}.wq"),
        format!("{prefix}.bq"),
        format!("{prefix}.wk"),
        format!("{prefix}.wv"),
        format!("{prefix}.bv"),
        format!("{prefix}.wo"),
        format!("{prefix}.bo"),
    ];
    if cfg.feed_forward {
        names.extend([
            format!("{prefix}.ln2.scale"),
            format!("{prefix}.ln2.shift"),
            format!("{prefix}.ff1.w"),
            format!("{prefix}.ff1.b"),
            format!("{prefix}.ff2.w"),
            format!("{prefix}.ff2.b"),
        ]);
    }
    names
}

/// Registers the block's parameters: layer norms at identity, projections
/// normal with std `std / sqrt(dim)`, biases zero.
pub fn init_attn_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttnConfig,
    partition: Partition,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    let d = cfg.dim;
    assert!(d % cfg.heads == 0, "attention dim {} not divisible by heads {}", d, cfg.heads);
    let w_std = std / (d as f64).sqrt();
    store.insert(&format!("{prefix}.ln1.scale"), Tensor::full(vec![d], 1.0), partition);
    store.insert(&format!("{prefix}.ln1.shift"), Tensor::zeros(vec![d]), partition);
    for gate in ["wq", "wk", "wv", "wo"] {
        store.insert(
            &format!("{prefix}.{gate}"),
            Tensor::normal(vec![d, d], w_std, rng),
            partition,
        );
    }
    // No key bias: a shared shift on every key moves all scores in a softmax
    // row together, so the parameter could never do anything.
    for b in ["bq", "bv", "bo"] {
        store.insert(&format!("{prefix}.{b}"), Tensor::zeros(vec![d]), partition);
    }
    if cfg.feed_forward {
        let h = cfg.ff_hidden;
        store.insert(&format!("{prefix}.ln2.scale"), Tensor::full(vec![d], 1.0), partition);
        store.insert(&format!("{prefix}.ln2.shift"), Tensor::zeros(vec![d]), partition);
        store.insert(
            &format!("{prefix}.ff1.w"),
            Tensor::normal(vec![d, h], std / (d as f64).sqrt(), rng),
            partition,
        );
        store.insert(&format!("{prefix}.ff1.b"), Tensor::zeros(vec![h]), partition);
        store.insert(
            &format!("{prefix}.ff2.w"),
            Tensor::normal(vec![h, d], std / (h as f64).sqrt(), rng),
            partition,
        );
        store.insert(&format!("{prefix}.ff2.b"), Tensor::zeros(vec![d]), partition);
    }
}

/// x: [S, L, dim] -> [S, L, dim].
pub fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: VarId,
    cfg: &AttnConfig,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> VarId {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 3, "attention input must be [S, L, d]");
    let (s_n, len, d) = (xs[0], xs[1], xs[2]);
    assert_eq!(d, cfg.dim);
    assert!(d % cfg.heads == 0);
    let dh = d / cfg.heads;

    let p = |tape: &mut Tape, name: &str| tape.param(store, &format!("{prefix}.{name}"));

    let ln_scale = p(tape, "ln1.scale");
    let ln_shift = p(tape, "ln1.shift");
    let ln = tape.layer_norm(x, ln_scale, ln_shift);

    let (wq, bq) = (p(tape, "wq"), p(tape, "bq"));
    let wk = p(tape, "wk");
    let (wv, bv) = (p(tape, "wv"), p(tape, "bv"));
    let zero_bias = tape.leaf(Tensor::zeros(vec![d]));
    let q = tape.dense(ln, wq, bq, Activation::None);
    let k = tape.dense(ln, wk, zero_bias, Activation::None);
    let v = tape.dense(ln, wv, bv, Activation::None);

    let split = |tape: &mut Tape, t: VarId| -> VarId {
        let a = tape.reshape(t, vec![s_n, len, cfg.heads, dh]);
        let b = tape.permute(a, &[0, 2, 1, 3]);
        tape.reshape(b, vec![s_n * cfg.heads, len, dh])
    };
    let qh = split(tape, q);
    let kh = split(tape, k);
    let vh = split(tape, v);

    let scores = tape.matmul_b(qh, kh, true);
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mut attn = tape.softmax(scaled);

    if cfg.dropout > 0.0 {
        if let Some(rng) = dropout_rng.as_deref_mut() {
            use rand::Rng;
            let keep = 1.0 - cfg.dropout;
            let n = s_n * cfg.heads * len * len;
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.leaf(Tensor::new(vec![s_n * cfg.heads, len, len], mask));
            attn = tape.mul(attn, mask);
        }
    }

    let mixed = tape.matmul_b(attn, vh, false);
    let merged = {
        let a = tape.reshape(mixed, vec![s_n, cfg.heads, len, dh]);
        let b = tape.permute(a, &[0, 2, 1, 3]);
        tape.reshape(b, vec![s_n, len, d])
    };
    let (wo, bo) = (p(tape, "wo"), p(tape, "bo"));
    let proj = tape.dense(merged, wo, bo, Activation::None);
    let mut y = tape.add(x, proj);

    if cfg.feed_forward {
        let ln2_scale = p(tape, "ln2.scale");
        let ln2_shift = p(tape, "ln2.shift");
        let ln2 = tape.layer_norm(y, ln2_scale, ln2_shift);
        let (w1, b1) = (p(tape, "ff1.w"), p(tape, "ff1.b"));
        let (w2, b2) = (p(tape, "ff2.w"), p(tape, "ff2.b"));
        let hidden = tape.dense(ln2, w1, b1, Activation::Silu);
        let ff = tape.dense(hidden, w2, b2, Activation::None);
        y = tape.add(y, ff);
    }
    y
}
