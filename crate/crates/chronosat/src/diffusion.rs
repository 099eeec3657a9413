//! Pixel-space denoising diffusion: the noise schedule, sinusoidal step
//! embedding, and a two-level U-Net whose decoder skips accept additive
//! control signals.

use rand_chacha::ChaCha20Rng;

use crate::params::{ParamStore, Partition};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

/// Linear betas from 1e-4 to 0.02 with cumulative-product signal decay.
pub fn make_noise_schedule(steps: usize) -> NoiseSchedule {
    assert!(steps >= 2, "a noise schedule needs at least 2 steps, got {steps}");
    let mut betas = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = i as f64 / (steps - 1) as f64;
        betas.push(BETA_START + frac * (BETA_END - BETA_START));
    }
    let mut alphas_cumprod = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    NoiseSchedule { steps, betas, alphas_cumprod }
}

/// Noising forward process: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Tensor {
    assert!(t < sched.steps, "step index {t} out of range for {} steps", sched.steps);
    assert_eq!(x0.shape(), eps.shape(), "noise shape must match the signal");
    let abar = sched.alphas_cumprod[t];
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sb * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Standard sinusoidal embedding of a step index; first half sines, second
/// half cosines, geometric frequency ladder.
pub fn sinusoidal_embedding(t: usize, d: usize) -> Vec<f64> {
    assert!(d >= 2 && d % 2 == 0, "embedding dim must be even and >= 2");
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel widths of the two resolution levels.
    pub channels: [usize; 2],
    pub d_time: usize,
}

impl UNetConfig {
    pub fn desk() -> UNetConfig {
        UNetConfig { in_channels: 3, channels: [16, 32], d_time: 32 }
    }
}

pub fn unet_param_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for leaf in [
        "time1.w", "time1.b", "time2.w", "time2.b", "stem.k", "stem.b", "enc0.time.w",
        "enc0.time.b", "enc0.conv.k", "enc0.conv.b", "down.k", "down.b", "enc1.time.w",
        "enc1.time.b", "enc1.conv.k", "enc1.conv.b", "mid1.k", "mid1.b", "mid2.k", "mid2.b",
        "dec1.time.w", "dec1.time.b", "dec1.conv.k", "dec1.conv.b", "up.k", "up.b",
        "dec0.time.w", "dec0.time.b", "dec0.conv.k", "dec0.conv.b", "out.k", "out.b",
    ] {
        names.push(format!("{prefix}.{leaf}"));
    }
    names
}

pub fn init_unet(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &UNetConfig,
    std: f64,
    rng: &mut ChaCha20Rng,
    partition: Partition,
) {
    let [c0, c1] = cfg.channels;
    let dt = cfg.d_time;
    let dense = |store: &mut ParamStore, name: &str, di: usize, co: usize, rng: &mut ChaCha20Rng| {
        store.insert(
            &format!("{prefix}.{name}.w"),
            Tensor::normal(vec![di, co], std / (di as f64).sqrt(), rng),
            partition,
        );
        store.insert(&format!("{prefix}.{name}.b"), Tensor::zeros(vec![co]), partition);
    };
    dense(store, "time1", dt, dt, rng);
    dense(store, "time2", dt, dt, rng);
    dense(store, "enc0.time", dt, c0, rng);
    dense(store, "enc1.time", dt, c1, rng);
    dense(store, "dec1.time", dt, c1, rng);
    dense(store, "dec0.time", dt, c0, rng);
    let conv = |store: &mut ParamStore, name: &str, ci: usize, co: usize, rng: &mut ChaCha20Rng| {
        store.insert(
            &format!("{prefix}.{name}.k"),
            Tensor::normal(vec![co, ci, 3, 3], std / ((ci * 9) as f64).sqrt(), rng),
            partition,
        );
        store.insert(&format!("{prefix}.{name}.b"), Tensor::zeros(vec![co]), partition);
    };
    conv(store, "stem", cfg.in_channels, c0, rng);
    conv(store, "enc0.conv", c0, c0, rng);
    conv(store, "down", c0, c1, rng);
    conv(store, "enc1.conv", c1, c1, rng);
    conv(store, "mid1", c1, c1, rng);
    conv(store, "mid2", c1, c1, rng);
    conv(store, "dec1.conv", 2 * c1, c1, rng);
    conv(store, "up", c1, c0, rng);
    conv(store, "dec0.conv", 2 * c0, c0, rng);
    // The output head starts at zero so an untrained net predicts zero noise.
    store.insert(
        &format!("{prefix}.out.k"),
        Tensor::zeros(vec![cfg.in_channels, c0, 3, 3]),
        partition,
    );
    store.insert(&format!("{prefix}.out.b"), Tensor::zeros(vec![cfg.in_channels]), partition);
}

fn time_vector(tape: &mut Tape, store: &ParamStore, prefix: &str, taus: &[usize], d: usize) -> VarId {
    let mut rows = Vec::with_capacity(taus.len() * d);
    for &t in taus {
        rows.extend(sinusoidal_embedding(t, d));
    }
    let leaf = tape.leaf(Tensor::new(vec![taus.len(), d], rows));
    let w1 = tape.param(store, &format!("{prefix}.time1.w"));
    let b1 = tape.param(store, &format!("{prefix}.time1.b"));
    let w2 = tape.param(store, &format!("{prefix}.time2.w"));
    let b2 = tape.param(store, &format!("{prefix}.time2.b"));
    let h = tape.dense(leaf, w1, b1, crate::kernels::Activation::Silu);
    tape.dense(h, w2, b2, crate::kernels::Activation::None)
}

fn level_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    name: &str,
    x: VarId,
    temb: VarId,
) -> VarId {
    let k = tape.param(store, &format!("{prefix}.{name}.conv.k"));
    let b = tape.param(store, &format!("{prefix}.{name}.conv.b"));
    let tw = tape.param(store, &format!("{prefix}.{name}.time.w"));
    let tb = tape.param(store, &format!("{prefix}.{name}.time.b"));
    let conv = tape.conv2d(x, k, b, 1);
    let shape = tape.shape(conv).to_vec();
    let bias = tape.dense(temb, tw, tb, crate::kernels::Activation::None);
    let bias_map = tape.tile(bias, &shape[2..]);
    let sum = tape.add(conv, bias_map);
    tape.silu(sum)
}

fn plain_conv(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    name: &str,
    x: VarId,
    stride: usize,
    act: bool,
) -> VarId {
    let k = tape.param(store, &format!("{prefix}.{name}.k"));
    let b = tape.param(store, &format!("{prefix}.{name}.b"));
    let c = tape.conv2d(x, k, b, stride);
    if act {
        tape.silu(c)
    } else {
        c
    }
}

/// Encoder half only: per-level features of x at the given step indices.
/// Returns (level-0 features [B,c0,H,W], level-1 features [B,c1,H/2,W/2]).
pub fn unet_encode(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: VarId,
    taus: &[usize],
    cfg: &UNetConfig,
) -> (VarId, VarId) {
    assert_eq!(tape.shape(x)[0], taus.len(), "one step index per batch item");
    let temb = time_vector(tape, store, prefix, taus, cfg.d_time);
    let stem = plain_conv(tape, store, prefix, "stem", x, 1, false);
    let skip0 = level_block(tape, store, prefix, "enc0", stem, temb);
    let down = plain_conv(tape, store, prefix, "down", skip0, 2, true);
    let skip1 = level_block(tape, store, prefix, "enc1", down, temb);
    (skip0, skip1)
}

/// Full denoising pass predicting the noise in x. Control signals, when
/// given, are added onto the decoder skip connections (level 0, level 1).
pub fn unet_denoise(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: VarId,
    taus: &[usize],
    controls: Option<(VarId, VarId)>,
    cfg: &UNetConfig,
) -> VarId {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 4, "denoiser input must be [B, C, H, W]");
    assert_eq!(xs[1], cfg.in_channels);
    let temb = time_vector(tape, store, prefix, taus, cfg.d_time);
    let stem = plain_conv(tape, store, prefix, "stem", x, 1, false);
    let skip0 = level_block(tape, store, prefix, "enc0", stem, temb);
    let down = plain_conv(tape, store, prefix, "down", skip0, 2, true);
    let skip1 = level_block(tape, store, prefix, "enc1", down, temb);
    let mid1 = plain_conv(tape, store, prefix, "mid1", skip1, 1, true);
    let mid2 = plain_conv(tape, store, prefix, "mid2", mid1, 1, true);

    let (inj0, inj1) = match controls {
        Some((z0, z1)) => {
            let s0 = tape.add(skip0, z0);
            let s1 = tape.add(skip1, z1);
            (s0, s1)
        }
        None => (skip0, skip1),
    };

    let cat1 = tape.concat_ch(mid2, inj1);
    let dec1 = level_block(tape, store, prefix, "dec1", cat1, temb);
    let up_n = tape.upsample2(dec1);
    let up = plain_conv(tape, store, prefix, "up", up_n, 1, true);
    let cat0 = tape.concat_ch(up, inj0);
    let dec0 = level_block(tape, store, prefix, "dec0", cat0, temb);
    plain_conv(tape, store, prefix, "out", dec0, 1, false)
}
