//! Wires the denoiser, the per-level control stacks, and the sequence
//! summarizer into one forecasting model, and hosts the ancestral sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::control::{
    continue_from_ctrl, init_control_level, run_control_level, structural_path, ControlLevelConfig,
    ControlMode,
};
use crate::diffusion::{unet_denoise, unet_encode, NoiseSchedule, UNetConfig};
use crate::params::ParamStore;
use crate::tape::{Tape, VarId};
use crate::temporal::{
    frame_token, init_frame_encoder, init_summarizer, init_time_encoder, interleave_tokens,
    summarize_sequence, SummarizerConfig, TimeEncoderConfig,
};
use crate::tensor::Tensor;

pub const UNET_PREFIX: &str = "unet";
pub const CONTROL_PREFIXES: [&str; 2] = ["ctrl.lvl0", "ctrl.lvl1"];
pub const TIME_PREFIX: &str = "pte";
pub const SUMMARY_PREFIX: &str = "summ";
pub const TOKEN_PREFIX: &str = "tok";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub d_tok: usize,
    pub d_cond: usize,
    pub fusion: usize,
    pub heads: usize,
    pub dropout: f64,
    pub time_hidden: usize,
    pub history_len: usize,
    pub frame_hw: (usize, usize),
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            unet: UNetConfig::desk(),
            d_tok: 32,
            d_cond: 64,
            fusion: 32,
            heads: 2,
            dropout: 0.0,
            time_hidden: 32,
            history_len: 3,
            frame_hw: (16, 16),
        }
    }

    /// A small variant for unit tests; same topology, far fewer weights.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            unet: UNetConfig { in_channels: 3, channels: [4, 6], d_time: 8 },
            d_tok: 6,
            d_cond: 8,
            fusion: 5,
            heads: 2,
            dropout: 0.0,
            time_hidden: 7,
            history_len: 3,
            frame_hw: (8, 8),
        }
    }

    pub fn level_cfg(&self, level: usize) -> ControlLevelConfig {
        let c = self.unet.channels[level];
        ControlLevelConfig {
            c_in: c,
            c_out: c,
            kernel: 3,
            d_cond: self.d_cond,
            fusion: self.fusion,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn time_encoder(&self) -> TimeEncoderConfig {
        TimeEncoderConfig { d_tok: self.d_tok, hidden: self.time_hidden }
    }

    pub fn summarizer(&self) -> SummarizerConfig {
        SummarizerConfig { d_tok: self.d_tok, d_cond: self.d_cond }
    }

    pub fn frame_dim(&self) -> usize {
        self.unet.in_channels * self.frame_hw.0 * self.frame_hw.1
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        vec![self.unet.in_channels, self.frame_hw.0, self.frame_hw.1]
    }
}

/// Registers every parameter outside the denoiser: both control levels, the
/// interval encoder, the sequence summarizer, and the frozen frame embedder.
pub fn init_conditioning(store: &mut ParamStore, cfg: &ModelConfig, std: f64, rng: &mut ChaCha20Rng) {
    for (level, prefix) in CONTROL_PREFIXES.iter().enumerate() {
        init_control_level(store, prefix, &cfg.level_cfg(level), std, rng);
    }
    init_time_encoder(store, TIME_PREFIX, &cfg.time_encoder(), std, rng);
    init_summarizer(store, SUMMARY_PREFIX, &cfg.summarizer(), std, rng);
    init_frame_encoder(store, TOKEN_PREFIX, cfg.frame_dim(), cfg.d_tok, std, rng);
}

/// [C, H, W] or [1, C, H, W] to [H, W, C].
pub fn chw_to_hwc(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => panic!("expected [C, H, W] or [1, C, H, W], got {s:?}"),
    };
    let src = t.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                out[(hi * w + wi) * c + ci] = src[(ci * h + hi) * w + wi];
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// [H, W, C] to [C, H, W].
pub fn hwc_to_chw(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [H, W, C], got {s:?}");
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; c * h * w];
    for hi in 0..h {
        for wi in 0..w {
            for ci in 0..c {
                out[(ci * h + hi) * w + wi] = src[(hi * w + wi) * c + ci];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Frozen-encoder features of a history clip, one tensor per level, shaped
/// [1, C_l, T, H_l, W_l] for direct use as control input.
#[derive(Debug, Clone)]
pub struct HistoryFeatures {
    pub h0: Tensor,
    pub h1: Tensor,
}

/// Runs the denoiser encoder over each history frame at step index 0 and
/// stacks the per-frame features along a time axis. Pure value computation;
/// callers cache the result while the encoder stays frozen.
pub fn encode_history(store: &ParamStore, cfg: &ModelConfig, frames: &[Tensor]) -> HistoryFeatures {
    assert!(!frames.is_empty(), "history must contain at least one frame");
    let fs = cfg.frame_shape();
    for f in frames {
        assert_eq!(f.shape(), &fs[..], "history frames must be [C, H, W] at the model size");
    }
    let t_len = frames.len();
    let mut data = Vec::with_capacity(t_len * frames[0].data().len());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![t_len, fs[0], fs[1], fs[2]], data));
    let (h0, h1) = unet_encode(&mut tape, store, UNET_PREFIX, x, &vec![0; t_len], &cfg.unet);
    let to_clip = |tape: &mut Tape, h: VarId| {
        let s = tape.shape(h).to_vec();
        let p = tape.permute(h, &[1, 0, 2, 3]);
        let r = tape.reshape(p, vec![1, s[1], s[0], s[2], s[3]]);
        tape.value(r).clone()
    };
    let h0 = to_clip(&mut tape, h0);
    let h1 = to_clip(&mut tape, h1);
    HistoryFeatures { h0, h1 }
}

/// Structural-path outputs for both levels as plain values, for callers that
/// train only the later stages and can freeze these.
pub fn ctrl_features(store: &ParamStore, hist: &HistoryFeatures) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let h0 = tape.leaf(hist.h0.clone());
    let h1 = tape.leaf(hist.h1.clone());
    let c0 = structural_path(&mut tape, store, CONTROL_PREFIXES[0], h0);
    let c1 = structural_path(&mut tape, store, CONTROL_PREFIXES[1], h1);
    (tape.value(c0).clone(), tape.value(c1).clone())
}

/// Token-level summary of a history clip: frame tokens interleaved with
/// embedded day gaps, pooled down to one conditioning vector [1, d_cond].
pub fn summarize_history(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    frames: &[Tensor],
    days: &[f64],
) -> VarId {
    assert_eq!(frames.len(), days.len(), "one timestamp per history frame");
    assert!(!frames.is_empty(), "history must contain at least one frame");
    let fs = cfg.frame_shape();
    let mut visuals = Vec::with_capacity(frames.len());
    for f in frames {
        assert_eq!(f.shape(), &fs[..], "history frames must be [C, H, W] at the model size");
        let leaf = tape.leaf(f.clone());
        visuals.push(frame_token(tape, store, TOKEN_PREFIX, leaf));
    }
    let deltas: Vec<f64> = days.windows(2).map(|w| w[1] - w[0]).collect();
    let seq = interleave_tokens(tape, store, TIME_PREFIX, &visuals, &deltas);
    let m = summarize_sequence(tape, store, SUMMARY_PREFIX, &seq);
    let d_cond = tape.shape(m)[0];
    tape.reshape(m, vec![1, d_cond])
}

/// Both injection signals from (possibly batched) encoder features.
pub fn history_controls(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    h0: VarId,
    h1: VarId,
    m: Option<VarId>,
    mode: ControlMode,
) -> (VarId, VarId) {
    let z0 = run_control_level(tape, store, CONTROL_PREFIXES[0], h0, m, &cfg.level_cfg(0), mode, None);
    let z1 = run_control_level(tape, store, CONTROL_PREFIXES[1], h1, m, &cfg.level_cfg(1), mode, None);
    (z0, z1)
}

/// Same as history_controls but starting from precomputed structural-path
/// outputs instead of raw encoder features.
pub fn history_controls_cached(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    hc0: VarId,
    hc1: VarId,
    m: Option<VarId>,
    mode: ControlMode,
) -> (VarId, VarId) {
    let z0 = continue_from_ctrl(tape, store, CONTROL_PREFIXES[0], hc0, m, &cfg.level_cfg(0), mode, None)
        .z_agg;
    let z1 = continue_from_ctrl(tape, store, CONTROL_PREFIXES[1], hc1, m, &cfg.level_cfg(1), mode, None)
        .z_agg;
    (z0, z1)
}

/// Generates the next frame after a history clip by ancestral denoising.
///
/// The control signals depend only on the history, so they are computed once
/// and reused across every denoising step. Output is [H, W, C] in [0, 1],
/// fully determined by (store, history, seed).
pub fn sample_forecast(
    store: &ParamStore,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    frames: &[Tensor],
    days: &[f64],
    mode: ControlMode,
    seed: u64,
) -> Tensor {
    assert_eq!(
        frames.len(),
        cfg.history_len,
        "the sampler conditions on exactly {} history frames, got {}",
        cfg.history_len,
        frames.len()
    );
    assert_eq!(frames.len(), days.len(), "one timestamp per history frame");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let hist = encode_history(store, cfg, frames);
    let (z0, z1) = {
        let mut tape = Tape::new();
        let h0 = tape.leaf(hist.h0);
        let h1 = tape.leaf(hist.h1);
        let m = match mode {
            ControlMode::Full => Some(summarize_history(&mut tape, store, cfg, frames, days)),
            ControlMode::StructuralOnly => None,
        };
        let (z0, z1) = history_controls(&mut tape, store, cfg, h0, h1, m, mode);
        (tape.value(z0).clone(), tape.value(z1).clone())
    };

    let (h, w) = cfg.frame_hw;
    let c = cfg.unet.in_channels;
    let mut x = Tensor::normal(vec![1, c, h, w], 1.0, &mut rng);
    for t in (0..sched.steps).rev() {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let z0v = tape.leaf(z0.clone());
        let z1v = tape.leaf(z1.clone());
        let eps = unet_denoise(&mut tape, store, UNET_PREFIX, xv, &[t], Some((z0v, z1v)), &cfg.unet);
        let eps = tape.value(eps);
        let beta = sched.betas[t];
        let abar = sched.alphas_cumprod[t];
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let coef = beta / (1.0 - abar).sqrt();
        let mut next: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xi, &ei)| inv_sqrt_alpha * (xi - coef * ei))
            .collect();
        if t > 0 {
            let sigma = beta.sqrt();
            let noise = Tensor::normal(x.shape().to_vec(), 1.0, &mut rng);
            for (n, &z) in next.iter_mut().zip(noise.data()) {
                *n += sigma * z;
            }
        }
        x = Tensor::new(x.shape().to_vec(), next);
    }
    let mut img = chw_to_hwc(&x);
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}
