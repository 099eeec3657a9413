//! Control levels feeding the denoiser's skip connections: a structural
//! path of two 3D convolutions over encoder features, a semantic path
//! projecting the sequence summary vector, a sigmoid gate blending the two,
//! attention-based refinement along the frame axis, and time aggregation.

use rand_chacha::ChaCha20Rng;

use crate::attention::{attention_block, attn_param_names, init_attn_params, AttnConfig};
use crate::kernels::Activation;
use crate::params::{ParamStore, Partition};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Raw blend scalar for the refinement residual starts at sigmoid(-2), most
/// of the weight on the unrefined features.
pub const ALPHA_INIT: f64 = -2.0;

/// The fusion gate starts mostly closed for the same reason: sigmoid(-2) of
/// the blend lands on the structural signal until training opens it.
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Structural, semantic, and refinement paths all active.
    Full,
    /// Structural path only; the wiring used before the semantic parameters
    /// exist, and the ablation arm.
    StructuralOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlLevelConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub d_cond: usize,
    pub fusion: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl ControlLevelConfig {
    pub fn attn(&self) -> AttnConfig {
        AttnConfig {
            dim: self.c_out,
            heads: self.heads,
            dropout: self.dropout,
            feed_forward: false,
            ff_hidden: 0,
        }
    }
}

/// Two 3x3x3 convolutions with SiLU between, mapping C_in -> C_out channels.
/// h_enc: [B, C_in, T, H, W] -> [B, C_out, T, H, W].
pub fn structural_path(tape: &mut Tape, store: &ParamStore, prefix: &str, h_enc: VarId) -> VarId {
    let k1 = tape.param(store, &format!("{prefix}.conv1.k"));
    let b1 = tape.param(store, &format!("{prefix}.conv1.b"));
    let k2 = tape.param(store, &format!("{prefix}.conv2.k"));
    let b2 = tape.param(store, &format!("{prefix}.conv2.b"));
    let c1 = tape.conv3d(h_enc, k1, b1);
    let a1 = tape.silu(c1);
    tape.conv3d(a1, k2, b2)
}

pub fn init_semantic_project(
    store: &mut ParamStore,
    prefix: &str,
    d_cond: usize,
    fusion: usize,
    channels: usize,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    let part = Partition::SemanticTemporal;
    store.insert(
        &format!("{prefix}.proj1.w"),
        Tensor::normal(vec![d_cond, fusion], std / (d_cond as f64).sqrt(), rng),
        part,
    );
    store.insert(&format!("{prefix}.proj1.b"), Tensor::zeros(vec![fusion]), part);
    store.insert(
        &format!("{prefix}.proj2.w"),
        Tensor::normal(vec![fusion, channels], std / (fusion as f64).sqrt(), rng),
        part,
    );
    store.insert(&format!("{prefix}.proj2.b"), Tensor::zeros(vec![channels]), part);
}

/// Two-layer MLP with SiLU hidden activation. m: [B, d_cond] -> [B, C_out].
pub fn semantic_project(tape: &mut Tape, store: &ParamStore, prefix: &str, m: VarId) -> VarId {
    let w1 = tape.param(store, &format!("{prefix}.proj1.w"));
    let b1 = tape.param(store, &format!("{prefix}.proj1.b"));
    let w2 = tape.param(store, &format!("{prefix}.proj2.w"));
    let b2 = tape.param(store, &format!("{prefix}.proj2.b"));
    let hidden = tape.dense(m, w1, b1, Activation::Silu);
    tape.dense(hidden, w2, b2, Activation::None)
}

/// Replicates a per-channel vector across frame and spatial axes:
/// [B, C] -> [B, C, T, H, W].
pub fn tile_spatial(tape: &mut Tape, s_proj: VarId, t: usize, h: usize, w: usize) -> VarId {
    assert_eq!(tape.shape(s_proj).len(), 2, "tile input must be [B, C]");
    tape.tile(s_proj, &[t, h, w])
}

pub struct Fused {
    /// Gate values in (0,1), tiled like the structural features.
    pub g: VarId,
    /// Convex combination (1-g) * h_ctrl + g * s.
    pub f: VarId,
    /// The tiled semantic features.
    pub s: VarId,
}

/// Blends structural features with the tiled semantic vector through a
/// per-channel sigmoid gate computed from s_proj.
/// h_ctrl: [B, C, T, H, W]; s_proj: [B, C]; extra = [T, H, W].
pub fn gated_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_ctrl: VarId,
    s_proj: VarId,
    extra: &[usize],
) -> Fused {
    assert_eq!(extra.len(), 3, "extra dims must be [T, H, W]");
    let hs = tape.shape(h_ctrl).to_vec();
    assert_eq!(&hs[2..], extra, "structural features disagree with the tile dims");
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let logits = tape.dense(s_proj, w, b, Activation::None);
    let gate_flat = tape.sigmoid(logits);
    let g = tape.tile(gate_flat, extra);
    let s = tape.tile(s_proj, extra);
    let gh = tape.mul(g, h_ctrl);
    let keep = tape.sub(h_ctrl, gh);
    let gs = tape.mul(g, s);
    let f = tape.add(keep, gs);
    Fused { g, f, s }
}

pub fn init_temporal_refine(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttnConfig,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    store.insert(
        &format!("{prefix}.alpha"),
        Tensor::scalar(ALPHA_INIT),
        Partition::SemanticTemporal,
    );
    init_attn_params(store, &format!("{prefix}.attn"), cfg, Partition::SemanticTemporal, std, rng);
}

/// Attention over the frame axis blended back through a learned residual
/// weight: z = sigmoid(alpha) * refine(f) + (1 - sigmoid(alpha)) * f.
/// f: [B, C, T, H, W] -> same shape.
pub fn temporal_refine(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    f: VarId,
    cfg: &AttnConfig,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> VarId {
    let fs = tape.shape(f).to_vec();
    assert_eq!(fs.len(), 5, "refinement input must be [B, C, T, H, W]");
    let (b_n, c, t, h, w) = (fs[0], fs[1], fs[2], fs[3], fs[4]);
    assert_eq!(c, cfg.dim);
    // Fold space into the batch so the frame axis becomes the sequence.
    let folded = tape.permute(f, &[0, 3, 4, 2, 1]);
    let seq = tape.reshape(folded, vec![b_n * h * w, t, c]);
    let refined = attention_block(tape, store, &format!("{prefix}.attn"), seq, cfg, dropout_rng);
    let unfolded = tape.reshape(refined, vec![b_n, h, w, t, c]);
    let back = tape.permute(unfolded, &[0, 4, 3, 1, 2]);

    let alpha_raw = tape.param(store, &format!("{prefix}.alpha"));
    let alpha = tape.sigmoid(alpha_raw);
    let one = tape.leaf(Tensor::scalar(1.0));
    let rest = tape.sub(one, alpha);
    let weighted_new = tape.mul_scalar(back, alpha);
    let weighted_old = tape.mul_scalar(f, rest);
    tape.add(weighted_new, weighted_old)
}

/// Mean over the frame axis: [B, C, T, H, W] -> [B, C, H, W].
pub fn aggregate_time(tape: &mut Tape, z: VarId) -> VarId {
    assert_eq!(tape.shape(z).len(), 5);
    tape.mean_axis(z, 2)
}

/// Adds the time-aggregated control signal onto skip features.
pub fn aggregate_and_inject(tape: &mut Tape, z: VarId, skip: VarId) -> VarId {
    let agg = aggregate_time(tape, z);
    assert_eq!(tape.shape(agg), tape.shape(skip), "control and skip shapes disagree");
    tape.add(skip, agg)
}

pub fn init_control_level(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ControlLevelConfig,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    let k = cfg.kernel;
    let fan_in = cfg.c_in * k * k * k;
    store.insert(
        &format!("{prefix}.conv1.k"),
        Tensor::normal(vec![cfg.c_out, cfg.c_in, k, k, k], std / (fan_in as f64).sqrt(), rng),
        Partition::Structural,
    );
    store.insert(&format!("{prefix}.conv1.b"), Tensor::zeros(vec![cfg.c_out]), Partition::Structural);
    // Second convolution starts at zero so a freshly added level leaves the
    // denoiser's behavior unchanged until training opens it up.
    store.insert(
        &format!("{prefix}.conv2.k"),
        Tensor::zeros(vec![cfg.c_out, cfg.c_out, k, k, k]),
        Partition::Structural,
    );
    store.insert(&format!("{prefix}.conv2.b"), Tensor::zeros(vec![cfg.c_out]), Partition::Structural);

    init_semantic_project(
        store,
        &format!("{prefix}.sem"),
        cfg.d_cond,
        cfg.fusion,
        cfg.c_out,
        std,
        rng,
    );
    // Second projection starts at zero and the gate mostly closed: the
    // semantic path begins silent and the fused signal stays close to the
    // structural one the earlier stage trained.
    let zero_names =
        [format!("{prefix}.sem.proj2.w"), format!("{prefix}.sem.proj2.b")];
    for name in zero_names {
        let shape = store.value(&name).shape().to_vec();
        *store.value_mut(&name) = Tensor::zeros(shape);
    }
    store.insert(
        &format!("{prefix}.gate.w"),
        Tensor::zeros(vec![cfg.c_out, cfg.c_out]),
        Partition::SemanticTemporal,
    );
    store.insert(
        &format!("{prefix}.gate.b"),
        Tensor::new(vec![cfg.c_out], vec![GATE_BIAS_INIT; cfg.c_out]),
        Partition::SemanticTemporal,
    );

    init_temporal_refine(store, &format!("{prefix}.ref"), &cfg.attn(), std, rng);
    // Zero output projection makes the refinement start as the identity.
    let wo = format!("{prefix}.ref.attn.wo");
    let shape = store.value(&wo).shape().to_vec();
    *store.value_mut(&wo) = Tensor::zeros(shape);
}

pub fn control_level_param_names(prefix: &str, cfg: &ControlLevelConfig) -> Vec<String> {
    let mut names = vec![
        format!("{prefix}.conv1.k"),
        format!("{prefix}.conv1.b"),
        format!("{prefix}.conv2.k"),
        format!("{prefix}.conv2.b"),
        format!("{prefix}.sem.proj1.w"),
        format!("{prefix}.sem.proj1.b"),
        format!("{prefix}.sem.proj2.w"),
        format!("{prefix}.sem.proj2.b"),
        format!("{prefix}.gate.w"),
        format!("{prefix}.gate.b"),
        format!("{prefix}.ref.alpha"),
    ];
    names.extend(attn_param_names(&format!("{prefix}.ref.attn"), &cfg.attn()));
    names
}

pub struct ControlLevelState {
    pub h_ctrl: VarId,
    pub s_proj: Option<VarId>,
    pub s: Option<VarId>,
    pub g: Option<VarId>,
    pub f: Option<VarId>,
    pub z: VarId,
    pub z_agg: VarId,
}

/// Runs one control level end to end and exposes every intermediate.
pub fn run_control_level_state(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_enc: VarId,
    m: Option<VarId>,
    cfg: &ControlLevelConfig,
    mode: ControlMode,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> ControlLevelState {
    let h_ctrl = structural_path(tape, store, prefix, h_enc);
    continue_from_ctrl(tape, store, prefix, h_ctrl, m, cfg, mode, dropout_rng)
}

/// Picks the level up after the structural convolutions, letting callers
/// feed a precomputed h_ctrl when those weights are frozen.
pub fn continue_from_ctrl(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_ctrl: VarId,
    m: Option<VarId>,
    cfg: &ControlLevelConfig,
    mode: ControlMode,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> ControlLevelState {
    let hs = tape.shape(h_ctrl).to_vec();
    let (t, h, w) = (hs[2], hs[3], hs[4]);
    match mode {
        ControlMode::StructuralOnly => {
            let z_agg = aggregate_time(tape, h_ctrl);
            ControlLevelState {
                h_ctrl,
                s_proj: None,
                s: None,
                g: None,
                f: None,
                z: h_ctrl,
                z_agg,
            }
        }
        ControlMode::Full => {
            let m = m.expect("full control mode needs the summary vector");
            let s_proj = semantic_project(tape, store, &format!("{prefix}.sem"), m);
            let fused =
                gated_fuse(tape, store, &format!("{prefix}.gate"), h_ctrl, s_proj, &[t, h, w]);
            let z = temporal_refine(
                tape,
                store,
                &format!("{prefix}.ref"),
                fused.f,
                &cfg.attn(),
                dropout_rng,
            );
            let z_agg = aggregate_time(tape, z);
            ControlLevelState {
                h_ctrl,
                s_proj: Some(s_proj),
                s: Some(fused.s),
                g: Some(fused.g),
                f: Some(fused.f),
                z,
                z_agg,
            }
        }
    }
}

/// Runs one control level and returns the time-aggregated injection signal
/// [B, C_out, H, W].
pub fn run_control_level(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h_enc: VarId,
    m: Option<VarId>,
    cfg: &ControlLevelConfig,
    mode: ControlMode,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> VarId {
    run_control_level_state(tape, store, prefix, h_enc, m, cfg, mode, dropout_rng).z_agg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn level_cfg() -> ControlLevelConfig {
        ControlLevelConfig {
            c_in: 2,
            c_out: 4,
            kernel: 3,
            d_cond: 3,
            fusion: 5,
            heads: 2,
            dropout: 0.0,
        }
    }

    fn level_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        init_control_level(&mut store, "lvl", &level_cfg(), 0.6, &mut rng);
        store
    }

    fn randomize(store: &mut ParamStore, names: &[String], std: f64, rng: &mut ChaCha20Rng) {
        for name in names {
            let shape = store.value(name).shape().to_vec();
            *store.value_mut(name) = Tensor::normal(shape, std, rng);
        }
    }

    #[test]
    fn structural_path_of_zero_input_is_zero() {
        let mut store = level_store(1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        randomize(
            &mut store,
            &["lvl.conv1.k".into(), "lvl.conv2.k".into()],
            0.5,
            &mut rng,
        );
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 2, 3, 3]));
        let y = structural_path(&mut tape, &store, "lvl", x);
        assert_eq!(tape.shape(y), &[1, 4, 2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_delta_kernels_pass_input_through() {
        // Delta kernels make each convolution the identity; a large positive
        // input saturates the SiLU in between, so the pair reproduces the
        // input to high precision.
        let mut store = ParamStore::new();
        let mut delta = Tensor::zeros(vec![1, 1, 3, 3, 3]);
        delta.data_mut()[13] = 1.0;
        store.insert("one.conv1.k", delta.clone(), Partition::Structural);
        store.insert("one.conv1.b", Tensor::zeros(vec![1]), Partition::Structural);
        store.insert("one.conv2.k", delta, Partition::Structural);
        store.insert("one.conv2.b", Tensor::zeros(vec![1]), Partition::Structural);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Tensor::new(
            vec![1, 1, 2, 2, 2],
            (0..8).map(|_| rng.gen_range(40.0..60.0)).collect(),
        );
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = structural_path(&mut tape, &store, "one", xv);
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn semantic_projection_shapes_and_zero_map() {
        let store = level_store(4);
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::full(vec![2, 3], 0.7));
        let s = semantic_project(&mut tape, &store, "lvl.sem", m);
        assert_eq!(tape.shape(s), &[2, 4]);
        // proj2 starts at zero, so the projection starts silent.
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

        let mut store = level_store(5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        randomize(
            &mut store,
            &["lvl.sem.proj2.w".into(), "lvl.sem.proj2.b".into()],
            0.5,
            &mut rng,
        );
        for name in ["lvl.sem.proj1.w", "lvl.sem.proj1.b"] {
            let shape = store.value(name).shape().to_vec();
            *store.value_mut(name) = Tensor::zeros(shape);
        }
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::full(vec![1, 3], 0.9));
        let s = semantic_project(&mut tape, &store, "lvl.sem", m);
        let b = store.value("lvl.sem.proj2.b").data();
        // Zero first layer leaves only the output bias.
        for (got, want) in tape.value(s).data().iter().zip(b) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn identity_weights_reduce_projection_to_silu() {
        let mut store = ParamStore::new();
        let mut eye = Tensor::zeros(vec![2, 2]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        store.insert("sp.proj1.w", eye.clone(), Partition::SemanticTemporal);
        store.insert("sp.proj1.b", Tensor::zeros(vec![2]), Partition::SemanticTemporal);
        store.insert("sp.proj2.w", eye, Partition::SemanticTemporal);
        store.insert("sp.proj2.b", Tensor::zeros(vec![2]), Partition::SemanticTemporal);
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let s = semantic_project(&mut tape, &store, "sp", m);
        let silu = |x: f64| x / (1.0 + (-x).exp());
        assert!((tape.value(s).data()[0] - silu(1.0)).abs() < 1e-12);
        assert!((tape.value(s).data()[1] - silu(2.0)).abs() < 1e-12);
    }

    #[test]
    fn tiling_replicates_channels_across_every_position() {
        let mut tape = Tape::new();
        let sp = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let s = tile_spatial(&mut tape, sp, 1, 2, 2);
        assert_eq!(tape.shape(s), &[1, 2, 1, 2, 2]);
        let data = tape.value(s).data();
        assert_eq!(&data[..4], &[1.0; 4]);
        assert_eq!(&data[4..], &[2.0; 4]);

        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sp_t = Tensor::normal(vec![2, 3], 1.0, &mut rng);
        let spv = tape.leaf(sp_t.clone());
        let (t, h, w) = (2, 3, 2);
        let s = tile_spatial(&mut tape, spv, t, h, w);
        let data = tape.value(s).data();
        for b in 0..2 {
            for c in 0..3 {
                let base = sp_t.data()[b * 3 + c];
                let block = &data[(b * 3 + c) * t * h * w..(b * 3 + c + 1) * t * h * w];
                assert!(block.iter().all(|&v| v == base), "spatial variance must be zero");
            }
        }
        let sum: f64 = data.iter().sum();
        let want = (t * h * w) as f64 * sp_t.data().iter().sum::<f64>();
        assert!((sum - want).abs() < 1e-9);
    }

    fn gate_fixture(bias: f64) -> (ParamStore, Tensor, Tensor) {
        let mut store = ParamStore::new();
        store.insert("gate.w", Tensor::zeros(vec![2, 2]), Partition::SemanticTemporal);
        store.insert("gate.b", Tensor::full(vec![2], bias), Partition::SemanticTemporal);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let h = Tensor::normal(vec![1, 2, 1, 2, 2], 1.0, &mut rng);
        let sp = Tensor::normal(vec![1, 2], 1.0, &mut rng);
        (store, h, sp)
    }

    #[test]
    fn extreme_gate_logits_select_one_side() {
        for (bias, pick_h) in [(-50.0, true), (50.0, false)] {
            let (store, h, sp) = gate_fixture(bias);
            let mut tape = Tape::new();
            let hv = tape.leaf(h.clone());
            let sv = tape.leaf(sp.clone());
            let fused = gated_fuse(&mut tape, &store, "gate", hv, sv, &[1, 2, 2]);
            let f = tape.value(fused.f).data();
            for c in 0..2 {
                for p in 0..4 {
                    let want = if pick_h { h.data()[c * 4 + p] } else { sp.data()[c] };
                    assert!((f[c * 4 + p] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn neutral_gate_averages_both_sides() {
        let mut store = ParamStore::new();
        store.insert("gate.w", Tensor::zeros(vec![1, 1]), Partition::SemanticTemporal);
        store.insert("gate.b", Tensor::zeros(vec![1]), Partition::SemanticTemporal);
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::full(vec![1, 1, 1, 1, 1], 2.0));
        let sv = tape.leaf(Tensor::full(vec![1, 1], 4.0));
        let fused = gated_fuse(&mut tape, &store, "gate", hv, sv, &[1, 1, 1]);
        assert_eq!(tape.value(fused.g).data(), &[0.5]);
        assert_eq!(tape.value(fused.f).data(), &[3.0]);
    }

    #[test]
    fn fusion_stays_between_its_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut store = ParamStore::new();
            store.insert(
                "gate.w",
                Tensor::normal(vec![2, 2], 1.0, &mut rng),
                Partition::SemanticTemporal,
            );
            store.insert(
                "gate.b",
                Tensor::normal(vec![2], 1.0, &mut rng),
                Partition::SemanticTemporal,
            );
            let h = Tensor::normal(vec![1, 2, 1, 5, 5], 2.0, &mut rng);
            let sp = Tensor::normal(vec![1, 2], 2.0, &mut rng);
            let mut tape = Tape::new();
            let hv = tape.leaf(h.clone());
            let sv = tape.leaf(sp.clone());
            let fused = gated_fuse(&mut tape, &store, "gate", hv, sv, &[1, 5, 5]);
            let g = tape.value(fused.g).data().to_vec();
            let f = tape.value(fused.f).data();
            for c in 0..2 {
                for p in 0..25 {
                    let idx = c * 25 + p;
                    assert!(g[idx] > 0.0 && g[idx] < 1.0, "gate must stay strictly inside (0,1)");
                    let (hv, sv) = (h.data()[idx], sp.data()[c]);
                    let (lo, hi) = (hv.min(sv), hv.max(sv));
                    assert!(f[idx] >= lo - 1e-12 && f[idx] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn frame_axis_fold_roundtrips_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for b in 1..=4 {
            for c in 1..=4 {
                for t in 1..=4 {
                    for h in 1..=2 {
                        for w in 1..=2 {
                            let x = Tensor::normal(vec![b, c, t, h, w], 1.0, &mut rng);
                            let mut tape = Tape::new();
                            let xv = tape.leaf(x.clone());
                            let folded = tape.permute(xv, &[0, 3, 4, 2, 1]);
                            let seq = tape.reshape(folded, vec![b * h * w, t, c]);
                            let unfolded = tape.reshape(seq, vec![b, h, w, t, c]);
                            let back = tape.permute(unfolded, &[0, 4, 3, 1, 2]);
                            let got: Vec<u64> =
                                tape.value(back).data().iter().map(|v| v.to_bits()).collect();
                            let want: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn refinement_vanishes_as_alpha_goes_negative() {
        let cfg = AttnConfig::new(2, 1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        init_temporal_refine(&mut store, "ref", &cfg, 0.6, &mut rng);
        *store.value_mut("ref.alpha") = Tensor::scalar(-50.0);
        let f = Tensor::normal(vec![1, 2, 3, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let z = temporal_refine(&mut tape, &store, "ref", fv, &cfg, None);
        for (got, want) in tape.value(z).data().iter().zip(f.data()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_attention_makes_refinement_the_identity_for_any_alpha() {
        let cfg = AttnConfig::new(3, 1);
        for (t, alpha) in [(1usize, 0.7), (1, -1.3), (4, 0.4)] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(12);
            init_temporal_refine(&mut store, "ref", &cfg, 0.6, &mut rng);
            for name in attn_param_names("ref.attn", &cfg) {
                let shape = store.value(&name).shape().to_vec();
                *store.value_mut(&name) = Tensor::zeros(shape);
            }
            *store.value_mut("ref.alpha") = Tensor::scalar(alpha);
            let f = Tensor::normal(vec![2, 3, t, 2, 2], 1.0, &mut rng);
            let mut tape = Tape::new();
            let fv = tape.leaf(f.clone());
            let z = temporal_refine(&mut tape, &store, "ref", fv, &cfg, None);
            for (got, want) in tape.value(z).data().iter().zip(f.data()) {
                let rel = (got - want).abs() / want.abs().max(1.0);
                assert!(rel < 1e-12);
            }
        }
    }

    #[test]
    fn silent_semantic_half_gate_state_is_hand_checkable() {
        let cfg = level_cfg();
        let mut store = level_store(13);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        // Structural path active, every semantic-temporal parameter zeroed,
        // blend logit zero.
        randomize(
            &mut store,
            &["lvl.conv1.k".into(), "lvl.conv2.k".into(), "lvl.conv1.b".into(), "lvl.conv2.b".into()],
            0.5,
            &mut rng,
        );
        for name in store.partition_names(Partition::SemanticTemporal) {
            let shape = store.value(&name).shape().to_vec();
            *store.value_mut(&name) = Tensor::zeros(shape);
        }
        let h_enc = Tensor::normal(vec![1, 2, 2, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.leaf(h_enc);
        let mv = tape.leaf(Tensor::normal(vec![1, 3], 1.0, &mut rng));
        let state = run_control_level_state(
            &mut tape,
            &store,
            "lvl",
            hv,
            Some(mv),
            &cfg,
            ControlMode::Full,
            None,
        );
        let h_ctrl = tape.value(state.h_ctrl).data().to_vec();
        assert!(tape.value(state.g.unwrap()).data().iter().all(|&g| g == 0.5));
        let f = tape.value(state.f.unwrap()).data().to_vec();
        for (fv, hv) in f.iter().zip(&h_ctrl) {
            assert!((fv - 0.5 * hv).abs() < 1e-12);
        }
        let z = tape.value(state.z).data();
        for (zv, fv) in z.iter().zip(&f) {
            assert!((zv - fv).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_means_the_frame_axis_and_injects_additively() {
        let mut tape = Tape::new();
        // Two frames: zeros and twos; the mean is ones.
        let mut z_t = Tensor::zeros(vec![1, 1, 2, 2, 2]);
        for i in 4..8 {
            z_t.data_mut()[i] = 2.0;
        }
        let z = tape.leaf(z_t);
        let skip = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 0.25));
        let out = aggregate_and_inject(&mut tape, z, skip);
        assert!(tape.value(out).data().iter().all(|&v| v == 1.25));

        // Zero control leaves the skip untouched.
        let z0 = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 2]));
        let skip2 = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 0.75));
        let out2 = aggregate_and_inject(&mut tape, z0, skip2);
        assert!(tape.value(out2).data().iter().all(|&v| v == 0.75));

        // A single frame aggregates to itself.
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let single = Tensor::normal(vec![1, 2, 1, 2, 2], 1.0, &mut rng);
        let sv = tape.leaf(single.clone());
        let agg = aggregate_time(&mut tape, sv);
        assert_eq!(tape.value(agg).data(), single.data());
    }

    #[test]
    fn structural_only_mode_skips_the_semantic_branch() {
        let cfg = level_cfg();
        let mut store = level_store(16);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        randomize(
            &mut store,
            &["lvl.conv1.k".into(), "lvl.conv2.k".into()],
            0.5,
            &mut rng,
        );
        let h_enc = Tensor::normal(vec![1, 2, 2, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.leaf(h_enc);
        let state = run_control_level_state(
            &mut tape,
            &store,
            "lvl",
            hv,
            None,
            &cfg,
            ControlMode::StructuralOnly,
            None,
        );
        assert!(state.s_proj.is_none() && state.g.is_none());
        assert_eq!(state.z, state.h_ctrl);
        // The aggregate is the plain frame mean of the structural features.
        let h_ctrl = tape.value(state.h_ctrl).data().to_vec();
        let agg = tape.value(state.z_agg).data();
        for c in 0..4 {
            for p in 0..9 {
                let want = (h_ctrl[c * 18 + p] + h_ctrl[c * 18 + 9 + p]) / 2.0;
                assert!((agg[c * 9 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameters_land_in_their_partitions() {
        let store = level_store(18);
        let structural = store.partition_names(Partition::Structural);
        assert_eq!(
            structural,
            vec![
                "lvl.conv1.b".to_string(),
                "lvl.conv1.k".to_string(),
                "lvl.conv2.b".to_string(),
                "lvl.conv2.k".to_string(),
            ]
        );
        let semantic = store.partition_names(Partition::SemanticTemporal);
        for needle in ["lvl.sem.proj1.w", "lvl.gate.w", "lvl.ref.alpha", "lvl.ref.attn.wq"] {
            assert!(semantic.iter().any(|n| n == needle), "{needle} missing from partition");
        }
        assert_eq!(
            store.len(),
            control_level_param_names("lvl", &level_cfg()).len(),
            "name listing must cover every registered parameter"
        );
    }
}
