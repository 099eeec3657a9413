//! Time-interval conditioning: calendar featurization of day gaps, the
//! learned interval token, interleaving of visual and interval tokens,
//! change-description prompt assembly, the weighted loss combiner, and the
//! attention-pooled sequence summary vector.

use rand_chacha::ChaCha20Rng;

use crate::kernels::Activation;
use crate::params::{ParamStore, Partition};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Length of the interval feature vector.
pub const D_PHI: usize = 6;

pub const DAYS_PER_YEAR: f64 = 365.25;
pub const DAYS_PER_MONTH: f64 = 30.44;
const SATURATION_DAYS: f64 = 3650.0;

/// Features of a day gap: log scale, annual and monthly phases, and a linear
/// term saturating at ten years.
pub fn time_features(days: f64) -> Vec<f64> {
    assert!(days.is_finite() && days >= 0.0, "day gap must be finite and non-negative, got {days}");
    let tau = std::f64::consts::TAU;
    vec![
        days.ln_1p(),
        (tau * days / DAYS_PER_YEAR).sin(),
        (tau * days / DAYS_PER_YEAR).cos(),
        (tau * days / DAYS_PER_MONTH).sin(),
        (tau * days / DAYS_PER_MONTH).cos(),
        (days / SATURATION_DAYS).min(1.0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeEncoderConfig {
    pub d_tok: usize,
    pub hidden: usize,
}

/// Registers the interval-token parameters: the learned base token plus a
/// two-layer MLP over the day-gap features.
pub fn init_time_encoder(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TimeEncoderConfig,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    let part = Partition::SemanticTemporal;
    store.insert(&format!("{prefix}.base"), Tensor::normal(vec![cfg.d_tok], std, rng), part);
    store.insert(
        &format!("{prefix}.mlp1.w"),
        Tensor::normal(vec![D_PHI, cfg.hidden], std / (D_PHI as f64).sqrt(), rng),
        part,
    );
    store.insert(&format!("{prefix}.mlp1.b"), Tensor::zeros(vec![cfg.hidden]), part);
    store.insert(
        &format!("{prefix}.mlp2.w"),
        Tensor::normal(vec![cfg.hidden, cfg.d_tok], std / (cfg.hidden as f64).sqrt(), rng),
        part,
    );
    store.insert(&format!("{prefix}.mlp2.b"), Tensor::zeros(vec![cfg.d_tok]), part);
}

/// feats: [1, D_PHI] -> interval token [1, d_tok].
pub fn embed_interval(tape: &mut Tape, store: &ParamStore, prefix: &str, feats: VarId) -> VarId {
    let fs = tape.shape(feats).to_vec();
    assert_eq!(fs, [1, D_PHI], "interval features must be [1, {D_PHI}]");
    let w1 = tape.param(store, &format!("{prefix}.mlp1.w"));
    let b1 = tape.param(store, &format!("{prefix}.mlp1.b"));
    let w2 = tape.param(store, &format!("{prefix}.mlp2.w"));
    let b2 = tape.param(store, &format!("{prefix}.mlp2.b"));
    let hidden = tape.dense(feats, w1, b1, Activation::Relu);
    let mapped = tape.dense(hidden, w2, b2, Activation::None);
    let base = tape.param(store, &format!("{prefix}.base"));
    let d_tok = tape.shape(base)[0];
    let base_row = tape.reshape(base, vec![1, d_tok]);
    tape.add(base_row, mapped)
}

/// Day gap -> interval token [1, d_tok].
pub fn pte_embed(tape: &mut Tape, store: &ParamStore, prefix: &str, days: f64) -> VarId {
    let feats = tape.leaf(Tensor::new(vec![1, D_PHI], time_features(days)));
    embed_interval(tape, store, prefix, feats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Visual,
    Temporal,
}

/// Alternating token sequence: visual, interval, visual, ..., visual.
pub struct TokenSequence {
    /// [2n-1, d_tok] stack of all items in order.
    pub tokens: VarId,
    pub kinds: Vec<TokenKind>,
    /// The individual items in order, each [1, d_tok].
    pub items: Vec<VarId>,
    /// Just the interval tokens, in order.
    pub temporal: Vec<VarId>,
}

/// Builds the alternating sequence V_1, t_1, V_2, ..., V_n where each t_i is
/// the embedded gap between frames i and i+1.
pub fn interleave_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    visuals: &[VarId],
    deltas: &[f64],
) -> TokenSequence {
    assert!(!visuals.is_empty(), "need at least one visual token");
    assert_eq!(
        deltas.len() + 1,
        visuals.len(),
        "need exactly one day gap between consecutive frames: {} visuals, {} gaps",
        visuals.len(),
        deltas.len()
    );
    let d_tok = tape.shape(visuals[0])[1];
    let mut items = Vec::with_capacity(2 * visuals.len() - 1);
    let mut kinds = Vec::with_capacity(items.capacity());
    let mut temporal = Vec::with_capacity(deltas.len());
    for (i, &v) in visuals.iter().enumerate() {
        assert_eq!(tape.shape(v), &[1, d_tok], "visual tokens must be [1, d_tok]");
        if i > 0 {
            let t = pte_embed(tape, store, prefix, deltas[i - 1]);
            items.push(t);
            kinds.push(TokenKind::Temporal);
            temporal.push(t);
        }
        items.push(v);
        kinds.push(TokenKind::Visual);
    }
    let stacked = tape.stack(&items);
    let tokens = tape.reshape(stacked, vec![items.len(), d_tok]);
    TokenSequence { tokens, kinds, items, temporal }
}

/// Assembles the change-description instruction for an n-image series.
pub fn build_ctp_prompt(scene_description: &str, n_images: usize) -> String {
    assert!(n_images >= 2, "a change prompt needs at least 2 images, got {n_images}");
    assert!(!scene_description.is_empty(), "scene description must be non-empty");
    let images = if n_images > 2 {
        vec!["<image>"; n_images].join("...")
    } else {
        "<image>".repeat(n_images)
    };
    format!(
        "{images} Scene: {scene_description}. Describe specific changes between these \
         time-series remote sensing images in a single paragraph. Focus on concrete \
         changes to structures, landscape, or development with precise location details. "
    )
}

/// l = lambda_text * l_text + lambda_temp * l_temp over scalar tape values.
pub fn combine_losses(
    tape: &mut Tape,
    l_text: VarId,
    l_temp: VarId,
    lambda_text: f64,
    lambda_temp: f64,
) -> VarId {
    assert!(
        lambda_text >= 0.0 && lambda_temp >= 0.0,
        "loss weights must be non-negative, got {lambda_text} and {lambda_temp}"
    );
    assert_eq!(tape.shape(l_text), &[1]);
    assert_eq!(tape.shape(l_temp), &[1]);
    let a = tape.scale(l_text, lambda_text);
    let b = tape.scale(l_temp, lambda_temp);
    tape.add(a, b)
}

/// Smoothness penalty: mean squared difference between consecutive interval
/// tokens, averaged over pairs. Zero when fewer than two tokens exist.
pub fn temporal_smoothness(tape: &mut Tape, tokens: &[VarId]) -> VarId {
    if tokens.len() < 2 {
        return tape.leaf(Tensor::zeros(vec![1]));
    }
    let mut acc: Option<VarId> = None;
    for pair in tokens.windows(2) {
        let d = tape.sub(pair[1], pair[0]);
        let sq = tape.mul(d, d);
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    let total = acc.unwrap();
    tape.scale(total, 1.0 / (tokens.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummarizerConfig {
    pub d_tok: usize,
    pub d_cond: usize,
}

/// Registers the sequence-summary parameters: a learned pooling query and one
/// dense projection to the conditioning dimension.
pub fn init_summarizer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &SummarizerConfig,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    let part = Partition::SemanticTemporal;
    store.insert(&format!("{prefix}.query"), Tensor::normal(vec![cfg.d_tok], std, rng), part);
    store.insert(
        &format!("{prefix}.proj.w"),
        Tensor::normal(vec![cfg.d_tok, cfg.d_cond], std / (cfg.d_tok as f64).sqrt(), rng),
        part,
    );
    store.insert(&format!("{prefix}.proj.b"), Tensor::zeros(vec![cfg.d_cond]), part);
}

/// Attention-pooled mean of the sequence items projected to the conditioning
/// dimension; returns [d_cond].
pub fn summarize_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    seq: &TokenSequence,
) -> VarId {
    let n = seq.kinds.len();
    assert!(n > 0, "cannot summarize an empty sequence");
    let d_tok = tape.shape(seq.tokens)[1];
    let t3 = tape.reshape(seq.tokens, vec![1, n, d_tok]);
    let query = tape.param(store, &format!("{prefix}.query"));
    let q3 = tape.reshape(query, vec![1, 1, d_tok]);
    let scores = tape.matmul_b(t3, q3, true);
    let scores_row = tape.reshape(scores, vec![1, 1, n]);
    let scaled = tape.scale(scores_row, 1.0 / (d_tok as f64).sqrt());
    let weights = tape.softmax(scaled);
    let pooled3 = tape.matmul_b(weights, t3, false);
    let pooled = tape.reshape(pooled3, vec![1, d_tok]);
    let w = tape.param(store, &format!("{prefix}.proj.w"));
    let b = tape.param(store, &format!("{prefix}.proj.b"));
    let out = tape.dense(pooled, w, b, Activation::None);
    let d_cond = tape.shape(out)[1];
    tape.reshape(out, vec![d_cond])
}

/// Attention-pooled mean of the items without the output projection; returns
/// [1, d_tok]. Exposed so the pooling invariant is testable on its own.
pub fn pool_sequence(tape: &mut Tape, store: &ParamStore, prefix: &str, seq: &TokenSequence) -> VarId {
    let n = seq.kinds.len();
    assert!(n > 0, "cannot summarize an empty sequence");
    let d_tok = tape.shape(seq.tokens)[1];
    let t3 = tape.reshape(seq.tokens, vec![1, n, d_tok]);
    let query = tape.param(store, &format!("{prefix}.query"));
    let q3 = tape.reshape(query, vec![1, 1, d_tok]);
    let scores = tape.matmul_b(t3, q3, true);
    let scores_row = tape.reshape(scores, vec![1, 1, n]);
    let scaled = tape.scale(scores_row, 1.0 / (d_tok as f64).sqrt());
    let weights = tape.softmax(scaled);
    let pooled3 = tape.matmul_b(weights, t3, false);
    tape.reshape(pooled3, vec![1, d_tok])
}

/// Registers the frozen frame embedder: one seeded random linear map from
/// flattened pixels to token space, standing in for a vision tower. Never
/// trained.
pub fn init_frame_encoder(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    d_tok: usize,
    std: f64,
    rng: &mut ChaCha20Rng,
) {
    store.insert(
        &format!("{prefix}.w"),
        Tensor::normal(vec![in_dim, d_tok], std / (in_dim as f64).sqrt(), rng),
        Partition::Frozen,
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![d_tok]), Partition::Frozen);
}

/// frame: [C, H, W] -> visual token [1, d_tok].
pub fn frame_token(tape: &mut Tape, store: &ParamStore, prefix: &str, frame: VarId) -> VarId {
    let fs = tape.shape(frame).to_vec();
    assert_eq!(fs.len(), 3, "frame must be [C, H, W]");
    let flat = tape.reshape(frame, vec![1, fs.iter().product()]);
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    tape.dense(flat, w, b, Activation::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn encoder_store(cfg: &TimeEncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        init_time_encoder(&mut store, "pte", cfg, 0.8, &mut rng);
        store
    }

    #[test]
    fn zero_gap_features() {
        assert_eq!(time_features(0.0), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_year_gap_closes_annual_phase() {
        let f = time_features(DAYS_PER_YEAR);
        assert!(f[1].abs() < 1e-9);
        assert!((f[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hundred_day_features_match_scalar_math() {
        let f = time_features(100.0);
        let tau = std::f64::consts::TAU;
        assert!((f[0] - 101f64.ln()).abs() < 1e-12);
        assert!((f[1] - (tau * 100.0 / 365.25).sin()).abs() < 1e-12);
        assert!((f[2] - (tau * 100.0 / 365.25).cos()).abs() < 1e-12);
        assert!((f[3] - (tau * 100.0 / 30.44).sin()).abs() < 1e-12);
        assert!((f[4] - (tau * 100.0 / 30.44).cos()).abs() < 1e-12);
        assert!((f[5] - 100.0 / 3650.0).abs() < 1e-12);
        assert!((time_features(5000.0)[5] - 1.0).abs() == 0.0);
    }

    #[test]
    #[should_panic(expected = "non-negative")]
    fn negative_gap_is_rejected() {
        time_features(-1.0);
    }

    #[test]
    fn zero_mlp_returns_base_token_for_any_gap() {
        let cfg = TimeEncoderConfig { d_tok: 5, hidden: 4 };
        let mut store = encoder_store(&cfg, 1);
        for name in ["pte.mlp1.w", "pte.mlp1.b", "pte.mlp2.w", "pte.mlp2.b"] {
            let shape = store.value(name).shape().to_vec();
            *store.value_mut(name) = Tensor::zeros(shape);
        }
        let base = store.value("pte.base").data().to_vec();
        let mut tape = Tape::new();
        for days in [0.0, 30.0, 365.25, 2000.0] {
            let t = pte_embed(&mut tape, &store, "pte", days);
            assert_eq!(tape.value(t).data(), &base[..]);
        }
    }

    #[test]
    fn identity_mlp_at_zero_gap_returns_raw_features() {
        let cfg = TimeEncoderConfig { d_tok: D_PHI, hidden: D_PHI };
        let mut store = encoder_store(&cfg, 2);
        *store.value_mut("pte.base") = Tensor::zeros(vec![D_PHI]);
        let mut eye = Tensor::zeros(vec![D_PHI, D_PHI]);
        for i in 0..D_PHI {
            eye.data_mut()[i * D_PHI + i] = 1.0;
        }
        *store.value_mut("pte.mlp1.w") = eye.clone();
        *store.value_mut("pte.mlp2.w") = eye;
        *store.value_mut("pte.mlp1.b") = Tensor::zeros(vec![D_PHI]);
        *store.value_mut("pte.mlp2.b") = Tensor::zeros(vec![D_PHI]);
        let mut tape = Tape::new();
        let t = pte_embed(&mut tape, &store, "pte", 0.0);
        assert_eq!(tape.value(t).data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_gaps_embed_identically() {
        let cfg = TimeEncoderConfig { d_tok: 4, hidden: 3 };
        let store = encoder_store(&cfg, 3);
        let mut tape = Tape::new();
        let a = pte_embed(&mut tape, &store, "pte", 123.0);
        let b = pte_embed(&mut tape, &store, "pte", 123.0);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(a)), bits(tape.value(b)));
    }

    #[test]
    fn distinct_gaps_embed_distinctly_on_grid() {
        let cfg = TimeEncoderConfig { d_tok: 8, hidden: 8 };
        let store = encoder_store(&cfg, 4);
        let mut tape = Tape::new();
        let outputs: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let days = i as f64 * 36.5;
                let t = pte_embed(&mut tape, &store, "pte", days);
                tape.value(t).data().to_vec()
            })
            .collect();
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                let dist = outputs[i]
                    .iter()
                    .zip(&outputs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 1e-9, "gaps {i} and {j} collide");
            }
        }
    }

    fn token_leaves(tape: &mut Tape, n: usize, d: usize, rng: &mut ChaCha20Rng) -> Vec<VarId> {
        (0..n).map(|_| tape.leaf(Tensor::normal(vec![1, d], 1.0, rng))).collect()
    }

    #[test]
    fn single_visual_interleaves_to_itself() {
        let cfg = TimeEncoderConfig { d_tok: 4, hidden: 3 };
        let store = encoder_store(&cfg, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let vs = token_leaves(&mut tape, 1, 4, &mut rng);
        let seq = interleave_tokens(&mut tape, &store, "pte", &vs, &[]);
        assert_eq!(seq.kinds, vec![TokenKind::Visual]);
        assert_eq!(tape.value(seq.tokens).data(), tape.value(vs[0]).data());
    }

    #[test]
    fn alternation_holds_for_all_lengths() {
        let cfg = TimeEncoderConfig { d_tok: 3, hidden: 3 };
        let store = encoder_store(&cfg, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for n in 1..=10usize {
            let mut tape = Tape::new();
            let vs = token_leaves(&mut tape, n, 3, &mut rng);
            let deltas: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(1.0..2000.0)).collect();
            let seq = interleave_tokens(&mut tape, &store, "pte", &vs, &deltas);
            assert_eq!(seq.kinds.len(), 2 * n - 1);
            for (i, kind) in seq.kinds.iter().enumerate() {
                let want = if i % 2 == 0 { TokenKind::Visual } else { TokenKind::Temporal };
                assert_eq!(*kind, want, "position {i} of length {n}");
            }
            assert_eq!(seq.temporal.len(), n - 1);
            assert_eq!(tape.shape(seq.tokens), &[2 * n - 1, 3]);
        }
    }

    #[test]
    fn interleaved_interval_tokens_match_independent_embedding() {
        let cfg = TimeEncoderConfig { d_tok: 4, hidden: 5 };
        let store = encoder_store(&cfg, 9);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let vs = token_leaves(&mut tape, 3, 4, &mut rng);
        let seq = interleave_tokens(&mut tape, &store, "pte", &vs, &[365.0, 730.0]);

        // Scalar recomputation straight from the stored parameters.
        let expect = |days: f64| -> Vec<f64> {
            let f = time_features(days);
            let w1 = store.value("pte.mlp1.w").data();
            let b1 = store.value("pte.mlp1.b").data();
            let w2 = store.value("pte.mlp2.w").data();
            let b2 = store.value("pte.mlp2.b").data();
            let base = store.value("pte.base").data();
            let hidden: Vec<f64> = (0..5)
                .map(|j| {
                    (b1[j] + (0..D_PHI).map(|i| f[i] * w1[i * 5 + j]).sum::<f64>()).max(0.0)
                })
                .collect();
            (0..4)
                .map(|j| base[j] + b2[j] + (0..5).map(|i| hidden[i] * w2[i * 4 + j]).sum::<f64>())
                .collect()
        };
        for (k, days) in [(0usize, 365.0), (1, 730.0)] {
            let got = tape.value(seq.temporal[k]).data();
            for (g, w) in got.iter().zip(expect(days)) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        // Order inside the stacked tensor: positions 1 and 3.
        let stacked = tape.value(seq.tokens).data().to_vec();
        assert_eq!(&stacked[4..8], tape.value(seq.temporal[0]).data());
        assert_eq!(&stacked[12..16], tape.value(seq.temporal[1]).data());
    }

    #[test]
    #[should_panic(expected = "one day gap")]
    fn interleave_rejects_arity_mismatch() {
        let cfg = TimeEncoderConfig { d_tok: 3, hidden: 3 };
        let store = encoder_store(&cfg, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let vs = token_leaves(&mut tape, 2, 3, &mut rng);
        interleave_tokens(&mut tape, &store, "pte", &vs, &[1.0, 2.0]);
    }

    #[test]
    fn prompt_matches_golden_files() {
        assert_eq!(
            build_ctp_prompt("airport", 3),
            include_str!("../fixtures/prompts/ctp_airport_3.txt")
        );
        assert_eq!(build_ctp_prompt("x", 2), include_str!("../fixtures/prompts/ctp_x_2.txt"));
        assert_eq!(
            build_ctp_prompt("harbor", 5),
            include_str!("../fixtures/prompts/ctp_harbor_5.txt")
        );
    }

    #[test]
    fn prompt_separator_only_appears_past_two_images() {
        assert!(build_ctp_prompt("a", 2).starts_with("<image><image> Scene: a."));
        assert!(build_ctp_prompt("a", 3).starts_with("<image>...<image>...<image> Scene: a."));
    }

    #[test]
    #[should_panic(expected = "at least 2")]
    fn prompt_rejects_single_image() {
        build_ctp_prompt("airport", 1);
    }

    #[test]
    #[should_panic(expected = "non-empty")]
    fn prompt_rejects_empty_scene() {
        build_ctp_prompt("", 3);
    }

    #[test]
    fn loss_combiner_values_and_gradients() {
        let mut tape = Tape::new();
        let lt = tape.leaf_grad(Tensor::scalar(5.0));
        let lp = tape.leaf_grad(Tensor::scalar(9.0));
        let l = combine_losses(&mut tape, lt, lp, 1.0, 0.0);
        assert_eq!(tape.value(l).item(), 5.0);

        let mut tape = Tape::new();
        let lt = tape.leaf_grad(Tensor::scalar(2.0));
        let lp = tape.leaf_grad(Tensor::scalar(4.0));
        let l = combine_losses(&mut tape, lt, lp, 0.5, 0.5);
        assert_eq!(tape.value(l).item(), 3.0);
        tape.backward(l);
        assert_eq!(tape.grad(lt).unwrap().data(), &[0.5]);
        assert_eq!(tape.grad(lp).unwrap().data(), &[0.5]);

        let mut tape = Tape::new();
        let lt = tape.leaf_grad(Tensor::scalar(0.0));
        let lp = tape.leaf_grad(Tensor::scalar(0.0));
        let l = combine_losses(&mut tape, lt, lp, 3.0, 7.0);
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l);
        assert_eq!(tape.grad(lt).unwrap().data(), &[3.0]);
        assert_eq!(tape.grad(lp).unwrap().data(), &[7.0]);
    }

    #[test]
    #[should_panic(expected = "non-negative")]
    fn loss_combiner_rejects_negative_weight() {
        let mut tape = Tape::new();
        let lt = tape.leaf(Tensor::scalar(1.0));
        let lp = tape.leaf(Tensor::scalar(1.0));
        combine_losses(&mut tape, lt, lp, -0.1, 0.5);
    }

    #[test]
    fn smoothness_of_two_tokens_is_mean_squared_step() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 2.0]));
        let l = temporal_smoothness(&mut tape, &[a, b]);
        assert_eq!(tape.value(l).item(), 4.0);
        let l0 = temporal_smoothness(&mut tape, &[a]);
        assert_eq!(tape.value(l0).item(), 0.0);
        // Three tokens average the two pair penalties.
        let c = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 3.0]));
        let l3 = temporal_smoothness(&mut tape, &[a, b, c]);
        assert_eq!(tape.value(l3).item(), (4.0 + 1.0) / 2.0);
    }

    fn summ_setup(d_tok: usize, d_cond: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cfg = SummarizerConfig { d_tok, d_cond };
        init_summarizer(&mut store, "summ", &cfg, 0.8, &mut rng);
        store
    }

    fn identical_item_sequence(tape: &mut Tape, item: &Tensor, n: usize) -> TokenSequence {
        let items: Vec<VarId> = (0..n).map(|_| tape.leaf(item.clone())).collect();
        let stacked = tape.stack(&items);
        let d = item.len();
        let tokens = tape.reshape(stacked, vec![n, d]);
        TokenSequence {
            tokens,
            kinds: (0..n)
                .map(|i| if i % 2 == 0 { TokenKind::Visual } else { TokenKind::Temporal })
                .collect(),
            items: items.clone(),
            temporal: items.iter().skip(1).step_by(2).copied().collect(),
        }
    }

    #[test]
    fn pooling_identical_items_returns_the_item() {
        let store = summ_setup(4, 3, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let item = Tensor::normal(vec![1, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let seq = identical_item_sequence(&mut tape, &item, 5);
        let pooled = pool_sequence(&mut tape, &store, "summ", &seq);
        for (g, w) in tape.value(pooled).data().iter().zip(item.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_shape_and_determinism() {
        let store = summ_setup(4, 6, 15);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let item1 = Tensor::normal(vec![1, 4], 1.0, &mut rng);
        let item2 = Tensor::normal(vec![1, 4], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(item1.clone());
            let b = tape.leaf(item2.clone());
            let stacked = tape.stack(&[a, b, a]);
            let tokens = tape.reshape(stacked, vec![3, 4]);
            let seq = TokenSequence {
                tokens,
                kinds: vec![TokenKind::Visual, TokenKind::Temporal, TokenKind::Visual],
                items: vec![a, b, a],
                temporal: vec![b],
            };
            let m = summarize_sequence(&mut tape, &store, "summ", &seq);
            assert_eq!(tape.shape(m), &[6]);
            tape.value(m).data().to_vec()
        };
        let x = run();
        let y = run();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn summarizer_gradients_pass_finite_difference() {
        use crate::gradcheck::{finite_diff_check, DEFAULT_STEP};
        let store = {
            let mut s = summ_setup(3, 2, 17);
            s.set_trainable(&[Partition::SemanticTemporal]);
            s
        };
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let items: Vec<Tensor> = (0..3).map(|_| Tensor::normal(vec![1, 3], 1.0, &mut rng)).collect();
        let mut check_rng = ChaCha20Rng::seed_from_u64(19);
        let report = finite_diff_check(
            &store,
            &["summ.query", "summ.proj.w", "summ.proj.b"],
            |s, tape| {
                let leaves: Vec<VarId> = items.iter().map(|t| tape.leaf(t.clone())).collect();
                let stacked = tape.stack(&leaves);
                let tokens = tape.reshape(stacked, vec![3, 3]);
                let seq = TokenSequence {
                    tokens,
                    kinds: vec![TokenKind::Visual, TokenKind::Temporal, TokenKind::Visual],
                    items: leaves.clone(),
                    temporal: vec![leaves[1]],
                };
                let m = summarize_sequence(tape, s, "summ", &seq);
                let sq = tape.mul(m, m);
                tape.mean_all(sq)
            },
            DEFAULT_STEP,
            8,
            &mut check_rng,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn frame_encoder_is_frozen_linear_map() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        init_frame_encoder(&mut store, "tok", 12, 5, 0.8, &mut rng);
        assert_eq!(
            store.partition_names(Partition::Frozen),
            vec!["tok.b".to_string(), "tok.w".to_string()]
        );
        let frame = Tensor::normal(vec![3, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let fv = tape.leaf(frame.clone());
        let tok = frame_token(&mut tape, &store, "tok", fv);
        assert_eq!(tape.shape(tok), &[1, 5]);
        let w = store.value("tok.w").data();
        for j in 0..5 {
            let want: f64 = (0..12).map(|i| frame.data()[i] * w[i * 5 + j]).sum();
            assert!((tape.value(tok).data()[j] - want).abs() < 1e-12);
        }
    }
}
