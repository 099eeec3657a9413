//! Staged optimization of the forecasting model: an unconditional backbone
//! pretrain, structural control pretraining over frozen encoder features,
//! semantic fusion training, and a cosine-decay fine-tune. Each stage updates
//! exactly one parameter partition and leaves every other byte alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::control::ControlMode;
use crate::data::SitsSequence;
use crate::diffusion::{init_unet, make_noise_schedule, q_sample, unet_denoise, NoiseSchedule};
use crate::model::{
    ctrl_features, encode_history, history_controls, history_controls_cached, hwc_to_chw,
    init_conditioning, summarize_history, ModelConfig, CONTROL_PREFIXES, UNET_PREFIX,
};
use crate::optim::LrSchedule;
use crate::params::{ParamStore, Partition};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
/// Base learning rate for the control and fusion stages.
pub const DEFAULT_LR: f64 = 2e-5;
/// The backbone pretrain runs much hotter; it only has 1000 steps to turn a
/// random denoiser into something worth freezing.
pub const PRETRAIN_LR: f64 = 1e-3;
pub const DDPM_STEPS: usize = 100;
/// Weight scale before the per-layer 1/sqrt(fan-in) factor the init helpers
/// apply; around He gain so activations neither vanish nor blow up.
pub const INIT_STD: f64 = 1.5;
/// Step counts per stage at desk scale.
pub const DESK_STAGE_STEPS: [u64; 4] = [1000, 2000, 1000, 500];
pub const DESK_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: u64,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub ddpm_steps: usize,
}

impl StageConfig {
    /// Defaults at desk scale: steps 1000/2000/1000/500, batch 8, constant
    /// 2e-5 for stages 1 and 2, cosine decay for stage 3.
    pub fn desk(stage: u8) -> StageConfig {
        let lr = if stage == 0 { PRETRAIN_LR } else { DEFAULT_LR };
        StageConfig::new(stage, DESK_STAGE_STEPS[stage as usize], DESK_BATCH, lr)
    }

    /// Builds a stage config with explicit steps, batch, and base rate; the
    /// schedule kind still follows the stage.
    pub fn new(stage: u8, steps: u64, batch: usize, lr: f64) -> StageConfig {
        assert!(stage <= 3, "stages run 0 through 3, got {stage}");
        assert!(batch > 0, "batch size must be positive");
        let schedule = match stage {
            3 => LrSchedule::Cosine { total: steps.max(1), lr_init: lr, lr_min: 0.0 },
            _ => LrSchedule::Constant(lr),
        };
        StageConfig {
            stage,
            steps,
            batch,
            schedule,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            ddpm_steps: DDPM_STEPS,
        }
    }

    /// The partitions this stage is allowed to update.
    pub fn trainable(&self) -> Vec<Partition> {
        match self.stage {
            0 | 1 => vec![Partition::Structural],
            _ => vec![Partition::SemanticTemporal],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyDataset,
    #[error("stage {stage} needs the weights produced by stage {required}; run stage {required} first")]
    MissingPrerequisite { stage: u8, required: u8 },
    #[error("sequence {id} has {frames} frames but a training window needs {needed}")]
    ShortSequence { id: String, frames: usize, needed: usize },
    #[error("sequence {id} frames are {got:?} but the model expects {want:?}")]
    FrameShape { id: String, got: Vec<usize>, want: Vec<usize> },
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub stage: u8,
    pub steps: u64,
    pub loss: Vec<f64>,
    pub seed: u64,
}

/// Registers the parameters a stage trains when they are not present yet:
/// stage 0 creates the denoiser backbone, stage 1 the conditioning stack,
/// later stages add nothing. Kept separate from [`train_stage`] so that a
/// zero-step run leaves the store byte-identical.
pub fn init_stage(store: &mut ParamStore, cfg: &ModelConfig, stage: u8, seed: u64) {
    assert!(stage <= 3, "stages run 0 through 3, got {stage}");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match stage {
        0 => {
            if !store.contains(&format!("{UNET_PREFIX}.stem.k")) {
                init_unet(store, UNET_PREFIX, &cfg.unet, INIT_STD, &mut rng, Partition::Structural);
            }
        }
        1 => {
            if !store.contains(&format!("{}.conv1.k", CONTROL_PREFIXES[0])) {
                init_conditioning(store, cfg, INIT_STD, &mut rng);
            }
        }
        _ => {}
    }
}

fn partition_of(store: &ParamStore, name: &str) -> Option<Partition> {
    store.entry(name).map(|e| e.partition)
}

fn check_prerequisites(store: &ParamStore, stage: u8) -> Result<(), TrainError> {
    let backbone = format!("{UNET_PREFIX}.stem.k");
    let control = format!("{}.conv1.k", CONTROL_PREFIXES[0]);
    match stage {
        0 => {}
        1 => {
            if partition_of(store, &backbone) != Some(Partition::Frozen) {
                return Err(TrainError::MissingPrerequisite { stage, required: 0 });
            }
        }
        _ => {
            if partition_of(store, &backbone) != Some(Partition::Frozen) {
                return Err(TrainError::MissingPrerequisite { stage, required: 0 });
            }
            if !store.contains(&control) {
                return Err(TrainError::MissingPrerequisite { stage, required: 1 });
            }
        }
    }
    Ok(())
}

fn check_frames(data: &[SitsSequence], cfg: &ModelConfig) -> Result<(), TrainError> {
    let want = vec![cfg.frame_hw.0, cfg.frame_hw.1, cfg.unet.in_channels];
    for s in data {
        if s.frames[0].shape() != want {
            return Err(TrainError::FrameShape {
                id: s.id.clone(),
                got: s.frames[0].shape().to_vec(),
                want,
            });
        }
    }
    Ok(())
}

/// Builds the denoising objective for one batch on the given tape: the mean
/// squared error between the predicted and true noise, over every element.
/// Returns (loss, prediction).
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: Tensor,
    eps: Tensor,
    taus: &[usize],
    controls: Option<(VarId, VarId)>,
) -> (VarId, VarId) {
    let x = tape.leaf(x_t);
    let e = tape.leaf(eps);
    let eps_hat = unet_denoise(tape, store, UNET_PREFIX, x, taus, controls, &cfg.unet);
    let d = tape.sub(eps_hat, e);
    let sq = tape.mul(d, d);
    (tape.mean_all(sq), eps_hat)
}

/// Runs one training stage, updating exactly the stage's trainable partition
/// and recording the loss at every step. Stage 0 trains the backbone
/// unconditionally and freezes the whole store afterwards; stage 1 trains the
/// structural path against frozen encoder features; stages 2 and 3 train the
/// semantic and refinement parameters with the full control wiring.
pub fn train_stage(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    stage_cfg: &StageConfig,
    data: &[SitsSequence],
    seed: u64,
) -> Result<TrainReport, TrainError> {
    check_prerequisites(store, stage_cfg.stage)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_frames(data, cfg)?;
    let sched = make_noise_schedule(stage_cfg.ddpm_steps);
    store.set_trainable(&stage_cfg.trainable());
    store.reset_optimizer();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let loss = match stage_cfg.stage {
        0 => train_backbone(store, cfg, stage_cfg, &sched, data, &mut rng),
        _ => train_control(store, cfg, stage_cfg, &sched, data, &mut rng)?,
    };
    if stage_cfg.stage == 0 {
        store.freeze_all();
    }
    Ok(TrainReport { stage: stage_cfg.stage, steps: stage_cfg.steps, loss, seed })
}

/// Stacks [C, H, W] frames into one [B, C, H, W] tensor.
fn stack_frames(frames: &[Tensor]) -> Tensor {
    let shape = frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * frames[0].len());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    let mut out = vec![frames.len()];
    out.extend_from_slice(&shape);
    Tensor::new(out, data)
}

/// Stacks [1, C, T, H, W] clips into one [B, C, T, H, W] tensor.
fn stack_clips(clips: &[&Tensor]) -> Tensor {
    let shape = clips[0].shape().to_vec();
    assert_eq!(shape[0], 1, "expected singleton batch clips");
    let mut data = Vec::with_capacity(clips.len() * clips[0].len());
    for c in clips {
        data.extend_from_slice(c.data());
    }
    let mut out = shape;
    out[0] = clips.len();
    Tensor::new(out, data)
}

fn train_backbone(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    data: &[SitsSequence],
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    assert!(
        store.contains(&format!("{UNET_PREFIX}.stem.k")),
        "initialize the backbone before training stage 0"
    );
    let pool: Vec<Tensor> = data.iter().flat_map(|s| s.frames.iter().map(hwc_to_chw)).collect();
    let fshape = cfg.frame_shape();
    let mut losses = Vec::with_capacity(sc.steps as usize);
    for step in 0..sc.steps {
        let mut xs = Vec::with_capacity(sc.batch);
        let mut es = Vec::with_capacity(sc.batch);
        let mut taus = Vec::with_capacity(sc.batch);
        for _ in 0..sc.batch {
            let x0 = &pool[rng.gen_range(0..pool.len())];
            let t = rng.gen_range(0..sched.steps);
            let eps = Tensor::normal(fshape.clone(), 1.0, rng);
            xs.push(q_sample(x0, t, &eps, sched));
            es.push(eps);
            taus.push(t);
        }
        let mut tape = Tape::new();
        let (loss, _) =
            batch_loss(&mut tape, store, cfg, stack_frames(&xs), stack_frames(&es), &taus, None);
        tape.backward(loss);
        let value = tape.value(loss).item();
        tape.write_grads(store);
        store.adamw_step(sc.schedule.at(step), ADAM_BETA1, ADAM_BETA2, ADAM_EPS, sc.weight_decay);
        losses.push(value);
    }
    losses
}

struct Window {
    hist: Vec<Tensor>,
    days: Vec<f64>,
    target: Tensor,
    f0: Tensor,
    f1: Tensor,
}

/// Precomputes one training window per (sequence, offset): history frames in
/// [C, H, W], their timestamps, the target frame, and the frozen features the
/// stage starts from. Stage 1 keeps raw encoder clips; stages 2 and 3 keep
/// the structural-path outputs, whose weights no longer move.
fn build_windows(
    store: &ParamStore,
    cfg: &ModelConfig,
    data: &[SitsSequence],
    stage: u8,
) -> Result<Vec<Window>, TrainError> {
    let h = cfg.history_len;
    let mut windows = Vec::new();
    for s in data {
        if s.frames.len() < h + 1 {
            return Err(TrainError::ShortSequence {
                id: s.id.clone(),
                frames: s.frames.len(),
                needed: h + 1,
            });
        }
        for start in 0..=s.frames.len() - h - 1 {
            let hist: Vec<Tensor> = s.frames[start..start + h].iter().map(hwc_to_chw).collect();
            let days: Vec<f64> = s.timestamps[start..start + h].iter().map(|&d| d as f64).collect();
            let target = hwc_to_chw(&s.frames[start + h]);
            let feats = encode_history(store, cfg, &hist);
            let (f0, f1) = if stage >= 2 {
                ctrl_features(store, &feats)
            } else {
                (feats.h0, feats.h1)
            };
            windows.push(Window { hist, days, target, f0, f1 });
        }
    }
    Ok(windows)
}

fn train_control(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    data: &[SitsSequence],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, TrainError> {
    let windows = build_windows(store, cfg, data, sc.stage)?;
    let fshape = cfg.frame_shape();
    let mut losses = Vec::with_capacity(sc.steps as usize);
    for step in 0..sc.steps {
        let picked: Vec<&Window> =
            (0..sc.batch).map(|_| &windows[rng.gen_range(0..windows.len())]).collect();
        let mut xs = Vec::with_capacity(sc.batch);
        let mut es = Vec::with_capacity(sc.batch);
        let mut taus = Vec::with_capacity(sc.batch);
        for w in &picked {
            let t = rng.gen_range(0..sched.steps);
            let eps = Tensor::normal(fshape.clone(), 1.0, rng);
            xs.push(q_sample(&w.target, t, &eps, sched));
            es.push(eps);
            taus.push(t);
        }
        let f0: Vec<&Tensor> = picked.iter().map(|w| &w.f0).collect();
        let f1: Vec<&Tensor> = picked.iter().map(|w| &w.f1).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(stack_clips(&f0));
        let b = tape.leaf(stack_clips(&f1));
        let controls = if sc.stage == 1 {
            history_controls(&mut tape, store, cfg, a, b, None, ControlMode::StructuralOnly)
        } else {
            let ms: Vec<VarId> = picked
                .iter()
                .map(|w| {
                    let m = summarize_history(&mut tape, store, cfg, &w.hist, &w.days);
                    tape.reshape(m, vec![cfg.d_cond])
                })
                .collect();
            let m = tape.stack(&ms);
            history_controls_cached(&mut tape, store, cfg, a, b, Some(m), ControlMode::Full)
        };
        let (loss, _) = batch_loss(
            &mut tape,
            store,
            cfg,
            stack_frames(&xs),
            stack_frames(&es),
            &taus,
            Some(controls),
        );
        tape.backward(loss);
        let value = tape.value(loss).item();
        tape.write_grads(store);
        store.adamw_step(sc.schedule.at(step), ADAM_BETA1, ADAM_BETA2, ADAM_EPS, sc.weight_decay);
        losses.push(value);
    }
    Ok(losses)
}
