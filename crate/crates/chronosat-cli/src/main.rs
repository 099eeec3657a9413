//! Command-line surface over the chronosat library: synthesize datasets, run
//! the training stages, forecast, evaluate, and verify gradients.
//!
//! Exit codes are a stable contract: 0 on success, 1 on runtime or
//! validation failures, 2 on usage errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chronosat::codec::{read_pbm, read_ppm, write_ppm};
use chronosat::config::RunConfig;
use chronosat::control::ControlMode;
use chronosat::data::{
    generate_synthetic, load_dataset, write_sequence, DataError, Scenario, ScenarioKind,
};
use chronosat::diffusion::make_noise_schedule;
use chronosat::gradcheck::{run_suite, Suite, REL_ERR_LIMIT};
use chronosat::metrics::{
    acs, detect_changes, majority3, psnr, sps, ssim, tcs, ChangeMask, DetectorConfig,
    DetectorMethod, EmptyMaskPolicy, TcsConfig, SSIM_WINDOW,
};
use chronosat::model::{hwc_to_chw, sample_forecast, ModelConfig};
use chronosat::params::{ParamStore, Partition};
use chronosat::report::{
    build_eval_report, write_eval_report, write_train_report, EvalEntry, EvalSettings,
    TOOL_VERSION,
};
use chronosat::tensor::Tensor;
use chronosat::train::{init_stage, train_stage};

const CONTRASTIVE_NOTE: &str = "The contrastive_weight config key is accepted for parity with \
the published training recipe but has no effect: the loss it would scale depends on a \
captioning pipeline outside this project's scope.";

#[derive(Parser)]
#[command(
    name = "chronosat",
    version,
    about = "Satellite image time-series forecasting: synthesize, train, forecast, evaluate",
    after_help = CONTRASTIVE_NOTE
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic sequences as PPM frames plus JSON manifests
    Synth(SynthArgs),
    /// Run one training stage and write the resulting checkpoint
    Train(TrainArgs),
    /// Generate one forecast image per sequence
    Forecast(ForecastArgs),
    /// Score forecasts or precomputed masks and write a report
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// growing_square | moving_block | seasonal_field | static
    #[arg(long)]
    scenario: String,
    /// Number of sequences
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Frames per sequence
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Frame width and height in pixels
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value settings file; every key has a desk-scale default
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline KEY=VALUE override; repeatable, wins over the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    stage: u8,
    /// Dataset directory of sequence manifests
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Starting checkpoint; omit to start stage 0 from scratch
    #[arg(long = "checkpoint-in")]
    checkpoint_in: Option<PathBuf>,
    /// Where the trained checkpoint goes
    #[arg(long = "checkpoint-out")]
    checkpoint_out: PathBuf,
    /// Training-report JSON path; defaults next to the output checkpoint
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ForecastArgs {
    /// Dataset directory of sequence manifests
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint with every parameter group present
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// full | structural_only (silences the semantic conditioning path)
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; one {id}.ppm per sequence
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory (image mode)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of {id}.ppm forecasts (image mode)
    #[arg(long)]
    forecasts: Option<PathBuf>,
    /// Directory of historical-change PBM masks (mask mode)
    #[arg(long = "masks-hist")]
    masks_hist: Option<PathBuf>,
    /// Directory of predicted-change PBM masks (mask mode)
    #[arg(long = "masks-pred")]
    masks_pred: Option<PathBuf>,
    /// otsu | fixed:<tau>
    #[arg(long, default_value = "otsu")]
    detector: String,
    /// Clean masks with a 3x3 majority vote before scoring
    #[arg(long, default_value_t = false)]
    majority: bool,
    /// neutral scores empty pairs by the formulas; skip drops them from the means
    #[arg(long = "empty-masks", default_value = "neutral")]
    empty_masks: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for scoring
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Report JSON path
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// numeric_core | tam | sfci | diffusion | all
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per component
    #[arg(long, default_value_t = 20)]
    configs: usize,
    /// Skews every backward gradient so the checker must report a failure
    #[arg(long = "corrupt-backward", hide = true, default_value_t = false)]
    corrupt_backward: bool,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Forecast(a) => cmd_forecast(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| runtime(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_str(&text).map_err(|e| usage(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    Ok(())
}

/// The same per-index seed splitting the data generator uses, so forecasts
/// stay deterministic under the stable manifest ordering.
fn per_sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

// ── synth ────────────────────────────────────────────────────────────────────

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let kind = ScenarioKind::parse(&a.scenario).ok_or_else(|| {
        usage(format!(
            "unknown scenario {:?}; expected growing_square, moving_block, seasonal_field, or static",
            a.scenario
        ))
    })?;
    let scenario = Scenario::default_for(kind);
    let sequences = generate_synthetic(&scenario, a.n, a.frames, a.size, a.seed).map_err(|e| {
        match e {
            DataError::Config(m) => usage(m),
            other => runtime(other.to_string()),
        }
    })?;
    for seq in &sequences {
        write_sequence(&a.out, seq).map_err(|e| runtime(e.to_string()))?;
    }
    println!(
        "wrote {} sequences of {} {}x{} frames to {}",
        sequences.len(),
        a.frames,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────────

/// A checkpoint trained under one geometry silently corrupts a run configured
/// with another, so compare shapes of every shared parameter up front.
fn check_checkpoint_shapes(store: &ParamStore, model: &ModelConfig) -> Result<(), CliError> {
    let mut fresh = ParamStore::new();
    init_stage(&mut fresh, model, 0, 0);
    init_stage(&mut fresh, model, 1, 0);
    for name in fresh.names() {
        if store.contains(name) && store.value(name).shape() != fresh.value(name).shape() {
            return Err(runtime(format!(
                "checkpoint parameter {name} has shape {:?} but the config implies {:?}; \
                 pass the config the checkpoint was trained with",
                store.value(name).shape(),
                fresh.value(name).shape()
            )));
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = a.config.load()?;
    let model = cfg.model();
    let mut store = match &a.checkpoint_in {
        Some(p) => ParamStore::load(p)
            .map_err(|e| runtime(format!("cannot load checkpoint {}: {e}", p.display())))?,
        None => ParamStore::new(),
    };
    check_checkpoint_shapes(&store, &model)?;
    let data = load_dataset(&a.data).map_err(|e| runtime(e.to_string()))?;
    init_stage(&mut store, &model, a.stage, a.seed);
    let stage_cfg = cfg.stage(a.stage);
    let report = train_stage(&mut store, &model, &stage_cfg, &data, a.seed)
        .map_err(|e| runtime(e.to_string()))?;
    ensure_parent(&a.checkpoint_out)?;
    store
        .save(&a.checkpoint_out)
        .map_err(|e| runtime(format!("cannot write checkpoint: {e}")))?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.checkpoint_out.with_extension("report.json"));
    ensure_parent(&report_path)?;
    write_train_report(&report, &cfg.hash(), &report_path)
        .map_err(|e| runtime(format!("cannot write report: {e}")))?;
    match report.loss.last() {
        Some(last) => println!(
            "stage {} done: {} steps, last loss {last:.6}, checkpoint {}",
            a.stage,
            report.steps,
            a.checkpoint_out.display()
        ),
        None => println!(
            "stage {} done: 0 steps, checkpoint {}",
            a.stage,
            a.checkpoint_out.display()
        ),
    }
    Ok(())
}

// ── forecast ─────────────────────────────────────────────────────────────────

fn check_partitions_present(store: &ParamStore) -> Result<(), CliError> {
    for (p, hint) in [
        (Partition::Frozen, "stage 0"),
        (Partition::Structural, "stage 1"),
        (Partition::SemanticTemporal, "stage 1"),
    ] {
        if store.partition_names(p).is_empty() {
            return Err(runtime(format!(
                "checkpoint has no {p:?} parameters; run {hint} first"
            )));
        }
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<ControlMode, CliError> {
    match s {
        "full" => Ok(ControlMode::Full),
        "structural_only" => Ok(ControlMode::StructuralOnly),
        _ => Err(usage(format!("unknown mode {s:?}; use full or structural_only"))),
    }
}

fn cmd_forecast(a: &ForecastArgs) -> CliResult {
    let cfg = a.config.load()?;
    let mode = parse_mode(&a.mode)?;
    let model = cfg.model();
    let store = ParamStore::load(&a.checkpoint)
        .map_err(|e| runtime(format!("cannot load checkpoint {}: {e}", a.checkpoint.display())))?;
    check_partitions_present(&store)?;
    check_checkpoint_shapes(&store, &model)?;
    let data = load_dataset(&a.data).map_err(|e| runtime(e.to_string()))?;
    let sched = make_noise_schedule(cfg.ddpm_steps);
    fs::create_dir_all(&a.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", a.out.display())))?;
    let h = model.history_len;
    for (k, seq) in data.iter().enumerate() {
        let n = seq.frames.len();
        if n < h + 1 {
            return Err(runtime(format!(
                "sequence {} has {n} frames; forecasting conditions on {h} and targets the one after",
                seq.id
            )));
        }
        let want = vec![model.frame_hw.0, model.frame_hw.1, model.unet.in_channels];
        if seq.frames[0].shape() != want {
            return Err(runtime(format!(
                "sequence {} frames are {:?} but the config implies {want:?}",
                seq.id,
                seq.frames[0].shape()
            )));
        }
        let hist: Vec<Tensor> = seq.frames[n - 1 - h..n - 1].iter().map(hwc_to_chw).collect();
        let days: Vec<f64> = seq.timestamps[n - 1 - h..n - 1].iter().map(|&d| d as f64).collect();
        let img = sample_forecast(
            &store,
            &model,
            &sched,
            &hist,
            &days,
            mode,
            per_sequence_seed(a.seed, k),
        );
        let path = a.out.join(format!("{}.ppm", seq.id));
        write_ppm(&path, &img).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("wrote {} forecasts to {}", data.len(), a.out.display());
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────────────

fn parse_detector(s: &str) -> Result<DetectorConfig, CliError> {
    if s == "otsu" {
        return Ok(DetectorConfig::default());
    }
    if let Some(t) = s.strip_prefix("fixed:") {
        let tau: f64 = t
            .parse()
            .map_err(|_| usage(format!("fixed detector needs a number, got {t:?}")))?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(usage(format!("fixed threshold must lie in (0, 1), got {tau}")));
        }
        return Ok(DetectorConfig::fixed(tau));
    }
    Err(usage(format!("unknown detector {s:?}; use otsu or fixed:<tau>")))
}

fn parse_empty_policy(s: &str) -> Result<EmptyMaskPolicy, CliError> {
    match s {
        "neutral" => Ok(EmptyMaskPolicy::Neutral),
        "skip" => Ok(EmptyMaskPolicy::Skip),
        _ => Err(usage(format!("unknown empty-mask policy {s:?}; use neutral or skip"))),
    }
}

/// Runs `f` over the items on up to `threads` workers, preserving order.
fn ordered_parallel<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>, String>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R, String> + Sync,
{
    let workers = threads.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut slots: Vec<Result<Vec<R>, String>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(items.len());
            let f = &f;
            handles.push(scope.spawn(move || {
                items[lo..hi]
                    .iter()
                    .enumerate()
                    .map(|(i, t)| f(lo + i, t))
                    .collect::<Result<Vec<R>, String>>()
            }));
        }
        for h in handles {
            slots.push(h.join().expect("worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for s in slots {
        out.extend(s?);
    }
    Ok(out)
}

fn file_stems(dir: &Path, ext: &str) -> Result<Vec<String>, CliError> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    Ok(stems)
}

fn set_mismatch(kind: &str, want: &BTreeSet<String>, got: &BTreeSet<String>) -> CliError {
    let missing: Vec<&String> = want.difference(got).take(4).collect();
    let extra: Vec<&String> = got.difference(want).take(4).collect();
    runtime(format!(
        "{kind} do not align 1:1 with the dataset (missing {missing:?}, unexpected {extra:?})"
    ))
}

fn score_masks(m_hist: &ChangeMask, m_pred: &ChangeMask, tc: &TcsConfig, id: &str) -> EvalEntry {
    EvalEntry {
        id: id.to_string(),
        tcs: tcs(m_hist, m_pred, tc),
        sps: sps(m_hist, m_pred, tc),
        acs: acs(m_hist, m_pred, tc),
        psnr: None,
        ssim: None,
        empty_pair: m_hist.area() == 0 || m_pred.area() == 0,
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let cfg = a.config.load()?;
    let det = {
        let mut d = parse_detector(&a.detector)?;
        d.majority_filter = a.majority;
        d
    };
    let policy = parse_empty_policy(&a.empty_masks)?;
    let tc = TcsConfig { empty_policy: policy, ..TcsConfig::default() };

    let mask_mode = a.masks_hist.is_some() || a.masks_pred.is_some();
    let entries = if mask_mode {
        if a.forecasts.is_some() || a.data.is_some() {
            return Err(usage("mask mode takes --masks-hist/--masks-pred without --data/--forecasts"));
        }
        let (hist_dir, pred_dir) = match (&a.masks_hist, &a.masks_pred) {
            (Some(h), Some(p)) => (h, p),
            _ => return Err(usage("mask mode needs both --masks-hist and --masks-pred")),
        };
        let hist_ids: BTreeSet<String> = file_stems(hist_dir, "pbm")?.into_iter().collect();
        let pred_ids: BTreeSet<String> = file_stems(pred_dir, "pbm")?.into_iter().collect();
        if hist_ids != pred_ids {
            return Err(set_mismatch("mask files", &hist_ids, &pred_ids));
        }
        let ids: Vec<String> = hist_ids.into_iter().collect();
        ordered_parallel(&ids, a.threads, |_, id| {
            let load = |dir: &Path| -> Result<ChangeMask, String> {
                let path = dir.join(format!("{id}.pbm"));
                let m = read_pbm(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(if a.majority { majority3(&m) } else { m })
            };
            let m_hist = load(hist_dir)?;
            let m_pred = load(pred_dir)?;
            if m_hist.width() != m_pred.width() || m_hist.height() != m_pred.height() {
                return Err(format!(
                    "mask pair {id} has mismatched sizes {}x{} vs {}x{}",
                    m_hist.width(),
                    m_hist.height(),
                    m_pred.width(),
                    m_pred.height()
                ));
            }
            Ok(score_masks(&m_hist, &m_pred, &tc, id))
        })
        .map_err(runtime)?
    } else {
        let (data_dir, fc_dir) = match (&a.data, &a.forecasts) {
            (Some(d), Some(f)) => (d, f),
            _ => return Err(usage(
                "image mode needs --data and --forecasts; mask mode needs --masks-hist and --masks-pred",
            )),
        };
        let data = load_dataset(data_dir).map_err(|e| runtime(e.to_string()))?;
        let seq_ids: BTreeSet<String> = data.iter().map(|s| s.id.clone()).collect();
        let fc_ids: BTreeSet<String> = file_stems(fc_dir, "ppm")?.into_iter().collect();
        if seq_ids != fc_ids {
            return Err(set_mismatch("forecasts", &seq_ids, &fc_ids));
        }
        ordered_parallel(&data, a.threads, |_, seq| {
            let n = seq.frames.len();
            if n < 3 {
                return Err(format!(
                    "sequence {} has {n} frames; scoring needs two history frames plus the target",
                    seq.id
                ));
            }
            let path = fc_dir.join(format!("{}.ppm", seq.id));
            let forecast = read_ppm(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let target = &seq.frames[n - 1];
            if forecast.shape() != target.shape() {
                return Err(format!(
                    "forecast {} is {:?} but the target frame is {:?}",
                    seq.id,
                    forecast.shape(),
                    target.shape()
                ));
            }
            let m_hist = detect_changes(&seq.frames[n - 3], &seq.frames[n - 2], &det);
            let m_pred = detect_changes(&seq.frames[n - 2], &forecast, &det);
            let mut e = score_masks(&m_hist, &m_pred, &tc, &seq.id);
            e.psnr = Some(psnr(&forecast, target));
            let s = forecast.shape();
            if s[0] >= SSIM_WINDOW && s[1] >= SSIM_WINDOW {
                e.ssim = Some(ssim(&forecast, target));
            }
            Ok(e)
        })
        .map_err(runtime)?
    };

    let settings = EvalSettings {
        config_hash: cfg.hash(),
        seed: a.seed,
        tool_version: TOOL_VERSION.to_string(),
        detector: match det.method {
            _ if mask_mode => "external".to_string(),
            DetectorMethod::AbsDiffOtsu => "otsu".to_string(),
            DetectorMethod::AbsDiffFixed(tau) => format!("fixed:{tau}"),
            DetectorMethod::ExternalMaskFile => "external".to_string(),
        },
        majority_filter: a.majority,
        empty_masks: policy.label().to_string(),
        sigma: tc.sigma,
        beta: tc.beta,
        epsilon: tc.epsilon,
    };
    let report = build_eval_report(settings, &entries, policy);
    ensure_parent(&a.report)?;
    write_eval_report(&report, &a.report)
        .map_err(|e| runtime(format!("cannot write report: {e}")))?;
    match chronosat::report::aggregate(&entries, policy) {
        Some(ag) => println!(
            "evaluated {} sequences: mean_tcs {:.6} ({})",
            entries.len(),
            ag.mean_tcs,
            a.report.display()
        ),
        None => println!("evaluated {} sequences: no aggregate ({})", entries.len(), a.report.display()),
    }
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────────────

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let suites: &[Suite] = match a.module.as_str() {
        "numeric_core" => &[Suite::Dense, Suite::Conv3d],
        "tam" => &[Suite::Attention, Suite::TimeEncoder],
        "sfci" => &[
            Suite::SemanticProject,
            Suite::Gate,
            Suite::TemporalRefine,
            Suite::ControlLevel,
        ],
        "diffusion" => &[Suite::UNet],
        "all" => &Suite::ALL,
        other => {
            return Err(usage(format!(
                "unknown module {other:?}; use numeric_core, tam, sfci, diffusion, or all"
            )))
        }
    };
    if a.configs == 0 {
        return Err(usage("--configs must be positive"));
    }
    let skew = a.corrupt_backward.then_some(1e-3);
    let mut all_ok = true;
    for &suite in suites {
        let out = run_suite(suite, a.configs, a.seed, skew)
            .map_err(|e| runtime(e.to_string()))?;
        let ok = out.max_rel_err < REL_ERR_LIMIT;
        all_ok &= ok;
        let worst = if out.worst.is_empty() { "-" } else { &out.worst };
        println!(
            "{:<16} {:>3} configs  worst rel err {:.3e}  ({})  [{}]",
            out.suite.name(),
            out.configs,
            out.max_rel_err,
            worst,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(runtime(format!("gradient check failed: a relative error reached {REL_ERR_LIMIT:e}")))
    }
}
