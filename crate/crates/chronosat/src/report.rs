//! Report documents the tools write: per-sequence evaluation scores with
//! dataset aggregates, and per-stage training loss curves. Floats in the
//! evaluation report carry nine significant digits; infinite distortion
//! ratios serialize as the string "inf".

use std::fs;
use std::io;
use std::path::Path;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::metrics::EmptyMaskPolicy;
use crate::train::TrainReport;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Rounds to nine significant digits through a scientific-notation print.
pub fn sig9(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("scientific notation roundtrip")
}

fn ser_sig9<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(sig9(*v))
}

fn ser_sig9_opt<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(sig9(*x)),
        None => s.serialize_none(),
    }
}

fn ser_psnr<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(sig9(*x)),
        None => s.serialize_none(),
    }
}

fn ser_psnr_mean<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    ser_sig9_opt(v, s)
}

/// Settings block embedded at the top of every evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub detector: String,
    pub majority_filter: bool,
    pub empty_masks: String,
    pub sigma: f64,
    pub beta: f64,
    pub epsilon: f64,
}

/// One evaluated sequence. `psnr` and `ssim` stay `None` when no ground-truth
/// image was available (precomputed-mask mode); `empty_pair` marks pairs
/// where at least one change mask was empty, which the skip policy drops from
/// the aggregate.
#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub id: String,
    pub tcs: f64,
    pub sps: f64,
    pub acs: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub empty_pair: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SequenceOut {
    id: String,
    #[serde(serialize_with = "ser_sig9")]
    tcs: f64,
    #[serde(serialize_with = "ser_sig9")]
    sps: f64,
    #[serde(serialize_with = "ser_sig9")]
    acs: f64,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_psnr")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_sig9_opt")]
    ssim: Option<f64>,
}

/// Dataset means. `mean_psnr` averages only finite values and is null when
/// none exist; `mean_ssim` is null when no scores were available.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(serialize_with = "ser_sig9")]
    pub mean_tcs: f64,
    #[serde(serialize_with = "ser_psnr_mean")]
    pub mean_psnr: Option<f64>,
    #[serde(serialize_with = "ser_sig9_opt")]
    pub mean_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    config: EvalSettings,
    sequences: Vec<SequenceOut>,
    aggregate: Option<Aggregate>,
}

/// Computes the dataset means the report carries. Entries whose mask pair was
/// empty are dropped first under the skip policy; with nothing left (or
/// nothing given) there is no aggregate.
pub fn aggregate(entries: &[EvalEntry], policy: EmptyMaskPolicy) -> Option<Aggregate> {
    let counted: Vec<&EvalEntry> = entries
        .iter()
        .filter(|e| !(policy == EmptyMaskPolicy::Skip && e.empty_pair))
        .collect();
    if counted.is_empty() {
        return None;
    }
    let mean_tcs = counted.iter().map(|e| e.tcs).sum::<f64>() / counted.len() as f64;
    let finite_psnr: Vec<f64> =
        counted.iter().filter_map(|e| e.psnr).filter(|p| p.is_finite()).collect();
    let mean_psnr = if finite_psnr.is_empty() {
        None
    } else {
        Some(finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64)
    };
    let ssims: Vec<f64> = counted.iter().filter_map(|e| e.ssim).collect();
    let mean_ssim = if ssims.is_empty() {
        None
    } else {
        Some(ssims.iter().sum::<f64>() / ssims.len() as f64)
    };
    Some(Aggregate { mean_tcs, mean_psnr, mean_ssim })
}

/// Assembles the full report document for a finished evaluation run.
pub fn build_eval_report(
    settings: EvalSettings,
    entries: &[EvalEntry],
    policy: EmptyMaskPolicy,
) -> EvalReport {
    let sequences = entries
        .iter()
        .map(|e| SequenceOut {
            id: e.id.clone(),
            tcs: e.tcs,
            sps: e.sps,
            acs: e.acs,
            psnr: e.psnr,
            ssim: e.ssim,
        })
        .collect();
    EvalReport { config: settings, sequences, aggregate: aggregate(entries, policy) }
}

pub fn write_eval_report(report: &EvalReport, path: &Path) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serialization");
    bytes.push(b'\n');
    fs::write(path, bytes)
}

struct TrainReportOut<'a> {
    report: &'a TrainReport,
    config_hash: &'a str,
}

impl Serialize for TrainReportOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("TrainReport", 6)?;
        st.serialize_field("stage", &self.report.stage)?;
        st.serialize_field("steps", &self.report.steps)?;
        st.serialize_field("loss", &self.report.loss)?;
        st.serialize_field("seed", &self.report.seed)?;
        st.serialize_field("config_hash", self.config_hash)?;
        st.serialize_field("tool_version", TOOL_VERSION)?;
        st.end()
    }
}

pub fn write_train_report(report: &TrainReport, config_hash: &str, path: &Path) -> io::Result<()> {
    let out = TrainReportOut { report, config_hash };
    let mut bytes = serde_json::to_vec_pretty(&out).expect("report serialization");
    bytes.push(b'\n');
    fs::write(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn settings() -> EvalSettings {
        EvalSettings {
            config_hash: "abc123".into(),
            seed: 7,
            tool_version: TOOL_VERSION.into(),
            detector: "otsu".into(),
            majority_filter: false,
            empty_masks: "neutral".into(),
            sigma: 0.2,
            beta: 1.0,
            epsilon: 1e-8,
        }
    }

    fn entry(id: &str, tcs: f64) -> EvalEntry {
        EvalEntry {
            id: id.into(),
            tcs,
            sps: tcs,
            acs: 1.0,
            psnr: Some(30.0),
            ssim: Some(0.9),
            empty_pair: false,
        }
    }

    fn to_value(report: &EvalReport) -> Value {
        serde_json::to_value(report).unwrap()
    }

    #[test]
    fn empty_results_serialize_to_null_aggregate() {
        let report = build_eval_report(settings(), &[], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["sequences"], Value::Array(vec![]));
        assert_eq!(v["aggregate"], Value::Null);
    }

    #[test]
    fn singleton_mean_equals_its_sequence() {
        let report = build_eval_report(settings(), &[entry("a", 1.0)], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["aggregate"]["mean_tcs"], Value::from(1.0));
    }

    #[test]
    fn two_sequence_mean_is_the_midpoint() {
        let entries = [entry("a", 0.4), entry("b", 0.6)];
        let report = build_eval_report(settings(), &entries, EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["aggregate"]["mean_tcs"].as_f64().unwrap(), 0.5);
    }

    #[test]
    fn floats_round_to_nine_significant_digits() {
        assert_eq!(sig9(0.123456789123), 0.123456789);
        assert_eq!(sig9(87.1234567891), 87.1234568);
        assert_eq!(sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(sig9(0.0), 0.0);
        assert_eq!(sig9(-0.123456789555), -0.12345679);
        let mut e = entry("a", 1.0 / 3.0);
        e.ssim = Some(2.0 / 3.0);
        let report = build_eval_report(settings(), &[e], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["sequences"][0]["tcs"].as_f64().unwrap(), 0.333333333);
        assert_eq!(v["sequences"][0]["ssim"].as_f64().unwrap(), 0.666666667);
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let mut e = entry("a", 1.0);
        e.psnr = Some(f64::INFINITY);
        let report = build_eval_report(settings(), &[e], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["sequences"][0]["psnr"], Value::from("inf"));
        assert_eq!(v["aggregate"]["mean_psnr"], Value::Null);
    }

    #[test]
    fn psnr_mean_skips_infinite_values() {
        let mut a = entry("a", 1.0);
        a.psnr = Some(f64::INFINITY);
        let mut b = entry("b", 1.0);
        b.psnr = Some(24.0);
        let report = build_eval_report(settings(), &[a, b], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        assert_eq!(v["aggregate"]["mean_psnr"].as_f64().unwrap(), 24.0);
    }

    #[test]
    fn mask_mode_entries_omit_image_metrics() {
        let mut e = entry("a", 0.5);
        e.psnr = None;
        e.ssim = None;
        let report = build_eval_report(settings(), &[e], EmptyMaskPolicy::Neutral);
        let v = to_value(&report);
        let seq = v["sequences"][0].as_object().unwrap();
        assert!(!seq.contains_key("psnr"));
        assert!(!seq.contains_key("ssim"));
        assert_eq!(v["aggregate"]["mean_psnr"], Value::Null);
        assert_eq!(v["aggregate"]["mean_ssim"], Value::Null);
    }

    #[test]
    fn skip_policy_drops_empty_pairs_from_the_mean_only() {
        let mut a = entry("a", 1.0);
        a.empty_pair = true;
        let b = entry("b", 0.4);
        let skip = build_eval_report(settings(), &[a.clone(), b.clone()], EmptyMaskPolicy::Skip);
        let v = to_value(&skip);
        assert_eq!(v["sequences"].as_array().unwrap().len(), 2);
        assert!((v["aggregate"]["mean_tcs"].as_f64().unwrap() - 0.4).abs() < 1e-12);
        let neutral = build_eval_report(settings(), &[a.clone(), b], EmptyMaskPolicy::Neutral);
        let v = to_value(&neutral);
        assert!((v["aggregate"]["mean_tcs"].as_f64().unwrap() - 0.7).abs() < 1e-12);
        let all_skipped = build_eval_report(settings(), &[a], EmptyMaskPolicy::Skip);
        let v = to_value(&all_skipped);
        assert_eq!(v["sequences"].as_array().unwrap().len(), 1);
        assert_eq!(v["aggregate"], Value::Null);
    }

    #[test]
    fn report_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.json");
        let path_b = dir.path().join("b.json");
        let entries = [entry("a", 0.25), entry("b", 0.75)];
        let report = build_eval_report(settings(), &entries, EmptyMaskPolicy::Neutral);
        write_eval_report(&report, &path_a).unwrap();
        write_eval_report(&report, &path_b).unwrap();
        assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
    }

    #[test]
    fn training_report_carries_hash_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        let report = TrainReport { stage: 1, steps: 3, loss: vec![0.9, 0.8, 0.7], seed: 5 };
        write_train_report(&report, "deadbeef", &path).unwrap();
        let v: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(v["stage"], Value::from(1));
        assert_eq!(v["steps"], Value::from(3));
        assert_eq!(v["loss"].as_array().unwrap().len(), 3);
        assert_eq!(v["seed"], Value::from(5));
        assert_eq!(v["config_hash"], Value::from("deadbeef"));
        assert_eq!(v["tool_version"], Value::from(TOOL_VERSION));
    }
}
