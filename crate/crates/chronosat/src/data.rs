//! Synthetic satellite-style sequence generation with controllable trends,
//! plus dataset manifest reading and writing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{read_ppm, write_ppm, CodecError};
use crate::tensor::Tensor;

pub const MIN_GAP_DAYS: f64 = 30.0;
pub const MAX_GAP_DAYS: f64 = 1100.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Codec(#[from] CodecError),
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("bad scenario configuration: {0}")]
    Config(String),
}

/// One location's frame series: images as [H, W, C] in [0, 1] plus integer
/// day timestamps, strictly increasing.
#[derive(Debug, Clone)]
pub struct SitsSequence {
    pub id: String,
    pub scene_description: String,
    pub frames: Vec<Tensor>,
    pub timestamps: Vec<i64>,
}

impl SitsSequence {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.len() != self.timestamps.len() {
            return Err(DataError::Invalid(format!(
                "{} frames but {} timestamps",
                self.frames.len(),
                self.timestamps.len()
            )));
        }
        if self.frames.len() < 2 {
            return Err(DataError::Invalid("a sequence needs at least 2 frames".into()));
        }
        for w in self.timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(DataError::Invalid(format!(
                    "timestamps must strictly increase, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let shape = self.frames[0].shape();
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(DataError::Invalid(format!(
                    "frame {i} shape {:?} differs from frame 0 shape {shape:?}",
                    f.shape()
                )));
            }
        }
        Ok(())
    }

    /// Day gaps between consecutive frames as floats.
    pub fn gaps(&self) -> Vec<f64> {
        self.timestamps.windows(2).map(|w| (w[1] - w[0]) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    GrowingSquare,
    MovingBlock,
    SeasonalField,
    Static,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Option<ScenarioKind> {
        match s {
            "growing_square" => Some(ScenarioKind::GrowingSquare),
            "moving_block" => Some(ScenarioKind::MovingBlock),
            "seasonal_field" => Some(ScenarioKind::SeasonalField),
            "static" => Some(ScenarioKind::Static),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::GrowingSquare => "growing_square",
            ScenarioKind::MovingBlock => "moving_block",
            ScenarioKind::SeasonalField => "seasonal_field",
            ScenarioKind::Static => "static",
        }
    }

    fn scene_description(&self) -> &'static str {
        match self {
            ScenarioKind::GrowingSquare => "an expanding industrial compound on open terrain",
            ScenarioKind::MovingBlock => "a storage yard with relocating container stacks",
            ScenarioKind::SeasonalField => "agricultural fields cycling through the seasons",
            ScenarioKind::Static => "a stable residential district",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Side growth in pixels per day (growing_square).
    pub rate: f64,
    /// Drift in pixels per day (moving_block).
    pub velocity: (f64, f64),
    /// Annual brightness swing (seasonal_field).
    pub amplitude: f64,
    /// Uniform pixel noise: each frame gets i.i.d. noise in [-noise/2, noise/2].
    pub noise: f64,
    /// Starting square/block side in pixels.
    pub base_side: f64,
}

impl Scenario {
    pub fn default_for(kind: ScenarioKind) -> Scenario {
        Scenario {
            kind,
            rate: 0.002,
            velocity: (0.010, 0.006),
            amplitude: 0.25,
            noise: 0.01,
            base_side: 3.0,
        }
    }

    fn check(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.rate) {
            return fail(format!("rate must lie in [0, 1] px/day, got {}", self.rate));
        }
        if self.velocity.0.abs() > 1.0 || self.velocity.1.abs() > 1.0 {
            return fail(format!("velocity must stay within ±1 px/day, got {:?}", self.velocity));
        }
        if !(0.0..=0.5).contains(&self.amplitude) {
            return fail(format!("amplitude must lie in [0, 0.5], got {}", self.amplitude));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail(format!("noise must lie in [0, 1), got {}", self.noise));
        }
        if self.base_side < 1.0 {
            return fail(format!("base side must be at least 1 px, got {}", self.base_side));
        }
        Ok(())
    }
}

/// Square side after `elapsed` days: linear growth from the base side,
/// capped at three quarters of the frame.
pub fn square_side(base_side: f64, rate: f64, elapsed: f64, size: usize) -> f64 {
    (base_side + rate * elapsed).min(0.75 * size as f64)
}

/// Paints an axis-aligned square with sub-pixel edge coverage: each pixel
/// gets foreground weight equal to its overlap with the square.
fn paint_square(img: &mut [f64], size: usize, cx: f64, cy: f64, side: f64, value: f64) {
    let half = side / 2.0;
    for i in 0..size {
        for j in 0..size {
            let ox = (cx + half).min(j as f64 + 1.0) - (cx - half).max(j as f64);
            let oy = (cy + half).min(i as f64 + 1.0) - (cy - half).max(i as f64);
            if ox > 0.0 && oy > 0.0 {
                let cover = (ox * oy).min(1.0);
                for ch in 0..3 {
                    let p = &mut img[(i * size + j) * 3 + ch];
                    *p += (value - *p) * cover;
                }
            }
        }
    }
}

fn draw_gap(rng: &mut ChaCha20Rng) -> i64 {
    let u: f64 = rng.gen();
    let gap = (MIN_GAP_DAYS.ln() + u * (MAX_GAP_DAYS / MIN_GAP_DAYS).ln()).exp();
    (gap.round() as i64).max(MIN_GAP_DAYS as i64)
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15)))
}

/// Generates `n_sequences` deterministic sequences of `frames_per_seq`
/// size×size RGB frames with irregular day gaps (log-uniform 30 to 1100).
pub fn generate_synthetic(
    scenario: &Scenario,
    n_sequences: usize,
    frames_per_seq: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<SitsSequence>, DataError> {
    scenario.check()?;
    if frames_per_seq < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 frames per sequence, got {frames_per_seq}"
        )));
    }
    if size < 8 {
        return Err(DataError::Config(format!("frame size must be at least 8, got {size}")));
    }
    let mut sequences = Vec::with_capacity(n_sequences);
    for k in 0..n_sequences {
        let mut rng = sequence_rng(seed, k);
        let t0 = rng.gen_range(0..3650i64);
        let mut timestamps = vec![t0];
        for _ in 1..frames_per_seq {
            let last = *timestamps.last().unwrap();
            timestamps.push(last + draw_gap(&mut rng));
        }
        let texture: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let center = (
            size as f64 * rng.gen_range(0.35..0.65),
            size as f64 * rng.gen_range(0.35..0.65),
        );
        let mut frames = Vec::with_capacity(frames_per_seq);
        for &t in &timestamps {
            let elapsed = (t - t0) as f64;
            let mut img = vec![0.0; size * size * 3];
            let background = match scenario.kind {
                ScenarioKind::SeasonalField => {
                    0.45 + scenario.amplitude
                        * (2.0 * std::f64::consts::PI * t as f64 / 365.25).sin()
                }
                _ => 0.3,
            };
            for (p, v) in img.iter_mut().enumerate() {
                *v = background + texture[p];
            }
            match scenario.kind {
                ScenarioKind::GrowingSquare => {
                    let side = square_side(scenario.base_side, scenario.rate, elapsed, size);
                    paint_square(&mut img, size, center.0, center.1, side, 0.9);
                }
                ScenarioKind::MovingBlock => {
                    let cx = (center.0 + scenario.velocity.0 * elapsed).rem_euclid(size as f64);
                    let cy = (center.1 + scenario.velocity.1 * elapsed).rem_euclid(size as f64);
                    paint_square(&mut img, size, cx, cy, scenario.base_side, 0.9);
                }
                ScenarioKind::SeasonalField | ScenarioKind::Static => {}
            }
            for v in img.iter_mut() {
                *v = (*v + (rng.gen::<f64>() - 0.5) * scenario.noise).clamp(0.0, 1.0);
            }
            frames.push(Tensor::new(vec![size, size, 3], img));
        }
        let seq = SitsSequence {
            id: format!("{}_{k:03}", scenario.kind.label()),
            scene_description: scenario.kind.scene_description().to_string(),
            frames,
            timestamps,
        };
        seq.validate()?;
        sequences.push(seq);
    }
    Ok(sequences)
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    path: String,
    timestamp_days: i64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    scene_description: String,
    frames: Vec<ManifestFrame>,
}

/// Writes one sequence as PPM frames plus a JSON manifest into `dir`;
/// returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &SitsSequence) -> Result<PathBuf, DataError> {
    seq.validate()?;
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, (frame, &t)) in seq.frames.iter().zip(&seq.timestamps).enumerate() {
        let name = format!("{}_f{i}.ppm", seq.id);
        write_ppm(&dir.join(&name), frame)?;
        frames.push(ManifestFrame { path: name, timestamp_days: t });
    }
    let manifest = Manifest {
        id: seq.id.clone(),
        scene_description: seq.scene_description.clone(),
        frames,
    };
    let path = dir.join(format!("{}.json", seq.id));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&path, json)?;
    Ok(path)
}

/// Loads a sequence from its manifest, resolving frame paths relative to the
/// manifest's directory and validating every sequence invariant.
pub fn load_sequence(manifest_path: &Path) -> Result<SitsSequence, DataError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Invalid(format!("manifest parse: {e}")))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut timestamps = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        frames.push(read_ppm(&base.join(&f.path))?);
        timestamps.push(f.timestamp_days);
    }
    let seq = SitsSequence {
        id: manifest.id,
        scene_description: manifest.scene_description,
        frames,
        timestamps,
    };
    seq.validate()?;
    Ok(seq)
}

/// Loads every `*.json` manifest in a directory, sorted by file name for a
/// stable order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SitsSequence>, DataError> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(DataError::Invalid(format!("no manifests found in {}", dir.display())));
    }
    manifests.iter().map(|p| load_sequence(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let sc = Scenario::default_for(ScenarioKind::GrowingSquare);
        let a = generate_synthetic(&sc, 3, 4, 16, 99).unwrap();
        let b = generate_synthetic(&sc, 3, 4, 16, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.timestamps, y.timestamps);
            for (fa, fb) in x.frames.iter().zip(&y.frames) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(fa), bits(fb));
            }
        }
        let c = generate_synthetic(&sc, 3, 4, 16, 100).unwrap();
        assert_ne!(
            a[0].frames[0].data()[0].to_bits(),
            c[0].frames[0].data()[0].to_bits()
        );
    }

    #[test]
    fn gaps_stay_in_documented_range() {
        let sc = Scenario::default_for(ScenarioKind::Static);
        let seqs = generate_synthetic(&sc, 20, 4, 16, 7).unwrap();
        for s in &seqs {
            for g in s.gaps() {
                assert!((30.0..=1100.0).contains(&g), "gap {g} out of range");
            }
        }
    }

    #[test]
    fn static_frames_stay_within_noise_of_first() {
        let sc = Scenario::default_for(ScenarioKind::Static);
        let seqs = generate_synthetic(&sc, 5, 4, 16, 3).unwrap();
        for s in &seqs {
            for f in &s.frames[1..] {
                assert!(max_abs_diff(f, &s.frames[0]) <= sc.noise + 1e-12);
            }
        }
    }

    #[test]
    fn square_growth_follows_the_closed_form() {
        let side_a = square_side(3.0, 0.0078125, 256.0, 16);
        let side_b = square_side(3.0, 0.0078125, 512.0, 16);
        assert_eq!(side_b - side_a, 0.0078125 * 256.0);
        let slope = (square_side(3.0, 0.004, 400.0, 16) - square_side(3.0, 0.004, 250.0, 16)) / 150.0;
        assert!((slope - 0.004).abs() < 1e-12);
        assert_eq!(square_side(3.0, 0.5, 10_000.0, 16), 12.0);
    }

    #[test]
    fn growing_square_changes_consecutive_frames() {
        let mut sc = Scenario::default_for(ScenarioKind::GrowingSquare);
        sc.noise = 0.0;
        let seqs = generate_synthetic(&sc, 8, 4, 16, 11).unwrap();
        for s in &seqs {
            for pair in s.frames.windows(2) {
                assert!(
                    max_abs_diff(&pair[0], &pair[1]) > 1e-6,
                    "{}: consecutive frames must differ before noise",
                    s.id
                );
            }
        }
    }

    #[test]
    fn moving_block_translates() {
        let mut sc = Scenario::default_for(ScenarioKind::MovingBlock);
        sc.noise = 0.0;
        let seqs = generate_synthetic(&sc, 4, 4, 16, 13).unwrap();
        for s in &seqs {
            assert!(max_abs_diff(&s.frames[0], s.frames.last().unwrap()) > 0.05);
        }
    }

    #[test]
    fn seasonal_brightness_varies_with_date() {
        let mut sc = Scenario::default_for(ScenarioKind::SeasonalField);
        sc.noise = 0.0;
        let seqs = generate_synthetic(&sc, 6, 4, 16, 17).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.data().len() as f64;
        let any_varies = seqs.iter().any(|s| {
            let m0 = mean(&s.frames[0]);
            s.frames[1..].iter().any(|f| (mean(f) - m0).abs() > 0.05)
        });
        assert!(any_varies);
    }

    #[test]
    fn scenario_validation_rejects_bad_params() {
        let mut sc = Scenario::default_for(ScenarioKind::GrowingSquare);
        sc.noise = 1.5;
        assert!(matches!(
            generate_synthetic(&sc, 1, 4, 16, 1),
            Err(DataError::Config(_))
        ));
        let sc = Scenario::default_for(ScenarioKind::Static);
        assert!(matches!(
            generate_synthetic(&sc, 1, 1, 16, 1),
            Err(DataError::Config(_))
        ));
        assert!(matches!(
            generate_synthetic(&sc, 1, 4, 4, 1),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_preserves_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario::default_for(ScenarioKind::GrowingSquare);
        let seqs = generate_synthetic(&sc, 1, 3, 12, 5).unwrap();
        let path = write_sequence(dir.path(), &seqs[0]).unwrap();
        let back = load_sequence(&path).unwrap();
        assert_eq!(back.id, seqs[0].id);
        assert_eq!(back.scene_description, seqs[0].scene_description);
        assert_eq!(back.timestamps, seqs[0].timestamps);
        assert_eq!(back.frames.len(), 3);
        for (a, b) in back.frames.iter().zip(&seqs[0].frames) {
            assert!(max_abs_diff(a, b) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn loader_rejects_each_invariant_violation() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(vec![4, 4, 3], 0.5);
        write_ppm(&dir.path().join("a.ppm"), &img).unwrap();
        write_ppm(&dir.path().join("b.ppm"), &img).unwrap();
        write_ppm(&dir.path().join("wide.ppm"), &Tensor::full(vec![4, 6, 3], 0.5)).unwrap();

        let write_manifest = |name: &str, body: &str| {
            let p = dir.path().join(name);
            fs::write(&p, body).unwrap();
            p
        };

        let stale = write_manifest(
            "stale.json",
            r#"{"id":"x","scene_description":"s","frames":[
                {"path":"a.ppm","timestamp_days":10},
                {"path":"b.ppm","timestamp_days":10}]}"#,
        );
        assert!(matches!(load_sequence(&stale), Err(DataError::Invalid(_))));

        let missing = write_manifest(
            "missing.json",
            r#"{"id":"x","scene_description":"s","frames":[
                {"path":"a.ppm","timestamp_days":10},
                {"path":"ghost.ppm","timestamp_days":20}]}"#,
        );
        assert!(matches!(load_sequence(&missing), Err(DataError::Codec(CodecError::Io(_)))));

        let ragged = write_manifest(
            "ragged.json",
            r#"{"id":"x","scene_description":"s","frames":[
                {"path":"a.ppm","timestamp_days":10},
                {"path":"wide.ppm","timestamp_days":20}]}"#,
        );
        assert!(matches!(load_sequence(&ragged), Err(DataError::Invalid(_))));

        let short = write_manifest(
            "short.json",
            r#"{"id":"x","scene_description":"s","frames":[
                {"path":"a.ppm","timestamp_days":10}]}"#,
        );
        assert!(matches!(load_sequence(&short), Err(DataError::Invalid(_))));
    }

    #[test]
    fn dataset_loads_sorted_by_manifest_name() {
        let dir = tempfile::tempdir().unwrap();
        let sc = Scenario::default_for(ScenarioKind::Static);
        let seqs = generate_synthetic(&sc, 3, 3, 10, 21).unwrap();
        for s in seqs.iter().rev() {
            write_sequence(dir.path(), s).unwrap();
        }
        let loaded = load_dataset(dir.path()).unwrap();
        let ids: Vec<&str> = loaded.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["static_000", "static_001", "static_002"]);
        assert!(matches!(
            load_dataset(&dir.path().join("void")),
            Err(DataError::Io(_))
        ));
    }
}
