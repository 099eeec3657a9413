//! Change-mask consistency scoring (spatial proximity, area consistency,
//! and their product), a pluggable change detector, and reference PSNR/SSIM.

use crate::tensor::Tensor;

pub const LUMA_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl ChangeMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> ChangeMask {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        assert_eq!(bits.len(), width * height, "mask bits must cover width * height");
        assert!(bits.iter().all(|&b| b <= 1), "mask bits must be 0 or 1");
        ChangeMask { width, height, bits }
    }

    pub fn empty(width: usize, height: usize) -> ChangeMask {
        ChangeMask::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

/// How a score treats pairs where a mask has no set pixels.
///
/// `Neutral`: both empty scores 1.0 (no change predicted, none occurred);
/// exactly one empty scores SPS 0.0 and ACS by its formula. `Skip` keeps the
/// same per-pair scores but tells report aggregation to leave such pairs out
/// of the means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyMaskPolicy {
    Neutral,
    Skip,
}

impl EmptyMaskPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            EmptyMaskPolicy::Neutral => "neutral",
            EmptyMaskPolicy::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcsConfig {
    pub sigma: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub empty_policy: EmptyMaskPolicy,
}

impl Default for TcsConfig {
    fn default() -> TcsConfig {
        TcsConfig { sigma: 0.2, beta: 1.0, epsilon: 1e-8, empty_policy: EmptyMaskPolicy::Neutral }
    }
}

impl TcsConfig {
    fn check(&self) {
        assert!(self.sigma > 0.0, "sigma must be positive");
        assert!(self.beta >= 0.0, "beta must be non-negative");
        assert!(self.epsilon > 0.0, "epsilon must be positive");
    }
}

/// Mean of set-pixel centers with both axes normalized to [0, 1]; pixel
/// (row i, col j) contributes ((j+0.5)/W, (i+0.5)/H). None when no pixel set.
pub fn centroid(mask: &ChangeMask) -> Option<(f64, f64)> {
    let (w, h) = (mask.width, mask.height);
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                count += 1;
                sx += (j as f64 + 0.5) / w as f64;
                sy += (i as f64 + 0.5) / h as f64;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some((sx / count as f64, sy / count as f64))
    }
}

fn check_dims(a: &ChangeMask, b: &ChangeMask) {
    assert!(
        a.width == b.width && a.height == b.height,
        "mask dimensions differ: {}x{} vs {}x{}",
        a.width,
        a.height,
        b.width,
        b.height
    );
}

/// Spatial proximity: exp(-|centroid distance| / sigma) on normalized
/// coordinates. Empty-mask pairs score by the neutral policy values.
pub fn sps(m_hist: &ChangeMask, m_pred: &ChangeMask, cfg: &TcsConfig) -> f64 {
    cfg.check();
    check_dims(m_hist, m_pred);
    match (centroid(m_hist), centroid(m_pred)) {
        (None, None) => 1.0,
        (None, Some(_)) | (Some(_), None) => 0.0,
        (Some((ax, ay)), Some((bx, by))) => {
            let dist = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            (-dist / cfg.sigma).exp()
        }
    }
}

/// Area consistency: exp(-beta * |A_pred - A_hist| / (max(A_pred, A_hist) + eps)).
pub fn acs(m_hist: &ChangeMask, m_pred: &ChangeMask, cfg: &TcsConfig) -> f64 {
    cfg.check();
    check_dims(m_hist, m_pred);
    let (a, b) = (m_hist.area() as f64, m_pred.area() as f64);
    if a == 0.0 && b == 0.0 {
        return 1.0;
    }
    (-cfg.beta * (a - b).abs() / (a.max(b) + cfg.epsilon)).exp()
}

/// Temporal consistency: the product of sps and acs under one config.
pub fn tcs(m_hist: &ChangeMask, m_pred: &ChangeMask, cfg: &TcsConfig) -> f64 {
    sps(m_hist, m_pred, cfg) * acs(m_hist, m_pred, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorMethod {
    AbsDiffOtsu,
    AbsDiffFixed(f64),
    /// Masks come from files supplied by the caller; the detector itself
    /// never runs.
    ExternalMaskFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub method: DetectorMethod,
    pub majority_filter: bool,
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig { method: DetectorMethod::AbsDiffOtsu, majority_filter: false }
    }
}

impl DetectorConfig {
    pub fn fixed(tau: f64) -> DetectorConfig {
        assert!(tau > 0.0 && tau < 1.0, "fixed threshold must lie in (0, 1), got {tau}");
        DetectorConfig { method: DetectorMethod::AbsDiffFixed(tau), majority_filter: false }
    }
}

/// Collapses [H, W, C] in [0, 1] to one luminance value per pixel; C must be
/// 1 (pass-through) or 3 (weighted).
pub fn to_gray(img: &Tensor) -> Vec<f64> {
    let s = img.shape();
    assert_eq!(s.len(), 3, "image must be [H, W, C], got {s:?}");
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = img.data();
    match c {
        1 => d.to_vec(),
        3 => (0..h * w)
            .map(|p| {
                LUMA_WEIGHTS[0] * d[p * 3] + LUMA_WEIGHTS[1] * d[p * 3 + 1]
                    + LUMA_WEIGHTS[2] * d[p * 3 + 2]
            })
            .collect(),
        _ => panic!("expected 1 or 3 channels, got {c}"),
    }
}

/// Otsu's threshold over a 256-bin histogram of values in [0, 1]; returns the
/// dividing bin k* (pixels with bin > k* count as foreground). Smallest
/// maximizer wins on ties.
fn otsu_bin(quantized: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &q in quantized {
        hist[q as usize] += 1;
    }
    let total = quantized.len() as f64;
    let total_mean: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum::<f64>();
    let mut best = (0u8, f64::NEG_INFINITY);
    let (mut w0, mut sum0) = (0.0, 0.0);
    for k in 0..256usize {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.1 {
            best = (k as u8, between);
        }
    }
    best.0
}

/// Binary change mask from the per-pixel grayscale absolute difference,
/// thresholded by the configured method, optionally cleaned by a 3x3
/// majority filter.
pub fn detect_changes(img_a: &Tensor, img_b: &Tensor, cfg: &DetectorConfig) -> ChangeMask {
    assert_eq!(img_a.shape(), img_b.shape(), "images must have equal shapes");
    let s = img_a.shape();
    let (h, w) = (s[0], s[1]);
    let (ga, gb) = (to_gray(img_a), to_gray(img_b));
    let diff: Vec<f64> = ga.iter().zip(&gb).map(|(&x, &y)| (x - y).abs()).collect();
    let bits: Vec<u8> = match cfg.method {
        DetectorMethod::AbsDiffFixed(tau) => {
            assert!(tau > 0.0 && tau < 1.0, "fixed threshold must lie in (0, 1), got {tau}");
            diff.iter().map(|&d| (d > tau) as u8).collect()
        }
        DetectorMethod::AbsDiffOtsu => {
            let q: Vec<u8> = diff.iter().map(|&d| (d * 255.0 + 0.5).floor() as u8).collect();
            let k = otsu_bin(&q);
            q.iter().map(|&v| (v > k) as u8).collect()
        }
        DetectorMethod::ExternalMaskFile => {
            panic!("external masks are loaded from files, not detected")
        }
    };
    let mask = ChangeMask::new(w, h, bits);
    if cfg.majority_filter {
        majority3(&mask)
    } else {
        mask
    }
}

/// 3x3 majority vote with zero padding: a pixel stays set only when at least
/// 5 of the 9 cells in its neighborhood are set.
pub fn majority3(mask: &ChangeMask) -> ChangeMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![0u8; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut votes = 0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni >= 0 && ni < h as i64 && nj >= 0 && nj < w as i64 {
                        votes += mask.bits[ni as usize * w + nj as usize] as u32;
                    }
                }
            }
            out[i * w + j] = (votes >= 5) as u8;
        }
    }
    ChangeMask::new(w, h, out)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range; +inf when the
/// images are identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "images must have equal shapes");
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Row-then-column pass of the separable Gaussian over valid positions;
/// input [H, W] flattened, output [(H-10), (W-10)] flattened.
fn blur_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                acc += g * img[y * w + x + t];
            }
            rows[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                acc += g * rows[(y + t) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps();
    let sq_a: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let mu_a = blur_valid(a, h, w, &taps);
    let mu_b = blur_valid(b, h, w, &taps);
    let e_a2 = blur_valid(&sq_a, h, w, &taps);
    let e_b2 = blur_valid(&sq_b, h, w, &taps);
    let e_ab = blur_valid(&ab, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity with an 11x11 Gaussian window over valid
/// positions. Accepts [H, W] or [H, W, C]; channels are scored independently
/// and averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "images must have equal shapes");
    let s = a.shape();
    let (h, w, c) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => panic!("expected [H, W] or [H, W, C], got {s:?}"),
    };
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let mut total = 0.0;
    for ch in 0..c {
        let plane_a: Vec<f64> = (0..h * w).map(|p| a.data()[p * c + ch]).collect();
        let plane_b: Vec<f64> = (0..h * w).map(|p| b.data()[p * c + ch]).collect();
        total += ssim_plane(&plane_a, &plane_b, h, w);
    }
    total / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn block_mask(w: usize, h: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> ChangeMask {
        let mut m = ChangeMask::empty(w, h);
        for i in r0..r1 {
            for j in c0..c1 {
                m.set(i, j, true);
            }
        }
        m
    }

    fn random_mask(w: usize, h: usize, rng: &mut ChaCha20Rng) -> ChangeMask {
        let bits = (0..w * h).map(|_| rng.gen_bool(0.3) as u8).collect();
        ChangeMask::new(w, h, bits)
    }

    #[test]
    fn centroid_conventions() {
        let full = ChangeMask::new(4, 4, vec![1; 16]);
        let (x, y) = centroid(&full).unwrap();
        assert!((x - 0.5).abs() < 1e-12 && (y - 0.5).abs() < 1e-12);

        let mut single = ChangeMask::empty(10, 10);
        single.set(0, 0, true);
        let (x, y) = centroid(&single).unwrap();
        assert!((x - 0.05).abs() < 1e-12 && (y - 0.05).abs() < 1e-12);

        assert_eq!(centroid(&ChangeMask::empty(5, 5)), None);
    }

    #[test]
    fn proximity_score_closed_forms() {
        let cfg = TcsConfig::default();
        let a = block_mask(20, 20, 4, 6, 4, 6);
        assert_eq!(sps(&a, &a, &cfg), 1.0);

        let b = block_mask(20, 20, 4, 6, 6, 8);
        let (ax, ay) = centroid(&a).unwrap();
        let (bx, by) = centroid(&b).unwrap();
        assert!((ax - 0.25).abs() < 1e-12 && (ay - 0.25).abs() < 1e-12);
        assert!((bx - 0.35).abs() < 1e-12 && (by - 0.25).abs() < 1e-12);
        let s = sps(&a, &b, &cfg);
        assert!((s - (-0.5f64).exp()).abs() < 1e-12);
        assert!((s - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn area_score_closed_forms() {
        let cfg = TcsConfig::default();
        let a = block_mask(25, 25, 5, 15, 5, 15);
        let b = block_mask(25, 25, 5, 15, 5, 20);
        assert_eq!(a.area(), 100);
        assert_eq!(b.area(), 150);
        let got = acs(&a, &b, &cfg);
        let oracle = (-(150.0 - 100.0) / (150.0f64 + 1e-8)).exp();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.716531).abs() < 1e-6);

        let empty = ChangeMask::empty(25, 25);
        let one_sided = acs(&a, &empty, &cfg);
        assert!((one_sided - (-100.0 / (100.0f64 + 1e-8)).exp()).abs() < 1e-12);
        assert!((one_sided - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn combined_score_is_product_of_verified_factors() {
        // One pair realizes both the 0.1 centroid offset and the 100/150
        // area mismatch: same rows, the wider block extends 5 columns right.
        let cfg = TcsConfig::default();
        let a = block_mask(25, 25, 5, 15, 5, 15);
        let b = block_mask(25, 25, 5, 15, 5, 20);
        let (ax, ay) = centroid(&a).unwrap();
        let (bx, by) = centroid(&b).unwrap();
        assert!((bx - ax - 0.1).abs() < 1e-12);
        assert!((by - ay).abs() < 1e-12);
        let got = tcs(&a, &b, &cfg);
        let oracle = (-0.1 / 0.2f64).exp() * (-(150.0 - 100.0) / (150.0f64 + 1e-8)).exp();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.434598).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_policy_values() {
        let cfg = TcsConfig::default();
        let empty = ChangeMask::empty(8, 8);
        let full = block_mask(8, 8, 2, 4, 2, 4);
        assert_eq!(sps(&empty, &empty, &cfg), 1.0);
        assert_eq!(acs(&empty, &empty, &cfg), 1.0);
        assert_eq!(tcs(&empty, &empty, &cfg), 1.0);
        assert_eq!(sps(&full, &empty, &cfg), 0.0);
        assert_eq!(tcs(&full, &empty, &cfg), 0.0);
    }

    #[test]
    fn scores_are_symmetric_and_bounded() {
        let cfg = TcsConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = random_mask(16, 16, &mut rng);
            let b = random_mask(16, 16, &mut rng);
            assert_eq!(sps(&a, &b, &cfg).to_bits(), sps(&b, &a, &cfg).to_bits());
            assert_eq!(acs(&a, &b, &cfg).to_bits(), acs(&b, &a, &cfg).to_bits());
            let t = tcs(&a, &b, &cfg);
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn proximity_decreases_with_distance_area_with_mismatch() {
        let cfg = TcsConfig::default();
        let base = block_mask(32, 32, 0, 1, 0, 1);
        let mut last = f64::INFINITY;
        for shift in 1..20 {
            let moved = block_mask(32, 32, 0, 1, shift, shift + 1);
            let s = sps(&base, &moved, &cfg);
            assert!(s < last, "sps must fall as the centroid moves away");
            last = s;
        }
        let mut last = f64::INFINITY;
        let wide = block_mask(32, 32, 0, 10, 0, 20);
        for rows in (1..10).rev() {
            let shrunk = block_mask(32, 32, 0, rows, 0, 20);
            let s = acs(&wide, &shrunk, &cfg);
            assert!(s < last, "acs must fall as areas diverge");
            last = s;
        }
    }

    #[test]
    fn perfect_score_requires_matching_centroid_and_area() {
        let cfg = TcsConfig::default();
        let a = block_mask(16, 16, 2, 6, 2, 6);
        let translated = block_mask(16, 16, 2, 6, 8, 12);
        assert!(tcs(&a, &translated, &cfg) < 1.0);
        let grown = block_mask(16, 16, 2, 7, 2, 6);
        assert!(tcs(&a, &grown, &cfg) < 1.0);
        // Same centroid and area realized by different shapes still scores 1.
        let mut cross = ChangeMask::empty(16, 16);
        for (i, j) in [(3, 4), (5, 4), (4, 3), (4, 5)] {
            cross.set(i, j, true);
        }
        let mut square = ChangeMask::empty(16, 16);
        for (i, j) in [(3, 3), (3, 5), (5, 3), (5, 5)] {
            square.set(i, j, true);
        }
        assert!((tcs(&cross, &square, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_and_area_match_brute_force_on_random_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let m = random_mask(32, 32, &mut rng);
            let mut count = 0usize;
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            for i in 0..32 {
                for j in 0..32 {
                    if m.bits()[i * 32 + j] == 1 {
                        count += 1;
                        sx += (j as f64 + 0.5) / 32.0;
                        sy += (i as f64 + 0.5) / 32.0;
                    }
                }
            }
            assert_eq!(m.area(), count);
            match centroid(&m) {
                None => assert_eq!(count, 0),
                Some((x, y)) => {
                    assert_eq!(x.to_bits(), (sx / count as f64).to_bits());
                    assert_eq!(y.to_bits(), (sy / count as f64).to_bits());
                }
            }
        }
    }

    fn rgb(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Tensor {
        let mut d = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                d.extend(f(i, j));
            }
        }
        Tensor::new(vec![h, w, 3], d)
    }

    #[test]
    fn identical_images_yield_empty_mask() {
        let img = rgb(8, 8, |i, j| [(i as f64) / 8.0, (j as f64) / 8.0, 0.5]);
        for cfg in [DetectorConfig::default(), DetectorConfig::fixed(0.5)] {
            let m = detect_changes(&img, &img, &cfg);
            assert_eq!(m.area(), 0);
        }
    }

    #[test]
    fn fixed_threshold_flags_exactly_the_changed_pixel() {
        let a = rgb(8, 8, |_, _| [0.05, 0.05, 0.05]);
        let mut b = a.clone();
        for ch in 0..3 {
            b.data_mut()[(3 * 8 + 4) * 3 + ch] += 0.9;
        }
        let m = detect_changes(&a, &b, &DetectorConfig::fixed(0.5));
        assert_eq!(m.area(), 1);
        assert!(m.get(3, 4));
    }

    #[test]
    fn inverted_checkerboard_changes_everywhere() {
        let a = rgb(8, 8, |i, j| {
            let v = ((i + j) % 2) as f64;
            [v, v, v]
        });
        let b = rgb(8, 8, |i, j| {
            let v = 1.0 - ((i + j) % 2) as f64;
            [v, v, v]
        });
        let m = detect_changes(&a, &b, &DetectorConfig::fixed(0.5));
        let per_pixel_diff: f64 = LUMA_WEIGHTS.iter().sum();
        assert!(per_pixel_diff > 0.5);
        assert_eq!(m.area(), 64);
    }

    #[test]
    fn otsu_separates_a_bimodal_difference() {
        let a = rgb(10, 10, |_, _| [0.0, 0.0, 0.0]);
        let b = rgb(10, 10, |i, j| {
            if i < 3 && j < 3 {
                [0.9, 0.9, 0.9]
            } else {
                [0.05, 0.05, 0.05]
            }
        });
        let m = detect_changes(&a, &b, &DetectorConfig::default());
        assert_eq!(m.area(), 9);
        for i in 0..3 {
            for j in 0..3 {
                assert!(m.get(i, j));
            }
        }
    }

    #[test]
    fn majority_filter_drops_isolated_pixels_keeps_blocks() {
        let mut m = ChangeMask::empty(10, 10);
        m.set(1, 1, true);
        for i in 5..9 {
            for j in 5..9 {
                m.set(i, j, true);
            }
        }
        let f = majority3(&m);
        assert!(!f.get(1, 1), "lone pixel must be voted out");
        assert!(f.get(6, 6) && f.get(7, 7), "block interior must survive");
        assert!(!f.get(5, 5) || f.get(6, 6));
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(vec![4, 4, 3], 0.2);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b = Tensor::full(vec![4, 4, 3], 0.3);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        let zero = Tensor::zeros(vec![4, 4, 3]);
        let one = Tensor::full(vec![4, 4, 3], 1.0);
        assert!(psnr(&zero, &one).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_reference_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = Tensor::new(vec![6, 7, 3], (0..126).map(|_| rng.gen::<f64>()).collect());
            let b = Tensor::new(vec![6, 7, 3], (0..126).map(|_| rng.gen::<f64>()).collect());
            let mut se = 0.0;
            for (x, y) in a.data().iter().zip(b.data()) {
                se += (x - y) * (x - y);
            }
            let reference = 10.0 * (126.0 / se).log10();
            assert!((psnr(&a, &b) - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let a = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen::<f64>()).collect());
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-9);

        let zero = Tensor::zeros(vec![12, 12]);
        let one = Tensor::full(vec![12, 12], 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one) - expected).abs() < 1e-12);
        assert!((expected - 9.999e-5).abs() < 1e-8);

        let half = Tensor::full(vec![12, 12], 0.25);
        let shifted = Tensor::full(vec![12, 12], 0.75);
        assert!(ssim(&half, &shifted) < 1.0);
    }

    #[test]
    #[should_panic(expected = "smaller than")]
    fn ssim_rejects_subwindow_images() {
        let a = Tensor::zeros(vec![8, 8]);
        ssim(&a, &a);
    }

    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let mut kernel = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
        let mut ksum = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                ksum += *v;
            }
        }
        for row in kernel.iter_mut() {
            for v in row.iter_mut() {
                *v /= ksum;
            }
        }
        let mut total = 0.0;
        let mut windows = 0usize;
        for y in 0..=(h - SSIM_WINDOW) {
            for x in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        ma += kernel[i][j] * a[(y + i) * w + x + j];
                        mb += kernel[i][j] * b[(y + i) * w + x + j];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let da = a[(y + i) * w + x + j] - ma;
                        let db = b[(y + i) * w + x + j] - mb;
                        va += kernel[i][j] * da * da;
                        vb += kernel[i][j] * db * db;
                        cov += kernel[i][j] * da * db;
                    }
                }
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
        total / windows as f64
    }

    #[test]
    fn ssim_matches_direct_window_reference_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for trial in 0..100 {
            let (h, w) = if trial % 2 == 0 { (16, 16) } else { (12, 14) };
            let a: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
            let got = ssim(
                &Tensor::new(vec![h, w], a.clone()),
                &Tensor::new(vec![h, w], b.clone()),
            );
            let reference = ssim_oracle(&a, &b, h, w);
            assert!(
                (got - reference).abs() < 1e-9,
                "trial {trial}: {got} vs {reference}"
            );
        }
    }

    #[test]
    fn multichannel_ssim_averages_planes() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let a = rgb(12, 12, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let b = rgb(12, 12, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let whole = ssim(&a, &b);
        let mut per_channel = 0.0;
        for ch in 0..3 {
            let plane = |t: &Tensor| {
                Tensor::new(
                    vec![12, 12],
                    (0..144).map(|p| t.data()[p * 3 + ch]).collect(),
                )
            };
            per_channel += ssim(&plane(&a), &plane(&b));
        }
        assert!((whole - per_channel / 3.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "dimensions differ")]
    fn mismatched_masks_are_rejected() {
        let a = ChangeMask::empty(4, 4);
        let b = ChangeMask::empty(5, 4);
        sps(&a, &b, &TcsConfig::default());
    }
}
