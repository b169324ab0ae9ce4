//! Evaluation metrics: MSE/MAE/RMSE/PSNR/SSIM for reconstruction and
//! Dice/IoU/precision/recall/Hausdorff for segmentation, plus per-patch
//! report aggregation.
//!
//! Conventions pinned here: PSNR uses peak 2.0 (the Tanh output dynamic
//! range); aggregates are means of per-patch metrics, not metrics of pooled
//! pixels; an empty-vs-nonempty Hausdorff falls back to the patch diagonal.

use crate::error::{Error, Result};

pub const PSNR_PEAK: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion_counts(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: vec![truth.len()], got: vec![pred.len()] });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::InvalidArgument("non-binary mask input".into()));
        }
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Shared empty-denominator convention: 1.0 when both masks are empty,
/// 0.0 when only the denominator is.
fn ratio_or_convention(num: f64, den: f64, c: &ConfusionCounts) -> f64 {
    if den == 0.0 {
        if c.tp + c.fp + c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio_or_convention(2.0 * c.tp as f64, (2 * c.tp + c.fp + c.fn_) as f64, c)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio_or_convention(c.tp as f64, (c.tp + c.fp + c.fn_) as f64, c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio_or_convention(c.tp as f64, (c.tp + c.fp) as f64, c)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio_or_convention(c.tp as f64, (c.tp + c.fn_) as f64, c)
}

/// Symmetric Hausdorff distance over foreground pixel coordinates, in
/// pixels. Exactly one empty mask yields the patch diagonal; both empty
/// yields 0.
pub fn hausdorff(pred: &[u8], truth: &[u8], h: usize, w: usize) -> Result<f64> {
    if pred.len() != h * w || truth.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![pred.len()] });
    }
    let points = |m: &[u8]| -> Vec<(f64, f64)> {
        m.iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
            .collect()
    };
    let a = points(pred);
    let b = points(truth);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(((h * h + w * w) as f64).sqrt()),
        _ => {
            let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
                from.iter()
                    .map(|p| {
                        to.iter()
                            .map(|q| {
                                let (dy, dx) = (p.0 - q.0, p.1 - q.1);
                                dy * dy + dx * dx
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0f64, f64::max)
            };
            Ok(directed(&a, &b).max(directed(&b, &a)).sqrt())
        }
    }
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![b.len()], got: vec![a.len()] });
    }
    Ok(())
}

pub fn mse_m(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}

pub fn mae_m(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).abs()).sum::<f64>() / n)
}

pub fn rmse_m(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(mse_m(a, b)?.sqrt())
}

/// 10 * log10(peak^2 / mse); mse = 0 maps to +inf (callers exclude the
/// sentinel from aggregation).
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if mse < 0.0 {
        return Err(Error::InvalidArgument(format!("negative mse {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 2.0 }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode Gaussian filter over an (h, w) image.
fn gaussian_filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += kernel[i] * img[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += kernel[i] * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean windowed SSIM with a Gaussian window over valid positions.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![a.len()] });
    }
    if h < p.window || w < p.window {
        return Err(Error::InvalidArgument(format!(
            "patch ({h}, {w}) smaller than SSIM window {}",
            p.window
        )));
    }
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let a2: Vec<f64> = af.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();
    let kern = gaussian_kernel(p.window, p.sigma);
    let mu_a = gaussian_filter_valid(&af, h, w, &kern);
    let mu_b = gaussian_filter_valid(&bf, h, w, &kern);
    let e_a2 = gaussian_filter_valid(&a2, h, w, &kern);
    let e_b2 = gaussian_filter_valid(&b2, h, w, &kern);
    let e_ab = gaussian_filter_valid(&ab, h, w, &kern);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// One patch's worth of metric values.
/// PSNR can legitimately be infinite (zero MSE), which JSON cannot carry as
/// a number; round-trip it through a string in that case.
mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, serde::Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub hausdorff: f64,
}

impl PatchMetrics {
    pub fn fields(&self) -> [f64; 10] {
        [
            self.mse,
            self.mae,
            self.rmse,
            self.psnr,
            self.ssim,
            self.dice,
            self.iou,
            self.precision,
            self.recall,
            self.hausdorff,
        ]
    }
}

pub const METRIC_COLUMNS: &str = "mse,mae,rmse,psnr,ssim,dice,iou,precision,recall,hausdorff";

/// Per-patch rows plus their aggregate means for one evaluation run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub ratio: f64,
    pub rows: Vec<PatchMetrics>,
    pub aggregate: PatchMetrics,
    /// Rows with infinite PSNR (mse = 0) excluded from the PSNR mean.
    pub psnr_excluded: usize,
}

impl MetricReport {
    pub fn from_rows(ratio: f64, rows: Vec<PatchMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("metric rows"));
        }
        let n = rows.len() as f64;
        let mut agg = PatchMetrics::default();
        let mut psnr_sum = 0.0;
        let mut psnr_n = 0usize;
        for r in &rows {
            agg.mse += r.mse;
            agg.mae += r.mae;
            agg.rmse += r.rmse;
            agg.ssim += r.ssim;
            agg.dice += r.dice;
            agg.iou += r.iou;
            agg.precision += r.precision;
            agg.recall += r.recall;
            agg.hausdorff += r.hausdorff;
            if r.psnr.is_finite() {
                psnr_sum += r.psnr;
                psnr_n += 1;
            }
        }
        agg.mse /= n;
        agg.mae /= n;
        agg.rmse /= n;
        agg.ssim /= n;
        agg.dice /= n;
        agg.iou /= n;
        agg.precision /= n;
        agg.recall /= n;
        agg.hausdorff /= n;
        agg.psnr = if psnr_n > 0 { psnr_sum / psnr_n as f64 } else { f64::INFINITY };
        Ok(MetricReport {
            ratio,
            psnr_excluded: rows.len() - psnr_n,
            rows,
            aggregate: agg,
        })
    }

    /// Per-patch CSV with a trailing mean row.
    pub fn csv(&self) -> String {
        let mut out = format!("patch,{METRIC_COLUMNS}\n");
        let fmt = |m: &PatchMetrics| {
            m.fields().map(|v| format!("{v:.6}")).join(",")
        };
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", fmt(r)));
        }
        out.push_str(&format!("mean,{}\n", fmt(&self.aggregate)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_examples() {
        let ones = vec![1u8; 9];
        let zeros = vec![0u8; 9];
        let c = confusion_counts(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 9, fp: 0, fn_: 0, tn: 0 });
        let c = confusion_counts(&ones, &zeros).unwrap();
        assert_eq!(c.fp, 9);
        // pred {(0,0),(0,1)}, truth {(0,1),(1,1)} on 2x2
        let pred = vec![1, 1, 0, 0];
        let truth = vec![0, 1, 0, 1];
        let c = confusion_counts(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    #[test]
    fn confusion_rejects_non_binary() {
        assert!(confusion_counts(&[2], &[0]).is_err());
    }

    #[test]
    fn overlap_metric_examples() {
        let c = ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 };
        assert!((dice(&c) - 0.5).abs() < 1e-12);
        assert!((iou(&c) - 1.0 / 3.0).abs() < 1e-12);
        assert!((precision(&c) - 0.5).abs() < 1e-12);
        assert!((recall(&c) - 0.5).abs() < 1e-12);

        let perfect = ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 2 };
        for m in [dice(&perfect), iou(&perfect), precision(&perfect), recall(&perfect)] {
            assert_eq!(m, 1.0);
        }

        let empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 7 };
        for m in [dice(&empty), iou(&empty), precision(&empty), recall(&empty)] {
            assert_eq!(m, 1.0);
        }

        // empty prediction against non-empty truth
        let miss = ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 4 };
        assert_eq!(precision(&miss), 0.0);
        assert_eq!(dice(&miss), 0.0);
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = vec![0u8; 64];
        a[0] = 1; // (0,0)
        let mut b = vec![0u8; 64];
        b[3 * 8 + 4] = 1; // (3,4)
        assert!((hausdorff(&a, &b, 8, 8).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a, 8, 8).unwrap(), 0.0);

        // 4x4 square vs the same square shifted 2 px right on a 16x16 grid
        let mut sq = vec![0u8; 256];
        let mut sh = vec![0u8; 256];
        for y in 4..8 {
            for x in 4..8 {
                sq[y * 16 + x] = 1;
                sh[y * 16 + x + 2] = 1;
            }
        }
        assert!((hausdorff(&sq, &sh, 16, 16).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_empty_conventions() {
        let empty = vec![0u8; 64];
        let mut one = vec![0u8; 64];
        one[10] = 1;
        assert_eq!(hausdorff(&empty, &empty, 8, 8).unwrap(), 0.0);
        let d = hausdorff(&empty, &one, 8, 8).unwrap();
        assert!((d - 128f64.sqrt()).abs() < 1e-12);
        assert_eq!(d, hausdorff(&one, &empty, 8, 8).unwrap());
    }

    #[test]
    fn hausdorff_symmetric_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut a = vec![0u8; 64];
            let mut b = vec![0u8; 64];
            for y in 0..6 {
                for x in 0..6 {
                    if rng.gen_bool(0.3) {
                        a[y * 8 + x] = 1;
                    }
                    if rng.gen_bool(0.3) {
                        b[y * 8 + x] = 1;
                    }
                }
            }
            let d1 = hausdorff(&a, &b, 8, 8).unwrap();
            let d2 = hausdorff(&b, &a, 8, 8).unwrap();
            assert_eq!(d1, d2);
            // translate both by (2, 2)
            let shift = |m: &[u8]| {
                let mut out = vec![0u8; 64];
                for y in 0..6 {
                    for x in 0..6 {
                        out[(y + 2) * 8 + x + 2] = m[y * 8 + x];
                    }
                }
                out
            };
            let d3 = hausdorff(&shift(&a), &shift(&b), 8, 8).unwrap();
            assert!((d1 - d3).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_metric_examples() {
        let a = vec![0.5f32; 16];
        let b = vec![0.0f32; 16];
        assert_eq!(mse_m(&a, &a).unwrap(), 0.0);
        assert!((mse_m(&a, &b).unwrap() - 0.25).abs() < 1e-9);
        assert!((mae_m(&a, &b).unwrap() - 0.5).abs() < 1e-9);
        assert!((rmse_m(&a, &b).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rmse_squared_equals_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = rmse_m(&a, &b).unwrap();
        assert!((r * r - mse_m(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr(4.0, 2.0).unwrap()).abs() < 1e-12); // mse = peak^2
        assert!((psnr(0.25, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert!((psnr(0.001578, 2.0).unwrap() - 34.04).abs() < 0.01);
        assert!(psnr(0.0, 2.0).unwrap().is_infinite());
        assert!(psnr(-1.0, 2.0).is_err());
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let mut last = f64::INFINITY;
        for mse in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 4.0] {
            let v = psnr(mse, 2.0).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = ssim(&a, &a, 16, 16, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let a = vec![0.5f32; 16 * 16];
        let b = vec![0.25f32; 16 * 16];
        let v = ssim(&a, &b, 16, 16, &SsimParams::default()).unwrap();
        let c1 = 0.0004;
        let expect = (2.0 * 0.5 * 0.25 + c1) / (0.5 * 0.5 + 0.25 * 0.25 + c1);
        assert!((v - expect).abs() < 1e-9);
        assert!((v - 0.8002).abs() < 1e-4);
    }

    #[test]
    fn ssim_rejects_small_patch() {
        let a = vec![0.0f32; 64];
        assert!(ssim(&a, &a, 8, 8, &SsimParams::default()).is_err());
    }

    /// Direct (non-separable) windowed recomputation as an independent
    /// oracle for the separable implementation.
    fn ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> f64 {
        let kern = gaussian_kernel(p.window, p.sigma);
        let c1 = (p.k1 * p.peak).powi(2);
        let c2 = (p.k2 * p.peak).powi(2);
        let k = p.window;
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=(h - k) {
            for ox in 0..=(w - k) {
                let mut ma = 0.0;
                let mut mb = 0.0;
                let mut ea2 = 0.0;
                let mut eb2 = 0.0;
                let mut eab = 0.0;
                for y in 0..k {
                    for x in 0..k {
                        let wgt = kern[y] * kern[x];
                        let va = a[(oy + y) * w + ox + x] as f64;
                        let vb = b[(oy + y) * w + ox + x] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        ea2 += wgt * va * va;
                        eb2 += wgt * vb * vb;
                        eab += wgt * va * vb;
                    }
                }
                let va = ea2 - ma * ma;
                let vb = eb2 - mb * mb;
                let cov = eab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = SsimParams::default();
        for _ in 0..20 {
            let a: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = a
                .iter()
                .map(|&v| (v + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0))
                .collect();
            let got = ssim(&a, &b, 32, 32, &p).unwrap();
            let oracle = ssim_oracle(&a, &b, 32, 32, &p);
            assert!((got - oracle).abs() < 1e-4, "{got} vs {oracle}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    /// Brute-force recomputation of all segmentation metrics from raw pixel
    /// enumeration, independent of ConfusionCounts.
    fn seg_oracle(pred: &[u8], truth: &[u8], h: usize, w: usize) -> (f64, f64, f64, f64, f64) {
        let inter = pred.iter().zip(truth).filter(|(&p, &t)| p == 1 && t == 1).count() as f64;
        let np = pred.iter().filter(|&&v| v == 1).count() as f64;
        let nt = truth.iter().filter(|&&v| v == 1).count() as f64;
        let union = np + nt - inter;
        let conv = |num: f64, den: f64| {
            if den == 0.0 {
                if np == 0.0 && nt == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                num / den
            }
        };
        let d = conv(2.0 * inter, np + nt);
        let j = conv(inter, union);
        let p = conv(inter, np);
        let r = conv(inter, nt);
        // exhaustive Hausdorff
        let pts = |m: &[u8]| -> Vec<(i64, i64)> {
            m.iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
                .collect()
        };
        let pa = pts(pred);
        let pb = pts(truth);
        let hd = if pa.is_empty() && pb.is_empty() {
            0.0
        } else if pa.is_empty() || pb.is_empty() {
            ((h * h + w * w) as f64).sqrt()
        } else {
            let mut worst = 0.0f64;
            for (set_a, set_b) in [(&pa, &pb), (&pb, &pa)] {
                for q in set_a.iter() {
                    let mut best = f64::INFINITY;
                    for r in set_b.iter() {
                        let d2 = ((q.0 - r.0).pow(2) + (q.1 - r.1).pow(2)) as f64;
                        best = best.min(d2);
                    }
                    worst = worst.max(best);
                }
            }
            worst.sqrt()
        };
        (d, j, p, r, hd)
    }

    #[test]
    fn segmentation_metrics_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..200 {
            let density = 0.05 + 0.9 * (trial as f64 / 200.0);
            let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> {
                (0..64).map(|_| u8::from(rng.gen_bool(density))).collect()
            };
            let pred = gen(&mut rng);
            let truth = gen(&mut rng);
            let c = confusion_counts(&pred, &truth).unwrap();
            let (od, oj, op, or, ohd) = seg_oracle(&pred, &truth, 8, 8);
            assert_eq!(dice(&c), od);
            assert_eq!(iou(&c), oj);
            assert_eq!(precision(&c), op);
            assert_eq!(recall(&c), or);
            assert_eq!(hausdorff(&pred, &truth, 8, 8).unwrap(), ohd);
            // dice/iou identities
            let (d, j) = (dice(&c), iou(&c));
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-9);
            assert!(d >= j);
            // dice is the harmonic mean of precision and recall when defined
            if op + or > 0.0 && c.tp + c.fp > 0 && c.tp + c.fn_ > 0 {
                assert!((d - 2.0 * op * or / (op + or)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let rows = vec![
            PatchMetrics { mse: 0.1, psnr: 10.0, dice: 0.5, ..Default::default() },
            PatchMetrics { mse: 0.3, psnr: f64::INFINITY, dice: 0.7, ..Default::default() },
        ];
        let r = MetricReport::from_rows(0.5, rows).unwrap();
        assert!((r.aggregate.mse - 0.2).abs() < 1e-12);
        assert!((r.aggregate.dice - 0.6).abs() < 1e-12);
        // infinite psnr row excluded
        assert_eq!(r.psnr_excluded, 1);
        assert!((r.aggregate.psnr - 10.0).abs() < 1e-12);
        assert!(MetricReport::from_rows(0.0, vec![]).is_err());
    }
}
