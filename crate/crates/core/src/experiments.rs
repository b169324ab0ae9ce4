//! Ratio-sweep harness: train one model per synthetic:real ratio from the
//! same initialization and data seeds, evaluate on a shared held-out patch
//! set, and render tables plus qualitative panels.

use crate::error::{Error, Result};
use crate::localizer::{extract_patches, PatchPair, Roi};
use crate::losses::LossRecord;
use crate::metrics::MetricReport;
use crate::phantom::{generate_phantom, normalize_intensity, PhantomSpec, DEFAULT_WINDOW};
use crate::training::{self, PatchModel, RunConfig, Seeds, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TABLE1_HEADER: &str = "Ratio, MSE, MAE, RMSE, PSNR (dB), SSIM";
pub const TABLE2_HEADER: &str = "Ratio, Dice, IoU, Precision, Recall, Hausdorff (px)";
pub const SWEEP_FILE: &str = "sweep.json";
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Eval-mode patch outputs kept for qualitative rendering. The masks are
/// the thresholded seg_prob actually scored, not a second inference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelSample {
    pub ps: usize,
    pub input: Vec<f32>,
    pub recon: Vec<f32>,
    pub pred_mask: Vec<u8>,
    pub gt_mask: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: RunConfig,
    pub config_hash: u64,
    pub seeds: Seeds,
    pub ratios: Vec<f64>,
    /// One report per requested ratio, same order.
    pub reports: Vec<MetricReport>,
    /// Per-ratio qualitative samples from the shared eval set.
    pub panels: Vec<Vec<PanelSample>>,
    /// Per-ratio training logs.
    pub loss_logs: Vec<Vec<LossRecord>>,
    pub wall_time_secs: f64,
}

impl SweepResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SweepResult = serde_json::from_str(&text)?;
        if s.reports.len() != s.ratios.len() {
            return Err(Error::InvalidArgument(
                "sweep result report count does not match ratio count".into(),
            ));
        }
        Ok(s)
    }
}

/// FNV-1a over the canonical JSON form of the config.
pub fn config_hash(cfg: &RunConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cfg.to_json().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Build a patch pool from freshly generated phantom volumes. Roughly
/// three quarters of the patches are centered on jittered target-mask
/// voxels, the rest on random background, so the pool carries both
/// foreground signal and negatives. Deterministic in `seed`.
pub fn build_phantom_dataset(
    n_volumes: usize,
    patches_per_volume: usize,
    ps: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if n_volumes == 0 || patches_per_volume == 0 {
        return Err(Error::InvalidArgument("dataset dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(n_volumes * patches_per_volume);
    let jitter = (ps / 8) as i64;
    for vi in 0..n_volumes {
        let spec = PhantomSpec::default_with_seed(seed.wrapping_add(vi as u64));
        let (raw, mask) = generate_phantom(&spec)?;
        let vol = normalize_intensity(&raw, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
        let (nz, ny, nx) = vol.dims;
        // foreground voxels grouped by slice
        let mut fg: Vec<(usize, usize, usize)> = Vec::new();
        for z in 0..nz {
            let m = mask.slice_axial(z)?;
            for (i, &v) in m.data.iter().enumerate() {
                if v != 0 {
                    fg.push((z, i / nx, i % nx));
                }
            }
        }
        let half = ps / 2;
        for pi in 0..patches_per_volume {
            let background = pi % 4 == 3 || fg.is_empty();
            let (z, cy, cx) = if background {
                (rng.gen_range(0..nz), rng.gen_range(half..=ny - half), rng.gen_range(half..=nx - half))
            } else {
                let (z, y, x) = fg[rng.gen_range(0..fg.len())];
                let jy = rng.gen_range(-jitter..=jitter);
                let jx = rng.gen_range(-jitter..=jitter);
                (
                    z,
                    (y as i64 + jy).clamp(0, ny as i64 - 1) as usize,
                    (x as i64 + jx).clamp(0, nx as i64 - 1) as usize,
                )
            };
            let img = vol.slice_axial(z)?;
            let msk = mask.slice_axial(z)?;
            let rois = [Roi { center: (cy, cx), score: 1.0 }];
            pool.extend(extract_patches(&img, &msk, &rois, ps, vi as u32, z)?);
        }
    }
    Ok(pool)
}

/// Evaluate and keep the first `n_panels` patches' outputs for rendering,
/// using a single inference pass.
pub fn evaluate_with_panels(
    model: &mut dyn PatchModel,
    eval_patches: &[PatchPair],
    ratio: f64,
    n_panels: usize,
) -> Result<(MetricReport, Vec<PanelSample>)> {
    if eval_patches.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let mut rows = Vec::with_capacity(eval_patches.len());
    let mut panels = Vec::new();
    for p in eval_patches {
        let (recon, seg_prob) = model.infer(&p.image, p.ps)?;
        let pred = training::threshold_seg(&seg_prob);
        rows.push(training::score_patch(&recon, &pred, p)?);
        if panels.len() < n_panels {
            panels.push(PanelSample {
                ps: p.ps,
                input: p.image.clone(),
                recon,
                pred_mask: pred,
                gt_mask: p.mask.clone(),
            });
        }
    }
    Ok((MetricReport::from_rows(ratio, rows)?, panels))
}

/// Train one model per ratio from identical seeds (only `ratio` varies) and
/// evaluate each on the same held-out set. When `out_dir` is given, each
/// ratio gets a `ratio-X.XX/` subdirectory with losses.csv, metrics.csv and
/// checkpoints, and the sweep metadata lands in `sweep.json`.
pub fn ratio_sweep(
    base: &RunConfig,
    ratios: &[f64],
    train_pool: &[PatchPair],
    eval_pool: &[PatchPair],
    n_panels: usize,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if ratios.is_empty() {
        return Err(Error::Empty("ratio list"));
    }
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("ratio {r} outside [0, 1]")));
        }
    }
    base.validate()?;
    let start = std::time::Instant::now();
    let mut reports = Vec::with_capacity(ratios.len());
    let mut panels = Vec::with_capacity(ratios.len());
    let mut loss_logs = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let mut cfg = base.clone();
        cfg.ratio = r;
        let run_dir = out_dir.map(|d| d.join(format!("ratio-{r:.2}")));
        let mut state = TrainState::new(cfg)?;
        let log = training::train(&mut state, train_pool, run_dir.as_deref())?;
        let (report, ratio_panels) =
            evaluate_with_panels(&mut state.generator, eval_pool, r, n_panels)?;
        if let Some(dir) = &run_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, report.csv()).map_err(|e| Error::io(&path, e))?;
        }
        reports.push(report);
        panels.push(ratio_panels);
        loss_logs.push(log);
    }
    let result = SweepResult {
        config: base.clone(),
        config_hash: config_hash(base),
        seeds: base.seeds,
        ratios: ratios.to_vec(),
        reports,
        panels,
        loss_logs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        result.save(dir.join(SWEEP_FILE))?;
    }
    Ok(result)
}

/// Reconstruction table (aggregate row per ratio), paper column layout.
pub fn table1_csv(s: &SweepResult) -> String {
    let mut out = String::from(TABLE1_HEADER);
    out.push('\n');
    for r in &s.reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{:.2}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}\n",
            r.ratio, a.mse, a.mae, a.rmse, a.psnr, a.ssim
        ));
    }
    out
}

/// Segmentation table (aggregate row per ratio), paper column layout.
pub fn table2_csv(s: &SweepResult) -> String {
    let mut out = String::from(TABLE2_HEADER);
    out.push('\n');
    for r in &s.reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{:.2}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}\n",
            r.ratio, a.dice, a.iou, a.precision, a.recall, a.hausdorff
        ));
    }
    out
}

fn text_tables(s: &SweepResult) -> String {
    let mut out = String::new();
    out.push_str("Reconstruction metrics for different synthetic:real ratios\n");
    out.push_str(&table1_csv(s));
    out.push('\n');
    out.push_str("Segmentation metrics for different synthetic:real ratios\n");
    out.push_str(&table2_csv(s));
    out
}

/// Colormap for the |recon - input| heatmap: the absolute error is scaled
/// by half the intensity range (|err| / 2, clamped to [0, 1]) and mapped
/// linearly from blue (0) to red (1):
/// `R = round(255 t), G = 0, B = round(255 (1 - t))`.
pub fn heatmap_color(abs_err: f32) -> [u8; 3] {
    let t = (abs_err / 2.0).clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

fn gray(v: f32) -> [u8; 3] {
    // [-1, 1] -> [0, 255]
    let g = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

fn mask_px(v: u8) -> [u8; 3] {
    if v != 0 { [255, 255, 255] } else { [0, 0, 0] }
}

pub const PANEL_GAP: usize = 2;

/// One row of five tiles: input, reconstruction, error heatmap, predicted
/// mask, ground-truth mask, separated by 2px gray gutters.
pub fn render_panel(sample: &PanelSample) -> image::RgbImage {
    let ps = sample.ps;
    let w = (5 * ps + 4 * PANEL_GAP) as u32;
    let mut img = image::RgbImage::from_pixel(w, ps as u32, image::Rgb([128, 128, 128]));
    let tiles: [&dyn Fn(usize) -> [u8; 3]; 5] = [
        &|i| gray(sample.input[i]),
        &|i| gray(sample.recon[i]),
        &|i| heatmap_color((sample.recon[i] - sample.input[i]).abs()),
        &|i| mask_px(sample.pred_mask[i]),
        &|i| mask_px(sample.gt_mask[i]),
    ];
    for (t, tile) in tiles.iter().enumerate() {
        let x0 = t * (ps + PANEL_GAP);
        for y in 0..ps {
            for x in 0..ps {
                img.put_pixel((x0 + x) as u32, y as u32, image::Rgb(tile(y * ps + x)));
            }
        }
    }
    img
}

/// Emit `table1.csv`, `table2.csv`, `tables.txt` and per-ratio panel PNGs
/// under `out_dir`.
pub fn render_report(s: &SweepResult, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    if s.reports.is_empty() {
        return Err(Error::Empty("sweep result"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let writes = [
        ("table1.csv", table1_csv(s)),
        ("table2.csv", table2_csv(s)),
        ("tables.txt", text_tables(s)),
    ];
    for (name, content) in writes {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    }
    for (ri, samples) in s.panels.iter().enumerate() {
        if samples.is_empty() {
            continue;
        }
        let dir = out_dir.join(format!("panels-ratio-{:.2}", s.ratios[ri]));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (si, sample) in samples.iter().enumerate() {
            let path = dir.join(format!("sample-{si}.png"));
            render_panel(sample)
                .save(&path)
                .map_err(|e| Error::InvalidArgument(format!("png write {}: {e}", path.display())))?;
        }
    }
    Ok(())
}
