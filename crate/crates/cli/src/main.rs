//! Command-line front end for the prompt-guided patch pipeline.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pgseg_core::experiments::{self, SweepResult};
use pgseg_core::localizer::{
    cosine_similarity, embed_image_grid, extract_patches, select_roi, PatchPair, Roi,
    SimilarityMap, ToyEmbedder, DEFAULT_CELL, DEFAULT_PATCH, DEFAULT_STRIDE,
};
use pgseg_core::phantom::{
    generate_phantom, normalize_intensity, MaskVolume, PhantomSpec, Volume, DEFAULT_WINDOW,
};
use pgseg_core::training::{self, RunConfig, TrainState};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pgseg",
    about = "Prompt-guided patch reconstruction & segmentation pipeline on phantom CT volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom volume operations.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Prompt-driven ROI localization and patch extraction.
    Localize(LocalizeArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Ratio-sweep study: one training run per synthetic:real ratio.
    Sweep(SweepArgs),
    /// Render tables and qualitative panels from a finished sweep.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate phantom volume/mask pairs.
    Generate(PhantomGenerateArgs),
}

#[derive(Args)]
struct PhantomGenerateArgs {
    /// Phantom spec JSON; omit for the built-in default spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of volumes; seeds increment from the spec's seed.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Patches to keep (best-scoring ROIs across all slices).
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    patch_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory of .pgpp patch files; every 5th file (by name order) is
    /// held out for the final metrics.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated ratios in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    ratios: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional training patch dir; phantom patches are generated from the
    /// config seeds when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optional held-out patch dir; generated when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Phantom volumes per generated pool.
    #[arg(long, default_value_t = 8)]
    volumes: usize,
    /// Patches per generated volume.
    #[arg(long, default_value_t = 12)]
    patches_per_volume: usize,
    /// Qualitative panel samples per ratio.
    #[arg(long, default_value_t = 4)]
    panels: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep output directory (contains sweep.json).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom(PhantomCmd::Generate(a)) => phantom_generate(a),
        Command::Localize(a) => localize(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn phantom_generate(a: PhantomGenerateArgs) -> Result<()> {
    let base = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => PhantomSpec::default_with_seed(0),
    };
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let mut spec = base.clone();
        spec.seed = base.seed.wrapping_add(i as u64);
        let (vol, mask) = generate_phantom(&spec)?;
        vol.save(a.out.join(format!("vol-{i:03}.pgpv")))?;
        mask.save(a.out.join(format!("mask-{i:03}.pgpv")))?;
    }
    println!("wrote {} volume/mask pairs to {}", a.count, a.out.display());
    Ok(())
}

fn localize(a: LocalizeArgs) -> Result<()> {
    let vol = Volume::load(&a.volume)?;
    let mask = MaskVolume::load(&a.mask)?;
    if vol.dims != mask.dims {
        bail!("volume dims {:?} != mask dims {:?}", vol.dims, mask.dims);
    }
    let norm = normalize_intensity(&vol, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
    let embedder = ToyEmbedder::default();
    let prompt_vec = pgseg_core::localizer::TextEmbedder::embed_text(&embedder, &a.prompt)?;

    // score every slice's grid cells against the prompt, keep the global
    // best k after per-slice non-maximum suppression
    let mut scored: Vec<(f32, usize, Roi)> = Vec::new();
    for z in 0..norm.dims.0 {
        let slice = norm.slice_axial(z)?;
        let grid = embed_image_grid(&slice, DEFAULT_CELL, DEFAULT_STRIDE, &embedder)?;
        let mut values = Vec::with_capacity(grid.gy * grid.gx);
        for cell in &grid.vectors {
            values.push(cosine_similarity(&prompt_vec, cell)?);
        }
        let map = SimilarityMap {
            gy: grid.gy,
            gx: grid.gx,
            cell: DEFAULT_CELL,
            stride: DEFAULT_STRIDE,
            values,
        };
        for roi in select_roi(&map, a.k, f32::NEG_INFINITY, DEFAULT_CELL as f64 / 2.0) {
            scored.push((roi.score, z, roi));
        }
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    scored.truncate(a.k);

    std::fs::create_dir_all(&a.out)?;
    let mut written = 0usize;
    for (i, (score, z, roi)) in scored.iter().enumerate() {
        let img = norm.slice_axial(*z)?;
        let msk = mask.slice_axial(*z)?;
        let patches = extract_patches(&img, &msk, std::slice::from_ref(roi), a.patch_size, 0, *z)?;
        for p in patches {
            let path = a.out.join(format!("patch-{i:03}.pgpp"));
            p.save(&path)?;
            println!(
                "patch-{i:03}.pgpp  z={z} center=({}, {}) score={score:.4}",
                p.source.center.0, p.source.center.1
            );
            written += 1;
        }
    }
    println!("wrote {written} patches to {}", a.out.display());
    Ok(())
}

fn load_patch_dir(dir: &Path) -> Result<Vec<(String, PatchPair)>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgpp"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .pgpp files in {}", dir.display());
    }
    entries
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, PatchPair::load(&p)?))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_json(
        &std::fs::read_to_string(&a.config)
            .with_context(|| format!("reading {}", a.config.display()))?,
    )?;
    let all = load_patch_dir(&a.data)?;
    let mut train_pool = Vec::new();
    let mut eval_pool = Vec::new();
    for (i, (_, p)) in all.into_iter().enumerate() {
        if i % 5 == 4 {
            eval_pool.push(p);
        } else {
            train_pool.push(p);
        }
    }
    if eval_pool.is_empty() {
        bail!("dataset too small to hold out an eval split");
    }
    let mut state = TrainState::new(cfg.clone())?;
    let log = training::train(&mut state, &train_pool, Some(&a.out))?;
    let report = training::evaluate(&mut state.generator, &eval_pool, cfg.ratio)?;
    std::fs::write(a.out.join("metrics.csv"), report.csv())?;
    println!(
        "trained {} steps on {} patches ({} held out); final total_g {:.6}, eval dice {:.4}",
        log.len(),
        train_pool.len(),
        eval_pool.len(),
        log.last().map_or(f64::NAN, |r| r.total_g),
        report.aggregate.dice
    );
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().with_context(|| format!("bad ratio {t:?}"))?;
            if !(0.0..=1.0).contains(&v) {
                bail!("ratio {v} outside [0, 1]");
            }
            Ok(v)
        })
        .collect()
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = RunConfig::from_json(
        &std::fs::read_to_string(&a.config)
            .with_context(|| format!("reading {}", a.config.display()))?,
    )?;
    let ratios = parse_ratios(&a.ratios)?;
    let ps = cfg.model.ps;
    let train_pool = match &a.data {
        Some(dir) => load_patch_dir(dir)?.into_iter().map(|(_, p)| p).collect(),
        None => experiments::build_phantom_dataset(
            a.volumes,
            a.patches_per_volume,
            ps,
            cfg.seeds.data,
        )?,
    };
    let eval_pool = match &a.eval_data {
        Some(dir) => load_patch_dir(dir)?.into_iter().map(|(_, p)| p).collect(),
        None => experiments::build_phantom_dataset(
            a.volumes.div_ceil(2),
            a.patches_per_volume,
            ps,
            // disjoint from the training pool's volume seeds
            cfg.seeds.data.wrapping_add(0x5eed_0000_0000_0000),
        )?,
    };
    let result =
        experiments::ratio_sweep(&cfg, &ratios, &train_pool, &eval_pool, a.panels, Some(&a.out))?;
    experiments::render_report(&result, &a.out)?;
    print!("{}", experiments::table1_csv(&result));
    print!("{}", experiments::table2_csv(&result));
    println!("sweep outputs in {}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let result = SweepResult::load(a.input.join(experiments::SWEEP_FILE))?;
    experiments::render_report(&result, &a.out)?;
    println!("report written to {}", a.out.display());
    Ok(())
}
