//! Joint optimization loop: alternating discriminator and generator
//! updates under the weighted multi-loss, with seeded determinism,
//! checkpoint/resume, and evaluation.

use crate::error::{Error, Result};
use crate::localizer::PatchPair;
use crate::losses::{self, FtlParams, LossRecord, LossWeights};
use crate::metrics::{self, MetricReport, PatchMetrics, SsimParams};
use crate::models::{Discriminator, ModelConfig, PerceptualExtractor, UnetVae};
use crate::nn::{Adam, AdamConfig, Scalar, Tensor};
use crate::synth::{self, SyntheticGenerator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const LOSS_CSV_HEADER: &str = "step,recon,perceptual,kl,seg,adv_g,adv_d,total_g";
pub const SEG_THRESHOLD: f32 = 0.5;
const CKPT_MAGIC: [u8; 4] = *b"PGPC";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr_g: 2e-4, lr_d: 2e-4, beta1: 0.5, beta2: 0.999 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { model: 1, data: 2, noise: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub ftl: FtlParams,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Synthetic fraction of each batch.
    pub ratio: f64,
    /// Epochs trained at ratio 0 before synthetic injection starts.
    pub warmup_epochs: usize,
    /// Latent perturbation temperature for synthetic generation.
    pub tau: f32,
    pub seeds: Seeds,
    /// Checkpoint every N steps (0 = only on demand).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            ftl: FtlParams::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            epochs: 1,
            ratio: 0.0,
            warmup_epochs: 1,
            tau: 1.0,
            seeds: Seeds::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        self.ftl.validate()?;
        if self.optimizer.lr_g <= 0.0 || self.optimizer.lr_d <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidArgument(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Strict parse: unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}

/// All mutable training state: both networks, optimizer moments, the step
/// counter and the RNG streams. Serializes to a checkpoint and restores
/// bit-exactly.
pub struct TrainState {
    pub config: RunConfig,
    pub generator: UnetVae<f32>,
    pub discriminator: Discriminator<f32>,
    pub perceptual: PerceptualExtractor<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.model.clone();
        model_cfg.seed = config.seeds.model;
        let generator = UnetVae::new(model_cfg.clone())?;
        let discriminator = Discriminator::new(model_cfg)?;
        let opt_g = Adam::new(AdamConfig {
            lr: config.optimizer.lr_g,
            beta1: config.optimizer.beta1,
            beta2: config.optimizer.beta2,
            eps: 1e-8,
        });
        let opt_d = Adam::new(AdamConfig {
            lr: config.optimizer.lr_d,
            beta1: config.optimizer.beta1,
            beta2: config.optimizer.beta2,
            eps: 1e-8,
        });
        Ok(TrainState {
            data_rng: ChaCha8Rng::seed_from_u64(config.seeds.data),
            noise_rng: ChaCha8Rng::seed_from_u64(config.seeds.noise),
            config,
            generator,
            discriminator,
            perceptual: PerceptualExtractor::new_frozen(),
            opt_g,
            opt_d,
            step: 0,
        })
    }
}

fn batch_tensors(batch: &[PatchPair], ps: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = batch.len();
    let mut images = Vec::with_capacity(n * ps * ps);
    let mut masks = Vec::with_capacity(n * ps * ps);
    for p in batch {
        if p.ps != ps {
            return Err(Error::ShapeMismatch { expected: vec![ps, ps], got: vec![p.ps, p.ps] });
        }
        images.extend_from_slice(&p.image);
        masks.extend(p.mask.iter().map(|&m| m as f32));
    }
    Ok((
        Tensor::from_vec(&[n, 1, ps, ps], images),
        Tensor::from_vec(&[n, 1, ps, ps], masks),
    ))
}

fn ensure_finite(value: f64, component: &'static str, step: u64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { component, step });
    }
    Ok(())
}

/// One alternating update: (1) discriminator on real images vs detached
/// reconstructions, (2) generator on the weighted total. Only the network
/// being stepped changes; the perceptual extractor never does.
pub fn train_step(state: &mut TrainState, batch: &[PatchPair]) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let ps = state.config.model.ps;
    let (images, masks) = batch_tensors(batch, ps)?;
    let n = batch.len();
    let dz = state.config.model.latent_dim;
    let w = state.config.loss_weights;
    let step = state.step;

    let eps = Tensor::<f32>::randn(&[n, dz], 1.0, &mut state.noise_rng);
    let out = state.generator.forward(&images, Some(&eps))?;

    // --- discriminator update (generator outputs detached) ---
    let real_logits = state.discriminator.forward(&images)?;
    let fake_logits = state.discriminator.forward(&out.recon)?;
    let adv_d = losses::adversarial_d_loss(&real_logits, &fake_logits)?.to_f64();
    ensure_finite(adv_d, "adv_d", step)?;
    let (grad_real, grad_fake) = losses::adversarial_d_grads(&real_logits, &fake_logits);
    state.discriminator.zero_grad();
    // fake branch caches are current; real branch re-forwarded after
    state.discriminator.backward(&grad_fake, true);
    let _ = state.discriminator.forward(&images)?;
    state.discriminator.backward(&grad_real, true);
    guard_gradients(&mut state.discriminator.params(), "adv_d", step)?;
    state.opt_d.step(&mut state.discriminator.params());

    // --- generator update ---
    let recon_loss = losses::mse_loss(&out.recon, &images)?.to_f64();
    ensure_finite(recon_loss, "recon", step)?;
    let mut grad_recon = losses::mse_grad(&out.recon, &images);
    grad_recon.scale(w.lambda_rec as f32);

    let (perc_loss, mut perc_grad) =
        losses::perceptual_loss_with_grad(&out.recon, &images, &mut state.perceptual)?;
    let perc_loss = perc_loss.to_f64();
    ensure_finite(perc_loss, "perceptual", step)?;
    perc_grad.scale(w.lambda_perc as f32);
    grad_recon.add_assign(&perc_grad);

    let fake_logits = state.discriminator.forward(&out.recon)?;
    let adv_g = losses::adversarial_g_loss(&fake_logits).to_f64();
    ensure_finite(adv_g, "adv_g", step)?;
    let mut grad_logits = losses::adversarial_g_grad(&fake_logits);
    grad_logits.scale(w.lambda_adv as f32);
    let adv_grad = state.discriminator.backward(&grad_logits, false);
    grad_recon.add_assign(&adv_grad);

    let seg_loss =
        losses::focal_tversky_loss(&out.seg_prob, &masks, &state.config.ftl)?.to_f64();
    ensure_finite(seg_loss, "seg", step)?;
    let mut grad_seg = losses::focal_tversky_grad(&out.seg_prob, &masks, &state.config.ftl);
    grad_seg.scale(w.lambda_seg as f32);

    let kl = losses::kl_loss(&out.latent.mu, &out.latent.logvar)?.to_f64();
    ensure_finite(kl, "kl", step)?;
    let (mut gmu, mut glv) = losses::kl_grads(&out.latent.mu, &out.latent.logvar);
    gmu.scale(w.lambda_kl as f32);
    glv.scale(w.lambda_kl as f32);

    state.generator.zero_grad();
    state.generator.backward(&grad_recon, &grad_seg, Some(&gmu), Some(&glv));
    guard_gradients(&mut state.generator.params(), "total_g", step)?;
    state.opt_g.step(&mut state.generator.params());

    let total_g = losses::total_generator_loss(recon_loss, perc_loss, kl, seg_loss, adv_g, &w)
        .map_err(|_| Error::NonFiniteLoss { component: "total_g", step })?;

    state.step += 1;
    Ok(LossRecord {
        recon: recon_loss,
        perceptual: perc_loss,
        kl,
        seg: seg_loss,
        adv_g,
        adv_d,
        total_g,
    })
}

fn guard_gradients(
    params: &mut [crate::nn::ParamRef<'_, f32>],
    component: &'static str,
    step: u64,
) -> Result<()> {
    for p in params {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteLoss { component, step });
        }
    }
    Ok(())
}

struct VaeGenerator<'a> {
    model: &'a mut UnetVae<f32>,
    tau: f32,
}

impl SyntheticGenerator for VaeGenerator<'_> {
    fn generate(&mut self, source: &PatchPair, seed: u64) -> Result<PatchPair> {
        self.model.generate_synthetic(source, self.tau, seed)
    }
}

/// Run `epochs x (pool / batch)` steps over the patch pool. Synthetic
/// injection starts after the warm-up epochs. Returns one LossRecord per
/// step; `out_dir`, when given, receives `losses.csv` and periodic
/// checkpoints under `checkpoints/`.
pub fn train(
    state: &mut TrainState,
    pool: &[PatchPair],
    out_dir: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    let cfg = state.config.clone();
    let batch = cfg.batch_size;
    if pool.len() < batch {
        return Err(Error::Empty("dataset (fewer patches than one batch)"));
    }
    let steps_per_epoch = pool.len() / batch;
    let start_step = state.step;
    let start_epoch = (start_step / steps_per_epoch as u64) as usize;
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::create_dir_all(dir.join("checkpoints"))
            .map_err(|e| Error::io(dir.join("checkpoints"), e))?;
    }
    for epoch in start_epoch..cfg.epochs {
        let ratio = if epoch < cfg.warmup_epochs { 0.0 } else { cfg.ratio };
        let plan = synth::plan_batch(batch, ratio)?;
        for _ in 0..steps_per_epoch {
            let seed = state.data_rng.gen::<u64>();
            let batch_patches = {
                let mut gen = VaeGenerator { model: &mut state.generator, tau: cfg.tau };
                synth::mix_batch(pool, &mut gen, &plan, seed)?
            };
            let record = train_step(state, &batch_patches)?;
            log.push(record);
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                    save_checkpoint(
                        state,
                        dir.join("checkpoints").join(format!("step-{}.ckpt", state.step)),
                    )?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        write_loss_csv(&log, start_step, &dir.join("losses.csv"))?;
        save_checkpoint(state, dir.join("checkpoints").join("final.ckpt"))?;
    }
    Ok(log)
}

pub fn write_loss_csv(log: &[LossRecord], start_step: u64, path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (i, r) in log.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            start_step + i as u64,
            r.recon,
            r.perceptual,
            r.kl,
            r.seg,
            r.adv_g,
            r.adv_d,
            r.total_g
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Inference surface for evaluation; a test double can stand in for the
/// trained network.
pub trait PatchModel {
    fn infer(&mut self, image: &[f32], ps: usize) -> Result<(Vec<f32>, Vec<f32>)>;
}

impl PatchModel for UnetVae<f32> {
    fn infer(&mut self, image: &[f32], ps: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let x = Tensor::from_vec(&[1, 1, ps, ps], image.to_vec());
        let out = self.forward(&x, None)?;
        Ok((out.recon.data, out.seg_prob.data))
    }
}

/// Threshold seg probabilities into a binary prediction.
pub fn threshold_seg(seg_prob: &[f32]) -> Vec<u8> {
    seg_prob.iter().map(|&v| u8::from(v >= SEG_THRESHOLD)).collect()
}

/// Full metric row for one patch given its eval-mode outputs. The binary
/// prediction must come from [`threshold_seg`] on the scored seg_prob so
/// reported numbers and any rendering of them agree.
pub fn score_patch(recon: &[f32], pred: &[u8], p: &PatchPair) -> Result<PatchMetrics> {
    let mse = metrics::mse_m(recon, &p.image)?;
    let c = metrics::confusion_counts(pred, &p.mask)?;
    Ok(PatchMetrics {
        mse,
        mae: metrics::mae_m(recon, &p.image)?,
        rmse: metrics::rmse_m(recon, &p.image)?,
        psnr: metrics::psnr(mse, metrics::PSNR_PEAK)?,
        ssim: metrics::ssim(recon, &p.image, p.ps, p.ps, &SsimParams::default())?,
        dice: metrics::dice(&c),
        iou: metrics::iou(&c),
        precision: metrics::precision(&c),
        recall: metrics::recall(&c),
        hausdorff: metrics::hausdorff(pred, &p.mask, p.ps, p.ps)?,
    })
}

/// Eval-mode pass over every patch: reconstruction metrics against the
/// input, segmentation metrics against the ground-truth mask at threshold
/// 0.5.
pub fn evaluate(
    model: &mut dyn PatchModel,
    eval_patches: &[PatchPair],
    ratio: f64,
) -> Result<MetricReport> {
    if eval_patches.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let mut rows = Vec::with_capacity(eval_patches.len());
    for p in eval_patches {
        let (recon, seg_prob) = model.infer(&p.image, p.ps)?;
        rows.push(score_patch(&recon, &threshold_seg(&seg_prob), p)?);
    }
    MetricReport::from_rows(ratio, rows)
}

// --- checkpointing -------------------------------------------------------

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { need: self.pos + n, got: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::InvalidArgument("bad utf-8 in checkpoint".into()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn push_rng(buf: &mut Vec<u8>, rng: &ChaCha8Rng) {
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

fn read_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn push_adam(buf: &mut Vec<u8>, opt: &Adam<f32>) {
    buf.extend_from_slice(&opt.step_count.to_le_bytes());
    buf.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
    for (name, (m, v)) in &opt.moments {
        push_tensor(buf, name, m);
        push_tensor(buf, &format!("{name}#v"), v);
    }
}

/// Versioned container: config echo, step counter, both RNG streams, both
/// optimizers' moments, and every named parameter tensor (f32 LE).
pub fn save_checkpoint(state: &mut TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config)?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&state.step.to_le_bytes());
    push_rng(&mut buf, &state.data_rng);
    push_rng(&mut buf, &state.noise_rng);
    push_adam(&mut buf, &state.opt_g);
    push_adam(&mut buf, &state.opt_d);
    let gp = state.generator.params();
    buf.extend_from_slice(&(gp.len() as u32).to_le_bytes());
    for p in &gp {
        push_tensor(&mut buf, &p.name, p.value);
    }
    drop(gp);
    let dp = state.discriminator.params();
    buf.extend_from_slice(&(dp.len() as u32).to_le_bytes());
    for p in &dp {
        push_tensor(&mut buf, &p.name, p.value);
    }
    drop(dp);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Vec<f32>)> {
    let name = r.string()?;
    let n = r.u64()? as usize;
    Ok((name, r.f32_vec(n)?))
}

fn read_adam(r: &mut Reader<'_>, cfg: AdamConfig) -> Result<Adam<f32>> {
    let mut opt = Adam::new(cfg);
    opt.step_count = r.u64()?;
    let n = r.u32()? as usize;
    for _ in 0..n {
        let (name, m) = read_tensor(r)?;
        let (_, v) = read_tensor(r)?;
        let shape = vec![m.len()];
        opt.moments.insert(
            name,
            (Tensor { shape: shape.clone(), data: m }, Tensor { shape, data: v }),
        );
    }
    Ok(opt)
}

/// Restore a TrainState from a checkpoint, validating that the stored
/// config matches `expected` exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: &RunConfig) -> Result<TrainState> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: CKPT_MAGIC, got: magic });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: RunConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    if &cfg != expected {
        return Err(Error::CheckpointMismatch(
            "stored run config differs from the requested one".into(),
        ));
    }
    let mut state = TrainState::new(cfg)?;
    state.step = r.u64()?;
    state.data_rng = read_rng(&mut r)?;
    state.noise_rng = read_rng(&mut r)?;
    let g_cfg = state.opt_g.config;
    let d_cfg = state.opt_d.config;
    state.opt_g = read_adam(&mut r, g_cfg)?;
    state.opt_d = read_adam(&mut r, d_cfg)?;
    let n = r.u32()? as usize;
    {
        let mut params = state.generator.params();
        if n != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "generator tensor count {n} != {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let (name, data) = read_tensor(&mut r)?;
            if name != p.name || data.len() != p.value.data.len() {
                return Err(Error::CheckpointMismatch(format!("tensor {name} mismatch")));
            }
            p.value.data = data;
        }
    }
    let n = r.u32()? as usize;
    {
        let mut params = state.discriminator.params();
        if n != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "discriminator tensor count {n} != {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let (name, data) = read_tensor(&mut r)?;
            if name != p.name || data.len() != p.value.data.len() {
                return Err(Error::CheckpointMismatch(format!("tensor {name} mismatch")));
            }
            p.value.data = data;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::{PatchSource, Provenance};

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                ps: 16,
                channels: [4, 6, 8],
                latent_dim: 8,
                disc_channels: [4, 6, 8],
                seed: 0,
            },
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_pool(n: usize, ps: usize) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..n)
            .map(|i| {
                let image: Vec<f32> =
                    (0..ps * ps).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
                let mut mask = vec![0u8; ps * ps];
                for y in 4..8 {
                    for x in 4..8 {
                        mask[y * ps + x] = 1;
                    }
                }
                PatchPair {
                    ps,
                    image,
                    mask,
                    source: PatchSource { volume: i as u32, z: 0, center: (8, 8) },
                    provenance: Provenance::Real,
                }
            })
            .collect()
    }

    fn weights_of(params: &mut Vec<crate::nn::ParamRef<'_, f32>>) -> Vec<Vec<u32>> {
        params
            .iter()
            .map(|p| p.value.data.iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn step_isolation_and_determinism() {
        let pool = tiny_pool(8, 16);
        let batch = &pool[..4];

        // two fresh states, one step each: identical records
        let mut s1 = TrainState::new(tiny_config()).unwrap();
        let mut s2 = TrainState::new(tiny_config()).unwrap();
        let r1 = train_step(&mut s1, batch).unwrap();
        let r2 = train_step(&mut s2, batch).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.is_finite());
        // total equals the weighted sum
        let w = s1.config.loss_weights;
        let expect = w.lambda_rec * r1.recon
            + w.lambda_perc * r1.perceptual
            + w.lambda_kl * r1.kl
            + w.lambda_seg * r1.seg
            + w.lambda_adv * r1.adv_g;
        assert!((r1.total_g - expect).abs() < 1e-6);
    }

    #[test]
    fn d_step_only_touches_discriminator_and_vice_versa() {
        // run a full train_step and verify the perceptual extractor is
        // untouched; update isolation of G vs D is covered by construction
        // (separate optimizers over disjoint parameter sets), checked here
        // through the frozen extractor and through step effects
        let pool = tiny_pool(8, 16);
        let mut s = TrainState::new(tiny_config()).unwrap();
        let frozen_before = s.perceptual.snapshot();
        let g_before = weights_of(&mut s.generator.params());
        let d_before = weights_of(&mut s.discriminator.params());
        train_step(&mut s, &pool[..4]).unwrap();
        assert_eq!(s.perceptual.snapshot(), frozen_before);
        assert_ne!(weights_of(&mut s.generator.params()), g_before);
        assert_ne!(weights_of(&mut s.discriminator.params()), d_before);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut s = TrainState::new(tiny_config()).unwrap();
        assert!(matches!(train_step(&mut s, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn train_smoke_and_full_run_determinism() {
        let pool = tiny_pool(8, 16);
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let mut s1 = TrainState::new(cfg.clone()).unwrap();
        let log1 = train(&mut s1, &pool, None).unwrap();
        assert_eq!(log1.len(), 2 * (8 / 4));
        assert!(log1.iter().all(|r| r.is_finite()));
        let mut s2 = TrainState::new(cfg).unwrap();
        let log2 = train(&mut s2, &pool, None).unwrap();
        for (a, b) in log1.iter().zip(&log2) {
            assert!((a.total_g - b.total_g).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let pool = tiny_pool(8, 16);
        let mut cfg = tiny_config();
        cfg.epochs = 4;
        cfg.ratio = 0.5;
        cfg.warmup_epochs = 1;

        // uninterrupted run
        let mut full = TrainState::new(cfg.clone()).unwrap();
        let full_log = train(&mut full, &pool, None).unwrap();

        // interrupted at the end of epoch 2 (step 4 of 8)
        let mut part = TrainState::new(cfg.clone()).unwrap();
        let mut cfg_half = cfg.clone();
        cfg_half.epochs = 2;
        part.config = cfg_half;
        let _ = train(&mut part, &pool, None).unwrap();
        part.config = cfg.clone();
        let ck = dir.path().join("mid.ckpt");
        save_checkpoint(&mut part, &ck).unwrap();

        let mut resumed = load_checkpoint(&ck, &cfg).unwrap();
        // bit-exact weight restore
        let a = weights_of(&mut part.generator.params());
        let b = weights_of(&mut resumed.generator.params());
        assert_eq!(a, b);
        assert_eq!(resumed.step, part.step);

        let tail = train(&mut resumed, &pool, None).unwrap();
        assert_eq!(tail.len(), full_log.len() - part.step as usize);
        for (a, b) in full_log[part.step as usize..].iter().zip(&tail) {
            for (x, y) in a
                .is_finite()
                .then(|| ())
                .map(|_| {
                    [
                        (a.recon, b.recon),
                        (a.perceptual, b.perceptual),
                        (a.kl, b.kl),
                        (a.seg, b.seg),
                        (a.adv_g, b.adv_g),
                        (a.adv_d, b.adv_d),
                        (a.total_g, b.total_g),
                    ]
                })
                .unwrap()
            {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let mut s = TrainState::new(cfg.clone()).unwrap();
        let ck = dir.path().join("s.ckpt");
        save_checkpoint(&mut s, &ck).unwrap();
        let mut other = cfg;
        other.batch_size = 2;
        assert!(matches!(
            load_checkpoint(&ck, &other),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let mut json: serde_json::Value =
            serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        json["bogus"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&json.to_string()).is_err());
    }

    struct IdentityModel;

    impl PatchModel for IdentityModel {
        fn infer(&mut self, image: &[f32], _ps: usize) -> Result<(Vec<f32>, Vec<f32>)> {
            Ok((image.to_vec(), vec![0.9; image.len()]))
        }
    }

    #[test]
    fn evaluate_identity_double() {
        let mut pool = tiny_pool(3, 16);
        // all-ones truth so the constant 0.9 seg output is perfect after
        // thresholding
        for p in pool.iter_mut() {
            p.mask = vec![1; 16 * 16];
        }
        let report = evaluate(&mut IdentityModel, &pool, 0.0).unwrap();
        assert_eq!(report.aggregate.mse, 0.0);
        assert!((report.aggregate.ssim - 1.0).abs() < 1e-9);
        assert_eq!(report.aggregate.dice, 1.0);
        assert_eq!(report.psnr_excluded, pool.len());
        // aggregates are means of rows
        let mean_mae: f64 =
            report.rows.iter().map(|r| r.mae).sum::<f64>() / report.rows.len() as f64;
        assert!((report.aggregate.mae - mean_mae).abs() < 1e-12);
    }

    #[test]
    fn evaluate_empty_set_rejected() {
        assert!(evaluate(&mut IdentityModel, &[], 0.0).is_err());
    }

    #[test]
    fn zero_ratio_training_never_generates() {
        // warm-up covers epoch 0; with ratio 0 no epoch ever plans synth
        let pool = tiny_pool(8, 16);
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        cfg.ratio = 0.0;
        let mut s = TrainState::new(cfg).unwrap();
        let log = train(&mut s, &pool, None).unwrap();
        assert_eq!(log.len(), 4);
        // plan_batch(4, 0) has n_synth = 0, so mix_batch cannot consult the
        // generator; provenance of every trained batch is real by
        // construction (covered in synth tests); here we just assert the
        // run completed with finite losses
        assert!(log.iter().all(|r| r.is_finite()));
    }
}
