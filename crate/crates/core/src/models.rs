//! The UNet-style VAE with dual heads, the PatchGAN discriminator, and the
//! frozen perceptual feature pyramid. Forward passes cache what their
//! explicit backward passes need; there is no hidden autodiff.

use crate::error::{Error, Result};
use crate::localizer::{PatchPair, PatchSource, Provenance};
use crate::nn::{
    concat_channels, split_channels, Conv2d, LeakyRelu, Linear, ParamRef, Relu, Scalar,
    Sigmoid, Tanh, Tensor, Upsample2x,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LOGVAR_CLAMP: f64 = 10.0;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ps: usize,
    pub channels: [usize; 3],
    pub latent_dim: usize,
    pub disc_channels: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ps: 64,
            channels: [32, 64, 128],
            latent_dim: 128,
            disc_channels: [32, 64, 128],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ps % 8 != 0 || self.ps == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must be a positive multiple of 8 (three downsamplings)",
                self.ps
            )));
        }
        if self.channels.iter().chain(&self.disc_channels).any(|&c| c == 0)
            || self.latent_dim == 0
        {
            return Err(Error::InvalidArgument("channel/latent counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.ps / 8
    }
}

#[derive(Clone, Debug)]
pub struct LatentStats<T> {
    pub mu: Tensor<T>,     // (n, d_z)
    pub logvar: Tensor<T>, // (n, d_z), clamped to [-10, 10]
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub recon: Tensor<T>,    // (n, 1, ps, ps) in [-1, 1]
    pub seg_prob: Tensor<T>, // (n, 1, ps, ps) in [0, 1]
    pub latent: LatentStats<T>,
}

/// z = mu + exp(logvar / 2) * eps, elementwise.
pub fn reparameterize<T: Scalar>(stats: &LatentStats<T>, eps: &Tensor<T>) -> Tensor<T> {
    assert_eq!(stats.mu.shape, eps.shape, "eps shape");
    let two = T::from_f64(2.0);
    let data = stats
        .mu
        .data
        .iter()
        .zip(&stats.logvar.data)
        .zip(&eps.data)
        .map(|((m, lv), e)| *m + (*lv / two).exp() * *e)
        .collect();
    Tensor { shape: stats.mu.shape.clone(), data }
}

/// UNet-style encoder/decoder VAE with skip connections and dual heads.
#[derive(Clone, Debug)]
pub struct UnetVae<T> {
    pub cfg: ModelConfig,
    enc_a: Vec<Conv2d<T>>,
    enc_a_act: Vec<LeakyRelu<T>>,
    enc_b: Vec<Conv2d<T>>,
    enc_b_act: Vec<LeakyRelu<T>>,
    fc_mu: Linear<T>,
    fc_logvar: Linear<T>,
    fc_z: Linear<T>,
    fc_z_act: LeakyRelu<T>,
    up: Upsample2x,
    dec: Vec<Conv2d<T>>,
    dec_act: Vec<LeakyRelu<T>>,
    head_rec: Conv2d<T>,
    head_rec_act: Tanh<T>,
    head_seg: Conv2d<T>,
    head_seg_act: Sigmoid<T>,
    // forward caches for the backward pass
    clamp_pass: Option<Vec<bool>>,
    last_eps: Option<Tensor<T>>,
    last_sigma: Option<Tensor<T>>,
    last_batch: usize,
}

impl<T: Scalar> UnetVae<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [c0, c1, c2] = cfg.channels;
        let bn = cfg.bottleneck_side();
        let flat = c2 * bn * bn;
        let mut enc_a = Vec::new();
        let mut enc_b = Vec::new();
        let mut prev = 1;
        for &c in &cfg.channels {
            enc_a.push(Conv2d::new(prev, c, 3, 1, 1, &mut rng));
            enc_b.push(Conv2d::new(c, c, 3, 2, 1, &mut rng));
            prev = c;
        }
        let fc_mu = Linear::new(flat, cfg.latent_dim, &mut rng);
        let fc_logvar = Linear::new(flat, cfg.latent_dim, &mut rng);
        let fc_z = Linear::new(cfg.latent_dim, flat, &mut rng);
        // dec[0] consumes upsampled bottleneck + deepest skip, and so on up
        let dec = vec![
            Conv2d::new(c2 + c2, c1, 3, 1, 1, &mut rng),
            Conv2d::new(c1 + c1, c0, 3, 1, 1, &mut rng),
            Conv2d::new(c0 + c0, c0, 3, 1, 1, &mut rng),
        ];
        let head_rec = Conv2d::new(c0, 1, 1, 1, 0, &mut rng);
        let head_seg = Conv2d::new(c0, 1, 1, 1, 0, &mut rng);
        Ok(UnetVae {
            cfg,
            enc_a,
            enc_a_act: (0..3).map(|_| LeakyRelu::new(LEAK)).collect(),
            enc_b,
            enc_b_act: (0..3).map(|_| LeakyRelu::new(LEAK)).collect(),
            fc_mu,
            fc_logvar,
            fc_z,
            fc_z_act: LeakyRelu::new(LEAK),
            up: Upsample2x,
            dec,
            dec_act: (0..3).map(|_| LeakyRelu::new(LEAK)).collect(),
            head_rec,
            head_rec_act: Tanh::new(),
            head_seg,
            head_seg_act: Sigmoid::new(),
            clamp_pass: None,
            last_eps: None,
            last_sigma: None,
            last_batch: 0,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        if c != 1 || h != self.cfg.ps || w != self.cfg.ps {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 1, self.cfg.ps, self.cfg.ps],
                got: x.shape.clone(),
            });
        }
        Ok(())
    }

    /// Three stride-2 stages; returns latent statistics and the per-stage
    /// pre-downsample features (skips), shallowest first.
    pub fn encode(&mut self, x: &Tensor<T>) -> Result<(LatentStats<T>, Vec<Tensor<T>>)> {
        self.check_input(x)?;
        let n = x.shape[0];
        self.last_batch = n;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(3);
        for k in 0..3 {
            let a = self.enc_a_act[k].forward(&self.enc_a[k].forward(&cur));
            skips.push(a.clone());
            cur = self.enc_b_act[k].forward(&self.enc_b[k].forward(&a));
        }
        let (_, c, h, w) = cur.dims4();
        let flat = Tensor::from_vec(&[n, c * h * w], cur.data);
        let mu = self.fc_mu.forward(&flat);
        let raw = self.fc_logvar.forward(&flat);
        let clamp = T::from_f64(LOGVAR_CLAMP);
        let mut pass = Vec::with_capacity(raw.numel());
        let logvar = Tensor {
            shape: raw.shape.clone(),
            data: raw
                .data
                .iter()
                .map(|&v| {
                    pass.push(v.abs() < clamp);
                    v.max(-clamp).min(clamp)
                })
                .collect(),
        };
        self.clamp_pass = Some(pass);
        Ok((LatentStats { mu, logvar }, skips))
    }

    /// Mirrored upsampling path with skip concatenation. `skips = None` is
    /// the zero-skip sentinel used for unconditional shape checks.
    pub fn decode(
        &mut self,
        z: &Tensor<T>,
        skips: Option<&[Tensor<T>]>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if z.shape.len() != 2 || z.shape[1] != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.cfg.latent_dim],
                got: z.shape.clone(),
            });
        }
        let n = z.shape[0];
        let c2 = self.cfg.channels[2];
        let bn = self.cfg.bottleneck_side();
        let flat = self.fc_z_act.forward(&self.fc_z.forward(z));
        let mut cur = Tensor::from_vec(&[n, c2, bn, bn], flat.data);
        let zero_skips;
        let skips = match skips {
            Some(s) => s,
            None => {
                zero_skips = self.zero_skips(n);
                &zero_skips
            }
        };
        for (idx, level) in (0..3).rev().enumerate() {
            let upd = self.up.forward(&cur);
            let cat = concat_channels(&upd, &skips[level]);
            cur = self.dec_act[idx].forward(&self.dec[idx].forward(&cat));
        }
        let recon = self.head_rec_act.forward(&self.head_rec.forward(&cur));
        let seg = self.head_seg_act.forward(&self.head_seg.forward(&cur));
        Ok((recon, seg))
    }

    pub fn zero_skips(&self, n: usize) -> Vec<Tensor<T>> {
        let ps = self.cfg.ps;
        self.cfg
            .channels
            .iter()
            .enumerate()
            .map(|(k, &c)| Tensor::zeros(&[n, c, ps >> k, ps >> k]))
            .collect()
    }

    /// encode -> reparameterize -> decode. `eps = None` is eval mode
    /// (deterministic, eps = 0).
    pub fn forward(&mut self, x: &Tensor<T>, eps: Option<&Tensor<T>>) -> Result<ModelOutput<T>> {
        let (latent, skips) = self.encode(x)?;
        let zeros;
        let eps = match eps {
            Some(e) => e,
            None => {
                zeros = Tensor::zeros(&latent.mu.shape);
                &zeros
            }
        };
        let two = T::from_f64(2.0);
        let sigma = latent.logvar.map(|lv| (lv / two).exp());
        self.last_eps = Some(eps.clone());
        self.last_sigma = Some(sigma);
        let z = reparameterize(&latent, eps);
        let (recon, seg_prob) = self.decode(&z, Some(&skips))?;
        Ok(ModelOutput { recon, seg_prob, latent })
    }

    /// Backpropagate head gradients (plus any extra latent gradients, e.g.
    /// from the KL term) through the whole network, accumulating parameter
    /// gradients. Must follow a `forward` call on the same input.
    pub fn backward(
        &mut self,
        grad_recon: &Tensor<T>,
        grad_seg: &Tensor<T>,
        extra_grad_mu: Option<&Tensor<T>>,
        extra_grad_logvar: Option<&Tensor<T>>,
    ) {
        let n = self.last_batch;
        let c2 = self.cfg.channels[2];
        let bn = self.cfg.bottleneck_side();

        let mut g = self.head_rec.backward(&self.head_rec_act.backward(grad_recon), true);
        g.add_assign(&self.head_seg.backward(&self.head_seg_act.backward(grad_seg), true));

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None, None, None];
        // decode ran dec[0] (deepest) .. dec[2]; reverse that order here
        for idx in (0..3).rev() {
            let level = 2 - idx;
            let gcat = self.dec[idx].backward(&self.dec_act[idx].backward(&g), true);
            let up_c = self.cfg.channels[level];
            let (gup, gskip) = split_channels(&gcat, up_c);
            skip_grads[level] = Some(gskip);
            g = self.up.backward(&gup);
        }
        let gflat = Tensor::from_vec(&[n, c2 * bn * bn], g.data);
        let gz = self.fc_z.backward(&self.fc_z_act.backward(&gflat), true);

        // reparameterization: dz/dmu = 1, dz/dlogvar = eps * sigma / 2
        let eps = self.last_eps.as_ref().expect("backward before forward");
        let sigma = self.last_sigma.as_ref().unwrap();
        let half = T::from_f64(0.5);
        let mut gmu = gz.clone();
        if let Some(extra) = extra_grad_mu {
            gmu.add_assign(extra);
        }
        let mut glv = Tensor {
            shape: gz.shape.clone(),
            data: gz
                .data
                .iter()
                .zip(&eps.data)
                .zip(&sigma.data)
                .map(|((g, e), s)| *g * *e * *s * half)
                .collect(),
        };
        if let Some(extra) = extra_grad_logvar {
            glv.add_assign(extra);
        }
        let pass = self.clamp_pass.as_ref().unwrap();
        for (gv, &p) in glv.data.iter_mut().zip(pass) {
            if !p {
                *gv = T::zero();
            }
        }

        let mut gbot = self.fc_mu.backward(&gmu, true);
        gbot.add_assign(&self.fc_logvar.backward(&glv, true));
        let mut gcur = Tensor::from_vec(&[n, c2, bn, bn], gbot.data);
        for k in (0..3).rev() {
            let mut ga = self.enc_b[k].backward(&self.enc_b_act[k].backward(&gcur), true);
            ga.add_assign(skip_grads[k].as_ref().unwrap());
            gcur = self.enc_a[k].backward(&self.enc_a_act[k].backward(&ga), true);
        }
    }

    pub fn params<'a>(&'a mut self) -> Vec<ParamRef<'a, T>> {
        let mut out = Vec::new();
        for (k, c) in self.enc_a.iter_mut().enumerate() {
            c.params(&format!("enc.{k}.a"), &mut out);
        }
        for (k, c) in self.enc_b.iter_mut().enumerate() {
            c.params(&format!("enc.{k}.b"), &mut out);
        }
        self.fc_mu.params("fc_mu", &mut out);
        self.fc_logvar.params("fc_logvar", &mut out);
        self.fc_z.params("fc_z", &mut out);
        for (k, c) in self.dec.iter_mut().enumerate() {
            c.params(&format!("dec.{k}"), &mut out);
        }
        self.head_rec.params("head_rec", &mut out);
        self.head_seg.params("head_seg", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.fill(T::zero());
        }
    }
}

impl UnetVae<f32> {
    /// Latent-perturbation synthesis: z = mu + tau * sigma * eps with fresh
    /// seeded noise, decoded against the source patch's own skips. The
    /// pseudo-mask is the segmentation head output thresholded at 0.5.
    pub fn generate_synthetic(
        &mut self,
        source: &PatchPair,
        tau: f32,
        seed: u64,
    ) -> Result<PatchPair> {
        let ps = source.ps;
        let x = Tensor::from_vec(&[1, 1, ps, ps], source.image.clone());
        let (latent, skips) = self.encode(&x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::<f32>::randn(&latent.mu.shape, 1.0, &mut rng);
        let z = Tensor {
            shape: latent.mu.shape.clone(),
            data: latent
                .mu
                .data
                .iter()
                .zip(&latent.logvar.data)
                .zip(&eps.data)
                .map(|((m, lv), e)| m + tau * (lv / 2.0).exp() * e)
                .collect(),
        };
        let (recon, seg) = self.decode(&z, Some(&skips))?;
        Ok(PatchPair {
            ps,
            image: recon.data,
            mask: seg.data.iter().map(|&p| u8::from(p >= 0.5)).collect(),
            source: PatchSource { volume: source.source.volume, z: source.source.z, center: source.source.center },
            provenance: Provenance::Synthetic,
        })
    }
}

/// PatchGAN discriminator: three stride-2 convs plus a final conv to a raw
/// logit grid (ps/8 per side), no output activation.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub cfg: ModelConfig,
    convs: Vec<Conv2d<T>>,
    acts: Vec<LeakyRelu<T>>,
    final_conv: Conv2d<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xd15c));
        let mut convs = Vec::new();
        let mut prev = 1;
        for &c in &cfg.disc_channels {
            convs.push(Conv2d::new(prev, c, 3, 2, 1, &mut rng));
            prev = c;
        }
        let final_conv = Conv2d::new(prev, 1, 3, 1, 1, &mut rng);
        Ok(Discriminator {
            cfg,
            convs,
            acts: (0..3).map(|_| LeakyRelu::new(LEAK)).collect(),
            final_conv,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4();
        if c != 1 || h != self.cfg.ps || w != self.cfg.ps {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 1, self.cfg.ps, self.cfg.ps],
                got: x.shape.clone(),
            });
        }
        let mut cur = x.clone();
        for k in 0..3 {
            cur = self.acts[k].forward(&self.convs[k].forward(&cur));
        }
        Ok(self.final_conv.forward(&cur))
    }

    /// Returns the input-image gradient. With `accumulate_params = false`
    /// the discriminator only relays adversarial gradients to the
    /// generator.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, accumulate_params: bool) -> Tensor<T> {
        let mut g = self.final_conv.backward(grad_logits, accumulate_params);
        for k in (0..3).rev() {
            g = self.convs[k].backward(&self.acts[k].backward(&g), accumulate_params);
        }
        g
    }

    pub fn params<'a>(&'a mut self) -> Vec<ParamRef<'a, T>> {
        let mut out = Vec::new();
        for (k, c) in self.convs.iter_mut().enumerate() {
            c.params(&format!("disc.{k}"), &mut out);
        }
        self.final_conv.params("disc.final", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.fill(T::zero());
        }
    }
}

const PERCEPTUAL_SEED: u64 = 0x7e9c_ef01_2345_6789;

/// Frozen three-level conv pyramid standing in for pretrained VGG features.
/// Weights come from a hard-coded seed and are never updated.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    conv1: Conv2d<T>,
    act1: Relu<T>,
    conv2: Conv2d<T>,
    act2: Relu<T>,
    conv3: Conv2d<T>,
    act3: Relu<T>,
}

impl<T: Scalar> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new_frozen()
    }
}

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new_frozen() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        PerceptualExtractor {
            conv1: Conv2d::new(1, 8, 3, 1, 1, &mut rng),
            act1: Relu::new(),
            conv2: Conv2d::new(8, 16, 3, 2, 1, &mut rng),
            act2: Relu::new(),
            conv3: Conv2d::new(16, 32, 3, 2, 1, &mut rng),
            act3: Relu::new(),
        }
    }

    /// Three feature maps at full, half and quarter resolution.
    pub fn forward(&mut self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let f1 = self.act1.forward(&self.conv1.forward(x));
        let f2 = self.act2.forward(&self.conv2.forward(&f1));
        let f3 = self.act3.forward(&self.conv3.forward(&f2));
        vec![f1, f2, f3]
    }

    /// Chain per-level gradient seeds back to the input. Parameters never
    /// accumulate gradients (frozen contract).
    pub fn backward_to_input(&mut self, seeds: &[Tensor<T>]) -> Tensor<T> {
        assert_eq!(seeds.len(), 3);
        let g3 = self.conv3.backward(&self.act3.backward(&seeds[2]), false);
        let mut g2 = seeds[1].clone();
        g2.add_assign(&g3);
        let g2 = self.conv2.backward(&self.act2.backward(&g2), false);
        let mut g1 = seeds[0].clone();
        g1.add_assign(&g2);
        self.conv1.backward(&self.act1.backward(&g1), false)
    }

    /// Bit patterns of every weight, for frozen-ness assertions.
    pub fn snapshot(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for t in [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
        ] {
            out.extend(t.data.iter().map(|v| Scalar::to_f64(*v).to_bits()));
        }
        out
    }
}
