//! Training objectives: pixel MSE, perceptual distance over frozen
//! features, KL prior term, Focal Tversky segmentation loss, BCE-with-logits
//! adversarial losses, and the weighted generator total. Each loss ships
//! with its analytic gradient.

use crate::error::{Error, Result};
use crate::models::PerceptualExtractor;
use crate::nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_kl: f64,
    pub lambda_seg: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_perc: 0.1,
            lambda_kl: 0.001,
            lambda_seg: 1.0,
            lambda_adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rec,
            self.lambda_perc,
            self.lambda_kl,
            self.lambda_seg,
            self.lambda_adv,
        ];
        if all.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtlParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for FtlParams {
    fn default() -> Self {
        FtlParams { alpha: 0.7, beta: 0.3, gamma: 0.75, smooth: 1.0 }
    }
}

impl FtlParams {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("alpha + beta must equal 1".into()));
        }
        if self.gamma <= 0.0 || self.smooth <= 0.0 {
            return Err(Error::InvalidArgument("gamma and smooth must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step values of every loss component plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub recon: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub seg: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.perceptual, self.kl, self.seg, self.adv_g, self.adv_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { expected: a.shape.clone(), got: b.shape.clone() });
    }
    Ok(())
}

pub fn mse_loss<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_shapes(recon, target)?;
    let n = T::from_f64(recon.numel() as f64);
    let mut acc = T::zero();
    for (r, t) in recon.data.iter().zip(&target.data) {
        let d = *r - *t;
        acc += d * d;
    }
    Ok(acc / n)
}

pub fn mse_grad<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(recon.numel() as f64);
    let two = T::from_f64(2.0);
    let data = recon
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| two * (*r - *t) / n)
        .collect();
    Tensor { shape: recon.shape.clone(), data }
}

/// Mean squared feature distance averaged over extractor levels.
pub fn perceptual_loss<T: Scalar>(
    recon: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &mut PerceptualExtractor<T>,
) -> Result<T> {
    check_shapes(recon, target)?;
    let feats_t = extractor.forward(target);
    let feats_r = extractor.forward(recon);
    let levels = T::from_f64(feats_r.len() as f64);
    let mut acc = T::zero();
    for (fr, ft) in feats_r.iter().zip(&feats_t) {
        acc += mse_loss(fr, ft)?;
    }
    Ok(acc / levels)
}

/// Perceptual loss plus its gradient with respect to `recon`. The extractor
/// stays frozen: its parameters never accumulate gradients.
pub fn perceptual_loss_with_grad<T: Scalar>(
    recon: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &mut PerceptualExtractor<T>,
) -> Result<(T, Tensor<T>)> {
    check_shapes(recon, target)?;
    let feats_t = extractor.forward(target);
    // recon forward last so backward caches belong to the recon pass
    let feats_r = extractor.forward(recon);
    let levels = feats_r.len();
    let lv = T::from_f64(levels as f64);
    let mut value = T::zero();
    let mut seeds = Vec::with_capacity(levels);
    for (fr, ft) in feats_r.iter().zip(&feats_t) {
        value += mse_loss(fr, ft)?;
        let mut g = mse_grad(fr, ft);
        g.scale(T::one() / lv);
        seeds.push(g);
    }
    let grad = extractor.backward_to_input(&seeds);
    Ok((value / lv, grad))
}

/// Mean per-dimension KL divergence to the standard normal:
/// (1/d) * sum_i 0.5 * (mu_i^2 + exp(lv_i) - 1 - lv_i).
pub fn kl_loss<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<T> {
    check_shapes(mu, logvar)?;
    let d = T::from_f64(mu.numel() as f64);
    let half = T::from_f64(0.5);
    let mut acc = T::zero();
    for (m, lv) in mu.data.iter().zip(&logvar.data) {
        acc += half * (*m * *m + lv.exp() - T::one() - *lv);
    }
    Ok(acc / d)
}

pub fn kl_grads<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let d = T::from_f64(mu.numel() as f64);
    let half = T::from_f64(0.5);
    let gmu = mu.map(|m| m / d);
    let glv = logvar.map(|lv| half * (lv.exp() - T::one()) / d);
    (gmu, glv)
}

fn tversky_terms<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> (T, T, T) {
    let mut tp = T::zero();
    let mut fn_ = T::zero();
    let mut fp = T::zero();
    for (p, t) in probs.data.iter().zip(&target.data) {
        tp += *p * *t;
        fn_ += (T::one() - *p) * *t;
        fp += *p * (T::one() - *t);
    }
    (tp, fn_, fp)
}

/// Focal Tversky loss: (1 - TI)^gamma with
/// TI = (TP + s) / (TP + alpha*FN + beta*FP + s).
pub fn focal_tversky_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    p: &FtlParams,
) -> Result<T> {
    check_shapes(probs, target)?;
    p.validate()?;
    let (tp, fn_, fp) = tversky_terms(probs, target);
    let s = T::from_f64(p.smooth);
    let ti = (tp + s) / (tp + T::from_f64(p.alpha) * fn_ + T::from_f64(p.beta) * fp + s);
    Ok((T::one() - ti).max(T::zero()).powf(T::from_f64(p.gamma)))
}

/// Gradient with respect to `probs`.
pub fn focal_tversky_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    p: &FtlParams,
) -> Tensor<T> {
    let (tp, fn_, fp) = tversky_terms(probs, target);
    let s = T::from_f64(p.smooth);
    let alpha = T::from_f64(p.alpha);
    let beta = T::from_f64(p.beta);
    let gamma = T::from_f64(p.gamma);
    let num = tp + s;
    let den = tp + alpha * fn_ + beta * fp + s;
    let ti = num / den;
    let one_minus = (T::one() - ti).max(T::from_f64(1e-12));
    let outer = -gamma * one_minus.powf(gamma - T::one());
    let data = probs
        .data
        .iter()
        .zip(&target.data)
        .map(|(_, t)| {
            // dTP/dp = t, dFN/dp = -t, dFP/dp = 1 - t
            let dnum = *t;
            let dden = *t - alpha * *t + beta * (T::one() - *t);
            let dti = (dnum * den - num * dden) / (den * den);
            outer * dti
        })
        .collect();
    Tensor { shape: probs.shape.clone(), data }
}

/// Numerically stable mean BCE-with-logits against a constant label.
fn bce_with_logits_mean<T: Scalar>(logits: &Tensor<T>, label: f64) -> T {
    let n = T::from_f64(logits.numel() as f64);
    let y = T::from_f64(label);
    let mut acc = T::zero();
    for &x in &logits.data {
        // softplus(x) - y*x, with softplus in the stable max form
        let softplus = x.max(T::zero()) + (-(x.abs())).exp().ln_1p();
        acc += softplus - y * x;
    }
    acc / n
}

fn bce_with_logits_grad<T: Scalar>(logits: &Tensor<T>, label: f64) -> Tensor<T> {
    let n = T::from_f64(logits.numel() as f64);
    let y = T::from_f64(label);
    let data = logits
        .data
        .iter()
        .map(|&x| {
            let sig = T::one() / (T::one() + (-x).exp());
            (sig - y) / n
        })
        .collect();
    Tensor { shape: logits.shape.clone(), data }
}

/// Discriminator objective: real logits toward label 1, fake toward 0; the
/// two mean BCE terms are summed.
pub fn adversarial_d_loss<T: Scalar>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> Result<T> {
    check_shapes(real_logits, fake_logits)?;
    Ok(bce_with_logits_mean(real_logits, 1.0) + bce_with_logits_mean(fake_logits, 0.0))
}

/// Gradients with respect to (real, fake) logits.
pub fn adversarial_d_grads<T: Scalar>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    (
        bce_with_logits_grad(real_logits, 1.0),
        bce_with_logits_grad(fake_logits, 0.0),
    )
}

/// Non-saturating generator objective: fake logits toward label 1.
pub fn adversarial_g_loss<T: Scalar>(fake_logits: &Tensor<T>) -> T {
    bce_with_logits_mean(fake_logits, 1.0)
}

pub fn adversarial_g_grad<T: Scalar>(fake_logits: &Tensor<T>) -> Tensor<T> {
    bce_with_logits_grad(fake_logits, 1.0)
}

/// Weighted sum of the generator-side components.
pub fn total_generator_loss(
    recon: f64,
    perceptual: f64,
    kl: f64,
    seg: f64,
    adv_g: f64,
    w: &LossWeights,
) -> Result<f64> {
    for (name, v) in [
        ("recon", recon),
        ("perceptual", perceptual),
        ("kl", kl),
        ("seg", seg),
        ("adv_g", adv_g),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite {name} component")));
        }
    }
    Ok(w.lambda_rec * recon
        + w.lambda_perc * perceptual
        + w.lambda_kl * kl
        + w.lambda_seg * seg
        + w.lambda_adv * adv_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PerceptualExtractor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f64>) -> Tensor<f64> {
        let n = data.len();
        Tensor::from_vec(&[n], data)
    }

    #[test]
    fn mse_hand_examples() {
        assert_eq!(mse_loss(&t(vec![1.0, 2.0]), &t(vec![1.0, 2.0])).unwrap(), 0.0);
        assert!((mse_loss(&t(vec![0.0, 1.0]), &t(vec![1.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (mse_loss(&t(vec![0.5, 0.5]), &t(vec![0.0, 1.0])).unwrap() - 0.25).abs() < 1e-12
        );
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(mse_loss(&t(vec![1.0]), &t(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn kl_hand_examples() {
        assert_eq!(kl_loss(&t(vec![0.0]), &t(vec![0.0])).unwrap(), 0.0);
        assert!((kl_loss(&t(vec![1.0]), &t(vec![0.0])).unwrap() - 0.5).abs() < 1e-12);
        let expect = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_loss(&t(vec![0.0]), &t(vec![1.0])).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ftl_hand_examples() {
        let p = FtlParams::default();
        let probs = t(vec![1.0, 0.0, 1.0]); // TP=1, FN=1, FP=1
        let target = t(vec![1.0, 1.0, 0.0]);
        let ti = (1.0 + 1.0) / (1.0 + 0.7 + 0.3 + 1.0);
        let expect = (1.0 - ti as f64).powf(0.75);
        assert!((focal_tversky_loss(&probs, &target, &p).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 0.4387).abs() < 1e-3);

        // perfect prediction
        let m = t(vec![1.0, 0.0, 1.0]);
        assert_eq!(focal_tversky_loss(&m, &m, &p).unwrap(), 0.0);
        // both empty, smoothing keeps TI = 1
        let z = t(vec![0.0, 0.0]);
        assert_eq!(focal_tversky_loss(&z, &z, &p).unwrap(), 0.0);
    }

    #[test]
    fn ftl_permutation_invariant() {
        let p = FtlParams::default();
        let probs = t(vec![0.9, 0.1, 0.4, 0.7]);
        let target = t(vec![1.0, 0.0, 1.0, 0.0]);
        let a = focal_tversky_loss(&probs, &target, &p).unwrap();
        let perm = [2usize, 0, 3, 1];
        let probs_p = t(perm.iter().map(|&i| probs.data[i]).collect());
        let target_p = t(perm.iter().map(|&i| target.data[i]).collect());
        let b = focal_tversky_loss(&probs_p, &target_p, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adversarial_hand_examples() {
        let zeros = t(vec![0.0, 0.0]);
        let d = adversarial_d_loss(&zeros, &zeros).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let high = t(vec![20.0, 20.0]);
        let low = t(vec![-20.0, -20.0]);
        assert!(adversarial_d_loss(&high, &low).unwrap() < 1e-6);

        assert!((adversarial_g_loss(&zeros) - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(adversarial_g_loss(&high) < 1e-6);
        assert!((adversarial_g_loss(&low) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn adversarial_d_matches_scalar_bce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.5, &mut rng);
        let fake = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.5, &mut rng);
        let got = adversarial_d_loss(&real, &fake).unwrap();
        // independent scalar oracle: -ln sigma(x) for real, -ln(1-sigma(x)) for fake
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let n = real.numel() as f64;
        let oracle: f64 = real.data.iter().map(|&x| -(sig(x).ln())).sum::<f64>() / n
            + fake.data.iter().map(|&x| -((1.0 - sig(x)).ln())).sum::<f64>() / n;
        assert!((got - oracle).abs() < 1e-6);
    }

    #[test]
    fn adversarial_d_monotone_in_real_logits() {
        let real = t(vec![0.3, -0.2]);
        let fake = t(vec![0.1, 0.4]);
        let base = adversarial_d_loss(&real, &fake).unwrap();
        let better = t(vec![0.4, -0.1]);
        assert!(adversarial_d_loss(&better, &fake).unwrap() < base);
    }

    #[test]
    fn total_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_generator_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let only_rec = LossWeights {
            lambda_rec: 1.0,
            lambda_perc: 0.0,
            lambda_kl: 0.0,
            lambda_seg: 0.0,
            lambda_adv: 0.0,
        };
        assert_eq!(total_generator_loss(0.3, 9.0, 9.0, 9.0, 9.0, &only_rec).unwrap(), 0.3);
        let got = total_generator_loss(0.1, 0.2, 1.0, 0.4, 0.7, &w).unwrap();
        assert!((got - 0.528).abs() < 1e-12);
        assert!(total_generator_loss(f64::NAN, 0.0, 0.0, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn perceptual_zero_on_identical_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ext = PerceptualExtractor::<f64>::new_frozen();
        let a = Tensor::randn(&[1, 1, 16, 16], 0.5, &mut rng);
        let b = Tensor::randn(&[1, 1, 16, 16], 0.5, &mut rng);
        assert!(perceptual_loss(&a, &a, &mut ext).unwrap().abs() < 1e-12);
        assert!(perceptual_loss(&a, &b, &mut ext).unwrap() >= 0.0);
    }

    #[test]
    fn perceptual_matches_straight_line_oracle() {
        // Independent recomputation: run the extractor level by level and
        // average plain MSEs without the fused grad path.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ext = PerceptualExtractor::<f64>::new_frozen();
        let a = Tensor::randn(&[1, 1, 16, 16], 0.5, &mut rng);
        let b = Tensor::randn(&[1, 1, 16, 16], 0.5, &mut rng);
        let fa = ext.forward(&a);
        let fb = ext.forward(&b);
        let mut oracle = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let n = x.numel() as f64;
            oracle += x
                .data
                .iter()
                .zip(&y.data)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                / n;
        }
        oracle /= fa.len() as f64;
        let got = perceptual_loss(&a, &b, &mut ext).unwrap();
        assert!((got - oracle).abs() < 1e-6);
    }

    fn fd_check(
        value: impl Fn(&Tensor<f64>) -> f64,
        grad: &Tensor<f64>,
        x: &Tensor<f64>,
        tol: f64,
    ) {
        let eps = 1e-5;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (value(&xp) - value(&xm)) / (2.0 * eps);
            let denom = fd.abs().max(grad.data[i].abs()).max(1e-6);
            assert!(
                (fd - grad.data[i]).abs() / denom < tol,
                "component {i}: analytic {} vs fd {fd}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..10 {
            let x = Tensor::<f64>::randn(&[6], 0.7, &mut rng);
            let y = Tensor::<f64>::randn(&[6], 0.7, &mut rng);
            fd_check(|v| mse_loss(v, &y).unwrap(), &mse_grad(&x, &y), &x, 1e-4);

            let mu = Tensor::<f64>::randn(&[5], 0.7, &mut rng);
            let lv = Tensor::<f64>::randn(&[5], 0.7, &mut rng);
            let (gmu, glv) = kl_grads(&mu, &lv);
            fd_check(|v| kl_loss(v, &lv).unwrap(), &gmu, &mu, 1e-4);
            fd_check(|v| kl_loss(&mu, v).unwrap(), &glv, &lv, 1e-4);

            let p = FtlParams::default();
            let probs = Tensor::<f64>::from_vec(
                &[8],
                (0..8).map(|i| 0.1 + 0.08 * ((i + trial) as f64)).collect(),
            );
            let target =
                Tensor::<f64>::from_vec(&[8], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
            fd_check(
                |v| focal_tversky_loss(v, &target, &p).unwrap(),
                &focal_tversky_grad(&probs, &target, &p),
                &probs,
                1e-4,
            );

            let real = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let fake = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let (gr, gf) = adversarial_d_grads(&real, &fake);
            fd_check(|v| adversarial_d_loss(v, &fake).unwrap(), &gr, &real, 1e-4);
            fd_check(|v| adversarial_d_loss(&real, v).unwrap(), &gf, &fake, 1e-4);
            fd_check(|v| adversarial_g_loss(v), &adversarial_g_grad(&fake), &fake, 1e-4);
        }
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ext = PerceptualExtractor::<f64>::new_frozen();
        let x = Tensor::randn(&[1, 1, 8, 8], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 1, 8, 8], 0.5, &mut rng);
        let (_, grad) = perceptual_loss_with_grad(&x, &y, &mut ext).unwrap();
        fd_check(|v| perceptual_loss(v, &y, &mut ext.clone()).unwrap(), &grad, &x, 1e-4);
    }

    #[test]
    fn losses_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let p = FtlParams::default();
        for _ in 0..1000 {
            let a = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
            assert!(mse_loss(&a, &b).unwrap() >= 0.0);
            assert!(kl_loss(&a, &b).unwrap() >= 0.0);
            let probs = a.map(|v| 1.0 / (1.0 + (-v).exp()));
            let target = b.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            assert!(focal_tversky_loss(&probs, &target, &p).unwrap() >= 0.0);
            assert!(adversarial_d_loss(&a, &b).unwrap() >= 0.0);
            assert!(adversarial_g_loss(&a) >= 0.0);
        }
    }
}
