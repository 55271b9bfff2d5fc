//! L-infinity PGD with clipping to [0,1], plus the mask-restricted variant
//! where only foreground pixels may be perturbed.
//!
//! The attack ascends the same mean softmax cross-entropy the trainer
//! minimizes (untargeted). Zero gradient coordinates do not move
//! (sign(0) = 0). With a mask, neither the random start nor any update
//! touches off-mask pixels, so those coordinates of the output are
//! bit-identical to the input. The random start always draws one uniform
//! per input coordinate, so the random stream does not depend on the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget in [0, 1].
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    /// The evaluation attack: 10 steps of 2/255 within eps = 8/255, no
    /// random start.
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Same budget and schedule with a random start, the usual choice when
    /// generating training batches.
    pub fn training(seed: u64) -> Self {
        AttackConfig { random_start: true, seed, ..AttackConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid_param(
                "epsilon",
                format!("{} (need 0 <= epsilon <= 1)", self.epsilon),
            ));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid_param(
                "step_size",
                format!("{} (need finite > 0)", self.step_size),
            ));
        }
        Ok(())
    }
}

pub struct AdvResult {
    /// Same shape as the input batch; every pixel in [0,1].
    pub adversarial: Tensor,
    /// Per sample: did the perturbation change the model's prediction?
    pub flipped: Vec<bool>,
    /// Per sample: cross-entropy at the adversarial point.
    pub final_loss: Vec<f64>,
}

/// Elementwise clamp of `x_adv` into `[x - eps, x + eps]` intersected with
/// `[0, 1]`.
pub fn project_linf(x_adv: &Tensor, x: &Tensor, eps: f64) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape(
            "project_linf",
            format!("{:?}", x.shape()),
            format!("{:?}", x_adv.shape()),
        ));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid_param("eps", format!("{eps} (need finite >= 0)")));
    }
    let mut out = x_adv.data().to_vec();
    project_slice(&mut out, x.data(), eps);
    Tensor::new(&x.shape().to_vec(), out)
}

fn project_slice(adv: &mut [f64], x: &[f64], eps: f64) {
    for (a, &xi) in adv.iter_mut().zip(x) {
        let lo = (xi - eps).max(0.0);
        let hi = (xi + eps).min(1.0);
        *a = a.clamp(lo, hi);
    }
}

/// Runs PGD against `model` on the batch `x` with true labels `y`.
///
/// `masks`, when present, holds one foreground mask per sample (shared by
/// all channels of that sample); only masked-true pixels may change.
pub fn pgd_attack(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    masks: Option<&[Mask]>,
) -> Result<AdvResult> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("pgd_attack", "[N, C, H, W] batch", format!("{shape:?}")));
    }
    let (nb, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid_param("x", "pixel values outside [0,1]"));
    }
    if let Some(masks) = masks {
        if masks.len() != nb {
            return Err(Error::shape(
                "pgd_attack masks",
                format!("{nb} masks"),
                format!("{}", masks.len()),
            ));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(Error::shape(
                    format!("pgd_attack mask {i}"),
                    format!("{h}x{w}"),
                    format!("{}x{}", m.height(), m.width()),
                ));
            }
        }
    }

    let natural_logits = autodiff::forward(model, x)?;
    let k = model.classes();
    if y.len() != nb {
        return Err(Error::shape("labels", format!("{nb} labels"), format!("{}", y.len())));
    }
    for &l in y {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }

    let plane = h * w;
    let on_mask = |s: usize, j: usize| -> bool {
        match masks {
            Some(ms) => {
                let p = j % plane;
                ms[s].get(p / w, p % w)
            }
            None => true,
        }
    };

    let x0 = x.data();
    let mut adv = x0.to_vec();
    let sample_len = ch * plane;

    if cfg.epsilon > 0.0 {
        if cfg.random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for s in 0..nb {
                for j in 0..sample_len {
                    let draw = rng.random_range(-cfg.epsilon..cfg.epsilon);
                    if on_mask(s, j) {
                        adv[s * sample_len + j] = x0[s * sample_len + j] + draw;
                    }
                }
            }
            project_slice(&mut adv, x0, cfg.epsilon);
        }

        for _ in 0..cfg.steps {
            let adv_tensor = Tensor::new(&shape.to_vec(), adv.clone())?;
            let (_, grad) = autodiff::input_gradient(model, &adv_tensor, y)?;
            let g = grad.data();
            for s in 0..nb {
                for j in 0..sample_len {
                    if !on_mask(s, j) {
                        continue;
                    }
                    let at = s * sample_len + j;
                    let step = match g[at].partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => cfg.step_size,
                        Some(std::cmp::Ordering::Less) => -cfg.step_size,
                        _ => 0.0,
                    };
                    adv[at] += step;
                }
            }
            project_slice(&mut adv, x0, cfg.epsilon);
        }
    }

    let adversarial = Tensor::new(&shape.to_vec(), adv)?;
    let adv_logits = autodiff::forward(model, &adversarial)?;

    let mut flipped = Vec::with_capacity(nb);
    let mut final_loss = Vec::with_capacity(nb);
    for s in 0..nb {
        let nat = &natural_logits.data()[s * k..(s + 1) * k];
        let row = &adv_logits.data()[s * k..(s + 1) * k];
        flipped.push(argmax(row) != argmax(nat));
        final_loss.push(ce_row(row, y[s]));
    }
    Ok(AdvResult { adversarial, flipped, final_loss })
}

/// Index of the first maximal entry.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Single-sample softmax cross-entropy from a logit row.
pub(crate) fn ce_row(row: &[f64], label: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln() - row[label]
}
