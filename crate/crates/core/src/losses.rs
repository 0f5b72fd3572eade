//! Cycle-consistency, least-squares adversarial and Dice objectives.

use phs_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetworkState;

/// Dice smoothing term, keeps the loss finite and differentiable on an
/// empty target.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Paired,
    Unpaired,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Paired => "paired",
            Mode::Unpaired => "unpaired",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub const PAIRED: Self = Self { lambda1: 10.0, lambda2: 1.0, lambda3: 10.0 };
    pub const UNPAIRED: Self = Self { lambda1: 10.0, lambda2: 2.0, lambda3: 10.0 };

    pub fn preset(mode: Mode) -> Self {
        match mode {
            Mode::Paired => Self::PAIRED,
            Mode::Unpaired => Self::UNPAIRED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{n} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values as logged.
///
/// Baselines reuse the columns: CycleGAN logs its two cycle terms in
/// `cc_ph` / `cc_hh_img`, the H→P generator's adversarial term in
/// `seg_or_gan2_gen` and the P-domain discriminator in `gan2_disc`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cc_ph: f64,
    pub cc_hh_img: f64,
    pub cc_hh_mask: f64,
    pub gan1_gen: f64,
    pub gan1_disc: f64,
    pub seg_or_gan2_gen: f64,
    pub gan2_disc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn cc(&self) -> f64 {
        self.cc_ph + self.cc_hh_img + self.cc_hh_mask
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cc_ph,
            self.cc_hh_img,
            self.cc_hh_mask,
            self.gan1_gen,
            self.gan1_disc,
            self.seg_or_gan2_gen,
            self.gan2_disc,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean absolute error between two same-shaped tensors.
pub fn mae<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mae", a, b)?;
    Ok(a.sub(b)?.abs().mean())
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("{op}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// The three cycle-consistency terms: P→H→P image, H→H image and H→H mask.
pub struct CycleTerms<T: Element = f32> {
    pub ph: Tensor<T>,
    pub hh_img: Tensor<T>,
    pub hh_mask: Tensor<T>,
}

impl<T: Element> CycleTerms<T> {
    pub fn sum(&self) -> Result<Tensor<T>> {
        Ok(self.ph.add(&self.hh_img)?.add(&self.hh_mask)?)
    }
}

/// Per-pixel L1 for each cycle; the mask term compares against the
/// all-black healthy mask with MAE since Dice is degenerate there.
pub fn cycle_terms<T: Element>(
    x_p: &Tensor<T>,
    x_p_rec: &Tensor<T>,
    x_h: &Tensor<T>,
    x_h_rec: &Tensor<T>,
    m_h: &Tensor<T>,
    m_h_rec: &Tensor<T>,
) -> Result<CycleTerms<T>> {
    Ok(CycleTerms { ph: mae(x_p_rec, x_p)?, hh_img: mae(x_h_rec, x_h)?, hh_mask: mae(m_h_rec, m_h)? })
}

pub fn l_cc<T: Element>(
    x_p: &Tensor<T>,
    x_p_rec: &Tensor<T>,
    x_h: &Tensor<T>,
    x_h_rec: &Tensor<T>,
    m_h: &Tensor<T>,
    m_h_rec: &Tensor<T>,
) -> Result<Tensor<T>> {
    cycle_terms(x_p, x_p_rec, x_h, x_h_rec, m_h, m_h_rec)?.sum()
}

/// `½·mean((scores − target)²)`.
pub fn lsgan_term<T: Element>(scores: &Tensor<T>, target: f64) -> Tensor<T> {
    scores.add_scalar(-target).square().mean().mul_scalar(0.5)
}

/// Discriminator objective on precomputed scores: real pushed to 1, fakes
/// to 0, fake sources averaged.
pub fn lsgan_disc_scores<T: Element>(real: &Tensor<T>, fakes: &[Tensor<T>]) -> Result<Tensor<T>> {
    if fakes.is_empty() {
        return Err(Error::Contract("lsgan: no fake scores".into()));
    }
    let mut fake_sum = lsgan_term(&fakes[0], 0.0);
    for f in &fakes[1..] {
        fake_sum = fake_sum.add(&lsgan_term(f, 0.0))?;
    }
    let fake_avg = fake_sum.mul_scalar(1.0 / fakes.len() as f64);
    Ok(lsgan_term(real, 1.0).add(&fake_avg)?)
}

/// Generator objective on precomputed scores: fakes pushed to 1, averaged.
pub fn lsgan_gen_scores<T: Element>(fakes: &[Tensor<T>]) -> Result<Tensor<T>> {
    if fakes.is_empty() {
        return Err(Error::Contract("lsgan: no fake scores".into()));
    }
    let mut sum = lsgan_term(&fakes[0], 1.0);
    for f in &fakes[1..] {
        sum = sum.add(&lsgan_term(f, 1.0))?;
    }
    Ok(sum.mul_scalar(1.0 / fakes.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Least-squares adversarial loss of discriminator `d` over any number of
/// fake sources. On the discriminator side fakes are detached so no
/// gradient reaches the networks that produced them.
pub fn lsgan(d: &NetworkState, fakes: &[&Tensor], real: &Tensor, side: Side) -> Result<Tensor> {
    match side {
        Side::Discriminator => {
            let real_scores = d.forward(real)?;
            let fake_scores = fakes.iter().map(|f| d.forward(&f.detach())).collect::<Result<Vec<_>>>()?;
            lsgan_disc_scores(&real_scores, &fake_scores)
        }
        Side::Generator => {
            let fake_scores = fakes.iter().map(|f| d.forward(f)).collect::<Result<Vec<_>>>()?;
            lsgan_gen_scores(&fake_scores)
        }
    }
}

/// Image adversarial loss over `G(x_p)` and `R(x_h, m_h)` against real
/// healthy images.
pub fn l_gan1(d_x: &NetworkState, fake_ph: &Tensor, fake_hh: &Tensor, real_h: &Tensor, side: Side) -> Result<Tensor> {
    lsgan(d_x, &[fake_ph, fake_hh], real_h, side)
}

/// Mask adversarial loss: `S(x_p)` against real masks from other subjects.
pub fn l_gan2(d_m: &NetworkState, fake_mask: &Tensor, real_mask: &Tensor, side: Side) -> Result<Tensor> {
    lsgan(d_m, &[fake_mask], real_mask, side)
}

/// Soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)`.
pub fn dice_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("dice_loss", pred, target)?;
    let inter = pred.mul(target)?.sum().mul_scalar(2.0).add_scalar(DICE_SMOOTH);
    let denom = pred.sum().add(&target.sum())?.add_scalar(DICE_SMOOTH);
    Ok(inter.div(&denom)?.affine(-1.0, 1.0))
}

/// Generator-side terms feeding the weighted objective.
pub struct GeneratorObjective<T: Element = f32> {
    pub cc: Tensor<T>,
    pub gan1: Tensor<T>,
    pub seg: Option<Tensor<T>>,
    pub gan2: Option<Tensor<T>>,
}

/// `λ1·L_CC + λ2·L_GAN1 + λ3·(L_Seg | L_GAN2)`.
pub fn total_loss<T: Element>(mode: Mode, parts: &GeneratorObjective<T>, w: &LossWeights) -> Result<Tensor<T>> {
    let third = match mode {
        Mode::Paired => parts.seg.as_ref(),
        Mode::Unpaired => parts.gan2.as_ref(),
    }
    .ok_or_else(|| {
        Error::Contract(format!(
            "{} objective needs its {} term",
            mode.as_str(),
            if mode == Mode::Paired { "segmentation" } else { "mask adversarial" }
        ))
    })?;
    Ok(parts.cc.mul_scalar(w.lambda1).add(&parts.gan1.mul_scalar(w.lambda2))?.add(&third.mul_scalar(w.lambda3))?)
}
