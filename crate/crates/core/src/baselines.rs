//! Comparison methods: a conditional GAN and CycleGAN, built from the same
//! generator and discriminator constructors as the factorized model.
//!
//! Both reuse [`LossBreakdown`] for logging. For CycleGAN the P→H→P and
//! H→P→H cycles go in `cc_ph` and `cc_hh_img`, the H→P generator's
//! adversarial term in `seg_or_gan2_gen` and the P-domain discriminator in
//! `gan2_disc`.

use crate::error::Result;
use crate::losses::{lsgan, mae, LossBreakdown, Side};
use crate::training::{Batch, Phase, Trainer};

fn scalar(t: &phs_tensor::Tensor) -> Result<f64> {
    Ok(f64::from(t.item()?))
}

/// Generator `G` against discriminator `Dx` with the least-squares loss
/// only; no identity or cycle terms.
pub(crate) fn cgan_step(t: &mut Trainer, b: &Batch, observe: &mut dyn FnMut(Phase, &Trainer)) -> Result<LossBreakdown> {
    let (g, dx) = (t.net("G").clone(), t.net("Dx").clone());
    let fake = g.forward(&b.x_p)?;

    t.zero_grads();
    let d = lsgan(&dx, &[&fake], &b.x_h, Side::Discriminator)?;
    let gan1_disc = scalar(&d)?;
    d.backward()?;
    t.update(&["Dx"])?;
    observe(Phase::Discriminator, t);

    let gen = lsgan(&dx, &[&fake], &b.x_h, Side::Generator)?;
    let gan1_gen = scalar(&gen)?;
    gen.backward()?;
    t.update(&["G"])?;
    observe(Phase::Generator, t);
    Ok(LossBreakdown { gan1_gen, gan1_disc, total: gan1_gen, ..LossBreakdown::default() })
}

/// Two generators (`G`: P→H, `G_HP`: H→P) and two discriminators (`Dx` on
/// healthy images, `D_P` on pathological ones) with L1 cycles both ways.
pub(crate) fn cyclegan_step(
    t: &mut Trainer,
    b: &Batch,
    observe: &mut dyn FnMut(Phase, &Trainer),
) -> Result<LossBreakdown> {
    let (g_ph, g_hp) = (t.net("G").clone(), t.net("G_HP").clone());
    let (d_h, d_p) = (t.net("Dx").clone(), t.net("D_P").clone());
    let fake_h = g_ph.forward(&b.x_p)?;
    let rec_p = g_hp.forward(&fake_h)?;
    let fake_p = g_hp.forward(&b.x_h)?;
    let rec_h = g_ph.forward(&fake_p)?;

    t.zero_grads();
    let dh = lsgan(&d_h, &[&fake_h], &b.x_h, Side::Discriminator)?;
    let dp = lsgan(&d_p, &[&fake_p], &b.x_p, Side::Discriminator)?;
    let mut out = LossBreakdown { gan1_disc: scalar(&dh)?, gan2_disc: scalar(&dp)?, ..LossBreakdown::default() };
    dh.add(&dp)?.backward()?;
    t.update(&["Dx", "D_P"])?;
    observe(Phase::Discriminator, t);

    let gan_h = lsgan(&d_h, &[&fake_h], &b.x_h, Side::Generator)?;
    let gan_p = lsgan(&d_p, &[&fake_p], &b.x_p, Side::Generator)?;
    let cyc_p = mae(&rec_p, &b.x_p)?;
    let cyc_h = mae(&rec_h, &b.x_h)?;
    let total = gan_h.add(&gan_p)?.add(&cyc_p.add(&cyc_h)?.mul_scalar(t.cfg.cycle_weight))?;
    out.cc_ph = scalar(&cyc_p)?;
    out.cc_hh_img = scalar(&cyc_h)?;
    out.gan1_gen = scalar(&gan_h)?;
    out.seg_or_gan2_gen = scalar(&gan_p)?;
    out.total = scalar(&total)?;
    total.backward()?;
    t.update(&["G", "G_HP"])?;
    observe(Phase::Generator, t);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use crate::networks::ArchConfig;
    use crate::training::{Method, TrainConfig, Trainer};

    #[test]
    fn baselines_share_constructors() {
        let arch = ArchConfig { width: 2, residual_blocks: 1, unet_depth: 2, reconstructor_out: 1 };
        let cyc = Trainer::new(TrainConfig::new(Method::Cyclegan, (32, 32), arch)).unwrap();
        let cgan = Trainer::new(TrainConfig::new(Method::Cgan, (32, 32), arch)).unwrap();
        let prop = Trainer::new(TrainConfig::new(Method::Paired, (32, 32), arch)).unwrap();
        let h = |t: &Trainer, k: &str| t.net(k).spec.architecture_hash();
        assert_eq!(h(&cyc, "G"), h(&cyc, "G_HP"));
        assert_eq!(h(&cyc, "G"), h(&cgan, "G"));
        assert_eq!(h(&cgan, "G"), h(&prop, "G"));
        assert_eq!(h(&cyc, "Dx"), h(&cyc, "D_P"));
        assert_eq!(h(&cgan, "Dx"), h(&prop, "Dx"));
    }
}
