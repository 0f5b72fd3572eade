//! Acceptance suite. Runs every criterion in order and prints one
//! `acceptance <n> PASS|FAIL` line each; the process fails if any criterion
//! fails.
//!
//! The phantom experiment (criteria 4 to 8) trains twelve networks. Each
//! finished run is cached under the cargo target directory, keyed by the
//! experiment configuration and the library sources, so an interrupted or
//! repeated invocation only trains what is missing. Set
//! `PHS_ACCEPTANCE_FRESH=1` to ignore the cache,
//! `PHS_ACCEPTANCE_ONLY=1,2,3` to run a subset, and
//! `PHS_ACCEPTANCE_EPOCHS` to shorten the experiment for a smoke run.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use phs_core::losses::{
    cycle_terms, dice_loss, l_cc, lsgan_disc_scores, lsgan_gen_scores, lsgan_term, mae, total_loss, GeneratorObjective,
    LossWeights, Mode,
};
use phs_core::metrics::{
    evaluate, healthiness_from_counts, lesion_area, masked_ms_ssim, mean_std, AggregateMetrics, MsSsimConfig,
};
use phs_core::networks::ArchConfig;
use phs_core::phantom::{generate_dataset, partition, Image, Label, PhantomConfig, SliceRecord};
use phs_core::training::{
    load_fpre, pretrain_fpre, run, save_fpre, segmentor_dice_loss, FpreConfig, Method, TrainConfig, Trainer,
    CHECKPOINT_DIR, LOG_FILE,
};
use phs_tensor::{concat_channels, conv2d, fd_check, instance_norm, max_pool2, no_grad, upsample_nn, Padding, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-3;
const GRAD_INSTANCES: usize = 100;
const GRAD_BUDGET_SECONDS: f64 = 60.0;
const RUN_BUDGET_SECONDS: f64 = 4.0 * 3600.0;
const SEEDS: [u64; 3] = [1, 2, 3];

type Check = (u32, &'static str, fn(&Experiment) -> Verdict);
type Property = (&'static str, &'static str, fn(&Experiment) -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn emit(id: &str, name: &str, v: &Verdict) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("PHS_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failed = Vec::new();
    let mut record = |id: &str, name: &str, v: Verdict| {
        emit(id, name, &v);
        if !v.pass {
            failed.push(id.to_string());
        }
    };

    if wanted(1) {
        record("1", "gradient suite", gradient_suite());
    }
    if wanted(2) {
        record("2", "reference layer tables", appendix());
    }
    if wanted(3) {
        record("3", "metric oracles", metric_oracles());
    }
    if (4..=8).any(&wanted) {
        match Experiment::load_or_run() {
            Ok(exp) => {
                let checks: [Check; 5] = [
                    (4, "method ordering on the phantom", ordering),
                    (5, "paired healthiness", paired_healthiness),
                    (6, "reconstruction lesion fidelity", lesion_fidelity),
                    (7, "healthy cycle contract", healthy_cycle_contract),
                    (8, "f_pre quality gate", fpre_gate),
                ];
                for (id, name, f) in checks {
                    if wanted(id) {
                        record(&id.to_string(), name, f(&exp));
                    }
                }
                for (id, name, f) in PROPERTIES {
                    record(id, name, f(&exp));
                }
            }
            Err(e) => {
                for id in (4..=8).filter(|&i| wanted(i)) {
                    record(
                        &id.to_string(),
                        "phantom experiment",
                        Verdict { pass: false, detail: format!("experiment failed: {e}") },
                    );
                }
            }
        }
    }
    if wanted(9) {
        record("9", "determinism and resume", determinism());
    }

    if !failed.is_empty() {
        let _ = writeln!(std::io::stderr(), "acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- gradients

type T64 = Tensor<f64>;

fn t(shape: &[usize], v: Vec<f64>) -> T64 {
    Tensor::new(shape, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Magnitudes in [0.05, 2] with random sign, keeping kinked ops smooth at
/// every perturbed point.
fn signed_away(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                -m
            } else {
                m
            }
        })
        .collect()
}

fn contract(y: &T64) -> T64 {
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect();
    y.mul(&t(y.shape(), w)).unwrap().sum()
}

fn fd(f: impl Fn(&T64) -> phs_tensor::Result<T64>, x: &T64) -> f64 {
    fd_check(f, x, FD_STEP).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..5)]
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn unary(op: fn(&T64) -> T64) -> Case {
    Box::new(move |rng| {
        let s = small_shape(rng);
        let x = t(&s, signed_away(rng, s.iter().product()));
        fd(|x| Ok(contract(&op(x))), &x)
    })
}

fn binary(op: fn(&T64, &T64) -> phs_tensor::Result<T64>) -> Case {
    Box::new(move |rng| {
        let s = small_shape(rng);
        let n = s.iter().product();
        let a = t(&s, uniform(rng, n, -2.0, 2.0));
        let b = t(&s, signed_away(rng, n));
        fd(|x| Ok(contract(&op(x, &b)?)), &a).max(fd(|y| Ok(contract(&op(&a, y)?)), &b))
    })
}

fn image4(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> T64 {
    t(&[n, c, h, w], uniform(rng, n * c * h * w, -1.0, 1.0))
}

fn probabilities(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, 0.05, 0.95)
}

fn gradient_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", binary(|a, b| a.add(b))),
        ("sub", binary(|a, b| a.sub(b))),
        ("mul", binary(|a, b| a.mul(b))),
        ("div", binary(|a, b| a.div(b))),
        ("abs", unary(|x| x.abs())),
        ("square", unary(|x| x.square())),
        ("relu", unary(|x| x.relu())),
        ("leaky_relu", unary(|x| x.leaky_relu(0.2))),
        ("sigmoid", unary(|x| x.sigmoid())),
        ("affine", unary(|x| x.affine(-1.7, 0.3))),
        ("add_scalar", unary(|x| x.add_scalar(0.9))),
        ("mul_scalar", unary(|x| x.mul_scalar(-2.5))),
        ("sum", unary(|x| x.square().sum())),
        ("mean", unary(|x| x.square().mean())),
        (
            "reshape",
            Box::new(|rng| {
                let x = t(&[2, 3], uniform(rng, 6, -2.0, 2.0));
                fd(|x| Ok(contract(&x.reshape(&[3, 2])?)), &x)
            }),
        ),
        (
            "conv2d",
            Box::new(|rng| {
                let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
                let k = *[1usize, 2, 3, 4].choose(rng).unwrap();
                let stride = rng.random_range(1..3);
                let padding = if rng.random::<bool>() { Padding::Same } else { Padding::Valid };
                let (h, w) = (rng.random_range(k.max(2)..7), rng.random_range(k.max(2)..7));
                let (h, w) = (h.next_multiple_of(stride), w.next_multiple_of(stride));
                let x = image4(rng, n, cin, h, w);
                let kw = image4(rng, cout, cin, k, k);
                let b = t(&[cout], uniform(rng, cout, -1.0, 1.0));
                let f = |x: &T64, kw: &T64, b: &T64| Ok(contract(&conv2d(x, kw, Some(b), stride, padding)?));
                fd(|x| f(x, &kw, &b), &x).max(fd(|kw| f(&x, kw, &b), &kw)).max(fd(|b| f(&x, &kw, b), &b))
            }),
        ),
        (
            "instance_norm",
            Box::new(|rng| {
                let (n, c) = (rng.random_range(1..3), rng.random_range(1..3));
                let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
                let x = image4(rng, n, c, h, w);
                let g = t(&[c], signed_away(rng, c));
                let s = t(&[c], uniform(rng, c, -1.0, 1.0));
                let f = |x: &T64, g: &T64, s: &T64| Ok(contract(&instance_norm(x, g, s, 1e-5)?));
                fd(|x| f(x, &g, &s), &x).max(fd(|g| f(&x, g, &s), &g)).max(fd(|s| f(&x, &g, s), &s))
            }),
        ),
        (
            "max_pool2",
            Box::new(|rng| {
                // distinct values spaced far beyond the step keep every
                // window's argmax fixed under perturbation
                let (c, h, w) = (rng.random_range(1..3), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
                let mut v: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.05).collect();
                v.shuffle(rng);
                fd(|x| Ok(contract(&max_pool2(x)?)), &t(&[1, c, h, w], v))
            }),
        ),
        (
            "upsample_nn",
            Box::new(|rng| {
                let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
                let x = image4(rng, 1, c, h, w);
                let factor = rng.random_range(2..4);
                fd(|x| Ok(contract(&upsample_nn(x, factor)?)), &x)
            }),
        ),
        (
            "concat_channels",
            Box::new(|rng| {
                let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
                let (ca, cb) = (rng.random_range(1..3), rng.random_range(1..3));
                let a = image4(rng, 2, ca, h, w);
                let b = image4(rng, 2, cb, h, w);
                fd(|a| Ok(contract(&concat_channels(&[a, &b])?)), &a)
                    .max(fd(|b| Ok(contract(&concat_channels(&[&a, b])?)), &b))
            }),
        ),
        (
            "loss: mae",
            Box::new(|rng| {
                let s = small_shape(rng);
                let n = s.iter().product();
                let a = t(&s, uniform(rng, n, -1.0, 1.0));
                let d = signed_away(rng, n);
                let b = t(&s, a.to_vec().iter().zip(&d).map(|(x, y)| x + y).collect());
                fd(|x| mae(x, &b).map_err(to_tensor_err), &a).max(fd(|y| mae(&a, y).map_err(to_tensor_err), &b))
            }),
        ),
        (
            "loss: lsgan",
            Box::new(|rng| {
                let s = small_shape(rng);
                let n = s.iter().product();
                let real = t(&s, probabilities(rng, n));
                let f1 = t(&s, probabilities(rng, n));
                let f2 = t(&s, probabilities(rng, n));
                let target = rng.random_range(0.0..1.0);
                let e1 = fd(|x| Ok(lsgan_term(x, target)), &real);
                let e2 = fd(|x| lsgan_disc_scores(x, &[f1.clone(), f2.clone()]).map_err(to_tensor_err), &real);
                let e3 = fd(|x| lsgan_disc_scores(&real, &[x.clone(), f2.clone()]).map_err(to_tensor_err), &f1);
                let e4 = fd(|x| lsgan_gen_scores(&[f1.clone(), x.clone()]).map_err(to_tensor_err), &f2);
                e1.max(e2).max(e3).max(e4)
            }),
        ),
        (
            "loss: dice",
            Box::new(|rng| {
                let n = rng.random_range(4..17);
                let p = t(&[1, 1, 1, n], probabilities(rng, n));
                let m = t(&[1, 1, 1, n], probabilities(rng, n));
                fd(|x| dice_loss(x, &m).map_err(to_tensor_err), &p)
                    .max(fd(|x| dice_loss(&p, x).map_err(to_tensor_err), &m))
            }),
        ),
        (
            "loss: cycle consistency",
            Box::new(|rng| {
                let n = rng.random_range(2..9);
                let pair = |rng: &mut ChaCha8Rng| {
                    let a = uniform(rng, n, 0.0, 1.0);
                    let d = signed_away(rng, n);
                    (t(&[n], a.clone()), t(&[n], a.iter().zip(&d).map(|(x, y)| x + 0.1 * y).collect()))
                };
                let (xp, xpr) = pair(rng);
                let (xh, xhr) = pair(rng);
                let (mh, mhr) = pair(rng);
                let e1 = fd(|x| l_cc(&xp, x, &xh, &xhr, &mh, &mhr).map_err(to_tensor_err), &xpr);
                let e2 = fd(|x| l_cc(&xp, &xpr, &xh, x, &mh, &mhr).map_err(to_tensor_err), &xhr);
                let e3 = fd(|x| Ok(cycle_terms(&xp, &xpr, &xh, &xhr, &mh, x).map_err(to_tensor_err)?.hh_mask), &mhr);
                e1.max(e2).max(e3)
            }),
        ),
        (
            "loss: weighted total",
            Box::new(|rng| {
                let parts = t(&[3], uniform(rng, 3, 0.1, 2.0));
                let mode = if rng.random::<bool>() { Mode::Paired } else { Mode::Unpaired };
                let w = LossWeights::preset(mode);
                fd(
                    |p| {
                        let pick = |i: usize| -> phs_tensor::Result<T64> {
                            let mut sel = vec![0.0; 3];
                            sel[i] = 1.0;
                            Ok(p.mul(&t(&[3], sel))?.sum())
                        };
                        let third = pick(2)?;
                        let obj = GeneratorObjective {
                            cc: pick(0)?,
                            gan1: pick(1)?,
                            seg: (mode == Mode::Paired).then(|| third.clone()),
                            gan2: (mode == Mode::Unpaired).then_some(third),
                        };
                        total_loss(mode, &obj, &w).map_err(to_tensor_err)
                    },
                    &parts,
                )
            }),
        ),
    ]
}

fn to_tensor_err(e: phs_core::Error) -> phs_tensor::TensorError {
    match e {
        phs_core::Error::Tensor(t) => t,
        other => panic!("unexpected loss error: {other}"),
    }
}

fn gradient_suite() -> Verdict {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for (name, case) in gradient_cases() {
        let w = (0..GRAD_INSTANCES).map(|_| case(&mut rng)).fold(0.0, f64::max);
        worst.push((name, w));
    }
    let seconds = clock.elapsed().as_secs_f64();
    let bad: Vec<String> =
        worst.iter().filter(|(_, w)| w.is_nan() || *w >= FD_TOL).map(|(n, w)| format!("{n} {w:.2e}")).collect();
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Verdict {
        pass: bad.is_empty() && seconds < GRAD_BUDGET_SECONDS,
        detail: format!(
            "{} ops and losses x {GRAD_INSTANCES} instances, worst error {overall:.2e} (< {FD_TOL:e}), {seconds:.1}s (< {GRAD_BUDGET_SECONDS}s){}",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------- tables

fn appendix() -> Verdict {
    match support::tables::first_mismatch() {
        None => Verdict { pass: true, detail: "G, R and D at 208x160 match row for row, D ends at (13,10,1)".into() },
        Some(m) => Verdict { pass: false, detail: m },
    }
}

// ---------------------------------------------------------------- metrics

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_data(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Mean contrast-structure term and mean full SSIM with an explicit 2-D
/// Gaussian window summed at every valid position.
fn brute_ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (k, sigma, c1, c2) = (11usize, 1.5f64, 1e-4, 9e-4);
    let r = (k / 2) as f64;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    let (mut acc, mut cs_acc) = (0.0, 0.0);
    let mut n = 0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let q = g[i * k + j] / total;
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += q * va;
                    mb += q * vb;
                    aa += q * va * va;
                    bb += q * vb * vb;
                    ab += q * va * vb;
                }
            }
            let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            let cs = (2.0 * sab + c2) / (sa + sb + c2);
            cs_acc += cs;
            acc += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
            n += 1;
        }
    }
    (cs_acc / n as f64, acc / n as f64)
}

fn brute_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    brute_ssim_terms(a, b, h, w).1
}

/// Multi-scale value written out directly: mask once, then at each scale
/// the brute-force terms and a 2x2 mean pool.
fn brute_ms_ssim(a: &Image, b: &Image, mask: &Image, weights: &[f64]) -> f64 {
    let keep = |im: &Image| -> Vec<f64> {
        im.data.iter().zip(&mask.data).map(|(&x, &m)| f64::from(x) * (1.0 - f64::from(m))).collect()
    };
    let pool = |v: &[f64], h: usize, w: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity((h / 2) * (w / 2));
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let at = |dy: usize, dx: usize| v[(2 * y + dy) * w + 2 * x + dx];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        out
    };
    let (mut pa, mut pb, mut h, mut w) = (keep(a), keep(b), a.height, a.width);
    let mut value = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        let (cs, full) = brute_ssim_terms(&pa, &pb, h, w);
        let term = if s + 1 == weights.len() { full } else { cs };
        value *= term.max(0.0).powf(wt);
        pa = pool(&pa, h, w);
        pb = pool(&pb, h, w);
        h /= 2;
        w /= 2;
    }
    value
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut self_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    let mut multi_err: f64 = 0.0;
    for _ in 0..8 {
        let a = random_image(&mut rng, 64, 64);
        let mut mask = Image::zeros(64, 64);
        let (y0, x0) = (rng.random_range(0..50), rng.random_range(0..50));
        for y in y0..y0 + 12 {
            for x in x0..x0 + 12 {
                mask.data[y * 64 + x] = 1.0;
            }
        }
        let v = masked_ms_ssim(&a, &a, &mask, &MsSsimConfig::default()).unwrap();
        self_err = self_err.max((v - 1.0).abs());
        let mut a2 = a.clone();
        for v in a2.data.iter_mut() {
            *v = (*v * 0.8 + rng.random_range(0.0..0.2f32)).clamp(0.0, 1.0);
        }
        let cfg = MsSsimConfig::default();
        let fast = masked_ms_ssim(&a, &a2, &mask, &cfg).unwrap();
        multi_err = multi_err.max((fast - brute_ms_ssim(&a, &a2, &mask, &cfg.scale_weights)).abs());

        let b = random_image(&mut rng, 32, 40);
        let mut c = b.clone();
        for v in c.data.iter_mut() {
            *v = (*v + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0);
        }
        let m = random_image(&mut rng, 32, 40);
        let single = masked_ms_ssim(&b, &c, &m, &MsSsimConfig::with_scales(1)).unwrap();
        let keep = |im: &Image| -> Vec<f64> {
            im.data.iter().zip(&m.data).map(|(&x, &w)| f64::from(x) * (1.0 - f64::from(w))).collect()
        };
        let oracle = brute_ssim(&keep(&b), &keep(&c), 32, 40).max(0.0);
        oracle_err = oracle_err.max((single - oracle).abs());
    }

    // pred {1,0,1,0} vs target {1,1,0,0}: intersection 1, sums 2 and 2,
    // so 1 - (2*1 + 1) / (2 + 2 + 1) = 0.4
    let dice =
        dice_loss(&t(&[4], vec![1.0, 0.0, 1.0, 0.0]), &t(&[4], vec![1.0, 1.0, 0.0, 0.0])).unwrap().item().unwrap();
    let dice_ok = (dice - 0.4).abs() < 1e-12;
    // all-zero prediction and target: (0 + 1) / (0 + 1) gives loss 0
    let dice_empty = dice_loss(&t(&[4], vec![0.0; 4]), &t(&[4], vec![0.0; 4])).unwrap().item().unwrap();
    let dice_ok = dice_ok && dice_empty == 0.0;

    // predicted areas {10, 0, 20} (mean 10) against reference {30, 30, 30}
    // (mean 30): h = 1 - 10/30
    let square = |side: usize| {
        let mut im = Image::zeros(16, 16);
        for i in 0..side {
            im.data[i] = 1.0;
        }
        im
    };
    let predicted: Vec<usize> = [10, 0, 20].iter().map(|&s| lesion_area(&square(s))).collect();
    let reference: Vec<usize> = [30, 30, 30].iter().map(|&s| lesion_area(&square(s))).collect();
    let h = healthiness_from_counts(&predicted, &reference).unwrap();
    let h_ok = (h - (1.0 - 10.0 / 30.0)).abs() < 1e-12
        && healthiness_from_counts(&[0, 0], &[5, 7]).unwrap() == 1.0
        && healthiness_from_counts(&[5, 7], &[5, 7]).unwrap() == 0.0;

    Verdict {
        pass: self_err <= 1e-6 && oracle_err <= 1e-5 && multi_err <= 1e-5 && dice_ok && h_ok,
        detail: format!(
            "|ms_ssim(x,x) - 1| {self_err:.1e} (<= 1e-6), single-scale vs brute force {oracle_err:.1e} (<= 1e-5), \
             multi-scale vs straight-line oracle {multi_err:.1e} (<= 1e-5), \
             dice hand cases {}, healthiness hand cases {}",
            if dice_ok { "exact" } else { "wrong" },
            if h_ok { "exact" } else { "wrong" }
        ),
    }
}

// ---------------------------------------------------------------- experiment

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExperimentConfig {
    phantom: PhantomConfig,
    split_seed: u64,
    test_fraction: f64,
    width: usize,
    lr: f64,
    epochs: u32,
    batch_size: usize,
    fpre_seed: u64,
    seeds: Vec<u64>,
}

impl ExperimentConfig {
    fn desk() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            split_seed: 0,
            test_fraction: 6.0 / 28.0,
            width: 8,
            lr: 1e-3,
            epochs: std::env::var("PHS_ACCEPTANCE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(100),
            batch_size: 8,
            fpre_seed: 1,
            seeds: SEEDS.to_vec(),
        }
    }

    fn arch(&self) -> ArchConfig {
        ArchConfig { width: self.width, ..ArchConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunResult {
    method: String,
    seed: u64,
    train_seconds: f64,
    eval_seconds: f64,
    aggregate: AggregateMetrics,
    /// Mean S output over healthy test slices (factorized methods only).
    healthy_mask_mean: Option<f64>,
    /// Mean masked MS-SSIM of G(R(x_h, 0)) against x_h over healthy test
    /// slices (factorized methods only).
    healthy_cycle_identity: Option<f64>,
    /// Mean masked MS-SSIM of G(x_h) against x_h over healthy test slices.
    healthy_identity: f64,
    /// Mean per-pixel L1 between the reconstruction and the pathological
    /// input (methods with a reconstruction only).
    recon_l1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FpreResult {
    best_epoch: u32,
    /// Mean f_pre output on the true pre-lesion images of the test set.
    truth_mask_mean: f64,
    test_dice_loss: f64,
    seconds: f64,
}

struct Experiment {
    cfg: ExperimentConfig,
    fpre: FpreResult,
    runs: BTreeMap<(String, u64), RunResult>,
    /// Paired, seed 1, with the H-H cycle weight at 0.
    ablation: RunResult,
}

fn source_digest(cfg: &ExperimentConfig) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("..");
    let mut files = Vec::new();
    for dir in ["core/src", "tensor/src"] {
        if let Ok(entries) = fs::read_dir(root.join(dir)) {
            files.extend(entries.flatten().map(|e| e.path()));
        }
    }
    files.sort();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).unwrap());
    for f in files {
        h.update(f.file_name().unwrap().as_encoded_bytes());
        h.update(fs::read(&f).unwrap_or_default());
    }
    hex_string(&h.finalize()[..8])
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn progress(line: &str) {
    let _ = writeln!(std::io::stderr(), "  [experiment] {line}");
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> phs_core::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|source| phs_core::Error::Io { path: path.into(), source })
}

impl Experiment {
    fn load_or_run() -> phs_core::Result<Self> {
        let cfg = ExperimentConfig::desk();
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(source_digest(&cfg));
        if std::env::var("PHS_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|source| phs_core::Error::Io { path: dir.clone(), source })?;
        }
        fs::create_dir_all(&dir).map_err(|source| phs_core::Error::Io { path: dir.clone(), source })?;
        progress(&format!("working directory {}", dir.display()));

        let dataset = generate_dataset(&cfg.phantom)?;
        let split = partition(&dataset.records, cfg.split_seed, cfg.test_fraction)?;
        progress(&format!(
            "{} slices, {} train / {} test subjects",
            dataset.records.len(),
            split.train_subjects.len(),
            split.test_subjects.len()
        ));

        let fpre_dir = dir.join("fpre");
        let fpre_file = dir.join("fpre.json");
        let fpre = match read_json::<FpreResult>(&fpre_file) {
            Some(r) => r,
            None => {
                let clock = Instant::now();
                let mut fc = FpreConfig::new(cfg.phantom.resolution, cfg.arch());
                fc.seed = cfg.fpre_seed;
                fc.batch_size = cfg.batch_size;
                let outcome = pretrain_fpre(&split.train, &fc, &mut |_| {})?;
                save_fpre(&fpre_dir, &outcome, &fc)?;
                let r = FpreResult {
                    best_epoch: outcome.best_epoch,
                    truth_mask_mean: truth_mask_mean(&outcome.net, &split.test)?,
                    test_dice_loss: segmentor_dice_loss(&outcome.net, &split.test)?,
                    seconds: clock.elapsed().as_secs_f64(),
                };
                write_json(&fpre_file, &r)?;
                r
            }
        };
        progress(&format!("f_pre held-out Dice loss {:.4} ({:.0}s)", fpre.test_dice_loss, fpre.seconds));
        let fpre_net = load_fpre(&fpre_dir)?;

        let mut runs = BTreeMap::new();
        for &seed in &cfg.seeds {
            for method in [Method::Paired, Method::Unpaired, Method::Cyclegan, Method::Cgan] {
                let name = method.as_str();
                let run_dir = dir.join(format!("{name}-{seed}"));
                let result_file = run_dir.join("result.json");
                let result = match read_json::<RunResult>(&result_file) {
                    Some(r) => r,
                    None => {
                        let v = Variant { method, hh_cycle_weight: 1.0 };
                        let r = train_and_evaluate(&cfg, v, seed, &split.train, &split.test, &fpre_net, &run_dir)?;
                        write_json(&result_file, &r)?;
                        r
                    }
                };
                progress(&format!(
                    "{name} seed {seed}: identity {:.4} healthiness {:.4} lesion dice {} ({:.0}s)",
                    result.aggregate.identity_mean,
                    result.aggregate.healthiness,
                    result.aggregate.lesion_dice.map_or("n/a".into(), |d| format!("{d:.4}")),
                    result.train_seconds + result.eval_seconds
                ));
                runs.insert((name.to_string(), seed), result);
            }
        }
        let ablation_dir = dir.join("paired-no-hh-1");
        let ablation_file = ablation_dir.join("result.json");
        let ablation = match read_json::<RunResult>(&ablation_file) {
            Some(r) => r,
            None => {
                let v = Variant { method: Method::Paired, hh_cycle_weight: 0.0 };
                let r = train_and_evaluate(&cfg, v, 1, &split.train, &split.test, &fpre_net, &ablation_dir)?;
                write_json(&ablation_file, &r)?;
                r
            }
        };
        progress(&format!("paired seed 1 without the H-H cycle: healthy identity {:.4}", ablation.healthy_identity));
        Ok(Self { cfg, fpre, runs, ablation })
    }

    fn run(&self, method: &str, seed: u64) -> &RunResult {
        &self.runs[&(method.to_string(), seed)]
    }

    fn per_seed<F: Fn(&RunResult) -> f64>(&self, method: &str, f: F) -> Vec<f64> {
        self.cfg.seeds.iter().map(|&s| f(self.run(method, s))).collect()
    }
}

fn truth_mask_mean(fpre: &phs_core::networks::NetworkState, test: &[SliceRecord]) -> phs_core::Result<f64> {
    let truths: Vec<&Image> = test.iter().filter_map(|r| r.truth_healthy.as_ref()).collect();
    let pred = phs_core::metrics::segment(fpre, &truths)?;
    let total: f64 = pred.iter().flat_map(|p| &p.data).map(|&v| f64::from(v)).sum();
    Ok(total / pred.iter().map(|p| p.data.len()).sum::<usize>() as f64)
}

struct Variant {
    method: Method,
    hh_cycle_weight: f64,
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    train: &[SliceRecord],
    test: &[SliceRecord],
    fpre: &phs_core::networks::NetworkState,
    dir: &Path,
) -> phs_core::Result<RunResult> {
    let method = variant.method;
    let mut tc = TrainConfig::new(method, cfg.phantom.resolution, cfg.arch());
    tc.hh_cycle_weight = variant.hh_cycle_weight;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.seed = seed;
    tc.adam.lr = cfg.lr;
    let clock = Instant::now();
    let mut trainer = Trainer::new(tc)?;
    run(&mut trainer, train, dir, None, &mut |_, _, _| {})?;
    let train_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let ms = MsSsimConfig::for_resolution(cfg.phantom.resolution.0, cfg.phantom.resolution.1);
    let (_, recon, _, aggregate) = evaluate(&trainer, test, fpre, &ms)?;
    let inputs = test.iter().filter(|r| r.label == Label::Pathological);
    let recon_l1 = recon
        .iter()
        .zip(inputs)
        .map(|(r, x)| {
            r.as_ref().map(|r| {
                r.data.iter().zip(&x.image.data).map(|(&a, &b)| f64::from((a - b).abs())).sum::<f64>()
                    / r.data.len() as f64
            })
        })
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean(&v));
    let healthy_identity = healthy_identity(&trainer, test, &ms)?;
    let (healthy_mask_mean, healthy_cycle_identity) = if trainer.has("S") {
        let (m, i) = healthy_cycle(&trainer, test, &ms)?;
        (Some(m), Some(i))
    } else {
        (None, None)
    };
    Ok(RunResult {
        method: method.as_str().into(),
        seed,
        train_seconds,
        eval_seconds: clock.elapsed().as_secs_f64(),
        aggregate,
        healthy_mask_mean,
        healthy_cycle_identity,
        healthy_identity,
        recon_l1,
    })
}

fn healthy_identity(trainer: &Trainer, test: &[SliceRecord], ms: &MsSsimConfig) -> phs_core::Result<f64> {
    let mut ids = Vec::new();
    no_grad(|| -> phs_core::Result<()> {
        for r in test.iter().filter(|r| r.label == Label::Healthy) {
            let out = trainer.net("G").forward(&r.image.to_tensor())?;
            let img = &Image::unbatch(&out)?[0];
            ids.push(masked_ms_ssim(img, &r.image, &Image::zeros(img.height, img.width), ms)?);
        }
        Ok(())
    })?;
    Ok(mean(&ids))
}

/// Mean S output on healthy test images, and the mean masked MS-SSIM of
/// G(R(x_h, 0)) against x_h with an empty mask.
fn healthy_cycle(trainer: &Trainer, test: &[SliceRecord], ms: &MsSsimConfig) -> phs_core::Result<(f64, f64)> {
    let healthy: Vec<&SliceRecord> = test.iter().filter(|r| r.label == Label::Healthy).collect();
    let mut mask_sum = 0.0;
    let mut pixels = 0usize;
    let mut ids = Vec::new();
    no_grad(|| -> phs_core::Result<()> {
        for chunk in healthy.chunks(16) {
            let x = Image::batch(chunk.iter().map(|r| &r.image))?;
            let s = trainer.net("S").forward(&x)?;
            mask_sum += s.to_vec().iter().map(|&v| f64::from(v)).sum::<f64>();
            pixels += s.numel();
            let zeros = Tensor::zeros(x.shape())?;
            let rec = trainer.net("R").forward(&concat_channels(&[&x, &zeros])?)?;
            let back = trainer.net("G").forward(&rec)?;
            for (img, r) in Image::unbatch(&back)?.iter().zip(chunk) {
                ids.push(masked_ms_ssim(img, &r.image, &Image::zeros(img.height, img.width), ms)?);
            }
        }
        Ok(())
    })?;
    Ok((mask_sum / pixels as f64, mean_std(&ids).0))
}

/// Properties of trained models that accompany the numbered criteria.
const PROPERTIES: [Property; 4] = [
    ("p1", "paired reconstruction L1", recon_l1),
    ("p2", "f_pre on lesion-free truth", fpre_on_truth),
    ("p3", "oracle MSE ordering", oracle_mse_ordering),
    ("p4", "H-H cycle ablation", hh_ablation),
];

fn recon_l1(exp: &Experiment) -> Verdict {
    let v = exp.per_seed("paired", |r| r.recon_l1.unwrap_or(f64::NAN));
    let m = mean(&v);
    Verdict { pass: m < 0.05, detail: format!("mean |x_rec - x_p| per pixel {m:.4} ({}) (< 0.05)", fmt_list(&v)) }
}

fn fpre_on_truth(exp: &Experiment) -> Verdict {
    let m = exp.fpre.truth_mask_mean;
    Verdict { pass: m < 0.01, detail: format!("mean f_pre output on pre-lesion images {m:.4} (< 0.01)") }
}

fn oracle_mse_ordering(exp: &Experiment) -> Verdict {
    let mse = |m: &str| exp.per_seed(m, |r| r.aggregate.oracle_mse.unwrap_or(f64::NAN));
    let (p, c) = (mse("paired"), mse("cyclegan"));
    Verdict {
        pass: mean(&p) < mean(&c),
        detail: format!("paired {:.5} ({}) < cyclegan {:.5} ({})", mean(&p), fmt_list(&p), mean(&c), fmt_list(&c)),
    }
}

fn hh_ablation(exp: &Experiment) -> Verdict {
    let full = exp.run("paired", 1).healthy_identity;
    let ablated = exp.ablation.healthy_identity;
    Verdict {
        pass: ablated < full,
        detail: format!("ms_ssim(G(x_h), x_h) seed 1: full objective {full:.4}, without the H-H cycle {ablated:.4}"),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ordering(exp: &Experiment) -> Verdict {
    let mut id_hits = 0;
    let mut h_hits = 0;
    let mut seconds = exp.fpre.seconds;
    for &s in &exp.cfg.seeds {
        let id = |m: &str| exp.run(m, s).aggregate.identity_mean;
        let h = |m: &str| exp.run(m, s).aggregate.healthiness;
        if id("paired") >= id("unpaired") && id("unpaired") > id("cyclegan") && id("cyclegan") > id("cgan") {
            id_hits += 1;
        }
        if h("paired").min(h("unpaired")) > h("cyclegan").max(h("cgan")) {
            h_hits += 1;
        }
    }
    for r in exp.runs.values() {
        seconds += r.train_seconds + r.eval_seconds;
    }
    let table: Vec<String> = ["paired", "unpaired", "cyclegan", "cgan"]
        .iter()
        .map(|m| {
            format!(
                "{m} id {} h {}",
                fmt_list(&exp.per_seed(m, |r| r.aggregate.identity_mean)),
                fmt_list(&exp.per_seed(m, |r| r.aggregate.healthiness))
            )
        })
        .collect();
    let n = exp.cfg.seeds.len();
    Verdict {
        pass: id_hits >= 2 && h_hits >= 2 && seconds <= RUN_BUDGET_SECONDS,
        detail: format!(
            "identity chain on {id_hits}/{n} seeds, healthiness split on {h_hits}/{n} seeds (need 2), \
             {:.2} h for {} runs (<= 4 h); {}",
            seconds / 3600.0,
            exp.runs.len(),
            table.join("; ")
        ),
    }
}

fn paired_healthiness(exp: &Experiment) -> Verdict {
    let h = exp.per_seed("paired", |r| r.aggregate.healthiness);
    let m = mean(&h);
    Verdict { pass: m >= 0.9, detail: format!("mean h {m:.4} over seeds {} (>= 0.9)", fmt_list(&h)) }
}

fn lesion_fidelity(exp: &Experiment) -> Verdict {
    let dice = |m: &str| exp.per_seed(m, |r| r.aggregate.lesion_dice.unwrap_or(f64::NAN));
    let (p, c) = (dice("paired"), dice("cyclegan"));
    let gap = mean(&p) - mean(&c);
    Verdict {
        pass: gap >= 0.2,
        detail: format!(
            "paired {:.4} ({}) vs cyclegan {:.4} ({}), gap {gap:.4} (>= 0.2)",
            mean(&p),
            fmt_list(&p),
            mean(&c),
            fmt_list(&c)
        ),
    }
}

fn healthy_cycle_contract(exp: &Experiment) -> Verdict {
    let s = exp.per_seed("paired", |r| r.healthy_mask_mean.unwrap_or(f64::NAN));
    let i = exp.per_seed("paired", |r| r.healthy_cycle_identity.unwrap_or(f64::NAN));
    Verdict {
        pass: mean(&s) < 0.02 && mean(&i) >= 0.95,
        detail: format!(
            "mean S on healthy {:.4} ({}) (< 0.02), ms_ssim(G(R(x_h,0)), x_h) {:.4} ({}) (>= 0.95)",
            mean(&s),
            fmt_list(&s),
            mean(&i),
            fmt_list(&i)
        ),
    }
}

fn fpre_gate(exp: &Experiment) -> Verdict {
    let l = exp.fpre.test_dice_loss;
    Verdict {
        pass: l <= 0.16,
        detail: format!("held-out Dice loss {l:.4} (<= 0.16), best epoch {}", exp.fpre.best_epoch),
    }
}

// ---------------------------------------------------------------- determinism

fn small_data() -> (Vec<SliceRecord>, Vec<SliceRecord>) {
    let cfg = PhantomConfig {
        resolution: (32, 32),
        n_subjects: 6,
        slices_per_subject: 4,
        lesion_radius_range: (2.0, 4.0),
        seed: 11,
        ..PhantomConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let s = partition(&ds.records, 0, 1.0 / 6.0).unwrap();
    (s.train, s.test)
}

fn small_config(method: Method) -> TrainConfig {
    let mut c = TrainConfig::new(method, (32, 32), ArchConfig { width: 4, ..ArchConfig::default() });
    c.epochs = 3;
    c.batch_size = 4;
    c.seed = 5;
    c.adam.lr = 1e-3;
    c
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
    }
    out
}

fn determinism() -> Verdict {
    let (train, _) = small_data();
    let root = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut checked = Vec::new();
    for method in [Method::Paired, Method::Unpaired, Method::Cgan, Method::Cyclegan] {
        let name = method.as_str();
        let a = root.path().join(format!("{name}-a"));
        let b = root.path().join(format!("{name}-b"));
        let r = root.path().join(format!("{name}-resumed"));
        let result = (|| -> phs_core::Result<()> {
            for d in [&a, &b] {
                let mut t = Trainer::new(small_config(method))?;
                run(&mut t, &train, d, None, &mut |_, _, _| {})?;
            }
            let mut t = Trainer::new(small_config(method))?;
            let report = run(&mut t, &train, &r, Some(5), &mut |_, _, _| {})?;
            drop(t);
            let mut t = Trainer::load(&r.join(CHECKPOINT_DIR))?;
            if t.step != report.final_step {
                problems.push(format!("{name}: checkpoint step {} != {}", t.step, report.final_step));
            }
            run(&mut t, &train, &r, None, &mut |_, _, _| {})?;
            Ok(())
        })();
        if let Err(e) = result {
            problems.push(format!("{name}: {e}"));
            continue;
        }
        let log = |d: &Path| fs::read(d.join(LOG_FILE)).unwrap();
        if log(&a) != log(&b) {
            problems.push(format!("{name}: repeated loss logs differ"));
        }
        if log(&a) != log(&r) {
            problems.push(format!("{name}: resumed loss log differs"));
        }
        if dir_bytes(&a.join(CHECKPOINT_DIR)) != dir_bytes(&b.join(CHECKPOINT_DIR)) {
            problems.push(format!("{name}: repeated checkpoints differ"));
        }
        if dir_bytes(&a.join(CHECKPOINT_DIR)) != dir_bytes(&r.join(CHECKPOINT_DIR)) {
            problems.push(format!("{name}: resumed checkpoint differs"));
        }
        checked.push(name);
    }

    let fc = {
        let mut c = FpreConfig::new((32, 32), ArchConfig { width: 4, ..ArchConfig::default() });
        c.max_epochs = 3;
        c.batch_size = 4;
        c
    };
    let twice: Vec<_> = (0..2).map(|_| pretrain_fpre(&train, &fc, &mut |_| {}).unwrap()).collect();
    if twice[0].net.parameter_hash() != twice[1].net.parameter_hash() {
        problems.push("fpre: repeated training differs".into());
    } else {
        checked.push("fpre");
    }

    Verdict {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("byte-identical logs and checkpoints on repeat and resume for {}", checked.join(", "))
        } else {
            problems.join("; ")
        },
    }
}
