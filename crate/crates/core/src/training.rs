//! Training loops for the factorized model and the baselines, checkpointing
//! and the evaluation segmentor f_pre.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use phs_tensor::{concat_channels, read_checkpoint, write_checkpoint, AdamConfig, AdamState, NamedTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines;
use crate::error::{io_err, Error, Result};
use crate::losses::{
    cycle_terms, dice_loss, l_gan1, l_gan2, total_loss, GeneratorObjective, LossBreakdown, LossWeights, Mode, Side,
};
use crate::metrics::PseudoHealthyModel;
use crate::networks::{
    discriminator_spec, generator_spec, reconstructor_spec, segmentor_spec, ArchConfig, NetworkSpec, NetworkState,
};
use crate::phantom::{fisher_yates, Image, Label, SliceRecord};

pub const TRAINER_VERSION: u32 = 1;
pub const LOG_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_HEADER: [&str; 10] = [
    "step",
    "mode",
    "cc_ph",
    "cc_hh_img",
    "cc_hh_mask",
    "gan1_gen",
    "gan1_disc",
    "seg_or_gan2_gen",
    "gan2_disc",
    "total",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Paired,
    Unpaired,
    Cgan,
    Cyclegan,
    Fpre,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Paired => "paired",
            Method::Unpaired => "unpaired",
            Method::Cgan => "cgan",
            Method::Cyclegan => "cyclegan",
            Method::Fpre => "fpre",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Paired, Method::Unpaired, Method::Cgan, Method::Cyclegan, Method::Fpre]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::Paired => Some(Mode::Paired),
            Method::Unpaired => Some(Mode::Unpaired),
            _ => None,
        }
    }

    /// Network keys in checkpoint order.
    pub fn members(self) -> &'static [&'static str] {
        match self {
            Method::Paired => &["G", "S", "R", "Dx"],
            Method::Unpaired => &["G", "S", "R", "Dx", "Dm"],
            Method::Cgan => &["G", "Dx"],
            Method::Cyclegan => &["G", "G_HP", "Dx", "D_P"],
            Method::Fpre => &["fpre"],
        }
    }

    /// Whether the sampler must supply real masks from other subjects.
    pub fn needs_unpaired_masks(self) -> bool {
        self == Method::Unpaired
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub weights: LossWeights,
    /// Scale on the two H→H cycle terms inside L_CC; 0 ablates Cycle H-H.
    pub hh_cycle_weight: f64,
    /// CycleGAN cycle weight.
    pub cycle_weight: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub resolution: (usize, usize),
    pub arch: ArchConfig,
}

impl TrainConfig {
    pub fn new(method: Method, resolution: (usize, usize), arch: ArchConfig) -> Self {
        Self {
            method,
            weights: method.mode().map(LossWeights::preset).unwrap_or(LossWeights::PAIRED),
            hh_cycle_weight: 1.0,
            cycle_weight: 10.0,
            epochs: 100,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 1,
            checkpoint_interval: 0,
            resolution,
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.method == Method::Fpre {
            return Err(Error::Config("f_pre is trained with pretrain_fpre, not the adversarial trainer".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.hh_cycle_weight >= 0.0 && self.cycle_weight >= 0.0) {
            return Err(Error::Config("cycle weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Deterministic sub-seed for a named stream.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn member_spec(key: &str, resolution: (usize, usize), arch: &ArchConfig) -> Result<NetworkSpec> {
    let spec = match key {
        "G" | "G_HP" => generator_spec(resolution, arch)?,
        "S" | "fpre" => segmentor_spec(resolution, arch)?,
        "R" => reconstructor_spec(resolution, arch)?,
        "Dx" | "Dm" | "D_P" => discriminator_spec(1, resolution, arch)?,
        other => return Err(Error::Config(format!("unknown network key {other}"))),
    };
    Ok(spec.with_name(key))
}

/// A network with its own Adam moments.
#[derive(Clone, Debug)]
pub struct Member {
    pub key: String,
    pub net: NetworkState,
    pub adam: AdamState,
}

impl Member {
    fn fresh(key: &str, seed: u64, resolution: (usize, usize), arch: &ArchConfig, adam: AdamConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        rng.set_stream(u64::from_le_bytes(Sha256::digest(key.as_bytes())[..8].try_into().unwrap()));
        let net = NetworkState::init(member_spec(key, resolution, arch)?, &mut rng);
        let adam = AdamState::new(adam, net.params());
        Ok(Self { key: key.into(), net, adam })
    }

    fn to_named(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> =
            self.net.to_named().into_iter().map(|t| NamedTensor { name: format!("param.{}", t.name), ..t }).collect();
        for (prefix, moments) in [("opt.m", &self.adam.first_moment), ("opt.v", &self.adam.second_moment)] {
            for ((name, p), m) in self.net.param_names().iter().zip(self.net.params()).zip(moments) {
                out.push(NamedTensor { name: format!("{prefix}.{name}"), shape: p.shape().to_vec(), data: m.clone() });
            }
        }
        out
    }

    fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "key": self.key,
            "adam_step": self.adam.step,
            "spec": self.net.spec,
        });
        write_checkpoint(path, &meta, &self.to_named())?;
        Ok(())
    }

    fn load(path: &Path, expected: NetworkSpec, adam: AdamConfig) -> Result<Self> {
        let (header, tensors) = read_checkpoint(path)?;
        let bad = |detail: String| Error::Dataset { path: path.to_path_buf(), detail };
        let spec: NetworkSpec = serde_json::from_value(header.meta["spec"].clone())
            .map_err(|e| bad(format!("checkpoint has no readable network spec: {e}")))?;
        if spec != expected {
            return Err(bad(format!(
                "network {} in checkpoint does not match the configured architecture",
                expected.name
            )));
        }
        let step = header.meta["adam_step"].as_u64().ok_or_else(|| bad("missing adam_step".into()))?;
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for t in tensors {
            if let Some(n) = t.name.strip_prefix("param.") {
                params.push(NamedTensor { name: n.to_string(), ..t });
            } else if t.name.starts_with("opt.m.") {
                first.push(t.data);
            } else if t.name.starts_with("opt.v.") {
                second.push(t.data);
            } else {
                return Err(bad(format!("unexpected tensor {}", t.name)));
            }
        }
        let net = NetworkState::from_named(spec, &params)?;
        if first.len() != params.len() || second.len() != params.len() {
            return Err(bad("optimizer moments missing or incomplete".into()));
        }
        let adam = AdamState { config: adam, step, first_moment: first, second_moment: second };
        Ok(Self { key: expected.name, net, adam })
    }
}

/// One training batch as `[B,1,H,W]` tensors.
pub struct Batch {
    pub x_p: Tensor,
    pub m_p: Tensor,
    pub x_h: Tensor,
    /// Real masks from subjects other than the images in `x_p`.
    pub m_real: Option<Tensor>,
    pub subjects_p: Vec<u32>,
    pub subjects_m: Vec<u32>,
}

/// Rejects unpaired batches where an image and its real mask share a
/// subject.
pub fn check_unpaired(subjects_p: &[u32], subjects_m: &[u32]) -> Result<()> {
    if let Some((i, s)) =
        subjects_p.iter().zip(subjects_m).enumerate().find(|(_, (a, b))| a == b).map(|(i, (a, _))| (i, a))
    {
        return Err(Error::Contract(format!(
            "unpaired batch position {i} pairs an image with a mask from the same subject {s}"
        )));
    }
    Ok(())
}

/// Deterministic batch schedule: batch `step` depends only on
/// `(seed, step)`, so resuming needs nothing but the step count.
pub struct Sampler {
    seed: u64,
    batch_size: usize,
    pathological: Vec<SliceRecord>,
    healthy: Vec<SliceRecord>,
    with_masks: bool,
}

impl Sampler {
    pub fn new(records: &[SliceRecord], batch_size: usize, seed: u64, with_masks: bool) -> Result<Self> {
        let pathological: Vec<SliceRecord> =
            records.iter().filter(|r| r.label == Label::Pathological).cloned().collect();
        let healthy: Vec<SliceRecord> = records.iter().filter(|r| r.label == Label::Healthy).cloned().collect();
        if pathological.is_empty() || healthy.is_empty() {
            return Err(Error::Contract(format!(
                "training needs both pools, got {} pathological and {} healthy slices",
                pathological.len(),
                healthy.len()
            )));
        }
        if with_masks {
            let first = pathological[0].subject_id;
            if pathological.iter().all(|r| r.subject_id == first) {
                return Err(Error::Contract("unpaired masks need pathological slices from 2+ subjects".into()));
            }
        }
        Ok(Self { seed, batch_size, pathological, healthy, with_masks })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.pathological.len().div_ceil(self.batch_size) as u64
    }

    fn permutation(&self, tag: &str, epoch: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        fisher_yates(&mut idx, &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, tag, epoch)));
        idx
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let b = self.batch_size;
        let pick = |pool: &[SliceRecord], perm: &[usize]| -> Vec<SliceRecord> {
            (0..b).map(|i| pool[perm[(k * b + i) % pool.len()]].clone()).collect()
        };
        let bp = pick(&self.pathological, &self.permutation("pool.pathological", epoch, self.pathological.len()));
        let bh = pick(&self.healthy, &self.permutation("pool.healthy", epoch, self.healthy.len()));
        let subjects_p: Vec<u32> = bp.iter().map(|r| r.subject_id).collect();
        let (m_real, subjects_m) = if self.with_masks {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "masks", step));
            let mut chosen = Vec::with_capacity(b);
            for &s in &subjects_p {
                let candidates: Vec<&SliceRecord> = self.pathological.iter().filter(|r| r.subject_id != s).collect();
                chosen.push(candidates[rng.random_range(0..candidates.len())]);
            }
            let subjects: Vec<u32> = chosen.iter().map(|r| r.subject_id).collect();
            check_unpaired(&subjects_p, &subjects)?;
            (Some(Image::batch(chosen.iter().map(|r| &r.mask))?), subjects)
        } else {
            (None, Vec::new())
        };
        Ok(Batch {
            x_p: Image::batch(bp.iter().map(|r| &r.image))?,
            m_p: Image::batch(bp.iter().map(|r| &r.mask))?,
            x_h: Image::batch(bh.iter().map(|r| &r.image))?,
            m_real,
            subjects_p,
            subjects_m,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.item()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// Networks, optimizer state and step counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub members: Vec<Member>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerManifest {
    pub version: u32,
    pub method: Method,
    pub step: u64,
    pub config: TrainConfig,
    pub members: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let members = cfg
            .method
            .members()
            .iter()
            .map(|k| Member::fresh(k, cfg.seed, cfg.resolution, &cfg.arch, cfg.adam))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, members, step: 0 })
    }

    pub fn method(&self) -> Method {
        self.cfg.method
    }

    pub fn net(&self, key: &str) -> &NetworkState {
        &self.members.iter().find(|m| m.key == key).unwrap_or_else(|| panic!("no network {key}")).net
    }

    pub fn has(&self, key: &str) -> bool {
        self.members.iter().any(|m| m.key == key)
    }

    pub fn zero_grads(&self) {
        for m in &self.members {
            m.net.zero_grad();
        }
    }

    /// Adam step on the listed networks, then clears every grad.
    pub(crate) fn update(&mut self, keys: &[&str]) -> Result<()> {
        for m in self.members.iter_mut().filter(|m| keys.contains(&m.key.as_str())) {
            m.adam.step(m.net.params())?;
        }
        self.zero_grads();
        Ok(())
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.train_step_observed(batch, &mut |_, _| {})
    }

    /// As `train_step`, calling `observe` right after each update phase.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        observe: &mut dyn FnMut(Phase, &Trainer),
    ) -> Result<LossBreakdown> {
        match self.cfg.method {
            Method::Paired | Method::Unpaired => self.factorized_step(batch, observe),
            Method::Cgan => baselines::cgan_step(self, batch, observe),
            Method::Cyclegan => baselines::cyclegan_step(self, batch, observe),
            Method::Fpre => Err(Error::Config("f_pre has no adversarial step".into())),
        }
    }

    /// Cycle P-H and Cycle H-H forward passes, one discriminator update on
    /// detached fakes, then one joint G/S/R update.
    fn factorized_step(&mut self, b: &Batch, observe: &mut dyn FnMut(Phase, &Trainer)) -> Result<LossBreakdown> {
        let mode = self.cfg.method.mode().expect("factorized method");
        let (g, s, r, dx) =
            (self.net("G").clone(), self.net("S").clone(), self.net("R").clone(), self.net("Dx").clone());
        let dm = (mode == Mode::Unpaired).then(|| self.net("Dm").clone());
        let m_real = match (&dm, &b.m_real) {
            (Some(_), None) => return Err(Error::Contract("unpaired step needs real masks".into())),
            (_, m) => m.clone(),
        };
        if dm.is_some() {
            check_unpaired(&b.subjects_p, &b.subjects_m)?;
        }
        let m_h = Tensor::zeros(b.x_h.shape())?;

        let fake_ph = g.forward(&b.x_p)?;
        let mask_ph = s.forward(&b.x_p)?;
        let rec_p = r.forward(&concat_channels(&[&fake_ph, &mask_ph])?)?;
        let fake_hh = r.forward(&concat_channels(&[&b.x_h, &m_h])?)?;
        let mask_hh = s.forward(&fake_hh)?;
        let rec_h = g.forward(&fake_hh)?;

        self.zero_grads();
        let d1 = l_gan1(&dx, &fake_ph, &fake_hh, &b.x_h, Side::Discriminator)?;
        let mut out = LossBreakdown { gan1_disc: scalar(&d1)?, ..LossBreakdown::default() };
        let mut d_total = d1;
        if let (Some(dm), Some(mr)) = (&dm, &m_real) {
            let d2 = l_gan2(dm, &mask_ph, mr, Side::Discriminator)?;
            out.gan2_disc = scalar(&d2)?;
            d_total = d_total.add(&d2)?;
        }
        d_total.backward()?;
        self.update(if dm.is_some() { &["Dx", "Dm"] } else { &["Dx"] })?;
        observe(Phase::Discriminator, self);

        let cyc = cycle_terms(&b.x_p, &rec_p, &b.x_h, &rec_h, &m_h, &mask_hh)?;
        let cc = cyc.ph.add(&cyc.hh_img.add(&cyc.hh_mask)?.mul_scalar(self.cfg.hh_cycle_weight))?;
        let gan1 = l_gan1(&dx, &fake_ph, &fake_hh, &b.x_h, Side::Generator)?;
        let (seg, gan2) = match (&dm, &m_real) {
            (Some(dm), Some(mr)) => (None, Some(l_gan2(dm, &mask_ph, mr, Side::Generator)?)),
            _ => (Some(dice_loss(&mask_ph, &b.m_p)?), None),
        };
        out.cc_ph = scalar(&cyc.ph)?;
        out.cc_hh_img = scalar(&cyc.hh_img)?;
        out.cc_hh_mask = scalar(&cyc.hh_mask)?;
        out.gan1_gen = scalar(&gan1)?;
        out.seg_or_gan2_gen = scalar(seg.as_ref().or(gan2.as_ref()).expect("one branch"))?;
        let total = total_loss(mode, &GeneratorObjective { cc, gan1, seg, gan2 }, &self.cfg.weights)?;
        out.total = scalar(&total)?;
        total.backward()?;
        self.update(&["G", "S", "R"])?;
        observe(Phase::Generator, self);
        Ok(out)
    }

    pub fn manifest(&self) -> TrainerManifest {
        TrainerManifest {
            version: TRAINER_VERSION,
            method: self.cfg.method,
            step: self.step,
            config: self.cfg.clone(),
            members: self.members.iter().map(|m| m.key.clone()).collect(),
        }
    }

    /// Writes `trainer.json` plus one checkpoint file per network (weights
    /// and Adam moments).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for m in &self.members {
            m.save(&dir.join(format!("{}.ckpt", m.key)))?;
        }
        let path = dir.join("trainer.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest())? + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_trainer_manifest(dir)?;
        let cfg = manifest.config;
        cfg.validate()?;
        let members = cfg
            .method
            .members()
            .iter()
            .map(|k| {
                let spec = member_spec(k, cfg.resolution, &cfg.arch)?;
                Member::load(&dir.join(format!("{k}.ckpt")), spec, cfg.adam)
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, members, step: manifest.step })
    }
}

pub fn read_trainer_manifest(dir: &Path) -> Result<TrainerManifest> {
    let path = dir.join("trainer.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset { path: path.clone(), detail: format!("corrupt trainer manifest: {e}") })?;
    let version = value["version"].as_u64();
    if version != Some(u64::from(TRAINER_VERSION)) {
        return Err(Error::Dataset {
            path,
            detail: format!("trainer manifest version {version:?} is not supported (expected {TRAINER_VERSION})"),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Dataset { path, detail: format!("corrupt trainer manifest: {e}") })
}

impl PseudoHealthyModel for Trainer {
    fn method(&self) -> &str {
        self.cfg.method.as_str()
    }

    fn synthesize(&self, x: &Tensor) -> Result<Tensor> {
        self.net("G").forward(x)
    }

    fn reconstruct(&self, x: &Tensor) -> Result<Option<Tensor>> {
        match self.cfg.method {
            Method::Paired | Method::Unpaired => {
                let fake = self.net("G").forward(x)?;
                let mask = self.net("S").forward(x)?;
                Ok(Some(self.net("R").forward(&concat_channels(&[&fake, &mask])?)?))
            }
            Method::Cyclegan => Ok(Some(self.net("G_HP").forward(&self.net("G").forward(x)?)?)),
            _ => Ok(None),
        }
    }
}

/// Exact, locale-free float text for the loss log.
fn fmt_loss(v: f64) -> String {
    format!("{v:e}")
}

pub fn log_row(step: u64, method: Method, l: &LossBreakdown) -> String {
    [
        step.to_string(),
        method.as_str().to_string(),
        fmt_loss(l.cc_ph),
        fmt_loss(l.cc_hh_img),
        fmt_loss(l.cc_hh_mask),
        fmt_loss(l.gan1_gen),
        fmt_loss(l.gan1_disc),
        fmt_loss(l.seg_or_gan2_gen),
        fmt_loss(l.gan2_disc),
        fmt_loss(l.total),
    ]
    .join(",")
}

/// Opens the loss log for appending at `step`: a fresh header at step 0,
/// otherwise the existing log cut back to its first `step` rows.
fn open_log(path: &Path, step: u64) -> Result<fs::File> {
    let mut text = LOG_HEADER.join(",") + "\n";
    if step > 0 {
        let existing = fs::read_to_string(path).map_err(io_err(path))?;
        let rows: Vec<&str> = existing.lines().skip(1).take(step as usize).collect();
        if rows.len() as u64 != step {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                detail: format!("loss log has {} rows but the checkpoint is at step {step}", rows.len()),
            });
        }
        for r in rows {
            text += r;
            text.push('\n');
        }
    }
    fs::write(path, &text).map_err(io_err(path))?;
    fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

pub struct RunReport {
    pub steps_per_epoch: u64,
    pub final_step: u64,
    pub last: Option<LossBreakdown>,
}

/// Trains until `cfg.epochs` epochs (or `stop_at` steps) are done, appending
/// to `out/losses.csv` and checkpointing under `out/checkpoint`.
pub fn run(
    trainer: &mut Trainer,
    train_records: &[SliceRecord],
    out: &Path,
    stop_at: Option<u64>,
    progress: &mut dyn FnMut(u64, u64, &LossBreakdown),
) -> Result<RunReport> {
    let cfg = trainer.cfg.clone();
    if let Some(r) = train_records.first() {
        if (r.image.height, r.image.width) != cfg.resolution {
            return Err(Error::Contract(format!(
                "data is {}x{} but the run is configured for {}x{}",
                r.image.height, r.image.width, cfg.resolution.0, cfg.resolution.1
            )));
        }
    }
    let sampler = Sampler::new(train_records, cfg.batch_size, cfg.seed, cfg.method.needs_unpaired_masks())?;
    let spe = sampler.steps_per_epoch();
    let total = u64::from(cfg.epochs) * spe;
    let end = stop_at.map_or(total, |s| s.min(total));
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path, trainer.step)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut last = None;
    while trainer.step < end {
        let batch = sampler.batch(trainer.step)?;
        let losses = trainer.train_step(&batch)?;
        if !losses.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}: {losses:?}", trainer.step)));
        }
        writeln!(log, "{}", log_row(trainer.step, cfg.method, &losses)).map_err(io_err(&log_path))?;
        trainer.step += 1;
        progress(trainer.step, total, &losses);
        last = Some(losses);
        if cfg.checkpoint_interval > 0 && trainer.step.is_multiple_of(cfg.checkpoint_interval) {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    Ok(RunReport { steps_per_epoch: spe, final_step: trainer.step, last })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpreConfig {
    pub max_epochs: u32,
    /// Epochs without validation improvement before stopping.
    pub patience: u32,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of training subjects held out for plateau detection.
    pub val_fraction: f64,
    pub resolution: (usize, usize),
    pub arch: ArchConfig,
}

impl FpreConfig {
    pub fn new(resolution: (usize, usize), arch: ArchConfig) -> Self {
        Self {
            max_epochs: 60,
            patience: 8,
            batch_size: 8,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            seed: 1,
            val_fraction: 0.15,
            resolution,
            arch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpreHistory {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct FpreOutcome {
    pub net: NetworkState,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub history: Vec<FpreHistory>,
}

/// Mean per-slice soft Dice loss of a segmentor over pathological records.
pub fn segmentor_dice_loss(net: &NetworkState, records: &[SliceRecord]) -> Result<f64> {
    let path: Vec<&SliceRecord> = records.iter().filter(|r| r.label == Label::Pathological).collect();
    if path.is_empty() {
        return Err(Error::Contract("Dice evaluation needs pathological records".into()));
    }
    let mut total = 0.0;
    phs_tensor::no_grad(|| -> Result<()> {
        for chunk in path.chunks(16) {
            let pred = net.forward(&Image::batch(chunk.iter().map(|r| &r.image))?)?;
            for (p, r) in Image::unbatch(&pred)?.iter().zip(chunk) {
                total += scalar(&dice_loss(&p.to_tensor(), &r.mask.to_tensor())?)?;
            }
        }
        Ok(())
    })?;
    Ok(total / path.len() as f64)
}

/// Trains the evaluation U-Net with Dice loss on all training slices,
/// holding out some training subjects to detect the plateau, and returns
/// the best validation checkpoint.
pub fn pretrain_fpre(
    train: &[SliceRecord],
    cfg: &FpreConfig,
    progress: &mut dyn FnMut(&FpreHistory),
) -> Result<FpreOutcome> {
    if !train.iter().any(|r| r.label == Label::Pathological) {
        return Err(Error::Contract("f_pre training set has no pathological records".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let split = crate::phantom::partition(train, derive_seed(cfg.seed, "fpre.val", 0), cfg.val_fraction)?;
    let (fit, val) = if split.test.iter().any(|r| r.label == Label::Pathological) {
        (split.train, split.test)
    } else {
        (train.to_vec(), train.to_vec())
    };
    let mut member = Member::fresh("fpre", cfg.seed, cfg.resolution, &cfg.arch, cfg.adam)?;
    let mut best = (member.net.to_named(), f64::INFINITY, 0);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        fisher_yates(&mut order, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "fpre.epoch", u64::from(epoch))));
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = Image::batch(chunk.iter().map(|&i| &fit[i].image))?;
            let m = Image::batch(chunk.iter().map(|&i| &fit[i].mask))?;
            let loss = dice_loss(&member.net.forward(&x)?, &m)?;
            sum += scalar(&loss)?;
            n += 1;
            loss.backward()?;
            member.adam.step(member.net.params())?;
            member.net.zero_grad();
        }
        let val_loss = segmentor_dice_loss(&member.net, &val)?;
        let h = FpreHistory { epoch, train_loss: sum / n as f64, val_loss };
        progress(&h);
        history.push(h);
        if val_loss < best.1 {
            best = (member.net.to_named(), val_loss, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let net = NetworkState::from_named(member.net.spec.clone(), &best.0)?;
    Ok(FpreOutcome { net, best_epoch: best.2, best_val_loss: best.1, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpreManifest {
    pub version: u32,
    pub method: Method,
    pub config: FpreConfig,
    pub best_epoch: u32,
    pub best_val_loss: f64,
}

pub fn save_fpre(dir: &Path, outcome: &FpreOutcome, cfg: &FpreConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let member =
        Member { key: "fpre".into(), net: outcome.net.clone(), adam: AdamState::new(cfg.adam, outcome.net.params()) };
    member.save(&dir.join("fpre.ckpt"))?;
    let manifest = FpreManifest {
        version: TRAINER_VERSION,
        method: Method::Fpre,
        config: cfg.clone(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
    };
    let path = dir.join("trainer.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_fpre(dir: &Path) -> Result<NetworkState> {
    let path = dir.join("trainer.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: FpreManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset { path: path.clone(), detail: format!("not an f_pre manifest: {e}") })?;
    if manifest.version != TRAINER_VERSION || manifest.method != Method::Fpre {
        return Err(Error::Dataset { path, detail: "not a supported f_pre checkpoint".into() });
    }
    let spec = member_spec("fpre", manifest.config.resolution, &manifest.config.arch)?;
    Ok(Member::load(&dir.join("fpre.ckpt"), spec, manifest.config.adam)?.net)
}
