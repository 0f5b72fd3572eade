//! Synthetic brain phantoms with hyperintense lesions and known healthy
//! ground truth.
//!
//! A subject is a short stack of axial-like slices sharing one head shape,
//! ventricle geometry and texture. Lesions are stamped on top of the
//! healthy render, so outside the lesion mask every pathological image is
//! identical to its `truth_healthy` counterpart.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use phs_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const GENERATOR_VERSION: &str = "phantom-1";
pub const MANIFEST_VERSION: u32 = 1;

/// Single-channel image plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    /// Stacks equally sized images into a `[B, 1, H, W]` tensor.
    pub fn batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
        let mut dims = None;
        let mut data = Vec::new();
        let mut n = 0;
        for im in images {
            match dims {
                None => dims = Some((im.height, im.width)),
                Some(d) if d != (im.height, im.width) => {
                    return Err(Error::Contract(format!(
                        "cannot batch {}x{} with {}x{}",
                        im.height, im.width, d.0, d.1
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(&im.data);
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::Contract("empty batch".into()))?;
        Ok(Tensor::new(&[n, 1, h, w], data)?)
    }

    /// Splits a `[B, 1, H, W]` tensor back into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Contract(format!("expected [B, 1, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        Ok(t.data().chunks(h * w).map(|c| Image { height: h, width: w, data: c.to_vec() }).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Pathological,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub subject_id: u32,
    pub index: u32,
    pub label: Label,
    pub image: Image,
    pub mask: Image,
    /// Lesion-free render of the same slice; only phantoms have one.
    pub truth_healthy: Option<Image>,
}

impl SliceRecord {
    pub fn check_label(&self) -> Result<()> {
        let healthy = self.mask.is_all_zero();
        if healthy != (self.label == Label::Healthy) {
            return Err(Error::Contract(format!(
                "subject {} slice {}: label {:?} disagrees with mask",
                self.subject_id, self.index, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub resolution: (usize, usize),
    pub n_subjects: u32,
    pub slices_per_subject: u32,
    pub lesion_probability: f64,
    pub lesion_radius_range: (f64, f64),
    pub lesion_intensity_boost: f64,
    pub texture_noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
            n_subjects: 28,
            slices_per_subject: 8,
            lesion_probability: 0.5,
            lesion_radius_range: (4.0, 8.0),
            lesion_intensity_boost: 0.4,
            texture_noise_std: 0.04,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("phantom resolution {h}x{w} must be divisible by 16")));
        }
        let (rmin, rmax) = self.lesion_radius_range;
        if !(rmin >= 2.0 && rmax >= rmin) {
            return Err(Error::Config(format!("lesion radius range ({rmin}, {rmax}) needs 2 <= min <= max")));
        }
        if 4.0 * rmax > h.min(w) as f64 {
            return Err(Error::Config(format!("lesion radius {rmax} too large for {h}x{w}")));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::Config("lesion probability must lie in [0, 1]".into()));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::Config("slices_per_subject must be positive".into()));
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, subject_id: u32, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(subject_id)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-subject anatomy, fixed across its slices.
struct Anatomy {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    tilt: f64,
    vent_dx: f64,
    vent_dy: f64,
    vent_rx: f64,
    vent_ry: f64,
    tissue: f64,
    cortex: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(1.0..3.5) * 2.0 * PI / wf,
                    rng.random_range(1.0..3.5) * 2.0 * PI / hf,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        Self {
            cx: wf / 2.0 + rng.random_range(-1.5..1.5),
            cy: hf / 2.0 + rng.random_range(-1.5..1.5),
            ax: wf * rng.random_range(0.37..0.43),
            ay: hf * rng.random_range(0.41..0.46),
            tilt: rng.random_range(-0.12..0.12),
            vent_dx: wf * rng.random_range(0.06..0.10),
            vent_dy: hf * rng.random_range(-0.04..0.03),
            vent_rx: wf * rng.random_range(0.045..0.07),
            vent_ry: hf * rng.random_range(0.12..0.18),
            tissue: rng.random_range(0.50..0.58),
            cortex: rng.random_range(0.10..0.16),
            waves,
        }
    }

    /// Normalized elliptical radius of `(x, y)` for the brain outline at a
    /// given slice scale.
    fn brain_rho(&self, x: f64, y: f64, scale: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / (self.ax * scale)).powi(2) + (v / (self.ay * scale)).powi(2)).sqrt()
    }

    fn render(&self, h: usize, w: usize, z: f64, noise_std: f64, grain: &[f64]) -> Image {
        // slices away from the middle shrink the outline and ventricles
        let scale = (1.0 - 0.35 * z * z).sqrt();
        let vscale = 1.0 - 0.5 * z.abs();
        let mut data = vec![0.0f32; h * w];
        for yi in 0..h {
            for xi in 0..w {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let rho = self.brain_rho(x, y, scale);
                let inside = 1.0 - smoothstep(0.96, 1.02, rho);
                if inside <= 0.0 {
                    continue;
                }
                let mut v = self.tissue + self.cortex * smoothstep(0.72, 0.93, rho);
                let mut tex = 0.0;
                for &(fx, fy, ph, amp) in &self.waves {
                    tex += amp * (fx * x + fy * y + ph + 1.3 * z).sin();
                }
                v += noise_std * (tex / 2.0 + grain[yi * w + xi]);
                // two mirrored crescent ventricles
                for side in [-1.0, 1.0] {
                    let vx = self.cx + side * self.vent_dx * vscale;
                    let vy = self.cy + self.vent_dy;
                    let (rx, ry) = (self.vent_rx * vscale, self.vent_ry * vscale);
                    let outer = ((x - vx) / rx).powi(2) + ((y - vy) / ry).powi(2);
                    let inner = ((x - vx - side * 0.6 * rx) / (0.8 * rx)).powi(2) + ((y - vy) / (0.85 * ry)).powi(2);
                    let crescent = (1.0 - smoothstep(0.8, 1.1, outer)) * smoothstep(0.8, 1.1, inner);
                    v *= 1.0 - 0.75 * crescent;
                }
                data[yi * w + xi] = (v * inside).max(0.0) as f32;
            }
        }
        Image { height: h, width: w, data }
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    lobes: f64,
    lobe_phase: f64,
    lobe_amp: f64,
}

impl Lesion {
    /// Soft stamp weight: 0.5 on the jittered boundary, ramping to 1 one
    /// pixel inside.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let theta = v.atan2(u);
        let r_norm = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let jitter = 1.0 + self.lobe_amp * (self.lobes * theta + self.lobe_phase).sin();
        let mean_r = 0.5 * (self.rx + self.ry);
        let dist_px = (jitter - r_norm) * mean_r;
        (0.5 + dist_px).clamp(0.0, 1.0)
    }
}

fn raw_subject(cfg: &PhantomConfig, subject_id: u32) -> Vec<(Image, Image, Image)> {
    let (h, w) = cfg.resolution;
    let mut rng = subject_rng(cfg.seed, subject_id, 0);
    let anatomy = Anatomy::draw(&mut rng, h, w);
    let grain: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0) * 0.5).collect();
    let n = cfg.slices_per_subject;
    let (rmin, rmax) = cfg.lesion_radius_range;

    (0..n)
        .map(|k| {
            let z = if n > 1 { 2.0 * k as f64 / (n - 1) as f64 - 1.0 } else { 0.0 } * 0.8;
            let truth = anatomy.render(h, w, z, cfg.texture_noise_std, &grain);
            let mut lrng = subject_rng(cfg.seed, subject_id, 1 + u64::from(k));
            let mut soft = vec![0.0f64; h * w];
            if lrng.random_bool(cfg.lesion_probability) {
                let count = lrng.random_range(1..=3);
                let scale = (1.0 - 0.35 * z * z).sqrt();
                for _ in 0..count {
                    let rx = lrng.random_range(rmin..=rmax);
                    let ry = lrng.random_range(rmin..=rmax);
                    let reach = rx.max(ry) * 1.15 + 1.5;
                    // centre anywhere the whole lesion stays inside tissue
                    let (cx, cy) = loop {
                        let cx = lrng.random_range(0.0..w as f64);
                        let cy = lrng.random_range(0.0..h as f64);
                        let (dx, dy) = (cx - anatomy.cx, cy - anatomy.cy);
                        let margin_x = (anatomy.ax * scale * 0.92 - reach).max(1.0);
                        let margin_y = (anatomy.ay * scale * 0.92 - reach).max(1.0);
                        if (dx / margin_x).powi(2) + (dy / margin_y).powi(2) <= 1.0 {
                            break (cx, cy);
                        }
                    };
                    let lesion = Lesion {
                        cx,
                        cy,
                        rx,
                        ry,
                        angle: lrng.random_range(0.0..PI),
                        lobes: f64::from(lrng.random_range(2..=4)),
                        lobe_phase: lrng.random_range(0.0..2.0 * PI),
                        lobe_amp: lrng.random_range(0.0..0.12),
                    };
                    for yi in 0..h {
                        for xi in 0..w {
                            let wgt = lesion.weight(xi as f64 + 0.5, yi as f64 + 0.5);
                            let s = &mut soft[yi * w + xi];
                            *s = s.max(wgt);
                        }
                    }
                }
            }
            let mut image = truth.clone();
            let mut mask = Image::zeros(h, w);
            for (i, &wgt) in soft.iter().enumerate() {
                if wgt >= 0.5 && truth.data[i] > 0.0 {
                    mask.data[i] = 1.0;
                    image.data[i] = truth.data[i] + (cfg.lesion_intensity_boost * wgt) as f32;
                }
            }
            (image, mask, truth)
        })
        .collect()
}

/// Renders and normalizes all slices of one subject. Deterministic in
/// `(cfg.seed, subject_id)`.
pub fn generate_subject(cfg: &PhantomConfig, subject_id: u32) -> Result<Vec<SliceRecord>> {
    cfg.validate()?;
    let raw = raw_subject(cfg, subject_id);
    let volume: Vec<&Image> = raw.iter().map(|(im, _, _)| im).collect();
    let v = percentile_995(&volume)?;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(k, (image, mask, truth))| {
            let label = if mask.is_all_zero() { Label::Healthy } else { Label::Pathological };
            SliceRecord {
                subject_id,
                index: k as u32,
                label,
                image: normalize_by(image, v),
                mask: mask.clone(),
                truth_healthy: Some(normalize_by(truth, v)),
            }
        })
        .collect())
}

pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Dataset> {
    let mut records = Vec::new();
    for s in 0..cfg.n_subjects {
        records.extend(generate_subject(cfg, s)?);
    }
    Ok(Dataset { resolution: cfg.resolution, seed: cfg.seed, generator_version: GENERATOR_VERSION.into(), records })
}

/// Nearest-rank 99.5th percentile over every pixel of the volume: the
/// smallest value with at least 99.5% of pixels at or below it.
pub fn percentile_995(volume: &[&Image]) -> Result<f32> {
    let mut values: Vec<f32> = volume.iter().flat_map(|im| im.data.iter().copied()).collect();
    if values.is_empty() {
        return Err(Error::Contract("percentile of an empty volume".into()));
    }
    values.sort_by(f32::total_cmp);
    let rank = ((0.995 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(values[rank - 1])
}

fn normalize_by(image: &Image, v: f32) -> Image {
    Image { height: image.height, width: image.width, data: image.data.iter().map(|&x| x.clamp(0.0, v) / v).collect() }
}

/// Clips `raw` to `[0, V99.5]` of its volume and rescales to `[0, 1]`.
pub fn preprocess(raw: &Image, volume_context: &[&Image]) -> Result<Image> {
    let v = percentile_995(volume_context)?;
    if v <= 0.0 {
        return Err(Error::Contract("volume is all zero (99.5th percentile is 0)".into()));
    }
    Ok(normalize_by(raw, v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: (usize, usize),
    pub seed: u64,
    pub generator_version: String,
    pub records: Vec<SliceRecord>,
}

impl Dataset {
    pub fn subject_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.subject_id).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.records.iter().any(|r| r.label == Label::Pathological)
    }

    /// SHA-256 over every record's identity and payload bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}x{}", self.resolution.0, self.resolution.1));
        for r in &self.records {
            h.update(r.subject_id.to_le_bytes());
            h.update(r.index.to_le_bytes());
            h.update([r.label as u8]);
            for im in [Some(&r.image), Some(&r.mask), r.truth_healthy.as_ref()].into_iter().flatten() {
                for v in &im.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Subject-level split with separate healthy and pathological pools.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<SliceRecord>,
    pub test: Vec<SliceRecord>,
    pub train_subjects: BTreeSet<u32>,
    pub test_subjects: BTreeSet<u32>,
}

pub fn pool(records: &[SliceRecord], label: Label) -> Vec<&SliceRecord> {
    records.iter().filter(|r| r.label == label).collect()
}

impl Split {
    pub fn train_pathological(&self) -> Vec<&SliceRecord> {
        pool(&self.train, Label::Pathological)
    }

    pub fn train_healthy(&self) -> Vec<&SliceRecord> {
        pool(&self.train, Label::Healthy)
    }

    pub fn test_pathological(&self) -> Vec<&SliceRecord> {
        pool(&self.test, Label::Pathological)
    }

    pub fn test_healthy(&self) -> Vec<&SliceRecord> {
        pool(&self.test, Label::Healthy)
    }
}

/// Splits by subject: `round(test_fraction · subjects)` subjects (at least
/// one, at most all but one) go to the test side.
pub fn partition(records: &[SliceRecord], split_seed: u64, test_fraction: f64) -> Result<Split> {
    let subjects: Vec<u32> = records.iter().map(|r| r.subject_id).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::Contract(format!("partition needs at least 2 subjects, got {}", subjects.len())));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let n_test = ((test_fraction * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1);
    let mut order = subjects.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    fisher_yates(&mut order, &mut rng);
    let test_subjects: BTreeSet<u32> = order[..n_test].iter().copied().collect();
    let train_subjects: BTreeSet<u32> = order[n_test..].iter().copied().collect();
    let (test, train) = records.iter().cloned().partition(|r| test_subjects.contains(&r.subject_id));
    Ok(Split { train, test, train_subjects, test_subjects })
}

pub(crate) fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: u32,
    pub index: u32,
    pub label: Label,
    pub files: RecordFiles,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_version: String,
    pub resolution: [usize; 2],
    pub seed: u64,
    pub n_subjects: usize,
    pub records: Vec<ManifestRecord>,
}

fn payload_name(subject: u32, index: u32, kind: &str) -> String {
    format!("s{subject}_{index}_{kind}.f32")
}

fn write_payload(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_payload(path: &Path, (h, w): (usize, usize)) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let want = 4 * h * w;
    if bytes.len() != want {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: format!(
                "payload truncated or oversized at offset {}: expected {want} bytes for {h}x{w}",
                bytes.len().min(want)
            ),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { height: h, width: w, data })
}

/// Writes `manifest.json` plus one raw little-endian f32 file per plane.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        r.check_label()?;
        let files = RecordFiles {
            image: payload_name(r.subject_id, r.index, "image"),
            mask: payload_name(r.subject_id, r.index, "mask"),
            truth: r.truth_healthy.as_ref().map(|_| payload_name(r.subject_id, r.index, "truth")),
        };
        write_payload(&dir.join(&files.image), &r.image)?;
        write_payload(&dir.join(&files.mask), &r.mask)?;
        if let (Some(t), Some(name)) = (&r.truth_healthy, &files.truth) {
            write_payload(&dir.join(name), t)?;
        }
        records.push(ManifestRecord { subject_id: r.subject_id, index: r.index, label: r.label, files });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator_version: dataset.generator_version.clone(),
        resolution: [dataset.resolution.0, dataset.resolution.1],
        seed: dataset.seed,
        n_subjects: dataset.subject_ids().len(),
        records,
    };
    let path = dir.join("manifest.json");
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |detail: String| Error::Dataset { path: path.clone(), detail };
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| bad(format!("corrupt manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("manifest field `version` is {}, expected {MANIFEST_VERSION}", manifest.version)));
    }
    let resolution = (manifest.resolution[0], manifest.resolution[1]);
    let subjects: BTreeSet<u32> = manifest.records.iter().map(|r| r.subject_id).collect();
    if subjects.len() != manifest.n_subjects {
        return Err(bad(format!(
            "manifest field `n_subjects` says {} but records name {} subjects",
            manifest.n_subjects,
            subjects.len()
        )));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for m in &manifest.records {
        let truth = m.files.truth.as_ref().map(|t| read_payload(&dir.join(t), resolution)).transpose()?;
        let record = SliceRecord {
            subject_id: m.subject_id,
            index: m.index,
            label: m.label,
            image: read_payload(&dir.join(&m.files.image), resolution)?,
            mask: read_payload(&dir.join(&m.files.mask), resolution)?,
            truth_healthy: truth,
        };
        record.check_label().map_err(|e| bad(e.to_string()))?;
        records.push(record);
    }
    Ok(Dataset { resolution, seed: manifest.seed, generator_version: manifest.generator_version, records })
}

/// 8-bit grayscale PNG, values scaled by 255 and rounded.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let to_err = |e: png::EncodingError| Error::Dataset { path: path.to_path_buf(), detail: e.to_string() };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&bytes).map_err(to_err)?;
    Ok(())
}

/// Tiles images row-major into one picture, each enlarged `scale`× by
/// pixel replication.
pub fn tile_grid(rows: &[Vec<Image>], scale: usize) -> Result<Image> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Contract("empty grid".into()))?;
    let (h, w) = (first.height * scale, first.width * scale);
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Image::zeros(h * rows.len(), w * ncols);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, im) in row.iter().enumerate() {
            if im.height * scale != h || im.width * scale != w {
                return Err(Error::Contract("grid images differ in size".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    out.data[(ri * h + y) * out.width + ci * w + x] = im.data[(y / scale) * im.width + x / scale];
                }
            }
        }
    }
    Ok(out)
}

/// Records grouped by subject, in subject order.
pub fn by_subject(records: &[SliceRecord]) -> BTreeMap<u32, Vec<&SliceRecord>> {
    let mut m: BTreeMap<u32, Vec<&SliceRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.subject_id).or_default().push(r);
    }
    m
}

pub fn dataset_dir_is_empty(dir: &Path) -> bool {
    match fs::read_dir(dir) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => true,
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
