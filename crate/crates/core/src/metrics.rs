//! Evaluation: masked MS-SSIM identity, f_pre-based healthiness, and
//! phantom-only diagnostics.

use std::fs;
use std::path::Path;

use phs_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::networks::NetworkState;
use crate::phantom::{Image, Label, SliceRecord};

pub const STANDARD_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub window_width: usize,
    pub window_sigma: f64,
    pub scales: usize,
    pub scale_weights: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

impl MsSsimConfig {
    /// The first `scales` standard weights, renormalized to sum to 1.
    pub fn with_scales(scales: usize) -> Self {
        let used = &STANDARD_SCALE_WEIGHTS[..scales.clamp(1, 5)];
        let total: f64 = used.iter().sum();
        Self {
            window_width: 11,
            window_sigma: 1.5,
            scales: used.len(),
            scale_weights: used.iter().map(|w| w / total).collect(),
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }

    /// As many scales (up to five) as keep the coarsest level at least one
    /// window wide.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        let mut scales = 0;
        let (mut h, mut w) = (height, width);
        while scales < 5 && h >= 11 && w >= 11 {
            scales += 1;
            h /= 2;
            w /= 2;
        }
        Self::with_scales(scales.max(1))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.window_width.is_multiple_of(2) {
            return Err(Error::Config(format!("window width {} must be odd", self.window_width)));
        }
        if self.scales == 0 || self.scale_weights.len() != self.scales {
            return Err(Error::Config(format!(
                "{} scales need exactly that many weights, got {}",
                self.scales,
                self.scale_weights.len()
            )));
        }
        let (h, w) = (height >> (self.scales - 1), width >> (self.scales - 1));
        if h < self.window_width || w < self.window_width {
            return Err(Error::Config(format!(
                "{height}x{width} shrinks to {h}x{w} at scale {}, smaller than the {}-pixel window; reduce scales",
                self.scales, self.window_width
            )));
        }
        Ok(())
    }

    fn window(&self) -> Vec<f64> {
        let r = (self.window_width / 2) as f64;
        let g: Vec<f64> = (0..self.window_width)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::for_resolution(64, 64)
    }
}

/// Plane of f64 values used inside the SSIM pyramid.
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable valid-mode filtering.
    fn filter(&self, win: &[f64]) -> Plane {
        let k = win.len();
        let (oh, ow) = (self.h + 1 - k, self.w + 1 - k);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..k).map(|i| win[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn avg_pool2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v[y * w + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
        Plane { h, w, v }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean contrast-structure and mean full SSIM of one scale.
fn ssim_terms(a: &Plane, b: &Plane, win: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mu_a = a.filter(win);
    let mu_b = b.filter(win);
    let e_aa = a.map2(a, |x, y| x * y).filter(win);
    let e_bb = b.map2(b, |x, y| x * y).filter(win);
    let e_ab = a.map2(b, |x, y| x * y).filter(win);
    let n = mu_a.v.len();
    let mut cs = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let var_a = e_aa.v[i] - ma * ma;
        let var_b = e_bb.v[i] - mb * mb;
        let cov = e_ab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (var_a + var_b + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs.push(c);
        full.push(l * c);
    }
    (mean(&cs), mean(&full))
}

fn check_pair(a: &Image, b: &Image, mask: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || (a.height, a.width) != (mask.height, mask.width) {
        return Err(Error::Contract(format!(
            "masked MS-SSIM needs equal shapes, got {}x{}, {}x{} and mask {}x{}",
            a.height, a.width, b.height, b.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// MS-SSIM of `(1 − m)⊙a` against `(1 − m)⊙b`. The mask is applied once
/// at full resolution, before the pyramid.
pub fn masked_ms_ssim(a: &Image, b: &Image, mask: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    check_pair(a, b, mask)?;
    cfg.validate(a.height, a.width)?;
    let masked = |im: &Image| Plane {
        h: im.height,
        w: im.width,
        v: im.data.iter().zip(&mask.data).map(|(&x, &m)| f64::from(x) * (1.0 - f64::from(m))).collect(),
    };
    let (mut pa, mut pb) = (masked(a), masked(b));
    let win = cfg.window();
    let mut value = 1.0;
    for s in 0..cfg.scales {
        let (cs, full) = ssim_terms(&pa, &pb, &win, cfg.c1, cfg.c2);
        let term = if s + 1 == cfg.scales { full } else { cs };
        value *= term.max(0.0).powf(cfg.scale_weights[s]);
        if s + 1 < cfg.scales {
            pa = pa.avg_pool2();
            pb = pb.avg_pool2();
        }
    }
    Ok(value)
}

/// Number of pixels above the 0.5 threshold.
pub fn lesion_area(mask: &Image) -> usize {
    mask.data.iter().filter(|&&v| v > MASK_THRESHOLD).count()
}

/// `h = 1 − mean(predicted areas) / mean(reference areas)`.
pub fn healthiness_from_counts(predicted: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() || predicted.is_empty() {
        return Err(Error::Contract("healthiness needs non-empty predicted and reference sets".into()));
    }
    let mean_of = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let denom = mean_of(reference);
    if denom == 0.0 {
        return Err(Error::Contract("reference masks have zero mean area".into()));
    }
    Ok(1.0 - mean_of(predicted) / denom)
}

/// Runs a frozen segmentor over images in chunks, without recording a graph.
pub fn segment(fpre: &NetworkState, images: &[&Image]) -> Result<Vec<Image>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    no_grad(|| -> Result<()> {
        for chunk in images.chunks(CHUNK) {
            let pred = fpre.forward(&Image::batch(chunk.iter().copied())?)?;
            out.extend(Image::unbatch(&pred)?);
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn healthiness(pseudo_images: &[&Image], fpre: &NetworkState, reference_masks: &[&Image]) -> Result<f64> {
    let predicted: Vec<usize> = segment(fpre, pseudo_images)?.iter().map(lesion_area).collect();
    let reference: Vec<usize> = reference_masks.iter().map(|m| lesion_area(m)).collect();
    healthiness_from_counts(&predicted, &reference)
}

pub fn oracle_mse(pseudo: &Image, truth: Option<&Image>) -> Result<f64> {
    let truth = truth.ok_or_else(|| Error::Contract("oracle MSE needs a ground-truth healthy image".into()))?;
    if (pseudo.height, pseudo.width) != (truth.height, truth.width) {
        return Err(Error::Contract("oracle MSE shape mismatch".into()));
    }
    let sum: f64 = pseudo.data.iter().zip(&truth.data).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(sum / pseudo.data.len() as f64)
}

/// Hard Dice of two masks thresholded at 0.5; two empty masks score 1.
pub fn hard_dice(pred: &Image, target: &Image) -> f64 {
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&target.data) {
        let (a, b) = (a > MASK_THRESHOLD, b > MASK_THRESHOLD);
        inter += usize::from(a && b);
        p += usize::from(a);
        t += usize::from(b);
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Dice between `f_pre(x̂_p)` and the true mask.
pub fn reconstruction_lesion_fidelity(recon: &Image, mask: &Image, fpre: &NetworkState) -> Result<f64> {
    let pred = segment(fpre, &[recon])?;
    Ok(hard_dice(&pred[0], mask))
}

/// A trained method as seen by evaluation.
pub trait PseudoHealthyModel {
    fn method(&self) -> &str;

    /// `[B,1,H,W]` pathological batch to pseudo-healthy batch.
    fn synthesize(&self, x: &Tensor) -> Result<Tensor>;

    /// Full cycle back to the pathological domain, when the method has one.
    fn reconstruct(&self, x: &Tensor) -> Result<Option<Tensor>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub subject_id: u32,
    pub index: u32,
    pub identity: f64,
    pub healthiness_numerator: usize,
    pub reference_area: usize,
    pub oracle_mse: Option<f64>,
    pub lesion_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub identity_mean: f64,
    pub identity_std: f64,
    pub healthiness: f64,
    pub oracle_mse: Option<f64>,
    pub lesion_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub records: Vec<RecordMetrics>,
    pub aggregate: AggregateMetrics,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Pseudo-healthy images, reconstructions (when the method has them),
/// per-record metrics and their aggregate.
pub type Evaluation = (Vec<Image>, Vec<Option<Image>>, Vec<RecordMetrics>, AggregateMetrics);

/// Evaluates a model on the pathological records of `test`.
pub fn evaluate(
    model: &dyn PseudoHealthyModel,
    test: &[SliceRecord],
    fpre: &NetworkState,
    cfg: &MsSsimConfig,
) -> Result<Evaluation> {
    let path: Vec<&SliceRecord> = test.iter().filter(|r| r.label == Label::Pathological).collect();
    if path.is_empty() {
        return Err(Error::Contract("evaluation needs pathological test records".into()));
    }
    let mut pseudo = Vec::with_capacity(path.len());
    let mut recon = Vec::with_capacity(path.len());
    no_grad(|| -> Result<()> {
        for chunk in path.chunks(16) {
            let x = Image::batch(chunk.iter().map(|r| &r.image))?;
            pseudo.extend(Image::unbatch(&model.synthesize(&x)?)?);
            match model.reconstruct(&x)? {
                Some(t) => recon.extend(Image::unbatch(&t)?.into_iter().map(Some)),
                None => recon.extend(std::iter::repeat_n(None, chunk.len())),
            }
        }
        Ok(())
    })?;
    let predicted = segment(fpre, &pseudo.iter().collect::<Vec<_>>())?;
    let recon_refs: Vec<&Image> = recon.iter().flatten().collect();
    let recon_pred = if recon_refs.len() == recon.len() { Some(segment(fpre, &recon_refs)?) } else { None };

    let mut records = Vec::with_capacity(path.len());
    for (i, r) in path.iter().enumerate() {
        records.push(RecordMetrics {
            subject_id: r.subject_id,
            index: r.index,
            identity: masked_ms_ssim(&r.image, &pseudo[i], &r.mask, cfg)?,
            healthiness_numerator: lesion_area(&predicted[i]),
            reference_area: lesion_area(&r.mask),
            oracle_mse: r.truth_healthy.as_ref().map(|t| oracle_mse(&pseudo[i], Some(t))).transpose()?,
            lesion_dice: recon_pred.as_ref().map(|p| hard_dice(&p[i], &r.mask)),
        });
    }
    let ids: Vec<f64> = records.iter().map(|m| m.identity).collect();
    let (identity_mean, identity_std) = mean_std(&ids);
    let num: Vec<usize> = records.iter().map(|m| m.healthiness_numerator).collect();
    let den: Vec<usize> = records.iter().map(|m| m.reference_area).collect();
    let aggregate = AggregateMetrics {
        identity_mean,
        identity_std,
        healthiness: healthiness_from_counts(&num, &den)?,
        oracle_mse: mean_opt(records.iter().map(|m| m.oracle_mse)),
        lesion_dice: mean_opt(records.iter().map(|m| m.lesion_dice)),
    };
    Ok((pseudo, recon, records, aggregate))
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Dataset { path: path.to_path_buf(), detail: format!("not a metrics report: {e}") })
    }

    /// One row per record, blank cells for absent optional values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "subject_id",
            "index",
            "identity",
            "healthiness_numerator",
            "reference_area",
            "oracle_mse",
            "lesion_dice",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                self.method.clone(),
                r.subject_id.to_string(),
                r.index.to_string(),
                format!("{:.9}", r.identity),
                r.healthiness_numerator.to_string(),
                r.reference_area.to_string(),
                opt(r.oracle_mse),
                opt(r.lesion_dice),
            ])?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Metrics for one method aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub identity: (f64, f64),
    pub healthiness: (f64, f64),
    pub seeds: Vec<u64>,
}

pub const METHOD_ORDER: [&str; 4] = ["paired", "unpaired", "cyclegan", "cgan"];

fn method_rank(m: &str) -> usize {
    METHOD_ORDER.iter().position(|x| *x == m).unwrap_or(METHOD_ORDER.len())
}

/// Groups reports by method; rows follow the canonical method order.
pub fn table_rows(reports: &[MetricsReport]) -> Vec<TableRow> {
    let mut methods: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    methods.sort_by_key(|m| (method_rank(m), m.to_string()));
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&MetricsReport> = reports.iter().filter(|r| r.method == m).collect();
            let ids: Vec<f64> = mine.iter().map(|r| r.aggregate.identity_mean).collect();
            let hs: Vec<f64> = mine.iter().map(|r| r.aggregate.healthiness).collect();
            TableRow {
                method: m.to_string(),
                identity: if mine.len() == 1 { (ids[0], mine[0].aggregate.identity_std) } else { mean_std(&ids) },
                healthiness: mean_std(&hs),
                seeds: mine.iter().map(|r| r.seed).collect(),
            }
        })
        .collect()
}

/// Seeds on which the identity chain `paired ≥ unpaired > cyclegan > cgan`
/// holds, and seeds on which both proposed modes beat both baselines in
/// healthiness. Returns `(identity_hits, healthiness_hits, seeds_considered)`.
pub fn ordering_summary(reports: &[MetricsReport]) -> (usize, usize, usize) {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let (mut id_hits, mut h_hits, mut considered) = (0, 0, 0);
    for s in seeds {
        let get = |m: &str| reports.iter().find(|r| r.seed == s && r.method == m).map(|r| &r.aggregate);
        let (Some(p), Some(u), Some(c), Some(g)) = (get("paired"), get("unpaired"), get("cyclegan"), get("cgan"))
        else {
            continue;
        };
        considered += 1;
        if identity_chain_holds(p.identity_mean, u.identity_mean, c.identity_mean, g.identity_mean) {
            id_hits += 1;
        }
        if p.healthiness.min(u.healthiness) > c.healthiness.max(g.healthiness) {
            h_hits += 1;
        }
    }
    (id_hits, h_hits, considered)
}

pub fn identity_chain_holds(paired: f64, unpaired: f64, cyclegan: f64, cgan: f64) -> bool {
    paired >= unpaired && unpaired > cyclegan && cyclegan > cgan
}

/// Plain-text table with aligned columns.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = format!("{:<10} {:>17} {:>17} {:>6}\n", "method", "identity", "healthiness", "seeds");
    for r in rows {
        out += &format!(
            "{:<10} {:>17} {:>17} {:>6}\n",
            r.method,
            format!("{:.4}±{:.4}", r.identity.0, r.identity.1),
            format!("{:.4}±{:.4}", r.healthiness.0, r.healthiness.1),
            r.seeds.len()
        );
    }
    out
}

pub fn write_table_csv(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "identity_mean", "identity_std", "healthiness_mean", "healthiness_std", "n_seeds"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.9}", r.identity.0),
            format!("{:.9}", r.identity.1),
            format!("{:.9}", r.healthiness.0),
            format!("{:.9}", r.healthiness.1),
            r.seeds.len().to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
