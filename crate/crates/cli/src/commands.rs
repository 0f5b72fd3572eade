use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use phs_core::metrics::{
    evaluate, ordering_summary, render_table, table_rows, write_table_csv, MetricsReport, MsSsimConfig,
    PseudoHealthyModel,
};
use phs_core::networks::{ArchConfig, NetworkState};
use phs_core::phantom::{
    dataset_dir_is_empty, generate_dataset, load_dataset, partition, save_dataset, tile_grid, write_png, Dataset,
    Image, Label, PhantomConfig, SliceRecord,
};
use phs_core::training::{
    load_fpre, pretrain_fpre, run, save_fpre, segmentor_dice_loss, FpreConfig, Method, TrainConfig, Trainer,
    CHECKPOINT_DIR, LOG_FILE,
};
use phs_core::{Error, Result};
use phs_tensor::{no_grad, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::manifest::{RunManifest, Split};
use crate::{EvalArgs, GlobalArgs, PhantomArgs, ReportArgs, TrainArgs};

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Defaults, overlaid by the JSON config file, overlaid by explicit flags.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    config: Option<&Path>,
    flags: Map<String, Value>,
) -> Result<T> {
    let mut merged = serde_json::to_value(defaults)?;
    let obj = merged.as_object_mut().expect("settings serialize to an object");
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(io(path))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("{}: config is not valid JSON: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(usage(format!("{}: config must be a JSON object", path.display())));
        };
        for (k, v) in file {
            if !obj.contains_key(&k) {
                return Err(usage(format!("{}: unknown config key `{k}`", path.display())));
            }
            obj.insert(k, v);
        }
    }
    for (k, v) in flags {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("invalid settings: {e}")))
}

fn flags<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Map<String, Value> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if !dataset_dir_is_empty(out) && !force {
        return Err(usage(format!("{} exists and is not empty; pass --force to write into it", out.display())));
    }
    fs::create_dir_all(out).map_err(io(out))
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("resolution `{s}` must look like 64x64"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn note_threads(g: &GlobalArgs) {
    if g.threads > 1 {
        eprintln!("note: the engine is single-threaded; --threads {} is recorded but not used", g.threads);
    }
}

pub fn phantom(g: &GlobalArgs, a: &PhantomArgs) -> Result<()> {
    let started = Instant::now();
    note_threads(g);
    let resolution = a.resolution.as_deref().map(parse_resolution).transpose()?;
    let cfg: PhantomConfig = resolve(
        &PhantomConfig::default(),
        g.config.as_deref(),
        flags([
            ("n_subjects", a.subjects.map(Value::from)),
            ("resolution", resolution.map(|(h, w)| json!([h, w]))),
            ("slices_per_subject", a.slices.map(Value::from)),
            ("lesion_probability", a.lesion_prob.map(Value::from)),
            ("seed", g.seed.map(Value::from)),
        ]),
    )?;
    cfg.validate()?;
    let out = require_out(g)?;
    prepare_out(out, g.force)?;
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, out)?;
    let n_path = ds.records.iter().filter(|r| r.label == Label::Pathological).count();
    println!(
        "wrote {} slices from {} subjects ({} pathological) to {}",
        ds.records.len(),
        cfg.n_subjects,
        n_path,
        out.display()
    );
    let mut m = RunManifest::new("phantom", serde_json::to_value(&cfg)?, json!({ "seed": cfg.seed }));
    m.dataset_fingerprint = Some(ds.fingerprint());
    m.dataset_path = Some(out.to_path_buf());
    m.outputs = vec!["manifest.json".into()];
    m.write(out, started.elapsed().as_secs_f64())
}

/// Adam step size for every training mode at desk scale.
const DESK_LR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainSettings {
    mode: String,
    epochs: u32,
    batch_size: usize,
    width: usize,
    lr: f64,
    seed: u64,
    checkpoint_interval: u64,
    test_fraction: f64,
    split_seed: u64,
    hh_cycle_weight: f64,
    cycle_weight: f64,
    fpre_max_epochs: u32,
    fpre_patience: u32,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            mode: "paired".into(),
            epochs: 100,
            batch_size: 8,
            width: 8,
            lr: DESK_LR,
            seed: 1,
            checkpoint_interval: 100,
            test_fraction: 6.0 / 28.0,
            split_seed: 0,
            hh_cycle_weight: 1.0,
            cycle_weight: 10.0,
            fpre_max_epochs: 60,
            fpre_patience: 8,
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    if !path.join("manifest.json").exists() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: "no dataset here (expected manifest.json written by `phs phantom`)".into(),
        });
    }
    load_dataset(path)
}

fn split_records(ds: &Dataset, split: &Split) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    let s = partition(&ds.records, split.seed, split.test_fraction)?;
    Ok((s.train, s.test))
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    note_threads(g);
    if let Some(dir) = &a.resume {
        return resume(g, a, dir);
    }
    let started = Instant::now();
    let settings: TrainSettings = resolve(
        &TrainSettings::default(),
        g.config.as_deref(),
        flags([
            ("mode", a.mode.clone().map(Value::from)),
            ("epochs", a.epochs.map(Value::from)),
            ("batch_size", a.batch_size.map(Value::from)),
            ("width", a.width.map(Value::from)),
            ("lr", a.lr.map(Value::from)),
            ("seed", g.seed.map(Value::from)),
            ("checkpoint_interval", a.checkpoint_interval.map(Value::from)),
            ("test_fraction", a.test_fraction.map(Value::from)),
            ("split_seed", a.split_seed.map(Value::from)),
            ("hh_cycle_weight", a.hh_cycle_weight.map(Value::from)),
            ("cycle_weight", a.cycle_weight.map(Value::from)),
        ]),
    )?;
    let method = Method::parse(&settings.mode).ok_or_else(|| {
        usage(format!("unknown mode `{}` (paired | unpaired | cgan | cyclegan | fpre)", settings.mode))
    })?;
    let data_path = a.data.as_deref().ok_or_else(|| usage("--data is required"))?;
    let out = require_out(g)?;
    let ds = load_data(data_path)?;
    if !ds.has_masks() {
        return Err(Error::Contract(format!(
            "{}: dataset has no pathological slices with masks; mode {} needs them",
            data_path.display(),
            method.as_str()
        )));
    }
    let split = Split { seed: settings.split_seed, test_fraction: settings.test_fraction };
    let (train_set, test_set) = split_records(&ds, &split)?;
    let arch = ArchConfig { width: settings.width, ..ArchConfig::default() };
    prepare_out(out, g.force)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&settings)?,
        json!({ "seed": settings.seed, "split_seed": split.seed }),
    );
    manifest.dataset_fingerprint = Some(ds.fingerprint());
    manifest.dataset_path = Some(data_path.to_path_buf());
    manifest.split = Some(split);

    if method == Method::Fpre {
        let mut cfg = FpreConfig::new(ds.resolution, arch);
        cfg.max_epochs = settings.fpre_max_epochs;
        cfg.patience = settings.fpre_patience;
        cfg.batch_size = settings.batch_size;
        cfg.seed = settings.seed;
        cfg.adam.lr = settings.lr;
        let outcome = pretrain_fpre(&train_set, &cfg, &mut |h| {
            eprintln!("fpre epoch {:>3}  train dice loss {:.4}  val dice loss {:.4}", h.epoch, h.train_loss, h.val_loss)
        })?;
        save_fpre(&out.join(CHECKPOINT_DIR), &outcome, &cfg)?;
        let test_loss = segmentor_dice_loss(&outcome.net, &test_set)?;
        let mut csv = String::from("epoch,train_dice_loss,val_dice_loss\n");
        for h in &outcome.history {
            csv += &format!("{},{:e},{:e}\n", h.epoch, h.train_loss, h.val_loss);
        }
        let hist = out.join("fpre_history.csv");
        fs::write(&hist, csv).map_err(io(&hist))?;
        let summary = json!({
            "best_epoch": outcome.best_epoch,
            "best_val_dice_loss": outcome.best_val_loss,
            "test_dice_loss": test_loss,
        });
        let sp = out.join("fpre_eval.json");
        fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(io(&sp))?;
        println!("f_pre: best epoch {}, held-out Dice loss {test_loss:.4}", outcome.best_epoch);
        manifest.outputs = vec!["checkpoint/".into(), "fpre_history.csv".into(), "fpre_eval.json".into()];
        return manifest.write(out, started.elapsed().as_secs_f64());
    }

    let mut cfg = TrainConfig::new(method, ds.resolution, arch);
    cfg.epochs = settings.epochs;
    cfg.batch_size = settings.batch_size;
    cfg.seed = settings.seed;
    cfg.checkpoint_interval = settings.checkpoint_interval;
    cfg.hh_cycle_weight = settings.hh_cycle_weight;
    cfg.cycle_weight = settings.cycle_weight;
    cfg.adam.lr = settings.lr;
    let mut trainer = Trainer::new(cfg)?;
    manifest.config = json!({ "settings": settings, "train": trainer.cfg });
    train_loop(&mut trainer, &train_set, out, a.max_steps)?;
    manifest.outputs = vec![LOG_FILE.into(), "checkpoint/".into()];
    manifest.write(out, started.elapsed().as_secs_f64())
}

fn train_loop(trainer: &mut Trainer, train_set: &[SliceRecord], out: &Path, max_steps: Option<u64>) -> Result<()> {
    let clock = Instant::now();
    let method = trainer.method();
    let spe =
        train_set.iter().filter(|r| r.label == Label::Pathological).count().div_ceil(trainer.cfg.batch_size) as u64;
    let report = run(trainer, train_set, out, max_steps, &mut |step, total, l| {
        if spe > 0 && step % spe == 0 {
            eprintln!(
                "{} epoch {:>3}/{}  step {step}/{total}  total {:.4}  cc {:.4}  gan1 {:.4}/{:.4}  [{:.0}s]",
                method.as_str(),
                step / spe,
                total / spe,
                l.total,
                l.cc(),
                l.gan1_gen,
                l.gan1_disc,
                clock.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "{}: finished at step {} ({} steps per epoch)",
        method.as_str(),
        report.final_step,
        report.steps_per_epoch
    );
    Ok(())
}

fn resume(g: &GlobalArgs, a: &TrainArgs, dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::read(dir)?;
    let out = g.out.as_deref().unwrap_or(dir);
    if out != dir {
        return Err(usage("--resume continues in place; --out must be omitted or equal to the run directory"));
    }
    let mut trainer = Trainer::load(&dir.join(CHECKPOINT_DIR))?;
    if let Some(e) = a.epochs {
        trainer.cfg.epochs = e;
    }
    let data_path = a.data.clone().or(manifest.dataset_path.clone()).ok_or_else(|| usage("--data is required"))?;
    let ds = load_data(&data_path)?;
    if manifest.dataset_fingerprint.as_deref() != Some(ds.fingerprint().as_str()) {
        return Err(Error::Contract(format!("{} is not the dataset this run was trained on", data_path.display())));
    }
    let split = manifest.split.clone().ok_or_else(|| Error::Contract("run manifest has no split".into()))?;
    let (train_set, _) = split_records(&ds, &split)?;
    eprintln!("resuming {} at step {}", trainer.method().as_str(), trainer.step);
    train_loop(&mut trainer, &train_set, out, a.max_steps)?;
    if let Some(cfg) = manifest.config.get_mut("train") {
        *cfg = serde_json::to_value(&trainer.cfg)?;
    }
    manifest.elapsed_seconds += started.elapsed().as_secs_f64();
    let total = manifest.elapsed_seconds;
    manifest.write(out, total)
}

struct SelfIdentity;

impl PseudoHealthyModel for SelfIdentity {
    fn method(&self) -> &str {
        "self"
    }

    fn synthesize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn reconstruct(&self, _x: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

fn load_fpre_for_eval(dir: Option<&Path>) -> Result<NetworkState> {
    let hint = "train one with `phs train --mode fpre --data <dataset> --out <dir>` and pass it as --fpre <dir>";
    let dir = dir.ok_or_else(|| usage(format!("an evaluation segmentor is required: {hint}")))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    if !ckpt.join("trainer.json").exists() {
        return Err(Error::Contract(format!("no f_pre checkpoint under {}: {hint}", dir.display())));
    }
    load_fpre(&ckpt)
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    note_threads(g);
    let out = require_out(g)?;
    let run_manifest = RunManifest::read(&a.run)?;
    let data_path = a.data.clone().or(run_manifest.dataset_path.clone()).ok_or_else(|| usage("--data is required"))?;
    let ds = load_data(&data_path)?;
    let fingerprint = ds.fingerprint();
    if run_manifest.dataset_fingerprint.as_deref() != Some(fingerprint.as_str()) {
        return Err(Error::Contract(format!("{} is not the dataset this run was trained on", data_path.display())));
    }
    let split = run_manifest.split.clone().ok_or_else(|| Error::Contract("run manifest has no split".into()))?;
    let (_, test_set) = split_records(&ds, &split)?;
    let trainer = Trainer::load(&a.run.join(CHECKPOINT_DIR))?;
    if trainer.cfg.resolution != ds.resolution {
        return Err(Error::Contract(format!(
            "checkpoint is {}x{} but the dataset is {}x{}",
            trainer.cfg.resolution.0, trainer.cfg.resolution.1, ds.resolution.0, ds.resolution.1
        )));
    }
    let fpre = load_fpre_for_eval(a.fpre.as_deref())?;
    if fpre.spec.resolution != ds.resolution {
        return Err(Error::Contract("f_pre resolution differs from the dataset".into()));
    }
    prepare_out(out, g.force)?;
    let ms = MsSsimConfig::for_resolution(ds.resolution.0, ds.resolution.1);
    let model: &dyn PseudoHealthyModel = if a.self_identity { &SelfIdentity } else { &trainer };
    let (pseudo, _, records, aggregate) = evaluate(model, &test_set, &fpre, &ms)?;
    let report = MetricsReport {
        method: model.method().to_string(),
        seed: trainer.cfg.seed,
        dataset_fingerprint: fingerprint.clone(),
        records,
        aggregate,
    };
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    write_grid(&trainer, a.self_identity, &test_set, &pseudo, &out.join("grid.png"))?;
    println!(
        "{}: identity {:.4}±{:.4}  healthiness {:.4}  lesion dice {}  oracle mse {}",
        report.method,
        report.aggregate.identity_mean,
        report.aggregate.identity_std,
        report.aggregate.healthiness,
        report.aggregate.lesion_dice.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.aggregate.oracle_mse.map_or("n/a".into(), |v| format!("{v:.5}")),
    );
    let mut m = RunManifest::new(
        "eval",
        json!({ "run": a.run, "fpre": a.fpre, "self_identity": a.self_identity, "ms_ssim": ms }),
        json!({ "seed": trainer.cfg.seed, "split_seed": split.seed }),
    );
    m.dataset_fingerprint = Some(fingerprint);
    m.dataset_path = Some(data_path);
    m.split = Some(split);
    m.outputs = vec!["metrics.json".into(), "metrics.csv".into(), "grid.png".into()];
    m.write(out, started.elapsed().as_secs_f64())
}

/// Rows: input, pseudo-healthy output, predicted mask (the segmentor
/// output when the method has one, otherwise |input − output|).
fn write_grid(
    trainer: &Trainer,
    self_identity: bool,
    test: &[SliceRecord],
    pseudo: &[Image],
    path: &Path,
) -> Result<()> {
    const COLUMNS: usize = 8;
    let inputs: Vec<&Image> =
        test.iter().filter(|r| r.label == Label::Pathological).map(|r| &r.image).take(COLUMNS).collect();
    let outputs: Vec<Image> = pseudo.iter().take(inputs.len()).cloned().collect();
    let masks: Vec<Image> = if trainer.has("S") && !self_identity {
        no_grad(|| -> Result<Vec<Image>> {
            Image::unbatch(&trainer.net("S").forward(&Image::batch(inputs.iter().copied())?)?)
        })?
    } else {
        inputs
            .iter()
            .zip(&outputs)
            .map(|(x, y)| Image {
                height: x.height,
                width: x.width,
                data: x.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs()).collect(),
            })
            .collect()
    };
    let grid = tile_grid(&[inputs.into_iter().cloned().collect(), outputs, masks], 4)?;
    write_png(path, &grid)
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.json")
    } else {
        p.to_path_buf()
    }
}

pub fn report(g: &GlobalArgs, a: &ReportArgs) -> Result<()> {
    let started = Instant::now();
    let reports = a.inputs.iter().map(|p| MetricsReport::read_json(&metrics_path(p))).collect::<Result<Vec<_>>>()?;
    let first = &reports[0].dataset_fingerprint;
    if !a.allow_mixed {
        if let Some(i) = reports.iter().position(|r| &r.dataset_fingerprint != first) {
            return Err(Error::Contract(format!(
                "{} was evaluated on a different dataset than {}; pass --allow-mixed to combine them",
                a.inputs[i].display(),
                a.inputs[0].display()
            )));
        }
    }
    let rows = table_rows(&reports);
    let mut text = render_table(&rows);
    let (id_hits, h_hits, seeds) = ordering_summary(&reports);
    if seeds > 0 {
        text += &format!("paired ≥ unpaired > cyclegan > cgan holds on {id_hits}/{seeds} seeds (identity)\n");
        text += &format!("{{paired, unpaired}} > {{cyclegan, cgan}} holds on {h_hits}/{seeds} seeds (healthiness)\n");
    }
    print!("{text}");
    if let Some(out) = g.out.as_deref() {
        prepare_out(out, g.force)?;
        let tp = out.join("table.txt");
        fs::write(&tp, &text).map_err(io(&tp))?;
        write_table_csv(&rows, &out.join("table.csv"))?;
        let mut m = RunManifest::new("report", json!({ "inputs": a.inputs, "allow_mixed": a.allow_mixed }), json!({}));
        m.dataset_fingerprint = (!a.allow_mixed).then(|| first.clone());
        m.outputs = vec!["table.txt".into(), "table.csv".into()];
        m.write(out, started.elapsed().as_secs_f64())?;
    }
    Ok(())
}
