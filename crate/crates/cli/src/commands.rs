use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::json;
use smagnet::checkpoint::{save_checkpoint, CheckpointMeta, LoadedCheckpoint, CHECKPOINT_FORMAT};
use smagnet::data::{read_dataset, write_dataset, Dataset};
use smagnet::diagnostics::diagnose as run_diagnostics;
use smagnet::eval::{
    evaluate, histogram_csv, inject_missing, metrics, per_scene_csv, robustness_sweep, spectral_histograms,
    sweep_csv, EvalReport, MissingPattern, SceneMetrics, SweepResult,
};
use smagnet::significance::mann_whitney_u;
use smagnet::train::{history_csv, train as train_model, ThresholdChoice};

use crate::config::{DataConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::run_dir::{sha256_hex, RunDir, RunRecord, CHECKPOINT_FILE, CONFIG_FILE};
use crate::{DiagnoseArgs, EvalArgs, GenDataArgs, ReportArgs, StatsArgs, SweepArgs, TrainArgs};

fn load_dataset(data: &DataConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir.or(data.dir.as_deref()) {
        Some(dir) => {
            if !dir.join("manifest.json").exists() {
                return Err(CliError::data(format!("{} holds no dataset manifest", dir.display())));
            }
            Ok(read_dataset(dir)?)
        }
        None => Ok(Dataset::generate(&data.generator, data.scenes)?),
    }
}

fn dataset_checksum(ds: &Dataset) -> Result<String> {
    let bytes = serde_json::to_vec(&(&ds.manifest, &ds.stats)).map_err(|e| CliError::data(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

fn threshold_of(ckpt: &LoadedCheckpoint) -> Result<ThresholdChoice> {
    ckpt.meta
        .threshold
        .ok_or_else(|| CliError::data("checkpoint has no selected threshold"))
}

pub(crate) fn gen_data(a: GenDataArgs) -> Result<serde_json::Value> {
    let mut data = match &a.config {
        Some(path) => RunConfig::load(path)?.data,
        None => DataConfig::default(),
    };
    if let Some(n) = a.scenes {
        data.scenes = n;
    }
    if let Some(s) = a.size {
        data.generator.size = s;
    }
    if let Some(seed) = a.seed {
        data.generator.seed = seed;
    }
    if data.scenes == 0 {
        return Err(CliError::config("--scenes must be positive"));
    }
    let ds = Dataset::generate(&data.generator, data.scenes)?;
    write_dataset(&a.out, &ds)?;
    let [train, val, test] = ds.manifest.split.counts();
    Ok(json!({
        "command": "gen-data",
        "out": a.out,
        "scenes": ds.scenes.len(),
        "train": train,
        "val": val,
        "test": test,
        "sha256": dataset_checksum(&ds)?,
    }))
}

pub(crate) fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &a.data {
        cfg.data.dir = Some(dir.clone());
    }
    if let Some(kind) = a.model {
        cfg.model.kind = kind;
    }
    if a.no_spatial_mask {
        cfg.model.spatial_mask = false;
    }
    if a.independent_decoders {
        cfg.model.shared_decoder = false;
    }
    if let Some(f) = a.fusion_mode {
        cfg.model.fusion_mode = f.into();
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let ds = load_dataset(&cfg.data, None)?;

    let run = RunDir::new(&a.out);
    std::fs::create_dir_all(&run.path).map_err(|e| CliError::data(format!("{}: {e}", run.path.display())))?;
    let mut record = RunRecord {
        seed: cfg.train.seed,
        dataset_sha256: dataset_checksum(&ds)?,
        ..RunRecord::default()
    };
    run.save_record(&record)?;
    run.write_json(CONFIG_FILE, &cfg)?;

    let quiet = a.quiet;
    let out = train_model(&cfg.model, &cfg.train, &ds, &mut |r| {
        if !quiet {
            eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
        }
    })?;
    run.write("history.csv", history_csv(&out.history).as_bytes())?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        model: cfg.model.clone(),
        epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        threshold: Some(out.threshold),
    };
    let ckpt_path = run.file(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &out.model, Some(&out.optimizer), &meta)?;
    let bytes = std::fs::read(&ckpt_path).map_err(|e| CliError::data(format!("{}: {e}", ckpt_path.display())))?;
    record = RunRecord {
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        ..run.record()?
    };
    record.artifacts.insert(CHECKPOINT_FILE.to_string(), sha256_hex(&bytes));
    run.save_record(&record)?;
    Ok(json!({
        "command": "train",
        "out": a.out,
        "best_epoch": out.best_epoch,
        "best_val_loss": out.best_val_loss,
        "threshold": out.threshold,
    }))
}

pub(crate) fn eval(a: EvalArgs) -> Result<serde_json::Value> {
    let run = RunDir::new(&a.run);
    let cfg = run.config()?;
    let ckpt = run.checkpoint()?;
    let threshold = threshold_of(&ckpt)?;
    let ds = load_dataset(&cfg.data, a.data.as_deref())?;
    let test = ds.split("test")?;
    let (report, probs) = evaluate(&ckpt.model, &test, &ds.stats, threshold.threshold, cfg.eval.batch_size)?;
    let (ndvi, nir) = spectral_histograms(&test, &probs, threshold.threshold)?;
    run.write_json("eval.json", &report)?;
    run.write("per_scene.csv", per_scene_csv(&report.per_scene).as_bytes())?;
    run.write("hist_ndvi.csv", histogram_csv(&ndvi).as_bytes())?;
    run.write("hist_nir.csv", histogram_csv(&nir).as_bytes())?;
    Ok(json!({
        "command": "eval",
        "run": a.run,
        "threshold": threshold.threshold,
        "iou": report.aggregate.iou,
        "sar_head_iou": report.sar_head.map(|m| m.iou),
    }))
}

pub(crate) fn sweep(a: SweepArgs) -> Result<serde_json::Value> {
    let run = RunDir::new(&a.run);
    let cfg = run.config()?;
    let ckpt = run.checkpoint()?;
    let threshold = threshold_of(&ckpt)?.threshold;
    let ds = load_dataset(&cfg.data, a.data.as_deref())?;
    let test = ds.split("test")?;
    let ratios = a.ratios.unwrap_or(cfg.eval.ratios);
    let pattern = a.pattern.unwrap_or(cfg.eval.pattern);
    let seeds = a.seeds.unwrap_or(cfg.eval.sweep_seeds);
    let fill = ds.manifest.params.fill_value;
    let result = robustness_sweep(
        &ckpt.model,
        Some(threshold),
        &test,
        &ds.stats,
        &ratios,
        pattern,
        seeds,
        fill,
        cfg.eval.batch_size,
    )?;
    run.write("sweep.csv", sweep_csv(&result).as_bytes())?;
    run.write_json("sweep.json", &result)?;
    // Per-scene metrics of the first injection seed, one file per ratio.
    for row in &result.rows {
        let scenes: Vec<SceneMetrics> = result
            .scene_ids
            .iter()
            .zip(&row.counts[0])
            .map(|(id, &c)| SceneMetrics {
                id: id.clone(),
                report: smagnet::eval::MetricReport {
                    threshold: Some(threshold),
                    ..metrics(c)
                },
            })
            .collect();
        run.write(&format!("per_scene_r{}.csv", row.ratio), per_scene_csv(&scenes).as_bytes())?;
    }
    Ok(json!({
        "command": "sweep-missing",
        "run": a.run,
        "pattern": pattern,
        "mean_iou": result.rows.iter().map(|r| r.mean_iou).collect::<Vec<_>>(),
        "delta": result.delta,
    }))
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::data(format!("{}: no column {column:?}", path.display())))?;
    let mut values = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let field = rec.get(idx).unwrap_or("");
        let v: f64 = field
            .parse()
            .map_err(|_| CliError::data(format!("{}: row {}: {field:?} is not a number", path.display(), line + 1)))?;
        values.push(v);
    }
    Ok(values)
}

pub(crate) fn stats(a: StatsArgs) -> Result<serde_json::Value> {
    let xa = read_column(&a.a, &a.column)?;
    let xb = read_column(&a.b, &a.column)?;
    let mw = mann_whitney_u(&xa, &xb)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let out = json!({
        "command": "stats",
        "column": a.column,
        "mean_a": mean(&xa),
        "mean_b": mean(&xb),
        "u": mw.u,
        "p": mw.p,
        "exact": mw.exact,
        "n_a": mw.n_a,
        "n_b": mw.n_b,
    });
    if let Some(path) = &a.out {
        smagnet::fsx::write_json(path, &out)?;
    }
    Ok(out)
}

pub(crate) fn diagnose(a: DiagnoseArgs) -> Result<serde_json::Value> {
    let run = RunDir::new(&a.run);
    let cfg = run.config()?;
    let ckpt = run.checkpoint()?;
    let ds = load_dataset(&cfg.data, a.data.as_deref())?;
    let scene = ds
        .scene(&a.scene)
        .ok_or_else(|| CliError::data(format!("scene {} is not in the dataset", a.scene)))?;
    let (scene, name) = match a.missing_ratio {
        Some(r) => {
            // The band pattern draws no randomness.
            let mut rng = rand::SeedableRng::seed_from_u64(0);
            let s = inject_missing(scene, r, MissingPattern::Band, ds.manifest.params.fill_value, &mut rng)?;
            (s, format!("diagnostics/{}_r{}.smag", a.scene, (r * 100.0).round() as u32))
        }
        None => (scene.clone(), format!("diagnostics/{}.smag", a.scene)),
    };
    let d = run_diagnostics(&ckpt.model, &scene, &ds.stats)?;
    let bytes = d.to_archive().to_bytes();
    run.write(&name, &bytes)?;
    let max_mse = d.mse.data().iter().copied().fold(0.0f64, f64::max);
    Ok(json!({
        "command": "diagnose",
        "run": a.run,
        "scene": a.scene,
        "archive": name,
        "levels": d.levels.len(),
        "max_mse": max_mse,
    }))
}

struct ReportRow {
    run: PathBuf,
    cfg: RunConfig,
    record: RunRecord,
    eval: EvalReport,
    sweep: Option<SweepResult>,
}

pub(crate) fn report(a: ReportArgs) -> Result<serde_json::Value> {
    let mut rows = Vec::with_capacity(a.runs.len());
    for path in &a.runs {
        let run = RunDir::new(path);
        let eval_path = run.file("eval.json");
        if !eval_path.exists() {
            return Err(CliError::data(format!("{}: run has not been evaluated", path.display())));
        }
        let sweep_path = run.file("sweep.json");
        rows.push(ReportRow {
            run: path.clone(),
            cfg: run.config()?,
            record: run.record()?,
            eval: smagnet::fsx::read_json(&eval_path)?,
            sweep: if sweep_path.exists() { Some(smagnet::fsx::read_json(&sweep_path)?) } else { None },
        });
    }
    let ratios: BTreeSet<u32> = rows
        .iter()
        .flat_map(|r| r.sweep.iter().flat_map(|s| s.rows.iter().map(|x| x.ratio)))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "run", "model", "spatial_mask", "shared_decoder", "fusion_mode", "seed", "best_epoch", "threshold", "oa",
        "precision", "recall", "iou", "sar_head_iou",
    ]
    .map(String::from)
    .to_vec();
    for r in &ratios {
        header.push(format!("iou_r{r}"));
        header.push(format!("std_r{r}"));
    }
    header.push("delta".into());
    let csv_err = |e: csv::Error| CliError::data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        let m = &r.eval.aggregate;
        let model = &r.cfg.model;
        let mut rec = vec![
            r.run.display().to_string(),
            serde_json::to_value(model.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            model.spatial_mask.to_string(),
            model.shared_decoder.to_string(),
            serde_json::to_value(model.fusion_mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.record.seed.to_string(),
            r.record.best_epoch.to_string(),
            r.eval.threshold.to_string(),
            m.oa.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.iou.to_string(),
            r.eval.sar_head.map(|s| s.iou.to_string()).unwrap_or_default(),
        ];
        for ratio in &ratios {
            let row = r.sweep.as_ref().and_then(|s| s.rows.iter().find(|x| x.ratio == *ratio));
            rec.push(row.map(|x| x.mean_iou.to_string()).unwrap_or_default());
            rec.push(row.map(|x| x.std_iou.to_string()).unwrap_or_default());
        }
        rec.push(r.sweep.as_ref().map(|s| s.delta.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    smagnet::fsx::write_atomic(&a.out, &bytes)?;
    Ok(json!({ "command": "report", "out": a.out, "runs": rows.len() }))
}
