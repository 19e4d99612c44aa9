use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use edgeshift::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, Scene, Split};
use edgeshift::density::local_edge_density;
use edgeshift::eval::{analyze_transition, evaluate, EvalConfig, EvalReport, Setting, Tolerance};
use edgeshift::field::sample_with_field;
use edgeshift::models::{extract_confident, EdgeDetectorParams, LocalizerParams};
use edgeshift::synth::edge_shift_magnitudes;
use edgeshift::training::{
    checkpoint_path, endpoint_error, joint_train, label_correction_train, predict_field, select_warmup, train_psl, warmup_train,
    LearningCurve, TrainConfig, CORRECTION_DIR, JOINT_DIR, PSL_DIR, TRAIN_CLEAN, TRAIN_NOISY, WARMUP_DIR,
};
use edgeshift::{BinaryLabelMap, EdgeProbMap};
use serde::Serialize;

use crate::config::{write_toml, FileConfig};
use crate::error::{CliError, CliResult};
use crate::plot;
use crate::run::{clear, has_content, RunLock, RunManifest, StageRecord};

type Det = EdgeDetectorParams<f32>;
type Loc = LocalizerParams<f32>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(edgeshift::Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(edgeshift::Error::from)?;
    fs::write(path, text).map_err(io(path))
}

fn write_csv(header: &[&str], rows: &[Vec<String>], path: &Path) -> CliResult<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(io(path))
}

fn mkdir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io(path))
}

#[derive(Debug, Default)]
pub struct GenerateOverrides {
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub size: Option<usize>,
    pub classes: Option<usize>,
    pub complexity: Option<u32>,
    pub noise: Option<f64>,
    pub window_n: Option<usize>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CorruptionStats {
    edge_pixels: usize,
    mean_shift: f64,
    fraction_above_2px: f64,
    density_correlation: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Shift-magnitude histogram and magnitude-versus-density scatter of the
/// generated corruption.
fn corruption_stats(ds: &Dataset<f32>, window: usize, dir: &Path) -> CliResult<CorruptionStats> {
    let (mut mags, mut dens) = (Vec::new(), Vec::new());
    for s in &ds.scenes {
        let (Some(clean), Some(field)) = (&s.clean_labels, &s.field) else {
            continue;
        };
        let d = local_edge_density::<f64>(clean.union().view(), window)?;
        mags.extend(edge_shift_magnitudes(field, clean));
        dens.extend(clean.union().indexed_iter().filter(|(_, v)| **v == 1).map(|(p, _)| d.values()[p]));
    }
    let n = mags.len().max(1) as f64;
    let stats = CorruptionStats {
        edge_pixels: mags.len(),
        mean_shift: mags.iter().sum::<f64>() / n,
        fraction_above_2px: mags.iter().filter(|m| **m > 2.0).count() as f64 / n,
        density_correlation: pearson(&mags, &dens),
    };
    let shifts: Vec<(f64, f64)> = mags.iter().map(|m| (*m, 0.0)).collect();
    let hist = edgeshift::matching::shift_statistics(&shifts)?;
    let rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(b, c)| vec![format!("{}", hist.bin_edges[b]), format!("{}", hist.bin_edges[b + 1]), c.to_string()])
        .collect();
    write_csv(&["lo", "hi", "count"], &rows, &dir.join("shift_hist.csv"))?;
    plot::bars(&hist.bin_edges, &hist.counts, &dir.join("shift_hist.png"))?;
    let step = (mags.len() / 4000).max(1);
    let pts: Vec<(f64, f64)> = dens.iter().zip(&mags).step_by(step).map(|(d, m)| (*d, *m)).collect();
    plot::scatter(&pts, &dir.join("density_vs_shift.png"))?;
    write_json(&stats, &dir.join("corruption.json"))?;
    Ok(stats)
}

pub fn cmd_generate(out: &Path, config: Option<&Path>, force: bool, o: GenerateOverrides) -> CliResult<()> {
    let mut cfg = FileConfig::load(config)?.generate;
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.scenes = o.scenes.unwrap_or(cfg.scenes);
    cfg.scene.size = o.size.unwrap_or(cfg.scene.size);
    cfg.scene.classes = o.classes.unwrap_or(cfg.scene.classes);
    cfg.scene.complexity = o.complexity.unwrap_or(cfg.scene.complexity);
    cfg.scene.corruption.noise_level = o.noise.unwrap_or(cfg.scene.corruption.noise_level);
    cfg.scene.corruption.window = o.window_n.unwrap_or(cfg.scene.corruption.window);
    cfg.train_fraction = o.train_fraction.unwrap_or(cfg.train_fraction);
    if has_content(out) && !force {
        return Err(CliError::Refused(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let _lock = RunLock::acquire(out)?;
    clear(out)?;
    let ds = generate_dataset::<f32>(&cfg.scene, cfg.scenes, cfg.seed, cfg.train_fraction)?;
    save_dataset(&ds, out)?;
    write_toml(&cfg, &out.join("generate.toml"))?;
    let stats_dir = out.join("stats");
    mkdir(&stats_dir)?;
    let stats = corruption_stats(&ds, cfg.scene.corruption.window, &stats_dir)?;
    println!(
        "generated {} scenes in {} (train {}, val-noisy {}, val-clean {}); mean edge shift {:.2} px, {:.1}% above 2 px",
        ds.scenes.len(),
        out.display(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::ValNoisy).len(),
        ds.indices(Split::ValClean).len(),
        stats.mean_shift,
        100.0 * stats.fraction_above_2px
    );
    Ok(())
}

fn save_curve(curve: &LearningCurve, dir: &Path, splits: &[&str]) -> CliResult<PathBuf> {
    let path = dir.join("curve.csv");
    curve.write_csv(&path)?;
    let series: Vec<Vec<(f64, f64)>> = splits
        .iter()
        .filter(|s| curve.has_split(s))
        .map(|s| curve.series(s).into_iter().map(|(e, v)| (e as f64, v)).collect())
        .collect();
    plot::lines(&series, Some((0.0, 1.0)), &dir.join("curve.png"))?;
    Ok(path)
}

fn rel(run: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(run).map_or_else(|_| path.to_path_buf(), Path::to_path_buf)
}

pub fn cmd_warmup(run: &Path, data: &Path, config: Option<&Path>, force: bool, seed: Option<u64>, epochs: Option<usize>) -> CliResult<()> {
    let mut cfg = FileConfig::load(config)?.train;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.warmup.epochs = epochs.unwrap_or(cfg.warmup.epochs);
    cfg.validate()?;
    if has_content(run) && !force {
        return Err(CliError::Refused(format!("{} already holds a run; pass --force to restart it", run.display())));
    }
    let _lock = RunLock::acquire(run)?;
    clear(run)?;
    let ds = load_dataset::<f32>(data)?;
    let data = fs::canonicalize(data).map_err(io(data))?;
    let mut manifest = RunManifest::new(run, data, cfg.clone());
    manifest.save(run)?;
    let outcome = warmup_train(&ds, &cfg, Some(run))?;
    let selected = select_warmup(&outcome.curve)?;
    let curve = save_curve(&outcome.curve, &run.join(WARMUP_DIR), &[TRAIN_NOISY, TRAIN_CLEAN])?;
    manifest.warmup = Some(StageRecord {
        checkpoint: rel(run, &checkpoint_path(run, WARMUP_DIR, selected)),
        curve: rel(run, &curve),
        epochs: cfg.warmup.epochs,
    });
    manifest.selected_epoch = Some(selected);
    for r in outcome.curve.records().iter().filter(|r| r.epoch == selected) {
        manifest.metrics.insert(format!("warmup.{}.ods_f", r.split), r.ods_f);
    }
    manifest.save(run)?;
    println!("warm-up done: {} epochs, selected epoch {selected}", cfg.warmup.epochs);
    Ok(())
}

fn require<'a>(stage: &'a Option<StageRecord>, name: &str, command: &str, run: &Path) -> CliResult<&'a StageRecord> {
    stage.as_ref().ok_or_else(|| {
        CliError::Refused(format!(
            "{name} has not completed in {}; run `edgeshift {command} --out {}` first",
            run.display(),
            run.display()
        ))
    })
}

#[derive(Debug, Default)]
pub struct PslOverrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub alpha4: Option<f64>,
    pub window_n: Option<usize>,
    pub epochs: Option<usize>,
}

/// Later stages start from the run's recorded config; a config file replaces
/// everything except what earlier stages already used.
fn stage_config(manifest: &RunManifest, config: Option<&Path>) -> CliResult<TrainConfig> {
    let mut cfg = manifest.config.clone();
    if config.is_some() {
        let file = FileConfig::load(config)?.train;
        cfg = TrainConfig {
            warmup: cfg.warmup,
            detector: cfg.detector.clone(),
            ..file
        };
    }
    Ok(cfg)
}

pub fn cmd_train_psl(run: &Path, config: Option<&Path>, force: bool, o: PslOverrides) -> CliResult<()> {
    let mut manifest = RunManifest::load(run)?;
    let warm = require(&manifest.warmup, "warm-up", "warmup --data DIR", run)?.clone();
    if manifest.psl.is_some() && !force {
        return Err(CliError::Refused("shift learning already completed; pass --force to retrain".into()));
    }
    let mut cfg = stage_config(&manifest, config)?;
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.weights.tau = o.tau.unwrap_or(cfg.weights.tau);
    cfg.weights.alpha_density = o.alpha4.unwrap_or(cfg.weights.alpha_density);
    cfg.density_window = o.window_n.unwrap_or(cfg.density_window);
    cfg.psl.epochs = o.epochs.unwrap_or(cfg.psl.epochs);
    cfg.validate()?;
    let _lock = RunLock::acquire(run)?;
    for dir in [PSL_DIR, JOINT_DIR, CORRECTION_DIR] {
        let _ = fs::remove_dir_all(run.join(dir));
    }
    manifest.psl = None;
    manifest.joint = None;
    manifest.correction = None;
    manifest.config = cfg.clone();
    manifest.save(run)?;
    let ds = load_dataset::<f32>(&manifest.data)?;
    let det = Det::load(&run.join(&warm.checkpoint))?;
    let outcome = train_psl(&det, &ds, &cfg, Some(run))?;
    let curve = save_curve(&outcome.curve, &run.join(PSL_DIR), &[edgeshift::training::TRAIN_TRANSFORMED])?;
    manifest.psl = Some(StageRecord {
        checkpoint: rel(run, &checkpoint_path(run, PSL_DIR, cfg.psl.epochs)),
        curve: rel(run, &curve),
        epochs: cfg.psl.epochs,
    });
    manifest.metrics.insert("psl.unsupervised_samples".into(), outcome.unsupervised_samples as f64);
    manifest.save(run)?;
    println!("shift learning done: {} epochs", cfg.psl.epochs);
    Ok(())
}

pub fn cmd_joint(
    run: &Path,
    config: Option<&Path>,
    force: bool,
    seed: Option<u64>,
    beta2: Option<f64>,
    epochs: Option<usize>,
    label_correction: bool,
) -> CliResult<()> {
    let mut manifest = RunManifest::load(run)?;
    let warm = require(&manifest.warmup, "warm-up", "warmup --data DIR", run)?.clone();
    let psl = require(&manifest.psl, "shift learning", "train-psl", run)?.clone();
    if manifest.joint.is_some() && !force {
        return Err(CliError::Refused("joint training already completed; pass --force to retrain".into()));
    }
    let mut cfg = stage_config(&manifest, config)?;
    cfg.psl = manifest.config.psl;
    cfg.localizer = manifest.config.localizer.clone();
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.weights.beta_unmatched = beta2.unwrap_or(cfg.weights.beta_unmatched);
    cfg.joint.epochs = epochs.unwrap_or(cfg.joint.epochs);
    cfg.validate()?;
    let _lock = RunLock::acquire(run)?;
    for dir in [JOINT_DIR, CORRECTION_DIR] {
        let _ = fs::remove_dir_all(run.join(dir));
    }
    manifest.joint = None;
    manifest.correction = None;
    manifest.config = cfg.clone();
    manifest.save(run)?;
    let ds = load_dataset::<f32>(&manifest.data)?;
    let det = Det::load(&run.join(&warm.checkpoint))?;
    let loc = Loc::load(&run.join(&psl.checkpoint))?;
    let outcome = joint_train(det.clone(), &loc, &ds, &cfg, Some(run))?;
    let curve = save_curve(&outcome.curve, &run.join(JOINT_DIR), &[TRAIN_NOISY, TRAIN_CLEAN])?;
    manifest.joint = Some(StageRecord {
        checkpoint: rel(run, &checkpoint_path(run, JOINT_DIR, cfg.joint.epochs)),
        curve: rel(run, &curve),
        epochs: cfg.joint.epochs,
    });
    manifest.save(run)?;
    if label_correction {
        let outcome = label_correction_train(det, &loc, &ds, &cfg, Some(run))?;
        let curve = save_curve(&outcome.curve, &run.join(CORRECTION_DIR), &[TRAIN_NOISY, TRAIN_CLEAN])?;
        manifest.correction = Some(StageRecord {
            checkpoint: rel(run, &checkpoint_path(run, CORRECTION_DIR, cfg.joint.epochs)),
            curve: rel(run, &curve),
            epochs: cfg.joint.epochs,
        });
        manifest.save(run)?;
    }
    println!("joint training done: {} epochs", cfg.joint.epochs);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Warmup,
    Joint,
    Correction,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Warmup => "warmup",
            Model::Joint => "joint",
            Model::Correction => "correction",
        })
    }
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "warmup" => Ok(Model::Warmup),
            "joint" => Ok(Model::Joint),
            "correction" => Ok(Model::Correction),
            other => Err(format!("unknown model `{other}` (warmup|joint|correction)")),
        }
    }
}

fn model_record(m: &RunManifest, model: Model) -> Option<&StageRecord> {
    match model {
        Model::Warmup => m.warmup.as_ref(),
        Model::Joint => m.joint.as_ref(),
        Model::Correction => m.correction.as_ref(),
    }
}

/// Scenes of a split with the labels they are scored against: clean labels
/// for `val-clean`, observed labels otherwise.
fn split_targets<'a>(ds: &'a Dataset<f32>, split: Split) -> CliResult<(Vec<&'a Scene<f32>>, Vec<BinaryLabelMap>)> {
    let scenes = ds.split(split);
    if scenes.is_empty() {
        return Err(CliError::Refused(format!("split {} is empty", split.name())));
    }
    let gts = scenes
        .iter()
        .map(|s| match split {
            Split::ValClean => s
                .clean_labels
                .clone()
                .ok_or_else(|| CliError::Refused(format!("scene {} has no clean labels", s.id))),
            _ => Ok(s.labels.clone()),
        })
        .collect::<CliResult<_>>()?;
    Ok((scenes, gts))
}

fn save_report(report: &EvalReport, stem: &Path) -> CliResult<()> {
    report.write_json(&stem.with_extension("json"))?;
    let csv_path = stem.with_extension("csv");
    let f = fs::File::create(&csv_path).map_err(io(&csv_path))?;
    report.write_pr_csv(f)?;
    let curves: Vec<Vec<(f64, f64)>> = report
        .classes
        .iter()
        .map(|c| c.recall.iter().copied().zip(c.precision.iter().copied()).collect())
        .collect();
    plot::lines(&curves, Some((0.0, 1.0)), &stem.with_extension("png"))
}

pub fn cmd_evaluate(run: &Path, splits: &[Split], setting: Setting, tolerance: Tolerance, models: &[Model]) -> CliResult<()> {
    let mut manifest = RunManifest::load(run)?;
    let models: Vec<Model> = if models.is_empty() {
        [Model::Warmup, Model::Joint, Model::Correction]
            .into_iter()
            .filter(|m| model_record(&manifest, *m).is_some())
            .collect()
    } else {
        models.to_vec()
    };
    if models.is_empty() {
        return Err(CliError::Refused("no trained model in this run; run `edgeshift warmup` first".into()));
    }
    let _lock = RunLock::acquire(run)?;
    let ds = load_dataset::<f32>(&manifest.data)?;
    let dir = run.join("eval");
    mkdir(&dir)?;
    let cfg = EvalConfig::new(setting, tolerance);
    let mut rows = Vec::new();
    for model in &models {
        let rec = model_record(&manifest, *model)
            .ok_or_else(|| CliError::Refused(format!("model {model} has not been trained in this run")))?;
        let det = Det::load(&run.join(&rec.checkpoint))?;
        let mut row = vec![model.to_string()];
        for &split in splits {
            let (scenes, gts) = split_targets(&ds, split)?;
            let preds: Vec<EdgeProbMap<f32>> = scenes.iter().map(|s| det.detect(&s.image)).collect::<Result<_, _>>()?;
            let report = evaluate(&preds, &gts, &cfg)?;
            save_report(&report, &dir.join(format!("{model}_{}_{setting}", split.name())))?;
            for (name, v) in [("ods_f", report.ods_f), ("ois_f", report.ois_f), ("map", report.map)] {
                manifest.metrics.insert(format!("eval.{model}.{}.{setting}.{name}", split.name()), v);
            }
            row.push(format!("{:.4}", report.ods_f));
            row.push(format!("{:.4}", report.map));
        }
        rows.push(row);
    }
    let mut header = vec!["model".to_string()];
    for s in splits {
        header.push(format!("{}_ods_f", s.name()));
        header.push(format!("{}_map", s.name()));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&header_refs, &rows, &dir.join(format!("table_{setting}.csv")))?;
    println!("{}", header.join("\t"));
    for r in &rows {
        println!("{}", r.join("\t"));
    }
    manifest.save(run)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FieldStats {
    split: String,
    images: usize,
    /// Error against matched reference shifts of confident pixels.
    reference_pixels: usize,
    mean_reference_error: f64,
    /// Endpoint error against the generating field on noisy edge pixels.
    mean_endpoint_error: Option<f64>,
    zero_field_endpoint_error: Option<f64>,
    mean_field_magnitude: f64,
    transformed_ods_f: f64,
    untransformed_ods_f: f64,
}

pub fn cmd_analyze_field(run: &Path, split: Split, tolerance: Tolerance) -> CliResult<()> {
    let manifest = RunManifest::load(run)?;
    let warm = require(&manifest.warmup, "warm-up", "warmup --data DIR", run)?;
    let psl = require(&manifest.psl, "shift learning", "train-psl", run)?;
    let _lock = RunLock::acquire(run)?;
    let cfg = &manifest.config;
    let ds = load_dataset::<f32>(&manifest.data)?;
    let det = Det::load(&run.join(&warm.checkpoint))?;
    let loc = Loc::load(&run.join(&psl.checkpoint))?;
    let scenes = ds.split(split);
    if scenes.is_empty() {
        return Err(CliError::Refused(format!("split {} is empty", split.name())));
    }
    let mut counts: Vec<u64> = Vec::new();
    let (mut err_sum, mut err_n) = (0.0, 0usize);
    let (mut epe, mut epe0, mut epe_n) = (0.0, 0.0, 0usize);
    let (mut mag_sum, mut mag_n) = (0.0, 0usize);
    let (mut raw, mut warped, mut noisy) = (Vec::new(), Vec::new(), Vec::new());
    for s in &scenes {
        let pred = det.detect(&s.image)?;
        let mut set = extract_confident(&pred, cfg.weights.tau)?;
        set.attach_targets(&s.labels, cfg.match_radius)?;
        let field = predict_field(&det, &loc, &s.image, &s.labels, cfg.weights.tau)?;
        let t = analyze_transition(&field, &set.supervision())?;
        err_sum += t.histogram.mean() * t.count() as f64;
        err_n += t.count();
        if counts.len() < t.histogram.counts.len() {
            counts.resize(t.histogram.counts.len(), 0);
        }
        counts.iter_mut().zip(&t.histogram.counts).for_each(|(a, b)| *a += b);
        let mask = s.labels.union();
        let n = mask.iter().filter(|v| **v == 1).count();
        let mag = field.magnitude();
        mag_sum += mask.iter().zip(mag.iter()).filter(|(m, _)| **m == 1).map(|(_, v)| *v as f64).sum::<f64>();
        mag_n += n;
        if let Some(truth) = &s.field {
            if let Some(e) = endpoint_error(&field, truth, &mask)? {
                epe += e * n as f64;
                epe0 += endpoint_error(&edgeshift::DisplacementField::zeros(field.height(), field.width()), truth, &mask)?.unwrap_or(0.0) * n as f64;
                epe_n += n;
            }
        }
        warped.push(sample_with_field(&pred, &field)?);
        raw.push(pred);
        noisy.push(s.labels.clone());
    }
    let ecfg = EvalConfig::new(Setting::Raw, tolerance);
    let stats = FieldStats {
        split: split.name().into(),
        images: scenes.len(),
        reference_pixels: err_n,
        mean_reference_error: if err_n > 0 { err_sum / err_n as f64 } else { 0.0 },
        mean_endpoint_error: (epe_n > 0).then(|| epe / epe_n as f64),
        zero_field_endpoint_error: (epe_n > 0).then(|| epe0 / epe_n as f64),
        mean_field_magnitude: if mag_n > 0 { mag_sum / mag_n as f64 } else { 0.0 },
        transformed_ods_f: evaluate(&warped, &noisy, &ecfg)?.ods_f,
        untransformed_ods_f: evaluate(&raw, &noisy, &ecfg)?.ods_f,
    };
    let dir = run.join("analysis");
    mkdir(&dir)?;
    write_json(&stats, &dir.join("field_stats.json"))?;
    let edges: Vec<f64> = (0..=counts.len()).map(|b| b as f64 * 0.5).collect();
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(b, c)| vec![format!("{}", edges[b]), format!("{}", edges[b + 1]), c.to_string()])
        .collect();
    write_csv(&["lo", "hi", "count"], &rows, &dir.join("error_hist.csv"))?;
    plot::bars(&edges, &counts, &dir.join("error_hist.png"))?;
    let summary: BTreeMap<&str, String> = [
        ("mean reference error (px)", format!("{:.3}", stats.mean_reference_error)),
        ("mean field magnitude on noisy edges (px)", format!("{:.3}", stats.mean_field_magnitude)),
        ("ODS-F transformed vs noisy", format!("{:.4}", stats.transformed_ods_f)),
        ("ODS-F untransformed vs noisy", format!("{:.4}", stats.untransformed_ods_f)),
    ]
    .into_iter()
    .collect();
    for (k, v) in summary {
        println!("{k}: {v}");
    }
    if let (Some(e), Some(z)) = (stats.mean_endpoint_error, stats.zero_field_endpoint_error) {
        println!("endpoint error vs true field: {e:.3} px (zero field {z:.3} px)");
    }
    Ok(())
}
