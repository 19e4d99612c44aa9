//! Three-stage training: detector warm-up on noisy labels, shift-localizer
//! training against the frozen detector, and detector training through the
//! frozen localizer. Also warm-up checkpoint selection and a label-correction
//! baseline.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene, Split};
use crate::density::{density_loss_grad, local_edge_density, proxy_edges, CannyParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Setting, Tolerance};
use crate::field::{normalized_magnitude, normalized_magnitude_vjp, sample_array, sampler_vjp, unmatched_mask, DisplacementField};
use crate::losses::{edge_loss, edge_loss_grad, joint_loss, psl_loss, sim_loss_grad, smooth_loss_grad, sup_loss_grad, LossWeights, PslTerms};
use crate::maps::{BinaryLabelMap, EdgeProbMap};
use crate::matching::SupervisionRecord;
use crate::models::{extract_confident, DetectorConfig, EdgeDetectorParams, LocalizerConfig, LocalizerParams};
use crate::morph::thin;
use crate::nn::{Conv2d, ConvGrad, Sgd};
use crate::scalar::Real;

pub const TRAIN_NOISY: &str = "train-noisy";
pub const TRAIN_CLEAN: &str = "train-clean";
/// Fit of the transformed prediction to the noisy labels.
pub const TRAIN_TRANSFORMED: &str = "train-transformed";

/// Relative increase of the smoothed noisy-train ODS-F that marks the onset
/// of noisy-label memorization.
pub const JUMP_THRESHOLD: f64 = 0.02;
/// Trailing moving-average window used by [`select_warmup`].
pub const SMOOTHING_WINDOW: usize = 3;

pub const WARMUP_DIR: &str = "stage1";
pub const PSL_DIR: &str = "stage2";
pub const JOINT_DIR: &str = "stage3";
pub const CORRECTION_DIR: &str = "correction";

/// `dir/epoch_{k}.ckpt` under a run directory.
pub fn checkpoint_path(run: &Path, stage_dir: &str, epoch: usize) -> PathBuf {
    run.join(stage_dir).join(format!("epoch_{epoch}.ckpt"))
}

/// Learning rate, epoch count and step decay of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub lr: f64,
    pub epochs: usize,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
}

impl StageSchedule {
    pub fn new(lr: f64, epochs: usize) -> Self {
        Self {
            lr,
            epochs,
            decay: 1.0,
            decay_every: 1,
        }
    }

    pub fn with_decay(mut self, decay: f64, every: usize) -> Self {
        self.decay = decay;
        self.decay_every = every;
        self
    }

    /// Learning rate during the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every.max(1)) as i32)
    }

    fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "{stage}: learning rate must be > 0 and epochs >= 1 (lr {}, epochs {})",
                self.lr, self.epochs
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::InvalidArgument(format!("{stage}: decay must lie in (0, 1] with a positive period")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup: StageSchedule,
    pub psl: StageSchedule,
    pub joint: StageSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Square random crop for detector stages; `None` trains on full images.
    pub crop: Option<usize>,
    pub flip: bool,
    pub seed: u64,
    /// Search radius of the confident-to-noisy matching.
    pub match_radius: f64,
    /// Window of the density target.
    pub density_window: usize,
    pub canny: CannyParams,
    /// Training images scored after every epoch (the first ones of the split).
    pub curve_images: usize,
    pub curve_thresholds: usize,
    pub curve_tolerance_px: f64,
    pub detector: DetectorConfig,
    pub localizer: LocalizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup: StageSchedule::new(0.3, 30).with_decay(0.5, 10),
            psl: StageSchedule::new(0.1, 10).with_decay(0.5, 4),
            joint: StageSchedule::new(0.01, 10).with_decay(0.5, 4),
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            crop: Some(64),
            flip: true,
            seed: 0,
            match_radius: 10.0,
            density_window: 11,
            canny: CannyParams::default(),
            curve_images: 32,
            curve_thresholds: 19,
            curve_tolerance_px: 2.0,
            detector: DetectorConfig::default(),
            localizer: LocalizerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rates and schedule lengths used at full scale with a
    /// pretrained detector; kept for reference, far too small for the toy
    /// networks.
    pub fn full_scale() -> Self {
        Self {
            warmup: StageSchedule::new(5e-8, 30).with_decay(0.1, 10),
            psl: StageSchedule::new(1e-6, 10).with_decay(0.1, 10),
            joint: StageSchedule::new(1e-9, 10).with_decay(0.1, 10),
            crop: Some(472),
            weights: LossWeights::reference(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.warmup.validate("warm-up")?;
        self.psl.validate("shift learning")?;
        self.joint.validate("joint")?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1) and weight decay >= 0".into()));
        }
        if matches!(self.crop, Some(c) if c < 8) {
            return Err(Error::InvalidArgument("crop must be >= 8 pixels".into()));
        }
        if self.density_window < 3 || self.density_window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("density window must be odd and >= 3, got {}", self.density_window)));
        }
        if self.match_radius <= 0.0 || self.curve_tolerance_px <= 0.0 || self.curve_thresholds == 0 {
            return Err(Error::InvalidArgument("match radius, curve tolerance and curve thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Evaluation settings used for learning-curve rows.
    pub fn curve_eval(&self, setting: Setting) -> EvalConfig {
        EvalConfig {
            thresholds: self.curve_thresholds,
            ..EvalConfig::new(setting, Tolerance::Pixels(self.curve_tolerance_px))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub epoch: usize,
    pub split: String,
    pub ods_f: f64,
    pub map: f64,
    /// Mean training loss of the epoch.
    pub loss: f64,
}

/// Per-epoch metrics of one training stage, possibly on several splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    records: Vec<CurveRecord>,
}

impl LearningCurve {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; epochs must be strictly increasing within a split.
    pub fn push(&mut self, record: CurveRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|r| r.split == record.split) {
            if record.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "curve epochs must increase on split {}: {} after {}",
                    record.split, record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    /// `(epoch, ODS-F)` pairs of one split.
    pub fn series(&self, split: &str) -> Vec<(usize, f64)> {
        self.records.iter().filter(|r| r.split == split).map(|r| (r.epoch, r.ods_f)).collect()
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.records.iter().any(|r| r.split == split)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(f);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut curve = Self::new();
        for r in csv::Reader::from_reader(f).deserialize() {
            curve.push(r?)?;
        }
        Ok(curve)
    }
}

fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|n| {
            let lo = (n + 1).saturating_sub(window);
            values[lo..=n].iter().sum::<f64>() / (n + 1 - lo) as f64
        })
        .collect()
}

/// Picks the warm-up epoch from the noisy-train ODS-F curve.
///
/// Returns the first epoch at which the smoothed curve jumps by at least
/// [`JUMP_THRESHOLD`] (relative) after the initial rise from scratch has
/// stalled. Without such an onset it returns the epoch of maximum absolute
/// curvature, or the middle epoch when the curve has none.
pub fn select_warmup(curve: &LearningCurve) -> Result<usize> {
    select_warmup_series(&curve.series(TRAIN_NOISY))
}

pub fn select_warmup_series(series: &[(usize, f64)]) -> Result<usize> {
    if series.len() < 5 {
        return Err(Error::InvalidArgument(format!("warm-up selection needs >= 5 epochs, got {}", series.len())));
    }
    let values: Vec<f64> = series.iter().map(|p| p.1).collect();
    let smooth = trailing_mean(&values, SMOOTHING_WINDOW);
    // Only full windows count, so the warm-up of the average itself cannot
    // look like a jump or a bend.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    // Epochs before the detector scores anything carry no signal.
    let first = (SMOOTHING_WINDOW - 1).max(smooth.iter().position(|v| v.abs() > 1e-9 * scale).unwrap_or(0));
    let jump = |n: usize| (smooth[n] - smooth[n - 1]) / smooth[n - 1].abs().max(1e-12) >= JUMP_THRESHOLD;
    // The rise of a detector trained from scratch is not an onset; search
    // after it has first stalled.
    let settled = (first + 1..smooth.len()).find(|&n| !jump(n)).unwrap_or(smooth.len());
    for n in settled + 1..smooth.len() {
        if jump(n) && !jump(n - 1) {
            return Ok(series[n].0);
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for n in first + 1..smooth.len().saturating_sub(1) {
        let d2 = (smooth[n + 1] - 2.0 * smooth[n] + smooth[n - 1]).abs();
        if d2 > 1e-9 * scale && best.map_or(true, |b| d2 > b.1) {
            best = Some((n, d2));
        }
    }
    Ok(match best {
        Some((n, _)) => series[n].0,
        None => series[series.len() / 2].0,
    })
}

/// Crop window and flip applied to one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct View {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    flip: bool,
}

impl View {
    fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: h,
            width: w,
            flip: false,
        }
    }

    fn random<R: Rng>(h: usize, w: usize, crop: Option<usize>, flip: bool, rng: &mut R) -> Self {
        let (ch, cw) = crop.map_or((h, w), |c| (c.min(h), c.min(w)));
        Self {
            top: rng.gen_range(0..=h - ch),
            left: rng.gen_range(0..=w - cw),
            height: ch,
            width: cw,
            flip: flip && rng.gen_bool(0.5),
        }
    }

    fn apply3<A: Clone>(&self, a: &Array3<A>) -> Array3<A> {
        let c = a.slice(s![.., self.top..self.top + self.height, self.left..self.left + self.width]);
        if self.flip {
            c.slice(s![.., .., ..;-1]).to_owned()
        } else {
            c.to_owned()
        }
    }

    fn apply_labels(&self, m: &BinaryLabelMap) -> BinaryLabelMap {
        BinaryLabelMap::new(self.apply3(m.values())).expect("crop of a binary map")
    }

    fn apply_field<T: Real>(&self, f: &DisplacementField<T>) -> DisplacementField<T> {
        let win = s![self.top..self.top + self.height, self.left..self.left + self.width];
        let cropped = DisplacementField::new(f.delta_i().slice(win).to_owned(), f.delta_j().slice(win).to_owned()).expect("same window");
        if self.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        }
    }
}

fn check_finite<T: Real>(loss: T, stage: &'static str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage,
            step,
            detail: format!("loss is {loss}; lower the learning rate"),
        })
    }
}

fn train_scenes<T: Real>(dataset: &Dataset<T>) -> Result<Vec<&Scene<T>>> {
    let scenes = dataset.split(Split::Train);
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    Ok(scenes)
}

/// Per-sample objective of a detector-training stage.
trait DetectorObjective<T: Real> {
    /// Called with the current parameters before every epoch.
    fn prepare(&mut self, _det: &EdgeDetectorParams<T>) -> Result<()> {
        Ok(())
    }

    /// Mean per-pixel loss and parameter gradients of sample `n` seen
    /// through `view`.
    fn sample(&self, det: &EdgeDetectorParams<T>, n: usize, view: View) -> Result<(T, Vec<ConvGrad<T>>)>;
}

struct NoisyEdges<'a, T> {
    scenes: &'a [&'a Scene<T>],
    labels: Vec<&'a BinaryLabelMap>,
}

impl<T: Real> DetectorObjective<T> for NoisyEdges<'_, T> {
    fn sample(&self, det: &EdgeDetectorParams<T>, n: usize, view: View) -> Result<(T, Vec<ConvGrad<T>>)> {
        let image = view.apply3(&self.scenes[n].image);
        let label = view.apply3(self.labels[n].values()).mapv(|v| T::of(v as f64));
        let cache = det.forward(&image)?;
        let scale = T::one() / T::of(label.len() as f64);
        let loss = edge_loss(&cache.prob, &label)? * scale;
        // Logit gradient of the sigmoid cross-entropy.
        let g = Zip::from(&cache.prob).and(&label).map_collect(|p, y| (*p - *y) * scale);
        Ok((loss, det.backward_logits(&cache, g)))
    }
}

struct ThroughLocalizer<'a, T> {
    scenes: &'a [&'a Scene<T>],
    localizer: &'a LocalizerParams<T>,
    weights: LossWeights,
    fields: Vec<DisplacementField<T>>,
}

impl<T: Real> DetectorObjective<T> for ThroughLocalizer<'_, T> {
    fn prepare(&mut self, det: &EdgeDetectorParams<T>) -> Result<()> {
        self.fields = self
            .scenes
            .iter()
            .map(|s| predict_field(det, self.localizer, &s.image, &s.labels, self.weights.tau))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn sample(&self, det: &EdgeDetectorParams<T>, n: usize, view: View) -> Result<(T, Vec<ConvGrad<T>>)> {
        let scene = self.scenes[n];
        let image = view.apply3(&scene.image);
        let label = view.apply3(scene.labels.values()).mapv(|v| T::of(v as f64));
        let field = view.apply_field(&self.fields[n]);
        let cache = det.forward(&image)?;
        let scale = T::one() / T::of(label.len() as f64);
        let transformed = sample_array(&cache.prob, &field)?;
        let (edge, g_t) = edge_loss_grad(&transformed, &label)?;
        let mask = unmatched_mask(&field);
        let (um, g_um) = crate::losses::unmatched_loss_grad(&cache.prob, &mask)?;
        let g_t = g_t.mapv(|g| g * T::of(self.weights.beta_edge) * scale);
        let mut g_p = sampler_vjp(&cache.prob, &field, &g_t)?.input;
        g_p.scaled_add(T::of(self.weights.beta_unmatched) * scale, &g_um);
        let loss = joint_loss(edge, um, &self.weights) * scale;
        Ok((loss, det.backward_prob(&cache, &g_p)))
    }
}

/// Non-finite values met while training mean the stage diverged.
fn as_divergence(e: Error, stage: &'static str, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            stage,
            step,
            detail: format!("non-finite {what}"),
        },
        e => e,
    }
}

fn accumulate<T: Real>(total: &mut Option<Vec<ConvGrad<T>>>, grads: Vec<ConvGrad<T>>) {
    match total {
        Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        None => *total = Some(grads),
    }
}

/// One SGD pass over `count` samples in shuffled batches; returns the mean
/// loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch<T: Real, R: Rng>(
    layers: &mut [Conv2d<T>],
    opt: &mut Sgd<T>,
    count: usize,
    cfg: &TrainConfig,
    lr: f64,
    stage: &'static str,
    step: &mut usize,
    rng: &mut R,
    mut sample: impl FnMut(&[Conv2d<T>], usize, &mut R) -> Result<(T, Vec<ConvGrad<T>>)>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let mut grads = None;
        for &n in batch {
            let (loss, g) = sample(layers, n, rng).map_err(|e| as_divergence(e, stage, *step))?;
            check_finite(loss, stage, *step)?;
            total += loss.to_f64_lossy();
            accumulate(&mut grads, g);
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = T::one() / T::of(batch.len() as f64);
        grads.iter_mut().for_each(|g| g.scale(inv));
        if let Some(bad) = grads.iter().position(|g| !g.sq_norm().is_finite()) {
            return Err(Error::Diverged {
                stage,
                step: *step,
                detail: format!("non-finite gradient in layer {bad}"),
            });
        }
        opt.step(layers, &grads, T::of(lr));
        if let Some(bad) = layers.iter().position(|l| !(l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))) {
            return Err(Error::Diverged {
                stage,
                step: *step,
                detail: format!("non-finite parameters in layer {bad} after update"),
            });
        }
        *step += 1;
    }
    Ok(total / count as f64)
}

/// Scores a detector on the first `cfg.curve_images` scenes against their
/// noisy and, when every scene has them, clean labels.
fn detector_rows<T: Real>(det: &EdgeDetectorParams<T>, scenes: &[&Scene<T>], cfg: &TrainConfig) -> Result<Vec<(&'static str, f64, f64)>> {
    let subset = &scenes[..cfg.curve_images.min(scenes.len())];
    let preds: Vec<EdgeProbMap<T>> = subset.iter().map(|s| det.detect(&s.image)).collect::<Result<_>>()?;
    let ecfg = cfg.curve_eval(Setting::Thin);
    let noisy: Vec<BinaryLabelMap> = subset.iter().map(|s| s.labels.clone()).collect();
    let r = evaluate(&preds, &noisy, &ecfg)?;
    let mut rows = vec![(TRAIN_NOISY, r.ods_f, r.map)];
    if let Some(clean) = subset.iter().map(|s| s.clean_labels.clone()).collect::<Option<Vec<_>>>() {
        let r = evaluate(&preds, &clean, &ecfg)?;
        rows.push((TRAIN_CLEAN, r.ods_f, r.map));
    }
    Ok(rows)
}

/// Detector snapshots after every epoch and the stage's learning curve.
#[derive(Debug, Clone)]
pub struct DetectorOutcome<T> {
    pub snapshots: Vec<EdgeDetectorParams<T>>,
    pub curve: LearningCurve,
}

impl<T: Real> DetectorOutcome<T> {
    /// Parameters after `epoch` (1-based).
    pub fn at_epoch(&self, epoch: usize) -> Option<&EdgeDetectorParams<T>> {
        epoch.checked_sub(1).and_then(|n| self.snapshots.get(n))
    }

    pub fn last(&self) -> &EdgeDetectorParams<T> {
        self.snapshots.last().expect("at least one epoch")
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_detector<T: Real>(
    mut det: EdgeDetectorParams<T>,
    scenes: &[&Scene<T>],
    objective: &mut dyn DetectorObjective<T>,
    schedule: &StageSchedule,
    cfg: &TrainConfig,
    stage: &'static str,
    stage_dir: &str,
    run: Option<&Path>,
    seed: u64,
) -> Result<DetectorOutcome<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(&det.layers, cfg.momentum, cfg.weight_decay);
    let mut curve = LearningCurve::new();
    let mut snapshots = Vec::with_capacity(schedule.epochs);
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        objective.prepare(&det)?;
        let frozen_cfg = (cfg.crop, cfg.flip);
        let loss = run_epoch(
            &mut det.layers,
            &mut opt,
            scenes.len(),
            cfg,
            schedule.lr_at(epoch),
            stage,
            &mut step,
            &mut rng,
            |layers, n, rng| {
                let (h, w) = (scenes[n].image.shape()[1], scenes[n].image.shape()[2]);
                let view = View::random(h, w, frozen_cfg.0, frozen_cfg.1, rng);
                let current = EdgeDetectorParams { layers: layers.to_vec() };
                objective.sample(&current, n, view)
            },
        )?;
        for (split, ods_f, map) in detector_rows(&det, scenes, cfg).map_err(|e| as_divergence(e, stage, step))? {
            curve.push(CurveRecord {
                epoch: epoch + 1,
                split: split.into(),
                ods_f,
                map,
                loss,
            })?;
        }
        log::info!("{stage} epoch {}: loss {loss:.5}", epoch + 1);
        if let Some(run) = run {
            let path = checkpoint_path(run, stage_dir, epoch + 1);
            std::fs::create_dir_all(path.parent().expect("stage dir")).map_err(|e| Error::io(&path, e))?;
            det.save(&path)?;
        }
        snapshots.push(det.clone());
    }
    Ok(DetectorOutcome { snapshots, curve })
}

fn detector_for<T: Real>(dataset: &Dataset<T>, cfg: &TrainConfig) -> EdgeDetectorParams<T> {
    let dcfg = DetectorConfig {
        classes: dataset.classes(),
        ..cfg.detector.clone()
    };
    EdgeDetectorParams::new(&dcfg, cfg.seed)
}

/// Trains a fresh detector on the noisy training labels, checkpointing and
/// scoring it after every epoch.
pub fn warmup_train<T: Real>(dataset: &Dataset<T>, cfg: &TrainConfig, run: Option<&Path>) -> Result<DetectorOutcome<T>> {
    cfg.validate()?;
    let scenes = train_scenes(dataset)?;
    let mut objective = NoisyEdges {
        scenes: &scenes,
        labels: scenes.iter().map(|s| &s.labels).collect(),
    };
    let det = detector_for(dataset, cfg);
    fit_detector(det, &scenes, &mut objective, &cfg.warmup, cfg, "warm-up", WARMUP_DIR, run, cfg.seed ^ 0x57a1)
}

/// Predicted field for one image: confident pixels of the detector's
/// prediction and the noisy labels go through the localizer.
pub fn predict_field<T: Real>(
    det: &EdgeDetectorParams<T>,
    localizer: &LocalizerParams<T>,
    image: &Array3<T>,
    noisy: &BinaryLabelMap,
    tau: f64,
) -> Result<DisplacementField<T>> {
    let pred = det.detect(image)?;
    let confident = extract_confident(&pred, tau)?.rasterize();
    localizer.localize(image, &confident, noisy)
}

/// Everything the shift-learning stage needs from one (possibly flipped)
/// training image; the detector is frozen, so this is computed once.
struct PslSample<T> {
    image: Array3<T>,
    pred: Array3<T>,
    confident: BinaryLabelMap,
    noisy: BinaryLabelMap,
    noisy_real: Array3<T>,
    records: Vec<SupervisionRecord>,
    density: Array2<T>,
}

fn psl_sample<T: Real>(det: &EdgeDetectorParams<T>, image: Array3<T>, noisy: BinaryLabelMap, cfg: &TrainConfig) -> Result<PslSample<T>> {
    let pred = det.detect(&image)?;
    let mut set = extract_confident(&pred, cfg.weights.tau)?;
    set.attach_targets(&noisy, cfg.match_radius)?;
    let edges = proxy_edges(&image, cfg.canny)?;
    let density = local_edge_density::<T>(edges.view(), cfg.density_window)?.values().clone();
    Ok(PslSample {
        confident: set.rasterize(),
        records: set.supervision(),
        noisy_real: noisy.to_real(),
        pred: pred.into_values(),
        image,
        noisy,
        density,
    })
}

/// Normalized magnitudes are scale-free, so their gradient grows like
/// `1 / max|field|` near the zero field. Below this maximum (in pixels) the
/// magnitudes are divided by the floor instead.
pub const DENSITY_NORM_FLOOR: f64 = 1.0;

/// Density-prior value and its weighted field gradient.
fn density_term<T: Real>(field: &DisplacementField<T>, density: &Array2<T>, weight: T) -> Result<(T, Array2<T>, Array2<T>)> {
    let mag = field.magnitude();
    let floor = T::of(DENSITY_NORM_FLOOR);
    if mag.iter().fold(T::zero(), |m, v| m.max(*v)) >= floor {
        let (v, gd) = density_loss_grad(&normalized_magnitude(field), density)?;
        let (gi, gj) = normalized_magnitude_vjp(field, &gd.mapv(|g| g * weight))?;
        return Ok((v, gi, gj));
    }
    let (v, gd) = density_loss_grad(&mag.mapv(|m| m / floor), density)?;
    let mut gi = Array2::zeros(mag.raw_dim());
    let mut gj = Array2::zeros(mag.raw_dim());
    Zip::from(&mut gi)
        .and(&mut gj)
        .and(&gd)
        .and(&mag)
        .and(field.delta_i())
        .and(field.delta_j())
        .for_each(|gi, gj, g, m, di, dj| {
            if *m > T::zero() {
                let s = *g * weight / (floor * *m);
                *gi = s * *di;
                *gj = s * *dj;
            }
        });
    Ok((v, gi, gj))
}

/// Shift-learning objective value, its terms, and the field gradient.
pub struct PslEval<T> {
    pub loss: T,
    pub terms: PslTerms<T>,
    pub grad_i: Array2<T>,
    pub grad_j: Array2<T>,
}

/// Evaluates every shift-learning term for a predicted field and returns the
/// gradient of the weighted sum with respect to the field.
pub fn psl_objective<T: Real>(
    field: &DisplacementField<T>,
    pred: &Array3<T>,
    noisy: &Array3<T>,
    records: &[SupervisionRecord],
    density: &Array2<T>,
    w: &LossWeights,
) -> Result<PslEval<T>> {
    let transformed = sample_array(pred, field)?;
    let (sim, g_t) = sim_loss_grad(&transformed, noisy)?;
    let g_t = g_t.mapv(|g| g * T::of(w.alpha_sim));
    let sg = sampler_vjp(pred, field, &g_t)?;
    let (mut gi, mut gj) = (sg.delta_i, sg.delta_j);
    let mut terms = PslTerms {
        sim,
        ..PslTerms::default()
    };
    if let Some((v, si, sj)) = sup_loss_grad(field, records)? {
        terms.sup = Some(v);
        gi.scaled_add(T::of(w.alpha_sup), &si);
        gj.scaled_add(T::of(w.alpha_sup), &sj);
    }
    if w.alpha_smooth > 0.0 {
        let (v, si, sj) = smooth_loss_grad(field);
        terms.smooth = Some(v);
        gi.scaled_add(T::of(w.alpha_smooth), &si);
        gj.scaled_add(T::of(w.alpha_smooth), &sj);
    }
    if w.alpha_density > 0.0 {
        let (v, di, dj) = density_term(field, density, T::of(w.alpha_density))?;
        terms.density = Some(v);
        gi += &di;
        gj += &dj;
    }
    Ok(PslEval {
        loss: psl_loss(&terms, w),
        terms,
        grad_i: gi,
        grad_j: gj,
    })
}

#[derive(Debug, Clone)]
pub struct PslOutcome<T> {
    pub localizer: LocalizerParams<T>,
    pub curve: LearningCurve,
    /// Samples whose confident set produced no supervision; their shift
    /// term was skipped.
    pub unsupervised_samples: usize,
}

/// Trains a fresh localizer against the frozen detector. Images are used
/// whole (with optional horizontal flips).
pub fn train_psl<T: Real>(detector: &EdgeDetectorParams<T>, dataset: &Dataset<T>, cfg: &TrainConfig, run: Option<&Path>) -> Result<PslOutcome<T>> {
    cfg.validate()?;
    let scenes = train_scenes(dataset)?;
    if detector.classes() != dataset.classes() {
        return Err(Error::InvalidArgument(format!(
            "detector predicts {} classes, dataset has {}",
            detector.classes(),
            dataset.classes()
        )));
    }
    let mut samples = Vec::with_capacity(scenes.len() * 2);
    for s in &scenes {
        samples.push(psl_sample(detector, s.image.clone(), s.labels.clone(), cfg)?);
        if cfg.flip {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let v = View {
                flip: true,
                ..View::full(h, w)
            };
            samples.push(psl_sample(detector, v.apply3(&s.image), v.apply_labels(&s.labels), cfg)?);
        }
    }
    let lcfg = LocalizerConfig {
        classes: dataset.classes(),
        ..cfg.localizer.clone()
    };
    let mut loc = LocalizerParams::new(&lcfg, cfg.seed ^ 0x10ca);
    let mut opt = Sgd::new(&loc.layers, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9511);
    let mut curve = LearningCurve::new();
    let mut step = 0;
    let mut unsupervised = 0;
    let stride = if cfg.flip { 2 } else { 1 };
    for epoch in 0..cfg.psl.epochs {
        let cap = loc.cap;
        let loss = run_epoch(
            &mut loc.layers,
            &mut opt,
            scenes.len(),
            cfg,
            cfg.psl.lr_at(epoch),
            "shift learning",
            &mut step,
            &mut rng,
            |layers, n, rng| {
                let pick = if stride == 2 && rng.gen_bool(0.5) { 1 } else { 0 };
                let s = &samples[n * stride + pick];
                let current = LocalizerParams { layers: layers.to_vec(), cap };
                let (field, cache) = current.forward(&s.image, &s.confident, &s.noisy)?;
                let e = psl_objective(&field, &s.pred, &s.noisy_real, &s.records, &s.density, &cfg.weights)?;
                if e.terms.sup.is_none() {
                    unsupervised += 1;
                }
                Ok((e.loss, current.backward(&cache, &e.grad_i, &e.grad_j)))
            },
        )?;
        let (ods_f, map) = transformed_fit(detector, &loc, &scenes[..cfg.curve_images.min(scenes.len())], cfg)?;
        curve.push(CurveRecord {
            epoch: epoch + 1,
            split: TRAIN_TRANSFORMED.into(),
            ods_f,
            map,
            loss,
        })?;
        log::info!("shift learning epoch {}: loss {loss:.6}", epoch + 1);
        if let Some(run) = run {
            let path = checkpoint_path(run, PSL_DIR, epoch + 1);
            std::fs::create_dir_all(path.parent().expect("stage dir")).map_err(|e| Error::io(&path, e))?;
            loc.save(&path)?;
        }
    }
    Ok(PslOutcome {
        localizer: loc,
        curve,
        unsupervised_samples: unsupervised,
    })
}

/// Raw-setting ODS-F and mAP of transformed predictions against the noisy
/// labels.
pub fn transformed_fit<T: Real>(
    det: &EdgeDetectorParams<T>,
    loc: &LocalizerParams<T>,
    scenes: &[&Scene<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(scenes.len());
    for s in scenes {
        let field = predict_field(det, loc, &s.image, &s.labels, cfg.weights.tau)?;
        preds.push(crate::field::sample_with_field(&det.detect(&s.image)?, &field)?);
    }
    let labels: Vec<BinaryLabelMap> = scenes.iter().map(|s| s.labels.clone()).collect();
    let r = evaluate(&preds, &labels, &cfg.curve_eval(Setting::Raw))?;
    Ok((r.ods_f, r.map))
}

/// Continues training `detector` on the noisy labels through the frozen
/// localizer, with the unmatched-pixel penalty on the raw prediction.
pub fn joint_train<T: Real>(
    detector: EdgeDetectorParams<T>,
    localizer: &LocalizerParams<T>,
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    run: Option<&Path>,
) -> Result<DetectorOutcome<T>> {
    cfg.validate()?;
    let scenes = train_scenes(dataset)?;
    let mut objective = ThroughLocalizer {
        scenes: &scenes,
        localizer,
        weights: cfg.weights,
        fields: Vec::new(),
    };
    fit_detector(detector, &scenes, &mut objective, &cfg.joint, cfg, "joint", JOINT_DIR, run, cfg.seed ^ 0x301e)
}

/// Moves every noisy edge pixel to the position the field says it was read
/// from (rounded), then rethins each channel.
pub fn correct_labels<T: Real>(noisy: &BinaryLabelMap, field: &DisplacementField<T>) -> Result<BinaryLabelMap> {
    let (c, h, w) = noisy.values().dim();
    if field.shape() != (h, w) {
        return Err(Error::shape("label correction field", &[h, w], &[field.height(), field.width()]));
    }
    let mut out = Array3::<u8>::zeros((c, h, w));
    for ((k, i, j), v) in noisy.values().indexed_iter() {
        if *v == 1 {
            let (di, dj) = field.at(i, j);
            let ti = (i as f64 + di.to_f64_lossy()).round().clamp(0.0, (h - 1) as f64) as usize;
            let tj = (j as f64 + dj.to_f64_lossy()).round().clamp(0.0, (w - 1) as f64) as usize;
            out[[k, ti, tj]] = 1;
        }
    }
    let planes: Vec<Array2<u8>> = (0..c).map(|k| thin(out.index_axis(ndarray::Axis(0), k))).collect();
    BinaryLabelMap::from_channels(&planes)
}

/// Baseline: correct the training labels with the localizer's fields, then
/// keep training the warm-up detector on the corrected labels for the joint
/// schedule.
pub fn label_correction_train<T: Real>(
    detector: EdgeDetectorParams<T>,
    localizer: &LocalizerParams<T>,
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    run: Option<&Path>,
) -> Result<DetectorOutcome<T>> {
    cfg.validate()?;
    let scenes = train_scenes(dataset)?;
    let corrected: Vec<BinaryLabelMap> = scenes
        .iter()
        .map(|s| {
            let field = predict_field(&detector, localizer, &s.image, &s.labels, cfg.weights.tau)?;
            correct_labels(&s.labels, &field)
        })
        .collect::<Result<_>>()?;
    let mut objective = NoisyEdges {
        scenes: &scenes,
        labels: corrected.iter().collect(),
    };
    fit_detector(detector, &scenes, &mut objective, &cfg.joint, cfg, "label correction", CORRECTION_DIR, run, cfg.seed ^ 0xc0de)
}

/// Mean endpoint error between a predicted and a reference field over the
/// pixels set in `mask`.
pub fn endpoint_error<T: Real>(predicted: &DisplacementField<T>, reference: &DisplacementField<T>, mask: &Array2<u8>) -> Result<Option<f64>> {
    if predicted.shape() != reference.shape() || mask.dim() != predicted.shape() {
        return Err(Error::shape("endpoint error", &[reference.height(), reference.width()], &[predicted.height(), predicted.width()]));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((i, j), m) in mask.indexed_iter() {
        if *m != 0 {
            let (a, b) = predicted.at(i, j);
            let (c, d) = reference.at(i, j);
            total += (a - c).to_f64_lossy().hypot((b - d).to_f64_lossy());
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}
