//! Acceptance criteria 1 to 10. Every criterion prints one
//! `[criterion N] PASS|FAIL ...` line with the measured values and then
//! asserts. Tolerances are pinned below.
//!
//! Criteria 5 to 9 share trained pipelines (one per seed) on the 200-scene
//! synthetic dataset with default settings; each pipeline is built once.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use edgeshift::dataset::{generate_dataset, Dataset, Split};
use edgeshift::density::{density_loss, density_loss_grad};
use edgeshift::eval::{evaluate, match_edges, EvalConfig, Setting, Tolerance};
use edgeshift::field::{normalized_magnitude, normalized_magnitude_vjp, sample_array, sample_with_field, sampler_vjp, UnmatchedMask};
use edgeshift::losses::{
    edge_loss, edge_loss_grad, joint_loss, psl_loss, sim_loss, sim_loss_grad, smooth_loss, smooth_loss_grad, sup_loss, sup_loss_grad,
    unmatched_loss, unmatched_loss_grad, LossWeights, PslTerms, PROB_EPS,
};
use edgeshift::matching::{min_distance_match, SupervisionRecord};
use edgeshift::models::{EdgeDetectorParams, LocalizerConfig, LocalizerParams};
use edgeshift::synth::SceneSpec;
use edgeshift::training::{
    endpoint_error, joint_train, predict_field, select_warmup, train_psl, warmup_train, LearningCurve, TrainConfig, TRAIN_CLEAN, TRAIN_NOISY,
};
use edgeshift::{BinaryLabelMap, DisplacementField, EdgeProbMap};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-3;
const LOSS_ABS_TOL: f64 = 1e-10;
const LOSS_FD_REL_TOL: f64 = 1e-5;
const EPE_START_MIN: f64 = 2.0;
const EPE_TARGET: f64 = 1.0;
const FIELD_RECOVERY_BUDGET: Duration = Duration::from_secs(15 * 60);
const MAP_GAIN_MIN: f64 = 0.02;
const ABLATION_MAP_DROP_MIN: f64 = 0.05;
const SELECTION_WINDOW: usize = 5;
const MOVING_AVERAGE: usize = 5;
const TRANSITION_GAIN_MIN: f64 = 0.03;
const SCENES: usize = 200;
const TRAIN_FRACTION: f64 = 0.8;
const SEEDS: [u64; 3] = [0, 1, 2];

/// Written to stderr directly so the line shows without `--nocapture`.
fn report(n: u32, pass: bool, detail: String) {
    let line = format!("[criterion {n}] {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Relative error with an absolute floor for coordinates whose gradient is
/// (near) zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---------------------------------------------------------------- criterion 1

/// Distance from a read position to the nearest bilinear kink (integer
/// coordinate) or clamping boundary; finite differences straddling a kink
/// measure a one-sided mix and are skipped.
fn near_kink(pos: f64, len: usize) -> bool {
    let frac = pos - pos.floor();
    let hi = (len - 1) as f64;
    frac.min(1.0 - frac) < 2.0 * FD_STEP || (pos - 0.0).abs() < 2.0 * FD_STEP || (pos - hi).abs() < 2.0 * FD_STEP
}

#[test]
fn criterion_1_sampler_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut bad, mut skipped, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
    for _ in 0..50 {
        let (c, h, w) = (2, 8, 8);
        let input = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0));
        let field = DisplacementField::new(
            Array2::from_shape_fn((h, w), |_| rng.gen_range(-2.0..2.0)),
            Array2::from_shape_fn((h, w), |_| rng.gen_range(-2.0..2.0)),
        )
        .unwrap();
        let upstream = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        let objective = |x: &Array3<f64>, f: &DisplacementField<f64>| (sample_array(x, f).unwrap() * &upstream).sum();
        let g = sampler_vjp(&input, &field, &upstream).unwrap();
        for ((k, i, j), analytic) in g.input.indexed_iter() {
            let mut up = input.clone();
            up[[k, i, j]] += FD_STEP;
            let mut down = input.clone();
            down[[k, i, j]] -= FD_STEP;
            let fd = (objective(&up, &field) - objective(&down, &field)) / (2.0 * FD_STEP);
            let e = rel_err(*analytic, fd);
            worst = worst.max(e);
            checked += 1;
            bad += usize::from(e > FD_REL_TOL);
        }
        for axis in 0..2 {
            let grad = if axis == 0 { &g.delta_i } else { &g.delta_j };
            for ((i, j), analytic) in grad.indexed_iter() {
                let (di, dj) = field.at(i, j);
                let pos = if axis == 0 { i as f64 + di } else { j as f64 + dj };
                if near_kink(pos, if axis == 0 { h } else { w }) {
                    skipped += 1;
                    continue;
                }
                let bump = |d: f64| {
                    let (mut a, mut b) = (field.delta_i().clone(), field.delta_j().clone());
                    if axis == 0 {
                        a[[i, j]] += d;
                    } else {
                        b[[i, j]] += d;
                    }
                    DisplacementField::new(a, b).unwrap()
                };
                let fd = (objective(&input, &bump(FD_STEP)) - objective(&input, &bump(-FD_STEP))) / (2.0 * FD_STEP);
                let e = rel_err(*analytic, fd);
                worst = worst.max(e);
                checked += 1;
                bad += usize::from(e > FD_REL_TOL);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = bad == 0 && elapsed < Duration::from_secs(10);
    report(
        1,
        pass,
        format!("{checked} coordinates, {bad} above rel err {FD_REL_TOL}, worst {worst:.2e}, {skipped} at kinks skipped, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

fn ref_clamp(p: f64) -> f64 {
    p.max(PROB_EPS).min(1.0 - PROB_EPS)
}

fn ref_edge_loss(p: &Array3<f64>, y: &Array3<f64>) -> f64 {
    let mut s = 0.0;
    for (p, y) in p.iter().zip(y) {
        let p = ref_clamp(*p);
        s += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    s
}

fn ref_sup_loss(f: &DisplacementField<f64>, records: &[SupervisionRecord]) -> f64 {
    let mut s = 0.0;
    for r in records {
        let (a, b) = f.at(r.i, r.j);
        s += (a - r.delta_i).powi(2) + (b - r.delta_j).powi(2);
    }
    s / records.len() as f64
}

fn ref_sim_loss(t: &Array3<f64>, y: &Array3<f64>) -> f64 {
    t.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64
}

fn ref_smooth_loss(f: &DisplacementField<f64>) -> f64 {
    let (h, w) = f.shape();
    let mut s = 0.0;
    for comp in [f.delta_i(), f.delta_j()] {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    s += (comp[[i + 1, j]] - comp[[i, j]]).powi(2);
                }
                if j + 1 < w {
                    s += (comp[[i, j + 1]] - comp[[i, j]]).powi(2);
                }
            }
        }
    }
    s / (h * w) as f64
}

fn ref_density_loss(d: &Array2<f64>, c: &Array2<f64>) -> f64 {
    d.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d.len() as f64
}

fn ref_unmatched_loss(p: &Array3<f64>, mask: &UnmatchedMask) -> f64 {
    let mut s = 0.0;
    for ((_, i, j), v) in p.indexed_iter() {
        if mask.mask()[[i, j]] {
            s += -(1.0 - ref_clamp(*v)).ln();
        }
    }
    s
}

fn ref_normalized_magnitude(f: &DisplacementField<f64>) -> Array2<f64> {
    let m = f.magnitude();
    let mx = m.iter().cloned().fold(0.0, f64::max);
    if mx > 0.0 {
        m / mx
    } else {
        m
    }
}

/// Central differences of a scalar function of an array, checked against an
/// analytic gradient; returns (checked, failures, worst relative error).
fn fd_check<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>, analytic: &ndarray::Array<f64, D>, f: impl Fn(&ndarray::Array<f64, D>) -> f64) -> (usize, usize, f64) {
    let step = 1e-6;
    let (mut n, mut bad, mut worst) = (0, 0, 0.0f64);
    for (k, g) in analytic.iter().enumerate() {
        let mut up = x.clone();
        *up.iter_mut().nth(k).unwrap() += step;
        let mut down = x.clone();
        *down.iter_mut().nth(k).unwrap() -= step;
        let fd = (f(&up) - f(&down)) / (2.0 * step);
        let e = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
        worst = worst.max(e);
        n += 1;
        bad += usize::from(e > LOSS_FD_REL_TOL);
    }
    (n, bad, worst)
}

#[test]
fn criterion_2_loss_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = LossWeights {
        alpha_smooth: 0.7,
        ..LossWeights::default()
    };
    let (mut value_err, mut checked, mut bad, mut worst) = (0.0f64, 0usize, 0usize, 0.0f64);
    let mut tally = |r: (usize, usize, f64)| {
        checked += r.0;
        bad += r.1;
        worst = worst.max(r.2);
    };
    for _ in 0..20 {
        let (c, h, wd) = (2, 6, 7);
        // Probabilities kept away from the clamp so the gradient is smooth.
        let p = Array3::from_shape_fn((c, h, wd), |_| rng.gen_range(0.02..0.98));
        let y = Array3::from_shape_fn((c, h, wd), |_| f64::from(u8::from(rng.gen_bool(0.3))));
        let field = DisplacementField::new(
            Array2::from_shape_fn((h, wd), |_| rng.gen_range(-2.0..2.0)),
            Array2::from_shape_fn((h, wd), |_| rng.gen_range(-2.0..2.0)),
        )
        .unwrap();
        let records: Vec<SupervisionRecord> = (0..6)
            .map(|_| SupervisionRecord {
                i: rng.gen_range(0..h),
                j: rng.gen_range(0..wd),
                k: rng.gen_range(0..c),
                delta_i: rng.gen_range(-3.0..3.0),
                delta_j: rng.gen_range(-3.0..3.0),
                confidence: 0.5,
            })
            .collect();
        let dens = Array2::from_shape_fn((h, wd), |_| rng.gen_range(0.0..1.0));
        let mask = UnmatchedMask::from_mask(Array2::from_shape_fn((h, wd), |_| rng.gen_bool(0.4)));

        // Values against straight-line formulas.
        let t = sample_array(&p, &field).unwrap();
        let terms = PslTerms {
            sup: sup_loss(&field, &records).unwrap(),
            sim: sim_loss(&t, &y).unwrap(),
            smooth: Some(smooth_loss(&field)),
            density: Some(density_loss(&normalized_magnitude(&field), &dens).unwrap()),
        };
        let ref_terms = [
            ref_sup_loss(&field, &records),
            ref_sim_loss(&t, &y),
            ref_smooth_loss(&field),
            ref_density_loss(&ref_normalized_magnitude(&field), &dens),
        ];
        let got = [terms.sup.unwrap(), terms.sim, terms.smooth.unwrap(), terms.density.unwrap()];
        for (a, b) in got.iter().zip(&ref_terms) {
            value_err = value_err.max((a - b).abs());
        }
        let ref_psl = w.alpha_sup * ref_terms[0] + w.alpha_sim * ref_terms[1] + w.alpha_smooth * ref_terms[2] + w.alpha_density * ref_terms[3];
        value_err = value_err.max((psl_loss(&terms, &w) - ref_psl).abs());
        let (e, u) = (edge_loss(&p, &y).unwrap(), unmatched_loss(&p, &mask).unwrap());
        value_err = value_err.max((e - ref_edge_loss(&p, &y)).abs());
        value_err = value_err.max((u - ref_unmatched_loss(&p, &mask)).abs());
        value_err = value_err.max((joint_loss(e, u, &w) - (w.beta_edge * e + w.beta_unmatched * u)).abs());

        // Gradients against finite differences.
        tally(fd_check(&p, &edge_loss_grad(&p, &y).unwrap().1, |x| ref_edge_loss(x, &y)));
        tally(fd_check(&p, &unmatched_loss_grad(&p, &mask).unwrap().1, |x| ref_unmatched_loss(x, &mask)));
        tally(fd_check(&t, &sim_loss_grad(&t, &y).unwrap().1, |x| ref_sim_loss(x, &y)));
        tally(fd_check(&dens, &density_loss_grad(&dens, &y.index_axis(ndarray::Axis(0), 0).to_owned()).unwrap().1, |x| {
            ref_density_loss(x, &y.index_axis(ndarray::Axis(0), 0).to_owned())
        }));
        let (_, si, sj) = sup_loss_grad(&field, &records).unwrap().unwrap();
        let (_, mi, mj) = smooth_loss_grad(&field);
        let upstream = Array2::from_shape_fn((h, wd), |_| rng.gen_range(-1.0..1.0));
        let (ni, nj) = normalized_magnitude_vjp(&field, &upstream).unwrap();
        let other = field.delta_j().clone();
        let with_i = |a: &Array2<f64>| DisplacementField::new(a.clone(), other.clone()).unwrap();
        tally(fd_check(field.delta_i(), &si, |a| ref_sup_loss(&with_i(a), &records)));
        tally(fd_check(field.delta_i(), &mi, |a| ref_smooth_loss(&with_i(a))));
        tally(fd_check(field.delta_i(), &ni, |a| (ref_normalized_magnitude(&with_i(a)) * &upstream).sum()));
        let other = field.delta_i().clone();
        let with_j = |b: &Array2<f64>| DisplacementField::new(other.clone(), b.clone()).unwrap();
        tally(fd_check(field.delta_j(), &sj, |b| ref_sup_loss(&with_j(b), &records)));
        tally(fd_check(field.delta_j(), &mj, |b| ref_smooth_loss(&with_j(b))));
        tally(fd_check(field.delta_j(), &nj, |b| (ref_normalized_magnitude(&with_j(b)) * &upstream).sum()));
    }
    let elapsed = start.elapsed();
    let pass = value_err <= LOSS_ABS_TOL && bad == 0 && elapsed < Duration::from_secs(30);
    report(
        2,
        pass,
        format!("max value error {value_err:.2e}, {checked} gradient coordinates, {bad} above rel err {LOSS_FD_REL_TOL}, worst {worst:.2e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Array2<u8> {
    let mut a = Array2::zeros((h, w));
    for _ in 0..count {
        a[[rng.gen_range(0..h), rng.gen_range(0..w)]] = 1;
    }
    a
}

/// Maximum bipartite matching by repeated augmenting paths (Kuhn).
fn brute_force_matching(pred: &Array2<u8>, gt: &Array2<u8>, tol: f64) -> usize {
    let ps: Vec<(usize, usize)> = pred.indexed_iter().filter(|(_, v)| **v == 1).map(|(p, _)| p).collect();
    let gs: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, v)| **v == 1).map(|(p, _)| p).collect();
    let adj: Vec<Vec<usize>> = ps
        .iter()
        .map(|p| {
            (0..gs.len())
                .filter(|&g| ((p.0 as f64 - gs[g].0 as f64).powi(2) + (p.1 as f64 - gs[g].1 as f64).powi(2)).sqrt() <= tol)
                .collect()
        })
        .collect();
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], mate: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if mate[v].map_or(true, |m| augment(m, adj, seen, mate)) {
                    mate[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut mate = vec![None; gs.len()];
    (0..ps.len()).filter(|&u| augment(u, &adj, &mut vec![false; gs.len()], &mut mate)).count()
}

#[test]
fn criterion_3_matching_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut nearest_bad, mut eval_bad) = (0, 0);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(4..=32), rng.gen_range(4..=32));
        let (nt, np) = (rng.gen_range(1..=100), rng.gen_range(1..=100));
        let target = random_plane(&mut rng, h, w, nt);
        let pred = random_plane(&mut rng, h, w, np);
        let radius = rng.gen_range(1.0..6.0);

        let sources: Vec<(usize, usize)> = pred.indexed_iter().filter(|(_, v)| **v == 1).map(|(p, _)| p).collect();
        let got: Vec<_> = min_distance_match(&sources, target.view(), radius).unwrap().iter().map(|m| (m.source, m.target())).collect();
        let mut expected = Vec::new();
        for &s in &sources {
            let mut best: Option<(f64, (usize, usize))> = None;
            for (t, v) in target.indexed_iter() {
                let d = (s.0 as f64 - t.0 as f64).hypot(s.1 as f64 - t.1 as f64);
                if *v == 1 && d <= radius && best.map_or(true, |b| d < b.0) {
                    best = Some((d, t));
                }
            }
            if let Some((_, t)) = best {
                expected.push((s, t));
            }
        }
        nearest_bad += usize::from(got != expected);

        let tol = rng.gen_range(1.0..4.0);
        let counts = match_edges(pred.view(), target.view(), tol, usize::MAX).unwrap();
        eval_bad += usize::from(counts.matched_pred != brute_force_matching(&pred, &target, tol));
    }
    let elapsed = start.elapsed();
    let pass = nearest_bad == 0 && eval_bad == 0 && elapsed < Duration::from_secs(60);
    report(
        3,
        pass,
        format!("100 grids: nearest-match mismatches {nearest_bad}, evaluation-matcher mismatches {eval_bad}, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_identity_start() {
    let spec = SceneSpec::default();
    let ds = generate_dataset::<f32>(&spec, 10, 4, 1.0).unwrap();
    let cfg = TrainConfig::default();
    let det = EdgeDetectorParams::<f32>::new(
        &edgeshift::models::DetectorConfig {
            classes: spec.classes,
            ..cfg.detector.clone()
        },
        4,
    );
    let loc = LocalizerParams::<f32>::new(
        &LocalizerConfig {
            classes: spec.classes,
            ..cfg.localizer
        },
        4,
    );
    let mut exact = 0;
    for s in &ds.scenes {
        let pred = det.detect(&s.image).unwrap();
        let field = predict_field(&det, &loc, &s.image, &s.labels, cfg.weights.tau).unwrap();
        let warped = sample_with_field(&pred, &field).unwrap();
        exact += usize::from(field.is_zero() && warped == pred);
    }
    let pass = exact == ds.scenes.len();
    report(4, pass, format!("{exact}/{} scenes bit-exact under the zero-initialized localizer", ds.scenes.len()));
    assert!(pass);
}

// ------------------------------------------------------- shared pipelines 5-9

struct Pipeline {
    dataset: Dataset<f32>,
    cfg: TrainConfig,
    warmup_curve: LearningCurve,
    selected: usize,
    warm: EdgeDetectorParams<f32>,
    localizer: LocalizerParams<f32>,
    joint: EdgeDetectorParams<f32>,
    /// Warm-up plus shift learning, the span the field-recovery budget covers.
    psl_elapsed: Duration,
}

fn build_pipeline(seed: u64) -> Pipeline {
    let start = Instant::now();
    let dataset = generate_dataset::<f32>(&SceneSpec::default(), SCENES, seed, TRAIN_FRACTION).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let warm_out = warmup_train(&dataset, &cfg, None).unwrap();
    let selected = select_warmup(&warm_out.curve).unwrap();
    let warm = warm_out.at_epoch(selected).unwrap().clone();
    let localizer = train_psl(&warm, &dataset, &cfg, None).unwrap().localizer;
    let psl_elapsed = start.elapsed();
    let joint = joint_train(warm.clone(), &localizer, &dataset, &cfg, None).unwrap().last().clone();
    eprintln!("pipeline seed {seed}: selected warm-up epoch {selected}, built in {:.1?}", start.elapsed());
    Pipeline {
        dataset,
        cfg,
        warmup_curve: warm_out.curve,
        selected,
        warm,
        localizer,
        joint,
        psl_elapsed,
    }
}

fn pipeline(seed: u64) -> &'static Pipeline {
    static CELLS: [OnceLock<Pipeline>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let n = SEEDS.iter().position(|s| *s == seed).expect("known seed");
    CELLS[n].get_or_init(|| build_pipeline(seed))
}

/// (Thin ODS-F, Thin mAP, Raw mAP) on val-clean at a 2 px tolerance.
fn val_clean_scores(p: &Pipeline, det: &EdgeDetectorParams<f32>) -> (f64, f64, f64) {
    let scenes = p.dataset.split(Split::ValClean);
    let preds: Vec<EdgeProbMap<f32>> = scenes.iter().map(|s| det.detect(&s.image).unwrap()).collect();
    let gts: Vec<BinaryLabelMap> = scenes.iter().map(|s| s.clean_labels.clone().unwrap()).collect();
    let thin = evaluate(&preds, &gts, &EvalConfig::new(Setting::Thin, Tolerance::Pixels(2.0))).unwrap();
    let raw = evaluate(&preds, &gts, &EvalConfig::new(Setting::Raw, Tolerance::Pixels(2.0))).unwrap();
    (thin.ods_f, thin.map, raw.map)
}

/// Mean endpoint error over noisy-edge pixels of the training split,
/// weighted by pixel count.
fn train_epe(p: &Pipeline, loc: Option<&LocalizerParams<f32>>) -> f64 {
    let (mut total, mut count) = (0.0, 0.0);
    for s in p.dataset.split(Split::Train) {
        let truth = s.field.as_ref().unwrap();
        let (h, w) = truth.shape();
        let field = match loc {
            Some(l) => predict_field(&p.warm, l, &s.image, &s.labels, p.cfg.weights.tau).unwrap(),
            None => DisplacementField::zeros(h, w),
        };
        let mask = s.labels.union();
        let n = mask.iter().filter(|v| **v == 1).count() as f64;
        if let Some(e) = endpoint_error(&field, truth, &mask).unwrap() {
            total += e * n;
            count += n;
        }
    }
    total / count
}

#[test]
fn criterion_5_field_recovery() {
    let p = pipeline(0);
    let before = train_epe(p, None);
    let after = train_epe(p, Some(&p.localizer));
    let pass = before >= EPE_START_MIN && after < EPE_TARGET && p.psl_elapsed < FIELD_RECOVERY_BUDGET;
    report(
        5,
        pass,
        format!(
            "train noisy-edge EPE {before:.3} px -> {after:.3} px (need start >= {EPE_START_MIN}, end < {EPE_TARGET}); warm-up + shift learning {:.1?}",
            p.psl_elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_joint_beats_warmup() {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let p = pipeline(seed);
        let (wo, wm, _) = val_clean_scores(p, &p.warm);
        let (jo, jm, _) = val_clean_scores(p, &p.joint);
        let ok = jo > wo && jm - wm >= MAP_GAIN_MIN;
        pass &= ok;
        lines.push(format!("seed {seed}: ODS-F {wo:.4} -> {jo:.4}, mAP {wm:.4} -> {jm:.4}"));
    }
    report(6, pass, format!("{} (need ODS-F gain > 0 and mAP gain >= {MAP_GAIN_MIN})", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_7_unmatched_term_ablation() {
    let p = pipeline(0);
    let mut cfg = p.cfg.clone();
    cfg.weights.beta_unmatched = 0.0;
    let ablated = joint_train(p.warm.clone(), &p.localizer, &p.dataset, &cfg, None).unwrap().last().clone();
    let (_, _, full) = val_clean_scores(p, &p.joint);
    let (_, _, without) = val_clean_scores(p, &ablated);
    let pass = full - without >= ABLATION_MAP_DROP_MIN;
    report(7, pass, format!("raw mAP with unmatched term {full:.4}, without {without:.4} (need drop >= {ABLATION_MAP_DROP_MIN})"));
    assert!(pass);
}

fn trailing_average(values: &[f64], window: usize) -> Vec<f64> {
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn criterion_8_memorization_effect() {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let p = pipeline(seed);
        let clean = p.warmup_curve.series(TRAIN_CLEAN);
        let noisy: Vec<f64> = p.warmup_curve.series(TRAIN_NOISY).iter().map(|q| q.1).collect();
        let final_epoch = clean.last().unwrap().0;
        // First epoch attaining the maximum.
        let peak = clean.iter().fold(clean[0], |b, q| if q.1 > b.1 { *q } else { b }).0;
        let avg = trailing_average(&noisy, MOVING_AVERAGE);
        let dips = avg.windows(2).filter(|w| w[1] < w[0]).count();
        let ok = peak < final_epoch && dips == 0 && p.selected.abs_diff(peak) <= SELECTION_WINDOW;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: clean peak epoch {peak}/{final_epoch}, noisy {MOVING_AVERAGE}-epoch average decreases {dips} times, selected {}",
            p.selected
        ));
    }
    report(8, pass, format!("{} (need peak before final, no decreases, selection within {SELECTION_WINDOW})", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_9_transition_fit() {
    let p = pipeline(0);
    let scenes = p.dataset.split(Split::Train);
    let labels: Vec<BinaryLabelMap> = scenes.iter().map(|s| s.labels.clone()).collect();
    let mut plain = Vec::new();
    let mut moved = Vec::new();
    for s in &scenes {
        let pred = p.warm.detect(&s.image).unwrap();
        let field = predict_field(&p.warm, &p.localizer, &s.image, &s.labels, p.cfg.weights.tau).unwrap();
        moved.push(sample_with_field(&pred, &field).unwrap());
        plain.push(pred);
    }
    let ecfg = EvalConfig::new(Setting::Raw, Tolerance::Pixels(2.0));
    let base = evaluate(&plain, &labels, &ecfg).unwrap().ods_f;
    let fit = evaluate(&moved, &labels, &ecfg).unwrap().ods_f;
    let pass = fit - base >= TRANSITION_GAIN_MIN;
    report(9, pass, format!("raw ODS-F against noisy labels: untransformed {base:.4}, transformed {fit:.4} (need gain >= {TRANSITION_GAIN_MIN})"));
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_evaluation_self_consistency() {
    let ds = generate_dataset::<f64>(&SceneSpec::default(), 4, 10, 1.0).unwrap();
    let gts: Vec<BinaryLabelMap> = ds.scenes.iter().map(|s| s.clean_labels.clone().unwrap()).collect();
    let perfect: Vec<EdgeProbMap<f64>> = gts.iter().map(|g| g.to_prob()).collect();
    let empty: Vec<EdgeProbMap<f64>> = gts.iter().map(|g| EdgeProbMap::filled(g.channels(), g.height(), g.width(), 0.0)).collect();
    let mut pass = true;
    let mut lines = Vec::new();
    for setting in [Setting::Thin, Setting::Raw] {
        let cfg = EvalConfig::new(setting, Tolerance::Pixels(2.0));
        let good = evaluate(&perfect, &gts, &cfg).unwrap();
        let none = evaluate(&empty, &gts, &cfg).unwrap();
        pass &= good.ods_f == 1.0 && good.ois_f == 1.0 && good.map == 1.0 && none.ods_f == 0.0;
        lines.push(format!(
            "{setting:?}: perfect ODS {} OIS {} mAP {}, empty ODS {}",
            good.ods_f, good.ois_f, good.map, none.ods_f
        ));
    }
    report(10, pass, lines.join("; "));
    assert!(pass);
}
