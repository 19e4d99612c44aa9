//! Correspondence-based edge benchmark: one-to-one pixel matching within a
//! distance tolerance, precision/recall over probability thresholds, and the
//! ODS-F / OIS-F / mAP summaries under the "Thin" and "Raw" settings.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::maps::{BinaryLabelMap, EdgeProbMap};
use crate::matching::{histogram_of, ShiftHistogram, SupervisionRecord};
use crate::morph::thin;
use crate::scalar::Real;

pub const DEFAULT_THRESHOLDS: usize = 99;
/// Components of the candidate graph with more pairs than this fall back to
/// greedy nearest-first matching.
pub const DEFAULT_PAIR_CUTOFF: usize = 5_000;
pub const DEFAULT_TOLERANCE_FRACTION: f64 = 0.0075;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// Binarized predictions are skeletonized before matching.
    Thin,
    Raw,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Thin => "thin",
            Setting::Raw => "raw",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thin" => Ok(Setting::Thin),
            "raw" => Ok(Setting::Raw),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}` (thin|raw)"))),
        }
    }
}

/// Matching distance, absolute or relative to the image diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Tolerance {
    Pixels(f64),
    DiagonalFraction(f64),
}

impl Tolerance {
    pub fn pixels(&self, height: usize, width: usize) -> f64 {
        match *self {
            Tolerance::Pixels(p) => p,
            Tolerance::DiagonalFraction(f) => f * (height as f64).hypot(width as f64),
        }
    }
}

impl FromStr for Tolerance {
    type Err = Error;

    /// `"2px"` is absolute; a bare number is a fraction of the diagonal.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad tolerance `{s}` (e.g. `2px` or `0.0075`)"));
        let t = match s.strip_suffix("px") {
            Some(p) => Tolerance::Pixels(p.trim().parse().map_err(|_| bad())?),
            None => Tolerance::DiagonalFraction(s.trim().parse().map_err(|_| bad())?),
        };
        match t {
            Tolerance::Pixels(v) | Tolerance::DiagonalFraction(v) if v > 0.0 && v.is_finite() => Ok(t),
            _ => Err(bad()),
        }
    }
}

/// Result of one-to-one matching between two edge maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub matched_pred: usize,
    pub total_pred: usize,
    pub matched_gt: usize,
    pub total_gt: usize,
    /// Some component exceeded the pair cutoff and was matched greedily.
    pub greedy: bool,
}

impl MatchCounts {
    fn add(&mut self, o: &MatchCounts) {
        self.matched_pred += o.matched_pred;
        self.total_pred += o.total_pred;
        self.matched_gt += o.matched_gt;
        self.total_gt += o.total_gt;
        self.greedy |= o.greedy;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.matched_pred, self.total_pred)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched_gt, self.total_gt)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Candidate graph between predicted (left) and ground-truth (right) pixels.
struct Candidates {
    adj: Vec<Vec<(u32, u32)>>,
    n_right: usize,
}

fn candidates(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, tol: f64) -> (Candidates, usize) {
    let (h, w) = gt.dim();
    let mut gt_index = Array2::<i32>::from_elem((h, w), -1);
    let mut n_right = 0;
    for ((i, j), v) in gt.indexed_iter() {
        if *v == 1 {
            gt_index[[i, j]] = n_right as i32;
            n_right += 1;
        }
    }
    let r = tol.floor() as i64;
    let r2 = tol * tol;
    let mut offsets: Vec<(i64, i64, u32)> = (-r..=r)
        .flat_map(|a| (-r..=r).map(move |b| (a, b, (a * a + b * b) as u32)))
        .filter(|(_, _, d)| (*d as f64) <= r2)
        .collect();
    offsets.sort_by_key(|&(a, b, d)| (d, a, b));
    let mut adj = Vec::new();
    for ((i, j), v) in pred.indexed_iter() {
        if *v != 1 {
            continue;
        }
        let mut list = Vec::new();
        for &(a, b, d) in &offsets {
            let (ti, tj) = (i as i64 + a, j as i64 + b);
            if ti >= 0 && tj >= 0 && (ti as usize) < h && (tj as usize) < w {
                let g = gt_index[[ti as usize, tj as usize]];
                if g >= 0 {
                    list.push((g as u32, d));
                }
            }
        }
        adj.push(list);
    }
    let n_edges = adj.iter().map(Vec::len).sum();
    (Candidates { adj, n_right }, n_edges)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

const FREE: u32 = u32::MAX;

/// Hopcroft-Karp restricted to the given left vertices.
fn hopcroft_karp(c: &Candidates, lefts: &[usize], mate_l: &mut [u32], mate_r: &mut [u32]) {
    let mut dist = vec![u32::MAX; c.adj.len()];
    loop {
        let mut queue = VecDeque::new();
        for &u in lefts {
            if mate_l[u] == FREE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = u32::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &c.adj[u] {
                let m = mate_r[v as usize];
                if m == FREE {
                    found = true;
                } else if dist[m as usize] == u32::MAX {
                    dist[m as usize] = dist[u] + 1;
                    queue.push_back(m as usize);
                }
            }
        }
        if !found {
            return;
        }
        let mut progress = false;
        for &u in lefts {
            if mate_l[u] == FREE && augment(c, u, &mut dist, mate_l, mate_r) {
                progress = true;
            }
        }
        if !progress {
            return;
        }
    }
}

fn augment(c: &Candidates, u: usize, dist: &mut [u32], mate_l: &mut [u32], mate_r: &mut [u32]) -> bool {
    // Iterative DFS along the BFS layering.
    let mut stack: Vec<(usize, usize)> = vec![(u, 0)];
    let mut path: Vec<(usize, u32)> = Vec::new();
    while let Some(&mut (x, ref mut next)) = stack.last_mut() {
        if *next >= c.adj[x].len() {
            dist[x] = u32::MAX;
            stack.pop();
            path.pop();
            continue;
        }
        let (v, _) = c.adj[x][*next];
        *next += 1;
        let m = mate_r[v as usize];
        if m == FREE {
            path.push((x, v));
            for &(l, r) in &path {
                mate_l[l] = r;
                mate_r[r as usize] = l as u32;
            }
            return true;
        }
        if dist[m as usize] == dist[x].wrapping_add(1) {
            path.push((x, v));
            stack.push((m as usize, 0));
        }
    }
    false
}

/// One-to-one matching of predicted to ground-truth edge pixels within
/// `tol_px`. Maximum cardinality per connected component of the candidate
/// graph; components above `pair_cutoff` pairs use greedy nearest-first.
pub fn match_edges(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, tol_px: f64, pair_cutoff: usize) -> Result<MatchCounts> {
    if !(tol_px > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol_px}")));
    }
    if pred.dim() != gt.dim() {
        let (a, b) = (gt.dim(), pred.dim());
        return Err(Error::shape("match_edges", &[a.0, a.1], &[b.0, b.1]));
    }
    let (c, _) = candidates(pred, gt, tol_px);
    let n_left = c.adj.len();
    let mut parent: Vec<usize> = (0..n_left + c.n_right).collect();
    for (u, list) in c.adj.iter().enumerate() {
        for &(v, _) in list {
            let (a, b) = (find(&mut parent, u), find(&mut parent, n_left + v as usize));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for u in 0..n_left {
        if !c.adj[u].is_empty() {
            let root = find(&mut parent, u);
            groups.entry(root).or_default().push(u);
        }
    }
    let mut mate_l = vec![FREE; n_left];
    let mut mate_r = vec![FREE; c.n_right];
    let mut greedy = false;
    for lefts in groups.values() {
        let pairs: usize = lefts.iter().map(|&u| c.adj[u].len()).sum();
        if pairs <= pair_cutoff {
            hopcroft_karp(&c, lefts, &mut mate_l, &mut mate_r);
        } else {
            greedy = true;
            let mut edges: Vec<(u32, usize, u32)> = lefts
                .iter()
                .flat_map(|&u| c.adj[u].iter().map(move |&(v, d)| (d, u, v)))
                .collect();
            edges.sort_unstable();
            for (_, u, v) in edges {
                if mate_l[u] == FREE && mate_r[v as usize] == FREE {
                    mate_l[u] = v;
                    mate_r[v as usize] = u as u32;
                }
            }
        }
    }
    let matched = mate_l.iter().filter(|m| **m != FREE).count();
    Ok(MatchCounts {
        matched_pred: matched,
        total_pred: n_left,
        matched_gt: matched,
        total_gt: c.n_right,
        greedy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub setting: Setting,
    pub tolerance: Tolerance,
    pub thresholds: usize,
    pub pair_cutoff: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Thin,
            tolerance: Tolerance::DiagonalFraction(DEFAULT_TOLERANCE_FRACTION),
            thresholds: DEFAULT_THRESHOLDS,
            pair_cutoff: DEFAULT_PAIR_CUTOFF,
        }
    }
}

impl EvalConfig {
    pub fn new(setting: Setting, tolerance: Tolerance) -> Self {
        Self {
            setting,
            tolerance,
            ..Self::default()
        }
    }

    /// Uniform thresholds strictly inside `(0, 1)`.
    pub fn threshold_values(&self) -> Vec<f64> {
        let n = self.thresholds.max(1);
        (1..=n).map(|t| t as f64 / (n + 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub ods_f: f64,
    pub ods_threshold: f64,
    pub ois_f: f64,
    pub map: f64,
    /// Images with ground truth for this class.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub tolerance: Tolerance,
    pub thresholds: Vec<f64>,
    /// Only classes with ground truth in at least one image.
    pub classes: Vec<ClassEval>,
    pub ods_f: f64,
    pub ois_f: f64,
    pub map: f64,
    /// (image, class) pairs skipped because the class had no ground truth.
    pub excluded: usize,
    pub greedy_fallback: bool,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// One row per (class, threshold).
    pub fn write_pr_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["class", "threshold", "precision", "recall", "f"])?;
        for c in &self.classes {
            for (n, t) in self.thresholds.iter().enumerate() {
                wtr.write_record([
                    c.class.to_string(),
                    format!("{t:.4}"),
                    format!("{:.6}", c.precision[n]),
                    format!("{:.6}", c.recall[n]),
                    format!("{:.6}", c.f[n]),
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("pr csv", e))?;
        Ok(())
    }
}

/// Area under the precision-recall curve with precision made monotone
/// (each point takes the best precision at equal or higher recall).
pub fn average_precision(precision: &[f64], recall: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = recall.iter().copied().zip(precision.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut best = 0.0f64;
    for p in pts.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in pts {
        if r > prev_r {
            area += (r - prev_r) * p;
            prev_r = r;
        }
    }
    area
}

/// Match counts per threshold for one image and class.
pub fn image_class_counts<T: Real>(
    pred: ArrayView2<'_, T>,
    gt: ArrayView2<'_, u8>,
    thresholds: &[f64],
    setting: Setting,
    tol_px: f64,
    pair_cutoff: usize,
) -> Result<Vec<MatchCounts>> {
    thresholds
        .iter()
        .map(|&t| {
            let bin = pred.mapv(|p| u8::from(p.to_f64_lossy() >= t));
            let bin = match setting {
                Setting::Thin => thin(bin.view()),
                Setting::Raw => bin,
            };
            match_edges(bin.view(), gt, tol_px, pair_cutoff)
        })
        .collect()
}

/// Benchmarks predictions against ground truth.
pub fn evaluate<T: Real>(preds: &[EdgeProbMap<T>], gts: &[BinaryLabelMap], cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("evaluate image lists", &[gts.len()], &[preds.len()]));
    }
    let thresholds = cfg.threshold_values();
    let n_classes = gts.first().map_or(0, BinaryLabelMap::channels);
    let mut classes = Vec::new();
    let mut excluded = 0;
    let mut greedy = false;
    for k in 0..n_classes {
        let mut totals = vec![MatchCounts::default(); thresholds.len()];
        let mut ois = Vec::new();
        for (pred, gt) in preds.iter().zip(gts) {
            if pred.values().shape() != gt.values().shape() {
                return Err(Error::shape("prediction vs ground truth", gt.values().shape(), pred.values().shape()));
            }
            let g = gt.channel(k);
            if g.iter().all(|v| *v == 0) {
                excluded += 1;
                continue;
            }
            let tol = cfg.tolerance.pixels(gt.height(), gt.width());
            let counts = image_class_counts(pred.channel(k), g, &thresholds, cfg.setting, tol, cfg.pair_cutoff)?;
            ois.push(counts.iter().map(MatchCounts::f_measure).fold(0.0, f64::max));
            for (t, c) in totals.iter_mut().zip(&counts) {
                t.add(c);
            }
        }
        if ois.is_empty() {
            continue;
        }
        greedy |= totals.iter().any(|t| t.greedy);
        let precision: Vec<f64> = totals.iter().map(MatchCounts::precision).collect();
        let recall: Vec<f64> = totals.iter().map(MatchCounts::recall).collect();
        let f: Vec<f64> = precision.iter().zip(&recall).map(|(p, r)| f_measure(*p, *r)).collect();
        let (best, ods_f) = f
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bf), (i, v)| if *v > bf { (i, *v) } else { (bi, bf) });
        classes.push(ClassEval {
            class: k,
            map: average_precision(&precision, &recall),
            precision,
            recall,
            f,
            ods_f,
            ods_threshold: thresholds[best],
            ois_f: ois.iter().sum::<f64>() / ois.len() as f64,
            images: ois.len(),
        });
    }
    let mean = |get: fn(&ClassEval) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(get).sum::<f64>() / classes.len() as f64
        }
    };
    Ok(EvalReport {
        setting: cfg.setting,
        tolerance: cfg.tolerance,
        ods_f: mean(|c| c.ods_f),
        ois_f: mean(|c| c.ois_f),
        map: mean(|c| c.map),
        thresholds,
        classes,
        excluded,
        greedy_fallback: greedy,
    })
}

/// Endpoint errors between a predicted field and reference shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionReport {
    pub mean_error: f64,
    pub histogram: ShiftHistogram,
    /// ODS-F of the transformed prediction against the noisy labels, when
    /// the caller supplies it.
    pub transformed_ods_f: Option<f64>,
}

impl TransitionReport {
    pub fn count(&self) -> usize {
        self.histogram.total()
    }
}

/// Per-pixel Euclidean error between the predicted field and reference
/// shifts, histogrammed in half-pixel bins. Duplicate reference locations
/// count once each.
pub fn analyze_transition<T: Real>(predicted: &DisplacementField<T>, reference: &[SupervisionRecord]) -> Result<TransitionReport> {
    let (h, w) = predicted.shape();
    let errors = reference
        .iter()
        .map(|r| {
            if r.i >= h || r.j >= w {
                return Err(Error::InvalidArgument(format!("reference pixel ({}, {}) outside {h}x{w}", r.i, r.j)));
            }
            let (di, dj) = predicted.at(r.i, r.j);
            Ok((di.to_f64_lossy() - r.delta_i).hypot(dj.to_f64_lossy() - r.delta_j))
        })
        .collect::<Result<Vec<f64>>>()?;
    let histogram = histogram_of(errors, 0.5)?;
    Ok(TransitionReport {
        mean_error: histogram.mean(),
        histogram,
        transformed_ods_f: None,
    })
}
