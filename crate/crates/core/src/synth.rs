//! Synthetic scenes with exact boundaries, and label corruption by a known
//! displacement field.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::density::{blur, local_edge_density, DensityMap, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::field::{sample_array, DisplacementField};
use crate::maps::BinaryLabelMap;
use crate::morph::thin;
use crate::scalar::Real;

pub const MIN_SIZE: usize = 32;
pub const MAX_SIZE: usize = 256;
pub const MAX_CLASSES: usize = 8;
/// Sampled label values at or above this become edges.
pub const WARP_THRESHOLD: f64 = 0.3;
/// Smoothed edge density on edge pixels of a typical generated scene.
pub const REFERENCE_DENSITY: f64 = 0.1;

const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.40, 0.95],
    [0.95, 0.90, 0.20],
    [0.85, 0.25, 0.85],
    [0.20, 0.90, 0.90],
    [0.95, 0.60, 0.15],
    [0.90, 0.90, 0.90],
];

/// Parameters of the corruption field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionParams {
    /// Expected mean shift magnitude on clean edge pixels, in pixels.
    pub noise_level: f64,
    /// Within a scene, magnitude is proportional to `base + density`.
    pub base: f64,
    /// Gamma shape of the per-scene magnitude scale; small values give a
    /// heavy tail of strongly corrupted scenes.
    pub spread: f64,
    /// Scene scales and pixel magnitudes are capped at `cap * noise_level`.
    pub cap: f64,
    /// Highest spatial frequency of the random field, in cycles per image.
    pub frequency: f64,
    /// Blur applied to the density before it scales the field.
    pub smoothing: f64,
    pub window: usize,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            noise_level: 2.5,
            base: 0.1,
            spread: 0.3,
            cap: 4.0,
            frequency: 1.5,
            smoothing: 4.0,
            window: DEFAULT_WINDOW,
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {}", self.noise_level)));
        }
        if !(self.base >= 0.0 && self.spread > 0.0 && self.cap > 0.0 && self.frequency > 0.0) {
            return Err(Error::InvalidArgument("corruption base/skew/cap out of range".into()));
        }
        Ok(())
    }

    /// Multiplier on a Gamma(spread) draw giving scene scales with mean one
    /// after capping.
    fn scale_multiplier(&self) -> f64 {
        let (k, cap) = (self.spread, self.cap);
        let cdf = |shape: f64, x: f64| Gamma::new(shape, 1.0).map_or(1.0, |g| g.cdf(x));
        let mean = |c: f64| c * k * cdf(k + 1.0, cap / c) + cap * (1.0 - cdf(k, cap / c));
        // `mean` increases with `c`; bisect in log space.
        let (mut lo, mut hi) = (1e-6f64, 1e6f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if mean(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    /// Draws the mean shift of one scene, in pixels.
    pub fn draw_scene_level<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rand_distr::Gamma::new(self.spread, 1.0).map_or(1.0, |g| rng.sample(g));
        self.noise_level * (self.scale_multiplier() * z).min(self.cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub size: usize,
    pub classes: usize,
    pub complexity: u32,
    pub corruption: CorruptionParams,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 96,
            classes: 3,
            complexity: 1,
            corruption: CorruptionParams::default(),
        }
    }
}

/// Image and exact boundaries before corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene<T> {
    /// `(3, H, W)` in `[0, 1]`, quantized to 8 bits.
    pub image: Array3<T>,
    /// Class of each pixel, `-1` for background.
    pub class_map: Array2<i32>,
    pub clean_labels: BinaryLabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T> {
    pub image: Array3<T>,
    pub clean_labels: BinaryLabelMap,
    pub true_field: DisplacementField<T>,
    pub noisy_labels: BinaryLabelMap,
}

enum Shape {
    Ellipse { ci: f64, cj: f64, a: f64, b: f64, theta: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, i: f64, j: f64) -> bool {
        match self {
            Shape::Ellipse { ci, cj, a, b, theta } => {
                let (di, dj) = (i - ci, j - cj);
                let (s, c) = theta.sin_cos();
                let u = c * dj + s * di;
                let v = -s * dj + c * di;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // Even-odd ray casting.
                let mut inside = false;
                let n = pts.len();
                for k in 0..n {
                    let (ai, aj) = pts[k];
                    let (bi, bj) = pts[(k + 1) % n];
                    if (ai > i) != (bi > i) && j < aj + (i - ai) / (bi - ai) * (bj - aj) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: f64, jag: f64, convex: bool) -> Shape {
    let r = size * rng.gen_range(0.14..0.28);
    // Shapes stay inside the frame so every boundary is closed.
    let margin = r + 2.0;
    let ci = rng.gen_range(margin..size - margin);
    let cj = rng.gen_range(margin..size - margin);
    if convex || rng.gen_bool(0.4) {
        if rng.gen_bool(0.5) {
            return Shape::Ellipse {
                ci,
                cj,
                a: r,
                b: r * rng.gen_range(0.55..1.0),
                theta: rng.gen_range(0.0..PI),
            };
        }
        let n = rng.gen_range(3..=6);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let pts = (0..n)
            .map(|k| {
                let t = phase + 2.0 * PI * k as f64 / n as f64;
                (ci + r * t.sin(), cj + r * t.cos())
            })
            .collect();
        return Shape::Polygon(pts);
    }
    let n = rng.gen_range(5..=9) * 2;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let pts = (0..n)
        .map(|k| {
            let t = phase + 2.0 * PI * (k as f64 + rng.gen_range(-0.25..0.25)) / n as f64;
            let rr = if k % 2 == 0 { r } else { r * (1.0 - jag * rng.gen_range(0.5..1.0)) };
            (ci + rr * t.sin(), cj + rr * t.cos())
        })
        .collect();
    Shape::Polygon(pts)
}

/// Pixels of class `k` with a 4-neighbor of a different label.
fn class_boundaries(class_map: &Array2<i32>, classes: usize) -> Vec<Array2<u8>> {
    let (h, w) = class_map.dim();
    (0..classes as i32)
        .map(|k| {
            let raw = Array2::from_shape_fn((h, w), |(i, j)| {
                if class_map[[i, j]] != k {
                    return 0;
                }
                let differs = |a: usize, b: usize| class_map[[a, b]] != k;
                let edge = (i > 0 && differs(i - 1, j))
                    || (i + 1 < h && differs(i + 1, j))
                    || (j > 0 && differs(i, j - 1))
                    || (j + 1 < w && differs(i, j + 1));
                u8::from(edge)
            });
            thin(raw.view())
        })
        .collect()
}

/// Smooth random scalar field built from a few low-frequency waves.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, waves: usize, max_freq: f64) -> Array2<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            (
                a / (waves as f64).sqrt(),
                rng.gen_range(-max_freq..max_freq),
                rng.gen_range(-max_freq..max_freq),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let scale = 2.0 * PI / h.max(w) as f64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        params
            .iter()
            .map(|(a, fi, fj, ph)| a * (scale * (fi * i as f64 + fj * j as f64) + ph).cos())
            .sum()
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders filled shapes over a textured background. Deterministic per seed.
pub fn render_scene<T: Real>(seed: u64, size: usize, classes: usize, complexity: u32) -> Result<RenderedScene<T>> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::InvalidArgument(format!("size must be in [{MIN_SIZE}, {MAX_SIZE}], got {size}")));
    }
    if !(1..=MAX_CLASSES).contains(&classes) {
        return Err(Error::InvalidArgument(format!("classes must be in [1, {MAX_CLASSES}], got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shapes = if complexity == 0 { 1 } else { 1 + 2 * complexity as usize };
    let jag = (0.15 * complexity as f64).min(0.6);
    let mut class_map = Array2::from_elem((size, size), -1i32);
    let mut shade = Array2::<f64>::zeros((size, size));
    for _ in 0..n_shapes {
        let shape = random_shape(&mut rng, size as f64, jag, complexity == 0);
        let k = rng.gen_range(0..classes) as i32;
        let tone = rng.gen_range(-0.06..0.06);
        for ((i, j), c) in class_map.indexed_iter_mut() {
            if shape.contains(i as f64, j as f64) {
                *c = k;
                shade[[i, j]] = tone;
            }
        }
    }
    let texture: Vec<Array2<f64>> = (0..3).map(|_| smooth_noise(&mut rng, size, size, 6, 6.0)).collect();
    let mut image = Array3::<T>::zeros((3, size, size));
    for ch in 0..3 {
        for ((i, j), k) in class_map.indexed_iter() {
            let grain: f64 = rng.gen_range(-0.02..0.02);
            let v = if *k < 0 {
                0.25 + 0.07 * texture[ch][[i, j]] + grain
            } else {
                PALETTE[*k as usize][ch] * 0.85 + shade[[i, j]] + 0.03 * texture[ch][[i, j]] + grain
            };
            image[[ch, i, j]] = T::of(quantize(v));
        }
    }
    let clean_labels = BinaryLabelMap::from_channels(&class_boundaries(&class_map, classes))?;
    Ok(RenderedScene {
        image,
        class_map,
        clean_labels,
    })
}

/// Pixels enclosed by edges: everything not 4-connected to the frame.
fn enclosed(edges: ArrayView2<'_, u8>) -> Array2<f64> {
    let (h, w) = edges.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| [(i, 0), (i, w - 1)])
        .chain((0..w).flat_map(|j| [(0, j), (h - 1, j)]))
        .collect();
    while let Some((i, j)) = stack.pop() {
        if outside[[i, j]] || edges[[i, j]] == 1 {
            continue;
        }
        outside[[i, j]] = true;
        if i > 0 {
            stack.push((i - 1, j));
        }
        if i + 1 < h {
            stack.push((i + 1, j));
        }
        if j > 0 {
            stack.push((i, j - 1));
        }
        if j + 1 < w {
            stack.push((i, j + 1));
        }
    }
    outside.mapv(|o| if o { 0.0 } else { 1.0 })
}

/// Inward-pointing edge normals, fading to zero far from object outlines.
fn inward_normals(edges: ArrayView2<'_, u8>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = edges.dim();
    let f = blur(&enclosed(edges), 3.0);
    let at = |i: i64, j: i64| f[[i.clamp(0, h as i64 - 1) as usize, j.clamp(0, w as i64 - 1) as usize]];
    let gi = Array2::from_shape_fn((h, w), |(i, j)| 0.5 * (at(i as i64 + 1, j as i64) - at(i as i64 - 1, j as i64)));
    let gj = Array2::from_shape_fn((h, w), |(i, j)| 0.5 * (at(i as i64, j as i64 + 1) - at(i as i64, j as i64 - 1)));
    // A unit step blurred at this scale peaks near 0.13.
    let eps = 0.01;
    let norm = Zip::from(&gi).and(&gj).map_collect(|a, b| 1.0 / (a.hypot(*b) + eps));
    (&gi * &norm, &gj * &norm)
}

/// Warps clean labels through `field`, then binarizes and thins each channel.
pub fn warp_labels<T: Real>(clean: &BinaryLabelMap, field: &DisplacementField<T>) -> Result<BinaryLabelMap> {
    let sampled = sample_array(&clean.to_real::<T>(), field)?;
    let channels: Vec<Array2<u8>> = sampled
        .outer_iter()
        .map(|plane| thin(plane.mapv(|v| u8::from(v.to_f64_lossy() >= WARP_THRESHOLD)).view()))
        .collect();
    BinaryLabelMap::from_channels(&channels)
}

/// Draws a smooth field acting along edge normals, with magnitude growing
/// with local edge density, and warps the clean labels through it. Returns
/// the noisy labels and the exact field used.
pub fn corrupt_labels<T: Real>(
    clean: &BinaryLabelMap,
    density: &DensityMap<T>,
    params: &CorruptionParams,
    seed: u64,
) -> Result<(BinaryLabelMap, DisplacementField<T>)> {
    params.validate()?;
    let (h, w) = (clean.height(), clean.width());
    if density.values().dim() != (h, w) {
        return Err(Error::shape("density vs labels", &[h, w], density.values().shape()));
    }
    let union = clean.union();
    let edge_px: Vec<(usize, usize)> = union.indexed_iter().filter(|(_, v)| **v == 1).map(|(p, _)| p).collect();
    if params.noise_level == 0.0 || edge_px.is_empty() {
        return Ok((clean.clone(), DisplacementField::zeros(h, w)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let level = params.draw_scene_level(&mut rng);
    let wobble = smooth_noise(&mut rng, h, w, 8, params.frequency);
    // Each class's outlines are dilated or eroded by a random weight; where
    // two classes meet their contributions only partly cancel.
    let mut ni = Array2::<f64>::zeros((h, w));
    let mut nj = Array2::<f64>::zeros((h, w));
    for k in 0..clean.channels() {
        let weight = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.4..1.0);
        let (a, b) = inward_normals(clean.channel(k));
        ni.scaled_add(weight, &a);
        nj.scaled_add(weight, &b);
    }
    // Smoothed so the field varies slowly across the edge.
    let dens = blur(&density.values().mapv(|v| v.to_f64_lossy()), params.smoothing);
    let mut di = Array2::<f64>::zeros((h, w));
    let mut dj = Array2::<f64>::zeros((h, w));
    Zip::indexed(&mut di).and(&mut dj).for_each(|(i, j), a, b| {
        let g = (1.0 + 0.3 * wobble[[i, j]]).max(0.0);
        *a = g * ni[[i, j]];
        *b = g * nj[[i, j]];
    });
    // The shape of the field is normalized to the scene level; density then
    // scales it relative to a typical scene, so denser scenes and regions
    // shift more.
    let raw_mean = edge_px.iter().map(|p| di[*p].hypot(dj[*p])).sum::<f64>() / edge_px.len() as f64;
    let scale = if raw_mean > 0.0 { level / raw_mean } else { 0.0 };
    let cap = params.cap * params.noise_level;
    Zip::indexed(&mut di).and(&mut dj).for_each(|(i, j), a, b| {
        let m = (params.base + dens[[i, j]]) / (params.base + REFERENCE_DENSITY);
        let len = (*a).hypot(*b) * scale * m;
        let f = if len > cap { cap / len } else { 1.0 } * scale * m;
        *a *= f;
        *b *= f;
    });
    let field = DisplacementField::new(di.mapv(T::of), dj.mapv(T::of))?;
    let noisy = warp_labels(clean, &field)?;
    Ok((noisy, field))
}

/// Renders a scene and corrupts its labels.
pub fn generate_scene<T: Real>(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene<T>> {
    let rendered = render_scene::<T>(seed, spec.size, spec.classes, spec.complexity)?;
    let density = local_edge_density::<T>(rendered.clean_labels.union().view(), spec.corruption.window)?;
    let (noisy_labels, true_field) = corrupt_labels(&rendered.clean_labels, &density, &spec.corruption, seed)?;
    Ok(SyntheticScene {
        image: rendered.image,
        clean_labels: rendered.clean_labels,
        true_field,
        noisy_labels,
    })
}

/// Magnitudes of `field` at the edge pixels of `labels`.
pub fn edge_shift_magnitudes<T: Real>(field: &DisplacementField<T>, labels: &BinaryLabelMap) -> Vec<f64> {
    let mag = field.magnitude();
    labels
        .union()
        .indexed_iter()
        .filter(|(_, v)| **v == 1)
        .map(|(p, _)| mag[p].to_f64_lossy())
        .collect()
}
