//! Local edge density, the classical proxy edge extractor, and the density
//! regularizer that ties shift magnitude to local edge complexity.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ensure_same_shape;
use crate::scalar::Real;

pub const DEFAULT_WINDOW: usize = 11;
pub const DEFAULT_LOW_THRESH: f64 = 0.1;
pub const DEFAULT_HIGH_THRESH: f64 = 0.2;

/// Fraction of edge pixels inside an `N x N` window around each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap<T> {
    values: Array2<T>,
    window: usize,
}

impl<T: Real> DensityMap<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Writes the map as an 8-bit grayscale PNG (1.0 maps to 255).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.values.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = self.values[[y as usize, x as usize]].to_f64_lossy();
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)?;
        Ok(())
    }
}

fn check_window(n: usize) -> Result<()> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("density window must be odd and >= 3, got {n}")));
    }
    Ok(())
}

/// Box count of edge pixels divided by `N^2`; windows cut by the border
/// still divide by the full `N^2`.
pub fn local_edge_density<T: Real>(edges: ArrayView2<'_, u8>, n: usize) -> Result<DensityMap<T>> {
    check_window(n)?;
    let (h, w) = edges.dim();
    // Summed-area table with a zero row/column in front.
    let mut sat = Array2::<u32>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0u32;
        for j in 0..w {
            row += u32::from(edges[[i, j]] != 0);
            sat[[i + 1, j + 1]] = sat[[i, j + 1]] + row;
        }
    }
    let r = n / 2;
    let norm = T::of((n * n) as f64);
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
        let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
        let count = sat[[i1, j1]] + sat[[i0, j0]] - sat[[i0, j1]] - sat[[i1, j0]];
        T::of(count as f64) / norm
    });
    Ok(DensityMap { values, window: n })
}

/// Thresholds and smoothing for [`proxy_edges`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: DEFAULT_LOW_THRESH,
            high: DEFAULT_HIGH_THRESH,
            sigma: 1.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with clamped borders.
pub(crate) fn blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = plane.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * plane[[i, clamp(j as i64 + t as i64 - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * tmp[[clamp(i as i64 + t as i64 - r, h), j]])
            .sum::<f64>()
    })
}

/// Sobel gradients `(gi, gj)` with clamped borders.
fn sobel(plane: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = plane.dim();
    let at = |i: i64, j: i64| plane[[i.clamp(0, h as i64 - 1) as usize, j.clamp(0, w as i64 - 1) as usize]];
    let gj = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as i64, j as i64);
        (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
            - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1))
    });
    let gi = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as i64, j as i64);
        (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
            - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1))
    });
    (gi, gj)
}

/// Canny edges of a `(3, H, W)` image in `[0, 1]`.
///
/// Per pixel the color channel with the strongest gradient is used; the
/// magnitude is normalized so a unit step scores 1.
pub fn proxy_edges<T: Real>(image: &Array3<T>, params: CannyParams) -> Result<Array2<u8>> {
    if params.low > params.high || params.low < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "hysteresis thresholds must satisfy 0 <= low <= high, got {} / {}",
            params.low, params.high
        )));
    }
    let (_, h, w) = image.dim();
    let mut mag = Array2::<f64>::zeros((h, w));
    let mut gi = Array2::<f64>::zeros((h, w));
    let mut gj = Array2::<f64>::zeros((h, w));
    for ch in image.outer_iter() {
        let plane = blur(&ch.mapv(|v| v.to_f64_lossy()), params.sigma);
        let (ci, cj) = sobel(&plane);
        Zip::from(&mut mag)
            .and(&mut gi)
            .and(&mut gj)
            .and(&ci)
            .and(&cj)
            .for_each(|m, gi, gj, ci, cj| {
                let cm = ci.hypot(*cj) / 4.0;
                if cm > *m {
                    *m = cm;
                    *gi = *ci;
                    *gj = *cj;
                }
            });
    }

    // Non-maximum suppression along the quantized gradient direction. Ties
    // keep the pixel on the positive side so a step yields one line.
    let eps = 1e-9;
    let mut thin = Array2::<f64>::zeros((h, w));
    let get = |i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
            0.0
        } else {
            mag[[i as usize, j as usize]]
        }
    };
    for i in 0..h {
        for j in 0..w {
            let m = mag[[i, j]];
            if m <= eps {
                continue;
            }
            let angle = gi[[i, j]].atan2(gj[[i, j]]).to_degrees().rem_euclid(180.0);
            let (di, dj) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (ii, jj) = (i as i64, j as i64);
            let prev = get(ii - di, jj - dj);
            let next = get(ii + di, jj + dj);
            if m >= prev - eps && m > next + eps {
                thin[[i, j]] = m;
            }
        }
    }

    // Hysteresis: grow strong seeds through 8-connected weak pixels.
    let mut out = Array2::<u8>::zeros((h, w));
    let mut stack: Vec<(usize, usize)> = thin
        .indexed_iter()
        .filter(|(_, m)| **m >= params.high && **m > eps)
        .map(|(p, _)| p)
        .collect();
    for &p in &stack {
        out[p] = 1;
    }
    while let Some((i, j)) = stack.pop() {
        for a in i.saturating_sub(1)..=(i + 1).min(h - 1) {
            for b in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                if out[[a, b]] == 0 && thin[[a, b]] >= params.low && thin[[a, b]] > eps {
                    out[[a, b]] = 1;
                    stack.push((a, b));
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared difference between normalized shift magnitudes and density.
pub fn density_loss<T: Real>(d: &Array2<T>, c: &Array2<T>) -> Result<T> {
    ensure_same_shape("density loss", d.shape(), c.shape())?;
    let n = T::of(d.len().max(1) as f64);
    Ok(Zip::from(d).and(c).fold(T::zero(), |acc, a, b| acc + (*a - *b) * (*a - *b)) / n)
}

/// Value and gradient with respect to `d`.
pub fn density_loss_grad<T: Real>(d: &Array2<T>, c: &Array2<T>) -> Result<(T, Array2<T>)> {
    let value = density_loss(d, c)?;
    let scale = T::of(2.0) / T::of(d.len().max(1) as f64);
    let grad = Zip::from(d).and(c).map_collect(|a, b| scale * (*a - *b));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn density_basics() {
        let zero = Array2::<u8>::zeros((5, 5));
        assert!(local_edge_density::<f64>(zero.view(), 3).unwrap().values().iter().all(|v| *v == 0.0));
        let ones = Array2::<u8>::ones((5, 5));
        assert_eq!(local_edge_density::<f64>(ones.view(), 3).unwrap().values()[[2, 2]], 1.0);
        assert!(local_edge_density::<f64>(ones.view(), 4).is_err());
    }

    #[test]
    fn single_pixel_density() {
        let mut e = Array2::<u8>::zeros((5, 5));
        e[[2, 2]] = 1;
        let d = local_edge_density::<f64>(e.view(), 3).unwrap();
        for ((i, j), v) in d.values().indexed_iter() {
            let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
            assert_eq!(*v, if inside { 1.0 / 9.0 } else { 0.0 }, "at {i},{j}");
        }
    }

    fn step_image(h: usize, w: usize, steps: &[usize]) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(_, _, j)| {
            (steps.iter().filter(|s| j >= **s).count() % 2) as f64
        })
    }

    #[test]
    fn canny_constant_image_is_empty() {
        let img = Array3::from_elem((3, 16, 16), 0.4);
        assert!(proxy_edges(&img, CannyParams::default()).unwrap().iter().all(|v| *v == 0));
    }

    #[test]
    fn canny_single_step_gives_one_column() {
        let e = proxy_edges(&step_image(16, 20, &[10]), CannyParams::default()).unwrap();
        for (j, col) in e.columns().into_iter().enumerate() {
            let on = col.iter().filter(|v| **v == 1).count();
            assert_eq!(on, if j == 10 { 16 } else { 0 }, "column {j}");
        }
    }

    #[test]
    fn canny_two_steps_give_two_columns() {
        let e = proxy_edges(&step_image(16, 30, &[8, 20]), CannyParams::default()).unwrap();
        let cols: Vec<usize> = (0..30).filter(|&j| e.column(j).iter().any(|v| *v == 1)).collect();
        assert_eq!(cols, vec![8, 20]);
    }

    #[test]
    fn density_loss_cases() {
        let d = ndarray::array![[0.5], [0.0]];
        let c = ndarray::array![[0.0], [0.0]];
        assert_eq!(density_loss(&d, &c).unwrap(), 0.125);
        assert_eq!(density_loss(&d, &d).unwrap(), 0.0);
        let ones = Array2::from_elem((3, 3), 1.0);
        assert_eq!(density_loss(&ones, &Array2::zeros((3, 3))).unwrap(), 1.0);
        assert!(density_loss(&ones, &Array2::zeros((2, 3))).is_err());
    }
}
