//! Displacement fields and the differentiable bilinear sampler.
//!
//! Convention: a field is indexed on the output grid and says where each
//! output pixel reads from, `out(i, j) = in(i + di(i, j), j + dj(i, j))`.
//! Reads outside the image clamp to the border.

use std::path::Path;

use ndarray::{Array2, Array3, Axis, Zip};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::maps::{ensure_same_shape, EdgeProbMap};
use crate::scalar::Real;

/// Metadata tag identifying the sampling convention of stored fields.
pub const FIELD_CONVENTION: &str = "output-grid-lookup";

/// Bilinear weight below which a source pixel is not considered read.
pub const FOOTPRINT_EPS: f64 = 1e-6;

/// Per-pixel shifts `(di, dj)` in pixels; `di` is vertical, `dj` horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    delta_i: Array2<T>,
    delta_j: Array2<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(delta_i: Array2<T>, delta_j: Array2<T>) -> Result<Self> {
        ensure_same_shape("displacement field", delta_i.shape(), delta_j.shape())?;
        if delta_i.iter().chain(delta_j.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field"));
        }
        Ok(Self { delta_i, delta_j })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, T::zero(), T::zero())
    }

    pub fn constant(height: usize, width: usize, di: T, dj: T) -> Self {
        Self {
            delta_i: Array2::from_elem((height, width), di),
            delta_j: Array2::from_elem((height, width), dj),
        }
    }

    pub fn height(&self) -> usize {
        self.delta_i.nrows()
    }

    pub fn width(&self) -> usize {
        self.delta_i.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.delta_i.dim()
    }

    pub fn delta_i(&self) -> &Array2<T> {
        &self.delta_i
    }

    pub fn delta_j(&self) -> &Array2<T> {
        &self.delta_j
    }

    pub fn into_parts(self) -> (Array2<T>, Array2<T>) {
        (self.delta_i, self.delta_j)
    }

    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        (self.delta_i[[i, j]], self.delta_j[[i, j]])
    }

    /// Euclidean shift length per pixel.
    pub fn magnitude(&self) -> Array2<T> {
        Zip::from(&self.delta_i)
            .and(&self.delta_j)
            .map_collect(|a, b| a.hypot(*b))
    }

    pub fn is_zero(&self) -> bool {
        self.delta_i.iter().chain(self.delta_j.iter()).all(|v| v.is_zero())
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            delta_i: self.delta_i.mapv(|v| U::of(v.to_f64_lossy())),
            delta_j: self.delta_j.mapv(|v| U::of(v.to_f64_lossy())),
        }
    }

    /// Mirror left-right; the horizontal component changes sign.
    pub fn flip_horizontal(&self) -> Self {
        let mut di = self.delta_i.clone();
        let mut dj = self.delta_j.mapv(|v| -v);
        di.invert_axis(Axis(1));
        dj.invert_axis(Axis(1));
        Self {
            delta_i: di,
            delta_j: dj,
        }
    }

    pub fn to_container(&self) -> Container {
        let (h, w) = self.shape();
        let mut c = Container::new()
            .with_meta("kind", "displacement_field")
            .with_meta("height", h)
            .with_meta("width", w)
            .with_meta("convention", FIELD_CONVENTION);
        c.insert_real("delta_i", self.delta_i.clone().into_dyn());
        c.insert_real("delta_j", self.delta_j.clone().into_dyn());
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        match c.meta_str("convention") {
            Some(FIELD_CONVENTION) => {}
            other => return Err(bad(format!("unexpected field convention {other:?}"))),
        }
        let as2 = |key: &str| -> Result<Array2<T>> {
            c.get_real::<T>(key)?
                .into_dimensionality()
                .map_err(|e| bad(format!("`{key}` is not 2-D: {e}")))
        };
        let field = Self::new(as2("delta_i")?, as2("delta_j")?)?;
        let h = c.meta.get("height").and_then(|v| v.as_u64());
        let w = c.meta.get("width").and_then(|v| v.as_u64());
        if h != Some(field.height() as u64) || w != Some(field.width() as u64) {
            return Err(bad("metadata shape disagrees with arrays".into()));
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Bilinear read position for one output pixel, after border clamping.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    wi: T,
    wj: T,
    /// The vertical read was inside the image (derivative defined).
    live_i: bool,
    live_j: bool,
}

#[inline]
fn axis_tap<T: Real>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::of((len - 1) as f64);
    let live = pos >= T::zero() && pos <= hi;
    let p = pos.max(T::zero()).min(hi);
    let lo = p.floor();
    let i0 = lo.to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - lo, live)
}

#[inline]
fn tap<T: Real>(i: usize, j: usize, field: &DisplacementField<T>, h: usize, w: usize) -> Tap<T> {
    let (di, dj) = field.at(i, j);
    let (i0, i1, wi, live_i) = axis_tap(T::of(i as f64) + di, h);
    let (j0, j1, wj, live_j) = axis_tap(T::of(j as f64) + dj, w);
    Tap {
        i0,
        i1,
        j0,
        j1,
        wi,
        wj,
        live_i,
        live_j,
    }
}

fn check_pair<T: Real>(input: &Array3<T>, field: &DisplacementField<T>) -> Result<()> {
    let (h, w) = field.shape();
    ensure_same_shape("sampler input vs field", &[h, w], &input.shape()[1..])?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    Ok(())
}

/// Warps every channel of `input` through `field` with bilinear lookups.
pub fn sample_array<T: Real>(input: &Array3<T>, field: &DisplacementField<T>) -> Result<Array3<T>> {
    check_pair(input, field)?;
    let (h, w) = field.shape();
    let mut out = Array3::zeros(input.raw_dim());
    for i in 0..h {
        for j in 0..w {
            let t = tap(i, j, field, h, w);
            let (ui, uj) = (T::one() - t.wi, T::one() - t.wj);
            for k in 0..input.shape()[0] {
                let top = uj * input[[k, t.i0, t.j0]] + t.wj * input[[k, t.i0, t.j1]];
                let bot = uj * input[[k, t.i1, t.j0]] + t.wj * input[[k, t.i1, t.j1]];
                out[[k, i, j]] = ui * top + t.wi * bot;
            }
        }
    }
    Ok(out)
}

/// Transforms a clean-space prediction into noisy space.
pub fn sample_with_field<T: Real>(
    input: &EdgeProbMap<T>,
    field: &DisplacementField<T>,
) -> Result<EdgeProbMap<T>> {
    let mut out = sample_array(input.values(), field)?;
    // Convex combinations can overshoot by an ulp.
    out.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    Ok(EdgeProbMap::from_trusted(out))
}

/// Gradients of the sampler output with respect to its input and field.
#[derive(Debug, Clone)]
pub struct SamplerGrad<T> {
    pub input: Array3<T>,
    pub delta_i: Array2<T>,
    pub delta_j: Array2<T>,
}

/// Vector-Jacobian product of [`sample_array`].
pub fn sampler_vjp<T: Real>(
    input: &Array3<T>,
    field: &DisplacementField<T>,
    upstream: &Array3<T>,
) -> Result<SamplerGrad<T>> {
    check_pair(input, field)?;
    ensure_same_shape("sampler upstream gradient", input.shape(), upstream.shape())?;
    let (h, w) = field.shape();
    let mut g_in = Array3::zeros(input.raw_dim());
    let mut g_di = Array2::zeros((h, w));
    let mut g_dj = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let t = tap(i, j, field, h, w);
            let (ui, uj) = (T::one() - t.wi, T::one() - t.wj);
            let (mut acc_i, mut acc_j) = (T::zero(), T::zero());
            for k in 0..input.shape()[0] {
                let g = upstream[[k, i, j]];
                if g.is_zero() {
                    continue;
                }
                let (a, b) = (input[[k, t.i0, t.j0]], input[[k, t.i0, t.j1]]);
                let (c, d) = (input[[k, t.i1, t.j0]], input[[k, t.i1, t.j1]]);
                g_in[[k, t.i0, t.j0]] += g * ui * uj;
                g_in[[k, t.i0, t.j1]] += g * ui * t.wj;
                g_in[[k, t.i1, t.j0]] += g * t.wi * uj;
                g_in[[k, t.i1, t.j1]] += g * t.wi * t.wj;
                if t.live_i {
                    acc_i += g * ((uj * c + t.wj * d) - (uj * a + t.wj * b));
                }
                if t.live_j {
                    acc_j += g * ((ui * b + t.wi * d) - (ui * a + t.wi * c));
                }
            }
            g_di[[i, j]] = acc_i;
            g_dj[[i, j]] = acc_j;
        }
    }
    Ok(SamplerGrad {
        input: g_in,
        delta_i: g_di,
        delta_j: g_dj,
    })
}

/// Source pixels that no output pixel reads (outside the generalized
/// inverse image of the field).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnmatchedMask {
    mask: Array2<bool>,
}

impl UnmatchedMask {
    pub fn from_mask(mask: Array2<bool>) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.mask
            .indexed_iter()
            .filter(|(_, m)| **m)
            .map(|(p, _)| p)
            .collect()
    }
}

pub fn unmatched_mask<T: Real>(field: &DisplacementField<T>) -> UnmatchedMask {
    let (h, w) = field.shape();
    let eps = T::of(FOOTPRINT_EPS);
    let mut read = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let t = tap(i, j, field, h, w);
            let (ui, uj) = (T::one() - t.wi, T::one() - t.wj);
            for (p, q, wt) in [
                (t.i0, t.j0, ui * uj),
                (t.i0, t.j1, ui * t.wj),
                (t.i1, t.j0, t.wi * uj),
                (t.i1, t.j1, t.wi * t.wj),
            ] {
                if wt > eps {
                    read[[p, q]] = true;
                }
            }
        }
    }
    UnmatchedMask {
        mask: read.mapv(|r| !r),
    }
}

/// Shift magnitudes divided by the per-image maximum; all zeros for a zero
/// field.
pub fn normalized_magnitude<T: Real>(field: &DisplacementField<T>) -> Array2<T> {
    let mag = field.magnitude();
    let d_max = mag.iter().fold(T::zero(), |m, v| m.max(*v));
    if d_max <= T::zero() {
        return Array2::zeros(mag.raw_dim());
    }
    mag.mapv(|v| v / d_max)
}

/// Vector-Jacobian product of [`normalized_magnitude`], including the
/// dependence of the normalizer on the arg-max pixel.
pub fn normalized_magnitude_vjp<T: Real>(
    field: &DisplacementField<T>,
    upstream: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (h, w) = field.shape();
    ensure_same_shape("normalized magnitude upstream", &[h, w], upstream.shape())?;
    let mag = field.magnitude();
    let mut g_i = Array2::zeros((h, w));
    let mut g_j = Array2::zeros((h, w));
    let Some(((am_i, am_j), &d_max)) = mag
        .indexed_iter()
        .fold(None, |best: Option<((usize, usize), &T)>, (p, v)| match best {
            Some((_, b)) if *b >= *v => best,
            _ => Some((p, v)),
        })
    else {
        return Ok((g_i, g_j));
    };
    if d_max <= T::zero() {
        return Ok((g_i, g_j));
    }
    // d_q = m_q / m_max; dL/dm_q = g_q / m_max, plus the normalizer term at
    // the arg-max: -sum_q g_q m_q / m_max^2.
    let mut g_mag = upstream.mapv(|g| g / d_max);
    let norm_term: T = Zip::from(upstream)
        .and(&mag)
        .fold(T::zero(), |acc, g, m| acc + *g * *m);
    g_mag[[am_i, am_j]] -= norm_term / (d_max * d_max);
    Zip::from(&mut g_i)
        .and(&mut g_j)
        .and(&g_mag)
        .and(&mag)
        .and(&field.delta_i)
        .and(&field.delta_j)
        .for_each(|gi, gj, gm, m, di, dj| {
            if *m > T::zero() {
                *gi = *gm * *di / *m;
                *gj = *gm * *dj / *m;
            }
        });
    Ok((g_i, g_j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn row(values: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap()
    }

    fn field_j(dj: &[f64]) -> DisplacementField<f64> {
        let n = dj.len();
        DisplacementField::new(
            Array2::zeros((1, n)),
            Array2::from_shape_vec((1, n), dj.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let input = Array3::from_shape_fn((2, 3, 4), |(k, i, j)| ((k * 7 + i * 3 + j) % 5) as f64 / 5.0);
        let out = sample_array(&input, &DisplacementField::zeros(3, 4)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn integer_shift_reads_neighbor_and_clamps() {
        let out = sample_array(&row(&[0.0, 1.0, 0.0]), &field_j(&[1.0, 1.0, 1.0])).unwrap();
        // The last pixel reads column 3, clamped to column 2.
        assert_eq!(out.as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_pixel_shift_is_midpoint() {
        let out = sample_array(&row(&[0.0, 1.0]), &field_j(&[0.5, 0.0])).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.5);
    }

    #[test]
    fn rejects_mismatched_and_non_finite() {
        let err = sample_array(&row(&[0.0, 1.0]), &field_j(&[0.0, 0.0, 0.0])).unwrap_err();
        assert!(err.is_contract_violation());
        let err = DisplacementField::new(array![[f64::NAN]], array![[0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn constant_input_has_zero_field_gradient() {
        let input = Array3::from_elem((2, 4, 4), 0.3);
        let field = DisplacementField::new(
            Array2::from_shape_fn((4, 4), |(i, j)| 0.37 * i as f64 - 0.21 * j as f64),
            Array2::from_shape_fn((4, 4), |(i, j)| 0.13 * (i + j) as f64 - 0.4),
        )
        .unwrap();
        let up = Array3::from_elem((2, 4, 4), 1.0);
        let g = sampler_vjp(&input, &field, &up).unwrap();
        assert!(g.delta_i.iter().chain(g.delta_j.iter()).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_field_routes_gradient_identity() {
        let input = Array3::from_elem((1, 3, 3), 0.5);
        let up = Array3::from_elem((1, 3, 3), 1.0);
        let g = sampler_vjp(&input, &DisplacementField::zeros(3, 3), &up).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn unmatched_mask_cases() {
        assert!(unmatched_mask(&DisplacementField::<f64>::zeros(4, 5)).is_empty());
        let collapse = unmatched_mask(&field_j(&[1.0, 0.0, -1.0]));
        assert_eq!(collapse.pixels(), vec![(0, 0), (0, 2)]);
        assert!(unmatched_mask(&field_j(&[0.5, 0.5])).is_empty());
    }

    #[test]
    fn normalized_magnitude_cases() {
        let mut di = Array2::zeros((3, 3));
        let mut dj = Array2::zeros((3, 3));
        di[[1, 2]] = 3.0;
        dj[[1, 2]] = 4.0;
        let d = normalized_magnitude(&DisplacementField::new(di, dj).unwrap());
        assert_eq!(d[[1, 2]], 1.0);
        assert_eq!(d.sum(), 1.0);
        let ones = normalized_magnitude(&DisplacementField::constant(2, 2, 1.0, 1.0));
        assert!(ones.iter().all(|v| (*v - 1.0f64).abs() < 1e-15));
        assert!(normalized_magnitude(&DisplacementField::<f64>::zeros(2, 2)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn field_container_round_trip() {
        let f = DisplacementField::new(array![[0.5f32, -1.0]], array![[2.0f32, 0.0]]).unwrap();
        let back = DisplacementField::<f32>::from_container(&f.to_container(), Path::new("mem")).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn flip_negates_horizontal_shift() {
        let f = DisplacementField::new(array![[1.0f64, 2.0]], array![[3.0, 4.0]]).unwrap();
        let g = f.flip_horizontal();
        assert_eq!(g.delta_i(), &array![[2.0, 1.0]]);
        assert_eq!(g.delta_j(), &array![[-4.0, -3.0]]);
    }
}
