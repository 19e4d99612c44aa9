//! Minimal convolutional building blocks: same-padded dilated 2-D
//! convolution with im2col + GEMM, and SGD with momentum.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Convolution layer; weights are stored as `(out, in * k * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ConvGrad<T> {
    pub fn zeros_like(layer: &Conv2d<T>) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, s: T) {
        self.weight.mapv_inplace(|v| v * s);
        self.bias.mapv_inplace(|v| v * s);
    }

    pub fn sq_norm(&self) -> T {
        self.weight.iter().chain(self.bias.iter()).map(|v| *v * *v).sum()
    }
}

/// Layer shape as recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            weight: Array2::zeros((spec.out_channels, spec.in_channels * spec.kernel * spec.kernel)),
            bias: Array1::zeros(spec.out_channels),
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            dilation: spec.dilation,
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        let mut layer = Self::zeros(spec);
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        layer.weight.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        layer
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            dilation: self.dilation,
        }
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel / 2)
    }

    fn im2col(&self, input: ArrayView3<'_, T>) -> Array2<T> {
        let (c, h, w) = input.dim();
        let k = self.kernel;
        let pad = self.pad() as isize;
        let mut cols = Array2::zeros((c * k * k, h * w));
        let src = input.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ch * k + ki) * k + kj;
                    let oi = (ki * self.dilation) as isize - pad;
                    let oj = (kj * self.dilation) as isize - pad;
                    let (j_lo, j_hi) = ((-oj).max(0) as usize, (w as isize - oj).min(w as isize).max(0) as usize);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..h {
                        let si = i as isize + oi;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let s0 = ch * h * w + si as usize * w;
                        let d0 = r * h * w + i * w;
                        let sj0 = (j_lo as isize + oj) as usize;
                        dst[d0 + j_lo..d0 + j_hi].copy_from_slice(&src[s0 + sj0..s0 + sj0 + (j_hi - j_lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let mut out = Array3::zeros((c, h, w));
        let dst = out.as_slice_mut().expect("fresh array");
        let src = cols.as_slice().expect("standard layout");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ch * k + ki) * k + kj;
                    let oi = (ki * self.dilation) as isize - pad;
                    let oj = (kj * self.dilation) as isize - pad;
                    let (j_lo, j_hi) = ((-oj).max(0) as usize, (w as isize - oj).min(w as isize).max(0) as usize);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..h {
                        let si = i as isize + oi;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let d0 = ch * h * w + si as usize * w + (j_lo as isize + oj) as usize;
                        let s0 = r * h * w + i * w + j_lo;
                        for (d, s) in dst[d0..d0 + (j_hi - j_lo)].iter_mut().zip(&src[s0..s0 + (j_hi - j_lo)]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: ArrayView3<'_, T>) -> Result<Array3<T>> {
        let (c, h, w) = input.dim();
        if c != self.in_channels {
            return Err(Error::shape("conv input channels", &[self.in_channels], &[c]));
        }
        let cols = self.im2col(input);
        let mut out = Array2::zeros((self.out_channels, h * w));
        for (mut row, b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.fill(*b);
        }
        general_mat_mul(T::one(), &self.weight, &cols, T::one(), &mut out);
        Ok(out.into_shape_with_order((self.out_channels, h, w)).expect("contiguous"))
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        input: ArrayView3<'_, T>,
        grad_out: &Array3<T>,
        grad: &mut ConvGrad<T>,
        need_input_grad: bool,
    ) -> Option<Array3<T>> {
        let (c, h, w) = input.dim();
        let cols = self.im2col(input);
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("contiguous");
        general_mat_mul(T::one(), &g, &cols.t(), T::one(), &mut grad.weight);
        grad.bias += &g.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let mut g_cols = Array2::zeros(cols.raw_dim());
        general_mat_mul(T::one(), &self.weight.t(), &g, T::zero(), &mut g_cols);
        Some(self.col2im(&g_cols, c, h, w))
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn relu_inplace<T: Real>(a: &mut Array3<T>) {
    a.mapv_inplace(|v| v.max(T::zero()));
}

/// Masks `grad` where the activation output was not positive.
pub fn relu_backward<T: Real>(grad: &mut Array3<T>, activated: &Array3<T>) {
    Zip::from(grad).and(activated).for_each(|g, a| {
        if *a <= T::zero() {
            *g = T::zero();
        }
    });
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// SGD with classical momentum over a list of layers.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<ConvGrad<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(layers: &[Conv2d<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::of(momentum),
            weight_decay: T::of(weight_decay),
            velocity: layers.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, layers: &mut [Conv2d<T>], grads: &[ConvGrad<T>], lr: T) {
        for ((layer, g), v) in layers.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let (mu, wd) = (self.momentum, self.weight_decay);
            Zip::from(&mut v.weight)
                .and(&mut layer.weight)
                .and(&g.weight)
                .for_each(|v, w, g| {
                    *v = mu * *v + *g + wd * *w;
                    *w -= lr * *v;
                });
            Zip::from(&mut v.bias)
                .and(&mut layer.bias)
                .and(&g.bias)
                .for_each(|v, b, g| {
                    *v = mu * *v + *g;
                    *b -= lr * *v;
                });
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn layers_to_container<T: Real>(kind: &str, layers: &[Conv2d<T>], extra: &[(&str, serde_json::Value)]) -> Container {
    let specs: Vec<ConvSpec> = layers.iter().map(Conv2d::spec).collect();
    let mut c = Container::new()
        .with_meta("kind", kind)
        .with_meta("checkpoint_version", CHECKPOINT_VERSION)
        .with_meta("layers", serde_json::to_value(specs).expect("specs serialize"));
    for (key, value) in extra {
        c.meta.insert((*key).to_string(), value.clone());
    }
    for (n, layer) in layers.iter().enumerate() {
        c.insert_real(&format!("layer{n}.weight"), layer.weight.clone().into_dyn());
        c.insert_real(&format!("layer{n}.bias"), layer.bias.clone().into_dyn());
    }
    c
}

pub(crate) fn layers_from_container<T: Real>(c: &Container, kind: &str, path: &std::path::Path) -> Result<Vec<Conv2d<T>>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if c.meta_str("kind") != Some(kind) {
        return Err(bad(format!("expected a {kind} checkpoint, found {:?}", c.meta_str("kind"))));
    }
    let version = c.meta.get("checkpoint_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(bad(format!("unsupported checkpoint version {version:?}")));
    }
    let specs: Vec<ConvSpec> = serde_json::from_value(c.meta.get("layers").cloned().unwrap_or_default())
        .map_err(|e| bad(format!("bad layer list: {e}")))?;
    specs
        .into_iter()
        .enumerate()
        .map(|(n, spec)| {
            let mut layer = Conv2d::zeros(spec);
            let wt = c.get_real::<T>(&format!("layer{n}.weight"))?;
            let b = c.get_real::<T>(&format!("layer{n}.bias"))?;
            if wt.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(bad(format!("layer {n} shape disagrees with its spec")));
            }
            layer.weight = wt.into_dimensionality().expect("checked");
            layer.bias = b.into_dimensionality().expect("checked");
            Ok(layer)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(layer: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = layer.kernel as isize;
        let d = layer.dilation as isize;
        let pad = d * (k / 2);
        Array3::from_shape_fn((layer.out_channels, h, w), |(o, i, j)| {
            let mut acc = layer.bias[o];
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let si = i as isize + ki * d - pad;
                        let sj = j as isize + kj * d - pad;
                        if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                            let col = (ch * layer.kernel + ki as usize) * layer.kernel + kj as usize;
                            acc += layer.weight[[o, col]] * x[[ch, si as usize, sj as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup(dilation: usize) -> (Conv2d<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            dilation,
        };
        let mut layer = Conv2d::he(spec, &mut rng);
        layer.bias = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let x = Array3::from_shape_fn((2, 5, 6), |_| rng.gen_range(-1.0..1.0));
        (layer, x)
    }

    #[test]
    fn forward_matches_naive() {
        for d in [1, 2] {
            let (layer, x) = setup(d);
            let y = layer.forward(x.view()).unwrap();
            let z = naive(&layer, &x);
            assert!((&y - &z).iter().all(|v| v.abs() < 1e-12), "dilation {d}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (layer, x) = setup(2);
        let up = Array3::from_shape_fn((3, 5, 6), |(o, i, j)| ((o + 2 * i + 3 * j) % 7) as f64 / 7.0 - 0.4);
        let loss = |l: &Conv2d<f64>, x: &Array3<f64>| (naive(l, x) * &up).sum();
        let mut g = ConvGrad::zeros_like(&layer);
        let gx = layer.backward(x.view(), &up, &mut g, true).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6);
        }
        for idx in [(0, 0), (2, 17), (1, 9)] {
            let mut lp = layer.clone();
            lp.weight[idx] += h;
            let mut lm = layer.clone();
            lm.weight[idx] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - g.weight[idx]).abs() < 1e-6);
        }
        assert!((g.bias[1] - up.index_axis(Axis(0), 1).sum()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (layer, _) = setup(1);
        let c = layers_to_container("test", &[layer.clone()], &[]);
        let back: Vec<Conv2d<f64>> = layers_from_container(&c, "test", std::path::Path::new("mem")).unwrap();
        assert_eq!(back, vec![layer]);
        assert!(layers_from_container::<f64>(&c, "other", std::path::Path::new("mem")).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
