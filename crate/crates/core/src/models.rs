//! The toy edge detector, the shift localizer, and confident-pixel
//! extraction.

use std::path::Path;

use ndarray::{concatenate, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::maps::{BinaryLabelMap, EdgeProbMap};
use crate::matching::ConfidentSet;
use crate::nn::{layers_from_container, layers_to_container, relu_backward, relu_inplace, sigmoid, Conv2d, ConvGrad, ConvSpec};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Hidden widths of the three inner stages.
    pub widths: [usize; 3],
    /// Dilation of each of the four convolutions.
    pub dilations: [usize; 4],
    pub classes: usize,
    /// Initial edge probability encoded in the output bias.
    pub prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32],
            dilations: [1, 2, 2, 1],
            classes: 3,
            prior: 0.05,
        }
    }
}

/// Four-stage fully convolutional edge detector with a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDetectorParams<T> {
    pub layers: Vec<Conv2d<T>>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct DetectorCache<T> {
    acts: Vec<Array3<T>>,
    pub prob: Array3<T>,
}

fn image_input<T: Real>(image: &Array3<T>) -> Result<Array3<T>> {
    if image.shape()[0] != 3 {
        return Err(Error::shape("image channels", &[3], &image.shape()[..1]));
    }
    Ok(image.mapv(|v| v - T::of(0.5)))
}

impl<T: Real> EdgeDetectorParams<T> {
    pub fn new(config: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [3, config.widths[0], config.widths[1], config.widths[2], config.classes];
        let mut layers: Vec<Conv2d<T>> = (0..4)
            .map(|n| {
                Conv2d::he(
                    ConvSpec {
                        in_channels: chans[n],
                        out_channels: chans[n + 1],
                        kernel: 3,
                        dilation: config.dilations[n],
                    },
                    &mut rng,
                )
            })
            .collect();
        let head = layers.last_mut().expect("four layers");
        head.weight.mapv_inplace(|v| v * T::of(0.1));
        let logit = (config.prior / (1.0 - config.prior)).ln();
        head.bias.fill(T::of(logit));
        Self { layers }
    }

    /// Zeroes the output layer so every prediction is exactly 0.5.
    pub fn with_zero_head(mut self) -> Self {
        let head = self.layers.last_mut().expect("four layers");
        head.weight.fill(T::zero());
        head.bias.fill(T::zero());
        self
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn forward(&self, image: &Array3<T>) -> Result<DetectorCache<T>> {
        let mut acts = vec![image_input(image)?];
        let last = self.layers.len() - 1;
        for (n, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts[n].view())?;
            if n < last {
                relu_inplace(&mut z);
            }
            acts.push(z);
        }
        let logits = acts.pop().expect("output");
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("detector logits"));
        }
        let prob = logits.mapv(sigmoid);
        Ok(DetectorCache { acts, prob })
    }

    /// Edge probabilities for a `(3, H, W)` image.
    pub fn detect(&self, image: &Array3<T>) -> Result<EdgeProbMap<T>> {
        Ok(EdgeProbMap::from_trusted(self.forward(image)?.prob))
    }

    /// Backpropagates a gradient with respect to the output logits.
    pub fn backward_logits(&self, cache: &DetectorCache<T>, grad_logits: Array3<T>) -> Vec<ConvGrad<T>> {
        let mut grads: Vec<_> = self.layers.iter().map(ConvGrad::zeros_like).collect();
        let mut g = grad_logits;
        for n in (0..self.layers.len()).rev() {
            let gin = self.layers[n].backward(cache.acts[n].view(), &g, &mut grads[n], n > 0);
            if let Some(mut gin) = gin {
                relu_backward(&mut gin, &cache.acts[n]);
                g = gin;
            }
        }
        grads
    }

    /// Backpropagates a gradient with respect to the output probabilities.
    pub fn backward_prob(&self, cache: &DetectorCache<T>, grad_prob: &Array3<T>) -> Vec<ConvGrad<T>> {
        let mut g = grad_prob.clone();
        ndarray::Zip::from(&mut g)
            .and(&cache.prob)
            .for_each(|g, p| *g = *g * *p * (T::one() - *p));
        self.backward_logits(cache, g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        layers_to_container("edge_detector", &self.layers, &[]).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = crate::container::Container::load(path)?;
        Ok(Self {
            layers: layers_from_container(&c, "edge_detector", path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub width: usize,
    pub dilations: [usize; 4],
    pub classes: usize,
    /// Optional soft bound on each field component: `cap * tanh(z / cap)`.
    pub cap: Option<f64>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            width: 32,
            dilations: [1, 2, 4, 1],
            classes: 3,
            cap: None,
        }
    }
}

/// Four-layer FCN with additive shortcuts around the two middle layers that
/// predicts a displacement field from the image, the confident map and the
/// noisy labels. The output layer starts at zero (identity transform).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerParams<T> {
    pub layers: Vec<Conv2d<T>>,
    pub cap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalizerCache<T> {
    input: Array3<T>,
    pre: Vec<Array3<T>>,
    acts: Vec<Array3<T>>,
    raw: Array3<T>,
}

impl<T: Real> LocalizerParams<T> {
    pub fn new(config: &LocalizerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let chans = [3 + 2 * config.classes, w, w, w, 2];
        let layers = (0..4)
            .map(|n| {
                let spec = ConvSpec {
                    in_channels: chans[n],
                    out_channels: chans[n + 1],
                    kernel: 3,
                    dilation: config.dilations[n],
                };
                if n == 3 {
                    Conv2d::zeros(spec)
                } else {
                    Conv2d::he(spec, &mut rng)
                }
            })
            .collect();
        Self { layers, cap: config.cap }
    }

    pub fn classes(&self) -> usize {
        (self.layers[0].in_channels - 3) / 2
    }

    fn assemble(&self, image: &Array3<T>, confident: &BinaryLabelMap, noisy: &BinaryLabelMap) -> Result<Array3<T>> {
        let img = image_input(image)?;
        let hw = &img.shape()[1..];
        for (name, m) in [("confident map", confident), ("noisy labels", noisy)] {
            let s = m.values().shape();
            if &s[1..] != hw || s[0] != self.classes() {
                let _ = name;
                return Err(Error::shape("localizer inputs", &[self.classes(), hw[0], hw[1]], s));
            }
        }
        let conf = confident.to_real::<T>();
        let noisy = noisy.to_real::<T>();
        Ok(concatenate(Axis(0), &[img.view(), conf.view(), noisy.view()]).expect("shapes checked"))
    }

    pub fn forward(&self, image: &Array3<T>, confident: &BinaryLabelMap, noisy: &BinaryLabelMap) -> Result<(DisplacementField<T>, LocalizerCache<T>)> {
        let input = self.assemble(image, confident, noisy)?;
        let mut pre = Vec::with_capacity(3);
        let mut acts: Vec<Array3<T>> = Vec::with_capacity(3);
        for n in 0..3 {
            let x = if n == 0 { input.view() } else { acts[n - 1].view() };
            let z = self.layers[n].forward(x)?;
            let mut a = z.clone();
            relu_inplace(&mut a);
            if n > 0 {
                a += &acts[n - 1];
            }
            pre.push(z);
            acts.push(a);
        }
        let raw = self.layers[3].forward(acts[2].view())?;
        let squash = |v: T| match self.cap {
            Some(c) => T::of(c) * (v / T::of(c)).tanh(),
            None => v,
        };
        let di = raw.index_axis(Axis(0), 0).mapv(squash);
        let dj = raw.index_axis(Axis(0), 1).mapv(squash);
        let field = DisplacementField::new(di, dj)?;
        Ok((field, LocalizerCache { input, pre, acts, raw }))
    }

    /// Predicts the displacement field.
    pub fn localize(&self, image: &Array3<T>, confident: &BinaryLabelMap, noisy: &BinaryLabelMap) -> Result<DisplacementField<T>> {
        Ok(self.forward(image, confident, noisy)?.0)
    }

    pub fn backward(&self, cache: &LocalizerCache<T>, g_di: &ndarray::Array2<T>, g_dj: &ndarray::Array2<T>) -> Vec<ConvGrad<T>> {
        let mut grads: Vec<_> = self.layers.iter().map(ConvGrad::zeros_like).collect();
        let mut g_out = ndarray::stack(Axis(0), &[g_di.view(), g_dj.view()]).expect("same shape");
        if let Some(c) = self.cap {
            let c = T::of(c);
            ndarray::Zip::from(&mut g_out).and(&cache.raw).for_each(|g, z| {
                let t = (*z / c).tanh();
                *g = *g * (T::one() - t * t);
            });
        }
        let mut g = self.layers[3]
            .backward(cache.acts[2].view(), &g_out, &mut grads[3], true)
            .expect("input grad requested");
        for n in (0..3).rev() {
            let shortcut = g.clone();
            let mut gz = g;
            relu_backward(&mut gz, &cache.pre[n].mapv(|v| v.max(T::zero())));
            let x = if n == 0 { cache.input.view() } else { cache.acts[n - 1].view() };
            let gin = self.layers[n].backward(x, &gz, &mut grads[n], n > 0);
            g = match gin {
                Some(mut gx) if n > 0 => {
                    gx += &shortcut;
                    gx
                }
                _ => break,
            };
        }
        grads
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cap = serde_json::to_value(self.cap).expect("option serializes");
        layers_to_container("shift_localizer", &self.layers, &[("cap", cap)]).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = crate::container::Container::load(path)?;
        let layers = layers_from_container(&c, "shift_localizer", path)?;
        let cap = c.meta.get("cap").and_then(|v| v.as_f64());
        Ok(Self { layers, cap })
    }
}

/// Pixels whose predicted probability exceeds `tau`.
pub fn extract_confident<T: Real>(pred: &EdgeProbMap<T>, tau: f64) -> Result<ConfidentSet> {
    ConfidentSet::from_prediction(pred, tau)
}
