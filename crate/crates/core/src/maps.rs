//! Per-pixel map types: edge probabilities and binary edge labels.
//!
//! Both are stored channel-first, `(C, H, W)`, so a class channel is a
//! contiguous `H x W` plane.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Edge probabilities in `[0, 1]`, one channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbMap<T> {
    values: Array3<T>,
}

impl<T: Real> EdgeProbMap<T> {
    pub fn new(values: Array3<T>) -> Result<Self> {
        if values.shape()[0] == 0 {
            return Err(Error::InvalidArgument("edge map needs at least one channel".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    /// Wraps values already known to lie in `[0, 1]`.
    pub(crate) fn from_trusted(values: Array3<T>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= T::zero() && *v <= T::one()));
        Self { values }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self::from_trusted(Array3::from_elem((channels, height, width), value))
    }

    pub fn values(&self) -> &Array3<T> {
        &self.values
    }

    pub fn into_values(self) -> Array3<T> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, k: usize) -> ArrayView2<'_, T> {
        self.values.index_axis(Axis(0), k)
    }

    /// Thresholds every channel: `p > t`.
    pub fn binarize(&self, t: T) -> BinaryLabelMap {
        BinaryLabelMap {
            values: self.values.mapv(|v| u8::from(v > t)),
        }
    }

    pub fn cast<U: Real>(&self) -> EdgeProbMap<U> {
        EdgeProbMap::from_trusted(self.values.mapv(|v| U::of(v.to_f64_lossy())))
    }
}

/// Binary edge labels, one channel per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryLabelMap {
    values: Array3<u8>,
}

impl BinaryLabelMap {
    pub fn new(values: Array3<u8>) -> Result<Self> {
        if values.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument("label entries must be 0 or 1".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            values: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_channels(channels: &[Array2<u8>]) -> Result<Self> {
        let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(format!("cannot stack label channels: {e}")))?;
        Self::new(stacked)
    }

    pub fn values(&self) -> &Array3<u8> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, k: usize) -> ArrayView2<'_, u8> {
        self.values.index_axis(Axis(0), k)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// Union over channels.
    pub fn union(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.height(), self.width()));
        for ch in self.values.outer_iter() {
            out.zip_mut_with(&ch, |o, v| *o |= *v);
        }
        out
    }

    pub fn to_real<T: Real>(&self) -> Array3<T> {
        self.values.mapv(|v| if v == 1 { T::one() } else { T::zero() })
    }

    /// Probability map that is 1 on edges and 0 elsewhere.
    pub fn to_prob<T: Real>(&self) -> EdgeProbMap<T> {
        EdgeProbMap::from_trusted(self.to_real())
    }
}

pub(crate) fn ensure_same_shape(
    context: &'static str,
    expected: &[usize],
    actual: &[usize],
) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(context, expected, actual));
    }
    Ok(())
}
