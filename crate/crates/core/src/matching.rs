//! Minimum-distance matching between edge pixel sets and the shift
//! supervision derived from it.

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryLabelMap, EdgeProbMap};
use crate::scalar::Real;

/// Default matching radius in pixels.
pub const DEFAULT_MAX_RADIUS: f64 = 10.0;

/// A source pixel and the offset to its nearest target pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelMatch {
    pub source: (usize, usize),
    pub shift: (i32, i32),
}

impl PixelMatch {
    pub fn target(&self) -> (usize, usize) {
        (
            (self.source.0 as i64 + self.shift.0 as i64) as usize,
            (self.source.1 as i64 + self.shift.1 as i64) as usize,
        )
    }

    pub fn distance(&self) -> f64 {
        (self.shift.0 as f64).hypot(self.shift.1 as f64)
    }
}

/// Offsets within `radius`, ordered by squared length and then row-major,
/// so the first hit is the nearest target with the smallest `(i, j)`.
fn search_offsets(radius: f64) -> Vec<(i32, i32)> {
    let r = radius.floor() as i32;
    let r2 = radius * radius;
    let mut offs: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|a| (-r..=r).map(move |b| (a, b)))
        .filter(|(a, b)| ((a * a + b * b) as f64) <= r2)
        .collect();
    offs.sort_by_key(|&(a, b)| (a * a + b * b, a, b));
    offs
}

/// Matches every source pixel to its nearest target edge pixel.
///
/// Sources without a target inside `max_radius` are dropped. Ties go to the
/// target that comes first in row-major order. An empty target returns an
/// empty result.
pub fn min_distance_match(
    sources: &[(usize, usize)],
    target: ArrayView2<'_, u8>,
    max_radius: f64,
) -> Result<Vec<PixelMatch>> {
    if !(max_radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "matching radius must be positive, got {max_radius}"
        )));
    }
    let (h, w) = target.dim();
    if let Some(p) = sources.iter().find(|(i, j)| *i >= h || *j >= w) {
        return Err(Error::InvalidArgument(format!("source pixel {p:?} outside {h}x{w} grid")));
    }
    if target.iter().all(|v| *v == 0) {
        return Ok(Vec::new());
    }
    let offsets = search_offsets(max_radius);
    let mut out = Vec::with_capacity(sources.len());
    for &(si, sj) in sources {
        let hit = offsets.iter().find(|&&(a, b)| {
            let (ti, tj) = (si as i64 + a as i64, sj as i64 + b as i64);
            ti >= 0 && tj >= 0 && (ti as usize) < h && (tj as usize) < w && target[[ti as usize, tj as usize]] == 1
        });
        if let Some(&shift) = hit {
            out.push(PixelMatch {
                source: (si, sj),
                shift,
            });
        }
    }
    Ok(out)
}

/// Edge pixels of a binary plane in row-major order.
pub fn edge_pixels(plane: ArrayView2<'_, u8>) -> Vec<(usize, usize)> {
    plane
        .indexed_iter()
        .filter(|(_, v)| **v == 1)
        .map(|(p, _)| p)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidentPixel {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub confidence: f64,
}

/// High-confidence predicted edge pixels and, once matched, the shift each
/// one implies for the noisy-space field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSet {
    pub pixels: Vec<ConfidentPixel>,
    /// Per pixel: the target field value `(di, dj)` read at the matched
    /// noisy pixel, `None` when no noisy edge lies within the radius.
    pub target_shifts: Option<Vec<Option<(f64, f64)>>>,
    pub tau: f64,
    shape: (usize, usize, usize),
}

impl ConfidentSet {
    /// Every pixel/channel with probability strictly above `tau`.
    pub fn from_prediction<T: Real>(pred: &EdgeProbMap<T>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
        }
        let pixels = pred
            .values()
            .indexed_iter()
            .filter(|(_, p)| p.to_f64_lossy() > tau)
            .map(|((k, i, j), p)| ConfidentPixel {
                i,
                j,
                k,
                confidence: p.to_f64_lossy(),
            })
            .collect();
        let s = pred.values().shape();
        Ok(Self {
            pixels,
            target_shifts: None,
            tau,
            shape: (s[0], s[1], s[2]),
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    /// Binary `(C, H, W)` indicator of confident pixels.
    pub fn rasterize(&self) -> BinaryLabelMap {
        let mut values = Array3::zeros(self.shape);
        for p in &self.pixels {
            values[[p.k, p.i, p.j]] = 1;
        }
        BinaryLabelMap::new(values).expect("indicator is binary")
    }

    /// Matches confident pixels to the noisy labels of the same class.
    ///
    /// A confident pixel `s` matched to noisy pixel `p` means the noisy-space
    /// field at `p` should read from `s`, so the stored target is `s - p`.
    pub fn attach_targets(&mut self, noisy: &BinaryLabelMap, max_radius: f64) -> Result<()> {
        let (c, h, w) = self.shape;
        if noisy.values().shape() != [c, h, w] {
            return Err(Error::shape("confident set vs noisy labels", &[c, h, w], noisy.values().shape()));
        }
        let mut targets = vec![None; self.pixels.len()];
        for k in 0..c {
            let idx: Vec<usize> = (0..self.pixels.len()).filter(|&n| self.pixels[n].k == k).collect();
            let sources: Vec<_> = idx.iter().map(|&n| (self.pixels[n].i, self.pixels[n].j)).collect();
            let matches = min_distance_match(&sources, noisy.channel(k), max_radius)?;
            // Matches preserve source order with gaps for dropped pixels.
            let mut cursor = 0;
            for m in matches {
                while sources[cursor] != m.source {
                    cursor += 1;
                }
                targets[idx[cursor]] = Some((-(m.shift.0 as f64), -(m.shift.1 as f64)));
                cursor += 1;
            }
        }
        self.target_shifts = Some(targets);
        Ok(())
    }

    /// Supervision records on the noisy-space grid.
    pub fn supervision(&self) -> Vec<SupervisionRecord> {
        let Some(targets) = &self.target_shifts else {
            return Vec::new();
        };
        self.pixels
            .iter()
            .zip(targets)
            .filter_map(|(p, t)| {
                t.map(|(di, dj)| SupervisionRecord {
                    i: (p.i as f64 - di) as usize,
                    j: (p.j as f64 - dj) as usize,
                    k: p.k,
                    delta_i: di,
                    delta_j: dj,
                    confidence: p.confidence,
                })
            })
            .collect()
    }
}

/// One supervised field value: at noisy-grid pixel `(i, j)` the field should
/// equal `(delta_i, delta_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub delta_i: f64,
    pub delta_j: f64,
    pub confidence: f64,
}

pub fn write_supervision_csv<W: std::io::Write>(records: &[SupervisionRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("supervision csv", e))?;
    Ok(())
}

pub fn read_supervision_csv<R: std::io::Read>(input: R) -> Result<Vec<SupervisionRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Histogram of shift magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    sorted: Vec<f64>,
}

impl ShiftHistogram {
    pub fn total(&self) -> usize {
        self.sorted.len()
    }

    /// Fraction of shifts strictly longer than `t`; 0 for an empty histogram.
    pub fn fraction_gt(&self, t: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let at_most = self.sorted.partition_point(|m| *m <= t);
        (self.sorted.len() - at_most) as f64 / self.sorted.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }
}

/// Histogram of `|shift|` with unit-width bins starting at zero.
pub fn shift_statistics(shifts: &[(f64, f64)]) -> Result<ShiftHistogram> {
    histogram_of(shifts.iter().map(|(a, b)| a.hypot(*b)).collect(), 1.0)
}

pub(crate) fn histogram_of(mut mags: Vec<f64>, bin_width: f64) -> Result<ShiftHistogram> {
    if mags.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("shift statistics"));
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let Some(&max) = mags.last() else {
        return Ok(ShiftHistogram {
            bin_edges: Vec::new(),
            counts: Vec::new(),
            sorted: mags,
        });
    };
    let bins = ((max / bin_width).floor() as usize + 1).max(1);
    let bin_edges = (0..=bins).map(|b| b as f64 * bin_width).collect();
    let mut counts = vec![0u64; bins];
    for m in &mags {
        counts[((m / bin_width).floor() as usize).min(bins - 1)] += 1;
    }
    Ok(ShiftHistogram {
        bin_edges,
        counts,
        sorted: mags,
    })
}
