//! Affine (fake) quantization with fractional bit counts, plus range
//! calibration primitives.
//!
//! Quantize-then-dequantize stays in the real domain so fixed-point effects
//! can be simulated inside a real-valued pipeline, and the straight-through
//! rounding keeps the whole thing differentiable.

use crate::error::{Error, Result};
use crate::num::Element;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Number of quantization levels for a (possibly fractional) bit count.
///
/// A fractional bit count B stands for `ceil(2^B)` uniformly spaced bins.
/// Bit counts are routinely printed to a few decimals (log2(25) = "4.644"),
/// so values within 0.1% of an integer bin count snap down instead of
/// spuriously rounding up.
pub fn levels_for_bits(bits: f64) -> usize {
    assert!(bits > 0.0, "bits must be positive");
    let raw = 2f64.powf(bits);
    let lv = (raw * (1.0 - 1e-3)).ceil() as usize;
    lv.max(2)
}

/// Granularity at which ranges are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantGranularity {
    PerTensor,
    /// One range per index of the named axis (output channel / weight row).
    PerChannel {
        axis: usize,
    },
}

/// How activation ranges are estimated during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RangeMode {
    MinMax,
    /// Clips both tails symmetrically in quantile (p and 100-p).
    Percentile { p: f64 },
    /// Running average of per-batch min/max. `decay: None` uses the
    /// arithmetic running average; `Some(d)` uses m <- d*m + (1-d)*x.
    MovingAverage {
        decay: Option<f64>,
        batches: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantSpec {
    pub bits: f64,
    pub granularity: QuantGranularity,
    pub range_mode: RangeMode,
    pub symmetric: bool,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            bits: 8.0,
            granularity: QuantGranularity::PerTensor,
            range_mode: RangeMode::MovingAverage {
                decay: None,
                batches: 100,
            },
            symmetric: false,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bits > 0.0) {
            return Err(Error::domain(format!("bits must be > 0, got {}", self.bits)));
        }
        if let RangeMode::Percentile { p } = self.range_mode {
            if !(p > 50.0 && p <= 100.0) {
                return Err(Error::domain(format!(
                    "percentile must lie in (50, 100], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// A calibrated quantizer range with its derived grid parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedRange<T: Element> {
    pub x_min: T,
    pub x_max: T,
    pub bits: f64,
    pub levels: usize,
    pub delta: T,
    pub zero_point: T,
}

impl<T: Element> CalibratedRange<T> {
    /// Builds a range, widening a degenerate `x_min == x_max` interval by
    /// `eps = max(1e-8, 1e-6*|x_max|)`.
    pub fn new(x_min: T, x_max: T, bits: f64) -> Self {
        let (x_min, x_max) = if x_max > x_min {
            (x_min, x_max)
        } else {
            let eps = T::from_f64_(1e-8).max(T::from_f64_(1e-6) * x_max.abs());
            (x_min - eps, x_max + eps)
        };
        let levels = levels_for_bits(bits);
        let delta = (x_max - x_min) / T::from_usize_(levels - 1);
        let z = (-x_min / delta)
            .round()
            .max(T::zero())
            .min(T::from_usize_(levels - 1));
        CalibratedRange {
            x_min,
            x_max,
            bits,
            levels,
            delta,
            zero_point: z,
        }
    }

    pub fn with_bits(&self, bits: f64) -> Self {
        CalibratedRange::new(self.x_min, self.x_max, bits)
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }
}

/// Quantize-dequantize `x` on the `levels_for_bits(bits)` grid of `r`.
///
/// Returns `delta * (clamp(round(x/delta + z), 0, levels-1) - z)`, rounded
/// with a straight-through gradient, so for strictly in-range inputs the
/// Jacobian is the identity.
pub fn fake_quantize<T: Element>(
    x: &Tensor<T>,
    r: &CalibratedRange<T>,
    bits: f64,
) -> Tensor<T> {
    let r = if bits == r.bits { *r } else { r.with_bits(bits) };
    let top = T::from_usize_(r.levels - 1);
    x.scale(r.delta.recip())
        .add_scalar(r.zero_point)
        .ste_round()
        .clamp(T::zero(), top)
        .add_scalar(-r.zero_point)
        .scale(r.delta)
}

/// Per-row fake quantization of a `[O, K]` matrix (weights are frozen, so
/// this works on detached data).
pub fn fake_quantize_rows<T: Element>(
    w: &Tensor<T>,
    ranges: &[CalibratedRange<T>],
    bits: f64,
) -> Result<Tensor<T>> {
    if w.shape().len() != 2 || w.shape()[0] != ranges.len() {
        return Err(Error::contract(format!(
            "fake_quantize_rows: {} ranges for shape {:?}",
            ranges.len(),
            w.shape()
        )));
    }
    let (o, k) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); o * k];
    for (row, r0) in ranges.iter().enumerate() {
        let r = if bits == r0.bits { *r0 } else { r0.with_bits(bits) };
        let top = T::from_usize_(r.levels - 1);
        for j in 0..k {
            let x = w.data()[row * k + j];
            let q = (x / r.delta + r.zero_point)
                .round()
                .max(T::zero())
                .min(top);
            out[row * k + j] = (q - r.zero_point) * r.delta;
        }
    }
    Tensor::from_vec(out, vec![o, k])
}

/// Variance of the uniform quantization-noise model at a (possibly
/// fractional) bit count: `(width / (2^bits - 1))^2 / 12`.
///
/// Uses the continuous `2^bits - 1` denominator so it inverts
/// [`crate::bits::noise_bits`] exactly; the realizable quantizer in
/// [`fake_quantize`] rounds the bin count up to an integer.
pub fn quantization_noise_var<T: Element>(r: &CalibratedRange<T>, bits: f64) -> T {
    assert!(bits > 0.0, "bits must be positive");
    let denom = T::from_f64_(2f64.powf(bits) - 1.0);
    let d = r.width() / denom;
    d * d / T::from_f64_(12.0)
}

/// Streaming estimator of an activation range under a [`RangeMode`].
#[derive(Debug, Clone)]
pub struct RangeObserver<T: Element> {
    mode: RangeMode,
    lo: T,
    hi: T,
    batches_seen: usize,
    samples: Vec<T>, // percentile mode only
}

impl<T: Element> RangeObserver<T> {
    pub fn new(mode: RangeMode) -> Self {
        RangeObserver {
            mode,
            lo: T::infinity(),
            hi: T::neg_infinity(),
            batches_seen: 0,
            samples: Vec::new(),
        }
    }

    /// Feeds one batch worth of values.
    pub fn observe(&mut self, values: &[T]) {
        if values.is_empty() {
            return;
        }
        match self.mode {
            RangeMode::MinMax => {
                for &v in values {
                    self.lo = self.lo.min(v);
                    self.hi = self.hi.max(v);
                }
                self.batches_seen += 1;
            }
            RangeMode::Percentile { .. } => {
                self.samples.extend_from_slice(values);
                self.batches_seen += 1;
            }
            RangeMode::MovingAverage { decay, batches } => {
                if self.batches_seen >= batches {
                    return;
                }
                let mut blo = T::infinity();
                let mut bhi = T::neg_infinity();
                for &v in values {
                    blo = blo.min(v);
                    bhi = bhi.max(v);
                }
                self.batches_seen += 1;
                if self.batches_seen == 1 {
                    self.lo = blo;
                    self.hi = bhi;
                } else {
                    let d = T::from_f64_(decay.unwrap_or_else(|| {
                        (self.batches_seen as f64 - 1.0) / self.batches_seen as f64
                    }));
                    self.lo = d * self.lo + (T::one() - d) * blo;
                    self.hi = d * self.hi + (T::one() - d) * bhi;
                }
            }
        }
    }

    /// Final `(x_min, x_max)`, or a calibration error if nothing was seen.
    pub fn finish(&self) -> Result<(T, T)> {
        if self.batches_seen == 0 {
            return Err(Error::Calibration(
                "calibration stream supplied no batches".into(),
            ));
        }
        match self.mode {
            RangeMode::Percentile { p } => {
                let mut sorted = self.samples.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = sorted.len();
                let hi_rank = nearest_rank(p, n);
                let lo_rank = n - 1 - hi_rank;
                Ok((sorted[lo_rank.min(hi_rank)], sorted[hi_rank]))
            }
            _ => Ok((self.lo, self.hi)),
        }
    }
}

/// Nearest-rank index (0-based) of the p-th percentile of n samples.
fn nearest_rank(p: f64, n: usize) -> usize {
    let r = (p / 100.0 * n as f64).ceil() as usize;
    r.clamp(1, n) - 1
}

/// Exact per-channel min/max over rows of a `[O, K]` matrix.
pub fn row_ranges<T: Element>(w: &Tensor<T>, bits: f64) -> Vec<CalibratedRange<T>> {
    let (o, k) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|row| {
            let vals = &w.data()[row * k..(row + 1) * k];
            let lo = vals.iter().copied().fold(T::infinity(), T::min);
            let hi = vals.iter().copied().fold(T::neg_infinity(), T::max);
            CalibratedRange::new(lo, hi, bits)
        })
        .collect()
}
