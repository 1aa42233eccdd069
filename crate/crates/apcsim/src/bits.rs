//! Equivalent-bit-precision bookkeeping: maps an analog noise variance onto
//! the fractional bit width of a uniform quantizer with the same error power,
//! and summarizes per-layer results for reporting.

use crate::error::{Error, Result};
use crate::noise::{noise_std, NoiseContext, NoiseSpec};
use crate::num::Element;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Bit precision of the uniform quantizer over `range_width` whose
/// quantization noise power equals `var_a`:
/// `log2(range_width / sqrt(12 * var_a) + 1)`.
///
/// Returns `+inf` when `var_a` is zero (noiseless limit).
pub fn noise_bits<T: Element>(range_width: T, var_a: T) -> Result<T> {
    if !(range_width > T::zero()) {
        return Err(Error::domain("range width must be positive".to_string()));
    }
    if var_a < T::zero() {
        return Err(Error::domain("noise variance must be nonnegative".to_string()));
    }
    if var_a == T::zero() {
        return Ok(T::infinity());
    }
    let twelve = T::from_f64_(12.0);
    Ok((range_width / (twelve * var_a).sqrt() + T::one()).log2())
}

/// Closed-form equivalent bits for thermal noise at scalar energy `energy`,
/// measured against the layer's output range.
pub fn thermal_noise_bits<T: Element>(
    spec: &NoiseSpec,
    ctx: &NoiseContext<T>,
    energy: T,
    out_range: (T, T),
) -> Result<T> {
    if !matches!(spec, NoiseSpec::Thermal { .. }) {
        return Err(Error::contract(
            "thermal_noise_bits requires a thermal noise spec".to_string(),
        ));
    }
    let std = noise_std(spec, ctx, energy, None)?;
    noise_bits(out_range.1 - out_range.0, std * std)
}

/// One layer's row in the equivalent-precision report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerBits {
    pub layer: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    pub var_a: f64,
    pub noise_bits: f64,
    /// MACs per inference through this layer, used for the weighted average.
    pub n_mac: u64,
}

/// Per-layer equivalent precision plus unweighted and MAC-weighted averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseBitsReport {
    pub layers: Vec<LayerBits>,
    pub average_bits: f64,
    pub average_bits_mac_weighted: f64,
}

impl NoiseBitsReport {
    pub fn new(layers: Vec<LayerBits>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract(
                "noise-bits report needs at least one layer".to_string(),
            ));
        }
        let n = layers.len() as f64;
        let average_bits = layers.iter().map(|l| l.noise_bits).sum::<f64>() / n;
        let total_mac: u64 = layers.iter().map(|l| l.n_mac).sum();
        let average_bits_mac_weighted = if total_mac == 0 {
            average_bits
        } else {
            layers
                .iter()
                .map(|l| l.noise_bits * l.n_mac as f64)
                .sum::<f64>()
                / total_mac as f64
        };
        Ok(NoiseBitsReport {
            layers,
            average_bits,
            average_bits_mac_weighted,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,range_lo,range_hi,var_a,noise_bits\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer, l.range_lo, l.range_hi, l.var_a, l.noise_bits
            );
        }
        out
    }
}

/// Paired accuracies from the noise-vs-quantization equivalence experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceResult {
    /// Accuracy under analog noise at the given allocation.
    pub noisy_accuracy: f64,
    /// Accuracy with noise removed and per-layer fractional-bit output
    /// quantization at the measured B_ε instead.
    pub lowbit_accuracy: f64,
    /// Noise-free baseline accuracy (quantized operands where applicable).
    pub baseline_accuracy: f64,
    pub report: NoiseBitsReport,
}

const LOWBIT_MIN: f64 = 0.5;
const LOWBIT_MAX: f64 = 16.0;

/// Runs both arms of the equivalence experiment: evaluate under analog
/// noise, convert each layer's noise power into equivalent bits against its
/// calibrated output range, then re-evaluate noise-free with per-layer
/// fractional-bit output quantization at those widths.
///
/// Noise variances are analytic, with signal-dependent factors (input and
/// weight norms for weight/shot noise) averaged over a noise-free pass of
/// `data`; shot-noise bit counts are our extension of the thermal-only
/// definition and are labeled by the same report format.
pub fn equivalence_experiment<T: Element>(
    model: &crate::model::ModelGraph<T>,
    data: &crate::data::Dataset<T>,
    spec: &NoiseSpec,
    alloc: &crate::optim::EnergyAlloc<T>,
    seed: u64,
    batch_size: usize,
) -> Result<EquivalenceResult> {
    use crate::model::{EvalMode, Layer};
    use crate::quant::fake_quantize;
    use crate::rng::NoiseRng;

    if !model.is_calibrated() {
        return Err(Error::contract(
            "equivalence experiment needs a calibrated model".to_string(),
        ));
    }
    let energies = alloc.layer_tensors();
    let mut rng = NoiseRng::new(seed);
    let noisy_accuracy = model.evaluate(
        data,
        &EvalMode::Noisy {
            spec,
            energies: &energies,
        },
        &mut rng,
        batch_size,
    )?;
    let baseline_mode = if spec.quantizes_operands() {
        EvalMode::Quantized
    } else {
        EvalMode::Clean
    };
    let baseline_accuracy =
        model.evaluate(data, &baseline_mode, &mut NoiseRng::new(seed), batch_size)?;

    // one noise-free pass over a stats subset to average the
    // signal-dependent variance factors
    let stats_n = data.len().min(4 * batch_size);
    let idx: Vec<usize> = (0..stats_n).collect();
    let (x0, _) = data.batch(&idx)?;
    let outs = model.forward_collect(&x0, &baseline_mode, &mut NoiseRng::new(seed), None)?;

    let macs = model.n_mac()?;
    let noisy = model.noisy_layers();
    let mut layers = Vec::with_capacity(noisy.len());
    for (ord, &l) in noisy.iter().enumerate() {
        let calib = model.calib[l].as_ref().unwrap();
        let out_range = calib
            .output
            .as_ref()
            .ok_or_else(|| Error::contract(format!("layer {l}: no output range")))?;
        let e = &energies[ord];
        let mean_inv_e =
            e.data().iter().map(|&v| v.to_f64_().recip()).sum::<f64>() / e.numel() as f64;
        let input = if l == 0 { &x0 } else { &outs[l - 1] };
        let n = match &model.layers[l] {
            Layer::Dense { w, .. } => w.shape()[1],
            Layer::Conv2d { w, .. } => w.shape()[1] * w.shape()[2] * w.shape()[3],
            _ => unreachable!(),
        };
        let batch = input.shape()[0];
        let var_a = match *spec {
            NoiseSpec::Thermal { sigma_t } => {
                let dw = calib.weight_full.as_ref().unwrap().width().to_f64_();
                let dx = calib.input.as_ref().unwrap().width().to_f64_();
                n as f64 * (dw * dx * sigma_t).powi(2) * mean_inv_e
            }
            NoiseSpec::Weight { sigma_w } => {
                // Var per output = ||x_patch||^2 (Δw σ_w)^2 / E, with the
                // squared patch norm averaged over the evaluation stream
                let rin = calib.input.as_ref().unwrap();
                let xq = fake_quantize(input, rin, rin.bits);
                let mean_sq = xq.data().iter().map(|&v| {
                    let f = v.to_f64_();
                    f * f
                }).sum::<f64>() / xq.numel() as f64;
                let dw = calib.weight_full.as_ref().unwrap().width().to_f64_();
                n as f64 * mean_sq * (dw * sigma_w).powi(2) * mean_inv_e
            }
            NoiseSpec::Shot {
                photon_energy_j,
                responsivity,
                sigma_s,
            } => {
                let wmat = match &model.layers[l] {
                    Layer::Dense { w, .. } | Layer::Conv2d { w, .. } => w,
                    _ => unreachable!(),
                };
                let o = wmat.shape()[0];
                let wsq: Vec<f64> = wmat
                    .data()
                    .chunks(wmat.numel() / o)
                    .map(|row| row.iter().map(|&v| v.to_f64_().powi(2)).sum::<f64>())
                    .collect();
                // per-channel energies pair with their own rows
                let w_over_e = if e.numel() == o {
                    wsq.iter()
                        .zip(e.data())
                        .map(|(ws, &ev)| ws / ev.to_f64_())
                        .sum::<f64>()
                        / o as f64
                } else {
                    wsq.iter().sum::<f64>() / o as f64 * mean_inv_e
                };
                let mean_x_sq = input.data().iter().map(|&v| {
                    let f = v.to_f64_();
                    f * f
                }).sum::<f64>() / batch as f64
                    * (batch as f64 * n as f64 / input.numel() as f64); // mean ||x||^2 per dot product
                w_over_e * mean_x_sq * sigma_s * sigma_s * photon_energy_j
                    / (n as f64 * responsivity)
            }
        };
        let width = out_range.width().to_f64_();
        let b = noise_bits(width, var_a)?.clamp(LOWBIT_MIN, LOWBIT_MAX);
        layers.push(LayerBits {
            layer: l,
            range_lo: out_range.x_min.to_f64_(),
            range_hi: out_range.x_max.to_f64_(),
            var_a,
            noise_bits: b,
            n_mac: macs[l],
        });
    }
    let report = NoiseBitsReport::new(layers)?;
    let site_bits: Vec<f64> = report.layers.iter().map(|l| l.noise_bits).collect();
    let lowbit_accuracy = model.evaluate(
        data,
        &EvalMode::LowBit {
            site_bits: &site_bits,
        },
        &mut NoiseRng::new(seed),
        batch_size,
    )?;
    Ok(EquivalenceResult {
        noisy_accuracy,
        lowbit_accuracy,
        baseline_accuracy,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eight_bit_quantization_variance_maps_back_to_eight() {
        let range = 3.7f64;
        let delta = range / (2f64.powi(8) - 1.0);
        let b = noise_bits(range, delta * delta / 12.0).unwrap();
        assert_abs_diff_eq!(b, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_range_twelfth_variance_is_one_bit() {
        let b = noise_bits(1.0f64, 1.0 / 12.0).unwrap();
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_is_infinite_bits() {
        assert!(noise_bits(1.0f64, 0.0).unwrap().is_infinite());
    }

    #[test]
    fn round_trip_with_quantization_noise_var() {
        use crate::quant::{quantization_noise_var, CalibratedRange};
        for b in [1.0f64, 2.5, 4.644, 8.0] {
            let r = CalibratedRange::new(-1.3, 2.1, b);
            let var = quantization_noise_var(&r, b);
            let back = noise_bits(r.width(), var).unwrap();
            assert_abs_diff_eq!(back, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn strictly_decreasing_in_variance() {
        let mut prev = f64::INFINITY;
        for k in 1..40 {
            let b = noise_bits(2.0f64, 1e-6 * k as f64).unwrap();
            assert!(b < prev);
            prev = b;
        }
        assert!(prev >= 0.0);
    }

    fn thermal_ctx() -> (NoiseSpec, NoiseContext<f64>) {
        let spec = NoiseSpec::thermal();
        let ctx = NoiseContext {
            n: 128,
            weight_range: Some((-0.7, 0.7)),
            input_range: Some((0.0, 4.0)),
            layer: 0,
        };
        (spec, ctx)
    }

    #[test]
    fn thermal_bits_composes_noise_std_and_noise_bits() {
        let (spec, ctx) = thermal_ctx();
        let out = (-3.0, 5.0);
        let b = thermal_noise_bits(&spec, &ctx, 2.0, out).unwrap();
        let std = noise_std(&spec, &ctx, 2.0, None).unwrap();
        let expect = noise_bits(out.1 - out.0, std * std).unwrap();
        assert_abs_diff_eq!(b, expect, epsilon = 1e-12);
    }

    #[test]
    fn quadrupling_energy_halves_std_consistently() {
        // B(4E) must equal noise_bits evaluated at var/4, checked at 5 settings
        let (spec, ctx) = thermal_ctx();
        let out = (-3.0, 5.0);
        for e in [0.1f64, 0.5, 1.0, 3.0, 10.0] {
            let b4 = thermal_noise_bits(&spec, &ctx, 4.0 * e, out).unwrap();
            let std = noise_std(&spec, &ctx, e, None).unwrap();
            let expect = noise_bits(out.1 - out.0, std * std / 4.0).unwrap();
            assert_abs_diff_eq!(b4, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn halving_range_costs_about_one_bit_at_high_snr() {
        let (spec, ctx) = thermal_ctx();
        let e = 1e6; // deep in the large-SNR regime
        let b_full = thermal_noise_bits(&spec, &ctx, e, (0.0, 8.0)).unwrap();
        let b_half = thermal_noise_bits(&spec, &ctx, e, (0.0, 4.0)).unwrap();
        assert_abs_diff_eq!(b_full - b_half, 1.0, epsilon = 0.02);
    }

    #[test]
    fn monotone_in_energy_and_ranges() {
        let (spec, mut ctx) = thermal_ctx();
        let out = (0.0, 6.0);
        let base = thermal_noise_bits(&spec, &ctx, 1.0, out).unwrap();
        assert!(thermal_noise_bits(&spec, &ctx, 2.0, out).unwrap() > base);
        assert!(thermal_noise_bits(&spec, &ctx, 1.0, (0.0, 12.0)).unwrap() > base);
        ctx.n = 512;
        assert!(thermal_noise_bits(&spec, &ctx, 1.0, out).unwrap() < base);
        ctx.n = 128;
        ctx.input_range = Some((0.0, 8.0));
        assert!(thermal_noise_bits(&spec, &ctx, 1.0, out).unwrap() < base);
    }

    #[test]
    fn zero_noise_equivalence_matches_baseline() {
        use crate::data::synthetic_dataset;
        use crate::model::{ArchPreset, ModelGraph};
        use crate::optim::{EnergyAlloc, Granularity};
        use crate::quant::QuantSpec;
        let data = synthetic_dataset::<f64>(6, 41, "test");
        let mut m = ModelGraph::preset(ArchPreset::Mlp, vec![1, 16, 16], 10, 13).unwrap();
        m.calibrate(&data, &QuantSpec::default(), 16).unwrap();
        let alloc = EnergyAlloc::init(&m, Granularity::PerLayer, 1e9).unwrap();
        let spec = NoiseSpec::Thermal { sigma_t: 1e-12 };
        let res = equivalence_experiment(&m, &data, &spec, &alloc, 5, 32).unwrap();
        assert_eq!(res.noisy_accuracy, res.baseline_accuracy);
        assert_eq!(res.lowbit_accuracy, res.baseline_accuracy);
        assert!(res.report.layers.iter().all(|l| l.noise_bits == 16.0));
    }

    #[test]
    fn per_layer_bits_vary_across_cnn_layers() {
        use crate::data::synthetic_dataset;
        use crate::model::{ArchPreset, ModelGraph};
        use crate::optim::{EnergyAlloc, Granularity};
        use crate::quant::QuantSpec;
        let data = synthetic_dataset::<f64>(6, 42, "test");
        let mut m = ModelGraph::preset(ArchPreset::Cnn, vec![1, 16, 16], 10, 17).unwrap();
        m.calibrate(&data, &QuantSpec::default(), 16).unwrap();
        let total = m.n_mac_total().unwrap() as f64;
        let alloc = EnergyAlloc::init(&m, Granularity::PerLayer, 0.05 * total).unwrap();
        let res =
            equivalence_experiment(&m, &data, &NoiseSpec::thermal(), &alloc, 5, 32).unwrap();
        let bs: Vec<f64> = res.report.layers.iter().map(|l| l.noise_bits).collect();
        let spread = bs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - bs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.2, "per-layer bits {bs:?}");
        assert!(res.report.average_bits >= bs.iter().cloned().fold(f64::INFINITY, f64::min));
        assert!(
            res.report.average_bits <= bs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
    }

    #[test]
    fn report_averages() {
        let layers = vec![
            LayerBits {
                layer: 0,
                range_lo: 0.0,
                range_hi: 1.0,
                var_a: 1e-4,
                noise_bits: 4.0,
                n_mac: 100,
            },
            LayerBits {
                layer: 1,
                range_lo: 0.0,
                range_hi: 1.0,
                var_a: 1e-5,
                noise_bits: 6.0,
                n_mac: 300,
            },
        ];
        let rep = NoiseBitsReport::new(layers).unwrap();
        assert_abs_diff_eq!(rep.average_bits, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.average_bits_mac_weighted, 5.5, epsilon = 1e-12);
        assert!(rep.average_bits >= 4.0 && rep.average_bits <= 6.0);
        let csv = rep.to_csv();
        assert!(csv.starts_with("layer_id,range_lo,range_hi,var_a,noise_bits\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
