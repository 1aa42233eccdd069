//! Stochastic dot-product engines: thermal, weight, and shot noise with
//! energy-dependent scaling, plus literal K-fold redundant-coding averaging.
//!
//! All noise enters through the reparameterization trick: the standard-normal
//! draws are plain inputs, so the noisy output stays differentiable in the
//! energies, weights, and activations. One complete dot product receives one
//! noise injection; the sqrt(N) factor already encodes the linear growth of
//! variance with contraction length.

use crate::error::{Error, Result};
use crate::num::Element;
use crate::rng::NoiseRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

fn default_sigma_t() -> f64 {
    0.01
}
fn default_sigma_w() -> f64 {
    0.1
}
fn default_photon_energy() -> f64 {
    crate::PHOTON_ENERGY_1550NM_J
}
fn default_one() -> f64 {
    1.0
}

/// Which physical noise source limits the analog dot product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Signal-independent receiver noise, scaled by operand ranges and sqrt(N).
    Thermal {
        #[serde(default = "default_sigma_t")]
        sigma_t: f64,
    },
    /// Gaussian read noise on every stored weight.
    Weight {
        #[serde(default = "default_sigma_w")]
        sigma_w: f64,
    },
    /// Photon shot noise in homodyne detection; energies are in joules/MAC.
    Shot {
        #[serde(default = "default_photon_energy")]
        photon_energy_j: f64,
        #[serde(default = "default_one")]
        responsivity: f64,
        #[serde(default = "default_one")]
        sigma_s: f64,
    },
}

impl NoiseSpec {
    pub fn thermal() -> Self {
        NoiseSpec::Thermal {
            sigma_t: default_sigma_t(),
        }
    }

    pub fn weight() -> Self {
        NoiseSpec::Weight {
            sigma_w: default_sigma_w(),
        }
    }

    pub fn shot() -> Self {
        NoiseSpec::Shot {
            photon_energy_j: default_photon_energy(),
            responsivity: 1.0,
            sigma_s: 1.0,
        }
    }

    /// Thermal and weight noise act on 8-bit quantized operands; shot noise
    /// acts on continuous ones.
    pub fn quantizes_operands(&self) -> bool {
        !matches!(self, NoiseSpec::Shot { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::Thermal { sigma_t } => sigma_t > 0.0,
            NoiseSpec::Weight { sigma_w } => sigma_w > 0.0,
            NoiseSpec::Shot {
                photon_energy_j,
                responsivity,
                sigma_s,
            } => photon_energy_j > 0.0 && responsivity > 0.0 && sigma_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "noise scale parameters must be positive: {self:?}"
            )))
        }
    }
}

/// Per-layer context for one noisy dot-product call.
#[derive(Debug, Clone)]
pub struct NoiseContext<T: Element> {
    /// MACs per dot product (contraction length; C*kh*kw for conv).
    pub n: usize,
    pub weight_range: Option<(T, T)>,
    pub input_range: Option<(T, T)>,
    /// Layer index used to key the RNG stream.
    pub layer: usize,
}

impl<T: Element> NoiseContext<T> {
    fn ranges(&self, spec: &NoiseSpec) -> Result<(T, T)> {
        match spec {
            NoiseSpec::Shot { .. } => Ok((T::zero(), T::zero())),
            _ => {
                let (wlo, whi) = self.weight_range.ok_or_else(|| {
                    Error::contract("thermal/weight noise requires a calibrated weight range")
                })?;
                let (xlo, xhi) = self.input_range.ok_or_else(|| {
                    Error::contract("thermal/weight noise requires a calibrated input range")
                })?;
                Ok((whi - wlo, xhi - xlo))
            }
        }
    }
}

fn check_energy<T: Element>(energy: &Tensor<T>) -> Result<()> {
    if energy.data().iter().any(|&e| !(e > T::zero())) {
        return Err(Error::domain("energy per MAC must be positive".to_string()));
    }
    Ok(())
}

const NORM_EPS: f64 = 1e-30;

/// Noisy `x [R,K] * W^T [K,O] -> [R,O]` under `spec`, with energy/MAC
/// `energy` of shape `[1]` (per layer) or `[O]` (per output channel).
///
/// Fresh standard-normal draws are taken from `rng` per call and per batch
/// row; pass a frozen `NoiseRng` to replay them.
pub fn noisy_linear<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &NoiseSpec,
    ctx: &NoiseContext<T>,
    energy: &Tensor<T>,
    rng: &mut NoiseRng,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "noisy_linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_energy(energy)?;
    let (r, _k) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    if energy.numel() != 1 && energy.numel() != o {
        return Err(Error::contract(format!(
            "energy must have 1 or {} entries, got {}",
            o,
            energy.numel()
        )));
    }
    if ctx.n != x.shape()[1] {
        return Err(Error::contract(format!(
            "NoiseContext.n = {} does not match contraction length {}",
            ctx.n,
            x.shape()[1]
        )));
    }
    let sqrt_n = T::from_usize_(ctx.n).sqrt();
    match *spec {
        NoiseSpec::Thermal { sigma_t } => {
            let (dw, dx) = ctx.ranges(spec)?;
            let clean = x.matmul(&w.transpose()?)?;
            let xi = Tensor::from_vec(rng.normal_vec(ctx.layer, r * o), vec![r, o])?;
            let coef = sqrt_n * dw * dx * T::from_f64_(sigma_t);
            let std = energy.powf(-T::half()).scale(coef); // [1] or [O]
            clean.add(&xi.mul(&std)?)
        }
        NoiseSpec::Weight { sigma_w } => {
            let (dw, _dx) = ctx.ranges(spec)?;
            let k = w.shape()[1];
            let xi = Tensor::from_vec(rng.normal_vec(ctx.layer, o * k), vec![o, k])?;
            let per = dw * T::from_f64_(sigma_w);
            let mut std = energy.powf(-T::half()).scale(per);
            if energy.numel() == o && o > 1 {
                std = std.reshape(vec![o, 1])?; // broadcast per weight row
            }
            let wn = w.add(&xi.mul(&std)?)?;
            x.matmul(&wn.transpose()?)
        }
        NoiseSpec::Shot {
            photon_energy_j,
            responsivity,
            sigma_s,
        } => {
            let clean = x.matmul(&w.transpose()?)?;
            let xi = Tensor::from_vec(rng.normal_vec(ctx.layer, r * o), vec![r, o])?;
            let wnorm = w.mul(w)?.sum_axis(1, false)?.add_scalar(T::from_f64_(NORM_EPS)).sqrt(); // [O]
            let xnorm = x
                .mul(x)?
                .sum_axis(1, true)?
                .add_scalar(T::from_f64_(NORM_EPS))
                .sqrt(); // [R,1]
            // photons per MAC = E * responsivity / photon_energy
            let phot_scale = T::from_f64_(responsivity / photon_energy_j) * T::from_usize_(ctx.n);
            let factor = energy
                .scale(phot_scale)
                .powf(-T::half())
                .scale(T::from_f64_(sigma_s)); // [1] or [O]
            let noise = xi.mul(&wnorm)?.mul(&xnorm)?.mul(&factor)?;
            clean.add(&noise)
        }
    }
}

/// `W [O,K] * x [K] -> [O]` convenience wrapper around [`noisy_linear`].
pub fn noisy_matmul<T: Element>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    spec: &NoiseSpec,
    ctx: &NoiseContext<T>,
    energy: &Tensor<T>,
    rng: &mut NoiseRng,
) -> Result<Tensor<T>> {
    let k = x.numel();
    let row = x.reshape(vec![1, k])?;
    let y = noisy_linear(&row, w, spec, ctx, energy, rng)?;
    let o = w.shape()[0];
    y.reshape(vec![o])
}

/// Analytic per-output-element noise standard deviation at scalar energy
/// `energy`.
///
/// For shot noise, `norms = (||W_i||_2, ||x||_2)` is required. For weight
/// noise the per-element std on each weight is returned unless `norms`
/// supplies `||x||_2` (second component), in which case the per-output std
/// is returned.
pub fn noise_std<T: Element>(
    spec: &NoiseSpec,
    ctx: &NoiseContext<T>,
    energy: T,
    norms: Option<(T, T)>,
) -> Result<T> {
    if !(energy > T::zero()) {
        return Err(Error::domain("energy per MAC must be positive".to_string()));
    }
    let inv_sqrt_e = energy.sqrt().recip();
    match *spec {
        NoiseSpec::Thermal { sigma_t } => {
            let (dw, dx) = ctx.ranges(spec)?;
            Ok(T::from_usize_(ctx.n).sqrt() * dw * dx * T::from_f64_(sigma_t) * inv_sqrt_e)
        }
        NoiseSpec::Weight { sigma_w } => {
            let (dw, _) = ctx.ranges(spec)?;
            let per = dw * T::from_f64_(sigma_w) * inv_sqrt_e;
            Ok(match norms {
                Some((_, xnorm)) => per * xnorm,
                None => per,
            })
        }
        NoiseSpec::Shot {
            photon_energy_j,
            responsivity,
            sigma_s,
        } => {
            let (wn, xn) =
                norms.ok_or_else(|| Error::contract("shot noise_std requires operand norms"))?;
            let photons = energy * T::from_f64_(responsivity / photon_energy_j);
            Ok(wn * xn * T::from_f64_(sigma_s) / (T::from_usize_(ctx.n) * photons).sqrt())
        }
    }
}

/// Runs `noisy_linear` K times at the same energy and averages; statistically
/// equivalent to a single call at energy `K * E`.
pub fn simulate_redundant<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &NoiseSpec,
    ctx: &NoiseContext<T>,
    energy: &Tensor<T>,
    k: usize,
    rng: &mut NoiseRng,
) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::domain("redundancy K must be at least 1".to_string()));
    }
    let mut acc = noisy_linear(x, w, spec, ctx, energy, rng)?;
    for _ in 1..k {
        acc = acc.add(&noisy_linear(x, w, spec, ctx, energy, rng)?)?;
    }
    Ok(acc.scale(T::one() / T::from_usize_(k)))
}

/// Nearest quantized energy level as a repetition count, floored at one.
pub fn redundancy_for_energy(e_target: f64, e_unit: f64) -> Result<usize> {
    if !(e_unit > 0.0) {
        return Err(Error::domain("unit energy must be positive".to_string()));
    }
    Ok(((e_target / e_unit).round() as i64).max(1) as usize)
}

/// Differentiable counterpart of [`redundancy_for_energy`]: snaps each energy
/// to the nearest multiple of `e_unit` (at least one) with a straight-through
/// gradient.
pub fn snap_energy<T: Element>(energy: &Tensor<T>, e_unit: T) -> Tensor<T> {
    energy
        .scale(e_unit.recip())
        .ste_round()
        .clamp(T::one(), T::infinity())
        .scale(e_unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(n: usize) -> NoiseContext<f64> {
        NoiseContext {
            n,
            weight_range: Some((-1.0, 1.0)),
            input_range: Some((0.0, 6.0)),
            layer: 0,
        }
    }

    #[test]
    fn thermal_noise_std_substitution() {
        // sqrt(784) * 2 * 6 * 0.01 = 3.36
        let s = noise_std(&NoiseSpec::thermal(), &ctx(784), 1.0, None).unwrap();
        assert_abs_diff_eq!(s, 3.36, epsilon = 1e-12);
    }

    #[test]
    fn energy_scaling_is_inverse_sqrt() {
        let c = ctx(64);
        for spec in [NoiseSpec::thermal(), NoiseSpec::weight()] {
            let s1 = noise_std(&spec, &c, 1.0, Some((1.0, 1.0))).unwrap();
            for e in [2.0, 4.0, 16.0] {
                let se = noise_std(&spec, &c, e, Some((1.0, 1.0))).unwrap();
                assert_abs_diff_eq!(se / s1, 1.0 / e.sqrt(), epsilon = 1e-12);
            }
        }
        let shot = NoiseSpec::shot();
        let s1 = noise_std(&shot, &c, 1e-19, Some((1.0, 1.0))).unwrap();
        let s4 = noise_std(&shot, &c, 4e-19, Some((1.0, 1.0))).unwrap();
        assert_abs_diff_eq!(s4 / s1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weight_noise_per_element_std() {
        let s = noise_std(&NoiseSpec::weight(), &ctx(10), 4.0, None).unwrap();
        assert_abs_diff_eq!(s, 2.0 * 0.1 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_limit_recovers_clean_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::randn(&mut rng, vec![3, 8]);
        let x = Tensor::<f64>::randn(&mut rng, vec![4, 8]);
        let clean = x.matmul(&w.transpose().unwrap()).unwrap();
        let e = Tensor::scalar(1.0).reshape(vec![1]).unwrap();
        let spec = NoiseSpec::Thermal { sigma_t: 1e-12 };
        let mut nrng = NoiseRng::new(7);
        let y = noisy_linear(&x, &w, &spec, &ctx(8), &e, &mut nrng).unwrap();
        for (a, b) in y.data().iter().zip(clean.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn missing_ranges_is_contract_error() {
        let w = Tensor::<f64>::filled(0.5, vec![2, 4]);
        let x = Tensor::<f64>::filled(0.5, vec![1, 4]);
        let e = Tensor::filled(1.0, vec![1]);
        let c = NoiseContext {
            n: 4,
            weight_range: None,
            input_range: None,
            layer: 0,
        };
        let mut rng = NoiseRng::new(0);
        assert!(matches!(
            noisy_linear(&x, &w, &NoiseSpec::thermal(), &c, &e, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nonpositive_energy_is_domain_error() {
        let w = Tensor::<f64>::filled(0.5, vec![2, 4]);
        let x = Tensor::<f64>::filled(0.5, vec![1, 4]);
        let e = Tensor::filled(0.0, vec![1]);
        let mut rng = NoiseRng::new(0);
        assert!(matches!(
            noisy_linear(&x, &w, &NoiseSpec::thermal(), &ctx(4), &e, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn thermal_empirical_variance_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::randn(&mut rng, vec![4, 16]);
        let x = Tensor::<f64>::randn(&mut rng, vec![5, 16]);
        let clean = x.matmul(&w.transpose().unwrap()).unwrap();
        let c = ctx(16);
        let spec = NoiseSpec::thermal();
        let e = Tensor::filled(1.0, vec![1]);
        let mut nrng = NoiseRng::new(11);
        let mut sq = 0.0;
        let mut count = 0usize;
        for _ in 0..1000 {
            let y = noisy_linear(&x, &w, &spec, &c, &e, &mut nrng).unwrap();
            for (a, b) in y.data().iter().zip(clean.data()) {
                sq += (a - b) * (a - b);
                count += 1;
            }
        }
        let analytic = noise_std(&spec, &c, 1.0, None).unwrap().powi(2);
        let emp = sq / count as f64;
        assert!(
            (emp / analytic - 1.0).abs() < 0.05,
            "emp {emp} vs analytic {analytic}"
        );
    }

    #[test]
    fn shot_example_ten_photons() {
        // unit-norm operands, N = 100, E = 10 photons/MAC -> std = 1/sqrt(1000)
        let n = 100usize;
        let scale = 1.0 / (n as f64).sqrt();
        let w = Tensor::<f64>::filled(scale, vec![1, n]);
        let x = Tensor::<f64>::filled(scale, vec![1, n]);
        let spec = NoiseSpec::shot();
        let e = Tensor::filled(10.0 * crate::PHOTON_ENERGY_1550NM_J, vec![1]);
        let c = NoiseContext {
            n,
            weight_range: None,
            input_range: None,
            layer: 0,
        };
        let analytic = noise_std(&spec, &c, e.data()[0], Some((1.0, 1.0))).unwrap();
        assert_abs_diff_eq!(analytic, 1.0 / 1000f64.sqrt(), epsilon = 1e-9);
        let clean = x.matmul(&w.transpose().unwrap()).unwrap();
        let mut nrng = NoiseRng::new(21);
        let mut sq = 0.0;
        let trials = 20000;
        for _ in 0..trials {
            let y = noisy_linear(&x, &w, &spec, &c, &e, &mut nrng).unwrap();
            sq += (y.data()[0] - clean.data()[0]).powi(2);
        }
        let emp = (sq / trials as f64).sqrt();
        assert!((emp / analytic - 1.0).abs() < 0.02, "emp {emp}");
    }

    #[test]
    fn redundant_averaging_halves_std_at_k4() {
        let w = Tensor::<f64>::filled(0.5, vec![1, 8]);
        let x = Tensor::<f64>::filled(0.5, vec![1, 8]);
        let clean = x.matmul(&w.transpose().unwrap()).unwrap().data()[0];
        let spec = NoiseSpec::thermal();
        let c = ctx(8);
        let e = Tensor::filled(1.0, vec![1]);
        let mut nrng = NoiseRng::new(5);
        let mut var1 = 0.0;
        let mut var4 = 0.0;
        let trials = 20000;
        for _ in 0..trials {
            let y1 = simulate_redundant(&x, &w, &spec, &c, &e, 1, &mut nrng).unwrap();
            let y4 = simulate_redundant(&x, &w, &spec, &c, &e, 4, &mut nrng).unwrap();
            var1 += (y1.data()[0] - clean).powi(2);
            var4 += (y4.data()[0] - clean).powi(2);
        }
        let ratio = (var4 / var1).sqrt();
        assert!((ratio - 0.5).abs() < 0.03, "std ratio {ratio}");
    }

    #[test]
    fn redundancy_k_zero_is_error() {
        let w = Tensor::<f64>::filled(0.5, vec![1, 4]);
        let x = Tensor::<f64>::filled(0.5, vec![1, 4]);
        let e = Tensor::filled(1.0, vec![1]);
        let mut rng = NoiseRng::new(0);
        assert!(simulate_redundant(&x, &w, &NoiseSpec::thermal(), &ctx(4), &e, 0, &mut rng).is_err());
    }

    #[test]
    fn redundancy_for_energy_rounding() {
        assert_eq!(redundancy_for_energy(3.4, 1.0).unwrap(), 3);
        assert_eq!(redundancy_for_energy(0.2, 1.0).unwrap(), 1);
        assert_eq!(redundancy_for_energy(4.5, 1.0).unwrap(), 5);
        assert!(redundancy_for_energy(1.0, 0.0).is_err());
    }

    #[test]
    fn snap_energy_grid_and_ste() {
        use crate::tensor::Tape;
        let tape = Tape::new();
        let e = tape.leaf(vec![3.4, 0.2, 2.0], vec![3]).unwrap();
        let snapped = snap_energy(&e, 1.0);
        assert_eq!(snapped.data(), &[3.0, 1.0, 2.0]);
        let grads = snapped.sum_all().backward().unwrap();
        // straight-through except where the floor-at-one clamp binds
        assert_eq!(grads.wrt(&e).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn reparameterized_energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Tensor::<f64>::randn(&mut rng, vec![3, 8]);
        let x = Tensor::<f64>::randn(&mut rng, vec![2, 8]);
        let spec = NoiseSpec::thermal();
        let c = ctx(8);
        let loss_at = |log_e: f64, tape_grads: bool| -> (f64, Option<f64>) {
            use crate::tensor::Tape;
            let tape = Tape::new();
            let le = tape.leaf(vec![log_e], vec![1]).unwrap();
            let e = le.exp();
            let mut nrng = NoiseRng::new(77); // frozen draws
            let y = noisy_linear(&x, &w, &spec, &c, &e, &mut nrng).unwrap();
            let loss = y.mul(&y).unwrap().sum_all();
            let v = loss.item();
            if tape_grads {
                let grads = loss.backward().unwrap();
                (v, Some(grads.wrt(&le).unwrap()[0]))
            } else {
                (v, None)
            }
        };
        let (_, g) = loss_at(0.3, true);
        let h = 1e-5;
        let (fp, _) = loss_at(0.3 + h, false);
        let (fm, _) = loss_at(0.3 - h, false);
        let fd = (fp - fm) / (2.0 * h);
        let g = g.unwrap();
        assert!(
            ((g - fd) / fd.abs().max(1e-12)).abs() < 1e-5,
            "tape {g} vs fd {fd}"
        );
    }
}
