//! Energy-allocation learning: the penalized objective, Adam over
//! log-energies, and binary search for the minimum energy budget meeting an
//! accuracy floor. Also hosts the generic Adam used by the reference-model
//! trainer.

use crate::data::{batch_ranges, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{EvalMode, ModelGraph};
use crate::noise::{snap_energy, NoiseSpec};
use crate::num::Element;
use crate::rng::NoiseRng;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Adam with bias correction. State is per parameter group, indexed in the
/// order of `sizes` at construction.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr: T::from_f64_(lr),
            beta1: T::from_f64_(0.9),
            beta2: T::from_f64_(0.999),
            eps: T::from_f64_(1e-8),
            t: 0,
            m: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (g, (p, (m, v))) in grads
            .iter()
            .zip(params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Energy allocations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One shared energy for the whole network (the static-precision arm).
    Uniform,
    PerLayer,
    PerChannel,
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::Uniform => "uniform",
            Granularity::PerLayer => "per_layer",
            Granularity::PerChannel => "per_channel",
        }
    }
}

/// Learnable energy-per-MAC assignment. Energies live in log space, grouped
/// per noisy layer; the uniform granularity has a single shared group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyAlloc<T: Element> {
    pub granularity: Granularity,
    /// `log_e[g][i]`: log energy of entry `i` in group `g`.
    pub log_e: Vec<Vec<T>>,
    /// MACs per inference attributed to each entry; same shape as `log_e`.
    pub n_mac: Vec<Vec<f64>>,
    /// Group index for each noisy layer, in layer order.
    pub layer_groups: Vec<usize>,
    /// Energy quantum: energies are snapped to positive multiples of it.
    pub grid: Option<f64>,
}

fn snap_scalar(e: f64, unit: f64) -> f64 {
    ((e / unit).round().max(1.0)) * unit
}

impl<T: Element> EnergyAlloc<T> {
    /// Uniform split of `e_max` over all MACs: every entry starts at
    /// `e_max / total_macs`.
    pub fn init(model: &ModelGraph<T>, granularity: Granularity, e_max: f64) -> Result<Self> {
        if !(e_max > 0.0) {
            return Err(Error::domain("energy budget must be positive".to_string()));
        }
        let macs = model.n_mac()?;
        let noisy = model.noisy_layers();
        if noisy.is_empty() {
            return Err(Error::contract("model has no noisy layers".to_string()));
        }
        let total: f64 = macs.iter().sum::<u64>() as f64;
        let e0 = T::from_f64_((e_max / total).ln());
        let channels = model.channel_counts();
        let (log_e, n_mac, layer_groups) = match granularity {
            Granularity::Uniform => (
                vec![vec![e0]],
                vec![vec![total]],
                vec![0; noisy.len()],
            ),
            Granularity::PerLayer => (
                noisy.iter().map(|_| vec![e0]).collect(),
                noisy.iter().map(|&l| vec![macs[l] as f64]).collect(),
                (0..noisy.len()).collect(),
            ),
            Granularity::PerChannel => (
                channels.iter().map(|&c| vec![e0; c]).collect(),
                noisy
                    .iter()
                    .zip(&channels)
                    .map(|(&l, &c)| vec![macs[l] as f64 / c as f64; c])
                    .collect(),
                (0..noisy.len()).collect(),
            ),
        };
        Ok(EnergyAlloc {
            granularity,
            log_e,
            n_mac,
            layer_groups,
            grid: None,
        })
    }

    pub fn with_grid(mut self, unit: Option<f64>) -> Self {
        self.grid = unit;
        self
    }

    /// Energies per entry (grid-snapped when a grid is set).
    pub fn energies(&self) -> Vec<Vec<f64>> {
        self.log_e
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&le| {
                        let e = le.to_f64_().exp();
                        match self.grid {
                            Some(u) => snap_scalar(e, u),
                            None => e,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Σ over entries of energy · MACs.
    pub fn total_energy(&self) -> f64 {
        self.energies()
            .iter()
            .zip(&self.n_mac)
            .map(|(es, ns)| es.iter().zip(ns).map(|(e, n)| e * n).sum::<f64>())
            .sum()
    }

    pub fn total_macs(&self) -> f64 {
        self.n_mac.iter().map(|g| g.iter().sum::<f64>()).sum()
    }

    /// Mean photons per MAC at the given photon energy.
    pub fn photons_per_mac(&self, photon_energy_j: f64) -> f64 {
        self.total_energy() / self.total_macs() / photon_energy_j
    }

    /// Detached per-noisy-layer energy tensors for evaluation.
    pub fn layer_tensors(&self) -> Vec<Tensor<T>> {
        let es = self.energies();
        self.layer_groups
            .iter()
            .map(|&g| {
                let v: Vec<T> = es[g].iter().map(|&e| T::from_f64_(e)).collect();
                let n = v.len();
                Tensor::from_vec(v, vec![n]).unwrap()
            })
            .collect()
    }

    /// Rescales every energy by `factor` (shifts all log energies).
    pub fn rescale(&mut self, factor: f64) {
        let shift = T::from_f64_(factor.ln());
        for g in &mut self.log_e {
            for le in g.iter_mut() {
                *le += shift;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Penalty weight on the log total-energy hinge.
    pub lambda: f64,
    /// Energy budget (Σ E·n_mac units).
    pub e_max: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Energy quantum for grid-snapped (redundancy-coded) energies.
    pub grid: Option<f64>,
    /// Fraction of the training split used for allocation learning.
    pub train_fraction: f64,
    /// Stochastic evaluation passes averaged when scoring an allocation.
    pub eval_passes: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambda: 8.0,
            e_max: 1.0,
            lr: 0.01,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            grid: None,
            train_fraction: 0.04,
            eval_passes: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0
            || !(self.e_max > 0.0)
            || !(self.lr > 0.0)
            || self.batch_size == 0
            || !(self.train_fraction > 0.0 && self.train_fraction <= 1.0)
            || self.eval_passes == 0
            || matches!(self.grid, Some(u) if u <= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer config: {self:?}")));
        }
        Ok(())
    }
}

/// One evaluation of the penalized objective, with the tape leaves exposed
/// so callers can read gradients w.r.t. the log energies.
pub struct ObjectiveParts<T: Element> {
    pub loss: Tensor<T>,
    pub leaves: Vec<Tensor<T>>,
    pub nll: f64,
    pub penalty: f64,
    pub total_energy: f64,
}

/// Mean NLL of the batch under analog noise plus
/// `lambda * max(ln(Σ E·n_mac) - ln(e_max), 0)`, differentiable in the log
/// energies through the reparameterized noise and the hinge.
pub fn objective<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    alloc: &EnergyAlloc<T>,
    spec: &NoiseSpec,
    cfg: &OptimConfig,
    tape: &Tape<T>,
    rng: &mut NoiseRng,
) -> Result<ObjectiveParts<T>> {
    cfg.validate()?;
    let leaves: Vec<Tensor<T>> = alloc
        .log_e
        .iter()
        .map(|g| tape.leaf(g.clone(), vec![g.len()]))
        .collect::<Result<_>>()?;
    let group_e: Vec<Tensor<T>> = leaves
        .iter()
        .map(|l| {
            let e = l.exp();
            match alloc.grid {
                Some(u) => snap_energy(&e, T::from_f64_(u)),
                None => e,
            }
        })
        .collect();
    let mut total = Tensor::scalar(T::zero());
    for (e, n) in group_e.iter().zip(&alloc.n_mac) {
        let nm: Vec<T> = n.iter().map(|&v| T::from_f64_(v)).collect();
        let len = nm.len();
        let nt = Tensor::from_vec(nm, vec![len])?;
        total = total.add(&e.mul(&nt)?.sum_all())?;
    }
    let energies: Vec<Tensor<T>> = alloc
        .layer_groups
        .iter()
        .map(|&g| group_e[g].clone())
        .collect();
    let logits = model.forward(
        x,
        &EvalMode::Noisy {
            spec,
            energies: &energies,
        },
        rng,
    )?;
    let nll = logits.softmax_cross_entropy(labels)?;
    let penalty = total
        .ln()
        .add_scalar(T::from_f64_(-cfg.e_max.ln()))
        .relu()
        .scale(T::from_f64_(cfg.lambda));
    let loss = nll.add(&penalty)?;
    let lv = loss.item().to_f64_();
    if !lv.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            msg: format!(
                "objective is {lv}; energies per group: {:?}",
                alloc.energies()
            ),
        });
    }
    Ok(ObjectiveParts {
        nll: nll.item().to_f64_(),
        penalty: penalty.item().to_f64_(),
        total_energy: total.item().to_f64_(),
        loss,
        leaves,
    })
}

// ---------------------------------------------------------------------------
// Allocation training

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub nll: f64,
    pub penalty: f64,
    pub total_energy: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,nll,penalty,total_energy\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.nll, r.penalty, r.total_energy
        ));
    }
    out
}

/// Learns log energies with Adam on a seeded subset of `data`; model weights
/// stay frozen. On divergence the error message carries the last finite
/// allocation.
pub fn train_alloc<T: Element>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    spec: &NoiseSpec,
    cfg: &OptimConfig,
    granularity: Granularity,
) -> Result<(EnergyAlloc<T>, Vec<TraceRow>)> {
    cfg.validate()?;
    spec.validate()?;
    if spec.quantizes_operands() && !model.is_calibrated() {
        return Err(Error::contract(
            "model must be calibrated before allocation training".to_string(),
        ));
    }
    let n = ((data.len() as f64 * cfg.train_fraction).ceil() as usize).max(1);
    let subset = data.sample(n, cfg.seed)?;
    let mut alloc = EnergyAlloc::init(model, granularity, cfg.e_max)?.with_grid(cfg.grid);
    let sizes: Vec<usize> = alloc.log_e.iter().map(|g| g.len()).collect();
    let mut opt = Adam::<T>::new(cfg.lr, &sizes);
    let mut rng = NoiseRng::new(cfg.seed);
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(subset.len(), cfg.seed.wrapping_add(epoch as u64));
        for r in batch_ranges(subset.len(), cfg.batch_size) {
            let idx: Vec<usize> = order[r].to_vec();
            let (x, y) = subset.batch(&idx)?;
            let tape = Tape::new();
            let parts = match objective(model, &x, &y, &alloc, spec, cfg, &tape, &mut rng) {
                Ok(p) => p,
                Err(Error::Diverged { msg, .. }) => {
                    return Err(Error::Diverged {
                        step,
                        msg: format!(
                            "{msg}; last finite allocation: {}",
                            serde_json::to_string(&alloc.energies()).unwrap_or_default()
                        ),
                    })
                }
                Err(e) => return Err(e),
            };
            trace.push(TraceRow {
                step,
                nll: parts.nll,
                penalty: parts.penalty,
                total_energy: parts.total_energy,
            });
            let grads = parts.loss.backward()?;
            let gvecs: Vec<Vec<T>> = parts
                .leaves
                .iter()
                .map(|l| {
                    grads
                        .wrt(l)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![T::zero(); l.numel()])
                })
                .collect();
            opt.step(&mut alloc.log_e, &gvecs);
            step += 1;
        }
    }
    Ok((alloc, trace))
}

/// Accuracy of `model` under `spec` with the allocation's energies, averaged
/// over `passes` stochastic evaluations.
pub fn evaluate_alloc<T: Element>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    spec: &NoiseSpec,
    alloc: &EnergyAlloc<T>,
    seed: u64,
    passes: usize,
    batch_size: usize,
) -> Result<f64> {
    let energies = alloc.layer_tensors();
    let mode = EvalMode::Noisy {
        spec,
        energies: &energies,
    };
    let mut acc = 0.0;
    for p in 0..passes.max(1) {
        let mut rng = NoiseRng::new(seed.wrapping_add(p as u64));
        acc += model.evaluate(data, &mode, &mut rng, batch_size)?;
    }
    Ok(acc / passes.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Binary search over the energy budget

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub e_max: f64,
    pub accuracy: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T: Element> {
    pub feasible: bool,
    /// Minimal feasible budget, bracketed to 0.1% relative.
    pub e_star: f64,
    pub alloc: Option<EnergyAlloc<T>>,
    pub accuracy: f64,
    pub probes: Vec<ProbeRow>,
}

/// Smallest `e_max` whose allocation reaches `acc_floor` on `eval_data`.
///
/// Every probe scores the untrained uniform-split allocation, the trained
/// allocation (for non-uniform granularities), every `candidates` entry
/// rescaled to the probe budget, and the previous probe's winner rescaled
/// likewise, keeping the best. Passing a coarser arm's winner as a candidate
/// therefore makes finer-granularity results dominate coarser ones by
/// construction, and structure learned at one budget carries to the next.
#[allow(clippy::too_many_arguments)]
pub fn binary_search_min_energy<T: Element>(
    model: &ModelGraph<T>,
    train_data: &Dataset<T>,
    eval_data: &Dataset<T>,
    spec: &NoiseSpec,
    cfg: &OptimConfig,
    acc_floor: f64,
    granularity: Granularity,
    candidates: &[EnergyAlloc<T>],
) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    let mut probes = Vec::new();
    let eval_seed = cfg.seed ^ 0x5eed_ba5e;
    let warm: std::cell::RefCell<Option<EnergyAlloc<T>>> = std::cell::RefCell::new(None);
    let probe = |e_max: f64,
                 probes: &mut Vec<ProbeRow>|
     -> Result<Option<(EnergyAlloc<T>, f64)>> {
        let mut pool: Vec<EnergyAlloc<T>> = Vec::new();
        pool.push(EnergyAlloc::init(model, granularity, e_max)?.with_grid(cfg.grid));
        if granularity != Granularity::Uniform {
            let mut pcfg = cfg.clone();
            pcfg.e_max = e_max;
            let (mut trained, _) = train_alloc(model, train_data, spec, &pcfg, granularity)?;
            let total = trained.total_energy();
            if total > e_max {
                trained.rescale(e_max / total); // hard-enforce the budget
            }
            pool.push(trained);
        }
        for c in candidates.iter().chain(warm.borrow().iter()) {
            let mut scaled = c.clone();
            let total = scaled.total_energy();
            if total > 0.0 {
                scaled.rescale(e_max / total);
                pool.push(scaled);
            }
        }
        let mut best: Option<(EnergyAlloc<T>, f64)> = None;
        for a in pool {
            let acc = evaluate_alloc(model, eval_data, spec, &a, eval_seed, cfg.eval_passes, 64)?;
            if best.as_ref().map(|(_, b)| acc > *b).unwrap_or(true) {
                best = Some((a, acc));
            }
        }
        let (alloc, acc) = best.unwrap();
        *warm.borrow_mut() = Some(alloc.clone());
        let feasible = acc >= acc_floor;
        probes.push(ProbeRow {
            e_max,
            accuracy: acc,
            feasible,
        });
        Ok(feasible.then_some((alloc, acc)))
    };
    // grow until feasible
    let mut hi = cfg.e_max;
    let mut hi_result = probe(hi, &mut probes)?;
    let mut grow = 0;
    while hi_result.is_none() && grow < 20 {
        hi *= 4.0;
        hi_result = probe(hi, &mut probes)?;
        grow += 1;
    }
    let Some(mut best) = hi_result else {
        return Ok(SearchOutcome {
            feasible: false,
            e_star: hi,
            alloc: None,
            accuracy: probes.last().map(|p| p.accuracy).unwrap_or(0.0),
            probes,
        });
    };
    // shrink to find an infeasible lower edge
    let floor_e = hi * 1e-9;
    let mut lo = hi / 4.0;
    loop {
        if lo <= floor_e {
            // collapses to the bracket bottom (effectively noiseless)
            return Ok(SearchOutcome {
                feasible: true,
                e_star: lo,
                accuracy: best.1,
                alloc: Some(best.0),
                probes,
            });
        }
        match probe(lo, &mut probes)? {
            Some(r) => {
                hi = lo;
                best = r;
                lo /= 4.0;
            }
            None => break,
        }
    }
    // bisect [lo infeasible, hi feasible] to 0.1%
    while hi / lo > 1.001 {
        let mid = (lo * hi).sqrt();
        match probe(mid, &mut probes)? {
            Some(r) => {
                hi = mid;
                best = r;
            }
            None => lo = mid,
        }
    }
    Ok(SearchOutcome {
        feasible: true,
        e_star: hi,
        accuracy: best.1,
        alloc: Some(best.0),
        probes,
    })
}

/// On-disk allocation checkpoint: energies are materialized (grid-snapped)
/// and tagged with the producing seed and config hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    pub granularity: Granularity,
    pub energies: Vec<Vec<f64>>,
    pub n_mac: Vec<Vec<f64>>,
    pub layer_groups: Vec<usize>,
    pub grid: Option<f64>,
}

impl AllocCheckpoint {
    pub fn from_alloc<T: Element>(alloc: &EnergyAlloc<T>, config_hash: String, seed: u64) -> Self {
        AllocCheckpoint {
            config_hash,
            seed,
            granularity: alloc.granularity,
            energies: alloc.energies(),
            n_mac: alloc.n_mac.clone(),
            layer_groups: alloc.layer_groups.clone(),
            grid: alloc.grid,
        }
    }

    pub fn to_alloc<T: Element>(&self) -> Result<EnergyAlloc<T>> {
        if self.energies.len() != self.n_mac.len()
            || self
                .energies
                .iter()
                .zip(&self.n_mac)
                .any(|(e, n)| e.len() != n.len())
            || self.layer_groups.iter().any(|&g| g >= self.energies.len())
            || self
                .energies
                .iter()
                .flatten()
                .any(|&e| !(e > 0.0 && e.is_finite()))
        {
            return Err(Error::Config(
                "allocation checkpoint is inconsistent".to_string(),
            ));
        }
        Ok(EnergyAlloc {
            granularity: self.granularity,
            log_e: self
                .energies
                .iter()
                .map(|g| g.iter().map(|&e| T::from_f64_(e.ln())).collect())
                .collect(),
            n_mac: self.n_mac.clone(),
            layer_groups: self.layer_groups.clone(),
            grid: self.grid,
        })
    }
}
