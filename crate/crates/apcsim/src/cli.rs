//! Command implementations behind the `apcsim` binary. Everything here is a
//! plain function over an [`ExperimentConfig`] so the commands are testable
//! without spawning processes. All artifacts embed the config hash and
//! contain no timestamps, so reruns are byte-identical.

use crate::bits::equivalence_experiment;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{train_reference_model, EvalMode, ModelGraph};
use crate::noise::NoiseSpec;
use crate::optim::{
    binary_search_min_energy, evaluate_alloc, trace_to_csv, train_alloc, AllocCheckpoint,
    EnergyAlloc, Granularity,
};
use crate::quant::RangeMode;
use crate::rng::NoiseRng;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Flag overrides shared by every subcommand.
#[derive(Debug, Default, Clone)]
pub struct RunOpts {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, opts: &RunOpts) {
    if let Some(s) = opts.seed {
        cfg.seed = s;
        cfg.optim.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = opts.threads {
        // a later duplicate init is fine; the first pool wins
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, hash: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), format!("# config {hash}\n{body}"))?;
    Ok(())
}

fn require_model(cfg: &ExperimentConfig) -> Result<ModelGraph<f64>> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a model path in the config".to_string()))?;
    ModelGraph::load(path)
}

/// Loads the model and calibrates it on the train split if the manifest
/// carries no calibration state.
fn model_calibrated(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
) -> Result<(ModelGraph<f64>, bool)> {
    let mut model = require_model(cfg)?;
    if model.is_calibrated() {
        Ok((model, false))
    } else {
        model.calibrate(train, &cfg.quant, cfg.eval_batch)?;
        Ok((model, true))
    }
}

fn uniform_alloc(model: &ModelGraph<f64>, cfg: &ExperimentConfig) -> Result<EnergyAlloc<f64>> {
    Ok(EnergyAlloc::init(model, Granularity::Uniform, cfg.optim.e_max)?.with_grid(cfg.optim.grid))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainReport {
    config_hash: String,
    seed: u64,
    preset: String,
    clean_accuracy: f64,
    n_mac_total: u64,
    model: String,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let (train, test) = cfg.load_splits::<f64>()?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let (mut model, acc) = train_reference_model(cfg.preset, &train, &test, &tc)?;
    model.calibrate(&train, &cfg.quant, cfg.eval_batch)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let manifest = cfg.out_dir.join("model.json");
    model.save(&manifest)?;
    write_json(
        &cfg.out_dir,
        "train_metrics.json",
        &TrainReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            preset: format!("{:?}", cfg.preset).to_lowercase(),
            clean_accuracy: acc,
            n_mac_total: model.n_mac_total()?,
            model: manifest.display().to_string(),
        },
    )?;
    cfg.write_resolved(&cfg.out_dir)
}

#[derive(Serialize)]
struct CalibrateReport {
    config_hash: String,
    model: String,
    layers: Vec<CalibrateRow>,
}

#[derive(Serialize)]
struct CalibrateRow {
    layer: usize,
    kind: String,
    input: Option<(f64, f64)>,
    output: Option<(f64, f64)>,
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<()> {
    let (train, _) = cfg.load_splits::<f64>()?;
    let mut model = require_model(cfg)?;
    model.calibrate(&train, &cfg.quant, cfg.eval_batch)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let manifest = cfg.out_dir.join("model.calibrated.json");
    model.save(&manifest)?;
    let layers = model
        .calib
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.as_ref().map(|c| CalibrateRow {
                layer: i,
                kind: model.layers[i].kind_name().to_string(),
                input: c.input.as_ref().map(|r| (r.x_min, r.x_max)),
                output: c.output.as_ref().map(|r| (r.x_min, r.x_max)),
            })
        })
        .collect();
    write_json(
        &cfg.out_dir,
        "calibrate.json",
        &CalibrateReport {
            config_hash: cfg.hash(),
            model: manifest.display().to_string(),
            layers,
        },
    )?;
    cfg.write_resolved(&cfg.out_dir)
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    seed: u64,
    clean_accuracy: f64,
    quantized_accuracy: f64,
    noisy_accuracy: f64,
    total_energy: f64,
    energy_per_mac: f64,
    photons_per_mac: Option<f64>,
    calibrated_on_the_fly: bool,
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    alloc_path: Option<&Path>,
    uniform_energy_per_mac: Option<f64>,
) -> Result<()> {
    let (train, test) = cfg.load_splits::<f64>()?;
    let (model, fresh_calib) = model_calibrated(cfg, &train)?;
    let alloc = match (alloc_path, uniform_energy_per_mac) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let ckpt: AllocCheckpoint = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ckpt.to_alloc::<f64>()?
        }
        (None, Some(e)) => {
            if !(e > 0.0) {
                return Err(Error::Config("uniform energy must be positive".to_string()));
            }
            let total = model.n_mac_total()? as f64;
            EnergyAlloc::init(&model, Granularity::Uniform, e * total)?.with_grid(cfg.optim.grid)
        }
        (None, None) => uniform_alloc(&model, cfg)?,
    };
    let mut rng = NoiseRng::new(cfg.seed);
    let clean = model.evaluate(&test, &EvalMode::Clean, &mut rng, cfg.eval_batch)?;
    let quant = model.evaluate(&test, &EvalMode::Quantized, &mut rng, cfg.eval_batch)?;
    let noisy = evaluate_alloc(
        &model,
        &test,
        &cfg.noise,
        &alloc,
        cfg.seed,
        cfg.optim.eval_passes,
        cfg.eval_batch,
    )?;
    let photons = match cfg.noise {
        NoiseSpec::Shot {
            photon_energy_j, ..
        } => Some(alloc.photons_per_mac(photon_energy_j)),
        _ => None,
    };
    write_json(
        &cfg.out_dir,
        "eval.json",
        &EvalReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            clean_accuracy: clean,
            quantized_accuracy: quant,
            noisy_accuracy: noisy,
            total_energy: alloc.total_energy(),
            energy_per_mac: alloc.total_energy() / alloc.total_macs(),
            photons_per_mac: photons,
            calibrated_on_the_fly: fresh_calib,
        },
    )?;
    cfg.write_resolved(&cfg.out_dir)
}

#[derive(Serialize)]
struct NoiseBitsSummary {
    config_hash: String,
    noisy_accuracy: f64,
    lowbit_accuracy: f64,
    baseline_accuracy: f64,
    average_bits: f64,
    average_bits_mac_weighted: f64,
}

pub fn cmd_noise_bits(cfg: &ExperimentConfig) -> Result<()> {
    let (train, test) = cfg.load_splits::<f64>()?;
    let (model, _) = model_calibrated(cfg, &train)?;
    let alloc = uniform_alloc(&model, cfg)?;
    let res = equivalence_experiment(&model, &test, &cfg.noise, &alloc, cfg.seed, cfg.eval_batch)?;
    write_csv(&cfg.out_dir, "noise_bits.csv", &cfg.hash(), &res.report.to_csv())?;
    write_json(
        &cfg.out_dir,
        "noise_bits.json",
        &NoiseBitsSummary {
            config_hash: cfg.hash(),
            noisy_accuracy: res.noisy_accuracy,
            lowbit_accuracy: res.lowbit_accuracy,
            baseline_accuracy: res.baseline_accuracy,
            average_bits: res.report.average_bits,
            average_bits_mac_weighted: res.report.average_bits_mac_weighted,
        },
    )?;
    cfg.write_resolved(&cfg.out_dir)
}

pub fn cmd_optimize(cfg: &ExperimentConfig) -> Result<()> {
    let (train, _) = cfg.load_splits::<f64>()?;
    let (model, _) = model_calibrated(cfg, &train)?;
    let mut ocfg = cfg.optim.clone();
    ocfg.seed = cfg.seed;
    let (alloc, trace) = train_alloc(&model, &train, &cfg.noise, &ocfg, cfg.granularity)?;
    write_json(
        &cfg.out_dir,
        "alloc.json",
        &AllocCheckpoint::from_alloc(&alloc, cfg.hash(), cfg.seed),
    )?;
    write_csv(&cfg.out_dir, "trace.csv", &cfg.hash(), &trace_to_csv(&trace))?;
    cfg.write_resolved(&cfg.out_dir)
}

#[derive(Serialize)]
struct SearchArm {
    granularity: String,
    feasible: bool,
    e_star: f64,
    energy_per_mac: f64,
    accuracy: f64,
    improvement_pct: f64,
}

#[derive(Serialize)]
struct SearchReport {
    config_hash: String,
    seed: u64,
    baseline_accuracy: f64,
    accuracy_floor: f64,
    arms: Vec<SearchArm>,
}

/// Runs the uniform, per-layer, and per-channel arms; returns whether every
/// arm found a feasible budget.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<bool> {
    let (train, test) = cfg.load_splits::<f64>()?;
    let (model, _) = model_calibrated(cfg, &train)?;
    let mut rng = NoiseRng::new(cfg.seed);
    let clean = model.evaluate(&test, &EvalMode::Clean, &mut rng, cfg.eval_batch)?;
    let quant = model.evaluate(&test, &EvalMode::Quantized, &mut rng, cfg.eval_batch)?;
    // measure the budget against the 8-bit baseline when quantization alone
    // already costs more than a point
    let baseline = if clean - quant > 0.01 { quant } else { clean };
    let floor = baseline - cfg.degradation_budget / 100.0;
    let mut ocfg = cfg.optim.clone();
    ocfg.seed = cfg.seed;
    let mut arms = Vec::new();
    let mut candidates: Vec<EnergyAlloc<f64>> = Vec::new();
    let mut uniform_e_star = None;
    let mut all_feasible = true;
    for g in [
        Granularity::Uniform,
        Granularity::PerLayer,
        Granularity::PerChannel,
    ] {
        let out =
            binary_search_min_energy(&model, &train, &test, &cfg.noise, &ocfg, floor, g, &candidates)?;
        all_feasible &= out.feasible;
        if g == Granularity::Uniform && out.feasible {
            uniform_e_star = Some(out.e_star);
        }
        let improvement = match (uniform_e_star, out.feasible) {
            (Some(u), true) => (1.0 - out.e_star / u) * 100.0,
            _ => 0.0,
        };
        arms.push(SearchArm {
            granularity: g.name().to_string(),
            feasible: out.feasible,
            e_star: out.e_star,
            energy_per_mac: out.e_star / model.n_mac_total()? as f64,
            accuracy: out.accuracy,
            improvement_pct: improvement,
        });
        if let Some(a) = out.alloc {
            candidates.push(a);
        }
    }
    let noise_kind = match cfg.noise {
        NoiseSpec::Thermal { .. } => "thermal",
        NoiseSpec::Weight { .. } => "weight",
        NoiseSpec::Shot { .. } => "shot",
    };
    let mut csv = String::from("noise,arm,e_star,energy_per_mac,accuracy,improvement_pct\n");
    for a in &arms {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            noise_kind, a.granularity, a.e_star, a.energy_per_mac, a.accuracy, a.improvement_pct
        ));
    }
    write_csv(&cfg.out_dir, "search.csv", &cfg.hash(), &csv)?;
    write_json(
        &cfg.out_dir,
        "search.json",
        &SearchReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            baseline_accuracy: baseline,
            accuracy_floor: floor,
            arms,
        },
    )?;
    cfg.write_resolved(&cfg.out_dir)?;
    Ok(all_feasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    SigmaT,
    Percentile,
    EUniform,
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_t" => Ok(SweepVariable::SigmaT),
            "percentile" => Ok(SweepVariable::Percentile),
            "e_uniform" => Ok(SweepVariable::EUniform),
            other => Err(Error::Config(format!(
                "unknown sweep variable {other:?} (expected sigma_t, percentile, or e_uniform)"
            ))),
        }
    }
}

pub fn cmd_sweep(cfg: &ExperimentConfig, variable: SweepVariable, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".to_string()));
    }
    let (train, test) = cfg.load_splits::<f64>()?;
    let (model, _) = model_calibrated(cfg, &train)?;
    let quant_acc =
        model.evaluate(&test, &EvalMode::Quantized, &mut NoiseRng::new(cfg.seed), cfg.eval_batch)?;
    let name = match variable {
        SweepVariable::SigmaT => "sigma_t",
        SweepVariable::Percentile => "percentile",
        SweepVariable::EUniform => "e_uniform",
    };
    let mut csv = format!("{name},noisy_accuracy,baseline_accuracy\n");
    for &v in grid {
        let acc = match variable {
            SweepVariable::SigmaT => {
                if !matches!(cfg.noise, NoiseSpec::Thermal { .. }) {
                    return Err(Error::Config(
                        "sigma_t sweeps need a thermal noise spec".to_string(),
                    ));
                }
                let spec = NoiseSpec::Thermal { sigma_t: v };
                let alloc = uniform_alloc(&model, cfg)?;
                evaluate_alloc(&model, &test, &spec, &alloc, cfg.seed, cfg.optim.eval_passes, cfg.eval_batch)?
            }
            SweepVariable::Percentile => {
                let mut qcfg = cfg.quant.clone();
                qcfg.range_mode = RangeMode::Percentile { p: v };
                qcfg.validate().map_err(|e| Error::Config(e.to_string()))?;
                let mut m = require_model(cfg)?;
                m.calibrate(&train, &qcfg, cfg.eval_batch)?;
                let alloc = uniform_alloc(&m, cfg)?;
                evaluate_alloc(&m, &test, &cfg.noise, &alloc, cfg.seed, cfg.optim.eval_passes, cfg.eval_batch)?
            }
            SweepVariable::EUniform => {
                if !(v > 0.0) {
                    return Err(Error::Config("e_uniform grid must be positive".to_string()));
                }
                let total = model.n_mac_total()? as f64;
                let alloc = EnergyAlloc::init(&model, Granularity::Uniform, v * total)?
                    .with_grid(cfg.optim.grid);
                evaluate_alloc(&model, &test, &cfg.noise, &alloc, cfg.seed, cfg.optim.eval_passes, cfg.eval_batch)?
            }
        };
        csv.push_str(&format!("{v},{acc},{quant_acc}\n"));
    }
    write_csv(&cfg.out_dir, "sweep.csv", &cfg.hash(), &csv)?;
    cfg.write_resolved(&cfg.out_dir)
}
