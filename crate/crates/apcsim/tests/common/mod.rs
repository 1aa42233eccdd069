//! Shared fixtures. Tensors hold `Rc` internals and cannot sit in statics,
//! so each reference model is trained once, saved to a shared temp dir, and
//! reloaded per call.

use apcsim::data::synthetic_dataset;
use apcsim::model::{train_reference_model, ArchPreset, ModelGraph, TrainConfig};
use apcsim::quant::QuantSpec;
use apcsim::{Dataset64, Model64};
use std::path::PathBuf;
use std::sync::OnceLock;

pub struct Fixture {
    pub model: Model64,
    pub train: Dataset64,
    pub test: Dataset64,
}

fn workdir() -> &'static tempfile::TempDir {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("fixture dir"))
}

fn build(
    cell: &OnceLock<PathBuf>,
    preset: ArchPreset,
    name: &str,
    per_class_train: usize,
    per_class_test: usize,
) -> Fixture {
    let train = synthetic_dataset(per_class_train, 0, "train");
    let test = synthetic_dataset(per_class_test, 1, "test");
    let manifest = cell.get_or_init(|| {
        let tc = TrainConfig {
            min_accuracy: 0.9,
            ..TrainConfig::default()
        };
        let (mut model, _) =
            train_reference_model(preset, &train, &test, &tc).expect("fixture model trains");
        model
            .calibrate(&train, &QuantSpec::default(), 64)
            .expect("fixture model calibrates");
        let path = workdir().path().join(format!("{name}.json"));
        model.save(&path).expect("fixture model saves");
        path
    });
    Fixture {
        model: ModelGraph::load(manifest).expect("fixture model loads"),
        train,
        test,
    }
}

/// Trained, calibrated CNN on the full synthetic corpus.
pub fn cnn() -> Fixture {
    static CELL: OnceLock<PathBuf> = OnceLock::new();
    build(&CELL, ArchPreset::Cnn, "cnn", 200, 50)
}

/// Smaller MLP fixture for the optimizer-focused criteria.
pub fn mlp() -> Fixture {
    static CELL: OnceLock<PathBuf> = OnceLock::new();
    build(&CELL, ArchPreset::Mlp, "mlp", 60, 20)
}
