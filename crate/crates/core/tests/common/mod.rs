#![allow(dead_code)]

use mewlw_core::data::{load_study, Role, Schema, StudyDataset};
use mewlw_core::me_model::{fit_me_model, MeModelFit, MeModelSpec, PredictorSet};
use mewlw_core::sim::{simulate_dataset, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn load(name: &str, role: Role) -> StudyDataset {
    load_study(fixture(name), role, &Schema::default()).expect("fixture loads")
}

/// Simulated study under the default generating model, true outcomes kept.
pub fn simulated(n: usize, seed: u64, role: Role) -> StudyDataset {
    let config = SimConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    simulate_dataset(&config, n, "s", 0, role, &mut rng).expect("simulation")
}

pub fn standard_me(validation: &StudyDataset) -> MeModelFit {
    let spec = MeModelSpec::uniform(PredictorSet::standard(), validation.n_events);
    fit_me_model(validation, &spec).expect("error model fits")
}

/// Largest elementwise difference relative to the largest reference entry.
pub fn rel_err(a: &nalgebra::DMatrix<f64>, reference: &nalgebra::DMatrix<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    (a - reference).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
}
