//! Regenerates the bundled study files under `fixtures/`.
//!
//! cargo run -p mewlw-core --example make_fixtures -- fixtures

use std::fs::File;
use std::path::PathBuf;

use mewlw_core::data::{write_study, Role, StudyDataset, Time};
use mewlw_core::sim::{simulate_dataset, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn without_truth(data: &StudyDataset) -> StudyDataset {
    let mut out = data.clone();
    for s in &mut out.subjects {
        for e in &mut s.events {
            e.true_status = None;
        }
    }
    out
}

fn main() -> mewlw_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir)?;
    let config = SimConfig { theta: 0.5, ..SimConfig::default() };
    let mut rng = ChaCha20Rng::seed_from_u64(20240531);
    let main = simulate_dataset(&config, 200, "m", 0, Role::Main, &mut rng)?;
    let valid = simulate_dataset(&config, 50, "v", 0, Role::Validation, &mut rng)?;
    write_study(&without_truth(&main), File::create(dir.join("evs_main.csv"))?)?;
    write_study(&valid, File::create(dir.join("evs_valid.csv"))?)?;

    // internal validation: the first 50 main subjects with their true status
    let ids = main.subjects[..50].iter().map(|s| s.id.as_str()).collect();
    let internal = StudyDataset { role: Role::Validation, ..main.filter_ids(&ids, true) };
    write_study(&internal, File::create(dir.join("ivs_valid.csv"))?)?;

    // reference study for an external Cox fit: a second, continuous
    // covariate and staggered censoring
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut reference = simulate_dataset(&config, 120, "r", 0, Role::Validation, &mut rng)?;
    for s in &mut reference.subjects {
        let x = (rng.random_range(-100..=100) as f64) / 100.0;
        let censor = Time([4, 6, 7][rng.random_range(0..3)]);
        for e in &mut s.events {
            e.censor = censor;
            for z in &mut e.covariates {
                z.push(x);
            }
        }
    }
    write_study(&reference, File::create(dir.join("reference_study.csv"))?)?;
    Ok(())
}
