//! Fixtures shared by the criterion benches.

use multirubric::sim::{generate_dataset, SimConfig, SimulatedData};
use multirubric::Hyperparameters;

/// The rubric-similarity study dataset at τ = 0.5 with a small utility pool.
pub fn tau_fixture(seed: u64) -> SimulatedData {
    let mut sim = SimConfig::tau_study(0.5, seed).expect("valid τ");
    sim.pool_size = 200_000;
    generate_dataset(&sim).expect("generator")
}

/// The rank-recovery dataset with a small utility pool.
pub fn factor_fixture(seed: u64) -> SimulatedData {
    let mut sim = SimConfig::supplement(seed);
    sim.pool_size = 200_000;
    generate_dataset(&sim).expect("generator")
}

/// Fit settings used by the study drivers, without the chain length.
pub fn study_hyper(rubrics: usize, factors: usize) -> Hyperparameters {
    Hyperparameters {
        rubrics,
        factors,
        concentration: 1.0,
        warmup: 0,
        samples: 1,
        thin: 1,
        ..Hyperparameters::default()
    }
}
