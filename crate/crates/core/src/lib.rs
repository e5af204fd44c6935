//! Multi-rubric spatial ordinal-ratings model: a cumulative probit in
//! which every user reads the latent utility scale through one of a finite
//! set of rubrics, fitted by Gibbs sampling.

pub mod analysis;
pub mod error;
pub mod io;
pub mod model;
pub mod normal;
pub mod sampler;
pub mod samples;
pub mod sim;
pub mod spatial;

pub use error::{Error, Result};
pub use io::{ingest, IngestFilter, RunManifest};
pub use model::{
    cell_probability, linear_predictor, observed_data_loglik, sample_rubric_prior, Factors, Hyperparameters, ItemTable,
    ModelState, RankRule, Rating, RatingsDataset, Rubric, Scales,
};
pub use sampler::{run_chain, Conditional, Sampler};
pub use samples::{ChainMeta, Draw, PosteriorSamples};
pub use sim::{
    generate_dataset, run_factor_recovery_study, run_tau_study, tv_distance, FactorStudyConfig, SimConfig,
    SimulatedData, TauStudyConfig,
};
pub use spatial::{build_basis, build_covariogram, select_rank, SpatialBasis};
