//! Retained chain output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Factors, ItemTable, Rubric, Scales};
use crate::spatial::SpatialBasis;

/// Projection of one retained state. Utilities are not kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// Sweep index (0-based, counting warmup).
    pub sweep: usize,
    pub classes: Vec<usize>,
    pub weights: Vec<f64>,
    pub rubrics: Vec<Rubric>,
    pub coefficients: Vec<f64>,
    pub item_effects: Vec<f64>,
    pub basis_coefs: Vec<f64>,
    pub scales: Scales,
    pub user_factors: Option<Factors>,
    pub item_factors: Option<Factors>,
    /// Observed-data log-likelihood of the training ratings.
    pub loglik: f64,
}

impl Draw {
    /// Number of latent factors, zero when none are stored.
    pub fn factor_dim(&self) -> usize {
        self.item_factors.as_ref().map_or(0, Factors::dim)
    }

    /// `ξᵢ = xᵢᵀγ + ψ(sᵢ)ᵀη + bᵢ`, the predictor without the interaction.
    pub fn item_baseline(&self, items: &ItemTable, basis: &SpatialBasis, item: usize) -> f64 {
        dot(items.covariate(item), &self.coefficients)
            + dot(basis.row(item), &self.basis_coefs)
            + self.item_effects[item]
    }

    /// Item factor row; empty when L = 0.
    pub fn item_factor(&self, item: usize) -> &[f64] {
        match &self.item_factors {
            Some(f) if f.dim() > 0 => f.row(item),
            _ => &[],
        }
    }

    /// Full linear predictor. Fails when the chain ran with factors but did
    /// not store them.
    pub fn predictor(&self, items: &ItemTable, basis: &SpatialBasis, item: usize, user: usize) -> Result<f64> {
        let base = self.item_baseline(items, basis, item);
        match (&self.user_factors, &self.item_factors) {
            (Some(a), Some(b)) if a.dim() > 0 => Ok(base + dot(a.row(user), b.row(item))),
            (Some(_), Some(_)) => Ok(base),
            _ => Err(Error::State("factors were not stored in this chain".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub seed: u64,
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
    pub rubrics: usize,
    pub factors: usize,
    pub categories: usize,
    /// Step-12 acceptance rate per rubric over the whole run.
    pub acceptance: Vec<f64>,
    /// Step-12 updates that fell back to a random walk.
    pub fallbacks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub meta: ChainMeta,
    pub draws: Vec<Draw>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.draws.first().map_or(0, |d| d.classes.len())
    }
}
