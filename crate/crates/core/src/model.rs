//! Domain types and the probability kernel of the multi-rubric cumulative
//! probit model.
//!
//! A rating `Z = k` is the cell of a latent utility `Y ~ N(μ, 1)` under the
//! user's rubric: `θ_{k-1} < Y < θ_k` with `θ_0 = -∞` and `θ_K = +∞`. Users
//! share a finite set of rubrics through a latent class assignment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::spatial::SpatialBasis;

/// User scale of the latent factors. The closed-form quality summaries
/// assume it is exactly one.
pub const USER_FACTOR_SCALE: f64 = 1.0;

/// One observed rating. Indices are dense and 0-based; `category` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub item: usize,
    pub user: usize,
    pub category: usize,
}

/// Sparse set of observed ratings with both inverse indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsDataset {
    categories: usize,
    items: usize,
    users: usize,
    entries: Vec<Rating>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
}

impl RatingsDataset {
    pub fn new(categories: usize, items: usize, users: usize, entries: Vec<Rating>) -> Result<Self> {
        if categories < 2 {
            return Err(Error::Data(format!("need at least 2 categories, got {categories}")));
        }
        let mut by_user = vec![Vec::new(); users];
        let mut by_item = vec![Vec::new(); items];
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (idx, r) in entries.iter().enumerate() {
            if r.category < 1 || r.category > categories {
                return Err(Error::CategoryRange { k: r.category, categories });
            }
            if r.item >= items || r.user >= users {
                return Err(Error::Data(format!(
                    "rating {idx} references item {} / user {} outside {items} x {users}",
                    r.item, r.user
                )));
            }
            if !seen.insert((r.item, r.user)) {
                return Err(Error::Data(format!("duplicate pair (item {}, user {})", r.item, r.user)));
            }
            by_user[r.user].push(idx);
            by_item[r.item].push(idx);
        }
        Ok(Self { categories, items, users, entries, by_user, by_item })
    }

    /// Keeps the listed entries, preserving the item/user index space.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let entries = keep.iter().map(|&j| self.entries[j]).collect();
        Self::new(self.categories, self.items, self.users, entries)
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn num_items(&self) -> usize {
        self.items
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    /// Entry indices of the ratings given by `user`.
    pub fn user_entries(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    /// Entry indices of the ratings received by `item`.
    pub fn item_entries(&self, item: usize) -> &[usize] {
        &self.by_item[item]
    }

    /// Overwrites the rating of one entry (used when ratings are regenerated
    /// from the model).
    pub(crate) fn set_category(&mut self, entry: usize, category: usize) {
        debug_assert!(category >= 1 && category <= self.categories);
        self.entries[entry].category = category;
    }

    /// Rating counts per category (index 0 is category 1).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.categories];
        for r in &self.entries {
            h[r.category - 1] += 1;
        }
        h
    }
}

/// Per-item covariates and longitude/latitude locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTable {
    dim: usize,
    covariates: Vec<f64>,
    locations: Vec<[f64; 2]>,
}

impl ItemTable {
    /// `covariates` holds one row per item; rows may be empty (p = 0).
    pub fn new(locations: Vec<[f64; 2]>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        let n = locations.len();
        if covariates.len() != n {
            return Err(Error::Data(format!("{} covariate rows for {n} item locations", covariates.len())));
        }
        let dim = covariates.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * dim);
        for (i, row) in covariates.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Data(format!("item {i} has {} covariates, expected {dim}", row.len())));
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().any(|v| !v.is_finite()) || locations.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
            return Err(Error::Data("item table contains non-finite values".into()));
        }
        let table = Self { dim, covariates: flat, locations };
        if n > 1 {
            for j in 0..dim {
                let first = table.covariate(0)[j];
                if (1..n).all(|i| table.covariate(i)[j] == first) {
                    return Err(Error::Data(format!(
                        "covariate column {j} is constant and confounded with the break-points"
                    )));
                }
            }
        }
        Ok(table)
    }

    /// Locations only, no covariates.
    pub fn from_locations(locations: Vec<[f64; 2]>) -> Self {
        Self { dim: 0, covariates: Vec::new(), locations }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.dim
    }

    pub fn covariate(&self, item: usize) -> &[f64] {
        &self.covariates[item * self.dim..(item + 1) * self.dim]
    }

    pub fn location(&self, item: usize) -> [f64; 2] {
        self.locations[item]
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    /// Centers and scales every covariate column to mean 0, sd 1.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n < 2 {
            return;
        }
        for j in 0..self.dim {
            let mean = (0..n).map(|i| self.covariates[i * self.dim + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (self.covariates[i * self.dim + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            for i in 0..n {
                let v = &mut self.covariates[i * self.dim + j];
                *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
}

/// Ordered break-points `(θ_1, …, θ_{K-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    breaks: Vec<f64>,
}

impl Rubric {
    pub fn new(breaks: Vec<f64>) -> Result<Self> {
        if breaks.is_empty() {
            return Err(Error::Rubric("a rubric needs at least one break-point".into()));
        }
        if breaks.iter().any(|b| !b.is_finite()) {
            return Err(Error::Rubric(format!("non-finite break-point in {breaks:?}")));
        }
        if breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Rubric(format!("break-points not strictly increasing: {breaks:?}")));
        }
        Ok(Self { breaks })
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    /// Number of rating categories K.
    pub fn categories(&self) -> usize {
        self.breaks.len() + 1
    }

    /// `θ_{k-1}` for 1-based category `k`.
    #[inline]
    pub fn lower(&self, k: usize) -> f64 {
        if k <= 1 {
            f64::NEG_INFINITY
        } else {
            self.breaks[k - 2]
        }
    }

    /// `θ_k` for 1-based category `k`.
    #[inline]
    pub fn upper(&self, k: usize) -> f64 {
        if k > self.breaks.len() {
            f64::INFINITY
        } else {
            self.breaks[k - 1]
        }
    }

    /// The category whose cell contains `y`.
    pub fn category_of(&self, y: f64) -> usize {
        1 + self.breaks.partition_point(|&b| b <= y)
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self { breaks: self.breaks.iter().map(|b| b + c).collect() }
    }

    /// Cell probability without range checks; `k` must be in `1..=K`.
    #[inline]
    pub fn cell_mass(&self, k: usize, mu: f64) -> f64 {
        normal::interval_mass(self.lower(k) - mu, self.upper(k) - mu)
    }

    /// Log cell probability without range checks.
    #[inline]
    pub fn ln_cell_mass(&self, k: usize, mu: f64) -> f64 {
        normal::ln_interval_mass(self.lower(k) - mu, self.upper(k) - mu)
    }
}

/// `Φ(θ_k − μ) − Φ(θ_{k−1} − μ)`.
pub fn cell_probability(rubric: &Rubric, k: usize, mu: f64) -> Result<f64> {
    let categories = rubric.categories();
    if k < 1 || k > categories {
        return Err(Error::CategoryRange { k, categories });
    }
    Ok(rubric.cell_mass(k, mu))
}

/// Rule for choosing the number of retained spatial basis functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankRule {
    Fixed(usize),
    /// Smallest rank whose squared-eigenvalue share reaches the fraction.
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Number of rubrics M.
    pub rubrics: usize,
    /// Latent factor dimension L.
    pub factors: usize,
    /// Dirichlet total mass κ; each component gets κ/M.
    pub concentration: f64,
    /// Prior scale σ_θ of the break-points.
    pub rubric_scale: f64,
    /// Covariogram bandwidth ρ.
    pub bandwidth: f64,
    pub rank: RankRule,
    /// Prior precision of the covariate coefficients; zero is the flat prior.
    pub coefficient_precision: f64,
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Sweeps between Laplace proposal rebuilds.
    pub proposal_refresh: usize,
    /// Keep user/item factors in each retained draw.
    pub store_factors: bool,
    /// Sweeps between full predictor recomputations (0 disables).
    pub coherence_check: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            rubrics: 20,
            factors: 0,
            concentration: 1.0,
            rubric_scale: 1.0,
            bandwidth: 1000.0,
            rank: RankRule::Fraction(0.99),
            coefficient_precision: 0.0,
            warmup: 4000,
            samples: 4000,
            thin: 4,
            seed: 0,
            proposal_refresh: 50,
            store_factors: true,
            coherence_check: 100,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rubrics < 1 {
            return bad("rubrics must be at least 1");
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration must be positive");
        }
        if !(self.rubric_scale > 0.0 && self.rubric_scale.is_finite()) {
            return bad("rubric_scale must be positive");
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if !(self.coefficient_precision >= 0.0 && self.coefficient_precision.is_finite()) {
            return bad("coefficient_precision must be non-negative");
        }
        if let RankRule::Fraction(f) = self.rank {
            if !(f > 0.0 && f <= 1.0) {
                return bad("rank fraction must lie in (0, 1]");
            }
        }
        if self.thin < 1 {
            return bad("thin must be at least 1");
        }
        if self.proposal_refresh < 1 {
            return bad("proposal_refresh must be at least 1");
        }
        Ok(())
    }

    /// Per-component Dirichlet shape a = κ/M.
    pub fn dirichlet_shape(&self) -> f64 {
        self.concentration / self.rubrics as f64
    }
}

/// Row-major matrix of latent factors, one row per user or item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    dim: usize,
    data: Vec<f64>,
}

impl Factors {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::State(format!("factor row of length {} (expected {dim})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positive scale parameters (standard deviations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// σ_b
    pub item_effect: f64,
    /// σ_β
    pub item_factor: f64,
    /// σ_η
    pub spatial: f64,
}

/// One realization of every latent variable and parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Rubric index per user, 0-based.
    pub classes: Vec<usize>,
    /// Latent utilities, aligned with the dataset entries.
    pub utilities: Vec<f64>,
    pub rubrics: Vec<Rubric>,
    pub weights: Vec<f64>,
    pub user_factors: Factors,
    pub item_factors: Factors,
    /// γ
    pub coefficients: Vec<f64>,
    /// b
    pub item_effects: Vec<f64>,
    /// η
    pub basis_coefs: Vec<f64>,
    pub scales: Scales,
}

impl ModelState {
    pub fn num_rubrics(&self) -> usize {
        self.rubrics.len()
    }

    /// Checks every structural invariant against `data`.
    pub fn validate(&self, data: &RatingsDataset) -> Result<()> {
        let m = self.rubrics.len();
        if m == 0 || self.weights.len() != m {
            return Err(Error::State(format!("{} weights for {m} rubrics", self.weights.len())));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::State("negative mixture weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::State(format!("mixture weights sum to {total}")));
        }
        for r in &self.rubrics {
            if r.categories() != data.categories() {
                return Err(Error::State("rubric length does not match the category count".into()));
            }
            Rubric::new(r.breaks().to_vec()).map_err(|e| Error::State(e.to_string()))?;
        }
        if self.classes.len() != data.num_users() || self.classes.iter().any(|&c| c >= m) {
            return Err(Error::State("class assignments out of range".into()));
        }
        if self.item_effects.len() != data.num_items() {
            return Err(Error::State("item effect length mismatch".into()));
        }
        if self.utilities.len() != data.len() {
            return Err(Error::State("utility length mismatch".into()));
        }
        for (idx, (r, &y)) in data.entries().iter().zip(&self.utilities).enumerate() {
            let rubric = &self.rubrics[self.classes[r.user]];
            if !(rubric.lower(r.category) < y && y < rubric.upper(r.category)) {
                return Err(Error::State(format!(
                    "utility {y} of entry {idx} lies outside the cell of category {}",
                    r.category
                )));
            }
        }
        let s = self.scales;
        if !(s.item_effect > 0.0 && s.item_factor > 0.0 && s.spatial > 0.0) {
            return Err(Error::State("scale parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `xᵢᵀγ + αᵤᵀβᵢ + ψ(sᵢ)ᵀη + bᵢ`.
pub fn linear_predictor(
    state: &ModelState,
    basis: &SpatialBasis,
    items: &ItemTable,
    item: usize,
    user: usize,
) -> Result<f64> {
    if state.coefficients.len() != items.covariate_dim() {
        return Err(Error::Config(format!(
            "{} coefficients for {} covariates",
            state.coefficients.len(),
            items.covariate_dim()
        )));
    }
    if state.basis_coefs.len() != basis.rank() {
        return Err(Error::Config(format!("{} basis coefficients for rank {}", state.basis_coefs.len(), basis.rank())));
    }
    if state.user_factors.dim() != state.item_factors.dim() {
        return Err(Error::Config("user and item factor dimensions differ".into()));
    }
    Ok(predictor_unchecked(state, basis, items, item, user))
}

#[inline]
pub(crate) fn predictor_unchecked(
    state: &ModelState,
    basis: &SpatialBasis,
    items: &ItemTable,
    item: usize,
    user: usize,
) -> f64 {
    let fixed = dot(items.covariate(item), &state.coefficients);
    let interaction = if state.user_factors.dim() == 0 {
        0.0
    } else {
        dot(state.user_factors.row(user), state.item_factors.row(item))
    };
    let spatial = dot(basis.row(item), &state.basis_coefs);
    fixed + interaction + spatial + state.item_effects[item]
}

/// Σ log w over the observed ratings; `-∞` when some cell has zero mass.
pub fn observed_data_loglik(
    state: &ModelState,
    data: &RatingsDataset,
    items: &ItemTable,
    basis: &SpatialBasis,
) -> Result<f64> {
    state.validate_shapes(data)?;
    let mut total = 0.0;
    for r in data.entries() {
        let mu = linear_predictor(state, basis, items, r.item, r.user)?;
        total += state.rubrics[state.classes[r.user]].ln_cell_mass(r.category, mu);
    }
    Ok(total)
}

impl ModelState {
    fn validate_shapes(&self, data: &RatingsDataset) -> Result<()> {
        if self.classes.len() != data.num_users() || self.item_effects.len() != data.num_items() {
            return Err(Error::State("state does not match the dataset dimensions".into()));
        }
        if self.classes.iter().any(|&c| c >= self.rubrics.len()) {
            return Err(Error::State("class assignment out of range".into()));
        }
        Ok(())
    }
}

/// Order statistics of K−1 iid `N(0, σ_θ²)` draws.
pub fn sample_rubric_prior<R: Rng + ?Sized>(categories: usize, scale: f64, rng: &mut R) -> Rubric {
    assert!(categories >= 2 && scale > 0.0);
    loop {
        let mut breaks: Vec<f64> =
            (0..categories - 1).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        breaks.sort_by(f64::total_cmp);
        // ties have probability zero but are not representable as a rubric
        if let Ok(r) = Rubric::new(breaks) {
            return r;
        }
    }
}

/// Log density of the order-statistics prior (up to the K−1! constant).
pub fn ln_rubric_prior(breaks: &[f64], scale: f64) -> f64 {
    if breaks.windows(2).any(|w| w[0] >= w[1]) {
        return f64::NEG_INFINITY;
    }
    breaks.iter().map(|b| normal::ln_pdf(b / scale) - scale.ln()).sum()
}
