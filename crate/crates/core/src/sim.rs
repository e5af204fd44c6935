//! Synthetic data from the hierarchical model and the two simulation
//! studies: rubric similarity (τ) and latent-factor rank recovery.

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{heldout_loglik, rubric_profile, HeldOut};
use crate::error::{Error, Result};
use crate::io::{seen_users, split_train_test};
use crate::model::RankRule;
use crate::model::{Factors, Hyperparameters, ItemTable, ModelState, Rating, RatingsDataset, Rubric, Scales};
use crate::normal;
use crate::sampler::run_chain;
use crate::samples::PosteriorSamples;
use crate::spatial::{build_basis, SpatialBasis};

/// Evenly spread ratings.
pub const P1: [f64; 5] = [0.2; 5];
/// Ratings concentrated on the middle three categories.
pub const P2: [f64; 5] = [0.0, 0.25, 0.5, 0.25, 0.0];
/// Harsh rater, used as the third rubric of the rank-recovery study.
pub const P3: [f64; 5] = [0.4, 0.3, 0.15, 0.1, 0.05];
/// Draws in the utility pool used to place break-points.
pub const DEFAULT_POOL: usize = 10_000_000;
/// Gap inserted between coincident break-points.
pub const BREAK_SPACING: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Config(format!("{p:?} is not a probability vector")));
    }
    Ok(())
}

/// Sorted latent-utility draws.
#[derive(Clone, Debug)]
pub struct UtilityPool(Vec<f64>);

impl UtilityPool {
    pub fn new(mut draws: Vec<f64>) -> Self {
        draws.sort_by(f64::total_cmp);
        Self(draws)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Empirical quantile `inf{x : F̂(x) ≥ c}`.
    pub fn quantile(&self, c: f64) -> f64 {
        let n = self.0.len();
        let idx = ((c * n as f64 - 1e-9).ceil() as usize).clamp(1, n) - 1;
        self.0[idx]
    }
}

/// Break-points at the pool quantiles of the cumulative masses of `p`.
/// Coincident quantiles (zero-mass categories) are pushed apart by
/// [`BREAK_SPACING`].
pub fn breakpoints_from_probs(p: &[f64], pool: &UtilityPool) -> Result<Rubric> {
    check_simplex(p)?;
    let smallest = p.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    let needed = (10.0 / smallest).ceil() as usize;
    if pool.len() < needed {
        return Err(Error::InsufficientPool { needed, got: pool.len() });
    }
    let mut cumulative = 0.0;
    let mut breaks = Vec::with_capacity(p.len() - 1);
    for &pk in &p[..p.len() - 1] {
        cumulative += pk;
        let mut q = pool.quantile(cumulative.min(1.0));
        if let Some(&prev) = breaks.last() {
            q = f64::max(q, prev + BREAK_SPACING);
        }
        breaks.push(q);
    }
    Rubric::new(breaks)
}

/// `τp₁ + (1−τ)p₂`.
pub fn tau_mixture(tau: f64, p1: &[f64], p2: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    if p1.len() != p2.len() {
        return Err(Error::Config("probability vectors differ in length".into()));
    }
    Ok(p1.iter().zip(p2).map(|(a, b)| tau * a + (1.0 - tau) * b).collect())
}

pub fn tau_rubric(tau: f64, p1: &[f64], p2: &[f64], pool: &UtilityPool) -> Result<Rubric> {
    breakpoints_from_probs(&tau_mixture(tau, p1, p2)?, pool)
}

/// Total variation between two category distributions, taken as the
/// summed absolute difference `Σ |p_k − q_k|` so that p₁ and p₂ sit 0.8
/// apart and the τ-mixture at `0.8(1 − τ)`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// How the generating rubrics are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RubricSpec {
    /// One probability vector per rubric, placed on the utility pool.
    Probabilities(Vec<Vec<f64>>),
    /// Explicit break-points.
    Breaks(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpatialSpec {
    None,
    /// Spectral basis of the item locations with η ~ N(0, variance·I).
    Spectral {
        bandwidth: f64,
        rank: usize,
        variance: f64,
    },
    /// Gaussian radial functions at knots drawn uniformly over the domain.
    Radial {
        knots: usize,
        bandwidth: f64,
        variance: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Missingness {
    /// Each pair observed independently with this probability.
    Density(f64),
    /// Exactly this many pairs, uniformly without replacement.
    Count(usize),
    /// Explicit (item, user) pairs.
    Pairs(Vec<(usize, usize)>),
}

/// Everything needed to generate one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub items: usize,
    pub users: usize,
    pub categories: usize,
    pub rubrics: RubricSpec,
    /// True ω.
    pub weights: Vec<f64>,
    pub spatial: SpatialSpec,
    /// σ_b, σ_β, σ_α.
    pub item_effect_sd: f64,
    pub item_factor_sd: f64,
    pub user_factor_sd: f64,
    pub factors: usize,
    /// True γ; its length sets the number of standard-normal covariates.
    pub coefficients: Vec<f64>,
    /// Sd of the latent utility around μ; 1 in the model.
    pub noise_sd: f64,
    pub missingness: Missingness,
    /// Longitude/latitude box `[lon_min, lon_max, lat_min, lat_max]`.
    pub domain: [f64; 4],
    pub pool_size: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Two rubrics built from `p₁` and `τp₁ + (1−τ)p₂`, no latent factors,
    /// spectral spatial field with Σ_η = 0.5·I.
    pub fn tau_study(tau: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            items: 300,
            users: 500,
            categories: 5,
            rubrics: RubricSpec::Probabilities(vec![P1.to_vec(), tau_mixture(tau, &P1, &P2)?]),
            weights: vec![0.5, 0.5],
            spatial: SpatialSpec::Spectral { bandwidth: 20.0, rank: 20, variance: 0.5 },
            item_effect_sd: 0.5,
            item_factor_sd: 0.0,
            user_factor_sd: 1.0,
            factors: 0,
            coefficients: Vec::new(),
            noise_sd: 1.0,
            missingness: Missingness::Count(8000),
            domain: [0.0, 1.0, 0.0, 1.0],
            pool_size: DEFAULT_POOL,
            seed,
        })
    }

    /// The rank-recovery setting: L = 4, σ_α = 2, σ_β = 5, σ_b = 3,
    /// η ~ N(0, 3I) on 20 radial functions, three equally weighted rubrics,
    /// 200 × 200 with 3981 ratings.
    pub fn supplement(seed: u64) -> Self {
        Self {
            items: 200,
            users: 200,
            categories: 5,
            rubrics: RubricSpec::Probabilities(vec![P1.to_vec(), P2.to_vec(), P3.to_vec()]),
            weights: vec![1.0 / 3.0; 3],
            spatial: SpatialSpec::Radial { knots: 20, bandwidth: 25.0, variance: 3.0 },
            item_effect_sd: 3.0,
            item_factor_sd: 5.0,
            user_factor_sd: 2.0,
            factors: 4,
            coefficients: Vec::new(),
            noise_sd: 1.0,
            missingness: Missingness::Count(3981),
            domain: [0.0, 1.0, 0.0, 1.0],
            pool_size: DEFAULT_POOL,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.items == 0 || self.users == 0 || self.categories < 2 {
            return bad("need at least one item, one user and two categories".into());
        }
        check_simplex(&self.weights)?;
        let m = self.weights.len();
        match &self.rubrics {
            RubricSpec::Probabilities(ps) => {
                if ps.len() != m {
                    return bad(format!("{} probability vectors for {m} rubrics", ps.len()));
                }
                for p in ps {
                    check_simplex(p)?;
                    if p.len() != self.categories {
                        return bad("probability vector length differs from the category count".into());
                    }
                }
            }
            RubricSpec::Breaks(bs) => {
                if bs.len() != m || bs.iter().any(|b| b.len() + 1 != self.categories) {
                    return bad("break-point vectors do not match the rubric or category count".into());
                }
            }
        }
        for (name, v) in [
            ("item effect sd", self.item_effect_sd),
            ("item factor sd", self.item_factor_sd),
            ("user factor sd", self.user_factor_sd),
            ("noise sd", self.noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        match self.missingness {
            Missingness::Density(d) if !(d > 0.0 && d <= 1.0) => return bad(format!("density {d} not in (0, 1]")),
            Missingness::Count(n) if n > self.items * self.users => {
                return bad(format!("{n} ratings requested from {} pairs", self.items * self.users))
            }
            Missingness::Pairs(ref pairs) if pairs.iter().any(|&(i, u)| i >= self.items || u >= self.users) => {
                return bad("observed pair out of range".into())
            }
            _ => {}
        }
        let [a, b, c, d] = self.domain;
        if !(a < b && c < d) {
            return bad("empty spatial domain".into());
        }
        Ok(())
    }
}

/// A generated dataset and the state that produced it.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub data: RatingsDataset,
    pub items: ItemTable,
    pub basis: SpatialBasis,
    /// Generating values. Scales may be zero, so this is not validated.
    pub truth: ModelState,
    /// Probability vector of each rubric, when rubrics were built from one.
    pub rubric_probs: Option<Vec<Vec<f64>>>,
}

fn gaussian(n: usize, sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn uniform_point(domain: [f64; 4], rng: &mut impl Rng) -> [f64; 2] {
    [
        domain[0] + (domain[1] - domain[0]) * rng.random::<f64>(),
        domain[2] + (domain[3] - domain[2]) * rng.random::<f64>(),
    ]
}

/// Draws every latent quantity from the hierarchical model and emits the
/// ratings by cell membership of the utilities.
pub fn generate_dataset(sim: &SimConfig) -> Result<SimulatedData> {
    sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let (n_items, n_users, l) = (sim.items, sim.users, sim.factors);

    let locations: Vec<[f64; 2]> = (0..n_items).map(|_| uniform_point(sim.domain, &mut rng)).collect();
    let p = sim.coefficients.len();
    let items = if p == 0 {
        ItemTable::from_locations(locations.clone())
    } else {
        ItemTable::new(locations.clone(), (0..n_items).map(|_| gaussian(p, 1.0, &mut rng)).collect())?
    };
    let (basis, eta_var) = match sim.spatial {
        SpatialSpec::None => (SpatialBasis::empty(&locations), 0.0),
        SpatialSpec::Spectral { bandwidth, rank, variance } => {
            (build_basis(&locations, bandwidth, RankRule::Fixed(rank))?, variance)
        }
        SpatialSpec::Radial { knots, bandwidth, variance } => {
            let centers = (0..knots).map(|_| uniform_point(sim.domain, &mut rng)).collect();
            (SpatialBasis::radial(&locations, centers, bandwidth)?, variance)
        }
    };
    let basis_coefs = gaussian(basis.rank(), eta_var.sqrt(), &mut rng);
    let item_effects = gaussian(n_items, sim.item_effect_sd, &mut rng);
    let user_factors =
        Factors::from_rows(&(0..n_users).map(|_| gaussian(l, sim.user_factor_sd, &mut rng)).collect::<Vec<_>>(), l)?;
    let item_factors =
        Factors::from_rows(&(0..n_items).map(|_| gaussian(l, sim.item_factor_sd, &mut rng)).collect::<Vec<_>>(), l)?;
    let classes: Vec<usize> = (0..n_users)
        .map(|_| {
            let mut u = rng.random::<f64>();
            for (m, w) in sim.weights.iter().enumerate() {
                if u < *w {
                    return m;
                }
                u -= w;
            }
            sim.weights.len() - 1
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = match &sim.missingness {
        Missingness::Density(d) => {
            let mut v = Vec::new();
            for u in 0..n_users {
                for i in 0..n_items {
                    if rng.random::<f64>() < *d {
                        v.push((i, u));
                    }
                }
            }
            v
        }
        Missingness::Count(n) => {
            sample_indices(&mut rng, n_items * n_users, *n).into_iter().map(|j| (j % n_items, j / n_items)).collect()
        }
        Missingness::Pairs(p) => p.clone(),
    };
    pairs.sort_by_key(|&(i, u)| (u, i));
    pairs.dedup();

    let mut truth = ModelState {
        classes,
        utilities: Vec::new(),
        rubrics: Vec::new(),
        weights: sim.weights.clone(),
        user_factors,
        item_factors,
        coefficients: sim.coefficients.clone(),
        item_effects,
        basis_coefs,
        scales: Scales { item_effect: sim.item_effect_sd, item_factor: sim.item_factor_sd, spatial: eta_var.sqrt() },
    };
    let mu: Vec<f64> =
        pairs.iter().map(|&(i, u)| crate::model::predictor_unchecked(&truth, &basis, &items, i, u)).collect();

    let (rubrics, rubric_probs) = match &sim.rubrics {
        RubricSpec::Breaks(bs) => (bs.iter().map(|b| Rubric::new(b.clone())).collect::<Result<Vec<_>>>()?, None),
        RubricSpec::Probabilities(ps) => {
            // marginal of Y over the observed pairs, or over all pairs when none are observed
            let draw_mu = |rng: &mut ChaCha8Rng| {
                if mu.is_empty() {
                    let (i, u) = (rng.random_range(0..n_items), rng.random_range(0..n_users));
                    crate::model::predictor_unchecked(&truth, &basis, &items, i, u)
                } else {
                    mu[rng.random_range(0..mu.len())]
                }
            };
            let pool: Vec<f64> = (0..sim.pool_size)
                .map(|_| {
                    let m = draw_mu(&mut rng);
                    m + sim.noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            let pool = UtilityPool::new(pool);
            (ps.iter().map(|p| breakpoints_from_probs(p, &pool)).collect::<Result<Vec<_>>>()?, Some(ps.clone()))
        }
    };
    truth.rubrics = rubrics;

    let mut entries = Vec::with_capacity(pairs.len());
    let mut utilities = Vec::with_capacity(pairs.len());
    for (&(i, u), &m) in pairs.iter().zip(&mu) {
        let y = m + sim.noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let category = truth.rubrics[truth.classes[u]].category_of(y);
        entries.push(Rating { item: i, user: u, category });
        utilities.push(y);
    }
    truth.utilities = utilities;
    let data = RatingsDataset::new(sim.categories, n_items, n_users, entries)?;
    Ok(SimulatedData { data, items, basis, truth, rubric_probs })
}

/// Uniformly random orthonormal matrix (QR of a Gaussian matrix with the
/// sign convention that makes R's diagonal positive).
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| Distribution::<f64>::sample(&StandardNormal, rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Applies `O` to every αᵤ and βᵢ.
pub fn rotate_factors(state: &mut ModelState, o: &DMatrix<f64>) -> Result<()> {
    let l = state.user_factors.dim();
    if o.nrows() != l || o.ncols() != l {
        return Err(Error::Config(format!("rotation is {}x{} for {l} factors", o.nrows(), o.ncols())));
    }
    for f in [&mut state.user_factors, &mut state.item_factors] {
        for r in 0..f.rows() {
            let v = nalgebra::DVector::from_column_slice(f.row(r));
            f.row_mut(r).copy_from_slice((o * v).as_slice());
        }
    }
    Ok(())
}

/// Most frequent class of each user across the draws (ties to the lower
/// label).
pub fn modal_assignment(samples: &PosteriorSamples) -> Vec<usize> {
    let m = samples.meta.rubrics;
    (0..samples.num_users())
        .map(|u| {
            let mut counts = vec![0usize; m];
            for d in &samples.draws {
                counts[d.classes[u]] += 1;
            }
            (0..m).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0)
        })
        .collect()
}

/// Fraction of users whose label matches the truth under the best
/// one-to-one relabeling.
pub fn matched_agreement(truth: &[usize], estimate: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let rows = truth.iter().max().map_or(0, |m| m + 1);
    let cols = estimate.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0i64; cols]; rows];
    for (&t, &e) in truth.iter().zip(estimate) {
        confusion[t][e] += 1;
    }
    let matrix = if rows <= cols {
        Matrix::from_rows(confusion).expect("rectangular")
    } else {
        let transposed: Vec<Vec<i64>> = (0..cols).map(|c| (0..rows).map(|r| confusion[r][c]).collect()).collect();
        Matrix::from_rows(transposed).expect("rectangular")
    };
    let (matched, _) = kuhn_munkres(&matrix);
    matched as f64 / truth.len() as f64
}

/// Fraction of users in each rubric at one draw, sorted descending.
pub fn occupancy(classes: &[usize], rubrics: usize) -> Vec<f64> {
    let mut counts = vec![0usize; rubrics];
    for &c in classes {
        counts[c] += 1;
    }
    let mut frac: Vec<f64> = counts.iter().map(|&c| c as f64 / classes.len().max(1) as f64).collect();
    frac.sort_by(|a, b| b.total_cmp(a));
    frac
}

/// Mean and standard error of the per-pair difference `a − b`.
pub fn paired_difference(a: &HeldOut, b: &HeldOut) -> (f64, f64) {
    let d: Vec<f64> = a.per_pair.iter().zip(&b.per_pair).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Kolmogorov–Smirnov distance of `draws` from the standard normal and its
/// asymptotic p-value.
pub fn ks_standard_normal(draws: &[f64]) -> (f64, f64) {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let f = normal::cdf(v);
            f64::max(f - j as f64 / n, (j + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// `P(K > t)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * t * t).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Configuration of the rubric-similarity study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauStudyConfig {
    /// Template; the rubric specification is replaced for each τ.
    pub sim: SimConfig,
    /// Settings of the multi-rubric fit; the single-rubric fit copies them
    /// with M = 1.
    pub fit: Hyperparameters,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
}

impl TauStudyConfig {
    pub fn desk(seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            sim: SimConfig::tau_study(0.0, 0)?,
            fit: Hyperparameters {
                rubrics: 10,
                factors: 0,
                concentration: 1.0,
                warmup: 2000,
                samples: 2000,
                thin: 4,
                ..Hyperparameters::default()
            },
            train_fraction: 0.5,
            seeds,
            p1: P1.to_vec(),
            p2: P2.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub seed: u64,
    pub heldout_multi: f64,
    pub heldout_single: f64,
    /// Mean per-pair difference multi − single and its standard error.
    pub delta: f64,
    pub delta_se: f64,
    /// Users whose modal rubric matches the truth under the best relabeling.
    pub correct_assignment: f64,
    /// Rubric occupancy at the final draw, descending.
    pub occupancy: Vec<f64>,
    /// TV distance between the training-rating profiles of the two most
    /// occupied rubrics at the final draw and the generating vectors, under
    /// the best matching.
    pub profile_tv: Vec<f64>,
    pub generating: Vec<Vec<f64>>,
}

fn mix_seed(seed: u64, cell: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ cell.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Runs the study on every (τ, seed) cell in parallel.
pub fn run_tau_study(grid: &[f64], cfg: &TauStudyConfig) -> Result<Vec<TauRow>> {
    if let Some(&tau) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    let cells: Vec<(usize, f64, u64)> =
        cfg.seeds.iter().flat_map(|&s| grid.iter().enumerate().map(move |(j, &t)| (j, t, s))).collect();
    cells
        .par_iter()
        .map(|&(j, tau, seed)| {
            tau_cell(tau, seed, j as u64, cfg).map_err(|e| Error::Study { tau, source: Box::new(e) })
        })
        .collect()
}

fn tau_cell(tau: f64, seed: u64, cell: u64, cfg: &TauStudyConfig) -> Result<TauRow> {
    let generating = vec![cfg.p1.clone(), tau_mixture(tau, &cfg.p1, &cfg.p2)?];
    let sim = SimConfig { rubrics: RubricSpec::Probabilities(generating.clone()), seed, ..cfg.sim.clone() };
    let gen = generate_dataset(&sim)?;
    let (train, test) = split_train_test(&gen.data, cfg.train_fraction, mix_seed(seed, u64::MAX))?;
    let seen = seen_users(&train);

    let multi_hyper = Hyperparameters { seed: mix_seed(seed, cell), ..cfg.fit.clone() };
    let single_hyper = Hyperparameters { rubrics: 1, ..multi_hyper.clone() };
    let multi = run_chain(&train, &gen.items, &gen.basis, &multi_hyper)?;
    let single = run_chain(&train, &gen.items, &gen.basis, &single_hyper)?;
    let h_multi = heldout_loglik(&multi, test.entries(), &seen, &gen.items, &gen.basis)?;
    let h_single = heldout_loglik(&single, test.entries(), &seen, &gen.items, &gen.basis)?;
    let (delta, delta_se) = paired_difference(&h_multi, &h_single);

    let correct_assignment = matched_agreement(&gen.truth.classes, &modal_assignment(&multi));
    let last = multi.draws.last().ok_or_else(|| Error::Data("no retained draws".into()))?;
    let occ = occupancy(&last.classes, multi_hyper.rubrics);

    let profile_tv = profile_distances(&last.classes, &train, multi_hyper.rubrics, &generating);

    Ok(TauRow {
        tau,
        seed,
        heldout_multi: h_multi.mean,
        heldout_single: h_single.mean,
        delta,
        delta_se,
        correct_assignment,
        occupancy: occ,
        profile_tv,
        generating,
    })
}

/// TV distances of the largest clusters' rating profiles to the generating
/// vectors under the best one-to-one matching.
pub fn profile_distances(
    assignment: &[usize],
    data: &RatingsDataset,
    rubrics: usize,
    generating: &[Vec<f64>],
) -> Vec<f64> {
    let mut profiles: Vec<_> = rubric_profile(assignment, data, rubrics)
        .into_iter()
        .filter_map(|p| p.proportions.map(|q| (p.users, q)))
        .collect();
    profiles.sort_by(|a, b| b.0.cmp(&a.0));
    profiles.truncate(generating.len());
    let k = profiles.len();
    // brute force over permutations; k is tiny
    let mut best: Option<Vec<f64>> = None;
    let mut perm: Vec<usize> = (0..generating.len()).collect();
    permutations(&mut perm, 0, &mut |p| {
        let d: Vec<f64> = (0..k).map(|j| tv_distance(&profiles[j].1, &generating[p[j]])).collect();
        if best.as_ref().is_none_or(|b| d.iter().sum::<f64>() < b.iter().sum::<f64>()) {
            best = Some(d);
        }
    });
    best.unwrap_or_default()
}

fn permutations(v: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        f(v);
        return;
    }
    for j in start..v.len() {
        v.swap(start, j);
        permutations(v, start + 1, f);
        v.swap(start, j);
    }
}

/// Configuration of the latent-factor rank study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorStudyConfig {
    pub sim: SimConfig,
    /// Multi-rubric fit settings; `factors` is replaced by each grid value.
    pub fit: Hyperparameters,
    pub factor_grid: Vec<usize>,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    /// Items whose ζ draws are reported individually.
    pub zeta_items: usize,
}

impl FactorStudyConfig {
    pub fn desk(seeds: Vec<u64>) -> Self {
        Self {
            sim: SimConfig::supplement(0),
            fit: Hyperparameters {
                rubrics: 10,
                concentration: 1.0,
                warmup: 1000,
                samples: 1000,
                thin: 2,
                store_factors: true,
                ..Hyperparameters::default()
            },
            factor_grid: (1..=7).collect(),
            train_fraction: 0.5,
            seeds,
            zeta_items: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub seed: u64,
    pub factors: usize,
    pub heldout: f64,
    pub heldout_se: f64,
}

/// Posterior draws of `ζᵢ = βᵢ₁/σ_β` from the fit at the true rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaDraws {
    pub seed: u64,
    /// Randomly chosen items and their draws.
    pub items: Vec<(usize, Vec<f64>)>,
    /// Draws pooled over every item.
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorStudy {
    pub rows: Vec<FactorRow>,
    pub zeta: Vec<ZetaDraws>,
}

impl FactorStudy {
    /// Grid value with the highest held-out log-likelihood for each seed.
    pub fn best_factors(&self) -> Vec<(u64, usize)> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .map(|s| {
                let best = self
                    .rows
                    .iter()
                    .filter(|r| r.seed == s)
                    .max_by(|a, b| a.heldout.total_cmp(&b.heldout))
                    .expect("rows for every seed");
                (s, best.factors)
            })
            .collect()
    }
}

pub fn run_factor_recovery_study(cfg: &FactorStudyConfig) -> Result<FactorStudy> {
    let true_l = cfg.sim.factors;
    let cells: Vec<(u64, usize)> =
        cfg.seeds.iter().flat_map(|&s| cfg.factor_grid.iter().map(move |&l| (s, l))).collect();
    let data: Vec<(u64, SimulatedData, RatingsDataset, RatingsDataset)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let gen = generate_dataset(&SimConfig { seed, ..cfg.sim.clone() })?;
            let (train, test) = split_train_test(&gen.data, cfg.train_fraction, mix_seed(seed, u64::MAX))?;
            Ok((seed, gen, train, test))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<(FactorRow, Option<ZetaDraws>)> = cells
        .par_iter()
        .map(|&(seed, l)| {
            let (_, gen, train, test) = data.iter().find(|d| d.0 == seed).expect("generated above");
            let hyper = Hyperparameters {
                factors: l,
                seed: mix_seed(seed, l as u64),
                store_factors: cfg.fit.store_factors || l == true_l,
                ..cfg.fit.clone()
            };
            let wrap = |e: Error| Error::FactorStudy { factors: l, source: Box::new(e) };
            let samples = run_chain(train, &gen.items, &gen.basis, &hyper).map_err(wrap)?;
            let h =
                heldout_loglik(&samples, test.entries(), &seen_users(train), &gen.items, &gen.basis).map_err(wrap)?;
            let zeta = (l == true_l).then(|| zeta_draws(&samples, seed, cfg.zeta_items));
            Ok((FactorRow { seed, factors: l, heldout: h.mean, heldout_se: h.std_error() }, zeta))
        })
        .collect::<Result<_>>()?;
    let (rows, zeta): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    Ok(FactorStudy { rows, zeta: zeta.into_iter().flatten().collect() })
}

fn zeta_draws(samples: &PosteriorSamples, seed: u64, subset: usize) -> ZetaDraws {
    let items = samples.draws.first().map_or(0, |d| d.item_effects.len());
    let zeta = |i: usize| -> Vec<f64> {
        samples
            .draws
            .iter()
            .filter_map(|d| d.item_factors.as_ref().map(|b| b.row(i)[0] / d.scales.item_factor))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0FFEE));
    let mut chosen: Vec<usize> = sample_indices(&mut rng, items, subset.min(items)).into_vec();
    chosen.sort_unstable();
    ZetaDraws {
        seed,
        items: chosen.iter().map(|&i| (i, zeta(i))).collect(),
        pooled: (0..items).flat_map(zeta).collect(),
    }
}
