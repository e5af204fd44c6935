//! Gibbs sampler for the full model.
//!
//! One sweep runs, in order: classes, utilities, user factors, item
//! factors, covariate coefficients, item effects, basis coefficients,
//! mixture weights, the three variance scales and the rubrics. The linear
//! predictor is cached by component (per-item covariate and spatial terms,
//! per-entry interaction) so each block sees its partial residual without a
//! full recomputation.

mod conjugate;
mod rubric;
mod slice;
pub(crate) mod streams;
mod truncnorm;

pub use conjugate::{gaussian_conjugate_update, scalar_posterior, ConjugatePosterior};
pub use rubric::{laplace_proposal, update_rubric_laplace, LaplaceProposal, ProposalCache, RubricStep, RubricTarget};
pub use slice::{ln_variance_target, slice_sample_variance, slice_step};
pub use truncnorm::sample_truncated_gaussian;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    dot, predictor_unchecked, sample_rubric_prior, Factors, Hyperparameters, ItemTable, ModelState, RatingsDataset,
    Scales, USER_FACTOR_SCALE,
};
use crate::samples::{ChainMeta, Draw, PosteriorSamples};
use crate::spatial::SpatialBasis;
use streams::{stream, Block};

/// Tolerance of the periodic predictor recomputation check.
pub const COHERENCE_TOL: f64 = 1e-8;

/// Cached predictor components, constant Gram matrices and step-12 state.
#[derive(Clone, Debug)]
pub struct SamplerWorkspace {
    /// `xᵢᵀγ` per item.
    fixed: Vec<f64>,
    /// `ψ(sᵢ)ᵀη` per item.
    spatial: Vec<f64>,
    /// `αᵤᵀβᵢ` per entry.
    interaction: Vec<f64>,
    /// `XᵀX` with rows expanded over the observed pairs.
    covariate_gram: DMatrix<f64>,
    /// `ΨᵀΨ` with rows expanded over the observed pairs.
    basis_gram: DMatrix<f64>,
    proposals: Vec<ProposalCache>,
    attempts: Vec<u64>,
    accepts: Vec<u64>,
    fallbacks: u64,
}

impl SamplerWorkspace {
    pub fn proposals(&self) -> &[ProposalCache] {
        &self.proposals
    }
}

/// Log-space categorical draw; `None` when every weight is zero.
fn sample_log_categorical<R: Rng + ?Sized>(ln_weights: &[f64], rng: &mut R) -> Option<usize> {
    let max = ln_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return None;
    }
    let w: Vec<f64> = ln_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (m, wm) in w.iter().enumerate() {
        if u < *wm {
            return Some(m);
        }
        u -= wm;
    }
    // rounding residue lands on the last positive weight
    w.iter().rposition(|&x| x > 0.0)
}

/// `ln G` for `G ~ Gamma(shape, 1)`, accurate for very small shapes where
/// `G` itself underflows.
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        let u = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / shape
    }
}

pub fn sample_dirichlet<R: Rng + ?Sized>(shapes: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = shapes.iter().map(|&a| ln_gamma_variate(a, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draw of ω from `Dirichlet(a + counts)`.
pub fn update_mixture_weights<R: Rng + ?Sized>(classes: &[usize], rubrics: usize, shape: f64, rng: &mut R) -> Vec<f64> {
    let mut shapes = vec![shape; rubrics];
    for &c in classes {
        shapes[c] += 1.0;
    }
    sample_dirichlet(&shapes, rng)
}

fn half_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z != 0.0 {
            return z.abs();
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Draws every parameter from the prior, with Dirichlet shape `shape` for
/// ω, and utilities inside the cells of `data`'s ratings.
pub fn draw_prior_state<R: Rng + ?Sized>(
    data: &RatingsDataset,
    items: &ItemTable,
    basis: &SpatialBasis,
    hyper: &Hyperparameters,
    shape: f64,
    rng: &mut R,
) -> Result<ModelState> {
    let m = hyper.rubrics;
    let weights = sample_dirichlet(&vec![shape; m], rng);
    let ln_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let classes =
        (0..data.num_users()).map(|_| sample_log_categorical(&ln_w, rng).expect("weights on the simplex")).collect();
    let rubrics = (0..m).map(|_| sample_rubric_prior(data.categories(), hyper.rubric_scale, rng)).collect();
    let scales = Scales { item_effect: half_normal(rng), item_factor: half_normal(rng), spatial: half_normal(rng) };
    let l = hyper.factors;
    let user_factors = Factors::from_rows(
        &(0..data.num_users()).map(|_| gaussian_vec(l, USER_FACTOR_SCALE, rng)).collect::<Vec<_>>(),
        l,
    )?;
    let item_factors = Factors::from_rows(
        &(0..data.num_items()).map(|_| gaussian_vec(l, scales.item_factor, rng)).collect::<Vec<_>>(),
        l,
    )?;
    let coefficients = if hyper.coefficient_precision > 0.0 {
        gaussian_vec(items.covariate_dim(), hyper.coefficient_precision.sqrt().recip(), rng)
    } else {
        vec![0.0; items.covariate_dim()]
    };
    let item_effects = gaussian_vec(data.num_items(), scales.item_effect, rng);
    let basis_coefs = gaussian_vec(basis.rank(), scales.spatial, rng);
    let mut state = ModelState {
        classes,
        utilities: vec![0.0; data.len()],
        rubrics,
        weights,
        user_factors,
        item_factors,
        coefficients,
        item_effects,
        basis_coefs,
        scales,
    };
    for (e, r) in data.entries().iter().enumerate() {
        let mu = predictor_unchecked(&state, basis, items, r.item, r.user);
        let rubric = &state.rubrics[state.classes[r.user]];
        state.utilities[e] =
            sample_truncated_gaussian(mu, 1.0, rubric.lower(r.category), rubric.upper(r.category), rng)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredProposal {
    mode: Vec<f64>,
    factor: Vec<f64>,
}

/// Gaussian conditional blocks, for [`Sampler::conditional`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditional {
    UserFactors(usize),
    ItemFactors(usize),
    Coefficients,
    ItemEffect(usize),
    BasisCoefs,
}

/// Everything needed to resume a chain exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sweep: u64,
    pub state: ModelState,
    /// Current ratings (they differ from the input only after regeneration).
    pub categories: Vec<usize>,
    proposals: Vec<(Option<StoredProposal>, usize)>,
    attempts: Vec<u64>,
    accepts: Vec<u64>,
    fallbacks: u64,
    pub retained: Vec<Draw>,
}

pub struct Sampler<'a> {
    data: RatingsDataset,
    items: &'a ItemTable,
    basis: &'a SpatialBasis,
    hyper: Hyperparameters,
    state: ModelState,
    ws: SamplerWorkspace,
    sweep: u64,
    retained: Vec<Draw>,
}

impl<'a> Sampler<'a> {
    /// Validates the inputs and initializes from the prior with a = 1.
    pub fn new(
        data: &RatingsDataset,
        items: &'a ItemTable,
        basis: &'a SpatialBasis,
        hyper: &Hyperparameters,
    ) -> Result<Self> {
        check_inputs(data, items, basis, hyper)?;
        let mut rng = stream(hyper.seed, 0, Block::Init, 0);
        let state = draw_prior_state(data, items, basis, hyper, 1.0, &mut rng)?;
        Self::with_state(data, items, basis, hyper, state)
    }

    pub fn with_state(
        data: &RatingsDataset,
        items: &'a ItemTable,
        basis: &'a SpatialBasis,
        hyper: &Hyperparameters,
        state: ModelState,
    ) -> Result<Self> {
        check_inputs(data, items, basis, hyper)?;
        state.validate(data)?;
        if state.rubrics.len() != hyper.rubrics
            || state.user_factors.dim() != hyper.factors
            || state.item_factors.dim() != hyper.factors
            || state.coefficients.len() != items.covariate_dim()
            || state.basis_coefs.len() != basis.rank()
        {
            return Err(Error::State("state dimensions do not match the configuration".into()));
        }
        let ws = build_workspace(data, items, basis, hyper, &state)?;
        let mut sampler =
            Self { data: data.clone(), items, basis, hyper: hyper.clone(), state, ws, sweep: 0, retained: Vec::new() };
        sampler.resync();
        Ok(sampler)
    }

    pub fn restore(
        data: &RatingsDataset,
        items: &'a ItemTable,
        basis: &'a SpatialBasis,
        hyper: &Hyperparameters,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if checkpoint.categories.len() != data.len() {
            return Err(Error::State("checkpoint does not match the dataset".into()));
        }
        let mut data = data.clone();
        for (e, &k) in checkpoint.categories.iter().enumerate() {
            if k < 1 || k > data.categories() {
                return Err(Error::CategoryRange { k, categories: data.categories() });
            }
            data.set_category(e, k);
        }
        let mut sampler = Self::with_state(&data, items, basis, hyper, checkpoint.state)?;
        if checkpoint.proposals.len() != hyper.rubrics {
            return Err(Error::State("checkpoint proposal count does not match the rubric count".into()));
        }
        sampler.ws.proposals = checkpoint
            .proposals
            .into_iter()
            .map(|(p, age)| ProposalCache {
                proposal: p.and_then(|p| LaplaceProposal::from_parts(p.mode, p.factor)),
                age,
            })
            .collect();
        sampler.ws.attempts = checkpoint.attempts;
        sampler.ws.accepts = checkpoint.accepts;
        sampler.ws.fallbacks = checkpoint.fallbacks;
        sampler.sweep = checkpoint.sweep;
        sampler.retained = checkpoint.retained;
        Ok(sampler)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            sweep: self.sweep,
            state: self.state.clone(),
            categories: self.data.entries().iter().map(|r| r.category).collect(),
            proposals: self
                .ws
                .proposals
                .iter()
                .map(|c| {
                    let stored = c.proposal.as_ref().map(|p| {
                        let (mode, factor) = p.to_parts();
                        StoredProposal { mode, factor }
                    });
                    (stored, c.age)
                })
                .collect(),
            attempts: self.ws.attempts.clone(),
            accepts: self.ws.accepts.clone(),
            fallbacks: self.ws.fallbacks,
            retained: self.retained.clone(),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn data(&self) -> &RatingsDataset {
        &self.data
    }

    pub fn workspace(&self) -> &SamplerWorkspace {
        &self.ws
    }

    /// Number of completed sweeps.
    pub fn sweeps_done(&self) -> u64 {
        self.sweep
    }

    /// Moves on to the next sweep's random streams without updating
    /// anything, so a single block can be iterated on its own.
    pub fn skip_sweep(&mut self) {
        self.sweep += 1;
    }

    fn rng(&self, block: Block, entity: usize) -> rand_chacha::ChaCha8Rng {
        stream(self.hyper.seed, self.sweep, block, entity as u64)
    }

    /// Cached linear predictor of entry `e`.
    #[inline]
    fn mu(&self, e: usize) -> f64 {
        let i = self.data.entries()[e].item;
        self.ws.fixed[i] + self.ws.spatial[i] + self.state.item_effects[i] + self.ws.interaction[e]
    }

    /// Largest gap between cached and freshly computed predictors.
    pub fn coherence_error(&self) -> f64 {
        self.data
            .entries()
            .par_iter()
            .enumerate()
            .map(|(e, r)| (self.mu(e) - predictor_unchecked(&self.state, self.basis, self.items, r.item, r.user)).abs())
            .reduce(|| 0.0, f64::max)
    }

    fn refresh_fixed(&mut self) {
        let items = self.items;
        self.ws.fixed = (0..items.len()).map(|i| dot(items.covariate(i), &self.state.coefficients)).collect();
    }

    fn refresh_spatial(&mut self) {
        let basis = self.basis;
        self.ws.spatial = (0..self.data.num_items())
            .map(|i| if basis.rank() == 0 { 0.0 } else { dot(basis.row(i), &self.state.basis_coefs) })
            .collect();
    }

    fn refresh_interaction(&mut self) {
        let st = &self.state;
        self.ws.interaction = if st.user_factors.dim() == 0 {
            vec![0.0; self.data.len()]
        } else {
            self.data.entries().iter().map(|r| dot(st.user_factors.row(r.user), st.item_factors.row(r.item))).collect()
        };
    }

    fn resync(&mut self) {
        self.refresh_fixed();
        self.refresh_spatial();
        self.refresh_interaction();
    }

    /// Step 1 log weights `ln ω_m + Σ ln w` for one user.
    pub fn class_log_weights(&self, user: usize) -> Vec<f64> {
        let entries = self.data.entries();
        self.state
            .rubrics
            .iter()
            .zip(&self.state.weights)
            .map(|(rubric, &w)| {
                let mut lw = w.ln();
                if lw == f64::NEG_INFINITY {
                    return lw;
                }
                for &e in self.data.user_entries(user) {
                    lw += rubric.ln_cell_mass(entries[e].category, self.mu(e));
                }
                lw
            })
            .collect()
    }

    /// Step 1, collapsed over the utilities.
    pub fn update_latent_classes(&mut self) -> Result<()> {
        if self.state.rubrics.len() == 1 {
            self.state.classes.iter_mut().for_each(|c| *c = 0);
            return Ok(());
        }
        let classes = (0..self.data.num_users())
            .into_par_iter()
            .map(|u| {
                let lw = self.class_log_weights(u);
                let mut rng = self.rng(Block::Classes, u);
                sample_log_categorical(&lw, &mut rng).ok_or(Error::DegenerateClasses { user: u })
            })
            .collect::<Result<Vec<_>>>()?;
        self.state.classes = classes;
        Ok(())
    }

    /// Step 2.
    pub fn update_latent_utilities(&mut self) -> Result<()> {
        let entries = self.data.entries();
        let draws = (0..self.data.num_users())
            .into_par_iter()
            .map(|u| {
                let rubric = &self.state.rubrics[self.state.classes[u]];
                let mut rng = self.rng(Block::Utilities, u);
                self.data
                    .user_entries(u)
                    .iter()
                    .map(|&e| {
                        let k = entries[e].category;
                        sample_truncated_gaussian(self.mu(e), 1.0, rubric.lower(k), rubric.upper(k), &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (u, ys) in draws.into_iter().enumerate() {
            for (&e, y) in self.data.user_entries(u).iter().zip(ys) {
                self.state.utilities[e] = y;
            }
        }
        Ok(())
    }

    /// Conditional posterior of one factor row from the entries in `list`.
    fn factor_posterior(
        &self,
        list: &[usize],
        other: &Factors,
        other_index: impl Fn(usize) -> usize,
        prior_precision: f64,
        block: &'static str,
    ) -> Result<ConjugatePosterior> {
        let l = other.dim();
        let mut gram = DMatrix::zeros(l, l);
        let mut rhs = DVector::zeros(l);
        for &e in list {
            let row = other.row(other_index(e));
            let resid = self.state.utilities[e] - (self.mu(e) - self.ws.interaction[e]);
            for a in 0..l {
                rhs[a] += row[a] * resid;
                for b in 0..=a {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..l {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let prior = DMatrix::from_diagonal_element(l, l, prior_precision);
        ConjugatePosterior::from_normal_equations(gram, rhs, &prior, block)
    }

    fn user_factor_posterior(&self, u: usize) -> Result<ConjugatePosterior> {
        let entries = self.data.entries();
        self.factor_posterior(
            self.data.user_entries(u),
            &self.state.item_factors,
            |e| entries[e].item,
            USER_FACTOR_SCALE.powi(-2),
            "alpha",
        )
    }

    fn item_factor_posterior(&self, i: usize) -> Result<ConjugatePosterior> {
        let entries = self.data.entries();
        self.factor_posterior(
            self.data.item_entries(i),
            &self.state.user_factors,
            |e| entries[e].user,
            self.state.scales.item_factor.powi(-2),
            "beta",
        )
    }

    fn coefficient_posterior(&self) -> Result<ConjugatePosterior> {
        let p = self.items.covariate_dim();
        let mut rhs = DVector::zeros(p);
        for (e, r) in self.data.entries().iter().enumerate() {
            let resid = self.state.utilities[e] - (self.mu(e) - self.ws.fixed[r.item]);
            for (j, x) in self.items.covariate(r.item).iter().enumerate() {
                rhs[j] += x * resid;
            }
        }
        let prior = DMatrix::from_diagonal_element(p, p, self.hyper.coefficient_precision);
        ConjugatePosterior::from_normal_equations(self.ws.covariate_gram.clone(), rhs, &prior, "gamma")
    }

    fn item_effect_posterior(&self, i: usize) -> (f64, f64) {
        let list = self.data.item_entries(i);
        let b = self.state.item_effects[i];
        let sum: f64 = list.iter().map(|&e| self.state.utilities[e] - (self.mu(e) - b)).sum();
        scalar_posterior(sum, list.len(), self.state.scales.item_effect.powi(-2))
    }

    fn basis_posterior(&self) -> Result<ConjugatePosterior> {
        let r = self.basis.rank();
        let mut rhs = DVector::zeros(r);
        for (e, rating) in self.data.entries().iter().enumerate() {
            let resid = self.state.utilities[e] - (self.mu(e) - self.ws.spatial[rating.item]);
            for (j, psi) in self.basis.row(rating.item).iter().enumerate() {
                rhs[j] += psi * resid;
            }
        }
        let prior = DMatrix::from_diagonal_element(r, r, self.state.scales.spatial.powi(-2));
        ConjugatePosterior::from_normal_equations(self.ws.basis_gram.clone(), rhs, &prior, "eta")
    }

    /// Mean and covariance of the Gaussian full conditional that the
    /// matching update draws from, at the current state.
    pub fn conditional(&self, which: Conditional) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let pair = |p: ConjugatePosterior| (p.mean().clone(), p.covariance());
        Ok(match which {
            Conditional::UserFactors(u) => pair(self.user_factor_posterior(u)?),
            Conditional::ItemFactors(i) => pair(self.item_factor_posterior(i)?),
            Conditional::Coefficients => pair(self.coefficient_posterior()?),
            Conditional::ItemEffect(i) => {
                let (m, v) = self.item_effect_posterior(i);
                (DVector::from_element(1, m), DMatrix::from_element(1, 1, v))
            }
            Conditional::BasisCoefs => pair(self.basis_posterior()?),
        })
    }

    /// Step 3.
    pub fn update_user_factors(&mut self) -> Result<()> {
        let l = self.hyper.factors;
        if l == 0 {
            return Ok(());
        }
        let rows = (0..self.data.num_users())
            .into_par_iter()
            .map(|u| {
                let mut rng = self.rng(Block::UserFactors, u);
                Ok(self.user_factor_posterior(u)?.draw(&mut rng).iter().copied().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        self.state.user_factors = Factors::from_rows(&rows, l)?;
        self.refresh_interaction();
        Ok(())
    }

    /// Step 4.
    pub fn update_item_factors(&mut self) -> Result<()> {
        let l = self.hyper.factors;
        if l == 0 {
            return Ok(());
        }
        let rows = (0..self.data.num_items())
            .into_par_iter()
            .map(|i| {
                let mut rng = self.rng(Block::ItemFactors, i);
                Ok(self.item_factor_posterior(i)?.draw(&mut rng).iter().copied().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        self.state.item_factors = Factors::from_rows(&rows, l)?;
        self.refresh_interaction();
        Ok(())
    }

    /// Step 5.
    pub fn update_coefficients(&mut self) -> Result<()> {
        let p = self.items.covariate_dim();
        if p == 0 {
            return Ok(());
        }
        let post = self.coefficient_posterior()?;
        let mut rng = self.rng(Block::Coefficients, 0);
        self.state.coefficients = post.draw(&mut rng).iter().copied().collect();
        self.refresh_fixed();
        Ok(())
    }

    /// Step 6.
    pub fn update_item_effects(&mut self) -> Result<()> {
        let effects: Vec<f64> = (0..self.data.num_items())
            .into_par_iter()
            .map(|i| {
                let (mean, var) = self.item_effect_posterior(i);
                let mut rng = self.rng(Block::ItemEffects, i);
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + var.sqrt() * z
            })
            .collect();
        self.state.item_effects = effects;
        Ok(())
    }

    /// Step 7.
    pub fn update_basis_coefs(&mut self) -> Result<()> {
        let r = self.basis.rank();
        if r == 0 {
            return Ok(());
        }
        let post = self.basis_posterior()?;
        let mut rng = self.rng(Block::BasisCoefs, 0);
        self.state.basis_coefs = post.draw(&mut rng).iter().copied().collect();
        self.refresh_spatial();
        Ok(())
    }

    /// Step 8.
    pub fn update_weights(&mut self) {
        let mut rng = self.rng(Block::Weights, 0);
        self.state.weights =
            update_mixture_weights(&self.state.classes, self.hyper.rubrics, self.hyper.dirichlet_shape(), &mut rng);
    }

    /// Steps 9–11.
    pub fn update_scales(&mut self) -> Result<()> {
        let st = &self.state;
        let ss_b: f64 = st.item_effects.iter().map(|b| b * b).sum();
        let ss_beta: f64 = st.item_factors.as_slice().iter().map(|b| b * b).sum();
        let ss_eta: f64 = st.basis_coefs.iter().map(|b| b * b).sum();
        let n_items = self.data.num_items();

        let mut rng = self.rng(Block::Scales, 0);
        let v =
            slice_sample_variance(|v| ln_variance_target(v, n_items, ss_b), st.scales.item_effect.powi(2), &mut rng)?;
        let mut rng = self.rng(Block::Scales, 1);
        let v_beta = slice_sample_variance(
            |v| ln_variance_target(v, n_items * self.hyper.factors, ss_beta),
            st.scales.item_factor.powi(2),
            &mut rng,
        )?;
        let mut rng = self.rng(Block::Scales, 2);
        let v_eta = slice_sample_variance(
            |v| ln_variance_target(v, self.basis.rank(), ss_eta),
            st.scales.spatial.powi(2),
            &mut rng,
        )?;
        self.state.scales = Scales { item_effect: v.sqrt(), item_factor: v_beta.sqrt(), spatial: v_eta.sqrt() };
        Ok(())
    }

    /// Step 12 for every rubric. An accepted move is followed by a fresh
    /// draw of the utilities it governs, which keeps them inside the new
    /// cells.
    pub fn update_rubrics(&mut self) -> Result<()> {
        let m_total = self.hyper.rubrics;
        let entries = self.data.entries();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); m_total];
        let mut obs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m_total];
        for u in 0..self.data.num_users() {
            let m = self.state.classes[u];
            for &e in self.data.user_entries(u) {
                members[m].push(e);
                obs[m].push((entries[e].category, self.mu(e)));
            }
        }
        for m in 0..m_total {
            let target = RubricTarget { obs: &obs[m], scale: self.hyper.rubric_scale };
            let mut rng = self.rng(Block::Rubrics, m);
            let (next, step) = update_rubric_laplace(
                &self.state.rubrics[m],
                &target,
                &mut self.ws.proposals[m],
                self.hyper.proposal_refresh,
                &mut rng,
            );
            self.ws.attempts[m] += 1;
            self.ws.accepts[m] += step.accepted as u64;
            self.ws.fallbacks += step.fallback as u64;
            if step.fallback {
                log::debug!("sweep {}: rubric {m} mode finding failed, random-walk step used", self.sweep);
            }
            if step.moved() {
                let mut rng = self.rng(Block::Refresh, m);
                for (&e, &(k, mu)) in members[m].iter().zip(&obs[m]) {
                    self.state.utilities[e] =
                        sample_truncated_gaussian(mu, 1.0, next.lower(k), next.upper(k), &mut rng)?;
                }
                self.state.rubrics[m] = next;
            }
        }
        Ok(())
    }

    /// One full sweep (steps 1–12).
    pub fn sweep(&mut self) -> Result<()> {
        let iteration = self.sweep as usize;
        let wrap = |e: Error| Error::Chain { iteration, source: Box::new(e) };
        self.update_latent_classes().map_err(wrap)?;
        self.update_latent_utilities().map_err(wrap)?;
        self.update_user_factors().map_err(wrap)?;
        self.update_item_factors().map_err(wrap)?;
        self.update_coefficients().map_err(wrap)?;
        self.update_item_effects().map_err(wrap)?;
        self.update_basis_coefs().map_err(wrap)?;
        self.update_weights();
        self.update_scales().map_err(wrap)?;
        self.update_rubrics().map_err(wrap)?;
        let cadence = self.hyper.coherence_check as u64;
        if cadence > 0 && (self.sweep + 1) % cadence == 0 {
            let err = self.coherence_error();
            debug_assert!(err < COHERENCE_TOL, "predictor cache drifted by {err}");
            if err >= COHERENCE_TOL {
                log::warn!("sweep {iteration}: predictor cache drifted by {err}; resynchronizing");
            }
            self.resync();
        }
        self.sweep += 1;
        Ok(())
    }

    /// Redraws every (Y, Z) pair from the likelihood given the current
    /// parameters. Used by joint-distribution tests.
    pub fn regenerate_ratings(&mut self) {
        let mut rng = self.rng(Block::Regenerate, 0);
        for e in 0..self.data.len() {
            let user = self.data.entries()[e].user;
            let rubric = &self.state.rubrics[self.state.classes[user]];
            let mu = self.mu(e);
            let (y, k) = loop {
                let y = mu + Distribution::<f64>::sample(&StandardNormal, &mut rng);
                let k = rubric.category_of(y);
                if rubric.lower(k) < y {
                    break (y, k);
                }
            };
            self.state.utilities[e] = y;
            self.data.set_category(e, k);
        }
    }

    /// Observed-data log-likelihood from the cached predictors.
    pub fn loglik(&self) -> f64 {
        self.data
            .entries()
            .iter()
            .enumerate()
            .map(|(e, r)| self.state.rubrics[self.state.classes[r.user]].ln_cell_mass(r.category, self.mu(e)))
            .sum()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.ws
            .attempts
            .iter()
            .zip(&self.ws.accepts)
            .map(|(&n, &a)| if n == 0 { 0.0 } else { a as f64 / n as f64 })
            .collect()
    }

    pub fn draw(&self) -> Draw {
        let st = &self.state;
        // with L = 0 the empty factor blocks cost nothing and keep draws usable
        let keep = self.hyper.store_factors || self.hyper.factors == 0;
        Draw {
            sweep: self.sweep as usize - 1,
            classes: st.classes.clone(),
            weights: st.weights.clone(),
            rubrics: st.rubrics.clone(),
            coefficients: st.coefficients.clone(),
            item_effects: st.item_effects.clone(),
            basis_coefs: st.basis_coefs.clone(),
            scales: st.scales,
            user_factors: keep.then(|| st.user_factors.clone()),
            item_factors: keep.then(|| st.item_factors.clone()),
            loglik: self.loglik(),
        }
    }

    pub fn meta(&self) -> ChainMeta {
        ChainMeta {
            seed: self.hyper.seed,
            warmup: self.hyper.warmup,
            samples: self.hyper.samples,
            thin: self.hyper.thin,
            rubrics: self.hyper.rubrics,
            factors: self.hyper.factors,
            categories: self.data.categories(),
            acceptance: self.acceptance_rates(),
            fallbacks: self.ws.fallbacks,
        }
    }

    /// Runs the remaining warmup and sampling sweeps. `hook` sees the
    /// sampler after every sweep (progress, checkpoints).
    pub fn run<F>(&mut self, mut hook: F) -> Result<PosteriorSamples>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        let warmup = self.hyper.warmup as u64;
        let total = warmup + self.hyper.samples as u64;
        let thin = self.hyper.thin as u64;
        let report = (total / 20).max(1);
        while self.sweep < total {
            self.sweep()?;
            let t = self.sweep;
            if t > warmup && (t - warmup) % thin == 0 {
                self.retained.push(self.draw());
            }
            if t % report == 0 {
                let acc = self.acceptance_rates();
                let mean_acc = acc.iter().sum::<f64>() / acc.len() as f64;
                log::info!(
                    "sweep {t}/{total}: mean rubric acceptance {mean_acc:.3}, log-likelihood {:.3}",
                    self.loglik()
                );
            }
            hook(self)?;
        }
        Ok(PosteriorSamples { meta: self.meta(), draws: self.retained.clone() })
    }
}

fn check_inputs(data: &RatingsDataset, items: &ItemTable, basis: &SpatialBasis, hyper: &Hyperparameters) -> Result<()> {
    hyper.validate()?;
    if items.len() != data.num_items() {
        return Err(Error::Config(format!("item table has {} rows for {} items", items.len(), data.num_items())));
    }
    if basis.rank() > 0 && basis.num_items() != data.num_items() {
        return Err(Error::Config(format!(
            "spatial basis has {} rows for {} items",
            basis.num_items(),
            data.num_items()
        )));
    }
    Ok(())
}

fn build_workspace(
    data: &RatingsDataset,
    items: &ItemTable,
    basis: &SpatialBasis,
    hyper: &Hyperparameters,
    state: &ModelState,
) -> Result<SamplerWorkspace> {
    let p = items.covariate_dim();
    let r = basis.rank();
    let mut covariate_gram = DMatrix::zeros(p, p);
    let mut basis_gram = DMatrix::zeros(r, r);
    for i in 0..data.num_items() {
        let n = data.item_entries(i).len() as f64;
        if n == 0.0 {
            continue;
        }
        let x = DVector::from_column_slice(items.covariate(i));
        covariate_gram += &x * x.transpose() * n;
        if r > 0 {
            let psi = DVector::from_column_slice(basis.row(i));
            basis_gram += &psi * psi.transpose() * n;
        }
    }
    if p > 0 && hyper.coefficient_precision == 0.0 && nalgebra::Cholesky::new(covariate_gram.clone()).is_none() {
        return Err(Error::RankDeficient { block: "gamma" });
    }
    let m = state.rubrics.len();
    Ok(SamplerWorkspace {
        fixed: vec![0.0; data.num_items()],
        spatial: vec![0.0; data.num_items()],
        interaction: vec![0.0; data.len()],
        covariate_gram,
        basis_gram,
        proposals: vec![ProposalCache::default(); m],
        attempts: vec![0; m],
        accepts: vec![0; m],
        fallbacks: 0,
    })
}

/// Full chain from a prior initialization.
pub fn run_chain(
    data: &RatingsDataset,
    items: &ItemTable,
    basis: &SpatialBasis,
    hyper: &Hyperparameters,
) -> Result<PosteriorSamples> {
    Sampler::new(data, items, basis, hyper)?.run(|_| Ok(()))
}
