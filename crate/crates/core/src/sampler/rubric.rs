//! Break-point update for a single rubric.
//!
//! The rubric is reparametrized as `δ_1 = θ_1`, `δ_k = ln(θ_k − θ_{k−1})`,
//! which removes the ordering constraint. The full conditional (latent
//! utilities integrated out) is approximated by a Gaussian at its δ-space
//! mode and used as an independence Metropolis–Hastings proposal. The
//! approximation is rebuilt every `refresh` calls.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{ln_rubric_prior, Rubric};
use crate::normal;

const MAX_NEWTON_ITERS: usize = 100;
const GRADIENT_TOL: f64 = 1e-8;
const RANDOM_WALK_SCALE: f64 = 0.1;

pub(crate) fn to_delta(breaks: &[f64]) -> Vec<f64> {
    let mut delta = Vec::with_capacity(breaks.len());
    delta.push(breaks[0]);
    delta.extend(breaks.windows(2).map(|w| (w[1] - w[0]).ln()));
    delta
}

pub(crate) fn from_delta(delta: &[f64]) -> Vec<f64> {
    let mut breaks = Vec::with_capacity(delta.len());
    let mut acc = delta[0];
    breaks.push(acc);
    for d in &delta[1..] {
        acc += d.exp();
        breaks.push(acc);
    }
    breaks
}

/// Full conditional of one rubric in δ-space: prior × cell likelihood of the
/// assigned users' ratings × Jacobian.
pub struct RubricTarget<'a> {
    /// (category, linear predictor) for every rating of an assigned user.
    pub obs: &'a [(usize, f64)],
    pub scale: f64,
}

impl RubricTarget<'_> {
    /// Log density on the break-point scale, including the prior.
    pub fn ln_density_theta(&self, breaks: &[f64]) -> f64 {
        let prior = ln_rubric_prior(breaks, self.scale);
        if prior == f64::NEG_INFINITY {
            return prior;
        }
        let k_max = breaks.len() + 1;
        let mut total = prior;
        for &(z, mu) in self.obs {
            let lo = if z == 1 { f64::NEG_INFINITY } else { breaks[z - 2] - mu };
            let hi = if z == k_max { f64::INFINITY } else { breaks[z - 1] - mu };
            total += normal::ln_interval_mass(lo, hi);
        }
        total
    }

    pub fn ln_density(&self, delta: &[f64]) -> f64 {
        let breaks = from_delta(delta);
        let v = self.ln_density_theta(&breaks);
        let jac: f64 = delta[1..].iter().sum();
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v + jac
        }
    }

    pub fn gradient(&self, delta: &[f64]) -> Vec<f64> {
        let breaks = from_delta(delta);
        let n = breaks.len();
        let k_max = n + 1;
        let var = self.scale * self.scale;
        let mut g_theta: Vec<f64> = breaks.iter().map(|b| -b / var).collect();
        for &(z, mu) in self.obs {
            let lo = if z == 1 { f64::NEG_INFINITY } else { breaks[z - 2] - mu };
            let hi = if z == k_max { f64::INFINITY } else { breaks[z - 1] - mu };
            let ln_mass = normal::ln_interval_mass(lo, hi);
            if z < k_max {
                g_theta[z - 1] += normal::density_ratio(hi, ln_mass);
            }
            if z > 1 {
                g_theta[z - 2] -= normal::density_ratio(lo, ln_mass);
            }
        }
        // chain rule: ∂θ_j/∂δ_1 = 1, ∂θ_j/∂δ_k = e^{δ_k} for j ≥ k
        let mut g = vec![0.0; n];
        let mut tail = 0.0;
        for k in (0..n).rev() {
            tail += g_theta[k];
            g[k] = if k == 0 { tail } else { delta[k].exp() * tail + 1.0 };
        }
        g
    }

    fn hessian(&self, delta: &[f64]) -> DMatrix<f64> {
        let n = delta.len();
        let mut h = DMatrix::zeros(n, n);
        let mut x = delta.to_vec();
        for j in 0..n {
            let step = 1e-5 * delta[j].abs().max(1.0);
            x[j] = delta[j] + step;
            let gp = self.gradient(&x);
            x[j] = delta[j] - step;
            let gm = self.gradient(&x);
            x[j] = delta[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Gaussian approximation at the δ-space mode.
#[derive(Clone, Debug)]
pub struct LaplaceProposal {
    pub mode: DVector<f64>,
    /// Cholesky factor of the negative Hessian (the proposal precision).
    precision: Cholesky<f64, Dyn>,
}

impl LaplaceProposal {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.mode.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let offset = self.precision.l().transpose().solve_upper_triangular(&z).expect("positive diagonal");
        (&self.mode + offset).iter().copied().collect()
    }

    /// Log density up to a constant shared by all points.
    pub fn ln_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mode;
        let w = self.precision.l().transpose() * diff;
        -0.5 * w.norm_squared()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision.inverse()
    }

    /// Mode and the row-major lower Cholesky factor of the precision.
    pub fn to_parts(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.precision.l();
        let n = l.nrows();
        let rows = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        (self.mode.iter().copied().collect(), rows)
    }

    pub fn from_parts(mode: Vec<f64>, factor: Vec<f64>) -> Option<Self> {
        let n = mode.len();
        if factor.len() != n * n {
            return None;
        }
        let l = DMatrix::from_row_slice(n, n, &factor);
        let lower_ok = (0..n).all(|i| l[(i, i)] > 0.0 && (i + 1..n).all(|j| l[(i, j)] == 0.0));
        if !lower_ok {
            return None;
        }
        Some(Self { mode: DVector::from_vec(mode), precision: Cholesky::pack_dirty(l) })
    }
}

/// Damped Newton ascent on the δ-space log density with a finite-difference
/// Hessian. `None` when it fails to converge to a point with a negative
/// definite Hessian.
pub fn laplace_proposal(target: &RubricTarget<'_>, start: &[f64]) -> Option<LaplaceProposal> {
    let n = start.len();
    let tol = GRADIENT_TOL * (1.0 + target.obs.len() as f64);
    let mut x = DVector::from_column_slice(start);
    let mut fx = target.ln_density(x.as_slice());
    if !fx.is_finite() {
        return None;
    }
    let mut converged = false;
    for _ in 0..MAX_NEWTON_ITERS {
        let g = DVector::from_vec(target.gradient(x.as_slice()));
        if g.amax() <= tol {
            converged = true;
            break;
        }
        let neg_h = -target.hessian(x.as_slice());
        let mut damping = 0.0;
        let chol = loop {
            let mut m = neg_h.clone();
            for i in 0..n {
                m[(i, i)] += damping;
            }
            if let Some(c) = Cholesky::new(m) {
                break c;
            }
            damping = if damping == 0.0 { 1e-6 * neg_h.diagonal().amax().max(1.0) } else { damping * 10.0 };
            if damping > 1e12 {
                return None;
            }
        };
        let step = chol.solve(&g);
        let decrement = g.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let cand = &x + &step * t;
            let fc = target.ln_density(cand.as_slice());
            if fc.is_finite() && fc >= fx {
                x = cand;
                fx = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // no ascent possible; accept if already at machine-level optimum
            converged = decrement.abs() < 1e-10;
            break;
        }
    }
    if !converged {
        return None;
    }
    let precision = Cholesky::new(-target.hessian(x.as_slice()))?;
    Some(LaplaceProposal { mode: x, precision })
}

/// Cached proposal plus the number of times it has been used.
#[derive(Clone, Debug, Default)]
pub struct ProposalCache {
    pub proposal: Option<LaplaceProposal>,
    pub age: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RubricStep {
    /// The independence (Laplace) proposal was accepted.
    pub accepted: bool,
    /// The follow-up random-walk proposal was accepted.
    pub walk_accepted: bool,
    /// Mode finding failed; only the random-walk step ran.
    pub fallback: bool,
}

impl RubricStep {
    pub fn moved(&self) -> bool {
        self.accepted || self.walk_accepted
    }
}

/// Metropolis accept/reject of `candidate`; `ln_correction` is the
/// proposal-density term of the log ratio.
fn accept<R: Rng + ?Sized>(
    target: &RubricTarget<'_>,
    f_current: f64,
    candidate: Vec<f64>,
    ln_correction: f64,
    rng: &mut R,
) -> Option<(Vec<f64>, f64)> {
    let f_cand = target.ln_density(&candidate);
    let ln_ratio = f_cand - f_current + ln_correction;
    let u: f64 = rng.random();
    let ordered = Rubric::new(from_delta(&candidate)).is_ok();
    (ordered && f_cand.is_finite() && u.ln() < ln_ratio).then_some((candidate, f_cand))
}

/// One update of a rubric given its assigned ratings: an independence
/// Metropolis–Hastings step with the Laplace proposal, then a random-walk
/// Metropolis step shaped by the same covariance. The second step keeps the
/// chain moving in the heavy small-gap tail that the Gaussian proposal
/// under-covers.
pub fn update_rubric_laplace<R: Rng + ?Sized>(
    rubric: &Rubric,
    target: &RubricTarget<'_>,
    cache: &mut ProposalCache,
    refresh: usize,
    rng: &mut R,
) -> (Rubric, RubricStep) {
    let mut current = to_delta(rubric.breaks());
    if cache.proposal.is_none() || cache.age >= refresh {
        cache.proposal = laplace_proposal(target, &current);
        cache.age = 0;
    }
    let mut f_current = target.ln_density(&current);
    let mut step = RubricStep::default();
    let n = current.len();
    let walk: Vec<f64> = match &cache.proposal {
        Some(q) => {
            cache.age += 1;
            let cand = q.draw(rng);
            let correction = q.ln_density(&current) - q.ln_density(&cand);
            if let Some((x, f)) = accept(target, f_current, cand, correction, rng) {
                current = x;
                f_current = f;
                step.accepted = true;
            }
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
            let offset = q.precision.l().transpose().solve_upper_triangular(&z).expect("positive diagonal");
            let scale = 2.38 / (n as f64).sqrt();
            offset.iter().map(|o| scale * o).collect()
        }
        None => {
            step.fallback = true;
            (0..n).map(|_| RANDOM_WALK_SCALE * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
        }
    };
    let cand: Vec<f64> = current.iter().zip(&walk).map(|(x, w)| x + w).collect();
    if let Some((x, _)) = accept(target, f_current, cand, 0.0, rng) {
        current = x;
        step.walk_accepted = true;
    }
    if !step.moved() {
        return (rubric.clone(), step);
    }
    (Rubric::new(from_delta(&current)).expect("ordered by construction"), step)
}
