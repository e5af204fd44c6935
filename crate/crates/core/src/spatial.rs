//! Low-rank spatial basis for the item field `W(s) = ψ(s)ᵀη`.
//!
//! The spectral basis takes the leading eigenpairs of the squared-exponential
//! covariogram `Ξᵢⱼ = exp(−ρ‖sᵢ − sⱼ‖²)` over the item locations, so that
//! `ΨΨᵀ` is the best rank-r approximation of `Ξ` in Frobenius norm. Points
//! away from the knots are evaluated with the Nyström extension
//! `ψ(s) = D_r^{−1/2} Γ_rᵀ k(s)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::RankRule;

/// Above this many locations the leading eigenpairs are found iteratively.
pub const DENSE_EIGEN_LIMIT: usize = 4000;

/// Eigenvalues below this fraction of the largest are treated as zero.
const CLAMP_RELATIVE: f64 = 1e-10;

const ITERATIVE_TOL: f64 = 1e-8;

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn kernel(a: [f64; 2], b: [f64; 2], bandwidth: f64) -> f64 {
    (-bandwidth * sq_dist(a, b)).exp()
}

/// Squared-exponential covariogram over raw longitude/latitude degrees.
pub fn build_covariogram(locations: &[[f64; 2]], bandwidth: f64) -> Result<DMatrix<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if locations.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
        return Err(Error::Data("non-finite location".into()));
    }
    let n = locations.len();
    let columns: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| (0..n).map(move |i| kernel(locations[i], locations[j], bandwidth)))
        .collect();
    Ok(DMatrix::from_vec(n, n, columns))
}

/// Smallest r with `Σ_{d≤r} D_d² / Σ_d D_d² ≥ fraction`.
pub fn select_rank(eigenvalues: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("rank fraction {fraction} outside (0, 1]")));
    }
    let total: f64 = eigenvalues.iter().map(|d| d * d).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateKernel);
    }
    select_rank_with_total(eigenvalues, fraction, total).ok_or(Error::DegenerateKernel)
}

fn select_rank_with_total(eigenvalues: &[f64], fraction: f64, total: f64) -> Option<usize> {
    if fraction >= 1.0 {
        // the whole spectrum; avoids rounding in the running sum
        return eigenvalues.iter().any(|&d| d > 0.0).then_some(eigenvalues.len());
    }
    let mut acc = 0.0;
    for (d, value) in eigenvalues.iter().enumerate() {
        acc += value * value;
        if acc / total >= fraction {
            return Some(d + 1);
        }
    }
    None
}

#[derive(Clone, Debug)]
enum Kind {
    /// No spatial term.
    Empty,
    /// Leading eigenvectors of the covariogram.
    Spectral { vectors: DMatrix<f64>, retained: Vec<f64> },
    /// Gaussian radial functions centred at fixed points.
    Radial { centers: Vec<[f64; 2]> },
}

/// Fixed design `Ψ` (one row per item) plus the rule that evaluates it anywhere.
#[derive(Clone, Debug)]
pub struct SpatialBasis {
    knots: Vec<[f64; 2]>,
    bandwidth: f64,
    rank: usize,
    /// Leading spectrum, descending and clamped at zero.
    eigenvalues: Vec<f64>,
    /// ‖Ξ‖²_F = Σ_d D_d².
    total_sq: f64,
    psi: Vec<f64>,
    kind: Kind,
}

impl SpatialBasis {
    /// A rank-0 basis: the spatial term is identically zero.
    pub fn empty(locations: &[[f64; 2]]) -> Self {
        Self {
            knots: locations.to_vec(),
            bandwidth: f64::NAN,
            rank: 0,
            eigenvalues: Vec::new(),
            total_sq: 0.0,
            psi: Vec::new(),
            kind: Kind::Empty,
        }
    }

    /// `ψ_j(s) = exp(−ρ‖s − c_j‖²)` for the given centers.
    pub fn radial(locations: &[[f64; 2]], centers: Vec<[f64; 2]>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let rank = centers.len();
        let psi = locations.iter().flat_map(|&s| centers.iter().map(move |&c| kernel(s, c, bandwidth))).collect();
        Ok(Self {
            knots: locations.to_vec(),
            bandwidth,
            rank,
            eigenvalues: Vec::new(),
            total_sq: 0.0,
            psi,
            kind: Kind::Radial { centers },
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn knots(&self) -> &[[f64; 2]] {
        &self.knots
    }

    pub fn num_items(&self) -> usize {
        self.knots.len()
    }

    /// Computed spectrum (all of it for the dense path).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Squared-eigenvalue share captured by the retained block.
    pub fn captured_fraction(&self) -> Option<f64> {
        match self.kind {
            Kind::Spectral { .. } => Some(self.captured_at(self.rank)),
            _ => None,
        }
    }

    /// Squared-eigenvalue share of the first `r` eigenvalues.
    pub fn captured_at(&self, r: usize) -> f64 {
        if self.total_sq <= 0.0 {
            return 0.0;
        }
        let head: f64 = self.eigenvalues.iter().take(r).map(|d| d * d).sum();
        (head / self.total_sq).min(1.0)
    }

    /// Row `i` of Ψ.
    #[inline]
    pub fn row(&self, item: usize) -> &[f64] {
        &self.psi[item * self.rank..(item + 1) * self.rank]
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.knots.len(), self.rank, &self.psi)
    }

    /// `ψ(s)` at an arbitrary location.
    pub fn evaluate(&self, s: [f64; 2]) -> Vec<f64> {
        match &self.kind {
            Kind::Empty => Vec::new(),
            Kind::Radial { centers } => centers.iter().map(|&c| kernel(s, c, self.bandwidth)).collect(),
            Kind::Spectral { vectors, retained } => {
                let k = DVector::from_iterator(
                    self.knots.len(),
                    self.knots.iter().map(|&knot| kernel(s, knot, self.bandwidth)),
                );
                let proj = vectors.tr_mul(&k);
                proj.iter().zip(retained).map(|(p, d)| p / d.sqrt()).collect()
            }
        }
    }

    /// (index, eigenvalue, cumulative captured fraction) rows for diagnostics.
    pub fn spectrum_table(&self) -> Vec<(usize, f64, f64)> {
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                acc += v * v;
                let frac = if self.total_sq > 0.0 { (acc / self.total_sq).min(1.0) } else { 0.0 };
                (d + 1, v, frac)
            })
            .collect()
    }
}

/// Optimal rank-r spectral basis of the covariogram.
pub fn build_basis(locations: &[[f64; 2]], bandwidth: f64, rule: RankRule) -> Result<SpatialBasis> {
    build_basis_with_limit(locations, bandwidth, rule, DENSE_EIGEN_LIMIT)
}

pub(crate) fn build_basis_with_limit(
    locations: &[[f64; 2]],
    bandwidth: f64,
    rule: RankRule,
    dense_limit: usize,
) -> Result<SpatialBasis> {
    let n = locations.len();
    if let RankRule::Fixed(r) = rule {
        if r > n {
            return Err(Error::Rank { requested: r, available: n });
        }
        if r == 0 {
            let mut b = SpatialBasis::empty(locations);
            b.bandwidth = bandwidth;
            return Ok(b);
        }
    }
    if n == 0 {
        return Err(Error::DegenerateKernel);
    }
    let xi = build_covariogram(locations, bandwidth)?;
    let total_sq = xi.norm_squared();

    let (values, vectors) =
        if n <= dense_limit { dense_spectrum(xi) } else { iterative_spectrum(&xi, rule, total_sq)? };
    let values = clamp_spectrum(values);

    let requested = match rule {
        RankRule::Fixed(r) => r,
        RankRule::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("rank fraction {f} outside (0, 1]")));
            }
            select_rank_with_total(&values, f, total_sq).ok_or(Error::DegenerateKernel)?
        }
    };
    // zero eigenvalues cannot enter D^{-1/2}
    let positive = values.iter().take_while(|&&d| d > 0.0).count();
    if positive == 0 {
        return Err(Error::DegenerateKernel);
    }
    let rank = requested.min(positive);

    let kept = vectors.columns(0, rank).into_owned();
    let retained: Vec<f64> = values[..rank].to_vec();
    let mut psi = vec![0.0; n * rank];
    for i in 0..n {
        for d in 0..rank {
            psi[i * rank + d] = kept[(i, d)] * retained[d].sqrt();
        }
    }
    Ok(SpatialBasis {
        knots: locations.to_vec(),
        bandwidth,
        rank,
        eigenvalues: values,
        total_sq,
        psi,
        kind: Kind::Spectral { vectors: kept, retained },
    })
}

fn clamp_spectrum(mut values: Vec<f64>) -> Vec<f64> {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < CLAMP_RELATIVE * top {
            *v = 0.0;
        }
    }
    values
}

/// Full symmetric decomposition, sorted descending.
fn dense_spectrum(xi: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = xi.nrows();
    let eig = SymmetricEigen::new(xi);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // fix the sign so the basis does not depend on solver internals
        if let Some(pivot) = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
            if pivot < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Leading eigenpairs by block subspace iteration with Rayleigh–Ritz
/// extraction; the block grows until the rank rule is satisfied.
fn iterative_spectrum(xi: &DMatrix<f64>, rule: RankRule, total_sq: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = xi.nrows();
    let mut wanted = match rule {
        RankRule::Fixed(r) => r,
        RankRule::Fraction(_) => 64.min(n),
    };
    loop {
        let (values, vectors) = top_eigenpairs(xi, wanted)?;
        let done = match rule {
            RankRule::Fixed(_) => true,
            RankRule::Fraction(f) => {
                wanted >= n || f < 1.0 && select_rank_with_total(&clamp_spectrum(values.clone()), f, total_sq).is_some()
            }
        };
        if done {
            return Ok((values, vectors));
        }
        wanted = (wanted * 2).min(n);
    }
}

pub(crate) fn top_eigenpairs(xi: &DMatrix<f64>, wanted: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = xi.nrows();
    let block = (wanted + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba515);
    let start = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    let mut q = xi * start;
    q = q.qr().q();
    for _ in 0..5000 {
        let z = xi * &q;
        let t = q.tr_mul(&z);
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
        let top = values[0].abs().max(f64::MIN_POSITIVE);
        let mut vectors = DMatrix::zeros(n, wanted);
        for (dst, &src) in order.iter().take(wanted).enumerate() {
            vectors.set_column(dst, &(&q * eig.eigenvectors.column(src)));
        }
        // Ritz residuals ‖Ξv − λv‖; Ξv is z times the small eigenvector.
        let converged = order.iter().take(wanted).enumerate().all(|(j, &src)| {
            let xv = &z * eig.eigenvectors.column(src);
            (xv - vectors.column(j) * values[j]).norm() <= ITERATIVE_TOL * top
        });
        if converged {
            for mut col in vectors.column_iter_mut() {
                if let Some(pivot) = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
                    if pivot < 0.0 {
                        col.neg_mut();
                    }
                }
            }
            return Ok((values[..wanted].to_vec(), vectors));
        }
        q = z.qr().q();
    }
    Err(Error::Config("subspace iteration did not converge".into()))
}
