//! Posterior functionals of a fitted chain.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ItemTable, Rating, RatingsDataset, Rubric};
use crate::normal;
use crate::samples::{Draw, PosteriorSamples};
use crate::spatial::SpatialBasis;

/// Floor applied to each pair's predictive probability.
pub const PREDICTIVE_FLOOR: f64 = 1e-300;

/// `Σ_k k·[Φ((θ_k − ξ)/s) − Φ((θ_{k−1} − ξ)/s)]` with `s = √(1 + ‖β‖²)`:
/// the expected rating under one rubric once the user factor is integrated
/// out.
pub fn expected_rating(rubric: &Rubric, xi: f64, beta_sq: f64) -> f64 {
    let s = (1.0 + beta_sq).sqrt();
    // Σ_k k·P(Z = k) = 1 + Σ_{k<K} P(Z > k)
    1.0 + rubric.breaks().iter().map(|t| normal::sf((t - xi) / s)).sum::<f64>()
}

fn item_terms(draw: &Draw, items: &ItemTable, basis: &SpatialBasis, item: usize) -> Result<(f64, f64)> {
    if draw.item_factors.is_none() {
        return Err(Error::State("item factors were not stored in this chain".into()));
    }
    let beta_sq = draw.item_factor(item).iter().map(|b| b * b).sum();
    Ok((draw.item_baseline(items, basis, item), beta_sq))
}

/// λᵢ for one draw.
pub fn item_quality(draw: &Draw, items: &ItemTable, basis: &SpatialBasis, item: usize) -> Result<f64> {
    let (xi, beta_sq) = item_terms(draw, items, basis, item)?;
    Ok(draw.rubrics.iter().zip(&draw.weights).map(|(r, w)| w * expected_rating(r, xi, beta_sq)).sum())
}

/// λᵢₘ for one draw.
pub fn rubric_adjusted_quality(
    draw: &Draw,
    items: &ItemTable,
    basis: &SpatialBasis,
    item: usize,
    rubric: usize,
) -> Result<f64> {
    let (xi, beta_sq) = item_terms(draw, items, basis, item)?;
    Ok(expected_rating(&draw.rubrics[rubric], xi, beta_sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemQuality {
    pub item: usize,
    pub draws: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Mean observed rating; `None` for unrated items.
    pub empirical_mean: Option<f64>,
    pub count: usize,
    /// `[rubric][draw]` values of λᵢₘ when requested.
    pub by_rubric: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub items: Vec<ItemQuality>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn quality_summary(
    samples: &PosteriorSamples,
    data: &RatingsDataset,
    items: &ItemTable,
    basis: &SpatialBasis,
    with_rubrics: bool,
) -> Result<QualitySummary> {
    let rows = (0..data.num_items())
        .into_par_iter()
        .map(|i| {
            let draws = samples.draws.iter().map(|d| item_quality(d, items, basis, i)).collect::<Result<Vec<_>>>()?;
            let (mean, sd) = mean_sd(&draws);
            let list = data.item_entries(i);
            let empirical_mean = (!list.is_empty())
                .then(|| list.iter().map(|&e| data.entries()[e].category as f64).sum::<f64>() / list.len() as f64);
            let by_rubric = if with_rubrics {
                let m = samples.meta.rubrics;
                Some(
                    (0..m)
                        .map(|r| {
                            samples
                                .draws
                                .iter()
                                .map(|d| rubric_adjusted_quality(d, items, basis, i, r))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(ItemQuality { item: i, draws, mean, sd, empirical_mean, count: list.len(), by_rubric })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualitySummary { items: rows })
}

/// Posterior probabilities that two users share a rubric.
#[derive(Clone, Debug, PartialEq)]
pub struct CoclusterMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CoclusterMatrix {
    /// From a dense row-major matrix.
    pub fn from_dense(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Data(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n + v]
    }
}

pub fn coclustering(samples: &PosteriorSamples) -> Result<CoclusterMatrix> {
    let t = samples.draws.len();
    if t == 0 {
        return Err(Error::Data("no retained draws".into()));
    }
    let n = samples.num_users();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|u| {
            let mut counts = vec![0u32; n];
            for d in &samples.draws {
                let c = d.classes[u];
                for (v, cv) in d.classes.iter().enumerate() {
                    counts[v] += (*cv == c) as u32;
                }
            }
            counts.into_iter().map(move |k| k as f64 / t as f64)
        })
        .collect();
    Ok(CoclusterMatrix { n, data })
}

/// `Σ_{u<u'} |1[c_u = c_u'] − Π_{uu'}|`.
pub fn binder_loss(assignment: &[usize], pi: &CoclusterMatrix) -> f64 {
    let n = assignment.len();
    (0..n)
        .map(|u| {
            (u + 1..n)
                .map(|v| {
                    let same = (assignment[u] == assignment[v]) as u8 as f64;
                    (same - pi.get(u, v)).abs()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Labels renumbered in order of first appearance.
pub fn canonical_partition(assignment: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    assignment
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

/// The sampled partition with the smallest Binder loss (labels as in the
/// first draw that visited it).
pub fn binder_cluster(samples: &PosteriorSamples, pi: &CoclusterMatrix) -> Result<Vec<usize>> {
    if samples.draws.is_empty() {
        return Err(Error::Data("no retained draws".into()));
    }
    let mut seen = HashMap::new();
    for (t, d) in samples.draws.iter().enumerate() {
        seen.entry(canonical_partition(&d.classes)).or_insert(t);
    }
    let mut candidates: Vec<usize> = seen.into_values().collect();
    candidates.sort_unstable();
    let losses: Vec<f64> = candidates.par_iter().map(|&t| binder_loss(&samples.draws[t].classes, pi)).collect();
    let best =
        losses.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| candidates[j]).expect("nonempty");
    Ok(samples.draws[best].classes.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    /// Average over the test pairs.
    pub mean: f64,
    /// Log predictive probability of each test pair.
    pub per_pair: Vec<f64>,
}

impl HeldOut {
    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        let (_, sd) = mean_sd(&self.per_pair);
        sd / (self.per_pair.len() as f64).sqrt()
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log of one draw's predictive probability of a rating.
pub fn draw_log_predictive(
    draw: &Draw,
    items: &ItemTable,
    basis: &SpatialBasis,
    rating: &Rating,
    seen: bool,
) -> Result<f64> {
    let mu = draw.predictor(items, basis, rating.item, rating.user)?;
    if seen {
        return Ok(draw.rubrics[draw.classes[rating.user]].ln_cell_mass(rating.category, mu));
    }
    let terms: Vec<f64> =
        draw.rubrics.iter().zip(&draw.weights).map(|(r, w)| w.ln() + r.ln_cell_mass(rating.category, mu)).collect();
    Ok(log_sum_exp(&terms))
}

/// Held-out log-likelihood. `seen[u]` says whether user u had training
/// ratings; unseen users are scored under the ω-mixture of each draw.
pub fn heldout_loglik(
    samples: &PosteriorSamples,
    test: &[Rating],
    seen: &[bool],
    items: &ItemTable,
    basis: &SpatialBasis,
) -> Result<HeldOut> {
    let t = samples.draws.len();
    if t == 0 {
        return Err(Error::Data("no retained draws".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let floor = PREDICTIVE_FLOOR.ln();
    let ln_t = (t as f64).ln();
    let per_pair = test
        .par_iter()
        .map(|r| {
            let is_seen = seen.get(r.user).copied().unwrap_or(false);
            let terms = samples
                .draws
                .iter()
                .map(|d| draw_log_predictive(d, items, basis, r, is_seen))
                .collect::<Result<Vec<_>>>()?;
            Ok((log_sum_exp(&terms) - ln_t).max(floor))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(HeldOut { mean, per_pair })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub mean: f64,
    pub sd: f64,
}

/// Posterior mean and sd of `W(s) = ψ(s)ᵀη` at each location.
pub fn spatial_field_summary(
    samples: &PosteriorSamples,
    basis: &SpatialBasis,
    locations: &[[f64; 2]],
) -> Vec<FieldSummary> {
    locations
        .par_iter()
        .map(|&s| {
            let psi = basis.evaluate(s);
            let values: Vec<f64> =
                samples.draws.iter().map(|d| psi.iter().zip(&d.basis_coefs).map(|(a, b)| a * b).sum()).collect();
            let (mean, sd) = mean_sd(&values);
            FieldSummary { mean, sd }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricProfile {
    pub rubric: usize,
    pub users: usize,
    pub ratings: usize,
    /// Rating proportions by category; `None` when no ratings fall here.
    pub proportions: Option<Vec<f64>>,
}

/// Occupancy and rating distribution of each rubric under an assignment.
pub fn rubric_profile(assignment: &[usize], data: &RatingsDataset, rubrics: usize) -> Vec<RubricProfile> {
    let k = data.categories();
    let mut users = vec![0; rubrics];
    let mut counts = vec![vec![0usize; k]; rubrics];
    for (u, &m) in assignment.iter().enumerate() {
        users[m] += 1;
        for &e in data.user_entries(u) {
            counts[m][data.entries()[e].category - 1] += 1;
        }
    }
    (0..rubrics)
        .map(|m| {
            let n: usize = counts[m].iter().sum();
            RubricProfile {
                rubric: m,
                users: users[m],
                ratings: n,
                proportions: (n > 0).then(|| counts[m].iter().map(|&c| c as f64 / n as f64).collect()),
            }
        })
        .collect()
}
