//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stderr, outside the harness capture, so the verdicts show up in a plain
//! `cargo test` log.

use std::io::Write;
use std::time::{Duration, Instant};

use multirubric::analysis::{item_quality, rubric_adjusted_quality};
use multirubric::model::Rating;
use multirubric::sampler::{draw_prior_state, ln_variance_target, slice_sample_variance};
use multirubric::sim::{
    ks_standard_normal, random_rotation, rotate_factors, tau_mixture, FactorStudyConfig, TauStudyConfig, P1, P2,
};
use multirubric::{
    build_basis, generate_dataset, linear_predictor, run_chain, run_factor_recovery_study, run_tau_study, select_rank,
    tv_distance, Conditional, Draw, Factors, Hyperparameters, ItemTable, ModelState, RankRule, RatingsDataset, Rubric,
    Sampler, Scales, SimConfig, SpatialBasis,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(label: &str, pass: bool, detail: &str, elapsed: Duration) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {verdict} {label}: {detail} ({:.1?})", elapsed);
    pass
}

/// Φ through the complementary error function, kept apart from the
/// library's own normal routines.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// KS distance between draws and a continuous CDF.
fn ks_distance(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let f = cdf(v);
            f64::max(f - j as f64 / n, (j + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// CDF of an unnormalized log density tabulated on a uniform grid, by the
/// trapezoid rule with linear interpolation between nodes.
fn grid_cdf(lo: f64, hi: f64, nodes: usize, ln_f: impl Fn(f64) -> f64) -> impl Fn(f64) -> f64 {
    let h = (hi - lo) / (nodes - 1) as f64;
    let logs: Vec<f64> = (0..nodes).map(|j| ln_f(lo + j as f64 * h)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mut cum = vec![0.0; nodes];
    for j in 1..nodes {
        cum[j] = cum[j - 1] + 0.5 * h * (dens[j] + dens[j - 1]);
    }
    let total = cum[nodes - 1];
    move |x: f64| {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let t = (x - lo) / h;
        let j = (t.floor() as usize).min(nodes - 2);
        let w = t - j as f64;
        (cum[j] * (1.0 - w) + cum[j + 1] * w) / total
    }
}

fn minimal_hyper() -> Hyperparameters {
    Hyperparameters {
        rubrics: 1,
        factors: 0,
        rank: RankRule::Fixed(0),
        warmup: 0,
        samples: 1,
        thin: 1,
        proposal_refresh: 1,
        coherence_check: 1,
        ..Hyperparameters::default()
    }
}

#[test]
fn tv_identity_on_the_tau_grid() {
    let t0 = Instant::now();
    let worst = (0..=10)
        .map(|j| {
            let tau = j as f64 / 10.0;
            let q = tau_mixture(tau, &P1, &P2).unwrap();
            (tv_distance(&P1, &q) - 0.8 * (1.0 - tau)).abs()
        })
        .fold(0.0, f64::max);
    let pass = worst < 1e-12 && t0.elapsed() < Duration::from_secs(1);
    assert!(report("TV identity on τ = 0, 0.1, …, 1", pass, &format!("max error {worst:.2e}"), t0.elapsed()));
}

#[test]
fn item_quality_matches_monte_carlo() {
    const DRAWS: usize = 10_000_000;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1A3B);
    let items = ItemTable::from_locations(vec![[0.0, 0.0]]);
    let basis = SpatialBasis::empty(items.locations());
    let mut worst_z: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for config in 0..20 {
        let l = 1 + config % 3;
        let xi = 1.5 * normal(&mut rng);
        let beta: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
        let raw: Vec<f64> = (0..3).map(|_| -rng.random::<f64>().ln()).collect();
        let weights: Vec<f64> = raw.iter().map(|w| w / raw.iter().sum::<f64>()).collect();
        let rubrics: Vec<Rubric> = (0..3)
            .map(|_| {
                let mut b: Vec<f64> = (0..4).map(|_| 1.5 * normal(&mut rng)).collect();
                b.sort_by(f64::total_cmp);
                Rubric::new(b).unwrap()
            })
            .collect();
        let draw = Draw {
            sweep: 0,
            classes: Vec::new(),
            weights: weights.clone(),
            rubrics: rubrics.clone(),
            coefficients: Vec::new(),
            item_effects: vec![xi],
            basis_coefs: Vec::new(),
            scales: Scales { item_effect: 1.0, item_factor: 1.0, spatial: 1.0 },
            user_factors: Some(Factors::zeros(0, l)),
            item_factors: Some(Factors::from_rows(std::slice::from_ref(&beta), l).unwrap()),
            loglik: 0.0,
        };
        let lambda = item_quality(&draw, &items, &basis, 0).unwrap();
        let by_rubric: Vec<f64> =
            (0..3).map(|m| rubric_adjusted_quality(&draw, &items, &basis, 0, m).unwrap()).collect();
        let mixed: f64 = weights.iter().zip(&by_rubric).map(|(w, q)| w * q).sum();
        worst_sum = worst_sum.max((mixed - lambda).abs());

        // Y = ξ + βᵀα + ε with the class drawn from ω
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..DRAWS {
            let u: f64 = rng.random();
            let class = if u < weights[0] {
                0
            } else if u < weights[0] + weights[1] {
                1
            } else {
                2
            };
            let mut y = xi + normal(&mut rng);
            for b in &beta {
                y += b * normal(&mut rng);
            }
            let z = 1 + rubrics[class].breaks().iter().filter(|&&t| t < y).count();
            s += z as f64;
            ss += (z * z) as f64;
        }
        let n = DRAWS as f64;
        let mean = s / n;
        let se = ((ss / n - mean * mean) / n).sqrt();
        worst_z = worst_z.max((mean - lambda).abs() / se);
    }
    let pass = worst_z <= 3.0 && worst_sum <= 1e-12 && t0.elapsed() < Duration::from_secs(120);
    let detail = format!("max |λ − MC|/SE {worst_z:.2} over 20 configurations, max |Σωλₘ − λ| {worst_sum:.1e}");
    assert!(report("closed-form λ against 10⁷-draw Monte Carlo", pass, &detail, t0.elapsed()));
}

/// 3 items × 2 users, every pair rated, with covariates, factors and a
/// radial basis, at a random prior state.
fn conjugate_toy(seed: u64) -> (RatingsDataset, ItemTable, SpatialBasis, Hyperparameters, ModelState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations: Vec<[f64; 2]> = (0..3).map(|_| [rng.random(), rng.random()]).collect();
    let covariates: Vec<Vec<f64>> = (0..3).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
    let items = ItemTable::new(locations.clone(), covariates).unwrap();
    let basis = SpatialBasis::radial(&locations, vec![[0.2, 0.3], [0.8, 0.6]], 2.0).unwrap();
    let entries = (0..3)
        .flat_map(|i| (0..2).map(move |u| (i, u)))
        .map(|(item, user)| Rating { item, user, category: rng.random_range(1..=5) })
        .collect::<Vec<_>>();
    let data = RatingsDataset::new(5, 3, 2, entries).unwrap();
    let hyper = Hyperparameters { rubrics: 2, factors: 2, coefficient_precision: 0.5, ..minimal_hyper() };
    let state = draw_prior_state(&data, &items, &basis, &hyper, 1.0, &mut rng).unwrap();
    (data, items, basis, hyper, state)
}

/// Dense posterior of `N(0, P₀⁻¹)` prior with unit-variance observations
/// `r = X θ + e`, by explicit inversion.
fn dense_posterior(x: &DMatrix<f64>, r: &DVector<f64>, prior_precision: f64) -> (DVector<f64>, DMatrix<f64>) {
    let k = x.ncols();
    let precision = DMatrix::identity(k, k) * prior_precision + x.transpose() * x;
    let cov = precision.try_inverse().expect("invertible");
    (&cov * x.transpose() * r, cov)
}

fn conjugate_gap(seed: u64) -> f64 {
    let (data, items, basis, hyper, st) = conjugate_toy(seed);
    let sampler = Sampler::with_state(&data, &items, &basis, &hyper, st.clone()).unwrap();
    let entries = data.entries();
    let parts = |e: usize| {
        let r = &entries[e];
        let x: f64 = items.covariate(r.item).iter().zip(&st.coefficients).map(|(a, b)| a * b).sum();
        let f: f64 = st.user_factors.row(r.user).iter().zip(st.item_factors.row(r.item)).map(|(a, b)| a * b).sum();
        let w: f64 = basis.row(r.item).iter().zip(&st.basis_coefs).map(|(a, b)| a * b).sum();
        (x, f, w, st.item_effects[r.item])
    };
    let mut worst: f64 = 0.0;
    let mut compare = |which: Conditional, oracle: (DVector<f64>, DMatrix<f64>)| {
        let (mean, cov) = sampler.conditional(which).unwrap();
        worst = worst.max((mean - oracle.0).amax()).max((cov - oracle.1).amax());
    };

    let all: Vec<usize> = (0..entries.len()).collect();
    let x = DMatrix::from_fn(all.len(), 2, |e, j| items.covariate(entries[e].item)[j]);
    let r = DVector::from_fn(all.len(), |e, _| {
        let (_, f, w, b) = parts(e);
        st.utilities[e] - f - w - b
    });
    compare(Conditional::Coefficients, dense_posterior(&x, &r, hyper.coefficient_precision));

    let psi = DMatrix::from_fn(all.len(), basis.rank(), |e, j| basis.row(entries[e].item)[j]);
    let r = DVector::from_fn(all.len(), |e, _| {
        let (x, f, _, b) = parts(e);
        st.utilities[e] - x - f - b
    });
    compare(Conditional::BasisCoefs, dense_posterior(&psi, &r, st.scales.spatial.powi(-2)));

    for u in 0..2 {
        let mine: Vec<usize> = all.iter().copied().filter(|&e| entries[e].user == u).collect();
        let design = DMatrix::from_fn(mine.len(), 2, |a, j| st.item_factors.row(entries[mine[a]].item)[j]);
        let r = DVector::from_fn(mine.len(), |a, _| {
            let (x, _, w, b) = parts(mine[a]);
            st.utilities[mine[a]] - x - w - b
        });
        compare(Conditional::UserFactors(u), dense_posterior(&design, &r, 1.0));
    }
    for i in 0..3 {
        let mine: Vec<usize> = all.iter().copied().filter(|&e| entries[e].item == i).collect();
        let design = DMatrix::from_fn(mine.len(), 2, |a, j| st.user_factors.row(entries[mine[a]].user)[j]);
        let r = DVector::from_fn(mine.len(), |a, _| {
            let (x, _, w, b) = parts(mine[a]);
            st.utilities[mine[a]] - x - w - b
        });
        compare(Conditional::ItemFactors(i), dense_posterior(&design, &r, st.scales.item_factor.powi(-2)));

        let ones = DMatrix::from_element(mine.len(), 1, 1.0);
        let r = DVector::from_fn(mine.len(), |a, _| {
            let (x, f, w, _) = parts(mine[a]);
            st.utilities[mine[a]] - x - f - w
        });
        compare(Conditional::ItemEffect(i), dense_posterior(&ones, &r, st.scales.item_effect.powi(-2)));
    }
    worst
}

#[test]
fn conjugate_blocks_match_dense_normal_equations() {
    let t0 = Instant::now();
    let worst = (0..10).map(conjugate_gap).fold(0.0, f64::max);
    let pass = worst <= 1e-10;
    let detail = format!("max mean/covariance gap {worst:.1e} over 10 toys");
    assert!(report("conjugate updates vs dense normal equations", pass, &detail, t0.elapsed()));
}

#[test]
fn slice_sampler_matches_variance_posterior() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for (case, &(count, sum_sq)) in [(0usize, 0.0), (5, 3.0), (40, 150.0), (200, 20.0)].iter().enumerate() {
        let n = count as f64;
        // Ga(0.5, 0.5) prior times the Gaussian likelihood, on x = ln v
        let ln_f = |x: f64| {
            let v = x.exp();
            -0.5 * x - 0.5 * v - 0.5 * n * x - 0.5 * sum_sq / v + x
        };
        let cdf = grid_cdf(-30.0, 10.0, 400_001, ln_f);
        let mut rng = ChaCha8Rng::seed_from_u64(90 + case as u64);
        let mut v = 1.0;
        let mut draws = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            v = slice_sample_variance(|v| ln_variance_target(v, count, sum_sq), v, &mut rng).unwrap();
            draws.push(v.ln());
        }
        worst = worst.max(ks_distance(&draws, &cdf));
    }
    let pass = worst < 0.01;
    let detail = format!("max KS {worst:.4} over 4 targets, 10⁵ transitions each");
    assert!(report("slice sampler vs closed-form variance posterior", pass, &detail, t0.elapsed()));
}

/// Functions of the parameters compared between the two simulators.
fn geweke_moments(st: &ModelState) -> [f64; 6] {
    let g = st.coefficients[0];
    let s = st.scales.item_effect;
    let t = st.rubrics[0].breaks()[0];
    [g, g * g, s, s * s, t, t * t]
}

#[test]
fn geweke_joint_distribution_test() {
    const ROUNDS: usize = 10_000;
    const PRIOR_DRAWS: usize = 100_000;
    const BATCHES: usize = 50;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E7E);
    let locations: Vec<[f64; 2]> = (0..5).map(|_| [rng.random(), rng.random()]).collect();
    let covariates: Vec<Vec<f64>> = (0..5).map(|_| vec![normal(&mut rng)]).collect();
    let items = ItemTable::new(locations.clone(), covariates).unwrap();
    let basis = SpatialBasis::radial(&locations, vec![[0.25, 0.5], [0.75, 0.5]], 3.0).unwrap();
    let entries: Vec<Rating> =
        (0..5).flat_map(|i| (0..5).map(move |u| Rating { item: i, user: u, category: 2 })).collect();
    let data = RatingsDataset::new(3, 5, 5, entries).unwrap();
    let hyper = Hyperparameters { rubrics: 2, factors: 1, coefficient_precision: 1.0, seed: 41, ..minimal_hyper() };
    let shape = hyper.dirichlet_shape();

    // marginal-conditional: independent prior draws
    let mut prior = vec![[0.0; 6]; PRIOR_DRAWS];
    for g in prior.iter_mut() {
        *g = geweke_moments(&draw_prior_state(&data, &items, &basis, &hyper, shape, &mut rng).unwrap());
    }

    // successive-conditional: alternate data regeneration and a full sweep
    let start = draw_prior_state(&data, &items, &basis, &hyper, shape, &mut rng).unwrap();
    let mut sampler = Sampler::with_state(&data, &items, &basis, &hyper, start).unwrap();
    let mut chain = Vec::with_capacity(ROUNDS);
    for _ in 0..ROUNDS {
        sampler.regenerate_ratings();
        sampler.sweep().unwrap();
        chain.push(geweke_moments(sampler.state()));
    }

    let names = ["γ", "γ²", "σ_b", "σ_b²", "θ₁", "θ₁²"];
    let mut zs = Vec::new();
    for j in 0..6 {
        let (pm, pv) = mean_var(prior.iter().map(|g| g[j]));
        let (cm, _) = mean_var(chain.iter().map(|g| g[j]));
        let size = ROUNDS / BATCHES;
        let batch_means: Vec<f64> =
            chain.chunks(size).map(|c| c.iter().map(|g| g[j]).sum::<f64>() / size as f64).collect();
        let (_, bv) = mean_var(batch_means.into_iter());
        let se = (pv / PRIOR_DRAWS as f64 + bv / BATCHES as f64).sqrt();
        zs.push((cm - pm) / se);
    }
    let worst = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    let detail = names.iter().zip(&zs).map(|(n, z)| format!("{n} z={z:+.2}")).collect::<Vec<_>>().join(", ");
    let pass = worst < 4.0 && t0.elapsed() < Duration::from_secs(15 * 60);
    assert!(report("Geweke joint-distribution test", pass, &detail, t0.elapsed()));
}

fn mean_var(x: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = x.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn rubric_kernel_matches_grid_posterior() {
    const STEPS: usize = 100_000;
    let t0 = Instant::now();
    // two users, binary ratings, predictors frozen at the item effects
    let effects = [-0.8, -0.3, 0.1, 0.4, 0.9, 1.3];
    let ratings = [[1, 1, 2, 1, 2, 2], [1, 2, 1, 2, 2, 2]];
    let entries: Vec<Rating> =
        (0..2).flat_map(|u| (0..6).map(move |i| Rating { item: i, user: u, category: ratings[u][i] })).collect();
    let data = RatingsDataset::new(2, 6, 2, entries.clone()).unwrap();
    let items = ItemTable::from_locations(vec![[0.0, 0.0]; 6]);
    let basis = SpatialBasis::empty(items.locations());
    let hyper = Hyperparameters { seed: 5, ..minimal_hyper() };
    let state = ModelState {
        classes: vec![0, 0],
        utilities: entries.iter().map(|r| if r.category == 1 { -0.5 } else { 0.5 }).collect(),
        rubrics: vec![Rubric::new(vec![0.0]).unwrap()],
        weights: vec![1.0],
        user_factors: Factors::zeros(2, 0),
        item_factors: Factors::zeros(6, 0),
        coefficients: Vec::new(),
        item_effects: effects.to_vec(),
        basis_coefs: Vec::new(),
        scales: Scales { item_effect: 1.0, item_factor: 1.0, spatial: 1.0 },
    };
    let mut sampler = Sampler::with_state(&data, &items, &basis, &hyper, state).unwrap();
    let mut draws = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        sampler.update_rubrics().unwrap();
        sampler.skip_sweep();
        draws.push(sampler.state().rubrics[0].breaks()[0]);
    }
    let scale = hyper.rubric_scale;
    let cdf = grid_cdf(-10.0, 10.0, 200_001, |t| {
        let prior = -0.5 * (t / scale).powi(2);
        let lik: f64 = entries
            .iter()
            .map(|r| {
                let below = phi(t - effects[r.item]);
                if r.category == 1 {
                    below.ln()
                } else {
                    (1.0 - below).ln()
                }
            })
            .sum();
        prior + lik
    });
    let d = ks_distance(&draws, cdf);
    let pass = d < 0.02 && t0.elapsed() < Duration::from_secs(5 * 60);
    let detail = format!("KS {d:.4} over {STEPS} rubric updates");
    assert!(report("rubric kernel vs grid-enumerated posterior", pass, &detail, t0.elapsed()));
}

#[test]
fn tau_study_recovers_rubrics() {
    let t0 = Instant::now();
    let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 1.0];
    let cfg = TauStudyConfig::desk(vec![1]).unwrap();
    let rows = run_tau_study(&grid, &cfg).unwrap();
    let elapsed = t0.elapsed();
    let mut pass = true;
    let mut notes = Vec::new();
    for row in &rows {
        let z = row.delta / row.delta_se;
        let _ = writeln!(
            std::io::stderr(),
            "[acceptance]      τ={:.1}: Δ={:+.4} (SE {:.4}, z={z:+.1}), correct={:.3}, top-2 occupancy={:.3}, profile TV={:?}",
            row.tau,
            row.delta,
            row.delta_se,
            row.correct_assignment,
            row.occupancy.iter().take(2).sum::<f64>(),
            row.profile_tv
        );
        if row.tau == 0.0 {
            let top2: f64 = row.occupancy.iter().take(2).sum();
            let ok = top2 >= 0.9 && row.correct_assignment >= 0.95;
            pass &= ok;
            notes.push(format!("τ=0 top-2 {top2:.3} correct {:.3}", row.correct_assignment));
        }
        if row.tau == 1.0 {
            pass &= row.delta.abs() <= 2.0 * row.delta_se;
            notes.push(format!("τ=1 |z| {:.2}", z.abs()));
        }
        if row.tau <= 0.5 {
            pass &= row.delta >= 3.0 * row.delta_se;
        }
    }
    let min_z = rows.iter().filter(|r| r.tau <= 0.5).map(|r| r.delta / r.delta_se).fold(f64::INFINITY, f64::min);
    notes.push(format!("min z for τ ≤ 0.5 {min_z:.1}"));
    pass &= elapsed < Duration::from_secs(60 * 60);
    let main = report("τ study: rubric recovery and held-out gain", pass, &notes.join(", "), elapsed);

    let row = rows.iter().find(|r| r.tau == 0.8).unwrap();
    let profiles_ok = row.profile_tv.len() == 2 && row.profile_tv.iter().all(|&d| d <= 0.05);
    let profiles = report(
        "τ study: τ=0.8 cluster profiles near the generating vectors",
        profiles_ok,
        &format!("TV {:?}", row.profile_tv),
        elapsed,
    );
    assert!(main && profiles);
}

#[test]
fn factor_study_recovers_the_rank() {
    let t0 = Instant::now();
    let cfg = FactorStudyConfig::desk(vec![1, 2, 3, 4, 5]);
    let study = run_factor_recovery_study(&cfg).unwrap();
    let elapsed = t0.elapsed();
    for r in &study.rows {
        let _ = writeln!(
            std::io::stderr(),
            "[acceptance]      seed {} L={}: held-out {:.4} (SE {:.4})",
            r.seed,
            r.factors,
            r.heldout,
            r.heldout_se
        );
    }
    let best = study.best_factors();
    let in_band = best.iter().all(|&(_, l)| (3..=5).contains(&l));
    let exact = best.iter().filter(|&&(_, l)| l == 4).count();
    let pass = in_band && exact >= 3 && elapsed < Duration::from_secs(45 * 60);
    let main = report("rank recovery over L = 1..7", pass, &format!("argmax L per seed {best:?}"), elapsed);

    let mut zeta_ok = study.zeta.len() == 5;
    let mut notes = Vec::new();
    for z in &study.zeta {
        let (pooled, _) = ks_standard_normal(&z.pooled);
        let rejects = z.items.iter().filter(|(_, d)| ks_standard_normal(d).1 < 0.01).count();
        zeta_ok &= pooled < 0.05 && 2 * rejects >= z.items.len();
        notes.push(format!("seed {}: pooled KS {pooled:.3}, {rejects}/{} items reject", z.seed, z.items.len()));
    }
    let zeta = report("ζ draws: pooled near the prior, items not", zeta_ok, &notes.join("; "), elapsed);
    assert!(main && zeta);
}

#[test]
fn rotations_leave_predictors_unchanged() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for l in 1..=7 {
        let sim = SimConfig { factors: l, pool_size: 100_000, seed: l as u64, ..SimConfig::supplement(0) };
        let gen = generate_dataset(&sim).unwrap();
        let mut rotated = gen.truth.clone();
        rotate_factors(&mut rotated, &random_rotation(l, &mut rng)).unwrap();
        for i in 0..sim.items {
            for u in 0..sim.users {
                let a = linear_predictor(&gen.truth, &gen.basis, &gen.items, i, u).unwrap();
                let b = linear_predictor(&rotated, &gen.basis, &gen.items, i, u).unwrap();
                worst = worst.max((a - b).abs());
            }
        }
    }
    let pass = worst <= 1e-10;
    assert!(report("rotation invariance of μ", pass, &format!("max |Δμ| {worst:.1e}, L = 1..7"), t0.elapsed()));
}

#[derive(serde::Deserialize)]
struct RankFixture {
    name: String,
    bandwidth: f64,
    fraction: f64,
    rank: usize,
    locations: Vec<[f64; 2]>,
}

#[test]
fn spectral_basis_identities() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let locs: Vec<[f64; 2]> = (0..50).map(|_| [rng.random(), rng.random()]).collect();
        let bandwidth = [2.0, 10.0, 50.0][trial % 3];
        let xi = DMatrix::from_fn(50, 50, |a, b| {
            let d2 = (locs[a][0] - locs[b][0]).powi(2) + (locs[a][1] - locs[b][1]).powi(2);
            (-bandwidth * d2).exp()
        });
        let total = xi.norm_squared();
        for r in [1, 3, 8, 20, 50] {
            let basis = build_basis(&locs, bandwidth, RankRule::Fixed(r)).unwrap();
            let psi = basis.design();
            let err = (&xi - &psi * psi.transpose()).norm_squared();
            let tail = total - basis.eigenvalues().iter().take(basis.rank()).map(|d| d * d).sum::<f64>();
            worst = worst.max((err - tail).abs() / total);
        }
    }
    let fixtures: Vec<RankFixture> =
        serde_json::from_str(include_str!("fixtures/spectral_rank.json")).expect("fixture parses");
    let mut mismatches = Vec::new();
    for f in &fixtures {
        let basis = build_basis(&f.locations, f.bandwidth, RankRule::Fraction(f.fraction)).unwrap();
        let direct = select_rank(basis.eigenvalues(), f.fraction).unwrap();
        if basis.rank() != f.rank || direct != f.rank {
            mismatches.push(format!("{}: {} / {} vs {}", f.name, basis.rank(), direct, f.rank));
        }
    }
    let pass = worst <= 1e-8 && mismatches.is_empty() && t0.elapsed() < Duration::from_secs(30);
    let detail = format!(
        "max relative Eckart–Young gap {worst:.1e}; {} of {} rank fixtures reproduced {mismatches:?}",
        fixtures.len() - mismatches.len(),
        fixtures.len()
    );
    assert!(report("spectral basis: Eckart–Young and rank fixtures", pass, &detail, t0.elapsed()));
}

#[test]
fn samples_do_not_depend_on_worker_count() {
    let t0 = Instant::now();
    let sim = SimConfig {
        items: 60,
        users: 80,
        missingness: multirubric::sim::Missingness::Count(900),
        pool_size: 200_000,
        ..SimConfig::tau_study(0.3, 9).unwrap()
    };
    let gen = generate_dataset(&sim).unwrap();
    let hyper = Hyperparameters {
        rubrics: 5,
        factors: 2,
        warmup: 100,
        samples: 100,
        thin: 2,
        seed: 2024,
        rank: RankRule::Fixed(10),
        bandwidth: 20.0,
        coherence_check: 25,
        ..Hyperparameters::default()
    };
    let basis = build_basis(gen.items.locations(), hyper.bandwidth, hyper.rank).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_chain(&gen.data, &gen.items, &basis, &hyper)).unwrap()
    };
    let (one, four) = (run(1), run(4));
    let same = one == four && serde_json::to_string(&one).unwrap() == serde_json::to_string(&four).unwrap();
    let pass = same && t0.elapsed() < Duration::from_secs(5 * 60);
    let detail = format!("{} draws, 1 vs 4 workers {}", one.len(), if same { "identical" } else { "differ" });
    assert!(report("determinism across worker counts", pass, &detail, t0.elapsed()));
}

/// Twenty ratings of four items by seven users on a four-point scale.
const SMALL_FIXTURE: [(usize, usize, usize); 20] = [
    (0, 0, 4),
    (0, 1, 3),
    (0, 2, 4),
    (0, 3, 4),
    (0, 4, 2),
    (1, 0, 3),
    (1, 1, 2),
    (1, 3, 3),
    (1, 5, 4),
    (1, 6, 2),
    (2, 1, 2),
    (2, 2, 1),
    (2, 4, 3),
    (2, 5, 2),
    (2, 6, 2),
    (3, 0, 1),
    (3, 2, 1),
    (3, 3, 2),
    (3, 4, 1),
    (3, 6, 3),
];

/// `N(m, 1)` restricted to `(a, b)` by bisection on Φ, working on the side
/// of the mean where Φ keeps its relative precision.
fn reference_truncated(m: f64, a: f64, b: f64, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = (a - m, b - m);
    if lo > 0.0 {
        return m - reference_truncated(0.0, -hi, -lo, rng);
    }
    let (lo, hi) = (lo.max(-40.0), hi.min(40.0));
    let (pa, pb) = (phi(lo), phi(hi));
    let u = pa + (pb - pa) * rng.random::<f64>();
    let (mut l, mut h) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (l + h);
        if phi(mid) < u {
            l = mid;
        } else {
            h = mid;
        }
    }
    m + 0.5 * (l + h)
}

/// Minimal ordinal-probit Gibbs sampler with data augmentation, item random
/// effects, cut-points drawn from their truncated-normal full conditionals
/// and a gridded draw of the effect variance. Returns posterior mean
/// predictive probabilities, `[item][category]`.
fn reference_predictive(obs: &[(usize, usize, usize)], items: usize, k: usize, iters: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let scale = 1.0;
    let mut theta: Vec<f64> = (0..k - 1).map(|j| j as f64 - (k as f64 - 2.0) / 2.0).collect();
    let mut b = vec![0.0; items];
    let mut var = 1.0;
    let mut y: Vec<f64> =
        obs.iter().map(|&(_, _, z)| if z == 1 { theta[0] - 0.5 } else { theta[z - 2] + 0.01 }).collect();
    let grid: Vec<f64> = (0..1200).map(|j| -14.0 + 0.018 * j as f64).collect();
    let cut = |theta: &[f64], j: isize| -> f64 {
        if j < 0 {
            f64::NEG_INFINITY
        } else if j as usize >= theta.len() {
            f64::INFINITY
        } else {
            theta[j as usize]
        }
    };
    let burn = iters / 20;
    let mut acc = vec![vec![0.0; k]; items];
    for it in 0..burn + iters {
        for (e, &(i, _, z)) in obs.iter().enumerate() {
            y[e] = reference_truncated(b[i], cut(&theta, z as isize - 2), cut(&theta, z as isize - 1), &mut rng);
        }
        for j in 0..k - 1 {
            let below =
                obs.iter().zip(&y).filter(|(o, _)| o.2 == j + 1).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            let above = obs.iter().zip(&y).filter(|(o, _)| o.2 == j + 2).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
            let lo = below.max(cut(&theta, j as isize - 1));
            let hi = above.min(cut(&theta, j as isize + 1));
            theta[j] = scale * reference_truncated(0.0, lo / scale, hi / scale, &mut rng);
        }
        for (i, bi) in b.iter_mut().enumerate() {
            let mine: Vec<f64> = obs.iter().zip(&y).filter(|(o, _)| o.0 == i).map(|(_, &v)| v).collect();
            let prec = 1.0 / var + mine.len() as f64;
            *bi = mine.iter().sum::<f64>() / prec + normal(&mut rng) / prec.sqrt();
        }
        let ss: f64 = b.iter().map(|x| x * x).sum();
        let n = items as f64;
        let logs: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let v = x.exp();
                0.5 * x - 0.5 * n * x - 0.5 * v - 0.5 * ss / v
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        let mut pick = grid.len() - 1;
        for (j, wj) in w.iter().enumerate() {
            if u < *wj {
                pick = j;
                break;
            }
            u -= wj;
        }
        var = (grid[pick] + 0.018 * (rng.random::<f64>() - 0.5)).exp();
        if it >= burn {
            for (i, row) in acc.iter_mut().enumerate() {
                for (c, p) in row.iter_mut().enumerate() {
                    *p += phi(cut(&theta, c as isize) - b[i]) - phi(cut(&theta, c as isize - 1) - b[i]);
                }
            }
        }
    }
    acc.iter().map(|row| row.iter().map(|p| p / iters as f64).collect()).collect()
}

#[test]
fn degenerate_model_matches_reference_probit() {
    let t0 = Instant::now();
    let entries: Vec<Rating> =
        SMALL_FIXTURE.iter().map(|&(item, user, category)| Rating { item, user, category }).collect();
    let data = RatingsDataset::new(4, 4, 7, entries).unwrap();
    let items = ItemTable::from_locations(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    let basis = SpatialBasis::empty(items.locations());
    let hyper = Hyperparameters {
        warmup: 5_000,
        samples: 100_000,
        thin: 2,
        seed: 12,
        proposal_refresh: 50,
        coherence_check: 100,
        ..minimal_hyper()
    };
    let samples = run_chain(&data, &items, &basis, &hyper).unwrap();
    let mut ours = vec![vec![0.0; 4]; 4];
    for d in &samples.draws {
        for (i, row) in ours.iter_mut().enumerate() {
            let mu = d.predictor(&items, &basis, i, 0).unwrap();
            for (c, p) in row.iter_mut().enumerate() {
                *p += d.rubrics[0].cell_mass(c + 1, mu) / samples.len() as f64;
            }
        }
    }
    let reference = reference_predictive(&SMALL_FIXTURE, 4, 4, 200_000);
    let worst = ours.iter().flatten().zip(reference.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = worst <= 0.01 && t0.elapsed() < Duration::from_secs(5 * 60);
    let detail = format!("max |Δp| {worst:.4} over 4 items × 4 categories");
    assert!(report("M=1, L=0, p=0, r=0 vs reference ordinal probit", pass, &detail, t0.elapsed()));
}
