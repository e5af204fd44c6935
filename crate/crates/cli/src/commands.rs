use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::{info, warn};
use multirubric::analysis::{
    binder_cluster, canonical_partition, coclustering, draw_log_predictive, heldout_loglik, quality_summary,
    rubric_profile, spatial_field_summary, HeldOut,
};
use multirubric::io::{
    apply_filter, apply_hyperparameters, export_dataset, index_rows, ingest, load_samples, persist_samples,
    read_rating_rows, seen_users, split_train_test, table_csv, write_atomic, IdMaps, IngestFilter, RunManifest,
};
use multirubric::sim::{
    generate_dataset, ks_standard_normal, run_factor_recovery_study, run_tau_study, FactorStudyConfig, Missingness,
    SimConfig, TauStudyConfig,
};
use multirubric::{
    build_basis, run_chain, Error, Hyperparameters, ItemTable, PosteriorSamples, Rating, RatingsDataset, SpatialBasis,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Settings;

const FIT_MANIFEST: &str = "manifest.json";
const SAMPLES_DIR: &str = "samples";

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    write_atomic(path, &table_csv(&header, rows)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn finish_manifest(mut manifest: RunManifest, started: Instant, out: &Path) -> Result<()> {
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.write(&out.join(FIT_MANIFEST))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn required(settings: &mut Settings, key: &str) -> Result<PathBuf> {
    settings
        .take_path(key)
        .ok_or_else(|| Error::Config(format!("{key} is required (--{key} or `{key} =` in the config file)")).into())
}

/// Everything a fit depends on, parsed from the merged configuration.
pub struct FitContext {
    pub ratings: PathBuf,
    pub items: PathBuf,
    pub filter: IngestFilter,
    pub hyper: Hyperparameters,
    /// Share of ratings held out from training.
    pub holdout: Option<f64>,
    pub split_seed: u64,
}

pub struct Prepared {
    pub ids: IdMaps,
    pub items: ItemTable,
    pub train: RatingsDataset,
    pub test: Option<RatingsDataset>,
    pub basis: SpatialBasis,
}

impl FitContext {
    pub fn from_settings(s: &mut Settings) -> Result<Self> {
        let ratings = required(s, "ratings")?;
        let items = required(s, "items")?;
        let holdout = s.take::<f64>("holdout")?;
        if let Some(h) = holdout {
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::Config(format!("holdout must lie in (0, 1), got {h}")).into());
            }
        }
        let split_seed = s.take::<u64>("split-seed")?.unwrap_or(0);
        let mut filter = IngestFilter::default();
        apply_filter(&mut s.map, &mut filter)?;
        let mut hyper = Hyperparameters::default();
        apply_hyperparameters(&mut s.map, &mut hyper)?;
        Ok(Self { ratings, items, filter, hyper, holdout, split_seed })
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let ing = ingest(&self.ratings, &self.items, &self.filter)?;
        info!(
            "{} ratings from {} users on {} items after filtering",
            ing.data.len(),
            ing.data.num_users(),
            ing.data.num_items()
        );
        let (train, test) = match self.holdout {
            Some(h) => {
                let (a, b) = split_train_test(&ing.data, 1.0 - h, self.split_seed)?;
                (a, Some(b))
            }
            None => (ing.data, None),
        };
        let basis = build_basis(ing.items.locations(), self.hyper.bandwidth, self.hyper.rank)?;
        info!("spatial rank {}", basis.rank());
        Ok(Prepared { ids: ing.ids, items: ing.items, train, test, basis })
    }
}

fn absolute(settings: &mut Settings, key: &str) {
    if let Some(v) = settings.map.get(key) {
        if let Ok(p) = std::fs::canonicalize(v) {
            settings.map.insert(key.to_string(), p.display().to_string());
        }
    }
}

pub struct FitInputs {
    pub settings: Settings,
    pub config_file: Option<PathBuf>,
}

pub fn fit(mut input: FitInputs, out: &Path) -> Result<()> {
    let started = Instant::now();
    let s = &mut input.settings;
    absolute(s, "ratings");
    absolute(s, "items");
    let snapshot = s.freeze();
    let ctx = FitContext::from_settings(s)?;
    s.finish()?;

    let mut inputs: Vec<&Path> = vec![&ctx.ratings, &ctx.items];
    if let Some(c) = &input.config_file {
        inputs.push(c);
    }
    let manifest = RunManifest::new("fit", snapshot, vec![ctx.hyper.seed, ctx.split_seed], &inputs)?;

    let prep = ctx.prepare()?;
    let samples = run_chain(&prep.train, &prep.items, &prep.basis, &ctx.hyper)?;
    std::fs::create_dir_all(out)?;
    persist_samples(&samples, &out.join(SAMPLES_DIR))?;
    write_json(&out.join("ids.json"), &prep.ids)?;
    write_csv(
        &out.join("spectrum.csv"),
        &["component", "eigenvalue", "captured_fraction"],
        prep.basis.spectrum_table().into_iter().map(|(j, e, f)| vec![j.to_string(), e.to_string(), f.to_string()]),
    )?;
    write_json(&out.join("chain.json"), &samples.meta)?;
    if let Some(test) = &prep.test {
        let h = heldout_loglik(&samples, test.entries(), &seen_users(&prep.train), &prep.items, &prep.basis)?;
        info!("held-out log-likelihood {:.4} (se {:.4})", h.mean, h.std_error());
        write_heldout(out, &h)?;
    }
    finish_manifest(manifest, started, out)
}

fn write_heldout(out: &Path, h: &HeldOut) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        mean: f64,
        std_error: f64,
        pairs: usize,
    }
    write_json(&out.join("heldout.json"), &Summary { mean: h.mean, std_error: h.std_error(), pairs: h.per_pair.len() })
}

/// A finished fit, rebuilt from its directory.
struct LoadedFit {
    prep: Prepared,
    samples: PosteriorSamples,
    inputs: Vec<PathBuf>,
}

fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let manifest_path = dir.join(FIT_MANIFEST);
    let manifest = RunManifest::read(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    if manifest.command != "fit" {
        return Err(Error::Config(format!("{} is not a fit directory", dir.display())).into());
    }
    manifest.verify_inputs()?;
    let mut settings = Settings { map: manifest.config.clone() };
    let ctx = FitContext::from_settings(&mut settings)?;
    settings.finish()?;
    let prep = ctx.prepare()?;
    let samples = load_samples(&dir.join(SAMPLES_DIR))?;
    if samples.num_users() != prep.train.num_users() {
        return Err(Error::State("stored draws do not match the re-ingested data".into()).into());
    }
    let inputs = vec![manifest_path, dir.join(SAMPLES_DIR).join("manifest.json")];
    Ok(LoadedFit { prep, samples, inputs })
}

pub fn predict(fit_dir: &Path, ratings: Option<&Path>, out: &Path) -> Result<()> {
    let started = Instant::now();
    let fit = load_fit(fit_dir)?;
    let LoadedFit { prep, samples, mut inputs } = fit;
    let k = prep.train.categories();
    let test: Vec<Rating> = match ratings {
        Some(path) => {
            inputs.push(path.to_path_buf());
            let rows = read_rating_rows(path, k)?;
            let (indexed, dropped) = index_rows(&rows, &prep.ids);
            if dropped > 0 {
                warn!("{dropped} ratings name users or items outside the fit and were skipped");
            }
            indexed
        }
        None => prep
            .test
            .as_ref()
            .map(|t| t.entries().to_vec())
            .ok_or_else(|| Error::Config("the fit has no held-out split; pass --ratings".into()))?,
    };
    if test.is_empty() {
        return Err(Error::Data("nothing to score".into()).into());
    }
    let seen = seen_users(&prep.train);
    let h = heldout_loglik(&samples, &test, &seen, &prep.items, &prep.basis)?;
    let probs: Vec<Vec<f64>> = test
        .par_iter()
        .map(|r| {
            (1..=k)
                .map(|c| {
                    let cell = Rating { category: c, ..*r };
                    let is_seen = seen.get(r.user).copied().unwrap_or(false);
                    let mut total = 0.0;
                    for d in &samples.draws {
                        total += draw_log_predictive(d, &prep.items, &prep.basis, &cell, is_seen)?.exp();
                    }
                    Ok(total / samples.draws.len() as f64)
                })
                .collect::<multirubric::Result<Vec<f64>>>()
        })
        .collect::<multirubric::Result<_>>()?;

    std::fs::create_dir_all(out)?;
    let mut header = vec!["user_id".to_string(), "item_id".into(), "stars".into(), "log_predictive".into()];
    header.extend((1..=k).map(|c| format!("p{c}")));
    header.push("expected_stars".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &out.join("predictions.csv"),
        &header_refs,
        test.iter().zip(&h.per_pair).zip(&probs).map(|((r, lp), p)| {
            let mut row = vec![
                prep.ids.users[r.user].clone(),
                prep.ids.items[r.item].clone(),
                r.category.to_string(),
                lp.to_string(),
            ];
            row.extend(p.iter().map(|x| x.to_string()));
            row.push(p.iter().enumerate().map(|(j, x)| (j + 1) as f64 * x).sum::<f64>().to_string());
            row
        }),
    )?;
    write_heldout(out, &h)?;
    info!("held-out log-likelihood {:.4} over {} ratings", h.mean, test.len());
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut config = std::collections::BTreeMap::new();
    config.insert("fit".to_string(), fit_dir.display().to_string());
    if let Some(r) = ratings {
        config.insert("ratings".to_string(), r.display().to_string());
    }
    finish_manifest(RunManifest::new("predict", config, vec![samples.meta.seed], &refs)?, started, out)
}

pub fn summarize(fit_dir: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let LoadedFit { prep, samples, inputs } = load_fit(fit_dir)?;
    std::fs::create_dir_all(out)?;
    let k = prep.train.categories();

    if samples.meta.factors == 0 || samples.draws.iter().all(|d| d.item_factors.is_some()) {
        let q = quality_summary(&samples, &prep.train, &prep.items, &prep.basis, false)?;
        write_csv(
            &out.join("item_quality.csv"),
            &["item_id", "quality_mean", "quality_sd", "empirical_mean", "ratings"],
            q.items.iter().map(|r| {
                vec![
                    prep.ids.items[r.item].clone(),
                    r.mean.to_string(),
                    r.sd.to_string(),
                    r.empirical_mean.map_or(String::new(), |m| m.to_string()),
                    r.count.to_string(),
                ]
            }),
        )?;
    } else {
        warn!("item factors were not stored; skipping item quality");
    }

    let pi = coclustering(&samples)?;
    let clusters = canonical_partition(&binder_cluster(&samples, &pi)?);
    write_csv(
        &out.join("clusters.csv"),
        &["user_id", "cluster"],
        clusters.iter().enumerate().map(|(u, c)| vec![prep.ids.users[u].clone(), c.to_string()]),
    )?;
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let mut header = vec!["cluster".to_string(), "users".into(), "ratings".into()];
    header.extend((1..=k).map(|c| format!("p{c}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &out.join("rubric_profiles.csv"),
        &header_refs,
        rubric_profile(&clusters, &prep.train, n_clusters).into_iter().map(|p| {
            let mut row = vec![p.rubric.to_string(), p.users.to_string(), p.ratings.to_string()];
            match p.proportions {
                Some(v) => row.extend(v.iter().map(|x| x.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), k)),
            }
            row
        }),
    )?;

    let field = spatial_field_summary(&samples, &prep.basis, prep.items.locations());
    write_csv(
        &out.join("spatial_field.csv"),
        &["item_id", "longitude", "latitude", "mean", "sd"],
        field.iter().enumerate().map(|(i, f)| {
            let [lon, lat] = prep.items.location(i);
            vec![prep.ids.items[i].clone(), lon.to_string(), lat.to_string(), f.mean.to_string(), f.sd.to_string()]
        }),
    )?;

    let mut weights: Vec<f64> = (0..samples.meta.rubrics)
        .map(|m| samples.draws.iter().map(|d| d.weights[m]).sum::<f64>() / samples.draws.len() as f64)
        .collect();
    weights.sort_by(|a, b| b.total_cmp(a));
    #[derive(Serialize)]
    struct ChainSummary<'a> {
        draws: usize,
        binder_clusters: usize,
        mean_weights_sorted: Vec<f64>,
        meta: &'a multirubric::ChainMeta,
    }
    write_json(
        &out.join("summary.json"),
        &ChainSummary {
            draws: samples.len(),
            binder_clusters: n_clusters,
            mean_weights_sorted: weights,
            meta: &samples.meta,
        },
    )?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let config = [("fit".to_string(), fit_dir.display().to_string())].into_iter().collect();
    finish_manifest(RunManifest::new("summarize", config, vec![samples.meta.seed], &refs)?, started, out)
}

fn sim_overrides(s: &mut Settings, sim: &mut SimConfig) -> Result<()> {
    if let Some(n) = s.take("items")? {
        sim.items = n;
    }
    if let Some(n) = s.take("users")? {
        sim.users = n;
    }
    if let Some(n) = s.take("ratings")? {
        sim.missingness = Missingness::Count(n);
    }
    if let Some(n) = s.take("pool-size")? {
        sim.pool_size = n;
    }
    Ok(())
}

pub fn simulate(mut s: Settings, config_file: Option<PathBuf>, out: &Path) -> Result<()> {
    let started = Instant::now();
    let snapshot = s.freeze();
    let preset: String = s.take("preset")?.unwrap_or_else(|| "tau".into());
    let seed: u64 = s.take("seed")?.unwrap_or(0);
    let mut sim = match preset.as_str() {
        "tau" => SimConfig::tau_study(s.take("tau")?.unwrap_or(0.0), seed)?,
        "supplement" => SimConfig::supplement(seed),
        other => return Err(Error::Config(format!("unknown preset {other:?} (tau or supplement)")).into()),
    };
    sim_overrides(&mut s, &mut sim)?;
    s.finish()?;
    let gen = generate_dataset(&sim)?;
    std::fs::create_dir_all(out)?;
    export_dataset(out, &gen.data, &gen.items)?;
    #[derive(Serialize)]
    struct Truth<'a> {
        config: &'a SimConfig,
        rubric_probabilities: &'a Option<Vec<Vec<f64>>>,
        state: &'a multirubric::ModelState,
    }
    write_json(
        &out.join("truth.json"),
        &Truth { config: &sim, rubric_probabilities: &gen.rubric_probs, state: &gen.truth },
    )?;
    info!("{} ratings from {} users on {} items", gen.data.len(), gen.data.num_users(), gen.data.num_items());
    let inputs: Vec<&Path> = config_file.iter().map(PathBuf::as_path).collect();
    finish_manifest(RunManifest::new("simulate", snapshot, vec![seed], &inputs)?, started, out)
}

fn study_fit(s: &mut Settings, fit: &mut Hyperparameters) -> Result<()> {
    apply_hyperparameters(&mut s.map, fit)?;
    Ok(())
}

pub fn tau_study(mut s: Settings, config_file: Option<PathBuf>, out: &Path) -> Result<()> {
    let started = Instant::now();
    let snapshot = s.freeze();
    let grid: Vec<f64> = s.take_list("grid")?.unwrap_or_else(|| (0..=10).map(|j| j as f64 / 10.0).collect());
    let seeds: Vec<u64> = s.take_list("seeds")?.unwrap_or_else(|| vec![1]);
    let mut cfg = TauStudyConfig::desk(seeds.clone())?;
    if let Some(f) = s.take("train-fraction")? {
        cfg.train_fraction = f;
    }
    sim_overrides(&mut s, &mut cfg.sim)?;
    study_fit(&mut s, &mut cfg.fit)?;
    s.finish()?;

    let rows = run_tau_study(&grid, &cfg)?;
    std::fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for r in &rows {
        let mut push = |metric: String, value: f64| {
            records.push(vec![r.tau.to_string(), r.seed.to_string(), metric, value.to_string()]);
        };
        push("heldout_multi".into(), r.heldout_multi);
        push("heldout_single".into(), r.heldout_single);
        push("delta".into(), r.delta);
        push("delta_se".into(), r.delta_se);
        push("correct_assignment".into(), r.correct_assignment);
        for (j, v) in r.occupancy.iter().enumerate() {
            push(format!("occupancy_{}", j + 1), *v);
        }
        for (j, v) in r.profile_tv.iter().enumerate() {
            push(format!("profile_tv_{}", j + 1), *v);
        }
    }
    write_csv(&out.join("tau_study.csv"), &["tau", "seed", "metric", "value"], records.into_iter())?;
    #[derive(Serialize)]
    struct Study<'a> {
        grid: &'a [f64],
        config: &'a TauStudyConfig,
        substitutions: Vec<String>,
        rows: &'a [multirubric::sim::TauRow],
    }
    write_json(
        &out.join("study.json"),
        &Study { grid: &grid, config: &cfg, substitutions: substitutions(&cfg.sim), rows: &rows },
    )?;
    let inputs: Vec<&Path> = config_file.iter().map(PathBuf::as_path).collect();
    finish_manifest(RunManifest::new("tau-study", snapshot, seeds, &inputs)?, started, out)
}

/// Where the synthetic setting departs from a fitted real-data posterior.
fn substitutions(sim: &SimConfig) -> Vec<String> {
    let mut v = vec![format!("spatial field: {:?} over item locations uniform on {:?}", sim.spatial, sim.domain)];
    v.push(format!("observed pairs: {:?}, uniformly at random", sim.missingness));
    v.push(format!("item effect sd fixed at {}", sim.item_effect_sd));
    v
}

pub fn factor_study(mut s: Settings, config_file: Option<PathBuf>, out: &Path) -> Result<()> {
    let started = Instant::now();
    let snapshot = s.freeze();
    let seeds: Vec<u64> = s.take_list("seeds")?.unwrap_or_else(|| (1..=5).collect());
    let mut cfg = FactorStudyConfig::desk(seeds.clone());
    if let Some(g) = s.take_list("factor-grid")? {
        cfg.factor_grid = g;
    }
    if let Some(f) = s.take("train-fraction")? {
        cfg.train_fraction = f;
    }
    if let Some(z) = s.take("zeta-items")? {
        cfg.zeta_items = z;
    }
    sim_overrides(&mut s, &mut cfg.sim)?;
    study_fit(&mut s, &mut cfg.fit)?;
    s.finish()?;

    let study = run_factor_recovery_study(&cfg)?;
    std::fs::create_dir_all(out)?;
    write_csv(
        &out.join("factor_study.csv"),
        &["seed", "factors", "metric", "value"],
        study.rows.iter().flat_map(|r| {
            [("heldout", r.heldout), ("heldout_se", r.heldout_se)]
                .map(|(m, v)| vec![r.seed.to_string(), r.factors.to_string(), m.to_string(), v.to_string()])
        }),
    )?;
    write_csv(
        &out.join("best_factors.csv"),
        &["seed", "factors"],
        study.best_factors().into_iter().map(|(s, l)| vec![s.to_string(), l.to_string()]),
    )?;
    write_csv(
        &out.join("zeta.csv"),
        &["seed", "item", "zeta"],
        study.zeta.iter().flat_map(|z| {
            z.items
                .iter()
                .flat_map(move |(i, d)| d.iter().map(move |x| vec![z.seed.to_string(), i.to_string(), x.to_string()]))
        }),
    )?;
    write_csv(
        &out.join("zeta_tests.csv"),
        &["seed", "item", "draws", "ks_distance", "p_value"],
        study.zeta.iter().flat_map(|z| {
            let pooled = std::iter::once(("pooled".to_string(), &z.pooled));
            let items = z.items.iter().map(|(i, d)| (i.to_string(), d));
            pooled.chain(items).map(move |(name, d)| {
                let (ks, p) = ks_standard_normal(d);
                vec![z.seed.to_string(), name, d.len().to_string(), ks.to_string(), p.to_string()]
            })
        }),
    )?;
    #[derive(Serialize)]
    struct Study<'a> {
        config: &'a FactorStudyConfig,
        substitutions: Vec<String>,
        rows: &'a [multirubric::sim::FactorRow],
        best: Vec<(u64, usize)>,
    }
    write_json(
        &out.join("study.json"),
        &Study { config: &cfg, substitutions: substitutions(&cfg.sim), rows: &study.rows, best: study.best_factors() },
    )?;
    let inputs: Vec<&Path> = config_file.iter().map(PathBuf::as_path).collect();
    finish_manifest(RunManifest::new("factor-study", snapshot, seeds, &inputs)?, started, out)
}
