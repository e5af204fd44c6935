//! Configuration merging: a `key = value` file overlaid by command-line
//! flags of the same name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use multirubric::io::parse_config;

/// Flags mirroring the hyperparameter keys.
#[derive(Args, Debug, Default, Clone)]
pub struct HyperFlags {
    /// Number of rubrics M
    #[arg(long)]
    pub rubrics: Option<String>,
    /// Latent factor dimension L
    #[arg(long)]
    pub factors: Option<String>,
    /// Dirichlet total mass κ
    #[arg(long)]
    pub concentration: Option<String>,
    /// Prior scale of the break-points
    #[arg(long)]
    pub rubric_scale: Option<String>,
    /// Covariogram bandwidth
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Fixed spatial rank
    #[arg(long)]
    pub rank: Option<String>,
    /// Spatial rank chosen by captured squared-eigenvalue fraction
    #[arg(long)]
    pub variance_fraction: Option<String>,
    /// Prior precision of the covariate coefficients (0 = flat)
    #[arg(long)]
    pub coefficient_precision: Option<String>,
    #[arg(long)]
    pub warmup: Option<String>,
    #[arg(long)]
    pub samples: Option<String>,
    #[arg(long)]
    pub thin: Option<String>,
    /// Chain seed
    #[arg(long)]
    pub seed: Option<String>,
    /// Sweeps between Laplace proposal rebuilds
    #[arg(long)]
    pub proposal_refresh: Option<String>,
    /// Keep factor draws (true/false)
    #[arg(long)]
    pub store_factors: Option<String>,
    /// Sweeps between full predictor recomputations
    #[arg(long)]
    pub coherence_check: Option<String>,
}

impl HyperFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("rubrics", &self.rubrics),
            ("factors", &self.factors),
            ("concentration", &self.concentration),
            ("rubric-scale", &self.rubric_scale),
            ("bandwidth", &self.bandwidth),
            ("rank", &self.rank),
            ("variance-fraction", &self.variance_fraction),
            ("coefficient-precision", &self.coefficient_precision),
            ("warmup", &self.warmup),
            ("samples", &self.samples),
            ("thin", &self.thin),
            ("seed", &self.seed),
            ("proposal-refresh", &self.proposal_refresh),
            ("store-factors", &self.store_factors),
            ("coherence-check", &self.coherence_check),
        ]
    }
}

/// Flags mirroring the ingestion filter keys.
#[derive(Args, Debug, Default, Clone)]
pub struct FilterFlags {
    /// First day kept, YYYY-MM-DD
    #[arg(long)]
    pub date_from: Option<String>,
    /// Last day kept, YYYY-MM-DD
    #[arg(long)]
    pub date_to: Option<String>,
    /// lon_min,lon_max,lat_min,lat_max
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: Option<String>,
    #[arg(long)]
    pub min_user_ratings: Option<String>,
    #[arg(long)]
    pub min_item_ratings: Option<String>,
    /// Number of rating categories K
    #[arg(long)]
    pub categories: Option<String>,
}

impl FilterFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("date-from", &self.date_from),
            ("date-to", &self.date_to),
            ("bbox", &self.bbox),
            ("min-user-ratings", &self.min_user_ratings),
            ("min-item-ratings", &self.min_item_ratings),
            ("categories", &self.categories),
        ]
    }
}

/// Effective configuration of one command. Keys are removed as they are
/// consumed; whatever is left at the end is a mistake.
#[derive(Debug, Default)]
pub struct Settings {
    pub map: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let map = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { map })
    }

    pub fn overlay(&mut self, pairs: impl IntoIterator<Item = (&'static str, Option<String>)>) {
        for (k, v) in pairs {
            if let Some(v) = v {
                self.map.insert(k.to_string(), v);
            }
        }
    }

    pub fn overlay_hyper(&mut self, flags: &HyperFlags) {
        self.overlay(flags.pairs().into_iter().map(|(k, v)| (k, v.clone())));
    }

    pub fn overlay_filter(&mut self, flags: &FilterFlags) {
        self.overlay(flags.pairs().into_iter().map(|(k, v)| (k, v.clone())));
    }

    /// Records the merged configuration before anything is consumed.
    pub fn freeze(&self) -> BTreeMap<String, String> {
        self.map.clone()
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => match v.parse() {
                Ok(x) => Ok(Some(x)),
                Err(_) => Err(multirubric::Error::Config(format!("{key}: cannot parse {v:?}")).into()),
            },
        }
    }

    pub fn take_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| multirubric::Error::Config(format!("{key}: cannot parse list {v:?}")).into()),
        }
    }

    pub fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.map.remove(key).map(PathBuf::from)
    }

    pub fn finish(&self) -> Result<()> {
        if !self.map.is_empty() {
            let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
            bail!(multirubric::Error::Config(format!("unknown configuration keys: {}", keys.join(", "))));
        }
        Ok(())
    }
}
