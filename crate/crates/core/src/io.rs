//! Ingestion, train/test splitting, sample archives, run manifests and the
//! key=value configuration format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Factors, Hyperparameters, ItemTable, RankRule, Rating, RatingsDataset, Rubric, Scales};
use crate::samples::{ChainMeta, Draw, PosteriorSamples};

/// Version tag written into every sample archive.
pub const ARCHIVE_VERSION: &str = "1";
const ARCHIVE_FORMAT: &str = "multirubric-samples";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, s: [f64; 2]) -> bool {
        (self.lon_min..=self.lon_max).contains(&s[0]) && (self.lat_min..=self.lat_max).contains(&s[1])
    }
}

/// Preprocessing rules applied at ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestFilter {
    /// Inclusive date bounds.
    pub date_from: Option<NaiveDate>,
    pub date_to: Option<NaiveDate>,
    pub bbox: Option<BoundingBox>,
    pub min_user_ratings: usize,
    pub min_item_ratings: usize,
    /// Size K of the rating scale; stars must lie in 1..=K.
    pub categories: usize,
}

impl Default for IngestFilter {
    fn default() -> Self {
        Self { date_from: None, date_to: None, bbox: None, min_user_ratings: 1, min_item_ratings: 1, categories: 5 }
    }
}

impl IngestFilter {
    pub fn validate(&self) -> Result<()> {
        if let (Some(a), Some(b)) = (self.date_from, self.date_to) {
            if a > b {
                return Err(Error::Config(format!("date range {a}..{b} is empty")));
            }
        }
        if let Some(b) = self.bbox {
            if !(b.lon_min <= b.lon_max && b.lat_min <= b.lat_max) {
                return Err(Error::Config("bounding box bounds are not ordered".into()));
            }
        }
        if self.min_user_ratings < 1 || self.min_item_ratings < 1 {
            return Err(Error::Config("minimum rating counts must be at least 1".into()));
        }
        if self.categories < 2 {
            return Err(Error::Config("the rating scale needs at least 2 categories".into()));
        }
        Ok(())
    }
}

/// Original string identifiers of the dense indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub data: RatingsDataset,
    pub items: ItemTable,
    pub ids: IdMaps,
}

#[derive(Clone, Debug)]
struct RawRating {
    user: String,
    item: String,
    stars: usize,
    when: NaiveDateTime,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { file: path.display().to_string(), line: line as usize, message: message.into() }
}

fn parse_when(text: &str) -> Option<NaiveDateTime> {
    let t = text.trim();
    if let Ok(d) = NaiveDate::parse_from_str(t, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(t, f).ok())
        .or_else(|| chrono::DateTime::parse_from_rfc3339(t).ok().map(|d| d.naive_utc()))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| parse_error(path, 1, e.to_string()))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| parse_error(path, 1, format!("missing column {name}")))
}

fn read_ratings(path: &Path, categories: usize) -> Result<Vec<RawRating>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let (cu, ci, cs, cd) = (
        column(&headers, "user_id", path)?,
        column(&headers, "item_id", path)?,
        column(&headers, "stars", path)?,
        column(&headers, "date", path)?,
    );
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |j: usize| record.get(j).unwrap_or("");
        let stars: usize = field(cs)
            .parse()
            .map_err(|_| parse_error(path, line, format!("stars {:?} is not an integer", field(cs))))?;
        if stars < 1 || stars > categories {
            return Err(parse_error(path, line, format!("stars {stars} outside 1..={categories}")));
        }
        let when = parse_when(field(cd))
            .ok_or_else(|| parse_error(path, line, format!("date {:?} is not ISO-8601", field(cd))))?;
        let (user, item) = (field(cu).to_string(), field(ci).to_string());
        if user.is_empty() || item.is_empty() {
            return Err(parse_error(path, line, "empty identifier"));
        }
        out.push(RawRating { user, item, stars, when });
    }
    Ok(out)
}

type ItemRows = HashMap<String, ([f64; 2], Vec<f64>)>;

fn read_items(path: &Path) -> Result<ItemRows> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let (ci, clon, clat) =
        (column(&headers, "item_id", path)?, column(&headers, "longitude", path)?, column(&headers, "latitude", path)?);
    let covariate_cols: Vec<usize> = (0..headers.len()).filter(|j| ![ci, clon, clat].contains(j)).collect();
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |j: usize| -> Result<f64> {
            let text = record.get(j).unwrap_or("");
            text.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                parse_error(path, line, format!("column {} value {text:?} is not a number", &headers[j]))
            })
        };
        let location = [number(clon)?, number(clat)?];
        let covariates = covariate_cols.iter().map(|&j| number(j)).collect::<Result<Vec<_>>>()?;
        let id = record.get(ci).unwrap_or("").to_string();
        if out.insert(id.clone(), (location, covariates)).is_some() {
            return Err(parse_error(path, line, format!("duplicate item_id {id}")));
        }
    }
    Ok(out)
}

/// Reads, filters and reindexes a ratings file and an items file.
///
/// Ratings outside the date range and items outside the bounding box are
/// dropped first; duplicate (user, item) pairs keep the latest rating; then
/// users and items below the minimum counts are removed repeatedly until
/// nothing changes. Dense indices follow the sorted original IDs and
/// covariates are standardized.
pub fn ingest(ratings_path: &Path, items_path: &Path, filter: &IngestFilter) -> Result<Ingested> {
    filter.validate()?;
    let raw = read_ratings(ratings_path, filter.categories)?;
    let item_rows = read_items(items_path)?;

    let in_dates = |r: &RawRating| {
        let d = r.when.date();
        filter.date_from.is_none_or(|a| d >= a) && filter.date_to.is_none_or(|b| d <= b)
    };
    let in_region = |id: &str| match (item_rows.get(id), filter.bbox) {
        (None, _) => false,
        (Some(_), None) => true,
        (Some((s, _)), Some(b)) => b.contains(*s),
    };
    let unknown = raw.iter().filter(|r| !item_rows.contains_key(&r.item)).count();
    if unknown > 0 {
        log::warn!("{unknown} ratings refer to items missing from the items file and were dropped");
    }

    // latest rating per pair; ties on the timestamp keep the higher star count
    let mut latest: HashMap<(String, String), (NaiveDateTime, usize)> = HashMap::new();
    for r in raw.iter().filter(|r| in_dates(r) && in_region(&r.item)) {
        let key = (r.user.clone(), r.item.clone());
        let cand = (r.when, r.stars);
        latest.entry(key).and_modify(|v| *v = (*v).max(cand)).or_insert(cand);
    }
    let mut pairs: Vec<(String, String, usize)> = latest.into_iter().map(|((u, i), (_, s))| (u, i, s)).collect();

    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (u, i, _) in &pairs {
            *user_counts.entry(u).or_default() += 1;
            *item_counts.entry(i).or_default() += 1;
        }
        let keep: Vec<bool> = pairs
            .iter()
            .map(|(u, i, _)| {
                user_counts[u.as_str()] >= filter.min_user_ratings && item_counts[i.as_str()] >= filter.min_item_ratings
            })
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        pairs.retain(|_| it.next().unwrap_or(false));
    }
    if pairs.is_empty() {
        return Err(Error::FilterTooStrict);
    }

    let mut users: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let mut items: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    users.sort();
    users.dedup();
    items.sort();
    items.dedup();
    let user_index: HashMap<&str, usize> = users.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let mut entries: Vec<Rating> = pairs
        .iter()
        .map(|(u, i, s)| Rating { item: item_index[i.as_str()], user: user_index[u.as_str()], category: *s })
        .collect();
    entries.sort_by_key(|r| (r.user, r.item));

    let locations = items.iter().map(|id| item_rows[id].0).collect();
    let covariates = items.iter().map(|id| item_rows[id].1.clone()).collect();
    let mut table = ItemTable::new(locations, covariates)?;
    table.standardize();
    let data = RatingsDataset::new(filter.categories, items.len(), users.len(), entries)?;
    Ok(Ingested { data, items: table, ids: IdMaps { users, items } })
}

/// Random split of the observed pairs; `fraction` of them (rounded) go to
/// the training set. Both parts keep the full index ranges.
pub fn split_train_test(data: &RatingsDataset, fraction: f64, seed: u64) -> Result<(RatingsDataset, RatingsDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * n as f64).round() as usize;
    let (train, test) = order.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// `(user_id, item_id, stars)` rows of a ratings file, unfiltered.
pub fn read_rating_rows(path: &Path, categories: usize) -> Result<Vec<(String, String, usize)>> {
    Ok(read_ratings(path, categories)?.into_iter().map(|r| (r.user, r.item, r.stars)).collect())
}

/// Maps rows to dense indices; rows with an unknown user or item are
/// dropped and counted.
pub fn index_rows(rows: &[(String, String, usize)], ids: &IdMaps) -> (Vec<Rating>, usize) {
    let users: HashMap<&str, usize> = ids.users.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let items: HashMap<&str, usize> = ids.items.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for (u, i, s) in rows {
        if let (Some(&user), Some(&item)) = (users.get(u.as_str()), items.get(i.as_str())) {
            out.push(Rating { item, user, category: *s });
        }
    }
    let dropped = rows.len() - out.len();
    (out, dropped)
}

/// Writes `ratings.csv` and `items.csv` in the layout [`ingest`] reads.
/// Users and items are named `u<index>` and `i<index>`, zero-padded so
/// that sorted IDs keep the index order; every rating gets the same date.
pub fn export_dataset(dir: &Path, data: &RatingsDataset, items: &ItemTable) -> Result<()> {
    let width = |n: usize| n.saturating_sub(1).max(1).to_string().len();
    let (wu, wi) = (width(data.num_users()), width(data.num_items()));
    let ratings = table_csv(
        &fmt_all(["user_id", "item_id", "stars", "date"]),
        data.entries().iter().map(|r| {
            vec![format!("u{:0wu$}", r.user), format!("i{:0wi$}", r.item), r.category.to_string(), "2020-01-01".into()]
        }),
    )?;
    let mut header = fmt_all(["item_id", "longitude", "latitude"]);
    header.extend((1..=items.covariate_dim()).map(|j| format!("x{j}")));
    let table = table_csv(
        &header,
        (0..items.len()).map(|i| {
            let [lon, lat] = items.location(i);
            let mut row = vec![format!("i{:0wi$}", i), lon.to_string(), lat.to_string()];
            row.extend(fmt_all(items.covariate(i)));
            row
        }),
    )?;
    write_atomic(&dir.join("ratings.csv"), &ratings)?;
    write_atomic(&dir.join("items.csv"), &table)
}

/// Users with at least one rating in `data`.
pub fn seen_users(data: &RatingsDataset) -> Vec<bool> {
    (0..data.num_users()).map(|u| !data.user_entries(u).is_empty()).collect()
}

/// Writes via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchiveDims {
    draws: usize,
    users: usize,
    items: usize,
    rubrics: usize,
    breaks: usize,
    coefficients: usize,
    basis: usize,
    factors: usize,
    factors_stored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchiveManifest {
    format: String,
    version: String,
    meta: ChainMeta,
    dims: ArchiveDims,
    /// File name to sha256 digest.
    files: BTreeMap<String, String>,
}

/// CSV bytes of a header and rows.
pub fn table_csv(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.into()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

fn fmt_all<T: ToString>(v: impl IntoIterator<Item = T>) -> Vec<String> {
    v.into_iter().map(|x| x.to_string()).collect()
}

/// Writes one CSV per parameter block (one row per draw) and a JSON
/// manifest with digests of every file. Floats are written in shortest
/// round-trip form so a reload is bitwise identical.
pub fn persist_samples(samples: &PosteriorSamples, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let draws = &samples.draws;
    let first = draws.first();
    let dims = ArchiveDims {
        draws: draws.len(),
        users: first.map_or(0, |d| d.classes.len()),
        items: first.map_or(0, |d| d.item_effects.len()),
        rubrics: first.map_or(samples.meta.rubrics, |d| d.rubrics.len()),
        breaks: samples.meta.categories.saturating_sub(1),
        coefficients: first.map_or(0, |d| d.coefficients.len()),
        basis: first.map_or(0, |d| d.basis_coefs.len()),
        factors: first.map_or(samples.meta.factors, |d| d.factor_dim()),
        factors_stored: first.is_some_and(|d| d.user_factors.is_some() && d.item_factors.is_some()),
    };
    if draws.iter().any(|d| {
        d.classes.len() != dims.users
            || d.item_effects.len() != dims.items
            || d.rubrics.len() != dims.rubrics
            || d.rubrics.iter().any(|r| r.breaks().len() != dims.breaks)
            || d.coefficients.len() != dims.coefficients
            || d.basis_coefs.len() != dims.basis
            || (d.user_factors.is_some() && d.item_factors.is_some()) != dims.factors_stored
    }) {
        return Err(Error::State("draws have inconsistent shapes".into()));
    }

    let mut files: Vec<(&str, Vec<u8>)> = vec![
        (
            "draws.csv",
            table_csv(
                &["sweep".to_string(), "loglik".to_string()],
                draws.iter().map(|d| vec![d.sweep.to_string(), d.loglik.to_string()]),
            )?,
        ),
        ("classes.csv", table_csv(&numbered("user", dims.users), draws.iter().map(|d| fmt_all(&d.classes)))?),
        ("weights.csv", table_csv(&numbered("rubric", dims.rubrics), draws.iter().map(|d| fmt_all(&d.weights)))?),
        (
            "rubrics.csv",
            table_csv(
                &(0..dims.rubrics)
                    .flat_map(|m| (1..=dims.breaks).map(move |k| format!("theta{m}_{k}")))
                    .collect::<Vec<_>>(),
                draws.iter().map(|d| fmt_all(d.rubrics.iter().flat_map(|r| r.breaks().iter()))),
            )?,
        ),
        (
            "coefficients.csv",
            table_csv(&numbered("gamma", dims.coefficients), draws.iter().map(|d| fmt_all(&d.coefficients)))?,
        ),
        ("item_effects.csv", table_csv(&numbered("b", dims.items), draws.iter().map(|d| fmt_all(&d.item_effects)))?),
        ("basis_coefs.csv", table_csv(&numbered("eta", dims.basis), draws.iter().map(|d| fmt_all(&d.basis_coefs)))?),
        (
            "scales.csv",
            table_csv(
                &["sigma_b".to_string(), "sigma_beta".to_string(), "sigma_eta".to_string()],
                draws.iter().map(|d| fmt_all([d.scales.item_effect, d.scales.item_factor, d.scales.spatial])),
            )?,
        ),
    ];
    if dims.factors_stored {
        let l = dims.factors;
        files.push((
            "user_factors.csv",
            table_csv(
                &(0..dims.users).flat_map(|u| (0..l).map(move |j| format!("alpha{u}_{j}"))).collect::<Vec<_>>(),
                draws.iter().map(|d| fmt_all(d.user_factors.as_ref().expect("stored").as_slice())),
            )?,
        ));
        files.push((
            "item_factors.csv",
            table_csv(
                &(0..dims.items).flat_map(|i| (0..l).map(move |j| format!("beta{i}_{j}"))).collect::<Vec<_>>(),
                draws.iter().map(|d| fmt_all(d.item_factors.as_ref().expect("stored").as_slice())),
            )?,
        ));
    }

    // blocks without columns (no covariates, rank 0, L = 0) are implied by the dims
    let widths = [
        ("coefficients.csv", dims.coefficients),
        ("basis_coefs.csv", dims.basis),
        ("user_factors.csv", dims.factors),
        ("item_factors.csv", dims.factors),
        ("rubrics.csv", dims.breaks),
        ("classes.csv", dims.users),
        ("item_effects.csv", dims.items),
    ];
    files.retain(|(name, _)| widths.iter().all(|(w, n)| w != name || *n > 0));
    let mut digests = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        digests.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = ArchiveManifest {
        format: ARCHIVE_FORMAT.into(),
        version: ARCHIVE_VERSION.into(),
        meta: samples.meta.clone(),
        dims,
        files: digests,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn read_table<T: FromStr>(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Vec<Vec<T>>> {
    if cols == 0 {
        return Ok((0..rows).map(|_| Vec::new()).collect());
    }
    let path = dir.join(name);
    let mut reader = csv::ReaderBuilder::new().from_path(&path).map_err(|e| parse_error(&path, 1, e.to_string()))?;
    let mut out = Vec::with_capacity(rows);
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(&path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            return Err(parse_error(&path, line, format!("expected {cols} fields, found {}", record.len())));
        }
        let row = record
            .iter()
            .map(|f| f.parse::<T>().map_err(|_| parse_error(&path, line, format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    if out.len() != rows {
        return Err(parse_error(&path, 0, format!("expected {rows} rows, found {}", out.len())));
    }
    Ok(out)
}

/// Reads an archive written by [`persist_samples`], refusing unknown
/// versions and files whose digest does not match the manifest.
pub fn load_samples(dir: &Path) -> Result<PosteriorSamples> {
    let manifest: ArchiveManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != ARCHIVE_FORMAT || manifest.version != ARCHIVE_VERSION {
        return Err(Error::Version {
            found: format!("{} {}", manifest.format, manifest.version),
            expected: format!("{ARCHIVE_FORMAT} {ARCHIVE_VERSION}"),
        });
    }
    for (name, digest) in &manifest.files {
        if file_digest(&dir.join(name))? != *digest {
            return Err(Error::Digest { file: name.clone() });
        }
    }
    let d = &manifest.dims;
    let n = d.draws;
    let head: Vec<Vec<f64>> = read_table(dir, "draws.csv", n, 2)?;
    let classes: Vec<Vec<usize>> = read_table(dir, "classes.csv", n, d.users)?;
    let weights: Vec<Vec<f64>> = read_table(dir, "weights.csv", n, d.rubrics)?;
    let rubrics: Vec<Vec<f64>> = read_table(dir, "rubrics.csv", n, d.rubrics * d.breaks)?;
    let coefficients: Vec<Vec<f64>> = read_table(dir, "coefficients.csv", n, d.coefficients)?;
    let item_effects: Vec<Vec<f64>> = read_table(dir, "item_effects.csv", n, d.items)?;
    let basis: Vec<Vec<f64>> = read_table(dir, "basis_coefs.csv", n, d.basis)?;
    let scales: Vec<Vec<f64>> = read_table(dir, "scales.csv", n, 3)?;
    let (users_f, items_f): (Vec<Option<Factors>>, Vec<Option<Factors>>) = if d.factors_stored {
        let uf: Vec<Vec<f64>> = read_table(dir, "user_factors.csv", n, d.users * d.factors)?;
        let itf: Vec<Vec<f64>> = read_table(dir, "item_factors.csv", n, d.items * d.factors)?;
        let to_factors = |flat: Vec<f64>, rows: usize| -> Result<Option<Factors>> {
            let rows: Vec<Vec<f64>> = if d.factors == 0 {
                vec![Vec::new(); rows]
            } else {
                flat.chunks(d.factors).map(<[f64]>::to_vec).collect()
            };
            Ok(Some(Factors::from_rows(&rows, d.factors)?))
        };
        (
            uf.into_iter().map(|v| to_factors(v, d.users)).collect::<Result<_>>()?,
            itf.into_iter().map(|v| to_factors(v, d.items)).collect::<Result<_>>()?,
        )
    } else {
        (vec![None; n], vec![None; n])
    };

    let mut draws = Vec::with_capacity(n);
    let mut parts = (
        classes.into_iter(),
        weights.into_iter(),
        rubrics.into_iter(),
        coefficients.into_iter(),
        item_effects.into_iter(),
        basis.into_iter(),
        scales.into_iter(),
        users_f.into_iter(),
        items_f.into_iter(),
    );
    for h in head {
        let next = |v: Option<Vec<f64>>| v.expect("row counts checked");
        let rubric_row = next(parts.2.next());
        let rubrics = if d.breaks == 0 {
            Vec::new()
        } else {
            rubric_row.chunks(d.breaks).map(|c| Rubric::new(c.to_vec())).collect::<Result<Vec<_>>>()?
        };
        let s = next(parts.6.next());
        draws.push(Draw {
            sweep: h[0] as usize,
            loglik: h[1],
            classes: parts.0.next().expect("row counts checked"),
            weights: next(parts.1.next()),
            rubrics,
            coefficients: next(parts.3.next()),
            item_effects: next(parts.4.next()),
            basis_coefs: next(parts.5.next()),
            scales: Scales { item_effect: s[0], item_factor: s[1], spatial: s[2] },
            user_factors: parts.7.next().flatten(),
            item_factors: parts.8.next().flatten(),
        });
    }
    Ok(PosteriorSamples { meta: manifest.meta, draws })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one CLI run, sufficient to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration after file and flag merging.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub version: String,
    /// UTC start time, RFC 3339.
    pub started: String,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(FileDigest { path: p.to_path_buf(), sha256: file_digest(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let now =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
        let started = chrono::DateTime::from_timestamp(now, 0).map(|t| t.to_rfc3339()).unwrap_or_default();
        Ok(Self {
            command: command.into(),
            config,
            seeds,
            inputs,
            version: env!("CARGO_PKG_VERSION").into(),
            started,
            elapsed_seconds: 0.0,
        })
    }

    /// Fails when any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            if file_digest(&f.path)? != f.sha256 {
                return Err(Error::Digest { file: f.path.display().to_string() });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Parses `key = value` lines. `#` starts a comment; keys are
/// case-sensitive and may not repeat.
pub fn parse_config(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { file: source.into(), line: n + 1, message: m };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(format!("key {k} given twice")));
        }
    }
    Ok(out)
}

fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
    }
}

/// Keys understood by [`apply_hyperparameters`].
pub const HYPER_KEYS: &[&str] = &[
    "rubrics",
    "factors",
    "concentration",
    "rubric-scale",
    "bandwidth",
    "rank",
    "variance-fraction",
    "coefficient-precision",
    "warmup",
    "samples",
    "thin",
    "seed",
    "proposal-refresh",
    "store-factors",
    "coherence-check",
];

/// Keys understood by [`apply_filter`].
pub const FILTER_KEYS: &[&str] =
    &["date-from", "date-to", "bbox", "min-user-ratings", "min-item-ratings", "categories"];

/// Moves the hyperparameter keys out of `map` into `hyper`.
pub fn apply_hyperparameters(map: &mut BTreeMap<String, String>, hyper: &mut Hyperparameters) -> Result<()> {
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = take(map, $key)? {
                $field = v;
            }
        };
    }
    set!("rubrics", hyper.rubrics);
    set!("factors", hyper.factors);
    set!("concentration", hyper.concentration);
    set!("rubric-scale", hyper.rubric_scale);
    set!("bandwidth", hyper.bandwidth);
    set!("coefficient-precision", hyper.coefficient_precision);
    set!("warmup", hyper.warmup);
    set!("samples", hyper.samples);
    set!("thin", hyper.thin);
    set!("seed", hyper.seed);
    set!("proposal-refresh", hyper.proposal_refresh);
    set!("store-factors", hyper.store_factors);
    set!("coherence-check", hyper.coherence_check);
    match (take::<usize>(map, "rank")?, take::<f64>(map, "variance-fraction")?) {
        (Some(_), Some(_)) => return Err(Error::Config("give either rank or variance-fraction, not both".into())),
        (Some(r), None) => hyper.rank = RankRule::Fixed(r),
        (None, Some(f)) => hyper.rank = RankRule::Fraction(f),
        (None, None) => {}
    }
    hyper.validate()
}

/// Moves the ingest-filter keys out of `map` into `filter`.
pub fn apply_filter(map: &mut BTreeMap<String, String>, filter: &mut IngestFilter) -> Result<()> {
    let date = |v: Option<String>, key: &str| -> Result<Option<NaiveDate>> {
        v.map(|s| {
            NaiveDate::parse_from_str(&s, "%Y-%m-%d")
                .map_err(|_| Error::Config(format!("{key}: {s:?} is not YYYY-MM-DD")))
        })
        .transpose()
    };
    if let Some(d) = date(map.remove("date-from"), "date-from")? {
        filter.date_from = Some(d);
    }
    if let Some(d) = date(map.remove("date-to"), "date-to")? {
        filter.date_to = Some(d);
    }
    if let Some(b) = map.remove("bbox") {
        let v: Vec<f64> = b
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bbox: cannot parse {b:?}")))?;
        if v.len() != 4 {
            return Err(Error::Config("bbox needs lon_min,lon_max,lat_min,lat_max".into()));
        }
        filter.bbox = Some(BoundingBox { lon_min: v[0], lon_max: v[1], lat_min: v[2], lat_max: v[3] });
    }
    if let Some(n) = take(map, "min-user-ratings")? {
        filter.min_user_ratings = n;
    }
    if let Some(n) = take(map, "min-item-ratings")? {
        filter.min_item_ratings = n;
    }
    if let Some(k) = take(map, "categories")? {
        filter.categories = k;
    }
    filter.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    const ITEMS: &str = "item_id,longitude,latitude,price\nA,0.0,0.0,1\nB,1.0,0.0,2\nC,0.0,1.0,4\n";

    #[test]
    fn user_below_threshold_is_removed() {
        let dir = tempfile::tempdir().unwrap();
        let mut ratings = String::from("user_id,item_id,stars,date\n");
        let mut n = 0;
        for (user, count) in [("heavy", 10), ("light", 9)] {
            for j in 0..count {
                n += 1;
                let item = ["A", "B", "C"][j % 3];
                ratings.push_str(&format!("{user},{item},{},2015-01-{:02}\n", 1 + j % 5, 1 + j));
            }
        }
        assert_eq!(n, 19);
        let r = write(dir.path(), "r.csv", &ratings);
        let i = write(dir.path(), "i.csv", ITEMS);
        // duplicates collapse to one rating per pair, so count distinct pairs
        let filter = IngestFilter { min_user_ratings: 3, ..IngestFilter::default() };
        let out = ingest(&r, &i, &filter).unwrap();
        assert_eq!(out.ids.users, vec!["heavy", "light"]);

        let mut distinct = String::from("user_id,item_id,stars,date\n");
        for j in 0..10 {
            distinct.push_str(&format!("heavy,I{j},3,2015-01-01\n"));
        }
        for j in 0..9 {
            distinct.push_str(&format!("light,I{j},3,2015-01-01\n"));
        }
        let items: String = std::iter::once("item_id,longitude,latitude\n".to_string())
            .chain((0..10).map(|j| format!("I{j},{j}.0,0.0\n")))
            .collect();
        let r = write(dir.path(), "r2.csv", &distinct);
        let i = write(dir.path(), "i2.csv", &items);
        let filter = IngestFilter { min_user_ratings: 10, ..IngestFilter::default() };
        let out = ingest(&r, &i, &filter).unwrap();
        assert_eq!(out.ids.users, vec!["heavy"]);
        assert_eq!(out.data.len(), 10);
    }

    #[test]
    fn duplicate_keeps_latest() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(
            dir.path(),
            "r.csv",
            "user_id,item_id,stars,date\nu,A,2,2016-03-01\nu,A,5,2016-04-01\nu,B,1,2016-01-01\n",
        );
        let i = write(dir.path(), "i.csv", ITEMS);
        let out = ingest(&r, &i, &IngestFilter::default()).unwrap();
        assert_eq!(out.data.len(), 2);
        let a = out.data.entries().iter().find(|e| out.ids.items[e.item] == "A").unwrap();
        assert_eq!(a.category, 5);
    }

    const CRAFTED: &str = "user_id,item_id,stars,date
u1,A,5,2014-01-01
u1,B,4,2014-01-02
u1,C,3,2014-01-03
u2,A,2,2014-01-04
u2,B,1,2014-01-05
u3,C,5,2014-01-06
u3,D,4,2014-01-07
u4,D,3,2014-01-08
u4,A,2,2014-01-09
u4,B,4,2014-01-10
u5,D,5,2014-01-11
u6,A,1,2014-01-12
u6,B,2,2014-01-13
u6,C,3,2014-01-14
u6,D,4,2014-01-15
u7,E,5,2012-06-01
u7,A,4,2014-01-16
u8,E,3,2014-01-17
u8,C,2,2014-01-18
u8,B,5,2014-01-19
";

    const CRAFTED_ITEMS: &str = "item_id,longitude,latitude,x
A,-112.0,33.4,1.0
B,-112.1,33.5,2.0
C,-111.9,33.3,0.5
D,-112.2,33.6,3.0
E,-150.0,60.0,1.0
";

    fn write_dataset(dir: &Path, name: &str, data: &RatingsDataset, ids: &IdMaps) -> PathBuf {
        let mut text = String::from("user_id,item_id,stars,date\n");
        for r in data.entries() {
            text.push_str(&format!("{},{},{},2014-02-01\n", ids.users[r.user], ids.items[r.item], r.category));
        }
        write(dir, name, &text)
    }

    #[test]
    fn filtering_reaches_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(CRAFTED.lines().count(), 21);
        let r = write(dir.path(), "r.csv", CRAFTED);
        let i = write(dir.path(), "i.csv", CRAFTED_ITEMS);
        let filter = IngestFilter {
            date_from: NaiveDate::from_ymd_opt(2013, 1, 1),
            date_to: NaiveDate::from_ymd_opt(2016, 12, 31),
            bbox: Some(BoundingBox { lon_min: -113.0, lon_max: -111.0, lat_min: 33.0, lat_max: 34.0 }),
            min_user_ratings: 2,
            min_item_ratings: 4,
            categories: 5,
        };
        let once = ingest(&r, &i, &filter).unwrap();
        // u5 and u7 go first, then D, u3, C and finally u8
        assert_eq!(once.ids.users, vec!["u1", "u2", "u4", "u6"]);
        assert_eq!(once.ids.items, vec!["A", "B"]);
        assert_eq!(once.data.len(), 8);
        let r2 = write_dataset(dir.path(), "r2.csv", &once.data, &once.ids);
        let twice = ingest(&r2, &i, &filter).unwrap();
        assert_eq!(twice.ids, once.ids);
        assert_eq!(twice.data, once.data);
    }

    #[test]
    fn ingestion_ignores_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i.csv", CRAFTED_ITEMS);
        let mut lines: Vec<&str> = CRAFTED.lines().skip(1).collect();
        let a = write(dir.path(), "a.csv", CRAFTED);
        lines.reverse();
        lines.swap(2, 11);
        let b = write(dir.path(), "b.csv", &format!("user_id,item_id,stars,date\n{}\n", lines.join("\n")));
        let f = IngestFilter { min_user_ratings: 2, ..IngestFilter::default() };
        let (x, y) = (ingest(&a, &i, &f).unwrap(), ingest(&b, &i, &f).unwrap());
        assert_eq!(x.data, y.data);
        assert_eq!(x.ids, y.ids);
        assert_eq!(x.items, y.items);
    }

    #[test]
    fn covariates_are_standardized() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "r.csv", CRAFTED);
        let i = write(dir.path(), "i.csv", CRAFTED_ITEMS);
        let out = ingest(&r, &i, &IngestFilter::default()).unwrap();
        let col: Vec<f64> = (0..out.items.len()).map(|j| out.items.covariate(j)[0]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12, "{mean} {var}");
    }

    #[test]
    fn bad_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i.csv", ITEMS);
        let r = write(dir.path(), "r.csv", "user_id,item_id,stars,date\nu,A,3,2015-01-01\nu,B,x,2015-01-01\n");
        match ingest(&r, &i, &IngestFilter::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let r = write(dir.path(), "r2.csv", "user_id,item_id,stars,date\nu,A,3,not-a-date\n");
        assert!(matches!(ingest(&r, &i, &IngestFilter::default()), Err(Error::Parse { line: 2, .. })));
        let r = write(dir.path(), "r3.csv", "user_id,item,stars,date\n");
        assert!(matches!(ingest(&r, &i, &IngestFilter::default()), Err(Error::Parse { .. })));
    }

    #[test]
    fn too_strict_filter_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "r.csv", CRAFTED);
        let i = write(dir.path(), "i.csv", CRAFTED_ITEMS);
        let f = IngestFilter { min_user_ratings: 50, ..IngestFilter::default() };
        assert!(matches!(ingest(&r, &i, &f), Err(Error::FilterTooStrict)));
    }

    fn thousand() -> RatingsDataset {
        let entries = (0..1000).map(|j| Rating { item: j % 40, user: j / 40, category: 1 + j % 5 }).collect();
        RatingsDataset::new(5, 40, 25, entries).unwrap()
    }

    #[test]
    fn half_split_sizes_and_determinism() {
        let data = thousand();
        let (a, b) = split_train_test(&data, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (500, 500));
        let (a2, b2) = split_train_test(&data, 0.5, 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let (a3, _) = split_train_test(&data, 0.5, 4).unwrap();
        assert_ne!(a, a3);
    }

    #[test]
    fn split_is_a_partition() {
        let data = thousand();
        let (a, b) = split_train_test(&data, 0.3, 9).unwrap();
        let key = |r: &Rating| (r.item, r.user, r.category);
        let sa: HashSet<_> = a.entries().iter().map(key).collect();
        let sb: HashSet<_> = b.entries().iter().map(key).collect();
        let all: HashSet<_> = data.entries().iter().map(key).collect();
        assert!(sa.is_disjoint(&sb));
        assert_eq!(sa.union(&sb).copied().collect::<HashSet<_>>(), all);
        assert!(split_train_test(&data, 1.0, 0).is_err());
    }

    pub(crate) fn fake_samples(draws: usize, factors: Option<usize>) -> PosteriorSamples {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (users, items, m) = (6, 4, 3);
        let mut g = || rng.random::<f64>() * 4.0 - 2.0;
        let draws = (0..draws)
            .map(|t| {
                let rubrics = (0..m)
                    .map(|_| {
                        let mut b: Vec<f64> = (0..4).map(|_| g()).collect();
                        b.sort_by(f64::total_cmp);
                        Rubric::new(b).unwrap()
                    })
                    .collect();
                let w: Vec<f64> = (0..m).map(|_| g().abs()).collect();
                let total: f64 = w.iter().sum();
                let fac = |rows: usize, g: &mut dyn FnMut() -> f64| {
                    factors.map(|l| {
                        Factors::from_rows(&(0..rows).map(|_| (0..l).map(|_| g()).collect()).collect::<Vec<_>>(), l)
                            .unwrap()
                    })
                };
                Draw {
                    sweep: 10 + 2 * t,
                    classes: (0..users).map(|u| (u + t) % m).collect(),
                    weights: w.iter().map(|x| x / total).collect(),
                    rubrics,
                    coefficients: vec![g(), -0.0, 1e-300],
                    item_effects: (0..items).map(|_| g()).collect(),
                    basis_coefs: (0..2).map(|_| g() * 1e17).collect(),
                    scales: Scales { item_effect: g().abs(), item_factor: std::f64::consts::PI, spatial: 0.1 },
                    user_factors: fac(users, &mut g),
                    item_factors: fac(items, &mut g),
                    loglik: -1234.5678 * g(),
                }
            })
            .collect();
        PosteriorSamples {
            meta: ChainMeta {
                seed: 42,
                warmup: 10,
                samples: 20,
                thin: 2,
                rubrics: m,
                factors: factors.unwrap_or(0),
                categories: 5,
                acceptance: vec![0.5, 0.25, 1.0 / 3.0],
                fallbacks: 1,
            },
            draws,
        }
    }

    fn bits(s: &PosteriorSamples) -> String {
        // Debug output prints every float exactly, including the sign of zero
        format!("{s:?}")
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        for factors in [None, Some(0), Some(2)] {
            let dir = tempfile::tempdir().unwrap();
            let s = fake_samples(10, factors);
            persist_samples(&s, dir.path()).unwrap();
            let back = load_samples(dir.path()).unwrap();
            assert_eq!(back, s);
            assert_eq!(bits(&back), bits(&s));
            assert!(back.draws[0].coefficients[1].is_sign_negative());
        }
    }

    #[test]
    fn truncated_file_fails_the_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        persist_samples(&fake_samples(10, Some(2)), dir.path()).unwrap();
        let path = dir.path().join("item_effects.csv");
        let text = fs::read(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_samples(dir.path()), Err(Error::Digest { file }) if file == "item_effects.csv"));
    }

    #[test]
    fn unknown_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        persist_samples(&fake_samples(2, None), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": \"1\"", "\"version\": \"99\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_samples(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn config_parsing() {
        let text = "# chain\nrubrics = 10\nwarmup=200 # short\n\nvariance-fraction = 0.95\nstore-factors = false\nbbox = -113,-111,33,34\nmin-user-ratings = 10\nextra = 1\n";
        let mut map = parse_config(text, "run.conf").unwrap();
        let mut hyper = Hyperparameters::default();
        apply_hyperparameters(&mut map, &mut hyper).unwrap();
        let mut filter = IngestFilter::default();
        apply_filter(&mut map, &mut filter).unwrap();
        assert_eq!(hyper.rubrics, 10);
        assert_eq!(hyper.warmup, 200);
        assert_eq!(hyper.rank, RankRule::Fraction(0.95));
        assert!(!hyper.store_factors);
        assert_eq!(filter.min_user_ratings, 10);
        assert_eq!(filter.bbox.unwrap().lat_max, 34.0);
        assert_eq!(map.keys().collect::<Vec<_>>(), vec!["extra"]);

        assert!(matches!(parse_config("a = 1\nnope\n", "x"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_config("a = 1\na = 2\n", "x").is_err());
        let mut bad = parse_config("rank = 3\nvariance-fraction = 0.9", "x").unwrap();
        assert!(apply_hyperparameters(&mut bad, &mut Hyperparameters::default()).is_err());
    }

    #[test]
    fn manifest_detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = write(dir.path(), "in.csv", "a\n1\n");
        let m = RunManifest::new("fit", BTreeMap::new(), vec![1], &[&input]).unwrap();
        let path = dir.path().join("run.json");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        back.verify_inputs().unwrap();
        write(dir.path(), "in.csv", "a\n2\n");
        assert!(back.verify_inputs().is_err());
    }

    #[test]
    fn exported_dataset_ingests_back() {
        use crate::sim::{generate_dataset, Missingness, SimConfig};
        let mut sim = SimConfig::supplement(3);
        sim.items = 12;
        sim.users = 11;
        sim.missingness = Missingness::Density(0.6);
        sim.coefficients = vec![0.5, -1.0];
        sim.pool_size = 10_000;
        let gen = generate_dataset(&sim).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &gen.data, &gen.items).unwrap();
        let back =
            ingest(&dir.path().join("ratings.csv"), &dir.path().join("items.csv"), &IngestFilter::default()).unwrap();
        assert_eq!(back.data, gen.data);
        assert_eq!(back.items.locations(), gen.items.locations());
        assert_eq!(back.ids.users[10], "u10");
        assert_eq!(back.ids.items[3], "i03");

        let rows = read_rating_rows(&dir.path().join("ratings.csv"), 5).unwrap();
        let mut extra = rows.clone();
        extra.push(("stranger".into(), "i00".into(), 3));
        let (indexed, dropped) = index_rows(&extra, &back.ids);
        assert_eq!(dropped, 1);
        assert_eq!(indexed, gen.data.entries());
    }
}
