//! Interaction logs, dataset descriptors, and a synthetic dataset generator.
//!
//! A dataset on disk is a descriptor file (flat key = value text) naming a
//! train file, a test file, and optionally a category file, all delimited
//! text with a header row. Ids are densely re-indexed from 0 unless the
//! descriptor pins `n_users`/`n_items`, in which case records must already
//! use dense ids and out-of-range ids are format errors.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

/// One logged (user, item, reward) event. Timestamps are monotone within a
/// user; ties are broken by ascending item id when sorting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub item_id: usize,
    pub reward: f64,
    pub timestamp: i64,
}

/// Item-side metadata shared by environments and metrics.
#[derive(Clone, Debug)]
pub struct ItemCatalog {
    pub n_items: usize,
    /// One category label per item. When the dataset ships no category file
    /// each item is its own category, which degrades category-based notions
    /// (diversity, boredom) to item identity.
    pub category: Vec<usize>,
    /// Empirical frequency of each item in the training log; sums to 1.
    pub popularity: Vec<f64>,
    pub has_categories: bool,
}

impl ItemCatalog {
    pub fn n_categories(&self) -> usize {
        self.category.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Parsed dataset descriptor.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub train_file: String,
    pub test_file: String,
    pub category_file: Option<String>,
    pub delimiter: char,
    pub user_col: String,
    pub item_col: String,
    pub reward_col: String,
    pub timestamp_col: Option<String>,
    pub reward_min: f64,
    pub reward_max: f64,
    pub n_users: Option<usize>,
    pub n_items: Option<usize>,
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read descriptor {}: {e}", path.display())))?;
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("descriptor line {}: expected key = value", lineno + 1)))?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |keys: &mut BTreeMap<String, String>, k: &str| -> Result<String> {
            keys.remove(k).ok_or_else(|| Error::format(format!("descriptor missing key {k}")))
        };
        let spec = DatasetSpec {
            train_file: take(&mut keys, "train_file")?,
            test_file: take(&mut keys, "test_file")?,
            category_file: keys.remove("category_file"),
            delimiter: match keys.remove("delimiter").as_deref() {
                Some("comma") | None => ',',
                Some("tab") => '\t',
                Some(other) => {
                    return Err(Error::format(format!("delimiter must be comma or tab, got {other}")))
                }
            },
            user_col: take(&mut keys, "user_col")?,
            item_col: take(&mut keys, "item_col")?,
            reward_col: take(&mut keys, "reward_col")?,
            timestamp_col: keys.remove("timestamp_col"),
            reward_min: parse_f64(&take(&mut keys, "reward_min")?)?,
            reward_max: parse_f64(&take(&mut keys, "reward_max")?)?,
            n_users: keys.remove("n_users").map(|v| parse_usize(&v)).transpose()?,
            n_items: keys.remove("n_items").map(|v| parse_usize(&v)).transpose()?,
        };
        if let Some(k) = keys.keys().next() {
            return Err(Error::format(format!("descriptor has unknown key {k}")));
        }
        if spec.reward_min > spec.reward_max {
            return Err(Error::format("reward_min exceeds reward_max"));
        }
        Ok(spec)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::format(format!("not a number: {s}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::format(format!("not an integer: {s}")))
}

/// A fully loaded dataset: both splits, the catalog, and the reward range.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub catalog: ItemCatalog,
    pub n_users: usize,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl Dataset {
    /// Load from a descriptor file; data files are resolved relative to it.
    pub fn load(descriptor: &Path) -> Result<Dataset> {
        let spec = DatasetSpec::load(descriptor)?;
        let base = descriptor.parent().unwrap_or_else(|| Path::new("."));
        load_dataset(base, &spec)
    }
}

struct RawRecord {
    user: u64,
    item: u64,
    reward: f64,
    timestamp: Option<i64>,
}

/// Load train/test splits plus the catalog as described by `spec`, with file
/// paths resolved against `base`.
pub fn load_dataset(base: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let train_raw = read_split(&base.join(&spec.train_file), spec)?;
    let test_raw = read_split(&base.join(&spec.test_file), spec)?;
    if train_raw.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    if test_raw.is_empty() {
        return Err(Error::data("test split is empty"));
    }

    // Id mapping: identity (with bounds checks) when pinned, dense otherwise.
    let map_ids = |pinned: Option<usize>, pick: fn(&RawRecord) -> u64| -> Result<BTreeMap<u64, usize>> {
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        for r in train_raw.iter().chain(test_raw.iter()) {
            seen.insert(pick(r));
        }
        match pinned {
            Some(n) => {
                for &v in &seen {
                    if v as usize >= n {
                        return Err(Error::format(format!("id {v} out of range [0, {n})")));
                    }
                }
                Ok((0..n as u64).map(|v| (v, v as usize)).collect())
            }
            None => Ok(seen.into_iter().enumerate().map(|(i, v)| (v, i)).collect()),
        }
    };
    let user_map = map_ids(spec.n_users, |r| r.user)?;
    let item_map = map_ids(spec.n_items, |r| r.item)?;
    let n_users = spec.n_users.unwrap_or(user_map.len());
    let n_items = spec.n_items.unwrap_or(item_map.len());

    let finish = |raw: Vec<RawRecord>| -> Vec<InteractionRecord> {
        let mut per_user_counter: BTreeMap<usize, i64> = BTreeMap::new();
        let mut out = Vec::with_capacity(raw.len());
        for r in raw {
            let user_id = user_map[&r.user];
            let timestamp = r.timestamp.unwrap_or_else(|| {
                let c = per_user_counter.entry(user_id).or_insert(0);
                *c += 1;
                *c
            });
            out.push(InteractionRecord { user_id, item_id: item_map[&r.item], reward: r.reward, timestamp });
        }
        out
    };
    let train = finish(train_raw);
    let test = finish(test_raw);

    // Categories: provided file or item identity.
    let (category, has_categories) = match &spec.category_file {
        Some(f) => {
            let path = base.join(f);
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::data(format!("cannot read category file {}: {e}", path.display())))?;
            let mut cats = vec![usize::MAX; n_items];
            for raw in text.lines() {
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                let mut parts = line.split(spec.delimiter);
                let a = parts.next().unwrap_or("").trim();
                let b = parts.next().unwrap_or("").trim();
                let (Ok(item), Ok(cat)) = (a.parse::<u64>(), b.parse::<usize>()) else {
                    continue; // header or malformed line
                };
                if let Some(&ix) = item_map.get(&item) {
                    cats[ix] = cat;
                }
            }
            if let Some(missing) = cats.iter().position(|&c| c == usize::MAX) {
                return Err(Error::format(format!("item {missing} has no category")));
            }
            (cats, true)
        }
        None => ((0..n_items).collect(), false),
    };

    let mut popularity = vec![0.0; n_items];
    for r in &train {
        popularity[r.item_id] += 1.0;
    }
    let total = train.len() as f64;
    for p in &mut popularity {
        *p /= total;
    }

    Ok(Dataset {
        train,
        test,
        catalog: ItemCatalog { n_items, category, popularity, has_categories },
        n_users,
        reward_min: spec.reward_min,
        reward_max: spec.reward_max,
    })
}

fn read_split(path: &Path, spec: &DatasetSpec) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read data file {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(spec.delimiter).map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::format(format!("{} has no column {name}", path.display())))
    };
    let user_ix = col(&spec.user_col)?;
    let item_ix = col(&spec.item_col)?;
    let reward_ix = col(&spec.reward_col)?;
    let ts_ix = spec.timestamp_col.as_deref().map(col).transpose()?;

    let mut out = Vec::new();
    for (lineno, raw) in lines.enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(spec.delimiter).map(str::trim).collect();
        let field = |ix: usize| -> Result<&str> {
            fields.get(ix).copied().ok_or_else(|| {
                Error::format(format!("{} line {}: too few fields", path.display(), lineno + 2))
            })
        };
        let user = field(user_ix)?
            .parse::<u64>()
            .map_err(|_| Error::format(format!("{} line {}: bad user id", path.display(), lineno + 2)))?;
        let item = field(item_ix)?
            .parse::<u64>()
            .map_err(|_| Error::format(format!("{} line {}: bad item id", path.display(), lineno + 2)))?;
        let reward = parse_f64(field(reward_ix)?)?;
        let timestamp = match ts_ix {
            Some(ix) => Some(field(ix)?.parse::<i64>().map_err(|_| {
                Error::format(format!("{} line {}: bad timestamp", path.display(), lineno + 2))
            })?),
            None => None,
        };
        out.push(RawRecord { user, item, reward, timestamp });
    }
    Ok(out)
}

/// Group records per user, each user's list sorted by (timestamp, item_id).
/// Users appear in ascending id order.
pub fn group_by_user_sorted(records: &[InteractionRecord]) -> Vec<(usize, Vec<InteractionRecord>)> {
    let mut per_user: BTreeMap<usize, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        per_user.entry(r.user_id).or_default().push(*r);
    }
    per_user
        .into_iter()
        .map(|(u, mut rs)| {
            rs.sort_by(|a, b| (a.timestamp, a.item_id).cmp(&(b.timestamp, b.item_id)));
            (u, rs)
        })
        .collect()
}

// ── synthetic data ──────────────────────────────────────────────────────

/// Configuration of the synthetic low-rank dataset generator.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
    /// Fraction of each user's row observed in the train split.
    pub density: f64,
    /// Fraction of each user's row held out as test, drawn from the cells
    /// not used for training (falls back to all cells when none remain).
    pub test_fraction: f64,
    pub n_categories: usize,
    /// Bias train-cell selection towards high-reward items, mimicking
    /// self-selected feedback; test cells stay uniform.
    pub exposure_bias: f64,
    /// Round rewards to integers in [reward_min, reward_max].
    pub integer_rewards: bool,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 20,
            n_items: 16,
            rank: 2,
            noise: 0.0,
            seed: 2023,
            density: 0.5,
            test_fraction: 0.2,
            n_categories: 4,
            exposure_bias: 0.0,
            integer_rewards: false,
            reward_min: 1.0,
            reward_max: 5.0,
        }
    }
}

/// Generated dataset plus the ground-truth matrix for oracle checks.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Row-major n_users x n_items true reward matrix.
    pub true_matrix: Vec<f64>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.rank == 0 {
        return Err(Error::config("synthetic generator needs positive users, items, rank"));
    }
    if !(0.0..=1.0).contains(&cfg.density) || !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(Error::config("density and test_fraction must be in [0,1]"));
    }
    let mut rng = Rng::seed(cfg.seed);
    let (n, m, k) = (cfg.n_users, cfg.n_items, cfg.rank);
    let u: Vec<f64> = (0..n * k).map(|_| rng.uniform(0.4, 1.4)).collect();
    let v: Vec<f64> = (0..m * k).map(|_| rng.uniform(0.4, 1.4)).collect();
    let raw = |usr: usize, it: usize| -> f64 {
        (0..k).map(|f| u[usr * k + f] * v[it * k + f]).sum::<f64>()
    };
    // Scale raw factor products into the reward range.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for usr in 0..n {
        for it in 0..m {
            let r = raw(usr, it);
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let span = (hi - lo).max(1e-9);
    let mut noise_rng = rng.split();
    let mut true_matrix = vec![0.0; n * m];
    for usr in 0..n {
        for it in 0..m {
            let scaled = cfg.reward_min + (raw(usr, it) - lo) / span * (cfg.reward_max - cfg.reward_min);
            true_matrix[usr * m + it] = scaled;
        }
    }

    let observed = |true_matrix: &[f64], usr: usize, it: usize, rng: &mut Rng| -> f64 {
        let mut r = true_matrix[usr * m + it];
        if cfg.noise > 0.0 {
            r += cfg.noise * rng.normal();
        }
        r = r.clamp(cfg.reward_min, cfg.reward_max);
        if cfg.integer_rewards {
            r = r.round();
        }
        r
    };

    let per_user_train = ((cfg.density * m as f64).round() as usize).min(m);
    let per_user_test = ((cfg.test_fraction * m as f64).round() as usize).min(m);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for usr in 0..n {
        // Train cells, optionally exposure-biased towards liked items.
        let mut remaining: Vec<usize> = (0..m).collect();
        let mut chosen = Vec::with_capacity(per_user_train);
        for _ in 0..per_user_train {
            let pick = if cfg.exposure_bias > 0.0 {
                let weights: Vec<f64> = remaining
                    .iter()
                    .map(|&it| (cfg.exposure_bias * true_matrix[usr * m + it]).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut x = rng.f64() * total;
                let mut ix = remaining.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if x < *w {
                        ix = i;
                        break;
                    }
                    x -= w;
                }
                ix
            } else {
                rng.below(remaining.len())
            };
            chosen.push(remaining.swap_remove(pick));
        }
        for (t, &it) in chosen.iter().enumerate() {
            train.push(InteractionRecord {
                user_id: usr,
                item_id: it,
                reward: observed(&true_matrix, usr, it, &mut noise_rng),
                timestamp: t as i64 + 1,
            });
        }
        // Test cells: uniform over what's left (or everything, when train
        // covered the full row).
        let mut pool = if remaining.is_empty() { (0..m).collect() } else { remaining };
        let mut picked = Vec::with_capacity(per_user_test);
        for _ in 0..per_user_test.min(pool.len()) {
            let ix = rng.below(pool.len());
            picked.push(pool.swap_remove(ix));
        }
        for (t, &it) in picked.iter().enumerate() {
            test.push(InteractionRecord {
                user_id: usr,
                item_id: it,
                reward: observed(&true_matrix, usr, it, &mut noise_rng),
                timestamp: t as i64 + 1,
            });
        }
    }
    if test.is_empty() {
        return Err(Error::data("synthetic test split came out empty; raise test_fraction"));
    }

    let mut cat_rng = Rng::seed(cfg.seed ^ 0xca7);
    let category: Vec<usize> = (0..m).map(|_| cat_rng.below(cfg.n_categories.max(1))).collect();
    let mut popularity = vec![0.0; m];
    for r in &train {
        popularity[r.item_id] += 1.0;
    }
    for p in &mut popularity {
        *p /= train.len() as f64;
    }

    Ok(SynthDataset {
        dataset: Dataset {
            train,
            test,
            catalog: ItemCatalog { n_items: m, category, popularity, has_categories: true },
            n_users: n,
            reward_min: cfg.reward_min,
            reward_max: cfg.reward_max,
        },
        true_matrix,
    })
}

/// Write a dataset to `dir` as train/test/category files plus a descriptor;
/// returns the descriptor path.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let write_split = |name: &str, records: &[InteractionRecord]| -> Result<()> {
        let mut text = String::from("user_id,item_id,rating,timestamp\n");
        for r in records {
            text.push_str(&format!("{},{},{},{}\n", r.user_id, r.item_id, fmt_f64(r.reward), r.timestamp));
        }
        fs::write(dir.join(name), text)?;
        Ok(())
    };
    write_split("train.csv", &ds.train)?;
    write_split("test.csv", &ds.test)?;
    let mut cats = String::from("item_id,category\n");
    for (i, c) in ds.catalog.category.iter().enumerate() {
        cats.push_str(&format!("{i},{c}\n"));
    }
    fs::write(dir.join("categories.csv"), cats)?;
    let descriptor = dir.join("descriptor.conf");
    let body = format!(
        "train_file = train.csv\ntest_file = test.csv\ncategory_file = categories.csv\n\
         delimiter = comma\nuser_col = user_id\nitem_col = item_id\nreward_col = rating\n\
         timestamp_col = timestamp\nreward_min = {}\nreward_max = {}\nn_users = {}\nn_items = {}\n",
        fmt_f64(ds.reward_min),
        fmt_f64(ds.reward_max),
        ds.n_users,
        ds.catalog.n_items
    );
    fs::write(&descriptor, body)?;
    Ok(descriptor)
}

/// Stable float formatting for data files (no exponent, trimmed zeros).
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_full_density_has_all_cells() {
        let cfg = SynthConfig {
            n_users: 10,
            n_items: 8,
            density: 1.0,
            test_fraction: 0.25,
            ..Default::default()
        };
        let out = generate_synthetic(&cfg).unwrap();
        assert_eq!(out.dataset.train.len(), 80);
        assert_eq!(out.dataset.n_users, 10);
        assert_eq!(out.dataset.catalog.n_items, 8);
    }

    #[test]
    fn popularity_sums_to_one() {
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let sum: f64 = out.dataset.catalog.popularity.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn write_then_load_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let descriptor = write_dataset(tmp.path(), &out.dataset).unwrap();
        let loaded = Dataset::load(&descriptor).unwrap();
        assert_eq!(loaded.train.len(), out.dataset.train.len());
        assert_eq!(loaded.test.len(), out.dataset.test.len());
        assert_eq!(loaded.catalog.category, out.dataset.catalog.category);
        for (a, b) in loaded.train.iter().zip(&out.dataset.train) {
            assert_eq!(a.user_id, b.user_id);
            assert_eq!(a.item_id, b.item_id);
            assert!((a.reward - b.reward).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_item_is_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let descriptor = write_dataset(tmp.path(), &out.dataset).unwrap();
        // Append a record whose item id equals n_items.
        let train = tmp.path().join("train.csv");
        let mut text = fs::read_to_string(&train).unwrap();
        text.push_str(&format!("0,{},3,99\n", out.dataset.catalog.n_items));
        fs::write(&train, text).unwrap();
        match Dataset::load(&descriptor) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let descriptor = write_dataset(tmp.path(), &out.dataset).unwrap();
        let train = tmp.path().join("train.csv");
        let text = fs::read_to_string(&train).unwrap();
        let text = text.replacen("rating", "score", 1);
        fs::write(&train, text).unwrap();
        assert!(matches!(Dataset::load(&descriptor), Err(Error::Format(_))));
    }

    #[test]
    fn empty_split_is_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let descriptor = write_dataset(tmp.path(), &out.dataset).unwrap();
        fs::write(tmp.path().join("test.csv"), "user_id,item_id,rating,timestamp\n").unwrap();
        assert!(matches!(Dataset::load(&descriptor), Err(Error::Data(_))));
    }

    #[test]
    fn group_by_user_sorts_with_item_tiebreak() {
        let records = vec![
            InteractionRecord { user_id: 1, item_id: 5, reward: 1.0, timestamp: 2 },
            InteractionRecord { user_id: 1, item_id: 3, reward: 1.0, timestamp: 2 },
            InteractionRecord { user_id: 1, item_id: 9, reward: 1.0, timestamp: 1 },
            InteractionRecord { user_id: 0, item_id: 0, reward: 1.0, timestamp: 5 },
        ];
        let grouped = group_by_user_sorted(&records);
        assert_eq!(grouped[0].0, 0);
        assert_eq!(grouped[1].0, 1);
        let items: Vec<usize> = grouped[1].1.iter().map(|r| r.item_id).collect();
        assert_eq!(items, vec![9, 3, 5]);
    }

    #[test]
    fn unknown_descriptor_key_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SynthConfig::default()).unwrap();
        let descriptor = write_dataset(tmp.path(), &out.dataset).unwrap();
        let mut text = fs::read_to_string(&descriptor).unwrap();
        text.push_str("mystery_key = 1\n");
        fs::write(&descriptor, text).unwrap();
        assert!(matches!(Dataset::load(&descriptor), Err(Error::Format(_))));
    }
}
