//! Rating data: the user/item/rating triplet, per-rating weights, splits and
//! weighted means.
//!
//! External MovieLens ids are remapped to dense 0-based indices at parse time.
//! Train/test subsets produced by [`random_split`] share the index maps of
//! their source, so a model fitted on the training side can be queried with
//! any index of the test side (users or items that only occur in the test set
//! are simply unseen by the model).

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Closed interval of admissible rating values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    /// The MovieLens 1-5 star scale.
    pub const STARS: RatingScale = RatingScale { min: 1.0, max: 5.0 };

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.min, self.max)
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale::STARS
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

/// Bidirectional map between external ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    ids: Vec<u64>,
    index: HashMap<u64, u32>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).map(|&i| i as usize)
    }

    pub fn id_of(&self, index: usize) -> u64 {
        self.ids[index]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    fn intern(&mut self, id: u64) -> u32 {
        let next = self.ids.len() as u32;
        *self.index.entry(id).or_insert_with(|| {
            self.ids.push(id);
            next
        })
    }

    pub fn from_ids(ids: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate external id {id}")));
            }
        }
        Ok(IdMap { ids, index })
    }
}

/// The rating triplet: users, items and the observed ratings between them.
///
/// Every `(user, item)` pair occurs at most once; recurrence is expressed only
/// through a [`WeightVector`].
#[derive(Debug, Clone)]
pub struct RatingsDataset {
    ratings: Vec<Rating>,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    scale: RatingScale,
}

impl RatingsDataset {
    pub fn empty(scale: RatingScale) -> Self {
        RatingsDataset {
            ratings: Vec::new(),
            users: Arc::default(),
            items: Arc::default(),
            scale,
        }
    }

    /// Builds a dataset from `(user_id, item_id, rating)` triples, assigning
    /// dense indices in order of first appearance.
    pub fn from_triples<I>(triples: I, scale: RatingScale) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64, f64)>,
    {
        let mut builder = Builder::new(scale);
        for (n, (user, item, value)) in triples.into_iter().enumerate() {
            builder.push(n + 1, user, item, value)?;
        }
        Ok(builder.finish())
    }

    /// Builds a dataset from already-dense `(user, item, rating)` indices.
    /// User and item ids are the indices themselves.
    pub fn from_indexed(
        num_users: usize,
        num_items: usize,
        triples: &[(usize, usize, f64)],
        scale: RatingScale,
    ) -> Result<Self> {
        let users = IdMap::from_ids((0..num_users as u64).collect())?;
        let items = IdMap::from_ids((0..num_items as u64).collect())?;
        let mut seen = HashSet::with_capacity(triples.len());
        let mut ratings = Vec::with_capacity(triples.len());
        for (n, &(u, i, value)) in triples.iter().enumerate() {
            if u >= num_users || i >= num_items {
                return Err(Error::invalid(format!(
                    "record {}: index ({u}, {i}) outside {num_users}x{num_items}",
                    n + 1
                )));
            }
            if !value.is_finite() || !scale.contains(value) {
                return Err(Error::RatingOutOfScale {
                    line: n + 1,
                    value,
                    min: scale.min,
                    max: scale.max,
                });
            }
            if !seen.insert((u, i)) {
                return Err(Error::DuplicatePair {
                    line: n + 1,
                    user: u as u64,
                    item: i as u64,
                });
            }
            ratings.push(Rating {
                user: u as u32,
                item: i as u32,
                value,
            });
        }
        Ok(RatingsDataset {
            ratings,
            users: Arc::new(users),
            items: Arc::new(items),
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    /// Fraction of the user x item matrix that is observed.
    pub fn density(&self) -> f64 {
        let cells = self.num_users() as f64 * self.num_items() as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.len() as f64 / cells
        }
    }

    /// A dataset holding the given records and sharing this dataset's index maps.
    pub fn subset(&self, indices: &[usize]) -> RatingsDataset {
        RatingsDataset {
            ratings: indices.iter().map(|&j| self.ratings[j]).collect(),
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
            scale: self.scale,
        }
    }

    /// Rating indices grouped by user.
    pub fn by_user(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_users()];
        for (j, r) in self.ratings.iter().enumerate() {
            groups[r.user as usize].push(j);
        }
        groups
    }

    /// Rating indices grouped by item.
    pub fn by_item(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_items()];
        for (j, r) in self.ratings.iter().enumerate() {
            groups[r.item as usize].push(j);
        }
        groups
    }

    /// Writes the canonical `user,item,rating,weight` CSV. External ids are
    /// written; the weight column is 1 when no weights are given.
    pub fn write_canonical_csv<W: Write>(
        &self,
        out: W,
        weights: Option<&WeightVector>,
    ) -> Result<()> {
        if let Some(w) = weights {
            w.check_len(self.len())?;
        }
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["user", "item", "rating", "weight"])?;
        for (j, r) in self.ratings.iter().enumerate() {
            let weight = weights.map_or(1.0, |w| w.get(j));
            writer.write_record(&[
                self.users.id_of(r.user as usize).to_string(),
                self.items.id_of(r.item as usize).to_string(),
                r.value.to_string(),
                weight.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

struct Builder {
    ratings: Vec<Rating>,
    users: IdMap,
    items: IdMap,
    seen: HashSet<(u32, u32)>,
    scale: RatingScale,
}

impl Builder {
    fn new(scale: RatingScale) -> Self {
        Builder {
            ratings: Vec::new(),
            users: IdMap::default(),
            items: IdMap::default(),
            seen: HashSet::new(),
            scale,
        }
    }

    fn push(&mut self, line: usize, user: u64, item: u64, value: f64) -> Result<()> {
        if !value.is_finite() || !self.scale.contains(value) {
            return Err(Error::RatingOutOfScale {
                line,
                value,
                min: self.scale.min,
                max: self.scale.max,
            });
        }
        let u = self.users.intern(user);
        let i = self.items.intern(item);
        if !self.seen.insert((u, i)) {
            return Err(Error::DuplicatePair { line, user, item });
        }
        self.ratings.push(Rating { user: u, item: i, value });
        Ok(())
    }

    fn finish(self) -> RatingsDataset {
        RatingsDataset {
            ratings: self.ratings,
            users: Arc::new(self.users),
            items: Arc::new(self.items),
            scale: self.scale,
        }
    }
}

/// On-disk rating file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp` (MovieLens 100K `u.data`).
    Ml100k,
    /// `user::item::rating::timestamp` (MovieLens 1M `ratings.dat`).
    Ml1m,
    /// The canonical `user,item,rating,weight` CSV with header.
    Csv,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml100k" | "ml-100k" => Ok(RatingFormat::Ml100k),
            "ml1m" | "ml-1m" => Ok(RatingFormat::Ml1m),
            "csv" => Ok(RatingFormat::Csv),
            other => Err(Error::invalid(format!(
                "unknown rating format `{other}` (expected ml100k, ml1m or csv)"
            ))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Ml100k => "ml100k",
            RatingFormat::Ml1m => "ml1m",
            RatingFormat::Csv => "csv",
        })
    }
}

/// Parses a MovieLens rating stream on the 1-5 scale. Timestamps are read and
/// discarded; empty lines are skipped.
pub fn parse_ratings<R: BufRead>(source: R, format: RatingFormat) -> Result<RatingsDataset> {
    if format == RatingFormat::Csv {
        return parse_canonical_csv(source).map(|(ds, _)| ds);
    }
    let mut builder = Builder::new(RatingScale::STARS);
    for (n, line) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::Ml100k => line.split('\t').collect(),
            RatingFormat::Ml1m => line.split("::").collect(),
            RatingFormat::Csv => unreachable!(),
        };
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let user = parse_field::<u64>(fields[0], "user id", line_no)?;
        let item = parse_field::<u64>(fields[1], "item id", line_no)?;
        let value = parse_field::<f64>(fields[2], "rating", line_no)?;
        parse_field::<i64>(fields[3], "timestamp", line_no)?;
        builder.push(line_no, user, item, value)?;
    }
    Ok(builder.finish())
}

fn parse_field<T: FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

/// Reads the canonical CSV back, returning the dataset and its weight column.
pub fn parse_canonical_csv<R: std::io::Read>(source: R) -> Result<(RatingsDataset, WeightVector)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["user", "item", "rating", "weight"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header `user,item,rating,weight`".into(),
        });
    }
    let mut builder = Builder::new(RatingScale::STARS);
    let mut weights = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line_no = n + 2;
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let user = parse_field::<u64>(&record[0], "user id", line_no)?;
        let item = parse_field::<u64>(&record[1], "item id", line_no)?;
        let value = parse_field::<f64>(&record[2], "rating", line_no)?;
        let weight = parse_field::<f64>(&record[3], "weight", line_no)?;
        builder.push(line_no, user, item, value)?;
        weights.push(weight);
    }
    let ds = builder.finish();
    let weights = WeightVector::relative(weights)?;
    Ok((ds, weights))
}

/// Opens and parses a rating file.
pub fn read_ratings_file(path: impl AsRef<Path>, format: RatingFormat) -> Result<RatingsDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_ratings(std::io::BufReader::new(file), format)
}

/// What a weight vector's entries mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// Non-negative integer counts (bootstrap multiplicities).
    Multiplicity,
    /// A probability distribution over the ratings (sums to 1).
    Distribution,
    /// Non-negative real importances on the multiplicity scale (mean around 1).
    Relative,
}

/// Per-rating weights, index-aligned with [`RatingsDataset::ratings`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    kind: WeightKind,
}

impl WeightVector {
    /// Tolerance on the sum of a distribution.
    pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

    /// All-ones multiplicities: every rating counted once.
    pub fn ones(len: usize) -> Self {
        WeightVector {
            weights: vec![1.0; len],
            kind: WeightKind::Multiplicity,
        }
    }

    pub fn from_counts(counts: &[u32]) -> Self {
        WeightVector {
            weights: counts.iter().map(|&c| c as f64).collect(),
            kind: WeightKind::Multiplicity,
        }
    }

    pub fn distribution(weights: Vec<f64>) -> Result<Self> {
        check_non_negative(&weights)?;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(WeightVector {
            weights,
            kind: WeightKind::Distribution,
        })
    }

    pub fn relative(weights: Vec<f64>) -> Result<Self> {
        check_non_negative(&weights)?;
        Ok(WeightVector {
            weights,
            kind: WeightKind::Relative,
        })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weights on the multiplicity scale, as the SGD learners consume them:
    /// a distribution is rescaled by its length so that its mean weight is 1,
    /// every other kind is returned unchanged.
    pub fn training_weights(&self) -> Cow<'_, [f64]> {
        match self.kind {
            WeightKind::Distribution => {
                let n = self.weights.len() as f64;
                Cow::Owned(self.weights.iter().map(|w| w * n).collect())
            }
            _ => Cow::Borrowed(&self.weights),
        }
    }

    /// Elementwise product. Two multiplicity vectors stay a multiplicity
    /// vector; anything else becomes relative.
    pub fn hadamard(&self, other: &WeightVector) -> Result<WeightVector> {
        other.check_len(self.len())?;
        let a = self.training_weights();
        let b = other.training_weights();
        let weights = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let kind = if self.kind == WeightKind::Multiplicity && other.kind == WeightKind::Multiplicity
        {
            WeightKind::Multiplicity
        } else {
            WeightKind::Relative
        };
        Ok(WeightVector { weights, kind })
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::WeightLength {
                expected,
                found: self.len(),
            });
        }
        Ok(())
    }
}

fn check_non_negative(weights: &[f64]) -> Result<()> {
    match weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        Some(j) => Err(Error::InvalidWeights(format!(
            "entry {j} is {}, weights must be finite and non-negative",
            weights[j]
        ))),
        None => Ok(()),
    }
}

/// A train/test partition of one source dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    pub seed: u64,
    pub ratio: f64,
}

/// Partitions the ratings uniformly at random without replacement, putting
/// `round(ratio * |R|)` records (at least one, at most `|R| - 1`) in train.
/// Both sides keep the source's record order.
pub fn random_split(ds: &RatingsDataset, ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "cannot split {n} rating(s) into two non-empty sides"
        )));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let (train, test) = order.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPair {
        train: ds.subset(train),
        test: ds.subset(test),
        seed,
        ratio,
    })
}

/// Draws `|R|` record indices uniformly with replacement; each weight is the
/// number of times its record was drawn.
pub fn bootstrap_weights(ds: &RatingsDataset, seed: u64) -> Result<WeightVector> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded(seed);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.gen_range(0..n)] += 1;
    }
    Ok(WeightVector::from_counts(&counts))
}

/// The uniform distribution `1/|R|` over all ratings.
pub fn uniform_distribution(ds: &RatingsDataset) -> Result<WeightVector> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    WeightVector::distribution(vec![1.0 / n as f64; n])
}

/// Weighted global, per-user and per-item rating means.
#[derive(Debug, Clone, PartialEq)]
pub struct Means {
    pub global: f64,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

/// Weighted arithmetic means with a total fallback chain: a group whose
/// ratings all carry weight 0 uses its unweighted mean, and a group with no
/// ratings at all uses the global mean. An empty dataset has the scale
/// midpoint as global mean.
pub fn weighted_means(ds: &RatingsDataset, w: &WeightVector) -> Result<Means> {
    w.check_len(ds.len())?;
    let weights = w.as_slice();

    let mut acc = MeanAcc::default();
    let mut users = vec![MeanAcc::default(); ds.num_users()];
    let mut items = vec![MeanAcc::default(); ds.num_items()];
    for (r, &wt) in ds.ratings().iter().zip(weights) {
        acc.add(r.value, wt);
        users[r.user as usize].add(r.value, wt);
        items[r.item as usize].add(r.value, wt);
    }
    let global = acc.mean().unwrap_or_else(|| ds.scale().midpoint());
    Ok(Means {
        global,
        users: users.iter().map(|a| a.mean().unwrap_or(global)).collect(),
        items: items.iter().map(|a| a.mean().unwrap_or(global)).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct MeanAcc {
    weighted_sum: f64,
    weight: f64,
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn add(&mut self, value: f64, weight: f64) {
        self.weighted_sum += weight * value;
        self.weight += weight;
        self.sum += value;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        if self.weight > 0.0 {
            Some(self.weighted_sum / self.weight)
        } else if self.count > 0 {
            Some(self.sum / self.count as f64)
        } else {
            None
        }
    }
}
