//! Weight-aware k-nearest-neighbour prediction.
//!
//! Similarities between two entities (users, or items in the item-item
//! perspective) are computed over their co-rated set, each co-rated position
//! weighted by the larger of the two ratings' weights. Predictions use the
//! adjusted weighted average
//!
//! ```text
//! r̂(a, t) = mean(a) + Σ_b sim(a, b) · (r(b, t) − mean(b)) / Σ_b |sim(a, b)|
//! ```
//!
//! over the `k` most similar entities `b` that rated the target `t`. The
//! item-item perspective is the same routine with user and item exchanged.
//!
//! With `neighbor_pool_factor = 2` the `k` neighbours are instead drawn
//! uniformly from the `2k` most similar usable ones; the draw is seeded by
//! the model's selection seed and the queried pair, so prediction stays pure.

use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{weighted_means, Means, RatingScale, RatingsDataset, WeightVector};
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    UserUser,
    ItemItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pearson,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub perspective: Perspective,
    pub metric: Metric,
    pub k: usize,
    /// 1 selects the top `k` neighbours; 2 draws `k` of the top `2k`.
    pub neighbor_pool_factor: usize,
    /// Whether negatively correlated neighbours may vote.
    pub keep_negative: bool,
    /// Optional cap on the stored neighbour list per entity (memory bound for
    /// large catalogues). `None` keeps every defined similarity.
    pub max_neighbors: Option<usize>,
}

impl KnnConfig {
    pub fn new(perspective: Perspective, metric: Metric, k: usize) -> Self {
        KnnConfig {
            perspective,
            metric,
            k,
            neighbor_pool_factor: 1,
            keep_negative: true,
            max_neighbors: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k-NN neighbourhood size must be at least 1"));
        }
        if !matches!(self.neighbor_pool_factor, 1 | 2) {
            return Err(Error::invalid(format!(
                "neighbor_pool_factor must be 1 or 2, got {}",
                self.neighbor_pool_factor
            )));
        }
        if let Some(cap) = self.max_neighbors {
            if cap < self.k * self.neighbor_pool_factor {
                return Err(Error::invalid(format!(
                    "max_neighbors {cap} is smaller than k * pool factor"
                )));
            }
        }
        Ok(())
    }
}

/// One entry of a sparse rating profile: the co-ordinate on the other axis
/// (item for a user profile, user for an item profile), the rating and its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub index: u32,
    pub value: f64,
    pub weight: f64,
}

/// Walks two index-sorted profiles in lockstep, yielding co-rated pairs.
fn co_rated<'a>(
    a: &'a [ProfileEntry],
    b: &'a [ProfileEntry],
) -> impl Iterator<Item = (ProfileEntry, ProfileEntry)> + 'a {
    let (mut i, mut j) = (0, 0);
    std::iter::from_fn(move || {
        while i < a.len() && j < b.len() {
            match a[i].index.cmp(&b[j].index) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let pair = (a[i], b[j]);
                    i += 1;
                    j += 1;
                    return Some(pair);
                }
            }
        }
        None
    })
}

#[derive(Debug, Default, Clone, Copy)]
struct SimAcc {
    cross: f64,
    norm_a: f64,
    norm_b: f64,
    count: u32,
}

impl SimAcc {
    #[inline]
    fn add(&mut self, weight: f64, da: f64, db: f64) {
        self.cross += weight * (da * db);
        self.norm_a += weight * (da * da);
        self.norm_b += weight * (db * db);
        self.count += 1;
    }

    fn finish(&self, min_overlap: u32, lower: f64) -> Option<f64> {
        if self.count < min_overlap || self.norm_a <= 0.0 || self.norm_b <= 0.0 {
            return None;
        }
        let s = self.cross / (self.norm_a.sqrt() * self.norm_b.sqrt());
        Some(s.clamp(lower, 1.0))
    }
}

const PEARSON_MIN_OVERLAP: u32 = 2;
const COSINE_MIN_OVERLAP: u32 = 1;

/// Weighted Pearson correlation of two profiles around the entities' means.
/// `None` when fewer than two positions are co-rated or a centred norm vanishes.
pub fn weighted_pearson(
    a: &[ProfileEntry],
    b: &[ProfileEntry],
    mean_a: f64,
    mean_b: f64,
) -> Option<f64> {
    let mut acc = SimAcc::default();
    for (x, y) in co_rated(a, b) {
        acc.add(x.weight.max(y.weight), x.value - mean_a, y.value - mean_b);
    }
    acc.finish(PEARSON_MIN_OVERLAP, -1.0)
}

/// Weighted cosine similarity of two profiles. `None` when nothing is
/// co-rated or a weighted norm vanishes.
pub fn weighted_cosine(a: &[ProfileEntry], b: &[ProfileEntry]) -> Option<f64> {
    let mut acc = SimAcc::default();
    for (x, y) in co_rated(a, b) {
        acc.add(x.weight.max(y.weight), x.value, y.value);
    }
    acc.finish(COSINE_MIN_OVERLAP, -1.0)
}

/// Compressed sparse rows of profile entries.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Profiles {
    pub(crate) offsets: Vec<usize>,
    pub(crate) entries: Vec<ProfileEntry>,
}

impl Profiles {
    fn build(rows: usize, items: impl Iterator<Item = (usize, ProfileEntry)>) -> Self {
        let mut grouped: Vec<Vec<ProfileEntry>> = vec![Vec::new(); rows];
        for (row, entry) in items {
            grouped[row].push(entry);
        }
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for mut row in grouped {
            row.sort_unstable_by_key(|e| e.index);
            entries.extend(row);
            offsets.push(entries.len());
        }
        Profiles { offsets, entries }
    }

    pub(crate) fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn row(&self, r: usize) -> &[ProfileEntry] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn lookup(&self, r: usize, index: u32) -> Option<&ProfileEntry> {
        let row = self.row(r);
        row.binary_search_by_key(&index, |e| e.index)
            .ok()
            .map(|p| &row[p])
    }
}

/// Entity profiles (rows) for one perspective plus the transposed view.
fn perspective_profiles(
    train: &RatingsDataset,
    weights: &[f64],
    perspective: Perspective,
) -> (Profiles, Profiles) {
    let (n_rows, n_cols) = match perspective {
        Perspective::UserUser => (train.num_users(), train.num_items()),
        Perspective::ItemItem => (train.num_items(), train.num_users()),
    };
    let oriented = || {
        train.ratings().iter().zip(weights).map(move |(r, &w)| {
            let (row, col) = match perspective {
                Perspective::UserUser => (r.user, r.item),
                Perspective::ItemItem => (r.item, r.user),
            };
            (row, col, r.value, w)
        })
    };
    let rows = Profiles::build(
        n_rows,
        oriented().map(|(row, col, value, weight)| {
            (row as usize, ProfileEntry { index: col, value, weight })
        }),
    );
    let cols = Profiles::build(
        n_cols,
        oriented().map(|(row, col, value, weight)| {
            (col as usize, ProfileEntry { index: row, value, weight })
        }),
    );
    (rows, cols)
}

/// Neighbour lists: per entity, `(neighbour, similarity)` sorted by
/// descending similarity, ties toward the lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub(crate) offsets: Vec<usize>,
    pub(crate) neighbors: Vec<(u32, f64)>,
}

impl NeighborTable {
    pub fn neighbors_of(&self, entity: usize) -> &[(u32, f64)] {
        &self.neighbors[self.offsets[entity]..self.offsets[entity + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sort_neighbors(list: &mut [(u32, f64)]) {
    list.sort_unstable_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
}

/// All pairwise similarities, accumulated through the transposed profiles
/// so that only co-rated pairs are ever touched.
fn similarity_table(
    rows: &Profiles,
    cols: &Profiles,
    entity_means: &[f64],
    config: &KnnConfig,
) -> NeighborTable {
    let n = rows.rows();
    let (min_overlap, centred) = match config.metric {
        Metric::Pearson => (PEARSON_MIN_OVERLAP, true),
        Metric::Cosine => (COSINE_MIN_OVERLAP, false),
    };
    let lists: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![SimAcc::default(); n], Vec::<u32>::new()),
            |(accs, touched), a| {
                let mean_a = if centred { entity_means[a] } else { 0.0 };
                for ea in rows.row(a) {
                    let da = ea.value - mean_a;
                    for eb in cols.row(ea.index as usize) {
                        let b = eb.index as usize;
                        if b == a {
                            continue;
                        }
                        let mean_b = if centred { entity_means[b] } else { 0.0 };
                        let acc = &mut accs[b];
                        if acc.count == 0 {
                            touched.push(b as u32);
                        }
                        acc.add(ea.weight.max(eb.weight), da, eb.value - mean_b);
                    }
                }
                let mut list = Vec::with_capacity(touched.len());
                for &b in touched.iter() {
                    let acc = std::mem::take(&mut accs[b as usize]);
                    if let Some(s) = acc.finish(min_overlap, -1.0) {
                        if config.keep_negative || s >= 0.0 {
                            list.push((b, s));
                        }
                    }
                }
                touched.clear();
                sort_neighbors(&mut list);
                if let Some(cap) = config.max_neighbors {
                    list.truncate(cap);
                }
                list
            },
        )
        .collect();

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut neighbors = Vec::with_capacity(lists.iter().map(Vec::len).sum());
    for list in lists {
        neighbors.extend(list);
        offsets.push(neighbors.len());
    }
    NeighborTable { offsets, neighbors }
}

/// Everything a k-NN model learns at fit time. Shared between the members of
/// a random k-NN ensemble, which differ only in neighbour selection.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnTable {
    pub(crate) config: KnnConfig,
    pub(crate) means: Means,
    pub(crate) profiles: Profiles,
    pub(crate) table: NeighborTable,
    pub(crate) scale: RatingScale,
}

impl KnnTable {
    pub fn config(&self) -> &KnnConfig {
        &self.config
    }

    pub fn means(&self) -> &Means {
        &self.means
    }

    pub fn neighbors(&self) -> &NeighborTable {
        &self.table
    }

    fn entity_means(&self) -> &[f64] {
        match self.config.perspective {
            Perspective::UserUser => &self.means.users,
            Perspective::ItemItem => &self.means.items,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub(crate) table: Arc<KnnTable>,
    pub(crate) neighbor_pool_factor: usize,
    pub(crate) selection_seed: u64,
}

/// A prediction together with the neighbours that voted for it.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    /// Unclamped adjusted weighted average (or the fallback mean).
    pub value: f64,
    /// `(neighbour, similarity)` of the voters, in similarity order.
    pub neighbors: Vec<(usize, f64)>,
    pub fallback: bool,
}

/// Builds the similarity table for `train` under `weights`.
pub fn fit_knn(train: &RatingsDataset, weights: &WeightVector, config: KnnConfig) -> Result<KnnModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check_len(train.len())?;
    let means = weighted_means(train, weights)?;
    let (profiles, transposed) =
        perspective_profiles(train, weights.as_slice(), config.perspective);
    let entity_means = match config.perspective {
        Perspective::UserUser => &means.users,
        Perspective::ItemItem => &means.items,
    };
    let table = similarity_table(&profiles, &transposed, entity_means, &config);
    Ok(KnnModel {
        table: Arc::new(KnnTable {
            config,
            means,
            profiles,
            table,
            scale: train.scale(),
        }),
        neighbor_pool_factor: config.neighbor_pool_factor,
        selection_seed: 0,
    })
}

impl KnnModel {
    pub fn table(&self) -> &KnnTable {
        &self.table
    }

    pub fn config(&self) -> &KnnConfig {
        &self.table.config
    }

    pub fn neighbor_pool_factor(&self) -> usize {
        self.neighbor_pool_factor
    }

    pub fn selection_seed(&self) -> u64 {
        self.selection_seed
    }

    /// A model sharing this one's similarity table but selecting neighbours
    /// with a different pool factor and seed.
    pub fn with_selection(&self, neighbor_pool_factor: usize, selection_seed: u64) -> Result<KnnModel> {
        if !matches!(neighbor_pool_factor, 1 | 2) {
            return Err(Error::invalid("neighbor_pool_factor must be 1 or 2"));
        }
        Ok(KnnModel {
            table: Arc::clone(&self.table),
            neighbor_pool_factor,
            selection_seed,
        })
    }

    /// Unclamped prediction with its voters.
    pub fn explain(&self, user: usize, item: usize) -> KnnPrediction {
        let t = &*self.table;
        let (entity, target) = match t.config.perspective {
            Perspective::UserUser => (user, item),
            Perspective::ItemItem => (item, user),
        };
        let means = t.entity_means();
        if entity >= t.profiles.rows() || t.profiles.row(entity).is_empty() {
            return KnnPrediction {
                value: t.means.global,
                neighbors: Vec::new(),
                fallback: true,
            };
        }
        let base = means[entity];
        let k = t.config.k;
        let pool = k * self.neighbor_pool_factor;

        let mut usable: Vec<(usize, f64, f64)> = Vec::with_capacity(pool);
        for &(b, s) in t.table.neighbors_of(entity) {
            if let Some(e) = t.profiles.lookup(b as usize, target as u32) {
                if e.weight > 0.0 {
                    usable.push((b as usize, s, e.value));
                    if usable.len() == pool {
                        break;
                    }
                }
            }
        }
        if usable.len() > k {
            let mut rng = seeded(derive_seed(
                self.selection_seed,
                ((entity as u64) << 32) | target as u64,
            ));
            let mut picked = sample(&mut rng, usable.len(), k).into_vec();
            picked.sort_unstable();
            usable = picked.into_iter().map(|p| usable[p]).collect();
        }

        let mut num = 0.0;
        let mut den = 0.0;
        for &(b, s, r) in &usable {
            num += s * (r - means[b]);
            den += s.abs();
        }
        if den > 0.0 {
            KnnPrediction {
                value: base + num / den,
                neighbors: usable.iter().map(|&(b, s, _)| (b, s)).collect(),
                fallback: false,
            }
        } else {
            KnnPrediction {
                value: base,
                neighbors: Vec::new(),
                fallback: true,
            }
        }
    }
}

impl Predictor for KnnModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.table.scale.clamp(self.explain(user, item).value)
    }
}
