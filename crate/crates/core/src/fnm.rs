//! Weight-aware factorized neighbourhood model.
//!
//! ```text
//! r̂(u, i) = μ + b_u + b_i + q_i · p_u
//! p_u     = |R(u)|^−α Σ_{j∈R(u)} w_uj (r_uj − b_uj) x_j + |N(u)|^−α Σ_{j∈N(u)} w_uj y_j
//! ```
//!
//! `b_uj = μ + b_u + b_j` is the static baseline fixed by [`init_baselines`];
//! the leading `b_u`, `b_i` are separate trainable copies. Only explicit
//! ratings exist, so `N(u) = R(u)`: the items `u` rated with positive weight.
//! The cardinality `|R(u)|` is the weighted count `Σ_j w_uj`, which equals the
//! number of ratings a user would have if every weight were materialised as
//! duplicate records.
//!
//! Training sweeps users in a seeded shuffled order. Per user, `p_u` is built
//! once; each rating then updates `b_u`, `b_i`, `q_i` and accumulates
//! `sum_error = Σ w_ui e_ui q_i`; finally every `x_j`, `y_j` of the user is
//! updated from `sum_error`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{RatingScale, RatingsDataset, WeightVector};
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnmHyperParams {
    pub factors: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    /// Normalisation exponent on `|R(u)|` and `|N(u)|`.
    pub alpha: f64,
    pub init_range: f64,
    pub seed: u64,
}

impl FnmHyperParams {
    /// λ = 0.04, η = 0.002, α = 1/2, 20 epochs, init on [−0.01, 0.01].
    pub fn new(factors: usize) -> Self {
        FnmHyperParams {
            factors,
            learning_rate: 0.002,
            regularization: 0.04,
            epochs: 20,
            alpha: 0.5,
            init_range: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::invalid("FNM needs at least one factor"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::invalid("regularization must be non-negative"));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::invalid("init range must be positive"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite"));
        }
        Ok(())
    }
}

/// Baseline estimators: global mean and sequential user/item offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    pub global: f64,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

impl Baselines {
    pub fn baseline(&self, user: usize, item: usize) -> f64 {
        self.global + self.users[user] + self.items[item]
    }
}

/// `μ` = weighted mean; `b_i` = weighted mean of `r − μ` over the item's
/// raters; `b_u` = weighted mean of `r − μ − b_i` over the user's items.
/// Groups with zero total weight get 0. If every weight is zero the
/// baselines are computed unweighted.
pub fn init_baselines(train: &RatingsDataset, weights: &WeightVector) -> Result<Baselines> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check_len(train.len())?;
    let w = weights.training_weights();
    let all_zero = w.iter().all(|&x| x == 0.0);
    let wt = |j: usize| if all_zero { 1.0 } else { w[j] };

    let ratings = train.ratings();
    let (mut num, mut den) = (0.0, 0.0);
    for (j, r) in ratings.iter().enumerate() {
        num += wt(j) * r.value;
        den += wt(j);
    }
    let global = num / den;

    let group_mean = |n: usize, key: &dyn Fn(usize) -> usize, resid: &dyn Fn(usize) -> f64| {
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        for j in 0..ratings.len() {
            num[key(j)] += wt(j) * resid(j);
            den[key(j)] += wt(j);
        }
        num.iter()
            .zip(&den)
            .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let items = group_mean(
        train.num_items(),
        &|j| ratings[j].item as usize,
        &|j| ratings[j].value - global,
    );
    let users = group_mean(
        train.num_users(),
        &|j| ratings[j].user as usize,
        &|j| ratings[j].value - global - items[ratings[j].item as usize],
    );
    Ok(Baselines { global, users, items })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FnmEntry {
    pub(crate) item: u32,
    pub(crate) value: f64,
    pub(crate) weight: f64,
    /// `r_uj − b_uj` against the static baseline.
    pub(crate) residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnmModel {
    pub(crate) hyper: FnmHyperParams,
    pub(crate) num_users: usize,
    pub(crate) num_items: usize,
    pub(crate) baselines: Baselines,
    pub(crate) user_bias: Vec<f64>,
    pub(crate) item_bias: Vec<f64>,
    /// items x factors, row-major.
    pub(crate) q: Vec<f64>,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    /// Per-user rated items with positive weight, CSR by user.
    pub(crate) offsets: Vec<usize>,
    pub(crate) entries: Vec<FnmEntry>,
    /// Weighted `|R(u)|`.
    pub(crate) user_weight: Vec<f64>,
    pub(crate) known_items: Vec<bool>,
    pub(crate) scale: RatingScale,
    /// Cached `p_u` per user (users x factors), refreshed after training.
    pub(crate) user_vectors: Vec<f64>,
}

impl FnmModel {
    /// Baselines plus uniformly initialised `q`, `x`, `y` (drawn in that order).
    pub fn initialized(train: &RatingsDataset, weights: &WeightVector, hyper: FnmHyperParams) -> Result<Self> {
        hyper.validate()?;
        let baselines = init_baselines(train, weights)?;
        let w = weights.training_weights();
        let f = hyper.factors;
        let (m, n) = (train.num_users(), train.num_items());

        let mut rows: Vec<Vec<FnmEntry>> = vec![Vec::new(); m];
        let mut user_weight = vec![0.0; m];
        let mut known_items = vec![false; n];
        for (r, &wt) in train.ratings().iter().zip(w.iter()) {
            if wt > 0.0 {
                let (u, i) = (r.user as usize, r.item as usize);
                rows[u].push(FnmEntry {
                    item: r.item,
                    value: r.value,
                    weight: wt,
                    residual: r.value - baselines.baseline(u, i),
                });
                known_items[i] = true;
            }
        }
        let mut offsets = Vec::with_capacity(m + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for (u, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|e| e.item);
            user_weight[u] = row.iter().map(|e| e.weight).sum();
            entries.extend(row);
            offsets.push(entries.len());
        }

        let mut rng = seeded(hyper.seed);
        let r = hyper.init_range;
        let mut draw = || -> Vec<f64> { (0..n * f).map(|_| rng.gen_range(-r..=r)).collect() };
        let q = draw();
        let x = draw();
        let y = draw();

        let mut model = FnmModel {
            hyper,
            num_users: m,
            num_items: n,
            user_bias: baselines.users.clone(),
            item_bias: baselines.items.clone(),
            baselines,
            q,
            x,
            y,
            offsets,
            entries,
            user_weight,
            known_items,
            scale: train.scale(),
            user_vectors: Vec::new(),
        };
        model.refresh_user_vectors();
        Ok(model)
    }

    pub fn hyper(&self) -> &FnmHyperParams {
        &self.hyper
    }

    pub fn baselines(&self) -> &Baselines {
        &self.baselines
    }

    pub fn user_bias(&self) -> &[f64] {
        &self.user_bias
    }

    pub fn item_bias(&self) -> &[f64] {
        &self.item_bias
    }

    /// Trainable user and item biases. `p_u` does not depend on them, so the
    /// cached user vectors stay valid after edits.
    pub fn biases_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.user_bias, &mut self.item_bias)
    }

    fn row(&self, user: usize) -> &[FnmEntry] {
        &self.entries[self.offsets[user]..self.offsets[user + 1]]
    }

    fn factor_row(data: &[f64], f: usize, i: usize) -> &[f64] {
        &data[i * f..(i + 1) * f]
    }

    pub fn item_factors(&self, item: usize) -> &[f64] {
        Self::factor_row(&self.q, self.hyper.factors, item)
    }

    pub fn item_factors_mut(&mut self, item: usize) -> &mut [f64] {
        let f = self.hyper.factors;
        &mut self.q[item * f..(item + 1) * f]
    }

    pub fn explicit_factors_mut(&mut self, item: usize) -> &mut [f64] {
        let f = self.hyper.factors;
        &mut self.x[item * f..(item + 1) * f]
    }

    pub fn implicit_factors_mut(&mut self, item: usize) -> &mut [f64] {
        let f = self.hyper.factors;
        &mut self.y[item * f..(item + 1) * f]
    }

    /// All trainable parameters, flattened (biases, then q, x, y).
    pub fn parameters(&self) -> Vec<f64> {
        let mut all = Vec::with_capacity(
            self.user_bias.len() + self.item_bias.len() + 3 * self.q.len(),
        );
        all.extend(&self.user_bias);
        all.extend(&self.item_bias);
        all.extend(&self.q);
        all.extend(&self.x);
        all.extend(&self.y);
        all
    }

    /// The bracketed user factor `p_u`; zero for a user without weighted ratings.
    pub fn user_component(&self, user: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.hyper.factors];
        self.user_component_into(user, &mut p);
        p
    }

    fn user_component_into(&self, user: usize, p: &mut [f64]) {
        p.iter_mut().for_each(|v| *v = 0.0);
        if user >= self.num_users || self.user_weight[user] <= 0.0 {
            return;
        }
        let f = self.hyper.factors;
        let norm = self.user_weight[user].powf(-self.hyper.alpha);
        for e in self.row(user) {
            let j = e.item as usize;
            let xs = Self::factor_row(&self.x, f, j);
            let ys = Self::factor_row(&self.y, f, j);
            let cx = norm * e.weight * e.residual;
            let cy = norm * e.weight;
            for k in 0..f {
                p[k] += cx * xs[k] + cy * ys[k];
            }
        }
    }

    /// Recomputes the cached `p_u` used by [`FnmModel::score`].
    pub fn refresh_user_vectors(&mut self) {
        let f = self.hyper.factors;
        let mut cache = vec![0.0; self.num_users * f];
        for (u, p) in cache.chunks_exact_mut(f).enumerate() {
            self.user_component_into(u, p);
        }
        self.user_vectors = cache;
    }

    fn user_known(&self, user: usize) -> bool {
        user < self.num_users && self.user_weight[user] > 0.0
    }

    fn item_known(&self, item: usize) -> bool {
        self.known_items.get(item).copied().unwrap_or(false)
    }

    /// Full prediction from current parameters (recomputes `p_u`). Unclamped.
    pub fn score_fresh(&self, user: usize, item: usize) -> f64 {
        match (self.user_known(user), self.item_known(item)) {
            (true, true) => {
                let p = self.user_component(user);
                self.baselines.global
                    + self.user_bias[user]
                    + self.item_bias[item]
                    + dot(self.item_factors(item), &p)
            }
            _ => self.fallback(user, item),
        }
    }

    /// Prediction from the cached user vectors. Unclamped.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        match (self.user_known(user), self.item_known(item)) {
            (true, true) => {
                let f = self.hyper.factors;
                self.baselines.global
                    + self.user_bias[user]
                    + self.item_bias[item]
                    + dot(self.item_factors(item), Self::factor_row(&self.user_vectors, f, user))
            }
            _ => self.fallback(user, item),
        }
    }

    fn fallback(&self, user: usize, item: usize) -> f64 {
        let mut v = self.baselines.global;
        if self.user_known(user) {
            v += self.user_bias[user];
        }
        if self.item_known(item) {
            v += self.item_bias[item];
        }
        v
    }

    /// One user-major SGD sweep in a shuffled user order.
    pub fn sgd_epoch(&mut self, epoch_seed: u64) -> Result<()> {
        let f = self.hyper.factors;
        let eta = self.hyper.learning_rate;
        let lambda = self.hyper.regularization;
        let mu = self.baselines.global;
        let mut order: Vec<usize> = (0..self.num_users).collect();
        order.shuffle(&mut seeded(epoch_seed));

        let mut p = vec![0.0; f];
        let mut sum_error = vec![0.0; f];
        for &u in &order {
            if self.user_weight[u] <= 0.0 {
                continue;
            }
            self.user_component_into(u, &mut p);
            let norm = self.user_weight[u].powf(-self.hyper.alpha);
            sum_error.iter_mut().for_each(|v| *v = 0.0);
            let (start, end) = (self.offsets[u], self.offsets[u + 1]);
            for idx in start..end {
                let e = self.entries[idx];
                let i = e.item as usize;
                let q = &mut self.q[i * f..(i + 1) * f];
                let err = e.value - (mu + self.user_bias[u] + self.item_bias[i] + dot(q, &p));
                if !err.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite error at user {u}, item {i}"
                    )));
                }
                let step = eta * e.weight;
                let we = e.weight * err;
                for k in 0..f {
                    sum_error[k] += we * q[k];
                }
                let bu = self.user_bias[u];
                self.user_bias[u] = bu + step * (err - lambda * bu);
                let bi = self.item_bias[i];
                self.item_bias[i] = bi + step * (err - lambda * bi);
                for k in 0..f {
                    let qk = q[k];
                    q[k] = qk + step * (err * p[k] - lambda * qk);
                }
            }
            for idx in start..end {
                let e = self.entries[idx];
                let j = e.item as usize;
                let step = eta * e.weight;
                let cx = norm * e.residual;
                let xs = &mut self.x[j * f..(j + 1) * f];
                for k in 0..f {
                    let xk = xs[k];
                    xs[k] = xk + step * (cx * sum_error[k] - lambda * xk);
                }
                let ys = &mut self.y[j * f..(j + 1) * f];
                for k in 0..f {
                    let yk = ys[k];
                    ys[k] = yk + step * (norm * sum_error[k] - lambda * yk);
                }
            }
        }
        if let Some(bad) = self.parameters().iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite parameter at flat index {bad}")));
        }
        self.refresh_user_vectors();
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Predictor for FnmModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.scale.clamp(self.score(user, item))
    }
}

/// Baselines, initialisation, then `hyper.epochs` sweeps; epoch `e` shuffles
/// users with a seed derived from `(hyper.seed, e)`.
pub fn fit_fnm(train: &RatingsDataset, weights: &WeightVector, hyper: FnmHyperParams) -> Result<FnmModel> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check_len(train.len())?;
    let mut model = FnmModel::initialized(train, weights, hyper)?;
    for epoch in 0..hyper.epochs {
        model.sgd_epoch(derive_seed(hyper.seed, epoch as u64))?;
    }
    Ok(model)
}

/// The weighted regularised objective
/// `Σ w_ui ((r_ui − r̂_ui)² + λ(b_u² + b_i² + |q_i|² + Σ_{R(u)} |x_j|² + Σ_{N(u)} |y_j|²))`
/// evaluated from the model's current parameters.
pub fn fnm_objective(model: &FnmModel, ds: &RatingsDataset, weights: &WeightVector) -> Result<f64> {
    weights.check_len(ds.len())?;
    let w = weights.training_weights();
    let f = model.hyper.factors;
    let lambda = model.hyper.regularization;
    let mu = model.baselines.global;
    let reg_xy: Vec<f64> = (0..model.num_users)
        .map(|u| {
            model
                .row(u)
                .iter()
                .map(|e| {
                    let j = e.item as usize;
                    let x = FnmModel::factor_row(&model.x, f, j);
                    let y = FnmModel::factor_row(&model.y, f, j);
                    dot(x, x) + dot(y, y)
                })
                .sum()
        })
        .collect();
    let mut total = 0.0;
    for (r, &wt) in ds.ratings().iter().zip(w.iter()) {
        let (u, i) = (r.user as usize, r.item as usize);
        let p = model.user_component(u);
        let q = model.item_factors(i);
        let (bu, bi) = (model.user_bias[u], model.item_bias[i]);
        let e = r.value - mu - bu - bi - dot(q, &p);
        total += wt * (e * e + lambda * (bu * bu + bi * bi + dot(q, q) + reg_xy[u]));
    }
    Ok(total)
}
