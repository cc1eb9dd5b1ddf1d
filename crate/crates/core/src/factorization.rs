//! Weight-aware SGD matrix factorization in three variants.
//!
//! The model approximates `r(u, i) ≈ p_u · q_i` and minimises the weighted
//! sum of per-rating terms
//!
//! ```text
//! w_ui · (e_ui² + λ·|p_u|² + λ·|q_i|²) / 2,    e_ui = r_ui − p_u · q_i
//! ```
//!
//! with per-rating steps `p += η·w·(e·q − λ·p)` and `q += η·w·(e·p − λ·q)`,
//! all coordinates updated simultaneously from the pre-update values.
//!
//! * [`MfVariant::Ismf`] has no regularisation (λ forced to 0).
//! * [`MfVariant::Rismf`] is regularised.
//! * [`MfVariant::Brismf`] is regularised, with user factor 0 and item factor 1
//!   pinned to 1 so that `q_i[0]` acts as an item bias and `p_u[1]` as a user
//!   bias.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{weighted_means, RatingScale, RatingsDataset, WeightVector};
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MfVariant {
    Ismf,
    Rismf,
    Brismf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfHyperParams {
    pub variant: MfVariant,
    pub factors: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    /// Half-width of the uniform initialisation interval.
    pub init_range: f64,
    pub seed: u64,
}

impl MfHyperParams {
    pub const DEFAULT_EPOCHS: usize = 30;

    /// η = 0.01, λ = 0.01, init on [−0.01, 0.01], 30 epochs.
    pub fn new(variant: MfVariant, factors: usize) -> Self {
        MfHyperParams {
            variant,
            factors,
            learning_rate: 0.01,
            regularization: 0.01,
            epochs: Self::DEFAULT_EPOCHS,
            init_range: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_factors = if self.variant == MfVariant::Brismf { 2 } else { 1 };
        if self.factors < min_factors {
            return Err(Error::invalid(format!(
                "{:?} needs at least {min_factors} factor(s), got {}",
                self.variant, self.factors
            )));
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
        Ok(())
    }

    /// The regularisation actually applied (zero for ISMF).
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            MfVariant::Ismf => 0.0,
            _ => self.regularization,
        }
    }
}

/// Factor matrices: `P` is users x factors, `Q` is items x factors, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub(crate) hyper: MfHyperParams,
    pub(crate) num_users: usize,
    pub(crate) num_items: usize,
    pub(crate) user_factors: Vec<f64>,
    pub(crate) item_factors: Vec<f64>,
    /// Whether each user / item carried positive training weight.
    pub(crate) known_users: Vec<bool>,
    pub(crate) known_items: Vec<bool>,
    pub(crate) global_mean: f64,
    pub(crate) scale: RatingScale,
    /// Weighted SSE after each epoch.
    pub(crate) train_log: Vec<f64>,
}

/// Uniform `[−init_range, init_range]` factors, users first, then items.
/// For BRISMF the pinned coordinates are overwritten with 1 after sampling.
pub fn init_factors(num_users: usize, num_items: usize, hyper: &MfHyperParams) -> (Vec<f64>, Vec<f64>) {
    let f = hyper.factors;
    let mut rng = seeded(hyper.seed);
    let r = hyper.init_range;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-r..=r)).collect() };
    let mut p = draw(num_users * f);
    let mut q = draw(num_items * f);
    if hyper.variant == MfVariant::Brismf {
        for row in p.chunks_exact_mut(f) {
            row[0] = 1.0;
        }
        for row in q.chunks_exact_mut(f) {
            row[1] = 1.0;
        }
    }
    (p, q)
}

impl MfModel {
    /// A freshly initialised (untrained) model for `train`'s index space.
    pub fn initialized(train: &RatingsDataset, weights: &WeightVector, hyper: MfHyperParams) -> Result<Self> {
        hyper.validate()?;
        weights.check_len(train.len())?;
        let (user_factors, item_factors) = init_factors(train.num_users(), train.num_items(), &hyper);
        let mut known_users = vec![false; train.num_users()];
        let mut known_items = vec![false; train.num_items()];
        for (r, &w) in train.ratings().iter().zip(weights.as_slice()) {
            if w > 0.0 {
                known_users[r.user as usize] = true;
                known_items[r.item as usize] = true;
            }
        }
        Ok(MfModel {
            hyper,
            num_users: train.num_users(),
            num_items: train.num_items(),
            user_factors,
            item_factors,
            known_users,
            known_items,
            global_mean: weighted_means(train, weights)?.global,
            scale: train.scale(),
            train_log: Vec::new(),
        })
    }

    pub fn hyper(&self) -> &MfHyperParams {
        &self.hyper
    }

    pub fn factors(&self) -> usize {
        self.hyper.factors
    }

    pub fn user_factors(&self, user: usize) -> &[f64] {
        let f = self.hyper.factors;
        &self.user_factors[user * f..(user + 1) * f]
    }

    pub fn item_factors(&self, item: usize) -> &[f64] {
        let f = self.hyper.factors;
        &self.item_factors[item * f..(item + 1) * f]
    }

    pub fn user_factors_mut(&mut self, user: usize) -> &mut [f64] {
        let f = self.hyper.factors;
        &mut self.user_factors[user * f..(user + 1) * f]
    }

    pub fn item_factors_mut(&mut self, item: usize) -> &mut [f64] {
        let f = self.hyper.factors;
        &mut self.item_factors[item * f..(item + 1) * f]
    }

    pub fn train_log(&self) -> &[f64] {
        &self.train_log
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    /// `p_u · q_i`, or the training mean for unseen users/items. Unclamped.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        let seen = self.known_users.get(user).copied().unwrap_or(false)
            && self.known_items.get(item).copied().unwrap_or(false);
        if !seen {
            return self.global_mean;
        }
        dot(self.user_factors(user), self.item_factors(item))
    }

    fn pinned(&self) -> (Option<usize>, Option<usize>) {
        match self.hyper.variant {
            MfVariant::Brismf => (Some(0), Some(1)),
            _ => (None, None),
        }
    }
}

impl Predictor for MfModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.scale.clamp(self.score(user, item))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The weighted objective `Σ w_ui (e_ui² + λ|p_u|² + λ|q_i|²) / 2`, with
/// `e_ui` taken from the raw factor product.
pub fn weighted_sse(model: &MfModel, ds: &RatingsDataset, weights: &WeightVector) -> Result<f64> {
    weights.check_len(ds.len())?;
    let w = weights.training_weights();
    let lambda = model.hyper.effective_lambda();
    let mut total = 0.0;
    for (r, &wt) in ds.ratings().iter().zip(w.iter()) {
        let p = model.user_factors(r.user as usize);
        let q = model.item_factors(r.item as usize);
        let e = r.value - dot(p, q);
        total += wt * (e * e + lambda * dot(p, p) + lambda * dot(q, q)) / 2.0;
    }
    Ok(total)
}

/// One pass over the ratings in a seeded shuffled order. Ratings with zero
/// weight are skipped.
pub fn sgd_epoch(
    model: &mut MfModel,
    train: &RatingsDataset,
    weights: &WeightVector,
    epoch_seed: u64,
) -> Result<()> {
    weights.check_len(train.len())?;
    let w = weights.training_weights();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seeded(epoch_seed));

    let f = model.hyper.factors;
    let eta = model.hyper.learning_rate;
    let lambda = model.hyper.effective_lambda();
    let (pin_p, pin_q) = model.pinned();
    let ratings = train.ratings();
    for &j in &order {
        let wt = w[j];
        if wt == 0.0 {
            continue;
        }
        let r = ratings[j];
        let (u, i) = (r.user as usize, r.item as usize);
        let p = &mut model.user_factors[u * f..(u + 1) * f];
        let q = &mut model.item_factors[i * f..(i + 1) * f];
        let e = r.value - dot(p, q);
        if !e.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite error at user {u}, item {i} (rating index {j})"
            )));
        }
        let step = eta * wt;
        for k in 0..f {
            let (pk, qk) = (p[k], q[k]);
            if pin_p != Some(k) {
                p[k] = pk + step * (e * qk - lambda * pk);
            }
            if pin_q != Some(k) {
                q[k] = qk + step * (e * pk - lambda * qk);
            }
        }
    }
    if let Some(bad) = model
        .user_factors
        .iter()
        .chain(&model.item_factors)
        .position(|x| !x.is_finite())
    {
        return Err(Error::Divergence(format!("non-finite factor at flat index {bad}")));
    }
    Ok(())
}

/// Initialises factors and runs `hyper.epochs` SGD passes. Epoch `e` shuffles
/// with a seed derived from `(hyper.seed, e)`.
pub fn fit_mf(train: &RatingsDataset, weights: &WeightVector, hyper: MfHyperParams) -> Result<MfModel> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = MfModel::initialized(train, weights, hyper)?;
    for epoch in 0..hyper.epochs {
        sgd_epoch(&mut model, train, weights, derive_seed(hyper.seed, epoch as u64))?;
        model.train_log.push(weighted_sse(&model, train, weights)?);
    }
    Ok(model)
}
