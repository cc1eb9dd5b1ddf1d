//! The uniform fit/predict contract shared by every base learner and ensemble.

use rayon::prelude::*;

use crate::dataset::{RatingsDataset, WeightVector};
use crate::error::{Error, Result};

/// A trained rating predictor.
pub trait Predictor: Send + Sync {
    /// Predicted rating of `item` by `user`, clamped to the rating scale.
    /// Total: unseen users and items get a fallback value.
    fn predict(&self, user: usize, item: usize) -> f64;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, user: usize, item: usize) -> f64 {
        (**self).predict(user, item)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, user: usize, item: usize) -> f64 {
        (**self).predict(user, item)
    }
}

/// A weight-aware base learning algorithm.
pub trait Learner: Sync {
    type Model: Predictor;

    /// Fits one model on `train` under per-rating `weights`. `seed` drives all
    /// of the algorithm's internal randomness.
    fn fit(&self, train: &RatingsDataset, weights: &WeightVector, seed: u64) -> Result<Self::Model>;

    /// The seed used when this learner is fitted on its own; ensemble member
    /// `t` is fitted with `base_seed() + t`.
    fn base_seed(&self) -> u64 {
        0
    }

    /// Fits one model per seed with randomised internal choices. The default
    /// simply refits; learners with cheaper randomisation override it.
    fn fit_randomized(
        &self,
        train: &RatingsDataset,
        weights: &WeightVector,
        seeds: &[u64],
    ) -> Result<Vec<Self::Model>>
    where
        Self::Model: Send,
    {
        seeds
            .par_iter()
            .enumerate()
            .map(|(index, &seed)| {
                self.fit(train, weights, seed).map_err(|e| Error::Member {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}
