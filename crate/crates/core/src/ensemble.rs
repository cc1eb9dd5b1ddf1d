//! Homogeneous ensembles: bagging, AdaBoost.RT, fusion and randomness
//! injection over any [`Learner`].
//!
//! Every ensemble predicts a weighted mean of its members' clamped
//! predictions. Member `t` of bagging and randomness injection is fitted with
//! seed `base + t`, so a single-member ensemble reproduces its base model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bootstrap_weights, RatingScale, RatingsDataset, WeightVector};
use crate::error::{Error, Result};
use crate::factorization::{fit_mf, MfHyperParams, MfModel, MfVariant};
use crate::fnm::{fit_fnm, FnmHyperParams, FnmModel};
use crate::knn::{fit_knn, KnnConfig, KnnModel, Metric, Perspective};
use crate::model::{Learner, Predictor};
use crate::rng::derive_seed;

/// Lower and upper clamp on a boosting round's error rate.
pub const EPSILON_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    KnnUser,
    KnnItem,
    Ismf,
    Rismf,
    Brismf,
    Fnm,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::KnnUser,
        Family::KnnItem,
        Family::Ismf,
        Family::Rismf,
        Family::Brismf,
        Family::Fnm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::KnnUser => "knn_user",
            Family::KnnItem => "knn_item",
            Family::Ismf => "ismf",
            Family::Rismf => "rismf",
            Family::Brismf => "brismf",
            Family::Fnm => "fnm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerParams {
    Knn(KnnConfig),
    Mf(MfHyperParams),
    Fnm(FnmHyperParams),
}

/// A base learner: one family with its parameters and default seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerSpec {
    pub params: LearnerParams,
    pub seed: u64,
}

impl BaseLearnerSpec {
    pub fn knn(config: KnnConfig) -> Self {
        BaseLearnerSpec { params: LearnerParams::Knn(config), seed: 0 }
    }

    pub fn mf(hyper: MfHyperParams) -> Self {
        BaseLearnerSpec { params: LearnerParams::Mf(hyper), seed: hyper.seed }
    }

    pub fn fnm(hyper: FnmHyperParams) -> Self {
        BaseLearnerSpec { params: LearnerParams::Fnm(hyper), seed: hyper.seed }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn family(&self) -> Family {
        match &self.params {
            LearnerParams::Knn(c) => match c.perspective {
                Perspective::UserUser => Family::KnnUser,
                Perspective::ItemItem => Family::KnnItem,
            },
            LearnerParams::Mf(h) => match h.variant {
                MfVariant::Ismf => Family::Ismf,
                MfVariant::Rismf => Family::Rismf,
                MfVariant::Brismf => Family::Brismf,
            },
            LearnerParams::Fnm(_) => Family::Fnm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.params {
            LearnerParams::Knn(c) => c.validate(),
            LearnerParams::Mf(h) => h.validate(),
            LearnerParams::Fnm(h) => h.validate(),
        }
    }
}

/// A trained base model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorModel {
    Knn(KnnModel),
    Mf(MfModel),
    Fnm(FnmModel),
}

impl Predictor for PredictorModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        match self {
            PredictorModel::Knn(m) => m.predict(user, item),
            PredictorModel::Mf(m) => m.predict(user, item),
            PredictorModel::Fnm(m) => m.predict(user, item),
        }
    }
}

impl Learner for BaseLearnerSpec {
    type Model = PredictorModel;

    fn fit(&self, train: &RatingsDataset, weights: &WeightVector, seed: u64) -> Result<PredictorModel> {
        match self.params {
            LearnerParams::Knn(c) => {
                let model = fit_knn(train, weights, c)?;
                Ok(PredictorModel::Knn(model.with_selection(c.neighbor_pool_factor, seed)?))
            }
            LearnerParams::Mf(h) => fit_mf(train, weights, MfHyperParams { seed, ..h }).map(PredictorModel::Mf),
            LearnerParams::Fnm(h) => fit_fnm(train, weights, FnmHyperParams { seed, ..h }).map(PredictorModel::Fnm),
        }
    }

    fn base_seed(&self) -> u64 {
        self.seed
    }

    /// k-NN fits one similarity table and derives every member from it with
    /// a doubled neighbour pool; the factor models refit per seed.
    fn fit_randomized(
        &self,
        train: &RatingsDataset,
        weights: &WeightVector,
        seeds: &[u64],
    ) -> Result<Vec<PredictorModel>> {
        match self.params {
            LearnerParams::Knn(c) => {
                let shared = fit_knn(train, weights, c)?;
                seeds
                    .iter()
                    .map(|&s| shared.with_selection(2, s).map(PredictorModel::Knn))
                    .collect()
            }
            _ => seeds
                .par_iter()
                .enumerate()
                .map(|(index, &seed)| {
                    self.fit(train, weights, seed)
                        .map_err(|e| Error::Member { index, source: Box::new(e) })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    Bagging,
    AdaboostRt,
    Fusion,
    RandomInjection,
}

impl EnsembleMethod {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMethod::Bagging => "bagging",
            EnsembleMethod::AdaboostRt => "adaboost_rt",
            EnsembleMethod::Fusion => "fusion",
            EnsembleMethod::RandomInjection => "random_injection",
        }
    }
}

/// Build metadata of one member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub seed: u64,
    /// Boosting error rate after clamping.
    pub epsilon: Option<f64>,
    pub beta: Option<f64>,
    /// Whether the raw error rate fell outside [`EPSILON_CLAMP`].
    pub clamped: bool,
}

impl MemberRecord {
    fn seeded(seed: u64) -> Self {
        MemberRecord { seed, epsilon: None, beta: None, clamped: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<M = PredictorModel> {
    pub(crate) members: Vec<M>,
    pub(crate) member_weights: Vec<f64>,
    pub(crate) method: EnsembleMethod,
    pub(crate) build_log: Vec<MemberRecord>,
    pub(crate) scale: RatingScale,
}

impl<M: Predictor> EnsembleModel<M> {
    /// Assembles an ensemble from trained parts.
    pub fn from_parts(
        members: Vec<M>,
        member_weights: Vec<f64>,
        method: EnsembleMethod,
        build_log: Vec<MemberRecord>,
        scale: RatingScale,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if member_weights.len() != members.len() || build_log.len() != members.len() {
            return Err(Error::invalid("member, weight and log counts differ"));
        }
        if member_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("member weights must be finite and non-negative"));
        }
        if member_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("member weights sum to zero"));
        }
        Ok(EnsembleModel { members, member_weights, method, build_log, scale })
    }

    fn uniform(members: Vec<M>, method: EnsembleMethod, build_log: Vec<MemberRecord>, scale: RatingScale) -> Result<Self> {
        let k = members.len();
        Self::from_parts(members, vec![1.0; k], method, build_log, scale)
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn member_weights(&self) -> &[f64] {
        &self.member_weights
    }

    pub fn method(&self) -> EnsembleMethod {
        self.method
    }

    pub fn build_log(&self) -> &[MemberRecord] {
        &self.build_log
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The ensemble restricted to its first `k` members.
    pub fn prefix(&self, k: usize) -> Result<Prefix<'_, M>> {
        if k == 0 || k > self.members.len() {
            return Err(Error::invalid(format!(
                "prefix size {k} outside 1..={}",
                self.members.len()
            )));
        }
        if self.member_weights[..k].iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("prefix member weights sum to zero"));
        }
        Ok(Prefix { ensemble: self, k })
    }

    fn combine(&self, k: usize, user: usize, item: usize) -> f64 {
        if k == 1 {
            return self.members[0].predict(user, item);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (m, &w) in self.members[..k].iter().zip(&self.member_weights[..k]) {
            if w > 0.0 {
                num += w * m.predict(user, item);
                den += w;
            }
        }
        self.scale.clamp(num / den)
    }
}

impl<M: Predictor> Predictor for EnsembleModel<M> {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.combine(self.members.len(), user, item)
    }
}

/// View of an ensemble's first members, used for ensemble-size series.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a, M> {
    ensemble: &'a EnsembleModel<M>,
    k: usize,
}

impl<M: Predictor> Predictor for Prefix<'_, M> {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.ensemble.combine(self.k, user, item)
    }
}

/// Weighted combination of the members' clamped predictions, clamped.
pub fn ensemble_predict<M: Predictor>(ens: &EnsembleModel<M>, user: usize, item: usize) -> f64 {
    ens.predict(user, item)
}

fn check_size(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    Ok(())
}

fn member_err(index: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Member { index, source: Box::new(e) }
}

/// Bagging: member `t` is fitted under `w_base ⊙ bootstrap(t)`, where the
/// bootstrap draw uses a seed derived from `(seed, t)`.
pub fn bag<L>(learner: &L, train: &RatingsDataset, w_base: &WeightVector, k: usize, seed: u64) -> Result<EnsembleModel<L::Model>>
where
    L: Learner,
    L::Model: Send,
{
    check_size(k)?;
    let samples = (0..k)
        .map(|t| bootstrap_weights(train, derive_seed(seed, t as u64)))
        .collect::<Result<Vec<_>>>()?;
    bag_with_samples(learner, train, w_base, &samples)
}

/// Bagging over explicitly given resampling weights, one member per sample.
pub fn bag_with_samples<L>(
    learner: &L,
    train: &RatingsDataset,
    w_base: &WeightVector,
    samples: &[WeightVector],
) -> Result<EnsembleModel<L::Model>>
where
    L: Learner,
    L::Model: Send,
{
    check_size(samples.len())?;
    w_base.check_len(train.len())?;
    let base = learner.base_seed();
    let members = samples
        .par_iter()
        .enumerate()
        .map(|(t, sample)| {
            let weights = w_base.hadamard(sample).map_err(member_err(t))?;
            learner
                .fit(train, &weights, base.wrapping_add(t as u64))
                .map_err(member_err(t))
        })
        .collect::<Result<Vec<_>>>()?;
    let log = (0..samples.len())
        .map(|t| MemberRecord::seeded(base.wrapping_add(t as u64)))
        .collect();
    EnsembleModel::uniform(members, EnsembleMethod::Bagging, log, train.scale())
}

/// Weighted mean absolute deviation of the ratings from their weighted
/// global mean; 0.5 when that deviation is zero.
pub fn default_delta(train: &RatingsDataset, weights: &WeightVector) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.check_len(train.len())?;
    let w = weights.training_weights();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights("weights sum to zero".into()));
    }
    let ratings = train.ratings();
    let mean = ratings.iter().zip(w.iter()).map(|(r, w)| w * r.value).sum::<f64>() / total;
    let dev = ratings
        .iter()
        .zip(w.iter())
        .map(|(r, w)| w * (r.value - mean).abs())
        .sum::<f64>()
        / total;
    Ok(if dev > 0.0 { dev } else { 0.5 })
}

/// Per-round intermediate state of an AdaBoost.RT build.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaBoostTrace {
    /// `D_t` for every round, each summing to 1.
    pub distributions: Vec<Vec<f64>>,
    /// Absolute training errors of each round's member.
    pub errors: Vec<Vec<f64>>,
    /// The threshold that was used.
    pub delta: f64,
}

/// How AdaBoost.RT picks its error threshold δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    Fixed(f64),
    /// [`default_delta`] of the training data.
    Deviation,
    /// Mean absolute training error of the first member, which is the base
    /// model fitted on the unweighted data; 0.5 if that error is zero.
    BaseError,
}

impl From<f64> for Delta {
    fn from(value: f64) -> Self {
        Delta::Fixed(value)
    }
}

/// AdaBoost.RT with absolute error and threshold `delta`.
pub fn adaboost_rt<L: Learner>(
    learner: &L,
    train: &RatingsDataset,
    k: usize,
    delta: impl Into<Delta>,
    power: u32,
) -> Result<EnsembleModel<L::Model>> {
    adaboost_rt_traced(learner, train, k, delta, power).map(|(m, _)| m)
}

/// [`adaboost_rt`] that also returns the distribution and error of every round.
pub fn adaboost_rt_traced<L: Learner>(
    learner: &L,
    train: &RatingsDataset,
    k: usize,
    delta: impl Into<Delta>,
    power: u32,
) -> Result<(EnsembleModel<L::Model>, AdaBoostTrace)> {
    check_size(k)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let range = train.scale().range();
    let check = |d: f64| {
        if d > 0.0 && d < range {
            Ok(d)
        } else {
            Err(Error::invalid(format!("delta {d} outside (0, {range})")))
        }
    };
    let mut delta = match delta.into() {
        Delta::Fixed(d) => Some(check(d)?),
        Delta::Deviation => Some(check(default_delta(train, &WeightVector::ones(train.len()))?)?),
        Delta::BaseError => None,
    };
    if power == 0 {
        return Err(Error::invalid("boosting power must be at least 1"));
    }
    let n = train.len();
    let base = learner.base_seed();
    // D_t scaled by n, so the learner sees mean-one weights.
    let mut rel = vec![1.0; n];
    let mut members = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let mut log = Vec::with_capacity(k);
    let mut trace = AdaBoostTrace { delta: delta.unwrap_or(0.0), ..Default::default() };
    for t in 0..k {
        let total: f64 = rel.iter().sum();
        trace.distributions.push(rel.iter().map(|w| w / total).collect());
        let seed = base.wrapping_add(t as u64);
        let member = learner
            .fit(train, &WeightVector::relative(rel.clone())?, seed)
            .map_err(member_err(t))?;
        let errors: Vec<f64> = train
            .ratings()
            .iter()
            .map(|r| (member.predict(r.user as usize, r.item as usize) - r.value).abs())
            .collect();
        let delta = match delta {
            Some(d) => d,
            None => {
                let mae = errors.iter().sum::<f64>() / n as f64;
                let d = check(if mae > 0.0 { mae } else { 0.5 })?;
                trace.delta = d;
                delta = Some(d);
                d
            }
        };
        let raw: f64 = errors
            .iter()
            .zip(&rel)
            .filter(|(e, _)| **e > delta)
            .map(|(_, w)| w / total)
            .sum();
        let epsilon = raw.clamp(EPSILON_CLAMP.0, EPSILON_CLAMP.1);
        let clamped = epsilon != raw;
        if clamped {
            log::warn!("boosting round {t}: error rate {raw} clamped to {epsilon}");
        }
        let beta = epsilon.powi(power as i32).clamp(EPSILON_CLAMP.0, EPSILON_CLAMP.1);
        for (w, e) in rel.iter_mut().zip(&errors) {
            if *e <= delta {
                *w *= beta;
            }
        }
        let z: f64 = rel.iter().sum();
        rel.iter_mut().for_each(|w| *w *= n as f64 / z);

        members.push(member);
        weights.push((1.0 / beta).ln());
        log.push(MemberRecord { seed, epsilon: Some(epsilon), beta: Some(beta), clamped });
        trace.errors.push(errors);
    }
    if log.iter().all(|r| r.clamped) {
        log::warn!("every boosting round was clamped; member weights are near-uniform");
    }
    let model = EnsembleModel::from_parts(members, weights, EnsembleMethod::AdaboostRt, log, train.scale())?;
    Ok((model, trace))
}

/// Fusion: one member per learner, all fitted on the same weighted data with
/// their own seeds, averaged uniformly.
pub fn fuse<L>(learners: &[L], train: &RatingsDataset, weights: &WeightVector) -> Result<EnsembleModel<L::Model>>
where
    L: Learner,
    L::Model: Send,
{
    check_size(learners.len())?;
    let members = learners
        .par_iter()
        .enumerate()
        .map(|(t, l)| l.fit(train, weights, l.base_seed()).map_err(member_err(t)))
        .collect::<Result<Vec<_>>>()?;
    let log = learners.iter().map(|l| MemberRecord::seeded(l.base_seed())).collect();
    EnsembleModel::uniform(members, EnsembleMethod::Fusion, log, train.scale())
}

/// Randomness injection: `k` members from [`Learner::fit_randomized`] with
/// seeds `seed, seed + 1, ...`, averaged uniformly.
pub fn inject_randomness<L>(
    learner: &L,
    train: &RatingsDataset,
    weights: &WeightVector,
    k: usize,
    seed: u64,
) -> Result<EnsembleModel<L::Model>>
where
    L: Learner,
    L::Model: Send,
{
    check_size(k)?;
    let seeds: Vec<u64> = (0..k as u64).map(|t| seed.wrapping_add(t)).collect();
    let members = learner.fit_randomized(train, weights, &seeds)?;
    if members.len() != k {
        return Err(Error::invalid("learner returned the wrong number of members"));
    }
    let log = seeds.iter().map(|&s| MemberRecord::seeded(s)).collect();
    EnsembleModel::uniform(members, EnsembleMethod::RandomInjection, log, train.scale())
}

/// Which k-NN axes a fusion preset varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnFusion {
    /// Pearson and cosine, same perspective.
    Metric,
    /// User-user and item-item, same metric.
    Perspective,
    /// All four combinations.
    Both,
}

/// The member configurations of a k-NN fusion preset built around `template`.
pub fn knn_fusion_preset(scheme: KnnFusion, template: KnnConfig) -> Vec<BaseLearnerSpec> {
    let metrics = [Metric::Pearson, Metric::Cosine];
    let perspectives = [Perspective::UserUser, Perspective::ItemItem];
    let combos: Vec<(Perspective, Metric)> = match scheme {
        KnnFusion::Metric => metrics.iter().map(|&m| (template.perspective, m)).collect(),
        KnnFusion::Perspective => perspectives.iter().map(|&p| (p, template.metric)).collect(),
        KnnFusion::Both => perspectives
            .iter()
            .flat_map(|&p| metrics.iter().map(move |&m| (p, m)))
            .collect(),
    };
    combos
        .into_iter()
        .map(|(perspective, metric)| BaseLearnerSpec::knn(KnnConfig { perspective, metric, ..template }))
        .collect()
}

/// Latent sizes of the factor-model fusion presets (5 or 10 members).
pub fn latent_size_preset(k: usize) -> Result<&'static [usize]> {
    match k {
        5 => Ok(&[3, 4, 5, 10, 20]),
        10 => Ok(&[3, 4, 5, 10, 15, 20, 25, 30, 40, 50]),
        _ => Err(Error::invalid(format!("no latent-size preset with {k} members (use 5 or 10)"))),
    }
}

/// Copies of a factor-model spec that differ only in latent size.
pub fn latent_size_fusion(template: BaseLearnerSpec, sizes: &[usize]) -> Result<Vec<BaseLearnerSpec>> {
    sizes
        .iter()
        .map(|&f| {
            let params = match template.params {
                LearnerParams::Mf(h) => LearnerParams::Mf(MfHyperParams { factors: f, ..h }),
                LearnerParams::Fnm(h) => LearnerParams::Fnm(FnmHyperParams { factors: f, ..h }),
                LearnerParams::Knn(_) => {
                    return Err(Error::invalid("latent-size fusion needs a factor model"))
                }
            };
            Ok(BaseLearnerSpec { params, ..template })
        })
        .collect()
}
