//! Experimental protocol: repeated random splits, RMSE/MAE, paired t-tests,
//! wall-clock cost and training-time scaling.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{random_split, read_ratings_file, RatingFormat, RatingsDataset, WeightVector};
use crate::ensemble::{
    adaboost_rt, bag, fuse, inject_randomness, knn_fusion_preset, latent_size_fusion, latent_size_preset,
    BaseLearnerSpec, Delta, EnsembleModel, Family, KnnFusion, PredictorModel,
};
use crate::error::{Error, Result};
use crate::factorization::{MfHyperParams, MfVariant};
use crate::fnm::FnmHyperParams;
use crate::fsutil::write_atomic;
use crate::knn::{KnnConfig, Metric, Perspective};
use crate::model::{Learner, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rmse: f64,
    pub mae: f64,
}

/// Clamped predictions for every test rating, in order.
pub fn predict_all<P: Predictor + ?Sized>(model: &P, test: &RatingsDataset) -> Vec<f64> {
    test.ratings()
        .par_iter()
        .map(|r| model.predict(r.user as usize, r.item as usize))
        .collect()
}

/// RMSE and MAE of precomputed predictions.
pub fn scores_of(predictions: &[f64], test: &RatingsDataset) -> Result<Scores> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != test.len() {
        return Err(Error::invalid("one prediction per test rating expected"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, r) in predictions.iter().zip(test.ratings()) {
        let e = p - r.value;
        se += e * e;
        ae += e.abs();
    }
    let n = test.len() as f64;
    Ok(Scores { rmse: (se / n).sqrt(), mae: ae / n })
}

pub fn score<P: Predictor + ?Sized>(model: &P, test: &RatingsDataset) -> Result<Scores> {
    scores_of(&predict_all(model, test), test)
}

pub fn rmse<P: Predictor + ?Sized>(model: &P, test: &RatingsDataset) -> Result<f64> {
    score(model, test).map(|s| s.rmse)
}

pub fn mae<P: Predictor + ?Sized>(model: &P, test: &RatingsDataset) -> Result<f64> {
    score(model, test).map(|s| s.mae)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
}

/// Paired t-test on `a − b` with `n − 1` degrees of freedom. Differences with
/// zero variance give `p = 1` when their mean is zero and `p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("a paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0 }
        } else {
            TTest { t: mean.signum() * f64::INFINITY, p: 0.0 }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p })
}

/// A base learner as written in a config file; unset fields take the
/// defaults of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl LearnerConfig {
    pub fn new(family: Family) -> Self {
        LearnerConfig {
            family,
            k: None,
            metric: None,
            factors: None,
            learning_rate: None,
            regularization: None,
            epochs: None,
            init_range: None,
            alpha: None,
            seed: None,
        }
    }

    pub fn to_spec(&self) -> Result<BaseLearnerSpec> {
        let seed = self.seed.unwrap_or(0);
        let knn_only = self.k.is_some() || self.metric.is_some();
        let factor_only = self.factors.is_some()
            || self.learning_rate.is_some()
            || self.regularization.is_some()
            || self.epochs.is_some()
            || self.init_range.is_some();
        let family = self.family.name();
        let spec = match self.family {
            Family::KnnUser | Family::KnnItem => {
                if factor_only || self.alpha.is_some() {
                    return Err(Error::invalid(format!("{family} takes only k, metric and seed")));
                }
                let perspective = if self.family == Family::KnnUser {
                    Perspective::UserUser
                } else {
                    Perspective::ItemItem
                };
                let config = KnnConfig::new(perspective, self.metric.unwrap_or(Metric::Pearson), self.k.unwrap_or(20));
                BaseLearnerSpec::knn(config).with_seed(seed)
            }
            Family::Ismf | Family::Rismf | Family::Brismf => {
                if knn_only || self.alpha.is_some() {
                    return Err(Error::invalid(format!("{family} does not take k, metric or alpha")));
                }
                let variant = match self.family {
                    Family::Ismf => MfVariant::Ismf,
                    Family::Rismf => MfVariant::Rismf,
                    _ => MfVariant::Brismf,
                };
                let d = MfHyperParams::new(variant, self.required_factors()?);
                BaseLearnerSpec::mf(MfHyperParams {
                    learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
                    regularization: self.regularization.unwrap_or(d.regularization),
                    epochs: self.epochs.unwrap_or(d.epochs),
                    init_range: self.init_range.unwrap_or(d.init_range),
                    seed,
                    ..d
                })
            }
            Family::Fnm => {
                if knn_only {
                    return Err(Error::invalid("fnm does not take k or metric"));
                }
                let d = FnmHyperParams::new(self.required_factors()?);
                BaseLearnerSpec::fnm(FnmHyperParams {
                    learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
                    regularization: self.regularization.unwrap_or(d.regularization),
                    epochs: self.epochs.unwrap_or(d.epochs),
                    init_range: self.init_range.unwrap_or(d.init_range),
                    alpha: self.alpha.unwrap_or(d.alpha),
                    seed,
                    ..d
                })
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    fn required_factors(&self) -> Result<usize> {
        self.factors
            .ok_or_else(|| Error::invalid(format!("{} needs `factors`", self.family.name())))
    }
}

fn default_power() -> u32 {
    1
}

fn default_delta_rule() -> Delta {
    Delta::Deviation
}

/// How a descriptor combines members of its learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleConfig {
    Bagging {
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    AdaboostRt {
        size: usize,
        #[serde(default = "default_delta_rule")]
        delta: Delta,
        #[serde(default = "default_power")]
        power: u32,
    },
    /// k-NN: a `knn` preset. Factor models: explicit `factors` or a preset `size` (5 or 10).
    Fusion {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knn: Option<KnnFusion>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        factors: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        size: Option<usize>,
    },
    RandomInjection {
        size: usize,
        /// Defaults to the learner's seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

/// One named model of an experiment: a base learner, optionally ensembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub name: String,
    pub learner: LearnerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
}

/// A fitted descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Single(PredictorModel),
    Ensemble(EnsembleModel<PredictorModel>),
}

impl Predictor for TrainedModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        match self {
            TrainedModel::Single(m) => m.predict(user, item),
            TrainedModel::Ensemble(e) => e.predict(user, item),
        }
    }
}

impl ModelDescriptor {
    pub fn base(name: impl Into<String>, learner: LearnerConfig) -> Self {
        ModelDescriptor { name: name.into(), learner, ensemble: None }
    }

    pub fn ensemble(name: impl Into<String>, learner: LearnerConfig, ensemble: EnsembleConfig) -> Self {
        ModelDescriptor { name: name.into(), learner, ensemble: Some(ensemble) }
    }

    /// Checks the descriptor without training anything.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("model name must not be empty"));
        }
        let spec = self.learner.to_spec()?;
        match &self.ensemble {
            None => Ok(()),
            Some(EnsembleConfig::Bagging { size, .. }) | Some(EnsembleConfig::RandomInjection { size, .. }) => {
                positive_size(*size)
            }
            Some(EnsembleConfig::AdaboostRt { size, delta, power }) => {
                positive_size(*size)?;
                if *power == 0 {
                    return Err(Error::invalid("boosting power must be at least 1"));
                }
                if let Delta::Fixed(d) = delta {
                    if !(*d > 0.0 && d.is_finite()) {
                        return Err(Error::invalid("a fixed delta must be positive"));
                    }
                }
                Ok(())
            }
            Some(EnsembleConfig::Fusion { .. }) => self.fusion_members(spec).map(|_| ()),
        }
    }

    fn fusion_members(&self, spec: BaseLearnerSpec) -> Result<Vec<BaseLearnerSpec>> {
        let Some(EnsembleConfig::Fusion { knn, factors, size }) = &self.ensemble else {
            return Err(Error::invalid("not a fusion descriptor"));
        };
        let is_knn = matches!(self.learner.family, Family::KnnUser | Family::KnnItem);
        match (is_knn, knn, factors, size) {
            (true, Some(scheme), None, None) => match spec.params {
                crate::ensemble::LearnerParams::Knn(c) => {
                    Ok(knn_fusion_preset(*scheme, c).into_iter().map(|s| s.with_seed(spec.seed)).collect())
                }
                _ => unreachable!(),
            },
            (false, None, Some(sizes), None) if !sizes.is_empty() => latent_size_fusion(spec, sizes),
            (false, None, None, Some(k)) => latent_size_fusion(spec, latent_size_preset(*k)?),
            (true, ..) => Err(Error::invalid(format!("{}: k-NN fusion takes exactly `knn`", self.name))),
            _ => Err(Error::invalid(format!(
                "{}: factor-model fusion takes exactly one of `factors` (non-empty) or `size`",
                self.name
            ))),
        }
    }

    /// Fits the descriptor on `train` with unit weights.
    pub fn fit(&self, train: &RatingsDataset) -> Result<TrainedModel> {
        self.validate()?;
        let spec = self.learner.to_spec()?;
        let ones = WeightVector::ones(train.len());
        Ok(match &self.ensemble {
            None => TrainedModel::Single(spec.fit(train, &ones, spec.base_seed())?),
            Some(EnsembleConfig::Bagging { size, seed }) => TrainedModel::Ensemble(bag(&spec, train, &ones, *size, *seed)?),
            Some(EnsembleConfig::AdaboostRt { size, delta, power }) => TrainedModel::Ensemble(single_threaded(|| {
                adaboost_rt(&spec, train, *size, *delta, *power)
            })?),
            Some(EnsembleConfig::Fusion { .. }) => {
                TrainedModel::Ensemble(fuse(&self.fusion_members(spec)?, train, &ones)?)
            }
            Some(EnsembleConfig::RandomInjection { size, seed }) => TrainedModel::Ensemble(inject_randomness(
                &spec,
                train,
                &ones,
                *size,
                seed.unwrap_or(spec.base_seed()),
            )?),
        })
    }

    /// Every seed the descriptor will use.
    pub fn seeds(&self) -> Vec<u64> {
        let base = self.learner.seed.unwrap_or(0);
        let mut seeds = vec![base];
        match &self.ensemble {
            Some(EnsembleConfig::Bagging { seed, .. }) => seeds.push(*seed),
            Some(EnsembleConfig::RandomInjection { seed: Some(s), .. }) => seeds.push(*s),
            _ => {}
        }
        seeds
    }
}

fn positive_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    Ok(())
}

fn default_format() -> RatingFormat {
    RatingFormat::Ml100k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: RatingFormat,
}

fn default_ratio() -> f64 {
    0.8
}

fn default_split_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_split_seeds")]
    pub split_seeds: Vec<u64>,
    /// Model the others are t-tested against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub models: Vec<ModelDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split_seeds.is_empty() {
            return Err(Error::invalid("at least one split seed is required"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split_ratio must lie strictly between 0 and 1"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("at least one model is required"));
        }
        let mut names = HashSet::new();
        for m in &self.models {
            m.validate().map_err(|e| Error::invalid(format!("model {}: {e}", m.name)))?;
            if !names.insert(m.name.as_str()) {
                return Err(Error::invalid(format!("duplicate model name {}", m.name)));
            }
        }
        if let Some(b) = &self.baseline {
            if !names.contains(b.as_str()) {
                return Err(Error::invalid(format!("baseline {b} is not a model of this config")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    /// Index into the config's split seeds.
    pub split: usize,
    pub split_seed: u64,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub train_s: f64,
    pub predict_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub splits_ok: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub train_s_mean: f64,
    pub predict_s_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    /// Mean of `model − baseline` RMSE over shared successful splits.
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<ModelSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Mean and sample standard deviation (0 for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

fn cells_of<'a>(cells: &'a [CellResult], model: &'a str) -> impl Iterator<Item = &'a CellResult> {
    cells.iter().filter(move |c| c.model == model)
}

impl ExperimentReport {
    /// Aggregates cells in model order of first appearance.
    pub fn from_cells(cells: Vec<CellResult>, baseline: Option<&str>) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for c in &cells {
            if !order.contains(&c.model.as_str()) {
                order.push(&c.model);
            }
        }
        let of = |m| cells_of(&cells, m);
        let summaries = order
            .iter()
            .map(|&m| {
                let rmse: Vec<f64> = of(m).filter_map(|c| c.rmse).collect();
                let mae: Vec<f64> = of(m).filter_map(|c| c.mae).collect();
                let n = of(m).count() as f64;
                ModelSummary {
                    model: m.to_string(),
                    splits_ok: rmse.len(),
                    rmse_mean: mean_std(&rmse).map(|s| s.0),
                    rmse_std: mean_std(&rmse).map(|s| s.1),
                    mae_mean: mean_std(&mae).map(|s| s.0),
                    mae_std: mean_std(&mae).map(|s| s.1),
                    train_s_mean: of(m).map(|c| c.train_s).sum::<f64>() / n,
                    predict_s_mean: of(m).map(|c| c.predict_s).sum::<f64>() / n,
                }
            })
            .collect();
        let mut comparisons = Vec::new();
        if let Some(b) = baseline {
            for &m in order.iter().filter(|&&m| m != b) {
                let (mut xs, mut ys) = (Vec::new(), Vec::new());
                for c in of(m) {
                    let other = of(b).find(|o| o.split == c.split).and_then(|o| o.rmse);
                    if let (Some(x), Some(y)) = (c.rmse, other) {
                        xs.push(x);
                        ys.push(y);
                    }
                }
                if let Ok(tt) = paired_t_test(&xs, &ys) {
                    comparisons.push(Comparison {
                        model: m.to_string(),
                        baseline: b.to_string(),
                        mean_diff: mean_std(&xs).unwrap().0 - mean_std(&ys).unwrap().0,
                        t: tt.t,
                        p: tt.p,
                    });
                }
            }
        }
        ExperimentReport { cells, summaries, comparisons }
    }

    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }

    /// `model,split,rmse,mae,train_s,predict_s`; failed cells have empty scores.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "split", "rmse", "mae", "train_s", "predict_s"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.model.clone(),
                c.split.to_string(),
                opt(c.rmse),
                opt(c.mae),
                c.train_s.to_string(),
                c.predict_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.csv` and `report.json` into `dir`, atomically.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join("report.csv");
        let json_path = dir.join("report.json");
        write_atomic(&csv_path, |w| self.write_csv(w))?;
        let json = self.to_json()?;
        write_atomic(&json_path, |w| Ok(w.write_all(json.as_bytes())?))?;
        Ok((csv_path, json_path))
    }

    /// The report with every wall-clock field zeroed.
    pub fn without_timings(&self) -> ExperimentReport {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.train_s = 0.0;
            c.predict_s = 0.0;
        }
        for s in &mut r.summaries {
            s.train_s_mean = 0.0;
            s.predict_s_mean = 0.0;
        }
        r
    }
}

/// Loads the configured dataset and runs [`run_protocol_on`].
pub fn run_protocol(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let ds = read_ratings_file(&config.dataset.path, config.dataset.format)?;
    run_protocol_on(&ds, config)
}

/// Splits `ds` once per seed and fits and scores every model on every split.
/// A failing cell is recorded and the grid continues.
pub fn run_protocol_on(ds: &RatingsDataset, config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_protocol_with(ds, config, |_, _, _| Ok(()))
}

/// [`run_protocol_on`] with a callback receiving every fitted model as
/// `(model name, split index, model)`. A callback error aborts the run.
pub fn run_protocol_with<F>(ds: &RatingsDataset, config: &ExperimentConfig, mut on_fit: F) -> Result<ExperimentReport>
where
    F: FnMut(&str, usize, &TrainedModel) -> Result<()>,
{
    config.validate()?;
    let splits = config
        .split_seeds
        .iter()
        .map(|&s| random_split(ds, config.split_ratio, s))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (si, split) in splits.iter().enumerate() {
        for m in &config.models {
            let start = Instant::now();
            let fitted = m.fit(&split.train);
            let train_s = start.elapsed().as_secs_f64();
            let cell = match fitted {
                Ok(model) => {
                    let start = Instant::now();
                    let predictions = predict_all(&model, &split.test);
                    let predict_s = start.elapsed().as_secs_f64();
                    let s = scores_of(&predictions, &split.test)?;
                    on_fit(&m.name, si, &model)?;
                    log::info!("{} split {si}: rmse {:.4} ({train_s:.2}s)", m.name, s.rmse);
                    CellResult {
                        model: m.name.clone(),
                        split: si,
                        split_seed: split.seed,
                        rmse: Some(s.rmse),
                        mae: Some(s.mae),
                        train_s,
                        predict_s,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("{} split {si} failed: {e}", m.name);
                    CellResult {
                        model: m.name.clone(),
                        split: si,
                        split_seed: split.seed,
                        rmse: None,
                        mae: None,
                        train_s,
                        predict_s: 0.0,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    Ok(ExperimentReport::from_cells(cells, config.baseline.as_deref()))
}

/// Runs `f` on a dedicated one-thread pool, so nested parallel iterators run
/// sequentially and timings are comparable.
pub fn single_threaded<T, F>(f: F) -> Result<T>
where
    F: FnOnce() -> Result<T> + Send,
    T: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?
        .install(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::invalid("a line needs at least two points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all x values are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(LinearFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingProbe {
    /// `(K, training seconds)`.
    pub points: Vec<(usize, f64)>,
    pub fit: LinearFit,
}

/// Rounds of the scaling probe; each `K` keeps its fastest time.
pub const SCALING_REPEATS: usize = 3;

/// Times `build(K)` for every `K` on a one-thread pool and fits a line.
/// The sizes are swept [`SCALING_REPEATS`] times and each keeps its minimum,
/// which filters out scheduler noise. `ks` must be ascending with at least
/// three entries.
pub fn time_scaling_probe_with<F>(ks: &[usize], mut build: F) -> Result<ScalingProbe>
where
    F: FnMut(usize) -> Result<()> + Send,
{
    if ks.len() < 3 {
        return Err(Error::invalid("a scaling probe needs at least three ensemble sizes"));
    }
    if ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ensemble sizes must be positive and strictly ascending"));
    }
    let points = single_threaded(|| {
        let mut best = vec![f64::INFINITY; ks.len()];
        for _ in 0..SCALING_REPEATS {
            for (slot, &k) in best.iter_mut().zip(ks) {
                let start = Instant::now();
                build(k)?;
                *slot = slot.min(start.elapsed().as_secs_f64());
            }
        }
        Ok(ks.iter().copied().zip(best).collect::<Vec<_>>())
    })?;
    let fit = linear_fit(&points.iter().map(|&(k, s)| (k as f64, s)).collect::<Vec<_>>())?;
    Ok(ScalingProbe { points, fit })
}

/// Training-time scaling of randomness-injection ensembles of `spec`.
pub fn time_scaling_probe(spec: &BaseLearnerSpec, train: &RatingsDataset, ks: &[usize], seed: u64) -> Result<ScalingProbe> {
    let ones = WeightVector::ones(train.len());
    time_scaling_probe_with(ks, |k| inject_randomness(spec, train, &ones, k, seed).map(|_| ()))
}
