//! Criterion 6: the property suite. Every check here runs on small synthetic
//! data against an independently written oracle.

use std::collections::HashMap;
use std::sync::Mutex;

use cf_ensemble::dataset::{
    bootstrap_weights, random_split, uniform_distribution, RatingScale, RatingsDataset, WeightVector,
};
use cf_ensemble::ensemble::{
    adaboost_rt_traced, bag, fuse, inject_randomness, BaseLearnerSpec, EnsembleMethod, EnsembleModel,
    MemberRecord, PredictorModel,
};
use cf_ensemble::factorization::{
    init_factors, sgd_epoch, weighted_sse, fit_mf, MfHyperParams, MfModel, MfVariant,
};
use cf_ensemble::fnm::{fit_fnm, fnm_objective, FnmHyperParams, FnmModel};
use cf_ensemble::knn::{fit_knn, KnnConfig, KnnModel, Metric, Perspective};
use cf_ensemble::rng::{derive_seed, seeded};
use cf_ensemble::{Learner, Predictor, Result};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::Outcome;

const STARS: RatingScale = RatingScale::STARS;

/// `users x items` ratings in half-star steps, each cell present with
/// probability `density`; every user and item gets at least one rating.
fn toy(seed: u64, users: usize, items: usize, density: f64) -> RatingsDataset {
    let mut rng = seeded(seed);
    let mut triples = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if rng.gen_bool(density) || i == u % items || u == i % users {
                triples.push((u, i, rng.gen_range(2..=10) as f64 / 2.0));
            }
        }
    }
    RatingsDataset::from_indexed(users, items, &triples, STARS).unwrap()
}

fn random_counts(seed: u64, n: usize) -> WeightVector {
    let mut rng = seeded(seed);
    WeightVector::from_counts(&(0..n).map(|_| rng.gen_range(1..=3)).collect::<Vec<u32>>())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn all_predictions<P: Predictor + ?Sized>(model: &P, ds: &RatingsDataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(ds.num_users() * ds.num_items());
    for u in 0..ds.num_users() {
        for i in 0..ds.num_items() {
            out.push(model.predict(u, i));
        }
    }
    out
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

pub fn criterion_6() -> Outcome {
    let mut o = Outcome::new(6, "property suite");
    knn_equal_weights(&mut o);
    mf_equal_weights(&mut o);
    fnm_equal_weights(&mut o);
    adaboost_hand_trace(&mut o);
    bootstrap_conservation(&mut o);
    mf_gradient(&mut o);
    fnm_gradient(&mut o);
    size_one_identity(&mut o);
    convexity(&mut o);
    split_partition(&mut o);
    o
}

// ---------------------------------------------------------------- k-NN

/// Dense unweighted k-NN: means over each entity's full profile, Pearson
/// (two or more co-rated) or cosine (one or more), adjusted weighted average
/// over the `k` most similar entities that rated the target.
struct TextbookKnn {
    rows: Vec<Vec<Option<f64>>>,
    means: Vec<f64>,
    global: f64,
    sims: Vec<Vec<Option<f64>>>,
    k: usize,
    perspective: Perspective,
}

impl TextbookKnn {
    fn new(ds: &RatingsDataset, config: KnnConfig) -> Self {
        let user_major = config.perspective == Perspective::UserUser;
        let (n_rows, n_cols) =
            if user_major { (ds.num_users(), ds.num_items()) } else { (ds.num_items(), ds.num_users()) };
        let mut rows = vec![vec![None; n_cols]; n_rows];
        let (mut sums, mut counts) = (vec![0.0; n_rows], vec![0usize; n_rows]);
        let mut total = 0.0;
        for r in ds.ratings() {
            let (a, b) = if user_major { (r.user, r.item) } else { (r.item, r.user) };
            rows[a as usize][b as usize] = Some(r.value);
            sums[a as usize] += r.value;
            counts[a as usize] += 1;
            total += r.value;
        }
        let global = total / ds.len() as f64;
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { global })
            .collect();
        let mut sims = vec![vec![None; n_rows]; n_rows];
        for a in 0..n_rows {
            for b in 0..n_rows {
                if a != b {
                    sims[a][b] = similarity(&rows[a], &rows[b], means[a], means[b], config.metric);
                }
            }
        }
        TextbookKnn { rows, means, global, sims, k: config.k, perspective: config.perspective }
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        let (e, t) = if self.perspective == Perspective::UserUser { (user, item) } else { (item, user) };
        if self.rows[e].iter().all(Option::is_none) {
            return STARS.clamp(self.global);
        }
        let mut cands: Vec<(usize, f64)> =
            (0..self.rows.len()).filter_map(|b| self.sims[e][b].map(|s| (b, s))).collect();
        cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let voters: Vec<(usize, f64, f64)> = cands
            .into_iter()
            .filter_map(|(b, s)| self.rows[b][t].map(|r| (b, s, r)))
            .take(self.k)
            .collect();
        let num: f64 = voters.iter().map(|&(b, s, r)| s * (r - self.means[b])).sum();
        let den: f64 = voters.iter().map(|&(_, s, _)| s.abs()).sum();
        let v = if den > 0.0 { self.means[e] + num / den } else { self.means[e] };
        STARS.clamp(v)
    }
}

fn similarity(a: &[Option<f64>], b: &[Option<f64>], ma: f64, mb: f64, metric: Metric) -> Option<f64> {
    let (ca, cb) = match metric {
        Metric::Pearson => (ma, mb),
        Metric::Cosine => (0.0, 0.0),
    };
    let pairs: Vec<(f64, f64)> =
        a.iter().zip(b).filter_map(|(x, y)| Some((x.as_ref()? - ca, y.as_ref()? - cb))).collect();
    let min = if metric == Metric::Pearson { 2 } else { 1 };
    if pairs.len() < min {
        return None;
    }
    let cross: f64 = pairs.iter().map(|(x, y)| x * y).sum();
    let na: f64 = pairs.iter().map(|(x, _)| x * x).sum();
    let nb: f64 = pairs.iter().map(|(_, y)| y * y).sum();
    if na <= 0.0 || nb <= 0.0 {
        return None;
    }
    Some((cross / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Largest difference between the model's neighbour table and the oracle's
/// similarities; `INFINITY` if the defined pairs differ.
fn table_deviation(model: &KnnModel, oracle: &TextbookKnn) -> f64 {
    let table = model.table().neighbors();
    let mut worst: f64 = 0.0;
    for a in 0..oracle.rows.len() {
        let got: HashMap<usize, f64> = table.neighbors_of(a).iter().map(|&(b, s)| (b as usize, s)).collect();
        for b in 0..oracle.rows.len() {
            match (got.get(&b), oracle.sims[a][b]) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

fn knn_equal_weights(o: &mut Outcome) {
    let ds = toy(11, 14, 10, 0.75);
    let n = ds.len();
    let weightings = [
        ("ones", WeightVector::ones(n)),
        ("constant 3", WeightVector::from_counts(&vec![3; n])),
        ("uniform distribution", uniform_distribution(&ds).unwrap()),
    ];
    let mut worst_sim: f64 = 0.0;
    let mut worst_pred: f64 = 0.0;
    for perspective in [Perspective::UserUser, Perspective::ItemItem] {
        for metric in [Metric::Pearson, Metric::Cosine] {
            let config = KnnConfig::new(perspective, metric, 4);
            let oracle = TextbookKnn::new(&ds, config);
            let want: Vec<f64> = (0..ds.num_users())
                .flat_map(|u| (0..ds.num_items()).map(move |i| (u, i)))
                .map(|(u, i)| oracle.predict(u, i))
                .collect();
            for (_, w) in &weightings {
                let model = fit_knn(&ds, w, config).unwrap();
                worst_sim = worst_sim.max(table_deviation(&model, &oracle));
                worst_pred = worst_pred.max(max_abs_diff(&all_predictions(&model, &ds), &want));
            }
        }
    }
    o.check(
        "6.knn-equal",
        worst_sim <= 1e-12 && worst_pred <= 1e-12,
        format!(
            "equal weights, k-NN (ones, constant 3, uniform; 2 perspectives x 2 metrics) vs unweighted oracle: \
             max similarity dev {worst_sim:.1e}, max prediction dev {worst_pred:.1e} (limit 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------- MF

/// Plain SGD matrix factorization on unweighted ratings, with the crate's
/// initial factors and per-epoch visit order.
fn textbook_mf(ds: &RatingsDataset, hyper: MfHyperParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let f = hyper.factors;
    let (p0, q0) = init_factors(ds.num_users(), ds.num_items(), &hyper);
    let mut p: Vec<Vec<f64>> = p0.chunks(f).map(<[f64]>::to_vec).collect();
    let mut q: Vec<Vec<f64>> = q0.chunks(f).map(<[f64]>::to_vec).collect();
    let lambda = if hyper.variant == MfVariant::Ismf { 0.0 } else { hyper.regularization };
    let eta = hyper.learning_rate;
    let brismf = hyper.variant == MfVariant::Brismf;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut seeded(derive_seed(hyper.seed, epoch as u64)));
        for j in order {
            let r = ds.ratings()[j];
            let (u, i) = (r.user as usize, r.item as usize);
            let e = r.value - p[u].iter().zip(&q[i]).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..f {
                let (pk, qk) = (p[u][k], q[i][k]);
                if !(brismf && k == 0) {
                    p[u][k] = pk + eta * (e * qk - lambda * pk);
                }
                if !(brismf && k == 1) {
                    q[i][k] = qk + eta * (e * pk - lambda * qk);
                }
            }
        }
    }
    (p, q)
}

fn mf_params(m: &MfModel, users: usize, items: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..users).flat_map(|u| m.user_factors(u).to_vec()).collect();
    v.extend((0..items).flat_map(|i| m.item_factors(i).to_vec()));
    v
}

fn mf_equal_weights(o: &mut Outcome) {
    let ds = toy(12, 9, 8, 0.5);
    let (m, n) = (ds.num_users(), ds.num_items());
    let mut worst_ones: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    let mut worst_scaled: f64 = 0.0;
    for variant in [MfVariant::Ismf, MfVariant::Rismf, MfVariant::Brismf] {
        let hyper = MfHyperParams { epochs: 12, seed: 5, init_range: 0.1, learning_rate: 0.02, ..MfHyperParams::new(variant, 3) };
        let (p, q) = textbook_mf(&ds, hyper);
        let mut want: Vec<f64> = p.concat();
        want.extend(q.concat());
        let ones = fit_mf(&ds, &WeightVector::ones(ds.len()), hyper).unwrap();
        worst_ones = worst_ones.max(max_abs_diff(&mf_params(&ones, m, n), &want));
        let uniform = fit_mf(&ds, &uniform_distribution(&ds).unwrap(), hyper).unwrap();
        worst_uniform = worst_uniform.max(max_abs_diff(&mf_params(&uniform, m, n), &want));
        // A constant count c with step η/c walks the same path as ones with η.
        let scaled = MfHyperParams { learning_rate: hyper.learning_rate / 3.0, ..hyper };
        let threes = fit_mf(&ds, &WeightVector::from_counts(&vec![3; ds.len()]), scaled).unwrap();
        worst_scaled = worst_scaled.max(max_abs_diff(&mf_params(&threes, m, n), &want));
    }
    o.check(
        "6.mf-equal",
        worst_ones == 0.0 && worst_uniform <= 1e-12 && worst_scaled <= 1e-12,
        format!(
            "equal weights, MF (3 variants, 12 epochs) vs unweighted SGD: ones identical trajectory \
             (max dev {worst_ones:.1e}), uniform {worst_uniform:.1e}, constant 3 at η/3 {worst_scaled:.1e} (limit 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------- FNM

/// Unweighted factorized neighbourhood model written from the update rules.
struct TextbookFnm {
    mu: f64,
    bu: Vec<f64>,
    bi: Vec<f64>,
    q: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rated: Vec<Vec<(usize, f64)>>,
    static_bu: Vec<f64>,
    static_bi: Vec<f64>,
    alpha: f64,
}

impl TextbookFnm {
    fn fit(ds: &RatingsDataset, h: FnmHyperParams) -> Self {
        let (m, n, f) = (ds.num_users(), ds.num_items(), h.factors);
        let ratings = ds.ratings();
        let mu = ratings.iter().map(|r| r.value).sum::<f64>() / ratings.len() as f64;
        let group = |n: usize, key: &dyn Fn(usize) -> usize, val: &dyn Fn(usize) -> f64| {
            let mut s = vec![0.0; n];
            let mut c = vec![0.0; n];
            for j in 0..ratings.len() {
                s[key(j)] += val(j);
                c[key(j)] += 1.0;
            }
            s.iter().zip(&c).map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 }).collect::<Vec<_>>()
        };
        let bi = group(n, &|j| ratings[j].item as usize, &|j| ratings[j].value - mu);
        let bu = group(m, &|j| ratings[j].user as usize, &|j| {
            ratings[j].value - mu - bi[ratings[j].item as usize]
        });
        let mut rng = seeded(h.seed);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..f).map(|_| rng.gen_range(-h.init_range..=h.init_range)).collect()).collect()
        };
        let (q, x, y) = (draw(), draw(), draw());
        let mut rated = vec![Vec::new(); m];
        for r in ratings {
            rated[r.user as usize].push((r.item as usize, r.value));
        }
        for row in &mut rated {
            row.sort_by_key(|e| e.0);
        }
        let mut model = TextbookFnm {
            mu,
            bu: bu.clone(),
            bi: bi.clone(),
            q,
            x,
            y,
            rated,
            static_bu: bu,
            static_bi: bi,
            alpha: h.alpha,
        };
        let (eta, lambda) = (h.learning_rate, h.regularization);
        for epoch in 0..h.epochs {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut seeded(derive_seed(h.seed, epoch as u64)));
            for u in order {
                if model.rated[u].is_empty() {
                    continue;
                }
                let p = model.user_vector(u);
                let norm = (model.rated[u].len() as f64).powf(-model.alpha);
                let mut sum_err = vec![0.0; f];
                for &(i, r) in &model.rated[u].clone() {
                    let e = r - model.raw(u, i, &p);
                    for k in 0..f {
                        sum_err[k] += e * model.q[i][k];
                    }
                    model.bu[u] += eta * (e - lambda * model.bu[u]);
                    model.bi[i] += eta * (e - lambda * model.bi[i]);
                    for k in 0..f {
                        model.q[i][k] += eta * (e * p[k] - lambda * model.q[i][k]);
                    }
                }
                for &(j, r) in &model.rated[u].clone() {
                    let resid = r - model.static_baseline(u, j);
                    for k in 0..f {
                        model.x[j][k] += eta * (norm * resid * sum_err[k] - lambda * model.x[j][k]);
                        model.y[j][k] += eta * (norm * sum_err[k] - lambda * model.y[j][k]);
                    }
                }
            }
        }
        model
    }

    fn static_baseline(&self, u: usize, i: usize) -> f64 {
        self.mu + self.static_bu[u] + self.static_bi[i]
    }

    fn user_vector(&self, u: usize) -> Vec<f64> {
        let f = self.q.first().map_or(0, Vec::len);
        let mut explicit = vec![0.0; f];
        let mut implicit = vec![0.0; f];
        for &(j, r) in &self.rated[u] {
            let resid = r - self.static_baseline(u, j);
            for k in 0..f {
                explicit[k] += resid * self.x[j][k];
                implicit[k] += self.y[j][k];
            }
        }
        let norm = (self.rated[u].len() as f64).powf(-self.alpha);
        explicit.iter().zip(&implicit).map(|(a, b)| norm * a + norm * b).collect()
    }

    fn raw(&self, u: usize, i: usize, p: &[f64]) -> f64 {
        self.mu + self.bu[u] + self.bi[i] + self.q[i].iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
    }

    fn predict(&self, u: usize, i: usize) -> f64 {
        STARS.clamp(self.raw(u, i, &self.user_vector(u)))
    }

    fn parameters(&self) -> Vec<f64> {
        let mut v = self.bu.clone();
        v.extend(&self.bi);
        for m in [&self.q, &self.x, &self.y] {
            v.extend(m.concat());
        }
        v
    }
}

fn fnm_equal_weights(o: &mut Outcome) {
    let ds = toy(13, 10, 8, 0.5);
    let h = FnmHyperParams { epochs: 8, seed: 3, init_range: 0.1, learning_rate: 0.01, ..FnmHyperParams::new(3) };
    let oracle = TextbookFnm::fit(&ds, h);
    let want_params = oracle.parameters();
    let want_pred: Vec<f64> = (0..ds.num_users())
        .flat_map(|u| (0..ds.num_items()).map(move |i| (u, i)))
        .map(|(u, i)| oracle.predict(u, i))
        .collect();
    let mut worst: f64 = 0.0;
    for w in [WeightVector::ones(ds.len()), uniform_distribution(&ds).unwrap()] {
        let model = fit_fnm(&ds, &w, h).unwrap();
        worst = worst.max(max_abs_diff(&model.parameters(), &want_params));
        worst = worst.max(max_abs_diff(&all_predictions(&model, &ds), &want_pred));
    }
    o.check(
        "6.fnm-equal",
        worst <= 1e-12,
        format!(
            "equal weights, FNM (ones, uniform; 8 epochs) vs unweighted oracle: \
             max parameter/prediction dev {worst:.1e} (limit 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------- AdaBoost

/// Learner whose round `t` model replays a fixed prediction table, recording
/// the weights it was trained under.
struct Script {
    rounds: Vec<HashMap<(usize, usize), f64>>,
    seen: Mutex<Vec<Vec<f64>>>,
}

struct Replay(HashMap<(usize, usize), f64>);

impl Predictor for Replay {
    fn predict(&self, user: usize, item: usize) -> f64 {
        STARS.clamp(self.0.get(&(user, item)).copied().unwrap_or(3.0))
    }
}

impl Learner for Script {
    type Model = Replay;

    fn fit(&self, _train: &RatingsDataset, weights: &WeightVector, seed: u64) -> Result<Replay> {
        self.seen.lock().unwrap().push(weights.as_slice().to_vec());
        Ok(Replay(self.rounds[seed as usize].clone()))
    }
}

fn adaboost_hand_trace(o: &mut Outcome) {
    let cells = [(0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 2)];
    let truth = [1.0, 2.0, 3.0, 4.0, 5.0, 5.0];
    let p1 = [1.1, 2.9, 2.8, 2.5, 5.0, 3.6];
    let p2 = [1.7, 1.9, 3.0, 4.2, 4.7, 2.2];
    let triples: Vec<_> = cells.iter().zip(&truth).map(|(&(u, i), &r)| (u, i, r)).collect();
    let ds = RatingsDataset::from_indexed(3, 3, &triples, STARS).unwrap();
    let table = |p: &[f64; 6]| cells.iter().copied().zip(p.iter().copied()).collect::<HashMap<_, _>>();
    let script = Script { rounds: vec![table(&p1), table(&p2)], seen: Mutex::new(Vec::new()) };
    let (model, trace) = adaboost_rt_traced(&script, &ds, 2, 0.5, 1).unwrap();

    // By hand, δ = 0.5. Round 1 misses records 1, 3, 5: ε = 1/2, β = 1/2, and
    // the hits 0, 2, 4 are halved, giving D2 = (1, 2, 1, 2, 1, 2) / 9. Round 2
    // misses records 0 and 5: ε = 1/9 + 2/9 = 1/3, β = 1/3.
    let d1 = [1.0 / 6.0; 6];
    let d2 = [1.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0];
    let betas = [0.5, 1.0 / 3.0];
    let weights = [2f64.ln(), 3f64.ln()];
    let log = model.build_log();
    let mut ok = trace.distributions.len() == 2
        && max_abs_diff(&trace.distributions[0], &d1) <= 1e-12
        && max_abs_diff(&trace.distributions[1], &d2) <= 1e-12
        && log.iter().zip(&betas).all(|(r, b)| (r.beta.unwrap() - b).abs() <= 1e-12)
        && max_abs_diff(model.member_weights(), &weights) <= 1e-12;
    // D_t sums to one; the learner saw n·D_t.
    ok &= trace.distributions.iter().all(|d| (d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let seen = script.seen.lock().unwrap().clone();
    ok &= seen.len() == 2 && max_abs_diff(&seen[1], &d2.map(|d| 6.0 * d)) <= 1e-12;
    // Relative shift: a hit's weight moves by β relative to a miss's.
    let (hit, miss) = (0, 1);
    let shift = (trace.distributions[1][hit] / trace.distributions[0][hit])
        / (trace.distributions[1][miss] / trace.distributions[0][miss]);
    ok &= (shift - betas[0]).abs() <= 1e-12;
    let combined: Vec<f64> = cells.iter().map(|&(u, i)| model.predict(u, i)).collect();
    let want: Vec<f64> =
        p1.iter().zip(&p2).map(|(a, b)| (weights[0] * a + weights[1] * b) / (weights[0] + weights[1])).collect();
    ok &= max_abs_diff(&combined, &want) <= 1e-12;
    o.check(
        "6.adaboost",
        ok,
        format!(
            "AdaBoost.RT 2-round scripted trace: D2 = (1,2,1,2,1,2)/9, β = 1/2 then 1/3, weights ln 2 and ln 3, \
             Σ D_t = 1, hit/miss shift = β (got 9·D2 = {}, β = {})",
            trace
                .distributions
                .get(1)
                .map(|d| d.iter().map(|x| format!("{:.6}", 9.0 * x)).collect::<Vec<_>>().join(" "))
                .unwrap_or_default(),
            log.iter().map(|r| format!("{:.6}", r.beta.unwrap())).collect::<Vec<_>>().join(" ")
        ),
    );
}

fn bootstrap_conservation(o: &mut Outcome) {
    let ds = toy(14, 20, 15, 0.4);
    let bad = (0..100u64).filter(|&s| bootstrap_weights(&ds, s).unwrap().sum() != ds.len() as f64).count();
    o.check("6.bootstrap", bad == 0, format!("bootstrap Σw = |R| for 100 seeds ({bad} violations)"));
}

// ---------------------------------------------------------------- gradients

/// Central differences of `objective` over `n` coordinates reached via `slot`.
fn numeric_gradient<M: Clone>(
    model: &M,
    n: usize,
    slot: impl Fn(&mut M, usize) -> &mut f64,
    objective: impl Fn(&M) -> f64,
) -> Vec<f64> {
    let h = 1e-6;
    (0..n)
        .map(|c| {
            let mut plus = model.clone();
            *slot(&mut plus, c) += h;
            let mut minus = model.clone();
            *slot(&mut minus, c) -= h;
            (objective(&plus) - objective(&minus)) / (2.0 * h)
        })
        .collect()
}

fn mf_slot(model: &mut MfModel, c: usize, m: usize, f: usize) -> &mut f64 {
    if c < m * f {
        &mut model.user_factors_mut(c / f)[c % f]
    } else {
        let c = c - m * f;
        &mut model.item_factors_mut(c / f)[c % f]
    }
}

fn mf_gradient(o: &mut Outcome) {
    let ds = toy(15, 8, 7, 0.5);
    let w = random_counts(16, ds.len());
    let (m, n, f) = (ds.num_users(), ds.num_items(), 3);
    let eta = 1e-7;
    let mut worst: f64 = 0.0;
    for variant in [MfVariant::Ismf, MfVariant::Rismf, MfVariant::Brismf] {
        let hyper = MfHyperParams { learning_rate: eta, init_range: 0.5, regularization: 0.05, seed: 2, ..MfHyperParams::new(variant, f) };
        let start = MfModel::initialized(&ds, &w, hyper).unwrap();
        let mut stepped = start.clone();
        sgd_epoch(&mut stepped, &ds, &w, 9).unwrap();
        let grad = numeric_gradient(&start, (m + n) * f, |model, c| mf_slot(model, c, m, f), |model| weighted_sse(model, &ds, &w).unwrap());
        let before = mf_params(&start, m, n);
        let after = mf_params(&stepped, m, n);
        let pinned = |c: usize| {
            variant == MfVariant::Brismf && ((c < m * f && c % f == 0) || (c >= m * f && (c - m * f) % f == 1))
        };
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for c in (0..before.len()).filter(|&c| !pinned(c)) {
            got.push((after[c] - before[c]) / eta);
            want.push(-grad[c]);
        }
        worst = worst.max(rel_err(&got, &want));
    }
    o.check(
        "6.mf-gradient",
        worst <= 1e-4,
        format!(
            "MF finite differences (3 variants, count weights): one SGD epoch at η = 1e-7 moves by −η∇ \
             of the weighted objective, rel. err {worst:.1e} (limit 1e-4)"
        ),
    );
}

fn fnm_slot(model: &mut FnmModel, c: usize, m: usize, n: usize, f: usize) -> &mut f64 {
    if c < m + n {
        let (users, items) = model.biases_mut();
        return if c < m { &mut users[c] } else { &mut items[c - m] };
    }
    let c = c - m - n;
    let (block, rest) = (c / (n * f), c % (n * f));
    let row = match block {
        0 => model.item_factors_mut(rest / f),
        1 => model.explicit_factors_mut(rest / f),
        _ => model.implicit_factors_mut(rest / f),
    };
    &mut row[rest % f]
}

fn fnm_gradient(o: &mut Outcome) {
    let ds = toy(17, 7, 6, 0.5);
    let w = random_counts(18, ds.len());
    let (m, n, f) = (ds.num_users(), ds.num_items(), 3);
    let eta = 1e-7;
    let mut results = Vec::new();
    // With λ = 0 every parameter follows the objective's gradient. With λ > 0
    // the x/y penalty is applied once per rating of the item rather than per
    // rating of each user that rated it, so only biases and q are compared.
    for (lambda, coords) in [(0.0, m + n + 3 * n * f), (0.04, m + n + n * f)] {
        let hyper = FnmHyperParams { learning_rate: eta, regularization: lambda, init_range: 0.3, seed: 4, ..FnmHyperParams::new(f) };
        let start = FnmModel::initialized(&ds, &w, hyper).unwrap();
        let mut stepped = start.clone();
        stepped.sgd_epoch(21).unwrap();
        let grad = numeric_gradient(
            &start,
            coords,
            |model, c| fnm_slot(model, c, m, n, f),
            |model| fnm_objective(model, &ds, &w).unwrap(),
        );
        let (before, after) = (start.parameters(), stepped.parameters());
        let got: Vec<f64> = (0..coords).map(|c| (after[c] - before[c]) / eta).collect();
        let want: Vec<f64> = grad.iter().map(|g| -0.5 * g).collect();
        results.push(rel_err(&got, &want));
    }
    o.check(
        "6.fnm-gradient",
        results.iter().all(|&e| e <= 1e-3),
        format!(
            "FNM finite differences (count weights): one sweep at η = 1e-7 moves by −η/2 ∇ of the objective, \
             rel. err {:.1e} (λ = 0, all parameters), {:.1e} (λ = 0.04, biases and q) (limit 1e-3)",
            results[0], results[1]
        ),
    );
}

// ---------------------------------------------------------------- ensembles

fn same<P: Predictor + ?Sized, Q: Predictor + ?Sized>(a: &P, b: &Q, ds: &RatingsDataset) -> bool {
    all_predictions(a, ds) == all_predictions(b, ds)
}

fn size_one_identity(o: &mut Outcome) {
    let ds = toy(19, 12, 9, 0.5);
    let ones = WeightVector::ones(ds.len());
    let knn = KnnConfig::new(Perspective::UserUser, Metric::Pearson, 3);
    let specs = [
        BaseLearnerSpec::knn(knn).with_seed(6),
        BaseLearnerSpec::mf(MfHyperParams { epochs: 5, seed: 6, ..MfHyperParams::new(MfVariant::Ismf, 3) }),
        BaseLearnerSpec::mf(MfHyperParams { epochs: 5, seed: 6, ..MfHyperParams::new(MfVariant::Brismf, 3) }),
        BaseLearnerSpec::fnm(FnmHyperParams { epochs: 3, seed: 6, ..FnmHyperParams::new(3) }),
    ];
    let mut failures = Vec::new();
    for spec in &specs {
        let name = spec.family().name();
        let base = spec.fit(&ds, &ones, spec.base_seed()).unwrap();

        let bagged = bag(spec, &ds, &ones, 1, 40).unwrap();
        let sample = bootstrap_weights(&ds, derive_seed(40, 0)).unwrap();
        if !same(&bagged, &spec.fit(&ds, &sample, spec.base_seed()).unwrap(), &ds) {
            failures.push(format!("bagging/{name}"));
        }
        let boosted = adaboost_rt_traced(spec, &ds, 1, 0.5, 1).unwrap().0;
        if !same(&boosted, &base, &ds) {
            failures.push(format!("adaboost/{name}"));
        }
        if !same(&fuse(std::slice::from_ref(spec), &ds, &ones).unwrap(), &base, &ds) {
            failures.push(format!("fusion/{name}"));
        }
        let injected = inject_randomness(spec, &ds, &ones, 1, 77).unwrap();
        let reference: PredictorModel = match spec.family().name() {
            "knn_user" => PredictorModel::Knn(fit_knn(&ds, &ones, knn).unwrap().with_selection(2, 77).unwrap()),
            _ => spec.fit(&ds, &ones, 77).unwrap(),
        };
        if !same(&injected, &reference, &ds) {
            failures.push(format!("random/{name}"));
        }
    }
    o.check(
        "6.size-one",
        failures.is_empty(),
        format!(
            "size-1 ensembles equal their base model (bagging, AdaBoost.RT, fusion, randomness injection \
             x k-NN, ISMF, BRISMF, FNM){}",
            if failures.is_empty() { String::new() } else { format!("; differs: {}", failures.join(", ")) }
        ),
    );
}

struct Stub(Vec<f64>);

impl Predictor for Stub {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.0[(user * 7 + item) % self.0.len()]
    }
}

fn convexity(o: &mut Outcome) {
    let member = prop::collection::vec(1.0..=5.0f64, 6);
    let strategy = (prop::collection::vec(member, 1..8), prop::collection::vec(0.0..10.0f64, 8), 0usize..4, 0usize..4);
    let mut runner = TestRunner::new(Config { cases: 512, failure_persistence: None, ..Config::default() });
    let result = runner.run(&strategy, |(tables, mut weights, user, item)| {
        weights.truncate(tables.len());
        weights[0] += 1e-3;
        let preds: Vec<f64> = tables.iter().map(|t| Stub(t.clone()).predict(user, item)).collect();
        let k = tables.len();
        let members = tables.into_iter().map(Stub).collect();
        let log = vec![MemberRecord { seed: 0, epsilon: None, beta: None, clamped: false }; k];
        let ens = EnsembleModel::from_parts(members, weights, EnsembleMethod::Fusion, log, STARS).unwrap();
        let lo = preds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for size in 1..=k {
            let v = ens.prefix(size).unwrap().predict(user, item);
            let lo = preds[..size].iter().copied().fold(f64::INFINITY, f64::min);
            let hi = preds[..size].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        let v = ens.predict(user, item);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        Ok(())
    });
    o.check(
        "6.convexity",
        result.is_ok(),
        format!(
            "ensemble prediction lies within its members' range (512 random stub ensembles, all prefixes){}",
            result.err().map(|e| format!(": {e}")).unwrap_or_default()
        ),
    );
}

fn split_partition(o: &mut Outcome) {
    let ds = toy(20, 25, 20, 0.3);
    let key = |d: &RatingsDataset| -> Vec<(u64, u64, u64)> {
        d.ratings()
            .iter()
            .map(|r| (d.users().id_of(r.user as usize), d.items().id_of(r.item as usize), r.value.to_bits()))
            .collect()
    };
    let mut all = key(&ds);
    all.sort_unstable();
    let expected_train = (0.8 * ds.len() as f64).round() as usize;
    let bad = (0..50u64)
        .filter(|&seed| {
            let split = random_split(&ds, 0.8, seed).unwrap();
            let mut union = key(&split.train);
            union.extend(key(&split.test));
            union.sort_unstable();
            let disjoint = union.windows(2).all(|w| w[0] != w[1]);
            !(disjoint && union == all && split.train.len() == expected_train)
        })
        .count();
    o.check(
        "6.split",
        bad == 0,
        format!("80:20 split is a partition of the ratings with round(0.8·|R|) in train, 50 seeds ({bad} violations)"),
    );
}
