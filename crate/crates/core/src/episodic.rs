//! K-way N-shot episodes over the novel split, cosine nearest-prototype
//! classification and accuracy reports.
//!
//! Features are extracted once per image and shared by every episode;
//! episode `i` draws from a generator seeded by `(seed, i)`, so episodes
//! can run in any order or in parallel with identical results.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::data::SplitSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelState;
use crate::seeding;

/// Episode shape and count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalParams {
    /// Ways.
    pub k: usize,
    /// Shots.
    pub n: usize,
    /// Queries per class.
    pub q: usize,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            k: 5,
            n: 1,
            q: 15,
            n_episodes: 600,
            seed: 0,
        }
    }
}

/// Indices into the split: `support[c]` and `queries[c]` belong to
/// `classes[c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
    pub episode_seed: u64,
}

impl Episode {
    pub fn n_queries(&self) -> usize {
        self.queries.iter().map(Vec::len).sum()
    }
}

/// Draws `k` classes without replacement, then `n + q` images without
/// replacement per class (first `n` support, rest queries).
pub fn sample_episode(set: &SplitSet, k: usize, n: usize, q: usize, rng: &mut impl Rng) -> Result<Episode> {
    sample_from_groups(set, &set.indices_by_class(), k, n, q, rng)
}

fn sample_from_groups(
    set: &SplitSet,
    by_class: &[Vec<usize>],
    k: usize,
    n: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if k == 0 || n == 0 || q == 0 {
        return Err(Error::InvalidArgument(format!("K, N and Q must be >= 1 (got {k}, {n}, {q})")));
    }
    if by_class.len() < k {
        return Err(Error::Data(format!(
            "episode needs {k} classes, split has {}",
            by_class.len()
        )));
    }
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() < n + q) {
        return Err(Error::Data(format!(
            "class {} has {} images, episode needs {}",
            set.class_names[c],
            idx.len(),
            n + q
        )));
    }
    let mut classes = index::sample(rng, by_class.len(), k).into_vec();
    classes.shuffle(rng);
    let mut support = Vec::with_capacity(k);
    let mut queries = Vec::with_capacity(k);
    for &c in &classes {
        let pool = &by_class[c];
        let picks: Vec<usize> = index::sample(rng, pool.len(), n + q).into_iter().map(|i| pool[i]).collect();
        support.push(picks[..n].to_vec());
        queries.push(picks[n..].to_vec());
    }
    Ok(Episode {
        classes,
        support,
        queries,
        episode_seed: 0,
    })
}

/// Class prototypes: the mean of the (unnormalized) support features.
pub fn prototypes(support_features: &[Vec<&[f64]>]) -> Result<Vec<Vec<f64>>> {
    support_features
        .iter()
        .map(|shots| {
            let first = shots
                .first()
                .ok_or_else(|| Error::InvalidArgument("class without support features".into()))?;
            let mut p = vec![0.0; first.len()];
            for f in shots {
                if f.len() != p.len() {
                    return Err(Error::Shape(format!("support features of length {} and {}", p.len(), f.len())));
                }
                for (a, b) in p.iter_mut().zip(f.iter()) {
                    *a += b;
                }
            }
            let inv = 1.0 / shots.len() as f64;
            p.iter_mut().for_each(|v| *v *= inv);
            Ok(p)
        })
        .collect()
}

/// Prototypes of `episode`, extracting support features with `model`.
pub fn compute_prototypes(episode: &Episode, set: &SplitSet, model: &ModelState) -> Result<Vec<Vec<f64>>> {
    let feats = episode
        .support
        .iter()
        .map(|shots| {
            let imgs: Vec<&Image> = shots.iter().map(|&i| &set.images[i]).collect();
            model.extract_features(&imgs, imgs.len())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<&[f64]>> = feats.iter().map(|c| c.iter().map(Vec::as_slice).collect()).collect();
    prototypes(&refs)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Softmax over cosine similarities to each prototype. A zero prototype has
/// similarity 0.
pub fn classify_query(query: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::InvalidArgument("query feature is all zero; cosine similarity undefined".into()));
    }
    if prototypes.iter().all(|p| norm(p) == 0.0) {
        return Err(Error::InvalidArgument("every prototype is all zero".into()));
    }
    let sims = prototypes
        .iter()
        .map(|p| {
            if p.len() != query.len() {
                return Err(Error::Shape(format!("query of length {} vs prototype {}", query.len(), p.len())));
            }
            let pn = norm(p);
            Ok(if pn == 0.0 {
                0.0
            } else {
                query.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (qn * pn)
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Outcome of one episode: per-query probabilities in episode class order
/// (queries grouped by class) and the fraction classified correctly.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub accuracy: f64,
    pub probabilities: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode_accuracies: Vec<f64>,
}

/// Mean and sample standard deviation; the deviation of fewer than two
/// values is 0.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    /// `ci95 = 1.96 · sd / √n`.
    pub fn from_accuracies(params: &EvalParams, accuracies: Vec<f64>) -> Self {
        let (mean, sd) = mean_and_std(&accuracies);
        let n = accuracies.len();
        Self {
            k: params.k,
            n: params.n,
            q: params.q,
            n_episodes: n,
            mean_accuracy: mean,
            ci95: 1.96 * sd / (n as f64).sqrt(),
            per_episode_accuracies: accuracies,
        }
    }

    /// `episode,accuracy` rows followed by a `mean,<value>` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,accuracy\n");
        for (i, a) in self.per_episode_accuracies.iter().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        let _ = writeln!(s, "mean,{}", self.mean_accuracy);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "K={}\nN={}\nQ={}\nn_episodes={}\nmean={}\nci95={}\n",
            self.k, self.n, self.q, self.n_episodes, self.mean_accuracy, self.ci95
        )
    }
}

/// Episodes of an evaluation run, each drawn from its own
/// `(seed, episode index)` generator.
pub fn sample_episodes(set: &SplitSet, params: &EvalParams) -> Result<Vec<Episode>> {
    if set.is_empty() {
        return Err(Error::Data("novel split is empty; nothing to evaluate".into()));
    }
    let by_class = set.indices_by_class();
    (0..params.n_episodes)
        .map(|i| {
            let episode_seed = seeding::derive_seed(params.seed, &[i as u64]);
            let mut rng = seeding::stream(params.seed, &[i as u64]);
            let mut ep = sample_from_groups(set, &by_class, params.k, params.n, params.q, &mut rng)?;
            ep.episode_seed = episode_seed;
            Ok(ep)
        })
        .collect()
}

/// Runs one episode over precomputed per-image features.
pub fn run_episode(episode: &Episode, features: &[Vec<f64>]) -> Result<EpisodeResult> {
    let support: Vec<Vec<&[f64]>> = episode
        .support
        .iter()
        .map(|s| s.iter().map(|&i| features[i].as_slice()).collect())
        .collect();
    let protos = prototypes(&support)?;
    let mut correct = 0usize;
    let mut probabilities = Vec::with_capacity(episode.n_queries());
    for (c, qs) in episode.queries.iter().enumerate() {
        for &i in qs {
            let p = classify_query(&features[i], &protos)?;
            if crate::argmax(&p) == c {
                correct += 1;
            }
            probabilities.push(p);
        }
    }
    Ok(EpisodeResult {
        accuracy: correct as f64 / episode.n_queries() as f64,
        probabilities,
    })
}

/// Thread cap from `CFSL_THREADS` (unset or invalid means no cap).
pub fn thread_cap() -> Option<usize> {
    std::env::var("CFSL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `episodes` in parallel (bounded by `CFSL_THREADS`); results are in
/// episode order.
pub fn run_episodes(episodes: &[Episode], features: &[Vec<f64>]) -> Result<Vec<EpisodeResult>> {
    let work = || episodes.par_iter().map(|e| run_episode(e, features)).collect::<Result<Vec<_>>>();
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Pooled features of every image in `set`.
pub fn split_features(model: &ModelState, set: &SplitSet) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Image> = set.images.iter().collect();
    model.extract_features(&refs, 64)
}

/// Full evaluation: per-episode results plus the aggregate report.
pub fn evaluate_detailed(
    set: &SplitSet,
    model: &ModelState,
    params: &EvalParams,
) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let episodes = sample_episodes(set, params)?;
    let features = split_features(model, set)?;
    let results = run_episodes(&episodes, &features)?;
    let report = EvalReport::from_accuracies(params, results.iter().map(|r| r.accuracy).collect());
    Ok((report, results))
}

pub fn evaluate(set: &SplitSet, model: &ModelState, params: &EvalParams) -> Result<EvalReport> {
    Ok(evaluate_detailed(set, model, params)?.0)
}
