//! Channel-level diagnostics: influence of a channel on a cosine match,
//! top-k feature and weight ablations, weight/activation bin profiles,
//! activation heatmaps and primitive overlap sets.

use std::fmt::Write as _;

use rand::seq::index;

use crate::data::SplitSet;
use crate::episodic::{run_episodes, sample_episodes, split_features, EvalParams};
use crate::error::{Error, Result};
use crate::image::{rotate90, tiles, Image};
use crate::losses::top_k_indices;
use crate::model::{cosine_logits, ModelState, N_ROTATIONS};
use crate::seeding;
use crate::tensor::Tensor;

/// Share of channel `k` in the cosine similarity of two normalized features.
pub fn influence(fq: &[f64], fs: &[f64], k: usize) -> Result<f64> {
    if k >= fq.len() {
        return Err(Error::InvalidArgument(format!("channel {k} out of range for dimension {}", fq.len())));
    }
    Ok(influences(fq, fs)?[k])
}

/// Influence of every channel; sums to 1.
pub fn influences(fq: &[f64], fs: &[f64]) -> Result<Vec<f64>> {
    if fq.len() != fs.len() {
        return Err(Error::Shape(format!("features of length {} and {}", fq.len(), fs.len())));
    }
    let terms: Vec<f64> = fq.iter().zip(fs).map(|(a, b)| a * b).collect();
    let sim: f64 = terms.iter().sum();
    if sim == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity is zero; influence undefined".into()));
    }
    Ok(terms.into_iter().map(|t| t / sim).collect())
}

/// `Acc_k / Acc_all` per retained-channel count; `None` where the ablated
/// evaluation is undefined (e.g. all-zero features at `k = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCurve {
    pub ks: Vec<usize>,
    pub portions: Vec<Option<f64>>,
}

impl AblationCurve {
    pub fn portion_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).and_then(|i| self.portions[i])
    }

    /// `k,portion` rows; undefined points are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,portion\n");
        for (k, p) in self.ks.iter().zip(&self.portions) {
            match p {
                Some(p) => writeln!(s, "{k},{p}"),
                None => writeln!(s, "{k},undefined"),
            }
            .unwrap();
        }
        s
    }
}

/// Keeps the `k` largest entries (ties to the lower index), zeroes the rest.
pub fn keep_top_k(v: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in top_k_indices(v, k) {
        out[i] = v[i];
    }
    out
}

fn check_ks(ks: &[usize], d: usize) -> Result<()> {
    match ks.iter().find(|&&k| k > d) {
        Some(k) => Err(Error::InvalidArgument(format!("k = {k} exceeds feature dimension {d}"))),
        None => Ok(()),
    }
}

/// Feature ablation over precomputed features of `set`.
pub fn feature_ablation_from_features(
    set: &SplitSet,
    features: &[Vec<f64>],
    params: &EvalParams,
    ks: &[usize],
) -> Result<AblationCurve> {
    let d = features.first().map_or(0, Vec::len);
    check_ks(ks, d)?;
    let episodes = sample_episodes(set, params)?;
    let mean = |feats: &[Vec<f64>]| -> Result<f64> {
        let r = run_episodes(&episodes, feats)?;
        Ok(r.iter().map(|e| e.accuracy).sum::<f64>() / r.len() as f64)
    };
    let acc_all = mean(features)?;
    if acc_all == 0.0 {
        return Err(Error::InvalidArgument("unablated accuracy is zero; portions undefined".into()));
    }
    let portions = ks
        .iter()
        .map(|&k| {
            let masked: Vec<Vec<f64>> = features.iter().map(|f| keep_top_k(f, k)).collect();
            Ok(mean(&masked).ok().map(|acc| acc / acc_all))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationCurve {
        ks: ks.to_vec(),
        portions,
    })
}

/// Every support and query feature keeps its `k` most active channels;
/// episodes are identical across `k`.
pub fn topk_feature_ablation(
    model: &ModelState,
    novel: &SplitSet,
    params: &EvalParams,
    ks: &[usize],
) -> Result<AblationCurve> {
    check_ks(ks, model.feature_dim())?;
    let features = split_features(model, novel)?;
    feature_ablation_from_features(novel, &features, params, ks)
}

/// Effective weight with each column reduced to its `k` largest entries.
pub fn top_k_weight(model: &ModelState, k: usize) -> Tensor {
    let w = model.effective_weight();
    let (d, m) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[d, m]);
    for j in 0..m {
        for i in top_k_indices(&w.column(j), k) {
            out.data_mut()[i * m + j] = w.data()[i * m + j];
        }
    }
    out
}

fn accuracy_with_weight(weight: &Tensor, tau: f64, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (f, &y) in features.iter().zip(labels) {
        if crate::argmax(&cosine_logits(weight, f, tau)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Known-class accuracy on `known` with classifier columns reduced to their
/// top `k` entries, relative to the full classifier.
pub fn topk_weight_ablation(model: &ModelState, known: &SplitSet, ks: &[usize]) -> Result<AblationCurve> {
    check_ks(ks, model.feature_dim())?;
    if known.is_empty() {
        return Err(Error::Data("weight ablation needs held-out known images".into()));
    }
    let features = split_features(model, known)?;
    let acc_all = accuracy_with_weight(&model.effective_weight(), model.tau, &features, &known.labels)?;
    if acc_all == 0.0 {
        return Err(Error::InvalidArgument("unablated accuracy is zero; portions undefined".into()));
    }
    let portions = ks
        .iter()
        .map(|&k| {
            accuracy_with_weight(&top_k_weight(model, k), model.tau, &features, &known.labels).map(|a| Some(a / acc_all))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationCurve {
        ks: ks.to_vec(),
        portions,
    })
}

/// Mean classifier weight and activation per bin of channels sorted by
/// weight, each max-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct BinProfile {
    pub n_bins: usize,
    pub w_bins: Vec<f64>,
    pub f_bins: Vec<f64>,
}

impl BinProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,w_mean,f_mean\n");
        for (i, (w, f)) in self.w_bins.iter().zip(&self.f_bins).enumerate() {
            writeln!(s, "{i},{w},{f}").unwrap();
        }
        s
    }

    /// Top weight bin over the median weight bin (infinite if the median is 0).
    pub fn w_top_to_median(&self) -> f64 {
        let mut v = self.w_bins.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 0 { 0.5 * (v[n / 2 - 1] + v[n / 2]) } else { v[n / 2] };
        v[n - 1] / median
    }
}

/// Bin boundaries: bin `b` covers `[b·D/n, (b+1)·D/n)`.
fn bin_ranges(d: usize, n_bins: usize) -> Vec<(usize, usize)> {
    (0..n_bins).map(|b| (b * d / n_bins, (b + 1) * d / n_bins)).collect()
}

fn max_normalize(v: &mut [f64]) {
    let mx = v.iter().cloned().fold(0.0, f64::max);
    if mx > 0.0 {
        v.iter_mut().for_each(|x| *x /= mx);
    }
}

/// Bin profile from explicit `(W column, feature)` pairs.
pub fn bin_profile(pairs: &[(Vec<f64>, Vec<f64>)], n_bins: usize) -> Result<BinProfile> {
    let (first_w, _) = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("bin profile needs at least one sample".into()))?;
    let d = first_w.len();
    if n_bins == 0 || d < n_bins {
        return Err(Error::InvalidArgument(format!("{n_bins} bins for {d} channels")));
    }
    let ranges = bin_ranges(d, n_bins);
    let mut w_bins = vec![0.0; n_bins];
    let mut f_bins = vec![0.0; n_bins];
    for (w, f) in pairs {
        if w.len() != d || f.len() != d {
            return Err(Error::Shape(format!("weight column {} and feature {} for {d} channels", w.len(), f.len())));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
        for (b, &(lo, hi)) in ranges.iter().enumerate() {
            let inv = 1.0 / (hi - lo) as f64;
            w_bins[b] += order[lo..hi].iter().map(|&i| w[i]).sum::<f64>() * inv;
            f_bins[b] += order[lo..hi].iter().map(|&i| f[i]).sum::<f64>() * inv;
        }
    }
    let inv = 1.0 / pairs.len() as f64;
    w_bins.iter_mut().chain(f_bins.iter_mut()).for_each(|v| *v *= inv);
    max_normalize(&mut w_bins);
    max_normalize(&mut f_bins);
    Ok(BinProfile { n_bins, w_bins, f_bins })
}

/// Uniform sample (without replacement) of up to `count` image indices.
pub fn sample_indices(n_total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeding::stream(seed, &[0xb125]);
    let mut v = index::sample(&mut rng, n_total, count.min(n_total)).into_vec();
    v.sort_unstable();
    v
}

/// Weight/activation bins over the given images of `set` (each paired with
/// its class column of the effective weight).
pub fn weight_activation_bins(
    model: &ModelState,
    set: &SplitSet,
    indices: &[usize],
    n_bins: usize,
) -> Result<BinProfile> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("weight/activation bins need at least one sample".into()));
    }
    let w = model.effective_weight();
    let imgs: Vec<&Image> = indices.iter().map(|&i| &set.images[i]).collect();
    let feats = model.extract_features(&imgs, 64)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = indices
        .iter()
        .zip(feats)
        .map(|(&i, f)| (w.column(set.labels[i]), f))
        .collect();
    bin_profile(&pairs, n_bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// `Σ_j f_j · A_j`.
    Weighted,
    /// The single activation map `A_j`.
    Channel(usize),
}

/// A feature-map-resolution heatmap: the raw map and its min-max
/// normalization (all zeros for a constant map).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[h_f, w_f]`
    pub raw: Tensor,
    pub normalized: Tensor,
}

impl Heatmap {
    /// Nearest-neighbour upsampling of the normalized map to `[h, w, 1]`.
    pub fn upsampled(&self, h: usize, w: usize) -> Image {
        let (hf, wf) = (self.normalized.shape()[0], self.normalized.shape()[1]);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.normalized.data()[(y * hf / h) * wf + x * wf / w]);
            }
        }
        Tensor::new(vec![h, w, 1], out).expect("heatmap shape")
    }

    /// Raw values as `row,col,value` CSV.
    pub fn raw_csv(&self) -> String {
        let wf = self.raw.shape()[1];
        let mut s = String::from("row,col,value\n");
        for (i, v) in self.raw.data().iter().enumerate() {
            writeln!(s, "{},{},{v}", i / wf, i % wf).unwrap();
        }
        s
    }
}

/// Heatmap from a spatial map `[h, w, D]` and pooled feature.
pub fn heatmap_from_map(map: &Tensor, feature: &[f64], mode: HeatmapMode) -> Result<Heatmap> {
    let s = map.shape();
    if s.len() != 3 || s[2] != feature.len() {
        return Err(Error::Shape(format!("map {:?} with feature of length {}", s, feature.len())));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    if let HeatmapMode::Channel(j) = mode {
        if j >= d {
            return Err(Error::InvalidArgument(format!("channel {j} out of range for dimension {d}")));
        }
    }
    let raw: Vec<f64> = map
        .data()
        .chunks_exact(d)
        .map(|a| match mode {
            HeatmapMode::Weighted => a.iter().zip(feature).map(|(x, f)| x * f).sum(),
            HeatmapMode::Channel(j) => a[j],
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<f64> = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(Heatmap {
        raw: Tensor::new(vec![h, w], raw)?,
        normalized: Tensor::new(vec![h, w], normalized)?,
    })
}

pub fn heatmap(model: &ModelState, x: &Image, mode: HeatmapMode) -> Result<Heatmap> {
    let out = model.forward_features(x)?;
    heatmap_from_map(&out.spatial_map, &out.feature, mode)
}

/// Channels both among the `k_f` most active of `novel_feature` and the
/// `k_w` largest weights of known class `class`, ascending.
pub fn primitive_overlap(
    model: &ModelState,
    novel_feature: &[f64],
    class: usize,
    k_f: usize,
    k_w: usize,
) -> Result<Vec<usize>> {
    if class >= model.n_classes() {
        return Err(Error::InvalidArgument(format!("class {class} out of range for {} classes", model.n_classes())));
    }
    if novel_feature.len() != model.feature_dim() {
        return Err(Error::Shape(format!(
            "feature has length {}, expected {}",
            novel_feature.len(),
            model.feature_dim()
        )));
    }
    Ok(overlap(novel_feature, &model.effective_weight().column(class), k_f, k_w))
}

/// `T(f, k_f) ∩ T(w, k_w)`, ascending.
pub fn overlap(f: &[f64], w: &[f64], k_f: usize, k_w: usize) -> Vec<usize> {
    let tw = top_k_indices(w, k_w);
    let mut out: Vec<usize> = top_k_indices(f, k_f).into_iter().filter(|i| tw.contains(i)).collect();
    out.sort_unstable();
    out
}

/// Accuracy of the split head over every ordering of every image, and of
/// the rotation head over every quarter turn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfSupervisionAccuracy {
    pub permutation: f64,
    pub rotation: f64,
}

pub fn self_supervision_accuracy(model: &ModelState, set: &SplitSet) -> Result<SelfSupervisionAccuracy> {
    if set.is_empty() {
        return Err(Error::Data("self-supervision accuracy needs images".into()));
    }
    let (rows, cols) = model.grid;
    let n = model.n_tiles();
    let mut tile_imgs = Vec::with_capacity(set.len() * n);
    let mut rot_imgs = Vec::with_capacity(set.len() * N_ROTATIONS);
    for img in &set.images {
        tile_imgs.extend(tiles(img, rows, cols)?);
        for r in 0..N_ROTATIONS {
            rot_imgs.push(rotate90(img, r)?);
        }
    }
    let tile_feats = model.extract_features(&tile_imgs.iter().collect::<Vec<_>>(), 64)?;
    let rot_feats = model.extract_features(&rot_imgs.iter().collect::<Vec<_>>(), 64)?;

    let mut perm_correct = 0usize;
    for per_image in tile_feats.chunks_exact(n) {
        for (pid, perm) in model.perms.perms().iter().enumerate() {
            if crate::argmax(&model.predict_permutation(per_image, perm)?) == pid {
                perm_correct += 1;
            }
        }
    }
    let mut rot_correct = 0usize;
    for (i, f) in rot_feats.iter().enumerate() {
        if crate::argmax(&model.predict_rotation(f)?) == i % N_ROTATIONS {
            rot_correct += 1;
        }
    }
    Ok(SelfSupervisionAccuracy {
        permutation: perm_correct as f64 / (set.len() * model.perms.len()) as f64,
        rotation: rot_correct as f64 / rot_feats.len() as f64,
    })
}
