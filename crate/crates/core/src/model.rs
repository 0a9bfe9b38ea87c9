//! Convolutional backbone, cosine classifier and self-supervision heads.
//!
//! The backbone is a stack of `conv3x3 → relu → 2× average pool` blocks.
//! Its last block's output is the spatial map `A(x)` (one `h_f × w_f` map per
//! channel); the pooled feature `f(x)` is the spatial mean of that map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{inv_norm, Graph, NodeId};
use crate::image::{stack, Image};
use crate::permutations::{is_bijection, PermutationSet};
use crate::tensor::Tensor;

/// Number of rotation classes (0°, 90°, 180°, 270°).
pub const N_ROTATIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each conv block; the last entry is the feature
    /// dimension `D`.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub n_classes: usize,
    pub tau: f64,
    /// Split grid `(rows, cols)` for the permutation task.
    pub grid: (usize, usize),
    pub n_perms: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            kernel: 3,
            n_classes: 20,
            tau: 30.0,
            grid: (2, 2),
            n_perms: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[k, k, c_in, c_out]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub convs: Vec<ConvBlock>,
    /// Unconstrained classifier parameter `[D, M]`; the effective weight is
    /// its elementwise absolute value.
    pub classifier_raw: Tensor,
    pub tau: f64,
    /// `[rows·cols·D, M_s]`
    pub perm_head: Tensor,
    /// `[D, 4]`
    pub rot_head: Tensor,
    pub perms: PermutationSet,
    pub grid: (usize, usize),
}

/// Forward result for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOutput {
    /// `[h_f, w_f, D]`, all entries ≥ 0.
    pub spatial_map: Tensor,
    /// Spatial mean of `spatial_map`, length `D`.
    pub feature: Vec<f64>,
    /// `feature / ‖feature‖`, or zeros for a zero feature.
    pub feature_normalized: Vec<f64>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// He-uniform, for layers followed by a ReLU.
fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn uniform(shape: &[usize], s: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-s..=s)).collect()).unwrap()
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let inv = inv_norm(v);
    v.iter().map(|x| x * inv).collect()
}

impl ModelState {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid conv widths {:?}", cfg.widths)));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} must be odd", cfg.kernel)));
        }
        if cfg.n_classes == 0 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        let n_tiles = cfg.grid.0 * cfg.grid.1;
        let perms = PermutationSet::generate(n_tiles, cfg.n_perms, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let mut convs = Vec::with_capacity(cfg.widths.len());
        let mut cin = cfg.in_channels;
        for &cout in &cfg.widths {
            convs.push(ConvBlock {
                weight: he(&[k, k, cin, cout], k * k * cin, &mut rng),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let d = cin;
        let m = cfg.n_classes;
        Ok(Self {
            convs,
            classifier_raw: glorot(&[d, m], d, m, &mut rng),
            tau: cfg.tau,
            perm_head: glorot(&[n_tiles * d, cfg.n_perms], n_tiles * d, cfg.n_perms, &mut rng),
            rot_head: glorot(&[d, N_ROTATIONS], d, N_ROTATIONS, &mut rng),
            perms,
            grid: cfg.grid,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier_raw.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.classifier_raw.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].weight.shape()[2]
    }

    pub fn n_tiles(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Effective classifier weight `W = |W_raw|`, shape `[D, M]`.
    pub fn effective_weight(&self) -> Tensor {
        self.classifier_raw.map(f64::abs)
    }

    /// Trainable tensors in a fixed order (matches [`ModelVars::params`]).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.extend([&self.classifier_raw, &self.perm_head, &self.rot_head]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend([&mut self.classifier_raw, &mut self.perm_head, &mut self.rot_head]);
        out
    }

    /// Checks an image (or batch) shape against the backbone.
    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "model expects {} input channels, image has {c}",
                self.in_channels()
            )));
        }
        let div = 1usize << self.convs.len();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by 2^{} = {div}",
                self.convs.len()
            )));
        }
        Ok(())
    }

    /// Adds every parameter to `g` as a leaf (gradient-enabled when
    /// `trainable`).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            convs.push((
                g.leaf(c.weight.clone(), trainable)?,
                g.leaf(c.bias.clone(), trainable)?,
            ));
        }
        Ok(ModelVars {
            convs,
            classifier_raw: g.leaf(self.classifier_raw.clone(), trainable)?,
            perm_head: g.leaf(self.perm_head.clone(), trainable)?,
            rot_head: g.leaf(self.rot_head.clone(), trainable)?,
            tau: self.tau,
            effective_weight: None,
        })
    }

    /// Runs the backbone on a `[B, H, W, C]` batch without recording
    /// gradients. Returns the spatial maps `[B, h_f, w_f, D]` and pooled
    /// features `[B, D]`.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind_backbone(&mut g)?;
        let x = g.constant(batch.clone())?;
        let out = vars.features(&mut g, x)?;
        Ok((g.value(out.spatial).clone(), g.value(out.feature).clone()))
    }

    fn bind_backbone(&self, g: &mut Graph) -> Result<ModelVars> {
        // Heads are tiny; binding them keeps one code path.
        self.bind(g, false)
    }

    pub fn forward_features(&self, x: &Image) -> Result<FeatureOutput> {
        let batch = stack(&[x])?;
        let (maps, feats) = self.forward_batch(&batch)?;
        let s = maps.shape();
        let spatial_map = maps.clone().reshape(&s[1..])?;
        let feature = feats.data().to_vec();
        let feature_normalized = normalized(&feature);
        Ok(FeatureOutput {
            spatial_map,
            feature,
            feature_normalized,
        })
    }

    /// Pooled features for many images, processed in chunks of `batch`.
    pub fn extract_features(&self, images: &[&Image], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let (_, feats) = self.forward_batch(&stack(chunk)?)?;
            let d = feats.shape()[1];
            out.extend(feats.data().chunks_exact(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Cosine logits `τ · (W^c_{:,i})ᵀ f^c` for every known class.
    pub fn classify_known(&self, f: &FeatureOutput) -> Result<Vec<f64>> {
        self.classify_feature(&f.feature)
    }

    /// As [`Self::classify_known`] for a raw pooled feature.
    pub fn classify_feature(&self, feature: &[f64]) -> Result<Vec<f64>> {
        cosine_logits(&self.effective_weight(), feature, self.tau)
    }

    /// Reorders `split_features` by `perm` (segment `i` of the concatenation
    /// is `split_features[perm[i]]`) and applies the split head.
    pub fn predict_permutation(&self, split_features: &[Vec<f64>], perm: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_tiles();
        let d = self.feature_dim();
        if split_features.len() != n || perm.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} split features and a length-{n} ordering, got {} and {}",
                split_features.len(),
                perm.len()
            )));
        }
        if !is_bijection(perm) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let mut fs = Vec::with_capacity(n * d);
        for &p in perm {
            if split_features[p].len() != d {
                return Err(Error::Shape(format!(
                    "split feature has length {}, expected {d}",
                    split_features[p].len()
                )));
            }
            fs.extend_from_slice(&split_features[p]);
        }
        Ok(vec_mat(&fs, &self.perm_head))
    }

    /// Rotation logits from a pooled (unnormalized) feature.
    pub fn predict_rotation(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature has length {}, expected {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(vec_mat(feature, &self.rot_head))
    }
}

/// `vᵀ · M` for `M: [len(v), n]`.
fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut out = vec![0.0; cols];
    for (i, &vi) in v.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(m.row(i)) {
            *o += vi * w;
        }
    }
    out
}

/// `τ · (W^c_{:,i})ᵀ f^c` for each column `i` of `weight: [D, M]`.
pub fn cosine_logits(weight: &Tensor, feature: &[f64], tau: f64) -> Result<Vec<f64>> {
    let (d, m) = (weight.shape()[0], weight.shape()[1]);
    if feature.len() != d {
        return Err(Error::Shape(format!("feature has length {}, expected {d}", feature.len())));
    }
    let fc = normalized(feature);
    Ok((0..m)
        .map(|i| {
            let col = weight.column(i);
            let wc = normalized(&col);
            tau * wc.iter().zip(&fc).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

/// Model parameters bound into a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub convs: Vec<(NodeId, NodeId)>,
    pub classifier_raw: NodeId,
    pub perm_head: NodeId,
    pub rot_head: NodeId,
    pub tau: f64,
    effective_weight: Option<NodeId>,
}

/// Graph nodes produced by the backbone for a batch.
#[derive(Clone, Copy, Debug)]
pub struct FeatureNodes {
    /// `[B, h_f, w_f, D]`
    pub spatial: NodeId,
    /// `[B, D]`
    pub feature: NodeId,
    /// `[B, D]`, rows L2-normalized.
    pub normalized: NodeId,
}

impl ModelVars {
    /// Parameter leaves in the order of [`ModelState::params`].
    pub fn params(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in &self.convs {
            out.push(w);
            out.push(b);
        }
        out.extend([self.classifier_raw, self.perm_head, self.rot_head]);
        out
    }

    /// Replaces parameter `index` (in [`Self::params`] order) with `node`.
    pub fn set_param(&mut self, index: usize, node: NodeId) -> Result<()> {
        let n_conv = 2 * self.convs.len();
        match index {
            i if i < n_conv => {
                let c = &mut self.convs[i / 2];
                if i % 2 == 0 {
                    c.0 = node;
                } else {
                    c.1 = node;
                }
            }
            i if i == n_conv => {
                self.classifier_raw = node;
                self.effective_weight = None;
            }
            i if i == n_conv + 1 => self.perm_head = node,
            i if i == n_conv + 2 => self.rot_head = node,
            _ => return Err(Error::InvalidArgument(format!("parameter index {index} out of range"))),
        }
        Ok(())
    }

    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<FeatureNodes> {
        let mut h = x;
        for &(w, b) in &self.convs {
            h = g.conv2d(h, w, b)?;
            h = g.relu(h)?;
            h = g.avg_pool2(h)?;
        }
        let feature = g.global_avg_pool(h)?;
        let normalized = g.l2_normalize(feature)?;
        Ok(FeatureNodes {
            spatial: h,
            feature,
            normalized,
        })
    }

    /// The `|W_raw|` node, created once per graph.
    pub fn effective_weight(&mut self, g: &mut Graph) -> Result<NodeId> {
        if let Some(w) = self.effective_weight {
            return Ok(w);
        }
        let w = g.abs(self.classifier_raw)?;
        self.effective_weight = Some(w);
        Ok(w)
    }

    /// Cosine logits `[B, M]` from normalized features `[B, D]`.
    pub fn known_logits(&mut self, g: &mut Graph, normalized: NodeId) -> Result<NodeId> {
        let w = self.effective_weight(g)?;
        let wt = g.transpose(w)?;
        let wc_t = g.l2_normalize(wt)?;
        let wc = g.transpose(wc_t)?;
        let cos = g.matmul(normalized, wc)?;
        g.scale(cos, self.tau)
    }

    /// Split-head logits `[B, M_s]` from tile features `[B·n, D]` that are
    /// already arranged in permuted order per image.
    pub fn permutation_logits(&self, g: &mut Graph, tile_features: NodeId, n_tiles: usize) -> Result<NodeId> {
        let s = g.shape(tile_features).to_vec();
        if s.len() != 2 || s[0] % n_tiles != 0 {
            return Err(Error::Shape(format!(
                "tile features {s:?} do not group into {n_tiles} tiles per image"
            )));
        }
        let fs = g.reshape(tile_features, &[s[0] / n_tiles, n_tiles * s[1]])?;
        g.matmul(fs, self.perm_head)
    }

    pub fn rotation_logits(&self, g: &mut Graph, feature: NodeId) -> Result<NodeId> {
        g.matmul(feature, self.rot_head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8],
            n_classes: 3,
            ..ModelConfig::default()
        }
    }

    fn random_image(h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![h, h, 3], (0..h * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_image_gives_zero_feature() {
        let m = ModelState::init(&ModelConfig::default()).unwrap();
        let out = m.forward_features(&Tensor::zeros(&[32, 32, 3])).unwrap();
        assert_eq!(out.spatial_map.shape(), &[2, 2, 64]);
        assert!(out.feature.iter().all(|&v| v == 0.0));
        assert!(out.feature_normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_is_spatial_mean_of_map() {
        let m = ModelState::init(&small_cfg()).unwrap();
        let out = m.forward_features(&random_image(8, 1)).unwrap();
        let s = out.spatial_map.shape().to_vec();
        let d = s[2];
        for j in 0..d {
            let mean: f64 = (0..s[0] * s[1]).map(|p| out.spatial_map.data()[p * d + j]).sum::<f64>()
                / (s[0] * s[1]) as f64;
            assert_abs_diff_eq!(mean, out.feature[j], epsilon = 1e-15);
        }
        assert!(out.spatial_map.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let a = ModelState::init(&small_cfg()).unwrap();
        let b = ModelState::init(&small_cfg()).unwrap();
        let x = random_image(8, 5);
        assert_eq!(a.forward_features(&x).unwrap(), b.forward_features(&x).unwrap());
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = ModelState::init(&small_cfg()).unwrap();
        let x = Tensor::zeros(&[8, 8, 1]);
        assert!(m.check_input(8, 8, 1).is_err());
        assert!(m.forward_features(&x).is_err());
        assert!(m.check_input(6, 8, 3).is_err());
    }

    #[test]
    fn logit_equals_tau_when_feature_matches_column() {
        let m = ModelState::init(&small_cfg()).unwrap();
        let w = m.effective_weight();
        let col = w.column(1);
        let logits = m.classify_feature(&col).unwrap();
        assert_abs_diff_eq!(logits[1], 30.0, epsilon = 1e-12);
        assert!(logits.iter().all(|&l| (0.0..=30.0 + 1e-12).contains(&l)));
        assert_eq!(m.classify_feature(&[0.0; 8]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn graph_logits_match_direct_computation() {
        let m = ModelState::init(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let mut vars = m.bind(&mut g, false).unwrap();
        let fx = g.constant(Tensor::new(vec![1, 8], f.clone()).unwrap()).unwrap();
        let fc = g.l2_normalize(fx).unwrap();
        let l = vars.known_logits(&mut g, fc).unwrap();
        let direct = m.classify_feature(&f).unwrap();
        for (a, b) in g.value(l).data().iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn split_head_input_has_tiles_times_dim() {
        let m = ModelState::init(&ModelConfig {
            widths: vec![2],
            ..small_cfg()
        })
        .unwrap();
        assert_eq!(m.perm_head.shape(), &[8, 24]);
        let feats: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0]).collect();
        let permuted: Vec<Vec<f64>> = [2, 0, 3, 1].iter().map(|&i| feats[i].clone()).collect();
        let a = m.predict_permutation(&feats, &[2, 0, 3, 1]).unwrap();
        let b = m.predict_permutation(&permuted, &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert!(m.predict_permutation(&feats, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn rotation_head_is_linear() {
        let m = ModelState::init(&small_cfg()).unwrap();
        assert_eq!(m.predict_rotation(&[0.0; 8]).unwrap(), vec![0.0; 4]);
        let f: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let r = m.predict_rotation(&f).unwrap();
        for k in 0..4 {
            let oracle: f64 = (0..8).map(|j| f[j] * m.rot_head.data()[j * 4 + k]).sum();
            assert_abs_diff_eq!(r[k], oracle, epsilon = 1e-12);
        }
    }
}
