//! Training objectives.
//!
//! Each objective exists twice: as a plain function over values (used by
//! analysis code and as the reference in tests) and as part of the batched
//! graph builder [`build_objective`] used for training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::{rotate90, stack, tiles, Image};
use crate::model::{ModelState, ModelVars, N_ROTATIONS};
use crate::tensor::Tensor;

/// Weights of the auxiliary objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Split-order (permutation) loss weight.
    pub alpha1: f64,
    /// Enlarging-reducing loss weight.
    pub alpha2: f64,
    /// Enlarging coefficient for the top-`d_star` channels.
    pub lambda1: f64,
    /// Reducing coefficient for the remaining channels.
    pub lambda2: f64,
    pub d_star: usize,
    pub sparseness_weight: f64,
    pub rotation_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.1,
            lambda1: 1.0,
            lambda2: 0.5,
            d_star: 5,
            sparseness_weight: 0.1,
            rotation_weight: 0.5,
        }
    }
}

impl LossWeights {
    /// Plain cosine-classifier training.
    pub fn baseline() -> Self {
        Self {
            alpha1: 0.0,
            alpha2: 0.0,
            sparseness_weight: 0.0,
            rotation_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let named = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("sparseness_weight", self.sparseness_weight),
            ("rotation_weight", self.rotation_weight),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.d_star == 0 || self.d_star > feature_dim {
            return Err(Error::InvalidArgument(format!(
                "d_star must lie in 1..={feature_dim}, got {}",
                self.d_star
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries of `v`, ties going to the lower index.
/// Returned in descending order of value.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `−log softmax(logits)_y`.
pub fn classification_loss(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[y])
}

/// `−λ1 Σ_{j∈T} f_j + λ2 Σ_{j∉T} f_j` with `T` the top-`d_star` entries of
/// column `y` of the effective weight `w: [D, M]`.
pub fn er_loss(f: &[f64], w: &Tensor, y: usize, lambda1: f64, lambda2: f64, d_star: usize) -> Result<f64> {
    let coeffs = er_coefficients(w, y, lambda1, lambda2, d_star)?;
    if f.len() != coeffs.len() {
        return Err(Error::Shape(format!(
            "feature has length {}, weight has {} rows",
            f.len(),
            coeffs.len()
        )));
    }
    Ok(f.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
}

/// Per-channel ER coefficients for class `y`: `−λ1` on the selected
/// channels, `+λ2` elsewhere.
pub fn er_coefficients(w: &Tensor, y: usize, lambda1: f64, lambda2: f64, d_star: usize) -> Result<Vec<f64>> {
    let (d, m) = match w.shape() {
        &[d, m] => (d, m),
        s => return Err(Error::Shape(format!("weight must be [D, M], found {s:?}"))),
    };
    if y >= m {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {m} classes")));
    }
    if d_star == 0 || d_star > d {
        return Err(Error::InvalidArgument(format!("d_star {d_star} outside 1..={d}")));
    }
    let mut coeffs = vec![lambda2; d];
    for j in top_k_indices(&w.column(y), d_star) {
        coeffs[j] = -lambda1;
    }
    Ok(coeffs)
}

/// `(1/M) Σ_i ‖W_{:,i}‖₁`.
pub fn sparseness_loss(w: &Tensor) -> f64 {
    let m = w.shape()[1];
    w.data().iter().map(|v| v.abs()).sum::<f64>() / m as f64
}

/// Per-term values of the combined objective. `total` is
/// `classification + α1·split + α2·er + sparseness_weight·sparseness +
/// rotation_weight·rotation`; terms whose weight is zero are reported as 0
/// for the self-supervised heads (they are not evaluated).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub split: f64,
    pub rotation: f64,
    pub er: f64,
    pub sparseness: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.classification
            + w.alpha1 * self.split
            + w.alpha2 * self.er
            + w.sparseness_weight * self.sparseness
            + w.rotation_weight * self.rotation
    }
}

/// One mini-batch with its self-supervision labels already drawn.
#[derive(Clone, Debug)]
pub struct ObjectiveBatch<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<usize>,
    /// Index into the model's permutation set, one per image.
    pub perm_ids: Vec<usize>,
    /// Quarter turns in `0..4`, one per image.
    pub rotations: Vec<usize>,
}

/// Scalar nodes of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub classification: NodeId,
    pub split: Option<NodeId>,
    pub rotation: Option<NodeId>,
    pub er: NodeId,
    pub sparseness: NodeId,
    /// `[B, M]` known-class logits.
    pub logits: NodeId,
    pub split_logits: Option<NodeId>,
    pub rotation_logits: Option<NodeId>,
}

/// A scalar term of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveTerm {
    Classification,
    Split,
    Er,
    Sparseness,
    Rotation,
    Total,
}

impl ObjectiveTerm {
    pub const ALL: [ObjectiveTerm; 6] = [
        ObjectiveTerm::Classification,
        ObjectiveTerm::Split,
        ObjectiveTerm::Er,
        ObjectiveTerm::Sparseness,
        ObjectiveTerm::Rotation,
        ObjectiveTerm::Total,
    ];

    /// The term's node; `None` for a self-supervised term whose weight is 0.
    pub fn node(self, nodes: &ObjectiveNodes) -> Option<NodeId> {
        match self {
            ObjectiveTerm::Classification => Some(nodes.classification),
            ObjectiveTerm::Split => nodes.split,
            ObjectiveTerm::Er => Some(nodes.er),
            ObjectiveTerm::Sparseness => Some(nodes.sparseness),
            ObjectiveTerm::Rotation => nodes.rotation,
            ObjectiveTerm::Total => Some(nodes.total),
        }
    }
}

impl ObjectiveNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |id: NodeId| g.value(id).data()[0];
        LossBreakdown {
            total: v(self.total),
            classification: v(self.classification),
            split: self.split.map(v).unwrap_or(0.0),
            rotation: self.rotation.map(v).unwrap_or(0.0),
            er: v(self.er),
            sparseness: v(self.sparseness),
        }
    }
}

/// Split-loss input: for each image, its tiles in permuted order, stacked
/// into `[B·n, th, tw, C]`.
pub fn permuted_tile_batch(model: &ModelState, images: &[&Image], perm_ids: &[usize]) -> Result<Tensor> {
    let (rows, cols) = model.grid;
    let mut ordered: Vec<Image> = Vec::with_capacity(images.len() * rows * cols);
    for (img, &pid) in images.iter().zip(perm_ids) {
        let perm = model.perms.get(pid).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "permutation id {pid} out of range for {} orderings",
                model.perms.len()
            ))
        })?;
        let t = tiles(img, rows, cols)?;
        ordered.extend(perm.iter().map(|&p| t[p].clone()));
    }
    let refs: Vec<&Image> = ordered.iter().collect();
    stack(&refs)
}

pub fn rotated_batch(images: &[&Image], rotations: &[usize]) -> Result<Tensor> {
    let rotated = images
        .iter()
        .zip(rotations)
        .map(|(img, &r)| {
            if r >= N_ROTATIONS {
                return Err(Error::InvalidArgument(format!("rotation label {r} outside 0..4")));
            }
            rotate90(img, r)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = rotated.iter().collect();
    stack(&refs)
}

/// Builds the combined objective (batch means of every per-image term) in `g`.
pub fn build_objective(
    g: &mut Graph,
    vars: &mut ModelVars,
    model: &ModelState,
    batch: &ObjectiveBatch<'_>,
    weights: &LossWeights,
) -> Result<ObjectiveNodes> {
    let b = batch.images.len();
    if b == 0 || batch.labels.len() != b || batch.perm_ids.len() != b || batch.rotations.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} images with {} labels, {} permutation ids, {} rotations",
            batch.labels.len(),
            batch.perm_ids.len(),
            batch.rotations.len()
        )));
    }
    weights.validate(model.feature_dim())?;
    let inv_b = 1.0 / b as f64;
    let first = batch.images[0].shape();
    model.check_input(first[0], first[1], first[2])?;

    let x = g.constant(stack(&batch.images)?)?;
    let feats = vars.features(g, x)?;
    let logits = vars.known_logits(g, feats.normalized)?;
    let ce = g.softmax_cross_entropy(logits, &batch.labels)?;
    let classification = g.scale(ce, inv_b)?;

    // ER: the selection T(W_{:,y}, D*) is read off the current effective
    // weight and enters the graph as constant coefficients.
    let w_eff = model.effective_weight();
    let d = model.feature_dim();
    let mut coeffs = Vec::with_capacity(b * d);
    for &y in &batch.labels {
        let c = er_coefficients(&w_eff, y, weights.lambda1, weights.lambda2, weights.d_star)?;
        g.note_selection(&top_k_indices(&w_eff.column(y), weights.d_star));
        coeffs.extend(c.into_iter().map(|v| v * inv_b));
    }
    let er = g.weighted_sum(feats.feature, coeffs)?;

    let w_node = vars.effective_weight(g)?;
    let w_sum = g.sum(w_node)?;
    let sparseness = g.scale(w_sum, 1.0 / model.n_classes() as f64)?;

    let mut total = classification;
    let add_term = |g: &mut Graph, total: &mut NodeId, term: NodeId, w: f64| -> Result<()> {
        if w != 0.0 {
            let t = g.scale(term, w)?;
            *total = g.add(*total, t)?;
        }
        Ok(())
    };

    let (mut split, mut split_logits) = (None, None);
    if weights.alpha1 > 0.0 {
        let tiles_in = g.constant(permuted_tile_batch(model, &batch.images, &batch.perm_ids)?)?;
        let tf = vars.features(g, tiles_in)?;
        let logits_s = vars.permutation_logits(g, tf.feature, model.n_tiles())?;
        let ce_s = g.softmax_cross_entropy(logits_s, &batch.perm_ids)?;
        let term = g.scale(ce_s, inv_b)?;
        add_term(g, &mut total, term, weights.alpha1)?;
        split = Some(term);
        split_logits = Some(logits_s);
    }
    add_term(g, &mut total, er, weights.alpha2)?;
    add_term(g, &mut total, sparseness, weights.sparseness_weight)?;

    let (mut rotation, mut rotation_logits) = (None, None);
    if weights.rotation_weight > 0.0 {
        let rot_in = g.constant(rotated_batch(&batch.images, &batch.rotations)?)?;
        let rf = vars.features(g, rot_in)?;
        let logits_r = vars.rotation_logits(g, rf.feature)?;
        let ce_r = g.softmax_cross_entropy(logits_r, &batch.rotations)?;
        let term = g.scale(ce_r, inv_b)?;
        add_term(g, &mut total, term, weights.rotation_weight)?;
        rotation = Some(term);
        rotation_logits = Some(logits_r);
    }

    Ok(ObjectiveNodes {
        total,
        classification,
        split,
        rotation,
        er,
        sparseness,
        logits,
        split_logits,
        rotation_logits,
    })
}

/// Split-order loss of one image under ordering `sampled_perm_id`.
pub fn split_loss(x: &Image, model: &ModelState, sampled_perm_id: usize) -> Result<f64> {
    let (rows, cols) = model.grid;
    let t = tiles(x, rows, cols)?;
    let perm = model.perms.get(sampled_perm_id).ok_or_else(|| {
        Error::InvalidArgument(format!("permutation id {sampled_perm_id} out of range"))
    })?;
    let feats = t
        .iter()
        .map(|tile| model.forward_features(tile).map(|o| o.feature))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.predict_permutation(&feats, perm)?;
    classification_loss(&logits, sampled_perm_id)
}

/// Rotation loss of one square image rotated by `rot_label` quarter turns.
pub fn rotation_loss(x: &Image, model: &ModelState, rot_label: usize) -> Result<f64> {
    if rot_label >= N_ROTATIONS {
        return Err(Error::InvalidArgument(format!("rotation label {rot_label} outside 0..4")));
    }
    let r = rotate90(x, rot_label)?;
    let f = model.forward_features(&r)?;
    let logits = model.predict_rotation(&f.feature)?;
    classification_loss(&logits, rot_label)
}

/// Combined objective for a single labelled image, drawing its permutation
/// and rotation labels from `rng`.
pub fn total_loss(
    x: &Image,
    y: usize,
    model: &ModelState,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let batch = ObjectiveBatch {
        images: vec![x],
        labels: vec![y],
        perm_ids: vec![rng.random_range(0..model.perms.len())],
        rotations: vec![rng.random_range(0..N_ROTATIONS)],
    };
    let mut g = Graph::new();
    let mut vars = model.bind(&mut g, false)?;
    let nodes = build_objective(&mut g, &mut vars, model, &batch, weights)?;
    Ok(nodes.breakdown(&g))
}
