//! Known-class training: shuffled mini-batches, flip/brightness
//! augmentation, Nesterov SGD with a step learning-rate schedule.
//!
//! Every random draw for an example (augmentation, permutation id, rotation)
//! comes from a generator seeded by `(seed, epoch, example index)`, and the
//! epoch's shuffle from `(seed, epoch)`, so a run is a pure function of its
//! configuration.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SplitSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{hflip, shift_brightness, Image};
use crate::losses::{build_objective, LossBreakdown, LossWeights, ObjectiveBatch};
use crate::model::{ModelConfig, ModelState, N_ROTATIONS};
use crate::optim::NesterovSgd;
use crate::seeding;

const SHUFFLE_STREAM: u64 = 0x5f1e;
const EXAMPLE_STREAM: u64 = 0xe4a1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_prob: f64,
    pub brightness_delta: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_delta: 0.2,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            brightness_delta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// 0-based epochs at which the rate is multiplied by `lr_drop_factor`.
    pub milestones: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            milestones: vec![25, 35],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            loss_weights: LossWeights::default(),
            augmentation: Augmentation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.epochs > 0 {
            if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
                return bad(format!("milestone {m} must be < epochs ({})", self.epochs));
            }
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.flip_prob) {
            return bad(format!("flip_prob must be in [0, 1], got {}", a.flip_prob));
        }
        if !(a.brightness_delta >= 0.0) {
            return bad(format!("brightness_delta must be >= 0, got {}", a.brightness_delta));
        }
        Ok(())
    }

    /// Learning rate of 0-based `epoch`: `lr0 · drop^#{milestones ≤ epoch}`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr0 * self.lr_drop_factor.powi(k as i32)
    }
}

/// Random horizontal flip, then a uniform brightness shift in
/// `[-delta, delta]`, clamped to `[0, 1]`.
pub fn augment(x: &Image, aug: &Augmentation, rng: &mut impl Rng) -> Result<Image> {
    let flip = aug.flip_prob > 0.0 && rng.random::<f64>() < aug.flip_prob;
    let delta = if aug.brightness_delta > 0.0 {
        rng.random_range(-aug.brightness_delta..=aug.brightness_delta)
    } else {
        0.0
    };
    let out = if flip { hflip(x)? } else { x.clone() };
    Ok(if delta != 0.0 { shift_brightness(&out, delta) } else { out })
}

/// Per-epoch means over all training examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub train_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_cls,loss_split,loss_rot,loss_er,loss_sparse,train_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, l.total, l.classification, l.split, l.rotation, l.er, l.sparseness, self.train_acc
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub metrics: Vec<EpochMetrics>,
}

/// Initializes a model for `set` and trains it. `observer` sees the
/// initial model as epoch 0 (with no metrics) and then each finished epoch.
pub fn train(
    set: &SplitSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: impl FnMut(usize, &ModelState, Option<&EpochMetrics>) -> Result<()>,
) -> Result<TrainOutcome> {
    if model_cfg.n_classes != set.n_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the training split has {}",
            model_cfg.n_classes,
            set.n_classes()
        )));
    }
    let model = ModelState::init(model_cfg)?;
    train_from(model, set, cfg, observer)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_from(
    mut model: ModelState,
    set: &SplitSet,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &ModelState, Option<&EpochMetrics>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.loss_weights.validate(model.feature_dim())?;
    if set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if set.n_classes() != model.n_classes() {
        return Err(Error::Data(format!(
            "training split has {} classes, model expects {}",
            set.n_classes(),
            model.n_classes()
        )));
    }
    for (label, idx) in set.indices_by_class().iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Data(format!("class {} has no training images", set.class_names[label])));
        }
    }
    let s = set.images[0].shape();
    model.check_input(s[0], s[1], s[2])?;

    observer(0, &model, None)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut opt = NesterovSgd::new(&sizes, cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let n = set.len();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));

        let mut sums = LossBreakdown::default();
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut perm_ids = Vec::with_capacity(chunk.len());
            let mut rotations = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = seeding::stream(cfg.seed, &[EXAMPLE_STREAM, epoch as u64, i as u64]);
                images.push(augment(&set.images[i], &cfg.augmentation, &mut rng)?);
                perm_ids.push(rng.random_range(0..model.perms.len()));
                rotations.push(rng.random_range(0..N_ROTATIONS));
            }
            let batch = ObjectiveBatch {
                images: images.iter().collect(),
                labels: chunk.iter().map(|&i| set.labels[i]).collect(),
                perm_ids,
                rotations,
            };

            let mut g = Graph::new();
            let mut vars = model.bind(&mut g, true)?;
            let nodes = build_objective(&mut g, &mut vars, &model, &batch, &cfg.loss_weights)?;
            g.backward(nodes.total)?;

            let b = chunk.len() as f64;
            let br = nodes.breakdown(&g);
            if !br.total.is_finite() {
                return Err(Error::NonFinite(format!("loss diverged at epoch {}", epoch + 1)));
            }
            sums.total += br.total * b;
            sums.classification += br.classification * b;
            sums.split += br.split * b;
            sums.rotation += br.rotation * b;
            sums.er += br.er * b;
            sums.sparseness += br.sparseness * b;
            let logits = g.value(nodes.logits);
            let m = model.n_classes();
            for (r, &y) in batch.labels.iter().enumerate() {
                if crate::argmax(&logits.data()[r * m..(r + 1) * m]) == y {
                    correct += 1;
                }
            }

            // Heads outside the objective (zero-weight terms) get a zero
            // gradient, so weight decay still applies to them.
            let grads: Vec<_> = vars
                .params()
                .into_iter()
                .map(|id| g.grad(id).unwrap_or_else(|| crate::tensor::Tensor::zeros(g.shape(id))))
                .collect();
            let grad_refs: Vec<&_> = grads.iter().collect();
            opt.step(&mut model.params_mut(), &grad_refs, lr)?;
        }

        let inv = 1.0 / n as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            losses: LossBreakdown {
                total: sums.total * inv,
                classification: sums.classification * inv,
                split: sums.split * inv,
                rotation: sums.rotation * inv,
                er: sums.er * inv,
                sparseness: sums.sparseness * inv,
            },
            train_acc: correct as f64 * inv,
        };
        observer(epoch + 1, &model, Some(&m))?;
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Top-1 accuracy of the cosine classifier on `set`.
pub fn known_accuracy(model: &ModelState, set: &SplitSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("accuracy requested on an empty split".into()));
    }
    let refs: Vec<&Image> = set.images.iter().collect();
    let feats = model.extract_features(&refs, 64)?;
    let mut correct = 0usize;
    for (f, &y) in feats.iter().zip(&set.labels) {
        if crate::argmax(&model.classify_feature(f)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
