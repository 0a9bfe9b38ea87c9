//! Flat `key=value` run configuration covering data generation, model,
//! training, loss weights, evaluation and analysis.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::{parse_key_values, SynthSpec};
use crate::episodic::EvalParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Parameters of the analysis commands.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisParams {
    /// Retained-channel counts for the ablation curves.
    pub ks: Vec<usize>,
    pub n_bins: usize,
    pub bin_samples: usize,
    pub k_f: usize,
    pub k_w: usize,
    /// Image index (within its split) for `heatmap`, `influence`, `overlap`.
    pub image: usize,
    /// Heatmap channel; `None` for the feature-weighted sum.
    pub channel: Option<usize>,
    pub seed: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8, 16, 32, 64],
            n_bins: 32,
            bin_samples: 1000,
            k_f: 15,
            k_w: 5,
            image: 0,
            channel: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    /// `n_classes` and `in_channels` are taken from the dataset at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
    pub analysis: AnalysisParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalParams::default(),
            analysis: AnalysisParams::default(),
        }
    }
}

/// Every key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("n_parts", "synthetic part vocabulary size"),
    ("parts_per_class", "parts composing each synthetic class"),
    ("n_known", "known classes"),
    ("n_novel", "novel classes"),
    ("images_per_class", "images rendered per class"),
    ("heldout_per_class", "known-class images held out from training"),
    ("image_size", "synthetic image side in pixels"),
    ("noise_std", "Gaussian pixel noise"),
    ("jitter", "maximum part offset in pixels (0 disables all render jitter)"),
    ("color_jitter", "per-channel part intensity range"),
    ("clutter", "distractor shapes per image"),
    ("data_seed", "synthetic dataset seed"),
    ("widths", "conv block widths, comma separated; the last is the feature dimension"),
    ("kernel", "conv kernel size (odd)"),
    ("tau", "cosine classifier temperature"),
    ("grid_rows", "split rows for the order task"),
    ("grid_cols", "split columns for the order task"),
    ("n_perms", "orderings in the permutation set"),
    ("seed", "model initialization and training seed"),
    ("lr0", "initial learning rate"),
    ("milestones", "0-based epochs where the learning rate drops, comma separated"),
    ("lr_drop_factor", "learning-rate multiplier at each milestone"),
    ("momentum", "Nesterov momentum"),
    ("weight_decay", "L2 weight decay"),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size"),
    ("flip_prob", "horizontal flip probability"),
    ("brightness_delta", "maximum brightness shift"),
    ("alpha1", "split-order loss weight"),
    ("alpha2", "enlarging-reducing loss weight"),
    ("lambda1", "enlarging coefficient"),
    ("lambda2", "reducing coefficient"),
    ("d_star", "channels enlarged per class"),
    ("sparseness_weight", "classifier column sparseness weight"),
    ("rotation_weight", "rotation loss weight"),
    ("k_way", "classes per episode"),
    ("n_shot", "support images per class"),
    ("n_query", "query images per class"),
    ("n_episodes", "episodes per evaluation"),
    ("eval_seed", "episode sampling seed"),
    ("ks", "retained-channel counts for ablations, comma separated"),
    ("n_bins", "bins of the weight/activation profile"),
    ("bin_samples", "known images sampled for the bin profile"),
    ("k_f", "top feature channels for overlap"),
    ("k_w", "top weight channels for overlap"),
    ("image", "image index for heatmap, influence and overlap"),
    ("channel", "heatmap channel, or 'sum' for the weighted sum"),
    ("analysis_seed", "sampling seed for analysis"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key; `-` in the key is read as `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        let (s, m, t, e, a) = (
            &mut self.synth,
            &mut self.model,
            &mut self.train,
            &mut self.eval,
            &mut self.analysis,
        );
        let w = &mut t.loss_weights;
        match k {
            "n_parts" => s.n_parts = parse(k, value)?,
            "parts_per_class" => s.parts_per_class = parse(k, value)?,
            "n_known" => s.n_known = parse(k, value)?,
            "n_novel" => s.n_novel = parse(k, value)?,
            "images_per_class" => s.images_per_class = parse(k, value)?,
            "heldout_per_class" => s.heldout_per_class = parse(k, value)?,
            "image_size" => s.image_size = parse(k, value)?,
            "noise_std" => s.noise_std = parse(k, value)?,
            "jitter" => s.jitter = parse(k, value)?,
            "color_jitter" => s.color_jitter = parse(k, value)?,
            "clutter" => s.clutter = parse(k, value)?,
            "data_seed" => s.seed = parse(k, value)?,
            "widths" => m.widths = parse_list(k, value)?,
            "kernel" => m.kernel = parse(k, value)?,
            "tau" => m.tau = parse(k, value)?,
            "grid_rows" => m.grid.0 = parse(k, value)?,
            "grid_cols" => m.grid.1 = parse(k, value)?,
            "n_perms" => m.n_perms = parse(k, value)?,
            "seed" => {
                m.seed = parse(k, value)?;
                t.seed = m.seed;
            }
            "lr0" => t.lr0 = parse(k, value)?,
            "milestones" => t.milestones = parse_list(k, value)?,
            "lr_drop_factor" => t.lr_drop_factor = parse(k, value)?,
            "momentum" => t.momentum = parse(k, value)?,
            "weight_decay" => t.weight_decay = parse(k, value)?,
            "epochs" => t.epochs = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "flip_prob" => t.augmentation.flip_prob = parse(k, value)?,
            "brightness_delta" => t.augmentation.brightness_delta = parse(k, value)?,
            "alpha1" => w.alpha1 = parse(k, value)?,
            "alpha2" => w.alpha2 = parse(k, value)?,
            "lambda1" => w.lambda1 = parse(k, value)?,
            "lambda2" => w.lambda2 = parse(k, value)?,
            "d_star" => w.d_star = parse(k, value)?,
            "sparseness_weight" => w.sparseness_weight = parse(k, value)?,
            "rotation_weight" => w.rotation_weight = parse(k, value)?,
            "k_way" => e.k = parse(k, value)?,
            "n_shot" => e.n = parse(k, value)?,
            "n_query" => e.q = parse(k, value)?,
            "n_episodes" => e.n_episodes = parse(k, value)?,
            "eval_seed" => e.seed = parse(k, value)?,
            "ks" => a.ks = parse_list(k, value)?,
            "n_bins" => a.n_bins = parse(k, value)?,
            "bin_samples" => a.bin_samples = parse(k, value)?,
            "k_f" => a.k_f = parse(k, value)?,
            "k_w" => a.k_w = parse(k, value)?,
            "image" => a.image = parse(k, value)?,
            "channel" => {
                a.channel = match value.trim() {
                    "sum" | "" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "analysis_seed" => a.seed = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (s, m, t, e, a) = (&self.synth, &self.model, &self.train, &self.eval, &self.analysis);
        let w = &t.loss_weights;
        Some(match key {
            "n_parts" => s.n_parts.to_string(),
            "parts_per_class" => s.parts_per_class.to_string(),
            "n_known" => s.n_known.to_string(),
            "n_novel" => s.n_novel.to_string(),
            "images_per_class" => s.images_per_class.to_string(),
            "heldout_per_class" => s.heldout_per_class.to_string(),
            "image_size" => s.image_size.to_string(),
            "noise_std" => s.noise_std.to_string(),
            "jitter" => s.jitter.to_string(),
            "color_jitter" => s.color_jitter.to_string(),
            "clutter" => s.clutter.to_string(),
            "data_seed" => s.seed.to_string(),
            "widths" => list(&m.widths),
            "kernel" => m.kernel.to_string(),
            "tau" => m.tau.to_string(),
            "grid_rows" => m.grid.0.to_string(),
            "grid_cols" => m.grid.1.to_string(),
            "n_perms" => m.n_perms.to_string(),
            "seed" => t.seed.to_string(),
            "lr0" => t.lr0.to_string(),
            "milestones" => list(&t.milestones),
            "lr_drop_factor" => t.lr_drop_factor.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "flip_prob" => t.augmentation.flip_prob.to_string(),
            "brightness_delta" => t.augmentation.brightness_delta.to_string(),
            "alpha1" => w.alpha1.to_string(),
            "alpha2" => w.alpha2.to_string(),
            "lambda1" => w.lambda1.to_string(),
            "lambda2" => w.lambda2.to_string(),
            "d_star" => w.d_star.to_string(),
            "sparseness_weight" => w.sparseness_weight.to_string(),
            "rotation_weight" => w.rotation_weight.to_string(),
            "k_way" => e.k.to_string(),
            "n_shot" => e.n.to_string(),
            "n_query" => e.q.to_string(),
            "n_episodes" => e.n_episodes.to_string(),
            "eval_seed" => e.seed.to_string(),
            "ks" => list(&a.ks),
            "n_bins" => a.n_bins.to_string(),
            "bin_samples" => a.bin_samples.to_string(),
            "k_f" => a.k_f.to_string(),
            "k_w" => a.k_w.to_string(),
            "image" => a.image.to_string(),
            "channel" => a.channel.map_or("sum".into(), |c| c.to_string()),
            "analysis_seed" => a.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
