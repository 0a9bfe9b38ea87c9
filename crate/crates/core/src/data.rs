//! Datasets: the synthetic part-composition generator and the plain-text
//! PNM folder format.
//!
//! On disk a dataset is `<root>/<split>/<class_name>/<image>.ppm|.pgm` with
//! splits `known_train`, `known_heldout` and `novel`, plus an optional
//! `manifest.txt` of `key=value` lines. Pixels are stored as 8-bit plain
//! PNM (P3 colour, P2 grey); values are quantized to `round(255·v)/255`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    KnownTrain,
    KnownHeldout,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::KnownTrain, Split::KnownHeldout, Split::Novel];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::KnownTrain => "known_train",
            Split::KnownHeldout => "known_heldout",
            Split::Novel => "novel",
        }
    }
}

/// Images of one split with labels indexing `class_names`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl SplitSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Image indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    fn validate(&self, split: Split) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{}: {} images but {} labels",
                split.dir_name(),
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_names.len()) {
            return Err(Error::Data(format!(
                "{}: label {y} but only {} classes",
                split.dir_name(),
                self.class_names.len()
            )));
        }
        for img in &self.images {
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("{}: pixel outside [0, 1]", split.dir_name())));
            }
        }
        Ok(())
    }
}

/// Known classes (train and held-out images) and disjoint novel classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub known_train: SplitSet,
    pub known_heldout: SplitSet,
    pub novel: SplitSet,
}

impl Dataset {
    /// Validates labels, pixel range, a shared known class list and
    /// disjointness of known and novel class names.
    pub fn new(known_train: SplitSet, known_heldout: SplitSet, novel: SplitSet) -> Result<Self> {
        known_train.validate(Split::KnownTrain)?;
        known_heldout.validate(Split::KnownHeldout)?;
        novel.validate(Split::Novel)?;
        if !known_heldout.is_empty() && known_heldout.class_names != known_train.class_names {
            return Err(Error::Data(
                "known_heldout classes differ from known_train classes".into(),
            ));
        }
        let known: BTreeSet<&String> = known_train.class_names.iter().collect();
        if let Some(shared) = novel.class_names.iter().find(|c| known.contains(c)) {
            return Err(Error::Data(format!("class {shared} is both known and novel")));
        }
        let ds = Self {
            known_train,
            known_heldout,
            novel,
        };
        if let Some(shape) = ds.image_shape() {
            for split in Split::ALL {
                if let Some(img) = ds.split(split).images.iter().find(|i| i.shape() != shape.as_slice()) {
                    return Err(Error::Data(format!(
                        "{}: image shape {:?} differs from {:?}",
                        split.dir_name(),
                        img.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &SplitSet {
        match split {
            Split::KnownTrain => &self.known_train,
            Split::KnownHeldout => &self.known_heldout,
            Split::Novel => &self.novel,
        }
    }

    pub fn image_shape(&self) -> Option<Vec<usize>> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).images.first())
            .map(|i| i.shape().to_vec())
            .next()
    }
}

// ── synthetic generator ─────────────────────────────────────────────────

/// Parameters of the synthetic part-composition dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Size of the part vocabulary.
    pub n_parts: usize,
    pub parts_per_class: usize,
    pub n_known: usize,
    pub n_novel: usize,
    pub images_per_class: usize,
    /// Images per known class placed in `known_heldout` (taken out of
    /// `images_per_class`).
    pub heldout_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// Maximum position offset in pixels. Zero renders every part at its
    /// nominal cell at full intensity and disables clutter.
    pub jitter: usize,
    /// Per-channel intensity of a part is drawn from `[1 - color_jitter, 1]`.
    pub color_jitter: f64,
    /// Distractor shapes drawn at random positions in every image.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_parts: 12,
            parts_per_class: 3,
            n_known: 20,
            n_novel: 10,
            images_per_class: 50,
            heldout_per_class: 10,
            image_size: 32,
            noise_std: 0.1,
            jitter: 2,
            color_jitter: 0.3,
            clutter: 1,
            seed: 0,
        }
    }
}

const STAMP: i64 = 3; // stamps cover [-3, 3]²
const N_SHAPES: usize = 12;
const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.3, 0.45, 1.0],
    [1.0, 0.9, 0.2],
    [0.2, 0.9, 1.0],
    [0.95, 0.3, 1.0],
];

/// Coverage of shape `kind` at offset `(dy, dx)` from the part centre.
fn shape_mask(kind: usize, dy: i64, dx: i64) -> bool {
    let r = ((dy * dy + dx * dx) as f64).sqrt();
    match kind % N_SHAPES {
        0 => dy.abs() <= 1,                             // horizontal bar
        1 => dx.abs() <= 1,                             // vertical bar
        2 => (dx - dy).abs() <= 1,                      // falling diagonal
        3 => (dx + dy).abs() <= 1,                      // rising diagonal
        4 => (2.0..=3.3).contains(&r) && dy <= 0,       // upper arc
        5 => (2.0..=3.3).contains(&r) && dy >= 0,       // lower arc
        6 => dy <= -2 || dx <= -2,                      // top-left corner
        7 => dy >= 2 || dx >= 2,                        // bottom-right corner
        8 => r <= 2.6,                                  // blob
        9 => (2.0..=3.3).contains(&r),                  // ring
        10 => dx == 0 || dy == 0,                       // cross
        _ => (dx + dy).rem_euclid(2) == 0,              // checker
    }
}

/// A part: a stamp shape at a nominal cell, drawn in the cell's colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub shape: usize,
    pub cell: usize,
    pub center: (i64, i64),
    pub color: [f64; 3],
}

/// Part layout: parts come in pairs sharing a nominal cell (and colour) but
/// differing in shape, so telling them apart needs shape, not position.
pub fn part_layout(spec: &SynthSpec) -> Vec<Part> {
    let n_cells = spec.n_parts.div_ceil(2);
    let lattice = (n_cells as f64).sqrt().ceil() as usize;
    let step = spec.image_size / lattice.max(1);
    let mut rng = seeding::stream(spec.seed, &[0x9a27]);
    let mut shapes: Vec<usize> = (0..N_SHAPES).collect();
    shapes.shuffle(&mut rng);
    (0..spec.n_parts)
        .map(|p| {
            let cell = p / 2;
            let (cy, cx) = (cell / lattice, cell % lattice);
            Part {
                shape: shapes[p % N_SHAPES],
                cell,
                center: ((cy * step + step / 2) as i64, (cx * step + step / 2) as i64),
                color: PALETTE[cell % PALETTE.len()],
            }
        })
        .collect()
}

fn class_name(prefix: char, index: usize, parts: &[usize]) -> String {
    let mut s = format!("{prefix}{index:02}");
    for p in parts {
        let _ = write!(s, "_p{p:02}");
    }
    s
}

/// All part combinations with no two parts in the same cell, in
/// lexicographic order.
fn valid_combinations(layout: &[Part], k: usize) -> Vec<Vec<usize>> {
    fn rec(layout: &[Part], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for p in start..layout.len() {
            if cur.iter().any(|&q| layout[q].cell == layout[p].cell) {
                continue;
            }
            cur.push(p);
            rec(layout, k, p + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(layout, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Class part-lists: `(known, novel)`. Novel classes are unseen
/// combinations made only of parts used by some known class.
pub fn class_compositions(spec: &SynthSpec) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if spec.parts_per_class == 0 || spec.n_parts < spec.parts_per_class {
        return Err(Error::InvalidArgument(format!(
            "n_parts ({}) must be >= parts_per_class ({}) >= 1",
            spec.n_parts, spec.parts_per_class
        )));
    }
    if spec.n_parts > 64 {
        return Err(Error::InvalidArgument(format!("n_parts {} exceeds 64", spec.n_parts)));
    }
    let layout = part_layout(spec);
    let mut combos = valid_combinations(&layout, spec.parts_per_class);
    let mut rng = seeding::stream(spec.seed, &[0xc1a5]);
    combos.shuffle(&mut rng);
    if combos.len() < spec.n_known + spec.n_novel {
        return Err(Error::InvalidArgument(format!(
            "combination space exhausted: {} classes requested, {} part combinations exist",
            spec.n_known + spec.n_novel,
            combos.len()
        )));
    }
    let known: Vec<Vec<usize>> = combos[..spec.n_known].to_vec();
    let seen: BTreeSet<usize> = known.iter().flatten().copied().collect();
    let novel: Vec<Vec<usize>> = combos[spec.n_known..]
        .iter()
        .filter(|c| c.iter().all(|p| seen.contains(p)))
        .take(spec.n_novel)
        .cloned()
        .collect();
    if novel.len() < spec.n_novel {
        return Err(Error::InvalidArgument(format!(
            "combination space exhausted: only {} novel classes can be built from known parts, {} requested",
            novel.len(),
            spec.n_novel
        )));
    }
    Ok((known, novel))
}

fn stamp(px: &mut [f64], n: usize, shape: usize, center: (i64, i64), color: [f64; 3]) {
    for dy in -STAMP..=STAMP {
        for dx in -STAMP..=STAMP {
            if !shape_mask(shape, dy, dx) {
                continue;
            }
            let (y, x) = (center.0 + dy, center.1 + dx);
            if y < 0 || x < 0 || y >= n as i64 || x >= n as i64 {
                continue;
            }
            let o = (y as usize * n + x as usize) * 3;
            for c in 0..3 {
                px[o + c] = f64::max(px[o + c], color[c]);
            }
        }
    }
}

fn render(spec: &SynthSpec, layout: &[Part], parts: &[usize], rng: &mut impl Rng) -> Result<Image> {
    let n = spec.image_size;
    let mut px = vec![0.0f64; n * n * 3];
    let j = spec.jitter as i64;
    if j > 0 {
        for _ in 0..spec.clutter {
            let shape = rng.random_range(0..N_SHAPES);
            let center = (rng.random_range(0..n as i64), rng.random_range(0..n as i64));
            let gain = rng.random_range(0.5..=1.0);
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            stamp(&mut px, n, shape, center, base.map(|c| c * gain));
        }
    }
    for &p in parts {
        let part = &layout[p];
        let (center, color) = if j > 0 {
            let (oy, ox) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            let gain = rng.random_range(0.7..=1.0);
            let mut color = part.color;
            for c in &mut color {
                let cj = if spec.color_jitter > 0.0 {
                    rng.random_range(1.0 - spec.color_jitter..=1.0)
                } else {
                    1.0
                };
                *c *= gain * cj;
            }
            ((part.center.0 + oy, part.center.1 + ox), color)
        } else {
            (part.center, part.color)
        };
        stamp(&mut px, n, part.shape, center, color);
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std)
            .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
        for v in &mut px {
            *v += normal.sample(rng);
        }
    }
    for v in &mut px {
        *v = quantize(*v);
    }
    Tensor::new(vec![n, n, 3], px)
}

/// Clamps to `[0, 1]` and rounds to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates the dataset described by `spec`. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.image_size < 8 {
        return Err(Error::InvalidArgument(format!("image_size {} below 8", spec.image_size)));
    }
    if spec.heldout_per_class > spec.images_per_class {
        return Err(Error::InvalidArgument(format!(
            "heldout_per_class ({}) exceeds images_per_class ({})",
            spec.heldout_per_class, spec.images_per_class
        )));
    }
    if !(0.0..=1.0).contains(&spec.color_jitter) {
        return Err(Error::InvalidArgument(format!("color_jitter {} outside [0, 1]", spec.color_jitter)));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", spec.noise_std)));
    }
    let layout = part_layout(spec);
    let (known, novel) = class_compositions(spec)?;

    let known_names: Vec<String> = known.iter().enumerate().map(|(i, c)| class_name('k', i, c)).collect();
    let novel_names: Vec<String> = novel.iter().enumerate().map(|(i, c)| class_name('n', i, c)).collect();
    let mut train = SplitSet {
        class_names: known_names.clone(),
        ..Default::default()
    };
    let mut heldout = SplitSet {
        class_names: known_names,
        ..Default::default()
    };
    let mut novel_set = SplitSet {
        class_names: novel_names,
        ..Default::default()
    };
    let n_train = spec.images_per_class - spec.heldout_per_class;
    for (label, parts) in known.iter().enumerate() {
        let mut rng = seeding::stream(spec.seed, &[1, label as u64]);
        for i in 0..spec.images_per_class {
            let img = render(spec, &layout, parts, &mut rng)?;
            let target = if i < n_train { &mut train } else { &mut heldout };
            target.images.push(img);
            target.labels.push(label);
        }
    }
    for (label, parts) in novel.iter().enumerate() {
        let mut rng = seeding::stream(spec.seed, &[2, label as u64]);
        for _ in 0..spec.images_per_class {
            novel_set.images.push(render(spec, &layout, parts, &mut rng)?);
            novel_set.labels.push(label);
        }
    }
    if heldout.is_empty() {
        heldout.class_names = train.class_names.clone();
    }
    Dataset::new(train, heldout, novel_set)
}

impl SynthSpec {
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("n_parts".into(), self.n_parts.to_string()),
            ("parts_per_class".into(), self.parts_per_class.to_string()),
            ("n_known".into(), self.n_known.to_string()),
            ("n_novel".into(), self.n_novel.to_string()),
            ("images_per_class".into(), self.images_per_class.to_string()),
            ("heldout_per_class".into(), self.heldout_per_class.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("noise_std".into(), self.noise_std.to_string()),
            ("jitter".into(), self.jitter.to_string()),
            ("color_jitter".into(), self.color_jitter.to_string()),
            ("clutter".into(), self.clutter.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

// ── PNM folder I/O ──────────────────────────────────────────────────────

/// Encodes an `[H, W, 1]` or `[H, W, 3]` image as plain PGM (P2) / PPM (P3).
pub fn encode_pnm(img: &Image) -> Result<String> {
    let (h, w, c) = match img.shape() {
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        s => return Err(Error::Shape(format!("PNM export needs [H, W, 1|3], found {s:?}"))),
    };
    let mut s = String::with_capacity(h * w * c * 4 + 32);
    let _ = writeln!(s, "{}\n{w} {h}\n255", if c == 3 { "P3" } else { "P2" });
    for y in 0..h {
        let row = &img.data()[y * w * c..(y + 1) * w * c];
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

/// Decodes plain PGM (P2) or PPM (P3) text into `[H, W, C]` with values
/// `v / maxval`.
pub fn decode_pnm(text: &str, path: &Path) -> Result<Image> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let magic = tokens.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let c = match magic {
        "P2" => 1,
        "P3" => 3,
        other => return Err(Error::format(path, format!("unsupported magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::format(path, format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|e| Error::format(path, format!("bad {what}: {e}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    let n = w * h * c;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = num("pixel")?;
        if v > maxval {
            return Err(Error::format(path, format!("pixel {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / maxval as f64);
    }
    if tokens.next().is_some() {
        return Err(Error::format(path, "trailing data after pixels"));
    }
    Tensor::new(vec![h, w, c], data)
}

/// Writes `dataset` under `root` (see module docs). `manifest`, when given,
/// is written to `root/manifest.txt`.
pub fn export_folder(dataset: &Dataset, root: &Path, manifest: Option<&[(String, String)]>) -> Result<()> {
    for split in Split::ALL {
        let set = dataset.split(split);
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut counters = vec![0usize; set.n_classes()];
        let by_class = set.indices_by_class();
        for (label, name) in set.class_names.iter().enumerate() {
            if split == Split::KnownHeldout && by_class[label].is_empty() {
                continue;
            }
            let cdir = dir.join(name);
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        }
        for (img, &y) in set.images.iter().zip(&set.labels) {
            let ext = if img.shape().get(2) == Some(&1) { "pgm" } else { "ppm" };
            let path = dir.join(&set.class_names[y]).join(format!("{:04}.{ext}", counters[y]));
            counters[y] += 1;
            fs::write(&path, encode_pnm(img)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(kv) = manifest {
        let path = root.join("manifest.txt");
        let body: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn load_split(dir: &Path) -> Result<SplitSet> {
    let mut set = SplitSet::default();
    if !dir.exists() {
        return Ok(set);
    }
    let mut shape: Option<(Vec<usize>, std::path::PathBuf)> = None;
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&class_dir, "class directory name is not UTF-8"))?
            .to_string();
        let label = set.class_names.len();
        set.class_names.push(name);
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let img = decode_pnm(&text, &file)?;
            match &shape {
                Some((s, first)) if s.as_slice() != img.shape() => {
                    return Err(Error::format(
                        &file,
                        format!("image shape {:?} differs from {:?} of {}", img.shape(), s, first.display()),
                    ))
                }
                None => shape = Some((img.shape().to_vec(), file.clone())),
                _ => {}
            }
            set.images.push(img);
            set.labels.push(label);
        }
    }
    Ok(set)
}

/// Reads a dataset folder. Class indices follow sorted class-directory
/// names within each split; a missing split directory is an empty split.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let train = load_split(&root.join(Split::KnownTrain.dir_name()))?;
    let mut heldout = load_split(&root.join(Split::KnownHeldout.dir_name()))?;
    let novel = load_split(&root.join(Split::Novel.dir_name()))?;
    if heldout.is_empty() {
        heldout.class_names = train.class_names.clone();
    }
    Dataset::new(train, heldout, novel)
}

/// Parses `key=value` lines (blank lines and `#` comments ignored).
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
