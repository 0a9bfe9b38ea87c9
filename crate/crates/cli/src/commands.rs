use std::fs;
use std::path::Path;

use cfsl::analysis::{self, HeatmapMode};
use cfsl::checkpoint;
use cfsl::config::RunConfig;
use cfsl::data::{encode_pnm, export_folder, generate_synthetic, load_folder, Dataset};
use cfsl::episodic::evaluate;
use cfsl::trainer::{known_accuracy, train as run_training, METRICS_HEADER};
use cfsl::{Error, ModelState, Result};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Path) -> Result<(ModelState, String)> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let model = checkpoint::from_bytes(&bytes, path)?;
    Ok((model, checkpoint::fingerprint(&bytes)))
}

fn provenance(checkpoint: &Path, hash: &str, data: &Path) -> String {
    format!(
        "checkpoint={}\ncheckpoint_hash={hash}\ndata={}\n",
        checkpoint.display(),
        data.display()
    )
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&cfg.synth)?;
    export_folder(&ds, out, Some(&cfg.synth.to_key_values()))?;
    println!(
        "wrote {} known-train, {} known-heldout and {} novel images to {}",
        ds.known_train.len(),
        ds.known_heldout.len(),
        ds.novel.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, run_dir: &Path) -> Result<()> {
    let ds = load_folder(data)?;
    let shape = ds
        .image_shape()
        .ok_or_else(|| Error::Data(format!("dataset {} has no images", data.display())))?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_classes = ds.known_train.n_classes();
    model_cfg.in_channels = shape[2];

    create_dir(run_dir)?;
    write(&run_dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics_text = format!("{METRICS_HEADER}\n");
    write(&metrics_path, &metrics_text)?;

    let outcome = run_training(&ds.known_train, &model_cfg, &cfg.train, |epoch, model, metrics| {
        checkpoint::save(model, &run_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        if let Some(m) = metrics {
            metrics_text.push_str(&m.csv_row());
            metrics_text.push('\n');
            write(&metrics_path, &metrics_text)?;
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  cls {:.4}  acc {:.3}",
                m.epoch, m.lr, m.losses.total, m.losses.classification, m.train_acc
            );
        }
        Ok(())
    })?;

    let bytes = checkpoint::to_bytes(&outcome.model);
    write(&run_dir.join("model.ckpt"), &bytes)?;
    let mut summary = format!("checkpoint_hash={}\nepochs={}\n", checkpoint::fingerprint(&bytes), cfg.train.epochs);
    if !ds.known_heldout.is_empty() {
        summary.push_str(&format!("heldout_accuracy={}\n", known_accuracy(&outcome.model, &ds.known_heldout)?));
    }
    write(&run_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, hash) = load_model(ckpt)?;
    let ds = load_folder(data)?;
    let report = evaluate(&ds.novel, &model, &cfg.eval)?;
    create_dir(out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("eval.csv"), report.to_csv())?;
    let summary = format!("{}{}", report.summary(), provenance(ckpt, &hash, data));
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn novel_image(ds: &Dataset, index: usize) -> Result<usize> {
    if index >= ds.novel.len() {
        return Err(Error::Config(format!(
            "image index {index} out of range for {} novel images",
            ds.novel.len()
        )));
    }
    Ok(index)
}

pub fn analyze(cfg: &RunConfig, which: &str, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, hash) = load_model(ckpt)?;
    let ds = load_folder(data)?;
    let a = &cfg.analysis;
    create_dir(out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("provenance.txt"), provenance(ckpt, &hash, data))?;

    match which {
        "influence" => {
            // Query: novel image `image`; support: the next image of its class.
            let q = novel_image(&ds, a.image)?;
            let y = ds.novel.labels[q];
            let s = (0..ds.novel.len())
                .map(|i| (q + 1 + i) % ds.novel.len())
                .find(|&i| i != q && ds.novel.labels[i] == y)
                .ok_or_else(|| Error::Data(format!("class {} has a single image", ds.novel.class_names[y])))?;
            let fq = model.forward_features(&ds.novel.images[q])?.feature_normalized;
            let fs = model.forward_features(&ds.novel.images[s])?.feature_normalized;
            let infl = analysis::influences(&fq, &fs)?;
            let mut csv = String::from("channel,influence\n");
            for (j, v) in infl.iter().enumerate() {
                csv.push_str(&format!("{j},{v}\n"));
            }
            write(&out.join("influence.csv"), csv)?;
        }
        "ablate-f" => {
            let curve = analysis::topk_feature_ablation(&model, &ds.novel, &cfg.eval, &a.ks)?;
            write(&out.join("ablate_f.csv"), curve.to_csv())?;
        }
        "ablate-w" => {
            let curve = analysis::topk_weight_ablation(&model, &ds.known_heldout, &a.ks)?;
            write(&out.join("ablate_w.csv"), curve.to_csv())?;
        }
        "bins" => {
            let idx = analysis::sample_indices(ds.known_train.len(), a.bin_samples, a.seed);
            let profile = analysis::weight_activation_bins(&model, &ds.known_train, &idx, a.n_bins)?;
            write(&out.join("bins.csv"), profile.to_csv())?;
        }
        "heatmap" => {
            let i = novel_image(&ds, a.image)?;
            let img = &ds.novel.images[i];
            let mode = a.channel.map_or(HeatmapMode::Weighted, HeatmapMode::Channel);
            let h = analysis::heatmap(&model, img, mode)?;
            let up = h.upsampled(img.shape()[0], img.shape()[1]);
            write(&out.join("heatmap.pgm"), encode_pnm(&up)?)?;
            write(&out.join("heatmap.csv"), h.raw_csv())?;
        }
        "overlap" => {
            let i = novel_image(&ds, a.image)?;
            let f = model.forward_features(&ds.novel.images[i])?.feature;
            let mut csv = String::from("class,class_name,channels\n");
            for c in 0..model.n_classes() {
                let set = analysis::primitive_overlap(&model, &f, c, a.k_f, a.k_w)?;
                let name = ds.known_train.class_names.get(c).map_or("", String::as_str);
                let chans: Vec<String> = set.iter().map(ToString::to_string).collect();
                csv.push_str(&format!("{c},{name},{}\n", chans.join(" ")));
            }
            write(&out.join("overlap.csv"), csv)?;
        }
        other => return Err(Error::Config(format!("unknown analysis {other:?}"))),
    }
    println!("wrote {which} analysis to {}", out.display());
    Ok(())
}
