//! File-level commands behind the CLI. Every command writes the resolved
//! config next to its outputs as `config.toml`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_intensity, load_label_volume, save_volume, write_file, Checkpoint, Volume};
use crate::logonet::LoGoNet;
use crate::optim::AdamW;
use crate::perf::{count_model, CostReport};
use crate::phantom::generate;
use crate::rng::substream;
use crate::ssl::{load_labels, save_labels, PretrainModel};
use crate::tensor::{Shape, Tensor};
use crate::training::{build_pseudo_labels, finetune_loop, predict, pretrain_loop, FinetuneLog, Sample};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LABEL_STORE: &str = "labels.lgpl";
pub const PRETRAIN_CKPT: &str = "pretrain.lgck";
pub const PRETRAIN_LOG: &str = "pretrain_loss.csv";
pub const FINETUNE_CKPT: &str = "finetune.lgck";
pub const FINETUNE_LOG: &str = "finetune_log.csv";

pub fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), cfg.to_toml().as_bytes())
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("phantom_{i:04}.lgv"))
}

pub fn label_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}_label.lgv"))
}

/// `count` phantoms, each from its own stream, as image and label files.
/// Nothing is written when `count` is zero.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if cfg.data.count == 0 {
        return Ok(files);
    }
    let pc = cfg.phantom();
    for i in 0..cfg.data.count {
        let (image, label, _) = generate(&pc, &mut substream(cfg.seed, "phantom", i as u64))?;
        let ip = image_path(out, i);
        let lp = label_path(&ip);
        save_volume(&ip, &Volume::F32(image))?;
        save_volume(&lp, &Volume::U8(label))?;
        files.push(ip);
        files.push(lp);
    }
    write_config_echo(cfg, out)?;
    Ok(files)
}

/// Image files of a corpus directory in name order (label files excluded).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".lgv") && !name.ends_with("_label.lgv") {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Format(format!("no .lgv volumes in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_images(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let images = list_images(dir)?.iter().map(|p| load_intensity(p)).collect::<Result<Vec<_>>>()?;
    let first = images[0].shape();
    if let Some(bad) = images.iter().find(|t| t.shape() != first) {
        return Err(Error::shape(format!("corpus mixes shapes {:?} and {:?}", first, bad.shape())));
    }
    Ok(images)
}

pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    list_images(dir)?
        .iter()
        .map(|p| {
            let s = Sample {
                image: load_intensity(p)?,
                label: load_label_volume(&label_path(p))?,
            };
            if s.image.spatial() != [s.label.shape[1], s.label.shape[2], s.label.shape[3]] {
                return Err(Error::shape(format!("{} and its labels differ in shape", p.display())));
            }
            Ok(s)
        })
        .collect()
}

fn append_csv(path: &Path, header: &str, rows: &[String], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from `<out>/pretrain.lgck` and the saved label store.
    pub resume: bool,
    /// Stop after this many steps of the schedule in total.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub first_step: usize,
    pub losses: Vec<f64>,
    pub ks: Vec<usize>,
}

/// Clusterer ensemble, pseudo-label store, masked pre-training, checkpoint
/// (with optimizer state) and per-step loss log.
pub fn pretrain(cfg: &RunConfig, corpus: &Path, out: &Path, opts: &PretrainOptions) -> Result<PretrainReport> {
    cfg.validate()?;
    let images = load_images(corpus)?;
    let spatial = images[0].spatial();
    let labels_path = out.join(LABEL_STORE);
    let labels = if opts.resume {
        load_labels(&labels_path)?
    } else {
        let (_, labels) = build_pseudo_labels(&images, cfg)?;
        save_labels(&labels_path, &labels)?;
        labels
    };
    let mut store = ParamStore::<f32>::new();
    let model = PretrainModel::new(
        &mut store,
        &cfg.logonet(),
        spatial,
        &labels.ks,
        cfg.pretrain.tau,
        &mut substream(cfg.seed, "init", 0),
    )?;
    let ckpt_path = out.join(PRETRAIN_CKPT);
    let mut opt = if opts.resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        ck.restore_store(&mut store, |_| false)?;
        ck.restore_optimizer(&store, cfg.optim)?
            .ok_or_else(|| Error::MissingParameters {
                missing: vec!["optim.step".into()],
            })?
    } else {
        AdamW::new(&store, cfg.optim)
    };
    let start = opt.step as usize;
    let stop = opts.stop_after.unwrap_or(cfg.pretrain.steps).min(cfg.pretrain.steps);
    let losses = pretrain_loop(&mut store, &model, &mut opt, &images, &labels, cfg, start, stop)?;
    Checkpoint::from_store(&store, Some(&opt)).save(&ckpt_path)?;
    let rows: Vec<String> = losses.iter().enumerate().map(|(i, l)| format!("{},{l:.9}", start + i)).collect();
    append_csv(&out.join(PRETRAIN_LOG), "step,loss", &rows, opts.resume)?;
    write_config_echo(cfg, out)?;
    Ok(PretrainReport {
        first_step: start,
        losses,
        ks: labels.ks,
    })
}

/// Segmentation model for `cfg`, initialised from its seed.
pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore<f32>, LoGoNet)> {
    let mut store = ParamStore::new();
    let model = LoGoNet::new(&mut store, &cfg.logonet(), &mut substream(cfg.seed, "init", 0))?;
    Ok((store, model))
}

/// Loads backbone weights from a pre-training checkpoint; the segmentation
/// head keeps its fresh initialisation. Returns the names left untouched.
pub fn load_backbone(store: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<Vec<String>> {
    ckpt.restore_store(store, |name| name.starts_with("head."))
}

/// Supervised fine-tuning. The last `data.holdout` volumes form the
/// evaluation split; with no holdout the training set is evaluated.
pub fn finetune(cfg: &RunConfig, data: &Path, init: Option<&Path>, out: &Path) -> Result<FinetuneLog> {
    cfg.validate()?;
    let samples = load_samples(data)?;
    let hold = cfg.data.holdout.min(samples.len().saturating_sub(1));
    let (train, eval) = samples.split_at(samples.len() - hold);
    let eval = if eval.is_empty() { train } else { eval };
    let (mut store, model) = build_model(cfg)?;
    if let Some(p) = init {
        load_backbone(&mut store, &Checkpoint::load(p)?)?;
    }
    let mut opt = AdamW::new(&store, cfg.optim);
    let log = finetune_loop(&mut store, &model, &mut opt, train, eval, cfg)?;
    Checkpoint::from_store(&store, None).save(&out.join(FINETUNE_CKPT))?;
    let rows: Vec<String> = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let dice = log.evals.iter().find(|(s, _)| *s == i + 1).map(|(_, d)| format!("{d:.6}")).unwrap_or_default();
            format!("{},{l:.9},{dice}", i + 1)
        })
        .collect();
    append_csv(&out.join(FINETUNE_LOG), "step,loss,dice", &rows, false)?;
    write_config_echo(cfg, out)?;
    Ok(log)
}

/// Argmax segmentation of one volume, written as a u8 label file.
pub fn infer(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let image = load_intensity(input)?;
    let (mut store, model) = build_model(cfg)?;
    model.config().check_input(image.shape())?;
    Checkpoint::load(ckpt)?.restore_store(&mut store, |_| false)?;
    let labels = predict(&mut store, &model, &image)?;
    save_volume(output, &Volume::U8(labels))
}

pub fn analyze(cfg: &RunConfig, input: Shape) -> Result<CostReport> {
    let (_, model) = build_model(cfg)?;
    count_model(&model, input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_file_sits_next_to_image() {
        let p = image_path(Path::new("/d"), 7);
        assert_eq!(p, PathBuf::from("/d/phantom_0007.lgv"));
        assert_eq!(label_path(&p), PathBuf::from("/d/phantom_0007_label.lgv"));
    }

    #[test]
    fn zero_count_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.count = 0;
        assert!(gen_data(&cfg, dir.path()).unwrap().is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
