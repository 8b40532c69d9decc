//! File-level commands on a small phantom corpus.

use std::fs;
use std::path::Path;

use ::logonet::autograd::{Ctx, ParamStore};
use ::logonet::config::RunConfig;
use ::logonet::io::{load_label_volume, Checkpoint};
use ::logonet::pipeline::{self, PretrainOptions, FINETUNE_CKPT, LABEL_STORE, PRETRAIN_CKPT, PRETRAIN_LOG};
use ::logonet::rng::substream;
use ::logonet::ssl::{build_mask_plan, load_labels, PretrainModel};
use ::logonet::tensor::Tensor;
use ::logonet::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.count = 4;
    cfg.data.extent = 16;
    cfg.pretrain.steps = 50;
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.k_min = 2;
    cfg.pretrain.k_max = 6;
    cfg.pretrain.kmeans_iterations = 30;
    cfg.pretrain.phi1 = 0.3;
    cfg.finetune.steps = 4;
    cfg.finetune.eval_every = 2;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let cfg = small_config();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::gen_data(&cfg, a.path()).unwrap();
    pipeline::gen_data(&cfg, b.path()).unwrap();
    let other = RunConfig { seed: 1, ..cfg.clone() };
    pipeline::gen_data(&other, c.path()).unwrap();
    let (fa, fb, fc) = (files(a.path()), files(b.path()), files(c.path()));
    assert_eq!(fa.len(), 2 * cfg.data.count + 1);
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

/// Masked-slice loss of the saved pre-training weights on one fixed batch and
/// plan.
fn fixed_batch_loss(cfg: &RunConfig, corpus: &Path, out: &Path, trained: bool) -> f64 {
    let images = pipeline::load_images(corpus).unwrap();
    let labels = load_labels(&out.join(LABEL_STORE)).unwrap();
    let mut store = ParamStore::<f32>::new();
    let model = PretrainModel::new(&mut store, &cfg.logonet(), images[0].spatial(), &labels.ks, cfg.pretrain.tau, &mut substream(cfg.seed, "init", 0)).unwrap();
    if trained {
        Checkpoint::load(&out.join(PRETRAIN_CKPT)).unwrap().restore_store(&mut store, |_| false).unwrap();
    }
    let s = images[0].spatial()[0];
    let batch = Tensor::stack_batch(&images[..2]).unwrap();
    let mut mask_cfg = cfg.mask();
    mask_cfg.phi1 = 0.5;
    let plans: Vec<_> = (0..2).map(|i| build_mask_plan(images[0].spatial(), &mask_cfg, &mut substream(99, "fixed", i)).unwrap()).collect();
    assert!(plans.iter().all(|p| !p.is_empty()));
    let per: Vec<_> = (0..2).map(|v| labels.volume(v, s).unwrap()).collect();
    let mut ctx = Ctx::new(&mut store, true);
    let l = model.loss(&mut ctx, &batch, &plans, &per).unwrap();
    ctx.value(l).item() as f64
}

#[test]
fn pretraining_lowers_the_loss_on_a_fixed_batch() {
    let cfg = small_config();
    let (data, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::gen_data(&cfg, data.path()).unwrap();
    let report = pipeline::pretrain(&cfg, data.path(), out.path(), &PretrainOptions::default()).unwrap();
    assert_eq!(report.losses.len(), 50);
    assert!(report.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    let before = fixed_batch_loss(&cfg, data.path(), out.path(), false);
    let after = fixed_batch_loss(&cfg, data.path(), out.path(), true);
    assert!(after < before, "loss {before} -> {after}");
    let log = fs::read_to_string(out.path().join(PRETRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 51);
}

#[test]
fn resumed_pretraining_matches_uninterrupted() {
    let mut cfg = small_config();
    cfg.pretrain.steps = 6;
    let data = tempfile::tempdir().unwrap();
    pipeline::gen_data(&cfg, data.path()).unwrap();
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::pretrain(&cfg, data.path(), whole.path(), &PretrainOptions::default()).unwrap();
    let first = PretrainOptions { resume: false, stop_after: Some(3) };
    assert_eq!(pipeline::pretrain(&cfg, data.path(), split.path(), &first).unwrap().losses.len(), 3);
    let rest = PretrainOptions { resume: true, stop_after: None };
    let r = pipeline::pretrain(&cfg, data.path(), split.path(), &rest).unwrap();
    assert_eq!(r.first_step, 3);
    assert_eq!(files(whole.path()), files(split.path()));
}

#[test]
fn finetune_reports_missing_backbone_parameters_by_name() {
    let cfg = small_config();
    let (data, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::gen_data(&cfg, data.path()).unwrap();
    let mut global_only = cfg.clone();
    global_only.model.dual_path = false;
    let (store, _) = pipeline::build_model(&global_only).unwrap();
    let ckpt = out.path().join("global_only.lgck");
    Checkpoint::from_store(&store, None).save(&ckpt).unwrap();
    match pipeline::finetune(&cfg, data.path(), Some(&ckpt), out.path()) {
        Err(Error::MissingParameters { missing }) => {
            assert!(!missing.is_empty());
            assert!(missing.iter().all(|n| n.starts_with("local.")), "{missing:?}");
        }
        other => panic!("expected missing parameters, got {other:?}"),
    }
}

#[test]
fn finetune_then_infer_writes_a_label_volume() {
    let cfg = small_config();
    let (data, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::gen_data(&cfg, data.path()).unwrap();
    let log = pipeline::finetune(&cfg, data.path(), None, out.path()).unwrap();
    assert_eq!(log.losses.len(), 4);
    assert_eq!(log.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4]);
    let pred = out.path().join("pred.lgv");
    pipeline::infer(&cfg, &out.path().join(FINETUNE_CKPT), &pipeline::image_path(data.path(), 0), &pred).unwrap();
    let labels = load_label_volume(&pred).unwrap();
    assert_eq!(labels.shape, [1, 16, 16, 16]);
    assert!(labels.max_label() < 3);
}
