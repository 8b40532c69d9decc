//! In-memory training loops for fine-tuning and masked pre-training.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autograd::{Ctx, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::logonet::{predict_segmentation, LoGoNet};
use crate::losses::dice_ce_loss;
use crate::metrics::mean_foreground_dice;
use crate::optim::{cosine_warmup_lr, AdamW};
use crate::rng::{substream, Rng};
use crate::ssl::{
    build_mask_plan, assign_pseudo_labels, pretrain_step, slice_features, ClustererEnsemble, FeatureMatrix,
    PretrainModel, PseudoLabelSet,
};
use crate::tensor::{LabelVolume, Tensor};

/// One labelled volume: image `(1, 1, S, H, W)`, labels `(1, S, H, W)`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelVolume,
}

/// Learning rate for 0-based step `i` of `total`; the first step is already
/// past zero and the last one is not.
pub fn lr_at(i: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).round() as usize;
    cosine_warmup_lr(i + 1, warmup, total + 1, peak)
}

/// Random cube of edge `crop` from one sample; the whole sample when the crop
/// covers it.
pub fn random_crop(s: &Sample, crop: usize, rng: &mut Rng) -> Result<Sample> {
    let [_, _, d, h, w] = s.image.shape();
    if crop > d || crop > h || crop > w {
        return Err(Error::shape(format!("crop {crop} larger than volume {:?}", [d, h, w])));
    }
    if crop == d && crop == h && crop == w {
        return Ok(s.clone());
    }
    let (z0, y0, x0) = (
        rng.random_range(0..=d - crop),
        rng.random_range(0..=h - crop),
        rng.random_range(0..=w - crop),
    );
    let mut img = Vec::with_capacity(crop * crop * crop);
    let mut lab = Vec::with_capacity(crop * crop * crop);
    for z in z0..z0 + crop {
        for y in y0..y0 + crop {
            let off = (z * h + y) * w + x0;
            img.extend_from_slice(&s.image.data()[off..off + crop]);
            lab.extend_from_slice(&s.label.data[off..off + crop]);
        }
    }
    Ok(Sample {
        image: Tensor::from_vec([1, 1, crop, crop, crop], img)?,
        label: LabelVolume::new([1, crop, crop, crop], lab)?,
    })
}

/// Eval-mode argmax segmentation of one image.
pub fn predict(store: &mut ParamStore<f32>, model: &LoGoNet, image: &Tensor<f32>) -> Result<LabelVolume> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.input(image.clone());
    let logits = model.forward(&mut ctx, x)?;
    Ok(predict_segmentation(ctx.value(logits)))
}

/// Mean over samples of the mean foreground Dice.
pub fn mean_dice(store: &mut ParamStore<f32>, model: &LoGoNet, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("no samples to evaluate"));
    }
    let nc = model.config().num_classes;
    let mut total = 0.0;
    for s in samples {
        let pred = predict(store, model, &s.image)?;
        total += mean_foreground_dice(&pred, &s.label, nc)?;
    }
    Ok(total / samples.len() as f64)
}

/// Indices for step `i`: walks a fresh permutation of the training set each
/// pass, so every sample is visited once per epoch.
fn batch_indices(seed: u64, tag: &str, i: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .map(|j| {
            let flat = i * batch + j;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut substream(seed, tag, (flat / n) as u64));
            perm[flat % n]
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneLog {
    pub losses: Vec<f64>,
    /// `(steps completed, Dice)` on the evaluation set.
    pub evals: Vec<(usize, f64)>,
    /// First evaluation at which Dice reached the target.
    pub steps_to_target: Option<usize>,
}

/// Supervised Dice+CE training. Evaluates every `eval_every` steps and after
/// the last one; stops early once `target_dice` is reached.
pub fn finetune_loop(
    store: &mut ParamStore<f32>,
    model: &LoGoNet,
    optimizer: &mut AdamW<f32>,
    train: &[Sample],
    eval: &[Sample],
    cfg: &RunConfig,
) -> Result<FinetuneLog> {
    if train.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let f = &cfg.finetune;
    let loss_cfg = cfg.loss();
    loss_cfg.validate()?;
    let mut log = FinetuneLog::default();
    for i in 0..f.steps {
        let idx = batch_indices(cfg.seed, "finetune-batch", i, f.batch_size, train.len());
        let mut crop_rng = substream(cfg.seed, "finetune-crop", i as u64);
        let crops = idx
            .iter()
            .map(|&k| {
                let s = &train[k];
                random_crop(s, cfg.crop_for(s.image.spatial()[0]), &mut crop_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<Tensor<f32>> = crops.iter().map(|c| c.image.clone()).collect();
        let labels: Vec<LabelVolume> = crops.into_iter().map(|c| c.label).collect();
        let (x, y) = (Tensor::stack_batch(&images)?, LabelVolume::stack(&labels)?);

        store.zero_grad();
        let loss = {
            let mut ctx = Ctx::new(store, true);
            let xin = ctx.input(x);
            let logits = model.forward(&mut ctx, xin)?;
            let l = dice_ce_loss(&mut ctx.tape, logits, &y, &loss_cfg)?;
            let v = ctx.value(l).item() as f64;
            ctx.backward(l)?;
            v
        };
        if !loss.is_finite() {
            return Err(Error::arg(format!("non-finite loss {loss} at step {i}")));
        }
        optimizer.step(store, lr_at(i, f.steps, f.warmup_fraction, f.lr))?;
        log.losses.push(loss);

        let done = i + 1;
        if !eval.is_empty() && (done % f.eval_every == 0 || done == f.steps) {
            let d = mean_dice(store, model, eval)?;
            log.evals.push((done, d));
            if let Some(t) = f.target_dice {
                if d >= t {
                    log.steps_to_target = Some(done);
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Slice features of every image, volume-major.
pub fn corpus_features(images: &[Tensor<f32>]) -> Result<FeatureMatrix> {
    FeatureMatrix::concat(&images.iter().map(slice_features).collect::<Vec<_>>())
}

/// Trains the clusterer ensemble on the unmasked corpus and labels every
/// slice.
pub fn build_pseudo_labels(images: &[Tensor<f32>], cfg: &RunConfig) -> Result<(ClustererEnsemble, PseudoLabelSet)> {
    let data = corpus_features(images)?;
    let p = &cfg.pretrain;
    let ens = ClustererEnsemble::train(&data, p.clusterers_n, (p.k_min, p.k_max), &cfg.kmeans(), cfg.seed)?;
    let labels = assign_pseudo_labels(&ens, &data);
    Ok((ens, labels))
}

/// Steps `[start, stop)` of a `pretrain.steps`-long schedule. Every step draws
/// its batch and masks from its own stream, so a run split at any step
/// continues exactly as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loop(
    store: &mut ParamStore<f32>,
    model: &PretrainModel,
    optimizer: &mut AdamW<f32>,
    images: &[Tensor<f32>],
    labels: &PseudoLabelSet,
    cfg: &RunConfig,
    start: usize,
    stop: usize,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::arg("empty pre-training corpus"));
    }
    let p = &cfg.pretrain;
    let mask_cfg = cfg.mask();
    mask_cfg.validate()?;
    let slices = images[0].spatial()[0];
    let per_volume = (0..images.len())
        .map(|v| labels.volume(v, slices))
        .collect::<Result<Vec<_>>>()?;
    let mut losses = Vec::new();
    for i in start..stop.min(p.steps) {
        let idx = batch_indices(cfg.seed, "pretrain-batch", i, p.batch_size, images.len());
        let mut mask_rng = substream(cfg.seed, "pretrain-mask", i as u64);
        let batch: Vec<Tensor<f32>> = idx.iter().map(|&k| images[k].clone()).collect();
        let plans = batch
            .iter()
            .map(|b| build_mask_plan(b.spatial(), &mask_cfg, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<PseudoLabelSet> = idx.iter().map(|&k| per_volume[k].clone()).collect();
        let x = Tensor::stack_batch(&batch)?;
        let lr = lr_at(i, p.steps, p.warmup_fraction, p.lr);
        losses.push(pretrain_step(store, model, optimizer, &x, &plans, &targets, lr)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_starts_positive_and_ends_positive() {
        assert!(lr_at(0, 10, 0.2, 1.0) > 0.0);
        assert!(lr_at(9, 10, 0.2, 1.0) > 0.0);
        assert_eq!(lr_at(1, 10, 0.2, 1.0), 1.0);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..4).flat_map(|i| batch_indices(1, "t", i, 2, 8)).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn crop_is_a_subvolume() {
        let image = Tensor::from_fn([1, 1, 4, 4, 4], |i| i as f32);
        let label = LabelVolume::new([1, 4, 4, 4], (0..64).collect()).unwrap();
        let c = random_crop(&Sample { image, label }, 2, &mut crate::rng::seeded(3)).unwrap();
        for (v, l) in c.image.data().iter().zip(&c.label.data) {
            assert_eq!(*v as u32, *l);
        }
        let d = c.image.data();
        assert_eq!(d[1] - d[0], 1.0);
        assert_eq!(d[2] - d[0], 4.0);
        assert_eq!(d[4] - d[0], 16.0);
    }
}
