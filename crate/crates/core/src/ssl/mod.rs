//! Masked multi-task pre-training: slice-chain masking, k-means
//! pseudo-labels, a classification head over slices and its loss.

pub mod head;
pub mod kmeans;
pub mod loss;
pub mod mask;
pub mod store;

pub use head::{PretrainHead, PretrainHeadConfig};
pub use kmeans::{
    assign_pseudo_labels, features_to_volume, slice_features, train_clusterer, Clusterer, ClustererEnsemble,
    FeatureMatrix, KMeansConfig, PseudoLabelSet,
};
pub use loss::{masked_targets, pretrain_loss, pretrain_loss_var, temperature_softmax, SliceTarget, DEFAULT_TAU};
pub use mask::{apply_mask, build_mask_plan, MaskConfig, MaskPlan, SliceMask};
pub use store::{load_labels, read_labels, save_labels, write_labels};

use crate::autograd::{Ctx, ParamStore, Var};
use crate::error::{Error, Result};
use crate::logonet::{LoGoBackbone, LoGoNetConfig};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Backbone with the segmentation head swapped for [`PretrainHead`].
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub backbone: LoGoBackbone,
    pub head: PretrainHead,
    pub ks: Vec<usize>,
    pub tau: f64,
}

impl PretrainModel {
    /// `spatial` is the `(S, H, W)` of the training volumes.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &LoGoNetConfig,
        spatial: [usize; 3],
        ks: &[usize],
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::arg(format!("temperature τ = {tau} must be positive")));
        }
        let backbone = LoGoBackbone::new(store, config, rng)?;
        let hc = PretrainHeadConfig::for_features(config.fusion_channels(), spatial, ks);
        let head = PretrainHead::new(store, "pretrain_head", hc, rng)?;
        Ok(PretrainModel {
            backbone,
            head,
            ks: ks.to_vec(),
            tau,
        })
    }

    /// Head logits `(b, S, N, class_size, 1)` for an (already masked) batch.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = self.backbone.features(ctx, x)?;
        self.head.forward(ctx, f.fused)
    }

    /// Masked-slice loss on a batch of unmasked volumes `(b, C, S, H, W)`.
    pub fn loss<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        volumes: &Tensor<T>,
        plans: &[MaskPlan],
        labels: &[PseudoLabelSet],
    ) -> Result<Var> {
        let b = volumes.batch();
        if plans.len() != b {
            return Err(Error::arg(format!("{} mask plans for a batch of {b}", plans.len())));
        }
        let masked = (0..b)
            .map(|i| apply_mask(&volumes.batch_item(i), &plans[i]))
            .collect::<Result<Vec<_>>>()?;
        let targets = masked_targets(plans, labels)?;
        let x = ctx.input(Tensor::stack_batch(&masked)?);
        let logits = self.forward(ctx, x)?;
        pretrain_loss_var(&mut ctx.tape, logits, &targets, &self.ks, self.tau)
    }
}

/// Forward, loss over masked slices, backward, optimizer update. Returns the
/// loss; gradients are cleared first.
pub fn pretrain_step<T: Real>(
    store: &mut ParamStore<T>,
    model: &PretrainModel,
    optimizer: &mut AdamW<T>,
    volumes: &Tensor<T>,
    plans: &[MaskPlan],
    labels: &[PseudoLabelSet],
    lr: f64,
) -> Result<f64> {
    store.zero_grad();
    let loss = {
        let mut ctx = Ctx::new(store, true);
        let l = model.loss(&mut ctx, volumes, plans, labels)?;
        let v = ctx.value(l).item().to_f64().unwrap_or(f64::NAN);
        ctx.backward(l)?;
        v
    };
    if !loss.is_finite() {
        return Err(Error::arg(format!("non-finite pre-training loss {loss}")));
    }
    optimizer.step(store, lr)?;
    Ok(loss)
}
