//! Primitive layers: convolution, batch normalization, activations and ×2
//! upsampling, each as a pure kernel plus a tape-recorded op.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod upsample;

pub use activation::{activation, Activation, LEAKY_SLOPE};
pub use conv::{conv3d, conv3d_backward, conv3d_forward, Conv3dSpec};
pub use norm::{BatchNorm3d, BN_EPS, BN_MOMENTUM};
pub use upsample::{upsample2x, upsample2x_forward, UpsampleMode};

use crate::autograd::{Ctx, ParamId, ParamKind, ParamStore, Var};
use crate::error::Result;
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Real, Tensor};

/// Convolution layer: weights drawn from N(0, 2/fan_in), bias zero.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: Conv3dSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            normal_tensor(spec.weight_shape(), 0.0, std, rng),
            ParamKind::Trainable,
        )?;
        let bias = if spec.has_bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(spec.bias_shape()), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv3d { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        conv3d(&mut ctx.tape, x, w, b, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_shape().iter().product::<usize>() + if self.spec.has_bias { self.spec.out_channels } else { 0 }
    }
}

/// Conv (no bias) → BatchNorm → activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv3d,
    pub norm: BatchNorm3d,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: Conv3dSpec,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = spec.with_bias(false);
        Ok(ConvBnAct {
            conv: Conv3d::new(store, &format!("{prefix}.conv"), spec, rng)?,
            norm: BatchNorm3d::new(store, &format!("{prefix}.norm"), spec.out_channels)?,
            act,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(activation(&mut ctx.tape, self.act, y))
    }
}
