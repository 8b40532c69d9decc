//! Classification head used during pre-training.
//!
//! Backbone features `(b, F, S, H, W)` are viewed as `(b, F, H, W, S)` so the
//! permute ladder binds `x_dim = H`, `y_dim = W`, `z_dim = S`. The head emits
//! `(b, S, clusterers, class_size)` logits (one trailing unit axis kept).

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ops::{activation, Activation, Conv3d, Conv3dSpec, ConvBnAct};
use crate::rng::Rng;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainHeadConfig {
    pub input_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub z_dim: usize,
    pub cluster_num: usize,
    pub class_size: usize,
}

impl PretrainHeadConfig {
    /// Binding for features with `channels` and spatial `(S, H, W)`;
    /// `class_size` is the largest cluster count.
    pub fn for_features(channels: usize, spatial: [usize; 3], ks: &[usize]) -> Self {
        let [s, h, w] = spatial;
        PretrainHeadConfig {
            input_dim: channels,
            x_dim: h,
            y_dim: w,
            z_dim: s,
            cluster_num: ks.len(),
            class_size: ks.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("y_dim", self.y_dim),
            ("z_dim", self.z_dim),
            ("cluster_num", self.cluster_num),
            ("class_size", self.class_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.x_dim < 16 {
            return Err(Error::config("x_dim", format!("{} < 16 leaves no channels after x_dim // 16", self.x_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainHead {
    pub config: PretrainHeadConfig,
    pub cluster: [ConvBnAct; 2],
    pub class: [ConvBnAct; 2],
    pub x_reduce: [ConvBnAct; 2],
    pub z_mix: ConvBnAct,
    pub z_out: Conv3d,
}

fn cba<T: Real>(store: &mut ParamStore<T>, name: String, cin: usize, cout: usize, rng: &mut Rng) -> Result<ConvBnAct> {
    ConvBnAct::new(store, &name, Conv3dSpec::pointwise(cin, cout), Activation::Gelu, rng)
}

impl PretrainHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: PretrainHeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let xr = c.x_dim / 16;
        Ok(PretrainHead {
            config,
            cluster: [
                cba(store, format!("{prefix}.cluster0"), c.input_dim, c.cluster_num, rng)?,
                cba(store, format!("{prefix}.cluster1"), c.cluster_num, c.cluster_num, rng)?,
            ],
            class: [
                cba(store, format!("{prefix}.class0"), c.y_dim, c.class_size, rng)?,
                cba(store, format!("{prefix}.class1"), c.class_size, c.class_size, rng)?,
            ],
            x_reduce: [
                cba(store, format!("{prefix}.x0"), c.x_dim, xr, rng)?,
                cba(store, format!("{prefix}.x1"), xr, 1, rng)?,
            ],
            z_mix: cba(store, format!("{prefix}.z0"), c.z_dim, c.z_dim, rng)?,
            z_out: Conv3d::new(store, &format!("{prefix}.z1"), Conv3dSpec::pointwise(c.z_dim, c.z_dim), rng)?,
        })
    }

    fn expect(ctx: &Ctx<'_, impl Real>, x: Var, stage: &str, dim: &str, want: usize) -> Result<()> {
        let got = ctx.tape.shape(x)[1];
        if got != want {
            return Err(Error::shape(format!(
                "pretrain head {stage}: expected {dim} = {want} channels, got {got} (shape {:?})",
                ctx.tape.shape(x)
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
        let c = self.config;
        Self::expect(ctx, features, "input", "input_dim", c.input_dim)?;
        // (b, F, S, H, W) -> (b, F, H, W, S)
        let x = ctx.tape.permute(features, [0, 1, 3, 4, 2])?;
        let x = self.cluster[0].forward(ctx, x)?;
        let x = self.cluster[1].forward(ctx, x)?;
        let x = ctx.tape.permute(x, [0, 3, 2, 1, 4])?;
        Self::expect(ctx, x, "stage 2 (first permute)", "y_dim", c.y_dim)?;
        let x = self.class[0].forward(ctx, x)?;
        let x = self.class[1].forward(ctx, x)?;
        let x = ctx.tape.permute(x, [0, 2, 1, 3, 4])?;
        Self::expect(ctx, x, "stage 3 (second permute)", "x_dim", c.x_dim)?;
        let x = self.x_reduce[0].forward(ctx, x)?;
        let x = self.x_reduce[1].forward(ctx, x)?;
        let x = ctx.tape.permute(x, [0, 4, 3, 2, 1])?;
        Self::expect(ctx, x, "stage 4 (third permute)", "z_dim", c.z_dim)?;
        let x = self.z_mix.forward(ctx, x)?;
        let x = self.z_out.forward(ctx, x)?;
        Ok(activation(&mut ctx.tape, Activation::Relu, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn output_shape_contract() {
        let cfg = PretrainHeadConfig::for_features(4, [8, 16, 4], &[3, 5]);
        let mut store = ParamStore::<f64>::new();
        let head = PretrainHead::new(&mut store, "ph", cfg, &mut rng::seeded(0)).unwrap();
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::from_fn([2, 4, 8, 16, 4], |i| (i as f64 * 0.3).sin()));
        let y = head.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), [2, 8, 2, 5, 1]);
    }

    #[test]
    fn mismatched_features_name_the_stage() {
        let cfg = PretrainHeadConfig::for_features(4, [8, 16, 4], &[3]);
        let mut store = ParamStore::<f64>::new();
        let head = PretrainHead::new(&mut store, "ph", cfg, &mut rng::seeded(0)).unwrap();
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::zeros([1, 4, 8, 16, 6]));
        let err = head.forward(&mut ctx, x).unwrap_err().to_string();
        assert!(err.contains("stage 2") && err.contains("y_dim"), "{err}");
    }
}
