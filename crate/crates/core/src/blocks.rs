//! Large-kernel-attention building blocks.
//!
//! The attention unit approximates one large 3D kernel by a depthwise
//! convolution, a dilated depthwise convolution and a pointwise
//! convolution, and uses the result as a multiplicative gate on its input.
//! An [`LkaBlock`] wraps it in a pre-norm residual together with a
//! convolutional MLP; [`PatchEmbed`] produces the token sequence an encoder
//! stage operates on.

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ops::{activation, Activation, BatchNorm3d, Conv3d, Conv3dSpec};
use crate::rng::Rng;
use crate::tensor::Real;

/// Kernel decomposition of the attention unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LkaKernels {
    pub local: usize,
    pub dilated: usize,
    pub dilation: usize,
}

impl Default for LkaKernels {
    fn default() -> Self {
        LkaKernels {
            local: 5,
            dilated: 7,
            dilation: 3,
        }
    }
}

impl LkaKernels {
    /// Per-axis support of the depthwise → dilated-depthwise composition.
    pub fn receptive_field(&self) -> usize {
        (self.local - 1) + self.dilation * (self.dilated - 1) + 1
    }
}

#[derive(Clone, Debug)]
pub struct LkaAttention {
    pub chconv: Conv3d,
    pub diconv: Conv3d,
    pub pointwise: Conv3d,
}

impl LkaAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, k: LkaKernels, rng: &mut Rng) -> Result<Self> {
        Ok(LkaAttention {
            chconv: Conv3d::new(store, &format!("{prefix}.chconv"), Conv3dSpec::depthwise(dim, k.local, 1), rng)?,
            diconv: Conv3d::new(
                store,
                &format!("{prefix}.diconv"),
                Conv3dSpec::depthwise(dim, k.dilated, k.dilation),
                rng,
            )?,
            pointwise: Conv3d::new(store, &format!("{prefix}.pointwise"), Conv3dSpec::pointwise(dim, dim), rng)?,
        })
    }

    /// Gate map `Conv1×1(DiConv(ChConv(x)))`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.chconv.spec.in_channels {
            return Err(Error::shape(format!(
                "LKA attention built for {} channels, got {c}",
                self.chconv.spec.in_channels
            )));
        }
        let a = self.chconv.forward(ctx, x)?;
        let a = self.diconv.forward(ctx, a)?;
        self.pointwise.forward(ctx, a)
    }

    /// `gate(x) ⊙ x`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let atts = self.gate(ctx, x)?;
        ctx.tape.mul(atts, x)
    }
}

/// Pointwise expand → GELU → depthwise 3³ → GELU → pointwise contract.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Conv3d,
    pub dwconv: Conv3d,
    pub fc2: Conv3d,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Conv3d::new(store, &format!("{prefix}.fc1"), Conv3dSpec::pointwise(dim, hidden), rng)?,
            dwconv: Conv3d::new(store, &format!("{prefix}.dwconv"), Conv3dSpec::depthwise(hidden, 3, 1), rng)?,
            fc2: Conv3d::new(store, &format!("{prefix}.fc2"), Conv3dSpec::pointwise(hidden, dim), rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.spec.out_channels
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = activation(&mut ctx.tape, Activation::Gelu, h);
        let h = self.dwconv.forward(ctx, h)?;
        let h = activation(&mut ctx.tape, Activation::Gelu, h);
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct LkaBlock {
    pub dim: usize,
    pub norm1: BatchNorm3d,
    pub attn: LkaAttention,
    pub norm2: BatchNorm3d,
    pub mlp: Mlp,
}

impl LkaBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_ratio: usize,
        kernels: LkaKernels,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(LkaBlock {
            dim,
            norm1: BatchNorm3d::new(store, &format!("{prefix}.norm1"), dim)?,
            attn: LkaAttention::new(store, &format!("{prefix}.attn"), dim, kernels, rng)?,
            norm2: BatchNorm3d::new(store, &format!("{prefix}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, mlp_ratio * dim, rng)?,
        })
    }

    /// Residual updates on a volume `(b, dim, S, H, W)`.
    pub fn forward_volume<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, n)?;
        let x = ctx.tape.add(x, a)?;
        let n = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, n)?;
        ctx.tape.add(x, m)
    }

    /// Token form: `tokens` is `(b, N, dim)` (stored with two trailing unit
    /// axes) and `spatial` the `(S, H, W)` grid with `N = S·H·W`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, spatial: [usize; 3]) -> Result<Var> {
        let vol = tokens_to_volume(ctx, tokens, spatial)?;
        if ctx.tape.shape(vol)[1] != self.dim {
            return Err(Error::shape(format!(
                "LKA block of width {} given {} channels",
                self.dim,
                ctx.tape.shape(vol)[1]
            )));
        }
        let y = self.forward_volume(ctx, vol)?;
        volume_to_tokens(ctx, y)
    }
}

/// `(b, N, C)` → `(b, C, S, H, W)`.
pub fn tokens_to_volume<T: Real>(ctx: &mut Ctx<'_, T>, tokens: Var, spatial: [usize; 3]) -> Result<Var> {
    let [b, n, c, u, v] = ctx.tape.shape(tokens);
    let [s, h, w] = spatial;
    if u != 1 || v != 1 || n != s * h * w {
        return Err(Error::shape(format!(
            "token tensor {:?} does not match spatial grid {spatial:?}",
            [b, n, c]
        )));
    }
    let t = ctx.tape.permute(tokens, [0, 2, 1, 3, 4])?;
    ctx.tape.reshape(t, [b, c, s, h, w])
}

/// `(b, C, S, H, W)` → `(b, S·H·W, C)`; tokens are row-major over (S, H, W).
pub fn volume_to_tokens<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let f = ctx.tape.flatten_spatial(x);
    ctx.tape.permute(f, [0, 2, 1, 3, 4])
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv3d,
    pub norm: BatchNorm3d,
}

impl PatchEmbed {
    /// Projection `in → dim` with kernel `k`, stride `s`, padding `floor(k/2)`.
    /// The conv carries no bias since batch norm follows it.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        dim: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = Conv3dSpec::new(in_channels, dim, k).with_stride(stride).with_bias(false);
        Ok(PatchEmbed {
            proj: Conv3d::new(store, &format!("{prefix}.proj"), spec, rng)?,
            norm: BatchNorm3d::new(store, &format!("{prefix}.norm"), dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.spec.out_channels
    }

    /// Normalized projection as a volume `(b, dim, S', H', W')`.
    pub fn forward_volume<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.proj.forward(ctx, x)?;
        self.norm.forward(ctx, y)
    }

    /// Returns tokens `(b, S'·H'·W', dim)` and the grid `(S', H', W')`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, [usize; 3])> {
        let y = self.forward_volume(ctx, x)?;
        let [_, _, s, h, w] = ctx.tape.shape(y);
        Ok((volume_to_tokens(ctx, y)?, [s, h, w]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn mlp_hidden_width_follows_ratio() {
        let mut store = ParamStore::<f64>::new();
        let b = LkaBlock::new(&mut store, "b", 4, 8, LkaKernels::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(b.mlp.hidden(), 32);
    }

    #[test]
    fn receptive_field_of_default_kernels() {
        assert_eq!(LkaKernels::default().receptive_field(), 23);
    }

    #[test]
    fn patch_embed_shape_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let pe = PatchEmbed::new(&mut store, "pe", 1, 4, 3, 2, &mut rng::seeded(0)).unwrap();
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::zeros([1, 1, 8, 8, 8]));
        let (tok, sp) = pe.forward(&mut ctx, x).unwrap();
        assert_eq!(sp, [4, 4, 4]);
        assert_eq!(ctx.tape.shape(tok), [1, 64, 4, 1, 1]);
    }

    #[test]
    fn token_count_mismatch_is_shape_error() {
        let mut store = ParamStore::<f64>::new();
        let b = LkaBlock::new(&mut store, "b", 2, 2, LkaKernels::default(), &mut rng::seeded(0)).unwrap();
        let mut ctx = Ctx::new(&mut store, true);
        let x = ctx.input(Tensor::zeros([1, 26, 2, 1, 1]));
        assert!(matches!(b.forward(&mut ctx, x, [3, 3, 3]), Err(Error::Shape(_))));
    }
}
