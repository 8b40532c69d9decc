//! U-shaped feature extractor: LKA encoder stages, a bottleneck decoder
//! block, one decoder block per remaining resolution, and channel-concat
//! skip connections.
//!
//! With `n` stages and patch strides `[s1, 2, 2, ...]` the decoder has one
//! bottleneck block on `f_n`, one skip-consuming block for each of
//! `f_{n-1} .. f_1`, and `log2(s1) − 1` trailing blocks that finish the
//! climb back to input resolution. For the default `[4, 2, 2, 2]` plan
//! this is the 4 + 1 layout.

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, ParamStore, Var};
use crate::blocks::{tokens_to_volume, LkaBlock, LkaKernels, PatchEmbed};
use crate::error::{Error, Result};
use crate::ops::{upsample2x, Activation, BatchNorm3d, ConvBnAct, Conv3dSpec, UpsampleMode, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{Real, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlkanetConfig {
    pub in_channels: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratios: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub lka: LkaKernels,
    /// Output width of each decoder block, bottleneck first. Derived when absent.
    pub decoder_channels: Option<Vec<usize>>,
    pub out_channels: usize,
    pub upsample: UpsampleMode,
}

/// One decoder block of the resolved plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLevel {
    pub in_channels: usize,
    /// 0-based encoder stage whose output is concatenated onto the input.
    pub skip_stage: Option<usize>,
    pub out_channels: usize,
}

impl UlkanetConfig {
    /// Global extractor of the normal model.
    pub fn normal() -> Self {
        UlkanetConfig {
            in_channels: 1,
            dims: vec![64, 128, 256, 512],
            depths: vec![3, 4, 6, 3],
            mlp_ratios: vec![8, 8, 4, 4],
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            lka: LkaKernels::default(),
            decoder_channels: None,
            out_channels: 64,
            upsample: UpsampleMode::Trilinear,
        }
    }

    pub fn large() -> Self {
        UlkanetConfig {
            dims: vec![96, 192, 384, 768],
            depths: vec![3, 3, 24, 3],
            ..Self::normal()
        }
    }

    /// Two-stage extractor used on sub-cubes.
    pub fn local() -> Self {
        UlkanetConfig {
            dims: vec![64, 128],
            depths: vec![3, 4],
            mlp_ratios: vec![8, 8],
            patch_kernels: vec![7, 3],
            patch_strides: vec![4, 2],
            ..Self::normal()
        }
    }

    /// Desk-scale global extractor for 32³ inputs.
    pub fn tiny() -> Self {
        UlkanetConfig {
            in_channels: 1,
            dims: vec![16, 32, 48, 64],
            depths: vec![1, 1, 2, 1],
            mlp_ratios: vec![8, 8, 4, 4],
            patch_kernels: vec![3, 3, 3, 3],
            patch_strides: vec![2, 2, 2, 2],
            lka: LkaKernels::default(),
            decoder_channels: None,
            out_channels: 16,
            upsample: UpsampleMode::Trilinear,
        }
    }

    pub fn tiny_local() -> Self {
        UlkanetConfig {
            dims: vec![16, 32],
            depths: vec![1, 1],
            mlp_ratios: vec![8, 8],
            patch_kernels: vec![3, 3],
            patch_strides: vec![2, 2],
            ..Self::tiny()
        }
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    /// Product of all patch strides; input extents must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.patch_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n == 0 {
            return Err(Error::config("dims", "at least one encoder stage is required"));
        }
        for (name, len) in [
            ("depths", self.depths.len()),
            ("mlp_ratios", self.mlp_ratios.len()),
            ("patch_kernels", self.patch_kernels.len()),
            ("patch_strides", self.patch_strides.len()),
        ] {
            if len != n {
                return Err(Error::config(name, format!("expected {n} entries (one per stage), got {len}")));
            }
        }
        let s0 = self.patch_strides[0];
        if s0 < 2 || !s0.is_power_of_two() {
            return Err(Error::config("patch_strides", "first stride must be a power of two ≥ 2"));
        }
        if self.patch_strides[1..].iter().any(|&s| s != 2) {
            return Err(Error::config(
                "patch_strides",
                "strides after the first stage must be 2 so every skip meets a ×2 decoder block",
            ));
        }
        if self.dims.iter().chain(&self.mlp_ratios).chain(&self.patch_kernels).any(|&v| v == 0) || self.out_channels == 0 {
            return Err(Error::config("dims", "widths, ratios and kernels must be positive"));
        }
        if let Some(dc) = &self.decoder_channels {
            let want = self.decoder_levels_count();
            if dc.len() != want {
                return Err(Error::config(
                    "decoder_channels",
                    format!("expected {want} entries, got {}", dc.len()),
                ));
            }
            if dc.last() != Some(&self.out_channels) {
                return Err(Error::config("decoder_channels", "last entry must equal out_channels"));
            }
        }
        Ok(())
    }

    fn decoder_levels_count(&self) -> usize {
        let extra = self.patch_strides[0].trailing_zeros() as usize - 1;
        self.stages() + extra
    }

    /// Resolved decoder plan, bottleneck first.
    pub fn decoder_plan(&self) -> Vec<DecoderLevel> {
        let n = self.stages();
        let count = self.decoder_levels_count();
        let mut levels = Vec::with_capacity(count);
        let mut prev = self.dims[n - 1];
        for k in 0..count {
            let last = k + 1 == count;
            let skip_stage = if k == 0 || k >= n { None } else { Some(n - 1 - k) };
            let in_channels = prev + skip_stage.map_or(0, |s| self.dims[s]);
            let derived = match (k, skip_stage) {
                (0, _) => self.dims[n - 1] / 2,
                (_, Some(s)) => self.dims[s] / 2,
                (_, None) => prev,
            };
            let out_channels = match &self.decoder_channels {
                Some(dc) => dc[k],
                None if last => self.out_channels,
                None => derived.max(1),
            };
            levels.push(DecoderLevel {
                in_channels,
                skip_stage,
                out_channels,
            });
            prev = out_channels;
        }
        levels
    }

    /// Spatial extents of every encoder stage output, or the stage at which
    /// the plan breaks.
    pub fn stage_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.stages());
        let mut cur = input;
        for i in 0..self.stages() {
            let spec = Conv3dSpec::new(cur[1], self.dims[i], self.patch_kernels[i]).with_stride(self.patch_strides[i]);
            cur = spec
                .output_shape(cur)
                .map_err(|e| Error::shape(format!("encoder stage {}: {e}", i + 1)))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn check_input(&self, input: Shape) -> Result<()> {
        if input[1] != self.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels, input[1]
            )));
        }
        let m = self.total_stride();
        if input[2..].iter().any(|&e| e == 0 || e % m != 0) {
            return Err(Error::shape(format!(
                "spatial extents {:?} must be positive multiples of {m}",
                &input[2..]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub patch: PatchEmbed,
    pub blocks: Vec<LkaBlock>,
    pub norm: BatchNorm3d,
}

impl EncoderStage {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (mut tokens, spatial) = self.patch.forward(ctx, x)?;
        for b in &self.blocks {
            tokens = b.forward(ctx, tokens, spatial)?;
        }
        let vol = tokens_to_volume(ctx, tokens, spatial)?;
        self.norm.forward(ctx, vol)
    }
}

/// Three Conv3D(k=3, p=1) + BatchNorm + LeakyReLU units, then ×2 upsampling.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub convs: [ConvBnAct; 3],
    pub skip_stage: Option<usize>,
    pub upsample: UpsampleMode,
}

impl DecoderBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level: &DecoderLevel,
        upsample: UpsampleMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let (i, o) = (level.in_channels, level.out_channels);
        Ok(DecoderBlock {
            convs: [
                ConvBnAct::new(store, &format!("{prefix}.conv0"), Conv3dSpec::new(i, o, 3), act, rng)?,
                ConvBnAct::new(store, &format!("{prefix}.conv1"), Conv3dSpec::new(o, o, 3), act, rng)?,
                ConvBnAct::new(store, &format!("{prefix}.conv2"), Conv3dSpec::new(o, o, 3), act, rng)?,
            ],
            skip_stage: level.skip_stage,
            upsample,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(ctx, y)?;
        }
        Ok(upsample2x(&mut ctx.tape, y, self.upsample))
    }
}

#[derive(Clone, Debug)]
pub struct Ulkanet {
    pub config: UlkanetConfig,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderBlock>,
}

impl Ulkanet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &UlkanetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::with_capacity(config.stages());
        let mut in_ch = config.in_channels;
        for i in 0..config.stages() {
            let p = format!("{prefix}.enc{}", i + 1);
            let dim = config.dims[i];
            let patch = PatchEmbed::new(
                store,
                &format!("{p}.patch"),
                in_ch,
                dim,
                config.patch_kernels[i],
                config.patch_strides[i],
                rng,
            )?;
            let blocks = (0..config.depths[i])
                .map(|j| LkaBlock::new(store, &format!("{p}.lka{j}"), dim, config.mlp_ratios[i], config.lka, rng))
                .collect::<Result<Vec<_>>>()?;
            let norm = BatchNorm3d::new(store, &format!("{p}.norm"), dim)?;
            encoder.push(EncoderStage { patch, blocks, norm });
            in_ch = dim;
        }
        let decoder = config
            .decoder_plan()
            .iter()
            .enumerate()
            .map(|(k, level)| {
                let name = if k == 0 {
                    format!("{prefix}.dec_bottleneck")
                } else {
                    format!("{prefix}.dec{k}")
                };
                DecoderBlock::new(store, &name, level, config.upsample, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ulkanet {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Stage features `f1 .. fn`.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let shape = ctx.tape.shape(x);
        self.config.check_input(shape)?;
        self.config.stage_shapes(shape)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            cur = stage
                .forward(ctx, cur)
                .map_err(|e| Error::shape(format!("encoder stage {}: {e}", i + 1)))?;
            feats.push(cur);
        }
        Ok(feats)
    }

    pub fn decode<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: &[Var]) -> Result<Var> {
        if features.len() != self.encoder.len() {
            return Err(Error::shape(format!(
                "decoder needs {} stage features, got {}",
                self.encoder.len(),
                features.len()
            )));
        }
        let mut y = *features.last().expect("at least one stage");
        for block in &self.decoder {
            if let Some(s) = block.skip_stage {
                let (ys, fs) = (ctx.tape.shape(y), ctx.tape.shape(features[s]));
                if ys[0] != fs[0] || ys[2..] != fs[2..] {
                    return Err(Error::shape(format!(
                        "skip from stage {} has shape {fs:?}, decoder state is {ys:?}",
                        s + 1
                    )));
                }
                y = ctx.tape.concat_channels(&[y, features[s]])?;
            }
            y = block.forward(ctx, y)?;
        }
        Ok(y)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = self.encode(ctx, x)?;
        self.decode(ctx, &f)
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        [input[0], self.config.out_channels, input[2], input[3], input[4]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_has_bottleneck_plus_four_blocks() {
        let plan = UlkanetConfig::normal().decoder_plan();
        assert_eq!(plan.len(), 5);
        let skips: Vec<_> = plan.iter().map(|l| l.skip_stage).collect();
        assert_eq!(skips, vec![None, Some(2), Some(1), Some(0), None]);
        assert_eq!(plan[0].in_channels, 512);
        assert_eq!(plan[1].in_channels, 256 + 256);
        assert_eq!(plan.last().unwrap().out_channels, 64);
    }

    #[test]
    fn local_plan_has_three_blocks() {
        assert_eq!(UlkanetConfig::local().decoder_plan().len(), 3);
    }

    #[test]
    fn normal_stage_shapes() {
        let shapes = UlkanetConfig::normal().stage_shapes([1, 1, 96, 96, 96]).unwrap();
        let got: Vec<_> = shapes.iter().map(|s| (s[1], s[2])).collect();
        assert_eq!(got, vec![(64, 24), (128, 12), (256, 6), (512, 3)]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = UlkanetConfig::normal();
        let err = cfg.check_input([1, 1, 48, 96, 96]).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn mismatched_lists_are_config_errors() {
        let mut cfg = UlkanetConfig::tiny();
        cfg.depths.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
