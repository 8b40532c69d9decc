//! Analytic parameter and MAC accounting.
//!
//! [`count_model`] walks the layers of a [`LoGoNet`] in forward order using
//! only shapes. Batch-norm and activation outputs are tallied in a separate
//! elementwise column and kept out of the MAC total. One MAC is reported as
//! two FLOPs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{LkaBlock, LkaKernels, PatchEmbed};
use crate::error::{Error, Result};
use crate::logonet::{LoGoNet, PartitionIndex, SegmentationHead};
use crate::ops::{BatchNorm3d, Conv3d, Conv3dSpec, ConvBnAct};
use crate::tensor::{numel, Shape};
use crate::ulkanet::Ulkanet;

pub const REFERENCE_GFLOPS: f64 = 246.96;
pub const REFERENCE_PARAMS_M: f64 = 67.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: LayerKind,
    pub output: Shape,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl CostTotals {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub config_hash: String,
    pub input: Shape,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

/// `(params, macs)` of one convolution producing `out_shape`.
pub fn count_conv3d(spec: &Conv3dSpec, out_shape: Shape) -> (u64, u64) {
    let w = numel(&spec.weight_shape()) as u64;
    let params = w + if spec.has_bias { spec.out_channels as u64 } else { 0 };
    (params, spec.macs(out_shape))
}

/// Collects rows while threading shapes through the layers.
#[derive(Default)]
pub struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conv(&mut self, name: &str, conv: &Conv3d, input: Shape) -> Result<Shape> {
        let out = conv.spec.output_shape(input)?;
        let (params, macs) = count_conv3d(&conv.spec, out);
        self.rows.push(CostRow {
            name: name.to_string(),
            kind: LayerKind::Conv,
            output: out,
            params,
            macs,
            elementwise: 0,
        });
        Ok(out)
    }

    pub fn norm(&mut self, name: &str, bn: &BatchNorm3d, input: Shape) -> Result<Shape> {
        if input[1] != bn.channels {
            return Err(Error::shape(format!("{name}: {} channels into a {}-channel norm", input[1], bn.channels)));
        }
        self.rows.push(CostRow {
            name: name.to_string(),
            kind: LayerKind::BatchNorm,
            output: input,
            params: 2 * bn.channels as u64,
            macs: 0,
            elementwise: numel(&input) as u64,
        });
        Ok(input)
    }

    pub fn act(&mut self, name: &str, input: Shape) -> Shape {
        self.rows.push(CostRow {
            name: name.to_string(),
            kind: LayerKind::Activation,
            output: input,
            params: 0,
            macs: 0,
            elementwise: numel(&input) as u64,
        });
        input
    }

    pub fn conv_bn_act(&mut self, name: &str, m: &ConvBnAct, input: Shape) -> Result<Shape> {
        let s = self.conv(&format!("{name}.conv"), &m.conv, input)?;
        let s = self.norm(&format!("{name}.norm"), &m.norm, s)?;
        Ok(self.act(&format!("{name}.act"), s))
    }

    pub fn patch_embed(&mut self, name: &str, p: &PatchEmbed, input: Shape) -> Result<Shape> {
        let s = self.conv(&format!("{name}.proj"), &p.proj, input)?;
        self.norm(&format!("{name}.norm"), &p.norm, s)
    }

    pub fn lka_block(&mut self, name: &str, b: &LkaBlock, input: Shape) -> Result<Shape> {
        let s = self.norm(&format!("{name}.norm1"), &b.norm1, input)?;
        let s = self.conv(&format!("{name}.attn.chconv"), &b.attn.chconv, s)?;
        let s = self.conv(&format!("{name}.attn.diconv"), &b.attn.diconv, s)?;
        let s = self.conv(&format!("{name}.attn.pointwise"), &b.attn.pointwise, s)?;
        let s = self.norm(&format!("{name}.norm2"), &b.norm2, s)?;
        let s = self.conv(&format!("{name}.mlp.fc1"), &b.mlp.fc1, s)?;
        let s = self.act(&format!("{name}.mlp.act1"), s);
        let s = self.conv(&format!("{name}.mlp.dwconv"), &b.mlp.dwconv, s)?;
        let s = self.act(&format!("{name}.mlp.act2"), s);
        self.conv(&format!("{name}.mlp.fc2"), &b.mlp.fc2, s)
    }

    pub fn ulkanet(&mut self, name: &str, net: &Ulkanet, input: Shape) -> Result<Shape> {
        net.config.check_input(input)?;
        let mut feats = Vec::new();
        let mut s = input;
        for (i, st) in net.encoder.iter().enumerate() {
            let p = format!("{name}.enc{}", i + 1);
            s = self.patch_embed(&format!("{p}.patch"), &st.patch, s)?;
            for (j, b) in st.blocks.iter().enumerate() {
                s = self.lka_block(&format!("{p}.lka{j}"), b, s)?;
            }
            s = self.norm(&format!("{p}.norm"), &st.norm, s)?;
            feats.push(s);
        }
        for (k, block) in net.decoder.iter().enumerate() {
            if let Some(st) = block.skip_stage {
                s[1] += feats[st][1];
            }
            let p = if k == 0 {
                format!("{name}.dec_bottleneck")
            } else {
                format!("{name}.dec{k}")
            };
            for (j, c) in block.convs.iter().enumerate() {
                s = self.conv_bn_act(&format!("{p}.conv{j}"), c, s)?;
            }
            s = [s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]];
        }
        Ok(s)
    }

    pub fn head(&mut self, name: &str, h: &SegmentationHead, input: Shape) -> Result<Shape> {
        let s = self.conv_bn_act(&format!("{name}.fuse"), &h.fuse, input)?;
        self.conv(&format!("{name}.classifier"), &h.classifier, s)
    }

    pub fn logonet(&mut self, net: &LoGoNet, input: Shape) -> Result<Shape> {
        let cfg = net.config();
        cfg.check_input(input)?;
        let g = self.ulkanet("global", &net.backbone.global, input)?;
        let idx = PartitionIndex::for_input(input, cfg.partitions_n)?;
        match net.backbone.locals.as_slice() {
            [] => {}
            [shared] => {
                self.ulkanet("local", shared, idx.folded_shape())?;
            }
            many => {
                let mut one = idx.folded_shape();
                one[0] = input[0];
                for (k, l) in many.iter().enumerate() {
                    self.ulkanet(&format!("local{k}"), l, one)?;
                }
            }
        }
        self.head("head", &net.head, g)
    }

    pub fn rows(&self) -> &[CostRow] {
        &self.rows
    }

    pub fn into_report(self, model: &str, config_hash: String, input: Shape) -> CostReport {
        let totals = self.rows.iter().fold(CostTotals::default(), |mut t, r| {
            t.params += r.params;
            t.macs += r.macs;
            t.elementwise += r.elementwise;
            t
        });
        CostReport {
            model: model.to_string(),
            config_hash,
            input,
            rows: self.rows,
            totals,
        }
    }
}

/// FNV-1a over a serialized config, as hex.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let text = toml::to_string(config).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn count_model(net: &LoGoNet, input: Shape) -> Result<CostReport> {
    let mut w = Walker::new();
    w.logonet(net, input)?;
    Ok(w.into_report("LoGoNet", config_hash(net.config()), input))
}

impl CostReport {
    /// Aligned-column table; `reference` appends reference totals for comparison.
    pub fn to_text(&self, reference: Option<(f64, f64)>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} cost report (1 MAC = 2 FLOPs)", self.model);
        let _ = writeln!(s, "# input {:?}  config {}", self.input, self.config_hash);
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}  {:>14}", "layer", "params", "MACs", "elementwise");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}  {:>14}", r.name, r.params, r.macs, r.elementwise);
        }
        let t = &self.totals;
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}  {:>14}", "total", t.params, t.macs, t.elementwise);
        let _ = writeln!(
            s,
            "computed: {:.2} GFLOPs, {:.2} M params",
            t.flops() as f64 / 1e9,
            t.params as f64 / 1e6
        );
        if let Some((gf, mp)) = reference {
            let _ = writeln!(s, "reference: {gf:.2} GFLOPs, {mp:.1} M params");
            let _ = writeln!(
                s,
                "ratio computed/reference: FLOPs {:.3}, params {:.3}",
                t.flops() as f64 / 1e9 / gf,
                t.params as f64 / 1e6 / mp
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,macs,flops,elementwise\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:?},{},{},{},{}", r.name, r.kind, r.params, r.macs, 2 * r.macs, r.elementwise);
        }
        let t = &self.totals;
        let _ = writeln!(s, "total,,{},{},{},{}", t.params, t.macs, t.flops(), t.elementwise);
        s
    }
}

/// MACs of one LKA block of width `c` on a `(1, c, S, H, W)` volume.
pub fn lka_block_macs(c: usize, mlp_ratio: usize, kernels: LkaKernels, spatial: [usize; 3]) -> u64 {
    let v = (spatial[0] * spatial[1] * spatial[2]) as u64;
    let (c, h) = (c as u64, (mlp_ratio * c) as u64);
    let k3 = |k: usize| (k * k * k) as u64;
    let attn = c * k3(kernels.local) + c * k3(kernels.dilated) + c * c;
    let mlp = c * h + h * k3(3) + h * c;
    v * (attn + mlp)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::arg(format!("need at least 2 points for a fit, got {}", points.len())));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("all channel counts are equal"));
    }
    Ok(sxy / sxx)
}

/// Fitted exponent of block MACs against channel count.
pub fn verify_lka_complexity(channels: &[usize], mlp_ratio: usize, kernels: LkaKernels, spatial: [usize; 3]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = channels
        .iter()
        .map(|&c| (c as f64, lka_block_macs(c, mlp_ratio, kernels, spatial) as f64))
        .collect();
    loglog_slope(&pts)
}

/// The dense-kernel closed form `((K/d)²·C + (2d−1)² + C)·C·W·H·Z` evaluated with
/// `K = dilated·dilation` and `d = dilation`.
pub fn closed_form_lka_macs(c: usize, kernels: LkaKernels, spatial: [usize; 3]) -> f64 {
    let k = (kernels.dilated * kernels.dilation) as f64;
    let d = kernels.dilation as f64;
    let c = c as f64;
    ((k / d).powi(2) * c + (2.0 * d - 1.0).powi(2) + c) * c * (spatial[0] * spatial[1] * spatial[2]) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_single_channel() {
        let spec = Conv3dSpec::pointwise(1, 1).with_bias(false);
        assert_eq!(count_conv3d(&spec, [1, 1, 2, 2, 2]), (1, 8));
    }

    #[test]
    fn depthwise_arithmetic() {
        let spec = Conv3dSpec::depthwise(4, 5, 1).with_bias(false);
        assert_eq!(count_conv3d(&spec, [1, 4, 3, 3, 3]), (4 * 125, 4 * 27 * 125));
    }

    #[test]
    fn slope_needs_two_points() {
        assert!(matches!(loglog_slope(&[(1.0, 1.0)]), Err(Error::Argument(_))));
        assert!((loglog_slope(&[(1.0, 3.0), (2.0, 12.0), (4.0, 48.0)]).unwrap() - 2.0).abs() < 1e-12);
    }
}
