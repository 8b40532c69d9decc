//! Dual encoding: a global extractor over the whole cube plus a shallower
//! local extractor over `N = n³` sub-cubes, summed element-wise and fed to a
//! segmentation head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Activation, Conv3d, Conv3dSpec, ConvBnAct};
use crate::rng::Rng;
use crate::tensor::{LabelVolume, Real, Shape, Tensor};
use crate::ulkanet::{Ulkanet, UlkanetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoGoNetConfig {
    pub global: UlkanetConfig,
    pub local: UlkanetConfig,
    pub partitions_n: usize,
    pub num_classes: usize,
    /// One local extractor shared by every sub-cube (default) or one per cube.
    pub share_local: bool,
    /// `false` drops the local path, leaving a single global extractor.
    #[serde(default = "yes")]
    pub use_local: bool,
}

fn yes() -> bool {
    true
}

impl LoGoNetConfig {
    pub fn normal(num_classes: usize) -> Self {
        LoGoNetConfig {
            global: UlkanetConfig::normal(),
            local: UlkanetConfig::local(),
            partitions_n: 8,
            num_classes,
            share_local: true,
            use_local: true,
        }
    }

    pub fn large(num_classes: usize) -> Self {
        LoGoNetConfig {
            global: UlkanetConfig::large(),
            ..Self::normal(num_classes)
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        LoGoNetConfig {
            global: UlkanetConfig::tiny(),
            local: UlkanetConfig::tiny_local(),
            partitions_n: 8,
            num_classes,
            share_local: true,
            use_local: true,
        }
    }

    pub fn fusion_channels(&self) -> usize {
        self.global.out_channels
    }

    /// Grid edge `n` with `n³ = partitions_n`.
    pub fn grid(&self) -> Result<usize> {
        cube_root(self.partitions_n)
    }

    /// Smallest extent multiple every input axis must satisfy.
    pub fn required_multiple(&self) -> Result<usize> {
        let n = self.grid()?;
        Ok(lcm(self.global.total_stride(), n * self.local.total_stride()))
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.local.validate()?;
        self.grid().map_err(|e| Error::config("partitions_n", e.to_string()))?;
        if self.global.out_channels != self.local.out_channels {
            return Err(Error::config(
                "local.out_channels",
                format!(
                    "global and local paths must emit the same width for fusion ({} vs {})",
                    self.global.out_channels, self.local.out_channels
                ),
            ));
        }
        if self.global.in_channels != self.local.in_channels {
            return Err(Error::config("local.in_channels", "both paths read the same input"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need background plus at least one class"));
        }
        Ok(())
    }

    pub fn check_input(&self, input: Shape) -> Result<()> {
        let [_, _, s, h, w] = input;
        if s != h || h != w {
            return Err(Error::Partition(format!("input {:?} is not cube-shaped", &input[2..])));
        }
        let m = self.required_multiple()?;
        if s == 0 || s % m != 0 {
            return Err(Error::shape(format!(
                "spatial extents {:?} must be positive multiples of {m}",
                &input[2..]
            )));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn cube_root(n: usize) -> Result<usize> {
    let r = (1..=n).find(|r| r * r * r >= n).unwrap_or(0);
    if n == 0 || r * r * r != n {
        return Err(Error::Partition(format!("{n} is not a positive perfect cube")));
    }
    Ok(r)
}

/// Everything needed to undo a partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionIndex {
    pub batch: usize,
    pub channels: usize,
    /// Cubes per axis.
    pub grid: usize,
    /// Sub-cube edge `B = ∛(S·H·W / N)`.
    pub edge: usize,
}

impl PartitionIndex {
    pub fn for_input(shape: Shape, partitions_n: usize) -> Result<Self> {
        let n = cube_root(partitions_n)?;
        let [b, c, s, h, w] = shape;
        if s != h || h != w {
            return Err(Error::Partition(format!("spatial extents {:?} are not a cube", &shape[2..])));
        }
        if s == 0 || s % n != 0 {
            return Err(Error::Partition(format!("extent {s} is not divisible by {n}")));
        }
        Ok(PartitionIndex {
            batch: b,
            channels: c,
            grid: n,
            edge: s / n,
        })
    }

    pub fn count(&self) -> usize {
        self.grid.pow(3)
    }

    pub fn full_shape(&self) -> Shape {
        let e = self.grid * self.edge;
        [self.batch, self.channels, e, e, e]
    }

    /// Batch-folded sub-cube tensor shape `(b·N, C, B, B, B)`.
    pub fn folded_shape(&self) -> Shape {
        [self.batch * self.count(), self.channels, self.edge, self.edge, self.edge]
    }

    fn with_channels(mut self, c: usize) -> Self {
        self.channels = c;
        self
    }
}

/// Fold the sub-cubes into the batch axis. Cube `k` of batch item `b` lands
/// at folded index `b·N + k`, with `k` row-major over the `n×n×n` grid.
fn fold<T: Real>(x: &Tensor<T>, idx: &PartitionIndex) -> Tensor<T> {
    let (n, e, c) = (idx.grid, idx.edge, idx.channels);
    let full = n * e;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..idx.batch {
        for gz in 0..n {
            for gy in 0..n {
                for gx in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * full * full * full;
                        for z in 0..e {
                            for y in 0..e {
                                let row = base + ((gz * e + z) * full + gy * e + y) * full + gx * e;
                                out.extend_from_slice(&xd[row..row + e]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(idx.folded_shape(), out).expect("partition preserves size")
}

fn unfold<T: Real>(cubes: &Tensor<T>, idx: &PartitionIndex) -> Tensor<T> {
    let (n, e, c) = (idx.grid, idx.edge, idx.channels);
    let full = n * e;
    let mut out = vec![T::zero(); cubes.numel()];
    let cd = cubes.data();
    let mut src = 0;
    for b in 0..idx.batch {
        for gz in 0..n {
            for gy in 0..n {
                for gx in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * full * full * full;
                        for z in 0..e {
                            for y in 0..e {
                                let row = base + ((gz * e + z) * full + gy * e + y) * full + gx * e;
                                out[row..row + e].copy_from_slice(&cd[src..src + e]);
                                src += e;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(idx.full_shape(), out).expect("reassembly preserves size")
}

/// Split a cube-shaped volume into `partitions_n` sub-cubes of edge
/// `B = ∛(S·H·W / N)`, row-major over the grid, each with the batch axis
/// of the input.
pub fn partition_cube<T: Real>(x: &Tensor<T>, partitions_n: usize) -> Result<(Vec<Tensor<T>>, PartitionIndex)> {
    let idx = PartitionIndex::for_input(x.shape(), partitions_n)?;
    let folded = fold(x, &idx);
    let per_batch = idx.count();
    let cubes = (0..per_batch)
        .map(|k| {
            let items: Vec<_> = (0..idx.batch).map(|b| folded.batch_item(b * per_batch + k)).collect();
            Tensor::stack_batch(&items).expect("uniform cubes")
        })
        .collect();
    Ok((cubes, idx))
}

/// Inverse of [`partition_cube`]; cubes may carry a different channel
/// count than the partitioned input.
pub fn reassemble<T: Real>(cubes: &[Tensor<T>], index: &PartitionIndex) -> Result<Tensor<T>> {
    if cubes.len() != index.count() {
        return Err(Error::Partition(format!(
            "expected {} cubes, got {}",
            index.count(),
            cubes.len()
        )));
    }
    let c = cubes[0].channels();
    let e = index.edge;
    for cube in cubes {
        if cube.shape() != [index.batch, c, e, e, e] {
            return Err(Error::Partition(format!(
                "cube shape {:?} inconsistent with index (batch {}, edge {e})",
                cube.shape(),
                index.batch
            )));
        }
    }
    let idx = index.with_channels(c);
    let mut items = Vec::with_capacity(idx.batch * idx.count());
    for b in 0..idx.batch {
        for cube in cubes {
            items.push(cube.batch_item(b));
        }
    }
    Ok(unfold(&Tensor::stack_batch(&items)?, &idx))
}

/// Tape op: `(b, C, S, S, S)` → `(b·N, C, B, B, B)`.
pub fn partition_var<T: Real>(tape: &mut Tape<T>, x: Var, partitions_n: usize) -> Result<(Var, PartitionIndex)> {
    let idx = PartitionIndex::for_input(tape.shape(x), partitions_n)?;
    let out = fold(tape.value(x), &idx);
    let v = tape.push(out, &[x], Box::new(move |_, _, g| vec![Some(unfold(g, &idx))]));
    Ok((v, idx))
}

/// Tape op: `(b·N, C', B, B, B)` → `(b, C', S, S, S)`.
pub fn reassemble_var<T: Real>(tape: &mut Tape<T>, cubes: Var, index: &PartitionIndex) -> Result<Var> {
    let s = tape.shape(cubes);
    let e = index.edge;
    if s[0] != index.batch * index.count() || s[2..] != [e, e, e] {
        return Err(Error::Partition(format!(
            "folded cubes {s:?} inconsistent with partition of edge {e} into {}",
            index.count()
        )));
    }
    let idx = index.with_channels(s[1]);
    let out = unfold(tape.value(cubes), &idx);
    Ok(tape.push(out, &[cubes], Box::new(move |_, _, g| vec![Some(fold(g, &idx))])))
}

/// Conv3D(k=3) + BatchNorm + GELU, then a 1×1×1 classifier.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub fuse: ConvBnAct,
    pub classifier: Conv3d,
}

impl SegmentationHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SegmentationHead {
            fuse: ConvBnAct::new(
                store,
                &format!("{prefix}.fuse"),
                Conv3dSpec::new(channels, channels, 3),
                Activation::Gelu,
                rng,
            )?,
            classifier: Conv3d::new(
                store,
                &format!("{prefix}.classifier"),
                Conv3dSpec::pointwise(channels, num_classes),
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.fuse.forward(ctx, x)?;
        self.classifier.forward(ctx, y)
    }
}

/// Pre-head tensors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DualFeatures {
    pub global: Var,
    pub local: Var,
    pub fused: Var,
}

/// Global and local extractors without a head; shared by fine-tuning and
/// pre-training.
#[derive(Clone, Debug)]
pub struct LoGoBackbone {
    pub config: LoGoNetConfig,
    pub global: Ulkanet,
    pub locals: Vec<Ulkanet>,
}

impl LoGoBackbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &LoGoNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let global = Ulkanet::new(store, "global", &config.global, rng)?;
        let locals = if !config.use_local {
            Vec::new()
        } else if config.share_local {
            vec![Ulkanet::new(store, "local", &config.local, rng)?]
        } else {
            (0..config.partitions_n)
                .map(|k| Ulkanet::new(store, &format!("local{k}"), &config.local, rng))
                .collect::<Result<_>>()?
        };
        Ok(LoGoBackbone {
            config: config.clone(),
            global,
            locals,
        })
    }

    pub fn features<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<DualFeatures> {
        self.config.check_input(ctx.tape.shape(x))?;
        let global = self.global.forward(ctx, x)?;
        if self.locals.is_empty() {
            let zeros = Tensor::zeros(ctx.tape.shape(global));
            let local = ctx.input(zeros);
            return Ok(DualFeatures {
                global,
                local,
                fused: global,
            });
        }
        let (cubes, idx) = partition_var(&mut ctx.tape, x, self.config.partitions_n)?;
        let local_cubes = if let [shared] = self.locals.as_slice() {
            shared.forward(ctx, cubes)?
        } else {
            // per-cube weights: run each cube (across the batch) separately
            let per = idx.count();
            let mut outs = Vec::with_capacity(per * idx.batch);
            for (k, net) in self.locals.iter().enumerate() {
                let sel = select_batch(&mut ctx.tape, cubes, (0..idx.batch).map(|b| b * per + k).collect())?;
                outs.push(net.forward(ctx, sel)?);
            }
            interleave_batches(&mut ctx.tape, &outs, idx.batch)?
        };
        let local = reassemble_var(&mut ctx.tape, local_cubes, &idx)?;
        let (gs, ls) = (ctx.tape.shape(global), ctx.tape.shape(local));
        if gs != ls {
            return Err(Error::shape(format!("global output {gs:?} vs reassembled local output {ls:?}")));
        }
        let fused = ctx.tape.add(global, local)?;
        Ok(DualFeatures { global, local, fused })
    }
}

/// Pick batch items `rows` into a new tensor.
fn select_batch<T: Real>(tape: &mut Tape<T>, x: Var, rows: Vec<usize>) -> Result<Var> {
    let src = tape.value(x);
    let items: Vec<_> = rows.iter().map(|&r| src.batch_item(r)).collect();
    let out = Tensor::stack_batch(&items)?;
    Ok(tape.push(
        out,
        &[x],
        Box::new(move |inp, _, g| {
            let mut gx = Tensor::zeros(inp[0].shape());
            let per = g.numel() / rows.len();
            for (i, &r) in rows.iter().enumerate() {
                gx.data_mut()[r * per..(r + 1) * per]
                    .iter_mut()
                    .zip(&g.data()[i * per..(i + 1) * per])
                    .for_each(|(d, &v)| *d += v);
            }
            vec![Some(gx)]
        }),
    ))
}

/// `parts[k]` holds cube `k` for every batch item; produce batch-major order.
fn interleave_batches<T: Real>(tape: &mut Tape<T>, parts: &[Var], batch: usize) -> Result<Var> {
    let per = parts.len();
    let items: Vec<_> = (0..batch)
        .flat_map(|b| parts.iter().map(move |&p| (p, b)))
        .map(|(p, b)| tape.value(p).batch_item(b))
        .collect();
    let out = Tensor::stack_batch(&items)?;
    Ok(tape.push(
        out,
        parts,
        Box::new(move |inp, _, g| {
            let item = g.numel() / (batch * per);
            inp.iter()
                .enumerate()
                .map(|(k, x)| {
                    let mut d = Vec::with_capacity(x.numel());
                    for b in 0..batch {
                        let r = b * per + k;
                        d.extend_from_slice(&g.data()[r * item..(r + 1) * item]);
                    }
                    Some(Tensor::from_vec(x.shape(), d).expect("cube slice"))
                })
                .collect()
        }),
    ))
}

#[derive(Clone, Debug)]
pub struct LoGoNet {
    pub backbone: LoGoBackbone,
    pub head: SegmentationHead,
}

impl LoGoNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &LoGoNetConfig, rng: &mut Rng) -> Result<Self> {
        let backbone = LoGoBackbone::new(store, config, rng)?;
        let head = SegmentationHead::new(store, "head", config.fusion_channels(), config.num_classes, rng)?;
        Ok(LoGoNet { backbone, head })
    }

    pub fn config(&self) -> &LoGoNetConfig {
        &self.backbone.config
    }

    /// Logits `(b, classes, S, H, W)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = self.backbone.features(ctx, x)?;
        self.head.forward(ctx, f.fused)
    }
}

/// Per-voxel argmax over classes; ties go to the smaller class index.
pub fn predict_segmentation<T: Real>(logits: &Tensor<T>) -> LabelVolume {
    let [b, c, s, h, w] = logits.shape();
    let v = s * h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * v);
    for bi in 0..b {
        for i in 0..v {
            let mut best = 0;
            let mut best_v = d[bi * c * v + i];
            for k in 1..c {
                let x = d[(bi * c + k) * v + i];
                if x > best_v {
                    best = k;
                    best_v = x;
                }
            }
            out.push(best as u32);
        }
    }
    LabelVolume { shape: [b, s, h, w], data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn edge_follows_cube_root_formula() {
        let idx = PartitionIndex::for_input([1, 1, 96, 96, 96], 8).unwrap();
        assert_eq!((idx.grid, idx.edge, idx.count()), (2, 48, 8));
    }

    #[test]
    fn single_partition_is_identity() {
        let x = rng::normal_tensor::<f64>([1, 2, 4, 4, 4], 0.0, 1.0, &mut rng::seeded(3));
        let (cubes, _) = partition_cube(&x, 1).unwrap();
        assert_eq!(cubes.len(), 1);
        assert_eq!(cubes[0], x);
    }

    #[test]
    fn bad_partition_requests() {
        let x = Tensor::<f64>::zeros([1, 1, 6, 6, 6]);
        assert!(matches!(partition_cube(&x, 9), Err(Error::Partition(_))));
        assert!(matches!(partition_cube(&x, 64), Err(Error::Partition(_))));
        let y = Tensor::<f64>::zeros([1, 1, 4, 4, 8]);
        assert!(matches!(partition_cube(&y, 8), Err(Error::Partition(_))));
    }

    #[test]
    fn sub_cube_ordering_is_row_major() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4, 4], |i| i as f64);
        let (cubes, _) = partition_cube(&x, 8).unwrap();
        // cube 1 is (gz=0, gy=0, gx=1): its first voxel is x[0,0,0,0,2]
        assert_eq!(cubes[1].data()[0], x.at([0, 0, 0, 0, 2]));
        // cube 6 is (gz=1, gy=1, gx=0)
        assert_eq!(cubes[6].data()[0], x.at([0, 0, 2, 2, 0]));
    }

    #[test]
    fn reassemble_rejects_inconsistent_cubes() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4, 4]);
        let (mut cubes, idx) = partition_cube(&x, 8).unwrap();
        cubes.pop();
        assert!(matches!(reassemble(&cubes, &idx), Err(Error::Partition(_))));
    }

    #[test]
    fn argmax_ties_go_to_class_zero() {
        let logits = Tensor::<f64>::full([1, 3, 2, 2, 2], 0.5);
        assert!(predict_segmentation(&logits).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn required_multiple_of_tiny_config() {
        assert_eq!(LoGoNetConfig::tiny(3).required_multiple().unwrap(), 16);
        assert_eq!(LoGoNetConfig::normal(14).required_multiple().unwrap(), 32);
    }
}
