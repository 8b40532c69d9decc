//! Finite-difference cases for every differentiable operation, from a single
//! convolution up to the full networks and the training losses.

use logonet::autograd::{Ctx, ParamId, ParamKind, ParamStore, Var};
use logonet::blocks::{LkaAttention, LkaBlock, LkaKernels, Mlp, PatchEmbed};
use logonet::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use logonet::logonet::{LoGoNet, LoGoNetConfig};
use logonet::losses::{ce_loss, dice_ce_loss, dice_loss, one_hot, softmax_channels, DiceCeConfig};
use logonet::ops::{activation, conv3d, upsample2x, Activation, BatchNorm3d, Conv3dSpec, UpsampleMode};
use logonet::rng::{normal_tensor, substream};
use logonet::ssl::{pretrain_loss_var, PretrainHead, PretrainHeadConfig, SliceTarget};
use logonet::tensor::{LabelVolume, Shape};
use logonet::ulkanet::{Ulkanet, UlkanetConfig};
use logonet::Result;
use rand::Rng as _;

pub type LossFn = Box<dyn FnMut(&mut Ctx<'_, f64>) -> Result<Var>>;

pub struct Built {
    pub store: ParamStore<f64>,
    pub loss: LossFn,
    pub opts: GradCheckOptions,
}

pub struct GradCase {
    pub name: &'static str,
    pub build: fn(u64) -> Result<Built>,
}

fn input(store: &mut ParamStore<f64>, shape: Shape, seed: u64) -> Result<ParamId> {
    store.add("input", normal_tensor(shape, 0.0, 1.0, &mut substream(seed, "input", 0)), ParamKind::Trainable)
}

/// `Σ y·r` for a fixed random `r`, so every output element carries its own
/// weight into the loss.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = normal_tensor(ctx.tape.shape(y), 0.0, 1.0, &mut substream(seed, "projection", 0));
    let r = ctx.tape.constant(r);
    ctx.tape.dot(y, r)
}

fn labels(shape: [usize; 4], classes: u32, seed: u64) -> LabelVolume {
    let mut rng = substream(seed, "labels", 0);
    let n = shape.iter().product();
    LabelVolume::new(shape, (0..n).map(|_| rng.random_range(0..classes)).collect()).expect("sized")
}

fn build_conv(seed: u64, spec: Conv3dSpec, in_shape: Shape) -> Result<Built> {
    let mut store = ParamStore::new();
    let x = input(&mut store, in_shape, seed)?;
    let w = store.add("weight", normal_tensor(spec.weight_shape(), 0.0, 0.5, &mut substream(seed, "w", 0)), ParamKind::Trainable)?;
    let b = store.add("bias", normal_tensor(spec.bias_shape(), 0.0, 0.5, &mut substream(seed, "b", 0)), ParamKind::Trainable)?;
    Ok(Built {
        store,
        loss: Box::new(move |ctx| {
            let (xv, wv, bv) = (ctx.param(x), ctx.param(w), ctx.param(b));
            let y = conv3d(&mut ctx.tape, xv, wv, Some(bv), &spec)?;
            project(ctx, y, seed)
        }),
        opts: GradCheckOptions::default(),
    })
}

/// Module cases: `f` builds the module into the store and returns the
/// forward closure over an input of `shape`.
fn build_module<M: 'static>(
    seed: u64,
    shape: Shape,
    make: impl FnOnce(&mut ParamStore<f64>, &mut logonet::rng::Rng) -> Result<M>,
    fwd: fn(&M, &mut Ctx<'_, f64>, Var) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<Built> {
    let mut store = ParamStore::new();
    let m = make(&mut store, &mut substream(seed, "init", 0))?;
    let x = input(&mut store, shape, seed)?;
    Ok(Built {
        store,
        loss: Box::new(move |ctx| {
            let xv = ctx.param(x);
            let y = fwd(&m, ctx, xv)?;
            project(ctx, y, seed)
        }),
        opts,
    })
}

fn build_loss(seed: u64, which: u8) -> Result<Built> {
    let mut store = ParamStore::new();
    let shape = [2, 3, 3, 3, 3];
    let x = input(&mut store, shape, seed)?;
    let y = labels([2, 3, 3, 3], 3, seed);
    let targets = one_hot::<f64>(&y, 3)?;
    let cfg = DiceCeConfig::new(3);
    Ok(Built {
        store,
        loss: Box::new(move |ctx| {
            let xv = ctx.param(x);
            match which {
                0 => {
                    let p = softmax_channels(&mut ctx.tape, xv);
                    dice_loss(&mut ctx.tape, p, &targets, cfg.eps, false)
                }
                1 => {
                    let p = softmax_channels(&mut ctx.tape, xv);
                    ce_loss(&mut ctx.tape, p, &targets)
                }
                _ => dice_ce_loss(&mut ctx.tape, xv, &y, &cfg),
            }
        }),
        opts: GradCheckOptions::default(),
    })
}

fn net_opts() -> GradCheckOptions {
    GradCheckOptions {
        max_elements: 3,
        max_tensors: 16,
        ..GradCheckOptions::default()
    }
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv3d dense",
            build: |s| build_conv(s, Conv3dSpec::new(3, 4, 3).with_padding(1), [2, 3, 4, 4, 4]),
        },
        GradCase {
            name: "conv3d strided grouped",
            build: |s| build_conv(s, Conv3dSpec::new(4, 6, 3).with_stride(2).with_padding(1).with_groups(2), [1, 4, 5, 5, 5]),
        },
        GradCase {
            name: "conv3d depthwise",
            build: |s| build_conv(s, Conv3dSpec::depthwise(4, 5, 1), [1, 4, 5, 5, 5]),
        },
        GradCase {
            name: "conv3d dilated",
            build: |s| build_conv(s, Conv3dSpec::new(2, 3, 3).with_dilation(2).with_padding(2), [1, 2, 5, 5, 5]),
        },
        GradCase {
            name: "conv3d dilated depthwise",
            build: |s| build_conv(s, Conv3dSpec::depthwise(3, 3, 3), [1, 3, 6, 6, 6]),
        },
        GradCase {
            name: "batchnorm (train)",
            build: |s| {
                build_module(
                    s,
                    [2, 3, 3, 3, 3],
                    |st, _| BatchNorm3d::new(st, "bn", 3),
                    |m, ctx, x| m.forward(ctx, x),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "gelu",
            build: |s| {
                build_module(s, [1, 2, 3, 3, 3], |_, _| Ok(()), |_, ctx, x| Ok(activation(&mut ctx.tape, Activation::Gelu, x)), GradCheckOptions::default())
            },
        },
        GradCase {
            name: "leaky relu",
            build: |s| {
                build_module(
                    s,
                    [1, 2, 3, 3, 3],
                    |_, _| Ok(()),
                    |_, ctx, x| Ok(activation(&mut ctx.tape, Activation::LeakyRelu(0.01), x)),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "trilinear upsample",
            build: |s| {
                build_module(
                    s,
                    [1, 2, 2, 3, 2],
                    |_, _| Ok(()),
                    |_, ctx, x| Ok(upsample2x(&mut ctx.tape, x, UpsampleMode::Trilinear)),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "lka attention",
            build: |s| {
                build_module(
                    s,
                    [1, 3, 5, 5, 5],
                    |st, r| LkaAttention::new(st, "attn", 3, LkaKernels::default(), r),
                    |m, ctx, x| m.forward(ctx, x),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "mlp block",
            build: |s| {
                build_module(s, [1, 3, 4, 4, 4], |st, r| Mlp::new(st, "mlp", 3, 6, r), |m, ctx, x| m.forward(ctx, x), GradCheckOptions::default())
            },
        },
        GradCase {
            name: "lka block",
            build: |s| {
                build_module(
                    s,
                    [2, 3, 4, 4, 4],
                    |st, r| LkaBlock::new(st, "blk", 3, 2, LkaKernels::default(), r),
                    |m, ctx, x| m.forward_volume(ctx, x),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "patch embed",
            build: |s| {
                build_module(
                    s,
                    [2, 1, 6, 6, 6],
                    |st, r| PatchEmbed::new(st, "pe", 1, 4, 3, 2, r),
                    |m, ctx, x| m.forward_volume(ctx, x),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "ULKANet-tiny",
            build: |s| {
                build_module(
                    s,
                    [2, 1, 16, 16, 16],
                    |st, r| Ulkanet::new(st, "u", &UlkanetConfig::tiny(), r),
                    |m, ctx, x| m.forward(ctx, x),
                    net_opts(),
                )
            },
        },
        GradCase {
            name: "LoGoNet-tiny",
            build: |s| {
                build_module(
                    s,
                    [2, 1, 16, 16, 16],
                    |st, r| LoGoNet::new(st, &LoGoNetConfig::tiny(3), r),
                    |m, ctx, x| m.forward(ctx, x),
                    net_opts(),
                )
            },
        },
        GradCase {
            name: "pretrain head",
            build: |s| {
                build_module(
                    s,
                    [2, 4, 4, 16, 3],
                    |st, r| PretrainHead::new(st, "ph", PretrainHeadConfig::for_features(4, [4, 16, 3], &[3, 5]), r),
                    |m, ctx, x| m.forward(ctx, x),
                    GradCheckOptions::default(),
                )
            },
        },
        GradCase {
            name: "pretrain loss",
            build: |s| {
                let mut store = ParamStore::new();
                let ks = vec![3usize, 5];
                let x = input(&mut store, [2, 4, 2, 5, 1], s)?;
                let lab = labels([1, 1, 4, 4], 3, s);
                let targets: Vec<SliceTarget> = [(0, 1), (0, 3), (1, 0), (1, 2)]
                    .iter()
                    .enumerate()
                    .map(|(i, &(batch, slice))| SliceTarget {
                        batch,
                        slice,
                        labels: vec![lab.data[i], lab.data[i + 4] % 5],
                    })
                    .collect();
                Ok(Built {
                    store,
                    loss: Box::new(move |ctx| {
                        let xv = ctx.param(x);
                        pretrain_loss_var(&mut ctx.tape, xv, &targets, &ks, 0.1)
                    }),
                    opts: GradCheckOptions::default(),
                })
            },
        },
        GradCase {
            name: "dice loss",
            build: |s| build_loss(s, 0),
        },
        GradCase {
            name: "cross-entropy loss",
            build: |s| build_loss(s, 1),
        },
        GradCase {
            name: "dice+ce loss",
            build: |s| build_loss(s, 2),
        },
    ]
}

pub fn run_case(case: &GradCase, seed: u64) -> Result<GradCheckReport> {
    let mut b = (case.build)(seed)?;
    check_gradients(&mut b.store, b.opts, &mut substream(seed, "probe", 0), &mut b.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One seed outside the acceptance seeds. Lives here rather than under
    /// `tests/` so it runs before the acceptance target.
    #[test]
    fn all_cases_pass_at_seed_11() {
        for c in cases() {
            let r = run_case(&c, 11).unwrap();
            assert!(!r.params.is_empty(), "{}: nothing probed", c.name);
            assert!(r.worst_rel_err() < 1e-4, "{}: {:.2e} at {}", c.name, r.worst_rel_err(), r.worst().unwrap().name);
        }
    }
}
