//! Convolution forward and backward against direct loop oracles.

use ::logonet::ops::{conv3d_backward, conv3d_forward, Conv3dSpec};
use ::logonet::rng::{normal_tensor, substream};
use ::logonet::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn out_extent(spec: &Conv3dSpec, a: usize, n: usize) -> usize {
    (n + 2 * spec.padding[a] - spec.dilation[a] * (spec.kernel[a] - 1) - 1) / spec.stride[a] + 1
}

/// Gathers `(output index, input index or None for padding, weight index)`
/// for every tap in the same order a textbook loop would.
fn taps(spec: &Conv3dSpec, x: Shape) -> (Shape, Vec<(usize, Option<usize>, usize)>) {
    let [nb, cin, s, h, w] = x;
    let out = [nb, spec.out_channels, out_extent(spec, 0, s), out_extent(spec, 1, h), out_extent(spec, 2, w)];
    let (ipg, opg) = (cin / spec.groups, spec.out_channels / spec.groups);
    let [kz, ky, kx] = spec.kernel;
    let mut v = Vec::new();
    let pos = |a: usize, o: usize, t: usize| (o * spec.stride[a] + t * spec.dilation[a]) as isize - spec.padding[a] as isize;
    for b in 0..nb {
        for co in 0..out[1] {
            for oz in 0..out[2] {
                for oy in 0..out[3] {
                    for ox in 0..out[4] {
                        let o = (((b * out[1] + co) * out[2] + oz) * out[3] + oy) * out[4] + ox;
                        for cg in 0..ipg {
                            let ci = (co / opg) * ipg + cg;
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    for tx in 0..kx {
                                        let (iz, iy, ix) = (pos(0, oz, tz), pos(1, oy, ty), pos(2, ox, tx));
                                        let inside = iz >= 0 && iy >= 0 && ix >= 0 && (iz as usize) < s && (iy as usize) < h && (ix as usize) < w;
                                        let i = inside.then(|| (((b * cin + ci) * s + iz as usize) * h + iy as usize) * w + ix as usize);
                                        let wi = (((co * ipg + cg) * kz + tz) * ky + ty) * kx + tx;
                                        v.push((o, i, wi));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, v)
}

fn spec_strategy() -> impl Strategy<Value = (Conv3dSpec, Shape)> {
    (1usize..=2, 1usize..=2, 1usize..=2, prop::array::uniform3((1usize..=3, 1usize..=2, 0usize..=2, 1usize..=2, 0usize..=3)), 1usize..=2)
        .prop_map(|(g, ipg, opg, axes, b)| {
            let mut spec = Conv3dSpec::new(g * ipg, g * opg, 1).with_groups(g);
            let mut shape = [b, g * ipg, 0, 0, 0];
            for (a, (k, s, p, d, extra)) in axes.into_iter().enumerate() {
                spec.kernel[a] = k;
                spec.stride[a] = s;
                spec.padding[a] = p.min(k);
                spec.dilation[a] = d;
                let span = d * (k - 1) + 1;
                shape[2 + a] = span.saturating_sub(2 * spec.padding[a]).max(1) + extra;
            }
            (spec, shape)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_direct_sum((spec, shape) in spec_strategy(), seed in 0u64..1000) {
        let mut r = substream(seed, "t", 0);
        let x = normal_tensor::<f64>(shape, 0.0, 1.0, &mut r);
        let w = normal_tensor::<f64>(spec.weight_shape(), 0.0, 1.0, &mut r);
        let bias = normal_tensor::<f64>(spec.bias_shape(), 0.0, 1.0, &mut r);
        let y = conv3d_forward(&x, &w, Some(&bias), &spec).unwrap();
        let (out, t) = taps(&spec, shape);
        prop_assert_eq!(y.shape(), out);
        let per_out = out[2] * out[3] * out[4];
        let mut want: Vec<f64> = (0..y.numel()).map(|o| bias.data()[(o / per_out) % out[1]]).collect();
        for &(o, i, wi) in &t {
            if let Some(i) = i {
                want[o] += x.data()[i] * w.data()[wi];
            }
        }
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
        prop_assert_eq!(spec.macs(out), t.len() as u64);
    }

    #[test]
    fn backward_matches_transposed_sum((spec, shape) in spec_strategy(), seed in 0u64..1000) {
        let mut r = substream(seed, "t", 1);
        let x = normal_tensor::<f64>(shape, 0.0, 1.0, &mut r);
        let w = normal_tensor::<f64>(spec.weight_shape(), 0.0, 1.0, &mut r);
        let (out, t) = taps(&spec, shape);
        let g = normal_tensor::<f64>(out, 0.0, 1.0, &mut r);
        let grads = conv3d_backward(&x, &w, &g, &spec);
        let (mut dx, mut dw) = (vec![0.0; x.numel()], vec![0.0; w.numel()]);
        for &(o, i, wi) in &t {
            if let Some(i) = i {
                dx[i] += g.data()[o] * w.data()[wi];
                dw[wi] += g.data()[o] * x.data()[i];
            }
        }
        let close = |a: &Tensor<f64>, b: &[f64]| a.data().iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-11);
        prop_assert!(close(&grads.dx, &dx));
        prop_assert!(close(&grads.dw, &dw));
        let per_out = out[2] * out[3] * out[4];
        let db: Vec<f64> = (0..out[1])
            .map(|c| (0..out[0]).map(|b| g.data()[(b * out[1] + c) * per_out..][..per_out].iter().sum::<f64>()).sum())
            .collect();
        prop_assert!(close(grads.db.as_ref().unwrap(), &db));
    }
}
