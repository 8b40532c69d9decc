//! Masked pre-training invariants.

use ::logonet::autograd::{Ctx, ParamStore};
use ::logonet::rng::{normal_tensor, substream};
use ::logonet::ssl::{
    apply_mask, assign_pseudo_labels, build_mask_plan, masked_targets, pretrain_loss_var, slice_features, train_clusterer,
    ClustererEnsemble, FeatureMatrix, KMeansConfig, MaskConfig, MaskPlan, PseudoLabelSet,
};
use ::logonet::tensor::Tensor;
use proptest::prelude::*;

fn mask_cfg(phi1: f64, phi2: f64, m: usize) -> MaskConfig {
    MaskConfig {
        phi1,
        phi2,
        sequence_length: m,
        patch_sizes: vec![1, 2, 4, 8],
    }
}

fn label_set(rows: usize, ks: &[usize], seed: u64) -> PseudoLabelSet {
    let labels = (0..rows * ks.len()).map(|i| ((i as u64 * 7 + seed) % ks[i % ks.len()] as u64) as u32).collect();
    PseudoLabelSet { ks: ks.to_vec(), labels }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Targets depend on which slices are covered, never on the bitmaps, and
    /// always read the labels of the unmasked volume.
    #[test]
    fn masking_never_changes_targets(seed in 0u64..10_000, phi1 in 0.05f64..0.6, m in 1usize..6) {
        let shape = [12, 8, 8];
        let plan = build_mask_plan(shape, &mask_cfg(phi1, 0.7, m), &mut substream(seed, "plan", 0)).unwrap();
        let mut flipped = plan.clone();
        for mk in &mut flipped.masks {
            mk.bitmap.iter_mut().for_each(|b| *b = !*b);
        }
        let labels = label_set(12, &[3, 5], seed);
        let before = labels.clone();
        let a = masked_targets(std::slice::from_ref(&plan), std::slice::from_ref(&labels)).unwrap();
        let b = masked_targets(&[flipped], std::slice::from_ref(&labels)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(labels, before.clone());
        prop_assert_eq!(a.iter().map(|t| t.slice).collect::<Vec<_>>(), plan.masked_slices());
        for t in &a {
            prop_assert_eq!(&t.labels, &vec![before.label(t.slice, 0), before.label(t.slice, 1)]);
        }
    }

    /// Chains reach back at most M−1 slices from an anchor and every masked
    /// slice belongs to some chain.
    #[test]
    fn chains_end_at_anchors(seed in 0u64..10_000, m in 1usize..6) {
        let plan = build_mask_plan([20, 4, 4], &mask_cfg(0.2, 0.5, m), &mut substream(seed, "plan", 1)).unwrap();
        for z in plan.masked_slices() {
            prop_assert!(plan.anchors.iter().any(|&a| a >= z && a - z < m));
        }
        for &a in &plan.anchors {
            for z in (a + 1).saturating_sub(m)..=a {
                prop_assert!(plan.masks.iter().any(|mk| mk.slice == z));
            }
        }
    }

    #[test]
    fn apply_mask_zeroes_exactly_the_union(seed in 0u64..10_000) {
        let shape = [6, 7, 5];
        let plan = build_mask_plan(shape, &mask_cfg(0.4, 0.5, 3), &mut substream(seed, "plan", 2)).unwrap();
        let x = normal_tensor::<f32>([2, 2, 6, 7, 5], 1.0, 0.1, &mut substream(seed, "x", 0));
        let y = apply_mask(&x, &plan).unwrap();
        for z in 0..6 {
            let m = plan.voxel_mask(z);
            for bc in 0..4 {
                for (i, &masked) in m.iter().enumerate() {
                    let o = (bc * 6 + z) * 35 + i;
                    if masked {
                        prop_assert_eq!(y.data()[o], 0.0);
                    } else {
                        prop_assert_eq!(y.data()[o].to_bits(), x.data()[o].to_bits());
                    }
                }
            }
        }
    }

    /// Logits of unmasked slices neither enter the loss nor receive gradient.
    #[test]
    fn loss_ignores_unmasked_slices(seed in 0u64..10_000) {
        let (b, s, ks) = (2usize, 10usize, vec![4usize, 6]);
        let plans: Vec<MaskPlan> = (0..b)
            .map(|i| build_mask_plan([s, 4, 4], &mask_cfg(0.2, 0.7, 2), &mut substream(seed, "plan", 10 + i as u64)).unwrap())
            .collect();
        let labels: Vec<PseudoLabelSet> = (0..b).map(|i| label_set(s, &ks, seed + i as u64)).collect();
        let targets = masked_targets(&plans, &labels).unwrap();
        let logits = normal_tensor::<f64>([b, s, 2, 6, 1], 0.0, 1.0, &mut substream(seed, "logits", 0));
        let eval = |t: Tensor<f64>| {
            let mut store = ParamStore::<f64>::new();
            let mut ctx = Ctx::new(&mut store, true);
            let x = ctx.tape.leaf(t, true);
            let l = pretrain_loss_var(&mut ctx.tape, x, &targets, &ks, 0.1).unwrap();
            let g = ctx.tape.backward(l).unwrap();
            (ctx.value(l).item(), g[&x].clone())
        };
        let (loss, grad) = eval(logits.clone());
        let mut moved = logits.clone();
        for (bi, plan) in plans.iter().enumerate() {
            let masked = plan.masked_slices();
            for z in (0..s).filter(|z| !masked.contains(z)) {
                for n in 0..2 {
                    for k in 0..6 {
                        prop_assert_eq!(grad.at([bi, z, n, k, 0]), 0.0);
                        moved.set([bi, z, n, k, 0], 50.0 * (k as f64 - 2.5));
                    }
                }
            }
        }
        prop_assert_eq!(eval(moved).0.to_bits(), loss.to_bits());
        if targets.is_empty() {
            prop_assert_eq!(loss, 0.0);
        }
    }

    /// Each full-batch Lloyd epoch never raises the inertia.
    #[test]
    fn refinement_never_raises_inertia(seed in 0u64..10_000, k in 1usize..6, rows in 8usize..40) {
        let x = normal_tensor::<f64>([1, 1, rows, 3, 1], 0.0, 1.0, &mut substream(seed, "data", 0));
        let data = slice_features(&x);
        let cfg = KMeansConfig { iterations: 5, subset_fraction: 0.3, refine_epochs: 0 };
        let mut c = train_clusterer(&data, k, &cfg, &mut substream(seed, "km", 0)).unwrap();
        let mut last = c.inertia(&data);
        for _ in 0..6 {
            c.refine(&data);
            let now = c.inertia(&data);
            prop_assert!(now <= last * (1.0 + 1e-12) + 1e-12, "{} > {}", now, last);
            last = now;
        }
    }
}

#[test]
fn pseudo_labels_come_from_the_clusterers() {
    let x = normal_tensor::<f64>([2, 1, 8, 4, 4], 0.0, 1.0, &mut substream(3, "data", 0));
    let data: FeatureMatrix = slice_features(&x);
    let ens = ClustererEnsemble::train(&data, 3, (2, 5), &KMeansConfig::default(), 3).unwrap();
    let labels = assign_pseudo_labels(&ens, &data);
    assert_eq!(labels.rows(), 16);
    assert_eq!(labels.ks, ens.ks());
    for r in 0..16 {
        for (i, c) in ens.clusterers.iter().enumerate() {
            assert_eq!(labels.label(r, i) as usize, c.assign(data.row(r)));
            assert!((labels.label(r, i) as usize) < labels.ks[i]);
        }
    }
}
