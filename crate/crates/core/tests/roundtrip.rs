//! Serialization and partition round-trips.

use ::logonet::autograd::{ParamKind, ParamStore};
use ::logonet::config::{RunConfig, Variant};
use ::logonet::io::{decode_volume, encode_volume, Checkpoint, Volume};
use ::logonet::logonet::{partition_cube, reassemble};
use ::logonet::optim::{AdamW, AdamWConfig};
use ::logonet::tensor::{LabelVolume, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 5], seed: u32) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 * 1e-6 - 2000.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_round_trip_is_bitwise(g in 1usize..=3, edge in 1usize..=4, b in 1usize..=2, c in 1usize..=2, seed: u32) {
        let n = g * g * g;
        let e = g * edge;
        let x = tensor([b, c, e, e, e], seed);
        let (cubes, idx) = partition_cube(&x, n).unwrap();
        prop_assert_eq!(cubes.len(), n);
        prop_assert!(cubes.iter().all(|t| t.shape() == [b, c, edge, edge, edge]));
        // cube k covers grid cell k in row-major order
        for (k, cube) in cubes.iter().enumerate() {
            let (gz, gy, gx) = (k / (g * g), (k / g) % g, k % g);
            for (i, &v) in cube.data().iter().enumerate() {
                let (xx, yy, zz, ci, bi) = (i % edge, (i / edge) % edge, (i / (edge * edge)) % edge, (i / edge.pow(3)) % c, i / (c * edge.pow(3)));
                let want = x.at([bi, ci, gz * edge + zz, gy * edge + yy, gx * edge + xx]);
                prop_assert_eq!(v.to_bits(), want.to_bits());
            }
        }
        let back = reassemble(&cubes, &idx).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn volumes_round_trip(c in 1usize..=3, s in 1usize..=5, h in 1usize..=5, w in 1usize..=5, seed: u32) {
        let img = Volume::F32(tensor([1, c, s, h, w], seed));
        prop_assert_eq!(decode_volume(&encode_volume(&img).unwrap()).unwrap(), img);
        let n = s * h * w;
        let lab = Volume::U8(LabelVolume::new([1, s, h, w], (0..n).map(|i| (i as u32 ^ seed) % 7).collect()).unwrap());
        prop_assert_eq!(decode_volume(&encode_volume(&lab).unwrap()).unwrap(), lab);
    }

    #[test]
    fn checkpoint_save_load_save_is_identical(sizes in prop::collection::vec(1usize..6, 1..5), steps in 0usize..3, seed: u32) {
        let mut store = ParamStore::<f32>::new();
        for (i, &n) in sizes.iter().enumerate() {
            store.add(format!("p{i}.weight"), tensor([n, 1, 1, 1, 1], seed + i as u32), ParamKind::Trainable).unwrap();
        }
        store.add("bn.running_var", tensor([2, 1, 1, 1, 1], seed), ParamKind::Buffer).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).kind == ParamKind::Trainable {
                let g = store.value(id).map(|v| v * 1e-3);
                store.entry_mut(id).grad = g;
            }
        }
        for _ in 0..steps {
            opt.step(&mut store, 1e-3).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lgck");
        let first = Checkpoint::from_store(&store, Some(&opt));
        first.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let mut fresh = store.clone();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.value_mut(id).data_mut().fill(0.0);
        }
        loaded.restore_store(&mut fresh, |_| false).unwrap();
        let opt2 = loaded.restore_optimizer(&fresh, AdamWConfig::default()).unwrap().unwrap();
        prop_assert_eq!(opt2.step, opt.step);
        prop_assert_eq!(Checkpoint::from_store(&fresh, Some(&opt2)).encode().unwrap(), bytes);
    }

    #[test]
    fn config_echo_round_trips(seed: u64, v in 0usize..3, lr in 1e-6f64..1e-2, count in 0usize..50, phi2 in 0.0f64..=1.0) {
        let variant = [Variant::Tiny, Variant::Normal, Variant::Large][v];
        let mut cfg = RunConfig::with_variant(variant);
        cfg.seed = seed;
        cfg.finetune.lr = lr;
        cfg.data.count = count;
        cfg.pretrain.phi2 = phi2;
        cfg.finetune.target_dice = Some(0.5);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
