use std::collections::BTreeSet;

use mast::mapper::EgoMap;
use mast::tensor::{finite_diff_check_params, Graph, ParamStore, Tensor};
use mast::transformer::{build_position_indices, MapTransformer, MapTransformerConfig, Pooling};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Index = rank of the cell's squared distance among all distinct squared
/// distances in the window.
fn index_oracle(r: usize) -> (Vec<usize>, usize) {
    let n = 2 * r + 1;
    let d2 = |i: usize| {
        let (y, x) = ((i / n) as i64 - r as i64, (i % n) as i64 - r as i64);
        (x * x + y * y) as u64
    };
    let distinct: BTreeSet<u64> = (0..n * n).map(d2).collect();
    let ranks: Vec<u64> = distinct.into_iter().collect();
    ((0..n * n).map(|i| ranks.binary_search(&d2(i)).unwrap()).collect(), ranks.len())
}

#[test]
fn position_indices_match_distance_ranks() {
    for r in 1..=12 {
        let p = build_position_indices(r);
        let (want, k) = index_oracle(r);
        assert_eq!(p.indices, want, "r = {r}");
        assert_eq!(p.count, k);
        let n = p.side();
        assert_eq!(p.at(r, r), 0);
        let seen: BTreeSet<usize> = p.indices.iter().copied().collect();
        assert_eq!(seen, (0..k).collect());
        for i in 0..n {
            for j in 0..n {
                let v = p.at(i, j);
                for (a, b) in [
                    (j, n - 1 - i),
                    (n - 1 - i, n - 1 - j),
                    (n - 1 - j, i),
                    (i, n - 1 - j),
                    (n - 1 - i, j),
                    (j, i),
                    (n - 1 - j, n - 1 - i),
                ] {
                    assert_eq!(p.at(a, b), v);
                }
            }
        }
    }
}

fn small(radius: usize, d: usize, seed: u64) -> (ParamStore, MapTransformer) {
    let mut store = ParamStore::new();
    let cfg = MapTransformerConfig::new(radius, 9, d, 6);
    let t = MapTransformer::new(&mut store, "map", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, t)
}

fn random_masks(rng: &mut ChaCha8Rng, cells: usize, channels: usize) -> Vec<u32> {
    (0..cells)
        .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..1u32 << channels) })
        .collect()
}

#[test]
fn attention_rows_are_distributions() {
    let (store, t) = small(2, 16, 1);
    let masks = random_masks(&mut ChaCha8Rng::seed_from_u64(2), 25, 9);
    let mut g = Graph::inference();
    let out = t.forward(&mut g, &store, &[&masks]).unwrap();
    for layer in &out.attention {
        for &a in layer {
            for row in g.value(a).data().chunks(25) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identical_cells_attend_uniformly() {
    let (store, t) = small(1, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(&[1, 9, 8], row.repeat(9)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(x);
    let (_, attn) = t.attention_layer(&mut g, &store, 0, x).unwrap();
    for &a in &attn {
        assert!(g.value(a).data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
    }
}

#[test]
fn attention_layer_is_permutation_equivariant() {
    let (store, t) = small(1, 8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut rng);
    let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * 8..(i + 1) * 8].to_vec()).collect();
    let run = |data: Vec<f64>| {
        let mut g = Graph::inference();
        let v = g.constant(Tensor::new(&[1, 9, 8], data).unwrap());
        let (y, _) = t.attention_layer(&mut g, &store, 0, v).unwrap();
        g.value(y).data().to_vec()
    };
    let y = run(x);
    let yp = run(xp);
    for (p, &i) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((yp[p * 8 + j] - y[i * 8 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn output_is_permutation_invariant_with_equal_positions() {
    let (mut store, t) = small(2, 16, 7);
    let pe = store.get_mut(t.pos_emb);
    let first = pe.data()[..16].to_vec();
    for row in pe.data_mut().chunks_mut(16) {
        row.copy_from_slice(&first);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let masks = random_masks(&mut rng, 25, 9);
    let mut shuffled = masks.clone();
    shuffled.shuffle(&mut rng);
    let a = t.map_forward(&store, &masks).unwrap();
    let b = t.map_forward(&store, &shuffled).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn default_width_output_length() {
    let mut store = ParamStore::new();
    let cfg = MapTransformerConfig::new(8, 9, 128, 512);
    let t = MapTransformer::new(&mut store, "map", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let masks = random_masks(&mut ChaCha8Rng::seed_from_u64(1), 289, 9);
    let y = t.map_forward(&store, &masks).unwrap();
    assert_eq!(y.len(), 512);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for pooling in [Pooling::Mean, Pooling::Max] {
        let mut store = ParamStore::new();
        let cfg = MapTransformerConfig { pooling, ..MapTransformerConfig::new(1, 5, 8, 3) };
        let t = MapTransformer::new(&mut store, "map", cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_masks(&mut rng, 9, 5);
        let b = random_masks(&mut rng, 9, 5);
        let head = Tensor::new(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = finite_diff_check_params(
            &store,
            |g, s| {
                let out = t.forward(g, s, &[&a, &b])?;
                let w = g.constant(head.clone());
                let y = g.mul(out.feature, w)?;
                g.sum_all(y)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "{pooling:?}: max relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rotated_crop_gives_bitwise_equal_feature(seed in any::<u64>(), r in 1usize..4) {
        let (store, t) = small(r, 16, seed % 3);
        let side = 2 * r + 1;
        let masks = random_masks(&mut ChaCha8Rng::seed_from_u64(seed), side * side, 9);
        let ego = EgoMap { radius: r, n_channels: 9, masks };
        let base = t.map_forward(&store, &ego.masks).unwrap();
        let mut rot = ego.clone();
        for _ in 0..3 {
            rot = rot.rot90();
            let y = t.map_forward(&store, &rot.masks).unwrap();
            prop_assert!(base.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
