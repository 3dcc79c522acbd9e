use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symmcomp::diffcore::{Graph, ParamStore, Tensor};
use symmcomp::geometry::{householder, reflect_about_plane, PointCloud};
use symmcomp::layers::{AttentionBlock, PointTransformer};
use symmcomp::lstnet::{cloud_of, transform_points};
use symmcomp::selftest::random_cloud;
use symmcomp::sgformer::Encoder;
use symmcomp::{count_params, ModelConfig, SymmCompletion};

fn toy_eighth() -> ModelConfig {
    ModelConfig {
        n_k: 8,
        c: 64,
        enc_channels: 16,
        heads: 4,
        knn_k: 16,
        ratios: [2, 2],
        ..ModelConfig::default()
    }
}

// Linear(a, b) = ab + b. With e = 16, c = 64, p = 32, f = 64:
//   point transformer(d) = 3(d^2 + d) + (3d + d + d^2 + d) + 2(d^2 + d)  -> d=16: 1696
//   attention block(d)   = 4(d^2 + d) + (2d^2 + 2d) + (2d^2 + d)          -> d=32: 8416, d=64: 33216
// LSTNet: set abstraction [3,8,16] 176, transformer 1696, expand [16,64,64] 5248,
//   affine head [128,64,32,9] 10633, translation head [128,64,32,3] 10435  = 28188
// Stage (r = 2): encoder 176 + [32,16,16] 800 + 1696 = 2672,
//   two paths of 2 x [16,32,32] 1600 + 2 x 8416 = 20032 each,
//   two 64-wide blocks 66432, offset head [64,32,6] 2278 = 111446
// Total: 28188 + 2 * 111446.
#[test]
fn parameter_count_by_hand() {
    assert_eq!(count_params(&toy_eighth()).unwrap(), 251_080);
}

#[test]
fn parameter_count_ignores_key_point_count() {
    let a = count_params(&toy_eighth()).unwrap();
    let b = count_params(&ModelConfig { n_k: 64, ..toy_eighth() }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_config_counts() {
    let cfg = ModelConfig {
        n_k: 512,
        ratios: [4, 4],
        ..ModelConfig::default()
    };
    assert_eq!(cfg.output_counts(), [1024, 4096, 16384]);
}

#[test]
fn householder_bias_reproduces_reflection() {
    let cfg = ModelConfig {
        n_k: 16,
        c: 8,
        enc_channels: 4,
        heads: 2,
        knn_k: 4,
        ..ModelConfig::toy()
    };
    let mut model = SymmCompletion::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let partial = random_cloud(&mut rng, 50);
    for n in [[1.0, 0.0, 0.0], [0.3, -0.4, 0.866], [0.0, 0.0, -2.0]] {
        let h = householder(n).unwrap();
        model.lstnet.set_fixed_transform(&mut model.store, &h, &[0.0; 3]);
        let mut g = model.graph(false);
        let key = model.lstnet.downsample(&mut g, &partial).unwrap();
        let st = model.lstnet.predict_transform(&mut g, &key).unwrap();
        let (p_m, _) = transform_points(&mut g, key.p_k, &st).unwrap();
        let want = reflect_about_plane(&cloud_of(&g, key.p_k).unwrap(), n).unwrap();
        for (a, b) in cloud_of(&g, p_m).unwrap().points().iter().zip(want.points()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 1e-12);
            }
        }
    }
}

fn permuted(rows: &[f64], cols: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| rows[i * cols..(i + 1) * cols].to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn self_attention_is_permutation_equivariant(
        data in prop::collection::vec(-1.0f64..1.0, 6 * 8),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let run = |x: Vec<f64>| {
            let mut g = Graph::with_params(&store, false);
            let v = g.constant(Tensor::new(vec![6, 8], x).unwrap());
            let y = block.forward_self(&mut g, v).unwrap();
            g.value(y).data().to_vec()
        };
        let base = run(data.clone());
        let moved = run(permuted(&data, 8, &perm));
        let expect = permuted(&base, 8, &perm);
        for (a, b) in moved.iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(
        pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 7),
        perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cfg = ModelConfig { c: 8, enc_channels: 4, heads: 2, knn_k: 7, ..ModelConfig::toy() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::with_params(&store, false);
            let v = g.constant(Tensor::new(vec![7, 3], x).unwrap());
            let f = enc.encode(&mut g, v).unwrap();
            g.value(f.features).data().to_vec()
        };
        // knn_k covers the whole set, so neighbourhoods are order independent
        let base = run(flat.clone());
        let moved = run(permuted(&flat, 3, &perm));
        let expect = permuted(&base, 4, &perm);
        for (a, b) in moved.iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn point_transformer_is_translation_invariant_in_position(
        pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 6),
        shift in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let mut store = ParamStore::new();
        let pt = PointTransformer::new(&mut store, "t", 4, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let feats: Vec<f64> = (0..24).map(|i| (i as f64 * 0.41).sin()).collect();
        let run = |p: &[[f64; 3]]| {
            let mut g = Graph::with_params(&store, false);
            let x = g.constant(Tensor::new(vec![6, 4], feats.clone()).unwrap());
            let pos = g.constant(Tensor::new(vec![6, 3], p.iter().flatten().copied().collect()).unwrap());
            let y = pt.forward(&mut g, x, pos).unwrap();
            g.value(y).data().to_vec()
        };
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
        let a = run(&pts);
        let b = run(&moved);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn completion_starts_with_the_key_points(seed in 0u64..1000) {
        let cfg = ModelConfig { n_k: 6, c: 8, enc_channels: 4, heads: 2, knn_k: 4, ..ModelConfig::toy() };
        let model = SymmCompletion::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partial = random_cloud(&mut rng, 25);
        let c = model.complete(&partial).unwrap();
        prop_assert_eq!(&c.p_init.points()[..6], c.p_k.points());
        for p in c.p_k.points() {
            prop_assert!(partial.points().contains(p));
        }
        prop_assert_eq!(c.fines[1].len(), 6 * 2 * 2 * 2);
    }
}

#[test]
fn complete_accepts_exactly_n_k_points() {
    let cfg = ModelConfig { n_k: 5, c: 8, enc_channels: 4, heads: 2, knn_k: 4, ..ModelConfig::toy() };
    let model = SymmCompletion::new(&cfg).unwrap();
    let pts = PointCloud::new((0..5).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
    assert_eq!(model.complete(&pts).unwrap().p_init.len(), 10);
    let fewer = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
    assert!(model.complete(&fewer).is_err());
}
