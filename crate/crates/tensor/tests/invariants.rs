use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umyops_tensor::{Graph, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn matmul_matches_naive_product(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in 0u64..1000) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed + 1));
        let g = Graph::new();
        let out = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((out.data()[i * n + j] - want).abs() <= 1e-4 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn softmax_channels_sum_to_one(n in 1usize..3, c in 1usize..6, h in 1usize..5, seed in 0u64..1000) {
        let g = Graph::new();
        let p = g.constant(random(&[n, c, h, h], seed)).softmax_channels().unwrap().value();
        for b in 0..n {
            for q in 0..h * h {
                let s: f32 = (0..c).map(|k| p.data()[(b * c + k) * h * h + q]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
            }
        }
        prop_assert!(p.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn pool_then_upsample_keeps_block_maxima(c in 1usize..4, h in 1usize..5, seed in 0u64..1000) {
        let g = Graph::new();
        let x = random(&[1, c, 2 * h, 2 * h], seed);
        let y = g.constant(x.clone()).max_pool2().unwrap().upsample2().unwrap().value();
        prop_assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a >= b);
        }
    }
}
