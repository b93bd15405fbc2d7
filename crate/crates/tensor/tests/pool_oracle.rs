use grf_tensor::{Graph, PoolKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn max_pool_matches_window_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(&[4, 4, 4, 3], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = g.pool(xi, PoolKind::Max, 2, 2).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[2, 2, 2, 3]);
    for z in 0..2 {
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = (((2 * z + a) * 4 + 2 * r + b) * 4 + 2 * c + e) * 3 + ch;
                                best = best.max(x.data()[i]);
                            }
                        }
                    }
                    assert_eq!(y.data()[((z * 2 + r) * 2 + c) * 3 + ch], best);
                }
            }
        }
    }
}

#[test]
fn global_average_broadcasts_back_to_input_extents() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.pool(x, PoolKind::GlobalAverage, 0, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2, 1]);
    assert_eq!(g.value(y).data(), &[2.5; 4]);
}
