mod common;

use common::{direct_ce, random};
use grf_tensor::{Graph, Tensor};
use grfnet::loss::{weighted_ce, ClassWeights, EvalMask, Normalization, ScRegion, UNKNOWN};
use grfnet::projection::{visibility_mask, CameraIntrinsics, DepthImage, Visibility, VoxelGridSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    logits: Tensor,
    labels: Vec<u8>,
    weights: Vec<f64>,
    mask: EvalMask,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5)];
    let n = ext.iter().product();
    let logits = random(&mut rng, &[ext[0], ext[1], ext[2], 12], 6.0);
    let labels = (0..n).map(|_| if rng.gen_bool(0.1) { UNKNOWN } else { rng.gen_range(0..12) }).collect();
    let weights = (0..12).map(|_| rng.gen_range(0.05..2.0)).collect();
    let mut mask = EvalMask::all(n);
    mask.in_loss.iter_mut().for_each(|m| *m = rng.gen_bool(0.8));
    Case { logits, labels, weights, mask }
}

fn loss(c: &Case, norm: Normalization) -> f64 {
    let mut g = Graph::new();
    let x = g.input(c.logits.clone());
    let w = ClassWeights::new(c.weights.clone()).unwrap();
    let l = weighted_ce(&mut g, x, &c.labels, &w, &c.mask, norm).unwrap();
    g.value(l).item()
}

#[test]
fn matches_direct_summation() {
    for seed in 0..500 {
        let c = case(seed);
        let want = direct_ce(c.logits.data(), 12, &c.labels, &c.weights, &c.mask.in_loss);
        let got = loss(&c, Normalization::Mean);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        let count = (0..c.labels.len()).filter(|&i| c.mask.in_loss[i] && c.labels[i] != UNKNOWN).count();
        let sum = loss(&c, Normalization::Sum);
        assert!((sum - want * count as f64).abs() < 1e-10 * (1.0 + sum.abs()));
    }
}

#[test]
fn uniform_logits_give_ln_twelve() {
    for t in 0..12u8 {
        let c = Case {
            logits: Tensor::full(&[1, 1, 1, 12], 0.7),
            labels: vec![t],
            weights: vec![1.0; 12],
            mask: EvalMask::all(1),
        };
        assert!((loss(&c, Normalization::Mean) - 12f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn out_of_view_voxels_get_exactly_zero_gradient() {
    let cam = CameraIntrinsics {
        fx: 51.9,
        fy: 51.9,
        cx: 31.5,
        cy: 23.5,
    };
    let grid = VoxelGridSpec::centered([8, 4, 8], 0.6, 0.3);
    let depth = DepthImage::new(48, 64, vec![2.5; 48 * 64]).unwrap();
    let vis = visibility_mask(&depth, &cam, &grid);
    let n = grid.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..12)).collect();
    let mask = EvalMask::from_visibility(&vis, &labels, ScRegion::Occluded).unwrap();
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, &[8, 4, 8, 12], 3.0));
    let l = weighted_ce(&mut g, x, &labels, &ClassWeights::uniform(12), &mask, Normalization::Mean).unwrap();
    let grads = g.backward(l).unwrap();
    let gx = grads.wrt(x).unwrap();
    let outside = vis.count(Visibility::OutsideFov);
    assert!(outside > 0 && outside < n);
    for (i, row) in gx.data().chunks(12).enumerate() {
        if vis.labels[i] == Visibility::OutsideFov {
            assert!(row.iter().all(|&v| v == 0.0), "voxel {i}");
        } else {
            assert!(row.iter().any(|&v| v != 0.0), "voxel {i}");
        }
    }
}

#[test]
fn unknown_labels_contribute_nothing() {
    let c = case(7);
    let mut only_known = Case {
        logits: c.logits.clone(),
        labels: c.labels.clone(),
        weights: c.weights.clone(),
        mask: c.mask.clone(),
    };
    for (i, l) in c.labels.iter().enumerate() {
        if *l == UNKNOWN {
            only_known.mask.in_loss[i] = false;
            only_known.labels[i] = 5;
        }
    }
    assert_eq!(loss(&c, Normalization::Sum), loss(&only_known, Normalization::Sum));
}

#[test]
fn out_of_range_label_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 1, 12]));
    let e = weighted_ce(&mut g, x, &[12], &ClassWeights::uniform(12), &EvalMask::all(1), Normalization::Mean);
    assert_eq!(e.unwrap_err().code(), "label_range");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_voxel_order(seed in 0u64..100_000, rot in 0usize..64) {
        let c = case(seed);
        let n = c.labels.len();
        let k = rot % n;
        let rows: Vec<&[f64]> = c.logits.data().chunks(12).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + k) % n).rev().collect();
        let p = Case {
            logits: Tensor::new(c.logits.shape(), perm.iter().flat_map(|&i| rows[i].iter().copied()).collect()).unwrap(),
            labels: perm.iter().map(|&i| c.labels[i]).collect(),
            weights: c.weights.clone(),
            mask: EvalMask {
                in_loss: perm.iter().map(|&i| c.mask.in_loss[i]).collect(),
                in_sc: vec![true; n],
                in_ssc: vec![true; n],
            },
        };
        prop_assert!((loss(&c, Normalization::Mean) - loss(&p, Normalization::Mean)).abs() < 1e-12);
    }

    #[test]
    fn linear_in_the_class_weights(seed in 0u64..100_000, k in 0.01f64..50.0) {
        let c = case(seed);
        let scaled = Case {
            logits: c.logits.clone(),
            labels: c.labels.clone(),
            weights: c.weights.iter().map(|w| w * k).collect(),
            mask: c.mask.clone(),
        };
        let (a, b) = (loss(&c, Normalization::Mean), loss(&scaled, Normalization::Mean));
        prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
