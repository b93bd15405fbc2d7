mod common;

use common::{grf_oracle, random};
use grf_tensor::{Graph, ParamStore, Tensor};
use grfnet::fusion::{
    grf_init, grf_step, multi_stage_fuse, single_stage_fuse, FusionSpec, FusionState, FusionStrategy, GrfParams,
    GrfSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grf(c: usize, seed: u64, scale: f64) -> (ParamStore, GrfParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = GrfSpec::new(c).register(&mut store, &mut rng, "grf").unwrap();
    for e in store.entries_mut() {
        let n = e.value.len();
        e.value = random(&mut rng, e.value.shape(), scale);
        assert_eq!(e.value.len(), n);
    }
    (store, p)
}

#[test]
fn step_matches_scalar_equations() {
    for seed in 0..50 {
        let (store, p) = grf(2, seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let f = random(&mut rng, &[2, 2, 2, 2], 1.0);
        let h = random(&mut rng, &[2, 2, 2, 2], 1.0);
        let mut g = Graph::new();
        let (fi, hi) = (g.input(f.clone()), g.input(h.clone()));
        let (next, trace) = grf_step(&mut g, &store, FusionState::new(hi), fi, &p).unwrap();
        let o = grf_oracle(&store, &p, &f, &h);
        for (got, want) in [
            (g.value(trace.r), &o.r),
            (g.value(trace.z), &o.z),
            (g.value(trace.h_candidate), &o.hc),
            (g.value(next.h().unwrap()), &o.h),
        ] {
            for (a, b) in got.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
        }
        assert_eq!(next.step, 1);
    }
}

#[test]
fn single_stage_is_two_shared_steps() {
    let (store, p) = grf(3, 4, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fd = random(&mut rng, &[3, 2, 3, 3], 1.0);
    let fc = random(&mut rng, &[3, 2, 3, 3], 1.0);
    let mut g = Graph::new();
    let (d, c) = (g.input(fd), g.input(fc));
    let run = single_stage_fuse(&mut g, &store, d, c, &p).unwrap();
    let s0 = grf_init(&mut g, d, c).unwrap();
    let (s1, _) = grf_step(&mut g, &store, s0, d, &p).unwrap();
    let (s2, _) = grf_step(&mut g, &store, s1, c, &p).unwrap();
    assert_eq!(g.value(run.state.h().unwrap()), g.value(s2.h().unwrap()));
    assert_eq!(run.traces.len(), 2);
    let multi = multi_stage_fuse(&mut g, &store, &[d, c], &p).unwrap();
    assert_eq!(g.value(multi.state.h().unwrap()), g.value(run.state.h().unwrap()));
}

#[test]
fn zero_weights_quarter_the_initial_sum() {
    let (mut store, p) = grf(2, 0, 1.0);
    for e in store.entries_mut() {
        e.value.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let d = g.input(Tensor::full(&[2, 2, 2, 2], 2.0));
    let c = g.input(Tensor::full(&[2, 2, 2, 2], 6.0));
    let run = single_stage_fuse(&mut g, &store, d, c, &p).unwrap();
    assert!(g.value(run.state.h().unwrap()).data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
}

#[test]
fn mismatched_channels_are_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 2, 2, 2]));
    let b = g.input(Tensor::zeros(&[2, 2, 2, 3]));
    assert_eq!(grf_init(&mut g, a, b).unwrap_err().code(), "shape");
}

#[test]
fn parameters_are_shared_across_stages() {
    for n in 1..=4 {
        let mut store = ParamStore::new();
        FusionSpec::new(FusionStrategy::Grf, 4)
            .register(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "fusion")
            .unwrap();
        assert_eq!(store.names().filter(|s| s.ends_with(".weight")).count(), 3, "N={n}");
    }
    // Changing the shared weights changes every step of a 4-stage run.
    let (mut store, p) = grf(2, 5, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq: Vec<Tensor> = (0..8).map(|_| random(&mut rng, &[2, 2, 2, 2], 1.0)).collect();
    let states = |store: &ParamStore| {
        let mut g = Graph::new();
        let ids: Vec<_> = seq.iter().map(|t| g.input(t.clone())).collect();
        let run = multi_stage_fuse(&mut g, store, &ids, &p).unwrap();
        assert_eq!(run.traces.len(), 8);
        assert_eq!(run.stage_states.len(), 4);
        run.traces.iter().map(|t| g.value(t.z).clone()).collect::<Vec<_>>()
    };
    let before = states(&store);
    store.get_mut(p.w_z.weight).value.data_mut()[0] += 0.5;
    let after = states(&store);
    assert!(before.iter().zip(&after).all(|(a, b)| a != b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_stay_in_range_and_update_is_convex(seed in 0u64..10_000, scale in 0.1f64..3.0, mag in 0.5f64..20.0) {
        let (store, p) = grf(2, seed, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let f = random(&mut rng, &[2, 3, 2, 2], mag);
        let h = random(&mut rng, &[2, 3, 2, 2], mag);
        let mut g = Graph::new();
        let (fi, hi) = (g.input(f), g.input(h.clone()));
        let (next, t) = grf_step(&mut g, &store, FusionState::new(hi), fi, &p).unwrap();
        for &v in g.value(t.r).data().iter().chain(g.value(t.z).data()) {
            prop_assert!(v > 0.0 && v < 1.0 || (v >= 0.0 && v <= 1.0 && scale * mag > 5.0));
        }
        for &v in g.value(t.h_candidate).data() {
            prop_assert!(v >= -1.0 && v <= 1.0);
        }
        let hc = g.value(t.h_candidate).data();
        for (i, &q) in g.value(next.h().unwrap()).data().iter().enumerate() {
            let (lo, hi) = (h.data()[i].min(hc[i]), h.data()[i].max(hc[i]));
            prop_assert!(q >= lo - 1e-12 && q <= hi + 1e-12);
        }
    }
}
