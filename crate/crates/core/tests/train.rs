use grf_tensor::Tensor;
use grfnet::checkpoint::Checkpoint;
use grfnet::fusion::FusionStrategy;
use grfnet::scene::{generate_scene, SceneSpec};
use grfnet::train::{evaluate, prepare, sgd_step, zero_velocity, Prepared, TrainConfig, Trainer};

fn data(seeds: std::ops::Range<u64>, cfg: &TrainConfig) -> Vec<Prepared> {
    seeds
        .map(|s| prepare(generate_scene(s, &SceneSpec::tiny()).unwrap(), &cfg.network(), cfg.sc_region).unwrap())
        .collect()
}

#[test]
fn overfits_a_single_sample() {
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    let train = data(0..1, &cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let batch = [&train[0]];
    let first = t.step(&batch).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = t.step(&batch).unwrap();
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_gradient_without_decay_leaves_parameters_unchanged() {
    let t = Trainer::new(TrainConfig::default()).unwrap();
    let mut store = t.model.store.clone();
    store.zero_grads();
    let mut v = zero_velocity(&store);
    sgd_step(&mut store, &mut v, 0.01, 0.9, 0.0).unwrap();
    for (a, b) in store.entries().iter().zip(t.model.store.entries()) {
        assert_eq!(a.value, b.value);
    }
    assert!(v.iter().all(|t: &Tensor| t.data().iter().all(|&x| x == 0.0)));
}

fn short_config() -> TrainConfig {
    TrainConfig {
        stages: 1,
        epochs: 3,
        lr_step: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_bit_deterministic_and_resume_exactly() {
    let cfg = short_config();
    let train = data(0..6, &cfg);
    let test = data(100..102, &cfg);

    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(&train, &test, |_, _| Ok(())).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.run(&train, &test, |_, _| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);

    let mut c = Trainer::new(cfg).unwrap();
    c.run_epoch(&train, &test).unwrap();
    let bytes = Checkpoint::capture(&c).encode();
    drop(c);
    let mut resumed = Checkpoint::decode(&bytes).unwrap().trainer().unwrap();
    resumed.run(&train, &test, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.log, a.log);
    assert_eq!(Checkpoint::capture(&resumed).encode(), Checkpoint::capture(&a).encode());
}

#[test]
fn evaluating_the_training_sample_reproduces_epoch_metrics() {
    let cfg = TrainConfig {
        stages: 1,
        epochs: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let train = data(3..4, &cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let mut last = None;
    t.run(&train, &train, |_, log| {
        last = Some(log.report.clone());
        Ok(())
    })
    .unwrap();
    let model = Checkpoint::capture(&t).model().unwrap();
    assert_eq!(evaluate(&model, &train).unwrap(), last.unwrap());
}

#[test]
fn fusion_swap_changes_only_fusion_parameters() {
    let base = Trainer::new(TrainConfig::default()).unwrap();
    for f in FusionStrategy::ALL {
        let other = Trainer::new(TrainConfig {
            fusion: f,
            ..TrainConfig::default()
        })
        .unwrap();
        let outside = |t: &Trainer| {
            t.model
                .store
                .entries()
                .iter()
                .filter(|e| !e.name.starts_with("fusion."))
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(outside(&base), outside(&other), "{f}");
    }
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let t = Trainer::new(short_config()).unwrap();
    assert_eq!(evaluate(&t.model, &[]).unwrap_err().code(), "empty_manifest");
}
