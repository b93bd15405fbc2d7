//! Fusion-strategy comparisons on synthetic scenes.

use crate::error::{config_err, Result};
use crate::fusion::FusionStrategy;
use crate::loss::UNKNOWN;
use crate::metrics::{Confusion, EvalReport};
use crate::network::NUM_CLASSES;
use crate::scene::{generate_scene, SceneSpec};
use crate::train::{evaluate, prepare, Prepared, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub stages: usize,
    pub fusion: FusionStrategy,
}

impl Arm {
    pub fn name(&self) -> String {
        format!("{}-stage {}", self.stages, self.fusion)
    }
}

/// Generate scenes `0..n`; the first `n_train` seeds train, the rest test.
pub fn synthetic_split(
    n: u64,
    n_train: u64,
    spec: &SceneSpec,
    cfg: &TrainConfig,
) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    if n_train == 0 || n_train >= n {
        return config_err(format!("cannot split {n} scenes into {n_train} training scenes and a test set"));
    }
    let net = cfg.network();
    let load = |seeds: std::ops::Range<u64>| -> Result<Vec<Prepared>> {
        seeds
            .map(|s| prepare(generate_scene(s, spec)?, &net, cfg.sc_region))
            .collect()
    };
    Ok((load(0..n_train)?, load(n_train..n)?))
}

/// Most frequent known label over the loss region of `data`.
pub fn majority_class(data: &[Prepared]) -> u8 {
    let mut hist = [0u64; NUM_CLASSES];
    for p in data {
        for (&l, &m) in p.labels.iter().zip(&p.mask.in_loss) {
            if m && l != UNKNOWN {
                hist[l as usize] += 1;
            }
        }
    }
    (0..NUM_CLASSES).max_by_key(|&c| (hist[c], std::cmp::Reverse(c))).unwrap_or(0) as u8
}

/// Report for predicting `class` at every voxel.
pub fn constant_report(class: u8, data: &[Prepared]) -> Result<EvalReport> {
    let mut c = Confusion::new(NUM_CLASSES);
    for p in data {
        c.add(&vec![class; p.labels.len()], &p.labels, &p.mask)?;
    }
    Ok(c.report())
}

/// Train one arm from `base` with the given seed and report on `test`.
pub fn run_arm(
    base: &TrainConfig,
    arm: Arm,
    seed: u64,
    train: &[Prepared],
    test: &[Prepared],
) -> Result<EvalReport> {
    let cfg = TrainConfig {
        stages: arm.stages,
        fusion: arm.fusion,
        seed,
        ..base.clone()
    };
    let mut t = Trainer::new(cfg)?;
    while t.epoch < t.config.epochs {
        t.train_epoch(train)?;
    }
    evaluate(&t.model, test)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
