//! Evaluate a checkpoint on synthetic test scenes under both scene-completion
//! regions, printing the report table and the key=value dump.
//!
//! `cargo run --release --example evaluate -- [checkpoint]`
//! Without a checkpoint, a freshly initialized network is evaluated.

use std::path::PathBuf;

use grfnet::ablation::{constant_report, majority_class, synthetic_split};
use grfnet::checkpoint::Checkpoint;
use grfnet::loss::ScRegion;
use grfnet::scene::SceneSpec;
use grfnet::train::{evaluate_regions, TrainConfig, Trainer};

fn main() -> grfnet::Result<()> {
    let (model, cfg) = match std::env::args().nth(1).map(PathBuf::from) {
        Some(p) => {
            let c = Checkpoint::load(&p)?;
            (c.model()?, c.config)
        }
        None => {
            let t = Trainer::new(TrainConfig::default())?;
            (t.model, t.config)
        }
    };
    let (train, test) = synthetic_split(40, 32, &SceneSpec::tiny(), &cfg)?;
    let regions = [ScRegion::Occluded, ScRegion::InView];
    for (r, c) in regions.iter().zip(evaluate_regions(&model, &test, &regions)?) {
        println!("SC region: {r}");
        print!("{}", c.report().table());
    }
    let major = majority_class(&train);
    println!("majority-class ({major}) baseline:");
    print!("{}", constant_report(major, &test)?.table());
    Ok(())
}
