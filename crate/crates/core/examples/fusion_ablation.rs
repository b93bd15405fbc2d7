//! Train single-stage GRF, multi-stage GRF and multi-stage sum fusion on
//! synthetic scenes and compare test mIoU against a majority-class baseline.
//!
//! `cargo run --release --example fusion_ablation -- [epochs] [seeds] [scenes]`

use std::time::Instant;

use grfnet::ablation::{constant_report, majority_class, median, run_arm, synthetic_split, Arm};
use grfnet::fusion::FusionStrategy;
use grfnet::scene::SceneSpec;
use grfnet::train::TrainConfig;

fn main() -> grfnet::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let epochs = args.first().copied().unwrap_or(30) as usize;
    let seeds = args.get(1).copied().unwrap_or(3);
    let scenes = args.get(2).copied().unwrap_or(200);
    let base = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (train, test) = synthetic_split(scenes, scenes * 4 / 5, &SceneSpec::tiny(), &base)?;
    let major = majority_class(&train);
    let baseline = constant_report(major, &test)?;
    println!("majority class {major}: mIoU {:.2}", 100.0 * baseline.ssc.mean.unwrap_or(0.0));
    let arms = [
        Arm { stages: 1, fusion: FusionStrategy::Grf },
        Arm { stages: 2, fusion: FusionStrategy::Grf },
        Arm { stages: 2, fusion: FusionStrategy::Sum },
    ];
    for arm in arms {
        let mut mious = Vec::new();
        for seed in 0..seeds {
            let t = Instant::now();
            let r = run_arm(&base, arm, seed, &train, &test)?;
            let m = 100.0 * r.ssc.mean.unwrap_or(0.0);
            println!("{} seed {seed}: mIoU {m:.2}  SC IoU {:.2}  ({:.0?})", arm.name(), 100.0 * r.sc.iou.unwrap_or(0.0), t.elapsed());
            print!("{}", r.table());
            mious.push(m);
        }
        println!("{}: median mIoU {:.2}", arm.name(), median(&mious));
    }
    Ok(())
}
