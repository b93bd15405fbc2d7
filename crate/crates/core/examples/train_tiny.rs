//! Train the tiny two-stage GRF network on synthetic scenes, checkpoint it,
//! and resume for one more epoch.
//!
//! `cargo run --release --example train_tiny -- [epochs] [scenes]`

use grfnet::ablation::synthetic_split;
use grfnet::checkpoint::Checkpoint;
use grfnet::scene::SceneSpec;
use grfnet::train::{TrainConfig, Trainer};

fn main() -> grfnet::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let epochs = args.first().copied().unwrap_or(4) as usize;
    let scenes = args.get(1).copied().unwrap_or(40);
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (train, test) = synthetic_split(scenes, scenes * 4 / 5, &SceneSpec::tiny(), &cfg)?;
    let mut t = Trainer::new(cfg)?;
    println!("{} parameters, {} train / {} test scenes", t.model.param_count(), train.len(), test.len());
    t.run(&train, &test, |_, e| {
        println!("{}", e.line());
        Ok(())
    })?;
    let path = std::env::temp_dir().join("grfnet_tiny.ssck");
    Checkpoint::capture(&t).save(&path)?;
    println!("checkpoint: {}", path.display());

    let mut resumed = Checkpoint::load(&path)?.trainer()?;
    resumed.config.epochs += 1;
    let e = resumed.run_epoch(&train, &test)?;
    println!("resumed: {}", e.line());
    print!("{}", e.report.table());
    Ok(())
}
