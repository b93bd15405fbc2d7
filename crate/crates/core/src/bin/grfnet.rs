use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use grfnet::checkpoint::Checkpoint;
use grfnet::fusion::FusionStrategy;
use grfnet::gradsuite::run_suite;
use grfnet::loss::ScRegion;
use grfnet::network::{format_plan, layer_plan, plan_cost, NetworkConfig, Scale};
use grfnet::scene::{generate_scene, SceneSpec};
use grfnet::sscv::{load_sample, save_sample, write_manifest, ManifestEntry};
use grfnet::train::{evaluate_regions, load_split, predict_sample, TrainConfig, Trainer};
use grfnet::{Error, Result};

#[derive(Parser)]
#[command(name = "grfnet", version, about = "Gated recurrent fusion for RGB-D semantic scene completion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a TOML config, writing a checkpoint and metrics log per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fusion: Option<FusionStrategy>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every sample of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print parameter and FLOP totals.
    Count {
        #[arg(long)]
        stages: usize,
        #[arg(long, default_value = "paper")]
        scale: Scale,
        #[arg(long, default_value = "grf")]
        fusion: FusionStrategy,
        /// Also print the per-layer output sizes.
        #[arg(long)]
        table: bool,
    },
    /// Finite-difference check of every block's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write synthetic SSCV samples with train/test manifests and a config.
    GenData {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of scenes in the test split.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Write a sample's predicted label grid as raw D*H*W bytes.
    ExportVoxels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train(config: &Path, seed: Option<u64>, fusion: Option<FusionStrategy>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(p) => Checkpoint::load(p)?.trainer()?,
        None => {
            let mut cfg = TrainConfig::load(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.fusion = fusion.unwrap_or(cfg.fusion);
            Trainer::new(cfg)?
        }
    };
    if resume.is_some() {
        let cfg = TrainConfig::load(config)?;
        t.config.epochs = cfg.epochs;
    }
    fs::create_dir_all(out)?;
    let (train, test) = t.load_data()?;
    println!(
        "training {} stage(s) {} on {} samples, {} parameters",
        t.config.stages,
        t.config.fusion,
        train.len(),
        t.model.param_count()
    );
    let ckpt = out.join("checkpoint.ssck");
    let log = out.join("metrics.log");
    let start = Instant::now();
    t.run(&train, &test, |t, e| {
        println!("{}  ({:.0?})", e.line(), start.elapsed());
        Checkpoint::capture(t).save(&ckpt)?;
        fs::write(&log, t.log.join("\n") + "\n")?;
        Ok(())
    })?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let data = load_split(manifest, &model.config, ckpt.config.sc_region)?;
    let regions = [ckpt.config.sc_region, other_region(ckpt.config.sc_region)];
    let acc = evaluate_regions(&model, &data, &regions)?;
    let main = acc[0].report();
    print!("{}", main.table());
    print!("{}", main.dump());
    for (r, c) in regions.iter().zip(&acc) {
        let sc = c.sc();
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        println!("sc.{r}.precision={}", f(sc.precision));
        println!("sc.{r}.recall={}", f(sc.recall));
        println!("sc.{r}.iou={}", f(sc.iou));
    }
    Ok(())
}

fn other_region(r: ScRegion) -> ScRegion {
    match r {
        ScRegion::Occluded => ScRegion::InView,
        ScRegion::InView => ScRegion::Occluded,
    }
}

fn count(stages: usize, scale: Scale, fusion: FusionStrategy, table: bool) -> Result<()> {
    let cfg = NetworkConfig::profile(scale, stages).with_fusion(fusion);
    cfg.validate()?;
    if table {
        print!("{}", format_plan(&layer_plan(&cfg)?));
    }
    let c = plan_cost(&cfg)?;
    println!("params={} ({:.2}k)", c.params, c.params as f64 / 1e3);
    println!("flops={} ({:.2}G)", c.flops, c.flops as f64 / 1e9);
    Ok(())
}

fn gradcheck(eps: f64, seeds: u64, tol: f64) -> Result<()> {
    let mut failed = Vec::new();
    for (name, r) in run_suite(seeds, eps)? {
        let ok = r.passes(tol);
        println!("{name:<14} checked={:<6} max_rel_err={:.3e} {}", r.checked, r.max_rel_err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))));
    }
    Ok(())
}

fn gen_data(n: u64, seed: u64, out: &Path, test_fraction: f64) -> Result<()> {
    if n < 2 || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config("need at least 2 scenes and a test fraction in [0, 1)".into()));
    }
    fs::create_dir_all(out)?;
    let spec = SceneSpec::tiny();
    let n_test = ((n as f64 * test_fraction).round() as u64).min(n - 1);
    let mut entries = Vec::with_capacity(n as usize);
    for s in seed..seed + n {
        let path = out.join(format!("scene_{s:06}.sscv"));
        save_sample(&generate_scene(s, &spec)?, &path)?;
        entries.push(ManifestEntry { path, seed: s });
    }
    let (train, test) = entries.split_at((n - n_test) as usize);
    write_manifest(&out.join("train.txt"), train)?;
    if !test.is_empty() {
        write_manifest(&out.join("test.txt"), test)?;
    }
    let cfg = TrainConfig {
        train_manifest: Some("train.txt".into()),
        test_manifest: (!test.is_empty()).then(|| "test.txt".into()),
        ..TrainConfig::default()
    };
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} train / {} test scenes to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn export_voxels(checkpoint: &Path, sample: &Path, out: &Path) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let labels = predict_sample(&model, &load_sample(sample)?)?;
    fs::write(out, &labels)?;
    let [d, h, w] = model.config.output_grid()?.extents;
    println!("extents={d} {h} {w}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            fusion,
            out,
            resume,
        } => train(&config, seed, fusion, &out, resume.as_deref()),
        Cmd::Eval { checkpoint, manifest } => eval(&checkpoint, &manifest),
        Cmd::Count {
            stages,
            scale,
            fusion,
            table,
        } => count(stages, scale, fusion, table),
        Cmd::Gradcheck { eps, seeds, tol } => gradcheck(eps, seeds, tol),
        Cmd::GenData {
            n,
            seed,
            out,
            test_fraction,
        } => gen_data(n, seed, &out, test_fraction),
        Cmd::ExportVoxels { checkpoint, sample, out } => export_voxels(&checkpoint, &sample, &out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
