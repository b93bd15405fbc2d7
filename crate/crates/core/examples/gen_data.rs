//! Write a few synthetic scenes as SSCV files plus a manifest, then read
//! them back.
//!
//! `cargo run --example gen_data -- [out_dir] [count]`

use std::path::PathBuf;

use grfnet::metrics::CLASS_NAMES;
use grfnet::scene::{generate_scene, SceneSpec};
use grfnet::sscv::{load_sample, read_manifest, save_sample, write_manifest, ManifestEntry};

fn main() -> grfnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("grfnet_scenes"), PathBuf::from);
    let n: u64 = args.next().map_or(4, |a| a.parse().expect("scene count"));
    std::fs::create_dir_all(&out)?;
    let spec = SceneSpec::tiny();
    let mut entries = Vec::new();
    for seed in 0..n {
        let s = generate_scene(seed, &spec)?;
        let path = out.join(format!("scene_{seed:06}.sscv"));
        save_sample(&s, &path)?;
        let mut present: Vec<&str> = CLASS_NAMES
            .iter()
            .enumerate()
            .filter(|(c, _)| s.labels.contains(&(*c as u8 + 1)))
            .map(|(_, name)| *name)
            .collect();
        present.sort_unstable();
        println!("{}: {}", path.display(), present.join(" "));
        entries.push(ManifestEntry { path, seed });
    }
    let manifest = out.join("all.txt");
    write_manifest(&manifest, &entries)?;
    for e in read_manifest(&manifest)? {
        let s = load_sample(&e.path)?;
        assert_eq!(s, generate_scene(e.seed, &spec)?);
    }
    println!("manifest {} verified", manifest.display());
    Ok(())
}
