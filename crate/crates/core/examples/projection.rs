//! Render a synthetic scene, lift its pixels into the voxel grid and
//! classify every voxel by visibility.

use grfnet::projection::{pixel_voxels, visibility_mask, Visibility};
use grfnet::scene::{generate_scene, SceneSpec};

fn main() -> grfnet::Result<()> {
    let s = generate_scene(3, &SceneSpec::tiny())?;
    let hits = pixel_voxels(&s.depth, &s.camera, &s.grid);
    let mut distinct: Vec<usize> = hits.iter().flatten().copied().collect();
    distinct.sort_unstable();
    distinct.dedup();
    println!(
        "{} of {} pixels land in the {:?} grid, on {} distinct voxels",
        hits.iter().flatten().count(),
        hits.len(),
        s.grid.extents,
        distinct.len()
    );
    let vis = visibility_mask(&s.depth, &s.camera, &s.grid);
    for v in [
        Visibility::ObservedEmpty,
        Visibility::ObservedSurface,
        Visibility::Occluded,
        Visibility::OutsideFov,
    ] {
        println!("{v:?}: {}", vis.count(v));
    }
    let center = (s.depth.height / 2, s.depth.width / 2);
    let z = s.depth.at(center.0, center.1) as f64;
    let p = s.camera.unproject(center.1 as f64, center.0 as f64, z);
    println!("center pixel at {z:.3} m -> point {p:.3?} -> voxel {:?}", s.grid.locate(p));
    Ok(())
}
