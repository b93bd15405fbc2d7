use std::collections::BTreeSet;

use grfnet::loss::{EMPTY, UNKNOWN};
use grfnet::scene::{generate_scene, ColorMode, SceneSample, SceneSpec, NONEMPTY_CLASSES};
use grfnet::sscv::{
    decode_sample, encode_sample, load_sample, read_manifest, save_sample, write_manifest, ManifestEntry,
};

// Pinhole back-projection written out independently of the library.
fn oracle_voxel(s: &SceneSample, row: usize, col: usize) -> Option<[i64; 3]> {
    let z = s.depth.meters[row * s.depth.width + col] as f64;
    if !(z > 0.0) {
        return None;
    }
    let c = &s.camera;
    let x = (col as f64 - c.cx) * z / c.fx;
    let y = (row as f64 - c.cy) * z / c.fy;
    let g = &s.grid;
    Some([
        ((z - g.origin[2]) / g.resolution).floor() as i64,
        ((y - g.origin[1]) / g.resolution).floor() as i64,
        ((x - g.origin[0]) / g.resolution).floor() as i64,
    ])
}

fn label_at(s: &SceneSample, idx: [i64; 3]) -> Option<u8> {
    let e = s.grid.extents;
    if (0..3).any(|a| idx[a] < 0 || idx[a] >= e[a] as i64) {
        return None;
    }
    let [d, h, w] = idx.map(|v| v as usize);
    Some(s.labels[(d * e[1] + h) * e[2] + w])
}

/// Fraction of valid pixels whose ray endpoint lies within one voxel of a
/// non-empty label.
fn consistency(s: &SceneSample) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for row in 0..s.depth.height {
        for col in 0..s.depth.width {
            let Some(v) = oracle_voxel(s, row, col) else { continue };
            total += 1;
            let mut ok = false;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let l = label_at(s, [v[0] + dz, v[1] + dy, v[2] + dx]);
                        ok |= matches!(l, Some(c) if c != EMPTY && c != UNKNOWN);
                    }
                }
            }
            hit += ok as usize;
        }
    }
    (hit, total)
}

#[test]
fn generation_is_deterministic() {
    let spec = SceneSpec::tiny();
    let a = generate_scene(17, &spec).unwrap();
    let b = generate_scene(17, &spec).unwrap();
    assert_eq!(encode_sample(&a).unwrap(), encode_sample(&b).unwrap());
    assert_ne!(a.labels, generate_scene(18, &spec).unwrap().labels);
}

#[test]
fn labels_are_in_range() {
    for seed in 0..20 {
        let s = generate_scene(seed, &SceneSpec::tiny()).unwrap();
        assert!(s.labels.iter().all(|&l| (l as usize) <= NONEMPTY_CLASSES || l == UNKNOWN));
    }
}

#[test]
fn every_pixel_is_valid_and_lands_inside_the_grid() {
    for seed in 0..20 {
        let s = generate_scene(seed, &SceneSpec::tiny()).unwrap();
        for row in 0..s.depth.height {
            for col in 0..s.depth.width {
                let v = oracle_voxel(&s, row, col).expect("valid depth");
                assert!(label_at(&s, v).is_some(), "seed {seed} pixel ({row},{col}) -> {v:?}");
            }
        }
    }
}

#[test]
fn ray_cast_consistency_with_noise() {
    let (mut hit, mut total) = (0, 0);
    for seed in 0..20 {
        let (h, t) = consistency(&generate_scene(seed, &SceneSpec::tiny()).unwrap());
        hit += h;
        total += t;
    }
    let frac = hit as f64 / total as f64;
    assert!(frac >= 0.99, "consistency {frac}");
}

#[test]
fn ray_cast_consistency_is_exact_without_noise() {
    let spec = SceneSpec {
        depth_noise: 0.0,
        ..SceneSpec::tiny()
    };
    for seed in 0..20 {
        let (h, t) = consistency(&generate_scene(seed, &spec).unwrap());
        assert_eq!(h, t, "seed {seed}");
    }
}

#[test]
fn all_classes_appear_over_a_hundred_scenes() {
    let mut seen = BTreeSet::new();
    for seed in 0..100 {
        let s = generate_scene(seed, &SceneSpec::tiny()).unwrap();
        seen.extend(s.labels.iter().copied().filter(|&l| l != EMPTY && l != UNKNOWN));
    }
    assert_eq!(seen, (1..=NONEMPTY_CLASSES as u8).collect());
}

#[test]
fn shared_color_mode_paints_two_classes_alike() {
    let spec = SceneSpec {
        colors: ColorMode::Shared(3, 5),
        color_noise: 0.0,
        ..SceneSpec::tiny()
    };
    let base = SceneSpec {
        color_noise: 0.0,
        ..SceneSpec::tiny()
    };
    let a = generate_scene(4, &spec).unwrap();
    let b = generate_scene(4, &base).unwrap();
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.labels, b.labels);
    let wall_color: BTreeSet<[u8; 3]> = a.rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let distinct: BTreeSet<[u8; 3]> = b.rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    assert!(wall_color.len() <= distinct.len());
}

#[test]
fn degenerate_room_is_rejected() {
    let spec = SceneSpec {
        half_width: (0.0, 1.0),
        ..SceneSpec::tiny()
    };
    assert_eq!(generate_scene(0, &spec).unwrap_err().code(), "config");
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = std::env::temp_dir().join(format!("grf_sscv_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let s = generate_scene(9, &SceneSpec::tiny()).unwrap();
    let p = dir.join("a.sscv");
    save_sample(&s, &p).unwrap();
    let back = load_sample(&p).unwrap();
    assert_eq!(back, s);
    let q = dir.join("b.sscv");
    save_sample(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'X';
    assert_eq!(decode_sample(&bytes).unwrap_err().code(), "bad_magic");

    let entries = vec![
        ManifestEntry { path: p.clone(), seed: 9 },
        ManifestEntry { path: q.clone(), seed: 9 },
    ];
    let m = dir.join("train.txt");
    write_manifest(&m, &entries).unwrap();
    assert_eq!(read_manifest(&m).unwrap(), entries);
    std::fs::write(&m, "# nothing\n\n").unwrap();
    assert_eq!(read_manifest(&m).unwrap_err().code(), "empty_manifest");
    std::fs::remove_dir_all(&dir).unwrap();
}
