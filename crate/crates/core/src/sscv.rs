//! SSCV sample files and dataset manifests.
//!
//! Layout, all little-endian:
//!
//! | offset | field |
//! |---|---|
//! | 0 | magic `SSCV` |
//! | 4 | u32 version (1) |
//! | 8 | u32 image rows, cols, then voxel D, H, W |
//! | 28 | f32 fx, fy, cx, cy |
//! | 44 | f32 voxel resolution |
//! | 48 | f32 x3 grid origin |
//! | 60 | u32 reserved, 0 |
//! | 64 | rgb bytes, depth f32s, label bytes |

use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::projection::{CameraIntrinsics, DepthImage, VoxelGridSpec};
use crate::scene::{SceneSample, NONEMPTY_CLASSES};
use crate::loss::UNKNOWN;

pub const MAGIC: [u8; 4] = *b"SSCV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

/// Serialize a sample. Camera and grid values are stored as f32.
pub fn encode_sample(s: &SceneSample) -> Result<Vec<u8>> {
    let (rows, cols) = (s.depth.height, s.depth.width);
    if s.rgb.len() != rows * cols * 3 || s.labels.len() != s.grid.voxel_count() {
        return Err(Error::Shape(format!(
            "sample arrays do not match {rows}x{cols} image / {:?} grid",
            s.grid.extents
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + s.rgb.len() + 4 * rows * cols + s.labels.len());
    out.extend_from_slice(&MAGIC);
    let [d, h, w] = s.grid.extents;
    for v in [VERSION, rows as u32, cols as u32, d as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let c = &s.camera;
    let o = &s.grid.origin;
    for v in [c.fx, c.fy, c.cx, c.cy, s.grid.resolution, o[0], o[1], o[2]] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(&s.rgb);
    for z in &s.depth.meters {
        out.extend_from_slice(&z.to_le_bytes());
    }
    out.extend_from_slice(&s.labels);
    Ok(out)
}

pub fn decode_sample(buf: &[u8]) -> Result<SceneSample> {
    let mut r = Reader::new(buf);
    let magic: [u8; 4] = r.array("magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let extents = [r.u32("depth")? as usize, r.u32("height")? as usize, r.u32("width")? as usize];
    let mut f = [0f64; 8];
    for v in f.iter_mut() {
        *v = r.f32("header")? as f64;
    }
    if r.u32("reserved")? != 0 {
        return Err(Error::Malformed {
            what: "SSCV header",
            detail: "reserved field is not zero".into(),
        });
    }
    let rgb = r.take(rows * cols * 3, "rgb")?.to_vec();
    let depth = r
        .take(rows * cols * 4, "depth")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let n_vox = extents.iter().product();
    let labels = r.take(n_vox, "labels")?.to_vec();
    r.finish("SSCV payload")?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > NONEMPTY_CLASSES && l != UNKNOWN) {
        return Err(Error::LabelOutOfRange(bad));
    }
    let camera = CameraIntrinsics {
        fx: f[0],
        fy: f[1],
        cx: f[2],
        cy: f[3],
    };
    let grid = VoxelGridSpec {
        origin: [f[5], f[6], f[7]],
        resolution: f[4],
        extents,
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed {
            what: "SSCV header",
            detail: "zero image extent".into(),
        });
    }
    Ok(SceneSample {
        rgb,
        depth: DepthImage::new(rows, cols, depth)?,
        camera,
        grid,
        labels,
    })
}

pub fn save_sample(sample: &SceneSample, path: &Path) -> Result<()> {
    fs::write(path, encode_sample(sample)?)?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<SceneSample> {
    decode_sample(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
}

/// One `path seed` pair per line; blank lines and `#` comments are skipped.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(p), Some(seed), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Malformed {
                what: "manifest line",
                detail: format!("{}:{}: expected `path seed`", path.display(), i + 1),
            });
        };
        let seed = seed.parse().map_err(|_| Error::Malformed {
            what: "manifest seed",
            detail: format!("{}:{}: {seed:?}", path.display(), i + 1),
        })?;
        out.push(ManifestEntry {
            path: base.join(p),
            seed,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyManifest(path.display().to_string()));
    }
    Ok(out)
}

/// Write entries with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut s = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        s += &format!("{} {}\n", p.display(), e.seed);
    }
    fs::write(path, s)?;
    Ok(())
}
