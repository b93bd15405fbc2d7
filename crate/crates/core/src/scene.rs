//! Procedural RGB-D rooms with dense voxel labels.
//!
//! A room is a set of axis-aligned boxes in the camera frame: floor, ceiling
//! and three walls as slabs, windows as thin panels on the walls, and object
//! boxes standing on the floor or hanging on the back wall. Depth comes from
//! casting one ray per pixel center; labels come from box/voxel overlap, so
//! occluded space is labelled too.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::loss::{EMPTY, UNKNOWN};
use crate::projection::{CameraIntrinsics, DepthImage, VoxelGridSpec};

pub const CEILING: u8 = 1;
pub const FLOOR: u8 = 2;
pub const WALL: u8 = 3;
pub const WINDOW: u8 = 4;
pub const CHAIR: u8 = 5;
pub const BED: u8 = 6;
pub const SOFA: u8 = 7;
pub const TABLE: u8 = 8;
pub const TVS: u8 = 9;
pub const FURNITURE: u8 = 10;
pub const OBJECTS: u8 = 11;
pub const NONEMPTY_CLASSES: usize = 11;

/// Base RGB color per class 1..=11.
pub const PALETTE: [[u8; 3]; NONEMPTY_CLASSES] = [
    [230, 230, 210],
    [140, 90, 50],
    [190, 200, 220],
    [120, 200, 250],
    [220, 40, 40],
    [40, 160, 60],
    [150, 60, 170],
    [240, 170, 20],
    [20, 20, 30],
    [90, 110, 40],
    [250, 110, 180],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    /// Every class has its own color.
    Distinct,
    /// The second class is painted with the first class's color.
    Shared(u8, u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Image `(rows, cols)`.
    pub image: [usize; 2],
    pub camera: CameraIntrinsics,
    /// Grid the labels are written on.
    pub grid: VoxelGridSpec,
    /// Ranges for the room's inner faces: half-widths along X, camera height
    /// above the floor, ceiling distance above the camera, far-wall distance.
    pub half_width: (f64, f64),
    pub camera_height: (f64, f64),
    pub ceiling_above: (f64, f64),
    pub far_wall: (f64, f64),
    pub slab: f64,
    /// Inclusive range of object counts.
    pub objects: (usize, usize),
    pub window_probability: f64,
    pub depth_noise: f64,
    pub color_noise: f64,
    pub colors: ColorMode,
}

impl SceneSpec {
    /// Rooms that fit the tiny network profile's grid and camera.
    pub fn tiny() -> Self {
        Self {
            image: [48, 64],
            camera: CameraIntrinsics {
                fx: 51.9,
                fy: 51.9,
                cx: 31.5,
                cy: 23.5,
            },
            grid: VoxelGridSpec::centered([32, 16, 32], 0.15, 0.3),
            half_width: (1.6, 2.25),
            camera_height: (0.85, 1.05),
            ceiling_above: (0.9, 1.1),
            far_wall: (3.6, 4.8),
            slab: 0.2,
            objects: (3, 6),
            window_probability: 0.8,
            depth_noise: 0.01,
            color_noise: 12.0,
            colors: ColorMode::Distinct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.grid.validate()?;
        let ranges = [self.half_width, self.camera_height, self.ceiling_above, self.far_wall];
        if ranges.iter().any(|&(a, b)| !(a > 0.0 && b >= a)) {
            return config_err("room extents must be positive ranges");
        }
        if self.image[0] == 0 || self.image[1] == 0 {
            return config_err("image extents must be positive");
        }
        if !(self.slab > 0.0) || self.objects.1 < self.objects.0 {
            return config_err("slab thickness must be positive and object range ordered");
        }
        if !(self.depth_noise >= 0.0 && self.color_noise >= 0.0) {
            return config_err("noise levels must be non-negative");
        }
        if self.far_wall.0 <= 1.5 {
            return config_err("far wall too close for object placement");
        }
        Ok(())
    }

    fn color(&self, class: u8) -> [u8; 3] {
        let c = match self.colors {
            ColorMode::Shared(a, b) if class == b => a,
            _ => class,
        };
        PALETTE[(c as usize - 1).min(NONEMPTY_CLASSES - 1)]
    }
}

/// One RGB-D observation with its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// Row-major `rows x cols x 3` bytes.
    pub rgb: Vec<u8>,
    pub depth: DepthImage,
    pub camera: CameraIntrinsics,
    pub grid: VoxelGridSpec,
    /// `D x H x W` labels: 0 empty, 1-11 classes, 255 unknown.
    pub labels: Vec<u8>,
}

/// Axis-aligned box `[lo, hi]` in camera coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub class: u8,
}

impl Block {
    fn new(lo: [f64; 3], hi: [f64; 3], class: u8) -> Self {
        Self { lo, hi, class }
    }

    /// Entry distance of a ray from the origin along `dir`.
    pub fn hit(&self, dir: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if 0.0 < self.lo[a] || 0.0 > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = (self.lo[a] / dir[a], self.hi[a] / dir[a]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            t0 = t0.max(n);
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn overlaps(&self, lo: [f64; 3], hi: [f64; 3]) -> bool {
        (0..3).all(|a| self.lo[a] < hi[a] && lo[a] < self.hi[a])
    }
}

/// Geometry of one generated room.
#[derive(Clone, Debug, PartialEq)]
pub struct Room {
    /// Inner faces: `x_left, x_right, y_ceiling, y_floor, z_far`.
    pub interior_lo: [f64; 3],
    pub interior_hi: [f64; 3],
    /// Boxes in labelling priority order (first wins on overlap).
    pub blocks: Vec<Block>,
}

impl Room {
    /// Nearest box along the ray through pixel `(row, col)`: `(depth, class)`.
    pub fn cast(&self, cam: &CameraIntrinsics, row: usize, col: usize) -> Option<(f64, u8)> {
        let dir = [(col as f64 - cam.cx) / cam.fx, (row as f64 - cam.cy) / cam.fy, 1.0];
        let mut best: Option<(f64, u8)> = None;
        for b in &self.blocks {
            if let Some(t) = b.hit(dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, b.class));
                }
            }
        }
        best
    }

    /// Label of the voxel spanning `[lo, hi]`.
    pub fn label(&self, lo: [f64; 3], hi: [f64; 3]) -> u8 {
        if let Some(b) = self.blocks.iter().find(|b| b.overlaps(lo, hi)) {
            return b.class;
        }
        let c: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
        let inside = (0..3).all(|a| c[a] >= self.interior_lo[a] && c[a] <= self.interior_hi[a]);
        if inside {
            EMPTY
        } else {
            UNKNOWN
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Object footprint `(width x, height y, depth z)` ranges per class.
fn object_size(class: u8) -> [(f64, f64); 3] {
    match class {
        CHAIR => [(0.4, 0.55), (0.8, 1.0), (0.4, 0.55)],
        BED => [(1.0, 1.5), (0.45, 0.6), (1.6, 2.0)],
        SOFA => [(1.4, 2.0), (0.7, 0.9), (0.7, 0.9)],
        TABLE => [(0.8, 1.4), (0.7, 0.8), (0.6, 0.9)],
        TVS => [(0.6, 1.0), (0.4, 0.6), (0.08, 0.12)],
        FURNITURE => [(0.6, 1.2), (1.0, 1.6), (0.4, 0.6)],
        _ => [(0.2, 0.4), (0.2, 0.4), (0.2, 0.4)],
    }
}

/// Sample room geometry for `seed`.
pub fn generate_room(seed: u64, spec: &SceneSpec) -> Result<Room> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xl = -uniform(&mut rng, spec.half_width);
    let xr = uniform(&mut rng, spec.half_width);
    let yf = uniform(&mut rng, spec.camera_height);
    let yc = -uniform(&mut rng, spec.ceiling_above);
    let zf = uniform(&mut rng, spec.far_wall);
    let zn = -0.5;
    let t = spec.slab;

    let mut objects = Vec::new();
    let count = rng.gen_range(spec.objects.0..=spec.objects.1);
    for _ in 0..count {
        let class = rng.gen_range(CHAIR..=OBJECTS);
        let [sx, sy, sz] = object_size(class).map(|r| uniform(&mut rng, r));
        let sx = sx.min(xr - xl - 0.2);
        let x0 = uniform(&mut rng, (xl + 0.1, (xr - 0.1 - sx).max(xl + 0.1)));
        let (y0, z0, sz) = if class == TVS {
            (yc + uniform(&mut rng, (0.4, 0.8)), zf - sz, sz)
        } else {
            let sz = sz.min(zf - 1.6);
            (yf - sy, uniform(&mut rng, (1.4, (zf - 0.1 - sz).max(1.4))), sz)
        };
        objects.push(Block::new([x0, y0, z0], [x0 + sx, y0 + sy, z0 + sz], class));
    }

    let mut windows = Vec::new();
    if rng.gen_bool(spec.window_probability) {
        let w = uniform(&mut rng, (0.6, 1.2)).min(xr - xl - 0.4);
        let x0 = uniform(&mut rng, (xl + 0.2, xr - 0.2 - w));
        let y0 = yc + uniform(&mut rng, (0.3, 0.5));
        let h = uniform(&mut rng, (0.5, 0.8));
        windows.push(Block::new([x0, y0, zf - 0.05], [x0 + w, y0 + h, zf], WINDOW));
    }
    if rng.gen_bool(spec.window_probability * 0.5) {
        let d = uniform(&mut rng, (0.6, 1.0));
        let z0 = uniform(&mut rng, (2.0, (zf - 0.2 - d).max(2.0)));
        let y0 = yc + uniform(&mut rng, (0.3, 0.5));
        let h = uniform(&mut rng, (0.5, 0.8));
        let side = if rng.gen_bool(0.5) {
            Block::new([xl, y0, z0], [xl + 0.05, y0 + h, z0 + d], WINDOW)
        } else {
            Block::new([xr - 0.05, y0, z0], [xr, y0 + h, z0 + d], WINDOW)
        };
        windows.push(side);
    }

    let mut blocks = objects;
    blocks.extend(windows);
    blocks.push(Block::new([xl - t, yf, zn], [xr + t, yf + t, zf + t], FLOOR));
    blocks.push(Block::new([xl - t, yc - t, zn], [xr + t, yc, zf + t], CEILING));
    blocks.push(Block::new([xl - t, yc - t, zf], [xr + t, yf + t, zf + t], WALL));
    blocks.push(Block::new([xl - t, yc - t, zn], [xl, yf + t, zf + t], WALL));
    blocks.push(Block::new([xr, yc - t, zn], [xr + t, yf + t, zf + t], WALL));
    Ok(Room {
        interior_lo: [xl, yc, zn],
        interior_hi: [xr, yf, zf],
        blocks,
    })
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic sample for `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    let room = generate_room(seed, spec)?;
    let cam = CameraIntrinsics {
        fx: f32_exact(spec.camera.fx),
        fy: f32_exact(spec.camera.fy),
        cx: f32_exact(spec.camera.cx),
        cy: f32_exact(spec.camera.cy),
    };
    let grid = VoxelGridSpec {
        origin: spec.grid.origin.map(f32_exact),
        resolution: f32_exact(spec.grid.resolution),
        extents: spec.grid.extents,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0b5e);
    let depth_noise = Normal::new(0.0, spec.depth_noise).map_err(|e| crate::Error::Config(e.to_string()))?;
    let [rows, cols] = spec.image;
    let mut depth = Vec::with_capacity(rows * cols);
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for row in 0..rows {
        for col in 0..cols {
            let (z, class) = room.cast(&cam, row, col).unwrap_or((0.0, EMPTY));
            let noisy = if z > 0.0 && spec.depth_noise > 0.0 {
                (z + depth_noise.sample(&mut rng)).max(1e-3)
            } else {
                z
            };
            depth.push(noisy as f32);
            let base = if class == EMPTY { [0, 0, 0] } else { spec.color(class) };
            for ch in base {
                let n = if spec.color_noise > 0.0 {
                    rng.gen_range(-spec.color_noise..=spec.color_noise)
                } else {
                    0.0
                };
                rgb.push((ch as f64 + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let [nd, nh, nw] = grid.extents;
    let r = grid.resolution;
    let mut labels = Vec::with_capacity(grid.voxel_count());
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let lo = [
                    grid.origin[0] + w as f64 * r,
                    grid.origin[1] + h as f64 * r,
                    grid.origin[2] + d as f64 * r,
                ];
                labels.push(room.label(lo, [lo[0] + r, lo[1] + r, lo[2] + r]));
            }
        }
    }
    Ok(SceneSample {
        rgb,
        depth: DepthImage::new(rows, cols, depth)?,
        camera: cam,
        grid,
        labels,
    })
}

/// Reduce labels by `factor` per axis: the most frequent non-empty class when
/// non-empty voxels make up at least a quarter of the known voxels in the
/// block, otherwise empty; blocks with no known voxel stay unknown.
pub fn downsample_labels(labels: &[u8], extents: [usize; 3], factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || extents.iter().any(|e| e % factor != 0) {
        return config_err(format!("extents {extents:?} not divisible by {factor}"));
    }
    if labels.len() != extents.iter().product::<usize>() {
        return crate::error::shape_err(format!("{} labels for extents {extents:?}", labels.len()));
    }
    let [_, h, w] = extents;
    let [od, oh, ow] = extents.map(|e| e / factor);
    let mut out = Vec::with_capacity(od * oh * ow);
    for bz in 0..od {
        for by in 0..oh {
            for bx in 0..ow {
                let mut hist = [0usize; 256];
                for z in bz * factor..(bz + 1) * factor {
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            hist[labels[(z * h + y) * w + x] as usize] += 1;
                        }
                    }
                }
                let known: usize = hist[..UNKNOWN as usize].iter().sum();
                let nonempty: usize = hist[1..UNKNOWN as usize].iter().sum();
                out.push(if known == 0 {
                    UNKNOWN
                } else if 4 * nonempty >= known {
                    let mut best = 1;
                    for c in 2..UNKNOWN as usize {
                        if hist[c] > hist[best] {
                            best = c;
                        }
                    }
                    best as u8
                } else {
                    EMPTY
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let s = SceneSpec::tiny();
        assert_eq!(generate_scene(7, &s).unwrap(), generate_scene(7, &s).unwrap());
        assert_ne!(generate_scene(7, &s).unwrap().labels, generate_scene(8, &s).unwrap().labels);
    }

    #[test]
    fn labels_stay_in_range() {
        let s = generate_scene(3, &SceneSpec::tiny()).unwrap();
        assert!(s.labels.iter().all(|&l| l <= 11 || l == UNKNOWN));
        assert!(s.labels.contains(&EMPTY));
    }

    #[test]
    fn degenerate_room_is_rejected() {
        let mut s = SceneSpec::tiny();
        s.half_width = (0.0, 1.0);
        assert!(generate_scene(0, &s).is_err());
    }

    #[test]
    fn shared_color_mode_paints_two_classes_alike() {
        let mut s = SceneSpec::tiny();
        s.colors = ColorMode::Shared(WALL, CHAIR);
        assert_eq!(s.color(CHAIR), s.color(WALL));
        assert_ne!(SceneSpec::tiny().color(CHAIR), s.color(WALL));
    }

    #[test]
    fn downsample_rule() {
        // one 2x2x2 block: 2 of 8 voxels are class 5 -> exactly a quarter
        let mut l = vec![EMPTY; 8];
        l[0] = 5;
        l[1] = 5;
        assert_eq!(downsample_labels(&l, [2, 2, 2], 2).unwrap(), vec![5]);
        l[1] = EMPTY;
        assert_eq!(downsample_labels(&l, [2, 2, 2], 2).unwrap(), vec![EMPTY]);
        // unknown voxels do not count towards the quarter
        let mut l = vec![UNKNOWN; 8];
        l[0] = 3;
        l[1] = EMPTY;
        assert_eq!(downsample_labels(&l, [2, 2, 2], 2).unwrap(), vec![3]);
        assert_eq!(downsample_labels(&[UNKNOWN; 8], [2, 2, 2], 2).unwrap(), vec![UNKNOWN]);
    }
}
