//! Depth-driven 2D -> 3D feature projection and per-voxel visibility.
//!
//! Camera frame: +X right, +Y down, +Z along the optical axis. Pixel
//! `(row, col)` has its center at image coordinates `(u, v) = (col, row)`.
//! A voxel grid is indexed `[d, h, w]` with `d` along Z, `h` along Y and `w`
//! along X; voxel `(d, h, w)` covers `origin + [w, h, d] * resolution` up to
//! one resolution further on each axis.

use grf_tensor::{Graph, NodeId, Tensor};

use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return config_err("focal lengths must be positive");
        }
        Ok(())
    }

    /// Back-project pixel coordinates at metric depth to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ]
    }

    /// Image coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    /// Minimum corner `(x, y, z)` in meters, camera frame.
    pub origin: [f64; 3],
    pub resolution: f64,
    /// `(D, H, W)` voxel counts along Z, Y, X.
    pub extents: [usize; 3],
}

impl VoxelGridSpec {
    /// Grid whose front face sits at `z_near` with the optical axis through its center.
    pub fn centered(extents: [usize; 3], resolution: f64, z_near: f64) -> Self {
        Self {
            origin: [
                -(extents[2] as f64) * resolution / 2.0,
                -(extents[1] as f64) * resolution / 2.0,
                z_near,
            ],
            resolution,
            extents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || self.extents.iter().any(|&e| e == 0) {
            return config_err("voxel grid needs positive resolution and extents");
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.extents[1] + idx[1]) * self.extents[2] + idx[2]
    }

    /// Voxel containing a camera-frame point.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let rel = |axis: usize| ((p[axis] - self.origin[axis]) / self.resolution).floor();
        let (d, h, w) = (rel(2), rel(1), rel(0));
        let inside = |v: f64, e: usize| v >= 0.0 && v < e as f64;
        (inside(d, self.extents[0]) && inside(h, self.extents[1]) && inside(w, self.extents[2]))
            .then(|| [d as usize, h as usize, w as usize])
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        let r = self.resolution;
        [
            self.origin[0] + (idx[2] as f64 + 0.5) * r,
            self.origin[1] + (idx[1] as f64 + 0.5) * r,
            self.origin[2] + (idx[0] as f64 + 0.5) * r,
        ]
    }

    /// Same volume with voxels `factor` times larger.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.extents.iter().any(|e| e % factor != 0) {
            return config_err(format!(
                "extents {:?} not divisible by {factor}",
                self.extents
            ));
        }
        Ok(Self {
            origin: self.origin,
            resolution: self.resolution * factor as f64,
            extents: self.extents.map(|e| e / factor),
        })
    }
}

/// Metric depth image; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub meters: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, meters: Vec<f32>) -> Result<Self> {
        if meters.len() != height * width || height == 0 || width == 0 {
            return shape_err(format!(
                "depth image {height}x{width} with {} values",
                meters.len()
            ));
        }
        Ok(Self { height, width, meters })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.meters[row * self.width + col]
    }

    pub fn is_valid(d: f32) -> bool {
        d.is_finite() && d > 0.0
    }
}

/// Voxel hit by pixel `(u, v)` at `depth`, or `None` for an invalid depth or
/// a point outside the grid.
pub fn pixel_to_voxel(
    u: f64,
    v: f64,
    depth: f64,
    cam: &CameraIntrinsics,
    grid: &VoxelGridSpec,
) -> Option<[usize; 3]> {
    if !(depth.is_finite() && depth > 0.0) {
        return None;
    }
    grid.locate(cam.unproject(u, v, depth))
}

/// Flat voxel index for every pixel of a depth image (row-major).
pub fn pixel_voxels(depth: &DepthImage, cam: &CameraIntrinsics, grid: &VoxelGridSpec) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(depth.height * depth.width);
    for row in 0..depth.height {
        for col in 0..depth.width {
            let d = depth.at(row, col);
            let v = DepthImage::is_valid(d)
                .then(|| pixel_to_voxel(col as f64, row as f64, d as f64, cam, grid))
                .flatten();
            out.push(v.map(|i| grid.flat_index(i)));
        }
    }
    out
}

/// For every (voxel, channel) element of the output volume, the (pixel,
/// channel) element of `fmap` that lands there with the largest value.
/// Ties keep the first pixel in row-major order.
pub fn projection_index(
    fmap: &Tensor,
    depth: &DepthImage,
    cam: &CameraIntrinsics,
    grid: &VoxelGridSpec,
) -> Result<Vec<Option<usize>>> {
    if fmap.rank() != 3 || fmap.shape()[0] != depth.height || fmap.shape()[1] != depth.width {
        return shape_err(format!(
            "feature map {:?} does not match depth {}x{}",
            fmap.shape(),
            depth.height,
            depth.width
        ));
    }
    cam.validate()?;
    grid.validate()?;
    let c = fmap.channels();
    let src = fmap.data();
    let mut best: Vec<Option<usize>> = vec![None; grid.voxel_count() * c];
    for (p, vox) in pixel_voxels(depth, cam, grid).into_iter().enumerate() {
        let Some(vox) = vox else { continue };
        for ch in 0..c {
            let s = p * c + ch;
            let slot = &mut best[vox * c + ch];
            match slot {
                Some(b) if src[*b] >= src[s] => {}
                _ => *slot = Some(s),
            }
        }
    }
    Ok(best)
}

fn volume_shape(grid: &VoxelGridSpec, channels: usize) -> [usize; 4] {
    [grid.extents[0], grid.extents[1], grid.extents[2], channels]
}

/// Scatter 2D features into a zero-initialized volume (max on collisions).
pub fn project_features(
    fmap: &Tensor,
    depth: &DepthImage,
    cam: &CameraIntrinsics,
    grid: &VoxelGridSpec,
) -> Result<Tensor> {
    let index = projection_index(fmap, depth, cam, grid)?;
    let data = index.iter().map(|i| i.map_or(0.0, |i| fmap.data()[i])).collect();
    Ok(Tensor::new(&volume_shape(grid, fmap.channels()), data)?)
}

/// Graph-recorded projection; gradients flow back to the winning pixels.
pub fn project_node(
    g: &mut Graph,
    fmap: NodeId,
    depth: &DepthImage,
    cam: &CameraIntrinsics,
    grid: &VoxelGridSpec,
) -> Result<NodeId> {
    let index = projection_index(g.value(fmap), depth, cam, grid)?;
    let c = g.value(fmap).channels();
    Ok(g.gather(fmap, index, &volume_shape(grid, c))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Visibility {
    ObservedEmpty = 0,
    ObservedSurface = 1,
    Occluded = 2,
    OutsideFov = 3,
}

impl Visibility {
    pub fn in_view(self) -> bool {
        self != Visibility::OutsideFov
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityGrid {
    pub extents: [usize; 3],
    pub labels: Vec<Visibility>,
}

impl VisibilityGrid {
    pub fn get(&self, idx: [usize; 3]) -> Visibility {
        self.labels[(idx[0] * self.extents[1] + idx[1]) * self.extents[2] + idx[2]]
    }

    pub fn count(&self, v: Visibility) -> usize {
        self.labels.iter().filter(|&&l| l == v).count()
    }
}

/// Classify every voxel center against the observed surface, with a
/// surface band of one voxel resolution on either side.
pub fn visibility_mask(depth: &DepthImage, cam: &CameraIntrinsics, grid: &VoxelGridSpec) -> VisibilityGrid {
    let tau = grid.resolution;
    let [nd, nh, nw] = grid.extents;
    let mut labels = Vec::with_capacity(grid.voxel_count());
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let c = grid.center([d, h, w]);
                labels.push(classify(c, depth, cam, tau));
            }
        }
    }
    VisibilityGrid {
        extents: grid.extents,
        labels,
    }
}

fn classify(center: [f64; 3], depth: &DepthImage, cam: &CameraIntrinsics, tau: f64) -> Visibility {
    let Some((u, v)) = cam.project(center) else {
        return Visibility::OutsideFov;
    };
    let (col, row) = (u.round(), v.round());
    if col < 0.0 || row < 0.0 || col >= depth.width as f64 || row >= depth.height as f64 {
        return Visibility::OutsideFov;
    }
    let zs = depth.at(row as usize, col as usize);
    if !DepthImage::is_valid(zs) {
        return Visibility::OutsideFov;
    }
    let (zv, zs) = (center[2], zs as f64);
    if zv < zs - tau {
        Visibility::ObservedEmpty
    } else if zv > zs + tau {
        Visibility::Occluded
    } else {
        Visibility::ObservedSurface
    }
}
