//! Max pooling and global average pooling over channels-last tensors.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Mean over all spatial sites, broadcast back to the input extents.
    GlobalAverage,
}

/// Output extents of an unpadded max pool.
pub fn max_pool_extents(spatial: &[usize], window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return shape_err("pool window and stride must be >= 1");
    }
    spatial
        .iter()
        .map(|&e| {
            if window > e {
                shape_err(format!("pool window {window} larger than extent {e}"))
            } else {
                Ok((e - window) / stride + 1)
            }
        })
        .collect()
}

/// Max pool with a cubic window. Returns the output and, for every output
/// element, the flat index of the input element that won (first max wins).
pub fn max_pool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let spatial = x.spatial();
    if spatial.is_empty() || spatial.len() > 3 {
        return shape_err("max pool needs 1..=3 spatial axes");
    }
    let out_sp = max_pool_extents(spatial, window, stride)?;
    let r = spatial.len();
    let mut in3 = [1usize; 3];
    let mut out3 = [1usize; 3];
    in3[3 - r..].copy_from_slice(spatial);
    out3[3 - r..].copy_from_slice(&out_sp);
    let win = |axis: usize| if axis < 3 - r { 1 } else { window };
    let st = |axis: usize| if axis < 3 - r { 1 } else { stride };
    let c = x.channels();
    let src = x.data();

    let mut out = Vec::with_capacity(out3.iter().product::<usize>() * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for z in 0..out3[0] {
        for y in 0..out3[1] {
            for w in 0..out3[2] {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..win(0) {
                        for b in 0..win(1) {
                            for e in 0..win(2) {
                                let zi = z * st(0) + a;
                                let yi = y * st(1) + b;
                                let xi = w * st(2) + e;
                                let i = ((zi * in3[1] + yi) * in3[2] + xi) * c + ch;
                                if src[i] > best || best_i == usize::MAX {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    let mut shape = out_sp;
    shape.push(c);
    Ok((Tensor::new(&shape, out)?, argmax))
}

/// Per-channel spatial mean broadcast back to every site.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let c = x.channels();
    let sites = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= sites as f64;
    }
    let mut out = Vec::with_capacity(x.len());
    for _ in 0..sites {
        out.extend_from_slice(&mean);
    }
    Tensor::new(x.shape(), out).expect("same shape as input")
}
