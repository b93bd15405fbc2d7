#![allow(dead_code)]

use std::collections::BTreeSet;

use grf_tensor::{ParamStore, Tensor};
use grfnet::fusion::GrfParams;
use rand::Rng;

pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// k=3 "same" 3-D conv over `[D, H, W, C]` by direct loops.
pub fn conv3(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let [d, h, wd, c] = dims;
    let at = |z: isize, y: isize, xx: isize, ci: usize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x[((z as usize * h + y as usize) * wd + xx as usize) * c + ci]
        }
    };
    let mut out = vec![0.0; d * h * wd * c_out];
    for z in 0..d {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..c_out {
                    let mut s = b[co];
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for ci in 0..c {
                                    let wi = (((kz * 3 + ky) * 3 + kx) * c + ci) * c_out + co;
                                    s += w[wi]
                                        * at(
                                            z as isize + kz as isize - 1,
                                            y as isize + ky as isize - 1,
                                            xx as isize + kx as isize - 1,
                                            ci,
                                        );
                                }
                            }
                        }
                    }
                    out[((z * h + y) * wd + xx) * c_out + co] = s;
                }
            }
        }
    }
    out
}

fn concat(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    a.chunks(c).zip(b.chunks(c)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
}

/// Reset gate, update gate, candidate and next state of one GRF step,
/// written directly from the gate equations.
pub struct GrfOracle {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub hc: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn grf_oracle(store: &ParamStore, p: &GrfParams, f: &Tensor, h: &Tensor) -> GrfOracle {
    let s = f.shape();
    let dims = [s[0], s[1], s[2], s[3]];
    let c = s[3];
    let conv = |conv: &grfnet::blocks::Conv, input: &[f64]| {
        let w = store.value(conv.weight).data();
        let b = store.value(conv.bias.expect("gate bias")).data();
        conv3(input, [dims[0], dims[1], dims[2], 2 * c], w, b, c)
    };
    let fh = concat(f.data(), h.data(), c);
    let r: Vec<f64> = conv(&p.w_r, &fh).into_iter().map(sigmoid).collect();
    let z: Vec<f64> = conv(&p.w_z, &fh).into_iter().map(sigmoid).collect();
    let h_reset: Vec<f64> = r.iter().zip(h.data()).map(|(a, b)| a * b).collect();
    let fr = concat(f.data(), &h_reset, c);
    let hc: Vec<f64> = conv(&p.w_h, &fr).into_iter().map(f64::tanh).collect();
    let next = (0..hc.len()).map(|i| z[i] * h.data()[i] + (1.0 - z[i]) * hc[i]).collect();
    GrfOracle { r, z, hc, h: next }
}

/// SC and SSC counts by building explicit voxel sets.
pub struct BruteForce {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub per_class: Vec<Option<f64>>,
}

pub fn brute_force(pred: &[u8], gt: &[u8], in_sc: &[bool], in_ssc: &[bool], classes: u8) -> BruteForce {
    let known = |i: &usize| gt[*i] != 255;
    let occ_pred: BTreeSet<usize> = (0..gt.len()).filter(known).filter(|&i| in_sc[i] && pred[i] != 0).collect();
    let occ_gt: BTreeSet<usize> = (0..gt.len()).filter(known).filter(|&i| in_sc[i] && gt[i] != 0).collect();
    let mut per_class = Vec::new();
    for c in 1..classes {
        let p: BTreeSet<usize> = (0..gt.len()).filter(known).filter(|&i| in_ssc[i] && pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(known).filter(|&i| in_ssc[i] && gt[i] == c).collect();
        let union = p.union(&g).count();
        per_class.push((union > 0).then(|| p.intersection(&g).count() as f64 / union as f64));
    }
    BruteForce {
        tp: occ_pred.intersection(&occ_gt).count(),
        fp: occ_pred.difference(&occ_gt).count(),
        fn_: occ_gt.difference(&occ_pred).count(),
        per_class,
    }
}

/// Weighted CE by direct summation over voxels.
pub fn direct_ce(logits: &[f64], classes: usize, labels: &[u8], weights: &[f64], in_loss: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in logits.chunks(classes).enumerate() {
        if !in_loss[i] || labels[i] == 255 {
            continue;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = labels[i] as usize;
        total += weights[t] * (lse - row[t]);
        count += 1;
    }
    total / count.max(1) as f64
}
