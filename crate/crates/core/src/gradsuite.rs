//! Finite-difference checks of every trainable building block at random
//! tiny extents.

use grf_tensor::gradcheck::{check_inputs, check_params, GradCheckReport};
use grf_tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{AsppSpec, DdrConfig, DdrSpec, DownsampleSpec};
use crate::error::Result;
use crate::fusion::{baseline_fuse, grf_step, FusionSpec, FusionState, FusionStrategy, Fusion, GrfSpec};
use crate::loss::{weighted_ce, ClassWeights, EvalMask, Normalization, UNKNOWN};

pub const CASES: [&str; 8] = [
    "ddr2d",
    "ddr3d",
    "downsample",
    "lw_aspp",
    "grf_step",
    "lstm_step",
    "gated_fusion",
    "weighted_ce",
];

/// Parameter elements probed per case.
const PROBES: usize = 48;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn extents(rng: &mut ChaCha8Rng, dims: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..dims).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Give every parameter, biases included, a random nonzero value.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
}

fn probes(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    if all.len() <= PROBES {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), PROBES)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Check a block `f(g, store, inputs) -> output` under a random linear readout.
fn check_block<F>(
    rng: &mut ChaCha8Rng,
    mut store: ParamStore,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    randomize(&mut store, rng);
    let readout = random(rng, out_shape);
    let mut report = {
        let s = &store;
        check_inputs(&inputs, eps, |g, ids| {
            let y = f(g, s, ids).map_err(to_tensor_err)?;
            g.dot_const(y, readout.clone())
        })?
    };
    let pr = probes(&store, rng);
    let p = check_params(&mut store, &pr, eps, |g, s| {
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(g, s, &ids).map_err(to_tensor_err)?;
        g.dot_const(y, readout.clone())
    })?;
    report.merge(p);
    Ok(report)
}

fn to_tensor_err(e: crate::Error) -> grf_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => grf_tensor::TensorError::Shape(other.to_string()),
    }
}

/// Run one named case with its own seed.
pub fn check_case(name: &str, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match name {
        "ddr2d" | "ddr3d" => {
            let dims = if name == "ddr2d" { 2 } else { 3 };
            let d = rng.gen_range(1..=2);
            let spec = DdrSpec::new(DdrConfig::new(dims, 3, 4, 1, d), 4)?;
            let ddr = spec.register(&mut store, &mut rng, "ddr")?;
            let mut shape = extents(&mut rng, dims, 2, 4);
            shape.push(4);
            let x = random(&mut rng, &shape);
            check_block(&mut rng, store, vec![x], &shape, eps, |g, s, ids| ddr.forward(g, s, ids[0]))
        }
        "downsample" => {
            let c_in = rng.gen_range(1..=3);
            let spec = DownsampleSpec::new(3, c_in, 2);
            let ds = spec.register(&mut store, &mut rng, "down")?;
            let ext: Vec<usize> = extents(&mut rng, 3, 1, 2).iter().map(|e| 2 * e).collect();
            let mut shape = ext.clone();
            shape.push(c_in);
            let x = random(&mut rng, &shape);
            let mut out: Vec<usize> = ext.iter().map(|e| e / 2).collect();
            out.push(spec.out_channels());
            check_block(&mut rng, store, vec![x], &out, eps, |g, s, ids| ds.forward(g, s, ids[0]))
        }
        "lw_aspp" => {
            let spec = AsppSpec::new(4, 4, &[1, 2]);
            let aspp = spec.register(&mut store, &mut rng, "aspp")?;
            let mut shape = extents(&mut rng, 3, 2, 3);
            shape.push(4);
            let x = random(&mut rng, &shape);
            let mut out = shape.clone();
            out[3] = spec.out_channels();
            check_block(&mut rng, store, vec![x], &out, eps, |g, s, ids| aspp.forward(g, s, ids[0]))
        }
        "grf_step" => {
            let c = rng.gen_range(1..=3);
            let p = GrfSpec::new(c).register(&mut store, &mut rng, "grf")?;
            let mut shape = extents(&mut rng, 3, 2, 3);
            shape.push(c);
            let (f, h) = (random(&mut rng, &shape), random(&mut rng, &shape));
            check_block(&mut rng, store, vec![f, h], &shape, eps, |g, s, ids| {
                let (next, _) = grf_step(g, s, FusionState::new(ids[1]), ids[0], &p)?;
                next.h()
            })
        }
        "lstm_step" => {
            let c = rng.gen_range(1..=3);
            let Fusion::Lstm(p) = FusionSpec::new(FusionStrategy::Lstm, c).register(&mut store, &mut rng, "lstm")? else {
                unreachable!("lstm spec registers lstm params")
            };
            let mut shape = extents(&mut rng, 3, 2, 3);
            shape.push(c);
            let ins = vec![random(&mut rng, &shape), random(&mut rng, &shape), random(&mut rng, &shape)];
            check_block(&mut rng, store, ins, &shape, eps, |g, s, ids| {
                let (h, c) = p.step(g, s, ids[0], ids[1], ids[2])?;
                Ok(g.add(h, c)?)
            })
        }
        "gated_fusion" => {
            let c = rng.gen_range(1..=3);
            let fusion = FusionSpec::new(FusionStrategy::Gated, c).register(&mut store, &mut rng, "gated")?;
            let mut shape = extents(&mut rng, 3, 2, 3);
            shape.push(c);
            let ins = vec![random(&mut rng, &shape), random(&mut rng, &shape)];
            check_block(&mut rng, store, ins, &shape, eps, |g, s, ids| {
                baseline_fuse(g, s, &fusion, ids[0], ids[1])
            })
        }
        "weighted_ce" => {
            let ext = extents(&mut rng, 3, 2, 3);
            let n: usize = ext.iter().product();
            let mut shape = ext.clone();
            shape.push(12);
            let logits = random(&mut rng, &shape).scale(3.0);
            let labels: Vec<u8> = (0..n)
                .map(|_| if rng.gen_bool(0.15) { UNKNOWN } else { rng.gen_range(0..12) })
                .collect();
            let mut mask = EvalMask::all(n);
            mask.in_loss.iter_mut().for_each(|m| *m = rng.gen_bool(0.7));
            let weights = ClassWeights::new((0..12).map(|_| rng.gen_range(0.05..2.0)).collect())?;
            Ok(check_inputs(&[logits], eps, |g, ids| {
                weighted_ce(g, ids[0], &labels, &weights, &mask, Normalization::Mean).map_err(to_tensor_err)
            })?)
        }
        other => Err(crate::Error::Config(format!("unknown gradient check case {other:?}"))),
    }
}

/// Every case over seeds `0..seeds`, merged per case.
pub fn run_suite(seeds: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    CASES
        .iter()
        .map(|&name| {
            let mut total = GradCheckReport::default();
            for seed in 0..seeds {
                total.merge(check_case(name, seed, eps)?);
            }
            Ok((name, total))
        })
        .collect()
}
