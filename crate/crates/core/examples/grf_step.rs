//! Fuse a depth and an RGB feature volume with one GRF block and print the
//! gate statistics of each step.

use grf_tensor::{Graph, ParamStore, Tensor};
use grfnet::fusion::{single_stage_fuse, GrfSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(t: &Tensor) -> (f64, f64, f64) {
    let d = t.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, d.iter().sum::<f64>() / d.len() as f64, max)
}

fn main() -> grfnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let params = GrfSpec::new(8).register(&mut store, &mut rng, "grf")?;
    let shape = [4, 4, 4, 8];
    let mut g = Graph::new();
    let f_d = g.input(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let f_rgb = g.input(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let run = single_stage_fuse(&mut g, &store, f_d, f_rgb, &params)?;
    for (i, t) in run.traces.iter().enumerate() {
        let (rmin, rmean, rmax) = stats(g.value(t.r));
        let (zmin, zmean, zmax) = stats(g.value(t.z));
        println!("step {}: r in [{rmin:.3}, {rmax:.3}] mean {rmean:.3}; z in [{zmin:.3}, {zmax:.3}] mean {zmean:.3}", i + 1);
    }
    let (lo, mean, hi) = stats(g.value(run.state.h()?));
    println!("fused h: {:?}, values in [{lo:.3}, {hi:.3}], mean {mean:.3}", g.value(run.state.h()?).shape());
    println!("GRF parameters: {}", store.scalar_count());
    Ok(())
}
