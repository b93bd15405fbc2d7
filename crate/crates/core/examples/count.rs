//! Print the layer table plus parameter and FLOP totals for N = 1..4.

use grfnet::network::{format_plan, layer_plan, plan_cost, NetworkConfig};

fn main() -> grfnet::Result<()> {
    print!("{}", format_plan(&layer_plan(&NetworkConfig::paper(4))?));
    for n in 1..=4 {
        let c = plan_cost(&NetworkConfig::paper(n))?;
        println!("N={n}: params {:.2}k  flops {:.2}G", c.params as f64 / 1e3, c.flops as f64 / 1e9);
    }
    Ok(())
}
