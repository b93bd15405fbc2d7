//! Compare analytic and central-difference gradients for every block.

use grfnet::gradsuite::run_suite;

fn main() -> grfnet::Result<()> {
    for (name, r) in run_suite(3, 1e-5)? {
        println!("{name:<14} {:>5} entries  max relative error {:.2e}", r.checked, r.max_rel_err);
    }
    Ok(())
}
