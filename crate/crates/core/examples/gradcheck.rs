//! Finite-difference check of a few differentiable ops.
//!
//! cargo run --release --example gradcheck [instances]

use regionvqa::gradsuite::{run_op, SuiteConfig};

fn main() -> regionvqa::Result<()> {
    let instances = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = SuiteConfig {
        instances,
        ..SuiteConfig::default()
    };
    for op in ["matmul", "softmax", "layer_norm", "roi_align", "bilinear_attention", "end_to_end"] {
        let r = run_op(op, &cfg)?;
        println!(
            "{:<20} {:>3}/{} ok  max rel-err {:.2e}",
            r.op,
            r.instances - r.failures,
            r.instances,
            r.max_rel_err
        );
    }
    Ok(())
}
