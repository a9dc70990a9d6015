//! Finite-difference check of every differentiable piece, from single layers
//! up to a full unrolled training step.

use trackgraph::learn::{gradcheck_target, GRADCHECK_TARGETS};

fn main() -> trackgraph::Result<()> {
    for target in GRADCHECK_TARGETS {
        let r = gradcheck_target(target, 0)?;
        println!(
            "{target:<14} max relative error {:.2e}  ({} coordinates checked, {} skipped at kinks)",
            r.max_rel_error, r.checked, r.skipped
        );
    }
    Ok(())
}
