//! Drives the gated recurrences for many steps with random inputs and
//! reports the output bound, against the ungated recurrence.

use trackgraph::assocgraph::GateMode;
use trackgraph::recurrence::stability_run;

fn main() -> trackgraph::Result<()> {
    let steps = 10_000;
    for (mode, scale) in [(GateMode::Lstm, 1.0), (GateMode::Lstm, 3.0), (GateMode::Simple, 1.0), (GateMode::None, 1.0)] {
        let r = stability_run(mode, 32, steps, scale, 0)?;
        let outcome = match r.diverged_at {
            Some(t) => format!("diverged at step {t}"),
            None => format!("max |y| = 1 - {:.2e}", 1.0 - r.max_abs_y),
        };
        println!("{mode:?} weight scale {scale}: {} steps, {outcome}", r.steps_run);
    }
    Ok(())
}
