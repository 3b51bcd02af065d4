//! Compares analytic gradients of the full training loss with central
//! differences on toy image and scene problems.

use recolor::optimizer::{gradcheck_model, Mode};

fn main() -> anyhow::Result<()> {
    for mode in [Mode::Image, Mode::Scene] {
        let report = gradcheck_model(mode, 0, false)?;
        println!(
            "{mode}: max relative error {:.2e} over {} of {} parameters (tolerance {:.0e}) {}",
            report.max_relative_error,
            report.checked,
            report.parameters,
            report.tolerance,
            if report.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
