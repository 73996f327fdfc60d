//! Central finite differences against the hand-written backward pass.
//!
//! Every gradient in this crate is derived and coded by hand, so the only
//! trustworthy referee is the loss function itself: perturb one parameter,
//! difference the loss, compare. This runs the full composite objective on a
//! compact model in all three twin configurations and reports the worst
//! relative error over every parameter of the network.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use madtwin::error::Result;
use madtwin::training::gradcheck::small_check_model;
use madtwin::training::gradient_check_full;
use madtwin::twinnet::{TwinBackprop, TwinOptions};

fn main() -> Result<()> {
    let variants = [
        (
            "twin with stopped gradient (default)",
            TwinOptions::default(),
        ),
        (
            "twin with full backpropagation",
            TwinOptions {
                backprop: TwinBackprop::Full,
                ..TwinOptions::default()
            },
        ),
        (
            "twin disabled",
            TwinOptions {
                enabled: false,
                ..TwinOptions::default()
            },
        ),
    ];
    let tolerance = 1e-4;
    for (label, twin) in variants {
        let model = small_check_model(twin);
        println!("{label}:");
        for seed in 0..3 {
            let report = gradient_check_full(seed, &model)?;
            let verdict = if report.passes(tolerance) { "ok" } else { "FAIL" };
            println!(
                "  seed {seed}: {} parameters, max rel err {:.3e} at {}[{}] ... {verdict}",
                report.checked, report.max_rel_err, report.worst_name, report.worst_index
            );
        }
    }
    println!("tolerance: {tolerance:.0e} relative");
    Ok(())
}
