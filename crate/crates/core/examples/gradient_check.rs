//! Finite-difference gradient checks: every substrate op, then the whole
//! model (backbone -> projection -> GLA -> head -> loss) in float64.
//!
//! cargo run --release --example gradient_check -- [seeds]

use dyad::harness::gradcheck::{check_model, gradcheck_config};
use dyad::nn::gradcheck::{check_op, GradcheckOptions, OP_NAMES};

fn main() -> dyad::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    println!("{:<18} {:>14}", "op", "max rel err");
    for op in OP_NAMES {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            worst = worst.max(
                check_op(
                    op,
                    seed,
                    &GradcheckOptions {
                        seed,
                        ..Default::default()
                    },
                )?
                .max_rel_err(),
            );
        }
        println!("{op:<18} {worst:>14.3e}");
    }

    let opts = GradcheckOptions {
        tolerance: 1e-4,
        max_probes: Some(4),
        ..Default::default()
    };
    let report = check_model(&gradcheck_config(), 0, &opts)?;
    println!("\nend-to-end, seed 0:");
    print!("{}", report.table());
    println!(
        "{}",
        if report.passed() {
            "all parameters pass"
        } else {
            "FAILED"
        }
    );
    Ok(())
}
