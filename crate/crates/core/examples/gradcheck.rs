//! Finite-difference gradient check of every differentiable op and of the
//! composed style-augmented forward pass, in 64-bit.
//!
//! cargo run --release --example gradcheck

use advstyle::gradsuite::{run_suite, suite};

fn main() -> advstyle::Result<()> {
    let reports = run_suite(&suite())?;
    for r in &reports {
        println!("{:<18} {:.3e} {}", r.name, r.worst(), if r.passed() { "ok" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{failed} of {} failed", reports.len());
    std::process::exit(i32::from(failed > 0));
}
