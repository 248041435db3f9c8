//! Synthetic source -> target benchmark over augmentation policies, printed
//! as a method x domain table. Defaults are small enough for a quick look;
//! pass a config file for the full protocol.
//!
//! cargo run --release --example benchmark -- [config_file]

use std::path::PathBuf;

use advstyle::bench::run_bench;
use advstyle::config::Settings;
use advstyle::train::Policy;

fn main() -> advstyle::Result<()> {
    let file = std::env::args().nth(1).map(PathBuf::from);
    let quick: &[(&str, &str)] = if file.is_some() {
        &[]
    } else {
        &[("max_iter", "300"), ("bench.repeats", "1"), ("bench.policies", "none,randstyle,advstyle")]
    };
    let s = Settings::resolve(file.as_deref(), quick)?;
    let report = run_bench(&s, |r| {
        println!(
            "  {:<12} seed {} -> source {:.2} target {:.2}",
            r.policy,
            r.seed,
            100.0 * r.source_miou,
            100.0 * r.target_miou
        )
    })?;
    print!("{}", report.results_csv());
    if let (Some(none), Some(adv)) = (report.policy_mean(Policy::None), report.policy_mean(Policy::AdvStyle)) {
        println!("advstyle - none (target): {:+.2}", 100.0 * (adv.1 - none.1));
    }
    Ok(())
}
