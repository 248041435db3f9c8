//! Two-stage training with any augmentation policy, followed by clean
//! evaluation on the source and target domains.
//!
//! cargo run --release --example training -- [policy] [max_iter] [out_dir]

use std::path::PathBuf;

use advstyle::config::Settings;
use advstyle::bench::bench_data;
use advstyle::metrics::evaluate_miou;
use advstyle::train::{train, Policy};

fn main() -> advstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let policy: Policy = args.next().as_deref().unwrap_or("advstyle").parse()?;
    let max_iter: usize = args.next().map_or(500, |s| s.parse().expect("max_iter must be an integer"));
    let out = args.next().map(PathBuf::from);

    let mut s = Settings::default();
    s.train.policy = policy;
    s.train.max_iter = max_iter;
    let data = bench_data(&s)?;
    let (model, log) = train(&s.train, &data.source_train)?;

    for r in log.records.iter().step_by((max_iter / 10).max(1)) {
        println!(
            "iter {:>5} lr {:.5} clean {:.4} adv {:.4}",
            r.iter, r.lr, r.loss_clean, r.loss_adv
        );
    }
    let src = evaluate_miou(&model, &data.source_test)?;
    let tgt = evaluate_miou(&model, &data.target_test)?;
    println!("{policy}: source mIoU {:.2}  target mIoU {:.2}", 100.0 * src.miou, 100.0 * tgt.miou);
    println!("checkpoint sha256 {}", model.fingerprint());

    if let Some(dir) = out {
        model.save_checkpoint(&dir.join("checkpoint"))?;
        std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
