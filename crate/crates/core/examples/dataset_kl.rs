//! Style-distribution analysis: per-image style tables, pooled pixel
//! histograms and KL distances between the source domain, the target domain
//! and adversarially restyled source images harvested during training.
//!
//! cargo run --release --example dataset_kl -- [max_iter]

use advstyle::analysis::{extract_style_features, histogram_feature, kl_distance, DEFAULT_BINS, DEFAULT_SMOOTHING};
use advstyle::bench::bench_data;
use advstyle::config::Settings;
use advstyle::synthetic::Dataset;
use advstyle::train::{train, Policy};

fn main() -> advstyle::Result<()> {
    let max_iter: usize = std::env::args().nth(1).map_or(400, |s| s.parse().expect("max_iter must be an integer"));
    let mut s = Settings::default();
    s.train.policy = Policy::AdvStyle;
    s.train.max_iter = max_iter;
    s.train.harvest_every = 20;
    let data = bench_data(&s)?;
    let (_, log) = train(&s.train, &data.source_train)?;
    let harvested = Dataset::from_items(log.harvest);

    let table = extract_style_features(&data.source_train)?;
    print!("{}", table.to_csv().lines().take(4).collect::<Vec<_>>().join("\n"));
    println!("\n... ({} rows)", table.rows.len());

    let hs = histogram_feature(&data.source_train, DEFAULT_BINS)?;
    let ht = histogram_feature(&data.target_test, DEFAULT_BINS)?;
    let ha = histogram_feature(&harvested, DEFAULT_BINS)?;
    println!("KL(S, S)     = {:.6}", kl_distance(&hs, &hs, DEFAULT_SMOOTHING)?);
    println!("KL(S, T)     = {:.6}", kl_distance(&hs, &ht, DEFAULT_SMOOTHING)?);
    println!(
        "KL(S+adv, T) = {:.6}  ({} harvested images)",
        kl_distance(&ha, &ht, DEFAULT_SMOOTHING)?,
        harvested.len()
    );
    Ok(())
}
