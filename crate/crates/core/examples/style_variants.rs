//! AdvStyle variants: statistics taken in Lab instead of RGB, and a 2x2 grid
//! of per-patch statistics learned jointly.
//!
//! cargo run --release --example style_variants

use advstyle::augment::{adv_style_batch, AdvConfig, ColorSpace, Granularity};
use advstyle::model::ModelConfig;
use advstyle::synthetic::{make_domain, DomainSpec};
use advstyle::train::{train, Policy, TrainConfig};

fn main() -> advstyle::Result<()> {
    let source = make_domain(&DomainSpec::source().with_size(32, 32), 64, 0)?;
    let cfg = TrainConfig {
        max_iter: 300,
        policy: Policy::None,
        model: ModelConfig {
            widths: vec![8, 16, 16, 8],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let (model, _) = train(&cfg, &source)?;
    let batch = &source.items[..4];

    for (space, granularity) in [
        (ColorSpace::Rgb, Granularity::Whole),
        (ColorSpace::Lab, Granularity::Whole),
        (ColorSpace::Rgb, Granularity::Patches2x2),
    ] {
        let adv = AdvConfig {
            space,
            granularity,
            ..AdvConfig::default()
        };
        let out = adv_style_batch(&model, batch, &adv)?;
        let p = &out.provenance[0];
        println!("{space:?}/{granularity:?}: {} cell(s)", p.before.len());
        for (cell, (b, a)) in p.before.iter().zip(&p.after).enumerate() {
            println!("  cell {cell}: mean {:>7.3?} -> {:>7.3?}", b.mean, a.mean);
        }
    }
    Ok(())
}
