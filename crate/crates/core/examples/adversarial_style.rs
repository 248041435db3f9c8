//! Learn adversarial style statistics for a batch against a briefly trained
//! model and show that the segmentation loss goes up while content and
//! labels stay put.
//!
//! cargo run --release --example adversarial_style -- [gamma] [out_dir]

use std::path::PathBuf;

use advstyle::augment::{adv_style_batch, AdvConfig};
use advstyle::model::{seg_loss, ModelConfig, ModelState};
use advstyle::netpbm::write_ppm;
use advstyle::style::{decompose, STYLE_EPS};
use advstyle::synthetic::{make_domain, DomainSpec, LabeledImage};
use advstyle::train::{train, Policy, TrainConfig};
use advstyle::{Graph, Tensor};

fn batch_loss(model: &ModelState, samples: &[LabeledImage]) -> advstyle::Result<f64> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u8> = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let x = g.constant(Tensor::stack(&images)?)?;
    let logits = model.forward_graph(&mut g, &params, x, None)?;
    let loss = seg_loss(&mut g, logits, &labels)?;
    Ok(g.value(loss).data()[0] as f64)
}

fn main() -> advstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let gamma: f32 = args.next().map_or(3.0, |s| s.parse().expect("gamma must be a number"));
    let out = args.next().map(PathBuf::from);

    let spec = DomainSpec::source().with_size(32, 32);
    let source = make_domain(&spec, 64, 0)?;
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

    let batch: Vec<LabeledImage> = source.items[..8].to_vec();
    let adv = AdvConfig {
        gamma,
        ..AdvConfig::default()
    };
    let aug = adv_style_batch(&model, &batch, &adv)?;

    println!("gamma {gamma}");
    println!("loss clean {:.4}", batch_loss(&model, &aug.original)?);
    println!("loss adv   {:.4}", batch_loss(&model, &aug.augmented)?);
    for (i, p) in aug.provenance.iter().enumerate().take(3) {
        println!(
            "sample {i}: mean {:?} -> {:?}, std {:?} -> {:?}",
            p.before[0].mean, p.after[0].mean, p.before[0].std, p.after[0].std
        );
    }
    let (a, _) = decompose(&aug.original[0].image, STYLE_EPS as f32)?;
    let (b, _) = decompose(&aug.augmented[0].image, STYLE_EPS as f32)?;
    let drift = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    println!("normalized-content drift {drift:.2e}");
    println!(
        "label shared with source: {}",
        std::sync::Arc::ptr_eq(&aug.original[0].label, &aug.augmented[0].label)
    );

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        for (i, (o, a)) in aug.original.iter().zip(&aug.augmented).enumerate() {
            write_ppm(&dir.join(format!("{i:02}_clean.ppm")), &o.image)?;
            write_ppm(&dir.join(format!("{i:02}_adv.ppm")), &a.image)?;
        }
        println!("wrote {}", dir.display());
    }
    Ok(())
}
