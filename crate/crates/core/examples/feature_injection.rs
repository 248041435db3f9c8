//! Adversarial style at the input and after each backbone stage. At every
//! position the learned statistics are fed back through a restyle hook and the
//! loss is compared with the clean forward pass.
//!
//! cargo run --release --example feature_injection -- [gamma]

use advstyle::augment::{learn_adversarial_style, AdvConfig, RestyleHook};
use advstyle::model::{seg_loss, ModelConfig, ModelState};
use advstyle::synthetic::{make_domain, DomainSpec};
use advstyle::train::{sample_batch, train, Policy, TrainConfig};
use advstyle::{Graph, Tensor};

fn loss_with(
    model: &ModelState,
    images: &Tensor<f32>,
    labels: &[u8],
    pos: usize,
    hook: Option<&mut dyn advstyle::model::StyleHook<f32>>,
) -> advstyle::Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let x = g.constant(images.clone())?;
    let logits = model.forward_graph_at(&mut g, &params, x, pos, hook)?;
    let loss = seg_loss(&mut g, logits, labels)?;
    Ok(g.value(loss).data()[0] as f64)
}

fn main() -> advstyle::Result<()> {
    let gamma: f32 = std::env::args().nth(1).map_or(3.0, |s| s.parse().expect("gamma must be a number"));
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
    let batch = sample_batch(&cfg, &source, 0)?;
    let adv = AdvConfig {
        gamma,
        ..AdvConfig::default()
    };

    println!("pos  channels  clean_loss  adv_loss  |dmu|     |dsigma|");
    for pos in 0..=model.num_stages() {
        let out = learn_adversarial_style(&model, &batch.images, &batch.labels, pos, &adv)?;
        let (dm, ds) = out.learned.shift_from(&out.initial);
        let learned = out.learned.clone();
        let mut hook = RestyleHook::new(adv.layout(), move |_: &_| Ok(learned.clone()));
        let adv_loss = loss_with(&model, &batch.images, &batch.labels, pos, Some(&mut hook))?;
        println!(
            "{pos:<4} {:<9} {:<11.4} {:<9.4} {dm:<9.4} {ds:.4}",
            out.learned.channels(),
            out.loss_before,
            adv_loss
        );
    }
    Ok(())
}
