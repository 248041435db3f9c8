//! The non-adversarial style baselines (RandStyle, MixStyle, CrossStyle),
//! the pixel-space adversarial baseline, and the random policy selector.
//! Style methods keep normalized content; the pixel attack does not.
//!
//! cargo run --release --example baselines

use advstyle::augment::{adv_pixel, cross_style, mix_style, policy_select, rand_style, Strategy};
use advstyle::model::{build_model, ModelConfig};
use advstyle::rng::rng_for;
use advstyle::style::{decompose, STYLE_EPS};
use advstyle::synthetic::{generate_scene, DomainSpec, LabeledImage};

fn content_drift(a: &LabeledImage, b: &LabeledImage) -> advstyle::Result<f32> {
    let (na, _) = decompose(&a.image, STYLE_EPS as f32)?;
    let (nb, _) = decompose(&b.image, STYLE_EPS as f32)?;
    Ok(na.data().iter().zip(nb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
}

fn report(name: &str, x: &LabeledImage, y: &LabeledImage) -> advstyle::Result<()> {
    let (_, s) = decompose(&y.image, STYLE_EPS as f32)?;
    println!(
        "{name:<11} mean {:>6.3?} std {:>6.3?} content drift {:.1e}",
        s.mean,
        s.std,
        content_drift(x, y)?
    );
    Ok(())
}

fn main() -> advstyle::Result<()> {
    let spec = DomainSpec::source().with_size(32, 32);
    let a = generate_scene(&spec, 1)?;
    let b = generate_scene(&DomainSpec::target().with_size(32, 32), 2)?;
    report("input", &a, &a)?;
    report("randstyle", &a, &rand_style(&a, 0.1, 42)?)?;
    report("mixstyle", &a, &mix_style(&a, &b, 0.3)?)?;
    let (ab, _) = cross_style(&a, &b)?;
    report("crossstyle", &a, &ab)?;

    let model = build_model(&ModelConfig::default(), 0)?;
    report("advpixel", &a, &adv_pixel(&model, &a, 10.0, 1)?)?;

    let choices = [Strategy::RandStyle, Strategy::AdvStyle];
    let mut rng = rng_for(0, &[]);
    let picks: Vec<&str> = (0..10)
        .map(|_| policy_select(&choices, &[0.5, 0.5], &mut rng).map(|s| s.name()))
        .collect::<advstyle::Result<_>>()?;
    println!("random combo picks: {}", picks.join(" "));
    Ok(())
}
