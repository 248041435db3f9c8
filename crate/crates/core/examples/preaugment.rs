//! Label-aware pre-augmentations (crop, flip, color jitter, blur) that run
//! before the style augmentation during training.
//!
//! cargo run --release --example preaugment

use advstyle::preaug::{pre_augment, PreAugConfig};
use advstyle::rng::rng_for;
use advstyle::style::{decompose, STYLE_EPS};
use advstyle::synthetic::{generate_scene, DomainSpec};

fn main() -> advstyle::Result<()> {
    let x = generate_scene(&DomainSpec::source().with_size(32, 32), 3)?;
    let cfg = PreAugConfig {
        color_jitter: true,
        blur: true,
        flip: true,
        crop: Some((24, 24)),
    };
    for k in 0..4 {
        let y = pre_augment(&x, &cfg, &mut rng_for(9, &[k]))?;
        let (_, s) = decompose(&y.image, STYLE_EPS as f32)?;
        println!(
            "draw {k}: {}x{} mean {:.3?} std {:.3?}",
            y.label.height, y.label.width, s.mean, s.std
        );
    }
    Ok(())
}
