//! Split an image into normalized content and per-channel style statistics,
//! then put it back together (whole image, 2x2 patches, and Lab space).
//!
//! cargo run --release --example style_decompose

use advstyle::style::{decompose, decompose_patches, lab_to_rgb, recompose, recompose_patches, rgb_to_lab, STYLE_EPS};
use advstyle::synthetic::{generate_scene, DomainSpec};

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn main() -> advstyle::Result<()> {
    let x = generate_scene(&DomainSpec::source().with_size(32, 32), 7)?;
    let (normalized, stats) = decompose(&x.image, STYLE_EPS as f32)?;
    println!("mean {:?}", stats.mean);
    println!("std  {:?}", stats.std);

    let back = recompose(&normalized, &stats)?;
    println!("whole-image round trip: max |err| = {:.2e}", max_abs(back.data(), x.image.data()));

    let (pn, grid) = decompose_patches(&x.image, 2, 2, STYLE_EPS as f32)?;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            println!("patch ({r},{c}) mean {:?}", grid.cell(r, c).mean);
        }
    }
    let back = recompose_patches(&pn, &grid)?;
    println!("patch round trip:       max |err| = {:.2e}", max_abs(back.data(), x.image.data()));

    let lab = rgb_to_lab(&x.image)?;
    let back = lab_to_rgb(&lab)?;
    println!("Lab round trip:         max |err| = {:.2e}", max_abs(back.data(), x.image.data()));
    Ok(())
}
