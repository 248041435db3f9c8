use std::sync::Arc;

use advstyle::analysis::{histogram_of, kl_distance};
use advstyle::augment::{cross_style, mix_style, policy_select, rand_style};
use advstyle::metrics::iou_from_predictions;
use advstyle::rng::rng_for;
use advstyle::style::{
    decompose, decompose_patches, lab_to_rgb, recompose, recompose_patches, rgb_to_lab, STYLE_EPS,
};
use advstyle::synthetic::{generate_scene, DomainSpec, LabelMap, LabeledImage};
use advstyle::train::poly_lr;
use advstyle::Tensor;
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(0.0f32..1.0, 3 * h * w).prop_map(move |v| Tensor::new(vec![3, h, w], v).unwrap())
}

fn sized_image() -> impl Strategy<Value = Tensor<f32>> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| image(h, w))
}

fn scene(seed: u64) -> LabeledImage {
    generate_scene(&DomainSpec::source().with_size(16, 16), seed).unwrap()
}

fn max_abs(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Content as a plain z-score. The eps guard in the denominator would make
/// restyled content depend on the new std, most visibly near the std floor.
fn normalized(x: &LabeledImage) -> Tensor<f32> {
    decompose(&x.image, 0.0).unwrap().0
}

/// Rounding of an f32 image restyled to a tiny std: a few ulps of the
/// pixel magnitude, divided by that std.
fn f32_slack(x: &LabeledImage) -> f32 {
    let (_, s) = decompose(&x.image, 0.0).unwrap();
    let peak = x.image.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let floor = s.std.iter().copied().fold(f32::INFINITY, f32::min);
    4.0 * f32::EPSILON * peak / floor
}

fn labels_untouched(a: &LabeledImage, b: &LabeledImage) -> bool {
    Arc::ptr_eq(&a.label, &b.label) && a.label.data == b.label.data
}

/// Plain reference KL without clamping.
fn kl_reference(p: &[f64], q: &[f64], bins: usize, s: f64) -> f64 {
    let norm = |v: &[f64]| -> Vec<f64> {
        v.chunks(bins)
            .flat_map(|b| {
                let t: f64 = b.iter().map(|x| x + s).sum();
                b.iter().map(move |x| (x + s) * bins as f64 / t).collect::<Vec<_>>()
            })
            .collect()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_recompose_round_trip(x in sized_image()) {
        let (n, s) = decompose(&x, STYLE_EPS as f32).unwrap();
        prop_assert!(max_abs(&recompose(&n, &s).unwrap(), &x) < 1e-5);
    }

    #[test]
    fn patch_round_trip(x in (4usize..10, 4usize..10).prop_flat_map(|(h, w)| image(h, w))) {
        let (n, grid) = decompose_patches(&x, 2, 2, STYLE_EPS as f32).unwrap();
        prop_assert!(max_abs(&recompose_patches(&n, &grid).unwrap(), &x) < 1e-5);
    }

    #[test]
    fn lab_round_trip(x in sized_image()) {
        prop_assert!(max_abs(&lab_to_rgb(&rgb_to_lab(&x).unwrap()).unwrap(), &x) < 1e-4);
    }

    #[test]
    fn normalized_content_has_zero_mean_unit_std(x in sized_image()) {
        let (n, _) = decompose(&x, 0.0).unwrap();
        let (_, s) = decompose(&n, 0.0).unwrap();
        for c in 0..3 {
            prop_assert!(s.mean[c].abs() < 1e-4);
            // constant channels normalize to 0, otherwise to unit std
            prop_assert!(s.std[c] < 1e-4 || (s.std[c] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn style_baselines_keep_content_and_labels(a in 0u64..1000, b in 0u64..1000, lambda in 0.0f32..1.0, noise in 0.0f32..0.1) {
        let (x, y) = (scene(a), scene(b + 5000));
        let nx = normalized(&x);
        let outs = [
            rand_style(&x, noise, a).unwrap(),
            mix_style(&x, &y, lambda).unwrap(),
            cross_style(&x, &y).unwrap().0,
        ];
        for o in &outs {
            prop_assert!(max_abs(&normalized(o), &nx) < 1e-4 + f32_slack(o));
            prop_assert!(labels_untouched(&x, o));
        }
    }

    #[test]
    fn rand_style_is_deterministic(a in 0u64..1000, seed in any::<u64>()) {
        let x = scene(a);
        prop_assert_eq!(rand_style(&x, 0.1, seed).unwrap().image, rand_style(&x, 0.1, seed).unwrap().image);
    }

    #[test]
    fn cross_style_swaps_stats(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (scene(a), scene(b + 5000));
        let (xy, yx) = cross_style(&x, &y).unwrap();
        let st = |t: &LabeledImage| decompose(&t.image, STYLE_EPS as f32).unwrap().1;
        for c in 0..3 {
            prop_assert!((st(&xy).mean[c] - st(&y).mean[c]).abs() < 1e-5);
            prop_assert!((st(&yx).std[c] - st(&x).std[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        p in prop::collection::vec(0.0f64..5.0, 24),
        q in prop::collection::vec(0.0f64..5.0, 24),
    ) {
        let h = |v: Vec<f64>| advstyle::analysis::StyleHistogram { bins: 8, feature: v };
        let kl = kl_distance(&h(p.clone()), &h(q.clone()), 1e-6).unwrap();
        let reference = kl_reference(&p, &q, 8, 1e-6);
        prop_assert!(reference > -1e-9);
        prop_assert!((kl - reference.max(0.0)).abs() <= 1e-9 * reference.abs().max(1.0));
        prop_assert_eq!(kl_distance(&h(p.clone()), &h(p), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn histogram_ignores_dataset_order(seeds in prop::collection::vec(0u64..10_000, 2..6), rot in 0usize..6) {
        let items: Vec<LabeledImage> = seeds.iter().map(|&s| scene(s)).collect();
        let mut shuffled = items.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(histogram_of(&items, 8).unwrap(), histogram_of(&shuffled, 8).unwrap());
    }

    #[test]
    fn miou_invariant_under_pixel_and_class_permutation(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200),
        shift in 0u8..4,
        rot in 0usize..200,
    ) {
        let (t, p): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let base = iou_from_predictions(&t, &p, 4).unwrap().miou;
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (t2, p2): (Vec<u8>, Vec<u8>) = rotated.into_iter().unzip();
        prop_assert!((iou_from_predictions(&t2, &p2, 4).unwrap().miou - base).abs() < 1e-12);
        let relabel = |v: &[u8]| v.iter().map(|c| (c + shift) % 4).collect::<Vec<u8>>();
        let relabeled = iou_from_predictions(&relabel(&t), &relabel(&p), 4).unwrap().miou;
        prop_assert!((relabeled - base).abs() < 1e-12);
    }

    #[test]
    fn poly_lr_is_monotone(max in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
        let (lo, hi) = (a.min(b).min(max), a.max(b).min(max));
        prop_assert!(poly_lr(lo, max, 0.01, 0.9).unwrap() >= poly_lr(hi, max, 0.01, 0.9).unwrap());
    }
}

#[test]
fn perfect_prediction_gives_unit_miou() {
    let t = [0u8, 1, 2, 3, 255, 1];
    let p = [0u8, 1, 2, 3, 0, 1];
    assert_eq!(iou_from_predictions(&t, &p, 4).unwrap().miou, 1.0);
}

#[test]
fn random_combo_frequencies_follow_weights() {
    let choices = [0u8, 1];
    let mut rng = rng_for(11, &[]);
    let n = 20_000;
    let ones = (0..n)
        .filter(|_| *policy_select(&choices, &[0.5, 0.5], &mut rng).unwrap() == 1)
        .count();
    // 4 sigma of a fair binomial
    assert!((ones as f64 / n as f64 - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
    assert!(policy_select(&choices, &[0.7, 0.7], &mut rng).is_err());
    assert!(policy_select::<u8, _>(&[], &[], &mut rng).is_err());
}

#[test]
fn label_map_rejects_wrong_length() {
    assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
}
