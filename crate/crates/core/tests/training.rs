use advstyle::augment::{AdvConfig, ColorSpace, Granularity};
use advstyle::model::{build_model, ModelConfig, ModelState};
use advstyle::synthetic::{make_domain, Dataset, DomainSpec};
use advstyle::train::{train, train_from, Policy, TrainConfig};
use advstyle::Error;
use tempfile::TempDir;

fn data() -> Dataset {
    make_domain(&DomainSpec::source().with_size(12, 12), 12, 0).unwrap()
}

fn cfg(policy: Policy, iters: usize) -> TrainConfig {
    TrainConfig {
        max_iter: iters,
        batch_size: 3,
        policy,
        model: ModelConfig {
            widths: vec![4, 4],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn every_policy_trains_and_is_deterministic() {
    let d = data();
    for p in Policy::ALL {
        let c = cfg(p, 6);
        let (m1, l1) = train(&c, &d).unwrap();
        let (m2, l2) = train(&c, &d).unwrap();
        assert!(m1.all_finite(), "{p}");
        assert_eq!(m1.fingerprint(), m2.fingerprint(), "{p}");
        assert_eq!(l1.to_csv(), l2.to_csv(), "{p}");
        assert_eq!(l1.records.len(), 6);
    }
}

#[test]
fn no_augmentation_logs_zero_adv_loss() {
    let (_, log) = train(&cfg(Policy::None, 5), &data()).unwrap();
    assert!(log.records.iter().all(|r| r.loss_adv == 0.0 && r.mu_shift_l2 == 0.0));
}

#[test]
fn zero_gamma_augments_with_the_clean_batch() {
    let mut c = cfg(Policy::AdvStyle, 5);
    c.adv.gamma = 0.0;
    let (_, log) = train(&c, &data()).unwrap();
    for r in &log.records {
        assert!((r.loss_adv - r.loss_clean).abs() <= 1e-6 * r.loss_clean.max(1.0), "{r:?}");
        assert_eq!(r.mu_shift_l2, 0.0);
    }
}

#[test]
fn seeds_change_the_run() {
    let d = data();
    let mut c = cfg(Policy::RandStyle, 4);
    let (a, _) = train(&c, &d).unwrap();
    c.seed = 1;
    let (b, _) = train(&c, &d).unwrap();
    assert_ne!(a.fingerprint(), b.fingerprint());
}

#[test]
fn checkpoints_every_tenth_and_round_trip() {
    let (m, log) = train(&cfg(Policy::AdvStyle, 20), &data()).unwrap();
    let iters: Vec<usize> = log.checkpoints.iter().map(|c| c.iter).collect();
    assert_eq!(iters, (1..=10).map(|k| 2 * k).collect::<Vec<_>>());
    assert_eq!(log.checkpoints.last().unwrap().fingerprint, m.fingerprint());

    let dir = TempDir::new().unwrap();
    m.save_checkpoint(dir.path()).unwrap();
    let back = ModelState::load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert_eq!(back.params, m.params);
}

#[test]
fn resuming_continues_from_a_checkpoint() {
    let d = data();
    let c = cfg(Policy::None, 3);
    let (m, _) = train(&c, &d).unwrap();
    let (resumed, log) = train_from(&c, &d, m.clone()).unwrap();
    assert_eq!(log.records.len(), 3);
    assert_ne!(resumed.fingerprint(), m.fingerprint());
    let other = build_model(&ModelConfig::default(), 0).unwrap();
    assert!(matches!(train_from(&c, &d, other), Err(Error::Config(_))));
}

#[test]
fn divergence_reports_the_last_good_state() {
    let mut c = cfg(Policy::None, 10);
    c.lr0 = 1e30;
    match train(&c, &data()) {
        Err(Error::Diverged { last_good, .. }) => assert!(last_good.all_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn feature_level_injection_trains() {
    for pos in 1..=2 {
        let mut c = cfg(Policy::AdvStyle, 4);
        c.model.injection_position = pos;
        c.harvest_every = 1;
        let (m, log) = train(&c, &data()).unwrap();
        assert!(m.all_finite());
        assert!(log.records.iter().all(|r| r.loss_adv.is_finite()));
        // image-level harvest only exists at the input
        assert!(log.harvest.is_empty());
    }
}

#[test]
fn variants_train_and_lab_is_image_level_only() {
    for (space, granularity) in [
        (ColorSpace::Lab, Granularity::Whole),
        (ColorSpace::Rgb, Granularity::Patches2x2),
        (ColorSpace::Lab, Granularity::Patches2x2),
    ] {
        let mut c = cfg(Policy::AdvStyle, 3);
        c.adv = AdvConfig {
            space,
            granularity,
            ..AdvConfig::default()
        };
        let (m, _) = train(&c, &data()).unwrap();
        assert!(m.all_finite());
    }
    let mut c = cfg(Policy::AdvStyle, 3);
    c.adv.space = ColorSpace::Lab;
    c.model.injection_position = 1;
    assert!(train(&c, &data()).is_err());
}

#[test]
fn harvest_collects_augmented_images_with_source_labels() {
    let mut c = cfg(Policy::AdvStyle, 6);
    c.harvest_every = 2;
    let d = data();
    let (_, log) = train(&c, &d).unwrap();
    assert_eq!(log.harvest.len(), 3 * 3);
    for h in &log.harvest {
        assert!(d.iter().any(|s| std::sync::Arc::ptr_eq(&s.label, &h.label)));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let d = data();
    let mut c = cfg(Policy::None, 0);
    assert!(train(&c, &d).is_err());
    c = cfg(Policy::AdvStyle, 2);
    c.adv.gamma = -1.0;
    assert!(train(&c, &d).is_err());
    assert!(matches!(train(&cfg(Policy::None, 2), &Dataset::from_items(vec![])), Err(Error::EmptyDataset)));
}
