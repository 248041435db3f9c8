//! Synthetic domain-generalization benchmark: trains every policy on the
//! source domain for each repeat seed and reports source/target mIoU.

use std::fmt::Write as _;

use crate::config::Settings;
use crate::error::Result;
use crate::metrics::evaluate_miou;
use crate::synthetic::{make_domain, Dataset};
use crate::train::{train, without_augmentation, Policy};

/// Offsets keeping the three generated splits on disjoint seed ranges.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;
pub const TARGET_SEED_OFFSET: u64 = 2_000_000;

#[derive(Clone, Debug)]
pub struct BenchData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_test: Dataset,
}

pub fn bench_data(s: &Settings) -> Result<BenchData> {
    let k = s.train.model.num_classes;
    let d = &s.data;
    Ok(BenchData {
        source_train: make_domain(&d.source_spec(k), d.source_n, d.seed)?,
        source_test: make_domain(&d.source_spec(k), d.test_n, d.seed + TEST_SEED_OFFSET)?,
        target_test: make_domain(&d.target_spec(k), d.target_n, d.seed + TARGET_SEED_OFFSET)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub policy: Policy,
    pub gamma: f32,
    pub seed: u64,
    pub source_miou: f64,
    pub target_miou: f64,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub runs: Vec<RunResult>,
    /// AdvStyle runs at the swept gammas.
    pub sweep: Vec<RunResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl BenchReport {
    /// Mean `(source, target)` mIoU of a policy over repeats.
    pub fn policy_mean(&self, p: Policy) -> Option<(f64, f64)> {
        let runs: Vec<&RunResult> = self.runs.iter().filter(|r| r.policy == p).collect();
        (!runs.is_empty()).then(|| {
            (
                mean(runs.iter().map(|r| r.source_miou)),
                mean(runs.iter().map(|r| r.target_miou)),
            )
        })
    }

    pub fn gamma_mean(&self, gamma: f32) -> Option<(f64, f64)> {
        let runs: Vec<&RunResult> = self.sweep.iter().filter(|r| r.gamma == gamma).collect();
        (!runs.is_empty()).then(|| {
            (
                mean(runs.iter().map(|r| r.source_miou)),
                mean(runs.iter().map(|r| r.target_miou)),
            )
        })
    }

    /// Rows = methods, columns = domains plus their mean (mIoU in percent).
    pub fn results_csv(&self) -> String {
        let mut s = String::from("method,source,target,mean\n");
        let mut seen = Vec::new();
        for r in &self.runs {
            if seen.contains(&r.policy) {
                continue;
            }
            seen.push(r.policy);
            let (a, b) = self.policy_mean(r.policy).expect("policy has runs");
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4}",
                r.policy,
                100.0 * a,
                100.0 * b,
                50.0 * (a + b)
            );
        }
        s
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("gamma,source,target\n");
        let mut seen: Vec<f32> = Vec::new();
        for r in &self.sweep {
            if seen.contains(&r.gamma) {
                continue;
            }
            seen.push(r.gamma);
            let (a, b) = self.gamma_mean(r.gamma).expect("gamma has runs");
            let _ = writeln!(s, "{},{:.4},{:.4}", r.gamma, 100.0 * a, 100.0 * b);
        }
        s
    }

    /// Every individual run with its final checkpoint fingerprint.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("method,gamma,seed,source,target,checkpoint_sha256\n");
        for r in self.runs.iter().chain(&self.sweep) {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{}",
                r.policy,
                r.gamma,
                r.seed,
                100.0 * r.source_miou,
                100.0 * r.target_miou,
                r.fingerprint
            );
        }
        s
    }
}

/// One training run plus clean evaluation on both domains.
pub fn run_one(s: &Settings, data: &BenchData, policy: Policy, gamma: f32, seed: u64) -> Result<RunResult> {
    let mut cfg = s.train.clone();
    cfg.policy = policy;
    cfg.adv.gamma = gamma;
    cfg.seed = seed;
    let (model, _) = train(&cfg, &data.source_train)?;
    let (src, tgt) = without_augmentation(|| {
        Ok((
            evaluate_miou(&model, &data.source_test)?.miou,
            evaluate_miou(&model, &data.target_test)?.miou,
        ))
    })?;
    Ok(RunResult {
        policy,
        gamma,
        seed,
        source_miou: src,
        target_miou: tgt,
        fingerprint: model.fingerprint(),
    })
}

/// Runs every configured policy for `repeats` seeds (`seed`, `seed + 1`, ...)
/// and then the gamma sweep, reusing identical AdvStyle runs.
pub fn run_bench(s: &Settings, mut progress: impl FnMut(&RunResult)) -> Result<BenchReport> {
    let data = bench_data(s)?;
    let seeds: Vec<u64> = (0..s.bench.repeats as u64).map(|r| s.train.seed + r).collect();
    let mut report = BenchReport::default();
    for &policy in &s.bench.policies {
        for &seed in &seeds {
            let r = run_one(s, &data, policy, s.train.adv.gamma, seed)?;
            progress(&r);
            report.runs.push(r);
        }
    }
    for &gamma in &s.bench.gammas {
        for &seed in &seeds {
            let cached = report
                .runs
                .iter()
                .find(|r| r.policy == Policy::AdvStyle && r.gamma == gamma && r.seed == seed)
                .cloned();
            let r = match cached {
                Some(r) => r,
                None => run_one(s, &data, Policy::AdvStyle, gamma, seed)?,
            };
            progress(&r);
            report.sweep.push(r);
        }
    }
    Ok(report)
}
