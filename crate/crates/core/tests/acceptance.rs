//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ADVSTYLE_ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria
//! (the rest print SKIP). Exits 1 if any criterion that ran failed.

use std::fs;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use advstyle::analysis::{histogram_feature, histogram_of, kl_distance, DEFAULT_BINS, DEFAULT_SMOOTHING};
use advstyle::augment::{
    adv_pixel, adv_style_batch, cross_style, extract_style, learn_adversarial_style, mix_stats, mix_style,
    perturb_gaussian, permute_stats, rand_style, restyle_images, sample_mix_lambda, AdvConfig, BatchStyle,
    StyleLayout,
};
use advstyle::bench::{bench_data, run_one, BenchData, RunResult};
use advstyle::config::Settings;
use advstyle::gradsuite::{run_suite, suite, COMPOSED_CASE, SUITE_EPS, SUITE_TOL};
use advstyle::model::{build_model, seg_loss, ModelConfig, ModelState};
use advstyle::rng::rng_for;
use advstyle::style::{
    decompose, decompose_patches, lab_to_rgb, recompose, recompose_patches, rgb_to_lab, STYLE_EPS,
};
use advstyle::synthetic::{generate_scene, make_domain, Dataset, DomainSpec, LabelMap, LabeledImage};
use advstyle::tensor::DIFFERENTIABLE_OPS;
use advstyle::train::{poly_lr, sgd_step, stage_two_gradients, train, Policy};
use advstyle::{Graph, Result, Scalar, Tensor};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn max_abs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn scene(seed: u64) -> LabeledImage {
    generate_scene(&DomainSpec::source().with_size(32, 32), seed).expect("valid spec")
}

fn pair_model(seed: u64) -> ModelState {
    build_model(&Settings::default().train.model, seed).expect("valid model")
}

fn as_batch<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    x.detached().reshape(vec![1, s[0], s[1], s[2]]).expect("3-d image")
}

fn loss_of(model: &ModelState, images: &Tensor<f32>, labels: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let x = g.constant(images.clone())?;
    let logits = model.forward_graph(&mut g, &params, x, None)?;
    let l = seg_loss(&mut g, logits, labels)?;
    Ok(g.value(l).data()[0] as f64)
}

// ---------------------------------------------------------------------------

fn gradients() -> Result<Verdict> {
    let t = Instant::now();
    let cases = suite();
    let reports = run_suite(&cases)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.worst()).fold(0.0, f64::max);
    let covered = DIFFERENTIABLE_OPS
        .iter()
        .all(|op| reports.iter().filter(|r| r.name == *op).count() == 1)
        && reports.iter().any(|r| r.name == COMPOSED_CASE);
    let pass = covered && worst < SUITE_TOL && secs < 60.0 && reports.iter().all(|r| r.passed());
    verdict(
        pass,
        format!(
            "{} cases (every op + composed), eps {SUITE_EPS:e}, worst rel err {worst:.2e} < {SUITE_TOL:e}, {secs:.1} s < 60 s",
            reports.len()
        ),
    )
}

fn round_trips() -> Result<Verdict> {
    let mut rng = rng_for(2, &[]);
    let (mut whole, mut patch, mut lab) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let x = Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0f32..1.0));
        let (n, s) = decompose(&x, STYLE_EPS as f32)?;
        whole = whole.max(max_abs(&recompose(&n, &s)?, &x));
        let (n, grid) = decompose_patches(&x, 2, 2, STYLE_EPS as f32)?;
        patch = patch.max(max_abs(&recompose_patches(&n, &grid)?, &x));
        lab = lab.max(max_abs(&lab_to_rgb(&rgb_to_lab(&x)?)?, &x));
    }
    verdict(
        whole < 1e-5 && patch < 1e-5 && lab < 1e-4,
        format!("100 random images: whole {whole:.1e} < 1e-5, 2x2 patches {patch:.1e} < 1e-5, Lab {lab:.1e} < 1e-4"),
    )
}

fn ascent() -> Result<Verdict> {
    let small = AdvConfig {
        gamma: 0.05,
        ..AdvConfig::default()
    };
    let zero = AdvConfig {
        gamma: 0.0,
        ..AdvConfig::default()
    };
    let (mut up, mut worst_zero) = (0, 0.0f64);
    for i in 0..100 {
        let (model, x) = (pair_model(i), scene(i));
        let out = adv_style_batch(&model, std::slice::from_ref(&x), &small)?;
        let before = loss_of(&model, &as_batch(&x.image), &x.label.data)?;
        let after = loss_of(&model, &as_batch(&out.augmented[0].image), &x.label.data)?;
        up += usize::from(after >= before);
        let same = adv_style_batch(&model, std::slice::from_ref(&x), &zero)?;
        worst_zero = worst_zero.max(max_abs(&same.augmented[0].image, &x.image));
    }
    verdict(
        up >= 95 && worst_zero <= 1e-5,
        format!("gamma 0.05: loss rose in {up}/100 pairs (>= 95); gamma 0: max |x+ - x| {worst_zero:.1e} <= 1e-5"),
    )
}

/// z-score content of each sample in a `[N, C, H, W]` batch.
fn contents<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    (0..batch.shape()[0])
        .map(|i| Ok(decompose(&batch.index_outer(i)?, T::zero())?.0))
        .collect()
}

fn drift64(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(contents(a)?
        .iter()
        .zip(contents(b)?)
        .map(|(x, y)| max_abs(x, &y))
        .fold(0.0, f64::max))
}

fn drift32_eps(a: &LabeledImage, b: &LabeledImage) -> Result<f64> {
    let eps = STYLE_EPS as f32;
    Ok(max_abs(&decompose(&a.image, eps)?.0, &decompose(&b.image, eps)?.0))
}

fn shares_label(a: &LabeledImage, b: &LabeledImage) -> bool {
    Arc::ptr_eq(&a.label, &b.label) && a.label.data == b.label.data
}

fn semantic_consistency() -> Result<Verdict> {
    let layout = StyleLayout::default();
    let adv = AdvConfig::default();
    let mut rng = rng_for(4, &[]);
    // [advstyle, randstyle, mixstyle, crossstyle]
    let mut exact = [0.0f64; 4];
    let mut literal = [0.0f64; 4];
    let mut labels_ok = true;
    let mut pixel_drift = f64::INFINITY;
    for i in 0..25u64 {
        let items: Vec<LabeledImage> = (0..4).map(|k| scene(100 + 4 * i + k)).collect();
        let images: Vec<Tensor<f32>> = items.iter().map(|s| s.image.clone()).collect();
        let batch = Tensor::stack(&images)?;
        let labels: Vec<u8> = items.iter().flat_map(|s| s.label.data.iter().copied()).collect();
        let b64 = batch.cast::<f64>();
        let model = pair_model(i);

        // the restyle maths evaluated in f64 through the generic pipeline
        let learned = learn_adversarial_style(&model.cast::<f64>(), &b64, &labels, 0, &adv)?.learned;
        let style = extract_style(&layout, &batch)?;
        let lambdas: Vec<f32> = (0..4).map(|_| sample_mix_lambda(&mut rng)).collect();
        let styles: [BatchStyle<f64>; 4] = [
            learned,
            perturb_gaussian(&style, 0.1, &mut rng)?.cast(),
            mix_stats(&style, &[1, 2, 3, 0], &lambdas)?.cast(),
            permute_stats(&style, &[1, 0, 3, 2])?.cast(),
        ];
        for (k, st) in styles.iter().enumerate() {
            exact[k] = exact[k].max(drift64(&restyle_images(&layout, &b64, st)?, &b64)?);
        }

        // the shipped f32 outputs: labels, and content under the eps-guarded decompose
        let outs: [LabeledImage; 4] = [
            adv_style_batch(&model, &items[..1], &adv)?.augmented.remove(0),
            rand_style(&items[0], 0.1, i)?,
            mix_style(&items[0], &items[1], lambdas[0])?,
            cross_style(&items[0], &items[1])?.0,
        ];
        for (k, o) in outs.iter().enumerate() {
            labels_ok &= shares_label(&items[0], o);
            literal[k] = literal[k].max(drift32_eps(&items[0], o)?);
        }
        let px = adv_pixel(&model, &items[0], 10.0, 1)?;
        labels_ok &= shares_label(&items[0], &px);
        let d = max_abs(&decompose(&px.image, 0.0)?.0, &decompose(&items[0].image, 0.0)?.0);
        pixel_drift = pixel_drift.min(d);
    }
    let worst = exact.iter().copied().fold(0.0, f64::max);
    verdict(
        worst < 1e-4 && labels_ok && pixel_drift > 1e-4,
        format!(
            "content drift adv/rand/mix/cross {:.1e}/{:.1e}/{:.1e}/{:.1e} < 1e-4; labels untouched: {labels_ok}; \
             advpixel min drift {pixel_drift:.2e} > 1e-4 (violates, as expected); \
             [info: f32 output with eps-guarded decompose {:.1e}/{:.1e}/{:.1e}/{:.1e}]",
            exact[0], exact[1], exact[2], exact[3], literal[0], literal[1], literal[2], literal[3]
        ),
    )
}

fn stage_isolation() -> Result<Verdict> {
    let s = Settings::default();
    let data = make_domain(&DomainSpec::source().with_size(16, 16), 8, 0)?;
    let mut cfg = s.train.clone();
    cfg.max_iter = 30;
    cfg.model.widths = vec![6, 6];
    let (model, _) = train(&cfg, &data)?;
    let images: Vec<Tensor<f32>> = data.iter().map(|x| x.image.clone()).collect();
    let batch = Tensor::stack(&images)?;
    let labels: Vec<u8> = data.iter().flat_map(|x| x.label.data.iter().copied()).collect();

    let before = model.fingerprint();
    let learned = learn_adversarial_style(&model, &batch, &labels, 0, &AdvConfig::default())?.learned;
    let unchanged = model.fingerprint() == before;

    let augmented = restyle_images(&StyleLayout::default(), &batch.cast::<f64>(), &learned.cast())?;
    let [total, clean, adv] = stage_two_gradients(&model.cast::<f64>(), &batch.cast(), &augmented, &labels)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((t, c), a) in total.iter().zip(&clean).zip(&adv) {
        for ((t, c), a) in t.iter().zip(c).zip(a) {
            num = num.max((t - (c + a)).abs());
            den = den.max(t.abs());
        }
    }
    let rel = num / den;
    verdict(
        unchanged && rel <= 1e-6,
        format!("checksum unchanged across stage 1: {unchanged}; grad(L + L+) vs grad L + grad L+ rel err {rel:.1e} <= 1e-6"),
    )
}

fn schedule() -> Result<Verdict> {
    let (max, lr0) = (2000, 0.01);
    let (a, b, m) = (
        poly_lr(0, max, lr0, 0.9)?,
        poly_lr(max, max, lr0, 0.9)?,
        poly_lr(max / 2, max, lr0, 0.9)?,
    );
    let lr_ok = (a - 0.01).abs() < 1e-15 && b == 0.0 && (m - 0.0053589).abs() <= 1e-6;

    let mut state = build_model(
        &ModelConfig {
            widths: vec![3],
            ..ModelConfig::default()
        },
        6,
    )?
    .cast::<f64>();
    let (mom, wd, steps) = (0.9, 5e-4, 100);
    let mut theta: Vec<Vec<f64>> = state.params.iter().map(|p| p.value.data().to_vec()).collect();
    let mut vel: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();
    let decay: Vec<bool> = state.params.iter().map(|p| p.decay).collect();
    let mut rng = rng_for(6, &[]);
    let mut worst = 0.0f64;
    for it in 0..steps {
        let lr = poly_lr(it, steps, lr0, 0.9)?;
        let grads: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| t.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        sgd_step(&mut state, &grads, lr, mom, wd)?;
        for k in 0..theta.len() {
            let w = if decay[k] { wd } else { 0.0 };
            for j in 0..theta[k].len() {
                vel[k][j] = mom * vel[k][j] + grads[k][j] + w * theta[k][j];
                theta[k][j] -= lr * vel[k][j];
                worst = worst.max((theta[k][j] - state.params[k].value.data()[j]).abs());
            }
        }
    }
    verdict(
        lr_ok && worst <= 1e-7,
        format!("poly_lr(0)={a}, poly_lr(max)={b}, poly_lr(mid)={m:.7} (0.0053589 +- 1e-6); SGD vs scalar simulation over {steps} steps max |diff| {worst:.1e} <= 1e-7"),
    )
}

fn mean_of<'a>(runs: impl Iterator<Item = &'a RunResult>, f: impl Fn(&RunResult) -> f64) -> f64 {
    let v: Vec<f64> = runs.map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct BenchState {
    s: Settings,
    data: BenchData,
    runs: Vec<RunResult>,
}

impl BenchState {
    fn new() -> Result<Self> {
        let s = Settings::default();
        Ok(Self {
            data: bench_data(&s)?,
            s,
            runs: Vec::new(),
        })
    }

    fn seeds(&self) -> Vec<u64> {
        (0..3).map(|r| self.s.train.seed + r).collect()
    }

    fn get(&mut self, policy: Policy, gamma: f32) -> Result<Vec<RunResult>> {
        let mut out = Vec::new();
        for seed in self.seeds() {
            let hit = self
                .runs
                .iter()
                .find(|r| r.policy == policy && r.gamma == gamma && r.seed == seed)
                .cloned();
            let r = match hit {
                Some(r) => r,
                None => {
                    let r = run_one(&self.s, &self.data, policy, gamma, seed)?;
                    eprintln!(
                        "    {:<10} gamma {:<4} seed {} source {:.2} target {:.2}",
                        r.policy,
                        r.gamma,
                        r.seed,
                        100.0 * r.source_miou,
                        100.0 * r.target_miou
                    );
                    self.runs.push(r.clone());
                    r
                }
            };
            out.push(r);
        }
        Ok(out)
    }
}

fn benchmark(b: &mut BenchState) -> Result<Verdict> {
    let t = Instant::now();
    let g = b.s.train.adv.gamma;
    let none = b.get(Policy::None, g)?;
    let rand = b.get(Policy::RandStyle, g)?;
    let adv = b.get(Policy::AdvStyle, g)?;
    let mins = t.elapsed().as_secs_f64() / 60.0;
    let tgt = |r: &[RunResult]| 100.0 * mean_of(r.iter(), |x| x.target_miou);
    let src = |r: &[RunResult]| 100.0 * mean_of(r.iter(), |x| x.source_miou);
    let gain = tgt(&adv) - tgt(&none);
    let pass = gain >= 10.0 && tgt(&adv) >= tgt(&rand) && src(&none) - src(&adv) <= 5.0;
    verdict(
        pass,
        format!(
            "target mIoU none {:.2} / randstyle {:.2} / advstyle {:.2}: advstyle - none {gain:+.2} (>= +10), \
             advstyle - randstyle {:+.2} (>= 0); source none {:.2} vs advstyle {:.2} (drop <= 5); \
             3 seeds x 2000 iters, {mins:.1} min",
            tgt(&none),
            tgt(&rand),
            tgt(&adv),
            tgt(&adv) - tgt(&rand),
            src(&none),
            src(&adv)
        ),
    )
}

fn gamma_sweep(b: &mut BenchState) -> Result<Verdict> {
    let mut means = Vec::new();
    for gamma in [0.1f32, 1.0, 3.0, 10.0, 40.0] {
        let runs = b.get(Policy::AdvStyle, gamma)?;
        means.push((gamma, 100.0 * mean_of(runs.iter(), |r| r.target_miou)));
    }
    let at = |g: f32| means.iter().find(|(x, _)| *x == g).map(|(_, m)| *m).unwrap();
    let edge = at(0.1).max(at(40.0));
    let pass = [1.0, 3.0, 10.0].iter().all(|g| at(*g) > edge);
    let table: Vec<String> = means.iter().map(|(g, m)| format!("{g}:{m:.2}")).collect();
    verdict(
        pass,
        format!("target mIoU by gamma {} ; each of 1/3/10 must exceed max(0.1, 40) = {edge:.2}", table.join(" ")),
    )
}

fn constant_dataset(value: f32) -> Result<Dataset> {
    let img = Tensor::from_fn(vec![3, 4, 4], |_| value);
    Ok(Dataset::from_items(vec![LabeledImage::new(img, LabelMap::filled(4, 4, 0))?]))
}

fn kl_analysis() -> Result<Verdict> {
    let s = Settings::default();
    let data = bench_data(&s)?;
    let (bins, sm) = (DEFAULT_BINS, DEFAULT_SMOOTHING);
    let hs = histogram_feature(&data.source_train, bins)?;
    let ht = histogram_feature(&data.target_test, bins)?;
    let self_kl = kl_distance(&hs, &hs, sm)?;

    let mut cfg = s.train.clone();
    cfg.policy = Policy::AdvStyle;
    cfg.harvest_every = 20;
    let (_, log) = train(&cfg, &data.source_train)?;
    let ha = histogram_of(&log.harvest, bins)?;
    let (kl_st, kl_at) = (kl_distance(&hs, &ht, sm)?, kl_distance(&ha, &ht, sm)?);

    // all-zero vs all-one images: one full bin each side per channel
    let z = histogram_feature(&constant_dataset(0.0)?, bins)?;
    let o = histogram_feature(&constant_dataset(1.0)?, bins)?;
    let got = kl_distance(&z, &o, sm)?;
    let n = bins as f64;
    let want = 3.0 * (n / (1.0 + sm)) * ((n + sm) / sm).ln();
    let closed = (got - want).abs() <= 1e-9;

    verdict(
        self_kl == 0.0 && kl_at < kl_st && closed,
        format!(
            "KL(S,S) = {self_kl}; KL(S+adv,T) {kl_at:.4} < KL(S,T) {kl_st:.4} ({} harvested); closed form {got:.12} vs {want:.12}",
            log.harvest.len()
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>)> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_advstyle"))
            .args(["bench", "--out", out.to_str().unwrap(), "--repeats", "1", "--max_iter", "200"])
            .args(["--bench.gammas", "1"])
            .output()?;
        if !status.status.success() {
            return Err(advstyle::Error::Config(String::from_utf8_lossy(&status.stderr).into_owned()));
        }
        Ok((fs::read(out.join("results.csv"))?, fs::read(out.join("runs.csv"))?))
    };
    let (a, b) = (run("a")?, run("b")?);
    let hashes = String::from_utf8_lossy(&a.1).lines().count() - 1;
    verdict(
        a == b,
        format!("two `bench` runs (7 policies + sweep, 1 seed, 200 iters): results.csv identical {}, runs.csv with {hashes} checkpoint hashes identical {}", a.0 == b.0, a.1 == b.1),
    )
}

/// Training runs are shared between the benchmark and the sweep.
fn shared(bench: &mut Option<BenchState>) -> Result<&mut BenchState> {
    if bench.is_none() {
        *bench = Some(BenchState::new()?);
    }
    Ok(bench.as_mut().expect("just set"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ADVSTYLE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut bench: Option<BenchState> = None;
    let mut failed = 0;
    let names = [
        "gradient correctness",
        "round-trip exactness",
        "ascent property",
        "semantic consistency",
        "stage isolation",
        "schedule/optimizer",
        "synthetic DG benchmark",
        "gamma sweep shape",
        "KL analysis",
        "determinism",
    ];
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("[SKIP] {id:>2} {name}");
            continue;
        }
        let t = Instant::now();
        let res = match id {
            1 => gradients(),
            2 => round_trips(),
            3 => ascent(),
            4 => semantic_consistency(),
            5 => stage_isolation(),
            6 => schedule(),
            7 => shared(&mut bench).and_then(benchmark),
            8 => shared(&mut bench).and_then(gamma_sweep),
            9 => kl_analysis(),
            _ => determinism(),
        };
        let (pass, detail) = match res {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] {id:>2} {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed");
    std::process::exit(i32::from(failed > 0));
}
