//! Command-line front end: `train`, `augment`, `analyze`, `gradcheck`, `bench`.
//!
//! Options clap does not know are settings overrides (`--key value` or
//! `--key=value`, hyphens read as underscores), applied after the config
//! file. Exit codes: 0 success, 1 check or runtime failure, 2 usage/config
//! error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{extract_style_features, histogram_feature, kl_distance, kl_report_csv};
use crate::augment::{
    adv_pixel, cross_style, mix_style, rand_style, sample_mix_lambda, Provenance, Strategy,
};
use crate::bench::{bench_data, run_bench};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, suite, wrong_adjoint_fixture};
use crate::metrics::evaluate_miou;
use crate::model::ModelState;
use crate::netpbm;
use crate::rng::{derive_seed, rng_for};
use crate::style::{decompose, StyleStats};
use crate::synthetic::{Dataset, LabeledImage};
use crate::train::{train, without_augmentation, Policy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "ADVSTYLE_THREADS";

const OVERRIDE_HELP: &str = "Any other `--key value` pair overrides a config key, e.g. \
`--policy advstyle --adv.gamma 3 --max_iter 100 --seed 7`. \
Aliases: --gamma (adv.gamma), --repeats (bench.repeats), --bins (analysis.bins), \
--smoothing (analysis.smoothing), --noise (rand.noise_std), --lambda (mix.lambda), --lr (pixel.lr).";

#[derive(Parser, Debug)]
#[command(name = "advstyle", version, about = "Adversarial style augmentation toolkit", after_help = OVERRIDE_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model on a source dataset (generated, or loaded with --input).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Directory of NNNNN.ppm/NNNNN.pgm pairs to train on.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write augmented copies of a PPM/PGM directory plus a provenance CSV.
    Augment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// advstyle, advpixel, randstyle, mixstyle or crossstyle.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "runs/augment")]
        out: PathBuf,
        /// Checkpoint directory; required by the adversarial strategies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// AdvStyle gammas written to one `gamma_<g>` subdirectory each.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f32>,
    },
    /// Style tables, histograms and pairwise KL distances of image directories.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/analyze")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op in 64-bit.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_wrong_adjoint: bool,
    },
    /// Train every policy over the repeat seeds and tabulate source/target mIoU.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
        /// Exit 1 unless AdvStyle beats no augmentation by 10 target points
        /// and matches RandStyle.
        #[arg(long)]
        check: bool,
    },
}

/// Flags handled by clap; everything else is an override.
const CLAP_FLAGS: [&str; 11] = [
    "config",
    "out",
    "input",
    "strategy",
    "checkpoint",
    "sweep",
    "inject-wrong-adjoint",
    "check",
    "help",
    "version",
    "h",
];

fn alias(key: &str) -> String {
    let key = key.replace('-', "_");
    match key.as_str() {
        "gamma" => "adv.gamma".into(),
        "repeats" => "bench.repeats".into(),
        "bins" => "analysis.bins".into(),
        "smoothing" => "analysis.smoothing".into(),
        "noise" => "rand.noise_std".into(),
        "lambda" => "mix.lambda".into(),
        "lr" => "pixel.lr".into(),
        _ => key,
    }
}

type Overrides = Vec<(String, String)>;

/// Separates clap arguments from `--key value` overrides.
fn split_args(args: &[String]) -> std::result::Result<(Vec<String>, Overrides), String> {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            keep.push(a.clone());
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if CLAP_FLAGS.contains(&name) || name.is_empty() {
            keep.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((alias(name), value));
    }
    Ok((keep, overrides))
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run(args: &[String]) -> i32 {
    let (clap_args, overrides) = match split_args(args) {
        Ok(v) => v,
        Err(e) => return usage(e),
    };
    let cli = match Cli::try_parse_from(&clap_args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if v.parse::<usize>().map_or(true, |n| n == 0) {
            return usage(format!("{THREADS_ENV} must be a positive integer, got {v}"));
        }
    }
    match dispatch(cli.cmd, &overrides) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => usage(e),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Cmd, overrides: &Overrides) -> Result<i32> {
    match cmd {
        Cmd::Train { config, out, input } => {
            let s = Settings::resolve(config.as_deref(), overrides)?;
            cmd_train(&s, &out, input.as_deref())
        }
        Cmd::Augment {
            config,
            strategy,
            input,
            out,
            checkpoint,
            sweep,
        } => {
            let s = Settings::resolve(config.as_deref(), overrides)?;
            let strategy: Strategy = strategy.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            cmd_augment(&s, strategy, &input, &out, checkpoint.as_deref(), &sweep)
        }
        Cmd::Analyze { config, inputs, out } => {
            let s = Settings::resolve(config.as_deref(), overrides)?;
            cmd_analyze(&s, &inputs, &out)
        }
        Cmd::Gradcheck { inject_wrong_adjoint } => {
            Settings::resolve(None, overrides)?;
            cmd_gradcheck(inject_wrong_adjoint)
        }
        Cmd::Bench { config, out, check } => {
            let s = Settings::resolve(config.as_deref(), overrides)?;
            cmd_bench(&s, &out, check)
        }
    }
}

/// Writes `manifest.txt` (a valid config file) before anything else.
pub fn write_manifest(out: &Path, command: &str, s: &Settings, layout: &[&str]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut m = String::from("# advstyle run manifest\n");
    let _ = writeln!(m, "# tool = advstyle {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "# command = {command}");
    for l in layout {
        let _ = writeln!(m, "# output = {l}");
    }
    m.push_str(&s.render());
    fs::write(out.join("manifest.txt"), m)?;
    Ok(())
}

fn cmd_train(s: &Settings, out: &Path, input: Option<&Path>) -> Result<i32> {
    write_manifest(out, "train", s, &["checkpoint/", "train_log.csv", "eval.csv"])?;
    let data = bench_data(s)?;
    let source = match input {
        Some(dir) => Dataset::load_dir(dir)?,
        None => data.source_train.clone(),
    };
    let (model, log) = train(&s.train, &source)?;
    model.save_checkpoint(&out.join("checkpoint"))?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    let (src, tgt) = without_augmentation(|| {
        Ok((
            evaluate_miou(&model, &data.source_test)?.miou,
            evaluate_miou(&model, &data.target_test)?.miou,
        ))
    })?;
    fs::write(
        out.join("eval.csv"),
        format!("domain,miou\nsource,{src:.6}\ntarget,{tgt:.6}\n"),
    )?;
    println!(
        "trained {} for {} iterations: source mIoU {:.2}, target mIoU {:.2}, checkpoint {}",
        s.train.policy,
        s.train.max_iter,
        100.0 * src,
        100.0 * tgt,
        model.fingerprint()
    );
    Ok(EXIT_OK)
}

const PROVENANCE_HEADER: &str = "id,strategy,partner,cell,mu_r,mu_g,mu_b,sd_r,sd_g,sd_b,\
new_mu_r,new_mu_g,new_mu_b,new_sd_r,new_sd_g,new_sd_b";

fn image_stats(x: &LabeledImage) -> Result<StyleStats> {
    Ok(decompose(&x.image, crate::style::STYLE_EPS as f32)?.1)
}

fn provenance_rows(out: &mut String, id: &str, partner: &str, p: &Provenance) {
    for (cell, (b, a)) in p.before.iter().zip(&p.after).enumerate() {
        let v: Vec<String> = b
            .mean
            .iter()
            .chain(&b.std)
            .chain(&a.mean)
            .chain(&a.std)
            .map(|x| x.to_string())
            .collect();
        let _ = writeln!(out, "{id},{},{partner},{cell},{}", p.strategy.name(), v.join(","));
    }
}

fn cmd_augment(
    s: &Settings,
    strategy: Strategy,
    input: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    sweep: &[f32],
) -> Result<i32> {
    let adversarial = matches!(strategy, Strategy::AdvStyle | Strategy::AdvPixel);
    if adversarial && checkpoint.is_none() {
        return Err(Error::Config(format!("strategy {} needs --checkpoint", strategy.name())));
    }
    if !sweep.is_empty() && strategy != Strategy::AdvStyle {
        return Err(Error::Config("--sweep only applies to advstyle".into()));
    }
    write_manifest(out, "augment", s, &["NNNNN.ppm", "NNNNN.pgm", "provenance.csv"])?;
    let data = Dataset::load_dir(input)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = match checkpoint {
        Some(dir) => Some(ModelState::load_checkpoint(dir)?),
        None => None,
    };
    let gammas: Vec<Option<f32>> = if sweep.is_empty() {
        vec![None]
    } else {
        sweep.iter().map(|g| Some(*g)).collect()
    };
    for gamma in gammas {
        let dir = match gamma {
            Some(g) => out.join(format!("gamma_{g}")),
            None => out.to_path_buf(),
        };
        let mut adv = s.train.adv.clone();
        if let Some(g) = gamma {
            adv.gamma = g;
        }
        adv.clamp_image = true;
        augment_dir(s, strategy, &data, model.as_ref(), &adv, &dir)?;
    }
    println!("augmented {} images with {}", data.len(), strategy.name());
    Ok(EXIT_OK)
}

fn augment_dir(
    s: &Settings,
    strategy: Strategy,
    data: &Dataset,
    model: Option<&ModelState>,
    adv: &crate::augment::AdvConfig,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = data.len();
    let ids = data.ids();
    let mut outputs: Vec<(LabeledImage, usize)> = Vec::with_capacity(n);
    let mut prov = format!("{PROVENANCE_HEADER}\n");
    let seed = s.train.seed;
    for (i, x) in data.iter().enumerate() {
        let (y, partner, after_override) = match strategy {
            Strategy::AdvStyle => {
                let m = model.expect("checked by caller");
                let batch = crate::augment::adv_style_batch(m, std::slice::from_ref(x), adv)?;
                provenance_rows(&mut prov, &ids[i], "", &batch.provenance[0]);
                outputs.push((batch.augmented[0].clone(), i));
                continue;
            }
            Strategy::AdvPixel => {
                let m = model.expect("checked by caller");
                (adv_pixel(m, x, s.train.pixel_lr, s.train.pixel_steps)?, i, None)
            }
            Strategy::RandStyle => (rand_style(x, s.train.rand_noise_std, derive_seed(seed, &[i as u64]))?, i, None),
            Strategy::MixStyle => {
                let j = (i + 1) % n;
                let lambda = s
                    .train
                    .mix_lambda
                    .unwrap_or_else(|| sample_mix_lambda(&mut rng_for(seed, &[i as u64])));
                (mix_style(x, &data.items[j], lambda)?, j, None)
            }
            Strategy::CrossStyle => {
                // pairs (0, 1), (2, 3), ...; an unpaired last image keeps its style
                let j = if i % 2 == 0 { (i + 1).min(n - 1) } else { i - 1 };
                let (a, _) = cross_style(x, &data.items[j])?;
                let stats = image_stats(&data.items[j])?;
                (a, j, Some(stats))
            }
        };
        let after = match after_override {
            Some(st) => st,
            None => image_stats(&y)?,
        };
        let p = Provenance {
            strategy,
            before: vec![image_stats(x)?],
            after: vec![after],
        };
        let partner_id = if partner == i { String::new() } else { ids[partner].clone() };
        provenance_rows(&mut prov, &ids[i], &partner_id, &p);
        outputs.push((y, i));
    }
    for (y, i) in &outputs {
        netpbm::write_ppm(&dir.join(format!("{}.ppm", ids[*i])), &y.image)?;
        netpbm::write_pgm(
            &dir.join(format!("{}.pgm", ids[*i])),
            y.label.width,
            y.label.height,
            &y.label.data,
        )?;
    }
    fs::write(dir.join("provenance.csv"), prov)?;
    Ok(())
}

fn dir_label(p: &Path, taken: &mut Vec<String>) -> String {
    let base = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let mut name = base.clone();
    let mut k = 1;
    while taken.contains(&name) {
        k += 1;
        name = format!("{base}_{k}");
    }
    taken.push(name.clone());
    name
}

fn cmd_analyze(s: &Settings, inputs: &[PathBuf], out: &Path) -> Result<i32> {
    write_manifest(out, "analyze", s, &["style_<dir>.csv", "hist_<dir>.csv", "kl.csv"])?;
    let mut taken = Vec::new();
    let mut hists = Vec::new();
    for dir in inputs {
        let name = dir_label(dir, &mut taken);
        let data = Dataset::load_dir(dir)?;
        fs::write(out.join(format!("style_{name}.csv")), extract_style_features(&data)?.to_csv())?;
        let h = histogram_feature(&data, s.bins)?;
        fs::write(out.join(format!("hist_{name}.csv")), h.to_csv_row())?;
        hists.push((name, h));
    }
    let mut rows = Vec::new();
    for (a, ha) in &hists {
        for (b, hb) in &hists {
            rows.push((a.clone(), b.clone(), kl_distance(ha, hb, s.smoothing)?));
        }
    }
    let csv = kl_report_csv(&rows);
    fs::write(out.join("kl.csv"), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(inject_wrong_adjoint: bool) -> Result<i32> {
    let mut cases = suite();
    if inject_wrong_adjoint {
        cases.push(wrong_adjoint_fixture());
    }
    let reports = run_suite(&cases)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<20} max_rel_err {:.3e}  {}",
            r.name,
            r.worst(),
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} cases, {} failed", reports.len(), failed);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_bench(s: &Settings, out: &Path, check: bool) -> Result<i32> {
    write_manifest(out, "bench", s, &["results.csv", "runs.csv", "sweep.csv"])?;
    let report = run_bench(s, |r| {
        println!(
            "{:<12} gamma {:<5} seed {:<3} source {:6.2} target {:6.2}",
            r.policy.name(),
            r.gamma,
            r.seed,
            100.0 * r.source_miou,
            100.0 * r.target_miou
        );
    })?;
    fs::write(out.join("results.csv"), report.results_csv())?;
    fs::write(out.join("runs.csv"), report.runs_csv())?;
    if !report.sweep.is_empty() {
        fs::write(out.join("sweep.csv"), report.sweep_csv())?;
    }
    print!("{}", report.results_csv());
    if !check {
        return Ok(EXIT_OK);
    }
    let (Some(none), Some(adv), Some(rand)) = (
        report.policy_mean(Policy::None),
        report.policy_mean(Policy::AdvStyle),
        report.policy_mean(Policy::RandStyle),
    ) else {
        return Err(Error::Config("--check needs the none, advstyle and randstyle policies".into()));
    };
    let ok = adv.1 - none.1 >= 0.10 && adv.1 >= rand.1 && none.0 - adv.0 <= 0.05;
    println!("check: {}", if ok { "pass" } else { "FAIL" });
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}
