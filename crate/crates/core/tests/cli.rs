use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use advstyle::analysis::{extract_style_features, histogram_feature};
use advstyle::netpbm::read_ppm;
use advstyle::synthetic::{make_domain, Dataset, DomainSpec};
use advstyle::tensor::DIFFERENTIABLE_OPS;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--data.image_size",
    "16x16",
    "--data.source_n",
    "8",
    "--data.test_n",
    "4",
    "--data.target_n",
    "4",
    "--model.widths",
    "4,4",
    "--batch_size",
    "2",
];

fn advstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advstyle"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_into(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", path(out), "--policy", "none", "--max_iter", "10"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    advstyle(&args)
}

fn image_dir(tmp: &TempDir, name: &str, spec: DomainSpec, n: usize, seed: u64) -> std::path::PathBuf {
    let dir = tmp.path().join(name);
    make_domain(&spec.with_size(12, 12), n, seed).unwrap().save_dir(&dir).unwrap();
    dir
}

fn provenance(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("provenance.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn train_writes_manifest_log_and_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = train_into(&out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 10);
    assert!(out.join("checkpoint").is_dir());
    assert!(out.join("eval.csv").is_file());

    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("max_iter = 10"));
    assert!(manifest.contains(env!("CARGO_PKG_VERSION")));
    // manifest first
    let t0 = fs::metadata(out.join("manifest.txt")).unwrap().modified().unwrap();
    for f in ["train_log.csv", "eval.csv"] {
        assert!(fs::metadata(out.join(f)).unwrap().modified().unwrap() >= t0);
    }
}

#[test]
fn identical_invocations_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&train_into(d, &["--policy", "advstyle", "--seed", "3"])), 0);
    }
    let files = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d.join("checkpoint"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(files(&a), files(&b));
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(b.join("train_log.csv")).unwrap()
    );
}

#[test]
fn manifest_replays_the_run() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train_into(&a, &["--policy", "randstyle", "--seed", "5"])), 0);
    let o = advstyle(&["train", "--config", path(&a.join("manifest.txt")), "--out", path(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(b.join("train_log.csv")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&train_into(&tmp.path().join("x"), &["--no_such_key", "1"])), 2);
    assert_eq!(code(&train_into(&tmp.path().join("y"), &["--max_iter", "ten"])), 2);
    assert_eq!(code(&advstyle(&["explode"])), 2);
    let input = image_dir(&tmp, "in", DomainSpec::source(), 2, 0);
    for s in ["advstyle", "advpixel"] {
        let o = advstyle(&["augment", "--strategy", s, "--input", path(&input), "--out", path(&tmp.path().join(s))]);
        assert_eq!(code(&o), 2, "{s} without a checkpoint");
    }
}

#[test]
fn randstyle_without_noise_is_identity_up_to_quantization() {
    let tmp = TempDir::new().unwrap();
    let input = image_dir(&tmp, "in", DomainSpec::source(), 3, 0);
    let out = tmp.path().join("out");
    let o = advstyle(&["augment", "--strategy", "randstyle", "--noise", "0", "--input", path(&input), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["00000", "00001", "00002"] {
        let a = read_ppm(&input.join(format!("{id}.ppm"))).unwrap();
        let b = read_ppm(&out.join(format!("{id}.ppm"))).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 1.0 / 255.0 + 1e-6, "{id}: {worst}");
        assert_eq!(
            fs::read(input.join(format!("{id}.pgm"))).unwrap(),
            fs::read(out.join(format!("{id}.pgm"))).unwrap()
        );
    }
}

#[test]
fn crossstyle_provenance_shows_swapped_stats() {
    let tmp = TempDir::new().unwrap();
    let input = image_dir(&tmp, "in", DomainSpec::source(), 2, 0);
    let out = tmp.path().join("out");
    assert_eq!(
        code(&advstyle(&["augment", "--strategy", "crossstyle", "--input", path(&input), "--out", path(&out)])),
        0
    );
    let rows = provenance(&out);
    assert_eq!(rows.len(), 2);
    // columns: id, strategy, partner, cell, before mean/std (6), after mean/std (6)
    assert_eq!(rows[0][2], "00001");
    assert_eq!(rows[1][2], "00000");
    assert_eq!(rows[0][4..10], rows[1][10..16]);
    assert_eq!(rows[1][4..10], rows[0][10..16]);
}

#[test]
fn adversarial_augment_with_checkpoint_and_sweep() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&train_into(&run, &[])), 0);
    let input = image_dir(&tmp, "in", DomainSpec::source(), 2, 0);
    let out = tmp.path().join("adv");
    let ckpt = run.join("checkpoint");
    let o = advstyle(&[
        "augment", "--strategy", "advstyle", "--input", path(&input), "--out", path(&out),
        "--checkpoint", path(&ckpt), "--sweep", "0.1,3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for g in ["gamma_0.1", "gamma_3"] {
        assert!(out.join(g).join("00001.ppm").is_file());
        assert_eq!(provenance(&out.join(g)).len(), 2);
    }
    let o = advstyle(&[
        "augment", "--strategy", "advpixel", "--input", path(&input), "--out", path(&tmp.path().join("px")),
        "--checkpoint", path(&ckpt),
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn analyze_matches_library_and_kl_behaves() {
    let tmp = TempDir::new().unwrap();
    let s = image_dir(&tmp, "src", DomainSpec::source(), 4, 0);
    let t = image_dir(&tmp, "tgt", DomainSpec::target(), 4, 100);
    let out = tmp.path().join("out");
    let o = advstyle(&["analyze", "--input", path(&s), "--input", path(&t), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let kl = fs::read_to_string(out.join("kl.csv")).unwrap();
    let value = |a: &str, b: &str| -> f64 {
        kl.lines()
            .find_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == a && f[1] == b).then(|| f[2].parse().unwrap())
            })
            .unwrap()
    };
    assert_eq!(value("src", "src"), 0.0);
    assert!(value("src", "tgt") > 0.0);

    let lib = Dataset::load_dir(&s).unwrap();
    assert_eq!(
        fs::read_to_string(out.join("style_src.csv")).unwrap(),
        extract_style_features(&lib).unwrap().to_csv()
    );
    assert_eq!(
        fs::read_to_string(out.join("hist_src.csv")).unwrap(),
        histogram_feature(&lib, 8).unwrap().to_csv_row()
    );
}

#[test]
fn gradcheck_lists_every_op_and_fails_on_injected_fixture() {
    let o = advstyle(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for op in DIFFERENTIABLE_OPS {
        let n = text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(n, 1, "{op}");
    }
    assert_eq!(code(&advstyle(&["gradcheck", "--inject-wrong-adjoint"])), 1);
}

#[test]
fn bench_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["bench", "--out", path(&out), "--max_iter", "4", "--repeats", "1", "--bench.gammas", "1"];
        args.extend_from_slice(SMALL);
        let o = advstyle(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["results.csv", "runs.csv", "sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 7);
}
