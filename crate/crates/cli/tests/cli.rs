use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dgcrf::image::{load_image, rng_from_seed, save_image};
use dgcrf::train::random_init;
use dgcrf::{load_model, synth, Image};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

fn dgcrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgcrf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in synth::scenes(count, size, size, seed).unwrap().iter().enumerate() {
        save_image(img, dir.join(format!("s{i}.pgm"))).unwrap();
    }
}

/// Tiny random-init model trained for zero iterations.
fn tiny_model(dir: &Path) -> String {
    let out = dgcrf(dir, &["init", "--mode", "random", "--K", "2", "--d", "3", "--T", "2", "--out", "m.dgcrf"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    "m.dgcrf".into()
}

#[test]
fn unknown_subcommand_and_bad_flags_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&dgcrf(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dgcrf(tmp.path(), &["denoise", "--sigma", "abc"])), 2);
    assert_eq!(code(&dgcrf(tmp.path(), &["--help"])), 0);
}

#[test]
fn train_without_train_dir_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let out = dgcrf(tmp.path(), &["train", "--set", "out-dir=o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train-dir"), "{}", stderr(&out));
    let out = dgcrf(tmp.path(), &["train", "--set", "train-dir=nowhere", "--set", "out-dir=o"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train-dir"));
    assert!(!tmp.path().join("o").exists(), "no work before validation");
}

#[test]
fn config_errors_point_at_the_line() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.conf"), "d = 3\n\nlearningRate = 0.1\n").unwrap();
    let out = dgcrf(tmp.path(), &["train", "--config", "bad.conf"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.conf:3"), "{}", stderr(&out));
    let out = dgcrf(tmp.path(), &["train", "--config", "missing.conf"]);
    assert_eq!(code(&out), 2);
    let out = dgcrf(tmp.path(), &["train", "--set", "K=many"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains('K'));
}

#[test]
fn training_data_problems_exit_3() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = dgcrf(tmp.path(), &["train", "--set", "train-dir=empty", "--set", "out-dir=o"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    write_scenes(&tmp.path().join("small"), 2, 20, 0);
    let out = dgcrf(
        tmp.path(),
        &["train", "--set", "train-dir=small", "--set", "out-dir=o", "--set", "cropSize=32"],
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("s0.pgm"), "{}", stderr(&out));

    fs::create_dir(tmp.path().join("junk")).unwrap();
    fs::write(tmp.path().join("junk/a.pgm"), b"P5\n4 4\n255\nxx").unwrap();
    let out = dgcrf(tmp.path(), &["train", "--set", "train-dir=junk", "--set", "out-dir=o"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn zero_iterations_returns_the_initial_model() {
    let tmp = TempDir::new().unwrap();
    write_scenes(&tmp.path().join("tr"), 2, 16, 3);
    let out = dgcrf(
        tmp.path(),
        &[
            "train", "--set", "train-dir=tr", "--set", "out-dir=o", "--set", "d=3", "--set", "K=3", "--set", "T=2",
            "--set", "cropSize=16", "--set", "maxIters=0", "--set", "init=random", "--set", "initScale=0.2",
            "--set", "seed=11", "--set", "preflight=false",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = load_model(tmp.path().join("o/model.dgcrf")).unwrap();
    assert_eq!(model.banks[0], random_init(3, 3, 11, 0.2));
    let log = fs::read_to_string(tmp.path().join("o/train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "# iter loss grad_norm step wall_s");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0 "));
}

#[test]
fn training_is_deterministic_and_writes_eval() {
    let tmp = TempDir::new().unwrap();
    write_scenes(&tmp.path().join("tr"), 2, 16, 5);
    write_scenes(&tmp.path().join("te"), 2, 16, 6);
    fs::write(
        tmp.path().join("t.conf"),
        "d = 3\nK = 2\nT = 2\ncropSize = 16\nmaxIters = 3\nemIters = 5\ntrain-dir = tr\ntest-dir = te\nevalSigmas = 20\n",
    )
    .unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dgcrf(tmp.path(), &["train", "--config", "t.conf", "--set", &format!("out-dir={run}")]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        bytes.push(fs::read(tmp.path().join(run).join("model.dgcrf")).unwrap());
        let csv = fs::read_to_string(tmp.path().join(run).join("eval.csv")).unwrap();
        assert!(csv.starts_with("sigma,input_psnr,output_psnr\n20,"), "{csv}");
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn denoise_checks_sigma_and_size() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_model(tmp.path());
    write_scenes(&tmp.path().join("im"), 1, 12, 0);
    let out = dgcrf(tmp.path(), &["denoise", "--model", &m, "--input", "im/s0.pgm", "--sigma", "0", "--output", "o.pgm"]);
    assert_eq!(code(&out), 2);
    let out = dgcrf(tmp.path(), &["denoise", "--model", &m, "--input", "im/s0.pgm", "--sigma", "-3", "--output", "o.pgm"]);
    assert_eq!(code(&out), 2);

    save_image(&Image::filled(2, 5, 0.5).unwrap(), tmp.path().join("tiny.pgm")).unwrap();
    let out = dgcrf(tmp.path(), &["denoise", "--model", &m, "--input", "tiny.pgm", "--sigma", "10", "--output", "o.pgm"]);
    assert_eq!(code(&out), 3);
    let out = dgcrf(tmp.path(), &["denoise", "--model", "none.dgcrf", "--input", "im/s0.pgm", "--sigma", "10", "--output", "o.pgm"]);
    assert_eq!(code(&out), 3);
    fs::write(tmp.path().join("broken.dgcrf"), b"not a model").unwrap();
    let out = dgcrf(tmp.path(), &["denoise", "--model", "broken.dgcrf", "--input", "im/s0.pgm", "--sigma", "10", "--output", "o.pgm"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn tiny_sigma_leaves_the_image_alone() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_model(tmp.path());
    write_scenes(&tmp.path().join("im"), 1, 20, 9);
    let out = dgcrf(
        tmp.path(),
        &["denoise", "--model", &m, "--input", "im/s0.pgm", "--sigma", "0.0001", "--output", "o.pgm", "--clean", "im/s0.pgm"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = load_image(tmp.path().join("im/s0.pgm")).unwrap();
    let b = load_image(tmp.path().join("o.pgm")).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("input_psnr=99.0000 output_psnr=99.0000"), "{stdout}");
}

#[test]
fn eval_rejects_empty_directory_and_writes_csv() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_model(tmp.path());
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = dgcrf(tmp.path(), &["eval", "--model", &m, "--test-dir", "empty"]);
    assert_eq!(code(&out), 3);
    let out = dgcrf(tmp.path(), &["eval", "--model", &m, "--test-dir", "absent"]);
    assert_eq!(code(&out), 2);

    write_scenes(&tmp.path().join("te"), 2, 12, 1);
    let out = dgcrf(tmp.path(), &["eval", "--model", &m, "--test-dir", "te", "--sigmas", "10,30", "--csv", "r.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma,input_psnr,output_psnr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,") && lines[2].starts_with("30,"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().next().unwrap().contains("output_psnr"));
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = dgcrf(tmp.path(), &["gradcheck", "--d", "2", "--K", "2", "--T", "1", "--size", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = dgcrf(tmp.path(), &["gradcheck", "--d", "2", "--K", "2", "--T", "1", "--size", "8", "--corrupt", "0.01"]);
    assert_eq!(code(&out), 5);
    for args in [["--d", "5"], ["--K", "9"], ["--T", "4"]] {
        assert_eq!(code(&dgcrf(tmp.path(), &["gradcheck", args[0], args[1]])), 2);
    }
}

fn centered_cov(a: &DMatrix<f64>) -> DMatrix<f64> {
    a * a.transpose()
}

#[test]
fn gmm_init_from_csv_recovers_two_components() {
    let tmp = TempDir::new().unwrap();
    // Mixing matrices with zero-sum columns, so mean removal keeps them.
    let a1 = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]) * 0.3;
    let a2 = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]) * 0.05;
    let mut rng = rng_from_seed(42);
    let mut csv = String::new();
    for i in 0..6000 {
        let a = if i % 3 == 0 { &a2 } else { &a1 };
        let z = DMatrix::from_fn(2, 1, |_, _| StandardNormal.sample(&mut rng));
        let x = a * z;
        let row: Vec<String> = x.iter().map(|v| format!("{v:.9}")).collect();
        csv += &row.join(",");
        csv.push('\n');
    }
    fs::write(tmp.path().join("p.csv"), csv).unwrap();
    let out = dgcrf(
        tmp.path(),
        &["init", "--mode", "gmm", "--patch-dir", "p.csv", "--K", "2", "--d", "2", "--T", "1", "--out", "g.dgcrf", "--em-iters", "50"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = load_model(tmp.path().join("g.dgcrf")).unwrap();
    let bank = &model.banks[0];
    let fitted: Vec<DMatrix<f64>> = bank.factors_w.iter().map(|l| l * l.transpose()).collect();
    for truth in [centered_cov(&a1), centered_cov(&a2)] {
        let best = fitted
            .iter()
            .map(|c| (c - &truth).norm() / truth.norm())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "relative covariance error {best}");
    }
}

#[test]
fn small_corpus_reports_required_size() {
    let tmp = TempDir::new().unwrap();
    let rows: String = (0..50).map(|i| format!("{i},0,0,{}\n", -i)).collect();
    fs::write(tmp.path().join("p.csv"), rows).unwrap();
    let out = dgcrf(tmp.path(), &["init", "--mode", "gmm", "--patch-dir", "p.csv", "--K", "4", "--d", "2", "--out", "g.dgcrf"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("160"), "{}", stderr(&out));
    fs::write(tmp.path().join("w.csv"), "1,2,3\n").unwrap();
    let out = dgcrf(tmp.path(), &["init", "--mode", "gmm", "--patch-dir", "w.csv", "--K", "1", "--d", "2", "--out", "g.dgcrf"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn random_init_with_zero_scale_is_identity() {
    let tmp = TempDir::new().unwrap();
    let out = dgcrf(tmp.path(), &["init", "--mode", "random", "--K", "3", "--d", "3", "--scale", "0", "--out", "r.dgcrf"]);
    assert_eq!(code(&out), 0);
    let model = load_model(tmp.path().join("r.dgcrf")).unwrap();
    let id = DMatrix::<f64>::identity(9, 9);
    for f in model.banks[0].factors_w.iter().chain(&model.banks[0].factors_psi) {
        assert_eq!(f, &id);
    }
    assert_eq!(model.arch.layers(), 4);
}

#[test]
fn noise_is_seeded() {
    let tmp = TempDir::new().unwrap();
    save_image(&Image::filled(64, 64, 128.0 / 255.0).unwrap(), tmp.path().join("g.pgm")).unwrap();
    let run = |seed: &str, sigma: &str, out: &str| {
        let o = dgcrf(tmp.path(), &["noise", "--input", "g.pgm", "--sigma", sigma, "--seed", seed, "--output", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(tmp.path().join(out)).unwrap()
    };
    assert_eq!(run("1", "25", "a.pgm"), run("1", "25", "b.pgm"));
    assert_ne!(run("1", "25", "a.pgm"), run("2", "25", "c.pgm"));
    assert_eq!(run("1", "0", "z.pgm"), fs::read(tmp.path().join("g.pgm")).unwrap());

    let noisy = load_image(tmp.path().join("a.pgm")).unwrap();
    let m = noisy.mean();
    let sd = (noisy.pixels().iter().map(|p| (p - m).powi(2)).sum::<f64>() / noisy.len() as f64).sqrt() * 255.0;
    assert!((sd - 25.0).abs() < 1.25, "sample std {sd}");

    let o = dgcrf(tmp.path(), &["noise", "--input", "g.pgm", "--sigma", "-1", "--output", "x.pgm"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = TempDir::new().unwrap();
    let m = tiny_model(tmp.path());
    write_scenes(&tmp.path().join("im"), 1, 24, 4);
    for t in ["1", "3"] {
        let out = dgcrf(
            tmp.path(),
            &["--threads", t, "denoise", "--model", &m, "--input", "im/s0.pgm", "--sigma", "20", "--output", &format!("o{t}.pgm")],
        );
        assert_eq!(code(&out), 0);
    }
    assert_eq!(fs::read(tmp.path().join("o1.pgm")).unwrap(), fs::read(tmp.path().join("o3.pgm")).unwrap());
}
