use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgcrf::gmm::min_corpus;
use dgcrf::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_EPS};
use dgcrf::image::{add_gaussian_noise, load_image, psnr, save_image, Image};
use dgcrf::inference::HqsSchedule;
use dgcrf::train::{
    centered_patches, evaluate, gmm_init, initial_model, make_pairs, random_init, sigma2_of, train_from, EvalRow,
};
use dgcrf::{denoise, load_model, save_model, synth, Architecture, DgcrfModel};
use log::info;
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const IMAGE_EXTENSIONS: &[&str] = &["pgm", "pnm", "png"];

/// Image files of a directory, sorted by name.
pub fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_dir(dir: &Path) -> CliResult<Vec<Image>> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no PGM or PNG images in {}", dir.display())));
    }
    files.iter().map(|f| load_image(f).map_err(CliError::data)).collect()
}

fn require_dir(key: &str, path: &Option<PathBuf>) -> CliResult<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::Config(format!("missing required key {key}")))?;
    if !p.is_dir() {
        return Err(CliError::Config(format!("{key}: {} is not a directory", p.display())));
    }
    Ok(p)
}

fn check_min_size(images: &[Image], files: &[PathBuf], side: usize, what: &str) -> CliResult<()> {
    for (img, f) in images.iter().zip(files) {
        if img.height() < side || img.width() < side {
            return Err(CliError::Data(format!(
                "{} is {}x{}, smaller than the {what} {side}",
                f.display(),
                img.height(),
                img.width()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:>7}  {:>11}  {:>12}  {:>8}\n", "sigma", "input_psnr", "output_psnr", "gain");
    for r in rows {
        s += &format!(
            "{:>7}  {:>11.4}  {:>12.4}  {:>8.4}\n",
            r.sigma255,
            r.input_psnr,
            r.output_psnr,
            r.output_psnr - r.input_psnr
        );
    }
    s
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("sigma,input_psnr,output_psnr\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6}\n", r.sigma255, r.input_psnr, r.output_psnr);
    }
    s
}

pub fn train(config: Option<&Path>, overrides: &[String]) -> CliResult<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let train_dir = require_dir("train-dir", &cfg.train_dir)?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("missing required key out-dir".into()))?;
    if cfg.test_dir.is_some() {
        require_dir("test-dir", &cfg.test_dir)?;
    }
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Config(format!("out-dir: cannot create {}: {e}", out_dir.display())))?;
    let model_path = cfg.model.clone().unwrap_or_else(|| out_dir.join("model.dgcrf"));

    let files = image_files(&train_dir)?;
    let images = load_dir(&train_dir)?;
    check_min_size(&images, &files, cfg.train.crop_size, "crop size")?;
    info!("{} training images from {}", images.len(), train_dir.display());

    let pairs = make_pairs(&images, &cfg.train).map_err(CliError::data)?;
    let clean: Vec<Image> = pairs.iter().map(|p| p.clean.clone()).collect();
    let t0 = Instant::now();
    let init = initial_model(&clean, &cfg.train).map_err(CliError::compute)?;
    info!("initialization took {:.1}s", t0.elapsed().as_secs_f64());

    let log_path = out_dir.join("train.log");
    let log_file = File::create(&log_path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(log_file);
    let _ = writeln!(log, "# iter loss grad_norm step wall_s");
    let outcome = train_from(init, &pairs, &cfg.train, |e, wall| {
        info!("iter {:4}  psnr {:8.4} dB  |g| {:.3e}  step {:.3e}  {:.1}s", e.iter, e.mean_psnr(), e.grad_norm, e.step, wall);
        let _ = writeln!(log, "{} {:.10} {:.6e} {:.6e} {:.3}", e.iter, e.loss, e.grad_norm, e.step, wall);
        let _ = log.flush();
    })
    .map_err(CliError::compute)?;
    drop(log);

    if let Some(report) = &outcome.preflight {
        println!("gradient preflight:\n{report}");
    }
    save_model(&outcome.model, &model_path).map_err(CliError::data)?;
    let last = outcome.log.last().map_or(f64::NAN, |e| e.mean_psnr());
    println!(
        "trained {} iterations ({:?}); mean training PSNR {:.4} dB; model written to {}",
        outcome.log.len().saturating_sub(1),
        outcome.termination,
        last,
        model_path.display()
    );

    if let Some(test_dir) = &cfg.test_dir {
        let test = load_dir(test_dir)?;
        let sigmas = cfg.eval_sigmas.clone().unwrap_or_else(|| cfg.train.sigma255_list.clone());
        let rows = evaluate(&outcome.model, &test, &sigmas, cfg.eval_seed, cfg.train.quantize_noise)
            .map_err(CliError::compute)?;
        print!("{}", eval_table(&rows));
        write_file(&out_dir.join("eval.csv"), eval_csv(&rows).as_bytes())?;
    }
    Ok(())
}

fn load_model_arg(path: &Path) -> CliResult<DgcrfModel> {
    load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn denoise_cmd(model: &Path, input: &Path, sigma: f64, output: &Path, clean: Option<&Path>) -> CliResult<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CliError::Config(format!("--sigma must be positive, got {sigma}")));
    }
    let model = load_model_arg(model)?;
    let x = load_image(input).map_err(CliError::data)?;
    let d = model.arch.d;
    if x.height() < d || x.width() < d {
        return Err(CliError::Data(format!(
            "{} is {}x{}, smaller than the patch size {d}",
            input.display(),
            x.height(),
            x.width()
        )));
    }
    let clean = clean.map(|p| load_image(p).map_err(CliError::data)).transpose()?;
    if let Some(c) = &clean {
        if !c.same_shape(&x) {
            return Err(CliError::Data("clean and noisy images differ in size".into()));
        }
    }
    let y = denoise(&x, sigma2_of(sigma), &model).map_err(CliError::compute)?;
    save_image(&y, output).map_err(CliError::data)?;
    if let Some(c) = clean {
        let pin = psnr(&x, &c, 1.0).map_err(CliError::compute)?;
        let pout = psnr(&y.quantized(), &c, 1.0).map_err(CliError::compute)?;
        println!("input_psnr={pin:.4} output_psnr={pout:.4}");
    }
    Ok(())
}

pub fn eval_cmd(model: &Path, test_dir: &Path, sigmas: &[f64], seed: u64, quantize: bool, csv: &Path) -> CliResult<()> {
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(CliError::Config("--sigmas must list non-negative noise levels".into()));
    }
    if !test_dir.is_dir() {
        return Err(CliError::Config(format!("--test-dir: {} is not a directory", test_dir.display())));
    }
    let model = load_model_arg(model)?;
    let files = image_files(test_dir)?;
    let images = load_dir(test_dir)?;
    check_min_size(&images, &files, model.arch.d, "patch size")?;
    let rows = evaluate(&model, &images, sigmas, seed, quantize).map_err(CliError::compute)?;
    print!("{}", eval_table(&rows));
    write_file(csv, eval_csv(&rows).as_bytes())
}

pub struct GradcheckArgs {
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub seed: u64,
    pub size: usize,
    pub eps: Option<Vec<f64>>,
    pub cascade: bool,
    pub corrupt: Option<f64>,
}

pub fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<()> {
    if !(2..=4).contains(&a.d) || !(1..=8).contains(&a.k) || !(1..=3).contains(&a.t) {
        return Err(CliError::Config(format!(
            "gradcheck is limited to 2 <= d <= 4, 1 <= K <= 8, 1 <= T <= 3 (got d={}, K={}, T={})",
            a.d, a.k, a.t
        )));
    }
    if a.size < a.d || a.size > 32 {
        return Err(CliError::Config(format!("--size must lie in [d, 32], got {}", a.size)));
    }
    let eps = a.eps.unwrap_or_else(|| DEFAULT_EPS.to_vec());
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(CliError::Config("--eps values must be positive".into()));
    }
    let cfg = GradcheckConfig {
        d: a.d,
        k: a.k,
        t: a.t,
        seed: a.seed,
        size: a.size,
        eps,
        cascade: a.cascade,
        corrupt: a.corrupt,
        ..GradcheckConfig::default()
    };
    let t0 = Instant::now();
    let report = run_gradcheck(&cfg).map_err(CliError::compute)?;
    print!("{report}");
    println!(
        "max_rel_err={:.3e} tolerance={:.0e} elapsed={:.1}s",
        report.max_rel_err(),
        cfg.tolerance,
        t0.elapsed().as_secs_f64()
    );
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}

/// Patches from a CSV file (one flattened patch per row) or from every image
/// of a directory; returned centered, one per column.
fn patch_corpus(path: &Path, d: usize, samples: usize, seed: u64) -> CliResult<DMatrix<f64>> {
    let n = d * d;
    if path.is_dir() {
        let images = load_dir(path)?;
        let files = image_files(path)?;
        check_min_size(&images, &files, d, "patch size")?;
        return centered_patches(&images, d, Some(samples), seed).map_err(CliError::data);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut cols = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Data(format!("{}:{}: not a list of numbers", path.display(), i + 1)))?;
        if row.len() != n {
            return Err(CliError::Data(format!(
                "{}:{}: expected {n} values for d = {d}, found {}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Data(format!("{}:{}: non-finite value", path.display(), i + 1)));
        }
        let mean = row.iter().sum::<f64>() / n as f64;
        cols.extend(row.into_iter().map(|v| v - mean));
    }
    Ok(DMatrix::from_vec(n, cols.len() / n, cols))
}

pub struct InitArgs {
    pub random: bool,
    pub patch_dir: Option<PathBuf>,
    pub k: usize,
    pub d: usize,
    pub t: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub scale: f64,
    pub em_iters: usize,
    pub samples: usize,
    pub sigma: f64,
    pub cascade: bool,
}

pub fn init_cmd(a: InitArgs) -> CliResult<()> {
    let mut arch = Architecture::new(a.d, a.k, HqsSchedule::standard().truncated(a.t));
    arch.cascade = a.cascade;
    arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if !(a.sigma > 0.0) {
        return Err(CliError::Config(format!("--sigma must be positive, got {}", a.sigma)));
    }
    let bank = if a.random {
        if !a.scale.is_finite() {
            return Err(CliError::Config("--scale must be finite".into()));
        }
        random_init(a.k, a.d, a.seed, a.scale)
    } else {
        let src = a
            .patch_dir
            .as_ref()
            .ok_or_else(|| CliError::Config("--patch-dir is required in gmm mode".into()))?;
        if !src.exists() {
            return Err(CliError::Config(format!("--patch-dir: {} does not exist", src.display())));
        }
        let patches = patch_corpus(src, a.d, a.samples, a.seed)?;
        let need = min_corpus(a.k, a.d * a.d);
        if patches.ncols() < need {
            return Err(CliError::Data(format!(
                "patch corpus has {} samples; K = {} components of dimension {} need at least {need}",
                patches.ncols(),
                a.k,
                a.d * a.d
            )));
        }
        let (bank, gmm) = gmm_init(&patches, a.k, a.em_iters, a.seed, sigma2_of(a.sigma)).map_err(CliError::compute)?;
        info!(
            "EM on {} patches: objective {:.4} after {} iterations, {} re-seeded components",
            patches.ncols(),
            gmm.log_likelihood.last().copied().unwrap_or(f64::NAN),
            gmm.log_likelihood.len(),
            gmm.reseeded
        );
        bank
    };
    let model = DgcrfModel::from_bank(arch, bank).map_err(CliError::compute)?;
    save_model(&model, &a.out).map_err(CliError::data)?;
    println!("model written to {}", a.out.display());
    Ok(())
}

pub fn noise_cmd(input: &Path, sigma: f64, seed: u64, quantize: bool, output: &Path) -> CliResult<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CliError::Config(format!("--sigma must be non-negative, got {sigma}")));
    }
    let img = load_image(input).map_err(CliError::data)?;
    let noisy = add_gaussian_noise(&img, sigma, seed, quantize).map_err(CliError::compute)?;
    save_image(&noisy, output).map_err(CliError::data)
}

pub fn scenes_cmd(count: usize, size: usize, seed: u64, out_dir: &Path) -> CliResult<()> {
    if count == 0 || size == 0 {
        return Err(CliError::Config("--count and --size must be positive".into()));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("--out-dir: cannot create {}: {e}", out_dir.display())))?;
    let imgs = synth::scenes(count, size, size, seed).map_err(CliError::compute)?;
    for (i, img) in imgs.iter().enumerate() {
        save_image(img, out_dir.join(format!("scene_{i:03}.pgm"))).map_err(CliError::data)?;
    }
    println!("{count} scenes written to {}", out_dir.display());
    Ok(())
}
