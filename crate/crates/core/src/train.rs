//! Loss, initialization, full-batch L-BFGS training and evaluation.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, Gmm};
use crate::grad::backprop_dgcrf;
use crate::gradcheck::{finite_diff_check_sampled, GradReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::image::{add_gaussian_noise, gaussian_blur3, psnr, rng_from_seed, Image, PSNR_CAP};
use crate::inference::{denoise, dgcrf_forward, HqsSchedule};
use crate::lbfgs::{lbfgs_minimize, LbfgsConfig, Termination};
use crate::model::{Architecture, DgcrfModel};
use crate::params::{flatten_gradients, flatten_model, num_params, param_blocks, unflatten_into};
use crate::patch::PatchGeometry;
use crate::pgnet::{PotentialBank, SoftmaxVariant};

/// Noise levels below this (on the 0..255 scale) are treated as this value
/// when handed to the network.
pub const SIGMA255_FLOOR: f64 = 1e-2;

pub fn sigma2_of(sigma255: f64) -> f64 {
    let s = sigma255.max(SIGMA255_FLOOR) / 255.0;
    s * s
}

/// Negative PSNR (peak 1) and its gradient with respect to the estimate.
#[derive(Debug, Clone)]
pub struct PsnrLoss {
    pub loss: f64,
    pub grad: Image,
    /// Estimate equals the target; the loss is capped and the gradient zero.
    pub capped: bool,
}

pub fn psnr_loss(yhat: &Image, target: &Image) -> Result<PsnrLoss> {
    let value = psnr(yhat, target, 1.0)?;
    let sq: f64 = yhat
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sq == 0.0 || value >= PSNR_CAP {
        log::warn!("estimate matches target; PSNR loss capped with zero gradient");
        return Ok(PsnrLoss {
            loss: -PSNR_CAP,
            grad: Image::filled(yhat.height(), yhat.width(), 0.0)?,
            capped: true,
        });
    }
    let scale = 20.0 / std::f64::consts::LN_10 / sq;
    let grad = yhat
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Ok(PsnrLoss {
        loss: -value,
        grad: Image::new(yhat.height(), yhat.width(), grad)?,
        capped: false,
    })
}

/// `P_k, R_k = scale · L + I` with `L` lower
/// triangular, entries uniform in `[-1, 1]`; zero biases.
pub fn random_init(k: usize, d: usize, seed: u64, scale: f64) -> PotentialBank {
    let n = d * d;
    let mut rng = rng_from_seed(seed);
    let factor = |rng: &mut rand_chacha::ChaCha8Rng| {
        DMatrix::from_fn(n, n, |i, j| {
            if i < j {
                0.0
            } else {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                scale * u + if i == j { 1.0 } else { 0.0 }
            }
        })
    };
    let factors_w = (0..k).map(|_| factor(&mut rng)).collect();
    let factors_psi = (0..k).map(|_| factor(&mut rng)).collect();
    PotentialBank {
        d,
        factors_w,
        factors_psi,
        biases: vec![0.0; k],
    }
}

/// Every mean-subtracted `d×d` patch of `images`, one per column. With
/// `max_samples`, a seeded subset is kept.
pub fn centered_patches(images: &[Image], d: usize, max_samples: Option<usize>, seed: u64) -> Result<DMatrix<f64>> {
    let mut cols = Vec::new();
    let mut total = 0;
    for img in images {
        let g = PatchGeometry::for_image(img, d)?;
        let mut m = g.extract(img.pixels());
        for mut c in m.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        total += m.ncols();
        cols.push(m);
    }
    let n = d * d;
    let mut all = DMatrix::zeros(n, total);
    let mut at = 0;
    for m in cols {
        all.columns_mut(at, m.ncols()).copy_from(&m);
        at += m.ncols();
    }
    match max_samples {
        Some(cap) if cap < total => {
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng_from_seed(seed), total, cap).into_vec();
            idx.sort_unstable();
            Ok(all.select_columns(idx.iter()))
        }
        _ => Ok(all),
    }
}

/// Bank from a zero-mean mixture fitted to centered patches (columns of
/// `patches`): `W_k = Ψ_k =` fitted covariance and
/// `b_k = log π_k − ½ log det(W_k + σ₀² I)`.
pub fn gmm_init(
    patches: &DMatrix<f64>,
    k: usize,
    em_iters: usize,
    seed: u64,
    sigma0_2: f64,
) -> Result<(PotentialBank, Gmm)> {
    let n = patches.nrows();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n {
        return Err(Error::Param(format!("patch length {n} is not a square")));
    }
    let gmm = fit_gmm(patches, k, em_iters, seed)?;
    let mut factors = Vec::with_capacity(k);
    let mut biases = Vec::with_capacity(k);
    for (cov, w) in gmm.covariances.iter().zip(&gmm.weights) {
        let l = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numeric("fitted covariance is not positive definite".into()))?
            .l();
        let shifted = cov + DMatrix::identity(n, n) * sigma0_2;
        let ld = Cholesky::new(shifted)
            .ok_or_else(|| Error::Numeric("fitted covariance is not positive definite".into()))?
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| 2.0 * v.ln())
            .sum::<f64>();
        biases.push(w.ln() - 0.5 * ld);
        factors.push(l);
    }
    let bank = PotentialBank::new(d, factors.clone(), factors, biases)?;
    Ok((bank, gmm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Gmm,
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub t: usize,
    /// Template; the first `t` entries are used (extended by doubling).
    pub beta_multipliers: HqsSchedule,
    pub sigma255_list: Vec<f64>,
    pub cascade: bool,
    pub share_bank: bool,
    pub share_bias: bool,
    pub softmax: SoftmaxVariant,
    pub lbfgs_memory: usize,
    pub max_iters: usize,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub seed: u64,
    pub crop_size: usize,
    pub quantize_noise: bool,
    pub init: InitMode,
    pub em_iters: usize,
    /// Cap on the number of patches handed to EM.
    pub gmm_samples: usize,
    /// Run a sampled finite-difference check of the objective first.
    pub preflight: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small setting that trains in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            d: 5,
            k: 16,
            t: 4,
            beta_multipliers: HqsSchedule::standard(),
            sigma255_list: vec![15.0, 25.0],
            cascade: true,
            share_bank: true,
            share_bias: true,
            softmax: SoftmaxVariant::Exponential,
            lbfgs_memory: 10,
            max_iters: 200,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            rel_tol: 1e-10,
            seed: 0,
            crop_size: 64,
            quantize_noise: false,
            init: InitMode::Gmm,
            em_iters: 30,
            gmm_samples: 50_000,
            preflight: true,
        }
    }

    /// 8×8 patches, 200 components and six layers.
    pub fn full_scale() -> Self {
        TrainConfig {
            d: 8,
            k: 200,
            t: 6,
            sigma255_list: vec![8.0, 13.0, 18.0, 25.0],
            crop_size: 128,
            max_iters: 1000,
            gmm_samples: 2_000_000,
            em_iters: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.k == 0 || self.t == 0 {
            return Err(Error::Param(format!(
                "need d >= 2, K >= 1, T >= 1 (got d={}, K={}, T={})",
                self.d, self.k, self.t
            )));
        }
        if self.crop_size < self.d {
            return Err(Error::Param(format!("crop size {} is smaller than d={}", self.crop_size, self.d)));
        }
        if self.sigma255_list.is_empty() || self.sigma255_list.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Param("training noise levels must be positive and non-empty".into()));
        }
        if let InitMode::Random { scale } = self.init {
            if !scale.is_finite() {
                return Err(Error::Param("init scale must be finite".into()));
            }
        }
        self.beta_multipliers.validate()?;
        self.lbfgs().validate()?;
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d: self.d,
            k: self.k,
            schedule: self.beta_multipliers.truncated(self.t),
            cascade: self.cascade,
            share_bank: self.share_bank,
            share_bias: self.share_bias,
            softmax: self.softmax,
        }
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: self.lbfgs_memory,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            rel_tol: self.rel_tol,
            c1: self.c1,
            c2: self.c2,
            ..LbfgsConfig::default()
        }
    }

    fn reference_sigma2(&self) -> f64 {
        let mean = self.sigma255_list.iter().sum::<f64>() / self.sigma255_list.len() as f64;
        sigma2_of(mean)
    }
}

/// Mixes a base seed with up to two indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub clean: Image,
    pub noisy: Image,
    pub sigma255: f64,
}

impl TrainingPair {
    pub fn new(clean: Image, sigma255: f64, seed: u64, quantize: bool) -> Result<Self> {
        let noisy = add_gaussian_noise(&clean, sigma255, seed, quantize)?;
        Ok(TrainingPair { clean, noisy, sigma255 })
    }
}

/// One seeded `crop_size` crop per image, noise levels cycling through the
/// configured list.
pub fn make_pairs(images: &[Image], cfg: &TrainConfig) -> Result<Vec<TrainingPair>> {
    if images.is_empty() {
        return Err(Error::Param("no training images".into()));
    }
    let c = cfg.crop_size;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.height() < c || img.width() < c {
                return Err(Error::Param(format!(
                    "training image {i} is {}x{}, smaller than the {c}x{c} crop",
                    img.height(),
                    img.width()
                )));
            }
            let mut rng = rng_from_seed(derive_seed(cfg.seed, 1, i as u64));
            let r = rng.gen_range(0..=img.height() - c);
            let col = rng.gen_range(0..=img.width() - c);
            let sigma = cfg.sigma255_list[i % cfg.sigma255_list.len()];
            TrainingPair::new(img.crop(r, col, c, c)?, sigma, derive_seed(cfg.seed, 2, i as u64), cfg.quantize_noise)
        })
        .collect()
}

/// Mean negative PSNR over `pairs` and its gradient with respect to the
/// flattened parameters. Pairs are processed in order.
pub fn objective(model: &DgcrfModel, pairs: &[TrainingPair]) -> Result<(f64, Vec<f64>)> {
    let np = num_params(&model.arch);
    let mut loss = 0.0;
    let mut grad = vec![0.0; np];
    for (i, pair) in pairs.iter().enumerate() {
        let (yhat, cache) = dgcrf_forward(&pair.noisy, sigma2_of(pair.sigma255), model)?;
        let l = psnr_loss(&yhat, &pair.clean)?;
        if !l.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training pair {i} (sigma {}) produced a non-finite loss",
                pair.sigma255
            )));
        }
        let g = flatten_gradients(&backprop_dgcrf(&l.grad, &cache, model)?);
        drop(cache);
        loss += l.loss;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / pairs.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Sampled finite-difference check of [`objective`] on a small crop of the
/// first pair, using the real architecture.
pub fn preflight(model: &DgcrfModel, pair: &TrainingPair, seed: u64) -> Result<GradReport> {
    let side = (3 * model.arch.d).min(pair.clean.height()).min(pair.clean.width());
    let small = TrainingPair {
        clean: pair.clean.crop(0, 0, side, side)?,
        noisy: pair.noisy.crop(0, 0, side, side)?,
        sigma255: pair.sigma255,
    };
    let pairs = [small];
    let theta = flatten_model(model);
    let (_, analytic) = objective(model, &pairs)?;
    let mut probe = model.clone();
    let f = |v: &[f64]| -> Result<f64> {
        unflatten_into(&mut probe, v)?;
        Ok(objective(&probe, &pairs)?.0)
    };
    finite_diff_check_sampled(f, &theta, &analytic, &param_blocks(&model.arch), 2, seed, &DEFAULT_EPS, DEFAULT_TOL)
}

/// One optimizer iteration as logged. Wall time is kept apart so that logs
/// of identical runs compare equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
}

impl TrainLogEntry {
    /// Mean training PSNR in dB.
    pub fn mean_psnr(&self) -> f64 {
        -self.loss
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DgcrfModel,
    pub log: Vec<TrainLogEntry>,
    /// Seconds since the start of optimization, per log entry.
    pub wall: Vec<f64>,
    pub termination: Termination,
    pub preflight: Option<GradReport>,
}

/// Initial model according to `cfg.init`.
pub fn initial_model(images: &[Image], cfg: &TrainConfig) -> Result<DgcrfModel> {
    let bank = match cfg.init {
        InitMode::Random { scale } => random_init(cfg.k, cfg.d, cfg.seed, scale),
        InitMode::Gmm => {
            let patches = centered_patches(images, cfg.d, Some(cfg.gmm_samples), derive_seed(cfg.seed, 3, 0))?;
            gmm_init(&patches, cfg.k, cfg.em_iters, cfg.seed, cfg.reference_sigma2())?.0
        }
    };
    DgcrfModel::from_bank(cfg.architecture(), bank)
}

/// Trains from `init` on fixed pairs. `on_iter` receives each log entry
/// with its wall time.
pub fn train_from(
    init: DgcrfModel,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&TrainLogEntry, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Param("no training pairs".into()));
    }
    if init.arch != cfg.architecture() {
        return Err(Error::Param("initial model does not match the configured architecture".into()));
    }
    let report = if cfg.preflight {
        let r = preflight(&init, &pairs[0], cfg.seed)?;
        if !r.all_pass() {
            return Err(Error::Numeric(format!("gradient preflight failed:\n{r}")));
        }
        Some(r)
    } else {
        None
    };
    let start = Instant::now();
    let mut probe = init.clone();
    let f = |theta: &[f64]| {
        unflatten_into(&mut probe, theta)?;
        objective(&probe, pairs)
    };
    let mut log = Vec::new();
    let mut wall = Vec::new();
    let result = lbfgs_minimize(f, &flatten_model(&init), &cfg.lbfgs(), |rec| {
        let e = TrainLogEntry {
            iter: rec.iter,
            loss: rec.value,
            grad_norm: rec.grad_norm,
            step: rec.step,
        };
        let t = start.elapsed().as_secs_f64();
        on_iter(&e, t);
        log.push(e);
        wall.push(t);
    })?;
    let mut model = init;
    unflatten_into(&mut model, &result.x)?;
    Ok(TrainOutcome {
        model,
        log,
        wall,
        termination: result.termination,
        preflight: report,
    })
}

/// Builds pairs and the initial model, then trains.
pub fn train(images: &[Image], cfg: &TrainConfig, on_iter: impl FnMut(&TrainLogEntry, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = make_pairs(images, cfg)?;
    let clean: Vec<Image> = pairs.iter().map(|p| p.clean.clone()).collect();
    let init = initial_model(&clean, cfg)?;
    train_from(init, &pairs, cfg, on_iter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sigma255: f64,
    pub input_psnr: f64,
    pub output_psnr: f64,
    /// 3×3 Gaussian blur of the noisy input, for reference.
    pub blur_psnr: f64,
}

/// Mean PSNR of noisy and denoised images for every noise level. Noise for
/// image `i` at level index `j` is seeded from `(seed, j, i)`.
pub fn evaluate(
    model: &DgcrfModel,
    images: &[Image],
    sigma255_list: &[f64],
    seed: u64,
    quantize: bool,
) -> Result<Vec<EvalRow>> {
    model.validate()?;
    if images.is_empty() {
        return Err(Error::Param("no evaluation images".into()));
    }
    sigma255_list
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for (i, img) in images.iter().enumerate() {
                let noisy = add_gaussian_noise(img, s, derive_seed(seed, 100 + j as u64, i as u64), quantize)?;
                let out = denoise(&noisy, sigma2_of(s), model)?;
                a += psnr(&noisy, img, 1.0)?;
                b += psnr(&out, img, 1.0)?;
                c += psnr(&gaussian_blur3(&noisy), img, 1.0)?;
            }
            let n = images.len() as f64;
            Ok(EvalRow {
                sigma255: s,
                input_psnr: a / n,
                output_psnr: b / n,
                blur_psnr: c / n,
            })
        })
        .collect()
}
