//! Central finite-difference verification of analytic gradients.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, rng_from_seed, Image};
use crate::inference::{dgcrf_forward, HqsSchedule};
use crate::model::{Architecture, DgcrfModel};
use crate::params::{flatten_gradients, flatten_model, param_blocks, unflatten_into, ParamBlock};
use crate::grad::backprop_dgcrf;
use crate::synth;
use crate::train::{psnr_loss, random_init};

/// Step sizes tried per element; the smallest error is kept.
pub const DEFAULT_EPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Pass threshold on the max relative error of a block.
pub const DEFAULT_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn all_pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>14}  {:>12}  result",
            "block", "analytic_norm", "numeric_norm", "max_rel_err"
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {:>12.3e}  {}",
                b.name,
                b.analytic_norm,
                b.numeric_norm,
                b.max_rel_err,
                if b.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `objective` around
/// `params`, element by element. Each element keeps the step size from `eps`
/// with the smallest relative error
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    objective: F,
    params: &[f64],
    analytic: &[f64],
    blocks: &[ParamBlock],
    eps: &[f64],
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let picks: Vec<Vec<usize>> = blocks.iter().map(|b| b.range.clone().collect()).collect();
    check_indices(objective, params, analytic, blocks, &picks, eps, tolerance)
}

/// Like [`finite_diff_check`] but only probes up to `per_block` seeded
/// coordinates of each block.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check_sampled<F>(
    objective: F,
    params: &[f64],
    analytic: &[f64],
    blocks: &[ParamBlock],
    per_block: usize,
    seed: u64,
    eps: &[f64],
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut rng = rng_from_seed(seed);
    let picks: Vec<Vec<usize>> = blocks
        .iter()
        .map(|b| {
            let len = b.range.len();
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, len, per_block.min(len))
                .into_iter()
                .map(|i| b.range.start + i)
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_indices(objective, params, analytic, blocks, &picks, eps, tolerance)
}

fn check_indices<F>(
    mut objective: F,
    params: &[f64],
    analytic: &[f64],
    blocks: &[ParamBlock],
    picks: &[Vec<usize>],
    eps: &[f64],
    tolerance: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Param("finite-difference steps must be positive".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Param("analytic gradient length differs from parameters".into()));
    }
    let mut theta = params.to_vec();
    let mut reports = Vec::with_capacity(blocks.len());
    for (block, idx) in blocks.iter().zip(picks) {
        let (mut an2, mut nu2, mut worst) = (0.0f64, 0.0f64, 0.0f64);
        for &i in idx {
            let a = analytic[i];
            let mut best = (f64::INFINITY, 0.0);
            for &e in eps {
                theta[i] = params[i] + e;
                let fp = objective(&theta)?;
                theta[i] = params[i] - e;
                let fm = objective(&theta)?;
                theta[i] = params[i];
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::Numeric(format!(
                        "objective is not finite near element {i} of {}",
                        block.name
                    )));
                }
                let num = (fp - fm) / (2.0 * e);
                let err = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
                if err < best.0 {
                    best = (err, num);
                }
            }
            an2 += a * a;
            nu2 += best.1 * best.1;
            worst = worst.max(best.0);
        }
        reports.push(BlockReport {
            name: block.name.clone(),
            analytic_norm: an2.sqrt(),
            numeric_norm: nu2.sqrt(),
            max_rel_err: worst,
            pass: worst <= tolerance,
        });
    }
    Ok(GradReport {
        tolerance,
        blocks: reports,
    })
}

/// Setup for the end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub seed: u64,
    pub size: usize,
    pub sigma255: f64,
    pub eps: Vec<f64>,
    pub tolerance: f64,
    pub cascade: bool,
    /// Scales the analytic gradient by `1 + c` before comparison.
    pub corrupt: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            d: 3,
            k: 4,
            t: 2,
            seed: 0,
            size: 12,
            sigma255: 25.0,
            eps: DEFAULT_EPS.to_vec(),
            tolerance: DEFAULT_TOL,
            cascade: true,
            corrupt: None,
        }
    }
}

/// Random model scaled to image statistics, a smooth clean image and its
/// noisy version.
pub fn gradcheck_problem(cfg: &GradcheckConfig) -> Result<(DgcrfModel, Image, Image)> {
    let mut arch = Architecture::new(cfg.d, cfg.k, HqsSchedule::standard().truncated(cfg.t));
    arch.cascade = cfg.cascade;
    let mut bank = random_init(cfg.k, cfg.d, cfg.seed, 0.5);
    // patch variances on a [0,1] image are O(1e-2)
    for f in bank.factors_w.iter_mut().chain(bank.factors_psi.iter_mut()) {
        *f *= 0.1;
    }
    let mut rng = rng_from_seed(cfg.seed ^ 0x9e37_79b9);
    for b in bank.biases.iter_mut() {
        *b = rng.gen_range(-1.0..1.0);
    }
    let model = DgcrfModel::from_bank(arch, bank)?;
    let clean = synth::scene(cfg.size, cfg.size, cfg.seed)?;
    let noisy = add_gaussian_noise(&clean, cfg.sigma255, cfg.seed.wrapping_add(1), false)?;
    Ok((model, clean, noisy))
}

/// Finite-difference check of `−PSNR(Ŷ, clean)` with respect to every
/// parameter block and the noisy input.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (model, clean, noisy) = gradcheck_problem(cfg)?;
    let sigma2 = (cfg.sigma255 / 255.0).powi(2);
    let (yhat, cache) = dgcrf_forward(&noisy, sigma2, &model)?;
    let loss = psnr_loss(&yhat, &clean)?;
    let grads = backprop_dgcrf(&loss.grad, &cache, &model)?;

    let theta = flatten_model(&model);
    let np = theta.len();
    let mut params = theta;
    params.extend_from_slice(noisy.pixels());
    let mut analytic = flatten_gradients(&grads);
    analytic.extend_from_slice(grads.d_x.pixels());
    if let Some(c) = cfg.corrupt {
        analytic.iter_mut().for_each(|g| *g *= 1.0 + c);
    }
    let mut blocks = param_blocks(&model.arch);
    blocks.push(ParamBlock {
        name: "X".into(),
        range: np..params.len(),
    });

    let mut probe = model.clone();
    let (h, w) = (noisy.height(), noisy.width());
    let objective = |v: &[f64]| -> Result<f64> {
        unflatten_into(&mut probe, &v[..np])?;
        let x = Image::new(h, w, v[np..].to_vec())?;
        let (y, _) = dgcrf_forward(&x, sigma2, &probe)?;
        Ok(psnr_loss(&y, &clean)?.loss)
    };
    finite_diff_check(objective, &params, &analytic, &blocks, &cfg.eps, cfg.tolerance)
}

/// Quadratic probe used to calibrate the checker: `f(θ) = θᵀAθ`.
pub fn quadratic_probe(a: &DMatrix<f64>) -> impl Fn(&[f64]) -> Result<f64> + '_ {
    move |v: &[f64]| {
        let x = nalgebra::DVector::from_column_slice(v);
        Ok(x.dot(&(a * &x)))
    }
}
