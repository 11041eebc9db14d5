//! Zero-mean Gaussian mixture fitted by EM, used to initialize a bank.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::image::rng_from_seed;
use crate::par;

/// Ridge added to every fitted covariance.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Gmm {
    pub weights: Vec<f64>,
    /// Fitted covariances, each including [`COV_RIDGE`]`·I`.
    pub covariances: Vec<DMatrix<f64>>,
    /// Objective after each EM iteration (see [`fit_gmm`]).
    pub log_likelihood: Vec<f64>,
    pub reseeded: usize,
}

/// Minimum number of samples accepted for `k` components of dimension `n`.
pub fn min_corpus(k: usize, n: usize) -> usize {
    10 * k * n
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Component {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Component {
    fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numeric("mixture covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Component { chol, log_norm })
    }

    /// Log densities of every column of `data`.
    fn log_density(&self, data: &DMatrix<f64>) -> Vec<f64> {
        let mut z = data.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z.column_iter().map(|c| self.log_norm - 0.5 * c.norm_squared()).collect()
    }
}

/// Responsibility-weighted scatter `Σ_i r_i x_i x_iᵀ`.
fn scatter(data: &DMatrix<f64>, resp: &[f64]) -> DMatrix<f64> {
    let mut weighted = data.clone();
    for (mut c, r) in weighted.column_iter_mut().zip(resp) {
        c *= *r;
    }
    &weighted * data.transpose()
}

/// Fits a `k`-component zero-mean mixture to the columns of `data`.
///
/// Starts from a hard assignment of every sample to the seeded draw it is
/// most aligned with (by `|cos|`, so `x` and `−x` go together). The M-step
/// uses `C_k = (S_k + a I) / N_k` with `a = ε·N/k`, which is the exact
/// maximizer of the likelihood plus the fixed penalty `−½ a Σ_k tr(C_k⁻¹)`;
/// that penalized value is what `log_likelihood` records, and it never
/// decreases. The returned covariances are `S_k / N_k + εI` from the final
/// responsibilities. A component whose responsibility mass drops below one
/// sample is re-seeded from the pooled covariance.
pub fn fit_gmm(data: &DMatrix<f64>, k: usize, em_iters: usize, seed: u64) -> Result<Gmm> {
    let (n, count) = data.shape();
    if k == 0 || n == 0 {
        return Err(Error::Param("mixture needs at least one component and dimension".into()));
    }
    let need = min_corpus(k, n);
    if count < need {
        return Err(Error::Param(format!(
            "corpus has {count} samples; {k} components of dimension {n} need at least {need}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("corpus contains non-finite values".into()));
    }
    let penalty = COV_RIDGE * count as f64 / k as f64;
    let eye = DMatrix::<f64>::identity(n, n);
    let pooled = scatter(data, &vec![1.0; count]) / count as f64 + &eye * COV_RIDGE;

    // hard initial assignment
    let mut rng = rng_from_seed(seed);
    let seeds: Vec<DVector<f64>> = sample(&mut rng, count, k)
        .into_iter()
        .map(|i| {
            let c = data.column(i).into_owned();
            let norm = c.norm();
            if norm > 0.0 {
                c / norm
            } else {
                c
            }
        })
        .collect();
    let labels = par::map_indexed(count, |i| {
        let x = data.column(i);
        let mut best = (i % k, 0.0);
        for (j, s) in seeds.iter().enumerate() {
            let a = s.dot(&x).abs();
            if a > best.1 {
                best = (j, a);
            }
        }
        best.0
    });
    let mut resp = DMatrix::<f64>::zeros(k, count);
    for (i, &l) in labels.iter().enumerate() {
        resp[(l, i)] = 1.0;
    }

    let mut weights = vec![0.0; k];
    let mut covs = vec![pooled.clone(); k];
    let mut reseeded = 0;
    let mut trace = Vec::with_capacity(em_iters);
    let m_step = |resp: &DMatrix<f64>, weights: &mut [f64], covs: &mut [DMatrix<f64>], reseeded: &mut usize| {
        for j in 0..k {
            let r: Vec<f64> = resp.row(j).iter().copied().collect();
            let mass: f64 = r.iter().sum();
            if mass < 1.0 {
                log::info!("mixture component {j} collapsed (mass {mass:.3}); re-seeding");
                *reseeded += 1;
                weights[j] = 1.0 / k as f64;
                covs[j] = pooled.clone();
            } else {
                weights[j] = mass / count as f64;
                covs[j] = (scatter(data, &r) + &eye * penalty) / mass;
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    };
    m_step(&resp, &mut weights, &mut covs, &mut reseeded);

    for _ in 0..em_iters {
        let comps = covs.iter().map(Component::new).collect::<Result<Vec<_>>>()?;
        let logp: Vec<Vec<f64>> = par::map_indexed(k, |j| {
            let lw = weights[j].ln();
            comps[j].log_density(data).into_iter().map(|v| v + lw).collect()
        });
        let mut ll = 0.0;
        for i in 0..count {
            let col: Vec<f64> = (0..k).map(|j| logp[j][i]).collect();
            let lse = logsumexp(&col);
            ll += lse;
            for j in 0..k {
                resp[(j, i)] = (col[j] - lse).exp();
            }
        }
        let pen: f64 = comps
            .iter()
            .map(|c| -0.5 * penalty * c.chol.inverse().trace())
            .sum();
        trace.push(ll + pen);
        m_step(&resp, &mut weights, &mut covs, &mut reseeded);
    }

    let covariances = (0..k)
        .map(|j| {
            let r: Vec<f64> = resp.row(j).iter().copied().collect();
            let mass: f64 = r.iter().sum();
            if mass < 1.0 {
                pooled.clone()
            } else {
                scatter(data, &r) / mass + &eye * COV_RIDGE
            }
        })
        .collect();
    Ok(Gmm {
        weights,
        covariances,
        log_likelihood: trace,
        reseeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn draw(cov_factors: &[DMatrix<f64>], weights: &[f64], count: usize, seed: u64) -> DMatrix<f64> {
        use rand::Rng;
        let n = cov_factors[0].nrows();
        let mut rng = rng_from_seed(seed);
        let mut out = DMatrix::zeros(n, count);
        for i in 0..count {
            let u: f64 = rng.gen();
            let j = if u < weights[0] { 0 } else { 1 };
            let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            out.set_column(i, &(&cov_factors[j] * e));
        }
        out
    }

    #[test]
    fn single_component_is_sample_covariance() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 2.0, 0.0, -0.3, 0.1, 0.7]);
        let data = draw(&[l.clone(), l], &[1.0, 0.0], 500, 4);
        let g = fit_gmm(&data, 1, 5, 0).unwrap();
        let expect = &data * data.transpose() / 500.0 + DMatrix::identity(3, 3) * COV_RIDGE;
        assert!((&g.covariances[0] - expect).abs().max() < 1e-12);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn recovers_two_components() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.2, 0.2, 0.2]));
        let b = DMatrix::from_row_slice(4, 4, &[
            0.2, 0.0, 0.0, 0.0, //
            0.0, 0.2, 0.0, 0.0, //
            0.0, 0.0, 2.0, 0.0, //
            0.0, 0.0, 1.5, 1.0,
        ]);
        let data = draw(&[a.clone(), b.clone()], &[0.4, 0.6], 20000, 9);
        let g = fit_gmm(&data, 2, 60, 1).unwrap();
        let truth = [&a * a.transpose(), &b * b.transpose()];
        for t in &truth {
            let best = g
                .covariances
                .iter()
                .map(|c| (c - t).norm() / t.norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "relative Frobenius error {best}");
        }
    }

    #[test]
    fn objective_never_decreases() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.3, 0.5, 0.2]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 1.2, 0.1, 0.9]));
        let data = draw(&[a, b], &[0.5, 0.5], 2000, 2);
        let g = fit_gmm(&data, 3, 25, 7).unwrap();
        for w in g.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn seeded_fit_is_deterministic() {
        let a = DMatrix::<f64>::identity(2, 2);
        let data = draw(&[a.clone(), a * 2.0], &[0.5, 0.5], 400, 1);
        let x = fit_gmm(&data, 2, 5, 3).unwrap();
        let y = fit_gmm(&data, 2, 5, 3).unwrap();
        assert_eq!(x.covariances, y.covariances);
        assert_eq!(x.log_likelihood, y.log_likelihood);
    }

    #[test]
    fn small_corpus_rejected() {
        let data = DMatrix::<f64>::zeros(4, 79);
        let err = fit_gmm(&data, 2, 1, 0).unwrap_err();
        assert!(err.to_string().contains("80"), "{err}");
    }
}
