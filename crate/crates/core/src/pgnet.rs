//! Parameter generation network.
//!
//! Mean-subtracted patches are scored against `K` quadratic forms,
//! `s_k = -½ x̄ᵀ(W_k + σ²I)⁻¹x̄ + b_k`, the scores are turned into convex
//! weights `γ`, and each patch receives the pairwise potential
//! `Σ = Σ_k γ_k Ψ_k`. `W_k = P_k P_kᵀ` and `Ψ_k = R_k R_kᵀ` are held through
//! their lower-triangular factors, so both stay PSD under any update.

use nalgebra::{DMatrix, DVector};

use crate::dense;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::patch::{extract_patches, MeanProjection, PatchSet};

/// How selection scores become combination weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxVariant {
    /// `γ_k = exp(s_k) / Σ exp(s_p)`.
    #[default]
    Exponential,
    /// `γ_k = s_k / Σ s_p`. Only for ablations: weights may turn negative.
    Plain,
}

/// Learnable parameters `{P_k, R_k, b_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialBank {
    pub d: usize,
    pub factors_w: Vec<DMatrix<f64>>,
    pub factors_psi: Vec<DMatrix<f64>>,
    pub biases: Vec<f64>,
}

impl PotentialBank {
    pub fn new(
        d: usize,
        factors_w: Vec<DMatrix<f64>>,
        factors_psi: Vec<DMatrix<f64>>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        let bank = PotentialBank {
            d,
            factors_w,
            factors_psi,
            biases,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Bank with all factors equal to the identity and zero biases.
    pub fn identity(d: usize, k: usize) -> Self {
        let n = d * d;
        PotentialBank {
            d,
            factors_w: vec![DMatrix::identity(n, n); k],
            factors_psi: vec![DMatrix::identity(n, n); k],
            biases: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.d * self.d
    }

    /// Checks shapes, lower-triangularity and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let k = self.k();
        if k == 0 {
            return Err(Error::Contract("bank needs at least one component".into()));
        }
        if self.factors_w.len() != k || self.factors_psi.len() != k {
            return Err(Error::Contract(format!(
                "bank has {} W factors, {} Ψ factors and {} biases",
                self.factors_w.len(),
                self.factors_psi.len(),
                k
            )));
        }
        for (name, set) in [("P", &self.factors_w), ("R", &self.factors_psi)] {
            for (i, f) in set.iter().enumerate() {
                if f.shape() != (n, n) {
                    return Err(Error::Contract(format!(
                        "{name}_{i} has shape {:?}, expected {n}x{n}",
                        f.shape()
                    )));
                }
                if !is_lower_triangular(f) {
                    return Err(Error::Contract(format!(
                        "{name}_{i} has a nonzero strict upper triangle"
                    )));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("{name}_{i} has non-finite entries")));
                }
            }
        }
        if self.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite bias".into()));
        }
        Ok(())
    }

    pub fn w(&self, k: usize) -> DMatrix<f64> {
        let p = &self.factors_w[k];
        p * p.transpose()
    }

    pub fn psi(&self, k: usize) -> DMatrix<f64> {
        let r = &self.factors_psi[k];
        r * r.transpose()
    }

    /// `d⁴ x K` matrix whose column `k` is `vec(Ψ_k)`.
    pub fn psi_stack(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n * n, self.k());
        for k in 0..self.k() {
            out.column_mut(k).copy_from_slice(self.psi(k).as_slice());
        }
        out
    }

    /// Packed lower triangles of `Ψ_k`, one column per component
    /// (`d²(d²+1)/2 x K`). With `weighted`, off-diagonal entries are doubled
    /// so that a column dot product with a packed symmetric `M` is `⟨Ψ_k, M⟩`.
    pub fn psi_packed(&self, weighted: bool) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(dense::packed_len(n), self.k());
        for k in 0..self.k() {
            let psi = self.psi(k);
            let mut col = out.column_mut(k);
            for i in 0..n {
                for j in 0..=i {
                    let f = if weighted && i != j { 2.0 } else { 1.0 };
                    col[dense::packed_index(i, j)] = f * psi[(i, j)];
                }
            }
        }
        out
    }
}

pub fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    (0..m.ncols()).all(|j| (0..j.min(m.nrows())).all(|i| m[(i, j)] == 0.0))
}

/// Factorizations of `W_k + σ²I` for one bank at one noise level.
///
/// Built once and shared read-only by every patch and every layer that uses
/// the same bank.
#[derive(Debug, Clone)]
pub struct SelectionFactors {
    pub sigma2: f64,
    n: usize,
    /// Row-major lower factors.
    lowers: Vec<Vec<f64>>,
}

impl SelectionFactors {
    pub fn new(bank: &PotentialBank, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Param(format!("noise variance must be positive, got {sigma2}")));
        }
        let n = bank.dim();
        let lowers = par::try_map_indexed(bank.k(), |k| {
            let w = bank.w(k);
            let mut m: Vec<f64> = (0..n * n)
                .map(|ij| w[(ij / n, ij % n)] + if ij / n == ij % n { sigma2 } else { 0.0 })
                .collect();
            if dense::cholesky_in_place(&mut m, n) {
                Ok(m)
            } else {
                Err(Error::Numeric(format!(
                    "W_{k} + σ²I is not positive definite (σ² = {sigma2})"
                )))
            }
        })?;
        Ok(SelectionFactors { sigma2, n, lowers })
    }

    pub fn k(&self) -> usize {
        self.lowers.len()
    }

    /// Scores for a single centered patch.
    pub fn scores(&self, xbar: &DVector<f64>, biases: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.k(), |k, _| {
            let mut y = xbar.as_slice().to_vec();
            dense::forward_subst(&self.lowers[k], self.n, &mut y);
            -0.5 * dense::dot(&y, &y) + biases[k]
        })
    }

    /// `L_k⁻¹ x̄_p` for every column of `xbar` (`d² x P`), per component.
    /// Each result is transposed: `P x d²`, row `p` belongs to patch `p`.
    pub fn whiten(&self, xbar: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let xt = xbar.transpose();
        let np = xt.nrows();
        par::map_indexed(self.k(), |k| {
            let mut y = xt.clone();
            dense::shared_forward(&self.lowers[k], self.n, np, y.as_mut_slice());
            y
        })
    }

    /// Scores from [`SelectionFactors::whiten`] output; `K x P`.
    pub fn scores_from_whitened(&self, whitened: &[DMatrix<f64>], biases: &[f64]) -> DMatrix<f64> {
        let np = whitened.first().map_or(0, |w| w.nrows());
        let mut out = DMatrix::zeros(self.k(), np);
        for (k, y) in whitened.iter().enumerate() {
            let mut acc = vec![0.0; np];
            for col in y.column_iter() {
                acc.iter_mut().zip(col.iter()).for_each(|(a, v)| *a += v * v);
            }
            for (p, a) in acc.iter().enumerate() {
                out[(k, p)] = -0.5 * a + biases[k];
            }
        }
        out
    }

    /// Scores for every column of `xbar`; returns a `K x P` matrix.
    pub fn scores_batch(&self, xbar: &DMatrix<f64>, biases: &[f64]) -> DMatrix<f64> {
        self.scores_from_whitened(&self.whiten(xbar), biases)
    }

    /// Applies `L_k⁻ᵀ` to every row of a `P x d²` matrix in place. Turns
    /// whitened patches into `(W_k + σ²I)⁻¹ x̄`, still transposed.
    pub fn unwhiten_mut(&self, k: usize, m: &mut DMatrix<f64>) {
        let np = m.nrows();
        dense::shared_backward_t(&self.lowers[k], self.n, np, m.as_mut_slice());
    }

    /// `(W_k + σ²I)⁻¹ rhs`.
    pub fn solve(&self, k: usize, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        for mut c in out.column_iter_mut() {
            dense::chol_solve(&self.lowers[k], self.n, c.as_mut_slice());
        }
        out
    }

    pub fn log_det(&self, k: usize) -> f64 {
        2.0 * (0..self.n).map(|i| self.lowers[k][i * self.n + i].ln()).sum::<f64>()
    }
}

/// Quadratic selection scores for one centered patch, factorizing afresh.
pub fn quadratic_scores(xbar: &DVector<f64>, bank: &PotentialBank, sigma2: f64) -> Result<DVector<f64>> {
    if xbar.len() != bank.dim() {
        return Err(Error::Param(format!(
            "patch has {} entries, bank expects {}",
            xbar.len(),
            bank.dim()
        )));
    }
    Ok(SelectionFactors::new(bank, sigma2)?.scores(xbar, &bank.biases))
}

/// Turns scores into combination weights.
pub fn softmax_weights(s: &DVector<f64>, variant: SoftmaxVariant) -> Result<DVector<f64>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite selection score".into()));
    }
    match variant {
        SoftmaxVariant::Exponential => {
            let max = s.max();
            let e = s.map(|v| (v - max).exp());
            let z = e.sum();
            Ok(e / z)
        }
        SoftmaxVariant::Plain => {
            let z = s.sum();
            if z == 0.0 || !z.is_finite() {
                return Err(Error::Numeric("selection scores sum to zero".into()));
            }
            Ok(s / z)
        }
    }
}

/// [`softmax_weights`] applied to every column of a `K x P` score matrix.
pub fn softmax_columns(scores: &DMatrix<f64>, variant: SoftmaxVariant) -> Result<DMatrix<f64>> {
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "patch {}: non-finite selection score",
            i / scores.nrows().max(1)
        )));
    }
    let mut gamma = scores.clone();
    for (p, mut col) in gamma.column_iter_mut().enumerate() {
        match variant {
            SoftmaxVariant::Exponential => {
                let max = col.max();
                col.apply(|v| *v = (*v - max).exp());
                let z = col.sum();
                col /= z;
            }
            SoftmaxVariant::Plain => {
                let z = col.sum();
                if z == 0.0 || !z.is_finite() {
                    return Err(Error::Numeric(format!("patch {p}: selection scores sum to zero")));
                }
                col /= z;
            }
        }
    }
    Ok(gamma)
}

/// `Σ = Σ_k γ_k Ψ_k`.
pub fn combine_potentials(gamma: &DVector<f64>, bank: &PotentialBank) -> DMatrix<f64> {
    let n = bank.dim();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..bank.k() {
        out += bank.psi(k) * gamma[k];
    }
    out
}

/// Per-patch pairwise potentials `Σ_p`, stored as a `d⁴ x P` matrix whose
/// column `p` is `vec(Σ_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePotentials {
    dim: usize,
    stack: DMatrix<f64>,
}

impl PairwisePotentials {
    pub fn new(dim: usize, stack: DMatrix<f64>) -> Result<Self> {
        if stack.nrows() != dim * dim {
            return Err(Error::Param(format!(
                "potential stack has {} rows, expected {}",
                stack.nrows(),
                dim * dim
            )));
        }
        Ok(PairwisePotentials { dim, stack })
    }

    pub fn from_matrices(mats: &[DMatrix<f64>]) -> Result<Self> {
        let dim = mats.first().map(|m| m.nrows()).unwrap_or(0);
        let mut stack = DMatrix::zeros(dim * dim, mats.len());
        for (p, m) in mats.iter().enumerate() {
            if m.shape() != (dim, dim) {
                return Err(Error::Param(format!("potential {p} has shape {:?}", m.shape())));
            }
            stack.column_mut(p).copy_from_slice(m.as_slice());
        }
        Ok(PairwisePotentials { dim, stack })
    }

    /// The same matrix repeated for `count` patches.
    pub fn repeated(m: &DMatrix<f64>, count: usize) -> Self {
        let dim = m.nrows();
        let stack = DMatrix::from_fn(dim * dim, count, |i, _| m.as_slice()[i]);
        PairwisePotentials { dim, stack }
    }

    /// Patch dimension `d²`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.stack.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column-major entries of `Σ_p`.
    pub fn slice(&self, p: usize) -> &[f64] {
        let n2 = self.dim * self.dim;
        &self.stack.as_slice()[p * n2..(p + 1) * n2]
    }

    pub fn get(&self, p: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.dim, self.slice(p))
    }

    pub fn stack(&self) -> &DMatrix<f64> {
        &self.stack
    }
}

/// Selection intermediates of one PgNet evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct PgnetOutput {
    /// Raw patches of the input image.
    pub patches: PatchSet,
    /// Mean-subtracted patches, `d² x P`.
    pub xbar: DMatrix<f64>,
    /// `L_k⁻¹ x̄` per component, where `L_kL_kᵀ = W_k + σ²I`; each is
    /// `P x d²` (transposed).
    pub whitened: Vec<DMatrix<f64>>,
    /// `K x P`.
    pub scores: DMatrix<f64>,
    /// `K x P`.
    pub gamma: DMatrix<f64>,
}

impl PgnetOutput {
    pub fn len(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `Σ_p` as a dense stack.
    pub fn potentials(&self, bank: &PotentialBank) -> PairwisePotentials {
        PairwisePotentials {
            dim: bank.dim(),
            stack: bank.psi_stack() * &self.gamma,
        }
    }

    pub fn sigma(&self, p: usize, bank: &PotentialBank) -> DMatrix<f64> {
        combine_potentials(&self.gamma.column(p).into_owned(), bank)
    }
}

/// PgNet forward pass with exponential softmax and the bank's own biases.
pub fn pgnet_forward(img: &Image, bank: &PotentialBank, sigma2: f64) -> Result<(PairwisePotentials, PgnetOutput)> {
    let factors = SelectionFactors::new(bank, sigma2)?;
    pgnet_forward_with(img, bank, &bank.biases, &factors, SoftmaxVariant::Exponential)
}

/// PgNet forward pass with explicit biases, precomputed factors and variant.
pub fn pgnet_forward_with(
    img: &Image,
    bank: &PotentialBank,
    biases: &[f64],
    factors: &SelectionFactors,
    variant: SoftmaxVariant,
) -> Result<(PairwisePotentials, PgnetOutput)> {
    let out = pgnet_select(img, bank, biases, factors, variant)?;
    Ok((out.potentials(bank), out))
}

/// Scores and combination weights only; the potentials are left implicit.
pub fn pgnet_select(
    img: &Image,
    bank: &PotentialBank,
    biases: &[f64],
    factors: &SelectionFactors,
    variant: SoftmaxVariant,
) -> Result<PgnetOutput> {
    if biases.len() != bank.k() || factors.k() != bank.k() {
        return Err(Error::Contract(format!(
            "{} biases and {} factorizations for {} components",
            biases.len(),
            factors.k(),
            bank.k()
        )));
    }
    let patches = extract_patches(img, bank.d)?;
    let mut xbar = patches.patches.clone();
    MeanProjection::new(bank.d).apply_columns(&mut xbar);
    let whitened = factors.whiten(&xbar);
    let scores = factors.scores_from_whitened(&whitened, biases);
    let gamma = softmax_columns(&scores, variant)?;
    Ok(PgnetOutput {
        patches,
        xbar,
        whitened,
        scores,
        gamma,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::image::rng_from_seed;
    use rand::Rng;

    pub(crate) fn random_bank(d: usize, k: usize, seed: u64) -> PotentialBank {
        let mut rng = rng_from_seed(seed);
        let n = d * d;
        let tri = |rng: &mut rand_chacha::ChaCha8Rng| {
            DMatrix::from_fn(n, n, |i, j| {
                if i > j {
                    rng.gen_range(-0.3..0.3)
                } else if i == j {
                    rng.gen_range(0.2..1.0)
                } else {
                    0.0
                }
            })
        };
        let fw = (0..k).map(|_| tri(&mut rng)).collect();
        let fp = (0..k).map(|_| tri(&mut rng)).collect();
        let b = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PotentialBank::new(d, fw, fp, b).unwrap()
    }

    #[test]
    fn zero_w_gives_unit_inverse() {
        let n = 4;
        let bank = PotentialBank::new(
            2,
            vec![DMatrix::zeros(n, n)],
            vec![DMatrix::identity(n, n)],
            vec![0.5],
        )
        .unwrap();
        let xbar = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
        let s = quadratic_scores(&xbar, &bank, 1.0).unwrap();
        assert!((s[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_patch_scores_are_biases() {
        let bank = random_bank(2, 3, 1);
        let s = quadratic_scores(&DVector::zeros(4), &bank, 0.1).unwrap();
        assert_eq!(s.as_slice(), bank.biases.as_slice());
    }

    #[test]
    fn scores_are_even() {
        let bank = random_bank(3, 4, 2);
        let x = DVector::from_fn(9, |i, _| (i as f64 * 0.7).sin());
        let a = quadratic_scores(&x, &bank, 0.05).unwrap();
        let b = quadratic_scores(&(-&x), &bank, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let bank = random_bank(2, 2, 3);
        assert!(matches!(quadratic_scores(&DVector::zeros(4), &bank, 0.0), Err(Error::Param(_))));
    }

    #[test]
    fn nonfinite_bank_fails_factorization() {
        let mut bank = random_bank(2, 2, 3);
        bank.factors_w[1][(0, 0)] = f64::NAN;
        assert!(quadratic_scores(&DVector::zeros(4), &bank, 0.1).is_err());
    }

    #[test]
    fn softmax_properties() {
        let s = DVector::from_vec(vec![0.3, 0.3, 0.3]);
        let g = softmax_weights(&s, SoftmaxVariant::Exponential).unwrap();
        assert!(g.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = DVector::from_vec(vec![800.0, 0.0, 0.0, 0.0]);
        let g = softmax_weights(&s, SoftmaxVariant::Exponential).unwrap();
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 0.0);

        let s = DVector::from_vec(vec![0.1, -2.0, 1.5]);
        let g1 = softmax_weights(&s, SoftmaxVariant::Exponential).unwrap();
        let g2 = softmax_weights(&s.add_scalar(37.0), SoftmaxVariant::Exponential).unwrap();
        assert!((g1 - g2).amax() < 1e-15);
    }

    #[test]
    fn plain_variant_normalizes() {
        let s = DVector::from_vec(vec![1.0, 3.0]);
        let g = softmax_weights(&s, SoftmaxVariant::Plain).unwrap();
        assert_eq!(g.as_slice(), &[0.25, 0.75]);
        assert!(softmax_weights(&DVector::from_vec(vec![1.0, -1.0]), SoftmaxVariant::Plain).is_err());
    }

    #[test]
    fn combination_examples() {
        let bank = random_bank(2, 1, 4);
        let s = combine_potentials(&DVector::from_vec(vec![1.0]), &bank);
        assert_eq!(s, bank.psi(0));

        let bank = random_bank(2, 3, 5);
        let s = combine_potentials(&DVector::from_vec(vec![0.0, 1.0, 0.0]), &bank);
        assert_eq!(s, bank.psi(1));

        let n = 4;
        let bank = PotentialBank::new(
            2,
            vec![DMatrix::identity(n, n); 2],
            vec![DMatrix::identity(n, n), DMatrix::identity(n, n) * 3f64.sqrt()],
            vec![0.0, 0.0],
        )
        .unwrap();
        let s = combine_potentials(&DVector::from_vec(vec![0.5, 0.5]), &bank);
        assert!((s - DMatrix::identity(n, n) * 2.0).amax() < 1e-15);
    }

    #[test]
    fn constant_image_shares_weights() {
        let bank = random_bank(3, 4, 6);
        let img = Image::filled(6, 7, 0.4).unwrap();
        let (sig, out) = pgnet_forward(&img, &bank, 0.01).unwrap();
        let g0 = out.gamma.column(0).into_owned();
        let expect = softmax_weights(&DVector::from_vec(bank.biases.clone()), SoftmaxVariant::Exponential).unwrap();
        assert!((&g0 - &expect).amax() < 1e-15);
        for p in 1..out.len() {
            assert_eq!(out.gamma.column(p), g0.column(0));
            assert_eq!(sig.slice(p), sig.slice(0));
        }
    }

    #[test]
    fn single_component_ignores_image() {
        let bank = random_bank(3, 1, 7);
        let img = Image::from_fn(5, 5, |r, c| ((r * 5 + c) as f64).sin()).unwrap();
        let (sig, out) = pgnet_forward(&img, &bank, 0.01).unwrap();
        for p in 0..out.len() {
            assert!((sig.get(p) - bank.psi(0)).amax() < 1e-14);
        }
    }

    #[test]
    fn cached_and_fresh_factorizations_agree() {
        let bank = random_bank(3, 4, 8);
        let img = Image::from_fn(6, 6, |r, c| ((r * 3 + c * 7) as f64 * 0.13).cos()).unwrap();
        let (_, out) = pgnet_forward(&img, &bank, 0.02).unwrap();
        for p in 0..out.len() {
            let fresh = quadratic_scores(&out.xbar.column(p).into_owned(), &bank, 0.02).unwrap();
            assert!((fresh - out.scores.column(p)).amax() < 1e-12);
        }
    }

    #[test]
    fn sign_flip_keeps_weights() {
        let bank = random_bank(3, 4, 9);
        let img = Image::from_fn(6, 8, |r, c| ((r * 11 + c * 3) as f64 * 0.21).sin() * 0.3 + 0.5).unwrap();
        let m = img.mean();
        let flipped = Image::new(6, 8, img.pixels().iter().map(|v| 2.0 * m - v).collect()).unwrap();
        let (_, a) = pgnet_forward(&img, &bank, 0.01).unwrap();
        let (_, b) = pgnet_forward(&flipped, &bank, 0.01).unwrap();
        assert!((a.gamma - b.gamma).amax() < 1e-12);
    }

    #[test]
    fn noise_damps_scores() {
        let bank = random_bank(3, 3, 10);
        let x = DVector::from_fn(9, |i, _| (i as f64 * 1.3).sin());
        let x = MeanProjection::new(3).apply(&x);
        let mut prev = vec![f64::INFINITY; 3];
        for s2 in [1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let s = quadratic_scores(&x, &bank, s2).unwrap();
            for k in 0..3 {
                let mag = (s[k] - bank.biases[k]).abs();
                assert!(mag <= prev[k]);
                prev[k] = mag;
            }
        }
    }

    #[test]
    fn matches_naive_recomputation() {
        let bank = random_bank(3, 4, 12);
        let img = Image::from_fn(8, 8, |r, c| ((r * 7 + c * 13) as f64 * 0.29).sin() * 0.4 + 0.5).unwrap();
        let (sig, _) = pgnet_forward(&img, &bank, 0.02).unwrap();
        let (n, k) = (9, 4);
        let mut p = 0;
        for r in 0..6 {
            for c in 0..6 {
                let mut x = [0.0; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        x[a * 3 + b] = img.get(r + a, c + b);
                    }
                }
                let m = x.iter().sum::<f64>() / 9.0;
                x.iter_mut().for_each(|v| *v -= m);
                let mut s = vec![0.0; k];
                for (kk, sk) in s.iter_mut().enumerate() {
                    let mut a = bank.w(kk);
                    for i in 0..n {
                        a[(i, i)] += 0.02;
                    }
                    let inv = a.try_inverse().unwrap();
                    let mut q = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            q += x[i] * inv[(i, j)] * x[j];
                        }
                    }
                    *sk = -0.5 * q + bank.biases[kk];
                }
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let got = sig.get(p);
                for i in 0..n {
                    for j in 0..n {
                        let expect: f64 = (0..k).map(|kk| e[kk] / z * bank.psi(kk)[(i, j)]).sum();
                        assert!((got[(i, j)] - expect).abs() < 1e-12);
                    }
                }
                p += 1;
            }
        }
    }

    #[test]
    fn packed_psi_inner_products() {
        let bank = random_bank(2, 3, 13);
        let w = bank.psi_packed(true);
        let plain = bank.psi_packed(false);
        let m = bank.psi(1) + bank.psi(2).transpose();
        let mut mp = DVector::zeros(10);
        for i in 0..4 {
            for j in 0..=i {
                mp[crate::dense::packed_index(i, j)] = m[(i, j)];
            }
        }
        for k in 0..3 {
            assert!((w.column(k).dot(&mp) - bank.psi(k).dot(&m)).abs() < 1e-12);
            assert_eq!(plain[(crate::dense::packed_index(3, 1), k)], bank.psi(k)[(3, 1)]);
        }
    }

    #[test]
    fn emitted_potentials_are_psd() {
        let bank = random_bank(3, 4, 11);
        let img = Image::from_fn(8, 8, |r, c| ((r * 5 + c * 9) as f64 * 0.17).sin()).unwrap();
        let (sig, _) = pgnet_forward(&img, &bank, 0.01).unwrap();
        let mut rng = rng_from_seed(5);
        for p in [0, 7, 20, 35] {
            let s = sig.get(p);
            assert!((&s - s.transpose()).amax() < 1e-10);
            for _ in 0..100 {
                let v = DVector::from_fn(9, |_, _| rng.gen_range(-1.0..1.0));
                assert!(v.dot(&(&s * &v)) >= -1e-8);
            }
        }
    }
}
