//! Reverse-mode derivatives of every layer and of the whole network.
//!
//! Layer conventions (`A_p = βΣ_p + G + εI`, `u_p = A_p⁻¹ G ∂z_p`,
//! `w_p = A_p⁻¹ G y_p`):
//!
//! * patch inference: `∂y_p = ∂z_p − G u_p`,
//!   `∂Σ_p = β sym(u_p w_pᵀ) + (1e-6·β/d²)(u_p·w_p) I` (the second term is
//!   the ridge's dependence on `tr Σ_p`);
//! * combination: `∂γ_kp = ⟨Ψ_k, ∂Σ_p⟩`, `∂Ψ_k = Σ_p γ_kp ∂Σ_p`;
//! * selection: softmax Jacobian to `∂s`, then with `v_kp = (W_k + σ²I)⁻¹ x̄_p`,
//!   `∂W_k = ½ Σ_p ∂s_kp v_kp v_kpᵀ`, `∂b_k = Σ_p ∂s_kp`,
//!   `∂x̄_p = −Σ_k ∂s_kp v_kp`;
//! * Cholesky parametrization: `∂P_k = lower(2 ∂W_k P_k)`, likewise `∂R_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::dense;
use crate::inference::{pi_factor, ForwardCache, PatchFactors, PATCH_CHUNK, RIDGE_REL};
use crate::model::DgcrfModel;
use crate::par;
use crate::patch::PatchGeometry;
use crate::pgnet::{PgnetOutput, PotentialBank, SelectionFactors, SoftmaxVariant};

/// Gradients for one [`PotentialBank`].
#[derive(Debug, Clone, PartialEq)]
pub struct BankGradients {
    pub d_w: Vec<DMatrix<f64>>,
    pub d_psi: Vec<DMatrix<f64>>,
    pub d_b: Vec<f64>,
    /// Lower-triangular, filled by [`BankGradients::finish`].
    pub d_p: Vec<DMatrix<f64>>,
    pub d_r: Vec<DMatrix<f64>>,
}

impl BankGradients {
    pub fn zeros(n: usize, k: usize) -> Self {
        BankGradients {
            d_w: vec![DMatrix::zeros(n, n); k],
            d_psi: vec![DMatrix::zeros(n, n); k],
            d_b: vec![0.0; k],
            d_p: vec![DMatrix::zeros(n, n); k],
            d_r: vec![DMatrix::zeros(n, n); k],
        }
    }

    /// Applies the chain rule through `W = PPᵀ`, `Ψ = RRᵀ`.
    pub fn finish(&mut self, bank: &PotentialBank) {
        for k in 0..bank.k() {
            self.d_p[k] = factor_gradient(&self.d_w[k], &bank.factors_w[k]);
            self.d_r[k] = factor_gradient(&self.d_psi[k], &bank.factors_psi[k]);
        }
    }
}

/// `lower((G + Gᵀ) F)`: gradient of `L(F Fᵀ)` with respect to a
/// lower-triangular `F`, given `G = ∂L/∂(FFᵀ)`.
pub fn factor_gradient(d_outer: &DMatrix<f64>, factor: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = (d_outer + d_outer.transpose()) * factor;
    g.fill_upper_triangle(0.0, 1);
    g
}

/// Gradients of a scalar loss with respect to every model parameter and the
/// network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub banks: Vec<BankGradients>,
    pub layer_biases: Vec<Vec<f64>>,
    pub d_x: Image,
}

impl ModelGradients {
    pub fn zeros(model: &DgcrfModel, height: usize, width: usize) -> Self {
        let n = model.arch.d * model.arch.d;
        let k = model.arch.k;
        ModelGradients {
            banks: vec![BankGradients::zeros(n, k); model.banks.len()],
            layer_biases: vec![vec![0.0; k]; model.layer_biases.len()],
            d_x: Image::from_raw(height, width, vec![0.0; height * width]),
        }
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn centered(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

/// Backprop through `Σ_p = Σ_k γ_kp Ψ_k`.
///
/// `d_sigma` is `d⁴ x P` (column `p` is `vec(∂L/∂Σ_p)`), `gamma` is `K x P`.
/// Returns `∂L/∂γ` (`K x P`) and `∂L/∂Ψ_k`.
pub fn backprop_combination(
    d_sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    bank: &PotentialBank,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = bank.dim();
    let d_gamma = bank.psi_stack().transpose() * d_sigma;
    let d_psi_stack = d_sigma * gamma.transpose();
    let d_psi = (0..bank.k())
        .map(|k| DMatrix::from_column_slice(n, n, d_psi_stack.column(k).as_slice()))
        .collect();
    (d_gamma, d_psi)
}

/// Backprop through one patch-inference update, factorizing afresh.
/// Returns `(∂L/∂y, ∂L/∂Σ)`.
pub fn backprop_patch_inference(
    dz: &DVector<f64>,
    y: &DVector<f64>,
    sigma: &DMatrix<f64>,
    beta: f64,
    ridge_rel: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = y.len();
    let chol = pi_factor(sigma.as_slice(), n, beta, ridge_rel)
        .ok_or_else(|| Error::Numeric("βΣ + G + εI is not positive definite".into()))?;
    let w = chol.solve(&centered(y));
    let u = chol.solve(&centered(dz));
    let dy = dz - centered(&u);
    let mut ds = sym(&(&u * w.transpose())) * beta;
    let diag = ridge_rel * beta / n as f64 * u.dot(&w);
    for i in 0..n {
        ds[(i, i)] += diag;
    }
    Ok((dy, ds))
}

/// Selection-network gradients for one PgNet evaluation.
#[derive(Debug, Clone)]
pub struct SelectionGradients {
    pub d_w: Vec<DMatrix<f64>>,
    pub d_b: Vec<f64>,
    /// `d² x P`.
    pub d_xbar: DMatrix<f64>,
}

/// Backprop from `∂L/∂γ` (`K x P`) to `W_k`, `b_k` and the centered patches
/// of one PgNet evaluation.
pub fn backprop_selection(
    d_gamma: &DMatrix<f64>,
    pg: &PgnetOutput,
    factors: &SelectionFactors,
    variant: SoftmaxVariant,
) -> SelectionGradients {
    let (k, np) = pg.gamma.shape();
    let n = pg.xbar.nrows();
    let mut ds = DMatrix::zeros(k, np);
    for p in 0..np {
        let g = pg.gamma.column(p);
        let dg = d_gamma.column(p);
        let mean = g.dot(&dg);
        match variant {
            SoftmaxVariant::Exponential => {
                for kk in 0..k {
                    ds[(kk, p)] = g[kk] * (dg[kk] - mean);
                }
            }
            SoftmaxVariant::Plain => {
                let total = pg.scores.column(p).sum();
                for kk in 0..k {
                    ds[(kk, p)] = (dg[kk] - mean) / total;
                }
            }
        }
    }
    let ds_t = ds.transpose();
    let per_k = par::map_indexed(k, |kk| {
        // vᵀ rows: (W_k + σ²I)⁻¹ x̄_p = L⁻ᵀ (L⁻¹ x̄_p)
        let mut v = pg.whitened[kk].clone();
        factors.unwhiten_mut(kk, &mut v);
        let mut scaled = v.clone();
        let dsk = ds_t.column(kk);
        let dsk = dsk.as_slice();
        for mut col in scaled.column_iter_mut() {
            col.as_mut_slice().iter_mut().zip(dsk).for_each(|(x, s)| *x *= s);
        }
        let d_w = (scaled.transpose() * &v) * 0.5;
        (d_w, scaled)
    });
    let mut d_xbar_t = DMatrix::zeros(np, n);
    let mut d_w = Vec::with_capacity(k);
    for (dw, scaled) in per_k {
        d_xbar_t -= scaled;
        d_w.push(dw);
    }
    let d_xbar = d_xbar_t.transpose();
    let d_b = (0..k).map(|kk| ds.row(kk).sum()).collect();
    SelectionGradients { d_w, d_b, d_xbar }
}

/// Transpose of the image-formation map. Returns `(∂L/∂z as d² x P, ∂L/∂X)`.
pub fn backprop_image_formation(
    d_y: &Image,
    geometry: &PatchGeometry,
    counts: &[u32],
    sigma2: f64,
    beta: f64,
) -> (DMatrix<f64>, Image) {
    let bs2 = beta * sigma2;
    let mut d_s = Vec::with_capacity(d_y.len());
    let mut d_x = Vec::with_capacity(d_y.len());
    for (&g, &c) in d_y.pixels().iter().zip(counts) {
        let denom = 1.0 + bs2 * f64::from(c);
        d_s.push(bs2 * g / denom);
        d_x.push(g / denom);
    }
    (
        geometry.extract(&d_s),
        Image::from_raw(d_y.height(), d_y.width(), d_x),
    )
}

/// Output of [`backprop_pi_mixture`].
struct PiGradients {
    /// `∂L/∂y`, `d² x P`.
    d_y: DMatrix<f64>,
    /// `∂L/∂γ`, `K x P`.
    d_gamma: DMatrix<f64>,
    /// `Σ_p γ_kp ∂Σ_p`, packed lower triangles, `d²(d²+1)/2 x K`.
    d_psi: DMatrix<f64>,
}

/// Backprop through one cached patch-inference layer whose potentials were
/// `Σ_p = Σ_k γ_kp Ψ_k`. Works chunk by chunk so the `∂Σ_p` are never held
/// for the whole image.
fn backprop_pi_mixture(
    dz: &DMatrix<f64>,
    w: &DMatrix<f64>,
    factors: &PatchFactors,
    gamma: &DMatrix<f64>,
    psi_weighted: &DMatrix<f64>,
    beta: f64,
) -> PiGradients {
    let (n, np) = dz.shape();
    let m = dense::packed_len(n);
    let k = gamma.nrows();
    let diag_scale = RIDGE_REL * beta / n as f64;
    let chunks = par::map_indexed(np.div_ceil(PATCH_CHUNK), |c| {
        let start = c * PATCH_CHUNK;
        let len = PATCH_CHUNK.min(np - start);
        let l = factors.chunk(c).as_slice();
        let dzt = dz.columns(start, len).transpose();
        let wt = w.columns(start, len).transpose();
        let mut u = dzt.clone();
        dense::batch_center(u.as_mut_slice(), n, len);
        dense::batch_forward(l, n, len, u.as_mut_slice());
        dense::batch_backward_t(l, n, len, u.as_mut_slice());
        let mut gu = u.clone();
        dense::batch_center(gu.as_mut_slice(), n, len);
        let d_y = dzt - gu;
        let mut diag = vec![0.0; len];
        for i in 0..n {
            for ((d, a), b) in diag.iter_mut().zip(u.column(i).iter()).zip(wt.column(i).iter()) {
                *d += a * b;
            }
        }
        diag.iter_mut().for_each(|d| *d *= diag_scale);
        let half_beta = 0.5 * beta;
        let mut d_sigma = DMatrix::<f64>::zeros(len, m);
        for i in 0..n {
            for j in 0..=i {
                let (ui, uj, wi, wj) = (u.column(i), u.column(j), wt.column(i), wt.column(j));
                let mut col = d_sigma.column_mut(dense::packed_index(i, j));
                for q in 0..len {
                    col[q] = half_beta * (ui[q] * wj[q] + uj[q] * wi[q]);
                }
                if i == j {
                    col.iter_mut().zip(&diag).for_each(|(v, d)| *v += d);
                }
            }
        }
        let gamma_t = gamma.columns(start, len).transpose();
        let d_gamma = (&d_sigma * psi_weighted).transpose();
        let d_psi = d_sigma.transpose() * gamma_t;
        (d_y.transpose(), d_gamma, d_psi)
    });
    let mut d_y = DMatrix::zeros(n, np);
    let mut d_gamma = DMatrix::zeros(k, np);
    let mut d_psi = DMatrix::zeros(m, k);
    for (c, (dy, dg, dp)) in chunks.into_iter().enumerate() {
        d_y.columns_mut(c * PATCH_CHUNK, dy.ncols()).copy_from(&dy);
        d_gamma.columns_mut(c * PATCH_CHUNK, dg.ncols()).copy_from(&dg);
        d_psi += dp;
    }
    PiGradients { d_y, d_gamma, d_psi }
}

fn unpack_symmetric(packed: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        packed[if i >= j { dense::packed_index(i, j) } else { dense::packed_index(j, i) }]
    })
}

fn add_into(dst: &mut Image, src: &[f64]) {
    for (a, b) in dst.pixels_mut().iter_mut().zip(src) {
        *a += b;
    }
}

/// Backprop through the PgNet feeding layer `t`: accumulates bank gradients
/// and returns the gradient with respect to the PgNet's input image.
fn backprop_pgnet(
    t: usize,
    d_gamma: &DMatrix<f64>,
    d_psi_packed: &DMatrix<f64>,
    cache: &ForwardCache,
    model: &DgcrfModel,
    grads: &mut ModelGradients,
) -> Result<Vec<f64>> {
    let pg = cache.pgnet_for_layer(t, model.arch.cascade);
    let b = model.bank_index(t);
    let bank = &model.banks[b];
    let n = bank.dim();
    let factors = cache.selection[b]
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("cache has no selection factors for bank {b}")))?;
    let sel = backprop_selection(d_gamma, pg, factors, model.arch.softmax);
    let bg = &mut grads.banks[b];
    for k in 0..bank.k() {
        bg.d_psi[k] += unpack_symmetric(d_psi_packed.column(k).as_slice(), n);
        bg.d_w[k] += &sel.d_w[k];
    }
    let bias_target = if t > 0 && model.arch.num_layer_biases() > 0 {
        &mut grads.layer_biases[t - 1]
    } else {
        &mut grads.banks[b].d_b
    };
    for (acc, v) in bias_target.iter_mut().zip(&sel.d_b) {
        *acc += v;
    }
    let mut d_patches = sel.d_xbar;
    crate::patch::MeanProjection::new(model.arch.d).apply_columns(&mut d_patches);
    Ok(cache.geometry.fold(&d_patches))
}

/// Full reverse pass. `d_yhat` is `∂L/∂Ŷ`; the cache must come from
/// [`crate::inference::dgcrf_forward`] on the same model.
pub fn backprop_dgcrf(d_yhat: &Image, cache: &ForwardCache, model: &DgcrfModel) -> Result<ModelGradients> {
    let arch = &model.arch;
    if cache.layers.len() != arch.layers()
        || cache.pgnets.len() != arch.num_pgnets()
        || cache.selection.len() != model.banks.len()
    {
        return Err(Error::Contract(format!(
            "cache holds {} layers / {} PgNets; model expects {} / {}",
            cache.layers.len(),
            cache.pgnets.len(),
            arch.layers(),
            arch.num_pgnets()
        )));
    }
    if !d_yhat.same_shape(&cache.x) {
        return Err(Error::Contract("output gradient does not match the cached input shape".into()));
    }
    let (h, w) = (cache.x.height(), cache.x.width());
    let mut grads = ModelGradients::zeros(model, h, w);
    let mut d_y = d_yhat.clone();
    let mut shared: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut psi_weighted: Vec<Option<DMatrix<f64>>> = vec![None; model.banks.len()];
    let sigma2 = cache.sigma2;

    for t in (0..cache.layers.len()).rev() {
        let layer = &cache.layers[t];
        let b = model.bank_index(t);
        let psi_w = psi_weighted[b].get_or_insert_with(|| model.banks[b].psi_packed(true));
        let (d_z, d_x_direct) =
            backprop_image_formation(&d_y, &cache.geometry, &cache.counts, sigma2, layer.beta);
        add_into(&mut grads.d_x, d_x_direct.pixels());
        let gamma = &cache.pgnet_for_layer(t, arch.cascade).gamma;
        let pi = backprop_pi_mixture(&d_z, &layer.w, &layer.factors, gamma, psi_w, layer.beta);
        let mut next = Image::from_raw(h, w, cache.geometry.fold(&pi.d_y));
        if arch.cascade {
            let d_in = backprop_pgnet(t, &pi.d_gamma, &pi.d_psi, cache, model, &mut grads)?;
            add_into(&mut next, &d_in);
        } else {
            match shared.as_mut() {
                Some((dg, dp)) => {
                    *dg += pi.d_gamma;
                    *dp += pi.d_psi;
                }
                None => shared = Some((pi.d_gamma, pi.d_psi)),
            }
        }
        d_y = next;
    }
    if let Some((d_gamma, d_psi)) = shared {
        let d_in = backprop_pgnet(0, &d_gamma, &d_psi, cache, model, &mut grads)?;
        add_into(&mut d_y, &d_in);
    }
    add_into(&mut grads.d_x, d_y.pixels());
    for (bg, bank) in grads.banks.iter_mut().zip(&model.banks) {
        bg.finish(bank);
    }
    Ok(grads)
}
