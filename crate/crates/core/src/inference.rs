//! Unrolled half-quadratic-splitting inference.
//!
//! Each HQS layer alternates two exact minimizations of
//! `J(Y, z, β) = Σ (1/σ²)(Y−X)² + β Σ_p ‖y_p − z_p‖² + Σ_p z_pᵀ G Σ_p⁻¹ G z_p`:
//!
//! * patch inference: `z_p = y_p − G (βΣ_p + G + εI)⁻¹ G y_p`
//! * image formation: `Y = (X/σ² + β S) / (1/σ² + β N)` per pixel, where `S`
//!   sums the covering `z` entries and `N` counts them.
//!
//! The ridge `ε = 1e-6 · tr(βΣ_p + G) / d²` keeps `βΣ_p + G` invertible when
//! `Σ_p` annihilates the constant vector. Writing it as a ridge on the
//! potential, `Σ'_p = Σ_p + (ε/β) I`, the patch update is the exact minimizer
//! of the `z`-subproblem for `Σ'_p`; [`hqs_cost`] and the oracles use that
//! same `Σ'_p`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::DgcrfModel;
use crate::par;
use crate::patch::{MeanProjection, PatchGeometry, PatchSet};
use crate::dense;
use crate::pgnet::{pgnet_select, PairwisePotentials, PgnetOutput, PotentialBank, SelectionFactors};

/// Relative ridge added to `βΣ + G` before factorization.
pub const RIDGE_REL: f64 = 1e-6;

/// Patches per work unit in the layer kernels. Fixed so that results do not
/// depend on the thread count.
pub const PATCH_CHUNK: usize = 256;

/// Largest image the dense oracles accept (in pixels).
pub const ORACLE_MAX_PIXELS: usize = 256;

/// β multipliers of the HQS layers, in units of `1/σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct HqsSchedule {
    multipliers: Vec<f64>,
}

impl HqsSchedule {
    pub const STANDARD: [f64; 6] = [1.0, 4.0, 8.0, 16.0, 32.0, 64.0];

    pub fn new(multipliers: Vec<f64>) -> Result<Self> {
        let s = HqsSchedule { multipliers };
        s.validate()?;
        Ok(s)
    }

    pub(crate) fn new_unchecked(multipliers: Vec<f64>) -> Self {
        HqsSchedule { multipliers }
    }

    /// `[1, 4, 8, 16, 32, 64]`.
    pub fn standard() -> Self {
        HqsSchedule {
            multipliers: Self::STANDARD.to_vec(),
        }
    }

    /// The same multiplier repeated `t` times.
    pub fn constant(multiplier: f64, t: usize) -> Result<Self> {
        Self::new(vec![multiplier; t])
    }

    /// First `t` entries; beyond the last entry the multiplier keeps doubling.
    pub fn truncated(&self, t: usize) -> Self {
        let mut m: Vec<f64> = self.multipliers.iter().copied().take(t).collect();
        while m.len() < t {
            let last = m.last().copied().unwrap_or(0.5);
            m.push(last * 2.0);
        }
        HqsSchedule { multipliers: m }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.multipliers.iter().find(|m| !(**m > 0.0) || !m.is_finite()) {
            return Err(Error::Param(format!("β multipliers must be positive, got {m}")));
        }
        if self.multipliers.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Param("β multipliers must be non-decreasing".into()));
        }
        Ok(())
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    pub fn len(&self) -> usize {
        self.multipliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multipliers.is_empty()
    }

    /// Absolute β values for noise variance `sigma2`.
    pub fn resolve(&self, sigma2: f64) -> Vec<f64> {
        self.multipliers.iter().map(|m| m / sigma2).collect()
    }
}

fn trace_of(sig: &[f64], n: usize) -> f64 {
    (0..n).map(|i| sig[i * n + i]).sum()
}

/// `ε` for the patch-inference system `βΣ + G + εI`.
pub fn pi_ridge(sig: &[f64], n: usize, beta: f64, ridge_rel: f64) -> f64 {
    ridge_rel * (beta * trace_of(sig, n) + (n as f64 - 1.0)) / n as f64
}

/// `βΣ + G + εI` for a column-major `Σ`.
fn pi_matrix(sig: &[f64], n: usize, beta: f64, ridge_rel: f64) -> DMatrix<f64> {
    let eps = pi_ridge(sig, n, beta, ridge_rel);
    let inv_n = 1.0 / n as f64;
    DMatrix::from_fn(n, n, |i, j| {
        let g = if i == j { 1.0 - inv_n + eps } else { -inv_n };
        beta * sig[j * n + i] + g
    })
}

pub(crate) fn pi_factor(
    sig: &[f64],
    n: usize,
    beta: f64,
    ridge_rel: f64,
) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(pi_matrix(sig, n, beta, ridge_rel))
}

fn centered(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

/// Potential `Σ + (ε/β) I` for which the ridged patch update is the exact
/// `z`-subproblem minimizer.
pub fn effective_potential(sigma: &DMatrix<f64>, beta: f64, ridge_rel: f64) -> DMatrix<f64> {
    let n = sigma.nrows();
    let eps = pi_ridge(sigma.as_slice(), n, beta, ridge_rel);
    sigma + DMatrix::identity(n, n) * (eps / beta)
}

/// Patch-inference update for one patch.
pub fn patch_inference(
    y: &DVector<f64>,
    sigma: &DMatrix<f64>,
    beta: f64,
    ridge_rel: f64,
) -> Result<DVector<f64>> {
    let n = y.len();
    if sigma.shape() != (n, n) {
        return Err(Error::Param(format!(
            "potential shape {:?} does not match patch length {n}",
            sigma.shape()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Param(format!("β must be positive, got {beta}")));
    }
    let chol = pi_factor(sigma.as_slice(), n, beta, ridge_rel)
        .ok_or_else(|| Error::Numeric("βΣ + G + εI is not positive definite".into()))?;
    let w = chol.solve(&centered(y));
    Ok(y - centered(&w))
}

/// Cholesky factors of `βΣ_p + G + εI` for every patch of a layer, kept in
/// the chunked entry-major layout the batched kernels use.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFactors {
    n: usize,
    /// Per chunk of [`PATCH_CHUNK`] patches: `len x d²(d²+1)/2`, column `e`
    /// holding packed entry `e` of every patch's lower factor.
    chunks: Vec<DMatrix<f64>>,
}

impl PatchFactors {
    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.nrows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub(crate) fn chunk(&self, c: usize) -> &DMatrix<f64> {
        &self.chunks[c]
    }

    /// Dense lower factor of patch `p`.
    pub fn lower(&self, p: usize) -> DMatrix<f64> {
        let c = &self.chunks[p / PATCH_CHUNK];
        let q = p % PATCH_CHUNK;
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i >= j {
                c[(q, dense::packed_index(i, j))]
            } else {
                0.0
            }
        })
    }
}

/// Intermediates of one HQS layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub beta: f64,
    /// `Y^t`, the layer input.
    pub input: Image,
    /// Auxiliary patches `z_p`, `d² x P`.
    pub z: DMatrix<f64>,
    /// `(βΣ_p + G + εI)⁻¹ G y_p`, `d² x P`.
    pub w: DMatrix<f64>,
    pub factors: PatchFactors,
    /// `Y^{t+1}`.
    pub output: Image,
}

struct ChunkOut {
    lower: DMatrix<f64>,
    /// `len x d²`.
    w: DMatrix<f64>,
    z: DMatrix<f64>,
}

/// Patch inference for patches `start..start+len` of `y`. `sig` holds the
/// potentials entry-major (`len x d²(d²+1)/2`, packed lower triangles) and is
/// overwritten with the factors.
fn pi_chunk(
    y: &DMatrix<f64>,
    start: usize,
    mut sig: DMatrix<f64>,
    beta: f64,
    ridge_rel: f64,
) -> Result<ChunkOut> {
    let n = y.nrows();
    let len = sig.nrows();
    let inv_n = 1.0 / n as f64;
    let mut eps = vec![0.0; len];
    for i in 0..n {
        eps.iter_mut()
            .zip(sig.column(dense::packed_index(i, i)).iter())
            .for_each(|(e, s)| *e += s);
    }
    eps.iter_mut()
        .for_each(|e| *e = ridge_rel * (beta * *e + (n as f64 - 1.0)) / n as f64);
    for i in 0..n {
        for j in 0..=i {
            let mut col = sig.column_mut(dense::packed_index(i, j));
            if i == j {
                col.iter_mut().zip(&eps).for_each(|(v, e)| *v = beta * *v + 1.0 - inv_n + e);
            } else {
                col.iter_mut().for_each(|v| *v = beta * *v - inv_n);
            }
        }
    }
    let l = sig.as_mut_slice();
    dense::batch_cholesky(l, n, len).map_err(|q| {
        Error::Numeric(format!("patch {}: βΣ + G + εI is not positive definite", start + q))
    })?;
    let yt = y.columns(start, len).transpose();
    let mut w = yt.clone();
    dense::batch_center(w.as_mut_slice(), n, len);
    dense::batch_forward(sig.as_slice(), n, len, w.as_mut_slice());
    dense::batch_backward_t(sig.as_slice(), n, len, w.as_mut_slice());
    let mut gw = w.clone();
    dense::batch_center(gw.as_mut_slice(), n, len);
    Ok(ChunkOut {
        lower: sig,
        w,
        z: yt - gw,
    })
}

fn assemble_layer(
    yt: &Image,
    x: &Image,
    geometry: &PatchGeometry,
    sigma2: f64,
    beta: f64,
    chunks: Vec<ChunkOut>,
) -> LayerCache {
    let n = geometry.dim();
    let np = geometry.num_patches();
    let mut z = DMatrix::zeros(n, np);
    let mut w = DMatrix::zeros(n, np);
    let mut lowers = Vec::with_capacity(chunks.len());
    for (c, out) in chunks.into_iter().enumerate() {
        let start = c * PATCH_CHUNK;
        let len = out.z.nrows();
        z.columns_mut(start, len).copy_from(&out.z.transpose());
        w.columns_mut(start, len).copy_from(&out.w.transpose());
        lowers.push(out.lower);
    }
    let output = image_formation_from(geometry, &geometry.counts(), &z, x, sigma2, beta);
    LayerCache {
        beta,
        input: yt.clone(),
        z,
        w,
        factors: PatchFactors { n, chunks: lowers },
        output,
    }
}

fn chunk_count(np: usize) -> usize {
    np.div_ceil(PATCH_CHUNK)
}

fn chunk_range(c: usize, np: usize) -> (usize, usize) {
    let start = c * PATCH_CHUNK;
    (start, PATCH_CHUNK.min(np - start))
}

/// Image-formation update from auxiliary patches stored column-wise.
pub fn image_formation_from(
    geometry: &PatchGeometry,
    counts: &[u32],
    z: &DMatrix<f64>,
    x: &Image,
    sigma2: f64,
    beta: f64,
) -> Image {
    let s = geometry.fold(z);
    let bs2 = beta * sigma2;
    let pixels = s
        .iter()
        .zip(counts)
        .zip(x.pixels())
        .map(|((&s, &n), &xv)| (xv + bs2 * s) / (1.0 + bs2 * f64::from(n)))
        .collect();
    Image::from_raw(x.height(), x.width(), pixels)
}

/// Image-formation update: the per-pixel minimizer of the `Y`-subproblem.
pub fn image_formation(zset: &PatchSet, x: &Image, sigma2: f64, beta: f64) -> Result<Image> {
    let g = &zset.geometry;
    if g.height != x.height() || g.width != x.width() {
        return Err(Error::Param(format!(
            "patch geometry {}x{} does not match image {}x{}",
            g.height,
            g.width,
            x.height(),
            x.width()
        )));
    }
    Ok(image_formation_from(g, &zset.counts, &zset.patches, x, sigma2, beta))
}

/// One HQS layer: patch inference on every patch of `yt`, then image formation.
pub fn hqs_layer(
    yt: &Image,
    potentials: &PairwisePotentials,
    x: &Image,
    sigma2: f64,
    beta: f64,
    ridge_rel: f64,
) -> Result<LayerCache> {
    let n = potentials.dim();
    let d = (n as f64).sqrt().round() as usize;
    let geometry = PatchGeometry::for_image(yt, d)?;
    if potentials.len() != geometry.num_patches() || !yt.same_shape(x) {
        return Err(Error::Param(format!(
            "{} potentials for {} patches",
            potentials.len(),
            geometry.num_patches()
        )));
    }
    let np = geometry.num_patches();
    let y = geometry.extract(yt.pixels());
    let chunks = par::try_map_indexed(chunk_count(np), |c| {
        let (start, len) = chunk_range(c, np);
        let sig = DMatrix::from_fn(len, dense::packed_len(n), |q, e| {
            let (i, j) = dense::packed_pair(e);
            potentials.slice(start + q)[j * n + i]
        });
        pi_chunk(&y, start, sig, beta, ridge_rel)
    })?;
    Ok(assemble_layer(yt, x, &geometry, sigma2, beta, chunks))
}

/// [`hqs_layer`] with `Σ_p = Σ_k γ_kp Ψ_k` formed chunk by chunk from the
/// packed bank (see [`PotentialBank::psi_packed`]) instead of a full stack.
pub fn hqs_layer_mixture(
    yt: &Image,
    gamma: &DMatrix<f64>,
    psi_packed: &DMatrix<f64>,
    x: &Image,
    sigma2: f64,
    beta: f64,
    ridge_rel: f64,
) -> Result<LayerCache> {
    let m = psi_packed.nrows();
    let n = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    let d = (n as f64).sqrt().round() as usize;
    let geometry = PatchGeometry::for_image(yt, d)?;
    let np = geometry.num_patches();
    if dense::packed_len(n) != m || gamma.shape() != (psi_packed.ncols(), np) || !yt.same_shape(x) {
        return Err(Error::Param(format!(
            "weights {:?} and packed bank {:?} do not fit {np} patches",
            gamma.shape(),
            psi_packed.shape()
        )));
    }
    let y = geometry.extract(yt.pixels());
    let psi_t = psi_packed.transpose();
    let chunks = par::try_map_indexed(chunk_count(np), |c| {
        let (start, len) = chunk_range(c, np);
        let sig = gamma.columns(start, len).transpose() * &psi_t;
        pi_chunk(&y, start, sig, beta, ridge_rel)
    })?;
    Ok(assemble_layer(yt, x, &geometry, sigma2, beta, chunks))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Image,
    pub sigma2: f64,
    pub geometry: PatchGeometry,
    pub counts: Vec<u32>,
    /// One entry per bank, indexed like `DgcrfModel::banks`.
    pub selection: Vec<Option<SelectionFactors>>,
    /// One entry per PgNet evaluation.
    pub pgnets: Vec<PgnetOutput>,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// PgNet output feeding layer `t`.
    pub fn pgnet_for_layer(&self, t: usize, cascade: bool) -> &PgnetOutput {
        &self.pgnets[if cascade { t } else { 0 }]
    }
}

fn check_inputs(x: &Image, sigma2: f64, model: &DgcrfModel) -> Result<PatchGeometry> {
    model.validate()?;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Param(format!("noise variance must be positive, got {sigma2}")));
    }
    PatchGeometry::for_image(x, model.arch.d)
}

/// Per-bank state shared by the layers of one forward pass.
struct BankState {
    factors: SelectionFactors,
    psi_packed: DMatrix<f64>,
}

fn bank_state<'a>(
    states: &'a mut [Option<BankState>],
    b: usize,
    bank: &PotentialBank,
    sigma2: f64,
) -> Result<&'a BankState> {
    if states[b].is_none() {
        states[b] = Some(BankState {
            factors: SelectionFactors::new(bank, sigma2)?,
            psi_packed: bank.psi_packed(false),
        });
    }
    Ok(states[b].as_ref().expect("populated above"))
}

/// Runs the network, handing every layer (and the PgNet run before it, if
/// any) to `on_layer`, which returns the next layer input.
fn run_network(
    x: &Image,
    sigma2: f64,
    model: &DgcrfModel,
    mut on_layer: impl FnMut(Option<PgnetOutput>, LayerCache) -> Image,
) -> Result<(Image, Vec<Option<BankState>>)> {
    let arch = &model.arch;
    let mut states: Vec<Option<BankState>> = (0..model.banks.len()).map(|_| None).collect();
    let mut first_gamma: Option<DMatrix<f64>> = None;
    let mut y = x.clone();
    for (t, beta) in arch.schedule.resolve(sigma2).into_iter().enumerate() {
        let b = model.bank_index(t);
        let st = bank_state(&mut states, b, &model.banks[b], sigma2)?;
        let fresh = if arch.cascade || t == 0 {
            Some(pgnet_select(&y, &model.banks[b], model.biases_for_layer(t), &st.factors, arch.softmax)?)
        } else {
            None
        };
        let gamma = match (&fresh, &first_gamma) {
            (Some(pg), _) => &pg.gamma,
            (None, Some(g)) => g,
            (None, None) => unreachable!("layer 0 always runs a PgNet"),
        };
        let layer = hqs_layer_mixture(&y, gamma, &st.psi_packed, x, sigma2, beta, RIDGE_REL)?;
        if !arch.cascade && t == 0 {
            first_gamma = fresh.as_ref().map(|pg| pg.gamma.clone());
        }
        y = on_layer(fresh, layer);
    }
    Ok((y, states))
}

/// Full network: PgNet(s) followed by `T` HQS layers. Returns the estimate and
/// the cache for [`crate::grad::backprop_dgcrf`].
pub fn dgcrf_forward(x: &Image, sigma2: f64, model: &DgcrfModel) -> Result<(Image, ForwardCache)> {
    let geometry = check_inputs(x, sigma2, model)?;
    let mut pgnets = Vec::with_capacity(model.arch.num_pgnets());
    let mut layers = Vec::with_capacity(model.arch.layers());
    let (y, states) = run_network(x, sigma2, model, |pg, layer| {
        pgnets.extend(pg);
        let out = layer.output.clone();
        layers.push(layer);
        out
    })?;
    let cache = ForwardCache {
        x: x.clone(),
        sigma2,
        counts: geometry.counts(),
        geometry,
        selection: states.into_iter().map(|s| s.map(|s| s.factors)).collect(),
        pgnets,
        layers,
    };
    Ok((y, cache))
}

/// Forward pass that keeps only what the next layer needs.
pub fn denoise(x: &Image, sigma2: f64, model: &DgcrfModel) -> Result<Image> {
    check_inputs(x, sigma2, model)?;
    Ok(run_network(x, sigma2, model, |_, layer| layer.output)?.0)
}

fn geometry_for(y: &Image, potentials: &PairwisePotentials) -> Result<PatchGeometry> {
    let n = potentials.dim();
    let d = (n as f64).sqrt().round() as usize;
    let g = PatchGeometry::for_image(y, d)?;
    if g.num_patches() != potentials.len() {
        return Err(Error::Param(format!(
            "{} potentials for {} patches",
            potentials.len(),
            g.num_patches()
        )));
    }
    Ok(g)
}

fn data_term(y: &Image, x: &Image, sigma2: f64) -> Result<f64> {
    if !y.same_shape(x) {
        return Err(Error::Param("estimate and input differ in shape".into()));
    }
    Ok(y.pixels()
        .iter()
        .zip(x.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / sigma2)
}

/// Ridge used by [`gcrf_energy`] and [`direct_solve_oracle`]: `1e-6·tr(Σ)/d²`.
pub fn energy_ridge(sigma: &[f64], n: usize) -> f64 {
    RIDGE_REL * trace_of(sigma, n) / n as f64
}

/// Σ_p (G v_p)ᵀ (Σ_p + ridge_p I)⁻¹ (G v_p) over the columns of `v`.
fn prior_term(
    v: &DMatrix<f64>,
    potentials: &PairwisePotentials,
    ridge: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<f64> {
    let n = potentials.dim();
    let terms = par::try_map_indexed(v.ncols(), |p| {
        let sig = potentials.slice(p);
        let m = DMatrix::from_column_slice(n, n, sig) + DMatrix::identity(n, n) * ridge(sig);
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::Numeric(format!("patch {p}: ridged potential is not positive definite")))?;
        let gv = centered(&v.column(p).into_owned());
        Ok::<_, Error>(gv.dot(&chol.solve(&gv)))
    })?;
    Ok(terms.iter().sum())
}

/// GCRF objective `Σ (1/σ²)(Y−X)² + Σ_p y_pᵀ G (Σ_p + ρ_p I)⁻¹ G y_p` with
/// `ρ_p` = [`energy_ridge`].
pub fn gcrf_energy(y: &Image, x: &Image, potentials: &PairwisePotentials, sigma2: f64) -> Result<f64> {
    let g = geometry_for(y, potentials)?;
    let n = potentials.dim();
    let data = data_term(y, x, sigma2)?;
    Ok(data + prior_term(&g.extract(y.pixels()), potentials, |s| energy_ridge(s, n))?)
}

/// GCRF objective evaluated with the HQS-consistent potentials `Σ + (ε/β)I`.
pub fn gcrf_energy_at_beta(
    y: &Image,
    x: &Image,
    potentials: &PairwisePotentials,
    sigma2: f64,
    beta: f64,
) -> Result<f64> {
    let g = geometry_for(y, potentials)?;
    let n = potentials.dim();
    let data = data_term(y, x, sigma2)?;
    Ok(data + prior_term(&g.extract(y.pixels()), potentials, |s| pi_ridge(s, n, beta, RIDGE_REL) / beta)?)
}

/// HQS cost `J(Y, z, β)` with the HQS-consistent potentials.
pub fn hqs_cost(
    y: &Image,
    z: &DMatrix<f64>,
    potentials: &PairwisePotentials,
    x: &Image,
    sigma2: f64,
    beta: f64,
) -> Result<f64> {
    let g = geometry_for(y, potentials)?;
    let n = potentials.dim();
    if z.shape() != (n, g.num_patches()) {
        return Err(Error::Param(format!("auxiliary patches have shape {:?}", z.shape())));
    }
    let data = data_term(y, x, sigma2)?;
    let coupling = beta * (g.extract(y.pixels()) - z).norm_squared();
    let prior = prior_term(z, potentials, |s| pi_ridge(s, n, beta, RIDGE_REL) / beta)?;
    Ok(data + coupling + prior)
}

/// Minimizes `(1/σ²)‖Y − X‖² + Σ_p y_pᵀ Q_p y_p` by a dense solve.
fn solve_patch_quadratic(
    x: &Image,
    sigma2: f64,
    geometry: &PatchGeometry,
    q: &[DMatrix<f64>],
) -> Result<Image> {
    let npix = x.len();
    if npix > ORACLE_MAX_PIXELS {
        return Err(Error::Param(format!(
            "dense oracle is limited to {ORACLE_MAX_PIXELS} pixels, image has {npix}"
        )));
    }
    let d = geometry.d;
    let mut h = DMatrix::identity(npix, npix) / sigma2;
    for (p, qp) in q.iter().enumerate() {
        let (r0, c0) = geometry.position(p);
        let idx: Vec<usize> = (0..d * d)
            .map(|a| (r0 + a / d) * x.width() + c0 + a % d)
            .collect();
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                h[(ia, ib)] += qp[(a, b)];
            }
        }
    }
    let rhs = DVector::from_iterator(npix, x.pixels().iter().map(|v| v / sigma2));
    let chol = Cholesky::new(h).ok_or_else(|| Error::Numeric("oracle system is not positive definite".into()))?;
    Image::new(x.height(), x.width(), chol.solve(&rhs).as_slice().to_vec())
}

/// Exact minimizer of [`gcrf_energy`] by assembling the full-image system.
/// Only for small images (at most [`ORACLE_MAX_PIXELS`]).
pub fn direct_solve_oracle(x: &Image, potentials: &PairwisePotentials, sigma2: f64) -> Result<Image> {
    let g = geometry_for(x, potentials)?;
    if x.len() > ORACLE_MAX_PIXELS {
        return Err(Error::Param(format!(
            "dense oracle is limited to {ORACLE_MAX_PIXELS} pixels, image has {}",
            x.len()
        )));
    }
    let n = potentials.dim();
    let gm = MeanProjection::new(g.d).dense();
    let q = (0..potentials.len())
        .map(|p| {
            let sig = potentials.slice(p);
            let m = DMatrix::from_column_slice(n, n, sig) + DMatrix::identity(n, n) * energy_ridge(sig, n);
            let inv = m
                .try_inverse()
                .ok_or_else(|| Error::Numeric(format!("patch {p}: potential is singular")))?;
            Ok(&gm * inv * &gm)
        })
        .collect::<Result<Vec<_>>>()?;
    solve_patch_quadratic(x, sigma2, &g, &q)
}

/// Joint minimizer of `J(·, ·, β)` over `Y` and `z`. Eliminating `z` leaves
/// the patch precision `β G (βΣ_p + G + εI)⁻¹ G`.
pub fn hqs_fixed_point_oracle(
    x: &Image,
    potentials: &PairwisePotentials,
    sigma2: f64,
    beta: f64,
) -> Result<Image> {
    let g = geometry_for(x, potentials)?;
    if x.len() > ORACLE_MAX_PIXELS {
        return Err(Error::Param(format!(
            "dense oracle is limited to {ORACLE_MAX_PIXELS} pixels, image has {}",
            x.len()
        )));
    }
    let n = potentials.dim();
    let gm = MeanProjection::new(g.d).dense();
    let q = (0..potentials.len())
        .map(|p| {
            let inv = pi_matrix(potentials.slice(p), n, beta, RIDGE_REL)
                .try_inverse()
                .ok_or_else(|| Error::Numeric(format!("patch {p}: βΣ + G + εI is singular")))?;
            Ok(&gm * inv * &gm * beta)
        })
        .collect::<Result<Vec<_>>>()?;
    solve_patch_quadratic(x, sigma2, &g, &q)
}
