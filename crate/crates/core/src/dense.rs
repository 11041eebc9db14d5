//! Allocation-free kernels for the many small SPD systems.
//!
//! Matrices are row-major `n x n` slices. Factors are lower triangular with
//! a zeroed strict upper part.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place Cholesky `A = LLᵀ`. Returns `false` if `A` is not numerically
/// positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        let (done, rest) = a.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let row_j = &done[j * n..j * n + j];
            let s = row_i[j] - dot(&row_i[..j], row_j);
            row_i[j] = s / done[j * n + j];
        }
        let s = row_i[i] - dot(&row_i[..i], &row_i[..i]);
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        row_i[i] = s.sqrt();
        row_i[i + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
    true
}

/// `b ← L⁻¹ b`.
#[inline]
pub(crate) fn forward_subst(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        b[i] = (b[i] - dot(row, &b[..i])) / l[i * n + i];
    }
}

/// `b ← L⁻ᵀ b`.
#[inline]
pub(crate) fn backward_subst_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let xi = b[i] / l[i * n + i];
        b[i] = xi;
        for (bj, lij) in b[..i].iter_mut().zip(&l[i * n..i * n + i]) {
            *bj -= lij * xi;
        }
    }
}

/// `b ← (LLᵀ)⁻¹ b`.
#[inline]
pub(crate) fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    forward_subst(l, n, b);
    backward_subst_t(l, n, b);
}

/// Length of the packed lower triangle of an `n x n` matrix.
pub(crate) const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)`, `i >= j`, in the packed lower triangle.
#[inline]
pub(crate) const fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

// Batched kernels. A batch of `c` problems is stored entry-major: entry `e`
// of all problems occupies `buf[e*c..(e+1)*c]`, which is the layout of a
// column-major `c x entries` matrix. Every inner loop runs over the batch.

#[inline]
fn lane(buf: &[f64], e: usize, c: usize) -> &[f64] {
    &buf[e * c..(e + 1) * c]
}

/// Problems per tile. Kernels sweep the batch tile by tile so that the
/// working set of one tile stays in L1.
const TILE: usize = 64;

fn tiles(c: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..c).step_by(TILE).map(move |t| (t, (t + TILE).min(c)))
}

/// Batched in-place Cholesky of packed lower triangles (`packed_len(n)`
/// entries per problem). On failure returns the first problem index that is
/// not positive definite.
pub(crate) fn batch_cholesky(a: &mut [f64], n: usize, c: usize) -> Result<(), usize> {
    let mut acc = [0.0; TILE];
    let mut inv = [0.0; TILE];
    for (t0, t1) in tiles(c) {
        let w = t1 - t0;
        let at = |e: usize| e * c + t0..e * c + t1;
        for j in 0..n {
            let jj = packed_index(j, j);
            let acc = &mut acc[..w];
            acc.copy_from_slice(&a[at(jj)]);
            for k in 0..j {
                let ljk = &a[at(packed_index(j, k))];
                acc.iter_mut().zip(ljk).for_each(|(s, l)| *s -= l * l);
            }
            if let Some(q) = acc.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(t0 + q);
            }
            acc.iter_mut().for_each(|s| *s = s.sqrt());
            a[at(jj)].copy_from_slice(acc);
            inv[..w].iter_mut().zip(acc.iter()).for_each(|(r, d)| *r = 1.0 / d);
            for i in j + 1..n {
                let ij = packed_index(i, j);
                acc.copy_from_slice(&a[at(ij)]);
                for k in 0..j {
                    let lik = &a[at(packed_index(i, k))];
                    let ljk = &a[at(packed_index(j, k))];
                    for ((s, x), y) in acc.iter_mut().zip(lik).zip(ljk) {
                        *s -= x * y;
                    }
                }
                for ((dst, s), r) in a[at(ij)].iter_mut().zip(acc.iter()).zip(&inv[..w]) {
                    *dst = s * r;
                }
            }
        }
    }
    Ok(())
}

/// Batched `b ← L⁻¹ b` with per-problem packed factors; `b` holds `n`
/// entries per problem.
pub(crate) fn batch_forward(l: &[f64], n: usize, c: usize, b: &mut [f64]) {
    for (t0, t1) in tiles(c) {
        for i in 0..n {
            let (lo, hi) = b.split_at_mut(i * c);
            let bi = &mut hi[t0..t1];
            for j in 0..i {
                let lij = &l[packed_index(i, j) * c + t0..packed_index(i, j) * c + t1];
                for ((x, y), m) in bi.iter_mut().zip(&lo[j * c + t0..j * c + t1]).zip(lij) {
                    *x -= m * y;
                }
            }
            let d = &l[packed_index(i, i) * c + t0..packed_index(i, i) * c + t1];
            bi.iter_mut().zip(d).for_each(|(x, d)| *x /= d);
        }
    }
}

/// Batched `b ← L⁻ᵀ b` with per-problem packed factors.
pub(crate) fn batch_backward_t(l: &[f64], n: usize, c: usize, b: &mut [f64]) {
    for (t0, t1) in tiles(c) {
        for i in (0..n).rev() {
            let (lo, hi) = b.split_at_mut(i * c);
            let bi = &mut hi[t0..t1];
            let d = &l[packed_index(i, i) * c + t0..packed_index(i, i) * c + t1];
            bi.iter_mut().zip(d).for_each(|(x, d)| *x /= d);
            for j in 0..i {
                let lij = &l[packed_index(i, j) * c + t0..packed_index(i, j) * c + t1];
                for ((y, x), m) in lo[j * c + t0..j * c + t1].iter_mut().zip(bi.iter()).zip(lij) {
                    *y -= m * x;
                }
            }
        }
    }
}

/// Batched `b ← L⁻¹ b` with one row-major factor shared by all problems.
pub(crate) fn shared_forward(l: &[f64], n: usize, c: usize, b: &mut [f64]) {
    for (t0, t1) in tiles(c) {
        for i in 0..n {
            let (lo, hi) = b.split_at_mut(i * c);
            let bi = &mut hi[t0..t1];
            for j in 0..i {
                let m = l[i * n + j];
                bi.iter_mut().zip(&lo[j * c + t0..j * c + t1]).for_each(|(x, y)| *x -= m * y);
            }
            let inv = 1.0 / l[i * n + i];
            bi.iter_mut().for_each(|x| *x *= inv);
        }
    }
}

/// Batched `b ← L⁻ᵀ b` with one row-major factor shared by all problems.
pub(crate) fn shared_backward_t(l: &[f64], n: usize, c: usize, b: &mut [f64]) {
    for (t0, t1) in tiles(c) {
        for i in (0..n).rev() {
            let (lo, hi) = b.split_at_mut(i * c);
            let bi = &mut hi[t0..t1];
            let inv = 1.0 / l[i * n + i];
            bi.iter_mut().for_each(|x| *x *= inv);
            for j in 0..i {
                let m = l[i * n + j];
                lo[j * c + t0..j * c + t1].iter_mut().zip(bi.iter()).for_each(|(y, x)| *y -= m * x);
            }
        }
    }
}

/// Subtracts each problem's mean over its `n` entries.
pub(crate) fn batch_center(b: &mut [f64], n: usize, c: usize) {
    let mut mean = vec![0.0; c];
    for i in 0..n {
        mean.iter_mut().zip(lane(b, i, c)).for_each(|(m, x)| *m += x);
    }
    let inv = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    for i in 0..n {
        b[i * c..(i + 1) * c].iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
}

/// Inverse of [`packed_index`].
pub(crate) fn packed_pair(e: usize) -> (usize, usize) {
    let mut i = ((((8 * e + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while packed_index(i + 1, 0) <= e {
        i += 1;
    }
    while packed_index(i, 0) > e {
        i -= 1;
    }
    (i, e - packed_index(i, 0))
}
