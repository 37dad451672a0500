//! Dense real linear algebra shared by every other module.
//!
//! Thin contract layer over `nalgebra`: singular values come back sorted,
//! rank decisions use an explicit tolerance, and symmetric inputs are
//! checked before an eigen-decomposition is attempted.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Iteration cap handed to the bidiagonal QR sweep.
pub const SVD_MAX_ITER: usize = 10_000;

/// Relative symmetry tolerance accepted by the symmetric eigen routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Singular-value cutoff: either the standard `max(rows, cols) * eps * sigma_1`
/// rule or a caller-supplied absolute threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Tolerance {
    #[default]
    Auto,
    Absolute(f64),
}

impl Tolerance {
    pub fn resolve(self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match self {
            Tolerance::Auto => rows.max(cols) as f64 * f64::EPSILON * sigma_max,
            Tolerance::Absolute(t) => t,
        }
    }
}

/// Thin SVD `m = u * diag(singular_values) * v_t` with nonincreasing
/// singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v_t: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.v_t
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.iter().copied().next().unwrap_or(0.0)
    }

    pub fn rank(&self, rows: usize, cols: usize, tol: Tolerance) -> usize {
        let cut = tol.resolve(rows, cols, self.sigma_max());
        self.singular_values.iter().filter(|&&s| s > cut).count()
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(rows, 0),
            singular_values: Vector::zeros(0),
            v_t: Matrix::zeros(0, cols),
        });
    }
    let (u, s, v_t) = match raw_svd(m) {
        Some(f) => f,
        // Retry on the transpose before giving up.
        None => {
            let (u, s, v_t) = raw_svd(&m.transpose()).ok_or(Error::SvdNoConvergence {
                iterations: SVD_MAX_ITER,
            })?;
            (v_t.transpose(), s, u.transpose())
        }
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut su = Matrix::zeros(rows, k);
    let mut sv = Matrix::zeros(k, cols);
    let mut sorted = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_row(dst, &v_t.row(src));
        sorted[dst] = s[src];
    }
    let s = sorted;
    Ok(SvdResult {
        u: su,
        singular_values: s,
        v_t: sv,
    })
}

/// Thin factorization through faer; nalgebra's bidiagonal SVD mishandles some
/// rank-deficient inputs, so the result is also checked against `m`.
fn raw_svd(m: &Matrix) -> Option<(Matrix, Vector, Matrix)> {
    let (rows, cols) = m.shape();
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let f = fm.thin_svd().ok()?;
    let (fu, fs, fv) = (f.U(), f.S(), f.V());
    let k = rows.min(cols);
    let u = Matrix::from_fn(rows, k, |i, j| fu[(i, j)]);
    let s = Vector::from_fn(k, |i, _| fs[i]);
    let v_t = Matrix::from_fn(k, cols, |i, j| fv[(j, i)]);
    let mut back = u.clone();
    for (j, mut col) in back.column_iter_mut().enumerate() {
        col *= s[j];
    }
    let err = (back * &v_t - m).amax();
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let bound = 1e3 * f64::EPSILON * (rows.max(cols) as f64) * scale;
    (err <= bound).then_some((u, s, v_t))
}

pub fn numeric_rank(m: &Matrix, tol: Tolerance) -> Result<usize> {
    let f = svd(m)?;
    Ok(f.rank(m.nrows(), m.ncols(), tol))
}

pub fn pinv(m: &Matrix, tol: Tolerance) -> Result<Matrix> {
    let f = svd(m)?;
    Ok(pinv_from_svd(&f, m.nrows(), m.ncols(), tol))
}

pub fn pinv_from_svd(f: &SvdResult, rows: usize, cols: usize, tol: Tolerance) -> Matrix {
    let cut = tol.resolve(rows, cols, f.sigma_max());
    let mut out = Matrix::zeros(cols, rows);
    for (j, &s) in f.singular_values.iter().enumerate() {
        if s > cut {
            // out += v_j * u_j^T / s
            let vj = f.v_t.row(j).transpose();
            let uj = f.u.column(j);
            out += (vj * uj.transpose()) / s;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vector,
    pub vectors: Matrix,
}

pub fn asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "symmetric eigenproblem needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m)?;
    let scale = m.amax().max(1.0);
    let a = asymmetry(m);
    if a > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: a });
    }
    Ok(())
}

pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    check_symmetric(m)?;
    let sym = symmetrize(m);
    let e = SymmetricEigen::new(sym);
    let n = e.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let mut values = Vector::zeros(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = e.eigenvalues[src];
        vectors.set_column(dst, &e.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

pub fn sym_eig_max(m: &Matrix) -> Result<f64> {
    let e = sym_eig(m)?;
    Ok(e.values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn sym_eig_min(m: &Matrix) -> Result<f64> {
    let e = sym_eig(m)?;
    Ok(e.values.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &Matrix) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Condition number in the 2-norm; infinite for singular input.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let f = svd(m)?;
    let k = f.singular_values.len();
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let smin = f.singular_values[k - 1];
    if smin == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(f.sigma_max() / smin)
    }
}

/// Concatenate column vectors into a matrix.
pub fn hstack(cols: &[Vector]) -> Matrix {
    let rows = cols.first().map_or(0, |c| c.len());
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

pub fn vstack(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Stack a sequence of vectors into one long vector.
pub fn concat(parts: &[Vector]) -> Vector {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(len);
    let mut o = 0;
    for p in parts {
        out.rows_mut(o, p.len()).copy_from(p);
        o += p.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_diagonal_singular_values() {
        let s = svd(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(s.singular_values.as_slice(), &[1.0, 1.0, 1.0]);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0, 2.0]));
        let s = svd(&d).unwrap();
        for (got, want) in s.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_reconstructs_random_tall_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 5, 3);
        let s = svd(&m).unwrap();
        let err = (s.reconstruct() - &m).amax();
        assert!(err < 1e-10 * s.sigma_max(), "residual {err}");
        for w in s.singular_values.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
        let utu = s.u.transpose() * &s.u;
        assert!((utu - Matrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn svd_rejects_nan() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::NonFinite)));
    }

    #[test]
    fn rank_of_zero_and_identity() {
        assert_eq!(numeric_rank(&Matrix::zeros(3, 4), Tolerance::Auto).unwrap(), 0);
        assert_eq!(numeric_rank(&Matrix::identity(4, 4), Tolerance::Auto).unwrap(), 4);
    }

    #[test]
    fn pinv_simple_cases() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
        let p = pinv(&d, Tolerance::Auto).unwrap();
        let want = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.0]));
        assert!((p - want).amax() < 1e-15);

        let th: f64 = 0.3;
        let q = Matrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let p = pinv(&q, Tolerance::Auto).unwrap();
        assert!((p - q.transpose()).amax() < 1e-14);
    }

    #[test]
    fn pinv_penrose_conditions_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 4, 2) * random(&mut rng, 2, 6);
        let p = pinv(&m, Tolerance::Auto).unwrap();
        assert!((&m * &p * &m - &m).amax() < 1e-9);
        assert!((&p * &m * &p - &p).amax() < 1e-9);
        let mp = &m * &p;
        let pm = &p * &m;
        assert!((&mp - mp.transpose()).amax() < 1e-9);
        assert!((&pm - pm.transpose()).amax() < 1e-9);
    }

    #[test]
    fn eig_max_cases() {
        assert_eq!(sym_eig_max(&Matrix::identity(3, 3)).unwrap(), 1.0);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, 5.0, 2.0]));
        assert!((sym_eig_max(&d).unwrap() - 5.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random(&mut rng, 4, 3);
        let s1 = svd(&l).unwrap().sigma_max();
        let lam = sym_eig_max(&(l.transpose() * &l)).unwrap();
        assert!((lam - s1 * s1).abs() < 1e-12 * lam);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = Matrix> {
            (1usize..6, 1usize..6, 0usize..4).prop_flat_map(|(r, c, k)| {
                proptest::collection::vec(-3.0f64..3.0, r * k.max(1) + k.max(1) * c).prop_map(
                    move |v| {
                        let k = k.max(1);
                        let a = Matrix::from_row_slice(r, k, &v[..r * k]);
                        let b = Matrix::from_row_slice(k, c, &v[r * k..]);
                        a * b
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn rank_invariant_under_transpose(m in matrix_strategy()) {
                let a = numeric_rank(&m, Tolerance::Auto).unwrap();
                let b = numeric_rank(&m.transpose(), Tolerance::Auto).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn pinv_is_an_involution(m in matrix_strategy()) {
                let pp = pinv(&pinv(&m, Tolerance::Auto).unwrap(), Tolerance::Auto).unwrap();
                let scale = m.amax().max(1e-300);
                // Nearly rank-deficient products can sit on the cutoff; skip those.
                let s = svd(&m).unwrap();
                let cut = Tolerance::Auto.resolve(m.nrows(), m.ncols(), s.sigma_max());
                let near = s.singular_values.iter().any(|&x| x > cut && x < 1e-3 * s.sigma_max());
                prop_assume!(!near);
                prop_assert!((pp - &m).amax() <= 1e-8 * scale);
            }

            #[test]
            fn gram_matrix_has_nonnegative_top_eigenvalue(m in matrix_strategy()) {
                let g = m.transpose() * &m;
                prop_assert!(sym_eig_max(&g).unwrap() >= 0.0);
            }
        }
    }
}
