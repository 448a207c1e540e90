//! Maps between arbitrary square matrices, the Lie algebra of skew-symmetric
//! matrices, and the orthogonal group, plus the projection/retraction pair
//! used by the Riemannian baseline and the soft orthogonality penalty.
//!
//! The central object is the rational map
//!
//! ```text
//! h(X) = 2(E + X)^-1 - E
//! ```
//!
//! which carries skew-symmetric matrices (`X + X^T = 0`) to orthogonal ones
//! (`W^T W = E`) without any iterative constraint enforcement, and is its own
//! inverse wherever `E + X` is nonsingular. Composed with the skew projection
//! `W - W^T`, it turns any raw square matrix into an exactly orthogonal one,
//! which is what lets attention weights live on the manifold while their raw
//! generators are optimized freely in Euclidean space.
//!
//! `h` cannot reach orthogonal matrices that have -1 as an eigenvalue (for
//! example `-E`), nor the determinant -1 component of the group; callers of
//! [`cayley_inverse`] get a singularity error in that case rather than a
//! silent fixup.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default orthogonality tolerance: `1e-10 * sqrt(n)`.
pub fn orthogonality_tolerance(n: usize) -> f64 {
    1e-10 * (n as f64).sqrt()
}

/// A square matrix `S` with `S + S^T = 0` within `1e-12` per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewMatrix(Matrix);

impl SkewMatrix {
    pub fn new(inner: Matrix) -> Result<Self> {
        if !inner.is_square() {
            return Err(Error::NotSquare {
                op: "SkewMatrix::new",
                rows: inner.rows(),
                cols: inner.cols(),
            });
        }
        let n = inner.rows();
        for r in 0..n {
            for c in 0..n {
                let resid = inner.get(r, c) + inner.get(c, r);
                if resid.abs() > 1e-12 {
                    return Err(Error::NotSkew {
                        row: r,
                        col: c,
                        max_abs: resid.abs(),
                    });
                }
            }
        }
        Ok(Self(inner))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

/// A square matrix `W` with `||W^T W - E||_F` within tolerance
/// (`1e-10 * sqrt(n)` by default).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMatrix(Matrix);

impl OrthogonalMatrix {
    pub fn new(inner: Matrix) -> Result<Self> {
        let tol = orthogonality_tolerance(inner.rows());
        Self::new_with_tolerance(inner, tol)
    }

    pub fn new_with_tolerance(inner: Matrix, tolerance: f64) -> Result<Self> {
        let err = orthogonality_error(&inner)?;
        if err > tolerance {
            return Err(Error::NotOrthogonal {
                error: err,
                tolerance,
            });
        }
        Ok(Self(inner))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

/// Projects any square matrix onto the skew-symmetric matrices: `W - W^T`.
///
/// Symmetric matrices map to zero; a matrix that is already skew maps to
/// twice itself.
pub fn skew_symmetrize(w: &Matrix) -> Result<SkewMatrix> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            op: "skew_symmetrize",
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    // a - b == -(b - a) holds exactly in IEEE arithmetic, so the result is
    // skew bit for bit and the type validation cannot fail.
    let skew = w.sub(&w.transpose())?;
    SkewMatrix::new(skew)
}

/// The raw map `h(M) = 2(E + M)^-1 - E` on any square matrix.
///
/// `h` is an involution: `h(h(M)) = M` wherever both applications are
/// defined. The typed wrappers [`cayley`] and [`cayley_inverse`] are this
/// same formula restricted to skew and orthogonal arguments.
pub fn cayley_map(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            op: "cayley_map",
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let e = Matrix::identity(m.rows());
    let inv = e.add(m)?.inverse()?;
    inv.scale(2.0).sub(&e)
}

/// Carries a skew-symmetric matrix to the orthogonal group via
/// `2(E + X)^-1 - E`.
///
/// `E + X` is provably nonsingular for skew `X` (its singular values are
/// `sqrt(1 + sigma^2) >= 1`), so there is no error path; an internal
/// singularity would mean the skew precondition was violated and aborts.
pub fn cayley(x: &SkewMatrix) -> OrthogonalMatrix {
    let w = cayley_map(x.as_matrix())
        .expect("E + X is nonsingular for skew-symmetric X");
    OrthogonalMatrix::new(w).expect("Cayley image failed the orthogonality bound")
}

/// Recovers a skew generator from an orthogonal matrix: `2(E + Y)^-1 - E`.
///
/// Fails with a singularity error when `-1` is an eigenvalue of `Y`
/// (e.g. `Y = -E`); such matrices have no Cayley preimage.
pub fn cayley_inverse(y: &OrthogonalMatrix) -> Result<SkewMatrix> {
    let x = cayley_map(y.as_matrix())?;
    SkewMatrix::new(x)
}

/// Matrix exponential of a skew generator by scaling and squaring.
///
/// The argument is scaled by `2^-s` until its Frobenius norm is at most 0.5,
/// the Taylor series is summed until the running term drops below `1e-16`,
/// and the result is squared `s` times. For skew input the image is
/// orthogonal within `1e-9 * sqrt(n)`.
pub fn matrix_exp(x: &SkewMatrix) -> OrthogonalMatrix {
    let n = x.n();
    let w = matrix_exp_raw(x.as_matrix());
    OrthogonalMatrix::new_with_tolerance(w, 1e-9 * (n as f64).sqrt())
        .expect("exponential of a skew matrix failed the orthogonality bound")
}

pub(crate) fn matrix_exp_scaling(norm: f64) -> u32 {
    if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    }
}

pub(crate) fn matrix_exp_raw(m: &Matrix) -> Matrix {
    let n = m.rows();
    let s = matrix_exp_scaling(m.frobenius_norm());
    let scaled = m.scale(0.5_f64.powi(s as i32));
    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=64u32 {
        term = term.matmul(&scaled).unwrap().scale(1.0 / k as f64);
        result = result.add(&term).unwrap();
        if term.frobenius_norm() < 1e-16 {
            break;
        }
    }
    for _ in 0..s {
        result = result.matmul(&result).unwrap();
    }
    result
}

/// Deviation from the orthogonal manifold: `||W^T W - E||_F`.
pub fn orthogonality_error(w: &Matrix) -> Result<f64> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            op: "orthogonality_error",
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let e = Matrix::identity(w.rows());
    Ok(w.transpose().matmul(w)?.sub(&e)?.frobenius_norm())
}

/// Soft orthogonality penalty: `||W W^T - E||_F^2`, added to the loss with a
/// coefficient lambda in penalty mode.
pub fn orth_penalty(w: &Matrix) -> Result<f64> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            op: "orth_penalty",
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let e = Matrix::identity(w.rows());
    let norm = w.matmul(&w.transpose())?.sub(&e)?.frobenius_norm();
    Ok(norm * norm)
}

/// Projects a Euclidean gradient onto the tangent space at `w`:
/// `w * (w^T g - g^T w) / 2`. The result `h` satisfies `w^T h` skew.
pub fn tangent_project(w: &OrthogonalMatrix, g: &Matrix) -> Result<Matrix> {
    let wm = w.as_matrix();
    if wm.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "tangent_project",
            left_rows: wm.rows(),
            left_cols: wm.cols(),
            right_rows: g.rows(),
            right_cols: g.cols(),
        });
    }
    let wtg = wm.transpose().matmul(g)?;
    let skew_part = wtg.sub(&wtg.transpose())?.scale(0.5);
    wm.matmul(&skew_part)
}

/// First-order retraction back onto the manifold: the Q factor of
/// `w + step * h` with R's diagonal forced positive (which makes the factor
/// unique and the retraction deterministic).
///
/// Requires `w^T h` to be skew within `1e-8` per entry.
pub fn retract(w: &OrthogonalMatrix, h: &Matrix, step: f64) -> Result<OrthogonalMatrix> {
    let wm = w.as_matrix();
    if wm.shape() != h.shape() {
        return Err(Error::ShapeMismatch {
            op: "retract",
            left_rows: wm.rows(),
            left_cols: wm.cols(),
            right_rows: h.rows(),
            right_cols: h.cols(),
        });
    }
    let wth = wm.transpose().matmul(h)?;
    let mut worst = 0.0f64;
    for r in 0..wth.rows() {
        for c in 0..wth.cols() {
            worst = worst.max((wth.get(r, c) + wth.get(c, r)).abs());
        }
    }
    if worst > 1e-8 {
        return Err(Error::NotTangent {
            error: worst,
            tolerance: 1e-8,
        });
    }
    let q = qr_positive_q(&wm.add(&h.scale(step))?);
    OrthogonalMatrix::new(q)
}

/// Householder QR returning only Q, with the sign convention diag(R) > 0.
fn qr_positive_q(m: &Matrix) -> Matrix {
    let n = m.rows();
    assert!(m.is_square(), "QR retraction expects square input");
    let mut r = m.data().to_vec();
    let mut q = Matrix::identity(n).data().to_vec();

    for k in 0..n {
        // Householder vector for column k.
        let mut norm_sq = 0.0;
        for i in k..n {
            norm_sq += r[i * n + k] * r[i * n + k];
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k * n + k] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n - k];
        v[0] = r[k * n + k] - alpha;
        for i in (k + 1)..n {
            v[i - k] = r[i * n + k];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        let beta = 2.0 / vtv;
        // R <- H R on the trailing block.
        for c in k..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i - k] * r[i * n + c];
            }
            let f = beta * dot;
            for i in k..n {
                r[i * n + c] -= f * v[i - k];
            }
        }
        // Q <- Q H (H is symmetric).
        for row in 0..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += q[row * n + i] * v[i - k];
            }
            let f = beta * dot;
            for i in k..n {
                q[row * n + i] -= f * v[i - k];
            }
        }
    }

    // Force diag(R) positive by flipping the matching Q column.
    for i in 0..n {
        if r[i * n + i] < 0.0 {
            for row in 0..n {
                q[row * n + i] = -q[row * n + i];
            }
        }
    }
    Matrix::from_raw(n, n, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    fn random_square(rng: &mut Rng, n: usize, scale: f64) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.uniform(-scale, scale)).unwrap()
    }

    fn random_skew(rng: &mut Rng, n: usize, scale: f64) -> SkewMatrix {
        skew_symmetrize(&random_square(rng, n, scale)).unwrap()
    }

    fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm()
    }

    #[test]
    fn skew_symmetrize_examples() {
        let sym = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 5.0]).unwrap();
        assert!(skew_symmetrize(&sym)
            .unwrap()
            .as_matrix()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            skew_symmetrize(&m).unwrap().as_matrix().data(),
            &[0.0, -1.0, 1.0, 0.0]
        );

        let mut rng = Rng::new(1);
        let s = random_skew(&mut rng, 5, 1.0);
        let doubled = skew_symmetrize(s.as_matrix()).unwrap();
        assert_eq!(doubled.as_matrix(), &s.as_matrix().scale(2.0));
    }

    #[test]
    fn skew_symmetrize_rejects_rectangular() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(skew_symmetrize(&m), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn cayley_of_zero_is_identity() {
        let zero = SkewMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(cayley(&zero).as_matrix(), &Matrix::identity(3));
    }

    #[test]
    fn cayley_2x2_closed_form() {
        let x = SkewMatrix::new(Matrix::from_vec(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap()).unwrap();
        let w = cayley(&x);
        assert_eq!(w.as_matrix().data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn cayley_image_is_orthogonal_at_n64() {
        let mut rng = Rng::new(64);
        let x = random_skew(&mut rng, 64, 1.0);
        let w = cayley(&x);
        let err = orthogonality_error(w.as_matrix()).unwrap();
        assert!(err <= 1e-10 * 8.0, "orthogonality error {err}");
    }

    #[test]
    fn cayley_inverse_examples() {
        let e = OrthogonalMatrix::new(Matrix::identity(3)).unwrap();
        assert!(cayley_inverse(&e)
            .unwrap()
            .as_matrix()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let y = OrthogonalMatrix::new(Matrix::from_vec(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let x = cayley_inverse(&y).unwrap();
        assert_eq!(x.as_matrix().data(), &[0.0, 1.0, -1.0, 0.0]);
        assert!(frob_diff(cayley(&x).as_matrix(), y.as_matrix()) <= 1e-8);
    }

    #[test]
    fn cayley_inverse_of_minus_identity_is_singular() {
        let y = OrthogonalMatrix::new(Matrix::identity(2).scale(-1.0)).unwrap();
        assert!(matches!(cayley_inverse(&y), Err(Error::Singular { .. })));
    }

    #[test]
    fn cayley_roundtrip_on_reachable_targets() {
        let mut rng = Rng::new(8);
        for n in [2usize, 4, 8, 16] {
            let y = cayley(&random_skew(&mut rng, n, 1.0));
            let back = cayley(&cayley_inverse(&y).unwrap());
            assert!(frob_diff(back.as_matrix(), y.as_matrix()) <= 1e-8);
        }
    }

    #[test]
    fn cayley_map_is_an_involution() {
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            // Small entries keep E + M comfortably nonsingular.
            let m = random_square(&mut rng, 6, 0.3);
            let twice = cayley_map(&cayley_map(&m).unwrap()).unwrap();
            assert!(frob_diff(&twice, &m) <= 1e-8);
        }
    }

    #[test]
    fn matrix_exp_of_zero_is_identity() {
        let zero = SkewMatrix::new(Matrix::zeros(4, 4)).unwrap();
        assert_eq!(matrix_exp(&zero).as_matrix(), &Matrix::identity(4));
    }

    #[test]
    fn matrix_exp_2x2_rotation() {
        let t = std::f64::consts::FRAC_PI_2;
        let x = SkewMatrix::new(Matrix::from_vec(2, 2, vec![0.0, -t, t, 0.0]).unwrap()).unwrap();
        let w = matrix_exp(&x);
        let expected = Matrix::from_vec(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!(frob_diff(w.as_matrix(), &expected) <= 1e-12);
    }

    #[test]
    fn matrix_exp_orthogonality_at_n32() {
        let mut rng = Rng::new(32);
        let x = random_skew(&mut rng, 32, 1.0);
        let err = orthogonality_error(matrix_exp(&x).as_matrix()).unwrap();
        assert!(err <= 1e-9 * 32.0_f64.sqrt(), "orthogonality error {err}");
    }

    #[test]
    fn cayley_and_exp_agree_to_first_order() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let raw = random_square(&mut rng, 6, 1e-4);
            let x = skew_symmetrize(&raw).unwrap();
            let norm = x.as_matrix().frobenius_norm();
            assert!(norm <= 1e-3);
            let via_cayley = cayley(&x);
            let minus_2x = SkewMatrix::new(x.as_matrix().scale(-2.0)).unwrap();
            let via_exp = matrix_exp(&minus_2x);
            let diff = frob_diff(via_cayley.as_matrix(), via_exp.as_matrix());
            assert!(diff <= 10.0 * norm * norm, "diff {diff} for norm {norm}");
        }
    }

    #[test]
    fn orthogonality_error_examples() {
        assert_eq!(orthogonality_error(&Matrix::identity(4)).unwrap(), 0.0);
        let two_e = Matrix::identity(2).scale(2.0);
        let err = orthogonality_error(&two_e).unwrap();
        assert!((err - 3.0 * 2.0_f64.sqrt()).abs() <= 1e-12);
        assert!(orthogonality_error(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn orth_penalty_examples() {
        assert_eq!(orth_penalty(&Matrix::identity(3)).unwrap(), 0.0);
        assert!((orth_penalty(&Matrix::zeros(3, 3)).unwrap() - 3.0).abs() <= 1e-12);
        let two_e = Matrix::identity(2).scale(2.0);
        assert!((orth_penalty(&two_e).unwrap() - 18.0).abs() <= 1e-12);
    }

    #[test]
    fn tangent_project_examples() {
        let e = OrthogonalMatrix::new(Matrix::identity(3)).unwrap();
        let sym = Matrix::from_vec(3, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]).unwrap();
        assert!(tangent_project(&e, &sym)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut rng = Rng::new(4);
        let skew = random_skew(&mut rng, 3, 1.0).into_matrix();
        assert_eq!(tangent_project(&e, &skew).unwrap(), skew);

        let w = cayley(&random_skew(&mut rng, 6, 1.0));
        let g = random_square(&mut rng, 6, 1.0);
        let h = tangent_project(&w, &g).unwrap();
        let wth = w.as_matrix().transpose().matmul(&h).unwrap();
        let resid = wth.add(&wth.transpose()).unwrap().max_abs();
        assert!(resid <= 1e-10, "tangency residual {resid}");
    }

    #[test]
    fn retract_examples() {
        let mut rng = Rng::new(5);
        let w = cayley(&random_skew(&mut rng, 5, 1.0));
        let zero = Matrix::zeros(5, 5);
        let back = retract(&w, &zero, 0.0).unwrap();
        assert!(frob_diff(back.as_matrix(), w.as_matrix()) <= 1e-12);

        let g = random_square(&mut rng, 5, 1.0);
        let h = tangent_project(&w, &g).unwrap();
        let moved = retract(&w, &h, 0.3).unwrap();
        let err = orthogonality_error(moved.as_matrix()).unwrap();
        assert!(err <= orthogonality_tolerance(5), "orthogonality error {err}");

        // First-order agreement at the identity: Q(E + h) = E + h + O(|h|^2).
        let e = OrthogonalMatrix::new(Matrix::identity(5)).unwrap();
        let small = random_skew(&mut rng, 5, 1e-4).into_matrix();
        let stepped = retract(&e, &small, 1.0).unwrap();
        let expected = Matrix::identity(5).add(&small).unwrap();
        let diff = frob_diff(stepped.as_matrix(), &expected);
        let h_norm = small.frobenius_norm();
        assert!(diff <= h_norm * h_norm, "diff {diff} vs {}", h_norm * h_norm);
    }

    #[test]
    fn retract_rejects_non_tangent_direction() {
        let e = OrthogonalMatrix::new(Matrix::identity(3)).unwrap();
        let sym = Matrix::identity(3).scale(2.0);
        assert!(matches!(
            retract(&e, &sym, 0.1),
            Err(Error::NotTangent { .. })
        ));
    }

    #[test]
    fn invariances_hold_for_cayley_images() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let n = 8;
            let w = cayley(&random_skew(&mut rng, n, 1.0));
            let x = Matrix::from_fn(1, n, |_, _| rng.uniform(-2.0, 2.0)).unwrap();
            let y = Matrix::from_fn(1, n, |_, _| rng.uniform(-2.0, 2.0)).unwrap();
            let xw = x.matmul(w.as_matrix()).unwrap();
            let yw = y.matmul(w.as_matrix()).unwrap();

            let dot = |a: &Matrix, b: &Matrix| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let nx = x.frobenius_norm();
            let ny = y.frobenius_norm();

            assert!((dot(&xw, &yw) - dot(&x, &y)).abs() <= 1e-9 * nx * ny);
            assert!((xw.frobenius_norm() - nx).abs() <= 1e-9 * nx);

            let cos_before = dot(&x, &y) / (nx * ny);
            let cos_after = dot(&xw, &yw) / (xw.frobenius_norm() * yw.frobenius_norm());
            assert!((cos_before - cos_after).abs() <= 1e-9);

            let d_before = x.sub(&y).unwrap().frobenius_norm();
            let d_after = xw.sub(&yw).unwrap().frobenius_norm();
            assert!((d_before - d_after).abs() <= 1e-9 * d_before);
        }
    }
}
