//! Dense linear-algebra kernels used across the crate: matrix exponential and
//! logarithm, PSD projection and factorization, and Gauss–Legendre quadrature.

use nalgebra::{DMatrix, DVector};

use crate::error::CointexecError;

/// Padé(13) numerator coefficients for the matrix exponential.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Threshold on the 1-norm below which Padé(13) is accurate without scaling.
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling-and-squaring with a Padé(13) approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    let n = a.nrows();
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a_scaled = a * 2f64.powi(-s);

    let ident = DMatrix::identity(n, n);
    let a2 = &a_scaled * &a_scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (PADE13[13] * &a6 + PADE13[11] * &a4 + PADE13[9] * &a2)
        + PADE13[7] * &a6
        + PADE13[5] * &a4
        + PADE13[3] * &a2
        + PADE13[1] * &ident;
    let u = &a_scaled * u_inner;
    let v = &a6 * (PADE13[12] * &a6 + PADE13[10] * &a4 + PADE13[8] * &a2)
        + PADE13[6] * &a6
        + PADE13[4] * &a4
        + PADE13[2] * &a2
        + PADE13[0] * &ident;

    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("expm: Padé denominator is singular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Principal matrix logarithm by inverse scaling-and-squaring.
///
/// Square roots are taken with the Denman–Beavers iteration until the iterate
/// is close to the identity, then log(I+E) is evaluated through the integral
/// representation log(A) = ∫₀¹ E (I + sE)⁻¹ ds on a Gauss–Legendre rule.
/// Fails when the matrix has eigenvalues on the closed negative real axis
/// (no real principal logarithm).
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, CointexecError> {
    assert!(a.is_square(), "logm requires a square matrix");
    let n = a.nrows();
    let ident = DMatrix::identity(n, n);

    let mut x = a.clone();
    let mut sqrt_count = 0u32;
    while one_norm(&(&x - &ident)) > 0.25 {
        if sqrt_count >= 40 {
            return Err(CointexecError::Numerical(
                "logm: inverse scaling did not contract to the identity".into(),
            ));
        }
        x = sqrtm_db(&x)?;
        sqrt_count += 1;
    }

    let e = &x - &ident;
    let (nodes, weights) = gauss_legendre(12);
    let mut log_x = DMatrix::zeros(n, n);
    for (xi, wi) in nodes.iter().zip(weights.iter()) {
        // map node from [-1,1] to [0,1]
        let s = 0.5 * (xi + 1.0);
        let denom = &ident + s * &e;
        let term = denom.lu().solve(&e).ok_or_else(|| {
            CointexecError::Numerical("logm: singular resolvent in log kernel".into())
        })?;
        log_x += 0.5 * wi * term;
    }
    Ok(log_x * 2f64.powi(sqrt_count as i32))
}

/// Principal square root via the Denman–Beavers iteration.
fn sqrtm_db(a: &DMatrix<f64>) -> Result<DMatrix<f64>, CointexecError> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..60 {
        let y_inv = y.clone().try_inverse().ok_or_else(|| {
            CointexecError::Numerical("sqrtm: singular iterate (eigenvalue on R-)".into())
        })?;
        let z_inv = z.clone().try_inverse().ok_or_else(|| {
            CointexecError::Numerical("sqrtm: singular iterate (eigenvalue on R-)".into())
        })?;
        let y_next = 0.5 * (&y + &z_inv);
        let z_next = 0.5 * (&z + &y_inv);
        let delta = one_norm(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * one_norm(&y).max(1.0) {
            let residual = &y * &y - a;
            if one_norm(&residual) > 1e-8 * one_norm(a).max(1.0) {
                return Err(CointexecError::Numerical(
                    "sqrtm: Denman-Beavers converged to a non-root".into(),
                ));
            }
            return Ok(y);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(CointexecError::Numerical(
                "sqrtm: iteration diverged".into(),
            ));
        }
    }
    Err(CointexecError::Numerical(
        "sqrtm: Denman-Beavers did not converge".into(),
    ))
}

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Frobenius norm of the difference.
pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

/// Symmetric part (A + Aᵀ)/2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = symmetrize(a);
    let mut vals: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a)[0]
}

/// Project onto the PSD cone: symmetrize and clamp negative eigenvalues to zero.
pub fn clamp_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// A factor L with L·Lᵀ = A for a PSD matrix.
///
/// Cholesky when A is positive definite; otherwise an eigenvalue square root,
/// which also covers singular covariances (noise-free simulations use Σ = 0).
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>, CointexecError> {
    let sym = symmetrize(a);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.l());
    }
    let scale = max_abs(&sym);
    let eig = sym.symmetric_eigen();
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -1e-10 * scale.max(1.0) {
            return Err(CointexecError::Numerical(format!(
                "covariance is not PSD after clamping (eigenvalue {l:.3e})"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(roots)))
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Linear interpolation weight: index of the left grid node and the fraction.
///
/// `times` must be uniform ascending; `t` is clamped to the grid range.
pub fn grid_locate(times: &[f64], t: f64) -> (usize, f64) {
    let k = times.len();
    debug_assert!(k >= 2);
    let t0 = times[0];
    let t1 = times[k - 1];
    if t <= t0 {
        return (0, 0.0);
    }
    if t >= t1 {
        return (k - 2, 1.0);
    }
    let h = (t1 - t0) / (k - 1) as f64;
    let mut idx = ((t - t0) / h) as usize;
    if idx >= k - 1 {
        idx = k - 2;
    }
    // Guard against rounding on the cell boundary.
    while idx > 0 && t < times[idx] {
        idx -= 1;
    }
    while idx < k - 2 && t >= times[idx + 1] {
        idx += 1;
    }
    let frac = (t - times[idx]) / (times[idx + 1] - times[idx]);
    (idx, frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_matches_scalar_exponential() {
        let a = DMatrix::from_element(1, 1, -3.25);
        let e = expm(&a);
        assert!((e[(0, 0)] - (-3.25f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn expm_matches_diagonalizable_reference() {
        // A = V diag(1, -2) V^{-1}; exp(A) = V diag(e, e^-2) V^{-1}.
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let v_inv = v.clone().try_inverse().unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0]));
        let a = &v * &d * &v_inv;
        let expected = &v
            * DMatrix::from_diagonal(&DVector::from_vec(vec![1f64.exp(), (-2f64).exp()]))
            * &v_inv;
        assert!(max_abs(&(expm(&a) - expected)) < 1e-12);
    }

    #[test]
    fn expm_handles_large_norm() {
        // Scaling path: kappa-sized entries over a unit horizon.
        let a = DMatrix::from_row_slice(2, 2, &[-75.0, 30.0, 12.0, -40.0]);
        let e_full = expm(&a);
        let e_half = expm(&(&a * 0.5));
        assert!(max_abs(&(&e_half * &e_half - &e_full)) < 1e-9 * max_abs(&e_full).max(1.0));
    }

    #[test]
    fn logm_round_trips_expm() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -0.2, 0.05, 0.1, -0.4, 0.0, 0.0, 0.2, 0.1]);
        let l = logm(&expm(&a)).unwrap();
        assert!(max_abs(&(l - a)) < 1e-11);
    }

    #[test]
    fn logm_rejects_negative_real_spectrum() {
        let a = DMatrix::from_row_slice(1, 1, &[-0.5]);
        assert!(logm(&a).is_err());
    }

    #[test]
    fn clamp_psd_floors_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = clamp_psd(&a);
        assert!(min_sym_eigenvalue(&c) > -1e-12);
        // The positive eigenvector direction is preserved.
        assert!((c[(0, 1)] - c[(1, 0)]).abs() < 1e-14);
    }

    #[test]
    fn psd_factor_handles_singular_and_zero() {
        let zero = DMatrix::zeros(3, 3);
        let l = psd_factor(&zero).unwrap();
        assert_eq!(max_abs(&l), 0.0);

        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&rank1).unwrap();
        assert!(max_abs(&(&l * l.transpose() - rank1)) < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        // degree-9 polynomial: x^8
        let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(8)).sum();
        assert!((got - 2.0 / 9.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn grid_locate_endpoints_and_interior() {
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        assert_eq!(grid_locate(&times, -1.0), (0, 0.0));
        let (i, f) = grid_locate(&times, 1.0);
        assert_eq!(i, 9);
        assert!((f - 1.0).abs() < 1e-12);
        let (i, f) = grid_locate(&times, 0.55);
        assert_eq!(i, 5);
        assert!((f - 0.5).abs() < 1e-9);
    }
}
