//! Market-model domain types: the co-integrated price model, impact matrices,
//! penalty specification, inventory targets, and order-flow models, together
//! with their invariants and JSON serialization.
//!
//! Conventions fixed repo-wide: time is measured in fractions of the trading
//! day (horizon T = 1 corresponds to 6.5 hours), prices in currency, inventory
//! in shares. Traded assets are always the first `m` of the `n` observed
//! coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CointexecError, Result};
use crate::linalg;

/// Relative eigenvalue tolerance for accepting near-PSD covariances.
pub const PSD_TOL: f64 = 1e-10;

/// Version tag of the model JSON document.
pub const MODEL_DOC_VERSION: &str = "cointexec-model-v1";

/// Continuous-time co-integrated market model.
///
/// Midprices decompose as P = S + b𝒳ᵀ(Q − Q₀) + b̄ℳ where the co-integration
/// component S follows dS = κ(θ − S)dt + σᵀdW with Σ = σᵀσ, the investor sells
/// at speed ν with temporary impact a, and ℳ is cumulative outside order flow.
#[derive(Debug, Clone)]
pub struct MarketModel {
    /// Number of observed assets.
    pub n: usize,
    /// Number of traded assets (the first `m` coordinates).
    pub m: usize,
    /// Mean-reversion matrix κ (n×n, units 1/time).
    pub kappa: DMatrix<f64>,
    /// Mean-reversion level θ (n, currency).
    pub theta: DVector<f64>,
    /// Instantaneous covariance Σ (n×n, currency²/time), clamped to PSD.
    pub sigma_cov: DMatrix<f64>,
    /// Investor permanent-impact matrix b (n×n, symmetric, currency/share).
    pub b_perm: DMatrix<f64>,
    /// Other-participant permanent-impact matrix b̄ (n×n, currency/share).
    pub b_bar: DMatrix<f64>,
    /// Temporary impact a (m×m, SPD, currency·time/share²).
    pub a_temp: DMatrix<f64>,
    /// Selection matrix 𝒳 (m×n): 𝒳ᵢⱼ = 1 iff i = j.
    pub selection: DMatrix<f64>,
}

impl MarketModel {
    /// Builds a model, checking dimensions and normalizing near-symmetric /
    /// near-PSD inputs (Σ symmetrized and eigenvalue-clamped, b symmetrized).
    pub fn new(
        kappa: DMatrix<f64>,
        theta: DVector<f64>,
        sigma_cov: DMatrix<f64>,
        b_perm: DMatrix<f64>,
        b_bar: DMatrix<f64>,
        a_temp: DMatrix<f64>,
        m: usize,
    ) -> Result<Self> {
        let n = theta.len();
        check_square("kappa", &kappa, n)?;
        check_square("sigma_cov", &sigma_cov, n)?;
        check_square("b_perm", &b_perm, n)?;
        check_square("b_bar", &b_bar, n)?;
        check_square("a_temp", &a_temp, m)?;
        if m == 0 || m > n {
            return Err(CointexecError::DimensionMismatch {
                field: "m",
                expected: format!("1..={n}"),
                actual: m.to_string(),
            });
        }

        let scale = linalg::max_abs(&sigma_cov).max(1.0);
        let min_eig = linalg::min_sym_eigenvalue(&sigma_cov);
        if min_eig < -PSD_TOL * scale {
            return Err(CointexecError::Validation(format!(
                "sigma_cov is not PSD within tolerance (min eigenvalue {min_eig:.3e})"
            )));
        }

        let mut selection = DMatrix::zeros(m, n);
        for i in 0..m {
            selection[(i, i)] = 1.0;
        }

        Ok(Self {
            n,
            m,
            kappa,
            theta,
            sigma_cov: linalg::clamp_psd(&sigma_cov),
            b_perm: linalg::symmetrize(&b_perm),
            b_bar,
            a_temp: linalg::symmetrize(&a_temp),
            selection,
        })
    }

    /// Traded-asset sub-covariance Σ̃ = 𝒳 Σ 𝒳ᵀ.
    pub fn sub_covariance(&self) -> DMatrix<f64> {
        &self.selection * &self.sigma_cov * self.selection.transpose()
    }

    /// 𝒳 b 𝒳ᵀ, the traded block of the investor permanent impact.
    pub fn b_traded(&self) -> DMatrix<f64> {
        &self.selection * &self.b_perm * self.selection.transpose()
    }

    /// Inverse of the temporary impact matrix.
    pub fn a_inv(&self) -> Result<DMatrix<f64>> {
        self.a_temp
            .clone()
            .try_inverse()
            .ok_or_else(|| CointexecError::Validation("a_temp is singular".into()))
    }

    /// Restriction of the model to its first `m` traded assets (used by the
    /// partial-information scenario: the strategy only models the dynamics of
    /// the assets it trades).
    pub fn restrict_to_traded(&self) -> Result<MarketModel> {
        let m = self.m;
        MarketModel::new(
            self.kappa.view((0, 0), (m, m)).into_owned(),
            self.theta.rows(0, m).into_owned(),
            self.sigma_cov.view((0, 0), (m, m)).into_owned(),
            self.b_perm.view((0, 0), (m, m)).into_owned(),
            self.b_bar.view((0, 0), (m, m)).into_owned(),
            self.a_temp.clone(),
            m,
        )
    }

    /// Replaces the co-integration dynamics with correlated Brownian motions:
    /// m traded assets, κ = 0, b̄ = 0, covariance `sigma_ac`. This is the
    /// benchmark model of the multi-asset Almgren–Chriss strategy.
    pub fn almgren_chriss_reduction(&self, sigma_ac: Option<&DMatrix<f64>>) -> Result<MarketModel> {
        let m = self.m;
        let sigma = match sigma_ac {
            Some(s) => {
                check_square("sigma_ac", s, m)?;
                s.clone()
            }
            None => self.sub_covariance(),
        };
        MarketModel::new(
            DMatrix::zeros(m, m),
            self.theta.rows(0, m).into_owned(),
            sigma,
            self.b_perm.view((0, 0), (m, m)).into_owned(),
            DMatrix::zeros(m, m),
            self.a_temp.clone(),
            m,
        )
    }

    /// Structural and numerical invariants of the model plus the
    /// bounded-solution precondition `alpha − ½𝒳b𝒳ᵀ ≻ 0`; reports the
    /// smallest eigenvalue of each checked matrix.
    pub fn validate(&self, penalty: &PenaltySpec) -> ValidationReport {
        let mut checks = Vec::new();

        let a_min = linalg::min_sym_eigenvalue(&self.a_temp);
        let a_scale = linalg::max_abs(&self.a_temp).max(f64::MIN_POSITIVE);
        checks.push(Check {
            name: "a_temp symmetric positive definite".into(),
            passed: a_min > PSD_TOL * a_scale,
            min_eigenvalue: Some(a_min),
        });

        let sig_min = linalg::min_sym_eigenvalue(&self.sigma_cov);
        let sig_scale = linalg::max_abs(&self.sigma_cov).max(1.0);
        checks.push(Check {
            name: "sigma_cov positive semidefinite".into(),
            passed: sig_min >= -PSD_TOL * sig_scale,
            min_eigenvalue: Some(sig_min),
        });

        let b_asym = linalg::max_abs(&(&self.b_perm - self.b_perm.transpose()));
        checks.push(Check {
            name: "b_perm symmetric".into(),
            passed: b_asym <= 1e-12 * linalg::max_abs(&self.b_perm).max(1.0),
            min_eigenvalue: None,
        });

        let sel_ok = {
            let mut ok = self.selection.nrows() == self.m && self.selection.ncols() == self.n;
            if ok {
                for i in 0..self.m {
                    for j in 0..self.n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        if self.selection[(i, j)] != want {
                            ok = false;
                        }
                    }
                }
            }
            ok
        };
        checks.push(Check {
            name: "selection maps the first m coordinates".into(),
            passed: sel_ok,
            min_eigenvalue: None,
        });

        let alpha_ok = penalty.alpha_term.nrows() == self.m;
        let terminal = &penalty.alpha_term - 0.5 * self.b_traded();
        let term_min = if alpha_ok {
            linalg::min_sym_eigenvalue(&terminal)
        } else {
            f64::NEG_INFINITY
        };
        checks.push(Check {
            name: "alpha_term - b_traded/2 positive definite (bounded-solution precondition)"
                .into(),
            passed: alpha_ok && term_min > 0.0,
            min_eigenvalue: Some(term_min),
        });

        checks.push(Check {
            name: "phi nonnegative".into(),
            passed: penalty.phi >= 0.0,
            min_eigenvalue: None,
        });

        ValidationReport { checks }
    }
}

fn check_square(field: &'static str, a: &DMatrix<f64>, n: usize) -> Result<()> {
    if a.nrows() != n || a.ncols() != n {
        return Err(CointexecError::DimensionMismatch {
            field,
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

/// Outcome of a single validation check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub min_eigenvalue: Option<f64>,
}

/// Pass/fail per model invariant.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Running and terminal penalty parameters of the performance criterion.
#[derive(Debug, Clone)]
pub struct PenaltySpec {
    /// Running inventory-target penalty φ ≥ 0.
    pub phi: f64,
    /// Terminal liquidation penalty α (m×m, positive definite).
    pub alpha_term: DMatrix<f64>,
    /// Traded-asset sub-covariance Σ̃ = 𝒳Σ𝒳ᵀ entering the running penalty.
    pub sigma_tilde: DMatrix<f64>,
}

impl PenaltySpec {
    pub fn new(phi: f64, alpha_term: DMatrix<f64>, model: &MarketModel) -> Result<Self> {
        check_square("alpha_term", &alpha_term, model.m)?;
        if phi < 0.0 {
            return Err(CointexecError::Validation(format!(
                "phi must be nonnegative, got {phi}"
            )));
        }
        Ok(Self {
            phi,
            alpha_term: linalg::symmetrize(&alpha_term),
            sigma_tilde: model.sub_covariance(),
        })
    }

    /// Scalar-α convenience: α = alpha · I.
    pub fn isotropic(phi: f64, alpha: f64, model: &MarketModel) -> Result<Self> {
        Self::new(phi, DMatrix::identity(model.m, model.m) * alpha, model)
    }

    /// Penalty with identical φ/α against a different model view (used when a
    /// strategy solves on a restricted or benchmark model).
    pub fn rebind(&self, model: &MarketModel) -> Result<Self> {
        Self::new(self.phi, self.alpha_term.clone(), model)
    }
}

/// Deterministic inventory-target schedule 𝒬 on [0, T].
#[derive(Debug, Clone)]
pub struct InventoryTarget {
    pub q0: DVector<f64>,
    pub horizon: f64,
    pub schedule: TargetSchedule,
}

/// Shape of the target schedule.
#[derive(Debug, Clone)]
pub enum TargetSchedule {
    /// 𝒬 ≡ 0: the urgency reading of the running penalty (used by UL/RL).
    Zero,
    /// Uniformly sampled schedule with linear interpolation between nodes.
    Sampled {
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

impl InventoryTarget {
    pub fn zero(q0: DVector<f64>, horizon: f64) -> Self {
        Self {
            q0,
            horizon,
            schedule: TargetSchedule::Zero,
        }
    }

    pub fn sampled(
        q0: DVector<f64>,
        horizon: f64,
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(CointexecError::InvalidInput(
                "target schedule needs matching times/values with at least 2 nodes".into(),
            ));
        }
        Ok(Self {
            horizon,
            q0,
            schedule: TargetSchedule::Sampled { times, values },
        })
    }

    /// Target inventory at time `t` (clamped to [0, T]).
    pub fn at(&self, t: f64) -> DVector<f64> {
        match &self.schedule {
            TargetSchedule::Zero => DVector::zeros(self.q0.len()),
            TargetSchedule::Sampled { times, values } => {
                let (idx, frac) = linalg::grid_locate(times, t);
                &values[idx] * (1.0 - frac) + &values[idx + 1] * frac
            }
        }
    }

    /// Schedule invariants: 𝒬_T = 0 always; 𝒬₀ = q0 for sampled schedules
    /// (the zero target deliberately starts away from q0).
    pub fn validate(&self, tol: f64) -> Result<()> {
        let end = self.at(self.horizon);
        if end.amax() > tol {
            return Err(CointexecError::Validation(format!(
                "target schedule does not reach zero at T (|Q_T| = {:.3e})",
                end.amax()
            )));
        }
        if let TargetSchedule::Sampled { .. } = self.schedule {
            let start = self.at(0.0);
            let scale = self.q0.amax().max(1.0);
            if (&start - &self.q0).amax() > tol * scale {
                return Err(CointexecError::Validation(
                    "sampled target schedule does not start at q0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Order flow of the other market participants.
///
/// `Zero` turns outside flow off; `AffineOu` is a mean-reverting Gaussian flow
/// dμ = κ_μ(θ_μ − μ)dt + σ_μᵀ dW_μ whose conditional mean is affine in the
/// current state: E[μ_u | μ_t] = α(t;u) + β(t;u) μ_t with β = e^{−κ_μ(u−t)}.
#[derive(Debug, Clone)]
pub enum OrderFlowModel {
    Zero,
    AffineOu {
        kappa_mu: DMatrix<f64>,
        theta_mu: DVector<f64>,
        sigma_mu_cov: DMatrix<f64>,
    },
}

impl OrderFlowModel {
    pub fn is_zero(&self) -> bool {
        matches!(self, OrderFlowModel::Zero)
    }

    pub fn dim(&self, n: usize) -> usize {
        match self {
            OrderFlowModel::Zero => 0,
            OrderFlowModel::AffineOu { .. } => n,
        }
    }

    /// Conditional-mean coefficients over a lead time `dt`:
    /// E[μ_{t+dt} | μ_t] = α + β μ_t.
    pub fn conditional_mean_coeffs(&self, n: usize, dt: f64) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            OrderFlowModel::Zero => (DVector::zeros(n), DMatrix::zeros(n, n)),
            OrderFlowModel::AffineOu {
                kappa_mu, theta_mu, ..
            } => {
                let beta = linalg::expm(&(-kappa_mu * dt));
                let alpha = (DMatrix::identity(n, n) - &beta) * theta_mu;
                (alpha, beta)
            }
        }
    }

    pub fn check_dims(&self, n: usize) -> Result<()> {
        if let OrderFlowModel::AffineOu {
            kappa_mu,
            theta_mu,
            sigma_mu_cov,
        } = self
        {
            check_square("flow.kappa_mu", kappa_mu, n)?;
            check_square("flow.sigma_mu_cov", sigma_mu_cov, n)?;
            if theta_mu.len() != n {
                return Err(CointexecError::DimensionMismatch {
                    field: "flow.theta_mu",
                    expected: n.to_string(),
                    actual: theta_mu.len().to_string(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON document (cointexec-model-v1)
// ---------------------------------------------------------------------------

/// Flat JSON form of a model plus penalty, row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub version: String,
    pub n: usize,
    pub m: usize,
    pub kappa: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub sigma_cov: Vec<Vec<f64>>,
    pub b_perm: Vec<Vec<f64>>,
    pub b_bar: Vec<Vec<f64>>,
    pub a_temp: Vec<Vec<f64>>,
    pub selection: Vec<Vec<f64>>,
    pub phi: f64,
    pub alpha_term: Vec<Vec<f64>>,
    pub sigma_tilde: Vec<Vec<f64>>,
}

pub fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], field: &'static str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    if nr == 0 {
        return Err(CointexecError::InvalidInput(format!(
            "{field}: empty matrix"
        )));
    }
    let nc = rows[0].len();
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CointexecError::InvalidInput(format!(
            "{field}: ragged rows"
        )));
    }
    let mut m = DMatrix::zeros(nr, nc);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

impl ModelDoc {
    pub fn from_parts(model: &MarketModel, penalty: &PenaltySpec) -> Self {
        Self {
            version: MODEL_DOC_VERSION.to_string(),
            n: model.n,
            m: model.m,
            kappa: matrix_to_rows(&model.kappa),
            theta: model.theta.iter().copied().collect(),
            sigma_cov: matrix_to_rows(&model.sigma_cov),
            b_perm: matrix_to_rows(&model.b_perm),
            b_bar: matrix_to_rows(&model.b_bar),
            a_temp: matrix_to_rows(&model.a_temp),
            selection: matrix_to_rows(&model.selection),
            phi: penalty.phi,
            alpha_term: matrix_to_rows(&penalty.alpha_term),
            sigma_tilde: matrix_to_rows(&penalty.sigma_tilde),
        }
    }

    pub fn into_parts(self) -> Result<(MarketModel, PenaltySpec)> {
        if self.version != MODEL_DOC_VERSION {
            return Err(CointexecError::InvalidInput(format!(
                "unsupported model document version `{}` (expected `{MODEL_DOC_VERSION}`)",
                self.version
            )));
        }
        let model = MarketModel::new(
            rows_to_matrix(&self.kappa, "kappa")?,
            DVector::from_vec(self.theta.clone()),
            rows_to_matrix(&self.sigma_cov, "sigma_cov")?,
            rows_to_matrix(&self.b_perm, "b_perm")?,
            rows_to_matrix(&self.b_bar, "b_bar")?,
            rows_to_matrix(&self.a_temp, "a_temp")?,
            self.m,
        )?;
        if model.n != self.n {
            return Err(CointexecError::DimensionMismatch {
                field: "n",
                expected: self.n.to_string(),
                actual: model.n.to_string(),
            });
        }
        let declared_sel = rows_to_matrix(&self.selection, "selection")?;
        if declared_sel != model.selection {
            return Err(CointexecError::Validation(
                "selection matrix must map the first m coordinates".into(),
            ));
        }
        let penalty = PenaltySpec::new(
            self.phi,
            rows_to_matrix(&self.alpha_term, "alpha_term")?,
            &model,
        )?;
        Ok((model, penalty))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simple_model(n: usize, m: usize) -> MarketModel {
        MarketModel::new(
            DMatrix::zeros(n, n),
            DVector::from_element(n, 10.0),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(m, m),
            m,
        )
        .unwrap()
    }

    #[test]
    fn validate_passes_for_large_terminal_penalty() {
        // b = 0, alpha = 1e6 I: the bounded-solution precondition holds.
        let model = simple_model(5, 2);
        let penalty = PenaltySpec::isotropic(0.01, 1e6, &model).unwrap();
        let report = model.validate(&penalty);
        assert!(report.passed(), "failures: {:?}", report.failures());
    }

    #[test]
    fn validate_fails_when_alpha_zero() {
        // m=n=1, a=1, b=0, alpha=0: alpha - b/2 = 0 is not positive definite.
        let model = simple_model(1, 1);
        let penalty = PenaltySpec::isotropic(0.0, 0.0, &model).unwrap();
        let report = model.validate(&penalty);
        assert!(!report.passed());
    }

    #[test]
    fn validate_reports_forced_negative_eigenvalue() {
        // b = diag(4,4), alpha = I: alpha - b/2 = diag(-1,-1).
        let mut model = simple_model(2, 2);
        model.b_perm = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0]));
        let penalty = PenaltySpec::isotropic(0.0, 1.0, &model).unwrap();
        let report = model.validate(&penalty);
        assert!(!report.passed());
        let check = report
            .checks
            .iter()
            .find(|c| c.name.contains("bounded-solution"))
            .unwrap();
        assert!((check.min_eigenvalue.unwrap() - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_the_field() {
        let err = MarketModel::new(
            DMatrix::zeros(3, 3),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("kappa"));
    }

    #[test]
    fn sub_covariance_identity_block() {
        let model = simple_model(5, 2);
        assert_eq!(model.sub_covariance(), DMatrix::identity(2, 2));
    }

    #[test]
    fn sub_covariance_full_when_m_equals_n() {
        let n = 3;
        let ones = DMatrix::from_element(n, n, 1.0);
        let model = MarketModel::new(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            ones.clone(),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            n,
        )
        .unwrap();
        assert!(linalg::max_abs(&(model.sub_covariance() - ones)) < 1e-14);
    }

    #[test]
    fn selection_times_transpose_is_identity() {
        for (n, m) in [(1, 1), (5, 2), (4, 4), (7, 3)] {
            let model = simple_model(n, m);
            let p = &model.selection * model.selection.transpose();
            assert!(linalg::max_abs(&(p - DMatrix::identity(m, m))) < 1e-15);
        }
    }

    #[test]
    fn model_doc_round_trip() {
        let model = simple_model(3, 2);
        let penalty = PenaltySpec::isotropic(0.5, 100.0, &model).unwrap();
        let doc = ModelDoc::from_parts(&model, &penalty);
        let json = serde_json::to_string_pretty(&doc).unwrap();
        let back: ModelDoc = serde_json::from_str(&json).unwrap();
        let (model2, penalty2) = back.into_parts().unwrap();
        assert_eq!(model.kappa, model2.kappa);
        assert_eq!(model.sigma_cov, model2.sigma_cov);
        assert_eq!(penalty.phi, penalty2.phi);
        assert_eq!(penalty.sigma_tilde, penalty2.sigma_tilde);
    }

    #[test]
    fn zero_target_is_zero_and_valid() {
        let target = InventoryTarget::zero(DVector::from_vec(vec![100.0, 50.0]), 1.0);
        assert_eq!(target.at(0.3), DVector::zeros(2));
        target.validate(1e-9).unwrap();
    }

    #[test]
    fn sampled_target_interpolates_and_validates() {
        let q0 = DVector::from_vec(vec![10.0]);
        let times = vec![0.0, 0.5, 1.0];
        let values = vec![
            DVector::from_vec(vec![10.0]),
            DVector::from_vec(vec![4.0]),
            DVector::from_vec(vec![0.0]),
        ];
        let target = InventoryTarget::sampled(q0, 1.0, times, values).unwrap();
        target.validate(1e-9).unwrap();
        assert!((target.at(0.25)[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn affine_flow_conditional_mean_solves_its_ode() {
        // d/dt E[mu_t] = kappa_mu (theta_mu - E[mu_t]); compare against the
        // alpha/beta coefficients over several lead times.
        let kappa_mu = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, 0.3, 1.0]);
        let theta_mu = DVector::from_vec(vec![0.4, -0.2]);
        let flow = OrderFlowModel::AffineOu {
            kappa_mu: kappa_mu.clone(),
            theta_mu: theta_mu.clone(),
            sigma_mu_cov: DMatrix::identity(2, 2),
        };
        let mu0 = DVector::from_vec(vec![1.0, 2.0]);
        for &dt in &[0.1, 0.5, 1.3] {
            let (alpha, beta) = flow.conditional_mean_coeffs(2, dt);
            let got = &alpha + &beta * &mu0;
            // Fine Euler reference for the mean ODE.
            let steps = 400_000;
            let h = dt / steps as f64;
            let mut mean = mu0.clone();
            for _ in 0..steps {
                mean += &kappa_mu * (&theta_mu - &mean) * h;
            }
            assert!((got - mean).amax() < 1e-4);
        }
    }

    proptest! {
        /// Random near-PSD covariances stay PSD through construction, and the
        /// traded sub-covariance inherits symmetry and PSD-ness.
        #[test]
        fn sub_covariance_psd_for_random_models(
            entries in proptest::collection::vec(-1.0f64..1.0, 25),
            m in 1usize..=5,
        ) {
            let n = 5;
            let raw = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
            let sigma = &raw * raw.transpose();
            let model = MarketModel::new(
                DMatrix::zeros(n, n),
                DVector::zeros(n),
                sigma,
                DMatrix::zeros(n, n),
                DMatrix::zeros(n, n),
                DMatrix::identity(m, m),
                m,
            )
            .unwrap();
            let sub = model.sub_covariance();
            prop_assert!(crate::linalg::max_abs(&(&sub - sub.transpose())) < 1e-12);
            let scale = crate::linalg::max_abs(&sub).max(1.0);
            prop_assert!(crate::linalg::min_sym_eigenvalue(&sub) >= -1e-10 * scale);
            let proj = &model.selection * model.selection.transpose();
            prop_assert!(crate::linalg::max_abs(&(proj - DMatrix::identity(m, m))) == 0.0);
        }
    }

    #[test]
    fn zero_flow_coeffs_are_zero() {
        let flow = OrderFlowModel::Zero;
        let (alpha, beta) = flow.conditional_mean_coeffs(3, 0.7);
        assert_eq!(alpha, DVector::zeros(3));
        assert_eq!(beta, DMatrix::zeros(3, 3));
    }
}
