//! Linear value-function terms D(t,μ), B(t,μ), F(t,μ) for affine order flow.
//!
//! With E[μ_u | μ_t] affine in μ_t, the linear PDE system for (B, D, F)
//! collapses to deterministic coefficient ODEs for
//! D(t,μ) = D₀(t) + D₁(t)μ, B(t,μ) = B₀(t) + B₁(t)μ,
//! F(t,μ) = F₀(t) + F₁(t)ᵀμ + μᵀF₂(t)μ.
//! The module integrates those ODEs backward on the Riccati grid and, as an
//! independent route, evaluates the probabilistic representation
//! D(t,μ) = ∫ₜᵀ :e^{∫ₜᵘ Cᵀa⁻¹ ds}: {2φΣ̃𝒬_u + 𝒳b̄ E_{t,μ}[μ_u]} du
//! with the time-ordered exponential realized as a product of per-step matrix
//! exponentials on the same grid. The two routes agreeing is the uniqueness
//! statement of the probabilistic representation made testable.

use nalgebra::{DMatrix, DVector};

use crate::error::{CointexecError, Result};
use crate::linalg;
use crate::model::{InventoryTarget, MarketModel, OrderFlowModel, PenaltySpec};
use crate::riccati::RiccatiSolution;

/// Coefficient grids of the affine-in-μ value terms, sampled on the coarse
/// solver grid (the Riccati solution stores half steps; value terms live on
/// the whole steps).
#[derive(Debug, Clone)]
pub struct ValueTerms {
    pub times: Vec<f64>,
    pub d0: Vec<DVector<f64>>,
    pub d1: Vec<DMatrix<f64>>,
    pub b0: Vec<DVector<f64>>,
    pub b1: Vec<DMatrix<f64>>,
    pub f0: Vec<f64>,
    pub f1: Vec<DVector<f64>>,
    pub f2: Vec<DMatrix<f64>>,
    pub horizon: f64,
    m: usize,
    n: usize,
}

impl ValueTerms {
    /// D₀(t) by linear interpolation.
    pub fn d0_at(&self, t: f64) -> DVector<f64> {
        let (k, f) = linalg::grid_locate(&self.times, t);
        &self.d0[k] * (1.0 - f) + &self.d0[k + 1] * f
    }

    /// D₁(t) by linear interpolation.
    pub fn d1_at(&self, t: f64) -> DMatrix<f64> {
        let (k, f) = linalg::grid_locate(&self.times, t);
        &self.d1[k] * (1.0 - f) + &self.d1[k + 1] * f
    }

    /// D(t, μ) = D₀(t) + D₁(t)μ.
    pub fn d_at(&self, t: f64, mu: &DVector<f64>) -> DVector<f64> {
        if mu.len() == 0 {
            return self.d0_at(t);
        }
        self.d0_at(t) + self.d1_at(t) * mu
    }

    pub fn b_at(&self, t: f64, mu: &DVector<f64>) -> DVector<f64> {
        let (k, f) = linalg::grid_locate(&self.times, t);
        let b0 = &self.b0[k] * (1.0 - f) + &self.b0[k + 1] * f;
        if mu.len() == 0 {
            return b0;
        }
        let b1 = &self.b1[k] * (1.0 - f) + &self.b1[k + 1] * f;
        b0 + b1 * mu
    }

    pub fn f_at(&self, t: f64, mu: &DVector<f64>) -> f64 {
        let (k, f) = linalg::grid_locate(&self.times, t);
        let f0 = self.f0[k] * (1.0 - f) + self.f0[k + 1] * f;
        if mu.len() == 0 {
            return f0;
        }
        let f1 = &self.f1[k] * (1.0 - f) + &self.f1[k + 1] * f;
        let f2 = &self.f2[k] * (1.0 - f) + &self.f2[k + 1] * f;
        f0 + f1.dot(mu) + (mu.transpose() * f2 * mu)[(0, 0)]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }
}

/// Stage-exact lookup of Riccati coefficients: value-term Runge–Kutta stages
/// land on the half-step grid the Riccati solver stored.
struct FineGrid<'a> {
    sol: &'a RiccatiSolution,
}

impl<'a> FineGrid<'a> {
    fn c(&self, fine_idx: usize) -> &DMatrix<f64> {
        &self.sol.c_grid[fine_idx]
    }
    fn e(&self, fine_idx: usize) -> &DMatrix<f64> {
        &self.sol.e_grid[fine_idx]
    }
    fn a(&self, fine_idx: usize) -> &DMatrix<f64> {
        &self.sol.a_grid[fine_idx]
    }
}

struct FlowPieces {
    kappa_mu: DMatrix<f64>,
    theta_mu: DVector<f64>,
    sigma_mu: DMatrix<f64>,
    active: bool,
}

fn flow_pieces(flow: &OrderFlowModel, n: usize) -> Result<FlowPieces> {
    flow.check_dims(n)?;
    Ok(match flow {
        OrderFlowModel::Zero => FlowPieces {
            kappa_mu: DMatrix::zeros(n, n),
            theta_mu: DVector::zeros(n),
            sigma_mu: DMatrix::zeros(n, n),
            active: false,
        },
        OrderFlowModel::AffineOu {
            kappa_mu,
            theta_mu,
            sigma_mu_cov,
        } => FlowPieces {
            kappa_mu: kappa_mu.clone(),
            theta_mu: theta_mu.clone(),
            sigma_mu: sigma_mu_cov.clone(),
            active: true,
        },
    })
}

/// Integrates the coefficient ODEs backward on the shared grid by classical
/// fixed-step RK4 (stage values of A, C, E read exactly off the half-step
/// Riccati grid).
pub fn compute_value_terms(
    riccati: &RiccatiSolution,
    model: &MarketModel,
    penalty: &PenaltySpec,
    target: &InventoryTarget,
    flow: &OrderFlowModel,
) -> Result<ValueTerms> {
    let n = model.n;
    let m = model.m;
    if riccati.n != n || riccati.m != m {
        return Err(CointexecError::GridMismatch(format!(
            "riccati solved for (n,m)=({},{}), model is ({},{})",
            riccati.n, riccati.m, n, m
        )));
    }
    if (target.horizon - riccati.horizon).abs() > 1e-12 * riccati.horizon.max(1.0) {
        return Err(CointexecError::GridMismatch(
            "target horizon differs from the solved horizon".into(),
        ));
    }
    let fine_len = riccati.times.len();
    if fine_len < 3 || fine_len % 2 == 0 {
        return Err(CointexecError::GridMismatch(
            "riccati grid does not carry half steps".into(),
        ));
    }
    let coarse_steps = (fine_len - 1) / 2;
    let horizon = riccati.horizon;
    let h = horizon / coarse_steps as f64;

    let fp = flow_pieces(flow, n)?;
    let a_inv = model.a_inv()?;
    let sel = &model.selection;
    let sel_t = sel.transpose();
    let x_bbar = sel * &model.b_bar; // 𝒳 b̄, m×n
    let two_phi_sigma = 2.0 * penalty.phi * &penalty.sigma_tilde;
    let grid = FineGrid { sol: riccati };

    let times: Vec<f64> = (0..=coarse_steps)
        .map(|i| horizon * i as f64 / coarse_steps as f64)
        .collect();

    let mut d0 = vec![DVector::zeros(m); coarse_steps + 1];
    let mut d1 = vec![DMatrix::zeros(m, n); coarse_steps + 1];
    let mut b0 = vec![DVector::zeros(n); coarse_steps + 1];
    let mut b1 = vec![DMatrix::zeros(n, n); coarse_steps + 1];
    let mut f0 = vec![0.0; coarse_steps + 1];
    let mut f1 = vec![DVector::zeros(n); coarse_steps + 1];
    let mut f2 = vec![DMatrix::zeros(n, n); coarse_steps + 1];

    // Terminal conditions.
    let q0 = &target.q0;
    let f_terminal =
        model.theta.dot(&(&sel_t * q0)) - 0.5 * (q0.transpose() * model.b_traded() * q0)[(0, 0)];
    f0[coarse_steps] = f_terminal;

    #[derive(Clone)]
    struct VState {
        d0: DVector<f64>,
        d1: DMatrix<f64>,
        b0: DVector<f64>,
        b1: DMatrix<f64>,
        f0: f64,
        f1: DVector<f64>,
        f2: DMatrix<f64>,
    }

    impl VState {
        fn axpy(&self, h: f64, d: &VState) -> VState {
            VState {
                d0: &self.d0 + h * &d.d0,
                d1: &self.d1 + h * &d.d1,
                b0: &self.b0 + h * &d.b0,
                b1: &self.b1 + h * &d.b1,
                f0: self.f0 + h * d.f0,
                f1: &self.f1 + h * &d.f1,
                f2: &self.f2 + h * &d.f2,
            }
        }
        fn rk4_combine(
            &self,
            h: f64,
            k1: &VState,
            k2: &VState,
            k3: &VState,
            k4: &VState,
        ) -> VState {
            let w = h / 6.0;
            VState {
                d0: &self.d0 + w * (&k1.d0 + 2.0 * &k2.d0 + 2.0 * &k3.d0 + &k4.d0),
                d1: &self.d1 + w * (&k1.d1 + 2.0 * &k2.d1 + 2.0 * &k3.d1 + &k4.d1),
                b0: &self.b0 + w * (&k1.b0 + 2.0 * &k2.b0 + 2.0 * &k3.b0 + &k4.b0),
                b1: &self.b1 + w * (&k1.b1 + 2.0 * &k2.b1 + 2.0 * &k3.b1 + &k4.b1),
                f0: self.f0 + w * (k1.f0 + 2.0 * k2.f0 + 2.0 * k3.f0 + k4.f0),
                f1: &self.f1 + w * (&k1.f1 + 2.0 * &k2.f1 + 2.0 * &k3.f1 + &k4.f1),
                f2: &self.f2 + w * (&k1.f2 + 2.0 * &k2.f2 + 2.0 * &k3.f2 + &k4.f2),
            }
        }
    }

    // Backward derivative field in s = T − t, read at a fine grid index.
    let deriv = |fine_idx: usize, st: &VState| -> VState {
        let t = riccati.times[fine_idx];
        let c = grid.c(fine_idx);
        let e_shift = grid.e(fine_idx) - &sel_t;
        let a_mat = grid.a(fine_idx);
        let c_ainv = c * &a_inv;
        let q_t = target.at(t);
        let zeta0 = &two_phi_sigma * &q_t;
        let half_ea = 0.5 * (&e_shift * &a_inv);

        let dd0 = &c_ainv * &st.d0
            + if fp.active {
                &st.d1 * (&fp.kappa_mu * &fp.theta_mu)
            } else {
                DVector::zeros(m)
            }
            + &zeta0;
        let dd1 = if fp.active {
            &c_ainv * &st.d1 - &st.d1 * &fp.kappa_mu + &x_bbar
        } else {
            DMatrix::zeros(m, n)
        };
        let db0 = -(model.kappa.transpose() * &st.b0)
            + &half_ea * &st.d0
            + if fp.active {
                &st.b1 * (&fp.kappa_mu * &fp.theta_mu)
            } else {
                DVector::zeros(n)
            };
        let db1 = if fp.active {
            -(model.kappa.transpose() * &st.b1) - &st.b1 * &fp.kappa_mu + &half_ea * &st.d1
        } else {
            DMatrix::zeros(n, n)
        };
        let quad_d = 0.25 * (st.d0.transpose() * &a_inv * &st.d0)[(0, 0)];
        let trace_sa = (&model.sigma_cov * a_mat).trace();
        let run_pen = penalty.phi * (q_t.transpose() * &penalty.sigma_tilde * &q_t)[(0, 0)];
        let df0 = quad_d + trace_sa - run_pen
            + if fp.active {
                st.f1.dot(&(&fp.kappa_mu * &fp.theta_mu)) + (&fp.sigma_mu * &st.f2).trace()
            } else {
                0.0
            };
        let (df1, df2) = if fp.active {
            let df1 = -(fp.kappa_mu.transpose() * &st.f1)
                + 0.5 * (st.d1.transpose() * &a_inv * &st.d0)
                + 2.0 * (&st.f2 * (&fp.kappa_mu * &fp.theta_mu));
            let df2 = -(&st.f2 * &fp.kappa_mu) - fp.kappa_mu.transpose() * &st.f2
                + 0.25 * (st.d1.transpose() * &a_inv * &st.d1);
            (df1, df2)
        } else {
            (DVector::zeros(n), DMatrix::zeros(n, n))
        };
        VState {
            d0: dd0,
            d1: dd1,
            b0: db0,
            b1: db1,
            f0: df0,
            f1: df1,
            f2: df2,
        }
    };

    let mut state = VState {
        d0: DVector::zeros(m),
        d1: DMatrix::zeros(m, n),
        b0: DVector::zeros(n),
        b1: DMatrix::zeros(n, n),
        f0: f_terminal,
        f1: DVector::zeros(n),
        f2: DMatrix::zeros(n, n),
    };

    for i in (0..coarse_steps).rev() {
        // Step from t_{i+1} down to t_i; stages at fine indices 2i+2, 2i+1, 2i.
        let k1 = deriv(2 * i + 2, &state);
        let k2 = deriv(2 * i + 1, &state.axpy(0.5 * h, &k1));
        let k3 = deriv(2 * i + 1, &state.axpy(0.5 * h, &k2));
        let k4 = deriv(2 * i, &state.axpy(h, &k3));
        state = state.rk4_combine(h, &k1, &k2, &k3, &k4);
        state.f2 = linalg::symmetrize(&state.f2);

        d0[i] = state.d0.clone();
        d1[i] = state.d1.clone();
        b0[i] = state.b0.clone();
        b1[i] = state.b1.clone();
        f0[i] = state.f0;
        f1[i] = state.f1.clone();
        f2[i] = state.f2.clone();
    }

    Ok(ValueTerms {
        times,
        d0,
        d1,
        b0,
        b1,
        f0,
        f1,
        f2,
        horizon,
        m,
        n,
    })
}

/// Independent evaluation of D on the coarse grid through the time-ordered
/// exponential representation: per-step matrix exponentials of Cᵀa⁻¹ sampled
/// at step midpoints, with two-point Gauss–Legendre for the within-step
/// integral. Returns (D₀, D₁) grids.
pub fn d_quadrature(
    riccati: &RiccatiSolution,
    model: &MarketModel,
    penalty: &PenaltySpec,
    target: &InventoryTarget,
    flow: &OrderFlowModel,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let n = model.n;
    let m = model.m;
    let fine_len = riccati.times.len();
    if fine_len < 3 || fine_len % 2 == 0 {
        return Err(CointexecError::GridMismatch(
            "riccati grid does not carry half steps".into(),
        ));
    }
    let coarse_steps = (fine_len - 1) / 2;
    let h = riccati.horizon / coarse_steps as f64;
    let fp = flow_pieces(flow, n)?;
    let a_inv = model.a_inv()?;
    let x_bbar = &model.selection * &model.b_bar;
    let two_phi_sigma = 2.0 * penalty.phi * &penalty.sigma_tilde;

    // Gauss nodes inside a step of length h.
    let s1 = 0.5 * h * (1.0 - 1.0 / 3f64.sqrt());
    let s2 = 0.5 * h * (1.0 + 1.0 / 3f64.sqrt());

    // Constant flow propagators for the node offsets.
    let (ek_s1, ek_s2, ek_h) = if fp.active {
        (
            linalg::expm(&(-&fp.kappa_mu * s1)),
            linalg::expm(&(-&fp.kappa_mu * s2)),
            linalg::expm(&(-&fp.kappa_mu * h)),
        )
    } else {
        (
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
        )
    };

    let mut d0_q = vec![DVector::zeros(m); coarse_steps + 1];
    let mut d1_q = vec![DMatrix::zeros(m, n); coarse_steps + 1];

    let mut p_acc: DVector<f64> = DVector::zeros(m);
    let mut j_acc: DMatrix<f64> = DMatrix::zeros(m, n);

    for i in (0..coarse_steps).rev() {
        let t_i = riccati.times[2 * i];
        let c_mid = &riccati.c_grid[2 * i + 1];
        let c_tilde = c_mid * &a_inv;
        let k_s1 = linalg::expm(&(&c_tilde * s1));
        let k_s2 = linalg::expm(&(&c_tilde * s2));
        let k_h = linalg::expm(&(&c_tilde * h));

        // Source 2φΣ̃𝒬 + 𝒳b̄θ_μ at the Gauss nodes.
        let g = |s: f64| -> DVector<f64> {
            let mut v = &two_phi_sigma * target.at(t_i + s);
            if fp.active {
                v += &x_bbar * &fp.theta_mu;
            }
            v
        };
        let p_local = 0.5 * h * (&k_s1 * g(s1) + &k_s2 * g(s2));
        p_acc = p_local + &k_h * p_acc;

        if fp.active {
            let j_local = 0.5 * h * (&k_s1 * &x_bbar * &ek_s1 + &k_s2 * &x_bbar * &ek_s2);
            j_acc = j_local + &k_h * j_acc * &ek_h;
            d1_q[i] = j_acc.clone();
            d0_q[i] = &p_acc - &j_acc * &fp.theta_mu;
        } else {
            d0_q[i] = p_acc.clone();
        }
    }

    Ok((d0_q, d1_q))
}

/// Quadratic-form value function
/// H = y + zᵀAz + zᵀB + qᵀCq + qᵀD + zᵀEq + F with interpolated coefficients.
pub fn evaluate_value_function(
    terms: &ValueTerms,
    riccati: &RiccatiSolution,
    t: f64,
    y: f64,
    z: &DVector<f64>,
    q: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<f64> {
    if t < -1e-12 || t > terms.horizon * (1.0 + 1e-12) {
        return Err(CointexecError::OutOfHorizon {
            t,
            horizon: terms.horizon,
        });
    }
    let (a, c, e) = riccati.coeffs_at(t)?;
    let d = terms.d_at(t, mu);
    let b = terms.b_at(t, mu);
    let f = terms.f_at(t, mu);
    Ok(y + (z.transpose() * a * z)[(0, 0)]
        + z.dot(&b)
        + (q.transpose() * c * q)[(0, 0)]
        + q.dot(&d)
        + (z.transpose() * e * q)[(0, 0)]
        + f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetSchedule;
    use crate::riccati::solve_for_model;
    use crate::rng::CounterRng;

    fn scalar_model(a: f64, kappa: f64, b_bar: f64) -> MarketModel {
        MarketModel::new(
            DMatrix::from_element(1, 1, kappa),
            DVector::from_element(1, 10.0),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, b_bar),
            DMatrix::from_element(1, 1, a),
            1,
        )
        .unwrap()
    }

    fn linear_target(q0: DVector<f64>, horizon: f64, nodes: usize) -> InventoryTarget {
        let times: Vec<f64> = (0..=nodes)
            .map(|k| horizon * k as f64 / nodes as f64)
            .collect();
        let values: Vec<DVector<f64>> = times.iter().map(|&t| &q0 * (1.0 - t / horizon)).collect();
        InventoryTarget::sampled(q0, horizon, times, values).unwrap()
    }

    #[test]
    fn d_vanishes_without_flow_impact_and_target() {
        let model = scalar_model(0.5, 1.0, 0.0);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 1000).unwrap();
        let target = InventoryTarget::zero(DVector::from_element(1, 5.0), 1.0);
        let flow = OrderFlowModel::AffineOu {
            kappa_mu: DMatrix::from_element(1, 1, 2.0),
            theta_mu: DVector::from_element(1, 0.3),
            sigma_mu_cov: DMatrix::from_element(1, 1, 0.1),
        };
        let terms = compute_value_terms(&sol, &model, &penalty, &target, &flow).unwrap();
        for k in (0..terms.times.len()).step_by(53) {
            assert!(terms.d0[k].amax() < 1e-14);
            assert!(linalg::max_abs(&terms.d1[k]) < 1e-14);
        }
    }

    #[test]
    fn dual_route_agreement_scalar_linear_target() {
        // kappa = 0, b = 0, zero flow, Q_t = Q0 (1 - t/T): the coefficient ODE
        // and the time-ordered quadrature must agree to 1e-8 relative.
        let model = scalar_model(0.5, 0.0, 0.0);
        let penalty = PenaltySpec::isotropic(0.6, 20.0, &model).unwrap();
        let steps = 4000;
        let sol = solve_for_model(&model, &penalty, 1.0, steps).unwrap();
        let target = linear_target(DVector::from_element(1, 3.0), 1.0, 2 * steps);
        let terms =
            compute_value_terms(&sol, &model, &penalty, &target, &OrderFlowModel::Zero).unwrap();
        let (d0_q, _) =
            d_quadrature(&sol, &model, &penalty, &target, &OrderFlowModel::Zero).unwrap();
        let scale = terms.d0.iter().map(|v| v.amax()).fold(0.0f64, f64::max);
        for k in (0..terms.times.len()).step_by(101) {
            let diff = (&terms.d0[k] - &d0_q[k]).amax();
            assert!(
                diff <= 1e-8 * scale,
                "k={k}: diff {diff:.3e} scale {scale:.3e}"
            );
        }
    }

    #[test]
    fn terminal_conditions_hold() {
        let mut model = scalar_model(0.5, 1.0, 0.4);
        model.b_perm = DMatrix::from_element(1, 1, 2.0);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 500).unwrap();
        let q0 = DVector::from_element(1, 5.0);
        let target = linear_target(q0.clone(), 1.0, 1000);
        let flow = OrderFlowModel::AffineOu {
            kappa_mu: DMatrix::from_element(1, 1, 1.5),
            theta_mu: DVector::from_element(1, 0.2),
            sigma_mu_cov: DMatrix::from_element(1, 1, 0.3),
        };
        let terms = compute_value_terms(&sol, &model, &penalty, &target, &flow).unwrap();
        let last = terms.times.len() - 1;
        assert!(terms.d0[last].amax() < 1e-12);
        assert!(linalg::max_abs(&terms.d1[last]) < 1e-12);
        assert!(terms.b0[last].amax() < 1e-12);
        assert!(linalg::max_abs(&terms.b1[last]) < 1e-12);
        // F(T) = theta'X'Q0 - Q0'XbX'Q0/2 = 10*5 - 0.5*2*25 = 25.
        assert!((terms.f0[last] - 25.0).abs() < 1e-10);
    }

    #[test]
    fn zero_flow_kills_mu_blocks_of_f() {
        let model = scalar_model(0.5, 1.0, 0.7);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 500).unwrap();
        let target = linear_target(DVector::from_element(1, 5.0), 1.0, 1000);
        let terms =
            compute_value_terms(&sol, &model, &penalty, &target, &OrderFlowModel::Zero).unwrap();
        for k in 0..terms.times.len() {
            assert_eq!(terms.f1[k].amax(), 0.0);
            assert_eq!(linalg::max_abs(&terms.f2[k]), 0.0);
        }
    }

    #[test]
    fn value_function_examples() {
        let model = scalar_model(0.5, 1.0, 0.0);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 500).unwrap();
        let q0 = DVector::from_element(1, 5.0);
        let target = InventoryTarget::zero(q0.clone(), 1.0);
        let terms =
            compute_value_terms(&sol, &model, &penalty, &target, &OrderFlowModel::Zero).unwrap();

        // t = T with b = 0: H = y + z X' q - alpha q^2 + theta' X' Q0.
        let (y, z, q) = (
            2.0,
            DVector::from_element(1, 0.7),
            DVector::from_element(1, 3.0),
        );
        let mu = DVector::zeros(0);
        let h = evaluate_value_function(&terms, &sol, 1.0, y, &z, &q, &mu).unwrap();
        let expected = y + 0.7 * 3.0 - 50.0 * 9.0 + 10.0 * 5.0;
        assert!((h - expected).abs() < 1e-9);

        // q = 0, z = 0: H = y + F(t).
        let h = evaluate_value_function(
            &terms,
            &sol,
            0.37,
            y,
            &DVector::zeros(1),
            &DVector::zeros(1),
            &mu,
        )
        .unwrap();
        assert!((h - (y + terms.f_at(0.37, &mu))).abs() < 1e-12);

        // Out-of-horizon time errors.
        assert!(evaluate_value_function(&terms, &sol, 1.5, y, &z, &q, &mu).is_err());
    }

    #[test]
    fn ac_reduction_value_is_quadratic_in_q_only() {
        // kappa=0, m=n, zero target: H(0, y, z, q) = y + q'C(0)q + F(0).
        let model = scalar_model(0.5, 0.0, 0.0);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 500).unwrap();
        let target = InventoryTarget::zero(DVector::from_element(1, 5.0), 1.0);
        let terms =
            compute_value_terms(&sol, &model, &penalty, &target, &OrderFlowModel::Zero).unwrap();
        let q = DVector::from_element(1, 2.0);
        let mu = DVector::zeros(0);
        let h =
            evaluate_value_function(&terms, &sol, 0.0, 1.0, &DVector::zeros(1), &q, &mu).unwrap();
        let c0 = sol.c_at(0.0)[(0, 0)];
        let expected = 1.0 + c0 * 4.0 + terms.f0[0];
        assert!((h - expected).abs() < 1e-10);
        // With z off the mean, only the z'Eq cross term (E ≡ I here) enters.
        let z = DVector::from_element(1, 0.9);
        let h = evaluate_value_function(&terms, &sol, 0.0, 1.0, &z, &q, &mu).unwrap();
        assert!((h - (expected + 0.9 * 2.0)).abs() < 1e-10);
    }

    /// Monte Carlo sanity for the probabilistic representation: the sample
    /// average of ∫ K(0,u) ζ(u, μ_u) du over simulated flow paths matches
    /// D(0, μ₀) within three standard errors.
    #[test]
    fn martingale_representation_monte_carlo() {
        let model = scalar_model(0.8, 0.0, 0.5);
        let penalty = PenaltySpec::isotropic(0.3, 10.0, &model).unwrap();
        let steps = 600;
        let sol = solve_for_model(&model, &penalty, 1.0, steps).unwrap();
        let target = linear_target(DVector::from_element(1, 2.0), 1.0, 2 * steps);
        let kappa_mu = 1.7;
        let theta_mu = 0.4;
        let sigma_mu = 0.6;
        let flow = OrderFlowModel::AffineOu {
            kappa_mu: DMatrix::from_element(1, 1, kappa_mu),
            theta_mu: DVector::from_element(1, theta_mu),
            sigma_mu_cov: DMatrix::from_element(1, 1, sigma_mu * sigma_mu),
        };
        let terms = compute_value_terms(&sol, &model, &penalty, &target, &flow).unwrap();
        let mu0 = 1.1;
        let d_exact = terms.d0[0][0] + terms.d1[0][(0, 0)] * mu0;

        // Precompute the scalar kernel K(0, t_k) on the coarse grid.
        let a_inv = 1.0 / 0.8;
        let h = 1.0 / steps as f64;
        let mut kernel = vec![0.0f64; steps + 1];
        kernel[0] = 1.0;
        for i in 0..steps {
            let c_mid = sol.c_grid[2 * i + 1][(0, 0)];
            kernel[i + 1] = kernel[i] * (c_mid * a_inv * h).exp();
        }

        let paths = 10_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for p in 0..paths {
            let mut rng = CounterRng::from_stream(99, p as u64);
            let mut mu = mu0;
            let mut integral = 0.0;
            for i in 0..steps {
                let t = i as f64 * h;
                let zeta = 2.0 * penalty.phi * penalty.sigma_tilde[(0, 0)] * target.at(t)[0]
                    + model.b_bar[(0, 0)] * mu;
                // trapezoid in time, kernel at the left node
                integral += kernel[i] * zeta * h;
                mu += kappa_mu * (theta_mu - mu) * h + sigma_mu * h.sqrt() * rng.standard_normal();
            }
            sum += integral;
            sum_sq += integral * integral;
        }
        let mean = sum / paths as f64;
        let var = (sum_sq / paths as f64 - mean * mean).max(0.0);
        let se = (var / paths as f64).sqrt();
        // Allow three standard errors plus the O(h) discretization bias.
        let tol = 3.0 * se + 5e-3 * d_exact.abs().max(1.0);
        assert!(
            (mean - d_exact).abs() < tol,
            "MC mean {mean} vs D(0,mu0) {d_exact} (se {se:.2e})"
        );
    }

    /// Scalar cross-check of the probabilistic representation of B with the
    /// conditional flow expectation: dense quadrature of
    /// ∫ e^{−κ(u−t)} ½(E−𝒳ᵀ)a⁻¹ E_{t,μ}[D(u, μ_u)] du against the ODE route.
    #[test]
    fn b_representation_quadrature_scalar() {
        let kappa = 1.3;
        let a = 0.8;
        let b_bar = 0.6;
        let model = scalar_model(a, kappa, b_bar);
        let penalty = PenaltySpec::isotropic(0.25, 8.0, &model).unwrap();
        let steps = 2000;
        let sol = solve_for_model(&model, &penalty, 1.0, steps).unwrap();
        let target = linear_target(DVector::from_element(1, 2.0), 1.0, 2 * steps);
        let (kappa_mu, theta_mu) = (1.9, 0.35);
        let flow = OrderFlowModel::AffineOu {
            kappa_mu: DMatrix::from_element(1, 1, kappa_mu),
            theta_mu: DVector::from_element(1, theta_mu),
            sigma_mu_cov: DMatrix::from_element(1, 1, 0.2),
        };
        let terms = compute_value_terms(&sol, &model, &penalty, &target, &flow).unwrap();

        let mu0 = 0.9;
        let h = 1.0 / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let u = i as f64 * h;
            let weight = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let e_u = sol.e_grid[2 * i][(0, 0)];
            let mean_mu = theta_mu + (-kappa_mu * u).exp() * (mu0 - theta_mu);
            let d_u = terms.d0[i][0] + terms.d1[i][(0, 0)] * mean_mu;
            integral += weight * h * (-kappa * u).exp() * 0.5 * (e_u - 1.0) / a * d_u;
        }
        let ode_value = terms.b_at(0.0, &DVector::from_element(1, mu0))[0];
        assert!(
            (integral - ode_value).abs() < 1e-4 * ode_value.abs().max(1e-3),
            "quadrature {integral} vs ODE {ode_value}"
        );
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let model = scalar_model(0.5, 0.0, 0.0);
        let penalty = PenaltySpec::isotropic(0.4, 50.0, &model).unwrap();
        let sol = solve_for_model(&model, &penalty, 1.0, 200).unwrap();
        let target = InventoryTarget::zero(DVector::from_element(1, 5.0), 2.0);
        let err = compute_value_terms(&sol, &model, &penalty, &target, &OrderFlowModel::Zero)
            .unwrap_err();
        assert!(matches!(err, CointexecError::GridMismatch(_)));
    }

    #[test]
    fn sampled_schedule_enum_shape() {
        let target = linear_target(DVector::from_element(1, 4.0), 1.0, 10);
        assert!(matches!(target.schedule, TargetSchedule::Sampled { .. }));
    }
}
