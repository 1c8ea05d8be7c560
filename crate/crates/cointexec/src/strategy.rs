//! Trading-speed engines: the unrestricted optimal strategy (UL), its
//! clipped no-repurchase variant (RL), the target-tracking variant (ULT), the
//! correlated-Brownian benchmark (AC), and the near-terminal series mode.
//!
//! The optimal speed is affine in the state,
//! ν*(t) = −½a⁻¹{ 2C(t)q + (Eᵀ(t) − 𝒳)(s − θ) + D(t, μ) },
//! positive components meaning selling. The AC benchmark is the same formula
//! solved on a reduced model (κ = 0, b̄ = 0, zero target, its own covariance),
//! for which E ≡ I and D ≡ 0 collapse it to ν = −a⁻¹C(t)q.

use nalgebra::{DMatrix, DVector};

use crate::error::{CointexecError, Result};
use crate::model::{InventoryTarget, MarketModel, OrderFlowModel, PenaltySpec};
use crate::riccati::{self, AsymptoticCoeffs, RiccatiSolution};
use crate::value_terms::{self, ValueTerms};

/// Information set available to the strategy's solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InfoScenario {
    /// Solve on all n observed assets.
    FullInfo,
    /// Restrict the model to the m traded assets before solving.
    PartialInfo,
}

/// Strategy family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StrategyKind {
    /// Unrestricted liquidation: zero inventory target, repurchases allowed.
    Unrestricted,
    /// Restricted liquidation: UL speeds clipped at zero componentwise, with
    /// an absorbing stop once an asset's inventory hits zero.
    Restricted,
    /// Unrestricted liquidation tracking the benchmark inventory schedule.
    TargetTracking,
    /// Multi-asset benchmark on correlated (not co-integrated) prices.
    AlmgrenChriss,
    /// UL that switches to the near-terminal series form once T − t falls
    /// below `tau_switch`.
    SeriesTail,
}

impl StrategyKind {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::Unrestricted => "UL",
            StrategyKind::Restricted => "RL",
            StrategyKind::TargetTracking => "ULT",
            StrategyKind::AlmgrenChriss => "AC",
            StrategyKind::SeriesTail => "UL-tail",
        }
    }
}

/// Strategy parameters prior to solving.
#[derive(Debug, Clone)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Running penalty φ of this strategy.
    pub phi: f64,
    /// Penalty used to generate the target schedule (TargetTracking only).
    pub phi_ac: f64,
    /// Terminal liquidation penalty (m×m).
    pub alpha_term: DMatrix<f64>,
    /// Series-mode switch width as a fraction of the horizon (SeriesTail).
    pub tau_switch_frac: f64,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, phi: f64, alpha_term: DMatrix<f64>) -> Self {
        Self {
            kind,
            phi,
            phi_ac: 0.1,
            alpha_term,
            tau_switch_frac: 0.01,
        }
    }

    pub fn with_phi(&self, phi: f64) -> Self {
        let mut s = self.clone();
        s.phi = phi;
        s
    }
}

/// Everything needed to evaluate speeds during simulation.
#[derive(Debug, Clone)]
pub struct SolvedStrategy {
    pub label: String,
    pub kind: StrategyKind,
    /// The model the strategy believes (full, traded-restricted, or the
    /// AC reduction); its first dimension is the strategy's view width.
    pub model: MarketModel,
    pub penalty: PenaltySpec,
    pub riccati: RiccatiSolution,
    pub terms: ValueTerms,
    pub target: InventoryTarget,
    pub flow_active: bool,
    pub series: Option<SeriesMode>,
    a_inv: DMatrix<f64>,
}

/// Series-tail configuration.
#[derive(Debug, Clone)]
pub struct SeriesMode {
    pub coeffs: AsymptoticCoeffs,
    pub tau_switch: f64,
}

/// Build context shared by all strategy solves of one comparison.
pub struct SolveContext<'a> {
    pub market: &'a MarketModel,
    pub flow: &'a OrderFlowModel,
    pub scenario: InfoScenario,
    pub horizon: f64,
    pub grid_steps: usize,
    pub q0: DVector<f64>,
    /// Benchmark covariance for the AC reduction (defaults to 𝒳Σ𝒳ᵀ).
    pub sigma_ac: Option<DMatrix<f64>>,
}

/// Componentwise clip of a raw speed: negative components are set to zero,
/// and a component whose inventory has reached zero stays at zero.
pub fn clipped_speed(raw: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        raw.len(),
        raw.iter()
            .zip(q.iter())
            .map(|(&v, &qi)| if qi <= 0.0 { 0.0 } else { v.max(0.0) }),
    )
}

/// Optimal liquidation speed at state (t, s, q, μ).
///
/// `s` is the observed price vector in the strategy's view (first n_view
/// coordinates); μ may be empty when order flow is off.
pub fn optimal_speed(
    model: &MarketModel,
    riccati: &RiccatiSolution,
    terms: &ValueTerms,
    t: f64,
    s: &DVector<f64>,
    q: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (_, c, e) = riccati.coeffs_at(t)?;
    let z = s - &model.theta;
    let d = terms.d_at(t, mu);
    let a_inv = model.a_inv()?;
    let inner = 2.0 * (c * q) + (e.transpose() - &model.selection) * z + d;
    Ok(-0.5 * a_inv * inner)
}

/// Near-terminal series speed: q/τ leading term (exact for b = 0) plus the
/// first-order corrections assembled from 𝒞₋₁ and ℰ₁.
pub fn series_tail_speed(
    coeffs: &AsymptoticCoeffs,
    a_inv: &DMatrix<f64>,
    x_bbar: &DMatrix<f64>,
    q: &DVector<f64>,
    tau: f64,
    z: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    if tau <= 0.0 {
        return Err(CointexecError::InvalidInput(format!(
            "series speed needs tau > 0, got {tau}"
        )));
    }
    let m = q.len();
    // Leading: -a^{-1} C_{-1} q / tau  (= q/tau for b = 0).
    let mut nu = -(a_inv * &coeffs.c_minus1 * q) / tau;
    // Co-integration correction: -1/2 a^{-1} E1' z * tau.
    nu += -0.5 * tau * (a_inv * coeffs.e1.transpose() * z);
    // Order-flow correction from D ≈ D*τ with (I - C_{-1}a^{-1})D* = 𝒳b̄μ.
    if mu.len() > 0 && x_bbar.ncols() == mu.len() {
        let zeta = x_bbar * mu;
        let lhs = DMatrix::identity(m, m) - &coeffs.c_minus1 * a_inv;
        if let Some(d_star) = lhs.lu().solve(&zeta) {
            nu += -0.5 * tau * (a_inv * d_star);
        }
    }
    Ok(nu)
}

/// Integrates the benchmark inventory schedule dQ/dt = a⁻¹C(t)Q (that is,
/// selling at speed ν = −a⁻¹C(t)Q) forward on the solver grid.
///
/// The flow is realized as the product integral Q_{k+1} = e^{h·a⁻¹C_mid} Q_k,
/// which stays stable through the 1/(T−t) terminal growth of C that defeats
/// explicit stepping when the liquidation penalty is large. The final node is
/// pinned to zero, the limit value the schedule is built to reach.
pub fn benchmark_schedule(
    ac_model: &MarketModel,
    ac_riccati: &RiccatiSolution,
    q0: &DVector<f64>,
) -> Result<InventoryTarget> {
    let a_inv = ac_model.a_inv()?;
    let times = ac_riccati.times.clone();
    let steps = times.len() - 1;
    let h = ac_riccati.horizon / steps as f64;
    let mut values = Vec::with_capacity(times.len());
    let mut q = q0.clone();
    values.push(q.clone());
    for k in 0..steps {
        let t_mid = times[k] + 0.5 * h;
        let propagator = crate::linalg::expm(&(h * (&a_inv * ac_riccati.c_at(t_mid))));
        q = propagator * q;
        values.push(q.clone());
    }
    let m = q0.len();
    *values.last_mut().unwrap() = DVector::zeros(m);
    InventoryTarget::sampled(q0.clone(), ac_riccati.horizon, times, values)
}

/// Solves one strategy specification against the market.
pub fn solve_strategy(spec: &StrategySpec, ctx: &SolveContext<'_>) -> Result<SolvedStrategy> {
    let market = ctx.market;
    match spec.kind {
        StrategyKind::AlmgrenChriss => {
            let model = market.almgren_chriss_reduction(ctx.sigma_ac.as_ref())?;
            let penalty = PenaltySpec::new(spec.phi, spec.alpha_term.clone(), &model)?;
            let riccati = riccati::solve_for_model(&model, &penalty, ctx.horizon, ctx.grid_steps)?;
            let target = InventoryTarget::zero(ctx.q0.clone(), ctx.horizon);
            let terms = value_terms::compute_value_terms(
                &riccati,
                &model,
                &penalty,
                &target,
                &OrderFlowModel::Zero,
            )?;
            let a_inv = model.a_inv()?;
            Ok(SolvedStrategy {
                label: spec.kind.label().to_string(),
                kind: spec.kind,
                model,
                penalty,
                riccati,
                terms,
                target,
                flow_active: false,
                series: None,
                a_inv,
            })
        }
        _ => {
            let model = match ctx.scenario {
                InfoScenario::FullInfo => market.clone(),
                InfoScenario::PartialInfo => market.restrict_to_traded()?,
            };
            let penalty = PenaltySpec::new(spec.phi, spec.alpha_term.clone(), &model)?;
            let riccati = riccati::solve_for_model(&model, &penalty, ctx.horizon, ctx.grid_steps)?;

            let target = if spec.kind == StrategyKind::TargetTracking {
                let ac_model = market.almgren_chriss_reduction(ctx.sigma_ac.as_ref())?;
                let ac_penalty = PenaltySpec::new(spec.phi_ac, spec.alpha_term.clone(), &ac_model)?;
                let ac_riccati =
                    riccati::solve_for_model(&ac_model, &ac_penalty, ctx.horizon, ctx.grid_steps)?;
                benchmark_schedule(&ac_model, &ac_riccati, &ctx.q0)?
            } else {
                InventoryTarget::zero(ctx.q0.clone(), ctx.horizon)
            };

            let flow_view = restrict_flow(ctx.flow, model.n);
            let terms =
                value_terms::compute_value_terms(&riccati, &model, &penalty, &target, &flow_view)?;

            let series = if spec.kind == StrategyKind::SeriesTail {
                Some(SeriesMode {
                    coeffs: riccati::asymptotic_coefficients(&model)?,
                    tau_switch: spec.tau_switch_frac * ctx.horizon,
                })
            } else {
                None
            };
            let a_inv = model.a_inv()?;
            Ok(SolvedStrategy {
                label: spec.kind.label().to_string(),
                kind: spec.kind,
                model,
                penalty,
                riccati,
                terms,
                target,
                flow_active: !flow_view.is_zero(),
                series,
                a_inv,
            })
        }
    }
}

/// Restricts an order-flow model to the strategy's first n_view coordinates.
fn restrict_flow(flow: &OrderFlowModel, n_view: usize) -> OrderFlowModel {
    match flow {
        OrderFlowModel::Zero => OrderFlowModel::Zero,
        OrderFlowModel::AffineOu {
            kappa_mu,
            theta_mu,
            sigma_mu_cov,
        } => {
            if kappa_mu.nrows() == n_view {
                flow.clone()
            } else {
                OrderFlowModel::AffineOu {
                    kappa_mu: kappa_mu.view((0, 0), (n_view, n_view)).into_owned(),
                    theta_mu: theta_mu.rows(0, n_view).into_owned(),
                    sigma_mu_cov: sigma_mu_cov.view((0, 0), (n_view, n_view)).into_owned(),
                }
            }
        }
    }
}

impl SolvedStrategy {
    /// View width (number of assets in the strategy's model).
    pub fn view_dim(&self) -> usize {
        self.model.n
    }

    /// Raw (unclipped) speed from full-market observables. `s_full`/`mu_full`
    /// are in market coordinates; the strategy reads its first n_view entries.
    pub fn raw_speed(
        &self,
        t: f64,
        s_full: &DVector<f64>,
        q: &DVector<f64>,
        mu_full: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let nv = self.view_dim();
        let s_view = s_full.rows(0, nv).into_owned();
        let mu_view = if self.flow_active && mu_full.len() >= nv {
            mu_full.rows(0, nv).into_owned()
        } else {
            DVector::zeros(0)
        };
        if let Some(series) = &self.series {
            let tau = self.riccati.horizon - t;
            if tau > 0.0 && tau < series.tau_switch {
                let z = &s_view - &self.model.theta;
                let x_bbar = &self.model.selection * &self.model.b_bar;
                return series_tail_speed(
                    &series.coeffs,
                    &self.a_inv,
                    &x_bbar,
                    q,
                    tau,
                    &z,
                    &mu_view,
                );
            }
        }
        optimal_speed(
            &self.model,
            &self.riccati,
            &self.terms,
            t,
            &s_view,
            q,
            &mu_view,
        )
    }

    /// Executed speed: RL applies the componentwise clip; other kinds trade
    /// the raw speed.
    pub fn executed_speed(
        &self,
        t: f64,
        s_full: &DVector<f64>,
        q: &DVector<f64>,
        mu_full: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let raw = self.raw_speed(t, s_full, q, mu_full)?;
        Ok(match self.kind {
            StrategyKind::Restricted => clipped_speed(&raw, q),
            _ => raw,
        })
    }
}
