//! Monte Carlo simulation of co-integrated midprices, impacted execution, and
//! strategy wealth, with common random numbers across strategies.
//!
//! Market dynamics are Euler–Maruyama on the centered price Z = S − θ with
//! step Δt = T/step_count and increments drawn from a factor of Σ·Δt; order
//! flow (when on) is simulated alongside. Every path owns a counter-based
//! RNG substream keyed by seed ⊕ path index, so results are bit-identical for
//! any thread count; strategies are advanced in lockstep inside a single path
//! loop, which realizes the common-random-numbers coupling exactly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CointexecError, Result};
use crate::linalg;
use crate::model::{MarketModel, OrderFlowModel};
use crate::riccati::DEFAULT_GRID_STEPS;
use crate::rng::CounterRng;
use crate::strategy::{InfoScenario, SolveContext, SolvedStrategy, StrategyKind, StrategySpec};

/// Quantile levels reported for relative savings.
pub const SAVINGS_QUANTILES: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

/// Simulation configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub path_count: usize,
    /// Number of Euler steps over the execution window (3600 = one-second
    /// steps over a one-hour window).
    pub step_count: usize,
    pub rng_seed: u64,
    /// Initial centered price Z₀ = S₀ − θ (defaults to zero: prices start on
    /// the mean and the co-integration signal arises endogenously).
    pub z0: DVector<f64>,
    /// Initial inventory of the m traded assets.
    pub q0: DVector<f64>,
    pub scenario: InfoScenario,
    /// Execution window in model time units.
    pub horizon: f64,
    /// Grid resolution of the strategy solves.
    pub grid_steps: usize,
    /// Benchmark covariance for the AC reduction (None → 𝒳Σ𝒳ᵀ).
    pub sigma_ac: Option<DMatrix<f64>>,
}

impl SimConfig {
    pub fn new(model: &MarketModel, q0: DVector<f64>) -> Self {
        Self {
            path_count: 10_000,
            step_count: 3600,
            rng_seed: 1,
            z0: DVector::zeros(model.n),
            q0,
            scenario: InfoScenario::FullInfo,
            horizon: 1.0 / 6.5,
            grid_steps: DEFAULT_GRID_STEPS,
            sigma_ac: None,
        }
    }

    fn check(&self, model: &MarketModel) -> Result<()> {
        if self.step_count < 2 {
            return Err(CointexecError::InvalidInput(
                "step_count must be >= 2".into(),
            ));
        }
        if self.path_count < 1 {
            return Err(CointexecError::InvalidInput(
                "path_count must be >= 1".into(),
            ));
        }
        if self.z0.len() != model.n {
            return Err(CointexecError::DimensionMismatch {
                field: "z0",
                expected: model.n.to_string(),
                actual: self.z0.len().to_string(),
            });
        }
        if self.q0.len() != model.m {
            return Err(CointexecError::DimensionMismatch {
                field: "q0",
                expected: model.m.to_string(),
                actual: self.q0.len().to_string(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Market stepping
// ---------------------------------------------------------------------------

/// Flattened market propagator shared by all paths.
struct MarketStepper {
    n: usize,
    n_flow: usize,
    dt: f64,
    kappa: Vec<f64>,     // n×n row-major
    factor_z: Vec<f64>,  // n×n row-major, factor of Σ·Δt
    kappa_mu: Vec<f64>,  // n_f×n_f
    theta_mu: Vec<f64>,  // n_f
    factor_mu: Vec<f64>, // n_f×n_f, factor of Σ_μ·Δt
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = m[(i, j)];
        }
    }
    out
}

impl MarketStepper {
    fn new(model: &MarketModel, flow: &OrderFlowModel, dt: f64) -> Result<Self> {
        let factor_z = linalg::psd_factor(&model.sigma_cov)? * dt.sqrt();
        let (n_flow, kappa_mu, theta_mu, factor_mu) = match flow {
            OrderFlowModel::Zero => (0, Vec::new(), Vec::new(), Vec::new()),
            OrderFlowModel::AffineOu {
                kappa_mu,
                theta_mu,
                sigma_mu_cov,
            } => {
                flow.check_dims(model.n)?;
                let f = linalg::psd_factor(sigma_mu_cov)? * dt.sqrt();
                (
                    model.n,
                    flatten(kappa_mu),
                    theta_mu.iter().copied().collect(),
                    flatten(&f),
                )
            }
        };
        Ok(Self {
            n: model.n,
            n_flow,
            dt,
            kappa: flatten(&model.kappa),
            factor_z: flatten(&factor_z),
            kappa_mu,
            theta_mu,
            factor_mu,
        })
    }

    /// One Euler step: updates z (and mu, m_acc when flow is on) in place.
    /// Draw order per step is fixed: n normals for z, then n for the flow.
    fn step(
        &self,
        rng: &mut CounterRng,
        z: &mut [f64],
        mu: &mut [f64],
        m_acc: &mut [f64],
        xi: &mut [f64],
        drift: &mut [f64],
    ) {
        let n = self.n;
        rng.fill_standard_normal(&mut xi[..n]);
        for i in 0..n {
            let mut d = 0.0;
            let mut diff = 0.0;
            for j in 0..n {
                d += self.kappa[i * n + j] * z[j];
                diff += self.factor_z[i * n + j] * xi[j];
            }
            drift[i] = -d * self.dt + diff;
        }
        for i in 0..n {
            z[i] += drift[i];
        }
        if self.n_flow > 0 {
            let nf = self.n_flow;
            rng.fill_standard_normal(&mut xi[..nf]);
            for i in 0..nf {
                m_acc[i] += mu[i] * self.dt;
            }
            for i in 0..nf {
                let mut d = 0.0;
                let mut diff = 0.0;
                for j in 0..nf {
                    d += self.kappa_mu[i * nf + j] * (self.theta_mu[j] - mu[j]);
                    diff += self.factor_mu[i * nf + j] * xi[j];
                }
                drift[i] = d * self.dt + diff;
            }
            for i in 0..nf {
                mu[i] += drift[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Materialized market paths (small-scale API and tests)
// ---------------------------------------------------------------------------

/// Simulated market trajectories; memory is O(paths × steps × n), so this is
/// intended for moderate path counts — the strategy comparison streams paths
/// instead of materializing them.
pub struct MarketPaths {
    pub times: Vec<f64>,
    /// z[path][step] (step 0 ..= step_count).
    pub z: Vec<Vec<DVector<f64>>>,
    /// mu[path][step]; empty vectors when flow is off.
    pub mu: Vec<Vec<DVector<f64>>>,
    pub dt: f64,
}

/// Simulates the centered price (and order-flow) paths.
pub fn simulate_paths(
    model: &MarketModel,
    flow: &OrderFlowModel,
    config: &SimConfig,
) -> Result<MarketPaths> {
    config.check(model)?;
    let steps = config.step_count;
    let dt = config.horizon / steps as f64;
    let stepper = MarketStepper::new(model, flow, dt)?;
    let n = model.n;
    let nf = stepper.n_flow;
    let mu0 = match flow {
        OrderFlowModel::Zero => Vec::new(),
        OrderFlowModel::AffineOu { theta_mu, .. } => theta_mu.iter().copied().collect(),
    };

    let paths: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)> = (0..config.path_count)
        .into_par_iter()
        .map(|p| {
            let mut rng = CounterRng::from_stream(config.rng_seed, p as u64);
            let mut z: Vec<f64> = config.z0.iter().copied().collect();
            let mut mu = mu0.clone();
            let mut m_acc = vec![0.0; nf];
            let mut xi = vec![0.0; n.max(nf)];
            let mut drift = vec![0.0; n.max(nf)];
            let mut z_traj = Vec::with_capacity(steps + 1);
            let mut mu_traj = Vec::with_capacity(steps + 1);
            z_traj.push(DVector::from_vec(z.clone()));
            mu_traj.push(DVector::from_vec(mu.clone()));
            for _ in 0..steps {
                stepper.step(&mut rng, &mut z, &mut mu, &mut m_acc, &mut xi, &mut drift);
                z_traj.push(DVector::from_vec(z.clone()));
                mu_traj.push(DVector::from_vec(mu.clone()));
            }
            (z_traj, mu_traj)
        })
        .collect();

    let times = (0..=steps).map(|k| dt * k as f64).collect();
    let (z, mu): (Vec<_>, Vec<_>) = paths.into_iter().unzip();
    Ok(MarketPaths { times, z, mu, dt })
}

// ---------------------------------------------------------------------------
// Speed tables
// ---------------------------------------------------------------------------

/// Per-step affine representation of a strategy's speed rule:
/// ν(k) = MQ[k]·q + MZ[k]·z_view + d0[k] + D1[k]·μ_view.
struct SpeedTable {
    kind: StrategyKind,
    view_dim: usize,
    flow_active: bool,
    m: usize,
    theta_view: Vec<f64>,
    mq: Vec<f64>,    // steps × m × m
    mz: Vec<f64>,    // steps × m × view_dim
    d0: Vec<f64>,    // steps × m
    d1: Vec<f64>,    // steps × m × view_dim (flow)
    alpha: Vec<f64>, // m × m
    a: Vec<f64>,     // m × m temporary impact (market's)
}

fn build_speed_table(
    solved: &SolvedStrategy,
    market: &MarketModel,
    sim_times: &[f64],
    horizon: f64,
) -> Result<SpeedTable> {
    let m = solved.model.m;
    let nv = solved.view_dim();
    let steps = sim_times.len();
    let a_inv = solved.model.a_inv()?;
    let sel = &solved.model.selection;

    let mut mq = vec![0.0; steps * m * m];
    let mut mz = vec![0.0; steps * m * nv];
    let mut d0 = vec![0.0; steps * m];
    let mut d1 = vec![
        0.0;
        if solved.flow_active {
            steps * m * nv
        } else {
            0
        }
    ];

    // Final step: execute to the control's own terminal target. Over the last
    // interval the inventory pull obeys the phi-free closed form, whose exact
    // propagator is (I + Δt a⁻¹(α − ½𝒳b𝒳ᵀ))⁻¹; the state-feedback terms are
    // O(τ) there and their executed volume dies under the pull. Freezing the
    // 1/τ rule at the step start instead would leave an O(Δt²) remainder that
    // the terminal penalty then misprices.
    let dt = if steps >= 2 {
        sim_times[1] - sim_times[0]
    } else {
        horizon
    };
    let terminal_gap = &solved.penalty.alpha_term - 0.5 * solved.model.b_traded();
    let last_propagator = (DMatrix::identity(m, m) + dt * (&a_inv * terminal_gap))
        .try_inverse()
        .ok_or_else(|| CointexecError::Numerical("terminal propagator not invertible".into()))?;
    let last_mq = (DMatrix::identity(m, m) - last_propagator) / dt;

    for (k, &t) in sim_times.iter().enumerate() {
        if k == steps - 1 {
            for i in 0..m {
                for j in 0..m {
                    mq[(k * m + i) * m + j] = last_mq[(i, j)];
                }
            }
            continue;
        }
        let tau = horizon - t;
        let (cmat, emat, dvec, d1mat) = match &solved.series {
            Some(series) if tau > 0.0 && tau < series.tau_switch => {
                // Affine series form: MQ = -a^{-1}C_{-1}/tau, MZ = -tau/2 a^{-1}E1'.
                let cq = &series.coeffs.c_minus1 / tau;
                let e_shift_t = tau * series.coeffs.e1.transpose();
                let d1s = if solved.flow_active {
                    let x_bbar = sel * &solved.model.b_bar;
                    let lhs = DMatrix::identity(m, m) - &series.coeffs.c_minus1 * &a_inv;
                    let solved_mat = lhs
                        .lu()
                        .solve(&x_bbar)
                        .unwrap_or_else(|| DMatrix::zeros(m, nv));
                    Some(tau * solved_mat)
                } else {
                    None
                };
                (cq, e_shift_t, DVector::zeros(m), d1s)
            }
            _ => {
                let (_, c, e) = solved.riccati.coeffs_at(t.min(horizon))?;
                let e_shift_t = e.transpose() - sel;
                let dvec = solved.terms.d0_at(t.min(horizon));
                let d1m = if solved.flow_active {
                    Some(solved.terms.d1_at(t.min(horizon)))
                } else {
                    None
                };
                (c, e_shift_t, dvec, d1m)
            }
        };

        let mq_k = -(&a_inv) * &cmat; // -a^{-1} C
        let mz_k = -0.5 * (&a_inv) * &emat; // -1/2 a^{-1} (E' - X)
        let d0_k = -0.5 * (&a_inv) * &dvec;
        for i in 0..m {
            for j in 0..m {
                mq[(k * m + i) * m + j] = mq_k[(i, j)];
            }
            for j in 0..nv {
                mz[(k * m + i) * nv + j] = mz_k[(i, j)];
            }
            d0[k * m + i] = d0_k[i];
        }
        if let Some(d1m) = d1mat {
            let d1_k = -0.5 * (&a_inv) * &d1m;
            for i in 0..m {
                for j in 0..nv {
                    d1[(k * m + i) * nv + j] = d1_k[(i, j)];
                }
            }
        }
    }

    Ok(SpeedTable {
        kind: solved.kind,
        view_dim: nv,
        flow_active: solved.flow_active,
        m,
        theta_view: solved.model.theta.iter().copied().collect(),
        mq,
        mz,
        d0,
        d1,
        alpha: flatten(&solved.penalty.alpha_term),
        a: flatten(&market.a_temp),
    })
}

impl SpeedTable {
    /// Executed speed at step k given the full-market state; also reports the
    /// raw-speed signs via `nu`.
    #[inline]
    fn speed_into(
        &self,
        k: usize,
        s_full: &[f64],
        q: &[f64],
        mu_full: &[f64],
        dt: f64,
        nu: &mut [f64],
    ) {
        let m = self.m;
        let nv = self.view_dim;
        for i in 0..m {
            let mut v = self.d0[k * m + i];
            for j in 0..m {
                v += self.mq[(k * m + i) * m + j] * q[j];
            }
            let row = (k * m + i) * nv;
            for j in 0..nv {
                v += self.mz[row + j] * (s_full[j] - self.theta_view[j]);
            }
            if self.flow_active {
                for j in 0..nv {
                    v += self.d1[row + j] * mu_full[j];
                }
            }
            nu[i] = v;
        }
        if self.kind == StrategyKind::Restricted {
            for i in 0..m {
                if q[i] <= 0.0 {
                    nu[i] = 0.0;
                } else {
                    // Clip repurchases; cap so inventory cannot overshoot zero
                    // within the step (the stop at zero is absorbing).
                    nu[i] = nu[i].max(0.0).min(q[i] / dt);
                }
            }
        }
    }
}

/// Cash increment of one step: (P̃ᵀ ν)Δt with P̃ = p_traded − a·ν.
#[inline]
pub(crate) fn wealth_increment(p_traded: &[f64], a: &[f64], nu: &[f64], dt: f64) -> f64 {
    let m = nu.len();
    let mut acc = 0.0;
    for i in 0..m {
        let mut a_nu = 0.0;
        for j in 0..m {
            a_nu += a[i * m + j] * nu[j];
        }
        acc += (p_traded[i] - a_nu) * nu[i];
    }
    acc * dt
}

// ---------------------------------------------------------------------------
// Outcomes and summaries
// ---------------------------------------------------------------------------

/// Cross-path statistics of one strategy at one φ.
#[derive(Debug, Clone, Serialize)]
pub struct StrategySummary {
    pub label: String,
    pub mean_wealth: f64,
    pub std_wealth: f64,
    pub mean_savings_bps: f64,
    pub se_savings_bps: f64,
    /// 5/25/50/75/95% quantiles of savings vs the AC benchmark, in bps.
    pub savings_quantiles_bps: Vec<f64>,
    /// Percent of paths strictly underperforming the AC benchmark.
    pub underperform_pct: f64,
    /// Percent of paths with at least one negative-speed step, per asset.
    pub repurchase_path_pct: Vec<f64>,
    /// Percent of time steps with negative speed, per asset.
    pub negative_speed_step_pct: Vec<f64>,
    /// Largest |Q_T| component across paths, per asset.
    pub max_abs_terminal_inventory: Vec<f64>,
}

/// Results for a single φ value.
#[derive(Debug, Clone, Serialize)]
pub struct PhiOutcome {
    pub phi: f64,
    pub strategies: Vec<StrategySummary>,
    /// Per-path terminal wealth, [strategy][path] (not serialized).
    #[serde(skip)]
    pub wealth: Vec<Vec<f64>>,
    /// Per-path savings vs AC in bps, [strategy][path] (not serialized).
    #[serde(skip)]
    pub savings_bps: Vec<Vec<f64>>,
    /// Per-path repurchase indicator, [strategy][path][asset] (not serialized).
    #[serde(skip)]
    pub repurchased: Vec<Vec<Vec<bool>>>,
}

/// Full comparison output.
#[derive(Debug, Clone, Serialize)]
pub struct SimRun {
    pub horizon: f64,
    pub step_count: usize,
    pub path_count: usize,
    pub rng_seed: u64,
    pub scenario: InfoScenario,
    pub labels: Vec<String>,
    pub outcomes: Vec<PhiOutcome>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

struct PathAccumulator {
    wealth: Vec<Vec<f64>>,
    repurchased: Vec<Vec<Vec<bool>>>, // [strategy][path][asset]
    neg_any: Vec<Vec<u64>>,           // [strategy][asset] paths with >=1 negative step
    neg_steps: Vec<Vec<u64>>,         // [strategy][asset] negative-step counts
    max_q_t: Vec<Vec<f64>>,           // [strategy][asset]
}

// ---------------------------------------------------------------------------
// Strategy comparison under common random numbers
// ---------------------------------------------------------------------------

/// Runs every strategy in `specs` (which must include the AC benchmark) for
/// each φ in `phi_grid`, under common random numbers, and assembles the
/// savings, underperformance, and repurchase statistics.
pub fn compare_strategies(
    market: &MarketModel,
    flow: &OrderFlowModel,
    config: &SimConfig,
    specs: &[StrategySpec],
    phi_grid: &[f64],
) -> Result<SimRun> {
    config.check(market)?;
    if phi_grid.is_empty() {
        return Err(CointexecError::InvalidInput("phi grid is empty".into()));
    }
    if phi_grid.iter().any(|&phi| phi < 0.0) {
        return Err(CointexecError::InvalidInput(
            "phi values must be >= 0".into(),
        ));
    }
    let ac_index = specs
        .iter()
        .position(|s| s.kind == StrategyKind::AlmgrenChriss)
        .ok_or_else(|| {
            CointexecError::InvalidInput("strategy list must include the AC benchmark".into())
        })?;

    let mut outcomes = Vec::with_capacity(phi_grid.len());
    for &phi in phi_grid {
        let solved: Vec<SolvedStrategy> = specs
            .iter()
            .map(|spec| {
                let ctx = SolveContext {
                    market,
                    flow,
                    scenario: config.scenario,
                    horizon: config.horizon,
                    grid_steps: config.grid_steps,
                    q0: config.q0.clone(),
                    sigma_ac: config.sigma_ac.clone(),
                };
                crate::strategy::solve_strategy(&spec.with_phi(phi), &ctx)
            })
            .collect::<Result<_>>()?;
        let outcome = run_comparison(market, flow, config, &solved, phi, ac_index)?;
        outcomes.push(outcome);
    }

    Ok(SimRun {
        horizon: config.horizon,
        step_count: config.step_count,
        path_count: config.path_count,
        rng_seed: config.rng_seed,
        scenario: config.scenario,
        labels: specs.iter().map(|s| s.kind.label().to_string()).collect(),
        outcomes,
    })
}

fn run_comparison(
    market: &MarketModel,
    flow: &OrderFlowModel,
    config: &SimConfig,
    solved: &[SolvedStrategy],
    phi: f64,
    ac_index: usize,
) -> Result<PhiOutcome> {
    let steps = config.step_count;
    let dt = config.horizon / steps as f64;
    let sim_times: Vec<f64> = (0..steps).map(|k| dt * k as f64).collect();
    let stepper = MarketStepper::new(market, flow, dt)?;

    let tables: Vec<SpeedTable> = solved
        .iter()
        .map(|s| build_speed_table(s, market, &sim_times, config.horizon))
        .collect::<Result<_>>()?;

    let n = market.n;
    let m = market.m;
    let n_strat = tables.len();
    let theta: Vec<f64> = market.theta.iter().copied().collect();
    let q0: Vec<f64> = config.q0.iter().copied().collect();
    let z0: Vec<f64> = config.z0.iter().copied().collect();
    let mu0: Vec<f64> = match flow {
        OrderFlowModel::Zero => Vec::new(),
        OrderFlowModel::AffineOu { theta_mu, .. } => theta_mu.iter().copied().collect(),
    };
    // Permanent-impact pieces (flattened); zero flags skip the work entirely.
    let b_sel = &market.b_perm * market.selection.transpose(); // n×m
    let has_b = linalg::max_abs(&market.b_perm) > 0.0;
    let has_bbar = linalg::max_abs(&market.b_bar) > 0.0 && !flow.is_zero();
    let b_sel_flat = flatten(&b_sel);
    let b_bar_flat = flatten(&market.b_bar);

    struct PathResult {
        wealth: Vec<f64>,
        neg_any: Vec<u64>,
        neg_steps: Vec<u64>,
        abs_q_t: Vec<f64>,
    }

    let results: Vec<PathResult> = (0..config.path_count)
        .into_par_iter()
        .map(|p| {
            let mut rng = CounterRng::from_stream(config.rng_seed, p as u64);
            let mut z = z0.clone();
            let mut mu = mu0.clone();
            let mut m_acc = vec![0.0; mu0.len()];
            let mut xi = vec![0.0; n];
            let mut drift = vec![0.0; n];
            let mut s_full = vec![0.0; n];
            let mut nu = vec![0.0; m];
            let mut p_traded = vec![0.0; m];

            let mut q = vec![q0.clone(); n_strat];
            let mut x = vec![0.0f64; n_strat];
            let mut neg_any = vec![0u64; n_strat * m];
            let mut neg_steps = vec![0u64; n_strat * m];

            for k in 0..steps {
                for i in 0..n {
                    s_full[i] = theta[i] + z[i];
                }
                for (j, table) in tables.iter().enumerate() {
                    table.speed_into(k, &s_full, &q[j], &mu, dt, &mut nu);
                    // Traded midprice with permanent impact for this strategy.
                    for i in 0..m {
                        let mut pi = s_full[i];
                        if has_b {
                            for l in 0..m {
                                pi += b_sel_flat[i * m + l] * (q[j][l] - q0[l]);
                            }
                        }
                        if has_bbar {
                            for l in 0..mu.len() {
                                pi += b_bar_flat[i * mu.len() + l] * m_acc[l];
                            }
                        }
                        p_traded[i] = pi;
                    }
                    x[j] += wealth_increment(&p_traded, &tables[j].a, &nu, dt);
                    for i in 0..m {
                        if nu[i] < 0.0 {
                            neg_steps[j * m + i] += 1;
                            neg_any[j * m + i] = 1;
                        }
                        q[j][i] -= nu[i] * dt;
                    }
                }
                stepper.step(&mut rng, &mut z, &mut mu, &mut m_acc, &mut xi, &mut drift);
            }

            // Terminal valuation: book value of the remainder minus the
            // quadratic liquidation charge.
            for i in 0..n {
                s_full[i] = theta[i] + z[i];
            }
            let mut wealth = vec![0.0; n_strat];
            let mut abs_q_t = vec![0.0; n_strat * m];
            for (j, table) in tables.iter().enumerate() {
                let mut value = x[j];
                for i in 0..m {
                    let mut pi = s_full[i];
                    if has_b {
                        for l in 0..m {
                            pi += b_sel_flat[i * m + l] * (q[j][l] - q0[l]);
                        }
                    }
                    if has_bbar {
                        for l in 0..mu.len() {
                            pi += b_bar_flat[i * mu.len() + l] * m_acc[l];
                        }
                    }
                    value += pi * q[j][i];
                    abs_q_t[j * m + i] = q[j][i].abs();
                }
                let mut penalty = 0.0;
                for i in 0..m {
                    for l in 0..m {
                        penalty += q[j][i] * table.alpha[i * m + l] * q[j][l];
                    }
                }
                wealth[j] = value - penalty;
            }

            PathResult {
                wealth,
                neg_any,
                neg_steps,
                abs_q_t,
            }
        })
        .collect();

    // Deterministic sequential aggregation in path order.
    let paths = config.path_count;
    let mut acc = PathAccumulator {
        wealth: vec![vec![0.0; paths]; n_strat],
        repurchased: vec![vec![vec![false; m]; paths]; n_strat],
        neg_any: vec![vec![0; m]; n_strat],
        neg_steps: vec![vec![0; m]; n_strat],
        max_q_t: vec![vec![0.0; m]; n_strat],
    };
    for (p, r) in results.iter().enumerate() {
        for j in 0..n_strat {
            acc.wealth[j][p] = r.wealth[j];
            for i in 0..m {
                acc.repurchased[j][p][i] = r.neg_any[j * m + i] > 0;
                acc.neg_any[j][i] += r.neg_any[j * m + i];
                acc.neg_steps[j][i] += r.neg_steps[j * m + i];
                acc.max_q_t[j][i] = acc.max_q_t[j][i].max(r.abs_q_t[j * m + i]);
            }
        }
    }

    let ac_wealth = acc.wealth[ac_index].clone();
    let mut savings_bps = vec![vec![0.0; paths]; n_strat];
    for j in 0..n_strat {
        for p in 0..paths {
            savings_bps[j][p] = (acc.wealth[j][p] - ac_wealth[p]) / ac_wealth[p] * 1e4;
        }
    }

    let mut summaries = Vec::with_capacity(n_strat);
    for j in 0..n_strat {
        let w = &acc.wealth[j];
        let mean_w = w.iter().sum::<f64>() / paths as f64;
        let var_w = if paths > 1 {
            w.iter().map(|v| (v - mean_w) * (v - mean_w)).sum::<f64>() / (paths as f64 - 1.0)
        } else {
            0.0
        };
        let sav = &savings_bps[j];
        let mean_s = sav.iter().sum::<f64>() / paths as f64;
        let var_s = if paths > 1 {
            sav.iter().map(|v| (v - mean_s) * (v - mean_s)).sum::<f64>() / (paths as f64 - 1.0)
        } else {
            0.0
        };
        let mut sorted = sav.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantiles: Vec<f64> = SAVINGS_QUANTILES
            .iter()
            .map(|&p| quantile(&sorted, p))
            .collect();
        let underperform = acc.wealth[j]
            .iter()
            .zip(ac_wealth.iter())
            .filter(|(a, b)| a < b)
            .count() as f64
            / paths as f64
            * 100.0;
        let total_steps = (paths * steps) as f64;
        summaries.push(StrategySummary {
            label: solved[j].label.clone(),
            mean_wealth: mean_w,
            std_wealth: var_w.sqrt(),
            mean_savings_bps: mean_s,
            se_savings_bps: (var_s / paths as f64).sqrt(),
            savings_quantiles_bps: quantiles,
            underperform_pct: underperform,
            repurchase_path_pct: acc.neg_any[j]
                .iter()
                .map(|&c| c as f64 / paths as f64 * 100.0)
                .collect(),
            negative_speed_step_pct: acc.neg_steps[j]
                .iter()
                .map(|&c| c as f64 / total_steps * 100.0)
                .collect(),
            max_abs_terminal_inventory: acc.max_q_t[j].clone(),
        });
    }

    Ok(PhiOutcome {
        phi,
        strategies: summaries,
        wealth: acc.wealth,
        savings_bps,
        repurchased: acc.repurchased,
    })
}

/// Runs a single solved strategy over materialized market paths; returns the
/// per-path terminal wealth and repurchase indicators.
pub fn run_strategy(
    paths: &MarketPaths,
    solved: &SolvedStrategy,
    market: &MarketModel,
    config: &SimConfig,
) -> Result<(Vec<f64>, Vec<Vec<bool>>)> {
    let steps = paths.times.len() - 1;
    let dt = paths.dt;
    let sim_times: Vec<f64> = paths.times[..steps].to_vec();
    let horizon = paths.times[steps];
    let table = build_speed_table(solved, market, &sim_times, horizon)?;
    let n = market.n;
    let m = market.m;
    let theta: Vec<f64> = market.theta.iter().copied().collect();
    let q0: Vec<f64> = config.q0.iter().copied().collect();
    let b_sel = &market.b_perm * market.selection.transpose();
    let has_b = linalg::max_abs(&market.b_perm) > 0.0;
    let b_sel_flat = flatten(&b_sel);

    let mut wealths = Vec::with_capacity(paths.z.len());
    let mut repurchases = Vec::with_capacity(paths.z.len());
    let mut s_full = vec![0.0; n];
    let mut nu = vec![0.0; m];
    let mut p_traded = vec![0.0; m];
    for (zp, mup) in paths.z.iter().zip(paths.mu.iter()) {
        let mut q = q0.clone();
        let mut x = 0.0;
        let mut neg = vec![false; m];
        for k in 0..steps {
            for i in 0..n {
                s_full[i] = theta[i] + zp[k][i];
            }
            let mu_slice: &[f64] = mup[k].as_slice();
            table.speed_into(k, &s_full, &q, mu_slice, dt, &mut nu);
            for i in 0..m {
                let mut pi = s_full[i];
                if has_b {
                    for l in 0..m {
                        pi += b_sel_flat[i * m + l] * (q[l] - q0[l]);
                    }
                }
                p_traded[i] = pi;
            }
            x += wealth_increment(&p_traded, &table.a, &nu, dt);
            for i in 0..m {
                if nu[i] < 0.0 {
                    neg[i] = true;
                }
                q[i] -= nu[i] * dt;
            }
        }
        let mut value = x;
        for i in 0..m {
            let mut pi = theta[i] + zp[steps][i];
            if has_b {
                for l in 0..m {
                    pi += b_sel_flat[i * m + l] * (q[l] - q0[l]);
                }
            }
            value += pi * q[i];
        }
        let mut penalty = 0.0;
        for i in 0..m {
            for l in 0..m {
                penalty += q[i] * table.alpha[i * m + l] * q[l];
            }
        }
        wealths.push(value - penalty);
        repurchases.push(neg);
    }
    Ok((wealths, repurchases))
}
