//! Desk-scale risk–reward frontier: as the running penalty φ increases, the
//! strategy tracks the zero target more tightly, so both the mean and the
//! standard deviation of terminal wealth decrease.

use nalgebra::{DMatrix, DVector};

use cointexec::model::OrderFlowModel;
use cointexec::presets;
use cointexec::sim::{self, SimConfig};
use cointexec::strategy::{StrategyKind, StrategySpec};

#[test]
fn frontier_moves_down_and_left_as_phi_increases() {
    let model = presets::five_stock_model();
    let alpha = DMatrix::identity(2, 2) * presets::DEFAULT_ALPHA;
    let specs = vec![
        StrategySpec::new(StrategyKind::Unrestricted, 1e-3, alpha.clone()),
        StrategySpec::new(StrategyKind::AlmgrenChriss, 1e-3, alpha),
    ];
    let mut config = SimConfig::new(&model, DVector::from_vec(presets::DEFAULT_Q0.to_vec()));
    config.path_count = 10_000;
    config.step_count = 3600;
    config.horizon = presets::EXECUTION_HORIZON;
    config.rng_seed = 7_031_114;
    config.sigma_ac = Some(presets::sigma_ac());

    let phi_grid = [5e-3, 7.3e-3, 1e-2];
    let run =
        sim::compare_strategies(&model, &OrderFlowModel::Zero, &config, &specs, &phi_grid).unwrap();

    let paths = config.path_count as f64;
    for window in run.outcomes.windows(2) {
        let (lo, hi) = (&window[0], &window[1]);
        let ul_lo = &lo.strategies[0];
        let ul_hi = &hi.strategies[0];

        // Paired mean comparison under common random numbers.
        let diffs: Vec<f64> = lo.wealth[0]
            .iter()
            .zip(hi.wealth[0].iter())
            .map(|(a, b)| a - b)
            .collect();
        let mean_diff = diffs.iter().sum::<f64>() / paths;
        let var_diff = diffs
            .iter()
            .map(|d| (d - mean_diff) * (d - mean_diff))
            .sum::<f64>()
            / (paths - 1.0);
        let se_diff = (var_diff / paths).sqrt();
        assert!(
            mean_diff > -3.0 * se_diff,
            "mean wealth rose from phi={} to phi={}: diff {mean_diff} (se {se_diff})",
            lo.phi,
            hi.phi
        );

        // Standard deviations with the usual sqrt(2N) slack.
        let se_sd =
            ul_lo.std_wealth / (2.0 * paths).sqrt() + ul_hi.std_wealth / (2.0 * paths).sqrt();
        assert!(
            ul_hi.std_wealth < ul_lo.std_wealth + 3.0 * se_sd,
            "std wealth rose from phi={} ({}) to phi={} ({})",
            lo.phi,
            ul_lo.std_wealth,
            hi.phi,
            ul_hi.std_wealth
        );
    }

    // The frontier is genuinely sloped: the extremes differ beyond slack.
    let first = &run.outcomes[0].strategies[0];
    let last = &run.outcomes[2].strategies[0];
    assert!(last.mean_wealth < first.mean_wealth);
    assert!(last.std_wealth < first.std_wealth);
}
