//! Bundled example calibration: five Nasdaq stocks (INTC, SMH, FARO, NTAP,
//! ORCL) sampled at 60-second midprices, with temporary-impact estimates for
//! the two traded names. Time unit: one trading day (6.5 hours), so a one-hour
//! execution window is `EXECUTION_HORIZON` = 1/6.5.

use nalgebra::{DMatrix, DVector};

use crate::model::MarketModel;

pub const ASSET_LABELS: [&str; 5] = ["INTC", "SMH", "FARO", "NTAP", "ORCL"];

/// One-hour execution window in day units.
pub const EXECUTION_HORIZON: f64 = 1.0 / 6.5;

/// Basket to liquidate: 4,600 shares of INTC and 900 shares of SMH.
pub const DEFAULT_Q0: [f64; 2] = [4600.0, 900.0];

/// Default terminal liquidation penalty guaranteeing full liquidation.
pub const DEFAULT_ALPHA: f64 = 1e6;

/// Mean-reversion levels θ (dollars).
pub fn theta() -> DVector<f64> {
    DVector::from_vec(vec![34.233, 51.720, 56.338, 43.179, 38.885])
}

/// Estimated mean-reversion matrix κ (per day).
pub fn kappa() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            45.66, -38.51, -2.43, 8.26, -47.01, //
            -19.83, 16.73, 1.06, -3.59, 20.42, //
            -41.34, 34.87, 2.20, -7.48, 42.57, //
            4.98, -4.20, -0.27, 0.90, -5.13, //
            -6.47, 5.45, 0.34, -1.17, 6.66,
        ],
    )
}

/// Estimated covariance matrix Σ (dollars² per day). The published table is
/// asymmetric in its last digit (0.019 vs 0.020); construction symmetrizes.
pub fn sigma_cov() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            0.124, 0.108, -0.040, 0.027, 0.019, //
            0.108, 0.194, 0.060, 0.060, 0.027, //
            -0.040, 0.060, 2.855, 0.058, 0.001, //
            0.027, 0.060, 0.058, 0.159, 0.022, //
            0.020, 0.027, 0.001, 0.022, 0.043,
        ],
    )
}

/// Temporary impact of the two traded names (dollars·day/share²).
pub fn a_temp() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![0.44e-6, 0.71e-6]))
}

/// Benchmark covariance for the correlated-but-not-co-integrated model of the
/// two traded names.
pub fn sigma_ac() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.131, 0.105, 0.105, 0.195])
}

/// Estimated co-integration factor weights (one per asset).
pub fn coint_factor() -> DVector<f64> {
    DVector::from_vec(vec![-0.904, 0.763, 0.048, -0.164, 0.931])
}

/// Full five-asset market model with the two traded names first. Permanent
/// impact is off (b = b̄ = 0), matching the bundled impact estimates.
pub fn five_stock_model() -> MarketModel {
    MarketModel::new(
        kappa(),
        theta(),
        sigma_cov(),
        DMatrix::zeros(5, 5),
        DMatrix::zeros(5, 5),
        a_temp(),
        2,
    )
    .expect("bundled model is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PenaltySpec;

    #[test]
    fn bundled_model_validates() {
        let model = five_stock_model();
        let penalty = PenaltySpec::isotropic(0.01, DEFAULT_ALPHA, &model).unwrap();
        assert!(model.validate(&penalty).passed());
    }

    #[test]
    fn sub_covariance_matches_traded_block() {
        let model = five_stock_model();
        let sub = model.sub_covariance();
        assert!((sub[(0, 0)] - 0.124).abs() < 1e-12);
        assert!((sub[(0, 1)] - 0.108).abs() < 1e-12);
        assert!((sub[(1, 0)] - 0.108).abs() < 1e-12);
        assert!((sub[(1, 1)] - 0.194).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_near_rank_one_along_the_factor() {
        // kappa ≈ v wᵀ with w the co-integration factor: residual after
        // projecting each row onto w is small relative to the row norm.
        let k = kappa();
        let w = coint_factor();
        let w2 = w.dot(&w);
        for i in 0..5 {
            let row = k.row(i).transpose();
            let coef = row.dot(&w) / w2;
            let resid = &row - w.clone() * coef;
            assert!(resid.norm() < 0.02 * row.norm().max(1.0));
        }
    }
}
