//! Property checks on simulated data and model states.

use flexjm::likelihood::{cumulative_hazards, log_posterior};
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::{ModelSpec, ModelState, Predictor};
use proptest::prelude::*;
use std::sync::OnceLock;

fn base_state() -> &'static ModelState {
    static STATE: OnceLock<ModelState> = OnceLock::new();
    STATE.get_or_init(|| {
        let sim = assemble_dataset(&SimSetting::preset("1a-mini", 3).unwrap()).unwrap();
        ModelState::new(&ModelSpec::simulation_default(true), sim.data, 25).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_records_precede_follow_up(seed in 1u64..10_000) {
        let sim = assemble_dataset(&SimSetting::preset("1a-mini", seed).unwrap()).unwrap();
        let t = sim.data.follow_up();
        prop_assert_eq!(sim.data.n(), 50);
        for r in sim.data.records() {
            prop_assert!(r.time <= t[r.subject] && r.y.is_finite());
        }
        let again = assemble_dataset(&SimSetting::preset("1a-mini", seed).unwrap()).unwrap();
        prop_assert_eq!(sim.data.records(), again.data.records());
    }

    #[test]
    fn cached_predictors_follow_updates(
        moves in prop::collection::vec((0usize..64, -1.0f64..1.0), 1..12),
    ) {
        let mut state = base_state().clone();
        for (b, shift) in moves {
            let b = b % state.n_blocks();
            let beta: Vec<f64> = state.block(b).beta.iter().enumerate().map(|(j, v)| v + shift / (1 + j) as f64).collect();
            state.set_beta(b, &beta).unwrap();
        }
        prop_assert!(state.cache_deviation() < 1e-9);
    }

    #[test]
    fn survival_intercept_scales_cumulative_hazard(c in -2.0f64..2.0) {
        let mut state = base_state().clone();
        let before = cumulative_hazards(&state);
        let b = state.blocks_of(Predictor::Gamma)[0];
        let beta: Vec<f64> = state.block(b).beta.iter().map(|v| v + c).collect();
        state.set_beta(b, &beta).unwrap();
        for (x, y) in before.iter().zip(cumulative_hazards(&state)) {
            prop_assert!((y / x - c.exp()).abs() < 1e-12 * c.exp());
        }
    }

    #[test]
    fn parameter_round_trip_preserves_log_posterior(shift in -0.5f64..0.5) {
        let mut state = base_state().clone();
        let b = state.blocks_of(Predictor::Mu)[1];
        let beta: Vec<f64> = state.block(b).beta.iter().map(|v| v + shift).collect();
        state.set_beta(b, &beta).unwrap();
        let lp = log_posterior(&state).unwrap().total;
        let mut copy = base_state().clone();
        copy.set_parameters(&state.parameters()).unwrap();
        prop_assert_eq!(log_posterior(&copy).unwrap().total.to_bits(), lp.to_bits());
    }
}
