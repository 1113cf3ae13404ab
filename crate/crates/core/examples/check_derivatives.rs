//! Compare analytic scores and Hessians with central finite differences on a
//! freshly simulated dataset, at the initial state and at a perturbed one.
//!
//! `cargo run --release --example check_derivatives -- [setting] [seed]`

use flexjm::derivatives::{fd_check, FdTolerances};
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::{ModelSpec, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let setting = args.get(1).map(String::as_str).unwrap_or("1a-mini");
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let sim = assemble_dataset(&SimSetting::preset(setting, seed)?)?;
    println!(
        "{setting}: n = {}, N = {}, events = {}",
        sim.data.n(),
        sim.data.n_obs(),
        sim.data.events()
    );
    let spec = ModelSpec::simulation_default(sim.truth.setting.alpha.is_time_varying());
    let mut state = ModelState::new(&spec, sim.data, 25)?;

    // a perturbed state: small random coefficients, random variances
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for b in 0..state.n_blocks() {
        let beta: Vec<f64> = state
            .block(b)
            .beta
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        let tau2: Vec<f64> = state.block(b).tau2.iter().map(|_| rng.random_range(0.5..5.0)).collect();
        state.set_tau2(b, &tau2)?;
        state.set_beta(b, &beta)?;
    }
    let report = fd_check(&state, 1e-5, FdTolerances::default())?;
    println!("{:<22} {:>12} {:>12}  result", "block", "score err", "hessian err");
    for r in &report {
        println!(
            "{:<22} {:>12.3e} {:>12.3e}  {}",
            r.label,
            r.score_error,
            r.hessian_error,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
