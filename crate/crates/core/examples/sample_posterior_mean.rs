//! Posterior-mean estimation: start derivative-based Metropolis-Hastings
//! chains at the posterior mode, then report acceptance rates, a
//! convergence diagnostic and the time-varying association with its 95%
//! credible band.
//!
//! `cargo run --release --example sample_posterior_mean -- [setting] [seed] [n_iter] [chains]`

use flexjm::mcmc::{potential_scale_reduction, run_chains, summarize, SamplerConfig};
use flexjm::mode::{fit_mode, ModeConfig};
use flexjm::predict::{EvalPoint, EvalSet};
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::{ModelSpec, Predictor};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let setting = args.get(1).map(String::as_str).unwrap_or("2a-mini");
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let n_iter: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(4000);
    let chains: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(2);

    let sim = assemble_dataset(&SimSetting::preset(setting, seed)?)?;
    let spec = ModelSpec::simulation_default(sim.truth.setting.alpha.is_time_varying());
    let start = Instant::now();
    let mode = fit_mode(&spec, sim.data.clone(), 25, &ModeConfig::default())?;
    println!("mode: converged = {}, sweeps = {}, {:.2?}", mode.converged, mode.sweeps, start.elapsed());

    let config = SamplerConfig {
        n_iter,
        burn_in: n_iter / 4,
        thin: 5,
        seed,
        chains,
        ..SamplerConfig::default()
    };
    let start = Instant::now();
    let samples = run_chains(&mode.state, &config, chains)?;
    println!("sampler: {} kept draws from {chains} chain(s), {:.2?}", samples.len(), start.elapsed());

    println!("\n{:<20} {:>10} {:>8}", "block", "accepted", "RW steps");
    for (b, label) in samples.labels.iter().enumerate() {
        println!("{label:<20} {:>10.3} {:>8}", samples.acceptance[b], samples.random_walk_steps[b]);
    }
    if chains > 1 {
        let b = mode.state.blocks_of(Predictor::Alpha)[0];
        println!("\nPSRF of the alpha intercept: {:.3}", potential_scale_reduction(&samples.coefficient_by_chain(b, 0)));
    }

    let times: Vec<f64> = (0..=6).map(|k| 10.0 * k as f64).collect();
    let points: Vec<EvalPoint> = times
        .iter()
        .map(|&t| EvalPoint {
            predictor: Predictor::Alpha,
            set: EvalSet::Grid,
            subject: 0,
            time: t,
        })
        .collect();
    let summary = summarize(&samples, &mode.state, &points)?;
    println!("\n{:>6} {:>9} {:>9} {:>9} {:>9}", "t", "truth", "mean", "2.5%", "97.5%");
    for p in &summary.predictions {
        println!(
            "{:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            p.time,
            sim.truth.alpha(p.time),
            p.estimate,
            p.lower,
            p.upper
        );
    }
    Ok(())
}
