//! A small simulation study: simulate replicates, fit each by posterior mode
//! (and optionally posterior mean), and average bias, MSE and coverage.
//!
//! `cargo run --release --example replication_study -- [setting] [replicates] [mode|mean|both] [n_iter]`
//!
//! Replicates run in parallel; set `FLEXJM_THREADS` to limit the threads.

use flexjm::cli::{mean_summary, mode_summary, thread_count};
use flexjm::mcmc::SamplerConfig;
use flexjm::metrics::{aggregate, all_metrics, MetricsReport, ReplicateMetrics};
use flexjm::mode::ModeConfig;
use flexjm::predict::EvalSet;
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::{ModelSpec, ModelState, Predictor};
use std::sync::Mutex;

type Rep = (Option<ReplicateMetrics>, Option<ReplicateMetrics>);

fn one(setting: &str, seed: u64, mode: bool, mean: bool, n_iter: usize) -> Result<Rep, Box<dyn std::error::Error + Send + Sync>> {
    let sim = assemble_dataset(&SimSetting::preset(setting, seed)?)?;
    let truth = sim.truth_table();
    let grid = sim.truth.setting.grid.clone();
    let spec = ModelSpec::simulation_default(sim.truth.setting.alpha.is_time_varying());
    let state = ModelState::new(&spec, sim.data, 25)?;
    let (fit, _) = mode_summary(state.clone(), &ModeConfig::default(), &grid).map_err(|e| e.to_string())?;
    let mode_metrics = if mode { Some(all_metrics(&fit.predictions, &truth)?) } else { None };
    let mean_metrics = if mean {
        let mut start = state;
        start.set_parameters(&fit.parameters)?;
        let config = SamplerConfig {
            n_iter,
            burn_in: n_iter / 4,
            thin: 5,
            seed,
            ..SamplerConfig::default()
        };
        let (fit, _) = mean_summary(&start, &config, &grid, 1).map_err(|e| e.to_string())?;
        Some(all_metrics(&fit.predictions, &truth)?)
    } else {
        None
    };
    Ok((mode_metrics, mean_metrics))
}

fn print(name: &str, report: &MetricsReport) {
    println!("\n{name} ({} replicates)", report.replicates);
    println!("{:<8} {:<6} {:>10} {:>10} {:>9}", "pred", "set", "bias", "MSE", "coverage");
    for c in report.cells.iter().filter(|c| c.time.is_none()) {
        println!(
            "{:<8} {:<6} {:>10.4} {:>10.4} {:>9.3}",
            c.predictor.name(),
            c.set.name(),
            c.bias,
            c.mse,
            c.coverage
        );
    }
    let per = report.per_time(Predictor::Alpha, EvalSet::Grid);
    if !per.is_empty() {
        let cov: Vec<String> = per.iter().step_by(5).map(|c| format!("{}:{:.2}", c.time.unwrap(), c.coverage)).collect();
        println!("alpha coverage over time: {}", cov.join(" "));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let setting = args.get(1).cloned().unwrap_or_else(|| "1a-mini".into());
    let q: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let which = args.get(3).map(String::as_str).unwrap_or("mode");
    let n_iter: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(4000);
    let (mode, mean) = match which {
        "mode" => (true, false),
        "mean" => (false, true),
        "both" => (true, true),
        other => return Err(format!("unknown estimator `{other}`").into()),
    };

    let next = Mutex::new(1u64);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..thread_count().min(q as usize) {
            s.spawn(|| loop {
                let seed = {
                    let mut g = next.lock().unwrap();
                    if *g > q {
                        break;
                    }
                    *g += 1;
                    *g - 1
                };
                let r = one(&setting, seed, mode, mean, n_iter).map_err(|e| e.to_string());
                if let Err(e) = &r {
                    eprintln!("replicate {seed}: {e}");
                }
                results.lock().unwrap().push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(s, _)| *s);
    let ok: Vec<Rep> = results.into_iter().filter_map(|(_, r)| r.ok()).collect();
    let modes: Vec<ReplicateMetrics> = ok.iter().filter_map(|r| r.0.clone()).collect();
    let means: Vec<ReplicateMetrics> = ok.iter().filter_map(|r| r.1.clone()).collect();
    if mode {
        print("posterior mode", &aggregate(&modes)?);
    }
    if mean {
        print("posterior mean", &aggregate(&means)?);
    }
    Ok(())
}
