//! Parse a model formula, build the model on simulated data and list the
//! resulting coefficient blocks. Pass a formula file to parse your own.
//!
//! `cargo run --example formula_parsing -- [formula-file]`

use flexjm::cli::formula::{parse_formula, render_formula};
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::ModelState;

const DEFAULT: &str = "\
# survival submodel
lambda ~ s(time, k=10)
gamma  ~ 1 + s(x1, k=10)
alpha  ~ 1 + s(time, k=10)
# marker: global curve, random intercepts, smooth individual deviations
mu     ~ 1 + s(time, k=12) + ri(id) + fri(id, time, k=12) + s(x2, k=10)
sigma  ~ 1
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEFAULT.to_string(),
    };
    let spec = match parse_formula(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("formula error at {e}");
            std::process::exit(2);
        }
    };
    println!("parsed {} terms; canonical form:\n{}", spec.terms.len(), render_formula(&spec));

    for bad in ["mu ~ s(time k=12)", "mu ~ 1\nmu ~ 1", "gamma ~ s(time)", "mu ~ spline(time)"] {
        println!("{bad:?} -> {}", parse_formula(bad).unwrap_err());
    }

    let sim = assemble_dataset(&SimSetting::preset("2a-mini", 1)?)?;
    let state = ModelState::new(&spec, sim.data, 25)?;
    println!("\n{:<20} {:>6} {:>10}", "block", "coefs", "variances");
    for b in state.blocks() {
        println!("{:<20} {:>6} {:>10}", b.label(), b.n_coef(), b.tau2.len());
    }
    Ok(())
}
