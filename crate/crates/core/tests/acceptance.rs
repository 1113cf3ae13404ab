//! Acceptance checks, one PASS/FAIL line each. The posterior-mean coverage
//! study is slow (tens of minutes on one core) and only runs with
//! `FLEXJM_SLOW=1`. Failures are reported but only turn into a non-zero exit
//! with `FLEXJM_STRICT=1`, so the remaining test targets still run.

use flexjm::basis::{
    anisotropic_penalty, bspline_design, difference_matrix, difference_penalty, row_tensor, SplineBasisDef,
};
use flexjm::cli::{mean_summary, mode_summary, perturb_state};
use flexjm::derivatives::{fd_check, FdTolerances};
use flexjm::likelihood::{cumulative_hazards, IG_A, IG_B};
use flexjm::mcmc::{chain_rng, gibbs_tau2_prior, mh_step, slice_tau2_prior, SamplerConfig};
use flexjm::metrics::{aggregate, all_metrics};
use flexjm::mode::{fit_mode, ModeConfig};
use flexjm::model::{BlockPrior, LongRecord, SplineSettings, SubjectRecord};
use flexjm::predict::EvalSet;
use flexjm::simulate::{assemble_dataset, SimSetting};
use flexjm::{JointData, ModelSpec, ModelState, Predictor, TermKind, TermSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, InverseGamma};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------

fn derivative_correctness() -> Outcome {
    let sim = assemble_dataset(&SimSetting::preset("1a-mini", 1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let spec = ModelSpec::simulation_default(false);
    let base = ModelState::new(&spec, sim.data, 25).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let (mut worst_s, mut worst_h) = (0.0f64, 0.0f64);
    let mut predictors = std::collections::BTreeSet::new();
    for k in 0..50 {
        let mut state = base.clone();
        perturb_state(&mut state, &mut rng).map_err(|e| e.to_string())?;
        for r in fd_check(&state, 1e-5, FdTolerances::default()).map_err(|e| e.to_string())? {
            predictors.insert(state.block(r.block).predictor());
            worst_s = worst_s.max(r.score_error);
            worst_h = worst_h.max(r.hessian_error);
            check(r.passed(), format!("state {k}, {}: score {:.2e}, hessian {:.2e}", r.label, r.score_error, r.hessian_error))?;
        }
    }
    check(predictors.len() == 5, format!("only {} predictors covered", predictors.len()))?;
    Ok(format!("50 states, worst relative score error {worst_s:.1e} (< 1e-4), Hessian {worst_h:.1e} (< 1e-3)"))
}

fn single_subject(t: f64, spec: &ModelSpec) -> ModelState {
    let data = JointData::new(
        vec![SubjectRecord {
            id: "a".into(),
            time: t,
            event: true,
            covariates: BTreeMap::new(),
        }],
        vec![LongRecord { subject: 0, time: 0.0, y: 0.0 }],
    )
    .unwrap();
    ModelState::new(spec, data, 25).unwrap()
}

fn quadrature() -> Outcome {
    // constant hazard exp(γ): Λ(T) = T exp(γ) exactly
    let spec = ModelSpec::new(vec![
        TermSpec::new(Predictor::Gamma, TermKind::Intercept),
        TermSpec::new(Predictor::Mu, TermKind::Intercept),
        TermSpec::new(Predictor::Sigma, TermKind::Intercept),
    ]);
    let mut worst = 0.0f64;
    for (t, g) in [(0.7, -1.3), (12.5, 0.4), (80.0, -4.0)] {
        let mut state = single_subject(t, &spec);
        let b = state.blocks_of(Predictor::Gamma)[0];
        state.set_beta(b, &[g]).unwrap();
        let lam = cumulative_hazards(&state)[0];
        worst = worst.max((lam - t * f64::exp(g)).abs() / (t * f64::exp(g)));
    }
    check(worst < 1e-12, format!("constant hazard relative error {worst:.2e}"))?;

    // log-hazard η_λ(t) + γ₀ = t on [0, 1]: Λ(1) against e − 1
    let linear_hazard = |q: usize| -> Result<f64, String> {
        let spec = ModelSpec::new(vec![
            TermSpec::new(Predictor::Lambda, TermKind::SmoothTime { spline: SplineSettings::cubic(10) }),
            TermSpec::new(Predictor::Gamma, TermKind::Intercept),
            TermSpec::new(Predictor::Mu, TermKind::Intercept),
            TermSpec::new(Predictor::Sigma, TermKind::Intercept),
        ]);
        let data = JointData::new(
            vec![SubjectRecord { id: "a".into(), time: 1.0, event: true, covariates: BTreeMap::new() }],
            vec![LongRecord { subject: 0, time: 0.0, y: 0.0 }],
        )
        .map_err(|e| e.to_string())?;
        let mut state = ModelState::new(&spec, data, q).map_err(|e| e.to_string())?;
        let lb = state.blocks_of(Predictor::Lambda)[0];
        let gb = state.blocks_of(Predictor::Gamma)[0];
        let p = state.block(lb).n_coef();
        let t: Vec<f64> = (0..60).map(|j| j as f64 / 59.0).collect();
        let subj = vec![0; t.len()];
        let mut x = DMatrix::zeros(t.len(), p + 1);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            state.set_beta(lb, &e).map_err(|e| e.to_string())?;
            let col = state.eval_predictor(Predictor::Lambda, &subj, &t).map_err(|e| e.to_string())?;
            x.set_column(j, &DVector::from_vec(col));
        }
        x.set_column(p, &DVector::from_element(t.len(), 1.0));
        let coef = x.clone().svd(true, true).solve(&DVector::from_vec(t.clone()), 1e-12)?;
        let fit_err = (&x * &coef - DVector::from_vec(t)).amax();
        check(fit_err < 1e-10, format!("linear log-hazard not reproduced ({fit_err:.1e})"))?;
        state.set_beta(lb, &coef.as_slice()[..p]).map_err(|e| e.to_string())?;
        state.set_beta(gb, &[coef[p]]).map_err(|e| e.to_string())?;
        Ok(cumulative_hazards(&state)[0])
    };
    let exact = std::f64::consts::E - 1.0;
    let e25 = linear_hazard(25)? - exact;
    let bound = std::f64::consts::E / 12.0 / 24.0f64.powi(2);
    check(e25 > 0.0 && e25 <= bound, format!("trapezoid error {e25:.3e} vs bound {bound:.3e}"))?;
    let ratio = e25 / (linear_hazard(49)? - exact);
    check((ratio - 4.0).abs() < 0.05, format!("halving ratio {ratio:.4}"))?;
    Ok(format!("constant hazard exact ({worst:.1e}); e^t error {e25:.2e} <= {bound:.2e}; halving ratio {ratio:.3}"))
}

fn cox_de_boor(knots: &[f64], deg: usize, j: usize, t: f64) -> f64 {
    if deg == 0 {
        return f64::from(knots[j] <= t && t < knots[j + 1]);
    }
    let mut v = 0.0;
    let a = knots[j + deg] - knots[j];
    if a > 0.0 {
        v += (t - knots[j]) / a * cox_de_boor(knots, deg - 1, j, t);
    }
    let b = knots[j + deg + 1] - knots[j + 1];
    if b > 0.0 {
        v += (knots[j + deg + 1] - t) / b * cox_de_boor(knots, deg - 1, j + 1, t);
    }
    v
}

fn basis_oracles() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let deg = rng.random_range(1..=3);
        let n_knots = rng.random_range(2 * (deg + 1) + 1..16);
        let mut knots: Vec<f64> = (0..n_knots).map(|_| rng.random_range(0.0..10.0)).collect();
        knots.sort_by(|a, b| a.total_cmp(b));
        knots.dedup();
        let Ok(def) = SplineBasisDef::new(deg, knots.clone()) else { continue };
        let lo = knots[deg];
        let hi = knots[knots.len() - deg - 1];
        if hi - lo < 1e-3 {
            continue;
        }
        let t: Vec<f64> = (0..40).map(|_| rng.random_range(lo..hi)).collect();
        let x = bspline_design(&def, &t).map_err(|e| e.to_string())?;
        for (r, &tv) in t.iter().enumerate() {
            worst = worst.max((x.row(r).sum() - 1.0).abs());
            for j in 0..def.n_basis() {
                worst = worst.max((x[(r, j)] - cox_de_boor(&knots, deg, j, tv)).abs());
            }
        }
    }
    check(worst < 1e-12, format!("partition of unity / recursion error {worst:.2e}"))?;

    // difference penalties: polynomials of degree < r span the null space
    for r in 1..=3 {
        let dim = 9;
        let k = difference_penalty(dim, r).map_err(|e| e.to_string())?;
        check(k.rank() == dim - r, format!("order {r}: rank {}", k.rank()))?;
        for p in 0..r {
            let v = DVector::from_fn(dim, |i, _| (i as f64).powi(p as i32));
            let kv = (k.matrix() * &v).amax();
            check(kv < 1e-10, format!("order {r}: t^{p} not in null space ({kv:.2e})"))?;
        }
        let d = difference_matrix(dim, r).map_err(|e| e.to_string())?;
        check((d.transpose() * &d - k.matrix()).amax() < 1e-12, "K != D'D".into())?;
    }

    // row tensor vs looped Kronecker, anisotropic penalty vs dense expansion
    let mut worst_t = 0.0f64;
    for _ in 0..10 {
        let (p, a, b) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let ma = DMatrix::from_fn(p, a, |_, _| rng.random_range(-1.0..1.0));
        let mb = DMatrix::from_fn(p, b, |_, _| rng.random_range(-1.0..1.0));
        let rt = row_tensor(&ma, &mb).map_err(|e| e.to_string())?;
        for i in 0..p {
            let kr = ma.row(i).kronecker(&mb.row(i));
            worst_t = worst_t.max((rt.row(i) - kr).amax());
        }
        let ks = DMatrix::from_fn(a, a, |_, _| rng.random_range(-1.0..1.0));
        let ks = &ks * ks.transpose();
        let kt = DMatrix::from_fn(b, b, |_, _| rng.random_range(-1.0..1.0));
        let kt = &kt * kt.transpose();
        let (ts, tt) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let p_fast = anisotropic_penalty(&ks, &kt, ts, tt).map_err(|e| e.to_string())?;
        let mut dense = DMatrix::zeros(a * b, a * b);
        for i in 0..a {
            for j in 0..a {
                for k in 0..b {
                    for l in 0..b {
                        let id_s = f64::from(i == j);
                        let id_t = f64::from(k == l);
                        dense[(i * b + k, j * b + l)] = ks[(i, j)] * id_t / ts + id_s * kt[(k, l)] / tt;
                    }
                }
            }
        }
        worst_t = worst_t.max((p_fast - dense).amax());
    }
    check(worst_t < 1e-10, format!("tensor error {worst_t:.2e}"))?;
    Ok(format!("B-splines vs recursion {worst:.1e}; null spaces exact; tensor/Kronecker {worst_t:.1e}"))
}

fn ks_against_ig(draws: &mut [f64], shape: f64, scale: f64) -> f64 {
    let ig = InverseGamma::new(shape, scale).unwrap();
    draws.sort_by(|a, b| a.total_cmp(b));
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ig.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn gaussian_marker_state() -> ModelState {
    let mut rng = chain_rng(99, 0);
    let mut subjects = Vec::new();
    let mut records = Vec::new();
    for i in 0..60 {
        let x: f64 = rng.random_range(-2.0..2.0);
        subjects.push(SubjectRecord {
            id: i.to_string(),
            time: 5.0,
            event: i % 3 == 0,
            covariates: BTreeMap::from([("x1".to_string(), x)]),
        });
        let e: f64 = rng.sample(StandardNormal);
        records.push(LongRecord {
            subject: i,
            time: 1.0,
            y: 1.0 + x.sin() + 0.5 * e,
        });
    }
    let terms = vec![
        TermSpec::new(Predictor::Mu, TermKind::Intercept),
        TermSpec::new(Predictor::Sigma, TermKind::Intercept),
        TermSpec::new(
            Predictor::Mu,
            TermKind::Smooth {
                covariate: "x1".into(),
                spline: SplineSettings {
                    n_knots: 5,
                    degree: 1,
                    diff_order: 1,
                },
            },
        ),
    ];
    ModelState::new(&ModelSpec::new(terms), JointData::new(subjects, records).unwrap(), 25).unwrap()
}

fn sampler_conditionals() -> Outcome {
    // Gibbs: IG(a + rank/2, b + β'Kβ/2)
    let rank = 40;
    let prior = BlockPrior::from_penalty(&flexjm::basis::PenaltyDef::identity(rank));
    let mut rng = chain_rng(11, 0);
    let beta: Vec<f64> = (0..rank).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let q: f64 = beta.iter().map(|b| b * b).sum();
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| gibbs_tau2_prior(&prior, &beta, &mut rng).unwrap().tau2[0])
        .collect();
    let (a, b) = (IG_A + rank as f64 / 2.0, IG_B + q / 2.0);
    let mean = b / (a - 1.0);
    let var = mean * mean / (a - 2.0);
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let (em, ev) = ((m / mean - 1.0).abs(), (v / var - 1.0).abs());
    check(em < 0.02 && ev < 0.02, format!("Gibbs moments off by {em:.3}, {ev:.3}"))?;

    // slice sampler with K_t = 0 reduces to an inverse gamma in τ_s²
    let k_s = difference_penalty(6, 1).unwrap().matrices[0].clone();
    let prior = BlockPrior::from_penalty(&flexjm::basis::PenaltyDef::anisotropic(k_s, DMatrix::zeros(3, 3)));
    let mut rng = chain_rng(21, 0);
    let beta: Vec<f64> = (0..18).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let qf = prior.quad_forms(&beta)[0];
    let rank = prior.rank(18) as f64;
    let mut tau2 = vec![1.0, 1.0];
    let mut sdraws = Vec::new();
    for _ in 0..10_000 {
        tau2 = slice_tau2_prior(&prior, &beta, &tau2, 1.0, 100, &mut rng).unwrap().tau2;
        sdraws.push(tau2[0]);
    }
    let ks = ks_against_ig(&mut sdraws, IG_A + rank / 2.0, IG_B + qf / 2.0);
    check(ks < 0.02, format!("slice KS distance {ks:.4}"))?;

    // MH on an exactly Gaussian conditional
    let mut state = gaussian_marker_state();
    let blk = *state.blocks_of(Predictor::Mu).last().unwrap();
    let d = flexjm::derivatives::derivatives(&state, blk).unwrap();
    let cov = (-d.hessian.to_dense(2)).try_inverse().unwrap();
    let mu = DVector::from_column_slice(&state.block(blk).beta) + &cov * &d.score;
    let mut rng = chain_rng(8, 0);
    let n = 100_000;
    let (mut sum, mut acc) = ([0.0; 2], 0usize);
    for _ in 0..n {
        acc += mh_step(&mut state, blk, &mut rng).unwrap().accepted;
        for (s, x) in sum.iter_mut().zip(&state.block(blk).beta) {
            *s += x;
        }
    }
    let rate = acc as f64 / n as f64;
    check(rate > 0.95, format!("MH acceptance {rate:.3}"))?;
    for i in 0..2 {
        let z = (sum[i] / n as f64 - mu[i]) / (cov[(i, i)] / n as f64).sqrt();
        check(z.abs() < 3.0, format!("MH mean {i}: {z:.2} standard errors"))?;
    }
    Ok(format!("Gibbs moments {em:.3}/{ev:.3} (< 0.02); slice KS {ks:.4} (< 0.02); MH acceptance {rate:.3}"))
}

fn simulator_fidelity() -> Outcome {
    let mut out = Vec::new();
    for (name, target) in [("1a", 0.72), ("1b", 0.55)] {
        let (mut events, mut subjects) = (0usize, 0usize);
        let (mut ss, mut cnt) = (0.0, 0usize);
        for seed in 1..=200 {
            let sim = assemble_dataset(&SimSetting::preset(name, seed).unwrap()).map_err(|e| e.to_string())?;
            events += sim.data.events();
            subjects += sim.data.n();
            for r in sim.data.records() {
                ss += (r.y - sim.truth.mu(r.subject, r.time)).powi(2);
                cnt += 1;
            }
        }
        let frac = events as f64 / subjects as f64;
        let sd = (ss / cnt as f64).sqrt();
        check((frac - target).abs() <= 0.05, format!("{name}: event fraction {frac:.3} vs {target}"))?;
        check((sd - 0.30).abs() <= 0.005, format!("{name}: residual sd {sd:.4}"))?;
        out.push(format!("{name} events {:.1}%, residual sd {sd:.4}", 100.0 * frac));
    }
    Ok(out.join("; "))
}

fn mode_recovery() -> Outcome {
    let mut est = Vec::new();
    for seed in 1..=20 {
        let sim = assemble_dataset(&SimSetting::preset("1a-mini", seed).unwrap()).map_err(|e| e.to_string())?;
        let fit = fit_mode(&ModelSpec::simulation_default(false), sim.data, 25, &ModeConfig::default())
            .map_err(|e| e.to_string())?;
        est.push(fit.state.block(fit.state.blocks_of(Predictor::Alpha)[0]).beta[0]);
    }
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let mut abs: Vec<f64> = est.iter().map(|a| (a - 1.0).abs()).collect();
    abs.sort_by(|a, b| a.total_cmp(b));
    let median = 0.5 * (abs[9] + abs[10]);
    let within = abs.iter().filter(|e| **e <= 0.3).count();
    log_estimates(&est);
    let msg = format!("mean alpha {mean:.3} (1 ± 0.3), median |error| {median:.3} (< 0.25), {within}/20 within ±0.3");
    check((mean - 1.0).abs() <= 0.3 && median < 0.25, msg.clone())?;
    Ok(msg)
}

fn log_estimates(est: &[f64]) {
    if std::env::var("FLEXJM_VERBOSE").is_ok() {
        let s: Vec<String> = est.iter().map(|a| format!("{a:.3}")).collect();
        println!("     alpha estimates: {}", s.join(" "));
    }
}

fn mean_coverage() -> Outcome {
    let (mut mode_reps, mut mean_reps) = (Vec::new(), Vec::new());
    for seed in 1..=20 {
        let sim = assemble_dataset(&SimSetting::preset("2a-mini", seed).unwrap()).map_err(|e| e.to_string())?;
        let truth = sim.truth_table();
        let grid = sim.truth.setting.grid.clone();
        let state = ModelState::new(&ModelSpec::simulation_default(true), sim.data, 25).map_err(|e| e.to_string())?;
        let (mode, _) = mode_summary(state.clone(), &ModeConfig::default(), &grid).map_err(|e| e.to_string())?;
        let mut start = state;
        start.set_parameters(&mode.parameters).map_err(|e| e.to_string())?;
        let config = SamplerConfig {
            seed,
            ..SamplerConfig::short()
        };
        let (mean, _) = mean_summary(&start, &config, &grid, 1).map_err(|e| e.to_string())?;
        mode_reps.push(all_metrics(&mode.predictions, &truth).map_err(|e| e.to_string())?);
        mean_reps.push(all_metrics(&mean.predictions, &truth).map_err(|e| e.to_string())?);
    }
    let cov = |reps| {
        aggregate(reps)
            .ok()
            .and_then(|r| r.overall(Predictor::Alpha, EvalSet::Grid).map(|c| c.coverage))
            .unwrap_or(f64::NAN)
    };
    let (c_mean, c_mode) = (cov(&mean_reps), cov(&mode_reps));
    let msg = format!("alpha(t) coverage: mean {c_mean:.3} (in [0.80, 1.00]), mode {c_mode:.3} (lower)");
    check((0.80..=1.00).contains(&c_mean) && c_mode < c_mean, msg.clone())?;
    Ok(msg)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let formula = p("model.txt");
    std::fs::write(&formula, flexjm::cli::formula::render_formula(&ModelSpec::simulation_default(false)))
        .map_err(|e| e.to_string())?;
    let run = |args: &[&str]| {
        let mut v = vec!["flexjm"];
        v.extend_from_slice(args);
        flexjm::cli::run(v)
    };
    for out in ["d1", "d2"] {
        check(run(&["simulate", "--setting", "1a-mini", "--seed", "5", "--out", &p(out)]) == 0, "simulate failed".into())?;
    }
    for f in ["longitudinal.csv", "survival.csv", "truth.csv"] {
        let a = std::fs::read(dir.path().join("d1").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("d2").join(f)).map_err(|e| e.to_string())?;
        check(a == b, format!("simulate output {f} differs"))?;
    }
    let fits: [(&str, Vec<&str>); 2] = [
        ("mode", vec![]),
        ("mean", vec!["--estimator", "mean", "--n-iter", "300", "--burn-in", "100", "--thin", "5", "--seed", "3"]),
    ];
    let d1 = p("d1");
    for (name, extra) in &fits {
        let outs = [p(&format!("{name}1")), p(&format!("{name}2"))];
        for out in &outs {
            let mut args = vec!["fit", "--data", &d1, "--formula", &formula, "--out", out];
            args.extend(extra.iter().copied());
            check(run(&args) == 0, format!("{name} fit failed"))?;
        }
        let a = std::fs::read(format!("{}/fit.json", outs[0])).map_err(|e| e.to_string())?;
        let b = std::fs::read(format!("{}/fit.json", outs[1])).map_err(|e| e.to_string())?;
        check(a == b, format!("{name} fits differ"))?;
        // re-run from the manifest alone
        let m: flexjm::cli::io::Manifest =
            flexjm::cli::io::read_json(std::path::Path::new(&format!("{}/manifest.json", outs[0]))).map_err(|e| e.to_string())?;
        let mut argv = vec!["flexjm".to_string()];
        argv.extend(m.args.iter().cloned());
        check(flexjm::cli::run(argv) == 0, "manifest re-run failed".into())?;
        let c = std::fs::read(format!("{}/fit.json", outs[0])).map_err(|e| e.to_string())?;
        check(a == c, format!("{name}: manifest re-run differs"))?;
        for d in &m.outputs {
            let now = flexjm::cli::io::sha256_file(std::path::Path::new(&d.path)).map_err(|e| e.to_string())?;
            check(now == d.sha256, format!("{name}: digest of {} changed", d.path))?;
        }
    }
    Ok("simulate, mode and mean outputs bitwise identical; manifest re-runs reproduce digests".into())
}

fn main() {
    let slow = std::env::var("FLEXJM_SLOW").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, fn() -> Outcome, bool)> = vec![
        ("derivative correctness", derivative_correctness, false),
        ("quadrature", quadrature, false),
        ("basis/penalty oracles", basis_oracles, false),
        ("sampler full conditionals", sampler_conditionals, false),
        ("simulator fidelity", simulator_fidelity, false),
        ("mode-estimation recovery", mode_recovery, false),
        ("mean-estimation coverage", mean_coverage, true),
        ("determinism", determinism, false),
    ];
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (name, f, is_slow) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        if is_slow && !slow {
            skipped += 1;
            println!("SKIP {name}: slow suite, set FLEXJM_SLOW=1");
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => {
                passed += 1;
                println!("PASS {name}: {msg} [{secs:.1}s]");
            }
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 && std::env::var("FLEXJM_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
