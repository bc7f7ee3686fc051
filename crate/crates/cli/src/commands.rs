use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use serde_json::json;

use otstab::certify::{discretize_events, stability_experiment, Mode};
use otstab::cgo::{build_basis, calibrate_c1, sample_time_test_function, CorrectionOptions, FaddeevBox, RMode};
use otstab::config::ExperimentConfig;
use otstab::control::solve_null_control;
use otstab::elliptic::solve_forward;
use otstab::measures::{
    atomic_from_literals, sample_measure_pair, sample_spacetime_pair, spacetime_from_literals, trial_rng, AtomicMeasure,
    SpaceTimeAtomicMeasure,
};
use otstab::ot::{brute_force_transport, dual_value, duality_gap, normalize_potentials, solve_ot};
use otstab::parabolic::{mass, solve_forward_initial_data, solve_forward_pt_sources, TimeGrid};
use otstab::report::{boundary_trace_csv, fmt_f64, render_json, space_time_csv, write_stability, write_with_manifest};
use otstab::{CoefficientSet, Error, Grid2D, Result, ScalarField};

use crate::Common;

fn load(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    let overridden = c.mode.is_some() || c.trials.is_some() || c.seed.is_some() || c.grid.is_some();
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some((nx, ny)) = c.grid {
        cfg.grid.nx = nx;
        cfg.grid.ny = ny;
    }
    if overridden {
        cfg.validate(None)?;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

/// Grid and coefficients; failures here are configuration errors.
fn domain(cfg: &ExperimentConfig) -> Result<(Grid2D, CoefficientSet)> {
    let g = cfg.build_grid().map_err(|e| Error::Config(format!("grid: {e}")))?;
    let coeffs = cfg.coefficients(&g).map_err(|e| Error::Config(format!("coefficients: {e}")))?;
    Ok((g, coeffs))
}

fn static_pair(cfg: &ExperimentConfig, g: &Grid2D) -> Result<(AtomicMeasure, AtomicMeasure)> {
    match &cfg.measures {
        Some(p) => Ok((
            atomic_from_literals(&p.mu).map_err(|e| Error::Config(format!("measures.mu: {e}")))?,
            atomic_from_literals(&p.nu).map_err(|e| Error::Config(format!("measures.nu: {e}")))?,
        )),
        None => {
            let s = cfg.setup();
            sample_measure_pair(g, &s.sampling, s.shared, &mut trial_rng(cfg.seed, 0))
        }
    }
}

fn spacetime_pair(cfg: &ExperimentConfig, g: &Grid2D) -> Result<(SpaceTimeAtomicMeasure, SpaceTimeAtomicMeasure)> {
    let s = cfg.setup();
    match &cfg.measures {
        Some(p) => Ok((
            spacetime_from_literals(&p.mu, s.t_star, s.band).map_err(|e| Error::Config(format!("measures.mu: {e}")))?,
            spacetime_from_literals(&p.nu, s.t_star, s.band).map_err(|e| Error::Config(format!("measures.nu: {e}")))?,
        )),
        None => sample_spacetime_pair(g, &s.sampling, s.shared, s.t_star, s.band, &mut trial_rng(cfg.seed, 0)),
    }
}

fn need_time(cfg: &ExperimentConfig, what: &str) -> Result<otstab::config::TimeBlock> {
    cfg.time.ok_or_else(|| Error::Config(format!("{what} needs a time block")))
}

fn r_mode(cfg: &ExperimentConfig) -> RMode {
    match cfg.r {
        Some(r) => RMode::Given(r),
        None => RMode::Auto { c1: cfg.constants.c1 },
    }
}

fn finish(dir: &std::path::Path, cfg: &ExperimentConfig, command: &str, files: Vec<(&str, String)>) -> Result<()> {
    let paths = write_with_manifest(dir, cfg, command, files)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn stability(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let start = Instant::now();
    let (g, coeffs) = domain(&cfg)?;
    let report = stability_experiment(&cfg.setup(), &coeffs, &g)?;
    let dir = out_dir(c, &cfg);
    let paths = write_stability(&dir, &cfg, &report)?;
    let runtime = start.elapsed().as_secs_f64();
    std::fs::write(dir.join("run.log"), format!("config_sha256 {}\nruntime_s {runtime:.3}\n", cfg.hash()))?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    let s = &report.summary;
    println!(
        "mode {} trials {} failures {} max_ratio {} min_margin {} runtime_s {runtime:.3}",
        cfg.mode.name(),
        report.rows.len(),
        s.failures,
        fmt_f64(s.max_ratio),
        fmt_f64(s.min_margin)
    );
    for r in report.rows.iter().filter(|r| !r.chain_ok) {
        println!("trial {} failed: {}", r.trial, r.status);
    }
    Ok(if s.failures == 0 { 0 } else { 1 })
}

pub fn forward_elliptic(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let (g, coeffs) = domain(&cfg)?;
    let (mu, _) = static_pair(&cfg, &g)?;
    let sol = solve_forward(&coeffs, &mu, &g)?;
    let trace: Vec<Complex64> = sol.boundary_trace.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let info = json!({
        "mass_check": sol.mass_check,
        "iterations": sol.iterations,
        "rel_residual": sol.rel_residual,
        "boundary_l2": g.boundary_norm(&trace),
    });
    println!("mass_check {} iterations {} rel_residual {}", fmt_f64(sol.mass_check), sol.iterations, fmt_f64(sol.rel_residual));
    finish(
        &out_dir(c, &cfg),
        &cfg,
        "forward-elliptic",
        vec![("trace.csv", boundary_trace_csv(&g, &sol.boundary_trace)?), ("forward.json", render_json(&info))],
    )?;
    Ok(0)
}

pub fn forward_parabolic(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let t = need_time(&cfg, "forward-parabolic")?;
    let (g, coeffs) = domain(&cfg)?;
    let sol = match cfg.mode {
        Mode::Parabolic => {
            let (mu, _) = spacetime_pair(&cfg, &g)?;
            solve_forward_pt_sources(&coeffs.q, &mu, &g, t.t_final, t.nt, false)?
        }
        Mode::InitialData => {
            let (mu, _) = static_pair(&cfg, &g)?;
            solve_forward_initial_data(&coeffs.q, &mu, &g, t.t_final, t.nt, false)?
        }
        Mode::Elliptic => return Err(Error::Config("forward-parabolic needs mode parabolic or initial_data".into())),
    };
    let times: Vec<f64> = (0..=t.nt).map(|n| sol.time.time(n)).collect();
    let final_mass = mass(&g, &sol.final_state);
    let info = json!({ "final_mass": final_mass, "sigma_norm": sol.sigma_norm(&g), "n_star": sol.n_star });
    println!("final_mass {} sigma_norm {}", fmt_f64(final_mass), fmt_f64(sol.sigma_norm(&g)));
    finish(
        &out_dir(c, &cfg),
        &cfg,
        "forward-parabolic",
        vec![("sigma_trace.csv", space_time_csv(&g, &times, &sol.sigma_trace)?), ("forward.json", render_json(&info))],
    )?;
    Ok(0)
}

fn matrix_text(m: &[f64], cols: usize) -> String {
    m.chunks(cols).map(|r| r.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")).collect::<Vec<_>>().join("\n  ")
}

pub fn ot(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let (g, _) = domain(&cfg)?;
    let (a, xs, b, ys): (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) = if cfg.mode == Mode::Parabolic {
        let (mu, nu) = spacetime_pair(&cfg, &g)?;
        let s = cfg.setup();
        let em = discretize_events(&mu, s.event_samples);
        let en = discretize_events(&nu, s.event_samples);
        (em.masses, em.events.iter().map(|e| e.to_vec()).collect(), en.masses, en.events.iter().map(|e| e.to_vec()).collect())
    } else {
        let (mu, nu) = static_pair(&cfg, &g)?;
        (
            mu.amplitudes(),
            mu.locations().iter().map(|p| p.to_vec()).collect(),
            nu.amplitudes(),
            nu.locations().iter().map(|p| p.to_vec()).collect(),
        )
    };
    let res = solve_ot(&a, &xs, &b, &ys, &cfg.cost).map_err(|e| match e {
        Error::CostDimension { .. } => Error::Config(format!("cost: {e}")),
        e => e,
    })?;
    let (phi, psi) = normalize_potentials(&res.costs, &res.phi, &res.psi, 1e-10)?;
    let n = b.len();
    println!("cost {}", fmt_f64(res.cost));
    println!("plan\n  {}", matrix_text(&res.plan, n));
    println!("phi {}", matrix_text(&res.phi, res.phi.len()));
    println!("psi {}", matrix_text(&res.psi, res.psi.len()));
    println!("phi_normalized {}", matrix_text(&phi, phi.len()));
    println!("psi_normalized {}", matrix_text(&psi, psi.len()));
    println!("dual_value {}", fmt_f64(dual_value(&a, &b, &res.phi, &res.psi)));
    println!("duality_gap {}", fmt_f64(duality_gap(&res)));
    let brute = if a.len() <= 4 && n <= 4 { Some(brute_force_transport(&a, &b, &res.costs)?) } else { None };
    match brute {
        Some(bf) => {
            let ok = (bf - res.cost).abs() <= 1e-9 * (1.0 + res.cost);
            println!("brute_force {} {}", fmt_f64(bf), if ok { "match" } else { "MISMATCH" });
        }
        None => println!("brute_force skipped (more than 4 atoms per side)"),
    }
    let mut plan = String::from("i,j,mass,cost\n");
    for i in 0..a.len() {
        for j in 0..n {
            let _ = writeln!(plan, "{i},{j},{},{}", fmt_f64(res.plan[i * n + j]), fmt_f64(res.costs[i * n + j]));
        }
    }
    let mut duals = String::from("side,index,value,normalized\n");
    for (i, (v, w)) in res.phi.iter().zip(&phi).enumerate() {
        let _ = writeln!(duals, "phi,{i},{},{}", fmt_f64(*v), fmt_f64(*w));
    }
    for (j, (v, w)) in res.psi.iter().zip(&psi).enumerate() {
        let _ = writeln!(duals, "psi,{j},{},{}", fmt_f64(*v), fmt_f64(*w));
    }
    finish(&out_dir(c, &cfg), &cfg, "ot", vec![("plan.csv", plan), ("duals.csv", duals)])?;
    Ok(match brute {
        Some(bf) if (bf - res.cost).abs() > 1e-9 * (1.0 + res.cost) => 1,
        _ => 0,
    })
}

pub fn cgo_basis(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let (g, coeffs) = domain(&cfg)?;
    let (mu, _) = static_pair(&cfg, &g)?;
    let pts = mu.locations();
    let bx = FaddeevBox::new(&g);
    let basis = build_basis(&g, &bx, &coeffs, &pts, r_mode(&cfg), &CorrectionOptions::default())?;
    let interp = basis.interpolation_error(&g)?;
    println!("points {} r_used {}", pts.len(), fmt_f64(basis.r_used));
    println!("sigma_min {}", fmt_f64(basis.sigma_min));
    println!("beta_bound {}", fmt_f64(basis.beta_bound));
    println!("interpolation_error {}", fmt_f64(interp));
    let mut info = json!({
        "r_used": basis.r_used,
        "sigma_min": basis.sigma_min,
        "beta_bound": basis.beta_bound,
        "interpolation_error": interp,
        "n_sigma_min": basis.n_sigma_min,
    });
    let mut code = 0;
    if coeffs.qtilde.iter().all(|v| v.abs() <= 1e-14) {
        // ψ ≡ 0, so the scaled entries are exp(ρ_j·s_l − r|s_l|²/2 − r|s_j|²/2)/(√κ(s_l)√κ(s_j))
        let n = pts.len();
        let mut err: f64 = 0.0;
        for l in 0..n {
            for j in 0..n {
                let e = basis.sols[j].rho.dot(pts[l]) - Complex64::new(basis.half_log_p[l] + basis.half_log_p[j], 0.0);
                let closed = e.exp() / (basis.sqrt_kappa[l] * basis.sqrt_kappa[j]);
                err = err.max((basis.n_mat[(l, j)] - closed).norm() / closed.norm().max(1e-300));
            }
        }
        let pass = err <= 1e-10;
        println!("closed-form check: {} (max rel err {})", if pass { "pass" } else { "FAIL" }, fmt_f64(err));
        info["closed_form_rel_err"] = json!(err);
        if !pass {
            code = 1;
        }
    }
    let values: Vec<f64> = (0..pts.len()).map(|i| basis.basis_field(&g, i).map(|f| f.sup_norm())).collect::<Result<_>>()?;
    info["basis_sup_norms"] = json!(values);
    finish(&out_dir(c, &cfg), &cfg, "cgo-basis", vec![("basis.json", render_json(&info))])?;
    Ok(code)
}

/// Seeded target v(·,T*) and the control interval (start node, duration, steps).
struct ControlCase {
    target: ScalarField,
    t0: f64,
    duration: f64,
    steps: usize,
}

fn control_case(cfg: &ExperimentConfig, g: &Grid2D, coeffs: &CoefficientSet, bx: &FaddeevBox, trial: u64) -> Result<ControlCase> {
    let t = need_time(cfg, "control")?;
    let tg = TimeGrid::new(t.t_final, t.nt)?;
    let (t_star, n0) = if t.t_star > 0.0 { (t.t_star, tg.node_of(t.t_star)?) } else { (t.t_final, 0) };
    let mut rng = trial_rng(cfg.seed, trial);
    let spec = cfg.sampling_spec();
    let (_, v) =
        sample_time_test_function(g, bx, &coeffs.q, &spec, t_star, t.band, r_mode(cfg), &CorrectionOptions::default(), &mut rng)?;
    let target = ScalarField::from_real(g, &v.frame(t_star))?;
    Ok(ControlCase { target, t0: tg.time(n0), duration: t.t_final - tg.time(n0), steps: t.nt - n0 })
}

pub fn control(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let (g, coeffs) = domain(&cfg)?;
    let bx = FaddeevBox::new(&g);
    let case = control_case(&cfg, &g, &coeffs, &bx, 0)?;
    let opts = cfg.control.options();
    let ctrl = solve_null_control(&case.target.re(), &coeffs.q, &g, case.duration, case.steps, &opts)?;
    let times: Vec<f64> = (0..ctrl.omega.len()).map(|m| case.t0 + (m as f64 + 0.5) * ctrl.dt).collect();
    let mut log = String::new();
    for e in &ctrl.log {
        let _ = writeln!(
            log,
            "{{\"iteration\":{},\"terminal\":{},\"control\":{}}}",
            e.iteration,
            fmt_json(e.terminal),
            fmt_json(e.control)
        );
    }
    let rel = ctrl.relative_terminal();
    println!(
        "relative_terminal {} control_norm {} iterations {}",
        fmt_f64(rel),
        fmt_f64(ctrl.control_norm),
        ctrl.iterations
    );
    if let Some(w) = &ctrl.warning {
        println!("warning: {w}");
    }
    finish(&out_dir(c, &cfg), &cfg, "control", vec![("omega.csv", space_time_csv(&g, &times, &ctrl.omega)?), ("control_log.jsonl", log)])?;
    Ok(if rel <= opts.terminal_tol { 0 } else { 1 })
}

fn fmt_json(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

pub fn calibrate_constants(c: &Common) -> Result<u8> {
    let cfg = load(c)?;
    let (g, coeffs) = domain(&cfg)?;
    let bx = FaddeevBox::new(&g);
    let base = cfg.r.unwrap_or(3.0);
    let scales = [base, 2.0 * base, 4.0 * base];
    let dirs: Vec<[f64; 2]> = (0..8)
        .map(|k| {
            let a = std::f64::consts::PI * k as f64 / 4.0;
            [a.cos(), a.sin()]
        })
        .collect();
    let opts = CorrectionOptions::default();
    let c1 = calibrate_c1(&g, &bx, &coeffs.qtilde, coeffs.qtilde_hp, &dirs, &scales, &opts)?;
    println!("C1 {}", fmt_f64(c1));
    let mut info = json!({ "C1": c1, "rho_scales": scales.to_vec() });
    if cfg.time.is_some() {
        let copts = cfg.control.options();
        let mut ratios = Vec::new();
        for trial in 0..cfg.trials as u64 {
            let case = control_case(&cfg, &g, &coeffs, &bx, trial)?;
            let ctrl = solve_null_control(&case.target.re(), &coeffs.q, &g, case.duration, case.steps, &copts)?;
            let dn = g.normal_derivative(&case.target)?;
            let denom = g.h1_norm(&case.target.values) + g.boundary_norm(&dn) * case.duration.sqrt();
            ratios.push(if denom > 0.0 { ctrl.control_norm / denom } else { 0.0 });
        }
        let c_emp = ratios.iter().copied().fold(0.0, f64::max);
        println!("C_emp {}", fmt_f64(c_emp));
        info["C_emp"] = json!(c_emp);
        info["control_ratios"] = json!(ratios);
    }
    finish(&out_dir(c, &cfg), &cfg, "calibrate-constants", vec![("constants.json", render_json(&info))])?;
    Ok(0)
}
