//! Scenario runner behind the `wildgas` binary.
//!
//! Every scenario writes `config.json` plus its own CSV/JSON artifacts into
//! the output directory. Outputs depend only on the config (including the
//! seed), never on timing or thread count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::ansatz::Ansatz;
use crate::config::{ExperimentConfig, Scenario};
use crate::convint::{iterate, jensen_floor, ledger_csv, Evaluation, Schedule, StepOptions, Target, Trajectory, WildProblem, WildState};
use crate::heat::{comparison_bounds, HeatOptions};
use crate::presets::{preset, InitialData};
use crate::relent::GasState;
use crate::torus::{write_snapshot, GridSpec, ScalarField, Snapshot};
use crate::{Error, Result};

/// Exit status for a failed run: 1 for configuration or precondition
/// errors, 3 for a stalled scenario, 2 for any violated invariant.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Precondition(_) | Error::InvalidGrid(_) | Error::NotSolenoidal(_) => 1,
        Error::Io(_) | Error::Json(_) => 1,
        Error::StepStalled(_) | Error::StallAtLevel { .. } => 3,
        _ => 2,
    }
}

/// Artifacts written by a successful run and the JSON summary.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, body)?;
        self.files.push(p);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let body = serde_json::to_string_pretty(v)?;
        self.text(name, &(body + "\n"))
    }

    fn snapshot(&mut self, name: &str, s: &Snapshot) -> Result<()> {
        let p = self.dir.join(name);
        write_snapshot(&p, s)?;
        self.files.push(p);
        Ok(())
    }
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut out = Out::new(out_dir)?;
    out.json("config.json", cfg)?;
    let summary = match cfg.scenario {
        Scenario::Wild => run_wild(cfg, &mut out)?,
        Scenario::Dissipative => run_dissipative(cfg, &mut out)?,
        Scenario::Weakstrong => run_weakstrong(cfg, &mut out)?,
        Scenario::Verify => run_verify(cfg, &mut out)?,
    };
    Ok(RunOutcome { scenario: cfg.scenario, files: out.files, summary })
}

fn grid(cfg: &ExperimentConfig) -> Result<GridSpec> {
    GridSpec::new(cfg.dim, cfg.n_space, cfg.n_time, cfg.t_final)
}

fn data(cfg: &ExperimentConfig) -> Result<InitialData> {
    preset(&cfg.preset, cfg.dim, cfg.n_space)
}

/// Result of the wild-solution iteration.
pub struct WildRun {
    pub ansatz: Ansatz,
    pub theta0: ScalarField,
    pub chi: f64,
    pub trajectory: Trajectory,
}

/// Runs the energy-gain iteration from `(v₀, U = 0)` with a constant energy
/// level chosen from the comparison bounds.
pub fn wild_run(cfg: &ExperimentConfig) -> Result<WildRun> {
    let g = grid(cfg)?;
    let d = data(cfg)?;
    let ansatz = Ansatz::build(&g, &d.rho0, &d.u0)?;
    let (_, hi) = comparison_bounds(&ansatz, &d.theta0)?;
    let chi = crate::subsolution::choose_chi_wild(&ansatz, hi, cfg.chi_margin);
    let chi_fn = move |_t: f64| chi;
    let problem = WildProblem {
        ansatz: &ansatz,
        target: Target::Ebar { chi: &chi_fn, theta0: &d.theta0, heat: HeatOptions::default() },
    };
    let schedule = Schedule { eps: cfg.eps(), max_steps: cfg.max_steps, tol: cfg.tol };
    let opts = StepOptions { box_cap: cfg.box_cap, ..StepOptions::default() };
    let trajectory = iterate(&problem, WildState::new(ansatz.v0().clone()), &schedule, &opts)?;
    Ok(WildRun { ansatz, theta0: d.theta0, chi, trajectory })
}

/// Gas trajectory `(ρ̃, (v + ∇Ψ)/ρ̃, θ[v])` of an evaluated subsolution.
pub fn wild_gas_state(ansatz: &Ansatz, eval: &Evaluation) -> Result<GasState> {
    let sol = eval.theta.as_ref().ok_or_else(|| Error::Precondition("evaluation carries no temperature".into()))?;
    let mut rho = Vec::with_capacity(eval.times.len());
    let mut u = Vec::with_capacity(eval.times.len());
    for (j, &t) in eval.times.iter().enumerate() {
        let r = ansatz.rho_tilde(t);
        let mut w = eval.v[j].clone();
        w.axpy(1.0, &ansatz.grad_psi(t));
        u.push(w.mul_scalar(&r.map(|x| 1.0 / x)));
        rho.push(r);
    }
    GasState::new(eval.times.clone(), rho, sol.theta.clone(), u)
}

fn run_wild(cfg: &ExperimentConfig, out: &mut Out) -> Result<Value> {
    let w = wild_run(cfg)?;
    let tr = &w.trajectory;
    out.text("ledger.csv", &ledger_csv(&tr.ledger))?;
    let gas = wild_gas_state(&w.ansatz, &tr.final_eval)?;
    let energy = crate::relent::total_energy(&gas);
    let (lambda_hat, jensen_ok) = jensen_floor(&tr.ledger, cfg.t_final);
    let summary = json!({
        "scenario": "wild",
        "eps": cfg.eps(),
        "chi": w.chi,
        "steps": tr.ledger.len(),
        "i_eps": tr.i_eps,
        "remaining_defect": tr.remaining_defect(),
        "jensen": { "lambda_hat": lambda_hat, "holds": jensen_ok },
        "gap_report": tr.final_report,
        "stalled": tr.stalled,
        "energy": energy,
        "bounds": gas.bounds(),
    });
    out.json("report.json", &summary)?;
    out.snapshot("velocity.wgf", &Snapshot::from_vectors(&tr.final_eval.v, cfg.t_final)?)?;
    out.snapshot("theta.wgf", &Snapshot::from_scalars(&gas.theta, cfg.t_final)?)?;
    if !tr.final_report.member {
        return Err(Error::Invariant(format!("final state left the subsolution set: {:?}", tr.final_report.inf_after)));
    }
    if tr.ledger.len() < cfg.max_steps && tr.remaining_defect() > cfg.tol {
        return Err(Error::StepStalled(tr.stalled.clone().unwrap_or_else(|| "iteration ended early".into())));
    }
    Ok(summary)
}

/// Largest relative deviation of the kinetic schedule's slope from `−K` over
/// `m` uniform chords of `(0, knee)`.
pub fn knee_slope_defect(e: &crate::dissipdata::DissipativeEnergy, m: usize) -> f64 {
    let knee = e.knee();
    (0..m)
        .map(|i| {
            let (t1, t2) = (knee * i as f64 / m as f64, knee * (i + 1) as f64 / m as f64);
            let slope = (e.kinetic_part(t2) - e.kinetic_part(t1)) / (t2 - t1);
            (slope + e.k).abs() / e.k
        })
        .fold(0.0, f64::max)
}

/// Dissipative-data construction from the preset's `(ρ₀, θ₀)` with the
/// preset velocity as the solenoidal seed.
pub fn dissipative_run(cfg: &ExperimentConfig) -> Result<crate::dissipdata::DissipativeOutcome> {
    let d = data(cfg)?;
    let dc = crate::dissipdata::DissipativeConfig {
        t_final: cfg.t_final,
        n_time: cfg.n_time,
        depth: cfg.depth,
        chi_bar: cfg.chi_bar,
        k: cfg.k,
        chi_margin: cfg.chi_margin,
        ..Default::default()
    };
    crate::dissipdata::dissipative_pipeline(&d.rho0, &d.u0, &d.theta0, &dc)
}

fn run_dissipative(cfg: &ExperimentConfig, out: &mut Out) -> Result<Value> {
    let o = dissipative_run(cfg)?;
    out.text("staircase.csv", &o.recursion.staircase_csv())?;
    let defects = o.recursion.defects();
    let slope = knee_slope_defect(&o.energy, 64);
    let summary = json!({
        "scenario": "dissipative",
        "chi0": o.chi0,
        "profile": o.profile,
        "tau_bar": o.recursion.tau_bar,
        "levels": o.recursion.levels,
        "saturation_defects": defects,
        "knee": o.energy.knee(),
        "slope_defect": slope,
        "admissibility": o.admissibility,
        "k_history": o.k_history,
        "forced_failure": o.forced_failure,
        "energy_defect": o.energy_defect,
        "saturated_defect": o.saturated_defect,
    });
    out.json("report.json", &summary)?;
    out.snapshot("w_start.wgf", &Snapshot::from_vectors(std::slice::from_ref(&o.w_start), cfg.t_final)?)?;
    if defects.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Invariant(format!("saturation defects not decreasing: {defects:?}")));
    }
    if o.saturated_defect > 1e-8 || slope > 1e-12 {
        return Err(Error::Invariant(format!("saturated defect {:e}, slope defect {slope:e}", o.saturated_defect)));
    }
    Ok(summary)
}

/// Relative-entropy comparisons on `[0, t_short]`: a refined classical run
/// against the reference (identical data), a perturbed-density run, and the
/// wild trajectory from the same data.
fn run_weakstrong(cfg: &ExperimentConfig, out: &mut Out) -> Result<Value> {
    use crate::relent::{classical_solve, rel_entropy_inequality_residual, weak_strong_monitor, ClassicalOptions};
    let d = data(cfg)?;
    let t_short = cfg.t_short();
    let o = ClassicalOptions::default();
    let samples = 9;
    let weak = classical_solve(&d.rho0, &d.theta0, &d.u0, t_short, samples, &ClassicalOptions { refine: 2, ..o.clone() })?;
    let (identical, reference) = weak_strong_monitor(&weak, &d, &o)?;
    let self_check = rel_entropy_inequality_residual(&reference, &reference)?;
    let bump = ScalarField::from_fn(cfg.dim, cfg.n_space, |x| (std::f64::consts::TAU * x[1]).cos());
    let mut perturbed = Vec::new();
    for a in [1e-2, 5e-3] {
        let rho = d.rho0.zip_map(&bump, |r, b| r + a * r * b);
        let run = classical_solve(&rho, &d.theta0, &d.u0, t_short, samples, &o)?;
        let (rep, _) = weak_strong_monitor(&run, &d, &o)?;
        perturbed.push(json!({ "amplitude": a, "report": rep }));
    }

    let w = wild_run(cfg)?;
    let gas = wild_gas_state(&w.ansatz, &w.trajectory.final_eval)?;
    let keep = gas.times.iter().take_while(|t| **t <= t_short + 1e-12).count().max(2);
    let short = GasState::new(
        gas.times[..keep].to_vec(),
        gas.rho[..keep].to_vec(),
        gas.theta[..keep].to_vec(),
        gas.u[..keep].to_vec(),
    )?;
    let (wild, _) = weak_strong_monitor(&short, &d, &o)?;
    let summary = json!({
        "scenario": "weakstrong",
        "t_short": t_short,
        "identical": identical,
        "self_inequality_defect": self_check.max_abs_defect(),
        "perturbed": perturbed,
        "wild": wild,
        "wild_energy_defect": crate::relent::total_energy(&gas).defect,
    });
    out.json("report.json", &summary)?;
    if identical.max_value > 1e-6 {
        return Err(Error::Invariant(format!("identical-data relative entropy {:e}", identical.max_value)));
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= tolerance`.
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, pass: value <= tolerance }
    }
}

/// Fast invariant suite over the configured grid and preset; random inputs
/// come from a ChaCha8 stream seeded by `seed`.
pub fn verify_checks(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    use crate::subsolution::{equality_tensor, kinetic_inequality_check};
    use crate::torus::{random_band_limited, SymMat, VectorField};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    let mut violations = 0usize;
    let mut missed_equality = 0usize;
    for i in 0..cfg.samples {
        let dim = 2 + i % 2;
        let w = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), if dim == 3 { rng.gen_range(-2.0..2.0) } else { 0.0 }];
        let rho = rng.gen_range(0.1..4.0);
        let mut u = SymMat::zeros(dim);
        for a in 0..dim {
            for b in a..dim {
                let x = rng.gen_range(-3.0..3.0);
                u.a[a][b] = x;
                u.a[b][a] = x;
            }
        }
        let tr = u.trace() / dim as f64;
        let u = u.sub(&SymMat::identity(dim).scale(tr));
        if !kinetic_inequality_check(&w, &u, rho).holds() {
            violations += 1;
        }
        let eq = kinetic_inequality_check(&w, &equality_tensor(dim, &w, rho), rho);
        if !(eq.equality && (eq.lhs - eq.rhs).abs() <= 1e-10 * eq.lhs.max(1.0)) {
            missed_equality += 1;
        }
    }
    checks.push(Check::at_most("kinetic_inequality_violations", violations as f64, 0.0));
    checks.push(Check::at_most("kinetic_equality_misses", missed_equality as f64, 0.0));

    let g = grid(cfg)?;
    let d = data(cfg)?;
    let ansatz = Ansatz::build(&g, &d.rho0, &d.u0)?;
    checks.push(Check::at_most("continuity_residual", ansatz.continuity_residual(), 1e-8));
    let h = ansatz.profile();
    let h_err = h.h(0.0).abs().max((h.h_prime(0.0) - 1.0).abs()).max(h.h(cfg.t_final).abs());
    checks.push(Check::at_most("h_endpoint_conditions", h_err, 1e-12));
    let (rho_min, _) = ansatz.rho_tilde_range();
    let floor = 0.5 * ansatz.rho_lower();
    checks.push(Check { name: "density_floor".into(), value: rho_min, tolerance: floor, pass: rho_min > floor });

    let torus = ansatz.torus();
    let comps = (0..cfg.dim).map(|_| random_band_limited(&mut rng, cfg.dim, cfg.n_space, 4, true)).collect();
    let w = VectorField::from_components(comps)?;
    let (sol, grad) = torus.helmholtz_decompose(&w)?;
    checks.push(Check::at_most("helmholtz_round_trip", sol.add(&grad).sub(&w).max_norm(), 1e-9));

    let (lo, hi) = comparison_bounds(&ansatz, &d.theta0)?;
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let knots: Vec<f64> = (0..5).map(|i| cfg.t_final * i as f64 / 4.0).collect();
        let path = crate::heat::random_solenoidal_path(&mut rng, torus, &knots, 3, 1.0)?;
        let s = crate::heat::solve_theta(&ansatz, &path, &d.theta0, &HeatOptions::default())?;
        worst = worst.max(lo - s.min()).max(s.max() - hi);
    }
    checks.push(Check::at_most("comparison_bound_excess", worst, 1e-6));

    let mut rel_min = f64::INFINITY;
    for i in 0..cfg.samples {
        let dim = 2 + i % 2;
        let mut draw = || {
            let u = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            (rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), u)
        };
        let (a, b) = (draw(), draw());
        rel_min = rel_min.min(crate::relent::rel_entropy_density(dim, (a.0, a.1, &a.2), (b.0, b.1, &b.2)));
    }
    checks.push(Check { name: "relative_entropy_min".into(), value: rel_min, tolerance: -1e-10, pass: rel_min >= -1e-10 });

    let o = crate::relent::ClassicalOptions::default();
    let cl = crate::relent::classical_solve(&d.rho0, &d.theta0, &d.u0, cfg.t_short(), 9, &o)?;
    let en = crate::relent::total_energy(&cl);
    checks.push(Check::at_most("classical_energy_drift", en.defect / en.energy[0], 1e-6));
    let fine = crate::relent::ClassicalOptions { refine: 2, ..o.clone() };
    let cl2 = crate::relent::classical_solve(&d.rho0, &d.theta0, &d.u0, cfg.t_short(), 9, &fine)?;
    let (ws, _) = crate::relent::weak_strong_monitor(&cl2, &d, &o)?;
    checks.push(Check::at_most("weak_strong_identical", ws.max_value, 1e-6));

    let sat = crate::dissipdata::saturated_energy_defect(cfg.dim, 8, cfg.n_time, cfg.t_final, 1.3, 0.8, [0.4, -0.2, 0.1])?;
    checks.push(Check::at_most("saturated_energy_defect", sat, 1e-8));
    Ok(checks)
}

fn run_verify(cfg: &ExperimentConfig, out: &mut Out) -> Result<Value> {
    let checks = verify_checks(cfg)?;
    let summary = json!({ "scenario": "verify", "checks": checks });
    out.json("report.json", &summary)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::Invariant(format!("failed checks: {failed:?}")));
    }
    Ok(summary)
}
