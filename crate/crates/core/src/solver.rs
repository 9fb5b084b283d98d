//! The outer iteration: nominal integration, convergence checks, backward
//! sweep, updates, step search, acceptance, control refit, and the
//! regularization and smoothing continuations.
//!
//! Each iteration runs: forward nominal, convergence check, backward sweep
//! with Hessian shifting, multiplier and parameter updates with a repaired
//! Q(t0), the step-factor search, then acceptance with a spline refit of
//! the realized control. A failed search halves the trust radius and
//! re-sweeps; the radius recovers on full-step acceptances.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{advance_smoothing, refit_control, ControlSpline, RefitTarget, SmoothingSchedule};
use crate::dense::DenseTrajectory;
use crate::error::{Error, Result};
use crate::problem::{validate, ParamMode, Problem};
use crate::sweep::{sweep, SweepParams};
use crate::update::{
    a1_search, boundary_parameter_updates, forward_pass, integrate_nominal, merit_of,
    multiplier_update, parameter_update, MeritReport, PassStep, UpdateSet,
};

/// All tunables of the solver. Serialized as the config file, field names
/// matching one to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Constraint tolerance on the residual norm.
    pub eta_psi: f64,
    /// Optimality tolerance on max(|dL|, |H_v|_inf).
    pub eta_h: f64,
    /// Trust radius bounding the feed-forward control step.
    pub delta_u: f64,
    /// Norm clamp on multiplier updates.
    pub delta_nu: f64,
    /// Clamp on parameter updates.
    pub delta_p: f64,
    /// Initial regularisation diagonal.
    pub c0: f64,
    /// Growth factor applied to stagnating constraint components.
    pub c_growth: f64,
    pub c_max: f64,
    pub smoothing: SmoothingSchedule,
    pub rtol: f64,
    pub atol: f64,
    pub max_iterations: usize,
    pub use_multipliers: bool,
    /// Node count of the refit seed grid.
    pub initial_nodes: usize,
    /// Refit acceptance gap on the merit value.
    pub refit_merit_tol: f64,
    /// Refit acceptance gap on the constraint residual norm.
    pub refit_constraint_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta_psi: 1e-6,
            eta_h: 1e-6,
            delta_u: 10.0,
            delta_nu: 1e2,
            delta_p: 1e2,
            c0: 1.0,
            c_growth: 10.0,
            c_max: 1e8,
            smoothing: SmoothingSchedule::default(),
            rtol: 1e-8,
            atol: 1e-10,
            max_iterations: 200,
            use_multipliers: true,
            initial_nodes: 3,
            refit_merit_tol: 1e-7,
            refit_constraint_tol: 1e-7,
        }
    }
}

/// Machine-readable record of one accepted iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j: f64,
    pub psi_norm: f64,
    /// Merit of the accepted pass at the multipliers it was compared
    /// under; strictly below the previous iteration's `merit`.
    pub accepted_merit: f64,
    /// Nominal merit refreshed with the updated multipliers and
    /// regularisation; the next iteration's comparison baseline.
    pub merit: f64,
    pub dl_integral: f64,
    pub eps_u: f64,
    pub eps_nu: f64,
    pub max_shift: f64,
    pub nodes: usize,
    pub hv_max: f64,
    pub p: f64,
    pub d_max: f64,
    pub delta_u: f64,
    pub refit_warning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    TrustRegionCollapse,
}

/// Mutable solver state; serializable so a solve can warm-restart from a
/// checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverState {
    pub control: ControlSpline,
    pub nu: Vec<f64>,
    pub p: f64,
    pub p0: f64,
    pub pf: f64,
    pub c_diag: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub delta_u: f64,
    pub iteration: usize,
}

impl SolverState {
    /// Fresh state from an initial control and parameter guess.
    pub fn fresh(
        prob: &dyn Problem,
        config: &SolverConfig,
        control: ControlSpline,
        p_guess: f64,
    ) -> Self {
        let bounds = prob.control_bounds();
        Self {
            control,
            nu: vec![0.0; prob.n_psi()],
            p: p_guess,
            p0: 0.0,
            pf: p_guess,
            c_diag: vec![config.c0; prob.n_psi()],
            d_diag: config.smoothing.initial_diag(&bounds).iter().copied().collect(),
            delta_u: config.delta_u,
            iteration: 0,
        }
    }
}

/// Final result of a solve.
#[derive(Debug)]
pub struct Solution {
    pub status: SolverStatus,
    pub control: ControlSpline,
    /// Open-loop trajectory of the final control (what the exports sample).
    pub trajectory: DenseTrajectory,
    pub j: f64,
    pub psi: Vec<f64>,
    pub nu: Vec<f64>,
    pub p: f64,
    pub p0: f64,
    pub pf: f64,
    pub c_diag: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub delta_u: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }

    /// Resume point for a warm restart.
    pub fn state(&self) -> SolverState {
        SolverState {
            control: self.control.clone(),
            nu: self.nu.clone(),
            p: self.p,
            p0: self.p0,
            pf: self.pf,
            c_diag: self.c_diag.clone(),
            d_diag: self.d_diag.clone(),
            delta_u: self.delta_u,
            iteration: self.iterations,
        }
    }
}

/// Convergence test: feasibility plus the optimality measures of the last
/// accepted update. Returns true only when optimality evidence exists, so
/// a feasible but unexamined nominal never converges on iteration zero.
pub fn convergence_check(
    psi_norm: f64,
    optimality: Option<(f64, f64)>,
    annealed: bool,
    config: &SolverConfig,
) -> bool {
    if psi_norm > config.eta_psi || !annealed {
        return false;
    }
    match optimality {
        Some((dl_integral, hv_max)) => dl_integral.abs().max(hv_max) <= config.eta_h,
        None => false,
    }
}

/// Grow the regularisation on components whose residual failed to halve
/// since the last change; `psi_ref` tracks the reference magnitudes.
pub fn update_regularization(
    c_diag: &DVector<f64>,
    psi: &DVector<f64>,
    psi_ref: &mut DVector<f64>,
    config: &SolverConfig,
) -> DVector<f64> {
    let mut c = c_diag.clone();
    for i in 0..psi.len() {
        let a = psi[i].abs();
        if a <= 0.5 * psi_ref[i] {
            psi_ref[i] = a;
        } else if a > config.eta_psi {
            c[i] = (c[i] * config.c_growth).min(config.c_max);
            psi_ref[i] = a;
        }
    }
    c
}

const DELTA_U_COLLAPSE: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

/// Run the full iteration to convergence, iteration cap, or trust-region
/// collapse.
pub fn solve(prob: &dyn Problem, config: &SolverConfig, init: SolverState) -> Result<Solution> {
    validate(prob)?;
    let span = prob.t_span();
    let cs = init.control.span();
    if (cs.0 - span.0).abs() > 1e-9 * (span.1 - span.0)
        || (cs.1 - span.1).abs() > 1e-9 * (span.1 - span.0)
    {
        return Err(Error::Contract(format!(
            "initial control spans [{}, {}], problem runs on [{}, {}]",
            cs.0, cs.1, span.0, span.1
        )));
    }
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let bounds = prob.control_bounds();
    let n_psi = prob.n_psi();

    let mut control = init.control;
    control.set_seed_nodes(config.initial_nodes);
    let mut nu = DVector::from_vec(init.nu.clone());
    let mut p = init.p;
    let mut p0 = init.p0;
    let mut pf = init.pf;
    let mut c_diag = DVector::from_vec(init.c_diag.clone());
    let mut d_diag = DVector::from_vec(init.d_diag.clone());
    let mut delta_u = init.delta_u;

    let mut nominal = integrate_nominal(prob, &control, p, config.rtol, config.atol)?;
    let (mut j, mut psi, mut l_bar) = merit_of(prob, nominal.y_end(), p, &nu, &c_diag);
    if !l_bar.is_finite() {
        return Err(Error::Solve(format!(
            "initial nominal merit is not finite (J = {j}, |psi| = {})",
            psi.norm()
        )));
    }
    let mut psi_ref = psi.map(f64::abs);
    let mut optimality: Option<(f64, f64)> = None;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut status = SolverStatus::MaxIterations;
    let mut halvings = 0usize;
    let mut last_report: Option<MeritReport> = None;

    let mut iteration = init.iteration;
    let iter_cap = init.iteration + config.max_iterations;
    while iteration < iter_cap {
        if convergence_check(
            psi.norm(),
            optimality,
            config.smoothing.annealed(&d_diag, &bounds),
            config,
        ) {
            status = SolverStatus::Converged;
            break;
        }

        // Backward step and forward search, shrinking the trust radius
        // until an acceptable update appears.
        let accepted = loop {
            let params = SweepParams {
                nu: nu.clone(),
                p,
                c_diag: c_diag.clone(),
                d_diag: d_diag.clone(),
                delta_u,
                rtol: config.rtol,
                atol: config.atol,
            };
            let swept = match sweep(prob, &nominal, &control, &params) {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("sweep failed ({e}); delta_u -> {}", delta_u * 0.5);
                    delta_u *= 0.5;
                    halvings += 1;
                    if delta_u < DELTA_U_COLLAPSE || halvings > MAX_HALVINGS {
                        break None;
                    }
                    continue;
                }
            };
            let mut updates = UpdateSet::default();
            if has_param {
                let (dp, flag) = parameter_update(swept.w0, swept.g0, config.delta_p);
                updates.dp = dp;
                updates.degenerate_w = flag;
            }
            let with_multipliers = config.use_multipliers && n_psi > 0;
            if with_multipliers {
                let (dnu, skipped, q_rep) =
                    multiplier_update(&swept.q0, &swept.v0, &swept.psi, updates.dp, config.delta_nu);
                updates.dnu = dnu;
                updates.skipped_nu = skipped;
                updates.q_repair = q_rep;
            } else {
                updates.dnu = DVector::zeros(n_psi);
            }
            let search = a1_search(
                |eps_u, eps_nu| {
                    forward_pass(
                        prob,
                        &swept,
                        &nominal,
                        &control,
                        &params,
                        &PassStep {
                            eps_u,
                            eps_nu,
                            dnu: updates.dnu.clone(),
                            dp: updates.dp,
                        },
                    )
                },
                l_bar,
                swept.predicted_dl,
                with_multipliers && !updates.skipped_nu,
            );
            match search {
                Ok(pass) => break Some((swept, pass, updates)),
                Err(e) => {
                    log::debug!("search failed ({e}); delta_u -> {}", delta_u * 0.5);
                    delta_u *= 0.5;
                    halvings += 1;
                    if delta_u < DELTA_U_COLLAPSE || halvings > MAX_HALVINGS {
                        break None;
                    }
                }
            }
        };
        let Some((swept, pass, updates)) = accepted else {
            status = SolverStatus::TrustRegionCollapse;
            break;
        };

        // Accept: adopt multipliers and parameter, refit the control.
        let nu_prev = nu.clone();
        let p_prev = p;
        let c_prev = c_diag.clone();
        nu = pass.nu_new.clone();
        p = pass.p_new;
        let (dp0, dpf) = boundary_parameter_updates(
            prob,
            &prob.x0(),
            p0,
            pass.traj.y_end(),
            pf,
            &nu,
            &c_diag,
            config.delta_p,
        );
        p0 += dp0;
        pf += dpf;

        // Dense refit target: the realized control law sampled on the
        // union of accepted nodes and a fine uniform grid, so the refit
        // sees the continuous law rather than sparse step endpoints.
        let target_step = PassStep {
            eps_u: pass.report.eps_u,
            eps_nu: pass.report.eps_nu,
            dnu: updates.dnu.clone(),
            dp: updates.dp,
        };
        let params_used = SweepParams {
            nu: nu_prev,
            p: p_prev,
            c_diag: c_prev,
            d_diag: d_diag.clone(),
            delta_u,
            rtol: config.rtol,
            atol: config.atol,
        };
        let mut sample_times: Vec<f64> = pass.samples.iter().map(|(t, _)| *t).collect();
        let fine = 1024usize;
        for k in 0..=fine {
            sample_times.push(span.0 + (span.1 - span.0) * k as f64 / fine as f64);
        }
        sample_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sample_times.dedup();
        let mut samples = Vec::with_capacity(sample_times.len());
        for t in sample_times {
            let v = crate::update::realized_control(
                prob,
                &swept,
                &nominal,
                &control,
                &params_used,
                &target_step,
                &pass.traj,
                t,
            )?;
            samples.push((t, v));
        }
        let target = RefitTarget {
            samples,
            j: pass.report.j,
            psi: DVector::from_vec(pass.report.psi.clone()),
        };
        let refit = refit_control(&control, &target, config.refit_merit_tol, config.refit_constraint_tol, |cand| {
            let traj = integrate_nominal(prob, cand, p, config.rtol, config.atol)?;
            let (jc, psic, _) = merit_of(prob, traj.y_end(), p, &nu, &c_diag);
            Ok((jc, psic))
        })?;
        control = refit.spline;
        control.set_seed_nodes(config.initial_nodes);

        nominal = integrate_nominal(prob, &control, p, config.rtol, config.atol)?;
        let m = merit_of(prob, nominal.y_end(), p, &nu, &c_diag);
        j = m.0;
        psi = m.1;
        optimality = Some((pass.report.dl_integral, pass.report.hv_max));

        // Continuations: regularisation growth on stagnating components,
        // then the smoothing decay.
        c_diag = update_regularization(&c_diag, &psi, &mut psi_ref, config);
        iteration += 1;
        d_diag = advance_smoothing(&config.smoothing, iteration, &d_diag);
        if pass.report.eps_u >= 1.0 {
            delta_u = (delta_u * 2.0).min(config.delta_u);
        }

        l_bar = merit_of(prob, nominal.y_end(), p, &nu, &c_diag).2;
        let record = IterationRecord {
            iteration,
            j,
            psi_norm: psi.norm(),
            accepted_merit: pass.report.merit,
            merit: l_bar,
            dl_integral: pass.report.dl_integral,
            eps_u: pass.report.eps_u,
            eps_nu: pass.report.eps_nu,
            max_shift: swept.max_shift,
            nodes: control.n_nodes(),
            hv_max: pass.report.hv_max,
            p,
            d_max: d_diag.iter().copied().fold(0.0, f64::max),
            delta_u,
            refit_warning: refit.warning,
        };
        if let Ok(line) = serde_json::to_string(&record) {
            log::info!("{line}");
        }
        history.push(record);
        last_report = Some(pass.report);
    }

    let _ = last_report;
    Ok(Solution {
        status,
        j,
        psi: psi.iter().copied().collect(),
        nu: nu.iter().copied().collect(),
        p,
        p0,
        pf,
        c_diag: c_diag.iter().copied().collect(),
        d_diag: d_diag.iter().copied().collect(),
        delta_u,
        iterations: iteration,
        history,
        trajectory: nominal,
        control,
    })
}
