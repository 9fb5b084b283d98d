//! Multiplier and parameter updates, the feedback forward pass, merit
//! evaluation, and the step-factor search.
//!
//! The forward pass integrates the dynamics under the linear feedback law
//! evaluated continuously from the sweep records; the nominal state enters
//! through dense evaluation of the stored trajectory, never through a
//! discrete mesh. Acceptance always compares merits at the multipliers of
//! the current iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::ControlSpline;
use crate::dense::{DenseTrajectory, Integrator};
use crate::error::{Error, Result};
use crate::problem::{eval_derivatives, ParamMode, Problem};
use crate::sweep::{shift_negative, SweepParams, SweepSolution};

/// Merit and diagnostics of one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeritReport {
    pub j: f64,
    pub psi: Vec<f64>,
    pub psi_norm: f64,
    /// `L = J + nu' psi + psi' C psi`, evaluated at the multipliers the
    /// pass was compared under.
    pub merit: f64,
    pub dl_predicted: f64,
    pub dl_integral: f64,
    pub eps_u: f64,
    pub eps_nu: f64,
    /// Largest slack-space Hamiltonian gradient component along the pass,
    /// with the Riccati-corrected costate.
    pub hv_max: f64,
}

/// Raw (unscaled) updates computed from one sweep.
#[derive(Debug, Clone, Default)]
pub struct UpdateSet {
    pub dnu: DVector<f64>,
    pub dp: f64,
    pub dp0: f64,
    pub dpf: f64,
    /// Parameter curvature was not usable; `dp` was zeroed.
    pub degenerate_w: bool,
    /// Multiplier system was unusable; `dnu` was zeroed.
    pub skipped_nu: bool,
    /// Shift applied to make Q(t0) negative definite.
    pub q_repair: f64,
}

/// Merit function `L = J + nu' psi + psi' C psi` at a terminal state.
pub fn merit_of(
    prob: &dyn Problem,
    x_f: &DVector<f64>,
    p: f64,
    nu: &DVector<f64>,
    c_diag: &DVector<f64>,
) -> (f64, DVector<f64>, f64) {
    let j = prob.cost(x_f, p);
    let mut psi = DVector::zeros(prob.n_psi());
    prob.terminal_constraints(x_f, p, &mut psi);
    let mut l = j;
    for i in 0..psi.len() {
        l += nu[i] * psi[i] + c_diag[i] * psi[i] * psi[i];
    }
    (j, psi, l)
}

/// Newton step on the accumulated parameter gradient: `dp = -rhs / w0`,
/// clamped to the trust radius. Requires positive reduced curvature
/// (`w0 > 0`); otherwise the step is zeroed and flagged.
pub fn parameter_update(w0: f64, rhs: f64, delta_p: f64) -> (f64, bool) {
    if !(w0 > 1e-14) {
        return (0.0, true);
    }
    let dp = -rhs / w0;
    (dp.clamp(-delta_p, delta_p), false)
}

/// Multiplier update solving `Q0 dnu = -(psi + V0 dp)` after repairing Q0
/// to negative definiteness. Norm-clamped to `delta_nu`. The direction
/// increases multipliers along unsatisfied constraints, which is what
/// shrinks the residual on the next pass.
pub fn multiplier_update(
    q0: &DMatrix<f64>,
    v0: &DVector<f64>,
    psi: &DVector<f64>,
    dp: f64,
    delta_nu: f64,
) -> (DVector<f64>, bool, f64) {
    let n = psi.len();
    if n == 0 {
        return (DVector::zeros(0), false, 0.0);
    }
    let (q_nd, sigma) = shift_negative(q0);
    // Solve with the positive definite mirror.
    let chol = match (-&q_nd).cholesky() {
        Some(c) => c,
        None => return (DVector::zeros(n), true, sigma),
    };
    // Condition guard on the repaired matrix.
    let svd = q_nd.clone().svd(false, false);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if smin <= 0.0 || smax / smin > 1e12 {
        return (DVector::zeros(n), true, sigma);
    }
    let rhs = psi + v0 * dp;
    let mut dnu = chol.solve(&rhs);
    let norm = dnu.norm();
    if norm > delta_nu {
        dnu *= delta_nu / norm;
    }
    (dnu, false, sigma)
}

/// Newton steps on the boundary-constraint parameters, each clamped to the
/// trust radius. `dp0` drives the initial-constraint stationarity, `dpf`
/// the extended terminal value function of a terminal-only parameter.
pub fn boundary_parameter_updates(
    prob: &dyn Problem,
    x0: &DVector<f64>,
    p0: f64,
    x_f: &DVector<f64>,
    pf: f64,
    nu: &DVector<f64>,
    c_diag: &DVector<f64>,
    delta_p: f64,
) -> (f64, f64) {
    let dp0 = if prob.has_initial_parameter() && prob.n_phi() > 0 {
        let gp = prob.phi_p(x0, p0).sum();
        let gpp = prob.phi_pp(x0, p0).sum();
        if gpp.abs() > 1e-14 {
            (-gp / gpp).clamp(-delta_p, delta_p)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let dpf = if prob.parameter() == ParamMode::TerminalOnly {
        let mut psi = DVector::zeros(prob.n_psi());
        prob.terminal_constraints(x_f, pf, &mut psi);
        let psi_p = prob.psi_p(x_f, pf);
        let cw =
            DVector::from_iterator(psi.len(), (0..psi.len()).map(|i| nu[i] + 2.0 * c_diag[i] * psi[i]));
        let c_psi_p =
            DVector::from_iterator(psi.len(), (0..psi.len()).map(|i| c_diag[i] * psi_p[i]));
        let phi_p = prob.j_p(x_f, pf) + cw.dot(&psi_p);
        let phi_pp = prob.j_pp(x_f, pf) + cw.dot(&prob.psi_pp(x_f, pf)) + 2.0 * psi_p.dot(&c_psi_p);
        if phi_pp.abs() > 1e-14 {
            (-phi_p / phi_pp).clamp(-delta_p, delta_p)
        } else {
            0.0
        }
    } else {
        0.0
    };
    (dp0, dpf)
}

/// Step factors and raw updates applied by one forward pass.
#[derive(Debug, Clone)]
pub struct PassStep {
    pub eps_u: f64,
    pub eps_nu: f64,
    pub dnu: DVector<f64>,
    pub dp: f64,
}

impl PassStep {
    pub fn zero(n_psi: usize) -> Self {
        Self {
            eps_u: 0.0,
            eps_nu: 0.0,
            dnu: DVector::zeros(n_psi),
            dp: 0.0,
        }
    }

    fn dp_applied(&self) -> f64 {
        self.eps_u * self.dp
    }

    fn dnu_applied(&self) -> DVector<f64> {
        &self.dnu * self.eps_nu
    }
}

/// Everything one forward pass produced.
#[derive(Debug)]
pub struct PassResult {
    pub traj: DenseTrajectory,
    pub report: MeritReport,
    /// Slack values of the realized control at the accepted nodes, the
    /// refit target.
    pub samples: Vec<(f64, DVector<f64>)>,
    pub p_new: f64,
    pub nu_new: DVector<f64>,
}

/// Integrate the dynamics open-loop under a spline control.
pub fn integrate_nominal(
    prob: &dyn Problem,
    control: &ControlSpline,
    p: f64,
    rtol: f64,
    atol: f64,
) -> Result<DenseTrajectory> {
    let integ = Integrator {
        rtol,
        atol,
        ..Integrator::default()
    };
    let x0 = prob.x0();
    let mut u = DVector::zeros(prob.n_u());
    let span = prob.t_span();
    integ
        .integrate(
            |t, x: &DVector<f64>, dx: &mut DVector<f64>| {
                let tc = t.clamp(span.0, span.1);
                match control.eval_slack(tc) {
                    Ok(v) => {
                        control.transform().to_control_into(&v, &mut u);
                        prob.dynamics(x, &u, p, t, dx);
                    }
                    Err(_) => dx.fill(f64::NAN),
                }
            },
            &x0,
            span,
            true,
        )
        .map_err(|e| Error::ForwardPass(format!("nominal integration failed: {e}")))
}

/// Integrate the dynamics under the feedback-updated control
/// `u = m(v_nom + eps_u alpha + beta dx + gamma dp_a + omega dnu_a)` and
/// evaluate the merit at the multipliers of the current iteration.
pub fn forward_pass(
    prob: &dyn Problem,
    sweep_sol: &SweepSolution,
    nominal: &DenseTrajectory,
    control: &ControlSpline,
    params: &SweepParams,
    step: &PassStep,
) -> Result<PassResult> {
    let n_u = prob.n_u();
    let span = prob.t_span();
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let dp_a = if has_param { step.dp_applied() } else { 0.0 };
    let dnu_a = step.dnu_applied();
    let p_new = params.p + dp_a;
    let tr = control.transform().clone();

    let slack_update = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let (gains, _) = sweep_sol.feedback_at(t, prob, nominal, control, params)?;
        let x_nom = nominal.eval(t)?;
        let v_nom = control.eval_slack(t)?;
        let mut dv = &gains.alpha * step.eps_u + &gains.beta * (x - &x_nom);
        if has_param {
            dv += &gains.gamma * dp_a;
        }
        if !dnu_a.is_empty() {
            dv += &gains.omega * &dnu_a;
        }
        Ok(&v_nom + dv)
    };

    let integ = Integrator {
        rtol: params.rtol,
        atol: params.atol,
        ..Integrator::default()
    };
    let x0 = prob.x0();
    let traj = integ
        .integrate(
            |t, x: &DVector<f64>, dx: &mut DVector<f64>| {
                let tc = t.clamp(span.0, span.1);
                match slack_update(tc, x) {
                    Ok(v) => {
                        let u = tr.to_control(&v);
                        prob.dynamics(x, &u, p_new, t, dx);
                    }
                    Err(_) => dx.fill(f64::NAN),
                }
            },
            &x0,
            span,
            true,
        )
        .map_err(|e| Error::ForwardPass(format!("{e}")))?;

    // Sample the realized control at the accepted nodes and measure the
    // Hamiltonian gradient with the Riccati-corrected costate.
    let mut samples = Vec::new();
    let mut hv_max: f64 = 0.0;
    for t in traj.node_times() {
        let t = t.clamp(span.0, span.1);
        let x = traj.eval(t)?;
        let v = slack_update(t, &x)?;
        let point = sweep_sol.eval(t)?;
        let x_nom = nominal.eval(t)?;
        let mut lambda = &point.lambda + &point.r * (&x - &x_nom);
        if !dnu_a.is_empty() {
            lambda += &point.k * &dnu_a;
        }
        if has_param {
            lambda += &point.t * dp_a;
        }
        let u = tr.to_control(&v);
        let derivs = eval_derivatives(prob, &x, &lambda, &u, p_new, t, &params.d_diag)?;
        let h_v = derivs.h_u.component_mul(&tr.dm(&v));
        hv_max = hv_max.max(h_v.amax());
        samples.push((t, v));
    }

    let x_f = traj.y_end().clone();
    let (j, psi, merit) = merit_of(prob, &x_f, p_new, &params.nu, &params.c_diag);
    if !merit.is_finite() {
        return Err(Error::ForwardPass("non-finite merit".into()));
    }
    let dl_integral = validity_check(prob, sweep_sol, nominal, control, params, step)?;
    let nu_new = &params.nu + &dnu_a;
    let _ = n_u;
    Ok(PassResult {
        report: MeritReport {
            j,
            psi: psi.iter().copied().collect(),
            psi_norm: psi.norm(),
            merit,
            dl_predicted: sweep_sol.predicted_dl,
            dl_integral,
            eps_u: step.eps_u,
            eps_nu: step.eps_nu,
            hv_max,
        },
        traj,
        samples,
        p_new,
        nu_new,
    })
}

/// Slack control the pass realized at time `t`, reconstructed from the
/// stored pass trajectory and the continuous feedback law. This is what
/// the refit target samples, at whatever density the refit needs.
pub fn realized_control(
    prob: &dyn Problem,
    sweep_sol: &SweepSolution,
    nominal: &DenseTrajectory,
    control: &ControlSpline,
    params: &SweepParams,
    step: &PassStep,
    pass_traj: &DenseTrajectory,
    t: f64,
) -> Result<DVector<f64>> {
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let x = pass_traj.eval(t)?;
    let (gains, _) = sweep_sol.feedback_at(t, prob, nominal, control, params)?;
    let x_nom = nominal.eval(t)?;
    let v_nom = control.eval_slack(t)?;
    let mut dv = &gains.alpha * step.eps_u + &gains.beta * (&x - &x_nom);
    if has_param {
        dv += &gains.gamma * (step.eps_u * step.dp);
    }
    if step.eps_nu != 0.0 && !step.dnu.is_empty() {
        dv += &gains.omega * (&step.dnu * step.eps_nu);
    }
    Ok(&v_nom + dv)
}

/// Second-order validity measure: the integral of the Hamiltonian change
/// produced by the control update along the nominal state and costate.
/// Negative values signal an improving update; the magnitude vanishes with
/// `eps_u`.
pub fn validity_check(
    prob: &dyn Problem,
    sweep_sol: &SweepSolution,
    nominal: &DenseTrajectory,
    control: &ControlSpline,
    params: &SweepParams,
    step: &PassStep,
) -> Result<f64> {
    let span = prob.t_span();
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let dp_a = if has_param { step.dp_applied() } else { 0.0 };
    let dnu_a = step.dnu_applied();
    let tr = control.transform().clone();
    let p_new = params.p + dp_a;
    let integ = Integrator {
        rtol: (params.rtol * 10.0).min(1e-6),
        atol: params.atol.max(1e-12),
        ..Integrator::default()
    };
    let mut f_buf = DVector::zeros(prob.n_x());
    let integrand = |t: f64| -> f64 {
        let t = t.clamp(span.0, span.1);
        let (gains, point) = match sweep_sol.feedback_at(t, prob, nominal, control, params) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        let x_nom = match nominal.eval(t) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        let v_nom = match control.eval_slack(t) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        // Control law evaluated on the nominal path (dx = 0).
        let mut dv = &gains.alpha * step.eps_u;
        if has_param {
            dv += &gains.gamma * dp_a;
        }
        if !dnu_a.is_empty() {
            dv += &gains.omega * &dnu_a;
        }
        let u_new = tr.to_control(&(&v_nom + dv));
        let u_old = tr.to_control(&v_nom);
        // Both Hamiltonians use the nominal parameter: this integral
        // isolates the control update, the parameter's first-order effect
        // lives in the terminal value function.
        let mut h = |u: &DVector<f64>| -> f64 {
            prob.dynamics(&x_nom, u, params.p, t, &mut f_buf);
            let mut val = point.lambda.dot(&f_buf);
            for i in 0..u.len() {
                if params.d_diag.len() > i {
                    val += params.d_diag[i] * u[i] * u[i];
                }
            }
            val
        };
        h(&u_new) - h(&u_old)
    };
    let _ = p_new;
    integ.quadrature(integrand, span)
}

/// Search outcome: the accepted pass.
pub type SearchOutcome = PassResult;

const ARMIJO: f64 = 1e-4;
const MIN_EPS_U: f64 = 1.0 / 64.0;

/// Find step factors giving sufficient merit decrease.
///
/// Without multipliers this is a backtracking line search on `eps_u` over
/// {1, 1/2, ..., 1/64}; with multipliers a coarse descending grid over
/// `[eps_u, eps_nu]` in {1, 3/4, 1/2, 1/4, 0}^2. Both stop at the first
/// probe with `L < L_bar - 1e-4 |dL_predicted|`.
pub fn a1_search<F>(
    mut pass_runner: F,
    l_bar: f64,
    dl_predicted: f64,
    use_multipliers: bool,
) -> Result<SearchOutcome>
where
    F: FnMut(f64, f64) -> Result<PassResult>,
{
    let threshold = l_bar - ARMIJO * dl_predicted.abs();
    let accepts = |r: &PassResult| r.report.merit.is_finite() && r.report.merit < threshold;
    if use_multipliers {
        for eu_q in (0..=4).rev() {
            for en_q in (0..=4).rev() {
                if eu_q == 0 && en_q == 0 {
                    continue;
                }
                let (eps_u, eps_nu) = (eu_q as f64 / 4.0, en_q as f64 / 4.0);
                if let Ok(result) = pass_runner(eps_u, eps_nu) {
                    if accepts(&result) {
                        return Ok(result);
                    }
                }
            }
        }
        Err(Error::SearchFailed { min_eps: 0.25 })
    } else {
        let mut eps_u = 1.0;
        while eps_u >= MIN_EPS_U - 1e-12 {
            if let Ok(result) = pass_runner(eps_u, 0.0) {
                if accepts(&result) {
                    return Ok(result);
                }
            }
            eps_u *= 0.5;
        }
        Err(Error::SearchFailed { min_eps: MIN_EPS_U })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::SlackTransform;
    use crate::problem::ControlBound;
    use crate::problems::{LqrScalar, LqrTwoState, LtiParam};
    use crate::sweep::sweep;
    use approx::assert_relative_eq;

    fn free_transform(n: usize) -> SlackTransform {
        SlackTransform::new(&vec![ControlBound::Free; n])
    }

    fn params_for(prob: &dyn Problem, d: f64, p: f64) -> SweepParams {
        SweepParams {
            nu: DVector::zeros(prob.n_psi()),
            p,
            c_diag: DVector::zeros(prob.n_psi()),
            d_diag: DVector::from_element(prob.n_u(), d),
            delta_u: 1e6,
            rtol: 1e-10,
            atol: 1e-12,
        }
    }

    #[test]
    fn parameter_update_scalar_and_clamp() {
        // Newton step -rhs / w0 with positive curvature.
        let (dp, flag) = parameter_update(2.0, 4.0, 1e6);
        assert_eq!(dp, -2.0);
        assert!(!flag);
        let (dp, _) = parameter_update(2.0, -4.0, 0.5);
        assert_eq!(dp, 0.5);
        // Nonpositive curvature is degenerate.
        let (dp, flag) = parameter_update(-2.0, 4.0, 1e6);
        assert_eq!(dp, 0.0);
        assert!(flag);
    }

    #[test]
    fn multiplier_update_feasible_point_is_zero() {
        let q0 = DMatrix::from_element(1, 1, -1.0);
        let (dnu, skipped, _) = multiplier_update(&q0, &DVector::zeros(1), &DVector::zeros(1), 0.0, 1e6);
        assert_eq!(dnu[0], 0.0);
        assert!(!skipped);
    }

    #[test]
    fn multiplier_update_scalar_solve() {
        // Q0 = -1, psi = 0.3: dnu = -Q0^{-1} psi = +0.3, the multiplier
        // ascent direction that contracts the residual.
        let q0 = DMatrix::from_element(1, 1, -1.0);
        let (dnu, skipped, sigma) =
            multiplier_update(&q0, &DVector::zeros(1), &DVector::from_element(1, 0.3), 0.0, 1e6);
        assert!(!skipped);
        assert_eq!(sigma, 0.0);
        assert_relative_eq!(dnu[0], 0.3, epsilon = 1e-14);
    }

    #[test]
    fn multiplier_update_repairs_indefinite_q() {
        let q0 = DMatrix::from_element(1, 1, 0.5);
        let (dnu, skipped, sigma) =
            multiplier_update(&q0, &DVector::zeros(1), &DVector::from_element(1, 1.0), 0.0, 1e6);
        assert!(!skipped);
        assert!(sigma > 0.5);
        assert!(dnu[0].is_finite());
    }

    #[test]
    fn boundary_updates_absent_parameters() {
        let prob = LqrScalar::default();
        let x = DVector::zeros(1);
        let (dp0, dpf) =
            boundary_parameter_updates(&prob, &x, 0.0, &x, 0.0, &DVector::zeros(0), &DVector::zeros(0), 1e6);
        assert_eq!((dp0, dpf), (0.0, 0.0));
    }

    #[test]
    fn boundary_update_quadratic_newton() {
        struct InitParam;
        impl Problem for InitParam {
            fn name(&self) -> &str {
                "init_param"
            }
            fn n_x(&self) -> usize {
                1
            }
            fn n_u(&self) -> usize {
                1
            }
            fn n_phi(&self) -> usize {
                1
            }
            fn t_span(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
            fn x0(&self) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn control_bounds(&self) -> Vec<ControlBound> {
                vec![ControlBound::Free]
            }
            fn has_initial_parameter(&self) -> bool {
                true
            }
            fn dynamics(&self, _x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
                out[0] = u[0];
            }
            fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
                xf[0]
            }
            fn initial_constraints(&self, _x0: &DVector<f64>, p0: f64, out: &mut DVector<f64>) {
                out[0] = (p0 - 2.0) * (p0 - 2.0);
            }
        }
        let prob = InitParam;
        let x = DVector::zeros(1);
        let (dp0, _) =
            boundary_parameter_updates(&prob, &x, 3.0, &x, 0.0, &DVector::zeros(0), &DVector::zeros(0), 1e6);
        assert_relative_eq!(dp0, -1.0, max_relative = 1e-6);
    }

    #[test]
    fn terminal_only_newton_stationary() {
        struct TermParam;
        impl Problem for TermParam {
            fn name(&self) -> &str {
                "term_param"
            }
            fn n_x(&self) -> usize {
                1
            }
            fn n_u(&self) -> usize {
                1
            }
            fn n_psi(&self) -> usize {
                1
            }
            fn t_span(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
            fn x0(&self) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn control_bounds(&self) -> Vec<ControlBound> {
                vec![ControlBound::Free]
            }
            fn parameter(&self) -> ParamMode {
                ParamMode::TerminalOnly
            }
            fn dynamics(&self, _x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
                out[0] = u[0];
            }
            fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
                xf[0]
            }
            fn terminal_constraints(&self, xf: &DVector<f64>, p: f64, out: &mut DVector<f64>) {
                // Stationary in p at p = 1: psi = x - (p - 1)^2... holds
                // psi_p = 0 at p = 1.
                out[0] = xf[0] - (p - 1.0) * (p - 1.0);
            }
        }
        let prob = TermParam;
        let x = DVector::from_element(1, 0.4);
        let (_, dpf) = boundary_parameter_updates(
            &prob,
            &x,
            0.0,
            &x,
            1.0,
            &DVector::from_element(1, 0.7),
            &DVector::zeros(1),
            1e6,
        );
        assert_relative_eq!(dpf, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn forward_pass_zero_update_reproduces_nominal() {
        let prob = LqrTwoState::default();
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, 0.3), 3, free_transform(1))
                .unwrap();
        let params = params_for(&prob, 0.5, 0.0);
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let pass = forward_pass(
            &prob,
            &sol,
            &nominal,
            &control,
            &params,
            &PassStep::zero(0),
        )
        .unwrap();
        let (_, _, l_nominal) = merit_of(&prob, nominal.y_end(), 0.0, &params.nu, &params.c_diag);
        assert_relative_eq!(pass.report.merit, l_nominal, epsilon = 1e-9);
        assert!(pass.report.dl_integral.abs() <= 1e-10);
        let xf_a = pass.traj.y_end();
        let xf_b = nominal.y_end();
        assert_relative_eq!(xf_a[0], xf_b[0], epsilon = 1e-9);
        assert_relative_eq!(xf_a[1], xf_b[1], epsilon = 1e-9);
    }

    // Independent fixed-step RK4 for the test oracles.
    fn rk4<F: Fn(f64, &DVector<f64>) -> DVector<f64>>(
        f: F,
        y0: DVector<f64>,
        t0: f64,
        tf: f64,
        steps: usize,
    ) -> DVector<f64> {
        let h = (tf - t0) / steps as f64;
        let mut y = y0;
        let mut t = t0;
        for _ in 0..steps {
            let k1 = f(t, &y);
            let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
            let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
            let k4 = f(t + h, &(&y + &k3 * h));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            t += h;
        }
        y
    }

    #[test]
    fn lqr_one_shot_scalar() {
        // One sweep plus one full-step pass solves the scalar LQ problem:
        // the Hamiltonian gradient vanishes and the merit matches the
        // closed-form Riccati optimum.
        let prob = LqrScalar {
            qf: 1.0,
            x_init: 1.0,
            horizon: 1.0,
        };
        let d = 0.5;
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, 0.7), 3, free_transform(1))
                .unwrap();
        let mut params = params_for(&prob, d, 0.0);
        params.rtol = 1e-11;
        params.atol = 1e-13;
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let step = PassStep {
            eps_u: 1.0,
            eps_nu: 0.0,
            dnu: DVector::zeros(0),
            dp: 0.0,
        };
        let pass = forward_pass(&prob, &sol, &nominal, &control, &params, &step).unwrap();
        assert!(
            pass.report.hv_max <= 1e-8,
            "H_v after one shot: {}",
            pass.report.hv_max
        );
        // Closed-loop optimum by the analytic Riccati gain u = -P x / (2d).
        let p_riccati = |t: f64| 1.0 / (1.0 + (1.0 - t) / (2.0 * d));
        let x_star = rk4(
            |t, y| DVector::from_element(1, -p_riccati(t) / (2.0 * d) * y[0]),
            DVector::from_element(1, 1.0),
            0.0,
            1.0,
            4000,
        );
        let merit_star = 0.5 * x_star[0] * x_star[0];
        assert_relative_eq!(pass.report.merit, merit_star, epsilon = 1e-8);
    }

    #[test]
    fn lqr_one_shot_two_state() {
        let prob = LqrTwoState::default();
        let d = 0.4;
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, -0.8), 3, free_transform(1))
                .unwrap();
        let mut params = params_for(&prob, d, 0.0);
        params.rtol = 1e-11;
        params.atol = 1e-13;
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let step = PassStep {
            eps_u: 1.0,
            eps_nu: 0.0,
            dnu: DVector::zeros(0),
            dp: 0.0,
        };
        let pass = forward_pass(&prob, &sol, &nominal, &control, &params, &step).unwrap();
        assert!(pass.report.hv_max <= 1e-8, "H_v: {}", pass.report.hv_max);

        // Riccati oracle integrated backward with independent RK4, then the
        // closed loop forward.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let r_w = 2.0 * d;
        let pack = |m: &DMatrix<f64>| DVector::from_vec(vec![m[(0, 0)], m[(0, 1)], m[(1, 1)]]);
        let unpack =
            |v: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]]);
        let p_tf = prob.qf.clone();
        let p_path = rk4(
            |_t, y| {
                let p = unpack(y);
                let dp = -(&p * &a + a.transpose() * &p
                    - &p * &b * b.transpose() * &p / r_w);
                pack(&dp)
            },
            pack(&p_tf),
            2.0,
            0.0,
            4000,
        );
        let p0_mat = unpack(&p_path);
        // Sweep R at t0 matches the Riccati oracle.
        let sweep_r0 = sol.eval(0.0).unwrap().r;
        assert!((&sweep_r0 - &p0_mat).amax() <= 1e-6, "R mismatch");

        // Optimal merit via closed-loop RK4 re-integration of P(t).
        let x_star = {
            let f = |t: f64, y: &DVector<f64>| {
                let p_t = unpack(&rk4(
                    |_s, z| {
                        let p = unpack(z);
                        let dp = -(&p * &a + a.transpose() * &p
                            - &p * &b * b.transpose() * &p / r_w);
                        pack(&dp)
                    },
                    pack(&p_tf),
                    2.0,
                    t,
                    400,
                ));
                let u = -(b.transpose() * &p_t * y) / r_w;
                &a * y + &b * u
            };
            rk4(f, prob.x_init.clone(), 0.0, 2.0, 800)
        };
        let merit_star = 0.5 * (x_star.transpose() * &prob.qf * &x_star)[(0, 0)];
        assert_relative_eq!(pass.report.merit, merit_star, epsilon = 1e-6);
    }

    #[test]
    fn multiplier_step_contracts_residual() {
        // LTI problem with terminal constraints: one multiplier step of
        // eps_nu reduces the constraint residual by about that factor.
        let prob = LtiParam::two_state();
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::zeros(1), 3, free_transform(1)).unwrap();
        let mut params = params_for(&prob, 0.5, 0.1);
        params.nu = DVector::from_element(2, 0.0);
        let nominal = integrate_nominal(&prob, &control, params.p, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let psi0 = sol.psi.clone();
        let (dnu, skipped, _) = multiplier_update(&sol.q0, &sol.v0, &psi0, 0.0, 1e6);
        assert!(!skipped);
        // Pure multiplier move: on an LTI problem with linear constraints
        // the predicted response dpsi = Q0 dnu = -psi is exact, so the
        // residual collapses to integration accuracy.
        let step = PassStep {
            eps_u: 0.0,
            eps_nu: 1.0,
            dnu,
            dp: 0.0,
        };
        let pass = forward_pass(&prob, &sol, &nominal, &control, &params, &step).unwrap();
        assert!(
            pass.report.psi_norm <= 1e-7 * (1.0 + psi0.norm()),
            "residual {} vs {}",
            pass.report.psi_norm,
            psi0.norm()
        );
    }

    #[test]
    fn validity_identical_controls_zero() {
        let prob = LqrScalar::default();
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, 0.2), 3, free_transform(1))
                .unwrap();
        let params = params_for(&prob, 0.5, 0.0);
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let dl = validity_check(&prob, &sol, &nominal, &control, &params, &PassStep::zero(0)).unwrap();
        assert!(dl.abs() <= 1e-12);
    }

    #[test]
    fn validity_minimizer_improves() {
        let prob = LqrScalar::default();
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, 0.9), 3, free_transform(1))
                .unwrap();
        let params = params_for(&prob, 0.5, 0.0);
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let step = PassStep {
            eps_u: 1.0,
            eps_nu: 0.0,
            dnu: DVector::zeros(0),
            dp: 0.0,
        };
        let dl = validity_check(&prob, &sol, &nominal, &control, &params, &step).unwrap();
        assert!(dl < -1e-6, "dl = {dl}");
    }

    #[test]
    fn validity_vanishes_linearly_with_eps() {
        let prob = LqrScalar::default();
        let control =
            ControlSpline::constant(prob.t_span(), &DVector::from_element(1, 0.9), 3, free_transform(1))
                .unwrap();
        let params = params_for(&prob, 0.5, 0.0);
        let nominal = integrate_nominal(&prob, &control, 0.0, params.rtol, params.atol).unwrap();
        let sol = sweep(&prob, &nominal, &control, &params).unwrap();
        let mut prev = f64::INFINITY;
        for &eps in &[1e-1, 1e-2, 1e-3] {
            let step = PassStep {
                eps_u: eps,
                eps_nu: 0.0,
                dnu: DVector::zeros(0),
                dp: 0.0,
            };
            let dl = validity_check(&prob, &sol, &nominal, &control, &params, &step)
                .unwrap()
                .abs();
            assert!(dl < prev);
            assert!(dl <= 10.0 * eps, "|dL|({eps}) = {dl}");
            prev = dl;
        }
    }

    #[test]
    fn search_accepts_full_step_first() {
        let mut calls = 0;
        let result = a1_search(
            |eps_u, _| {
                calls += 1;
                Ok(fake_pass(1.0 - eps_u))
            },
            1.0,
            -0.5,
            false,
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(result.report.eps_u, 0.0);
    }

    #[test]
    fn search_fails_when_no_decrease() {
        let err = a1_search(|_eu, _en| Ok(fake_pass(2.0)), 1.0, -0.5, false).unwrap_err();
        assert!(matches!(err, Error::SearchFailed { .. }));
    }

    fn fake_pass(merit: f64) -> PassResult {
        PassResult {
            traj: Integrator::default()
                .integrate(
                    |_t, _y: &DVector<f64>, dy: &mut DVector<f64>| dy.fill(0.0),
                    &DVector::zeros(1),
                    (0.0, 1.0),
                    false,
                )
                .unwrap(),
            report: MeritReport {
                j: merit,
                psi: vec![],
                psi_norm: 0.0,
                merit,
                dl_predicted: 0.0,
                dl_integral: 0.0,
                eps_u: 0.0,
                eps_nu: 0.0,
                hv_max: 0.0,
            },
            samples: vec![],
            p_new: 0.0,
            nu_new: DVector::zeros(0),
        }
    }
}
