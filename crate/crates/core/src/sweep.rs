//! Backward sweep: integrates the costate and sensitivity-matrix ODE
//! system around the stored nominal trajectory, shifting the control
//! Hessian wherever it loses positive definiteness, and stores every block
//! as a continuous record so the forward pass can evaluate feedback gains
//! at arbitrary times.
//!
//! All control-space quantities live in slack space: the chain rule through
//! the bound transform is applied before any gain is formed, so saturated
//! arcs carry useful curvature and a vanishing gradient, exactly as the
//! bang-bang limit requires.

use nalgebra::{DMatrix, DVector};
use std::cell::Cell;

use crate::control::ControlSpline;
use crate::dense::{DenseTrajectory, Integrator};
use crate::error::{Error, Result};
use crate::problem::{eval_derivatives, HamiltonianDerivatives, ParamMode, Problem};

/// Floor on the smallest eigenvalue after shifting.
pub const EPS_PD: f64 = 1e-10;

/// Smallest nonnegative diagonal shift making `h_vv` positive definite with
/// smallest eigenvalue at least `max(EPS_PD, |h_v| / delta_u)`; the second
/// term bounds the feed-forward step norm by the trust radius.
pub fn shift_hessian(
    h_vv: &DMatrix<f64>,
    h_v: Option<&DVector<f64>>,
    delta_u: f64,
) -> (DMatrix<f64>, f64) {
    let n = h_vv.nrows();
    let lam_min = if n == 1 {
        h_vv[(0, 0)]
    } else {
        h_vv.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    };
    let mut target = EPS_PD;
    if let Some(g) = h_v {
        if delta_u.is_finite() && delta_u > 0.0 {
            target = target.max(g.norm() / delta_u);
        }
    }
    let shift = (target - lam_min).max(0.0);
    let mut shifted = h_vv.clone();
    for i in 0..n {
        shifted[(i, i)] += shift;
    }
    (shifted, shift)
}

/// Mirror of [`shift_hessian`] for the multiplier block: smallest shift
/// `sigma >= 0` such that `Q - sigma I` is negative definite.
pub fn shift_negative(q: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = q.nrows();
    if n == 0 {
        return (q.clone(), 0.0);
    }
    let lam_max = if n == 1 {
        q[(0, 0)]
    } else {
        q.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let sigma = (lam_max + EPS_PD).max(0.0);
    let mut shifted = q.clone();
    for i in 0..n {
        shifted[(i, i)] -= sigma;
    }
    (shifted, sigma)
}

/// Point values of the feedback law `dv = alpha + beta dx + gamma dp +
/// omega dnu` (slack space).
#[derive(Debug, Clone)]
pub struct FeedbackGains {
    pub alpha: DVector<f64>,
    pub beta: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub shift: f64,
}

/// Gains from shifted slack-space derivatives and the current sweep blocks.
/// Solves with a factorization of the shifted Hessian, never an inverse.
pub fn feedback_gains(
    derivs: &HamiltonianDerivatives,
    h_vv_shifted: &DMatrix<f64>,
    shift: f64,
    r: &DMatrix<f64>,
    k: &DMatrix<f64>,
    t_block: Option<&DVector<f64>>,
) -> Result<FeedbackGains> {
    let chol = h_vv_shifted
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Sweep("shifted control Hessian is not positive definite".into()))?;
    let zx = &derivs.h_ux + derivs.f_u.transpose() * r;
    let alpha = -chol.solve(&derivs.h_u);
    let beta = -chol.solve(&zx);
    let omega = -chol.solve(&(derivs.f_u.transpose() * k));
    let gamma = match t_block {
        Some(t) => -chol.solve(&(&derivs.h_up + derivs.f_u.transpose() * t)),
        None => DVector::zeros(derivs.h_u.len()),
    };
    Ok(FeedbackGains {
        alpha,
        beta,
        gamma,
        omega,
        shift,
    })
}

/// Terminal values of every sweep block: derivatives of the extended
/// terminal value function `phi = J + nu' psi + psi' C psi`.
#[derive(Debug, Clone)]
pub struct TerminalConditions {
    pub lambda: DVector<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub t: DVector<f64>,
    pub v: DVector<f64>,
    pub w: f64,
    /// First derivative of `phi` with respect to the parameter; seeds the
    /// accumulated parameter gradient.
    pub g: f64,
    pub psi: DVector<f64>,
}

pub fn terminal_conditions(
    prob: &dyn Problem,
    x_f: &DVector<f64>,
    nu: &DVector<f64>,
    p: f64,
    c_diag: &DVector<f64>,
) -> Result<TerminalConditions> {
    let n_x = prob.n_x();
    let n_psi = prob.n_psi();
    if x_f.len() != n_x || nu.len() != n_psi || c_diag.len() != n_psi {
        return Err(Error::Contract(
            "terminal_conditions dimension mismatch".into(),
        ));
    }
    let mut psi = DVector::zeros(n_psi);
    prob.terminal_constraints(x_f, p, &mut psi);
    let psi_x = prob.psi_x(x_f, p);
    let psi_p = prob.psi_p(x_f, p);
    if !psi.iter().all(|v| v.is_finite()) || !psi_x.iter().all(|v| v.is_finite()) {
        return Err(Error::Evaluation {
            block: "psi".into(),
        });
    }
    // Weights of the constraint curvature: nu + 2 C psi.
    let cw = DVector::from_iterator(n_psi, (0..n_psi).map(|i| nu[i] + 2.0 * c_diag[i] * psi[i]));
    let c_psi_x = DMatrix::from_fn(n_psi, n_x, |i, j| c_diag[i] * psi_x[(i, j)]);
    let lambda = prob.j_x(x_f, p) + psi_x.transpose() * &cw;
    let r = prob.j_xx(x_f, p) + prob.psi_xx_w(x_f, p, &cw) + psi_x.transpose() * &c_psi_x * 2.0;
    let k = psi_x.transpose();
    let q = DMatrix::zeros(n_psi, n_psi);
    let (t, v, w, g) = if prob.parameter() == ParamMode::Dynamic {
        let c_psi_p = DVector::from_iterator(n_psi, (0..n_psi).map(|i| c_diag[i] * psi_p[i]));
        let t = prob.j_xp(x_f, p) + prob.psi_xp_w(x_f, p, &cw) + psi_x.transpose() * &c_psi_p * 2.0;
        let v = psi_p.clone();
        let w = prob.j_pp(x_f, p) + cw.dot(&prob.psi_pp(x_f, p)) + 2.0 * psi_p.dot(&c_psi_p);
        let g = prob.j_p(x_f, p) + cw.dot(&psi_p);
        (t, v, w, g)
    } else {
        (DVector::zeros(n_x), DVector::zeros(n_psi), 0.0, 0.0)
    };
    Ok(TerminalConditions {
        lambda,
        r,
        k,
        q,
        t,
        v,
        w,
        g,
        psi,
    })
}

// Stacked storage layout of the backward system: row-major blocks in order
// lambda, R, K, Q, T, V, W, g, with the predicted-decrease scalar last.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_x: usize,
    n_psi: usize,
    has_param: bool,
}

impl Layout {
    fn lambda(&self) -> usize {
        0
    }
    fn r(&self) -> usize {
        self.n_x
    }
    fn k(&self) -> usize {
        self.r() + self.n_x * self.n_x
    }
    fn q(&self) -> usize {
        self.k() + self.n_x * self.n_psi
    }
    fn t(&self) -> usize {
        self.q() + self.n_psi * self.n_psi
    }
    fn v(&self) -> usize {
        self.t() + if self.has_param { self.n_x } else { 0 }
    }
    fn w(&self) -> usize {
        self.v() + if self.has_param { self.n_psi } else { 0 }
    }
    fn g(&self) -> usize {
        self.w() + usize::from(self.has_param)
    }
    fn ell(&self) -> usize {
        self.g() + usize::from(self.has_param)
    }
    fn len(&self) -> usize {
        self.ell() + 1
    }

    fn read_mat(&self, y: &DVector<f64>, off: usize, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| y[off + i * cols + j])
    }

    fn write_mat(&self, y: &mut DVector<f64>, off: usize, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                y[off + i * m.ncols() + j] = m[(i, j)];
            }
        }
    }

    fn read_vec(&self, y: &DVector<f64>, off: usize, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |i, _| y[off + i])
    }

    fn write_vec(&self, y: &mut DVector<f64>, off: usize, v: &DVector<f64>) {
        for i in 0..v.len() {
            y[off + i] = v[i];
        }
    }
}

/// Sweep blocks evaluated at one time.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: DVector<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub t: DVector<f64>,
    pub v: DVector<f64>,
    pub w: f64,
    pub g: f64,
    /// Predicted merit decrease accumulated from this time to t_f.
    pub ell: f64,
}

/// Everything the backward sweep produced: the continuous stacked record
/// plus the values the update equations need at t0.
#[derive(Debug)]
pub struct SweepSolution {
    traj: DenseTrajectory,
    layout: Layout,
    /// Largest Hessian shift applied anywhere along the sweep.
    pub max_shift: f64,
    /// Largest symmetry residual observed in stored R.
    pub max_asym: f64,
    /// Terminal constraint residual of the nominal trajectory.
    pub psi: DVector<f64>,
    /// Predicted merit change of the full feed-forward step (<= 0).
    pub predicted_dl: f64,
    pub q0: DMatrix<f64>,
    pub v0: DVector<f64>,
    pub w0: f64,
    pub g0: f64,
}

/// Inputs shared by the sweep and the forward pass.
#[derive(Debug, Clone)]
pub struct SweepParams {
    pub nu: DVector<f64>,
    pub p: f64,
    pub c_diag: DVector<f64>,
    pub d_diag: DVector<f64>,
    pub delta_u: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl SweepSolution {
    /// Stored span in integration order, (tf, t0).
    pub fn span(&self) -> (f64, f64) {
        self.traj.span()
    }

    /// Blocks at time `t` (stored R and Q are re-symmetrized on read).
    pub fn eval(&self, t: f64) -> Result<SweepPoint> {
        let y = self.traj.eval(t)?;
        Ok(self.unpack(&y))
    }

    fn unpack(&self, y: &DVector<f64>) -> SweepPoint {
        let l = &self.layout;
        let r_raw = l.read_mat(y, l.r(), l.n_x, l.n_x);
        let q_raw = l.read_mat(y, l.q(), l.n_psi, l.n_psi);
        SweepPoint {
            lambda: l.read_vec(y, l.lambda(), l.n_x),
            r: (&r_raw + r_raw.transpose()) * 0.5,
            k: l.read_mat(y, l.k(), l.n_x, l.n_psi),
            q: (&q_raw + q_raw.transpose()) * 0.5,
            t: if l.has_param {
                l.read_vec(y, l.t(), l.n_x)
            } else {
                DVector::zeros(l.n_x)
            },
            v: if l.has_param {
                l.read_vec(y, l.v(), l.n_psi)
            } else {
                DVector::zeros(l.n_psi)
            },
            w: if l.has_param { y[l.w()] } else { 0.0 },
            g: if l.has_param { y[l.g()] } else { 0.0 },
            ell: y[l.ell()],
        }
    }

    pub fn has_param(&self) -> bool {
        self.layout.has_param
    }

    /// Slack-space feedback gains and sweep blocks at `t`, around the
    /// stored nominal. This is the forward pass's workhorse.
    pub fn feedback_at(
        &self,
        t: f64,
        prob: &dyn Problem,
        nominal: &DenseTrajectory,
        control: &ControlSpline,
        params: &SweepParams,
    ) -> Result<(FeedbackGains, SweepPoint)> {
        let point = self.eval(t)?;
        let x_nom = nominal.eval(t)?;
        let v_nom = control.eval_slack(t)?;
        let tr = control.transform();
        let u_nom = tr.to_control(&v_nom);
        let derivs = eval_derivatives(
            prob,
            &x_nom,
            &point.lambda,
            &u_nom,
            params.p,
            t,
            &params.d_diag,
        )?
        .into_slack(&tr.dm(&v_nom), &tr.d2m(&v_nom));
        let (h_vv_sh, shift) = shift_hessian(&derivs.h_uu, Some(&derivs.h_u), params.delta_u);
        let t_block = if self.layout.has_param {
            Some(&point.t)
        } else {
            None
        };
        let gains = feedback_gains(&derivs, &h_vv_sh, shift, &point.r, &point.k, t_block)?;
        Ok((gains, point))
    }
}

/// Integrate the coupled backward system from t_f to t0 around the nominal
/// trajectory and control. Fails (so the caller can shrink the trust
/// radius) when the integration blows up.
pub fn sweep(
    prob: &dyn Problem,
    nominal: &DenseTrajectory,
    control: &ControlSpline,
    params: &SweepParams,
) -> Result<SweepSolution> {
    let n_x = prob.n_x();
    let n_psi = prob.n_psi();
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let layout = Layout {
        n_x,
        n_psi,
        has_param,
    };
    let (t0, tf) = {
        let (a, b) = nominal.span();
        (a.min(b), a.max(b))
    };
    let x_f = nominal.eval(tf)?;
    let term = terminal_conditions(prob, &x_f, &params.nu, params.p, &params.c_diag)?;

    let mut y_f = DVector::zeros(layout.len());
    layout.write_vec(&mut y_f, layout.lambda(), &term.lambda);
    layout.write_mat(&mut y_f, layout.r(), &term.r);
    layout.write_mat(&mut y_f, layout.k(), &term.k);
    layout.write_mat(&mut y_f, layout.q(), &term.q);
    if has_param {
        layout.write_vec(&mut y_f, layout.t(), &term.t);
        layout.write_vec(&mut y_f, layout.v(), &term.v);
        y_f[layout.w()] = term.w;
        y_f[layout.g()] = term.g;
    }
    y_f[layout.ell()] = 0.0;

    let max_shift = Cell::new(0.0f64);
    let max_asym = Cell::new(0.0f64);
    let tr = control.transform().clone();

    let rhs = |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| {
        dy.fill(f64::NAN);
        let x_nom = match nominal.eval(t) {
            Ok(x) => x,
            Err(_) => return,
        };
        let v_nom = match control.eval_slack(t) {
            Ok(v) => v,
            Err(_) => return,
        };
        let lambda = layout.read_vec(y, layout.lambda(), n_x);
        let r_raw = layout.read_mat(y, layout.r(), n_x, n_x);
        let asym = (&r_raw - r_raw.transpose()).amax() / r_raw.amax().max(1.0);
        max_asym.set(max_asym.get().max(asym));
        let r = (&r_raw + r_raw.transpose()) * 0.5;
        let k = layout.read_mat(y, layout.k(), n_x, n_psi);

        let u_nom = tr.to_control(&v_nom);
        let derivs =
            match eval_derivatives(prob, &x_nom, &lambda, &u_nom, params.p, t, &params.d_diag) {
                Ok(d) => d.into_slack(&tr.dm(&v_nom), &tr.d2m(&v_nom)),
                Err(_) => return,
            };
        let (h_vv_sh, shift) = shift_hessian(&derivs.h_uu, Some(&derivs.h_u), params.delta_u);
        max_shift.set(max_shift.get().max(shift));
        let t_vec = if has_param {
            layout.read_vec(y, layout.t(), n_x)
        } else {
            DVector::zeros(n_x)
        };
        let gains = match feedback_gains(
            &derivs,
            &h_vv_sh,
            shift,
            &r,
            &k,
            if has_param { Some(&t_vec) } else { None },
        ) {
            Ok(g) => g,
            Err(_) => return,
        };
        let zx = &derivs.h_ux + derivs.f_u.transpose() * &r;

        // Costate.
        let lambda_dot = -(&derivs.h_x + zx.transpose() * &gains.alpha);
        layout.write_vec(dy, layout.lambda(), &lambda_dot);
        // Riccati block.
        let r_dot = -(&derivs.h_xx
            + &r * &derivs.f_x
            + derivs.f_x.transpose() * &r
            + zx.transpose() * &gains.beta);
        layout.write_mat(dy, layout.r(), &r_dot);
        // Constraint sensitivity.
        let k_dot = -(derivs.f_x.transpose() * &k + zx.transpose() * &gains.omega);
        layout.write_mat(dy, layout.k(), &k_dot);
        // Multiplier block.
        let q_dot = -(k.transpose() * &derivs.f_u * &gains.omega);
        layout.write_mat(dy, layout.q(), &q_dot);

        if has_param {
            let fv_gamma_fp = &derivs.f_u * &gains.gamma + &derivs.f_p;
            let t_dot = -(&derivs.h_xp
                + derivs.f_x.transpose() * &t_vec
                + zx.transpose() * &gains.gamma
                + &r * &derivs.f_p);
            layout.write_vec(dy, layout.t(), &t_dot);
            let v_dot = -(k.transpose() * &fv_gamma_fp);
            layout.write_vec(dy, layout.v(), &v_dot);
            let w_dot = -(derivs.h_pp
                + gains.gamma.dot(&derivs.h_up)
                + t_vec.dot(&fv_gamma_fp)
                + derivs.f_p.dot(&t_vec));
            dy[layout.w()] = w_dot;
            let zp = &derivs.h_up + derivs.f_u.transpose() * &t_vec;
            dy[layout.g()] = -(derivs.h_p + gains.alpha.dot(&zp));
        }
        // Predicted decrease from the pure feed-forward move.
        dy[layout.ell()] =
            -(derivs.h_u.dot(&gains.alpha) + 0.5 * gains.alpha.dot(&(&h_vv_sh * &gains.alpha)));
    };

    let integ = Integrator {
        rtol: params.rtol,
        atol: params.atol,
        ..Integrator::default()
    };
    let traj = integ
        .integrate(rhs, &y_f, (tf, t0), true)
        .map_err(|e| Error::Sweep(format!("backward integration failed: {e}")))?;

    let y0 = traj.y_end().clone();
    let sol = SweepSolution {
        layout,
        max_shift: max_shift.get(),
        max_asym: max_asym.get(),
        psi: term.psi,
        predicted_dl: y0[layout.ell()],
        q0: {
            let q_raw = layout.read_mat(&y0, layout.q(), n_psi, n_psi);
            (&q_raw + q_raw.transpose()) * 0.5
        },
        v0: if has_param {
            layout.read_vec(&y0, layout.v(), n_psi)
        } else {
            DVector::zeros(n_psi)
        },
        w0: if has_param { y0[layout.w()] } else { 0.0 },
        g0: if has_param { y0[layout.g()] } else { 0.0 },
        traj,
    };
    if !sol.q0.iter().all(|v| v.is_finite()) || !sol.predicted_dl.is_finite() {
        return Err(Error::Sweep("non-finite sweep solution at t0".into()));
    }
    Ok(sol)
}

/// One sampled time of the state-transition-matrix cross-check.
#[derive(Debug, Clone)]
pub struct StmSample {
    pub t: f64,
    pub dev_r: f64,
    pub dev_k: f64,
    pub dev_t: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct StmReport {
    pub samples: Vec<StmSample>,
    pub max_dev: f64,
}

/// Reconstruct R, K, T from the state-transition matrix of the linearized
/// state-costate-parameter system and report the deviation from the sweep.
///
/// The variational system eliminates the control through the unshifted
/// Hessian, so agreement is expected wherever no shift was active.
pub fn stm_crosscheck(
    prob: &dyn Problem,
    sol: &SweepSolution,
    nominal: &DenseTrajectory,
    control: &ControlSpline,
    params: &SweepParams,
    sample_times: &[f64],
) -> Result<StmReport> {
    let n_x = prob.n_x();
    let has_param = prob.parameter() == ParamMode::Dynamic;
    let dim = 2 * n_x + 1;
    let (t0, tf) = {
        let (a, b) = nominal.span();
        (a.min(b), a.max(b))
    };
    let x_f = nominal.eval(tf)?;
    let term = terminal_conditions(prob, &x_f, &params.nu, params.p, &params.c_diag)?;
    let tr = control.transform().clone();

    // System matrix of the linearized extremal field at time s.
    let sys_matrix = |s: f64| -> Result<DMatrix<f64>> {
        let x_nom = nominal.eval(s)?;
        let point = sol.eval(s)?;
        let v_nom = control.eval_slack(s)?;
        let u_nom = tr.to_control(&v_nom);
        let d = eval_derivatives(prob, &x_nom, &point.lambda, &u_nom, params.p, s, &params.d_diag)?
            .into_slack(&tr.dm(&v_nom), &tr.d2m(&v_nom));
        let chol = d
            .h_uu
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Sweep("unshifted H_vv not PD for STM check".into()))?;
        let hinv_hvx = chol.solve(&d.h_ux);
        let hinv_fvt = chol.solve(&d.f_u.transpose());
        let hinv_hvp = chol.solve(&d.h_up);
        let mut m = DMatrix::zeros(dim, dim);
        let a11 = &d.f_x - &d.f_u * &hinv_hvx;
        let a12 = -(&d.f_u * &hinv_fvt);
        let a13 = &d.f_p - &d.f_u * &hinv_hvp;
        let a21 = -&d.h_xx + d.h_ux.transpose() * &hinv_hvx;
        let a22 = -d.f_x.transpose() + d.h_ux.transpose() * &hinv_fvt;
        let a23 = -&d.h_xp + d.h_ux.transpose() * &hinv_hvp;
        m.view_mut((0, 0), (n_x, n_x)).copy_from(&a11);
        m.view_mut((0, n_x), (n_x, n_x)).copy_from(&a12);
        m.view_mut((n_x, 0), (n_x, n_x)).copy_from(&a21);
        m.view_mut((n_x, n_x), (n_x, n_x)).copy_from(&a22);
        if has_param {
            for i in 0..n_x {
                m[(i, 2 * n_x)] = a13[i];
                m[(n_x + i, 2 * n_x)] = a23[i];
            }
        }
        Ok(m)
    };

    let integ = Integrator {
        rtol: params.rtol,
        atol: params.atol,
        ..Integrator::default()
    };
    let mut samples = Vec::new();
    let mut max_dev: f64 = 0.0;
    for &t in sample_times {
        if t < t0 || t > tf {
            return Err(Error::OutOfRange { t, lo: t0, hi: tf });
        }
        // Fundamental matrix Phi(tf, t), integrated column-stacked forward.
        let mut z0 = DVector::zeros(dim * dim);
        for i in 0..dim {
            z0[i * dim + i] = 1.0;
        }
        let phi_flat = if (tf - t).abs() < 1e-14 * (tf - t0).abs() {
            z0.clone()
        } else {
            integ.propagate(
                |s, z: &DVector<f64>, dz: &mut DVector<f64>| {
                    let m = match sys_matrix(s) {
                        Ok(m) => m,
                        Err(_) => {
                            dz.fill(f64::NAN);
                            return;
                        }
                    };
                    for col in 0..dim {
                        for row in 0..dim {
                            let mut acc = 0.0;
                            for kk in 0..dim {
                                acc += m[(row, kk)] * z[col * dim + kk];
                            }
                            dz[col * dim + row] = acc;
                        }
                    }
                },
                &z0,
                (t, tf),
            )?
        };
        let phi = DMatrix::from_fn(dim, dim, |i, j| phi_flat[j * dim + i]);
        let phi11 = phi.view((0, 0), (n_x, n_x)).into_owned();
        let phi12 = phi.view((0, n_x), (n_x, n_x)).into_owned();
        let phi21 = phi.view((n_x, 0), (n_x, n_x)).into_owned();
        let phi22 = phi.view((n_x, n_x), (n_x, n_x)).into_owned();
        let phi13 = DVector::from_fn(n_x, |i, _| phi[(i, 2 * n_x)]);
        let phi23 = DVector::from_fn(n_x, |i, _| phi[(n_x + i, 2 * n_x)]);

        let m_block = &phi22 - &term.r * &phi12;
        let svd = m_block.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 0.0 || smax / smin > 1e12 {
            samples.push(StmSample {
                t,
                dev_r: f64::NAN,
                dev_k: f64::NAN,
                dev_t: f64::NAN,
                skipped: true,
            });
            continue;
        }
        let lu = m_block.lu();
        let r_rec = lu
            .solve(&(&term.r * &phi11 - &phi21))
            .ok_or_else(|| Error::Sweep("STM block solve failed".into()))?;
        let k_rec = lu
            .solve(&term.k)
            .ok_or_else(|| Error::Sweep("STM block solve failed".into()))?;
        let point = sol.eval(t)?;
        let dev_r = (&point.r - &r_rec).amax() / r_rec.amax().max(1.0);
        let dev_k = if prob.n_psi() > 0 {
            (&point.k - &k_rec).amax() / k_rec.amax().max(1.0)
        } else {
            0.0
        };
        let dev_t = if has_param {
            let rhs_t = &term.r * &phi13 + &term.t - &phi23;
            let t_rec = lu
                .solve(&rhs_t)
                .ok_or_else(|| Error::Sweep("STM block solve failed".into()))?;
            (&point.t - &t_rec).amax() / t_rec.amax().max(1.0)
        } else {
            0.0
        };
        max_dev = max_dev.max(dev_r).max(dev_k).max(dev_t);
        samples.push(StmSample {
            t,
            dev_r,
            dev_k,
            dev_t,
            skipped: false,
        });
    }
    Ok(StmReport { samples, max_dev })
}
