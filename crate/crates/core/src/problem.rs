//! Optimal control problem contract: dynamics, constraints, cost, bounds,
//! and first/second derivatives with a finite-difference fallback.
//!
//! Problems implement [`Problem`]. Every derivative method has a central
//! finite-difference default, so a problem only has to supply the pieces it
//! knows analytically. [`check_derivatives`] compares whatever the problem
//! supplies against Richardson-extrapolated central differences, block by
//! block, since sweep accuracy is bounded by derivative accuracy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Box bounds of one control component. `Free` components bypass the slack
/// transform (identity map), which keeps linear-quadratic problems exactly
/// quadratic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlBound {
    Free,
    Bounded { lo: f64, hi: f64 },
}

/// How the scalar parameter enters the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// No free parameter.
    None,
    /// Parameter enters the dynamics (and possibly terminal functions);
    /// updated through the second-order sweep blocks T, V, W.
    Dynamic,
    /// Parameter appears only in terminal functions; updated by a Newton
    /// step on the extended terminal value function.
    TerminalOnly,
}

/// Shareable handle to a problem definition.
pub type ProblemDef = Arc<dyn Problem>;

/// An optimal control problem in Mayer form with box-bounded controls.
///
/// Dynamics `dx/dt = f(x, u, p; t)` on `t_span`, terminal constraints
/// `psi(x_f, p) = 0`, optional initial constraints `phi(x_0, p0) = 0`, and
/// a terminal cost `J(x_f, p)` to minimise. All derivative methods default
/// to central finite differences of the level below them.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_psi(&self) -> usize {
        0
    }
    fn n_phi(&self) -> usize {
        0
    }
    fn t_span(&self) -> (f64, f64);
    fn x0(&self) -> DVector<f64>;
    fn control_bounds(&self) -> Vec<ControlBound>;
    fn parameter(&self) -> ParamMode {
        ParamMode::None
    }
    /// Free-final-time problems report `true` and receive `t_f` through the
    /// parameter slot of the terminal callbacks; [`scale_time`] turns them
    /// into fixed-span problems on `[0, 1]` with `p = t_f`.
    fn free_final_time(&self) -> bool {
        false
    }
    fn time_scaled(&self) -> bool {
        false
    }
    fn has_initial_parameter(&self) -> bool {
        false
    }
    /// Step used by the finite-difference defaults.
    fn fd_step(&self) -> f64 {
        1e-6
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, out: &mut DVector<f64>);

    fn cost(&self, xf: &DVector<f64>, p: f64) -> f64;

    fn terminal_constraints(&self, _xf: &DVector<f64>, _p: f64, _out: &mut DVector<f64>) {}

    fn initial_constraints(&self, _x0: &DVector<f64>, _p0: f64, _out: &mut DVector<f64>) {}

    // First derivatives of the dynamics.

    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DMatrix<f64> {
        let h = self.fd_step();
        jac_central(self.n_x(), x, h, |xi, out| self.dynamics(xi, u, p, t, out))
    }

    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DMatrix<f64> {
        let h = self.fd_step();
        jac_central(self.n_x(), u, h, |ui, out| self.dynamics(x, ui, p, t, out))
    }

    fn f_p(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DVector<f64> {
        let h = self.fd_step();
        scalar_jac_central(self.n_x(), p, h, |pi, out| self.dynamics(x, u, pi, t, out))
    }

    // Second derivatives of `lambda' f`, supplied as contractions with the
    // costate so no rank-3 tensor is ever stored.

    fn hxx(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        let g = |xi: &DVector<f64>| self.f_x(xi, u, p, t).transpose() * lambda;
        let m = jac_of_vec(x, h, g);
        symmetrized(&m)
    }

    fn huu(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        let g = |ui: &DVector<f64>| self.f_u(x, ui, p, t).transpose() * lambda;
        let m = jac_of_vec(u, h, g);
        symmetrized(&m)
    }

    /// Rows index u, columns index x.
    fn hux(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        jac_of_vec(x, h, |xi: &DVector<f64>| {
            self.f_u(xi, u, p, t).transpose() * lambda
        })
    }

    fn hxp(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p, h, |pi| self.f_x(x, u, pi, t).transpose() * lambda)
    }

    fn hup(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p, h, |pi| self.f_u(x, u, pi, t).transpose() * lambda)
    }

    fn hpp(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: f64,
        t: f64,
        lambda: &DVector<f64>,
    ) -> f64 {
        let h = self.fd_step().powf(2.0 / 3.0);
        let g = |pi: f64| lambda.dot(&self.f_p(x, u, pi, t));
        (g(p + h) - g(p - h)) / (2.0 * h)
    }

    // Cost derivatives.

    fn j_x(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        let h = self.fd_step();
        grad_central(xf, h, |xi| self.cost(xi, p))
    }

    fn j_xx(&self, xf: &DVector<f64>, p: f64) -> DMatrix<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        let m = jac_of_vec(xf, h, |xi: &DVector<f64>| self.j_x(xi, p));
        symmetrized(&m)
    }

    fn j_p(&self, xf: &DVector<f64>, p: f64) -> f64 {
        let h = self.fd_step();
        (self.cost(xf, p + h) - self.cost(xf, p - h)) / (2.0 * h)
    }

    fn j_pp(&self, xf: &DVector<f64>, p: f64) -> f64 {
        let h = self.fd_step().powf(2.0 / 3.0);
        (self.j_p(xf, p + h) - self.j_p(xf, p - h)) / (2.0 * h)
    }

    fn j_xp(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p, h, |pi| self.j_x(xf, pi))
    }

    // Terminal constraint derivatives.

    fn psi_x(&self, xf: &DVector<f64>, p: f64) -> DMatrix<f64> {
        let h = self.fd_step();
        jac_central(self.n_psi(), xf, h, |xi, out| {
            self.terminal_constraints(xi, p, out)
        })
    }

    fn psi_p(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        let h = self.fd_step();
        scalar_jac_central(self.n_psi(), p, h, |pi, out| {
            self.terminal_constraints(xf, pi, out)
        })
    }

    /// Contraction `sum_k w_k d2 psi_k / dx dx`.
    fn psi_xx_w(&self, xf: &DVector<f64>, p: f64, w: &DVector<f64>) -> DMatrix<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        let m = jac_of_vec(xf, h, |xi: &DVector<f64>| self.psi_x(xi, p).transpose() * w);
        symmetrized(&m)
    }

    /// Componentwise `d2 psi_k / dp2`.
    fn psi_pp(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p, h, |pi| self.psi_p(xf, pi))
    }

    /// Contraction `sum_k w_k d2 psi_k / dx dp`.
    fn psi_xp_w(&self, xf: &DVector<f64>, p: f64, w: &DVector<f64>) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p, h, |pi| self.psi_x(xf, pi).transpose() * w)
    }

    // Initial constraint derivatives with respect to p0.

    fn phi_p(&self, x0: &DVector<f64>, p0: f64) -> DVector<f64> {
        let h = self.fd_step();
        scalar_jac_central(self.n_phi(), p0, h, |pi, out| {
            self.initial_constraints(x0, pi, out)
        })
    }

    fn phi_pp(&self, x0: &DVector<f64>, p0: f64) -> DVector<f64> {
        let h = self.fd_step().powf(2.0 / 3.0);
        vec_central(p0, h, |pi| self.phi_p(x0, pi))
    }
}

/// All partials of the Hamiltonian `H = lambda' f + u' D u` and the
/// dynamics Jacobians at one evaluation point.
///
/// Gradients are stored as columns; `h_ux` has `n_u` rows and `n_x`
/// columns. The same struct carries slack-space derivatives after
/// [`HamiltonianDerivatives::into_slack`].
#[derive(Debug, Clone)]
pub struct HamiltonianDerivatives {
    pub h_x: DVector<f64>,
    pub h_u: DVector<f64>,
    pub h_p: f64,
    pub h_xx: DMatrix<f64>,
    pub h_uu: DMatrix<f64>,
    pub h_ux: DMatrix<f64>,
    pub h_xp: DVector<f64>,
    pub h_up: DVector<f64>,
    pub h_pp: f64,
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub f_p: DVector<f64>,
}

impl HamiltonianDerivatives {
    /// Chain rule through the slack map `u = m(v)` with diagonal first and
    /// second derivatives `dm`, `d2m` evaluated at the current slack point.
    pub fn into_slack(mut self, dm: &DVector<f64>, d2m: &DVector<f64>) -> Self {
        let n_u = self.h_u.len();
        for i in 0..n_u {
            for j in 0..n_u {
                self.h_uu[(i, j)] *= dm[i] * dm[j];
            }
        }
        for i in 0..n_u {
            self.h_uu[(i, i)] += self.h_u[i] * d2m[i];
        }
        for i in 0..n_u {
            let s = dm[i];
            self.h_u[i] *= s;
            self.h_up[i] *= s;
            for j in 0..self.h_ux.ncols() {
                self.h_ux[(i, j)] *= s;
            }
            for r in 0..self.f_u.nrows() {
                self.f_u[(r, i)] *= s;
            }
        }
        self
    }
}

/// `H(x, lambda, u, p; t) = lambda' f + u' D u`.
///
/// `d` is the diagonal of the smoothing matrix (empty or zero disables it).
pub fn eval_hamiltonian(
    prob: &dyn Problem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    p: f64,
    t: f64,
    d: &DVector<f64>,
) -> Result<f64> {
    if x.len() != prob.n_x() || lambda.len() != prob.n_x() || u.len() != prob.n_u() {
        return Err(Error::Contract(format!(
            "eval_hamiltonian dimension mismatch: x {} lambda {} u {} for problem ({}, {})",
            x.len(),
            lambda.len(),
            u.len(),
            prob.n_x(),
            prob.n_u()
        )));
    }
    let mut f = DVector::zeros(prob.n_x());
    prob.dynamics(x, u, p, t, &mut f);
    let mut h = lambda.dot(&f);
    for i in 0..u.len() {
        if d.len() > i {
            h += u[i] * d[i] * u[i];
        }
    }
    Ok(h)
}

/// All Hamiltonian partials and dynamics Jacobians at a point. The smoothing
/// diagonal contributes `2 D u` to `h_u` and `2 D` to `h_uu`.
pub fn eval_derivatives(
    prob: &dyn Problem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    p: f64,
    t: f64,
    d: &DVector<f64>,
) -> Result<HamiltonianDerivatives> {
    let f_x = prob.f_x(x, u, p, t);
    let f_u = prob.f_u(x, u, p, t);
    let f_p = prob.f_p(x, u, p, t);
    let mut h_u = f_u.transpose() * lambda;
    let mut h_uu = prob.huu(x, u, p, t, lambda);
    for i in 0..u.len() {
        let di = if d.len() > i { d[i] } else { 0.0 };
        h_u[i] += 2.0 * di * u[i];
        h_uu[(i, i)] += 2.0 * di;
    }
    let derivs = HamiltonianDerivatives {
        h_x: f_x.transpose() * lambda,
        h_u,
        h_p: lambda.dot(&f_p),
        h_xx: prob.hxx(x, u, p, t, lambda),
        h_uu,
        h_ux: prob.hux(x, u, p, t, lambda),
        h_xp: prob.hxp(x, u, p, t, lambda),
        h_up: prob.hup(x, u, p, t, lambda),
        h_pp: prob.hpp(x, u, p, t, lambda),
        f_x,
        f_u,
        f_p,
    };
    for (block, ok) in [
        ("f_x", derivs.f_x.iter().all(|v| v.is_finite())),
        ("f_u", derivs.f_u.iter().all(|v| v.is_finite())),
        ("f_p", derivs.f_p.iter().all(|v| v.is_finite())),
        ("H_x", derivs.h_x.iter().all(|v| v.is_finite())),
        ("H_u", derivs.h_u.iter().all(|v| v.is_finite())),
        ("H_xx", derivs.h_xx.iter().all(|v| v.is_finite())),
        ("H_uu", derivs.h_uu.iter().all(|v| v.is_finite())),
        ("H_ux", derivs.h_ux.iter().all(|v| v.is_finite())),
        ("H_xp", derivs.h_xp.iter().all(|v| v.is_finite())),
        ("H_up", derivs.h_up.iter().all(|v| v.is_finite())),
        ("H_p", derivs.h_p.is_finite()),
        ("H_pp", derivs.h_pp.is_finite()),
    ] {
        if !ok {
            return Err(Error::Evaluation {
                block: block.to_string(),
            });
        }
    }
    Ok(derivs)
}

/// One evaluation point for the derivative harness.
#[derive(Debug, Clone)]
pub struct SamplePoint {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub p: f64,
    pub t: f64,
    pub lambda: DVector<f64>,
    /// Weights for constraint second-derivative contractions.
    pub w_psi: DVector<f64>,
}

/// Per-block result of the derivative check.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_err: f64,
    pub flagged: bool,
}

/// Report of [`check_derivatives`].
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

impl DerivativeReport {
    pub fn all_pass(&self) -> bool {
        self.blocks.iter().all(|b| !b.flagged)
    }

    pub fn flagged(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| b.flagged).collect()
    }
}

const DERIV_FLAG_TOL: f64 = 1e-5;

/// Compare every supplied derivative block against Richardson-extrapolated
/// central differences at the given points. Report-only; blocks whose
/// relative error exceeds 1e-5 are flagged.
pub fn check_derivatives(
    prob: &dyn Problem,
    sample_points: &[SamplePoint],
    h_fd: f64,
) -> Result<DerivativeReport> {
    if h_fd <= 0.0 {
        return Err(Error::Contract("h_fd must be positive".into()));
    }
    let mut acc: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| {
        if let Some(e) = acc.iter_mut().find(|(n, _)| n == name) {
            e.1 = e.1.max(err);
        } else {
            acc.push((name.to_string(), err));
        }
    };

    let n_x = prob.n_x();
    let n_psi = prob.n_psi();
    let has_p = prob.parameter() != ParamMode::None || prob.free_final_time();

    for pt in sample_points {
        let (x, u, p, t, lam, w) = (&pt.x, &pt.u, pt.p, pt.t, &pt.lambda, &pt.w_psi);

        let fx_fd = rich_mat(h_fd, |h| {
            jac_central(n_x, x, h, |xi, out| prob.dynamics(xi, u, p, t, out))
        });
        record("f_x", rel_err_mat(&prob.f_x(x, u, p, t), &fx_fd));

        let fu_fd = rich_mat(h_fd, |h| {
            jac_central(n_x, u, h, |ui, out| prob.dynamics(x, ui, p, t, out))
        });
        record("f_u", rel_err_mat(&prob.f_u(x, u, p, t), &fu_fd));

        let hxx_fd = rich_mat(h_fd, |h| {
            jac_of_vec(x, h, |xi: &DVector<f64>| prob.f_x(xi, u, p, t).transpose() * lam)
        });
        record("H_xx", rel_err_mat(&prob.hxx(x, u, p, t, lam), &symmetrized(&hxx_fd)));

        let huu_fd = rich_mat(h_fd, |h| {
            jac_of_vec(u, h, |ui: &DVector<f64>| prob.f_u(x, ui, p, t).transpose() * lam)
        });
        record("H_uu", rel_err_mat(&prob.huu(x, u, p, t, lam), &symmetrized(&huu_fd)));

        let hux_fd = rich_mat(h_fd, |h| {
            jac_of_vec(x, h, |xi: &DVector<f64>| prob.f_u(xi, u, p, t).transpose() * lam)
        });
        record("H_ux", rel_err_mat(&prob.hux(x, u, p, t, lam), &hux_fd));

        let jx_fd = rich_vec(h_fd, |h| grad_central(x, h, |xi| prob.cost(xi, p)));
        record("J_x", rel_err_vec(&prob.j_x(x, p), &jx_fd));
        let jxx_fd = rich_mat(h_fd, |h| jac_of_vec(x, h, |xi: &DVector<f64>| prob.j_x(xi, p)));
        record("J_xx", rel_err_mat(&prob.j_xx(x, p), &symmetrized(&jxx_fd)));

        if n_psi > 0 {
            let psix_fd = rich_mat(h_fd, |h| {
                jac_central(n_psi, x, h, |xi, out| prob.terminal_constraints(xi, p, out))
            });
            record("psi_x", rel_err_mat(&prob.psi_x(x, p), &psix_fd));
            let psixx_fd = rich_mat(h_fd, |h| {
                jac_of_vec(x, h, |xi: &DVector<f64>| prob.psi_x(xi, p).transpose() * w)
            });
            record(
                "psi_xx",
                rel_err_mat(&prob.psi_xx_w(x, p, w), &symmetrized(&psixx_fd)),
            );
        }

        if has_p {
            let fp_fd = rich_vec(h_fd, |h| {
                scalar_jac_central(n_x, p, h, |pi, out| prob.dynamics(x, u, pi, t, out))
            });
            record("f_p", rel_err_vec(&prob.f_p(x, u, p, t), &fp_fd));

            let hxp_fd = rich_vec(h_fd, |h| vec_central(p, h, |pi| prob.f_x(x, u, pi, t).transpose() * lam));
            record("H_xp", rel_err_vec(&prob.hxp(x, u, p, t, lam), &hxp_fd));
            let hup_fd = rich_vec(h_fd, |h| vec_central(p, h, |pi| prob.f_u(x, u, pi, t).transpose() * lam));
            record("H_up", rel_err_vec(&prob.hup(x, u, p, t, lam), &hup_fd));
            let hpp_fd = rich_scalar(h_fd, |h| {
                (lam.dot(&prob.f_p(x, u, p + h, t)) - lam.dot(&prob.f_p(x, u, p - h, t))) / (2.0 * h)
            });
            record("H_pp", rel_err_scalar(prob.hpp(x, u, p, t, lam), hpp_fd));

            let jp_fd = rich_scalar(h_fd, |h| (prob.cost(x, p + h) - prob.cost(x, p - h)) / (2.0 * h));
            record("J_p", rel_err_scalar(prob.j_p(x, p), jp_fd));
            let jpp_fd = rich_scalar(h_fd, |h| (prob.j_p(x, p + h) - prob.j_p(x, p - h)) / (2.0 * h));
            record("J_pp", rel_err_scalar(prob.j_pp(x, p), jpp_fd));
            let jxp_fd = rich_vec(h_fd, |h| vec_central(p, h, |pi| prob.j_x(x, pi)));
            record("J_xp", rel_err_vec(&prob.j_xp(x, p), &jxp_fd));

            if n_psi > 0 {
                let psip_fd = rich_vec(h_fd, |h| {
                    scalar_jac_central(n_psi, p, h, |pi, out| prob.terminal_constraints(x, pi, out))
                });
                record("psi_p", rel_err_vec(&prob.psi_p(x, p), &psip_fd));
                let psipp_fd = rich_vec(h_fd, |h| vec_central(p, h, |pi| prob.psi_p(x, pi)));
                record("psi_pp", rel_err_vec(&prob.psi_pp(x, p), &psipp_fd));
                let psixp_fd = rich_vec(h_fd, |h| {
                    vec_central(p, h, |pi| prob.psi_x(x, pi).transpose() * w)
                });
                record("psi_xp", rel_err_vec(&prob.psi_xp_w(x, p, w), &psixp_fd));
            }
        }

        if prob.n_phi() > 0 && prob.has_initial_parameter() {
            let phip_fd = rich_vec(h_fd, |h| {
                scalar_jac_central(prob.n_phi(), p, h, |pi, out| {
                    prob.initial_constraints(x, pi, out)
                })
            });
            record("phi_p", rel_err_vec(&prob.phi_p(x, p), &phip_fd));
            let phipp_fd = rich_vec(h_fd, |h| vec_central(p, h, |pi| prob.phi_p(x, pi)));
            record("phi_pp", rel_err_vec(&prob.phi_pp(x, p), &phipp_fd));
        }
    }

    Ok(DerivativeReport {
        blocks: acc
            .into_iter()
            .map(|(block, max_rel_err)| BlockReport {
                flagged: max_rel_err > DERIV_FLAG_TOL,
                block,
                max_rel_err,
            })
            .collect(),
        tol: DERIV_FLAG_TOL,
    })
}

/// Validate basic shape invariants by probing the callbacks once.
pub fn validate(prob: &dyn Problem) -> Result<()> {
    let bounds = prob.control_bounds();
    if bounds.len() != prob.n_u() {
        return Err(Error::Contract(format!(
            "{} control bounds for n_u = {}",
            bounds.len(),
            prob.n_u()
        )));
    }
    for (i, b) in bounds.iter().enumerate() {
        if let ControlBound::Bounded { lo, hi } = b {
            if !(lo < hi) {
                return Err(Error::Contract(format!(
                    "control bound {i} requires lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
    }
    if prob.x0().len() != prob.n_x() {
        return Err(Error::Contract("x0 dimension mismatch".into()));
    }
    let (t0, tf) = prob.t_span();
    if !(t0 < tf) {
        return Err(Error::Contract("t_span must satisfy t0 < tf".into()));
    }
    let u_mid = DVector::from_iterator(
        prob.n_u(),
        bounds.iter().map(|b| match b {
            ControlBound::Free => 0.0,
            ControlBound::Bounded { lo, hi } => 0.5 * (lo + hi),
        }),
    );
    let mut f = DVector::zeros(prob.n_x());
    prob.dynamics(&prob.x0(), &u_mid, 1.0, t0, &mut f);
    if f.len() != prob.n_x() || f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(
            "dynamics output is not a finite n_x vector at x0".into(),
        ));
    }
    let mut psi = DVector::zeros(prob.n_psi());
    prob.terminal_constraints(&prob.x0(), 1.0, &mut psi);
    Ok(())
}

/// Rescale a free-final-time problem onto the unit interval with `p = t_f`.
///
/// The scaled dynamics are `p * f(x, u; tau * p)`; the parameter Jacobian
/// picks up both the explicit factor and the chain-rule time term (computed
/// by differencing in `t`, which vanishes exactly for autonomous dynamics).
pub fn scale_time(prob: ProblemDef) -> Result<ProblemDef> {
    if prob.time_scaled() {
        return Err(Error::Contract("problem is already time-scaled".into()));
    }
    if !prob.free_final_time() {
        return Err(Error::Contract(
            "scale_time requires a free-final-time problem".into(),
        ));
    }
    if prob.parameter() != ParamMode::None {
        return Err(Error::Contract(
            "free-final-time scaling needs the parameter slot free".into(),
        ));
    }
    Ok(Arc::new(TimeScaled { inner: prob }))
}

struct TimeScaled {
    inner: ProblemDef,
}

impl TimeScaled {
    fn inner_t(&self, p: f64, tau: f64) -> f64 {
        let (t0, _) = self.inner.t_span();
        t0 + tau * p
    }

    /// Central difference in physical time of an inner quantity.
    fn d_dt<F: Fn(f64) -> DVector<f64>>(&self, t: f64, g: F) -> DVector<f64> {
        let h = self.inner.fd_step().max(1e-7);
        (g(t + h) - g(t - h)) / (2.0 * h)
    }
}

impl Problem for TimeScaled {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    fn n_psi(&self) -> usize {
        self.inner.n_psi()
    }
    fn n_phi(&self) -> usize {
        self.inner.n_phi()
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn x0(&self) -> DVector<f64> {
        self.inner.x0()
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        self.inner.control_bounds()
    }
    fn parameter(&self) -> ParamMode {
        ParamMode::Dynamic
    }
    fn time_scaled(&self) -> bool {
        true
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, out: &mut DVector<f64>) {
        self.inner.dynamics(x, u, 0.0, self.inner_t(p, tau), out);
        *out *= p;
    }

    fn cost(&self, xf: &DVector<f64>, p: f64) -> f64 {
        self.inner.cost(xf, p)
    }

    fn terminal_constraints(&self, xf: &DVector<f64>, p: f64, out: &mut DVector<f64>) {
        self.inner.terminal_constraints(xf, p, out);
    }

    fn initial_constraints(&self, x0: &DVector<f64>, p0: f64, out: &mut DVector<f64>) {
        self.inner.initial_constraints(x0, p0, out);
    }

    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64) -> DMatrix<f64> {
        self.inner.f_x(x, u, 0.0, self.inner_t(p, tau)) * p
    }

    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64) -> DMatrix<f64> {
        self.inner.f_u(x, u, 0.0, self.inner_t(p, tau)) * p
    }

    fn f_p(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64) -> DVector<f64> {
        let t = self.inner_t(p, tau);
        let mut f = DVector::zeros(self.n_x());
        self.inner.dynamics(x, u, 0.0, t, &mut f);
        let ft = self.d_dt(t, |ti| {
            let mut v = DVector::zeros(self.n_x());
            self.inner.dynamics(x, u, 0.0, ti, &mut v);
            v
        });
        f + ft * (p * tau)
    }

    fn hxx(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hxx(x, u, 0.0, self.inner_t(p, tau), lam) * p
    }

    fn huu(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> DMatrix<f64> {
        self.inner.huu(x, u, 0.0, self.inner_t(p, tau), lam) * p
    }

    fn hux(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hux(x, u, 0.0, self.inner_t(p, tau), lam) * p
    }

    fn hxp(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> DVector<f64> {
        let t = self.inner_t(p, tau);
        let base = self.inner.f_x(x, u, 0.0, t).transpose() * lam;
        let tderiv = self.d_dt(t, |ti| self.inner.f_x(x, u, 0.0, ti).transpose() * lam);
        base + tderiv * (p * tau)
    }

    fn hup(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> DVector<f64> {
        let t = self.inner_t(p, tau);
        let base = self.inner.f_u(x, u, 0.0, t).transpose() * lam;
        let tderiv = self.d_dt(t, |ti| self.inner.f_u(x, u, 0.0, ti).transpose() * lam);
        base + tderiv * (p * tau)
    }

    fn hpp(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, tau: f64, lam: &DVector<f64>) -> f64 {
        // d f_p / dp = 2 tau f_t + p tau^2 f_tt.
        let t = self.inner_t(p, tau);
        let h = self.inner.fd_step().max(1e-5);
        let f_at = |ti: f64| {
            let mut v = DVector::zeros(self.n_x());
            self.inner.dynamics(x, u, 0.0, ti, &mut v);
            v
        };
        let ft = (f_at(t + h) - f_at(t - h)) / (2.0 * h);
        let ftt = (f_at(t + h) - f_at(t) * 2.0 + f_at(t - h)) / (h * h);
        lam.dot(&(ft * (2.0 * tau) + ftt * (p * tau * tau)))
    }

    fn j_x(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        self.inner.j_x(xf, p)
    }
    fn j_xx(&self, xf: &DVector<f64>, p: f64) -> DMatrix<f64> {
        self.inner.j_xx(xf, p)
    }
    fn j_p(&self, xf: &DVector<f64>, p: f64) -> f64 {
        self.inner.j_p(xf, p)
    }
    fn j_pp(&self, xf: &DVector<f64>, p: f64) -> f64 {
        self.inner.j_pp(xf, p)
    }
    fn j_xp(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        self.inner.j_xp(xf, p)
    }
    fn psi_x(&self, xf: &DVector<f64>, p: f64) -> DMatrix<f64> {
        self.inner.psi_x(xf, p)
    }
    fn psi_p(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        self.inner.psi_p(xf, p)
    }
    fn psi_xx_w(&self, xf: &DVector<f64>, p: f64, w: &DVector<f64>) -> DMatrix<f64> {
        self.inner.psi_xx_w(xf, p, w)
    }
    fn psi_pp(&self, xf: &DVector<f64>, p: f64) -> DVector<f64> {
        self.inner.psi_pp(xf, p)
    }
    fn psi_xp_w(&self, xf: &DVector<f64>, p: f64, w: &DVector<f64>) -> DVector<f64> {
        self.inner.psi_xp_w(xf, p, w)
    }
}

// Finite-difference helpers.

fn jac_central<F>(n_out: usize, x: &DVector<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>),
{
    let mut jac = DMatrix::zeros(n_out, x.len());
    let mut xp = x.clone();
    let mut fp = DVector::zeros(n_out);
    let mut fm = DVector::zeros(n_out);
    for j in 0..x.len() {
        let hj = h * (1.0 + x[j].abs());
        xp[j] = x[j] + hj;
        f(&xp, &mut fp);
        xp[j] = x[j] - hj;
        f(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..n_out {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * hj);
        }
    }
    jac
}

fn scalar_jac_central<F>(n_out: usize, p: f64, h: f64, f: F) -> DVector<f64>
where
    F: Fn(f64, &mut DVector<f64>),
{
    let hp = h * (1.0 + p.abs());
    let mut fp = DVector::zeros(n_out);
    let mut fm = DVector::zeros(n_out);
    f(p + hp, &mut fp);
    f(p - hp, &mut fm);
    (fp - fm) / (2.0 * hp)
}

fn grad_central<F>(x: &DVector<f64>, h: f64, f: F) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let hj = h * (1.0 + x[j].abs());
        xp[j] = x[j] + hj;
        let fp = f(&xp);
        xp[j] = x[j] - hj;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * hj);
    }
    g
}

fn jac_of_vec<F>(x: &DVector<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let probe = f(x);
    let mut jac = DMatrix::zeros(probe.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let hj = h * (1.0 + x[j].abs());
        xp[j] = x[j] + hj;
        let fp = f(&xp);
        xp[j] = x[j] - hj;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..probe.len() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * hj);
        }
    }
    jac
}

fn vec_central<F>(p: f64, h: f64, f: F) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    let hp = h * (1.0 + p.abs());
    (f(p + hp) - f(p - hp)) / (2.0 * hp)
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

// Richardson extrapolation: (4 D(h/2) - D(h)) / 3.

fn rich_mat<F: Fn(f64) -> DMatrix<f64>>(h: f64, d: F) -> DMatrix<f64> {
    (d(h * 0.5) * 4.0 - d(h)) / 3.0
}

fn rich_vec<F: Fn(f64) -> DVector<f64>>(h: f64, d: F) -> DVector<f64> {
    (d(h * 0.5) * 4.0 - d(h)) / 3.0
}

fn rich_scalar<F: Fn(f64) -> f64>(h: f64, d: F) -> f64 {
    (4.0 * d(h * 0.5) - d(h)) / 3.0
}

fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{double_integrator_raw, BilinearTest};
    use approx::assert_relative_eq;

    #[test]
    fn hamiltonian_direct_product() {
        // 1-D f = u, lambda = 2, u = 3, D = 0.
        let prob = BilinearTest::pure_control();
        let h = eval_hamiltonian(
            &prob,
            &DVector::from_element(1, 0.0),
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, 3.0),
            0.0,
            0.0,
            &DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(h, 6.0);
    }

    #[test]
    fn hamiltonian_double_integrator() {
        let prob = double_integrator_raw();
        let h = eval_hamiltonian(
            &prob,
            &DVector::from_vec(vec![0.0, 0.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_element(1, 0.5),
            1.0,
            0.0,
            &DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(h, 0.5);
    }

    #[test]
    fn hamiltonian_smoothing_term() {
        let prob = BilinearTest::pure_control();
        let h = eval_hamiltonian(
            &prob,
            &DVector::from_element(1, 0.0),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 2.0),
            0.0,
            0.0,
            &DVector::from_element(1, 0.1),
        )
        .unwrap();
        assert_relative_eq!(h, 2.4, epsilon = 1e-15);
    }

    #[test]
    fn hamiltonian_dimension_mismatch() {
        let prob = BilinearTest::pure_control();
        let res = eval_hamiltonian(
            &prob,
            &DVector::zeros(2),
            &DVector::zeros(1),
            &DVector::zeros(1),
            0.0,
            0.0,
            &DVector::zeros(1),
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn derivatives_double_integrator() {
        let prob = double_integrator_raw();
        let d = eval_derivatives(
            &prob,
            &DVector::from_vec(vec![0.3, -0.2]),
            &DVector::from_vec(vec![1.0, 2.0]),
            &DVector::from_element(1, 0.5),
            1.0,
            0.0,
            &DVector::from_element(1, 0.05),
        )
        .unwrap();
        assert_eq!(d.f_x[(0, 1)], 1.0);
        assert_eq!(d.f_x[(0, 0)], 0.0);
        assert_eq!(d.f_u[(1, 0)], 1.0);
        assert_relative_eq!(d.h_uu[(0, 0)], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_bilinear() {
        // f = x * u, x = 2, lambda = 3: H_u = 6, H_ux = 3, H_uu = 2 D.
        let prob = BilinearTest::state_control();
        let d = eval_derivatives(
            &prob,
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, 3.0),
            &DVector::from_element(1, 0.7),
            0.0,
            0.0,
            &DVector::from_element(1, 0.25),
        )
        .unwrap();
        assert_relative_eq!(d.h_u[0], 6.0 + 2.0 * 0.25 * 0.7, max_relative = 1e-9);
        assert_relative_eq!(d.h_ux[(0, 0)], 3.0, epsilon = 1e-6);
        assert_relative_eq!(d.h_uu[(0, 0)], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn check_derivatives_flags_injected_fault() {
        struct WrongFu(crate::problems::DoubleIntegrator);
        impl Problem for WrongFu {
            fn name(&self) -> &str {
                "wrong_fu"
            }
            fn n_x(&self) -> usize {
                self.0.n_x()
            }
            fn n_u(&self) -> usize {
                self.0.n_u()
            }
            fn n_psi(&self) -> usize {
                self.0.n_psi()
            }
            fn t_span(&self) -> (f64, f64) {
                self.0.t_span()
            }
            fn x0(&self) -> DVector<f64> {
                self.0.x0()
            }
            fn control_bounds(&self) -> Vec<ControlBound> {
                self.0.control_bounds()
            }
            fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, out: &mut DVector<f64>) {
                self.0.dynamics(x, u, p, t, out)
            }
            fn cost(&self, xf: &DVector<f64>, p: f64) -> f64 {
                self.0.cost(xf, p)
            }
            fn terminal_constraints(&self, xf: &DVector<f64>, p: f64, out: &mut DVector<f64>) {
                self.0.terminal_constraints(xf, p, out)
            }
            fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DMatrix<f64> {
                -self.0.f_u(x, u, p, t)
            }
        }
        let prob = WrongFu(crate::problems::DoubleIntegrator);
        let pts = crate::problems::sample_points(&prob, 5, 42);
        let report = check_derivatives(&prob, &pts, 1e-6).unwrap();
        let fu = report.blocks.iter().find(|b| b.block == "f_u").unwrap();
        assert!(fu.flagged);
    }

    #[test]
    fn check_derivatives_double_integrator_clean() {
        let prob = double_integrator_raw();
        let pts = crate::problems::sample_points(&prob, 10, 7);
        let report = check_derivatives(&prob, &pts, 1e-6).unwrap();
        for b in &report.blocks {
            assert!(
                b.max_rel_err <= 1e-8,
                "block {} err {}",
                b.block,
                b.max_rel_err
            );
        }
    }

    #[test]
    fn scale_time_constant_jacobian() {
        // f = u with t_f = 2 becomes f~ = 2u on [0, 1].
        let prob: ProblemDef = Arc::new(BilinearTest::free_time_pure_control());
        let scaled = scale_time(prob).unwrap();
        let mut out = DVector::zeros(1);
        scaled.dynamics(
            &DVector::zeros(1),
            &DVector::from_element(1, 0.7),
            2.0,
            0.3,
            &mut out,
        );
        assert_relative_eq!(out[0], 1.4, epsilon = 1e-14);
        assert_eq!(scaled.t_span(), (0.0, 1.0));
        assert_eq!(scaled.parameter(), ParamMode::Dynamic);
        // f_p of an autonomous problem is f itself.
        let fp = scaled.f_p(&DVector::zeros(1), &DVector::from_element(1, 0.7), 2.0, 0.3);
        assert_relative_eq!(fp[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn scale_time_rejects_double_scaling() {
        let prob: ProblemDef = Arc::new(BilinearTest::free_time_pure_control());
        let scaled = scale_time(prob).unwrap();
        assert!(matches!(scale_time(scaled), Err(Error::Contract(_))));
    }

    #[test]
    fn scale_time_preserves_trajectories() {
        // Unscaled double integrator on [0, 3.5] against the scaled form on
        // [0, 1] with p = 3.5, compared at matched times.
        use crate::dense::Integrator;
        let raw = double_integrator_raw();
        let tf = 3.5;
        let u = DVector::from_element(1, -0.4);
        let ig = Integrator::new(1e-10, 1e-12);
        let x0 = raw.x0();
        let direct = ig
            .integrate(
                |t, y: &DVector<f64>, dy: &mut DVector<f64>| raw.dynamics(y, &u, 0.0, t, dy),
                &x0,
                (0.0, tf),
                true,
            )
            .unwrap();
        let scaled = scale_time(Arc::new(crate::problems::DoubleIntegrator) as ProblemDef).unwrap();
        let scaled_traj = ig
            .integrate(
                |tau, y: &DVector<f64>, dy: &mut DVector<f64>| scaled.dynamics(y, &u, tf, tau, dy),
                &x0,
                (0.0, 1.0),
                true,
            )
            .unwrap();
        for k in 0..=10 {
            let tau = k as f64 / 10.0;
            let a = direct.eval(tau * tf).unwrap();
            let b = scaled_traj.eval(tau).unwrap();
            assert_relative_eq!(a[0], b[0], epsilon = 1e-8);
            assert_relative_eq!(a[1], b[1], epsilon = 1e-8);
        }
    }
}
