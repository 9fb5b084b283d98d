//! Bundled benchmark problems and test fixtures.
//!
//! Both benchmarks have control-affine dynamics on a closed control box, so
//! their optimal controls are bang-bang. The orbital transfer is stated in
//! nondimensional units (length r0, time sqrt(r0^3/mu), mass m0).

use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::problem::{scale_time, ControlBound, ParamMode, Problem, ProblemDef, SamplePoint};

/// Minimum-time double integrator: position and velocity driven to the
/// origin from (1, 1) with |u| <= 1, final time free.
pub struct DoubleIntegrator;

impl Problem for DoubleIntegrator {
    fn name(&self) -> &str {
        "double_integrator"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_psi(&self) -> usize {
        2
    }
    fn t_span(&self) -> (f64, f64) {
        // Horizon is the customary initial guess; the solved problem runs
        // time-scaled on [0, 1] with t_f as parameter.
        (0.0, 3.5)
    }
    fn x0(&self) -> DVector<f64> {
        DVector::from_vec(vec![1.0, 1.0])
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![ControlBound::Bounded { lo: -1.0, hi: 1.0 }]
    }
    fn free_final_time(&self) -> bool {
        true
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
        out[0] = x[1];
        out[1] = u[0];
    }

    // The parameter slot carries t_f; total time is the cost.
    fn cost(&self, _xf: &DVector<f64>, p: f64) -> f64 {
        p
    }

    fn terminal_constraints(&self, xf: &DVector<f64>, _p: f64, out: &mut DVector<f64>) {
        out[0] = xf[0];
        out[1] = xf[1];
    }

    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
    }
    fn f_p(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn hxx(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn huu(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn hux(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 2)
    }
    fn hxp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn hup(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn hpp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> f64 {
        0.0
    }

    fn j_x(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn j_xx(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn j_p(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        1.0
    }
    fn j_pp(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        0.0
    }
    fn j_xp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(2)
    }

    fn psi_x(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn psi_p(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn psi_xx_w(&self, _xf: &DVector<f64>, _p: f64, _w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn psi_pp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn psi_xp_w(&self, _xf: &DVector<f64>, _p: f64, _w: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
}

/// Raw (unscaled) double integrator, mostly for unit tests.
pub fn double_integrator_raw() -> DoubleIntegrator {
    DoubleIntegrator
}

/// Solver-ready double integrator: time-scaled onto [0, 1] with `p = t_f`.
pub fn double_integrator() -> ProblemDef {
    scale_time(Arc::new(DoubleIntegrator)).expect("double integrator scales")
}

/// Analytic minimum time for the bundled double integrator, `1 + sqrt(6)`.
///
/// From (1, 1): full brake until the switching curve `pos = vel^2 / 2`
/// (vel < 0), then full thrust to the origin. The switch sits at
/// `t = 1 + sqrt(6)/2`.
pub fn double_integrator_tf_star() -> f64 {
    1.0 + 6.0_f64.sqrt()
}

pub fn double_integrator_switch_star() -> f64 {
    1.0 + 6.0_f64.sqrt() / 2.0
}

// Orbital transfer constants (SI).
const MU_EARTH: f64 = 398_600.4418e9;
const R0_M: f64 = 2.0e7;
const RF_M: f64 = 4.2e7;
const M0_KG: f64 = 1000.0;
const F_MAX_N: f64 = 5.0;
const VE_MS: f64 = 19_612.0;
const TF_S: f64 = 4.0 * 86_400.0;

/// Nondimensional scales of the orbital transfer.
#[derive(Debug, Clone, Copy)]
pub struct OrbitScales {
    pub time_unit_s: f64,
    pub velocity_unit_ms: f64,
    pub mass_unit_kg: f64,
    pub thrust_unit_n: f64,
}

pub fn orbit_scales() -> OrbitScales {
    let tu = (R0_M * R0_M * R0_M / MU_EARTH).sqrt();
    let vu = R0_M / tu;
    let au = vu / tu;
    OrbitScales {
        time_unit_s: tu,
        velocity_unit_ms: vu,
        mass_unit_kg: M0_KG,
        thrust_unit_n: M0_KG * au,
    }
}

/// Planar low-thrust transfer between circular orbits in nondimensional
/// cylindrical coordinates (r, v_r, v_theta, m). Controls: steering angle
/// and thrust magnitude. Final time fixed at 4 days; final mass maximised.
pub struct OrbitalTransfer {
    pub tf: f64,
    pub f_max: f64,
    pub ve: f64,
    pub rf: f64,
}

impl Default for OrbitalTransfer {
    fn default() -> Self {
        let sc = orbit_scales();
        Self {
            tf: TF_S / sc.time_unit_s,
            f_max: F_MAX_N / sc.thrust_unit_n,
            ve: VE_MS / sc.velocity_unit_ms,
            rf: RF_M / R0_M,
        }
    }
}

impl Problem for OrbitalTransfer {
    fn name(&self) -> &str {
        "orbital_transfer"
    }
    fn n_x(&self) -> usize {
        4
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_psi(&self) -> usize {
        3
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, self.tf)
    }
    fn x0(&self) -> DVector<f64> {
        // Circular orbit at r = 1: v_r = 0, v_theta = 1.
        DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0])
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![
            ControlBound::Bounded {
                lo: -std::f64::consts::PI,
                hi: std::f64::consts::PI,
            },
            ControlBound::Bounded {
                lo: 0.0,
                hi: self.f_max,
            },
        ]
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
        let (r, vr, vt, m) = (x[0], x[1], x[2], x[3]);
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        out[0] = vr;
        out[1] = vt * vt / r - 1.0 / (r * r) + f / m * s;
        out[2] = -vr * vt / r + f / m * c;
        out[3] = -f / self.ve;
    }

    fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
        // Maximise final mass.
        -xf[3]
    }

    fn terminal_constraints(&self, xf: &DVector<f64>, _p: f64, out: &mut DVector<f64>) {
        out[0] = xf[1];
        out[1] = xf[2] - xf[0].powf(-0.5);
        out[2] = xf[0] - self.rf;
    }

    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        let (r, vr, vt, m) = (x[0], x[1], x[2], x[3]);
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        let mut j = DMatrix::zeros(4, 4);
        j[(0, 1)] = 1.0;
        j[(1, 0)] = -vt * vt / (r * r) + 2.0 / (r * r * r);
        j[(1, 2)] = 2.0 * vt / r;
        j[(1, 3)] = -f / (m * m) * s;
        j[(2, 0)] = vr * vt / (r * r);
        j[(2, 1)] = -vt / r;
        j[(2, 2)] = -vr / r;
        j[(2, 3)] = -f / (m * m) * c;
        j
    }

    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        let m = x[3];
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        let mut j = DMatrix::zeros(4, 2);
        j[(1, 0)] = f / m * c;
        j[(1, 1)] = s / m;
        j[(2, 0)] = -f / m * s;
        j[(2, 1)] = c / m;
        j[(3, 1)] = -1.0 / self.ve;
        j
    }

    fn f_p(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DVector<f64> {
        DVector::zeros(4)
    }

    fn hxx(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        let (r, vr, vt, m) = (x[0], x[1], x[2], x[3]);
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        let mut h = DMatrix::zeros(4, 4);
        h[(0, 0)] = l[1] * (2.0 * vt * vt / r.powi(3) - 6.0 / r.powi(4))
            - l[2] * 2.0 * vr * vt / r.powi(3);
        h[(0, 1)] = l[2] * vt / (r * r);
        h[(0, 2)] = -l[1] * 2.0 * vt / (r * r) + l[2] * vr / (r * r);
        h[(1, 2)] = -l[2] / r;
        h[(2, 2)] = l[1] * 2.0 / r;
        h[(3, 3)] = (l[1] * s + l[2] * c) * 2.0 * f / m.powi(3);
        h[(1, 0)] = h[(0, 1)];
        h[(2, 0)] = h[(0, 2)];
        h[(2, 1)] = h[(1, 2)];
        h
    }

    fn huu(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        let m = x[3];
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = -(l[1] * s + l[2] * c) * f / m;
        h[(0, 1)] = (l[1] * c - l[2] * s) / m;
        h[(1, 0)] = h[(0, 1)];
        h
    }

    fn hux(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        let m = x[3];
        let (s, c) = u[0].sin_cos();
        let f = u[1];
        let mut h = DMatrix::zeros(2, 4);
        h[(0, 3)] = -(l[1] * c - l[2] * s) * f / (m * m);
        h[(1, 3)] = -(l[1] * s + l[2] * c) / (m * m);
        h
    }

    fn hxp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }
    fn hup(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn hpp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> f64 {
        0.0
    }

    fn j_x(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::from_vec(vec![0.0, 0.0, 0.0, -1.0])
    }
    fn j_xx(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        DMatrix::zeros(4, 4)
    }
    fn j_p(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        0.0
    }
    fn j_pp(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        0.0
    }
    fn j_xp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(4)
    }

    fn psi_x(&self, xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        let r = xf[0];
        DMatrix::from_row_slice(
            3,
            4,
            &[
                0.0,
                1.0,
                0.0,
                0.0,
                0.5 * r.powf(-1.5),
                0.0,
                1.0,
                0.0,
                1.0,
                0.0,
                0.0,
                0.0,
            ],
        )
    }
    fn psi_p(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(3)
    }
    fn psi_xx_w(&self, xf: &DVector<f64>, _p: f64, w: &DVector<f64>) -> DMatrix<f64> {
        let r = xf[0];
        let mut h = DMatrix::zeros(4, 4);
        h[(0, 0)] = w[1] * (-0.75) * r.powf(-2.5);
        h
    }
    fn psi_pp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(3)
    }
    fn psi_xp_w(&self, _xf: &DVector<f64>, _p: f64, _w: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }
}

pub fn orbital_transfer() -> ProblemDef {
    Arc::new(OrbitalTransfer::default())
}

/// Scalar linear-quadratic problem: `x' = u`, `J = qf/2 x_f^2`, free
/// control, constant smoothing `d` acting as the control weight.
pub struct LqrScalar {
    pub qf: f64,
    pub x_init: f64,
    pub horizon: f64,
}

impl Default for LqrScalar {
    fn default() -> Self {
        Self {
            qf: 1.0,
            x_init: 1.0,
            horizon: 1.0,
        }
    }
}

impl Problem for LqrScalar {
    fn name(&self) -> &str {
        "lqr_scalar"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, self.horizon)
    }
    fn x0(&self) -> DVector<f64> {
        DVector::from_element(1, self.x_init)
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![ControlBound::Free]
    }
    fn dynamics(&self, _x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
        out[0] = u[0];
    }
    fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
        0.5 * self.qf * xf[0] * xf[0]
    }
    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn f_p(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn hxx(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn huu(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn hux(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn j_x(&self, xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::from_element(1, self.qf * xf[0])
    }
    fn j_xx(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.qf)
    }
}

/// Two-state linear-quadratic problem on double-integrator dynamics with a
/// quadratic terminal cost and free control.
pub struct LqrTwoState {
    pub qf: DMatrix<f64>,
    pub x_init: DVector<f64>,
    pub horizon: f64,
}

impl Default for LqrTwoState {
    fn default() -> Self {
        Self {
            qf: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            x_init: DVector::from_vec(vec![1.0, -0.5]),
            horizon: 2.0,
        }
    }
}

impl Problem for LqrTwoState {
    fn name(&self) -> &str {
        "lqr_two_state"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, self.horizon)
    }
    fn x0(&self) -> DVector<f64> {
        self.x_init.clone()
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![ControlBound::Free]
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
        out[0] = x[1];
        out[1] = u[0];
    }
    fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
        0.5 * (xf.transpose() * &self.qf * xf)[(0, 0)]
    }
    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
    }
    fn f_p(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn hxx(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn huu(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn hux(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 2)
    }
    fn j_x(&self, xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        &self.qf * xf
    }
    fn j_xx(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        self.qf.clone()
    }
}

/// LTI system with a terminal constraint and a parameter entering the
/// dynamics linearly; exercises all sweep blocks (R, K, Q, T, V, W) on a
/// problem where the second-order expansion is exact.
pub struct LtiParam {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub qf: DMatrix<f64>,
    pub target: DVector<f64>,
    pub x_init: DVector<f64>,
    pub horizon: f64,
}

impl LtiParam {
    pub fn two_state() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.4, -0.3]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            c: DVector::from_vec(vec![0.2, -0.1]),
            qf: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            target: DVector::from_vec(vec![0.3, -0.2]),
            x_init: DVector::from_vec(vec![1.0, 0.5]),
            horizon: 1.5,
        }
    }

    pub fn scalar() -> Self {
        Self {
            a: DMatrix::from_element(1, 1, -0.3),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DVector::from_element(1, 0.5),
            qf: DMatrix::from_element(1, 1, 1.0),
            target: DVector::from_element(1, 1.0),
            x_init: DVector::from_element(1, 0.2),
            horizon: 1.0,
        }
    }
}

impl Problem for LtiParam {
    fn name(&self) -> &str {
        "lti_param"
    }
    fn n_x(&self) -> usize {
        self.a.nrows()
    }
    fn n_u(&self) -> usize {
        self.b.ncols()
    }
    fn n_psi(&self) -> usize {
        self.a.nrows()
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, self.horizon)
    }
    fn x0(&self) -> DVector<f64> {
        self.x_init.clone()
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![ControlBound::Free; self.b.ncols()]
    }
    fn parameter(&self) -> ParamMode {
        ParamMode::Dynamic
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, _t: f64, out: &mut DVector<f64>) {
        out.copy_from(&(&self.a * x + &self.b * u + &self.c * p));
    }
    fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
        0.5 * (xf.transpose() * &self.qf * xf)[(0, 0)]
    }
    fn terminal_constraints(&self, xf: &DVector<f64>, _p: f64, out: &mut DVector<f64>) {
        out.copy_from(&(xf - &self.target));
    }
    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        self.a.clone()
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DMatrix<f64> {
        self.b.clone()
    }
    fn f_p(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64) -> DVector<f64> {
        self.c.clone()
    }
    fn hxx(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n_x(), self.n_x())
    }
    fn huu(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n_u(), self.n_u())
    }
    fn hux(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n_u(), self.n_x())
    }
    fn hxp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n_x())
    }
    fn hup(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n_u())
    }
    fn hpp(&self, _x: &DVector<f64>, _u: &DVector<f64>, _p: f64, _t: f64, _l: &DVector<f64>) -> f64 {
        0.0
    }
    fn j_x(&self, xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        &self.qf * xf
    }
    fn j_xx(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        self.qf.clone()
    }
    fn j_p(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        0.0
    }
    fn j_pp(&self, _xf: &DVector<f64>, _p: f64) -> f64 {
        0.0
    }
    fn j_xp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(self.n_x())
    }
    fn psi_x(&self, _xf: &DVector<f64>, _p: f64) -> DMatrix<f64> {
        DMatrix::identity(self.n_x(), self.n_x())
    }
    fn psi_p(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(self.n_x())
    }
    fn psi_xx_w(&self, _xf: &DVector<f64>, _p: f64, _w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n_x(), self.n_x())
    }
    fn psi_pp(&self, _xf: &DVector<f64>, _p: f64) -> DVector<f64> {
        DVector::zeros(self.n_x())
    }
    fn psi_xp_w(&self, _xf: &DVector<f64>, _p: f64, _w: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n_x())
    }
}

/// Tiny fixtures for unit tests.
pub struct BilinearTest {
    kind: BilinearKind,
    free_time: bool,
}

enum BilinearKind {
    PureControl,
    StateControl,
}

impl BilinearTest {
    /// `x' = u`.
    pub fn pure_control() -> Self {
        Self {
            kind: BilinearKind::PureControl,
            free_time: false,
        }
    }
    /// `x' = x u`.
    pub fn state_control() -> Self {
        Self {
            kind: BilinearKind::StateControl,
            free_time: false,
        }
    }
    /// `x' = u` with a free final time of 2.
    pub fn free_time_pure_control() -> Self {
        Self {
            kind: BilinearKind::PureControl,
            free_time: true,
        }
    }
}

impl Problem for BilinearTest {
    fn name(&self) -> &str {
        "bilinear_test"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn t_span(&self) -> (f64, f64) {
        (0.0, 2.0)
    }
    fn x0(&self) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        vec![ControlBound::Free]
    }
    fn free_final_time(&self) -> bool {
        self.free_time
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: f64, _t: f64, out: &mut DVector<f64>) {
        out[0] = match self.kind {
            BilinearKind::PureControl => u[0],
            BilinearKind::StateControl => x[0] * u[0],
        };
    }
    fn cost(&self, xf: &DVector<f64>, _p: f64) -> f64 {
        0.5 * xf[0] * xf[0]
    }
}

/// Wrapper that runs a hook on every dynamics evaluation; used to observe
/// the controls the solver actually feeds into the dynamics.
pub struct Instrumented {
    inner: ProblemDef,
    violations: AtomicUsize,
}

impl Instrumented {
    pub fn new(inner: ProblemDef) -> Arc<Self> {
        Arc::new(Self {
            inner,
            violations: AtomicUsize::new(0),
        })
    }

    /// Count of dynamics evaluations whose control broke its box, compared
    /// exactly (no tolerance).
    pub fn bound_violations(&self) -> usize {
        self.violations.load(Ordering::Relaxed)
    }
}

impl Problem for Instrumented {
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
        self.inner.t_span()
    }
    fn x0(&self) -> DVector<f64> {
        self.inner.x0()
    }
    fn control_bounds(&self) -> Vec<ControlBound> {
        self.inner.control_bounds()
    }
    fn parameter(&self) -> ParamMode {
        self.inner.parameter()
    }
    fn time_scaled(&self) -> bool {
        self.inner.time_scaled()
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, out: &mut DVector<f64>) {
        for (i, b) in self.inner.control_bounds().iter().enumerate() {
            if let ControlBound::Bounded { lo, hi } = b {
                if u[i] < *lo || u[i] > *hi {
                    self.violations.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        self.inner.dynamics(x, u, p, t, out);
    }
    fn cost(&self, xf: &DVector<f64>, p: f64) -> f64 {
        self.inner.cost(xf, p)
    }
    fn terminal_constraints(&self, xf: &DVector<f64>, p: f64, out: &mut DVector<f64>) {
        self.inner.terminal_constraints(xf, p, out)
    }
    fn initial_constraints(&self, x0: &DVector<f64>, p0: f64, out: &mut DVector<f64>) {
        self.inner.initial_constraints(x0, p0, out)
    }
    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DMatrix<f64> {
        self.inner.f_x(x, u, p, t)
    }
    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DMatrix<f64> {
        self.inner.f_u(x, u, p, t)
    }
    fn f_p(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64) -> DVector<f64> {
        self.inner.f_p(x, u, p, t)
    }
    fn hxx(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hxx(x, u, p, t, l)
    }
    fn huu(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        self.inner.huu(x, u, p, t, l)
    }
    fn hux(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hux(x, u, p, t, l)
    }
    fn hxp(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> DVector<f64> {
        self.inner.hxp(x, u, p, t, l)
    }
    fn hup(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> DVector<f64> {
        self.inner.hup(x, u, p, t, l)
    }
    fn hpp(&self, x: &DVector<f64>, u: &DVector<f64>, p: f64, t: f64, l: &DVector<f64>) -> f64 {
        self.inner.hpp(x, u, p, t, l)
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

/// Deterministic evaluation points for the derivative harness: interior
/// states around x0, in-bounds controls, and random costate/weights.
pub fn sample_points(prob: &dyn Problem, n: usize, seed: u64) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t0, tf) = prob.t_span();
    let x0 = prob.x0();
    let bounds = prob.control_bounds();
    (0..n)
        .map(|_| {
            let x = DVector::from_iterator(
                prob.n_x(),
                x0.iter().map(|&xi| xi + rng.gen_range(-0.4..0.4)),
            );
            let u = DVector::from_iterator(
                prob.n_u(),
                bounds.iter().map(|b| match b {
                    ControlBound::Free => rng.gen_range(-2.0..2.0),
                    ControlBound::Bounded { lo, hi } => {
                        lo + (hi - lo) * rng.gen_range(0.05..0.95)
                    }
                }),
            );
            let lambda =
                DVector::from_iterator(prob.n_x(), (0..prob.n_x()).map(|_| rng.gen_range(-2.0..2.0)));
            let w_psi = DVector::from_iterator(
                prob.n_psi(),
                (0..prob.n_psi()).map(|_| rng.gen_range(-1.0..1.0)),
            );
            SamplePoint {
                x,
                u,
                p: rng.gen_range(0.5..1.5),
                t: rng.gen_range(t0..tf),
                lambda,
                w_psi,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_derivatives, validate};
    use approx::assert_relative_eq;

    #[test]
    fn double_integrator_direct_substitution() {
        let prob = DoubleIntegrator;
        let mut f = DVector::zeros(2);
        prob.dynamics(
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_element(1, -1.0),
            0.0,
            0.0,
            &mut f,
        );
        assert_eq!(f, DVector::from_vec(vec![1.0, -1.0]));
        let mut psi = DVector::zeros(2);
        prob.terminal_constraints(&DVector::zeros(2), 0.0, &mut psi);
        assert_eq!(psi, DVector::zeros(2));
    }

    #[test]
    fn orbital_initial_state_is_circular() {
        let prob = OrbitalTransfer::default();
        let x0 = prob.x0();
        assert_eq!(x0[1], 0.0);
        // v_theta = sqrt(mu / r0) = 1 in nondimensional units.
        assert_eq!(x0[2], 1.0);
        let mut psi = DVector::zeros(3);
        // Exact target circular orbit zeroes the constraints.
        let rf = prob.rf;
        let xt = DVector::from_vec(vec![rf, 0.0, rf.powf(-0.5), 0.9]);
        prob.terminal_constraints(&xt, 0.0, &mut psi);
        assert!(psi.norm() < 1e-15);
    }

    #[test]
    fn orbital_scales_sane() {
        let sc = orbit_scales();
        assert_relative_eq!(sc.time_unit_s, 4480.0, max_relative = 1e-3);
        let prob = OrbitalTransfer::default();
        assert_relative_eq!(prob.tf, 77.14, max_relative = 1e-3);
        assert_relative_eq!(prob.ve, 4.393, max_relative = 1e-3);
        assert_relative_eq!(prob.f_max, 5.018e-3, max_relative = 1e-3);
    }

    #[test]
    fn bundled_problems_validate() {
        validate(&*double_integrator()).unwrap();
        validate(&*orbital_transfer()).unwrap();
        validate(&LqrScalar::default()).unwrap();
        validate(&LqrTwoState::default()).unwrap();
        validate(&LtiParam::two_state()).unwrap();
    }

    #[test]
    fn orbital_derivatives_match_fd() {
        let prob = OrbitalTransfer::default();
        let pts = sample_points(&prob, 20, 11);
        let report = check_derivatives(&prob, &pts, 1e-6).unwrap();
        for b in &report.blocks {
            assert!(
                b.max_rel_err <= 1e-6,
                "block {} err {}",
                b.block,
                b.max_rel_err
            );
        }
    }

    #[test]
    fn scaled_double_integrator_derivatives_match_fd() {
        let prob = double_integrator();
        let pts = sample_points(&*prob, 20, 13);
        let report = check_derivatives(&*prob, &pts, 1e-6).unwrap();
        for b in &report.blocks {
            assert!(
                b.max_rel_err <= 1e-5,
                "block {} err {}",
                b.block,
                b.max_rel_err
            );
        }
    }

    #[test]
    fn instrumented_counts_violations() {
        let wrapped = Instrumented::new(double_integrator());
        let mut out = DVector::zeros(2);
        wrapped.dynamics(
            &DVector::zeros(2),
            &DVector::from_element(1, 0.5),
            3.5,
            0.0,
            &mut out,
        );
        assert_eq!(wrapped.bound_violations(), 0);
        wrapped.dynamics(
            &DVector::zeros(2),
            &DVector::from_element(1, 1.0000001),
            3.5,
            0.0,
            &mut out,
        );
        assert_eq!(wrapped.bound_violations(), 1);
    }
}
