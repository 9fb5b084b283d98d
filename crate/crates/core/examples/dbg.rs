use csogo::problems::LtiParam;
use csogo::solver::{solve, SolverConfig, SolverState};
use csogo::control::{ControlSpline, SlackTransform, SmoothingSchedule};
use csogo::problem::{ControlBound, Problem};
use nalgebra::DVector;

fn main() {
    let prob = LtiParam::two_state();
    let config = SolverConfig {
        smoothing: SmoothingSchedule { d0: 0.4, decay: 1.0, period: 1, floor: 0.4 },
        rtol: 1e-10,
        atol: 1e-12,
        max_iterations: 30,
        ..SolverConfig::default()
    };
    let control = ControlSpline::constant(
        prob.t_span(),
        &DVector::from_element(1, 0.0),
        3,
        SlackTransform::new(&[ControlBound::Free]),
    ).unwrap();
    let init = SolverState::fresh(&prob, &config, control, 0.1);
    let sol = solve(&prob, &config, init).unwrap();
    println!("status {:?} iters {} p_final {:.10}", sol.status, sol.iterations, sol.p);
    // Direct look at the converged sweep quantities.
    use csogo::sweep::{sweep, SweepParams};
    use csogo::update::integrate_nominal;
    let params = SweepParams {
        nu: DVector::from_vec(sol.nu.clone()),
        p: sol.p,
        c_diag: DVector::from_vec(sol.c_diag.clone()),
        d_diag: DVector::from_vec(sol.d_diag.clone()),
        delta_u: sol.delta_u,
        rtol: 1e-10,
        atol: 1e-12,
    };
    let nominal = integrate_nominal(&prob, &sol.control, sol.p, 1e-10, 1e-12).unwrap();
    let sw = sweep(&prob, &nominal, &sol.control, &params).unwrap();
    println!("w0 {:.6e} g0 {:.6e} dp_next {:.6e} pred_dl {:.6e}", sw.w0, sw.g0, -sw.g0/sw.w0, sw.predicted_dl);
    for r in &sol.history {
        println!("it {} J {:.6e} |psi| {:.3e} L {:.6e} dl {:.3e} eu {} en {} hv {:.3e} p {:.4} nodes {}",
            r.iteration, r.j, r.psi_norm, r.merit, r.dl_integral, r.eps_u, r.eps_nu, r.hv_max, r.p, r.nodes);
    }
}
