//! Adaptive Dormand-Prince 5(4) integration with a fifth-order continuous
//! extension stored per accepted step.
//!
//! Every accepted step keeps five interpolation coefficients per component,
//! so a finished integration can be replayed at arbitrary times without
//! re-integrating. This is what lets the backward sweep run around a stored
//! forward trajectory (and vice versa) on its own adaptive mesh.

use nalgebra::DVector;

use crate::error::{Error, Result};

// Dormand-Prince 5(4) tableau. The last row of A equals the 5th-order
// weights (first-same-as-last), so k7 of one step is k1 of the next.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

// b5 - b4: weights of the embedded error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// Dense-output weights of the 5(4) pair (d2 = 0).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const ORDER_EXP: f64 = 0.2;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const PI_BETA: f64 = 0.04;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// One accepted step's interpolant: five coefficient vectors evaluated in
/// nested form over the normalized abscissa of `[t_start, t_end]`.
///
/// `t_start > t_end` for steps taken backward in time.
#[derive(Debug, Clone)]
pub struct DenseSegment {
    pub t_start: f64,
    pub t_end: f64,
    /// Signed step size actually taken (kept separately from the endpoints
    /// so frozen-step replays are bit-exact).
    pub h: f64,
    pub r1: DVector<f64>,
    pub r2: DVector<f64>,
    pub r3: DVector<f64>,
    pub r4: DVector<f64>,
    pub r5: DVector<f64>,
}

impl DenseSegment {
    /// Evaluate at `t` (expected inside the segment; extrapolates otherwise).
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.r1.len());
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut DVector<f64>) {
        let s = (t - self.t_start) / self.h;
        let s1 = 1.0 - s;
        for i in 0..self.r1.len() {
            out[i] = self.r1[i]
                + s * (self.r2[i] + s1 * (self.r3[i] + s * (self.r4[i] + s1 * self.r5[i])));
        }
    }
}

/// Piecewise-polynomial record of an ODE solution over a span.
///
/// Segments tile the span in integration order with shared endpoints, so
/// evaluation is continuous and the left end of each segment is exact.
#[derive(Debug, Clone)]
pub struct DenseTrajectory {
    dim: usize,
    t0: f64,
    tf: f64,
    segments: Vec<DenseSegment>,
    y_end: DVector<f64>,
}

impl DenseTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Span in integration order (t0 may exceed tf for backward storage).
    pub fn span(&self) -> (f64, f64) {
        (self.t0, self.tf)
    }

    pub fn segments(&self) -> &[DenseSegment] {
        &self.segments
    }

    /// Terminal state of the integration.
    pub fn y_end(&self) -> &DVector<f64> {
        &self.y_end
    }

    /// Initial state of the integration.
    pub fn y_start(&self) -> DVector<f64> {
        self.segments
            .first()
            .map(|s| s.r1.clone())
            .unwrap_or_else(|| self.y_end.clone())
    }

    /// Accepted node times, in integration order, including both endpoints.
    pub fn node_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.segments.iter().map(|s| s.t_start).collect();
        ts.push(self.tf);
        ts
    }

    fn direction(&self) -> f64 {
        (self.tf - self.t0).signum()
    }

    /// Locate the segment containing `t` by binary search.
    fn locate(&self, t: f64) -> Result<&DenseSegment> {
        let dir = self.direction();
        let slack = 1e-12 * (self.tf - self.t0).abs().max(1.0);
        if (t - self.t0) * dir < -slack || (t - self.tf) * dir > slack {
            let (lo, hi) = if dir >= 0.0 {
                (self.t0, self.tf)
            } else {
                (self.tf, self.t0)
            };
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let mut lo = 0usize;
        let mut hi = self.segments.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if (t - self.segments[mid].t_start) * dir >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(&self.segments[lo])
    }

    /// Evaluate the stored solution at `t` (within span up to roundoff slack).
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let seg = self.locate(t)?;
        let mut out = DVector::zeros(self.dim);
        seg.eval_into(t, &mut out);
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut DVector<f64>) -> Result<()> {
        let seg = self.locate(t)?;
        seg.eval_into(t, out);
        Ok(())
    }

    /// Write `t,y0,...,yn-1` rows sampled uniformly at `samples` points.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, samples: usize) -> Result<()> {
        write!(w, "t")?;
        for i in 0..self.dim {
            write!(w, ",y{i}")?;
        }
        writeln!(w)?;
        let n = samples.max(2);
        for k in 0..n {
            let t = self.t0 + (self.tf - self.t0) * (k as f64) / ((n - 1) as f64);
            let y = self.eval(t)?;
            write!(w, "{t}")?;
            for i in 0..self.dim {
                write!(w, ",{}", y[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Result of one embedded step attempt.
#[derive(Debug, Clone)]
pub struct RkStep {
    pub y_next: DVector<f64>,
    /// Componentwise error scaled by `atol + rtol * max(|y|, |y_next|)`.
    pub error: DVector<f64>,
    /// RMS norm of `error`; accept when <= 1.
    pub err_norm: f64,
    pub stages: [DVector<f64>; 7],
}

/// Adaptive Dormand-Prince 5(4) integrator with optional dense output.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Initial step size; estimated from the RHS when absent.
    pub h0: Option<f64>,
}

impl Default for Integrator {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
            h0: None,
        }
    }
}

impl Integrator {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    /// One embedded 5(4) step from `(t, y)` with signed step `h`.
    ///
    /// `k1` may pass the FSAL stage from the previous step. A non-finite
    /// stage is reported as a step failure so the caller can shrink `h`.
    pub fn step<F>(
        &self,
        f: &mut F,
        t: f64,
        y: &DVector<f64>,
        h: f64,
        k1: Option<&DVector<f64>>,
    ) -> Result<RkStep>
    where
        F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    {
        if h == 0.0 {
            return Err(Error::Contract("step size must be nonzero".into()));
        }
        let n = y.len();
        let mut k: [DVector<f64>; 7] = std::array::from_fn(|_| DVector::zeros(n));
        match k1 {
            Some(k1) => k[0].copy_from(k1),
            None => f(t, y, &mut k[0]),
        }
        let mut ytmp = DVector::zeros(n);
        let mut ki = DVector::zeros(n);
        for i in 1..7 {
            ytmp.copy_from(y);
            for (j, kj) in k.iter().enumerate().take(i) {
                let a = A[i][j];
                if a != 0.0 {
                    ytmp.axpy(h * a, kj, 1.0);
                }
            }
            f(t + C[i] * h, &ytmp, &mut ki);
            k[i].copy_from(&ki);
        }
        // Stage 7 is evaluated at y_next, so y_next = ytmp from the loop above.
        let y_next = ytmp;
        let mut error = DVector::zeros(n);
        let mut sq = 0.0;
        let mut finite = y_next.iter().all(|v| v.is_finite());
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let sc = self.atol + self.rtol * y[i].abs().max(y_next[i].abs());
            error[i] = h * e / sc;
            finite &= error[i].is_finite();
            sq += error[i] * error[i];
        }
        let err_norm = if finite {
            (sq / n.max(1) as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Ok(RkStep {
            y_next,
            error,
            err_norm,
            stages: k,
        })
    }

    /// Integrate over `span` (backward when `span.0 > span.1`).
    ///
    /// With `dense`, every accepted step stores the full fifth-order
    /// interpolant; otherwise segments degrade to linear chords (endpoints
    /// stay exact and the span still tiles).
    pub fn integrate<F>(
        &self,
        mut f: F,
        y0: &DVector<f64>,
        span: (f64, f64),
        dense: bool,
    ) -> Result<DenseTrajectory>
    where
        F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    {
        let (t0, tf) = span;
        if t0 == tf {
            return Err(Error::Contract("integration span is empty".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Contract("tolerances must be positive".into()));
        }
        let dir = (tf - t0).signum();
        let span_len = (tf - t0).abs();
        let h_min = 1e-14 * span_len;

        let n = y0.len();
        let mut t = t0;
        let mut y = y0.clone();
        let mut k1 = DVector::zeros(n);
        f(t, &y, &mut k1);
        let mut h = match self.h0 {
            Some(h0) => h0.abs().min(span_len) * dir,
            None => self.initial_step(&mut f, t, &y, &k1, dir, span_len),
        };

        let mut segments: Vec<DenseSegment> = Vec::new();
        let mut err_old: f64 = 1e-4;
        let mut just_rejected = false;

        for _ in 0..self.max_steps {
            if (t - tf) * dir >= 0.0 {
                break;
            }
            // Land exactly on tf.
            if (t + h - tf) * dir > 0.0 {
                h = tf - t;
            }
            if h.abs() < h_min {
                return Err(Error::StepUnderflow { t, h });
            }
            let step = self.step(&mut f, t, &y, h, Some(&k1))?;
            if step.err_norm <= 1.0 {
                let seg = if dense {
                    build_interpolant(&y, &step.y_next, &step.stages, t, h)
                } else {
                    linear_segment(&y, &step.y_next, t, h)
                };
                segments.push(seg);
                // PI controller (growth capped right after a rejection).
                let err = step.err_norm.max(1e-16);
                let mut fac = SAFETY * err.powf(-PI_ALPHA) * err_old.powf(PI_BETA);
                fac = fac.clamp(FAC_MIN, FAC_MAX);
                if just_rejected {
                    fac = fac.min(1.0);
                }
                err_old = err.max(1e-4);
                just_rejected = false;
                k1.copy_from(&step.stages[6]);
                y = step.y_next;
                t += h;
                h *= fac;
            } else {
                let fac = (SAFETY * step.err_norm.powf(-ORDER_EXP)).clamp(FAC_MIN, 1.0);
                h *= fac;
                just_rejected = true;
            }
        }
        if (t - tf) * dir < 0.0 {
            return Err(Error::StepLimit {
                t,
                cap: self.max_steps,
            });
        }
        Ok(DenseTrajectory {
            dim: n,
            t0,
            tf,
            segments,
            y_end: y,
        })
    }

    /// Integrate and return only the terminal state (no storage).
    pub fn propagate<F>(&self, f: F, y0: &DVector<f64>, span: (f64, f64)) -> Result<DVector<f64>>
    where
        F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    {
        Ok(self.integrate(f, y0, span, false)?.y_end)
    }

    /// Adaptive quadrature of a scalar integrand over `span`, reusing the
    /// stepper on the ODE `dy/dt = g(t)`.
    pub fn quadrature<G>(&self, mut g: G, span: (f64, f64)) -> Result<f64>
    where
        G: FnMut(f64) -> f64,
    {
        let y0 = DVector::from_element(1, 0.0);
        let y = self.propagate(|t, _y, dy| dy[0] = g(t), &y0, span)?;
        Ok(y[0])
    }

    // Hairer-style starting step selection.
    fn initial_step<F>(
        &self,
        f: &mut F,
        t0: f64,
        y0: &DVector<f64>,
        f0: &DVector<f64>,
        dir: f64,
        span_len: f64,
    ) -> f64
    where
        F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    {
        let n = y0.len().max(1) as f64;
        let sc = |i: usize| self.atol + self.rtol * y0[i].abs();
        let d0 = (y0
            .iter()
            .enumerate()
            .map(|(i, v)| (v / sc(i)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let d1 = (f0
            .iter()
            .enumerate()
            .map(|(i, v)| (v / sc(i)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0 = h0.min(span_len);
        let y1 = y0 + f0 * (h0 * dir);
        let mut f1 = DVector::zeros(y0.len());
        f(t0 + h0 * dir, &y1, &mut f1);
        let d2 = (f1
            .iter()
            .zip(f0.iter())
            .enumerate()
            .map(|(i, (a, b))| ((a - b) / sc(i)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
            / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(ORDER_EXP)
        };
        (100.0 * h0).min(h1).min(span_len) * dir
    }
}

/// Build the fifth-order interpolant of an accepted step.
pub fn build_interpolant(
    y: &DVector<f64>,
    y_next: &DVector<f64>,
    stages: &[DVector<f64>; 7],
    t: f64,
    h: f64,
) -> DenseSegment {
    let r1 = y.clone();
    // h * sum(b_i k_i), as already accumulated in the accepted solution.
    let r2 = y_next - y;
    let r3 = &stages[0] * h - &r2;
    // ydiff - h*k7 - r3, which restores linear exactness that the bare
    // -h*(k7 + k1) form lacks.
    let r4 = &r2 - &stages[6] * h - &r3;
    let mut r5 = DVector::zeros(y.len());
    r5.axpy(h * D1, &stages[0], 1.0);
    r5.axpy(h * D3, &stages[2], 1.0);
    r5.axpy(h * D4, &stages[3], 1.0);
    r5.axpy(h * D5, &stages[4], 1.0);
    r5.axpy(h * D6, &stages[5], 1.0);
    r5.axpy(h * D7, &stages[6], 1.0);
    DenseSegment {
        t_start: t,
        t_end: t + h,
        h,
        r1,
        r2,
        r3,
        r4,
        r5,
    }
}

fn linear_segment(y: &DVector<f64>, y_next: &DVector<f64>, t: f64, h: f64) -> DenseSegment {
    let n = y.len();
    DenseSegment {
        t_start: t,
        t_end: t + h,
        h,
        r1: y.clone(),
        r2: y_next - y,
        r3: DVector::zeros(n),
        r4: DVector::zeros(n),
        r5: DVector::zeros(n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn step_zero_field_is_exact() {
        let ig = Integrator::default();
        let y = DVector::from_vec(vec![1.5, -2.0]);
        let step = ig
            .step(&mut |_t, _y, dy: &mut DVector<f64>| dy.fill(0.0), 0.0, &y, 1.0, None)
            .unwrap();
        assert_eq!(step.y_next, y);
        assert_eq!(step.err_norm, 0.0);
    }

    #[test]
    fn step_exponential_oracle() {
        let ig = Integrator::default();
        let step = ig
            .step(
                &mut |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy.copy_from(y),
                0.0,
                &vec1(1.0),
                0.1,
                None,
            )
            .unwrap();
        assert_relative_eq!(step.y_next[0], 0.1_f64.exp(), max_relative = 1e-9);
    }

    #[test]
    fn step_quadrature_oracle() {
        let ig = Integrator::default();
        let step = ig
            .step(
                &mut |t: f64, _y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = t.cos(),
                0.0,
                &vec1(0.0),
                0.5,
                None,
            )
            .unwrap();
        assert_relative_eq!(step.y_next[0], 0.5_f64.sin(), epsilon = 1e-9);
    }

    #[test]
    fn step_nan_stage_signals_failure() {
        let ig = Integrator::default();
        let step = ig
            .step(
                &mut |_t, _y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = f64::NAN,
                0.0,
                &vec1(1.0),
                0.5,
                None,
            )
            .unwrap();
        assert!(step.err_norm.is_infinite());
    }

    #[test]
    fn interpolant_constant_field() {
        let ig = Integrator::default();
        let y = vec1(3.0);
        let step = ig
            .step(&mut |_t, _y, dy: &mut DVector<f64>| dy.fill(0.0), 0.0, &y, 1.0, None)
            .unwrap();
        let seg = build_interpolant(&y, &step.y_next, &step.stages, 0.0, 1.0);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            assert_eq!(seg.eval(t)[0], 3.0);
        }
    }

    #[test]
    fn interpolant_linear_exactness() {
        let ig = Integrator::default();
        let y = vec1(0.25);
        let h = 0.7;
        let step = ig
            .step(&mut |_t, _y, dy: &mut DVector<f64>| dy[0] = 1.0, 0.0, &y, h, None)
            .unwrap();
        let seg = build_interpolant(&y, &step.y_next, &step.stages, 0.0, h);
        for k in 0..=20 {
            let s = k as f64 / 20.0;
            assert_relative_eq!(seg.eval(s * h)[0], 0.25 + s * h, epsilon = 1e-14);
        }
    }

    #[test]
    fn interpolant_order_on_exponential() {
        // Interpolation error over one step must shrink like h^5: halving h
        // reduces the max error by at least 2^4.5.
        let ig = Integrator::default();
        let mut errs = Vec::new();
        for &h in &[0.4, 0.2, 0.1, 0.05] {
            let y = vec1(1.0);
            let step = ig
                .step(
                    &mut |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy.copy_from(y),
                    0.0,
                    &y,
                    h,
                    None,
                )
                .unwrap();
            let seg = build_interpolant(&y, &step.y_next, &step.stages, 0.0, h);
            let mut emax: f64 = 0.0;
            for k in 1..100 {
                let t = h * k as f64 / 100.0;
                emax = emax.max((seg.eval(t)[0] - t.exp()).abs());
            }
            errs.push(emax);
        }
        for w in errs.windows(2) {
            assert!(
                w[0] / w[1] >= 2f64.powf(4.5),
                "dense output order too low: ratio {}",
                w[0] / w[1]
            );
        }
    }

    #[test]
    fn integrate_decay_oracle() {
        let ig = Integrator::new(1e-10, 1e-12);
        let traj = ig
            .integrate(
                |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = -y[0],
                &vec1(1.0),
                (0.0, 5.0),
                true,
            )
            .unwrap();
        assert_relative_eq!(traj.y_end()[0], (-5.0_f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn integrate_backward_recovers_initial() {
        let ig = Integrator::new(1e-10, 1e-12);
        let traj = ig
            .integrate(
                |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = -y[0],
                &vec1((-5.0_f64).exp()),
                (5.0, 0.0),
                true,
            )
            .unwrap();
        assert_relative_eq!(traj.y_end()[0], 1.0, epsilon = 1e-8);
        // Backward trajectories evaluate anywhere in the reversed span.
        let y_mid = traj.eval(2.5).unwrap();
        assert_relative_eq!(y_mid[0], (-2.5_f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn harmonic_oscillator_energy_drift() {
        let ig = Integrator::new(1e-10, 1e-12);
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let tf = 10.0 * 2.0 * std::f64::consts::PI;
        let traj = ig
            .integrate(
                |_t, y: &DVector<f64>, dy: &mut DVector<f64>| {
                    dy[0] = y[1];
                    dy[1] = -y[0];
                },
                &y0,
                (0.0, tf),
                true,
            )
            .unwrap();
        let y = traj.y_end();
        let energy = 0.5 * (y[0] * y[0] + y[1] * y[1]);
        assert!((energy - 0.5).abs() <= 1e-6, "energy drift {energy}");
    }

    #[test]
    fn dense_eval_matches_exponential() {
        let ig = Integrator::new(1e-10, 1e-12);
        let traj = ig
            .integrate(
                |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy.copy_from(y),
                &vec1(1.0),
                (0.0, 3.0),
                true,
            )
            .unwrap();
        // Left endpoint exact.
        assert_eq!(traj.eval(0.0).unwrap()[0], 1.0);
        for k in 0..50 {
            let t = 3.0 * (k as f64 + 0.31) / 50.0;
            let y = traj.eval(t).unwrap()[0];
            assert!((y - t.exp()).abs() <= 10.0 * 1e-10 * t.exp() + 1e-12);
        }
        assert!(traj.eval(3.1).is_err());
    }

    #[test]
    fn tiling_and_boundary_continuity() {
        let ig = Integrator::new(1e-8, 1e-10);
        let traj = ig
            .integrate(
                |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = (t * y[0]).sin() + 1.0,
                &vec1(0.3),
                (0.0, 4.0),
                true,
            )
            .unwrap();
        let segs = traj.segments();
        assert!(segs.len() > 1);
        for w in segs.windows(2) {
            assert!((w[0].t_end - w[1].t_start).abs() <= 1e-14 * 4.0);
            let left = w[0].eval(w[0].t_end)[0];
            let right = w[1].eval(w[1].t_start)[0];
            assert_relative_eq!(left, right, max_relative = 1e-9);
        }
        assert_eq!(segs[0].t_start, 0.0);
        assert_eq!(segs.last().unwrap().t_end, 4.0);
    }

    #[test]
    fn observed_convergence_order() {
        // Fixed-step runs on y' = y over [0,1]; the log2 error ratio per
        // halving must sit in [4.5, 5.5].
        let ig = Integrator::default();
        let mut errs = Vec::new();
        for lvl in 0..4 {
            let steps = 8 * (1 << lvl);
            let h = 1.0 / steps as f64;
            let mut y = vec1(1.0);
            let mut t = 0.0;
            for _ in 0..steps {
                let step = ig
                    .step(
                        &mut |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy.copy_from(y),
                        t,
                        &y,
                        h,
                        None,
                    )
                    .unwrap();
                y = step.y_next;
                t += h;
            }
            errs.push((y[0] - 1.0_f64.exp()).abs());
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!(
                (4.5..=5.5).contains(&slope),
                "observed order {slope} outside [4.5, 5.5]"
            );
        }
    }

    #[test]
    fn frozen_steps_replay_bit_for_bit() {
        let ig = Integrator::new(1e-9, 1e-11);
        let rhs = |t: f64, y: &DVector<f64>, dy: &mut DVector<f64>| {
            dy[0] = -y[0] + (2.0 * t).cos();
        };
        let traj = ig.integrate(rhs, &vec1(0.7), (0.0, 3.0), false).unwrap();
        let mut y = vec1(0.7);
        for seg in traj.segments() {
            let step = ig
                .step(&mut { rhs }, seg.t_start, &y, seg.h, None)
                .unwrap();
            y = step.y_next;
        }
        assert_eq!(y[0], traj.y_end()[0]);
    }

    #[test]
    fn step_underflow_reported() {
        let ig = Integrator::new(1e-10, 1e-14);
        // Finite-time blow-up inside the span forces h underflow.
        let res = ig.integrate(
            |_t, y: &DVector<f64>, dy: &mut DVector<f64>| dy[0] = y[0] * y[0],
            &vec1(1.0),
            (0.0, 2.0),
            false,
        );
        match res {
            Err(Error::StepUnderflow { .. }) | Err(Error::StepLimit { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn quadrature_of_cosine() {
        let ig = Integrator::new(1e-11, 1e-13);
        let val = ig.quadrature(|t| t.cos(), (0.0, 1.3)).unwrap();
        assert_relative_eq!(val, 1.3_f64.sin(), epsilon = 1e-10);
    }
}
