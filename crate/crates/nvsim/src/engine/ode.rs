//! Deterministic master-equation integration: dp/dt = G p.
//!
//! Adaptive Dormand–Prince 5(4) with PI-free step control. The state vector
//! can be augmented with a photon counter so expected detected counts come
//! out of the same quadrature as the occupancies.

use crate::engine::{EngineError, RateMatrix};

/// One integrated trajectory sampled at `times`.
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

const MAX_STEPS: usize = 2_000_000;

// Dormand–Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
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
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Rk45<'a, F: Fn(&[f64], &mut [f64])> {
    f: &'a F,
    dim: usize,
    k: [Vec<f64>; 7],
    scratch: Vec<f64>,
}

impl<'a, F: Fn(&[f64], &mut [f64])> Rk45<'a, F> {
    fn new(f: &'a F, dim: usize) -> Self {
        Rk45 {
            f,
            dim,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            scratch: vec![0.0; dim],
        }
    }

    /// One attempted step of size h from y; on success writes y5 into `out`
    /// and returns the scaled error estimate.
    fn step(&mut self, y: &[f64], h: f64, out: &mut [f64], tol: f64) -> f64 {
        let k0 = {
            let mut k0 = std::mem::take(&mut self.k[0]);
            (self.f)(y, &mut k0);
            k0
        };
        self.k[0] = k0;
        for stage in 0..6 {
            for i in 0..self.dim {
                let mut acc = y[i];
                for (j, a) in A[stage].iter().enumerate().take(stage + 1) {
                    acc += h * a * self.k[j][i];
                }
                self.scratch[i] = acc;
            }
            let mut knext = std::mem::take(&mut self.k[stage + 1]);
            (self.f)(&self.scratch, &mut knext);
            self.k[stage + 1] = knext;
        }
        let mut err: f64 = 0.0;
        for i in 0..self.dim {
            let mut y5 = y[i];
            let mut y4 = y[i];
            for j in 0..7 {
                y5 += h * B5[j] * self.k[j][i];
                y4 += h * B4[j] * self.k[j][i];
            }
            out[i] = y5;
            let scale = tol * (1.0 + y[i].abs().max(y5.abs()));
            err = err.max((y5 - y4).abs() / scale);
        }
        err
    }
}

fn integrate_adaptive<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    y: &mut Vec<f64>,
    duration: f64,
    tol: f64,
    rate_scale: f64,
) -> Result<(), EngineError> {
    if duration <= 0.0 {
        return Ok(());
    }
    let dim = y.len();
    let mut rk = Rk45::new(f, dim);
    let mut t = 0.0;
    // Initial step: a fraction of the fastest time constant.
    let mut h = if rate_scale > 0.0 {
        (0.1 / rate_scale).min(duration)
    } else {
        duration
    };
    let mut out = vec![0.0; dim];
    for _ in 0..MAX_STEPS {
        if t >= duration {
            return Ok(());
        }
        h = h.min(duration - t);
        let err = rk.step(y, h, &mut out, tol);
        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&out);
            let grow = 0.9 * err.max(1e-10).powf(-0.2);
            h *= grow.min(5.0);
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
        }
        if !h.is_finite() || h <= 0.0 {
            return Err(EngineError::StepLimit(MAX_STEPS));
        }
    }
    Err(EngineError::StepLimit(MAX_STEPS))
}

fn check_p0(m: &RateMatrix, p0: &[f64]) -> Result<(), EngineError> {
    if p0.len() != m.n {
        return Err(EngineError::DimensionMismatch {
            expected: m.n,
            got: p0.len(),
        });
    }
    if p0.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(EngineError::BadProbability(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = p0.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EngineError::BadProbability(format!(
            "must sum to 1 within 1e-9, got {sum}"
        )));
    }
    Ok(())
}

/// Integrate dp/dt = G p over `duration`, sampling `n_outputs` points
/// (including the endpoint). The generator is validated first; every output
/// state is renormalization-checked against `tol`.
pub fn ode_solve(
    m: &RateMatrix,
    p0: &[f64],
    duration: f64,
    tol: f64,
    n_outputs: usize,
) -> Result<OdeTrajectory, EngineError> {
    m.check_generator(1e-9)?;
    check_p0(m, p0)?;
    let rate_scale = m.g.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let f = |y: &[f64], dy: &mut [f64]| m.apply(y, dy);

    let n_outputs = n_outputs.max(1);
    let mut times = Vec::with_capacity(n_outputs + 1);
    let mut states = Vec::with_capacity(n_outputs + 1);
    let mut y = p0.to_vec();
    times.push(0.0);
    states.push(y.clone());
    let dt = duration / n_outputs as f64;
    for step in 1..=n_outputs {
        integrate_adaptive(&f, &mut y, dt, tol, rate_scale)?;
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > tol.max(1e-12) * 10.0 {
            return Err(EngineError::BadProbability(format!(
                "probability leaked: sum {sum} at output {step}"
            )));
        }
        times.push(step as f64 * dt);
        states.push(y.clone());
    }
    Ok(OdeTrajectory { times, states })
}

// ---------------------------------------------------------------------------
// Exact window propagation via the matrix exponential
// ---------------------------------------------------------------------------

fn mat_mul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

fn norm_1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solve A X = B for square dense A and matrix B (columns solved in place).
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<(), EngineError> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(EngineError::Singular);
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                b.swap(col * n + j, pivot * n + j);
            }
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            for j in 0..n {
                b[row * n + j] -= factor * b[col * n + j];
            }
        }
    }
    for row in (0..n).rev() {
        let inv = 1.0 / a[row * n + row];
        for j in 0..n {
            let mut acc = b[row * n + j];
            for k in row + 1..n {
                acc -= a[row * n + k] * b[k * n + j];
            }
            b[row * n + j] = acc * inv;
        }
    }
    Ok(())
}

/// Dense matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant. Sized for the small generators this crate produces.
pub fn expm(a: &[f64], n: usize) -> Result<Vec<f64>, EngineError> {
    const THETA_13: f64 = 5.371_920_351_148_152;
    #[allow(clippy::unreadable_literal)]
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];

    let norm = norm_1(a, n);
    if !norm.is_finite() {
        return Err(EngineError::NotGenerator("non-finite matrix".into()));
    }
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(s as i32);
    let a1: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut a2 = vec![0.0; n * n];
    let mut a4 = vec![0.0; n * n];
    let mut a6 = vec![0.0; n * n];
    mat_mul(&a1, &a1, n, &mut a2);
    mat_mul(&a2, &a2, n, &mut a4);
    mat_mul(&a2, &a4, n, &mut a6);

    let ident = |c: f64| -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = c;
        }
        m
    };

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    let mut inner = ident(0.0);
    for i in 0..n * n {
        inner[i] = B[13] * a6[i] + B[11] * a4[i] + B[9] * a2[i];
    }
    let mut tmp = vec![0.0; n * n];
    mat_mul(&a6, &inner, n, &mut tmp);
    let mut u_core = ident(B[1]);
    for i in 0..n * n {
        u_core[i] += tmp[i] + B[7] * a6[i] + B[5] * a4[i] + B[3] * a2[i];
    }
    let mut u = vec![0.0; n * n];
    mat_mul(&a1, &u_core, n, &mut u);

    // V = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    for i in 0..n * n {
        inner[i] = B[12] * a6[i] + B[10] * a4[i] + B[8] * a2[i];
    }
    mat_mul(&a6, &inner, n, &mut tmp);
    let mut v = ident(B[0]);
    for i in 0..n * n {
        v[i] += tmp[i] + B[6] * a6[i] + B[4] * a4[i] + B[2] * a2[i];
    }

    // (V - U) E = (V + U)
    let mut lhs = vec![0.0; n * n];
    let mut rhs = vec![0.0; n * n];
    for i in 0..n * n {
        lhs[i] = v[i] - u[i];
        rhs[i] = v[i] + u[i];
    }
    solve_dense(&mut lhs, &mut rhs, n)?;

    let mut e = rhs;
    for _ in 0..s {
        mat_mul(&e, &e, n, &mut tmp);
        std::mem::swap(&mut e, &mut tmp);
    }
    Ok(e)
}

/// Propagate one piecewise-constant window exactly, accumulating the
/// expected number of detected photons with per-level weights
/// `count_weights` (Hz per unit occupancy). The generator is augmented with
/// a counter row, so occupancies and the count integral come from one matrix
/// exponential. Returns the final occupancy and the expected counts.
pub fn integrate_window(
    m: &RateMatrix,
    p0: &[f64],
    duration: f64,
    count_weights: &[f64],
    _tol: f64,
) -> Result<(Vec<f64>, f64), EngineError> {
    debug_assert_eq!(p0.len(), m.n);
    debug_assert_eq!(count_weights.len(), m.n);
    if duration <= 0.0 {
        return Ok((p0.to_vec(), 0.0));
    }
    let n = m.n;
    let na = n + 1;
    // Augmented system: d/dt [p; C] = [[G, 0], [w^T, 0]] [p; C].
    let mut aug = vec![0.0; na * na];
    for i in 0..n {
        for j in 0..n {
            aug[i * na + j] = m.g[i * n + j] * duration;
        }
    }
    for j in 0..n {
        aug[n * na + j] = count_weights[j] * duration;
    }
    let e = expm(&aug, na)?;
    let mut p_end = vec![0.0; n];
    let mut counts = 0.0;
    for (i, out) in p_end.iter_mut().enumerate() {
        *out = (0..n).map(|j| e[i * na + j] * p0[j]).sum();
    }
    for j in 0..n {
        counts += e[n * na + j] * p0[j];
    }
    // Clip round-off and renormalize the propagated distribution.
    let mut sum = 0.0;
    for v in &mut p_end {
        if *v < 0.0 && *v > -1e-10 {
            *v = 0.0;
        }
        sum += *v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(EngineError::BadProbability(format!(
            "window propagation leaked probability: sum {sum}"
        )));
    }
    for v in &mut p_end {
        *v /= sum;
    }
    Ok((p_end, counts.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::LevelId;

    fn two_level(up: f64, down: f64) -> RateMatrix {
        RateMatrix {
            n: 2,
            level_ids: vec![LevelId::new("a"), LevelId::new("b")],
            g: vec![-up, down, up, -down],
        }
    }

    #[test]
    fn zero_generator_is_identity_flow() {
        let m = RateMatrix {
            n: 3,
            level_ids: vec![LevelId::new("a"), LevelId::new("b"), LevelId::new("c")],
            g: vec![0.0; 9],
        };
        let p0 = vec![0.2, 0.3, 0.5];
        let traj = ode_solve(&m, &p0, 10.0, 1e-10, 5).unwrap();
        for state in &traj.states {
            for (a, b) in state.iter().zip(&p0) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn two_level_matches_closed_form() {
        // Closed form: p1(t) = pss + (p1(0) - pss) exp(-(up+down) t).
        let up = 2.0e6;
        let down = 6.0e6;
        let m = two_level(up, down);
        let p0 = vec![1.0, 0.0];
        let duration = 1.2e-6;
        let traj = ode_solve(&m, &p0, duration, 1e-10, 24).unwrap();
        let pss = up / (up + down);
        for (t, state) in traj.times.iter().zip(&traj.states) {
            let expected = pss + (0.0 - pss) * (-(up + down) * t).exp();
            assert!(
                (state[1] - expected).abs() < 1e-6,
                "t={t}: {} vs {expected}",
                state[1]
            );
        }
    }

    #[test]
    fn probability_conserved_componentwise() {
        let up = 5.0e7;
        let down = 1.0e8;
        let m = two_level(up, down);
        let traj = ode_solve(&m, &[0.5, 0.5], 1e-5, 1e-9, 50).unwrap();
        for state in &traj.states {
            let sum: f64 = state.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &v in state {
                assert!(v >= -1e-9 && v <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn long_time_integration_reaches_steady_state() {
        let m = two_level(3.0, 1.0);
        let traj = ode_solve(&m, &[1.0, 0.0], 100.0, 1e-10, 4).unwrap();
        let last = traj.states.last().unwrap();
        let exact = m.steady_state().unwrap();
        for (a, b) in last.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_generator() {
        let mut m = two_level(1.0, 1.0);
        m.g[0] = -2.0; // column no longer sums to zero
        assert!(ode_solve(&m, &[1.0, 0.0], 1.0, 1e-9, 1).is_err());
    }

    #[test]
    fn rejects_bad_p0() {
        let m = two_level(1.0, 1.0);
        assert!(ode_solve(&m, &[0.7, 0.7], 1.0, 1e-9, 1).is_err());
        assert!(ode_solve(&m, &[-0.1, 1.1], 1.0, 1e-9, 1).is_err());
        assert!(ode_solve(&m, &[1.0], 1.0, 1e-9, 1).is_err());
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&[0.0; 9], 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((e[i * 3 + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn expm_matches_two_level_closed_form() {
        // exp(G t) for the two-level generator has the closed form
        // p1(t) = pss (1 - exp(-k t)) from p = (1, 0).
        let up = 3.0e7;
        let down = 9.0e7;
        let t = 2.7e-8;
        let g = [-up * t, down * t, up * t, -down * t];
        let e = expm(&g, 2).unwrap();
        let k = up + down;
        let pss = up / k;
        let p1 = e[2]; // column 0, row 1
        let expected = pss * (1.0 - (-k * t).exp());
        assert!((p1 - expected).abs() < 1e-12, "{p1} vs {expected}");
    }

    #[test]
    fn expm_handles_stiff_scales() {
        // Rates ~1e8 over a 1 ms window: far beyond explicit integration.
        let up = 1.3e8;
        let down = 0.9e8;
        let t = 1e-3;
        let g = [-up * t, down * t, up * t, -down * t];
        let e = expm(&g, 2).unwrap();
        let pss = up / (up + down);
        assert!((e[2] - pss).abs() < 1e-9);
        // Columns of a propagated generator still sum to 1.
        for j in 0..2 {
            let col = e[j] + e[2 + j];
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_count_quadrature_matches_closed_form() {
        // Expected counts of a two-level emitter: the analytic integral of
        // w * p1(t) over the window.
        let up = 1.0e6;
        let down = 4.0e6;
        let m = two_level(up, down);
        let w = vec![0.0, 0.35 * down];
        let duration = 3.0e-6;
        let (_, counts) = integrate_window(&m, &[1.0, 0.0], duration, &w, 1e-10).unwrap();
        let k = up + down;
        let pss = up / k;
        // integral of p1 = pss*t + (p1(0)-pss)/k * (1 - exp(-k t))
        let integral = pss * duration + (0.0 - pss) / k * (1.0 - (-k * duration).exp());
        let expected = 0.35 * down * integral;
        assert!(
            (counts - expected).abs() < 1e-8 * expected.abs().max(1.0),
            "{counts} vs {expected}"
        );
    }
}
