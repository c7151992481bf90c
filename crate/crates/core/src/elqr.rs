//! Extended linear-quadratic regulator on the realified reduced model.
//!
//! The offline SSM trajectory p(t) turns the full quadratic cost into an
//! extended LQ problem for the correction coordinates q: quadratic terms
//! Q2 = eps^2 V'QV plus time-varying linear terms b_Q(t) = 2 eps (QV)' W(p).
//! The feedback law u = -Rinv B' P q + 0.5 Rinv B' s comes from a backward
//! Riccati sweep for P and a backward linear sweep for the compensation
//! vector s with s(t1) = -b_M(t1). The costate convention mu = -2 P q + s
//! carries the factor of two, so the Riccati equation reads
//! P' = -P L - L' P - Q2 + P B Rinv B' P (no halved weights).
//!
//! All signals live on a uniform design grid; P, s, b_Q, b are interpolated
//! linearly between nodes, consistent with the O(h^2) residual checks.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Cholesky, Eigh, Factorize, Solve, UPLO};

use crate::error::{Error, Result};
use crate::linred::{reduced_initial_condition, ReducedLinearModel};
use crate::mechmodel::FirstOrderSystem;
use crate::ode::{integrate, OdeOptions};
use crate::ssm::{
    eval_parameterization, project_to_master, simulate_reduced, ReducedTrajectory, SSMModel,
};

/// Cost weights of the full-order objective.
#[derive(Debug, Clone)]
pub struct LQWeights {
    pub q: Array2<f64>,
    pub r_hat: Array2<f64>,
    pub m_hat: Array2<f64>,
}

impl LQWeights {
    pub fn new(q: Array2<f64>, r_hat: Array2<f64>, m_hat: Array2<f64>) -> Result<Self> {
        check_symmetric("Q", &q)?;
        check_symmetric("R_hat", &r_hat)?;
        check_symmetric("M_hat", &m_hat)?;
        check_psd("Q", &q)?;
        check_psd("M_hat", &m_hat)?;
        if r_hat.cholesky(UPLO::Lower).is_err() {
            return Err(Error::Invalid(
                "R_hat must be symmetric positive definite".into(),
            ));
        }
        Ok(LQWeights { q, r_hat, m_hat })
    }
}

fn check_symmetric(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Invalid(format!("{name} must be square")));
    }
    let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    let err = (m - &m.t()).iter().map(|x| x.abs()).fold(0.0, f64::max);
    if err > 1e-10 * scale {
        return Err(Error::Invalid(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn check_psd(name: &str, m: &Array2<f64>) -> Result<()> {
    let (vals, _) = m
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Invalid(format!("eigendecomposition of {name} failed: {e}")))?;
    let scale = vals.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    if vals.iter().any(|&v| v < -1e-10 * scale) {
        return Err(Error::Invalid(format!(
            "{name} must be positive semidefinite"
        )));
    }
    Ok(())
}

/// Extended LQ data sampled on the design grid.
#[derive(Debug, Clone)]
pub struct LQData {
    pub grid: Vec<f64>,
    pub q2: Array2<f64>,
    pub r_hat: Array2<f64>,
    pub m2: Array2<f64>,
    /// b_Q(t) per node.
    pub bq: Vec<Array1<f64>>,
    /// b_M(t1).
    pub bm_t1: Array1<f64>,
    /// b(t) = U* Fext(t) per node (realified).
    pub b: Vec<Array1<f64>>,
    /// Dropped constant a(t) = W(p)' Q W(p) per node, kept for reporting.
    pub a_running: Vec<f64>,
    /// Terminal constant W(p(t1))' M_hat W(p(t1)).
    pub a_terminal: f64,
    /// W(p(t)) samples, reused for the reconstruction z = W(p) + eps V q.
    pub w_samples: Vec<Array1<f64>>,
}

impl LQData {
    pub fn step(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }
}

fn lerp_index(grid: &[f64], t: f64) -> (usize, f64) {
    let n = grid.len();
    let (t0, t1) = (grid[0], grid[n - 1]);
    if t <= t0 {
        return (0, 0.0);
    }
    if t >= t1 {
        return (n - 2, 1.0);
    }
    // arithmetic guess for uniform grids, verified and corrected by
    // bisection so stitched (nonuniform) grids interpolate correctly
    let h = (t1 - t0) / (n - 1) as f64;
    let mut i = (((t - t0) / h) as usize).min(n - 2);
    if !(grid[i] <= t && t <= grid[i + 1]) {
        i = match grid.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(j) => j.min(n - 2),
            Err(j) => j.saturating_sub(1).min(n - 2),
        };
    }
    let dt = grid[i + 1] - grid[i];
    let s = if dt > 0.0 {
        ((t - grid[i]) / dt).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (i, s)
}

fn lerp_vec(grid: &[f64], values: &[Array1<f64>], t: f64) -> Array1<f64> {
    let (i, s) = lerp_index(grid, t);
    &values[i] * (1.0 - s) + &values[i + 1] * s
}

fn lerp_mat(grid: &[f64], values: &[Array2<f64>], t: f64) -> Array2<f64> {
    let (i, s) = lerp_index(grid, t);
    &values[i] * (1.0 - s) + &values[i + 1] * s
}

/// Assemble the extended LQ data on `grid` (within the span of `p_traj`).
pub fn assemble_lq(
    weights: &LQWeights,
    model: &ReducedLinearModel,
    ssm: &SSMModel,
    p_traj: &ReducedTrajectory,
    epsilon: f64,
    grid: &[f64],
) -> Result<LQData> {
    if !model.realified {
        return Err(Error::Invalid(
            "assemble_lq requires a realified reduced model".into(),
        ));
    }
    let (span0, span1) = p_traj.span();
    let (g0, g1) = (grid[0], grid[grid.len() - 1]);
    if g0 < span0 - 1e-9 || g1 > span1 + 1e-9 {
        return Err(Error::Invalid(format!(
            "design grid [{g0}, {g1}] outside trajectory span [{span0}, {span1}]"
        )));
    }
    let (_, _, _, v_r) = model.real_parts()?;
    let qv = weights.q.dot(&v_r); // N x dim
    let q2 = {
        let mut m = v_r.t().dot(&qv) * (epsilon * epsilon);
        symmetrize(&mut m);
        m
    };
    let mv = weights.m_hat.dot(&v_r);
    let m2 = {
        let mut m = v_r.t().dot(&mv) * (epsilon * epsilon);
        symmetrize(&mut m);
        m
    };

    let mut bq = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    let mut a_running = Vec::with_capacity(grid.len());
    let mut w_samples = Vec::with_capacity(grid.len());
    for &t in grid {
        let p = p_traj.sample(t);
        let w = eval_parameterization(ssm, p.as_slice().unwrap())?;
        bq.push(qv.t().dot(&w) * (2.0 * epsilon));
        b.push(model.forcing_term_real(t)?);
        a_running.push(w.dot(&weights.q.dot(&w)));
        w_samples.push(w);
    }
    let w1 = &w_samples[w_samples.len() - 1];
    let bm_t1 = mv.t().dot(w1) * (2.0 * epsilon);
    let a_terminal = w1.dot(&weights.m_hat.dot(w1));

    Ok(LQData {
        grid: grid.to_vec(),
        q2,
        r_hat: weights.r_hat.clone(),
        m2,
        bq,
        bm_t1,
        b,
        a_running,
        a_terminal,
        w_samples,
    })
}

fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Backward Riccati and compensation sweep results on the design grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub p: Vec<Array2<f64>>,
    pub s: Vec<Array1<f64>>,
}

impl RiccatiSolution {
    pub fn p_at(&self, t: f64) -> Array2<f64> {
        lerp_mat(&self.grid, &self.p, t)
    }

    pub fn s_at(&self, t: f64) -> Array1<f64> {
        lerp_vec(&self.grid, &self.s, t)
    }
}

fn gain_matrices(model: &ReducedLinearModel, r_hat: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    crate::init_blas_single_thread();
    let (_, b_hat, _, _) = model.real_parts()?;
    let rf = r_hat
        .factorize()
        .map_err(|e| Error::Singular(format!("R_hat factorization failed: {e}")))?;
    // Rinv B' (q x dim)
    let bt = b_hat.t().to_owned();
    let mut rinv_bt = Array2::zeros((r_hat.nrows(), b_hat.nrows()));
    for j in 0..b_hat.nrows() {
        let col = rf
            .solve(&bt.column(j).to_owned())
            .map_err(|e| Error::Singular(format!("R_hat solve failed: {e}")))?;
        rinv_bt.column_mut(j).assign(&col);
    }
    // B Rinv B' (dim x dim)
    let brb = b_hat.dot(&rinv_bt);
    Ok((rinv_bt, brb))
}

/// Integrate P' = -P L - L' P - Q2 + P B Rinv B' P backward from
/// P(t1) = M2, sampled on the design grid. P is symmetrized at every
/// emitted node; the terminal node stores M2 exactly.
pub fn solve_riccati(model: &ReducedLinearModel, lq: &LQData) -> Result<RiccatiSolution> {
    let (lam, _, _, _) = model.real_parts()?;
    let dim = lam.nrows();
    let (_, brb) = gain_matrices(model, &lq.r_hat)?;
    let grid = &lq.grid;
    let (t0, t1) = (grid[0], grid[grid.len() - 1]);

    let pack = |m: &Array2<f64>| -> Array1<f64> {
        Array1::from_iter(m.iter().copied())
    };
    let unpack = |y: &ArrayView1<f64>| -> Array2<f64> {
        Array2::from_shape_vec((dim, dim), y.to_vec()).unwrap()
    };

    // tau = t1 - t; dP/dtau = P L + L' P + Q2 - P B Rinv B' P
    let rhs = |_tau: f64, y: ArrayView1<f64>, dy: &mut Array1<f64>| {
        let p = unpack(&y);
        let pl = p.dot(&lam);
        let pbrbp = p.dot(&brb).dot(&p);
        let dp = &pl + &pl.t() + &lq.q2 - &pbrbp;
        dy.assign(&pack(&dp));
    };

    let tau_out: Vec<f64> = grid.iter().rev().map(|&t| t1 - t).collect();
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..Default::default()
    };
    let samples = integrate(&rhs, 0.0, t1 - t0, &pack(&lq.m2), &tau_out, &opts).map_err(
        |e| match e {
            Error::StepSizeCollapse(tau) | Error::MaxStepsExceeded(tau) => {
                Error::RiccatiEscape(t1 - tau)
            }
            other => other,
        },
    )?;

    let mut p: Vec<Array2<f64>> = samples
        .into_iter()
        .rev()
        .map(|y| {
            let mut m = unpack(&y.view());
            symmetrize(&mut m);
            m
        })
        .collect();
    // terminal condition exactly as stored
    let last = p.len() - 1;
    p[last] = lq.m2.clone();
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p,
        s: vec![Array1::zeros(dim); grid.len()],
    })
}

/// Integrate s' = (P B Rinv B' - L') s + b_Q + 2 P b backward from
/// s(t1) = -b_M(t1), interpolating P and the sampled signals.
pub fn solve_compensation(
    model: &ReducedLinearModel,
    lq: &LQData,
    riccati: &RiccatiSolution,
) -> Result<RiccatiSolution> {
    if riccati.grid != lq.grid {
        return Err(Error::Invalid(
            "Riccati grid does not match the LQ design grid".into(),
        ));
    }
    let (lam, _, _, _) = model.real_parts()?;
    let lam_t = lam.t().to_owned();
    let (_, brb) = gain_matrices(model, &lq.r_hat)?;
    let grid = &lq.grid;
    let (t0, t1) = (grid[0], grid[grid.len() - 1]);

    let rhs = |tau: f64, y: ArrayView1<f64>, dy: &mut Array1<f64>| {
        let t = t1 - tau;
        let p = riccati.p_at(t);
        let bq = lerp_vec(grid, &lq.bq, t);
        let b = lerp_vec(grid, &lq.b, t);
        let s = y.to_owned();
        let ds = p.dot(&brb).dot(&s) - lam_t.dot(&s) + bq + p.dot(&b) * 2.0;
        dy.assign(&(-ds)); // backward in t
    };

    let tau_out: Vec<f64> = grid.iter().rev().map(|&t| t1 - t).collect();
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..Default::default()
    };
    let s_term = lq.bm_t1.mapv(|x| -x);
    let samples = integrate(&rhs, 0.0, t1 - t0, &s_term, &tau_out, &opts)?;
    let mut s: Vec<Array1<f64>> = samples.into_iter().rev().collect();
    let last = s.len() - 1;
    s[last] = s_term;
    Ok(RiccatiSolution {
        grid: grid.clone(),
        p: riccati.p.clone(),
        s,
    })
}

/// u = -Rinv B' P(t) q + 0.5 Rinv B' s(t).
pub fn control_input(
    model: &ReducedLinearModel,
    riccati: &RiccatiSolution,
    lq: &LQData,
    q: &Array1<f64>,
    t: f64,
) -> Result<Array1<f64>> {
    let (t0, t1) = (riccati.grid[0], riccati.grid[riccati.grid.len() - 1]);
    if t < t0 - 1e-9 || t > t1 + 1e-9 {
        return Err(Error::Invalid(format!(
            "control query time {t} outside design grid [{t0}, {t1}]"
        )));
    }
    let (rinv_bt, _) = gain_matrices(model, &lq.r_hat)?;
    let p = riccati.p_at(t);
    let s = riccati.s_at(t);
    Ok(rinv_bt.dot(&(&s * 0.5 - &p.dot(q))))
}

/// Physical-coordinate feedback: q is measured from the state via
/// q = U* B (z - W(p(t))) / eps before applying the control law.
pub fn control_from_state(
    model: &ReducedLinearModel,
    riccati: &RiccatiSolution,
    lq: &LQData,
    b_mat: &Array2<f64>,
    z: &Array1<f64>,
    t: f64,
    epsilon: f64,
) -> Result<Array1<f64>> {
    let w = lerp_vec(&lq.grid, &lq.w_samples, t);
    let qc = reduced_initial_condition(model, b_mat, z, &w, epsilon)?;
    let q = qc.mapv(|c| c.re);
    control_input(model, riccati, lq, &q, t)
}

/// Closed-loop solution samples plus run metrics.
#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub grid: Vec<f64>,
    pub u: Vec<Array1<f64>>,
    pub q: Vec<Array1<f64>>,
    pub z_pred: Vec<Array1<f64>>,
    pub z_full: Option<Vec<Array1<f64>>>,
    pub segment_boundaries: Vec<f64>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    /// Reduced objective (the a(t) constants dropped).
    pub objective_reduced: f64,
    /// Full objective with the dropped a(t) terms added back.
    pub objective: f64,
    /// RMS over observables of (z_full - z_pred), when validation ran.
    pub rms_prediction_error: Option<f64>,
    /// Same RMS split per receding segment. The first segment carries the
    /// accumulation error that boundary re-anchoring corrects, so the last
    /// entry is the meaningful accuracy figure.
    pub rms_per_segment: Vec<f64>,
    /// Peak |C z| over the run (prediction, or full model when present).
    pub peak_controlled_amplitude: f64,
}

/// Simulate q' = L q + B u(t, q) + b(t) under the computed feedback and
/// emit u, q, and the reconstruction z = W(p) + eps V q on the grid.
pub fn closed_loop_simulate(
    model: &ReducedLinearModel,
    lq: &LQData,
    riccati: &RiccatiSolution,
    q0: &Array1<f64>,
    epsilon: f64,
) -> Result<ControlSolution> {
    let (lam, b_hat, _, v_r) = model.real_parts()?;
    let (rinv_bt, _) = gain_matrices(model, &lq.r_hat)?;
    let grid = &lq.grid;
    let (t0, t1) = (grid[0], grid[grid.len() - 1]);

    let control = |t: f64, q: &Array1<f64>| -> Array1<f64> {
        let p = riccati.p_at(t);
        let s = riccati.s_at(t);
        rinv_bt.dot(&(&s * 0.5 - &p.dot(q)))
    };

    let rhs = |t: f64, y: ArrayView1<f64>, dy: &mut Array1<f64>| {
        let q = y.to_owned();
        let u = control(t, &q);
        let b = lerp_vec(grid, &lq.b, t);
        dy.assign(&(lam.dot(&q) + b_hat.dot(&u) + b));
    };

    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..Default::default()
    };
    let q_samples = integrate(&rhs, t0, t1, q0, grid, &opts)?;

    let mut u = Vec::with_capacity(grid.len());
    let mut z_pred = Vec::with_capacity(grid.len());
    for (i, t) in grid.iter().enumerate() {
        let ut = control(*t, &q_samples[i]);
        let z = &lq.w_samples[i] + &(v_r.dot(&q_samples[i]) * epsilon);
        u.push(ut);
        z_pred.push(z);
    }

    let (j_red, j_full) = evaluate_objective(lq, &q_samples, &u);
    let peak = peak_amplitude(&model.c_obs, &z_pred);
    Ok(ControlSolution {
        grid: grid.clone(),
        u,
        q: q_samples,
        z_pred,
        z_full: None,
        segment_boundaries: vec![t0, t1],
        metrics: RunMetrics {
            objective_reduced: j_red,
            objective: j_full,
            rms_prediction_error: None,
            rms_per_segment: Vec::new(),
            peak_controlled_amplitude: peak,
        },
    })
}

/// Simulate the reduced linear dynamics under a prescribed control signal
/// (linearly interpolated between nodes).
pub fn simulate_with_control(
    model: &ReducedLinearModel,
    lq: &LQData,
    u_signal: &[Array1<f64>],
    q0: &Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    if u_signal.len() != lq.grid.len() {
        return Err(Error::Invalid("control signal grid mismatch".into()));
    }
    let (lam, b_hat, _, _) = model.real_parts()?;
    let grid = &lq.grid;
    let rhs = |t: f64, y: ArrayView1<f64>, dy: &mut Array1<f64>| {
        let q = y.to_owned();
        let u = lerp_vec(grid, u_signal, t);
        let b = lerp_vec(grid, &lq.b, t);
        dy.assign(&(lam.dot(&q) + b_hat.dot(&u) + b));
    };
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..Default::default()
    };
    integrate(&rhs, grid[0], grid[grid.len() - 1], q0, grid, &opts)
}

/// Trapezoid quadrature of the reduced objective and the full objective
/// (with the dropped a(t) constants added back).
pub fn evaluate_objective(
    lq: &LQData,
    q_samples: &[Array1<f64>],
    u_samples: &[Array1<f64>],
) -> (f64, f64) {
    let n = lq.grid.len();
    let mut running_red = 0.0;
    let mut running_a = 0.0;
    for i in 0..n {
        let q = &q_samples[i];
        let u = &u_samples[i];
        let val = lq.bq[i].dot(q) + q.dot(&lq.q2.dot(q)) + u.dot(&lq.r_hat.dot(u));
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        running_red += w * val;
        running_a += w * lq.a_running[i];
    }
    let h = lq.step();
    running_red *= h;
    running_a *= h;
    let q1 = &q_samples[n - 1];
    let terminal_red = lq.bm_t1.dot(q1) + q1.dot(&lq.m2.dot(q1));
    let j_red = running_red + terminal_red;
    let j_full = j_red + running_a + lq.a_terminal;
    (j_red, j_full)
}

fn peak_amplitude(c_obs: &Array2<f64>, z: &[Array1<f64>]) -> f64 {
    let mut peak: f64 = 0.0;
    for zi in z {
        let y = c_obs.dot(zi);
        peak = peak.max(y.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    peak
}

/// Integrate the full nonlinear model B z' = A z + F(z) + eps (Fext + Bext u)
/// with the control signal interpolated from `(u_grid, u_signal)`. Returns
/// samples on `out_grid`.
#[allow(clippy::too_many_arguments)]
pub fn validate_full(
    fo: &FirstOrderSystem,
    u_grid: &[f64],
    u_signal: &[Array1<f64>],
    z0: &Array1<f64>,
    t0: f64,
    t1: f64,
    tol: f64,
    out_grid: &[f64],
) -> Result<Vec<Array1<f64>>> {
    crate::init_blas_single_thread();
    if u_grid.len() != u_signal.len() {
        return Err(Error::Invalid("control signal grid mismatch".into()));
    }
    if u_grid[0] > t0 + 1e-9 || u_grid[u_grid.len() - 1] < t1 - 1e-9 {
        return Err(Error::Invalid(
            "control signal does not cover the validation span".into(),
        ));
    }
    let blu = fo
        .b
        .factorize()
        .map_err(|e| Error::Singular(format!("B factorization failed: {e}")))?;
    let eps = fo.epsilon;
    let n = fo.dim;
    let rhs = |t: f64, y: ArrayView1<f64>, dy: &mut Array1<f64>| {
        let z = y.to_owned();
        let mut r = fo.a.dot(&z);
        let f = crate::mechmodel::eval_polynomial_real(&fo.nonlinearity, &z).unwrap();
        r += &f;
        let mut fext = Array1::zeros(n);
        fo.forcing.eval(t, &mut fext);
        let u = lerp_vec(u_grid, u_signal, t);
        r.scaled_add(eps, &(fext + fo.bext.dot(&u)));
        dy.assign(&blu.solve(&r).unwrap());
    };
    let opts = OdeOptions {
        rtol: tol,
        atol: tol * 1e-2,
        ..Default::default()
    };
    integrate(&rhs, t0, t1, z0, out_grid, &opts)
}

/// How the next segment of a receding-horizon run is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    /// Integrate the full model with the emitted control; its terminal
    /// state seeds the next segment (validation mode).
    FullModel,
    /// Seed from the ROM prediction (design-only mode).
    Predicted,
}

/// Options for a receding-horizon run.
#[derive(Debug, Clone, Copy)]
pub struct RecedingOptions {
    /// Design-grid intervals per segment.
    pub nodes_per_segment: usize,
    pub seed_mode: SeedMode,
    /// Tolerance of the offline reduced simulation and full-model runs.
    pub ode_tol: f64,
}

impl Default for RecedingOptions {
    fn default() -> Self {
        Self {
            nodes_per_segment: 2000,
            seed_mode: SeedMode::FullModel,
            ode_tol: 1e-8,
        }
    }
}

/// Receding-horizon design: split [t0, t1] at `boundaries`, run the whole
/// offline/online pipeline per segment, and re-anchor each segment on the
/// terminal state of the previous one (full-model state in validation
/// mode). Control discontinuities at boundaries are expected; the state is
/// continuous by construction.
#[allow(clippy::too_many_arguments)]
pub fn receding_horizon(
    fo: &FirstOrderSystem,
    ssm: &SSMModel,
    model: &ReducedLinearModel,
    weights: &LQWeights,
    z0: &Array1<f64>,
    t0: f64,
    t1: f64,
    boundaries: &[f64],
    epsilon: f64,
    opts: &RecedingOptions,
) -> Result<ControlSolution> {
    let mut edges = vec![t0];
    for &b in boundaries {
        if b <= *edges.last().unwrap() || b >= t1 {
            return Err(Error::Invalid(format!(
                "segment boundary {b} must lie strictly inside ({t0}, {t1}) in increasing order"
            )));
        }
        edges.push(b);
    }
    edges.push(t1);

    let mut grid_all: Vec<f64> = Vec::new();
    let mut u_all: Vec<Array1<f64>> = Vec::new();
    let mut q_all: Vec<Array1<f64>> = Vec::new();
    let mut zp_all: Vec<Array1<f64>> = Vec::new();
    let mut zf_all: Vec<Array1<f64>> = Vec::new();
    let mut j_red_total = 0.0;
    let mut j_full_total = 0.0;
    let mut rms_segments: Vec<f64> = Vec::new();

    let mut z_curr = z0.clone();
    for seg in 0..edges.len() - 1 {
        let (ta, tb) = (edges[seg], edges[seg + 1]);
        let p0 = project_to_master(&ssm.master, &fo.b, &z_curr)?;
        let traj = simulate_reduced(ssm, &p0, ta, tb, opts.ode_tol * 1e-2, opts.nodes_per_segment)?;
        let lq = assemble_lq(weights, model, ssm, &traj, epsilon, &traj.times)?;
        let ric = solve_riccati(model, &lq)?;
        let ric = solve_compensation(model, &lq, &ric)?;
        let w_p0 = &lq.w_samples[0];
        let q0 = reduced_initial_condition(model, &fo.b, &z_curr, w_p0, epsilon)?.mapv(|c| c.re);
        let sol = closed_loop_simulate(model, &lq, &ric, &q0, epsilon)?;

        let z_full_seg = match opts.seed_mode {
            SeedMode::FullModel => Some(validate_full(
                fo,
                &sol.grid,
                &sol.u,
                &z_curr,
                ta,
                tb,
                opts.ode_tol,
                &sol.grid,
            )?),
            SeedMode::Predicted => None,
        };

        if let Some(zf) = &z_full_seg {
            rms_segments.push(rms_observable_error(&model.c_obs, zf, &sol.z_pred));
        }

        z_curr = match &z_full_seg {
            Some(zf) => zf[zf.len() - 1].clone(),
            None => sol.z_pred[sol.z_pred.len() - 1].clone(),
        };

        j_red_total += sol.metrics.objective_reduced;
        j_full_total += sol.metrics.objective;

        // Boundary nodes appear twice on continuation segments, carrying
        // the left and right limits: u and the re-anchored prediction jump
        // there while the full state is continuous. Keeping both rows lets
        // a replay of the stored signal reproduce the run exactly.
        grid_all.extend_from_slice(&sol.grid);
        u_all.extend_from_slice(&sol.u);
        q_all.extend_from_slice(&sol.q);
        zp_all.extend_from_slice(&sol.z_pred);
        if let Some(zf) = z_full_seg {
            zf_all.extend_from_slice(&zf);
        }
    }

    let have_full = !zf_all.is_empty();
    let rms = if have_full {
        Some(rms_observable_error(&model.c_obs, &zf_all, &zp_all))
    } else {
        None
    };
    let peak = if have_full {
        peak_amplitude(&model.c_obs, &zf_all)
    } else {
        peak_amplitude(&model.c_obs, &zp_all)
    };
    Ok(ControlSolution {
        grid: grid_all,
        u: u_all,
        q: q_all,
        z_pred: zp_all,
        z_full: if have_full { Some(zf_all) } else { None },
        segment_boundaries: edges,
        metrics: RunMetrics {
            objective_reduced: j_red_total,
            objective: j_full_total,
            rms_prediction_error: rms,
            rms_per_segment: rms_segments,
            peak_controlled_amplitude: peak,
        },
    })
}

fn rms_observable_error(
    c_obs: &Array2<f64>,
    z_full: &[Array1<f64>],
    z_pred: &[Array1<f64>],
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (zf, zp) in z_full.iter().zip(z_pred.iter()) {
        let d = c_obs.dot(&(zf - zp));
        acc += d.dot(&d);
        count += d.len();
    }
    (acc / count.max(1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Control signal CSV: t, u1, ..., uq.
pub fn control_csv(sol: &ControlSolution) -> String {
    let q = sol.u.first().map(|u| u.len()).unwrap_or(0);
    let mut s = String::from("t");
    for j in 0..q {
        s.push_str(&format!(",u{}", j + 1));
    }
    s.push('\n');
    for (t, u) in sol.grid.iter().zip(sol.u.iter()) {
        s.push_str(&format!("{t:.17e}"));
        for v in u.iter() {
            s.push_str(&format!(",{v:.17e}"));
        }
        s.push('\n');
    }
    s
}

/// Observable response CSV: t, predicted observables, full-model
/// observables when available.
pub fn response_csv(sol: &ControlSolution, c_obs: &Array2<f64>) -> String {
    let obs = c_obs.nrows();
    let mut s = String::from("t");
    for j in 0..obs {
        s.push_str(&format!(",y{}_pred", j + 1));
    }
    if sol.z_full.is_some() {
        for j in 0..obs {
            s.push_str(&format!(",y{}_full", j + 1));
        }
    }
    s.push('\n');
    for (i, t) in sol.grid.iter().enumerate() {
        s.push_str(&format!("{t:.17e}"));
        let yp = c_obs.dot(&sol.z_pred[i]);
        for v in yp.iter() {
            s.push_str(&format!(",{v:.17e}"));
        }
        if let Some(zf) = &sol.z_full {
            let yf = c_obs.dot(&zf[i]);
            for v in yf.iter() {
                s.push_str(&format!(",{v:.17e}"));
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::uniform_grid;
    use crate::linred::{build_reduced_linear, collocated_observation, realify};
    use crate::mechmodel::{
        build_oscillator_chain, to_first_order, ForcingChannel, ForcingSignal, Waveform,
    };
    use crate::spectral::{solve_modes, MasterSubspace, ModeOrdering};
    use crate::ssm::compute_autonomous_ssm;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    struct ChainRig {
        fo: FirstOrderSystem,
        ssm: SSMModel,
        model: ReducedLinearModel,
        weights: LQWeights,
        epsilon: f64,
    }

    fn chain_rig(forced: bool) -> ChainRig {
        let forcing = if forced {
            ForcingSignal {
                channels: vec![
                    ForcingChannel {
                        distribution: {
                            let mut d = vec![0.0; 10];
                            d[0] = 1.0;
                            d
                        },
                        amplitude: 1.0,
                        angular_frequency: 0.1 * std::f64::consts::SQRT_2,
                        phase: 0.0,
                        waveform: Waveform::Sine,
                    },
                    ForcingChannel {
                        distribution: {
                            let mut d = vec![0.0; 10];
                            d[4] = 1.0;
                            d
                        },
                        amplitude: 1.0,
                        angular_frequency: 0.1 * 3.0f64.sqrt(),
                        phase: 0.0,
                        waveform: Waveform::Cosine,
                    },
                ],
            }
        } else {
            ForcingSignal::empty()
        };
        let sys =
            build_oscillator_chain(10, 1.0, 1.0, 0.1, 0.5, &[1, 5], forcing, 0.001).unwrap();
        let fo = to_first_order(&sys).unwrap();
        let pairs = solve_modes(&fo, 10, ModeOrdering::ByFrequencyAscending).unwrap();
        let master = MasterSubspace::from_pairs(vec![pairs[0].clone()]).unwrap();
        let ssm = compute_autonomous_ssm(&fo, &master, 3, 0.05).unwrap();
        let c_obs = collocated_observation(&sys);
        let cm = build_reduced_linear(&pairs, &[0, 1, 2, 3, 4], &fo.bext, &fo.forcing, &c_obs)
            .unwrap();
        let model = realify(&cm).unwrap();
        let mut q = Array2::zeros((20, 20));
        for i in 0..10 {
            q[(i, i)] = 1e5;
        }
        let weights = LQWeights::new(q, Array2::eye(2) * 0.05, Array2::zeros((20, 20))).unwrap();
        ChainRig {
            fo,
            ssm,
            model,
            weights,
            epsilon: 0.001,
        }
    }

    fn chain_lq(rig: &ChainRig, t0: f64, t1: f64, nodes: usize) -> (LQData, Array1<f64>) {
        let p0 = Array1::from_vec(vec![crate::C64::new(2.5, 0.0), crate::C64::new(2.5, 0.0)]);
        let traj = simulate_reduced(&rig.ssm, &p0, t0, t1, 1e-10, nodes).unwrap();
        let lq = assemble_lq(
            &rig.weights,
            &rig.model,
            &rig.ssm,
            &traj,
            rig.epsilon,
            &traj.times,
        )
        .unwrap();
        let z0 = eval_parameterization(&rig.ssm, traj.samples[0].as_slice().unwrap()).unwrap();
        let q0 = reduced_initial_condition(&rig.model, &rig.fo.b, &z0, &lq.w_samples[0], rig.epsilon)
            .unwrap()
            .mapv(|c| c.re);
        (lq, q0)
    }

    #[test]
    fn weights_validation() {
        assert!(LQWeights::new(Array2::eye(4), Array2::eye(2), Array2::zeros((4, 4))).is_ok());
        // non-symmetric Q
        let mut q = Array2::eye(4);
        q[(0, 1)] = 1.0;
        assert!(LQWeights::new(q, Array2::eye(2), Array2::zeros((4, 4))).is_err());
        // indefinite R
        assert!(
            LQWeights::new(Array2::eye(4), Array2::eye(2) * -1.0, Array2::zeros((4, 4))).is_err()
        );
        // negative eigenvalue in Q
        let mut q = Array2::eye(4);
        q[(2, 2)] = -0.5;
        assert!(LQWeights::new(q, Array2::eye(2), Array2::zeros((4, 4))).is_err());
    }

    #[test]
    fn assemble_zero_terminal_weight() {
        let rig = chain_rig(false);
        let (lq, _) = chain_lq(&rig, 0.0, 10.0, 100);
        assert_eq!(lq.m2.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        assert_eq!(lq.bm_t1.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        assert_eq!(lq.a_terminal, 0.0);
    }

    #[test]
    fn assemble_zero_reference_reduces_to_plain_lqr_data() {
        let rig = chain_rig(false);
        let zero = Array1::from_vec(vec![crate::C64::new(0.0, 0.0); 2]);
        let traj = simulate_reduced(&rig.ssm, &zero, 0.0, 5.0, 1e-9, 50).unwrap();
        let lq = assemble_lq(
            &rig.weights,
            &rig.model,
            &rig.ssm,
            &traj,
            rig.epsilon,
            &traj.times,
        )
        .unwrap();
        for bq in &lq.bq {
            assert_eq!(bq.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        }
        for a in &lq.a_running {
            assert_eq!(*a, 0.0);
        }
    }

    #[test]
    fn grid_outside_span_rejected() {
        let rig = chain_rig(false);
        let p0 = Array1::from_vec(vec![crate::C64::new(1.0, 0.0), crate::C64::new(1.0, 0.0)]);
        let traj = simulate_reduced(&rig.ssm, &p0, 0.0, 5.0, 1e-9, 50).unwrap();
        let bad_grid = uniform_grid(0.0, 6.0, 10);
        assert!(assemble_lq(
            &rig.weights,
            &rig.model,
            &rig.ssm,
            &traj,
            rig.epsilon,
            &bad_grid
        )
        .is_err());
    }

    #[test]
    fn reduced_objective_matches_full_quadrature() {
        // J of the full running cost z'Qz + u'Ru equals Jtilde plus the
        // dropped a(t) terms, evaluated on the same grid by the same rule.
        let rig = chain_rig(true);
        let (lq, q0) = chain_lq(&rig, 0.0, 8.0, 400);
        // arbitrary fixed control signal
        let u: Vec<Array1<f64>> = lq
            .grid
            .iter()
            .map(|&t| array![0.3 * (0.7 * t).sin(), -0.2 * (0.3 * t).cos()])
            .collect();
        let q = simulate_with_control(&rig.model, &lq, &u, &q0).unwrap();
        let (_j_red, j_full) = evaluate_objective(&lq, &q, &u);

        // direct quadrature of z' Q z + u' R u with z = W(p) + eps V q
        let (_, _, _, v_r) = rig.model.real_parts().unwrap();
        let n = lq.grid.len();
        let mut acc = 0.0;
        for i in 0..n {
            let z = &lq.w_samples[i] + &(v_r.dot(&q[i]) * rig.epsilon);
            let val = z.dot(&rig.weights.q.dot(&z)) + u[i].dot(&rig.weights.r_hat.dot(&u[i]));
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * val;
        }
        acc *= lq.step();
        let z1 = &lq.w_samples[n - 1] + &(v_r.dot(&q[n - 1]) * rig.epsilon);
        acc += z1.dot(&rig.weights.m_hat.dot(&z1));
        assert_relative_eq!(j_full, acc, max_relative = 1e-10);
    }

    #[test]
    fn riccati_zero_data_gives_zero_solution() {
        let rig = chain_rig(false);
        let (mut lq, _) = chain_lq(&rig, 0.0, 10.0, 200);
        lq.q2.fill(0.0);
        lq.m2.fill(0.0);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        for p in &ric.p {
            assert_eq!(p.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn scalar_riccati_matches_tanh_closed_form() {
        // lambda = -1, B = 1, R = 1, Q2 = 1, M2 = 0, horizon 10.
        // P' = -2 lambda P - Q2 + P^2, roots of p^2 - 2 lambda p - q2:
        // p+- = lambda +- beta, beta = sqrt(lambda^2 + q2).
        // w = (P - p+)/(P - p-) satisfies w(t) = w(T) exp(2 beta (t - T)).
        let model = scalar_model(-1.0);
        let lam = -1.0f64;
        let q2 = 1.0;
        let beta = (lam * lam + q2).sqrt();
        let pp = lam + beta;
        let pm = lam - beta;
        let horizon = 10.0;
        let grid = uniform_grid(0.0, horizon, 500);
        let lq = constant_lq(&grid, q2, 0.0, 0.0, 0.0, 1.0);
        let ric = solve_riccati(&model, &lq).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let w = (pp / pm) * (2.0 * beta * (t - horizon)).exp();
            let expect = (pp - pm * w) / (1.0 - w);
            assert_relative_eq!(ric.p[i][(0, 0)], expect, epsilon = 1e-7);
        }
    }

    #[test]
    fn long_horizon_riccati_approaches_algebraic_solution() {
        // 2-state instance; ARE oracle via the Hamiltonian eigenvectors.
        let model = two_state_model();
        let (lam, b_hat, _, _) = model.real_parts().unwrap();
        let q2 = array![[2.0, 0.3], [0.3, 1.0]];
        let r = array![[0.5]];
        let grid = uniform_grid(0.0, 60.0, 3000);
        let lq = LQData {
            grid: grid.clone(),
            q2: q2.clone(),
            r_hat: r.clone(),
            m2: Array2::zeros((2, 2)),
            bq: vec![Array1::zeros(2); grid.len()],
            bm_t1: Array1::zeros(2),
            b: vec![Array1::zeros(2); grid.len()],
            a_running: vec![0.0; grid.len()],
            a_terminal: 0.0,
            w_samples: vec![Array1::zeros(4); grid.len()],
        };
        let ric = solve_riccati(&model, &lq).unwrap();
        let p0 = &ric.p[0];

        // Hamiltonian H = [[L, -B R^-1 B'], [-Q2, -L']]
        let brb = {
            let rinv = 1.0 / r[(0, 0)];
            let b = b_hat.column(0).to_owned();
            let mut m = Array2::zeros((2, 2));
            for i in 0..2 {
                for j in 0..2 {
                    m[(i, j)] = b[i] * b[j] * rinv;
                }
            }
            m
        };
        let mut ham = Array2::zeros((4, 4));
        for i in 0..2 {
            for j in 0..2 {
                ham[(i, j)] = lam[(i, j)];
                ham[(i, j + 2)] = -brb[(i, j)];
                ham[(i + 2, j)] = -q2[(i, j)];
                ham[(i + 2, j + 2)] = -lam[(j, i)];
            }
        }
        use ndarray_linalg::Eig;
        let (vals, vecs) = ham.eig().unwrap();
        let mut x1 = Array2::from_elem((2, 2), crate::C64::new(0.0, 0.0));
        let mut x2 = Array2::from_elem((2, 2), crate::C64::new(0.0, 0.0));
        let mut col = 0;
        for (j, v) in vals.iter().enumerate() {
            if v.re < 0.0 {
                for i in 0..2 {
                    x1[(i, col)] = vecs[(i, j)];
                    x2[(i, col)] = vecs[(i + 2, j)];
                }
                col += 1;
            }
        }
        assert_eq!(col, 2);
        // P = X2 X1^{-1}
        let mut p_are = Array2::zeros((2, 2));
        let x1_inv = {
            use ndarray_linalg::Inverse;
            x1.inv().unwrap()
        };
        let p_c = x2.dot(&x1_inv);
        for i in 0..2 {
            for j in 0..2 {
                p_are[(i, j)] = p_c[(i, j)].re;
                assert!(p_c[(i, j)].im.abs() < 1e-9);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(p0[(i, j)], p_are[(i, j)], epsilon = 1e-6);
            }
        }
    }

    fn scalar_model(lam: f64) -> ReducedLinearModel {
        ReducedLinearModel {
            l: 1,
            dim: 1,
            selected_lambdas: vec![crate::C64::new(lam, 0.0)],
            lambda: Array2::from_elem((1, 1), crate::C64::new(lam, 0.0)),
            b_hat: Array2::from_elem((1, 1), crate::C64::new(1.0, 0.0)),
            u_hat: Array2::from_elem((2, 1), crate::C64::new(1.0, 0.0)),
            v_hat: Array2::from_elem((2, 1), crate::C64::new(1.0, 0.0)),
            c_obs: Array2::eye(2),
            forcing: ForcingSignal::empty(),
            realified: true,
        }
    }

    fn two_state_model() -> ReducedLinearModel {
        let lam = array![[-0.1, 1.2], [-1.2, -0.1]];
        let b = array![[0.7], [-0.4]];
        ReducedLinearModel {
            l: 1,
            dim: 2,
            selected_lambdas: vec![crate::C64::new(-0.1, 1.2)],
            lambda: lam.mapv(|x| crate::C64::new(x, 0.0)),
            b_hat: b.mapv(|x| crate::C64::new(x, 0.0)),
            u_hat: Array2::from_elem((4, 2), crate::C64::new(0.5, 0.0)),
            v_hat: Array2::from_elem((4, 2), crate::C64::new(0.5, 0.0)),
            c_obs: Array2::eye(4),
            forcing: ForcingSignal::empty(),
            realified: true,
        }
    }

    fn constant_lq(
        grid: &[f64],
        q2: f64,
        bq: f64,
        b: f64,
        bm: f64,
        r: f64,
    ) -> LQData {
        LQData {
            grid: grid.to_vec(),
            q2: Array2::from_elem((1, 1), q2),
            r_hat: Array2::from_elem((1, 1), r),
            m2: Array2::zeros((1, 1)),
            bq: vec![Array1::from_elem(1, bq); grid.len()],
            bm_t1: Array1::from_elem(1, bm),
            b: vec![Array1::from_elem(1, b); grid.len()],
            a_running: vec![0.0; grid.len()],
            a_terminal: 0.0,
            w_samples: vec![Array1::zeros(2); grid.len()],
        }
    }

    #[test]
    fn riccati_residual_central_difference() {
        // Interior central differences reproduce the Riccati right side to
        // O(h^2); halving the step quarters the error.
        let rig = chain_rig(false);
        let errs: Vec<f64> = [400usize, 800]
            .iter()
            .map(|&nodes| {
                let (lq, _) = chain_lq(&rig, 0.0, 10.0, nodes);
                let ric = solve_riccati(&rig.model, &lq).unwrap();
                let (lam, _, _, _) = rig.model.real_parts().unwrap();
                let (_, brb) = gain_matrices(&rig.model, &lq.r_hat).unwrap();
                let h = lq.step();
                let mut worst: f64 = 0.0;
                for i in 1..lq.grid.len() - 1 {
                    let dp_fd = (&ric.p[i + 1] - &ric.p[i - 1]) / (2.0 * h);
                    let p = &ric.p[i];
                    let pl = p.dot(&lam);
                    let rhs = -&pl - pl.t() - &lq.q2 + p.dot(&brb).dot(p);
                    let num = (&dp_fd - &rhs).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let den = rhs.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    worst = worst.max(num / den);
                }
                worst
            })
            .collect();
        assert!(errs[0] <= 1e-3, "coarse-grid residual {} > 1e-3", errs[0]);
        let ratio = errs[0] / errs[1];
        assert!(
            (2.5..6.0).contains(&ratio),
            "halving the step gave ratio {ratio}, want about 4"
        );
    }

    #[test]
    fn indefinite_data_reports_finite_escape() {
        // negative Q2 drives the scalar Riccati solution to -infinity in
        // finite backward time
        let model = scalar_model(-0.2);
        let grid = uniform_grid(0.0, 50.0, 500);
        let mut lq = constant_lq(&grid, 0.0, 0.0, 0.0, 0.0, 1.0);
        lq.q2[(0, 0)] = -4.0;
        match solve_riccati(&model, &lq) {
            Err(crate::Error::RiccatiEscape(t)) => {
                assert!(t.is_finite());
                assert!(t > 0.0 && t < 50.0, "escape time {t}");
            }
            Ok(_) => panic!("expected finite escape"),
            Err(other) => panic!("expected escape error, got {other}"),
        }
    }

    #[test]
    fn zero_epsilon_rejected_for_initial_condition() {
        let rig = chain_rig(false);
        let z = Array1::zeros(20);
        assert!(crate::linred::reduced_initial_condition(&rig.model, &rig.fo.b, &z, &z, 0.0)
            .is_err());
    }

    #[test]
    fn receding_rejects_bad_boundaries() {
        let rig = chain_rig(false);
        let z0 = Array1::zeros(20);
        let opts = RecedingOptions {
            nodes_per_segment: 50,
            seed_mode: SeedMode::Predicted,
            ode_tol: 1e-8,
        };
        for bad in [vec![-1.0], vec![10.0], vec![5.0, 3.0]] {
            assert!(receding_horizon(
                &rig.fo, &rig.ssm, &rig.model, &rig.weights, &z0, 0.0, 10.0, &bad,
                rig.epsilon, &opts,
            )
            .is_err());
        }
    }

    #[test]
    fn riccati_symmetry_and_terminal_condition() {
        let rig = chain_rig(false);
        let (lq, _) = chain_lq(&rig, 0.0, 20.0, 500);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        for p in &ric.p {
            let scale = p.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
            let asym = (p - &p.t()).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(asym <= 1e-10 * scale);
        }
        assert_eq!(ric.p[ric.p.len() - 1], lq.m2);
    }

    #[test]
    fn compensation_zero_data_gives_zero() {
        let rig = chain_rig(false);
        let (mut lq, _) = chain_lq(&rig, 0.0, 10.0, 200);
        for v in lq.bq.iter_mut() {
            v.fill(0.0);
        }
        for v in lq.b.iter_mut() {
            v.fill(0.0);
        }
        lq.bm_t1.fill(0.0);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        for s in &ric.s {
            assert!(s.iter().map(|x| x.abs()).sum::<f64>() < 1e-12);
        }
    }

    #[test]
    fn scalar_compensation_matches_closed_form() {
        // P = 0 (Q2 = 0, M2 = 0): s' = -lambda s + bq, s(T) = -bm.
        // Solution: s(t) = (s(T) - bq/lambda) e^{-lambda (t - T)} + bq/lambda.
        let lam = -0.8;
        let bq = 0.6;
        let bm = 0.25;
        let model = scalar_model(lam);
        let grid = uniform_grid(0.0, 12.0, 600);
        let mut lq = constant_lq(&grid, 0.0, bq, 0.0, bm, 1.0);
        lq.bm_t1 = Array1::from_elem(1, bm);
        let ric = solve_riccati(&model, &lq).unwrap();
        let ric = solve_compensation(&model, &lq, &ric).unwrap();
        let t_end = 12.0;
        let s_t = -bm;
        for (i, &t) in grid.iter().enumerate() {
            let expect = (s_t - bq / lam) * (-lam * (t - t_end)).exp() + bq / lam;
            assert_relative_eq!(ric.s[i][0], expect, epsilon = 1e-7);
        }
    }

    #[test]
    fn chain_compensation_bounded_under_forcing() {
        let rig = chain_rig(true);
        let (lq, _) = chain_lq(&rig, 0.0, 100.0, 2000);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let mut max_s: f64 = 0.0;
        let mut nonzero = false;
        for s in &ric.s {
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n.is_finite());
            max_s = max_s.max(n);
            nonzero |= n > 1e-12;
        }
        assert!(nonzero, "compensation should be nonzero under forcing");
        assert!(max_s < 1e6, "compensation blew up: {max_s}");
    }

    #[test]
    fn control_input_zero_state_zero_compensation() {
        let rig = chain_rig(false);
        let (lq, _) = chain_lq(&rig, 0.0, 10.0, 100);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let q = Array1::zeros(10);
        let u = control_input(&rig.model, &ric, &lq, &q, 5.0).unwrap();
        assert_eq!(u.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        assert!(control_input(&rig.model, &ric, &lq, &q, 11.0).is_err());
    }

    #[test]
    fn closed_loop_coast_stays_on_manifold() {
        let rig = chain_rig(false); // no external forcing
        let (mut lq, _) = chain_lq(&rig, 0.0, 10.0, 200);
        // remove the tracking incentive: bq = 0 like a pure-coast scenario
        for v in lq.bq.iter_mut() {
            v.fill(0.0);
        }
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let q0 = Array1::zeros(10);
        let sol = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();
        for (i, q) in sol.q.iter().enumerate() {
            assert!(q.iter().map(|x| x.abs()).sum::<f64>() < 1e-10);
            assert!(sol.u[i].iter().map(|x| x.abs()).sum::<f64>() < 1e-10);
            let diff = (&sol.z_pred[i] - &lq.w_samples[i])
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn optimal_control_beats_perturbations() {
        // Moderate weights keep the objective Hessian comparable to the
        // O(h^2) interpolation bias floor, so convexity is observable.
        let base = chain_rig(true);
        let mut q = Array2::zeros((20, 20));
        for i in 0..10 {
            q[(i, i)] = 1.0;
        }
        let weights = LQWeights::new(q, Array2::eye(2), Array2::zeros((20, 20))).unwrap();
        let rig = ChainRig { weights, ..base };
        let (lq, q0) = chain_lq(&rig, 0.0, 10.0, 2000);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let sol = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();
        let (j_star, _) = evaluate_objective(&lq, &sol.q, &sol.u);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let delta = 0.5;
            let omega = rng.gen_range(0.05..2.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let weight: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pert: Vec<Array1<f64>> = sol
                .u
                .iter()
                .zip(lq.grid.iter())
                .map(|(u, &t)| {
                    u + &Array1::from_shape_fn(u.len(), |j| {
                        delta * weight[j] * (omega * t + phase).sin()
                    })
                })
                .collect();
            let q_pert = simulate_with_control(&rig.model, &lq, &pert, &q0).unwrap();
            let (j_pert, _) = evaluate_objective(&lq, &q_pert, &pert);
            assert!(
                j_pert >= j_star - 1e-9 * j_star.abs().max(1.0),
                "trial {trial}: perturbed objective {j_pert} < optimal {j_star}"
            );
        }
    }

    #[test]
    fn first_order_stationarity_vanishes_at_grid_order() {
        // The discrete gradient of Jtilde at the computed optimum comes
        // from the piecewise-linear interpolation of P, s, b_Q, b between
        // design nodes and must vanish at O(step^2): halving the step
        // shrinks the Richardson-extrapolated directional derivative by
        // about four.
        let rig = chain_rig(true);
        let gradient_at = |nodes: usize| -> f64 {
            let (lq, q0) = chain_lq(&rig, 0.0, 5.0, nodes);
            let ric = solve_riccati(&rig.model, &lq).unwrap();
            let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
            let sol = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();
            let (j_star, _) = evaluate_objective(&lq, &sol.q, &sol.u);
            let eta: Vec<Array1<f64>> = lq
                .grid
                .iter()
                .map(|&t| Array1::from_shape_fn(2, |j| (0.8 * t + 0.9 * j as f64).sin()))
                .collect();
            let g = |d: f64| -> f64 {
                let pert: Vec<Array1<f64>> = sol
                    .u
                    .iter()
                    .zip(eta.iter())
                    .map(|(u, e)| u + &(e * d))
                    .collect();
                let q_pert = simulate_with_control(&rig.model, &lq, &pert, &q0).unwrap();
                let (j_pert, _) = evaluate_objective(&lq, &q_pert, &pert);
                (j_pert - j_star) / d
            };
            // g(d) = G + C d; extrapolate the directional derivative G
            let g1 = g(1e-1);
            let g2 = g(1e-2);
            (10.0 * g2 - g1) / 9.0
        };
        let g_coarse = gradient_at(500);
        let g_fine = gradient_at(1000);
        let ratio = (g_coarse / g_fine).abs();
        assert!(
            (2.5..6.5).contains(&ratio),
            "gradient must shrink at O(h^2): coarse {g_coarse}, fine {g_fine}, ratio {ratio}"
        );
    }

    #[test]
    fn classical_lqr_recovered_when_affine_terms_vanish() {
        // Independent classical finite-horizon LQR: fixed-step RK4 sweep of
        // the textbook Riccati equation, then the same closed loop.
        let rig = chain_rig(false);
        let (mut lq, _) = chain_lq(&rig, 0.0, 10.0, 2000);
        for v in lq.bq.iter_mut() {
            v.fill(0.0);
        }
        for v in lq.b.iter_mut() {
            v.fill(0.0);
        }
        lq.bm_t1.fill(0.0);
        let q0 = Array1::from_shape_fn(10, |i| 0.2 * ((i + 1) as f64 * 0.7).sin());
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let sol = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();

        // oracle sweep
        let (lam, b_hat, _, _) = rig.model.real_parts().unwrap();
        let (rinv_bt, brb) = gain_matrices(&rig.model, &lq.r_hat).unwrap();
        let steps = 40_000usize;
        let h = 10.0 / steps as f64;
        let mut p = Array2::<f64>::zeros((10, 10));
        let mut p_store = vec![p.clone(); steps + 1];
        let f = |p: &Array2<f64>| -> Array2<f64> {
            let pl = p.dot(&lam);
            -&pl - pl.t() - &lq.q2 + p.dot(&brb).dot(p)
        };
        for k in (0..steps).rev() {
            // RK4 backward step from t_{k+1} to t_k
            let k1 = f(&p);
            let k2 = f(&(&p - &(&k1 * (h / 2.0))));
            let k3 = f(&(&p - &(&k2 * (h / 2.0))));
            let k4 = f(&(&p - &(&k3 * h)));
            p = &p - &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
            p_store[k] = p.clone();
        }
        // The classical law is u = -R^{-1} B' P(t) q: apply the oracle's
        // gain to our state samples so the comparison isolates the Riccati
        // sweeps from closed-loop trajectory drift. Normalize by the
        // control scale of the run (u -> 0 at the terminal since M2 = 0).
        let u_scale = sol
            .u
            .iter()
            .flat_map(|u| u.iter())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        let mut max_rel: f64 = 0.0;
        for (i, &t) in sol.grid.iter().enumerate() {
            let k = ((t / h).round() as usize).min(steps);
            let u_oracle = -rinv_bt.dot(&p_store[k].dot(&sol.q[i]));
            let diff = (&u_oracle - &sol.u[i])
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max);
            max_rel = max_rel.max(diff / u_scale);
        }
        assert!(
            max_rel <= 1e-6,
            "extended solver deviates from classical LQR by {max_rel}"
        );
    }

    #[test]
    fn physical_state_feedback_matches_reduced_feedback() {
        // measuring q back out of z = W(p) + eps V q through U* B recovers
        // the same control as the reduced-coordinate law
        let rig = chain_rig(true);
        let (lq, q0) = chain_lq(&rig, 0.0, 10.0, 400);
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let sol = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();
        for i in [0usize, 133, 399] {
            let t = sol.grid[i];
            let u_state = control_from_state(
                &rig.model,
                &ric,
                &lq,
                &rig.fo.b,
                &sol.z_pred[i],
                t,
                rig.epsilon,
            )
            .unwrap();
            for (a, b) in u_state.iter().zip(sol.u[i].iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn validate_full_zero_everything_stays_zero() {
        let rig = chain_rig(false);
        let grid = uniform_grid(0.0, 5.0, 50);
        let u = vec![Array1::zeros(2); grid.len()];
        let z0 = Array1::zeros(20);
        let out =
            validate_full(&rig.fo, &grid, &u, &z0, 0.0, 5.0, 1e-10, &grid).unwrap();
        for z in out {
            assert!(z.iter().map(|x| x.abs()).sum::<f64>() < 1e-12);
        }
    }

    #[test]
    fn nonlinear_free_decay_differs_from_linear_period() {
        // kappa = 0.5 vs kappa = 0: the cubic stiffening shifts the
        // oscillation frequency at the 2.0 amplitude scale.
        let nonlinear = chain_rig(false);
        let linear_sys =
            build_oscillator_chain(10, 1.0, 1.0, 0.1, 0.0, &[1, 5], ForcingSignal::empty(), 0.001)
                .unwrap();
        let fo_lin = to_first_order(&linear_sys).unwrap();

        let p0 = Array1::from_vec(vec![crate::C64::new(2.5, 0.0), crate::C64::new(2.5, 0.0)]);
        let z0 = eval_parameterization(
            &nonlinear.ssm,
            p0.as_slice().unwrap(),
        )
        .unwrap();
        let grid = uniform_grid(0.0, 60.0, 3000);
        let u = vec![Array1::zeros(2); grid.len()];
        let z_nl =
            validate_full(&nonlinear.fo, &grid, &u, &z0, 0.0, 60.0, 1e-9, &grid).unwrap();
        let z_li = validate_full(&fo_lin, &grid, &u, &z0, 0.0, 60.0, 1e-9, &grid).unwrap();

        // count zero crossings of x5 as a frequency proxy
        let crossings = |traj: &[Array1<f64>]| -> usize {
            let mut c = 0;
            for w in traj.windows(2) {
                if w[0][4] * w[1][4] < 0.0 {
                    c += 1;
                }
            }
            c
        };
        let c_nl = crossings(&z_nl);
        let c_li = crossings(&z_li);
        assert!(
            c_nl > c_li,
            "hardening spring should raise the crossing count: {c_nl} vs {c_li}"
        );
    }

    #[test]
    fn conservative_chain_preserves_energy() {
        // undamped, unforced, kappa > 0: mechanical energy is conserved
        let sys =
            build_oscillator_chain(6, 1.0, 1.0, 0.0, 0.5, &[1], ForcingSignal::empty(), 0.0)
                .unwrap();
        let fo = to_first_order(&sys).unwrap();
        let energy = |z: &Array1<f64>| -> f64 {
            let n = 6;
            let x = z.slice(ndarray::s![..n]).to_owned();
            let v = z.slice(ndarray::s![n..]).to_owned();
            let kinetic = 0.5 * v.dot(&sys.mass.dot(&v));
            let elastic = 0.5 * x.dot(&sys.stiffness.dot(&x));
            let mut quartic = 0.0;
            for i in 0..=n {
                let e = if i == 0 {
                    x[0]
                } else if i == n {
                    -x[n - 1]
                } else {
                    x[i] - x[i - 1]
                };
                quartic += 0.125 * e.powi(4); // kappa/4 with kappa = 0.5
            }
            kinetic + elastic + quartic
        };
        let mut z0 = Array1::zeros(12);
        z0[2] = 0.8;
        z0[9] = -0.3;
        let grid = uniform_grid(0.0, 30.0, 100);
        let u = vec![Array1::zeros(1); grid.len()];
        let traj = validate_full(&fo, &grid, &u, &z0, 0.0, 30.0, 1e-11, &grid).unwrap();
        let e0 = energy(&z0);
        for z in &traj {
            assert_relative_eq!(energy(z), e0, max_relative = 1e-8);
        }
    }

    #[test]
    fn receding_single_segment_equals_plain_pipeline() {
        let rig = chain_rig(true);
        let p0 = Array1::from_vec(vec![crate::C64::new(2.5, 0.0), crate::C64::new(2.5, 0.0)]);
        let z0 = eval_parameterization(&rig.ssm, p0.as_slice().unwrap()).unwrap();
        let opts = RecedingOptions {
            nodes_per_segment: 500,
            seed_mode: SeedMode::Predicted,
            ode_tol: 1e-9,
        };
        let one = receding_horizon(
            &rig.fo,
            &rig.ssm,
            &rig.model,
            &rig.weights,
            &z0,
            0.0,
            10.0,
            &[],
            rig.epsilon,
            &opts,
        )
        .unwrap();
        // plain pipeline
        let traj = simulate_reduced(&rig.ssm, &project_to_master(&rig.ssm.master, &rig.fo.b, &z0).unwrap(), 0.0, 10.0, 1e-11, 500).unwrap();
        let lq = assemble_lq(&rig.weights, &rig.model, &rig.ssm, &traj, rig.epsilon, &traj.times)
            .unwrap();
        let ric = solve_riccati(&rig.model, &lq).unwrap();
        let ric = solve_compensation(&rig.model, &lq, &ric).unwrap();
        let q0 = reduced_initial_condition(&rig.model, &rig.fo.b, &z0, &lq.w_samples[0], rig.epsilon)
            .unwrap()
            .mapv(|c| c.re);
        let plain = closed_loop_simulate(&rig.model, &lq, &ric, &q0, rig.epsilon).unwrap();
        assert_eq!(one.grid.len(), plain.grid.len());
        let scale = plain
            .u
            .iter()
            .flat_map(|u| u.iter())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        for (a, b) in one.u.iter().zip(plain.u.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn receding_state_continuous_control_may_jump() {
        let rig = chain_rig(true);
        let p0 = Array1::from_vec(vec![crate::C64::new(2.5, 0.0), crate::C64::new(2.5, 0.0)]);
        let z0 = eval_parameterization(&rig.ssm, p0.as_slice().unwrap()).unwrap();
        let opts = RecedingOptions {
            nodes_per_segment: 400,
            seed_mode: SeedMode::FullModel,
            ode_tol: 1e-8,
        };
        let sol = receding_horizon(
            &rig.fo,
            &rig.ssm,
            &rig.model,
            &rig.weights,
            &z0,
            0.0,
            30.0,
            &[10.0],
            rig.epsilon,
            &opts,
        )
        .unwrap();
        let zf = sol.z_full.as_ref().unwrap();
        assert_eq!(sol.grid.len(), zf.len());
        // the boundary node appears twice: left and right limits
        let idx = sol
            .grid
            .iter()
            .position(|&t| (t - 10.0).abs() < 1e-9)
            .unwrap();
        assert!((sol.grid[idx + 1] - 10.0).abs() < 1e-9, "duplicate boundary row expected");
        // the full state is continuous across the boundary by construction
        let dz = (&zf[idx + 1] - &zf[idx])
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        let du = (&sol.u[idx + 1] - &sol.u[idx])
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(dz < 1e-12, "state jump {dz} at the boundary");
        // control is allowed to jump at the boundary; with re-anchoring it does
        assert!(du > 1e-6, "expected a control correction at the boundary");
        assert!(sol.metrics.rms_prediction_error.is_some());
    }
}
