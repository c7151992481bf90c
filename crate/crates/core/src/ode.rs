//! Adaptive Dormand-Prince 5(4) integrator with dense output.
//!
//! One integrator serves every sweep in the crate: reduced-dynamics
//! simulation, backward Riccati and compensation sweeps, closed-loop runs
//! and full-model validation. Dense output uses the classical fourth-order
//! continuous extension of the DOPRI5 pair, so trajectories can be
//! resampled onto an arbitrary output grid without re-stepping.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Butcher tableau of the Dormand-Prince 5(4) pair.
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
/// Fifth-order weights (row 7 of A by the FSAL property).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Embedded fourth-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
/// Dense-output coefficients (Hairer/Norsett/Wanner DOPRI5 interpolant).
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Integration options.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub h_max: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-11,
            max_steps: 10_000_000,
            h_max: None,
        }
    }
}

/// One accepted step with everything needed for dense evaluation inside it.
struct DenseSegment {
    t0: f64,
    h: f64,
    cont: [Array1<f64>; 5],
}

impl DenseSegment {
    /// Evaluate the quartic interpolant at `t` in [t0, t0+h].
    fn eval(&self, t: f64) -> Array1<f64> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        // cont1 + s*(cont2 + s1*(cont3 + s*(cont4 + s1*cont5)))
        let mut acc = self.cont[4].clone();
        acc *= s1;
        acc += &self.cont[3];
        acc *= s;
        acc += &self.cont[2];
        acc *= s1;
        acc += &self.cont[1];
        acc *= s;
        acc += &self.cont[0];
        acc
    }
}

/// Integrate dy/dt = f(t, y) from `t0` to `t1` (requires t1 > t0) and return
/// the solution sampled at the strictly increasing `t_out` grid, which must
/// lie within [t0, t1].
pub fn integrate<F>(
    f: &F,
    t0: f64,
    t1: f64,
    y0: &Array1<f64>,
    t_out: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Array1<f64>>>
where
    F: Fn(f64, ArrayView1<f64>, &mut Array1<f64>),
{
    if t1 <= t0 {
        return Err(Error::Invalid(format!(
            "integration span must be forward: t0 = {t0}, t1 = {t1}"
        )));
    }
    if let Some(&first) = t_out.first() {
        let last = *t_out.last().unwrap();
        if first < t0 - 1e-12 || last > t1 + 1e-12 {
            return Err(Error::Invalid(
                "output grid outside integration span".to_string(),
            ));
        }
    }

    let dim = y0.len();
    let mut y = y0.clone();
    let mut t = t0;
    let mut k: Vec<Array1<f64>> = (0..7).map(|_| Array1::zeros(dim)).collect();
    f(t, y.view(), &mut k[0]);

    let span = t1 - t0;
    let h_max = opts.h_max.unwrap_or(span);
    let mut h = initial_step(f, t, &y, &k[0], opts).min(h_max).min(span);

    let mut out: Vec<Array1<f64>> = Vec::with_capacity(t_out.len());
    let mut out_idx = 0;
    // Emit samples at exactly t0 before stepping.
    while out_idx < t_out.len() && t_out[out_idx] <= t0 + 1e-14 * span.abs() {
        out.push(y.clone());
        out_idx += 1;
    }

    let mut y_stage = Array1::zeros(dim);
    let mut steps = 0usize;
    while t < t1 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::MaxStepsExceeded(t));
        }
        if h < 1e-14 * span {
            return Err(Error::StepSizeCollapse(t));
        }
        if t + h > t1 {
            h = t1 - t;
        }

        for i in 1..7 {
            y_stage.assign(&y);
            for (j, kj) in k.iter().enumerate().take(i) {
                if A[i][j] != 0.0 {
                    y_stage.scaled_add(h * A[i][j], kj);
                }
            }
            let (_, tail) = k.split_at_mut(i);
            f(t + C[i] * h, y_stage.view(), &mut tail[0]);
        }

        // k[6] is f at the fifth-order solution (FSAL): stage 7 used y1.
        let mut y5 = y.clone();
        for (i, ki) in k.iter().enumerate() {
            if B5[i] != 0.0 {
                y5.scaled_add(h * B5[i], ki);
            }
        }

        // Error estimate against the embedded fourth-order solution.
        let mut err_norm: f64 = 0.0;
        for r in 0..dim {
            let mut e = 0.0;
            for (i, ki) in k.iter().enumerate() {
                e += h * (B5[i] - B4[i]) * ki[r];
            }
            let sc = opts.atol + opts.rtol * y[r].abs().max(y5[r].abs());
            err_norm += (e / sc) * (e / sc);
        }
        err_norm = (err_norm / dim as f64).sqrt();

        if !err_norm.is_finite() {
            return Err(Error::StepSizeCollapse(t));
        }

        if err_norm <= 1.0 {
            // Accepted: build the dense segment and emit due samples.
            let ydiff = &y5 - &y;
            let bspl = &k[0] * h - &ydiff;
            let mut cont5 = Array1::<f64>::zeros(dim);
            for (i, ki) in k.iter().enumerate() {
                if D[i] != 0.0 {
                    cont5.scaled_add(h * D[i], ki);
                }
            }
            let seg = DenseSegment {
                t0: t,
                h,
                cont: [
                    y.clone(),
                    ydiff.clone(),
                    bspl.clone(),
                    &ydiff - &(&k[6] * h) - &bspl,
                    cont5,
                ],
            };
            let t_new = t + h;
            while out_idx < t_out.len() && t_out[out_idx] <= t_new + 1e-14 * span {
                out.push(seg.eval(t_out[out_idx].min(t_new)));
                out_idx += 1;
            }

            t = t_new;
            y = y5;
            k.swap(0, 6); // FSAL
            let fac = (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0);
            h = (h * fac).min(h_max);
        } else {
            let fac = (0.9 * err_norm.powf(-0.2)).clamp(0.2, 1.0);
            h *= fac;
        }
    }

    // Anything left on the grid maps to the final state (grid end == t1).
    while out_idx < t_out.len() {
        out.push(y.clone());
        out_idx += 1;
    }
    Ok(out)
}

/// Convenience: integrate and return only the final state.
pub fn integrate_to<F>(
    f: &F,
    t0: f64,
    t1: f64,
    y0: &Array1<f64>,
    opts: &OdeOptions,
) -> Result<Array1<f64>>
where
    F: Fn(f64, ArrayView1<f64>, &mut Array1<f64>),
{
    let out = integrate(f, t0, t1, y0, &[t1], opts)?;
    Ok(out.into_iter().next_back().unwrap())
}

/// Crude initial step from the scale of y and f (Hairer's heuristic, short form).
fn initial_step<F>(f: &F, t0: f64, y0: &Array1<f64>, f0: &Array1<f64>, opts: &OdeOptions) -> f64
where
    F: Fn(f64, ArrayView1<f64>, &mut Array1<f64>),
{
    let d0 = weighted_norm(y0, y0, opts);
    let d1 = weighted_norm(f0, y0, opts);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = y0 + &(f0 * h0);
    let mut f1 = Array1::zeros(y0.len());
    f(t0 + h0, y1.view(), &mut f1);
    let d2 = weighted_norm(&(&f1 - f0), y0, opts) / h0;
    let h1 = if d1.max(d2) < 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

fn weighted_norm(v: &Array1<f64>, y_ref: &Array1<f64>, opts: &OdeOptions) -> f64 {
    let n = v.len() as f64;
    let mut acc = 0.0;
    for (vi, yi) in v.iter().zip(y_ref.iter()) {
        let sc = opts.atol + opts.rtol * yi.abs();
        acc += (vi / sc) * (vi / sc);
    }
    (acc / n).sqrt()
}

/// Uniform grid of `n + 1` nodes over [t0, t1].
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let h = (t1 - t0) / n as f64;
    (0..=n)
        .map(|i| if i == n { t1 } else { t0 + i as f64 * h })
        .collect()
}
