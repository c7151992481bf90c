//! Autonomous SSM computation by the parameterization method.
//!
//! The manifold map W(p) and reduced field R(p) are solved order by order
//! from the invariance equation B DW(p) R(p) = A W(p) + F(W(p)). At each
//! total degree the coefficient of p^k satisfies
//!
//!   (A - (k.lambda) B) W_k - B V_E R_k = B C_k - [F o W]_k
//!
//! where C_k collects lower-order cross terms of DW R. Normal-form style:
//! R_k is nonzero exactly for (j, k) in the resonance set, in which case a
//! bordered system with the constraint u_j* B W_k = 0 pins both unknowns;
//! otherwise R_k = 0 and the coefficient matrix is nonsingular.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Factorize, Solve};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechmodel::{eval_polynomial, FirstOrderSystem, PolynomialMap};
use crate::ode::{integrate, uniform_grid, OdeOptions};
use crate::poly::{indices_of_degree, MultiIndex, Series, VectorSeries};
use crate::spectral::{detect_inner_resonances, MasterSubspace, ResonanceSet};
use crate::C64;

/// Autonomous SSM model: coefficient tables for W and R plus the master
/// subspace they are tangent to.
#[derive(Debug, Clone)]
pub struct SSMModel {
    pub order: u32,
    /// Number of conjugate pairs (reduced dimension is 2m).
    pub m: usize,
    pub master: MasterSubspace,
    /// Map coefficients W_k in C^N.
    pub w: VectorSeries,
    /// Reduced-field coefficients R_k in C^{2m}.
    pub r: VectorSeries,
    pub resonances: ResonanceSet,
}

impl SSMModel {
    pub fn reduced_dim(&self) -> usize {
        2 * self.m
    }

    pub fn full_dim(&self) -> usize {
        self.w.dim
    }
}

fn is_conjugate_symmetric(p: &[C64]) -> bool {
    let scale = p.iter().map(|c| c.norm()).fold(0.0f64, f64::max).max(1e-300);
    p.chunks(2)
        .all(|c| c.len() == 2 && (c[1] - c[0].conj()).norm() <= 1e-9 * scale)
}

/// Compute the autonomous SSM of the master subspace to the given order.
pub fn compute_autonomous_ssm(
    fo: &FirstOrderSystem,
    master: &MasterSubspace,
    order: u32,
    res_tol: f64,
) -> Result<SSMModel> {
    crate::init_blas_single_thread();
    if order < 1 {
        return Err(Error::Invalid("expansion order must be >= 1".into()));
    }
    let n = fo.dim;
    let nvars = master.dim();
    let lambda = master.lambda_e.clone();
    let resonances = detect_inner_resonances(&lambda, order.max(2), res_tol);

    let mut w = VectorSeries::new(n);
    let mut r = VectorSeries::new(nvars);
    for j in 0..nvars {
        let k = MultiIndex::unit(nvars, j);
        w.insert(k.clone(), master.v_e.column(j).to_owned());
        let mut rk = Array1::from_elem(nvars, C64::new(0.0, 0.0));
        rk[j] = lambda[j];
        r.insert(k, rk);
    }

    let a_c = fo.a.mapv(|x| C64::new(x, 0.0));
    let b_c = fo.b.mapv(|x| C64::new(x, 0.0));

    for kappa in 2..=order {
        // [F o W] at this degree, from coefficients of lower degrees only.
        let fw = compose_polynomial(&fo.nonlinearity, &w, kappa);

        // Cross terms of DW R from strictly lower-order coefficients.
        let mut cross: BTreeMap<MultiIndex, Array1<C64>> = BTreeMap::new();
        for (l, wl) in w.coeffs.iter().filter(|(l, _)| l.degree() >= 2) {
            for (lp, rlp) in r.coeffs.iter().filter(|(lp, _)| lp.degree() >= 2) {
                if l.degree() + lp.degree() != kappa + 1 {
                    continue;
                }
                for j in 0..nvars {
                    if l.0[j] == 0 || rlp[j] == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let k = l.dec(j).unwrap().mul(lp);
                    let scale = rlp[j] * l.0[j] as f64;
                    cross
                        .entry(k)
                        .or_insert_with(|| Array1::from_elem(n, C64::new(0.0, 0.0)))
                        .scaled_add(scale, wl);
                }
            }
        }

        for k in indices_of_degree(nvars, kappa) {
            let sk = k.conj_swap();
            if sk < k {
                // Mirror the conjugate partner computed earlier this degree.
                let wk = w.coeffs[&sk].mapv(|c| c.conj());
                w.insert(k.clone(), wk);
                if let Some(rk) = r.coeffs.get(&sk) {
                    let mut rm = Array1::from_elem(nvars, C64::new(0.0, 0.0));
                    for j in 0..nvars {
                        let js = if j % 2 == 0 { j + 1 } else { j - 1 };
                        rm[j] = rk[js].conj();
                    }
                    if rm.iter().any(|c| *c != C64::new(0.0, 0.0)) {
                        r.insert(k.clone(), rm);
                    }
                }
                continue;
            }

            let mut rhs = Array1::from_elem(n, C64::new(0.0, 0.0));
            if let Some(c) = cross.get(&k) {
                rhs += &complex_matvec_c(&b_c, c);
            }
            if let Some(g) = fw.get(&k) {
                rhs -= g;
            }

            let kl = k.dot_lambda(&lambda);
            let mut mat = a_c.clone();
            for i in 0..n {
                for jj in 0..n {
                    mat[(i, jj)] -= kl * b_c[(i, jj)];
                }
            }

            let targets: Vec<usize> = (0..nvars)
                .filter(|&j| resonances.is_resonant(j, &k))
                .collect();

            if targets.is_empty() {
                let lu = mat.factorize().map_err(|e| {
                    Error::Eigen(format!("cohomological factorization failed: {e}"))
                })?;
                use ndarray_linalg::ReciprocalConditionNum;
                if let Ok(rc) = lu.rcond() {
                    if rc < 1e-12 {
                        return Err(Error::NearResonant(k.0.clone()));
                    }
                }
                let wk = lu.solve(&rhs).map_err(|e| {
                    Error::Eigen(format!("cohomological solve failed: {e}"))
                })?;
                w.insert(k.clone(), wk);
            } else {
                // Bordered system: unknowns (W_k, R_k[j] for j in targets),
                // constraints u_j* B W_k = 0 remove the kernel directions.
                let nb = n + targets.len();
                let mut big = Array2::from_elem((nb, nb), C64::new(0.0, 0.0));
                for i in 0..n {
                    for jj in 0..n {
                        big[(i, jj)] = mat[(i, jj)];
                    }
                }
                for (c, &j) in targets.iter().enumerate() {
                    let bvj = complex_matvec_c(&b_c, &master.v_e.column(j).to_owned());
                    for i in 0..n {
                        big[(i, n + c)] = -bvj[i];
                    }
                    let ubj = {
                        let uj = master.u_e.column(j).to_owned();
                        // row u_j^* B
                        let mut row = Array1::from_elem(n, C64::new(0.0, 0.0));
                        for col in 0..n {
                            let mut acc = C64::new(0.0, 0.0);
                            for rr in 0..n {
                                acc += uj[rr].conj() * b_c[(rr, col)];
                            }
                            row[col] = acc;
                        }
                        row
                    };
                    for col in 0..n {
                        big[(n + c, col)] = ubj[col];
                    }
                }
                let mut brhs = Array1::from_elem(nb, C64::new(0.0, 0.0));
                for i in 0..n {
                    brhs[i] = rhs[i];
                }
                let sol = big
                    .solve(&brhs)
                    .map_err(|e| Error::Eigen(format!("bordered solve failed: {e}")))?;
                let wk = Array1::from_shape_fn(n, |i| sol[i]);
                w.insert(k.clone(), wk);
                let mut rk = Array1::from_elem(nvars, C64::new(0.0, 0.0));
                for (c, &j) in targets.iter().enumerate() {
                    rk[j] = sol[n + c];
                }
                r.insert(k.clone(), rk);
            }
        }
    }

    Ok(SSMModel {
        order,
        m: master.num_pairs(),
        master: master.clone(),
        w,
        r,
        resonances,
    })
}

fn complex_matvec_c(m: &Array2<C64>, x: &Array1<C64>) -> Array1<C64> {
    m.dot(x)
}

/// Degree-kappa coefficients of F(W(p)), composing the sparse monomial map
/// with the truncated series. Exact sparse composition, no sampling.
fn compose_polynomial(
    pm: &PolynomialMap,
    w: &VectorSeries,
    kappa: u32,
) -> BTreeMap<MultiIndex, Array1<C64>> {
    let mut out: BTreeMap<MultiIndex, Array1<C64>> = BTreeMap::new();
    if pm.is_zero() {
        return out;
    }
    let dim_out = pm.dim_out;
    let mut components: BTreeMap<usize, Series> = BTreeMap::new();
    for t in &pm.terms {
        for &(v, _) in &t.exps {
            components
                .entry(v)
                .or_insert_with(|| w.component(v));
        }
    }
    let nvars = w
        .coeffs
        .keys()
        .next()
        .map(|k| k.nvars())
        .unwrap_or(0);
    for t in &pm.terms {
        if t.degree() > kappa {
            continue; // each factor contributes degree >= 1
        }
        let mut prod = Series::constant(nvars, C64::new(t.coeff, 0.0));
        for &(v, p) in &t.exps {
            let comp = &components[&v];
            for _ in 0..p {
                prod = prod.mul_trunc(comp, kappa);
            }
        }
        for (k, c) in prod.terms {
            if k.degree() == kappa && c != C64::new(0.0, 0.0) {
                out.entry(k)
                    .or_insert_with(|| Array1::from_elem(dim_out, C64::new(0.0, 0.0)))[t.out] += c;
            }
        }
    }
    out
}

/// z = sum_k W_k p^k for conjugate-symmetric p; the verified imaginary
/// residue is discarded.
pub fn eval_parameterization(ssm: &SSMModel, p: &[C64]) -> Result<Array1<f64>> {
    if p.len() != ssm.reduced_dim() {
        return Err(Error::DimensionMismatch(format!(
            "reduced coordinate length {} != {}",
            p.len(),
            ssm.reduced_dim()
        )));
    }
    if !is_conjugate_symmetric(p) {
        return Err(Error::Invalid(
            "reduced coordinates must be conjugate-symmetric".into(),
        ));
    }
    let z = ssm.w.eval(p);
    let re_norm: f64 = z.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
    let im_norm: f64 = z.iter().map(|c| c.im * c.im).sum::<f64>().sqrt();
    if im_norm > 1e-9 * re_norm.max(1e-300) && re_norm > 0.0 {
        return Err(Error::Invalid(format!(
            "parameterization produced imaginary residue {im_norm:.3e} (|Re| = {re_norm:.3e})"
        )));
    }
    Ok(z.mapv(|c| c.re))
}

/// dp/dt = sum_k R_k p^k.
pub fn eval_reduced_field(ssm: &SSMModel, p: &[C64]) -> Result<Array1<C64>> {
    if p.len() != ssm.reduced_dim() {
        return Err(Error::DimensionMismatch(format!(
            "reduced coordinate length {} != {}",
            p.len(),
            ssm.reduced_dim()
        )));
    }
    Ok(ssm.r.eval(p))
}

/// p0 = (U_E)* B z0, conjugate-symmetrized by averaging paired entries.
pub fn project_to_master(
    master: &MasterSubspace,
    b: &Array2<f64>,
    z0: &Array1<f64>,
) -> Result<Array1<C64>> {
    if z0.len() != master.full_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state length {} != {}",
            z0.len(),
            master.full_dim()
        )));
    }
    let bz = b.dot(z0);
    let nvars = master.dim();
    let mut p = Array1::from_elem(nvars, C64::new(0.0, 0.0));
    for j in 0..nvars {
        let uj = master.u_e.column(j);
        let mut acc = C64::new(0.0, 0.0);
        for (u, &x) in uj.iter().zip(bz.iter()) {
            acc += u.conj() * x;
        }
        p[j] = acc;
    }
    for i in 0..nvars / 2 {
        let avg = (p[2 * i] + p[2 * i + 1].conj()) * 0.5;
        p[2 * i] = avg;
        p[2 * i + 1] = avg.conj();
    }
    Ok(p)
}

/// Offline trajectory of the uncontrolled reduced dynamics, with node
/// derivatives retained for cubic Hermite interpolation between nodes.
#[derive(Debug, Clone)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub samples: Vec<Array1<C64>>,
    pub derivs: Vec<Array1<C64>>,
}

impl ReducedTrajectory {
    /// Cubic Hermite interpolation of p(t) within the sampled span.
    pub fn sample(&self, t: f64) -> Array1<C64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.samples[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.samples[n - 1].clone();
        }
        let i = match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(i) => return self.samples[i].clone(),
            Err(i) => i - 1,
        };
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = self.samples[i].mapv(|c| c * h00);
        out.scaled_add(C64::new(h10 * h, 0.0), &self.derivs[i]);
        out.scaled_add(C64::new(h01, 0.0), &self.samples[i + 1]);
        out.scaled_add(C64::new(h11 * h, 0.0), &self.derivs[i + 1]);
        out
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// CSV export: t, Re p1, Im p1, ...
    pub fn csv(&self) -> String {
        let mut s = String::from("t");
        let nv = self.samples[0].len();
        for i in 0..nv {
            s.push_str(&format!(",re_p{},im_p{}", i + 1, i + 1));
        }
        s.push('\n');
        for (t, p) in self.times.iter().zip(self.samples.iter()) {
            s.push_str(&format!("{t:.17e}"));
            for c in p.iter() {
                s.push_str(&format!(",{:.17e},{:.17e}", c.re, c.im));
            }
            s.push('\n');
        }
        s
    }
}

/// Integrate dp/dt = R(p) from p0 over [t0, t1] with `n_out` uniform output
/// intervals. Only the representative coordinates are integrated, so the
/// conjugate symmetry of the samples is exact by construction.
pub fn simulate_reduced(
    ssm: &SSMModel,
    p0: &Array1<C64>,
    t0: f64,
    t1: f64,
    tol: f64,
    n_out: usize,
) -> Result<ReducedTrajectory> {
    if t1 <= t0 {
        return Err(Error::Invalid("simulation span must be forward".into()));
    }
    let m = ssm.m;
    let nvars = 2 * m;
    if p0.len() != nvars {
        return Err(Error::DimensionMismatch(format!(
            "p0 length {} != {}",
            p0.len(),
            nvars
        )));
    }
    if !is_conjugate_symmetric(p0.as_slice().unwrap()) {
        return Err(Error::Invalid(
            "initial reduced state must be conjugate-symmetric".into(),
        ));
    }

    let pack = |p: &[C64]| -> Array1<f64> {
        let mut y = Array1::zeros(2 * m);
        for i in 0..m {
            y[2 * i] = p[2 * i].re;
            y[2 * i + 1] = p[2 * i].im;
        }
        y
    };
    let unpack = |y: &ndarray::ArrayView1<f64>| -> Vec<C64> {
        let mut p = vec![C64::new(0.0, 0.0); 2 * m];
        for i in 0..m {
            p[2 * i] = C64::new(y[2 * i], y[2 * i + 1]);
            p[2 * i + 1] = p[2 * i].conj();
        }
        p
    };

    let rhs = |_t: f64, y: ndarray::ArrayView1<f64>, dy: &mut Array1<f64>| {
        let p = unpack(&y);
        let dp = ssm.r.eval(&p);
        for i in 0..m {
            dy[2 * i] = dp[2 * i].re;
            dy[2 * i + 1] = dp[2 * i].im;
        }
    };

    let grid = uniform_grid(t0, t1, n_out.max(1));
    let opts = OdeOptions {
        rtol: tol,
        atol: tol * 1e-2,
        ..Default::default()
    };
    let samples_raw = integrate(&rhs, t0, t1, &pack(p0.as_slice().unwrap()), &grid, &opts)?;

    let mut samples = Vec::with_capacity(samples_raw.len());
    let mut derivs = Vec::with_capacity(samples_raw.len());
    for y in &samples_raw {
        let p = unpack(&y.view());
        let dp = ssm.r.eval(&p);
        samples.push(Array1::from_vec(p));
        derivs.push(dp);
    }
    Ok(ReducedTrajectory {
        times: grid,
        samples,
        derivs,
    })
}

/// ||B DW(p) R(p) - A W(p) - F(W(p))|| at p = (a, a, ..., a) per amplitude.
pub fn invariance_residual(
    fo: &FirstOrderSystem,
    ssm: &SSMModel,
    amplitudes: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let nvars = ssm.reduced_dim();
    let mut out = Vec::with_capacity(amplitudes.len());
    for &a in amplitudes {
        let p = vec![C64::new(a, 0.0); nvars];
        let wp = ssm.w.eval(&p);
        let rp = ssm.r.eval(&p);
        let jac = ssm.w.eval_jacobian(&p);
        let dw_r = jac.dot(&rp);
        let b_dw_r = complex_matvec_c(&fo.b.mapv(|x| C64::new(x, 0.0)), &dw_r);
        let a_w = complex_matvec_c(&fo.a.mapv(|x| C64::new(x, 0.0)), &wp);
        let f_w = eval_polynomial(&fo.nonlinearity, wp.as_slice().unwrap())?;
        let res = (&b_dw_r - &a_w - &f_w)
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt();
        out.push((a, res));
    }
    Ok(out)
}

/// Least-squares slope of log(residual) against log(amplitude).
pub fn fit_loglog_slope(table: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = table
        .iter()
        .filter(|&&(a, r)| a > 0.0 && r > 0.0)
        .map(|&(a, r)| (a.ln(), r.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---------------------------------------------------------------------------
// SSM file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ComplexPair(f64, f64);

#[derive(Debug, Serialize, Deserialize)]
struct CoeffEntry {
    k: Vec<u8>,
    coeffs: Vec<ComplexPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SsmFile {
    order: u32,
    m: usize,
    #[serde(default)]
    model_hash: Option<String>,
    lambda_e: Vec<ComplexPair>,
    v_e: Vec<Vec<ComplexPair>>,
    u_e: Vec<Vec<ComplexPair>>,
    w: Vec<CoeffEntry>,
    r: Vec<CoeffEntry>,
    resonances: Vec<(usize, Vec<u8>)>,
}

fn to_pairs(a: &Array1<C64>) -> Vec<ComplexPair> {
    a.iter().map(|c| ComplexPair(c.re, c.im)).collect()
}

fn from_pairs(v: &[ComplexPair]) -> Array1<C64> {
    Array1::from_iter(v.iter().map(|p| C64::new(p.0, p.1)))
}

/// Persist the SSM model (optionally stamped with the source model hash).
pub fn save_ssm(ssm: &SSMModel, model_hash: Option<&str>, path: &Path) -> Result<()> {
    let nvars = ssm.reduced_dim();
    let file = SsmFile {
        order: ssm.order,
        m: ssm.m,
        model_hash: model_hash.map(|s| s.to_string()),
        lambda_e: ssm
            .master
            .lambda_e
            .iter()
            .map(|c| ComplexPair(c.re, c.im))
            .collect(),
        v_e: (0..nvars)
            .map(|j| to_pairs(&ssm.master.v_e.column(j).to_owned()))
            .collect(),
        u_e: (0..nvars)
            .map(|j| to_pairs(&ssm.master.u_e.column(j).to_owned()))
            .collect(),
        w: ssm
            .w
            .coeffs
            .iter()
            .map(|(k, v)| CoeffEntry {
                k: k.0.clone(),
                coeffs: to_pairs(v),
            })
            .collect(),
        r: ssm
            .r
            .coeffs
            .iter()
            .map(|(k, v)| CoeffEntry {
                k: k.0.clone(),
                coeffs: to_pairs(v),
            })
            .collect(),
        resonances: ssm
            .resonances
            .entries
            .iter()
            .map(|(t, k)| (*t, k.0.clone()))
            .collect(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::Invalid(format!("SSM serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a persisted SSM model; returns the model and the stored model hash.
pub fn load_ssm(path: &Path) -> Result<(SSMModel, Option<String>)> {
    let text = std::fs::read_to_string(path)?;
    let file: SsmFile = serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("SSM file parse failed: {e}")))?;
    let nvars = 2 * file.m;
    if file.lambda_e.len() != nvars || file.v_e.len() != nvars || file.u_e.len() != nvars {
        return Err(Error::Invalid("inconsistent SSM file dimensions".into()));
    }
    let n = file.v_e[0].len();
    let mut v_e = Array2::from_elem((n, nvars), C64::new(0.0, 0.0));
    let mut u_e = Array2::from_elem((n, nvars), C64::new(0.0, 0.0));
    for j in 0..nvars {
        v_e.column_mut(j).assign(&from_pairs(&file.v_e[j]));
        u_e.column_mut(j).assign(&from_pairs(&file.u_e[j]));
    }
    let lambda_e: Vec<C64> = file.lambda_e.iter().map(|p| C64::new(p.0, p.1)).collect();

    // Rebuild representative pairs from the interleaved columns.
    let mut pairs = Vec::new();
    for i in 0..file.m {
        pairs.push(crate::spectral::EigenPair {
            lambda: lambda_e[2 * i],
            v: v_e.column(2 * i).to_owned(),
            u: u_e.column(2 * i).to_owned(),
            index: i,
        });
    }
    let master = MasterSubspace {
        pairs,
        v_e,
        u_e,
        lambda_e,
    };

    let mut w = VectorSeries::new(n);
    for e in &file.w {
        w.insert(MultiIndex(e.k.clone()), from_pairs(&e.coeffs));
    }
    let mut r = VectorSeries::new(nvars);
    for e in &file.r {
        r.insert(MultiIndex(e.k.clone()), from_pairs(&e.coeffs));
    }
    let resonances = ResonanceSet {
        entries: file
            .resonances
            .iter()
            .map(|(t, k)| (*t, MultiIndex(k.clone())))
            .collect(),
    };
    Ok((
        SSMModel {
            order: file.order,
            m: file.m,
            master,
            w,
            r,
            resonances,
        },
        file.model_hash,
    ))
}
