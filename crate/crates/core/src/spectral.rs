//! Generalized eigenanalysis of the pencil (A, B), inner-resonance
//! detection, and small Lyapunov solves.
//!
//! Dense path uses LAPACK's QZ (dggev) and returns both left and right
//! eigenvectors in one call. Above the dense size threshold a shift-invert
//! Arnoldi iteration on (A - sigma B)^{-1} B is used instead; it shares the
//! same normalization so downstream code never sees the difference.
//!
//! Normalization convention: each right eigenvector has unit Euclidean norm
//! and its largest-magnitude component rotated real-positive; the left
//! eigenvector is then scaled so u* B v = 1. This pins every SSM
//! coefficient downstream, making regression tests reproducible.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Factorize, Norm, Solve};

use crate::error::{Error, Result};
use crate::mechmodel::FirstOrderSystem;
use crate::poly::MultiIndex;
use crate::C64;

/// One eigenpair of A v = lambda B v, u* A = lambda u* B. The stored
/// representative has Im(lambda) >= 0; the conjugate partner is implicit.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub lambda: C64,
    pub v: Array1<C64>,
    pub u: Array1<C64>,
    /// Position in the requested ordering (0-based).
    pub index: usize,
}

impl EigenPair {
    pub fn is_stable(&self) -> bool {
        self.lambda.re < 0.0
    }

    /// True when the real part is numerically indistinguishable from zero,
    /// which violates the hyperbolicity assumption of the reduction.
    pub fn near_marginal(&self) -> bool {
        self.lambda.re.abs() < 1e-10 * self.lambda.norm()
    }

    /// True complex pair (nonzero frequency); false for a real mode.
    pub fn is_complex(&self) -> bool {
        self.lambda.im != 0.0
    }

    pub fn damping_ratio(&self) -> f64 {
        let n = self.lambda.norm();
        if n == 0.0 {
            0.0
        } else {
            -self.lambda.re / n
        }
    }

    pub fn frequency_hz(&self) -> f64 {
        self.lambda.norm() / (2.0 * std::f64::consts::PI)
    }
}

/// Requested ordering of the returned pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeOrdering {
    ByRealPartDescending,
    ByFrequencyAscending,
}

/// Options for `solve_modes`.
#[derive(Debug, Clone, Copy)]
pub struct SolveModesOptions {
    /// Densify and run QZ when the state dimension N is at most this.
    pub dense_threshold: usize,
    /// Shift for the iterative path (defaults near the origin, targeting
    /// the slow end of the spectrum).
    pub shift: C64,
    /// Residual tolerance for accepting an iterative eigenpair.
    pub iterative_tol: f64,
}

impl Default for SolveModesOptions {
    fn default() -> Self {
        Self {
            dense_threshold: 2000,
            shift: C64::new(0.0, 0.0),
            iterative_tol: 1e-6,
        }
    }
}

/// Compute `count` conjugate eigenpairs of the pencil (A, B) in the
/// requested ordering. Conjugate partners are reconstructed from the
/// representative, never computed twice.
pub fn solve_modes(
    fo: &FirstOrderSystem,
    count: usize,
    ordering: ModeOrdering,
) -> Result<Vec<EigenPair>> {
    solve_modes_with(fo, count, ordering, &SolveModesOptions::default())
}

pub fn solve_modes_with(
    fo: &FirstOrderSystem,
    count: usize,
    ordering: ModeOrdering,
    opts: &SolveModesOptions,
) -> Result<Vec<EigenPair>> {
    let n2 = fo.dim;
    if count > n2 / 2 {
        return Err(Error::Invalid(format!(
            "requested {count} pairs but the system has only {} states",
            n2
        )));
    }
    let mut pairs = if n2 <= opts.dense_threshold {
        dense_generalized_eig(&fo.a, &fo.b)?
    } else {
        shift_invert_pairs(&fo.a, &fo.b, count, opts)?
    };
    mass_normalize(&mut pairs, &fo.b);
    sort_pairs(&mut pairs, ordering);
    pairs.truncate(count);
    for (i, p) in pairs.iter_mut().enumerate() {
        p.index = i;
    }
    Ok(pairs)
}

/// Rescale each mode so its displacement partition is mass-normalized,
/// phi* M phi = 1, reading M off the upper-right block of the lifted B.
/// This is the usual structural-dynamics convention and pins the magnitude
/// of every SSM coefficient. Left vectors are rescaled to keep u* B v = 1.
fn mass_normalize(pairs: &mut [EigenPair], b: &Array2<f64>) {
    let n2 = b.nrows();
    let n = n2 / 2;
    if 2 * n != n2 {
        return;
    }
    let m_block = b.slice(ndarray::s![..n, n..]);
    for p in pairs.iter_mut() {
        let phi = p.v.slice(ndarray::s![..n]).to_owned();
        let m_phi_re = m_block.dot(&phi.mapv(|c| c.re));
        let m_phi_im = m_block.dot(&phi.mapv(|c| c.im));
        let mut acc = 0.0f64;
        for i in 0..n {
            // phi^* M phi is real for symmetric M
            acc += phi[i].re * m_phi_re[i] + phi[i].im * m_phi_im[i];
        }
        let vnorm = p.v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if acc <= 1e-24 * vnorm * vnorm {
            continue; // degenerate displacement part; keep unit-norm scaling
        }
        let s = acc.sqrt();
        p.v.mapv_inplace(|c| c / s);
        p.u.mapv_inplace(|c| c * s);
    }
}

fn sort_pairs(pairs: &mut [EigenPair], ordering: ModeOrdering) {
    match ordering {
        ModeOrdering::ByRealPartDescending => pairs.sort_by(|a, b| {
            b.lambda
                .re
                .partial_cmp(&a.lambda.re)
                .unwrap()
                .then(a.lambda.im.abs().partial_cmp(&b.lambda.im.abs()).unwrap())
        }),
        ModeOrdering::ByFrequencyAscending => pairs.sort_by(|a, b| {
            a.lambda
                .im
                .abs()
                .partial_cmp(&b.lambda.im.abs())
                .unwrap()
                .then(b.lambda.re.partial_cmp(&a.lambda.re).unwrap())
        }),
    }
}

fn to_col_major(m: &Array2<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for j in 0..m.ncols() {
        v.extend(m.column(j).iter().copied());
    }
    v
}

/// Full QZ sweep of the real pencil; returns one `EigenPair` per conjugate
/// pair (representative Im >= 0) and per real eigenvalue.
pub fn dense_generalized_eig(a: &Array2<f64>, b: &Array2<f64>) -> Result<Vec<EigenPair>> {
    crate::init_blas_single_thread();
    let n = a.nrows() as i32;
    let nn = a.nrows();
    let mut a_cm = to_col_major(a);
    let mut b_cm = to_col_major(b);
    let mut alphar = vec![0.0f64; nn];
    let mut alphai = vec![0.0f64; nn];
    let mut beta = vec![0.0f64; nn];
    let mut vl = vec![0.0f64; nn * nn];
    let mut vr = vec![0.0f64; nn * nn];
    let mut info = 0i32;
    let jobv = b'V' as std::ffi::c_char;

    // Workspace query, then the real call.
    let mut work_len = -1.0f64;
    unsafe {
        lapack_sys::dggev_(
            &jobv,
            &jobv,
            &n,
            a_cm.as_mut_ptr(),
            &n,
            b_cm.as_mut_ptr(),
            &n,
            alphar.as_mut_ptr(),
            alphai.as_mut_ptr(),
            beta.as_mut_ptr(),
            vl.as_mut_ptr(),
            &n,
            vr.as_mut_ptr(),
            &n,
            &mut work_len,
            &(-1i32),
            &mut info,
        );
    }
    let lwork = work_len as usize;
    let mut work = vec![0.0f64; lwork.max(8 * nn)];
    unsafe {
        lapack_sys::dggev_(
            &jobv,
            &jobv,
            &n,
            a_cm.as_mut_ptr(),
            &n,
            b_cm.as_mut_ptr(),
            &n,
            alphar.as_mut_ptr(),
            alphai.as_mut_ptr(),
            beta.as_mut_ptr(),
            vl.as_mut_ptr(),
            &n,
            vr.as_mut_ptr(),
            &n,
            work.as_mut_ptr(),
            &(work.len() as i32),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Eigen(format!("dggev failed with info = {info}")));
    }

    let col = |data: &[f64], j: usize| -> Array1<f64> {
        Array1::from_iter(data[j * nn..(j + 1) * nn].iter().copied())
    };

    let mut out = Vec::new();
    let mut j = 0usize;
    while j < nn {
        if beta[j].abs() < 1e-300 {
            return Err(Error::Eigen(
                "pencil has an infinite eigenvalue (B singular or defective pencil)".into(),
            ));
        }
        if alphai[j] != 0.0 {
            let lambda = C64::new(alphar[j] / beta[j], alphai[j] / beta[j]);
            let vre = col(&vr, j);
            let vim = col(&vr, j + 1);
            let ure = col(&vl, j);
            let uim = col(&vl, j + 1);
            let v = Array1::from_shape_fn(nn, |i| C64::new(vre[i], vim[i]));
            let u = Array1::from_shape_fn(nn, |i| C64::new(ure[i], uim[i]));
            let (lambda, v, u) = if lambda.im >= 0.0 {
                (lambda, v, u)
            } else {
                (lambda.conj(), v.mapv(|c| c.conj()), u.mapv(|c| c.conj()))
            };
            out.push(normalize_pair(lambda, v, u, b)?);
            j += 2;
        } else {
            let lambda = C64::new(alphar[j] / beta[j], 0.0);
            let v = col(&vr, j).mapv(|x| C64::new(x, 0.0));
            let u = col(&vl, j).mapv(|x| C64::new(x, 0.0));
            out.push(normalize_pair(lambda, v, u, b)?);
            j += 1;
        }
    }
    Ok(out)
}

/// Apply the normalization convention: unit-norm v with its largest
/// component rotated real-positive, then u scaled for u* B v = 1.
fn normalize_pair(lambda: C64, v: Array1<C64>, u: Array1<C64>, b: &Array2<f64>) -> Result<EigenPair> {
    let best = v.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    if best == 0.0 {
        return Err(Error::Eigen("zero eigenvector returned".into()));
    }
    // Lowest index within a relative band of the maximum: near-ties (e.g.
    // symmetric mode shapes) must resolve identically on every solver path.
    let imax = v
        .iter()
        .position(|c| c.norm() >= best * (1.0 - 1e-9))
        .unwrap();
    let phase = v[imax] / v[imax].norm();
    let nrm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let v = v.mapv(|c| c / phase / nrm);

    let bv = complex_matvec(b, &v);
    let c: C64 = u.iter().zip(bv.iter()).map(|(ui, bvi)| ui.conj() * bvi).sum();
    if c.norm() < 1e-14 {
        return Err(Error::Eigen(format!(
            "u* B v vanishes for lambda = {lambda}; pencil appears defective"
        )));
    }
    let u = u.mapv(|x| x / c.conj());
    Ok(EigenPair {
        lambda,
        v,
        u,
        index: 0,
    })
}

pub(crate) fn complex_matvec(m: &Array2<f64>, x: &Array1<C64>) -> Array1<C64> {
    let re = x.mapv(|c| c.re);
    let im = x.mapv(|c| c.im);
    let mre = m.dot(&re);
    let mim = m.dot(&im);
    Array1::from_shape_fn(m.nrows(), |i| C64::new(mre[i], mim[i]))
}

fn complexify(m: &Array2<f64>) -> Array2<C64> {
    m.mapv(|x| C64::new(x, 0.0))
}

/// Shift-invert Arnoldi on (A - sigma B)^{-1} B. The shifted factorization
/// is dense; left vectors come from one inverse-iteration sweep per
/// converged eigenvalue.
fn shift_invert_pairs(
    a: &Array2<f64>,
    b: &Array2<f64>,
    count: usize,
    opts: &SolveModesOptions,
) -> Result<Vec<EigenPair>> {
    crate::init_blas_single_thread();
    let n = a.nrows();
    let shifted = &complexify(a) - &(complexify(b) * opts.shift);
    let lu = shifted
        .factorize()
        .map_err(|e| Error::Eigen(format!("shifted pencil factorization failed: {e}")))?;
    let bc = complexify(b);

    // Krylov subspace large enough for the requested pairs with headroom.
    let m = (6 * count + 20).min(n);
    let mut q: Vec<Array1<C64>> = Vec::with_capacity(m + 1);
    let mut h = Array2::<C64>::zeros((m + 1, m));
    // A fixed pseudo-random start avoids hiding in symmetry-invariant
    // subspaces while keeping runs reproducible.
    let mut state = 0x853c49e6748fea9bu64;
    let v0 = Array1::from_shape_fn(n, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        C64::new(((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5, 0.0)
    });
    let v0n = v0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    q.push(v0.mapv(|c| c / v0n));

    for k in 0..m {
        let w = bc.dot(&q[k]);
        let mut w = lu
            .solve(&w)
            .map_err(|e| Error::Eigen(format!("shift-invert solve failed: {e}")))?;
        for (i, qi) in q.iter().enumerate() {
            let hik: C64 = qi.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
            h[(i, k)] = hik;
            w.scaled_add(-hik, qi);
        }
        // one re-orthogonalization pass keeps the basis clean
        for (i, qi) in q.iter().enumerate() {
            let hik: C64 = qi.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
            h[(i, k)] += hik;
            w.scaled_add(-hik, qi);
        }
        let wn = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        h[(k + 1, k)] = C64::new(wn, 0.0);
        if wn < 1e-12 {
            break;
        }
        q.push(w.mapv(|c| c / wn));
    }

    let msz = q.len().min(m);
    let hm = h.slice(ndarray::s![..msz, ..msz]).to_owned();
    let (mu, ym) = hm
        .eig()
        .map_err(|e| Error::Eigen(format!("Hessenberg eigendecomposition failed: {e}")))?;

    // Ritz vectors and residual filtering.
    let a_norm = a.norm_l2();
    let mut found: Vec<(C64, Array1<C64>)> = Vec::new();
    for (j, &muj) in mu.iter().enumerate() {
        if muj.norm() < 1e-12 {
            continue;
        }
        let lambda = opts.shift + 1.0 / muj;
        if lambda.im < 0.0 {
            continue; // keep representatives only
        }
        let mut v = Array1::<C64>::zeros(n);
        for (i, qi) in q.iter().take(msz).enumerate() {
            v.scaled_add(ym[(i, j)], qi);
        }
        let vn = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if vn == 0.0 {
            continue;
        }
        let v = v.mapv(|c| c / vn);
        let res = {
            let av = complex_matvec(a, &v);
            let bv = complex_matvec(b, &v);
            (&av - &bv.mapv(|c| c * lambda))
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        if res <= opts.iterative_tol * a_norm {
            found.push((lambda, v));
        }
    }
    if found.len() < count {
        return Err(Error::Eigen(format!(
            "shift-invert Arnoldi converged {} of {count} requested pairs",
            found.len()
        )));
    }

    // Order by distance to the shift (what the Krylov space resolves best),
    // keep the requested number, then attach left vectors.
    found.sort_by(|x, y| {
        (x.0 - opts.shift)
            .norm()
            .partial_cmp(&(y.0 - opts.shift).norm())
            .unwrap()
    });
    found.truncate(count.max(found.len().min(count + 2)));

    let at = a.t().to_owned();
    let bt = b.t().to_owned();
    let mut out = Vec::new();
    for (lambda, v) in found.into_iter().take(count) {
        let u = left_vector_inverse_iteration(&at, &bt, lambda)?;
        out.push(normalize_pair(lambda, v, u, b)?);
    }
    Ok(out)
}

/// Left eigenvector via inverse iteration on A^T ubar = lambda B^T ubar.
fn left_vector_inverse_iteration(
    at: &Array2<f64>,
    bt: &Array2<f64>,
    lambda: C64,
) -> Result<Array1<C64>> {
    let n = at.nrows();
    // tiny detuning keeps the shifted matrix invertible
    let delta = C64::new(0.0, 1e-8 * lambda.norm().max(1.0));
    let shifted = &complexify(at) - &(complexify(bt) * (lambda + delta));
    let lu = shifted
        .factorize()
        .map_err(|e| Error::Eigen(format!("left-vector factorization failed: {e}")))?;
    let mut w = Array1::from_elem(n, C64::new(1.0, 0.0));
    for _ in 0..3 {
        let rhs = Array1::from_shape_fn(n, |i| {
            bt.row(i)
                .iter()
                .zip(w.iter())
                .map(|(&bij, &wj)| bij * wj)
                .sum()
        });
        w = lu
            .solve(&rhs)
            .map_err(|e| Error::Eigen(format!("left-vector solve failed: {e}")))?;
        let nw = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        w.mapv_inplace(|c| c / nw);
    }
    // ubar solves the transposed problem; the left vector is its conjugate
    Ok(w.mapv(|c| c.conj()))
}

// ---------------------------------------------------------------------------
// Master subspace
// ---------------------------------------------------------------------------

/// Master modal subspace spanned by m conjugate pairs; columns are
/// interleaved (v1, v1bar, ..., vm, vmbar).
#[derive(Debug, Clone)]
pub struct MasterSubspace {
    pub pairs: Vec<EigenPair>,
    pub v_e: Array2<C64>,
    pub u_e: Array2<C64>,
    pub lambda_e: Vec<C64>,
}

impl MasterSubspace {
    pub fn from_pairs(pairs: Vec<EigenPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("master subspace needs at least one pair".into()));
        }
        for p in &pairs {
            if !p.is_complex() {
                return Err(Error::Invalid(format!(
                    "master subspace requires complex-conjugate pairs; lambda = {} is real",
                    p.lambda
                )));
            }
        }
        let n = pairs[0].v.len();
        let m2 = 2 * pairs.len();
        let mut v_e = Array2::from_elem((n, m2), C64::new(0.0, 0.0));
        let mut u_e = Array2::from_elem((n, m2), C64::new(0.0, 0.0));
        let mut lambda_e = Vec::with_capacity(m2);
        for (i, p) in pairs.iter().enumerate() {
            for r in 0..n {
                v_e[(r, 2 * i)] = p.v[r];
                v_e[(r, 2 * i + 1)] = p.v[r].conj();
                u_e[(r, 2 * i)] = p.u[r];
                u_e[(r, 2 * i + 1)] = p.u[r].conj();
            }
            lambda_e.push(p.lambda);
            lambda_e.push(p.lambda.conj());
        }
        Ok(MasterSubspace {
            pairs,
            v_e,
            u_e,
            lambda_e,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn dim(&self) -> usize {
        self.lambda_e.len()
    }

    pub fn full_dim(&self) -> usize {
        self.v_e.nrows()
    }
}

// ---------------------------------------------------------------------------
// Inner resonances
// ---------------------------------------------------------------------------

/// Near inner resonances |k . lambda_E - lambda_E[j]| <= tol |lambda_E[j]|.
#[derive(Debug, Clone, Default)]
pub struct ResonanceSet {
    /// (target coordinate, multi-index), sorted.
    pub entries: Vec<(usize, MultiIndex)>,
}

impl ResonanceSet {
    pub fn is_resonant(&self, target: usize, k: &MultiIndex) -> bool {
        self.entries
            .binary_search_by(|(t, ki)| t.cmp(&target).then(ki.cmp(k)))
            .is_ok()
    }

    /// Targets resonant with a given multi-index.
    pub fn targets_for(&self, k: &MultiIndex) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(_, ki)| ki == k)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Enumerate all near inner resonances up to |k| <= max_order, including the
/// trivially resonant linear entries k = e_j for j = target.
pub fn detect_inner_resonances(
    lambda_e: &[C64],
    max_order: u32,
    rel_tol: f64,
) -> ResonanceSet {
    let nvars = lambda_e.len();
    let mut entries = Vec::new();
    for j in 0..nvars {
        entries.push((j, MultiIndex::unit(nvars, j)));
    }
    for deg in 2..=max_order {
        for k in crate::poly::indices_of_degree(nvars, deg) {
            let kl = k.dot_lambda(lambda_e);
            for (j, &lj) in lambda_e.iter().enumerate() {
                if (kl - lj).norm() <= rel_tol * lj.norm() {
                    entries.push((j, k.clone()));
                }
            }
        }
    }
    entries.sort_by(|(ta, ka), (tb, kb)| ta.cmp(tb).then(ka.cmp(kb)));
    ResonanceSet { entries }
}

// ---------------------------------------------------------------------------
// 2x2 Lyapunov solve
// ---------------------------------------------------------------------------

/// Solve Ltilde W + W Ltilde^T + RHS = 0 for diagonal Ltilde = diag(l1, l2),
/// elementwise W_ab = -RHS_ab / (l_a + l_b). Requires Re(l) < 0.
pub fn solve_lyapunov_2x2(diag: [C64; 2], rhs: &Array2<C64>) -> Result<Array2<C64>> {
    for l in diag {
        if l.re >= 0.0 {
            return Err(Error::Unstable(l));
        }
    }
    let mut w = Array2::from_elem((2, 2), C64::new(0.0, 0.0));
    for a in 0..2 {
        for b in 0..2 {
            let den = diag[a] + diag[b];
            if den.norm() < 1e-300 {
                return Err(Error::Singular(
                    "vanishing denominator in 2x2 Lyapunov solve".into(),
                ));
            }
            w[(a, b)] = -rhs[(a, b)] / den;
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Spectrum CSV with one row per pair.
pub fn spectrum_csv(pairs: &[EigenPair]) -> String {
    let mut s = String::from("index,re_lambda,im_lambda,damping_ratio,frequency_hz\n");
    for p in pairs {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            p.index + 1,
            p.lambda.re,
            p.lambda.im,
            p.damping_ratio(),
            p.frequency_hz()
        ));
    }
    s
}
