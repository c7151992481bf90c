//! Linear correction basis: modal importance ranking by DCgain and modal
//! Hankel singular values, basis selection, the reduced controlled
//! dynamics for q, and realification.
//!
//! DCgain of a conjugate pair is the spectral norm of its zero-frequency
//! transfer contribution; the MHSV comes from the per-pair 2x2 Gramian pair
//! solved in closed form. Both are normalized over the computed stable
//! pairs. The reduced model can be realified so every LQ quantity
//! downstream is real: pair coordinates (sqrt2 Re q, sqrt2 Im q) with
//! blocks [[Re l, -Im l], [Im l, Re l]], leaving the reconstruction
//! eps V q unchanged.

use ndarray::{Array1, Array2};
use ndarray_linalg::SVD;

use crate::error::{Error, Result};
use crate::mechmodel::{ForcingSignal, SecondOrderSystem};
use crate::spectral::{solve_lyapunov_2x2, EigenPair};
use crate::C64;

/// Importance metrics of one conjugate pair (0-based pair_index into the
/// computed list).
#[derive(Debug, Clone)]
pub struct ModalRanking {
    pub pair_index: usize,
    pub dcgain: f64,
    pub mhsv: f64,
    pub normalized_dcgain: f64,
    pub normalized_mhsv: f64,
    pub stable: bool,
}

fn spectral_norm_real(m: &Array2<f64>) -> f64 {
    match m.svd(false, false) {
        Ok((_, sv, _)) => sv.iter().cloned().fold(0.0, f64::max),
        Err(_) => 0.0,
    }
}

fn svd_max_c(m: &Array2<C64>) -> f64 {
    match m.svd(false, false) {
        Ok((_, sv, _)) => sv.iter().cloned().fold(0.0, f64::max),
        Err(_) => 0.0,
    }
}

/// Zero-frequency contribution of one pair:
/// -(C v)(u* Bext)/lambda - (C vbar)(ubar* Bext)/lambdabar (real).
fn pair_dc_contribution(p: &EigenPair, bext: &Array2<f64>, c_obs: &Array2<f64>) -> Array2<f64> {
    let cv = c_obs.mapv(|x| C64::new(x, 0.0)).dot(&p.v);
    let ub: Array1<C64> = {
        let q = bext.ncols();
        Array1::from_shape_fn(q, |j| {
            p.u.iter()
                .zip(bext.column(j).iter())
                .map(|(u, &b)| u.conj() * b)
                .sum()
        })
    };
    let obs = c_obs.nrows();
    let q = bext.ncols();
    let mut g = Array2::zeros((obs, q));
    for i in 0..obs {
        for j in 0..q {
            let term = -(cv[i] * ub[j]) / p.lambda;
            g[(i, j)] = if p.is_complex() { 2.0 * term.re } else { term.re };
        }
    }
    g
}

/// DCgain of each of the first m_hat pairs, normalized over the stable ones.
pub fn dcgains(
    pairs: &[EigenPair],
    bext: &Array2<f64>,
    c_obs: &Array2<f64>,
    m_hat: usize,
) -> Result<Vec<ModalRanking>> {
    let m_hat = m_hat.min(pairs.len());
    let mut out = Vec::with_capacity(m_hat);
    for (i, p) in pairs.iter().take(m_hat).enumerate() {
        let stable = p.is_stable();
        let dc = if stable {
            if p.lambda.norm() == 0.0 {
                return Err(Error::Eigen("zero eigenvalue; system non-hyperbolic".into()));
            }
            spectral_norm_real(&pair_dc_contribution(p, bext, c_obs))
        } else {
            0.0
        };
        out.push(ModalRanking {
            pair_index: i,
            dcgain: dc,
            mhsv: 0.0,
            normalized_dcgain: 0.0,
            normalized_mhsv: 0.0,
            stable,
        });
    }
    let total: f64 = out.iter().filter(|r| r.stable).map(|r| r.dcgain).sum();
    if total > 0.0 {
        for r in out.iter_mut().filter(|r| r.stable) {
            r.normalized_dcgain = r.dcgain / total;
        }
    }
    Ok(out)
}

/// Modal Hankel singular value of one stable pair.
pub fn pair_mhsv(p: &EigenPair, bext: &Array2<f64>, c_obs: &Array2<f64>) -> Result<f64> {
    if !p.is_stable() {
        return Err(Error::Unstable(p.lambda));
    }
    let q = bext.ncols();
    let obs = c_obs.nrows();
    // Btilde = (u*; ubar*) Bext, rows conjugate
    let b_row: Array1<C64> = Array1::from_shape_fn(q, |j| {
        p.u.iter()
            .zip(bext.column(j).iter())
            .map(|(u, &b)| u.conj() * b)
            .sum()
    });
    // Ctilde = C (v, vbar)
    let cv: Array1<C64> = {
        let cc = c_obs.mapv(|x| C64::new(x, 0.0));
        cc.dot(&p.v)
    };
    // BBt[a][b] = sum_j Btilde[a,j] Btilde[b,j] (plain transpose)
    let rows = [b_row.clone(), b_row.mapv(|c| c.conj())];
    let mut bbt = Array2::from_elem((2, 2), C64::new(0.0, 0.0));
    for a in 0..2 {
        for b in 0..2 {
            bbt[(a, b)] = (0..q).map(|j| rows[a][j] * rows[b][j]).sum();
        }
    }
    // CtC[a][b] = sum_i Ctilde[i,a] Ctilde[i,b]
    let cols = [cv.clone(), cv.mapv(|c| c.conj())];
    let mut ctc = Array2::from_elem((2, 2), C64::new(0.0, 0.0));
    for a in 0..2 {
        for b in 0..2 {
            ctc[(a, b)] = (0..obs).map(|i| cols[a][i] * cols[b][i]).sum();
        }
    }
    let diag = [p.lambda, p.lambda.conj()];
    let wc = solve_lyapunov_2x2(diag, &bbt)?;
    let wo = solve_lyapunov_2x2(diag, &ctc)?;
    let prod = wc.dot(&wo);
    let sigma_sq = svd_max_c(&prod);
    Ok(sigma_sq.max(0.0).sqrt())
}

/// MHSV of each of the first m_hat pairs, normalized over the stable ones.
pub fn mhsvs(
    pairs: &[EigenPair],
    bext: &Array2<f64>,
    c_obs: &Array2<f64>,
    m_hat: usize,
) -> Result<Vec<ModalRanking>> {
    let m_hat = m_hat.min(pairs.len());
    let mut out = Vec::with_capacity(m_hat);
    for (i, p) in pairs.iter().take(m_hat).enumerate() {
        let stable = p.is_stable();
        let val = if stable {
            pair_mhsv(p, bext, c_obs)?
        } else {
            0.0
        };
        out.push(ModalRanking {
            pair_index: i,
            dcgain: 0.0,
            mhsv: val,
            normalized_dcgain: 0.0,
            normalized_mhsv: 0.0,
            stable,
        });
    }
    let total: f64 = out.iter().filter(|r| r.stable).map(|r| r.mhsv).sum();
    if total > 0.0 {
        for r in out.iter_mut().filter(|r| r.stable) {
            r.normalized_mhsv = r.mhsv / total;
        }
    }
    Ok(out)
}

/// Both metrics in one table.
pub fn rank_modes(
    pairs: &[EigenPair],
    bext: &Array2<f64>,
    c_obs: &Array2<f64>,
    m_hat: usize,
) -> Result<Vec<ModalRanking>> {
    let dc = dcgains(pairs, bext, c_obs, m_hat)?;
    let mh = mhsvs(pairs, bext, c_obs, m_hat)?;
    Ok(dc
        .into_iter()
        .zip(mh)
        .map(|(d, m)| ModalRanking {
            pair_index: d.pair_index,
            dcgain: d.dcgain,
            mhsv: m.mhsv,
            normalized_dcgain: d.normalized_dcgain,
            normalized_mhsv: m.normalized_mhsv,
            stable: d.stable,
        })
        .collect())
}

/// (Lambda, B_hat, U_hat, V_hat) of a realified model.
pub type RealSystem = (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    DcGain,
    Mhsv,
}

/// Greedy selection: forced pairs first, then stable pairs in descending
/// normalized metric (ties broken by ascending pair index) until the
/// cumulative normalized metric reaches the threshold.
pub fn select_basis(
    rankings: &[ModalRanking],
    metric: SelectionMetric,
    threshold: f64,
    forced: &[usize],
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "selection threshold {threshold} outside (0, 1]"
        )));
    }
    let value = |r: &ModalRanking| match metric {
        SelectionMetric::DcGain => r.normalized_dcgain,
        SelectionMetric::Mhsv => r.normalized_mhsv,
    };
    let mut selected: Vec<usize> = Vec::new();
    let mut cumulative = 0.0;
    for &f in forced {
        if !selected.contains(&f) {
            selected.push(f);
            if let Some(r) = rankings.iter().find(|r| r.pair_index == f) {
                if r.stable {
                    cumulative += value(r);
                }
            }
        }
    }
    let mut order: Vec<&ModalRanking> = rankings.iter().filter(|r| r.stable).collect();
    order.sort_by(|a, b| {
        value(b)
            .partial_cmp(&value(a))
            .unwrap()
            .then(a.pair_index.cmp(&b.pair_index))
    });
    for r in order {
        if cumulative >= threshold - 1e-12 {
            break;
        }
        if !selected.contains(&r.pair_index) {
            selected.push(r.pair_index);
            cumulative += value(r);
        }
    }
    if cumulative < threshold - 1e-12 {
        return Err(Error::ThresholdUnreachable {
            threshold,
            reached: cumulative,
        });
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Reduced linear controlled model on the selected modes. Columns stay
/// conjugate-adjacent until `realify`.
#[derive(Debug, Clone)]
pub struct ReducedLinearModel {
    /// Selected pair count.
    pub l: usize,
    /// Reduced state dimension (2 per complex pair, 1 per real mode).
    pub dim: usize,
    /// Selected representative eigenvalues.
    pub selected_lambdas: Vec<C64>,
    pub lambda: Array2<C64>,
    pub b_hat: Array2<C64>,
    pub u_hat: Array2<C64>,
    pub v_hat: Array2<C64>,
    pub c_obs: Array2<f64>,
    pub forcing: ForcingSignal,
    pub realified: bool,
}

impl ReducedLinearModel {
    /// b(t) = U* Fext(t).
    pub fn forcing_term(&self, t: f64) -> Array1<C64> {
        let n = self.u_hat.nrows();
        let f = self.forcing.eval_vec(t, n);
        Array1::from_shape_fn(self.dim, |j| {
            self.u_hat
                .column(j)
                .iter()
                .zip(f.iter())
                .map(|(u, &x)| u.conj() * x)
                .sum()
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.b_hat.ncols()
    }

    fn require_real(&self) -> Result<()> {
        if !self.realified {
            return Err(Error::Invalid(
                "operation requires a realified reduced model".into(),
            ));
        }
        Ok(())
    }

    /// Real system matrices of the realified model.
    pub fn real_parts(&self) -> Result<RealSystem> {
        self.require_real()?;
        Ok((
            self.lambda.mapv(|c| c.re),
            self.b_hat.mapv(|c| c.re),
            self.u_hat.mapv(|c| c.re),
            self.v_hat.mapv(|c| c.re),
        ))
    }

    /// Real forcing term of the realified model.
    pub fn forcing_term_real(&self, t: f64) -> Result<Array1<f64>> {
        self.require_real()?;
        Ok(self.forcing_term(t).mapv(|c| c.re))
    }
}

/// Assemble the reduced model from the selected pairs. `selection` indexes
/// into `pairs`.
pub fn build_reduced_linear(
    pairs: &[EigenPair],
    selection: &[usize],
    bext: &Array2<f64>,
    forcing: &ForcingSignal,
    c_obs: &Array2<f64>,
) -> Result<ReducedLinearModel> {
    if selection.is_empty() {
        return Err(Error::Invalid("selection must be nonempty".into()));
    }
    let n = pairs[0].v.len();
    let q = bext.ncols();
    let mut dim = 0usize;
    for &i in selection {
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("selection index {i} out of range")))?;
        dim += if p.is_complex() { 2 } else { 1 };
    }
    let mut lambda = Array2::from_elem((dim, dim), C64::new(0.0, 0.0));
    let mut u_hat = Array2::from_elem((n, dim), C64::new(0.0, 0.0));
    let mut v_hat = Array2::from_elem((n, dim), C64::new(0.0, 0.0));
    let mut selected_lambdas = Vec::with_capacity(selection.len());
    let mut col = 0usize;
    for &i in selection {
        let p = &pairs[i];
        selected_lambdas.push(p.lambda);
        if p.is_complex() {
            lambda[(col, col)] = p.lambda;
            lambda[(col + 1, col + 1)] = p.lambda.conj();
            for r in 0..n {
                v_hat[(r, col)] = p.v[r];
                v_hat[(r, col + 1)] = p.v[r].conj();
                u_hat[(r, col)] = p.u[r];
                u_hat[(r, col + 1)] = p.u[r].conj();
            }
            col += 2;
        } else {
            lambda[(col, col)] = p.lambda;
            for r in 0..n {
                v_hat[(r, col)] = p.v[r];
                u_hat[(r, col)] = p.u[r];
            }
            col += 1;
        }
    }
    let mut b_hat = Array2::from_elem((dim, q), C64::new(0.0, 0.0));
    for jq in 0..q {
        for j in 0..dim {
            b_hat[(j, jq)] = u_hat
                .column(j)
                .iter()
                .zip(bext.column(jq).iter())
                .map(|(u, &b)| u.conj() * b)
                .sum();
        }
    }
    Ok(ReducedLinearModel {
        l: selection.len(),
        dim,
        selected_lambdas,
        lambda,
        b_hat,
        u_hat,
        v_hat,
        c_obs: c_obs.clone(),
        forcing: forcing.clone(),
        realified: false,
    })
}

/// q0 = U* B (z0 - W(p0)) / eps. Zero imaginary part when realified.
pub fn reduced_initial_condition(
    model: &ReducedLinearModel,
    b: &Array2<f64>,
    z0: &Array1<f64>,
    w_p0: &Array1<f64>,
    epsilon: f64,
) -> Result<Array1<C64>> {
    if epsilon == 0.0 {
        return Err(Error::Invalid("epsilon must be nonzero".into()));
    }
    let diff = (z0 - w_p0) / epsilon;
    let bd = b.dot(&diff);
    Ok(Array1::from_shape_fn(model.dim, |j| {
        model
            .u_hat
            .column(j)
            .iter()
            .zip(bd.iter())
            .map(|(u, &x)| u.conj() * x)
            .sum()
    }))
}

/// Replace each conjugate coordinate pair (q, qbar) by real coordinates
/// (sqrt2 Re q, sqrt2 Im q). Real modes keep their 1x1 block. The
/// reconstruction V q is unchanged.
pub fn realify(model: &ReducedLinearModel) -> Result<ReducedLinearModel> {
    if model.realified {
        return Ok(model.clone());
    }
    let n = model.u_hat.nrows();
    let dim = model.dim;
    let q = model.num_inputs();
    let sq2 = std::f64::consts::SQRT_2;
    let mut lambda = Array2::from_elem((dim, dim), C64::new(0.0, 0.0));
    let mut u_hat = Array2::from_elem((n, dim), C64::new(0.0, 0.0));
    let mut v_hat = Array2::from_elem((n, dim), C64::new(0.0, 0.0));
    let mut col = 0usize;
    for lam in &model.selected_lambdas {
        if lam.im != 0.0 {
            lambda[(col, col)] = C64::new(lam.re, 0.0);
            lambda[(col, col + 1)] = C64::new(-lam.im, 0.0);
            lambda[(col + 1, col)] = C64::new(lam.im, 0.0);
            lambda[(col + 1, col + 1)] = C64::new(lam.re, 0.0);
            for r in 0..n {
                let v = model.v_hat[(r, col)];
                let u = model.u_hat[(r, col)];
                v_hat[(r, col)] = C64::new(sq2 * v.re, 0.0);
                v_hat[(r, col + 1)] = C64::new(-sq2 * v.im, 0.0);
                u_hat[(r, col)] = C64::new(sq2 * u.re, 0.0);
                u_hat[(r, col + 1)] = C64::new(-sq2 * u.im, 0.0);
            }
            col += 2;
        } else {
            lambda[(col, col)] = *lam;
            for r in 0..n {
                v_hat[(r, col)] = C64::new(model.v_hat[(r, col)].re, 0.0);
                u_hat[(r, col)] = C64::new(model.u_hat[(r, col)].re, 0.0);
            }
            col += 1;
        }
    }
    // B_hat in real coordinates follows the same row transform as b(t):
    // rows (b, bbar) -> (sqrt2 Re b, sqrt2 Im b).
    let mut b_hat = Array2::from_elem((dim, q), C64::new(0.0, 0.0));
    let mut col = 0usize;
    for lam in &model.selected_lambdas {
        if lam.im != 0.0 {
            for jq in 0..q {
                let bb = model.b_hat[(col, jq)];
                b_hat[(col, jq)] = C64::new(sq2 * bb.re, 0.0);
                b_hat[(col + 1, jq)] = C64::new(sq2 * bb.im, 0.0);
            }
            col += 2;
        } else {
            for jq in 0..q {
                b_hat[(col, jq)] = C64::new(model.b_hat[(col, jq)].re, 0.0);
            }
            col += 1;
        }
    }
    Ok(ReducedLinearModel {
        l: model.l,
        dim,
        selected_lambdas: model.selected_lambdas.clone(),
        lambda,
        b_hat,
        u_hat,
        v_hat,
        c_obs: model.c_obs.clone(),
        forcing: model.forcing.clone(),
        realified: true,
    })
}

/// Transfer-function contribution of one pair at s = i omega.
fn pair_transfer(
    p: &EigenPair,
    bext: &Array2<f64>,
    c_obs: &Array2<f64>,
    s: C64,
) -> Array2<C64> {
    let obs = c_obs.nrows();
    let q = bext.ncols();
    let cv = c_obs.mapv(|x| C64::new(x, 0.0)).dot(&p.v);
    let ub: Array1<C64> = Array1::from_shape_fn(q, |j| {
        p.u.iter()
            .zip(bext.column(j).iter())
            .map(|(u, &b)| u.conj() * b)
            .sum()
    });
    let mut g = Array2::from_elem((obs, q), C64::new(0.0, 0.0));
    for i in 0..obs {
        for j in 0..q {
            let mut val = cv[i] * ub[j] / (s - p.lambda);
            if p.is_complex() {
                val += (cv[i] * ub[j]).conj() / (s - p.lambda.conj());
            }
            g[(i, j)] = val;
        }
    }
    g
}

/// Frequency-sweep check of the truncation error bound: the measured gap
/// max_omega ||G(i w) - Ghat(i w)||_2 never exceeds 4 sum of truncated
/// MHSVs. Returns (measured_gap, bound).
pub fn hinf_bound_check(
    pairs: &[EigenPair],
    selection: &[usize],
    bext: &Array2<f64>,
    c_obs: &Array2<f64>,
    freq_grid: &[f64],
) -> Result<(f64, f64)> {
    let truncated: Vec<usize> = (0..pairs.len())
        .filter(|i| !selection.contains(i))
        .collect();
    let mut bound = 0.0;
    for &i in &truncated {
        if !pairs[i].is_stable() {
            return Err(Error::Unstable(pairs[i].lambda));
        }
        bound += 4.0 * pair_mhsv(&pairs[i], bext, c_obs)?;
    }
    let mut gap: f64 = 0.0;
    for &w in freq_grid {
        let s = C64::new(0.0, w);
        let obs = c_obs.nrows();
        let q = bext.ncols();
        let mut diff = Array2::from_elem((obs, q), C64::new(0.0, 0.0));
        for &i in &truncated {
            diff += &pair_transfer(&pairs[i], bext, c_obs, s);
        }
        gap = gap.max(svd_max_c(&diff));
    }
    if gap > bound + 1e-12 {
        return Err(Error::Invalid(format!(
            "H-infinity bound violated: gap {gap} > bound {bound}"
        )));
    }
    Ok((gap, bound))
}

/// Observation matrix collocated with the actuators: one displacement row
/// per actuator column (of the full 2n state).
pub fn collocated_observation(sys: &SecondOrderSystem) -> Array2<f64> {
    let n = sys.n;
    let q = sys.actuators.ncols();
    let mut c = Array2::zeros((q, 2 * n));
    for j in 0..q {
        let mut imax = 0usize;
        let mut best = -1.0f64;
        for i in 0..n {
            let v = sys.actuators[(i, j)].abs();
            if v > best {
                best = v;
                imax = i;
            }
        }
        c[(j, imax)] = 1.0;
    }
    c
}

/// Ranking CSV mirroring the bar-chart data of the selection step.
pub fn ranking_csv(rankings: &[ModalRanking], pairs: &[EigenPair], selection: &[usize]) -> String {
    let mut s = String::from(
        "pair_index,frequency,dcgain,mhsv,normalized_dcgain,normalized_mhsv,selected\n",
    );
    for r in rankings {
        let freq = pairs
            .get(r.pair_index)
            .map(|p| p.frequency_hz())
            .unwrap_or(f64::NAN);
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.pair_index + 1,
            freq,
            r.dcgain,
            r.mhsv,
            r.normalized_dcgain,
            r.normalized_mhsv,
            selection.contains(&r.pair_index) as u8
        ));
    }
    s
}
