//! Multi-indices and truncated multivariate power series over the reduced
//! coordinates.
//!
//! The SSM solver collects coefficients order by order, so everything here
//! iterates in graded lexicographic order and all maps are `BTreeMap`s:
//! results must not depend on hash order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array1;

use crate::C64;

/// Exponent vector over a small number of variables, ordered graded-lex:
/// lower total degree first, then lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<u8>);

impl MultiIndex {
    pub fn zeros(nvars: usize) -> Self {
        MultiIndex(vec![0; nvars])
    }

    pub fn unit(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        MultiIndex(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    /// Product of two monomials: componentwise exponent sum.
    pub fn mul(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Decrement exponent of `var` by one (None if it is zero).
    pub fn dec(&self, var: usize) -> Option<MultiIndex> {
        if self.0[var] == 0 {
            return None;
        }
        let mut e = self.0.clone();
        e[var] -= 1;
        Some(MultiIndex(e))
    }

    /// Swap adjacent paired entries (2i <-> 2i+1). Under conjugation of the
    /// reduced coordinates p = (q1, q1bar, ...), the monomial p^k maps to
    /// p^swap(k).
    pub fn conj_swap(&self) -> MultiIndex {
        let mut e = self.0.clone();
        for i in (0..e.len()).step_by(2) {
            if i + 1 < e.len() {
                e.swap(i, i + 1);
            }
        }
        MultiIndex(e)
    }

    /// Evaluate the monomial p^k.
    pub fn eval(&self, p: &[C64]) -> C64 {
        let mut acc = C64::new(1.0, 0.0);
        for (i, &e) in self.0.iter().enumerate() {
            for _ in 0..e {
                acc *= p[i];
            }
        }
        acc
    }

    /// k . lambda with the exponents as weights.
    pub fn dot_lambda(&self, lambda: &[C64]) -> C64 {
        self.0
            .iter()
            .zip(lambda.iter())
            .map(|(&e, &l)| l * e as f64)
            .sum()
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

/// All multi-indices over `nvars` variables with total degree exactly `deg`,
/// in lexicographic order.
pub fn indices_of_degree(nvars: usize, deg: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut current = vec![0u8; nvars];
    fill(&mut out, &mut current, 0, deg);
    out
}

fn fill(out: &mut Vec<MultiIndex>, current: &mut Vec<u8>, var: usize, remaining: u32) {
    if var + 1 == current.len() {
        current[var] = remaining as u8;
        out.push(MultiIndex(current.clone()));
        current[var] = 0;
        return;
    }
    for e in 0..=remaining {
        current[var] = e as u8;
        fill(out, current, var + 1, remaining - e);
    }
    current[var] = 0;
}

/// Scalar truncated power series in the reduced coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub terms: BTreeMap<MultiIndex, C64>,
}

impl Series {
    pub fn zero() -> Self {
        Series {
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: C64) -> Self {
        let mut s = Series::zero();
        if c != C64::new(0.0, 0.0) {
            s.terms.insert(MultiIndex::zeros(nvars), c);
        }
        s
    }

    pub fn add_term(&mut self, k: MultiIndex, c: C64) {
        if c == C64::new(0.0, 0.0) {
            return;
        }
        let entry = self.terms.entry(k).or_insert(C64::new(0.0, 0.0));
        *entry += c;
        if entry.norm() == 0.0 {
            // keep the map sparse
        }
    }

    /// Product truncated to total degree <= max_deg.
    pub fn mul_trunc(&self, other: &Series, max_deg: u32) -> Series {
        let mut out = Series::zero();
        for (ka, ca) in &self.terms {
            let da = ka.degree();
            if da > max_deg {
                continue;
            }
            for (kb, cb) in &other.terms {
                if da + kb.degree() > max_deg {
                    continue;
                }
                out.add_term(ka.mul(kb), ca * cb);
            }
        }
        out
    }

    pub fn eval(&self, p: &[C64]) -> C64 {
        self.terms.iter().map(|(k, c)| c * k.eval(p)).sum()
    }
}

/// Vector-valued truncated power series: one coefficient vector per
/// multi-index. Used for the SSM map W and the reduced field R.
#[derive(Debug, Clone, Default)]
pub struct VectorSeries {
    pub dim: usize,
    pub coeffs: BTreeMap<MultiIndex, Array1<C64>>,
}

impl VectorSeries {
    pub fn new(dim: usize) -> Self {
        VectorSeries {
            dim,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, k: MultiIndex, v: Array1<C64>) {
        debug_assert_eq!(v.len(), self.dim);
        self.coeffs.insert(k, v);
    }

    pub fn get(&self, k: &MultiIndex) -> Option<&Array1<C64>> {
        self.coeffs.get(k)
    }

    /// Evaluate the series at p.
    pub fn eval(&self, p: &[C64]) -> Array1<C64> {
        let mut out = Array1::from_elem(self.dim, C64::new(0.0, 0.0));
        for (k, v) in &self.coeffs {
            let m = k.eval(p);
            out.scaled_add(m, v);
        }
        out
    }

    /// Evaluate the Jacobian with respect to p at p: dim x nvars.
    pub fn eval_jacobian(&self, p: &[C64]) -> ndarray::Array2<C64> {
        let nvars = p.len();
        let mut jac = ndarray::Array2::from_elem((self.dim, nvars), C64::new(0.0, 0.0));
        for (k, v) in &self.coeffs {
            for j in 0..nvars {
                if let Some(km) = k.dec(j) {
                    let m = km.eval(p) * (k.0[j] as f64);
                    for r in 0..self.dim {
                        jac[(r, j)] += m * v[r];
                    }
                }
            }
        }
        jac
    }

    /// Component as a scalar series (used by polynomial composition).
    pub fn component(&self, row: usize) -> Series {
        let mut s = Series::zero();
        for (k, v) in &self.coeffs {
            if v[row] != C64::new(0.0, 0.0) {
                s.terms.insert(k.clone(), v[row]);
            }
        }
        s
    }
}
