//! The lattice Hamiltonian `Δ + V` with zero boundary condition outside a
//! finite set: principal eigenpairs, dotted domains, the rate functional,
//! semigroup propagation, resolvent solves and the eigenvalue gradient.
//!
//! Sites with `V = -∞` are removed from the matrix. The principal pair of a
//! disconnected domain is the global top eigenpair; its eigenfunction may
//! vanish on the other components.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{BoxDomain, Site, SiteSet};
use crate::randfield::{PotentialField, Rho};

/// Default absolute eigen tolerance, scaled by `‖V‖∞ + 2d`.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Relative step tolerance of Krylov propagation.
pub const KRYLOV_TOL: f64 = 1e-10;
/// Number of leading eigenpairs for spectral expansions.
pub const DEFAULT_LEADING: usize = 8;

const DENSE_MAX: usize = 400;
const DENSE_EXPANSION_MAX: usize = 3000;

/// `Δ + V` restricted to an effective domain, stored in compressed rows.
#[derive(Clone, Debug)]
pub struct Operator {
    dim: usize,
    sites: Vec<Site>,
    diag: Vec<f64>,
    offsets: Vec<usize>,
    cols: Vec<u32>,
}

impl Operator {
    /// Assembles `Δ + V` on `{x ∈ A : V(x) > -∞}`.
    pub fn new(a: &SiteSet, v: impl Fn(&Site) -> f64) -> Operator {
        let dim = a.dim().unwrap_or(1);
        let mut sites = Vec::with_capacity(a.len());
        let mut diag = Vec::with_capacity(a.len());
        for x in a {
            let vx = v(x);
            debug_assert!(!vx.is_nan());
            if vx > f64::NEG_INFINITY {
                sites.push(x.clone());
                diag.push(vx - 2.0 * dim as f64);
            }
        }
        let index: HashMap<&Site, u32> = sites.iter().enumerate().map(|(i, x)| (x, i as u32)).collect();
        let mut offsets = Vec::with_capacity(sites.len() + 1);
        let mut cols = Vec::with_capacity(sites.len() * 2 * dim);
        offsets.push(0);
        for x in &sites {
            for y in x.neighbors() {
                if let Some(&j) = index.get(&y) {
                    cols.push(j);
                }
            }
            offsets.push(cols.len());
        }
        Operator { dim, sites, diag, offsets, cols }
    }

    /// Operator on `A` for a field, with `-∞` outside the field domain.
    pub fn from_field(a: &SiteSet, field: &PotentialField) -> Operator {
        Operator::new(a, |x| field.value(x))
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sites of the effective domain in lexicographic order.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Diagonal entries `V(x) - 2d`.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.sites.binary_search(x).ok()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    /// `y = (Δ + V) x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.len() {
            let mut s = self.diag[i] * x[i];
            for &j in self.neighbors(i) {
                s += x[j as usize];
            }
            y[i] = s;
        }
    }

    /// `y_i = ((Δ + V) x)_i` for `i` in `range`; other entries are untouched.
    pub fn apply_range(&self, x: &[f64], y: &mut [f64], range: Range<usize>) {
        for i in range {
            let mut s = self.diag[i] * x[i];
            for &j in self.neighbors(i) {
                s += x[j as usize];
            }
            y[i] = s;
        }
    }

    /// Smallest index window holding `range` and all neighbors of its sites.
    pub fn widen(&self, range: Range<usize>) -> Range<usize> {
        if range.is_empty() {
            return range;
        }
        let (mut lo, mut hi) = (range.start, range.end);
        for i in range {
            for &j in self.neighbors(i) {
                lo = lo.min(j as usize);
                hi = hi.max(j as usize + 1);
            }
        }
        lo..hi
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        y
    }

    /// `max_i V(x_i)`, an upper bound of the spectrum.
    pub fn max_potential(&self) -> f64 {
        self.diag.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d)) + 2.0 * self.dim as f64
    }

    /// Residual scale `‖V‖∞ + 2d`.
    pub fn scale(&self) -> f64 {
        let two_d = 2.0 * self.dim as f64;
        self.diag.iter().fold(0.0f64, |m, &d| m.max((d + two_d).abs())) + two_d
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &j in self.neighbors(i) {
                m[(i, j as usize)] = 1.0;
            }
        }
        m
    }

    /// Off-diagonal couplings when the operator is a chain (`d = 1`).
    fn chain_couplings(&self) -> Option<Vec<f64>> {
        if self.dim != 1 {
            return None;
        }
        Some(
            self.sites
                .windows(2)
                .map(|w| if w[1].coords()[0] - w[0].coords()[0] == 1 { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// `‖(Δ+V)e - λe‖∞`.
    pub fn residual(&self, lambda: f64, e: &[f64]) -> f64 {
        let ae = self.apply_vec(e);
        ae.iter().zip(e).map(|(a, b)| (a - lambda * b).abs()).fold(0.0, f64::max)
    }
}

/// Normalization of an eigenfunction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Normalization {
    UnitL2,
    Anchor(Site),
}

/// Principal eigenvalue and positive eigenfunction on an effective domain.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralPair {
    pub eigenvalue: f64,
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
    pub normalization: Normalization,
    pub residual: f64,
}

impl SpectralPair {
    fn empty(normalization: Normalization) -> Self {
        SpectralPair {
            eigenvalue: f64::NEG_INFINITY,
            sites: Vec::new(),
            values: Vec::new(),
            normalization,
            residual: 0.0,
        }
    }

    /// Eigenfunction value, `0` off the effective domain.
    pub fn value(&self, x: &Site) -> f64 {
        self.sites.binary_search(x).map(|i| self.values[i]).unwrap_or(0.0)
    }

    pub fn norm2_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, f64)> {
        self.sites.iter().zip(self.values.iter().copied())
    }
}

/// Top eigenvalue and unit eigenvector of an operator, sign fixed so the
/// vector is nonnegative.
pub fn principal_of(op: &Operator, tol: f64) -> Result<(f64, Vec<f64>)> {
    let (mut lambda, mut vec) = if let Some(off) = op.chain_couplings() {
        tridiagonal_principal(op.diag(), &off)?
    } else if op.len() <= DENSE_MAX {
        let (vals, vecs) = dense_top(op, 1);
        (vals[0], vecs.into_iter().next().expect("one eigenvector"))
    } else {
        let (vals, vecs) = lanczos_top(op, 1, tol)?;
        (vals[0], vecs.into_iter().next().expect("one eigenvector"))
    };
    fix_sign(&mut vec);
    // Rayleigh quotient refinement.
    let av = op.apply_vec(&vec);
    let rq: f64 = av.iter().zip(&vec).map(|(a, b)| a * b).sum::<f64>() / vec.iter().map(|x| x * x).sum::<f64>();
    if rq.is_finite() {
        lambda = rq;
    }
    let res = op.residual(lambda, &vec);
    let bound = tol.max(DEFAULT_TOL) * op.scale();
    if res > bound {
        return Err(Error::Residual { residual: res, tol: bound });
    }
    Ok((lambda, vec))
}

fn fix_sign(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    let flip = if s < 0.0 { -1.0 } else { 1.0 };
    for x in v.iter_mut() {
        *x = (*x * flip).abs();
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// `λ_A(V)` and its eigenfunction.
pub fn principal_eigenpair(
    a: &SiteSet,
    v: &PotentialField,
    normalization: Normalization,
    tol: f64,
) -> Result<SpectralPair> {
    let op = Operator::from_field(a, v);
    pair_from_operator(&op, normalization, tol)
}

/// Eigenpair from an assembled operator.
pub fn pair_from_operator(op: &Operator, normalization: Normalization, tol: f64) -> Result<SpectralPair> {
    if op.is_empty() {
        return Ok(SpectralPair::empty(normalization));
    }
    let (lambda, mut vec) = principal_of(op, tol)?;
    let residual = op.residual(lambda, &vec);
    if let Normalization::Anchor(y) = &normalization {
        let vy = match op.index_of(y) {
            Some(i) if vec[i] > 0.0 && carries_weight(op, &vec, i) => vec[i],
            _ => return Err(Error::NullAnchor(y.to_string())),
        };
        for x in vec.iter_mut() {
            *x /= vy;
        }
        return Ok(SpectralPair {
            eigenvalue: lambda,
            sites: op.sites().to_vec(),
            values: vec,
            normalization,
            residual: residual / vy,
        });
    }
    Ok(SpectralPair { eigenvalue: lambda, sites: op.sites().to_vec(), values: vec, normalization, residual })
}

/// Whether the connected component of site `i` carries a non-negligible
/// share of the eigenvector.
fn carries_weight(op: &Operator, vec: &[f64], i: usize) -> bool {
    let vmax = vec.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut seen = vec![false; op.len()];
    let mut stack = vec![i];
    seen[i] = true;
    let mut local = 0.0f64;
    while let Some(k) = stack.pop() {
        local = local.max(vec[k]);
        for &j in op.neighbors(k) {
            if !seen[j as usize] {
                seen[j as usize] = true;
                stack.push(j as usize);
            }
        }
    }
    local > 1e-8 * vmax
}

/// `λ_A(V)` only.
pub fn principal_eigenvalue(a: &SiteSet, v: &PotentialField, tol: f64) -> Result<f64> {
    let op = Operator::from_field(a, v);
    if op.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(principal_of(&op, tol)?.0)
}

/// `λ_B(V̇)`: the principal eigenvalue with `-∞` imposed at `dot`.
pub fn dotted_principal_eigenvalue(b: &BoxDomain, v: &PotentialField, dot: &Site, tol: f64) -> Result<f64> {
    if !b.contains(dot) {
        return Err(Error::OutsideDomain);
    }
    let op = Operator::new(&b.to_site_set(), |x| if x == dot { f64::NEG_INFINITY } else { v.value(x) });
    if op.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(principal_of(&op, tol)?.0)
}

/// Value of the rate functional together with the admissibility flag
/// (`V ≤ 0` on `A`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScriptL {
    pub value: f64,
    pub admissible: bool,
}

/// `Σ_{x∈A} e^{V(x)/ρ}`, or the number of finite sites for `ρ = ∞`.
pub fn script_l(a: &SiteSet, v: &PotentialField, rho: Rho) -> ScriptL {
    let mut value = 0.0;
    let mut admissible = true;
    for x in a {
        let vx = v.value(x);
        if vx > 0.0 {
            admissible = false;
        }
        value += match rho {
            Rho::Finite(r) => (vx / r).exp(),
            Rho::Infinite => {
                if vx > f64::NEG_INFINITY {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    ScriptL { value, admissible }
}

/// Semigroup evaluation strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Eigen,
    Krylov,
    /// Poisson series in a nonnegative matrix; every term is nonnegative
    /// for nonnegative input, so values keep componentwise relative accuracy.
    Uniformization,
}

/// A nonnegative lattice function stored as `values · e^{log_scale}` on a
/// sorted site list; zero elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaledField {
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledField {
    pub fn zero() -> Self {
        ScaledField { sites: Vec::new(), values: Vec::new(), log_scale: 0.0 }
    }

    /// Raw stored value at `x` (without the scale).
    pub fn raw(&self, x: &Site) -> f64 {
        self.sites.binary_search(x).map(|i| self.values[i]).unwrap_or(0.0)
    }

    pub fn get(&self, x: &Site) -> f64 {
        self.raw(x) * self.log_scale.exp()
    }

    /// `log u(x)`, `-∞` where `u(x) = 0`.
    pub fn log_value(&self, x: &Site) -> f64 {
        let r = self.raw(x);
        if r > 0.0 {
            r.ln() + self.log_scale
        } else {
            f64::NEG_INFINITY
        }
    }

    /// `log Σ u`.
    pub fn log_sum(&self) -> f64 {
        let s: f64 = self.values.iter().sum();
        if s > 0.0 {
            s.ln() + self.log_scale
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, f64)> {
        self.sites.iter().zip(self.values.iter().copied())
    }

    /// Same function stored with another scale.
    pub fn rescaled(&self, log_scale: f64) -> ScaledField {
        let f = (self.log_scale - log_scale).exp();
        ScaledField {
            sites: self.sites.clone(),
            values: self.values.iter().map(|v| v * f).collect(),
            log_scale,
        }
    }

    /// Raw values on a sorted site list at the given scale.
    pub fn on_sites(&self, sites: &[Site], log_scale: f64) -> Vec<f64> {
        let f = (self.log_scale - log_scale).exp();
        sites.iter().map(|x| self.raw(x) * f).collect()
    }
}

/// `e^{t(Δ+V)} f0` with zero Dirichlet condition outside `A`.
pub fn semigroup_apply(
    a: &SiteSet,
    v: &PotentialField,
    t: f64,
    f0: impl Fn(&Site) -> f64,
    method: Method,
) -> Result<ScaledField> {
    let op = Operator::from_field(a, v);
    semigroup_on(&op, t, &f0, method, KRYLOV_TOL)
}

/// Semigroup on an assembled operator.
pub fn semigroup_on(
    op: &Operator,
    t: f64,
    f0: &dyn Fn(&Site) -> f64,
    method: Method,
    tol: f64,
) -> Result<ScaledField> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Invalid(format!("time must be nonnegative, got {t}")));
    }
    let init: Vec<f64> = op.sites().iter().map(f0).collect();
    if op.is_empty() {
        return Ok(ScaledField::zero());
    }
    if t == 0.0 {
        return Ok(ScaledField { sites: op.sites().to_vec(), values: init, log_scale: 0.0 });
    }
    let beta: f64 = init.iter().map(|x| x * x).sum::<f64>().sqrt();
    if beta == 0.0 {
        return Ok(ScaledField { sites: op.sites().to_vec(), values: init, log_scale: 0.0 });
    }
    let w0: Vec<f64> = init.iter().map(|x| x / beta).collect();
    let (mut w, log_scale) = match method {
        Method::Eigen => dense_expv(op, &w0, t)?,
        Method::Krylov => krylov_expv(op, &w0, t, tol)?,
        Method::Uniformization => uniformized_expv(op, &w0, t),
    };
    if init.iter().all(|&x| x >= 0.0) {
        for x in w.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    Ok(ScaledField { sites: op.sites().to_vec(), values: w, log_scale: log_scale + beta.ln() })
}

fn dense_expv(op: &Operator, w0: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
    if op.len() > DENSE_EXPANSION_MAX {
        return Err(Error::Invalid(format!(
            "eigen expansion limited to {DENSE_EXPANSION_MAX} sites, got {}",
            op.len()
        )));
    }
    let eig = SymmetricEigen::new(op.dense());
    let top = eig.eigenvalues.max();
    let f = DVector::from_column_slice(w0);
    let coef = eig.eigenvectors.transpose() * &f;
    let scaled = DVector::from_iterator(
        coef.len(),
        coef.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c * (t * (l - top)).exp()),
    );
    let w = &eig.eigenvectors * scaled;
    let n = w.norm();
    if n == 0.0 {
        return Ok((w.as_slice().to_vec(), 0.0));
    }
    Ok((w.iter().map(|x| x / n).collect(), t * top + n.ln()))
}

const UNIFORM_STEP: f64 = 20.0;

/// `e^{tA} w0` as `e^{tc} Σ_k Poisson(τΛ; k) P^k` over substeps, with
/// `P = I + (A - c)/Λ` entrywise nonnegative.
/// Index window of the nonzero entries of all `vs`.
fn support_window(vs: &[Vec<f64>]) -> Range<usize> {
    let n = vs.first().map_or(0, |v| v.len());
    let nz = |i: &usize| vs.iter().any(|v| v[*i] != 0.0);
    match ((0..n).find(nz), (0..n).rev().find(nz)) {
        (Some(lo), Some(hi)) => lo..hi + 1,
        _ => 0..0,
    }
}

fn uniformized_expv(op: &Operator, w0: &[f64], t: f64) -> (Vec<f64>, f64) {
    let n = op.len();
    let c = op.diag().iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d));
    let lo = op.diag().iter().fold(f64::INFINITY, |m, &d| m.min(d));
    let lam = c - lo + 2.0 * op.dim() as f64;
    let mut w = w0.to_vec();
    let mut log_scale = 0.0;
    let mut done = 0.0;
    let mut term = vec![0.0; n];
    let mut next = vec![0.0; n];
    let sup = |v: &[f64], r: Range<usize>| v[r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while done < t {
        let tau = (UNIFORM_STEP / lam).min(t - done);
        let mu = tau * lam;
        let mut weight = (-mu).exp();
        let mut acc: Vec<f64> = w.iter().map(|x| weight * x).collect();
        term.copy_from_slice(&w);
        next.fill(0.0);
        let mut win = support_window(std::slice::from_ref(&w));
        let mut k = 0usize;
        loop {
            k += 1;
            win = op.widen(win);
            op.apply_range(&term, &mut next, win.clone());
            for i in win.clone() {
                next[i] = term[i] + (next[i] - c * term[i]) / lam;
            }
            std::mem::swap(&mut term, &mut next);
            weight *= mu / k as f64;
            for i in win.clone() {
                acc[i] += weight * term[i];
            }
            if k as f64 > mu && weight * sup(&term, win.clone()) <= 1e-18 * sup(&acc, win.clone()) {
                break;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (acc, 0.0);
        }
        for x in acc.iter_mut() {
            *x /= norm;
        }
        log_scale += tau * c + norm.ln();
        w = acc;
        done += tau;
    }
    (w, log_scale)
}

/// Nested propagation for domains `A_0 ⊇ A_1 ⊇ … ⊇ A_{m-1}` given on the
/// sites of `op` (which is `A_0`) by `level[i] = max{j : x_i ∈ A_j}`.
///
/// Returns `z_j = e^{tH_j} f0 - e^{tH_{j+1}} f0` for `j < m - 1` and
/// `z_{m-1} = e^{tH_{m-1}} f0` at a common scale. Each `z_j` is built from
/// nonnegative terms only, so differences of nearly equal solutions carry
/// componentwise relative accuracy instead of cancellation error.
pub fn nested_uniformization(
    op: &Operator,
    level: &[usize],
    depth: usize,
    t: f64,
    f0: &dyn Fn(&Site) -> f64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let n = op.len();
    if level.len() != n || depth == 0 || level.iter().any(|&l| l >= depth) {
        return Err(Error::Invalid("nested levels do not match the operator".into()));
    }
    if t < 0.0 || t.is_nan() {
        return Err(Error::Invalid(format!("time must be nonnegative, got {t}")));
    }
    let mut z = vec![vec![0.0; n]; depth];
    for (i, x) in op.sites().iter().enumerate() {
        let v = f0(x);
        if v < 0.0 {
            return Err(Error::Invalid("nested propagation needs nonnegative data".into()));
        }
        z[level[i]][i] = v;
    }
    if n == 0 || t == 0.0 {
        return Ok((z, 0.0));
    }
    let c = op.diag().iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d));
    let lo = op.diag().iter().fold(f64::INFINITY, |m, &d| m.min(d));
    let lam = c - lo + 2.0 * op.dim() as f64;
    let mut log_scale = 0.0;
    let mut done = 0.0;
    let mut y = vec![vec![0.0; n]; depth];
    let mut tmp = vec![0.0; n];
    let total_sup =
        |z: &[Vec<f64>], r: Range<usize>| r.map(|i| z.iter().map(|c| c[i]).sum::<f64>()).fold(0.0f64, f64::max);
    while done < t {
        let tau = (UNIFORM_STEP / lam).min(t - done);
        let mu = tau * lam;
        let mut weight = (-mu).exp();
        let mut acc: Vec<Vec<f64>> = z.iter().map(|c| c.iter().map(|x| weight * x).collect()).collect();
        let mut term = z.clone();
        let mut win = support_window(&z);
        let mut k = 0usize;
        loop {
            k += 1;
            win = op.widen(win);
            for j in 0..depth {
                op.apply_range(&term[j], &mut tmp, win.clone());
                for i in win.clone() {
                    y[j][i] = term[j][i] + (tmp[i] - c * term[j][i]) / lam;
                }
            }
            for i in win.clone() {
                let l = level[i];
                let mut spill = 0.0;
                for j in (0..depth).rev() {
                    if j > l {
                        spill += y[j][i];
                        term[j][i] = 0.0;
                    } else if j == l {
                        term[j][i] = y[j][i] + spill;
                    } else {
                        term[j][i] = y[j][i];
                    }
                }
            }
            weight *= mu / k as f64;
            for j in 0..depth {
                for i in win.clone() {
                    acc[j][i] += weight * term[j][i];
                }
            }
            if k as f64 > mu && weight * total_sup(&term, win.clone()) <= 1e-18 * total_sup(&acc, win.clone()) {
                break;
            }
        }
        let norm = (0..n).map(|i| acc.iter().map(|c| c[i]).sum::<f64>().powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok((acc, 0.0));
        }
        for c in acc.iter_mut() {
            for x in c.iter_mut() {
                *x /= norm;
            }
        }
        log_scale += tau * c + norm.ln();
        z = acc;
        done += tau;
    }
    Ok((z, log_scale))
}

/// A nonnegative lattice function stored by its logarithm; `-∞` marks zeros.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogField {
    pub sites: Vec<Site>,
    pub log_values: Vec<f64>,
}

impl LogField {
    /// `log u(x)`, `-∞` off the support.
    pub fn log_value(&self, x: &Site) -> f64 {
        self.sites.binary_search(x).map(|i| self.log_values[i]).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn log_max(&self) -> f64 {
        self.log_values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `log Σ u` over the sites accepted by `keep`.
    pub fn log_sum_where(&self, keep: impl Fn(&Site) -> bool) -> f64 {
        log_sum_exp(self.sites.iter().zip(&self.log_values).filter(|(x, _)| keep(x)).map(|(_, &v)| v))
    }

    pub fn log_sum(&self) -> f64 {
        self.log_sum_where(|_| true)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, f64)> {
        self.sites.iter().zip(self.log_values.iter().copied())
    }
}

impl From<&ScaledField> for LogField {
    fn from(u: &ScaledField) -> Self {
        let log_values = u
            .values
            .iter()
            .map(|&v| if v > 0.0 { v.ln() + u.log_scale } else { f64::NEG_INFINITY })
            .collect();
        LogField { sites: u.sites.clone(), log_values }
    }
}

/// `log Σ e^{v}` with `-∞` for an empty or all-zero sum.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn add_log(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY || lo < hi + NEGLIGIBLE {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Log-ratio below which a summand cannot change a double.
const NEGLIGIBLE: f64 = -40.0;

const LOG_STEP: f64 = 500.0;
const LOG_TAIL: f64 = -40.0;
const LOG_FLOOR: f64 = -2000.0;

/// `log e^{tH} u0` by uniformization carried out in logarithms, so values far
/// below the double range of `max u` keep their relative accuracy.
pub fn log_semigroup(op: &Operator, t: f64, log_u0: &[f64]) -> Result<LogField> {
    let n = op.len();
    if log_u0.len() != n {
        return Err(Error::Invalid("initial data does not match the operator".into()));
    }
    if t < 0.0 || t.is_nan() {
        return Err(Error::Invalid(format!("time must be nonnegative, got {t}")));
    }
    let mut l = log_u0.to_vec();
    if n == 0 || t == 0.0 {
        return Ok(LogField { sites: op.sites().to_vec(), log_values: l });
    }
    let c = op.diag().iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d));
    let lo = op.diag().iter().fold(f64::INFINITY, |m, &d| m.min(d));
    let lam = c - lo + 2.0 * op.dim() as f64;
    let log_off = -lam.ln();
    let log_self: Vec<f64> = op.diag().iter().map(|&d| (1.0 + (d - c) / lam).ln()).collect();
    let mut shift = 0.0;
    let mut done = 0.0;
    let mut next = vec![0.0; n];
    while done < t {
        let tau = (LOG_STEP / lam).min(t - done);
        let mu = tau * lam;
        let mut log_weight = -mu;
        let mut acc: Vec<f64> = l.iter().map(|&v| v + log_weight).collect();
        let mut term = l.clone();
        next.fill(f64::NEG_INFINITY);
        let first = l.iter().position(|v| v.is_finite());
        let last = l.iter().rposition(|v| v.is_finite());
        let mut win = match (first, last) {
            (Some(a), Some(b)) => a..b + 1,
            _ => 0..0,
        };
        let mut k = 0usize;
        loop {
            k += 1;
            win = op.widen(win);
            for i in win.clone() {
                let own = log_self[i] + term[i];
                let m = op.neighbors(i).iter().fold(own, |m, &j| m.max(log_off + term[j as usize]));
                if m == f64::NEG_INFINITY {
                    next[i] = m;
                    continue;
                }
                let mut sum = 0.0;
                for v in std::iter::once(own).chain(op.neighbors(i).iter().map(|&j| log_off + term[j as usize])) {
                    let d = v - m;
                    if d == 0.0 {
                        sum += 1.0;
                    } else if d > NEGLIGIBLE {
                        sum += d.exp();
                    }
                }
                next[i] = m + sum.ln();
            }
            std::mem::swap(&mut term, &mut next);
            log_weight += (mu / k as f64).ln();
            let mut top = f64::NEG_INFINITY;
            for i in win.clone() {
                acc[i] = add_log(acc[i], log_weight + term[i]);
                top = top.max(acc[i]);
            }
            let settled = win.clone().all(|i| acc[i] < top + LOG_FLOOR || log_weight + term[i] < acc[i] + LOG_TAIL);
            if k as f64 > mu && settled {
                break;
            }
        }
        let top = acc.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if top == f64::NEG_INFINITY {
            return Ok(LogField { sites: op.sites().to_vec(), log_values: acc });
        }
        for v in acc.iter_mut() {
            *v -= top;
        }
        shift += tau * c + top;
        l = acc;
        done += tau;
    }
    for v in l.iter_mut() {
        *v += shift;
    }
    Ok(LogField { sites: op.sites().to_vec(), log_values: l })
}

/// Symmetric tridiagonal `exp(τT) e_1`.
fn small_expm_e1(alpha: &[f64], beta: &[f64], tau: f64) -> Vec<f64> {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| eig.eigenvectors[(i, j)] * (tau * eig.eigenvalues[j]).exp() * eig.eigenvectors[(0, j)])
                .sum()
        })
        .collect()
}

/// Lanczos propagation of a unit vector under `e^{t(A - s)}`, `s` an upper
/// bound of the spectrum; returns a unit vector and the log of its norm.
fn krylov_expv(op: &Operator, w0: &[f64], t: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let n = op.len();
    let s = op.max_potential();
    let nb = s - op.diag().iter().fold(f64::INFINITY, |m, &d| m.min(d)) + 2.0 * op.dim() as f64;
    let m = 30.min(n);
    let mbig = (m + 4).min(n);
    let mut w = w0.to_vec();
    let mut log_scale = s * t;
    let mut done = 0.0;
    let mut tau = (t).min(10.0 / nb.max(1e-300));
    let mut steps = 0usize;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(mbig + 1);
    let mut tmp = vec![0.0; n];
    while done < t {
        steps += 1;
        if steps > 200_000 {
            return Err(Error::Krylov("too many substeps".into()));
        }
        tau = tau.min(t - done);
        basis.clear();
        basis.push(w.clone());
        let mut alpha = Vec::with_capacity(mbig);
        let mut beta = Vec::with_capacity(mbig);
        let mut breakdown = false;
        for j in 0..mbig {
            op.apply(&basis[j], &mut tmp);
            let mut r: Vec<f64> = tmp.iter().zip(&basis[j]).map(|(a, b)| a - s * b).collect();
            for _ in 0..2 {
                for q in basis.iter() {
                    let c: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (ri, qi) in r.iter_mut().zip(q) {
                        *ri -= c * qi;
                    }
                }
            }
            let a_j: f64 = {
                let mut y = vec![0.0; n];
                op.apply(&basis[j], &mut y);
                y.iter().zip(&basis[j]).map(|(a, b)| a * b).sum::<f64>() - s
            };
            alpha.push(a_j);
            let b = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if j + 1 == mbig {
                break;
            }
            if b <= 1e-13 * nb.max(1.0) {
                breakdown = true;
                break;
            }
            beta.push(b);
            basis.push(r.into_iter().map(|x| x / b).collect());
        }
        let k = alpha.len();
        loop {
            let (y, err) = if breakdown || k < mbig || k == n {
                (small_expm_e1(&alpha, &beta[..k - 1], tau), 0.0)
            } else {
                let big = small_expm_e1(&alpha, &beta[..k - 1], tau);
                let small = small_expm_e1(&alpha[..m], &beta[..m - 1], tau);
                let num: f64 = (0..k)
                    .map(|i| {
                        let d = big[i] - small.get(i).copied().unwrap_or(0.0);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                let den = big.iter().map(|x| x * x).sum::<f64>().sqrt();
                (big, if den > 0.0 { num / den } else { 0.0 })
            };
            if err <= tol {
                let mut next = vec![0.0; n];
                for (c, q) in y.iter().zip(&basis) {
                    for (ni, qi) in next.iter_mut().zip(q) {
                        *ni += c * qi;
                    }
                }
                let nn = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nn == 0.0 || !nn.is_finite() {
                    return Err(Error::Krylov("propagated vector vanished".into()));
                }
                for x in next.iter_mut() {
                    *x /= nn;
                }
                log_scale += nn.ln();
                w = next;
                done += tau;
                if err < tol * 1e-3 {
                    tau *= 2.0;
                }
                break;
            }
            tau *= 0.5;
            if tau < 1e-14 * t {
                return Err(Error::Krylov(format!("step size underflow at t = {done}")));
            }
        }
    }
    Ok((w, log_scale))
}

/// Solution of `[Δ + V - γ] v = γ - V` on `A`, zero outside.
#[derive(Clone, Debug, Serialize)]
pub struct ResolventSolution {
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    /// `2d |A| / (γ - λ_A(V))`.
    pub bound: f64,
}

impl ResolventSolution {
    pub fn value(&self, x: &Site) -> f64 {
        self.sites.binary_search(x).map(|i| self.values[i]).unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Resolvent boundary-value solve; errors when `γ ≤ λ_A(V)`.
pub fn resolvent_solve(a: &SiteSet, v: &PotentialField, gamma: f64) -> Result<ResolventSolution> {
    let op = Operator::from_field(a, v);
    let lambda = if op.is_empty() { f64::NEG_INFINITY } else { principal_of(&op, DEFAULT_TOL)?.0 };
    if gamma <= lambda {
        return Err(Error::SingularSystem { gamma, lambda });
    }
    let n = op.len();
    // M = γ - (Δ + V) is positive definite; solve M v = V - γ.
    let rhs: Vec<f64> = op.diag().iter().map(|d| d + 2.0 * op.dim() as f64 - gamma).collect();
    let values = if n == 0 {
        Vec::new()
    } else if n <= 1500 {
        let m = DMatrix::identity(n, n) * gamma - op.dense();
        let chol = m.cholesky().ok_or(Error::SingularSystem { gamma, lambda })?;
        chol.solve(&DVector::from_vec(rhs)).as_slice().to_vec()
    } else {
        conjugate_gradient(|x, y| {
            op.apply(x, y);
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = gamma * xi - *yi;
            }
        }, &rhs, 1e-14, 20 * n)?
    };
    let bound = 2.0 * op.dim() as f64 * a.len() as f64 / (gamma - lambda);
    Ok(ResolventSolution { sites: op.sites().to_vec(), values, lambda, gamma, bound })
}

fn conjugate_gradient(apply: impl Fn(&[f64], &mut [f64]), b: &[f64], rtol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for it in 0..max_iter {
        if rr.sqrt() <= rtol * bnorm.max(1e-300) {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        if it + 1 == max_iter {
            break;
        }
    }
    Err(Error::EigenNonConvergence { iterations: max_iter, residual: rr.sqrt() / bnorm })
}

/// `∇λ_A(V) = v_V²` with `v_V` the unit eigenfunction. Errors when the gap
/// to the second eigenvalue is below `gap_tol`.
pub fn eigenvalue_gradient(a: &SiteSet, v: &PotentialField, gap_tol: f64) -> Result<SpectralPair> {
    let op = Operator::from_field(a, v);
    if op.is_empty() {
        return Err(Error::EmptyArgument("eigenvalue gradient on an empty domain"));
    }
    let top = leading_eigenvalues(&op, 2)?;
    if top.len() > 1 && top[0] - top[1] <= gap_tol {
        return Err(Error::DegenerateSpectrum { gap: top[0] - top[1] });
    }
    let mut pair = pair_from_operator(&op, Normalization::UnitL2, DEFAULT_TOL)?;
    for x in pair.values.iter_mut() {
        *x *= *x;
    }
    Ok(pair)
}

/// The `k` largest eigenvalues in decreasing order.
pub fn leading_eigenvalues(op: &Operator, k: usize) -> Result<Vec<f64>> {
    let k = k.min(op.len());
    if let Some(off) = op.chain_couplings() {
        return Ok((0..k).map(|j| sturm_kth_largest(op.diag(), &off, j)).collect());
    }
    if op.len() <= DENSE_EXPANSION_MAX.min(1000) {
        return Ok(dense_top(op, k).0);
    }
    Ok(lanczos_top(op, k, DEFAULT_TOL)?.0)
}

/// Leading `k` eigenpairs (unit vectors) for spectral expansions.
pub fn leading_eigenpairs(op: &Operator, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = k.min(op.len());
    if op.len() <= DENSE_EXPANSION_MAX {
        return Ok(dense_top(op, k));
    }
    lanczos_top(op, k, DEFAULT_TOL)
}

fn dense_top(op: &Operator, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(op.dense());
    let mut order: Vec<usize> = (0..op.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order.iter().take(k).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
    (vals, vecs)
}

/// Number of eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0f64;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if b2 == 0.0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// The `j`-th largest eigenvalue (0-based) by bisection.
fn sturm_kth_largest(diag: &[f64], off: &[f64], j: usize) -> f64 {
    let n = diag.len();
    let mut lo = diag.iter().fold(f64::INFINITY, |m, &d| m.min(d)) - 2.0;
    let mut hi = diag.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(d)) + 2.0;
    // Want the smallest x with #(eigenvalues < x) ≥ n - j.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) >= n - j {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn tridiagonal_principal(diag: &[f64], off: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = diag.len();
    if n == 1 {
        return Ok((diag[0], vec![1.0]));
    }
    let lambda = sturm_kth_largest(diag, off, 0);
    let scale = diag.iter().fold(0.0f64, |m, &d| m.max(d.abs())) + 2.0;
    let shift = lambda + 4.0 * f64::EPSILON * scale;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..4 {
        let mut dl = off.to_vec();
        let mut du = off.to_vec();
        let mut d: Vec<f64> = diag.iter().map(|a| a - shift).collect();
        let mut b = x.clone();
        tridiagonal_solve(&mut dl, &mut d, &mut du, &mut b, scale);
        let nrm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(Error::EigenNonConvergence { iterations: 4, residual: f64::NAN });
        }
        x = b.into_iter().map(|v| v / nrm).collect();
    }
    Ok((lambda, x))
}

/// Gaussian elimination with partial pivoting for a tridiagonal system;
/// zero pivots are perturbed as in inverse iteration.
pub(crate) fn tridiagonal_solve(dl: &mut [f64], d: &mut [f64], du: &mut [f64], b: &mut [f64], scale: f64) {
    let n = d.len();
    let tiny = f64::EPSILON * scale;
    let mut du2 = vec![0.0; n.saturating_sub(2)];
    for i in 0..n - 1 {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                d[i] = tiny;
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            b[i + 1] -= fact * b[i];
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if i + 2 < n {
                du2[i] = du[i + 1];
                du[i + 1] = -fact * du2[i];
            }
            du[i] = temp;
            b.swap(i, i + 1);
            b[i + 1] -= fact * b[i];
        }
    }
    if d[n - 1] == 0.0 {
        d[n - 1] = tiny;
    }
    b[n - 1] /= d[n - 1];
    b[n - 2] = (b[n - 2] - du[n - 2] * b[n - 1]) / d[n - 2];
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - du[i] * b[i + 1] - du2[i] * b[i + 2]) / d[i];
    }
}

/// Thick-restart Lanczos with full reorthogonalization; returns the `nev`
/// largest Ritz pairs.
fn lanczos_top(op: &Operator, nev: usize, tol: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = op.len();
    let m = n.min((2 * nev + 40).max(60));
    let keep = (nev + 10).min(m / 2).max(nev);
    let scale = op.scale();
    let thresh = tol.max(DEFAULT_TOL) * scale * 0.5;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(m);
    let push = |v: Vec<f64>, basis: &mut Vec<Vec<f64>>, images: &mut Vec<Vec<f64>>| {
        images.push(op.apply_vec(&v));
        basis.push(v);
    };
    let orthonormalize = |mut w: Vec<f64>, basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        let before = dot(&w, &w).sqrt();
        for _ in 0..2 {
            for q in basis {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let nrm = dot(&w, &w).sqrt();
        if nrm <= 1e-10 * before.max(1e-300) || nrm == 0.0 {
            None
        } else {
            Some(w.into_iter().map(|x| x / nrm).collect())
        }
    };
    push(vec![1.0 / (n as f64).sqrt(); n], &mut basis, &mut images);
    let mut fallback_seed = 1u64;
    let max_restarts = 2000;
    let mut last_res = f64::INFINITY;
    for _restart in 0..max_restarts {
        while basis.len() < m {
            let cand = images.last().expect("nonempty").clone();
            match orthonormalize(cand, &basis) {
                Some(v) => push(v, &mut basis, &mut images),
                None => {
                    // Invariant subspace reached; continue with a fresh direction.
                    let mut found = false;
                    for _ in 0..8 {
                        let fresh: Vec<f64> = (0..n)
                            .map(|i| {
                                fallback_seed = fallback_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407 ^ i as u64);
                                ((fallback_seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                            })
                            .collect();
                        if let Some(v) = orthonormalize(fresh, &basis) {
                            push(v, &mut basis, &mut images);
                            found = true;
                            break;
                        }
                    }
                    if !found {
                        break;
                    }
                }
            }
        }
        let k = basis.len();
        let mut h = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i]));
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let kk = keep.min(k);
        let mut ritz = Vec::with_capacity(kk);
        let mut ritz_img = Vec::with_capacity(kk);
        for &c in order.iter().take(kk) {
            let mut u = vec![0.0; n];
            let mut au = vec![0.0; n];
            for l in 0..k {
                let y = eig.eigenvectors[(l, c)];
                for i in 0..n {
                    u[i] += y * basis[l][i];
                    au[i] += y * images[l][i];
                }
            }
            ritz.push(u);
            ritz_img.push(au);
        }
        let vals: Vec<f64> = order.iter().take(kk).map(|&c| eig.eigenvalues[c]).collect();
        let resid: Vec<Vec<f64>> = (0..kk)
            .map(|i| ritz_img[i].iter().zip(&ritz[i]).map(|(a, u)| a - vals[i] * u).collect())
            .collect();
        let worst = (0..nev.min(kk))
            .map(|i| resid[i].iter().fold(0.0f64, |m, r| m.max(r.abs())))
            .fold(0.0, f64::max);
        last_res = worst;
        if worst <= thresh || k == n {
            return Ok((vals[..nev.min(kk)].to_vec(), ritz.into_iter().take(nev).collect()));
        }
        basis = ritz;
        images = ritz_img;
        let mut next = None;
        for r in resid.iter().take(nev.min(kk)) {
            if let Some(v) = orthonormalize(r.clone(), &basis) {
                next = Some(v);
                break;
            }
        }
        match next {
            Some(v) => push(v, &mut basis, &mut images),
            None => return Ok((vals[..nev.min(kk)].to_vec(), basis.into_iter().take(nev).collect())),
        }
    }
    Err(Error::EigenNonConvergence { iterations: max_restarts * m, residual: last_res })
}

/// Result of scanning small subboxes of a box.
#[derive(Clone, Debug, Serialize)]
pub struct SubboxScan {
    pub lambda_box: f64,
    pub lambda_sub_max: f64,
    pub argmax: Site,
    pub gap: f64,
}

/// `λ_B(V)` against `max_x λ_{B_n(x) ∩ B}(V)`.
pub fn subbox_eigenvalue_scan(b: &BoxDomain, v: &PotentialField, n: u64) -> Result<SubboxScan> {
    if n > b.radius {
        return Err(Error::Invalid(format!("subbox radius {n} exceeds box radius {}", b.radius)));
    }
    let lambda_box = principal_eigenvalue(&b.to_site_set(), v, DEFAULT_TOL)?;
    let mut best = f64::NEG_INFINITY;
    let mut argmax = b.center.clone();
    for x in b.sites() {
        let sub = BoxDomain::new(x.clone(), n);
        let set = b.intersect(&sub).unwrap_or_default();
        let l = principal_eigenvalue(&set, v, DEFAULT_TOL)?;
        if l > best {
            best = l;
            argmax = x;
        }
    }
    let slack = 1e-10 * (1.0 + lambda_box.abs());
    if best > lambda_box + slack {
        return Err(Error::Invalid(format!(
            "domain monotonicity violated: subbox {best} above box {lambda_box}"
        )));
    }
    Ok(SubboxScan { lambda_box, lambda_sub_max: best, argmax, gap: lambda_box - best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randfield::{sample_field, TailModel};

    fn line(values: &[f64]) -> (SiteSet, PotentialField) {
        let r = (values.len() / 2) as u64;
        let b = BoxDomain::centered(1, r);
        (b.to_site_set(), PotentialField::from_values(b, values.to_vec()).unwrap())
    }

    #[test]
    fn single_site_and_pair() {
        let (a, v) = line(&[3.5]);
        let p = principal_eigenpair(&a, &v, Normalization::UnitL2, DEFAULT_TOL).unwrap();
        assert!((p.eigenvalue - 1.5).abs() < 1e-12);
        let b = BoxDomain::new(Site::from(0), 1);
        let v = PotentialField::constant(b.clone(), 0.0);
        let pair: SiteSet = [Site::from(0), Site::from(1)].into_iter().collect();
        assert!((principal_eigenvalue(&pair, &v, DEFAULT_TOL).unwrap() + 1.0).abs() < 1e-10);
        let d = dotted_principal_eigenvalue(&BoxDomain::new(Site::from(0), 0), &v, &Site::from(0), 1e-12).unwrap();
        assert_eq!(d, f64::NEG_INFINITY);
    }

    #[test]
    fn dotted_pair() {
        // B = {0, 1} realized as a field that is -inf off the pair.
        let b = BoxDomain::new(Site::from(0), 1);
        let mut v = PotentialField::constant(b.clone(), 0.0);
        v.set(&Site::from(-1), f64::NEG_INFINITY).unwrap();
        let l = dotted_principal_eigenvalue(&b, &v, &Site::from(0), 1e-12).unwrap();
        assert!((l + 2.0).abs() < 1e-12);
    }

    #[test]
    fn solver_paths_agree() {
        let m = TailModel::double_exp(1.0);
        for d in [1usize, 2] {
            let r = if d == 1 { 300 } else { 13 };
            let b = BoxDomain::centered(d, r);
            let f = sample_field(&m, &b, 3);
            let op = Operator::from_field(&b.to_site_set(), &f);
            let (l1, v1) = principal_of(&op, DEFAULT_TOL).unwrap();
            let (l2, _) = dense_top(&op, 1);
            let (l3, _) = lanczos_top(&op, 1, DEFAULT_TOL).unwrap();
            assert!((l1 - l2[0]).abs() < 1e-10, "{l1} {}", l2[0]);
            assert!((l1 - l3[0]).abs() < 1e-10, "{l1} {}", l3[0]);
            assert!(v1.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn sturm_matches_dense() {
        let f = sample_field(&TailModel::double_exp(2.0), &BoxDomain::centered(1, 20), 8);
        let op = Operator::from_field(&f.domain().to_site_set(), &f);
        let off = op.chain_couplings().unwrap();
        let dense = dense_top(&op, 5).0;
        for (j, d) in dense.iter().enumerate() {
            assert!((sturm_kth_largest(op.diag(), &off, j) - d).abs() < 1e-11);
        }
    }

    #[test]
    fn disconnected_chain() {
        let (a, v) = line(&[1.0, f64::NEG_INFINITY, 3.0, f64::NEG_INFINITY, 2.0]);
        let p = principal_eigenpair(&a, &v, Normalization::Anchor(Site::from(0)), 1e-12).unwrap();
        assert!((p.eigenvalue - 1.0).abs() < 1e-12);
        assert!((p.value(&Site::from(0)) - 1.0).abs() < 1e-12);
        assert!(p.value(&Site::from(2)).abs() < 1e-12);
        assert!(matches!(
            principal_eigenpair(&a, &v, Normalization::Anchor(Site::from(2)), 1e-12),
            Err(Error::NullAnchor(_))
        ));
    }

    #[test]
    fn script_l_examples() {
        let (a, v) = line(&[-1.0, -2.0, 0.0]);
        assert_eq!(script_l(&a, &v, Rho::Infinite).value, 3.0);
        let (a, v) = line(&[0.0]);
        assert_eq!(script_l(&a, &v, Rho::Finite(1.0)).value, 1.0);
        let (a, v) = line(&[-2.0]);
        assert!((script_l(&a, &v, Rho::Finite(2.0)).value - (-1.0f64).exp()).abs() < 1e-15);
        let (a, v) = line(&[1.0]);
        assert!(!script_l(&a, &v, Rho::Finite(2.0)).admissible);
    }

    #[test]
    fn semigroup_scalar_and_cross_check() {
        let (a, v) = line(&[0.7]);
        let delta = |x: &Site| if x.ell1_norm() == 0 { 1.0 } else { 0.0 };
        for m in [Method::Eigen, Method::Krylov, Method::Uniformization] {
            let u = semigroup_apply(&a, &v, 3.0, delta, m).unwrap();
            assert!((u.log_value(&Site::from(0)) - (0.7 - 2.0) * 3.0).abs() < 1e-12);
        }
        let f = sample_field(&TailModel::double_exp(1.0), &BoxDomain::centered(1, 40), 17);
        let a = f.domain().to_site_set();
        let e = semigroup_apply(&a, &f, 2.0, delta, Method::Eigen).unwrap();
        let k = semigroup_apply(&a, &f, 2.0, delta, Method::Krylov).unwrap();
        let p = semigroup_apply(&a, &f, 2.0, delta, Method::Uniformization).unwrap();
        let top = e.iter().map(|(x, _)| e.get(x)).fold(0.0, f64::max);
        for (x, _) in e.iter() {
            assert!((e.get(x) - k.get(x)).abs() <= 1e-9 * top);
            assert!((e.get(x) - p.get(x)).abs() <= 1e-12 * top);
        }
    }

    #[test]
    fn resolvent_single_site() {
        let (a, v) = line(&[0.0]);
        let s = resolvent_solve(&a, &v, -1.0).unwrap();
        assert!((s.value(&Site::from(0)) - 1.0).abs() < 1e-14);
        assert!((s.bound - 2.0).abs() < 1e-14);
        assert!(resolvent_solve(&a, &v, -2.5).is_err());
        let (a, v) = line(&[0.5, 0.5, 0.5]);
        let s = resolvent_solve(&a, &v, 0.5).unwrap();
        assert!(s.values.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn gradient_single_site() {
        let (a, v) = line(&[1.0]);
        let g = eigenvalue_gradient(&a, &v, 1e-9).unwrap();
        assert!((g.values[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scan_full_radius_has_zero_gap() {
        let f = sample_field(&TailModel::double_exp(1.0), &BoxDomain::centered(1, 6), 2);
        let s = subbox_eigenvalue_scan(f.domain(), &f, 6).unwrap();
        assert!(s.gap.abs() < 1e-10);
    }

    fn log_bessel_i(n: u64, z: f64) -> f64 {
        let ln_fact = |k: u64| (1..=k).map(|j| (j as f64).ln()).sum::<f64>();
        let terms: Vec<f64> =
            (0..200u64).map(|m| (2 * m + n) as f64 * (z / 2.0).ln() - ln_fact(m) - ln_fact(m + n)).collect();
        log_sum_exp(terms.into_iter())
    }

    #[test]
    fn log_semigroup_free_walk_tail() {
        let b = BoxDomain::centered(1, 400);
        let a = b.to_site_set();
        let op = Operator::new(&a, |_| 0.0);
        let l0: Vec<f64> = op.sites().iter().map(|x| if *x == Site::from(0) { 0.0 } else { f64::NEG_INFINITY }).collect();
        let t = 5.0;
        let u = log_semigroup(&op, t, &l0).unwrap();
        for x in [0i64, 7, 40, 300] {
            let want = -2.0 * t + log_bessel_i(x as u64, 2.0 * t);
            let got = u.log_value(&Site::from(x));
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "x={x} {got} {want}");
        }
        assert!(u.log_value(&Site::from(300)) < -900.0);
    }

    #[test]
    fn log_semigroup_matches_eigen() {
        let f = sample_field(&TailModel::double_exp(2.0), &BoxDomain::centered(1, 30), 4);
        let a = f.domain().to_site_set();
        let op = Operator::from_field(&a, &f);
        let l0: Vec<f64> = op.sites().iter().map(|x| if *x == Site::from(0) { 0.0 } else { f64::NEG_INFINITY }).collect();
        let u = log_semigroup(&op, 3.0, &l0).unwrap();
        let delta = |x: &Site| if *x == Site::from(0) { 1.0 } else { 0.0 };
        let e = semigroup_on(&op, 3.0, &delta, Method::Eigen, KRYLOV_TOL).unwrap();
        let p = semigroup_on(&op, 3.0, &delta, Method::Uniformization, KRYLOV_TOL).unwrap();
        let top = e.values.iter().fold(0.0f64, |m, &v| m.max(v));
        for x in &e.sites {
            if e.raw(x) > 1e-3 * top {
                assert!((u.log_value(x) - e.log_value(x)).abs() < 1e-9);
            }
            assert!((u.log_value(x) - p.log_value(x)).abs() < 1e-9, "{x}");
        }
        let lf = LogField::from(&e);
        assert!((lf.log_sum() - e.log_sum()).abs() < 1e-12);
    }
}
