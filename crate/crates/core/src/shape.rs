//! The variational problem behind the constant `χ(ρ)`: optimal potential
//! shape `V_ρ`, its eigenfunction `w_ρ`, the finite-box constant `χ_R`,
//! the dual entropy problem, the island radius `r(ρ, ε)` and the metric
//! `d_R`.
//!
//! Three routes compute `χ`: the profile equation `Δv + 2ρ v log v = 0`
//! solved by Newton's method, a primal ascent over potentials, and a dual
//! descent over probability fields.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{BoxDomain, Site};
use crate::randfield::{PotentialField, Rho};
use crate::spectral::{self, Normalization, Operator, DEFAULT_TOL};

const NEWTON_MAX_ITER: usize = 200;

/// Symmetric decaying solution of the profile equation on `[-R, R]` with
/// zero values outside.
#[derive(Clone, Debug, Serialize)]
pub struct Profile {
    pub rho: f64,
    pub radius: u64,
    /// `v(k)` for `k = -R..=R`.
    pub v: Vec<f64>,
    /// `max_k |Δv + 2ρ v log v|`.
    pub residual: f64,
    pub iterations: usize,
}

impl Profile {
    pub fn at(&self, k: i64) -> f64 {
        let r = self.radius as i64;
        if k.abs() > r {
            0.0
        } else {
            self.v[(k + r) as usize]
        }
    }

    pub fn norm2_sq(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum()
    }
}

fn profile_system(g: &[f64], rho: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.len();
    let mut f = vec![0.0; n];
    let mut lo = vec![0.0; n.saturating_sub(1)];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n.saturating_sub(1)];
    for k in 0..n {
        let right = if k + 1 < n { (g[k + 1] - g[k]).exp() } else { 0.0 };
        let left = if k > 0 { (g[k - 1] - g[k]).exp() } else { 0.0 };
        f[k] = right + left - 2.0 + 2.0 * rho * g[k];
        di[k] = -right - left + 2.0 * rho;
        if k + 1 < n {
            up[k] = right;
        }
        if k > 0 {
            lo[k - 1] = left;
        }
    }
    (f, lo, di, up)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn newton_profile(rho: f64, radius: u64, g0: Vec<f64>) -> Result<(Vec<f64>, usize)> {
    let mut g = g0;
    let n = g.len();
    let (mut f, ..) = profile_system(&g, rho);
    let mut fnorm = inf_norm(&f);
    for it in 0..NEWTON_MAX_ITER {
        let (_, mut lo, mut di, mut up) = profile_system(&g, rho);
        let mut step: Vec<f64> = f.iter().map(|x| -x).collect();
        let scale = inf_norm(&di) + 1.0;
        spectral::tridiagonal_solve(&mut lo, &mut di, &mut up, &mut step, scale);
        let smax = inf_norm(&step);
        if !smax.is_finite() {
            break;
        }
        let cap = if smax > 5.0 { 5.0 / smax } else { 1.0 };
        let mut alpha = cap;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = g.iter().zip(&step).map(|(a, s)| a + alpha * s).collect();
            let (ft, ..) = profile_system(&trial, rho);
            let tn = inf_norm(&ft);
            if tn.is_finite() && tn <= (1.0 - 1e-4 * alpha) * fnorm {
                g = trial;
                f = ft;
                fnorm = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if smax * alpha < 1e-14 * (1.0 + inf_norm(&g)) || fnorm < 1e-14 {
            // Symmetrize against roundoff drift.
            let mut sym = g.clone();
            for k in 0..n {
                sym[k] = 0.5 * (g[k] + g[n - 1 - k]);
            }
            return Ok((sym, it + 1));
        }
        if !accepted {
            break;
        }
    }
    let _ = radius;
    Err(Error::NewtonDivergence { iterations: NEWTON_MAX_ITER, residual: fnorm })
}

fn profile_from_logs(rho: f64, radius: u64, g: Vec<f64>, iterations: usize) -> Result<Profile> {
    let v: Vec<f64> = g.iter().map(|x| x.exp()).collect();
    let n = v.len();
    let mut residual = 0.0f64;
    for k in 0..n {
        let left = if k > 0 { v[k - 1] } else { 0.0 };
        let right = if k + 1 < n { v[k + 1] } else { 0.0 };
        let r = left + right - 2.0 * v[k] + 2.0 * rho * v[k] * v[k].ln();
        residual = residual.max(r.abs());
    }
    let center = v[radius as usize];
    for k in 0..radius as usize {
        if !(v[k] < v[k + 1]) {
            return Err(Error::NewtonDivergence { iterations, residual });
        }
    }
    if !(center > 1.0) {
        return Err(Error::NewtonDivergence { iterations, residual });
    }
    let edge = v[0] / center;
    if edge >= 1e-10 {
        return Err(Error::ProfileTruncation { value: edge });
    }
    Ok(Profile { rho, radius, v, residual, iterations })
}

/// Solves `Δv + 2ρ v log v = 0` on `[-R, R]` by damped Newton iteration in
/// `g = log v`, started from `v(k) = exp(1/2 - ρk²/2)`. Falls back to
/// continuation in `ρ` when the direct start fails.
pub fn solve_profile_1d(rho: f64, radius: u64, tol: f64) -> Result<Profile> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Invalid(format!("profile needs finite positive rho, got {rho}")));
    }
    if radius == 0 {
        return Err(Error::Invalid("profile radius must be positive".into()));
    }
    let r = radius as i64;
    let gauss = |rho: f64| -> Vec<f64> { (-r..=r).map(|k| 0.5 - 0.5 * rho * (k * k) as f64).collect() };
    let direct = newton_profile(rho, radius, gauss(rho))
        .and_then(|(g, it)| profile_from_logs(rho, radius, g, it));
    let profile = match direct {
        Ok(p) => p,
        Err(Error::ProfileTruncation { value }) => return Err(Error::ProfileTruncation { value }),
        Err(first) => {
            let mut cur = rho.min(1.0);
            let mut g = match newton_profile(cur, radius, gauss(cur)) {
                Ok((g, _)) => g,
                Err(_) => return Err(first),
            };
            let mut total = 0;
            while cur < rho {
                let next = (cur * 1.25).min(rho);
                let (gn, it) = newton_profile(next, radius, g)?;
                g = gn;
                cur = next;
                total += it;
            }
            profile_from_logs(rho, radius, g, total)?
        }
    };
    if profile.residual > tol.max(1e-14) {
        return Err(Error::NewtonDivergence { iterations: profile.iterations, residual: profile.residual });
    }
    Ok(profile)
}

/// Optimal potential shape `V_ρ`, eigenfunction `w_ρ` and constant `χ`.
#[derive(Clone, Debug, Serialize)]
pub struct OptimalShape {
    #[serde(serialize_with = "ser_rho")]
    pub rho: Rho,
    pub dim: usize,
    pub radius: u64,
    /// `χ` from the profile on `[-R, R]`, times `d`.
    pub chi: f64,
    /// The same quantity at radius `R + 5`.
    pub chi_next: f64,
    /// `|chi - chi_next|`.
    pub richardson_gap: f64,
    /// `v_ρ(k)` for `k = -R..=R` (empty for `ρ = ∞`).
    pub profile_v: Vec<f64>,
    /// `f_ρ(k) = ρ log(v_ρ(k)² / ‖v_ρ‖²)`.
    pub profile_f: Vec<f64>,
    /// `λ_{B_R}(V_ρ)` from a direct eigen-solve in dimension `d`.
    pub lambda_v: f64,
    /// `λ_{B_R}(V̇_ρ)`.
    pub lambda_v_dotted: f64,
    /// `max |(Δ + V_ρ) w_ρ + χ w_ρ|` on `B_R`.
    pub eigen_residual: f64,
    pub profile_residual: f64,
}

fn ser_rho<S: serde::Serializer>(r: &Rho, s: S) -> std::result::Result<S::Ok, S::Error> {
    r.serialize(s)
}

impl OptimalShape {
    pub fn domain(&self) -> BoxDomain {
        BoxDomain::centered(self.dim, self.radius)
    }

    /// `f_ρ(k)`, `-∞` outside `[-R, R]`.
    pub fn f(&self, k: i64) -> f64 {
        match self.rho {
            Rho::Infinite => {
                if k == 0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Rho::Finite(_) => {
                let r = self.radius as i64;
                if k.abs() > r {
                    f64::NEG_INFINITY
                } else {
                    self.profile_f[(k + r) as usize]
                }
            }
        }
    }

    /// `v_ρ(k)/v_ρ(0)`.
    pub fn u(&self, k: i64) -> f64 {
        match self.rho {
            Rho::Infinite => {
                if k == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Rho::Finite(_) => {
                let r = self.radius as i64;
                if k.abs() > r {
                    0.0
                } else {
                    self.profile_v[(k + r) as usize] / self.profile_v[r as usize]
                }
            }
        }
    }

    /// `V_ρ(x) = Σ_i f_ρ(x_i)`.
    pub fn potential(&self, x: &Site) -> f64 {
        x.coords().iter().map(|&k| self.f(k)).sum()
    }

    /// `w_ρ(x) = Π_i v_ρ(x_i)/v_ρ(0)`.
    pub fn w(&self, x: &Site) -> f64 {
        x.coords().iter().map(|&k| self.u(k)).product()
    }

    /// `log w_ρ(x)`.
    pub fn log_w(&self, x: &Site) -> f64 {
        x.coords().iter().map(|&k| self.u(k).ln()).sum()
    }

    pub fn potential_field(&self) -> PotentialField {
        PotentialField::from_fn(self.domain(), |x| self.potential(x))
    }

    /// `‖w_ρ‖₂²`.
    pub fn w_norm2_sq(&self) -> f64 {
        let s: f64 = self.one_dim_u().iter().map(|u| u * u).sum();
        s.powi(self.dim as i32)
    }

    fn one_dim_u(&self) -> Vec<f64> {
        let r = self.radius as i64;
        (-r..=r).map(|k| self.u(k)).collect()
    }

    /// `Σ_{x ∉ B_r} w_ρ(x)` over the shape box, and a bound on the part
    /// beyond the box.
    pub fn w_tail(&self, r: u64) -> (f64, f64) {
        let u = self.one_dim_u();
        let rr = self.radius as i64;
        let total: f64 = u.iter().sum();
        let inner: f64 = (-rr..=rr).filter(|k| k.unsigned_abs() <= r).map(|k| u[(k + rr) as usize]).sum();
        let d = self.dim as i32;
        let tail = total.powi(d) - inner.powi(d);
        // Geometric bound for the 1D mass beyond the box, ratios decreasing.
        let n = u.len();
        let remainder = if n >= 3 && matches!(self.rho, Rho::Finite(_)) {
            let q = u[0] / u[1];
            let one = if q < 1.0 { 2.0 * u[0] * q / (1.0 - q) } else { f64::INFINITY };
            (total + one).powi(d) - total.powi(d)
        } else {
            0.0
        };
        (tail.max(0.0), remainder)
    }
}

/// Builds `V_ρ`, `w_ρ` and `χ` on `B_R` in dimension `d`.
pub fn build_optimal_shape(rho: Rho, dim: usize, radius: u64, tol: f64) -> Result<OptimalShape> {
    if dim == 0 {
        return Err(Error::Invalid("dimension must be positive".into()));
    }
    let rho_f = match rho {
        Rho::Infinite => {
            return Ok(OptimalShape {
                rho,
                dim,
                radius,
                chi: 2.0 * dim as f64,
                chi_next: 2.0 * dim as f64,
                richardson_gap: 0.0,
                profile_v: Vec::new(),
                profile_f: Vec::new(),
                lambda_v: -2.0 * dim as f64,
                lambda_v_dotted: f64::NEG_INFINITY,
                eigen_residual: 0.0,
                profile_residual: 0.0,
            })
        }
        Rho::Finite(r) => r,
    };
    let profile = solve_profile_1d(rho_f, radius, 1e-10)?;
    let next = solve_profile_1d(rho_f, radius + 5, 1e-10)?;
    let chi_of = |p: &Profile| dim as f64 * rho_f * p.norm2_sq().ln();
    let nrm = profile.norm2_sq();
    let profile_f: Vec<f64> = profile.v.iter().map(|v| rho_f * (v * v / nrm).ln()).collect();
    let chi = chi_of(&profile);
    let chi_next = chi_of(&next);
    let mut shape = OptimalShape {
        rho,
        dim,
        radius,
        chi,
        chi_next,
        richardson_gap: (chi - chi_next).abs(),
        profile_v: profile.v.clone(),
        profile_f,
        lambda_v: f64::NAN,
        lambda_v_dotted: f64::NAN,
        eigen_residual: f64::NAN,
        profile_residual: profile.residual,
    };
    let b = shape.domain();
    let field = shape.potential_field();
    let set = b.to_site_set();
    let op = Operator::from_field(&set, &field);
    let w: Vec<f64> = op.sites().iter().map(|x| shape.w(x)).collect();
    shape.eigen_residual = op.residual(-chi, &w);
    let (lambda, _) = spectral::principal_of(&op, DEFAULT_TOL)?;
    shape.lambda_v = lambda;
    shape.lambda_v_dotted = spectral::dotted_principal_eigenvalue(&b, &field, &Site::origin(dim), DEFAULT_TOL)?;
    if shape.eigen_residual > tol {
        return Err(Error::Residual { residual: shape.eigen_residual, tol });
    }
    Ok(shape)
}

/// Smallest `r` with `‖w_ρ‖₂² Σ_{x∉B_r} w_ρ(x) < ε`.
pub fn island_radius(shape: &OptimalShape, eps: f64) -> Result<u64> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
    }
    if let Rho::Infinite = shape.rho {
        return Ok(0);
    }
    let norm = shape.w_norm2_sq();
    let (_, remainder) = shape.w_tail(0);
    if norm * remainder > eps / 10.0 {
        return Err(Error::TailTruncation { remainder: norm * remainder, epsilon: eps });
    }
    for r in 0..=shape.radius {
        let (tail, _) = shape.w_tail(r);
        if norm * tail < eps {
            return Ok(r);
        }
    }
    Err(Error::TailTruncation { remainder: norm * remainder, epsilon: eps })
}

/// `d_R(f, g) = max_{B_R} |e^f - e^g|` on the box `B_R` centered at the
/// origin, with `e^{-∞} = 0`.
pub fn d_r_metric(f: impl Fn(&Site) -> f64, g: impl Fn(&Site) -> f64, dim: usize, radius: u64) -> f64 {
    BoxDomain::centered(dim, radius)
        .sites()
        .map(|x| (f(&x).exp() - g(&x).exp()).abs())
        .fold(0.0, f64::max)
}

/// `d_R` between two fields on their common centered box.
pub fn d_r_fields(f: &PotentialField, g: &PotentialField, radius: u64) -> f64 {
    d_r_metric(|x| f.value(x), |x| g.value(x), f.dim(), radius)
}

/// A probability field on a box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbabilityField {
    pub domain: BoxDomain,
    pub p: Vec<f64>,
}

impl ProbabilityField {
    pub fn new(domain: BoxDomain, p: Vec<f64>) -> Result<Self> {
        if p.len() != domain.len() || p.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Invalid("probability field needs one nonnegative entry per site".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("probability field sums to {s}")));
        }
        Ok(ProbabilityField { domain, p })
    }

    pub fn delta(domain: BoxDomain, x: &Site) -> Result<Self> {
        let mut p = vec![0.0; domain.len()];
        p[domain.index_of(x).ok_or(Error::OutsideDomain)?] = 1.0;
        Ok(ProbabilityField { domain, p })
    }

    pub fn uniform(domain: BoxDomain) -> Self {
        let n = domain.len();
        ProbabilityField { domain, p: vec![1.0 / n as f64; n] }
    }
}

/// `I(p) = -⟨Δ√p, √p⟩` with zero boundary condition.
pub fn functional_i(p: &ProbabilityField) -> f64 {
    let zero = PotentialField::constant(p.domain.clone(), 0.0);
    let op = Operator::from_field(&p.domain.to_site_set(), &zero);
    let q: Vec<f64> = p.p.iter().map(|x| x.sqrt()).collect();
    let dq = op.apply_vec(&q);
    -dq.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
}

/// `J(p) = -Σ p log p` with `0 log 0 = 0`.
pub fn functional_j(p: &ProbabilityField) -> f64 {
    -p.p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `I(p) + ρ J(p)`.
pub fn dual_functional(p: &ProbabilityField, rho: f64) -> f64 {
    functional_i(p) + rho * functional_j(p)
}

/// `inf_V [-⟨V, p⟩ + ρ log 𝓛(V)]` evaluated at `V = ρ log p`.
pub fn envelope_value(p: &ProbabilityField, rho: f64) -> f64 {
    let l: f64 = p.p.iter().filter(|&&x| x > 0.0).sum::<f64>();
    let vp: f64 = p.p.iter().filter(|&&x| x > 0.0).map(|x| rho * x.ln() * x).sum();
    -vp + rho * l.ln()
}

/// Outcome of an optimization over one box.
#[derive(Clone, Debug, Serialize)]
pub struct ChiEstimate {
    pub chi: f64,
    pub iterations: usize,
    /// Primal: `max |e^{V/ρ} - v²|`. Dual: projected gradient norm.
    pub optimality: f64,
    /// Objective value reached by each start.
    pub start_values: Vec<f64>,
    pub uniqueness_warning: bool,
    /// The maximizer `V` (primal) or minimizer `p` (dual) on the box.
    pub argument: Vec<f64>,
}

fn primal_starts(domain: &BoxDomain, rho: f64) -> Vec<Vec<f64>> {
    let sites: Vec<Site> = domain.sites().collect();
    let r = domain.radius as i64;
    let mut starts = vec![
        vec![0.0; sites.len()],
        sites.iter().map(|x| -rho * x.ell1_norm() as f64).collect(),
        sites.iter().map(|x| -0.5 * rho * x.coords().iter().map(|c| (c * c) as f64).sum::<f64>()).collect(),
    ];
    if r >= 1 {
        let shift = (r / 2).max(1);
        starts.push(
            sites
                .iter()
                .map(|x| {
                    let c = x.coords();
                    let mut s = ((c[0] - shift) * (c[0] - shift)) as f64;
                    s += c[1..].iter().map(|c| (c * c) as f64).sum::<f64>();
                    -rho * s
                })
                .collect(),
        );
    }
    // Deterministic pseudo-random start.
    let mut z = 0x2545_f491_4f6c_dd1du64;
    starts.push(
        sites
            .iter()
            .map(|_| {
                z ^= z << 13;
                z ^= z >> 7;
                z ^= z << 17;
                -4.0 * rho * ((z >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect(),
    );
    starts
}

/// `χ_R(ρ) = -sup{λ_{B_R}(V) : 𝓛(V) ≤ 1}` by ascent on
/// `λ(V) - ρ log 𝓛(V)`. The multiplicative gradient step with unit step,
/// `V ← V + ρ log(∇λ(V) / ∇(ρ log 𝓛)(V))`, is shift-equivalent to
/// `V ← ρ log v_V²` and never decreases the objective.
pub fn chi_primal(rho: f64, dim: usize, radius: u64, tol: f64) -> Result<ChiEstimate> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Invalid(format!("chi_primal needs finite rho, got {rho}")));
    }
    let domain = BoxDomain::centered(dim, radius);
    let starts = primal_starts(&domain, rho);
    let results: Vec<Result<(f64, Vec<f64>, usize, f64)>> =
        starts.into_par_iter().map(|v0| primal_ascent(&domain, rho, v0, tol)).collect();
    merge_starts(results, |a, b| a > b, true, rho)
}

fn primal_ascent(domain: &BoxDomain, rho: f64, v0: Vec<f64>, tol: f64) -> Result<(f64, Vec<f64>, usize, f64)> {
    let set = domain.to_site_set();
    let mut v = v0;
    let mut prev = f64::NEG_INFINITY;
    let max_iter = 200_000;
    for it in 0..max_iter {
        let field = PotentialField::from_values(domain.clone(), v.clone())?;
        let pair = spectral::principal_eigenpair(&set, &field, Normalization::UnitL2, DEFAULT_TOL)?;
        let l: f64 = v.iter().map(|x| (x / rho).exp()).sum();
        let obj = pair.eigenvalue - rho * l.ln();
        let p: Vec<f64> = domain.sites().map(|x| pair.value(&x).powi(2)).collect();
        let fo = v.iter().zip(&p).map(|(vi, pi)| ((vi / rho).exp() / l - pi).abs()).fold(0.0, f64::max);
        if obj - prev <= tol * 1e-3 && fo < tol.sqrt() * 1e-3 || (obj - prev).abs() <= 1e-15 * obj.abs() {
            return Ok((obj, v.iter().map(|x| x - rho * l.ln()).collect(), it, fo));
        }
        if obj < prev - 1e-12 * (1.0 + prev.abs()) {
            return Err(Error::OptimizerStall { iterations: it, reason: "objective decreased".into() });
        }
        prev = obj;
        v = p.iter().map(|&x| if x > 0.0 { rho * x.ln() } else { f64::NEG_INFINITY }).collect();
    }
    Err(Error::OptimizerStall { iterations: max_iter, reason: "no convergence of the primal ascent".into() })
}

fn merge_starts(
    results: Vec<Result<(f64, Vec<f64>, usize, f64)>>,
    better: impl Fn(f64, f64) -> bool,
    primal: bool,
    rho: f64,
) -> Result<ChiEstimate> {
    let mut ok = Vec::new();
    let mut last_err = None;
    for r in results {
        match r {
            Ok(x) => ok.push(x),
            Err(e) => last_err = Some(e),
        }
    }
    if ok.is_empty() {
        return Err(last_err.unwrap_or(Error::OptimizerStall { iterations: 0, reason: "no starts".into() }));
    }
    let mut best = 0;
    for i in 1..ok.len() {
        if better(ok[i].0, ok[best].0) {
            best = i;
        }
    }
    let weights = |a: &[f64]| -> Vec<f64> {
        if primal {
            a.iter().map(|x| (x / rho).exp()).collect()
        } else {
            a.to_vec()
        }
    };
    let wb = weights(&ok[best].1);
    let uniqueness_warning = ok.iter().any(|(val, arg, _, _)| {
        (val - ok[best].0).abs() <= 1e-6 && {
            let w = weights(arg);
            w.iter().zip(&wb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 1e-3
        }
    });
    let start_values = ok.iter().map(|r| if primal { -r.0 } else { r.0 }).collect();
    let (val, arg, iters, fo) = ok.swap_remove(best);
    let chi = if primal { -val } else { val };
    Ok(ChiEstimate { chi, iterations: iters, optimality: fo, start_values, uniqueness_warning, argument: arg })
}

fn dual_value(op: &Operator, q: &[f64], rho: f64) -> f64 {
    let dq = op.apply_vec(q);
    let i = -dq.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let j = -q.iter().filter(|&&x| x > 0.0).map(|x| x * x * (x * x).ln()).sum::<f64>();
    i + rho * j
}

fn dual_starts(domain: &BoxDomain, rho: f64) -> Vec<Vec<f64>> {
    let sites: Vec<Site> = domain.sites().collect();
    let r = domain.radius as f64;
    let raw = vec![
        sites
            .iter()
            .map(|x| x.coords().iter().map(|&c| (std::f64::consts::PI * (c as f64 + r + 1.0) / (2.0 * r + 2.0)).sin()).product())
            .collect::<Vec<f64>>(),
        sites.iter().map(|x| (-0.5 * rho * x.ell1_norm() as f64).exp()).collect(),
        sites.iter().map(|x| (-(x.ell1_norm() as f64)).exp() + 1e-3).collect(),
    ];
    raw.into_iter()
        .map(|q: Vec<f64>| {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// `min (I + ρJ)` over probability fields on `B_R`, by diagonally
/// preconditioned Riemannian descent for `q = √p` on the unit sphere.
pub fn chi_dual(rho: f64, dim: usize, radius: u64, tol: f64) -> Result<ChiEstimate> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Invalid(format!("chi_dual needs finite rho, got {rho}")));
    }
    let domain = BoxDomain::centered(dim, radius);
    let zero = PotentialField::constant(domain.clone(), 0.0);
    let op = Operator::from_field(&domain.to_site_set(), &zero);
    let starts = dual_starts(&domain, rho);
    let results: Vec<Result<(f64, Vec<f64>, usize, f64)>> =
        starts.into_par_iter().map(|q0| dual_descent(&op, rho, q0, tol)).collect();
    merge_starts(results, |a, b| a < b, false, rho)
}

fn dual_descent(op: &Operator, rho: f64, q0: Vec<f64>, tol: f64) -> Result<(f64, Vec<f64>, usize, f64)> {
    let n = q0.len();
    let two_d = 2.0 * op.dim() as f64;
    let mut q = q0;
    let mut val = dual_value(op, &q, rho);
    let max_iter = 200_000;
    let gtol = tol.min(1e-9);
    for it in 0..max_iter {
        let dq = op.apply_vec(&q);
        let mut g: Vec<f64> = (0..n)
            .map(|i| {
                let l = if q[i] > 0.0 { (q[i] * q[i]).ln() } else { 0.0 };
                -2.0 * dq[i] - 2.0 * rho * q[i] * (l + 1.0)
            })
            .collect();
        let gq: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum();
        for i in 0..n {
            g[i] -= gq * q[i];
        }
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm < gtol {
            let p: Vec<f64> = q.iter().map(|x| x * x).collect();
            return Ok((val, p, it, gnorm));
        }
        // Diagonal of the Riemannian Hessian, bounded below.
        let mu = val - rho;
        let mut dir: Vec<f64> = (0..n)
            .map(|i| {
                let l = if q[i] > 0.0 { (q[i] * q[i]).ln() } else { -700.0 };
                let h = 2.0 * two_d - 2.0 * rho * (l + 3.0) - 2.0 * mu;
                -g[i] / h.max(1.0)
            })
            .collect();
        let dqd: f64 = dir.iter().zip(&q).map(|(a, b)| a * b).sum();
        for i in 0..n {
            dir[i] -= dqd * q[i];
        }
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut trial: Vec<f64> = q.iter().zip(&dir).map(|(a, b)| (a + alpha * b).abs()).collect();
            let nn = trial.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in trial.iter_mut() {
                *x /= nn;
            }
            let tv = dual_value(op, &trial, rho);
            if tv <= val + 1e-4 * alpha * slope {
                q = trial;
                val = tv;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            let p: Vec<f64> = q.iter().map(|x| x * x).collect();
            if gnorm < tol.sqrt() {
                return Ok((val, p, it, gnorm));
            }
            return Err(Error::OptimizerStall { iterations: it, reason: format!("line search failed at gradient {gnorm:.3e}") });
        }
    }
    Err(Error::OptimizerStall { iterations: max_iter, reason: "no convergence of the dual descent".into() })
}

/// One sampled potential of the shape-recognition diagnostic.
#[derive(Clone, Debug, Serialize)]
pub struct RecognitionSample {
    pub big_radius: u64,
    pub kind: String,
    pub lambda: f64,
    pub d_r: f64,
    pub admissible: bool,
}

/// Largest `δ` per big radius such that every sampled admissible `V` with
/// `λ > -χ_𝓡 - 3δ` lies within `γ/2` of `V_ρ` in `d_R`.
#[derive(Clone, Debug, Serialize)]
pub struct RecognitionReport {
    pub gamma: f64,
    pub radius: u64,
    /// `(𝓡, χ_𝓡, largest passing δ)`; `∞` when no sample fails.
    pub thresholds: Vec<(u64, f64, f64)>,
    pub samples: Vec<RecognitionSample>,
}

/// Empirical search for the closeness threshold relating eigenvalue
/// deficiency to shape distance.
pub fn shape_recognition_threshold(
    shape: &OptimalShape,
    gamma: f64,
    radius: u64,
    big_radii: &[u64],
    samples_per_radius: usize,
    seed: u64,
) -> Result<RecognitionReport> {
    use rand::{Rng, SeedableRng};
    let rho = shape.rho.finite().ok_or_else(|| Error::Invalid("recognition needs finite rho".into()))?;
    let dim = shape.dim;
    let mut thresholds = Vec::new();
    let mut samples = Vec::new();
    for &big in big_radii {
        if big < radius || big > shape.radius {
            return Err(Error::Invalid(format!("big radius {big} must lie in [{radius}, {}]", shape.radius)));
        }
        let domain = BoxDomain::centered(dim, big);
        let set = domain.to_site_set();
        let base = shape.potential_field().restrict(&domain)?;
        let chi_big = -spectral::principal_eigenvalue(&set, &base, DEFAULT_TOL)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ big);
        let mut candidates: Vec<(String, Vec<f64>)> = vec![("shape".into(), base.values().to_vec())];
        for s in 0..samples_per_radius {
            let mut v = base.values().to_vec();
            let kind = match s % 3 {
                0 => {
                    for x in v.iter_mut() {
                        *x += rng.random_range(-0.3..0.3) * rho;
                    }
                    "noise"
                }
                1 => {
                    let far = rng.random_range(0..v.len());
                    v[far] = v[far].max(-rho * rng.random_range(0.1..2.0));
                    "raised-site"
                }
                _ => {
                    for x in v.iter_mut() {
                        *x = -rng.random_range(0.0..6.0) * rho;
                    }
                    "random"
                }
            };
            candidates.push((kind.into(), v));
        }
        let origin = domain.index_of(&Site::origin(dim)).expect("origin in box");
        let mut passing = f64::INFINITY;
        for (kind, mut v) in candidates {
            let l: f64 = v.iter().map(|x| (x / rho).exp()).sum();
            for x in v.iter_mut() {
                *x -= rho * l.ln();
            }
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let admissible = v[origin] >= max;
            let field = PotentialField::from_values(domain.clone(), v)?;
            let lambda = spectral::principal_eigenvalue(&set, &field, DEFAULT_TOL)?;
            let d = d_r_metric(|x| field.value(x), |x| shape.potential(x), dim, radius);
            if admissible && d >= gamma / 2.0 {
                passing = passing.min((-chi_big - lambda).max(0.0) / 3.0);
            }
            samples.push(RecognitionSample { big_radius: big, kind, lambda, d_r: d, admissible });
        }
        thresholds.push((big, chi_big, passing));
    }
    Ok(RecognitionReport { gamma, radius, thresholds, samples })
}
