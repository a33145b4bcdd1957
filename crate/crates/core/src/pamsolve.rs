//! The Cauchy problem `∂u = Δu + ξu`, `u(0, ·) = δ_0` on finite boxes, its
//! total mass, the path-class split `u = u₁ + u₂ + u₃`, and a Monte Carlo
//! Feynman–Kac estimator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoxDomain, Site, SiteSet};
use crate::randfield::{height, site_stream_key, PotentialField, TailModel};
use crate::spectral::{self, LogField, Method, Operator, ScaledField, KRYLOV_TOL};

/// Radius rule for the macrobox: `⌈t (log t)^κ⌉`, at least 1. The default
/// is `κ = 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxRule {
    #[default]
    LogSquared,
    Exponent { kappa: f64 },
}

impl BoxRule {
    pub fn kappa(&self) -> f64 {
        match self {
            BoxRule::LogSquared => 2.0,
            BoxRule::Exponent { kappa } => *kappa,
        }
    }

    /// Scale `t (log t)^κ`, the index of the macrobox.
    pub fn scale(&self, t: f64) -> f64 {
        if t <= 1.0 {
            return 1.0;
        }
        (t * t.ln().powf(self.kappa())).max(1.0)
    }

    pub fn radius(&self, t: f64) -> u64 {
        self.scale(t).ceil() as u64
    }

    /// Whether `κ` differs from the default.
    pub fn is_deviation(&self) -> bool {
        self.kappa() != 2.0
    }
}

/// `u(t, ·)` on a box.
#[derive(Clone, Debug, Serialize)]
pub struct SolutionField {
    pub t: f64,
    pub domain: BoxDomain,
    pub u: ScaledField,
    pub method: Method,
}

impl SolutionField {
    pub fn get(&self, x: &Site) -> f64 {
        self.u.get(x)
    }

    pub fn log_value(&self, x: &Site) -> f64 {
        self.u.log_value(x)
    }

    pub fn log_total_mass(&self) -> f64 {
        self.u.log_sum()
    }

    /// Site of maximal `u`, lexicographically smallest on ties.
    pub fn argmax(&self) -> Option<Site> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.u.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| self.u.sites[i].clone())
    }
}

fn delta0(x: &Site) -> f64 {
    if x.coords().iter().all(|&c| c == 0) {
        1.0
    } else {
        0.0
    }
}

/// Dirichlet solution on `B` with `u(0, ·) = δ_0`.
pub fn solve_pam(xi: &PotentialField, b: &BoxDomain, t: f64, method: Method) -> Result<SolutionField> {
    solve_on(xi, &b.to_site_set(), b, t, method, KRYLOV_TOL)
}

/// Dirichlet solution on a site set `A ⊆ B`.
pub fn solve_on(
    xi: &PotentialField,
    a: &SiteSet,
    b: &BoxDomain,
    t: f64,
    method: Method,
    tol: f64,
) -> Result<SolutionField> {
    if !b.contains(&Site::origin(b.dim())) {
        return Err(Error::Invalid("the origin must lie in the box".into()));
    }
    let op = Operator::from_field(a, xi);
    let u = spectral::semigroup_on(&op, t, &delta0, method, tol)?;
    Ok(SolutionField { t, domain: b.clone(), u, method })
}

/// `U(t) = Σ_x u(t, x)`; may overflow to `∞`, see
/// [`SolutionField::log_total_mass`].
/// `log u(t, ·)` on `b`, accurate far below the double range of `max u`.
pub fn log_solution(xi: &PotentialField, b: &BoxDomain, t: f64) -> Result<LogField> {
    let op = Operator::from_field(&b.to_site_set(), xi);
    let origin = Site::origin(b.dim());
    let l0: Vec<f64> = op.sites().iter().map(|x| if *x == origin { 0.0 } else { f64::NEG_INFINITY }).collect();
    spectral::log_semigroup(&op, t, &l0)
}

pub fn total_mass(u: &SolutionField) -> f64 {
    u.log_total_mass().exp()
}

/// `u₁ + u₂ + u₃` on the outer box, all stored at the scale of the full
/// solution.
#[derive(Clone, Debug, Serialize)]
pub struct SolutionSplit {
    pub t: f64,
    pub macrobox: BoxDomain,
    pub outer: BoxDomain,
    pub gamma: SiteSet,
    /// Solution on the outer box.
    pub full: ScaledField,
    /// Solution on the macrobox.
    pub inner: ScaledField,
    pub u1: ScaledField,
    pub u2: ScaledField,
    pub u3: ScaledField,
    /// `max |u1 + u2 + u3 - full| / max full`.
    pub identity_error: f64,
    /// Most negative component value relative to `max full`.
    pub min_component: f64,
    /// `max_{∂ outer} u / max u`; large values mean the outer box is small.
    pub outer_boundary_ratio: f64,
    /// `log u` on the outer box when the split was computed by uniformization.
    #[serde(skip)]
    pub log_full: Option<LogField>,
}

/// The three-term split on `B ⊆ outer` for a site set `Γ ⊆ B`.
pub fn split_contributions(
    xi: &PotentialField,
    b: &BoxDomain,
    gamma: &SiteSet,
    t: f64,
    outer: &BoxDomain,
    method: Method,
    tol: f64,
) -> Result<SolutionSplit> {
    if !outer.contains_box(b) {
        return Err(Error::Invalid("macrobox must lie inside the outer box".into()));
    }
    if gamma.iter().any(|x| !b.contains(x)) {
        return Err(Error::Invalid("gamma must lie inside the macrobox".into()));
    }
    if method == Method::Uniformization {
        return nested_split(xi, b, gamma, t, outer);
    }
    let full = solve_on(xi, &outer.to_site_set(), outer, t, method, tol)?;
    let inner = solve_on(xi, &b.to_site_set(), b, t, method, tol)?;
    let avoid = b.to_site_set().difference(gamma);
    let u2 = solve_on(xi, &avoid, b, t, method, tol)?;
    let sites: Vec<Site> = full.u.sites.clone();
    let scale = full.u.log_scale;
    let f = full.u.values.clone();
    let ib = inner.u.on_sites(&sites, scale);
    let i2 = u2.u.on_sites(&sites, scale);
    let u1v: Vec<f64> = f.iter().zip(&ib).map(|(a, b)| a - b).collect();
    let u3v: Vec<f64> = ib.iter().zip(&i2).map(|(a, b)| a - b).collect();
    assemble_split(t, b, outer, gamma, sites, scale, f, u1v, i2, u3v)
}

/// Split through [`spectral::nested_uniformization`]; the identity is
/// checked against an independent solve on the outer box.
fn nested_split(
    xi: &PotentialField,
    b: &BoxDomain,
    gamma: &SiteSet,
    t: f64,
    outer: &BoxDomain,
) -> Result<SolutionSplit> {
    let op = Operator::from_field(&outer.to_site_set(), xi);
    let level: Vec<usize> = op
        .sites()
        .iter()
        .map(|x| match (b.contains(x), gamma.contains(x)) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => 2,
        })
        .collect();
    let (z, scale) = spectral::nested_uniformization(&op, &level, 3, t, &delta0)?;
    let log_full = log_solution(xi, outer, t)?;
    let sites = op.sites().to_vec();
    let f = log_full.log_values.iter().map(|l| (l - scale).exp()).collect();
    let mut it = z.into_iter();
    let (u1v, u3v, u2v) = (it.next().unwrap_or_default(), it.next().unwrap_or_default(), it.next().unwrap_or_default());
    let mut split = assemble_split(t, b, outer, gamma, sites, scale, f, u1v, u2v, u3v)?;
    split.log_full = Some(log_full);
    Ok(split)
}

#[allow(clippy::too_many_arguments)]
fn assemble_split(
    t: f64,
    b: &BoxDomain,
    outer: &BoxDomain,
    gamma: &SiteSet,
    sites: Vec<Site>,
    scale: f64,
    f: Vec<f64>,
    u1v: Vec<f64>,
    i2: Vec<f64>,
    u3v: Vec<f64>,
) -> Result<SolutionSplit> {
    let ib: Vec<f64> = i2.iter().zip(&u3v).map(|(a, b)| a + b).collect();
    let top = f.iter().copied().fold(0.0, f64::max);
    let mut identity_error = 0.0f64;
    let mut min_component = 0.0f64;
    for i in 0..sites.len() {
        identity_error = identity_error.max((u1v[i] + i2[i] + u3v[i] - f[i]).abs());
        min_component = min_component.min(u1v[i]).min(i2[i]).min(u3v[i]);
    }
    let boundary = sites
        .iter()
        .zip(&f)
        .filter(|(x, _)| x.minus(&outer.center).sup_norm() == outer.radius)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let mk = |values: Vec<f64>| ScaledField { sites: sites.clone(), values, log_scale: scale };
    Ok(SolutionSplit {
        t,
        macrobox: b.clone(),
        outer: outer.clone(),
        gamma: gamma.clone(),
        full: mk(f),
        inner: mk(ib),
        u1: mk(u1v),
        u2: mk(i2),
        u3: mk(u3v),
        identity_error: identity_error / top,
        min_component: min_component / top,
        outer_boundary_ratio: boundary / top,
        log_full: None,
    })
}

/// Monte Carlo estimate of `u(t, ·)` with per-site standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct McEstimate {
    pub t: f64,
    pub n_paths: usize,
    pub sites: Vec<Site>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Estimate of `Σ_x u(t, x)` and its standard error.
    pub mass: f64,
    pub mass_stderr: f64,
}

impl McEstimate {
    pub fn at(&self, x: &Site) -> (f64, f64) {
        match self.sites.binary_search(x) {
            Ok(i) => (self.mean[i], self.stderr[i]),
            Err(_) => (0.0, 0.0),
        }
    }
}

const MC_BATCH: usize = 4096;

/// Simulates continuous-time simple random walks from the origin (jump
/// rate `2d`, exponential holding times) and scores
/// `exp{∫_0^t ξ(X_s) ds} 1{X_t = x}`. The walk is killed where the field is
/// `-∞`, including outside its box.
pub fn feynman_kac_mc(xi: &PotentialField, t: f64, n_paths: usize, seed: u64) -> Result<McEstimate> {
    if t < 0.0 {
        return Err(Error::Invalid("time must be nonnegative".into()));
    }
    let d = xi.dim();
    let origin = Site::origin(d);
    let batches = n_paths.div_ceil(MC_BATCH);
    let partial: Vec<(BTreeMap<Site, (f64, f64)>, f64, f64)> = (0..batches)
        .into_par_iter()
        .map(|bi| {
            let key = site_stream_key(seed, &Site::new(vec![bi as i64, 0x6d63]));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let count = MC_BATCH.min(n_paths - bi * MC_BATCH);
            let mut acc: BTreeMap<Site, (f64, f64)> = BTreeMap::new();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let mut x = origin.clone();
                let mut clock = 0.0;
                let mut log_w = 0.0;
                let mut alive = true;
                loop {
                    let v = xi.value(&x);
                    if v == f64::NEG_INFINITY {
                        alive = false;
                        break;
                    }
                    let hold: f64 = rng.sample::<f64, _>(rand_distr::Exp1) / (2.0 * d as f64);
                    if clock + hold >= t {
                        log_w += v * (t - clock);
                        break;
                    }
                    log_w += v * hold;
                    clock += hold;
                    let dir = rng.random_range(0..2 * d);
                    let mut c = x.coords().to_vec();
                    c[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
                    x = Site::new(c);
                }
                if alive {
                    let w = log_w.exp();
                    let e = acc.entry(x).or_insert((0.0, 0.0));
                    e.0 += w;
                    e.1 += w * w;
                    s1 += w;
                    s2 += w * w;
                }
            }
            (acc, s1, s2)
        })
        .collect();
    let mut total: BTreeMap<Site, (f64, f64)> = BTreeMap::new();
    let (mut m1, mut m2) = (0.0, 0.0);
    for (acc, s1, s2) in partial {
        for (x, (a, b)) in acc {
            let e = total.entry(x).or_insert((0.0, 0.0));
            e.0 += a;
            e.1 += b;
        }
        m1 += s1;
        m2 += s2;
    }
    let n = n_paths as f64;
    let se = |s1: f64, s2: f64| {
        let mean = s1 / n;
        (((s2 / n) - mean * mean).max(0.0) / (n - 1.0).max(1.0)).sqrt()
    };
    let mut sites = Vec::with_capacity(total.len());
    let mut mean = Vec::with_capacity(total.len());
    let mut stderr = Vec::with_capacity(total.len());
    for (x, (a, b)) in total {
        sites.push(x);
        mean.push(a / n);
        stderr.push(se(a, b));
    }
    Ok(McEstimate { t, n_paths, sites, mean, stderr, mass: m1 / n, mass_stderr: se(m1, m2) })
}

/// One `(seed, t)` row of the mass asymptotics.
#[derive(Clone, Debug, Serialize)]
pub struct MassRow {
    pub seed: u64,
    pub t: f64,
    pub box_radius: u64,
    /// Height on `B_t`.
    pub h_t: f64,
    /// Height on the macrobox.
    pub h_box: f64,
    /// `ψ(d log t)`.
    pub psi_dlogt: f64,
    pub log_mass: f64,
    /// `(1/t) log U(t) - h_t + χ`.
    pub residual: f64,
    /// `(1/t) log U(t) - h_box + χ`.
    pub residual_box: f64,
    /// `(1/t) log U(t) ≤ h_box`.
    pub eigen_bound_ok: bool,
}

/// Builds the mass row of a solved cell.
pub fn mass_row(
    xi: &PotentialField,
    model: &TailModel,
    seed: u64,
    t: f64,
    macrobox: &BoxDomain,
    log_mass: f64,
    chi: f64,
) -> Result<MassRow> {
    let d = xi.dim();
    let bt = BoxDomain::centered(d, t.floor() as u64);
    let h_t = height(xi, &bt)?;
    let h_box = height(xi, macrobox)?;
    let rate = log_mass / t;
    Ok(MassRow {
        seed,
        t,
        box_radius: macrobox.radius,
        h_t,
        h_box,
        psi_dlogt: model.psi(d as f64 * t.ln()),
        log_mass,
        residual: rate - h_t + chi,
        residual_box: rate - h_box + chi,
        eigen_bound_ok: rate <= h_box + 1e-9 * (1.0 + h_box.abs()),
    })
}

/// `(seed, t)` table of heights, `(1/t) log U(t)` and residuals. The field
/// of each seed is sampled on the macrobox of the largest time.
pub fn mass_asymptotics_series(
    model: &TailModel,
    dim: usize,
    t_grid: &[f64],
    seeds: &[u64],
    rule: BoxRule,
    chi: f64,
) -> Result<Vec<MassRow>> {
    let cells: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| t_grid.iter().map(move |&t| (s, t))).collect();
    cells
        .par_iter()
        .map(|&(seed, t)| {
            let b = BoxDomain::centered(dim, rule.radius(t).max(t.ceil() as u64));
            let xi = crate::randfield::sample_field(model, &b, seed);
            let u = solve_pam(&xi, &b, t, Method::Krylov)?;
            mass_row(&xi, model, seed, t, &b, u.log_total_mass(), chi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randfield::sample_field;

    #[test]
    fn single_site_box() {
        let b = BoxDomain::centered(1, 0);
        let xi = PotentialField::constant(b.clone(), 1.3);
        let u = solve_pam(&xi, &b, 2.0, Method::Krylov).unwrap();
        assert!((u.log_value(&Site::from(0)) - (1.3 - 2.0) * 2.0).abs() < 1e-12);
        let u0 = solve_pam(&xi, &b, 0.0, Method::Krylov).unwrap();
        assert_eq!(total_mass(&u0), 1.0);
    }

    #[test]
    fn zero_potential_conserves_mass() {
        let b = BoxDomain::centered(1, 60);
        let xi = PotentialField::constant(b.clone(), 0.0);
        let u = solve_pam(&xi, &b, 3.0, Method::Krylov).unwrap();
        assert!((total_mass(&u) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_shift() {
        let b = BoxDomain::centered(1, 60);
        let z = PotentialField::constant(b.clone(), 0.0);
        let c = PotentialField::constant(b.clone(), 0.7);
        let u0 = solve_pam(&z, &b, 3.0, Method::Krylov).unwrap();
        let uc = solve_pam(&c, &b, 3.0, Method::Krylov).unwrap();
        assert!((uc.log_total_mass() - u0.log_total_mass() - 2.1).abs() < 1e-6);
    }

    #[test]
    fn split_trivial_cases() {
        let outer = BoxDomain::centered(1, 20);
        let b = BoxDomain::centered(1, 10);
        let xi = sample_field(&TailModel::double_exp(1.0), &outer, 4);
        let s = split_contributions(&xi, &b, &SiteSet::new(), 1.0, &outer, Method::Krylov, 1e-12).unwrap();
        assert!(s.u3.values.iter().all(|v| v.abs() < 1e-12 * s.full.values.iter().copied().fold(0.0, f64::max)));
        let s = split_contributions(&xi, &b, &b.to_site_set(), 1.0, &outer, Method::Krylov, 1e-12).unwrap();
        assert!(s.u2.values.iter().all(|&v| v == 0.0));
        assert!(s.identity_error < 1e-10);
    }

    #[test]
    fn mc_zero_potential_weights_are_one() {
        let b = BoxDomain::centered(1, 200);
        let xi = PotentialField::constant(b, 0.0);
        let e = feynman_kac_mc(&xi, 1.0, 5000, 3).unwrap();
        assert!((e.mass - 1.0).abs() < 1e-12);
        let e0 = feynman_kac_mc(&xi, 0.0, 100, 3).unwrap();
        assert_eq!(e0.at(&Site::from(0)), (1.0, 0.0));
    }

    #[test]
    fn box_rule() {
        assert_eq!(BoxRule::LogSquared.radius(20.0), (20.0 * 20f64.ln().powi(2)).ceil() as u64);
        assert_eq!(BoxRule::LogSquared.radius(0.5), 1);
        assert!(BoxRule::Exponent { kappa: 1.0 }.is_deviation());
    }
}
