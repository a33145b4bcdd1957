//! Finite-time checks: mass concentration, potential and solution shape
//! distances, the superposition bound, the probabilistic eigenfunction
//! representation, eigenfunction decay and localization, negligibility of
//! `u₂`, and trend statistics over a time grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{cube_neighborhood, BoxDomain, Site, SiteSet};
use crate::pamsolve::{solve_on, SolutionSplit};
use crate::randfield::{site_stream_key, PotentialField};
use crate::shape::{d_r_metric, OptimalShape};
use crate::spectral::{self, LogField, Method, Normalization, Operator, ScaledField, SpectralPair, DEFAULT_TOL};

/// Hex SHA-256 of the JSON encoding of a value.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

/// Hex SHA-256 of raw bytes.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `Σ_{x ∈ B_r(Γ*)} u / Σ u`.
pub fn mass_concentration(u: &LogField, gamma_star: &SiteSet, r: u64) -> f64 {
    let total = u.log_sum();
    if gamma_star.is_empty() || total == f64::NEG_INFINITY {
        return 0.0;
    }
    let ball = cube_neighborhood(gamma_star, r);
    (u.log_sum_where(|x| ball.contains(x)) - total).exp().clamp(0.0, 1.0)
}

/// `max_{y ∈ Γ*} d_R(ξ(y + ·) - h, V_ρ)`; `0` for empty `Γ*`.
pub fn potential_shape_check(xi: &PotentialField, gamma_star: &SiteSet, h: f64, shape: &OptimalShape, r: u64) -> f64 {
    gamma_star
        .iter()
        .map(|y| d_r_metric(|x| xi.value(&y.offset(x)) - h, |x| shape.potential(x), xi.dim(), r))
        .fold(0.0, f64::max)
}

/// `max_{y ∈ Γ*} d_R(log u(y + ·) - log u(y), log w_ρ)`. Errors when `u`
/// vanishes at a member of `Γ*`.
pub fn solution_shape_check(u: &LogField, gamma_star: &SiteSet, shape: &OptimalShape, r: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for y in gamma_star {
        let base = u.log_value(y);
        if base == f64::NEG_INFINITY {
            return Err(Error::Invalid(format!("solution vanishes at {y}")));
        }
        let d = d_r_metric(|x| u.log_value(&y.offset(x)) - base, |x| shape.log_w(x), y.dim(), r);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// `v_y` on `(B ∖ Γ) ∪ {y}` anchored by `v_y(y) = 1`, for every `y ∈ Γ`.
/// When `Γ ∖ {y}` disconnects the domain, `v_y` lives on the component of
/// `y` and vanishes elsewhere.
pub fn anchored_eigenfunctions(xi: &PotentialField, b: &SiteSet, gamma: &SiteSet) -> Result<Vec<(Site, SpectralPair)>> {
    let rest = b.difference(gamma);
    let ys: Vec<Site> = gamma.iter().cloned().collect();
    ys.par_iter()
        .map(|y| {
            let dom = component_of(&rest, y);
            let pair = spectral::principal_eigenpair(&dom, xi, Normalization::Anchor(y.clone()), DEFAULT_TOL)?;
            Ok((y.clone(), pair))
        })
        .collect()
}

/// Nearest-neighbor component of `y` in `rest ∪ {y}`.
fn component_of(rest: &SiteSet, y: &Site) -> SiteSet {
    let mut comp = SiteSet::singleton(y.clone());
    let mut stack = vec![y.clone()];
    while let Some(x) = stack.pop() {
        for n in x.neighbors() {
            if rest.contains(&n) && comp.insert(n.clone()) {
                stack.push(n);
            }
        }
    }
    comp
}

/// Pointwise and aggregate slack of the superposition bound.
#[derive(Clone, Debug, Serialize)]
pub struct SuperpositionReport {
    pub t: f64,
    pub r: u64,
    pub sites: usize,
    /// Sites with `w > RHS + slack · max u`.
    pub violations: usize,
    /// `max (w - RHS) / max u`.
    pub max_excess: f64,
    pub worst_site: Option<Site>,
    /// Left side of the aggregate bound.
    pub ratio: f64,
    /// Right side of the aggregate bound.
    pub ratio_bound: f64,
    pub ratio_ok: bool,
    pub eigenvalues: Vec<f64>,
    pub norms: Vec<f64>,
}

impl SuperpositionReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.ratio_ok
    }
}

/// Checks `w ≤ Σ_y w(y) ‖v_y‖² v_y` pointwise on `B` and the aggregate
/// ratio bound outside `B_r(Γ)`. `w` and `top` share a scale; `top` is
/// `max u` used to make the slack relative.
pub fn superposition_bound_from(
    w: &ScaledField,
    top: f64,
    b: &SiteSet,
    gamma: &SiteSet,
    pairs: &[(Site, SpectralPair)],
    t: f64,
    r: u64,
    slack: f64,
) -> SuperpositionReport {
    let weights: Vec<f64> = pairs.iter().map(|(y, p)| w.raw(y) * p.norm2_sq()).collect();
    let abs_slack = slack * top.max(f64::MIN_POSITIVE);
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    let mut worst_site = None;
    let far = b.difference(&cube_neighborhood(gamma, r));
    for x in b {
        let rhs: f64 = pairs.iter().zip(&weights).map(|((_, p), c)| c * p.value(x)).sum();
        let excess = w.raw(x) - rhs;
        if excess > max_excess {
            max_excess = excess;
            worst_site = Some(x.clone());
        }
        if excess > abs_slack {
            violations += 1;
        }
    }
    let total: f64 = b.iter().map(|x| w.raw(x)).sum();
    let outside: f64 = far.iter().map(|x| w.raw(x)).sum();
    let ratio = if total > 0.0 { outside / total } else { 0.0 };
    let ratio_bound = pairs
        .iter()
        .map(|(_, p)| p.norm2_sq() * far.iter().map(|x| p.value(x)).sum::<f64>())
        .fold(0.0, f64::max);
    SuperpositionReport {
        t,
        r,
        sites: b.len(),
        violations,
        max_excess: max_excess / top.max(f64::MIN_POSITIVE),
        worst_site,
        ratio,
        ratio_bound,
        ratio_ok: ratio <= ratio_bound + slack,
        eigenvalues: pairs.iter().map(|(_, p)| p.eigenvalue).collect(),
        norms: pairs.iter().map(|(_, p)| p.norm2_sq()).collect(),
    }
}

/// Computes `w = u_B - u_{B∖Γ}` exactly and runs
/// [`superposition_bound_from`].
pub fn superposition_bound_check(
    xi: &PotentialField,
    b: &BoxDomain,
    gamma: &SiteSet,
    t: f64,
    r: u64,
    method: Method,
    slack: f64,
) -> Result<SuperpositionReport> {
    let set = b.to_site_set();
    let ub = solve_on(xi, &set, b, t, method, spectral::KRYLOV_TOL)?;
    let avoid = set.difference(gamma);
    let u2 = solve_on(xi, &avoid, b, t, method, spectral::KRYLOV_TOL)?;
    let scale = ub.u.log_scale;
    let i2 = u2.u.on_sites(&ub.u.sites, scale);
    let w = ScaledField {
        sites: ub.u.sites.clone(),
        values: ub.u.values.iter().zip(&i2).map(|(a, b)| a - b).collect(),
        log_scale: scale,
    };
    let top = ub.u.values.iter().copied().fold(0.0, f64::max);
    let pairs = anchored_eigenfunctions(xi, &set, gamma)?;
    Ok(superposition_bound_from(&w, top, &set, gamma, &pairs, t, r, slack))
}

/// One Monte Carlo probe of the eigenfunction representation.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub x: Site,
    pub eigen: f64,
    pub mc: f64,
    pub stderr: f64,
    pub agrees: bool,
    /// Set when the estimate is too noisy to compare.
    pub skipped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RepresentationReport {
    pub y: Site,
    pub lambda_y: f64,
    pub n_paths: usize,
    pub probes: Vec<ProbeRow>,
}

impl RepresentationReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.skipped || p.agrees)
    }
}

const MAX_STEPS: usize = 1_000_000;

/// Compares `v_y` with a Monte Carlo estimate of
/// `E_x exp{∫_0^{τ_y} (ξ - λ_y)} 1{τ_y = τ_Γ < τ_{B^c}}` at the probes.
pub fn eigenfunction_rep_check(
    xi: &PotentialField,
    b: &BoxDomain,
    gamma: &SiteSet,
    y: &Site,
    probes: &[Site],
    n_paths: usize,
    seed: u64,
) -> Result<RepresentationReport> {
    if !gamma.contains(y) {
        return Err(Error::Invalid(format!("{y} is not in gamma")));
    }
    let set = b.to_site_set();
    let mut dom = set.difference(gamma);
    dom.insert(y.clone());
    let pair = spectral::principal_eigenpair(&dom, xi, Normalization::Anchor(y.clone()), DEFAULT_TOL)?;
    let lambda = pair.eigenvalue;
    let d = b.dim();
    let rows = probes
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let eigen = if b.contains(x) { pair.value(x) } else { 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(site_stream_key(seed ^ (k as u64).wrapping_mul(0x9e37), x));
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            let mut truncated = false;
            for _ in 0..n_paths {
                let mut z = x.clone();
                let mut log_w = 0.0f64;
                let mut score = 0.0;
                for step in 0.. {
                    if !b.contains(&z) {
                        break;
                    }
                    if gamma.contains(&z) {
                        if &z == y {
                            score = log_w.exp();
                        }
                        break;
                    }
                    if step >= MAX_STEPS {
                        truncated = true;
                        break;
                    }
                    let hold: f64 = rng.sample::<f64, _>(rand_distr::Exp1) / (2.0 * d as f64);
                    log_w += (xi.value(&z) - lambda) * hold;
                    let dir = rng.random_range(0..2 * d);
                    let mut c = z.coords().to_vec();
                    c[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
                    z = Site::new(c);
                }
                s1 += score;
                s2 += score * score;
            }
            let n = n_paths as f64;
            let mc = s1 / n;
            let stderr = ((s2 / n - mc * mc).max(0.0) / (n - 1.0).max(1.0)).sqrt();
            let noisy = truncated || (mc > 0.0 && stderr > 0.25 * mc);
            let agrees = (mc - eigen).abs() <= 3.0 * stderr + 1e-12 * eigen.abs().max(1.0);
            ProbeRow { x: x.clone(), eigen, mc, stderr, agrees, skipped: noisy }
        })
        .collect();
    Ok(RepresentationReport { y: y.clone(), lambda_y: lambda, n_paths, probes: rows })
}

/// Least-squares fit of `log v_y` against `ℓ¹` distance to `y`.
#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
    pub q: f64,
    /// `slope / log q`: the exponent `c` in `v_y ≤ q^{c|x-y|}` implied by
    /// the fit.
    pub implied_c: f64,
    pub non_intermittent: bool,
}

impl DecayFit {
    pub fn decays(&self) -> bool {
        self.slope < 0.0
    }
}

/// Fits the decay of an anchored eigenfunction; values below `1e-12` of
/// the anchor are excluded.
pub fn decay_profile(v_y: &SpectralPair, y: &Site, q: f64) -> Result<DecayFit> {
    let anchor = v_y.value(y);
    if !(anchor > 0.0) {
        return Err(Error::NullAnchor(y.to_string()));
    }
    let pts: Vec<(f64, f64)> = v_y
        .iter()
        .filter(|(_, v)| *v > 1e-12 * anchor)
        .map(|(x, v)| (x.ell1_distance(y) as f64, (v / anchor).ln()))
        .collect();
    let (slope, intercept, r_squared) = least_squares(&pts);
    let implied_c = if q > 0.0 && q < 1.0 { slope / q.ln() } else { f64::NAN };
    Ok(DecayFit {
        slope,
        intercept,
        r_squared,
        points: pts.len(),
        q,
        implied_c,
        non_intermittent: !(slope < 0.0 && r_squared > 0.9),
    })
}

/// Ordinary least squares `(slope, intercept, R²)`.
pub fn least_squares(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (f64::NAN, my, f64::NAN);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Signed gaps `v_y - v_y^{(R)}` on `B_R(y)`.
#[derive(Clone, Debug, Serialize)]
pub struct LocalizationGap {
    pub radius: u64,
    pub max_gap: f64,
    pub min_gap: f64,
    pub sup_gap: f64,
}

pub fn localization_compare(v_y: &SpectralPair, v_y_r: &SpectralPair, y: &Site, radius: u64) -> LocalizationGap {
    let ball = BoxDomain::new(y.clone(), radius);
    let (mut max_gap, mut min_gap) = (f64::NEG_INFINITY, f64::INFINITY);
    for x in ball.sites() {
        let g = v_y.value(&x) - v_y_r.value(&x);
        max_gap = max_gap.max(g);
        min_gap = min_gap.min(g);
    }
    LocalizationGap { radius, max_gap, min_gap, sup_gap: max_gap.abs().max(min_gap.abs()) }
}

/// `v_y^{(R)}`: the anchored eigenfunction on `B_R(y) ∩ B`.
pub fn local_eigenfunction(xi: &PotentialField, b: &BoxDomain, y: &Site, radius: u64) -> Result<SpectralPair> {
    let ball = BoxDomain::new(y.clone(), radius);
    let dom = b.intersect(&ball).unwrap_or_default();
    spectral::principal_eigenpair(&dom, xi, Normalization::Anchor(y.clone()), DEFAULT_TOL)
}

/// Negligibility of `u₂` and the Schwarz bound.
#[derive(Clone, Debug, Serialize)]
pub struct U2Report {
    /// `Σ_B u₂ / U(t)`.
    pub ratio: f64,
    pub log_sum_u2: f64,
    /// `½ log |B| + t λ_{B∖Γ}(ξ)`.
    pub log_bound: f64,
    /// `log_bound - log_sum_u2`.
    pub slack: f64,
    pub bound_ok: bool,
    /// `λ_{B∖Γ}(ξ - h)`.
    pub lambda_avoid_shifted: f64,
    /// `λ_B(ξ - h)`.
    pub lambda_box_shifted: f64,
    /// `λ_{B∖Γ}(ξ - h) < -χ`.
    pub below_minus_chi: bool,
}

/// Reads `u₂` from a split and compares with `√|B| e^{t λ_{B∖Γ}}`.
pub fn u2_negligibility(xi: &PotentialField, split: &SolutionSplit, h: f64, chi: f64) -> Result<U2Report> {
    let b = &split.macrobox;
    let set = b.to_site_set();
    let avoid = set.difference(&split.gamma);
    let op = Operator::from_field(&avoid, xi);
    let lambda = if op.is_empty() { f64::NEG_INFINITY } else { spectral::principal_of(&op, DEFAULT_TOL)?.0 };
    let lambda_box = spectral::principal_eigenvalue(&set, xi, DEFAULT_TOL)?;
    let log_sum_u2 = split.u2.log_sum();
    let log_u = split.full.log_sum();
    let ratio = if log_sum_u2 == f64::NEG_INFINITY { 0.0 } else { (log_sum_u2 - log_u).exp() };
    let log_bound = 0.5 * (set.len() as f64).ln() + split.t * lambda;
    let slack = log_bound - log_sum_u2;
    Ok(U2Report {
        ratio,
        log_sum_u2,
        log_bound,
        slack,
        bound_ok: slack >= -1e-8 || log_sum_u2 == f64::NEG_INFINITY,
        lambda_avoid_shifted: lambda - h,
        lambda_box_shifted: lambda_box - h,
        below_minus_chi: lambda - h < -chi,
    })
}

/// Median of a sample; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Theil–Sen slope: median of pairwise slopes over distinct abscissae.
pub fn theil_sen(pts: &[(f64, f64)]) -> Option<f64> {
    let mut slopes = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dx = pts[j].0 - pts[i].0;
            if dx != 0.0 && pts[i].1.is_finite() && pts[j].1.is_finite() {
                slopes.push((pts[j].1 - pts[i].1) / dx);
            }
        }
    }
    (!slopes.is_empty()).then(|| median(&slopes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Hard,
    Trend,
}

/// One check with its inputs digest, measurement and threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub operation: String,
    pub params: String,
    pub inputs_digest: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub kind: CheckKind,
    pub note: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Decreasing,
    NonDecreasing,
}

/// Medians over seeds along the time grid with their Theil–Sen slope.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrendSeries {
    pub name: String,
    pub t: Vec<f64>,
    pub median: Vec<f64>,
    pub slope: Option<f64>,
    pub direction: Direction,
    pub passed: bool,
}

impl TrendSeries {
    pub fn new(name: &str, t: Vec<f64>, median: Vec<f64>, direction: Direction) -> Self {
        let pts: Vec<(f64, f64)> = t.iter().copied().zip(median.iter().copied()).collect();
        let slope = theil_sen(&pts);
        let passed = match (slope, direction) {
            (Some(s), Direction::Decreasing) => s < 0.0,
            (Some(s), Direction::NonDecreasing) => s >= 0.0,
            (None, _) => false,
        };
        TrendSeries { name: name.to_string(), t, median, slope, direction, passed }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub run_id: String,
    pub checks: Vec<CheckRecord>,
    pub trends: Vec<TrendSeries>,
}

impl VerificationReport {
    pub fn new(run_id: impl Into<String>) -> Self {
        VerificationReport { run_id: run_id.into(), checks: Vec::new(), trends: Vec::new() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        name: &str,
        operation: &str,
        params: String,
        inputs_digest: String,
        measured: f64,
        threshold: f64,
        passed: bool,
        kind: CheckKind,
        note: impl Into<String>,
    ) {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            operation: operation.to_string(),
            params,
            inputs_digest,
            measured,
            threshold,
            passed,
            kind,
            note: note.into(),
        });
    }

    pub fn hard_failures(&self) -> usize {
        self.checks.iter().filter(|c| c.kind == CheckKind::Hard && !c.passed).count()
    }

    pub fn trend_failures(&self) -> usize {
        self.checks.iter().filter(|c| c.kind == CheckKind::Trend && !c.passed).count()
            + self.trends.iter().filter(|t| !t.passed).count()
    }

    /// Exit status: hard failures always fail, trend failures only when
    /// strict.
    pub fn succeeded(&self, strict: bool) -> bool {
        self.hard_failures() == 0 && (!strict || self.trend_failures() == 0)
    }

    /// Plain-text summary, one line per check and trend.
    pub fn to_text(&self) -> String {
        let mut s = format!("run {}\n", self.run_id);
        for c in &self.checks {
            let status = if c.passed { "pass" } else if c.kind == CheckKind::Hard { "FAIL" } else { "flag" };
            s.push_str(&format!(
                "{status:4} {:<28} measured={:.6e} threshold={:.6e} [{}] {}\n",
                c.name, c.measured, c.threshold, c.params, c.note
            ));
        }
        for t in &self.trends {
            let status = if t.passed { "pass" } else { "flag" };
            let slope = t.slope.map_or("none".to_string(), |s| format!("{s:.6e}"));
            s.push_str(&format!("{status:4} trend {:<22} slope={slope} {:?}\n", t.name, t.direction));
        }
        s.push_str(&format!("hard failures: {}, trend flags: {}\n", self.hard_failures(), self.trend_failures()));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randfield::Rho;
    use crate::shape::build_optimal_shape;

    fn chain(values: Vec<f64>) -> PotentialField {
        let r = (values.len() / 2) as u64;
        PotentialField::from_values(BoxDomain::centered(1, r), values).unwrap()
    }

    #[test]
    fn concentration_limits() {
        let u = ScaledField {
            sites: (-2..=2).map(Site::from).collect(),
            values: vec![0.0, 1.0, 2.0, 1.0, 0.0],
            log_scale: 3.0,
        };
        let u = LogField::from(&u);
        let g = SiteSet::singleton(Site::from(0));
        assert_eq!(mass_concentration(&u, &SiteSet::new(), 3), 0.0);
        assert!((mass_concentration(&u, &g, 1) - 1.0).abs() < 1e-15);
        assert!((mass_concentration(&u, &g, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn planted_potential_is_exact() {
        let shape = build_optimal_shape(Rho::Finite(4.0), 1, 10, 1e-8).unwrap();
        let h = 7.0;
        let y = Site::from(3);
        let xi = PotentialField::from_fn(BoxDomain::centered(1, 20), |x| h + shape.potential(&x.minus(&y)));
        let g = SiteSet::singleton(y.clone());
        assert!(potential_shape_check(&xi, &g, h, &shape, 3) < 1e-13);
        let mut bumped = xi.clone();
        let x = Site::from(4);
        bumped.set(&x, xi.value(&x) + 0.01).unwrap();
        let d = potential_shape_check(&bumped, &g, h, &shape, 3);
        let vmax = shape.profile_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(d > 0.0 && d <= vmax.exp() * (0.01f64.exp() - 1.0) + 1e-15);
    }

    #[test]
    fn solution_shape_of_w() {
        let shape = build_optimal_shape(Rho::Finite(2.0), 1, 10, 1e-8).unwrap();
        let sites: Vec<Site> = (-10..=10).map(Site::from).collect();
        let values = sites.iter().map(|x| 5.0 * shape.w(x)).collect();
        let u = LogField::from(&ScaledField { sites, values, log_scale: -40.0 });
        let g = SiteSet::singleton(Site::from(0));
        assert!(solution_shape_check(&u, &g, &shape, 4).unwrap() < 1e-14);
        let inf = build_optimal_shape(Rho::Infinite, 1, 3, 1e-8).unwrap();
        let single = LogField { sites: vec![Site::from(0)], log_values: vec![0.0] };
        assert_eq!(solution_shape_check(&single, &g, &inf, 2).unwrap(), 0.0);
    }

    #[test]
    fn superposition_on_small_chain() {
        let vals: Vec<f64> = (0..21).map(|i| ((i * 7919) % 13) as f64 * 0.3).collect();
        let xi = chain(vals);
        let b = xi.domain().clone();
        let gamma = SiteSet::singleton(Site::from(4));
        for t in [0.5, 1.0, 2.0] {
            let rep = superposition_bound_check(&xi, &b, &gamma, t, 1, Method::Eigen, 1e-10).unwrap();
            assert!(rep.passed(), "{rep:?}");
            assert!(rep.norms[0] >= 1.0);
        }
    }

    #[test]
    fn superposition_with_cut_off_anchor() {
        let vals: Vec<f64> = (0..21).map(|i| ((i * 7919) % 13) as f64 * 0.3).collect();
        let xi = chain(vals);
        let b = xi.domain().clone();
        let gamma: SiteSet = [-10, -9, 3].into_iter().map(Site::from).collect();
        let pairs = anchored_eigenfunctions(&xi, &b.to_site_set(), &gamma).unwrap();
        assert_eq!(pairs[0].1.sites, vec![Site::from(-10)]);
        assert!((pairs[0].1.eigenvalue - (xi.value(&Site::from(-10)) - 2.0)).abs() < 1e-12);
        for t in [0.5, 2.0] {
            let rep = superposition_bound_check(&xi, &b, &gamma, t, 1, Method::Eigen, 1e-10).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn representation_at_anchor_and_outside() {
        let xi = chain(vec![0.0, 0.5, 2.0, 0.3, 0.1, 0.0, 0.2]);
        let b = xi.domain().clone();
        let gamma = SiteSet::singleton(Site::from(-1));
        let probes = [Site::from(-1), Site::from(7), Site::from(1)];
        let rep = eigenfunction_rep_check(&xi, &b, &gamma, &Site::from(-1), &probes, 20_000, 3).unwrap();
        assert_eq!(rep.probes[0].mc, 1.0);
        assert_eq!(rep.probes[0].eigen, 1.0);
        assert_eq!(rep.probes[1].mc, 0.0);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn decay_of_deep_peak() {
        let mut vals = vec![0.0; 41];
        vals[20] = 6.0;
        let xi = chain(vals);
        let y = Site::from(0);
        let v = local_eigenfunction(&xi, xi.domain(), &y, 20).unwrap();
        let fit = decay_profile(&v, &y, 0.8).unwrap();
        assert!(fit.decays() && fit.r_squared > 0.9 && !fit.non_intermittent, "{fit:?}");
        let flat = chain(vec![1.0; 41]);
        let v = local_eigenfunction(&flat, flat.domain(), &y, 20).unwrap();
        assert!(decay_profile(&v, &y, 0.8).unwrap().non_intermittent);
    }

    #[test]
    fn localization_identical_problems() {
        let xi = chain(vec![0.1, 0.7, 3.0, 0.2, 0.4]);
        let y = Site::from(0);
        let a = local_eigenfunction(&xi, xi.domain(), &y, 2).unwrap();
        let b = local_eigenfunction(&xi, xi.domain(), &y, 2).unwrap();
        assert_eq!(localization_compare(&a, &b, &y, 2).sup_gap, 0.0);
    }

    #[test]
    fn theil_sen_examples() {
        assert_eq!(theil_sen(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]), Some(2.0));
        assert_eq!(theil_sen(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 7.0), (4.0, -100.0)]).map(|s| s > 0.0), Some(true));
        assert_eq!(theil_sen(&[(1.0, 1.0)]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn report_exit_semantics() {
        let mut r = VerificationReport::new("x");
        r.push("a", "op", String::new(), String::new(), 1.0, 0.0, false, CheckKind::Trend, "");
        assert!(r.succeeded(false));
        assert!(!r.succeeded(true));
        r.push("b", "op", String::new(), String::new(), 1.0, 0.0, false, CheckKind::Hard, "");
        assert!(!r.succeeded(false));
        assert!(r.to_text().contains("FAIL"));
    }
}
