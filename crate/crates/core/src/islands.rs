//! High exceedances, archipelagos and their capitals, spectral optimality,
//! the spectral gap window, and the island sets `Γ` and `Γ*`.
//!
//! The construction is indexed by the macrobox scale `T`; all cluster
//! eigenvalues are computed in the intersection with the macrobox.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{connected_components, cube_neighborhood, set_distance, BoxDomain, Site, SiteSet};
use crate::randfield::{height, PotentialField};
use crate::spectral::{self, DEFAULT_TOL};

/// Parameters of the island construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandParams {
    /// Exceedance depth `a`.
    pub a: f64,
    /// Optimality slack `δ`.
    pub delta: f64,
    /// Island radius `𝓡`.
    pub big_r: u64,
    /// Shape-check radius `R < 𝓡`.
    pub small_r: u64,
    /// Mass threshold exponent `η`.
    pub eta: f64,
}

impl IslandParams {
    /// Defaults `a = 1`, `δ = min(a/4, ρ log 2 / 2)`, `𝓡 = 5`, `R = 2`,
    /// `η = 1/2`.
    pub fn defaults(rho: f64) -> Self {
        let a = 1.0;
        IslandParams { a, delta: default_delta(a, rho), big_r: 5, small_r: 2, eta: 0.5 }
    }

    pub fn validate(&self, rho: f64) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::Config("a must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < self.a / 2.0) {
            return Err(Error::Config(format!("delta {} must lie in (0, a/2)", self.delta)));
        }
        if rho.is_finite() && self.delta >= rho * std::f64::consts::LN_2 {
            return Err(Error::Config(format!("delta {} must be below rho log 2", self.delta)));
        }
        if !(self.small_r < self.big_r) || self.small_r == 0 {
            return Err(Error::Config("need 0 < R < big R".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        Ok(())
    }

    /// `q = 2d / (2d + a/2)`.
    pub fn q(&self, dim: usize) -> f64 {
        let two_d = 2.0 * dim as f64;
        two_d / (two_d + self.a / 2.0)
    }

    /// `K = ⌊e^{(χ + a)/ρ}⌋`.
    pub fn k_bound(&self, chi: f64, rho: f64) -> usize {
        if rho.is_infinite() {
            return 1;
        }
        ((chi + self.a) / rho).exp().floor().max(1.0) as usize
    }

    /// Huge radius `⌈log² T⌉`.
    pub fn huge_radius(scale: f64) -> u64 {
        let l = scale.max(1.0).ln();
        (l * l).ceil().max(1.0) as u64
    }

    /// Gap floor `T^{-2d}`.
    pub fn gap_floor(scale: f64, dim: usize) -> f64 {
        scale.powf(-2.0 * dim as f64)
    }

    /// Separation scale `T^{2e^{-δ/ρ} - 1}`.
    pub fn separation_scale(&self, scale: f64, rho: f64) -> f64 {
        let e = if rho.is_infinite() { 1.0 } else { (-self.delta / rho).exp() };
        scale.powf(2.0 * e - 1.0)
    }
}

/// `min(a/4, ρ log 2 / 2)`.
pub fn default_delta(a: f64, rho: f64) -> f64 {
    (a / 4.0).min(rho * std::f64::consts::LN_2 / 2.0)
}

/// `{x ∈ B : ξ(x) > h - χ - a}`.
pub fn exceedance_set(xi: &PotentialField, b: &BoxDomain, h: f64, chi: f64, a: f64) -> SiteSet {
    let level = h - chi - a;
    b.sites().filter(|x| xi.value(x) > level).collect()
}

/// Archipelagos (`2𝓡`-connected components) and their capitals.
#[derive(Clone, Debug, Serialize)]
pub struct Archipelagos {
    pub components: Vec<SiteSet>,
    pub capitals: Vec<Site>,
    /// `B_𝓡`-neighborhoods of distinct archipelagos are pairwise disjoint.
    pub neighborhoods_disjoint: bool,
}

/// Splits `Z` into `2𝓡`-connected components; each capital is a site of
/// maximal `ξ`, the lexicographically smallest on ties.
pub fn decompose_archipelagos(xi: &PotentialField, z: &SiteSet, big_r: u64) -> Archipelagos {
    let components = connected_components(z, 2 * big_r);
    let capitals = components
        .iter()
        .map(|c| {
            let mut best = c.first().expect("components are nonempty").clone();
            for x in c {
                if xi.value(x) > xi.value(&best) {
                    best = x.clone();
                }
            }
            best
        })
        .collect();
    // Two neighborhoods meet iff some pair is within sup-distance 2𝓡, which
    // the component construction excludes.
    let mut neighborhoods_disjoint = true;
    'outer: for i in 0..components.len() {
        for j in i + 1..components.len() {
            for x in &components[i] {
                for y in &components[j] {
                    if x.sup_distance(y) <= 2 * big_r {
                        neighborhoods_disjoint = false;
                        break 'outer;
                    }
                }
            }
        }
    }
    Archipelagos { components, capitals, neighborhoods_disjoint }
}

/// Eigenvalue of `B_r(A) ∩ B`.
pub fn cluster_eigenvalue(xi: &PotentialField, b: &BoxDomain, a: &SiteSet, r: u64) -> Result<f64> {
    let nb = cube_neighborhood(a, r).restrict_to(b);
    spectral::principal_eigenvalue(&nb, xi, DEFAULT_TOL)
}

/// Capitals whose archipelago has `λ(B_𝓡(A) ∩ B) > h - χ - δ`, with the
/// eigenvalue of every archipelago (`None` on solver failure).
pub fn select_optimal_capitals(
    xi: &PotentialField,
    b: &BoxDomain,
    arch: &Archipelagos,
    delta: f64,
    big_r: u64,
    h: f64,
    chi: f64,
) -> (SiteSet, Vec<Option<f64>>) {
    let eigs: Vec<Option<f64>> =
        arch.components.par_iter().map(|c| cluster_eigenvalue(xi, b, c, big_r).ok()).collect();
    let level = h - chi - delta;
    let optimal = arch
        .capitals
        .iter()
        .zip(&eigs)
        .filter(|(_, e)| e.is_some_and(|l| l > level))
        .map(|(z, _)| z.clone())
        .collect();
    (optimal, eigs)
}

/// Largest open subinterval of `[lo, hi]` free of the given eigenvalues;
/// the lowest one on ties. Returns the interval and its length.
pub fn compute_spectral_gap(eigenvalues: &[f64], lo: f64, hi: f64) -> ((f64, f64), f64) {
    let mut inside: Vec<f64> = eigenvalues.iter().copied().filter(|&e| e > lo && e < hi).collect();
    inside.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(inside.len() + 2);
    points.push(lo);
    points.extend(inside);
    points.push(hi);
    let mut best = (points[0], points[1]);
    for w in points.windows(2) {
        if w[1] - w[0] > best.1 - best.0 {
            best = (w[0], w[1]);
        }
    }
    (best, best.1 - best.0)
}

/// `Γ = {z ∈ 𝒞 : λ(B_𝕽(z) ∩ B) ≥ sup I^gap}`.
pub fn build_gamma(huge: &BTreeMap<Site, f64>, gap_interval: (f64, f64)) -> SiteSet {
    huge.iter().filter(|(_, &l)| l >= gap_interval.1).map(|(z, _)| z.clone()).collect()
}

/// `Γ* = {y ∈ Γ : u(y) ≥ t^{-3ηd} max_Γ u}` from log-values of `u`.
pub fn build_gamma_star(gamma: &SiteSet, log_u: impl Fn(&Site) -> f64, eta: f64, t: f64, dim: usize) -> SiteSet {
    if gamma.is_empty() {
        return SiteSet::new();
    }
    let best = gamma.iter().map(&log_u).fold(f64::NEG_INFINITY, f64::max);
    let threshold = best - 3.0 * eta * dim as f64 * t.ln();
    gamma.iter().filter(|y| log_u(y) >= threshold).cloned().collect()
}

fn pairs<S: serde::Serializer>(m: &BTreeMap<Site, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(m.iter())
}

/// The full island record of one field, box and time.
#[derive(Clone, Debug, Serialize)]
pub struct IslandDecomposition {
    pub t: f64,
    /// Macrobox scale `T`.
    pub scale: f64,
    pub h: f64,
    pub chi: f64,
    pub params: IslandParams,
    pub z: SiteSet,
    pub archipelagos: Vec<SiteSet>,
    pub capitals: Vec<Site>,
    pub capital_eigenvalues: Vec<Option<f64>>,
    pub optimal_capitals: SiteSet,
    pub huge_radius: u64,
    #[serde(serialize_with = "pairs")]
    pub huge_eigenvalues: BTreeMap<Site, f64>,
    pub gap_interval: (f64, f64),
    pub gap: f64,
    pub gamma: SiteSet,
    pub gamma_star: Option<SiteSet>,
    /// `min_Γ λ - max_{𝒞∖Γ} λ` on huge clusters.
    pub separation: Option<f64>,
    pub min_gamma_distance: Option<u64>,
    pub k_bound: usize,
    pub max_archipelago: usize,
    pub gap_floor: f64,
    pub separation_scale: f64,
    pub flags: Vec<String>,
}

impl IslandDecomposition {
    /// `Γ* ⊆ Γ ⊆ 𝒞_{δ,𝓡} ⊆ capitals ⊆ Z`.
    pub fn chain_inclusion_holds(&self) -> bool {
        let caps: SiteSet = self.capitals.iter().cloned().collect();
        let star_ok = self.gamma_star.as_ref().is_none_or(|s| s.is_subset(&self.gamma));
        star_ok
            && self.gamma.is_subset(&self.optimal_capitals)
            && self.optimal_capitals.is_subset(&caps)
            && caps.is_subset(&self.z)
    }

    /// Lower bound `(δ/4)/(1 + |𝒞|)` on the gap.
    pub fn gap_lower_bound(&self) -> f64 {
        (self.params.delta / 4.0) / (1.0 + self.optimal_capitals.len() as f64)
    }

    pub fn is_pre_asymptotic(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Runs the construction on `ξ` over the macrobox `b` with scale `T`.
pub fn build_islands(
    xi: &PotentialField,
    b: &BoxDomain,
    t: f64,
    scale: f64,
    chi: f64,
    rho: f64,
    params: &IslandParams,
) -> Result<IslandDecomposition> {
    let h = height(xi, b)?;
    let dim = b.dim();
    let z = exceedance_set(xi, b, h, chi, params.a);
    let arch = decompose_archipelagos(xi, &z, params.big_r);
    let mut flags = Vec::new();
    if !arch.neighborhoods_disjoint {
        flags.push("archipelago neighborhoods intersect".to_string());
    }
    let k_bound = params.k_bound(chi, rho);
    let max_archipelago = arch.components.iter().map(SiteSet::len).max().unwrap_or(0);
    if max_archipelago > k_bound {
        flags.push(format!("archipelago of size {max_archipelago} exceeds K = {k_bound}"));
    }
    let (optimal, capital_eigenvalues) =
        select_optimal_capitals(xi, b, &arch, params.delta, params.big_r, h, chi);
    for (c, e) in arch.capitals.iter().zip(&capital_eigenvalues) {
        if e.is_none() {
            flags.push(format!("eigen-solve failed for the archipelago of {c}"));
        }
    }
    let huge_radius = IslandParams::huge_radius(scale);
    let optimal_list: Vec<Site> = optimal.iter().cloned().collect();
    let huge_list: Vec<Result<f64>> = optimal_list
        .par_iter()
        .map(|z| cluster_eigenvalue(xi, b, &SiteSet::singleton(z.clone()), huge_radius))
        .collect();
    let mut huge = BTreeMap::new();
    for (z, l) in optimal_list.iter().zip(huge_list) {
        huge.insert(z.clone(), l?);
    }
    for (i, y) in optimal_list.iter().enumerate() {
        for x in &optimal_list[i + 1..] {
            if x.sup_distance(y) <= 2 * huge_radius {
                flags.push("huge clusters of optimal capitals overlap".to_string());
                break;
            }
        }
        if flags.last().is_some_and(|f| f.starts_with("huge")) {
            break;
        }
    }
    let lo = h - chi - params.delta / 2.0;
    let hi = h - chi - params.delta / 4.0;
    let eig_list: Vec<f64> = huge.values().copied().collect();
    let (gap_interval, gap) = compute_spectral_gap(&eig_list, lo, hi);
    let gamma = build_gamma(&huge, gap_interval);
    if gamma.is_empty() {
        flags.push("gamma is empty".to_string());
    }
    let in_gamma = huge.iter().filter(|(z, _)| gamma.contains(z)).map(|(_, &l)| l);
    let out_gamma = huge.iter().filter(|(z, _)| !gamma.contains(z)).map(|(_, &l)| l);
    let min_in = in_gamma.fold(f64::INFINITY, f64::min);
    let max_out = out_gamma.fold(f64::NEG_INFINITY, f64::max);
    let separation = (min_in.is_finite() && max_out.is_finite()).then_some(min_in - max_out);
    let min_gamma_distance = min_pairwise_distance(&gamma);
    let gap_floor = IslandParams::gap_floor(scale, dim);
    let separation_scale = params.separation_scale(scale, rho);
    Ok(IslandDecomposition {
        t,
        scale,
        h,
        chi,
        params: params.clone(),
        z,
        archipelagos: arch.components,
        capitals: arch.capitals,
        capital_eigenvalues,
        optimal_capitals: optimal,
        huge_radius,
        huge_eigenvalues: huge,
        gap_interval,
        gap,
        gamma,
        gamma_star: None,
        separation,
        min_gamma_distance,
        k_bound,
        max_archipelago,
        gap_floor,
        separation_scale,
        flags,
    })
}

/// Minimal `ℓ¹` distance between distinct members.
pub fn min_pairwise_distance(a: &SiteSet) -> Option<u64> {
    let v: Vec<&Site> = a.iter().collect();
    let mut best: Option<u64> = None;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let d = v[i].ell1_distance(v[j]);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

/// `ℓ¹` distance matrix of a site set, in set order.
pub fn distance_matrix(a: &SiteSet) -> Vec<Vec<u64>> {
    let v: Vec<&Site> = a.iter().collect();
    v.iter().map(|x| v.iter().map(|y| x.ell1_distance(y)).collect()).collect()
}

/// `ℓ¹` distance between two islands.
pub fn island_distance(a: &SiteSet, b: &SiteSet) -> Result<u64> {
    set_distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> PotentialField {
        let r = (values.len() / 2) as u64;
        PotentialField::from_values(BoxDomain::centered(1, r), values.to_vec()).unwrap()
    }

    #[test]
    fn exceedance_examples() {
        let xi = line(&[0.0, 1.0, 5.0, 2.0, 4.0]);
        let b = xi.domain().clone();
        let z = exceedance_set(&xi, &b, 5.0, 1.0, 0.5);
        assert_eq!(z, [Site::from(0), Site::from(2)].into_iter().collect());
        let c = PotentialField::constant(b.clone(), 1.0);
        assert_eq!(exceedance_set(&c, &b, 1.0, 1.0, 1.0).len(), 5);
    }

    #[test]
    fn capitals_and_ties() {
        let xi = line(&[3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let z: SiteSet = [Site::from(-4), Site::from(-3), Site::from(4)].into_iter().collect();
        let a = decompose_archipelagos(&xi, &z, 1);
        assert_eq!(a.components.len(), 2);
        assert_eq!(a.capitals, vec![Site::from(-4), Site::from(4)]);
        assert!(a.neighborhoods_disjoint);
        let two: SiteSet = [Site::from(-4), Site::from(-1)].into_iter().collect();
        assert_eq!(decompose_archipelagos(&xi, &two, 1).components.len(), 2);
    }

    #[test]
    fn gap_examples() {
        let (i, g) = compute_spectral_gap(&[], 0.0, 1.0);
        assert_eq!(i, (0.0, 1.0));
        assert_eq!(g, 1.0);
        let (i, g) = compute_spectral_gap(&[0.5], 0.0, 1.0);
        assert_eq!(i, (0.0, 0.5));
        assert_eq!(g, 0.5);
        let (_, g) = compute_spectral_gap(&[0.1, 0.2, 0.9], 0.0, 1.0);
        assert!((g - 0.7).abs() < 1e-15);
    }

    #[test]
    fn gamma_star_threshold() {
        let gamma: SiteSet = [Site::from(0), Site::from(50)].into_iter().collect();
        let logu = |x: &Site| if x.ell1_norm() == 0 { 10.0 } else { 0.0 };
        assert_eq!(build_gamma_star(&gamma, logu, 0.5, 100.0, 1).len(), 1);
        assert_eq!(build_gamma_star(&gamma, logu, 1e6, 100.0, 1).len(), 2);
        assert!(build_gamma_star(&SiteSet::new(), logu, 0.5, 100.0, 1).is_empty());
    }

    #[test]
    fn derived_constants() {
        let p = IslandParams::defaults(4.0);
        assert_eq!(p.delta, 0.25);
        assert!((p.q(1) - 0.8).abs() < 1e-15);
        assert_eq!(p.k_bound(1.935, 4.0), 2);
        assert_eq!(IslandParams::huge_radius(std::f64::consts::E.powi(3)), 9);
        p.validate(4.0).unwrap();
    }
}
