//! Potential distributions, reproducible i.i.d. sampling, field height and
//! tail diagnostics.
//!
//! Every distribution is described through `φ(r) = log(1/(1-F(r)))` and its
//! left-continuous inverse `ψ`. A field is sampled as `ξ(x) = ψ(η(x))` with
//! `η(x)` i.i.d. standard exponential, where each site draws from its own
//! generator keyed on `(seed, coordinates)`. Values therefore do not depend
//! on evaluation order, thread count, or the size of the enclosing box.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoxDomain, Site, SiteSet};

/// Tail parameter `ρ ∈ (0, ∞]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rho {
    Finite(f64),
    Infinite,
}

impl Rho {
    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_infinite() && rho > 0.0 {
            Ok(Rho::Infinite)
        } else if rho > 0.0 && rho.is_finite() {
            Ok(Rho::Finite(rho))
        } else {
            Err(Error::Invalid(format!("rho must be positive, got {rho}")))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Rho::Finite(r) => r,
            Rho::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Rho::Finite(r) => Some(r),
            Rho::Infinite => None,
        }
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Finite(r) => write!(f, "{r}"),
            Rho::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Rho {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rho::Finite(r) => s.serialize_f64(*r),
            Rho::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Rho::new(x).map_err(serde::de::Error::custom),
            Raw::Text(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(Rho::Infinite)
            }
            Raw::Text(s) => Err(serde::de::Error::custom(format!("bad rho: {s}"))),
        }
    }
}

/// Distribution of `ξ(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TailModel {
    /// `Prob(ξ(0) > r) = exp(-e^{r/ρ})`.
    DoubleExp { rho: f64 },
    /// `Prob(ξ(0) > r) = exp(-r^α)` for `r ≥ 0`, `α > 1`.
    Weibull { alpha: f64 },
    /// Piecewise-linear distribution function through `knots` `(r_i, F_i)`,
    /// with `F_0 = 0`, continued above the last knot by a double-exponential
    /// tail `φ(r) = φ_L e^{(r - r_L)/tail_rho}`.
    Tabulated { knots: Vec<(f64, f64)>, tail_rho: f64 },
}

const PSI_BISECTION_TOL: f64 = 1e-12;

impl TailModel {
    pub fn double_exp(rho: f64) -> Self {
        TailModel::DoubleExp { rho }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TailModel::DoubleExp { rho } if *rho > 0.0 && rho.is_finite() => Ok(()),
            TailModel::Weibull { alpha } if *alpha > 1.0 && alpha.is_finite() => Ok(()),
            TailModel::Tabulated { knots, tail_rho } => {
                if knots.len() < 2 || *tail_rho <= 0.0 {
                    return Err(Error::Invalid("tabulated model needs >= 2 knots and tail_rho > 0".into()));
                }
                if knots[0].1 != 0.0 {
                    return Err(Error::Invalid("tabulated F must start at 0".into()));
                }
                for w in knots.windows(2) {
                    if !(w[1].0 > w[0].0 && w[1].1 >= w[0].1) {
                        return Err(Error::Invalid("tabulated knots must be increasing in r and F".into()));
                    }
                }
                let last = knots[knots.len() - 1].1;
                if !(last > 0.0 && last < 1.0) {
                    return Err(Error::Invalid("last tabulated F must lie in (0, 1)".into()));
                }
                Ok(())
            }
            other => Err(Error::Invalid(format!("invalid tail model parameters: {other:?}"))),
        }
    }

    /// The `ρ` of the upper-tail asymptotics `ψ(cs) - ψ(s) → ρ log c`.
    pub fn rho(&self) -> Rho {
        match self {
            TailModel::DoubleExp { rho } => Rho::Finite(*rho),
            TailModel::Weibull { .. } => Rho::Infinite,
            TailModel::Tabulated { tail_rho, .. } => Rho::Finite(*tail_rho),
        }
    }

    /// `φ(r) = log(1/(1 - F(r)))`. Errors when the value is not representable.
    pub fn phi(&self, r: f64) -> Result<f64> {
        let v = match self {
            TailModel::DoubleExp { rho } => (r / rho).exp(),
            TailModel::Weibull { alpha } => {
                if r <= 0.0 {
                    0.0
                } else {
                    r.powf(*alpha)
                }
            }
            TailModel::Tabulated { knots, tail_rho } => tabulated_phi(knots, *tail_rho, r),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Invalid(format!("phi({r}) overflows")))
        }
    }

    /// `ψ(s) = min{r : φ(r) ≥ s}` for `s > 0`.
    pub fn psi(&self, s: f64) -> f64 {
        debug_assert!(s >= 0.0);
        match self {
            TailModel::DoubleExp { rho } => rho * s.ln(),
            TailModel::Weibull { alpha } => s.powf(1.0 / alpha),
            TailModel::Tabulated { knots, tail_rho } => tabulated_psi(knots, *tail_rho, s),
        }
    }

    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("tail model serializes")
    }
}

fn tabulated_phi(knots: &[(f64, f64)], tail_rho: f64, r: f64) -> f64 {
    let (r0, _) = knots[0];
    let (rl, fl) = knots[knots.len() - 1];
    if r <= r0 {
        return 0.0;
    }
    if r >= rl {
        let phil = -(1.0 - fl).ln();
        return phil * ((r - rl) / tail_rho).exp();
    }
    let i = knots.partition_point(|k| k.0 <= r) - 1;
    let (ra, fa) = knots[i];
    let (rb, fb) = knots[i + 1];
    let f = fa + (fb - fa) * (r - ra) / (rb - ra);
    -(1.0 - f).ln()
}

fn tabulated_psi(knots: &[(f64, f64)], tail_rho: f64, s: f64) -> f64 {
    let (rl, fl) = knots[knots.len() - 1];
    let phil = -(1.0 - fl).ln();
    if s > phil {
        return rl + tail_rho * (s / phil).ln();
    }
    if s <= 0.0 {
        return knots[0].0;
    }
    // Leftmost r with φ(r) ≥ s; φ(lo) < s ≤ φ(hi) is maintained.
    let mut lo = knots[0].0;
    let mut hi = rl;
    while hi - lo > PSI_BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tabulated_phi(knots, tail_rho, mid) >= s {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `φ(r)` for a model.
pub fn phi_of(model: &TailModel, r: f64) -> Result<f64> {
    model.phi(r)
}

/// `ψ(s)` for a model.
pub fn psi_of(model: &TailModel, s: f64) -> f64 {
    model.psi(s)
}

/// Site-keyed stream seed, a splitmix64 fold of the seed and coordinates.
pub fn site_stream_key(seed: u64, site: &Site) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(seed ^ 0x5bd1_e995_0000_0000 ^ site.dim() as u64);
    for &c in site.coords() {
        h = mix(h ^ (c as u64));
    }
    h
}

/// The standard exponential variate `η(x)` attached to a site.
pub fn site_exponential(seed: u64, site: &Site) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(site_stream_key(seed, site));
    rng.sample(Exp1)
}

/// A real field on a box; `-∞` marks excluded sites.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    domain: BoxDomain,
    values: Vec<f64>,
    seed: Option<u64>,
    model: Option<TailModel>,
}

impl PotentialField {
    pub fn from_values(domain: BoxDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::Invalid(format!(
                "field needs {} values, got {}",
                domain.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Invalid("field values must be real or -inf".into()));
        }
        Ok(PotentialField { domain, values, seed: None, model: None })
    }

    pub fn from_fn(domain: BoxDomain, f: impl Fn(&Site) -> f64) -> Self {
        let values = domain.sites().map(|x| f(&x)).collect();
        PotentialField { domain, values, seed: None, model: None }
    }

    pub fn constant(domain: BoxDomain, c: f64) -> Self {
        let n = domain.len();
        PotentialField { domain, values: vec![c; n], seed: None, model: None }
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn model(&self) -> Option<&TailModel> {
        self.model.as_ref()
    }

    pub fn get(&self, x: &Site) -> Option<f64> {
        self.domain.index_of(x).map(|i| self.values[i])
    }

    /// Value at `x`, `-∞` outside the domain.
    pub fn value(&self, x: &Site) -> f64 {
        self.get(x).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn set(&mut self, x: &Site, v: f64) -> Result<()> {
        let i = self.domain.index_of(x).ok_or(Error::OutsideDomain)?;
        self.values[i] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.domain.sites().zip(self.values.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PotentialField {
        PotentialField {
            domain: self.domain.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            seed: self.seed,
            model: self.model.clone(),
        }
    }

    /// Copy of the field on a sub-box.
    pub fn restrict(&self, sub: &BoxDomain) -> Result<PotentialField> {
        if !self.domain.contains_box(sub) {
            return Err(Error::OutsideDomain);
        }
        let values = sub.sites().map(|x| self.value(&x)).collect();
        Ok(PotentialField { domain: sub.clone(), values, seed: self.seed, model: self.model.clone() })
    }

    /// The same field with `-∞` on every site of `dots`.
    pub fn with_dots(&self, dots: &SiteSet) -> PotentialField {
        let mut out = self.clone();
        for x in dots {
            if let Some(i) = out.domain.index_of(x) {
                out.values[i] = f64::NEG_INFINITY;
            }
        }
        out
    }

    /// `max_A ξ` over a site set contained in the domain.
    pub fn max_over(&self, a: &SiteSet) -> Result<f64> {
        if a.is_empty() {
            return Err(Error::EmptyArgument("maximum over an empty set"));
        }
        let mut m = f64::NEG_INFINITY;
        for x in a {
            m = m.max(self.get(x).ok_or(Error::OutsideDomain)?);
        }
        Ok(m)
    }

    /// Location of the maximum, ties broken toward the lexicographically
    /// smallest site.
    pub fn argmax(&self) -> Site {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        self.domain.site_at(best)
    }

    /// Writes the field as a CSV grid with a commented header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# pamkit-field v1")?;
        writeln!(w, "# dim={}", self.dim())?;
        writeln!(w, "# radius={}", self.domain.radius)?;
        let center: Vec<String> = self.domain.center.coords().iter().map(i64::to_string).collect();
        writeln!(w, "# center={}", center.join(" "))?;
        match self.seed {
            Some(s) => writeln!(w, "# seed={s}")?,
            None => writeln!(w, "# seed=none")?,
        }
        match &self.model {
            Some(m) => writeln!(w, "# model={}", m.descriptor())?,
            None => writeln!(w, "# model=none")?,
        }
        let mut cols: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        cols.push("value".into());
        writeln!(w, "{}", cols.join(","))?;
        for (x, v) in self.iter() {
            let mut row: Vec<String> = x.coords().iter().map(i64::to_string).collect();
            // Display for f64 is the shortest round-tripping representation.
            row.push(format!("{v}"));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<PotentialField> {
        let mut dim = None;
        let mut radius = None;
        let mut center = None;
        let mut seed = None;
        let mut model = None;
        let mut body = String::new();
        for line in r.lines() {
            let line = line?;
            if let Some(h) = line.strip_prefix("# ") {
                if let Some((k, v)) = h.split_once('=') {
                    match k {
                        "dim" => dim = Some(parse::<usize>(v)?),
                        "radius" => radius = Some(parse::<u64>(v)?),
                        "center" => {
                            center = Some(
                                v.split_whitespace().map(parse::<i64>).collect::<Result<Vec<_>>>()?,
                            )
                        }
                        "seed" if v != "none" => seed = Some(parse::<u64>(v)?),
                        "model" if v != "none" => model = Some(serde_json::from_str(v)?),
                        _ => {}
                    }
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse("missing dim".into()))?;
        let radius = radius.ok_or_else(|| Error::Parse("missing radius".into()))?;
        let center = center.ok_or_else(|| Error::Parse("missing center".into()))?;
        if center.len() != dim {
            return Err(Error::Parse("center dimension mismatch".into()));
        }
        let domain = BoxDomain::new(Site::new(center), radius);
        let mut values = vec![f64::NAN; domain.len()];
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::Parse("row width mismatch".into()));
            }
            let coords = (0..dim).map(|i| parse::<i64>(&rec[i])).collect::<Result<Vec<_>>>()?;
            let v: f64 = parse(&rec[dim])?;
            let i = domain
                .index_of(&Site::new(coords))
                .ok_or_else(|| Error::Parse("row outside the declared box".into()))?;
            values[i] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse("grid is incomplete".into()));
        }
        let mut field = PotentialField::from_values(domain, values)?;
        field.seed = seed;
        field.model = model;
        Ok(field)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<PotentialField> {
        let f = std::fs::File::open(path)?;
        PotentialField::read_csv(std::io::BufReader::new(f))
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("cannot parse {s:?}")))
}

/// Samples `ξ = ψ∘η` on a box. Identical for any thread count and consistent
/// on overlaps of boxes sampled with the same seed.
pub fn sample_field(model: &TailModel, domain: &BoxDomain, seed: u64) -> PotentialField {
    let values: Vec<f64> = (0..domain.len())
        .into_par_iter()
        .map(|i| model.psi(site_exponential(seed, &domain.site_at(i))))
        .collect();
    PotentialField { domain: domain.clone(), values, seed: Some(seed), model: Some(model.clone()) }
}

/// Height `max_{subbox} ξ`.
pub fn height(field: &PotentialField, subbox: &BoxDomain) -> Result<f64> {
    if !field.domain().contains_box(subbox) {
        return Err(Error::OutsideDomain);
    }
    Ok(subbox.sites().map(|x| field.value(&x)).fold(f64::NEG_INFINITY, f64::max))
}

/// One grid point of the tail diagnostic.
#[derive(Clone, Debug, Serialize)]
pub struct TailRow {
    pub s: f64,
    pub c: f64,
    /// `ψ(cs) - ψ(s)`.
    pub scale_gap: f64,
    /// `ρ log c`, infinite for `ρ = ∞`.
    pub scale_target: f64,
    /// `ψ(s + log s) - ψ(s)`.
    pub log_shift_gap: f64,
    /// `ψ(s) / log s`.
    pub psi_over_log: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailDiagnostic {
    pub rows: Vec<TailRow>,
    /// The scale gap misses `ρ log c` by more than the tolerance at the
    /// largest `s` of the grid.
    pub scale_violation: bool,
    /// `ψ(s + log s) - ψ(s)` fails to decrease along the grid (checked for
    /// `ρ = ∞` only).
    pub log_shift_violation: bool,
}

/// Reports the upper-tail regularity quantities on an `s × c` grid.
pub fn tail_diagnostic(model: &TailModel, s_grid: &[f64], c_grid: &[f64], tol: f64) -> TailDiagnostic {
    let rho = model.rho();
    let mut rows = Vec::new();
    for &s in s_grid {
        for &c in c_grid {
            let psi_s = model.psi(s);
            rows.push(TailRow {
                s,
                c,
                scale_gap: model.psi(c * s) - psi_s,
                scale_target: rho.value() * c.ln(),
                log_shift_gap: model.psi(s + s.ln()) - psi_s,
                psi_over_log: psi_s / s.ln(),
            });
        }
    }
    let s_max = s_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale_violation = match rho {
        Rho::Finite(_) => rows
            .iter()
            .filter(|r| r.s == s_max)
            .any(|r| (r.scale_gap - r.scale_target).abs() > tol),
        Rho::Infinite => false,
    };
    let log_shift_violation = match rho {
        Rho::Infinite => {
            let mut by_s: Vec<(f64, f64)> = s_grid
                .iter()
                .map(|&s| (s, model.psi(s + s.ln()) - model.psi(s)))
                .collect();
            by_s.sort_by(|a, b| a.0.total_cmp(&b.0));
            by_s.windows(2).any(|w| w[1].1 > w[0].1 + tol)
        }
        Rho::Finite(_) => false,
    };
    TailDiagnostic { rows, scale_violation, log_shift_violation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn double_exp_phi_psi() {
        let m = TailModel::double_exp(2.0);
        assert!((m.phi(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.phi(2.0).unwrap() - E).abs() < 1e-15);
        assert!((m.psi(E) - 2.0).abs() < 1e-15);
        assert!(m.phi(1e6).is_err());
        let m3 = TailModel::double_exp(3.0);
        for s in [0.5, 3.0, 1e3, 1e9] {
            assert!((m3.psi(0.5 * s) - m3.psi(s) + 3.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_vanishes_where_f_is_zero() {
        let w = TailModel::Weibull { alpha: 2.0 };
        assert_eq!(w.phi(-1.0).unwrap(), 0.0);
        let t = TailModel::Tabulated { knots: vec![(0.0, 0.0), (1.0, 0.5)], tail_rho: 1.0 };
        assert_eq!(t.phi(-3.0).unwrap(), 0.0);
    }

    #[test]
    fn tabulated_flat_spot_takes_leftmost_point() {
        // F is flat at 0.5 on [1, 2].
        let t = TailModel::Tabulated {
            knots: vec![(0.0, 0.0), (1.0, 0.5), (2.0, 0.5), (3.0, 0.9)],
            tail_rho: 1.0,
        };
        t.validate().unwrap();
        let s = -(0.5f64).ln();
        assert!((t.psi(s) - 1.0).abs() < 1e-11);
        // Continuous across the last knot and into the tail.
        let s_tail = -(0.1f64).ln();
        assert!((t.psi(s_tail) - 3.0).abs() < 1e-11);
        assert!((t.phi(t.psi(5.0)).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn left_inverse_properties() {
        let models = [
            TailModel::double_exp(1.5),
            TailModel::Weibull { alpha: 1.7 },
            TailModel::Tabulated { knots: vec![(-2.0, 0.0), (0.0, 0.3), (1.0, 0.3), (2.0, 0.8)], tail_rho: 2.0 },
        ];
        for m in &models {
            for i in 1..200 {
                let s = 0.05 * i as f64;
                assert!(m.phi(m.psi(s)).unwrap() >= s * (1.0 - 1e-9), "{m:?} s={s}");
                let r = -2.0 + 0.03 * i as f64;
                let phir = m.phi(r).unwrap();
                if phir > 0.0 {
                    assert!(m.psi(phir) <= r + 1e-9, "{m:?} r={r}");
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_nested() {
        let m = TailModel::double_exp(2.0);
        let small = BoxDomain::centered(2, 3);
        let big = BoxDomain::centered(2, 6);
        let a = sample_field(&m, &small, 11);
        let b = sample_field(&m, &small, 11);
        assert_eq!(a, b);
        let c = sample_field(&m, &big, 11);
        for (x, v) in a.iter() {
            assert_eq!(c.get(&x), Some(v));
        }
        let d = sample_field(&m, &small, 12);
        assert_ne!(a.values(), d.values());
    }

    #[test]
    fn height_examples() {
        let f = PotentialField::from_values(BoxDomain::centered(1, 2), vec![1.0, 5.0, 3.0, -1.0, 2.0])
            .unwrap();
        assert_eq!(height(&f, &BoxDomain::centered(1, 2)).unwrap(), 5.0);
        let mut g = PotentialField::constant(BoxDomain::centered(1, 3), f64::NEG_INFINITY);
        g.set(&Site::from(0), 0.0).unwrap();
        assert_eq!(height(&g, &BoxDomain::centered(1, 3)).unwrap(), 0.0);
        assert!(height(&g, &BoxDomain::centered(1, 4)).is_err());
    }

    #[test]
    fn height_is_monotone_in_the_box() {
        let m = TailModel::double_exp(1.0);
        let f = sample_field(&m, &BoxDomain::centered(1, 200), 5);
        let mut prev = f64::NEG_INFINITY;
        for r in 0..=200 {
            let h = height(&f, &BoxDomain::centered(1, r)).unwrap();
            assert!(h >= prev);
            prev = h;
        }
    }

    #[test]
    fn diagnostic_flags() {
        let d = tail_diagnostic(&TailModel::double_exp(2.0), &[10.0, 100.0, 1e4], &[0.25, 0.5], 1e-9);
        assert!(!d.scale_violation);
        for r in &d.rows {
            assert!((r.scale_gap - r.scale_target).abs() < 1e-12);
            assert!((r.psi_over_log - 2.0).abs() < 1e-12);
        }
        let w = tail_diagnostic(&TailModel::Weibull { alpha: 2.0 }, &[10.0, 100.0, 1e3, 1e4, 1e5], &[0.5], 1e-12);
        assert!(!w.log_shift_violation);
        let gaps: Vec<f64> = w.rows.iter().map(|r| r.log_shift_gap).collect();
        assert!(gaps.windows(2).all(|p| p[1] < p[0]));
        assert!(*gaps.last().unwrap() < 0.02);
    }

    #[test]
    fn csv_round_trip() {
        let mut f = sample_field(&TailModel::double_exp(3.0), &BoxDomain::new(Site::from([1, -1]), 2), 9);
        f.set(&Site::from([1, -1]), f64::NEG_INFINITY).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let g = PotentialField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rho_serde() {
        let r: Rho = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(r, Rho::Infinite);
        let r: Rho = serde_json::from_str("4.0").unwrap();
        assert_eq!(r, Rho::Finite(4.0));
        assert_eq!(serde_json::to_string(&Rho::Infinite).unwrap(), "\"inf\"");
    }
}
