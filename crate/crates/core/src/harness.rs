//! Experiment configuration, per-cell pipeline, sweeps and report files.
//!
//! A cell is one `(seed, t)` pair. Each cell samples the field on an outer
//! box, builds the island decomposition on the macrobox, solves the split,
//! and runs the checks of [`crate::verify`]. Cells run in parallel and are
//! collected in grid order, so every output file is independent of the
//! thread count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::islands::{build_gamma_star, build_islands, min_pairwise_distance, IslandDecomposition, IslandParams};
use crate::lattice::{BoxDomain, Site, SiteSet};
use crate::pamsolve::{log_solution, mass_row, solve_on, split_contributions, BoxRule};
use crate::randfield::{height, sample_field, PotentialField, Rho, TailModel};
use crate::shape::{build_optimal_shape, island_radius, OptimalShape};
use crate::spectral::{LogField, Method};
use crate::verify::{
    anchored_eigenfunctions, decay_profile, digest_bytes, digest_json, local_eigenfunction, localization_compare,
    mass_concentration, median, potential_shape_check, solution_shape_check, superposition_bound_from,
    u2_negligibility, CheckKind, Direction, TrendSeries, VerificationReport,
};

/// Solver tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub krylov: f64,
    pub shape: f64,
    /// Relative slack of the exact inequalities.
    pub slack: f64,
    /// Bound on `max |u₁ + u₂ + u₃ - u| / max u`.
    pub identity: f64,
    /// Bound on the most negative split component relative to `max u`.
    pub nonnegativity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { krylov: 1e-10, shape: 1e-8, slack: 1e-8, identity: 1e-10, nonnegativity: 1e-12 }
    }
}

/// A designed field: `h + V_ρ(· - y)` on `B_{radius}(y)` over the flat
/// background `h - χ - 2a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub position: Vec<i64>,
    pub height: f64,
    #[serde(default = "default_plant_radius")]
    pub radius: u64,
}

fn default_plant_radius() -> u64 {
    5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rho,
    A,
    Delta,
    T,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "a" => Ok(SweepAxis::A),
            "delta" => Ok(SweepAxis::Delta),
            "t" => Ok(SweepAxis::T),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Full experiment description. Missing fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub model: TailModel,
    pub t_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Island parameters; defaults depend on `ρ`.
    pub islands: Option<IslandParams>,
    pub epsilons: Vec<f64>,
    pub shape_radius: u64,
    pub tolerances: Tolerances,
    pub box_rule: BoxRule,
    /// Outer box radius as a multiple of the macrobox radius.
    pub outer_factor: u64,
    pub method: Method,
    /// Monte Carlo paths for the eigenfunction representation check; `0`
    /// disables it.
    pub mc_paths: usize,
    /// Not part of the digest, so identical runs in different places match.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub planted: Option<PlantedConfig>,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 1,
            model: TailModel::DoubleExp { rho: 4.0 },
            t_grid: vec![20.0, 40.0, 60.0, 80.0, 100.0],
            seeds: (1..=20).collect(),
            islands: None,
            epsilons: vec![0.1],
            shape_radius: 20,
            tolerances: Tolerances::default(),
            box_rule: BoxRule::LogSquared,
            outer_factor: 2,
            method: Method::Uniformization,
            mc_paths: 0,
            output_dir: None,
            planted: None,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn rho(&self) -> Rho {
        self.model.rho()
    }

    /// Island parameters with `ρ`-dependent defaults filled in.
    pub fn island_params(&self) -> IslandParams {
        self.islands.clone().unwrap_or_else(|| IslandParams::defaults(self.rho().value()))
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.islands = Some(self.island_params());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let p = self.island_params();
        p.validate(self.rho().value())?;
        for &e in &self.epsilons {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!("epsilon {e} must lie in (0, 1)")));
            }
        }
        for &t in &self.t_grid {
            if !(t > 1.0 && t.is_finite()) {
                return Err(Error::Config(format!("time {t} must exceed 1")));
            }
            if self.box_rule.radius(t) <= p.big_r {
                return Err(Error::Config(format!("island radius {} must be below the box radius at t = {t}", p.big_r)));
            }
        }
        if self.outer_factor < 1 {
            return Err(Error::Config("outer_factor must be at least 1".into()));
        }
        if self.shape_radius <= p.small_r {
            return Err(Error::Config("shape radius must exceed the shape-check radius".into()));
        }
        if let Some(pl) = &self.planted {
            if pl.position.len() != self.dim {
                return Err(Error::Config("planted position has the wrong dimension".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_json(&self.resolved())
    }
}

type ShapeKey = String;

fn shape_cache() -> &'static Mutex<HashMap<ShapeKey, Arc<OptimalShape>>> {
    static CACHE: OnceLock<Mutex<HashMap<ShapeKey, Arc<OptimalShape>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Optimal shape cached by `(ρ, d, R, tol)`.
pub fn cached_shape(rho: Rho, dim: usize, radius: u64, tol: f64) -> Result<Arc<OptimalShape>> {
    let key = digest_json(&(rho, dim, radius, tol.to_bits()));
    if let Some(s) = shape_cache().lock().expect("shape cache").get(&key) {
        return Ok(s.clone());
    }
    let shape = Arc::new(build_optimal_shape(rho, dim, radius, tol)?);
    shape_cache().lock().expect("shape cache").insert(key, shape.clone());
    Ok(shape)
}

/// The field of a cell on the given box.
pub fn cell_field(cfg: &ExperimentConfig, shape: &OptimalShape, domain: &BoxDomain, seed: u64) -> PotentialField {
    match &cfg.planted {
        None => sample_field(&cfg.model, domain, seed),
        Some(pl) => planted_field(shape, domain, pl, cfg.island_params().a),
    }
}

/// `h + V_ρ(x - y)` on `B_radius(y)` and the background `h - χ - 2a`
/// elsewhere.
pub fn planted_field(shape: &OptimalShape, domain: &BoxDomain, pl: &PlantedConfig, a: f64) -> PotentialField {
    let y = Site::new(pl.position.clone());
    let background = pl.height - shape.chi - 2.0 * a;
    PotentialField::from_fn(domain.clone(), |x| {
        let off = x.minus(&y);
        if off.sup_norm() <= pl.radius {
            pl.height + shape.potential(&off)
        } else {
            background
        }
    })
}

/// Geometry of a cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellGeometry {
    pub t: f64,
    pub scale: f64,
    pub macrobox: BoxDomain,
    pub outer: BoxDomain,
    pub inner_box: BoxDomain,
}

pub fn cell_geometry(cfg: &ExperimentConfig, t: f64) -> CellGeometry {
    let scale = cfg.box_rule.scale(t);
    let r = cfg.box_rule.radius(t).max(t.ceil() as u64);
    CellGeometry {
        t,
        scale,
        macrobox: BoxDomain::centered(cfg.dim, r),
        outer: BoxDomain::centered(cfg.dim, r * cfg.outer_factor),
        inner_box: BoxDomain::centered(cfg.dim, t.floor() as u64),
    }
}

/// Islands of one cell together with its field and geometry.
pub fn cell_islands(cfg: &ExperimentConfig, seed: u64, t: f64) -> Result<(PotentialField, CellGeometry, IslandDecomposition)> {
    let shape = cached_shape(cfg.rho(), cfg.dim, cfg.shape_radius, cfg.tolerances.shape)?;
    let geo = cell_geometry(cfg, t);
    let xi = cell_field(cfg, &shape, &geo.outer, seed);
    let dec = build_islands(&xi, &geo.macrobox, t, geo.scale, shape.chi, cfg.rho().value(), &cfg.island_params())?;
    Ok((xi, geo, dec))
}

/// Islands of a given field at time `t`. The field must cover the macrobox
/// of `t`; its own box serves as the outer box.
pub fn field_islands(cfg: &ExperimentConfig, xi: &PotentialField, t: f64) -> Result<(CellGeometry, IslandDecomposition)> {
    let shape = cached_shape(cfg.rho(), cfg.dim, cfg.shape_radius, cfg.tolerances.shape)?;
    let mut geo = cell_geometry(cfg, t);
    if xi.dim() != cfg.dim || !xi.domain().contains_box(&geo.macrobox) {
        return Err(Error::Config(format!("field does not cover the macrobox of radius {} at t = {t}", geo.macrobox.radius)));
    }
    geo.outer = xi.domain().clone();
    let dec = build_islands(xi, &geo.macrobox, t, geo.scale, shape.chi, cfg.rho().value(), &cfg.island_params())?;
    Ok((geo, dec))
}

/// One row of `runs.csv`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RunRow {
    pub seed: u64,
    pub t: f64,
    pub scale: f64,
    pub box_radius: u64,
    pub outer_radius: u64,
    pub h_t: f64,
    pub h_box: f64,
    pub psi_dlogt: f64,
    pub log_mass: f64,
    pub residual: f64,
    pub residual_box: f64,
    pub n_exceedances: usize,
    pub n_archipelagos: usize,
    pub n_optimal: usize,
    pub n_gamma: usize,
    pub n_gamma_star: usize,
    pub gap: f64,
    pub gap_floor: f64,
    pub gap_lemma_floor: f64,
    pub separation: Option<f64>,
    pub min_gamma_distance: Option<u64>,
    pub min_gamma_star_distance: Option<u64>,
    pub max_archipelago: usize,
    pub k_bound: usize,
    pub island_radius: u64,
    pub mass_fraction: f64,
    pub potential_dr: Option<f64>,
    pub solution_dr: Option<f64>,
    pub u2_ratio: f64,
    pub u2_log_slack: f64,
    pub lambda_avoid_shifted: f64,
    pub superposition_violations: usize,
    pub superposition_excess: f64,
    pub superposition_ratio: f64,
    pub superposition_ratio_bound: f64,
    pub identity_error: f64,
    pub min_component: f64,
    pub outer_boundary_ratio: f64,
    pub decay_slope: Option<f64>,
    pub decay_r2: Option<f64>,
    pub localization_gap: Option<f64>,
    pub pre_asymptotic: bool,
    pub status: String,
    pub error: String,
}

pub const RUNS_HEADER: &str = "seed,t,scale,box_radius,outer_radius,h_t,h_box,psi_dlogt,log_mass,residual,residual_box,n_exceedances,n_archipelagos,n_optimal,n_gamma,n_gamma_star,gap,gap_floor,gap_lemma_floor,separation,min_gamma_distance,min_gamma_star_distance,max_archipelago,k_bound,island_radius,mass_fraction,potential_dr,solution_dr,u2_ratio,u2_log_slack,lambda_avoid_shifted,superposition_violations,superposition_excess,superposition_ratio,superposition_ratio_bound,identity_error,min_component,outer_boundary_ratio,decay_slope,decay_r2,localization_gap,pre_asymptotic,status,error";
pub const CHECKS_HEADER: &str = "cell,name,operation,kind,measured,threshold,passed,params,inputs_digest,note";
pub const TRENDS_HEADER: &str = "name,t,median,slope,direction,passed";
pub const CONCENTRATION_HEADER: &str = "seed,t,epsilon,r,mass_fraction";
pub const PROFILE_HEADER: &str = "k,v,w,f";
pub const SHAPE_PROFILE_HEADER: &str = "rho,k,v,w,f";
pub const CHI_TABLE_HEADER: &str = "rho,chi,epsilon,r";
pub const SWEEP_HEADER: &str = "axis,value,t,chi,cells,median_mass_fraction,median_potential_dr,median_solution_dr,median_residual,median_gap,median_decay_slope,median_n_gamma";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConcentrationRow {
    pub seed: u64,
    pub t: f64,
    pub epsilon: f64,
    pub r: u64,
    pub mass_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct CheckRow {
    cell: String,
    name: String,
    operation: String,
    kind: CheckKind,
    measured: f64,
    threshold: f64,
    passed: bool,
    params: String,
    inputs_digest: String,
    note: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TrendRow {
    name: String,
    t: f64,
    median: f64,
    slope: Option<f64>,
    direction: Direction,
    passed: bool,
}

/// Everything produced by one cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: RunRow,
    pub concentration: Vec<ConcentrationRow>,
    pub report: VerificationReport,
    pub islands: Option<IslandDecomposition>,
}

fn cell_id(seed: u64, t: f64) -> String {
    format!("s{seed}-t{t}")
}

/// Runs the full pipeline of one cell. Stage failures are captured in the
/// row and as a failed hard check.
pub fn run_cell(cfg: &ExperimentConfig, seed: u64, t: f64) -> CellOutcome {
    let id = cell_id(seed, t);
    match run_cell_inner(cfg, seed, t) {
        Ok(out) => out,
        Err(e) => {
            let mut report = VerificationReport::new(id);
            report.push("cell_completed", "run_cell", format!("seed={seed} t={t}"), String::new(), 0.0, 1.0, false, CheckKind::Hard, e.to_string());
            CellOutcome {
                row: RunRow { seed, t, status: "error".into(), error: e.to_string(), ..Default::default() },
                concentration: Vec::new(),
                report,
                islands: None,
            }
        }
    }
}

fn run_cell_inner(cfg: &ExperimentConfig, seed: u64, t: f64) -> Result<CellOutcome> {
    let id = cell_id(seed, t);
    let params = cfg.island_params();
    let tol = &cfg.tolerances;
    let shape = cached_shape(cfg.rho(), cfg.dim, cfg.shape_radius, tol.shape)?;
    let (xi, geo, mut dec) = cell_islands(cfg, seed, t)?;
    let digest = digest_bytes(&xi.values().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>());
    let split = split_contributions(&xi, &geo.macrobox, &dec.gamma, t, &geo.outer, cfg.method, tol.krylov)?;
    let log_u = split.log_full.clone().unwrap_or_else(|| LogField::from(&split.full));
    let gamma_star = build_gamma_star(&dec.gamma, |y| log_u.log_value(y), params.eta, t, cfg.dim);
    dec.gamma_star = Some(gamma_star.clone());
    let h_t = height(&xi, &geo.inner_box)?;
    let mrow = mass_row(&xi, &cfg.model, seed, t, &geo.macrobox, log_u.log_sum(), shape.chi)?;

    let mut rep = VerificationReport::new(id);
    let pstr = format!("seed={seed} t={t}");
    let push = |rep: &mut VerificationReport, name: &str, op: &str, m: f64, thr: f64, ok: bool, kind, note: String| {
        rep.push(name, op, pstr.clone(), digest.clone(), m, thr, ok, kind, note)
    };

    // Island construction invariants.
    push(&mut rep, "chain_inclusion", "build_gamma_star", 0.0, 0.0, dec.chain_inclusion_holds(), CheckKind::Hard, String::new());
    let maximal = dec
        .archipelagos
        .iter()
        .zip(&dec.capitals)
        .all(|(a, c)| a.iter().all(|x| xi.value(c) >= xi.value(x)));
    push(&mut rep, "capital_maximality", "decompose_archipelagos", 0.0, 0.0, maximal, CheckKind::Hard, String::new());
    let disjoint = !dec.flags.iter().any(|f| f.contains("neighborhoods intersect"));
    push(&mut rep, "archipelago_disjointness", "decompose_archipelagos", 0.0, 0.0, disjoint, CheckKind::Hard, String::new());
    let lemma_floor = dec.gap_lower_bound();
    push(&mut rep, "gap_lemma_floor", "compute_spectral_gap", dec.gap, lemma_floor, dec.gap >= lemma_floor * (1.0 - 1e-12), CheckKind::Hard, String::new());
    if let Some(sep) = dec.separation {
        push(&mut rep, "gap_separation", "build_gamma", sep, dec.gap, sep >= dec.gap * (1.0 - 1e-12), CheckKind::Hard, String::new());
    }
    push(&mut rep, "gap_asymptotic_floor", "compute_spectral_gap", dec.gap, dec.gap_floor, dec.gap >= dec.gap_floor, CheckKind::Trend, String::new());
    push(&mut rep, "archipelago_size", "decompose_archipelagos", dec.max_archipelago as f64, dec.k_bound as f64, dec.max_archipelago <= dec.k_bound, CheckKind::Trend, String::new());
    push(&mut rep, "gamma_nonempty", "build_gamma", dec.gamma.len() as f64, 1.0, !dec.gamma.is_empty(), CheckKind::Trend, dec.flags.join("; "));
    let sqrt_t = t.sqrt();
    push(&mut rep, "gamma_count", "build_gamma", dec.gamma.len() as f64, sqrt_t, dec.gamma.len() as f64 <= sqrt_t, CheckKind::Trend, String::new());
    if let Some(d) = dec.min_gamma_distance {
        push(&mut rep, "gamma_separation", "build_gamma", d as f64, sqrt_t, d as f64 >= sqrt_t, CheckKind::Trend, format!("separation scale {:.3e}", dec.separation_scale * t.powf(-0.1)));
    }

    // Split.
    push(&mut rep, "split_identity", "split_contributions", split.identity_error, tol.identity, split.identity_error <= tol.identity, CheckKind::Hard, String::new());
    push(&mut rep, "split_nonnegative", "split_contributions", split.min_component, -tol.nonnegativity, split.min_component >= -tol.nonnegativity, CheckKind::Hard, String::new());
    push(&mut rep, "outer_boundary", "split_contributions", split.outer_boundary_ratio, 1e-8, split.outer_boundary_ratio <= 1e-8, CheckKind::Trend, String::new());
    let u2 = u2_negligibility(&xi, &split, mrow.h_box, shape.chi)?;
    push(&mut rep, "u2_schwarz_bound", "u2_negligibility", u2.slack, 0.0, u2.bound_ok, CheckKind::Hard, String::new());
    push(&mut rep, "u2_eigenvalue_criterion", "u2_negligibility", u2.lambda_avoid_shifted, -shape.chi, u2.below_minus_chi, CheckKind::Trend, String::new());

    // Superposition with w = u₃.
    let b_set = geo.macrobox.to_site_set();
    let pairs = anchored_eigenfunctions(&xi, &b_set, &dec.gamma)?;
    let top = split.full.values.iter().copied().fold(0.0, f64::max);
    let r0 = island_radius(&shape, cfg.epsilons.first().copied().unwrap_or(0.1))?;
    let sup = superposition_bound_from(&split.u3, top, &b_set, &dec.gamma, &pairs, t, r0, tol.slack);
    push(&mut rep, "superposition_pointwise", "superposition_bound_check", sup.max_excess, tol.slack, sup.violations == 0, CheckKind::Hard, format!("{} violations", sup.violations));
    push(&mut rep, "superposition_ratio", "superposition_bound_check", sup.ratio, sup.ratio_bound, sup.ratio_ok, CheckKind::Hard, String::new());

    // Decay and localization of the eigenfunctions.
    let q = params.q(cfg.dim);
    let mut slopes = Vec::new();
    let mut r2s = Vec::new();
    let mut loc = Vec::new();
    for (y, p) in &pairs {
        let fit = decay_profile(p, y, q)?;
        push(&mut rep, "eigenfunction_decay", "decay_profile", fit.slope, 0.0, fit.decays(), CheckKind::Hard, format!("y={y} R2={:.4} c={:.4}", fit.r_squared, fit.implied_c));
        slopes.push(fit.slope);
        r2s.push(fit.r_squared);
        let local = local_eigenfunction(&xi, &geo.macrobox, y, params.small_r)?;
        loc.push(localization_compare(p, &local, y, params.small_r).sup_gap);
    }
    if cfg.mc_paths > 0 {
        if let Some((y, p)) = pairs.first() {
            let probes = representation_probes(p, y);
            let rr = crate::verify::eigenfunction_rep_check(&xi, &geo.macrobox, &dec.gamma, y, &probes, cfg.mc_paths, seed)?;
            let worst = rr.probes.iter().filter(|p| !p.skipped).map(|p| (p.mc - p.eigen).abs() / p.stderr.max(1e-300)).fold(0.0, f64::max);
            push(&mut rep, "eigenfunction_representation", "eigenfunction_rep_check", worst, 3.0, rr.passed(), CheckKind::Hard, format!("{} probes skipped", rr.probes.iter().filter(|p| p.skipped).count()));
        }
    }

    // Theorem-level quantities.
    let mut concentration = Vec::new();
    for &eps in &cfg.epsilons {
        let r = island_radius(&shape, eps)?;
        let frac = mass_concentration(&log_u, &gamma_star, r);
        concentration.push(ConcentrationRow { seed, t, epsilon: eps, r, mass_fraction: frac });
        push(&mut rep, "mass_concentration", "mass_concentration", frac, 1.0 - eps, frac >= 1.0 - eps, CheckKind::Trend, format!("epsilon={eps} r={r}"));
    }
    let (potential_dr, solution_dr) = if gamma_star.is_empty() {
        (None, None)
    } else {
        let pd = potential_shape_check(&xi, &gamma_star, h_t, &shape, params.small_r);
        let sd = solution_shape_check(&log_u, &gamma_star, &shape, params.small_r)?;
        (Some(pd), Some(sd))
    };

    let row = RunRow {
        seed,
        t,
        scale: geo.scale,
        box_radius: geo.macrobox.radius,
        outer_radius: geo.outer.radius,
        h_t,
        h_box: mrow.h_box,
        psi_dlogt: mrow.psi_dlogt,
        log_mass: mrow.log_mass,
        residual: mrow.residual,
        residual_box: mrow.residual_box,
        n_exceedances: dec.z.len(),
        n_archipelagos: dec.archipelagos.len(),
        n_optimal: dec.optimal_capitals.len(),
        n_gamma: dec.gamma.len(),
        n_gamma_star: gamma_star.len(),
        gap: dec.gap,
        gap_floor: dec.gap_floor,
        gap_lemma_floor: lemma_floor,
        separation: dec.separation,
        min_gamma_distance: dec.min_gamma_distance,
        min_gamma_star_distance: min_pairwise_distance(&gamma_star),
        max_archipelago: dec.max_archipelago,
        k_bound: dec.k_bound,
        island_radius: r0,
        mass_fraction: concentration.first().map_or(0.0, |c| c.mass_fraction),
        potential_dr,
        solution_dr,
        u2_ratio: u2.ratio,
        u2_log_slack: u2.slack,
        lambda_avoid_shifted: u2.lambda_avoid_shifted,
        superposition_violations: sup.violations,
        superposition_excess: sup.max_excess,
        superposition_ratio: sup.ratio,
        superposition_ratio_bound: sup.ratio_bound,
        identity_error: split.identity_error,
        min_component: split.min_component,
        outer_boundary_ratio: split.outer_boundary_ratio,
        decay_slope: (!slopes.is_empty()).then(|| median(&slopes)),
        decay_r2: (!r2s.is_empty()).then(|| median(&r2s)),
        localization_gap: loc.iter().copied().reduce(f64::max),
        pre_asymptotic: dec.is_pre_asymptotic(),
        status: "ok".into(),
        error: String::new(),
    };
    Ok(CellOutcome { row, concentration, report: rep, islands: Some(dec) })
}

/// The anchor, its neighbors and the farthest support site.
fn representation_probes(p: &crate::spectral::SpectralPair, y: &Site) -> Vec<Site> {
    let mut probes = vec![y.clone()];
    probes.extend(y.neighbors().take(2));
    let mut far: Vec<&Site> = p.sites.iter().filter(|x| x.ell1_distance(y) <= 4).collect();
    far.sort_by_key(|x| std::cmp::Reverse(x.ell1_distance(y)));
    probes.extend(far.into_iter().take(2).cloned());
    probes
}

/// Results of a whole experiment.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub chi: f64,
    pub rows: Vec<RunRow>,
    pub concentration: Vec<ConcentrationRow>,
    pub report: VerificationReport,
}

/// Runs every `(seed, t)` cell and aggregates the trends. Writes the
/// artifacts when an output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let shape = cached_shape(cfg.rho(), cfg.dim, cfg.shape_radius, cfg.tolerances.shape)?;
    let seeds: Vec<u64> = if cfg.planted.is_some() { cfg.seeds.iter().copied().take(1).collect() } else { cfg.seeds.clone() };
    let cells: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| cfg.t_grid.iter().map(move |&t| (s, t))).collect();
    let outcomes: Vec<CellOutcome> = cells.par_iter().map(|&(s, t)| run_cell(cfg, s, t)).collect();
    let mut report = VerificationReport::new(cfg.digest());
    let mut rows = Vec::new();
    let mut concentration = Vec::new();
    for o in outcomes {
        report.checks.extend(o.report.checks.into_iter().map(|mut c| {
            c.params = format!("{} {}", o.report.run_id, c.params);
            c
        }));
        rows.push(o.row);
        concentration.extend(o.concentration);
    }
    report.trends = trend_series(cfg, &rows);
    let result = ExperimentResult { config: cfg.resolved(), chi: shape.chi, rows, concentration, report };
    if let Some(dir) = &cfg.output_dir {
        emit_report(&result, &shape, dir)?;
    }
    Ok(result)
}

/// Medians over seeds for each time of the grid, in grid order.
pub fn medians_by_t(rows: &[RunRow], f: impl Fn(&RunRow) -> Option<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let meds = ts
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.t == t && r.status == "ok").filter_map(&f).collect();
            median(&v)
        })
        .collect();
    (ts, meds)
}

fn trend_series(cfg: &ExperimentConfig, rows: &[RunRow]) -> Vec<TrendSeries> {
    if cfg.t_grid.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut add = |name: &str, dir: Direction, f: &dyn Fn(&RunRow) -> Option<f64>| {
        let (t, m) = medians_by_t(rows, f);
        out.push(TrendSeries::new(name, t, m, dir));
    };
    add("mass_fraction", Direction::NonDecreasing, &|r| Some(r.mass_fraction));
    add("potential_dr", Direction::Decreasing, &|r| r.potential_dr);
    add("solution_dr", Direction::Decreasing, &|r| r.solution_dr);
    add("abs_h_minus_psi", Direction::Decreasing, &|r| Some((r.h_t - r.psi_dlogt).abs()));
    add("abs_residual", Direction::Decreasing, &|r| Some(r.residual.abs()));
    add("u2_ratio", Direction::Decreasing, &|r| Some(r.u2_ratio));
    out
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_plain(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Summary written to `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub chi: f64,
    pub cells: usize,
    pub failed_cells: usize,
    pub hard_failures: usize,
    pub trend_flags: usize,
    /// File name to SHA-256 of its contents.
    pub digests: Vec<(String, String)>,
    pub verification: VerificationReport,
}

/// Writes `runs.csv`, `checks.csv`, `trends.csv`, `concentration.csv`,
/// `plots/*.csv` and `report.json` into `dir`.
pub fn emit_report(result: &ExperimentResult, shape: &OptimalShape, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("plots"))?;
    write_csv(&dir.join("runs.csv"), RUNS_HEADER, &result.rows)?;
    write_csv(&dir.join("concentration.csv"), CONCENTRATION_HEADER, &result.concentration)?;
    let checks: Vec<CheckRow> = result
        .report
        .checks
        .iter()
        .map(|c| {
            let (cell, params) = c.params.split_once(' ').unwrap_or((c.params.as_str(), ""));
            CheckRow {
                cell: cell.to_string(),
                name: c.name.clone(),
                operation: c.operation.clone(),
                kind: c.kind,
                measured: c.measured,
                threshold: c.threshold,
                passed: c.passed,
                params: params.to_string(),
                inputs_digest: c.inputs_digest.clone(),
                note: c.note.clone(),
            }
        })
        .collect();
    write_csv(&dir.join("checks.csv"), CHECKS_HEADER, &checks)?;
    let trends: Vec<TrendRow> = result
        .report
        .trends
        .iter()
        .flat_map(|s| {
            s.t.iter().zip(&s.median).map(|(&t, &m)| TrendRow {
                name: s.name.clone(),
                t,
                median: m,
                slope: s.slope,
                direction: s.direction,
                passed: s.passed,
            })
        })
        .collect();
    write_csv(&dir.join("trends.csv"), TRENDS_HEADER, &trends)?;

    let plots = dir.join("plots");
    let profile = profile_rows(shape);
    write_plain(&plots.join("profile.csv"), PROFILE_HEADER, &profile)?;
    let rows = &result.rows;
    let series = |f: &dyn Fn(&RunRow) -> Option<f64>| medians_by_t(rows, f);
    let (ts, mass) = series(&|r| Some(r.mass_fraction));
    write_plain(&plots.join("mass_concentration.csv"), "t,median_mass_fraction", &zip2(&ts, &mass))?;
    let (_, pd) = series(&|r| r.potential_dr);
    let (_, sd) = series(&|r| r.solution_dr);
    write_plain(
        &plots.join("dr_trends.csv"),
        "t,median_potential_dr,median_solution_dr",
        &ts.iter().zip(pd.iter().zip(&sd)).map(|(&t, (&a, &b))| vec![t, a, b]).collect::<Vec<_>>(),
    )?;
    let (_, res) = series(&|r| Some(r.residual));
    let (_, hp) = series(&|r| Some((r.h_t - r.psi_dlogt).abs()));
    write_plain(
        &plots.join("residual.csv"),
        "t,median_residual,median_abs_h_minus_psi",
        &ts.iter().zip(res.iter().zip(&hp)).map(|(&t, (&a, &b))| vec![t, a, b]).collect::<Vec<_>>(),
    )?;
    let (_, gap) = series(&|r| Some(r.gap));
    let (_, floor) = series(&|r| Some(r.gap_floor));
    write_plain(
        &plots.join("gap.csv"),
        "t,median_gap,gap_floor",
        &ts.iter().zip(gap.iter().zip(&floor)).map(|(&t, (&a, &b))| vec![t, a, b]).collect::<Vec<_>>(),
    )?;

    let mut digests = Vec::new();
    for name in [
        "runs.csv",
        "checks.csv",
        "trends.csv",
        "concentration.csv",
        "plots/profile.csv",
        "plots/mass_concentration.csv",
        "plots/dr_trends.csv",
        "plots/residual.csv",
        "plots/gap.csv",
    ] {
        digests.push((name.to_string(), digest_bytes(&fs::read(dir.join(name))?)));
    }
    let file = ReportFile {
        config: result.config.clone(),
        config_digest: result.config.digest(),
        seeds: result.config.seeds.clone(),
        chi: result.chi,
        cells: result.rows.len(),
        failed_cells: result.rows.iter().filter(|r| r.status != "ok").count(),
        hard_failures: result.report.hard_failures(),
        trend_flags: result.report.trend_failures(),
        digests,
        verification: result.report.clone(),
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&file)?)?;
    fs::write(dir.join("report.txt"), result.report.to_text())?;
    Ok(())
}

/// Rows `[k, v_ρ(k)/‖v_ρ‖, w_ρ(k), f_ρ(k)]` for `k = -R..=R`.
pub fn profile_rows(shape: &OptimalShape) -> Vec<Vec<f64>> {
    let r = shape.radius as i64;
    let norm = shape.profile_v.iter().map(|v| v * v).sum::<f64>().sqrt();
    (-r..=r)
        .map(|k| {
            let v = shape.profile_v.get((k + r) as usize).map_or(if k == 0 { 1.0 } else { 0.0 }, |v| v / norm);
            vec![k as f64, v, shape.u(k), shape.f(k)]
        })
        .collect()
}

/// Writes `profile.csv` and `chi_table.csv` for several shapes and returns
/// the table rows `[ρ, χ, ε, r(ρ, ε)]`.
pub fn write_shape_tables(shapes: &[&OptimalShape], epsilons: &[f64], dir: &Path) -> Result<Vec<Vec<f64>>> {
    fs::create_dir_all(dir)?;
    let mut profile = Vec::new();
    let mut table = Vec::new();
    for shape in shapes {
        let rho = shape.rho.value();
        profile.extend(profile_rows(shape).into_iter().map(|r| std::iter::once(rho).chain(r).collect::<Vec<f64>>()));
        for &eps in epsilons {
            table.push(vec![rho, shape.chi, eps, island_radius(shape, eps)? as f64]);
        }
    }
    write_plain(&dir.join("profile.csv"), SHAPE_PROFILE_HEADER, &profile)?;
    write_plain(&dir.join("chi_table.csv"), CHI_TABLE_HEADER, &table)?;
    Ok(table)
}

fn zip2(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(&x, &y)| vec![x, y]).collect()
}

/// Loads `report.json` and confirms the recorded file digests.
pub fn load_report(dir: &Path) -> Result<(ReportFile, Vec<String>)> {
    let file: ReportFile = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
    let mut mismatched = Vec::new();
    for (name, d) in &file.digests {
        let actual = fs::read(dir.join(name)).map(|b| digest_bytes(&b)).unwrap_or_default();
        if &actual != d {
            mismatched.push(name.clone());
        }
    }
    Ok((file, mismatched))
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub t: f64,
    pub chi: f64,
    pub cells: usize,
    pub median_mass_fraction: f64,
    pub median_potential_dr: f64,
    pub median_solution_dr: f64,
    pub median_residual: f64,
    pub median_gap: f64,
    pub median_decay_slope: f64,
    pub median_n_gamma: f64,
}

/// Copy of the configuration with one axis set to `value`.
pub fn config_for(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.sweep = None;
    match axis {
        SweepAxis::Rho => {
            c.model = match &cfg.model {
                TailModel::DoubleExp { .. } => TailModel::DoubleExp { rho: value },
                TailModel::Tabulated { knots, .. } => TailModel::Tabulated { knots: knots.clone(), tail_rho: value },
                TailModel::Weibull { .. } => return Err(Error::Config("rho axis needs a finite-rho model".into())),
            };
            if cfg.islands.is_none() {
                c.islands = None;
            }
        }
        SweepAxis::A => {
            let mut p = cfg.island_params();
            p.a = value;
            if cfg.islands.is_none() {
                p.delta = crate::islands::default_delta(value, c.rho().value());
            }
            c.islands = Some(p);
        }
        SweepAxis::Delta => {
            let mut p = cfg.island_params();
            p.delta = value;
            c.islands = Some(p);
        }
        SweepAxis::T => c.t_grid = vec![value],
    }
    c.validate()?;
    Ok(c)
}

/// Aggregated sweep table with the per-value experiments.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub experiments: Vec<ExperimentResult>,
}

impl SweepResult {
    pub fn hard_failures(&self) -> usize {
        self.experiments.iter().map(|e| e.report.hard_failures()).sum()
    }

    pub fn trend_failures(&self) -> usize {
        self.experiments.iter().map(|e| e.report.trend_failures()).sum()
    }

    /// Theil–Sen slope of a column against the axis value at a fixed time.
    pub fn slope_over_axis(&self, t: f64, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.rows.iter().filter(|r| r.t == t).map(|r| (r.value, f(r))).collect();
        crate::verify::theil_sen(&pts)
    }
}

/// Runs one experiment per axis value; per-value artifacts go to
/// `<out>/<axis>_<value>/` and the aggregate to `<out>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepResult> {
    let mut experiments = Vec::new();
    let mut rows = Vec::new();
    for &v in values {
        let mut c = config_for(cfg, axis, v)?;
        c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("{}_{v}", axis_name(axis))));
        let res = run_experiment(&c)?;
        let mut ts = c.t_grid.clone();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        for &t in &ts {
            let cell: Vec<&RunRow> = res.rows.iter().filter(|r| r.t == t && r.status == "ok").collect();
            let med = |f: &dyn Fn(&RunRow) -> Option<f64>| median(&cell.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            rows.push(SweepRow {
                axis,
                value: v,
                t,
                chi: res.chi,
                cells: cell.len(),
                median_mass_fraction: med(&|r| Some(r.mass_fraction)),
                median_potential_dr: med(&|r| r.potential_dr),
                median_solution_dr: med(&|r| r.solution_dr),
                median_residual: med(&|r| Some(r.residual)),
                median_gap: med(&|r| Some(r.gap)),
                median_decay_slope: med(&|r| r.decay_slope),
                median_n_gamma: med(&|r| Some(r.n_gamma as f64)),
            });
        }
        experiments.push(res);
    }
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("sweep.csv"), SWEEP_HEADER, &rows)?;
    }
    Ok(SweepResult { rows, experiments })
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Rho => "rho",
        SweepAxis::A => "a",
        SweepAxis::Delta => "delta",
        SweepAxis::T => "t",
    }
}

/// Island decomposition tables for the `islands` subcommand: membership,
/// capitals with eigenvalues, `Γ`, `Γ*` and the `Γ` distance matrix.
pub fn write_islands(dec: &IslandDecomposition, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("archipelagos.csv"))?;
    w.write_record(["archipelago", "site", "is_capital"])?;
    for (i, (a, c)) in dec.archipelagos.iter().zip(&dec.capitals).enumerate() {
        for x in a {
            w.write_record([i.to_string(), x.to_string(), (x == c).to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("capitals.csv"))?;
    w.write_record(["capital", "cluster_eigenvalue", "optimal", "huge_eigenvalue", "in_gamma", "in_gamma_star"])?;
    let star = dec.gamma_star.clone().unwrap_or_default();
    for (c, e) in dec.capitals.iter().zip(&dec.capital_eigenvalues) {
        w.write_record([
            c.to_string(),
            e.map_or("NaN".into(), |v| v.to_string()),
            dec.optimal_capitals.contains(c).to_string(),
            dec.huge_eigenvalues.get(c).map_or(String::new(), |v| v.to_string()),
            dec.gamma.contains(c).to_string(),
            star.contains(c).to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("gamma_distances.csv"))?;
    let g: Vec<&Site> = dec.gamma.iter().collect();
    let mut head = vec![String::from("site")];
    head.extend(g.iter().map(|x| x.to_string()));
    w.write_record(&head)?;
    for (x, row) in g.iter().zip(crate::islands::distance_matrix(&dec.gamma)) {
        let mut rec = vec![x.to_string()];
        rec.extend(row.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(dir.join("islands.json"), serde_json::to_string_pretty(dec)?)?;
    Ok(())
}

/// Text summary of a decomposition.
pub fn islands_text(dec: &IslandDecomposition) -> String {
    let fmt_set = |s: &SiteSet| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut s = format!(
        "t={} scale={:.3} h={:.6} chi={:.6}\nexceedances={} archipelagos={} optimal={}\ngap=({:.6}, {:.6}) length={:.3e}\ngamma: {}\n",
        dec.t,
        dec.scale,
        dec.h,
        dec.chi,
        dec.z.len(),
        dec.archipelagos.len(),
        dec.optimal_capitals.len(),
        dec.gap_interval.0,
        dec.gap_interval.1,
        dec.gap,
        fmt_set(&dec.gamma),
    );
    if let Some(g) = &dec.gamma_star {
        s.push_str(&format!("gamma*: {}\n", fmt_set(g)));
    }
    for f in &dec.flags {
        s.push_str(&format!("flag: {f}\n"));
    }
    s
}

/// Attaches `Γ*` to a decomposition by solving on the outer box.
pub fn attach_gamma_star(
    cfg: &ExperimentConfig,
    xi: &PotentialField,
    geo: &CellGeometry,
    dec: &mut IslandDecomposition,
) -> Result<LogField> {
    let log_u = match cfg.method {
        Method::Uniformization => log_solution(xi, &geo.outer, dec.t)?,
        m => LogField::from(&solve_on(xi, &geo.outer.to_site_set(), &geo.outer, dec.t, m, cfg.tolerances.krylov)?.u),
    };
    dec.gamma_star = Some(build_gamma_star(&dec.gamma, |y| log_u.log_value(y), dec.params.eta, dec.t, cfg.dim));
    Ok(log_u)
}
