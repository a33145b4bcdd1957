//! `pamkit` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pamkit::harness::{
    attach_gamma_star, cached_shape, cell_field, cell_geometry, cell_islands, field_islands, islands_text,
    load_report, run_experiment, sweep, write_islands, write_shape_tables, ExperimentConfig, SweepAxis,
};
use pamkit::randfield::{PotentialField, Rho};
use pamkit::verify::VerificationReport;

#[derive(Parser, Debug)]
#[command(name = "pamkit", version, about = "Parabolic Anderson model toolkit")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict the run to a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Let failed trend checks fail the exit code.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal shape profiles and the (ρ, χ, r) table.
    Shape {
        /// Values of ρ; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        rho: Vec<f64>,
        /// Profile radius; defaults to the configured shape radius.
        #[arg(long)]
        radius: Option<u64>,
    },
    /// Run every (seed, t) cell and write the report files.
    Simulate {
        /// Also write the potential of each cell as `fields/s<seed>-t<t>.csv`.
        #[arg(long)]
        dump_fields: bool,
    },
    /// Island decomposition of one cell.
    Islands {
        /// Time; defaults to the last entry of the t-grid.
        #[arg(long)]
        t: Option<f64>,
        /// Field dump to decompose instead of a sampled field.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Re-check the artifacts of a previous run.
    Verify {
        /// Run directory; defaults to `--out`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// One experiment per value of a parameter axis.
    Sweep {
        /// `rho`, `a`, `delta` or `t`; defaults to the configured sweep.
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("pamkit-out"))
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = load_config(&cli)?;
    let out = out_dir(&cli, &cfg);
    cfg.output_dir = Some(out.clone());
    match &cli.command {
        Command::Shape { rho, radius } => {
            let rhos = if rho.is_empty() { vec![cfg.rho()] } else { rho.iter().map(|&r| Rho::new(r)).collect::<Result<_, _>>()? };
            let radius = radius.unwrap_or(cfg.shape_radius);
            let shapes = rhos
                .iter()
                .map(|&r| cached_shape(r, cfg.dim, radius, cfg.tolerances.shape))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<_> = shapes.iter().map(|s| s.as_ref()).collect();
            let table = write_shape_tables(&refs, &cfg.epsilons, &out)?;
            println!("rho,chi,epsilon,r");
            for r in table {
                println!("{},{},{},{}", r[0], r[1], r[2], r[3]);
            }
            Ok(true)
        }
        Command::Simulate { dump_fields } => {
            let res = run_experiment(&cfg)?;
            if *dump_fields {
                dump(&cfg, &out)?;
            }
            print!("{}", res.report.to_text());
            Ok(verdict(&res.report, cli.strict))
        }
        Command::Islands { t, field } => {
            let t = match t.or_else(|| cfg.t_grid.last().copied()) {
                Some(t) => t,
                None => bail!("no time given and the t-grid is empty"),
            };
            let (xi, geo, mut dec) = match field {
                Some(p) => {
                    let xi = PotentialField::load_csv(p).with_context(|| format!("reading {}", p.display()))?;
                    let (geo, dec) = field_islands(&cfg, &xi, t)?;
                    (xi, geo, dec)
                }
                None => cell_islands(&cfg, cfg.seeds.first().copied().unwrap_or(1), t)?,
            };
            attach_gamma_star(&cfg, &xi, &geo, &mut dec)?;
            write_islands(&dec, &out)?;
            print!("{}", islands_text(&dec));
            Ok(true)
        }
        Command::Verify { run } => {
            let dir = run.clone().unwrap_or(out);
            verify(&dir, cli.strict)
        }
        Command::Sweep { axis, values } => {
            let (axis, values) = match (axis, &cfg.sweep) {
                (Some(a), _) if !values.is_empty() => (*a, values.clone()),
                (None, Some(s)) => (s.axis, if values.is_empty() { s.values.clone() } else { values.clone() }),
                (Some(a), Some(s)) if s.axis == *a => (*a, s.values.clone()),
                _ => bail!("sweep needs --axis and --values or a sweep section in the config"),
            };
            let res = sweep(&cfg, axis, &values)?;
            println!("sweep over {} values: {} hard failures, {} trend flags", values.len(), res.hard_failures(), res.trend_failures());
            let ok = res.hard_failures() == 0 && (!cli.strict || res.trend_failures() == 0);
            Ok(ok)
        }
    }
}

fn verdict(report: &VerificationReport, strict: bool) -> bool {
    report.succeeded(strict)
}

fn verify(dir: &Path, strict: bool) -> Result<bool> {
    let (file, mismatched) = load_report(dir).with_context(|| format!("reading report in {}", dir.display()))?;
    for m in &mismatched {
        eprintln!("digest mismatch: {m}");
    }
    let report = &file.verification;
    let text = report.to_text();
    print!("{text}");
    fs::write(dir.join("verify.txt"), &text)?;
    let mut w = csv::Writer::from_path(dir.join("verify_trends.csv"))?;
    w.write_record(["name", "slope", "direction", "passed"])?;
    for s in &report.trends {
        w.write_record([
            s.name.clone(),
            s.slope.map_or(String::new(), |v| v.to_string()),
            format!("{:?}", s.direction),
            s.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(mismatched.is_empty() && verdict(report, strict))
}

fn dump(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let shape = cached_shape(cfg.rho(), cfg.dim, cfg.shape_radius, cfg.tolerances.shape)?;
    let dir = out.join("fields");
    fs::create_dir_all(&dir)?;
    for &s in &cfg.seeds {
        for &t in &cfg.t_grid {
            let geo = cell_geometry(cfg, t);
            let xi = cell_field(cfg, &shape, &geo.outer, s);
            xi.save_csv(dir.join(format!("s{s}-t{t}.csv")))?;
        }
    }
    Ok(())
}
