//! Command-line dispatch.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid configuration or arguments,
//! 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::EngineConfig;
use crate::curve::{DosCurve, Method};
use crate::error::{Error, Result};
use crate::geometry::{BilayerGeometry, Layer, Vec2};
use crate::io::{
    fmt_f64, write_bands_csv, write_dofset_csv, write_dos_csv, write_region_csv, write_timing_csv, TimingRow,
};
use crate::linalg::{c64, init_sequential_kernels};
use crate::momentum::{dos_momentum_adaptive, dos_momentum_naive, intertwining_residual, plan_adaptive};
use crate::monolayer::{band_structure, monolayer_dos};
use crate::realspace::{dos_real, SiteDof};
use crate::region::{level_region, resolution_check, wrap_report, MomentumDofSet};
use crate::study::{run_bench, run_converge_study};
use crate::tb_model::HoppingModel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "moire", version, about = "Density of states of twisted bilayer tight-binding models")]
pub struct Cli {
    /// Worker threads (defaults to the config value, then to all cores).
    #[arg(long, global = true, env = "MOIRE_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monolayer bands along the configured path (bands.csv).
    Bands(Common),
    /// Monolayer density of states (dos.csv).
    MonolayerDos(Common),
    /// Resonant momentum region, its dof sets and the wrap advisory (region.csv, dofset.csv).
    Region(Common),
    /// Shift-averaged real-space KPM density of states (dos.csv, timing.csv).
    DosReal(Common),
    /// Energy-adaptive momentum-space density of states (dos.csv, timing.csv).
    DosMomentum(Common),
    /// Momentum-space density of states with a circular cutoff (dos.csv, timing.csv).
    DosMomentumNaive(Common),
    /// Residual of the real-to-momentum intertwining relation (lemma.csv).
    VerifyLemma(Common),
    /// Convergence study against a sharper reference (dos.csv, convergence.csv, timing.csv).
    Converge(Common),
    /// Cost study over the κ schedule (dos.csv, timing.csv).
    Bench(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Bands(c)
            | Command::MonolayerDos(c)
            | Command::Region(c)
            | Command::DosReal(c)
            | Command::DosMomentum(c)
            | Command::DosMomentumNaive(c)
            | Command::VerifyLemma(c)
            | Command::Converge(c)
            | Command::Bench(c) => c,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::SingularBasis { .. }
        | Error::DegenerateMoire(_)
        | Error::NonHermitianTable { .. }
        | Error::TruncationTooSmall { .. }
        | Error::SpectrumBound { .. }
        | Error::WeakReference(_)
        | Error::SupportViolation(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let config = &cli.command.common().config;
    if !config.is_file() {
        eprintln!("error: config file {} not found", config.display());
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = EngineConfig::load(&common.config)?;
    let workers = cli.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    init_sequential_kernels();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    pool.install(|| dispatch(&cli.command, &cfg, &out))
}

fn dispatch(command: &Command, cfg: &EngineConfig, out: &Path) -> Result<()> {
    let geometry = cfg.build_geometry()?;
    info!("twist {:.4}°, θ = {:.5}", geometry.twist().to_degrees(), geometry.theta_param());
    match command {
        Command::Bands(_) => bands(cfg, &geometry, out),
        Command::MonolayerDos(_) => monolayer(cfg, &geometry, out),
        Command::Region(_) => region(cfg, &geometry, out),
        Command::DosReal(_) => {
            let model = cfg.build_model(&geometry)?;
            let curve = dos_real(&geometry, &model, &cfg.energies.values(), &cfg.real.params())?;
            emit_curve(&curve, out)
        }
        Command::DosMomentum(_) => {
            let model = cfg.build_model(&geometry)?;
            let curve = dos_momentum_adaptive(
                &geometry,
                &model,
                &cfg.region_spec(),
                &cfg.energies.values(),
                cfg.momentum.kappa,
                cfg.momentum.n_lambda(),
                cfg.momentum.max_dofs,
            )?;
            emit_curve(&curve, out)
        }
        Command::DosMomentumNaive(_) => {
            let model = cfg.build_model(&geometry)?;
            let n = &cfg.naive;
            let curve = dos_momentum_naive(&geometry, &model, &cfg.energies.values(), n.kappa, n.r, n.n_q)?;
            emit_curve(&curve, out)
        }
        Command::VerifyLemma(_) => lemma(cfg, &geometry, out),
        Command::Converge(_) => {
            let model = cfg.build_model(&geometry)?;
            let report = run_converge_study(cfg, &geometry, &model)?;
            report.write(out)?;
            print!("{}", report.summary());
            Ok(())
        }
        Command::Bench(_) => {
            let model = cfg.build_model(&geometry)?;
            let report = run_bench(cfg, &geometry, &model)?;
            report.write(out)?;
            print!("{}", report.summary());
            Ok(())
        }
    }
}

fn layer(n: u8) -> Layer {
    Layer::from_number(n).expect("layer numbers are validated with the config")
}

fn intra_table(cfg: &EngineConfig, geometry: &BilayerGeometry, j: Layer) -> Result<crate::tb_model::IntraHoppingTable> {
    let c = match j {
        Layer::Two => cfg.model.intra2.as_ref().unwrap_or(&cfg.model.intra),
        Layer::One => &cfg.model.intra,
    };
    c.table(*geometry.layer(j))
}

fn bands(cfg: &EngineConfig, geometry: &BilayerGeometry, out: &Path) -> Result<()> {
    let j = layer(cfg.monolayer.layer);
    let table = intra_table(cfg, geometry, j)?;
    let path = cfg.monolayer.path_points(geometry.layer(j));
    let bands = band_structure(&table, &path)?;
    write_bands_csv(&out.join("bands.csv"), &bands)?;
    println!("{} q points, {} bands", bands.rows.len(), table.n_orbitals());
    Ok(())
}

fn monolayer(cfg: &EngineConfig, geometry: &BilayerGeometry, out: &Path) -> Result<()> {
    let j = layer(cfg.monolayer.layer);
    let table = intra_table(cfg, geometry, j)?;
    let energies = cfg.energies.values();
    let start = std::time::Instant::now();
    let m = &cfg.monolayer;
    let values = monolayer_dos(&table, &energies, m.kappa, m.grid)?;
    let mut curve = DosCurve::new(Method::Monolayer, energies, values, m.kappa)?;
    curve.grid = m.grid;
    curve.dof_count = table.n_orbitals();
    curve.wall_s = start.elapsed().as_secs_f64();
    write_dos_csv(&out.join("dos.csv"), &curve)?;
    println!("monolayer {}: {} energies on a {}×{} grid", j.number(), curve.len(), m.grid, m.grid);
    Ok(())
}

fn region(cfg: &EngineConfig, geometry: &BilayerGeometry, out: &Path) -> Result<()> {
    let model = cfg.build_model(geometry)?;
    let spec = cfg.region_spec();
    let mask = level_region(&model, geometry, &spec)?;
    if !resolution_check(&model, geometry, &spec)? {
        warn!("torus resolution {} does not resolve the region", spec.resolution);
    }
    write_region_csv(&out.join("region.csv"), &mask)?;
    let advisory = wrap_report(&mask);
    let sets: Vec<MomentumDofSet> = if mask.wraps() {
        Vec::new()
    } else {
        plan_adaptive(geometry, &model, &spec, cfg.momentum.max_dofs)?
            .anchors
            .into_iter()
            .map(|a| a.set)
            .collect()
    };
    write_dofset_csv(&out.join("dofset.csv"), geometry, &sets)?;
    for (k, lm) in mask.layers.iter().enumerate() {
        println!(
            "layer {}: {} cells in region, {} components, wraps: {}",
            k + 1,
            lm.mask.iter().filter(|&&m| m).count(),
            lm.labels.components.len(),
            lm.wraps()
        );
    }
    for s in &sets {
        println!("anchor ({:.5}, {:.5}): {} dofs", s.anchor.x, s.anchor.y, s.len());
    }
    println!("advisory: {}", advisory.message);
    Ok(())
}

fn emit_curve(curve: &DosCurve, out: &Path) -> Result<()> {
    write_dos_csv(&out.join("dos.csv"), curve)?;
    write_timing_csv(&out.join("timing.csv"), &TimingRow::from_curve(curve))?;
    println!(
        "{}: {} energies, {} dofs, {:.3} s",
        curve.method.tag(),
        curve.len(),
        curve.dof_count,
        curve.wall_s
    );
    Ok(())
}

fn lemma(cfg: &EngineConfig, geometry: &BilayerGeometry, out: &Path) -> Result<()> {
    let model: HoppingModel = cfg.build_model(geometry)?;
    let l = &cfg.lemma;
    let j = layer(l.layer);
    let b = Vec2::new(l.b[0], l.b[1]);
    let q = geometry.layer(j).reciprocal() * Vec2::new(l.q[0], l.q[1]);
    let psi = [(
        SiteDof {
            layer: j,
            n: [0, 0],
            orbital: 0,
        },
        c64::new(1.0, 0.0),
    )];
    let mut lines = vec!["r_real,r_mom,residual".to_string()];
    for t in &l.truncations {
        let res = intertwining_residual(geometry, &model, b, j, q, t[0], t[1], &psi)?;
        println!("r_real = {:8.3} Å  r_mom = {:8.3} Å⁻¹  residual = {res:.3e}", t[0], t[1]);
        lines.push(format!("{},{},{}", fmt_f64(t[0]), fmt_f64(t[1]), fmt_f64(res)));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("lemma.csv");
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}
