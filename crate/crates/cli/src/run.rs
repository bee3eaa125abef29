//! Experiment execution, output files and the manifest.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use homog::cellsolve::{self, CellMode, CellProblemSpec, CellSolveError, Permittivity};
use homog::dns::{self, ChargeScaling, DnsError, DnsProblem, StudyConfig};
use homog::effective::{
    build_effective_table, charge_moments, epsilon_volume, epsilon_boundary, num, EffectiveError, EffectiveTable,
    Formula, TableConfig,
};
use homog::exprlang::{ExprError, FieldExpr};
use homog::geometry::{build_cell_mesh, CellGeometry, GeometryError};
use homog::macroscale::{coefficient_field, solve_homogenized, MacroError, MacroProblem, RhoMode};
use homog::msint::{self, FluxField, MsIntError, MsIntSettings, OrderStudyConfig, Target};
use homog::sparse::SolveError;
use homog::suite::{self, CriterionResult, SuiteConfig};

use crate::config::{self, RunConfig};
use crate::validate::validate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Cell,
    EffTable,
    Msint,
    Macro,
    DnsConverge,
    PaperSuite,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Cell => "cell",
            Experiment::EffTable => "eff-table",
            Experiment::Msint => "msint",
            Experiment::Macro => "macro",
            Experiment::DnsConverge => "dns-converge",
            Experiment::PaperSuite => "paper-suite",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("writing outputs: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 1,
        }
    }

    fn invalid(msg: impl ToString) -> Self {
        RunError::Invalid(vec![msg.to_string()])
    }
}

impl From<ExprError> for RunError {
    fn from(e: ExprError) -> Self {
        match e {
            ExprError::Syntax { .. } | ExprError::Unbound(_) => RunError::invalid(e),
            ExprError::Domain(_) => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<GeometryError> for RunError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Mesh(_) => RunError::Numerical(e.to_string()),
            _ => RunError::invalid(e),
        }
    }
}

impl From<CellSolveError> for RunError {
    fn from(e: CellSolveError) -> Self {
        match e {
            CellSolveError::Spec(_) | CellSolveError::Compatibility { .. } => RunError::invalid(e),
            CellSolveError::Expr(x) => x.into(),
            CellSolveError::Solver { .. } => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<EffectiveError> for RunError {
    fn from(e: EffectiveError) -> Self {
        match e {
            EffectiveError::Geometry { source, .. } => source.into(),
            EffectiveError::Cell { source, .. } => source.into(),
            EffectiveError::Expr(x) => x.into(),
            EffectiveError::Precondition(_) | EffectiveError::OutOfRange { .. } => RunError::invalid(e),
            EffectiveError::Anisotropic { .. } => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<MsIntError> for RunError {
    fn from(e: MsIntError) -> Self {
        match e {
            MsIntError::Expr(x) => x.into(),
            MsIntError::Geometry(g) => g.into(),
            MsIntError::FixedPoint { .. } => RunError::Numerical(e.to_string()),
            _ => RunError::invalid(e),
        }
    }
}

impl From<SolveError> for RunError {
    fn from(e: SolveError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

impl From<MacroError> for RunError {
    fn from(e: MacroError) -> Self {
        match e {
            MacroError::Invalid(v) => RunError::Invalid(v),
            MacroError::Table(t) => t.into(),
            MacroError::Expr(x) => x.into(),
            MacroError::Solver(s) => s.into(),
        }
    }
}

impl From<DnsError> for RunError {
    fn from(e: DnsError) -> Self {
        match e {
            DnsError::Invalid(v) => RunError::Invalid(v),
            DnsError::TooLarge { .. } => RunError::invalid(e),
            DnsError::Mesh { source, .. } => source.into(),
            DnsError::Expr(x) => x.into(),
            DnsError::Solver(s) => s.into(),
            DnsError::Macro(m) => m.into(),
        }
    }
}

/// One output file: name and full contents.
pub type Output = (String, String);

/// Parsed, merged and validated configuration.
pub fn load(text: &str) -> Result<(RunConfig, String), RunError> {
    let value = config::overlay(text).map_err(RunError::invalid)?;
    let canonical = value.to_string();
    let cfg = config::from_value(value).map_err(RunError::invalid)?;
    let violations = validate(&cfg);
    if !violations.is_empty() {
        return Err(RunError::Invalid(violations));
    }
    Ok((cfg, canonical))
}

fn parse(text: &str) -> Result<FieldExpr, RunError> {
    Ok(FieldExpr::parse(text)?)
}

fn cell_csvs(cfg: &RunConfig) -> Result<Vec<Output>, RunError> {
    let c = &cfg.cell;
    let eps_i = c.eps_i.resolve().map_err(RunError::invalid)?;
    let mesh = Arc::new(build_cell_mesh(&CellGeometry::uniform(c.a)?, c.target_h)?);
    let rho = parse(&c.rho)?;
    let modes: Vec<CellMode> = c.modes.iter().filter_map(|m| CellMode::from_name(m)).collect();
    let solved = modes
        .par_iter()
        .map(|&mode| {
            let spec = if mode.is_psi() {
                CellProblemSpec::psi(mesh.clone(), c.eps_e, eps_i, mode)
            } else {
                CellProblemSpec::xi(mesh.clone(), c.eps_e, eps_i, mode, rho.clone(), c.anchor)
            };
            cellsolve::solve(&spec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut eps = String::from("mode,formula,eps11,eps12,eps21,eps22\n");
    let mut charge = String::from("mode,F1,F2,G1,G2,dipole1,dipole2\n");
    for (mode, sol) in modes.iter().zip(&solved) {
        if mode.is_psi() {
            let e = if mode.is_limit() { epsilon_boundary(sol) } else { epsilon_volume(sol) };
            let formula = match e.formula {
                Formula::Volume => "volume",
                Formula::Boundary => "boundary",
            };
            let m = e.eps_eff;
            let _ = writeln!(eps, "{},{formula},{},{},{},{}", mode.name(), num(m[0][0]), num(m[0][1]), num(m[1][0]), num(m[1][1]));
        } else {
            let q = charge_moments(sol)?;
            let _ = writeln!(
                charge,
                "{},{},{},{},{},{},{}",
                mode.name(),
                num(q.f[0]),
                num(q.f[1]),
                num(q.g[0]),
                num(q.g[1]),
                num(q.dipole[0]),
                num(q.dipole[1])
            );
        }
    }
    let mut out = Vec::new();
    if modes.iter().any(|m| m.is_psi()) {
        out.push(("cell_eps_eff.csv".to_string(), eps));
    }
    if modes.iter().any(|m| !m.is_psi()) {
        out.push(("cell_charge.csv".to_string(), charge));
    }
    Ok(out)
}

fn effective_table(cfg: &RunConfig) -> Result<EffectiveTable, RunError> {
    let c = &cfg.effective;
    let mode = |s: &str| CellMode::from_name(s).ok_or_else(|| RunError::invalid(format!("unknown cell mode `{s}`")));
    Ok(build_effective_table(&TableConfig {
        a_values: c.a_values.clone(),
        eps_e: c.eps_e,
        eps_i: c.eps_i.resolve().map_err(RunError::invalid)?,
        psi_mode: mode(&c.psi_mode)?,
        xi_mode: mode(&c.xi_mode)?,
        rho: parse(&c.rho)?,
        anchor: c.anchor,
        target_h: c.target_h,
    })?)
}

fn msint_csv(cfg: &RunConfig) -> Result<Vec<Output>, RunError> {
    let c = &cfg.msint;
    let flux = FluxField::from_exprs(parse(&c.q1)?, parse(&c.q2)?);
    let target = match c.target.as_str() {
        "arc" => Target::Arc { theta_start: c.arc[0], theta_end: c.arc[1] },
        _ => Target::Closed,
    };
    let report = msint::order_study(
        &flux,
        &OrderStudyConfig {
            a_of_x: parse(&c.a_of_x)?,
            x_hat: c.x_hat,
            target,
            delta_values: c.delta_values.clone(),
            n_quad: c.n_quad,
            settings: MsIntSettings { prefactor_exponent: c.prefactor_exponent },
        },
    )?;
    Ok(vec![("msint.csv".into(), report.to_csv())])
}

fn macro_csvs(cfg: &RunConfig) -> Result<Vec<Output>, RunError> {
    let c = &cfg.macro_;
    let problem = MacroProblem {
        a_of_x: parse(&c.a_of_x)?,
        table: Arc::new(effective_table(cfg)?),
        rho_mode: RhoMode::from_name(&c.rho_mode).ok_or_else(|| RunError::invalid("unknown rho_mode"))?,
        rho: parse(&c.rho)?,
        boundary_value: parse(&c.boundary_value)?,
        grid_n: c.grid_n,
    };
    let coeffs = coefficient_field(&problem)?;
    let sol = solve_homogenized(&problem)?;
    Ok(vec![("macro_phi0.csv".into(), sol.to_csv()), ("macro_coefficients.csv".into(), coeffs.to_csv())])
}

/// The convergence study described by the `dns` section.
pub fn dns_study(cfg: &RunConfig, eps_i: f64) -> Result<StudyConfig, RunError> {
    let c = &cfg.dns;
    let table = build_effective_table(&TableConfig {
        a_values: c.table_a_values.clone(),
        eps_e: c.eps_e,
        eps_i: Permittivity::Finite(eps_i),
        psi_mode: CellMode::PsiFinite,
        xi_mode: CellMode::XiFinite,
        rho: parse(&c.table_rho)?,
        anchor: [0.5, 0.5],
        target_h: 1.0 / c.resolution_per_cell as f64,
    })?;
    let a_of_x = parse(&c.a_of_x)?;
    let rho = parse(&c.rho)?;
    let boundary_value = parse(&c.boundary_value)?;
    Ok(StudyConfig {
        base: DnsProblem {
            delta: c.delta_values[0],
            a_of_x: a_of_x.clone(),
            eps_e: c.eps_e,
            eps_i,
            rho: rho.clone(),
            boundary_value: boundary_value.clone(),
            mode: ChargeScaling::from_name(&c.mode).ok_or_else(|| RunError::invalid("unknown dns mode"))?,
            resolution_per_cell: c.resolution_per_cell,
        },
        deltas: c.delta_values.clone(),
        homogenized: MacroProblem {
            a_of_x,
            table: Arc::new(table),
            rho_mode: RhoMode::CellAverage,
            rho,
            boundary_value,
            grid_n: c.macro_grid_n,
        },
    })
}

/// The acceptance checks with every parameter taken from `cfg`.
pub fn suite_config(cfg: &RunConfig) -> Result<SuiteConfig, RunError> {
    let s = &cfg.suite;
    let eps_e = s.eps_e;
    let f = &s.forms;
    let ch = &s.charge;
    let inv = &s.invariants;
    Ok(SuiteConfig {
        route: suite::RouteCheck {
            a_values: s.route.a_values.clone(),
            eps_e,
            contrast: s.route.contrast,
            target_h: s.route.target_h,
            tolerance: s.route.tolerance,
        },
        forms: suite::FormOrderCheck {
            flux: [parse(&f.q1)?, parse(&f.q2)?],
            a_sloped: parse(&f.a_sloped)?,
            a_flat: parse(&f.a_flat)?,
            x_hat: f.x_hat,
            delta_values: f.delta_values.clone(),
            n_quad: f.n_quad,
            settings: MsIntSettings { prefactor_exponent: f.prefactor_exponent },
            arc: (f.arc[0], f.arc[1]),
            min_slope: f.min_slope,
            max_naive_slope: f.max_naive_slope,
            misfit_tolerance: f.misfit_tolerance,
            consistency_tolerance: f.consistency_tolerance,
        },
        charge: suite::ChargeRouteCheck {
            table: TableConfig {
                a_values: ch.table_a_values.clone(),
                eps_e,
                eps_i: Permittivity::Infinite,
                psi_mode: CellMode::PsiLimitNeumann,
                xi_mode: CellMode::XiLimitNeumann,
                rho: parse(&ch.rho)?,
                anchor: [0.5, 0.5],
                target_h: ch.target_h,
            },
            a_intercept: ch.a_intercept,
            a_slope: ch.a_slope,
            check_a: ch.check_a.clone(),
            tolerance: ch.tolerance,
        },
        limit: suite::LimitCheck {
            a_values: s.limit.a_values.clone(),
            eps_e,
            contrasts: s.limit.contrasts.clone(),
            target_h: s.limit.target_h,
            final_gap: s.limit.final_gap,
        },
        dilute: suite::DiluteCheck {
            a: s.dilute.a,
            eps_e,
            target_h: s.dilute.target_h,
            tolerance: s.dilute.tolerance,
        },
        dns: suite::DnsCheck {
            study: dns_study(cfg, cfg.dns.eps_i)?,
            max_ratio: s.dns.max_ratio,
            min_slope: s.dns.min_slope,
        },
        invariants: suite::InvariantCheck {
            a_values: inv.a_values.clone(),
            eps_e,
            eps_i_values: inv
                .eps_i_values
                .iter()
                .map(|e| e.resolve())
                .collect::<Result<_, _>>()
                .map_err(RunError::invalid)?,
            rho: parse(&inv.rho)?,
            anchor: inv.anchor,
            target_h: inv.target_h,
            transport_tolerance: inv.transport_tolerance,
            table_eps_i: inv.table_eps_i,
        },
    })
}

/// Runs `exp` and returns its CSV outputs, plus the per-criterion results
/// for the acceptance suite.
pub fn execute(exp: Experiment, cfg: &RunConfig) -> Result<(Vec<Output>, Vec<CriterionResult>), RunError> {
    let files = match exp {
        Experiment::Cell => cell_csvs(cfg)?,
        Experiment::EffTable => vec![("eff_table.csv".into(), effective_table(cfg)?.to_csv())],
        Experiment::Msint => msint_csv(cfg)?,
        Experiment::Macro => macro_csvs(cfg)?,
        Experiment::DnsConverge => {
            let report = dns::convergence_study(&dns_study(cfg, cfg.dns.eps_i)?)?;
            let mut contrast = String::from("eps_i,delta,error_L2,unknowns\n");
            let mut eps: Vec<f64> = cfg.dns.contrast_bracket.clone();
            eps.push(cfg.dns.eps_i);
            eps.sort_by(f64::total_cmp);
            eps.dedup();
            for e in eps {
                let rows = if e == cfg.dns.eps_i {
                    report.rows.clone()
                } else {
                    dns::convergence_study(&dns_study(cfg, e)?)?.rows
                };
                for r in rows {
                    let _ = writeln!(contrast, "{},{},{},{}", num(e), num(r.delta), num(r.error_l2), r.unknowns);
                }
            }
            vec![
                ("dns_convergence.csv".into(), report.to_csv()),
                ("dns_contrast.csv".into(), contrast),
            ]
        }
        Experiment::PaperSuite => {
            let results = suite::run_suite(&suite_config(cfg)?);
            return Ok((vec![("acceptance.csv".into(), suite::results_csv(&results))], results));
        }
    };
    Ok((files, Vec::new()))
}

/// Writes `contents` to a temporary sibling, then renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub criteria: Vec<CriterionResult>,
    pub seconds: f64,
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Full run: load, validate, execute on `threads` workers if given, write
/// the outputs and a manifest.
pub fn run(exp: Experiment, config_text: &str, out: Option<&Path>, threads: Option<usize>) -> Result<RunSummary, RunError> {
    let start = Instant::now();
    let (cfg, canonical) = load(config_text)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let (files, criteria) = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunError::invalid(format!("--threads {n}: {e}")))?
            .install(|| execute(exp, &cfg))?,
        None => execute(exp, &cfg)?,
    };
    fs::create_dir_all(&out_dir)?;
    for (name, contents) in &files {
        write_atomic(&out_dir.join(name), contents)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let mut manifest = String::from("key,value\n");
    let _ = writeln!(manifest, "experiment,{}", exp.name());
    let _ = writeln!(manifest, "config_sha256,{}", config_hash(&canonical));
    let _ = writeln!(manifest, "homog_version,{}", homog::VERSION);
    let _ = writeln!(manifest, "homog_cli_version,{}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "threads,{}", threads.unwrap_or_else(rayon::current_num_threads));
    let _ = writeln!(manifest, "wall_seconds,{seconds:.3}");
    for (name, _) in &files {
        let _ = writeln!(manifest, "output,{name}");
    }
    for c in &criteria {
        let _ = writeln!(manifest, "criterion_{}_seconds,{:.3}", c.id, c.seconds);
    }
    write_atomic(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(RunSummary { out_dir, files: files.into_iter().map(|f| f.0).collect(), criteria, seconds })
}
