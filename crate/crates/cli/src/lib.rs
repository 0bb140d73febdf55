//! Batch front end: configuration, runs and output files.

pub mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fdbem::analytic::{pulsating_sphere_solution, rel_error, MieSeries};
use fdbem::bench::{compare_modes, summation_benchmark, summation_table, SummationConfig};
use fdbem::geometry::Vec3;
use fdbem::mesh::{icosphere, read_mesh, Mesh, MeshError};
use fdbem::solver::{assemble_operator, solve, BoundaryCondition, GmresParams, IncidentWave, SolverError, SolverParams};
use fdbem::C64;

pub use config::{ConfigError, RunConfig};
use config::{BoundaryKind, IncidentKind, Problem, Reference};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("GMRES did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::NotConverged { .. } => 3,
            Self::Io { .. } | Self::Mesh(_) => 4,
            Self::Solver(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    BenchSum,
    Compare,
}

/// Files written by a run and the report text.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub report: String,
    pub files: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str, art: &mut Artifacts) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(io_err(path))?;
    art.files.push(path.to_path_buf());
    Ok(())
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Artifacts, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    match (cmd, cfg.problem) {
        (Command::Solve, Problem::Radiation | Problem::Scattering) => run_solve(cfg),
        (Command::Solve | Command::BenchSum, Problem::SummationBenchmark) => run_summation(cfg),
        (Command::Compare, Problem::SummationBenchmark) => run_compare(cfg),
        (cmd, problem) => Err(RunError::Config(ConfigError::Invalid(vec![config::FieldError {
            field: "problem".into(),
            message: format!("{problem:?} cannot be run with {cmd:?}"),
        }]))),
    }
}

fn load_mesh(cfg: &RunConfig) -> Result<Mesh<f64>, RunError> {
    match (&cfg.mesh.path, cfg.mesh.icosphere) {
        (Some(p), _) => Ok(read_mesh(p)?),
        (None, Some(n)) => Ok(icosphere(n, 1.0)),
        (None, None) => unreachable!("validated"),
    }
}

fn complex(v: [f64; 2]) -> C64 {
    C64::new(v[0], v[1])
}

fn run_solve(cfg: &RunConfig) -> Result<Artifacts, RunError> {
    let mesh = load_mesh(cfg)?;
    let k = cfg.k;
    let mut params = SolverParams::new(cfg.epsilon);
    params.storage = cfg.storage.into();
    params.gmres = GmresParams {
        tol: cfg.gmres_tol(),
        restart: cfg.gmres.restart,
        max_iter: cfg.gmres.max_iter,
    };
    let op = assemble_operator(&mesh, k, &params)?;
    let n = op.num_points();
    let data = vec![complex(cfg.boundary.value); n];
    let bc = match cfg.boundary.kind {
        BoundaryKind::Neumann => BoundaryCondition::Neumann(data),
        BoundaryKind::Dirichlet => BoundaryCondition::Dirichlet(data),
        BoundaryKind::Robin => BoundaryCondition::Robin {
            a: complex(cfg.boundary.a.expect("validated")),
            b: complex(cfg.boundary.b.expect("validated")),
            g: data,
        },
    };
    let direction = Vec3::from_f64(cfg.incident.direction).normalized();
    let incident = match cfg.incident.kind {
        IncidentKind::None => IncidentWave::None,
        IncidentKind::PlaneWave => IncidentWave::plane_wave(direction),
    };
    let sol = solve(&op, &bc, &incident, &params.gmres)?;

    let reference: Option<Vec<C64>> = match cfg.reference {
        Reference::None => None,
        Reference::PulsatingSphere => Some(vec![complex(cfg.boundary.value) * pulsating_sphere_solution(k); n]),
        Reference::Mie => {
            let mie = MieSeries::new(k, None).map_err(|e| SolverError::InvalidBoundary(e.to_string()))?;
            Some(op.positions.iter().map(|x| mie.surface_field((x.normalized().dot(&direction)).clamp(-1.0, 1.0).acos()).1).collect())
        }
    };
    let error = reference.as_ref().and_then(|r| rel_error(&sol.u, r).ok());

    let a = &op.assembly;
    let ph = &sol.stats.phases;
    let mut report = String::new();
    let _ = writeln!(report, "problem {:?} storage {} N {} elements {} k {} epsilon {:e}", cfg.problem, cfg.storage_name(), n, mesh.num_elements(), k, cfg.epsilon);
    let _ = write!(report, "{}", a.tree_summary);
    let _ = writeln!(
        report,
        "assembly_s tree {:.3} cache {:.3} compression {:.3} leaf {:.3} near {:.3}",
        a.tree.as_secs_f64(),
        a.cache.as_secs_f64(),
        a.compression.as_secs_f64(),
        a.leaf_operators.as_secs_f64(),
        a.near.as_secs_f64()
    );
    let _ = writeln!(report, "near_nnz {}", a.near_nnz);
    let _ = write!(report, "{}", sol.stats.report());
    let _ = writeln!(report, "N\tT_up\tT_M2L\tT_down\tT_near\tM_MB\titerations");
    let _ = writeln!(
        report,
        "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}\t{}",
        n,
        ph.upward().as_secs_f64(),
        ph.m2l.as_secs_f64(),
        ph.downward().as_secs_f64(),
        ph.near.as_secs_f64(),
        a.total_bytes() as f64 / 1e6,
        sol.stats.iterations
    );
    if let Some(e) = error {
        let name = match cfg.reference {
            Reference::Mie => "mie",
            _ => "pulsating_sphere",
        };
        let _ = writeln!(report, "error_vs_{name} {e:.3e}");
    }

    let mut art = Artifacts::default();
    let field = cfg.output.join("field.txt");
    write_field(&field, &op.positions, &sol.u).map_err(io_err(&field))?;
    art.files.push(field);
    if cfg.vtk {
        let path = cfg.output.join("field.vtk");
        write_vtk(&path, &op.positions, &sol.u).map_err(io_err(&path))?;
        art.files.push(path);
    }
    write_file(&cfg.output.join("report.txt"), &report, &mut art)?;
    art.report = report;
    if !sol.stats.converged {
        return Err(RunError::NotConverged {
            iterations: sol.stats.iterations,
            residual: sol.stats.final_residual,
        });
    }
    Ok(art)
}

fn summation_config(cfg: &RunConfig) -> SummationConfig {
    let b = cfg.benchmark.as_ref().expect("validated");
    let mut s = SummationConfig::new(b.points, cfg.k, cfg.epsilon);
    s.targets = b.targets;
    s.seed = cfg.seed;
    s.leaf_threshold = b.leaf_threshold;
    s
}

fn run_summation(cfg: &RunConfig) -> Result<Artifacts, RunError> {
    let rows = summation_benchmark(&summation_config(cfg), &[cfg.storage.into()])?;
    let report = summation_table(&rows);
    let mut art = Artifacts::default();
    write_file(&cfg.output.join("summation.tsv"), &report, &mut art)?;
    art.report = report;
    Ok(art)
}

fn run_compare(cfg: &RunConfig) -> Result<Artifacts, RunError> {
    let report = compare_modes(&summation_config(cfg))?.report();
    let mut art = Artifacts::default();
    write_file(&cfg.output.join("compare.txt"), &report, &mut art)?;
    art.report = report;
    Ok(art)
}

impl RunConfig {
    fn storage_name(&self) -> &'static str {
        fdbem::fda::StorageMode::from(self.storage).name()
    }
}

/// ASCII table `x y z re_u im_u abs_u` with a header line.
pub fn write_field(path: &Path, positions: &[Vec3<f64>], u: &[C64]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x y z re_u im_u abs_u")?;
    for (x, v) in positions.iter().zip(u) {
        writeln!(w, "{:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}", x.x(), x.y(), x.z(), v.re, v.im, v.norm())?;
    }
    w.flush()
}

/// Legacy VTK polydata with one vertex per point.
pub fn write_vtk(path: &Path, positions: &[Vec3<f64>], u: &[C64]) -> std::io::Result<()> {
    let n = positions.len();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0\nfdbem surface field\nASCII\nDATASET POLYDATA")?;
    writeln!(w, "POINTS {n} double")?;
    for x in positions {
        writeln!(w, "{} {} {}", x.x(), x.y(), x.z())?;
    }
    writeln!(w, "VERTICES {n} {}", 2 * n)?;
    for i in 0..n {
        writeln!(w, "1 {i}")?;
    }
    writeln!(w, "POINT_DATA {n}")?;
    for (name, f) in [("re_u", 0), ("im_u", 1), ("abs_u", 2)] {
        writeln!(w, "SCALARS {name} double 1\nLOOKUP_TABLE default")?;
        for v in u {
            let s = match f {
                0 => v.re,
                1 => v.im,
                _ => v.norm(),
            };
            writeln!(w, "{s}")?;
        }
    }
    w.flush()
}
