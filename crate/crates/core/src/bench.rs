//! Summation benchmarks, storage mode comparison and the pulsating sphere
//! scaling series.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytic::{direct_sum, pulsating_sphere_solution, random_targets, rel_error};
use crate::compress::convert;
use crate::fda::{FdaOperator, FdaParams, PhaseTimes, StorageMode, TranslationCache};
use crate::geometry::{fibonacci_sphere, Vec3};
use crate::kernels::{LayeredKernel, SourceLayer, TargetLayer};
use crate::mesh::{icosphere, icosphere_subdivisions};
use crate::octree::{leaf_threshold, Octree};
use crate::solver::{assemble_operator, solve, BoundaryCondition, BurtonMillerOperator, IncidentWave, SolverError, SolverParams};

/// `G + (i/k) dG/dn_y`, the summation benchmark kernel.
pub fn summation_kernel(k: f64) -> LayeredKernel<f64> {
    LayeredKernel {
        k,
        source: SourceLayer::MonopoleDipole(Complex::new(0.0, 1.0 / k)),
        target: TargetLayer::Potential,
    }
}

/// Number of points on the unit sphere giving `per_wavelength` points per
/// wavelength on average.
pub fn cloud_size(k: f64, per_wavelength: f64) -> usize {
    let lambda = 2.0 * std::f64::consts::PI / k;
    (4.0 * std::f64::consts::PI * (per_wavelength / lambda).powi(2)).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummationConfig {
    pub points: usize,
    pub k: f64,
    pub epsilon: f64,
    /// Number of random targets for the error estimate.
    pub targets: usize,
    pub seed: u64,
    pub leaf_threshold: Option<usize>,
}

impl SummationConfig {
    pub fn new(points: usize, k: f64, epsilon: f64) -> Self {
        Self {
            points,
            k,
            epsilon,
            targets: 200,
            seed: 1,
            leaf_threshold: None,
        }
    }
}

/// One row of a summation benchmark, for one storage mode.
#[derive(Debug, Clone)]
pub struct SummationResult {
    pub mode: StorageMode,
    pub points: usize,
    pub k: f64,
    pub epsilon: f64,
    pub levels: usize,
    /// Cache construction (raw) or conversion from raw (other modes).
    pub build: Duration,
    pub phases: PhaseTimes,
    pub apply: Duration,
    pub cache_bytes: usize,
    pub eps_a: f64,
}

impl SummationResult {
    pub const HEADER: &'static str = "mode\tN\tk\teps\tlevels\tT_build\tT_up\tT_M2L\tT_down\tT_apply\tM_MB\teps_a";

    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.0e}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}\t{:.3e}",
            self.mode.name(),
            self.points,
            self.k,
            self.epsilon,
            self.levels,
            self.build.as_secs_f64(),
            self.phases.upward().as_secs_f64(),
            self.phases.m2l.as_secs_f64(),
            self.phases.downward().as_secs_f64(),
            self.apply.as_secs_f64(),
            self.cache_bytes as f64 / 1e6,
            self.eps_a
        )
    }
}

/// Tab separated table with a header line.
pub fn summation_table(rows: &[SummationResult]) -> String {
    let mut s = String::from(SummationResult::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.row());
        s.push('\n');
    }
    s
}

/// Sums the benchmark kernel over a sphere point cloud with every requested
/// storage mode. Tree, charges, targets and reference values are shared.
pub fn summation_benchmark(cfg: &SummationConfig, modes: &[StorageMode]) -> Result<Vec<SummationResult>, SolverError> {
    let n = cfg.points;
    let points: Vec<Vec3<f64>> = fibonacci_sphere(n);
    let np = cfg.leaf_threshold.unwrap_or_else(|| leaf_threshold(cfg.epsilon));
    let tree = Arc::new(Octree::build_with_threshold(&points, cfg.k, np));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let charges: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let kernel = summation_kernel(cfg.k);
    let targets = random_targets(n, cfg.targets, cfg.seed);
    let exact: Vec<Complex<f64>> = targets
        .iter()
        .map(|&i| {
            let x = [points[i]];
            let before = direct_sum(&kernel, &points[..i], &points[..i], &charges[..i], &x, &x).map(|v| v[0]);
            let after = direct_sum(&kernel, &points[i + 1..], &points[i + 1..], &charges[i + 1..], &x, &x).map(|v| v[0]);
            before.and_then(|b| after.map(|a| a + b)).expect("distinct cloud points")
        })
        .collect();

    let t0 = Instant::now();
    let raw = TranslationCache::build(&tree, &FdaParams::new(cfg.epsilon))?;
    let raw_build = t0.elapsed();
    let pts = Arc::new(points);
    let mut near: Option<Vec<Complex<f64>>> = None;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let t0 = Instant::now();
        let cache = Arc::new(convert(&raw, mode, None)?);
        let build = if mode == StorageMode::Raw { raw_build } else { t0.elapsed() };
        let cache_bytes = cache.bytes();
        let op = FdaOperator::new(tree.clone(), pts.clone(), pts.clone(), cache)?;
        let t0 = Instant::now();
        let (far, phases) = op.apply_timed(&kernel, &charges);
        let apply = t0.elapsed();
        let near = near.get_or_insert_with(|| op.apply_near_direct(&kernel, &charges));
        let approx: Vec<Complex<f64>> = targets.iter().map(|&i| far[i] + near[i]).collect();
        let eps_a = rel_error(&approx, &exact).expect("nonzero reference");
        log::info!("summation {} eps_a {:.3e} apply {:?}", mode.name(), eps_a, apply);
        out.push(SummationResult {
            mode,
            points: n,
            k: cfg.k,
            epsilon: cfg.epsilon,
            levels: tree.num_levels(),
            build,
            phases,
            apply,
            cache_bytes,
            eps_a,
        });
    }
    Ok(out)
}

/// Raw against reduced low-rank storage on identical inputs.
#[derive(Debug, Clone)]
pub struct ModeComparison {
    pub raw: SummationResult,
    pub compressed: SummationResult,
}

impl ModeComparison {
    pub fn m2l_ratio(&self) -> f64 {
        ratio(self.raw.phases.m2l, self.compressed.phases.m2l)
    }

    pub fn upward_ratio(&self) -> f64 {
        ratio(self.raw.phases.upward(), self.compressed.phases.upward())
    }

    pub fn memory_ratio(&self) -> f64 {
        self.raw.cache_bytes as f64 / self.compressed.cache_bytes.max(1) as f64
    }

    pub fn report(&self) -> String {
        let mut s = summation_table(&[self.raw.clone(), self.compressed.clone()]);
        let _ = writeln!(
            s,
            "ratios raw/compressed: M2L {:.2} upward {:.2} memory {:.2}; eps_a raw {:.3e} compressed {:.3e}",
            self.m2l_ratio(),
            self.upward_ratio(),
            self.memory_ratio(),
            self.raw.eps_a,
            self.compressed.eps_a
        );
        s
    }
}

fn ratio(a: Duration, b: Duration) -> f64 {
    a.as_secs_f64() / b.as_secs_f64().max(1e-9)
}

pub fn compare_modes(cfg: &SummationConfig) -> Result<ModeComparison, SolverError> {
    let mut rows = summation_benchmark(cfg, &[StorageMode::Raw, StorageMode::LowRank])?;
    let compressed = rows.pop().expect("two rows");
    let raw = rows.pop().expect("two rows");
    Ok(ModeComparison { raw, compressed })
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    /// Wavenumber of the first level; level `l` uses `2^l` times this.
    pub k0: f64,
    pub epsilon: f64,
    /// Elements per wavelength.
    pub per_wavelength: f64,
    pub storage: StorageMode,
    /// Levels whose point count would exceed this are skipped.
    pub max_points: usize,
}

impl ScalingConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            k0: 2.0 * std::f64::consts::PI,
            epsilon,
            per_wavelength: 5.0,
            storage: StorageMode::LowRank,
            max_points: 300_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub k: f64,
    pub elements: usize,
    pub points: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Mean wall time of one GMRES iteration.
    pub iteration_time: Duration,
    pub assembly_time: Duration,
    pub total_time: Duration,
    /// Bytes held by the assembled operator.
    pub memory: usize,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub a: f64,
    pub r_squared: f64,
}

/// Fit of `y = a N log N` in log space: `log y = log a + log(N log N)` with
/// the slope held at one. `r_squared` is computed on `log y`.
pub fn fit_n_log_n(n: &[usize], y: &[f64]) -> Fit {
    let lx: Vec<f64> = n.iter().map(|&v| (v as f64 * (v as f64).ln()).ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = ly.len() as f64;
    let log_a = ly.iter().zip(&lx).map(|(a, b)| a - b).sum::<f64>() / m;
    let mean = ly.iter().sum::<f64>() / m;
    let ss_tot: f64 = ly.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = ly.iter().zip(&lx).map(|(a, b)| (a - b - log_a).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Fit { a: log_a.exp(), r_squared }
}

#[derive(Debug, Clone)]
pub struct ScalingSeries {
    pub epsilon: f64,
    pub rows: Vec<ScalingRow>,
    /// Set when levels were skipped for exceeding the size limit.
    pub truncated: bool,
    pub time_fit: Fit,
    pub memory_fit: Fit,
}

impl ScalingSeries {
    fn ratios(&self, f: impl Fn(&ScalingRow) -> f64) -> Vec<f64> {
        self.rows.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect()
    }

    pub fn time_ratios(&self) -> Vec<f64> {
        self.ratios(|r| r.iteration_time.as_secs_f64())
    }

    pub fn memory_ratios(&self) -> Vec<f64> {
        self.ratios(|r| r.memory as f64)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("level\tN\tk\telements\titerations\tconverged\tt_iter\tt_assembly\tt_total\tmemory_MB\terror\n");
        for (l, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{}\t{}\t{}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\t{:.3e}",
                l,
                r.points,
                r.k,
                r.elements,
                r.iterations,
                r.converged,
                r.iteration_time.as_secs_f64(),
                r.assembly_time.as_secs_f64(),
                r.total_time.as_secs_f64(),
                r.memory as f64 / 1e6,
                r.error
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
        format!(
            "iteration time ratios [{}], memory ratios [{}]\nt_iter = {:.3e} N log N (R^2 = {:.4}); memory = {:.3e} N log N (R^2 = {:.4}){}\n",
            fmt(self.time_ratios()),
            fmt(self.memory_ratios()),
            self.time_fit.a,
            self.time_fit.r_squared,
            self.memory_fit.a,
            self.memory_fit.r_squared,
            if self.truncated { "\nseries truncated at the size limit" } else { "" }
        )
    }
}

/// Pulsating unit sphere at `k0, 2 k0, 4 k0, ...` with fixed elements per
/// wavelength. `inspect` sees each assembled operator after its row is
/// measured.
pub fn run_scaling_with(
    cfg: &ScalingConfig,
    levels: usize,
    mut inspect: impl FnMut(usize, &BurtonMillerOperator<f64>),
) -> Result<ScalingSeries, SolverError> {
    let mut rows = Vec::new();
    let mut truncated = false;
    for level in 0..levels {
        let k = cfg.k0 * f64::powi(2.0, level as i32);
        let sub = icosphere_subdivisions(k, 1.0, cfg.per_wavelength);
        if 20 * sub * sub * 6 > cfg.max_points {
            log::warn!("scaling level {level} skipped: {} points exceed the limit", 120 * sub * sub);
            truncated = true;
            break;
        }
        let mesh = icosphere::<f64>(sub, 1.0);
        let mut params = SolverParams::new(cfg.epsilon);
        params.storage = cfg.storage;
        let t0 = Instant::now();
        let op = assemble_operator(&mesh, k, &params)?;
        let assembly_time = t0.elapsed();
        let n = op.num_points();
        let bc = BoundaryCondition::Neumann(vec![Complex::new(1.0, 0.0); n]);
        let sol = solve(&op, &bc, &IncidentWave::None, &params.gmres)?;
        let total_time = t0.elapsed();
        let exact = vec![pulsating_sphere_solution(k); n];
        let error = rel_error(&sol.u, &exact).expect("nonzero reference");
        let row = ScalingRow {
            k,
            elements: mesh.num_elements(),
            points: n,
            iterations: sol.stats.iterations,
            converged: sol.stats.converged,
            iteration_time: sol.stats.mean_iteration_time(),
            assembly_time,
            total_time,
            memory: op.assembly.total_bytes(),
            error,
        };
        log::info!("scaling level {level}: N {n} t_iter {:?} error {error:.3e}", row.iteration_time);
        rows.push(row);
        inspect(level, &op);
    }
    let ns: Vec<usize> = rows.iter().map(|r| r.points).collect();
    let times: Vec<f64> = rows.iter().map(|r| r.iteration_time.as_secs_f64()).collect();
    let mem: Vec<f64> = rows.iter().map(|r| r.memory as f64).collect();
    Ok(ScalingSeries {
        epsilon: cfg.epsilon,
        time_fit: fit_n_log_n(&ns, &times),
        memory_fit: fit_n_log_n(&ns, &mem),
        rows,
        truncated,
    })
}

pub fn run_scaling(cfg: &ScalingConfig, levels: usize) -> Result<ScalingSeries, SolverError> {
    run_scaling_with(cfg, levels, |_, _| {})
}
