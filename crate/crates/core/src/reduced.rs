//! The reduced energy W̄(a, λ) = W(φ^{a,λ}) over the boundary S = ∂Ω, its first-order
//! expansion, landscape scans and concentration paths at critical points of H^S.

use std::f64::consts::PI;
use std::sync::Arc;

use log::{debug, info, warn};
use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{ChartMetric, Domain, DomainChart};
use crate::error::{Result, WillmoreError};
use crate::halfsphere::{HalfSphereGrid, SphereFunction};
use crate::metric::MetricField;
use crate::solver::{solve_constrained_from, ConstrainedSolution, InitialGuess, SolverOptions};

fn at_point(a: &Vector3<f64>, lambda: f64) -> impl FnOnce(WillmoreError) -> WillmoreError {
    let a = [a[0], a[1], a[2]];
    move |e| WillmoreError::AtPoint { a, lambda, source: Box::new(e) }
}

/// Solves the constrained problem in the chart at `chart.a`.
pub fn solve_in_chart(
    chart: &DomainChart,
    lambda: f64,
    options: &SolverOptions,
    guess: &InitialGuess,
) -> Result<ConstrainedSolution> {
    let ctx = at_point(&chart.a, lambda);
    let run = || -> Result<ConstrainedSolution> {
        let metric: Arc<dyn MetricField> = Arc::new(chart.pullback_metric(lambda)?);
        solve_constrained_from(metric, options, guess)
    };
    run().map_err(ctx)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReducedEnergy {
    pub a: [f64; 3],
    pub lambda: f64,
    pub energy: f64,
    pub alpha: f64,
    pub beta: [f64; 2],
    pub w_max: f64,
    pub iterations: usize,
}

impl ReducedEnergy {
    fn from_solution(a: &Vector3<f64>, lambda: f64, sol: &ConstrainedSolution) -> Self {
        ReducedEnergy {
            a: [a[0], a[1], a[2]],
            lambda,
            energy: sol.energy,
            alpha: sol.alpha,
            beta: sol.beta,
            w_max: sol.w_max(),
            iterations: sol.iterations,
        }
    }
}

/// W̄(a, λ): Willmore energy of the constrained solution in the chart metric.
pub fn reduced_energy(domain: &Arc<Domain>, a: &Vector3<f64>, lambda: f64, options: &SolverOptions) -> Result<ReducedEnergy> {
    let chart = domain.chart(a).map_err(at_point(a, lambda))?;
    let sol = solve_in_chart(&chart, lambda, options, &InitialGuess::default())?;
    Ok(ReducedEnergy::from_solution(a, lambda, &sol))
}

/// The five integrals of the first-order metric term q against their closed forms.
#[derive(Clone, Debug, Serialize)]
pub struct IntegralReport {
    pub mean_curvature: f64,
    /// ∫q(ν,ν), ∫tr q, ∫tr ∇_ν q, ∫tr ∇.q(·,ν), ∮q(ν,e₃)
    pub computed: [f64; 5],
    pub expected: [f64; 5],
    pub max_error: f64,
}

pub const INTEGRAL_NAMES: [&str; 5] = ["q(nu,nu)", "tr q", "tr grad_nu q", "tr div q(.,nu)", "boundary q(nu,e3)"];

fn bilinear(m: &Matrix3<f64>, u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    u.dot(&(m * v))
}

/// Quadrature of the q-integrals, with ν = −ω the inner normal of the half-sphere.
pub fn check_analytic_integrals(chart: &DomainChart, grid: &Arc<HalfSphereGrid>) -> Result<IntegralReport> {
    let hs = chart.shape_operator()?.mean_curvature;
    let q = chart.first_order_term(1.0)?;
    // q is linear in the point, so ∇_e q = Σ e^k q_k
    let q_at = |x: &Vector3<f64>| q.slopes[0] * x[0] + q.slopes[1] * x[1] + q.slopes[2] * x[2];
    let e = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut f = [
        SphereFunction::zeros(grid),
        SphereFunction::zeros(grid),
        SphereFunction::zeros(grid),
        SphereFunction::zeros(grid),
    ];
    for i in 0..grid.n_theta() {
        for j in 0..grid.n_phi() {
            let w = grid.point(i, j);
            let nu = -w;
            let qw = q_at(&w);
            let dq_nu = q_at(&nu);
            let k = grid.index(i, j);
            f[0].values[k] = bilinear(&qw, &nu, &nu);
            f[1].values[k] = qw.trace() - bilinear(&qw, &w, &w);
            f[2].values[k] = dq_nu.trace() - bilinear(&dq_nu, &w, &w);
            let full: f64 = e.iter().map(|ei| bilinear(&q_at(ei), ei, &nu)).sum();
            f[3].values[k] = full - bilinear(&q_at(&w), &w, &nu);
        }
    }
    let mut computed = [0.0; 5];
    for k in 0..4 {
        computed[k] = f[k].integrate();
    }
    let ring: Vec<f64> = (0..grid.n_phi())
        .map(|j| {
            let (w, _, _) = grid.equator_point(j);
            bilinear(&q_at(&w), &(-w), &Vector3::z())
        })
        .collect();
    computed[4] = ring.iter().sum::<f64>() * grid.phi_step();
    let c = PI / 2.0 * hs;
    let expected = [c, -c, c, -c, -2.0 * c];
    let max_error = computed.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(IntegralReport { mean_curvature: hs, computed, expected, max_error })
}

/// First-order coefficient of W̄ in λ assembled from the five integrals; equals −πH^S(a).
pub fn first_order_energy(chart: &DomainChart, grid: &Arc<HalfSphereGrid>) -> Result<f64> {
    let r = check_analytic_integrals(chart, grid)?;
    let [i1, i2, i3, i4, i5] = r.computed;
    Ok(-0.5 * i2 + i1 + i4 - 0.5 * i3 + i5)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionRow {
    pub lambda: f64,
    pub energy: f64,
    /// (W̄ − 2π)/λ
    pub slope: f64,
    /// E(λ) = (W̄ − 2π)/λ + πH^S(a)
    pub defect: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub mean_curvature: f64,
    pub rows: Vec<ExpansionRow>,
    /// Least-squares C in E(λ) ≈ Cλ.
    pub fitted_c: f64,
    /// (max − min)/|mean| of E(λ)/λ.
    pub c_variation: f64,
    /// Richardson estimate 2s(λ) − s(2λ) of the slope at the smallest λ, when 2λ is present.
    pub extrapolated_slope: Option<f64>,
}

/// W̄ over decreasing λ with continuation; the previous w, rescaled, seeds the next solve.
pub fn expansion(chart: &DomainChart, lambdas: &[f64], options: &SolverOptions) -> Result<ExpansionReport> {
    let hs = chart.shape_operator()?.mean_curvature;
    let mut ls: Vec<f64> = lambdas.to_vec();
    ls.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ls.dedup();
    if ls.is_empty() || ls.iter().any(|l| !(*l > 0.0)) {
        return Err(WillmoreError::Config("expansion needs positive lambda values".into()));
    }
    let mut rows = Vec::new();
    let mut guess = InitialGuess::default();
    let mut prev_lambda = None;
    for &l in &ls {
        if let (Some(w), Some(pl)) = (&guess.w, prev_lambda) {
            guess.w = Some(w.scale(l / pl));
            guess.multipliers.iter_mut().for_each(|m| *m *= l / pl);
        }
        let sol = solve_in_chart(chart, l, options, &guess)?;
        let slope = (sol.energy - 2.0 * PI) / l;
        let defect = slope + PI * hs;
        rows.push(ExpansionRow { lambda: l, energy: sol.energy, slope, defect, ratio: defect / l });
        guess = InitialGuess { w: Some(sol.w.clone()), multipliers: [sol.alpha, sol.beta[0], sol.beta[1]] };
        prev_lambda = Some(l);
    }
    let num: f64 = rows.iter().map(|r| r.defect * r.lambda).sum();
    let den: f64 = rows.iter().map(|r| r.lambda * r.lambda).sum();
    let fitted_c = num / den;
    let (lo, hi, sum) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(a, b, s), r| (a.min(r.ratio), b.max(r.ratio), s + r.ratio));
    let mean = sum / rows.len() as f64;
    let c_variation = if mean != 0.0 { (hi - lo) / mean.abs() } else { 0.0 };
    let last = rows.last().unwrap();
    let extrapolated_slope = rows
        .iter()
        .find(|r| (r.lambda - 2.0 * last.lambda).abs() <= 1e-12 * r.lambda)
        .map(|r| 2.0 * last.slope - r.slope);
    Ok(ExpansionReport { mean_curvature: hs, rows, fitted_c, c_variation, extrapolated_slope })
}

/// Largest λ in {0.2, 0.1, 0.05, …} (below the admissible bound) at which the solver converges.
pub fn converging_lambda_max(chart: &DomainChart, options: &SolverOptions) -> Result<f64> {
    let bound = chart.domain.lambda_max();
    let mut l = 0.2;
    while l > 1e-3 {
        if l <= bound {
            match solve_in_chart(chart, l, options, &InitialGuess::default()) {
                Ok(_) => return Ok(l),
                Err(e) => debug!("lambda {l} rejected: {e}"),
            }
        }
        l *= 0.5;
    }
    Err(WillmoreError::Degenerate("no admissible lambda converged".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct MeshPoint {
    pub index: usize,
    pub row: usize,
    pub theta: f64,
    pub phi: f64,
    pub position: [f64; 3],
}

/// Latitude-longitude sample of S: rows θ_i = iπ/n_lat for i = 0..=n_lat, so both poles
/// (collapsed to single points) and, for even n_lat, the equator are included.
#[derive(Clone, Debug)]
pub struct SurfaceMesh {
    pub n_lat: usize,
    pub n_lon: usize,
    pub points: Vec<MeshPoint>,
    pub neighbors: Vec<Vec<usize>>,
}

impl SurfaceMesh {
    pub fn new(domain: &Domain, n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 3 {
            return Err(WillmoreError::Config(format!("mesh {n_lat}x{n_lon} too small (need at least 2x3)")));
        }
        if !domain.is_bounded() {
            return Err(WillmoreError::Config("landscape meshes need a bounded domain".into()));
        }
        let mut points = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for i in 0..=n_lat {
            let theta = PI * i as f64 / n_lat as f64;
            let count = if i == 0 || i == n_lat { 1 } else { n_lon };
            let mut row = Vec::new();
            for j in 0..count {
                let phi = 2.0 * PI * j as f64 / n_lon as f64;
                let p = domain.surface_point(theta, phi)?;
                let scale = domain.gradient(&p).norm().max(1.0);
                if domain.level(&p).abs() > 1e-10 * scale {
                    return Err(WillmoreError::Domain(format!("mesh point {p:?} is off the boundary")));
                }
                let index = points.len();
                points.push(MeshPoint { index, row: i, theta, phi, position: [p[0], p[1], p[2]] });
                row.push(index);
            }
            rows.push(row);
        }
        let mut neighbors = vec![Vec::new(); points.len()];
        for i in 0..=n_lat {
            for (j, &k) in rows[i].iter().enumerate() {
                let nb = &mut neighbors[k];
                if rows[i].len() > 1 {
                    let m = rows[i].len();
                    nb.push(rows[i][(j + m - 1) % m]);
                    nb.push(rows[i][(j + 1) % m]);
                }
                for adj in [i.wrapping_sub(1), i + 1] {
                    if adj > n_lat {
                        continue;
                    }
                    if rows[adj].len() == 1 {
                        nb.push(rows[adj][0]);
                    } else if rows[i].len() == 1 {
                        nb.extend(rows[adj].iter().copied());
                    } else {
                        nb.push(rows[adj][j]);
                    }
                }
            }
        }
        Ok(SurfaceMesh { n_lat, n_lon, points, neighbors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.points[k].position)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LandscapeSample {
    pub index: usize,
    pub a: [f64; 3],
    pub mean_curvature: f64,
    pub energy: Option<f64>,
    pub alpha: f64,
    pub beta: [f64; 2],
    /// Tangential gradient of W̄ from the mesh neighbours.
    pub grad: [f64; 3],
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    Min,
    Max,
    Saddle,
    Degenerate,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub index: usize,
    pub a: [f64; 3],
    pub energy: f64,
    pub kind: CriticalKind,
    pub hessian_eigenvalues: [f64; 2],
    pub beta_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyLandscape {
    pub lambda: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub samples: Vec<LandscapeSample>,
    pub critical_points: Vec<CriticalPoint>,
    pub min_index: Option<usize>,
    pub max_index: Option<usize>,
    pub spread: f64,
    /// Spread below DEGENERATE_SPREAD·|W̄|: no isolated critical points can be resolved.
    pub degenerate: bool,
    /// Spearman correlation of W̄ with −H^S over the converged samples (ties within RANK_TIE).
    pub rank_correlation: f64,
    pub failures: usize,
}

/// Options for landscape scans.
#[derive(Clone, Debug)]
pub struct ScanOptions {
    pub solver: SolverOptions,
    pub jobs: usize,
    /// Classify mesh-local extrema by a finite-difference Hessian (extra solves).
    pub classify: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            solver: SolverOptions::default(),
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            classify: true,
        }
    }
}

pub const DEGENERATE_SPREAD: f64 = 1e-7;
/// Relative energy difference below which two samples are ranked as tied.
pub const RANK_TIE: f64 = 1e-9;

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| WillmoreError::Config(format!("thread pool: {e}")))
}

/// Finite-difference step for surface derivatives of W̄ (1e-3 · diam Ω).
pub fn surface_step(domain: &Domain) -> f64 {
    if domain.is_bounded() {
        1e-3 * domain.diameter()
    } else {
        1e-3
    }
}

pub fn scan_landscape(domain: &Arc<Domain>, lambda: f64, mesh: &SurfaceMesh, options: &ScanOptions) -> Result<EnergyLandscape> {
    options.solver.validate()?;
    if !(lambda > 0.0 && lambda <= domain.lambda_max()) {
        return Err(WillmoreError::Range(format!(
            "lambda = {lambda} outside (0, {:.6}]",
            domain.lambda_max()
        )));
    }
    let pool = thread_pool(options.jobs)?;
    let evaluate = |k: usize| -> LandscapeSample {
        let a = mesh.position(k);
        let hs = domain.chart(&a).and_then(|c| c.shape_operator()).map(|s| s.mean_curvature).unwrap_or(f64::NAN);
        let mut sample = LandscapeSample {
            index: k,
            a: mesh.points[k].position,
            mean_curvature: hs,
            energy: None,
            alpha: f64::NAN,
            beta: [f64::NAN; 2],
            grad: [f64::NAN; 3],
            converged: false,
            error: None,
        };
        match reduced_energy(domain, &a, lambda, &options.solver) {
            Ok(r) => {
                sample.energy = Some(r.energy);
                sample.alpha = r.alpha;
                sample.beta = r.beta;
                sample.converged = true;
            }
            Err(e) => {
                warn!("landscape point {k}: {e}");
                sample.error = Some(e.to_string());
            }
        }
        sample
    };
    let mut samples: Vec<LandscapeSample> = pool.install(|| (0..mesh.len()).into_par_iter().map(evaluate).collect());
    let failures = samples.iter().filter(|s| !s.converged).count();
    for k in 0..samples.len() {
        samples[k].grad = mesh_gradient(domain, mesh, &samples, k);
    }
    let converged: Vec<&LandscapeSample> = samples.iter().filter(|s| s.converged).collect();
    let energies: Vec<f64> = converged.iter().map(|s| s.energy.unwrap()).collect();
    let neg_h: Vec<f64> = converged.iter().map(|s| -s.mean_curvature).collect();
    let pick = |better: fn(f64, f64) -> bool| {
        converged
            .iter()
            .fold(None::<(usize, f64)>, |acc, s| {
                let e = s.energy.unwrap();
                match acc {
                    Some((_, b)) if !better(e, b) => acc,
                    _ => Some((s.index, e)),
                }
            })
            .map(|(i, _)| i)
    };
    let min_index = pick(|a, b| a < b);
    let max_index = pick(|a, b| a > b);
    let spread = match (min_index, max_index) {
        (Some(i), Some(j)) => samples[j].energy.unwrap() - samples[i].energy.unwrap(),
        _ => f64::NAN,
    };
    let scale = energies.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let h_scale = neg_h.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let rank_correlation =
        spearman_with_tolerance(&energies, &neg_h, RANK_TIE * scale, 1e-12 * h_scale);
    let degenerate = spread.is_finite() && spread <= DEGENERATE_SPREAD * scale;
    let mut landscape = EnergyLandscape {
        lambda,
        n_lat: mesh.n_lat,
        n_lon: mesh.n_lon,
        samples,
        critical_points: Vec::new(),
        min_index,
        max_index,
        spread,
        degenerate,
        rank_correlation,
        failures,
    };
    if options.classify {
        landscape.critical_points = classify_critical_points(domain, mesh, &landscape, &pool, &options.solver)?;
    }
    info!(
        "landscape: {} points, {} failures, spread {:.3e}, rank correlation {:.6}",
        mesh.len(),
        failures,
        spread,
        rank_correlation
    );
    Ok(landscape)
}

/// Least-squares tangential gradient from neighbour differences.
fn mesh_gradient(domain: &Domain, mesh: &SurfaceMesh, samples: &[LandscapeSample], k: usize) -> [f64; 3] {
    let Some(e0) = samples[k].energy else { return [f64::NAN; 3] };
    let a = mesh.position(k);
    let n = domain.normal(&a);
    let t1 = {
        let e = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        (e - n * n.dot(&e)).normalize()
    };
    let t2 = n.cross(&t1);
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for &j in &mesh.neighbors[k] {
        let Some(ej) = samples[j].energy else { continue };
        let d = mesh.position(j) - a;
        let row = Vector2::new(d.dot(&t1), d.dot(&t2));
        ata += row * row.transpose();
        atb += row * (ej - e0);
    }
    match ata.try_inverse() {
        Some(inv) => {
            let g = inv * atb;
            let v = t1 * g[0] + t2 * g[1];
            [v[0], v[1], v[2]]
        }
        None => [f64::NAN; 3],
    }
}

/// Hessian of W̄∘f^a at x = 0 in chart coordinates, central differences with step h.
fn energy_hessian(chart: &DomainChart, lambda: f64, h: f64, center: f64, options: &SolverOptions) -> Result<Matrix2<f64>> {
    let e = |x: [f64; 2]| -> Result<f64> {
        let p = chart.surface_point(x)?;
        let c = chart.domain.chart(&p)?;
        Ok(solve_in_chart(&c, lambda, options, &InitialGuess::default())?.energy)
    };
    let mut m = Matrix2::zeros();
    for k in 0..2 {
        let mut x = [0.0; 2];
        x[k] = h;
        let plus = e(x)?;
        x[k] = -h;
        let minus = e(x)?;
        m[(k, k)] = (plus - 2.0 * center + minus) / (h * h);
    }
    let pp = e([h, h])?;
    let pm = e([h, -h])?;
    let mp = e([-h, h])?;
    let mm = e([-h, -h])?;
    m[(0, 1)] = (pp - pm - mp + mm) / (4.0 * h * h);
    m[(1, 0)] = m[(0, 1)];
    Ok(m)
}

fn classify_critical_points(
    domain: &Arc<Domain>,
    mesh: &SurfaceMesh,
    landscape: &EnergyLandscape,
    pool: &rayon::ThreadPool,
    options: &SolverOptions,
) -> Result<Vec<CriticalPoint>> {
    let samples = &landscape.samples;
    let spread = landscape.spread;
    if !spread.is_finite() {
        return Ok(Vec::new());
    }
    let tie = 1e-9 * samples.iter().filter_map(|s| s.energy).fold(0.0f64, |a, e| a.max(e.abs()));
    let mut candidates = Vec::new();
    for s in samples.iter().filter(|s| s.converged) {
        let e = s.energy.unwrap();
        let nb: Vec<f64> = mesh.neighbors[s.index].iter().filter_map(|&j| samples[j].energy).collect();
        if nb.is_empty() {
            continue;
        }
        let is_min = nb.iter().all(|&v| e <= v + tie);
        let is_max = nb.iter().all(|&v| e >= v - tie);
        if is_min || is_max {
            candidates.push(s.index);
        }
    }
    // a flat landscape has every point as a candidate; keep only the recorded extrema
    if landscape.degenerate || candidates.len() == samples.len() {
        candidates = [landscape.min_index, landscape.max_index].into_iter().flatten().collect();
        candidates.dedup();
    }
    if landscape.degenerate {
        return Ok(candidates
            .into_iter()
            .map(|k| {
                let s = &samples[k];
                CriticalPoint {
                    index: k,
                    a: s.a,
                    energy: s.energy.unwrap(),
                    kind: CriticalKind::Degenerate,
                    hessian_eigenvalues: [f64::NAN; 2],
                    beta_sum: s.beta[0].abs() + s.beta[1].abs(),
                }
            })
            .collect());
    }
    let h = surface_step(domain);
    let threshold = 1e-6 * spread.abs();
    let lambda = landscape.lambda;
    let classify = |k: usize| -> Result<CriticalPoint> {
        let s = &samples[k];
        let a = mesh.position(k);
        let chart = domain.chart(&a)?;
        let energy = s.energy.unwrap();
        let hess = energy_hessian(&chart, lambda, h, energy, options)?;
        let eig = SymmetricEigen::new(hess).eigenvalues;
        let (l0, l1) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
        let kind = if l0.abs() <= threshold || l1.abs() <= threshold {
            CriticalKind::Degenerate
        } else if l0 > 0.0 {
            CriticalKind::Min
        } else if l1 < 0.0 {
            CriticalKind::Max
        } else {
            CriticalKind::Saddle
        };
        Ok(CriticalPoint {
            index: k,
            a: s.a,
            energy,
            kind,
            hessian_eigenvalues: [l0, l1],
            beta_sum: s.beta[0].abs() + s.beta[1].abs(),
        })
    };
    pool.install(|| candidates.par_iter().map(|&k| classify(k)).collect())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    spearman_with_tolerance(x, y, 0.0, 0.0)
}

/// Spearman correlation where values closer than the tolerance (chained through sorted
/// neighbours) count as ties, so solver noise does not order symmetric copies.
pub fn spearman_with_tolerance(x: &[f64], y: &[f64], tol_x: f64, tol_y: f64) -> f64 {
    assert_eq!(x.len(), y.len());
    pearson(&ranks(x, tol_x), &ranks(y, tol_y))
}

fn ranks(v: &[f64], tol: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] - v[idx[j]] <= tol {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// v(a, λ) = λ⁻¹∇_a W̄ in the frame (v₁, v₂) of `chart`, by central differences of
/// W̄∘f^a; v(a, 0) = −π∇H^S(a).
pub fn desingularized_gradient(chart: &DomainChart, lambda: f64, options: &SolverOptions) -> Result<Vector2<f64>> {
    if lambda == 0.0 {
        return Ok(-PI * chart.shape_operator()?.grad_hs);
    }
    chart_gradient(chart, [0.0, 0.0], lambda, options).map(|g| g / lambda)
}

/// ∇(W̄∘f^a) at chart coordinates x.
fn chart_gradient(chart: &DomainChart, x: [f64; 2], lambda: f64, options: &SolverOptions) -> Result<Vector2<f64>> {
    let h = surface_step(&chart.domain);
    let e = |y: [f64; 2]| -> Result<f64> {
        let p = chart.surface_point(y)?;
        let c = chart.domain.chart(&p)?;
        Ok(solve_in_chart(&c, lambda, options, &InitialGuess::default())?.energy)
    };
    let mut g = Vector2::zeros();
    for k in 0..2 {
        let mut p = x;
        p[k] += h;
        let mut m = x;
        m[k] -= h;
        g[k] = (e(p)? - e(m)?) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Clone, Debug, Serialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub a: [f64; 3],
    /// |∇W̄|/λ at the accepted point.
    pub grad_check: f64,
    pub corrector_iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationPath {
    /// Decreasing in λ.
    pub points: Vec<PathPoint>,
    pub limit: [f64; 3],
    pub hessian_condition: f64,
    /// max |γ(λ) − γ(0)|
    pub max_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct PathOptions {
    pub steps: usize,
    /// Accept a point when |∇W̄| ≤ tol·λ.
    pub tol: f64,
    pub max_corrector: usize,
    pub max_bisections: usize,
    pub solver: SolverOptions,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions { steps: 5, tol: 1e-6, max_corrector: 8, max_bisections: 4, solver: SolverOptions::default() }
    }
}

const DEGENERACY_TOL: f64 = 1e-6;

/// Follows v(γ(λ), λ) = 0 from the critical point a₀ of H^S up to λ_max.
pub fn trace_concentration_path(
    domain: &Arc<Domain>,
    a0: &Vector3<f64>,
    lambda_max: f64,
    options: &PathOptions,
) -> Result<ConcentrationPath> {
    if !(lambda_max > 0.0 && lambda_max <= domain.lambda_max()) {
        return Err(WillmoreError::Range(format!(
            "lambda_max = {lambda_max} outside (0, {:.6}]",
            domain.lambda_max()
        )));
    }
    if options.steps == 0 {
        return Err(WillmoreError::Config("path needs at least one step".into()));
    }
    let a0 = domain.project(a0)?;
    let mut chart = domain.chart(&a0)?;
    let hess = chart.mean_curvature_hessian()?;
    let eig = SymmetricEigen::new(hess).eigenvalues;
    let (emin, emax) = (eig[0].abs().min(eig[1].abs()), eig[0].abs().max(eig[1].abs()));
    let scale = chart.shape_operator()?.mean_curvature.abs().max(1.0);
    let condition = if emin > 0.0 { emax / emin } else { f64::INFINITY };
    if emin <= DEGENERACY_TOL * scale {
        return Err(WillmoreError::Degenerate(format!(
            "Hessian of H^S at a0 is degenerate (eigenvalues {:.3e}, {:.3e}; condition {condition:.3e})",
            eig[0], eig[1]
        )));
    }
    // refine a₀ to a critical point of H^S
    for _ in 0..5 {
        let g = chart.shape_operator()?.grad_hs;
        if g.norm() < 1e-9 {
            break;
        }
        let dx = chart.mean_curvature_hessian()?.try_inverse().unwrap_or_else(Matrix2::zeros) * g;
        let p = chart.surface_point([-dx[0], -dx[1]])?;
        chart = domain.chart(&p)?;
    }
    if chart.shape_operator()?.grad_hs.norm() > 1e-5 * scale {
        return Err(WillmoreError::Range("a0 is not a critical point of the boundary mean curvature".into()));
    }
    let base = chart.clone();
    let jac = -PI * base.mean_curvature_hessian()?;
    let jac_inv = jac.try_inverse().ok_or_else(|| WillmoreError::Degenerate("singular path Jacobian".into()))?;
    let v = |x: [f64; 2], l: f64| -> Result<Vector2<f64>> { Ok(chart_gradient(&base, x, l, &options.solver)? / l) };

    let mut points = Vec::new();
    let mut x = [0.0, 0.0];
    let mut prev: Option<([f64; 2], f64)> = None;
    let mut l_done = 0.0;
    let dl0 = lambda_max / options.steps as f64;
    let mut dl = dl0;
    let mut bisections = 0;
    while l_done < lambda_max * (1.0 - 1e-12) {
        let l = (l_done + dl).min(lambda_max);
        // secant predictor
        let mut y = match prev {
            Some((xp, lp)) if l_done > lp => {
                let s = (l - l_done) / (l_done - lp);
                [x[0] + s * (x[0] - xp[0]), x[1] + s * (x[1] - xp[1])]
            }
            _ => x,
        };
        let mut accepted = None;
        for it in 0..=options.max_corrector {
            let r = match v(y, l) {
                Ok(r) => r,
                Err(e) => {
                    debug!("corrector evaluation failed at λ = {l}: {e}");
                    break;
                }
            };
            if r.norm() <= options.tol {
                accepted = Some((r.norm(), it));
                break;
            }
            if it == options.max_corrector {
                break;
            }
            let d = jac_inv * r;
            y = [y[0] - d[0], y[1] - d[1]];
        }
        match accepted {
            Some((check, iters)) => {
                let p = base.surface_point(y)?;
                points.push(PathPoint { lambda: l, a: [p[0], p[1], p[2]], grad_check: check, corrector_iterations: iters });
                prev = Some((x, l_done));
                x = y;
                l_done = l;
                dl = dl0;
                bisections = 0;
            }
            None => {
                bisections += 1;
                if bisections > options.max_bisections {
                    return Err(WillmoreError::NotConverged { iterations: options.max_corrector, residual: f64::NAN });
                }
                dl *= 0.5;
            }
        }
    }
    points.reverse();
    let limit = base.a;
    let max_deviation = points
        .iter()
        .map(|p| (Vector3::from(p.a) - limit).norm())
        .fold(0.0, f64::max);
    Ok(ConcentrationPath { points, limit: [limit[0], limit[1], limit[2]], hessian_condition: condition, max_deviation })
}

/// The metric of the chart at a with scale λ, for callers that need it directly.
pub fn chart_metric(domain: &Arc<Domain>, a: &Vector3<f64>, lambda: f64) -> Result<ChartMetric> {
    domain.chart(a)?.pullback_metric(lambda)
}
