//! Self-checks run by `willmore check`: closed-form integrals, the spectral identity of
//! the linearized operator, first-variation formulas and flat exactness.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::Serialize;

use crate::domain::{Domain, DomainChart};
use crate::error::Result;
use crate::geometry::Surface;
use crate::halfsphere::{HalfSphereGrid, HarmonicIndex, Parity, SphereFunction};
use crate::metric::{Euclidean, MetricField};
use crate::reduced::{check_analytic_integrals, INTEGRAL_NAMES};
use crate::solver::{solve_constrained, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound: Bound::AtMost, pass: value <= limit }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound: Bound::AtLeast, pass: value >= limit }
    }
}

/// ∫(ΔuΔv − 2⟨∇u,∇v⟩) over the half-sphere.
pub fn biharmonic_form(u: &SphereFunction, v: &SphereFunction) -> f64 {
    let gu = u.gradient_cartesian();
    let gv = v.gradient_cartesian();
    let g = &u.grid;
    let dot = SphereFunction::from_values(
        g,
        (0..g.len()).map(|k| (0..3).map(|c| gu[c].values[k] * gv[c].values[k]).sum()).collect(),
    )
    .expect("grid sizes agree");
    u.laplace_beltrami().mul(&v.laplace_beltrami()).integrate() - 2.0 * dot.integrate()
}

/// Largest relative defect of the form against λ_l(λ_k − 2)⟨u_k, u_l⟩ over even harmonics of
/// degree ≤ k_max, each pair scaled by λ_kλ_l‖u_k‖‖u_l‖.
pub fn eigenvalue_identity_error(grid: &Arc<HalfSphereGrid>, k_max: usize) -> f64 {
    let hs = HarmonicIndex::all_with_parity(k_max, Parity::Even);
    let samples: Vec<SphereFunction> = hs.iter().map(|h| h.sample(grid)).collect();
    let norms: Vec<f64> = samples.iter().map(|u| u.mul(u).integrate().sqrt()).collect();
    let mut worst = 0.0f64;
    for (a, ua) in samples.iter().enumerate() {
        for (b, ub) in samples.iter().enumerate() {
            let (lk, ll) = (hs[a].eigenvalue(), hs[b].eigenvalue());
            let expect = ll * (lk - 2.0) * ua.mul(ub).integrate();
            let scale = (lk * ll).max(1.0) * norms[a] * norms[b];
            worst = worst.max((biharmonic_form(ua, ub) - expect).abs() / scale);
        }
    }
    worst
}

/// Steps for the central-difference order fits.
pub const VARIATION_STEPS: [f64; 3] = [0.04, 0.02, 0.01];

#[derive(Clone, Debug, Serialize)]
pub struct VariationCheck {
    pub name: String,
    pub analytic: f64,
    pub errors: [f64; 3],
    pub order: f64,
}

fn observed_order(errors: &[f64; 3]) -> f64 {
    let xs = VARIATION_STEPS.map(f64::ln);
    let ys = errors.map(f64::ln);
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn varied(s: &Surface, phi: &SphereFunction, xi: &[SphereFunction; 3], t: f64) -> [SphereFunction; 3] {
    let g = phi.grid.clone();
    let mut out = [SphereFunction::zeros(&g), SphereFunction::zeros(&g), SphereFunction::zeros(&g)];
    for i in 0..g.n_theta() {
        for j in 0..g.n_phi() {
            let k = g.index(i, j);
            let n = s.node(i, j);
            let x = Vector3::new(xi[0].values[k], xi[1].values[k], xi[2].values[k]);
            let v = n.nu * phi.values[k] + n.push(n.frame_components(&x));
            for l in 0..3 {
                out[l].values[k] = n.pos[l] + t * v[l];
            }
        }
    }
    out
}

fn fd_check(
    name: &str,
    analytic: f64,
    functional: impl Fn(f64) -> Result<f64>,
) -> Result<VariationCheck> {
    let mut errors = [0.0; 3];
    for (e, &t) in errors.iter_mut().zip(&VARIATION_STEPS) {
        *e = ((functional(t)? - functional(-t)?) / (2.0 * t) - analytic).abs();
    }
    Ok(VariationCheck { name: name.into(), analytic, errors, order: observed_order(&errors) })
}

/// Area and Willmore first variations on a non-round graph in `metric`, against central
/// differences along exact variations f + t(φν + df(ξ)).
pub fn variation_checks(metric: Arc<dyn MetricField>, grid: &Arc<HalfSphereGrid>) -> Result<Vec<VariationCheck>> {
    let w = SphereFunction::from_fn(grid, |p| 0.04 * p.x * p.z + 0.03 * p.y * p.y - 0.02 * p.x);
    let s = Surface::radial_graph(&w, metric.clone())?;
    let phi = SphereFunction::from_fn(grid, |p| 0.5 + p.x - 0.7 * p.y * p.z + 0.3 * p.z * p.z);
    // ω × (e₁ + ½e₃) plus the tangential part of 0.2e₁
    let xi = [
        SphereFunction::from_fn(grid, |p| 0.5 * p.y + 0.2 * (1.0 - p.x * p.x)),
        SphereFunction::from_fn(grid, |p| p.z - 0.5 * p.x - 0.2 * p.x * p.y),
        SphereFunction::from_fn(grid, |p| -p.y - 0.2 * p.x * p.z),
    ];
    let zero = [SphereFunction::zeros(grid), SphereFunction::zeros(grid), SphereFunction::zeros(grid)];
    let embed = |xi: &[SphereFunction; 3], t: f64| Surface::from_embedding(varied(&s, &phi, xi, t), metric.clone());

    let mut out = Vec::new();
    let area = -s.integrate(&s.mean_curvature.mul(&phi));
    out.push(fd_check("area, normal variation", area, |t| Ok(embed(&zero, t)?.area()))?);
    let normal = s.first_variation_willmore(&phi, &zero)?;
    out.push(fd_check("willmore, normal variation", normal, |t| Ok(embed(&zero, t)?.willmore_energy()))?);
    let mixed = s.first_variation_willmore(&phi, &xi)?;
    out.push(fd_check("willmore, normal + tangential", mixed, |t| Ok(embed(&xi, t)?.willmore_energy()))?);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub lambda: f64,
    /// Multiplies every tolerance (not the order thresholds).
    pub tolerance_scale: f64,
    pub solver: SolverOptions,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { lambda: 0.1, tolerance_scale: 1.0, solver: SolverOptions::default() }
    }
}

pub const INTEGRAL_TOL: f64 = 1e-8;
pub const EIGEN_TOL: f64 = 1e-6;
pub const ORDER_MIN: f64 = 1.95;
pub const FLAT_TOL: f64 = 1e-12;

/// Every check for the point a of the domain.
pub fn run_checks(domain: &Arc<Domain>, a: &Vector3<f64>, config: &CheckConfig) -> Result<Vec<Check>> {
    let s = config.tolerance_scale;
    let grid = config.solver.grid()?;
    let chart: DomainChart = domain.chart(a)?;
    let mut out = Vec::new();

    let report = check_analytic_integrals(&chart, &grid)?;
    for k in 0..5 {
        out.push(Check::at_most(
            format!("integral {}", INTEGRAL_NAMES[k]),
            (report.computed[k] - report.expected[k]).abs(),
            INTEGRAL_TOL * s,
        ));
    }
    out.push(Check::at_most("eigenvalue identity, even k,l <= 6", eigenvalue_identity_error(&grid, 6), EIGEN_TOL * s));

    let metric: Arc<dyn MetricField> = Arc::new(chart.pullback_metric(config.lambda)?);
    for v in variation_checks(metric, &grid)? {
        out.push(Check::at_least(format!("{} (observed order)", v.name), v.order, ORDER_MIN));
    }

    let flat = solve_constrained(Arc::new(Euclidean), &config.solver)?;
    out.push(Check::at_most("flat solve, |W - 2 pi|", (flat.energy - 2.0 * PI).abs(), FLAT_TOL * s));
    out.push(Check::at_most("flat solve, max |w|", flat.w_max(), FLAT_TOL * s));
    Ok(out)
}
