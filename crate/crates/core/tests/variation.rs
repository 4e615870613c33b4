use std::sync::Arc;

use nalgebra::Vector3;
use willmore_core::domain::{Domain, DomainSpec};
use willmore_core::geometry::Surface;
use willmore_core::halfsphere::{HalfSphereGrid, SphereFunction};
use willmore_core::metric::{Euclidean, MetricField};

// Central differences against the analytic first variations, on a non-round graph
// in a curved chart metric. The error should fall like t².

const STEPS: [f64; 3] = [0.04, 0.02, 0.01];

fn chart_metric() -> Arc<dyn MetricField> {
    let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.0, 1.5] }).unwrap();
    let a = d.project(&Vector3::new(0.5, 0.2, 1.2)).unwrap();
    Arc::new(d.chart(&a).unwrap().pullback_metric(0.1).unwrap())
}

fn base(grid: &Arc<HalfSphereGrid>, metric: Arc<dyn MetricField>) -> Surface {
    let w = SphereFunction::from_fn(grid, |p| 0.04 * p.x * p.z + 0.03 * p.y * p.y - 0.02 * p.x);
    Surface::radial_graph(&w, metric).unwrap()
}

/// Embedding of f + t(φν + df(ξ)), with ξ a Cartesian tangent field on S².
fn varied(s: &Surface, phi: &SphereFunction, xi: &[SphereFunction; 3], t: f64) -> [SphereFunction; 3] {
    let g = phi.grid.clone();
    let mut out = [SphereFunction::zeros(&g), SphereFunction::zeros(&g), SphereFunction::zeros(&g)];
    for i in 0..g.n_theta() {
        for j in 0..g.n_phi() {
            let k = g.index(i, j);
            let n = s.node(i, j);
            let x = Vector3::new(xi[0].values[k], xi[1].values[k], xi[2].values[k]);
            let c = n.frame_components(&x);
            let v = n.nu * phi.values[k] + n.push(c);
            for l in 0..3 {
                out[l].values[k] = n.pos[l] + t * v[l];
            }
        }
    }
    out
}

fn observed_order(errors: &[f64]) -> f64 {
    let xs: Vec<f64> = STEPS.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn check(name: &str, analytic: f64, functional: impl Fn(f64) -> f64) {
    let errors: Vec<f64> = STEPS
        .iter()
        .map(|&t| ((functional(t) - functional(-t)) / (2.0 * t) - analytic).abs())
        .collect();
    let order = observed_order(&errors);
    assert!(order >= 1.95, "{name}: order {order:.3}, errors {errors:?}");
    assert!(errors[2] < 1e-3 * analytic.abs().max(1.0), "{name}: {errors:?}");
}

fn fields(grid: &Arc<HalfSphereGrid>) -> (SphereFunction, [SphereFunction; 3]) {
    let phi = SphereFunction::from_fn(grid, |p| 0.5 + p.x - 0.7 * p.y * p.z + 0.3 * p.z * p.z);
    // tangent to S²: ω × (e₁ + 0.5e₃) plus a gradient-type part
    let xi = [
        SphereFunction::from_fn(grid, |p| 0.5 * p.y + 0.2 * (1.0 - p.x * p.x)),
        SphereFunction::from_fn(grid, |p| p.z - 0.5 * p.x - 0.2 * p.x * p.y),
        SphereFunction::from_fn(grid, |p| -p.y - 0.2 * p.x * p.z),
    ];
    (phi, xi)
}

#[test]
fn area_variation_normal() {
    let g = HalfSphereGrid::new(32, 64).unwrap();
    let metric = chart_metric();
    let s = base(&g, metric.clone());
    let (phi, _) = fields(&g);
    let zero = [SphereFunction::zeros(&g), SphereFunction::zeros(&g), SphereFunction::zeros(&g)];
    let analytic = -s.integrate(&s.mean_curvature.mul(&phi));
    check("area", analytic, |t| Surface::from_embedding(varied(&s, &phi, &zero, t), metric.clone()).unwrap().area());
}

#[test]
fn willmore_variation_normal() {
    let g = HalfSphereGrid::new(32, 64).unwrap();
    let metric = chart_metric();
    let s = base(&g, metric.clone());
    let (phi, _) = fields(&g);
    let zero = [SphereFunction::zeros(&g), SphereFunction::zeros(&g), SphereFunction::zeros(&g)];
    let analytic = s.first_variation_willmore(&phi, &zero).unwrap();
    check("willmore normal", analytic, |t| {
        Surface::from_embedding(varied(&s, &phi, &zero, t), metric.clone()).unwrap().willmore_energy()
    });
}

#[test]
fn willmore_variation_with_tangential_part() {
    let g = HalfSphereGrid::new(32, 64).unwrap();
    let metric = chart_metric();
    let s = base(&g, metric.clone());
    let (phi, xi) = fields(&g);
    let analytic = s.first_variation_willmore(&phi, &xi).unwrap();
    check("willmore mixed", analytic, |t| {
        Surface::from_embedding(varied(&s, &phi, &xi, t), metric.clone()).unwrap().willmore_energy()
    });
}

#[test]
fn willmore_variation_flat_metric() {
    let g = HalfSphereGrid::new(32, 64).unwrap();
    let metric: Arc<dyn MetricField> = Arc::new(Euclidean);
    let s = base(&g, metric.clone());
    let (phi, xi) = fields(&g);
    let analytic = s.first_variation_willmore(&phi, &xi).unwrap();
    check("willmore flat", analytic, |t| {
        Surface::from_embedding(varied(&s, &phi, &xi, t), metric.clone()).unwrap().willmore_energy()
    });
}

#[test]
fn radial_split_recovers_the_variation_field() {
    let g = HalfSphereGrid::new(24, 48).unwrap();
    let metric = chart_metric();
    let s = base(&g, metric);
    let psi = SphereFunction::from_fn(&g, |p| 1.0 + 0.3 * p.x * p.y);
    let field = [0, 1, 2].map(|c| SphereFunction::from_fn(&g, |p| (1.0 + 0.3 * p.x * p.y) * p[c]));
    let (phi, xi) = s.split_variation(&field);
    for i in 0..g.n_theta() {
        for j in 0..g.n_phi() {
            let k = g.index(i, j);
            let n = s.node(i, j);
            let x = Vector3::new(xi[0].values[k], xi[1].values[k], xi[2].values[k]);
            let v = n.nu * phi.values[k] + n.push(n.frame_components(&x));
            let target = g.point(i, j) * psi.values[k];
            assert!((v - target).norm() < 1e-12);
        }
    }
}
