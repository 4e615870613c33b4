use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use willmore_core::domain::{Domain, DomainSpec};
use willmore_core::halfsphere::HalfSphereGrid;
use willmore_core::reduced::*;
use willmore_core::solver::SolverOptions;

fn ellipsoid() -> Arc<Domain> {
    Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.0, 1.5] }).unwrap()
}

fn coarse() -> SolverOptions {
    SolverOptions { n_theta: 16, n_phi: 32, ..Default::default() }
}

#[test]
fn half_space_energy_is_round() {
    let d = Domain::new(DomainSpec::HalfSpace { height: 0.0 }).unwrap();
    let r = reduced_energy(&d, &Vector3::new(0.3, -0.2, 0.0), 0.1, &coarse()).unwrap();
    assert!((r.energy - 2.0 * PI).abs() < 1e-12);
    assert!(r.w_max < 1e-12);
}

#[test]
fn ellipsoid_integrals_match_mean_curvature() {
    let d = ellipsoid();
    let g = HalfSphereGrid::new(32, 64).unwrap();
    for a in [Vector3::new(0.0, 0.0, 1.5), d.project(&Vector3::new(0.6, 0.3, 1.0)).unwrap()] {
        let chart = d.chart(&a).unwrap();
        let r = check_analytic_integrals(&chart, &g).unwrap();
        assert!((r.mean_curvature - d.mean_curvature(&a)).abs() < 1e-12);
        assert!(r.max_error < 1e-8, "{r:?}");
        let first = first_order_energy(&chart, &g).unwrap();
        assert!((first + PI * r.mean_curvature).abs() < 1e-8);
    }
}

#[test]
fn ball_expansion_has_stable_second_order_term() {
    let d = Domain::new(DomainSpec::unit_ball()).unwrap();
    let chart = d.chart(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
    let r = expansion(&chart, &[0.05, 0.1, 0.2], &SolverOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.rows[0].lambda > r.rows[2].lambda);
    assert!(r.c_variation < 0.3, "{r:?}");
    let s = r.extrapolated_slope.unwrap();
    assert!((s + 2.0 * PI).abs() < 0.02 * 2.0 * PI, "{s}");
}

#[test]
fn desingularized_gradient_tends_to_mean_curvature_gradient() {
    let d = ellipsoid();
    let a = d.project(&Vector3::new(0.7, 0.0, 1.0)).unwrap();
    let chart = d.chart(&a).unwrap();
    let v0 = desingularized_gradient(&chart, 0.0, &coarse()).unwrap();
    assert!(v0.norm() > 0.1);
    let err: Vec<f64> = [0.1, 0.05]
        .iter()
        .map(|&l| (desingularized_gradient(&chart, l, &coarse()).unwrap() - v0).norm())
        .collect();
    // first-order convergence in λ
    let ratio = err[0] / err[1];
    assert!(ratio > 1.6 && ratio < 2.5, "{err:?}");
    assert!(err[1] < 0.2 * v0.norm(), "{err:?} vs {}", v0.norm());
}

#[test]
fn spread_halves_with_lambda() {
    let d = ellipsoid();
    let mesh = SurfaceMesh::new(&d, 4, 4).unwrap();
    let opts = ScanOptions { solver: coarse(), jobs: 2, classify: false };
    let s1 = scan_landscape(&d, 0.1, &mesh, &opts).unwrap();
    let s2 = scan_landscape(&d, 0.05, &mesh, &opts).unwrap();
    assert_eq!(s1.failures + s2.failures, 0);
    let ratio = s1.spread / s2.spread;
    assert!((ratio - 2.0).abs() < 0.4, "{ratio}");
    assert!(s1.rank_correlation > 0.99);
    assert!(!s1.degenerate);
}

#[test]
fn scans_do_not_depend_on_job_count() {
    let d = ellipsoid();
    let mesh = SurfaceMesh::new(&d, 2, 4).unwrap();
    let one = scan_landscape(&d, 0.1, &mesh, &ScanOptions { solver: coarse(), jobs: 1, classify: false }).unwrap();
    let three = scan_landscape(&d, 0.1, &mesh, &ScanOptions { solver: coarse(), jobs: 3, classify: false }).unwrap();
    let e1: Vec<_> = one.samples.iter().map(|s| s.energy).collect();
    let e3: Vec<_> = three.samples.iter().map(|s| s.energy).collect();
    assert_eq!(e1, e3);
}

#[test]
fn ellipsoid_pole_path_is_stationary() {
    let d = ellipsoid();
    let opts = PathOptions { steps: 2, solver: coarse(), ..Default::default() };
    let path = trace_concentration_path(&d, &Vector3::new(0.0, 0.0, 1.5), 0.1, &opts).unwrap();
    assert_eq!(path.points.len(), 2);
    assert!(path.points[0].lambda > path.points[1].lambda);
    assert!(path.max_deviation <= 1e-6, "{path:?}");
}

#[test]
fn ball_path_is_degenerate() {
    let d = Domain::new(DomainSpec::unit_ball()).unwrap();
    let err = trace_concentration_path(&d, &Vector3::new(0.0, 0.0, 1.0), 0.1, &PathOptions::default()).unwrap_err();
    assert!(err.to_string().contains("degenerate"), "{err}");
}

#[test]
fn mesh_rejects_unbounded_domains() {
    let d = Domain::new(DomainSpec::HalfSpace { height: 0.0 }).unwrap();
    assert!(SurfaceMesh::new(&d, 4, 8).is_err());
    assert!(SurfaceMesh::new(&ellipsoid(), 1, 8).is_err());
}
