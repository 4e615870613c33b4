//! Geodesics, the exponential map and the two-dimensional barycenter.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Result, WillmoreError};
use crate::geometry::Surface;
use crate::halfsphere::SphereFunction;
use crate::metric::{gamma_apply, MetricField};

pub const DEFAULT_GEODESIC_STEPS: usize = 64;
pub const EXP_FD_STEP: f64 = 1e-5;
const BARYCENTER_TOL: f64 = 1e-10;
const BARYCENTER_MAX_ITER: usize = 25;
const EXP_INVERSE_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug)]
pub struct GeodesicProblem {
    pub x: Vector3<f64>,
    pub v: Vector3<f64>,
    pub n_steps: usize,
}

impl GeodesicProblem {
    pub fn new(x: Vector3<f64>, v: Vector3<f64>) -> Self {
        GeodesicProblem { x, v, n_steps: DEFAULT_GEODESIC_STEPS }
    }
}

/// Samples of position and velocity at t = k/n_steps.
#[derive(Clone, Debug)]
pub struct GeodesicCurve {
    pub points: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
}

fn outside_box(p: &Vector3<f64>) -> bool {
    (p[0] * p[0] + p[1] * p[1]).sqrt() >= 2.0 || p[2].abs() >= 2.0 || !p.iter().all(|v| v.is_finite())
}

/// RK4 for c″ + Γ(c)(c′, c′) = 0 on [0, 1].
pub fn shoot_geodesic(metric: &dyn MetricField, problem: &GeodesicProblem) -> Result<GeodesicCurve> {
    let n = problem.n_steps.max(1);
    let h = 1.0 / n as f64;
    let rhs = |x: &Vector3<f64>, v: &Vector3<f64>| -> Vector3<f64> { -gamma_apply(&metric.christoffel(x), v, v) };
    let mut x = problem.x;
    let mut v = problem.v;
    let mut points = Vec::with_capacity(n + 1);
    let mut velocities = Vec::with_capacity(n + 1);
    points.push(x);
    velocities.push(v);
    for step in 0..n {
        let k1x = v;
        let k1v = rhs(&x, &v);
        let x2 = x + k1x * (0.5 * h);
        let v2 = v + k1v * (0.5 * h);
        let k2x = v2;
        let k2v = rhs(&x2, &v2);
        let x3 = x + k2x * (0.5 * h);
        let v3 = v + k2v * (0.5 * h);
        let k3x = v3;
        let k3v = rhs(&x3, &v3);
        let x4 = x + k3x * h;
        let v4 = v + k3v * h;
        let k4x = v4;
        let k4v = rhs(&x4, &v4);
        x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
        if outside_box(&x) {
            return Err(WillmoreError::GeodesicEscape { step: step + 1 });
        }
        points.push(x);
        velocities.push(v);
    }
    Ok(GeodesicCurve { points, velocities })
}

/// exp_x(v) = c(1).
pub fn exp_map(metric: &dyn MetricField, x: &Vector3<f64>, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    if let Some(dev) = metric.developing_map() {
        let y = dev.develop(x) + dev.develop_jacobian(x) * v;
        return Ok(dev.develop_inverse(&y));
    }
    shoot(metric, x, v)
}

fn shoot(metric: &dyn MetricField, x: &Vector3<f64>, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    let curve = shoot_geodesic(metric, &GeodesicProblem::new(*x, *v))?;
    Ok(*curve.points.last().expect("at least one sample"))
}

/// ∂exp_x(v)/∂v by central differences.
fn exp_dv(metric: &dyn MetricField, x: &Vector3<f64>, v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let mut j = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = EXP_FD_STEP;
        let d = (shoot(metric, x, &(v + e))? - shoot(metric, x, &(v - e))?) / (2.0 * EXP_FD_STEP);
        j.set_column(k, &d);
    }
    Ok(j)
}

/// ∂exp_x(v)/∂x by central differences.
fn exp_dx(metric: &dyn MetricField, x: &Vector3<f64>, v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let mut j = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = EXP_FD_STEP;
        let d = (shoot(metric, &(x + e), v)? - shoot(metric, &(x - e), v)?) / (2.0 * EXP_FD_STEP);
        j.set_column(k, &d);
    }
    Ok(j)
}

/// Newton solve of exp_x(v) = p from v₀ = p − x; returns v and the final ∂exp/∂v.
fn exp_inverse_newton(metric: &dyn MetricField, x: &Vector3<f64>, p: &Vector3<f64>) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let mut v = p - x;
    let scale = 1.0 + p.norm();
    for _ in 0..30 {
        let r = shoot(metric, x, &v)? - p;
        let j = exp_dv(metric, x, &v)?;
        if r.norm() <= EXP_INVERSE_TOL * scale {
            return Ok((v, j));
        }
        let dv = j
            .lu()
            .solve(&r)
            .ok_or_else(|| WillmoreError::Singular("exp_x is not locally invertible (injectivity radius)".into()))?;
        v -= dv;
        if v.norm() >= 1.5 {
            return Err(WillmoreError::Range(format!("exp inverse left |v| < 3/2 (|v| = {:.4})", v.norm())));
        }
    }
    let r = (shoot(metric, x, &v)? - p).norm();
    Err(WillmoreError::NotConverged { iterations: 30, residual: r })
}

/// v with exp_x(v) = p.
pub fn exp_inverse(metric: &dyn MetricField, x: &Vector3<f64>, p: &Vector3<f64>) -> Result<Vector3<f64>> {
    if let Some(dev) = metric.developing_map() {
        return closed_inverse(dev.develop_jacobian(x), dev.develop(p) - dev.develop(x));
    }
    Ok(exp_inverse_newton(metric, x, p)?.0)
}

fn closed_inverse(jac: Matrix3<f64>, d: Vector3<f64>) -> Result<Vector3<f64>> {
    jac.lu().solve(&d).ok_or_else(|| WillmoreError::Singular("developing map Jacobian".into()))
}

/// exp_x⁻¹(p) with its derivatives in x and in p.
#[derive(Clone, Copy, Debug)]
pub struct ExpInverseJet {
    pub v: Vector3<f64>,
    pub dx: Matrix3<f64>,
    pub dp: Matrix3<f64>,
}

pub fn exp_inverse_jet(metric: &dyn MetricField, x: &Vector3<f64>, p: &Vector3<f64>) -> Result<ExpInverseJet> {
    if let Some(dev) = metric.developing_map() {
        let jx = dev.develop_jacobian(x);
        let jx_inv = jx.try_inverse().ok_or_else(|| WillmoreError::Singular("developing map Jacobian".into()))?;
        let v = jx_inv * (dev.develop(p) - dev.develop(x));
        let dp = jx_inv * dev.develop_jacobian(p);
        // d/dx [DF(x)⁻¹(F(p) − F(x))] = −I − Γ(x)(·, v)
        let gamma = metric.christoffel(x);
        let mut dx = -Matrix3::identity();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            let col = gamma_apply(&gamma, &e, &v);
            for r in 0..3 {
                dx[(r, k)] -= col[r];
            }
        }
        return Ok(ExpInverseJet { v, dx, dp });
    }
    let (v, jv) = exp_inverse_newton(metric, x, p)?;
    let jv_inv = jv.try_inverse().ok_or_else(|| WillmoreError::Singular("∂exp/∂v".into()))?;
    let jx = exp_dx(metric, x, &v)?;
    Ok(ExpInverseJet { v, dx: -jv_inv * jx, dp: jv_inv })
}

/// Finite-difference version of [`exp_inverse_jet`] for cross-checks.
pub fn exp_inverse_jet_fd(metric: &dyn MetricField, x: &Vector3<f64>, p: &Vector3<f64>) -> Result<ExpInverseJet> {
    let v = exp_inverse(metric, x, p)?;
    let mut dx = Matrix3::zeros();
    let mut dp = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = EXP_FD_STEP;
        let cx = (exp_inverse(metric, &(x + e), p)? - exp_inverse(metric, &(x - e), p)?) / (2.0 * EXP_FD_STEP);
        let cp = (exp_inverse(metric, x, &(p + e))? - exp_inverse(metric, x, &(p - e))?) / (2.0 * EXP_FD_STEP);
        dx.set_column(k, &cx);
        dp.set_column(k, &cp);
    }
    Ok(ExpInverseJet { v, dx, dp })
}

#[derive(Clone, Copy, Debug)]
pub struct BarycenterResult {
    pub center: Vector2<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn lift(x: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(x[0], x[1], 0.0)
}

fn integrate_nodes<T>(surface: &Surface, f: impl Fn(usize) -> T, zero: T) -> T
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Copy,
{
    // ∫ T dμ_g as Σ_k W_k ρ_k T_k with the grid quadrature weights
    let weights = surface.grid.quadrature_weights();
    let mut acc = zero;
    for (k, n) in surface.nodes.iter().enumerate() {
        acc = acc + f(k) * (weights[k] * n.rho);
    }
    acc
}

/// X(x) = −π_{ℝ²}∫exp_x⁻¹(f) dμ_g and its Jacobian ∂X/∂x.
pub fn barycenter_field(surface: &Surface, x: &Vector2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    let metric = surface.metric.as_ref();
    let xl = lift(x);
    let jets: Vec<ExpInverseJet> =
        surface.nodes.iter().map(|n| exp_inverse_jet(metric, &xl, &n.pos)).collect::<Result<_>>()?;
    let v = integrate_nodes(surface, |k| jets[k].v, Vector3::zeros());
    let dx = integrate_nodes(surface, |k| jets[k].dx, Matrix3::zeros());
    Ok((-Vector2::new(v[0], v[1]), -dx.fixed_view::<2, 2>(0, 0).into_owned()))
}

/// The unique zero of X near 0, by Newton.
pub fn barycenter(surface: &Surface) -> Result<BarycenterResult> {
    let mut x = Vector2::zeros();
    let area = surface.area();
    for it in 0..=BARYCENTER_MAX_ITER {
        let (xv, j) = barycenter_field(surface, &x)?;
        let res = xv.norm() / area;
        if res <= BARYCENTER_TOL {
            return Ok(BarycenterResult { center: x, residual: res, iterations: it });
        }
        if it == BARYCENTER_MAX_ITER {
            return Err(WillmoreError::NotConverged { iterations: it, residual: res });
        }
        let dx = j.lu().solve(&xv).ok_or_else(|| WillmoreError::Singular("barycenter Jacobian".into()))?;
        x -= dx;
        if x.norm() >= 1.0 {
            return Err(WillmoreError::Range(format!("barycenter left the neighborhood U (|x| = {:.4})", x.norm())));
        }
    }
    unreachable!()
}

/// L² gradients of the barycenter coordinates with respect to normal variations, evaluated at x.
pub fn barycenter_gradient_at(surface: &Surface, x: &Vector2<f64>) -> Result<[SphereFunction; 2]> {
    let metric = surface.metric.as_ref();
    let xl = lift(x);
    let jets: Vec<ExpInverseJet> =
        surface.nodes.iter().map(|n| exp_inverse_jet(metric, &xl, &n.pos)).collect::<Result<_>>()?;
    let dx = integrate_nodes(surface, |k| jets[k].dx, Matrix3::zeros());
    let a = dx.fixed_view::<2, 2>(0, 0).into_owned();
    let a_inv = a.try_inverse().ok_or_else(|| WillmoreError::Singular("barycenter gradient matrix".into()))?;
    let g = &surface.grid;
    let mut out = [SphereFunction::zeros(g), SphereFunction::zeros(g)];
    for (k, n) in surface.nodes.iter().enumerate() {
        let r = jets[k].v * n.mean - jets[k].dp * n.nu;
        let c = a_inv * Vector2::new(r[0], r[1]);
        out[0].values[k] = c[0];
        out[1].values[k] = c[1];
    }
    Ok(out)
}

/// Gradients at the barycenter C[f, g̃].
pub fn barycenter_gradient(surface: &Surface) -> Result<[SphereFunction; 2]> {
    let c = barycenter(surface)?;
    barycenter_gradient_at(surface, &c.center)
}

/// Closed form for g̃ = δ: π_{ℝ²} of the area-weighted mean of f.
pub fn flat_barycenter(surface: &Surface) -> Vector2<f64> {
    let m = integrate_nodes(surface, |k| surface.nodes[k].pos, Vector3::zeros()) / surface.area();
    Vector2::new(m[0], m[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halfsphere::HalfSphereGrid;
    use crate::metric::{Conformal, Euclidean};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;
    use std::sync::Arc;

    struct Shooting<M: MetricField>(M);

    impl<M: MetricField> MetricField for Shooting<M> {
        fn metric(&self, p: &Vector3<f64>) -> Matrix3<f64> {
            self.0.metric(p)
        }
        fn christoffel(&self, p: &Vector3<f64>) -> crate::metric::Christoffel {
            self.0.christoffel(p)
        }
    }

    #[test]
    fn flat_geodesics_are_lines() {
        let x = Vector3::new(0.1, -0.2, 0.3);
        let v = Vector3::new(0.4, 0.5, -0.2);
        let c = shoot_geodesic(&Shooting(Euclidean), &GeodesicProblem::new(x, v)).unwrap();
        for (k, p) in c.points.iter().enumerate() {
            let t = k as f64 / 64.0;
            assert!((p - (x + v * t)).norm() < 1e-15);
        }
        assert!((exp_map(&Euclidean, &x, &v).unwrap() - (x + v)).norm() == 0.0);
        assert!((exp_inverse(&Shooting(Euclidean), &x, &(x + v)).unwrap() - v).norm() < 1e-12);
        assert!(exp_map(&Euclidean, &x, &Vector3::zeros()).unwrap() == x);
    }

    #[test]
    fn conformal_geodesic_self_convergence_and_energy() {
        let m = Conformal { c: Vector3::new(0.3, -0.2, 0.25) };
        let x = Vector3::new(0.2, 0.1, -0.1);
        let v = Vector3::new(0.7, -0.4, 0.5);
        let coarse = shoot_geodesic(&m, &GeodesicProblem { x, v, n_steps: 64 }).unwrap();
        let fine = shoot_geodesic(&m, &GeodesicProblem { x, v, n_steps: 640 }).unwrap();
        let half = shoot_geodesic(&m, &GeodesicProblem { x, v, n_steps: 32 }).unwrap();
        let mut err = 0.0f64;
        for k in 0..=64 {
            err = err.max((coarse.points[k] - fine.points[10 * k]).norm());
        }
        assert!(err < 1e-8, "{err}");
        let e64 = (coarse.points[64] - fine.points[640]).norm();
        let e32 = (half.points[32] - fine.points[640]).norm();
        let order = (e32 / e64).log2();
        assert!(order > 3.7, "{order}");
        let energy = |p: &Vector3<f64>, u: &Vector3<f64>| u.dot(&(m.metric(p) * u));
        let e0 = energy(&coarse.points[0], &coarse.velocities[0]);
        for k in 0..=64 {
            assert!((energy(&coarse.points[k], &coarse.velocities[k]) - e0).abs() < 1e-8);
        }
    }

    #[test]
    fn exp_round_trips() {
        let m = Conformal { c: Vector3::new(0.1, 0.05, -0.08) };
        let x = Vector3::new(0.05, -0.03, 0.0);
        for v in [Vector3::new(0.3, 0.1, -0.2), Vector3::new(-0.5, 0.4, 0.6), Vector3::new(0.0, 0.0, 0.9)] {
            let p = exp_map(&m, &x, &v).unwrap();
            let back = exp_inverse(&m, &x, &p).unwrap();
            assert!((back - v).norm() < 1e-9);
            assert!((exp_map(&m, &x, &back).unwrap() - p).norm() < 1e-10);
            assert!((p - (x + v)).norm() < 0.2 * v.norm());
        }
        assert!(exp_inverse(&m, &x, &x).unwrap().norm() < 1e-12);
    }

    #[test]
    fn shooting_jacobians_match_differences() {
        let m = Conformal { c: Vector3::new(0.1, 0.05, -0.08) };
        let x = Vector3::new(0.05, -0.03, 0.0);
        let p = Vector3::new(0.4, 0.3, 0.7);
        let a = exp_inverse_jet(&m, &x, &p).unwrap();
        let b = exp_inverse_jet_fd(&m, &x, &p).unwrap();
        assert!((a.dx - b.dx).amax() < 1e-6);
        assert!((a.dp - b.dp).amax() < 1e-6);
    }

    #[test]
    fn flat_barycenter_of_round_and_translated() {
        let g = HalfSphereGrid::default_grid();
        let s = Surface::radial_graph(&SphereFunction::zeros(&g), Arc::new(Euclidean)).unwrap();
        let b = barycenter(&s).unwrap();
        assert!(b.center.norm() < 1e-14);
        let a = Vector3::new(0.05, 0.0, 0.0);
        let w = SphereFunction::from_fn(&g, |p| p.dot(&a) - 1.0 + (1.0 - a.norm_squared() + p.dot(&a).powi(2)).sqrt());
        let s = Surface::radial_graph(&w, Arc::new(Euclidean)).unwrap();
        let b = barycenter(&s).unwrap();
        assert!((b.center - flat_barycenter(&s)).norm() < 1e-12);
        assert!((b.center - Vector2::new(0.05, 0.0)).norm() < 1e-4);
    }

    #[test]
    fn round_gradient_closed_form() {
        let g = HalfSphereGrid::default_grid();
        let s = Surface::radial_graph(&SphereFunction::zeros(&g), Arc::new(Euclidean)).unwrap();
        let grad = barycenter_gradient(&s).unwrap();
        for i in 0..2 {
            let expect = SphereFunction::from_fn(&g, |p| -1.5 / PI * p[i]);
            assert!(grad[i].sub(&expect).max_abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_predicts_barycenter_change() {
        // under f → f + tφν the barycenter moves by t∫grad C·φ dμ
        let g = HalfSphereGrid::new(16, 32).unwrap();
        let metric: Arc<dyn MetricField> = Arc::new(Conformal { c: Vector3::new(0.1, -0.05, 0.08) });
        let w = SphereFunction::from_fn(&g, |p| 0.05 * p.x * p.z + 0.02 * p.y);
        let s = Surface::radial_graph(&w, metric.clone()).unwrap();
        let grad = barycenter_gradient(&s).unwrap();
        let phi = SphereFunction::from_fn(&g, |p| 1.0 + 0.5 * p.x - 0.3 * p.y * p.z);
        let moved = |t: f64| {
            let comps = [0, 1, 2].map(|c| {
                let mut f = s.embedding[c].clone();
                for (k, n) in s.nodes.iter().enumerate() {
                    f.values[k] += t * phi.values[k] * n.nu[c];
                }
                f
            });
            barycenter(&Surface::from_embedding(comps, metric.clone()).unwrap()).unwrap().center
        };
        let t = 1e-4;
        let fd = (moved(t) - moved(-t)) / (2.0 * t);
        for i in 0..2 {
            let pred = s.integrate(&grad[i].mul(&phi));
            assert_abs_diff_eq!(fd[i], pred, epsilon = 1e-5);
        }
    }

    #[test]
    fn flat_gradient_general_formula() {
        let g = HalfSphereGrid::default_grid();
        let w = SphereFunction::from_fn(&g, |p| 0.04 * p.x * p.z - 0.03 * p.y + 0.02);
        let s = Surface::radial_graph(&w, Arc::new(Euclidean)).unwrap();
        let c = barycenter(&s).unwrap().center;
        let grad = barycenter_gradient(&s).unwrap();
        let area = s.area();
        for (k, n) in s.nodes.iter().enumerate() {
            let v = n.nu - (n.pos - lift(&c)) * n.mean;
            for i in 0..2 {
                assert_abs_diff_eq!(grad[i].values[k], v[i] / area, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chart_closed_form_matches_shooting() {
        use crate::domain::{Domain, DomainSpec};
        let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.0, 1.5] }).unwrap();
        let chart = d.chart(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let m = chart.pullback_metric(0.15).unwrap();
        let x = Vector3::new(0.03, -0.02, 0.0);
        let v = Vector3::new(0.6, 0.3, 0.4);
        let closed = exp_map(&m, &x, &v).unwrap();
        let shot = exp_map(&Shooting(m.clone()), &x, &v).unwrap();
        assert!((closed - shot).norm() < 1e-8, "{}", (closed - shot).norm());
        let back = exp_inverse(&Shooting(m.clone()), &x, &closed).unwrap();
        assert!((back - v).norm() < 1e-8);
        let a = exp_inverse_jet(&m, &x, &closed).unwrap();
        let b = exp_inverse_jet(&Shooting(m.clone()), &x, &closed).unwrap();
        assert!((a.dx - b.dx).amax() < 1e-6 && (a.dp - b.dp).amax() < 1e-6);
    }
}
