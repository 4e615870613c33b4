//! Implicit domains Ω = {F > 0}, boundary charts f^a and the rescaled chart metrics g̃^{a,λ}.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WillmoreError};
use crate::metric::{Christoffel, DevelopingMap, LinearMetric, LocalMetric, MetricField};

/// Sparse polynomial in (x, y, z).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polynomial {
    pub terms: Vec<(f64, [u32; 3])>,
}

impl Polynomial {
    pub fn add_term(&mut self, c: f64, e: [u32; 3]) {
        if c == 0.0 {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.1 == e) {
            t.0 += c;
        } else {
            self.terms.push((c, e));
        }
    }

    /// ∂^α P at p.
    pub fn derivative(&self, p: &Vector3<f64>, alpha: [u32; 3]) -> f64 {
        let mut total = 0.0;
        'terms: for (c, e) in &self.terms {
            let mut v = *c;
            for k in 0..3 {
                if alpha[k] > e[k] {
                    continue 'terms;
                }
                for r in 0..alpha[k] {
                    v *= (e[k] - r) as f64;
                }
                v *= p[k].powi((e[k] - alpha[k]) as i32);
            }
            total += v;
        }
        total
    }

    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        self.derivative(p, [0, 0, 0])
    }

    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.derivative(p, [1, 0, 0]),
            self.derivative(p, [0, 1, 0]),
            self.derivative(p, [0, 0, 1]),
        )
    }

    pub fn hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let mut h = Matrix3::zeros();
        for i in 0..3 {
            for j in i..3 {
                let mut a = [0u32; 3];
                a[i] += 1;
                a[j] += 1;
                let v = self.derivative(p, a);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    }

    pub fn third(&self, p: &Vector3<f64>) -> [[[f64; 3]; 3]; 3] {
        let mut t = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut a = [0u32; 3];
                    a[i] += 1;
                    a[j] += 1;
                    a[k] += 1;
                    t[i][j][k] = self.derivative(p, a);
                }
            }
        }
        t
    }

    /// p ↦ P((p − c)/r).
    fn rescaled(&self, c: &Vector3<f64>, r: f64) -> Polynomial {
        let mut out = Polynomial::default();
        for (coef, e) in &self.terms {
            // expand Π ((x_k − c_k)/r)^{e_k} binomially
            let mut partial = vec![(*coef, [0u32; 3])];
            for k in 0..3 {
                let mut next = Vec::new();
                for (pc, pe) in &partial {
                    for j in 0..=e[k] {
                        let binom = binomial(e[k], j) as f64;
                        let cst = (-c[k]).powi((e[k] - j) as i32);
                        let mut ne = *pe;
                        ne[k] += j;
                        next.push((pc * binom * cst / r.powi(e[k] as i32), ne));
                    }
                }
                partial = next;
            }
            for (pc, pe) in partial {
                out.add_term(pc, pe);
            }
        }
        out
    }
}

fn binomial(n: u32, k: u32) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Unnormalized real solid harmonic of degree 1..=3; order m ≥ 0 is cos-type, m < 0 sin-type.
pub fn solid_harmonic(degree: u32, order: i32) -> Result<Polynomial> {
    let table: &[(f64, [u32; 3])] = match (degree, order) {
        (1, -1) => &[(1.0, [0, 1, 0])],
        (1, 0) => &[(1.0, [0, 0, 1])],
        (1, 1) => &[(1.0, [1, 0, 0])],
        (2, -2) => &[(1.0, [1, 1, 0])],
        (2, -1) => &[(1.0, [0, 1, 1])],
        (2, 0) => &[(2.0, [0, 0, 2]), (-1.0, [2, 0, 0]), (-1.0, [0, 2, 0])],
        (2, 1) => &[(1.0, [1, 0, 1])],
        (2, 2) => &[(1.0, [2, 0, 0]), (-1.0, [0, 2, 0])],
        (3, -3) => &[(3.0, [2, 1, 0]), (-1.0, [0, 3, 0])],
        (3, -2) => &[(1.0, [1, 1, 1])],
        (3, -1) => &[(4.0, [0, 1, 2]), (-1.0, [2, 1, 0]), (-1.0, [0, 3, 0])],
        (3, 0) => &[(2.0, [0, 0, 3]), (-3.0, [2, 0, 1]), (-3.0, [0, 2, 1])],
        (3, 1) => &[(4.0, [1, 0, 2]), (-1.0, [3, 0, 0]), (-1.0, [1, 2, 0])],
        (3, 2) => &[(1.0, [2, 0, 1]), (-1.0, [0, 2, 1])],
        (3, 3) => &[(1.0, [3, 0, 0]), (-3.0, [1, 2, 0])],
        _ => {
            return Err(WillmoreError::Config(format!(
                "solid harmonic of degree {degree} and order {order} is not available (degree 1..=3, |order| <= degree)"
            )))
        }
    };
    let mut p = Polynomial::default();
    for (c, e) in table {
        p.add_term(*c, *e);
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicBump {
    pub degree: u32,
    pub order: i32,
    pub amplitude: f64,
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

/// Domain description as read from JSON: `{"type": ..., "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Ball {
        radius: f64,
        #[serde(default = "zero3")]
        center: [f64; 3],
    },
    Ellipsoid {
        axes: [f64; 3],
    },
    PerturbedBall {
        radius: f64,
        terms: Vec<HarmonicBump>,
    },
    /// {z > height}; its boundary is flat, so every chart metric is Euclidean.
    HalfSpace {
        #[serde(default)]
        height: f64,
    },
}

impl DomainSpec {
    pub fn unit_ball() -> Self {
        DomainSpec::Ball { radius: 1.0, center: [0.0; 3] }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            WillmoreError::Config(format!("domain JSON, line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WillmoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Accepts inline JSON, a path to a JSON file, or a shorthand such as
    /// `ball`, `ball:2`, `ellipsoid:1,1,1.5`, `half_space`.
    pub fn parse(arg: &str) -> Result<Self> {
        let t = arg.trim();
        if t.starts_with('{') {
            return Self::from_json(t);
        }
        let (name, rest) = match t.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (t, None),
        };
        let nums = |r: Option<&str>| -> Result<Vec<f64>> {
            r.map(|r| {
                r.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| WillmoreError::Config(format!("bad number '{s}' in domain '{arg}'")))
                    })
                    .collect()
            })
            .unwrap_or_else(|| Ok(Vec::new()))
        };
        match name {
            "ball" => {
                let v = nums(rest)?;
                Ok(DomainSpec::Ball { radius: v.first().copied().unwrap_or(1.0), center: [0.0; 3] })
            }
            "ellipsoid" => {
                let v = nums(rest)?;
                if v.len() != 3 {
                    return Err(WillmoreError::Config("ellipsoid needs three semi-axes".into()));
                }
                Ok(DomainSpec::Ellipsoid { axes: [v[0], v[1], v[2]] })
            }
            "half_space" | "flat" => {
                let v = nums(rest)?;
                Ok(DomainSpec::HalfSpace { height: v.first().copied().unwrap_or(0.0) })
            }
            _ if Path::new(t).exists() => Self::from_file(Path::new(t)),
            _ => Err(WillmoreError::Config(format!("unknown domain '{arg}'"))),
        }
    }
}

/// Ω = {F > 0} with F polynomial.
#[derive(Clone, Debug)]
pub struct Domain {
    spec: DomainSpec,
    level: Polynomial,
    center: Vector3<f64>,
    reach: f64,
    diameter: f64,
}

impl Domain {
    pub fn new(spec: DomainSpec) -> Result<Arc<Self>> {
        let positive = |v: f64, what: &str| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(WillmoreError::Config(format!("{what} must be positive, got {v}")))
            }
        };
        let mut level = Polynomial::default();
        let (center, reach, diameter) = match &spec {
            DomainSpec::Ball { radius, center } => {
                positive(*radius, "radius")?;
                let c = Vector3::from(*center);
                level.add_term(1.0, [0, 0, 0]);
                for k in 0..3 {
                    let mut e = [0u32; 3];
                    e[k] = 2;
                    level.add_term(-1.0, e);
                }
                level = level.rescaled(&c, *radius);
                (c, *radius, 2.0 * radius)
            }
            DomainSpec::Ellipsoid { axes } => {
                for a in axes {
                    positive(*a, "semi-axis")?;
                }
                level.add_term(1.0, [0, 0, 0]);
                for k in 0..3 {
                    let mut e = [0u32; 3];
                    e[k] = 2;
                    level.add_term(-1.0 / (axes[k] * axes[k]), e);
                }
                let amin = axes.iter().cloned().fold(f64::INFINITY, f64::min);
                let amax = axes.iter().cloned().fold(0.0, f64::max);
                (Vector3::zeros(), amin * amin / amax, 2.0 * amax)
            }
            DomainSpec::PerturbedBall { radius, terms } => {
                positive(*radius, "radius")?;
                let total: f64 = terms.iter().map(|t| t.amplitude.abs()).sum();
                if total > 0.15 {
                    return Err(WillmoreError::Config(format!(
                        "total bump amplitude {total} too large (limit 0.15)"
                    )));
                }
                level.add_term(1.0, [0, 0, 0]);
                for k in 0..3 {
                    let mut e = [0u32; 3];
                    e[k] = 2;
                    level.add_term(-1.0, e);
                }
                for t in terms {
                    for (c, e) in solid_harmonic(t.degree, t.order)?.terms {
                        level.add_term(t.amplitude * c, e);
                    }
                }
                level = level.rescaled(&Vector3::zeros(), *radius);
                (Vector3::zeros(), *radius, 2.0 * radius * (1.0 + total))
            }
            DomainSpec::HalfSpace { height } => {
                level.add_term(1.0, [0, 0, 1]);
                level.add_term(-height, [0, 0, 0]);
                (Vector3::new(0.0, 0.0, *height), f64::INFINITY, f64::INFINITY)
            }
        };
        let mut dom = Domain { spec, level, center, reach, diameter };
        if matches!(dom.spec, DomainSpec::PerturbedBall { .. }) {
            dom.reach = 0.9 / dom.max_principal_curvature(48, 96)?;
        }
        Ok(Arc::new(dom))
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }
    pub fn is_bounded(&self) -> bool {
        self.diameter.is_finite()
    }
    pub fn reach(&self) -> f64 {
        self.reach
    }
    pub fn diameter(&self) -> f64 {
        self.diameter
    }
    /// Chart radius r₀ = reach/2.
    pub fn chart_radius(&self) -> f64 {
        0.5 * self.reach
    }
    /// Largest admissible λ (= r₀/2).
    pub fn lambda_max(&self) -> f64 {
        0.5 * self.chart_radius()
    }

    pub fn level(&self, p: &Vector3<f64>) -> f64 {
        self.level.value(p)
    }
    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.level.gradient(p)
    }
    pub fn hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        self.level.hessian(p)
    }
    pub fn third(&self, p: &Vector3<f64>) -> [[[f64; 3]; 3]; 3] {
        self.level.third(p)
    }

    /// Interior unit normal ∇F/|∇F|.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.gradient(p).normalize()
    }

    /// Second fundamental form −P Hess F P / |∇F| on the tangent plane (interior normal).
    fn shape_matrix(&self, p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let g = self.gradient(p);
        let n = g.normalize();
        let proj = Matrix3::identity() - n * n.transpose();
        (-(proj * self.hessian(p) * proj) / g.norm(), n)
    }

    /// h^S(x, y) at a boundary point, for tangent vectors x, y.
    pub fn second_fundamental_form(&self, p: &Vector3<f64>, x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
        let (s, _) = self.shape_matrix(p);
        x.dot(&(s * y))
    }

    /// Mean curvature (sum of principal curvatures, unit sphere = 2) at a boundary point.
    pub fn mean_curvature(&self, p: &Vector3<f64>) -> f64 {
        let g = self.gradient(p);
        let n = g.normalize();
        let h = self.hessian(p);
        -(h.trace() - n.dot(&(h * n))) / g.norm()
    }

    fn max_principal_curvature(&self, n_lat: usize, n_lon: usize) -> Result<f64> {
        let mut kmax: f64 = 0.0;
        for i in 0..=n_lat {
            for j in 0..n_lon {
                let th = std::f64::consts::PI * i as f64 / n_lat as f64;
                let ph = 2.0 * std::f64::consts::PI * j as f64 / n_lon as f64;
                let p = self.surface_point(th, ph)?;
                let (s, _) = self.shape_matrix(&p);
                let eig = SymmetricEigen::new(s).eigenvalues;
                kmax = kmax.max(eig.amax());
            }
        }
        Ok(kmax)
    }

    /// Boundary point in direction (θ, φ) from the center, for bounded domains.
    pub fn surface_point(&self, theta: f64, phi: f64) -> Result<Vector3<f64>> {
        let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        match &self.spec {
            DomainSpec::HalfSpace { .. } => Err(WillmoreError::Domain(
                "the half-space has no angular parametrization".into(),
            )),
            DomainSpec::Ball { radius, .. } => Ok(self.center + dir * *radius),
            DomainSpec::Ellipsoid { axes } => {
                let q: f64 = (0..3).map(|k| (dir[k] / axes[k]).powi(2)).sum();
                Ok(dir / q.sqrt())
            }
            DomainSpec::PerturbedBall { radius, .. } => {
                let mut t = *radius;
                for _ in 0..60 {
                    let p = self.center + dir * t;
                    let f = self.level(&p);
                    let d = self.gradient(&p).dot(&dir);
                    let dt = f / d;
                    t -= dt;
                    if dt.abs() < 1e-15 * radius {
                        break;
                    }
                }
                let p = self.center + dir * t;
                if self.level(&p).abs() > 1e-12 {
                    return Err(WillmoreError::Domain(format!(
                        "radial projection failed at theta={theta}, phi={phi}"
                    )));
                }
                Ok(p)
            }
        }
    }

    /// Nearest boundary point along the normal line (Newton on F).
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        let mut q = *p;
        for _ in 0..100 {
            let g = self.gradient(&q);
            let step = g * (self.level(&q) / g.norm_squared());
            q -= step;
            if step.norm() < 1e-15 * (1.0 + q.norm()) {
                break;
            }
        }
        if self.level(&q).abs() > 1e-12 {
            return Err(WillmoreError::Domain(format!("could not project {p:?} onto the boundary")));
        }
        Ok(q)
    }

    /// Chart at a boundary point with the default frame.
    pub fn chart(self: &Arc<Self>, a: &Vector3<f64>) -> Result<DomainChart> {
        DomainChart::new(self.clone(), *a)
    }
}

/// Graph function φ^a with derivatives up to order three at one point.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphJet {
    pub value: f64,
    pub d1: [f64; 2],
    pub d2: [[f64; 2]; 2],
    pub d3: [[[f64; 2]; 2]; 2],
}

/// Boundary chart f^a(x) = a + x¹v₁ + x²v₂ + φ^a(x)N.
#[derive(Clone, Debug)]
pub struct DomainChart {
    pub domain: Arc<Domain>,
    pub a: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub v1: Vector3<f64>,
    pub v2: Vector3<f64>,
    pub r0: f64,
}

impl DomainChart {
    pub fn new(domain: Arc<Domain>, a: Vector3<f64>) -> Result<Self> {
        let scale = domain.gradient(&a).norm() * (1.0 + a.norm());
        if domain.level(&a).abs() > 1e-9 * scale.max(1.0) {
            return Err(WillmoreError::Domain(format!(
                "point {:?} is not on the boundary (F = {:e})",
                a.as_slice(),
                domain.level(&a)
            )));
        }
        let n = domain.normal(&a);
        let k = (0..3)
            .min_by(|&i, &j| n[i].abs().partial_cmp(&n[j].abs()).unwrap())
            .unwrap();
        let mut e = Vector3::zeros();
        e[k] = 1.0;
        let v1 = (e - n * n.dot(&e)).normalize();
        let v2 = n.cross(&v1);
        let r0 = domain.chart_radius();
        Ok(DomainChart { domain, a, normal: n, v1, v2, r0 })
    }

    /// Same base point, frame rotated by `angle` in T_aS.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut out = self.clone();
        out.v1 = self.v1 * c + self.v2 * s;
        out.v2 = -self.v1 * s + self.v2 * c;
        out
    }

    fn basis(&self) -> [Vector3<f64>; 3] {
        [self.v1, self.v2, self.normal]
    }

    /// Solves F(a + x·v + tN) = 0 for t = φ^a(x) and differentiates implicitly.
    pub fn graph_jet(&self, x: [f64; 2], order: usize) -> Result<GraphJet> {
        if (x[0] * x[0] + x[1] * x[1]).sqrt() > self.r0 * (1.0 + 1e-12) {
            return Err(WillmoreError::Range(format!(
                "chart coordinate |x| = {:.6} exceeds the chart radius {:.6}",
                (x[0] * x[0] + x[1] * x[1]).sqrt(),
                self.r0
            )));
        }
        let base = self.a + self.v1 * x[0] + self.v2 * x[1];
        let dom = &self.domain;
        let mut t = 0.0;
        let mut converged = false;
        for _ in 0..60 {
            let p = base + self.normal * t;
            let f = dom.level(&p);
            let d = dom.gradient(&p).dot(&self.normal);
            if d.abs() < 1e-300 {
                break;
            }
            let dt = f / d;
            t -= dt;
            if dt.abs() <= 1e-15 * (1.0 + t.abs()) {
                converged = true;
                break;
            }
        }
        if !converged || !t.is_finite() {
            return Err(WillmoreError::Range(format!("graph Newton failed at chart point {x:?}")));
        }
        let p = base + self.normal * t;
        let mut jet = GraphJet { value: t, ..Default::default() };
        if order == 0 {
            return Ok(jet);
        }
        let b = self.basis();
        let grad = dom.gradient(&p);
        let g1: [f64; 3] = [0, 1, 2].map(|i| grad.dot(&b[i]));
        let gn = g1[2];
        let phi1 = [-g1[0] / gn, -g1[1] / gn];
        jet.d1 = phi1;
        if order == 1 {
            return Ok(jet);
        }
        let hess = dom.hessian(&p);
        let mut g2 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g2[i][j] = b[i].dot(&(hess * b[j]));
            }
        }
        let mut phi2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                phi2[i][j] = -(g2[i][j] + g2[i][2] * phi1[j] + g2[j][2] * phi1[i] + g2[2][2] * phi1[i] * phi1[j]) / gn;
            }
        }
        jet.d2 = phi2;
        if order == 2 {
            return Ok(jet);
        }
        let third = dom.third(&p);
        let mut g3 = [[[0.0; 3]; 3]; 3];
        for a in 0..3 {
            for bb in 0..3 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for p_ in 0..3 {
                        for q in 0..3 {
                            for r in 0..3 {
                                s += third[p_][q][r] * b[a][p_] * b[bb][q] * b[c][r];
                            }
                        }
                    }
                    g3[a][bb][c] = s;
                }
            }
        }
        const N: usize = 2;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let (f1, f2) = (phi1, phi2);
                    let s = g3[i][j][k]
                        + g3[i][j][N] * f1[k]
                        + (g3[i][N][k] + g3[i][N][N] * f1[k]) * f1[j]
                        + g2[i][N] * f2[j][k]
                        + (g3[j][N][k] + g3[j][N][N] * f1[k]) * f1[i]
                        + g2[j][N] * f2[i][k]
                        + (g3[N][N][k] + g3[N][N][N] * f1[k]) * f1[i] * f1[j]
                        + g2[N][N] * (f2[i][k] * f1[j] + f1[i] * f2[j][k])
                        + (g2[N][k] + g2[N][N] * f1[k]) * f2[i][j];
                    jet.d3[i][j][k] = -s / gn;
                }
            }
        }
        Ok(jet)
    }

    /// f^a(x).
    pub fn surface_point(&self, x: [f64; 2]) -> Result<Vector3<f64>> {
        let jet = self.graph_jet(x, 0)?;
        Ok(self.a + self.v1 * x[0] + self.v2 * x[1] + self.normal * jet.value)
    }

    /// Chart coordinates of a point (orthogonal projection onto T_aS).
    pub fn coordinates(&self, p: &Vector3<f64>) -> [f64; 2] {
        let d = p - self.a;
        [d.dot(&self.v1), d.dot(&self.v2)]
    }

    /// Rescaled chart metric g̃^{a,λ}.
    pub fn pullback_metric(&self, lambda: f64) -> Result<ChartMetric> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(WillmoreError::Range(format!("lambda = {lambda} must be nonnegative and finite")));
        }
        if lambda > 0.5 * self.r0 * (1.0 + 1e-12) {
            return Err(WillmoreError::Range(format!(
                "lambda = {lambda} exceeds the admissible maximum {:.6} (chart radius {:.6} / 2)",
                0.5 * self.r0,
                self.r0
            )));
        }
        Ok(ChartMetric { chart: Arc::new(self.clone()), lambda })
    }

    /// h^S(a), H^S(a) and ∇H^S(a).
    pub fn shape_operator(&self) -> Result<ShapeOperatorData> {
        let jet = self.graph_jet([0.0, 0.0], 2)?;
        let h_s = Matrix2::new(jet.d2[0][0], jet.d2[0][1], jet.d2[1][0], jet.d2[1][1]);
        let h = self.domain_step();
        let mut grad = Vector2::zeros();
        for k in 0..2 {
            let mut xp = [0.0; 2];
            xp[k] = h;
            let mut xm = [0.0; 2];
            xm[k] = -h;
            let hp = self.domain.mean_curvature(&self.surface_point(xp)?);
            let hm = self.domain.mean_curvature(&self.surface_point(xm)?);
            grad[k] = (hp - hm) / (2.0 * h);
        }
        Ok(ShapeOperatorData {
            h_s,
            mean_curvature: h_s.trace(),
            grad_hs: grad,
            grad_hs_ambient: self.v1 * grad[0] + self.v2 * grad[1],
        })
    }

    /// Hessian of H^S∘f^a at x = 0 by central differences.
    pub fn mean_curvature_hessian(&self) -> Result<Matrix2<f64>> {
        let h = 10.0 * self.domain_step();
        let hs = |x: [f64; 2]| -> Result<f64> { Ok(self.domain.mean_curvature(&self.surface_point(x)?)) };
        let c = hs([0.0, 0.0])?;
        let mut m = Matrix2::zeros();
        for k in 0..2 {
            let mut e = [0.0; 2];
            e[k] = h;
            m[(k, k)] = (hs(e)? - 2.0 * c + hs([-e[0], -e[1]])?) / (h * h);
        }
        let pp = hs([h, h])?;
        let pm = hs([h, -h])?;
        let mp = hs([-h, h])?;
        let mm = hs([-h, -h])?;
        m[(0, 1)] = (pp - pm - mp + mm) / (4.0 * h * h);
        m[(1, 0)] = m[(0, 1)];
        Ok(m)
    }

    fn domain_step(&self) -> f64 {
        let scale = if self.domain.is_bounded() { self.domain.diameter() } else { 1.0 };
        1e-4 * scale
    }

    /// q with q_{i3} = h^S_{ik}(a)x^k, as the metric δ + t q.
    pub fn first_order_term(&self, t: f64) -> Result<LinearMetric> {
        let h = self.shape_operator()?.h_s;
        let mut slopes = [Matrix3::zeros(); 3];
        for k in 0..2 {
            for i in 0..2 {
                slopes[k][(i, 2)] = h[(i, k)];
                slopes[k][(2, i)] = h[(i, k)];
            }
        }
        Ok(LinearMetric { slopes, t })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ShapeOperatorData {
    pub h_s: Matrix2<f64>,
    pub mean_curvature: f64,
    /// ∇H^S in the chart frame (v₁, v₂).
    pub grad_hs: Vector2<f64>,
    pub grad_hs_ambient: Vector3<f64>,
}

/// g̃^{a,λ}(x, z) = g̃^a(λx, λz): the pullback of δ under (x, z) ↦ (x, z + φ^a(λx)/λ).
#[derive(Clone, Debug)]
pub struct ChartMetric {
    pub chart: Arc<DomainChart>,
    pub lambda: f64,
}

impl ChartMetric {
    fn jet(&self, p: &Vector3<f64>, order: usize) -> GraphJet {
        if self.lambda == 0.0 {
            return GraphJet::default();
        }
        let y = [self.lambda * p[0], self.lambda * p[1]];
        // only points outside Z₂ can leave the chart; evaluate at the chart rim there
        match self.chart.graph_jet(y, order) {
            Ok(j) => j,
            Err(_) => {
                let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
                let s = self.chart.r0 / r;
                self.chart.graph_jet([y[0] * s, y[1] * s], order).unwrap_or_default()
            }
        }
    }

    fn metric_from_jet(j: &GraphJet) -> Matrix3<f64> {
        let (a, b) = (j.d1[0], j.d1[1]);
        Matrix3::new(1.0 + a * a, a * b, a, a * b, 1.0 + b * b, b, a, b, 1.0)
    }

    fn christoffel_from_jet(&self, j: &GraphJet) -> Christoffel {
        let mut gamma = [[[0.0; 3]; 3]; 3];
        for i in 0..2 {
            for k in 0..2 {
                gamma[2][i][k] = self.lambda * j.d2[i][k];
            }
        }
        gamma
    }

    /// ψ(y) = φ(λy)/λ and its gradient, the vertical shift of the developing map.
    fn shift(&self, p: &Vector3<f64>) -> (f64, [f64; 2]) {
        if self.lambda == 0.0 {
            return (0.0, [0.0, 0.0]);
        }
        let j = self.jet(p, 1);
        (j.value / self.lambda, j.d1)
    }
}

impl MetricField for ChartMetric {
    fn metric(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        Self::metric_from_jet(&self.jet(p, 1))
    }

    fn metric_derivatives(&self, p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        let j = self.jet(p, 2);
        let l = self.lambda;
        let mut out = [Matrix3::zeros(); 3];
        for k in 0..2 {
            let d = &mut out[k];
            for a in 0..2 {
                for b in 0..2 {
                    d[(a, b)] = l * (j.d2[a][k] * j.d1[b] + j.d1[a] * j.d2[b][k]);
                }
                d[(a, 2)] = l * j.d2[a][k];
                d[(2, a)] = l * j.d2[a][k];
            }
        }
        out
    }

    fn christoffel(&self, p: &Vector3<f64>) -> Christoffel {
        self.christoffel_from_jet(&self.jet(p, 2))
    }

    fn ricci(&self, _p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::zeros()
    }

    fn local(&self, p: &Vector3<f64>) -> LocalMetric {
        let j = self.jet(p, 2);
        LocalMetric { g: Self::metric_from_jet(&j), gamma: self.christoffel_from_jet(&j), ricci: Matrix3::zeros() }
    }

    fn developing_map(&self) -> Option<&dyn DevelopingMap> {
        Some(self)
    }

    fn is_euclidean(&self) -> bool {
        self.lambda == 0.0 || matches!(self.chart.domain.spec, DomainSpec::HalfSpace { .. })
    }
}

impl DevelopingMap for ChartMetric {
    fn develop(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(p[0], p[1], p[2] + self.shift(p).0)
    }
    fn develop_inverse(&self, q: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(q[0], q[1], q[2] - self.shift(q).0)
    }
    fn develop_jacobian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let (_, d) = self.shift(p);
        Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, d[0], d[1], 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::christoffel_from;
    use approx::assert_abs_diff_eq;

    fn ball() -> Arc<Domain> {
        Domain::new(DomainSpec::unit_ball()).unwrap()
    }

    #[test]
    fn ball_chart_is_spherical_cap() {
        let d = ball();
        let c = d.chart(&Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_abs_diff_eq!(c.normal, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        for x in [[0.1, 0.2], [-0.3, 0.05], [0.0, 0.45]] {
            let r2: f64 = x[0] * x[0] + x[1] * x[1];
            let j = c.graph_jet(x, 3).unwrap();
            assert_abs_diff_eq!(j.value, 1.0 - (1.0 - r2).sqrt(), epsilon = 1e-10);
        }
        let j0 = c.graph_jet([0.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(j0.value, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j0.d1[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn implicit_derivatives_match_differences() {
        let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.2, 1.5] }).unwrap();
        let a = d.surface_point(0.7, 0.4).unwrap();
        let c = d.chart(&a).unwrap();
        let x = [0.05, -0.08];
        let j = c.graph_jet(x, 3).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let jp = c.graph_jet(xp, 3).unwrap();
            let jm = c.graph_jet(xm, 3).unwrap();
            assert_abs_diff_eq!((jp.value - jm.value) / (2.0 * h), j.d1[k], epsilon = 1e-9);
            for i in 0..2 {
                assert_abs_diff_eq!((jp.d1[i] - jm.d1[i]) / (2.0 * h), j.d2[i][k], epsilon = 1e-8);
                for l in 0..2 {
                    assert_abs_diff_eq!((jp.d2[i][l] - jm.d2[i][l]) / (2.0 * h), j.d3[i][l][k], epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn shape_operator_examples() {
        let d = ball();
        let c = d.chart(&Vector3::new(0.0, 0.6, 0.8)).unwrap();
        let s = c.shape_operator().unwrap();
        assert_abs_diff_eq!(s.h_s, Matrix2::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_curvature, 2.0, epsilon = 1e-12);
        assert!(s.grad_hs.norm() < 1e-8);

        let d = Domain::new(DomainSpec::Ball { radius: 2.5, center: [0.1, 0.0, 0.0] }).unwrap();
        let c = d.chart(&d.surface_point(1.0, 2.0).unwrap()).unwrap();
        assert_abs_diff_eq!(c.shape_operator().unwrap().mean_curvature, 2.0 / 2.5, epsilon = 1e-12);

        let d = Domain::new(DomainSpec::HalfSpace { height: 0.0 }).unwrap();
        let c = d.chart(&Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(c.shape_operator().unwrap().mean_curvature, 0.0);
        assert_abs_diff_eq!(c.graph_jet([0.3, -0.7], 3).unwrap().value, 0.0);
    }

    #[test]
    fn ellipsoid_pole_curvature() {
        // at (0,0,c) the principal curvatures are c/a² and c/b²
        let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.2, 1.5] }).unwrap();
        let c = d.chart(&Vector3::new(0.0, 0.0, 1.5)).unwrap();
        let s = c.shape_operator().unwrap();
        assert_abs_diff_eq!(s.mean_curvature, 1.5 + 1.5 / 1.44, epsilon = 1e-12);
        assert!(s.grad_hs.norm() < 1e-9);
        assert_abs_diff_eq!(d.lambda_max(), 1.0 / 1.5 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn pullback_metric_properties() {
        let d = ball();
        let c = d.chart(&Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let m = c.pullback_metric(0.1).unwrap();
        let p = Vector3::new(0.7, -0.4, 0.3);
        // dilation identity
        let j = c.graph_jet([0.07, -0.04], 1).unwrap();
        let g = m.metric(&p);
        assert_abs_diff_eq!(g[(0, 2)], j.d1[0], epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 1)], j.d1[0] * j.d1[1], epsilon = 1e-15);
        // analytic Γ agrees with the generic formula
        let an = m.christoffel(&p);
        let ge = christoffel_from(&m.metric(&p), &m.metric_derivatives(&p));
        for k in 0..3 {
            for i in 0..3 {
                for l in 0..3 {
                    assert_abs_diff_eq!(an[k][i][l], ge[k][i][l], epsilon = 1e-12);
                    assert_abs_diff_eq!(an[k][i][l], an[k][l][i], epsilon = 1e-15);
                }
            }
        }
        // the chart metric is flat
        let fd = crate::metric::ricci_fd(&m, &p, 1e-4);
        assert!(fd.amax() < 1e-7);
        assert!(c.pullback_metric(0.26).is_err());
        let flat = c.pullback_metric(0.0).unwrap();
        assert_eq!(flat.metric(&p), Matrix3::identity());
    }

    #[test]
    fn taylor_control_of_chart_metric() {
        let d = ball();
        let c = d.chart(&Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let mut ratios = Vec::new();
        for lambda in [0.2, 0.1, 0.05] {
            let m = c.pullback_metric(lambda).unwrap();
            let q = c.first_order_term(lambda).unwrap();
            let mut worst: f64 = 0.0;
            for p in [Vector3::new(1.5, 0.3, 0.0), Vector3::new(-0.7, 1.2, 1.0), Vector3::new(0.1, -1.9, -0.5)] {
                worst = worst.max((m.metric(&p) - q.metric(&p)).amax());
            }
            ratios.push(worst / (lambda * lambda));
        }
        assert!(ratios.iter().all(|r| *r < 5.0));
        assert!((ratios[2] / ratios[1] - 1.0).abs() < 0.1);
    }

    #[test]
    fn first_order_term_against_lambda_derivative() {
        let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.0, 2.0] }).unwrap();
        let c = d.chart(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let q = c.first_order_term(1.0).unwrap();
        let h = 1e-4;
        let mp = c.pullback_metric(h).unwrap();
        // g̃^{a,λ} is defined by the same formula for negative λ
        let mm = ChartMetric { chart: Arc::new(c.clone()), lambda: -h };
        for p in [Vector3::new(0.5, -0.3, 0.2), Vector3::new(-1.0, 1.0, 0.0)] {
            let fd = (mp.metric(&p) - mm.metric(&p)) / (2.0 * h);
            assert!((fd - q.q(&p)).amax() < 1e-6, "{}", (fd - q.q(&p)).amax());
        }
    }

    #[test]
    fn rotated_frame_gives_rotated_metric() {
        let d = Domain::new(DomainSpec::Ellipsoid { axes: [1.0, 1.1, 1.5] }).unwrap();
        let a = d.surface_point(0.9, 0.3).unwrap();
        let c = d.chart(&a).unwrap();
        let t = std::f64::consts::FRAC_PI_2;
        let cr = c.rotated(t);
        let m = c.pullback_metric(0.1).unwrap();
        let mr = cr.pullback_metric(0.1).unwrap();
        let p = Vector3::new(0.4, -0.6, 0.2);
        // coordinates with respect to the rotated frame: x' = T⁻¹x
        let rot = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let pr = rot * p;
        let lhs = mr.metric(&pr);
        let rhs = rot * m.metric(&p) * rot.transpose();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn domain_json_parsing() {
        let d = DomainSpec::from_json(r#"{"type":"ellipsoid","params":{"axes":[1,1,1.5]}}"#).unwrap();
        assert_eq!(d, DomainSpec::Ellipsoid { axes: [1.0, 1.0, 1.5] });
        let err = DomainSpec::from_json("{\n \"type\": \"torus\"\n}").unwrap_err();
        assert!(err.to_string().contains("line"));
        assert!(DomainSpec::parse("ellipsoid:1,1").is_err());
        assert_eq!(DomainSpec::parse("ball").unwrap(), DomainSpec::unit_ball());
        let p = DomainSpec::from_json(
            r#"{"type":"perturbed_ball","params":{"radius":1,"terms":[{"degree":3,"order":0,"amplitude":0.05}]}}"#,
        )
        .unwrap();
        let dom = Domain::new(p).unwrap();
        let a = dom.surface_point(0.3, 1.0).unwrap();
        assert!(dom.level(&a).abs() < 1e-12);
        assert!(dom.reach() > 0.5 && dom.reach() < 1.0);
    }

    #[test]
    fn solid_harmonics_are_harmonic() {
        let p = Vector3::new(0.3, -0.5, 0.7);
        for l in 1..=3u32 {
            for m in -(l as i32)..=(l as i32) {
                let h = solid_harmonic(l, m).unwrap();
                assert_abs_diff_eq!(h.hessian(&p).trace(), 0.0, epsilon = 1e-12);
            }
        }
    }
}
