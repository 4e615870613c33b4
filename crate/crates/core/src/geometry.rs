//! Geometry of surfaces f: S²₊ → (Z₂, g̃): induced metric, normal, second
//! fundamental form, mean curvature, Willmore operator and boundary data.
//!
//! Surfaces are stored as three Cartesian embedding components, each a smooth
//! scalar on the half-sphere grid. Covariant derivatives on S² come from the
//! spectral gradient; the radial graph f = (1+w)ω is the main special case.

use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Result, WillmoreError};
use crate::halfsphere::{boundary_integrate_values, HalfSphereGrid, SphereFunction};
use crate::metric::{gamma_apply, LocalMetric, MetricField};

/// Pointwise geometry at one parameter point.
#[derive(Clone, Copy, Debug)]
pub struct NodeGeometry {
    pub omega: Vector3<f64>,
    /// Round orthonormal frame (e_θ, e_φ).
    pub frame: [Vector3<f64>; 2],
    pub pos: Vector3<f64>,
    pub df: [Vector3<f64>; 2],
    /// Covariant Hessian of f on S² in the frame.
    pub d2f: [[Vector3<f64>; 2]; 2],
    pub g: Matrix2<f64>,
    pub ginv: Matrix2<f64>,
    /// √det g relative to the round area element.
    pub rho: f64,
    pub nu: Vector3<f64>,
    pub h: Matrix2<f64>,
    pub mean: f64,
    pub h_norm_sq: f64,
    pub ricci_nn: f64,
    pub ambient: LocalMetric,
}

impl NodeGeometry {
    pub fn new(
        omega: Vector3<f64>,
        frame: [Vector3<f64>; 2],
        pos: Vector3<f64>,
        df: [Vector3<f64>; 2],
        d2f: [[Vector3<f64>; 2]; 2],
        metric: &dyn MetricField,
    ) -> std::result::Result<Self, String> {
        let ambient = metric.local(&pos);
        let gt = ambient.g;
        let mut g = Matrix2::zeros();
        for a in 0..2 {
            for b in 0..2 {
                g[(a, b)] = df[a].dot(&(gt * df[b]));
            }
        }
        let eig = SymmetricEigen::new(g).eigenvalues;
        if !(eig.min() > 1e-8) {
            return Err(format!("induced metric degenerate (smallest eigenvalue {:.3e})", eig.min()));
        }
        let ginv = g.try_inverse().ok_or("induced metric not invertible")?;
        let rho = g.determinant().sqrt();
        let gt_inv = gt.try_inverse().ok_or("ambient metric not invertible")?;
        let n = gt_inv * df[0].cross(&df[1]);
        let nn = n.dot(&(gt * n));
        if !(nn > 0.0) {
            return Err("normal undefined".into());
        }
        let nu = -n / nn.sqrt();
        let mut h = Matrix2::zeros();
        for a in 0..2 {
            for b in 0..2 {
                let acc = d2f[a][b] + gamma_apply(&ambient.gamma, &df[a], &df[b]);
                h[(a, b)] = acc.dot(&(gt * nu));
            }
        }
        h = 0.5 * (h + h.transpose());
        let mean = (ginv * h).trace();
        let h_norm_sq = (ginv * h * ginv * h).trace();
        let ricci_nn = nu.dot(&(ambient.ricci * nu));
        Ok(NodeGeometry { omega, frame, pos, df, d2f, g, ginv, rho, nu, h, mean, h_norm_sq, ricci_nn, ambient })
    }

    /// |h°|² = |h|² − H²/2.
    pub fn tracefree_sq(&self) -> f64 {
        self.h_norm_sq - 0.5 * self.mean * self.mean
    }

    /// df applied to frame components.
    pub fn push(&self, v: [f64; 2]) -> Vector3<f64> {
        self.df[0] * v[0] + self.df[1] * v[1]
    }

    /// Frame components of a tangent vector given in ℝ³ (tangent to S²).
    pub fn frame_components(&self, v: &Vector3<f64>) -> [f64; 2] {
        [self.frame[0].dot(v), self.frame[1].dot(v)]
    }
}

/// Boundary quantities along the equator image, one entry per azimuth node.
#[derive(Clone, Debug)]
pub struct BoundaryTrace {
    pub phi: Vec<f64>,
    pub nodes: Vec<NodeGeometry>,
    pub nu: Vec<Vector3<f64>>,
    pub mean: Vec<f64>,
    pub dh_deta: Vec<f64>,
    pub h_tau_eta: Vec<f64>,
    /// h̃^{ℝ²}(ν, ν): second fundamental form of the plane z = 0 under g̃.
    pub plane_form_nn: Vec<f64>,
    /// h̃^{ℝ²}(ν, ∂f/∂τ).
    pub plane_form_nt: Vec<f64>,
    /// h̃^{ℝ²}(∂f/∂τ, ∂f/∂τ).
    pub plane_form_tt: Vec<f64>,
    pub kappa_g: Vec<f64>,
    /// Unit conormal and unit tangent in frame components.
    pub eta: Vec<[f64; 2]>,
    pub tau: Vec<[f64; 2]>,
    /// Line element ds_g / dφ.
    pub ds: Vec<f64>,
    /// B = ⟨ν, e₃⟩/√g̃³³.
    pub ortho: Vec<f64>,
    /// ∂H/∂η + h̃^{ℝ²}(ν,ν) H.
    pub natural: Vec<f64>,
    pub phi_step: f64,
}

impl BoundaryTrace {
    /// ∮ f ds_g for samples at the azimuth nodes.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        let v: Vec<f64> = f.iter().zip(&self.ds).map(|(a, b)| a * b).collect();
        boundary_integrate_values(&v, self.phi_step)
    }
}

/// Layout of the derivative fields a surface is assembled from.
#[derive(Clone, Copy, Debug)]
enum JetKind {
    /// [w, ∇w (3), ∇(∇w)_l (9)]
    Radial,
    /// [f^c (3), ∇f^c (9), ∇(∇f^c)_l (27)]
    Embedding,
}

fn frame_hessian(d: impl Fn(usize, usize) -> f64, x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
    // ⟨D_X ∇u, Y⟩ with d(l, m) = m-th component of ∇(∇u)_l
    let mut s = 0.0;
    for l in 0..3 {
        for m in 0..3 {
            s += x[m] * d(l, m) * y[l];
        }
    }
    s
}

impl JetKind {
    fn node(
        self,
        omega: Vector3<f64>,
        frame: [Vector3<f64>; 2],
        s: &[f64],
        metric: &dyn MetricField,
    ) -> std::result::Result<NodeGeometry, String> {
        let (pos, df, mut d2f) = match self {
            JetKind::Radial => {
                let r = 1.0 + s[0];
                let grad = Vector3::new(s[1], s[2], s[3]);
                let ga = [frame[0].dot(&grad), frame[1].dot(&grad)];
                let df = [frame[0] * r + omega * ga[0], frame[1] * r + omega * ga[1]];
                let mut d2f = [[Vector3::zeros(); 2]; 2];
                for a in 0..2 {
                    for b in 0..2 {
                        let hw = frame_hessian(|l, m| s[4 + 3 * l + m], &frame[a], &frame[b]);
                        let delta = if a == b { r } else { 0.0 };
                        d2f[a][b] = frame[b] * ga[a] + frame[a] * ga[b] + omega * (hw - delta);
                    }
                }
                (omega * r, df, d2f)
            }
            JetKind::Embedding => {
                let pos = Vector3::new(s[0], s[1], s[2]);
                let jac = Matrix3::from_fn(|c, l| s[3 + 3 * c + l]);
                let df = [jac * frame[0], jac * frame[1]];
                let mut d2f = [[Vector3::zeros(); 2]; 2];
                for a in 0..2 {
                    for b in 0..2 {
                        d2f[a][b] = Vector3::from_fn(|c, _| {
                            frame_hessian(|l, m| s[12 + 9 * c + 3 * l + m], &frame[a], &frame[b])
                        });
                    }
                }
                (pos, df, d2f)
            }
        };
        let sym = 0.5 * (d2f[0][1] + d2f[1][0]);
        d2f[0][1] = sym;
        d2f[1][0] = sym;
        NodeGeometry::new(omega, frame, pos, df, d2f, metric)
    }
}

/// A surface f: S²₊ → Z₂ with cached geometry.
pub struct Surface {
    pub grid: Arc<HalfSphereGrid>,
    pub metric: Arc<dyn MetricField>,
    pub embedding: [SphereFunction; 3],
    pub nodes: Vec<NodeGeometry>,
    pub mean_curvature: SphereFunction,
    kind: JetKind,
    fields: Vec<SphereFunction>,
    grad_h: OnceLock<[SphereFunction; 3]>,
    willmore: OnceLock<SphereFunction>,
    boundary: OnceLock<std::result::Result<BoundaryTrace, String>>,
}

impl std::fmt::Debug for Surface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Surface({:?})", self.grid)
    }
}

fn immersion_error(grid: &HalfSphereGrid, k: usize, reason: String) -> WillmoreError {
    let i = k / grid.n_phi();
    let j = k % grid.n_phi();
    WillmoreError::Immersion { theta: grid.theta_nodes()[i], phi: grid.phi_nodes()[j], reason }
}

impl Surface {
    /// Radial graph f(ω) = (1 + w(ω))ω.
    pub fn radial_graph(w: &SphereFunction, metric: Arc<dyn MetricField>) -> Result<Self> {
        let grid = w.grid.clone();
        if let Some(k) = w.values.iter().position(|v| !(1.0 + v > 0.0)) {
            return Err(immersion_error(&grid, k, format!("1 + w = {:.3e} is not positive", 1.0 + w.values[k])));
        }
        let embedding = [0, 1, 2].map(|c| {
            let mut f = SphereFunction::zeros(&grid);
            for i in 0..grid.n_theta() {
                for j in 0..grid.n_phi() {
                    let k = grid.index(i, j);
                    f.values[k] = (1.0 + w.values[k]) * grid.point(i, j)[c];
                }
            }
            f
        });
        let grad = w.gradient_cartesian();
        let mut fields = vec![w.clone()];
        fields.extend(grad.iter().cloned());
        for gc in &grad {
            fields.extend(gc.gradient_cartesian());
        }
        Self::build(embedding, metric, JetKind::Radial, fields)
    }

    pub fn from_embedding(embedding: [SphereFunction; 3], metric: Arc<dyn MetricField>) -> Result<Self> {
        if let Some(c) = embedding.iter().position(|e| !e.is_finite()) {
            return Err(WillmoreError::Immersion {
                theta: f64::NAN,
                phi: f64::NAN,
                reason: format!("embedding component {c} not finite"),
            });
        }
        let mut fields: Vec<SphereFunction> = embedding.to_vec();
        let first: Vec<[SphereFunction; 3]> = embedding.iter().map(|e| e.gradient_cartesian()).collect();
        for f in &first {
            fields.extend(f.iter().cloned());
        }
        for f in &first {
            for gc in f {
                fields.extend(gc.gradient_cartesian());
            }
        }
        Self::build(embedding, metric, JetKind::Embedding, fields)
    }

    fn build(
        embedding: [SphereFunction; 3],
        metric: Arc<dyn MetricField>,
        kind: JetKind,
        fields: Vec<SphereFunction>,
    ) -> Result<Self> {
        let grid = embedding[0].grid.clone();
        let mut nodes = Vec::with_capacity(grid.len());
        let mut samples = vec![0.0; fields.len()];
        for i in 0..grid.n_theta() {
            for j in 0..grid.n_phi() {
                let k = grid.index(i, j);
                let (et, ep) = grid.frame(i, j);
                for (s, f) in samples.iter_mut().zip(&fields) {
                    *s = f.values[k];
                }
                let node = kind
                    .node(grid.point(i, j), [et, ep], &samples, metric.as_ref())
                    .map_err(|r| immersion_error(&grid, k, r))?;
                nodes.push(node);
            }
        }
        let mean_curvature =
            SphereFunction::from_values(&grid, nodes.iter().map(|n| n.mean).collect()).expect("grid sized");
        Ok(Surface {
            grid,
            metric,
            embedding,
            nodes,
            mean_curvature,
            kind,
            fields,
            grad_h: OnceLock::new(),
            willmore: OnceLock::new(),
            boundary: OnceLock::new(),
        })
    }

    pub fn node(&self, i: usize, j: usize) -> &NodeGeometry {
        &self.nodes[self.grid.index(i, j)]
    }

    fn field(&self, f: impl Fn(&NodeGeometry) -> f64) -> SphereFunction {
        SphereFunction::from_values(&self.grid, self.nodes.iter().map(f).collect()).expect("grid sized")
    }

    /// √det g as a grid function.
    pub fn area_density(&self) -> SphereFunction {
        self.field(|n| n.rho)
    }

    pub fn tracefree_sq(&self) -> SphereFunction {
        self.field(|n| n.tracefree_sq())
    }

    /// ∫ f dμ_g.
    pub fn integrate(&self, f: &SphereFunction) -> f64 {
        f.zip_with(&self.area_density(), |a, b| a * b).integrate()
    }

    pub fn area(&self) -> f64 {
        self.area_density().integrate()
    }

    /// ¼ ∫ H² dμ_g.
    pub fn willmore_energy(&self) -> f64 {
        0.25 * self.integrate(&self.mean_curvature.map(|h| h * h))
    }

    /// Spectral tangential gradient of H on S² (Cartesian components).
    pub fn mean_curvature_gradient(&self) -> &[SphereFunction; 3] {
        self.grad_h.get_or_init(|| self.mean_curvature.gradient_cartesian())
    }

    /// Gradient of a function with respect to g, as a pushed-forward vector field in ℝ³.
    fn metric_gradient_coeffs(&self, k: usize, grad: &[SphereFunction; 3]) -> [f64; 2] {
        let n = &self.nodes[k];
        let d = Vector3::new(grad[0].values[k], grad[1].values[k], grad[2].values[k]);
        let dv = nalgebra::Vector2::new(n.frame[0].dot(&d), n.frame[1].dot(&d));
        let up = n.ginv * dv;
        [up[0], up[1]]
    }

    /// Δ_g u = (1/ρ) div_{S²}(ρ g⁻¹ du).
    pub fn laplacian(&self, u: &SphereFunction) -> SphereFunction {
        let grad = u.gradient_cartesian();
        self.laplacian_from_gradient(&grad)
    }

    fn laplacian_from_gradient(&self, grad: &[SphereFunction; 3]) -> SphereFunction {
        let g = &self.grid;
        let mut field = [SphereFunction::zeros(g), SphereFunction::zeros(g), SphereFunction::zeros(g)];
        for k in 0..g.len() {
            let n = &self.nodes[k];
            let c = self.metric_gradient_coeffs(k, grad);
            let v = (n.frame[0] * c[0] + n.frame[1] * c[1]) * n.rho;
            for l in 0..3 {
                field[l].values[k] = v[l];
            }
        }
        let div = SphereFunction::divergence(&field);
        div.zip_with(&self.area_density(), |a, b| a / b)
    }

    /// W = Δ_g H + (|h°|² + R̃ic(ν,ν)) H.
    pub fn willmore_operator(&self) -> &SphereFunction {
        self.willmore.get_or_init(|| {
            let lap = self.laplacian_from_gradient(self.mean_curvature_gradient());
            let mut w = lap;
            for (k, n) in self.nodes.iter().enumerate() {
                w.values[k] += (n.tracefree_sq() + n.ricci_nn) * n.mean;
            }
            w
        })
    }

    /// Geometry at the equator nodes from spectrally interpolated derivatives.
    fn equator_nodes(&self) -> std::result::Result<Vec<NodeGeometry>, String> {
        let g = &self.grid;
        let ev: Vec<Vec<f64>> = self.fields.iter().map(|f| f.equator_values()).collect();
        let mut samples = vec![0.0; ev.len()];
        (0..g.n_phi())
            .map(|j| {
                let (omega, et, ep) = g.equator_point(j);
                for (s, f) in samples.iter_mut().zip(&ev) {
                    *s = f[j];
                }
                self.kind.node(omega, [et, ep], &samples, self.metric.as_ref()).map_err(|r| format!("equator node {j}: {r}"))
            })
            .collect()
    }

    pub fn boundary_trace(&self) -> Result<&BoundaryTrace> {
        self.boundary
            .get_or_init(|| self.compute_boundary())
            .as_ref()
            .map_err(|r| WillmoreError::Immersion { theta: std::f64::consts::FRAC_PI_2, phi: f64::NAN, reason: r.clone() })
    }

    fn compute_boundary(&self) -> std::result::Result<BoundaryTrace, String> {
        let g = &self.grid;
        let nodes = self.equator_nodes()?;
        let gh: Vec<Vec<f64>> = self.mean_curvature_gradient().iter().map(|f| f.equator_values()).collect();
        let np = g.n_phi();
        let mut t = BoundaryTrace {
            phi: g.phi_nodes().to_vec(),
            nodes: nodes.clone(),
            nu: Vec::with_capacity(np),
            mean: Vec::with_capacity(np),
            dh_deta: Vec::with_capacity(np),
            h_tau_eta: Vec::with_capacity(np),
            plane_form_nn: Vec::with_capacity(np),
            plane_form_nt: Vec::with_capacity(np),
            plane_form_tt: Vec::with_capacity(np),
            kappa_g: Vec::with_capacity(np),
            eta: Vec::with_capacity(np),
            tau: Vec::with_capacity(np),
            ds: Vec::with_capacity(np),
            ortho: Vec::with_capacity(np),
            natural: Vec::with_capacity(np),
            phi_step: g.phi_step(),
        };
        for (j, n) in nodes.iter().enumerate() {
            // interior conormal: the covector −dθ raised with g
            let cov = nalgebra::Vector2::new(-1.0, 0.0);
            let up = n.ginv * cov;
            let eta = up / cov.dot(&up).sqrt();
            let eta = [eta[0], eta[1]];
            let tau = [0.0, 1.0 / n.g[(1, 1)].sqrt()];
            let dgrad = Vector3::new(gh[0][j], gh[1][j], gh[2][j]);
            let dh = [n.frame[0].dot(&dgrad), n.frame[1].dot(&dgrad)];
            let dh_deta = eta[0] * dh[0] + eta[1] * dh[1];
            let hm = nalgebra::Vector2::new(eta[0], eta[1]);
            let tm = nalgebra::Vector2::new(tau[0], tau[1]);
            let h_tau_eta = tm.dot(&(n.h * hm));
            let gt_inv = n.ambient.g.try_inverse().ok_or("ambient metric singular")?;
            let g33 = gt_inv[(2, 2)];
            let plane = |x: &Vector3<f64>, y: &Vector3<f64>| -> f64 {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += n.ambient.gamma[2][a][b] * x[a] * y[b];
                    }
                }
                s / g33.sqrt()
            };
            let tvec = n.push(tau);
            let evec = n.push(eta);
            let gamma_p = n.df[1];
            let acc = n.d2f[1][1] + gamma_apply(&n.ambient.gamma, &gamma_p, &gamma_p);
            let speed2 = gamma_p.dot(&(n.ambient.g * gamma_p));
            let kappa = acc.dot(&(n.ambient.g * evec)) / speed2;
            let pnn = plane(&n.nu, &n.nu);
            t.nu.push(n.nu);
            t.mean.push(n.mean);
            t.dh_deta.push(dh_deta);
            t.h_tau_eta.push(h_tau_eta);
            t.plane_form_nn.push(pnn);
            t.plane_form_nt.push(plane(&n.nu, &tvec));
            t.plane_form_tt.push(plane(&tvec, &tvec));
            t.kappa_g.push(kappa);
            t.eta.push(eta);
            t.tau.push(tau);
            t.ds.push(n.g[(1, 1)].sqrt());
            t.ortho.push(n.nu[2] / g33.sqrt());
            t.natural.push(dh_deta + pnn * n.mean);
        }
        Ok(t)
    }

    /// Splits the radial field φ̃ω into φν + df(ξ); returns φ and ξ as a Cartesian tangent field on S².
    pub fn split_variation(&self, field: &[SphereFunction; 3]) -> (SphereFunction, [SphereFunction; 3]) {
        let g = &self.grid;
        let mut phi = SphereFunction::zeros(g);
        let mut xi = [SphereFunction::zeros(g), SphereFunction::zeros(g), SphereFunction::zeros(g)];
        for (k, n) in self.nodes.iter().enumerate() {
            let v = Vector3::new(field[0].values[k], field[1].values[k], field[2].values[k]);
            let gv = n.ambient.g * v;
            phi.values[k] = gv.dot(&n.nu);
            let c = nalgebra::Vector2::new(gv.dot(&n.df[0]), gv.dot(&n.df[1]));
            let up = n.ginv * c;
            let x = n.frame[0] * up[0] + n.frame[1] * up[1];
            for l in 0..3 {
                xi[l].values[k] = x[l];
            }
        }
        (phi, xi)
    }

    /// ½∫W φ dμ_g + ½∮ ω(η) ds_g with ω(η) = φ ∂H/∂η − (∂φ/∂η) H − ½H² g(ξ, η).
    pub fn first_variation_willmore(&self, phi: &SphereFunction, xi: &[SphereFunction; 3]) -> Result<f64> {
        let interior = 0.5 * self.integrate(&self.willmore_operator().mul(phi));
        let bt = self.boundary_trace()?;
        let phi_b = phi.equator_values();
        let gphi: Vec<Vec<f64>> = phi.gradient_cartesian().iter().map(|f| f.equator_values()).collect();
        let xi_b: Vec<Vec<f64>> = xi.iter().map(|f| f.equator_values()).collect();
        let mut omega = Vec::with_capacity(bt.nodes.len());
        for (j, n) in bt.nodes.iter().enumerate() {
            let eta = bt.eta[j];
            let d = Vector3::new(gphi[0][j], gphi[1][j], gphi[2][j]);
            let dphi_deta = eta[0] * n.frame[0].dot(&d) + eta[1] * n.frame[1].dot(&d);
            let xv = Vector3::new(xi_b[0][j], xi_b[1][j], xi_b[2][j]);
            let xc = n.frame_components(&xv);
            let g_xi_eta = nalgebra::Vector2::new(xc[0], xc[1]).dot(&(n.g * nalgebra::Vector2::new(eta[0], eta[1])));
            let hm = bt.mean[j];
            omega.push(phi_b[j] * bt.dh_deta[j] - dphi_deta * hm - 0.5 * hm * hm * g_xi_eta);
        }
        Ok(interior + 0.5 * bt.integrate(&omega))
    }

    /// The textbook radial-graph normal −(ω − g^{ab} g̃(ω, ∂_a f) ∂_b f)/|…|, for cross-checks.
    pub fn radial_normal_formula(&self, k: usize) -> Vector3<f64> {
        let n = &self.nodes[k];
        let gt = n.ambient.g;
        let w = n.omega;
        let c = nalgebra::Vector2::new(w.dot(&(gt * n.df[0])), w.dot(&(gt * n.df[1])));
        let up = n.ginv * c;
        let tang = n.df[0] * up[0] + n.df[1] * up[1];
        let v = w - tang;
        let norm2 = w.dot(&(gt * w)) - c.dot(&up);
        -v / norm2.sqrt()
    }
}
