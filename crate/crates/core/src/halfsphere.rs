//! Spectral grid on the upper half-sphere S²₊ = {ω ∈ S² : ω₃ ≥ 0}.
//!
//! Functions are sampled at Gauss–Legendre nodes in x = cosθ ∈ (0, 1) times
//! equispaced azimuths. Each azimuthal Fourier mode of a smooth function is a
//! polynomial in x when m is even and sinθ times a polynomial when m is odd;
//! all θ-operations act on that polynomial factor, which keeps the pole
//! regular without a pole node.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, WillmoreError};

pub const DEFAULT_N_THETA: usize = 32;
pub const DEFAULT_N_PHI: usize = 64;

/// Gauss–Legendre nodes and weights on [-1, 1], nodes in decreasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for k in 1..=n {
        let mut z = (std::f64::consts::PI * (k as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        t.push(z);
        w.push(2.0 / ((1.0 - z * z) * dp * dp));
    }
    (t, w)
}

/// Legendre polynomial P_n(z) and its derivative.
pub fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, z);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Azimuthal Fourier coefficients of a grid function:
/// f(x, φ) = Σ_m a_m(x) cos mφ + b_m(x) sin mφ, stored mode-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Modes {
    pub n: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl Modes {
    pub fn zeros(n: usize, n_modes: usize) -> Self {
        Modes { n, cos: vec![0.0; n * n_modes], sin: vec![0.0; n * n_modes] }
    }
    pub fn cos_profile(&self, m: usize) -> &[f64] {
        &self.cos[m * self.n..(m + 1) * self.n]
    }
    pub fn sin_profile(&self, m: usize) -> &[f64] {
        &self.sin[m * self.n..(m + 1) * self.n]
    }
    pub fn cos_profile_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.cos[m * self.n..(m + 1) * self.n]
    }
    pub fn sin_profile_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.sin[m * self.n..(m + 1) * self.n]
    }
}

pub struct HalfSphereGrid {
    n_theta: usize,
    n_phi: usize,
    theta: Vec<f64>,
    x: Vec<f64>,
    s: Vec<f64>,
    weights: Vec<f64>,
    phi: Vec<f64>,
    bary: Vec<f64>,
    diff: DMatrix<f64>,
    diff2: DMatrix<f64>,
    equator_row: Vec<f64>,
    equator_diff_row: Vec<f64>,
    legendre: DMatrix<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for HalfSphereGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HalfSphereGrid({}x{})", self.n_theta, self.n_phi)
    }
}

impl HalfSphereGrid {
    pub fn new(n_theta: usize, n_phi: usize) -> Result<Arc<Self>> {
        if !(4..=256).contains(&n_theta) {
            return Err(WillmoreError::Config(format!("n_theta = {n_theta} outside [4, 256]")));
        }
        if n_phi < 4 || n_phi % 2 != 0 {
            return Err(WillmoreError::Config(format!("n_phi = {n_phi} must be even and >= 4")));
        }
        let n = n_theta;
        let (t, omega) = gauss_legendre(n);
        let x: Vec<f64> = t.iter().map(|ti| 0.5 * (1.0 + ti)).collect();
        let weights: Vec<f64> = omega.iter().map(|o| 0.5 * o).collect();
        let s: Vec<f64> = x.iter().map(|xi| (1.0 - xi * xi).sqrt()).collect();
        let theta: Vec<f64> = x.iter().map(|xi| xi.acos()).collect();
        let bary: Vec<f64> = (0..n)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * ((1.0 - t[j] * t[j]) * omega[j]).sqrt()
            })
            .collect();

        let mut diff = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    let d = (bary[j] / bary[i]) / (x[i] - x[j]);
                    diff[(i, j)] = d;
                    diag -= d;
                }
            }
            diff[(i, i)] = diag;
        }
        let diff2 = &diff * &diff;

        let equator_row = barycentric_row(&x, &bary, 0.0);
        let dvals = diff.transpose() * DVector::from_column_slice(&equator_row);
        let equator_diff_row = dvals.as_slice().to_vec();

        let mut legendre = DMatrix::zeros(n, n);
        for i in 0..n {
            let (mut p0, mut p1) = (1.0, t[i]);
            for k in 0..n {
                let pk = match k {
                    0 => 1.0,
                    1 => t[i],
                    _ => {
                        let p2 = ((2 * k - 1) as f64 * t[i] * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                        p2
                    }
                };
                legendre[(k, i)] = (2 * k + 1) as f64 * weights[i] * pk;
            }
        }

        let step = 2.0 * std::f64::consts::PI / n_phi as f64;
        let phi = (0..n_phi).map(|j| j as f64 * step).collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_phi);
        let inv = planner.plan_fft_inverse(n_phi);
        Ok(Arc::new(HalfSphereGrid {
            n_theta,
            n_phi,
            theta,
            x,
            s,
            weights,
            phi,
            bary,
            diff,
            diff2,
            equator_row,
            equator_diff_row,
            legendre,
            fwd,
            inv,
        }))
    }

    pub fn default_grid() -> Arc<Self> {
        Self::new(DEFAULT_N_THETA, DEFAULT_N_PHI).expect("default grid is valid")
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn n_phi(&self) -> usize {
        self.n_phi
    }
    pub fn len(&self) -> usize {
        self.n_theta * self.n_phi
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Colatitudes, strictly increasing.
    pub fn theta_nodes(&self) -> &[f64] {
        &self.theta
    }
    /// cosθ at the nodes (decreasing).
    pub fn x_nodes(&self) -> &[f64] {
        &self.x
    }
    /// sinθ at the nodes.
    pub fn sin_nodes(&self) -> &[f64] {
        &self.s
    }
    /// Weights for ∫₀^{π/2} g(θ) sinθ dθ.
    pub fn theta_weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn phi_nodes(&self) -> &[f64] {
        &self.phi
    }
    /// Weight of every node in the surface quadrature, in storage order.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let step = self.phi_step();
        self.weights.iter().flat_map(|w| std::iter::repeat(w * step).take(self.n_phi)).collect()
    }

    pub fn phi_step(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n_phi as f64
    }
    /// Number of stored Fourier modes, m = 0..=n_phi/2.
    pub fn n_modes(&self) -> usize {
        self.n_phi / 2 + 1
    }
    pub fn nyquist(&self) -> usize {
        self.n_phi / 2
    }
    pub fn diff_matrix(&self) -> &DMatrix<f64> {
        &self.diff
    }
    pub fn legendre_matrix(&self) -> &DMatrix<f64> {
        &self.legendre
    }
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_phi + j
    }

    /// Unit position ω on the sphere at node (i, j).
    pub fn point(&self, i: usize, j: usize) -> Vector3<f64> {
        let (sp, cp) = self.phi[j].sin_cos();
        Vector3::new(self.s[i] * cp, self.s[i] * sp, self.x[i])
    }
    /// Orthonormal frame (e_θ, e_φ) at node (i, j).
    pub fn frame(&self, i: usize, j: usize) -> (Vector3<f64>, Vector3<f64>) {
        let (sp, cp) = self.phi[j].sin_cos();
        (Vector3::new(self.x[i] * cp, self.x[i] * sp, -self.s[i]), Vector3::new(-sp, cp, 0.0))
    }
    /// Point and frame at the equator, azimuth index j.
    pub fn equator_point(&self, j: usize) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (sp, cp) = self.phi[j].sin_cos();
        (Vector3::new(cp, sp, 0.0), Vector3::new(0.0, 0.0, -1.0), Vector3::new(-sp, cp, 0.0))
    }

    pub fn analyze(&self, values: &[f64]) -> Modes {
        let n = self.n_theta;
        let np = self.n_phi;
        let nm = self.n_modes();
        let mut modes = Modes::zeros(n, nm);
        let mut buf = vec![Complex::new(0.0, 0.0); np];
        let scale = 1.0 / np as f64;
        for i in 0..n {
            for j in 0..np {
                buf[j] = Complex::new(values[i * np + j], 0.0);
            }
            self.fwd.process(&mut buf);
            modes.cos[i] = buf[0].re * scale;
            for m in 1..nm {
                let c = buf[m];
                if m == np / 2 {
                    modes.cos[m * n + i] = c.re * scale;
                } else {
                    modes.cos[m * n + i] = 2.0 * c.re * scale;
                    modes.sin[m * n + i] = -2.0 * c.im * scale;
                }
            }
        }
        modes
    }

    pub fn synthesize(&self, modes: &Modes) -> Vec<f64> {
        let n = self.n_theta;
        let np = self.n_phi;
        let mut out = vec![0.0; n * np];
        let mut ring_a = vec![0.0; self.n_modes()];
        let mut ring_b = vec![0.0; self.n_modes()];
        for i in 0..n {
            for m in 0..self.n_modes() {
                ring_a[m] = modes.cos[m * n + i];
                ring_b[m] = modes.sin[m * n + i];
            }
            let ring = self.synthesize_ring(&ring_a, &ring_b);
            out[i * np..(i + 1) * np].copy_from_slice(&ring);
        }
        out
    }

    /// Values on the azimuth nodes of a single ring from its Fourier coefficients.
    pub fn synthesize_ring(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let np = self.n_phi;
        let mut buf = vec![Complex::new(0.0, 0.0); np];
        buf[0] = Complex::new(a[0], 0.0);
        for m in 1..self.n_modes() {
            if m == np / 2 {
                buf[m] = Complex::new(a[m], 0.0);
            } else {
                let c = Complex::new(0.5 * a[m], -0.5 * b[m]);
                buf[m] = c;
                buf[np - m] = c.conj();
            }
        }
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    /// Fourier coefficients of a single ring of n_phi samples.
    pub fn analyze_ring(&self, ring: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let np = self.n_phi;
        let nm = self.n_modes();
        let mut buf: Vec<Complex<f64>> = ring.iter().map(|v| Complex::new(*v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let scale = 1.0 / np as f64;
        let mut a = vec![0.0; nm];
        let mut b = vec![0.0; nm];
        a[0] = buf[0].re * scale;
        for m in 1..nm {
            if m == np / 2 {
                a[m] = buf[m].re * scale;
            } else {
                a[m] = 2.0 * buf[m].re * scale;
                b[m] = -2.0 * buf[m].im * scale;
            }
        }
        (a, b)
    }

    /// Polynomial factor of a mode profile: f itself for even m, f/sinθ for odd m.
    pub fn poly_factor(&self, m: usize, f: &[f64]) -> Vec<f64> {
        if m % 2 == 0 {
            f.to_vec()
        } else {
            f.iter().zip(&self.s).map(|(v, s)| v / s).collect()
        }
    }

    /// ∂_x of a mode profile at the nodes.
    pub fn dx_profile(&self, m: usize, f: &[f64], out: &mut [f64]) {
        let n = self.n_theta;
        let p = self.poly_factor(m, f);
        for i in 0..n {
            let mut d = 0.0;
            for j in 0..n {
                d += self.diff[(i, j)] * p[j];
            }
            out[i] = if m % 2 == 0 { d } else { self.s[i] * d - self.x[i] * p[i] / self.s[i] };
        }
    }

    /// Δ_{S²} restricted to mode m, applied to a profile.
    pub fn laplacian_profile(&self, m: usize, f: &[f64], out: &mut [f64]) {
        let n = self.n_theta;
        let p = self.poly_factor(m, f);
        let mf = m as f64;
        for i in 0..n {
            let (mut d1, mut d2) = (0.0, 0.0);
            for j in 0..n {
                d1 += self.diff[(i, j)] * p[j];
                d2 += self.diff2[(i, j)] * p[j];
            }
            let x = self.x[i];
            let s = self.s[i];
            out[i] = if m % 2 == 0 {
                (1.0 - x * x) * d2 - 2.0 * x * d1 - mf * mf * p[i] / (1.0 - x * x)
            } else {
                s * s * s * d2 - 4.0 * x * s * d1 - 2.0 * s * p[i] + (1.0 - mf * mf) * p[i] / s
            };
        }
    }

    /// Value of a mode profile at the equator.
    pub fn equator_value_profile(&self, m: usize, f: &[f64]) -> f64 {
        let p = self.poly_factor(m, f);
        dot(&self.equator_row, &p)
    }

    /// ∂_x of a mode profile at the equator.
    pub fn equator_dx_profile(&self, m: usize, f: &[f64]) -> f64 {
        let p = self.poly_factor(m, f);
        dot(&self.equator_diff_row, &p)
    }

    /// Interpolation row of the polynomial factor at the equator.
    pub fn equator_row(&self) -> &[f64] {
        &self.equator_row
    }
    pub fn equator_diff_row(&self) -> &[f64] {
        &self.equator_diff_row
    }

    /// Value of a mode profile at arbitrary x ∈ [0, 1].
    pub fn eval_profile(&self, m: usize, f: &[f64], x: f64) -> f64 {
        let p = self.poly_factor(m, f);
        let row = barycentric_row(&self.x, &self.bary, x);
        let v = dot(&row, &p);
        if m % 2 == 0 {
            v
        } else {
            v * (1.0 - x * x).max(0.0).sqrt()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn barycentric_row(nodes: &[f64], bary: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    if let Some(k) = nodes.iter().position(|xi| *xi == x) {
        let mut row = vec![0.0; n];
        row[k] = 1.0;
        return row;
    }
    let terms: Vec<f64> = (0..n).map(|j| bary[j] / (x - nodes[j])).collect();
    let total: f64 = terms.iter().sum();
    terms.iter().map(|t| t / total).collect()
}

/// Real-valued samples on a half-sphere grid.
#[derive(Clone, Debug)]
pub struct SphereFunction {
    pub grid: Arc<HalfSphereGrid>,
    pub values: Vec<f64>,
}

impl SphereFunction {
    pub fn zeros(grid: &Arc<HalfSphereGrid>) -> Self {
        SphereFunction { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &Arc<HalfSphereGrid>, c: f64) -> Self {
        SphereFunction { grid: grid.clone(), values: vec![c; grid.len()] }
    }

    /// Samples f(ω) at every node.
    pub fn from_fn(grid: &Arc<HalfSphereGrid>, f: impl Fn(Vector3<f64>) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.n_theta() {
            for j in 0..grid.n_phi() {
                values.push(f(grid.point(i, j)));
            }
        }
        SphereFunction { grid: grid.clone(), values }
    }

    pub fn from_values(grid: &Arc<HalfSphereGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(WillmoreError::Config(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(SphereFunction { grid: grid.clone(), values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n_phi() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        SphereFunction { grid: self.grid.clone(), values: self.values.iter().map(|v| f(*v)).collect() }
    }

    pub fn zip_with(&self, other: &SphereFunction, f: impl Fn(f64, f64) -> f64) -> Self {
        SphereFunction {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &SphereFunction) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SphereFunction) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &SphereFunction) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn modes(&self) -> Modes {
        self.grid.analyze(&self.values)
    }

    pub fn from_modes(grid: &Arc<HalfSphereGrid>, modes: &Modes) -> Self {
        SphereFunction { grid: grid.clone(), values: grid.synthesize(modes) }
    }

    /// ∫_{S²₊} f dμ.
    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    /// Values on the equator at the azimuth nodes.
    pub fn equator_values(&self) -> Vec<f64> {
        let g = &self.grid;
        let modes = self.modes();
        let nm = g.n_modes();
        let mut a = vec![0.0; nm];
        let mut b = vec![0.0; nm];
        for m in 0..nm {
            a[m] = g.equator_value_profile(m, modes.cos_profile(m));
            b[m] = g.equator_value_profile(m, modes.sin_profile(m));
        }
        g.synthesize_ring(&a, &b)
    }

    /// ∂_x f = −(1/sinθ)∂_θ f at the nodes.
    pub fn dx(&self) -> SphereFunction {
        let g = &self.grid;
        let modes = self.modes();
        let mut out = Modes::zeros(g.n_theta(), g.n_modes());
        for m in 0..g.n_modes() {
            g.dx_profile(m, modes.cos_profile(m), out.cos_profile_mut(m));
            g.dx_profile(m, modes.sin_profile(m), out.sin_profile_mut(m));
        }
        SphereFunction::from_modes(g, &out)
    }

    /// ∂_φ f (the Nyquist mode is dropped).
    pub fn dphi(&self) -> SphereFunction {
        let g = &self.grid;
        let modes = self.modes();
        let mut out = Modes::zeros(g.n_theta(), g.n_modes());
        for m in 1..g.nyquist() {
            let mf = m as f64;
            for i in 0..g.n_theta() {
                out.cos[m * g.n_theta() + i] = mf * modes.sin[m * g.n_theta() + i];
                out.sin[m * g.n_theta() + i] = -mf * modes.cos[m * g.n_theta() + i];
            }
        }
        SphereFunction::from_modes(g, &out)
    }

    /// Tangential gradient as a Cartesian vector field (three smooth scalars).
    pub fn gradient_cartesian(&self) -> [SphereFunction; 3] {
        let g = &self.grid;
        let fx = self.dx();
        let fp = self.dphi();
        let mut out = [SphereFunction::zeros(g), SphereFunction::zeros(g), SphereFunction::zeros(g)];
        for i in 0..g.n_theta() {
            let s = g.s[i];
            for j in 0..g.n_phi() {
                let k = g.index(i, j);
                let ft = -s * fx.values[k];
                let fq = fp.values[k] / s;
                let (et, ep) = g.frame(i, j);
                let v = et * ft + ep * fq;
                for c in 0..3 {
                    out[c].values[k] = v[c];
                }
            }
        }
        out
    }

    /// Components (∂_θ f, (1/sinθ) ∂_φ f) in the orthonormal frame (e_θ, e_φ).
    pub fn gradient(&self) -> (SphereFunction, SphereFunction) {
        let g = &self.grid;
        let fx = self.dx();
        let fp = self.dphi();
        let mut ft = SphereFunction::zeros(g);
        let mut fq = SphereFunction::zeros(g);
        for i in 0..g.n_theta() {
            for j in 0..g.n_phi() {
                let k = g.index(i, j);
                ft.values[k] = -g.s[i] * fx.values[k];
                fq.values[k] = fp.values[k] / g.s[i];
            }
        }
        (ft, fq)
    }

    pub fn laplace_beltrami(&self) -> SphereFunction {
        laplace_beltrami(self)
    }

    /// ∂f/∂η on the equator, η the interior conormal (= e₃ there).
    pub fn normal_derivative_equator(&self) -> Vec<f64> {
        normal_derivative_equator(self)
    }

    /// Spectral interpolation onto another grid.
    pub fn resample(&self, target: &Arc<HalfSphereGrid>) -> SphereFunction {
        let src = &self.grid;
        let modes = self.modes();
        let nt = target.n_theta();
        let mut out = Modes::zeros(nt, target.n_modes());
        let keep = src.nyquist().min(target.nyquist());
        for m in 0..keep {
            for i in 0..nt {
                let x = target.x[i];
                out.cos[m * nt + i] = src.eval_profile(m, modes.cos_profile(m), x);
                out.sin[m * nt + i] = src.eval_profile(m, modes.sin_profile(m), x);
            }
        }
        SphereFunction::from_modes(target, &out)
    }

    /// Divergence on S² of the tangent Cartesian field (v₀, v₁, v₂).
    pub fn divergence(field: &[SphereFunction; 3]) -> SphereFunction {
        let g = &field[0].grid;
        let mut out = SphereFunction::zeros(g);
        for (c, comp) in field.iter().enumerate() {
            let grad = comp.gradient_cartesian();
            for k in 0..g.len() {
                out.values[k] += grad[c].values[k];
            }
        }
        out
    }
}

/// Quadrature of ∫_{S²₊} f dμ_{S²}.
pub fn integrate(f: &SphereFunction) -> f64 {
    let g = &f.grid;
    let np = g.n_phi();
    let mut total = 0.0;
    for i in 0..g.n_theta() {
        let ring: f64 = f.values[i * np..(i + 1) * np].iter().sum();
        total += g.weights[i] * ring;
    }
    total * g.phi_step()
}

/// Trapezoid rule on the equator for a function given on the grid.
pub fn boundary_integrate(f: &SphereFunction) -> f64 {
    let vals = f.equator_values();
    boundary_integrate_values(&vals, f.grid.phi_step())
}

/// Trapezoid rule for equator samples.
pub fn boundary_integrate_values(vals: &[f64], phi_step: f64) -> f64 {
    vals.iter().sum::<f64>() * phi_step
}

pub fn laplace_beltrami(f: &SphereFunction) -> SphereFunction {
    let g = &f.grid;
    let modes = f.modes();
    let mut out = Modes::zeros(g.n_theta(), g.n_modes());
    for m in 0..g.n_modes() {
        g.laplacian_profile(m, modes.cos_profile(m), out.cos_profile_mut(m));
        g.laplacian_profile(m, modes.sin_profile(m), out.sin_profile_mut(m));
    }
    SphereFunction::from_modes(g, &out)
}

pub fn normal_derivative_equator(f: &SphereFunction) -> Vec<f64> {
    let g = &f.grid;
    let modes = f.modes();
    let nm = g.n_modes();
    let mut a = vec![0.0; nm];
    let mut b = vec![0.0; nm];
    for m in 0..nm {
        a[m] = g.equator_dx_profile(m, modes.cos_profile(m));
        b[m] = g.equator_dx_profile(m, modes.sin_profile(m));
    }
    g.synthesize_ring(&a, &b)
}

/// Mode-m Laplacian acting on the polynomial factor, as a matrix whose output
/// is the polynomial factor of Δf (divided by sinθ for odd m).
fn laplacian_poly_matrix(g: &HalfSphereGrid, m: usize) -> DMatrix<f64> {
    let n = g.n_theta();
    let mut l = DMatrix::zeros(n, n);
    let mf = m as f64;
    for i in 0..n {
        let x = g.x[i];
        let s = g.s[i];
        for j in 0..n {
            l[(i, j)] = if m % 2 == 0 {
                (1.0 - x * x) * g.diff2[(i, j)] - 2.0 * x * g.diff[(i, j)]
            } else {
                s * s * g.diff2[(i, j)] - 4.0 * x * g.diff[(i, j)]
            };
        }
        l[(i, i)] += if m % 2 == 0 {
            -mf * mf / (1.0 - x * x)
        } else {
            -2.0 + (1.0 - mf * mf) / (s * s)
        };
    }
    l
}

/// The unique v with Δv constant, ∂v/∂η = β on the equator and ∫v = 0.
/// Each Fourier mode is a two-point problem in x solved by the Legendre tau method.
pub fn solve_neumann_y0(grid: &Arc<HalfSphereGrid>, beta: &[f64]) -> Result<SphereFunction> {
    let g = grid.as_ref();
    let n = g.n_theta();
    if beta.len() != g.n_phi() {
        return Err(WillmoreError::Config(format!(
            "boundary data has {} samples, grid has {}",
            beta.len(),
            g.n_phi()
        )));
    }
    let (ba, bb) = g.analyze_ring(beta);
    let mut out = Modes::zeros(n, g.n_modes());
    for m in 0..g.n_modes() {
        let tau = g.legendre.rows(0, n - 1) * laplacian_poly_matrix(g, m);
        let size = if m == 0 { n + 1 } else { n };
        let mut a = DMatrix::zeros(size, size);
        a.view_mut((0, 0), (n - 1, n)).copy_from(&tau);
        for j in 0..n {
            a[(n - 1, j)] = g.equator_diff_row[j];
        }
        if m == 0 {
            // Δv = c: c enters the constant Legendre coefficient.
            a[(0, n)] = -1.0;
            for j in 0..n {
                a[(n, j)] = g.weights[j];
            }
        }
        let lu = a.lu();
        for (coef, target) in [(&ba, 0usize), (&bb, 1usize)] {
            if target == 1 && (m == 0 || m == g.nyquist()) {
                continue;
            }
            let mut rhs = DVector::zeros(size);
            rhs[n - 1] = coef[m];
            let sol = lu.solve(&rhs).ok_or_else(|| {
                WillmoreError::Singular(format!("Neumann problem for mode {m} is singular"))
            })?;
            let prof = if target == 0 { out.cos_profile_mut(m) } else { out.sin_profile_mut(m) };
            for i in 0..n {
                prof[i] = if m % 2 == 0 { sol[i] } else { sol[i] * g.s[i] };
            }
        }
    }
    Ok(SphereFunction::from_modes(grid, &out))
}

/// Split w = u + v with ∂u/∂η = 0 and v ∈ Y₀ (Δv constant, ∫v = 0).
pub fn decompose_x0_y0(w: &SphereFunction) -> Result<(SphereFunction, SphereFunction)> {
    let beta = normal_derivative_equator(w);
    let v = solve_neumann_y0(&w.grid, &beta)?;
    Ok((w.sub(&v), v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Real spherical harmonic Y_k^m, orthonormal on the full sphere;
/// m ≥ 0 uses cos mφ, m < 0 uses sin |m|φ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HarmonicIndex {
    pub degree: usize,
    pub order: i64,
}

impl HarmonicIndex {
    pub fn new(degree: usize, order: i64) -> Result<Self> {
        if order.unsigned_abs() as usize > degree {
            return Err(WillmoreError::Config(format!("|m| = {} exceeds k = {degree}", order.abs())));
        }
        Ok(HarmonicIndex { degree, order })
    }

    /// Parity under z ↦ −z.
    pub fn parity(&self) -> Parity {
        if (self.degree - self.order.unsigned_abs() as usize) % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    /// λ_k = k(k+1).
    pub fn eigenvalue(&self) -> f64 {
        (self.degree * (self.degree + 1)) as f64
    }

    pub fn eval(&self, w: Vector3<f64>) -> f64 {
        let x = w.z.clamp(-1.0, 1.0);
        let phi = w.y.atan2(w.x);
        let m = self.order.unsigned_abs() as usize;
        let k = self.degree;
        let p = normalized_assoc_legendre(k, m, x);
        let mut v = p;
        if self.order > 0 {
            v *= std::f64::consts::SQRT_2 * (m as f64 * phi).cos();
        } else if self.order < 0 {
            v *= std::f64::consts::SQRT_2 * (m as f64 * phi).sin();
        }
        v
    }

    pub fn sample(&self, grid: &Arc<HalfSphereGrid>) -> SphereFunction {
        SphereFunction::from_fn(grid, |w| self.eval(w))
    }

    /// All harmonics of degree ≤ k_max with the given parity.
    pub fn all_with_parity(k_max: usize, parity: Parity) -> Vec<HarmonicIndex> {
        let mut out = Vec::new();
        for k in 0..=k_max {
            for m in -(k as i64)..=(k as i64) {
                let h = HarmonicIndex { degree: k, order: m };
                if h.parity() == parity {
                    out.push(h);
                }
            }
        }
        out
    }
}

/// sqrt((2k+1)/(4π) (k−m)!/(k+m)!) P_k^m(x), without the Condon–Shortley phase.
fn normalized_assoc_legendre(k: usize, m: usize, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    for i in 1..=m {
        pmm *= s * ((2 * i + 1) as f64 / (2 * i) as f64).sqrt();
    }
    if k == m {
        return pmm;
    }
    let mut pm1 = x * ((2 * m + 3) as f64).sqrt() * pmm;
    if k == m + 1 {
        return pm1;
    }
    let mut pm0 = pmm;
    for l in (m + 2)..=k {
        let lf = l as f64;
        let mf = m as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
        let pl = a * (x * pm1 - b * pm0);
        pm0 = pm1;
        pm1 = pl;
    }
    pm1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn grid() -> Arc<HalfSphereGrid> {
        HalfSphereGrid::default_grid()
    }

    #[test]
    fn quadrature_basics() {
        let g = grid();
        assert_abs_diff_eq!(SphereFunction::constant(&g, 1.0).integrate(), 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(SphereFunction::from_fn(&g, |w| w.z).integrate(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(SphereFunction::from_fn(&g, |w| w.x).integrate(), 0.0, epsilon = 1e-13);
        // exact for polynomials in cosθ up to degree 2n-1
        let f = SphereFunction::from_fn(&g, |w| w.z.powi(63));
        assert_abs_diff_eq!(f.integrate(), 2.0 * PI / 64.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_invariants() {
        let g = grid();
        assert!(g.theta_nodes().windows(2).all(|t| t[0] < t[1]));
        assert!(g.theta_nodes()[0] > 0.0);
        assert!(*g.theta_nodes().last().unwrap() < PI / 2.0);
        assert!(HalfSphereGrid::new(16, 33).is_err());
    }

    #[test]
    fn boundary_integrals() {
        let g = grid();
        assert_abs_diff_eq!(boundary_integrate(&SphereFunction::constant(&g, 1.0)), 2.0 * PI, epsilon = 1e-12);
        let f = SphereFunction::from_fn(&g, |w| w.x * w.x);
        assert_abs_diff_eq!(boundary_integrate(&f), PI, epsilon = 1e-12);
        let f = SphereFunction::from_fn(&g, |w| w.z);
        assert_abs_diff_eq!(boundary_integrate(&f), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_eigenfunctions() {
        let g = grid();
        for k in 0..=8 {
            for h in HarmonicIndex::all_with_parity(k, Parity::Even).into_iter().filter(|h| h.degree == k) {
                let f = h.sample(&g);
                let lf = f.laplace_beltrami();
                let err = lf.add(&f.scale(h.eigenvalue())).max_abs();
                assert!(err <= 1e-8 * f.max_abs().max(1.0) * (1.0 + h.eigenvalue()), "{h:?}: {err}");
            }
        }
        let f = SphereFunction::from_fn(&g, |w| w.z);
        assert!(f.laplace_beltrami().add(&f.scale(2.0)).max_abs() < 1e-10);
    }

    #[test]
    fn odd_harmonics_also_resolved() {
        let g = grid();
        for h in HarmonicIndex::all_with_parity(7, Parity::Odd) {
            let f = h.sample(&g);
            let err = f.laplace_beltrami().add(&f.scale(h.eigenvalue())).max_abs();
            assert!(err < 1e-8, "{h:?}: {err}");
        }
    }

    #[test]
    fn divergence_of_gradient_is_laplacian() {
        let g = grid();
        let f = SphereFunction::from_fn(&g, |w| (w.x + 0.3 * w.y * w.z).exp() + w.z.powi(3));
        let lap = f.laplace_beltrami();
        let div = SphereFunction::divergence(&f.gradient_cartesian());
        assert!(lap.sub(&div).max_abs() < 1e-9);
    }

    #[test]
    fn gradient_of_height() {
        let g = grid();
        let f = SphereFunction::from_fn(&g, |w| w.z);
        let (ft, fq) = f.gradient();
        for i in 0..g.n_theta() {
            for j in 0..g.n_phi() {
                assert_abs_diff_eq!(ft.get(i, j), -g.sin_nodes()[i], epsilon = 1e-12);
                assert_abs_diff_eq!(fq.get(i, j), 0.0, epsilon = 1e-12);
            }
        }
        let one = SphereFunction::constant(&g, 1.0).gradient_cartesian();
        assert!(one.iter().all(|c| c.max_abs() < 1e-12));
    }

    #[test]
    fn dirichlet_energy_of_y20() {
        let g = grid();
        let y = HarmonicIndex::new(2, 0).unwrap().sample(&g);
        let grad = y.gradient_cartesian();
        let e = SphereFunction::from_values(
            &g,
            (0..g.len()).map(|k| grad.iter().map(|c| c.values[k] * c.values[k]).sum()).collect(),
        )
        .unwrap();
        let n2 = y.mul(&y).integrate();
        assert_abs_diff_eq!(2.0 * e.integrate(), 6.0 * 2.0 * n2, epsilon = 1e-11);
        assert_abs_diff_eq!(2.0 * n2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn green_identity_with_boundary_flux() {
        let g = grid();
        let f = SphereFunction::from_fn(&g, |w| w.x * w.z + w.y);
        let h = SphereFunction::from_fn(&g, |w| (w.z + 0.5 * w.x).sin());
        let gf = f.gradient_cartesian();
        let gh = h.gradient_cartesian();
        let dot = SphereFunction::from_values(
            &g,
            (0..g.len()).map(|k| (0..3).map(|c| gf[c].values[k] * gh[c].values[k]).sum()).collect(),
        )
        .unwrap();
        let lhs = f.mul(&h.laplace_beltrami()).integrate() + dot.integrate();
        // outward normal at the equator is −η
        let fe = f.equator_values();
        let dh = h.normal_derivative_equator();
        let flux: Vec<f64> = fe.iter().zip(&dh).map(|(a, b)| -a * b).collect();
        assert_abs_diff_eq!(lhs, boundary_integrate_values(&flux, g.phi_step()), epsilon = 1e-11);
    }

    #[test]
    fn normal_derivative_examples() {
        let g = grid();
        let dz = SphereFunction::from_fn(&g, |w| w.z).normal_derivative_equator();
        assert!(dz.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let y = HarmonicIndex::new(4, 2).unwrap().sample(&g);
        assert!(y.normal_derivative_equator().iter().all(|v| v.abs() < 1e-10));
        assert!(SphereFunction::constant(&g, 3.0).normal_derivative_equator().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn neumann_solutions() {
        let g = grid();
        let zero = solve_neumann_y0(&g, &vec![0.0; g.n_phi()]).unwrap();
        assert!(zero.max_abs() < 1e-14);

        let v = solve_neumann_y0(&g, &vec![1.0; g.n_phi()]).unwrap();
        let flux = boundary_integrate_values(&v.normal_derivative_equator(), g.phi_step());
        assert_abs_diff_eq!(flux, 2.0 * PI, epsilon = 1e-8);
        assert_abs_diff_eq!(v.integrate(), 0.0, epsilon = 1e-10);
        let lap = v.laplace_beltrami();
        assert!(lap.map(|x| x + 1.0).max_abs() < 1e-8);

        let beta: Vec<f64> = g.phi_nodes().iter().map(|p| p.cos()).collect();
        let v = solve_neumann_y0(&g, &beta).unwrap();
        let modes = v.modes();
        for m in 0..g.n_modes() {
            if m != 1 {
                assert!(modes.cos_profile(m).iter().chain(modes.sin_profile(m)).all(|c| c.abs() < 1e-12));
            }
        }
        assert!(v.laplace_beltrami().max_abs() < 1e-8);
        let dn = v.normal_derivative_equator();
        assert!(dn.iter().zip(&beta).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn decomposition_examples() {
        let g = grid();
        let y = HarmonicIndex::new(4, 0).unwrap().sample(&g);
        let (u, v) = decompose_x0_y0(&y).unwrap();
        assert!(v.max_abs() < 1e-10 && u.sub(&y).max_abs() < 1e-10);

        let one = SphereFunction::constant(&g, 1.0);
        let (u, v) = decompose_x0_y0(&one).unwrap();
        assert!(v.max_abs() < 1e-12 && u.sub(&one).max_abs() < 1e-12);

        let w = SphereFunction::from_fn(&g, |w| w.z);
        let (u, v) = decompose_x0_y0(&w).unwrap();
        assert!(u.normal_derivative_equator().iter().all(|d| d.abs() < 1e-8));
        assert_abs_diff_eq!(v.integrate(), 0.0, epsilon = 1e-8);
        assert!(u.add(&v).sub(&w).max_abs() < 1e-8);
    }

    #[test]
    fn resample_is_spectral() {
        let g = grid();
        let fine = HalfSphereGrid::new(48, 96).unwrap();
        let f = |w: Vector3<f64>| (0.4 * w.x - 0.2 * w.y + 0.7 * w.z).exp();
        let up = SphereFunction::from_fn(&g, f).resample(&fine);
        assert!(up.sub(&SphereFunction::from_fn(&fine, f)).max_abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn decomposition_is_idempotent(c in proptest::collection::vec(-1.0f64..1.0, 6)) {
                let g = grid();
                let w = SphereFunction::from_fn(&g, |p| {
                    c[0] + c[1] * p.z + c[2] * p.x * p.z + c[3] * p.y + c[4] * p.z * p.z * p.x + c[5] * (p.x * p.y)
                });
                let (u, v) = decompose_x0_y0(&w).unwrap();
                let (u2, v2) = decompose_x0_y0(&u).unwrap();
                prop_assert!(u2.sub(&u).max_abs() < 1e-10);
                prop_assert!(v2.max_abs() < 1e-10);
                let (u3, v3) = decompose_x0_y0(&v).unwrap();
                prop_assert!(u3.max_abs() < 1e-10);
                prop_assert!(v3.sub(&v).max_abs() < 1e-10);
            }
        }
    }
}
