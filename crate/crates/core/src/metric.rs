//! Background metrics on the cylinder Z₂ = {|x| < 2, |z| < 2}.

use nalgebra::{Matrix3, Vector3};

/// Γ[k][i][j] = Γ^k_{ij}.
pub type Christoffel = [[[f64; 3]; 3]; 3];

pub const METRIC_FD_STEP: f64 = 1e-5;
pub const RICCI_FD_STEP: f64 = 1e-4;

/// A diffeomorphism onto Euclidean space that pulls δ back to the metric.
/// Metrics that have one are flat, and their exponential map is explicit.
pub trait DevelopingMap: Send + Sync {
    fn develop(&self, p: &Vector3<f64>) -> Vector3<f64>;
    fn develop_inverse(&self, q: &Vector3<f64>) -> Vector3<f64>;
    fn develop_jacobian(&self, p: &Vector3<f64>) -> Matrix3<f64>;
}

/// Metric, Christoffel symbols and Ricci tensor at one point.
#[derive(Clone, Copy, Debug)]
pub struct LocalMetric {
    pub g: Matrix3<f64>,
    pub gamma: Christoffel,
    pub ricci: Matrix3<f64>,
}

pub trait MetricField: Send + Sync {
    fn metric(&self, p: &Vector3<f64>) -> Matrix3<f64>;

    /// ∂_k g̃ for k = 0, 1, 2.
    fn metric_derivatives(&self, p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        let mut out = [Matrix3::zeros(); 3];
        for (k, d) in out.iter_mut().enumerate() {
            let mut e = Vector3::zeros();
            e[k] = METRIC_FD_STEP;
            *d = (self.metric(&(p + e)) - self.metric(&(p - e))) / (2.0 * METRIC_FD_STEP);
        }
        out
    }

    fn christoffel(&self, p: &Vector3<f64>) -> Christoffel {
        christoffel_from(&self.metric(p), &self.metric_derivatives(p))
    }

    fn ricci(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        ricci_fd(self, p, RICCI_FD_STEP)
    }

    fn local(&self, p: &Vector3<f64>) -> LocalMetric {
        LocalMetric { g: self.metric(p), gamma: self.christoffel(p), ricci: self.ricci(p) }
    }

    fn developing_map(&self) -> Option<&dyn DevelopingMap> {
        None
    }

    /// True only for the identity metric.
    fn is_euclidean(&self) -> bool {
        false
    }
}

pub fn christoffel_from(g: &Matrix3<f64>, dg: &[Matrix3<f64>; 3]) -> Christoffel {
    let ginv = g.try_inverse().unwrap_or_else(Matrix3::identity);
    let mut lower = [[[0.0; 3]; 3]; 3];
    for l in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                lower[l][i][j] = 0.5 * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
            }
        }
    }
    let mut gamma = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                gamma[k][i][j] = (0..3).map(|l| ginv[(k, l)] * lower[l][i][j]).sum();
            }
        }
    }
    gamma
}

/// R_ij = ∂_k Γ^k_ij − ∂_j Γ^k_ki + Γ^k_kl Γ^l_ij − Γ^k_jl Γ^l_ki, derivatives by central differences.
pub fn ricci_fd<M: MetricField + ?Sized>(metric: &M, p: &Vector3<f64>, h: f64) -> Matrix3<f64> {
    let mut dgamma = [[[[0.0; 3]; 3]; 3]; 3];
    for m in 0..3 {
        let mut e = Vector3::zeros();
        e[m] = h;
        let gp = metric.christoffel(&(p + e));
        let gm = metric.christoffel(&(p - e));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    dgamma[m][k][i][j] = (gp[k][i][j] - gm[k][i][j]) / (2.0 * h);
                }
            }
        }
    }
    let gamma = metric.christoffel(p);
    let mut ric = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut r = 0.0;
            for k in 0..3 {
                r += dgamma[k][k][i][j] - dgamma[j][k][k][i];
                for l in 0..3 {
                    r += gamma[k][k][l] * gamma[l][i][j] - gamma[k][j][l] * gamma[l][k][i];
                }
            }
            ric[(i, j)] = r;
        }
    }
    0.5 * (ric + ric.transpose())
}

/// Contracts Γ(X, Y)^k = Γ^k_ij X^i Y^j.
pub fn gamma_apply(gamma: &Christoffel, x: &Vector3<f64>, y: &Vector3<f64>) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for k in 0..3 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += gamma[k][i][j] * x[i] * y[j];
            }
        }
        out[k] = s;
    }
    out
}

pub fn is_zero_christoffel(gamma: &Christoffel) -> bool {
    gamma.iter().flatten().flatten().all(|v| *v == 0.0)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Euclidean;

struct IdentityMap;

impl DevelopingMap for IdentityMap {
    fn develop(&self, p: &Vector3<f64>) -> Vector3<f64> {
        *p
    }
    fn develop_inverse(&self, q: &Vector3<f64>) -> Vector3<f64> {
        *q
    }
    fn develop_jacobian(&self, _p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity()
    }
}

impl MetricField for Euclidean {
    fn metric(&self, _p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity()
    }
    fn metric_derivatives(&self, _p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        [Matrix3::zeros(); 3]
    }
    fn christoffel(&self, _p: &Vector3<f64>) -> Christoffel {
        [[[0.0; 3]; 3]; 3]
    }
    fn ricci(&self, _p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::zeros()
    }
    fn developing_map(&self) -> Option<&dyn DevelopingMap> {
        Some(&IdentityMap)
    }
    fn is_euclidean(&self) -> bool {
        true
    }
}

/// e^{2u}δ with u(p) = ⟨c, p⟩.
#[derive(Clone, Copy, Debug)]
pub struct Conformal {
    pub c: Vector3<f64>,
}

impl MetricField for Conformal {
    fn metric(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity() * (2.0 * self.c.dot(p)).exp()
    }
    fn metric_derivatives(&self, p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        let e = (2.0 * self.c.dot(p)).exp();
        [0, 1, 2].map(|k| Matrix3::identity() * (2.0 * self.c[k] * e))
    }
    fn christoffel(&self, _p: &Vector3<f64>) -> Christoffel {
        let c = self.c;
        let mut gamma = [[[0.0; 3]; 3]; 3];
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                    gamma[k][i][j] = d(k, i) * c[j] + d(k, j) * c[i] - d(i, j) * c[k];
                }
            }
        }
        gamma
    }
}

/// δ + t·q(p) with q(p) = Σ_k p_k Q_k, each Q_k symmetric.
#[derive(Clone, Copy, Debug)]
pub struct LinearMetric {
    pub slopes: [Matrix3<f64>; 3],
    pub t: f64,
}

impl LinearMetric {
    pub fn q(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        self.slopes[0] * p[0] + self.slopes[1] * p[1] + self.slopes[2] * p[2]
    }
    /// (∇_X q)(Y, Z) in the flat connection.
    pub fn dq(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        self.slopes[0] * x[0] + self.slopes[1] * x[1] + self.slopes[2] * x[2]
    }
}

impl MetricField for LinearMetric {
    fn metric(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::identity() + self.q(p) * self.t
    }
    fn metric_derivatives(&self, _p: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        self.slopes.map(|s| s * self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn euclidean_is_trivial() {
        let p = Vector3::new(0.3, -0.2, 0.5);
        assert!(is_zero_christoffel(&Euclidean.christoffel(&p)));
        assert_eq!(Euclidean.ricci(&p), Matrix3::zeros());
    }

    #[test]
    fn conformal_christoffel_matches_generic_formula() {
        let m = Conformal { c: Vector3::new(1.0, 0.0, 0.0) };
        let p = Vector3::new(0.1, 0.2, -0.3);
        let analytic = m.christoffel(&p);
        assert_abs_diff_eq!(analytic[0][0][0], 1.0);
        assert_abs_diff_eq!(analytic[0][1][1], -1.0);
        assert_abs_diff_eq!(analytic[1][0][1], 1.0);
        let generic = christoffel_from(&m.metric(&p), &m.metric_derivatives(&p));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(analytic[k][i][j], generic[k][i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn conformal_ricci_closed_form() {
        // u linear in dimension 3: Ric = du⊗du − |du|² δ
        let c = Vector3::new(0.3, -0.4, 0.2);
        let m = Conformal { c };
        let ric = m.ricci(&Vector3::new(0.2, 0.1, -0.1));
        let expected = c * c.transpose() - Matrix3::identity() * c.norm_squared();
        assert!((ric - expected).amax() < 1e-8);
    }

    #[test]
    fn fd_metric_derivatives_match_analytic() {
        let m = Conformal { c: Vector3::new(0.2, 0.5, -0.3) };
        let p = Vector3::new(0.4, -0.1, 0.3);
        let analytic = m.metric_derivatives(&p);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = METRIC_FD_STEP;
            let fd = (m.metric(&(p + e)) - m.metric(&(p - e))) / (2.0 * METRIC_FD_STEP);
            assert!((fd - analytic[k]).amax() < 1e-9);
        }
    }

    #[test]
    fn christoffel_symmetric_in_lower_indices() {
        let mut s = [Matrix3::zeros(); 3];
        s[0][(0, 2)] = 1.0;
        s[0][(2, 0)] = 1.0;
        s[1][(1, 2)] = 0.7;
        s[1][(2, 1)] = 0.7;
        let m = LinearMetric { slopes: s, t: 0.1 };
        let g = m.christoffel(&Vector3::new(0.3, 0.2, 0.1));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(g[k][i][j], g[k][j][i], epsilon = 1e-14);
                }
            }
        }
    }
}
