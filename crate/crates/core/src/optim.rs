//! First-order optimization kernel shared by the rotation, translation and
//! epipolar stages: Adam, the 6D rotation parameterization and a central
//! finite-difference gradient checker.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Rotation3;

/// Seeded, platform-independent RNG used everywhere randomness is needed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn from_config(cfg: &crate::PipelineConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Bias-corrected Adam state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        assert_eq!(theta.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for k in 0..theta.len() {
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grad[k];
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Gram-Schmidt map from a 6-vector `(a, b)` to a rotation with columns
/// `a/|a|`, the normalized part of `b` orthogonal to it, and their cross product.
pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Rotation3> {
    let (c1, c2, _) = gram_schmidt(v)?;
    Ok(
        Rotation3::try_new(Matrix3::from_columns(&[c1, c2, c1.cross(&c2)]))
            .expect("Gram-Schmidt output is orthonormal"),
    )
}

/// First two columns of `r`.
pub fn matrix_to_rot6d(r: &Rotation3) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

struct GsParts {
    c1: Vector3<f64>,
    c2: Vector3<f64>,
    b: Vector3<f64>,
    a_norm: f64,
    bp_norm: f64,
}

fn gram_schmidt_parts(v: &[f64; 6]) -> Result<GsParts> {
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let a_norm = a.norm();
    if !(a_norm > 1e-12) {
        return Err(Error::Degenerate("6D rotation: first half is zero".into()));
    }
    let c1 = a / a_norm;
    let bp = b - c1 * c1.dot(&b);
    let bp_norm = bp.norm();
    if !(bp_norm > 1e-12 * b.norm().max(1e-300)) || !(bp_norm > 0.0) {
        return Err(Error::Degenerate("6D rotation: halves are parallel".into()));
    }
    Ok(GsParts {
        c1,
        c2: bp / bp_norm,
        b,
        a_norm,
        bp_norm,
    })
}

fn gram_schmidt(v: &[f64; 6]) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let p = gram_schmidt_parts(v)?;
    Ok((p.c1, p.c2, p.c1.cross(&p.c2)))
}

/// Back-propagates `dL/dR` through [`rot6d_to_matrix`].
pub fn rot6d_backward(v: &[f64; 6], grad_r: &Matrix3<f64>) -> Result<[f64; 6]> {
    let p = gram_schmidt_parts(v)?;
    let (c1, c2) = (p.c1, p.c2);
    let g1 = grad_r.column(0).into_owned();
    let g2 = grad_r.column(1).into_owned();
    let g3 = grad_r.column(2).into_owned();
    // c3 = c1 × c2
    let mut gc1 = g1 + c2.cross(&g3);
    let gc2 = g2 + g3.cross(&c1);
    // c2 = b' / |b'|
    let gbp = (gc2 - c2 * c2.dot(&gc2)) / p.bp_norm;
    // b' = b - (c1·b) c1
    let gb = gbp - c1 * c1.dot(&gbp);
    gc1 -= gbp * c1.dot(&p.b) + p.b * c1.dot(&gbp);
    // c1 = a / |a|
    let ga = (gc1 - c1 * c1.dot(&gc1)) / p.a_norm;
    Ok([ga.x, ga.y, ga.z, gb.x, gb.y, gb.z])
}

/// Central-difference gradient check.
///
/// Returns `max_k |g_k - fd_k| / max(‖fd‖∞, 1e-12)`, i.e. the worst component
/// discrepancy relative to the gradient's scale.
pub fn fd_check<F>(f: F, grad: &[f64], theta: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let fd = fd_gradient(&f, theta, h);
    let scale = fd.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
    grad.iter()
        .zip(&fd)
        .map(|(g, d)| (g - d).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn fd_gradient<F>(f: &F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + h;
            let fp = f(&x);
            x[k] = orig - h;
            let fm = f(&x);
            x[k] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
