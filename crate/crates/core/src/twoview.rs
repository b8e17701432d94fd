//! Two-view geometry: fundamental and homography fitting, algebraic
//! epipolar error, and decomposition of essential and homography matrices
//! into a relative pose.
//!
//! All fitters take homogeneous point pairs `(x₁, x₂)` with `z = 1` and use
//! Hartley normalization internally. Returned matrices are Frobenius-normalized
//! so that algebraic residual thresholds carry meaning across pairs.

use nalgebra::{DMatrix, Matrix3, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{skew, Rotation3};

/// Homogeneous point pair, first image then second image.
pub type PointPair = (Vector3<f64>, Vector3<f64>);

pub fn homogeneous(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

pub fn to_point_pairs(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Vec<PointPair> {
    pairs.iter().map(|(a, b)| (homogeneous(a), homogeneous(b))).collect()
}

/// Rank-2 fundamental matrix fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalFit {
    pub matrix: Matrix3<f64>,
    /// The design matrix has a multi-dimensional null space (e.g. all
    /// points on one plane); the returned matrix is one of many exact fits.
    pub degenerate: bool,
}

/// Absolute algebraic epipolar residual `|x₂ᵀ F x₁|`.
pub fn epipolar_error(f: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    x2.dot(&(f * x1)).abs()
}

pub fn mean_epipolar_error(f: &Matrix3<f64>, pairs: &[PointPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| epipolar_error(f, a, b)).sum::<f64>() / pairs.len() as f64
}

pub fn frobenius_normalized(m: &Matrix3<f64>) -> Matrix3<f64> {
    let n = m.norm();
    if n > 0.0 {
        m / n
    } else {
        *m
    }
}

/// Similarity taking the points to zero mean and mean distance √2.
fn hartley(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let mean = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let spread = points.map(|p| (p - mean).norm()).sum::<f64>() / n;
    if !(spread > 1e-300) || !spread.is_finite() {
        return Err(Error::Degenerate("points are coincident or non-finite".into()));
    }
    let s = std::f64::consts::SQRT_2 / spread;
    Ok(Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0))
}

fn dehomogenize(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x / p.z, p.y / p.z)
}

/// Right singular vector of the smallest singular value, plus the ratio of the
/// second-smallest singular value to the largest.
fn null_vector(a: DMatrix<f64>) -> Result<(SVector<f64, 9>, f64)> {
    let a = if a.nrows() < 9 {
        let mut padded = DMatrix::zeros(9, 9);
        padded.rows_mut(0, a.nrows()).copy_from(&a);
        padded
    } else {
        a
    };
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
    let smallest = order[0];
    let largest = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    let ratio = if largest > 0.0 { second / largest } else { 0.0 };
    Ok((
        SVector::<f64, 9>::from_iterator(v_t.row(smallest).iter().copied()),
        ratio,
    ))
}

fn fundamental_rows(
    pairs: &[PointPair],
    t1: &Matrix3<f64>,
    t2: &Matrix3<f64>,
    weights: Option<&[f64]>,
) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(pairs.len(), 9);
    for (r, (x1, x2)) in pairs.iter().enumerate() {
        let p = t1 * x1 / x1.z;
        let q = t2 * x2 / x2.z;
        let w = weights.map_or(1.0, |w| w[r].sqrt());
        for a_ in 0..3 {
            for b in 0..3 {
                a[(r, 3 * a_ + b)] = w * q[a_] * p[b];
            }
        }
    }
    a
}

fn fit_fundamental_weighted(pairs: &[PointPair], weights: Option<&[f64]>) -> Result<FundamentalFit> {
    if pairs.len() < 8 {
        return Err(Error::TooFewPoints {
            need: 8,
            got: pairs.len(),
        });
    }
    let t1 = hartley(pairs.iter().map(|(a, _)| dehomogenize(a)))?;
    let t2 = hartley(pairs.iter().map(|(_, b)| dehomogenize(b)))?;
    let (f, ratio) = null_vector(fundamental_rows(pairs, &t1, &t2, weights))?;
    let f_hat = Matrix3::from_row_slice(f.as_slice());
    let svd = f_hat.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let min = s.imin();
    s[min] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&s) * v_t;
    let f = t2.transpose() * f_rank2 * t1;
    if f.iter().any(|v| !v.is_finite()) || f.norm() == 0.0 {
        return Err(Error::Degenerate("rank-deficient design matrix".into()));
    }
    Ok(FundamentalFit {
        matrix: frobenius_normalized(&f),
        degenerate: ratio < 1e-8,
    })
}

/// Normalized 8-point least-squares fit with rank-2 enforcement.
pub fn estimate_fundamental(pairs: &[PointPair]) -> Result<FundamentalFit> {
    fit_fundamental_weighted(pairs, None)
}

/// IRLS weights `1/max(|r|, floor)` approximating an L1 fit; the floor
/// tracks the median residual so exact inliers cannot dominate.
fn l1_weights(residuals: &[f64]) -> Vec<f64> {
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let floor = (1e-4 * median).max(1e-12);
    residuals.iter().map(|r| 1.0 / r.max(floor)).collect()
}

/// 8-point fit re-weighted `iters` times towards the L1 algebraic error.
///
/// With `iters == 0` this is [`estimate_fundamental`].
pub fn estimate_fundamental_robust(pairs: &[PointPair], iters: usize) -> Result<FundamentalFit> {
    let mut fit = estimate_fundamental(pairs)?;
    for _ in 0..iters {
        let residuals: Vec<f64> = pairs.iter().map(|(a, b)| epipolar_error(&fit.matrix, a, b)).collect();
        if residuals.iter().all(|&r| r < 1e-14) {
            break;
        }
        fit = fit_fundamental_weighted(pairs, Some(&l1_weights(&residuals)))?;
    }
    Ok(fit)
}

fn homography_rows(pairs: &[PointPair], t1: &Matrix3<f64>, t2: &Matrix3<f64>, weights: Option<&[f64]>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(2 * pairs.len(), 9);
    for (r, (x1, x2)) in pairs.iter().enumerate() {
        let p = t1 * x1 / x1.z;
        let q = t2 * x2 / x2.z;
        let (u, v) = (q.x / q.z, q.y / q.z);
        let w = weights.map_or(1.0, |w| w[r].sqrt());
        for k in 0..3 {
            a[(2 * r, 3 + k)] = -w * p[k];
            a[(2 * r, 6 + k)] = w * v * p[k];
            a[(2 * r + 1, k)] = w * p[k];
            a[(2 * r + 1, 6 + k)] = -w * u * p[k];
        }
    }
    a
}

fn fit_homography_weighted(pairs: &[PointPair], weights: Option<&[f64]>) -> Result<Matrix3<f64>> {
    if pairs.len() < 4 {
        return Err(Error::TooFewPoints {
            need: 4,
            got: pairs.len(),
        });
    }
    let t1 = hartley(pairs.iter().map(|(a, _)| dehomogenize(a)))?;
    let t2 = hartley(pairs.iter().map(|(_, b)| dehomogenize(b)))?;
    let (h, ratio) = null_vector(homography_rows(pairs, &t1, &t2, weights))?;
    if ratio < 1e-10 {
        return Err(Error::Degenerate(
            "homography design matrix has a multi-dimensional null space".into(),
        ));
    }
    let t2_inv = t2.try_inverse().ok_or(Error::Degenerate("normalization".into()))?;
    let mut h = t2_inv * Matrix3::from_row_slice(h.as_slice()) * t1;
    if h.iter().any(|v| !v.is_finite()) || h.norm() == 0.0 {
        return Err(Error::Degenerate("homography".into()));
    }
    // Sign such that H x₁ points the same way as x₂.
    let agreement: f64 = pairs.iter().map(|(a, b)| b.dot(&(h * a))).sum();
    if agreement < 0.0 {
        h = -h;
    }
    Ok(frobenius_normalized(&h))
}

/// Normalized 4-point DLT, `x₂ ~ H x₁`.
pub fn estimate_homography(pairs: &[PointPair]) -> Result<Matrix3<f64>> {
    fit_homography_weighted(pairs, None)
}

/// Euclidean transfer error `|π(H x₁) - π(x₂)|`.
pub fn transfer_error(h: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    (dehomogenize(&(h * x1)) - dehomogenize(x2)).norm()
}

pub fn estimate_homography_robust(pairs: &[PointPair], iters: usize) -> Result<Matrix3<f64>> {
    let mut h = estimate_homography(pairs)?;
    for _ in 0..iters {
        let residuals: Vec<f64> = pairs.iter().map(|(a, b)| transfer_error(&h, a, b)).collect();
        if residuals.iter().all(|&r| r < 1e-14) {
            break;
        }
        h = fit_homography_weighted(pairs, Some(&l1_weights(&residuals)))?;
    }
    Ok(h)
}

/// Depths `(λ₁, λ₂)` with `λ₁ R x₁ + t ≈ λ₂ x₂` in the least-squares sense.
pub fn pair_depths(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> Option<(f64, f64)> {
    let a = r * x1;
    let b = -x2;
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let det = aa * bb - ab * ab;
    if det.abs() <= 1e-14 * aa * bb {
        return None;
    }
    let (ra, rb) = (-a.dot(t), -b.dot(t));
    Some(((bb * ra - ab * rb) / det, (aa * rb - ab * ra) / det))
}

/// Number of pairs that triangulate in front of both cameras.
pub fn count_in_front(r: &Matrix3<f64>, t: &Vector3<f64>, pairs: &[PointPair]) -> usize {
    pairs
        .iter()
        .filter(|(a, b)| matches!(pair_depths(r, t, a, b), Some((l1, l2)) if l1 > 0.0 && l2 > 0.0))
        .count()
}

/// Index of the candidate with the most support; ties go to the lowest index.
fn best_candidate(counts: &[usize]) -> (usize, bool) {
    let best = counts.iter().copied().max().unwrap_or(0);
    let idx = counts.iter().position(|&c| c == best).unwrap_or(0);
    let tie = counts.iter().filter(|&&c| c == best).count() > 1;
    (idx, tie)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation3,
    /// Unit translation, or `None` for a pure rotation.
    pub translation: Option<Vector3<f64>>,
    /// Number of point pairs in front of both cameras for the chosen candidate.
    pub support: usize,
    /// Another candidate had the same support.
    pub tie: bool,
}

pub fn compose_essential(r: &Rotation3, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r.matrix()
}

/// The four `(R, t)` candidates of an essential matrix, in the order
/// `(R₁, t), (R₁, -t), (R₂, t), (R₂, -t)`.
pub fn essential_candidates(e: &Matrix3<f64>) -> Result<[(Rotation3, Vector3<f64>); 4]> {
    let norm = e.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("essential matrix"));
    }
    if norm < 1e-12 {
        return Err(Error::NoTranslationSupport);
    }
    let svd = (e / norm).svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    let s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[1] < 0.1 * sorted[0] || sorted[2] > 0.1 * sorted[0] {
        return Err(Error::NotEssential(sorted));
    }
    // Move the smallest singular direction to the last column.
    let min = s.imin();
    if min != 2 {
        u.swap_columns(min, 2);
        v_t.swap_rows(min, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = Rotation3::project(&(u * w * v_t));
    let r2 = Rotation3::project(&(u * w.transpose() * v_t));
    let t = u.column(2).normalize();
    Ok([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Decomposes an essential matrix and disambiguates by cheirality.
pub fn decompose_essential(e: &Matrix3<f64>, pairs: &[PointPair]) -> Result<RelativePose> {
    if pairs.is_empty() {
        return Err(Error::TooFewPoints { need: 1, got: 0 });
    }
    let candidates = essential_candidates(e)?;
    let counts: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| count_in_front(r.matrix(), t, pairs))
        .collect();
    let (idx, tie) = best_candidate(&counts);
    if counts[idx] == 0 {
        return Err(Error::NoTranslationSupport);
    }
    let (rotation, t) = candidates[idx];
    Ok(RelativePose {
        rotation,
        translation: Some(t),
        support: counts[idx],
        tie,
    })
}

/// Relative singular-value spread below which a homography is treated as a
/// pure rotation.
const PURE_ROTATION_SPREAD: f64 = 1e-3;

/// Candidate `(R, t, n)` triples of a calibrated homography `H ~ R + t nᵀ`.
pub fn homography_candidates(h: &Matrix3<f64>) -> Result<Vec<(Rotation3, Vector3<f64>)>> {
    let svd = h.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    let s = svd.singular_values;
    // Sort singular values descending together with their vectors.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (u0, v0) = (u, v_t);
    for (k, &o) in order.iter().enumerate() {
        u.set_column(k, &u0.column(o));
        v_t.set_row(k, &v0.row(o));
    }
    let (d1, d2, d3) = (s[order[0]], s[order[1]], s[order[2]]);
    if !(d3 > 0.0) || !d1.is_finite() {
        return Err(Error::Degenerate("homography is singular".into()));
    }
    let v = v_t.transpose();
    let sgn = u.determinant() * v_t.determinant();
    let (d1s, d2s, d3s) = (d1 * d1, d2 * d2, d3 * d3);
    let aux1 = ((d1s - d2s) / (d1s - d3s)).max(0.0).sqrt();
    let aux3 = ((d2s - d3s) / (d1s - d3s)).max(0.0).sqrt();
    let x1 = [aux1, aux1, -aux1, -aux1];
    let x3 = [aux3, -aux3, aux3, -aux3];
    let mut out = Vec::with_capacity(8);

    // d' = d2
    let aux_stheta = ((d1s - d2s) * (d2s - d3s)).max(0.0).sqrt() / ((d1 + d3) * d2);
    let ctheta = (d2s + d1 * d3) / ((d1 + d3) * d2);
    let stheta = [aux_stheta, -aux_stheta, -aux_stheta, aux_stheta];
    for k in 0..4 {
        let rp = Matrix3::new(ctheta, 0.0, -stheta[k], 0.0, 1.0, 0.0, stheta[k], 0.0, ctheta);
        let r = sgn * u * rp * v_t;
        let tp = Vector3::new(x1[k], 0.0, -x3[k]) * (d1 - d3);
        let t = u * tp;
        out.push((Rotation3::project(&r), t / d2));
    }
    // d' = -d2
    let aux_sphi = ((d1s - d2s) * (d2s - d3s)).max(0.0).sqrt() / ((d1 - d3) * d2);
    let cphi = (d1 * d3 - d2s) / ((d1 - d3) * d2);
    let sphi = [aux_sphi, -aux_sphi, -aux_sphi, aux_sphi];
    for k in 0..4 {
        let rp = Matrix3::new(cphi, 0.0, sphi[k], 0.0, -1.0, 0.0, sphi[k], 0.0, -cphi);
        let r = sgn * u * rp * v_t;
        let tp = Vector3::new(x1[k], 0.0, x3[k]) * (d1 + d3);
        let t = u * tp;
        out.push((Rotation3::project(&r), t / d2));
    }
    let _ = v;
    Ok(out)
}

/// Decomposes a homography between calibrated views.
///
/// A homography whose singular values are equal up to
/// `PURE_ROTATION_SPREAD` is a pure rotation and yields `translation: None`.
/// Otherwise the analytic candidates are filtered by a positive-depth check.
pub fn decompose_homography(h: &Matrix3<f64>, pairs: &[PointPair]) -> Result<RelativePose> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("homography"));
    }
    let s = h.singular_values();
    let (max, min) = (s.max(), s.min());
    let mid = s.sum() - max - min;
    if !(min > 1e-12 * max) {
        return Err(Error::Degenerate("homography is singular".into()));
    }
    let mut hn = h / mid;
    if hn.determinant() < 0.0 {
        hn = -hn;
    }
    if (max - min) / mid < PURE_ROTATION_SPREAD {
        return Ok(RelativePose {
            rotation: Rotation3::project(&hn),
            translation: None,
            support: pairs.len(),
            tie: false,
        });
    }
    let candidates = homography_candidates(&hn)?;
    let counts: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| count_in_front(r.matrix(), t, pairs))
        .collect();
    let (idx, tie) = best_candidate(&counts);
    if counts[idx] == 0 {
        return Err(Error::NoTranslationSupport);
    }
    let (rotation, t) = candidates[idx];
    let norm = t.norm();
    Ok(RelativePose {
        rotation,
        translation: (norm > 1e-12).then(|| t / norm),
        support: counts[idx],
        tie,
    })
}
