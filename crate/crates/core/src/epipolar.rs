//! Re-weighting epipolar adjustment.
//!
//! Every pair contributes `(1/Z) Σₘ (x₂ᵀ G x₁)²`, which equals
//! `(1/Z) gᵀ W g` with `g` the row-major flattening of `G` and
//! `W = Σₘ w wᵀ`, `w = flatten(x₂ x₁ᵀ)`. `W` is built once per re-weighting,
//! so a descent step costs O(pairs) regardless of the point count. IRLS
//! weights `1/max(|ε̂|, floor)` turn the quadratic into an approximate L1
//! loss.
//!
//! `G` is the Frobenius-normalized `D_j [t]ₓ R D_i`, where `R = R_j R_iᵀ`,
//! `t` is the unit `R_j (o_i − o_j)` and `D = diag(s, s, 1)` rescales the
//! normalized coordinates of a camera whose focal moved from `f₀` to
//! `f₀ eˡ` (`s = e⁻ˡ`).

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{CameraId, ImageId, PairGeometry, Pose, PoseState, Rotation3};
use crate::optim::{matrix_to_rot6d, rot6d_backward, rot6d_to_matrix, Adam, AdamParams};
use crate::twoview::PointPair;

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;

/// Guard on `‖R_j (o_i − o_j)‖`.
const BASELINE_EPS: f64 = 1e-8;

/// Parameters per image: 6D rotation then center.
const PER_IMAGE: usize = 9;

/// L1 may rise by at most this factor across a round before it is undone.
const REVERT_FACTOR: f64 = 1.01;

pub fn flatten(m: &Matrix3<f64>) -> Vec9 {
    Vec9::from_fn(|k, _| m[(k / 3, k % 3)])
}

fn unflatten(v: &Vec9) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| v[3 * r + c])
}

/// `Σₘ ωₘ wₘ wₘᵀ` with `wₘ = flatten(x₂ x₁ᵀ)`; `ωₘ = 1` without weights.
pub fn precompute_weights(points: &[PointPair], weights: Option<&[f64]>) -> Mat9 {
    let mut w = Mat9::zeros();
    for (m, (x1, x2)) in points.iter().enumerate() {
        let v = flatten(&(x2 * x1.transpose()));
        let omega = weights.map_or(1.0, |ws| ws[m]);
        w.ger(omega, &v, &v, 1.0);
    }
    w
}

/// IRLS weight of a residual.
pub fn irls_weight(residual: f64, floor: f64) -> f64 {
    1.0 / residual.abs().max(floor)
}

fn skew_grad(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

fn focal_diag(s: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(s, s, 1.0))
}

/// Flat parameter vector of poses and per-camera log focal ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub theta: Vec<f64>,
    pub n_images: usize,
    pub n_cameras: usize,
}

impl Params {
    pub fn new(poses: &PoseState, n_cameras: usize) -> Self {
        let n_images = poses.len();
        let mut theta = vec![0.0; PER_IMAGE * n_images + n_cameras];
        for (k, p) in poses.registered() {
            theta[PER_IMAGE * k..PER_IMAGE * k + 6].copy_from_slice(&matrix_to_rot6d(&p.rotation));
            theta[PER_IMAGE * k + 6..PER_IMAGE * k + 9].copy_from_slice(p.center.as_slice());
        }
        Self {
            theta,
            n_images,
            n_cameras,
        }
    }

    fn rot6d(&self, k: ImageId) -> [f64; 6] {
        let mut v = [0.0; 6];
        v.copy_from_slice(&self.theta[PER_IMAGE * k..PER_IMAGE * k + 6]);
        v
    }

    pub fn rotation(&self, k: ImageId) -> Result<Rotation3> {
        rot6d_to_matrix(&self.rot6d(k))
    }

    pub fn center(&self, k: ImageId) -> Vector3<f64> {
        Vector3::from_column_slice(&self.theta[PER_IMAGE * k + 6..PER_IMAGE * k + 9])
    }

    fn focal_index(&self, camera: CameraId) -> usize {
        PER_IMAGE * self.n_images + camera
    }

    pub fn log_focal(&self, camera: CameraId) -> f64 {
        self.theta[self.focal_index(camera)]
    }

    /// Poses of the images flagged in `keep`.
    pub fn poses(&self, keep: &[bool]) -> Result<PoseState> {
        let poses = (0..self.n_images)
            .map(|k| {
                if keep[k] {
                    Ok(Some(Pose::new(self.rotation(k)?, self.center(k))))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PoseState { poses })
    }
}

/// `G` of one pair and the intermediate values its gradient needs.
struct Forward {
    g_hat: Vec9,
    g_norm: f64,
    g_raw: Matrix3<f64>,
    rel: Matrix3<f64>,
    ri: Matrix3<f64>,
    rj: Matrix3<f64>,
    t: Vector3<f64>,
    u_norm: f64,
    si: f64,
    sj: f64,
}

fn forward(params: &Params, i: ImageId, j: ImageId, ci: CameraId, cj: CameraId) -> Result<Forward> {
    let ri = *params.rotation(i)?.matrix();
    let rj = *params.rotation(j)?.matrix();
    let rel = rj * ri.transpose();
    let u = rj * (params.center(i) - params.center(j));
    let u_norm = u.norm().max(BASELINE_EPS);
    let t = u / u_norm;
    let e = crate::model::skew(&t) * rel;
    let (si, sj) = ((-params.log_focal(ci)).exp(), (-params.log_focal(cj)).exp());
    let g_raw = focal_diag(sj) * e * focal_diag(si);
    let g = flatten(&g_raw);
    let g_norm = g.norm();
    if !(g_norm > 0.0) || !g_norm.is_finite() {
        return Err(Error::NonFinite("essential matrix"));
    }
    Ok(Forward {
        g_hat: g / g_norm,
        g_norm,
        g_raw,
        rel,
        ri,
        rj,
        t,
        u_norm,
        si,
        sj,
    })
}

/// Normalized `G` of one pair under the current parameters.
pub fn pair_matrix(params: &Params, i: ImageId, j: ImageId, ci: CameraId, cj: CameraId) -> Result<Matrix3<f64>> {
    Ok(unflatten(&forward(params, i, j, ci, cj)?.g_hat))
}

/// Accumulates `dL/dg_hat` of one pair into the parameter gradient.
fn backward(
    fw: &Forward,
    d_ghat: &Vec9,
    params: &Params,
    (i, j, ci, cj): (ImageId, ImageId, CameraId, CameraId),
    grad: &mut [f64],
) -> Result<()> {
    let d_graw = unflatten(&((d_ghat - fw.g_hat * fw.g_hat.dot(d_ghat)) / fw.g_norm));
    let d_e = focal_diag(fw.sj) * d_graw * focal_diag(fw.si);
    let (mut d_li, mut d_lj) = (0.0, 0.0);
    for a in 0..3 {
        for b in 0..3 {
            let term = d_graw[(a, b)] * fw.g_raw[(a, b)];
            if b < 2 {
                d_li -= term;
            }
            if a < 2 {
                d_lj -= term;
            }
        }
    }
    // E = [t]ₓ R
    let d_rel = crate::model::skew(&fw.t).transpose() * d_e;
    let d_t = skew_grad(&(d_e * fw.rel.transpose()));
    let d_u = (d_t - fw.t * fw.t.dot(&d_t)) / fw.u_norm;
    // u = R_j (o_i − o_j)
    let (oi, oj) = (params.center(i), params.center(j));
    let d_oi = fw.rj.transpose() * d_u;
    let mut d_rj = d_u * (oi - oj).transpose();
    // R = R_j R_iᵀ
    d_rj += d_rel * fw.ri;
    let d_ri = d_rel.transpose() * fw.rj;

    let gi = rot6d_backward(&params.rot6d(i), &d_ri)?;
    let gj = rot6d_backward(&params.rot6d(j), &d_rj)?;
    for k in 0..6 {
        grad[PER_IMAGE * i + k] += gi[k];
        grad[PER_IMAGE * j + k] += gj[k];
    }
    for k in 0..3 {
        grad[PER_IMAGE * i + 6 + k] += d_oi[k];
        grad[PER_IMAGE * j + 6 + k] -= d_oi[k];
    }
    grad[params.focal_index(ci)] += d_li;
    grad[params.focal_index(cj)] += d_lj;
    Ok(())
}

/// One pair of the quadratic-form objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FormTerm {
    pub i: ImageId,
    pub j: ImageId,
    pub w: Mat9,
}

/// Precomputed quadratic-form objective. Holds no point data.
#[derive(Debug, Clone, PartialEq)]
pub struct FormProblem {
    pub terms: Vec<FormTerm>,
    pub image_camera: Vec<CameraId>,
    /// Total number of active point pairs.
    pub z: usize,
    pub refine_focal: bool,
}

impl FormProblem {
    fn cams(&self, t: &FormTerm) -> (ImageId, ImageId, CameraId, CameraId) {
        (t.i, t.j, self.image_camera[t.i], self.image_camera[t.j])
    }

    /// `(1/Z) Σₙ ĝₙᵀ Wₙ ĝₙ`.
    pub fn loss(&self, params: &Params) -> Result<f64> {
        if self.z == 0 {
            return Err(Error::Empty("no active point pairs"));
        }
        let mut sum = 0.0;
        for t in &self.terms {
            let (i, j, ci, cj) = self.cams(t);
            let g = forward(params, i, j, ci, cj)?.g_hat;
            sum += g.dot(&(t.w * g));
        }
        Ok(sum / self.z as f64)
    }

    pub fn loss_and_gradient(&self, params: &Params) -> Result<(f64, Vec<f64>)> {
        if self.z == 0 {
            return Err(Error::Empty("no active point pairs"));
        }
        let inv_z = 1.0 / self.z as f64;
        let parts = self
            .terms
            .par_iter()
            .map(|t| {
                let ids = self.cams(t);
                let fw = forward(params, ids.0, ids.1, ids.2, ids.3)?;
                let wg = t.w * fw.g_hat;
                Ok((fw, wg))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.theta.len()];
        for (t, (fw, wg)) in self.terms.iter().zip(&parts) {
            loss += fw.g_hat.dot(wg) * inv_z;
            backward(fw, &(wg * (2.0 * inv_z)), params, self.cams(t), &mut grad)?;
        }
        if !self.refine_focal {
            for g in &mut grad[PER_IMAGE * params.n_images..] {
                *g = 0.0;
            }
        }
        Ok((loss, grad))
    }
}

/// Active point pairs of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiPair {
    pub i: ImageId,
    pub j: ImageId,
    pub points: Vec<PointPair>,
}

fn pair_residuals(params: &Params, p: &EpiPair, image_camera: &[CameraId]) -> Result<Vec<f64>> {
    let g = pair_matrix(params, p.i, p.j, image_camera[p.i], image_camera[p.j])?;
    Ok(p.points.iter().map(|(x1, x2)| x2.dot(&(g * x1))).collect())
}

/// Signed epipolar residuals of every pair.
pub fn residuals(params: &Params, pairs: &[EpiPair], image_camera: &[CameraId]) -> Result<Vec<Vec<f64>>> {
    pairs
        .par_iter()
        .map(|p| pair_residuals(params, p, image_camera))
        .collect()
}

/// `(1/Z) Σ |ε|` over every point pair.
pub fn direct_l1(params: &Params, pairs: &[EpiPair], image_camera: &[CameraId]) -> Result<f64> {
    let res = residuals(params, pairs, image_camera)?;
    let z: usize = res.iter().map(Vec::len).sum();
    if z == 0 {
        return Err(Error::Empty("no active point pairs"));
    }
    Ok(res.iter().flatten().map(|e| e.abs()).sum::<f64>() / z as f64)
}

/// `(1/Z) Σ ε²` evaluated point by point.
pub fn brute_l2(params: &Params, pairs: &[EpiPair], image_camera: &[CameraId]) -> Result<f64> {
    let res = residuals(params, pairs, image_camera)?;
    let z: usize = res.iter().map(Vec::len).sum();
    if z == 0 {
        return Err(Error::Empty("no active point pairs"));
    }
    Ok(res.iter().flatten().map(|e| e * e).sum::<f64>() / z as f64)
}

/// Quadratic-form problem over `pairs`, IRLS-weighted when `residuals` is given.
pub fn build_problem(
    pairs: &[EpiPair],
    residuals: Option<&[Vec<f64>]>,
    image_camera: &[CameraId],
    cfg: &PipelineConfig,
) -> FormProblem {
    let terms = pairs
        .par_iter()
        .enumerate()
        .map(|(n, p)| {
            let weights: Option<Vec<f64>> =
                residuals.map(|r| r[n].iter().map(|&e| irls_weight(e, cfg.irls_residual_floor)).collect());
            FormTerm {
                i: p.i,
                j: p.j,
                w: precompute_weights(&p.points, weights.as_deref()),
            }
        })
        .collect();
    FormProblem {
        terms,
        image_camera: image_camera.to_vec(),
        z: pairs.iter().map(|p| p.points.len()).sum(),
        refine_focal: cfg.focal_refine,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub threshold: f64,
    pub pruned: usize,
    pub dropped_pairs: usize,
    pub l1_before: f64,
    pub l1_after: f64,
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    pub poses: PoseState,
    /// `f / f₀` per camera.
    pub focal_ratio: Vec<f64>,
    pub pairs: Vec<PairGeometry>,
    pub l1_initial: f64,
    pub l1_final: f64,
    pub rounds: Vec<RoundLog>,
    pub steps: usize,
}

/// IRLS epipolar adjustment with scheduled pruning.
///
/// Pairs touching an unregistered image are ignored. Images left without a
/// pair are returned unregistered.
pub fn irls_refine(
    poses: &PoseState,
    image_camera: &[CameraId],
    n_cameras: usize,
    input: &[PairGeometry],
    cfg: &PipelineConfig,
) -> Result<Adjustment> {
    let mut pairs: Vec<EpiPair> = input
        .iter()
        .filter(|p| poses.get(p.i).is_some() && poses.get(p.j).is_some() && !p.inlier_pairs.is_empty())
        .map(|p| EpiPair {
            i: p.i,
            j: p.j,
            points: p.inlier_pairs.clone(),
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs for epipolar adjustment"));
    }
    let mut params = Params::new(poses, n_cameras);
    let l1_initial = direct_l1(&params, &pairs, image_camera)?;
    let mut rounds = Vec::with_capacity(cfg.prune_rounds);
    let mut steps = 0;

    for round in 0..cfg.prune_rounds {
        let threshold = cfg.prune_threshold(round);
        let res = residuals(&params, &pairs, image_camera)?;
        let before_pairs = pairs.len();
        let mut pruned = 0;
        let mut kept = Vec::with_capacity(pairs.len());
        for (p, r) in pairs.into_iter().zip(res) {
            let points: Vec<PointPair> = p
                .points
                .iter()
                .zip(&r)
                .filter(|(_, e)| e.abs() <= threshold)
                .map(|(x, _)| *x)
                .collect();
            pruned += p.points.len() - points.len();
            if !points.is_empty() {
                kept.push(EpiPair { points, ..p });
            }
        }
        pairs = kept;
        if pairs.is_empty() {
            return Err(Error::Empty("every point pair was pruned"));
        }

        let saved = params.clone();
        let l1_before = direct_l1(&params, &pairs, image_camera)?;
        let lr = cfg.epipolar_lr / cfg.lr_decay.powi(round as i32);
        let mut adam = Adam::new(params.theta.len(), AdamParams::from_config(cfg));
        for _ in 0..cfg.irls_iters_between_prunes {
            let res = residuals(&params, &pairs, image_camera)?;
            let problem = build_problem(&pairs, Some(&res), image_camera, cfg);
            for _ in 0..cfg.epipolar_steps_per_iter {
                let (loss, grad) = problem.loss_and_gradient(&params)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("epipolar loss"));
                }
                adam.step(&mut params.theta, &grad, lr)?;
                steps += 1;
            }
        }
        let mut l1_after = direct_l1(&params, &pairs, image_camera)?;
        let reverted = !(l1_after <= REVERT_FACTOR * l1_before);
        if reverted {
            log::warn!("epipolar round {round}: L1 rose from {l1_before:.3e} to {l1_after:.3e}, reverting");
            params = saved;
            l1_after = l1_before;
        }
        rounds.push(RoundLog {
            threshold,
            pruned,
            dropped_pairs: before_pairs - pairs.len(),
            l1_before,
            l1_after,
            reverted,
        });
    }

    let mut keep = vec![false; poses.len()];
    for p in &pairs {
        keep[p.i] = true;
        keep[p.j] = true;
    }
    let dropped_images = poses.registered().filter(|(k, _)| !keep[*k]).count();
    if dropped_images > 0 {
        log::warn!("epipolar adjustment: {dropped_images} images lost every pair and are unregistered");
    }
    let out_poses = params.poses(&keep)?;
    let res = residuals(&params, &pairs, image_camera)?;
    let l1_final = direct_l1(&params, &pairs, image_camera)?;
    let out_pairs = pairs
        .iter()
        .zip(res)
        .map(|(p, r)| {
            let (ri, rj) = (out_poses.get(p.i).unwrap(), out_poses.get(p.j).unwrap());
            let weights: Vec<f64> = r.iter().map(|&e| irls_weight(e, cfg.irls_residual_floor)).collect();
            PairGeometry {
                i: p.i,
                j: p.j,
                rel_rotation: rj.rotation * ri.rotation.transpose(),
                rel_direction_world: (rj.center - ri.center).normalize(),
                weight_matrix: precompute_weights(&p.points, Some(&weights)),
                inlier_pairs: p.points.clone(),
                residuals: r.iter().map(|e| e.abs()).collect(),
            }
        })
        .collect();
    Ok(Adjustment {
        poses: out_poses,
        focal_ratio: (0..n_cameras).map(|c| params.log_focal(c).exp()).collect(),
        pairs: out_pairs,
        l1_initial,
        l1_final,
        rounds,
        steps,
    })
}
