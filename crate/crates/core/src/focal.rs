//! Focal length by voting over field-of-view candidates.
//!
//! Each candidate focal turns every fundamental matrix into `E = K₂ᵀ F K₁`;
//! the closer its two largest singular values, the more the candidate is
//! supported. Votes are accumulated in the log domain so that no candidate
//! underflows to zero support.

use nalgebra::{Matrix3, Vector2};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::distortion::{self, undistort_normalized};
use crate::error::{Error, Result};
use crate::model::{CameraId, CameraModel, GeometryClass, MatchSet, NormalizedPair};
use crate::twoview::{self, PointPair};

/// `exp((1 - λ₁/λ₂)/τ)` for `E = K₂ᵀ F K₁`.
pub fn essential_validity(f: &Matrix3<f64>, k1: &Matrix3<f64>, k2: &Matrix3<f64>, tau: f64) -> Result<f64> {
    Ok(log_validity(f, k1, k2, tau)?.exp())
}

fn log_validity(f: &Matrix3<f64>, k1: &Matrix3<f64>, k2: &Matrix3<f64>, tau: f64) -> Result<f64> {
    let e = k2.transpose() * f * k1;
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("essential matrix"));
    }
    let mut s = e.singular_values();
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(s[1] > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((1.0 - s[0] / s[1]) / tau)
}

/// Evenly spaced field-of-view candidates in degrees, endpoints included.
pub fn fov_candidates(cfg: &PipelineConfig) -> Vec<f64> {
    let n = cfg.focal_samples;
    if n == 1 {
        return vec![0.5 * (cfg.fov_min_deg + cfg.fov_max_deg)];
    }
    (0..n)
        .map(|k| cfg.fov_min_deg + (cfg.fov_max_deg - cfg.fov_min_deg) * k as f64 / (n - 1) as f64)
        .collect()
}

/// Focal used for one side of a voting pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FocalSide {
    Candidate,
    /// Already estimated, in pixels.
    Fixed(f64),
}

/// Fundamental matrix of one pair in half-diagonal coordinates of each image
/// (centered, divided by the half diagonal, undistorted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VotingPair {
    pub f: Matrix3<f64>,
    pub first: FocalSide,
    pub second: FocalSide,
    /// Half diagonals of the two images.
    pub scale1: f64,
    pub scale2: f64,
}

fn k_scaled(focal: f64, scale: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(focal / scale, focal / scale, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalVote {
    pub focal: f64,
    pub fov_deg: f64,
    /// `(fov_deg, log vote)` per candidate.
    pub scores: Vec<(f64, f64)>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log of the summed validity of every candidate, then the argmax.
///
/// `width` is the image width of the camera being estimated; candidates are
/// horizontal fields of view.
pub fn vote_focal(pairs: &[VotingPair], width: u32, cfg: &PipelineConfig) -> Result<FocalVote> {
    if pairs.is_empty() {
        return Err(Error::Empty("no fundamental matrices to vote on"));
    }
    let candidates = fov_candidates(cfg);
    let scores = candidates
        .par_iter()
        .map(|&fov| {
            let focal = CameraModel::focal_from_fov(width, fov);
            let terms = pairs
                .iter()
                .map(|p| {
                    let side = |s: FocalSide, scale: f64| match s {
                        FocalSide::Candidate => k_scaled(focal, scale),
                        FocalSide::Fixed(f) => k_scaled(f, scale),
                    };
                    log_validity(&p.f, &side(p.first, p.scale1), &side(p.second, p.scale2), cfg.tau)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((fov, log_sum_exp(&terms)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (fov, _) = scores
        .iter()
        .copied()
        .reduce(|best, c| if c.1 > best.1 { c } else { best })
        .expect("at least one candidate");
    Ok(FocalVote {
        focal: CameraModel::focal_from_fov(width, fov),
        fov_deg: fov,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalSchedule {
    pub order: Vec<CameraId>,
    pub focals: Vec<f64>,
    /// Cameras that never had a ready pair and use the fallback field of view.
    pub flagged: Vec<bool>,
    pub votes: Vec<Option<FocalVote>>,
}

/// Undistorted fundamental matrix of every usable pair, in half-diagonal
/// coordinates. `None` for homography pairs and failed fits.
fn pair_fundamentals(ms: &MatchSet, cameras: &[CameraModel], fit_iters: usize) -> Vec<Option<Matrix3<f64>>> {
    ms.pairs
        .par_iter()
        .map(|p| {
            if p.class != GeometryClass::Fundamental || p.correspondences.len() < 8 {
                return None;
            }
            let (c1, c2) = (&cameras[ms.camera_of(p.i)], &cameras[ms.camera_of(p.j)]);
            let pts: Vec<PointPair> = ms
                .pixel_pairs(p)
                .iter()
                .filter_map(|(a, b)| {
                    let a = undistort_normalized(&((a - Vector2::new(c1.cx, c1.cy)) / c1.half_diagonal()), c1.alpha)?;
                    let b = undistort_normalized(&((b - Vector2::new(c2.cx, c2.cy)) / c2.half_diagonal()), c2.alpha)?;
                    Some((twoview::homogeneous(&a), twoview::homogeneous(&b)))
                })
                .collect();
            twoview::estimate_fundamental_robust(&pts, fit_iters)
                .ok()
                .map(|f| f.matrix)
        })
        .collect()
}

/// Per-camera focal lengths with the same ready-pair schedule as distortion.
///
/// `cameras` carries image sizes and the already estimated α; its focal
/// values are ignored.
pub fn vote_focal_multi(ms: &MatchSet, cameras: &[CameraModel], cfg: &PipelineConfig) -> Result<FocalSchedule> {
    let n_cams = cameras.len();
    let fundamentals = pair_fundamentals(ms, cameras, cfg.fit_irls_iters);
    if fundamentals.iter().all(Option::is_none) {
        return Err(Error::FocalUnderdetermined(0));
    }
    let mut known: Vec<Option<f64>> = vec![None; n_cams];
    let mut sched = FocalSchedule {
        order: Vec::new(),
        focals: vec![0.0; n_cams],
        flagged: vec![false; n_cams],
        votes: vec![None; n_cams],
    };
    loop {
        let ready_for = |c: CameraId, known: &[Option<f64>]| -> Vec<usize> {
            (0..ms.pairs.len())
                .filter(|&k| fundamentals[k].is_some())
                .filter(|&k| {
                    let (ci, cj) = (ms.camera_of(ms.pairs[k].i), ms.camera_of(ms.pairs[k].j));
                    (ci == c && cj == c) || (ci == c && known[cj].is_some()) || (cj == c && known[ci].is_some())
                })
                .collect()
        };
        let next = (0..n_cams)
            .filter(|&c| known[c].is_none())
            .map(|c| (c, ready_for(c, &known)))
            .filter(|(_, r)| !r.is_empty())
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)));
        let Some((cam, ready)) = next else { break };
        let pairs: Vec<VotingPair> = ready
            .iter()
            .map(|&k| {
                let p = &ms.pairs[k];
                let (ci, cj) = (ms.camera_of(p.i), ms.camera_of(p.j));
                let side = |c: CameraId| {
                    if c == cam {
                        FocalSide::Candidate
                    } else {
                        FocalSide::Fixed(known[c].unwrap())
                    }
                };
                VotingPair {
                    f: fundamentals[k].unwrap(),
                    first: side(ci),
                    second: side(cj),
                    scale1: cameras[ci].half_diagonal(),
                    scale2: cameras[cj].half_diagonal(),
                }
            })
            .collect();
        let vote = vote_focal(&pairs, cameras[cam].width, cfg)?;
        log::info!(
            "camera {cam}: fov {:.2} deg (focal {:.1} px) from {} pairs",
            vote.fov_deg,
            vote.focal,
            pairs.len()
        );
        known[cam] = Some(vote.focal);
        sched.order.push(cam);
        sched.votes[cam] = Some(vote);
    }
    for c in 0..n_cams {
        sched.focals[c] = match known[c] {
            Some(f) => f,
            None => {
                log::warn!(
                    "camera {c}: no ready pairs, using fallback fov {} deg",
                    cfg.fallback_fov_deg
                );
                sched.flagged[c] = true;
                CameraModel::focal_from_fov(cameras[c].width, cfg.fallback_fov_deg)
            }
        };
    }
    Ok(sched)
}

/// Undistorted, `K⁻¹`-normalized pixel.
pub fn calibrate_point(p: &Vector2<f64>, camera: &CameraModel) -> Option<Vector2<f64>> {
    let u = distortion::undistort(p, camera.alpha, camera)?;
    Some(Vector2::new(
        (u.x - camera.cx) / camera.focal,
        (u.y - camera.cy) / camera.focal,
    ))
}

/// Calibrated correspondences of every pair. Correspondences whose
/// undistortion is invalid are dropped.
pub fn apply_calibration(ms: &MatchSet, cameras: &[CameraModel]) -> Vec<NormalizedPair> {
    let calibrated: Vec<Vec<Option<Vector2<f64>>>> = ms
        .images
        .par_iter()
        .map(|im| {
            im.keypoints
                .iter()
                .map(|k| calibrate_point(k, &cameras[im.camera]))
                .collect()
        })
        .collect();
    ms.pairs
        .iter()
        .map(|p| {
            let mut points = Vec::with_capacity(p.correspondences.len());
            let mut n_original = 0;
            for (k, &(a, b)) in p.correspondences.iter().enumerate() {
                if let (Some(x1), Some(x2)) = (calibrated[p.i][a as usize], calibrated[p.j][b as usize]) {
                    points.push((twoview::homogeneous(&x1), twoview::homogeneous(&x2)));
                    if k < p.n_original {
                        n_original += 1;
                    }
                }
            }
            NormalizedPair {
                i: p.i,
                j: p.j,
                class: p.class,
                points,
                n_original,
            }
        })
        .collect()
}
