//! Division-model distortion estimation.
//!
//! Coordinates are centered on the principal point and divided by the half
//! image diagonal before the model `x_u = x_d / (1 + α r_d²)` is applied, so
//! α means the same thing at every resolution. α is found by a hierarchical
//! grid search that refits a fundamental matrix for every candidate and
//! keeps the one with the lowest mean algebraic epipolar error.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{CameraId, CameraModel, GeometryClass, Keypoint, MatchSet};
use crate::twoview::{self, PointPair};

/// Smallest admissible value of `1 + α r_d²`.
pub const MIN_DENOMINATOR: f64 = 1e-6;

/// Removes distortion from a center-normalized point. `None` when the model
/// denominator collapses.
pub fn undistort_normalized(p: &Vector2<f64>, alpha: f64) -> Option<Vector2<f64>> {
    let den = 1.0 + alpha * p.norm_squared();
    (den > MIN_DENOMINATOR).then(|| p / den)
}

/// Closed-form inverse of [`undistort_normalized`].
pub fn distort_normalized(u: &Vector2<f64>, alpha: f64) -> Option<Vector2<f64>> {
    let ru = u.norm();
    if ru == 0.0 || alpha == 0.0 {
        return Some(*u);
    }
    // α r_u r_d² - r_d + r_u = 0, root continuous at α = 0.
    let disc = 1.0 - 4.0 * alpha * ru * ru;
    if disc < 0.0 {
        return None;
    }
    let rd = 2.0 * ru / (1.0 + disc.sqrt());
    let den = 1.0 + alpha * rd * rd;
    (den > MIN_DENOMINATOR).then(|| u * den)
}

/// Pixel-space undistortion with the camera's center and half diagonal.
pub fn undistort(p: &Keypoint, alpha: f64, camera: &CameraModel) -> Option<Keypoint> {
    let c = Vector2::new(camera.cx, camera.cy);
    let s = camera.half_diagonal();
    undistort_normalized(&((p - c) / s), alpha).map(|q| c + q * s)
}

pub fn distort(p: &Keypoint, alpha: f64, camera: &CameraModel) -> Option<Keypoint> {
    let c = Vector2::new(camera.cx, camera.cy);
    let s = camera.half_diagonal();
    distort_normalized(&((p - c) / s), alpha).map(|q| c + q * s)
}

/// Alpha used for one side of a scored pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Side {
    /// Takes the candidate being scored.
    Candidate,
    Fixed(f64),
}

/// One image pair prepared for scoring: points in center-normalized
/// (half-diagonal) coordinates of each image.
#[derive(Debug, Clone)]
pub struct ScoringPair {
    pub points: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub first: Side,
    pub second: Side,
}

impl ScoringPair {
    pub fn from_pixels(
        pixels: &[(Keypoint, Keypoint)],
        cam1: &CameraModel,
        cam2: &CameraModel,
        first: Side,
        second: Side,
    ) -> Self {
        let (c1, s1) = (Vector2::new(cam1.cx, cam1.cy), cam1.half_diagonal());
        let (c2, s2) = (Vector2::new(cam2.cx, cam2.cy), cam2.half_diagonal());
        Self {
            points: pixels.iter().map(|(a, b)| ((a - c1) / s1, (b - c2) / s2)).collect(),
            first,
            second,
        }
    }

    fn undistorted(&self, candidate: f64) -> Option<Vec<PointPair>> {
        let a1 = match self.first {
            Side::Candidate => candidate,
            Side::Fixed(a) => a,
        };
        let a2 = match self.second {
            Side::Candidate => candidate,
            Side::Fixed(a) => a,
        };
        self.points
            .iter()
            .map(|(p, q)| {
                Some((
                    twoview::homogeneous(&undistort_normalized(p, a1)?),
                    twoview::homogeneous(&undistort_normalized(q, a2)?),
                ))
            })
            .collect()
    }
}

/// Mean absolute epipolar error over all point pairs after undistorting with
/// `alpha` and refitting each pair's fundamental matrix.
///
/// Candidates that push any point through the model singularity score `+∞`.
pub fn score_alpha(alpha: f64, pairs: &[ScoringPair], fit_iters: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to score distortion"));
    }
    let per_pair: Vec<Option<(f64, usize)>> = pairs
        .par_iter()
        .map(|pair| {
            let Some(pts) = pair.undistorted(alpha) else {
                return Some((f64::INFINITY, pair.points.len()));
            };
            let fit = twoview::estimate_fundamental_robust(&pts, fit_iters).ok()?;
            let sum: f64 = pts
                .iter()
                .map(|(a, b)| twoview::epipolar_error(&fit.matrix, a, b))
                .sum();
            Some((sum, pts.len()))
        })
        .collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, n) in per_pair.into_iter().flatten() {
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("no usable pairs to score distortion"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearch {
    pub alpha: f64,
    pub score: f64,
    /// `(candidate, score)` for every level of the hierarchy.
    pub levels: Vec<Vec<(f64, f64)>>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Hierarchical interval search: after every level the neighbours of the best
/// sample become the new interval.
pub fn search_alpha(pairs: &[ScoringPair], cfg: &PipelineConfig) -> Result<AlphaSearch> {
    search_alpha_in(
        pairs,
        cfg.distortion_min,
        cfg.distortion_max,
        cfg.distortion_levels,
        cfg.distortion_samples_per_level,
        cfg.fit_irls_iters,
    )
}

pub fn search_alpha_in(
    pairs: &[ScoringPair],
    lo: f64,
    hi: f64,
    levels: usize,
    samples: usize,
    fit_iters: usize,
) -> Result<AlphaSearch> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to score distortion"));
    }
    let (mut lo, mut hi) = (lo, hi);
    let mut history = Vec::with_capacity(levels);
    let mut best = (0.0, f64::INFINITY);
    for _ in 0..levels {
        let candidates = linspace(lo, hi, samples);
        let scores = candidates
            .par_iter()
            .map(|&a| score_alpha(a, pairs, fit_iters))
            .collect::<Result<Vec<f64>>>()?;
        let k = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        best = (candidates[k], scores[k]);
        history.push(candidates.iter().copied().zip(scores.iter().copied()).collect());
        lo = candidates[k.saturating_sub(1)];
        hi = candidates[(k + 1).min(samples - 1)];
    }
    Ok(AlphaSearch {
        alpha: best.0,
        score: best.1,
        levels: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSchedule {
    /// Cameras in the order they were estimated.
    pub order: Vec<CameraId>,
    pub alphas: Vec<f64>,
    /// Cameras that never had a ready pair and fell back to α = 0.
    pub flagged: Vec<bool>,
    pub searches: Vec<Option<AlphaSearch>>,
}

/// Cameras with the image size of their first image, α = 0 and a placeholder focal.
pub fn camera_geometry(ms: &MatchSet) -> Vec<CameraModel> {
    (0..ms.num_cameras())
        .map(|c| {
            let im = ms.images_of_camera(c).next().map(|i| &ms.images[i]);
            let (w, h) = im.map_or((1, 1), |im| (im.width, im.height));
            CameraModel::new(w, h, w.max(h) as f64, 0.0)
        })
        .collect()
}

/// Estimates α for every camera, one camera at a time.
///
/// A fundamental-matrix pair is ready for a camera when both images belong
/// to it, or one does and the other image's camera is already estimated.
/// The camera with the most ready pairs goes next.
pub fn schedule_cameras(ms: &MatchSet, cfg: &PipelineConfig) -> Result<DistortionSchedule> {
    let n_cams = ms.num_cameras();
    let geometry = camera_geometry(ms);
    let mut alphas: Vec<Option<f64>> = vec![None; n_cams];
    let mut sched = DistortionSchedule {
        order: Vec::new(),
        alphas: vec![0.0; n_cams],
        flagged: vec![false; n_cams],
        searches: vec![None; n_cams],
    };
    if !cfg.distortion_estimation {
        return Ok(sched);
    }
    let usable: Vec<_> = ms
        .pairs
        .iter()
        .filter(|p| p.class == GeometryClass::Fundamental && p.correspondences.len() >= 8)
        .collect();

    loop {
        let ready_for = |c: CameraId, alphas: &[Option<f64>]| -> Vec<usize> {
            usable
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let (ci, cj) = (ms.camera_of(p.i), ms.camera_of(p.j));
                    (ci == c && cj == c) || (ci == c && alphas[cj].is_some()) || (cj == c && alphas[ci].is_some())
                })
                .map(|(k, _)| k)
                .collect()
        };
        let next = (0..n_cams)
            .filter(|&c| alphas[c].is_none())
            .map(|c| (c, ready_for(c, &alphas)))
            .filter(|(_, ready)| !ready.is_empty())
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)));
        let Some((cam, ready)) = next else { break };

        let pairs: Vec<ScoringPair> = ready
            .iter()
            .map(|&k| {
                let p = usable[k];
                let (ci, cj) = (ms.camera_of(p.i), ms.camera_of(p.j));
                let side = |c: CameraId| {
                    if c == cam {
                        Side::Candidate
                    } else {
                        Side::Fixed(alphas[c].unwrap())
                    }
                };
                ScoringPair::from_pixels(&ms.pixel_pairs(p), &geometry[ci], &geometry[cj], side(ci), side(cj))
            })
            .collect();
        let search = search_alpha(&pairs, cfg)?;
        log::info!(
            "camera {cam}: alpha {:.4} from {} pairs (score {:.3e})",
            search.alpha,
            pairs.len(),
            search.score
        );
        alphas[cam] = Some(search.alpha);
        sched.order.push(cam);
        sched.searches[cam] = Some(search);
    }
    for (c, alpha) in alphas.iter().enumerate() {
        match *alpha {
            Some(a) => sched.alphas[c] = a,
            None => {
                log::warn!("camera {c}: no ready pairs, distortion left at 0");
                sched.flagged[c] = true;
            }
        }
    }
    Ok(sched)
}
