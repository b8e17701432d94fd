//! Sparse points from tracks.
//!
//! Every track is triangulated pairwise (linear two-view DLT) over at most
//! `triangulation_max_pairs` member pairs and the results are averaged.
//! Observations reprojecting further than `reproj_outlier_px` are outliers;
//! the point is re-averaged over inlier pairs once. Points with fewer than
//! `triangulation_min_track_inliers` inliers or a maximum ray angle below
//! `triangulation_min_angle_deg` are dropped.

use nalgebra::{Matrix3x4, Matrix4, Vector2, Vector3};
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::distortion;
use crate::error::{Error, Result};
use crate::focal::calibrate_point;
use crate::model::{CameraModel, MatchSet, Observation, Pose, PoseState, ScenePoint, TrackSet};
use crate::optim::rng;
use crate::twoview::homogeneous;

const GRAY: [u8; 3] = [128, 128, 128];

/// Rays closer than this angle (radians) are parallel.
const PARALLEL_EPS: f64 = 1e-9;

/// World point to distorted pixels; `None` behind the camera or outside
/// the distortion model's range.
pub fn project(pose: &Pose, camera: &CameraModel, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = pose.world_to_camera(x);
    if pc.z <= 1e-6 {
        return None;
    }
    let undistorted = Vector2::new(
        camera.focal * pc.x / pc.z + camera.cx,
        camera.focal * pc.y / pc.z + camera.cy,
    );
    distortion::distort(&undistorted, camera.alpha, camera)
}

fn projection(p: &Pose) -> Matrix3x4<f64> {
    let mut m = Matrix3x4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation.matrix());
    m.set_column(3, &p.translation());
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Vector3<f64>,
    /// Positive depth in both views.
    pub in_front: bool,
}

/// Linear two-view triangulation from normalized homogeneous coordinates.
pub fn triangulate_pair(pi: &Pose, pj: &Pose, xi: &Vector3<f64>, xj: &Vector3<f64>) -> Result<Triangulated> {
    if (pi.center - pj.center).norm() <= 1e-12 * (pi.center.norm() + pj.center.norm()).max(1.0) {
        return Err(Error::Degenerate("camera centers coincide".into()));
    }
    let (di, dj) = (
        pi.rotation.matrix().transpose() * xi,
        pj.rotation.matrix().transpose() * xj,
    );
    if di.cross(&dj).norm() <= PARALLEL_EPS * di.norm() * dj.norm() {
        return Err(Error::Degenerate("rays are parallel".into()));
    }
    let mut a = Matrix4::zeros();
    for (row, (p, x)) in [(projection(pi), xi), (projection(pj), xj)].iter().enumerate() {
        let (u, v) = (x.x / x.z, x.y / x.z);
        a.set_row(2 * row, &(p.row(2) * u - p.row(0)));
        a.set_row(2 * row + 1, &(p.row(2) * v - p.row(1)));
    }
    // Row scaling does not change the null vector but helps conditioning.
    for r in 0..4 {
        let n = a.row(r).norm();
        if n > 0.0 {
            a.row_mut(r).scale_mut(1.0 / n);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate("triangulation SVD failed".into()))?;
    let k = svd.singular_values.imin();
    let h = v_t.row(k);
    if h[3].abs() <= 1e-14 * h.norm() {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let in_front = pi.world_to_camera(&point).z > 0.0 && pj.world_to_camera(&point).z > 0.0;
    Ok(Triangulated { point, in_front })
}

/// Largest angle (degrees) between rays from the given centers to `x`.
pub fn max_ray_angle_deg(x: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    let rays: Vec<Vector3<f64>> = centers.iter().map(|c| (x - c).normalize()).collect();
    let mut best = 0.0f64;
    for a in 0..rays.len() {
        for b in a + 1..rays.len() {
            best = best.max(rays[a].cross(&rays[b]).norm().atan2(rays[a].dot(&rays[b])));
        }
    }
    best.to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildStats {
    pub tracks: usize,
    pub triangulated: usize,
    /// Fewer than two registered, calibratable members.
    pub too_short: usize,
    /// No pair triangulated in front of both cameras.
    pub failed: usize,
    pub few_inliers: usize,
    pub small_angle: usize,
}

enum Outcome {
    Point(ScenePoint),
    TooShort,
    Failed,
    FewInliers,
    SmallAngle,
}

struct Member {
    image: usize,
    keypoint: u32,
    pixel: Vector2<f64>,
    ray: Vector3<f64>,
}

fn pair_seed(seed: u64, track: usize) -> u64 {
    seed ^ (track as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn average_point(members: &[&Member], poses: &PoseState, max_pairs: usize, seed: u64) -> Option<Vector3<f64>> {
    let n = members.len();
    let all: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let chosen: Vec<(usize, usize)> = if all.len() <= max_pairs {
        all
    } else {
        let mut idx = sample(&mut rng(seed), all.len(), max_pairs).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| all[k]).collect()
    };
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (a, b) in chosen {
        let (ma, mb) = (members[a], members[b]);
        let (pa, pb) = (poses.get(ma.image)?, poses.get(mb.image)?);
        if let Ok(t) = triangulate_pair(pa, pb, &ma.ray, &mb.ray) {
            if t.in_front {
                sum += t.point;
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn reprojection_errors(
    x: &Vector3<f64>,
    members: &[Member],
    poses: &PoseState,
    cameras: &[CameraModel],
    ms: &MatchSet,
) -> Vec<f64> {
    members
        .iter()
        .map(|m| {
            let cam = &cameras[ms.images[m.image].camera];
            project(poses.get(m.image).expect("registered member"), cam, x)
                .map_or(f64::INFINITY, |p| (p - m.pixel).norm())
        })
        .collect()
}

fn build_one(
    k: usize,
    track: &[(usize, u32)],
    ms: &MatchSet,
    cameras: &[CameraModel],
    poses: &PoseState,
    cfg: &PipelineConfig,
    seed: u64,
) -> Outcome {
    let members: Vec<Member> = track
        .iter()
        .filter(|(im, _)| poses.get(*im).is_some())
        .filter_map(|&(image, keypoint)| {
            let pixel = ms.images[image].keypoints[keypoint as usize];
            let x = calibrate_point(&pixel, &cameras[ms.images[image].camera])?;
            Some(Member {
                image,
                keypoint,
                pixel,
                ray: homogeneous(&x),
            })
        })
        .collect();
    if members.len() < 2 {
        return Outcome::TooShort;
    }
    let refs: Vec<&Member> = members.iter().collect();
    let Some(mut x) = average_point(&refs, poses, cfg.triangulation_max_pairs, pair_seed(seed, k)) else {
        return Outcome::Failed;
    };
    let mut errors = reprojection_errors(&x, &members, poses, cameras, ms);
    let inlier = |e: &f64| *e <= cfg.reproj_outlier_px;
    let n_in = errors.iter().filter(|e| inlier(e)).count();
    if n_in >= 2 && n_in < members.len() {
        let kept: Vec<&Member> = members
            .iter()
            .zip(&errors)
            .filter(|(_, e)| inlier(e))
            .map(|(m, _)| m)
            .collect();
        if let Some(y) = average_point(&kept, poses, cfg.triangulation_max_pairs, pair_seed(seed, k)) {
            x = y;
            errors = reprojection_errors(&x, &members, poses, cameras, ms);
        }
    }
    let inliers: Vec<usize> = (0..members.len()).filter(|&m| inlier(&errors[m])).collect();
    if inliers.len() < cfg.triangulation_min_track_inliers {
        return Outcome::FewInliers;
    }
    let centers: Vec<Vector3<f64>> = inliers
        .iter()
        .map(|&m| poses.get(members[m].image).unwrap().center)
        .collect();
    if max_ray_angle_deg(&x, &centers) < cfg.triangulation_min_angle_deg {
        return Outcome::SmallAngle;
    }
    let error = inliers.iter().map(|&m| errors[m]).sum::<f64>() / inliers.len() as f64;
    Outcome::Point(ScenePoint {
        xyz: x,
        track: k,
        observations: members
            .iter()
            .zip(&errors)
            .map(|(m, e)| Observation {
                image: m.image,
                keypoint: m.keypoint,
                xy: m.pixel,
                inlier: inlier(e),
            })
            .collect(),
        rgb: GRAY,
        error,
    })
}

/// Triangulates every track against the registered poses.
pub fn build_points(
    ms: &MatchSet,
    tracks: &TrackSet,
    cameras: &[CameraModel],
    poses: &PoseState,
    cfg: &PipelineConfig,
    seed: u64,
) -> (Vec<ScenePoint>, BuildStats) {
    let outcomes: Vec<Outcome> = tracks
        .tracks
        .par_iter()
        .enumerate()
        .map(|(k, t)| build_one(k, t, ms, cameras, poses, cfg, seed))
        .collect();
    let mut stats = BuildStats {
        tracks: tracks.len(),
        ..BuildStats::default()
    };
    let mut points = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Point(p) => {
                stats.triangulated += 1;
                points.push(p);
            }
            Outcome::TooShort => stats.too_short += 1,
            Outcome::Failed => stats.failed += 1,
            Outcome::FewInliers => stats.few_inliers += 1,
            Outcome::SmallAngle => stats.small_angle += 1,
        }
    }
    (points, stats)
}
