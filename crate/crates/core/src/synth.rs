//! Synthetic scenes with ground truth.
//!
//! Points are sampled in the unit ball (or on a tilted plane), cameras are
//! placed by layout and aimed at jittered targets so that optical axes do
//! not all meet in one point (that configuration makes the focal length
//! unobservable from fundamental matrices). Projections go through the
//! pinhole model and the division distortion, then get Gaussian pixel noise.
//! Outliers are swaps of second-image keypoints inside a pair.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest;
use crate::model::{
    CameraModel, GeometryClass, ImageInfo, ImagePairMatches, MatchSet, Observation, Pose, PoseState, Rotation3,
    SceneModel, ScenePoint,
};
use crate::optim::rng;
use crate::tracks::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Cameras around the scene at varying heights.
    Ring,
    /// Cameras on a grid above the scene, looking roughly down.
    Grid,
    /// Cameras at random directions around the scene.
    Random,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ring" => Ok(Layout::Ring),
            "grid" => Ok(Layout::Grid),
            "random" => Ok(Layout::Random),
            _ => Err(format!("unknown layout {s:?} (ring, grid, random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCamera {
    pub fov_deg: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_points: usize,
    pub layout: Layout,
    /// Field of view and distortion of camera 0 when `cameras` is empty.
    pub fov_deg: f64,
    pub alpha: f64,
    pub cameras: Vec<SynthCamera>,
    /// Camera of every image; defaults to round robin over `cameras`.
    pub camera_of_image: Option<Vec<usize>>,
    pub width: u32,
    pub height: u32,
    pub noise_px: f64,
    pub outlier_frac: f64,
    /// All points on one plane; every pair is then a homography pair.
    pub planar: bool,
    /// Minimum shared points for an image pair to get a record.
    pub min_pair_matches: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 30,
            n_points: 500,
            layout: Layout::Ring,
            fov_deg: 60.0,
            alpha: 0.0,
            cameras: Vec::new(),
            camera_of_image: None,
            width: 1024,
            height: 768,
            noise_px: 0.0,
            outlier_frac: 0.0,
            planar: false,
            min_pair_matches: 20,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn camera_list(&self) -> Vec<SynthCamera> {
        if self.cameras.is_empty() {
            vec![SynthCamera {
                fov_deg: self.fov_deg,
                alpha: self.alpha,
            }]
        } else {
            self.cameras.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub matches: MatchSet,
    pub gt: SceneModel,
    /// Ground-truth 3D point of every keypoint, per image.
    pub keypoint_points: Vec<Vec<usize>>,
    /// Indices of corrupted correspondences, per pair.
    pub outliers: Vec<Vec<usize>>,
}

impl SynthScene {
    /// Writes `matches.txt` and the ground-truth model directory `gt/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ingest::write_matches(&self.matches, &dir.join("matches.txt"))?;
        ingest::write_model(&self.gt, &dir.join("gt"))
    }
}

fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Rotation3 {
    let f = (target - center).normalize();
    let up = if f.z.abs() > 0.99 { Vector3::y() } else { Vector3::z() };
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    let base = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    Rotation3::try_new(Rotation3::rot_z(roll).matrix() * base).expect("orthonormal frame")
}

fn uniform_in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vector3<f64> {
    loop {
        let p = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm_squared() <= 1.0 {
            return p * radius;
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, s: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

fn place_cameras<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<Pose> {
    let n = spec.n_images;
    (0..n)
        .map(|k| {
            let (center, target) = match spec.layout {
                Layout::Ring => {
                    let theta = std::f64::consts::TAU * k as f64 / n as f64;
                    let h = 0.8 * (3.0 * theta).sin() + rng.random_range(-0.3..0.3);
                    let radius = 4.0 + rng.random_range(-0.4..0.4);
                    (
                        Vector3::new(radius * theta.cos(), radius * theta.sin(), h),
                        jitter(rng, 0.35),
                    )
                }
                Layout::Grid => {
                    let side = (n as f64).sqrt().ceil() as usize;
                    let (gx, gy) = ((k % side) as f64, (k / side) as f64);
                    let span = 2.4 / side.max(2) as f64;
                    let c = Vector3::new(
                        (gx - 0.5 * (side - 1) as f64) * span,
                        (gy - 0.5 * (side - 1) as f64) * span,
                        3.5 + rng.random_range(-0.3..0.3),
                    );
                    let target = Vector3::new(c.x * 0.5, c.y * 0.5, 0.0) + jitter(rng, 0.5);
                    (c, target)
                }
                Layout::Random => {
                    let mut dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                    dir.normalize_mut();
                    (dir * rng.random_range(3.5..5.0), jitter(rng, 0.35))
                }
            };
            let roll = rng.random_range(-0.2..0.2);
            Pose::new(look_at(&center, &target, roll), center)
        })
        .collect()
}

pub use crate::reconstruct::project;

/// Generates a scene and its match set.
pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    let cams = spec.camera_list();
    if spec.n_images < 2 || spec.n_points < 8 || cams.is_empty() {
        return Err(Error::Degenerate(
            "synthetic scene needs at least 2 images and 8 points".into(),
        ));
    }
    if !(0.0..=0.5).contains(&spec.outlier_frac) || spec.noise_px < 0.0 {
        return Err(Error::Degenerate(
            "outlier_frac must be in [0, 0.5] and noise_px >= 0".into(),
        ));
    }
    let camera_of: Vec<usize> = match &spec.camera_of_image {
        Some(v) if v.len() == spec.n_images && v.iter().all(|&c| c < cams.len()) => v.clone(),
        Some(_) => {
            return Err(Error::Degenerate(
                "camera_of_image must name a camera for every image".into(),
            ))
        }
        None => (0..spec.n_images).map(|k| k % cams.len()).collect(),
    };
    let mut rng = rng(spec.seed);
    let cameras: Vec<CameraModel> = cams
        .iter()
        .map(|c| {
            CameraModel::new(
                spec.width,
                spec.height,
                CameraModel::focal_from_fov(spec.width, c.fov_deg),
                c.alpha,
            )
        })
        .collect();

    let points: Vec<Vector3<f64>> = (0..spec.n_points)
        .map(|_| {
            if spec.planar {
                let p = uniform_in_ball(&mut rng, 1.3);
                Vector3::new(p.x, p.y, 0.25 * p.x - 0.15 * p.y)
            } else {
                uniform_in_ball(&mut rng, 1.0)
            }
        })
        .collect();
    let poses = place_cameras(spec, &mut rng);

    let noise = Normal::new(0.0, spec.noise_px.max(1e-300)).expect("valid normal");
    let margin = 3.0 * spec.noise_px + 1.0;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut keypoint_points = Vec::with_capacity(spec.n_images);
    let mut point_to_kp: Vec<Vec<Option<u32>>> = Vec::with_capacity(spec.n_images);
    for (k, pose) in poses.iter().enumerate() {
        let cam = &cameras[camera_of[k]];
        let mut kps = Vec::new();
        let mut owners = Vec::new();
        let mut lookup = vec![None; points.len()];
        for (p, x) in points.iter().enumerate() {
            let Some(px) = project(pose, cam, x) else { continue };
            if px.x < margin || px.y < margin || px.x > cam.width as f64 - margin || px.y > cam.height as f64 - margin {
                continue;
            }
            let observed = if spec.noise_px > 0.0 {
                px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                px
            };
            lookup[p] = Some(kps.len() as u32);
            kps.push(observed);
            owners.push(p);
        }
        if kps.len() < 50 {
            return Err(Error::Degenerate(format!(
                "image {k} sees only {} points (need 50)",
                kps.len()
            )));
        }
        images.push(ImageInfo {
            name: format!("img_{k:04}.jpg"),
            camera: camera_of[k],
            width: spec.width,
            height: spec.height,
            keypoints: kps,
        });
        keypoint_points.push(owners);
        point_to_kp.push(lookup);
    }

    let class = if spec.planar {
        GeometryClass::Homography
    } else {
        GeometryClass::Fundamental
    };
    let mut pairs = Vec::new();
    let mut outliers = Vec::new();
    for i in 0..spec.n_images {
        for j in i + 1..spec.n_images {
            let mut corr: Vec<(u32, u32)> = (0..points.len())
                .filter_map(|p| Some((point_to_kp[i][p]?, point_to_kp[j][p]?)))
                .collect();
            if corr.len() < spec.min_pair_matches {
                continue;
            }
            let swaps = (spec.outlier_frac * corr.len() as f64 / 2.0).round() as usize;
            let mut idx: Vec<usize> = (0..corr.len()).collect();
            idx.shuffle(&mut rng);
            let mut bad: Vec<usize> = idx[..2 * swaps].to_vec();
            for s in 0..swaps {
                let (a, b) = (idx[2 * s], idx[2 * s + 1]);
                let tmp = corr[a].1;
                corr[a].1 = corr[b].1;
                corr[b].1 = tmp;
            }
            bad.sort_unstable();
            pairs.push(ImagePairMatches::new(i, j, class, corr));
            outliers.push(bad);
        }
    }

    let mut uf = UnionFind::new(spec.n_images);
    for p in &pairs {
        uf.union(p.i, p.j);
    }
    if (0..spec.n_images).any(|k| uf.find(k) != uf.find(0)) {
        return Err(Error::Degenerate("view graph is not connected".into()));
    }

    let gt_points = points
        .iter()
        .enumerate()
        .filter_map(|(p, x)| {
            let observations: Vec<Observation> = (0..spec.n_images)
                .filter_map(|im| {
                    let kp = point_to_kp[im][p]?;
                    Some(Observation {
                        image: im,
                        keypoint: kp,
                        xy: images[im].keypoints[kp as usize],
                        inlier: true,
                    })
                })
                .collect();
            (observations.len() >= 2).then(|| ScenePoint {
                xyz: *x,
                track: p,
                observations,
                rgb: [128, 128, 128],
                error: 0.0,
            })
        })
        .collect();

    let gt = SceneModel {
        cameras,
        image_names: images.iter().map(|im| im.name.clone()).collect(),
        image_cameras: camera_of,
        poses: PoseState {
            poses: poses.into_iter().map(Some).collect(),
        },
        points: gt_points,
    };
    Ok(SynthScene {
        matches: MatchSet { images, pairs },
        gt,
        keypoint_points,
        outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::focal::essential_validity;
    use crate::twoview;

    fn relative(gt: &SceneModel, i: usize, j: usize) -> (Rotation3, Vector3<f64>) {
        let (a, b) = (gt.poses.get(i).unwrap(), gt.poses.get(j).unwrap());
        let r = b.rotation * a.rotation.transpose();
        let t = b.rotation.matrix() * (a.center - b.center);
        (r, t.normalize())
    }

    #[test]
    fn ground_truth_essential_validity_is_one() {
        let spec = SynthSpec {
            n_images: 30,
            n_points: 500,
            alpha: -0.2,
            ..SynthSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let cam = scene.gt.cameras[0];
        let k_inv = cam.intrinsic_matrix().try_inverse().unwrap();
        for p in &scene.matches.pairs {
            let (r, t) = relative(&scene.gt, p.i, p.j);
            let f = k_inv.transpose() * twoview::compose_essential(&r, &t) * k_inv;
            let k = cam.intrinsic_matrix();
            let v = essential_validity(&f, &k, &k, 0.01).unwrap();
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn noisy_residual_is_positive_and_scaled_by_noise() {
        let spec = SynthSpec {
            n_images: 6,
            n_points: 300,
            noise_px: 0.5,
            ..SynthSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let cam = scene.gt.cameras[0];
        let mut total = 0.0;
        let mut count = 0;
        for p in &scene.matches.pairs {
            let (r, t) = relative(&scene.gt, p.i, p.j);
            let e = twoview::compose_essential(&r, &t) / std::f64::consts::SQRT_2;
            for (a, b) in scene.matches.pixel_pairs(p) {
                let xa = Vector3::new((a.x - cam.cx) / cam.focal, (a.y - cam.cy) / cam.focal, 1.0);
                let xb = Vector3::new((b.x - cam.cx) / cam.focal, (b.y - cam.cy) / cam.focal, 1.0);
                total += twoview::epipolar_error(&e, &xa, &xb);
                count += 1;
            }
        }
        let mean = total / count as f64;
        let scale = spec.noise_px / cam.focal;
        assert!(mean > 0.0);
        assert!(
            mean > 0.05 * scale && mean < 5.0 * scale,
            "mean {mean} vs noise/f {scale}"
        );
    }

    #[test]
    fn same_seed_is_deterministic() {
        let spec = SynthSpec {
            n_images: 5,
            n_points: 120,
            noise_px: 1.0,
            outlier_frac: 0.05,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.gt, b.gt);
        let c = generate(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.matches, c.matches);
    }

    #[test]
    fn observations_reproject_within_noise_bound() {
        let spec = SynthSpec {
            n_images: 8,
            n_points: 300,
            noise_px: 0.7,
            alpha: -0.1,
            layout: Layout::Random,
            ..SynthSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let (mut ok, mut total) = (0, 0);
        for pt in &scene.gt.points {
            for obs in &pt.observations {
                let pose = scene.gt.poses.get(obs.image).unwrap();
                let px = project(pose, scene.gt.camera_of(obs.image), &pt.xyz).unwrap();
                total += 1;
                if (px - obs.xy).norm() <= 3.0 * spec.noise_px * 1.25 {
                    ok += 1;
                }
            }
        }
        // 2D Gaussian: P(|n| <= 3.75σ) ≈ 0.9991.
        assert!(ok as f64 / total as f64 >= 0.997, "{ok}/{total}");
    }

    #[test]
    fn outliers_are_swaps() {
        let spec = SynthSpec {
            n_images: 4,
            n_points: 200,
            outlier_frac: 0.1,
            ..SynthSpec::default()
        };
        let scene = generate(&spec).unwrap();
        for (p, bad) in scene.matches.pairs.iter().zip(&scene.outliers) {
            assert_eq!(bad.len() % 2, 0);
            assert!((bad.len() as f64 - 0.1 * p.correspondences.len() as f64).abs() <= 2.0);
            for (k, &(a, b)) in p.correspondences.iter().enumerate() {
                let same = scene.keypoint_points[p.i][a as usize] == scene.keypoint_points[p.j][b as usize];
                assert_eq!(same, !bad.contains(&k));
            }
        }
    }

    #[test]
    fn grid_and_planar_layouts_generate() {
        let grid = generate(&SynthSpec {
            layout: Layout::Grid,
            n_images: 9,
            n_points: 400,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(grid.matches.validate().is_empty());
        let planar = generate(&SynthSpec {
            planar: true,
            n_images: 6,
            n_points: 200,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(planar
            .matches
            .pairs
            .iter()
            .all(|p| p.class == GeometryClass::Homography));
    }

    #[test]
    fn too_few_visible_points_is_an_error() {
        let r = generate(&SynthSpec {
            n_points: 30,
            n_images: 4,
            ..SynthSpec::default()
        });
        assert!(r.is_err());
    }
}
