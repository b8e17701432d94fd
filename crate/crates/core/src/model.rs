//! Domain types shared by every pipeline stage.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are world-to-camera: a world point `X` maps to `R (X - o)` in the
//!   camera frame, with `o` the camera center in world coordinates.
//! * Image pairs are stored with `i < j`. The relative rotation of a pair is
//!   `R_j R_iᵀ` and the relative translation is `R_j (o_i - o_j)`, so the
//!   epipolar constraint reads `x_jᵀ [t]ₓ R x_i = 0`.
//! * Keypoints stay in pixels (origin top-left) until the intrinsics are known.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type ImageId = usize;
pub type CameraId = usize;
pub type PairId = usize;

/// Pixel coordinates, origin at the top-left corner.
pub type Keypoint = Vector2<f64>;

/// Index of a keypoint inside its image.
pub type KeypointIdx = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeometryClass {
    Fundamental,
    Homography,
}

impl GeometryClass {
    pub fn tag(self) -> &'static str {
        match self {
            GeometryClass::Fundamental => "F",
            GeometryClass::Homography => "H",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub name: String,
    pub camera: CameraId,
    pub width: u32,
    pub height: u32,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePairMatches {
    pub i: ImageId,
    pub j: ImageId,
    pub class: GeometryClass,
    /// `(keypoint in i, keypoint in j)`.
    pub correspondences: Vec<(KeypointIdx, KeypointIdx)>,
    /// The whole record was created by track completion.
    pub synthetic_from_tracks: bool,
    /// Correspondences before this index were ingested; the rest come from
    /// track completion.
    pub n_original: usize,
}

impl ImagePairMatches {
    pub fn new(i: ImageId, j: ImageId, class: GeometryClass, correspondences: Vec<(KeypointIdx, KeypointIdx)>) -> Self {
        let n_original = correspondences.len();
        Self {
            i,
            j,
            class,
            correspondences,
            synthetic_from_tracks: false,
            n_original,
        }
    }
}

/// Pipeline input: images with keypoints plus verified pairwise matches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub images: Vec<ImageInfo>,
    pub pairs: Vec<ImagePairMatches>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    SelfPair,
    PairOrder,
    DanglingImage,
    DuplicatePair,
    DuplicateCorrespondence,
    KeypointIndex,
    OutOfBounds,
    NonFinite,
    CameraIds,
    CameraSize,
    ImageSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, message: String) -> Self {
        Self { kind, message }
    }
}

impl MatchSet {
    pub fn num_cameras(&self) -> usize {
        self.images.iter().map(|im| im.camera + 1).max().unwrap_or(0)
    }

    pub fn images_of_camera(&self, camera: CameraId) -> impl Iterator<Item = ImageId> + '_ {
        self.images
            .iter()
            .enumerate()
            .filter(move |(_, im)| im.camera == camera)
            .map(|(id, _)| id)
    }

    pub fn camera_of(&self, image: ImageId) -> CameraId {
        self.images[image].camera
    }

    pub fn pixel_pairs(&self, pair: &ImagePairMatches) -> Vec<(Keypoint, Keypoint)> {
        let a = &self.images[pair.i].keypoints;
        let b = &self.images[pair.j].keypoints;
        pair.correspondences
            .iter()
            .map(|&(ki, kj)| (a[ki as usize], b[kj as usize]))
            .collect()
    }

    /// Checks every structural invariant; one diagnostic per violation.
    pub fn validate(&self) -> Vec<Diagnostic> {
        use DiagnosticKind::*;
        let mut out = Vec::new();
        let n = self.images.len();

        let mut camera_size: HashMap<CameraId, (u32, u32)> = HashMap::new();
        for (id, im) in self.images.iter().enumerate() {
            if im.width == 0 || im.height == 0 {
                out.push(Diagnostic::new(ImageSize, format!("image {id}: zero size")));
            }
            match camera_size.get(&im.camera) {
                Some(&size) if size != (im.width, im.height) => out.push(Diagnostic::new(
                    CameraSize,
                    format!("image {id}: size differs from other images of camera {}", im.camera),
                )),
                Some(_) => {}
                None => {
                    camera_size.insert(im.camera, (im.width, im.height));
                }
            }
            for (k, kp) in im.keypoints.iter().enumerate() {
                if !kp.x.is_finite() || !kp.y.is_finite() {
                    out.push(Diagnostic::new(
                        NonFinite,
                        format!("image {id} keypoint {k}: non-finite"),
                    ));
                } else if kp.x < 0.0 || kp.y < 0.0 || kp.x > im.width as f64 || kp.y > im.height as f64 {
                    out.push(Diagnostic::new(
                        OutOfBounds,
                        format!("image {id} keypoint {k}: out of bounds ({}, {})", kp.x, kp.y),
                    ));
                }
            }
        }
        let cameras = self.num_cameras();
        let used: HashSet<CameraId> = self.images.iter().map(|im| im.camera).collect();
        if used.len() != cameras {
            out.push(Diagnostic::new(
                CameraIds,
                format!(
                    "camera ids are not contiguous: {} used out of 0..{}",
                    used.len(),
                    cameras
                ),
            ));
        }

        let mut seen_pairs = HashSet::new();
        for (p, pair) in self.pairs.iter().enumerate() {
            if pair.i == pair.j {
                out.push(Diagnostic::new(
                    SelfPair,
                    format!("pair {p}: self-pair ({}, {})", pair.i, pair.j),
                ));
                continue;
            }
            if pair.i >= n || pair.j >= n {
                out.push(Diagnostic::new(
                    DanglingImage,
                    format!("pair {p}: references missing image ({}, {})", pair.i, pair.j),
                ));
                continue;
            }
            if pair.i > pair.j {
                out.push(Diagnostic::new(
                    PairOrder,
                    format!("pair {p}: stored as ({}, {}), need i < j", pair.i, pair.j),
                ));
            }
            if !seen_pairs.insert((pair.i.min(pair.j), pair.i.max(pair.j))) {
                out.push(Diagnostic::new(
                    DuplicatePair,
                    format!("pair {p}: duplicate record ({}, {})", pair.i, pair.j),
                ));
            }
            let (ni, nj) = (self.images[pair.i].keypoints.len(), self.images[pair.j].keypoints.len());
            let mut seen = HashSet::with_capacity(pair.correspondences.len());
            for &(a, b) in &pair.correspondences {
                if a as usize >= ni || b as usize >= nj {
                    out.push(Diagnostic::new(
                        KeypointIndex,
                        format!("pair {p}: keypoint index ({a}, {b}) out of range"),
                    ));
                } else if !seen.insert((a, b)) {
                    out.push(Diagnostic::new(
                        DuplicateCorrespondence,
                        format!("pair {p}: duplicate correspondence ({a}, {b})"),
                    ));
                }
            }
        }
        out
    }
}

/// Pinhole camera with principal point at the image center and a
/// one-parameter division distortion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Division-model parameter on coordinates scaled by the half diagonal.
    pub alpha: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(width: u32, height: u32, focal: f64, alpha: f64) -> Self {
        Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            alpha,
            width,
            height,
        }
    }

    /// Radius that maps to 1 in distortion-normalized coordinates.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt()
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }

    /// Horizontal field of view in degrees.
    pub fn fov_deg(&self) -> f64 {
        2.0 * (self.width as f64 / 2.0 / self.focal).atan().to_degrees()
    }

    pub fn focal_from_fov(width: u32, fov_deg: f64) -> f64 {
        (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation angle between two rotation matrices, in `[0, π]`.
///
/// Computed from both the trace and the skew part so it stays accurate near
/// 0 and π, where `acos` alone loses half the digits.
pub fn geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    let c = 0.5 * (d.trace() - 1.0);
    let s = 0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    s.atan2(c)
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub const ORTHO_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn try_new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        if ortho > Self::ORTHO_TOL || m.determinant() < 0.0 {
            return Err(Error::Degenerate(format!(
                "not a rotation: |RᵀR - I| = {ortho:.3e}, det = {:.6}",
                m.determinant()
            )));
        }
        Ok(Self(m))
    }

    /// Projects an arbitrary matrix onto SO(3) (closest in Frobenius norm).
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn geodesic(&self, other: &Rotation3) -> f64 {
        geodesic(&self.0, &other.0)
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 1e-12) {
            return Err(Error::Degenerate("zero quaternion".into()));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self(*unit.to_rotation_matrix().matrix()))
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        self.compose(&rhs)
    }
}

/// World-to-camera pose of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3,
    pub center: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation3, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    /// `t = -R o`.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation.matrix() * self.center)
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * (x - self.center)
    }
}

/// Per-image poses; `None` marks an unregistered image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseState {
    pub poses: Vec<Option<Pose>>,
}

impl PoseState {
    pub fn unregistered(n: usize) -> Self {
        Self { poses: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, image: ImageId) -> Option<&Pose> {
        self.poses.get(image).and_then(|p| p.as_ref())
    }

    pub fn registered(&self) -> impl Iterator<Item = (ImageId, &Pose)> {
        self.poses
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn num_registered(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }
}

/// Calibrated correspondences of one image pair in homogeneous normalized
/// coordinates (`z = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPair {
    pub i: ImageId,
    pub j: ImageId,
    pub class: GeometryClass,
    pub points: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Number of ingested (not track-completed) correspondences at the front of `points`.
    pub n_original: usize,
}

/// Geometry of one image pair as used by the translation and epipolar stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeometry {
    pub i: ImageId,
    pub j: ImageId,
    /// `R_j R_iᵀ`.
    pub rel_rotation: Rotation3,
    /// Unit vector from center `i` to center `j` in world coordinates.
    pub rel_direction_world: Vector3<f64>,
    pub inlier_pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Row-major 9×9 quadratic form over the active point pairs.
    pub weight_matrix: nalgebra::SMatrix<f64, 9, 9>,
    /// Absolute epipolar residual of every point pair at the last re-weighting.
    pub residuals: Vec<f64>,
}

/// A track member: an image and a keypoint index in it.
pub type TrackNode = (ImageId, KeypointIdx);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    pub tracks: Vec<Vec<TrackNode>>,
    pub index: HashMap<TrackNode, usize>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track_of(&self, node: TrackNode) -> Option<usize> {
        self.index.get(&node).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: ImageId,
    pub keypoint: KeypointIdx,
    pub xy: Keypoint,
    pub inlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub xyz: Vector3<f64>,
    pub track: usize,
    pub observations: Vec<Observation>,
    pub rgb: [u8; 3],
    /// Mean reprojection error of the inlier observations, in pixels.
    pub error: f64,
}

/// Final reconstruction: intrinsics, poses and sparse points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneModel {
    pub cameras: Vec<CameraModel>,
    pub image_names: Vec<String>,
    pub image_cameras: Vec<CameraId>,
    pub poses: PoseState,
    pub points: Vec<ScenePoint>,
}

impl SceneModel {
    pub fn camera_of(&self, image: ImageId) -> &CameraModel {
        &self.cameras[self.image_cameras[image]]
    }

    pub fn image_by_name(&self, name: &str) -> Option<ImageId> {
        self.image_names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(camera: CameraId, kps: &[(f64, f64)]) -> ImageInfo {
        ImageInfo {
            name: format!("im{camera}"),
            camera,
            width: 100,
            height: 80,
            keypoints: kps.iter().map(|&(x, y)| Vector2::new(x, y)).collect(),
        }
    }

    fn three_images() -> MatchSet {
        let kps = [(10.0, 10.0), (20.0, 30.0), (50.0, 40.0)];
        MatchSet {
            images: vec![image(0, &kps), image(0, &kps), image(0, &kps)],
            pairs: vec![
                ImagePairMatches::new(0, 1, GeometryClass::Fundamental, vec![(0, 0), (1, 1)]),
                ImagePairMatches::new(1, 2, GeometryClass::Fundamental, vec![(0, 0), (2, 2)]),
                ImagePairMatches::new(0, 2, GeometryClass::Homography, vec![(1, 1)]),
            ],
        }
    }

    #[test]
    fn well_formed_set_has_no_diagnostics() {
        assert!(three_images().validate().is_empty());
    }

    #[test]
    fn self_pair_is_reported() {
        let mut ms = three_images();
        ms.pairs
            .push(ImagePairMatches::new(2, 2, GeometryClass::Fundamental, vec![(0, 1)]));
        let d = ms.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::SelfPair);
        assert!(d[0].message.contains("self-pair"));
    }

    #[test]
    fn out_of_bounds_keypoint_is_reported() {
        let mut ms = three_images();
        ms.images[1].keypoints[2].x = 105.0;
        let d = ms.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::OutOfBounds);
        assert!(d[0].message.contains("out of bounds"));
    }

    #[test]
    fn dangling_and_duplicate_are_reported() {
        let mut ms = three_images();
        ms.pairs
            .push(ImagePairMatches::new(0, 7, GeometryClass::Fundamental, vec![]));
        ms.pairs[0].correspondences.push((0, 0));
        let kinds: Vec<_> = ms.validate().iter().map(|d| d.kind).collect();
        assert!(kinds.contains(&DiagnosticKind::DanglingImage));
        assert!(kinds.contains(&DiagnosticKind::DuplicateCorrespondence));
    }

    #[test]
    fn rotation_constructor_rejects_non_orthogonal() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-5;
        assert!(Rotation3::try_new(m).is_err());
        m[(0, 1)] = 1e-8;
        assert!(Rotation3::try_new(m).is_ok());
        assert!(Rotation3::try_new(-Matrix3::identity()).is_err());
    }

    #[test]
    fn geodesic_properties() {
        let i = Rotation3::identity();
        for &theta in &[0.0, 1e-9, 0.3, 1.0, 2.5, std::f64::consts::PI] {
            let r = Rotation3::rot_z(theta);
            assert!((i.geodesic(&r) - theta).abs() < 1e-12, "theta {theta}");
            assert!((r.geodesic(&i) - i.geodesic(&r)).abs() < 1e-15);
        }
        let r = Rotation3::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.7);
        assert_eq!(r.geodesic(&r), 0.0);
    }

    #[test]
    fn quaternion_round_trip_has_non_negative_w() {
        let r = Rotation3::from_axis_angle(&Vector3::new(-1.0, 0.5, 0.2), 3.0);
        let q = r.to_quaternion();
        assert!(q[0] >= 0.0);
        let back = Rotation3::from_quaternion(q).unwrap();
        assert!(r.geodesic(&back) < 1e-12);
    }
}
