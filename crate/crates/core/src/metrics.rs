//! Pose accuracy against ground truth.
//!
//! ATE: ground-truth centers are shifted to zero centroid and scaled to unit
//! mean distance from it, the estimate is similarity-aligned to them, and the
//! RMSE of the center errors is reported.
//!
//! RRA/RTA@δ: percentage of image pairs whose relative rotation / relative
//! translation direction error is strictly below δ degrees. Pairs are taken
//! over every ground-truth registered image; a pair touching an image the
//! estimate does not register counts as an infinite error.
//!
//! AUC@δ: area under the recall curve of `max(rot, trans)` on `[0, δ]`,
//! divided by δ, computed exactly.

use std::fmt;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{PoseState, Rotation3, SceneModel};

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x * self.scale + self.translation
    }
}

/// Least-squares similarity taking `src` onto `dst`.
pub fn umeyama_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    assert_eq!(src.len(), dst.len(), "point count mismatch");
    let n = src.len();
    if n < 3 {
        return Err(Error::InsufficientOverlap(n));
    }
    let nf = n as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        spread += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let sv = spread.symmetric_eigenvalues();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    if let [_, mid, top] = sorted[..] {
        lo = lo.min(mid);
        hi = hi.max(top);
    }
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
    let scale = trace_ds / var_s;
    let rotation = Rotation3::project(&r);
    let translation = mu_d - rotation.matrix() * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Indices registered in both.
fn common(est: &PoseState, gt: &PoseState) -> Vec<usize> {
    (0..gt.len().min(est.len()))
        .filter(|&k| gt.get(k).is_some() && est.get(k).is_some())
        .collect()
}

/// RMSE of aligned center errors in normalized ground-truth units.
pub fn ate(est: &PoseState, gt: &PoseState) -> Result<f64> {
    let ids = common(est, gt);
    if ids.len() < 3 {
        return Err(Error::InsufficientOverlap(ids.len()));
    }
    let g: Vec<Vector3<f64>> = ids.iter().map(|&k| gt.get(k).unwrap().center).collect();
    let centroid = g.iter().fold(Vector3::zeros(), |a, p| a + p) / g.len() as f64;
    let mean_dist = g.iter().map(|p| (p - centroid).norm()).sum::<f64>() / g.len() as f64;
    if !(mean_dist > 0.0) {
        return Err(Error::Degenerate("ground-truth centers coincide".into()));
    }
    let g: Vec<Vector3<f64>> = g.iter().map(|p| (p - centroid) / mean_dist).collect();
    let e: Vec<Vector3<f64>> = ids.iter().map(|&k| est.get(k).unwrap().center).collect();
    let sim = umeyama_align(&e, &g)?;
    let mse = e
        .iter()
        .zip(&g)
        .map(|(a, b)| (sim.apply(a) - b).norm_squared())
        .sum::<f64>()
        / g.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rot_deg: f64,
    /// `None` when a pair of centers coincides.
    pub trans_deg: Option<f64>,
}

fn rel_direction(ri: &crate::model::Pose, rj: &crate::model::Pose) -> Option<Vector3<f64>> {
    let t = rj.rotation.matrix() * (ri.center - rj.center);
    let n = t.norm();
    (n > 1e-12).then(|| t / n)
}

/// Errors for every pair of ground-truth registered images.
pub fn relative_errors(est: &PoseState, gt: &PoseState) -> Vec<PairError> {
    let ids: Vec<usize> = gt.registered().map(|(k, _)| k).collect();
    let mut out = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a + 1..] {
            let (gi, gj) = (gt.get(i).unwrap(), gt.get(j).unwrap());
            let err = match (est.get(i), est.get(j)) {
                (Some(ei), Some(ej)) => {
                    let r_est = ej.rotation * ei.rotation.transpose();
                    let r_gt = gj.rotation * gi.rotation.transpose();
                    let trans = match (rel_direction(ei, ej), rel_direction(gi, gj)) {
                        (Some(a), Some(b)) => Some(a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()),
                        _ => None,
                    };
                    PairError {
                        i,
                        j,
                        rot_deg: r_est.geodesic(&r_gt).to_degrees(),
                        trans_deg: trans,
                    }
                }
                _ => PairError {
                    i,
                    j,
                    rot_deg: f64::INFINITY,
                    trans_deg: Some(f64::INFINITY),
                },
            };
            out.push(err);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub rra: f64,
    pub rta: f64,
    pub auc: f64,
}

fn percent_below(values: &[f64], delta: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().filter(|&&v| v < delta).count() as f64 / values.len() as f64
}

/// `100/(N δ) Σ max(0, δ − e)`: exact area under the step recall curve.
pub fn auc(values: &[f64], delta: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().map(|&e| (delta - e).max(0.0)).sum::<f64>() / (values.len() as f64 * delta)
}

pub fn rra_rta_auc(errors: &[PairError], delta: f64) -> Result<Recall> {
    if errors.is_empty() {
        return Err(Error::Empty("no pair errors"));
    }
    assert!(delta > 0.0, "delta must be positive");
    let rot: Vec<f64> = errors.iter().map(|e| e.rot_deg).collect();
    let trans: Vec<f64> = errors.iter().filter_map(|e| e.trans_deg).collect();
    let joint: Vec<f64> = errors
        .iter()
        .filter_map(|e| e.trans_deg.map(|t| t.max(e.rot_deg)))
        .collect();
    Ok(Recall {
        rra: percent_below(&rot, delta),
        rta: percent_below(&trans, delta),
        auc: auc(&joint, delta),
    })
}

/// The fixed metric table printed by `eval`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ate: f64,
    pub rra1: f64,
    pub rra3: f64,
    pub rta1: f64,
    pub rta3: f64,
    pub auc1: f64,
    pub auc3: f64,
    pub n_gt: usize,
    pub n_registered: usize,
}

impl EvalReport {
    pub fn from_poses(est: &PoseState, gt: &PoseState) -> Result<Self> {
        let errors = relative_errors(est, gt);
        let r1 = rra_rta_auc(&errors, 1.0)?;
        let r3 = rra_rta_auc(&errors, 3.0)?;
        Ok(Self {
            ate: ate(est, gt)?,
            rra1: r1.rra,
            rra3: r3.rra,
            rta1: r1.rta,
            rta3: r3.rta,
            auc1: r1.auc,
            auc3: r3.auc,
            n_gt: gt.num_registered(),
            n_registered: common(est, gt).len(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ATE    {:.6}", self.ate)?;
        writeln!(f, "RRA@1  {:.3}", self.rra1)?;
        writeln!(f, "RRA@3  {:.3}", self.rra3)?;
        writeln!(f, "RTA@1  {:.3}", self.rta1)?;
        writeln!(f, "RTA@3  {:.3}", self.rta3)?;
        writeln!(f, "AUC@1  {:.3}", self.auc1)?;
        write!(f, "AUC@3  {:.3}", self.auc3)
    }
}

/// Re-indexes `est` onto the image order of `gt` by name. Images missing
/// from `est` become unregistered; extra images in `est` are ignored.
pub fn match_by_name(est: &SceneModel, gt: &SceneModel) -> (PoseState, usize, usize) {
    let poses = gt
        .image_names
        .iter()
        .map(|name| est.image_by_name(name).and_then(|k| est.poses.get(k).copied()))
        .collect();
    let missing = gt
        .image_names
        .iter()
        .enumerate()
        .filter(|(k, n)| gt.poses.get(*k).is_some() && est.image_by_name(n).is_none())
        .count();
    let extra = est
        .image_names
        .iter()
        .enumerate()
        .filter(|(k, n)| est.poses.get(*k).is_some() && gt.image_by_name(n).is_none())
        .count();
    (PoseState { poses }, missing, extra)
}

pub fn evaluate(est: &SceneModel, gt: &SceneModel) -> Result<EvalReport> {
    let (poses, missing, extra) = match_by_name(est, gt);
    if missing > 0 || extra > 0 {
        log::warn!("image sets differ: {missing} ground-truth images missing from the estimate, {extra} extra");
    }
    EvalReport::from_poses(&poses, &gt.poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pose;
    use crate::optim::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_poses(n: usize, seed: u64) -> PoseState {
        let mut rng = rng(seed);
        PoseState {
            poses: (0..n)
                .map(|_| {
                    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    Some(Pose::new(
                        Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.0)),
                        Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                    ))
                })
                .collect(),
        }
    }

    fn transformed(p: &PoseState, s: f64, q: &Rotation3, t: &Vector3<f64>) -> PoseState {
        PoseState {
            poses: p
                .poses
                .iter()
                .map(|x| x.map(|x| Pose::new(x.rotation * q.transpose(), q.matrix() * x.center * s + t)))
                .collect(),
        }
    }

    #[test]
    fn umeyama_identity_and_known_similarity() {
        let src: Vec<Vector3<f64>> = (0..6)
            .map(|k| Vector3::new(k as f64, (k * k) as f64 * 0.3, (k as f64).sin()))
            .collect();
        let id = umeyama_align(&src, &src).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(id.rotation.geodesic(&Rotation3::identity()) < 1e-10);
        assert!(id.translation.norm() < 1e-10);
        let rz = Rotation3::rot_z(std::f64::consts::FRAC_PI_2);
        let dst: Vec<_> = src
            .iter()
            .map(|p| rz.matrix() * p * 2.0 + Vector3::new(1.0, 2.0, 3.0))
            .collect();
        let s = umeyama_align(&src, &dst).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-10);
        assert!((s.rotation.matrix() - rz.matrix()).amax() < 1e-10);
        assert!((s.translation - Vector3::new(1.0, 2.0, 3.0)).amax() < 1e-10);
        let line: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert!(umeyama_align(&line, &line).is_err());
    }

    #[test]
    fn ate_examples() {
        let gt = random_poses(10, 1);
        let est = transformed(&gt, 3.0, &Rotation3::rot_z(0.4), &Vector3::new(5.0, 0.0, -1.0));
        assert!(ate(&est, &gt).unwrap() < 1e-10);

        // Ground truth already normalized; displace one center by 0.1.
        let mut normalized = gt.clone();
        let c: Vec<Vector3<f64>> = gt.registered().map(|(_, p)| p.center).collect();
        let centroid = c.iter().fold(Vector3::zeros(), |a, p| a + p) / 10.0;
        let md = c.iter().map(|p| (p - centroid).norm()).sum::<f64>() / 10.0;
        for p in normalized.poses.iter_mut().flatten() {
            p.center = (p.center - centroid) / md;
        }
        let mut moved = normalized.clone();
        moved.poses[3].as_mut().unwrap().center += Vector3::new(0.1, 0.0, 0.0);
        // Alignment absorbs part of the displacement, so the RMSE is at most 0.1/√10.
        let v = ate(&moved, &normalized).unwrap();
        assert!(v <= 0.1 / 10f64.sqrt() + 1e-12 && v > 0.025, "{v}");

        let mut partial = est.clone();
        partial.poses[0] = None;
        let a = ate(&partial, &gt).unwrap();
        assert!(a < 1e-10);
    }

    #[test]
    fn relative_error_examples() {
        let gt = random_poses(6, 2);
        assert!(relative_errors(&gt, &gt)
            .iter()
            .all(|e| e.rot_deg < 1e-6 && e.trans_deg.unwrap() < 1e-6));
        let est = transformed(
            &gt,
            0.5,
            &Rotation3::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 1.0),
            &Vector3::new(1.0, 1.0, 1.0),
        );
        for (a, b) in relative_errors(&est, &gt).iter().zip(relative_errors(&gt, &gt)) {
            assert!((a.rot_deg - b.rot_deg).abs() < 1e-9);
        }
        let mut one = gt.clone();
        let p = one.poses[2].as_mut().unwrap();
        p.rotation = Rotation3::from_axis_angle(&Vector3::z(), 2f64.to_radians()) * p.rotation;
        let errs = relative_errors(&one, &gt);
        let moved: Vec<_> = errs.iter().filter(|e| e.rot_deg > 1e-6).collect();
        assert_eq!(moved.len(), 5);
        assert!(moved.iter().all(|e| (e.rot_deg - 2.0).abs() < 1e-9));
    }

    fn errs(values: &[f64]) -> Vec<PairError> {
        values
            .iter()
            .map(|&v| PairError {
                i: 0,
                j: 1,
                rot_deg: v,
                trans_deg: Some(v),
            })
            .collect()
    }

    #[test]
    fn recall_examples() {
        let r = rra_rta_auc(&errs(&[0.5, 1.5, 3.5]), 3.0).unwrap();
        assert!((r.rta - 200.0 / 3.0).abs() < 1e-9);
        let r = rra_rta_auc(&errs(&[0.5, 1.5, 2.5]), 3.0).unwrap();
        assert!((r.auc - 50.0).abs() < 1e-12);
        let r = rra_rta_auc(&errs(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!((r.rra, r.rta, r.auc), (100.0, 100.0, 100.0));
        assert!(rra_rta_auc(&[], 1.0).is_err());
        // Threshold itself does not count.
        assert_eq!(rra_rta_auc(&errs(&[3.0]), 3.0).unwrap().rta, 0.0);
    }

    #[test]
    fn unregistered_images_are_failures() {
        let gt = random_poses(5, 3);
        let mut est = gt.clone();
        est.poses[4] = None;
        let r = rra_rta_auc(&relative_errors(&est, &gt), 1.0).unwrap();
        assert!((r.rra - 60.0).abs() < 1e-9);
    }

    #[test]
    fn report_is_similarity_invariant() {
        let gt = random_poses(8, 4);
        let mut rng = rng(40);
        let noisy = PoseState {
            poses: gt
                .poses
                .iter()
                .map(|p| {
                    p.map(|p| {
                        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                        Pose::new(
                            Rotation3::from_axis_angle(&axis, 0.02) * p.rotation,
                            p.center + axis * 0.05,
                        )
                    })
                })
                .collect(),
        };
        let a = EvalReport::from_poses(&noisy, &gt).unwrap();
        let moved = transformed(&noisy, 7.0, &Rotation3::rot_z(2.0), &Vector3::new(-3.0, 1.0, 2.0));
        let b = EvalReport::from_poses(&moved, &gt).unwrap();
        assert!((a.ate - b.ate).abs() < 1e-9);
        assert!((a.auc3 - b.auc3).abs() < 1e-9 && a.rta1 == b.rta1 && a.rra1 == b.rra1);
        let text = a.to_string();
        let keys: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(keys, ["ATE", "RRA@1", "RRA@3", "RTA@1", "RTA@3", "AUC@1", "AUC@3"]);
    }

    proptest! {
        #[test]
        fn auc_bounded_by_recall(values in prop::collection::vec(0.0f64..6.0, 1..40), delta in 0.1f64..5.0) {
            let a = auc(&values, delta);
            let r = 100.0 * values.iter().filter(|&&v| v <= delta).count() as f64 / values.len() as f64;
            prop_assert!(a <= r + 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
