//! End-to-end driver and run report.
//!
//! Stages run in a fixed order; a fatal error carries the tag of the stage
//! that raised it. `report.txt` holds one `stage` line per completed stage
//! with its wall time and key quantities, then a `status` line.

use std::fmt::{self, Write as _};
use std::path::Path;
use web_time::Instant;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::epipolar::{self, Mat9};
use crate::error::{Error, Result};
use crate::model::{
    CameraModel, GeometryClass, ImagePairMatches, MatchSet, NormalizedPair, PairGeometry, Pose, PoseState, Rotation3,
    SceneModel,
};
use crate::rotation::{self, RelEdge, RelPoseGraph};
use crate::translation::{self, DirEdge};
use crate::twoview;
use crate::{distortion, focal, ingest, reconstruct, tracks};

/// A fatal error and the stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub name: &'static str,
    pub seconds: f64,
    pub values: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<StageLog>,
    /// `None` on success.
    pub failure: Option<String>,
}

impl Report {
    pub fn stage(&self, name: &str) -> Option<&StageLog> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn value(&self, stage: &str, key: &str) -> Option<&str> {
        self.stage(stage)?
            .values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# fastmap run report\n");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        for st in &self.stages {
            let _ = write!(s, "stage {} time_s={:.6}", st.name, st.seconds);
            for (k, v) in &st.values {
                let _ = write!(s, " {k}={v}");
            }
            s.push('\n');
        }
        let total: f64 = self.stages.iter().map(|s| s.seconds).sum();
        let _ = writeln!(s, "total_time_s = {total:.6}");
        match &self.failure {
            None => s.push_str("status = ok\n"),
            Some(f) => {
                let _ = writeln!(s, "status = failed {f}");
            }
        }
        s
    }
}

/// Times stages and tags their errors.
struct Runner {
    report: Report,
}

impl Runner {
    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&mut Vec<(String, String)>) -> Result<T>,
    ) -> std::result::Result<T, StageError> {
        let start = Instant::now();
        let mut values = Vec::new();
        let out = f(&mut values);
        let seconds = start.elapsed().as_secs_f64();
        match out {
            Ok(v) => {
                log::info!("stage {name}: {seconds:.3} s");
                self.report.stages.push(StageLog { name, seconds, values });
                Ok(v)
            }
            Err(error) => {
                let e = StageError { stage: name, error };
                self.report.failure = Some(e.to_string());
                Err(e)
            }
        }
    }
}

fn kv(values: &mut Vec<(String, String)>, key: &str, value: impl fmt::Display) {
    values.push((key.to_string(), value.to_string()));
}

/// Geometric test of a correspondence in calibrated coordinates.
#[derive(Debug, Clone, Copy)]
enum Check {
    Epipolar(Matrix3<f64>),
    /// Homography transfer, used for pure rotations and planar pairs.
    Transfer(Matrix3<f64>),
}

impl Check {
    fn residual(&self, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
        match self {
            Check::Epipolar(e) => sampson_distance(e, x1, x2),
            Check::Transfer(h) => twoview::transfer_error(h, x1, x2),
        }
    }
}

/// First-order geometric distance to the epipolar constraint.
fn sampson_distance(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let (ex1, etx2) = (e * x1, e.transpose() * x2);
    let d = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if d > 0.0 {
        x2.dot(&ex1).abs() / d.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Calibrated-unit tolerance of a pair for a pixel threshold.
fn pair_tolerance(cameras: &[CameraModel], ci: usize, cj: usize, px: f64) -> f64 {
    2.0 * px / (cameras[ci].focal + cameras[cj].focal)
}

/// Relative rotation of one calibrated pair, its inlier count and the check
/// that defines the inliers.
fn relative_rotation(p: &NormalizedPair, tol: f64, cfg: &PipelineConfig) -> Option<(RelEdge, Check)> {
    if p.points.len() < 8 {
        return None;
    }
    let (rel, check) = match p.class {
        GeometryClass::Fundamental => {
            let fit = twoview::estimate_fundamental_robust(&p.points, cfg.fit_irls_iters).ok()?;
            let pose = twoview::decompose_essential(&fit.matrix, &p.points).ok()?;
            (
                pose.rotation,
                Check::Epipolar(twoview::compose_essential(&pose.rotation, &pose.translation?)),
            )
        }
        GeometryClass::Homography => {
            let h = twoview::estimate_homography_robust(&p.points, cfg.fit_irls_iters).ok()?;
            let pose = twoview::decompose_homography(&h, &p.points).ok()?;
            (pose.rotation, Check::Transfer(h))
        }
    };
    let inliers = p.points.iter().filter(|(x1, x2)| check.residual(x1, x2) <= tol).count();
    Some((
        RelEdge {
            i: p.i,
            j: p.j,
            rel,
            inliers,
        },
        check,
    ))
}

/// Epipolar check of a pair implied by two registered poses.
fn pose_check(poses: &PoseState, i: usize, j: usize) -> Option<Check> {
    let (pi, pj) = (poses.get(i)?, poses.get(j)?);
    let rel = pj.rotation * pi.rotation.transpose();
    let t = pj.rotation.matrix() * (pi.center - pj.center);
    (t.norm() > 0.0).then(|| Check::Epipolar(twoview::compose_essential(&rel, &t)))
}

/// The correspondences of `ms` that pass their pair's check within
/// `match_verify_px`. Pairs without a check keep nothing.
fn verified_matches(
    ms: &MatchSet,
    cameras: &[CameraModel],
    checks: &[Option<Check>],
    cfg: &PipelineConfig,
) -> MatchSet {
    let calibrated: Vec<Vec<Option<Vector3<f64>>>> = ms
        .images
        .par_iter()
        .map(|im| {
            im.keypoints
                .iter()
                .map(|k| focal::calibrate_point(k, &cameras[im.camera]).map(|x| twoview::homogeneous(&x)))
                .collect()
        })
        .collect();
    let pairs = ms
        .pairs
        .par_iter()
        .zip(checks)
        .filter_map(|(p, check)| {
            let check = check.as_ref()?;
            let (ci, cj) = (ms.images[p.i].camera, ms.images[p.j].camera);
            let tol = pair_tolerance(cameras, ci, cj, cfg.match_verify_px);
            let keep: Vec<(u32, u32)> = p
                .correspondences
                .iter()
                .copied()
                .filter(
                    |&(a, b)| match (&calibrated[p.i][a as usize], &calibrated[p.j][b as usize]) {
                        (Some(x1), Some(x2)) => check.residual(x1, x2) <= tol,
                        _ => false,
                    },
                )
                .collect();
            (!keep.is_empty()).then(|| ImagePairMatches::new(p.i, p.j, p.class, keep))
        })
        .collect();
    MatchSet {
        images: ms.images.clone(),
        pairs,
    }
}

fn correspondences(ms: &MatchSet) -> usize {
    ms.pairs.iter().map(|p| p.correspondences.len()).sum()
}

/// Estimated model and report of a successful run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scene: SceneModel,
    pub report: Report,
}

/// Seed-independent stages up to and including relative translation
/// re-estimation.
#[derive(Debug, Clone)]
pub struct Prepared {
    cameras: Vec<CameraModel>,
    rotations: Vec<Option<Rotation3>>,
    directions: Vec<(NormalizedPair, DirEdge)>,
    report: Report,
}

impl Prepared {
    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn rotations(&self) -> &[Option<Rotation3>] {
        &self.rotations
    }

    pub fn report(&self) -> &Report {
        &self.report
    }
}

/// Runs every stage on a match set. On failure the partial report is
/// returned alongside the tagged error.
pub fn run(ms: &MatchSet, cfg: &PipelineConfig, seed: u64) -> std::result::Result<RunOutput, (StageError, Report)> {
    let prepared = prepare(ms, cfg)?;
    finish(&prepared, ms, cfg, seed)
}

/// Stages from validation to relative translation.
pub fn prepare(ms: &MatchSet, cfg: &PipelineConfig) -> std::result::Result<Prepared, (StageError, Report)> {
    let mut r = Runner {
        report: Report {
            threads: rayon::current_num_threads(),
            ..Report::default()
        },
    };
    match front_stages(&mut r, ms, cfg) {
        Ok((cameras, rotations, directions)) => Ok(Prepared {
            cameras,
            rotations,
            directions,
            report: r.report,
        }),
        Err(e) => Err((e, r.report)),
    }
}

/// Seeded stages from translation alignment to triangulation. `cfg` must
/// agree with the configuration given to [`prepare`] on the earlier stages.
pub fn finish(
    prepared: &Prepared,
    ms: &MatchSet,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<RunOutput, (StageError, Report)> {
    let mut report = prepared.report.clone();
    report.seed = seed;
    let mut r = Runner { report };
    match back_stages(&mut r, prepared, ms, cfg, seed) {
        Ok(scene) => Ok(RunOutput {
            scene,
            report: r.report,
        }),
        Err(e) => Err((e, r.report)),
    }
}

type Front = (Vec<CameraModel>, Vec<Option<Rotation3>>, Vec<(NormalizedPair, DirEdge)>);

fn front_stages(r: &mut Runner, ms: &MatchSet, cfg: &PipelineConfig) -> std::result::Result<Front, StageError> {
    let n_images = ms.images.len();
    r.stage("ingest.validate", |v| {
        cfg.check()?;
        let diags = ms.validate();
        kv(v, "images", n_images);
        kv(v, "cameras", ms.num_cameras());
        kv(v, "pairs", ms.pairs.len());
        kv(
            v,
            "correspondences",
            ms.pairs.iter().map(|p| p.correspondences.len()).sum::<usize>(),
        );
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(diags))
        }
    })?;

    let alphas = r.stage("distortion", |v| {
        let sched = distortion::schedule_cameras(ms, cfg)?;
        kv(v, "alphas", join(&sched.alphas));
        kv(v, "flagged", sched.flagged.iter().filter(|&&f| f).count());
        Ok(sched.alphas)
    })?;

    let cameras: Vec<CameraModel> = r.stage("focal", |v| {
        let geometry: Vec<CameraModel> = distortion::camera_geometry(ms)
            .into_iter()
            .zip(&alphas)
            .map(|(c, &a)| CameraModel::new(c.width, c.height, c.focal, a))
            .collect();
        let sched = focal::vote_focal_multi(ms, &geometry, cfg)?;
        let cams: Vec<CameraModel> = geometry
            .iter()
            .zip(&sched.focals)
            .map(|(c, &f)| CameraModel::new(c.width, c.height, f, c.alpha))
            .collect();
        kv(v, "focals", join(&sched.focals));
        kv(
            v,
            "fov_deg",
            join(&cams.iter().map(CameraModel::fov_deg).collect::<Vec<_>>()),
        );
        kv(v, "flagged", sched.flagged.iter().filter(|&&f| f).count());
        Ok(cams)
    })?;

    let calibrated = r.stage("calibrate", |v| {
        let pairs = focal::apply_calibration(ms, &cameras);
        kv(v, "points", pairs.iter().map(|p| p.points.len()).sum::<usize>());
        Ok(pairs)
    })?;

    let (edges, checks) = r.stage("twoview.decompose", |v| {
        let fits: Vec<Option<(RelEdge, Check)>> = calibrated
            .par_iter()
            .map(|p| {
                let tol = pair_tolerance(
                    &cameras,
                    ms.images[p.i].camera,
                    ms.images[p.j].camera,
                    cfg.match_verify_px,
                );
                relative_rotation(p, tol, cfg)
            })
            .collect();
        let checks: Vec<Option<Check>> = fits.iter().map(|f| f.as_ref().map(|(_, c)| *c)).collect();
        let edges: Vec<RelEdge> = fits.into_iter().flatten().map(|(e, _)| e).collect();
        kv(v, "pairs", calibrated.len());
        kv(v, "decomposed", edges.len());
        kv(v, "inliers", edges.iter().map(|e| e.inliers).sum::<usize>());
        Ok((edges, checks))
    })?;

    let graph = r.stage("rotation.filter_pairs", |v| {
        let out = rotation::filter_pairs(&RelPoseGraph::new(n_images, edges), cfg)?;
        kv(v, "threshold", out.thresholds.last().copied().unwrap_or(f64::NAN));
        kv(v, "edges", out.graph.edges.len());
        kv(v, "registered", out.graph.registered.iter().filter(|&&x| x).count());
        Ok(out.graph)
    })?;

    let init = r.stage("rotation.init", |v| {
        let init = rotation::init_rotations(&graph)?;
        kv(v, "loss", rotation::rotation_loss(&init, &graph.edges));
        Ok(init)
    })?;

    let rotations = r.stage("rotation.refine", |v| {
        let out = rotation::refine_rotations(&init, &graph, cfg)?;
        kv(v, "steps", out.steps);
        kv(v, "loss", out.history.last().copied().unwrap_or(f64::NAN));
        Ok(out.rotations)
    })?;

    let completed = r.stage("tracks", |v| {
        let verified = verified_matches(ms, &cameras, &checks, cfg);
        let t = tracks::build_tracks(&verified);
        let completed = if cfg.track_completion {
            tracks::complete_matches(&t, &verified, cfg.track_completion_cap)
        } else {
            verified.clone()
        };
        kv(v, "verified", correspondences(&verified));
        kv(v, "tracks", t.len());
        kv(v, "pairs", completed.pairs.len());
        kv(v, "correspondences", correspondences(&completed));
        Ok(completed)
    })?;

    let directions: Vec<(NormalizedPair, DirEdge)> = r.stage("translation.relative", |v| {
        let pairs = focal::apply_calibration(&completed, &cameras);
        let out: Vec<(NormalizedPair, DirEdge)> = pairs
            .into_par_iter()
            .filter_map(|p| {
                let (ri, rj) = (rotations[p.i]?, rotations[p.j]?);
                if p.points.len() < cfg.relative_min_inliers {
                    return None;
                }
                let rel = rj * ri.transpose();
                let t = translation::reestimate_relative(&p.points, &rel, cfg).ok()?;
                let dir = translation::world_direction(&t.t, &rj);
                Some((p.clone(), DirEdge { i: p.i, j: p.j, dir }))
            })
            .collect();
        kv(v, "pairs", out.len());
        if out.is_empty() {
            return Err(Error::Empty("no pair has a translation direction"));
        }
        Ok(out)
    })?;

    Ok((cameras, rotations, directions))
}

fn back_stages(
    r: &mut Runner,
    prepared: &Prepared,
    ms: &MatchSet,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<SceneModel, StageError> {
    let n_images = ms.images.len();
    let (mut cameras, rotations, directions) = (prepared.cameras.clone(), &prepared.rotations, &prepared.directions);
    let mut poses = r.stage("translation.align", |v| {
        let edges: Vec<DirEdge> = directions.iter().map(|(_, e)| *e).collect();
        let active = translation::largest_component(n_images, &edges);
        let edges: Vec<DirEdge> = edges.into_iter().filter(|e| active[e.i] && active[e.j]).collect();
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active < 3 {
            return Err(Error::SceneDisconnected { largest: n_active });
        }
        let out = translation::multi_init_align(n_images, &edges, cfg, seed)?;
        let centers = translation::canonicalize(&out.centers, &active);
        kv(v, "edges", edges.len());
        kv(v, "registered", n_active);
        kv(v, "loss", out.loss);
        kv(v, "run_losses", join(&out.run_losses));
        let poses = (0..n_images)
            .map(|k| match (active[k], rotations[k]) {
                (true, Some(rot)) => Some(Pose::new(rot, centers[k])),
                _ => None,
            })
            .collect();
        Ok(PoseState { poses })
    })?;

    if cfg.epipolar_adjustment {
        let image_camera: Vec<usize> = ms.images.iter().map(|im| im.camera).collect();
        let adjusted = r.stage("epipolar", |v| {
            let geometry: Vec<PairGeometry> = directions
                .iter()
                .filter(|(p, _)| poses.get(p.i).is_some() && poses.get(p.j).is_some())
                .map(|(p, e)| PairGeometry {
                    i: p.i,
                    j: p.j,
                    rel_rotation: poses.get(p.j).unwrap().rotation * poses.get(p.i).unwrap().rotation.transpose(),
                    rel_direction_world: e.dir,
                    inlier_pairs: p.points.clone(),
                    weight_matrix: Mat9::zeros(),
                    residuals: Vec::new(),
                })
                .collect();
            let n_points: usize = geometry.iter().map(|g| g.inlier_pairs.len()).sum();
            let out = epipolar::irls_refine(&poses, &image_camera, cameras.len(), &geometry, cfg)?;
            kv(v, "pairs", geometry.len());
            kv(v, "point_pairs", n_points);
            kv(v, "steps", out.steps);
            kv(v, "l1_initial", out.l1_initial);
            kv(v, "l1_final", out.l1_final);
            kv(v, "pruned", out.rounds.iter().map(|r| r.pruned).sum::<usize>());
            kv(v, "reverted_rounds", out.rounds.iter().filter(|r| r.reverted).count());
            kv(v, "focal_ratio", join(&out.focal_ratio));
            Ok(out)
        })?;
        poses = adjusted.poses;
        for (c, ratio) in cameras.iter_mut().zip(&adjusted.focal_ratio) {
            c.focal *= ratio;
        }
    }

    let points = r.stage("reconstruct", |v| {
        let checks: Vec<Option<Check>> = ms.pairs.iter().map(|p| pose_check(&poses, p.i, p.j)).collect();
        let verified = verified_matches(ms, &cameras, &checks, cfg);
        let track_set = tracks::build_tracks(&verified);
        kv(v, "verified", correspondences(&verified));
        let (points, stats) = reconstruct::build_points(ms, &track_set, &cameras, &poses, cfg, seed);
        kv(v, "tracks", stats.tracks);
        kv(v, "points", stats.triangulated);
        kv(v, "too_short", stats.too_short);
        kv(v, "failed", stats.failed);
        kv(v, "few_inliers", stats.few_inliers);
        kv(v, "small_angle", stats.small_angle);
        let mut errors: Vec<f64> = points.iter().map(|p| p.error).collect();
        errors.sort_by(f64::total_cmp);
        kv(
            v,
            "median_reproj_px",
            errors.get(errors.len() / 2).copied().unwrap_or(f64::NAN),
        );
        Ok(points)
    })?;

    Ok(SceneModel {
        cameras,
        image_names: ms.images.iter().map(|im| im.name.clone()).collect(),
        image_cameras: ms.images.iter().map(|im| im.camera).collect(),
        poses,
        points,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

/// Reads a match file, runs the pipeline and writes the model directory and
/// `report.txt` into `out_dir`. The report is written on failure too.
pub fn run_to_dir(
    matches: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<RunOutput, StageError> {
    std::fs::create_dir_all(out_dir).map_err(|e| StageError {
        stage: "export",
        error: Error::io(out_dir, e),
    })?;
    let write_report = |report: &Report| {
        let path = out_dir.join("report.txt");
        std::fs::write(&path, report.to_text()).map_err(|e| StageError {
            stage: "export",
            error: Error::io(&path, e),
        })
    };
    let ms = match ingest::read_matches(matches) {
        Ok(ms) => ms,
        Err(error) => {
            let e = StageError {
                stage: "ingest.parse",
                error,
            };
            write_report(&Report {
                seed,
                threads: rayon::current_num_threads(),
                failure: Some(e.to_string()),
                ..Report::default()
            })?;
            return Err(e);
        }
    };
    match run(&ms, cfg, seed) {
        Ok(mut out) => {
            let start = Instant::now();
            let written = ingest::write_model(&out.scene, out_dir);
            let seconds = start.elapsed().as_secs_f64();
            if let Err(error) = written {
                let e = StageError { stage: "export", error };
                out.report.failure = Some(e.to_string());
                write_report(&out.report)?;
                return Err(e);
            }
            out.report.stages.push(StageLog {
                name: "export",
                seconds,
                values: vec![("dir".into(), out_dir.display().to_string())],
            });
            write_report(&out.report)?;
            Ok(out)
        }
        Err((e, report)) => {
            write_report(&report)?;
            Err(e)
        }
    }
}

/// Centers of the registered images, in image order.
pub fn registered_centers(poses: &PoseState) -> Vec<Vector3<f64>> {
    poses.registered().map(|(_, p)| p.center).collect()
}
