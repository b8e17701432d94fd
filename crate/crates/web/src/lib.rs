//! Browser bindings for three interactive views of the pipeline on a small
//! synthetic ring scene: the distortion score curve, the focal validity
//! vote and a full reconstruction.
//!
//! The computations live in plain functions so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use fastmap::distortion::{self, ScoringPair, Side};
use fastmap::metrics::{self, EvalReport};
use fastmap::synth::{self, SynthScene, SynthSpec};
use fastmap::{focal, pipeline, CameraModel, PipelineConfig};
use wasm_bindgen::prelude::*;

/// Largest scene the page may request; keeps one reconstruction under a
/// few seconds in the browser.
pub const MAX_IMAGES: usize = 24;

pub fn scene(
    n_images: usize,
    fov_deg: f64,
    alpha: f64,
    noise_px: f64,
    outlier_frac: f64,
    seed: u64,
) -> Result<SynthScene, String> {
    if !(3..=MAX_IMAGES).contains(&n_images) {
        return Err(format!("images must be in 3..={MAX_IMAGES}"));
    }
    synth::generate(&SynthSpec {
        n_images,
        n_points: 200,
        fov_deg,
        alpha,
        noise_px,
        outlier_frac,
        seed,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())
}

/// `(alpha, mean epipolar error)` on an even grid over `[lo, hi]`.
pub fn distortion_curve(scene: &SynthScene, lo: f64, hi: f64, samples: usize) -> Result<Vec<(f64, f64)>, String> {
    let ms = &scene.matches;
    let cam = distortion::camera_geometry(ms)[0];
    let pairs: Vec<ScoringPair> = ms
        .pairs
        .iter()
        .map(|p| ScoringPair::from_pixels(&ms.pixel_pairs(p), &cam, &cam, Side::Candidate, Side::Candidate))
        .collect();
    let cfg = PipelineConfig::default();
    (0..samples.max(2))
        .map(|k| {
            let a = lo + (hi - lo) * k as f64 / (samples.max(2) - 1) as f64;
            distortion::score_alpha(a, &pairs, cfg.fit_irls_iters)
                .map(|s| (a, s))
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// `(fov_deg, log vote)` per candidate after undistorting with `alpha`.
pub fn focal_curve(scene: &SynthScene, alpha: f64) -> Result<Vec<(f64, f64)>, String> {
    let ms = &scene.matches;
    let cameras: Vec<CameraModel> = distortion::camera_geometry(ms)
        .into_iter()
        .map(|c| CameraModel::new(c.width, c.height, c.focal, alpha))
        .collect();
    let sched = focal::vote_focal_multi(ms, &cameras, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    sched.votes[0]
        .as_ref()
        .map(|v| v.scores.clone())
        .ok_or_else(|| "camera 0 had no usable pair".to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionView {
    /// Ground-truth centers, `x y z` per image.
    pub gt_centers: Vec<f64>,
    /// Estimated centers after similarity alignment to the ground truth;
    /// NaN for unregistered images.
    pub est_centers: Vec<f64>,
    /// Aligned triangulated points, `x y z` each.
    pub points: Vec<f64>,
    pub summary: String,
}

pub fn reconstruct(scene: &SynthScene, seed: u64) -> Result<ReconstructionView, String> {
    let out = pipeline::run(&scene.matches, &PipelineConfig::default(), seed).map_err(|(e, _)| e.to_string())?;
    let est = &out.scene;
    let gt = &scene.gt;
    let (src, dst): (Vec<_>, Vec<_>) = est
        .poses
        .registered()
        .filter_map(|(k, p)| Some((p.center, gt.poses.get(k)?.center)))
        .unzip();
    let sim = metrics::umeyama_align(&src, &dst).map_err(|e| e.to_string())?;
    let eval = EvalReport::from_poses(&est.poses, &gt.poses).map_err(|e| e.to_string())?;
    let flat = |v: &fastmap::nalgebra::Vector3<f64>| [v.x, v.y, v.z];
    let cam = est.cameras[0];
    Ok(ReconstructionView {
        gt_centers: gt
            .poses
            .poses
            .iter()
            .flat_map(|p| flat(&p.expect("ground truth is complete").center))
            .collect(),
        est_centers: est
            .poses
            .poses
            .iter()
            .flat_map(|p| p.map_or([f64::NAN; 3], |p| flat(&sim.apply(&p.center))))
            .collect(),
        points: est.points.iter().flat_map(|p| flat(&sim.apply(&p.xyz))).collect(),
        summary: format!(
            "{eval}\nregistered {}/{}\npoints {}\nfov {:.2} deg, alpha {:.3}",
            est.poses.num_registered(),
            est.poses.len(),
            est.points.len(),
            cam.fov_deg(),
            cam.alpha
        ),
    })
}

fn flatten(curve: Vec<(f64, f64)>) -> Vec<f64> {
    curve.into_iter().flat_map(|(a, b)| [a, b]).collect()
}

/// A synthetic scene held on the page between interactions.
#[wasm_bindgen]
pub struct Demo {
    scene: SynthScene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_images: usize,
        fov_deg: f64,
        alpha: f64,
        noise_px: f64,
        outlier_frac: f64,
        seed: u32,
    ) -> Result<Demo, JsError> {
        let scene =
            scene(n_images, fov_deg, alpha, noise_px, outlier_frac, seed as u64).map_err(|e| JsError::new(&e))?;
        Ok(Demo { scene })
    }

    /// Flat `[alpha, score, ...]`.
    #[wasm_bindgen(js_name = distortionCurve)]
    pub fn distortion_curve(&self, lo: f64, hi: f64, samples: usize) -> Result<Vec<f64>, JsError> {
        distortion_curve(&self.scene, lo, hi, samples)
            .map(flatten)
            .map_err(|e| JsError::new(&e))
    }

    /// Flat `[fov_deg, log_vote, ...]`.
    #[wasm_bindgen(js_name = focalCurve)]
    pub fn focal_curve(&self, alpha: f64) -> Result<Vec<f64>, JsError> {
        focal_curve(&self.scene, alpha)
            .map(flatten)
            .map_err(|e| JsError::new(&e))
    }

    pub fn reconstruct(&self, seed: u32) -> Result<Reconstruction, JsError> {
        reconstruct(&self.scene, seed as u64)
            .map(Reconstruction)
            .map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
pub struct Reconstruction(ReconstructionView);

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter, js_name = gtCenters)]
    pub fn gt_centers(&self) -> Vec<f64> {
        self.0.gt_centers.clone()
    }

    #[wasm_bindgen(getter, js_name = estCenters)]
    pub fn est_centers(&self) -> Vec<f64> {
        self.0.est_centers.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn points(&self) -> Vec<f64> {
        self.0.points.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn summary(&self) -> String {
        self.0.summary.clone()
    }
}
