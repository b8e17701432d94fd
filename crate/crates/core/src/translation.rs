//! Camera centers from pairwise directions.
//!
//! Relative translation directions are re-estimated against the global
//! rotations by a search over the unit sphere, rotated into the world frame,
//! and the centers are found by L1 alignment of normalized center
//! differences with those directions.

use nalgebra::Vector3;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{ImageId, Rotation3};
use crate::optim::{rng, Adam, AdamParams};
use crate::tracks::UnionFind;
use crate::twoview::{count_in_front, PointPair};

/// Guard on `‖o_j − o_i‖` in the direction normalization.
pub const CENTER_EPS: f64 = 1e-8;

/// Ratio of minimum to median sphere error above which the error surface is
/// considered flat (no baseline).
pub const FLAT_RATIO: f64 = 0.9;

const MAX_RECENTER: usize = 16;

/// `n` nearly uniform unit vectors on a Fibonacci lattice.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * k as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Precomputed `R x₁ × x₂`, so that `x₂ᵀ [t]ₓ R x₁ = t · c`.
fn constraint_vectors(points: &[PointPair], rel: &Rotation3) -> Vec<Vector3<f64>> {
    points.iter().map(|(x1, x2)| (rel.matrix() * x1).cross(x2)).collect()
}

fn sphere_error(t: &Vector3<f64>, cs: &[Vector3<f64>]) -> f64 {
    cs.iter().map(|c| t.dot(c).abs()).sum::<f64>() / cs.len() as f64
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = t.cross(&helper).normalize();
    (a, t.cross(&a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeTranslation {
    /// `R_j (o_i − o_j)` normalized.
    pub t: Vector3<f64>,
    pub error: f64,
}

/// Mean absolute epipolar error minimized over unit translations for a
/// fixed relative rotation, with the sign fixed by cheirality.
pub fn reestimate_relative(points: &[PointPair], rel: &Rotation3, cfg: &PipelineConfig) -> Result<RelativeTranslation> {
    if points.is_empty() {
        return Err(Error::Empty("pair has no point pairs"));
    }
    let cs = constraint_vectors(points, rel);
    let lattice = fibonacci_sphere(cfg.sphere_samples);
    let errors: Vec<f64> = lattice.iter().map(|t| sphere_error(t, &cs)).collect();
    let (k, &min) = errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty lattice");
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !(median > 1e-15) || min / median > FLAT_RATIO {
        return Err(Error::Degenerate("epipolar error is flat in the translation".into()));
    }

    let mut best = (lattice[k], min);
    let mut radius = (4.0 * std::f64::consts::PI / cfg.sphere_samples as f64).sqrt();
    let g = cfg.sphere_refine_grid;
    for _ in 0..cfg.sphere_refine_levels {
        let step = 2.0 * radius / (g - 1) as f64;
        // Recenter while the best sample sits on the border; the error
        // surface is an elongated valley for narrow fields of view.
        for _ in 0..MAX_RECENTER {
            let center = best.0;
            let (a, b) = tangent_basis(&center);
            let mut border = false;
            for u in 0..g {
                for v in 0..g {
                    let du = -radius + step * u as f64;
                    let dv = -radius + step * v as f64;
                    let t = (center + a * du + b * dv).normalize();
                    let e = sphere_error(&t, &cs);
                    if e < best.1 {
                        best = (t, e);
                        border = u == 0 || v == 0 || u == g - 1 || v == g - 1;
                    }
                }
            }
            if !border {
                break;
            }
        }
        radius = step;
    }

    let t = best.0;
    let front = count_in_front(rel.matrix(), &t, points);
    let back = count_in_front(rel.matrix(), &-t, points);
    if front == back {
        return Err(Error::NoTranslationSupport);
    }
    Ok(RelativeTranslation {
        t: if front > back { t } else { -t },
        error: best.1,
    })
}

/// `−R_jᵀ t`: unit direction from center `i` to center `j` in the world frame.
pub fn world_direction(t: &Vector3<f64>, rj: &Rotation3) -> Vector3<f64> {
    -(rj.matrix().transpose() * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirEdge {
    pub i: ImageId,
    pub j: ImageId,
    /// Unit vector from center `i` to center `j`.
    pub dir: Vector3<f64>,
}

fn edge_term(oi: &Vector3<f64>, oj: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let v = oj - oi;
    let norm = v.norm().max(CENTER_EPS);
    let u = v / norm;
    let r = u - dir;
    let loss = r.abs().sum();
    let g_u = r.map(f64::signum);
    let g_v = (g_u - u * u.dot(&g_u)) / norm;
    (loss, g_v)
}

/// Mean L1 residual of the edge directions.
pub fn translation_loss(centers: &[Vector3<f64>], edges: &[DirEdge]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    edges
        .iter()
        .map(|e| edge_term(&centers[e.i], &centers[e.j], &e.dir).0)
        .sum::<f64>()
        / edges.len() as f64
}

/// Loss and subgradient with respect to every center.
pub fn loss_and_gradient(centers: &[Vector3<f64>], edges: &[DirEdge]) -> (f64, Vec<Vector3<f64>>) {
    let inv = 1.0 / edges.len().max(1) as f64;
    let terms: Vec<(f64, Vector3<f64>)> = edges
        .par_iter()
        .map(|e| edge_term(&centers[e.i], &centers[e.j], &e.dir))
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); centers.len()];
    for (e, (l, g)) in edges.iter().zip(terms) {
        loss += l * inv;
        grad[e.j] += g * inv;
        grad[e.i] -= g * inv;
    }
    (loss, grad)
}

/// Images in the largest component of the direction graph.
pub fn largest_component(n_images: usize, edges: &[DirEdge]) -> Vec<bool> {
    let mut uf = UnionFind::new(n_images);
    let mut touched = vec![false; n_images];
    for e in edges {
        uf.union(e.i, e.j);
        touched[e.i] = true;
        touched[e.j] = true;
    }
    let best = (0..n_images)
        .filter(|&k| touched[k])
        .max_by(|&a, &b| uf.component_size(a).cmp(&uf.component_size(b)).then(b.cmp(&a)));
    match best {
        None => vec![false; n_images],
        Some(b) => {
            let root = uf.find(b);
            (0..n_images).map(|k| touched[k] && uf.find(k) == root).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub centers: Vec<Vector3<f64>>,
    pub loss: f64,
}

fn descend(mut centers: Vec<Vector3<f64>>, edges: &[DirEdge], cfg: &PipelineConfig) -> Result<Alignment> {
    let mut adam = Adam::new(3 * centers.len(), AdamParams::from_config(cfg));
    let mut flat: Vec<f64> = centers.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
    for _ in 0..cfg.translation_steps {
        let (loss, grad) = loss_and_gradient(&centers, edges);
        if !loss.is_finite() {
            return Err(Error::NonFinite("translation loss"));
        }
        let g: Vec<f64> = grad.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        adam.step(&mut flat, &g, cfg.translation_lr)?;
        for (k, c) in centers.iter_mut().enumerate() {
            *c = Vector3::new(flat[3 * k], flat[3 * k + 1], flat[3 * k + 2]);
        }
    }
    let loss = translation_loss(&centers, edges);
    Ok(Alignment { centers, loss })
}

/// Adam on the mean L1 direction residual from a seeded standard-normal
/// initialization. Centers of images without edges stay at their initial
/// values.
pub fn align_centers(n_images: usize, edges: &[DirEdge], cfg: &PipelineConfig, seed: u64) -> Result<Alignment> {
    if edges.is_empty() {
        return Err(Error::Empty("no translation directions"));
    }
    let mut rng = rng(seed);
    let init: Vec<Vector3<f64>> = (0..n_images)
        .map(|_| Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)))
        .collect();
    descend(init, edges, cfg)
}

/// Moves the centroid of the `active` centers to the origin and scales them
/// to unit mean norm.
pub fn canonicalize(centers: &[Vector3<f64>], active: &[bool]) -> Vec<Vector3<f64>> {
    let n = active.iter().filter(|&&a| a).count().max(1) as f64;
    let centroid = centers
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .fold(Vector3::zeros(), |s, (c, _)| s + c)
        / n;
    let mean_norm = centers
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(c, _)| (c - centroid).norm())
        .sum::<f64>()
        / n;
    let scale = if mean_norm > 0.0 { 1.0 / mean_norm } else { 1.0 };
    centers.iter().map(|c| (c - centroid) * scale).collect()
}

/// Mean L1 residual of the edges incident to every image (0 without edges).
pub fn per_image_residual(centers: &[Vector3<f64>], edges: &[DirEdge]) -> Vec<f64> {
    let mut sum = vec![0.0; centers.len()];
    let mut count = vec![0usize; centers.len()];
    for e in edges {
        let (l, _) = edge_term(&centers[e.i], &centers[e.j], &e.dir);
        for k in [e.i, e.j] {
            sum[k] += l;
            count[k] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiInit {
    pub centers: Vec<Vector3<f64>>,
    pub loss: f64,
    /// Final loss of every independent run.
    pub run_losses: Vec<f64>,
    /// Run each image's merged initialization came from.
    pub chosen_run: Vec<usize>,
}

/// Independent runs from seeds `seed, seed+1, …`, canonicalized and merged
/// per image by the lowest mean incident residual, then a final descent
/// from the merged initialization. With one run this is [`align_centers`].
pub fn multi_init_align(n_images: usize, edges: &[DirEdge], cfg: &PipelineConfig, seed: u64) -> Result<MultiInit> {
    let m = cfg.translation_inits.max(1);
    let runs = (0..m)
        .into_par_iter()
        .map(|k| align_centers(n_images, edges, cfg, seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let run_losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    if m == 1 {
        let run = runs.into_iter().next().expect("one run");
        return Ok(MultiInit {
            loss: run.loss,
            centers: run.centers,
            run_losses,
            chosen_run: vec![0; n_images],
        });
    }
    let mut active = vec![false; n_images];
    for e in edges {
        active[e.i] = true;
        active[e.j] = true;
    }
    let canon: Vec<Vec<Vector3<f64>>> = runs.iter().map(|r| canonicalize(&r.centers, &active)).collect();
    let residuals: Vec<Vec<f64>> = canon.iter().map(|c| per_image_residual(c, edges)).collect();
    let chosen_run: Vec<usize> = (0..n_images)
        .map(|k| {
            (0..m)
                .min_by(|&a, &b| residuals[a][k].total_cmp(&residuals[b][k]))
                .expect("m >= 1")
        })
        .collect();
    let merged: Vec<Vector3<f64>> = (0..n_images).map(|k| canon[chosen_run[k]][k]).collect();
    let fin = descend(merged, edges, cfg)?;
    Ok(MultiInit {
        centers: fin.centers,
        loss: fin.loss,
        run_losses,
        chosen_run,
    })
}
