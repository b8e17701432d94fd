//! Global rotation alignment.
//!
//! Edges carry `R_j = R_ij R_i`. Weak edges are filtered with a threshold
//! that halves until the graph connects, rotations are initialized column by
//! column from eigenvectors of the stacked linear constraints, then refined
//! on the mean geodesic residual with Adam over 6D parameters.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{ImageId, Rotation3};
use crate::optim::{matrix_to_rot6d, rot6d_backward, rot6d_to_matrix, Adam, AdamParams};
use crate::tracks::UnionFind;

#[derive(Debug, Clone, PartialEq)]
pub struct RelEdge {
    pub i: ImageId,
    pub j: ImageId,
    /// `R_j R_iᵀ`.
    pub rel: Rotation3,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelPoseGraph {
    pub n_images: usize,
    pub edges: Vec<RelEdge>,
    /// Images kept for the rest of the pipeline.
    pub registered: Vec<bool>,
}

impl RelPoseGraph {
    pub fn new(n_images: usize, edges: Vec<RelEdge>) -> Self {
        Self {
            n_images,
            edges,
            registered: vec![true; n_images],
        }
    }

    fn components(&self, edges: &[&RelEdge]) -> UnionFind {
        let mut uf = UnionFind::new(self.n_images);
        for e in edges {
            uf.union(e.i, e.j);
        }
        uf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub graph: RelPoseGraph,
    /// Every threshold tried, the last one is in effect.
    pub thresholds: Vec<f64>,
}

/// Keeps edges with at least `threshold` inliers, halving the threshold
/// from `pair_inlier_threshold_start` while the images that have any edge
/// fall into more than one component, down to `pair_inlier_threshold_min`.
/// Images outside the largest remaining component become unregistered.
pub fn filter_pairs(graph: &RelPoseGraph, cfg: &PipelineConfig) -> Result<FilterOutcome> {
    if graph.edges.is_empty() {
        return Err(Error::SceneDisconnected {
            largest: graph.n_images.min(1),
        });
    }
    let mut has_edge = vec![false; graph.n_images];
    for e in &graph.edges {
        has_edge[e.i] = true;
        has_edge[e.j] = true;
    }
    let mut threshold = cfg.pair_inlier_threshold_start;
    let mut thresholds = Vec::new();
    let (kept, mut uf) = loop {
        thresholds.push(threshold);
        let kept: Vec<&RelEdge> = graph.edges.iter().filter(|e| e.inliers as f64 >= threshold).collect();
        let mut uf = graph.components(&kept);
        let first = (0..graph.n_images).find(|&k| has_edge[k]).expect("some edge");
        let root = uf.find(first);
        let connected = (0..graph.n_images).filter(|&k| has_edge[k]).all(|k| uf.find(k) == root);
        if connected || threshold <= cfg.pair_inlier_threshold_min {
            break (kept, uf);
        }
        threshold = (threshold / 2.0).max(cfg.pair_inlier_threshold_min);
    };
    // Largest component, lowest image id on ties.
    let best = (0..graph.n_images)
        .filter(|&k| graph.registered[k])
        .max_by(|&a, &b| uf.component_size(a).cmp(&uf.component_size(b)).then(b.cmp(&a)))
        .ok_or(Error::SceneDisconnected { largest: 0 })?;
    let root = uf.find(best);
    let largest = uf.component_size(best);
    if largest < 3 {
        return Err(Error::SceneDisconnected { largest });
    }
    let registered: Vec<bool> = (0..graph.n_images)
        .map(|k| graph.registered[k] && uf.find(k) == root)
        .collect();
    let edges = kept
        .into_iter()
        .filter(|e| registered[e.i] && registered[e.j])
        .cloned()
        .collect();
    for (k, r) in registered.iter().enumerate() {
        if !r && graph.registered[k] {
            log::warn!("image {k}: outside the largest component, unregistered");
        }
    }
    Ok(FilterOutcome {
        graph: RelPoseGraph {
            n_images: graph.n_images,
            edges,
            registered,
        },
        thresholds,
    })
}

fn add_block(a: &mut DMatrix<f64>, r: usize, c: usize, m: &Matrix3<f64>) {
    for x in 0..3 {
        for y in 0..3 {
            a[(3 * r + x, 3 * c + y)] += m[(x, y)];
        }
    }
}

fn smallest_eigenvector(a: DMatrix<f64>) -> Result<nalgebra::DVector<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rotation initialization system"));
    }
    let eig = a.symmetric_eigen();
    let k = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .ok_or(Error::Empty("rotation initialization system"))?;
    let mut v = eig.eigenvectors.column(k).into_owned();
    // Deterministic sign: largest-magnitude entry positive.
    let imax = v.iamax();
    if v[imax] < 0.0 {
        v = -v;
    }
    Ok(v)
}

/// Column-wise least-squares initialization.
///
/// Only registered images get a rotation. The result is defined up to a
/// global rotation.
pub fn init_rotations(graph: &RelPoseGraph) -> Result<Vec<Option<Rotation3>>> {
    let ids: Vec<ImageId> = (0..graph.n_images).filter(|&k| graph.registered[k]).collect();
    let mut slot = vec![usize::MAX; graph.n_images];
    for (s, &k) in ids.iter().enumerate() {
        slot[k] = s;
    }
    let n = ids.len();
    if n == 0 || graph.edges.is_empty() {
        return Err(Error::Empty("rotation graph"));
    }
    // Σ ‖x_j − R x_i‖² = Σ x_iᵀx_i + x_jᵀx_j − 2 x_jᵀ R x_i
    let mut a = DMatrix::zeros(3 * n, 3 * n);
    let inv_p = 1.0 / graph.edges.len() as f64;
    for e in &graph.edges {
        let (si, sj) = (slot[e.i], slot[e.j]);
        let r = e.rel.matrix() * inv_p;
        let id = Matrix3::identity() * inv_p;
        add_block(&mut a, si, si, &id);
        add_block(&mut a, sj, sj, &id);
        add_block(&mut a, sj, si, &-r);
        add_block(&mut a, si, sj, &-r.transpose());
    }
    let x = smallest_eigenvector(a.clone())?;
    let mut c1 = Vec::with_capacity(n);
    for s in 0..n {
        let v = Vector3::new(x[3 * s], x[3 * s + 1], x[3 * s + 2]);
        let norm = v.norm();
        if !(norm > 1e-12) {
            return Err(Error::Degenerate(format!("image {}: zero first column", ids[s])));
        }
        c1.push(v / norm);
    }
    let inv_i = 1.0 / n as f64;
    for (s, c) in c1.iter().enumerate() {
        add_block(&mut a, s, s, &(c * c.transpose() * inv_i));
    }
    let y = smallest_eigenvector(a)?;
    let mut out = vec![None; graph.n_images];
    for (s, &k) in ids.iter().enumerate() {
        let v = Vector3::new(y[3 * s], y[3 * s + 1], y[3 * s + 2]);
        let v = v - c1[s] * c1[s].dot(&v);
        let norm = v.norm();
        if !(norm > 1e-12) {
            return Err(Error::Degenerate(format!("image {k}: second column parallel to first")));
        }
        let c2 = v / norm;
        let m = Matrix3::from_columns(&[c1[s], c2, c1[s].cross(&c2)]);
        out[k] = Some(Rotation3::try_new(m).unwrap_or_else(|_| Rotation3::project(&m)));
    }
    Ok(out)
}

const KINK: f64 = 1e-10;

/// `d(R_j, R_ij R_i)` and its gradient with respect to `R_j` and `R_i`.
///
/// The angle is `atan2(s, c)` with `c = (tr M − 1)/2` and `s = ‖vee(M − Mᵀ)‖/2`
/// for `M = R_j (R_ij R_i)ᵀ`, which stays differentiable near π. Below
/// `KINK` the subgradient 0 is used.
pub fn edge_residual(rj: &Matrix3<f64>, rel: &Matrix3<f64>, ri: &Matrix3<f64>) -> (f64, Matrix3<f64>, Matrix3<f64>) {
    let b = rel * ri;
    let m = rj * b.transpose();
    let v = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let s = 0.5 * v.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    let denom = s * s + c * c;
    let mut gm = Matrix3::zeros();
    if s > KINK && denom > 0.0 {
        let dtheta_ds = c / denom;
        let dtheta_dc = -s / denom;
        gm += Matrix3::identity() * (0.5 * dtheta_dc);
        let u = v / v.norm() * (0.5 * dtheta_ds);
        gm[(2, 1)] += u.x;
        gm[(1, 2)] -= u.x;
        gm[(0, 2)] += u.y;
        gm[(2, 0)] -= u.y;
        gm[(1, 0)] += u.z;
        gm[(0, 1)] -= u.z;
    }
    let g_rj = gm * b;
    let g_b = gm.transpose() * rj;
    let g_ri = rel.transpose() * g_b;
    (theta, g_rj, g_ri)
}

/// Mean geodesic residual over the edges.
pub fn rotation_loss(rotations: &[Option<Rotation3>], edges: &[RelEdge]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let sum: f64 = edges
        .iter()
        .map(|e| {
            let (ri, rj) = (
                rotations[e.i].expect("edge endpoint"),
                rotations[e.j].expect("edge endpoint"),
            );
            rj.geodesic(&(e.rel * ri))
        })
        .sum();
    sum / edges.len() as f64
}

/// Loss and gradient with respect to the 6D parameters (`6 * n_images`, rows
/// of unregistered images stay zero).
pub fn loss_and_gradient(params: &[[f64; 6]], edges: &[RelEdge]) -> Result<(f64, Vec<[f64; 6]>)> {
    let mats: Vec<Option<Matrix3<f64>>> = params
        .iter()
        .map(|p| rot6d_to_matrix(p).ok().map(|r| *r.matrix()))
        .collect();
    let inv_p = 1.0 / edges.len().max(1) as f64;
    let terms: Vec<(f64, Matrix3<f64>, Matrix3<f64>)> = edges
        .par_iter()
        .map(|e| {
            let (ri, rj) = (
                mats[e.i].expect("valid parameters"),
                mats[e.j].expect("valid parameters"),
            );
            edge_residual(&rj, e.rel.matrix(), &ri)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad_r = vec![Matrix3::zeros(); params.len()];
    for (e, (d, gj, gi)) in edges.iter().zip(terms) {
        loss += d * inv_p;
        grad_r[e.j] += gj * inv_p;
        grad_r[e.i] += gi * inv_p;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("rotation loss"));
    }
    let grad = params
        .iter()
        .zip(&grad_r)
        .map(|(p, g)| {
            if g.iter().all(|v| *v == 0.0) {
                Ok([0.0; 6])
            } else {
                rot6d_backward(p, g)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub rotations: Vec<Option<Rotation3>>,
    /// Loss before every step, then the final loss.
    pub history: Vec<f64>,
    pub steps: usize,
}

/// Adam on the mean geodesic residual. Returns the iterate with the lowest
/// loss seen.
pub fn refine_rotations(init: &[Option<Rotation3>], graph: &RelPoseGraph, cfg: &PipelineConfig) -> Result<Refinement> {
    let n = init.len();
    let mut params: Vec<[f64; 6]> = init
        .iter()
        .map(|r| r.map_or([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], |r| matrix_to_rot6d(&r)))
        .collect();
    let mut adam = Adam::new(6 * n, AdamParams::from_config(cfg));
    let mut history = Vec::with_capacity(cfg.rotation_steps + 1);
    let mut best = (f64::INFINITY, params.clone());
    let mut steps = 0;
    for step in 0..cfg.rotation_steps {
        let (loss, grad) = loss_and_gradient(&params, &graph.edges)?;
        history.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        if step >= 100 {
            let prev = history[step - 100];
            if (prev - loss).abs() <= cfg.rotation_early_stop * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let mut flat: Vec<f64> = params.iter().flatten().copied().collect();
        let g: Vec<f64> = grad.iter().flatten().copied().collect();
        adam.step(&mut flat, &g, cfg.rotation_lr)?;
        for (k, p) in params.iter_mut().enumerate() {
            p.copy_from_slice(&flat[6 * k..6 * k + 6]);
        }
        steps = step + 1;
    }
    let (loss, _) = loss_and_gradient(&params, &graph.edges)?;
    history.push(loss);
    if loss < best.0 {
        best = (loss, params);
    }
    let rotations = (0..n)
        .map(|k| {
            if init[k].is_some() {
                rot6d_to_matrix(&best.1[k]).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Refinement {
        rotations,
        history,
        steps,
    })
}

/// Rotation `Q` minimizing `Σ ‖est_k − gt_k Q‖_F`, aligning an estimate
/// to ground truth up to the global gauge.
pub fn gauge_align(est: &[Option<Rotation3>], gt: &[Option<Rotation3>]) -> Rotation3 {
    let mut m = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        if let (Some(e), Some(g)) = (e, g) {
            m += g.matrix().transpose() * e.matrix();
        }
    }
    Rotation3::project(&m)
}

/// Per-image geodesic error of `est` against `gt` after gauge alignment.
pub fn aligned_errors(est: &[Option<Rotation3>], gt: &[Option<Rotation3>]) -> Vec<f64> {
    let q = gauge_align(est, gt);
    est.iter()
        .zip(gt)
        .filter_map(|(e, g)| Some(e.as_ref()?.geodesic(&(*g.as_ref()? * q))))
        .collect()
}
