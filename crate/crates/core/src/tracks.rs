//! Keypoint tracks and track completion.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::model::{GeometryClass, ImageId, ImagePairMatches, KeypointIdx, MatchSet, TrackNode, TrackSet};

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn component_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }
}

/// Connected components of the keypoint graph.
///
/// Components holding two keypoints of one image are dropped. Tracks are
/// ordered by their smallest node, members sorted.
pub fn build_tracks(ms: &MatchSet) -> TrackSet {
    let offsets: Vec<usize> = ms
        .images
        .iter()
        .scan(0, |acc, im| {
            let o = *acc;
            *acc += im.keypoints.len();
            Some(o)
        })
        .collect();
    let total = ms.images.iter().map(|im| im.keypoints.len()).sum();
    let mut uf = UnionFind::new(total);
    let mut touched = vec![false; total];
    for p in &ms.pairs {
        for &(a, b) in &p.correspondences {
            let (na, nb) = (offsets[p.i] + a as usize, offsets[p.j] + b as usize);
            touched[na] = true;
            touched[nb] = true;
            uf.union(na, nb);
        }
    }
    let mut groups: HashMap<usize, Vec<TrackNode>> = HashMap::new();
    for (image, &off) in offsets.iter().enumerate() {
        for k in 0..ms.images[image].keypoints.len() {
            if touched[off + k] {
                groups
                    .entry(uf.find(off + k))
                    .or_default()
                    .push((image, k as KeypointIdx));
            }
        }
    }
    let mut tracks: Vec<Vec<TrackNode>> = groups
        .into_values()
        .filter(|t| {
            let mut seen = HashSet::with_capacity(t.len());
            t.len() >= 2 && t.iter().all(|(im, _)| seen.insert(*im))
        })
        .collect();
    for t in &mut tracks {
        t.sort_unstable();
    }
    tracks.sort_unstable_by_key(|t| t[0]);
    let index = tracks
        .iter()
        .enumerate()
        .flat_map(|(k, t)| t.iter().map(move |&n| (n, k)))
        .collect();
    TrackSet { tracks, index }
}

/// Adds every cross-image keypoint pair implied by a track.
///
/// Correspondences already present are kept once; new ones are appended
/// after the ingested ones. Pairs without a record get one, flagged
/// `synthetic_from_tracks` and classed as fundamental. Tracks longer than
/// `cap` are left as they are.
pub fn complete_matches(tracks: &TrackSet, ms: &MatchSet, cap: usize) -> MatchSet {
    let implied: Vec<((ImageId, ImageId), (KeypointIdx, KeypointIdx))> = tracks
        .tracks
        .par_iter()
        .filter(|t| t.len() <= cap)
        .flat_map_iter(|t| {
            (0..t.len()).flat_map(move |a| {
                (a + 1..t.len()).map(move |b| {
                    let ((ia, ka), (ib, kb)) = (t[a], t[b]);
                    if ia < ib {
                        ((ia, ib), (ka, kb))
                    } else {
                        ((ib, ia), (kb, ka))
                    }
                })
            })
        })
        .collect();

    let mut out = ms.clone();
    let mut record: HashMap<(ImageId, ImageId), usize> =
        out.pairs.iter().enumerate().map(|(k, p)| ((p.i, p.j), k)).collect();
    let mut existing: Vec<HashSet<(KeypointIdx, KeypointIdx)>> = out
        .pairs
        .iter()
        .map(|p| p.correspondences.iter().copied().collect())
        .collect();
    for ((i, j), c) in implied {
        let k = *record.entry((i, j)).or_insert_with(|| {
            let mut p = ImagePairMatches::new(i, j, GeometryClass::Fundamental, Vec::new());
            p.synthetic_from_tracks = true;
            out.pairs.push(p);
            existing.push(HashSet::new());
            out.pairs.len() - 1
        });
        if existing[k].insert(c) {
            out.pairs[k].correspondences.push(c);
        }
    }
    out.pairs.sort_by_key(|p| (p.i, p.j));
    out
}
