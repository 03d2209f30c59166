//! Superpoint oversegmentation: k-nearest-neighbor graph weighted by normal
//! disagreement, clustered with Felzenszwalb-Huttenlocher graph segmentation.

use std::cmp::Ordering;
use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{Point3, SuperpointPartition};

/// `|n.z|` below this is treated as zero when orienting normals.
const ORIENTATION_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegParams {
    pub knn: usize,
    pub threshold_k: f64,
    pub min_size: usize,
}

impl Default for SegParams {
    fn default() -> Self {
        Self { knn: 10, threshold_k: 0.05, min_size: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// Undirected weighted graph over point indices; each pair appears once with `a < b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGraph {
    pub node_count: usize,
    pub edges: Vec<Edge>,
}

/// Indices of the `k` nearest other points of every point, nearest first.
pub fn knn_indices(points: &[Point3], k: usize) -> Vec<Vec<u32>> {
    let Some(want) = NonZeroUsize::new((k + 1).min(points.len())) else {
        return vec![Vec::new(); points.len()];
    };
    let coords: Vec<[f64; 3]> = points.iter().map(|p| p.to_array()).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords).expect("point count fits in u32");
    coords
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut found: Vec<(f64, u32)> = tree
                .query(q)
                .nearest_n::<SquaredEuclidean<f64>>(want)
                .execute()
                .into_iter()
                .filter(|r| r.item as usize != i)
                .map(|r| (r.distance, r.item))
                .collect();
            found.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            found.truncate(k);
            found.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normals: Vec<Point3>,
    /// Points whose neighborhood had rank < 2; their normal is `+z`.
    pub degenerate: Vec<usize>,
}

/// PCA normals: the least-variance direction of each point's neighborhood
/// (the point plus its `knn` nearest neighbors), oriented towards `+z`, with
/// ties broken towards `+x` then `+y`.
pub fn estimate_normals(points: &[Point3], knn: usize) -> NormalEstimate {
    let neighbors = knn_indices(points, knn);
    let results: Vec<Option<Point3>> = neighbors
        .par_iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let members: Vec<Vector3<f64>> =
                std::iter::once(i as u32).chain(nbrs.iter().copied()).map(|j| points[j as usize].to_vector()).collect();
            plane_normal(&members)
        })
        .collect();
    let mut degenerate = Vec::new();
    let normals = results
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            n.unwrap_or_else(|| {
                degenerate.push(i);
                Point3::new(0.0, 0.0, 1.0)
            })
        })
        .collect();
    NormalEstimate { normals, degenerate }
}

fn plane_normal(members: &[Vector3<f64>]) -> Option<Point3> {
    if members.len() < 3 {
        return None;
    }
    let n = members.len() as f64;
    let mean = members.iter().sum::<Vector3<f64>>() / n;
    let cov = members.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(max > 0.0) || mid <= max * 1e-12 {
        return None;
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).normalize();
    let flip = if normal.z.abs() > ORIENTATION_EPS {
        normal.z < 0.0
    } else if normal.x.abs() > ORIENTATION_EPS {
        normal.x < 0.0
    } else {
        normal.y < 0.0
    };
    if flip {
        normal = -normal;
    }
    Some(Point3::from_vector(&normal))
}

/// Edge weight between two unit normals: 0 for parallel, 1 for perpendicular.
pub fn normal_weight(a: &Point3, b: &Point3) -> f64 {
    (1.0 - a.to_vector().dot(&b.to_vector()).abs()).max(0.0)
}

/// Connects each point to its `knn` nearest neighbors, weighting edges by
/// [`normal_weight`].
pub fn build_normal_graph(points: &[Point3], normals: &[Point3], knn: usize) -> PointGraph {
    assert_eq!(points.len(), normals.len(), "one normal per point");
    let neighbors = knn_indices(points, knn);
    let mut pairs: Vec<(u32, u32)> = neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| {
            let i = i as u32;
            nbrs.iter().map(move |&j| (i.min(j), i.max(j)))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let edges = pairs
        .into_iter()
        .map(|(a, b)| Edge { a, b, weight: normal_weight(&normals[a as usize], &normals[b as usize]) })
        .collect();
    PointGraph { node_count: points.len(), edges }
}

/// Union-find over point indices with per-component size and merge threshold.
struct Components {
    parent: Vec<u32>,
    size: Vec<u32>,
    threshold: Vec<f64>,
}

impl Components {
    fn new(n: usize, k: f64) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n], threshold: vec![k; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the larger component (lower id on ties) stays root.
    fn join(&mut self, a: u32, b: u32) -> u32 {
        let (root, child) = match self.size[a as usize].cmp(&self.size[b as usize]) {
            Ordering::Greater => (a, b),
            Ordering::Less => (b, a),
            Ordering::Equal => (a.min(b), a.max(b)),
        };
        self.parent[child as usize] = root;
        self.size[root as usize] += self.size[child as usize];
        root
    }

    fn size(&self, root: u32) -> usize {
        self.size[root as usize] as usize
    }
}

/// Felzenszwalb-Huttenlocher segmentation of `graph`.
///
/// Edges are visited by ascending `(weight, a, b)`. Two components merge when
/// the edge weight does not exceed `Int(C) + k/|C|` for both, where `Int` is
/// the largest edge weight merged into the component so far. A second pass
/// over the same order merges any component smaller than `min_size` across
/// the first edge that touches it.
pub fn fh_segment(graph: &PointGraph, params: &SegParams) -> SuperpointPartition {
    let mut order: Vec<&Edge> = graph.edges.iter().collect();
    order.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));

    let k = params.threshold_k;
    let mut comps = Components::new(graph.node_count, k);
    for e in &order {
        let (ra, rb) = (comps.find(e.a), comps.find(e.b));
        if ra != rb && e.weight <= comps.threshold[ra as usize] && e.weight <= comps.threshold[rb as usize] {
            let root = comps.join(ra, rb);
            comps.threshold[root as usize] = e.weight + k / comps.size(root) as f64;
        }
    }
    for e in &order {
        let (ra, rb) = (comps.find(e.a), comps.find(e.b));
        if ra != rb && (comps.size(ra) < params.min_size || comps.size(rb) < params.min_size) {
            comps.join(ra, rb);
        }
    }
    let roots: Vec<usize> = (0..graph.node_count as u32).map(|i| comps.find(i) as usize).collect();
    SuperpointPartition::from_raw_ids(&roots)
}

/// Superpoints from stored normals, or estimated ones when none are given.
pub fn compute_superpoints(points: &[Point3], normals: Option<&[Point3]>, params: &SegParams) -> SuperpointPartition {
    let estimated;
    let normals = match normals {
        Some(n) => n,
        None => {
            estimated = estimate_normals(points, params.knn.max(3)).normals;
            &estimated
        }
    };
    fh_segment(&build_normal_graph(points, normals, params.knn), params)
}
