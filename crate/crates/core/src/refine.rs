//! Argmax classification and hierarchical PCA bisection of partitions.
//!
//! Every trained partition `phi_i` owns a complete binary tree of depth
//! `N_ref`. Each internal node holds a hyperplane through the center of mass
//! of the points it received, normal to their principal direction. A refined
//! partition is `phi_i` times the half-space indicators along one
//! root-to-leaf path, so siblings always sum back to their parent.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::numerics::sym_eig;
use crate::pou_net::PouNetwork;
use crate::Error;

/// Relative gap below which the two leading eigenvalues count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpaceSplit {
    pub center: Vec<f64>,
    pub normal: Vec<f64>,
}

impl HalfSpaceSplit {
    /// True for the `(+)` side `(x - center) . normal > 0`; the boundary
    /// belongs to the `(-)` side.
    pub fn is_plus(&self, x: ArrayView1<f64>) -> bool {
        let s: f64 = x
            .iter()
            .zip(&self.center)
            .zip(&self.normal)
            .map(|((xi, c), n)| (xi - c) * n)
            .sum();
        s > 0.0
    }
}

/// Binary tree in heap layout: node `k` has children `2k + 1` (minus side)
/// and `2k + 2` (plus side). `None` marks a node that was not split; all of
/// its points continue on the plus side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementTree {
    pub nodes: Vec<Option<HalfSpaceSplit>>,
}

impl RefinementTree {
    /// Leaf index reached after `depth` levels; the path is read most
    /// significant bit first with 1 for the plus side.
    fn leaf_at_depth(&self, x: ArrayView1<f64>, depth: usize) -> usize {
        let mut node = 0;
        let mut leaf = 0;
        for _ in 0..depth {
            let plus = match &self.nodes[node] {
                Some(split) => split.is_plus(x),
                None => true,
            };
            leaf = (leaf << 1) | plus as usize;
            node = 2 * node + 1 + plus as usize;
        }
        leaf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementForest {
    pub depth: usize,
    pub trees: Vec<RefinementTree>,
}

impl RefinementForest {
    /// Forest of depth zero: refined partitions equal the trained ones.
    pub fn identity(partitions: usize) -> Self {
        Self {
            depth: 0,
            trees: vec![RefinementTree { nodes: Vec::new() }; partitions],
        }
    }

    pub fn leaves_per_tree(&self) -> usize {
        1 << self.depth
    }

    /// `M_tot = M * 2^N_ref`.
    pub fn total_partitions(&self) -> usize {
        self.trees.len() * self.leaves_per_tree()
    }

    /// The first `depth` levels of every tree.
    pub fn truncated(&self, depth: usize) -> Self {
        let depth = depth.min(self.depth);
        Self {
            depth,
            trees: self
                .trees
                .iter()
                .map(|t| RefinementTree {
                    nodes: t.nodes[..(1usize << depth) - 1].to_vec(),
                })
                .collect(),
        }
    }
}

/// Bookkeeping from forest construction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineReport {
    /// Nodes left unsplit because fewer than two points reached them.
    pub unsplit_nodes: usize,
    /// Splits whose leading eigenvalue was tied, so the normal is not unique.
    pub ambiguous_splits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaSplit {
    pub split: HalfSpaceSplit,
    pub ambiguous: bool,
}

/// Argmax per row; ties go to the lowest index.
pub fn classify(phi: ArrayView2<f64>) -> Vec<usize> {
    phi.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Center of mass and leading principal direction of a point set.
///
/// Returns `None` for fewer than two points. The normal's first nonzero
/// component is made positive.
pub fn pca_split(points: ArrayView2<f64>) -> Result<Option<PcaSplit>, Error> {
    let (n, d) = points.dim();
    if n < 2 {
        return Ok(None);
    }
    let center: Array1<f64> = points.mean_axis(Axis(0)).expect("non-empty");
    let centered = &points - &center;
    let cov = centered.t().dot(&centered);
    let eig = sym_eig(cov.view())?;
    let mut normal = eig.top_eigenvector().to_owned();
    let norm = normal.dot(&normal).sqrt();
    normal /= norm;
    if let Some(first) = normal.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            normal.mapv_inplace(|v| -v);
        }
    }
    let ambiguous = d > 1 && {
        let top = eig.eigenvalues[0];
        top - eig.eigenvalues[1] <= TIE_TOLERANCE * top.abs()
    };
    Ok(Some(PcaSplit {
        split: HalfSpaceSplit {
            center: center.to_vec(),
            normal: normal.to_vec(),
        },
        ambiguous,
    }))
}

/// Refined partitions at full forest depth from already evaluated `phi`.
pub fn refine_partitions(
    phi: ArrayView2<f64>,
    forest: &RefinementForest,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>, Error> {
    refine_at_depth(phi, forest, x, forest.depth)
}

fn refine_at_depth(
    phi: ArrayView2<f64>,
    forest: &RefinementForest,
    x: ArrayView2<f64>,
    depth: usize,
) -> Result<Array2<f64>, Error> {
    if phi.ncols() != forest.trees.len() || phi.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "phi {:?} does not match {} points and a forest over {} partitions",
            phi.dim(),
            x.nrows(),
            forest.trees.len()
        )));
    }
    let leaves = 1usize << depth;
    let mut out = Array2::<f64>::zeros((x.nrows(), phi.ncols() * leaves));
    for (j, point) in x.axis_iter(Axis(0)).enumerate() {
        for (i, tree) in forest.trees.iter().enumerate() {
            let leaf = tree.leaf_at_depth(point, depth);
            out[[j, i * leaves + leaf]] = phi[[j, i]];
        }
    }
    Ok(out)
}

/// Refined partition functions `phi_i * prod(indicators)`, `N x M_tot`.
pub fn refined_phi(net: &PouNetwork, forest: &RefinementForest, x: ArrayView2<f64>) -> Result<Array2<f64>, Error> {
    let phi = net.partitions(x)?;
    refine_partitions(phi.view(), forest, x)
}

/// Level-by-level bisection: points are classified by argmax of the current
/// refined partitions and every current partition is split by [`pca_split`].
pub fn build_forest(
    net: &PouNetwork,
    x: ArrayView2<f64>,
    refinements: usize,
) -> Result<(RefinementForest, RefineReport), Error> {
    let phi = net.partitions(x)?;
    build_forest_from_phi(phi.view(), x, refinements)
}

pub fn build_forest_from_phi(
    phi: ArrayView2<f64>,
    x: ArrayView2<f64>,
    refinements: usize,
) -> Result<(RefinementForest, RefineReport), Error> {
    let m = phi.ncols();
    let node_count = (1usize << refinements) - 1;
    let mut forest = RefinementForest {
        depth: refinements,
        trees: vec![
            RefinementTree {
                nodes: vec![None; node_count]
            };
            m
        ],
    };
    let mut report = RefineReport::default();
    for level in 0..refinements {
        let current = refine_at_depth(phi, &forest, x, level)?;
        let labels = classify(current.view());
        let leaves = 1usize << level;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); m * leaves];
        for (j, &label) in labels.iter().enumerate() {
            members[label].push(j);
        }
        for (label, rows) in members.iter().enumerate() {
            let (tree, leaf) = (label / leaves, label % leaves);
            let node = leaves - 1 + leaf;
            let points = x.select(Axis(0), rows);
            match pca_split(points.view())? {
                Some(PcaSplit { split, ambiguous }) => {
                    report.ambiguous_splits += ambiguous as usize;
                    forest.trees[tree].nodes[node] = Some(split);
                }
                None => report.unsplit_nodes += 1,
            }
        }
    }
    Ok((forest, report))
}
