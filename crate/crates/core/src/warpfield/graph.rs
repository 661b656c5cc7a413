use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DualQuaternion, WarpError, WarpField};

/// Cross-class connection weight of the semantic-aware graph.
pub const CROSS_CLASS_WEIGHT: f64 = 0.1;
/// Edge weight of the uniform (semantics-blind) graph.
pub const UNIFORM_EDGE_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub position: Vector3<f64>,
    /// Influence radius of the node in the blending kernel.
    pub radius: f64,
    pub label: u16,
}

/// How edge regularization weights are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// Weights from node semantic labels.
    #[default]
    Sad,
    /// Every edge gets [`UNIFORM_EDGE_WEIGHT`].
    EdUniform,
}

impl GraphMode {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sad" => Some(Self::Sad),
            "ed-uniform" => Some(Self::EdUniform),
            _ => None,
        }
    }
}

/// Average rigidness per semantic class; entry `k - 1` belongs to class `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RigidnessTable(pub Vec<f64>);

impl RigidnessTable {
    pub fn get(&self, class: u16) -> Option<f64> {
        class
            .checked_sub(1)
            .and_then(|i| self.0.get(i as usize))
            .copied()
    }

    pub fn num_classes(&self) -> u16 {
        self.0.len() as u16
    }
}

/// `0.1` across classes, the class rigidness within a class.
pub fn connection_weight(
    label_i: u16,
    label_j: u16,
    table: &RigidnessTable,
) -> Result<f64, WarpError> {
    let lookup = |l| table.get(l).ok_or(WarpError::MissingRigidness(l));
    let (ri, _) = (lookup(label_i)?, lookup(label_j)?);
    Ok(if label_i == label_j {
        ri
    } else {
        CROSS_CLASS_WEIGHT
    })
}

/// k nearest nodes of every surfel, stored flat with a common stride.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfelBindings {
    k: usize,
    nodes: Vec<usize>,
}

impl SurfelBindings {
    pub fn len(&self) -> usize {
        self.nodes.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes bound to surfel `i`, nearest first.
    #[inline]
    pub fn get(&self, i: usize) -> &[usize] {
        &self.nodes[i * self.k..(i + 1) * self.k]
    }

    pub fn per_surfel(&self) -> usize {
        self.k
    }
}

#[derive(Clone, Debug, Default)]
pub struct DeformationGraph {
    pub nodes: Vec<GraphNode>,
    /// `neighbors[j]`: nearest other nodes of node `j`.
    pub neighbors: Vec<Vec<usize>>,
    /// Regularization weight of each entry of `neighbors`.
    pub edge_weights: Vec<Vec<f64>>,
    pub bindings: SurfelBindings,
}

/// Indices of the `k` smallest keys, ties to the lower index.
fn k_smallest(dist: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, d) in dist {
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

impl DeformationGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distance from `p` to the closest node.
    pub fn distance_to_nearest(&self, p: &Vector3<f64>) -> f64 {
        self.nodes
            .iter()
            .map(|n| (n.position - p).norm_squared())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Recomputes each node's `k` nearest other nodes (no self loops, ties
    /// to the lower index).
    pub fn rebuild_neighbors(&mut self, k: usize) {
        let k = k.min(self.nodes.len().saturating_sub(1));
        let nodes = &self.nodes;
        self.neighbors = (0..nodes.len())
            .into_par_iter()
            .map(|j| {
                if k == 0 {
                    return Vec::new();
                }
                let pj = nodes[j].position;
                k_smallest(
                    nodes
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != j)
                        .map(|(i, n)| (i, (n.position - pj).norm_squared())),
                    k,
                )
            })
            .collect();
    }

    /// Regularization weight of every neighbor entry.
    pub fn compute_edge_weights(
        &self,
        mode: GraphMode,
        table: &RigidnessTable,
    ) -> Result<Vec<Vec<f64>>, WarpError> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(j, nbrs)| {
                nbrs.iter()
                    .map(|&i| match mode {
                        GraphMode::Sad => {
                            connection_weight(self.nodes[i].label, self.nodes[j].label, table)
                        }
                        GraphMode::EdUniform => Ok(UNIFORM_EDGE_WEIGHT),
                    })
                    .collect()
            })
            .collect()
    }

    /// Neighbor lists followed by edge weights.
    pub fn refresh_edges(
        &mut self,
        k: usize,
        mode: GraphMode,
        table: &RigidnessTable,
    ) -> Result<(), WarpError> {
        self.rebuild_neighbors(k);
        self.edge_weights = self.compute_edge_weights(mode, table)?;
        Ok(())
    }

    /// `(j, i, weight)` for every `i` in the neighborhood of `j`.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors
            .iter()
            .zip(&self.edge_weights)
            .enumerate()
            .flat_map(|(j, (nbrs, ws))| nbrs.iter().zip(ws).map(move |(&i, &w)| (j, i, w)))
    }

    pub fn dump(&self, warp: Option<&WarpField>) -> GraphDump {
        GraphDump {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeDump {
                    position: n.position.into(),
                    radius: n.radius,
                    label: n.label,
                    transform: warp
                        .and_then(|w| w.transforms.get(i))
                        .map(DualQuaternion::to_array),
                })
                .collect(),
            edges: self
                .directed_edges()
                .map(|(from, to, weight)| EdgeDump { from, to, weight })
                .collect(),
        }
    }
}

/// Binds every position to its `k` nearest nodes (fewer when the graph is
/// smaller), ties to the lower node index.
pub fn bind_surfels(
    positions: &[Vector3<f64>],
    graph: &DeformationGraph,
    k: usize,
) -> Result<SurfelBindings, WarpError> {
    if graph.is_empty() {
        return Err(WarpError::EmptyGraph);
    }
    let k = k.clamp(1, graph.len());
    let nodes: Vec<Vector3<f64>> = graph.nodes.iter().map(|n| n.position).collect();
    let per: Vec<Vec<usize>> = positions
        .par_iter()
        .map(|p| {
            k_smallest(
                nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (i, (n - p).norm_squared())),
                k,
            )
        })
        .collect();
    Ok(SurfelBindings {
        k,
        nodes: per.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NodeDump {
    pub position: [f64; 3],
    pub radius: f64,
    pub label: u16,
    pub transform: Option<[f64; 8]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EdgeDump {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// JSON debug view of a graph.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<NodeDump>,
    pub edges: Vec<EdgeDump>,
}
