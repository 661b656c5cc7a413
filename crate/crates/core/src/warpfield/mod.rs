//! Deformation graph, per-node dual-quaternion transforms and surfel blending.

mod dual_quat;
mod graph;

pub use dual_quat::DualQuaternion;
pub use graph::{
    bind_surfels, connection_weight, DeformationGraph, EdgeDump, GraphDump, GraphMode, GraphNode,
    NodeDump, RigidnessTable, SurfelBindings, CROSS_CLASS_WEIGHT, UNIFORM_EDGE_WEIGHT,
};

use nalgebra::Vector3;

#[derive(Debug, thiserror::Error)]
pub enum WarpError {
    #[error("deformation graph has no nodes")]
    EmptyGraph,
    #[error("surfel binding is empty")]
    EmptyBinding,
    #[error("all blend weights vanished at ({x:.4}, {y:.4}, {z:.4})")]
    DegenerateBinding { x: f64, y: f64, z: f64 },
    #[error("no rigidness configured for class {0}")]
    MissingRigidness(u16),
}

/// Per-node transforms, indexed like [`DeformationGraph::nodes`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarpField {
    pub transforms: Vec<DualQuaternion>,
}

impl WarpField {
    pub fn identity(nodes: usize) -> Self {
        Self {
            transforms: vec![DualQuaternion::identity(); nodes],
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Pads with identity transforms for newly appended nodes.
    pub fn grow_to(&mut self, nodes: usize) {
        if self.transforms.len() < nodes {
            self.transforms.resize(nodes, DualQuaternion::identity());
        }
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.transforms.iter().all(|q| q.is_normalized(tol))
    }
}

/// Gaussian blend weight `exp(-|v - p|^2 / (2 radius^2))`.
#[inline]
pub fn blend_weight(v: &Vector3<f64>, node: &GraphNode) -> f64 {
    let d2 = (v - node.position).norm_squared();
    (-d2 / (2.0 * node.radius * node.radius)).exp()
}

/// Weighted sum of the bound transforms before normalization, plus the
/// per-node factors `w_k * s_k` (blend weight times sign flip).
pub fn blend_unnormalized(
    v: &Vector3<f64>,
    bound: &[usize],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<(DualQuaternion, Vec<f64>), WarpError> {
    let first = bound.first().ok_or(WarpError::EmptyBinding)?;
    let reference = warp.transforms[*first].real;
    let mut sum = DualQuaternion::identity().scale(0.0);
    let mut factors = Vec::with_capacity(bound.len());
    let mut total = 0.0;
    for &k in bound {
        let q = &warp.transforms[k];
        let sign = if q.real.dot(&reference) < 0.0 {
            -1.0
        } else {
            1.0
        };
        let w = blend_weight(v, &graph.nodes[k]);
        total += w;
        factors.push(w * sign);
        sum = sum.add(&q.scale(w * sign));
    }
    if total <= 0.0 {
        return Err(WarpError::DegenerateBinding {
            x: v.x,
            y: v.y,
            z: v.z,
        });
    }
    Ok((sum, factors))
}

/// Normalized blend of the transforms of the nodes bound to `v`.
pub fn blend_transform(
    v: &Vector3<f64>,
    bound: &[usize],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<DualQuaternion, WarpError> {
    let (sum, _) = blend_unnormalized(v, bound, graph, warp)?;
    sum.normalize().ok_or(WarpError::DegenerateBinding {
        x: v.x,
        y: v.y,
        z: v.z,
    })
}

/// Vertex through the full transform, normal through the rotation only.
pub fn warp_surfel(
    vertex: &Vector3<f64>,
    normal: &Vector3<f64>,
    blended: &DualQuaternion,
) -> (Vector3<f64>, Vector3<f64>) {
    let rot = blended.rotation();
    (
        rot * vertex + blended.translation(),
        (rot * normal).normalize(),
    )
}
