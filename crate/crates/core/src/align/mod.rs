//! Flow-guided registration, energy terms and the Gauss-Newton solve over
//! per-node transforms.

mod energy;
mod solver;

pub use energy::{
    apply_increment, energy, energy_2d, energy_areg, energy_picp, linearize, node_increment,
    residuals, warped_point_jacobian, EnergyBreakdown, Problem, Row,
};
pub use solver::{solve, NormalEquations, SolveError, SolverOptions, SolverReport, Termination};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fusion::SurfelGeometry;
use crate::measurement::{FlowMap, MeasurementFrame};
use crate::render::RenderMaps;
use crate::warpfield::{blend_transform, warp_surfel, DeformationGraph, WarpField};

/// Distance and normal-angle thresholds for accepting a pairing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gating {
    pub max_distance: f64,
    pub max_normal_angle_deg: f64,
}

impl Default for Gating {
    fn default() -> Self {
        Self {
            max_distance: 0.05,
            max_normal_angle_deg: 30.0,
        }
    }
}

impl Gating {
    pub fn accepts(
        &self,
        va: &Vector3<f64>,
        na: &Vector3<f64>,
        vb: &Vector3<f64>,
        nb: &Vector3<f64>,
    ) -> bool {
        (va - vb).norm() <= self.max_distance
            && na.dot(nb) >= self.max_normal_angle_deg.to_radians().cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub w_picp: f64,
    pub w_2d: f64,
    pub w_areg: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            w_picp: 1.0,
            w_2d: 1.0,
            w_areg: 4.0,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.w_picp, self.w_2d, self.w_areg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(format!(
                "energy weights must be finite and non-negative: {all:?}"
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err("energy weights are all zero".into());
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            w_picp: self.w_picp * s,
            w_2d: self.w_2d * s,
            w_areg: self.w_areg * s,
        }
    }
}

/// A measurement pixel paired with a geometry surfel.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub pixel: (usize, usize),
    pub surfel: usize,
    /// Surfel vertex before warping.
    pub source: Vector3<f64>,
    /// Nodes the surfel is bound to.
    pub bound: Vec<usize>,
    pub target: Vector3<f64>,
    pub target_normal: Vector3<f64>,
    /// Point whose X/Y the warped surfel should reach.
    pub target_2d: Vector3<f64>,
}

/// Where the flow moves the surfel: the viewing ray through its exact
/// previous projection plus the flow, cut with the measured tangent plane.
/// Falls back to the measured vertex at grazing angles.
fn flow_target(
    meas: &MeasurementFrame,
    source: &Vector3<f64>,
    flow: &nalgebra::Vector2<f64>,
    v_m: &Vector3<f64>,
    n_m: &Vector3<f64>,
    max_offset: f64,
) -> Vector3<f64> {
    let k = &meas.intrinsics;
    let Some(p) = k.project(source) else {
        return *v_m;
    };
    let q = p + flow;
    let ray = k.ray(q.x, q.y);
    let denom = n_m.dot(&ray);
    if denom.abs() < 0.2 * ray.norm() {
        return *v_m;
    }
    let hit = ray * (n_m.dot(v_m) / denom);
    if (hit - v_m).norm() > max_offset {
        *v_m
    } else {
        hit
    }
}

/// Pairs every valid measurement pixel with the surfel rendered at its
/// flow-shifted pixel, gated on the position predicted by `warp`.
pub fn build_correspondences(
    meas: &MeasurementFrame,
    flow: &FlowMap,
    render_a: &RenderMaps,
    geometry: &SurfelGeometry,
    graph: &DeformationGraph,
    warp: &WarpField,
    gating: &Gating,
) -> Vec<Correspondence> {
    let rows: Vec<Vec<Correspondence>> = (0..meas.height())
        .into_par_iter()
        .map(|y| {
            (0..meas.width())
                .filter_map(|x| {
                    let m = meas.surfel_at(x, y)?;
                    let f = flow.at(x, y)?;
                    let lx = (x as f64 - f.x).round() as i64;
                    let ly = (y as f64 - f.y).round() as i64;
                    let i = render_a.index_at(lx, ly)? as usize;
                    let s = &geometry.surfels[i];
                    let bound = graph.bindings.get(i);
                    let q = blend_transform(&s.vertex, bound, graph, warp).ok()?;
                    let (pv, pn) = warp_surfel(&s.vertex, &s.normal, &q);
                    if !gating.accepts(&pv, &pn, &m.vertex, &m.normal) {
                        return None;
                    }
                    Some(Correspondence {
                        pixel: (x, y),
                        surfel: i,
                        source: s.vertex,
                        bound: bound.to_vec(),
                        target: m.vertex,
                        target_normal: m.normal,
                        target_2d: flow_target(
                            meas,
                            &s.vertex,
                            &f,
                            &m.vertex,
                            &m.normal,
                            gating.max_distance,
                        ),
                    })
                })
                .collect()
        })
        .collect();
    rows.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::append;
    use crate::measurement::{CameraIntrinsics, IngestConfig, RawFrame};
    use crate::render::render;
    use crate::warpfield::{bind_surfels, GraphNode};
    use crate::Grid;
    use nalgebra::Vector2;

    fn setup() -> (MeasurementFrame, SurfelGeometry, DeformationGraph) {
        let k = CameraIntrinsics::new(200.0, 200.0, 10.0, 8.0, 20, 16).unwrap();
        let raw = RawFrame {
            index: 1,
            depth: Grid::new(20, 16, 1.0),
            color: Grid::new(20, 16, [50, 50, 50]),
            labels: Grid::new(20, 16, 1),
        };
        let cfg = IngestConfig {
            denoise_sigma: None,
            num_labels: 2,
            ..Default::default()
        };
        let meas = MeasurementFrame::build(&raw, &k, &cfg).unwrap();
        let mut surfels = Vec::new();
        for y in 0..16 {
            for x in 0..20 {
                surfels.push(append(&meas.surfel_at(x, y).unwrap(), &k, 2, 0));
            }
        }
        let geometry = SurfelGeometry::from(surfels);
        let mut graph = DeformationGraph {
            nodes: vec![GraphNode {
                position: Vector3::new(0.0, 0.0, 1.0),
                radius: 0.5,
                label: 1,
            }],
            ..Default::default()
        };
        graph.bindings = bind_surfels(&geometry.positions(), &graph, 4).unwrap();
        (meas, geometry, graph)
    }

    #[test]
    fn zero_flow_pairs_pixels_with_themselves() {
        let (meas, geometry, graph) = setup();
        let r = render(&geometry, &meas.intrinsics, 1);
        let flow = FlowMap::zeros(20, 16);
        let c = build_correspondences(
            &meas,
            &flow,
            &r,
            &geometry,
            &graph,
            &WarpField::identity(1),
            &Gating::default(),
        );
        assert_eq!(c.len(), 20 * 16);
        for c in &c {
            assert_eq!(c.surfel, c.pixel.1 * 20 + c.pixel.0);
            assert!((c.target_2d - c.target).norm() < 1e-12);
        }
    }

    #[test]
    fn uniform_flow_matches_shifted_surfels_and_drops_border() {
        let (meas, geometry, graph) = setup();
        let r = render(&geometry, &meas.intrinsics, 1);
        let flow = FlowMap {
            flow: Grid::new(20, 16, Some(Vector2::new(3.0, 0.0))),
        };
        let c = build_correspondences(
            &meas,
            &flow,
            &r,
            &geometry,
            &graph,
            &WarpField::identity(1),
            &Gating::default(),
        );
        assert_eq!(c.len(), 17 * 16);
        for c in &c {
            let (x, y) = c.pixel;
            assert!(x >= 3);
            assert_eq!(c.surfel, y * 20 + x - 3);
            // The flow target lies three pixels further along the plane.
            assert!(
                (c.target_2d - (c.source + Vector3::new(3.0 / 200.0, 0.0, 0.0))).norm() < 1e-12
            );
        }
    }

    #[test]
    fn gating_rejects_far_and_tilted_pairs() {
        let g = Gating::default();
        let n = -Vector3::z();
        let v = Vector3::new(0.0, 0.0, 1.0);
        assert!(g.accepts(&v, &n, &(v + Vector3::new(0.04, 0.0, 0.0)), &n));
        assert!(!g.accepts(&v, &n, &(v + Vector3::new(0.06, 0.0, 0.0)), &n));
        let tilted = Vector3::new(0.0, 40f64.to_radians().sin(), -40f64.to_radians().cos());
        assert!(!g.accepts(&v, &n, &v, &tilted));
    }
}
