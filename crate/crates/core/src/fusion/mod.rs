//! Geometry update: warping, projective registration, fusion, append,
//! removal and graph growth.

mod surfel;

pub use surfel::{Surfel, SurfelGeometry};

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::align::Gating;
use crate::measurement::{CameraIntrinsics, MeasuredSurfel, MeasurementFrame, SurfacePoint};
use crate::render::{project_pixel, RenderMaps};
use crate::warpfield::{
    blend_transform, warp_surfel, DeformationGraph, GraphMode, GraphNode, RigidnessTable,
    WarpError, WarpField,
};
use crate::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub gating: Gating,
    /// Label evidence added per fused measurement.
    pub delta_m: f64,
    /// Label evidence of measurements carrying the unrecognized class.
    pub delta_m_unrecognized: f64,
    /// When false, fused surfels take the measured label outright.
    pub semantic_fusion: bool,
    pub tau_violate: f64,
    pub tau_stale: usize,
    /// Node support radius.
    pub sigma: f64,
    /// Surfels consulted when voting a new node's label.
    pub label_vote_k: usize,
    pub node_neighbors: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gating: Gating::default(),
            delta_m: 1.0,
            delta_m_unrecognized: 0.0,
            semantic_fusion: true,
            tau_violate: 0.02,
            tau_stale: 10,
            sigma: 0.05,
            label_vote_k: 8,
            node_neighbors: 8,
        }
    }
}

/// Influence radius of a node sampled at support radius `sigma`.
pub fn node_radius(sigma: f64) -> f64 {
    1.5 * sigma
}

/// Applies the blended warp to every surfel. Surfels whose binding is
/// degenerate stay in place and are flagged.
pub fn warp_geometry(
    geometry: &SurfelGeometry,
    graph: &DeformationGraph,
    warp: &WarpField,
) -> (SurfelGeometry, Vec<bool>) {
    let out: Vec<(Surfel, bool)> = geometry
        .surfels
        .par_iter()
        .enumerate()
        .map(
            |(i, s)| match blend_transform(&s.vertex, graph.bindings.get(i), graph, warp) {
                Ok(q) => {
                    let (vertex, normal) = warp_surfel(&s.vertex, &s.normal, &q);
                    (
                        Surfel {
                            vertex,
                            normal,
                            ..s.clone()
                        },
                        false,
                    )
                }
                Err(_) => (s.clone(), true),
            },
        )
        .collect();
    let (surfels, flags) = out.into_iter().unzip();
    (SurfelGeometry { surfels }, flags)
}

/// Moves node positions by their own transforms.
pub fn warp_nodes(graph: &mut DeformationGraph, warp: &WarpField) {
    for (n, q) in graph.nodes.iter_mut().zip(&warp.transforms) {
        n.position = q.transform_point(&n.position);
    }
}

/// Paper-rule update of one registered surfel: count-weighted averages of
/// vertex, normal and color, `delta_m` added to the measured class, then
/// renormalized.
pub fn fuse(m: &MeasuredSurfel, s: &Surfel, delta_m: f64, frame: usize) -> Surfel {
    let c = s.count as f64;
    let blend = |a: Vector3<f64>, b: Vector3<f64>| (a * c + b) / (c + 1.0);
    let color = Vector3::new(m.color[0] as f64, m.color[1] as f64, m.color[2] as f64);
    let mut label_dist = s.label_dist.clone();
    if let Some(p) = m
        .label
        .checked_sub(1)
        .and_then(|i| label_dist.get_mut(i as usize))
    {
        *p += delta_m;
    }
    let total: f64 = label_dist.iter().sum();
    if total > 0.0 {
        label_dist.iter_mut().for_each(|p| *p /= total);
    }
    let normal = blend(s.normal, m.normal);
    Surfel {
        vertex: blend(s.vertex, m.vertex),
        normal: normal.try_normalize(1e-12).unwrap_or(m.normal),
        color: blend(s.color, color),
        radius: s.radius,
        count: s.count.saturating_add(1),
        label_dist,
        last_seen: frame,
        born: s.born,
        anchor: s.anchor,
    }
}

/// Surfel footprint from depth and viewing angle.
pub fn surfel_radius(vertex: &Vector3<f64>, normal: &Vector3<f64>, fx: f64) -> f64 {
    let view = vertex.normalize();
    let cos = normal.dot(&view).abs().clamp(0.25, 1.0);
    vertex.z / fx * std::f64::consts::FRAC_1_SQRT_2 / cos
}

/// New surfel from a measurement with a one-hot label distribution.
pub fn append(m: &MeasuredSurfel, k: &CameraIntrinsics, num_labels: u16, frame: usize) -> Surfel {
    Surfel::new(
        m.vertex,
        m.normal,
        m.color,
        surfel_radius(&m.vertex, &m.normal, k.fx),
        m.label,
        num_labels,
        frame,
    )
}

/// For each measurement pixel, the closest gated surfel among those
/// rendered into its 4×4 block of the fine render.
pub fn register(
    meas: &MeasurementFrame,
    render_g: &RenderMaps,
    geometry: &SurfelGeometry,
    gating: &Gating,
) -> Grid<Option<usize>> {
    let s = render_g.scale as i64;
    let half = s / 2;
    let rows: Vec<Vec<Option<usize>>> = (0..meas.height())
        .into_par_iter()
        .map(|y| {
            (0..meas.width())
                .map(|x| {
                    let m = meas.surfel_at(x, y)?;
                    let mut best: Option<(f64, usize)> = None;
                    for sy in (y as i64 * s - half)..(y as i64 * s - half + s) {
                        for sx in (x as i64 * s - half)..(x as i64 * s - half + s) {
                            let Some(i) = render_g.index_at(sx, sy) else {
                                continue;
                            };
                            let g = &geometry.surfels[i as usize];
                            if !gating.accepts(&g.vertex, &g.normal, &m.vertex, &m.normal) {
                                continue;
                            }
                            let d = (g.vertex - m.vertex).norm_squared();
                            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && (i as usize) < bi))
                            {
                                best = Some((d, i as usize));
                            }
                        }
                    }
                    best.map(|(_, i)| i)
                })
                .collect()
        })
        .collect();
    Grid::from_vec(
        meas.width(),
        meas.height(),
        rows.into_iter().flatten().collect(),
    )
    .expect("dimensions")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FuseStats {
    /// Valid measurement pixels considered.
    pub attempts: usize,
    pub fused: usize,
    pub appended: usize,
    /// Per pre-existing surfel: fused this frame.
    pub fused_flags: Vec<bool>,
}

/// Fuses registered measurements into `geometry` and appends the rest.
/// Appended surfels take their anchor from `anchors` when given.
pub fn fuse_frame(
    geometry: &mut SurfelGeometry,
    meas: &MeasurementFrame,
    registration: &Grid<Option<usize>>,
    cfg: &FusionConfig,
    anchors: Option<&Grid<Option<SurfacePoint>>>,
) -> FuseStats {
    let frame = meas.index;
    let unrecognized = meas.num_labels;
    let mut stats = FuseStats {
        fused_flags: vec![false; geometry.len()],
        ..Default::default()
    };
    let mut appended = Vec::new();
    for (x, y, reg) in registration.enumerate() {
        let Some(m) = meas.surfel_at(x, y) else {
            continue;
        };
        stats.attempts += 1;
        match *reg {
            Some(i) => {
                let delta = if m.label == unrecognized {
                    cfg.delta_m_unrecognized
                } else {
                    cfg.delta_m
                };
                let mut s = fuse(&m, &geometry.surfels[i], delta, frame);
                if !cfg.semantic_fusion {
                    s.label_dist.iter_mut().for_each(|p| *p = 0.0);
                    if let Some(p) = m
                        .label
                        .checked_sub(1)
                        .and_then(|l| s.label_dist.get_mut(l as usize))
                    {
                        *p = 1.0;
                    }
                }
                geometry.surfels[i] = s;
                stats.fused_flags[i] = true;
                stats.fused += 1;
            }
            None => {
                let mut s = append(&m, &meas.intrinsics, meas.num_labels, frame);
                s.anchor = anchors.and_then(|a| *a.get(x, y));
                appended.push(s);
                stats.appended += 1;
            }
        }
    }
    geometry.surfels.extend(appended);
    stats
}

/// Removal set among surfels not fused this frame: free-space violators and
/// stale single observations.
pub fn remove_violating(
    geometry: &SurfelGeometry,
    meas: &MeasurementFrame,
    fused: &[bool],
    cfg: &FusionConfig,
) -> Vec<bool> {
    let k = &meas.intrinsics;
    geometry
        .surfels
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if fused.get(i).copied().unwrap_or(true) {
                return false;
            }
            let stale = s.count == 1 && meas.index.saturating_sub(s.last_seen) >= cfg.tau_stale;
            let violates = project_pixel(k, 1, &s.vertex).is_some_and(|(x, y)| {
                meas.is_valid(x, y) && s.vertex.z < meas.vertices.get(x, y).z - cfg.tau_violate
            });
            stale || violates
        })
        .collect()
}

/// Label of a new node: majority over the argmax labels of the `k` surfels
/// nearest to `p`, ties to the lower class.
pub fn vote_label(geometry: &SurfelGeometry, p: &Vector3<f64>, k: usize) -> u16 {
    let mut d: Vec<(f64, usize)> = geometry
        .surfels
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.vertex - p).norm_squared(), i))
        .collect();
    let k = k.clamp(1, d.len().max(1));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
    }
    let mut votes: Vec<(u16, usize)> = Vec::new();
    for (_, i) in d {
        let l = geometry.surfels[i].label();
        match votes.iter_mut().find(|v| v.0 == l) {
            Some(v) => v.1 += 1,
            None => votes.push((l, 1)),
        }
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(1, |v| v.0)
}

/// Indices of surfels farther than `sigma` from every node.
pub fn unsupported(geometry: &SurfelGeometry, graph: &DeformationGraph, sigma: f64) -> Vec<usize> {
    let s2 = sigma * sigma;
    geometry
        .surfels
        .par_iter()
        .enumerate()
        .filter(|(_, s)| {
            !graph
                .nodes
                .iter()
                .any(|n| (n.position - s.vertex).norm_squared() <= s2)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Appends nodes over unsupported surfels until every surfel is within
/// `sigma` of a node, then refreshes neighbors and edge weights. Returns the
/// number of new nodes.
pub fn update_graph(
    geometry: &SurfelGeometry,
    graph: &mut DeformationGraph,
    cfg: &FusionConfig,
    mode: GraphMode,
    table: &RigidnessTable,
) -> Result<usize, WarpError> {
    let before = graph.len();
    loop {
        let pending = unsupported(geometry, graph, cfg.sigma);
        if pending.is_empty() {
            break;
        }
        // One representative per voxel, the lowest surfel index.
        let mut voxels: HashMap<[i64; 3], usize> = HashMap::new();
        for &i in &pending {
            let v = geometry.surfels[i].vertex / cfg.sigma;
            let key = [v.x.floor() as i64, v.y.floor() as i64, v.z.floor() as i64];
            voxels.entry(key).or_insert(i);
        }
        let mut reps: Vec<usize> = voxels.into_values().collect();
        reps.sort_unstable();
        for i in reps {
            let p = geometry.surfels[i].vertex;
            graph.nodes.push(GraphNode {
                position: p,
                radius: node_radius(cfg.sigma),
                label: vote_label(geometry, &p, cfg.label_vote_k),
            });
        }
    }
    let added = graph.len() - before;
    if added > 0 || graph.edge_weights.len() != graph.len() {
        graph.refresh_edges(cfg.node_neighbors, mode, table)?;
    }
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warpfield::{bind_surfels, DualQuaternion};
    use approx::assert_relative_eq;

    fn m(label: u16) -> MeasuredSurfel {
        MeasuredSurfel {
            pixel: (0, 0),
            vertex: Vector3::new(0.0, 0.0, 1.0),
            normal: -Vector3::z(),
            color: [100, 100, 100],
            label,
        }
    }

    fn with_dist(dist: &[f64]) -> Surfel {
        let mut s = Surfel::new(
            Vector3::new(0.0, 0.0, 1.0),
            -Vector3::z(),
            [0, 0, 0],
            0.01,
            1,
            dist.len() as u16,
            0,
        );
        s.label_dist = dist.to_vec();
        s
    }

    #[test]
    fn fuse_label_update_example() {
        let s = fuse(&m(1), &with_dist(&[0.5, 0.5]), 1.0, 1);
        assert_relative_eq!(s.label_dist[0], 0.75, epsilon = 1e-15);
        assert_relative_eq!(s.label_dist[1], 0.25, epsilon = 1e-15);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn fuse_fixed_point() {
        for delta in [0.1, 1.0, 7.0] {
            let s = fuse(&m(1), &with_dist(&[1.0, 0.0]), delta, 1);
            assert_eq!(s.label_dist, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn repeated_fusion_flips_argmax() {
        // Scripted iteration of the update rule.
        let mut oracle = [0.9, 0.1];
        let mut oracle_flip = None;
        for step in 1..=4 {
            oracle[1] += 1.0;
            let t = oracle[0] + oracle[1];
            oracle = [oracle[0] / t, oracle[1] / t];
            if oracle_flip.is_none() && oracle[1] > oracle[0] {
                oracle_flip = Some(step);
            }
        }
        let mut s = with_dist(&[0.9, 0.1]);
        let mut flip = None;
        for step in 1..=4 {
            s = fuse(&m(2), &s, 1.0, step);
            assert_relative_eq!(s.label_dist.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            if flip.is_none() && s.label() == 2 {
                flip = Some(step);
            }
        }
        assert!(flip.is_some());
        assert_eq!(flip, oracle_flip);
    }

    #[test]
    fn fuse_averages_geometry() {
        let mut a = m(1);
        a.vertex = Vector3::new(0.0, 0.0, 1.2);
        a.color = [200, 0, 0];
        let s = fuse(&a, &with_dist(&[1.0, 0.0]), 1.0, 3);
        assert_relative_eq!(s.vertex.z, 1.1, epsilon = 1e-12);
        assert_eq!(s.color_u8(), [100, 0, 0]);
        assert_eq!(s.last_seen, 3);
        assert_relative_eq!(s.normal.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn append_is_one_hot() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let s = append(&m(3), &k, 4, 0);
        assert_eq!(s.label_dist, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(append(&m(4), &k, 4, 0).label_dist, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.count, 1);
        assert!(s.radius > 0.0);
    }

    #[test]
    fn radius_grows_with_depth_and_obliquity() {
        let n = -Vector3::z();
        let near = surfel_radius(&Vector3::new(0.0, 0.0, 1.0), &n, 100.0);
        let far = surfel_radius(&Vector3::new(0.0, 0.0, 2.0), &n, 100.0);
        let oblique = surfel_radius(
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(0.0, 0.9, -0.1).normalize(),
            100.0,
        );
        assert!(far > near && oblique > near);
    }

    fn meas_plane(depth: f64) -> MeasurementFrame {
        use crate::measurement::{IngestConfig, RawFrame};
        let k = CameraIntrinsics::new(20.0, 20.0, 5.0, 5.0, 10, 10).unwrap();
        let raw = RawFrame {
            index: 5,
            depth: Grid::new(10, 10, depth),
            color: Grid::new(10, 10, [9, 9, 9]),
            labels: Grid::new(10, 10, 1),
        };
        MeasurementFrame::build(
            &raw,
            &k,
            &IngestConfig {
                denoise_sigma: None,
                num_labels: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn removal_examples() {
        let meas = meas_plane(1.0);
        let cfg = FusionConfig::default();
        let at = |z: f64| {
            let mut s = Surfel::new(
                Vector3::new(0.0, 0.0, z),
                -Vector3::z(),
                [0; 3],
                0.01,
                1,
                3,
                5,
            );
            s.count = 3;
            s
        };
        let g = SurfelGeometry::from(vec![at(0.8), at(1.2), at(0.99)]);
        assert_eq!(
            remove_violating(&g, &meas, &[false; 3], &cfg),
            vec![true, false, false]
        );
        // Fused surfels are never removed.
        assert_eq!(
            remove_violating(&g, &meas, &[true; 3], &cfg),
            vec![false; 3]
        );
        // Staleness.
        let mut stale = at(1.0);
        stale.count = 1;
        stale.last_seen = 0;
        let mut fresh = stale.clone();
        fresh.last_seen = 4;
        let g = SurfelGeometry::from(vec![stale, fresh]);
        assert_eq!(
            remove_violating(
                &g,
                &meas,
                &[false; 2],
                &FusionConfig {
                    tau_stale: 5,
                    ..cfg
                }
            ),
            vec![true, false]
        );
    }

    #[test]
    fn registration_and_fusion_conserve_pixels() {
        let meas = meas_plane(1.0);
        let cfg = FusionConfig::default();
        let mut g = SurfelGeometry::default();
        let empty = register(
            &meas,
            &crate::render::render(&g, &meas.intrinsics, 4),
            &g,
            &cfg.gating,
        );
        let stats = fuse_frame(&mut g, &meas, &empty, &cfg, None);
        assert_eq!(stats.appended, meas.valid_count());
        // The same measurement again registers every pixel to its own surfel.
        let r = crate::render::render(&g, &meas.intrinsics, 4);
        let reg = register(&meas, &r, &g, &cfg.gating);
        for (x, y, i) in reg.enumerate() {
            assert_eq!(*i, Some(y * 10 + x));
        }
        let stats = fuse_frame(&mut g, &meas, &reg, &cfg, None);
        assert_eq!(stats.fused + stats.appended, stats.attempts);
        assert_eq!(stats.fused, 100);
        assert!(g.surfels.iter().all(|s| s.count == 2));
    }

    fn cluster(center: Vector3<f64>, labels: &[u16]) -> Vec<Surfel> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                Surfel::new(
                    center + Vector3::new(0.001 * i as f64, 0.0, 0.0),
                    -Vector3::z(),
                    [0; 3],
                    0.01,
                    l,
                    4,
                    0,
                )
            })
            .collect()
    }

    #[test]
    fn majority_vote() {
        let g = SurfelGeometry::from(cluster(Vector3::zeros(), &[2, 2, 3]));
        assert_eq!(vote_label(&g, &Vector3::zeros(), 3), 2);
        let g = SurfelGeometry::from(cluster(Vector3::zeros(), &[3, 2]));
        assert_eq!(vote_label(&g, &Vector3::zeros(), 2), 2);
    }

    #[test]
    fn graph_update_covers_new_cluster() {
        let table = RigidnessTable(vec![1.0; 4]);
        let cfg = FusionConfig::default();
        let mut surfels = cluster(Vector3::zeros(), &[1; 5]);
        let mut graph = DeformationGraph::default();
        let g = SurfelGeometry::from(surfels.clone());
        assert_eq!(
            update_graph(&g, &mut graph, &cfg, GraphMode::Sad, &table).unwrap(),
            1
        );
        // Already supported: unchanged.
        assert_eq!(
            update_graph(&g, &mut graph, &cfg, GraphMode::Sad, &table).unwrap(),
            0
        );
        // A spread-out far cluster.
        for i in 0..40 {
            let t = i as f64 * 0.011;
            surfels.push(Surfel::new(
                Vector3::new(1.0 + t, t * 0.5, 1.0 + t),
                -Vector3::z(),
                [0; 3],
                0.01,
                2,
                4,
                0,
            ));
        }
        let g = SurfelGeometry::from(surfels);
        let added = update_graph(&g, &mut graph, &cfg, GraphMode::Sad, &table).unwrap();
        assert!(added >= 1);
        assert!(unsupported(&g, &graph, cfg.sigma).is_empty());
        assert!(graph.nodes[1..]
            .iter()
            .all(|n| n.label == 2 && n.position.x >= 1.0));
        assert_eq!(graph.neighbors.len(), graph.len());
    }

    #[test]
    fn warp_identity_and_translation() {
        let surfels = cluster(Vector3::new(0.0, 0.0, 1.0), &[1; 4]);
        let g = SurfelGeometry::from(surfels);
        let mut graph = DeformationGraph {
            nodes: vec![GraphNode {
                position: Vector3::new(0.0, 0.0, 1.0),
                radius: 0.075,
                label: 1,
            }],
            ..Default::default()
        };
        graph.bindings = bind_surfels(&g.positions(), &graph, 4).unwrap();
        let (same, flags) = warp_geometry(&g, &graph, &WarpField::identity(1));
        assert_eq!(same, g);
        assert!(flags.iter().all(|f| !f));
        let t = Vector3::new(0.01, -0.02, 0.03);
        let warp = WarpField {
            transforms: vec![DualQuaternion::from_translation(&t)],
        };
        let (moved, _) = warp_geometry(&g, &graph, &warp);
        for (a, b) in moved.surfels.iter().zip(&g.surfels) {
            assert_relative_eq!(a.vertex, b.vertex + t, epsilon = 1e-12);
        }
    }
}
