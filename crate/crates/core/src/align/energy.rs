use nalgebra::{Matrix3, Matrix3x6, Quaternion, SMatrix, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Correspondence, EnergyWeights};
use crate::warpfield::{
    blend_unnormalized, DeformationGraph, DualQuaternion, WarpError, WarpField,
};

/// Everything the energy depends on apart from the transforms.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub correspondences: &'a [Correspondence],
    pub graph: &'a DeformationGraph,
    pub weights: EnergyWeights,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Weighted sum of the three terms.
    pub total: f64,
    pub picp: f64,
    pub data_2d: f64,
    pub areg: f64,
}

/// One scalar residual, already scaled by the square root of its weight,
/// with its gradient per touched node (`[omega, tau]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub residual: f64,
    pub blocks: Vec<(usize, Vector6<f64>)>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    v.cross_matrix()
}

fn quat_vec(q: &Quaternion<f64>) -> nalgebra::Vector4<f64> {
    nalgebra::Vector4::new(q.w, q.i, q.j, q.k)
}

/// Point transform of an unnormalized dual quaternion and its 3×8
/// derivative with respect to `[real, dual]` (`w, x, y, z` order).
fn transform_with_derivative(
    q: &DualQuaternion,
    v: &Vector3<f64>,
) -> (Vector3<f64>, SMatrix<f64, 3, 8>) {
    let w = q.real.w;
    let rv = q.real.imag();
    let dw = q.dual.w;
    let dv = q.dual.imag();
    let n = q.real.norm_squared();

    let f = (w * w - rv.norm_squared()) * v + 2.0 * rv.dot(v) * rv + 2.0 * w * rv.cross(v);
    let g = w * dv - dw * rv + rv.cross(&dv);
    let x = (f + 2.0 * g) / n;

    let df_dw = 2.0 * w * v + 2.0 * rv.cross(v);
    let df_drv = -2.0 * v * rv.transpose()
        + Matrix3::identity() * (2.0 * rv.dot(v))
        + 2.0 * rv * v.transpose()
        - 2.0 * w * skew(v);
    let dg_dw = dv;
    let dg_drv = -Matrix3::identity() * dw - skew(&dv);
    let dg_ddw = -rv;
    let dg_ddv = Matrix3::identity() * w + skew(&rv);

    let mut jac = SMatrix::<f64, 3, 8>::zeros();
    jac.set_column(0, &((df_dw + 2.0 * dg_dw - 2.0 * w * x) / n));
    let drv = (df_drv + 2.0 * dg_drv - 2.0 * x * rv.transpose()) / n;
    jac.fixed_view_mut::<3, 3>(0, 1).copy_from(&drv);
    jac.set_column(4, &(2.0 * dg_ddw / n));
    jac.fixed_view_mut::<3, 3>(0, 5)
        .copy_from(&(2.0 * dg_ddv / n));
    (x, jac)
}

/// Derivative of `normalize(inc(xi) ∘ q)` at `xi = 0`, as an 8×6 matrix,
/// where `inc` rotates about the node position `p` and then translates.
fn local_update_derivative(q: &DualQuaternion, p: &Vector3<f64>) -> SMatrix<f64, 8, 6> {
    let mut m = SMatrix::<f64, 8, 6>::zeros();
    for j in 0..3 {
        let mut e = Vector3::zeros();
        e[j] = 0.5;
        let h = Quaternion::from_imag(e);
        let lever = Quaternion::from_imag(-e.cross(p));
        m.fixed_view_mut::<4, 1>(0, j)
            .copy_from(&quat_vec(&(h * q.real)));
        m.fixed_view_mut::<4, 1>(4, j)
            .copy_from(&quat_vec(&(h * q.dual + lever * q.real)));
        m.fixed_view_mut::<4, 1>(4, 3 + j)
            .copy_from(&quat_vec(&(h * q.real)));
    }
    m
}

/// Per-node 3×6 derivative blocks of a warped point.
pub type PointJacobian = Vec<(usize, Matrix3x6<f64>)>;

/// Blended warp of `source` and its Jacobian with respect to the local
/// update of each bound node.
pub fn warped_point_jacobian(
    source: &Vector3<f64>,
    bound: &[usize],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<(Vector3<f64>, PointJacobian), WarpError> {
    let (sum, factors) = blend_unnormalized(source, bound, graph, warp)?;
    let (x, jf) = transform_with_derivative(&sum, source);
    let blocks = bound
        .iter()
        .zip(factors)
        .map(|(&k, c)| {
            (
                k,
                jf * local_update_derivative(&warp.transforms[k], &graph.nodes[k].position) * c,
            )
        })
        .collect();
    Ok((x, blocks))
}

fn warped_point(
    c: &Correspondence,
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<Vector3<f64>, WarpError> {
    let (sum, _) = blend_unnormalized(&c.source, &c.bound, graph, warp)?;
    let q = sum.normalize().ok_or(WarpError::DegenerateBinding {
        x: c.source.x,
        y: c.source.y,
        z: c.source.z,
    })?;
    Ok(q.transform_point(&c.source))
}

/// Point-to-plane residual per correspondence and the sum of squares.
pub fn energy_picp(
    correspondences: &[Correspondence],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<(f64, Vec<f64>), WarpError> {
    let r: Vec<f64> = correspondences
        .par_iter()
        .map(|c| {
            Ok(c.target_normal
                .dot(&(warped_point(c, graph, warp)? - c.target)))
        })
        .collect::<Result<_, WarpError>>()?;
    Ok((r.iter().map(|r| r * r).sum(), r))
}

/// X/Y residuals per correspondence (interleaved) and the sum of squares.
pub fn energy_2d(
    correspondences: &[Correspondence],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<(f64, Vec<f64>), WarpError> {
    let r: Vec<[f64; 2]> = correspondences
        .par_iter()
        .map(|c| {
            let d = warped_point(c, graph, warp)? - c.target_2d;
            Ok([d.x, d.y])
        })
        .collect::<Result<_, WarpError>>()?;
    let flat: Vec<f64> = r.into_iter().flatten().collect();
    Ok((flat.iter().map(|r| r * r).sum(), flat))
}

/// `T_i(p_j) - T_j(p_j)` per directed edge (three entries each) and the
/// edge-weighted sum of squares.
pub fn energy_areg(graph: &DeformationGraph, warp: &WarpField) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut r = Vec::new();
    for (j, i, w) in graph.directed_edges() {
        let p = graph.nodes[j].position;
        let e = warp.transforms[i].transform_point(&p) - warp.transforms[j].transform_point(&p);
        total += w * e.norm_squared();
        r.extend(e.iter());
    }
    (total, r)
}

pub fn energy(problem: &Problem, warp: &WarpField) -> Result<EnergyBreakdown, WarpError> {
    let w = &problem.weights;
    let picp = energy_picp(problem.correspondences, problem.graph, warp)?.0;
    let data_2d = energy_2d(problem.correspondences, problem.graph, warp)?.0;
    let areg = energy_areg(problem.graph, warp).0;
    Ok(EnergyBreakdown {
        total: w.w_picp * picp + w.w_2d * data_2d + w.w_areg * areg,
        picp,
        data_2d,
        areg,
    })
}

/// Weighted residual vector in the row order of [`linearize`].
pub fn residuals(problem: &Problem, warp: &WarpField) -> Result<Vec<f64>, WarpError> {
    Ok(linearize_impl(problem, warp, false)?
        .into_iter()
        .map(|r| r.residual)
        .collect())
}

/// Weighted residual rows with analytic gradients. Per correspondence: the
/// point-to-plane row then the X and Y rows; then three rows per directed
/// graph edge. Terms with zero weight are left out.
pub fn linearize(problem: &Problem, warp: &WarpField) -> Result<Vec<Row>, WarpError> {
    linearize_impl(problem, warp, true)
}

fn linearize_impl(
    problem: &Problem,
    warp: &WarpField,
    with_jacobian: bool,
) -> Result<Vec<Row>, WarpError> {
    let w = &problem.weights;
    let (sp, s2, sr) = (w.w_picp.sqrt(), w.w_2d.sqrt(), w.w_areg.sqrt());
    let graph = problem.graph;

    let data: Vec<Vec<Row>> = problem
        .correspondences
        .par_iter()
        .map(|c| {
            let (x, blocks) = if with_jacobian {
                warped_point_jacobian(&c.source, &c.bound, graph, warp)?
            } else {
                (warped_point(c, graph, warp)?, Vec::new())
            };
            let mut rows = Vec::with_capacity(3);
            if sp > 0.0 {
                let n = c.target_normal;
                rows.push(Row {
                    residual: sp * n.dot(&(x - c.target)),
                    blocks: blocks
                        .iter()
                        .map(|(k, j)| (*k, (j.transpose() * n) * sp))
                        .collect(),
                });
            }
            if s2 > 0.0 {
                let d = x - c.target_2d;
                for axis in 0..2 {
                    rows.push(Row {
                        residual: s2 * d[axis],
                        blocks: blocks
                            .iter()
                            .map(|(k, j)| (*k, j.row(axis).transpose() * s2))
                            .collect(),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, WarpError>>()?;

    let mut rows: Vec<Row> = data.into_iter().flatten().collect();
    if sr > 0.0 {
        for (j, i, ew) in graph.directed_edges() {
            let s = sr * ew.sqrt();
            let p = graph.nodes[j].position;
            let yi = warp.transforms[i].transform_point(&p);
            let yj = warp.transforms[j].transform_point(&p);
            let e = yi - yj;
            // d(exp(w) (y - p_k) + p_k + t)/d[w, t] at zero is [-[y - p_k]x, I].
            let (si, sj) = (
                -skew(&(yi - graph.nodes[i].position)),
                -skew(&(yj - graph.nodes[j].position)),
            );
            for a in 0..3 {
                let blocks = if with_jacobian {
                    let mut gi = Vector6::zeros();
                    let mut gj = Vector6::zeros();
                    for b in 0..3 {
                        gi[b] = s * si[(a, b)];
                        gj[b] = -s * sj[(a, b)];
                    }
                    gi[3 + a] = s;
                    gj[3 + a] = -s;
                    vec![(i, gi), (j, gj)]
                } else {
                    Vec::new()
                };
                rows.push(Row {
                    residual: s * e[a],
                    blocks,
                });
            }
        }
    }
    Ok(rows)
}

/// Increment that rotates by `omega` about `pivot`, then translates by `tau`.
pub fn node_increment(
    omega: &Vector3<f64>,
    tau: &Vector3<f64>,
    pivot: &Vector3<f64>,
) -> DualQuaternion {
    let rot = UnitQuaternion::from_scaled_axis(*omega);
    DualQuaternion::from_rotation_translation(&rot, &(tau + pivot - rot * pivot))
}

/// Composes each node's increment `[omega, tau]` (rotation about the node
/// position) onto its transform and renormalizes.
pub fn apply_increment(
    graph: &DeformationGraph,
    warp: &WarpField,
    delta: &[Vector6<f64>],
) -> WarpField {
    WarpField {
        transforms: warp
            .transforms
            .iter()
            .zip(delta)
            .zip(&graph.nodes)
            .map(|((q, d), n)| {
                let inc = node_increment(
                    &d.fixed_rows::<3>(0).into(),
                    &d.fixed_rows::<3>(3).into(),
                    &n.position,
                );
                inc.compose(q).normalize().unwrap_or(*q)
            })
            .collect(),
    }
}
