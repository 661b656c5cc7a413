//! Ray-cast synthetic RGB-D scenes with exact flow and per-pixel ground
//! truth.
//!
//! Every object is a set of rectangles in its own rest frame (optionally a
//! single rectangle bent by a Gaussian bump) placed by a per-frame pose. Each
//! pixel records which material point it sees, so flow and tracking error are
//! exact.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{CameraIntrinsics, FlowMap, MeasurementError, RawFrame, SequenceWriter};
use crate::grid::Grid;

pub const CLASS_TABLE: u16 = 1;
pub const CLASS_CUP: u16 = 2;
pub const CLASS_HUMAN: u16 = 3;
pub const CLASS_CLOTH: u16 = 4;
pub const CLASS_BOOK: u16 = 5;
/// `H + 1`: the unrecognized class.
pub const CLASS_UNRECOGNIZED: u16 = 6;
pub const NUM_LABELS: u16 = 6;
pub const CLASS_NAMES: [&str; 6] = ["table", "cup", "human", "cloth", "book", "unrecognized"];

/// Average rigidness per class, indexed by `class - 1`.
pub const DEFAULT_RIGIDNESS: [f64; 6] = [1.0, 1.0, 0.3, 0.2, 1.0, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Textured plane sliding parallel to the image plane.
    InPlane,
    /// Cup lifted off a table.
    Lift,
    /// Two boxes passing each other in front of a wall.
    Pass,
    /// A sheet bulging toward the camera.
    Sheet,
    /// The lift scene without motion.
    Static,
    /// The lift scene translating rigidly as a whole.
    Translate,
}

impl SceneKind {
    pub const ALL: [SceneKind; 6] = [
        SceneKind::InPlane,
        SceneKind::Lift,
        SceneKind::Pass,
        SceneKind::Sheet,
        SceneKind::Static,
        SceneKind::Translate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::InPlane => "in-plane",
            SceneKind::Lift => "lift",
            SceneKind::Pass => "pass",
            SceneKind::Sheet => "sheet",
            SceneKind::Static => "static",
            SceneKind::Translate => "translate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Rectangle `origin + a * axis_u + b * axis_v` with `|a| <= half_u`,
/// `|b| <= half_v`, in object rest coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Face {
    pub origin: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Face {
    fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }
}

/// Gaussian bump applied to a flat sheet lying in the rest-frame `z = 0`
/// plane: a rest point `(x, y, 0)` moves to `(x, y, h_t(x, y))`.
#[derive(Clone, Copy, Debug)]
pub struct Bend {
    /// Bump height added per frame (meters, along rest `+z`).
    pub amplitude_per_frame: f64,
    pub width: f64,
}

impl Bend {
    fn height(&self, frame: usize, x: f64, y: f64) -> (f64, Vector2<f64>) {
        let a = self.amplitude_per_frame * frame as f64;
        let s2 = self.width * self.width;
        let h = a * (-(x * x + y * y) / (2.0 * s2)).exp();
        (h, Vector2::new(-x / s2 * h, -y / s2 * h))
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub name: String,
    pub class: u16,
    pub base_color: [u8; 3],
    pub faces: Vec<Face>,
    pub bend: Option<Bend>,
    /// Rest frame to camera frame, one per frame.
    pub poses: Vec<Isometry3<f64>>,
}

/// A material point: object index plus rest-frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurfacePoint {
    pub object: usize,
    pub local: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub frames: usize,
    pub num_labels: u16,
    /// Rigidness constant per class, indexed by `class - 1`.
    pub rigidness: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

fn box_faces(half: Vector3<f64>) -> Vec<Face> {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let face = |n: Vector3<f64>, u: Vector3<f64>, hu: f64, hv: f64, d: f64| Face {
        origin: n * d,
        axis_u: u,
        axis_v: n.cross(&u),
        half_u: hu,
        half_v: hv,
    };
    vec![
        face(x, y, half.y, half.z, half.x),
        face(-x, y, half.y, half.z, half.x),
        face(y, z, half.z, half.x, half.y),
        face(-y, z, half.z, half.x, half.y),
        face(z, x, half.x, half.y, half.z),
        face(-z, x, half.x, half.y, half.z),
    ]
}

fn quad(half_u: f64, half_v: f64) -> Vec<Face> {
    // Rest normal is +z; objects are posed so that +z faces the camera.
    vec![Face {
        origin: Vector3::zeros(),
        axis_u: Vector3::x(),
        axis_v: Vector3::y(),
        half_u,
        half_v,
    }]
}

/// Rotation taking rest `+z` to `-z` (facing a camera looking along `+z`).
fn facing_camera() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
}

fn linear_poses(
    frames: usize,
    rotation: UnitQuaternion<f64>,
    start: Vector3<f64>,
    step: Vector3<f64>,
) -> Vec<Isometry3<f64>> {
    (0..frames)
        .map(|t| Isometry3::from_parts(Translation3::from(start + step * t as f64), rotation))
        .collect()
}

/// Table orientation for a camera pitched down by 50 degrees: rest `+z` is
/// world up, rest `+x` is the camera `x` axis.
fn table_rotation() -> UnitQuaternion<f64> {
    let pitch = 50f64.to_radians();
    let up = Vector3::new(0.0, -pitch.cos(), -pitch.sin());
    let x = Vector3::x();
    let y = up.cross(&x);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(
        &[x, y, up],
    )))
}

impl SyntheticScene {
    /// Built-in scene with its default frame count (10, or 5 for `static`).
    pub fn preset(kind: SceneKind) -> Self {
        let frames = if kind == SceneKind::Static { 5 } else { 10 };
        Self::preset_with_frames(kind, frames)
    }

    pub fn preset_with_frames(kind: SceneKind, frames: usize) -> Self {
        let objects = match kind {
            SceneKind::InPlane => vec![SceneObject {
                name: "book".into(),
                class: CLASS_BOOK,
                base_color: [200, 60, 40],
                faces: quad(0.20, 0.15),
                bend: None,
                poses: linear_poses(
                    frames,
                    facing_camera(),
                    Vector3::new(-0.07, 0.0, 1.0),
                    Vector3::new(0.015, 0.0, 0.0),
                ),
            }],
            SceneKind::Lift => Self::table_and_cup(frames, Vector3::zeros(), 0.015),
            SceneKind::Static => Self::table_and_cup(frames, Vector3::zeros(), 0.0),
            SceneKind::Translate => Self::table_and_cup(frames, Vector3::new(0.005, 0.0, 0.0), 0.0),
            SceneKind::Pass => {
                let wall = SceneObject {
                    name: "wall".into(),
                    class: CLASS_UNRECOGNIZED,
                    base_color: [150, 150, 160],
                    faces: quad(0.6, 0.45),
                    bend: None,
                    poses: linear_poses(
                        frames,
                        facing_camera(),
                        Vector3::new(0.0, 0.0, 1.3),
                        Vector3::zeros(),
                    ),
                };
                let turn = |yaw: f64, pitch: f64| {
                    UnitQuaternion::from_euler_angles(pitch.to_radians(), yaw.to_radians(), 0.0)
                };
                let front = SceneObject {
                    name: "cup".into(),
                    class: CLASS_CUP,
                    base_color: [60, 90, 200],
                    faces: box_faces(Vector3::new(0.04, 0.04, 0.04)),
                    bend: None,
                    poses: linear_poses(
                        frames,
                        turn(25.0, 15.0),
                        Vector3::new(-0.10, -0.03, 0.8),
                        Vector3::new(0.015, 0.0, 0.0),
                    ),
                };
                let back = SceneObject {
                    name: "hand".into(),
                    class: CLASS_HUMAN,
                    base_color: [210, 170, 130],
                    faces: box_faces(Vector3::new(0.06, 0.05, 0.03)),
                    bend: None,
                    poses: linear_poses(
                        frames,
                        turn(-20.0, 10.0),
                        Vector3::new(0.10, 0.04, 1.0),
                        Vector3::new(-0.015, 0.0, 0.0),
                    ),
                };
                vec![wall, back, front]
            }
            SceneKind::Sheet => vec![SceneObject {
                name: "cloth".into(),
                class: CLASS_CLOTH,
                base_color: [90, 180, 90],
                faces: quad(0.22, 0.16),
                bend: Some(Bend {
                    amplitude_per_frame: 0.008,
                    width: 0.08,
                }),
                poses: linear_poses(
                    frames,
                    facing_camera(),
                    Vector3::new(0.0, 0.0, 1.0),
                    Vector3::zeros(),
                ),
            }],
        };
        Self {
            kind,
            frames,
            num_labels: NUM_LABELS,
            rigidness: DEFAULT_RIGIDNESS.to_vec(),
            objects,
        }
    }

    fn table_and_cup(frames: usize, drift: Vector3<f64>, lift: f64) -> Vec<SceneObject> {
        let rot = table_rotation();
        let table_center = Vector3::new(0.0, 0.0, 1.0);
        let up = rot * Vector3::z();
        let cup_half = Vector3::new(0.04, 0.04, 0.05);
        let cup_base = table_center + rot * Vector3::new(0.0, 0.03, 0.0);
        let table = SceneObject {
            name: "table".into(),
            class: CLASS_TABLE,
            base_color: [160, 120, 80],
            faces: quad(0.30, 0.25),
            bend: None,
            poses: linear_poses(frames, rot, table_center, drift),
        };
        let cup = SceneObject {
            name: "cup".into(),
            class: CLASS_CUP,
            base_color: [230, 230, 240],
            faces: box_faces(cup_half),
            bend: None,
            poses: linear_poses(frames, rot, cup_base + up * cup_half.z, drift + up * lift),
        };
        vec![table, cup]
    }

    /// Intrinsics used by the presets: 160x120, 160 px focal length.
    pub fn default_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120).expect("valid preset intrinsics")
    }

    pub fn validate(&self) -> Result<(), MeasurementError> {
        let fail = |m: String| Err(MeasurementError::Generation(m));
        if self.frames < 2 {
            return fail("a scene needs at least two frames".into());
        }
        if self.rigidness.len() != self.num_labels as usize {
            return fail("rigidness table must cover every class".into());
        }
        for o in &self.objects {
            if o.poses.len() != self.frames {
                return fail(format!("object '{}' has {} poses", o.name, o.poses.len()));
            }
            if o.class == 0 || o.class > self.num_labels {
                return fail(format!("object '{}' has class {}", o.name, o.class));
            }
            if o.bend.is_some() && o.faces.len() != 1 {
                return fail(format!("bent object '{}' must be a single sheet", o.name));
            }
        }
        Ok(())
    }

    /// Camera-frame position of a material point at `frame`.
    pub fn world_position(&self, point: &SurfacePoint, frame: usize) -> Vector3<f64> {
        let o = &self.objects[point.object];
        let [x, y, z] = point.local;
        let local = match &o.bend {
            Some(b) => Vector3::new(x, y, z + b.height(frame, x, y).0),
            None => Vector3::new(x, y, z),
        };
        (o.poses[frame] * nalgebra::Point3::from(local)).coords
    }

    /// Nearest surface hit along the ray through pixel `(u, v)`: depth and the
    /// material point.
    fn cast(
        &self,
        k: &CameraIntrinsics,
        u: f64,
        v: f64,
        frame: usize,
    ) -> Option<(f64, SurfacePoint)> {
        let dir = k.ray(u, v);
        let mut best: Option<(f64, SurfacePoint)> = None;
        for (oi, o) in self.objects.iter().enumerate() {
            let inv = o.poses[frame].inverse();
            let origin = inv.translation.vector;
            let d = inv.rotation * dir;
            let hit = match &o.bend {
                Some(b) => cast_bent(&o.faces[0], b, frame, &origin, &d),
                None => o
                    .faces
                    .iter()
                    .filter_map(|f| cast_face(f, &origin, &d))
                    .min_by(|a, b| a.0.total_cmp(&b.0)),
            };
            if let Some((t, local)) = hit {
                if best.as_ref().is_none_or(|(bt, _)| t < *bt) {
                    best = Some((
                        t,
                        SurfacePoint {
                            object: oi,
                            local: [local.x, local.y, local.z],
                        },
                    ));
                }
            }
        }
        best
    }
}

fn cast_face(f: &Face, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let n = f.normal();
    let denom = n.dot(d);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(f.origin - o)) / denom;
    if t <= 1e-9 {
        return None;
    }
    let p = o + d * t;
    let rel = p - f.origin;
    let (a, b) = (rel.dot(&f.axis_u), rel.dot(&f.axis_v));
    (a.abs() <= f.half_u && b.abs() <= f.half_v).then_some((t, p))
}

fn cast_bent(
    f: &Face,
    bend: &Bend,
    frame: usize,
    o: &Vector3<f64>,
    d: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    if d.z.abs() < 1e-12 {
        return None;
    }
    // Newton on g(t) = o_z + t d_z - h(o_x + t d_x, o_y + t d_y).
    let mut t = -o.z / d.z;
    for _ in 0..50 {
        let (x, y) = (o.x + t * d.x, o.y + t * d.y);
        let (h, grad) = bend.height(frame, x, y);
        let g = o.z + t * d.z - h;
        let dg = d.z - grad.x * d.x - grad.y * d.y;
        if dg.abs() < 1e-12 {
            return None;
        }
        let step = g / dg;
        t -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    let (x, y) = (o.x + t * d.x, o.y + t * d.y);
    let residual = o.z + t * d.z - bend.height(frame, x, y).0;
    if t <= 1e-9 || residual.abs() > 1e-9 || x.abs() > f.half_u || y.abs() > f.half_v {
        return None;
    }
    Some((t, Vector3::new(x, y, 0.0)))
}

fn texture(base: [u8; 3], local: &[f64; 3]) -> [u8; 3] {
    let cell = |c: f64| (c / 0.02).floor() as i64;
    let parity = (cell(local[0]) + cell(local[1]) + cell(local[2])).rem_euclid(2);
    let shade = if parity == 0 { 1.0 } else { 0.6 };
    base.map(|c| (c as f64 * shade).round() as u8)
}

/// Measurement corruption applied by the generator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of additive Gaussian depth noise, meters.
    pub depth_std: f64,
    /// Fraction of valid pixels whose label is replaced by a different class.
    pub label_flip_fraction: f64,
    /// Relabel this class as unrecognized in every frame after the first.
    pub erase_class_after_first: Option<u16>,
    pub seed: u64,
}

/// Ground truth attached to one generated frame.
#[derive(Clone, Debug)]
pub struct GroundTruthFrame {
    pub index: usize,
    /// Material point seen at each pixel.
    pub anchors: Grid<Option<SurfacePoint>>,
    pub poses: Vec<Isometry3<f64>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub raw: RawFrame,
    /// Flow from the previous frame; `None` for the first frame.
    pub flow: Option<FlowMap>,
    pub truth: GroundTruthFrame,
}

/// Lazily renders the frames of a scene.
#[derive(Debug)]
pub struct SyntheticStream {
    scene: Arc<SyntheticScene>,
    intrinsics: CameraIntrinsics,
    noise: NoiseConfig,
    next: usize,
}

impl SyntheticStream {
    pub fn scene(&self) -> &Arc<SyntheticScene> {
        &self.scene
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Renders one frame. Deterministic for a given scene, intrinsics and
    /// noise seed regardless of call order.
    pub fn render_frame(&self, index: usize) -> Result<SyntheticFrame, MeasurementError> {
        let scene = &self.scene;
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let hits = Grid::from_fn(w, h, |x, y| scene.cast(k, x as f64, y as f64, index));

        let mut visible = vec![0usize; scene.objects.len()];
        for hit in hits.iter().flatten() {
            visible[hit.1.object] += 1;
        }
        if let Some(i) = visible.iter().position(|&n| n == 0) {
            return Err(MeasurementError::Generation(format!(
                "object '{}' leaves the view at frame {index}",
                scene.objects[i].name
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(
            self.noise.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let depth_noise = (self.noise.depth_std > 0.0)
            .then(|| Normal::new(0.0, self.noise.depth_std).expect("finite std"));

        let mut depth = Grid::new(w, h, 0.0);
        let mut color = Grid::new(w, h, [0u8; 3]);
        let mut labels = Grid::new(w, h, scene.num_labels);
        for (x, y, hit) in hits.enumerate() {
            let Some((d, p)) = hit else { continue };
            let obj = &scene.objects[p.object];
            let mut z = *d;
            if let Some(n) = &depth_noise {
                z = (z + n.sample(&mut rng)).max(1e-3);
            }
            depth.set(x, y, z);
            color.set(x, y, texture(obj.base_color, &p.local));
            let mut label = obj.class;
            if index > 0 && self.noise.erase_class_after_first == Some(label) {
                label = scene.num_labels;
            }
            if self.noise.label_flip_fraction > 0.0
                && rng.random::<f64>() < self.noise.label_flip_fraction
            {
                let other = rng.random_range(1..scene.num_labels);
                label = if other >= label { other + 1 } else { other };
            }
            labels.set(x, y, label);
        }

        let flow = (index > 0).then(|| FlowMap {
            flow: Grid::from_fn(w, h, |x, y| {
                let (_, p) = hits.get(x, y).as_ref()?;
                let prev = k.project(&scene.world_position(p, index - 1))?;
                Some(Vector2::new(x as f64, y as f64) - prev)
            }),
        });

        Ok(SyntheticFrame {
            raw: RawFrame {
                index,
                depth,
                color,
                labels,
            },
            flow,
            truth: GroundTruthFrame {
                index,
                anchors: hits.map(|h| h.map(|(_, p)| p)),
                poses: scene.objects.iter().map(|o| o.poses[index]).collect(),
            },
        })
    }
}

impl Iterator for SyntheticStream {
    type Item = Result<SyntheticFrame, MeasurementError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.scene.frames {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.render_frame(i))
    }
}

/// Starts generating a scene.
pub fn generate_synthetic(
    scene: SyntheticScene,
    intrinsics: CameraIntrinsics,
    noise: NoiseConfig,
) -> Result<SyntheticStream, MeasurementError> {
    scene.validate()?;
    intrinsics.validate()?;
    if !(0.0..=1.0).contains(&noise.label_flip_fraction) || noise.depth_std < 0.0 {
        return Err(MeasurementError::Generation(
            "invalid noise configuration".into(),
        ));
    }
    Ok(SyntheticStream {
        scene: Arc::new(scene),
        intrinsics,
        noise,
        next: 0,
    })
}

#[derive(Serialize)]
struct GtObject<'a> {
    name: &'a str,
    class: u16,
    /// Unit quaternion `[w, x, y, z]`.
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize)]
struct GtSample {
    pixel: [usize; 2],
    point: SurfacePoint,
    position: [f64; 3],
    previous_position: Option<[f64; 3]>,
}

#[derive(Serialize)]
struct GtFrame<'a> {
    index: usize,
    objects: Vec<GtObject<'a>>,
    samples: Vec<GtSample>,
}

#[derive(Serialize)]
struct GtFile<'a> {
    scene: SceneKind,
    frames: Vec<GtFrame<'a>>,
}

/// Renders the whole stream into a sequence directory plus
/// `ground_truth.json` (per-frame object poses and a sparse grid of
/// correspondence samples). Returns the number of frames written.
pub fn write_synthetic_sequence(
    stream: SyntheticStream,
    dir: &Path,
    sample_stride: usize,
) -> Result<usize, MeasurementError> {
    let writer = SequenceWriter::create(dir, stream.intrinsics(), 0.001)?;
    let scene = Arc::clone(stream.scene());
    let mut frames = Vec::new();
    for frame in stream {
        let frame = frame?;
        writer.write_frame(&frame.raw, frame.flow.as_ref())?;
        let t = frame.truth.index;
        let objects = scene
            .objects
            .iter()
            .zip(&frame.truth.poses)
            .map(|(o, pose)| {
                let q = pose.rotation.quaternion();
                GtObject {
                    name: &o.name,
                    class: o.class,
                    rotation: [q.w, q.i, q.j, q.k],
                    translation: pose.translation.vector.into(),
                }
            })
            .collect();
        let stride = sample_stride.max(1);
        let samples = frame
            .truth
            .anchors
            .enumerate()
            .filter(|(x, y, _)| x % stride == 0 && y % stride == 0)
            .filter_map(|(x, y, p)| {
                let p = (*p)?;
                Some(GtSample {
                    pixel: [x, y],
                    point: p,
                    position: scene.world_position(&p, t).into(),
                    previous_position: (t > 0).then(|| scene.world_position(&p, t - 1).into()),
                })
            })
            .collect();
        frames.push(GtFrame {
            index: t,
            objects,
            samples,
        });
    }
    let count = frames.len();
    let path = dir.join("ground_truth.json");
    let text = serde_json::to_string(&GtFile {
        scene: scene.kind,
        frames,
    })
    .expect("serializable ground truth");
    std::fs::write(&path, text).map_err(|source| MeasurementError::Io { path, source })?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(kind: SceneKind, noise: NoiseConfig) -> SyntheticStream {
        generate_synthetic(
            SyntheticScene::preset(kind),
            SyntheticScene::default_intrinsics(),
            noise,
        )
        .unwrap()
    }

    #[test]
    fn every_preset_generates() {
        for kind in SceneKind::ALL {
            let frames: Vec<_> = stream(kind, NoiseConfig::default())
                .collect::<Result<_, _>>()
                .unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
            assert_eq!(frames.len(), SyntheticScene::preset(kind).frames);
            assert!(frames[0].flow.is_none());
            assert!(frames[1..].iter().all(|f| f.flow.is_some()));
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let f = stream(SceneKind::Static, NoiseConfig::default())
            .render_frame(1)
            .unwrap();
        let flow = f.flow.unwrap();
        let mut n = 0;
        for v in flow.flow.iter().flatten() {
            assert!(v.norm() < 1e-9);
            n += 1;
        }
        assert!(n > 1000);
    }

    #[test]
    fn in_plane_translation_gives_uniform_flow() {
        // 3 px per frame at 1 m with a 160 px focal length.
        let mut scene = SyntheticScene::preset_with_frames(SceneKind::InPlane, 2);
        let step = Vector3::new(3.0 / 160.0, 0.0, 0.0);
        scene.objects[0].poses =
            linear_poses(2, facing_camera(), Vector3::new(0.0, 0.0, 1.0), step);
        let s = generate_synthetic(
            scene,
            SyntheticScene::default_intrinsics(),
            NoiseConfig::default(),
        )
        .unwrap();
        let flow = s.render_frame(1).unwrap().flow.unwrap();
        let vectors: Vec<_> = flow.flow.iter().flatten().collect();
        assert!(vectors.len() > 1000);
        for v in vectors {
            assert!((v.x - 3.0).abs() < 1e-9 && v.y.abs() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn flow_carries_surface_points_between_frames() {
        for kind in [SceneKind::Lift, SceneKind::Sheet, SceneKind::Pass] {
            let s = stream(kind, NoiseConfig::default());
            let k = *s.intrinsics();
            let scene = Arc::clone(s.scene());
            let prev = s.render_frame(3).unwrap();
            let next = s.render_frame(4).unwrap();
            let flow = next.flow.unwrap();
            let mut checked = 0;
            for (x, y, p) in prev.truth.anchors.enumerate() {
                let Some(p) = p else { continue };
                let q = k.project(&scene.world_position(p, 4)).unwrap();
                let (qx, qy) = (q.x.round() as i64, q.y.round() as i64);
                let Some(Some(anchor)) = next.truth.anchors.checked(qx, qy) else {
                    continue;
                };
                if anchor.object != p.object {
                    continue; // occluded in the next frame
                }
                let f = flow.at(qx as usize, qy as usize).unwrap();
                let landed = Vector2::new(x as f64, y as f64) + f;
                assert!(
                    (landed.x - q.x).abs() <= 0.51 && (landed.y - q.y).abs() <= 0.51,
                    "{}: {landed:?} vs {q:?}",
                    kind.name()
                );
                checked += 1;
            }
            assert!(checked > 1000);
        }
    }

    #[test]
    fn label_erasure_replaces_cup_after_first_frame() {
        let s = stream(
            SceneKind::Lift,
            NoiseConfig {
                erase_class_after_first: Some(CLASS_CUP),
                ..Default::default()
            },
        );
        let first = s.render_frame(0).unwrap();
        assert!(first.raw.labels.iter().any(|&l| l == CLASS_CUP));
        for t in 1..3 {
            let f = s.render_frame(t).unwrap();
            assert!(f.raw.labels.iter().all(|&l| l != CLASS_CUP));
            for (x, y, p) in f.truth.anchors.enumerate() {
                if let Some(p) = p {
                    if s.scene().objects[p.object].class == CLASS_CUP {
                        assert_eq!(*f.raw.labels.get(x, y), CLASS_UNRECOGNIZED);
                    }
                }
            }
        }
    }

    #[test]
    fn label_flips_hit_requested_fraction() {
        let s = stream(
            SceneKind::InPlane,
            NoiseConfig {
                label_flip_fraction: 0.2,
                seed: 7,
                ..Default::default()
            },
        );
        let f = s.render_frame(0).unwrap();
        let valid = f.raw.depth.iter().filter(|&&d| d > 0.0).count();
        let flipped = f
            .raw
            .depth
            .iter()
            .zip(f.raw.labels.iter())
            .filter(|(&d, &l)| d > 0.0 && l != CLASS_BOOK)
            .count();
        let frac = flipped as f64 / valid as f64;
        assert!((frac - 0.2).abs() < 0.03, "{frac}");
        assert!(f.raw.labels.iter().all(|&l| (1..=NUM_LABELS).contains(&l)));
    }

    #[test]
    fn object_leaving_view_is_an_error() {
        let mut scene = SyntheticScene::preset_with_frames(SceneKind::InPlane, 3);
        scene.objects[0].poses[2] =
            Isometry3::from_parts(Translation3::new(5.0, 0.0, 1.0), facing_camera());
        let s = generate_synthetic(
            scene,
            SyntheticScene::default_intrinsics(),
            NoiseConfig::default(),
        )
        .unwrap();
        let results: Vec<_> = s.collect();
        assert!(results[1].is_ok());
        let err = results[2].as_ref().unwrap_err().to_string();
        assert!(err.contains("book") && err.contains("frame 2"), "{err}");
    }

    #[test]
    fn single_frame_scene_is_rejected() {
        let scene = SyntheticScene::preset_with_frames(SceneKind::Lift, 1);
        assert!(generate_synthetic(
            scene,
            SyntheticScene::default_intrinsics(),
            NoiseConfig::default()
        )
        .is_err());
    }

    #[test]
    fn ground_truth_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(
            SyntheticScene::preset_with_frames(SceneKind::Lift, 3),
            SyntheticScene::default_intrinsics(),
            NoiseConfig::default(),
        )
        .unwrap();
        assert_eq!(write_synthetic_sequence(s, dir.path(), 16).unwrap(), 3);
        let gt: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(gt["frames"].as_array().unwrap().len(), 3);
        assert_eq!(gt["frames"][1]["objects"][1]["name"], "cup");
        assert!(dir.path().join("frame_000002.flow").is_file());
        assert!(!dir.path().join("frame_000000.flow").exists());
    }
}
