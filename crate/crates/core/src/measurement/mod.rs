//! Measurement frames: camera model, depth denoising, vertex/normal maps,
//! optical-flow maps, on-disk sequences and the synthetic scene generator.

mod io;
pub mod synthetic;

use std::path::PathBuf;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

pub use io::{
    load_sequence, read_flow, read_intrinsics, write_flow, IntrinsicsFile, SequenceReader,
    SequenceWriter, FLOW_MAGIC,
};
pub use synthetic::{
    generate_synthetic, write_synthetic_sequence, GroundTruthFrame, NoiseConfig, SceneKind,
    SurfacePoint, SyntheticFrame, SyntheticScene, SyntheticStream,
};

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("frame {frame}: cannot read {path}: {reason}")]
    Ingestion {
        frame: usize,
        path: PathBuf,
        reason: String,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Pinhole intrinsics. Pixel `(u, v)` is the pixel center; `u` grows to the
/// right and `v` downwards, the camera looks along `+z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, MeasurementError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), MeasurementError> {
        let bad = |m: &str| Err(MeasurementError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be non-empty");
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return bad("principal point must lie inside the image");
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a camera-frame point, `None` behind
    /// the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0)
            .then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Viewing ray through a (sub-)pixel, scaled to unit depth.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.back_project(u, v, 1.0)
    }
}

/// Raw sensor-like frame before vertex/normal extraction. Depth in meters,
/// `0` marks a missing measurement.
#[derive(Clone, Debug)]
pub struct RawFrame {
    pub index: usize,
    pub depth: Grid<f64>,
    pub color: Grid<[u8; 3]>,
    pub labels: Grid<u16>,
}

/// Options applied when turning a [`RawFrame`] into a [`MeasurementFrame`].
#[derive(Clone, Debug, PartialEq)]
pub struct IngestConfig {
    /// Gaussian sigma in pixels; `None` disables denoising.
    pub denoise_sigma: Option<f64>,
    /// Neighbors further apart in depth than this are treated as belonging to
    /// a different surface (normals, denoising).
    pub max_depth_jump: f64,
    /// Number of label classes including the unrecognized class (`H + 1`).
    pub num_labels: u16,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            denoise_sigma: Some(1.0),
            max_depth_jump: 0.03,
            num_labels: 6,
        }
    }
}

/// A measurement pixel viewed as a surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasuredSurfel {
    pub pixel: (usize, usize),
    pub vertex: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    pub label: u16,
}

/// Per-pixel vertex, normal, color and label maps of one frame.
#[derive(Clone, Debug)]
pub struct MeasurementFrame {
    pub index: usize,
    pub intrinsics: CameraIntrinsics,
    pub num_labels: u16,
    pub vertices: Grid<Vector3<f64>>,
    pub normals: Grid<Vector3<f64>>,
    pub colors: Grid<[u8; 3]>,
    pub labels: Grid<u16>,
    pub valid: Grid<bool>,
}

impl MeasurementFrame {
    /// Back-projects depth and estimates normals. A pixel is valid when it has
    /// positive depth and a normal could be estimated.
    pub fn build(
        raw: &RawFrame,
        intrinsics: &CameraIntrinsics,
        config: &IngestConfig,
    ) -> Result<Self, MeasurementError> {
        let (w, h) = raw.depth.dims();
        if (w, h) != (intrinsics.width, intrinsics.height) {
            return Err(MeasurementError::Format(format!(
                "frame {}: depth is {w}x{h}, intrinsics say {}x{}",
                raw.index, intrinsics.width, intrinsics.height
            )));
        }
        if !raw.color.same_dims(&raw.depth) || !raw.labels.same_dims(&raw.depth) {
            return Err(MeasurementError::Format(format!(
                "frame {}: depth, color and label maps differ in size",
                raw.index
            )));
        }
        if let Some((x, y, l)) = raw
            .labels
            .enumerate()
            .find(|(_, _, &l)| l == 0 || l > config.num_labels)
        {
            return Err(MeasurementError::Format(format!(
                "frame {}: label {l} at ({x},{y}) outside 1..={}",
                raw.index, config.num_labels
            )));
        }

        let depth = match config.denoise_sigma {
            Some(sigma) if sigma > 0.0 => {
                denoise_depth_guarded(&raw.depth, sigma, config.max_depth_jump)
            }
            _ => raw.depth.clone(),
        };
        let vertices = Grid::from_fn(w, h, |x, y| {
            intrinsics.back_project(x as f64, y as f64, *depth.get(x, y))
        });
        let has_depth = depth.map(|&d| is_valid_depth(d));
        let (normals, valid) = estimate_normals(&vertices, &has_depth, config.max_depth_jump);

        Ok(Self {
            index: raw.index,
            intrinsics: *intrinsics,
            num_labels: config.num_labels,
            vertices,
            normals,
            colors: raw.color.clone(),
            labels: raw.labels.clone(),
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.vertices.width()
    }

    pub fn height(&self) -> usize {
        self.vertices.height()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        *self.valid.get(x, y)
    }

    pub fn surfel_at(&self, x: usize, y: usize) -> Option<MeasuredSurfel> {
        self.is_valid(x, y).then(|| MeasuredSurfel {
            pixel: (x, y),
            vertex: *self.vertices.get(x, y),
            normal: *self.normals.get(x, y),
            color: *self.colors.get(x, y),
            label: *self.labels.get(x, y),
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Dense optical flow on the target frame's pixel grid: `flow(u)` is the
/// displacement from where the surface now seen at `u` was in the previous
/// frame, so the previous location is `u - flow(u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub flow: Grid<Option<Vector2<f64>>>,
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow: Grid::new(width, height, Some(Vector2::zeros())),
        }
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<Vector2<f64>> {
        *self.flow.get(x, y)
    }
}

#[inline]
pub(crate) fn is_valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

/// Gaussian depth filter. Invalid pixels (non-positive depth) are left out of
/// every kernel average and stay invalid.
pub fn denoise_depth(raw: &Grid<f64>, kernel_sigma: f64) -> Grid<f64> {
    denoise_depth_guarded(raw, kernel_sigma, f64::INFINITY)
}

/// [`denoise_depth`] that additionally ignores neighbors differing from the
/// center pixel by more than `max_jump`, so depth edges are not smeared.
pub fn denoise_depth_guarded(raw: &Grid<f64>, kernel_sigma: f64, max_jump: f64) -> Grid<f64> {
    assert!(kernel_sigma > 0.0, "kernel sigma must be positive");
    let radius = (3.0 * kernel_sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * kernel_sigma * kernel_sigma)).exp())
        .collect();
    let (w, h) = raw.dims();
    Grid::from_fn(w, h, |x, y| {
        let center = *raw.get(x, y);
        if !is_valid_depth(center) {
            return center;
        }
        let mut sum = 0.0;
        let mut weight = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let Some(&d) = raw.checked(x as i64 + dx, y as i64 + dy) else {
                    continue;
                };
                if !is_valid_depth(d) || (d - center).abs() > max_jump {
                    continue;
                }
                let k = taps[(dx + radius) as usize] * taps[(dy + radius) as usize];
                sum += k * (d - center);
                weight += k;
            }
        }
        center + sum / weight
    })
}

/// Normals from central differences of the vertex map (one-sided at borders
/// and depth edges), oriented toward the camera.
pub fn estimate_normals(
    vertices: &Grid<Vector3<f64>>,
    has_depth: &Grid<bool>,
    max_depth_jump: f64,
) -> (Grid<Vector3<f64>>, Grid<bool>) {
    let (w, h) = vertices.dims();
    let mut normals = Grid::new(w, h, Vector3::zeros());
    let mut valid = Grid::new(w, h, false);

    let usable = |x: i64, y: i64, z: f64| -> Option<Vector3<f64>> {
        match has_depth.checked(x, y) {
            Some(true) => {
                let v = *vertices.get(x as usize, y as usize);
                ((v.z - z).abs() <= max_depth_jump).then_some(v)
            }
            _ => None,
        }
    };
    let diff = |c: Vector3<f64>, prev: Option<Vector3<f64>>, next: Option<Vector3<f64>>| match (
        prev, next,
    ) {
        (Some(p), Some(n)) => Some(n - p),
        (None, Some(n)) => Some(n - c),
        (Some(p), None) => Some(c - p),
        (None, None) => None,
    };

    for y in 0..h {
        for x in 0..w {
            if !*has_depth.get(x, y) {
                continue;
            }
            let c = *vertices.get(x, y);
            let (xi, yi) = (x as i64, y as i64);
            let du = diff(c, usable(xi - 1, yi, c.z), usable(xi + 1, yi, c.z));
            let dv = diff(c, usable(xi, yi - 1, c.z), usable(xi, yi + 1, c.z));
            let (Some(du), Some(dv)) = (du, dv) else {
                continue;
            };
            let n = du.cross(&dv);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            normals.set(x, y, n);
            valid.set(x, y, true);
        }
    }
    (normals, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(160.0, 150.0, 80.0, 60.0, 160, 120).unwrap()
    }

    #[test]
    fn back_projection_matches_pinhole() {
        let k = intrinsics();
        let v = k.back_project(100.0, 20.0, 2.0);
        assert_relative_eq!(
            v,
            Vector3::new(20.0 * 2.0 / 160.0, -40.0 * 2.0 / 150.0, 2.0)
        );
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -0.5, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn project_inverts_back_project(u in 0.0f64..160.0, v in 0.0f64..120.0, d in 0.1f64..10.0) {
            let k = intrinsics();
            let p = k.project(&k.back_project(u, v, d)).unwrap();
            prop_assert!((p.x - u).abs() < 1e-9 && (p.y - v).abs() < 1e-9);
        }

        #[test]
        fn denoise_stays_within_input_range(
            values in proptest::collection::vec(0.0f64..3.0, 64),
            sigma in 0.3f64..2.5,
        ) {
            let g = Grid::from_vec(8, 8, values).unwrap();
            let valid: Vec<f64> = g.iter().copied().filter(|&d| is_valid_depth(d)).collect();
            let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = denoise_depth(&g, sigma);
            for (a, b) in g.iter().zip(out.iter()) {
                if is_valid_depth(*a) {
                    prop_assert!(*b >= lo - 1e-12 && *b <= hi + 1e-12);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn denoise_preserves_constant_plane() {
        let g = Grid::new(9, 7, 1.25);
        let out = denoise_depth(&g, 1.0);
        assert!(out.iter().all(|&d| (d - 1.25).abs() < 1e-12));
        assert_eq!(denoise_depth(&out, 1.0), out);
    }

    #[test]
    fn denoise_reduces_spike() {
        let mut g = Grid::new(9, 9, 1.0);
        g.set(4, 4, 1.05);
        let out = denoise_depth(&g, 1.0);
        let amp = out.get(4, 4) - 1.0;
        assert!(amp > 0.0 && amp < 0.05);
    }

    #[test]
    fn denoise_keeps_invalid_pixels_invalid() {
        let g = Grid::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
        let out = denoise_depth(&g, 1.0);
        for (a, b) in g.iter().zip(out.iter()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            } else {
                assert!((b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guarded_denoise_does_not_cross_depth_edges() {
        let g = Grid::from_fn(10, 4, |x, _| if x < 5 { 1.0 } else { 1.5 });
        let out = denoise_depth_guarded(&g, 1.0, 0.03);
        assert_eq!(out, g);
    }

    #[test]
    fn zero_depth_is_invalid_and_plane_normals_face_camera() {
        let k = CameraIntrinsics::new(100.0, 100.0, 5.0, 5.0, 10, 10).unwrap();
        let mut depth = Grid::new(10, 10, 2.0);
        depth.set(3, 3, 0.0);
        let raw = RawFrame {
            index: 0,
            depth,
            color: Grid::new(10, 10, [0; 3]),
            labels: Grid::new(10, 10, 1),
        };
        let cfg = IngestConfig {
            denoise_sigma: None,
            ..Default::default()
        };
        let f = MeasurementFrame::build(&raw, &k, &cfg).unwrap();
        assert!(!f.is_valid(3, 3));
        for (x, y, &ok) in f.valid.enumerate() {
            if ok {
                let n = f.normals.get(x, y);
                assert!((n.norm() - 1.0).abs() < 1e-6);
                assert_relative_eq!(*n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
            }
        }
        assert_eq!(f.valid_count(), 99);
    }

    #[test]
    fn build_rejects_out_of_range_labels_and_bad_dims() {
        let k = CameraIntrinsics::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        let mut raw = RawFrame {
            index: 3,
            depth: Grid::new(4, 4, 1.0),
            color: Grid::new(4, 4, [0; 3]),
            labels: Grid::new(4, 4, 1),
        };
        raw.labels.set(1, 1, 9);
        let err = MeasurementFrame::build(&raw, &k, &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("label 9"));
        raw.labels = Grid::new(4, 3, 1);
        assert!(MeasurementFrame::build(&raw, &k, &IngestConfig::default()).is_err());
    }
}
