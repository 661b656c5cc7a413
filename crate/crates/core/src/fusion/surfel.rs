use std::io::{self, Write};

use nalgebra::Vector3;

use crate::measurement::SurfacePoint;

#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub vertex: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// RGB in `0..=255`, kept fractional for averaging.
    pub color: Vector3<f64>,
    pub radius: f64,
    /// Observation count, also the fusion weight.
    pub count: u32,
    /// Probability per class; entry `k - 1` is class `k`.
    pub label_dist: Vec<f64>,
    pub last_seen: usize,
    pub born: usize,
    /// Ground-truth surface point the surfel was created from, when known.
    pub anchor: Option<SurfacePoint>,
}

impl Surfel {
    /// New surfel with a one-hot distribution on `label`.
    pub fn new(
        vertex: Vector3<f64>,
        normal: Vector3<f64>,
        color: [u8; 3],
        radius: f64,
        label: u16,
        num_labels: u16,
        frame: usize,
    ) -> Self {
        let mut label_dist = vec![0.0; num_labels as usize];
        if let Some(p) = label
            .checked_sub(1)
            .and_then(|i| label_dist.get_mut(i as usize))
        {
            *p = 1.0;
        }
        Self {
            vertex,
            normal,
            color: Vector3::new(color[0] as f64, color[1] as f64, color[2] as f64),
            radius,
            count: 1,
            label_dist,
            last_seen: frame,
            born: frame,
            anchor: None,
        }
    }

    pub fn color_u8(&self) -> [u8; 3] {
        let c = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        [c(self.color.x), c(self.color.y), c(self.color.z)]
    }

    /// Most probable class, ties to the lower class id.
    pub fn label(&self) -> u16 {
        let mut best = 0;
        for (i, &p) in self.label_dist.iter().enumerate() {
            if p > self.label_dist[best] {
                best = i;
            }
        }
        best as u16 + 1
    }

    pub fn label_confidence(&self) -> f64 {
        self.label_dist.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfelGeometry {
    pub surfels: Vec<Surfel>,
}

impl From<Vec<Surfel>> for SurfelGeometry {
    fn from(surfels: Vec<Surfel>) -> Self {
        Self { surfels }
    }
}

impl SurfelGeometry {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.surfels.iter().map(|s| s.vertex).collect()
    }

    /// Drops surfels whose `remove` flag is set. Returns the old-to-new index
    /// map.
    pub fn compact(&mut self, remove: &[bool]) -> Vec<Option<usize>> {
        let mut remap = Vec::with_capacity(self.surfels.len());
        let mut next = 0;
        for &r in remove {
            remap.push((!r).then(|| {
                next += 1;
                next - 1
            }));
        }
        let mut i = 0;
        self.surfels.retain(|_| {
            i += 1;
            !remove[i - 1]
        });
        remap
    }

    /// ASCII PLY with normals, color, radius and the argmax label.
    pub fn write_ply(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", self.len())?;
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(out, "property float {p}")?;
        }
        for p in ["red", "green", "blue"] {
            writeln!(out, "property uchar {p}")?;
        }
        writeln!(out, "property float radius\nproperty uchar label\nproperty float label_confidence\nend_header")?;
        for s in &self.surfels {
            let [r, g, b] = s.color_u8();
            writeln!(
                out,
                "{} {} {} {} {} {} {r} {g} {b} {} {} {}",
                s.vertex.x,
                s.vertex.y,
                s.vertex.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.radius,
                s.label(),
                s.label_confidence()
            )?;
        }
        Ok(())
    }
}
