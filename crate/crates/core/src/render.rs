//! Point rasterization of surfel geometry with a z-buffer.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::fusion::SurfelGeometry;
use crate::measurement::CameraIntrinsics;
use crate::Grid;

/// Resolution multiplier of the alignment render.
pub const ALIGN_SCALE: usize = 1;
/// Resolution multiplier of the geometry-update render.
pub const FUSION_SCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderMaps {
    pub scale: usize,
    pub color: Grid<[u8; 3]>,
    pub vertex: Grid<Vector3<f64>>,
    pub normal: Grid<Vector3<f64>>,
    /// Winning surfel per pixel, `None` where nothing landed.
    pub index: Grid<Option<u32>>,
}

impl RenderMaps {
    pub fn width(&self) -> usize {
        self.index.width()
    }

    pub fn height(&self) -> usize {
        self.index.height()
    }

    pub fn occupied(&self) -> usize {
        self.index.iter().filter(|i| i.is_some()).count()
    }

    #[inline]
    pub fn index_at(&self, x: i64, y: i64) -> Option<u32> {
        self.index.checked(x, y).copied().flatten()
    }
}

/// Pixel of a camera-frame point at `scale`, `None` behind the camera or
/// outside the image.
#[inline]
pub fn project_pixel(
    k: &CameraIntrinsics,
    scale: usize,
    p: &Vector3<f64>,
) -> Option<(usize, usize)> {
    if p.z.is_nan() || p.z <= 0.0 {
        return None;
    }
    let s = scale as f64;
    let u = (s * (k.fx * p.x / p.z + k.cx)).round();
    let v = (s * (k.fy * p.y / p.z + k.cy)).round();
    let (w, h) = ((k.width * scale) as f64, (k.height * scale) as f64);
    (u >= 0.0 && v >= 0.0 && u < w && v < h).then_some((u as usize, v as usize))
}

/// Rasterizes front-facing surfels; nearest depth wins, equal depths go to
/// the lower index.
pub fn render(geometry: &SurfelGeometry, k: &CameraIntrinsics, scale: usize) -> RenderMaps {
    let (w, h) = (k.width * scale, k.height * scale);
    let hits: Vec<Option<(usize, f64)>> = geometry
        .surfels
        .par_iter()
        .map(|s| {
            // Back-facing: normal points away from the camera.
            if s.normal.dot(&s.vertex) >= 0.0 {
                return None;
            }
            project_pixel(k, scale, &s.vertex).map(|(x, y)| (y * w + x, s.vertex.z))
        })
        .collect();

    let mut depth = vec![f64::INFINITY; w * h];
    let mut index: Vec<Option<u32>> = vec![None; w * h];
    for (i, hit) in hits.iter().enumerate() {
        if let Some((pix, z)) = *hit {
            // Ascending index order: strict comparison keeps the lower index on ties.
            if z < depth[pix] {
                depth[pix] = z;
                index[pix] = Some(i as u32);
            }
        }
    }

    let index = Grid::from_vec(w, h, index).expect("dimensions");
    let pick = |f: &dyn Fn(usize) -> Vector3<f64>| {
        index.map(|i| i.map_or_else(Vector3::zeros, |i| f(i as usize)))
    };
    let surfels = &geometry.surfels;
    let vertex = pick(&|i| surfels[i].vertex);
    let normal = pick(&|i| surfels[i].normal);
    let color = index.map(|i| i.map_or([0; 3], |i| surfels[i as usize].color_u8()));
    RenderMaps {
        scale,
        color,
        vertex,
        normal,
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Surfel;
    use rand::{Rng, SeedableRng};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn surfel(v: Vector3<f64>) -> Surfel {
        Surfel::new(
            v,
            Vector3::new(0.0, 0.0, -1.0),
            [10, 20, 30],
            0.001,
            1,
            3,
            0,
        )
    }

    #[test]
    fn on_axis_surfel_lands_on_principal_point() {
        let g = SurfelGeometry::from(vec![surfel(Vector3::new(0.0, 0.0, 1.0))]);
        let r = render(&g, &intrinsics(), 1);
        assert_eq!(r.occupied(), 1);
        assert_eq!(*r.index.get(320, 240), Some(0));
        assert_eq!(*r.color.get(320, 240), [10, 20, 30]);
    }

    #[test]
    fn nearer_surfel_wins() {
        let far = surfel(Vector3::new(0.0, 0.0, 2.0));
        let near = surfel(Vector3::new(0.0, 0.0, 1.0));
        let g = SurfelGeometry::from(vec![far, near]);
        let r = render(&g, &intrinsics(), 1);
        assert_eq!(*r.index.get(320, 240), Some(1));
        assert_eq!(r.vertex.get(320, 240).z, 1.0);
    }

    #[test]
    fn equal_depth_goes_to_lower_index() {
        let g = SurfelGeometry::from(vec![surfel(Vector3::new(0.0, 0.0, 1.0)); 3]);
        let r = render(&g, &intrinsics(), 4);
        assert_eq!(*r.index.get(1280, 960), Some(0));
    }

    #[test]
    fn back_facing_and_behind_are_skipped() {
        let mut back = surfel(Vector3::new(0.0, 0.0, 1.0));
        back.normal = Vector3::z();
        let behind = surfel(Vector3::new(0.0, 0.0, -1.0));
        let r = render(&SurfelGeometry::from(vec![back, behind]), &intrinsics(), 1);
        assert_eq!(r.occupied(), 0);
    }

    fn random_geometry(n: usize, seed: u64) -> SurfelGeometry {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SurfelGeometry::from(
            (0..n)
                .map(|_| {
                    // Coarse depth steps create exact ties.
                    let z = 1.0 + (rng.random_range(0..4) as f64) * 0.25;
                    surfel(Vector3::new(
                        rng.random_range(-0.3..0.3) * z,
                        rng.random_range(-0.2..0.2) * z,
                        z,
                    ))
                })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn finer_scale_never_loses_pixels() {
        let g = random_geometry(5000, 3);
        let k = intrinsics();
        assert!(render(&g, &k, 4).occupied() >= render(&g, &k, 1).occupied());
    }

    #[test]
    fn isolated_surfel_round_trips() {
        let v = Vector3::new(0.0123, -0.0456, 1.37);
        let r = render(&SurfelGeometry::from(vec![surfel(v)]), &intrinsics(), 4);
        let (x, y) = project_pixel(&intrinsics(), 4, &v).unwrap();
        assert_eq!(*r.vertex.get(x, y), v);
    }

    #[test]
    fn winners_match_full_sort() {
        let g = random_geometry(10_000, 7);
        let k = intrinsics();
        let r = render(&g, &k, 1);
        let mut order: Vec<(usize, f64, usize)> = g
            .surfels
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                project_pixel(&k, 1, &s.vertex).map(|(x, y)| (y * k.width + x, s.vertex.z, i))
            })
            .collect();
        order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        order.dedup_by_key(|e| e.0);
        let mut expected = vec![None; k.width * k.height];
        for (pix, _, i) in order {
            expected[pix] = Some(i as u32);
        }
        assert_eq!(r.index.data(), &expected[..]);
    }

    #[test]
    fn deterministic() {
        let g = random_geometry(8000, 9);
        let k = intrinsics();
        assert_eq!(render(&g, &k, 4), render(&g, &k, 4));
    }
}
