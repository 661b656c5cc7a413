use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};

/// Rigid transform as a dual quaternion `real + ε dual`.
///
/// A valid rigid transform has a unit real part and a dual part orthogonal to
/// it; [`DualQuaternion::normalize`] restores both after blending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl Default for DualQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl DualQuaternion {
    pub fn identity() -> Self {
        Self {
            real: Quaternion::identity(),
            dual: Quaternion::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    /// `x -> rot * x + t`.
    pub fn from_rotation_translation(rot: &UnitQuaternion<f64>, t: &Vector3<f64>) -> Self {
        let r = *rot.quaternion();
        let tq = Quaternion::from_imag(*t);
        Self {
            real: r,
            dual: tq * r * 0.5,
        }
    }

    pub fn from_translation(t: &Vector3<f64>) -> Self {
        Self::from_rotation_translation(&UnitQuaternion::identity(), t)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::from_rotation_translation(&iso.rotation, &iso.translation.vector)
    }

    /// Increment built from an axis-angle rotation vector followed by a
    /// translation: `x -> exp(omega) x + tau`.
    pub fn from_increment(omega: &Vector3<f64>, tau: &Vector3<f64>) -> Self {
        Self::from_rotation_translation(&UnitQuaternion::from_scaled_axis(*omega), tau)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            real: self.real * other.real,
            dual: self.real * other.dual + self.dual * other.real,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            real: self.real * s,
            dual: self.dual * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            real: self.real + other.real,
            dual: self.dual + other.dual,
        }
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// Unit real part, dual part with its real-parallel component removed.
    /// `None` when the real part vanishes.
    pub fn normalize(&self) -> Option<Self> {
        let norm = self.real.norm();
        if norm.is_nan() || norm <= 1e-300 || !norm.is_finite() {
            return None;
        }
        let real = self.real / norm;
        let dual = self.dual / norm;
        let dual = dual - real * real.dot(&dual);
        Some(Self { real, dual })
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.real.norm() - 1.0).abs() <= tol && self.real.dot(&self.dual).abs() <= tol
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.real)
    }

    /// Translation `2 vec(dual * conj(real)) / |real|^2`; exact for any
    /// non-zero real part.
    pub fn translation(&self) -> Vector3<f64> {
        (self.dual * self.real.conjugate()).imag() * (2.0 / self.real.norm_squared())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation()), self.rotation())
    }

    /// `[rw, rx, ry, rz, dw, dx, dy, dz]`.
    pub fn to_array(&self) -> [f64; 8] {
        let (r, d) = (&self.real, &self.dual);
        [r.w, r.i, r.j, r.k, d.w, d.i, d.j, d.k]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            real: Quaternion::new(a[0], a[1], a[2], a[3]),
            dual: Quaternion::new(a[4], a[5], a[6], a[7]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn round_trips_rotation_and_translation() {
        let rot = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let t = Vector3::new(0.5, -1.0, 2.0);
        let q = DualQuaternion::from_rotation_translation(&rot, &t);
        assert!(q.is_normalized(1e-12));
        assert_relative_eq!(q.translation(), t, epsilon = 1e-12);
        assert_relative_eq!(q.rotation().angle_to(&rot), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_about_z() {
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let q = DualQuaternion::from_rotation_translation(&rot, &Vector3::zeros());
        assert_relative_eq!(
            q.transform_point(&Vector3::x()),
            Vector3::y(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn normalize_fails_on_zero_real_part() {
        let q = DualQuaternion::identity().scale(0.0);
        assert!(q.normalize().is_none());
    }

    proptest! {
        #[test]
        fn compose_matches_isometry_product(
            a in proptest::array::uniform6(-1.0f64..1.0),
            b in proptest::array::uniform6(-1.0f64..1.0),
            p in proptest::array::uniform3(-2.0f64..2.0),
        ) {
            let qa = DualQuaternion::from_increment(&Vector3::new(a[0], a[1], a[2]), &Vector3::new(a[3], a[4], a[5]));
            let qb = DualQuaternion::from_increment(&Vector3::new(b[0], b[1], b[2]), &Vector3::new(b[3], b[4], b[5]));
            let p = Vector3::from(p);
            let direct = qa.transform_point(&qb.transform_point(&p));
            let composed = qa.compose(&qb).transform_point(&p);
            prop_assert!((direct - composed).norm() < 1e-10);
            prop_assert!(qa.compose(&qb).is_normalized(1e-10));
        }

        #[test]
        fn normalize_restores_rigid_invariants(
            r in proptest::array::uniform4(-1.0f64..1.0),
            d in proptest::array::uniform4(-1.0f64..1.0),
        ) {
            let q = DualQuaternion::from_array([r[0] + 2.0, r[1], r[2], r[3], d[0], d[1], d[2], d[3]]);
            let n = q.normalize().unwrap();
            prop_assert!(n.is_normalized(1e-9));
            // Translation is unaffected by removing the parallel dual component.
            prop_assert!((n.translation() - q.translation()).norm() < 1e-9);
        }
    }
}
