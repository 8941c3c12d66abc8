//! Rotation algebra on SO(3).
//!
//! Rotations are stored as unit quaternions in canonical form (non-negative
//! scalar part) and materialized as 3x3 matrices only on demand. Angles cross
//! the public API in degrees; everything internal is radians.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Rotation angles this close to pi (radians) are rejected by [`UnitRotation::log_map`].
pub const NEAR_PI_BAND: f64 = 1e-6;

/// An element of SO(3), represented as a unit quaternion `(w, x, y, z)`
/// with `w >= 0` (q and -q denote the same rotation; the canonical
/// representative is kept).
#[derive(Debug, Clone, Copy)]
pub struct UnitRotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitRotation {
    pub const IDENTITY: UnitRotation = UnitRotation {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a rotation from quaternion components in `(qw, qx, qy, qz)` order,
    /// normalizing and canonicalizing. The caller is responsible for rejecting
    /// grossly non-unit inputs (see the graph loader); here any nonzero
    /// quaternion is accepted.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitRotation {
        let n2 = w * w + x * x + y * y + z * z;
        debug_assert!(n2 > 0.0, "zero quaternion");
        let n = n2.sqrt();
        // Skip the division when already unit so that parsed text round-trips
        // bit-exactly.
        let (w, x, y, z) = if (n - 1.0).abs() <= 1e-12 {
            (w, x, y, z)
        } else {
            (w / n, x / n, y / n, z / n)
        };
        UnitRotation { w, x, y, z }.canonical()
    }

    fn canonical(self) -> UnitRotation {
        let UnitRotation { w, x, y, z } = self;
        let flip = w < 0.0
            || (w == 0.0 && (x < 0.0 || (x == 0.0 && (y < 0.0 || (y == 0.0 && z < 0.0)))));
        if flip {
            UnitRotation {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            self
        }
    }

    /// Quaternion components in `(qw, qx, qy, qz)` order.
    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(aa: &AxisAngle) -> UnitRotation {
        let half = 0.5 * aa.angle;
        let s = half.sin();
        UnitRotation::from_wxyz(
            half.cos(),
            s * aa.axis.x,
            s * aa.axis.y,
            s * aa.axis.z,
        )
    }

    /// Rotation of `degrees` about an arbitrary (not necessarily unit) axis.
    pub fn about_axis(axis: Vector3<f64>, degrees: f64) -> UnitRotation {
        let rad = degrees.to_radians();
        let (axis, angle) = if rad < 0.0 { (-axis, -rad) } else { (axis, rad) };
        UnitRotation::from_axis_angle(&AxisAngle::new(axis, angle))
    }

    /// The 3x3 orthonormal matrix form (active rotation, right-handed).
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let UnitRotation { w, x, y, z } = *self;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Group composition: `self * other` as matrix product (apply `other` first).
    pub fn compose(&self, other: &UnitRotation) -> UnitRotation {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        UnitRotation::from_wxyz(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    pub fn inverse(&self) -> UnitRotation {
        UnitRotation {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
        .canonical()
    }

    /// Rotation angle of this element in radians, in `[0, pi]`.
    ///
    /// Computed as `2 atan2(|v|, w)`, which is stable at both ends of the
    /// range (unlike `arccos`).
    pub fn angle_radians(&self) -> f64 {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * s.atan2(self.w.abs())
    }

    /// Geodesic distance to `other` in radians.
    pub fn geodesic_radians(&self, other: &UnitRotation) -> f64 {
        self.inverse().compose(other).angle_radians()
    }

    /// Axis-angle form. The identity rotation reports the +z axis by convention.
    pub fn axis_angle(&self) -> AxisAngle {
        let v = Vector3::new(self.x, self.y, self.z);
        let s = v.norm();
        let angle = 2.0 * s.atan2(self.w);
        if s < 1e-12 {
            AxisAngle {
                axis: Vector3::z(),
                angle,
            }
        } else {
            AxisAngle {
                axis: v / s,
                angle,
            }
        }
    }

    /// Logarithm map: the tangent 3-vector `axis * angle` in radians.
    ///
    /// Rejects angles within [`NEAR_PI_BAND`] of pi, where the axis is not
    /// determined by the data; callers perturb and retry.
    pub fn log_map(&self) -> Result<Vector3<f64>> {
        let v = Vector3::new(self.x, self.y, self.z);
        let s = v.norm();
        let w = self.w.abs();
        let angle = 2.0 * s.atan2(w);
        if angle > std::f64::consts::PI - NEAR_PI_BAND {
            return Err(Error::NearPiAmbiguity);
        }
        // angle/s -> 2/w for s -> 0; series keeps the quotient smooth.
        let k = if s < 1e-9 {
            (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
        } else {
            angle / s
        };
        Ok(v * k)
    }

    /// Exponential map from a tangent 3-vector in radians.
    pub fn exp_map(v: &Vector3<f64>) -> UnitRotation {
        let theta = v.norm();
        let half = 0.5 * theta;
        // sin(theta/2)/theta, series below sqrt(eps).
        let k = if theta < 1e-8 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        UnitRotation::from_wxyz(half.cos(), v.x * k, v.y * k, v.z * k)
    }

    /// Haar-uniform random rotation (uniform unit quaternion).
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> UnitRotation {
        loop {
            let w: f64 = StandardNormal.sample(rng);
            let x: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            let z: f64 = StandardNormal.sample(rng);
            if w * w + x * x + y * y + z * z > 1e-12 {
                return UnitRotation::from_wxyz(w, x, y, z);
            }
        }
    }

    /// Random small rotation: uniform axis, angle `|N(0, sigma)|` with
    /// `sigma` in degrees.
    pub fn sample_perturbation<R: Rng + ?Sized>(rng: &mut R, sigma_degrees: f64) -> UnitRotation {
        assert!(sigma_degrees >= 0.0, "sigma must be non-negative");
        if sigma_degrees == 0.0 {
            return UnitRotation::IDENTITY;
        }
        let axis: Vector3<f64> = loop {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let c: f64 = StandardNormal.sample(rng);
            let v = Vector3::new(a, b, c);
            let n = v.norm();
            if n > 1e-9 {
                break v / n;
            }
        };
        let normal = Normal::new(0.0, sigma_degrees.to_radians()).expect("valid sigma");
        let angle: f64 = normal.sample(rng);
        let half = 0.5 * angle.abs();
        let s = half.sin();
        UnitRotation::from_wxyz(half.cos(), s * axis.x, s * axis.y, s * axis.z)
    }
}

/// Angular distance between two rotations in degrees, in `[0, 180]`.
pub fn angular_distance(a: &UnitRotation, b: &UnitRotation) -> f64 {
    a.geodesic_radians(b).to_degrees()
}

/// 4-dot of the underlying quaternions. `|dot| = cos(d/2)` for geodesic
/// distance `d`, which makes support tests and reward sums a single product.
#[inline]
pub(crate) fn quat_dot(a: &UnitRotation, b: &UnitRotation) -> f64 {
    a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z
}

/// `cos(d(a, b))` without any trig call: `2 dot^2 - 1`.
#[inline]
pub(crate) fn cos_angular_distance(a: &UnitRotation, b: &UnitRotation) -> f64 {
    let d = quat_dot(a, b);
    2.0 * d * d - 1.0
}

/// `d(a, b) < threshold`, with the threshold supplied as `cos(threshold/2)`.
#[inline]
pub(crate) fn within_angle(a: &UnitRotation, b: &UnitRotation, cos_half_threshold: f64) -> bool {
    quat_dot(a, b).abs() > cos_half_threshold
}

/// Tangent-space coordinate: a unit axis and an angle in `[0, pi]` radians.
#[derive(Debug, Clone, Copy)]
pub struct AxisAngle {
    axis: Vector3<f64>,
    angle: f64,
}

impl AxisAngle {
    /// Normalizes the axis; a negative angle flips the axis instead.
    pub fn new(axis: Vector3<f64>, angle_radians: f64) -> AxisAngle {
        let (axis, angle) = if angle_radians < 0.0 {
            (-axis, -angle_radians)
        } else {
            (axis, angle_radians)
        };
        debug_assert!(angle <= std::f64::consts::PI + 1e-12);
        let n = axis.norm();
        debug_assert!(n > 0.0, "zero axis");
        AxisAngle {
            axis: axis / n,
            angle,
        }
    }

    pub fn axis(&self) -> Vector3<f64> {
        self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }
}
