//! Axis-angle rotations and their derivatives.

use nalgebra::Matrix3;

use crate::geometry::Vec3;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SERIES_ANGLE: f64 = 1e-2;

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2` and
/// `C = A'(t) / t`, `D = B'(t) / t`, so that `R = I + A K + B K^2`.
fn coefficients(theta2: f64) -> [f64; 4] {
    if theta2 < SERIES_ANGLE * SERIES_ANGLE {
        let t2 = theta2;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        [
            1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
        ]
    } else {
        let t = theta2.sqrt();
        let (s, c) = t.sin_cos();
        let half = (0.5 * t).sin();
        let one_minus_cos = 2.0 * half * half;
        [
            s / t,
            one_minus_cos / theta2,
            (t * c - s) / (theta2 * t),
            (t * s - 2.0 * one_minus_cos) / (theta2 * theta2),
        ]
    }
}

/// Rotation matrix of an axis-angle vector (axis times angle in radians).
pub fn axis_angle_to_matrix(aa: &Vec3) -> Matrix3<f64> {
    let [a, b, _, _] = coefficients(aa.norm_squared());
    let k = skew(aa);
    Matrix3::identity() + k * a + k * k * b
}

/// A rotation matrix together with its partial derivatives with respect to
/// the three axis-angle components.
#[derive(Debug, Clone, Copy)]
pub struct RotationJacobian {
    pub matrix: Matrix3<f64>,
    pub partials: [Matrix3<f64>; 3],
}

impl RotationJacobian {
    pub fn new(aa: &Vec3) -> Self {
        let [a, b, c, d] = coefficients(aa.norm_squared());
        let k = skew(aa);
        let k2 = k * k;
        let matrix = Matrix3::identity() + k * a + k2 * b;
        let partials = std::array::from_fn(|i| {
            let e = skew(&Vec3::ith(i, 1.0));
            e * a + (e * k + k * e) * b + k * (c * aa[i]) + k2 * (d * aa[i])
        });
        Self { matrix, partials }
    }

    /// Chain rule: given dE/dR, returns dE/d(axis-angle).
    pub fn pullback(&self, adjoint: &Matrix3<f64>) -> Vec3 {
        Vec3::new(
            adjoint.dot(&self.partials[0]),
            adjoint.dot(&self.partials[1]),
            adjoint.dot(&self.partials[2]),
        )
    }
}

/// Equivalent axis-angle with angle in `[0, pi]`.
pub fn canonical_axis_angle(aa: &Vec3) -> Vec3 {
    let theta = aa.norm();
    if theta <= std::f64::consts::PI {
        return *aa;
    }
    let axis = aa / theta;
    let wrapped = theta.rem_euclid(2.0 * std::f64::consts::PI);
    if wrapped > std::f64::consts::PI {
        -axis * (2.0 * std::f64::consts::PI - wrapped)
    } else {
        axis * wrapped
    }
}
