//! Landmark-based cardiac coordinate frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, lerp, normalize, scale, sub, Vec3};

/// Rotation columns `[XA, YA, ZA]` and origin `O`; cardiac coordinates are
/// `R^T (p - O)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardiacFrame {
    pub x_axis: Vec3,
    pub y_axis: Vec3,
    pub z_axis: Vec3,
    pub origin: Vec3,
}

impl CardiacFrame {
    /// Row-major rotation matrix with the axes as columns.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (x, y, z) = (self.x_axis, self.y_axis, self.z_axis);
        [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]]
    }

    /// Homogeneous 4x4 affine `[R^T | -R^T O]` mapping world to cardiac.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let t = apply_frame(self, &[[0.0; 3]])[0];
        let mut a = [[0.0; 4]; 4];
        for (r, axis) in [self.x_axis, self.y_axis, self.z_axis].iter().enumerate() {
            a[r][..3].copy_from_slice(axis);
            a[r][3] = t[r];
        }
        a[3][3] = 1.0;
        a
    }
}

/// Frame from the mitral valve centroid, tricuspid valve centroid and LV apex.
pub fn cardiac_frame(mvc: Vec3, tvc: Vec3, lva: Vec3) -> Result<CardiacFrame> {
    let origin = lerp(mvc, lva, 0.5);
    let z_axis = normalize(sub(lva, origin))
        .ok_or_else(|| Error::Degenerate("mitral centroid coincides with the apex".into()))?;
    let to_tv = sub(tvc, origin);
    let perp = sub(to_tv, scale(z_axis, dot(to_tv, z_axis)));
    let scale_ref = crate::geom::norm(to_tv).max(crate::geom::norm(sub(lva, origin)));
    if crate::geom::norm(perp) <= 1e-9 * scale_ref {
        return Err(Error::Degenerate("tricuspid centroid lies on the long axis".into()));
    }
    let y_axis = normalize(perp).unwrap();
    let x_axis = cross(y_axis, z_axis);
    Ok(CardiacFrame { x_axis, y_axis, z_axis, origin })
}

pub fn apply_frame(frame: &CardiacFrame, points: &[Vec3]) -> Vec<Vec3> {
    points
        .iter()
        .map(|&p| {
            let d = sub(p, frame.origin);
            [dot(frame.x_axis, d), dot(frame.y_axis, d), dot(frame.z_axis, d)]
        })
        .collect()
}

pub fn invert_frame(frame: &CardiacFrame, points: &[Vec3]) -> Vec<Vec3> {
    points
        .iter()
        .map(|&q| {
            let r = add(add(scale(frame.x_axis, q[0]), scale(frame.y_axis, q[1])), scale(frame.z_axis, q[2]));
            add(frame.origin, r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation_about(axis: Vec3, angle: f64) -> impl Fn(Vec3) -> Vec3 {
        let k = normalize(axis).unwrap();
        move |v: Vec3| {
            let (s, c) = angle.sin_cos();
            add(add(scale(v, c), scale(cross(k, v), s)), scale(k, dot(k, v) * (1.0 - c)))
        }
    }

    #[test]
    fn hand_worked_frame() {
        let f = cardiac_frame([0.0, 0.0, 10.0], [5.0, 0.0, 10.0], [0.0, 0.0, -10.0]).unwrap();
        assert_eq!(f.origin, [0.0; 3]);
        assert_eq!(f.z_axis, [0.0, 0.0, -1.0]);
        assert_eq!(f.y_axis, [1.0, 0.0, 0.0]);
        assert_eq!(f.x_axis, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn canonical_pose_gives_identity_and_midpoint() {
        let f = cardiac_frame([0.0, 0.0, -3.0], [0.0, 7.0, 1.0], [0.0, 0.0, 5.0]).unwrap();
        assert_eq!(f.origin, [0.0, 0.0, 1.0]);
        assert_eq!(f.rotation(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(apply_frame(&f, &[f.origin])[0], [0.0; 3]);
        assert_eq!(apply_frame(&f, &[add(f.origin, f.z_axis)])[0], [0.0, 0.0, 1.0]);
        assert_eq!(f.affine()[2][3], -1.0);
    }

    #[test]
    fn orthonormal_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rnd = || [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
        for _ in 0..200 {
            let (m, t, a, p) = (rnd(), rnd(), rnd(), rnd());
            let f = cardiac_frame(m, t, a).unwrap();
            let r = f.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    assert!((rtr - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
                }
            }
            assert!((dot(f.x_axis, cross(f.y_axis, f.z_axis)) - 1.0).abs() < 1e-10);

            let back = invert_frame(&f, &apply_frame(&f, &[p]))[0];
            assert!(dist(back, p) < 1e-12);

            let rot = rotation_about(rnd(), 0.7);
            let shift = rnd();
            let g = |v: Vec3| add(rot(v), shift);
            let fg = cardiac_frame(g(m), g(t), g(a)).unwrap();
            let (q0, q1) = (apply_frame(&f, &[p])[0], apply_frame(&fg, &[g(p)])[0]);
            assert!(dist(q0, q1) < 1e-9);
        }
    }

    #[test]
    fn collinear_landmarks_fail() {
        assert!(cardiac_frame([0.0, 0.0, 1.0], [0.0, 0.0, 5.0], [0.0, 0.0, -1.0]).is_err());
        assert!(cardiac_frame([1.0; 3], [0.0, 5.0, 0.0], [1.0; 3]).is_err());
    }
}
