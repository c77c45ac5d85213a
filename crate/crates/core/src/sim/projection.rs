use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point3, WorldState};
use crate::geometry::PixelPoint3;

/// Orthographic camera pair. Each row is an affine map `[a_x, a_y, a_z, b]`
/// from workspace coordinates to one pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Top-down (u, v).
    pub top: [[f64; 4]; 2],
    /// Side view (s, w): `s` is the horizontal image axis and `w` the height
    /// above the table in pixels.
    pub side: [[f64; 4]; 2],
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projected {
    pub robot: PixelPoint3,
    pub objects: BTreeMap<u32, PixelPoint3>,
}

fn apply(row: &[f64; 4], p: &Point3) -> f64 {
    row[0] * p.x + row[1] * p.y + row[2] * p.z + row[3]
}

impl Projection {
    /// Unit workspace scaled onto a square image of `size` pixels in both views.
    pub fn scaled(size: f64, noise_std: f64) -> Self {
        Self {
            top: [[size, 0.0, 0.0, 0.0], [0.0, size, 0.0, 0.0]],
            side: [[size, 0.0, 0.0, 0.0], [0.0, 0.0, size, 0.0]],
            noise_std,
        }
    }

    fn matrix(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rows = [self.top[0], self.top[1], self.side[1]];
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        (m, Vector3::new(rows[0][3], rows[1][3], rows[2][3]))
    }

    pub fn is_invertible(&self) -> bool {
        self.matrix().0.determinant().abs() > 1e-12
    }

    pub fn point(&self, p: &Point3) -> PixelPoint3 {
        PixelPoint3::new(apply(&self.top[0], p), apply(&self.top[1], p), apply(&self.side[1], p))
    }

    /// Horizontal side-view coordinate, used only for rendering.
    pub fn side_horizontal(&self, p: &Point3) -> f64 {
        apply(&self.side[0], p)
    }

    /// Workspace point whose noiseless projection is `px`.
    pub fn unproject(&self, px: &PixelPoint3) -> Option<Point3> {
        let (m, b) = self.matrix();
        let inv = m.try_inverse()?;
        Some(inv * (Vector3::new(px.u, px.v, px.w) - b))
    }

    pub fn project(&self, state: &WorldState, seed: u64) -> Projected {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        let mut jitter = |p: PixelPoint3| {
            if self.noise_std > 0.0 {
                PixelPoint3::new(
                    p.u + noise.sample(&mut rng),
                    p.v + noise.sample(&mut rng),
                    p.w + noise.sample(&mut rng),
                )
            } else {
                p
            }
        };
        let robot = jitter(self.point(&state.effector));
        let objects = state
            .objects
            .iter()
            .map(|o| (o.id, jitter(self.point(&o.position))))
            .collect();
        Projected { robot, objects }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Gripper, ObjectState};

    fn state(e: Point3) -> WorldState {
        WorldState {
            effector: e,
            gripper: Gripper::Open,
            objects: vec![ObjectState {
                id: 0,
                position: Point3::new(0.2, 0.3, 0.05),
                held: false,
            }],
            step_count: 0,
        }
    }

    #[test]
    fn scaled_projection_by_hand() {
        let proj = Projection::scaled(100.0, 0.0);
        let p = proj.project(&state(Point3::new(0.5, 0.5, 0.1)), 0);
        assert!((p.robot.u - 50.0).abs() < 1e-12);
        assert!((p.robot.v - 50.0).abs() < 1e-12);
        assert!((p.robot.w - 10.0).abs() < 1e-12);
        assert_eq!(p, proj.project(&state(Point3::new(0.5, 0.5, 0.1)), 99));
    }

    #[test]
    fn noise_std_matches() {
        let proj = Projection::scaled(100.0, 2.0);
        let s = state(Point3::new(0.5, 0.5, 0.1));
        let samples: Vec<f64> = (0..10_000).map(|seed| proj.project(&s, seed).robot.u).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let std = var.sqrt();
        assert!((1.8..=2.2).contains(&std), "std {std}");
    }

    #[test]
    fn unproject_inverts() {
        let proj = Projection {
            top: [[80.0, 5.0, 0.0, 10.0], [-3.0, 90.0, 1.0, 4.0]],
            side: [[100.0, 0.0, 0.0, 0.0], [0.0, 2.0, 95.0, 1.0]],
            noise_std: 0.0,
        };
        assert!(proj.is_invertible());
        let p = Point3::new(0.3, 0.7, 0.2);
        let back = proj.unproject(&proj.point(&p)).unwrap();
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn linear_in_state() {
        let proj = Projection {
            top: [[80.0, 5.0, 0.0, 10.0], [-3.0, 90.0, 1.0, 4.0]],
            side: [[100.0, 0.0, 0.0, 0.0], [0.0, 2.0, 95.0, 1.0]],
            noise_std: 0.0,
        };
        let (a, b) = (Point3::new(0.1, 0.9, 0.4), Point3::new(0.6, 0.2, 0.05));
        for alpha in [0.0, 0.25, 0.7, 1.0] {
            let mix = proj.point(&(a * alpha + b * (1.0 - alpha)));
            let (pa, pb) = (proj.point(&a), proj.point(&b));
            assert!((mix.u - (alpha * pa.u + (1.0 - alpha) * pb.u)).abs() < 1e-9);
            assert!((mix.v - (alpha * pa.v + (1.0 - alpha) * pb.v)).abs() < 1e-9);
            assert!((mix.w - (alpha * pa.w + (1.0 - alpha) * pb.w)).abs() < 1e-9);
        }
    }
}
