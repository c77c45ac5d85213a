//! Nearest-block / next-block dense reward.

use serde::{Deserialize, Serialize};

use crate::geometry::{sequence_pixels, BlockSequence, GeometryError, GridSpec, PixelPoint3};

/// Parameters of the shaping transform `0.5 * (1 - tanh(lambda * (d - phi)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Scale, 1/pixels.
    pub lambda: f64,
    /// Offset, pixels.
    pub phi: f64,
    pub grid: GridSpec,
}

impl RewardParams {
    pub fn new(lambda: f64, phi: f64, grid: GridSpec) -> Result<Self, super::RewardError> {
        if !(lambda > 0.0 && lambda.is_finite()) || !(phi >= 0.0 && phi.is_finite()) {
            return Err(super::RewardError::Params(format!(
                "need lambda > 0 and phi >= 0, got lambda={lambda}, phi={phi}"
            )));
        }
        Ok(Self { lambda, phi, grid })
    }

    /// Preset for 100x100-pixel simulated views.
    pub fn simulation(grid: GridSpec) -> Self {
        Self {
            lambda: 0.1,
            phi: 15.0,
            grid,
        }
    }

    /// Preset for real-camera image sizes.
    pub fn real_robot(grid: GridSpec) -> Self {
        Self {
            lambda: 0.02,
            phi: 80.0,
            grid,
        }
    }

    /// The plain `0.5 * (1 - tanh(d))` transform.
    pub fn unscaled(grid: GridSpec) -> Self {
        Self {
            lambda: 1.0,
            phi: 0.0,
            grid,
        }
    }

    pub fn shape(&self, distance: f64) -> f64 {
        shaped_reward(distance, self.lambda, self.phi)
    }
}

pub fn shaped_reward(distance: f64, lambda: f64, phi: f64) -> f64 {
    0.5 * (1.0 - (lambda * (distance - phi)).tanh())
}

/// Index of the block centroid closest to `p`; ties go to the lower index.
pub fn nearest_index(p: &PixelPoint3, centroids: &[PixelPoint3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = p.distance(c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn nearest_block(p: &PixelPoint3, seq: &BlockSequence, grid: &GridSpec) -> Result<usize, GeometryError> {
    Ok(nearest_index(p, &sequence_pixels(grid, seq)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseReward {
    pub r_dense: f64,
    pub nearest_index: usize,
    pub target_index: usize,
    pub distance: f64,
}

/// A block sequence with its centroids precomputed for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    pub sequence: BlockSequence,
    pub centroids: Vec<PixelPoint3>,
}

impl WaypointPath {
    pub fn new(sequence: BlockSequence, grid: &GridSpec) -> Result<Self, GeometryError> {
        let centroids = sequence_pixels(grid, &sequence)?;
        Ok(Self { sequence, centroids })
    }

    /// Reward for moving toward the block after the nearest one; at the
    /// last block the target stays on the last block.
    pub fn dense(&self, p: &PixelPoint3, lambda: f64, phi: f64) -> DenseReward {
        let nearest = nearest_index(p, &self.centroids);
        let target = (nearest + 1).min(self.centroids.len() - 1);
        let distance = p.distance(&self.centroids[target]);
        DenseReward {
            r_dense: shaped_reward(distance, lambda, phi),
            nearest_index: nearest,
            target_index: target,
            distance,
        }
    }
}

pub fn dense_reward(p: &PixelPoint3, seq: &BlockSequence, params: &RewardParams) -> Result<DenseReward, GeometryError> {
    let path = WaypointPath::new(seq.clone(), &params.grid)?;
    Ok(path.dense(p, params.lambda, params.phi))
}

/// The same kernel applied to a tracked object point and its own sequence.
pub fn object_reward(
    obj_pixel: &PixelPoint3,
    seq_obj: &BlockSequence,
    params: &RewardParams,
) -> Result<f64, GeometryError> {
    Ok(dense_reward(obj_pixel, seq_obj, params)?.r_dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{block_to_pixel3, WaypointBlock};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::with_image(100, 100).unwrap()
    }

    fn seq(b: &[(usize, usize, usize)]) -> BlockSequence {
        BlockSequence::new(b.iter().map(|&(x, y, z)| WaypointBlock::new(x, y, z)).collect()).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(shaped_reward(15.0, 0.1, 15.0), 0.5);
        assert_eq!(shaped_reward(80.0, 0.02, 80.0), 0.5);
        // 0.5 * (1 - tanh(-1.5)) and 0.5 * (1 - tanh(3)), evaluated in high precision.
        assert!((shaped_reward(0.0, 0.1, 15.0) - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!((shaped_reward(45.0, 0.1, 15.0) - 0.002_472_623_156_634_775).abs() < 1e-12);
    }

    #[test]
    fn limits() {
        assert!((shaped_reward(-1e6, 0.1, 15.0) - 1.0).abs() < 1e-12);
        assert!(shaped_reward(1e6, 0.1, 15.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_examples() {
        let g = grid();
        let s = seq(&[(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]);
        let at2 = block_to_pixel3(&g, WaypointBlock::new(2, 0, 0)).unwrap();
        assert_eq!(nearest_block(&at2, &s, &g).unwrap(), 2);
        let c1 = block_to_pixel3(&g, WaypointBlock::new(1, 0, 0)).unwrap();
        let mid = PixelPoint3::new(c1.u + g.tile_width() / 2.0, c1.v, c1.w);
        assert_eq!(nearest_block(&mid, &s, &g).unwrap(), 1);
    }

    #[test]
    fn target_clamps_to_last_block() {
        let g = grid();
        let s = seq(&[(0, 0, 0), (1, 0, 0), (2, 0, 1)]);
        let p = RewardParams::simulation(g);
        let end = block_to_pixel3(&g, s.last()).unwrap();
        let r = dense_reward(&end, &s, &p).unwrap();
        assert_eq!((r.nearest_index, r.target_index), (2, 2));
        assert_eq!(r.distance, 0.0);
        assert!((r.r_dense - 0.5 * (1.0 - (-1.5f64).tanh())).abs() < 1e-15);
    }

    #[test]
    fn next_block_is_target() {
        let g = grid();
        let s = seq(&[(0, 0, 0), (1, 0, 0), (2, 0, 0)]);
        let start = block_to_pixel3(&g, s.first()).unwrap();
        let r = dense_reward(&start, &s, &RewardParams::simulation(g)).unwrap();
        assert_eq!((r.nearest_index, r.target_index), (0, 1));
        assert!((r.distance - g.tile_width()).abs() < 1e-12);
    }

    #[test]
    fn object_reward_shares_kernel() {
        let g = grid();
        let s = seq(&[(1, 1, 0), (1, 1, 2), (2, 1, 2), (2, 1, 0)]);
        let p = RewardParams::simulation(g);
        let pt = PixelPoint3::new(30.0, 20.0, 25.0);
        assert_eq!(
            object_reward(&pt, &s, &p).unwrap(),
            dense_reward(&pt, &s, &p).unwrap().r_dense
        );
        // Over a dense scan of positions the maximum sits at the final centroid.
        let end = block_to_pixel3(&g, s.last()).unwrap();
        let at_end = object_reward(&end, &s, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5000 {
            let q = PixelPoint3::new(
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            );
            assert!(object_reward(&q, &s, &p).unwrap() <= at_end);
        }
    }

    #[test]
    fn invalid_params() {
        assert!(RewardParams::new(0.0, 15.0, grid()).is_err());
        assert!(RewardParams::new(0.1, -1.0, grid()).is_err());
        assert!(RewardParams::new(0.1, 0.0, grid()).is_ok());
    }

    proptest! {
        #[test]
        fn strictly_decreasing(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(shaped_reward(lo, 0.1, 15.0) >= shaped_reward(hi, 0.1, 15.0));
            // Strict where the difference is representable.
            if hi - lo > 1e-3 && (0.1 * (lo - 15.0)).abs() < 8.0 && (0.1 * (hi - 15.0)).abs() < 8.0 {
                prop_assert!(shaped_reward(lo, 0.1, 15.0) > shaped_reward(hi, 0.1, 15.0));
            }
            let r = shaped_reward(a, 0.1, 15.0);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn progress_along_segment_is_monotone(i in 0usize..5, steps in 2usize..50) {
            // Straight segment at one height: reward rises until the nearest block advances.
            let g = grid();
            let s = seq(&[(0, 2, 3), (1, 2, 3), (2, 2, 3), (3, 2, 3), (4, 2, 3), (5, 2, 3)]);
            let path = WaypointPath::new(s, &g).unwrap();
            let (a, b) = (path.centroids[i], path.centroids[(i + 1).min(5)]);
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let p = PixelPoint3::new(a.u + t * (b.u - a.u), a.v + t * (b.v - a.v), a.w);
                let r = path.dense(&p, 0.1, 15.0);
                if r.nearest_index != i {
                    break;
                }
                prop_assert!(r.r_dense >= prev);
                prev = r.r_dense;
            }
        }
    }
}
