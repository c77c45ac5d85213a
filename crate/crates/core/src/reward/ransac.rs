//! RANSAC fit of affine maps from effector positions to pixel coordinates.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RewardError;
use crate::sim::Point3;

/// Samples needed to determine a 3D affine map (three slopes and an offset).
pub const MIN_SAMPLES: usize = 4;

/// One affine row `[a_x, a_y, a_z, b]` per output pixel coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub rows: Vec<[f64; 4]>,
}

impl AffineMap {
    pub fn apply(&self, p: &Point3) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r[0] * p.x + r[1] * p.y + r[2] * p.z + r[3])
            .collect()
    }

    fn residual(&self, p: &Point3, target: &[f64]) -> f64 {
        self.apply(p)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Least-squares fit on `idx`; `None` if the points do not span 3D.
    fn fit(pairs: &[(Point3, Vec<f64>)], idx: &[usize]) -> Option<Self> {
        let n = idx.len();
        let out_dim = pairs[idx[0]].1.len();
        let design = DMatrix::from_fn(n, 4, |r, c| {
            let p = &pairs[idx[r]].0;
            [p.x, p.y, p.z, 1.0][c]
        });
        let svd = design.svd(true, true);
        let (max_sv, min_sv) = svd
            .singular_values
            .iter()
            .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
        if min_sv <= 1e-9 * max_sv.max(1.0) {
            return None;
        }
        let rows = (0..out_dim)
            .map(|k| {
                let target = DVector::from_fn(n, |r, _| pairs[idx[r]].1[k]);
                let sol = svd.solve(&target, 1e-12).ok()?;
                Some([sol[0], sol[1], sol[2], sol[3]])
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { rows })
    }
}

/// Fitted map from effector position to one camera's pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRegressor {
    map: Option<AffineMap>,
    pub inlier_threshold: f64,
    pub inliers: Vec<usize>,
}

impl CameraRegressor {
    pub fn unfitted(inlier_threshold: f64) -> Self {
        Self {
            map: None,
            inlier_threshold,
            inliers: Vec::new(),
        }
    }

    /// Wraps a known map, e.g. one read from calibration output.
    pub fn from_map(map: AffineMap, inlier_threshold: f64) -> Self {
        Self {
            map: Some(map),
            inlier_threshold,
            inliers: Vec::new(),
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.map.is_some()
    }

    pub fn map(&self) -> Option<&AffineMap> {
        self.map.as_ref()
    }

    pub fn predict(&self, p: &Point3) -> Result<Vec<f64>, RewardError> {
        self.map.as_ref().map(|m| m.apply(p)).ok_or(RewardError::Unfitted)
    }
}

/// Samples minimal sets, keeps the map with the largest consensus (ties go
/// to the lower inlier RMS), then refits on that consensus set.
pub fn fit_ransac(
    pairs: &[(Point3, Vec<f64>)],
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<CameraRegressor, RewardError> {
    if pairs.len() < MIN_SAMPLES {
        return Err(RewardError::TooFewPairs(pairs.len()));
    }
    let dim = pairs[0].1.len();
    if dim == 0 || pairs.iter().any(|(_, t)| t.len() != dim) {
        return Err(RewardError::Dimension(
            "pixel targets must share one nonzero length".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consensus = |map: &AffineMap| -> (Vec<usize>, f64) {
        let mut inliers = Vec::new();
        let mut ss = 0.0;
        for (i, (p, t)) in pairs.iter().enumerate() {
            let r = map.residual(p, t);
            if r <= threshold {
                inliers.push(i);
                ss += r * r;
            }
        }
        let rms = if inliers.is_empty() {
            f64::INFINITY
        } else {
            (ss / inliers.len() as f64).sqrt()
        };
        (inliers, rms)
    };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, pairs.len(), MIN_SAMPLES).into_vec();
        let Some(map) = AffineMap::fit(pairs, &idx) else {
            continue;
        };
        let (inliers, rms) = consensus(&map);
        let better = match &best {
            None => true,
            Some((b, brms)) => inliers.len() > b.len() || (inliers.len() == b.len() && rms < *brms),
        };
        if better {
            best = Some((inliers, rms));
        }
    }
    let (inliers, _) = best.ok_or(RewardError::NoConsensus(0))?;
    if inliers.len() < MIN_SAMPLES {
        return Err(RewardError::NoConsensus(inliers.len()));
    }
    let map = AffineMap::fit(pairs, &inliers).ok_or(RewardError::NoConsensus(inliers.len()))?;
    let (inliers, _) = consensus(&map);
    if inliers.len() < MIN_SAMPLES {
        return Err(RewardError::NoConsensus(inliers.len()));
    }
    Ok(CameraRegressor {
        map: Some(map),
        inlier_threshold: threshold,
        inliers,
    })
}
