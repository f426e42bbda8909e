use nalgebra::Vector3;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::floor_count;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scene::PointCloud;

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma = {sigma} must be finite and >= 0")));
    }
    Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))
}

fn jitter<R: Rng>(rng: &mut R, dist: &Normal<f64>) -> Vector3<f64> {
    Vector3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// Adds independent N(0, sigma²) noise to x, y and z of every point.
pub fn motion_blur(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    let dist = gaussian(sigma)?;
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = rng_from_seed(seed);
    let positions = cloud
        .positions()
        .iter()
        .map(|p| p + jitter(&mut rng, &dist))
        .collect();
    Ok(cloud.clone().with_positions(positions))
}

/// Displaces exactly `⌊fraction · N⌋` uniformly chosen points by per-axis
/// N(0, sigma²) noise.
pub fn crosstalk(cloud: &PointCloud, fraction: f64, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("fraction = {fraction} must lie in [0, 1]")));
    }
    let dist = gaussian(sigma)?;
    let n = cloud.len();
    let k = floor_count(fraction * n as f64).min(n);
    if k == 0 || sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut positions = cloud.positions().to_vec();
    for i in chosen {
        positions[i] += jitter(&mut rng, &dist);
    }
    Ok(cloud.clone().with_positions(positions))
}
