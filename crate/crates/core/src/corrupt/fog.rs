use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scene::PointCloud;

/// Fog model parameters.
///
/// `alpha` is the extinction coefficient (1/m), `beta` scales the
/// backscatter echo from fog droplets, and `noise_floor` is the standard
/// deviation of additive receiver noise on the soft echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub noise_floor: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            beta: 0.2,
            noise_floor: 0.01,
        }
    }
}

impl FogParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("noise_floor", self.noise_floor)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("fog {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Two-way attenuated return of the original target.
pub fn fog_hard_intensity(reflectance: f64, alpha: f64, range: f64) -> f64 {
    reflectance * (-2.0 * alpha * range).exp()
}

/// Noise-free backscatter echo from fog at `range`.
pub fn fog_soft_intensity(beta: f64, alpha: f64, range: f64) -> f64 {
    let t = (-2.0 * alpha * range).exp();
    beta * t * (1.0 - t)
}

/// Applies the hard/soft target fog model with the maximum criterion.
///
/// For each point a soft echo range is drawn uniformly in (0, R). When the
/// noisy soft echo is stronger than the attenuated hard return, the point
/// moves to the echo range along its ray and takes the echo intensity;
/// otherwise it keeps its position with the attenuated reflectance.
/// Without attenuation there is no fog echo, so `alpha = 0` is the identity.
pub fn fog(cloud: &PointCloud, params: &FogParams, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    if params.alpha == 0.0 {
        return Ok(cloud.clone());
    }
    let noise = Normal::new(0.0, params.noise_floor).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let mut positions = Vec::with_capacity(cloud.len());
    let mut reflectance = Vec::with_capacity(cloud.len());
    for (p, &r) in cloud.positions().iter().zip(cloud.reflectance()) {
        let range = p.coords.norm();
        let u: f64 = rng.sample(Open01);
        let eps = noise.sample(&mut rng);
        let soft_range = u * range;
        let hard = fog_hard_intensity(r, params.alpha, range);
        let soft = (fog_soft_intensity(params.beta, params.alpha, soft_range) + eps).clamp(0.0, 1.0);
        if soft > hard && range > 0.0 {
            positions.push(p * (soft_range / range));
            reflectance.push(soft);
        } else {
            positions.push(*p);
            reflectance.push(hard);
        }
    }
    Ok(cloud
        .clone()
        .with_positions(positions)
        .with_reflectance(reflectance))
}
