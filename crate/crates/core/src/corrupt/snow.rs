use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scene::PointCloud;

const MAX_REJECTIONS: usize = 100;

/// Axis-aligned box in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }
}

/// Snowfall parameters: particle density (per m³), sphere radius (m) and
/// the sampling domain around the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnowParams {
    pub rate: f64,
    pub particle_radius: f64,
    #[serde(default = "default_domain")]
    pub domain: Aabb,
}

fn default_domain() -> Aabb {
    Aabb {
        min: [-70.0, -70.0, -3.0],
        max: [70.0, 70.0, 5.0],
    }
}

impl Default for SnowParams {
    fn default() -> Self {
        Self {
            rate: 0.05,
            particle_radius: 0.15,
            domain: default_domain(),
        }
    }
}

impl SnowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Parameter(format!("snow rate = {} must be >= 0", self.rate)));
        }
        if !(self.particle_radius > 0.0 && self.particle_radius.is_finite()) {
            return Err(Error::Parameter(format!(
                "snow particle_radius = {} must be > 0",
                self.particle_radius
            )));
        }
        if (0..3).any(|i| !(self.domain.max[i] > self.domain.min[i])) {
            return Err(Error::Parameter("snow domain must have positive extent".into()));
        }
        let min_extent = (0..3)
            .map(|i| self.domain.max[i] - self.domain.min[i])
            .fold(f64::INFINITY, f64::min);
        if self.particle_radius * 2.0 >= min_extent {
            return Err(Error::Parameter(
                "snow particle_radius must be small relative to the domain".into(),
            ));
        }
        Ok(())
    }
}

fn cell_of(p: &Point3<f64>, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Samples particle centers: a Poisson count of candidates, each accepted
/// only if no accepted center lies closer than two radii. A candidate is
/// abandoned after 100 rejected draws.
pub fn sample_snow_particles(params: &SnowParams, seed: u64) -> Result<Vec<Point3<f64>>> {
    params.validate()?;
    let mean = params.rate * params.domain.volume();
    if mean <= 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = rng_from_seed(seed);
    let count = Poisson::new(mean)
        .map_err(|e| Error::Parameter(e.to_string()))?
        .sample(&mut rng) as usize;

    let min_dist = 2.0 * params.particle_radius;
    let mut accepted: Vec<Point3<f64>> = Vec::with_capacity(count);
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let Aabb { min, max } = params.domain;
    for _ in 0..count {
        let mut rejections = 0;
        while rejections < MAX_REJECTIONS {
            let c = Point3::new(
                rng.random_range(min[0]..max[0]),
                rng.random_range(min[1]..max[1]),
                rng.random_range(min[2]..max[2]),
            );
            let key = cell_of(&c, min_dist);
            let clash = (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dz| {
                        buckets
                            .get(&[key[0] + dx, key[1] + dy, key[2] + dz])
                            .is_some_and(|ids| {
                                ids.iter().any(|&j| (accepted[j] - c).norm() < min_dist)
                            })
                    })
                })
            });
            if clash {
                rejections += 1;
                continue;
            }
            buckets.entry(key).or_default().push(accepted.len());
            accepted.push(c);
            break;
        }
    }
    Ok(accepted)
}

/// A ray hit against one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ParticleHit {
    /// Range at which the ray enters the sphere, clamped at 0.
    pub range: f64,
    /// Chord length through the sphere over its diameter.
    pub occlusion: f64,
    pub particle: usize,
}

/// Ray-sphere test for the ray from the origin along unit `dir` toward a
/// point at `range`.
pub(crate) fn particle_hit(
    center: &Point3<f64>,
    radius: f64,
    dir: &Vector3<f64>,
    range: f64,
    particle: usize,
) -> Option<ParticleHit> {
    let along = center.coords.dot(dir);
    if !(along > 0.0 && along < range) {
        return None;
    }
    let perp2 = (center.coords - dir * along).norm_squared();
    let r2 = radius * radius;
    if perp2 >= r2 {
        return None;
    }
    let half_chord = (r2 - perp2).sqrt();
    Some(ParticleHit {
        range: (along - half_chord).max(0.0),
        occlusion: half_chord / radius,
        particle,
    })
}

fn closer(a: Option<ParticleHit>, b: ParticleHit) -> Option<ParticleHit> {
    match a {
        Some(a) if (a.range, a.particle) <= (b.range, b.particle) => Some(a),
        _ => Some(b),
    }
}

/// Uniform grid over particle bounding cubes, traversed cell by cell along
/// each ray.
pub(crate) struct ParticleGrid<'a> {
    particles: &'a [Point3<f64>],
    radius: f64,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> ParticleGrid<'a> {
    const MAX_CELLS: usize = 1 << 22;

    pub(crate) fn new(particles: &'a [Point3<f64>], radius: f64) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in particles {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        lo -= Vector3::repeat(radius);
        hi += Vector3::repeat(radius);
        let extent = hi - lo;
        let mut cell = (2.0 * radius).max(1.0);
        let dims = loop {
            let d = [0, 1, 2].map(|i| ((extent[i] / cell).ceil() as usize).max(1));
            if d.iter().product::<usize>() <= Self::MAX_CELLS {
                break d;
            }
            cell *= 2.0;
        };
        let mut cells = vec![Vec::new(); dims.iter().product()];
        for (k, p) in particles.iter().enumerate() {
            let a = [0, 1, 2].map(|i| (((p[i] - radius - lo[i]) / cell).floor() as usize).min(dims[i] - 1));
            let b = [0, 1, 2].map(|i| (((p[i] + radius - lo[i]) / cell).floor() as usize).min(dims[i] - 1));
            for x in a[0]..=b[0] {
                for y in a[1]..=b[1] {
                    for z in a[2]..=b[2] {
                        cells[(x * dims[1] + y) * dims[2] + z].push(k as u32);
                    }
                }
            }
        }
        Self {
            particles,
            radius,
            origin: lo,
            cell,
            dims,
            cells,
        }
    }

    /// Nearest particle occluding the segment from the origin to `target`.
    pub(crate) fn first_hit(&self, target: &Point3<f64>) -> Option<ParticleHit> {
        let range = target.coords.norm();
        if self.particles.is_empty() || range <= 0.0 {
            return None;
        }
        let dir = target.coords / range;
        let size = self.cell * Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64);
        // clip [0, range] to the grid box
        let (mut t0, mut t1) = (0.0f64, range);
        for i in 0..3 {
            let lo = self.origin[i];
            let hi = lo + size[i];
            if dir[i] == 0.0 {
                if !(0.0 >= lo && 0.0 <= hi) {
                    return None;
                }
            } else {
                let (a, b) = ((lo) / dir[i], (hi) / dir[i]);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t0 > t1 {
            return None;
        }
        let start = dir * t0 - self.origin;
        let mut idx = [0usize; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            idx[i] = ((start[i] / self.cell).floor().max(0.0) as usize).min(self.dims[i] - 1);
            if dir[i] > 0.0 {
                step[i] = 1;
                t_max[i] = (self.origin[i] + (idx[i] + 1) as f64 * self.cell) / dir[i];
                t_delta[i] = self.cell / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                t_max[i] = (self.origin[i] + idx[i] as f64 * self.cell) / dir[i];
                t_delta[i] = -self.cell / dir[i];
            }
        }
        let mut best: Option<ParticleHit> = None;
        loop {
            let flat = (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2];
            for &k in &self.cells[flat] {
                let k = k as usize;
                if let Some(h) = particle_hit(&self.particles[k], self.radius, &dir, range, k) {
                    best = closer(best, h);
                }
            }
            let axis = (0..3)
                .min_by(|&a, &b| t_max[a].total_cmp(&t_max[b]))
                .expect("three axes");
            let t_exit = t_max[axis];
            if best.is_some_and(|b| b.range <= t_exit) || t_exit >= t1 {
                break;
            }
            let next = idx[axis] as i64 + step[axis];
            if next < 0 || next >= self.dims[axis] as i64 {
                break;
            }
            idx[axis] = next as usize;
            t_max[axis] += t_delta[axis];
        }
        best
    }
}

/// Occludes points with an explicit set of particle spheres.
///
/// Each point whose ray from the sensor passes through a particle (center
/// ahead of the sensor and short of the point) moves to the entry range of
/// the nearest such particle, with reflectance scaled by the chord length
/// over the particle diameter.
pub fn snow_with_particles(
    cloud: &PointCloud,
    particles: &[Point3<f64>],
    radius: f64,
) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("particle radius {radius} must be > 0")));
    }
    if particles.is_empty() {
        return Ok(cloud.clone());
    }
    let grid = ParticleGrid::new(particles, radius);
    let mut positions = cloud.positions().to_vec();
    let mut reflectance = cloud.reflectance().to_vec();
    for (p, r) in positions.iter_mut().zip(reflectance.iter_mut()) {
        if let Some(hit) = grid.first_hit(p) {
            let dir = p.coords / p.coords.norm();
            *p = Point3::from(dir * hit.range);
            *r *= hit.occlusion;
        }
    }
    Ok(cloud
        .clone()
        .with_positions(positions)
        .with_reflectance(reflectance))
}

/// Samples particles from `params` and occludes the cloud with them.
pub fn snow(cloud: &PointCloud, params: &SnowParams, seed: u64) -> Result<PointCloud> {
    let particles = sample_snow_particles(params, seed)?;
    snow_with_particles(cloud, &particles, params.particle_radius)
}
