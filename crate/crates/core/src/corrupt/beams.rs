use std::collections::BTreeMap;

use rand::seq::index;

use super::ceil_count;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scene::PointCloud;

/// Fills beam indices by binning elevation `atan2(z, √(x²+y²))` into
/// `n_beams` equal-width bins over the cloud's observed elevation span.
/// The top bin is closed. Clouds that already carry beams are returned as is.
pub fn assign_beams(cloud: &PointCloud, n_beams: usize) -> Result<PointCloud> {
    if cloud.beams().is_some() {
        return Ok(cloud.clone());
    }
    if n_beams == 0 || n_beams > u16::MAX as usize + 1 {
        return Err(Error::Parameter(format!("n_beams = {n_beams} out of range")));
    }
    if cloud.is_empty() {
        return Err(Error::Parameter("cannot assign beams to an empty cloud".into()));
    }
    if cloud.positions().iter().all(|p| p.coords == nalgebra::Vector3::zeros()) {
        return Err(Error::DegenerateElevation);
    }
    let elev: Vec<f64> = cloud
        .positions()
        .iter()
        .map(|p| p.z.atan2(p.x.hypot(p.y)))
        .collect();
    let lo = elev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = elev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let beams = elev
        .iter()
        .map(|&e| {
            if span <= 0.0 {
                0
            } else {
                let bin = ((e - lo) / span * n_beams as f64).floor() as usize;
                bin.min(n_beams - 1) as u16
            }
        })
        .collect();
    cloud.clone().with_beams(beams)
}

/// Point indices per beam, beams ascending.
pub fn occupied_beams(cloud: &PointCloud) -> Result<BTreeMap<u16, Vec<usize>>> {
    let beams = cloud.beams().ok_or(Error::MissingBeams)?;
    let mut map: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &b) in beams.iter().enumerate() {
        map.entry(b).or_default().push(i);
    }
    Ok(map)
}

/// Removes every point on `n_drop` beams drawn uniformly without
/// replacement from the occupied beams.
pub fn beam_missing(cloud: &PointCloud, n_drop: usize, seed: u64) -> Result<PointCloud> {
    if n_drop == 0 {
        return Ok(cloud.clone());
    }
    let occupied = occupied_beams(cloud)?;
    if n_drop >= occupied.len() {
        return Err(Error::Parameter(format!(
            "cannot drop {n_drop} beams from a cloud with {} occupied beams",
            occupied.len()
        )));
    }
    let ids: Vec<u16> = occupied.keys().copied().collect();
    let mut rng = rng_from_seed(seed);
    let mut dropped = vec![false; u16::MAX as usize + 1];
    for k in index::sample(&mut rng, ids.len(), n_drop).iter() {
        dropped[ids[k] as usize] = true;
    }
    let beams = cloud.beams().expect("checked above");
    let keep: Vec<bool> = beams.iter().map(|&b| !dropped[b as usize]).collect();
    Ok(cloud.filter(&keep))
}

/// Keeps beams whose index is a multiple of `keep_every_kth_beam`, then
/// samples `⌈ratio · n_b⌉` points of each kept beam without replacement.
/// Output order follows input order.
pub fn cross_sensor(
    cloud: &PointCloud,
    keep_every_kth_beam: usize,
    point_subsample_ratio: f64,
    seed: u64,
) -> Result<PointCloud> {
    if keep_every_kth_beam < 1 {
        return Err(Error::Parameter("keep_every_kth_beam must be >= 1".into()));
    }
    if !(point_subsample_ratio > 0.0 && point_subsample_ratio <= 1.0) {
        return Err(Error::Parameter(format!(
            "point_subsample_ratio = {point_subsample_ratio} must lie in (0, 1]"
        )));
    }
    let occupied = occupied_beams(cloud)?;
    let mut rng = rng_from_seed(seed);
    let mut keep = vec![false; cloud.len()];
    for (beam, idx) in &occupied {
        if !(*beam as usize).is_multiple_of(keep_every_kth_beam) {
            continue;
        }
        let n_keep = ceil_count(point_subsample_ratio * idx.len() as f64).min(idx.len());
        if n_keep == idx.len() {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            for k in index::sample(&mut rng, idx.len(), n_keep).iter() {
                keep[idx[k]] = true;
            }
        }
    }
    Ok(cloud.filter(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use std::collections::BTreeSet;

    /// Points on exact elevation rings, `per_ring` azimuths each.
    pub(crate) fn ring_cloud(n_rings: usize, per_ring: usize) -> (PointCloud, Vec<u16>) {
        let (lo, hi) = (-25f64.to_radians(), 3f64.to_radians());
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for ring in 0..n_rings {
            let e = lo + (hi - lo) * ring as f64 / (n_rings - 1) as f64;
            for k in 0..per_ring {
                let az = k as f64 / per_ring as f64 * std::f64::consts::TAU;
                let r = 10.0 + (k % 7) as f64;
                pts.push(Point3::new(r * e.cos() * az.cos(), r * e.cos() * az.sin(), r * e.sin()));
                truth.push(ring as u16);
            }
        }
        let n = pts.len();
        (PointCloud::new(pts, vec![0.5; n]).unwrap(), truth)
    }

    fn beams_of(c: &PointCloud) -> BTreeSet<u16> {
        c.beams().unwrap().iter().copied().collect()
    }

    #[test]
    fn assign_single_point_and_two_bins() {
        let one = PointCloud::new(vec![Point3::new(5.0, 0.0, 1.0)], vec![0.1]).unwrap();
        assert_eq!(assign_beams(&one, 64).unwrap().beams().unwrap(), &[0]);

        let e = 10f64.to_radians();
        let two = PointCloud::new(
            vec![Point3::new(e.cos(), 0.0, -e.sin()), Point3::new(e.cos(), 0.0, e.sin())],
            vec![0.1, 0.1],
        )
        .unwrap();
        assert_eq!(assign_beams(&two, 2).unwrap().beams().unwrap(), &[0, 1]);
    }

    #[test]
    fn assign_recovers_generating_rings() {
        let (cloud, truth) = ring_cloud(64, 90);
        let out = assign_beams(&cloud, 64).unwrap();
        assert_eq!(out.beams().unwrap(), truth.as_slice());
    }

    #[test]
    fn assign_degenerate_and_existing() {
        let origin = PointCloud::new(vec![Point3::origin(); 3], vec![0.0; 3]).unwrap();
        assert!(matches!(assign_beams(&origin, 4), Err(Error::DegenerateElevation)));
        let tagged = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], vec![0.0])
            .unwrap()
            .with_beams(vec![9])
            .unwrap();
        assert_eq!(assign_beams(&tagged, 4).unwrap(), tagged);
    }

    #[test]
    fn beam_missing_counts() {
        let (cloud, truth) = ring_cloud(64, 20);
        let cloud = cloud.with_beams(truth).unwrap();
        assert_eq!(beam_missing(&cloud, 0, 1).unwrap(), cloud);

        let out = beam_missing(&cloud, 16, 99).unwrap();
        assert_eq!(beams_of(&out).len(), 48);
        assert_eq!(out.len(), 48 * 20);
        assert_eq!(beam_missing(&cloud, 16, 99).unwrap(), out);
        // a different seed drops a different set
        assert_ne!(beams_of(&beam_missing(&cloud, 16, 100).unwrap()), beams_of(&out));

        assert!(beam_missing(&cloud, 64, 1).is_err());
    }

    #[test]
    fn beam_missing_seventeen_beams() {
        let (cloud, truth) = ring_cloud(17, 10);
        let cloud = cloud.with_beams(truth).unwrap();
        let out = beam_missing(&cloud, 16, 5).unwrap();
        assert_eq!(beams_of(&out).len(), 1);
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn beam_missing_requires_beams() {
        let c = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], vec![0.0]).unwrap();
        assert!(matches!(beam_missing(&c, 1, 0), Err(Error::MissingBeams)));
    }

    #[test]
    fn cross_sensor_counts() {
        let (cloud, truth) = ring_cloud(64, 100);
        let cloud = cloud.with_beams(truth).unwrap();
        assert_eq!(cross_sensor(&cloud, 1, 1.0, 3).unwrap(), cloud);

        let out = cross_sensor(&cloud, 4, 1.0, 3).unwrap();
        assert_eq!(beams_of(&out), (0..64).step_by(4).collect());

        let half = cross_sensor(&cloud, 4, 0.5, 3).unwrap();
        let per_beam = occupied_beams(&half).unwrap();
        assert!(per_beam.values().all(|v| v.len() == 50));
        assert_eq!(cross_sensor(&cloud, 4, 0.5, 3).unwrap(), half);
    }
}
