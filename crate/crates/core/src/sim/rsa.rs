//! Random sequential adsorption of object positions.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rejections tolerated before giving up.
pub const MAX_REJECTIONS: usize = 100_000;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Region {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if !(0..3).all(|k| min[k].is_finite() && max[k].is_finite() && min[k] <= max[k]) {
            return Err(Error::InvalidScenario(format!("region min {min:?} must not exceed max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn diameter(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

/// Places `count` points uniformly in `region`, rejecting any candidate
/// closer than `min_sep` to an accepted point.
pub fn place_objects_rsa(region: &Region, count: usize, min_sep: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if !(min_sep.is_finite() && min_sep >= 0.0) {
        return Err(Error::InvalidScenario(format!("minimum separation must be non-negative, got {min_sep}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<Vector3<f64>> = Vec::with_capacity(count);
    let mut rejections = 0;
    while placed.len() < count {
        let p = Vector3::from_fn(|k, _| {
            if region.max[k] > region.min[k] {
                rng.random_range(region.min[k]..=region.max[k])
            } else {
                region.min[k]
            }
        });
        if placed.iter().all(|q| (p - q).norm() >= min_sep) {
            placed.push(p);
        } else {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::RegionTooCrowded { placed: placed.len(), requested: count });
            }
        }
    }
    Ok(placed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Region {
        Region::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0)).unwrap()
    }

    #[test]
    fn single_point_lies_in_region() {
        let p = place_objects_rsa(&unit(), 1, 0.5, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert!(unit().contains(&p[0]));
    }

    #[test]
    fn impossible_separation_fails() {
        let r = unit();
        let err = place_objects_rsa(&r, 2, r.diameter() * 1.01, 0).unwrap_err();
        assert!(err.to_string().contains("region too crowded"), "{err}");
    }

    #[test]
    fn same_seed_same_points() {
        assert_eq!(place_objects_rsa(&unit(), 6, 0.1, 9).unwrap(), place_objects_rsa(&unit(), 6, 0.1, 9).unwrap());
    }

    #[test]
    fn inverted_region_is_rejected() {
        assert!(Region::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()).is_err());
    }
}
