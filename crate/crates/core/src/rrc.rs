//! Random ray casting: a foreground pixel's recovered surface point is
//! re-observed from a random origin on a cone around the original viewing
//! direction, and the new ray inherits the pixel's color as its label.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dir_from_spherical, spherical_from_dir, Ray, SphericalDir, Vec3};
use crate::imageio::Image;
use crate::rng::{keyed_rng, stream};

/// Elevation limit applied after perturbation, keeping the azimuth defined.
pub const POLE_GUARD: f64 = std::f64::consts::FRAC_PI_2 - 1e-4;

/// Cached opacity below which a foreground pixel has no usable surface point.
pub const MIN_SURFACE_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelId {
    pub image: u32,
    pub x: u32,
    pub y: u32,
}

/// A training pixel with its ray, label and (for foreground) cached depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub pixel: PixelId,
    pub ray: Ray,
    /// Expected termination distance along `ray`; meaningful when `mask`.
    pub depth: f64,
    pub color: [f64; 3],
    pub mask: bool,
}

impl SurfaceSample {
    pub fn surface_point(&self) -> Vec3 {
        self.ray.origin + self.ray.dir * self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualRay {
    pub ray: Ray,
    pub label: [f64; 3],
    pub source: PixelId,
    pub d_theta: f64,
    pub d_phi: f64,
}

/// Casts a virtual ray towards the sample's surface point from distance
/// `depth`, with elevation and azimuth offsets drawn uniformly from
/// `[-eta, eta]`.
pub fn perturb_ray<R: Rng + ?Sized>(s: &SurfaceSample, eta: f64, rng: &mut R) -> Result<VirtualRay> {
    if !s.mask {
        return Err(Error::invalid(format!(
            "pixel {:?} is background and has no surface point",
            s.pixel
        )));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&eta) {
        return Err(Error::invalid(format!("cone half-angle {eta} outside [0, pi/2)")));
    }
    let (d_theta, d_phi) = if eta > 0.0 {
        (rng.random_range(-eta..=eta), rng.random_range(-eta..=eta))
    } else {
        (0.0, 0.0)
    };
    if d_theta == 0.0 && d_phi == 0.0 {
        return Ok(VirtualRay {
            ray: s.ray,
            label: s.color,
            source: s.pixel,
            d_theta,
            d_phi,
        });
    }
    let v = s.surface_point();
    let back = spherical_from_dir(&(-s.ray.dir))?;
    let theta = (back.theta + d_theta).clamp(-POLE_GUARD, POLE_GUARD);
    let offset = dir_from_spherical(SphericalDir {
        theta,
        phi: back.phi + d_phi,
    });
    let origin = v + offset * s.depth;
    let dir = (v - origin) / s.depth;
    Ok(VirtualRay {
        ray: Ray {
            origin,
            dir: dir.normalize(),
            t_near: s.ray.t_near,
            t_far: s.ray.t_far,
        },
        label: s.color,
        source: s.pixel,
        d_theta,
        d_phi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Independent draw per ray.
    PerRay,
    /// One draw per iteration applied to the whole batch.
    PerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrcParams {
    pub eta: f64,
    pub probability: f64,
    pub granularity: Granularity,
}

/// A batch entry after casting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRay {
    pub ray: Ray,
    pub label: [f64; 3],
    pub mask: bool,
    pub pixel: PixelId,
    /// Set for virtual rays.
    pub offsets: Option<(f64, f64)>,
}

impl BatchRay {
    pub fn from_sample(s: &SurfaceSample) -> Self {
        Self {
            ray: s.ray,
            label: s.color,
            mask: s.mask,
            pixel: s.pixel,
            offsets: None,
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.offsets.is_some()
    }
}

/// Replaces each eligible sample by a virtual ray with the configured
/// probability. Slot `i` draws from its own stream keyed by `(seed,
/// iteration, i, pixel)`, so the result does not depend on evaluation order.
/// Samples flagged ineligible (background, or without a usable surface point)
/// pass through unchanged.
pub fn make_rrc_batch(
    samples: &[SurfaceSample],
    eligible: &[bool],
    params: &RrcParams,
    seed: u64,
    iteration: u64,
) -> Result<Vec<BatchRay>> {
    if eligible.len() != samples.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} eligibility flags", samples.len()),
            got: format!("{}", eligible.len()),
        });
    }
    if !(0.0..=1.0).contains(&params.probability) {
        return Err(Error::invalid(format!("probability {} outside [0, 1]", params.probability)));
    }
    let whole_batch = match params.granularity {
        Granularity::PerRay => None,
        Granularity::PerIteration => {
            let mut rng = keyed_rng(seed, &[stream::RRC, iteration]);
            Some(rng.random::<f64>() < params.probability)
        }
    };
    samples
        .iter()
        .zip(eligible)
        .enumerate()
        .map(|(slot, (s, &ok))| {
            if !(ok && s.mask) || params.probability == 0.0 {
                return Ok(BatchRay::from_sample(s));
            }
            let p = s.pixel;
            let mut rng = keyed_rng(
                seed,
                &[stream::RRC, iteration, slot as u64, p.image as u64, p.y as u64, p.x as u64],
            );
            let take = match whole_batch {
                Some(t) => t,
                None => rng.random::<f64>() < params.probability,
            };
            if !take {
                return Ok(BatchRay::from_sample(s));
            }
            let v = perturb_ray(s, params.eta, &mut rng)?;
            Ok(BatchRay {
                ray: v.ray,
                label: v.label,
                mask: true,
                pixel: v.source,
                offsets: Some((v.d_theta, v.d_phi)),
            })
        })
        .collect()
}

/// Per-image `(depth, opacity)` grids rendered from the stage-1 field.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCache {
    pub images: Vec<Image>,
}

impl DepthCache {
    pub fn from_parts(depth: &[Image], opacity: &[Image]) -> Result<Self> {
        if depth.len() != opacity.len() {
            return Err(Error::invalid("depth and opacity lists differ in length"));
        }
        let images = depth
            .iter()
            .zip(opacity)
            .map(|(d, o)| {
                if d.channels != 1 || !d.same_shape(o) {
                    return Err(Error::invalid("depth and opacity must be matching 1-channel images"));
                }
                let data = d.data.iter().zip(&o.data).flat_map(|(&a, &b)| [a, b]).collect();
                Image::from_data(d.width, d.height, 2, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }

    pub fn depth(&self, image: u32, x: u32, y: u32) -> f64 {
        self.images[image as usize].pixel(x, y)[0] as f64
    }

    pub fn opacity(&self, image: u32, x: u32, y: u32) -> f64 {
        self.images[image as usize].pixel(x, y)[1] as f64
    }

    pub fn file_name(image: usize) -> String {
        format!("depth_{image:03}.rfim")
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let p = dir.join(Self::file_name(i));
                img.save_raw(&p)?;
                Ok(p)
            })
            .collect()
    }

    pub fn load(dir: &Path, count: usize) -> Result<Self> {
        let images = (0..count)
            .map(|i| {
                let p = dir.join(Self::file_name(i));
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        what: format!("depth cache {}", p.display()),
                        remedy: "run stage-1 training first; it writes the depth cache".into(),
                    });
                }
                let img = Image::load_raw(&p)?;
                if img.channels != 2 {
                    return Err(Error::Format {
                        path: p,
                        reason: "depth cache entries have two channels".into(),
                    });
                }
                Ok(img)
            })
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(dir: Vec3, depth: f64) -> SurfaceSample {
        SurfaceSample {
            pixel: PixelId { image: 0, x: 3, y: 4 },
            ray: Ray::new(Vec3::new(0.0, -4.0, 1.0), dir.normalize(), 2.0, 6.0).unwrap(),
            depth,
            color: [0.2, 0.4, 0.6],
            mask: true,
        }
    }

    #[test]
    fn zero_cone_is_identity() {
        let s = sample(Vec3::new(0.1, 1.0, -0.2), 3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = perturb_ray(&s, 0.0, &mut rng).unwrap();
        assert_eq!(v.ray, s.ray);
        assert_eq!(v.label, s.color);
    }

    #[test]
    fn virtual_ray_passes_through_surface_point() {
        let s = sample(Vec3::new(0.1, 1.0, -0.2), 3.5);
        let v_pt = s.surface_point();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let v = perturb_ray(&s, 30f64.to_radians(), &mut rng).unwrap();
            assert!(((v.ray.origin - v_pt).norm() - s.depth).abs() < 1e-9);
            assert!((v.ray.at(s.depth) - v_pt).norm() < 1e-9);
            assert!(v.d_theta.abs() <= 30f64.to_radians() && v.d_phi.abs() <= 30f64.to_radians());
            assert_eq!((v.ray.t_near, v.ray.t_far), (2.0, 6.0));
        }
    }

    #[test]
    fn pole_is_guarded() {
        // looking straight down: the reverse direction is the +z pole
        let s = sample(-Vec3::z(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = perturb_ray(&s, 1.2, &mut rng).unwrap();
            let back = -v.ray.dir;
            assert!(back.z <= POLE_GUARD.sin() + 1e-12);
            assert!((v.ray.at(2.0) - s.surface_point()).norm() < 1e-9);
        }
    }

    #[test]
    fn background_is_rejected() {
        let mut s = sample(Vec3::y(), 3.0);
        s.mask = false;
        assert!(perturb_ray(&s, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_probability_edges() {
        let samples: Vec<_> = (0..50).map(|i| sample(Vec3::new(0.01 * i as f64, 1.0, 0.0), 3.0)).collect();
        let ok = vec![true; samples.len()];
        let none = make_rrc_batch(
            &samples,
            &ok,
            &RrcParams { eta: 0.5, probability: 0.0, granularity: Granularity::PerRay },
            9,
            0,
        )
        .unwrap();
        assert!(none.iter().zip(&samples).all(|(b, s)| *b == BatchRay::from_sample(s)));
        let all = make_rrc_batch(
            &samples,
            &ok,
            &RrcParams { eta: 0.0, probability: 1.0, granularity: Granularity::PerRay },
            9,
            0,
        )
        .unwrap();
        assert!(all.iter().zip(&samples).all(|(b, s)| b.ray == s.ray && b.label == s.color && b.is_virtual()));
        let per_iter = make_rrc_batch(
            &samples,
            &ok,
            &RrcParams { eta: 0.5, probability: 0.5, granularity: Granularity::PerIteration },
            9,
            4,
        )
        .unwrap();
        let n = per_iter.iter().filter(|b| b.is_virtual()).count();
        assert!(n == 0 || n == samples.len());
    }

    #[test]
    fn depth_cache_round_trip() {
        let d = Image::from_data(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let o = Image::from_data(2, 1, 1, vec![1.0, 0.2]).unwrap();
        let cache = DepthCache::from_parts(&[d], &[o]).unwrap();
        assert_eq!((cache.depth(0, 1, 0), cache.opacity(0, 1, 0)), (4.0, 0.2f32 as f64));
        let dir = tempfile::tempdir().unwrap();
        cache.save(dir.path()).unwrap();
        assert_eq!(DepthCache::load(dir.path(), 1).unwrap(), cache);
        assert!(matches!(DepthCache::load(dir.path(), 2), Err(Error::MissingArtifact { .. })));
    }
}
