//! Analytic ground-truth scenes: spheres and boxes with procedural albedo, one
//! directional light, black background. Rendering is one primary ray per
//! pixel center with Lambertian shading (and an optional Phong lobe), no
//! shadows.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera, Ray, Vec3};
use crate::imageio::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// Spheres: `2 * cells` longitude by `cells` latitude squares. Boxes:
    /// solid cubes of edge `min extent / cells`.
    Checker { a: [f64; 3], b: [f64; 3], cells: u32 },
    /// Bands of equal height along world `z`.
    Stripes { a: [f64; 3], b: [f64; 3], count: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "shape")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, texture: Texture },
    Box { bounds: Aabb, texture: Texture },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector pointing towards the light.
    pub direction: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phong {
    pub strength: f64,
    pub shininess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub primitives: Vec<Primitive>,
    pub light: Light,
    pub specular: Option<Phong>,
    pub bounds: Aabb,
}

/// Nearest intersection of a primary ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    /// Unit, pointing out of the primitive.
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

fn in_unit(c: [f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl Texture {
    fn colors(&self) -> Vec<[f64; 3]> {
        match *self {
            Texture::Solid { color } => vec![color],
            Texture::Checker { a, b, .. } | Texture::Stripes { a, b, .. } => vec![a, b],
        }
    }
}

impl Primitive {
    fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. } | Primitive::Box { texture, .. } => texture,
        }
    }

    fn extent(&self) -> Aabb {
        match *self {
            Primitive::Sphere { center, radius, .. } => Aabb::new(center.add_scalar(-radius), center.add_scalar(radius)),
            Primitive::Box { bounds, .. } => bounds,
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Primitive::Sphere { center, radius, .. } => (p - center).norm() < radius,
            Primitive::Box { bounds, .. } => (0..3).all(|i| p[i] > bounds.min[i] && p[i] < bounds.max[i]),
        }
    }

    /// Entry distance and outward normal.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t < ray.t_near || t > ray.t_far {
                    return None;
                }
                Some((t, (ray.at(t) - center) / radius))
            }
            Primitive::Box { bounds, .. } => {
                let inv = ray.dir.map(|d| 1.0 / d);
                let (t0, _) = bounds.intersect(&ray.origin, &inv, f64::NEG_INFINITY, f64::INFINITY)?;
                if t0 < ray.t_near || t0 > ray.t_far {
                    return None;
                }
                let p = ray.at(t0);
                // the face whose slab was entered last
                let mut axis = 0;
                let mut best = f64::INFINITY;
                let mut sign = 1.0;
                for i in 0..3 {
                    for (plane, s) in [(bounds.min[i], -1.0), (bounds.max[i], 1.0)] {
                        let d = (p[i] - plane).abs();
                        if d < best {
                            best = d;
                            axis = i;
                            sign = s;
                        }
                    }
                }
                let mut n = Vec3::zeros();
                n[axis] = sign;
                Some((t0, n))
            }
        }
    }

    fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let tex = *self.texture();
        let pick = |odd: bool, a: [f64; 3], b: [f64; 3]| if odd { b } else { a };
        match (tex, *self) {
            (Texture::Solid { color }, _) => color,
            (Texture::Checker { a, b, cells }, Primitive::Sphere { center, radius, .. }) => {
                let q = (p - center) / radius;
                let lat = q.z.clamp(-1.0, 1.0).asin() + 0.5 * PI;
                let lon = q.y.atan2(q.x) + PI;
                let step = PI / cells as f64;
                let i = (lat / step).floor() as i64 + (lon / step).floor() as i64;
                pick(i.rem_euclid(2) == 1, a, b)
            }
            (Texture::Checker { a, b, cells }, Primitive::Box { bounds, .. }) => {
                let ext = bounds.max - bounds.min;
                let edge = ext.min() / cells as f64;
                let r = (p - bounds.min) / edge;
                // nudge inwards so points on faces do not straddle cells
                let i: i64 = (0..3).map(|k| (r[k] - 1e-9 * r[k].signum()).floor() as i64).sum();
                pick(i.rem_euclid(2) == 1, a, b)
            }
            (Texture::Stripes { a, b, count }, prim) => {
                let e = prim.extent();
                let h = (p.z - e.min.z) / (e.max.z - e.min.z) * count as f64;
                pick((h.floor() as i64).rem_euclid(2) == 1, a, b)
            }
        }
    }
}

impl ToyScene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        if (self.light.direction.norm() - 1.0).abs() > 1e-9 || !(self.light.intensity >= 0.0) {
            return Err(Error::invalid("light direction must be unit and intensity non-negative"));
        }
        for p in &self.primitives {
            let e = p.extent();
            if !(self.bounds.contains(&e.min) && self.bounds.contains(&e.max)) {
                return Err(Error::invalid("primitive extends outside the scene bounds"));
            }
            if !p.texture().colors().into_iter().all(in_unit) {
                return Err(Error::invalid("albedo values must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Checkered unit sphere at the origin, lit from above and to the side.
    pub fn checker_sphere() -> Self {
        Self {
            primitives: vec![Primitive::Sphere {
                center: Vec3::zeros(),
                radius: 1.0,
                texture: Texture::Checker {
                    a: [0.85, 0.75, 0.2],
                    b: [0.15, 0.3, 0.8],
                    cells: 6,
                },
            }],
            light: Light {
                direction: Vec3::new(0.5, 0.3, 0.8).normalize(),
                intensity: 1.0,
            },
            specular: None,
            bounds: Aabb::cube(1.2),
        }
    }

    /// The checker sphere with a Phong highlight.
    pub fn specular_sphere() -> Self {
        Self {
            specular: Some(Phong {
                strength: 0.4,
                shininess: 20.0,
            }),
            ..Self::checker_sphere()
        }
    }

    pub fn trace(&self, ray: &Ray) -> Option<SurfaceHit> {
        let mut best: Option<(f64, Vec3, &Primitive)> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(ray) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, p));
                }
            }
        }
        best.map(|(t, normal, p)| {
            let point = ray.at(t);
            SurfaceHit {
                t,
                point,
                normal,
                albedo: p.albedo(&point),
            }
        })
    }

    /// Outgoing radiance towards `-view_dir` at a hit.
    pub fn shade(&self, hit: &SurfaceHit, view_dir: &Vec3) -> [f64; 3] {
        let l = self.light.direction;
        let ndl = hit.normal.dot(&l).max(0.0);
        let spec = match self.specular {
            Some(ph) if ndl > 0.0 => {
                let r = 2.0 * hit.normal.dot(&l) * hit.normal - l;
                ph.strength * r.dot(&(-view_dir)).max(0.0).powf(ph.shininess)
            }
            _ => 0.0,
        };
        hit.albedo.map(|a| ((a * ndl + spec) * self.light.intensity).clamp(0.0, 1.0))
    }

    /// Linear RGB and `{0, 1}` mask through every pixel center.
    pub fn render(&self, cam: &Camera) -> Result<(Image, Image)> {
        self.validate()?;
        if self.primitives.iter().any(|p| p.contains(&cam.center())) {
            return Err(Error::invalid("camera lies inside a primitive"));
        }
        let (w, h) = (cam.width, cam.height);
        let rows = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let ray = cam.pixel_center_ray(x, y)?;
                        Ok(self.trace(&ray).map(|hit| self.shade(&hit, &ray.dir)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rgb = Image::new(w, h, 3);
        let mut mask = Image::new(w, h, 1);
        for (i, px) in rows.into_iter().flatten().enumerate() {
            if let Some(c) = px {
                rgb.data[3 * i..3 * i + 3].copy_from_slice(&c.map(|v| v as f32));
                mask.data[i] = 1.0;
            }
        }
        Ok((rgb, mask))
    }
}
