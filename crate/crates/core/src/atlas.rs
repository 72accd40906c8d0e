//! Ray atlas: every mesh vertex stores the normalized mean of the viewing
//! directions of the training pixels that see it. Looking up a query ray
//! returns the interpolated stored direction at its first mesh hit.
//!
//! Sidecar format (little endian): magic `RATL`, `u32` version (1), `u32`
//! vertex count, then per vertex three `f32` direction components, one `u8`
//! validity flag and a `u32` contributing-image count.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, Vec3};
use crate::imageio::ensure_parent;
use crate::mesh::TriMesh;
use crate::render::DirectionPrior;

const MAGIC: &[u8; 4] = b"RATL";
const VERSION: u32 = 1;
const RECORD: usize = 3 * 4 + 1 + 4;

/// Image-plane position of a world point; pixel `(x, y)` covers
/// `[x, x+1) x [y, y+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth.
    pub depth: f64,
}

impl Projection {
    pub fn pixel(&self, cam: &Camera) -> Option<(u32, u32)> {
        let in_bounds = (0.0..cam.width as f64).contains(&self.u) && (0.0..cam.height as f64).contains(&self.v);
        in_bounds.then(|| (self.u.floor() as u32, self.v.floor() as u32))
    }
}

/// `None` when the point is at or behind the camera plane.
pub fn project_vertex(p: &Vec3, cam: &Camera) -> Option<Projection> {
    let local = cam.world_to_camera(p);
    if local.z <= 1e-9 {
        return None;
    }
    Some(Projection {
        u: cam.cx + cam.fx * local.x / local.z,
        v: cam.cy + cam.fy * local.y / local.z,
        depth: local.z,
    })
}

/// True iff the point projects inside the image and nothing on the mesh is hit
/// more than `eps` before it along the camera-to-point segment.
pub fn vertex_visible(p: &Vec3, cam: &Camera, bvh: &Bvh, eps: f64) -> bool {
    let Some(proj) = project_vertex(p, cam) else {
        return false;
    };
    if proj.pixel(cam).is_none() {
        return false;
    }
    let offset = p - cam.center();
    let dist = offset.norm();
    if dist <= eps {
        return true;
    }
    bvh.intersect(&cam.center(), &(offset / dist), 0.0, dist - eps).is_none()
}

/// Per-pixel unit viewing directions of one training image.
#[derive(Debug, Clone)]
pub struct RayMap {
    pub image: usize,
    pub width: u32,
    pub height: u32,
    pub dirs: Vec<Vec3>,
}

impl RayMap {
    pub fn from_camera(image: usize, cam: &Camera) -> Result<Self> {
        let mut dirs = Vec::with_capacity(cam.pixel_count());
        for y in 0..cam.height {
            for x in 0..cam.width {
                dirs.push(cam.pixel_center_ray(x, y)?.dir);
            }
        }
        Ok(Self {
            image,
            width: cam.width,
            height: cam.height,
            dirs,
        })
    }

    pub fn at(&self, x: u32, y: u32) -> Vec3 {
        self.dirs[(y * self.width + x) as usize]
    }
}

#[derive(Debug, Clone)]
pub struct RayAtlas {
    mesh: TriMesh,
    bvh: Bvh,
    /// Unit for valid vertices, zero otherwise.
    directions: Vec<Vec3>,
    /// Number of images that see each vertex; 0 marks an invalid entry.
    counts: Vec<u32>,
}

impl RayAtlas {
    /// Averages, per vertex, the nearest-pixel ray-map direction of every
    /// camera that sees it.
    pub fn build(mesh: TriMesh, cameras: &[Camera], eps: f64) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("ray atlas needs at least one camera"));
        }
        let maps = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| RayMap::from_camera(i, c))
            .collect::<Result<Vec<_>>>()?;
        let bvh = Bvh::build(&mesh);
        let (directions, counts): (Vec<Vec3>, Vec<u32>) = mesh
            .vertices
            .par_iter()
            .map(|p| {
                let mut sum = Vec3::zeros();
                let mut count = 0u32;
                for (cam, map) in cameras.iter().zip(&maps) {
                    if !vertex_visible(p, cam, &bvh, eps) {
                        continue;
                    }
                    let (x, y) = project_vertex(p, cam)
                        .and_then(|q| q.pixel(cam))
                        .expect("visible vertices project into the image");
                    sum += map.at(x, y);
                    count += 1;
                }
                match sum.try_normalize(1e-12) {
                    Some(d) if count > 0 => (d, count),
                    _ => (Vec3::zeros(), 0),
                }
            })
            .unzip();
        Ok(Self {
            mesh,
            bvh,
            directions,
            counts,
        })
    }

    pub fn from_parts(mesh: TriMesh, directions: Vec<Vec3>, counts: Vec<u32>) -> Result<Self> {
        let n = mesh.vertices.len();
        if directions.len() != n || counts.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} atlas entries"),
                got: format!("{} directions, {} counts", directions.len(), counts.len()),
            });
        }
        let directions = directions
            .into_iter()
            .zip(&counts)
            .map(|(d, &c)| if c > 0 { d.try_normalize(1e-12).unwrap_or_else(Vec3::zeros) } else { Vec3::zeros() })
            .collect();
        let bvh = Bvh::build(&mesh);
        Ok(Self {
            mesh,
            bvh,
            directions,
            counts,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn direction(&self, vertex: usize) -> Option<Vec3> {
        (self.counts[vertex] > 0).then(|| self.directions[vertex])
    }

    pub fn count(&self, vertex: usize) -> u32 {
        self.counts[vertex]
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.counts.iter().filter(|&&c| c > 0).count() as f64 / self.counts.len() as f64
    }

    /// Interpolated direction at the first mesh hit within the ray bounds;
    /// invalid vertices are dropped and the remaining weights renormalized.
    pub fn lookup_ray(&self, ray: &Ray) -> Option<Vec3> {
        let hit = self.bvh.intersect(&ray.origin, &ray.dir, ray.t_near, ray.t_far)?;
        let tri = self.mesh.triangles[hit.triangle];
        let mut sum = Vec3::zeros();
        let mut weight = 0.0;
        for (k, &v) in tri.iter().enumerate() {
            if self.counts[v as usize] > 0 {
                sum += self.directions[v as usize] * hit.bary[k];
                weight += hit.bary[k];
            }
        }
        if weight <= 0.0 {
            return None;
        }
        (sum / weight).try_normalize(1e-12)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut buf = Vec::with_capacity(12 + RECORD * self.counts.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.counts.len() as u32).to_le_bytes());
        for (d, &c) in self.directions.iter().zip(&self.counts) {
            for k in 0..3 {
                buf.extend_from_slice(&(d[k] as f32).to_le_bytes());
            }
            buf.push(u8::from(c > 0));
            buf.extend_from_slice(&c.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Loads a sidecar for `mesh`; the vertex count must match.
    pub fn load(path: &Path, mesh: TriMesh) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_owned(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing RATL header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(bad(format!("unsupported atlas version {}", word(4))));
        }
        let n = word(8) as usize;
        if n != mesh.vertices.len() {
            return Err(bad(format!("atlas has {n} entries, mesh has {} vertices", mesh.vertices.len())));
        }
        if bytes.len() != 12 + RECORD * n {
            return Err(bad("payload length does not match header".into()));
        }
        let mut directions = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for rec in bytes[12..].chunks_exact(RECORD) {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            let valid = rec[12] != 0;
            let count = u32::from_le_bytes(rec[13..17].try_into().unwrap());
            if valid != (count > 0) {
                return Err(bad("validity flag disagrees with count".into()));
            }
            directions.push(Vec3::new(f(0), f(1), f(2)));
            counts.push(count);
        }
        Self::from_parts(mesh, directions, counts)
    }
}

impl DirectionPrior for RayAtlas {
    fn lookup(&self, ray: &Ray) -> Option<Vec3> {
        self.lookup_ray(ray)
    }
}
