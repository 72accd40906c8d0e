//! Triangle meshes and isosurface extraction from a sampled density grid.
//!
//! The marching-cubes case table is derived at first use instead of being
//! transcribed: for every corner configuration, each cube face contributes
//! segments between its crossing edges (on a face with two diagonal inside
//! corners, each inside corner is cut off separately), the segments are
//! chained into closed loops, and each loop is oriented so its normal points
//! from the inside corners towards the outside ones. Because the face rule
//! depends only on the face's own corners, neighbouring cubes always agree and
//! the surface is watertight.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::geometry::{Aabb, Vec3};
use crate::imageio::ensure_parent;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Area-weighted, unit length, pointing away from the dense side.
    pub normals: Vec<Vec3>,
}

impl TriMesh {
    /// Builds a mesh and derives area-weighted vertex normals.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        let mut acc = vec![Vec3::zeros(); vertices.len()];
        for t in &triangles {
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            // |cross| is twice the area, so this is area weighting
            let nrm = (b - a).cross(&(c - a));
            for &i in t {
                acc[i as usize] += nrm;
            }
        }
        let normals = acc
            .into_iter()
            .map(|v| v.try_normalize(1e-300).unwrap_or_else(Vec3::z))
            .collect();
        Ok(Self {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|k| self.vertices[k as usize])
    }

    pub fn face_normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// ASCII OBJ with `v`, `vn` and `f v//vn` records.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut out = Vec::new();
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        writeln!(out, "# {} vertices, {} triangles", self.vertices.len(), self.triangles.len()).map_err(io)?;
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
        }
        for n in &self.normals {
            writeln!(out, "vn {} {} {}", n.x, n.y, n.z).map_err(io)?;
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}").map_err(io)?;
        }
        fs::write(path, out).map_err(io)
    }

    /// Reads the subset of OBJ written by [`TriMesh::write_obj`] (plus plain
    /// `f a b c` faces). Normals are recomputed.
    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |line: usize| Error::Format {
            path: path.to_owned(),
            reason: format!("unparsable record on line {}", line + 1),
        };
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts.map(|p| p.parse().map_err(|_| bad(ln))).collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad(ln));
                    }
                    vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|p| {
                            p.split('/')
                                .next()
                                .and_then(|s| s.parse::<u32>().ok())
                                .filter(|&i| i > 0)
                                .map(|i| i - 1)
                                .ok_or_else(|| bad(ln))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad(ln));
                    }
                    triangles.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces as cyclic corner lists.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 2, 6, 7],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

/// Triangles (as edge ids) for one corner configuration.
fn case_triangles(config: u8) -> Vec<[usize; 3]> {
    let inside = |c: usize| config & (1 << c) != 0;
    let mut segments: Vec<[usize; 2]> = Vec::new();
    for face in FACES {
        let crossing: Vec<usize> = (0..4)
            .filter(|&i| inside(face[i]) != inside(face[(i + 1) % 4]))
            .map(|i| edge_between(face[i], face[(i + 1) % 4]))
            .collect();
        match crossing.len() {
            0 => {}
            2 => segments.push([crossing[0], crossing[1]]),
            4 => {
                // two diagonal inside corners: cut each one off
                for i in 0..4 {
                    if inside(face[i]) {
                        let prev = face[(i + 3) % 4];
                        let next = face[(i + 1) % 4];
                        segments.push([edge_between(prev, face[i]), edge_between(face[i], next)]);
                    }
                }
            }
            _ => unreachable!("a face has an even number of crossings"),
        }
    }

    let midpoint = |e: usize| {
        let [a, b] = EDGES[e];
        let pa = CORNERS[a].map(|v| v as f64);
        let pb = CORNERS[b].map(|v| v as f64);
        Vec3::new(pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]) * 0.5
    };
    let corner = |c: usize| Vec3::new(CORNERS[c][0] as f64, CORNERS[c][1] as f64, CORNERS[c][2] as f64);

    let mut tris = Vec::new();
    while let Some(first) = segments.pop() {
        let mut lp = vec![first[0], first[1]];
        loop {
            let tail = *lp.last().unwrap();
            let Some(pos) = segments.iter().position(|s| s[0] == tail || s[1] == tail) else {
                break;
            };
            let s = segments.swap_remove(pos);
            let next = if s[0] == tail { s[1] } else { s[0] };
            if next == lp[0] {
                break;
            }
            lp.push(next);
        }
        // Newell normal of the loop vs. inside -> outside direction
        let mut normal = Vec3::zeros();
        for i in 0..lp.len() {
            let a = midpoint(lp[i]);
            let b = midpoint(lp[(i + 1) % lp.len()]);
            normal += a.cross(&b);
        }
        let mut outward = Vec3::zeros();
        for &e in &lp {
            let [a, b] = EDGES[e];
            let (inn, out) = if inside(a) { (a, b) } else { (b, a) };
            outward += corner(out) - corner(inn);
        }
        if normal.dot(&outward) < 0.0 {
            lp.reverse();
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

fn case_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(case_triangles).collect())
}

/// Regular sample grid over a box: `res` samples per axis, corners included.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub bounds: Aabb,
    pub res: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn sample(field: &dyn DensityField, bounds: Aabb, res: usize) -> Result<Self> {
        if res < 2 {
            return Err(Error::invalid("density grid needs at least 2 samples per axis"));
        }
        let spacing = (bounds.max - bounds.min) / (res - 1) as f64;
        let slices = (0..res)
            .into_par_iter()
            .map(|z| {
                let mut pts = Vec::with_capacity(res * res);
                for y in 0..res {
                    for x in 0..res {
                        pts.push(bounds.min + Vec3::new(x as f64 * spacing.x, y as f64 * spacing.y, z as f64 * spacing.z));
                    }
                }
                field.density(&pts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bounds,
            res,
            values: slices.into_iter().flatten().collect(),
        })
    }

    pub fn spacing(&self) -> Vec3 {
        (self.bounds.max - self.bounds.min) / (self.res - 1) as f64
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(z * self.res + y) * self.res + x]
    }

    fn point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = self.spacing();
        self.bounds.min + Vec3::new(x as f64 * s.x, y as f64 * s.y, z as f64 * s.z)
    }
}

/// Iso level at which one voxel diagonal of material has opacity 0.5:
/// `1 - exp(-sigma * diagonal) = 0.5`.
pub fn default_iso(bounds: &Aabb, res: usize) -> f64 {
    let diag = ((bounds.max - bounds.min) / (res.max(2) - 1) as f64).norm();
    std::f64::consts::LN_2 / diag
}

/// Marching cubes over `field` sampled on a `res^3` grid spanning `bounds`,
/// keeping only the largest connected component.
pub fn extract_mesh(field: &dyn DensityField, bounds: Aabb, res: usize, iso: f64) -> Result<TriMesh> {
    if res < 16 {
        return Err(Error::invalid(format!("grid resolution {res} is below the minimum of 16")));
    }
    let grid = DensityGrid::sample(field, bounds, res)?;
    let mesh = polygonize(&grid, iso)?;
    Ok(largest_component(&mesh))
}

/// Marching cubes on an already sampled grid (all components kept).
pub fn polygonize(grid: &DensityGrid, iso: f64) -> Result<TriMesh> {
    let table = case_table();
    let res = grid.res;
    let mut vertex_of: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();

    for z in 0..res - 1 {
        for y in 0..res - 1 {
            for x in 0..res - 1 {
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let o = CORNERS[c];
                    grid.at(x + o[0], y + o[1], z + o[2])
                });
                let config = vals
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (c, &v)| if v >= iso { acc | (1 << c) } else { acc });
                let case = &table[config as usize];
                if case.is_empty() {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for tri in case {
                    for &e in tri {
                        if edge_vertex[e] != u32::MAX {
                            continue;
                        }
                        let [a, b] = EDGES[e];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        // canonical key: lower corner + axis
                        let axis = (0..3).find(|&i| ca[i] != cb[i]).unwrap();
                        let lo = if ca[axis] < cb[axis] { ca } else { cb };
                        let key = (x + lo[0], y + lo[1], z + lo[2], axis);
                        let idx = *vertex_of.entry(key).or_insert_with(|| {
                            let pa = grid.point(x + ca[0], y + ca[1], z + ca[2]);
                            let pb = grid.point(x + cb[0], y + cb[1], z + cb[2]);
                            let t = ((iso - vals[a]) / (vals[b] - vals[a])).clamp(0.0, 1.0);
                            vertices.push(pa + (pb - pa) * t);
                            (vertices.len() - 1) as u32
                        });
                        edge_vertex[e] = idx;
                    }
                    let t = tri.map(|e| edge_vertex[e]);
                    let [p0, p1, p2] = t.map(|i| vertices[i as usize]);
                    if 0.5 * (p1 - p0).cross(&(p2 - p0)).norm() > 1e-12 {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    if triangles.is_empty() {
        let max_density = grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::EmptySurface { iso, max_density });
    }
    TriMesh::new(vertices, triangles)
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

/// Keeps the connected component with the most triangles; unused vertices are
/// dropped.
pub fn largest_component(mesh: &TriMesh) -> TriMesh {
    let mut parent: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
    for t in &mesh.triangles {
        let r0 = find(&mut parent, t[0]);
        for &v in &t[1..] {
            let r = find(&mut parent, v);
            if r != r0 {
                parent[r as usize] = r0;
            }
        }
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for t in &mesh.triangles {
        *counts.entry(find(&mut parent, t[0])).or_default() += 1;
    }
    // ties go to the smallest root for determinism
    let best = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&r, _)| r);
    let Some(best) = best else {
        return mesh.clone();
    };
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for t in &mesh.triangles {
        if find(&mut parent, t[0]) != best {
            continue;
        }
        triangles.push(t.map(|v| {
            if remap[v as usize] == u32::MAX {
                remap[v as usize] = vertices.len() as u32;
                vertices.push(mesh.vertices[v as usize]);
            }
            remap[v as usize]
        }));
    }
    TriMesh::new(vertices, triangles).expect("remapped indices are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnDensity;

    #[test]
    fn table_cases_are_consistent() {
        let table = case_table();
        assert!(table[0].is_empty());
        assert!(table[255].is_empty());
        assert_eq!(table[1].len(), 1);
        // diagonal inside corners on a face are separated, diagonal outside
        // corners are not
        assert_eq!(table[0b101].len(), 2);
        assert_eq!(table[0b1111_1010].len(), 4);
        // every crossing edge is used, no other edge is
        for c in 0..=255u8 {
            let inside = |k: usize| c & (1 << k) != 0;
            for (e, [a, b]) in EDGES.iter().enumerate() {
                let used = table[c as usize].iter().any(|t| t.contains(&e));
                assert_eq!(used, inside(*a) != inside(*b), "case {c} edge {e}");
            }
        }
    }

    #[test]
    fn single_corner_triangle_faces_outward() {
        // corner 0 inside: the normal should point away from it
        let tri = case_triangles(1)[0];
        let m = |e: usize| {
            let [a, b] = EDGES[e];
            let p = |c: usize| Vec3::new(CORNERS[c][0] as f64, CORNERS[c][1] as f64, CORNERS[c][2] as f64);
            (p(a) + p(b)) * 0.5
        };
        let n = (m(tri[1]) - m(tri[0])).cross(&(m(tri[2]) - m(tri[0])));
        assert!(n.dot(&Vec3::new(1.0, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let density = FnDensity(|p: &Vec3| if p.norm() < 1.0 { 10.0 } else { 0.0 });
        let mesh = extract_mesh(&density, Aabb::cube(1.5), 32, 5.0).unwrap();
        // closed: every undirected edge is shared by exactly two triangles
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!(n.dot(&v.normalize()) > 0.5);
        }
    }

    #[test]
    fn empty_density_is_an_error() {
        let density = FnDensity(|_: &Vec3| 0.0);
        let err = extract_mesh(&density, Aabb::cube(1.0), 16, 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptySurface { .. }));
        assert!(extract_mesh(&density, Aabb::cube(1.0), 8, 1.0).is_err());
    }

    #[test]
    fn keeps_largest_component() {
        let density = FnDensity(|p: &Vec3| {
            let big = (p - Vec3::new(-0.6, 0.0, 0.0)).norm() < 0.6;
            let small = (p - Vec3::new(0.9, 0.0, 0.0)).norm() < 0.3;
            if big || small { 1.0 } else { 0.0 }
        });
        let mesh = extract_mesh(&density, Aabb::cube(1.5), 48, 0.5).unwrap();
        assert!(mesh.vertices.iter().all(|v| v.x < 0.2));
    }

    #[test]
    fn obj_round_trip() {
        let mesh = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        mesh.write_obj(&p).unwrap();
        let back = TriMesh::read_obj(&p).unwrap();
        assert_eq!(back, mesh);
        assert!(TriMesh::new(vec![Vec3::zeros()], vec![[0, 0, 1]]).is_err());
    }
}
