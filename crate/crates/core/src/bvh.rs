//! Bounding volume hierarchy for closest-hit ray queries against a mesh.
//!
//! The closest hit is defined independently of tree layout: smallest `t`, ties
//! broken by smallest triangle index. Any valid tree therefore returns the
//! same answer as a brute-force scan.

use crate::geometry::{Aabb, Vec3};
use crate::mesh::TriMesh;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
    /// Weights of the triangle's three vertices, summing to 1.
    pub bary: [f64; 3],
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Triangle ids in leaf order.
    order: Vec<usize>,
    tris: Vec<[Vec3; 3]>,
}

/// Two-sided Möller–Trumbore test. Returns `(t, u, v)` with the hit at
/// `(1-u-v) a + u b + v c`.
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(&q) * inv, u, v))
}

fn tri_bounds(t: &[Vec3; 3]) -> Aabb {
    Aabb {
        min: t[0].inf(&t[1]).inf(&t[2]),
        max: t[0].sup(&t[1]).sup(&t[2]),
    }
}

fn better(candidate: &Hit, best: &Option<Hit>) -> bool {
    match best {
        None => true,
        Some(b) => candidate.t < b.t || (candidate.t == b.t && candidate.triangle < b.triangle),
    }
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|i| mesh.triangle(i)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            Self::build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Self { nodes, order, tris }
    }

    fn build_node(
        tris: &[[Vec3; 3]],
        centroids: &[Vec3],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let bounds = order[start..end]
            .iter()
            .map(|&i| tri_bounds(&tris[i]))
            .reduce(|a, b| a.union(&b))
            .expect("non-empty range");
        let id = nodes.len();
        if end - start <= LEAF_SIZE {
            nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        nodes.push(Node::Leaf { bounds, start, end });
        let (cmin, cmax) = order[start..end].iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), &i| (lo.inf(&centroids[i]), hi.sup(&centroids[i])),
        );
        let axis = (cmax - cmin).imax();
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        let left = Self::build_node(tris, centroids, order, start, mid, nodes);
        let right = Self::build_node(tris, centroids, order, mid, end, nodes);
        nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Closest hit with `t` in `[t_min, t_max]`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let limit = best.map_or(t_max, |b| b.t);
            if node.bounds().padded(1e-9).intersect(origin, &inv, t_min, limit).is_none() {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &i in &self.order[start..end] {
                        if let Some((t, u, v)) = intersect_triangle(origin, dir, &self.tris[i]) {
                            let hit = Hit {
                                t,
                                triangle: i,
                                bary: [1.0 - u - v, u, v],
                            };
                            if t >= t_min && t <= t_max && better(&hit, &best) {
                                best = Some(hit);
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Reference scan over every triangle; same tie rule as [`Bvh::intersect`].
    pub fn intersect_brute(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best = None;
        for (i, tri) in self.tris.iter().enumerate() {
            if let Some((t, u, v)) = intersect_triangle(origin, dir, tri) {
                let hit = Hit {
                    t,
                    triangle: i,
                    bary: [1.0 - u - v, u, v],
                };
                if t >= t_min && t <= t_max && better(&hit, &best) {
                    best = Some(hit);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_triangle_hit() {
        let mesh = TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        let bvh = Bvh::build(&mesh);
        let hit = bvh
            .intersect(&Vec3::new(0.25, 0.25, 1.0), &-Vec3::z(), 0.0, 10.0)
            .unwrap();
        assert!((hit.t - 1.0).abs() < 1e-12);
        assert!((hit.bary[0] - 0.5).abs() < 1e-12);
        assert!(bvh.intersect(&Vec3::new(2.0, 2.0, 1.0), &-Vec3::z(), 0.0, 10.0).is_none());
        assert!(bvh.intersect(&Vec3::new(0.25, 0.25, 1.0), &-Vec3::z(), 0.0, 0.5).is_none());
    }

    #[test]
    fn matches_brute_force_on_random_soup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for i in 0..300u32 {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for _ in 0..3 {
                vertices.push(c + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
            }
            triangles.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        let bvh = Bvh::build(&TriMesh::new(vertices, triangles).unwrap());
        for _ in 0..500 {
            let o = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 3.0);
            let d = (Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0) - o).normalize();
            assert_eq!(bvh.intersect(&o, &d, 0.0, 100.0), bvh.intersect_brute(&o, &d, 0.0, 100.0));
        }
    }
}
