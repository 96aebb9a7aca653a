//! Bounding-volume hierarchy over triangles for nearest-surface queries.

use super::{point_triangle_distance, Aabb, TriMesh, Vec3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 4;

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
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::invalid("distance query against an empty mesh"));
        }
        let mut tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        build(&mut tris, 0, mesh.faces.len(), &mut nodes);
        Ok(Self { tris, nodes })
    }

    /// Exact unsigned distance from `p` to the nearest triangle.
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().dist2(p) >= best * best {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for t in &self.tris[start..end] {
                        best = best.min(point_triangle_distance(p, t));
                    }
                }
                Node::Inner { left, right, .. } => {
                    let (dl, dr) = (self.nodes[left].bounds().dist2(p), self.nodes[right].bounds().dist2(p));
                    // Visit the closer child first.
                    if dl < dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }
}

fn tri_bounds(t: &[Vec3; 3]) -> Aabb {
    Aabb::from_points(t.iter())
}

fn build(tris: &mut [[Vec3; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let bounds = tris[start..end].iter().fold(Aabb::empty(), |b, t| b.merge(&tri_bounds(t)));
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let centroids = Aabb::from_points(
        tris[start..end].iter().map(|t| [0, 1, 2].map(|k| (t[0][k] + t[1][k] + t[2][k]) / 3.0)).collect::<Vec<_>>().iter(),
    );
    let axis = (0..3)
        .max_by(|&a, &b| (centroids.max[a] - centroids.min[a]).total_cmp(&(centroids.max[b] - centroids.min[b])))
        .unwrap();
    let mid = (start + end) / 2;
    let key = |t: &[Vec3; 3]| t[0][axis] + t[1][axis] + t[2][axis];
    tris[start..end].select_nth_unstable_by(mid - start, |a, b| key(a).total_cmp(&key(b)));
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes[id] = Node::Inner { bounds, left, right };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_exhaustive_scan() {
        let mesh = TriMesh::icosphere(7.0, 2);
        let bvh = TriangleBvh::new(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let p = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0)];
            let brute = (0..mesh.faces.len())
                .map(|f| point_triangle_distance(p, &mesh.triangle(f)))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(bvh.distance(p), brute);
        }
        for v in &mesh.vertices {
            assert_eq!(bvh.distance(*v), 0.0);
        }
    }
}
