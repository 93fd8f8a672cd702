use alloc::vec::Vec;

use super::intersect::{
    accumulate_crossing, intersect_triangle, make_hit, parity_vote, slab_test, triangle_bounds,
};
use super::{Crossings, Hit, Ray, TriangleMesh, EPS_RAY};
use crate::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: first index into `order`. Interior: index of the left child (the
    /// right child follows the left subtree).
    start: usize,
    count: usize,
    right: usize,
}

/// Triangle mesh with a bounding volume hierarchy. Answers the same queries as
/// the brute-force functions in this module.
#[derive(Debug, Clone)]
pub struct IndexedMesh {
    mesh: TriangleMesh,
    nodes: Vec<Node>,
    order: Vec<usize>,
    bounds: Vec<(Vec3, Vec3)>,
}

impl IndexedMesh {
    pub fn new(mesh: TriangleMesh) -> Self {
        let n = mesh.faces().len();
        let bounds: Vec<_> = (0..n).map(|f| triangle_bounds(&mesh.triangle(f))).collect();
        let centroids: Vec<Vec3> = bounds.iter().map(|(lo, hi)| (lo + hi) * 0.5).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        if n > 0 {
            build(&mut nodes, &mut order, &bounds, &centroids, 0, n);
        }
        Self {
            mesh,
            nodes,
            order,
            bounds,
        }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        self.nodes.first().map(|n| (n.lo, n.hi))
    }

    fn visit(&self, ray: &Ray, t_min: f64, mut limit: impl FnMut() -> f64, mut leaf: impl FnMut(usize)) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack: Vec<usize> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if !slab_test(ray, &node.lo, &node.hi, t_min, limit()) {
                continue;
            }
            if node.count > 0 {
                for &face in &self.order[node.start..node.start + node.count] {
                    let (lo, hi) = &self.bounds[face];
                    if slab_test(ray, lo, hi, t_min, limit()) {
                        leaf(face);
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.start);
            }
        }
    }

    /// Nearest hit beyond [`EPS_RAY`]; ties go to the lowest face index.
    pub fn first_hit(&self, ray: &Ray) -> Option<Hit> {
        let best = core::cell::Cell::new(None::<(f64, usize, f64, f64)>);
        self.visit(
            ray,
            EPS_RAY,
            || best.get().map_or(f64::INFINITY, |b| b.0),
            |face| {
                if let Some(h) = intersect_triangle(ray, &self.mesh.triangle(face)) {
                    if h.t.is_nan() || h.u < 0.0 || h.v < 0.0 || h.u + h.v > 1.0 || h.t <= EPS_RAY {
                        return;
                    }
                    let better = match best.get() {
                        None => true,
                        Some((t, f, _, _)) => h.t < t || (h.t == t && face < f),
                    };
                    if better {
                        best.set(Some((h.t, face, h.u, h.v)));
                    }
                }
            },
        );
        best.get().map(|(t, f, u, v)| make_hit(&self.mesh, ray, f, t, u, v))
    }

    /// Sorted surface crossings at `t > 0`.
    pub fn crossings(&self, ray: &Ray) -> Crossings {
        let mut out = Crossings::default();
        self.visit(ray, -1e-9, || f64::INFINITY, |face| {
            if let Some(h) = intersect_triangle(ray, &self.mesh.triangle(face)) {
                accumulate_crossing(&mut out, h);
            }
        });
        out.distances.sort_by(f64::total_cmp);
        out
    }

    /// Ray-crossing parity test (same retry policy as [`super::point_inside`]).
    pub fn point_inside(&self, point: &Vec3) -> bool {
        if let Some((lo, hi)) = self.bounding_box() {
            if (0..3).any(|k| point[k] < lo[k] || point[k] > hi[k]) {
                return false;
            }
        } else {
            return false;
        }
        parity_vote(point, |ray| self.crossings(ray))
    }

    /// Classifies points at distances `ts` (sorted ascending) along one ray,
    /// counting crossings along the ray itself. Falls back to per-point tests
    /// when the ray grazes the surface.
    pub fn classify_along_ray(&self, ray: &Ray, ts: &[f64]) -> Vec<bool> {
        if self.is_empty() {
            return alloc::vec![false; ts.len()];
        }
        let c = self.crossings(ray);
        if c.degenerate {
            return ts.iter().map(|&t| self.point_inside(&ray.at(t))).collect();
        }
        let origin_inside = self.point_inside(&ray.origin);
        ts.iter().map(|&t| origin_inside ^ c.odd_before(t)).collect()
    }

    /// Fraction of `points` on which probes in opposite directions disagree
    /// about inside/outside. Large values indicate a mesh that is not
    /// watertight. Points where either probe grazes the surface are skipped.
    pub fn parity_instability(&self, points: &[Vec3]) -> f64 {
        let d = super::intersect::parity_direction(0);
        let mut checked = 0usize;
        let mut disagree = 0usize;
        for p in points {
            let a = self.crossings(&Ray::new(*p, d).expect("unit direction"));
            let b = self.crossings(&Ray::new(*p, -d).expect("unit direction"));
            if a.degenerate || b.degenerate {
                continue;
            }
            checked += 1;
            if a.distances.len() % 2 != b.distances.len() % 2 {
                disagree += 1;
            }
        }
        if checked == 0 {
            0.0
        } else {
            disagree as f64 / checked as f64
        }
    }
}

fn build(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    bounds: &[(Vec3, Vec3)],
    centroids: &[Vec3],
    offset: usize,
    len: usize,
) -> usize {
    let items = &mut order[offset..offset + len];
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    let (mut clo, mut chi) = (lo, hi);
    for &f in items.iter() {
        lo = lo.inf(&bounds[f].0);
        hi = hi.sup(&bounds[f].1);
        clo = clo.inf(&centroids[f]);
        chi = chi.sup(&centroids[f]);
    }
    let index = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        start: offset,
        count: len,
        right: 0,
    });
    let extent = chi - clo;
    if len <= LEAF_SIZE || extent.amax() == 0.0 {
        return index;
    }
    let axis = extent.imax();
    let mid = len / 2;
    items.select_nth_unstable_by(mid, |a, b| centroids[*a][axis].total_cmp(&centroids[*b][axis]));
    let left = build(nodes, order, bounds, centroids, offset, mid);
    let right = build(nodes, order, bounds, centroids, offset + mid, len - mid);
    let node = &mut nodes[index];
    node.start = left;
    node.count = 0;
    node.right = right;
    index
}
