use alloc::vec::Vec;


use super::TriangleMesh;
use crate::{rng, Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Minimum hit distance; hits closer than this are treated as self-intersections.
pub const EPS_RAY: f64 = 1e-6;

/// Barycentric margin below which a parity crossing counts as grazing an edge.
const EDGE_MARGIN: f64 = 1e-9;
const MAX_PARITY_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(Error::invalid("ray direction must be nonzero and finite"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vec3,
    pub face_index: usize,
    pub barycentric: [f64; 3],
    pub color: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TriangleHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// True when the ray meets the triangle within `EDGE_MARGIN` of an edge,
    /// or runs (nearly) inside its plane.
    pub grazing: bool,
}

/// Möller–Trumbore. Returns the hit of the ray's line with the triangle,
/// including hits slightly outside its edges (flagged `grazing`) so callers can
/// detect ambiguous parity crossings.
pub(crate) fn intersect_triangle(ray: &Ray, tri: &[Vec3; 3]) -> Option<TriangleHit> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm();
    if det.abs() <= 1e-12 * scale {
        // Ray parallel to the plane. It can only graze: flag it if the origin
        // is in the plane and the triangle is in front of it.
        let n = e1.cross(&e2);
        let in_plane = n.dot(&(ray.origin - tri[0])).abs() <= 1e-12 * scale.max(1e-300);
        if in_plane && scale > 0.0 {
            return Some(TriangleHit {
                t: f64::NAN,
                u: 0.0,
                v: 0.0,
                grazing: true,
            });
        }
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(&p) * inv;
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    let w = 1.0 - u - v;
    if u < -EDGE_MARGIN || v < -EDGE_MARGIN || w < -EDGE_MARGIN {
        return None;
    }
    let t = e2.dot(&q) * inv;
    let grazing = u < EDGE_MARGIN || v < EDGE_MARGIN || w < EDGE_MARGIN;
    Some(TriangleHit { t, u, v, grazing })
}

pub(crate) fn make_hit(mesh: &TriangleMesh, ray: &Ray, face: usize, t: f64, u: f64, v: f64) -> Hit {
    let [a, b, c] = mesh.faces()[face];
    let bary = [1.0 - u - v, u, v];
    let colors = mesh.vertex_colors();
    // edge form keeps uniformly colored faces exact
    let color = colors[a] + (colors[b] - colors[a]) * u + (colors[c] - colors[a]) * v;
    Hit {
        distance: t,
        point: ray.at(t),
        face_index: face,
        barycentric: bary,
        color,
    }
}

/// Whether the ray's segment `[t_min, t_max]` may touch the box.
pub(crate) fn slab_test(ray: &Ray, lo: &Vec3, hi: &Vec3, t_min: f64, t_max: f64) -> bool {
    let mut t0 = t_min;
    let mut t1 = t_max;
    for k in 0..3 {
        let inv = 1.0 / ray.direction[k];
        let mut a = (lo[k] - ray.origin[k]) * inv;
        let mut b = (hi[k] - ray.origin[k]) * inv;
        if a.is_nan() || b.is_nan() {
            // origin on a slab plane of a zero-direction axis
            continue;
        }
        if a > b {
            core::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return false;
        }
    }
    true
}

pub(crate) fn triangle_bounds(tri: &[Vec3; 3]) -> (Vec3, Vec3) {
    let lo = tri[0].inf(&tri[1]).inf(&tri[2]);
    let hi = tri[0].sup(&tri[1]).sup(&tri[2]);
    let pad = 1e-9 * (hi - lo).amax().max(1.0);
    (lo - Vec3::repeat(pad), hi + Vec3::repeat(pad))
}

/// Nearest hit with distance greater than [`EPS_RAY`], ties broken by the
/// lowest face index. Brute force over all triangles.
pub fn first_hit(ray: &Ray, mesh: &TriangleMesh) -> Option<Hit> {
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for face in 0..mesh.faces().len() {
        let tri = mesh.triangle(face);
        let (lo, hi) = triangle_bounds(&tri);
        let limit = best.map_or(f64::INFINITY, |b| b.0);
        if !slab_test(ray, &lo, &hi, EPS_RAY, limit) {
            continue;
        }
        if let Some(h) = intersect_triangle(ray, &tri) {
            if h.t.is_nan() || h.u < 0.0 || h.v < 0.0 || h.u + h.v > 1.0 || h.t <= EPS_RAY {
                continue;
            }
            if best.map_or(true, |b| h.t < b.0) {
                best = Some((h.t, face, h.u, h.v));
            }
        }
    }
    best.map(|(t, face, u, v)| make_hit(mesh, ray, face, t, u, v))
}

/// Distances at which a ray crosses the mesh surface (`t > 0`), sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Crossings {
    pub distances: Vec<f64>,
    /// Some crossing grazed an edge or a face plane; the count may be off.
    pub degenerate: bool,
}

impl Crossings {
    /// Parity of crossings strictly before `t`.
    pub fn odd_before(&self, t: f64) -> bool {
        self.distances.partition_point(|&d| d < t) % 2 == 1
    }
}

pub(crate) fn accumulate_crossing(out: &mut Crossings, h: TriangleHit) {
    if h.grazing || h.t.is_nan() {
        if h.t.is_nan() || h.t > -EDGE_MARGIN {
            out.degenerate = true;
        }
        return;
    }
    if h.t.abs() <= 1e-12 {
        // origin on the surface
        out.degenerate = true;
    } else if h.t > 0.0 {
        out.distances.push(h.t);
    }
}

/// All surface crossings along the ray, brute force.
pub fn ray_crossings(ray: &Ray, mesh: &TriangleMesh) -> Crossings {
    let mut out = Crossings::default();
    for face in 0..mesh.faces().len() {
        let tri = mesh.triangle(face);
        let (lo, hi) = triangle_bounds(&tri);
        if !slab_test(ray, &lo, &hi, -1e-9, f64::INFINITY) {
            continue;
        }
        if let Some(h) = intersect_triangle(ray, &tri) {
            accumulate_crossing(&mut out, h);
        }
    }
    out.distances.sort_by(f64::total_cmp);
    out
}

/// Direction of the first parity probe; deliberately not axis-aligned.
pub(crate) fn parity_direction(attempt: usize) -> Vec3 {
    if attempt == 0 {
        return Vec3::new(0.431_750_142_9, 0.576_192_866_3, 0.693_905_510_1).normalize();
    }
    let a = attempt as u64;
    let z = 2.0 * rng::uniform(&[0xD1CE, a, 0]) - 1.0;
    let phi = core::f64::consts::TAU * rng::uniform(&[0xD1CE, a, 1]);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Shared retry loop: probe along the fixed direction, then jittered ones
/// while the crossing count is ambiguous; majority vote if all are ambiguous.
pub(crate) fn parity_vote(point: &Vec3, mut crossings: impl FnMut(&Ray) -> Crossings) -> bool {
    let mut votes_inside = 0;
    let attempts = MAX_PARITY_RETRIES + 1;
    for attempt in 0..attempts {
        let ray = Ray::new(*point, parity_direction(attempt)).expect("unit direction");
        let c = crossings(&ray);
        let inside = c.distances.len() % 2 == 1;
        if !c.degenerate {
            return inside;
        }
        if inside {
            votes_inside += 1;
        }
    }
    2 * votes_inside > attempts
}

/// Ray-crossing parity test. The mesh must be watertight.
pub fn point_inside(point: &Vec3, mesh: &TriangleMesh) -> bool {
    parity_vote(point, |ray| ray_crossings(ray, mesh))
}

/// Parameter interval where the ray is inside the sphere `|p| <= radius`
/// centered at the origin, clipped to `t >= 0`.
pub fn ray_sphere_interval(ray: &Ray, radius: f64) -> Option<(f64, f64)> {
    let b = ray.origin.dot(&ray.direction);
    let c = ray.origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = (-b - s).max(0.0);
    let t1 = -b + s;
    if t1 <= t0 {
        return None;
    }
    Some((t0, t1))
}
