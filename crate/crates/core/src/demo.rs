//! A bundled 24-bone humanoid and a box, so everything runs without licensed
//! body-model data.
//!
//! The body stands in a T-pose facing +x with z up (its left is +y), about
//! 1.3 units tall and centered on the origin. The surface is extracted from a
//! union of capsules with surface nets, which gives a closed mesh.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::geometry::TriangleMesh;
use crate::skeleton::{Joint, Pose, Skeleton, SkinWeights, SkinnedMesh};
use crate::{Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const PARENTS: [i32; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

const SHIRT: [f64; 3] = [0.2, 0.35, 0.7];
const PANTS: [f64; 3] = [0.25, 0.25, 0.32];
const SHOES: [f64; 3] = [0.1, 0.08, 0.08];
const SKIN: [f64; 3] = [0.85, 0.64, 0.5];
const HAIR: [f64; 3] = [0.3, 0.2, 0.1];

fn rest_positions() -> [Vec3; 24] {
    // left side; right side mirrors y
    let l = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    [
        l(0.0, 0.0, 0.0),
        l(0.0, 0.08, -0.06),
        l(0.0, -0.08, -0.06),
        l(0.0, 0.0, 0.08),
        l(0.01, 0.09, -0.33),
        l(0.01, -0.09, -0.33),
        l(0.0, 0.0, 0.18),
        l(0.0, 0.09, -0.57),
        l(0.0, -0.09, -0.57),
        l(0.0, 0.0, 0.27),
        l(0.08, 0.09, -0.62),
        l(0.08, -0.09, -0.62),
        l(0.0, 0.0, 0.41),
        l(0.0, 0.05, 0.36),
        l(0.0, -0.05, 0.36),
        l(0.0, 0.0, 0.5),
        l(0.0, 0.15, 0.37),
        l(0.0, -0.15, 0.37),
        l(0.0, 0.35, 0.37),
        l(0.0, -0.35, 0.37),
        l(0.0, 0.53, 0.37),
        l(0.0, -0.53, 0.37),
        l(0.0, 0.6, 0.37),
        l(0.0, -0.6, 0.37),
    ]
}

/// Capsule `(a, b, radius)` owned by a bone.
struct Capsule {
    bone: usize,
    a: Vec3,
    b: Vec3,
    radius: f64,
}

fn capsules(j: &[Vec3; 24]) -> Vec<Capsule> {
    let c = |bone: usize, a: Vec3, b: Vec3, radius: f64| Capsule { bone, a, b, radius };
    let mut out = vec![
        c(0, j[0], j[3], 0.105),
        c(0, j[0] + Vec3::new(0.0, 0.0, -0.04), j[0] + Vec3::new(0.0, 0.0, -0.04), 0.105),
        c(3, j[3], j[6], 0.11),
        c(6, j[6], j[9], 0.115),
        c(9, j[9], j[12], 0.09),
        c(12, j[12], j[15], 0.045),
        c(15, j[15] + Vec3::new(0.0, 0.0, 0.05), j[15] + Vec3::new(0.01, 0.0, 0.06), 0.09),
    ];
    for side in [0, 1] {
        let s = |left: usize| left + side;
        out.extend([
            c(0, j[0], j[s(1)], 0.075),
            c(s(1), j[s(1)], j[s(4)], 0.06),
            c(s(4), j[s(4)], j[s(7)], 0.045),
            c(s(7), j[s(7)], j[s(10)], 0.035),
            c(s(10), j[s(10)], j[s(10)] + Vec3::new(0.05, 0.0, 0.0), 0.03),
            c(9, j[9], j[s(13)], 0.07),
            c(s(13), j[s(13)], j[s(16)], 0.055),
            c(s(16), j[s(16)], j[s(18)], 0.045),
            c(s(18), j[s(18)], j[s(20)], 0.038),
            c(s(20), j[s(20)], j[s(22)], 0.033),
            c(s(22), j[s(22)], j[s(22)] + (j[s(22)] - j[s(20)]) * 0.5, 0.03),
        ]);
    }
    out
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 == 0.0 { 0.0 } else { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) };
    (p - (a + ab * s)).norm()
}

fn bone_color(bone: usize, p: &Vec3, head: &Vec3) -> Vec3 {
    let c = match bone {
        0 | 1 | 2 | 4 | 5 => PANTS,
        3 | 6 | 9 | 13 | 14 | 16 | 17 => SHIRT,
        7 | 8 | 10 | 11 => SHOES,
        15 if p.z > head.z + 0.07 || (p.x < head.x - 0.03 && p.z > head.z) => HAIR,
        _ => SKIN,
    };
    Vec3::from(c)
}

/// Closed triangle mesh of `{sdf < 0}` sampled on a grid of the given
/// spacing over `[lo, hi]` (surface nets).
pub fn surface_nets(sdf: impl Fn(&Vec3) -> f64, lo: Vec3, hi: Vec3, spacing: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    // pad by one cell so the boundary is outside
    let lo = lo - Vec3::repeat(spacing);
    let dims: [usize; 3] = [0, 1, 2].map(|k| ((hi[k] + spacing - lo[k]) / spacing).ceil() as usize + 1);
    let idx = |i: usize, j: usize, k: usize| (k * dims[1] + j) * dims[0] + i;
    let point = |i: usize, j: usize, k: usize| lo + Vec3::new(i as f64, j as f64, k as f64) * spacing;
    let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let on_border = i == 0 || j == 0 || k == 0 || i + 1 == dims[0] || j + 1 == dims[1] || k + 1 == dims[2];
                values[idx(i, j, k)] = if on_border { spacing } else { sdf(&point(i, j, k)) };
            }
        }
    }
    let inside = |i: usize, j: usize, k: usize| values[idx(i, j, k)] < 0.0;
    // one vertex per cell that straddles the surface
    let cell_dims = [dims[0] - 1, dims[1] - 1, dims[2] - 1];
    let cidx = |i: usize, j: usize, k: usize| (k * cell_dims[1] + j) * cell_dims[0] + i;
    let mut cell_vertex = vec![usize::MAX; cell_dims[0] * cell_dims[1] * cell_dims[2]];
    let mut vertices = Vec::new();
    const EDGES: [([usize; 3], [usize; 3]); 12] = [
        ([0, 0, 0], [1, 0, 0]),
        ([0, 1, 0], [1, 1, 0]),
        ([0, 0, 1], [1, 0, 1]),
        ([0, 1, 1], [1, 1, 1]),
        ([0, 0, 0], [0, 1, 0]),
        ([1, 0, 0], [1, 1, 0]),
        ([0, 0, 1], [0, 1, 1]),
        ([1, 0, 1], [1, 1, 1]),
        ([0, 0, 0], [0, 0, 1]),
        ([1, 0, 0], [1, 0, 1]),
        ([0, 1, 0], [0, 1, 1]),
        ([1, 1, 0], [1, 1, 1]),
    ];
    for k in 0..cell_dims[2] {
        for j in 0..cell_dims[1] {
            for i in 0..cell_dims[0] {
                let mut sum = Vec3::zeros();
                let mut count = 0;
                for (a, b) in EDGES {
                    let (ia, ib) = ([i + a[0], j + a[1], k + a[2]], [i + b[0], j + b[1], k + b[2]]);
                    let va = values[idx(ia[0], ia[1], ia[2])];
                    let vb = values[idx(ib[0], ib[1], ib[2])];
                    if (va < 0.0) != (vb < 0.0) {
                        let s = va / (va - vb);
                        let pa = point(ia[0], ia[1], ia[2]);
                        let pb = point(ib[0], ib[1], ib[2]);
                        sum += pa + (pb - pa) * s;
                        count += 1;
                    }
                }
                if count > 0 {
                    cell_vertex[cidx(i, j, k)] = vertices.len();
                    vertices.push(sum / count as f64);
                }
            }
        }
    }
    // one quad per grid edge with a sign change, joining the four cells around it
    let mut faces = Vec::new();
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let p = [i, j, k];
                for axis in 0..3 {
                    let mut q = p;
                    q[axis] += 1;
                    if q[axis] >= dims[axis] {
                        continue;
                    }
                    let a_in = inside(p[0], p[1], p[2]);
                    if a_in == inside(q[0], q[1], q[2]) {
                        continue;
                    }
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let cell = |du: usize, dv: usize| {
                        let mut c = p;
                        c[u] -= du;
                        c[v] -= dv;
                        cell_vertex[cidx(c[0], c[1], c[2])]
                    };
                    // counter-clockwise around +axis
                    let mut quad = [cell(1, 1), cell(0, 1), cell(0, 0), cell(1, 0)];
                    if !a_in {
                        quad.reverse();
                    }
                    faces.push([quad[0], quad[1], quad[2]]);
                    faces.push([quad[0], quad[2], quad[3]]);
                }
            }
        }
    }
    (vertices, faces)
}

/// The demo skeleton alone.
pub fn demo_skeleton() -> Skeleton {
    let j = rest_positions();
    let joints = (0..24)
        .map(|b| Joint {
            name: String::from(JOINT_NAMES[b]),
            parent: (PARENTS[b] >= 0).then(|| PARENTS[b] as usize),
            rest_position: j[b],
        })
        .collect();
    Skeleton::new(joints, vec![Vec3::zeros(); 24]).expect("demo skeleton is valid")
}

/// The demo humanoid with surface spacing `spacing` (0.02 is the default).
pub fn demo_humanoid_with_spacing(spacing: f64) -> Result<SkinnedMesh> {
    let skeleton = demo_skeleton();
    let j = rest_positions();
    let caps = capsules(&j);
    let sdf = |p: &Vec3| {
        caps.iter()
            .map(|c| segment_distance(p, &c.a, &c.b) - c.radius)
            .fold(f64::INFINITY, f64::min)
    };
    let (vertices, faces) = surface_nets(sdf, Vec3::new(-0.2, -0.7, -0.7), Vec3::new(0.25, 0.7, 0.7), spacing);
    let mut rows = Vec::with_capacity(vertices.len());
    let mut colors = Vec::with_capacity(vertices.len());
    for p in &vertices {
        let mut per_bone = [f64::INFINITY; 24];
        for c in &caps {
            let d = segment_distance(p, &c.a, &c.b) - c.radius;
            per_bone[c.bone] = per_bone[c.bone].min(d);
        }
        let best = (0..24).min_by(|&a, &b| per_bone[a].total_cmp(&per_bone[b])).expect("24 bones");
        let d_min = per_bone[best];
        // soft blend between bones whose surfaces are within a few millimetres
        let mut near: Vec<(usize, f64)> = (0..24)
            .filter(|&b| per_bone[b] - d_min < 0.04)
            .map(|b| (b, (-(per_bone[b] - d_min) / 0.01).exp()))
            .collect();
        near.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        near.truncate(3);
        let total: f64 = near.iter().map(|e| e.1).sum();
        rows.push(near.iter().map(|&(b, w)| (b, w / total)).collect());
        colors.push(bone_color(best, p, &j[15]));
    }
    let weights = SkinWeights::new(rows, 24)?;
    let mesh = TriangleMesh::new(vertices, faces, colors)?;
    SkinnedMesh::new(mesh, skeleton, weights)
}

pub fn demo_humanoid() -> SkinnedMesh {
    demo_humanoid_with_spacing(0.02).expect("demo humanoid is valid")
}

/// Seated pose: hips flexed forward 90 degrees, knees bent 90 degrees, arms
/// lowered toward the thighs.
pub fn seated_pose() -> Pose {
    let mut r = vec![Vec3::zeros(); 24];
    r[1] = Vec3::new(0.0, -FRAC_PI_2, 0.0);
    r[2] = Vec3::new(0.0, -FRAC_PI_2, 0.0);
    r[4] = Vec3::new(0.0, FRAC_PI_2, 0.0);
    r[5] = Vec3::new(0.0, FRAC_PI_2, 0.0);
    r[16] = Vec3::new(-1.1, 0.0, 0.0);
    r[17] = Vec3::new(1.1, 0.0, 0.0);
    r[18] = Vec3::new(0.0, 0.0, -0.7);
    r[19] = Vec3::new(0.0, 0.0, 0.7);
    Pose::new(r, Vec3::new(-0.05, 0.0, 0.12))
}

/// A box seat under the seated pose.
pub fn demo_seat() -> TriangleMesh {
    TriangleMesh::cuboid(Vec3::new(-0.3, -0.22, -0.75), Vec3::new(0.12, 0.22, -0.03), Vec3::new(0.55, 0.38, 0.2))
}
