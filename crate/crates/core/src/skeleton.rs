//! Kinematic tree, forward kinematics and linear blend skinning.
//!
//! Bone `b` carries a local transform `g_b = [R(xi_b), J_b - J_parent]`
//! (the root uses `J_root + root_translation`), and world transforms compose
//! root to leaf: `G_b = G_parent * g_b`. Vertices are posed with the blended
//! skinning transforms `A_b = G_b(xi) * G_b(xi_rest)^-1`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3};

use crate::geometry::TriangleMesh;
use crate::{Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

fn hat(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula for an axis-angle vector.
pub fn rotation_from_axis_angle(w: &Vec3) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation and its partial derivatives with respect to the three
/// axis-angle components.
pub fn rotation_with_derivatives(w: &Vec3) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    // c = A'(theta)/theta, d = B'(theta)/theta
    let (c, d) = if theta < 1e-2 {
        (
            -1.0 / 3.0 + theta2 / 30.0 - theta2 * theta2 / 840.0,
            -1.0 / 12.0 + theta2 / 180.0 - theta2 * theta2 / 6720.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        (
            (theta * co - s) / (theta2 * theta),
            (theta * s - 2.0 * (1.0 - co)) / (theta2 * theta2),
        )
    };
    let k = hat(w);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    let dr = [0, 1, 2].map(|i| {
        let e = hat(&basis[i]);
        e * a + (e * k + k * e) * b + (k * c + k2 * d) * w[i]
    });
    (r, dr)
}

/// Wraps an axis-angle vector so its angle lies in `[0, pi]`.
pub fn canonical_axis_angle(w: &Vec3) -> Vec3 {
    let theta = w.norm();
    if theta <= core::f64::consts::PI {
        return *w;
    }
    let axis = w / theta;
    let mut wrapped = theta % core::f64::consts::TAU;
    if wrapped > core::f64::consts::PI {
        wrapped -= core::f64::consts::TAU;
    }
    axis * wrapped
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    rest_pose: Vec<Vec3>,
    /// Parents precede children.
    order: Vec<usize>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, rest_pose: Vec<Vec3>) -> Result<Self> {
        let n = joints.len();
        if n == 0 {
            return Err(Error::InvalidRig("skeleton has no bones".into()));
        }
        if rest_pose.len() != n {
            return Err(Error::InvalidRig(format!("{} rest rotations for {} bones", rest_pose.len(), n)));
        }
        let roots: Vec<usize> = (0..n).filter(|&b| joints[b].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidRig(format!("expected exactly one root, found {}", roots.len())));
        }
        let mut children = vec![Vec::new(); n];
        for (b, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= n {
                    return Err(Error::InvalidRig(format!("bone {b} has parent {p} out of range")));
                }
                children[p].push(b);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![roots[0]];
        while let Some(b) = stack.pop() {
            order.push(b);
            stack.extend(children[b].iter().rev());
        }
        if order.len() != n {
            return Err(Error::InvalidRig("parent relation has a cycle".into()));
        }
        Ok(Self {
            joints,
            rest_pose: rest_pose.iter().map(canonical_axis_angle).collect(),
            order,
        })
    }

    pub fn bone_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn parent(&self, bone: usize) -> Option<usize> {
        self.joints[bone].parent
    }

    pub fn rest_joints(&self) -> Vec<Vec3> {
        self.joints.iter().map(|j| j.rest_position).collect()
    }

    pub fn rest_rotations(&self) -> &[Vec3] {
        &self.rest_pose
    }

    /// The rest pose with zero root translation.
    pub fn rest_pose(&self) -> Pose {
        Pose {
            rotations: self.rest_pose.clone(),
            root_translation: Vec3::zeros(),
        }
    }

    /// Bones in parent-before-child order.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_ancestor_or_self(&self, ancestor: usize, bone: usize) -> bool {
        let mut cur = Some(bone);
        while let Some(b) = cur {
            if b == ancestor {
                return true;
            }
            cur = self.joints[b].parent;
        }
        false
    }

    fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.rotations.len() != self.bone_count() {
            return Err(Error::shape(format!(
                "pose has {} rotations, skeleton has {} bones",
                pose.rotations.len(),
                self.bone_count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// Axis-angle per bone; the root's rotation is the global orientation.
    pub rotations: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    /// Builds a pose with every rotation wrapped to an angle of at most pi.
    pub fn new(rotations: Vec<Vec3>, root_translation: Vec3) -> Self {
        Self {
            rotations: rotations.iter().map(canonical_axis_angle).collect(),
            root_translation,
        }
    }

    /// Number of optimization parameters: three per bone plus translation.
    pub fn parameter_count(&self) -> usize {
        3 * self.rotations.len() + 3
    }

    pub fn to_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for r in &self.rotations {
            out.extend_from_slice(r.as_slice());
        }
        out.extend_from_slice(self.root_translation.as_slice());
        out
    }

    pub fn from_parameters(params: &[f64]) -> Self {
        let bones = (params.len() - 3) / 3;
        let rotations = (0..bones)
            .map(|b| Vec3::new(params[3 * b], params[3 * b + 1], params[3 * b + 2]))
            .collect();
        let t = &params[3 * bones..];
        Self {
            rotations,
            root_translation: Vec3::new(t[0], t[1], t[2]),
        }
    }
}

/// Per-vertex sparse skinning weights; each row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SkinWeights {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, bone_count: usize) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(b, w) in row {
                if b >= bone_count {
                    return Err(Error::InvalidRig(format!("vertex {i} weights bone {b} of {bone_count}")));
                }
                if !(w >= 0.0) {
                    return Err(Error::InvalidRig(format!("vertex {i} has negative weight {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidRig(format!("vertex {i} weights sum to {sum}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rest-pose mesh bound to a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedMesh {
    mesh: TriangleMesh,
    skeleton: Skeleton,
    weights: SkinWeights,
}

impl SkinnedMesh {
    pub fn new(mesh: TriangleMesh, skeleton: Skeleton, weights: SkinWeights) -> Result<Self> {
        if weights.len() != mesh.vertices().len() {
            return Err(Error::InvalidRig(format!(
                "{} weight rows for {} vertices",
                weights.len(),
                mesh.vertices().len()
            )));
        }
        if weights.rows.iter().flatten().any(|&(b, _)| b >= skeleton.bone_count()) {
            return Err(Error::InvalidRig("weights reference a missing bone".into()));
        }
        Ok(Self {
            mesh,
            skeleton,
            weights,
        })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn weights(&self) -> &SkinWeights {
        &self.weights
    }

    /// Vertical (z) extent of the rest-pose mesh, the normalizer for joint errors.
    pub fn body_height(&self) -> f64 {
        self.mesh.bounding_box().map_or(0.0, |(lo, hi)| hi.z - lo.z)
    }
}

/// World transforms `G_b` for every bone.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>> {
    skeleton.check_pose(pose)?;
    let mut out = vec![RigidTransform::identity(); skeleton.bone_count()];
    for &b in &skeleton.order {
        let joint = &skeleton.joints[b];
        let rotation = rotation_from_axis_angle(&pose.rotations[b]);
        out[b] = match joint.parent {
            None => RigidTransform {
                rotation,
                translation: joint.rest_position + pose.root_translation,
            },
            Some(p) => out[p].compose(&RigidTransform {
                rotation,
                translation: joint.rest_position - skeleton.joints[p].rest_position,
            }),
        };
    }
    Ok(out)
}

/// `A_b = G_b(pose) * G_b(rest)^-1` for every bone.
pub fn skinning_transforms(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>> {
    let posed = forward_kinematics(skeleton, pose)?;
    let rest = forward_kinematics(skeleton, &skeleton.rest_pose())?;
    Ok(posed.iter().zip(&rest).map(|(g, g0)| g.compose(&g0.inverse())).collect())
}

/// Linear blend skinning. Faces and colors are preserved.
pub fn skin(skinned: &SkinnedMesh, pose: &Pose) -> Result<TriangleMesh> {
    let transforms = skinning_transforms(&skinned.skeleton, pose)?;
    let vertices = skinned
        .mesh
        .vertices()
        .iter()
        .zip(&skinned.weights.rows)
        .map(|(v, row)| {
            let mut rot = Matrix3::zeros();
            let mut trans = Vec3::zeros();
            for &(b, w) in row {
                rot += transforms[b].rotation * w;
                trans += transforms[b].translation * w;
            }
            rot * v + trans
        })
        .collect();
    skinned.mesh.with_vertices(vertices)
}

/// 3D joint locations `A_b J_b`.
pub fn joint_positions(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Vec3>> {
    let transforms = skinning_transforms(skeleton, pose)?;
    Ok(transforms
        .iter()
        .zip(&skeleton.joints)
        .map(|(a, j)| a.apply(&j.rest_position))
        .collect())
}

/// Joint positions and their Jacobian: a `3B x (3B + 3)` matrix whose rows
/// are joint coordinates and whose columns follow [`Pose::to_parameters`].
pub fn joint_positions_jacobian(skeleton: &Skeleton, pose: &Pose) -> Result<(Vec<Vec3>, DMatrix<f64>)> {
    let n = skeleton.bone_count();
    let world = forward_kinematics(skeleton, pose)?;
    let positions = joint_positions(skeleton, pose)?;
    let mut jac = DMatrix::zeros(3 * n, 3 * n + 3);
    // world rotation of each bone's parent frame
    let parent_rot: Vec<Matrix3<f64>> = (0..n)
        .map(|b| skeleton.parent(b).map_or(Matrix3::identity(), |p| world[p].rotation))
        .collect();
    let derivs: Vec<_> = pose.rotations.iter().map(rotation_with_derivatives).collect();
    for a in 0..n {
        let (r, dr) = &derivs[a];
        let q = parent_rot[a];
        // world-frame generators for bone a's three rotation parameters
        let gens = [0, 1, 2].map(|k| q * dr[k] * r.transpose() * q.transpose());
        let origin = world[a].translation;
        for b in 0..n {
            if !skeleton.is_ancestor_or_self(a, b) {
                continue;
            }
            let rel = positions[b] - origin;
            for k in 0..3 {
                let d = gens[k] * rel;
                for i in 0..3 {
                    jac[(3 * b + i, 3 * a + k)] = d[i];
                }
            }
        }
    }
    for b in 0..n {
        for i in 0..3 {
            jac[(3 * b + i, 3 * n + i)] = 1.0;
        }
    }
    Ok((positions, jac))
}
