//! Conversions between the two representations: a posed mesh becomes a
//! field by supervised fitting, and a field becomes a pose by fitting joint
//! reprojections to keypoints detected in multi-view renders.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::field::{logit, softplus_inverse, VoxelField, FLOOR_OFFSET};
use crate::geometry::{Camera, IndexedMesh, NearestPoint, Projection, TriangleMesh};
use crate::image::Image;
use crate::optim::{cosine_factor, AdamW, SparseAdam};
use crate::render::{render_field, RenderSettings};
use crate::skeleton::{joint_positions, joint_positions_jacobian, Pose, Skeleton};
use crate::{par, rng, Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Activated density standing in for the infinite density inside a mesh.
pub const TAU_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshToFieldConfig {
    pub resolution: usize,
    pub n_points: usize,
    pub iterations: usize,
    /// Adam step for raw densities.
    pub density_lr: f64,
    /// Adam step for color logits.
    pub color_lr: f64,
}

impl Default for MeshToFieldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            n_points: 1000,
            iterations: 10_000,
            density_lr: 100.0,
            color_lr: 0.1,
        }
    }
}

/// Fits a field to a closed mesh: activated density `TAU_MAX` inside and 0
/// outside at points drawn from a standard normal, and nearest-vertex colors
/// at the inside points.
pub fn mesh_to_field<R: Rng + ?Sized>(mesh: &TriangleMesh, config: &MeshToFieldConfig, rng: &mut R) -> Result<VoxelField> {
    if config.n_points == 0 {
        return Err(Error::invalid("mesh_to_field needs at least one sample point"));
    }
    if mesh.is_empty() {
        return Err(Error::invalid("mesh_to_field needs a nonempty mesh"));
    }
    let mut field = VoxelField::filled([config.resolution; 3], FLOOR_OFFSET, 0.0)?;
    let indexed = IndexedMesh::new(mesh.clone());
    let nearest = NearestPoint::new(mesh.vertices());
    let n_params = field.parameters().len();
    let voxels = field.voxel_count();
    let mut opt = SparseAdam::new(n_params, config.density_lr).with_group(voxels..n_params, config.color_lr);
    let radius = field.support_radius();
    let raw_target = softplus_inverse(TAU_MAX);
    let mut scratch = vec![0.0; n_params];
    let mut touched = vec![false; n_params];
    let mut order: Vec<usize> = Vec::new();
    for it in 0..config.iterations {
        let points: Vec<Vec3> = (0..config.n_points)
            .map(|_| Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
            .filter(|p| p.norm() <= radius)
            .collect();
        let inside = par::map_indexed(points.len(), |i| indexed.point_inside(&points[i]));
        let n = config.n_points as f64;
        for (p, &is_in) in points.iter().zip(&inside) {
            let Some((raw, logits)) = field.query_raw(p) else { continue };
            let target = if is_in { raw_target } else { -raw_target };
            // loss: ((raw - target) / raw_target)^2 averaged over the sample set
            let d_raw = 2.0 * (raw - target) / (raw_target * raw_target * n);
            let mut d_color = Vec3::zeros();
            if is_in {
                let v = nearest.nearest(p).expect("nonempty mesh");
                let target_color = mesh.vertex_colors()[v];
                let color = logits.map(crate::field::sigmoid);
                d_color = (color - target_color) * (2.0 / n);
            }
            for (idx, g) in field.query_raw_backward(p, &d_color, d_raw) {
                if !touched[idx] {
                    touched[idx] = true;
                    order.push(idx);
                }
                scratch[idx] += g;
            }
        }
        order.sort_unstable();
        let entries: Vec<(usize, f64)> = order.iter().map(|&i| (i, scratch[i])).collect();
        let scale = cosine_factor(it, config.iterations, 0.01);
        opt.step(field.parameters_mut(), &entries, scale);
        for &i in &order {
            scratch[i] = 0.0;
            touched[i] = false;
        }
        order.clear();
    }
    Ok(field)
}

/// Color logit for a target color, clamped away from 0 and 1.
pub fn color_logit(c: f64) -> f64 {
    logit(c.clamp(1e-3, 1.0 - 1e-3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRig {
    pub n_views: usize,
    pub distance: f64,
    pub elevation: f64,
    pub vertical_fov: f64,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub background: Vec3,
}

impl Default for PoseRig {
    fn default() -> Self {
        Self {
            n_views: 8,
            distance: 3.0,
            elevation: 40f64.to_radians(),
            vertical_fov: 40f64.to_radians(),
            resolution: 128,
            samples_per_ray: 128,
            background: Vec3::repeat(1.0),
        }
    }
}

impl PoseRig {
    /// Cameras at azimuths `2 pi k / n` on the rig circle, looking at the origin.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        if self.n_views < 2 {
            return Err(Error::invalid("pose estimation needs at least two views"));
        }
        (0..self.n_views)
            .map(|k| {
                let az = core::f64::consts::TAU * k as f64 / self.n_views as f64;
                Camera::orbit(az, self.elevation, self.distance, self.vertical_fov, self.resolution, self.resolution)
            })
            .collect()
    }
}

/// One rendered view handed to a keypoint detector.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseView {
    pub camera: Camera,
    pub rgb: Image,
    pub opacity: Image,
}

pub fn render_pose_views(field: &VoxelField, rig: &PoseRig) -> Result<Vec<PoseView>> {
    let mut settings = RenderSettings::new(rig.samples_per_ray, rig.background);
    settings.retain_tape = false;
    rig.cameras()?
        .into_iter()
        .map(|camera| {
            let out = render_field(field, &camera, &settings)?;
            Ok(PoseView {
                camera,
                rgb: out.rgb,
                opacity: out.opacity,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Skeleton joint index.
    pub id: usize,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

/// Finds 2D joint locations in a rendered view. Keypoints that are not
/// visible are omitted.
pub trait KeypointDetector {
    fn detect(&mut self, view: &PoseView) -> Result<Vec<Keypoint>>;
}

/// Projects known 3D joint positions, optionally with Gaussian pixel jitter.
/// With `min_opacity` set, a keypoint is reported only where the rendering
/// actually shows something (maximum opacity over its 3x3 neighbourhood).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDetector {
    pub joints: Vec<Vec3>,
    pub jitter_sigma: f64,
    pub seed: u64,
    pub min_opacity: Option<f64>,
    calls: u64,
}

impl SyntheticDetector {
    pub fn new(joints: Vec<Vec3>) -> Self {
        Self {
            joints,
            jitter_sigma: 0.0,
            seed: 0,
            min_opacity: None,
            calls: 0,
        }
    }

    pub fn with_jitter(mut self, sigma: f64, seed: u64) -> Self {
        self.jitter_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn with_coverage_gate(mut self, min_opacity: f64) -> Self {
        self.min_opacity = Some(min_opacity);
        self
    }
}

impl KeypointDetector for SyntheticDetector {
    fn detect(&mut self, view: &PoseView) -> Result<Vec<Keypoint>> {
        let mut stream = ChaCha8Rng::seed_from_u64(rng::hash(&[self.seed, self.calls]));
        self.calls += 1;
        let (w, h) = (view.camera.width() as f64, view.camera.height() as f64);
        let mut out = Vec::new();
        for (id, p) in self.joints.iter().enumerate() {
            let jitter = Vector2::new(stream.sample::<f64, _>(StandardNormal), stream.sample::<f64, _>(StandardNormal))
                * self.jitter_sigma;
            let Projection::InFront { pixel, .. } = view.camera.project(p) else { continue };
            let pixel = pixel + jitter;
            if !(pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < w && pixel.y < h) {
                continue;
            }
            if let Some(min) = self.min_opacity {
                let (cx, cy) = (pixel.x as isize, pixel.y as isize);
                let mut best: f64 = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (x, y) = (cx + dx, cy + dy);
                        if x >= 0 && y >= 0 && (x as usize) < view.opacity.width() && (y as usize) < view.opacity.height() {
                            best = best.max(view.opacity.pixel(x as usize, y as usize)[0]);
                        }
                    }
                }
                if best < min {
                    continue;
                }
            }
            out.push(Keypoint {
                id,
                pixel,
                confidence: 1.0,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    /// `rho(e) = s^2 e / (s^2 + e)` on squared pixel residuals `e`.
    GemanMcClure(f64),
}

impl RobustKernel {
    /// `(rho(e), rho'(e))`
    fn eval(&self, e: f64) -> (f64, f64) {
        match *self {
            RobustKernel::None => (e, 1.0),
            RobustKernel::GemanMcClure(s) => {
                let s2 = s * s;
                let d = s2 + e;
                (s2 * e / d, s2 * s2 / (d * d))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub prior_weight: f64,
    pub robust_kernel: RobustKernel,
    /// Starting pose; the skeleton's rest pose when absent.
    pub init: Option<Pose>,
    /// Stop once the objective falls to this value.
    pub tolerance: f64,
    /// Damped Gauss-Newton steps run after the Adam iterations.
    pub polish_iterations: usize,
}

impl Default for PoseFitConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            step_size: 0.01,
            prior_weight: 1e-3,
            robust_kernel: RobustKernel::None,
            init: None,
            tolerance: 1e-14,
            polish_iterations: 200,
        }
    }
}

/// Detections in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDetections {
    pub camera: Camera,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFit {
    pub pose: Pose,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

/// Reprojection objective and its gradient over `Pose::to_parameters`.
pub fn pose_objective(
    skeleton: &Skeleton,
    views: &[ViewDetections],
    pose: &Pose,
    prior_weight: f64,
    kernel: RobustKernel,
) -> Result<(f64, Vec<f64>)> {
    let (obj, grad, _) = objective_terms(skeleton, views, pose, prior_weight, kernel, false)?;
    Ok((obj, grad))
}

/// Objective, gradient and, when asked, the Gauss-Newton approximation of
/// the Hessian (robust weights frozen at the current residuals).
fn objective_terms(
    skeleton: &Skeleton,
    views: &[ViewDetections],
    pose: &Pose,
    prior_weight: f64,
    kernel: RobustKernel,
    with_hessian: bool,
) -> Result<(f64, Vec<f64>, Option<DMatrix<f64>>)> {
    let (joints, jac) = joint_positions_jacobian(skeleton, pose)?;
    let n_params = pose.parameter_count();
    let mut grad = vec![0.0; n_params];
    let mut hess = with_hessian.then(|| DMatrix::zeros(n_params, n_params));
    let mut obj = 0.0;
    for view in views {
        for kp in &view.keypoints {
            if kp.confidence <= 0.0 || kp.id >= joints.len() {
                continue;
            }
            let Some((pixel, dproj)) = view.camera.project_with_jacobian(&joints[kp.id]) else { continue };
            let r = pixel - kp.pixel;
            let (rho, drho) = kernel.eval(r.norm_squared());
            obj += kp.confidence * rho;
            // d/dparams = conf * rho' * 2 r^T dproj J_rows
            let row = (dproj.transpose() * r) * (2.0 * kp.confidence * drho);
            for c in 0..n_params {
                grad[c] += row.x * jac[(3 * kp.id, c)] + row.y * jac[(3 * kp.id + 1, c)] + row.z * jac[(3 * kp.id + 2, c)];
            }
            if let Some(h) = hess.as_mut() {
                let jr = dproj * jac.rows(3 * kp.id, 3);
                *h += jr.transpose() * &jr * (2.0 * kp.confidence * drho);
            }
        }
    }
    for (b, (w, w0)) in pose.rotations.iter().zip(skeleton.rest_rotations()).enumerate() {
        let d = w - w0;
        obj += prior_weight * d.norm_squared();
        for k in 0..3 {
            grad[3 * b + k] += 2.0 * prior_weight * d[k];
            if let Some(h) = hess.as_mut() {
                h[(3 * b + k, 3 * b + k)] += 2.0 * prior_weight;
            }
        }
    }
    Ok((obj, grad, hess))
}

/// Damped Gauss-Newton steps from `params`, each accepted only if it lowers
/// the objective. Adam leaves the narrow valleys along unobservable limb
/// twists poorly resolved; these steps settle them.
fn polish(
    skeleton: &Skeleton,
    views: &[ViewDetections],
    config: &PoseFitConfig,
    mut params: Vec<f64>,
    mut obj: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut damping = 1e-3;
    for _ in 0..config.polish_iterations {
        let pose = Pose::from_parameters(&params);
        let (_, grad, hess) = objective_terms(skeleton, views, &pose, config.prior_weight, config.robust_kernel, true)?;
        let hess = hess.expect("requested");
        let mut improved = false;
        while damping < 1e12 {
            let mut a = hess.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * (a[(i, i)] + 1e-9);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 4.0;
                continue;
            };
            let step = chol.solve(&DVector::from_column_slice(&grad));
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p - s).collect();
            let (t, _) = pose_objective(skeleton, views, &Pose::from_parameters(&trial), config.prior_weight, config.robust_kernel)?;
            if t.is_finite() && t < obj {
                params = trial;
                obj = t;
                damping = (damping / 3.0).max(1e-12);
                improved = true;
                break;
            }
            damping *= 4.0;
        }
        if !improved || obj <= config.tolerance {
            break;
        }
    }
    Ok((obj, params))
}

fn check_detections(views: &[ViewDetections]) -> Result<()> {
    let usable = views
        .iter()
        .filter(|v| v.keypoints.iter().filter(|k| k.confidence > 0.0).count() >= 3)
        .count();
    if usable < 2 {
        return Err(Error::InsufficientKeypoints(format!(
            "{usable} of {} views have at least 3 confident keypoints; 2 are required",
            views.len()
        )));
    }
    Ok(())
}

/// Fits the pose by Adam on the reprojection objective with a cosine-decayed
/// step, then polishes the best iterate seen with damped Gauss-Newton steps.
pub fn fit_pose(skeleton: &Skeleton, views: &[ViewDetections], config: &PoseFitConfig) -> Result<PoseFit> {
    if config.iterations == 0 {
        return Err(Error::invalid("pose fitting needs at least one iteration"));
    }
    if !(config.prior_weight >= 0.0) {
        return Err(Error::invalid("pose prior weight must be nonnegative"));
    }
    check_detections(views)?;
    let init = config.init.clone().unwrap_or_else(|| skeleton.rest_pose());
    let mut params = init.to_parameters();
    let mut opt = AdamW::new(params.len(), config.step_size, 0.0);
    let eval = |p: &[f64]| pose_objective(skeleton, views, &Pose::from_parameters(p), config.prior_weight, config.robust_kernel);
    let (initial_objective, _) = eval(&params)?;
    let mut best = (initial_objective, params.clone());
    let mut prev = initial_objective;
    let mut increasing = 0;
    let mut iterations = 0;
    for it in 0..config.iterations {
        iterations = it + 1;
        let (obj, grad) = eval(&params)?;
        if obj < best.0 {
            best = (obj, params.clone());
        }
        if obj <= config.tolerance {
            break;
        }
        // rounding-level wobble near a minimum is not an increase
        if obj > prev + 1e-9 * prev.abs() + 1e-12 {
            increasing += 1;
            if increasing >= 100 {
                let last = Pose::from_parameters(&params);
                return Err(Error::Diverged {
                    iterations: it,
                    last: Box::new(Pose::new(last.rotations, last.root_translation)),
                });
            }
        } else {
            increasing = 0;
        }
        prev = obj;
        opt.lr = config.step_size * cosine_factor(it, config.iterations, 0.01);
        opt.step(&mut params, &grad);
    }
    let (obj, _) = eval(&params)?;
    if obj < best.0 {
        best = (obj, params);
    }
    if best.0 > config.tolerance {
        best = polish(skeleton, views, config, best.1, best.0)?;
    }
    let p = Pose::from_parameters(&best.1);
    Ok(PoseFit {
        pose: Pose::new(p.rotations, p.root_translation),
        objective: best.0,
        initial_objective,
        iterations,
    })
}

/// Renders the pose rig, runs the detector on every view and fits the pose.
pub fn field_to_pose(
    field: &VoxelField,
    skeleton: &Skeleton,
    detector: &mut dyn KeypointDetector,
    rig: &PoseRig,
    config: &PoseFitConfig,
) -> Result<(PoseFit, Vec<PoseView>)> {
    let views = render_pose_views(field, rig)?;
    let mut detections = Vec::with_capacity(views.len());
    for v in &views {
        detections.push(ViewDetections {
            camera: v.camera.clone(),
            keypoints: detector.detect(v)?,
        });
    }
    if detections.iter().all(|d| d.keypoints.len() < 3) {
        return Err(Error::InsufficientKeypoints("the detector found fewer than 3 keypoints in every view".into()));
    }
    Ok((fit_pose(skeleton, &detections, config)?, views))
}

/// Mean Euclidean distance between corresponding joints of two poses.
pub fn mean_joint_error(skeleton: &Skeleton, a: &Pose, b: &Pose) -> Result<f64> {
    let ja = joint_positions(skeleton, a)?;
    let jb = joint_positions(skeleton, b)?;
    Ok(ja.iter().zip(&jb).map(|(p, q)| (p - q).norm()).sum::<f64>() / ja.len() as f64)
}
