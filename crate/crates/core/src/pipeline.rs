//! The staged optimization loop: distill the field under guidance, read a
//! pose off it, re-initialize the field from the posed mesh and refine.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::convert::{field_to_pose, mesh_to_field, KeypointDetector, MeshToFieldConfig, PoseFitConfig, PoseRig};
use crate::field::VoxelField;
use crate::geometry::{Camera, IndexedMesh, TriangleMesh};
use crate::guidance::{
    gaussian_image, noise_residual, sample_timestep, sds_pixel_gradients, Capability, GuidanceChannel, Prompt,
    RenderTarget, Weighting,
};
use crate::image::Image;
use crate::optim::AdamW;
use crate::regularize::{assemble_step_gradient, intersection_penalty, sparsity_above_threshold, ImageGradientTerm, LossWeights};
use crate::render::{render_composite, render_field, RenderOutput, RenderSettings};
use crate::skeleton::{skin, Pose, SkinnedMesh};
use crate::{par, rng, Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

pub const NEGATIVE_PROMPT: &str = "missing limbs, missing legs, missing arms";

/// Guidance weight used when a config does not set one.
pub const DEFAULT_CFG_WEIGHT: f64 = 50.0;

/// A camera looking at the origin from azimuth `azimuth`, elevation
/// `elevation` and distance `d / tan(fov / 2)`, so the unit ball covers about
/// the same image fraction at every field of view.
pub fn fov_compensated_camera(fov: f64, elevation: f64, azimuth: f64, d: f64, resolution: usize) -> Result<Camera> {
    if !(fov > 0.0 && fov < core::f64::consts::PI) || !(d > 0.0) {
        return Err(Error::invalid("field of view must lie in (0, pi) and d must be positive"));
    }
    Camera::orbit(azimuth, elevation, d / (fov / 2.0).tan(), fov, resolution, resolution)
}

/// Random training camera: field of view and elevation uniform in the given
/// ranges (radians), azimuth uniform, `d ~ U(0.8, 1)`.
pub fn sample_camera<R: Rng + ?Sized>(
    rng: &mut R,
    elevation_range: (f64, f64),
    fov_range: (f64, f64),
    resolution: usize,
) -> Result<Camera> {
    let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
    if !ok(elevation_range) || !ok(fov_range) || fov_range.0 <= 0.0 {
        return Err(Error::invalid("camera ranges must be finite and ordered, with positive fields of view"));
    }
    let fov = rng.gen_range(fov_range.0..=fov_range.1);
    let elevation = rng.gen_range(elevation_range.0..=elevation_range.1);
    let azimuth = rng.gen_range(0.0..core::f64::consts::TAU);
    let d = rng.gen_range(0.8..=1.0);
    fov_compensated_camera(fov, elevation, azimuth, d, resolution)
}

/// Interaction prompt and human-only prompt, both carrying the negative prompt.
pub fn build_prompts(interaction: &str, category: &str) -> Result<(Prompt, Prompt)> {
    if interaction.trim().is_empty() || category.trim().is_empty() {
        return Err(Error::invalid("interaction and object category must be nonempty"));
    }
    let hoi = Prompt::new(
        format!("a photo of a person {interaction} a {category}, high detail, photography"),
        NEGATIVE_PROMPT,
    )?;
    let human = Prompt::new("a photo of a person, high detail, photography", NEGATIVE_PROMPT)?;
    Ok((hoi, human))
}

#[derive(Debug, Clone, PartialEq)]
pub enum CameraSampling {
    /// `sample_camera` with ranges in radians.
    Random { elevation: (f64, f64), fov: (f64, f64) },
    /// Views drawn uniformly from a fixed set (re-rendered at the stage resolution).
    Fixed(Vec<Camera>),
}

impl CameraSampling {
    pub fn paper_default() -> Self {
        CameraSampling::Random {
            elevation: (0.0, 30f64.to_radians()),
            fov: (15f64.to_radians(), 60f64.to_radians()),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, resolution: usize) -> Result<Camera> {
        match self {
            CameraSampling::Random { elevation, fov } => sample_camera(rng, *elevation, *fov, resolution),
            CameraSampling::Fixed(cams) => cams
                .choose(rng)
                .ok_or_else(|| Error::invalid("fixed camera set is empty"))?
                .with_resolution(resolution, resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub steps: usize,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub batch_size: usize,
    pub timestep_range: (f64, f64),
    pub weights: LossWeights,
    /// Whether channels that supervise the field-only rendering take part.
    pub human_only_channels: bool,
    pub background: Vec3,
    /// Per-view probability of replacing the background with a random color.
    pub background_probability: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weighting: Weighting,
    pub cameras: CameraSampling,
}

impl StageConfig {
    /// First coarse stage: 64x64, batch 8.
    pub fn coarse() -> Self {
        Self {
            name: "coarse".into(),
            steps: 5000,
            resolution: 64,
            samples_per_ray: 128,
            batch_size: 8,
            timestep_range: (0.02, 0.98),
            weights: LossWeights::default(),
            human_only_channels: true,
            background: Vec3::repeat(1.0),
            background_probability: 0.5,
            learning_rate: 0.01,
            weight_decay: 0.01,
            weighting: Weighting::Unit,
            cameras: CameraSampling::paper_default(),
        }
    }

    /// Second stage: 256x256, batch 4.
    pub fn fine() -> Self {
        Self {
            name: "fine".into(),
            resolution: 256,
            batch_size: 4,
            ..Self::coarse()
        }
    }

    /// Stage after re-initialization from the posed mesh: human-only channels
    /// dropped, lower noise levels, 512x512, batch 1, smaller step.
    pub fn refine() -> Self {
        Self {
            name: "refine".into(),
            steps: 10_000,
            resolution: 512,
            samples_per_ray: 512,
            batch_size: 1,
            timestep_range: (0.02, 0.70),
            weights: LossWeights {
                sparsity: 1000.0,
                ..LossWeights::default()
            },
            human_only_channels: false,
            background_probability: 1.0,
            learning_rate: 0.001,
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let (lo, hi) = self.timestep_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("timestep range must lie within (0, 1)"));
        }
        if self.resolution == 0 || self.batch_size == 0 || self.samples_per_ray < 2 {
            return Err(Error::invalid("resolution, batch size and samples per ray must be positive"));
        }
        if !(0.0..=1.0).contains(&self.background_probability) {
            return Err(Error::invalid("background probability must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be nonnegative"));
        }
        Ok(())
    }

    /// Stage weight of a channel, before its own multiplier.
    pub fn channel_weight(&self, channel: &GuidanceChannel) -> f64 {
        let base = match (channel.target, channel.provider.capability()) {
            (RenderTarget::Composite, _) => self.weights.sds_composite,
            (RenderTarget::HumanOnly, _) if !self.human_only_channels => 0.0,
            (RenderTarget::HumanOnly, Capability::SingleView) => self.weights.sds_human,
            (RenderTarget::HumanOnly, Capability::MultiView) => self.weights.sds_human_multiview,
        };
        base * channel.weight
    }
}

/// Per-step record for logs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub t: f64,
    pub sparsity: f64,
    pub intersection: f64,
    /// Norm of each channel's pixel gradient (0 for skipped channels).
    pub channel_norms: Vec<f64>,
    pub gradient_norm: f64,
}

/// Receives progress; every method defaults to doing nothing.
pub trait Observer {
    fn step(&mut self, _log: &StepLog) {}

    /// Called after every completed stage with the state a resume would need.
    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// An observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

/// Output of one distillation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub steps: usize,
    pub gradient_norms: Vec<f64>,
    pub updates: usize,
}

/// Runs a provider call, retrying once on a provider failure.
fn with_retry<T>(mut f: impl FnMut() -> Result<T>) -> Result<T> {
    match f() {
        Err(Error::Provider { .. }) => f(),
        other => other,
    }
}

/// Optimizes `field` for `stage.steps` steps against the guidance channels and
/// both regularizers. Channels whose effective weight is zero are not called.
pub fn distill_stage(
    field: &mut VoxelField,
    object: &IndexedMesh,
    channels: &mut [GuidanceChannel],
    stage: &StageConfig,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
) -> Result<StageReport> {
    stage.validate()?;
    let mut opt = AdamW::new(field.parameters().len(), stage.learning_rate, stage.weight_decay);
    let weights: Vec<f64> = channels.iter().map(|c| stage.channel_weight(c)).collect();
    let needs_human = stage.weights.sparsity > 0.0
        || channels
            .iter()
            .zip(&weights)
            .any(|(c, &w)| w > 0.0 && c.target == RenderTarget::HumanOnly);
    let mut report = StageReport {
        steps: stage.steps,
        gradient_norms: Vec::with_capacity(stage.steps),
        updates: 0,
    };
    for step in 0..stage.steps {
        let mut views = Vec::with_capacity(stage.batch_size);
        for _ in 0..stage.batch_size {
            let cam = stage.cameras.draw(rng, stage.resolution)?;
            let bg = if rng.gen_bool(stage.background_probability) {
                Vec3::new(rng.gen(), rng.gen(), rng.gen())
            } else {
                stage.background
            };
            views.push((cam, bg));
        }
        let jitter = rng.gen::<u64>();
        let t = sample_timestep(stage.timestep_range, rng)?;
        let cameras: Vec<Camera> = views.iter().map(|v| v.0.clone()).collect();
        let render = |human: bool| -> Result<Vec<RenderOutput>> {
            par::map_indexed(views.len(), |i| {
                let settings = RenderSettings::new(stage.samples_per_ray, views[i].1).with_jitter(rng::hash(&[jitter, i as u64]));
                if human {
                    render_field(field, &views[i].0, &settings)
                } else {
                    render_composite(field, object, &views[i].0, &settings)
                }
            })
            .into_iter()
            .collect()
        };
        let composite = render(false)?;
        let human = if needs_human { Some(render(true)?) } else { None };
        let px = |o: &RenderOutput| (o.rgb.width(), o.rgb.height());
        let noise_for = |outs: &[RenderOutput], rng: &mut ChaCha8Rng| -> Vec<Image> {
            outs.iter().map(|o| gaussian_image(rng, px(o).0, px(o).1, 3)).collect()
        };
        let composite_noise = noise_for(&composite, rng);
        let human_noise = human.as_ref().map(|h| noise_for(h, rng));

        // combined upstream rgb gradient per rendering
        let zero = |o: &RenderOutput| Image::rgb(px(o).0, px(o).1);
        let mut d_composite: Vec<Image> = composite.iter().map(zero).collect();
        let mut d_human: Vec<Image> = human.iter().flatten().map(zero).collect();
        let mut channel_norms = vec![0.0; channels.len()];
        for (c, channel) in channels.iter_mut().enumerate() {
            let w = weights[c];
            if w == 0.0 {
                continue;
            }
            let (outs, noise, sink) = match channel.target {
                RenderTarget::Composite => (&composite, &composite_noise, &mut d_composite),
                RenderTarget::HumanOnly => (
                    human.as_ref().expect("rendered when needed"),
                    human_noise.as_ref().expect("drawn when needed"),
                    &mut d_human,
                ),
            };
            let images: Vec<Image> = outs.iter().map(|o| o.rgb.clone()).collect();
            let grads = with_retry(|| sds_pixel_gradients(channel, &images, &cameras, t, noise, stage.weighting))?;
            channel_norms[c] = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            for (s, g) in sink.iter_mut().zip(&grads) {
                s.add_scaled(g, w)?;
            }
        }

        let (sparsity, d_opacity) = match &human {
            Some(h) if stage.weights.sparsity > 0.0 => {
                let maps: Vec<Image> = h.iter().map(|o| o.opacity.clone()).collect();
                sparsity_above_threshold(&maps, stage.weights.eta)
            }
            _ => (0.0, Vec::new()),
        };
        let scaled_opacity: Vec<Image> = d_opacity.iter().map(|g| g.scaled(stage.weights.sparsity)).collect();
        let tapes: Vec<_> = composite.iter().map(|o| o.tape.as_ref().expect("tape retained")).collect();
        let penalty = if stage.weights.intersection > 0.0 {
            Some(intersection_penalty(field, object, &tapes)?)
        } else {
            None
        };

        let mut terms = Vec::new();
        for (o, d) in composite.iter().zip(&d_composite) {
            terms.push(ImageGradientTerm {
                tape: o.tape.as_ref().expect("tape retained"),
                d_rgb: d,
                d_opacity: None,
                weight: 1.0,
            });
        }
        if let Some(h) = &human {
            for (i, (o, d)) in h.iter().zip(&d_human).enumerate() {
                terms.push(ImageGradientTerm {
                    tape: o.tape.as_ref().expect("tape retained"),
                    d_rgb: d,
                    d_opacity: scaled_opacity.get(i),
                    weight: 1.0,
                });
            }
        }
        let param_terms: Vec<(&[f64], f64)> = penalty
            .iter()
            .map(|p| (p.gradient.as_slice(), stage.weights.intersection))
            .collect();
        let grad = assemble_step_gradient(field, &terms, &param_terms)?;
        let gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        report.gradient_norms.push(gradient_norm);
        observer.step(&StepLog {
            stage: stage.name.clone(),
            step,
            t,
            sparsity,
            intersection: penalty.as_ref().map_or(0.0, |p| p.loss),
            channel_norms,
            gradient_norm,
        });
        // an all-zero gradient would otherwise still apply weight decay
        if gradient_norm > 0.0 {
            opt.step(field.parameters_mut(), &grad);
            report.updates += 1;
        }
    }
    Ok(report)
}

/// One unit of pipeline work.
#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// Density-bias initialization of the field.
    Init,
    Distill(StageConfig),
    /// Pose read-off; `iteration` is the `t` in `pose_t`.
    FitPose { iteration: usize },
    /// Field re-initialized from the mesh skinned with the latest pose.
    Reinit { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Number of re-initialize-and-refine rounds `T`.
    pub iterations: usize,
    pub field_resolution: usize,
    pub density_bias: (f64, f64),
    pub initial_stages: Vec<StageConfig>,
    pub refine_stage: StageConfig,
    pub mesh_to_field: MeshToFieldConfig,
    pub pose_rig: PoseRig,
    pub pose_fit: PoseFitConfig,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            iterations: 1,
            field_resolution: 64,
            density_bias: (5.0, 0.5),
            initial_stages: vec![StageConfig::coarse(), StageConfig::fine()],
            refine_stage: StageConfig::refine(),
            mesh_to_field: MeshToFieldConfig::default(),
            pose_rig: PoseRig::default(),
            pose_fit: PoseFitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.initial_stages.iter().chain(core::iter::once(&self.refine_stage)) {
            s.validate()?;
        }
        if self.field_resolution < 2 {
            return Err(Error::invalid("field resolution must be at least 2"));
        }
        Ok(())
    }

    /// The ordered stage list.
    pub fn plan(&self) -> Vec<StageKind> {
        let mut plan = vec![StageKind::Init];
        plan.extend(self.initial_stages.iter().cloned().map(StageKind::Distill));
        plan.push(StageKind::FitPose { iteration: 0 });
        for t in 1..=self.iterations {
            plan.push(StageKind::Reinit { iteration: t });
            plan.push(StageKind::Distill(self.refine_stage.clone()));
            plan.push(StageKind::FitPose { iteration: t });
        }
        plan
    }
}

/// Pipeline state after a completed stage. Field parameters are rounded to
/// f32 at every boundary, so a resumed run matches an uninterrupted one bit
/// for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Index into `PipelineConfig::plan` of the next stage to run.
    pub next_stage: usize,
    pub stage_name: String,
    pub field: VoxelField,
    /// Latest pose, one per completed pose stage.
    pub poses: Vec<Pose>,
}

/// The human rig and the placed object.
pub struct Scene {
    pub human: SkinnedMesh,
    pub object: TriangleMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// `xi_0 .. xi_T`.
    pub poses: Vec<Pose>,
    pub mesh: TriangleMesh,
    pub field: VoxelField,
}

fn stage_name(kind: &StageKind) -> String {
    match kind {
        StageKind::Init => "init".into(),
        StageKind::Distill(s) => s.name.clone(),
        StageKind::FitPose { iteration } => format!("pose_t{iteration}"),
        StageKind::Reinit { iteration } => format!("reinit_t{iteration}"),
    }
}

pub fn run_pipeline(
    scene: &Scene,
    config: &PipelineConfig,
    channels: &mut [GuidanceChannel],
    detector: &mut dyn KeypointDetector,
    observer: &mut dyn Observer,
) -> Result<PipelineOutput> {
    resume_pipeline(scene, config, channels, detector, observer, None)
}

/// Continues from `checkpoint`, or from the start when it is `None`.
pub fn resume_pipeline(
    scene: &Scene,
    config: &PipelineConfig,
    channels: &mut [GuidanceChannel],
    detector: &mut dyn KeypointDetector,
    observer: &mut dyn Observer,
    checkpoint: Option<Checkpoint>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let plan = config.plan();
    let object = IndexedMesh::new(scene.object.clone());
    let skeleton = scene.human.skeleton();
    let (mut field, mut poses, start) = match checkpoint {
        Some(c) => {
            if c.next_stage > plan.len() {
                return Err(Error::invalid("checkpoint is past the end of the plan"));
            }
            (c.field, c.poses, c.next_stage)
        }
        None => (VoxelField::empty(config.field_resolution)?, Vec::new(), 0),
    };
    for (index, kind) in plan.iter().enumerate().skip(start) {
        let mut stage_rng = rng::stream(config.seed, index as u64);
        match kind {
            StageKind::Init => {
                field = VoxelField::filled([config.field_resolution; 3], 0.0, 0.0)?;
                field.init_density_bias(config.density_bias.0, config.density_bias.1)?;
            }
            StageKind::Distill(stage) => {
                distill_stage(&mut field, &object, channels, stage, &mut stage_rng, observer)?;
            }
            StageKind::FitPose { .. } => {
                let mut fit_config = config.pose_fit.clone();
                if fit_config.init.is_none() {
                    fit_config.init = poses.last().cloned();
                }
                let (fit, _) = field_to_pose(&field, skeleton, detector, &config.pose_rig, &fit_config)?;
                poses.push(fit.pose);
            }
            StageKind::Reinit { .. } => {
                let pose = poses.last().ok_or_else(|| Error::invalid("re-initialization needs a pose"))?;
                let posed = skin(&scene.human, pose)?;
                let m2f = MeshToFieldConfig {
                    resolution: config.field_resolution,
                    ..config.mesh_to_field.clone()
                };
                field = mesh_to_field(&posed, &m2f, &mut stage_rng)?;
            }
        }
        field.quantize_to_f32();
        observer.checkpoint(&Checkpoint {
            next_stage: index + 1,
            stage_name: stage_name(kind),
            field: field.clone(),
            poses: poses.clone(),
        })?;
    }
    let last = poses.last().ok_or_else(|| Error::invalid("the plan produced no pose"))?;
    Ok(PipelineOutput {
        mesh: skin(&scene.human, last)?,
        poses,
        field,
    })
}

/// The unweighted noise residual `eps_hat - eps` for one rendering and its
/// per-pixel Euclidean norm.
pub fn sds_gradient_dump(
    field: &VoxelField,
    object: Option<&IndexedMesh>,
    channel: &mut GuidanceChannel,
    camera: &Camera,
    t: f64,
    noise: &Image,
    settings: &RenderSettings,
) -> Result<(Image, Image)> {
    let out = match (channel.target, object) {
        (RenderTarget::Composite, Some(obj)) => render_composite(field, obj, camera, settings)?,
        _ => render_field(field, camera, settings)?,
    };
    let residual = noise_residual(channel, &out.rgb, camera, t, noise)?;
    let norm = residual.channel_norm();
    Ok((residual, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{Counted, EchoProvider, ImageMatchingProvider};
    use alloc::boxed::Box;
    use rand::SeedableRng;

    #[test]
    fn compensated_distance_closed_form() {
        let c = fov_compensated_camera(30f64.to_radians(), 0.0, 0.0, 1.0, 8).unwrap();
        assert!((c.position().norm() - 3.7320508075688776).abs() < 1e-12);
    }

    #[test]
    fn unit_segment_subtends_the_same_fraction() {
        let extent = |fov_deg: f64| {
            let c = fov_compensated_camera(fov_deg.to_radians(), 0.0, 0.7, 1.0, 200).unwrap();
            let a = c.project(&Vec3::new(0.0, 0.0, -0.5)).pixel().unwrap();
            let b = c.project(&Vec3::new(0.0, 0.0, 0.5)).pixel().unwrap();
            (a - b).norm() / 200.0
        };
        let base = extent(35.0);
        for f in [15.0, 60.0] {
            assert!((extent(f) / base - 1.0).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn prompts() {
        let (hoi, human) = build_prompts("sitting on", "ball").unwrap();
        assert_eq!(hoi.positive, "a photo of a person sitting on a ball, high detail, photography");
        assert_eq!(hoi.negative, NEGATIVE_PROMPT);
        let (_, other) = build_prompts("riding", "bike").unwrap();
        assert_eq!(human, other);
        assert!(build_prompts("", "ball").is_err());
        assert!(build_prompts("on", " ").is_err());
    }

    #[test]
    fn plan_shape() {
        let mut c = PipelineConfig::new(0);
        c.iterations = 0;
        assert_eq!(c.plan().len(), 4);
        c.iterations = 2;
        let names: Vec<String> = c.plan().iter().map(stage_name).collect();
        assert_eq!(
            names,
            ["init", "coarse", "fine", "pose_t0", "reinit_t1", "refine", "pose_t1", "reinit_t2", "refine", "pose_t2"]
        );
    }

    fn small_stage() -> StageConfig {
        StageConfig {
            steps: 3,
            resolution: 6,
            samples_per_ray: 8,
            batch_size: 2,
            ..StageConfig::coarse()
        }
    }

    #[test]
    fn zero_weights_leave_the_field_unchanged() {
        let mut f = VoxelField::filled([6; 3], 0.3, 0.1).unwrap();
        let before = f.parameters().to_vec();
        let obj = IndexedMesh::new(TriangleMesh::cuboid(Vec3::repeat(-0.2), Vec3::repeat(0.2), Vec3::x()));
        let (p, calls) = Counted::new(EchoProvider::new(Vec::new()));
        let prompt = Prompt::new("x", "").unwrap();
        let mut ch = [GuidanceChannel::new("hoi", Box::new(p), prompt, 1.0, RenderTarget::Composite, 1.0).unwrap()];
        let stage = StageConfig {
            weights: LossWeights {
                sds_composite: 0.0,
                sds_human: 0.0,
                sds_human_multiview: 0.0,
                sparsity: 0.0,
                intersection: 0.0,
                eta: 0.2,
            },
            ..small_stage()
        };
        let r = distill_stage(&mut f, &obj, &mut ch, &stage, &mut ChaCha8Rng::seed_from_u64(1), &mut Silent).unwrap();
        assert_eq!(r.updates, 0);
        assert_eq!(f.parameters(), &before[..]);
        assert_eq!(calls.load(core::sync::atomic::Ordering::SeqCst), 0);
        let none = StageConfig { steps: 0, ..small_stage() };
        distill_stage(&mut f, &obj, &mut ch, &none, &mut ChaCha8Rng::seed_from_u64(1), &mut Silent).unwrap();
        assert_eq!(f.parameters(), &before[..]);
    }

    #[test]
    fn dropped_human_channels_are_never_called() {
        let mut f = VoxelField::filled([6; 3], 0.3, 0.1).unwrap();
        let obj = IndexedMesh::new(TriangleMesh::cuboid(Vec3::repeat(-0.2), Vec3::repeat(0.2), Vec3::x()));
        let target = Image::filled(6, 6, &[0.2, 0.4, 0.6]);
        let (hp, human_calls) = Counted::new(ImageMatchingProvider::new(target.clone()));
        let (cp, composite_calls) = Counted::new(ImageMatchingProvider::new(target));
        let prompt = Prompt::new("x", "").unwrap();
        let mut ch = [
            GuidanceChannel::new("hoi", Box::new(cp), prompt.clone(), 1.0, RenderTarget::Composite, 1.0).unwrap(),
            GuidanceChannel::new("human", Box::new(hp), prompt, 1.0, RenderTarget::HumanOnly, 1.0).unwrap(),
        ];
        let stage = StageConfig {
            human_only_channels: false,
            ..small_stage()
        };
        distill_stage(&mut f, &obj, &mut ch, &stage, &mut ChaCha8Rng::seed_from_u64(1), &mut Silent).unwrap();
        assert_eq!(human_calls.load(core::sync::atomic::Ordering::SeqCst), 0);
        assert_eq!(composite_calls.load(core::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn echo_dump_is_zero() {
        let f = VoxelField::filled([6; 3], 0.3, 0.1).unwrap();
        let cam = Camera::orbit(0.3, 0.2, 3.0, 0.6, 5, 4).unwrap();
        let noise = gaussian_image(&mut ChaCha8Rng::seed_from_u64(3), 5, 4, 3);
        let prompt = Prompt::new("x", "").unwrap();
        let mut ch = GuidanceChannel::new(
            "echo",
            Box::new(EchoProvider::new(vec![noise.clone()])),
            prompt,
            1.0,
            RenderTarget::HumanOnly,
            50.0,
        )
        .unwrap();
        let (r, n) = sds_gradient_dump(&f, None, &mut ch, &cam, 0.5, &noise, &RenderSettings::new(8, Vec3::zeros())).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert!(n.data().iter().all(|&v| v == 0.0));
    }
}
