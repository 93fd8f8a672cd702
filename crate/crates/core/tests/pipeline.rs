use hoi_core::convert::{MeshToFieldConfig, PoseRig, SyntheticDetector};
use hoi_core::demo::{demo_humanoid, demo_seat, seated_pose};
use hoi_core::field::VoxelField;
use hoi_core::geometry::{Camera, IndexedMesh};
use hoi_core::guidance::{alpha_bar, Counted, GuidanceChannel, ImageMatchingProvider, Prompt, RenderTarget, Weighting};
use hoi_core::image::Image;
use hoi_core::pipeline::{
    distill_stage, fov_compensated_camera, run_pipeline, sample_camera, sds_gradient_dump, CameraSampling, Observer,
    PipelineConfig, Scene, Silent, StageConfig, StepLog,
};
use hoi_core::regularize::LossWeights;
use hoi_core::render::{render_composite, render_field, RenderSettings};
use hoi_core::skeleton::{joint_positions, skin};
use hoi_core::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prompt() -> Prompt {
    Prompt::new("a photo of a person sitting on a box", "missing limbs").unwrap()
}

fn cameras(resolution: usize) -> Vec<Camera> {
    (0..4)
        .map(|k| fov_compensated_camera(0.7, 0.25, k as f64 * 1.57, 0.9, resolution).unwrap())
        .collect()
}

/// A field fitted to the seated body, as a stand-in target.
fn target_field(resolution: usize) -> VoxelField {
    let mesh = skin(&demo_humanoid(), &seated_pose()).unwrap();
    let config = MeshToFieldConfig {
        resolution,
        iterations: 1500,
        ..Default::default()
    };
    hoi_core::convert::mesh_to_field(&mesh, &config, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
}

fn small_stage(cams: &[Camera]) -> StageConfig {
    StageConfig {
        name: "test".into(),
        steps: 60,
        resolution: 24,
        samples_per_ray: 24,
        batch_size: 2,
        background_probability: 0.0,
        weights: LossWeights {
            sparsity: 0.0,
            intersection: 0.0,
            ..Default::default()
        },
        weight_decay: 0.0,
        learning_rate: 0.05,
        weighting: Weighting::Normalizing,
        cameras: CameraSampling::Fixed(cams.to_vec()),
        ..StageConfig::coarse()
    }
}

#[test]
fn camera_sampler_matches_its_ranges() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (lo, hi) = (15f64.to_radians(), 60f64.to_radians());
    let n = 10_000;
    let fovs: Vec<f64> = (0..n)
        .map(|_| sample_camera(&mut r, (0.0, 30f64.to_radians()), (lo, hi), 8).unwrap().vertical_fov())
        .collect();
    let mean = fovs.iter().sum::<f64>() / n as f64;
    let se = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 37.5f64.to_radians()).abs() < 3.0 * se, "mean fov {}", mean.to_degrees());
    assert!(fovs.iter().all(|f| (lo..=hi).contains(f)));
}

#[test]
fn distillation_against_a_target_shrinks_the_gradient() {
    let cams = cameras(24);
    let target = target_field(24);
    let seat = IndexedMesh::new(demo_seat());
    let settings = RenderSettings::new(64, Vec3::repeat(1.0));
    let views = cams
        .iter()
        .map(|c| (c.clone(), render_composite(&target, &seat, c, &settings).unwrap().rgb))
        .collect();
    let provider = ImageMatchingProvider::per_view(views).unwrap();
    let mut channels = vec![GuidanceChannel::new("hoi", Box::new(provider), prompt(), 1.0, RenderTarget::Composite, 50.0).unwrap()];
    let mut field = VoxelField::filled([24; 3], 0.0, 0.0).unwrap();
    field.init_density_bias(5.0, 0.5).unwrap();
    let stage = StageConfig {
        steps: 300,
        ..small_stage(&cams)
    };
    let report = distill_stage(&mut field, &seat, &mut channels, &stage, &mut ChaCha8Rng::seed_from_u64(2), &mut Silent).unwrap();
    let g = &report.gradient_norms;
    let head = g[..10].iter().sum::<f64>() / 10.0;
    let tail = g[g.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(head >= 10.0 * tail, "gradient norm {head} -> {tail}");
    assert_eq!(report.updates, 300);
}

#[test]
fn gradient_dump_is_proportional_to_the_image_difference() {
    let cam = cameras(16).remove(1);
    let field = target_field(16);
    let settings = RenderSettings::new(32, Vec3::repeat(1.0));
    let target = Image::filled(16, 16, &[0.3, 0.6, 0.2]);
    let x = render_field(&field, &cam, &settings).unwrap().rgb;
    let mut ch = GuidanceChannel::new("human", Box::new(ImageMatchingProvider::new(target.clone())), prompt(), 1.0, RenderTarget::HumanOnly, 50.0)
        .unwrap();
    let noise = hoi_core::guidance::gaussian_image(&mut ChaCha8Rng::seed_from_u64(3), 16, 16, 3);
    for t in [0.1, 0.5, 0.9] {
        let (residual, norm) = sds_gradient_dump(&field, None, &mut ch, &cam, t, &noise, &settings).unwrap();
        let ab = alpha_bar(t);
        let k = (ab / (1.0 - ab)).sqrt();
        for ((r, a), b) in residual.data().iter().zip(x.data()).zip(target.data()) {
            assert!((r - k * (a - b)).abs() < 1e-9 * (1.0 + k), "t {t}");
        }
        assert_eq!(norm.channels(), 1);
    }
}

struct Log(Vec<StepLog>);

impl Observer for Log {
    fn step(&mut self, log: &StepLog) {
        self.0.push(log.clone());
    }
}

#[test]
fn dropped_human_channels_are_not_called() {
    let cams = cameras(12);
    let seat = IndexedMesh::new(demo_seat());
    let (composite, composite_calls) = Counted::new(ImageMatchingProvider::new(Image::filled(12, 12, &[0.2, 0.2, 0.2])));
    let (human, human_calls) = Counted::new(ImageMatchingProvider::new(Image::filled(12, 12, &[0.5, 0.5, 0.5])));
    let mut channels = vec![
        GuidanceChannel::new("hoi", Box::new(composite), prompt(), 1.0, RenderTarget::Composite, 50.0).unwrap(),
        GuidanceChannel::new("human", Box::new(human), prompt(), 1.0, RenderTarget::HumanOnly, 50.0).unwrap(),
    ];
    let mut field = VoxelField::filled([8; 3], 0.0, 0.0).unwrap();
    let mut stage = StageConfig {
        steps: 5,
        resolution: 12,
        ..small_stage(&cams)
    };
    let mut log = Log(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    distill_stage(&mut field, &seat, &mut channels, &stage, &mut rng, &mut log).unwrap();
    assert_eq!((composite_calls.load(std::sync::atomic::Ordering::SeqCst), human_calls.load(std::sync::atomic::Ordering::SeqCst)), (5, 5));

    stage.human_only_channels = false;
    distill_stage(&mut field, &seat, &mut channels, &stage, &mut rng, &mut log).unwrap();
    assert_eq!(composite_calls.load(std::sync::atomic::Ordering::SeqCst), 10);
    assert_eq!(human_calls.load(std::sync::atomic::Ordering::SeqCst), 5);
    assert!(log.0[5..].iter().all(|l| l.channel_norms[1] == 0.0 && l.channel_norms[0] > 0.0));
}

fn tiny_pipeline(iterations: usize) -> PipelineConfig {
    let cams = cameras(16);
    let mut config = PipelineConfig::new(5);
    config.iterations = iterations;
    config.field_resolution = 12;
    let stage = StageConfig {
        steps: 2,
        resolution: 16,
        samples_per_ray: 16,
        ..small_stage(&cams)
    };
    config.initial_stages = vec![stage.clone()];
    config.refine_stage = StageConfig {
        name: "refine".into(),
        ..stage
    };
    config.mesh_to_field = MeshToFieldConfig {
        iterations: 50,
        ..Default::default()
    };
    config.pose_rig = PoseRig {
        resolution: 32,
        samples_per_ray: 16,
        ..Default::default()
    };
    config.pose_fit.iterations = 200;
    config
}

fn channels() -> Vec<GuidanceChannel> {
    let provider = ImageMatchingProvider::new(Image::filled(16, 16, &[1.0, 1.0, 1.0]));
    vec![GuidanceChannel::new("hoi", Box::new(provider), prompt(), 1.0, RenderTarget::Composite, 50.0).unwrap()]
}

#[test]
fn zero_refinement_rounds_return_the_first_pose() {
    let human = demo_humanoid();
    let joints = joint_positions(human.skeleton(), &seated_pose()).unwrap();
    let scene = Scene {
        human: human.clone(),
        object: demo_seat(),
    };
    let out = run_pipeline(&scene, &tiny_pipeline(0), &mut channels(), &mut SyntheticDetector::new(joints.clone()), &mut Silent).unwrap();
    assert_eq!(out.poses.len(), 1);
    assert_eq!(out.mesh, skin(&human, &out.poses[0]).unwrap());

    let two = run_pipeline(&scene, &tiny_pipeline(2), &mut channels(), &mut SyntheticDetector::new(joints), &mut Silent).unwrap();
    assert_eq!(two.poses.len(), 3);
    // the first pose does not depend on later rounds
    assert_eq!(two.poses[0], out.poses[0]);
}
