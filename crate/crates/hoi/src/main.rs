use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hoi::config::Config;
use hoi::error::{Error, Result};
use hoi::image_io::{encode_pfm, encode_ppm};
use hoi::rig::{detections_from_json, detections_to_json, load_rig, pose_from_json, pose_to_json, RigFile};
use hoi::run::{load_checkpoint, manifest, RunDirectory};
use hoi::{provider, vxf};
use hoi_core::convert::{
    fit_pose, mesh_to_field, render_pose_views, KeypointDetector, MeshToFieldConfig, PoseFitConfig, PoseRig,
    SyntheticDetector, ViewDetections,
};
use hoi_core::demo::{demo_humanoid, demo_seat, seated_pose};
use hoi_core::field::VoxelField;
use hoi_core::geometry::{parse_obj, write_obj, Camera, IndexedMesh, TriangleMesh};
use hoi_core::guidance::gaussian_image;
use hoi_core::pipeline::{
    distill_stage, fov_compensated_camera, resume_pipeline, sds_gradient_dump, Checkpoint, Observer, Scene, Silent, StepLog,
};
use hoi_core::render::{render_backward, render_composite, render_field, RenderSettings};
use hoi_core::skeleton::{joint_positions, skin};
use hoi_core::{rng, Vec3};
use rand::Rng;

#[derive(Parser)]
#[command(name = "hoi", version, about = "Pose a skinned human against an object mesh by distilling a voxel field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a field, optionally composited with an object mesh.
    Render(RenderArgs),
    /// Fit a field to a closed mesh.
    Mesh2field(Mesh2FieldArgs),
    /// Fit a pose to keypoint detections.
    Fitpose(FitPoseArgs),
    /// Run one distillation stage of a config.
    Distill(DistillArgs),
    /// Run the full pipeline into a run directory.
    Pipeline(PipelineArgs),
    /// Check render gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write one channel's noise residual and its per-pixel norm as PFM.
    SdsDump(SdsDumpArgs),
    /// Write the bundled humanoid, a seat and a ready-to-run config.
    Demo(DemoArgs),
    /// Answer wire-protocol requests with their own images (for testing).
    #[command(hide = true)]
    EchoServer {
        #[arg(long)]
        socket: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct View {
    #[arg(long, default_value_t = 30.0)]
    azimuth: f64,
    #[arg(long, default_value_t = 15.0)]
    elevation: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    /// Distance factor; the camera sits at d / tan(fov / 2).
    #[arg(long, default_value_t = 0.9)]
    d: f64,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 128)]
    spp: usize,
}

impl View {
    fn camera(&self) -> Result<Camera> {
        Ok(fov_compensated_camera(
            self.fov.to_radians(),
            self.elevation.to_radians(),
            self.azimuth.to_radians(),
            self.d,
            self.resolution,
        )?)
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    object: Option<PathBuf>,
    #[command(flatten)]
    view: View,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    background: Vec<f64>,
    /// Output PPM.
    #[arg(long)]
    out: PathBuf,
    /// Also write the colors as PFM.
    #[arg(long)]
    pfm: Option<PathBuf>,
    /// Also write the field opacity as PFM.
    #[arg(long)]
    opacity: Option<PathBuf>,
}

#[derive(Args)]
struct Mesh2FieldArgs {
    #[arg(long, conflicts_with_all = ["rig", "pose"])]
    mesh: Option<PathBuf>,
    #[arg(long, requires = "pose")]
    rig: Option<PathBuf>,
    #[arg(long, requires = "rig")]
    pose: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitPoseArgs {
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Detections JSON for the pose rig's views.
    #[arg(long, conflicts_with = "field", required_unless_present = "field")]
    detections: Option<PathBuf>,
    /// Render the pose rig's views of this field and detect with the synthetic detector.
    #[arg(long, requires = "truth")]
    field: Option<PathBuf>,
    /// Pose whose joints the synthetic detector reports.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Gaussian pixel noise of the synthetic detector.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the skinned mesh.
    #[arg(long)]
    obj: Option<PathBuf>,
    /// Also write the detections used.
    #[arg(long)]
    write_detections: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Schedule key: a stage number or `refine`.
    #[arg(long, default_value = "0")]
    stage: String,
    /// Starting field; the density-bias initialization when absent.
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    no_previews: bool,
    /// Stop with an error after this plan stage (for exercising resume).
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    resolution: usize,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct SdsDumpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Channel key in `[guidance.channel.*]`.
    #[arg(long)]
    channel: String,
    #[arg(long)]
    field: PathBuf,
    #[command(flatten)]
    view: View,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Render(a) => render(a),
        Command::Mesh2field(a) => mesh2field(a),
        Command::Fitpose(a) => fitpose(a),
        Command::Distill(a) => distill(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SdsDump(a) => sds_dump(a),
        Command::Demo(a) => demo(a),
        Command::EchoServer { socket } => echo_server(socket),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.into(), source })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn read_field(path: &Path) -> Result<VoxelField> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.into(), source })?;
    vxf::decode(&bytes)
}

fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    Ok(parse_obj(&read_text(path)?)?)
}

/// Warns about meshes the field cannot represent or the parity test cannot classify.
fn preflight(mesh: &TriangleMesh, what: &str) {
    if mesh.max_radius() > 1.0 {
        eprintln!(
            "warning: {what} reaches radius {:.3}, outside the unit support ball; samples there are clipped",
            mesh.max_radius()
        );
    }
    let mut r = rng::stream(0, 0);
    let points: Vec<Vec3> = (0..256)
        .map(|_| Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
        .collect();
    let unstable = IndexedMesh::new(mesh.clone()).parity_instability(&points);
    if unstable > 0.0 {
        eprintln!(
            "warning: {what} gives inconsistent inside tests on {:.1}% of probe points; it is probably not watertight",
            100.0 * unstable
        );
    }
}

fn render(a: RenderArgs) -> Result<ExitCode> {
    let field = read_field(&a.field)?;
    let camera = a.view.camera()?;
    let mut settings = RenderSettings::new(a.view.spp, Vec3::from_column_slice(&a.background));
    settings.retain_tape = false;
    let out = match &a.object {
        Some(p) => render_composite(&field, &IndexedMesh::new(read_mesh(p)?), &camera, &settings)?,
        None => render_field(&field, &camera, &settings)?,
    };
    write_file(&a.out, encode_ppm(&out.rgb)?)?;
    if let Some(p) = &a.pfm {
        write_file(p, encode_pfm(&out.rgb)?)?;
    }
    if let Some(p) = &a.opacity {
        write_file(p, encode_pfm(&out.opacity)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn mesh2field(a: Mesh2FieldArgs) -> Result<ExitCode> {
    let mesh = match (&a.mesh, &a.rig, &a.pose) {
        (Some(m), _, _) => read_mesh(m)?,
        (None, Some(r), Some(p)) => skin(&load_rig(r, None)?, &pose_from_json(&read_text(p)?)?)?,
        _ => return Err(Error::Config("give --mesh, or --rig with --pose".into())),
    };
    preflight(&mesh, "mesh");
    let config = MeshToFieldConfig {
        resolution: a.resolution,
        n_points: a.points,
        iterations: a.iterations,
        ..Default::default()
    };
    let field = mesh_to_field(&mesh, &config, &mut rng::stream(a.seed, 0))?;
    write_file(&a.out, vxf::encode(&field))?;
    Ok(ExitCode::SUCCESS)
}

fn fitpose(a: FitPoseArgs) -> Result<ExitCode> {
    let human = match &a.rig {
        Some(p) => load_rig(p, None)?,
        None => demo_humanoid(),
    };
    let rig = PoseRig {
        n_views: a.views,
        resolution: a.resolution,
        ..Default::default()
    };
    let views: Vec<ViewDetections> = match (&a.detections, &a.field, &a.truth) {
        (Some(d), _, _) => detections_from_json(&read_text(d)?, &rig.cameras()?)?,
        (None, Some(f), Some(t)) => {
            let joints = joint_positions(human.skeleton(), &pose_from_json(&read_text(t)?)?)?;
            let mut det = SyntheticDetector::new(joints).with_coverage_gate(0.5);
            if a.jitter > 0.0 {
                det = det.with_jitter(a.jitter, a.seed);
            }
            render_pose_views(&read_field(f)?, &rig)?
                .iter()
                .map(|v| {
                    Ok(ViewDetections {
                        camera: v.camera.clone(),
                        keypoints: det.detect(v)?,
                    })
                })
                .collect::<Result<_>>()?
        }
        _ => return Err(Error::Config("give --detections, or --field with --truth".into())),
    };
    if let Some(p) = &a.write_detections {
        write_file(p, detections_to_json(&views))?;
    }
    let config = PoseFitConfig {
        iterations: a.iterations,
        init: a.init.as_deref().map(read_text).transpose()?.as_deref().map(pose_from_json).transpose()?,
        ..Default::default()
    };
    let fit = fit_pose(human.skeleton(), &views, &config)?;
    eprintln!(
        "objective {:.6e} -> {:.6e} after {} iterations",
        fit.initial_objective, fit.objective, fit.iterations
    );
    write_file(&a.out, pose_to_json(&fit.pose))?;
    if let Some(p) = &a.obj {
        write_file(p, write_obj(&skin(&human, &fit.pose)?))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn distill(a: DistillArgs) -> Result<ExitCode> {
    let config = Config::load(&a.config)?;
    let pipeline = config.pipeline(Some(a.seed))?;
    let mut stage = if a.stage == "refine" {
        pipeline.refine_stage.clone()
    } else {
        let i: usize = a
            .stage
            .parse()
            .map_err(|_| Error::Config(format!("unknown stage `{}`", a.stage)))?;
        pipeline
            .initial_stages
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("the config has no stage {i}")))?
    };
    if let Some(s) = a.steps {
        stage.steps = s;
    }
    let mut field = match &a.field {
        Some(p) => read_field(p)?,
        None => {
            let mut f = VoxelField::filled([pipeline.field_resolution; 3], 0.0, 0.0)?;
            f.init_density_bias(pipeline.density_bias.0, pipeline.density_bias.1)?;
            f
        }
    };
    let object = config.object()?;
    preflight_object(&object);
    let mut channels = config.channels()?;
    let report = distill_stage(
        &mut field,
        &IndexedMesh::new(object),
        &mut channels,
        &stage,
        &mut rng::stream(a.seed, 0),
        &mut Silent,
    )?;
    if let (Some(first), Some(last)) = (report.gradient_norms.first(), report.gradient_norms.last()) {
        eprintln!("{} steps, gradient norm {first:.4e} -> {last:.4e}", report.steps);
    }
    write_file(&a.out, vxf::encode(&field))?;
    Ok(ExitCode::SUCCESS)
}

fn preflight_object(object: &TriangleMesh) {
    if !object.is_empty() {
        preflight(object, "object mesh");
    }
}

fn pipeline(a: PipelineArgs) -> Result<ExitCode> {
    let config = Config::load(&a.config)?;
    let pipeline = config.pipeline(Some(a.seed))?;
    let object = config.object()?;
    preflight_object(&object);
    let human = config.human()?;
    let mut channels = config.channels()?;
    let mut detector = config.detector(&human)?;
    let checkpoint = if a.resume { Some(load_checkpoint(&a.out, a.seed)?) } else { None };
    let names: Vec<String> = channels.iter().map(|c| c.name.clone()).collect();
    let mut run = RunDirectory::create(&a.out, a.seed, &names, human.clone(), IndexedMesh::new(object.clone()), a.resume)?;
    if a.no_previews {
        run = run.without_previews();
    }
    let extra = serde_json::to_value(&config.file)?;
    run.write_manifest(&manifest(&pipeline, &channels, extra))?;
    let scene = Scene { human, object };
    let mut observer = StopAfter {
        inner: &mut run,
        stage: a.stop_after,
    };
    let result = resume_pipeline(&scene, &pipeline, &mut channels, &mut detector, &mut observer, checkpoint);
    if let Some(e) = run.take_error() {
        return Err(e);
    }
    let out = result?;
    let t = out.poses.len() - 1;
    eprintln!("done: {}", a.out.join(format!("human_t{t}.obj")).display());
    Ok(ExitCode::SUCCESS)
}

struct StopAfter<'a> {
    inner: &'a mut RunDirectory,
    stage: Option<usize>,
}

impl Observer for StopAfter<'_> {
    fn step(&mut self, log: &StepLog) {
        self.inner.step(log);
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> hoi_core::Result<()> {
        self.inner.checkpoint(checkpoint)?;
        match self.stage {
            Some(s) if checkpoint.next_stage == s + 1 => Err(hoi_core::Error::InvalidArgument(format!(
                "stopped after stage {s} ({})",
                checkpoint.stage_name
            ))),
            _ => Ok(()),
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut r = rng::stream(a.seed, 0);
    let n = a.resolution;
    let params: Vec<f64> = (0..4 * n * n * n).map(|_| r.gen_range(-2.0..1.5)).collect();
    let field = VoxelField::from_parameters([n; 3], 1.0, params)?;
    let camera = fov_compensated_camera(0.7, 0.3, 0.4, 0.9, 8)?;
    let object = IndexedMesh::new(TriangleMesh::cuboid(
        Vec3::new(-0.2, -0.6, -0.6),
        Vec3::new(0.2, 0.6, -0.3),
        Vec3::new(0.8, 0.3, 0.1),
    ));
    let settings = RenderSettings::new(24, Vec3::repeat(1.0)).with_jitter(a.seed);
    let out = render_composite(&field, &object, &camera, &settings)?;
    let d_rgb = gaussian_image(&mut r, 8, 8, 3);
    let d_op = gaussian_image(&mut r, 8, 8, 1);
    let grad = render_backward(&field, out.tape.as_ref().expect("tape retained"), &d_rgb, Some(&d_op))?;
    let loss = |f: &VoxelField| -> Result<f64> {
        let o = render_composite(f, &object, &camera, &settings)?;
        let a: f64 = o.rgb.data().iter().zip(d_rgb.data()).map(|(x, y)| x * y).sum();
        let b: f64 = o.opacity.data().iter().zip(d_op.data()).map(|(x, y)| x * y).sum();
        Ok(a + b)
    };
    // only parameters the rays reach are informative
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-6).collect();
    if live.is_empty() {
        return Err(Error::Config("no parameter influences the test image".into()));
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..a.cases {
        let i = live[r.gen_range(0..live.len())];
        let mut f = field.clone();
        f.parameters_mut()[i] += h;
        let up = loss(&f)?;
        f.parameters_mut()[i] -= 2.0 * h;
        let down = loss(&f)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("{} cases, worst relative error {worst:.3e}", a.cases);
    Ok(if worst < a.tolerance { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn sds_dump(a: SdsDumpArgs) -> Result<ExitCode> {
    let config = Config::load(&a.config)?;
    let keys: Vec<&String> = config.file.guidance.channel.keys().collect();
    let index = keys
        .iter()
        .position(|k| **k == a.channel)
        .ok_or_else(|| Error::Config(format!("no channel `{}`", a.channel)))?;
    let mut channels = config.channels()?;
    let channel = &mut channels[index];
    let field = read_field(&a.field)?;
    let object = config.object()?;
    let object = (!object.is_empty()).then(|| IndexedMesh::new(object));
    let camera = a.view.camera()?;
    let noise = gaussian_image(&mut rng::stream(a.seed, 0), camera.width(), camera.height(), 3);
    let settings = RenderSettings::new(a.view.spp, Vec3::repeat(1.0));
    let (residual, norm) = sds_gradient_dump(&field, object.as_ref(), channel, &camera, a.t, &noise, &settings)?;
    write_file(&a.out_dir.join("gradient.pfm"), encode_pfm(&residual)?)?;
    write_file(&a.out_dir.join("norm.pfm"), encode_pfm(&norm)?)?;
    Ok(ExitCode::SUCCESS)
}

const DEMO_CONFIG: &str = r#"# Desk-scale scene: the bundled humanoid seated on a box. Both guidance
# channels pull renders toward images of the seated pose, so the run checks the
# whole loop without a diffusion model.

[scene]
object = "seat.obj"
rig = "rig.json"
interaction = "sitting on"
category = "box"
iterations = 1
field_resolution = 32

[schedule.0]
name = "coarse"
steps = 100
resolution = 64
samples_per_ray = 64
batch_size = 4
background_probability = 0.0

[schedule.1]
name = "fine"
steps = 100
resolution = 64
samples_per_ray = 64
batch_size = 2
background_probability = 0.0

[schedule.refine]
steps = 100
resolution = 64
samples_per_ray = 64
background_probability = 0.0

[cameras]
views = [
VIEWS]

[pose]
resolution = 64
samples_per_ray = 64

[conversion]
iterations = 3000

[detector]
pose = "truth.json"
min_opacity = 0.5

[guidance.channel.hoi]
provider = "image-matching"
target = "composite"
views = [
HOI_TARGETS]

[guidance.channel.human]
provider = "image-matching"
target = "human"
views = [
HUMAN_TARGETS]
"#;

fn demo(a: DemoArgs) -> Result<ExitCode> {
    let human = demo_humanoid();
    let truth = seated_pose();
    let seat = demo_seat();
    write_file(&a.out.join("human.obj"), write_obj(human.mesh()))?;
    let rig = RigFile::from_skinned(&human, Some("human.obj".into()));
    write_file(&a.out.join("rig.json"), serde_json::to_string(&rig)?)?;
    write_file(&a.out.join("seat.obj"), write_obj(&seat))?;
    write_file(&a.out.join("truth.json"), pose_to_json(&truth))?;

    let m2f = MeshToFieldConfig {
        resolution: 32,
        iterations: 3000,
        ..Default::default()
    };
    let field = mesh_to_field(&skin(&human, &truth)?, &m2f, &mut rng::stream(99, 0))?;
    write_file(&a.out.join("truth.vxf"), vxf::encode(&field))?;
    let seat_ix = IndexedMesh::new(seat);
    let settings = RenderSettings::new(128, Vec3::repeat(1.0));
    let (mut views, mut hoi_t, mut human_t) = (String::new(), String::new(), String::new());
    for k in 0..8 {
        let az = 45.0 * k as f64;
        let camera = fov_compensated_camera(40f64.to_radians(), 15f64.to_radians(), az.to_radians(), 0.9, 64)?;
        let comp = render_composite(&field, &seat_ix, &camera, &settings)?.rgb;
        let alone = render_field(&field, &camera, &settings)?.rgb;
        write_file(&a.out.join(format!("targets/hoi_{k}.pfm")), encode_pfm(&comp)?)?;
        write_file(&a.out.join(format!("targets/human_{k}.pfm")), encode_pfm(&alone)?)?;
        let spec = format!("azimuth_deg = {az:.1}, elevation_deg = 15.0, fov_deg = 40.0, d = 0.9");
        views.push_str(&format!("  {{ {spec} }},\n"));
        hoi_t.push_str(&format!("  {{ image = \"targets/hoi_{k}.pfm\", {spec} }},\n"));
        human_t.push_str(&format!("  {{ image = \"targets/human_{k}.pfm\", {spec} }},\n"));
    }
    let text = DEMO_CONFIG
        .replace("VIEWS]", &format!("{views}]"))
        .replace("HOI_TARGETS]", &format!("{hoi_t}]"))
        .replace("HUMAN_TARGETS]", &format!("{human_t}]"));
    write_file(&a.out.join("config.toml"), text)?;
    eprintln!("wrote {}", a.out.join("config.toml").display());
    Ok(ExitCode::SUCCESS)
}

fn echo_server(socket: Option<PathBuf>) -> Result<ExitCode> {
    let io = |source| Error::Io { path: "echo server".into(), source };
    match socket {
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            provider::serve_echo(stdin, stdout).map_err(io)?;
        }
        #[cfg(unix)]
        Some(path) => {
            let listener = std::os::unix::net::UnixListener::bind(&path).map_err(io)?;
            for stream in listener.incoming() {
                let stream = stream.map_err(io)?;
                let reader = std::io::BufReader::new(stream.try_clone().map_err(io)?);
                std::thread::spawn(move || provider::serve_echo(reader, stream));
            }
        }
        #[cfg(not(unix))]
        Some(_) => return Err(Error::Config("sockets need a Unix platform".into())),
    }
    std::io::stdout().flush().map_err(io)?;
    Ok(ExitCode::SUCCESS)
}
