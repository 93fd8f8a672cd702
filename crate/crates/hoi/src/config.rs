//! Run configuration: a TOML file with `[scene]`, `[schedule.N]`, `[weights]`,
//! `[guidance.channel.N]`, `[cameras]`, `[pose]`, `[conversion]` and
//! `[detector]`. Every key except the scene prompt words is optional; relative
//! paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use hoi_core::convert::{MeshToFieldConfig, PoseFitConfig, PoseRig, RobustKernel, SyntheticDetector};
use hoi_core::geometry::{parse_obj, Camera, TriangleMesh};
use hoi_core::guidance::{Capability, GuidanceChannel, GuidanceProvider, ImageMatchingProvider, Prompt, RenderTarget, Weighting};
use hoi_core::nalgebra::{Rotation3, Vector3};
use hoi_core::pipeline::{build_prompts, fov_compensated_camera, CameraSampling, PipelineConfig, StageConfig, DEFAULT_CFG_WEIGHT};
use hoi_core::regularize::LossWeights;
use hoi_core::skeleton::{joint_positions, SkinnedMesh};
use hoi_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::error::{read, read_text, Error, Result};
use crate::image_io::decode_pfm;
use crate::provider::{Endpoint, RemoteProvider};
use crate::rig::{load_rig, pose_from_json};

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scene: SceneSection,
    #[serde(default)]
    pub schedule: BTreeMap<String, ScheduleSection>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub cameras: CamerasSection,
    #[serde(default)]
    pub pose: PoseSection,
    #[serde(default)]
    pub conversion: ConversionSection,
    #[serde(default)]
    pub detector: DetectorSection,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Object mesh (OBJ); no object when absent.
    pub object: Option<String>,
    /// Euler XYZ angles in degrees.
    #[serde(default)]
    pub rotation_deg: [f64; 3],
    #[serde(default)]
    pub translation: [f64; 3],
    pub scale: Option<f64>,
    /// Rig JSON; the bundled humanoid when absent.
    pub rig: Option<String>,
    pub interaction: String,
    pub category: String,
    pub iterations: Option<usize>,
    pub field_resolution: Option<usize>,
    pub density_bias: Option<[f64; 2]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingName {
    Unit,
    Normalizing,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub name: Option<String>,
    pub steps: Option<usize>,
    pub resolution: Option<usize>,
    pub samples_per_ray: Option<usize>,
    pub batch_size: Option<usize>,
    pub timestep_range: Option<[f64; 2]>,
    pub human_only_channels: Option<bool>,
    pub background: Option<[f64; 3]>,
    pub background_probability: Option<f64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub weighting: Option<WeightingName>,
    pub weights: Option<WeightsSection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub sds_composite: Option<f64>,
    pub sds_human: Option<f64>,
    pub sds_human_multiview: Option<f64>,
    pub sparsity: Option<f64>,
    /// Sparsity weight of the refine stages.
    pub sparsity_after_reinit: Option<f64>,
    pub intersection: Option<f64>,
    pub eta: Option<f64>,
}

impl WeightsSection {
    fn apply(&self, w: &mut LossWeights) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut w.sds_composite, self.sds_composite);
        set(&mut w.sds_human, self.sds_human);
        set(&mut w.sds_human_multiview, self.sds_human_multiview);
        set(&mut w.sparsity, self.sparsity);
        set(&mut w.intersection, self.intersection);
        set(&mut w.eta, self.eta);
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default)]
    pub channel: BTreeMap<String, ChannelSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    ImageMatching,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetName {
    Composite,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptName {
    Interaction,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapabilityName {
    Single,
    Multi,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    #[serde(default = "one")]
    pub d: f64,
}

fn one() -> f64 {
    1.0
}

impl ViewSpec {
    pub fn camera(&self, resolution: usize) -> Result<Camera> {
        Ok(fov_compensated_camera(
            self.fov_deg.to_radians(),
            self.elevation_deg.to_radians(),
            self.azimuth_deg.to_radians(),
            self.d,
            resolution,
        )?)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TargetView {
    pub image: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    #[serde(default = "one")]
    pub d: f64,
}

impl TargetView {
    fn view(&self) -> ViewSpec {
        ViewSpec {
            azimuth_deg: self.azimuth_deg,
            elevation_deg: self.elevation_deg,
            fov_deg: self.fov_deg,
            d: self.d,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub name: Option<String>,
    pub provider: ProviderKind,
    #[serde(default = "composite")]
    pub target: TargetName,
    pub prompt: Option<PromptName>,
    pub weight: Option<f64>,
    pub cfg_weight: Option<f64>,
    /// Image-matching: one target image for every view.
    pub image: Option<String>,
    /// Image-matching: targets matched to views by camera orientation.
    #[serde(default)]
    pub views: Vec<TargetView>,
    /// Remote: program and arguments speaking the wire protocol on stdio.
    pub command: Option<Vec<String>>,
    /// Remote: Unix socket path.
    pub socket: Option<String>,
    pub capability: Option<CapabilityName>,
    pub timeout_s: Option<f64>,
    pub retries: Option<usize>,
}

fn composite() -> TargetName {
    TargetName::Composite
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasSection {
    pub elevation_deg: Option<[f64; 2]>,
    pub fov_deg: Option<[f64; 2]>,
    /// When nonempty, training views are drawn from this set instead.
    #[serde(default)]
    pub views: Vec<ViewSpec>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSection {
    pub views: Option<usize>,
    pub distance: Option<f64>,
    pub elevation_deg: Option<f64>,
    pub fov_deg: Option<f64>,
    pub resolution: Option<usize>,
    pub samples_per_ray: Option<usize>,
    pub iterations: Option<usize>,
    pub step_size: Option<f64>,
    pub prior_weight: Option<f64>,
    /// Geman-McClure scale in pixels; plain squared error when absent.
    pub robust_scale: Option<f64>,
    pub tolerance: Option<f64>,
    pub polish_iterations: Option<usize>,
}

impl PoseSection {
    pub fn rig(&self) -> PoseRig {
        let d = PoseRig::default();
        PoseRig {
            n_views: self.views.unwrap_or(d.n_views),
            distance: self.distance.unwrap_or(d.distance),
            elevation: self.elevation_deg.map_or(d.elevation, f64::to_radians),
            vertical_fov: self.fov_deg.map_or(d.vertical_fov, f64::to_radians),
            resolution: self.resolution.unwrap_or(d.resolution),
            samples_per_ray: self.samples_per_ray.unwrap_or(d.samples_per_ray),
            background: d.background,
        }
    }

    pub fn fit(&self) -> PoseFitConfig {
        let d = PoseFitConfig::default();
        PoseFitConfig {
            iterations: self.iterations.unwrap_or(d.iterations),
            step_size: self.step_size.unwrap_or(d.step_size),
            prior_weight: self.prior_weight.unwrap_or(d.prior_weight),
            robust_kernel: self.robust_scale.map_or(d.robust_kernel, RobustKernel::GemanMcClure),
            init: None,
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            polish_iterations: self.polish_iterations.unwrap_or(d.polish_iterations),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionSection {
    pub points: Option<usize>,
    pub iterations: Option<usize>,
    pub density_lr: Option<f64>,
    pub color_lr: Option<f64>,
}

impl ConversionSection {
    pub fn mesh_to_field(&self, resolution: usize) -> MeshToFieldConfig {
        let d = MeshToFieldConfig::default();
        MeshToFieldConfig {
            resolution,
            n_points: self.points.unwrap_or(d.n_points),
            iterations: self.iterations.unwrap_or(d.iterations),
            density_lr: self.density_lr.unwrap_or(d.density_lr),
            color_lr: self.color_lr.unwrap_or(d.color_lr),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// Pose JSON whose joints the synthetic detector projects.
    pub pose: Option<String>,
    pub jitter_px: Option<f64>,
    pub seed: Option<u64>,
    pub min_opacity: Option<f64>,
}

/// A parsed config together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Config {
    pub file: ConfigFile,
    pub base: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: PathBuf) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { file, base })
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    fn camera_sampling(&self) -> Result<CameraSampling> {
        let c = &self.file.cameras;
        if !c.views.is_empty() {
            // resolution is replaced per stage
            let cams = c.views.iter().map(|v| v.camera(64)).collect::<Result<Vec<_>>>()?;
            return Ok(CameraSampling::Fixed(cams));
        }
        let CameraSampling::Random { elevation, fov } = CameraSampling::paper_default() else {
            unreachable!()
        };
        let rad = |r: [f64; 2]| (r[0].to_radians(), r[1].to_radians());
        Ok(CameraSampling::Random {
            elevation: c.elevation_deg.map_or(elevation, rad),
            fov: c.fov_deg.map_or(fov, rad),
        })
    }

    fn stage(&self, mut stage: StageConfig, section: Option<&ScheduleSection>, refine: bool) -> Result<StageConfig> {
        stage.cameras = self.camera_sampling()?;
        let global = &self.file.weights;
        global.apply(&mut stage.weights);
        if refine {
            if let Some(s) = global.sparsity_after_reinit {
                stage.weights.sparsity = s;
            } else if global.sparsity.is_some() {
                stage.weights.sparsity = StageConfig::refine().weights.sparsity;
            }
        }
        let Some(s) = section else {
            return Ok(stage);
        };
        if let Some(v) = &s.name {
            stage.name = v.clone();
        }
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = s.$field { stage.$field = v; })*};
        }
        set!(steps, resolution, samples_per_ray, batch_size, human_only_channels, background_probability, learning_rate, weight_decay);
        if let Some([lo, hi]) = s.timestep_range {
            stage.timestep_range = (lo, hi);
        }
        if let Some(b) = s.background {
            stage.background = Vec3::from(b);
        }
        if let Some(w) = s.weighting {
            stage.weighting = match w {
                WeightingName::Unit => Weighting::Unit,
                WeightingName::Normalizing => Weighting::Normalizing,
            };
        }
        if let Some(w) = &s.weights {
            w.apply(&mut stage.weights);
            if refine {
                if let Some(v) = w.sparsity_after_reinit {
                    stage.weights.sparsity = v;
                }
            }
        }
        Ok(stage)
    }

    /// Pipeline settings; `seed` wins over the file's seed.
    pub fn pipeline(&self, seed: Option<u64>) -> Result<PipelineConfig> {
        let f = &self.file;
        let seed = seed
            .or(f.scene.seed)
            .ok_or_else(|| Error::Config("a seed is required".into()))?;
        let mut cfg = PipelineConfig::new(seed);
        if let Some(t) = f.scene.iterations {
            cfg.iterations = t;
        }
        if let Some(r) = f.scene.field_resolution {
            cfg.field_resolution = r;
        }
        if let Some([a, s]) = f.scene.density_bias {
            cfg.density_bias = (a, s);
        }

        let mut numbered = BTreeMap::new();
        for (key, section) in &f.schedule {
            if key == "refine" {
                continue;
            }
            let n: usize = key
                .parse()
                .map_err(|_| Error::Config(format!("schedule key `{key}` must be a stage number or `refine`")))?;
            numbered.insert(n, section);
        }
        let presets = [StageConfig::coarse(), StageConfig::fine()];
        let count = numbered.keys().next_back().map_or(0, |n| n + 1).max(presets.len());
        cfg.initial_stages = (0..count)
            .map(|i| match (presets.get(i), numbered.get(&i)) {
                (None, None) => Err(Error::Config(format!("schedule stage {i} is missing"))),
                (preset, section) => {
                    let base = preset.unwrap_or(&presets[presets.len() - 1]).clone();
                    self.stage(base, section.copied(), false)
                }
            })
            .collect::<Result<_>>()?;
        cfg.refine_stage = self.stage(StageConfig::refine(), f.schedule.get("refine"), true)?;
        cfg.mesh_to_field = f.conversion.mesh_to_field(cfg.field_resolution);
        cfg.pose_rig = f.pose.rig();
        cfg.pose_fit = f.pose.fit();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn object(&self) -> Result<TriangleMesh> {
        let s = &self.file.scene;
        let Some(path) = &s.object else {
            return Ok(TriangleMesh::empty());
        };
        let mesh = parse_obj(&read_text(&self.resolve(path))?)?;
        let scale = s.scale.unwrap_or(1.0);
        if !(scale > 0.0) {
            return Err(Error::Config("object scale must be positive".into()));
        }
        let [rx, ry, rz] = s.rotation_deg.map(f64::to_radians);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), rz)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ry)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), rx);
        Ok(mesh.transformed(r.matrix(), Vec3::from(s.translation), scale))
    }

    pub fn human(&self) -> Result<SkinnedMesh> {
        match &self.file.scene.rig {
            Some(p) => load_rig(&self.resolve(p), None),
            None => Ok(hoi_core::demo::demo_humanoid()),
        }
    }

    pub fn prompts(&self) -> Result<(Prompt, Prompt)> {
        Ok(build_prompts(&self.file.scene.interaction, &self.file.scene.category)?)
    }

    /// Channels in key order.
    pub fn channels(&self) -> Result<Vec<GuidanceChannel>> {
        let (hoi, human) = self.prompts()?;
        let mut out = Vec::new();
        for (key, c) in &self.file.guidance.channel {
            let target = match c.target {
                TargetName::Composite => RenderTarget::Composite,
                TargetName::Human => RenderTarget::HumanOnly,
            };
            let prompt = match c.prompt.unwrap_or(match c.target {
                TargetName::Composite => PromptName::Interaction,
                TargetName::Human => PromptName::Human,
            }) {
                PromptName::Interaction => hoi.clone(),
                PromptName::Human => human.clone(),
            };
            let provider = self.provider(key, c)?;
            out.push(GuidanceChannel::new(
                c.name.clone().unwrap_or_else(|| key.clone()),
                provider,
                prompt,
                c.weight.unwrap_or(1.0),
                target,
                c.cfg_weight.unwrap_or(DEFAULT_CFG_WEIGHT),
            )?);
        }
        Ok(out)
    }

    fn provider(&self, key: &str, c: &ChannelSection) -> Result<Box<dyn GuidanceProvider>> {
        let bad = |m: &str| Error::Config(format!("channel `{key}`: {m}"));
        match c.provider {
            ProviderKind::ImageMatching => {
                let load = |p: &str| decode_pfm(&read(&self.resolve(p))?);
                match (&c.image, c.views.is_empty()) {
                    (Some(img), true) => Ok(Box::new(ImageMatchingProvider::new(load(img)?))),
                    (None, false) => {
                        let views = c
                            .views
                            .iter()
                            .map(|v| {
                                let img = load(&v.image)?;
                                if img.width() != img.height() {
                                    return Err(bad("target images must be square"));
                                }
                                Ok((v.view().camera(img.width())?, img))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Box::new(ImageMatchingProvider::per_view(views)?))
                    }
                    _ => Err(bad("image-matching needs exactly one of `image` or `views`")),
                }
            }
            ProviderKind::Remote => {
                let endpoint = match (&c.command, &c.socket) {
                    (Some(cmd), None) if !cmd.is_empty() => Endpoint::Command(cmd.clone()),
                    #[cfg(unix)]
                    (None, Some(s)) => Endpoint::Socket(self.resolve(s)),
                    _ => return Err(bad("remote needs exactly one of `command` or `socket`")),
                };
                let capability = match c.capability.unwrap_or(CapabilityName::Single) {
                    CapabilityName::Single => Capability::SingleView,
                    CapabilityName::Multi => Capability::MultiView,
                };
                let timeout = c.timeout_s.unwrap_or(120.0);
                if !(timeout > 0.0) {
                    return Err(bad("timeout must be positive"));
                }
                Ok(Box::new(RemoteProvider::new(
                    endpoint,
                    capability,
                    Duration::from_secs_f64(timeout),
                    c.retries.unwrap_or(1),
                )))
            }
        }
    }

    /// The synthetic detector, projecting the joints of `[detector] pose`.
    pub fn detector(&self, human: &SkinnedMesh) -> Result<SyntheticDetector> {
        let d = &self.file.detector;
        let path = d
            .pose
            .as_ref()
            .ok_or_else(|| Error::Config("[detector] needs `pose`, the pose whose joints are detected".into()))?;
        let pose = pose_from_json(&read_text(&self.resolve(path))?)?;
        let joints = joint_positions(human.skeleton(), &pose)?;
        let mut det = SyntheticDetector::new(joints);
        if let Some(s) = d.jitter_px {
            det = det.with_jitter(s, d.seed.unwrap_or(0));
        }
        if let Some(m) = d.min_opacity {
            det = det.with_coverage_gate(m);
        }
        Ok(det)
    }
}
