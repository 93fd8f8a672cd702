//! The run directory: per-step log, stage checkpoints, pose outputs, previews
//! and the manifest.
//!
//! ```text
//! run/
//!   log.csv  manifest.json
//!   pose_t{t}.json  human_t{t}.obj  field_t{t}.vxf
//!   previews/{index}_{stage}.ppm
//!   checkpoint/state.json  checkpoint/field.vxf
//! ```

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use hoi_core::geometry::{write_obj, Camera, IndexedMesh};
use hoi_core::guidance::{Capability, GuidanceChannel, RenderTarget};
use hoi_core::pipeline::{fov_compensated_camera, Checkpoint, Observer, PipelineConfig, StageKind, StepLog};
use hoi_core::render::{render_composite, RenderSettings};
use hoi_core::skeleton::{skin, Pose, SkinnedMesh};
use hoi_core::Vec3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{read, read_text, write, Error, Result};
use crate::image_io::encode_ppm;
use crate::rig::PoseFile;
use crate::vxf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    seed: u64,
    next_stage: usize,
    stage_name: String,
    poses: Vec<PoseFile>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes a file through a temporary sibling so a crash never leaves it half written.
fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

/// The settings of every stage, as recorded in the manifest.
pub fn manifest(config: &PipelineConfig, channels: &[GuidanceChannel], extra: serde_json::Value) -> serde_json::Value {
    let stages: Vec<_> = config
        .plan()
        .iter()
        .enumerate()
        .map(|(i, kind)| match kind {
            StageKind::Init => json!({"index": i, "kind": "init", "density_bias": [config.density_bias.0, config.density_bias.1]}),
            StageKind::Distill(s) => json!({
                "index": i,
                "kind": "distill",
                "name": s.name,
                "steps": s.steps,
                "resolution": s.resolution,
                "samples_per_ray": s.samples_per_ray,
                "batch_size": s.batch_size,
                "timestep_range": [s.timestep_range.0, s.timestep_range.1],
                "learning_rate": s.learning_rate,
                "weight_decay": s.weight_decay,
                "human_only_channels": s.human_only_channels,
                "background_probability": s.background_probability,
                "weights": {
                    "sds_composite": s.weights.sds_composite,
                    "sds_human": s.weights.sds_human,
                    "sds_human_multiview": s.weights.sds_human_multiview,
                    "sparsity": s.weights.sparsity,
                    "intersection": s.weights.intersection,
                    "eta": s.weights.eta,
                },
            }),
            StageKind::FitPose { iteration } => json!({"index": i, "kind": "fit_pose", "iteration": iteration}),
            StageKind::Reinit { iteration } => json!({"index": i, "kind": "reinit", "iteration": iteration}),
        })
        .collect();
    let channels: Vec<_> = channels
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "target": match c.target { RenderTarget::Composite => "composite", RenderTarget::HumanOnly => "human" },
                "capability": match c.provider.capability() { Capability::SingleView => "single", Capability::MultiView => "multi" },
                "weight": c.weight,
                "cfg_weight": c.cfg_weight,
                "positive": c.prompt.positive,
                "negative": c.prompt.negative,
            })
        })
        .collect();
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "iterations": config.iterations,
        "field_resolution": config.field_resolution,
        "stages": stages,
        "channels": channels,
        "pose_fit": {
            "iterations": config.pose_fit.iterations,
            "step_size": config.pose_fit.step_size,
            "prior_weight": config.pose_fit.prior_weight,
        },
        "mesh_to_field": {
            "n_points": config.mesh_to_field.n_points,
            "iterations": config.mesh_to_field.iterations,
        },
        "extra": extra,
    })
}

/// Pipeline observer writing into a run directory. Write failures are kept
/// and surface from the next checkpoint.
pub struct RunDirectory {
    root: PathBuf,
    seed: u64,
    log: csv::Writer<File>,
    human: SkinnedMesh,
    object: IndexedMesh,
    preview: Option<(Camera, RenderSettings)>,
    error: Option<Error>,
}

impl RunDirectory {
    /// Opens `root`; with `append` the existing log is continued (for resume).
    pub fn create(root: &Path, seed: u64, channel_names: &[String], human: SkinnedMesh, object: IndexedMesh, append: bool) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoint")).map_err(io(root))?;
        let log_path = root.join("log.csv");
        let fresh = !append || !log_path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(io(&log_path))?;
        let mut log = csv::Writer::from_writer(file);
        if fresh {
            let mut header = vec!["stage", "step", "t", "r_sa", "r_i", "grad_norm"];
            header.extend(channel_names.iter().map(String::as_str));
            log.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
            log.flush().map_err(io(&log_path))?;
        }
        Ok(Self {
            root: root.to_owned(),
            seed,
            log,
            human,
            object,
            preview: Some((fov_compensated_camera(40f64.to_radians(), 15f64.to_radians(), 0.5, 0.9, 128)?, RenderSettings::new(128, Vec3::repeat(1.0)))),
            error: None,
        })
    }

    /// Disables preview renders (they cost one composite render per stage).
    pub fn without_previews(mut self) -> Self {
        self.preview = None;
        self
    }

    pub fn write_manifest(&self, manifest: &serde_json::Value) -> Result<()> {
        write_atomic(&self.root.join("manifest.json"), serde_json::to_string_pretty(manifest)?)
    }

    /// The first write error seen, if any.
    pub fn take_error(&mut self) -> Option<Error> {
        self.error.take()
    }

    fn record(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.log.flush().map_err(io(&self.root.join("log.csv")))?;
        if let Some(t) = checkpoint.stage_name.strip_prefix("pose_t") {
            let pose = checkpoint.poses.last().expect("pose stage leaves a pose");
            write(&self.root.join(format!("pose_t{t}.json")), crate::rig::pose_to_json(pose))?;
            write(&self.root.join(format!("human_t{t}.obj")), write_obj(&skin(&self.human, pose)?))?;
            write(&self.root.join(format!("field_t{t}.vxf")), vxf::encode(&checkpoint.field))?;
        }
        if let Some((camera, settings)) = &self.preview {
            let out = render_composite(&checkpoint.field, &self.object, camera, settings)?;
            let name = format!("{:02}_{}.ppm", checkpoint.next_stage - 1, checkpoint.stage_name);
            write(&self.root.join("previews").join(name), encode_ppm(&out.rgb)?)?;
        }
        let dir = self.root.join("checkpoint");
        write_atomic(&dir.join("field.vxf"), vxf::encode(&checkpoint.field))?;
        let state = State {
            seed: self.seed,
            next_stage: checkpoint.next_stage,
            stage_name: checkpoint.stage_name.clone(),
            poses: checkpoint.poses.iter().map(PoseFile::from).collect(),
        };
        write_atomic(&dir.join("state.json"), serde_json::to_string_pretty(&state)?)
    }
}

impl Observer for RunDirectory {
    fn step(&mut self, log: &StepLog) {
        if self.error.is_some() {
            return;
        }
        let mut row = vec![
            log.stage.clone(),
            log.step.to_string(),
            log.t.to_string(),
            log.sparsity.to_string(),
            log.intersection.to_string(),
            log.gradient_norm.to_string(),
        ];
        row.extend(log.channel_norms.iter().map(f64::to_string));
        if let Err(e) = self.log.write_record(&row) {
            self.error = Some(Error::Format(format!("cannot write log: {e}")));
        }
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> hoi_core::Result<()> {
        if self.error.is_none() {
            if let Err(e) = self.record(checkpoint) {
                self.error = Some(e);
            }
        }
        match &self.error {
            None => Ok(()),
            Some(e) => Err(hoi_core::Error::InvalidArgument(format!("run directory: {e}"))),
        }
    }
}

/// Reads the checkpoint of a run directory, checking it belongs to `seed`.
pub fn load_checkpoint(root: &Path, seed: u64) -> Result<Checkpoint> {
    let dir = root.join("checkpoint");
    let state: State = serde_json::from_str(&read_text(&dir.join("state.json"))?)?;
    if state.seed != seed {
        return Err(Error::Config(format!(
            "checkpoint was written with seed {}, not {seed}",
            state.seed
        )));
    }
    Ok(Checkpoint {
        next_stage: state.next_stage,
        stage_name: state.stage_name,
        field: vxf::decode(&read(&dir.join("field.vxf"))?)?,
        poses: state.poses.iter().map(Pose::from).collect(),
    })
}
