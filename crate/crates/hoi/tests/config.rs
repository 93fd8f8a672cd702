use std::path::PathBuf;

use hoi::config::Config;
use hoi::Error;
use hoi_core::geometry::{write_obj, TriangleMesh};
use hoi_core::guidance::{Capability, RenderTarget, Weighting};
use hoi_core::pipeline::{CameraSampling, PipelineConfig, StageConfig};
use hoi_core::Vec3;

const SCENE: &str = "[scene]\ninteraction = \"sitting on\"\ncategory = \"chair\"\n";

fn parse(extra: &str) -> Result<Config, Error> {
    Config::parse(&format!("{SCENE}{extra}"), PathBuf::new())
}

#[test]
fn minimal_config_gives_the_defaults() {
    let c = parse("").unwrap();
    assert_eq!(c.pipeline(Some(3)).unwrap(), PipelineConfig::new(3));
    assert!(c.channels().unwrap().is_empty());
    assert!(c.object().unwrap().is_empty());
}

#[test]
fn seed_comes_from_the_flag_or_the_scene() {
    let c = parse("").unwrap();
    assert!(matches!(c.pipeline(None), Err(Error::Config(_))));
    let c = Config::parse(&format!("{SCENE}seed = 11\n"), PathBuf::new()).unwrap();
    assert_eq!(c.pipeline(None).unwrap().seed, 11);
    assert_eq!(c.pipeline(Some(4)).unwrap().seed, 4);
}

#[test]
fn unknown_keys_are_rejected_everywhere() {
    for extra in [
        "colour = 1\n",
        "[weights]\nlambda = 1\n",
        "[schedule.0]\nstep = 1\n",
        "[cameras]\nfocal = 1\n",
        "[pose]\nviewz = 1\n",
        "[conversion]\npts = 1\n",
        "[detector]\nkind = \"x\"\n",
        "[guidance.channel.a]\nprovider = \"remote\"\ncommand = [\"x\"]\nspeed = 1\n",
        "[elsewhere]\n",
    ] {
        assert!(matches!(parse(extra), Err(Error::Config(_))), "{extra}");
    }
}

#[test]
fn missing_prompt_words_are_rejected() {
    assert!(Config::parse("[scene]\ninteraction = \"on\"\n", PathBuf::new()).is_err());
}

#[test]
fn schedule_sections_override_presets() {
    let c = parse(
        "[schedule.1]\nsteps = 7\nweighting = \"normalizing\"\ntimestep_range = [0.1, 0.5]\n\
         [schedule.2]\nname = \"extra\"\nbatch_size = 2\n\
         [schedule.refine]\nresolution = 128\nlearning_rate = 0.002\n",
    )
    .unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    assert_eq!(p.initial_stages.len(), 3);
    assert_eq!(p.initial_stages[0], StageConfig::coarse());
    let fine = &p.initial_stages[1];
    assert_eq!(fine.steps, 7);
    assert_eq!(fine.weighting, Weighting::Normalizing);
    assert_eq!(fine.timestep_range, (0.1, 0.5));
    assert_eq!(fine.resolution, StageConfig::fine().resolution);
    let extra = &p.initial_stages[2];
    assert_eq!(extra.name, "extra");
    assert_eq!(extra.batch_size, 2);
    assert_eq!(extra.resolution, StageConfig::fine().resolution);
    assert_eq!(p.refine_stage.resolution, 128);
    assert_eq!(p.refine_stage.learning_rate, 0.002);
    assert_eq!(p.refine_stage.timestep_range, (0.02, 0.70));
}

#[test]
fn extra_schedule_stages_must_be_contiguous() {
    let c = parse("[schedule.0]\nsteps = 1\n[schedule.3]\nsteps = 1\n").unwrap();
    assert!(matches!(c.pipeline(Some(0)), Err(Error::Config(_))));
    let c = parse("[schedule.2]\nsteps = 1\n").unwrap();
    assert_eq!(c.pipeline(Some(0)).unwrap().initial_stages.len(), 3);
    let c = parse("[schedule.first]\nsteps = 1\n").unwrap();
    assert!(matches!(c.pipeline(Some(0)), Err(Error::Config(_))));
}

#[test]
fn invalid_stage_values_are_rejected() {
    let c = parse("[schedule.0]\ntimestep_range = [0.5, 1.0]\n").unwrap();
    assert!(c.pipeline(Some(0)).is_err());
    let c = parse("[schedule.refine]\nbatch_size = 0\n").unwrap();
    assert!(c.pipeline(Some(0)).is_err());
}

#[test]
fn sparsity_weight_after_reinit_stays_separate() {
    let c = parse("[weights]\nsparsity = 5.0\nintersection = 2.0\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    assert!(p.initial_stages.iter().all(|s| s.weights.sparsity == 5.0 && s.weights.intersection == 2.0));
    assert_eq!(p.refine_stage.weights.sparsity, 1000.0);
    assert_eq!(p.refine_stage.weights.intersection, 2.0);

    let c = parse("[weights]\nsparsity_after_reinit = 3.0\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    assert_eq!(p.initial_stages[0].weights.sparsity, 10_000.0);
    assert_eq!(p.refine_stage.weights.sparsity, 3.0);

    let c = parse("[schedule.refine.weights]\nsds_composite = 0.5\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    assert_eq!(p.refine_stage.weights.sds_composite, 0.5);
    assert_eq!(p.initial_stages[0].weights.sds_composite, 0.9);
}

#[test]
fn camera_ranges_and_fixed_views() {
    let c = parse("[cameras]\nelevation_deg = [-30.0, 30.0]\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    match &p.initial_stages[0].cameras {
        CameraSampling::Random { elevation, fov } => {
            assert!((elevation.0 + 30f64.to_radians()).abs() < 1e-15);
            assert!((elevation.1 - 30f64.to_radians()).abs() < 1e-15);
            assert!((fov.0 - 15f64.to_radians()).abs() < 1e-15);
        }
        other => panic!("{other:?}"),
    }
    let c = parse("[cameras]\nviews = [{ azimuth_deg = 90.0, elevation_deg = 0.0, fov_deg = 30.0 }]\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    match &p.refine_stage.cameras {
        CameraSampling::Fixed(cams) => {
            assert_eq!(cams.len(), 1);
            // d defaults to 1: distance 1 / tan(15 deg)
            assert!((cams[0].position().norm() - 3.7320508075688776).abs() < 1e-12);
            assert!(cams[0].position().x.abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pose_and_conversion_sections() {
    let c = parse(
        "[scene]\n[pose]\nviews = 4\nelevation_deg = 30.0\nrobust_scale = 5.0\niterations = 10\n[conversion]\npoints = 50\n",
    );
    // [scene] twice is a TOML error
    assert!(c.is_err());
    let c = parse("field_resolution = 16\n[pose]\nviews = 4\nelevation_deg = 30.0\nrobust_scale = 5.0\niterations = 10\n[conversion]\npoints = 50\n").unwrap();
    let p = c.pipeline(Some(0)).unwrap();
    assert_eq!(p.pose_rig.n_views, 4);
    assert!((p.pose_rig.elevation - 30f64.to_radians()).abs() < 1e-15);
    assert_eq!(p.pose_fit.iterations, 10);
    assert_eq!(p.pose_fit.robust_kernel, hoi_core::convert::RobustKernel::GemanMcClure(5.0));
    assert_eq!(p.mesh_to_field.n_points, 50);
    assert_eq!(p.mesh_to_field.resolution, 16);
    assert_eq!(p.field_resolution, 16);
}

#[test]
fn object_placement_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cube = TriangleMesh::cuboid(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.5, 0.25), Vec3::repeat(0.5));
    std::fs::create_dir(dir.path().join("meshes")).unwrap();
    std::fs::write(dir.path().join("meshes/box.obj"), write_obj(&cube)).unwrap();
    let cfg = dir.path().join("scene.toml");
    std::fs::write(
        &cfg,
        "[scene]\ninteraction = \"on\"\ncategory = \"box\"\nobject = \"meshes/box.obj\"\n\
         rotation_deg = [0.0, 0.0, 90.0]\ntranslation = [0.1, 0.0, -0.2]\nscale = 0.5\n",
    )
    .unwrap();
    let c = Config::load(&cfg).unwrap();
    let placed = c.object().unwrap();
    for (p, q) in cube.vertices().iter().zip(placed.vertices()) {
        // 90 degrees about z maps (x, y, z) to (-y, x, z)
        let expected = Vec3::new(-p.y, p.x, p.z) * 0.5 + Vec3::new(0.1, 0.0, -0.2);
        assert!((q - expected).norm() < 1e-12, "{q} vs {expected}");
    }
}

#[test]
fn bad_scale_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.obj"), write_obj(&TriangleMesh::cuboid(Vec3::zeros(), Vec3::repeat(0.1), Vec3::zeros()))).unwrap();
    let c = Config::parse(&format!("{SCENE}object = \"b.obj\"\nscale = 0.0\n"), dir.path().into()).unwrap();
    assert!(matches!(c.object(), Err(Error::Config(_))));
}

#[test]
fn channels_follow_their_sections() {
    let dir = tempfile::tempdir().unwrap();
    let target = hoi_core::image::Image::filled(8, 8, &[0.2, 0.4, 0.6]);
    std::fs::write(dir.path().join("t.pfm"), hoi::image_io::encode_pfm(&target).unwrap()).unwrap();
    let text = format!(
        "{SCENE}\
         [guidance.channel.a]\nprovider = \"image-matching\"\nimage = \"t.pfm\"\n\
         [guidance.channel.b]\nprovider = \"remote\"\ntarget = \"human\"\ncommand = [\"bridge\", \"--model\", \"x\"]\ncapability = \"multi\"\nweight = 2.0\ncfg_weight = 7.5\n\
         [guidance.channel.c]\nprovider = \"image-matching\"\nviews = [{{ image = \"t.pfm\", azimuth_deg = 0.0, elevation_deg = 10.0, fov_deg = 40.0 }}]\ntarget = \"human\"\nprompt = \"interaction\"\n"
    );
    let c = Config::parse(&text, dir.path().into()).unwrap();
    let ch = c.channels().unwrap();
    assert_eq!(ch.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    assert_eq!(ch[0].target, RenderTarget::Composite);
    assert_eq!(ch[0].prompt.positive, "a photo of a person sitting on a chair, high detail, photography");
    assert_eq!(ch[0].cfg_weight, 50.0);
    assert_eq!(ch[0].provider.capability(), Capability::SingleView);
    assert_eq!(ch[1].target, RenderTarget::HumanOnly);
    assert_eq!(ch[1].prompt.positive, "a photo of a person, high detail, photography");
    assert_eq!(ch[1].provider.capability(), Capability::MultiView);
    assert_eq!((ch[1].weight, ch[1].cfg_weight), (2.0, 7.5));
    assert_eq!(ch[2].provider.capability(), Capability::MultiView);
    assert_eq!(ch[2].prompt, ch[0].prompt);
}

#[test]
fn channel_sources_must_be_unambiguous() {
    for extra in [
        "[guidance.channel.a]\nprovider = \"image-matching\"\n",
        "[guidance.channel.a]\nprovider = \"remote\"\n",
        "[guidance.channel.a]\nprovider = \"remote\"\ncommand = []\n",
        "[guidance.channel.a]\nprovider = \"remote\"\ncommand = [\"x\"]\nsocket = \"s\"\n",
        "[guidance.channel.a]\nprovider = \"remote\"\ncommand = [\"x\"]\ntimeout_s = 0.0\n",
    ] {
        let c = parse(extra).unwrap();
        assert!(matches!(c.channels(), Err(Error::Config(_))), "{extra}");
    }
    let c = parse("[guidance.channel.a]\nprovider = \"image-matching\"\nimage = \"missing.pfm\"\n").unwrap();
    assert!(matches!(c.channels(), Err(Error::Io { .. })));
}
