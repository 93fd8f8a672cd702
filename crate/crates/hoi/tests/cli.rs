use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hoi::image_io::{decode_pfm, decode_ppm};
use hoi::rig::{load_rig, pose_from_json};
use hoi_core::convert::mean_joint_error;
use hoi_core::demo::seated_pose;
use hoi_core::geometry::{write_obj, TriangleMesh};
use hoi_core::Vec3;

fn hoi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The demo scene with its schedule shrunk to a few steps.
fn small_demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(hoi(&["demo", "--out", "."], dir.path()));
    let path = dir.path().join("config.toml");
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("steps = 100", "steps = 3")
        .replace("samples_per_ray = 64", "samples_per_ray = 16")
        .replace("field_resolution = 32", "field_resolution = 16")
        .replace("iterations = 3000", "iterations = 200")
        .replace("[pose]\nresolution = 64", "[pose]\niterations = 800\nresolution = 48");
    std::fs::write(&path, text).unwrap();
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn pipeline_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoi(&["pipeline", "--config", "c.toml", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn pipeline_fills_the_run_directory() {
    let dir = small_demo();
    ok(hoi(&["pipeline", "--config", "config.toml", "--seed", "5", "--out", "run"], dir.path()));
    let run = dir.path().join("run");
    for f in ["pose_t0.json", "pose_t1.json", "human_t0.obj", "human_t1.obj", "field_t0.vxf", "field_t1.vxf", "log.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let previews: Vec<PathBuf> = std::fs::read_dir(run.join("previews")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(previews.len(), 7);
    for p in &previews {
        let img = decode_ppm(&read(p)).unwrap();
        assert_eq!((img.width(), img.height()), (128, 128));
    }

    let log = String::from_utf8(read(run.join("log.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "stage,step,t,r_sa,r_i,grad_norm,hoi,human");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    let stages: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(stages, ["coarse", "coarse", "coarse", "fine", "fine", "fine", "refine", "refine", "refine"]);
    for r in &rows {
        assert_eq!(r.len(), 8);
        let t: f64 = r[2].parse().unwrap();
        assert!(t > 0.0 && t < 1.0);
        if r[0] == "refine" {
            // human-only channel dropped after re-initialization
            assert_eq!(r[7], "0");
            assert!(t <= 0.70);
        }
    }

    let m: serde_json::Value = serde_json::from_slice(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(m["seed"], 5);
    let distill: Vec<&serde_json::Value> = m["stages"].as_array().unwrap().iter().filter(|s| s["kind"] == "distill").collect();
    assert_eq!(distill.len(), 3);
    for s in &distill[..2] {
        assert_eq!(s["learning_rate"], 0.01);
        assert_eq!(s["weight_decay"], 0.01);
        assert_eq!(s["weights"]["sparsity"], 10_000.0);
    }
    assert_eq!(distill[2]["learning_rate"], 0.001);
    assert_eq!(distill[2]["weights"]["sparsity"], 1000.0);
    assert_eq!(distill[2]["human_only_channels"], false);

    let human = load_rig(&dir.path().join("rig.json"), None).unwrap();
    let pose = pose_from_json(&String::from_utf8(read(run.join("pose_t1.json"))).unwrap()).unwrap();
    let err = mean_joint_error(human.skeleton(), &pose, &seated_pose()).unwrap() / human.body_height();
    assert!(err < 0.05, "pose error {err}");
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = small_demo();
    let d = dir.path();
    ok(hoi(&["pipeline", "--config", "config.toml", "--seed", "9", "--out", "a", "--no-previews"], d));
    // stop after the pose read-off, before the re-initialization
    let out = hoi(&["pipeline", "--config", "config.toml", "--seed", "9", "--out", "b", "--no-previews", "--stop-after", "3"], d);
    assert!(!out.status.success());
    let state: serde_json::Value = serde_json::from_slice(&read(d.join("b/checkpoint/state.json"))).unwrap();
    assert_eq!(state["next_stage"], 4);
    assert!(!d.join("b/pose_t1.json").exists());

    let wrong_seed = hoi(&["pipeline", "--config", "config.toml", "--seed", "10", "--out", "b", "--resume"], d);
    assert!(!wrong_seed.status.success());

    ok(hoi(&["pipeline", "--config", "config.toml", "--seed", "9", "--out", "b", "--no-previews", "--resume"], d));
    for f in ["pose_t0.json", "pose_t1.json", "field_t1.vxf", "human_t1.obj", "log.csv", "checkpoint/field.vxf"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
}

#[test]
fn failing_provider_leaves_a_checkpoint_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[scene]\ninteraction = \"on\"\ncategory = \"box\"\nfield_resolution = 8\n\
         [schedule.0]\nsteps = 2\nresolution = 8\nsamples_per_ray = 8\n\
         [guidance.channel.remote]\nprovider = \"remote\"\ncommand = [\"/nonexistent/bridge\"]\ntimeout_s = 1.0\n\
         [detector]\npose = \"p.json\"\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("p.json"), hoi::rig::pose_to_json(&seated_pose())).unwrap();
    let out = hoi(&["pipeline", "--config", "c.toml", "--seed", "1", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("remote"));
    let state: serde_json::Value = serde_json::from_slice(&read(dir.path().join("run/checkpoint/state.json"))).unwrap();
    assert_eq!(state["next_stage"], 1);
    assert_eq!(state["stage_name"], "init");
}

#[test]
fn remote_channel_runs_through_a_child_process() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_hoi");
    std::fs::write(
        dir.path().join("c.toml"),
        format!(
            "[scene]\ninteraction = \"on\"\ncategory = \"box\"\nfield_resolution = 8\n\
             [schedule.0]\nsteps = 2\nresolution = 8\nsamples_per_ray = 8\nbatch_size = 2\n\
             [guidance.channel.echo]\nprovider = \"remote\"\ncommand = [{exe:?}, \"echo-server\"]\ncapability = \"multi\"\n"
        ),
    )
    .unwrap();
    ok(hoi(&["distill", "--config", "c.toml", "--seed", "2", "--out", "f.vxf"], dir.path()));
    let field = hoi::vxf::decode(&read(dir.path().join("f.vxf"))).unwrap();
    assert_eq!(field.resolution(), [8, 8, 8]);
}

#[test]
fn sds_dump_of_image_matching_is_the_render_residual() {
    let dir = small_demo();
    let d = dir.path();
    // an empty field renders the background, so the residual is background minus target
    std::fs::write(d.join("empty.vxf"), hoi::vxf::encode(&hoi_core::field::VoxelField::empty(8).unwrap())).unwrap();
    let view = ["--azimuth", "90", "--elevation", "15", "--fov", "40", "--d", "0.9", "--resolution", "64", "--spp", "32"];
    let mut args = vec!["sds-dump", "--config", "config.toml", "--channel", "human", "--field", "empty.vxf", "--t", "0.5", "--out-dir", "dump"];
    args.extend(view);
    ok(hoi(&args, d));
    let grad = decode_pfm(&read(d.join("dump/gradient.pfm"))).unwrap();
    let norm = decode_pfm(&read(d.join("dump/norm.pfm"))).unwrap();
    let target = decode_pfm(&read(d.join("targets/human_2.pfm"))).unwrap();
    assert_eq!((grad.width(), grad.channels(), norm.channels()), (64, 3, 1));
    // at t = 0.5 the scale sqrt(abar / (1 - abar)) is 1
    let mut worst = 0.0f64;
    for (g, x) in grad.data().iter().zip(target.data()) {
        worst = worst.max((g - (1.0 - x)).abs());
    }
    assert!(worst < 1e-5, "{worst}");
    for p in 0..64 * 64 {
        let g = &grad.data()[3 * p..3 * p + 3];
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        assert!((norm.data()[p] - n).abs() < 1e-6);
    }
}

#[test]
fn render_and_fitpose_from_a_field() {
    let dir = small_demo();
    let d = dir.path();
    ok(hoi(&["render", "--field", "truth.vxf", "--object", "seat.obj", "--resolution", "32", "--spp", "32", "--out", "r.ppm", "--pfm", "r.pfm", "--opacity", "o.pfm"], d));
    let img = decode_ppm(&read(d.join("r.ppm"))).unwrap();
    let pfm = decode_pfm(&read(d.join("r.pfm"))).unwrap();
    let op = decode_pfm(&read(d.join("o.pfm"))).unwrap();
    assert_eq!((img.width(), op.channels()), (32, 1));
    for (a, b) in img.data().iter().zip(pfm.data()) {
        assert_eq!(*a, (255.0 * b.clamp(0.0, 1.0)).round() / 255.0);
    }
    assert!(op.data().iter().any(|&v| v > 0.5));

    ok(hoi(
        &["fitpose", "--rig", "rig.json", "--field", "truth.vxf", "--truth", "truth.json", "--resolution", "64", "--out", "fit.json", "--obj", "fit.obj", "--write-detections", "det.json"],
        d,
    ));
    let human = load_rig(&d.join("rig.json"), None).unwrap();
    let fit = pose_from_json(&String::from_utf8(read(d.join("fit.json"))).unwrap()).unwrap();
    let err = mean_joint_error(human.skeleton(), &fit, &seated_pose()).unwrap() / human.body_height();
    assert!(err < 0.01, "{err}");
    // the written detections reproduce the fit
    ok(hoi(&["fitpose", "--rig", "rig.json", "--detections", "det.json", "--resolution", "64", "--out", "fit2.json"], d));
    assert_eq!(read(d.join("fit.json")), read(d.join("fit2.json")));
}

#[test]
fn mesh2field_warns_about_meshes_outside_the_ball() {
    let dir = tempfile::tempdir().unwrap();
    let big = TriangleMesh::cuboid(Vec3::repeat(-0.9), Vec3::repeat(0.9), Vec3::repeat(0.5));
    std::fs::write(dir.path().join("big.obj"), write_obj(&big)).unwrap();
    let out = ok(hoi(&["mesh2field", "--mesh", "big.obj", "--resolution", "8", "--iterations", "20", "--out", "f.vxf"], dir.path()));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside the unit support ball"));
    assert!(dir.path().join("f.vxf").is_file());

    let small = TriangleMesh::cuboid(Vec3::repeat(-0.3), Vec3::repeat(0.3), Vec3::repeat(0.5));
    std::fs::write(dir.path().join("small.obj"), write_obj(&small)).unwrap();
    let out = ok(hoi(&["mesh2field", "--mesh", "small.obj", "--resolution", "8", "--iterations", "20", "--out", "g.vxf"], dir.path()));
    assert!(String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn mesh2field_warns_about_open_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let cube = TriangleMesh::cuboid(Vec3::repeat(-0.3), Vec3::repeat(0.3), Vec3::repeat(0.5));
    let open = TriangleMesh::new(cube.vertices().to_vec(), cube.faces()[2..].to_vec(), cube.vertex_colors().to_vec()).unwrap();
    std::fs::write(dir.path().join("open.obj"), write_obj(&open)).unwrap();
    let out = ok(hoi(&["mesh2field", "--mesh", "open.obj", "--resolution", "8", "--iterations", "20", "--out", "f.vxf"], dir.path()));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not watertight"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(hoi(&["gradcheck", "--cases", "30"], dir.path()));
    assert!(String::from_utf8_lossy(&out.stdout).contains("30 cases"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.vxf"), b"VXF0").unwrap();
    assert!(!hoi(&["render", "--field", "junk.vxf", "--out", "x.ppm"], dir.path()).status.success());
    assert!(!hoi(&["render", "--field", "missing.vxf", "--out", "x.ppm"], dir.path()).status.success());
    std::fs::write(dir.path().join("c.toml"), "[scene]\ninteraction = \"on\"\n").unwrap();
    let out = hoi(&["pipeline", "--config", "c.toml", "--seed", "1", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("category"));
}
