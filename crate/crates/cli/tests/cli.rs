//! End-to-end checks of the binary: exit codes, the full pipeline, and
//! byte-determinism of seeded outputs.

use sdfield::geom::vec3;
use sdfield::mesh::{save_mesh, shapes};
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdfield"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_value(out: &Output, key: &str) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return v.trim().parse().unwrap();
            }
        }
    }
    panic!("no `{key}` line in output:\n{text}");
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["sample", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["lab", "sweep", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_domain_error() {
    let out = run(&["normalize", "/nonexistent/in.obj", "/nonexistent/out.obj"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        stderr.lines().any(|l| l.starts_with("error:")),
        "{stderr}"
    );
}

#[test]
fn bad_config_key_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "bogus_key = 3\n").unwrap();
    let pool = dir.path().join("missing.cfsm");
    let out = run(&[
        "train",
        pool.to_str().unwrap(),
        dir.path().join("out.cftr").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn eval_self_comparison_is_sampling_noise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sphere.obj");
    save_mesh(&shapes::icosphere(0.5, 3), &path).unwrap();
    let p = path.to_str().unwrap();
    let out = run(&["eval", p, p, "--points", "30000", "--seed", "1"]);
    assert_success(&out, "eval");
    let chamfer = stdout_value(&out, "chamfer");
    assert!(chamfer < 1e-4, "self-comparison chamfer {chamfer}");
}

#[test]
fn lab_critical_prints_certificate() {
    let out = run(&["lab", "critical"]);
    assert_success(&out, "lab critical");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("is_critical = true"), "{text}");
    assert!(stdout_value(&out, "hessian_min_eig") > 0.0);

    let out = run(&["lab", "critical", "--x-dist", "two-point"]);
    assert_success(&out, "lab critical two-point");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("degenerate = true"), "{text}");

    let out = run(&["lab", "critical", "--json"]);
    assert_success(&out, "lab critical json");
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("valid json from --json");
    assert_eq!(v["is_critical"], serde_json::Value::Bool(true));
}

#[test]
fn lab_sweep_rejects_bad_radii() {
    let out = run(&["lab", "sweep", "--radii", "0.1,0.2,0.3"]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_shape(path: &Path, which: usize) {
    // Denormalized on purpose: offset and scaled so `normalize` has work.
    let pose = sdfield::geom::RigidTransform::new(
        sdfield::geom::Quat::from_axis_angle(vec3(1.0, 2.0, 0.5), 0.8),
        vec3(3.0, -1.0, 2.0),
    );
    let base = match which {
        0 => shapes::box_mesh(vec3(0.0, 0.0, 0.0), vec3(1.0, 0.7, 0.4)),
        _ => shapes::cylinder_mesh(vec3(0.0, 0.0, 0.0), 0.5, 1.6, 20),
    };
    save_mesh(&shapes::transformed(&base, 2.5, &pose), path).unwrap();
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    for which in 0..2 {
        write_shape(&dir.path().join(format!("raw{which}.obj")), which);
        let out = run(&[
            "normalize",
            &p(&format!("raw{which}.obj")),
            &p(&format!("norm{which}.obj")),
        ]);
        assert_success(&out, "normalize");
        let out = run(&[
            "sample",
            &p(&format!("norm{which}.obj")),
            &p(&format!("shape{which}.cfsm")),
            "--grid",
            "16",
            "--per-voxel",
            "24",
            "--seed",
            "7",
        ]);
        assert_success(&out, "sample");
    }

    // Seeded sampling is byte-identical.
    let out = run(&[
        "sample",
        &p("norm0.obj"),
        &p("again.cfsm"),
        "--grid",
        "16",
        "--per-voxel",
        "24",
        "--seed",
        "7",
    ]);
    assert_success(&out, "sample again");
    assert_eq!(
        std::fs::read(dir.path().join("shape0.cfsm")).unwrap(),
        std::fs::read(dir.path().join("again.cfsm")).unwrap()
    );

    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# desk-scale settings\n\
         iterations = 400\n\
         shapes_per_batch = 2\n\
         voxels_per_shape = 64\n\
         points_per_voxel = 8\n\
         halving_period = 200\n\
         latent = 8\n\
         hidden = 16\n\
         depth = 3\n\
         k = 1\n",
    )
    .unwrap();
    let train_args = [
        "train",
        &p("shape0.cfsm"),
        &p("shape1.cfsm"),
        &p("model.cftr"),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
    ];
    let out = run(&train_args);
    assert_success(&out, "train");

    // Same seed, same bytes.
    let again: Vec<String> = {
        let mut v: Vec<String> = train_args.iter().map(|s| s.to_string()).collect();
        v[3] = p("model2.cftr");
        v
    };
    let out = run(&again.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_success(&out, "train again");
    assert_eq!(
        std::fs::read(dir.path().join("model.cftr")).unwrap(),
        std::fs::read(dir.path().join("model2.cftr")).unwrap()
    );

    let out = run(&[
        "fit",
        &p("model.cftr"),
        &p("shape0.cfsm"),
        &p("shape0.cffd"),
        "--iters",
        "120",
        "--lr",
        "5e-4",
    ]);
    assert_success(&out, "fit");

    let out = run(&[
        "extract",
        &p("model.cftr"),
        &p("shape0.cffd"),
        &p("recon.obj"),
        "--res",
        "32",
    ]);
    assert_success(&out, "extract");

    let out = run(&[
        "eval",
        &p("recon.obj"),
        &p("norm0.obj"),
        "--points",
        "5000",
        "--seed",
        "9",
    ]);
    assert_success(&out, "eval");
    let chamfer = stdout_value(&out, "chamfer");
    assert!(chamfer.is_finite() && chamfer >= 0.0);
}
