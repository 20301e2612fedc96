use std::path::Path;
use std::process::{Command, Output};

fn relufield(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relufield"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn shapes(dir: &Path) {
    let out = relufield(&["make-scene", "shapes", "--out", "shapes.png", "--size", "64"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const SMALL_FIT: [&str; 8] = ["--dims", "16", "--stage-iters", "30", "--shrink-exponent", "1", "--out", "runs"];

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&relufield(&["--help"], dir.path())), 0);
    assert_eq!(code(&relufield(&["fit-image", "--nonsense"], dir.path())), 1);
    assert_eq!(code(&relufield(&[], dir.path())), 1);
}

#[test]
fn missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = relufield(&["fit-image", "--image", "absent.png", "--out", "runs"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.png"));
}

#[test]
fn malformed_mesh_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("open.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let out = relufield(&["fit-occupancy", "--mesh", "open.obj", "--out", "runs"], dir.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn existing_run_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    shapes(dir.path());
    let mut args = vec!["fit-image", "--image", "shapes.png", "--run-id", "a"];
    args.extend(SMALL_FIT);
    assert_eq!(code(&relufield(&args, dir.path())), 0);
    let marker = dir.path().join("runs/a/marker");
    std::fs::write(&marker, "keep").unwrap();

    let refused = relufield(&args, dir.path());
    assert_eq!(code(&refused), 1);
    assert!(marker.exists(), "refused run must not touch the old directory");

    args.push("--force");
    assert_eq!(code(&relufield(&args, dir.path())), 0);
    assert!(!marker.exists());
    assert!(dir.path().join("runs/a/grid.rluf").exists());
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    shapes(dir.path());
    let mut first = vec!["--threads", "1", "fit-image", "--image", "shapes.png", "--run-id", "first", "--seed", "7"];
    first.extend(SMALL_FIT);
    assert_eq!(code(&relufield(&first, dir.path())), 0);
    let second = [
        "--threads", "1", "fit-image", "--image", "shapes.png", "--run-id", "second", "--config",
        "runs/first/config.txt", "--out", "runs",
    ];
    assert_eq!(code(&relufield(&second, dir.path())), 0);

    let read = |run: &str, file: &str| std::fs::read(dir.path().join("runs").join(run).join(file)).unwrap();
    assert_eq!(read("first", "grid.rluf"), read("second", "grid.rluf"));
    assert_eq!(read("first", "config.txt"), read("second", "config.txt"));
    let rows = |run: &str| {
        relu_fields::io::read_metrics(&dir.path().join("runs").join(run).join("metrics.csv"))
            .unwrap()
            .into_iter()
            .map(|r| (r.stage, r.iteration, r.loss.to_bits(), r.psnr_db.map(f64::to_bits)))
            .collect::<Vec<_>>()
    };
    assert_eq!(rows("first"), rows("second"));
}

#[test]
fn fit_image_prints_a_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    shapes(dir.path());
    let mut args = vec!["fit-image", "--image", "shapes.png", "--mode", "none"];
    args.extend(SMALL_FIT);
    let out = relufield(&args, dir.path());
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "grid_dims,mode,psnr_db,seconds");
    assert!(lines[1].starts_with("16x16,none,"), "{}", lines[1]);
}

#[test]
fn selfcheck_passes_and_catches_a_perturbed_constant() {
    let dir = tempfile::tempdir().unwrap();
    let clean = relufield(&["selfcheck"], dir.path());
    assert_eq!(code(&clean), 0, "{}", String::from_utf8_lossy(&clean.stdout));
    let broken = relufield(&["selfcheck", "--perturb-sh"], dir.path());
    assert_eq!(code(&broken), 2);
    assert!(String::from_utf8_lossy(&broken.stdout).contains("FAIL"));
}

#[test]
fn occupancy_round_trip_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&relufield(&["make-scene", "sphere", "--out", "s.obj", "--subdivisions", "2"], p)), 0);
    let fit = relufield(
        &[
            "fit-occupancy", "--mesh", "s.obj", "--dims", "8", "--stage-iters", "40", "--shrink-exponent", "0",
            "--batch-points", "2048", "--iou-samples", "20000", "--out", "runs", "--run-id", "occ",
        ],
        p,
    );
    assert_eq!(code(&fit), 0, "{}", String::from_utf8_lossy(&fit.stderr));
    let trained = String::from_utf8_lossy(&fit.stdout).lines().nth(1).unwrap().split(',').nth(2).unwrap().to_string();
    let eval = relufield(
        &["eval", "--grid", "runs/occ/grid.rluf", "--mesh", "s.obj", "--iou-samples", "20000"],
        p,
    );
    assert_eq!(code(&eval), 0);
    let evaluated = String::from_utf8_lossy(&eval.stdout).lines().nth(1).unwrap().to_string();
    assert_eq!(trained, evaluated, "eval must pick the mode up from the run config");
    assert!(p.join("runs/occ/depth.png").exists());
}
