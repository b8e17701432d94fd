use std::path::Path;
use std::process::{Command, Output};

use fastmap::synth::{self, SynthSpec};
use fastmap::{ingest, pipeline, PipelineConfig};

fn fastmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastmap"))
        .args(args)
        .output()
        .expect("spawn fastmap")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn metric(table: &str, name: &str) -> f64 {
    table
        .lines()
        .find_map(|l| l.strip_prefix(name).map(|v| v.trim().parse::<f64>().expect("number")))
        .unwrap_or_else(|| panic!("{name} missing from {table}"))
}

fn small_synth(dir: &Path, seed: &str) {
    let out = fastmap(&[
        "synth",
        "-o",
        p(dir),
        "--images",
        "10",
        "--points",
        "200",
        "--noise",
        "0.5",
        "--seed",
        seed,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn synth_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let est = dir.path().join("est");
    small_synth(&scene, "3");

    let out = fastmap(&[
        "run",
        p(&scene.join("matches.txt")),
        "-o",
        p(&est),
        "--seed",
        "5",
        "--threads",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["cameras.txt", "images.txt", "points3D.txt", "report.txt"] {
        assert!(est.join(f).is_file(), "missing {f}");
    }
    let report = std::fs::read_to_string(est.join("report.txt")).unwrap();
    assert!(report.contains("seed = 5\n"));
    assert!(report.contains("threads = 2\n"));
    assert!(report.contains("stage epipolar time_s="));
    assert!(report.ends_with("status = ok\n"));

    let out = fastmap(&["eval", p(&est), p(&scene.join("gt"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert_eq!(metric(&table, "RRA@1"), 100.0, "{table}");
    assert!(metric(&table, "ATE") < 0.01, "{table}");
}

#[test]
fn eval_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "1");
    let gt = dir.path().join("gt");
    let out = fastmap(&["eval", p(&gt), p(&gt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert_eq!(metric(&table, "ATE"), 0.0);
    for name in ["RRA@1", "RRA@3", "RTA@1", "RTA@3", "AUC@1", "AUC@3"] {
        assert_eq!(metric(&table, name), 100.0, "{name} in {table}");
    }
}

#[test]
fn synth_with_same_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_synth(&a, "1");
    small_synth(&b, "1");
    for f in ["matches.txt", "gt/cameras.txt", "gt/images.txt", "gt/points3D.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn run_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(&dir.path().join("scene"), "2");
    let matches = dir.path().join("scene/matches.txt");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = fastmap(&["run", p(&matches), "-o", p(out_dir), "--seed", "9", "--threads", "3"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for f in ["cameras.txt", "images.txt", "points3D.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn disconnected_scene_fails_in_pair_filtering() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = synth::generate(&SynthSpec {
        n_images: 8,
        n_points: 200,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    scene.matches.pairs.retain(|pm| pm.j < 2);
    let matches = dir.path().join("matches.txt");
    ingest::write_matches(&scene.matches, &matches).unwrap();
    let est = dir.path().join("est");

    let out = fastmap(&["run", p(&matches), "-o", p(&est)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rotation.filter_pairs"), "{}", stderr(&out));
    let report = std::fs::read_to_string(est.join("report.txt")).unwrap();
    assert!(
        report.contains("status = failed stage rotation.filter_pairs"),
        "{report}"
    );
}

#[test]
fn eval_on_different_image_sets_uses_the_intersection() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "6");
    let gt_dir = dir.path().join("gt");
    let mut est = ingest::read_model(&gt_dir).unwrap();
    est.poses.poses[0] = None;
    est.image_names[1] = "renamed.png".into();
    let est_dir = dir.path().join("est");
    ingest::write_model(&est, &est_dir).unwrap();

    let out = fastmap(&["eval", p(&est_dir), p(&gt_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("image sets differ"), "{}", stderr(&out));
    let table = stdout(&out);
    assert_eq!(metric(&table, "ATE"), 0.0);
    assert!(
        metric(&table, "RRA@1") < 100.0,
        "missing images count as failures: {table}"
    );
}

#[test]
fn export_rewrites_a_model_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "7");
    let (gt_dir, out_dir) = (dir.path().join("gt"), dir.path().join("copy"));
    let out = fastmap(&["export", p(&gt_dir), "-o", p(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["cameras.txt", "points3D.txt"] {
        assert_eq!(
            std::fs::read(gt_dir.join(f)).unwrap(),
            std::fs::read(out_dir.join(f)).unwrap(),
            "{f} differs"
        );
    }
    // Poses pass through a quaternion and t = -R o, so only the last bits may move.
    let (a, b) = (
        ingest::read_model(&gt_dir).unwrap(),
        ingest::read_model(&out_dir).unwrap(),
    );
    assert_eq!(a.image_names, b.image_names);
    for (pa, pb) in a.poses.poses.iter().zip(&b.poses.poses) {
        let (pa, pb) = (pa.unwrap(), pb.unwrap());
        assert!((pa.rotation.matrix() - pb.rotation.matrix()).abs().max() < 1e-12);
        assert!((pa.center - pb.center).abs().max() < 1e-12);
    }
}

#[test]
fn config_file_and_flags_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let out = fastmap(&["config"]);
    assert!(out.status.success());
    let defaults = stdout(&out);
    assert!(PipelineConfig::parse(&defaults).unwrap() == PipelineConfig::default());

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = fastmap(&["run", "missing.txt", "-o", p(&dir.path().join("o")), "-c", p(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no_such_key"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_nonzero_with_help() {
    let out = fastmap(&["run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    let out = fastmap(&["synth", "-o", "x", "--layout", "spiral"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown layout"), "{}", stderr(&out));
}

#[test]
fn unreadable_match_file_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("matches.txt");
    std::fs::write(&bad, "this is not a match file\n").unwrap();
    let est = dir.path().join("est");
    let err = pipeline::run_to_dir(&bad, &est, &PipelineConfig::default(), 0).unwrap_err();
    assert_eq!(err.stage, "ingest.parse");
    let report = std::fs::read_to_string(est.join("report.txt")).unwrap();
    assert!(report.contains("status = failed stage ingest.parse"), "{report}");
}
