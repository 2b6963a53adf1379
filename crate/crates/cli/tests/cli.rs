use std::path::Path;
use std::process::{Command, Output};

use dpc_core::datakit::{read_kitti_poses, write_kitti_poses};
use dpc_core::evaluation::Trajectory;
use dpc_core::Pose;

fn dpc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DPC_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn eval_of_ground_truth_against_itself_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let poses: Vec<Pose> = (0..=900)
        .map(|i| Pose::from_rows(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, i as f64]).unwrap())
        .collect();
    write_kitti_poses(&dir.path().join("gt.txt"), &poses).unwrap();
    let text = ok(&dpc(
        &["eval", "--est", "gt.txt", "--gt", "gt.txt", "--out-dir", "report"],
        dir.path(),
    ));
    let header = text.lines().next().unwrap();
    for col in ["Sequence", "Trans. (%)", "Rot. (deg/100m)", "m-ATE (m)", "m-ATE (deg)"] {
        assert!(header.contains(col), "{header}");
    }
    let row: Vec<&str> = text.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(row[0], "gt");
    for v in &row[1..] {
        assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{text}");
    }
    assert!(dir.path().join("report/report.csv").exists());
    assert!(dir.path().join("report/gt_xz.csv").exists());
}

#[test]
fn synth_is_deterministic_given_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "synth", "--seed", "7", "--out", out, "--height", "32", "--width", "40", "--laps", "1",
            "--straight-steps", "2", "--turn-steps", "4",
        ]
    };
    ok(&dpc(&args("a"), dir.path()));
    ok(&dpc(&args("b"), dir.path()));
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(a.len() > 5);
    assert_eq!(a, b);
    let other = vec![
        "synth", "--seed", "8", "--out", "c", "--height", "32", "--width", "40", "--laps", "1",
        "--straight-steps", "2", "--turn-steps", "4",
    ];
    ok(&dpc(&other, dir.path()));
    assert_ne!(tree(&dir.path().join("c")), a);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpc(&["eval", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = dpc(&["select", "--records", "r.csv", "--criterion", "vibes"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_one_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpc(&["eval", "--est", "missing_est.txt", "--gt", "missing_gt.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_est.txt"));
    std::fs::write(dir.path().join("bad.txt"), "1 0 0 0 0 1 0 0 0 0 1 0 7\n").unwrap();
    let out = dpc(&["eval", "--est", "bad.txt", "--gt", "bad.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.txt:1"), "{err}");
}

#[test]
fn pipeline_from_synthesis_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = |out: &str, seed: &str| {
        ok(&dpc(
            &[
                "synth", "--seed", seed, "--out", out, "--height", "48", "--width", "64", "--laps", "1",
                "--straight-steps", "4", "--turn-steps", "6",
            ],
            d,
        ))
    };
    synth("train", "1");
    synth("val", "2");
    std::fs::write(d.join("run.cfg"), "mode = stereo\nheight = 48\nwidth_px = 64\nbatch_size = 8\n").unwrap();
    let prep = ok(&dpc(
        &["prepare", "--manifest", "train/manifest.txt", "--out", "prep", "--config", "run.cfg"],
        d,
    ));
    assert!(prep.contains("pairs kept"), "{prep}");
    assert!(d.join("prep/synth/flows/000000.flo").exists());
    ok(&dpc(
        &[
            "train",
            "--seed",
            "3",
            "--manifest",
            "prep/synth/manifest.txt",
            "--val-manifest",
            "val/manifest.txt",
            "--pairs",
            "prep/pairs.txt",
            "--config",
            "run.cfg",
            "--epochs",
            "2",
            "--out",
            "run",
        ],
        d,
    ));
    for f in ["run/records.csv", "run/config.txt", "run/epoch_001.ckpt", "run/epoch_002_val.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }
    for criterion in ["gradient", "loopclosure"] {
        let sel = ok(&dpc(&["select", "--records", "run/records.csv", "--criterion", criterion], d));
        assert!(sel.starts_with("epoch "), "{sel}");
        assert!(sel.contains(".ckpt"), "{sel}");
    }
    ok(&dpc(
        &[
            "correct",
            "--checkpoint",
            "run/epoch_002.ckpt",
            "--manifest",
            "val/manifest.txt",
            "--mode",
            "rotation-only",
            "--out",
            "corrected_motion.txt",
            "--trajectory-out",
            "corrected.txt",
        ],
        d,
    ));
    let input = Trajectory::from_global(read_kitti_poses(&d.join("val/vo.txt")).unwrap()).unwrap();
    let corrected = read_kitti_poses(&d.join("corrected_motion.txt")).unwrap();
    assert_eq!(corrected.len() + 1, input.len());
    let mut rotation_changed = false;
    for (c, w) in corrected.iter().zip(input.poses().windows(2)) {
        let m = w[0].inverse().compose(&w[1]);
        assert!((c.translation() - m.translation()).norm() < 1e-9);
        rotation_changed |= (c.rotation() - m.rotation()).norm() > 0.0;
    }
    assert!(rotation_changed);
    let report = ok(&dpc(&["eval", "--est", "corrected.txt", "--gt", "val/gt.txt"], d));
    assert!(report.contains("corrected"), "{report}");
}
