//! End-to-end checks of the command-line surface: every subcommand, the
//! error-class contract, and byte-determinism of generated artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn flowdiff(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowdiff"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    // 32x32 scenes, 3 levels (k0=1..k1=3), minute-scale budgets.
    let text = "\
crop_size = 32\n\
short_side = 32\n\
k0 = 1\n\
k1 = 3\n\
n_steps = 3\n\
total_timesteps = 100\n\
d_max = 8\n\
bg_max_disp = 4\n\
train_count = 6\n\
eval_count = 2\n\
enc_base = 8\n\
enc_cap = 16\n\
dec_widths = 16,16,12,8\n\
den_width = 16\n\
den_width_mid = 24\n\
den_width_deep = 32\n\
temb_dim = 32\n\
phase1_steps = 4\n\
phase1_batch = 2\n\
phase2_steps = 4\n\
phase2_batch = 2\n\
phase3_steps = 2\n\
phase3_batch = 2\n\
autosave_every = 0\n\
seed = 5\n";
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn inspect_schedule_prints_rows_and_path() {
    let out = flowdiff(
        &[
            "inspect-schedule",
            "--t",
            "1000",
            "--k0",
            "2",
            "--k1",
            "4",
            "--steps",
            "6",
        ],
        &[],
    );
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    let stage_rows = text
        .lines()
        .filter(|l| l.starts_with('4') || l.starts_with('3') || l.starts_with('2'))
        .count();
    assert_eq!(stage_rows, 3, "{text}");
    let path_rows = text.lines().filter(|l| l.starts_with("t=")).count();
    assert_eq!(path_rows, 6, "{text}");
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = flowdiff(
            &[
                "gen-data",
                "--count",
                "3",
                "--seed",
                "11",
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        );
        assert_ok(&r);
    }
    let manifest_a = std::fs::read_to_string(out_a.join("manifest.txt")).unwrap();
    assert_eq!(manifest_a.lines().count(), 3);
    // Byte-identical rerun.
    for entry in ["000000/i0.png", "000001/f0.flo", "manifest.txt"] {
        let a = std::fs::read(out_a.join(entry)).unwrap();
        let b = std::fs::read(out_b.join(entry)).unwrap();
        assert_eq!(a, b, "{entry} differs between identical runs");
    }
}

#[test]
fn gen_data_count_zero_is_ok_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let r = flowdiff(
        &["gen-data", "--count", "0", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_ok(&r);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.trim(), "");
}

#[test]
fn train_phase2_without_phase1_fails_with_prereq() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("ckpt");
    let r = flowdiff(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--phase",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.starts_with("error[PREREQ]:"), "{err}");
}

#[test]
fn full_train_interpolate_eval_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let ckpt_dir = dir.path().join("ckpt");
    let r = flowdiff(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--phase",
            "all",
            "--out",
            ckpt_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&r);
    // Three tagged checkpoints plus a loss log with `phase step loss lr`.
    for phase in 1..=3 {
        assert!(ckpt_dir.join(format!("phase{phase}/model.fdck")).is_file());
    }
    let log = std::fs::read_to_string(ckpt_dir.join("train.log")).unwrap();
    let first = log.lines().next().unwrap();
    assert_eq!(first.split_whitespace().count(), 4, "{first}");

    // Make a pair to interpolate.
    let data_dir = dir.path().join("data");
    let r = flowdiff(
        &[
            "gen-data",
            "--spec",
            cfg.to_str().unwrap(),
            "--count",
            "1",
            "--seed",
            "3",
            "--out",
            data_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&r);
    let ckpt = ckpt_dir.join("phase3/model.fdck");
    let out_img = dir.path().join("mid.png");
    let grid = dir.path().join("grid.png");
    let r = flowdiff(
        &[
            "interpolate",
            "--i0",
            data_dir.join("000000/i0.png").to_str().unwrap(),
            "--i1",
            data_dir.join("000000/i1.png").to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            out_img.to_str().unwrap(),
            "--dump-flow",
            "--grid",
            grid.to_str().unwrap(),
            "--gt",
            data_dir.join("000000/it.png").to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&r);
    // Output resolution matches input; grid is 3 panels wide.
    let mid = flowdiff_lib_read(&out_img);
    assert_eq!(mid.shape(), &[3, 32, 32]);
    let grid_img = flowdiff_lib_read(&grid);
    assert_eq!(grid_img.shape(), &[3, 32, 96]);
    // Dumped flows are readable .flo files at input resolution.
    let f0 = flowdiff::data::read_flo(&dir.path().join("mid.f0.flo")).unwrap();
    assert_eq!((f0.height(), f0.width()), (32, 32));

    // Eval writes both report files.
    let eval_dir = dir.path().join("eval");
    let r = flowdiff(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data_dir.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&r);
    assert!(eval_dir.join("report.json").is_file());
    assert!(eval_dir.join("report.txt").is_file());
}

fn flowdiff_lib_read(path: &Path) -> flowdiff::tensor::Tensor {
    flowdiff::data::read_image(path).unwrap()
}

#[test]
fn ablate_unknown_arm_fails_with_badarm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let r = flowdiff(
        &[
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--arms",
            "full,flying_carpet",
            "--seeds",
            "1",
            "--out",
            dir.path().join("ab").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.starts_with("error[BADARM]:"), "{err}");
}

#[test]
fn out_root_env_reroots_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let r = flowdiff(
        &["gen-data", "--count", "1", "--out", "nested/demo"],
        &[("FLOWDIFF_OUT_ROOT", dir.path().to_str().unwrap())],
    );
    assert_ok(&r);
    assert!(dir.path().join("nested/demo/manifest.txt").is_file());
}
