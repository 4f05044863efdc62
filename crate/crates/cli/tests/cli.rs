//! Command-line behavior: exit codes, reproducibility, file handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eadnet::io::{read_image, write_image, Checkpoint};
use eadnet::models::{DeblurNet, DeblurNetConfig, EdgeNet, EdgeNetVariant};
use eadnet::scene::random_scene;

fn eadnet_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eadnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("EADNET_THREADS")
        .output()
        .expect("spawn eadnet")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = eadnet_in(dir, args);
    assert!(
        out.status.success(),
        "eadnet {args:?} failed: {}",
        stderr(&out)
    );
    out
}

/// Every file under `root`, relative path → bytes.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn params_prints_the_bare_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["params", "--model", "edgenet-reduced1"]);
    assert_eq!(stdout(&out).trim(), "38785");
    let out = ok(dir.path(), &["params", "--model", "deblurnet"]);
    assert_eq!(stdout(&out).trim(), "8115980");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["synth", "--output", "x", "--count", "1", "--bogus"][..],
        &["params", "--model", "nonsense"],
        &["frobnicate"],
        &["synth", "--output", "x"],
        &["eval", "--pred", "a"],
    ] {
        assert_eq!(
            eadnet_in(dir.path(), args).status.code(),
            Some(1),
            "{args:?}"
        );
    }
    let out = Command::new(env!("CARGO_BIN_EXE_eadnet"))
        .args(["params", "--model", "deblurnet"])
        .env("EADNET_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = eadnet_in(dir.path(), &["train-deblur", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("--side-layer"));
}

#[test]
fn synth_with_zero_count_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--output", "s", "--count", "0"]);
    assert_eq!(
        fs::read_to_string(dir.path().join("s/manifest.tsv")).unwrap(),
        ""
    );
}

#[test]
fn synth_is_byte_reproducible_from_its_resolved_configuration() {
    let first = tempfile::tempdir().unwrap();
    let out = ok(
        first.path(),
        &[
            "synth",
            "--output",
            "s",
            "--count",
            "3",
            "--seed",
            "11",
            "--scene-size",
            "48",
        ],
    );

    // Replay the printed block, with the binary path substituted, in a fresh directory.
    let block: Vec<String> = stderr(&out)
        .lines()
        .skip_while(|l| !l.starts_with("resolved configuration:"))
        .skip(1)
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    assert!(block[0].starts_with("eadnet synth"), "{block:?}");
    assert!(
        block.iter().any(|l| l.starts_with("--blur mixed")),
        "defaults are spelled out: {block:?}"
    );
    let script = block
        .join("\n")
        .replacen("eadnet", env!("CARGO_BIN_EXE_eadnet"), 1);
    let second = tempfile::tempdir().unwrap();
    let replay = Command::new("sh")
        .arg("-c")
        .arg(&script)
        .current_dir(second.path())
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(replay.status.success(), "{}", stderr(&replay));
    assert_eq!(
        tree(&first.path().join("s")),
        tree(&second.path().join("s"))
    );

    let other = tempfile::tempdir().unwrap();
    ok(
        other.path(),
        &[
            "synth",
            "--output",
            "s",
            "--count",
            "3",
            "--seed",
            "12",
            "--scene-size",
            "48",
        ],
    );
    assert_ne!(tree(&first.path().join("s")), tree(&other.path().join("s")));
}

#[test]
fn gaussian_synthesis_is_recorded_in_the_kernel_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--output",
            "g",
            "--count",
            "4",
            "--blur",
            "gaussian",
            "--scene-size",
            "48",
        ],
    );
    let sidecar = fs::read_to_string(dir.path().join("g/kernels.tsv")).unwrap();
    let rows: Vec<&str> = sidecar.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[2], "gaussian", "{row}");
        let sigma: f64 = cols[4].strip_prefix("sigma=").unwrap().parse().unwrap();
        assert!((1.0..=3.0).contains(&sigma), "{row}");
    }
    let manifest = fs::read_to_string(dir.path().join("g/manifest.tsv")).unwrap();
    for row in manifest.lines() {
        for file in row.split('\t') {
            assert!(dir.path().join("g").join(file).is_file(), "{file}");
        }
    }
}

#[test]
fn synth_lists_unreadable_inputs_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    write_image(inputs.join("good.ppm"), &random_scene(40, 40, 1)).unwrap();
    fs::write(inputs.join("broken.ppm"), b"P6\n4 4\n255\nshort").unwrap();
    fs::write(inputs.join("junk.pgm"), b"not an image").unwrap();
    let out = eadnet_in(dir.path(), &["synth", "--input", "in", "--output", "s"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("broken.ppm") && err.contains("junk.pgm"),
        "{err}"
    );
    assert!(!err.contains("unreadable input: in/good.ppm"), "{err}");
}

#[test]
fn eval_of_identical_directories_is_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--output",
            "s",
            "--count",
            "2",
            "--scene-size",
            "48",
        ],
    );
    let out = ok(
        dir.path(),
        &[
            "eval",
            "--pred",
            "s/clear",
            "--truth",
            "s/clear",
            "--metrics",
            "psnr,ssim",
        ],
    );
    let text = stdout(&out);
    let mean = text.lines().find(|l| l.starts_with("MEAN")).unwrap();
    assert!(mean.contains("psnr=inf"), "{mean}");
    assert!(mean.contains("ssim=1.0"), "{mean}");
}

#[test]
fn edges_writes_binary_maps_of_the_input_size() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("a.ppm"), &random_scene(37, 29, 4)).unwrap();
    ok(
        dir.path(),
        &["edges", "--input", "a.ppm", "--output", "a.pgm"],
    );
    let e = read_image(dir.path().join("a.pgm")).unwrap();
    assert_eq!(e.shape(), &[1, 37, 29]);
    assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

fn tiny_checkpoints(dir: &Path) {
    let cfg = DeblurNetConfig {
        base_channels: 8,
        down_channels: [8, 16],
        n_res_blocks: 1,
        expand_ratio: 2,
        lowrank_channels: 8,
        head_kernel: 5,
        ..DeblurNetConfig::default()
    };
    let deblur = DeblurNet::<f32>::build(cfg, 3).unwrap();
    Checkpoint::from_params(deblur.params())
        .save(dir.join("deblur.ckpt"))
        .unwrap();
    let edge = EdgeNet::<f32>::build(EdgeNetVariant::Full, 4).unwrap();
    Checkpoint::from_params(edge.params())
        .save(dir.join("edge.ckpt"))
        .unwrap();
}

#[test]
fn deblur_keeps_dimensions_and_rejects_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoints(dir.path());
    fs::create_dir(dir.path().join("in")).unwrap();
    write_image(dir.path().join("in/odd.ppm"), &random_scene(37, 29, 5)).unwrap();
    let gray = random_scene(20, 33, 6).map(|v| v * 0.5);
    let gray =
        eadnet::tensor::Tensor::new(vec![1, 20, 33], gray.data()[..20 * 33].to_vec()).unwrap();
    write_image(dir.path().join("in/gray.pgm"), &gray).unwrap();
    let model = [
        "--deblur-checkpoint",
        "deblur.ckpt",
        "--edge-checkpoint",
        "edge.ckpt",
    ];

    let mut args = vec!["deblur", "--input", "in", "--output", "out"];
    args.extend(model);
    ok(dir.path(), &args);
    assert_eq!(
        read_image(dir.path().join("out/odd.ppm")).unwrap().shape(),
        &[3, 37, 29]
    );
    assert_eq!(
        read_image(dir.path().join("out/gray.ppm")).unwrap().shape(),
        &[3, 20, 33]
    );

    for side in ["3", "5", "full"] {
        let mut args = vec![
            "deblur",
            "--input",
            "in/odd.ppm",
            "--output",
            "one.ppm",
            "--side-layer",
            side,
        ];
        args.extend(model);
        ok(dir.path(), &args);
        assert_eq!(
            read_image(dir.path().join("one.ppm")).unwrap().shape(),
            &[3, 37, 29]
        );
    }

    fs::write(dir.path().join("bad.ckpt"), b"XADN garbage").unwrap();
    let out = eadnet_in(
        dir.path(),
        &[
            "deblur",
            "--input",
            "in",
            "--output",
            "o2",
            "--deblur-checkpoint",
            "bad.ckpt",
            "--edge-checkpoint",
            "edge.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = eadnet_in(
        dir.path(),
        &[
            "deblur",
            "--input",
            "in",
            "--output",
            "o3",
            "--deblur-checkpoint",
            "edge.ckpt",
            "--edge-checkpoint",
            "edge.ckpt",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "wrong model kind: {}",
        stderr(&out)
    );
}

#[test]
fn training_commands_write_checkpoints_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--output",
            "data",
            "--count",
            "2",
            "--scene-size",
            "64",
            "--seed",
            "3",
        ],
    );
    ok(
        d,
        &[
            "train-edge",
            "--manifest",
            "data/manifest.tsv",
            "--out-dir",
            "edge",
            "--epochs",
            "1",
            "--batch",
            "2",
            "--crop",
            "64",
        ],
    );
    for file in ["edgenet.ckpt", "discriminator.ckpt", "edge_history.tsv"] {
        assert!(d.join("edge").join(file).is_file(), "{file}");
    }
    let deblur = |out: &str, down: &str| {
        eadnet_in(
            d,
            &[
                "train-deblur",
                "--manifest",
                "data/manifest.tsv",
                "--edge-checkpoint",
                "edge/edgenet.ckpt",
                "--out-dir",
                out,
                "--epochs",
                "1",
                "--batch",
                "2",
                "--crop",
                "32",
                "--base-channels",
                "8",
                "--down-channels",
                down,
                "--res-blocks",
                "1",
                "--expand-ratio",
                "2",
                "--lowrank-channels",
                "8",
                "--head-kernel",
                "5",
                "--side-layer",
                "3",
            ],
        )
    };
    let out = deblur("deblur", "8,16");
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("--down-channels 8,16"),
        "{}",
        stderr(&out)
    );
    assert!(d.join("deblur/deblurnet.ckpt").is_file());
    let history = fs::read_to_string(d.join("deblur/deblur_history.tsv")).unwrap();
    assert!(history.lines().count() >= 1, "{history}");

    assert_eq!(deblur("bad", "8").status.code(), Some(1));
    assert_eq!(deblur("bad", "8,16,32").status.code(), Some(1));
}
