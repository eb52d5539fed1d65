mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{seeded_image, tiny_config};
use dapled::io::{load_image, quantize, read_array, save_image};
use dapled::train::Trainer;

fn dapled(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapled")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_subcommands_and_unknown_flags_are_usage_errors() {
    let o = dapled(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["synth", "train", "restore", "heatmap", "eval", "ablate", "scenes"] {
        assert!(text.contains(c), "{c}");
    }
    assert_eq!(code(&dapled(&["restore", "--no-such-flag"])), 1);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = dapled(&["--seed", "7", "synth", "--count", "4", "--size", "32", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 9);
    assert_eq!(ta, tb);
}

#[test]
fn restore_keeps_size_and_is_identity_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.safetensors");
    Trainer::new(tiny_config(1)).unwrap().save_checkpoint(&ckpt).unwrap();
    let input = dir.path().join("odd.png");
    save_image(&quantize(&seeded_image(2, 75, 100)), &input).unwrap();
    let out = dir.path().join("out");
    let o = dapled(&["restore", "--ckpt", s(&ckpt), "--input", s(&input), "--out", s(&out), "--grid"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (src, got) = (load_image(&input).unwrap(), load_image(&out.join("odd.png")).unwrap());
    assert_eq!((got.height(), got.width()), (75, 100));
    assert_eq!(got.data(), src.data());
    assert!(out.join("odd_grid.png").is_file());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.png");
    save_image(&seeded_image(3, 16, 16), &input).unwrap();
    let o = dapled(&[
        "restore",
        "--ckpt",
        s(&dir.path().join("none.safetensors")),
        "--input",
        s(&input),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let out = dir.path().join("run");
    let o = dapled(&["--config", s(&cfg), "train", "--out", s(&out)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn eval_and_heatmap_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let img = quantize(&seeded_image(4, 40, 48));
    save_image(&img, &pred.join("a.png")).unwrap();
    save_image(&img, &gt.join("a.png")).unwrap();
    let report = dir.path().join("report.txt");
    let o = dapled(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&report).unwrap().contains("a.png"));

    let (hm, raw) = (dir.path().join("hm"), dir.path().join("raw"));
    let o = dapled(&[
        "heatmap",
        "--input",
        s(&gt),
        "--out",
        s(&hm),
        "--raw-out",
        s(&raw),
        "--prompt",
        "dark",
        "--prompt",
        "blurry",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(hm.join("a_heatmap_p0.png").is_file() && hm.join("a_heatmap_p1.png").is_file());
    let (dims, values) = read_array(&raw.join("a.heat")).unwrap();
    assert_eq!(dims, vec![16, 16, 2]);
    assert!(values.iter().all(|v| (-1.0..=1.0).contains(v)));
}
