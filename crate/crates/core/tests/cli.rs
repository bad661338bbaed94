use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 9] = [
    "resolution=16",
    "channels=4:8,8:8,16:8",
    "components=3",
    "latent_size=8",
    "dlatent_size=8",
    "mapping_layers=2",
    "batch=4",
    "fid_samples=16",
    "synthetic_size=64",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ganformer")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], needle: &str) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "stderr of {args:?} lacks `{needle}`: {err}");
}

fn train(dir: &Path, variant: &str, kimg: &str, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--variant", variant, "--kimg", kimg, "--seed", "1", "--out", out];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    args.extend(extra);
    ok(&args);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_kimg_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "simplex", "0", &[]);
    assert!(dir.path().join("ckpt-0.bin").is_file());
    assert!(dir.path().join("config.txt").is_file());
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log, "kimg,loss_g,loss_d,fid,is,precision,recall,imgs_per_sec\n");
}

#[test]
fn config_file_is_reusable() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "duplex", "0", &["--disc-attention", "off"]);
    let text = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(text.contains("variant = duplex-vanillaD"));
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&dir.path().join("config.txt")), "--out", s(&again)]);
    assert_eq!(std::fs::read(again.join("ckpt-0.bin")).unwrap(), std::fs::read(dir.path().join("ckpt-0.bin")).unwrap());
}

#[test]
fn generate_is_deterministic_and_respects_layout() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "duplex", "0.008", &["--set", "checkpoint_kimg=0.008"]);
    let ckpt = dir.path().join("ckpt-0.008.bin");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    ok(&["generate", "--checkpoint", s(&ckpt), "--seeds", "0-3,9", "--grid", "--out", s(&a)]);
    ok(&["generate", "--checkpoint", s(&ckpt), "--seeds", "0-3,9", "--grid", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let grid = image::open(&a).unwrap();
    assert_eq!((grid.width(), grid.height()), (3 * 16, 2 * 16));

    // without --out, one file per seed lands in samples/ beside the checkpoint
    let listed = ok(&["generate", "--checkpoint", s(&ckpt), "--seeds", "4,5"]);
    assert_eq!(listed.lines().count(), 2);
    let samples: PathBuf = dir.path().join("samples");
    assert!(samples.join("ckpt-0.008-seed4.png").is_file());
    assert!(samples.join("ckpt-0.008-seed5.png").is_file());

    let strip = dir.path().join("strip.png");
    ok(&["interpolate", "--checkpoint", s(&ckpt), "--seed0", "1", "--seed1", "2", "--steps", "5", "--out", s(&strip)]);
    let strip = image::open(&strip).unwrap();
    assert_eq!((strip.width(), strip.height()), (5 * 16, 16));
}

#[test]
fn eval_and_curve_report_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "stylegan2", "0.016", &["--set", "checkpoint_kimg=0.008", "--set", "fid_every=2"]);
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].split(',').nth(3).unwrap().is_empty());
    assert!(!rows[1].split(',').nth(3).unwrap().is_empty());

    let out = ok(&["eval", "--checkpoint", s(&dir.path().join("ckpt-0.016.bin")), "--baseline-fid", "10"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("kimg,fid,is,precision,recall,fid_improvement"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "0.016");
    assert!(row[1].parse::<f64>().unwrap() >= 0.0);

    ok(&["curve", "--run", s(dir.path())]);
    let curve = std::fs::read_to_string(dir.path().join("fid_curve.csv")).unwrap();
    let kimgs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kimgs, ["0", "0.008", "0.016"]);
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    fails(&["train", "--out", out, "--bogus"], "--bogus");
    fails(&["train", "--out", out, "--variant", "stylegan2", "--disc-attention", "on"], "no attention");
    fails(&["train", "--out", out, "--res", "48"], "resolution");
    fails(&["train", "--out", out, "--set", "nonsense=1"], "unknown key");
    fails(&["eval", "--checkpoint", "/nonexistent/ckpt-2.bin"], "ckpt-2.bin");
    fails(&["generate", "--checkpoint", "/nonexistent/ckpt-2.bin", "--seeds", "1"], "ckpt-2.bin");
    fails(&["curve", "--run", out], "no checkpoints");
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    fails(&["generate", "--checkpoint", s(&junk), "--seeds", "1"], "junk.bin");
}

#[test]
fn png_directory_is_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for i in 0..6u8 {
        let img = image::RgbImage::from_fn(40, 40, |x, y| image::Rgb([x as u8 * 6, y as u8 * 6, i * 40]));
        img.save(data.join(format!("{i}.png"))).unwrap();
    }
    std::fs::write(data.join("broken.png"), b"garbage").unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--variant", "simplex", "--kimg", "0.008", "--data", s(&data), "--out", s(&out)];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    args.extend(["--set", "checkpoint_kimg=0.008"]);
    let res = run(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("broken.png"));
    assert!(out.join("ckpt-0.008.bin").is_file());
}
