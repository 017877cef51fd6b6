use std::path::Path;
use std::process::{Command, Output};

use avatar_core::image::read_pfm;
use avatar_core::sh::EnvLightProbe;

const SCENE: &str = "frames = 10\ncameras = 2\nsamples = 100\nimage_size = 24\nfocal = 36.0\n";
const TRAIN: &str = "stage1_iters = 3\nstage2_iters = 2\nseed = 4\n\n[loss]\npairs = 4\n\n[model]\noctaves = 2\nencoder_width = 8\nencoder_layers = 2\nvisibility_width = 8\nskin_width = 8\nwindow = 3\n";

fn avatar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str) -> (std::path::PathBuf, String) {
    let cfg = dir.join("scene.toml");
    std::fs::write(&cfg, SCENE).unwrap();
    let out = dir.join(name);
    let o = avatar(&["synth", "--config", p(&cfg), "--seed", seed, "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sum = stdout(&o).lines().find(|l| l.starts_with("synth.checksum.all = ")).unwrap().to_string();
    (out, sum)
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(avatar(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(avatar(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(avatar(&["train", "--data", p(&missing), "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(avatar(&["eval", "--data", p(&missing)]).status.code(), Some(2));
    assert_eq!(avatar(&["synth", "--config", p(&missing), "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(avatar(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--stage", "3"]).status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = synth(dir.path(), "d1", "1");
    let (_, b) = synth(dir.path(), "d2", "1");
    let (_, c) = synth(dir.path(), "d3", "2");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn eval_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path(), "data", "1");
    let rep = dir.path().join("rep");
    let o = avatar(&["eval", "--data", p(&data), "--out", p(&rep)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "novel_view.psnr.mean = inf"), "{text}");
    assert!(text.lines().any(|l| l == "relight.ssim.mean = 1"), "{text}");
    assert_eq!(std::fs::read_to_string(rep.join("report.txt")).unwrap(), text);
}

#[test]
fn train_render_relight() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path(), "data", "1");
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, TRAIN).unwrap();
    let run = dir.path().join("run");

    let o = avatar(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = avatar(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg), "--stage", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("stage1.loss.000000 = "));
    let o = avatar(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg), "--stage", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("stage2.loss.final = "));
    let run_cfg = run.join("config.toml");

    let views = dir.path().join("views");
    let o = avatar(&["render", "--data", p(&data), "--config", p(&run_cfg), "--out", p(&views), "--camera", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rgb.pfm", "rgb.png", "normal.pfm", "alpha.png", "albedo.pfm"] {
        assert!(views.join(f).exists(), "{f}");
    }
    let o = avatar(&["render", "--data", p(&data), "--config", p(&run_cfg), "--out", p(&views), "--camera", "9"]);
    assert_eq!(o.status.code(), Some(2));

    let white = dir.path().join("white.pfm");
    let black = dir.path().join("black.pfm");
    EnvLightProbe::constant([1.0; 3]).save(&white).unwrap();
    EnvLightProbe::constant([0.0; 3]).save(&black).unwrap();
    let (lw, lb) = (dir.path().join("lw"), dir.path().join("lb"));
    for (probe, out) in [(&white, &lw), (&black, &lb)] {
        let o = avatar(&["relight", "--data", p(&data), "--config", p(&run_cfg), "--out", p(out), "--probe", p(probe)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let w = read_pfm(&lw.join("relit.pfm")).unwrap();
    let b = read_pfm(&lb.join("relit.pfm")).unwrap();
    assert!(w.data().iter().any(|&v| v > 0.0));
    assert!(b.data().iter().all(|&v| v == 0.0));

    let o = avatar(&["eval", "--data", p(&data), "--config", p(&run_cfg)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("relight.psnr.mean = "));
}

#[test]
fn gradcheck_passes() {
    let o = avatar(&["gradcheck", "--configs", "3", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("gradcheck.max_rel_error.")).count() >= 10);
}
