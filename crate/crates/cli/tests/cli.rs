use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geodiff::io::{read_png_mask, read_png_rgb, write_png};
use geodiff::train::toy_scene_at;
use rand::SeedableRng;
use tempfile::TempDir;

const CHECKPOINT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/toy16.gdck");

fn geodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .args(args)
        .env("GEODIFF_CHECKPOINT", CHECKPOINT)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

struct Inputs {
    dir: TempDir,
}

impl Inputs {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scene = toy_scene_at(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1), 64, 12, 24, 16);
        write_png(dir.path().join("image.png"), &scene.image).unwrap();
        write_png(dir.path().join("mask.png"), &scene.mask).unwrap();
        std::fs::write(
            dir.path().join("short.json"),
            r#"{"steps": 4, "share_until_step": 3, "optimize_first_n": 2}"#,
        )
        .unwrap();
        Inputs { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn preview_writes_the_three_images() {
    let t = Inputs::new();
    let out = t.path("prev");
    let o = geodiff(&[
        "preview", "--image", &t.arg("image.png"), "--mask", &t.arg("mask.png"),
        "--kind", "translate2d", "--dx", "8", "--out-dir", s(&out),
    ]);
    let v = stdout_json(&o);
    assert_eq!(v["m_obj_t"], 256);
    assert_eq!(v["m_disocc"], 8 * 16);
    for f in ["warp_overlay.png", "m_obj_t.png", "m_disocc.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let moved = read_png_mask(out.join("m_obj_t.png")).unwrap();
    assert_eq!(moved.centroid(), Some((27.5, 31.5)));
}

#[test]
fn warp_error_metric_is_zero_for_identity() {
    let t = Inputs::new();
    let o = geodiff(&[
        "metric", "warp-error", "--input", &t.arg("image.png"), "--edited", &t.arg("image.png"),
        "--mask", &t.arg("mask.png"), "--kind", "identity",
    ]);
    assert_eq!(stdout_json(&o)["warp_error"], 0.0);
}

#[test]
fn invert_then_edit_with_a_config_file() {
    let t = Inputs::new();
    let traj = t.path("traj.json");
    let o = geodiff(&["invert", "--image", &t.arg("image.png"), "--steps", "4", "--out", s(&traj)]);
    assert_eq!(stdout_json(&o)["steps"], 4);

    let o = geodiff(&[
        "edit", "--image", &t.arg("image.png"), "--mask", &t.arg("mask.png"),
        "--kind", "rotate3d", "--angle", "30", "--axis", "z", "--depth", "const:0.5",
        "--config", &t.arg("short.json"), "--trajectory", s(&traj),
        "--out", &t.arg("edited.png"), "--baseline", &t.arg("baseline.png"), "--report", &t.arg("report.json"),
    ]);
    let v = stdout_json(&o);
    assert!(v["warp_error"].as_f64().unwrap().is_finite());
    assert_eq!(read_png_rgb(t.path("edited.png")).unwrap().dims(), (64, 64));
    assert!(t.path("baseline.png").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
    assert!(!report["loss_curves"].as_array().unwrap().is_empty());
}

#[test]
fn validation_failures_exit_with_two() {
    let t = Inputs::new();
    let img = t.arg("image.png");
    let mask = t.arg("mask.png");
    let cases: Vec<Vec<&str>> = vec![
        vec!["edit", "--image", "missing.png", "--mask", &mask, "--kind", "identity", "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--kind", "warp", "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--kind", "scale2d", "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--kind", "scale2d", "--scale", "0", "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--kind", "rotate3d", "--translation", "0,0,1", "--out", "x.png"],
        vec!["edit", "--image", &img, "--mask", &mask, "--kind", "identity", "--steps", "10", "--out", "x.png"],
        vec!["preview", "--image", &img, "--mask", &img, "--kind", "translate2d", "--depth", "const:x", "--out-dir", "d"],
        vec!["invert", "--image", &mask, "--steps", "0", "--out", "t.json"],
    ];
    for args in cases {
        let o = geodiff(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn empty_mask_is_a_validation_error() {
    let t = Inputs::new();
    write_png(t.path("empty.png"), &geodiff::Raster::zeros(64, 64, 1)).unwrap();
    let o = geodiff(&[
        "preview", "--image", &t.arg("image.png"), "--mask", &t.arg("empty.png"),
        "--kind", "translate2d", "--dx", "3", "--out-dir", &t.arg("d"),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unreadable_checkpoint_is_a_runtime_failure() {
    let t = Inputs::new();
    std::fs::write(t.path("bad.gdck"), "{ not json").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .args(["invert", "--image", &t.arg("image.png"), "--steps", "2", "--out", &t.arg("t.json")])
        .env("GEODIFF_CHECKPOINT", t.path("bad.gdck"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_toy_writes_a_loadable_checkpoint() {
    let t = Inputs::new();
    let ck = t.path("tiny.gdck");
    let o = geodiff(&["train-toy", "--iterations", "2", "--out", s(&ck)]);
    assert_eq!(stdout_json(&o)["iterations"], 2);
    let model = geodiff::diffnet::Denoiser::load(&ck).unwrap();
    assert_eq!(model.config().latent_height, 16);
}

#[test]
fn serve_answers_http() {
    use std::io::{BufRead, BufReader, Read, Write};
    let mut child = Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .args(["serve", "--port", "0"])
        .env("GEODIFF_CHECKPOINT", CHECKPOINT)
        .env("RUST_LOG", "info")
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(i) = line.find("listening on ") {
            break line[i + "listening on ".len()..].trim().to_owned();
        }
    };
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /jobs/00000000-0000-0000-0000-000000000000 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 404"), "{reply}");
}
