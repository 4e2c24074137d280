use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use refill_core::io;
use refill_core::raster::{HoleMask, Image};
use refill_harness::{synth_pair, Regime, SynthRegime, Texture};
use tempfile::TempDir;

fn refill() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refill"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn refill");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Pair {
    target: PathBuf,
    source: PathBuf,
    mask: PathBuf,
}

fn write_pair(dir: &Path, target: &Image, source: &Image, mask: &HoleMask) -> Pair {
    let p = Pair {
        target: dir.join("target.png"),
        source: dir.join("source.png"),
        mask: dir.join("mask.png"),
    };
    io::save_image(target, &p.target).unwrap();
    io::save_image(source, &p.source).unwrap();
    io::save_mask(mask, &p.mask).unwrap();
    p
}

fn textured_pair(dir: &Path) -> Pair {
    let gt = Texture::new(5, 128.0, 96.0).render(128, 96);
    let (target, source, _) = synth_pair(&gt, &SynthRegime::new(Regime::Neither, 5)).unwrap();
    let mask = HoleMask::rect(128, 96, 48, 30, 80, 62);
    write_pair(dir, &target, &source, &mask)
}

fn inpaint(p: &Pair, out: &Path) -> Command {
    let mut cmd = refill();
    cmd.arg("inpaint")
        .arg("--target")
        .arg(&p.target)
        .arg("--mask")
        .arg(&p.mask)
        .arg("--source")
        .arg(&p.source)
        .arg("--out")
        .arg(out);
    cmd
}

fn bytes_of(path: &Path) -> Vec<u8> {
    io::encode_raw(&io::load_image(path, true).unwrap())
}

#[test]
fn inpaint_keeps_known_pixels() {
    let dir = TempDir::new().unwrap();
    let p = textured_pair(dir.path());
    let out = dir.path().join("out.png");
    let o = run(&mut inpaint(&p, &out));
    assert_eq!(o.status.code(), Some(0));
    let result = io::load_image(&out, true).unwrap();
    let target = io::load_image(&p.target, true).unwrap();
    let mask = io::load_mask(&p.mask).unwrap();
    assert_eq!(result.dims(), target.dims());
    for y in 0..target.height() {
        for x in 0..target.width() {
            if !mask.is_hole(x, y) {
                assert_eq!(result.pixel(x, y), target.pixel(x, y), "({x}, {y})");
            }
        }
    }
}

#[test]
fn mask_size_mismatch_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let p = textured_pair(dir.path());
    io::save_mask(&HoleMask::rect(64, 48, 10, 10, 20, 20), &p.mask).unwrap();
    let out = dir.path().join("out.png");
    let o = run(&mut inpaint(&p, &out));
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let p = textured_pair(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"softmax_temperature": -1}"#).unwrap();
    let out = dir.path().join("out.png");
    let o = run(inpaint(&p, &out).arg("--config").arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    let o = run(inpaint(&p, &out).arg("--config").arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn disabling_every_proposal_equals_fill_only() {
    let dir = TempDir::new().unwrap();
    let p = textured_pair(dir.path());
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    assert_eq!(run(inpaint(&p, &a).args(["--disable", "1,2,3,4,5,6"])).status.code(), Some(0));
    assert_eq!(run(inpaint(&p, &b).arg("--fill-only")).status.code(), Some(0));
    assert_eq!(bytes_of(&a), bytes_of(&b));
}

#[test]
fn textureless_pair_degrades_to_fill() {
    let dir = TempDir::new().unwrap();
    let flat = Image::filled(96, 72, 3, 0.4);
    let p = write_pair(dir.path(), &flat, &flat, &HoleMask::rect(96, 72, 30, 20, 60, 50));
    let out = dir.path().join("out.png");
    let o = run(&mut inpaint(&p, &out));
    assert_eq!(o.status.code(), Some(3));
    let result = io::load_image(&out, true).unwrap();
    assert!(result.data().iter().all(|&v| (v - 0.4).abs() < 2.0 / 255.0));
}

#[test]
fn dump_writes_intermediates() {
    let dir = TempDir::new().unwrap();
    let p = textured_pair(dir.path());
    let out = dir.path().join("out.png");
    let dump = dir.path().join("dump");
    assert_eq!(run(inpaint(&p, &out).arg("--dump").arg(&dump)).status.code(), Some(0));
    for name in ["keypoints_target.json", "matches.json", "homographies.json", "fill.png", "result.png", "weights.json"] {
        assert!(dump.join(name).is_file(), "{name}");
    }
    assert!(dump.join("proposal_6.png").is_file());
    assert_eq!(bytes_of(&dump.join("result.png")), bytes_of(&out));
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    for run_id in ["a", "b"] {
        let o = run(refill()
            .args(["synth", "--regime", "CS", "--seed", "7", "--width", "96", "--height", "72", "--out"])
            .arg(dir.path().join(run_id)));
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["target.png", "source.png", "mask.png", "gt.png", "truth.json"] {
        let a = std::fs::read(dir.path().join("a/CS_7").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b/CS_7").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn eval_reports_the_two_plane_scene() {
    let dir = TempDir::new().unwrap();
    let pairs = dir.path().join("pairs");
    assert_eq!(
        run(refill().args(["synth", "--two-plane", "--out"]).arg(&pairs)).status.code(),
        Some(0)
    );
    let report = dir.path().join("report");
    let o = run(refill().arg("eval").arg("--pairs").arg(&pairs).arg("--out").arg(&report));
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pair_id,psnr_hole,ssim_full,hole_fraction,n_proposals_used"));
    let row = lines.next().expect("one report row");
    assert!(row.starts_with("two_plane_11,"), "{row}");
    assert!(report.join("report.json").is_file());
}

#[test]
fn eval_on_missing_directory_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let o = run(refill()
        .arg("eval")
        .arg("--pairs")
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("r")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn serve_answers_health() {
    let dir = TempDir::new().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = refill()
        .args(["serve", "--port", &port.to_string(), "--store"])
        .arg(dir.path().join("store"))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let response = loop {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(mut s) => {
                s.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
                let mut buf = String::new();
                s.read_to_string(&mut buf).unwrap();
                break buf;
            }
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                child.kill().ok();
                panic!("server never came up: {e}");
            }
        }
    };
    child.kill().ok();
    child.wait().ok();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.ends_with("ok"), "{response}");
}
