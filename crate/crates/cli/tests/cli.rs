use std::path::Path;
use std::process::{Command, Output};

use ropcac::io::{read_ply, read_ppm, write_ply, PlyFormat, RawCloud};

fn ropcac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ropcac"))
        .args(args)
        .env("ROPCAC_THREADS", "1")
        .output()
        .expect("spawn ropcac")
}

fn ok(args: &[&str]) -> String {
    let out = ropcac(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Filled 8³ cube with a color gradient.
fn write_cube(path: &Path) {
    let mut cloud = RawCloud::default();
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                cloud.positions.push([x as f64, y as f64, z as f64]);
                cloud.colors.push([x as u8 * 32, y as u8 * 32, 255 - z as u8 * 32]);
            }
        }
    }
    write_ply(path, &cloud, PlyFormat::Ascii).unwrap();
}

#[test]
fn train_encode_decode_eval_render() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    write_cube(&p("cube.ply"));
    std::fs::write(p("codec.cfg"), "hidden=6\nlatent=8\nhyper=4\ntransformers=1\n").unwrap();

    let log = ok(&[
        "train", "--data", s(&p("cube.ply")), "--out", s(&p("m.ropw")),
        "--epochs", "2", "--size", "24", "--rig", "0:0,180", "--lr", "constant:0.001",
        "--codec-config", s(&p("codec.cfg")),
    ]);
    assert!(log.lines().count() >= 3, "{log}");
    assert!(p("m.ropw").exists());
    let manifest = std::fs::read_to_string(p("m.ropw.manifest")).unwrap();
    assert!(manifest.contains("epochs=2") && manifest.contains("codec.hidden=6"), "{manifest}");

    ok(&["encode", "--input", s(&p("cube.ply")), "--model", s(&p("m.ropw")),
        "--output", s(&p("cube.bin")), "--lambda", "800"]);
    ok(&["decode", "--geometry", s(&p("cube.ply")), "--bitstream", s(&p("cube.bin")),
        "--model", s(&p("m.ropw")), "--output", s(&p("dec.ply"))]);
    let dec = read_ply(&p("dec.ply")).unwrap();
    assert_eq!(dec.len(), 512);

    for _ in 0..2 {
        ok(&["eval", "--ref", s(&p("cube.ply")), "--recon", s(&p("dec.ply")), "--rig", "0:0,90",
            "--size", "32", "--csv", s(&p("q.csv")), "--bitstream", s(&p("cube.bin"))]);
    }
    let csv = std::fs::read_to_string(p("q.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0], "cloud,lambda,bpp,psnr_y,psnr_yuv611,ms_ssim");
    let bpp: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let bytes = std::fs::metadata(p("cube.bin")).unwrap().len() as f64;
    assert!((bpp - bytes * 8.0 / 512.0).abs() < 1e-5);

    ok(&["render", "--input", s(&p("dec.ply")), "--azimuth", "30", "--elevation", "-20",
        "--width", "40", "--height", "30", "--output", s(&p("v.ppm"))]);
    let img = read_ppm(&p("v.ppm")).unwrap();
    assert_eq!((img.width, img.height), (40, 30));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(ropcac(&["encode"]).status.code(), Some(2));
    assert_eq!(ropcac(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ply");
    let out = ropcac(&["render", "--input", s(&missing), "--output", s(&dir.path().join("x.ppm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn decode_rejects_other_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    write_cube(&p("cube.ply"));
    let mut other = read_ply(&p("cube.ply")).unwrap();
    other.positions[0][0] += 20.0;
    write_ply(&p("other.ply"), &other, PlyFormat::BinaryLittleEndian).unwrap();
    std::fs::write(p("codec.cfg"), "hidden=6\nlatent=8\nhyper=4\ntransformers=1\n").unwrap();
    ok(&["train", "--data", s(&p("cube.ply")), "--out", s(&p("m.ropw")), "--epochs", "1",
        "--size", "16", "--rig", "0:0", "--codec-config", s(&p("codec.cfg"))]);
    ok(&["encode", "--input", s(&p("cube.ply")), "--model", s(&p("m.ropw")), "--output", s(&p("c.bin"))]);
    let out = ropcac(&["decode", "--geometry", s(&p("other.ply")), "--bitstream", s(&p("c.bin")),
        "--model", s(&p("m.ropw")), "--output", s(&p("d.ply"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_single_suite_passes() {
    let out = ok(&["gradcheck", "--module", "gaussian_mass", "--seeds", "3"]);
    assert!(out.contains("gaussian_mass"), "{out}");
}
