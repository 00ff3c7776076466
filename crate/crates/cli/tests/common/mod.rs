#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use edgedet_cli::run;
use image::{Rgb, RgbImage};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["edgedet"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
    o.stdout
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Float and int8 192-input models built once per test binary.
pub struct Models {
    _dir: tempfile::TempDir,
    pub float: PathBuf,
    pub int8: PathBuf,
    pub scenes: PathBuf,
}

pub fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let float = dir.path().join("float.edm");
        let int8 = dir.path().join("int8.edm");
        let scenes = dir.path().join("scenes");
        ok(&["build", "--random-weights", "7", "--out", s(&float)]);
        ok(&[
            "quantize",
            "--model",
            s(&float),
            "--synthetic",
            "8",
            "--out",
            s(&int8),
        ]);
        ok(&[
            "synth",
            "--out",
            s(&scenes),
            "--count",
            "3",
            "--size",
            "160",
            "--seed",
            "99",
        ]);
        Models {
            _dir: dir,
            float,
            int8,
            scenes,
        }
    })
}

pub fn write_png(path: &Path, img: &RgbImage) {
    img.save_with_format(path, image::ImageFormat::Png).unwrap();
}

pub fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([114, 114, 114]))
}
