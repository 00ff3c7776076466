//! Image files in and out: decoding PNG/PPM, letterboxing to the model
//! input, mapping boxes back, and annotated SVG output.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use base64::Engine as _;
use edgedet::engine::TensorBuf;
use edgedet::postprocess::{BBox, Detection};
use image::imageops::FilterType;
use image::{ImageFormat, ImageReader, Rgb, RgbImage};

use crate::CliError;

pub const PAD_VALUE: u8 = 114;
pub const SUPPORTED: &str = "PNG, PPM (binary P6)";

/// File extensions recognised when listing image directories.
pub const EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decode a PNG or PPM file into 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode_rgb(&bytes).map_err(|msg| CliError::Data(format!("{}: {msg}", path.display())))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => {
            return Err(format!(
                "unsupported image format; supported formats: {SUPPORTED}"
            ))
        }
    }
    reader
        .decode()
        .map(|im| im.to_rgb8())
        .map_err(|e| format!("cannot decode image ({e}); supported formats: {SUPPORTED}"))
}

/// Width and height without decoding pixel data.
pub fn dimensions(path: &Path) -> Result<(u32, u32), CliError> {
    ImageReader::open(path)
        .map_err(CliError::io(path))?
        .with_guessed_format()
        .map_err(CliError::io(path))?
        .into_dimensions()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// How an image was placed on the square model canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f32,
    pub pad_x: u32,
    pub pad_y: u32,
    pub width: u32,
    pub height: u32,
}

impl Letterbox {
    pub fn new(width: u32, height: u32, size: u32) -> Self {
        let scale = (size as f32 / width as f32).min(size as f32 / height as f32);
        let (nw, nh) = Self::resized(width, height, scale, size);
        Letterbox {
            scale,
            pad_x: (size - nw) / 2,
            pad_y: (size - nh) / 2,
            width,
            height,
        }
    }

    fn resized(width: u32, height: u32, scale: f32, size: u32) -> (u32, u32) {
        let r = |v: u32| ((v as f32 * scale).round() as u32).clamp(1, size);
        (r(width), r(height))
    }

    /// Map a box from model-input pixels back to the original image.
    pub fn unmap(&self, b: &BBox) -> BBox {
        let fx = |x: f32| ((x - self.pad_x as f32) / self.scale).clamp(0.0, self.width as f32);
        let fy = |y: f32| ((y - self.pad_y as f32) / self.scale).clamp(0.0, self.height as f32);
        BBox::new(fx(b.x1), fy(b.y1), fx(b.x2), fy(b.y2))
    }
}

/// Resize with a bilinear filter, keeping aspect, pad to `size` with gray
/// 114 and scale to [0, 1] as a `(1, 3, size, size)` tensor.
pub fn letterbox(img: &RgbImage, size: usize) -> (TensorBuf, Letterbox) {
    let s = size as u32;
    let lb = Letterbox::new(img.width(), img.height(), s);
    let (nw, nh) = Letterbox::resized(img.width(), img.height(), lb.scale, s);
    let resized;
    let src = if (nw, nh) == img.dimensions() {
        img
    } else {
        resized = image::imageops::resize(img, nw, nh, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut data = vec![PAD_VALUE as f32 / 255.0; 3 * plane];
    for (x, y, px) in src.enumerate_pixels() {
        let at = (y + lb.pad_y) as usize * size + (x + lb.pad_x) as usize;
        for c in 0..3 {
            data[c * plane + at] = px[c] as f32 / 255.0;
        }
    }
    (TensorBuf::f32([1, 3, size, size], data), lb)
}

/// Convert a `(1, 3, h, w)` tensor in [0, 1] to an RGB image.
pub fn tensor_to_rgb(t: &TensorBuf) -> Result<RgbImage, CliError> {
    let [_, _, h, w] = t.shape();
    let data = t.as_f32()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| {
            (data[c * plane + at].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

const PALETTE: [&str; 6] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
];

/// Self-contained SVG: the image embedded as PNG with detection boxes and
/// labels drawn over it.
pub fn annotated_svg(img: &RgbImage, dets: &[Detection], classes: &[String]) -> String {
    let (w, h) = img.dimensions();
    let png = base64::engine::general_purpose::STANDARD.encode(encode_png(img));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<image width="{w}" height="{h}" href="data:image/png;base64,{png}"/>"#
    );
    for d in dets {
        let color = PALETTE[d.class_id % PALETTE.len()];
        let name = classes.get(d.class_id).map_or("?", String::as_str);
        let b = d.bbox;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            b.x1,
            b.y1,
            b.x2 - b.x1,
            b.y2 - b.y1
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{color}">{} {:.2}</text>"#,
            b.x1 + 2.0,
            (b.y1 - 3.0).max(11.0),
            escape(name),
            d.confidence
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
