//! Seeded synthetic camera frames.
//!
//! A smooth two-colour gradient background with a handful of flat
//! rectangles and ellipses on top, plus mild sensor noise. Values lie in
//! [0, 1], the range a letterboxed and normalized image has.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TensorBuf;

const NOISE: f32 = 0.03;

/// One `(1, 3, size, size)` frame drawn from `seed`.
pub fn synthetic_scene(seed: u64, size: usize) -> TensorBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let from: [f32; 3] = rng.gen();
    let to: [f32; 3] = rng.gen();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let t = (x + y) as f32 / (2 * size).max(1) as f32;
                data[c * plane + y * size + x] = from[c] * (1.0 - t) + to[c] * t;
            }
        }
    }
    let max_radius = (size / 3).max(5);
    for _ in 0..rng.gen_range(3..9) {
        let cx = rng.gen_range(0..size.max(1)) as f32;
        let cy = rng.gen_range(0..size.max(1)) as f32;
        let rx = rng.gen_range(4..max_radius) as f32;
        let ry = rng.gen_range(4..max_radius) as f32;
        let colour: [f32; 3] = rng.gen();
        let ellipse = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        data[c * plane + y * size + x] = colour[c];
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0);
    }
    TensorBuf::f32([1, 3, size, size], data)
}
