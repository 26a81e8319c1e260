//! Procedural stand-in for CIFAR-10.
//!
//! Produces 32x32 RGB images in ten shape classes (disk, square, bars,
//! stripes, ring, ...) drawn near the image center on a random background
//! with per-pixel noise. The output goes through the same CIFAR binary
//! encoder as real data, so every downstream path is exercised unchanged.

use crate::rng::SeededRng;

use super::{LabeledImageSet, CIFAR_SIDE, NUM_CLASSES};

const NOISE_STD: f64 = 18.0;

fn inside(class: u8, dy: f64, dx: f64, radius: f64, phase: f64) -> bool {
    let r2 = dy * dy + dx * dx;
    let r = radius;
    match class {
        0 => r2 <= r * r,
        1 => dy.abs() <= r * 0.8 && dx.abs() <= r * 0.8,
        2 => dy.abs() <= r && dx.abs() <= r && ((dy + r + phase) / 2.5).floor() as i64 % 2 == 0,
        3 => dy.abs() <= r && dx.abs() <= r && ((dx + r + phase) / 2.5).floor() as i64 % 2 == 0,
        4 => r2 <= r * r && ((dx + dy + 2.0 * r + phase) / 3.0).floor() as i64 % 2 == 0,
        5 => r2 <= r * r && r2 >= (0.55 * r) * (0.55 * r),
        6 => (dy.abs() <= 1.5 || dx.abs() <= 1.5) && dy.abs() <= r && dx.abs() <= r,
        7 => {
            dy.abs() <= r
                && dx.abs() <= r
                && (((dy + r) / 3.0).floor() as i64 + ((dx + r) / 3.0).floor() as i64) % 2 == 0
        }
        8 => ((dy - dx).abs() <= 1.5 || (dy + dx).abs() <= 1.5) && dy.abs() <= r && dx.abs() <= r,
        _ => dy <= r * 0.8 && dy >= -r * 0.8 && dx.abs() <= (dy + r * 0.8) * 0.6,
    }
}

fn render(class: u8, rng: &mut SeededRng) -> Vec<f32> {
    let side = CIFAR_SIDE;
    let background: [f64; 3] = [0; 3].map(|_| 40.0 + 120.0 * rng.uniform());
    let mut foreground: [f64; 3] = [0; 3].map(|_| 60.0 + 190.0 * rng.uniform());
    // Keep the shape visible against the background.
    let contrast: f64 = (0..3).map(|c| (foreground[c] - background[c]).abs()).sum();
    if contrast < 120.0 {
        for c in 0..3 {
            foreground[c] = 255.0 - background[c];
        }
    }
    let cy = side as f64 / 2.0 - 0.5 + (rng.uniform() - 0.5) * 3.0;
    let cx = side as f64 / 2.0 - 0.5 + (rng.uniform() - 0.5) * 3.0;
    let radius = 4.5 + 2.5 * rng.uniform();
    let phase = rng.uniform() * 2.0;
    let mut img = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let on = inside(class, y as f64 - cy, x as f64 - cx, radius, phase);
            for c in 0..3 {
                let base = if on { foreground[c] } else { background[c] };
                let v = (base + NOISE_STD * rng.normal()).round().clamp(0.0, 255.0);
                img[c * side * side + y * side + x] = v as f32;
            }
        }
    }
    img
}

/// Generates `per_class` images of each of the ten classes, shuffled.
pub fn synthetic_images(per_class: usize, seed: u64) -> LabeledImageSet {
    let mut rng = SeededRng::new(seed);
    let mut labels: Vec<u8> = (0..NUM_CLASSES as u8)
        .flat_map(|c| std::iter::repeat(c).take(per_class))
        .collect();
    rng.shuffle(&mut labels);
    let mut pixels = Vec::with_capacity(labels.len() * 3 * CIFAR_SIDE * CIFAR_SIDE);
    for &label in &labels {
        pixels.extend(render(label, &mut rng));
    }
    LabeledImageSet::new(CIFAR_SIDE, CIFAR_SIDE, pixels, labels)
        .expect("synthetic images are well formed")
}
