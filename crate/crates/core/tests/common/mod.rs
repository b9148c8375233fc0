//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use pie_core::data::{encode_idx_images, encode_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 24;
    (0..=n)
        .map(|i| {
            let t = (from + (to - from) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Strokes of each digit in a unit box, y pointing down.
fn glyph(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.3, 0.45, 0.0, 360.0)],
        1 => vec![vec![(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)]],
        2 => {
            let mut s = arc(0.5, 0.3, 0.3, 0.25, 180.0, 360.0);
            s.extend(arc(0.5, 0.3, 0.3, 0.25, 0.0, 60.0));
            s.extend([(0.2, 0.95), (0.85, 0.95)]);
            vec![s]
        }
        3 => vec![arc(0.5, 0.28, 0.28, 0.23, 200.0, 450.0), arc(0.5, 0.72, 0.3, 0.23, 270.0, 520.0)],
        4 => vec![vec![(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.9, 0.65)]],
        5 => {
            let mut s = vec![(0.8, 0.05), (0.25, 0.05), (0.22, 0.45)];
            s.extend(arc(0.5, 0.67, 0.3, 0.28, 220.0, 500.0));
            vec![s]
        }
        6 => vec![arc(0.5, 0.7, 0.27, 0.25, 0.0, 360.0), arc(0.75, 0.6, 0.52, 0.55, 180.0, 250.0)],
        7 => vec![vec![(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]],
        8 => vec![arc(0.5, 0.28, 0.24, 0.22, 0.0, 360.0), arc(0.5, 0.72, 0.3, 0.23, 0.0, 360.0)],
        9 => vec![arc(0.5, 0.3, 0.27, 0.25, 0.0, 360.0), arc(0.28, 0.4, 0.5, 0.55, 0.0, 80.0)],
        _ => unreachable!(),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One 28×28 digit with random slant, scale, offset and stroke width, as
/// bytes with a dark background.
pub fn render_digit<R: Rng>(digit: u8, rng: &mut R) -> Vec<u8> {
    let angle = rng.gen_range(-0.25..0.25);
    let shear = rng.gen_range(-0.3..0.3);
    let sx = rng.gen_range(14.0..19.0);
    let sy = rng.gen_range(17.0..21.0);
    let cx = 14.0 + rng.gen_range(-1.5..1.5);
    let cy = 14.0 + rng.gen_range(-1.5..1.5);
    let width = rng.gen_range(1.0..1.9);
    let (sin, cos) = (angle as f64).sin_cos();
    let map = |(x, y): (f64, f64)| {
        let (x, y) = ((x - 0.5) * sx, (y - 0.5) * sy);
        let x = x + shear * y;
        (cx + cos * x - sin * y, cy + sin * x + cos * y)
    };
    let strokes: Vec<Stroke> = glyph(digit).into_iter().map(|s| s.into_iter().map(map).collect()).collect();
    let mut out = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = (width + 0.5 - d).clamp(0.0, 1.0);
            out[r * SIDE + c] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// `n` digits cycling through 0–9, returned as (pixels, labels).
pub fn digit_set(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = (i % 10) as u8;
        pixels.extend(render_digit(d, &mut rng));
        labels.push(d);
    }
    (pixels, labels)
}

/// Writes images and labels as IDX files and returns their paths.
pub fn write_digit_idx(dir: &Path, n: usize, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let (pixels, labels) = digit_set(n, seed);
    let img = dir.join("digits-images.idx");
    let lab = dir.join("digits-labels.idx");
    std::fs::write(&img, encode_idx_images(n, SIDE, SIDE, &pixels)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&labels)).unwrap();
    (img, lab)
}
