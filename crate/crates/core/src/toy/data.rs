//! Synthetic colour × shape images: 2 channels of 6×6 pixels in `[-1, 1]`.
//!
//! The background is -1 everywhere. A concept lights its shape mask in the
//! channels of its colour (red → channel 0, blue → channel 1, white → both).

use ndarray::Array2;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::vocab::{COLORS, SHAPES};

pub const CHANNELS: usize = 2;
pub const SIDE: usize = 6;
pub const SAMPLE_WIDTH: usize = CHANNELS * SIDE * SIDE;

/// Number of classes: 12 concepts plus background.
pub const NUM_CLASSES: usize = COLORS.len() * SHAPES.len() + 1;
pub const BACKGROUND: usize = NUM_CLASSES - 1;

const MASKS: [[&str; SIDE]; 4] = [
    ["######", "#....#", "#....#", "#....#", "#....#", "######"],
    ["..##..", "..##..", "######", "######", "..##..", "..##.."],
    ["......", "..##..", ".#..#.", ".#..#.", "..##..", "......"],
    ["#.....", "##....", "###...", "####..", "#####.", "######"],
];

const COLOR_CHANNELS: [[f64; CHANNELS]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

/// Label of a prompt-free concept string, `BACKGROUND` for the empty string.
pub fn class_of(concept: &str) -> Option<usize> {
    let concept = concept.trim().to_lowercase();
    if concept.is_empty() {
        return Some(BACKGROUND);
    }
    let mut words = concept.split_whitespace();
    let (c, s) = (words.next()?, words.next()?);
    if words.next().is_some() {
        return None;
    }
    let ci = COLORS.iter().position(|x| *x == c)?;
    let si = SHAPES.iter().position(|x| *x == s)?;
    Some(ci * SHAPES.len() + si)
}

/// Inverse of [`class_of`].
pub fn class_name(class: usize) -> String {
    if class == BACKGROUND {
        return String::new();
    }
    format!("{} {}", COLORS[class / SHAPES.len()], SHAPES[class % SHAPES.len()])
}

/// Per-sample variation of the data distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataStyle {
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub pixel_noise: f64,
}

impl Default for DataStyle {
    fn default() -> Self {
        DataStyle { amp_lo: 0.85, amp_hi: 1.0, pixel_noise: 0.03 }
    }
}

/// Noise-free mean image of a class.
pub fn prototype(class: usize, amplitude: f64) -> Vec<f64> {
    let mut img = vec![-1.0; SAMPLE_WIDTH];
    if class == BACKGROUND {
        return img;
    }
    let mask = &MASKS[class % SHAPES.len()];
    let color = COLOR_CHANNELS[class / SHAPES.len()];
    for (ch, &on) in color.iter().enumerate() {
        for (y, row) in mask.iter().enumerate() {
            for (x, b) in row.bytes().enumerate() {
                if b == b'#' {
                    img[ch * SIDE * SIDE + y * SIDE + x] = -1.0 + 2.0 * amplitude * on;
                }
            }
        }
    }
    img
}

/// One clean sample per entry of `classes`.
pub fn sample_images<R: Rng + ?Sized>(classes: &[usize], style: &DataStyle, rng: &mut R) -> Array2<f64> {
    let noise = Normal::new(0.0, style.pixel_noise).expect("valid std");
    let mut out = Array2::zeros((classes.len(), SAMPLE_WIDTH));
    for (i, &c) in classes.iter().enumerate() {
        let amp = rng.random_range(style.amp_lo..=style.amp_hi);
        let proto = prototype(c, amp);
        for (j, p) in proto.into_iter().enumerate() {
            out[[i, j]] = (p + rng.sample(noise)).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Renders a sample as a binary PPM (channel 0 → red, channel 1 → blue).
pub fn to_ppm(sample: &[f64], scale: usize) -> Vec<u8> {
    let side = SIDE * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    let to_byte = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    for y in 0..side {
        for x in 0..side {
            let p = (y / scale) * SIDE + x / scale;
            let r = to_byte(sample[p]);
            let b = to_byte(sample[SIDE * SIDE + p]);
            out.extend_from_slice(&[r, r.min(b), b]);
        }
    }
    out
}
