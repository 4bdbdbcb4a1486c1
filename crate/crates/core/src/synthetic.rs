//! Smooth seeded phantom images standing in for clean medical scans.
//!
//! Each phantom is a tinted background plus a few soft elliptical blobs and
//! a faint low-frequency ripple, kept within `[0.05, 0.85]` so white and
//! black markers both stay visible.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dataset::Split;
use crate::{seed, Error, Image, Result};

pub fn phantom(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = seed::rng(&[seed, 0xF4A]);
    let base: f32 = rng.gen_range(0.25..0.45);
    let tint: [f32; 3] = [
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.8..1.0),
        rng.gen_range(0.85..1.05),
    ];
    let scale = height.min(width) as f32;
    let blobs: Vec<_> = (0..rng.gen_range(3..=5))
        .map(|_| {
            (
                rng.gen_range(0.0..height as f32),
                rng.gen_range(0.0..width as f32),
                rng.gen_range(0.1..0.3) * scale,
                rng.gen_range(0.1..0.3) * scale,
                rng.gen_range(-0.25f32..0.3),
            )
        })
        .collect();
    let (fy, fx, phase): (f32, f32, f32) = (
        rng.gen_range(1.0..3.0),
        rng.gen_range(1.0..3.0),
        rng.gen_range(0.0..std::f32::consts::TAU),
    );
    let mut img = Image::filled(height, width, 3, 0.0);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f32, c as f32);
            let mut v = base;
            for &(cy, cx, ry, rx, amp) in &blobs {
                let d = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
                v += amp * (-0.5 * d).exp();
            }
            v += 0.04
                * (std::f32::consts::TAU * (fy * y / height as f32 + fx * x / width as f32)
                    + phase)
                    .sin();
            for (ch, t) in tint.iter().enumerate() {
                img.set(r, c, ch, (v * t).clamp(0.05, 0.85));
            }
        }
    }
    img
}

/// Writes `count` phantoms as `<root>/<split>/clean/phantom_NNNN.png`.
pub fn write_phantom_split(
    root: &Path,
    split: Split,
    count: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<()> {
    let dir = root.join(split.name()).join("clean");
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for i in 0..count {
        let img = phantom(
            seed::derive(&[seed, split as u64, i as u64]),
            size.0,
            size.1,
        );
        img.save_png(&dir.join(format!("phantom_{i:04}.png")))?;
    }
    Ok(())
}
