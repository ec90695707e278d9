//! Seeded synthetic image generators.
//!
//! Image `i` of a dataset draws from its own stream `(seed, SYNTH, i)`, so
//! datasets of different sizes share their common prefix.
//!
//! - `GaussianBlobs`: one to three isotropic blobs on a black background.
//!   Each blob has a center uniform over the image, a radius uniform in
//!   `[0.1, 0.3] · min(H, W)` and a peak colour uniform in `0..=255` per
//!   channel. Pixel = `round(min(255, Σ peak · exp(-r² / 2σ²)))`.
//! - `Stripes`: horizontal or vertical bands with a period uniform in
//!   `2..=max(2, extent / 2)`, a random phase and two random colours.
//! - `ConstantPlusNoise`: pixel = `(constant + u) mod 256` with `u` uniform
//!   over `0..amplitude`. Amplitude 256 makes every subpixel i.i.d. uniform,
//!   whose entropy is exactly 8 bits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{JetError, Result};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthKind {
    GaussianBlobs,
    Stripes,
    ConstantPlusNoise { constant: u8, amplitude: u16 },
}

impl SynthKind {
    /// I.i.d. uniform subpixels.
    pub const UNIFORM: SynthKind = SynthKind::ConstantPlusNoise {
        constant: 0,
        amplitude: 256,
    };
}

pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    (h, w, c): (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(JetError::config(format!(
            "synthetic dataset needs positive sizes, got {n} x {h}x{w}x{c}"
        )));
    }
    if let SynthKind::ConstantPlusNoise { amplitude, .. } = kind {
        if amplitude > 256 {
            return Err(JetError::config(format!(
                "noise amplitude {amplitude} exceeds 256"
            )));
        }
    }
    let mut pixels = Vec::with_capacity(n * h * w * c);
    for i in 0..n {
        let mut rng = rng_for(seed, &[stream::SYNTH, i as u64]);
        match kind {
            SynthKind::GaussianBlobs => blobs(&mut rng, h, w, c, &mut pixels),
            SynthKind::Stripes => stripes(&mut rng, h, w, c, &mut pixels),
            SynthKind::ConstantPlusNoise {
                constant,
                amplitude,
            } => {
                for _ in 0..h * w * c {
                    let u = if amplitude == 0 {
                        0
                    } else {
                        rng.gen_range(0..amplitude)
                    };
                    pixels.push(((constant as u16 + u) % 256) as u8);
                }
            }
        }
    }
    Dataset::new(
        n,
        (h, w, c),
        pixels,
        Split::Train,
        format!("synth:{kind:?}:n={n}:seed={seed}"),
    )
}

fn blobs(rng: &mut impl Rng, h: usize, w: usize, c: usize, out: &mut Vec<u8>) {
    let count = rng.gen_range(1..=3);
    let base = h.min(w) as f64;
    let specs: Vec<(f64, f64, f64, Vec<f64>)> = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(0.1..=0.3) * base;
            let peak = (0..c).map(|_| rng.gen_range(0..=255) as f64).collect();
            (cy, cx, sigma, peak)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v: f64 = specs
                    .iter()
                    .map(|(cy, cx, s, peak)| {
                        let r2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        peak[ch] * (-r2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                out.push(v.min(255.0).round() as u8);
            }
        }
    }
}

fn stripes(rng: &mut impl Rng, h: usize, w: usize, c: usize, out: &mut Vec<u8>) {
    let vertical = rng.gen_bool(0.5);
    let extent = if vertical { w } else { h };
    let period = rng.gen_range(2..=(extent / 2).max(2));
    let phase = rng.gen_range(0..period);
    let colours: [Vec<u8>; 2] = [
        (0..c).map(|_| rng.gen()).collect(),
        (0..c).map(|_| rng.gen()).collect(),
    ];
    for y in 0..h {
        for x in 0..w {
            let t = if vertical { x } else { y };
            let band = ((t + phase) % period) * 2 / period;
            out.extend_from_slice(&colours[band]);
        }
    }
}
