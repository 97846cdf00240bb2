//! Procedural abdominal-slice phantoms.
//!
//! A phantom is an elliptical body with faint smooth texture, one target
//! organ (a smooth star-shaped blob slightly brighter than the surrounding
//! tissue) and a handful of distractor structures (bone-like, fat-like and
//! vessel-like ellipses) that never touch the organ.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::{Image, Mask};

pub const MIN_PHANTOM_SIZE: usize = 32;
pub const MIN_MASK_FRACTION: f64 = 0.02;
pub const MAX_MASK_FRACTION: f64 = 0.30;

/// Clean slice plus its organ segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub ndct: Image,
    pub organ_mask: Mask,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn boundary(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * theta + phase).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * dx + dy * dy).sqrt() <= self.boundary(dy.atan2(dx))
    }

    fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>())
    }
}

struct Layout {
    body: Ellipse,
    body_level: f64,
    texture: Vec<(f64, f64, f64, f64)>,
    organ: Blob,
    organ_level: f64,
    distractors: Vec<(Ellipse, f64)>,
}

fn sample_layout(rng: &mut ChaCha8Rng) -> Layout {
    let body = Ellipse {
        cx: rng.random_range(-0.04..0.04),
        cy: rng.random_range(-0.04..0.04),
        a: rng.random_range(0.80..0.90),
        b: rng.random_range(0.62..0.74),
        angle: rng.random_range(-0.1..0.1),
    };
    let body_level = rng.random_range(0.42..0.48);
    let texture = (0..3)
        .map(|_| {
            (
                rng.random_range(0.004..0.008),
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let organ = Blob {
        cx: body.cx + rng.random_range(-0.28..0.28),
        cy: body.cy + rng.random_range(-0.15..0.15),
        radius: rng.random_range(0.26..0.36),
        harmonics: (0..3)
            .map(|_| (rng.random_range(-0.10..0.10), rng.random_range(0.0..2.0 * PI)))
            .collect(),
    };
    let organ_level = body_level + rng.random_range(0.07..0.11);

    let n_distractors = rng.random_range(2..=5);
    let mut distractors = Vec::with_capacity(n_distractors);
    let mut attempts = 0;
    while distractors.len() < n_distractors && attempts < 200 {
        attempts += 1;
        let e = Ellipse {
            cx: body.cx + rng.random_range(-0.65..0.65),
            cy: body.cy + rng.random_range(-0.50..0.50),
            a: rng.random_range(0.04..0.12),
            b: rng.random_range(0.04..0.10),
            angle: rng.random_range(0.0..PI),
        };
        let level = match rng.random_range(0..3) {
            0 => rng.random_range(0.85..0.95),
            1 => rng.random_range(0.18..0.28),
            _ => body_level + rng.random_range(0.18..0.25),
        };
        let reach = e.a.max(e.b);
        let inside_body = body.contains(e.cx + reach, e.cy)
            && body.contains(e.cx - reach, e.cy)
            && body.contains(e.cx, e.cy + reach)
            && body.contains(e.cx, e.cy - reach);
        let (dx, dy) = (e.cx - organ.cx, e.cy - organ.cy);
        let clear_of_organ = (dx * dx + dy * dy).sqrt() > organ.max_radius() + reach + 0.05;
        if inside_body && clear_of_organ {
            distractors.push((e, level));
        }
    }
    Layout {
        body,
        body_level,
        texture,
        organ,
        organ_level,
        distractors,
    }
}

fn intensity(layout: &Layout, x: f64, y: f64) -> f64 {
    if !layout.body.contains(x, y) {
        return 0.0;
    }
    let mut v = layout.body_level
        + layout
            .texture
            .iter()
            .map(|&(amp, fx, fy, phase)| amp * (PI * (fx * x + fy * y) + phase).cos())
            .sum::<f64>();
    if layout.organ.contains(x, y) {
        v = layout.organ_level;
    }
    for (e, level) in &layout.distractors {
        if e.contains(x, y) {
            v = *level;
        }
    }
    v.clamp(0.0, 1.0)
}

fn render(layout: &Layout, size: usize, seed: u64) -> Phantom {
    // Normalised coordinates in [-1, 1], y pointing down; 2×2 supersampling
    // for the image, pixel centres for the mask.
    let to_norm = |p: f64| (2.0 * p + 1.0) / size as f64 - 1.0;
    let mut img = vec![0.0; size * size];
    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            for (dr, dc) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                acc += intensity(layout, to_norm(c as f64 + dc), to_norm(r as f64 + dr));
            }
            img[r * size + c] = acc / 4.0;
            let (x, y) = (to_norm(c as f64), to_norm(r as f64));
            mask[r * size + c] = layout.body.contains(x, y) && layout.organ.contains(x, y);
        }
    }
    Phantom {
        ndct: Image::new(size, size, img).expect("size²"),
        organ_mask: Mask::new(size, size, mask).expect("size²"),
        seed,
    }
}

/// Deterministic phantom for `seed`. Layouts whose organ would cover less
/// than 2% or more than 30% of the slice are redrawn from the same stream.
pub fn generate_phantom(seed: u64, size: usize) -> Result<Phantom> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidArgument(format!(
            "phantom size must be at least {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    let mut rng = rng_for(seed, 0x5048_414e);
    loop {
        let layout = sample_layout(&mut rng);
        let phantom = render(&layout, size, seed);
        let f = phantom.organ_mask.fraction();
        if (MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&f) {
            return Ok(phantom);
        }
    }
}
