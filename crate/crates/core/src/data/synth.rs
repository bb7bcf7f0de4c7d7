//! Procedurally rendered glyph classes: bars, crosses, discs and rings at
//! class-specific orientations and sizes, with random translation and
//! brightness jitter.

use rand::Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Glyph {
    /// Segment through the center at `angle` degrees.
    Bar { angle: f64 },
    /// Two perpendicular segments, the first at `angle` degrees.
    Cross { angle: f64 },
    /// Filled disc.
    Disc { radius: f64 },
    /// Circle outline.
    Ring { radius: f64 },
}

/// Class `k` renders `GLYPHS[k]`.
pub const GLYPHS: [Glyph; 16] = [
    Glyph::Bar { angle: 0.0 },
    Glyph::Disc { radius: 3.0 },
    Glyph::Cross { angle: 0.0 },
    Glyph::Bar { angle: 90.0 },
    Glyph::Ring { radius: 5.0 },
    Glyph::Cross { angle: 45.0 },
    Glyph::Bar { angle: 45.0 },
    Glyph::Bar { angle: 135.0 },
    Glyph::Bar { angle: 22.5 },
    Glyph::Ring { radius: 3.0 },
    Glyph::Cross { angle: 22.5 },
    Glyph::Disc { radius: 5.0 },
    Glyph::Bar { angle: 67.5 },
    Glyph::Bar { angle: 112.5 },
    Glyph::Bar { angle: 157.5 },
    Glyph::Cross { angle: 67.5 },
];

pub const MAX_SYNTH_CLASSES: usize = GLYPHS.len();

const BASE_INTENSITY: f64 = 0.6;
const STROKE_HALF_WIDTH: f64 = 0.75;
const BRIGHTNESS_JITTER: f64 = 0.1;
const MAX_SHIFT: i64 = 2;
const BAR_HALF_LENGTH: f64 = 5.0;

fn segment_distance(px: f64, py: f64, angle: f64) -> f64 {
    let (s, c) = angle.to_radians().sin_cos();
    let along = (px * c + py * s).clamp(-BAR_HALF_LENGTH, BAR_HALF_LENGTH);
    let (qx, qy) = (px - along * c, py - along * s);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased coverage in [0, 1] of the glyph at offset (px, py) from its center.
fn coverage(glyph: Glyph, px: f64, py: f64) -> f64 {
    let edge = |d: f64| (0.5 - d).clamp(0.0, 1.0);
    match glyph {
        Glyph::Bar { angle } => edge(segment_distance(px, py, angle) - STROKE_HALF_WIDTH),
        Glyph::Cross { angle } => {
            let d = segment_distance(px, py, angle).min(segment_distance(px, py, angle + 90.0));
            edge(d - STROKE_HALF_WIDTH)
        }
        Glyph::Disc { radius } => edge((px * px + py * py).sqrt() - radius),
        Glyph::Ring { radius } => edge(((px * px + py * py).sqrt() - radius).abs() - STROKE_HALF_WIDTH),
    }
}

/// `per_class` single-channel `size`×`size` images of each of the first
/// `num_classes` glyphs, class-major order. Deterministic in
/// (`seed`, `split`).
pub fn synth_shapes(num_classes: usize, per_class: usize, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    if num_classes == 0 || num_classes > MAX_SYNTH_CLASSES {
        return Err(Error::Domain(format!(
            "synthetic shapes support 1..={MAX_SYNTH_CLASSES} classes, got {num_classes}"
        )));
    }
    if per_class == 0 || size < 8 {
        return Err(Error::Domain("need per_class >= 1 and size >= 8".into()));
    }
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let split_id = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let center = (size as f64 - 1.0) / 2.0;
    for class in 0..num_classes {
        for i in 0..per_class {
            let mut rng = rng::stream(seed, &[rng::NS_SYNTH, split_id, class as u64, i as u64]);
            let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            let intensity = BASE_INTENSITY + rng.random_range(-BRIGHTNESS_JITTER..=BRIGHTNESS_JITTER);
            for y in 0..size {
                for x in 0..size {
                    let cov = coverage(GLYPHS[class], x as f64 - center - dx, y as f64 - center - dy);
                    data.push((intensity * cov).clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(
        format!("synth{num_classes}"),
        split,
        Tensor::from_vec(&[n, 1, size, size], data)?,
        labels,
        num_classes,
    )
}
