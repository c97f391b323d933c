//! Procedural handwritten-style digits.
//!
//! Each digit is a few spline strokes through jittered control points, drawn
//! with an anti-aliased pen under a random affine warp and quantized to 8-bit
//! levels like MNIST. Used when no IDX files are supplied.

use crate::datasets::{RawDigitSet, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::Result;
use crate::numerics::{RngStream, Tensor};

type Stroke = &'static [(f64, f64)];

const ZERO: &[Stroke] = &[&[
    (0.5, 0.04),
    (0.74, 0.12),
    (0.84, 0.35),
    (0.84, 0.62),
    (0.74, 0.87),
    (0.5, 0.96),
    (0.26, 0.87),
    (0.16, 0.62),
    (0.16, 0.35),
    (0.26, 0.12),
    (0.5, 0.04),
]];
const ONE_A: &[Stroke] = &[&[(0.34, 0.22), (0.54, 0.04), (0.54, 0.5), (0.53, 0.96)]];
const ONE_B: &[Stroke] = &[&[(0.56, 0.04), (0.5, 0.5), (0.46, 0.96)]];
const TWO: &[Stroke] = &[&[
    (0.18, 0.28),
    (0.3, 0.1),
    (0.5, 0.04),
    (0.72, 0.1),
    (0.8, 0.3),
    (0.65, 0.55),
    (0.4, 0.75),
    (0.15, 0.96),
    (0.5, 0.95),
    (0.88, 0.95),
]];
const THREE: &[Stroke] = &[&[
    (0.18, 0.12),
    (0.45, 0.03),
    (0.75, 0.12),
    (0.78, 0.3),
    (0.5, 0.47),
    (0.38, 0.48),
    (0.5, 0.49),
    (0.8, 0.6),
    (0.82, 0.8),
    (0.55, 0.96),
    (0.3, 0.95),
    (0.15, 0.85),
]];
const FOUR_A: &[Stroke] = &[&[
    (0.64, 0.96),
    (0.64, 0.5),
    (0.64, 0.04),
    (0.12, 0.68),
    (0.88, 0.68),
]];
const FOUR_B: &[Stroke] = &[
    &[(0.28, 0.04), (0.22, 0.35), (0.18, 0.6), (0.86, 0.6)],
    &[(0.68, 0.3), (0.68, 0.6), (0.68, 0.96)],
];
const FIVE: &[Stroke] = &[
    &[(0.82, 0.05), (0.55, 0.05), (0.3, 0.05)],
    &[
        (0.3, 0.05),
        (0.25, 0.45),
        (0.5, 0.38),
        (0.78, 0.5),
        (0.82, 0.72),
        (0.62, 0.93),
        (0.35, 0.96),
        (0.15, 0.86),
    ],
];
const SIX: &[Stroke] = &[&[
    (0.72, 0.04),
    (0.45, 0.2),
    (0.27, 0.5),
    (0.25, 0.75),
    (0.4, 0.94),
    (0.62, 0.93),
    (0.76, 0.75),
    (0.65, 0.56),
    (0.42, 0.55),
    (0.27, 0.68),
]];
const SEVEN_A: &[Stroke] = &[&[
    (0.12, 0.06),
    (0.5, 0.06),
    (0.88, 0.06),
    (0.6, 0.5),
    (0.42, 0.96),
]];
const SEVEN_B: &[Stroke] = &[
    &[
        (0.12, 0.06),
        (0.5, 0.06),
        (0.88, 0.06),
        (0.6, 0.5),
        (0.42, 0.96),
    ],
    &[(0.38, 0.5), (0.78, 0.5)],
];
const EIGHT: &[Stroke] = &[&[
    (0.5, 0.48),
    (0.25, 0.3),
    (0.3, 0.08),
    (0.5, 0.03),
    (0.7, 0.08),
    (0.75, 0.3),
    (0.5, 0.48),
    (0.22, 0.7),
    (0.3, 0.93),
    (0.5, 0.97),
    (0.72, 0.92),
    (0.78, 0.7),
    (0.5, 0.48),
]];
const NINE: &[Stroke] = &[&[
    (0.75, 0.3),
    (0.6, 0.45),
    (0.35, 0.45),
    (0.22, 0.28),
    (0.35, 0.08),
    (0.6, 0.05),
    (0.75, 0.2),
    (0.75, 0.3),
    (0.7, 0.6),
    (0.6, 0.96),
]];

fn variants(digit: u8) -> &'static [&'static [Stroke]] {
    match digit {
        0 => &[ZERO],
        1 => &[ONE_A, ONE_B],
        2 => &[TWO],
        3 => &[THREE],
        4 => &[FOUR_A, FOUR_B],
        5 => &[FIVE],
        6 => &[SIX],
        7 => &[SEVEN_A, SEVEN_B],
        8 => &[EIGHT],
        _ => &[NINE],
    }
}

/// Randomization ranges for glyph rendering.
#[derive(Clone, Debug)]
pub struct GlyphStyle {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub max_shear: f64,
    pub max_shift_px: f64,
    pub point_jitter: f64,
    pub half_width_px: (f64, f64),
    pub peak: (f64, f64),
}

impl Default for GlyphStyle {
    fn default() -> Self {
        GlyphStyle {
            max_rotation_deg: 12.0,
            scale: (0.85, 1.08),
            aspect: (0.8, 1.15),
            max_shear: 0.25,
            max_shift_px: 1.5,
            point_jitter: 0.035,
            half_width_px: (0.9, 1.7),
            peak: (0.85, 1.0),
        }
    }
}

fn catmull_rom(points: &[(f64, f64)], steps: usize) -> Vec<(f64, f64)> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let n = points.len();
    let at = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * steps + 1);
    for i in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            at(i as isize - 1),
            at(i as isize),
            at(i as isize + 1),
            at(i as isize + 2),
        );
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b
                    + (-a + c) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(points[n - 1]);
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one 28×28 glyph with intensities quantized to `k/255`.
pub fn render_digit(digit: u8, style: &GlyphStyle, rng: &mut RngStream) -> Vec<f64> {
    let options = variants(digit);
    let strokes = options[rng.below(options.len())];

    let theta = rng
        .uniform_in(-style.max_rotation_deg, style.max_rotation_deg)
        .to_radians();
    let scale = rng.uniform_in(style.scale.0, style.scale.1);
    let aspect = rng.uniform_in(style.aspect.0, style.aspect.1);
    let shear = rng.uniform_in(-style.max_shear, style.max_shear);
    let shift = (
        rng.uniform_in(-style.max_shift_px, style.max_shift_px),
        rng.uniform_in(-style.max_shift_px, style.max_shift_px),
    );
    let half_width = rng.uniform_in(style.half_width_px.0, style.half_width_px.1);
    let peak = rng.uniform_in(style.peak.0, style.peak.1);
    let (sin, cos) = theta.sin_cos();
    let box_px = 20.0 * scale;
    let centre = IMAGE_SIDE as f64 / 2.0;
    let to_pixel = |(x, y): (f64, f64)| {
        let u = (x - 0.5) * box_px * aspect;
        let v = (y - 0.5) * box_px;
        let u = u + shear * v;
        (
            centre + shift.0 + cos * u - sin * v,
            centre + shift.1 + sin * u + cos * v,
        )
    };

    let mut img = vec![0.0f64; IMAGE_PIXELS];
    for stroke in strokes.iter() {
        let jittered: Vec<(f64, f64)> = stroke
            .iter()
            .map(|&(x, y)| {
                (
                    x + style.point_jitter * rng.normal(),
                    y + style.point_jitter * rng.normal(),
                )
            })
            .collect();
        let path: Vec<(f64, f64)> = catmull_rom(&jittered, 6)
            .into_iter()
            .map(to_pixel)
            .collect();
        for seg in path.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let reach = half_width + 1.0;
            let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let x1 =
                ((a.0.max(b.0) + reach).ceil() as isize).clamp(0, IMAGE_SIDE as isize - 1) as usize;
            let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let y1 =
                ((a.1.max(b.1) + reach).ceil() as isize).clamp(0, IMAGE_SIDE as isize - 1) as usize;
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let d = segment_distance((px as f64 + 0.5, py as f64 + 0.5), a, b);
                    let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
                    let cell = &mut img[py * IMAGE_SIDE + px];
                    *cell = cell.max(cover);
                }
            }
        }
    }
    img.iter_mut()
        .for_each(|v| *v = ((*v * peak * 255.0).round()) / 255.0);
    img
}

/// `n` glyphs with uniformly drawn labels.
pub fn synthetic_digits(n: usize, seed: u64, style: &GlyphStyle) -> Result<RawDigitSet> {
    let mut rng = RngStream::new(seed);
    let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let d = rng.below(10) as u8;
        pixels.extend(render_digit(d, style, &mut rng));
        labels.push(d);
    }
    RawDigitSet::new(
        Tensor::new(vec![n, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_in_range_and_nonempty() {
        let set = synthetic_digits(50, 3, &GlyphStyle::default()).unwrap();
        for i in 0..set.len() {
            let img = set.image(i);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let ink: f64 = img.iter().sum();
            assert!(ink > 20.0, "digit {} nearly empty: {ink}", set.labels[i]);
            let max = img.iter().cloned().fold(0.0, f64::max);
            assert!(max >= 0.8);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synthetic_digits(20, 9, &GlyphStyle::default()).unwrap();
        let b = synthetic_digits(20, 9, &GlyphStyle::default()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn intensities_are_byte_levels() {
        let set = synthetic_digits(5, 1, &GlyphStyle::default()).unwrap();
        for &v in set.images.data() {
            let k = v * 255.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn distinct_digits_differ_more_than_redraws() {
        // Mean template distance between classes exceeds within-class spread.
        let style = GlyphStyle::default();
        let mut rng = RngStream::new(5);
        let mean = |d: u8, rng: &mut RngStream| {
            let mut acc = vec![0.0; IMAGE_PIXELS];
            for _ in 0..40 {
                for (a, v) in acc.iter_mut().zip(render_digit(d, &style, rng)) {
                    *a += v / 40.0;
                }
            }
            acc
        };
        let m1 = mean(1, &mut rng);
        let m1b = mean(1, &mut rng);
        let m0 = mean(0, &mut rng);
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert!(l1(&m1, &m0) > 3.0 * l1(&m1, &m1b));
    }
}
