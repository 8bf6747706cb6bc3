//! Procedural datasets: rendered 28x28 handwritten-style digits and
//! two-class Gaussian blobs.
//!
//! Digits are drawn from stroke skeletons under a random affine warp,
//! stroke-width jitter, per-point wobble and pixel noise, then stored at
//! byte precision so they survive an IDX round trip unchanged.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::Result;
use crate::tensor::Tensor;

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let steps = (((to - from).abs() / 15.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|s| {
            let a = (from + (to - from) * s as f64 / steps as f64).to_radians();
            (cx + rx * a.cos(), cy - ry * a.sin())
        })
        .collect()
}

fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.28, 0.4, 0.0, 360.0)],
        1 => vec![
            vec![(0.52, 0.1), (0.5, 0.9)],
            vec![(0.34, 0.27), (0.52, 0.1)],
        ],
        2 => {
            let mut s = arc(0.5, 0.32, 0.26, 0.22, 160.0, -40.0);
            s.extend([(0.22, 0.9), (0.8, 0.9)]);
            vec![s]
        }
        3 => vec![
            arc(0.5, 0.3, 0.24, 0.2, 150.0, -90.0),
            arc(0.5, 0.7, 0.27, 0.2, 90.0, -150.0),
        ],
        4 => vec![vec![(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.82, 0.65)]],
        5 => {
            let mut s = vec![(0.75, 0.1), (0.32, 0.1), (0.28, 0.46)];
            s.extend(arc(0.5, 0.66, 0.27, 0.24, 135.0, -150.0));
            vec![s]
        }
        6 => vec![
            vec![(0.7, 0.12), (0.46, 0.24), (0.3, 0.46), (0.25, 0.66)],
            arc(0.5, 0.66, 0.25, 0.24, 180.0, -180.0),
        ],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.42, 0.9)]],
        8 => vec![
            arc(0.5, 0.29, 0.2, 0.19, 0.0, 360.0),
            arc(0.5, 0.7, 0.25, 0.21, 0.0, 360.0),
        ],
        9 => vec![
            arc(0.5, 0.34, 0.24, 0.23, 0.0, 360.0),
            vec![(0.74, 0.34), (0.7, 0.6), (0.55, 0.9)],
        ],
        _ => unreachable!("digits are 0..=9"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(digit: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let wobble = Normal::new(0.0, 0.025).unwrap();
    let noise = Normal::new(0.0, 0.06).unwrap();
    let scale = rng.gen_range(17.0..21.0);
    let aspect = rng.gen_range(0.8..1.15);
    let angle = rng.gen_range(-0.26f64..0.26);
    let shear = rng.gen_range(-0.25..0.25);
    let tx = rng.gen_range(-2.0..2.0);
    let ty = rng.gen_range(-2.0..2.0);
    let radius = rng.gen_range(0.9..1.9);
    let (sin, cos) = angle.sin_cos();
    let centre = SIDE as f64 / 2.0;

    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let x = (x - 0.5 + wobble.sample(rng)) * scale * aspect;
                    let y = (y - 0.5 + wobble.sample(rng)) * scale;
                    let x = x + shear * y;
                    (
                        centre + tx + cos * x - sin * y,
                        centre + ty + sin * x + cos * y,
                    )
                })
                .collect()
        })
        .collect();

    let mut img = vec![0.0; SIDE * SIDE];
    for (r, row) in img.chunks_mut(SIDE).enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = (radius + 0.5 - d).clamp(0.0, 1.0);
            let v = ink + noise.sample(rng) * if ink > 0.0 { 1.0 } else { 0.5 };
            *px = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    img
}

/// `n` class-balanced digit images of shape `[n, 28, 28]` in shuffled order.
pub fn digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    for &l in &labels {
        data.extend(render(l, &mut rng));
    }
    Dataset::new(Tensor::new(vec![n, SIDE, SIDE], data)?, labels, Some(10))
}

/// Two Gaussian clusters in the plane, separated by a margin of at least
/// 0.5 around the line `x + y = 0`.
pub fn blobs(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, 0.7).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let label = labels.len() % 2;
        let centre = if label == 1 { 1.5 } else { -1.5 };
        let x = centre + spread.sample(&mut rng);
        let y = centre + spread.sample(&mut rng);
        let side = (x + y) / 2f64.sqrt();
        let ok = if label == 1 { side > 0.5 } else { side < -0.5 };
        if ok {
            data.extend([x, y]);
            labels.push(label);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, Some(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_balanced_and_deterministic() {
        let a = digits(50, 3).unwrap();
        let b = digits(50, 3).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.images(), b.images());
        assert_eq!(a.sample_shape(), &[28, 28]);
        for d in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == d).count(), 5);
        }
        let img = a.images();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // every image has ink
        for i in 0..a.len() {
            assert!(img.row(i).iter().filter(|&&v| v > 0.5).count() > 20);
        }
    }

    #[test]
    fn blobs_respect_margin() {
        let d = blobs(200, 1).unwrap();
        let x = d.images();
        for (i, &l) in d.labels().iter().enumerate() {
            let r = x.row(i);
            let side = (r[0] + r[1]) / 2f64.sqrt();
            assert!(if l == 1 { side > 0.5 } else { side < -0.5 });
        }
    }
}
