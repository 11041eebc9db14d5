//! Procedural grayscale scenes: smooth shading, hard-edged shapes and a
//! little periodic texture. Used where no natural image corpus is at hand.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{rng_from_seed, Image};

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    HalfPlane { ny: f64, nx: f64, off: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::HalfPlane { ny, nx, off } => ny * y + nx * x > off,
        }
    }
}

struct Layer {
    shape: Shape,
    base: f64,
    gy: f64,
    gx: f64,
    texture: Option<(f64, f64, f64, f64)>,
}

/// Deterministic piecewise-smooth image with values in `[0, 1]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::Param("scene size must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let bg = (rng.gen_range(0.2..0.8), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let n = rng.gen_range(4..9);
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Disc {
                cy: rng.gen_range(0.0..1.0),
                cx: rng.gen_range(0.0..1.0),
                r: rng.gen_range(0.08..0.35),
            },
            1 => {
                let (y0, x0) = (rng.gen_range(-0.1..0.8), rng.gen_range(-0.1..0.8));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.1..0.6),
                    x1: x0 + rng.gen_range(0.1..0.6),
                }
            }
            _ => {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Shape::HalfPlane {
                    ny: a.sin(),
                    nx: a.cos(),
                    off: rng.gen_range(-0.3..0.9),
                }
            }
        };
        let texture = if rng.gen_bool(0.3) {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = rng.gen_range(6.0..20.0);
            Some((f * a.sin(), f * a.cos(), rng.gen_range(0.02..0.08), rng.gen_range(0.0..6.28)))
        } else {
            None
        };
        layers.push(Layer {
            shape,
            base: rng.gen_range(0.05..0.95),
            gy: rng.gen_range(-0.3..0.3),
            gx: rng.gen_range(-0.3..0.3),
            texture,
        });
    }
    let scale = height.max(width) as f64;
    Image::from_fn(height, width, |r, c| {
        let (y, x) = (r as f64 / scale, c as f64 / scale);
        let mut v = bg.0 + bg.1 * (y - 0.5) + bg.2 * (x - 0.5);
        for l in &layers {
            if l.shape.contains(y, x) {
                v = l.base + l.gy * (y - 0.5) + l.gx * (x - 0.5);
                if let Some((fy, fx, amp, ph)) = l.texture {
                    v += amp * (fy * y + fx * x + ph).sin();
                }
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` scenes with consecutive seeds starting at `seed`.
pub fn scenes(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count as u64).map(|i| scene(height, width, seed.wrapping_add(i))).collect()
}
