//! Synthetic fundus photographs with exactly known vessel maps.
//!
//! A bright circular field of view holds dark, branching, tapering vessel
//! curves radiating from an optic disc. The label is the rasterized vessel
//! set, so a network can in principle fit it perfectly. Used to exercise the
//! data, training and evaluation pipelines without the real datasets.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_mask, save_rgb, DatasetKind, Mask, Sample};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Native `(height, width)` of each dataset's images.
pub fn native_size(kind: DatasetKind) -> (usize, usize) {
    match kind {
        DatasetKind::Drive => (584, 565),
        DatasetKind::Chase => (960, 999),
        DatasetKind::Hrf => (2336, 3504),
    }
}

struct Canvas {
    h: usize,
    w: usize,
    vessel: Vec<u8>,
}

impl Canvas {
    /// Marks every pixel within `r` of the segment `a-b`.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64) {
        let (y0, y1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (x0, x1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = dy * dy + dx * dx;
        let ys = y0.floor().max(0.0) as usize..=(y1.ceil().max(0.0) as usize).min(self.h - 1);
        for y in ys {
            let xs = x0.floor().max(0.0) as usize..=(x1.ceil().max(0.0) as usize).min(self.w - 1);
            for x in xs {
                let (py, px) = (y as f64 - a.0, x as f64 - a.1);
                let t = if len2 > 0.0 { ((py * dy + px * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ey, ex) = (py - t * dy, px - t * dx);
                if ey * ey + ex * ex <= r * r {
                    self.vessel[y * self.w + x] = 1;
                }
            }
        }
    }
}

struct Geometry {
    cy: f64,
    cx: f64,
    radius: f64,
    scale: f64,
}

impl Geometry {
    fn inside(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.radius * self.radius
    }
}

fn grow(c: &mut Canvas, g: &Geometry, rng: &mut ChaCha8Rng, start: (f64, f64), angle: f64, width: f64, depth: u32) {
    let (mut p, mut a, mut wd) = (start, angle, width);
    let step = 3.0 * g.scale;
    let curl = rng.gen_range(-0.02..0.02);
    for _ in 0..400 {
        a += curl + rng.gen_range(-0.12..0.12);
        let q = (p.0 + step * a.sin(), p.1 + step * a.cos());
        if !g.inside(q.0, q.1) {
            break;
        }
        c.segment(p, q, wd / 2.0);
        p = q;
        wd = (wd * 0.995).max(g.scale);
        if depth < 3 && wd > 1.5 * g.scale && rng.gen_bool(0.025) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let child = a + side * rng.gen_range(0.4..0.9);
            grow(c, g, rng, p, child, wd * 0.7, depth + 1);
        }
    }
}

/// A deterministic synthetic fundus of the given size.
pub fn fundus(height: usize, width: usize, seed: u64, id: &str) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = height.min(width) as f64;
    let g = Geometry {
        cy: (height as f64 - 1.0) / 2.0,
        cx: (width as f64 - 1.0) / 2.0,
        radius: 0.47 * s,
        scale: (s / 584.0).max(0.5),
    };
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let disc = (g.cy + rng.gen_range(-0.05..0.05) * s, g.cx + side * 0.25 * s);
    let mut c = Canvas {
        h: height,
        w: width,
        vessel: vec![0; height * width],
    };
    let trunks = rng.gen_range(5..8);
    for k in 0..trunks {
        let angle = 2.0 * PI * (k as f64 + rng.gen_range(0.0..0.6)) / trunks as f64;
        let width = rng.gen_range(4.0..7.0) * g.scale;
        grow(&mut c, &g, &mut rng, disc, angle, width, 0);
    }
    let fov = Mask::from_fn(height, width, |y, x| g.inside(y as f64, x as f64));
    let label = Mask::from_fn(height, width, |y, x| fov.get(y, x) && c.vessel[y * width + x] != 0);
    let base = [0.78f32, 0.42, 0.16];
    let mut image = Tensor4::zeros([1, 3, height, width]);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = ((y as f64 - g.cy) / g.radius, (x as f64 - g.cx) / g.radius);
            let r2 = (fy * fy + fx * fx) as f32;
            let noise: f32 = rng.gen_range(-0.02..0.02);
            for ch in 0..3 {
                let v = if !fov.get(y, x) {
                    0.01
                } else {
                    let mut v = base[ch] * (1.0 - 0.35 * r2) + noise;
                    if label.get(y, x) {
                        v *= 0.55;
                    }
                    v
                };
                image.set(0, ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Sample::new(image, label, fov, id)
}

/// Writes `images/<id>.png`, `labels/<id>.png` and, when `with_fov`,
/// `fov/<id>.png` under `dir`.
pub fn write_sample(dir: &Path, s: &Sample, with_fov: bool) -> Result<()> {
    save_rgb(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
    save_mask(&dir.join("labels").join(format!("{}.png", s.id)), &s.label)?;
    if with_fov {
        save_mask(&dir.join("fov").join(format!("{}.png", s.id)), &s.fov)?;
    }
    Ok(())
}

/// Lays out a synthetic copy of a dataset in the layout [`crate::data::load_split`]
/// expects: DRIVE gets 20 + 20 images under `training/` and `test/`, CHASE 28
/// images without FOV masks, HRF 45 images. `size` overrides the native size.
pub fn write_dataset(root: &Path, kind: DatasetKind, size: Option<(usize, usize)>, seed: u64) -> Result<()> {
    let (h, w) = size.unwrap_or_else(|| native_size(kind));
    let mut n = 0u64;
    let mut emit = |dir: &Path, id: String, with_fov: bool| -> Result<()> {
        n += 1;
        write_sample(dir, &fundus(h, w, seed.wrapping_mul(1000).wrapping_add(n), &id)?, with_fov)
    };
    match kind {
        DatasetKind::Drive => {
            for i in 1..=20 {
                emit(&root.join("training"), format!("{:02}_training", i + 20), true)?;
            }
            for i in 1..=20 {
                emit(&root.join("test"), format!("{i:02}_test"), true)?;
            }
        }
        DatasetKind::Chase => {
            for i in 1..=14 {
                for eye in ['L', 'R'] {
                    emit(root, format!("Image_{i:02}{eye}"), false)?;
                }
            }
        }
        DatasetKind::Hrf => {
            for i in 1..=15 {
                for group in ["dr", "g", "h"] {
                    emit(root, format!("{i:02}_{group}"), true)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vessels_inside_fov_and_deterministic() {
        let a = fundus(120, 110, 3, "a").unwrap();
        let b = fundus(120, 110, 3, "a").unwrap();
        assert_eq!(a, b);
        let frac = a.label.count() as f64 / a.fov.count() as f64;
        assert!((0.03..0.4).contains(&frac), "vessel fraction {frac}");
        for y in 0..120 {
            for x in 0..110 {
                if a.label.get(y, x) {
                    assert!(a.fov.get(y, x));
                }
            }
        }
    }
}
