//! Field-of-view masks for datasets that do not ship one.

use std::collections::VecDeque;

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Red-channel level, relative to the image maximum, separating the fundus
/// from the dark surround.
const RED_FRACTION: f32 = 0.1;
const CLOSING_RADIUS: i64 = 5;

/// Estimates the circular field of view of a fundus image: threshold the red
/// channel, keep the largest 8-connected component, then close small gaps with
/// a disk.
pub fn fov_generate(image: &Tensor4<f32>) -> Result<Mask> {
    let [_, c, h, w] = image.dims();
    if c != 3 {
        return Err(Error::Data(format!("FOV generation needs an RGB image, got {c} channels")));
    }
    let red = image.plane(0, 0);
    let max = red.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Err(Error::Data("FOV generation: red channel is entirely black".into()));
    }
    let t = RED_FRACTION * max;
    let raw = Mask::from_fn(h, w, |y, x| red[y * w + x] > t);
    Ok(close(&largest_component(&raw), CLOSING_RADIUS))
}

fn largest_component(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    let mut label = vec![0u32; h * w];
    let (mut best, mut best_size, mut next) = (0u32, 0usize, 0u32);
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if m.data()[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.data()[j] != 0 && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best_size {
            best_size = size;
            best = next;
        }
    }
    Mask::from_fn(h, w, |y, x| best != 0 && label[y * w + x] == best)
}

fn disk(radius: i64) -> Vec<(i64, i64)> {
    let mut v = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Dilation (`any = true`, outside reads as unset) or erosion (`any = false`,
/// outside reads as set) by a symmetric structuring element.
fn morph(m: &Mask, se: &[(i64, i64)], any: bool) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |y, x| {
        let hit = |&(dy, dx): &(i64, i64)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                !any
            } else {
                m.get(ny as usize, nx as usize)
            }
        };
        if any {
            se.iter().any(hit)
        } else {
            se.iter().all(hit)
        }
    })
}

/// Morphological closing with a disk of the given radius.
fn close(m: &Mask, radius: i64) -> Mask {
    let se = disk(radius);
    morph(&morph(m, &se, true), &se, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fundus(h: usize, w: usize, r: f64) -> Tensor4<f32> {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let inside = d <= r;
            // a dark vessel-like segment inside, faint noise outside
            let stripe = inside && (x as i64 - cx as i64).abs() <= 1 && (y as f64 - cy).abs() < r / 2.0;
            match (c, inside, stripe) {
                (0, true, false) => 0.7,
                (0, true, true) => 0.05,
                (0, false, _) => 0.02 * ((y * 7 + x * 13) % 3) as f32,
                _ => 0.3,
            }
        })
    }

    #[test]
    fn recovers_disk_within_one_pixel() {
        let (h, w, r) = (80usize, 90usize, 30.0);
        let img = fundus(h, w, r);
        let m = fov_generate(&img).unwrap();
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - 40.0).powi(2) + (x as f64 - 45.0).powi(2)).sqrt();
                if d <= r - 1.0 {
                    assert!(m.get(y, x), "missing ({y},{x})");
                } else if d > r + 1.0 {
                    assert!(!m.get(y, x), "spurious ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn keeps_only_largest_component() {
        let mut img = fundus(60, 60, 20.0);
        for y in 0..3 {
            for x in 0..3 {
                img.set(0, 0, y, x, 0.9);
            }
        }
        let m = fov_generate(&img).unwrap();
        assert!(!m.get(1, 1));
        assert!(m.get(30, 30));
    }

    #[test]
    fn closing_is_idempotent_and_extensive() {
        let m = Mask::from_fn(40, 50, |y, x| (y * 31 + x * 17) % 7 < 3 || (y > 10 && y < 20));
        let c = close(&m, CLOSING_RADIUS);
        assert_eq!(close(&c, CLOSING_RADIUS), c);
        assert!(m.data().iter().zip(c.data()).all(|(&a, &b)| b >= a));
    }

    #[test]
    fn black_image_rejected() {
        assert!(fov_generate(&Tensor4::zeros([1, 3, 4, 4])).is_err());
    }
}
