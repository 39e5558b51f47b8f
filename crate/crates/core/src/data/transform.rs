//! Geometric transforms applied jointly to image, label and FOV.
//!
//! Images are resampled bilinearly, binary maps by nearest neighbour, so
//! labels and masks stay binary. Rotations keep the canvas size and fill
//! uncovered pixels with zero; multiples of 90° are exact index permutations.

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb};
use rand::Rng;
use rayon::prelude::*;

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Rotation angles of the offline augmentation, in degrees counter-clockwise.
pub const ROTATIONS: [u32; 8] = [22, 45, 90, 135, 180, 225, 270, 315];

/// `(height, width)` HRF images are reduced to.
pub const HRF_SIZE: (usize, usize) = (600, 900);
const HRF_NATIVE: (usize, usize) = (2336, 3504);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Rotate(u32),
}

/// The offline augmentation set: the original plus ten transforms.
pub const AUGMENTATIONS: [Transform; 11] = [
    Transform::Identity,
    Transform::HFlip,
    Transform::VFlip,
    Transform::Rotate(ROTATIONS[0]),
    Transform::Rotate(ROTATIONS[1]),
    Transform::Rotate(ROTATIONS[2]),
    Transform::Rotate(ROTATIONS[3]),
    Transform::Rotate(ROTATIONS[4]),
    Transform::Rotate(ROTATIONS[5]),
    Transform::Rotate(ROTATIONS[6]),
    Transform::Rotate(ROTATIONS[7]),
];

impl Transform {
    pub fn tag(self) -> String {
        match self {
            Self::Identity => "orig".into(),
            Self::HFlip => "hflip".into(),
            Self::VFlip => "vflip".into(),
            Self::Rotate(d) => format!("rot{d}"),
        }
    }

    pub fn apply(self, s: &Sample) -> Sample {
        let mut out = match self {
            Self::Identity => s.clone(),
            Self::HFlip => hflip(s),
            Self::VFlip => vflip(s),
            Self::Rotate(d) => rotate(s, d),
        };
        out.tag = self.tag();
        out
    }
}

/// Every sample under every transform of [`AUGMENTATIONS`], grouped by source
/// sample in input order.
pub fn augment_offline(train: &[Sample]) -> Vec<Sample> {
    train
        .par_iter()
        .flat_map_iter(|s| AUGMENTATIONS.iter().map(move |t| t.apply(s)))
        .collect()
}

/// Streams every augmented sample to `sink` instead of collecting them;
/// sources are processed in parallel. Returns the number produced.
pub fn augment_each<F>(train: &[Sample], sink: F) -> Result<usize>
where
    F: Fn(Sample) -> Result<()> + Sync,
{
    train.par_iter().try_for_each(|s| AUGMENTATIONS.iter().try_for_each(|t| sink(t.apply(s))))?;
    Ok(train.len() * AUGMENTATIONS.len())
}

fn map_planes(image: &Tensor4<f32>, f: impl Fn(&[f32], usize, usize) -> Vec<f32>) -> Tensor4<f32> {
    let [n, c, h, w] = image.dims();
    let mut data = Vec::with_capacity(image.len());
    for b in 0..n {
        for ch in 0..c {
            data.extend(f(image.plane(b, ch), h, w));
        }
    }
    Tensor4::from_vec([n, c, h, w], data).expect("plane dims")
}

fn map_mask(m: &Mask, f: impl Fn(&[u8], usize, usize) -> Vec<u8>) -> Mask {
    Mask::from_vec(m.height(), m.width(), f(m.data(), m.height(), m.width())).expect("mask dims")
}

/// Applies the same index mapping to every plane: `out[y][x] = src[map(y, x)]`,
/// zero where the mapping falls outside.
fn permute<T: Copy + Default>(src: &[T], h: usize, w: usize, map: impl Fn(i64, i64) -> (i64, i64)) -> Vec<T> {
    let mut out = vec![T::default(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as i64, x as i64);
            if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                out[y * w + x] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

fn geometric(s: &Sample, map: impl Fn(i64, i64, usize, usize) -> (i64, i64) + Copy) -> Sample {
    Sample {
        image: map_planes(&s.image, |p, h, w| permute(p, h, w, |y, x| map(y, x, h, w))),
        label: map_mask(&s.label, |p, h, w| permute(p, h, w, |y, x| map(y, x, h, w))),
        fov: map_mask(&s.fov, |p, h, w| permute(p, h, w, |y, x| map(y, x, h, w))),
        id: s.id.clone(),
        tag: s.tag.clone(),
    }
}

pub fn hflip(s: &Sample) -> Sample {
    geometric(s, |y, x, _, w| (y, w as i64 - 1 - x))
}

pub fn vflip(s: &Sample) -> Sample {
    geometric(s, |y, x, h, _| (h as i64 - 1 - y, x))
}

/// Source coordinates of a quarter-turn rotation about the image centre.
/// Non-square canvases place the centre with floor rounding.
fn quarter_turn(turns: u32, y: i64, x: i64, h: usize, w: usize) -> (i64, i64) {
    let (h, w) = (h as i64, w as i64);
    match turns % 4 {
        0 => (y, x),
        1 => (x + (h - w).div_euclid(2), (w + h - 2).div_euclid(2) - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => ((h + w - 2).div_euclid(2) - x, y + (w - h).div_euclid(2)),
    }
}

/// Inverse map of a counter-clockwise rotation by `deg` about the centre
/// `((W-1)/2, (H-1)/2)`: output `(y, x)` reads source `(sy, sx)`.
#[inline]
fn rotation_source(deg: f64, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)
}

fn rotate_plane_bilinear(src: &[f32], h: usize, w: usize, deg: f64) -> Vec<f32> {
    let at = |yy: i64, xx: i64| -> f32 {
        if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
            src[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotation_source(deg, y, x, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn rotate_plane_nearest(src: &[u8], h: usize, w: usize, deg: f64) -> Vec<u8> {
    let mut out = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotation_source(deg, y, x, h, w);
            let (sy, sx) = (sy.round() as i64, sx.round() as i64);
            if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                out[y * w + x] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Counter-clockwise rotation by `degrees` about the image centre on the same
/// canvas.
pub fn rotate(s: &Sample, degrees: u32) -> Sample {
    let d = degrees % 360;
    if d % 90 == 0 {
        let turns = d / 90;
        return geometric(s, move |y, x, h, w| quarter_turn(turns, y, x, h, w));
    }
    let deg = f64::from(d);
    Sample {
        image: map_planes(&s.image, |p, h, w| rotate_plane_bilinear(p, h, w, deg)),
        label: map_mask(&s.label, |p, h, w| rotate_plane_nearest(p, h, w, deg)),
        fov: map_mask(&s.fov, |p, h, w| rotate_plane_nearest(p, h, w, deg)),
        id: s.id.clone(),
        tag: s.tag.clone(),
    }
}

/// Bilinear (triangle-filter) resize of every plane of a `1x3xHxW` image.
pub fn resize_bilinear(image: &Tensor4<f32>, height: usize, width: usize) -> Tensor4<f32> {
    let [_, c, h, w] = image.dims();
    assert_eq!(c, 3, "resize_bilinear expects an RGB tensor");
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb([0, 1, 2].map(|ch| image.at(0, ch, y as usize, x as usize))));
    let r = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Tensor4::from_fn([1, 3, height, width], |[_, ch, y, x]| r.get_pixel(x as u32, y as u32)[ch].clamp(0.0, 1.0))
}

pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([u8::from(mask.get(y as usize, x as usize))])
    });
    let r = imageops::resize(&buf, width as u32, height as u32, FilterType::Nearest);
    Mask::from_vec(height, width, r.into_raw()).expect("resized dims")
}

/// Reduces an HRF sample to 600x900.
pub fn hrf_resize(s: &Sample) -> Sample {
    let (h, w) = HRF_SIZE;
    if (s.height(), s.width()) != HRF_NATIVE {
        log::warn!(
            "{}: unexpected HRF size {}x{}, resizing to {h}x{w} anyway",
            s.id,
            s.height(),
            s.width()
        );
    }
    Sample {
        image: resize_bilinear(&s.image, h, w),
        label: resize_nearest(&s.label, h, w),
        fov: resize_nearest(&s.fov, h, w),
        id: s.id.clone(),
        tag: s.tag.clone(),
    }
}

/// Window of `h x w` pixels with top-left corner `(y0, x0)`.
pub fn crop_sample(s: &Sample, y0: usize, x0: usize, h: usize, w: usize) -> Result<Sample> {
    if y0 + h > s.height() || x0 + w > s.width() {
        return Err(Error::Data(format!(
            "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
            s.height(),
            s.width()
        )));
    }
    let image = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| s.image.at(0, c, y0 + y, x0 + x));
    let cut = |m: &Mask| Mask::from_fn(h, w, |y, x| m.get(y0 + y, x0 + x));
    Ok(Sample {
        image,
        label: cut(&s.label),
        fov: cut(&s.fov),
        id: s.id.clone(),
        tag: s.tag.clone(),
    })
}

/// Uniform top-left corner of a `size x size` window.
pub fn random_crop_origin<R: Rng + ?Sized>(height: usize, width: usize, size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if size > height || size > width {
        return Err(Error::Data(format!("crop size {size} exceeds image {height}x{width}")));
    }
    Ok((rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
}

pub fn random_crop<R: Rng + ?Sized>(s: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (y0, x0) = random_crop_origin(s.height(), s.width(), size, rng)?;
    crop_sample(s, y0, x0, size, size)
}

/// Horizontal flip with probability one half.
pub fn random_mirror<R: Rng + ?Sized>(s: Sample, rng: &mut R) -> Sample {
    if rng.gen_bool(0.5) {
        hflip(&s)
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker(h: usize, w: usize) -> Sample {
        let image = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 100 + y * w + x) as f32 + 1.0) / 1000.0);
        let label = Mask::from_fn(h, w, |y, x| (y * w + x) % 3 == 0);
        let fov = Mask::from_fn(h, w, |y, x| (y + x) % 2 == 0);
        Sample::new(image, label, fov, "m").unwrap()
    }

    #[test]
    fn quarter_turn_on_square_is_exact() {
        // 3x3 markers 1..9; a counter-clockwise turn moves the right column to the top row
        let s = marker(3, 3);
        let r = rotate(&s, 90);
        let got: Vec<f32> = r.image.plane(0, 0).iter().map(|v| (v * 1000.0).round() - 1.0).collect();
        assert_eq!(got, vec![2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0]);
        let r = rotate(&s, 270);
        let got: Vec<f32> = r.image.plane(0, 0).iter().map(|v| (v * 1000.0).round() - 1.0).collect();
        assert_eq!(got, vec![6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
    }

    #[test]
    fn quarter_turn_on_wide_canvas() {
        // 2x3 markers 0..5; the 3x2 rotated content is centred with floor
        // rounding, so the canvas keeps its middle two source columns
        let s = marker(2, 3);
        let r = rotate(&s, 90);
        let got: Vec<i32> = r.image.plane(0, 0).iter().map(|v| (v * 1000.0).round() as i32 - 1).collect();
        assert_eq!(got, vec![-1, 1, 4, -1, 0, 3]);
    }

    #[test]
    fn quarter_turns_match_general_rotation() {
        // on odd square canvases the centre is a pixel and nearest sampling of
        // the continuous rotation is an exact permutation
        for n in [5usize, 9] {
            let s = marker(n, n);
            for d in [90u32, 180, 270] {
                let exact = rotate(&s, d);
                let general = rotate_plane_nearest(s.label.data(), n, n, f64::from(d));
                assert_eq!(exact.label.data(), &general[..]);
            }
        }
    }

    #[test]
    fn half_turn_is_involution() {
        let s = marker(5, 8);
        let back = rotate(&rotate(&s, 180), 180);
        assert_eq!(back.image, s.image);
        assert_eq!(back.label, s.label);
        assert_eq!(back.fov, s.fov);
    }

    #[test]
    fn oblique_rotation_fills_corners_and_stays_binary() {
        let s = Sample::new(
            Tensor4::full([1, 3, 20, 30], 0.8),
            Mask::from_fn(20, 30, |_, _| true),
            Mask::from_fn(20, 30, |y, _| y > 5),
            "f",
        )
        .unwrap();
        for d in ROTATIONS {
            let r = rotate(&s, d);
            assert!(r.label.data().iter().all(|&v| v <= 1));
            assert!(r.fov.data().iter().all(|&v| v <= 1));
        }
        let r = rotate(&s, 22);
        for (y, x) in [(0, 0), (0, 29), (19, 0), (19, 29)] {
            assert_eq!(r.image.at(0, 0, y, x), 0.0);
            assert!(!r.label.get(y, x));
        }
        assert!((r.image.at(0, 1, 10, 15) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn flips() {
        let s = marker(2, 3);
        let h = hflip(&s);
        assert_eq!(h.image.at(0, 2, 1, 0), s.image.at(0, 2, 1, 2));
        let v = vflip(&s);
        assert_eq!(v.label.get(0, 1), s.label.get(1, 1));
        assert_eq!(hflip(&h), s);
    }

    #[test]
    fn eleven_per_sample() {
        let a = augment_offline(&[marker(6, 7), marker(4, 4)]);
        assert_eq!(a.len(), 22);
        let tags: Vec<_> = a[..11].iter().map(|s| s.tag.as_str()).collect();
        assert_eq!(
            tags,
            ["orig", "hflip", "vflip", "rot22", "rot45", "rot90", "rot135", "rot180", "rot225", "rot270", "rot315"]
        );
        assert!(a.iter().all(|s| s.check().is_ok()));
    }

    #[test]
    fn crop_window_and_determinism() {
        let s = marker(10, 12);
        let c = crop_sample(&s, 2, 3, 4, 5).unwrap();
        assert_eq!(c.image.at(0, 1, 0, 0), s.image.at(0, 1, 2, 3));
        assert_eq!(c.label.get(3, 4), s.label.get(5, 7));
        assert!(crop_sample(&s, 7, 0, 4, 4).is_err());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| random_crop_origin(584, 565, 512, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(random_crop(&s, 11, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn crop_corners_cover_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut ys, mut xs) = (Vec::new(), Vec::new());
        for _ in 0..10_000 {
            let (y, x) = random_crop_origin(584, 565, 512, &mut rng).unwrap();
            ys.push(y);
            xs.push(x);
        }
        assert_eq!((*ys.iter().min().unwrap(), *ys.iter().max().unwrap()), (0, 72));
        assert_eq!((*xs.iter().min().unwrap(), *xs.iter().max().unwrap()), (0, 53));
    }

    #[test]
    fn hrf_size_and_binarity() {
        let s = Sample::new(
            Tensor4::from_fn([1, 3, 60, 90], |[_, c, y, x]| ((c + y + x) % 10) as f32 / 10.0),
            Mask::from_fn(60, 90, |y, x| (y / 7 + x / 5) % 2 == 0),
            Mask::from_fn(60, 90, |_, _| true),
            "h",
        )
        .unwrap();
        let r = hrf_resize(&s);
        assert_eq!((r.height(), r.width()), HRF_SIZE);
        assert_eq!(r.label.dims(), HRF_SIZE);
        assert!(r.label.data().iter().all(|&v| v <= 1));
        assert_eq!(HRF_NATIVE.0 * 900, HRF_NATIVE.1 * 600);
    }
}
