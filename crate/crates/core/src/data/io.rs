use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// File extensions recognised as images, lower case.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "jpg", "jpeg", "gif"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(dir.to_path_buf())
        } else {
            Error::Io {
                path: dir.to_path_buf(),
                source,
            }
        }
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// The image in `dir` whose stem is `stem`, whatever its extension.
pub(crate) fn find_by_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .flat_map(|e| [e.to_string(), e.to_ascii_uppercase()])
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// RGB image as a `1x3xHxW` tensor scaled to `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor4<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Grayscale map as `(height, width, values)` with values in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()))
}

/// Binary map; gray levels above 127 are set.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::from_vec(h, w, img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `1x3xHxW` tensor with values in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb(path: &Path, image: &Tensor4<f32>) -> Result<()> {
    let [_, c, h, w] = image.dims();
    if c != 3 {
        return Err(Error::Data(format!("save_rgb needs 3 channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|ch| quantize(image.at(0, ch, y, x))))
    });
    save(path, &img)
}

/// Writes an `H x W` map of values in `[0, 1]` as 8-bit grayscale, storing
/// `round(v * 255)`.
pub fn save_gray(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Data(format!("{} values for a {height}x{width} map", values.len())));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([quantize(values[y as usize * width + x as usize])])
    });
    save(path, &img)
}

/// Writes a mask as 8-bit grayscale with set pixels at 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(5, 7, |y, x| (y * 3 + x) % 4 == 0);
        let p = dir.path().join("sub/m.png");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);

        let img = Tensor4::from_fn([1, 3, 4, 6], |[_, c, y, x]| ((c * 50 + y * 20 + x * 7) % 256) as f32 / 255.0);
        let p = dir.path().join("i.png");
        save_rgb(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);

        let vals = [0.0, 0.5, 1.0, 0.2];
        let p = dir.path().join("g.png");
        save_gray(&p, 2, 2, &vals).unwrap();
        let g = image::open(&p).unwrap().to_luma8().into_raw();
        assert_eq!(g, vec![0, 128, 255, 51]);
    }

    #[test]
    fn missing_file_is_named() {
        let e = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(e, Error::MissingFile(_)));
        assert!(e.to_string().contains("/nonexistent/x.png"));
    }
}
