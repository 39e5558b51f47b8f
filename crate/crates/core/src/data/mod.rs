//! Dataset layouts, image/label/FOV loading and augmentation.
//!
//! Every split directory holds `images/`, `labels/` and `fov/` subdirectories
//! whose files pair up by filename stem. A label may also carry the suffix
//! its dataset ships with (`21_manual1`, `Image_01L_1stHO`) and a FOV mask
//! the suffix `_mask`. DRIVE keeps its official split as `training/` and
//! `test/` under the root; CHASE_DB1 and HRF keep all images in one split
//! directory and are partitioned by sorted filename.

mod fov;
mod io;
mod transform;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use fov::fov_generate;
pub use io::{list_images, load_gray, load_mask, load_rgb, save_gray, save_mask, save_rgb, IMAGE_EXTENSIONS};
pub use transform::{
    augment_each, augment_offline, crop_sample, hflip, hrf_resize, random_crop, random_crop_origin, random_mirror, resize_bilinear, resize_nearest, rotate, vflip,
    Transform, AUGMENTATIONS, HRF_SIZE, ROTATIONS,
};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Binary map stored one byte per pixel, values 0 or 1.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask[{}x{}, {} set]", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    /// Accepts any bytes; nonzero means set.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "mask data has {} entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// `1x1xHxW` tensor of zeros and ones.
    pub fn to_tensor<T: Element>(&self) -> Tensor4<T> {
        let data = self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
        Tensor4::from_vec([1, 1, self.height, self.width], data).expect("mask dims")
    }
}

/// One image with its annotation and field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1x3xHxW`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    pub label: Mask,
    pub fov: Mask,
    pub id: String,
    /// Transform that produced this sample, `orig` for loaded data.
    pub tag: String,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, label: Mask, fov: Mask, id: impl Into<String>) -> Result<Self> {
        let s = Self {
            image,
            label,
            fov,
            id: id.into(),
            tag: "orig".into(),
        };
        s.check()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Verifies that image, label and FOV are spatially aligned.
    pub fn check(&self) -> Result<()> {
        let [n, c, h, w] = self.image.dims();
        if n != 1 || c != 3 {
            return Err(Error::Data(format!("{}: image must be 1x3xHxW, got {:?}", self.id, self.image.dims())));
        }
        for (what, m) in [("label", &self.label), ("fov", &self.fov)] {
            if m.dims() != (h, w) {
                return Err(Error::Data(format!(
                    "{}: {what} is {}x{} but image is {h}x{w}",
                    self.id, m.height, m.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Drive,
    Chase,
    Hrf,
}

impl DatasetKind {
    /// Square training crop side.
    pub fn crop_size(self) -> usize {
        match self {
            Self::Drive => 512,
            Self::Chase => 632,
            Self::Hrf => 588,
        }
    }

    pub fn iterations(self) -> usize {
        match self {
            Self::Drive | Self::Chase => 100_000,
            Self::Hrf => 70_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Drive => "drive",
            Self::Chase => "chase",
            Self::Hrf => "hrf",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drive" => Ok(Self::Drive),
            "chase" | "chase_db1" | "chasedb1" => Ok(Self::Chase),
            "hrf" => Ok(Self::Hrf),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// CHASE_DB1 partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChaseSplit {
    /// First 20 images train, remaining 8 test.
    #[default]
    S20_8,
    /// First 14 train, remaining 14 test.
    S14_14,
}

impl FromStr for ChaseSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "20/8" | "20-8" | "20_8" => Ok(Self::S20_8),
            "14/14" | "14-14" | "14_14" => Ok(Self::S14_14),
            other => Err(Error::Config(format!("unknown CHASE split {other:?}"))),
        }
    }
}

impl fmt::Display for ChaseSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S20_8 => "20/8",
            Self::S14_14 => "14/14",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub chase_split: ChaseSplit,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            root: root.into(),
            chase_split: ChaseSplit::default(),
        }
    }
}

/// Label file stems tried after the image's own stem, covering the names the
/// datasets ship with (`21_manual1`, `Image_01L_1stHO`).
fn label_stems(stem: &str) -> Vec<String> {
    let number = stem.split('_').next().unwrap_or(stem);
    vec![format!("{number}_manual1"), format!("{stem}_1stHO")]
}

fn find_companion(dir: &Path, stem: &str, fallbacks: &[String]) -> Option<PathBuf> {
    std::iter::once(stem)
        .chain(fallbacks.iter().map(String::as_str))
        .find_map(|s| io::find_by_stem(dir, s))
}

/// Loads every sample of one split directory in sorted filename order.
/// A missing FOV file is generated from the image when `generate_fov` is set
/// and is an error otherwise.
pub fn load_dir(dir: &Path, generate_fov: bool) -> Result<Vec<Sample>> {
    load_files(dir, &list_images(&dir.join("images"))?, generate_fov, |s| s)
}

/// Loads the given images of split directory `dir` with their labels and
/// FOV masks, applying `map` to each sample as soon as it is loaded so
/// full-size originals never accumulate in memory.
pub fn load_files(
    dir: &Path,
    images: &[PathBuf],
    generate_fov: bool,
    map: impl Fn(Sample) -> Sample,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?
            .to_string();
        let image = load_rgb(path)?;
        let label_path = find_companion(&dir.join("labels"), &stem, &label_stems(&stem))
            .ok_or_else(|| Error::MissingFile(dir.join("labels").join(format!("{stem}.png"))))?;
        let label = load_mask(&label_path)?;
        let fov = match find_companion(&dir.join("fov"), &stem, &[format!("{stem}_mask")]) {
            Some(p) => load_mask(&p)?,
            None if generate_fov => fov_generate(&image)?,
            None => return Err(Error::MissingFile(dir.join("fov").join(format!("{stem}.png")))),
        };
        out.push(map(Sample::new(image, label, fov, stem)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

/// The split directory and sorted image files of one part of a dataset.
pub fn split_files(spec: &DatasetSpec, part: Part) -> Result<(PathBuf, Vec<PathBuf>)> {
    let name = spec.kind.name();
    match spec.kind {
        DatasetKind::Drive => {
            let dir = spec.root.join(match part {
                Part::Train => "training",
                Part::Test => "test",
            });
            let files = list_images(&dir.join("images"))?;
            if files.len() != 20 {
                log::warn!("{name}: expected 20 images in {}, found {}", dir.display(), files.len());
            }
            Ok((dir, files))
        }
        DatasetKind::Chase | DatasetKind::Hrf => {
            let (n_train, expected) = match (spec.kind, spec.chase_split) {
                (DatasetKind::Chase, ChaseSplit::S20_8) => (20, 28),
                (DatasetKind::Chase, ChaseSplit::S14_14) => (14, 28),
                _ => (15, 45),
            };
            let mut all = list_images(&spec.root.join("images"))?;
            if all.len() != expected {
                log::warn!("{name}: expected {expected} images, found {}", all.len());
            }
            if all.len() < n_train {
                return Err(Error::Data(format!(
                    "{name}: need at least {n_train} images for training, found {}",
                    all.len()
                )));
            }
            let test = all.split_off(n_train);
            Ok((spec.root.clone(), if part == Part::Train { all } else { test }))
        }
    }
}

/// Loads one part of a dataset; HRF samples are reduced to 600x900 and
/// CHASE_DB1 FOV masks are generated when absent.
pub fn load_part(spec: &DatasetSpec, part: Part) -> Result<Vec<Sample>> {
    let (dir, files) = split_files(spec, part)?;
    match spec.kind {
        DatasetKind::Drive => load_files(&dir, &files, false, |s| s),
        DatasetKind::Chase => load_files(&dir, &files, true, |s| s),
        DatasetKind::Hrf => load_files(&dir, &files, false, |s| hrf_resize(&s)),
    }
}

/// Loads the train and test samples of a dataset.
pub fn load_split(spec: &DatasetSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((load_part(spec, Part::Train)?, load_part(spec, Part::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_tensor_round_trip() {
        let m = Mask::from_fn(3, 4, |y, x| (y + x) % 2 == 0);
        let t: Tensor4<f32> = m.to_tensor();
        assert_eq!(t.dims(), [1, 1, 3, 4]);
        assert_eq!(t.at(0, 0, 1, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 2), 0.0);
        assert_eq!(m.count(), 6);
        assert!(Mask::from_vec(2, 2, vec![0, 3, 0]).is_err());
        assert_eq!(Mask::from_vec(1, 2, vec![0, 255]).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn sample_alignment_checked() {
        let img = Tensor4::zeros([1, 3, 4, 5]);
        assert!(Sample::new(img.clone(), Mask::zeros(4, 5), Mask::zeros(4, 5), "a").is_ok());
        let e = Sample::new(img, Mask::zeros(5, 4), Mask::zeros(4, 5), "a").unwrap_err();
        assert!(e.to_string().contains("label"));
    }

    #[test]
    fn native_companion_names() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor4::full([1, 3, 4, 4], 0.5f32);
        save_rgb(&dir.path().join("images/21_training.png"), &img).unwrap();
        save_mask(&dir.path().join("labels/21_manual1.png"), &Mask::from_fn(4, 4, |y, _| y == 1)).unwrap();
        save_mask(&dir.path().join("fov/21_training_mask.png"), &Mask::from_fn(4, 4, |_, _| true)).unwrap();
        let s = load_dir(dir.path(), false).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "21_training");
        assert_eq!(s[0].label.count(), 4);
        std::fs::remove_file(dir.path().join("labels/21_manual1.png")).unwrap();
        let e = load_dir(dir.path(), false).unwrap_err();
        assert!(e.to_string().contains("21_training"), "{e}");
    }

    #[test]
    fn dataset_constants() {
        let k: Vec<_> = ["drive", "CHASE_DB1", "hrf"].iter().map(|s| s.parse::<DatasetKind>().unwrap()).collect();
        assert_eq!(k.iter().map(|k| k.crop_size()).collect::<Vec<_>>(), [512, 632, 588]);
        assert_eq!(k.iter().map(|k| k.iterations()).collect::<Vec<_>>(), [100_000, 100_000, 70_000]);
        assert!("stare".parse::<DatasetKind>().is_err());
        assert_eq!("14/14".parse::<ChaseSplit>().unwrap(), ChaseSplit::S14_14);
    }
}
