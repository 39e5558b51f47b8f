//! Whole-image inference and the disk-to-disk timing protocol.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{load_rgb, resize_bilinear, save_gray, save_mask, Mask};
use crate::error::{Error, Result};
use crate::model::DpnModel;
use crate::tensor::{sigmoid, Tensor4};

/// Vessel probabilities of a `1x3xHxW` image as a row-major `H*W` map.
pub fn predict_probability(model: &DpnModel<f32>, image: &Tensor4<f32>) -> Result<Vec<f32>> {
    let [n, c, _, _] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::Data(format!("expected a 1x3xHxW image, got {:?}", image.dims())));
    }
    Ok(sigmoid(&model.predict_logits(image)?).into_vec())
}

/// Rounds probabilities to the 8-bit levels stored on disk.
pub fn quantize(prob: &[f32]) -> Vec<f32> {
    prob.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect()
}

/// Pixels at or above `t`.
pub fn binarize(prob: &[f32], height: usize, width: usize, t: f32) -> Result<Mask> {
    Mask::from_vec(height, width, prob.iter().map(|&p| u8::from(p >= t)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Probabilities at 8-bit precision, exactly as written to disk.
    pub prob: Vec<f32>,
    pub prob_path: PathBuf,
    pub binary_path: PathBuf,
    /// Milliseconds from reading the image to writing both maps.
    pub ms: f64,
}

/// Reads `image`, runs one forward pass and writes `<stem>_prob.png` and
/// `<stem>_bin.png` into `out_dir`. The binary map thresholds the stored
/// 8-bit probabilities, so re-thresholding the PNG reproduces it. With
/// `resize` the image is first resampled to that `(height, width)`.
pub fn predict_file(
    model: &DpnModel<f32>,
    image: &Path,
    out_dir: &Path,
    threshold: f32,
    resize: Option<(usize, usize)>,
) -> Result<Prediction> {
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("unusable file name {}", image.display())))?
        .to_string();
    let t0 = Instant::now();
    let mut img = load_rgb(image)?;
    if let Some((rh, rw)) = resize.filter(|&s| s != (img.height(), img.width())) {
        img = resize_bilinear(&img, rh, rw);
    }
    let (h, w) = (img.height(), img.width());
    let prob = quantize(&predict_probability(model, &img)?);
    let bin = binarize(&prob, h, w, threshold)?;
    let prob_path = out_dir.join(format!("{id}_prob.png"));
    let binary_path = out_dir.join(format!("{id}_bin.png"));
    save_gray(&prob_path, h, w, &prob)?;
    save_mask(&binary_path, &bin)?;
    Ok(Prediction {
        id,
        height: h,
        width: w,
        prob,
        prob_path,
        binary_path,
        ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_mask, save_rgb};
    use crate::model::DpnConfig;

    #[test]
    fn probability_png_rethresholds_to_binary_png() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DpnConfig {
            num_blocks: 2,
            aux_positions: vec![1],
            ..DpnConfig::default()
        };
        let model = DpnModel::new(cfg, 4).unwrap();
        let img = Tensor4::from_fn([1, 3, 13, 22], |[_, c, y, x]| ((c + y * x) % 9) as f32 / 8.0);
        let src = dir.path().join("in.png");
        save_rgb(&src, &img).unwrap();
        let p = predict_file(&model, &src, dir.path(), 0.5, None).unwrap();
        assert_eq!((p.height, p.width), (13, 22));
        let stored = image::open(&p.prob_path).unwrap().to_luma8();
        assert_eq!(stored.dimensions(), (22, 13));
        let reloaded: Vec<f32> = stored.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        assert_eq!(reloaded, p.prob);
        assert_eq!(binarize(&reloaded, 13, 22, 0.5).unwrap(), load_mask(&p.binary_path).unwrap());
        let bytes = std::fs::read(&p.prob_path).unwrap();
        predict_file(&model, &src, dir.path(), 0.5, None).unwrap();
        assert_eq!(std::fs::read(&p.prob_path).unwrap(), bytes);
        let r = predict_file(&model, &src, dir.path(), 0.5, Some((8, 12))).unwrap();
        assert_eq!((r.height, r.width), (8, 12));
    }
}
