//! FOV-masked segmentation metrics and report aggregation.
//!
//! Probability maps are row-major `H*W` slices; ground truth and FOV are
//! [`Mask`]es of the same size. Only pixels inside the FOV count towards the
//! confusion statistics, AUC and the operating threshold. SSIM and PSNR
//! compare the probability map with the binary ground truth over the whole
//! image.

use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;

use crate::data::Mask;
use crate::error::{Error, Result};

/// Pixel counts inside the FOV. A pixel is predicted vessel when its
/// probability is at least the threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Rates derived from a confusion matrix. `None` marks a metric whose
/// denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    pub pr: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn pixel_metrics(c: &ConfusionCounts) -> PixelMetrics {
    let se = ratio(c.tp, c.tp + c.fn_);
    let pr = ratio(c.tp, c.tp + c.fp);
    let f1 = match (pr, se) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    PixelMetrics {
        se,
        sp: ratio(c.tn, c.tn + c.fp),
        acc: ratio(c.tp + c.tn, c.total()),
        pr,
        f1,
    }
}

fn check_maps(op: &str, prob: &[f32], gt: &Mask, fov: &Mask) -> Result<()> {
    let n = gt.height() * gt.width();
    if gt.dims() != fov.dims() || prob.len() != n {
        return Err(Error::Metric(format!(
            "{op}: probability map has {} pixels, ground truth is {:?}, FOV is {:?}",
            prob.len(),
            gt.dims(),
            fov.dims()
        )));
    }
    Ok(())
}

pub fn confusion_at_threshold(prob: &[f32], gt: &Mask, fov: &Mask, t: f32) -> Result<ConfusionCounts> {
    check_maps("confusion", prob, gt, fov)?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &f) in prob.iter().zip(gt.data()).zip(fov.data()) {
        if f == 0 {
            continue;
        }
        match (p >= t, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// FOV pixel scores split by class, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scores {
    pos: Vec<f32>,
    neg: Vec<f32>,
}

/// `Ok` when an ROC exists, i.e. both classes are present.
fn need_both(op: &str, s: &Scores) -> Result<()> {
    if s.pos.is_empty() || s.neg.is_empty() {
        return Err(Error::Metric(format!(
            "{op} needs both classes inside the FOV, found {} vessel and {} background pixels",
            s.pos.len(),
            s.neg.len()
        )));
    }
    Ok(())
}

impl Scores {
    pub fn from_maps(prob: &[f32], gt: &Mask, fov: &Mask) -> Result<Self> {
        check_maps("scores", prob, gt, fov)?;
        let mut s = Self::default();
        for ((&p, &g), &f) in prob.iter().zip(gt.data()).zip(fov.data()) {
            if f == 0 {
                continue;
            }
            if !p.is_finite() {
                return Err(Error::Metric(format!("non-finite score {p}")));
            }
            if g != 0 {
                s.pos.push(p);
            } else {
                s.neg.push(p);
            }
        }
        s.pos.sort_unstable_by(f32::total_cmp);
        s.neg.sort_unstable_by(f32::total_cmp);
        Ok(s)
    }

    pub fn positives(&self) -> usize {
        self.pos.len()
    }

    pub fn negatives(&self) -> usize {
        self.neg.len()
    }

    /// Merges another set, keeping both classes sorted.
    pub fn extend(&mut self, other: &Scores) {
        self.pos.extend_from_slice(&other.pos);
        self.neg.extend_from_slice(&other.neg);
        self.pos.sort_unstable_by(f32::total_cmp);
        self.neg.sort_unstable_by(f32::total_cmp);
    }

    fn at_least(v: &[f32], t: f32) -> u64 {
        (v.len() - v.partition_point(|&x| x < t)) as u64
    }

    pub fn counts_at(&self, t: f32) -> ConfusionCounts {
        let tp = Self::at_least(&self.pos, t);
        let fp = Self::at_least(&self.neg, t);
        ConfusionCounts {
            tp,
            fp,
            tn: self.neg.len() as u64 - fp,
            fn_: self.pos.len() as u64 - tp,
        }
    }

    /// Mann-Whitney statistic: the chance that a random vessel pixel scores
    /// above a random background pixel, ties counting one half.
    pub fn auc(&self) -> Result<f64> {
        need_both("AUC", self)?;
        // twice the number of winning pairs, so half-credits stay integral
        let mut twice: u128 = 0;
        let mut below = 0usize;
        for &p in &self.pos {
            while below < self.neg.len() && self.neg[below] < p {
                below += 1;
            }
            let ties = self.neg[below..].partition_point(|&x| x <= p);
            twice += 2 * below as u128 + ties as u128;
        }
        Ok(twice as f64 / (2.0 * self.pos.len() as f64 * self.neg.len() as f64))
    }

    /// Threshold maximizing Youden's J over the distinct scores, preferring
    /// the largest on ties.
    pub fn optimal_threshold(&self) -> Result<Operating> {
        need_both("threshold selection", self)?;
        let (np, nn) = (self.pos.len() as i128, self.neg.len() as i128);
        let (mut ip, mut in_) = (self.pos.len(), self.neg.len());
        let mut best: Option<(i128, f32)> = None;
        // sweep distinct scores from the top; J * P * N = tp * N - fp * P
        while ip > 0 || in_ > 0 {
            let t = match (ip.checked_sub(1).map(|k| self.pos[k]), in_.checked_sub(1).map(|k| self.neg[k])) {
                (Some(a), Some(b)) => a.max(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            };
            while ip > 0 && self.pos[ip - 1] >= t {
                ip -= 1;
            }
            while in_ > 0 && self.neg[in_ - 1] >= t {
                in_ -= 1;
            }
            let tp = np - ip as i128;
            let fp = nn - in_ as i128;
            let j = tp * nn - fp * np;
            if best.map_or(true, |(bj, _)| j > bj) {
                best = Some((j, t));
            }
        }
        let (j, threshold) = best.expect("non-empty scores");
        let youden = j as f64 / (np * nn) as f64;
        if j <= 0 {
            log::warn!("best operating point has Youden J = {youden:.4}; the scores do not separate the classes");
        }
        Ok(Operating { threshold, youden })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Operating {
    pub threshold: f32,
    pub youden: f64,
}

pub fn roc_auc(prob: &[f32], gt: &Mask, fov: &Mask) -> Result<f64> {
    Scores::from_maps(prob, gt, fov)?.auc()
}

pub fn optimal_threshold(prob: &[f32], gt: &Mask, fov: &Mask) -> Result<Operating> {
    Scores::from_maps(prob, gt, fov)?.optimal_threshold()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` map with kernel `k`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let r = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&r[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn check_pair(op: &str, a: &[f32], b: &[f32], height: usize, width: usize) -> Result<()> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::Metric(format!(
            "{op}: maps of {} and {} pixels for {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Metric(format!("{op}: empty maps")));
    }
    Ok(())
}

/// Mean structural similarity over every position of an 11x11 Gaussian
/// window (sigma 1.5) lying fully inside the image, dynamic range 1. Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize) -> Result<f64> {
    check_pair("ssim", a, b, height, width)?;
    let mut size = SSIM_WINDOW.min(height).min(width);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian(size);
    let a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let f = |m: &[f64]| filter_valid(m, height, width, &k);
    let (mu_a, mu_b) = (f(&a), f(&b));
    let (aa, bb, ab) = (f(&prod(&a, &a)), f(&prod(&b, &b)), f(&prod(&a, &b)));
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Peak signal-to-noise ratio in dB for peak value 1; identical maps give
/// `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], height: usize, width: usize) -> Result<f64> {
    check_pair("psnr", a, b, height, width)?;
    let mse = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Everything about one image needed for later aggregation.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub scores: Scores,
    pub ssim: f64,
    pub psnr: f64,
    /// Wall time of the prediction in milliseconds, when known.
    pub ms: Option<f64>,
}

impl ImageEval {
    pub fn compute(id: impl Into<String>, prob: &[f32], gt: &Mask, fov: &Mask, ms: Option<f64>) -> Result<Self> {
        let scores = Scores::from_maps(prob, gt, fov)?;
        let (h, w) = gt.dims();
        let truth: Vec<f32> = gt.data().iter().map(|&v| f32::from(v)).collect();
        Ok(Self {
            id: id.into(),
            scores,
            ssim: ssim(prob, &truth, h, w)?,
            psnr: psnr(prob, &truth, h, w)?,
            ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// One dataset-level threshold; rates from summed counts and AUC from all
    /// scores together.
    #[default]
    Pooled,
    /// Each image at its own threshold; the summary row averages the rows.
    PerImage,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per-image" | "per_image" | "image" => Ok(Self::PerImage),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::PerImage => "per-image",
        })
    }
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub threshold: f32,
    pub counts: ConfusionCounts,
    pub metrics: PixelMetrics,
    pub auc: Option<f64>,
    pub ssim: f64,
    pub psnr: f64,
    pub ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub images: Vec<ReportRow>,
    /// Dataset-level row.
    pub pooled: ReportRow,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean of SSIM and PSNR; any infinite PSNR makes the mean infinite.
fn image_means(evals: &[ImageEval]) -> (f64, f64, Option<f64>) {
    let n = evals.len() as f64;
    (
        evals.iter().map(|e| e.ssim).sum::<f64>() / n,
        evals.iter().map(|e| e.psnr).sum::<f64>() / n,
        mean(evals.iter().filter_map(|e| e.ms)),
    )
}

fn row(e: &ImageEval, t: f32) -> ReportRow {
    let counts = e.scores.counts_at(t);
    ReportRow {
        id: e.id.clone(),
        threshold: t,
        counts,
        metrics: pixel_metrics(&counts),
        auc: e.scores.auc().ok(),
        ssim: e.ssim,
        psnr: e.psnr,
        ms: e.ms,
    }
}

/// Combines per-image evaluations. `threshold` overrides the selected
/// operating point.
pub fn aggregate(evals: &[ImageEval], mode: EvalMode, threshold: Option<f32>) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(Error::Metric("nothing to aggregate".into()));
    }
    let (ssim, psnr, ms) = image_means(evals);
    match mode {
        EvalMode::Pooled => {
            let mut all = Scores::default();
            for e in evals {
                all.extend(&e.scores);
            }
            let t = match threshold {
                Some(t) => t,
                None => all.optimal_threshold()?.threshold,
            };
            let images: Vec<ReportRow> = evals.iter().map(|e| row(e, t)).collect();
            let counts = images.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts);
            let pooled = ReportRow {
                id: "pooled".into(),
                threshold: t,
                counts,
                metrics: pixel_metrics(&counts),
                auc: all.auc().ok(),
                ssim,
                psnr,
                ms,
            };
            Ok(EvalReport { mode, images, pooled })
        }
        EvalMode::PerImage => {
            let images = evals
                .iter()
                .map(|e| {
                    let t = match threshold {
                        Some(t) => t,
                        None => e.scores.optimal_threshold()?.threshold,
                    };
                    Ok(row(e, t))
                })
                .collect::<Result<Vec<_>>>()?;
            let avg = |f: fn(&ReportRow) -> Option<f64>| mean(images.iter().filter_map(f));
            let pooled = ReportRow {
                id: "mean".into(),
                threshold: mean(images.iter().map(|r| f64::from(r.threshold))).unwrap_or(0.0) as f32,
                counts: images.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts),
                metrics: PixelMetrics {
                    se: avg(|r| r.metrics.se),
                    sp: avg(|r| r.metrics.sp),
                    acc: avg(|r| r.metrics.acc),
                    pr: avg(|r| r.metrics.pr),
                    f1: avg(|r| r.metrics.f1),
                },
                auc: avg(|r| r.auc),
                ssim,
                psnr,
                ms,
            };
            Ok(EvalReport { mode, images, pooled })
        }
    }
}

/// Evaluates `(id, prob, gt, fov, ms)` tuples in parallel and aggregates them.
pub fn evaluate(
    inputs: &[(String, Vec<f32>, Mask, Mask, Option<f64>)],
    mode: EvalMode,
    threshold: Option<f32>,
) -> Result<EvalReport> {
    let evals = inputs
        .par_iter()
        .map(|(id, p, g, f, ms)| ImageEval::compute(id.clone(), p, g, f, *ms))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&evals, mode, threshold)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// Frames per second implied by the mean per-image time.
    pub fn fps(&self) -> Option<f64> {
        self.pooled.ms.filter(|&m| m > 0.0).map(|m| 1000.0 / m)
    }

    /// CSV with one row per image followed by the dataset-level row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Metric(format!("writing report: {e}"));
        w.write_record(["id", "threshold", "se", "sp", "acc", "f1", "auc", "ssim", "psnr", "ms"])
            .map_err(io)?;
        for r in self.images.iter().chain(std::iter::once(&self.pooled)) {
            w.write_record([
                r.id.clone(),
                format!("{:.6}", r.threshold),
                opt(r.metrics.se),
                opt(r.metrics.sp),
                opt(r.metrics.acc),
                opt(r.metrics.f1),
                opt(r.auc),
                format!("{:.6}", r.ssim),
                db(r.psnr),
                r.ms.map_or_else(String::new, |m| format!("{m:.1}")),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Metric(format!("writing report: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "   -  ".to_string(), |x| format!("{x:.4}"));
        writeln!(
            f,
            "{:<16} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8}",
            "image", "thresh", "Se", "Sp", "Acc", "F1", "AUC", "SSIM", "PSNR", "ms"
        )?;
        for r in self.images.iter().chain(std::iter::once(&self.pooled)) {
            writeln!(
                f,
                "{:<16} {:>7.4} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6.4} {:>8} {:>8}",
                r.id,
                r.threshold,
                cell(r.metrics.se),
                cell(r.metrics.sp),
                cell(r.metrics.acc),
                cell(r.metrics.f1),
                cell(r.auc),
                r.ssim,
                db(r.psnr),
                r.ms.map_or_else(|| "-".into(), |m| format!("{m:.1}")),
            )?;
        }
        write!(f, "mode: {}", self.mode)?;
        if let Some(fps) = self.fps() {
            write!(f, ", {fps:.3} fps")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_mask(v: &[u8]) -> Mask {
        Mask::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_confusion() {
        let c = confusion_at_threshold(&[0.9, 0.8, 0.3, 0.1], &row_mask(&[1, 0, 1, 0]), &row_mask(&[1; 4]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let c = confusion_at_threshold(&[0.9, 0.8], &row_mask(&[1, 0]), &row_mask(&[0, 0]), 0.5).unwrap();
        assert_eq!(c.total(), 0);
        assert!(confusion_at_threshold(&[0.9], &row_mask(&[1, 0]), &row_mask(&[1, 1]), 0.5).is_err());
    }

    #[test]
    fn formula_values() {
        let m = pixel_metrics(&ConfusionCounts { tp: 8, fn_: 2, tn: 85, fp: 5 });
        let close = |a: Option<f64>, b: f64| assert!((a.unwrap() - b).abs() < 5e-7, "{a:?} vs {b}");
        close(m.se, 0.8);
        close(m.sp, 0.944444);
        close(m.acc, 0.93);
        close(m.pr, 0.615385);
        close(m.f1, 0.695652);
        let m = pixel_metrics(&ConfusionCounts { tp: 0, fn_: 0, tn: 5, fp: 1 });
        assert_eq!(m.se, None);
        assert_eq!(m.f1, None);
        let m = pixel_metrics(&ConfusionCounts { tp: 3, fn_: 0, tn: 5, fp: 0 });
        assert_eq!([m.se, m.sp, m.acc, m.pr, m.f1], [Some(1.0); 5]);
    }

    #[test]
    fn auc_cases() {
        let gt = row_mask(&[1, 1, 0, 0]);
        let fov = row_mask(&[1; 4]);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.85, 0.1], &gt, &fov).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.1], &gt, &fov).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &gt, &fov).unwrap(), 0.5);
        assert!(roc_auc(&[0.3; 4], &row_mask(&[1; 4]), &fov).is_err());
    }

    #[test]
    fn threshold_cases() {
        let gt = row_mask(&[1, 1, 0, 0]);
        let fov = row_mask(&[1; 4]);
        let op = optimal_threshold(&[0.9, 0.6, 0.5, 0.2], &gt, &fov).unwrap();
        assert_eq!(op.threshold, 0.6);
        assert_eq!(op.youden, 1.0);
        // inverted: only the lowest score reaches J = 0
        let op = optimal_threshold(&[0.1, 0.2, 0.8, 0.9], &gt, &fov).unwrap();
        assert_eq!(op.youden, 0.0);
        assert_eq!(op.threshold, 0.1);
        // J ties between 0.9 and 0.4; the larger wins
        let gt = row_mask(&[1, 0, 1, 0]);
        let op = optimal_threshold(&[0.9, 0.7, 0.4, 0.1], &gt, &fov).unwrap();
        assert_eq!(op.youden, 0.5);
        assert_eq!(op.threshold, 0.9);
        // in-between pixels with consistent labels change nothing
        let gt = row_mask(&[1, 1, 0, 0, 1, 0]);
        let op = optimal_threshold(&[0.9, 0.6, 0.5, 0.2, 0.7, 0.3], &gt, &row_mask(&[1; 6])).unwrap();
        assert_eq!(op.threshold, 0.6);
    }

    #[test]
    fn psnr_and_ssim_cases() {
        let a = vec![0.5f32; 16 * 16];
        let b = vec![1.0f32; 16 * 16];
        let p = psnr(&a, &b, 16, 16).unwrap();
        assert!((p - 6.0206).abs() < 1e-4, "{p}");
        assert_eq!(psnr(&a, &a, 16, 16).unwrap(), f64::INFINITY);
        let r: Vec<f32> = (0..16 * 16).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        assert!((ssim(&r, &r, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&r, &a, 16, 16).unwrap();
        assert!((ab - ssim(&a, &r, 16, 16).unwrap()).abs() < 1e-9);
        assert!(ab < 1.0);
        // smaller than the window
        assert!((ssim(&r[..24], &r[..24], 4, 6).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_image_pool_equals_row() {
        let gt = Mask::from_fn(8, 8, |y, x| (y * 3 + x) % 5 == 0);
        let prob: Vec<f32> = (0..64).map(|i| ((i * 29) % 64) as f32 / 64.0).collect();
        let fov = Mask::from_fn(8, 8, |y, _| y > 0);
        let e = ImageEval::compute("a", &prob, &gt, &fov, Some(10.0)).unwrap();
        let r = aggregate(&[e], EvalMode::Pooled, None).unwrap();
        assert_eq!(r.images[0].counts, r.pooled.counts);
        assert_eq!(r.images[0].metrics, r.pooled.metrics);
        assert_eq!(r.images[0].auc, r.pooled.auc);
        assert_eq!(r.fps(), Some(100.0));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("id,threshold,se,sp,acc,f1,auc,ssim,psnr,ms"));
    }

    #[test]
    fn empty_aggregate_rejected() {
        assert!(aggregate(&[], EvalMode::Pooled, None).is_err());
    }
}
