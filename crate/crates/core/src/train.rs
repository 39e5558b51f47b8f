//! The training loop: batch size one, random crops of a lazily augmented
//! training set, summed deep-supervision loss and ADAM.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Parameterized, Tape};
use crate::data::{random_crop, random_mirror, Sample, Transform, AUGMENTATIONS};
use crate::error::{Error, Result};
use crate::loss::{total_objective, LossReport};
use crate::model::{save_checkpoint, DpnModel};
use crate::optim::Adam;

/// Training samples, optionally expanded by every offline augmentation.
/// Augmented samples are produced on demand so only the originals are held
/// in memory; index `i` is original `i / 11` under transform `i % 11`.
#[derive(Debug, Clone)]
pub struct TrainSet {
    base: Vec<Sample>,
    augmented: bool,
}

impl TrainSet {
    pub fn new(base: Vec<Sample>, augmented: bool) -> Self {
        Self { base, augmented }
    }

    pub fn len(&self) -> usize {
        if self.augmented {
            self.base.len() * AUGMENTATIONS.len()
        } else {
            self.base.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn transform(&self, i: usize) -> Transform {
        if self.augmented {
            AUGMENTATIONS[i % AUGMENTATIONS.len()]
        } else {
            Transform::Identity
        }
    }

    pub fn get(&self, i: usize) -> Sample {
        let n = if self.augmented { AUGMENTATIONS.len() } else { 1 };
        self.transform(i).apply(&self.base[i / n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub crop_size: usize,
    pub mirror: bool,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (and after the last one).
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    /// Per-iteration CSV loss log.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            crop_size: 512,
            mirror: true,
            seed: 0,
            checkpoint_every: 5_000,
            checkpoint: None,
            log: None,
        }
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub sample: usize,
    pub report: LossReport,
    pub ms: f64,
}

impl IterRecord {
    pub const CSV_HEADER: &'static str = "iter,sample,total,objective,beta,positives,negatives,head_losses,ms";

    pub fn csv_line(&self) -> String {
        let r = &self.report;
        let heads: Vec<String> = r.head_losses.iter().map(|l| format!("{l:.9e}")).collect();
        format!(
            "{},{},{:.9e},{:.9e},{:.9},{},{},{},{:.1}",
            self.iter,
            self.sample,
            r.total,
            r.objective(),
            r.beta,
            r.positives,
            r.negatives,
            heads.join(";"),
            self.ms
        )
    }
}

/// One forward/backward/update on a single sample. Returns the loss
/// breakdown; on a non-finite loss nothing is updated.
pub fn train_step(model: &mut DpnModel<f32>, adam: &mut Adam, sample: &Sample) -> Result<LossReport> {
    let mut tape = Tape::new();
    let x = tape.leaf(sample.image.clone(), false);
    let heads = model.forward(&mut tape, &x, true)?;
    let label = sample.label.to_tensor::<f32>();
    let (loss, report) = total_objective(&mut tape, &heads, &label, model.heads.len())?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", report.total)));
    }
    let grads = tape.backward(loss)?;
    drop(tape);
    model.zero_grad();
    grads.accumulate_into(model.params_mut())?;
    drop(grads);
    adam.step(model.params_mut())?;
    Ok(report.with_decay(adam.weight_decay, model.params()))
}

/// Trains `model` from iteration `adam.t + 1` up to `cfg.iterations`.
/// `on_iter` sees every record as it is produced. Checkpoints are written
/// atomically, so an abort leaves the last good one in place.
pub fn train(
    model: &mut DpnModel<f32>,
    adam: &mut Adam,
    set: &TrainSet,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<Vec<IterRecord>> {
    if set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let m = model.config.required_multiple();
    if cfg.crop_size == 0 || cfg.crop_size % m != 0 {
        return Err(Error::Config(format!("crop size {} must be a positive multiple of {m}", cfg.crop_size)));
    }
    let mut log = match &cfg.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            let f = File::create(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", IterRecord::CSV_HEADER).map_err(|source| Error::Io { path: p.clone(), source })?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = adam.t as usize;
    let mut records = Vec::with_capacity(cfg.iterations.saturating_sub(start));
    for iter in start + 1..=cfg.iterations {
        let t0 = Instant::now();
        let idx = rng.gen_range(0..set.len());
        let mut crop = random_crop(&set.get(idx), cfg.crop_size, &mut rng)?;
        if cfg.mirror {
            crop = random_mirror(crop, &mut rng);
        }
        let report = train_step(model, adam, &crop).map_err(|e| {
            log::error!("iteration {iter}: {e}");
            e
        })?;
        let rec = IterRecord {
            iter,
            sample: idx,
            report,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some((p, w)) = &mut log {
            writeln!(w, "{}", rec.csv_line()).map_err(|source| Error::Io { path: p.clone(), source })?;
        }
        on_iter(&rec);
        records.push(rec);
        let due = cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0;
        if let Some(path) = &cfg.checkpoint {
            if due || iter == cfg.iterations {
                if let Some((p, w)) = &mut log {
                    w.flush().map_err(|source| Error::Io { path: p.clone(), source })?;
                }
                save_checkpoint(path, model, Some(adam))?;
                log::info!("iteration {iter}: checkpoint written to {}", path.display());
            }
        }
    }
    if let Some((p, mut w)) = log {
        w.flush().map_err(|source| Error::Io { path: p, source })?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;
    use crate::model::{load_checkpoint, DpnConfig};
    use crate::tensor::Tensor4;

    fn tiny_config() -> DpnConfig {
        DpnConfig {
            c0: 4,
            c1: 2,
            c2: 2,
            stem_channels: 4,
            num_blocks: 2,
            aux_positions: vec![1],
            ..DpnConfig::default()
        }
    }

    fn sample(h: usize, w: usize) -> Sample {
        let image = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 7 + y * 3 + x * 5) % 11) as f32 / 10.0);
        let label = Mask::from_fn(h, w, |y, x| (y + 2 * x) % 5 == 0);
        Sample::new(image, label, Mask::from_fn(h, w, |_, _| true), "s").unwrap()
    }

    #[test]
    fn lazy_set_matches_offline_augmentation() {
        let base = vec![sample(8, 12), sample(8, 12)];
        let set = TrainSet::new(base.clone(), true);
        assert_eq!(set.len(), 22);
        let offline = crate::data::augment_offline(&base);
        for i in [0, 5, 13, 21] {
            assert_eq!(set.get(i), offline[i]);
        }
        assert_eq!(TrainSet::new(base, false).len(), 2);
    }

    #[test]
    fn seeded_runs_repeat_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let set = TrainSet::new(vec![sample(16, 20)], true);
        let run = |log: &str| {
            let mut model = DpnModel::new(tiny_config(), 1).unwrap();
            let mut adam = Adam::default();
            let cfg = TrainConfig {
                iterations: 6,
                crop_size: 8,
                seed: 9,
                checkpoint_every: 4,
                checkpoint: Some(dir.path().join("m.dpn")),
                log: Some(dir.path().join(log)),
                ..TrainConfig::default()
            };
            let recs = train(&mut model, &mut adam, &set, &cfg, |_| {}).unwrap();
            (recs, model, adam)
        };
        let (a, ma, adam) = run("a.csv");
        let (b, mb, _) = run("b.csv");
        assert_eq!(a.len(), 6);
        assert_eq!(adam.t, 6);
        let la: Vec<_> = a.iter().map(|r| r.report.total.to_bits()).collect();
        let lb: Vec<_> = b.iter().map(|r| r.report.total.to_bits()).collect();
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
        let ck = load_checkpoint(&dir.path().join("m.dpn")).unwrap();
        assert_eq!(ck.adam_step, Some(6));
        assert_eq!(ck.model.stem.weight.value, ma.stem.weight.value);
        let log = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(log.lines().count(), 7);
        for r in &a {
            assert_eq!(r.report.head_losses.len(), 2);
            let (p, n) = (r.report.positives, r.report.negatives);
            assert_eq!(p + n, 64);
            assert_eq!(r.report.beta, n as f64 / 64.0);
        }
    }

    #[test]
    fn rejects_bad_crop() {
        let mut model = DpnModel::new(tiny_config(), 1).unwrap();
        let set = TrainSet::new(vec![sample(16, 16)], false);
        let cfg = TrainConfig {
            iterations: 1,
            crop_size: 10,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &mut Adam::default(), &set, &cfg, |_| {}).is_err());
        let cfg = TrainConfig {
            iterations: 1,
            crop_size: 20,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &mut Adam::default(), &set, &cfg, |_| {}).is_err());
    }
}
