//! One function per subcommand. Each returns `Ok(false)` when it finished
//! but some part failed, so the process can exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dpn_core::data::{
    augment_each, list_images, load_gray, load_part, save_mask, save_rgb, DatasetKind, Part, Sample, HRF_SIZE,
};
use dpn_core::metrics::{aggregate, ImageEval};
use dpn_core::model::{load_checkpoint, DpnModel};
use dpn_core::optim::Adam;
use dpn_core::predict::{predict_file, predict_probability};
use dpn_core::synth::write_dataset;
use dpn_core::train::{train as run_training, TrainConfig, TrainSet};
use dpn_core::verify::{check_kernels, check_network};

use crate::config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(cfg: &RunConfig) -> Result<DpnModel<f32>> {
    let path = cfg.checkpoint_path();
    let ck = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model)
}

/// HRF images are processed at the reduced training resolution.
fn inference_size(cfg: &RunConfig) -> Option<(usize, usize)> {
    (cfg.dataset == DatasetKind::Hrf).then_some(HRF_SIZE)
}

pub fn train(cfg: &RunConfig) -> Result<bool> {
    let spec = cfg.dataset_spec()?;
    create_dir(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), format!("{cfg}\n")).context("writing the config echo")?;
    let base = load_part(&spec, Part::Train)?;
    log::info!("{} training images from {}", base.len(), spec.root.display());
    let set = TrainSet::new(base, cfg.augment);

    let checkpoint = cfg.checkpoint_path();
    let mut adam = Adam {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Adam::default()
    };
    let mut model = if cfg.resume {
        let ck = load_checkpoint(&checkpoint).with_context(|| format!("resuming from {}", checkpoint.display()))?;
        if ck.model.config != cfg.model()? {
            log::warn!("checkpoint architecture differs from the settings; using the checkpoint's");
        }
        adam.t = ck.adam_step.unwrap_or(0);
        log::info!("resuming at iteration {}", adam.t);
        ck.model
    } else {
        DpnModel::new(cfg.model()?, cfg.seed)?
    };

    let tc = TrainConfig {
        iterations: cfg.iterations(),
        crop_size: cfg.crop_size(),
        mirror: cfg.mirror,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint: Some(checkpoint.clone()),
        log: Some(cfg.out.join("train_log.csv")),
    };
    let t0 = Instant::now();
    let records = run_training(&mut model, &mut adam, &set, &tc, |r| {
        if r.iter % 100 == 0 || r.iter == 1 {
            log::info!(
                "iter {:>6}  loss {:.4e}  objective {:.4e}  {:.0} ms",
                r.iter,
                r.report.total,
                r.report.objective(),
                r.ms
            );
        }
    })?;
    log::info!(
        "{} iterations in {:.1} s; checkpoint {}",
        records.len(),
        t0.elapsed().as_secs_f64(),
        checkpoint.display()
    );
    Ok(true)
}

fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_images(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn predict(cfg: &RunConfig, images: &[PathBuf]) -> Result<bool> {
    let files = expand(images)?;
    if files.is_empty() {
        bail!("no input images given");
    }
    let model = load_model(cfg)?;
    create_dir(&cfg.out)?;
    let threshold = cfg.threshold.unwrap_or(0.5);
    let mut ok = true;
    for f in &files {
        match predict_file(&model, f, &cfg.out, threshold, inference_size(cfg)) {
            Ok(p) => println!("{}\t{}x{}\t{:.1} ms\t{}", p.id, p.height, p.width, p.ms, p.prob_path.display()),
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                ok = false;
            }
        }
    }
    Ok(ok)
}

/// Test samples with their probability maps and prediction times.
fn scored(cfg: &RunConfig, predictions: Option<&Path>) -> Result<Vec<ImageEval>> {
    let test: Vec<Sample> = load_part(&cfg.dataset_spec()?, Part::Test)?;
    let model = match predictions {
        Some(_) => None,
        None => Some(load_model(cfg)?),
    };
    let mut evals = Vec::with_capacity(test.len());
    for s in &test {
        let (prob, ms) = match (&model, predictions) {
            (Some(m), _) => {
                let t0 = Instant::now();
                let p = predict_probability(m, &s.image)?;
                (p, Some(t0.elapsed().as_secs_f64() * 1e3))
            }
            (None, Some(dir)) => {
                let path = dir.join(format!("{}_prob.png", s.id));
                if !path.exists() {
                    bail!("missing prediction {} for test image {}", path.display(), s.id);
                }
                let (h, w, p) = load_gray(&path)?;
                if (h, w) != (s.height(), s.width()) {
                    bail!("{}: {h}x{w} map for a {}x{} image", path.display(), s.height(), s.width());
                }
                (p, None)
            }
            (None, None) => unreachable!(),
        };
        evals.push(ImageEval::compute(s.id.clone(), &prob, &s.label, &s.fov, ms)?);
        log::info!("scored {}", s.id);
    }
    Ok(evals)
}

pub fn evaluate(cfg: &RunConfig, predictions: Option<&Path>) -> Result<bool> {
    let evals = scored(cfg, predictions)?;
    let report = aggregate(&evals, cfg.eval_mode, cfg.threshold)?;
    create_dir(&cfg.out)?;
    let csv = cfg.out.join("report.csv");
    report.save_csv(&csv)?;
    println!("{report}");
    println!("written {}", csv.display());
    Ok(true)
}

pub fn augment(cfg: &RunConfig) -> Result<bool> {
    let train = load_part(&cfg.dataset_spec()?, Part::Train)?;
    let out = cfg.out.clone();
    for sub in ["images", "labels", "fov"] {
        create_dir(&out.join(sub))?;
    }
    let n = augment_each(&train, |s| {
        let name = format!("{}_{}.png", s.id, s.tag);
        save_rgb(&out.join("images").join(&name), &s.image)?;
        save_mask(&out.join("labels").join(&name), &s.label)?;
        save_mask(&out.join("fov").join(&name), &s.fov)
    })?;
    println!("{} originals -> {n} training samples in {}", train.len(), out.display());
    Ok(true)
}

pub fn count_params(cfg: &RunConfig) -> Result<bool> {
    let model = DpnModel::<f32>::zeros(cfg.model()?)?;
    println!("{}", model.count_parameters());
    Ok(true)
}

pub fn gradcheck(cfg: &RunConfig, seeds: u64, size: usize, samples: usize) -> Result<bool> {
    let model = cfg.model()?;
    let t0 = Instant::now();
    let mut all = true;
    for seed in 0..seeds {
        let mut outcomes = check_kernels(seed)?;
        outcomes.push(check_network(seed, size, model.clone(), samples)?);
        for o in &outcomes {
            let r = &o.report;
            println!(
                "{} seed {:>2} {:<12} max_abs {:.3e} (tol {:.0e}) checked {} refined {}",
                if o.passed() { "PASS" } else { "FAIL" },
                o.seed,
                o.name,
                r.max_abs(),
                o.tol,
                r.checked(),
                r.refined()
            );
            all &= o.passed();
        }
    }
    println!(
        "gradcheck {} in {:.1} s",
        if all { "passed" } else { "FAILED" },
        t0.elapsed().as_secs_f64()
    );
    Ok(all)
}

pub fn benchmark(cfg: &RunConfig, images: &[PathBuf], runs: usize) -> Result<bool> {
    let files = match images {
        [] => {
            let (dir, files) = dpn_core::data::split_files(&cfg.dataset_spec()?, Part::Test)?;
            log::info!("benchmarking the test split in {}", dir.display());
            files
        }
        _ => expand(images)?,
    };
    if files.is_empty() {
        bail!("no images to benchmark");
    }
    let path = cfg.checkpoint_path();
    let model = if path.exists() {
        load_model(cfg)?
    } else {
        println!("note: {} not found; timing a freshly initialized network", path.display());
        DpnModel::new(cfg.model()?, cfg.seed)?
    };
    let scratch = tempfile::tempdir().context("creating a scratch directory")?;
    let threshold = cfg.threshold.unwrap_or(0.5);
    let runs = runs.max(files.len()).max(1);
    println!(
        "{runs} disk-to-disk runs over {} images, {} threads (model load excluded)",
        files.len(),
        rayon::current_num_threads()
    );
    let mut ms = Vec::with_capacity(runs);
    for i in 0..runs {
        let p = predict_file(&model, &files[i % files.len()], scratch.path(), threshold, inference_size(cfg))?;
        ms.push(p.ms);
    }
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let median = if ms.len() % 2 == 1 {
        ms[ms.len() / 2]
    } else {
        (ms[ms.len() / 2 - 1] + ms[ms.len() / 2]) / 2.0
    };
    println!(
        "mean {mean:.1} ms  median {median:.1} ms  min {:.1} ms  max {:.1} ms  {:.3} fps",
        ms[0],
        ms[ms.len() - 1],
        1000.0 / mean
    );
    Ok(true)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

pub fn synth(cfg: &RunConfig, size: Option<&str>) -> Result<bool> {
    let root = cfg.data_root.clone().context("pass --data-root for the output directory")?;
    let size = size.map(parse_size).transpose()?;
    write_dataset(&root, cfg.dataset, size, cfg.seed)?;
    println!("synthetic {} written to {}", cfg.dataset, root.display());
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_syntax() {
        assert_eq!(parse_size("584x565").unwrap(), (584, 565));
        assert!(parse_size("584").is_err());
    }
}
