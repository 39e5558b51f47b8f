//! Effective run settings: defaults, then a `key = value` file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpn_core::data::{ChaseSplit, DatasetKind, DatasetSpec};
use dpn_core::metrics::EvalMode;
use dpn_core::model::{Branches, DpnConfig};

const DEFAULT_AUX: [usize; 3] = [2, 4, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub chase_split: ChaseSplit,
    pub seed: u64,
    /// `None` means the dataset's iteration budget.
    pub iters: Option<usize>,
    /// `None` means the dataset's crop size.
    pub crop: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub resume: bool,
    pub out: PathBuf,
    pub threshold: Option<f32>,
    pub threads: usize,
    pub eval_mode: EvalMode,
    pub aux: bool,
    /// `None` means blocks 2, 4 and 6, restricted to the network depth.
    pub aux_positions: Option<Vec<usize>>,
    pub branches: Branches,
    pub filters: (usize, usize, usize),
    pub stem: usize,
    pub blocks: usize,
    pub mirror: bool,
    pub augment: bool,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = DpnConfig::default();
        Self {
            dataset: DatasetKind::Drive,
            data_root: None,
            chase_split: ChaseSplit::default(),
            seed: 0,
            iters: None,
            crop: None,
            checkpoint: None,
            checkpoint_every: 5_000,
            resume: false,
            out: PathBuf::from("out"),
            threshold: None,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            eval_mode: EvalMode::Pooled,
            aux: true,
            aux_positions: None,
            branches: Branches::default(),
            filters: (m.c0, m.c1, m.c2),
            stem: m.stem_channels,
            blocks: m.num_blocks,
            mirror: true,
            augment: true,
            lr: 1e-3,
            weight_decay: 5e-4,
        }
    }
}

fn list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().with_context(|| format!("bad integer {s:?}")))
        .collect()
}

fn flag(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => bail!("expected a boolean, got {other:?}"),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one setting by its configuration-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ctx = || format!("setting {key} = {v}");
        match key.trim() {
            "dataset" => self.dataset = v.parse().with_context(ctx)?,
            "data_root" => self.data_root = opt_path(v),
            "chase_split" => self.chase_split = v.parse().with_context(ctx)?,
            "seed" => self.seed = v.parse().with_context(ctx)?,
            "iters" => self.iters = if v == "auto" { None } else { Some(v.parse().with_context(ctx)?) },
            "crop" => self.crop = if v == "auto" { None } else { Some(v.parse().with_context(ctx)?) },
            "checkpoint" => self.checkpoint = opt_path(v),
            "checkpoint_every" => self.checkpoint_every = v.parse().with_context(ctx)?,
            "resume" => self.resume = flag(v).with_context(ctx)?,
            "out" => self.out = PathBuf::from(v),
            "threshold" => self.threshold = if v == "auto" { None } else { Some(v.parse().with_context(ctx)?) },
            "threads" => self.threads = v.parse().with_context(ctx)?,
            "eval_mode" => self.eval_mode = v.parse().with_context(ctx)?,
            "aux" => self.aux = flag(v).with_context(ctx)?,
            "aux_positions" => self.aux_positions = if v == "auto" { None } else { Some(list(v).with_context(ctx)?) },
            "branches" => self.branches = Branches::parse(v).with_context(ctx)?,
            "filters" => match list(v).with_context(ctx)?[..] {
                [a, b, c] => self.filters = (a, b, c),
                _ => bail!("{}: expected three widths C0,C1,C2", ctx()),
            },
            "stem" => self.stem = v.parse().with_context(ctx)?,
            "blocks" => self.blocks = v.parse().with_context(ctx)?,
            "mirror" => self.mirror = flag(v).with_context(ctx)?,
            "augment" => self.augment = flag(v).with_context(ctx)?,
            "lr" => self.lr = v.parse().with_context(ctx)?,
            "weight_decay" => self.weight_decay = v.parse().with_context(ctx)?,
            other => bail!("unknown setting {other:?}"),
        }
        Ok(())
    }

    /// Applies a line-based `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(k, v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.iters.unwrap_or_else(|| self.dataset.iterations())
    }

    pub fn crop_size(&self) -> usize {
        self.crop.unwrap_or_else(|| self.dataset.crop_size())
    }

    pub fn resolved_aux_positions(&self) -> Vec<usize> {
        if !self.aux {
            return Vec::new();
        }
        match &self.aux_positions {
            Some(p) => p.clone(),
            None => DEFAULT_AUX.into_iter().filter(|&p| p < self.blocks).collect(),
        }
    }

    pub fn model(&self) -> Result<DpnConfig> {
        let (c0, c1, c2) = self.filters;
        let cfg = DpnConfig {
            c0,
            c1,
            c2,
            stem_channels: self.stem,
            num_blocks: self.blocks,
            branches: self.branches,
            aux_losses: self.aux,
            aux_positions: self.resolved_aux_positions(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let root = self.data_root.clone().context("no dataset given: pass --data-root")?;
        Ok(DatasetSpec {
            kind: self.dataset,
            root,
            chase_split: self.chase_split,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.dpn"))
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// The effective settings in configuration-file syntax; feeding the output
/// back through `--config` reproduces the run.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        let (c0, c1, c2) = self.filters;
        let lines = [
            ("dataset", self.dataset.to_string()),
            ("data_root", path(&self.data_root)),
            ("chase_split", self.chase_split.to_string()),
            ("seed", self.seed.to_string()),
            ("iters", self.iterations().to_string()),
            ("crop", self.crop_size().to_string()),
            ("checkpoint", self.checkpoint_path().display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("resume", self.resume.to_string()),
            ("out", self.out.display().to_string()),
            ("threshold", self.threshold.map_or_else(|| "auto".into(), |t| t.to_string())),
            ("threads", self.threads.to_string()),
            ("eval_mode", self.eval_mode.to_string()),
            ("aux", self.aux.to_string()),
            ("aux_positions", join(&self.resolved_aux_positions())),
            ("branches", self.branches.to_string()),
            ("filters", format!("{c0},{c1},{c2}")),
            ("stem", self.stem.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mirror", self.mirror.to_string()),
            ("augment", self.augment.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
        ];
        for (i, (k, v)) in lines.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("dataset", "hrf").unwrap();
        c.set("filters", "8, 4, 4").unwrap();
        c.set("blocks", "3").unwrap();
        c.set("threshold", "0.4").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, format!("# echoed\n{c}\n")).unwrap();
        let mut d = RunConfig::default();
        d.apply_file(&p).unwrap();
        assert_eq!(d.to_string(), c.to_string());
        assert_eq!(d.iterations(), 70_000);
        assert_eq!(d.crop_size(), 588);
        assert_eq!(d.resolved_aux_positions(), vec![2]);
        d.model().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("filters", "16,8").is_err());
        assert!(c.set("branches", "os2").is_err());
        c.set("branches", "os1,os4").unwrap();
        assert!(c.model().is_err());
    }

    #[test]
    fn no_aux_leaves_one_head() {
        let mut c = RunConfig::default();
        c.set("aux", "false").unwrap();
        assert_eq!(c.model().unwrap().head_positions(), vec![8]);
    }
}
