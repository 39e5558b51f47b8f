//! The DP-Block, the full network built from it, and its bookkeeping.

mod checkpoint;

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use crate::autograd::{Eager, Graph, Param, Parameterized};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{crop, pad_to_multiple, Element, Tensor4};

/// Which resolution branches of a DP-Block are active. The full-resolution
/// branch is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub os2: bool,
    pub os4: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self { os2: true, os4: true }
    }
}

impl Branches {
    /// Parses a comma-separated subset of `os1,os2,os4`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut b = Branches { os2: false, os4: false };
        let mut os1 = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "os1" => os1 = true,
                "os2" => b.os2 = true,
                "os4" => b.os4 = true,
                other => return Err(Error::Config(format!("unknown branch {other:?}"))),
            }
        }
        if !os1 {
            return Err(Error::Config("branch os1 cannot be disabled".into()));
        }
        Ok(b)
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("os1")?;
        if self.os2 {
            f.write_str(",os2")?;
        }
        if self.os4 {
            f.write_str(",os4")?;
        }
        Ok(())
    }
}

/// Architecture knobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpnConfig {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub stem_channels: usize,
    pub num_blocks: usize,
    pub branches: Branches,
    pub aux_losses: bool,
    pub aux_positions: Vec<usize>,
}

impl Default for DpnConfig {
    fn default() -> Self {
        Self {
            c0: 16,
            c1: 8,
            c2: 8,
            stem_channels: 32,
            num_blocks: 8,
            branches: Branches::default(),
            aux_losses: true,
            aux_positions: vec![2, 4, 6],
        }
    }
}

impl DpnConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.c0 == 0 || self.stem_channels == 0 || self.num_blocks == 0 {
            return cfg("c0, stem_channels and num_blocks must be positive".into());
        }
        if self.branches.os2 && self.c1 == 0 {
            return cfg("c1 must be positive when os2 is enabled".into());
        }
        if self.branches.os4 && self.c2 == 0 {
            return cfg("c2 must be positive when os4 is enabled".into());
        }
        if self.branches.os4 && !self.branches.os2 {
            return cfg("os4 requires os2: the quarter-resolution branch is fused through the half-resolution one".into());
        }
        let mut prev = 0;
        for &p in &self.aux_positions {
            if p == 0 || p >= self.num_blocks {
                return cfg(format!("aux position {p} outside [1, {})", self.num_blocks));
            }
            if p <= prev {
                return cfg("aux positions must be strictly increasing".into());
            }
            prev = p;
        }
        Ok(())
    }

    /// Blocks after which a head is attached, in order. The last entry is
    /// always the final block.
    pub fn head_positions(&self) -> Vec<usize> {
        let mut v = if self.aux_losses {
            self.aux_positions.clone()
        } else {
            Vec::new()
        };
        v.push(self.num_blocks);
        v
    }

    /// Spatial dims must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        if self.branches.os4 {
            4
        } else if self.branches.os2 {
            2
        } else {
            1
        }
    }
}

/// A convolution's weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> ConvParams<T> {
    pub fn zeros(name: &str, cout: usize, cin: usize, k: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), [cout, cin, k, k]),
            bias: Param::zeros(format!("{name}.bias"), [cout, 1, 1, 1]),
        }
    }

    pub fn cout(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn cin(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn cast<U: Element>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn apply3_relu<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv3x3_relu(x, &w, &b)
    }

    fn apply1<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv1x1(x, &w, &b)
    }
}

/// The six convolutions of one DP-Block. Kernels belonging to disabled
/// branches are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct DpBlockParams<T = f32> {
    pub k1: ConvParams<T>,
    pub k2: Option<ConvParams<T>>,
    pub k3: Option<ConvParams<T>>,
    pub k4: Option<ConvParams<T>>,
    pub k5: Option<ConvParams<T>>,
    pub k6: ConvParams<T>,
}

impl<T: Element> DpBlockParams<T> {
    pub fn zeros(prefix: &str, cin: usize, cfg: &DpnConfig) -> Self {
        let (c0, c1, c2) = (cfg.c0, cfg.c1, cfg.c2);
        let b = cfg.branches;
        let k = |j: usize, cout, cin| ConvParams::zeros(&format!("{prefix}.k{j}"), cout, cin, 3);
        Self {
            k1: k(1, c0, cin),
            k2: b.os2.then(|| k(2, c1, cin)),
            k3: b.os4.then(|| k(3, c2, cin)),
            k4: b.os2.then(|| k(4, c1, if b.os4 { c1 + c2 } else { c1 })),
            k5: b.os2.then(|| k(5, c0, c0 + c1)),
            k6: k(6, c0, c0 + cin),
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvParams<T>> {
        [Some(&self.k1), self.k2.as_ref(), self.k3.as_ref(), self.k4.as_ref(), self.k5.as_ref(), Some(&self.k6)]
            .into_iter()
            .flatten()
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvParams<T>> {
        [Some(&mut self.k1), self.k2.as_mut(), self.k3.as_mut(), self.k4.as_mut(), self.k5.as_mut(), Some(&mut self.k6)]
            .into_iter()
            .flatten()
    }

    pub fn cin(&self) -> usize {
        self.k1.cin()
    }

    pub fn numel(&self) -> usize {
        self.convs().map(ConvParams::numel).sum()
    }

    fn cast<U: Element>(&self) -> DpBlockParams<U> {
        DpBlockParams {
            k1: self.k1.cast(),
            k2: self.k2.as_ref().map(ConvParams::cast),
            k3: self.k3.as_ref().map(ConvParams::cast),
            k4: self.k4.as_ref().map(ConvParams::cast),
            k5: self.k5.as_ref().map(ConvParams::cast),
            k6: self.k6.cast(),
        }
    }
}

/// One DP-Block:
///
/// ```text
/// x1 = δ(k1 * X)
/// x2 = δ(k2 * maxpool(X, 2))
/// x3 = δ(k3 * maxpool(X, 4))
/// x4 = δ(k4 * concat(x2, up(x3)))
/// x5 = δ(k5 * concat(x1, up(x4)))
/// Y  = δ(k6 * concat(x5, X))
/// ```
///
/// Without the quarter-resolution branch `x4 = δ(k4 * x2)`; with only the
/// full-resolution branch `x5 = x1`.
pub fn dp_block_forward<T: Element, G: Graph<T>>(g: &mut G, x: &G::Value, p: &DpBlockParams<T>) -> Result<G::Value> {
    let [_, c, h, w] = g.dims(x)?;
    if c != p.cin() {
        return Err(shape_err("dp_block", format!("input has {c} channels, block expects {}", p.cin())));
    }
    let m = if p.k3.is_some() { 4 } else if p.k2.is_some() { 2 } else { 1 };
    if h % m != 0 || w % m != 0 {
        return Err(shape_err("dp_block", format!("spatial dims {h}x{w} not divisible by {m}")));
    }
    let x1 = p.k1.apply3_relu(g, x)?;
    let x5 = match (&p.k2, &p.k4, &p.k5) {
        (Some(k2), Some(k4), Some(k5)) => {
            let x2 = g.maxpool(x, 2)?;
            let x2 = k2.apply3_relu(g, &x2)?;
            let x4_in = match &p.k3 {
                Some(k3) => {
                    let x3 = g.maxpool(x, 4)?;
                    let x3 = k3.apply3_relu(g, &x3)?;
                    let up = g.upsample2x(&x3)?;
                    g.concat(&x2, &up)?
                }
                None => x2,
            };
            let x4 = k4.apply3_relu(g, &x4_in)?;
            let up = g.upsample2x(&x4)?;
            let cat = g.concat(&x1, &up)?;
            k5.apply3_relu(g, &cat)?
        }
        _ => x1,
    };
    let cat = g.concat(&x5, x)?;
    p.k6.apply3_relu(g, &cat)
}

/// Per-group parameter counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamTable {
    pub fn get(&self, group: &str) -> Option<usize> {
        self.rows.iter().find(|(g, _)| g == group).map(|&(_, n)| n)
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n) in &self.rows {
            writeln!(f, "{g:<10} {n:>9}")?;
        }
        if let (Some(s), Some(b1)) = (self.get("stem"), self.get("block1")) {
            writeln!(f, "{:<10} {:>9}", "stem+b1", s + b1)?;
        }
        write!(f, "{:<10} {:>9}", "total", self.total)
    }
}

/// Stem convolution, stacked DP-Blocks and 1x1 heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DpnModel<T = f32> {
    pub config: DpnConfig,
    pub stem: ConvParams<T>,
    pub blocks: Vec<DpBlockParams<T>>,
    /// `(block position, head)` pairs in forward order.
    pub heads: Vec<(usize, ConvParams<T>)>,
}

impl<T: Element> DpnModel<T> {
    /// A model with every parameter zero.
    pub fn zeros(config: DpnConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvParams::zeros("stem", config.stem_channels, 3, 3);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let cin = if i == 0 { config.stem_channels } else { config.c0 };
                DpBlockParams::zeros(&format!("block{}", i + 1), cin, &config)
            })
            .collect();
        let heads = config
            .head_positions()
            .into_iter()
            .map(|pos| (pos, ConvParams::zeros(&format!("head{pos}"), 1, config.c0, 1)))
            .collect();
        Ok(Self {
            config,
            stem,
            blocks,
            heads,
        })
    }

    /// Xavier-uniform weights and zero biases, deterministic in `seed`.
    pub fn new(config: DpnConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        m.init_xavier(seed);
        Ok(m)
    }

    fn convs(&self) -> impl Iterator<Item = &ConvParams<T>> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| b.convs()))
            .chain(self.heads.iter().map(|(_, h)| h))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvParams<T>> {
        std::iter::once(&mut self.stem)
            .chain(self.blocks.iter_mut().flat_map(|b| b.convs_mut()))
            .chain(self.heads.iter_mut().map(|(_, h)| h))
    }

    /// Draws each weight uniformly from `±sqrt(6 / (fan_in + fan_out))` with
    /// fans counted as kernel area times channels. Biases are set to zero.
    pub fn init_xavier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in self.convs_mut() {
            let bound = xavier_bound(c.weight.value.dims());
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in c.weight.value.data_mut() {
                *v = T::from_f64(dist.sample(&mut rng));
            }
            c.bias.value.fill(T::zero());
        }
    }

    pub fn count_parameters(&self) -> ParamTable {
        let mut rows = vec![("stem".to_string(), self.stem.numel())];
        for (i, b) in self.blocks.iter().enumerate() {
            rows.push((format!("block{}", i + 1), b.numel()));
        }
        rows.push(("heads".to_string(), self.heads.iter().map(|(_, h)| h.numel()).sum()));
        let total = rows.iter().map(|(_, n)| n).sum();
        ParamTable { rows, total }
    }

    /// Stage 0 is the stem with its ReLU; stage `i >= 1` is block `i`.
    pub fn stage<G: Graph<T>>(&self, g: &mut G, i: usize, x: &G::Value) -> Result<G::Value> {
        match i {
            0 => self.stem.apply3_relu(g, x),
            i if i <= self.blocks.len() => dp_block_forward(g, x, &self.blocks[i - 1]),
            i => Err(Error::Config(format!("stage {i} out of range"))),
        }
    }

    /// Logits of head `k` (in head order) from the output of its block.
    pub fn head<G: Graph<T>>(&self, g: &mut G, k: usize, x: &G::Value) -> Result<G::Value> {
        self.heads[k].1.apply1(g, x)
    }

    /// Runs the stem and every block on an already padded `1x3xHxW` input.
    /// Returns one logit map per head in head order; with `all_heads` false
    /// only the final head is evaluated.
    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value, all_heads: bool) -> Result<Vec<G::Value>> {
        let [_, c, h, w] = g.dims(x)?;
        if c != 3 {
            return Err(shape_err("dpn_forward", format!("expected 3 input channels, got {c}")));
        }
        let m = self.config.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err("dpn_forward", format!("spatial dims {h}x{w} not divisible by {m}")));
        }
        let mut cur = self.stage(g, 0, x)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for i in 1..=self.blocks.len() {
            cur = self.stage(g, i, &cur)?;
            for (k, (pos, _)) in self.heads.iter().enumerate() {
                if *pos == i && (all_heads || i == self.blocks.len()) {
                    outs.push(self.head(g, k, &cur)?);
                }
            }
        }
        Ok(outs)
    }

    /// Final-head logits for an arbitrary-size image: pads to the required
    /// multiple, evaluates eagerly, and crops back.
    pub fn predict_logits(&self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (padded, (h, w)) = pad_to_multiple(image, self.config.required_multiple())?;
        let mut outs = self.forward(&mut Eager, &padded, false)?;
        let logits = outs.pop().expect("final head");
        crop(&logits, h, w)
    }

    pub fn cast<U: Element>(&self) -> DpnModel<U> {
        DpnModel {
            config: self.config.clone(),
            stem: self.stem.cast(),
            blocks: self.blocks.iter().map(DpBlockParams::cast).collect(),
            heads: self.heads.iter().map(|(p, h)| (*p, h.cast())).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn xavier_bound(dims: [usize; 4]) -> f64 {
    let [cout, cin, kh, kw] = dims;
    let area = kh * kw;
    (6.0 / (area * cin + area * cout) as f64).sqrt()
}

impl<T: Element> Parameterized<T> for DpnModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.convs().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let m = DpnModel::<f32>::zeros(DpnConfig::default()).unwrap();
        let t = m.count_parameters();
        assert_eq!(t.get("stem"), Some(896));
        assert_eq!(t.get("block1"), Some(20_808));
        for i in 2..=8 {
            assert_eq!(t.get(&format!("block{i}")), Some(13_896));
        }
        assert_eq!(t.get("heads"), Some(68));
        assert_eq!(t.total, 119_044);
        assert_eq!(m.params().iter().map(|p| p.numel()).sum::<usize>(), t.total);
    }

    #[test]
    fn config_rules() {
        let mut c = DpnConfig::default();
        c.branches = Branches { os2: false, os4: true };
        assert!(c.validate().is_err());
        let mut c = DpnConfig::default();
        c.aux_positions = vec![2, 8];
        assert!(c.validate().is_err());
        assert!(Branches::parse("os2,os4").is_err());
        assert_eq!(Branches::parse("os1,os2").unwrap(), Branches { os2: true, os4: false });
        assert_eq!(Branches::parse("os1,os2,os4").unwrap().to_string(), "os1,os2,os4");
    }

    #[test]
    fn heads_follow_config() {
        let m = DpnModel::<f32>::zeros(DpnConfig::default()).unwrap();
        assert_eq!(m.heads.iter().map(|h| h.0).collect::<Vec<_>>(), [2, 4, 6, 8]);
        let m = DpnModel::<f32>::zeros(DpnConfig {
            aux_losses: false,
            ..DpnConfig::default()
        })
        .unwrap();
        assert_eq!(m.heads.len(), 1);
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = DpnModel::<f32>::new(DpnConfig::default(), 7).unwrap();
        let b = DpnModel::<f32>::new(DpnConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let k2 = &a.blocks[1].k2.as_ref().unwrap().weight;
        let bound = (6.0f64 / 216.0).sqrt();
        assert!((xavier_bound(k2.value.dims()) - bound).abs() < 1e-15);
        assert!(k2.value.data().iter().all(|&v| (v as f64).abs() <= bound));
        for p in a.params() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        let c = DpnModel::<f32>::new(DpnConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weight_block_passes_bias() {
        let cfg = DpnConfig::default();
        let mut p = DpBlockParams::<f64>::zeros("b", 32, &cfg);
        for c in p.convs_mut() {
            c.bias.value = Tensor4::from_fn(c.bias.value.dims(), |[o, ..]| 0.1 + o as f64 * 0.01);
        }
        let x = Tensor4::from_fn([1, 32, 8, 8], |[_, c, y, x]| (c + y + x) as f64 * 0.1);
        let y = dp_block_forward(&mut Eager, &x, &p).unwrap();
        assert_eq!(y.dims(), [1, 16, 8, 8]);
        for c in 0..16 {
            assert!(y.plane(0, c).iter().all(|&v| v == 0.1 + c as f64 * 0.01));
        }
    }

    #[test]
    fn block_rejects_indivisible_input() {
        let p = DpBlockParams::<f32>::zeros("b", 16, &DpnConfig::default());
        let x = Tensor4::zeros([1, 16, 6, 8]);
        assert!(dp_block_forward(&mut Eager, &x, &p).is_err());
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let m = DpnModel::<f32>::zeros(DpnConfig::default()).unwrap();
        assert!(m.forward(&mut Eager, &Tensor4::zeros([1, 1, 8, 8]), true).is_err());
    }
}
