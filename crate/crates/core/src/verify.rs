//! Finite-difference checks of every differentiable operation and of the
//! full network objective, runnable from tests and from the command line.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{
    grad_check, Eager, GradCheckConfig, GradCheckReport, Graph, LossProbe, Param, Parameterized, Probe, Tape, Traced, Var,
};
use crate::error::Result;
use crate::loss::{balance_weight, class_balanced_bce_logits, total_objective};
use crate::model::{dp_block_forward, ConvParams, DpBlockParams, DpnConfig, DpnModel};
use crate::tensor::{Element, Tensor4};

/// Tolerance for single operations.
pub const KERNEL_TOL: f64 = 1e-4;
/// Tolerance for the whole network.
pub const NETWORK_TOL: f64 = 1e-3;

/// One named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    let d = Uniform::new(lo, hi);
    Tensor4::from_fn(dims, |_| d.sample(rng))
}

fn binary(rng: &mut ChaCha8Rng, dims: [usize; 4], p: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

type Builder = fn(&mut Tape<f64>, &[Var], &Tensor4<f64>) -> Result<Var>;

struct KernelCase {
    name: &'static str,
    params: Vec<(&'static str, [usize; 4])>,
    build: Builder,
}

const X: [usize; 4] = [1, 2, 8, 8];

fn weighted_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor4<f64>) -> Result<Var> {
    // crop the fixed random weights to the output's shape
    let d = tape.value(y)?.dims();
    let rv = Tensor4::from_fn(d, |[n, c, h, w]| r.at(n, c % r.channels(), h % r.height(), w % r.width()));
    let rv = tape.leaf(rv, false);
    let m = tape.mul(y, rv)?;
    tape.sum(m)
}

fn kernel_cases() -> Vec<KernelCase> {
    vec![
        KernelCase {
            name: "conv3x3",
            params: vec![("x", X), ("w", [3, 2, 3, 3]), ("b", [3, 1, 1, 1])],
            build: |t, p, r| {
                let y = t.conv3x3(&p[0], &p[1], &p[2])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "conv1x1",
            params: vec![("x", X), ("w", [3, 2, 1, 1]), ("b", [3, 1, 1, 1])],
            build: |t, p, r| {
                let y = t.conv1x1(&p[0], &p[1], &p[2])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "maxpool2",
            params: vec![("x", X)],
            build: |t, p, r| {
                let y = t.maxpool(&p[0], 2)?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "maxpool4",
            params: vec![("x", X)],
            build: |t, p, r| {
                let y = t.maxpool(&p[0], 4)?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "upsample2x",
            params: vec![("x", X)],
            build: |t, p, r| {
                let y = t.upsample2x(&p[0])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "concat",
            params: vec![("a", X), ("b", [1, 3, 8, 8])],
            build: |t, p, r| {
                let y = t.concat(&p[0], &p[1])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "relu",
            params: vec![("x", X)],
            build: |t, p, r| {
                let y = Graph::relu(t, &p[0])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "sigmoid",
            params: vec![("x", X)],
            build: |t, p, r| {
                let y = t.sigmoid(p[0])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "add",
            params: vec![("a", X), ("b", X)],
            build: |t, p, r| {
                let y = t.add(p[0], p[1])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "mul",
            params: vec![("a", X), ("b", X)],
            build: |t, p, r| {
                let y = t.mul(p[0], p[1])?;
                weighted_sum(t, y, r)
            },
        },
        KernelCase {
            name: "sum",
            params: vec![("x", X)],
            build: |t, p, _| {
                let s = t.sum(p[0])?;
                t.mul(s, s)
            },
        },
        KernelCase {
            name: "balanced_bce",
            params: vec![("z", [1, 1, 8, 8])],
            build: |t, p, r| {
                let y = r.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let y = Tensor4::from_fn([1, 1, 8, 8], |[_, _, h, w]| y.at(0, 0, h, w));
                let beta = balance_weight(&y)?.beta;
                let y = t.leaf(y, false);
                t.balanced_bce(p[0], y, beta)
            },
        },
    ]
}

/// Names of the single-operation checks, in run order.
pub fn kernel_names() -> Vec<&'static str> {
    kernel_cases().iter().map(|c| c.name).collect()
}

/// Checks every operation with random `1x2x8x8` inputs.
pub fn check_kernels(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (ci, case) in kernel_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(ci as u64));
        let mut params: Vec<Param<f64>> = case
            .params
            .iter()
            .map(|&(n, d)| Param::new(n, uniform(&mut rng, d, -1.0, 1.0)))
            .collect();
        let r = uniform(&mut rng, [1, 4, 8, 8], -1.0, 1.0);
        let build = case.build;
        let cfg = GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&mut params, &cfg, |tape: &mut Tape<f64>, ps: &Vec<Param<f64>>| {
            let vars: Vec<Var> = ps.iter().map(|p| tape.param_leaf(p)).collect();
            build(tape, &vars, &r)
        })?;
        out.push(CheckOutcome {
            name: case.name.to_string(),
            seed,
            tol: KERNEL_TOL,
            report,
        });
    }
    Ok(out)
}

/// Finite-difference evaluator for the network that caches every stage
/// output of the unperturbed model, so perturbing a parameter only
/// recomputes the stages downstream of it.
struct NetworkProbe {
    image: Tensor4<f64>,
    label: Tensor4<f64>,
    beta: f64,
    stages: Vec<Tensor4<f64>>,
    first_stage: Vec<usize>,
}

impl NetworkProbe {
    fn losses(&self, model: &DpnModel<f64>, outs: &[&Tensor4<f64>]) -> Result<f64> {
        // summed in head order, exactly as the recorded objective does
        let mut total: Option<f64> = None;
        for (k, (pos, _)) in model.heads.iter().enumerate() {
            let z = model.head(&mut Eager, k, outs[*pos])?;
            let l = class_balanced_bce_logits(&z, &self.label, self.beta)?;
            total = Some(total.map_or(l, |t| t + l));
        }
        Ok(total.unwrap_or(0.0))
    }
}

impl LossProbe<DpnModel<f64>> for NetworkProbe {
    fn record(&mut self, tape: &mut Tape<f64>, model: &DpnModel<f64>) -> Result<Var> {
        // cache the unperturbed stage outputs on first use
        if self.stages.is_empty() {
            let mut x = self.image.clone();
            for i in 0..=model.blocks.len() {
                x = model.stage(&mut Eager, i, &x)?;
                self.stages.push(x.clone());
            }
            self.first_stage = model
                .params()
                .iter()
                .map(|p| stage_of(&p.name, model.blocks.len()))
                .collect();
        }
        let x = tape.input(self.image.clone());
        let outs = model.forward(tape, &x, true)?;
        Ok(total_objective(tape, &outs, &self.label, model.heads.len())?.0)
    }

    fn probe(&mut self, model: &DpnModel<f64>, param: usize) -> Result<Probe> {
        let s = self.first_stage[param];
        let mut tr = Traced::new();
        let mut fresh: Vec<Tensor4<f64>> = Vec::new();
        for i in s..self.stages.len() {
            let x = if i == 0 { &self.image } else { fresh.last().unwrap_or(&self.stages[i - 1]) };
            let y = model.stage(&mut tr, i, x)?;
            fresh.push(y);
        }
        let outs: Vec<&Tensor4<f64>> = (0..self.stages.len())
            .map(|i| if i >= s { &fresh[i - s] } else { &self.stages[i] })
            .collect();
        Ok(Probe {
            loss: self.losses(model, &outs)?,
            signature: tr.signature(),
        })
    }
}

/// First stage whose output depends on the named parameter.
fn stage_of(name: &str, blocks: usize) -> usize {
    let prefix = name.split('.').next().unwrap_or("");
    if prefix == "stem" {
        0
    } else if let Some(i) = prefix.strip_prefix("block").and_then(|i| i.parse().ok()) {
        i
    } else {
        blocks + 1
    }
}

/// Checks the summed multi-head objective of a full network on a random
/// `1x3xSxS` image with random biases, so every ReLU sees both signs.
pub fn check_network(seed: u64, size: usize, config: DpnConfig, samples: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut model = DpnModel::<f64>::new(config, seed)?;
    let bias = Uniform::new(-0.05, 0.05);
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = bias.sample(&mut rng);
            }
        }
    }
    let image = uniform(&mut rng, [1, 3, size, size], 0.0, 1.0);
    let label = binary(&mut rng, [1, 1, size, size], 0.2);
    let beta = balance_weight(&label)?.beta;
    let cfg = GradCheckConfig {
        seed,
        samples,
        ..GradCheckConfig::default()
    };
    let probe = NetworkProbe {
        image,
        label,
        beta,
        stages: Vec::new(),
        first_stage: Vec::new(),
    };
    let report = grad_check(&mut model, &cfg, probe)?;
    Ok(CheckOutcome {
        name: "network".to_string(),
        seed,
        tol: NETWORK_TOL,
        report,
    })
}

/// Reference DP-Block built from plain loops, sharing no code with the
/// tensor kernels. Works in f64 whatever the parameter precision.
pub fn reference_dp_block<T: Element>(x: &Tensor4<T>, p: &DpBlockParams<T>) -> Tensor4<f64> {
    let x = x.cast::<f64>();
    let x1 = ref_relu(&ref_conv3(&x, &p.k1));
    let x5 = match (&p.k2, &p.k4, &p.k5) {
        (Some(k2), Some(k4), Some(k5)) => {
            let x2 = ref_relu(&ref_conv3(&ref_maxpool(&x, 2), k2));
            let x4_in = match &p.k3 {
                Some(k3) => {
                    let x3 = ref_relu(&ref_conv3(&ref_maxpool(&x, 4), k3));
                    ref_concat(&x2, &ref_upsample(&x3))
                }
                None => x2,
            };
            let x4 = ref_relu(&ref_conv3(&x4_in, k4));
            ref_relu(&ref_conv3(&ref_concat(&x1, &ref_upsample(&x4)), k5))
        }
        _ => x1,
    };
    ref_relu(&ref_conv3(&ref_concat(&x5, &x), &p.k6))
}

fn ref_conv3<T: Element>(x: &Tensor4<f64>, k: &ConvParams<T>) -> Tensor4<f64> {
    let [_, cin, h, w] = x.dims();
    let cout = k.cout();
    let wt = k.weight.value.cast::<f64>();
    let b = k.bias.value.cast::<f64>();
    let mut y = Tensor4::zeros([1, cout, h, w]);
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (sr, sc) = (r as i64 + dr as i64 - 1, c as i64 + dc as i64 - 1);
                            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                acc += wt.at(o, i, dr, dc) * x.at(0, i, sr as usize, sc as usize);
                            }
                        }
                    }
                }
                y.set(0, o, r, c, acc);
            }
        }
    }
    y
}

fn ref_relu(x: &Tensor4<f64>) -> Tensor4<f64> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn ref_maxpool(x: &Tensor4<f64>, k: usize) -> Tensor4<f64> {
    let [_, c, h, w] = x.dims();
    Tensor4::from_fn([1, c, h / k, w / k], |[_, ch, r, col]| {
        let mut m = f64::NEG_INFINITY;
        for dr in 0..k {
            for dc in 0..k {
                m = m.max(x.at(0, ch, r * k + dr, col * k + dc));
            }
        }
        m
    })
}

/// Transposed convolution, stride 2, padding 1, with the fixed 4x4 bilinear
/// kernel, written as a scatter from each input pixel.
fn ref_upsample(x: &Tensor4<f64>) -> Tensor4<f64> {
    const F: [f64; 4] = [0.25, 0.75, 0.75, 0.25];
    let [_, c, h, w] = x.dims();
    let mut y = Tensor4::zeros([1, c, 2 * h, 2 * w]);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                for (kr, fr) in F.iter().enumerate() {
                    for (kc, fc) in F.iter().enumerate() {
                        let (orow, ocol) = (2 * r as i64 + kr as i64 - 1, 2 * col as i64 + kc as i64 - 1);
                        if orow >= 0 && ocol >= 0 && (orow as usize) < 2 * h && (ocol as usize) < 2 * w {
                            let (orow, ocol) = (orow as usize, ocol as usize);
                            let v = y.at(0, ch, orow, ocol) + fr * fc * x.at(0, ch, r, col);
                            y.set(0, ch, orow, ocol, v);
                        }
                    }
                }
            }
        }
    }
    y
}

fn ref_concat(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    let [_, ca, h, w] = a.dims();
    let cb = b.channels();
    Tensor4::from_fn([1, ca + cb, h, w], |[_, c, r, col]| {
        if c < ca {
            a.at(0, c, r, col)
        } else {
            b.at(0, c - ca, r, col)
        }
    })
}

/// Largest absolute difference between the production f32 DP-Block and
/// [`reference_dp_block`] for one random parameterization: Xavier weights,
/// biases in `±0.1`, an input in `[0, 1)` of `height x width` pixels, and a
/// 32- or 16-channel input as for the first or a later block.
pub fn block_fidelity(seed: u64, height: usize, width: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = DpnConfig::default();
    let cin = if rng.gen_bool(0.5) { config.stem_channels } else { config.c0 };
    let mut p = DpBlockParams::<f32>::zeros("b", cin, &config);
    let bias = Uniform::new(-0.1f32, 0.1);
    for k in [Some(&mut p.k1), p.k2.as_mut(), p.k3.as_mut(), p.k4.as_mut(), p.k5.as_mut(), Some(&mut p.k6)]
        .into_iter()
        .flatten()
    {
        let bound = crate::model::xavier_bound(k.weight.value.dims()) as f32;
        let d = Uniform::new_inclusive(-bound, bound);
        for v in k.weight.value.data_mut() {
            *v = d.sample(&mut rng);
        }
        for v in k.bias.value.data_mut() {
            *v = bias.sample(&mut rng);
        }
    }
    let d = Uniform::new(0.0f32, 1.0);
    let x = Tensor4::from_fn([1, cin, height, width], |_| d.sample(&mut rng));
    let fast = dp_block_forward(&mut Eager, &x, &p)?;
    let slow = reference_dp_block(&x, &p);
    Ok(fast
        .data()
        .iter()
        .zip(slow.data())
        .map(|(&a, &b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max))
}

/// Width in pixels of the input region that influences the centre output of
/// a `blocks`-block network on a `size x size` input: the column extent of
/// the nonzero entries of the input gradient.
pub fn receptive_field_width(blocks: usize, size: usize, seed: u64) -> Result<usize> {
    let config = DpnConfig {
        num_blocks: blocks,
        aux_losses: false,
        aux_positions: Vec::new(),
        ..DpnConfig::default()
    };
    let mut model = DpnModel::<f64>::new(config, seed)?;
    // small positive biases keep most units active
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            p.value.fill(0.01);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let image = uniform(&mut rng, [1, 3, size, size], 0.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(image, true);
    let out = model.forward(&mut tape, &x, false)?.pop().expect("final head");
    let c = size / 2;
    let pick = Tensor4::from_fn([1, 1, size, size], |[_, _, r, col]| if r == c && col == c { 1.0 } else { 0.0 });
    let pick = tape.leaf(pick, false);
    let centre = tape.mul(out, pick)?;
    let loss = tape.sum(centre)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(x).expect("input gradient");
    let cols: Vec<usize> = (0..size)
        .filter(|&col| (0..3).any(|ch| (0..size).any(|r| g.at(0, ch, r, col) != 0.0)))
        .collect();
    Ok(match (cols.first(), cols.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    })
}
