use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Tape, Var};
use crate::error::{Error, Result};

/// Anything that owns a fixed, ordered set of parameters.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
}

impl<T> Parameterized<T> for Vec<Param<T>> {
    fn params(&self) -> Vec<&Param<T>> {
        self.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.iter_mut().collect()
    }
}

/// A loss value together with the fingerprint of the smooth piece it was
/// evaluated on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub signature: u64,
}

/// The function under test.
///
/// `record` builds the whole graph on a fresh tape, registering parameters
/// through [`Tape::param_leaf`]. `probe` evaluates the loss after parameter
/// `param` has been perturbed; the default re-records the tape, and
/// implementations may override it to reuse work that does not depend on
/// that parameter. Any closure `FnMut(&mut Tape<f64>, &M) -> Result<Var>` is
/// a `LossProbe`.
pub trait LossProbe<M> {
    fn record(&mut self, tape: &mut Tape<f64>, model: &M) -> Result<Var>;

    fn probe(&mut self, model: &M, _param: usize) -> Result<Probe> {
        let mut tape = Tape::new();
        let l = self.record(&mut tape, model)?;
        let v = tape.value(l)?;
        let loss = v.item().ok_or(Error::NotScalar(v.dims()))?;
        Ok(Probe {
            loss,
            signature: tape.kink_signature(),
        })
    }
}

impl<M, F> LossProbe<M> for F
where
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    fn record(&mut self, tape: &mut Tape<f64>, model: &M) -> Result<Var> {
        self(tape, model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked fully.
    pub samples: usize,
    pub seed: u64,
    /// How many times the step may be divided by ten when a perturbation
    /// crosses a ReLU or pooling kink.
    pub refinements: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 50,
            seed: 0,
            refinements: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Coordinates whose first step crossed a kink and were re-measured with
    /// a smaller step.
    pub refined: usize,
    /// Coordinates whose both sides still crossed a kink at the smallest step.
    pub unresolved: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_abs(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn refined(&self) -> usize {
        self.params.iter().map(|p| p.refined).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs() <= tol
    }
}

fn finite(p: Probe) -> Result<Probe> {
    if p.loss.is_finite() {
        Ok(p)
    } else {
        Err(Error::NonFinite("gradient-check loss".into()))
    }
}

/// Compares the tape's analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h` at randomly sampled coordinates of every
/// parameter.
///
/// A central difference is only a valid oracle when `p-h`, `p` and `p+h` lie
/// on the same smooth piece of a piecewise-smooth loss. When either side's
/// kink signature differs from the base point the coordinate is re-measured
/// with a step ten times smaller, up to `refinements` times. If one side
/// still crosses at the smallest step, the one-sided difference on the
/// smooth side is used instead.
pub fn grad_check<M, L>(model: &mut M, cfg: &GradCheckConfig, mut lp: L) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    L: LossProbe<M>,
{
    let mut tape = Tape::new();
    let l = lp.record(&mut tape, model)?;
    let lv = tape.value(l)?;
    let base = lv.item().ok_or(Error::NotScalar(lv.dims()))?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let grads = tape.backward(l)?;
    let analytic: Vec<Option<Vec<f64>>> = model
        .params()
        .iter()
        .map(|p| grads.param(&p.name).map(|g| g.data().to_vec()))
        .collect();
    drop(grads);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        loss: base,
        params: Vec::new(),
    };
    for (pi, an_grad) in analytic.iter().enumerate() {
        let (name, len) = {
            let ps = model.params();
            (ps[pi].name.clone(), ps[pi].numel())
        };
        let coords: Vec<usize> = if len <= cfg.samples {
            (0..len).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, len, cfg.samples).into_vec();
            c.sort_unstable();
            c
        };
        let mut pc = ParamCheck {
            name,
            checked: coords.len(),
            max_abs: 0.0,
            max_rel: 0.0,
            refined: 0,
            unresolved: 0,
        };
        if coords.is_empty() {
            report.params.push(pc);
            continue;
        }
        let centre = finite(lp.probe(model, pi)?)?;
        for &k in &coords {
            let orig = model.params()[pi].value.data()[k];
            let mut h = cfg.step;
            let mut attempt = 0;
            let numeric = loop {
                model.params_mut()[pi].value.data_mut()[k] = orig + h;
                let fp = lp.probe(model, pi).and_then(finite);
                model.params_mut()[pi].value.data_mut()[k] = orig - h;
                let fm = lp.probe(model, pi).and_then(finite);
                model.params_mut()[pi].value.data_mut()[k] = orig;
                let (fp, fm) = (fp?, fm?);
                let (up, down) = (fp.signature == centre.signature, fm.signature == centre.signature);
                if (up && down) || attempt == cfg.refinements {
                    if attempt > 0 {
                        pc.refined += 1;
                    }
                    break match (up, down) {
                        (true, false) => (fp.loss - centre.loss) / h,
                        (false, true) => (centre.loss - fm.loss) / h,
                        (false, false) => {
                            pc.unresolved += 1;
                            (fp.loss - fm.loss) / (2.0 * h)
                        }
                        (true, true) => (fp.loss - fm.loss) / (2.0 * h),
                    };
                }
                attempt += 1;
                h /= 10.0;
            };
            // a parameter the loss never touched has a zero gradient
            let an = an_grad.as_ref().map_or(0.0, |g| g[k]);
            let abs = (numeric - an).abs();
            let scale = numeric.abs().max(an.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            pc.max_abs = pc.max_abs.max(abs);
            pc.max_rel = pc.max_rel.max(rel);
        }
        report.params.push(pc);
    }
    Ok(report)
}
