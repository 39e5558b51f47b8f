//! Class-balanced cross-entropy with deep supervision.

use crate::autograd::{Param, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor4};

/// Pixel counts behind the balance weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Balance {
    /// Weight of the vessel term, `N- / (N+ + N-)`.
    pub beta: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// Computes β from a binary label map. Values above 0.5 count as vessel.
pub fn balance_weight<T: Element>(label: &Tensor4<T>) -> Result<Balance> {
    if label.is_empty() {
        return Err(Error::Data("balance weight of an empty label map".into()));
    }
    let half = T::from_f64(0.5);
    let positives = label.data().iter().filter(|&&v| v > half).count() as u64;
    let negatives = label.len() as u64 - positives;
    if positives == 0 {
        log::warn!("label crop has no vessel pixels; beta = 1 removes the background term");
    }
    Ok(Balance {
        beta: negatives as f64 / (positives + negatives) as f64,
        positives,
        negatives,
    })
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_dims<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(
            "class_balanced_bce",
            format!("prediction {:?} vs label {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `-β Σ_{y=1} log p - (1-β) Σ_{y=0} log(1-p)` evaluated directly on
/// probabilities. Accumulates in f64.
pub fn class_balanced_bce<T: Element>(prob: &Tensor4<T>, label: &Tensor4<T>, beta: f64) -> Result<f64> {
    check_dims(prob, label)?;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (&p, &y) in prob.data().iter().zip(label.data()) {
        let p = p.to_f64();
        if y.to_f64() > 0.5 {
            pos -= p.ln();
        } else {
            neg -= (1.0 - p).ln();
        }
    }
    Ok(beta * pos + (1.0 - beta) * neg)
}

/// The same loss on logits, using `-log σ(z) = softplus(-z)` and
/// `-log(1-σ(z)) = softplus(z)` so saturated logits stay finite.
pub fn class_balanced_bce_logits<T: Element>(logits: &Tensor4<T>, label: &Tensor4<T>, beta: T) -> Result<T> {
    check_dims(logits, label)?;
    let beta = beta.to_f64();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (&z, &y) in logits.data().iter().zip(label.data()) {
        let z = z.to_f64();
        if y.to_f64() > 0.5 {
            pos += softplus(-z);
        } else {
            neg += softplus(z);
        }
    }
    Ok(T::from_f64(beta * pos + (1.0 - beta) * neg))
}

/// Derivative of [`class_balanced_bce_logits`] with respect to each logit:
/// `β(σ-1)` on vessel pixels and `(1-β)σ` elsewhere.
pub fn class_balanced_bce_logits_grad<T: Element>(
    logits: &Tensor4<T>,
    label: &Tensor4<T>,
    beta: T,
) -> Result<Tensor4<T>> {
    check_dims(logits, label)?;
    let half = T::from_f64(0.5);
    let one = T::one();
    let data = logits
        .data()
        .iter()
        .zip(label.data())
        .map(|(&z, &y)| {
            let s = crate::tensor::sigmoid_scalar(z);
            if y > half {
                beta * (s - one)
            } else {
                (one - beta) * s
            }
        })
        .collect();
    Tensor4::from_vec(logits.dims(), data)
}

/// Per-iteration objective breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub head_losses: Vec<f64>,
    /// Sum of the head losses; this is what gets differentiated.
    pub total: f64,
    /// `(λ/2)·Σ‖θ‖²`, bookkeeping only. The decay itself is applied inside the
    /// optimizer update.
    pub decay: f64,
    pub beta: f64,
    pub positives: u64,
    pub negatives: u64,
}

impl LossReport {
    /// Fills in the weight-decay bookkeeping term.
    pub fn with_decay<'a, T: Element>(mut self, lambda: f64, params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let sq: f64 = params
            .into_iter()
            .map(|p| p.value.data().iter().map(|&v| Element::to_f64(v) * Element::to_f64(v)).sum::<f64>())
            .sum();
        self.decay = 0.5 * lambda * sq;
        self
    }

    /// Head losses plus the decay term.
    pub fn objective(&self) -> f64 {
        self.total + self.decay
    }
}

/// Records the summed class-balanced loss over every head with a single β
/// computed from `label`. Returns the scalar loss value and its breakdown.
pub fn total_objective<T: Element>(
    tape: &mut Tape<T>,
    heads: &[Var],
    label: &Tensor4<T>,
    expected_heads: usize,
) -> Result<(Var, LossReport)> {
    if heads.len() != expected_heads || heads.is_empty() {
        return Err(Error::Config(format!(
            "expected {expected_heads} head outputs, got {}",
            heads.len()
        )));
    }
    let bal = balance_weight(label)?;
    let target = tape.leaf(label.clone(), false);
    let beta = T::from_f64(bal.beta);
    let mut head_losses = Vec::with_capacity(heads.len());
    let mut total: Option<Var> = None;
    for &h in heads {
        let l = tape.balanced_bce(h, target, beta)?;
        head_losses.push(tape.value(l)?.data()[0].to_f64());
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("at least one head");
    let value = tape.value(total)?.data()[0].to_f64();
    Ok((
        total,
        LossReport {
            head_losses,
            total: value,
            decay: 0.0,
            beta: bal.beta,
            positives: bal.positives,
            negatives: bal.negatives,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn beta_direct() {
        assert_eq!(balance_weight(&row(&[1.0, 0.0, 0.0, 0.0])).unwrap().beta, 0.75);
        assert_eq!(balance_weight(&row(&[0.0; 5])).unwrap().beta, 1.0);
        assert!(balance_weight(&Tensor4::<f64>::zeros([1, 1, 0, 0])).is_err());
    }

    #[test]
    fn beta_for_drive_vessel_fraction() {
        // 869 vessel pixels in 10,000
        let lab = Tensor4::from_fn([1, 1, 100, 100], |[_, _, y, x]| if y * 100 + x < 869 { 1.0f32 } else { 0.0 });
        let b = balance_weight(&lab).unwrap();
        assert!((b.beta - 0.9131).abs() < 1e-12);
        assert_eq!(b.beta + (1.0 - b.beta), 1.0);
    }

    #[test]
    fn single_pixel_value() {
        let l = class_balanced_bce(&row(&[0.5]), &row(&[1.0]), 0.75).unwrap();
        assert!((l - 0.75 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.5199).abs() < 1e-4);
        let z = class_balanced_bce_logits(&row(&[0.0]), &row(&[1.0]), 0.75).unwrap();
        assert!((z - l).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_is_near_zero() {
        let y = row(&[1.0, 0.0, 1.0, 0.0]);
        let z = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        let l = class_balanced_bce_logits(&z, &y, 0.5).unwrap();
        assert!(l / 4.0 <= 1e-6);
        // far into saturation the stable form stays finite
        let z = y.map(|v| if v > 0.5 { -1000.0 } else { 1000.0 });
        assert!(class_balanced_bce_logits(&z, &y, 0.5).unwrap().is_finite());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(class_balanced_bce_logits(&row(&[0.0, 1.0]), &row(&[0.0]), 0.5f64).is_err());
    }

    #[test]
    fn heads_sum_and_count_checked() {
        let y = Tensor4::from_fn([1, 1, 4, 4], |[_, _, r, c]| ((r + c) % 3 == 0) as u8 as f64);
        let z = Tensor4::from_fn([1, 1, 4, 4], |[_, _, r, c]| r as f64 * 0.3 - c as f64 * 0.2);
        let mut tape = Tape::new();
        let h = tape.leaf(z.clone(), true);
        let (_, single) = total_objective(&mut tape, &[h], &y, 1).unwrap();
        let (_, four) = total_objective(&mut tape, &[h, h, h, h], &y, 4).unwrap();
        assert!((four.total - 4.0 * single.total).abs() < 1e-12);
        assert!(total_objective(&mut tape, &[h, h], &y, 4).is_err());
    }
}
