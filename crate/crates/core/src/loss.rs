//! Compound soft-Dice + cross-entropy segmentation loss.
//!
//! For `C` classes over `N` positions, with truth `S_T` (one-hot) and
//! prediction `S_P` clamped to `[δ, 1−δ]`:
//!
//! ```text
//! L = (1/C) Σ_c [ 1 − 2 Σ_x S_T·S_P / (Σ_x S_T + Σ_x S_P + ε)  −  (1/N) Σ_x S_T log S_P ]
//! ```

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;

/// Tape handles for the loss and its per-class terms.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Vec<Var>,
    pub cross_entropy: Vec<Var>,
}

/// Per-class values of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: Vec<f64>,
    pub cross_entropy: Vec<f64>,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: &Var| tape.value(*v).item().to_f64();
        LossBreakdown {
            total: get(&self.total),
            dice: self.dice.iter().map(get).collect(),
            cross_entropy: self.cross_entropy.iter().map(get).collect(),
        }
    }
}

/// Checks that `t` is one-hot along axis 0.
pub fn check_one_hot<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.rank() < 2 {
        return Err(Error::invalid("compound_loss", format!("expected [C, spatial..], got {:?}", t.shape())));
    }
    let c = t.shape()[0];
    let n = numel(&t.shape()[1..]);
    let d = t.data();
    for x in 0..n {
        let mut ones = 0;
        for k in 0..c {
            let v = d[k * n + x];
            if v == T::ONE {
                ones += 1;
            } else if v != T::ZERO {
                return Err(Error::invalid("compound_loss", "truth must contain only 0 and 1"));
            }
        }
        if ones != 1 {
            return Err(Error::invalid("compound_loss", format!("truth at position {x} has {ones} active classes")));
        }
    }
    Ok(())
}

/// Builds the loss on the tape from one-hot `truth` and probabilities `probs`,
/// both `[C, spatial..]`.
pub fn compound_loss_terms<T: Scalar>(tape: &mut Tape<T>, truth: Var, probs: Var) -> Result<LossTerms> {
    if tape.shape(truth) != tape.shape(probs) {
        return Err(Error::shape("compound_loss", tape.shape(truth), tape.shape(probs)));
    }
    check_one_hot(tape.value(truth))?;
    let shape = tape.shape(truth).to_vec();
    let c = shape[0];
    let n = numel(&shape[1..]);
    let p = tape.clamp(probs, T::from_f64(PROB_CLAMP), T::from_f64(1.0 - PROB_CLAMP));
    let log_p = tape.log(p);
    let mut dice = Vec::with_capacity(c);
    let mut ce = Vec::with_capacity(c);
    let mut total: Option<Var> = None;
    for k in 0..c {
        let t_k = tape.narrow(truth, 0, k, 1)?;
        let p_k = tape.narrow(p, 0, k, 1)?;
        let lp_k = tape.narrow(log_p, 0, k, 1)?;

        let tp = tape.mul(t_k, p_k)?;
        let inter = tape.sum(tp);
        let st = tape.sum(t_k);
        let sp = tape.sum(p_k);
        let denom = tape.add(st, sp)?;
        let denom = tape.add_scalar(denom, T::from_f64(DICE_EPS));
        let ratio = tape.div(inter, denom)?;
        let ratio = tape.scale(ratio, T::from_f64(-2.0));
        let d_k = tape.add_scalar(ratio, T::ONE);

        let tl = tape.mul(t_k, lp_k)?;
        let tl = tape.sum(tl);
        let ce_k = tape.scale(tl, T::from_f64(-1.0 / n as f64));

        let term = tape.add(d_k, ce_k)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        dice.push(d_k);
        ce.push(ce_k);
    }
    let total = tape.scale(total.expect("at least one class"), T::ONE / T::from_f64(c as f64));
    Ok(LossTerms {
        total,
        dice,
        cross_entropy: ce,
    })
}

pub fn compound_loss<T: Scalar>(tape: &mut Tape<T>, truth: Var, probs: Var) -> Result<Var> {
    Ok(compound_loss_terms(tape, truth, probs)?.total)
}

/// One-hot encoding `[classes, spatial..]` of a label volume.
pub fn one_hot<T: Scalar>(labels: &[u8], spatial: &[usize], classes: usize) -> Result<Tensor<T>> {
    let n = numel(spatial);
    if labels.len() != n {
        return Err(Error::shape("one_hot", &[labels.len()], spatial));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid("one_hot", format!("label {bad} out of range for {classes} classes")));
    }
    let mut shape = vec![classes];
    shape.extend_from_slice(spatial);
    let mut data = vec![T::ZERO; classes * n];
    for (x, &l) in labels.iter().enumerate() {
        data[l as usize * n + x] = T::ONE;
    }
    Tensor::new(shape, data)
}
