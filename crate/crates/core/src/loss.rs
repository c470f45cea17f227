//! Exponentially weighted sequence losses over the refinement steps.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::metrics::Mask;
use crate::tensor::{Real, Tensor};
use crate::update::FlowPair;

/// Ground truth for one three-frame sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSample {
    pub gt_f1: Option<Tensor<f32>>,
    pub gt_f2: Option<Tensor<f32>>,
    pub valid1: Option<Mask>,
    pub valid2: Option<Mask>,
    /// Pixels of frame 2 that are hidden in frame 3.
    pub occlusion: Mask,
    /// Pixels whose frame-2 → frame-3 target leaves the image.
    pub oob: Mask,
}

/// Step weights `γ^{N−i}` for `i = 1..=N`.
pub fn step_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| gamma.powi((n - i) as i32)).collect()
}

/// Mean over valid pixels of `|Δu| + |Δv|`.
pub fn masked_l1<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<f32>, valid: Option<&Mask>) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != gt.shape() || s.len() != 3 || s[0] != 2 {
        return Err(shape_err!("prediction {s:?} vs ground truth {:?}", gt.shape()));
    }
    let g = tape.constant(gt.cast::<T>());
    let d = tape.sub(pred, g)?;
    let a = tape.abs(d)?;
    let (a, count) = match valid {
        Some(m) => {
            if (m.h, m.w) != (s[1], s[2]) {
                return Err(shape_err!("valid mask {}×{} for {:?}", m.h, m.w, s));
            }
            let n = m.count();
            if n == 0 {
                return Err(Error::Empty("no valid ground-truth pixels".into()));
            }
            let mt = m.to_tensor().cast::<T>();
            let both = Tensor::concat(&[&mt, &mt], 0)?;
            let mv = tape.constant(both);
            (tape.mul(a, mv)?, n)
        }
        None => (a, s[1] * s[2]),
    };
    let total = tape.sum(a)?;
    tape.scale(total, T::one() / T::from_usize(count).unwrap())
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[Var], gamma: f64) -> Result<Var> {
    let w = step_weights(terms.len(), gamma);
    let mut acc: Option<Var> = None;
    for (&t, &wi) in terms.iter().zip(&w) {
        let s = tape.scale(t, T::lit(wi))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("loss over zero predictions".into()))
}

/// `Σ γ^{N−i} (L1(f¹_i) + L1(f²_i)) / 2`.
pub fn loss1<T: Real>(tape: &mut Tape<T>, preds: &[(Var, Var)], gt: &GtSample, gamma: f64) -> Result<Var> {
    let g1 = gt
        .gt_f1
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("loss1 needs ground truth for the first flow".into()))?;
    let g2 = gt
        .gt_f2
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("loss1 needs ground truth for the second flow".into()))?;
    let mut terms = Vec::with_capacity(preds.len());
    for &(p1, p2) in preds {
        let a = masked_l1(tape, p1, g1, gt.valid1.as_ref())?;
        let b = masked_l1(tape, p2, g2, gt.valid2.as_ref())?;
        let s = tape.add(a, b)?;
        terms.push(tape.scale(s, T::lit(0.5))?);
    }
    weighted_sum(tape, &terms, gamma)
}

/// `Σ γ^{N−i} L1(f²_i)`; the first stream is unsupervised.
pub fn loss2<T: Real>(tape: &mut Tape<T>, preds: &[(Var, Var)], gt: &GtSample, gamma: f64) -> Result<Var> {
    let g2 = gt
        .gt_f2
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("loss2 needs ground truth for the second flow".into()))?;
    let mut terms = Vec::with_capacity(preds.len());
    for &(_, p2) in preds {
        terms.push(masked_l1(tape, p2, g2, gt.valid2.as_ref())?);
    }
    weighted_sum(tape, &terms, gamma)
}

fn on_values(
    preds: &[FlowPair],
    gt: &GtSample,
    gamma: f64,
    f: fn(&mut Tape<f64>, &[(Var, Var)], &GtSample, f64) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<(Var, Var)> = preds
        .iter()
        .map(|p| (tape.constant(p.f1.cast()), tape.constant(p.f2.cast())))
        .collect();
    let l = f(&mut tape, &vars, gt, gamma)?;
    Ok(tape.value(l).item())
}

/// [`loss1`] evaluated on plain tensors in double precision.
pub fn loss1_value(preds: &[FlowPair], gt: &GtSample, gamma: f64) -> Result<f64> {
    on_values(preds, gt, gamma, loss1)
}

/// [`loss2`] evaluated on plain tensors in double precision.
pub fn loss2_value(preds: &[FlowPair], gt: &GtSample, gamma: f64) -> Result<f64> {
    on_values(preds, gt, gamma, loss2)
}
