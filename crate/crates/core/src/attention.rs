//! Space-time attention over motion features.
//!
//! Queries and keys are projected from the context slice of a time
//! window, values from its motion features. Attention runs over the
//! flattened `h·w` positions of one window; windows do not mix.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamInit};
use crate::tensor::Real;

pub const W_Q: &str = "attn.w_q";
pub const W_K: &str = "attn.w_k";
pub const W_V: &str = "attn.w_v";
pub const ALPHA: &str = "attn.alpha";

/// Registers `W_q, W_k: L_c×d_k`, `W_v: L_m×L_m` and the scalar `α = 0`.
pub fn register(init: &mut ParamInit, context_dim: usize, motion_dim: usize, key_dim: usize) -> Result<()> {
    init.uniform(W_Q, &[context_dim, key_dim], 1.0 / (context_dim as f32).sqrt())?;
    init.uniform(W_K, &[context_dim, key_dim], 1.0 / (context_dim as f32).sqrt())?;
    init.uniform(W_V, &[motion_dim, motion_dim], 1.0 / (motion_dim as f32).sqrt())?;
    init.constant(ALPHA, &[1], 0.0)
}

/// Handles for one attention block on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub alpha: Var,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn from_bound(p: &Bound, heads: usize) -> Result<Self> {
        Ok(Self {
            w_q: p.var(W_Q)?,
            w_k: p.var(W_K)?,
            w_v: p.var(W_V)?,
            alpha: p.var(ALPHA)?,
            heads,
        })
    }
}

/// Row-normalized attention matrix `softmax(θφᵀ/√d)` of one head, `N×N`.
pub fn attention_matrix<T: Real>(tape: &mut Tape<T>, theta: Var, phi: Var) -> Result<Var> {
    let d = tape.shape(theta)[1];
    let pt = tape.transpose(phi)?;
    let s = tape.matmul(theta, pt)?;
    let s = tape.scale(s, T::one() / T::from_usize(d).unwrap().sqrt())?;
    tape.softmax(s, 1)
}

/// `Y = M + α · softmax(θ(C) φ(C)ᵀ/√d_k) · σ(M)` for `context: L_c×h×w`
/// and `motion: L_m×h×w`. Returns `L_m×h×w`.
pub fn attend<T: Real>(tape: &mut Tape<T>, context: Var, motion: Var, w: &AttentionWeights) -> Result<Var> {
    let (cs, ms) = (tape.shape(context).to_vec(), tape.shape(motion).to_vec());
    if cs.len() != 3 || ms.len() != 3 || cs[1..] != ms[1..] {
        return Err(shape_err!("attend context {cs:?} vs motion {ms:?}"));
    }
    let (lc, lm, h, wd) = (cs[0], ms[0], cs[1], cs[2]);
    let n = h * wd;
    let (qs, vs) = (tape.shape(w.w_q).to_vec(), tape.shape(w.w_v).to_vec());
    if qs[0] != lc || tape.shape(w.w_k) != qs.as_slice() || vs != [lm, lm] {
        return Err(shape_err!(
            "attention weights W_q {qs:?}, W_v {vs:?} for L_c={lc}, L_m={lm}"
        ));
    }
    let dk = qs[1];
    if w.heads == 0 || dk % w.heads != 0 || lm % w.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} heads do not divide d_k={dk} and L_m={lm}",
            w.heads
        )));
    }
    let c = tape.reshape(context, &[lc, n])?;
    let c = tape.transpose(c)?; // N×L_c
    let m = tape.reshape(motion, &[lm, n])?;
    let m = tape.transpose(m)?; // N×L_m
    let theta = tape.matmul(c, w.w_q)?;
    let phi = tape.matmul(c, w.w_k)?;
    let value = tape.matmul(m, w.w_v)?;
    let agg = if w.heads == 1 {
        let a = attention_matrix(tape, theta, phi)?;
        tape.matmul(a, value)?
    } else {
        let (hk, hv) = (dk / w.heads, lm / w.heads);
        let mut outs = Vec::with_capacity(w.heads);
        for h in 0..w.heads {
            let th = tape.narrow(theta, 1, h * hk, hk)?;
            let ph = tape.narrow(phi, 1, h * hk, hk)?;
            let vh = tape.narrow(value, 1, h * hv, hv)?;
            let a = attention_matrix(tape, th, ph)?;
            outs.push(tape.matmul(a, vh)?);
        }
        tape.concat(&outs, 1)?
    };
    let mixed = tape.mul(agg, w.alpha)?;
    let y = tape.add(m, mixed)?;
    let y = tape.transpose(y)?;
    tape.reshape(y, &[lm, h, wd])
}

/// GRU input for both windows: per slot `t`, `[C^t | Y^t | M^t]` on the
/// channel axis; slots stacked on the time axis. `context: L_c×2×h×w`,
/// `motion: L_m×2×h×w`; output `(L_c+2L_m)×2×h×w`.
pub fn aggregate_gru_input<T: Real>(
    tape: &mut Tape<T>,
    context: Var,
    motion: Var,
    w: &AttentionWeights,
) -> Result<Var> {
    let (cs, ms) = (tape.shape(context).to_vec(), tape.shape(motion).to_vec());
    if cs.len() != 4 || ms.len() != 4 || cs[1..] != ms[1..] || cs[1] != 2 {
        return Err(shape_err!(
            "aggregate_gru_input needs two windows, got context {cs:?} motion {ms:?}"
        ));
    }
    let (lc, lm, h, wd) = (cs[0], ms[0], cs[2], cs[3]);
    let mut slots = Vec::with_capacity(2);
    for t in 0..2 {
        let ct = tape.narrow(context, 1, t, 1)?;
        let ct = tape.reshape(ct, &[lc, h, wd])?;
        let mt = tape.narrow(motion, 1, t, 1)?;
        let mt = tape.reshape(mt, &[lm, h, wd])?;
        let yt = attend(tape, ct, mt, w)?;
        let cat = tape.concat(&[ct, yt, mt], 0)?;
        slots.push(tape.reshape(cat, &[lc + 2 * lm, 1, h, wd])?);
    }
    tape.concat(&slots, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(tape: &mut Tape<f64>, lc: usize, lm: usize, dk: usize, alpha: f64) -> AttentionWeights {
        let wq = Tensor::from_fn(&[lc, dk], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let wk = Tensor::from_fn(&[lc, dk], |i| ((i * 53) % 13) as f64 / 13.0 - 0.5);
        let wv = Tensor::from_fn(&[lm, lm], |i| ((i * 17) % 7) as f64 / 7.0 - 0.5);
        AttentionWeights {
            w_q: tape.constant(wq),
            w_k: tape.constant(wk),
            w_v: tape.constant(wv),
            alpha: tape.constant(Tensor::scalar(alpha)),
            heads: 1,
        }
    }

    #[test]
    fn alpha_zero_passes_motion_through() {
        let mut t = Tape::<f64>::new();
        let w = setup(&mut t, 3, 4, 2, 0.0);
        let c = t.constant(Tensor::from_fn(&[3, 2, 3], |i| (i as f64).sin()));
        let mv = Tensor::from_fn(&[4, 2, 3], |i| (i as f64 * 0.7).cos());
        let m = t.constant(mv.clone());
        let y = attend(&mut t, c, m, &w).unwrap();
        assert_eq!(t.value(y), &mv);
    }

    #[test]
    fn constant_context_gives_mean_pooled_values() {
        let (lc, lm, h, wd) = (3, 2, 2, 3);
        let alpha = 0.7;
        let mut t = Tape::<f64>::new();
        let w = setup(&mut t, lc, lm, 2, alpha);
        let c = t.constant(Tensor::full(&[lc, h, wd], 0.3));
        let mv = Tensor::from_fn(&[lm, h, wd], |i| i as f64 * 0.25 - 1.0);
        let m = t.constant(mv.clone());
        let y = attend(&mut t, c, m, &w).unwrap();
        let yv = t.value(y).clone();
        let wv = t.value(w.w_v).clone();
        let n = h * wd;
        for o in 0..lm {
            // mean over positions of σ(M)[:, o] = Σ_i mean_p M[i,p] W_v[i,o]
            let mut pooled = 0.0;
            for i in 0..lm {
                let mean: f64 = mv.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
                pooled += mean * wv.at(&[i, o]);
            }
            for p in 0..n {
                let e = mv.data()[o * n + p] + alpha * pooled;
                assert!((yv.data()[o * n + p] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_input_layout() {
        let (lc, lm) = (3, 2);
        let mut t = Tape::<f64>::new();
        let w = setup(&mut t, lc, lm, 2, 0.5);
        let c = t.constant(Tensor::from_fn(&[lc, 2, 2, 2], |i| (i as f64).sin()));
        let m = t.constant(Tensor::from_fn(&[lm, 2, 2, 2], |i| (i as f64).cos()));
        let x = aggregate_gru_input(&mut t, c, m, &w).unwrap();
        assert_eq!(t.shape(x), &[lc + 2 * lm, 2, 2, 2]);
        let bad = t.constant(Tensor::zeros(&[lm, 3, 2, 2]));
        assert!(aggregate_gru_input(&mut t, c, bad, &w).is_err());
    }
}
