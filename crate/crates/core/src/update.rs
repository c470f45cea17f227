//! Recurrent update block: brightness errors, motion encoder, the 3D
//! convolutional GRU, residual hidden connections, flow head and
//! upsampling.
//!
//! State tensors are laid out `C×2×h×w`: channel, temporal slot, space.
//! Slot 0 belongs to the flow between frames 1–2, slot 1 to frames 2–3.

use crate::autodiff::{ConvAxis, Tape, Var};
use crate::config::SLOTS;
use crate::error::{shape_err, Result};
use crate::params::{conv, Bound, ParamInit};
use crate::tensor::{Real, Tensor};

/// Resolution a flow field is expressed at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Eighth,
    Full,
}

/// Flow fields between frames 1–2 and 2–3, each `2×h×w` in pixels/frame
/// at the tagged resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub f1: Tensor<f32>,
    pub f2: Tensor<f32>,
    pub resolution: Resolution,
}

impl FlowPair {
    pub fn zeros(h: usize, w: usize, resolution: Resolution) -> Self {
        Self {
            f1: Tensor::zeros(&[2, h, w]),
            f2: Tensor::zeros(&[2, h, w]),
            resolution,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f1.all_finite() && self.f2.all_finite()
    }
}

/// Per-step gate values, kept for invariant checks.
#[derive(Clone, Debug)]
pub struct GruStepTrace {
    pub z: Var,
    pub r: Var,
    pub h_cand: Var,
}

/// Bilinear warp of a `C×h×w` map by a `2×h×w` flow: samples at `p + f(p)`.
pub fn warp<T: Real>(tape: &mut Tape<T>, map: Var, flow: Var) -> Result<Var> {
    let fs = tape.shape(flow).to_vec();
    if fs.len() != 3 || fs[0] != 2 {
        return Err(shape_err!("warp flow must be 2×h×w, got {fs:?}"));
    }
    let (h, w) = (fs[1], fs[2]);
    let grid = tape.constant(pixel_grid(h, w));
    let coords = tape.add(grid, flow)?;
    tape.bilinear_sample(map, coords)
}

/// `2×h×w` tensor holding each pixel's own (x, y).
pub fn pixel_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[2, h, w], |i| {
        let p = i % (h * w);
        if i < h * w {
            T::from_usize(p % w).unwrap()
        } else {
            T::from_usize(p / w).unwrap()
        }
    })
}

/// `[ε¹, ε², ε³]` as a `3×h×w` tensor: channel-wise Euclidean norms of
/// `W(f2;F¹)−f1`, `W(f3;F²)−f2` and `W(W(f3;F²);F¹)−f1`.
pub fn brightness_errors<T: Real>(
    tape: &mut Tape<T>,
    fmaps: [Var; 3],
    flow1: Var,
    flow2: Var,
) -> Result<Var> {
    let [fm1, fm2, fm3] = fmaps;
    let s = tape.shape(fm1).to_vec();
    if tape.shape(fm2) != s.as_slice() || tape.shape(fm3) != s.as_slice() {
        return Err(shape_err!("brightness_errors feature maps differ in shape"));
    }
    for f in [flow1, flow2] {
        if tape.shape(f) != [2, s[1], s[2]] {
            return Err(shape_err!(
                "brightness_errors flow {:?} for features {s:?} (flows must be at 1/8 resolution)",
                tape.shape(f)
            ));
        }
    }
    let w12 = warp(tape, fm2, flow1)?;
    let w23 = warp(tape, fm3, flow2)?;
    let w13 = warp(tape, w23, flow1)?;
    let d1 = tape.sub(w12, fm1)?;
    let d2 = tape.sub(w23, fm2)?;
    let d3 = tape.sub(w13, fm1)?;
    let e1 = tape.channel_norm(d1)?;
    let e2 = tape.channel_norm(d2)?;
    let e3 = tape.channel_norm(d3)?;
    tape.concat(&[e1, e2, e3], 0)
}

// ---- motion encoder --------------------------------------------------------

pub fn register_motion_encoder(
    init: &mut ParamInit,
    corr_dim: usize,
    err_dim: usize,
    motion_dim: usize,
) -> Result<()> {
    init.conv("menc.corr", corr_dim, motion_dim, 1, true)?;
    init.conv("menc.flow.x", 2 + err_dim, motion_dim / 2, 3, true)?;
    init.conv("menc.flow.y", motion_dim / 2, motion_dim / 2, 3, true)?;
    init.conv("menc.out.x", motion_dim + motion_dim / 2, motion_dim, 3, true)?;
    init.conv("menc.out.y", motion_dim, motion_dim, 3, true)
}

/// Compresses `[corr | flow | errs]` (each `·×2×h×w`) to `L_m×2×h×w`
/// with slot-shared spatial convolutions.
pub fn motion_encode<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    corr: Var,
    flows: Var,
    errs: Option<Var>,
) -> Result<Var> {
    let (cs, fs) = (tape.shape(corr).to_vec(), tape.shape(flows).to_vec());
    if cs.len() != 4 || fs.len() != 4 || cs[1..] != fs[1..] || fs[0] != 2 {
        return Err(shape_err!("motion_encode corr {cs:?} flows {fs:?}"));
    }
    let c = conv(tape, p, "menc.corr", corr, ConvAxis::X, 1)?;
    let c = tape.relu(c)?;
    let fe = match errs {
        Some(e) => {
            if tape.shape(e)[1..] != fs[1..] {
                return Err(shape_err!("motion_encode errs {:?}", tape.shape(e)));
            }
            tape.concat(&[flows, e], 0)?
        }
        None => flows,
    };
    let f = conv(tape, p, "menc.flow.x", fe, ConvAxis::X, 1)?;
    let f = conv(tape, p, "menc.flow.y", f, ConvAxis::Y, 1)?;
    let f = tape.relu(f)?;
    let cf = tape.concat(&[c, f], 0)?;
    let o = conv(tape, p, "menc.out.x", cf, ConvAxis::X, 1)?;
    let o = conv(tape, p, "menc.out.y", o, ConvAxis::Y, 1)?;
    tape.relu(o)
}

// ---- 3D convGRU ------------------------------------------------------------

/// Separable 3D convolution `{name}`: x (cin→cout) → y → t, bias last.
pub fn register_sep3d(init: &mut ParamInit, name: &str, cin: usize, cout: usize) -> Result<()> {
    init.conv(&format!("{name}.x"), cin, cout, 3, false)?;
    init.conv(&format!("{name}.y"), cout, cout, 3, false)?;
    init.conv(&format!("{name}.t"), cout, cout, 3, true)
}

pub fn sep3d<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let a = conv(tape, p, &format!("{name}.x"), x, ConvAxis::X, 1)?;
    let b = conv(tape, p, &format!("{name}.y"), a, ConvAxis::Y, 1)?;
    conv(tape, p, &format!("{name}.t"), b, ConvAxis::T, 1)
}

/// One tied-weight GRU parameter set under `gru.{z,r,q}`.
pub fn register_gru(init: &mut ParamInit, hidden: usize, input: usize) -> Result<()> {
    register_sep3d(init, "gru.z", hidden + input, hidden)?;
    register_sep3d(init, "gru.r", hidden + input, hidden)?;
    register_sep3d(init, "gru.q", input, hidden)
}

/// `Z = σ(conv([h,X]))`, `r = σ(conv([h,X]))`, `h' = tanh(conv(X) + r⊙h)`,
/// `h_new = Z⊙h + (1−Z)⊙h'`.
pub fn gru_step<T: Real>(tape: &mut Tape<T>, p: &Bound, h: Var, x: Var) -> Result<(Var, GruStepTrace)> {
    let (hs, xs) = (tape.shape(h).to_vec(), tape.shape(x).to_vec());
    if hs.len() != 4 || xs.len() != 4 || hs[1..] != xs[1..] {
        return Err(shape_err!("gru_step state {hs:?} input {xs:?}"));
    }
    let hx = tape.concat(&[h, x], 0)?;
    let z = sep3d(tape, p, "gru.z", hx)?;
    let z = tape.sigmoid(z)?;
    let r = sep3d(tape, p, "gru.r", hx)?;
    let r = tape.sigmoid(r)?;
    let wx = sep3d(tape, p, "gru.q", x)?;
    let rh = tape.mul(r, h)?;
    let pre = tape.add(wx, rh)?;
    let cand = tape.tanh(pre)?;
    let keep = tape.mul(z, h)?;
    let omz = tape.one_minus(z)?;
    let upd = tape.mul(omz, cand)?;
    let out = tape.add(keep, upd)?;
    Ok((
        out,
        GruStepTrace {
            z,
            r,
            h_cand: cand,
        },
    ))
}

/// Whether step `n` (1-based) adds the state from `interval` steps back.
pub fn residual_applies(n: usize, interval: usize) -> bool {
    interval > 0 && n >= interval && n % interval == 0
}

/// `h_new + h_saved` on residual steps, otherwise `h_new`.
pub fn residual_hidden<T: Real>(
    tape: &mut Tape<T>,
    n: usize,
    interval: usize,
    h_new: Var,
    h_saved: Var,
) -> Result<Var> {
    if residual_applies(n, interval) {
        tape.add(h_new, h_saved)
    } else {
        Ok(h_new)
    }
}

// ---- flow head and initial state --------------------------------------------

pub fn register_flow_head(init: &mut ParamInit, hidden: usize) -> Result<()> {
    init.conv("head.l1.x", hidden, hidden, 3, true)?;
    init.conv("head.l1.y", hidden, hidden, 3, true)?;
    init.conv("head.l2.x", hidden, 2, 3, true)?;
    init.conv("head.l2.y", 2, 2, 3, true)?;
    // start close to zero motion
    if let Some(w) = init.store.get_mut("head.l2.y.weight") {
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    }
    Ok(())
}

/// Splits the state along time and applies the shared head to each half.
/// Returns `(Δf¹, Δf²)`, each `2×h×w`.
pub fn flow_head<T: Real>(tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 || s[1] != SLOTS {
        return Err(shape_err!("flow_head needs a C×2×h×w state, got {s:?}"));
    }
    let a = conv(tape, p, "head.l1.x", h, ConvAxis::X, 1)?;
    let a = conv(tape, p, "head.l1.y", a, ConvAxis::Y, 1)?;
    let a = tape.relu(a)?;
    let d = conv(tape, p, "head.l2.x", a, ConvAxis::X, 1)?;
    let d = conv(tape, p, "head.l2.y", d, ConvAxis::Y, 1)?;
    split_slots(tape, d)
}

/// `C×2×h×w` → two `C×h×w` tensors.
pub fn split_slots<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let a = tape.narrow(x, 1, 0, 1)?;
    let a = tape.reshape(a, &[s[0], s[2], s[3]])?;
    let b = tape.narrow(x, 1, 1, 1)?;
    let b = tape.reshape(b, &[s[0], s[2], s[3]])?;
    Ok((a, b))
}

/// Two `C×h×w` tensors → `C×2×h×w`.
pub fn stack_slots<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if tape.shape(b) != s.as_slice() || s.len() != 3 {
        return Err(shape_err!("stack_slots {s:?} vs {:?}", tape.shape(b)));
    }
    let a = tape.reshape(a, &[s[0], 1, s[1], s[2]])?;
    let b = tape.reshape(b, &[s[0], 1, s[1], s[2]])?;
    tape.concat(&[a, b], 1)
}

pub fn register_hidden_init(init: &mut ParamInit, context: usize, hidden: usize) -> Result<()> {
    init.conv("h0", context, hidden, 1, true)
}

/// `h₀ = tanh(1×1 conv(context))`.
pub fn hidden_init<T: Real>(tape: &mut Tape<T>, p: &Bound, context: Var) -> Result<Var> {
    let a = conv(tape, p, "h0", context, ConvAxis::X, 1)?;
    tape.tanh(a)
}

/// Bilinear ×8 upsampling with flow values scaled by 8.
pub fn upsample_flow<T: Real>(tape: &mut Tape<T>, flow: Var) -> Result<Var> {
    let u = tape.upsample_bilinear(flow, 8)?;
    tape.scale(u, T::lit(8.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_schedule() {
        let applied: Vec<usize> = (1..=12).filter(|&n| residual_applies(n, 3)).collect();
        assert_eq!(applied, vec![3, 6, 9, 12]);
        assert!(!residual_applies(1, 2));
        assert!(residual_applies(2, 2));
    }

    #[test]
    fn errors_vanish_on_identical_frames() {
        let mut t = Tape::<f32>::new();
        let fm = t.constant(Tensor::from_fn(&[5, 4, 6], |i| (i as f32 * 0.31).sin()));
        let z = t.constant(Tensor::zeros(&[2, 4, 6]));
        let e = brightness_errors(&mut t, [fm, fm, fm], z, z).unwrap();
        assert_eq!(t.shape(e), &[3, 4, 6]);
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
        let full = t.constant(Tensor::zeros(&[2, 32, 48]));
        assert!(brightness_errors(&mut t, [fm, fm, fm], full, z).is_err());
    }

    #[test]
    fn shifted_features_warp_back() {
        let (c, h, w) = (3, 5, 7);
        let base = Tensor::<f32>::from_fn(&[c, h, w], |i| (i as f32 * 0.77).cos());
        // fmap2(x) = fmap1(x - 1): content moved one pixel right
        let shifted = Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            if x == 0 {
                0.0
            } else {
                base.data()[i - 1]
            }
        });
        let mut flow = Tensor::zeros(&[2, h, w]);
        flow.data_mut()[..h * w].iter_mut().for_each(|v| *v = 1.0);
        let mut t = Tape::<f32>::new();
        let f1 = t.constant(base);
        let f2 = t.constant(shifted);
        let fl = t.constant(flow);
        let z = t.constant(Tensor::zeros(&[2, h, w]));
        let e = brightness_errors(&mut t, [f1, f2, f2], fl, z).unwrap();
        let ev = t.value(e);
        for y in 0..h {
            for x in 0..w - 1 {
                assert_eq!(ev.at(&[0, y, x]), 0.0);
            }
        }
    }

    #[test]
    fn upsample_scales_constant_flow() {
        let mut t = Tape::<f32>::new();
        let mut f = Tensor::zeros(&[2, 2, 3]);
        f.data_mut()[..6].iter_mut().for_each(|v| *v = 1.0);
        let fv = t.constant(f);
        let u = upsample_flow(&mut t, fv).unwrap();
        let uv = t.value(u);
        assert_eq!(uv.shape(), &[2, 16, 24]);
        assert!(uv.data()[..16 * 24].iter().all(|&v| v == 8.0));
        assert!(uv.data()[16 * 24..].iter().all(|&v| v == 0.0));
    }
}
