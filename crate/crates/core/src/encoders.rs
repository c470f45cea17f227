//! Feature and context encoders.
//!
//! Every convolution here runs along a single axis. A "spatial" conv is an
//! x-conv followed by a y-conv; a "temporal" conv runs along t. Spatial
//! convs on `C×T×H×W` tensors act on each time slice with shared weights.

use crate::autodiff::{ConvAxis, Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{conv, conv_padded, Bound, ParamInit};
use crate::tensor::Real;

const NORM_EPS: f64 = 1e-5;

fn register_spatial(init: &mut ParamInit, name: &str, cin: usize, cout: usize) -> Result<()> {
    init.conv(&format!("{name}.x"), cin, cout, 3, true)?;
    init.conv(&format!("{name}.y"), cout, cout, 3, true)
}

fn spatial<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let a = conv(tape, p, &format!("{name}.x"), x, ConvAxis::X, stride)?;
    conv(tape, p, &format!("{name}.y"), a, ConvAxis::Y, stride)
}

// ---- feature encoder ---------------------------------------------------

/// Registers the shared per-frame feature encoder under `fnet`.
pub fn register_feature_encoder(init: &mut ParamInit, dim: usize) -> Result<()> {
    let (c1, c2) = (dim / 4, dim / 2);
    register_spatial(init, "fnet.s1.down", 3, c1)?;
    register_spatial(init, "fnet.s1.refine", c1, c1)?;
    register_spatial(init, "fnet.s2.down", c1, c2)?;
    register_spatial(init, "fnet.s2.refine", c2, c2)?;
    register_spatial(init, "fnet.s3.down", c2, dim)?;
    register_spatial(init, "fnet.s3.refine", dim, dim)?;
    init.conv("fnet.out", dim, dim, 1, true)
}

/// `3×H×W` image in [-1, 1] to a `D×H/8×W/8` feature map.
pub fn feature_encode<T: Real>(tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("feature encoder expects 3×H×W, got {s:?}"));
    }
    if s[1] % 8 != 0 || s[2] % 8 != 0 {
        return Err(shape_err!(
            "feature encoder needs extents divisible by 8, got {}×{}",
            s[1],
            s[2]
        ));
    }
    let eps = T::lit(NORM_EPS);
    let mut x = image;
    for stage in ["s1", "s2", "s3"] {
        x = spatial(tape, p, &format!("fnet.{stage}.down"), x, 2)?;
        x = tape.instance_norm(x, eps)?;
        x = tape.relu(x)?;
        x = spatial(tape, p, &format!("fnet.{stage}.refine"), x, 1)?;
        x = tape.instance_norm(x, eps)?;
        x = tape.relu(x)?;
    }
    conv(tape, p, "fnet.out", x, ConvAxis::X, 1)
}

// ---- SPT blocks ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SptVariant {
    /// temporal → spatial
    Spt1,
    /// spatial → temporal
    Spt2,
    /// spatial ∥ temporal, summed
    Spt3,
    /// spatial only
    Spt4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SptBlockSpec {
    pub variant: SptVariant,
    pub c_in: usize,
    pub c_out: usize,
    pub spatial_stride: usize,
    /// 3 (padded, T-preserving) or 2 (valid, T → T-1).
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    /// Apply ReLU to the block input before the conv path.
    pub preact: bool,
}

impl SptBlockSpec {
    fn temporal_pad(&self) -> usize {
        if self.temporal_kernel >= 3 {
            (self.temporal_kernel - 1) / 2
        } else {
            0
        }
    }

    pub fn reduces_time(&self) -> bool {
        self.temporal_kernel == 2
    }

    pub fn identity_residual(&self) -> bool {
        self.c_in == self.c_out && self.spatial_stride == 1 && !self.reduces_time()
    }
}

pub fn register_spt_block(init: &mut ParamInit, name: &str, s: &SptBlockSpec) -> Result<()> {
    let kt = s.temporal_kernel;
    match s.variant {
        SptVariant::Spt1 => {
            init.conv(&format!("{name}.t"), s.c_in, s.c_out, kt, true)?;
            register_spatial(init, &format!("{name}.sp"), s.c_out, s.c_out)?;
        }
        SptVariant::Spt2 => {
            register_spatial(init, &format!("{name}.sp"), s.c_in, s.c_out)?;
            init.conv(&format!("{name}.t"), s.c_out, s.c_out, kt, true)?;
        }
        SptVariant::Spt3 => {
            register_spatial(init, &format!("{name}.sp"), s.c_in, s.c_out)?;
            init.conv(&format!("{name}.t"), s.c_in, s.c_out, kt, true)?;
        }
        SptVariant::Spt4 => register_spatial(init, &format!("{name}.sp"), s.c_in, s.c_out)?,
    }
    if !s.identity_residual() {
        if s.reduces_time() {
            init.conv(&format!("{name}.proj"), s.c_in, s.c_out, 2, true)?;
        } else {
            init.conv(&format!("{name}.proj"), s.c_in, s.c_out, 1, true)?;
        }
    }
    Ok(())
}

fn temporal<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, s: &SptBlockSpec) -> Result<Var> {
    conv_padded(tape, p, name, x, ConvAxis::T, s.temporal_stride, s.temporal_pad())
}

/// One residual separable spatiotemporal block on a `C×T×H×W` tensor.
pub fn spt_block<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    s: &SptBlockSpec,
    x: Var,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[0] != s.c_in {
        return Err(shape_err!(
            "block {name} expects {}×T×H×W, got {xs:?}",
            s.c_in
        ));
    }
    let a = if s.preact { tape.relu(x)? } else { x };
    let sp = format!("{name}.sp");
    let tn = format!("{name}.t");
    let y = match s.variant {
        SptVariant::Spt1 => {
            let t = temporal(tape, p, &tn, a, s)?;
            let t = tape.relu(t)?;
            spatial(tape, p, &sp, t, s.spatial_stride)?
        }
        SptVariant::Spt2 => {
            let u = spatial(tape, p, &sp, a, s.spatial_stride)?;
            let u = tape.relu(u)?;
            temporal(tape, p, &tn, u, s)?
        }
        SptVariant::Spt3 => {
            let u = spatial(tape, p, &sp, a, s.spatial_stride)?;
            let mut t = temporal(tape, p, &tn, a, s)?;
            for _ in 1..s.spatial_stride {
                t = tape.avg_pool2(t)?;
            }
            tape.add(u, t)?
        }
        SptVariant::Spt4 => spatial(tape, p, &sp, a, s.spatial_stride)?,
    };
    let res = if s.identity_residual() {
        x
    } else if s.reduces_time() {
        conv_padded(tape, p, &format!("{name}.proj"), x, ConvAxis::T, 1, 0)?
    } else {
        let mut r = x;
        for _ in 1..s.spatial_stride {
            r = tape.avg_pool2(r)?;
        }
        conv(tape, p, &format!("{name}.proj"), r, ConvAxis::X, 1)?
    };
    tape.add(y, res)
}

// ---- context encoders ----------------------------------------------------

fn widths(dim: usize) -> [(usize, usize); 6] {
    let (q, h) = (dim / 4, dim / 2);
    [(3, q), (q, q), (q, h), (h, h), (h, dim), (dim, dim)]
}

const STRIDES: [usize; 6] = [2, 1, 2, 1, 2, 1];

/// The six-block spatiotemporal cascade: space ÷8, time 3 → 2.
pub fn context_3d_specs(dim: usize) -> [SptBlockSpec; 6] {
    use SptVariant::*;
    let variants = [Spt1, Spt2, Spt3, Spt4, Spt1, Spt2];
    std::array::from_fn(|i| SptBlockSpec {
        variant: variants[i],
        c_in: widths(dim)[i].0,
        c_out: widths(dim)[i].1,
        spatial_stride: STRIDES[i],
        temporal_kernel: if i == 5 { 2 } else { 3 },
        temporal_stride: 1,
        preact: i > 0,
    })
}

/// Spatial-only counterpart used by the twin 2D encoder.
pub fn context_2d_specs(dim: usize) -> [SptBlockSpec; 6] {
    std::array::from_fn(|i| SptBlockSpec {
        variant: SptVariant::Spt4,
        c_in: widths(dim)[i].0,
        c_out: widths(dim)[i].1,
        spatial_stride: STRIDES[i],
        temporal_kernel: 3,
        temporal_stride: 1,
        preact: i > 0,
    })
}

pub fn register_context_3d(init: &mut ParamInit, dim: usize) -> Result<()> {
    for (i, s) in context_3d_specs(dim).iter().enumerate() {
        register_spt_block(init, &format!("cnet3d.b{}", i + 1), s)?;
    }
    Ok(())
}

pub fn register_context_2d(init: &mut ParamInit, dim: usize) -> Result<()> {
    for (i, s) in context_2d_specs(dim).iter().enumerate() {
        register_spt_block(init, &format!("cnet2d.b{}", i + 1), s)?;
    }
    Ok(())
}

/// `frames`: `3×3×H×W` (colour × time × H × W), temporal order preserved.
/// Returns `dim×2×H/8×W/8`.
pub fn context_encode_3d<T: Real>(tape: &mut Tape<T>, p: &Bound, dim: usize, frames: Var) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 4 || s[0] != 3 || s[1] != 3 {
        return Err(shape_err!(
            "3D context encoder expects 3 colour channels × 3 frames, got {s:?}"
        ));
    }
    let mut x = frames;
    for (i, spec) in context_3d_specs(dim).iter().enumerate() {
        x = spt_block(tape, p, &format!("cnet3d.b{}", i + 1), spec, x)?;
    }
    Ok(x)
}

/// Shared-weight 2D encoder applied to the first two frames (`3×H×W`
/// each), stacked on the time axis.
pub fn context_encode_2d<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    dim: usize,
    i1: Var,
    i2: Var,
) -> Result<Var> {
    let (s1, s2) = (tape.shape(i1).to_vec(), tape.shape(i2).to_vec());
    if s1 != s2 || s1.len() != 3 {
        return Err(shape_err!("2D context encoder inputs {s1:?} vs {s2:?}"));
    }
    let a = tape.reshape(i1, &[s1[0], 1, s1[1], s1[2]])?;
    let b = tape.reshape(i2, &[s1[0], 1, s1[1], s1[2]])?;
    let mut x = tape.concat(&[a, b], 1)?;
    for (i, spec) in context_2d_specs(dim).iter().enumerate() {
        x = spt_block(tape, p, &format!("cnet2d.b{}", i + 1), spec, x)?;
    }
    Ok(x)
}
