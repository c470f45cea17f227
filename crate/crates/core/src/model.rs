//! End-to-end assembly: encoders, correlation, the refinement loop and
//! the weight registry.

use crate::attention::{self, AttentionWeights};
use crate::autodiff::{Tape, Var};
use crate::config::{ContextMode, HiddenInit, ModelConfig, WarmStart, FRAMES};
use crate::correlation::{CorrSpec, CorrState};
use crate::encoders;
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::update::{self, FlowPair, GruStepTrace, Resolution};

/// Spatial granularity of the feature grid.
pub const STRIDE: usize = 8;

/// Builds the full registry for `config`. Same `(config, seed)` gives
/// bitwise-identical weights.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut init = ParamInit::new(seed);
    encoders::register_feature_encoder(&mut init, config.feature_dim)?;
    match config.context_mode {
        ContextMode::Conv3d => encoders::register_context_3d(&mut init, config.context_dim)?,
        ContextMode::Conv2dTwin => encoders::register_context_2d(&mut init, config.context_dim)?,
    }
    if config.hidden_init == HiddenInit::Context {
        update::register_hidden_init(&mut init, config.context_dim, config.hidden_dim)?;
    }
    update::register_motion_encoder(
        &mut init,
        config.corr_channels(),
        config.error_channels(),
        config.motion_dim,
    )?;
    if config.use_attention {
        attention::register(&mut init, config.context_dim, config.motion_dim, config.key_dim)?;
    }
    update::register_gru(&mut init, config.hidden_dim, config.gru_input_dim())?;
    update::register_flow_head(&mut init, config.hidden_dim)?;
    Ok(init.finish())
}

/// Copies an attention-free registry into an attention-enabled layout.
///
/// Tensors with matching name and shape are copied verbatim. GRU input
/// kernels gain a zero block for the aggregated-motion channels, so with
/// `α = 0` the target computes exactly what the source computes.
pub fn embed_without_attention(src: &ParamStore, src_cfg: &ModelConfig, dst_cfg: &ModelConfig) -> Result<ParamStore> {
    if src_cfg.use_attention || !dst_cfg.use_attention {
        return Err(Error::InvalidArgument(
            "embedding maps an attention-free registry onto an attention model".into(),
        ));
    }
    let mut dst = init_weights(dst_cfg, dst_cfg.seed)?;
    let (hd, lc, lm) = (dst_cfg.hidden_dim, dst_cfg.context_dim, dst_cfg.motion_dim);
    for (name, t) in dst.iter_mut() {
        let Some(s) = src.get(name) else {
            continue;
        };
        if s.shape() == t.shape() {
            *t = s.clone();
            continue;
        }
        // [h? | C | Y | M] ← [h? | C | M]
        let lead = match name {
            "gru.z.x.weight" | "gru.r.x.weight" => hd + lc,
            "gru.q.x.weight" => lc,
            _ => return Err(shape_err!("{name}: {:?} vs {:?}", s.shape(), t.shape())),
        };
        let (cout, cin_d, k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let cin_s = s.shape()[1];
        if cin_s + lm != cin_d || s.shape()[0] != cout {
            return Err(shape_err!("{name}: {:?} vs {:?}", s.shape(), t.shape()));
        }
        for o in 0..cout {
            for c in 0..cin_d {
                let src_c = if c < lead {
                    Some(c)
                } else if c < lead + lm {
                    None
                } else {
                    Some(c - lm)
                };
                for j in 0..k {
                    let v = src_c.map_or(0.0, |sc| s.at(&[o, sc, j]));
                    t.set(&[o, c, j], v);
                }
            }
        }
    }
    if let Some(a) = dst.get_mut(attention::ALPHA) {
        a.data_mut()[0] = 0.0;
    }
    Ok(dst)
}

/// Replicates the last row/column so both extents are multiples of `m`.
pub fn pad_replicate<T: Real>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(&[c, hp, wp], |i| {
        let ch = i / (hp * wp);
        let y = (i / wp) % hp;
        let xx = i % wp;
        x.at(&[ch, y.min(h - 1), xx.min(w - 1)])
    })
}

/// Block-average `2×H×W` full-resolution flow down to `2×H/8×W/8` in
/// eighth-resolution pixel units.
pub fn downsample_flow<T: Real>(f: &Tensor<T>) -> Tensor<T> {
    let s = f.shape();
    let (h, w) = (s[1] / STRIDE, s[2] / STRIDE);
    let norm = T::lit((STRIDE * STRIDE * STRIDE) as f64);
    Tensor::from_fn(&[2, h, w], |i| {
        let c = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        let mut acc = T::zero();
        for dy in 0..STRIDE {
            for dx in 0..STRIDE {
                acc = acc + f.at(&[c, y * STRIDE + dy, x * STRIDE + dx]);
            }
        }
        acc / norm
    })
}

/// Initial flow pair for the next window.
///
/// `none` or a missing previous estimate gives zeros at full resolution;
/// `shift_pair` carries the previous second flow into the first slot and
/// zeros the second.
pub fn warm_start_init(prev: Option<&FlowPair>, mode: WarmStart, h: usize, w: usize) -> FlowPair {
    match (mode, prev) {
        (WarmStart::ShiftPair, Some(p)) => FlowPair {
            f1: p.f2.clone(),
            f2: Tensor::zeros(p.f2.shape()),
            resolution: p.resolution,
        },
        _ => FlowPair::zeros(h, w, Resolution::Full),
    }
}

/// Everything the refinement loop produced on one tape.
#[derive(Clone, Debug)]
pub struct Unrolled {
    /// Full-resolution, cropped `(f¹, f²)` per iteration.
    pub preds: Vec<(Var, Var)>,
    /// Eighth-resolution flows per iteration.
    pub low: Vec<(Var, Var)>,
    /// GRU output before the residual addition, per iteration.
    pub gru_out: Vec<Var>,
    /// State carried to the next iteration.
    pub hidden: Vec<Var>,
    pub h0: Var,
    pub traces: Vec<GruStepTrace>,
    pub fmaps: [Var; 3],
    pub context: Var,
    pub corr: Vec<Var>,
}

fn check_frames<T: Real>(frames: &[Tensor<T>]) -> Result<(usize, usize)> {
    if frames.len() != FRAMES {
        return Err(Error::InvalidArgument(format!(
            "expected {FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let s = frames[0].shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("frames must be 3×H×W, got {s:?}"));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != s.as_slice() {
            return Err(shape_err!("frame {} is {:?}, frame 1 is {s:?}", i + 1, f.shape()));
        }
        if !f.all_finite() {
            return Err(Error::NonFinite(format!("frame {}", i + 1)));
        }
    }
    Ok((s[1], s[2]))
}

/// Runs the model on `tape`. `frames` are `3×H×W` in [0, 1]; `init` may
/// be at either resolution.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ModelConfig,
    frames: &[Tensor<T>],
    init: Option<&FlowPair>,
) -> Result<Unrolled> {
    config.validate()?;
    let (h, w) = check_frames(frames)?;
    let imgs: Vec<Tensor<T>> = frames
        .iter()
        .map(|f| pad_replicate(f, STRIDE).map(|v| v + v - T::one()))
        .collect();
    let (hp, wp) = (imgs[0].shape()[1], imgs[0].shape()[2]);
    let (h8, w8) = (hp / STRIDE, wp / STRIDE);

    let iv: Vec<Var> = imgs.iter().map(|t| tape.constant(t.clone())).collect();
    let mut fm = Vec::with_capacity(FRAMES);
    for &img in &iv {
        fm.push(encoders::feature_encode(tape, p, img)?);
    }
    let fmaps = [fm[0], fm[1], fm[2]];

    let context = match config.context_mode {
        ContextMode::Conv3d => {
            let stacked: Vec<Var> = iv
                .iter()
                .map(|&v| tape.reshape(v, &[3, 1, hp, wp]))
                .collect::<Result<_>>()?;
            let clip = tape.concat(&stacked, 1)?;
            encoders::context_encode_3d(tape, p, config.context_dim, clip)?
        }
        ContextMode::Conv2dTwin => encoders::context_encode_2d(tape, p, config.context_dim, iv[0], iv[1])?,
    };

    let spec = CorrSpec::new(config.corr_levels, config.corr_radius, config.strict_layout)?;
    let corr_state = CorrState::new(tape, fmaps[0], fmaps[1], fmaps[2], spec)?;
    let attn = if config.use_attention {
        Some(AttentionWeights::from_bound(p, config.heads)?)
    } else {
        None
    };

    let h0 = match config.hidden_init {
        HiddenInit::Context => update::hidden_init(tape, p, context)?,
        HiddenInit::Zeros => tape.constant(Tensor::zeros(&[config.hidden_dim, 2, h8, w8])),
    };

    let (mut f1, mut f2) = init_flows(tape, init, (h, w), (hp, wp))?;
    let mut hidden = h0;
    let mut saved = h0;
    let mut out = Unrolled {
        preds: Vec::with_capacity(config.iters),
        low: Vec::with_capacity(config.iters),
        gru_out: Vec::with_capacity(config.iters),
        hidden: Vec::with_capacity(config.iters),
        h0,
        traces: Vec::with_capacity(config.iters),
        fmaps,
        context,
        corr: Vec::with_capacity(config.iters),
    };
    for n in 1..=config.iters {
        if config.detach_flow {
            f1 = tape.detach(f1)?;
            f2 = tape.detach(f2)?;
        }
        let corr = corr_state.features(tape, f1, f2)?;
        let flows = update::stack_slots(tape, f1, f2)?;
        let errs = if config.use_warp_errors {
            let e = update::brightness_errors(tape, fmaps, f1, f2)?;
            Some(update::stack_slots(tape, e, e)?)
        } else {
            None
        };
        let motion = update::motion_encode(tape, p, corr, flows, errs)?;
        let x = match &attn {
            Some(wts) => attention::aggregate_gru_input(tape, context, motion, wts)?,
            None => tape.concat(&[context, motion], 0)?,
        };
        let (h_new, trace) = update::gru_step(tape, p, hidden, x)?;
        hidden = update::residual_hidden(tape, n, config.residual_interval, h_new, saved)?;
        if update::residual_applies(n, config.residual_interval) {
            saved = hidden;
        }
        let (d1, d2) = update::flow_head(tape, p, hidden)?;
        f1 = tape.add(f1, d1)?;
        f2 = tape.add(f2, d2)?;
        let u1 = update::upsample_flow(tape, f1)?;
        let u1 = crop(tape, u1, h, w)?;
        let u2 = update::upsample_flow(tape, f2)?;
        let u2 = crop(tape, u2, h, w)?;
        out.preds.push((u1, u2));
        out.low.push((f1, f2));
        out.gru_out.push(h_new);
        out.hidden.push(hidden);
        out.traces.push(trace);
        out.corr.push(corr);
    }
    Ok(out)
}

fn crop<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let mut y = x;
    if s[1] != h {
        y = tape.narrow(y, 1, 0, h)?;
    }
    if s[2] != w {
        y = tape.narrow(y, 2, 0, w)?;
    }
    Ok(y)
}

fn init_flows<T: Real>(
    tape: &mut Tape<T>,
    init: Option<&FlowPair>,
    (h, w): (usize, usize),
    (hp, wp): (usize, usize),
) -> Result<(Var, Var)> {
    let (h8, w8) = (hp / STRIDE, wp / STRIDE);
    let Some(init) = init else {
        let z = tape.constant(Tensor::zeros(&[2, h8, w8]));
        return Ok((z, z));
    };
    let mut pair = Vec::with_capacity(2);
    for f in [&init.f1, &init.f2] {
        let low = match init.resolution {
            Resolution::Full => {
                if f.shape() != [2, h, w] {
                    return Err(shape_err!("initial flow {:?} for {h}×{w} frames", f.shape()));
                }
                downsample_flow(&pad_replicate(&f.cast::<T>(), STRIDE))
            }
            Resolution::Eighth => {
                if f.shape() != [2, h8, w8] {
                    return Err(shape_err!("initial 1/8 flow {:?}, grid is {h8}×{w8}", f.shape()));
                }
                f.cast::<T>()
            }
        };
        if !low.all_finite() {
            return Err(Error::NonFinite("initial flow".into()));
        }
        pair.push(tape.constant(low));
    }
    Ok((pair[0], pair[1]))
}

/// A validated configuration with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = init_weights(&config, config.seed)?;
        Ok(Self { config, weights })
    }

    /// Checks that `weights` is exactly the registry `config` implies.
    pub fn from_parts(config: ModelConfig, weights: ParamStore) -> Result<Self> {
        let expect = init_weights(&config, config.seed)?;
        if expect.len() != weights.len() {
            return Err(Error::Config(format!(
                "registry has {} tensors, config implies {}",
                weights.len(),
                expect.len()
            )));
        }
        for (name, t) in expect.iter() {
            match weights.get(name) {
                Some(w) if w.shape() == t.shape() => {}
                Some(w) => {
                    return Err(shape_err!("{name}: stored {:?}, config implies {:?}", w.shape(), t.shape()))
                }
                None => return Err(Error::Config(format!("missing parameter {name:?}"))),
            }
        }
        Ok(Self { config, weights })
    }

    /// All `N` full-resolution flow pairs, in iteration order.
    pub fn forward(&self, frames: &[Tensor<f32>], init: Option<&FlowPair>) -> Result<Vec<FlowPair>> {
        let mut tape = Tape::<f32>::new();
        let p = self.weights.bind(&mut tape, false);
        let u = forward_on_tape(&mut tape, &p, &self.config, frames, init)?;
        Ok(u
            .preds
            .iter()
            .map(|&(a, b)| FlowPair {
                f1: tape.value(a).clone(),
                f2: tape.value(b).clone(),
                resolution: Resolution::Full,
            })
            .collect())
    }

    /// The final (N-th) pair.
    pub fn predict(&self, frames: &[Tensor<f32>], init: Option<&FlowPair>) -> Result<FlowPair> {
        let mut all = self.forward(frames, init)?;
        all.pop().ok_or_else(|| Error::Config("iters must be >= 1".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::preset(variant).toy();
        c.feature_dim = 16;
        c.context_dim = 8;
        c.hidden_dim = 8;
        c.motion_dim = 8;
        c.key_dim = 8;
        c.iters = 3;
        c
    }

    fn frames(h: usize, w: usize) -> Vec<Tensor<f32>> {
        (0..3)
            .map(|t| Tensor::from_fn(&[3, h, w], |i| ((i * 7 + t * 3) % 17) as f32 / 17.0))
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_independent_of_iters() {
        let c = tiny(Variant::SstmPlusPlus);
        let a = init_weights(&c, 5).unwrap();
        let b = init_weights(&c, 5).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        let mut c12 = c.clone();
        c12.iters = 12;
        assert_eq!(init_weights(&c12, 5).unwrap().num_scalars(), a.num_scalars());
        assert!(a.contains(attention::ALPHA));
        assert!(!init_weights(&tiny(Variant::Sstm), 5).unwrap().contains(attention::ALPHA));
    }

    #[test]
    fn forward_shapes_and_count() {
        let m = Model::new(tiny(Variant::SstmPlusPlus)).unwrap();
        let out = m.forward(&frames(64, 60), None).unwrap();
        assert_eq!(out.len(), 3);
        for p in &out {
            assert_eq!(p.f1.shape(), &[2, 64, 60]);
            assert!(p.is_finite());
        }
        assert!(m.forward(&frames(64, 64)[..2], None).is_err());
    }

    #[test]
    fn warm_start_modes() {
        let prev = FlowPair {
            f1: Tensor::zeros(&[2, 4, 4]),
            f2: Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 2.0 } else { 1.0 }),
            resolution: Resolution::Full,
        };
        let none = warm_start_init(Some(&prev), WarmStart::None, 4, 4);
        assert!(none.f1.data().iter().chain(none.f2.data()).all(|&v| v == 0.0));
        let s = warm_start_init(Some(&prev), WarmStart::ShiftPair, 4, 4);
        assert_eq!(s.f1, prev.f2);
        assert!(s.f2.data().iter().all(|&v| v == 0.0));
        let first = warm_start_init(None, WarmStart::ShiftPair, 4, 4);
        assert!(first.f1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_inverts_constant_upsample() {
        let f = Tensor::<f32>::from_fn(&[2, 16, 24], |i| if i < 384 { 8.0 } else { -4.0 });
        let d = downsample_flow(&f);
        assert_eq!(d.shape(), &[2, 2, 3]);
        assert!(d.data()[..6].iter().all(|&v| v == 1.0));
        assert!(d.data()[6..].iter().all(|&v| v == -0.5));
    }
}
