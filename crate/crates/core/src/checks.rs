//! Self-test suites shared by the command line and the acceptance tests.
//!
//! * `gradcheck`: central finite differences in f64 for every tape op and
//!   for the composed blocks of the model.
//! * `oracle`: randomized comparisons against the loop references in
//!   [`crate::oracle`].
//! * `invariants`: structural and behavioural laws of the model.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionWeights};
use crate::autodiff::{ConvAxis, Tape, Var};
use crate::config::{ContextMode, ModelConfig, Variant};
use crate::correlation::{self, CorrSpec, CorrState};
use crate::encoders;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_sampled};
use crate::loss::{self, GtSample};
use crate::metrics::Mask;
use crate::model::{self, forward_on_tape};
use crate::oracle;
use crate::params::{Bound, ParamInit, ParamStore};
use crate::tensor::Tensor;
use crate::update::{self, FlowPair, Resolution};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-5;
pub const FD_EPS: f64 = 1e-5;
/// Randomized cases per operator in the oracle suite.
pub const ORACLE_CASES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Invariants,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Self::Gradcheck),
            "oracle" => Ok(Self::Oracle),
            "invariants" => Ok(Self::Invariants),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown suite {other:?} (expected gradcheck, oracle, invariants or all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradcheck => "gradcheck",
            Self::Oracle => "oracle",
            Self::Invariants => "invariants",
            Self::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or 0/1 for boolean checks.
    pub value: f64,
    pub tol: f64,
    pub detail: String,
}

impl CheckResult {
    fn measured(suite: &'static str, name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: value.is_finite() && value <= tol,
            value,
            tol,
            detail: String::new(),
        }
    }

    fn boolean(suite: &'static str, name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: ok,
            value: if ok { 0.0 } else { 1.0 },
            tol: 0.0,
            detail: detail.into(),
        }
    }

    fn failed(suite: &'static str, name: impl Into<String>, err: &Error) -> Self {
        Self::boolean(suite, name, false, err.to_string())
    }
}

/// Tolerance overrides; `None` keeps the per-suite defaults.
#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    pub tol: Option<f64>,
}

pub fn run(suite: Suite, opts: Options) -> Vec<CheckResult> {
    match suite {
        Suite::Gradcheck => gradient_suite(opts),
        Suite::Oracle => oracle_suite(opts),
        Suite::Invariants => invariant_suite(),
        Suite::All => {
            let mut v = gradient_suite(opts);
            v.extend(oracle_suite(opts));
            v.extend(invariant_suite());
            v
        }
    }
}

/// One line per check plus a totals line.
pub fn render(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<10} {:<width$} {}  err={:.3e} tol={:.0e}{}{}\n",
            r.suite,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.value,
            r.tol,
            if r.detail.is_empty() { "" } else { "  " },
            r.detail,
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!(
        "checks={} passed={} failed={failed}\n",
        results.len(),
        results.len() - failed
    ));
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Uniform values with magnitude at least `gap`, away from kinks at 0.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(gap..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random projection to a scalar so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut rng(seed ^ 0xD1CE), tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

// ---- gradient suite ---------------------------------------------------------

const GRAD: &str = "gradcheck";

fn prim<F>(name: &str, inputs: Vec<Tensor<f64>>, tol: f64, f: F) -> CheckResult
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let seed = crate::params::name_seed(name);
    match grad_check(|t, v| f(t, v).and_then(|y| project(t, y, seed)), &inputs, FD_EPS, tol) {
        Ok(rep) => CheckResult::measured(GRAD, name, rep.max_rel_err, tol),
        Err(e) => CheckResult::failed(GRAD, name, &e),
    }
}

/// Composite check over a parameter registry plus extra inputs. At most
/// `probes` elements per tensor are perturbed.
fn composite<F>(
    name: &str,
    store: &ParamStore,
    extra: Vec<Tensor<f64>>,
    probes: usize,
    tol: f64,
    f: F,
) -> CheckResult
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let n_extra = extra.len();
    let seed = crate::params::name_seed(name);
    // zero biases put ReLUs over dead regions exactly on their kink
    let mut r = rng(seed);
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(n, t)| {
        let t = t.cast::<f64>();
        if n.ends_with(".bias") {
            Tensor::from_fn(t.shape(), |i| t.data()[i] + r.gen_range(-0.2..0.2))
        } else {
            t
        }
    }));
    let g = |t: &mut Tape<f64>, v: &[Var]| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[n_extra..].iter().copied()));
        let y = f(t, &p, &v[..n_extra])?;
        project(t, y, seed)
    };
    match grad_check_sampled(g, &inputs, FD_EPS, tol, probes, seed) {
        Ok(rep) => CheckResult::measured(GRAD, name, rep.max_rel_err, tol),
        Err(e) => CheckResult::failed(GRAD, name, &e),
    }
}

fn small_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::preset(variant);
    c.feature_dim = 8;
    c.context_dim = 8;
    c.hidden_dim = 4;
    c.motion_dim = 4;
    c.key_dim = 4;
    c.iters = 3;
    c.residual_interval = 2;
    c
}

pub fn gradient_suite(opts: Options) -> Vec<CheckResult> {
    let pt = opts.tol.unwrap_or(PRIMITIVE_TOL);
    let ct = opts.tol.unwrap_or(COMPOSITE_TOL);
    let mut out = primitive_checks(pt);
    out.extend(composite_checks(ct));
    out
}

fn primitive_checks(tol: f64) -> Vec<CheckResult> {
    let mut r = rng(11);
    let mut v = Vec::new();
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let kinked = off_zero(&mut r, &[3, 4], 0.1);

    v.push(prim("sigmoid", vec![a.clone()], tol, |t, x| t.sigmoid(x[0])));
    v.push(prim("tanh", vec![a.clone()], tol, |t, x| t.tanh(x[0])));
    v.push(prim("relu", vec![kinked.clone()], tol, |t, x| t.relu(x[0])));
    v.push(prim("abs", vec![kinked], tol, |t, x| t.abs(x[0])));
    v.push(prim("add", vec![a.clone(), b.clone()], tol, |t, x| t.add(x[0], x[1])));
    v.push(prim("sub", vec![a.clone(), b.clone()], tol, |t, x| t.sub(x[0], x[1])));
    v.push(prim("mul", vec![a.clone(), b.clone()], tol, |t, x| t.mul(x[0], x[1])));
    v.push(prim("mul_scalar_broadcast", vec![a.clone(), Tensor::from_fn(&[1], |_| 0.7)], tol, |t, x| {
        t.mul(x[0], x[1])
    }));
    v.push(prim("scale", vec![a.clone()], tol, |t, x| t.scale(x[0], -1.7)));
    v.push(prim("add_scalar", vec![a.clone()], tol, |t, x| t.add_scalar(x[0], 0.3)));
    v.push(prim("one_minus", vec![a.clone()], tol, |t, x| t.one_minus(x[0])));
    v.push(prim("sum", vec![a.clone()], tol, |t, x| {
        let s = t.sum(x[0])?;
        t.mul(s, s)
    }));
    v.push(prim("mean", vec![a.clone()], tol, |t, x| {
        let s = t.mean(x[0])?;
        t.mul(s, s)
    }));
    v.push(prim("reshape", vec![a.clone()], tol, |t, x| t.reshape(x[0], &[2, 6])));
    v.push(prim("concat", vec![a.clone(), uniform(&mut r, &[3, 2], -1.0, 1.0)], tol, |t, x| {
        t.concat(&[x[0], x[1]], 1)
    }));
    v.push(prim("narrow", vec![a.clone()], tol, |t, x| t.narrow(x[0], 1, 1, 2)));
    v.push(prim("transpose", vec![a.clone()], tol, |t, x| t.transpose(x[0])));
    v.push(prim("add_bias", vec![uniform(&mut r, &[3, 2, 4], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)], tol, |t, x| {
        t.add_bias(x[0], x[1])
    }));
    let x4 = uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 2, 3], -1.0, 1.0);
    for axis in [ConvAxis::X, ConvAxis::Y, ConvAxis::T] {
        for (stride, pad) in [(1, 1), (2, 0)] {
            v.push(prim(
                &format!("conv_axis_{axis:?}_s{stride}_p{pad}").to_lowercase(),
                vec![x4.clone(), k.clone()],
                tol,
                move |t, x| t.conv_axis(x[0], x[1], axis, stride, pad),
            ));
        }
    }
    v.push(prim("matmul", vec![a.clone(), uniform(&mut r, &[4, 2], -1.0, 1.0)], tol, |t, x| {
        t.matmul(x[0], x[1])
    }));
    v.push(prim("softmax", vec![uniform(&mut r, &[3, 5], -2.0, 2.0)], tol, |t, x| t.softmax(x[0], 1)));
    v.push(prim(
        "bilinear_sample",
        vec![uniform(&mut r, &[2, 4, 5], -1.0, 1.0), uniform(&mut r, &[2, 3, 3], -0.8, 4.8)],
        tol,
        |t, x| t.bilinear_sample(x[0], x[1]),
    ));
    v.push(prim("avg_pool2", vec![uniform(&mut r, &[2, 5, 6], -1.0, 1.0)], tol, |t, x| t.avg_pool2(x[0])));
    v.push(prim("upsample_bilinear", vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)], tol, |t, x| {
        t.upsample_bilinear(x[0], 2)
    }));
    for scale in [1usize, 2] {
        let (h, w) = (3, 4);
        let vol = uniform(&mut r, &[h * w, h.div_ceil(scale), w.div_ceil(scale)], -1.0, 1.0);
        let flow = uniform(&mut r, &[2, h, w], -1.6, 1.6);
        v.push(prim(&format!("corr_lookup_scale{scale}"), vec![vol, flow], tol, move |t, x| {
            t.corr_lookup(x[0], x[1], 1, scale)
        }));
    }
    v.push(prim("channel_norm", vec![uniform(&mut r, &[4, 3, 3], 0.2, 1.0)], tol, |t, x| t.channel_norm(x[0])));
    v.push(prim("instance_norm", vec![uniform(&mut r, &[3, 4, 5], -1.0, 1.0)], tol, |t, x| {
        t.instance_norm(x[0], 1e-5)
    }));
    v
}

fn composite_checks(tol: f64) -> Vec<CheckResult> {
    let mut r = rng(23);
    let mut v = Vec::new();
    let none = ParamStore::new();
    let (h, w) = (4, 4);

    let fm: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut r, &[4, h, w], -1.0, 1.0)).collect();
    let fl: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut r, &[2, h, w], -1.3, 1.3)).collect();
    let mut corr_in = fm.clone();
    corr_in.extend(fl.iter().cloned());
    v.push(composite("corr_features", &none, corr_in, 12, tol, |t, _, x| {
        let spec = CorrSpec::new(2, 1, false)?;
        correlation::corr_features(t, [x[0], x[1], x[2]], [x[3], x[4]], spec)
    }));

    let mut err_in = fm.clone();
    err_in.extend(fl.iter().map(|f| f.map(|x| 0.6 * x)));
    v.push(composite("warp", &none, vec![fm[0].clone(), fl[0].clone()], 16, tol, |t, _, x| {
        update::warp(t, x[0], x[1])
    }));
    v.push(composite("brightness_errors", &none, err_in, 12, tol, |t, _, x| {
        update::brightness_errors(t, [x[0], x[1], x[2]], x[3], x[4])
    }));

    let mut init = ParamInit::new(5);
    let _ = encoders::register_feature_encoder(&mut init, 8);
    let fs = init.finish();
    v.push(composite("feature_encoder", &fs, vec![uniform(&mut r, &[3, 16, 16], -1.0, 1.0)], 3, tol, |t, p, x| {
        encoders::feature_encode(t, p, x[0])
    }));

    let mut init = ParamInit::new(6);
    let _ = encoders::register_context_3d(&mut init, 8);
    let cs = init.finish();
    v.push(composite("context_encoder_3d", &cs, vec![uniform(&mut r, &[3, 3, 16, 16], -1.0, 1.0)], 3, tol, |t, p, x| {
        encoders::context_encode_3d(t, p, 8, x[0])
    }));
    let mut init = ParamInit::new(7);
    let _ = encoders::register_context_2d(&mut init, 8);
    let cs2 = init.finish();
    v.push(composite(
        "context_encoder_2d",
        &cs2,
        vec![uniform(&mut r, &[3, 16, 16], -1.0, 1.0), uniform(&mut r, &[3, 16, 16], -1.0, 1.0)],
        3,
        tol,
        |t, p, x| encoders::context_encode_2d(t, p, 8, x[0], x[1]),
    ));

    // update-core blocks on a 1×8×8 instance
    let (hh, ww) = (8, 8);
    let (cd, ed, md, hd, lc, dk) = (6, 3, 4, 4, 4, 4);
    let mut init = ParamInit::new(8);
    let _ = update::register_motion_encoder(&mut init, cd, ed, md);
    let ms = init.finish();
    let corr = uniform(&mut r, &[cd, 2, hh, ww], -1.0, 1.0);
    let flows = uniform(&mut r, &[2, 2, hh, ww], -1.0, 1.0);
    let errs = uniform(&mut r, &[ed, 2, hh, ww], 0.0, 1.0);
    v.push(composite("motion_encoder", &ms, vec![corr.clone(), flows.clone(), errs.clone()], 4, tol, |t, p, x| {
        update::motion_encode(t, p, x[0], x[1], Some(x[2]))
    }));

    let mut init = ParamInit::new(9);
    let _ = attention::register(&mut init, lc, md, dk);
    if let Some(a) = init.store.get_mut(attention::ALPHA) {
        a.data_mut()[0] = 0.8;
    }
    let attn = init.finish();
    for heads in [1usize, 2] {
        let ctx = uniform(&mut r, &[lc, 3, 4], -1.0, 1.0);
        let mot = uniform(&mut r, &[md, 3, 4], -1.0, 1.0);
        v.push(composite(&format!("attend_heads{heads}"), &attn, vec![ctx, mot], 8, tol, move |t, p, x| {
            let aw = AttentionWeights::from_bound(p, heads)?;
            attention::attend(t, x[0], x[1], &aw)
        }));
    }
    v.push(composite(
        "aggregate_gru_input",
        &attn,
        vec![uniform(&mut r, &[lc, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[md, 2, 3, 3], -1.0, 1.0)],
        8,
        tol,
        |t, p, x| {
            let aw = AttentionWeights::from_bound(p, 1)?;
            attention::aggregate_gru_input(t, x[0], x[1], &aw)
        },
    ));

    let mut init = ParamInit::new(10);
    let _ = update::register_gru(&mut init, hd, lc + md);
    let gs = init.finish();
    let h0 = uniform(&mut r, &[hd, 2, hh, ww], -0.9, 0.9);
    let gx = uniform(&mut r, &[lc + md, 2, hh, ww], -1.0, 1.0);
    v.push(composite("gru_step", &gs, vec![h0.clone(), gx], 4, tol, |t, p, x| {
        Ok(update::gru_step(t, p, x[0], x[1])?.0)
    }));

    let mut init = ParamInit::new(12);
    let _ = update::register_flow_head(&mut init, hd);
    let hs = init.finish();
    v.push(composite("flow_head", &hs, vec![h0.clone()], 4, tol, |t, p, x| {
        let (a, b) = update::flow_head(t, p, x[0])?;
        t.concat(&[a, b], 0)
    }));

    let mut init = ParamInit::new(13);
    let _ = update::register_hidden_init(&mut init, lc, hd);
    let his = init.finish();
    v.push(composite("hidden_init", &his, vec![uniform(&mut r, &[lc, 2, 3, 3], -1.0, 1.0)], 8, tol, |t, p, x| {
        update::hidden_init(t, p, x[0])
    }));
    v.push(composite("upsample_flow", &none, vec![uniform(&mut r, &[2, 2, 3], -1.0, 1.0)], 12, tol, |t, _, x| {
        update::upsample_flow(t, x[0])
    }));

    // motion_encode → gru_step → flow_head
    let mut init = ParamInit::new(14);
    let _ = update::register_motion_encoder(&mut init, cd, ed, md);
    let _ = update::register_gru(&mut init, hd, lc + md);
    let _ = update::register_flow_head(&mut init, hd);
    let us = init.finish();
    let ctx = uniform(&mut r, &[lc, 2, hh, ww], -1.0, 1.0);
    v.push(composite("update_step", &us, vec![corr, flows, errs, h0, ctx], 3, tol, |t, p, x| {
        let m = update::motion_encode(t, p, x[0], x[1], Some(x[2]))?;
        let gin = t.concat(&[x[4], m], 0)?;
        let (hn, _) = update::gru_step(t, p, x[3], gin)?;
        let (a, b) = update::flow_head(t, p, hn)?;
        t.concat(&[a, b], 0)
    }));

    v.extend(loss_checks(&mut r, tol));
    v.extend(model_checks(tol));
    v
}

fn gt_sample(r: &mut ChaCha8Rng, h: usize, w: usize) -> GtSample {
    let f = |r: &mut ChaCha8Rng| uniform(r, &[2, h, w], -3.0, 3.0).cast::<f32>();
    GtSample {
        gt_f1: Some(f(r)),
        gt_f2: Some(f(r)),
        valid1: Some(Mask::from_fn(h, w, |y, x| (x + y) % 5 != 0)),
        valid2: None,
        occlusion: Mask::filled(h, w, false),
        oob: Mask::filled(h, w, false),
    }
}

fn loss_checks(r: &mut ChaCha8Rng, tol: f64) -> Vec<CheckResult> {
    let (h, w) = (3, 4);
    let gt = gt_sample(r, h, w);
    let preds: Vec<Tensor<f64>> = (0..6).map(|_| uniform(r, &[2, h, w], -3.0, 3.0)).collect();
    let none = ParamStore::new();
    let mut v = Vec::new();
    for (name, which) in [("loss1", 1), ("loss2", 2)] {
        let gt = gt.clone();
        v.push(composite(name, &none, preds.clone(), 24, tol, move |t, _, x| {
            let pairs: Vec<(Var, Var)> = x.chunks(2).map(|c| (c[0], c[1])).collect();
            let l = if which == 1 {
                loss::loss1(t, &pairs, &gt, 0.8)?
            } else {
                loss::loss2(t, &pairs, &gt, 0.8)?
            };
            // the probe projection squares nothing, so keep a smooth scalar
            t.reshape(l, &[1])
        }));
    }
    v
}

/// End-to-end forward and loss with gradients flowing through the fed-back
/// flow. Starts from a fractional flow so lookups avoid the integer kinks
/// of bilinear interpolation.
fn model_checks(tol: f64) -> Vec<CheckResult> {
    let mut v = Vec::new();
    for variant in [Variant::Sstm, Variant::SstmPlusPlus] {
        let mut c = small_config(variant);
        c.detach_flow = false;
        c.iters = 2;
        let name = format!("model_{variant}").replace("++", "pp");
        let store = match model::init_weights(&c, 3) {
            Ok(s) => s,
            Err(e) => {
                v.push(CheckResult::failed(GRAD, name, &e));
                continue;
            }
        };
        let mut r = rng(31);
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&mut r, &[3, 64, 64], 0.0, 1.0)).collect();
        let init = FlowPair {
            f1: uniform(&mut r, &[2, 8, 8], -0.45, 0.45).map(|x| x + 0.23).cast(),
            f2: uniform(&mut r, &[2, 8, 8], -0.45, 0.45).map(|x| x + 0.31).cast(),
            resolution: Resolution::Eighth,
        };
        let gt = gt_sample(&mut r, 64, 64);
        v.push(composite(&name, &store, vec![], 1, tol, move |t, p, _| {
            let u = forward_on_tape(t, p, &c, &frames, Some(&init))?;
            let l = loss::loss1(t, &u.preds, &gt, 0.8)?;
            t.reshape(l, &[1])
        }));
    }
    v
}

// ---- oracle suite ------------------------------------------------------------

const ORACLE: &str = "oracle";

fn oracle_op(name: &str, tol: f64, cases: usize, mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> CheckResult {
    let mut r = rng(crate::params::name_seed(name));
    let mut worst = 0.0f64;
    for i in 0..cases {
        match case(&mut r) {
            Ok(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
            Err(err) => return CheckResult::failed(ORACLE, name, &Error::InvalidArgument(format!("case {i}: {err}"))),
        }
    }
    let mut c = CheckResult::measured(ORACLE, name, worst, tol);
    c.detail = format!("cases={cases}");
    c
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

pub fn oracle_suite(opts: Options) -> Vec<CheckResult> {
    let tol = opts.tol.unwrap_or(ORACLE_TOL);
    let n = ORACLE_CASES;
    let mut v = Vec::new();

    v.push(oracle_op("corr_all_pairs", tol, n, |r| {
        let (d, h, w) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
        let a = uniform(r, &[d, h, w], -1.0, 1.0);
        let b = uniform(r, &[d, h, w], -1.0, 1.0);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = correlation::corr_all_pairs(&mut t, va, vb)?;
        Ok(max_diff(t.value(c), &oracle::corr_all_pairs(&a, &b)))
    }));

    v.push(oracle_op("lookup", tol, n, |r| {
        let levels = r.gen_range(1..4);
        let need = 1usize << (levels - 1);
        let (d, h, w) = (r.gen_range(1..4), r.gen_range(need..need + 5), r.gen_range(need..need + 5));
        let radius = r.gen_range(0..3);
        let a = uniform(r, &[d, h, w], -1.0, 1.0);
        let b = uniform(r, &[d, h, w], -1.0, 1.0);
        let flow = uniform(r, &[2, h, w], -4.0, 4.0);
        let vol = oracle::corr_all_pairs(&a, &b);
        let want = oracle::lookup(&oracle::pyramid(&vol, levels), &flow, radius);
        let mut t = Tape::new();
        let vv = t.constant(vol);
        let pyr = correlation::build_pyramid(&mut t, vv, levels)?;
        let f = t.constant(flow);
        let got = correlation::lookup(&mut t, &pyr, f, radius)?;
        Ok(max_diff(t.value(got), &want))
    }));

    v.push(oracle_op("conv_axis", tol, n, |r| {
        let rank = r.gen_range(3..5);
        let mut shape: Vec<usize> = (0..rank).map(|_| r.gen_range(3..7)).collect();
        shape[0] = r.gen_range(1..4);
        let axis = [ConvAxis::X, ConvAxis::Y, ConvAxis::T][r.gen_range(0..if rank == 4 { 3 } else { 2 })];
        let k = [1usize, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=(k / 2));
        let cout = r.gen_range(1..4);
        let x = uniform(r, &shape, -1.0, 1.0);
        let kern = uniform(r, &[cout, shape[0], k], -1.0, 1.0);
        let want = oracle::conv_axis(&x, &kern, axis, stride, pad);
        let mut t = Tape::new();
        let (vx, vk) = (t.constant(x), t.constant(kern));
        let got = t.conv_axis(vx, vk, axis, stride, pad)?;
        Ok(max_diff(t.value(got), &want))
    }));

    v.push(oracle_op("bilinear_sample", tol, n, |r| {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7));
        let (ho, wo) = (r.gen_range(1..5), r.gen_range(1..5));
        let map = uniform(r, &[c, h, w], -1.0, 1.0);
        let coords = uniform(r, &[2, ho, wo], -2.0, 8.0);
        let want = oracle::bilinear_sample(&map, &coords);
        let mut t = Tape::new();
        let (vm, vc) = (t.constant(map), t.constant(coords));
        let got = t.bilinear_sample(vm, vc)?;
        Ok(max_diff(t.value(got), &want))
    }));

    v.push(oracle_op("avg_pool2", tol, n, |r| {
        let shape = [r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..8)];
        let x = uniform(r, &shape, -1.0, 1.0);
        let want = oracle::avg_pool2(&x);
        let mut t = Tape::new();
        let vx = t.constant(x);
        let got = t.avg_pool2(vx)?;
        Ok(max_diff(t.value(got), &want))
    }));

    v.push(oracle_op("attend", tol, n, |r| {
        let (lc, lm, dk) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
        let ctx = uniform(r, &[lc, h, w], -1.0, 1.0);
        let mot = uniform(r, &[lm, h, w], -1.0, 1.0);
        let wq = uniform(r, &[lc, dk], -1.0, 1.0);
        let wk = uniform(r, &[lc, dk], -1.0, 1.0);
        let wv = uniform(r, &[lm, lm], -1.0, 1.0);
        let alpha = r.gen_range(-1.0..1.0);
        let want = oracle::attend(&ctx, &mot, &wq, &wk, &wv, alpha);
        let mut t = Tape::new();
        let aw = AttentionWeights {
            w_q: t.constant(wq),
            w_k: t.constant(wk),
            w_v: t.constant(wv),
            alpha: t.constant(Tensor::from_fn(&[1], |_| alpha)),
            heads: 1,
        };
        let (vc, vm) = (t.constant(ctx), t.constant(mot));
        let got = attention::attend(&mut t, vc, vm, &aw)?;
        Ok(max_diff(t.value(got), &want))
    }));

    v.push(oracle_op("gru_step", tol, n, |r| {
        let (hd, xd) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let mut init = ParamInit::new(r.gen());
        update::register_gru(&mut init, hd, xd)?;
        let mut store = init.finish();
        // nonzero biases so the bias path is exercised
        for (name, t) in store.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
            }
        }
        let hs = uniform(r, &[hd, 2, h, w], -1.0, 1.0);
        let xs = uniform(r, &[xd, 2, h, w], -1.0, 1.0);
        let gate = |g: &str| -> Result<oracle::GateWeights> {
            let get = |s: &str| {
                store
                    .get(&format!("gru.{g}.{s}"))
                    .map(|t| t.cast::<f64>())
                    .ok_or_else(|| Error::InvalidArgument(format!("gru.{g}.{s} missing")))
            };
            Ok(oracle::GateWeights {
                x: get("x.weight")?,
                y: get("y.weight")?,
                t: get("t.weight")?,
                bias: get("t.bias")?.into_data(),
            })
        };
        let want = oracle::gru_step(&hs, &xs, &gate("z")?, &gate("r")?, &gate("q")?);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let (vh, vx) = (t.constant(hs), t.constant(xs));
        let (got, _) = update::gru_step(&mut t, &p, vh, vx)?;
        Ok(max_diff(t.value(got), &want))
    }));
    v
}

// ---- invariants suite -------------------------------------------------------

const INV: &str = "invariants";

fn inv(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((ok, detail)) => CheckResult::boolean(INV, name, ok, detail),
        Err(e) => CheckResult::failed(INV, name, &e),
    }
}

fn inv_measured(name: &str, tol: f64, f: impl FnOnce() -> Result<f64>) -> CheckResult {
    match f() {
        Ok(e) => CheckResult::measured(INV, name, e, tol),
        Err(e) => CheckResult::failed(INV, name, &e),
    }
}

pub fn invariant_suite() -> Vec<CheckResult> {
    let mut v = structural_checks();
    v.extend(behavioral_checks());
    v
}

/// Shape and schedule laws of the full-width model.
pub fn structural_checks() -> Vec<CheckResult> {
    let mut v = Vec::new();
    for variant in [Variant::Sstm, Variant::SstmPlusPlus] {
        v.push(inv(&format!("param_count_independent_of_iters_{variant}").replace("++", "pp"), || {
            let mut a = ModelConfig::preset(variant);
            let mut b = a.clone();
            a.iters = 4;
            b.iters = 12;
            let (na, nb) = (
                model::init_weights(&a, 0)?.num_scalars(),
                model::init_weights(&b, 0)?.num_scalars(),
            );
            Ok((na == nb, format!("N=4: {na}, N=12: {nb}")))
        }));
    }
    v.push(inv("corr_channels_324", || {
        let c = ModelConfig::sstm();
        let spec = CorrSpec::new(c.corr_levels, c.corr_radius, true)?;
        let mut r = rng(41);
        let mut t = Tape::<f64>::new();
        let fm: Vec<Var> = (0..3).map(|_| t.constant(uniform(&mut r, &[8, 8, 9], -1.0, 1.0))).collect();
        let st = CorrState::new(&mut t, fm[0], fm[1], fm[2], spec)?;
        let f1 = t.constant(Tensor::zeros(&[2, 8, 9]));
        let f2 = t.constant(Tensor::zeros(&[2, 8, 9]));
        let out = st.features(&mut t, f1, f2)?;
        let s = t.shape(out).to_vec();
        Ok((s == [324, 2, 8, 9], format!("{s:?}")))
    }));
    v.push(inv("feature_map_256_at_eighth", || {
        let c = ModelConfig::sstm();
        let mut init = ParamInit::new(0);
        encoders::register_feature_encoder(&mut init, c.feature_dim)?;
        let p = init.finish();
        let mut t = Tape::<f32>::new();
        let b = p.bind(&mut t, false);
        let x = t.constant(Tensor::from_fn(&[3, 16, 24], |i| ((i % 13) as f32) / 6.0 - 1.0));
        let y = encoders::feature_encode(&mut t, &b, x)?;
        let s = t.shape(y).to_vec();
        Ok((s == [256, 2, 3], format!("{s:?}")))
    }));
    v.push(inv("context_128x2_at_eighth", || {
        let c = ModelConfig::sstm();
        let mut init = ParamInit::new(0);
        encoders::register_context_3d(&mut init, c.context_dim)?;
        let p = init.finish();
        let mut t = Tape::<f32>::new();
        let b = p.bind(&mut t, false);
        let x = t.constant(Tensor::from_fn(&[3, 3, 16, 24], |i| ((i % 11) as f32) / 5.0 - 1.0));
        let y = encoders::context_encode_3d(&mut t, &b, c.context_dim, x)?;
        let s = t.shape(y).to_vec();
        Ok((s == [128, 2, 2, 3], format!("{s:?}")))
    }));
    for (n, r, hand) in [(4usize, 2usize, vec![2usize, 4]), (12, 3, vec![3, 6, 9, 12])] {
        v.push(inv(&format!("residual_schedule_n{n}_r{r}"), || {
            let got: Vec<usize> = (1..=n).filter(|&k| update::residual_applies(k, r)).collect();
            Ok((got == hand, format!("steps {got:?}")))
        }));
        v.push(inv_measured(&format!("residual_unroll_n{n}_r{r}"), 1e-6, || residual_unroll(n, r)));
    }
    v
}

/// Replays the hidden-state recursion by hand from a traced forward pass:
/// `h_n = g_n + h_{n-r}` on residual steps and `h_n = g_n` otherwise,
/// with `h_0` the initial state.
fn residual_unroll(n: usize, r: usize) -> Result<f64> {
    let mut c = small_config(Variant::Sstm);
    c.iters = n;
    c.residual_interval = r;
    let store = model::init_weights(&c, 9)?;
    let mut rr = rng(43);
    let frames: Vec<Tensor<f32>> = (0..3).map(|_| uniform(&mut rr, &[3, 64, 64], 0.0, 1.0).cast()).collect();
    let mut t = Tape::<f32>::new();
    let p = store.bind(&mut t, false);
    let u = forward_on_tape(&mut t, &p, &c, &frames, None)?;
    let mut states = vec![t.value(u.h0).clone()];
    let mut worst = 0.0f32;
    for k in 1..=n {
        let g = t.value(u.gru_out[k - 1]);
        let want = if k % r == 0 {
            let prev = &states[k - r];
            Tensor::from_fn(g.shape(), |i| g.data()[i] + prev.data()[i])
        } else {
            g.clone()
        };
        worst = worst.max(t.value(u.hidden[k - 1]).max_abs_diff(&want));
        states.push(want);
    }
    Ok(f64::from(worst))
}

/// Behavioural laws of the update operator and losses.
pub fn behavioral_checks() -> Vec<CheckResult> {
    let mut v = Vec::new();
    v.push(inv("gru_state_bounded", || {
        let mut r = rng(51);
        let mut init = ParamInit::new(3);
        update::register_gru(&mut init, 4, 6)?;
        let mut store = init.finish();
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|w| *w *= 20.0);
        }
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let mut t = Tape::<f64>::new();
            let p = store.bind(&mut t, false);
            let h = t.constant(uniform(&mut r, &[4, 2, 5, 5], -1.0, 1.0));
            let x = t.constant(uniform(&mut r, &[6, 2, 5, 5], -50.0, 50.0));
            let (hn, _) = update::gru_step(&mut t, &p, h, x)?;
            worst = worst.max(t.value(hn).max_abs());
        }
        Ok((worst <= 1.0, format!("max |h| = {worst:.6}")))
    }));
    v.push(inv_measured("attention_alpha0_passthrough", 0.0, || {
        let mut r = rng(52);
        let mut t = Tape::<f64>::new();
        let aw = AttentionWeights {
            w_q: t.constant(uniform(&mut r, &[3, 4], -1.0, 1.0)),
            w_k: t.constant(uniform(&mut r, &[3, 4], -1.0, 1.0)),
            w_v: t.constant(uniform(&mut r, &[5, 5], -1.0, 1.0)),
            alpha: t.constant(Tensor::zeros(&[1])),
            heads: 1,
        };
        let m = uniform(&mut r, &[5, 3, 4], -1.0, 1.0);
        let c = t.constant(uniform(&mut r, &[3, 3, 4], -1.0, 1.0));
        let vm = t.constant(m.clone());
        let y = attention::attend(&mut t, c, vm, &aw)?;
        Ok(t.value(y).max_abs_diff(&m))
    }));
    v.push(inv_measured("warp_zero_flow_identity", 0.0, || {
        let mut r = rng(53);
        let map = uniform(&mut r, &[3, 5, 7], -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let vm = t.constant(map.clone());
        let f = t.constant(Tensor::zeros(&[2, 5, 7]));
        let y = update::warp(&mut t, vm, f)?;
        Ok(t.value(y).max_abs_diff(&map))
    }));
    v.push(inv_measured("warp_errors_zero_when_aligned", 1e-12, || {
        // fmap2 is fmap1 shifted right by one pixel, fmap3 by two; the
        // matching flows are +1 px. Border columns are excluded.
        let mut r = rng(54);
        let (c, h, w) = (4, 6, 9);
        let base = uniform(&mut r, &[c, h, w + 2], -1.0, 1.0);
        let shifted = |s: usize| Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            base.at(&[ch, y, x + 2 - s])
        });
        let mut t = Tape::<f64>::new();
        let fm = [t.constant(shifted(0)), t.constant(shifted(1)), t.constant(shifted(2))];
        let one = Tensor::from_fn(&[2, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
        let f1 = t.constant(one.clone());
        let f2 = t.constant(one);
        let e = update::brightness_errors(&mut t, fm, f1, f2)?;
        let ev = t.value(e);
        let mut worst = 0.0f64;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w - 2 {
                    worst = worst.max(ev.at(&[ch, y, x]).abs());
                }
            }
        }
        Ok(worst)
    }));
    v.push(inv_measured("warp_errors_zero_identical_frames", 0.0, || {
        let mut r = rng(55);
        let f = uniform(&mut r, &[4, 5, 6], -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let fm = [t.constant(f.clone()), t.constant(f.clone()), t.constant(f)];
        let z1 = t.constant(Tensor::zeros(&[2, 5, 6]));
        let z2 = t.constant(Tensor::zeros(&[2, 5, 6]));
        let e = update::brightness_errors(&mut t, fm, z1, z2)?;
        Ok(t.value(e).max_abs())
    }));
    v.extend(loss_laws());
    v.push(inv_measured("ablation_alpha0_matches_sstm", 1e-5, ablation_alpha0_gap));
    v
}

fn loss_laws() -> Vec<CheckResult> {
    let mut v = Vec::new();
    let (h, w) = (4, 5);
    let mut r = rng(56);
    let gt = gt_sample(&mut r, h, w);
    let g1 = gt.gt_f1.clone().unwrap_or_else(|| Tensor::zeros(&[2, h, w]));
    let g2 = gt.gt_f2.clone().unwrap_or_else(|| Tensor::zeros(&[2, h, w]));
    let perfect: Vec<FlowPair> = (0..3)
        .map(|_| FlowPair {
            f1: g1.clone(),
            f2: g2.clone(),
            resolution: Resolution::Full,
        })
        .collect();
    v.push(inv_measured("loss1_zero_on_perfect", 0.0, || loss::loss1_value(&perfect, &gt, 0.8)));
    v.push(inv_measured("loss2_zero_on_perfect", 0.0, || {
        let mut off = perfect.clone();
        for p in &mut off {
            p.f1 = p.f1.map(|x| x + 5.0);
        }
        loss::loss2_value(&off, &gt, 0.8)
    }));
    v.push(inv_measured("loss_gamma_weighting", 1e-6, || {
        // constant offsets e_i on f²: loss2 = Σ γ^{N-i} · 2|e_i| (two
        // components, averaged over pixels)
        let gt2 = GtSample {
            valid1: None,
            ..gt.clone()
        };
        let offs = [1.5f64, -0.5, 0.25];
        let preds: Vec<FlowPair> = offs
            .iter()
            .map(|&e| FlowPair {
                f1: g1.clone(),
                f2: g2.map(|x| x + e as f32),
                resolution: Resolution::Full,
            })
            .collect();
        let gamma = 0.8f64;
        let want: f64 = offs
            .iter()
            .enumerate()
            .map(|(i, e)| gamma.powi((offs.len() - 1 - i) as i32) * 2.0 * e.abs())
            .sum();
        let got = loss::loss2_value(&preds, &gt2, gamma)?;
        let l1 = loss::loss1_value(&preds, &gt2, gamma)?;
        // f¹ is perfect, so loss1 is half of loss2
        Ok((got - want).abs().max((l1 - want / 2.0).abs()))
    }));
    v
}

/// SSTM weights embedded in an SSTM++ layout with `α = 0`, 3D context and
/// no warp errors reproduce the SSTM forward pass.
pub fn ablation_alpha0_gap() -> Result<f64> {
    let mut src = ModelConfig::sstm().toy();
    src.feature_dim = 16;
    src.context_dim = 8;
    src.hidden_dim = 8;
    src.motion_dim = 8;
    src.key_dim = 8;
    let mut dst = ModelConfig::sstm_pp().toy();
    dst.feature_dim = 16;
    dst.context_dim = 8;
    dst.hidden_dim = 8;
    dst.motion_dim = 8;
    dst.key_dim = 8;
    dst.context_mode = ContextMode::Conv3d;
    dst.use_warp_errors = false;
    dst.freeze_alpha = true;
    let ws = model::init_weights(&src, 17)?;
    let wd = model::embed_without_attention(&ws, &src, &dst)?;
    let mut r = rng(57);
    let frames: [Tensor<f32>; 3] = std::array::from_fn(|_| uniform(&mut r, &[3, 64, 72], 0.0, 1.0).cast());
    let a = model::Model::from_parts(src, ws)?.forward(&frames, None)?;
    let b = model::Model::from_parts(dst, wd)?.forward(&frames, None)?;
    let mut worst = 0.0f32;
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(x.f1.max_abs_diff(&y.f1)).max(x.f2.max_abs_diff(&y.f2));
    }
    Ok(f64::from(worst))
}

/// Runs a suite and times it.
pub fn run_timed(suite: Suite, opts: Options) -> (Vec<CheckResult>, f64) {
    let t = Instant::now();
    let r = run(suite, opts);
    (r, t.elapsed().as_secs_f64())
}
