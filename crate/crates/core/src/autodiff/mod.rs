//! Reverse-mode differentiation over a recording tape.
//!
//! A [`Tape`] owns every value computed under it. Operations append nodes
//! and return [`Var`] handles; [`Tape::backward`] replays the records in
//! reverse and accumulates gradients on every `requires_grad` leaf.
//! Gradients add up across repeated `backward` calls until
//! [`Tape::zero_grad`].

mod kernels;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

pub use kernels::ConvAxis;
use kernels::{ConvGeom, LookupGeom};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);
static BILINEAR_SIGN_FLIP: AtomicBool = AtomicBool::new(false);

/// Mutation hook for the self-test: flips the sign of the coordinate
/// gradient of [`Tape::bilinear_sample`]. Never enable outside of tests.
pub fn inject_bilinear_sign_flip(on: bool) {
    BILINEAR_SIGN_FLIP.store(on, Ordering::SeqCst);
}

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    AddBias(Var, Var),
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Bilinear(Var, Var),
    AvgPool2(Var),
    Upsample(Var, usize),
    ChannelNorm(Var),
    InstanceNorm(Var, Vec<T>),
    Lookup {
        vol: Var,
        flow: Var,
        geom: LookupGeom,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record. Previously issued handles become invalid.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Autodiff(format!("{v:?} is not on this tape")));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || matches!(op, Op::Leaf),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies `x` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.nodes[x.idx].value.clone();
        Ok(self.constant(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.tape, self.id, "var from another tape");
        self.nodes[v.idx].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.idx].value;
        let out = match f {
            Unary::Sigmoid => xv.map(|v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            }),
            Unary::Tanh => xv.map(|v| v.tanh()),
            Unary::Relu => xv.map(|v| v.max(T::zero())),
            Unary::Abs => xv.map(|v| v.abs()),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(x, f), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Elementwise binary op; either operand may be a one-element scalar.
    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        let shape = if av.shape() == bv.shape() || bv.len() == 1 {
            av.shape().to_vec()
        } else if av.len() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(shape_err!(
                "{f:?} operands {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let ai = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bi = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        let data: Vec<T> = match f {
            Binary::Add => (0..n).map(|i| ai(i) + bi(i)).collect(),
            Binary::Sub => (0..n).map(|i| ai(i) - bi(i)).collect(),
            Binary::Mul => (0..n).map(|i| ai(i) * bi(i)).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary(a, b, f), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.idx].value.map(|v| v + c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddScalar(x), rg))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -T::one())?;
        self.add_scalar(n, T::one())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.idx].value.sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.idx].value.len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.nodes[x.idx].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.idx].value).collect();
        let v = Tensor::concat(&vals, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.nodes[x.idx].value.narrow(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Narrow(x, axis, start), rg))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (&self.nodes[x.idx].value, &self.nodes[bias.idx].value);
        let c = xv.shape()[0];
        if bv.len() != c {
            return Err(shape_err!("bias of {} for {c} channels", bv.len()));
        }
        let per = xv.len() / c;
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i / per];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// 1D cross-correlation along `axis` with zero padding. `kernel` is
    /// `out_channels × in_channels × k`.
    pub fn conv_axis(
        &mut self,
        x: Var,
        kernel: Var,
        axis: ConvAxis,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        let (xv, kv) = (&self.nodes[x.idx].value, &self.nodes[kernel.idx].value);
        let geom = ConvGeom::new(xv.shape(), kv.shape(), axis, stride, pad)?;
        let ax = axis.index(xv.rank())?;
        let out = kernels::conv_axis_forward(xv.data(), kv.data(), &geom);
        let shape = geom.out_shape(xv.shape(), ax);
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv {
                x,
                k: kernel,
                geom,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err!("matmul {:?} × {:?}", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = kernels::matmul_forward(av.data(), bv.data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.idx].value;
        if av.rank() != 2 {
            return Err(shape_err!("transpose of rank-{} tensor", av.rank()));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = kernels::transpose2(av.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.idx].value;
        if axis >= xv.rank() {
            return Err(shape_err!("softmax axis {axis} of {:?}", xv.shape()));
        }
        let outer = xv.shape()[..axis].iter().product();
        let len = xv.shape()[axis];
        let inner = xv.shape()[axis + 1..].iter().product();
        let out = kernels::softmax_forward(xv.data(), outer, len, inner);
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    // ---- sampling ----------------------------------------------------

    /// Samples `map` (C×H×W) at absolute positions `coords` (2×Ho×Wo,
    /// x then y) with bilinear interpolation, clamping to the border.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        self.check(map)?;
        self.check(coords)?;
        let (mv, cv) = (&self.nodes[map.idx].value, &self.nodes[coords.idx].value);
        if mv.rank() != 3 || cv.rank() != 3 || cv.shape()[0] != 2 {
            return Err(shape_err!(
                "bilinear_sample map {:?} coords {:?}",
                mv.shape(),
                cv.shape()
            ));
        }
        let dims = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let (ho, wo) = (cv.shape()[1], cv.shape()[2]);
        let out = kernels::bilinear_forward(mv.data(), dims, cv.data(), ho * wo);
        let rg = self.rg(&[map, coords]);
        Ok(self.push(
            Tensor::new(&[dims.0, ho, wo], out)?,
            Op::Bilinear(map, coords),
            rg,
        ))
    }

    /// 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.idx].value;
        let r = xv.rank();
        if r < 2 {
            return Err(shape_err!("avg_pool2 needs rank >= 2, got {:?}", xv.shape()));
        }
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let planes = xv.len() / (h * w);
        let out = kernels::avg_pool2_forward(xv.data(), planes, h, w);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = h.div_ceil(2);
        shape[r - 1] = w.div_ceil(2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2(x), rg))
    }

    /// Bilinear upsampling of the last two axes by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor 0".into()));
        }
        let xv = &self.nodes[x.idx].value;
        let r = xv.rank();
        if r < 2 {
            return Err(shape_err!("upsample needs rank >= 2, got {:?}", xv.shape()));
        }
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let planes = xv.len() / (h * w);
        let out = kernels::upsample_forward(xv.data(), planes, h, w, factor);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = h * factor;
        shape[r - 1] = w * factor;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample(x, factor), rg))
    }

    /// Correlation window lookup: for each query pixel `q` of an `h×w`
    /// grid, samples a `(2r+1)²` window of plane `q` of `vol`
    /// (`(h·w)×th×tw`) centered at `(pixel + flow)/scale`.
    pub fn corr_lookup(&mut self, vol: Var, flow: Var, radius: usize, scale: usize) -> Result<Var> {
        self.check(vol)?;
        self.check(flow)?;
        let (vv, fv) = (&self.nodes[vol.idx].value, &self.nodes[flow.idx].value);
        if fv.rank() != 3 || fv.shape()[0] != 2 || vv.rank() != 3 {
            return Err(shape_err!(
                "corr_lookup vol {:?} flow {:?}",
                vv.shape(),
                fv.shape()
            ));
        }
        let (h, w) = (fv.shape()[1], fv.shape()[2]);
        if vv.shape()[0] != h * w {
            return Err(shape_err!(
                "corr_lookup: volume has {} rows for a {h}×{w} grid",
                vv.shape()[0]
            ));
        }
        if scale == 0 {
            return Err(Error::InvalidArgument("lookup scale 0".into()));
        }
        let geom = LookupGeom {
            h,
            w,
            th: vv.shape()[1],
            tw: vv.shape()[2],
            radius,
            scale,
        };
        let out = kernels::lookup_forward(vv.data(), fv.data(), &geom);
        let rg = self.rg(&[vol, flow]);
        Ok(self.push(
            Tensor::new(&[geom.window(), h, w], out)?,
            Op::Lookup { vol, flow, geom },
            rg,
        ))
    }

    // ---- normalization -----------------------------------------------

    /// Euclidean norm across axis 0; output has a leading extent of 1.
    /// The gradient at a zero norm is taken as zero.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.idx].value;
        let c = xv.shape()[0];
        let per = xv.len() / c;
        let mut out = vec![T::zero(); per];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&xv.data()[ch * per..(ch + 1) * per]) {
                *o += v * v;
            }
        }
        for o in &mut out {
            *o = o.sqrt();
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ChannelNorm(x), rg))
    }

    /// Zero-mean unit-variance normalization per channel (axis 0).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.idx].value;
        let (out, inv) = kernels::instance_norm_forward(xv.data(), xv.shape()[0], eps);
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::InstanceNorm(x, inv), rg))
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulates `d(root)/d(leaf)` into the grad of every
    /// `requires_grad` leaf. `root` must be a one-element tensor.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.nodes[root.idx].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward from non-scalar root of shape {:?}",
                self.nodes[root.idx].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.idx).map(|_| None).collect();
        adj[root.idx] = Some(vec![T::one()]);
        for i in (0..=root.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            for (parent, contrib) in self.vjp(i, g)? {
                if !self.nodes[parent.idx].requires_grad {
                    continue;
                }
                match &mut adj[parent.idx] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contrib) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each parent.
    fn vjp(&self, i: usize, g: Vec<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.idx].value;
        let rg = |v: Var| self.nodes[v.idx].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(x, f) => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let d: Vec<T> = match f {
                    Unary::Sigmoid => g
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    Unary::Tanh => g
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                vec![(*x, d)]
            }
            Op::Binary(a, b, f) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let reduce = |full: Vec<T>, target_len: usize| -> Vec<T> {
                    if target_len == 1 && full.len() != 1 {
                        vec![full.into_iter().sum()]
                    } else {
                        full
                    }
                };
                let ai = |k: usize| if ad.len() == 1 { ad[0] } else { ad[k] };
                let bi = |k: usize| if bd.len() == 1 { bd[0] } else { bd[k] };
                let mut res = Vec::new();
                if rg(*a) {
                    let da: Vec<T> = match f {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => g.iter().enumerate().map(|(k, &gv)| gv * bi(k)).collect(),
                    };
                    res.push((*a, reduce(da, ad.len())));
                }
                if rg(*b) {
                    let db: Vec<T> = match f {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.iter().map(|&v| -v).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(k, &gv)| gv * ai(k)).collect(),
                    };
                    res.push((*b, reduce(db, bd.len())));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g)],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut res = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let ext = val(*p).shape()[*axis];
                    if rg(*p) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        res.push((*p, d));
                    }
                    off += ext;
                }
                res
            }
            Op::Narrow(x, axis, start) => {
                let xs = val(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let ext = xs[*axis];
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, d)]
            }
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                let per = g.len() / c;
                let mut db = vec![T::zero(); c];
                for (k, &gv) in g.iter().enumerate() {
                    db[k / per] += gv;
                }
                vec![(*x, g), (*b, db)]
            }
            Op::Conv { x, k, geom } => {
                let (dx, dk) = kernels::conv_axis_backward(
                    val(*x).data(),
                    val(*k).data(),
                    &g,
                    geom,
                    rg(*x),
                    rg(*k),
                );
                let mut res = Vec::new();
                if rg(*x) {
                    res.push((*x, dx));
                }
                if rg(*k) {
                    res.push((*k, dk));
                }
                res
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, kk, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut res = Vec::new();
                if rg(*a) {
                    let bt = kernels::transpose2(bv.data(), kk, m);
                    res.push((*a, kernels::matmul_forward(&g, &bt, n, m, kk)));
                }
                if rg(*b) {
                    let at = kernels::transpose2(av.data(), n, kk);
                    res.push((*b, kernels::matmul_forward(&at, &g, kk, n, m)));
                }
                res
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                vec![(*a, kernels::transpose2(&g, s[1], s[0]))]
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => vec![(
                *x,
                kernels::softmax_backward(node.value.data(), &g, *outer, *len, *inner),
            )],
            Op::Bilinear(map, coords) => {
                let (mv, cv) = (val(*map), val(*coords));
                let dims = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
                let npix = cv.shape()[1] * cv.shape()[2];
                let (dm, dc) = kernels::bilinear_backward(
                    mv.data(),
                    dims,
                    cv.data(),
                    npix,
                    &g,
                    BILINEAR_SIGN_FLIP.load(Ordering::Relaxed),
                );
                vec![(*map, dm), (*coords, dc)]
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes = val(*x).len() / (h * w);
                vec![(*x, kernels::avg_pool2_backward(&g, planes, h, w))]
            }
            Op::Upsample(x, factor) => {
                let s = val(*x).shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes = val(*x).len() / (h * w);
                vec![(*x, kernels::upsample_backward(&g, planes, h, w, *factor))]
            }
            Op::ChannelNorm(x) => {
                let xv = val(*x);
                let per = node.value.len();
                let nv = node.value.data();
                let mut d = vec![T::zero(); xv.len()];
                for (k, (dv, &xk)) in d.iter_mut().zip(xv.data()).enumerate() {
                    let p = k % per;
                    if nv[p] > T::zero() {
                        *dv = g[p] * xk / nv[p];
                    }
                }
                vec![(*x, d)]
            }
            Op::InstanceNorm(x, inv) => vec![(
                *x,
                kernels::instance_norm_backward(node.value.data(), inv, &g),
            )],
            Op::Lookup { vol, flow, geom } => {
                let (dv, df) = kernels::lookup_backward(
                    val(*vol).data(),
                    val(*flow).data(),
                    geom,
                    &g,
                    rg(*vol),
                );
                let mut res = vec![(*flow, df)];
                if rg(*vol) {
                    res.push((*vol, dv));
                }
                res
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_box_filter_on_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 5]));
        let k = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.conv_axis(x, k, ConvAxis::X, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[1, 4, 5], |i| (i as f64 * 0.37).sin());
        let x = tape.constant(xv.clone());
        let k = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        for axis in [ConvAxis::X, ConvAxis::Y] {
            let y = tape.conv_axis(x, k, axis, 1, 1).unwrap();
            assert_eq!(tape.value(y), &xv);
        }
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3]));
        assert!(matches!(
            tape.conv_axis(x, k, ConvAxis::X, 1, 1),
            Err(Error::Shape(_))
        ));
        let k2 = tape.constant(Tensor::ones(&[1, 2, 7]));
        assert!(tape.conv_axis(x, k2, ConvAxis::X, 1, 1).is_err());
        let k3 = tape.constant(Tensor::ones(&[1, 2, 3]));
        assert!(tape.conv_axis(x, k3, ConvAxis::T, 1, 1).is_err());
        assert!(tape.conv_axis(x, k3, ConvAxis::X, 9, 1).is_err());
    }

    #[test]
    fn sigmoid_and_tanh_ranges() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[4], vec![0.0, -30.0, 30.0, 3.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let th = tape.tanh(x).unwrap();
        // f32 saturates to exactly ±1 beyond ~9; the open range holds for moderate inputs.
        assert!(tape.value(th).data()[3].abs() < 1.0);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        tape.zero_grad();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
        let mut other = Tape::<f64>::new();
        let y = other.param(t(&[1], &[1.0]));
        assert!(matches!(tape.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn clear_frees_records() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let _ = tape.sum(x).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
        assert!(tape.sum(x).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.param(t(&[1], &[2.0]));
        let m = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 4.0, 6.0]);
        let r = tape.sum(m).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
        let b = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn softmax_limits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 1.0, 1.0, 0.0, 0.0, 800.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(v[3] < 1e-300 && (v[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn avg_pool_arithmetic_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let odd = tape.constant(Tensor::full(&[3, 3], 7.0));
        let y = tape.avg_pool2(odd).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn bilinear_identity_and_shift() {
        let (h, w) = (4, 5);
        let mut tape = Tape::<f32>::new();
        let mv = Tensor::from_fn(&[2, h, w], |i| (i as f32 * 1.3).cos());
        let map = tape.constant(mv.clone());
        let grid = Tensor::from_fn(&[2, h, w], |i| {
            let p = i % (h * w);
            if i < h * w {
                (p % w) as f32
            } else {
                (p / w) as f32
            }
        });
        let c = tape.constant(grid.clone());
        let y = tape.bilinear_sample(map, c).unwrap();
        assert_eq!(tape.value(y), &mv);

        let mut shifted = grid;
        for v in &mut shifted.data_mut()[..h * w] {
            *v += 1.0;
        }
        let c = tape.constant(shifted);
        let y = tape.bilinear_sample(map, c).unwrap();
        let out = tape.value(y);
        for ch in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let src = (j + 1).min(w - 1);
                    assert_eq!(out.at(&[ch, i, j]), mv.at(&[ch, i, src]));
                }
            }
        }
    }

    #[test]
    fn upsample_constant() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2], 1.5));
        let y = tape.upsample_bilinear(x, 8).unwrap();
        assert_eq!(tape.shape(y), &[2, 24, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn channel_norm_zero_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[3.0, 0.0, 4.0, 0.0]));
        let n = tape.channel_norm(x).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0, 0.0]);
        let s = tape.sum(n).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.6, 0.0, 0.8, 0.0]);
    }
}
