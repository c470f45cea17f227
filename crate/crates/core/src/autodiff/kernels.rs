//! Forward and backward loops for the non-elementwise operators.
//!
//! Every loop has a fixed iteration order so results are bitwise
//! reproducible for a fixed input.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Real;

/// Axis a 1D convolution runs along. Tensors are `C×H×W` or `C×T×H×W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvAxis {
    X,
    Y,
    T,
}

impl ConvAxis {
    pub fn name(self) -> &'static str {
        match self {
            ConvAxis::X => "x",
            ConvAxis::Y => "y",
            ConvAxis::T => "t",
        }
    }

    /// Index of this axis in a tensor of the given rank.
    pub fn index(self, rank: usize) -> Result<usize> {
        match (self, rank) {
            (ConvAxis::X, r) if r >= 2 => Ok(r - 1),
            (ConvAxis::Y, r) if r >= 3 => Ok(r - 2),
            (ConvAxis::T, 4) => Ok(1),
            _ => Err(shape_err!(
                "axis {} is not defined for rank-{rank} tensors",
                self.name()
            )),
        }
    }
}

/// A tensor seen as `channels × outer × len × inner` around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisView {
    pub channels: usize,
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisView {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        debug_assert!(axis >= 1 && axis < shape.len());
        Self {
            channels: shape[0],
            outer: shape[1..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub view: AxisView,
    pub out_channels: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        k_shape: &[usize],
        axis: ConvAxis,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k_shape.len() != 3 {
            return Err(shape_err!("conv kernel must be O×C×k, got {k_shape:?}"));
        }
        let ax = axis.index(x_shape.len())?;
        let view = AxisView::new(x_shape, ax);
        if k_shape[1] != view.channels {
            return Err(shape_err!(
                "conv channel mismatch: input has {} channels, kernel expects {}",
                view.channels,
                k_shape[1]
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let padded = view.len + 2 * pad;
        if k_shape[2] > padded || stride > padded {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {} / stride {stride} exceed padded extent {padded} along {}",
                k_shape[2],
                axis.name()
            )));
        }
        Ok(Self {
            view,
            out_channels: k_shape[0],
            ksize: k_shape[2],
            stride,
            pad,
            out_len: (padded - k_shape[2]) / stride + 1,
        })
    }

    pub fn out_shape(&self, x_shape: &[usize], axis_index: usize) -> Vec<usize> {
        let mut s = x_shape.to_vec();
        s[0] = self.out_channels;
        s[axis_index] = self.out_len;
        s
    }

    /// Output positions `lo` whose input position `lo*stride + j - pad` is valid.
    fn valid_range(&self, j: usize) -> (usize, usize) {
        // li = lo*stride + j - pad in [0, len)
        let lo_min = if j >= self.pad {
            0
        } else {
            (self.pad - j).div_ceil(self.stride)
        };
        let lim = self.view.len + self.pad; // li < len  <=>  lo*stride + j < len + pad
        let lo_max = if lim > j {
            ((lim - j - 1) / self.stride + 1).min(self.out_len)
        } else {
            0
        };
        (lo_min, lo_max.max(lo_min))
    }
}

/// `y += a·x`, elementwise.
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

impl ConvGeom {
    /// Columns per output channel: `outer · out_len · inner`.
    fn cols(&self) -> usize {
        self.view.outer * self.out_len * self.view.inner
    }

    /// Calls `f(c·k + j, dst_offset, src_offset, n)` for every contiguous
    /// run shared by the input and the unfolded `(C·k) × cols` matrix.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let v = self.view;
        let (inner, len, lout) = (v.inner, v.len, self.out_len);
        for c in 0..v.channels {
            for j in 0..self.ksize {
                let (lo0, lo1) = self.valid_range(j);
                if lo0 >= lo1 {
                    continue;
                }
                let row = c * self.ksize + j;
                for ob in 0..v.outer {
                    let xb = (c * v.outer + ob) * len;
                    let cb = ob * lout;
                    if self.stride == 1 {
                        let li0 = lo0 + j - self.pad;
                        f(row, (cb + lo0) * inner, (xb + li0) * inner, (lo1 - lo0) * inner);
                    } else {
                        for lo in lo0..lo1 {
                            let li = lo * self.stride + j - self.pad;
                            f(row, (cb + lo) * inner, (xb + li) * inner, inner);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds `x` into a zero-padded `(C·k) × cols` matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let m = self.cols();
        let mut cols = vec![T::zero(); self.view.channels * self.ksize * m];
        self.for_each_run(|row, dst, src, n| {
            cols[row * m + dst..row * m + dst + n].copy_from_slice(&x[src..src + n]);
        });
        cols
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into `dx`.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let m = self.cols();
        self.for_each_run(|row, dst, src, n| {
            for (d, &c) in dx[src..src + n].iter_mut().zip(&cols[row * m + dst..row * m + dst + n]) {
                *d += c;
            }
        });
    }
}

pub(crate) fn conv_axis_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.cols();
    let ck = g.view.channels * g.ksize;
    let cols = g.im2col(x);
    let mut out = vec![T::zero(); g.out_channels * m];
    for (o, y) in out.chunks_exact_mut(m).enumerate() {
        for (r, col) in cols.chunks_exact(m).enumerate() {
            let w = k[o * ck + r];
            if w != T::zero() {
                axpy(y, w, col);
            }
        }
    }
    out
}

/// Returns `(dx, dk)` given the output adjoint `dy`.
pub(crate) fn conv_axis_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Vec<T>, Vec<T>) {
    let m = g.cols();
    let ck = g.view.channels * g.ksize;
    let mut dk = Vec::new();
    if want_dk {
        let cols = g.im2col(x);
        dk = vec![T::zero(); k.len()];
        for (o, d) in dy.chunks_exact(m).enumerate() {
            for (r, col) in cols.chunks_exact(m).enumerate() {
                dk[o * ck + r] = dot(d, col);
            }
        }
    }
    let mut dx = Vec::new();
    if want_dx {
        let mut dcols = vec![T::zero(); ck * m];
        for (r, dc) in dcols.chunks_exact_mut(m).enumerate() {
            for (o, d) in dy.chunks_exact(m).enumerate() {
                let w = k[o * ck + r];
                if w != T::zero() {
                    axpy(dc, w, d);
                }
            }
        }
        dx = vec![T::zero(); x.len()];
        g.col2im(&dcols, &mut dx);
    }
    (dx, dk)
}

pub(crate) fn matmul_forward<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose2<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Clamp-to-border setup for one bilinear coordinate: `(i0, i1, frac, inside)`.
/// `inside` is false when the coordinate was clamped, which zeroes its gradient.
#[inline]
pub(crate) fn interp_axis<T: Real>(p: T, extent: usize) -> (usize, usize, T, bool) {
    if extent == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::from_usize(extent - 1).unwrap();
    let (pc, inside) = if p < T::zero() {
        (T::zero(), false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    };
    let i0 = pc.floor().to_usize().unwrap().min(extent - 2);
    let frac = pc - T::from_usize(i0).unwrap();
    (i0, i0 + 1, frac, inside)
}

#[inline]
fn sample_plane<T: Real>(plane: &[T], w: usize, ys: (usize, usize, T), xs: (usize, usize, T)) -> T {
    let (y0, y1, fy) = ys;
    let (x0, x1, fx) = xs;
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
    top * (one - fy) + bot * fy
}

/// Partial derivatives of a bilinear sample w.r.t. its x and y position
/// (before clamp masking).
#[inline]
fn sample_plane_grad<T: Real>(
    plane: &[T],
    w: usize,
    ys: (usize, usize, T),
    xs: (usize, usize, T),
) -> (T, T) {
    let (y0, y1, fy) = ys;
    let (x0, x1, fx) = xs;
    let one = T::one();
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    let dx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
    (dx, dy)
}

#[inline]
fn scatter_plane<T: Real>(
    plane: &mut [T],
    w: usize,
    ys: (usize, usize, T),
    xs: (usize, usize, T),
    g: T,
) {
    let (y0, y1, fy) = ys;
    let (x0, x1, fx) = xs;
    let one = T::one();
    plane[y0 * w + x0] += g * (one - fy) * (one - fx);
    plane[y0 * w + x1] += g * (one - fy) * fx;
    plane[y1 * w + x0] += g * fy * (one - fx);
    plane[y1 * w + x1] += g * fy * fx;
}

/// `map`: C×H×W, `coords`: 2×Ho×Wo holding absolute (x, y). Output C×Ho×Wo.
pub(crate) fn bilinear_forward<T: Real>(
    map: &[T],
    (c, h, w): (usize, usize, usize),
    coords: &[T],
    npix: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * npix];
    for p in 0..npix {
        let (x0, x1, fx, _) = interp_axis(coords[p], w);
        let (y0, y1, fy, _) = interp_axis(coords[npix + p], h);
        for ch in 0..c {
            out[ch * npix + p] =
                sample_plane(&map[ch * h * w..(ch + 1) * h * w], w, (y0, y1, fy), (x0, x1, fx));
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    map: &[T],
    (c, h, w): (usize, usize, usize),
    coords: &[T],
    npix: usize,
    dy: &[T],
    sign_flip: bool,
) -> (Vec<T>, Vec<T>) {
    let mut dmap = vec![T::zero(); map.len()];
    let mut dcoords = vec![T::zero(); coords.len()];
    for p in 0..npix {
        let (x0, x1, fx, xin) = interp_axis(coords[p], w);
        let (y0, y1, fy, yin) = interp_axis(coords[npix + p], h);
        let ys = (y0, y1, fy);
        let xs = (x0, x1, fx);
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for ch in 0..c {
            let g = dy[ch * npix + p];
            let plane = ch * h * w..(ch + 1) * h * w;
            let (px, py) = sample_plane_grad(&map[plane.clone()], w, ys, xs);
            gx += g * px;
            gy += g * py;
            scatter_plane(&mut dmap[plane], w, ys, xs, g);
        }
        if sign_flip {
            gx = -gx;
            gy = -gy;
        }
        if xin {
            dcoords[p] = gx;
        }
        if yin {
            dcoords[npix + p] = gy;
        }
    }
    (dmap, dcoords)
}

/// Correlation window lookup geometry for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LookupGeom {
    pub h: usize,
    pub w: usize,
    pub th: usize,
    pub tw: usize,
    pub radius: usize,
    pub scale: usize,
}

impl LookupGeom {
    pub fn window(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    #[inline]
    fn center<T: Real>(&self, flow: &[T], q: usize) -> (T, T) {
        let npix = self.h * self.w;
        let s = T::from_usize(self.scale).unwrap();
        let i = T::from_usize(q / self.w).unwrap();
        let j = T::from_usize(q % self.w).unwrap();
        ((j + flow[q]) / s, (i + flow[npix + q]) / s)
    }
}

/// `vol`: (h·w)×th×tw, `flow`: 2×h×w. Output window²×h×w, window row-major.
pub(crate) fn lookup_forward<T: Real>(vol: &[T], flow: &[T], g: &LookupGeom) -> Vec<T> {
    let npix = g.h * g.w;
    let plane = g.th * g.tw;
    let r = g.radius as isize;
    let side = 2 * g.radius + 1;
    let mut out = vec![T::zero(); g.window() * npix];
    for q in 0..npix {
        let (cx, cy) = g.center(flow, q);
        let pl = &vol[q * plane..(q + 1) * plane];
        for dy in -r..=r {
            let sy = cy + T::from_isize(dy).unwrap();
            let (y0, y1, fy, _) = interp_axis(sy, g.th);
            for dx in -r..=r {
                let sx = cx + T::from_isize(dx).unwrap();
                let (x0, x1, fx, _) = interp_axis(sx, g.tw);
                let ch = (dy + r) as usize * side + (dx + r) as usize;
                out[ch * npix + q] = sample_plane(pl, g.tw, (y0, y1, fy), (x0, x1, fx));
            }
        }
    }
    out
}

pub(crate) fn lookup_backward<T: Real>(
    vol: &[T],
    flow: &[T],
    g: &LookupGeom,
    dy_out: &[T],
    want_dvol: bool,
) -> (Vec<T>, Vec<T>) {
    let npix = g.h * g.w;
    let plane = g.th * g.tw;
    let r = g.radius as isize;
    let side = 2 * g.radius + 1;
    let inv_s = T::one() / T::from_usize(g.scale).unwrap();
    let mut dvol = if want_dvol {
        vec![T::zero(); vol.len()]
    } else {
        Vec::new()
    };
    let mut dflow = vec![T::zero(); flow.len()];
    for q in 0..npix {
        let (cx, cy) = g.center(flow, q);
        let pl = &vol[q * plane..(q + 1) * plane];
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for dy in -r..=r {
            let sy = cy + T::from_isize(dy).unwrap();
            let (y0, y1, fy, yin) = interp_axis(sy, g.th);
            for dx in -r..=r {
                let sx = cx + T::from_isize(dx).unwrap();
                let (x0, x1, fx, xin) = interp_axis(sx, g.tw);
                let ch = (dy + r) as usize * side + (dx + r) as usize;
                let d = dy_out[ch * npix + q];
                if d == T::zero() {
                    continue;
                }
                let (px, py) = sample_plane_grad(pl, g.tw, (y0, y1, fy), (x0, x1, fx));
                if xin {
                    gx += d * px;
                }
                if yin {
                    gy += d * py;
                }
                if want_dvol {
                    scatter_plane(
                        &mut dvol[q * plane..(q + 1) * plane],
                        g.tw,
                        (y0, y1, fy),
                        (x0, x1, fx),
                        d,
                    );
                }
            }
        }
        dflow[q] = gx * inv_s;
        dflow[npix + q] = gy * inv_s;
    }
    (dvol, dflow)
}

/// 2×2 mean over the last two axes; odd extents replicate the last row/column.
pub(crate) fn avg_pool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let (r0, r1) = (2 * i, (2 * i + 1).min(h - 1));
            for j in 0..wo {
                let (c0, c1) = (2 * j, (2 * j + 1).min(w - 1));
                out[(p * ho + i) * wo + j] =
                    (src[r0 * w + c0] + src[r0 * w + c1] + src[r1 * w + c0] + src[r1 * w + c1])
                        * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let (r0, r1) = (2 * i, (2 * i + 1).min(h - 1));
            for j in 0..wo {
                let (c0, c1) = (2 * j, (2 * j + 1).min(w - 1));
                let g = dy[(p * ho + i) * wo + j] * quarter;
                dst[r0 * w + c0] += g;
                dst[r0 * w + c1] += g;
                dst[r1 * w + c0] += g;
                dst[r1 * w + c1] += g;
            }
        }
    }
    dx
}

/// Source taps for bilinear upsampling by an integer factor with
/// half-pixel centers: fine index `i` reads coarse `(i + 0.5)/f - 0.5`.
pub(crate) fn upsample_taps<T: Real>(coarse: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..coarse * factor)
        .map(|i| {
            let p = (T::from_usize(i).unwrap() + T::lit(0.5)) / T::from_usize(factor).unwrap()
                - T::lit(0.5);
            let (i0, i1, f, _) = interp_axis(p, coarse);
            (i0, i1, f)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = upsample_taps::<T>(h, factor);
    let tx = upsample_taps::<T>(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (i, &ys) in ty.iter().enumerate() {
            for (j, &xs) in tx.iter().enumerate() {
                out[(p * ho + i) * wo + j] = sample_plane(src, w, ys, xs);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = upsample_taps::<T>(h, factor);
    let tx = upsample_taps::<T>(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &ys) in ty.iter().enumerate() {
            for (j, &xs) in tx.iter().enumerate() {
                scatter_plane(dst, w, ys, xs, dy[(p * ho + i) * wo + j]);
            }
        }
    }
    dx
}

/// Softmax over the middle axis of an `outer × len × inner` view.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut m = T::neg_infinity();
            for l in 0..len {
                m = m.max(x[idx(l)]);
            }
            let mut s = T::zero();
            for l in 0..len {
                let e = (x[idx(l)] - m).exp();
                out[idx(l)] = e;
                s += e;
            }
            for l in 0..len {
                out[idx(l)] = out[idx(l)] / s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                dot += y[idx(l)] * dy[idx(l)];
            }
            for l in 0..len {
                dx[idx(l)] = y[idx(l)] * (dy[idx(l)] - dot);
            }
        }
    }
    dx
}

/// Per-channel normalization over all non-channel axes. Returns
/// `(normalized, inv_std per channel)`.
pub(crate) fn instance_norm_forward<T: Real>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let nf = T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); channels];
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv[c] = is;
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &[T], inv: &[T], dy: &[T]) -> Vec<T> {
    let channels = inv.len();
    let n = y.len() / channels;
    let nf = T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); y.len()];
    for c in 0..channels {
        let ys = &y[c * n..(c + 1) * n];
        let ds = &dy[c * n..(c + 1) * n];
        let mean_d = ds.iter().copied().sum::<T>() / nf;
        let mean_dy = ys.iter().zip(ds).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for ((o, &yv), &dv) in dx[c * n..(c + 1) * n].iter_mut().zip(ys).zip(ds) {
            *o = inv[c] * (dv - mean_d - yv * mean_dy);
        }
    }
    dx
}
