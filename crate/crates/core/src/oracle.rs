//! Slow reference implementations used to cross-check the kernels.
//!
//! Each function is written from the definition with plain loops and no
//! shared helpers from the kernel code, in double precision.

use crate::autodiff::ConvAxis;
use crate::tensor::Tensor;

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

/// `out[o, …, j, …] = Σ_c Σ_t k[o, c, t] · x[c, …, j·stride + t − pad, …]`
/// with zeros outside `x`.
pub fn conv_axis(x: &Tensor<f64>, k: &Tensor<f64>, axis: ConvAxis, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape().to_vec();
    let a = match axis {
        ConvAxis::X => xs.len() - 1,
        ConvAxis::Y => xs.len() - 2,
        ConvAxis::T => 1,
    };
    let (cout, cin, kl) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let n = xs[a] as isize;
    let out_len = (xs[a] + 2 * pad - kl) / stride + 1;
    let mut os = xs.clone();
    os[0] = cout;
    os[a] = out_len;
    let total: usize = os.iter().product();
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let oi = unravel(i, &os);
        let mut acc = 0.0;
        for c in 0..cin {
            for t in 0..kl {
                let src = (oi[a] * stride + t) as isize - pad as isize;
                if src < 0 || src >= n {
                    continue;
                }
                let mut xi = oi.clone();
                xi[0] = c;
                xi[a] = src as usize;
                acc += k.at(&[oi[0], c, t]) * x.at(&xi);
            }
        }
        out.push(acc);
    }
    Tensor::new(&os, out).unwrap()
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |i| {
        let (r, c) = (i / n, i % n);
        (0..k).map(|j| a.at(&[r, j]) * b.at(&[j, c])).sum()
    })
}

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Bilinear value of an `h×w` plane at `(x, y)` clamped to the border,
/// written as a sum of tent weights over every pixel.
pub fn sample_clamped(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for i in 0..h {
        let wy = tent(yc - i as f64);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            acc += plane[i * w + j] * wy * tent(xc - j as f64);
        }
    }
    acc
}

/// `map: C×H×W`, `coords: 2×Ho×Wo` holding (x, y) sample positions.
pub fn bilinear_sample(map: &Tensor<f64>, coords: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (ho, wo) = (coords.shape()[1], coords.shape()[2]);
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let (y, x) = ((i / wo) % ho, i % wo);
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        sample_clamped(plane, h, w, coords.at(&[0, y, x]), coords.at(&[1, y, x]))
    })
}

/// 2×2 mean over the last two axes; odd extents repeat the last row/column.
pub fn avg_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut os = s.clone();
    os[r - 2] = ho;
    os[r - 1] = wo;
    let lead: usize = s[..r - 2].iter().product();
    let mut out = Vec::with_capacity(lead * ho * wo);
    for p in 0..lead {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        let y = (2 * i + a).min(h - 1);
                        let xx = (2 * j + b).min(w - 1);
                        acc += x.data()[p * h * w + y * w + xx];
                    }
                }
                out.push(acc / 4.0);
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// `(h·w)×h×w` volume of scaled dot products.
pub fn corr_all_pairs(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (d, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let norm = (d as f64).sqrt();
    let mut out = vec![0.0; h * w * h * w];
    for i in 0..h {
        for j in 0..w {
            for k in 0..h {
                for l in 0..w {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += a.at(&[c, i, j]) * b.at(&[c, k, l]);
                    }
                    out[(i * w + j) * h * w + k * w + l] = dot / norm;
                }
            }
        }
    }
    Tensor::new(&[h * w, h, w], out).unwrap()
}

/// Repeated pooling of the target axes.
pub fn pyramid(vol: &Tensor<f64>, levels: usize) -> Vec<Tensor<f64>> {
    let mut out = vec![vol.clone()];
    for _ in 1..levels {
        let next = avg_pool2(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Window lookup around `(p + flow)/2^l` at every level.
pub fn lookup(levels: &[Tensor<f64>], flow: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let side = 2 * radius + 1;
    let win = side * side;
    let mut out = vec![0.0; levels.len() * win * h * w];
    for (l, vol) in levels.iter().enumerate() {
        let (th, tw) = (vol.shape()[1], vol.shape()[2]);
        let scale = (1usize << l) as f64;
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                let cx = (x as f64 + flow.at(&[0, y, x])) / scale;
                let cy = (y as f64 + flow.at(&[1, y, x])) / scale;
                let plane = &vol.data()[q * th * tw..(q + 1) * th * tw];
                for a in 0..side {
                    for b in 0..side {
                        let dy = a as f64 - radius as f64;
                        let dx = b as f64 - radius as f64;
                        let ch = l * win + a * side + b;
                        out[ch * h * w + q] = sample_clamped(plane, th, tw, cx + dx, cy + dy);
                    }
                }
            }
        }
    }
    Tensor::new(&[levels.len() * win, h, w], out).unwrap()
}

/// Attention over flattened positions for one window.
pub fn attend(
    context: &Tensor<f64>,
    motion: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    alpha: f64,
) -> Tensor<f64> {
    let (lc, h, w) = (context.shape()[0], context.shape()[1], context.shape()[2]);
    let lm = motion.shape()[0];
    let dk = wq.shape()[1];
    let n = h * w;
    let c = |ch: usize, p: usize| context.data()[ch * n + p];
    let m = |ch: usize, p: usize| motion.data()[ch * n + p];
    let proj = |wt: &Tensor<f64>, p: usize, d: usize| (0..lc).map(|ch| c(ch, p) * wt.at(&[ch, d])).sum::<f64>();
    let mut out = motion.clone();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..dk).map(|d| proj(wq, i, d) * proj(wk, j, d)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for o in 0..lm {
            let mut acc = 0.0;
            for j in 0..n {
                let v: f64 = (0..lm).map(|ch| m(ch, j) * wv.at(&[ch, o])).sum();
                acc += e[j] / z * v;
            }
            out.data_mut()[o * n + i] += alpha * acc;
        }
    }
    out
}

/// Dense `3×3×3` kernel equal to the x → y → t chain of 1D kernels.
pub fn compose_separable(kx: &Tensor<f64>, ky: &Tensor<f64>, kt: &Tensor<f64>) -> Tensor<f64> {
    let (cout, mid2) = (kt.shape()[0], kt.shape()[1]);
    let mid1 = ky.shape()[1];
    let cin = kx.shape()[1];
    let mut k = Tensor::zeros(&[cout, cin, 3, 3, 3]);
    for o in 0..cout {
        for c in 0..cin {
            for dt in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let mut acc = 0.0;
                        for n2 in 0..mid2 {
                            for n1 in 0..mid1 {
                                acc += kt.at(&[o, n2, dt]) * ky.at(&[n2, n1, dy]) * kx.at(&[n1, c, dx]);
                            }
                        }
                        k.set(&[o, c, dt, dy, dx], acc);
                    }
                }
            }
        }
    }
    k
}

/// Direct zero-padded 3D convolution of a `C×T×H×W` tensor.
pub fn conv3d(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
    let s = x.shape();
    let (cin, t, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = k.shape()[0];
    Tensor::from_fn(&[cout, t, h, w], |i| {
        let o = i / (t * h * w);
        let (ti, yi, xi) = ((i / (h * w)) % t, (i / w) % h, i % w);
        let mut acc = bias[o];
        for c in 0..cin {
            for dt in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (tt, yy, xx) = (
                            ti as isize + dt as isize - 1,
                            yi as isize + dy as isize - 1,
                            xi as isize + dx as isize - 1,
                        );
                        if tt < 0 || yy < 0 || xx < 0 || tt >= t as isize || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        acc += k.at(&[o, c, dt, dy, dx]) * x.at(&[c, tt as usize, yy as usize, xx as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Kernels of one separable gate: `(x, y, t, t-bias)`.
pub struct GateWeights {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub t: Tensor<f64>,
    pub bias: Vec<f64>,
}

fn gate(input: &Tensor<f64>, g: &GateWeights) -> Tensor<f64> {
    conv3d(input, &compose_separable(&g.x, &g.y, &g.t), &g.bias)
}

/// GRU update written with dense 3D convolutions.
pub fn gru_step(h: &Tensor<f64>, x: &Tensor<f64>, z: &GateWeights, r: &GateWeights, q: &GateWeights) -> Tensor<f64> {
    let hx = Tensor::concat(&[h, x], 0).unwrap();
    let zv = gate(&hx, z).map(|v| 1.0 / (1.0 + (-v).exp()));
    let rv = gate(&hx, r).map(|v| 1.0 / (1.0 + (-v).exp()));
    let wx = gate(x, q);
    Tensor::from_fn(h.shape(), |i| {
        let cand = (wx.data()[i] + rv.data()[i] * h.data()[i]).tanh();
        zv.data()[i] * h.data()[i] + (1.0 - zv.data()[i]) * cand
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tent_sampling_hits_pixels() {
        let plane: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(sample_clamped(&plane, 2, 3, 2.0, 1.0), 5.0);
        assert_eq!(sample_clamped(&plane, 2, 3, 0.5, 0.0), 0.5);
        assert_eq!(sample_clamped(&plane, 2, 3, -4.0, 9.0), 3.0);
    }

    #[test]
    fn composed_kernel_of_deltas_is_delta() {
        let mut d = Tensor::zeros(&[1, 1, 3]);
        d.set(&[0, 0, 1], 1.0);
        let k = compose_separable(&d, &d, &d);
        assert_eq!(k.sum(), 1.0);
        assert_eq!(k.at(&[0, 0, 1, 1, 1]), 1.0);
    }
}
