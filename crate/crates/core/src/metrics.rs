//! Evaluation metrics: endpoint error, Fl outliers, occlusion-distance
//! and speed bands.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Boolean `H×W` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err!("mask {h}×{w} with {} entries", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// As a `1×H×W` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[1, self.h, self.w], |i| if self.data[i] { 1.0 } else { 0.0 })
    }
}

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Mask>) -> Result<(usize, usize)> {
    let s = gt.shape();
    if pred.shape() != s || s.len() != 3 || s[0] != 2 {
        return Err(shape_err!("flow shapes {:?} vs {s:?}", pred.shape()));
    }
    if let Some(m) = mask {
        if (m.h, m.w) != (s[1], s[2]) {
            return Err(shape_err!("mask {}×{} for {}×{} flow", m.h, m.w, s[1], s[2]));
        }
    }
    Ok((s[1], s[2]))
}

/// Per-pixel endpoint error, row-major.
pub fn epe_map(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<f64>> {
    let (h, w) = check_pair(pred, gt, None)?;
    let n = h * w;
    let (p, g) = (pred.data(), gt.data());
    Ok((0..n)
        .map(|i| {
            let du = f64::from(p[i]) - f64::from(g[i]);
            let dv = f64::from(p[n + i]) - f64::from(g[n + i]);
            (du * du + dv * dv).sqrt()
        })
        .collect())
}

/// Per-pixel ground-truth magnitude.
pub fn speed_map(gt: &Tensor<f32>) -> Vec<f64> {
    let n = gt.len() / 2;
    let g = gt.data();
    (0..n)
        .map(|i| f64::from(g[i]).hypot(f64::from(g[n + i])))
        .collect()
}

fn masked_mean(vals: &[f64], mask: Option<&Mask>) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &v) in vals.iter().enumerate() {
        if mask.map_or(true, |m| m.data[i]) {
            acc += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no pixels selected".into()));
    }
    Ok(acc / n as f64)
}

/// Mean endpoint error over `mask` (all pixels when `None`).
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Mask>) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    masked_mean(&epe_map(pred, gt)?, mask)
}

/// Outlier test: endpoint error ≥ 3 px and ≥ 5% of the true magnitude.
pub fn is_outlier(err: f64, gt_mag: f64) -> bool {
    err >= 3.0 && err >= 0.05 * gt_mag
}

/// Percentage of masked pixels that are outliers.
pub fn fl_rate(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Mask>) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    let e = epe_map(pred, gt)?;
    let s = speed_map(gt);
    let flags: Vec<f64> = e
        .iter()
        .zip(&s)
        .map(|(&err, &mag)| if is_outlier(err, mag) { 100.0 } else { 0.0 })
        .collect();
    masked_mean(&flags, mask)
}

/// Chamfer 3-4 distance (in pixels) from every pixel to the nearest set
/// pixel of `occ`. All-false masks give `+∞` everywhere.
pub fn occlusion_distance(occ: &Mask) -> Vec<f64> {
    let (h, w) = (occ.h, occ.w);
    const INF: u64 = u64::MAX / 4;
    let mut d: Vec<u64> = occ.data.iter().map(|&b| if b { 0 } else { INF }).collect();
    let idx = |y: usize, x: usize| y * w + x;
    // forward pass: neighbours above and to the left
    for y in 0..h {
        for x in 0..w {
            let mut best = d[idx(y, x)];
            if x > 0 {
                best = best.min(d[idx(y, x - 1)] + 3);
            }
            if y > 0 {
                best = best.min(d[idx(y - 1, x)] + 3);
                if x > 0 {
                    best = best.min(d[idx(y - 1, x - 1)] + 4);
                }
                if x + 1 < w {
                    best = best.min(d[idx(y - 1, x + 1)] + 4);
                }
            }
            d[idx(y, x)] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[idx(y, x)];
            if x + 1 < w {
                best = best.min(d[idx(y, x + 1)] + 3);
            }
            if y + 1 < h {
                best = best.min(d[idx(y + 1, x)] + 3);
                if x + 1 < w {
                    best = best.min(d[idx(y + 1, x + 1)] + 4);
                }
                if x > 0 {
                    best = best.min(d[idx(y + 1, x - 1)] + 4);
                }
            }
            d[idx(y, x)] = best;
        }
    }
    d.into_iter()
        .map(|v| if v >= INF { f64::INFINITY } else { v as f64 / 3.0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandKind {
    /// Distance to the nearest occluded pixel.
    OccDistance,
    /// Ground-truth speed in px/frame.
    Speed,
}

/// Half-open band `[lo, hi)`; `hi` may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionSpec {
    pub kind: BandKind,
    pub lo: f64,
    pub hi: f64,
}

impl RegionSpec {
    pub fn new(kind: BandKind, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo.is_nan() {
            return Err(Error::InvalidArgument(format!("band [{lo}, {hi}) is empty")));
        }
        Ok(Self { kind, lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v < self.hi
    }

    /// `d0-10`, `s40+`, ...
    pub fn label(&self) -> String {
        let p = match self.kind {
            BandKind::OccDistance => "d",
            BandKind::Speed => "s",
        };
        if self.hi.is_infinite() {
            format!("{p}{}+", self.lo)
        } else {
            format!("{p}{}-{}", self.lo, self.hi)
        }
    }

    /// Parses `d0-10`, `s10-40`, `s40+`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("bad band {s:?}; expected e.g. d0-10 or s40+"));
        let kind = match s.chars().next() {
            Some('d') => BandKind::OccDistance,
            Some('s') => BandKind::Speed,
            _ => return Err(bad()),
        };
        let body = &s[1..];
        let (lo, hi) = if let Some(lo) = body.strip_suffix('+') {
            (lo.parse().map_err(|_| bad())?, f64::INFINITY)
        } else {
            let (a, b) = body.split_once('-').ok_or_else(bad)?;
            (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)
        };
        Self::new(kind, lo, hi)
    }
}

/// Band result: number of pixels and their mean EPE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandStat {
    pub count: usize,
    pub epe: f64,
}

/// EPE over pixels that are in `valid` and whose `aux` value lies in the
/// band. `aux` is a distance map or speed map as `spec.kind` dictates.
pub fn banded_epe(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: Option<&Mask>,
    spec: &RegionSpec,
    aux: &[f64],
) -> Result<BandStat> {
    let (h, w) = check_pair(pred, gt, valid)?;
    if aux.len() != h * w {
        return Err(shape_err!("band auxiliary map has {} entries for {h}×{w}", aux.len()));
    }
    let e = epe_map(pred, gt)?;
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..h * w {
        if valid.map_or(true, |m| m.data[i]) && spec.contains(aux[i]) {
            acc += e[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty(format!("band {} selects no pixels", spec.label())));
    }
    Ok(BandStat {
        count,
        epe: acc / count as f64,
    })
}

/// Line-oriented `key=value` evaluation report.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub lines: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Full evaluation: EPE, Fl, and the requested bands with a partition
/// check when the bands cover all valid pixels of their kind.
pub fn evaluate(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: Option<&Mask>,
    occ: Option<&Mask>,
    bands: &[RegionSpec],
) -> Result<Report> {
    let mut r = Report::default();
    let (h, w) = check_pair(pred, gt, valid)?;
    let global = epe(pred, gt, valid)?;
    let total = valid.map_or(h * w, Mask::count);
    r.push("pixels", total);
    r.push("epe", format!("{global:.6}"));
    r.push("fl", format!("{:.4}", fl_rate(pred, gt, valid)?));
    let needs_occ = bands.iter().any(|b| b.kind == BandKind::OccDistance);
    let dist = match (needs_occ, occ) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "occlusion-distance bands need an occlusion mask".into(),
            ))
        }
        (true, Some(m)) => Some(occlusion_distance(m)),
        _ => None,
    };
    let speed = speed_map(gt);
    for kind in [BandKind::OccDistance, BandKind::Speed] {
        let mut covered = 0usize;
        let mut weighted = 0.0;
        let mut any = false;
        for b in bands.iter().filter(|b| b.kind == kind) {
            any = true;
            let aux = match kind {
                BandKind::OccDistance => dist.as_deref().unwrap(),
                BandKind::Speed => &speed,
            };
            match banded_epe(pred, gt, valid, b, aux) {
                Ok(s) => {
                    r.push(format!("{}.epe", b.label()), format!("{:.6}", s.epe));
                    r.push(format!("{}.pixels", b.label()), s.count);
                    covered += s.count;
                    weighted += s.epe * s.count as f64;
                }
                Err(Error::Empty(_)) => {
                    r.push(format!("{}.epe", b.label()), "nan");
                    r.push(format!("{}.pixels", b.label()), 0);
                }
                Err(e) => return Err(e),
            }
        }
        if any && covered == total {
            let recon = weighted / total as f64;
            let tag = match kind {
                BandKind::OccDistance => "d",
                BandKind::Speed => "s",
            };
            r.push(format!("partition.{tag}.epe"), format!("{recon:.6}"));
            r.push(
                format!("partition.{tag}.ok"),
                (recon - global).abs() <= 1e-6 * global.max(1.0),
            );
        }
    }
    Ok(r)
}
