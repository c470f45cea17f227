//! All-pairs correlation volumes, their pooled pyramids, and flow-guided
//! window lookup.

use crate::autodiff::{Tape, Var};
use crate::config::PAPER_CORR_CHANNELS;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Real;

/// Pyramid depth and lookup radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrSpec {
    pub levels: usize,
    pub radius: usize,
}

impl CorrSpec {
    pub const PAPER: CorrSpec = CorrSpec {
        levels: 4,
        radius: 4,
    };

    /// With `strict_layout`, only layouts giving 324 channels are accepted.
    pub fn new(levels: usize, radius: usize, strict_layout: bool) -> Result<Self> {
        let spec = Self { levels, radius };
        if levels == 0 {
            return Err(Error::Config("correlation pyramid needs >= 1 level".into()));
        }
        if strict_layout && spec.channels() != PAPER_CORR_CHANNELS {
            return Err(Error::Config(format!(
                "{levels} levels × radius {radius} give {} channels, expected {PAPER_CORR_CHANNELS}",
                spec.channels()
            )));
        }
        Ok(spec)
    }

    pub fn window(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    pub fn channels(&self) -> usize {
        self.levels * self.window()
    }
}

/// Pooled correlation volumes; level `l` is `(h·w) × h/2^l × w/2^l`.
#[derive(Clone, Debug)]
pub struct CorrPyramid {
    pub levels: Vec<Var>,
    pub h: usize,
    pub w: usize,
}

/// `out[(i,j),(k,l)] = <a[:,i,j], b[:,k,l]> / sqrt(D)` for `D×h×w` maps.
pub fn corr_all_pairs<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa != sb || sa.len() != 3 {
        return Err(shape_err!("corr_all_pairs {sa:?} vs {sb:?}"));
    }
    let (d, h, w) = (sa[0], sa[1], sa[2]);
    let a2 = tape.reshape(a, &[d, h * w])?;
    let b2 = tape.reshape(b, &[d, h * w])?;
    let at = tape.transpose(a2)?;
    let m = tape.matmul(at, b2)?;
    let m = tape.scale(m, T::one() / T::from_usize(d).unwrap().sqrt())?;
    tape.reshape(m, &[h * w, h, w])
}

pub fn build_pyramid<T: Real>(tape: &mut Tape<T>, volume: Var, levels: usize) -> Result<CorrPyramid> {
    let s = tape.shape(volume).to_vec();
    if s.len() != 3 || s[0] != s[1] * s[2] {
        return Err(shape_err!("correlation volume must be (h·w)×h×w, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let need = 1usize << (levels.max(1) - 1);
    if h < need || w < need {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} correlation grid is too small for {levels} levels (needs >= {need})"
        )));
    }
    let mut lv = vec![volume];
    for _ in 1..levels {
        let prev = *lv.last().unwrap();
        lv.push(tape.avg_pool2(prev)?);
    }
    Ok(CorrPyramid { levels: lv, h, w })
}

/// Samples every pyramid level around `pixel + flow`; output is
/// `levels·(2r+1)² × h × w`, level-major then window row-major.
pub fn lookup<T: Real>(tape: &mut Tape<T>, pyr: &CorrPyramid, flow: Var, radius: usize) -> Result<Var> {
    let fs = tape.shape(flow);
    if fs != [2, pyr.h, pyr.w] {
        return Err(shape_err!(
            "lookup flow {fs:?} for a {}×{} pyramid",
            pyr.h,
            pyr.w
        ));
    }
    let mut parts = Vec::with_capacity(pyr.levels.len());
    for (l, &vol) in pyr.levels.iter().enumerate() {
        parts.push(tape.corr_lookup(vol, flow, radius, 1 << l)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}

/// Both pyramids of a three-frame window, built once and looked up every
/// iteration.
#[derive(Clone, Debug)]
pub struct CorrState {
    pub spec: CorrSpec,
    pub pyr12: CorrPyramid,
    pub pyr23: CorrPyramid,
}

impl CorrState {
    pub fn new<T: Real>(
        tape: &mut Tape<T>,
        fmap1: Var,
        fmap2: Var,
        fmap3: Var,
        spec: CorrSpec,
    ) -> Result<Self> {
        let c12 = corr_all_pairs(tape, fmap1, fmap2)?;
        let c23 = corr_all_pairs(tape, fmap2, fmap3)?;
        Ok(Self {
            spec,
            pyr12: build_pyramid(tape, c12, spec.levels)?,
            pyr23: build_pyramid(tape, c23, spec.levels)?,
        })
    }

    /// `D×2×h×w` with slot 0 from frames 1–2 and slot 1 from frames 2–3.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, flow1: Var, flow2: Var) -> Result<Var> {
        let (h, w) = (self.pyr12.h, self.pyr12.w);
        let d = self.spec.channels();
        let c1 = lookup(tape, &self.pyr12, flow1, self.spec.radius)?;
        let c2 = lookup(tape, &self.pyr23, flow2, self.spec.radius)?;
        let c1 = tape.reshape(c1, &[d, 1, h, w])?;
        let c2 = tape.reshape(c2, &[d, 1, h, w])?;
        tape.concat(&[c1, c2], 1)
    }
}

/// One-shot `C = [C¹, C²]` from three feature maps and a flow pair.
pub fn corr_features<T: Real>(
    tape: &mut Tape<T>,
    fmaps: [Var; 3],
    flows: [Var; 2],
    spec: CorrSpec,
) -> Result<Var> {
    let st = CorrState::new(tape, fmaps[0], fmaps[1], fmaps[2], spec)?;
    st.features(tape, flows[0], flows[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_hot(d: usize, h: usize, w: usize) -> Tensor<f64> {
        // channel c = pixel index, so d must be >= h*w
        Tensor::from_fn(&[d, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            if c == p {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn one_hot_features_give_scaled_identity() {
        let (d, h, w) = (16, 4, 4);
        let mut t = Tape::<f64>::new();
        let a = t.constant(one_hot(d, h, w));
        let v = corr_all_pairs(&mut t, a, a).unwrap();
        let vol = t.value(v);
        for q in 0..h * w {
            for p in 0..h * w {
                let e = if p == q { 0.25 } else { 0.0 };
                assert_eq!(vol.data()[q * h * w + p], e);
            }
        }
    }

    #[test]
    fn constant_maps() {
        let (d, c) = (9, 0.5);
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::full(&[d, 3, 2], c));
        let v = corr_all_pairs(&mut t, a, a).unwrap();
        let expect = d as f64 * c * c / (d as f64).sqrt();
        assert!(t.value(v).data().iter().all(|&x| (x - expect).abs() < 1e-12));
    }

    #[test]
    fn pyramid_shapes_and_constant_levels() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::full(&[64, 8, 8], 2.0));
        let p = build_pyramid(&mut t, v, 4).unwrap();
        assert_eq!(p.levels[0], v);
        let shapes: Vec<Vec<usize>> = p.levels.iter().map(|&l| t.shape(l).to_vec()).collect();
        assert_eq!(shapes, vec![vec![64, 8, 8], vec![64, 4, 4], vec![64, 2, 2], vec![64, 1, 1]]);
        for &l in &p.levels {
            assert!(t.value(l).data().iter().all(|&x| x == 2.0));
        }
        let small = t.constant(Tensor::full(&[16, 4, 4], 1.0));
        assert!(build_pyramid(&mut t, small, 4).is_err());
    }

    #[test]
    fn coarsest_level_is_row_mean() {
        let mut t = Tape::<f64>::new();
        let vol = Tensor::from_fn(&[64, 8, 8], |i| ((i * 7919) % 101) as f64 / 101.0);
        let v = t.constant(vol.clone());
        let p = build_pyramid(&mut t, v, 4).unwrap();
        let top = t.value(p.levels[3]);
        for q in 0..64 {
            let mean: f64 = vol.data()[q * 64..(q + 1) * 64].iter().sum::<f64>() / 64.0;
            assert!((top.data()[q] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_flow_self_match_center_channel() {
        let (d, h, w) = (64, 8, 8);
        let mut t = Tape::<f64>::new();
        let a = t.constant(one_hot(d, h, w));
        let v = corr_all_pairs(&mut t, a, a).unwrap();
        let p = build_pyramid(&mut t, v, 4).unwrap();
        let f = t.constant(Tensor::zeros(&[2, h, w]));
        let c = lookup(&mut t, &p, f, 4).unwrap();
        let out = t.value(c);
        assert_eq!(out.shape(), &[324, h, w]);
        for q in 0..h * w {
            assert_eq!(out.data()[40 * h * w + q], 1.0 / 8.0);
        }
    }

    #[test]
    fn integer_flow_shifts_window() {
        let (h, w) = (8, 8);
        let mut t = Tape::<f64>::new();
        let vol = Tensor::from_fn(&[h * w, h, w], |i| (i as f64 * 0.013).sin());
        let v = t.constant(vol);
        let p = build_pyramid(&mut t, v, 1).unwrap();
        let zero = t.constant(Tensor::zeros(&[2, h, w]));
        let mut fx = Tensor::zeros(&[2, h, w]);
        for x in &mut fx.data_mut()[..h * w] {
            *x = 1.0;
        }
        let one = t.constant(fx);
        let a = lookup(&mut t, &p, zero, 2).unwrap();
        let b = lookup(&mut t, &p, one, 2).unwrap();
        let (a, b) = (t.value(a).clone(), t.value(b).clone());
        // window channel (dy, dx) under flow +1 equals channel (dy, dx+1) under zero flow,
        // for queries far enough from the right border
        let side = 5;
        for q in 0..h * w {
            if q % w + 3 >= w {
                continue;
            }
            for dy in 0..side {
                for dx in 0..side - 1 {
                    let lhs = b.data()[(dy * side + dx) * h * w + q];
                    let rhs = a.data()[(dy * side + dx + 1) * h * w + q];
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn spec_profile() {
        assert!(CorrSpec::new(4, 4, true).is_ok());
        assert!(CorrSpec::new(1, 8, true).is_err());
        assert_eq!(CorrSpec::new(1, 8, false).unwrap().channels(), 289);
    }
}
