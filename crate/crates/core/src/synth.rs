//! Synthetic three-frame scenes with analytic ground truth.
//!
//! A textured background and an optional textured foreground (rectangle
//! or disc) each translate at constant velocity. Textures are smooth
//! value noise evaluated at continuous coordinates, so every frame is an
//! exact resampling of the same underlying pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::loss::GtSample;
use crate::metrics::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { half_w: f32, half_h: f32 },
    Disc { radius: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Foreground {
    pub shape: Shape,
    /// Centre at the first frame.
    pub center: (f32, f32),
    /// Translation per frame.
    pub velocity: (f32, f32),
    pub texture_seed: u64,
}

impl Foreground {
    fn contains(&self, t: usize, x: f32, y: f32) -> bool {
        let cx = self.center.0 + t as f32 * self.velocity.0;
        let cy = self.center.1 + t as f32 * self.velocity.1;
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            Shape::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub background_seed: u64,
    pub background_velocity: (f32, f32),
    pub foreground: Option<Foreground>,
    pub noise_sigma: f32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument("scene has zero size".into()));
        }
        if let Some(fg) = &self.foreground {
            let (hw, hh) = match fg.shape {
                Shape::Rect { half_w, half_h } => (half_w, half_h),
                Shape::Disc { radius } => (radius, radius),
            };
            if !(hw > 0.0 && hh > 0.0) {
                return Err(Error::InvalidArgument("foreground has zero size".into()));
            }
            let (cx, cy) = fg.center;
            if cx - hw < 0.0 || cy - hh < 0.0 || cx + hw > (self.w - 1) as f32 || cy + hh > (self.h - 1) as f32 {
                return Err(Error::InvalidArgument("foreground does not fit in the first frame".into()));
            }
        }
        Ok(())
    }
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f32 {
    // splitmix64 finalizer over the packed lattice coordinates
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, cell: f32, x: f32, y: f32) -> f32 {
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (tx, ty) = (smooth(gx - x0), smooth(gy - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Three-octave colour texture with values in [0, 1].
pub fn texture(seed: u64, channel: usize, x: f32, y: f32) -> f32 {
    let s = seed.wrapping_add(channel as u64 * 0x5851_F42D_4C95_7F2D);
    0.4 * value_noise(s, 12.0, x, y) + 0.35 * value_noise(s ^ 0xA5A5, 6.0, x, y) + 0.25 * value_noise(s ^ 0x5A5A, 3.0, x, y)
}

/// Three frames plus ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frames: [Tensor<f32>; 3],
    pub gt: GtSample,
}

impl Sample {
    /// CRC-32 over the raw frame bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for f in &self.frames {
            for v in f.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

fn velocity_at(spec: &SceneSpec, t: usize, x: f32, y: f32) -> (f32, f32) {
    match &spec.foreground {
        Some(fg) if fg.contains(t, x, y) => fg.velocity,
        _ => spec.background_velocity,
    }
}

fn flow_field(spec: &SceneSpec, t: usize) -> Tensor<f32> {
    let (h, w) = (spec.h, spec.w);
    Tensor::from_fn(&[2, h, w], |i| {
        let p = i % (h * w);
        let (x, y) = ((p % w) as f32, (p / w) as f32);
        let v = velocity_at(spec, t, x, y);
        if i < h * w {
            v.0
        } else {
            v.1
        }
    })
}

/// Renders the scene. `seed` drives only the sensor noise.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let (bu, bv) = spec.background_velocity;
    let frames: [Tensor<f32>; 3] = std::array::from_fn(|t| {
        let tf = t as f32;
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            let (x, y) = ((p % w) as f32, (p / w) as f32);
            let v = match &spec.foreground {
                Some(fg) if fg.contains(t, x, y) => {
                    texture(fg.texture_seed, c, x - tf * fg.velocity.0, y - tf * fg.velocity.1)
                }
                _ => texture(spec.background_seed, c, x - tf * bu, y - tf * bv),
            };
            if spec.noise_sigma > 0.0 {
                (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
            } else {
                v
            }
        })
    });

    let occlusion = Mask::from_fn(h, w, |y, x| {
        let (xf, yf) = (x as f32, y as f32);
        match &spec.foreground {
            Some(fg) if !fg.contains(1, xf, yf) => fg.contains(2, xf + bu, yf + bv),
            _ => false,
        }
    });
    let gt_f2 = flow_field(spec, 1);
    let n = h * w;
    let oob = Mask::from_fn(h, w, |y, x| {
        let i = y * w + x;
        let tx = x as f32 + gt_f2.data()[i];
        let ty = y as f32 + gt_f2.data()[n + i];
        tx < 0.0 || ty < 0.0 || tx > (w - 1) as f32 || ty > (h - 1) as f32
    });
    Ok(Sample {
        frames,
        gt: GtSample {
            gt_f1: Some(flow_field(spec, 0)),
            gt_f2: Some(gt_f2),
            valid1: None,
            valid2: None,
            occlusion,
            oob,
        },
    })
}

/// Parameters of the random scene family.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution {
    pub h: usize,
    pub w: usize,
    /// Largest per-axis velocity in px/frame.
    pub max_motion: f32,
    /// Probability that the background moves.
    pub background_motion: f32,
    pub integer_motion: bool,
    pub noise_sigma: f32,
}

impl SceneDistribution {
    /// 64×64 scenes with translations of at most 4 px/frame.
    pub fn toy() -> Self {
        Self {
            h: 64,
            w: 64,
            max_motion: 4.0,
            background_motion: 0.8,
            integer_motion: false,
            noise_sigma: 0.0,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let vel = |rng: &mut ChaCha8Rng, m: f32| {
            let mut v = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            if self.integer_motion {
                v = (v.0.round(), v.1.round());
            }
            v
        };
        let m = self.max_motion.clamp(0.0, 12.0);
        let bg = if rng.gen::<f32>() < self.background_motion {
            vel(rng, m)
        } else {
            (0.0, 0.0)
        };
        let fg_vel = vel(rng, m);
        let (w, h) = (self.w as f32, self.h as f32);
        let shape = if rng.gen_bool(0.5) {
            let r = rng.gen_range(0.12..0.25) * w.min(h);
            Shape::Disc { radius: r }
        } else {
            Shape::Rect {
                half_w: rng.gen_range(0.1..0.25) * w,
                half_h: rng.gen_range(0.1..0.25) * h,
            }
        };
        let (ex, ey) = match shape {
            Shape::Rect { half_w, half_h } => (half_w, half_h),
            Shape::Disc { radius } => (radius, radius),
        };
        let cx = rng.gen_range(ex..=(w - 1.0 - ex));
        let cy = rng.gen_range(ey..=(h - 1.0 - ey));
        SceneSpec {
            h: self.h,
            w: self.w,
            background_seed: rng.gen(),
            background_velocity: bg,
            foreground: Some(Foreground {
                shape,
                center: (cx, cy),
                velocity: fg_vel,
                texture_seed: rng.gen(),
            }),
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Deterministic sample stream; even indices train, odd indices validate.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dist: SceneDistribution,
    pub count: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn new(dist: SceneDistribution, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        Ok(Self { dist, count, seed })
    }

    pub fn split_of(index: usize) -> Split {
        if index % 2 == 0 {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn indices(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).filter(move |&i| Self::split_of(i) == split)
    }

    pub fn spec(&self, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        self.dist.sample(&mut rng)
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        generate(&self.spec(index), self.seed.wrapping_add(index as u64))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.count).map(|i| self.get(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(h: usize, w: usize) -> SceneSpec {
        SceneSpec {
            h,
            w,
            background_seed: 7,
            background_velocity: (0.0, 0.0),
            foreground: None,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn static_scene() {
        let mut s = base(16, 20);
        s.foreground = Some(Foreground {
            shape: Shape::Disc { radius: 4.0 },
            center: (10.0, 8.0),
            velocity: (0.0, 0.0),
            texture_seed: 3,
        });
        let smp = generate(&s, 1).unwrap();
        assert_eq!(smp.frames[0], smp.frames[1]);
        assert_eq!(smp.frames[1], smp.frames[2]);
        assert!(smp.gt.gt_f1.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(smp.gt.occlusion.count(), 0);
        assert!(smp.frames[0].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn leading_edge_occlusion_band() {
        let mut s = base(20, 30);
        s.foreground = Some(Foreground {
            shape: Shape::Rect { half_w: 4.0, half_h: 3.0 },
            center: (10.0, 10.0),
            velocity: (2.0, 0.0),
            texture_seed: 9,
        });
        let smp = generate(&s, 0).unwrap();
        // frame 2 rectangle spans x ∈ [8, 16]; frame 3 spans [10, 18]
        let occ = &smp.gt.occlusion;
        for y in 0..20 {
            for x in 0..30 {
                let expect = (7..=13).contains(&y) && (x == 17 || x == 18);
                assert_eq!(occ.get(y, x), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn background_oob_columns() {
        let mut s = base(12, 24);
        s.background_velocity = (-8.0, 0.0);
        let smp = generate(&s, 0).unwrap();
        let oob = &smp.gt.oob;
        for y in 0..12 {
            for x in 0..24 {
                assert_eq!(oob.get(y, x), x < 8);
            }
        }
    }

    #[test]
    fn degenerate_specs() {
        let mut s = base(16, 16);
        s.foreground = Some(Foreground {
            shape: Shape::Rect { half_w: 0.0, half_h: 2.0 },
            center: (8.0, 8.0),
            velocity: (0.0, 0.0),
            texture_seed: 0,
        });
        assert!(generate(&s, 0).is_err());
        s.foreground = Some(Foreground {
            shape: Shape::Disc { radius: 6.0 },
            center: (2.0, 8.0),
            velocity: (0.0, 0.0),
            texture_seed: 0,
        });
        assert!(generate(&s, 0).is_err());
    }

    #[test]
    fn dataset_determinism_and_split() {
        let d = Dataset::new(SceneDistribution::toy(), 6, 11).unwrap();
        let a: Vec<u32> = d.iter().map(|s| s.unwrap().checksum()).collect();
        let b: Vec<u32> = d.iter().map(|s| s.unwrap().checksum()).collect();
        assert_eq!(a, b);
        let other = Dataset::new(SceneDistribution::toy(), 6, 12).unwrap();
        assert_ne!(a[0], other.get(0).unwrap().checksum());
        let tr: Vec<usize> = d.indices(Split::Train).collect();
        let va: Vec<usize> = d.indices(Split::Val).collect();
        assert_eq!(tr, vec![0, 2, 4]);
        assert_eq!(va, vec![1, 3, 5]);
    }
}
