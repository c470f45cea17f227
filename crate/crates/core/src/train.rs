//! Toy-scale training: Adam with global-norm clipping on the synthetic
//! scene stream.

use crate::attention;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss;
use crate::metrics::{self, BandKind, RegionSpec};
use crate::model::{forward_on_tape, Model};
use crate::params::ParamStore;
use crate::synth::{Dataset, Sample, SceneDistribution, Split};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` follow the registry order. Entries with
    /// `frozen[i]` set are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], frozen: &[bool]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step);
        let b2t = 1.0 - self.beta2.powi(self.step);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f32,
    pub clip: f32,
    /// Samples per optimizer step.
    pub batch: usize,
    pub log_every: usize,
    pub val_samples: usize,
    pub data: SceneDistribution,
    pub data_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 4e-4,
            clip: 1.0,
            batch: 8,
            log_every: 50,
            val_samples: 16,
            data: SceneDistribution::toy(),
            data_seed: 1,
        }
    }
}

/// Validation summary over a fixed sample set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValStats {
    /// Mean EPE over both flows and all pixels.
    pub epe: f64,
    pub epe_f1: f64,
    pub epe_f2: f64,
    /// EPE of the second flow within 10 px of an occluded pixel
    /// (pixel-weighted over samples that have occlusions).
    pub d0_10: f64,
    pub d0_10_pixels: usize,
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub val: Vec<(usize, ValStats)>,
}

impl TrainReport {
    /// Mean loss over the first and last `k` steps.
    pub fn loss_ratio(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        let head: f64 = self.losses[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 = self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64;
        head / tail
    }
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_gradients(model: &Model, sample: &Sample) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.weights.bind(&mut tape, true);
    let u = forward_on_tape(&mut tape, &p, &model.config, &sample.frames, None)?;
    let l = loss::loss1(&mut tape, &u.preds, &sample.gt, f64::from(model.config.gamma))?;
    let value = f64::from(tape.value(l).item());
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(l)?;
    let grads = p.grads(&tape).into_iter().map(|(_, g)| g.into_data()).collect();
    Ok((value, grads))
}

pub fn validate(model: &Model, samples: &[Sample]) -> Result<ValStats> {
    let d_band = RegionSpec::new(BandKind::OccDistance, 0.0, 10.0)?;
    let mut s = ValStats::default();
    let mut d_acc = 0.0;
    for smp in samples {
        let pred = model.predict(&smp.frames, None)?;
        let g1 = smp.gt.gt_f1.as_ref().ok_or_else(|| Error::InvalidArgument("gt_f1 missing".into()))?;
        let g2 = smp.gt.gt_f2.as_ref().ok_or_else(|| Error::InvalidArgument("gt_f2 missing".into()))?;
        s.epe_f1 += metrics::epe(&pred.f1, g1, None)?;
        s.epe_f2 += metrics::epe(&pred.f2, g2, None)?;
        if smp.gt.occlusion.count() > 0 {
            let dist = metrics::occlusion_distance(&smp.gt.occlusion);
            let b = metrics::banded_epe(&pred.f2, g2, None, &d_band, &dist)?;
            d_acc += b.epe * b.count as f64;
            s.d0_10_pixels += b.count;
        }
    }
    let n = samples.len().max(1) as f64;
    s.epe_f1 /= n;
    s.epe_f2 /= n;
    s.epe = (s.epe_f1 + s.epe_f2) / 2.0;
    s.d0_10 = if s.d0_10_pixels > 0 {
        d_acc / s.d0_10_pixels as f64
    } else {
        f64::NAN
    };
    Ok(s)
}

/// Fixed validation set drawn from the odd-index half of the stream.
pub fn validation_set(opts: &TrainOptions) -> Result<Vec<Sample>> {
    let ds = Dataset::new(opts.data.clone(), 2 * opts.val_samples.max(1), opts.data_seed)?;
    ds.indices(Split::Val).map(|i| ds.get(i)).collect()
}

/// Runs the optimization loop. `log` receives one `key=value` line per
/// event.
pub fn train(model: &mut Model, opts: &TrainOptions, mut log: impl FnMut(&str)) -> Result<TrainReport> {
    if opts.batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let total = 2 * opts.steps.max(1) * opts.batch;
    let stream = Dataset::new(opts.data.clone(), total, opts.data_seed)?;
    let val = validation_set(opts)?;
    let frozen: Vec<bool> = model
        .weights
        .names()
        .map(|n| model.config.freeze_alpha && n == attention::ALPHA)
        .collect();
    let mut adam = Adam::new(&model.weights, opts.lr);
    let mut report = TrainReport::default();
    let mut train_idx = stream.indices(Split::Train);
    for step in 0..opts.steps {
        let mut acc: Option<Vec<Vec<f32>>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch {
            let i = train_idx.next().expect("stream sized for all steps");
            let (l, g) = sample_gradients(model, &stream.get(i)?)?;
            loss_sum += l;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                    }
                    a
                }
            });
        }
        let mut grads = acc.unwrap();
        let inv = 1.0 / opts.batch as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= inv);
        let norm = clip_global_norm(&mut grads, opts.clip);
        adam.update(&mut model.weights, &grads, &frozen);
        let loss = loss_sum / opts.batch as f64;
        report.losses.push(loss);
        let last = step + 1 == opts.steps;
        if step % opts.log_every.max(1) == 0 || last {
            let v = validate(model, &val)?;
            log(&format!(
                "step={step}\tloss={loss:.5}\tgrad_norm={norm:.4}\tval_epe={:.4}\tval_d0_10={:.4}",
                v.epe, v.d0_10
            ));
            report.val.push((step, v));
        }
    }
    Ok(report)
}

/// Flattened copy of every parameter, for determinism checks.
pub fn snapshot(params: &ParamStore) -> Vec<Tensor<f32>> {
    params.iter().map(|(_, t)| t.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        p.insert("a", Tensor::scalar(0.0)).unwrap();
        let mut opt = Adam::new(&p, 0.1);
        opt.update(&mut p, &[vec![2.0, -0.5], vec![1.0]], &[false, true]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.get("a").unwrap().data()[0], 0.0);
    }
}
