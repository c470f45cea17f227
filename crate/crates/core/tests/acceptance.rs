//! One line per headline criterion, written straight to stdout so it
//! shows up without `--nocapture`.
//!
//! The toy training run dominates the runtime. `SSTM_TOY_STEPS` shortens it
//! for local iteration; anything other than 2000 steps is reported as a
//! failure of that criterion.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sstm_core::checks::{self, CheckResult, Options, Suite};
use sstm_core::config::{ContextMode, ModelConfig, Variant};
use sstm_core::flow_io::{self, FlowFile};
use sstm_core::metrics::{self, RegionSpec};
use sstm_core::model::Model;
use sstm_core::synth::Dataset;
use sstm_core::train::{self, TrainOptions};
use sstm_core::Tensor;

// keeps the timed criteria from sharing the core with each other
static SERIAL: Mutex<()> = Mutex::new(());

fn report(name: &str, passed: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let verdict = if passed { "PASS" } else { "FAIL" };
    writeln!(out, "ACCEPTANCE {name:<12} {verdict}  {detail}").unwrap();
    out.flush().unwrap();
}

fn failures(r: &[CheckResult]) -> Vec<String> {
    r.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
}

fn suite_criterion(name: &str, suite: Suite) -> bool {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (r, secs) = checks::run_timed(suite, Options::default());
    let bad = failures(&r);
    let ok = bad.is_empty() && secs < 300.0;
    let worst = r.iter().map(|c| c.value).fold(0.0, f64::max);
    report(
        name,
        ok,
        &format!("checks={} failed={} worst_err={worst:.2e} runtime={secs:.1}s {bad:?}", r.len(), bad.len()),
    );
    ok
}

#[test]
fn gradient() {
    assert!(suite_criterion("gradient", Suite::Gradcheck));
}

#[test]
fn oracle() {
    assert!(suite_criterion("oracle", Suite::Oracle));
}

#[test]
fn structural() {
    let r = checks::structural_checks();
    let bad = failures(&r);
    report("structural", bad.is_empty(), &format!("checks={} {bad:?}", r.len()));
    assert!(bad.is_empty());
}

#[test]
fn behavioral() {
    let r = checks::behavioral_checks();
    let bad = failures(&r);
    report("behavioral", bad.is_empty(), &format!("checks={} {bad:?}", r.len()));
    assert!(bad.is_empty());
}

#[test]
fn io() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flo_ok = true;
    let mut kitti_worst = 0.0f32;
    let mut corrupt_ok = true;
    let mut partition_worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let f = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-300.0f32..300.0));
        let ff = FlowFile::new(f.clone()).unwrap();
        let bytes = flow_io::encode_flo(&ff);
        let back = flow_io::decode_flo(&bytes).unwrap();
        flo_ok &= back.flow.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        for &v in f.data() {
            let q = flow_io::kitti_encode(v).unwrap();
            kitti_worst = kitti_worst.max((flow_io::kitti_decode(q) - v).abs());
        }
        let cut = rng.gen_range(0..bytes.len());
        corrupt_ok &= flow_io::decode_flo(&bytes[..cut]).is_err();
        let mut bad = bytes.clone();
        bad[rng.gen_range(0..4)] ^= 0x20;
        corrupt_ok &= flow_io::decode_flo(&bad).is_err();
    }
    let ds = Dataset::new(sstm_core::synth::SceneDistribution::toy(), 10, 3).unwrap();
    let bands: Vec<RegionSpec> = ["d0-10", "d10-60", "d60+", "s0-1", "s1-3", "s3+"]
        .iter()
        .map(|b| RegionSpec::parse(b).unwrap())
        .collect();
    for s in ds.iter() {
        let s = s.unwrap();
        let gt = s.gt.gt_f2.as_ref().unwrap();
        let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + rng.gen_range(-2.0f32..2.0));
        let occ = s.gt.occlusion.count() > 0;
        let used: Vec<RegionSpec> = bands.iter().copied().filter(|b| occ || b.kind == metrics::BandKind::Speed).collect();
        // band sums recomputed unrounded; the report prints 6 decimals
        let global = metrics::epe(&pred, gt, None).unwrap();
        let speed = metrics::speed_map(gt);
        let mut sum = 0.0;
        let mut count = 0;
        for b in used.iter().filter(|b| b.kind == metrics::BandKind::Speed) {
            let st = metrics::banded_epe(&pred, gt, None, b, &speed);
            if let Ok(st) = st {
                sum += st.epe * st.count as f64;
                count += st.count;
            }
        }
        partition_worst = partition_worst.max((sum / count as f64 - global).abs() / global.max(1.0));
        if occ {
            let dist = metrics::occlusion_distance(&s.gt.occlusion);
            let (mut sum, mut count) = (0.0, 0);
            for b in used.iter().filter(|b| b.kind == metrics::BandKind::OccDistance) {
                if let Ok(st) = metrics::banded_epe(&pred, gt, None, b, &dist) {
                    sum += st.epe * st.count as f64;
                    count += st.count;
                }
            }
            partition_worst = partition_worst.max((sum / count as f64 - global).abs() / global.max(1.0));
        }
    }
    let ok = flo_ok && kitti_worst <= 1.0 / 128.0 && corrupt_ok && partition_worst <= 1e-6;
    report(
        "io",
        ok,
        &format!(
            "flo_bitwise={flo_ok} kitti_max_err={kitti_worst:.5} corrupt_rejected={corrupt_ok} partition_rel_err={partition_worst:.1e}"
        ),
    );
    assert!(ok);
}

fn short_run(cfg: ModelConfig, steps: usize) -> f64 {
    let mut m = Model::new(cfg).unwrap();
    let opts = TrainOptions {
        steps,
        batch: 2,
        log_every: steps,
        val_samples: 8,
        ..TrainOptions::default()
    };
    let r = train::train(&mut m, &opts, |_| {}).unwrap();
    r.val.last().unwrap().1.epe
}

#[test]
fn ablation() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let gap = checks::ablation_alpha0_gap().unwrap();
    let steps = 100;
    let base = ModelConfig::sstm_pp().toy();
    let e_base = short_run(base.clone(), steps);
    let mut no_warp = base.clone();
    no_warp.use_warp_errors = false;
    let mut no_attn = ModelConfig::preset(Variant::Sstm).toy();
    no_attn.context_mode = base.context_mode;
    let mut ctx2d = base.clone();
    ctx2d.context_mode = match base.context_mode {
        ContextMode::Conv3d => ContextMode::Conv2dTwin,
        ContextMode::Conv2dTwin => ContextMode::Conv3d,
    };
    let deltas = [
        ("use_warp_errors=false".to_string(), short_run(no_warp, steps) - e_base),
        ("variant=sstm".to_string(), short_run(no_attn, steps) - e_base),
        (format!("context_mode={}", ctx2d.context_mode), short_run(ctx2d, steps) - e_base),
    ];
    let ok = gap <= 1e-5 && deltas.iter().all(|(_, d)| *d != 0.0 && d.is_finite());
    let detail: Vec<String> = deltas.iter().map(|(k, d)| format!("d_epe[{k}]={d:+.4}")).collect();
    report(
        "ablation",
        ok,
        &format!("alpha0_gap={gap:.1e} base_epe={e_base:.4} {} ({steps} steps each)", detail.join(" ")),
    );
    assert!(ok);
}

#[test]
fn toy_end_to_end() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let steps: usize = std::env::var("SSTM_TOY_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let mut m = Model::new(ModelConfig::sstm().toy()).unwrap();
    let opts = TrainOptions { steps, ..TrainOptions::default() };
    let t = Instant::now();
    let r = train::train(&mut m, &opts, |line| {
        let mut out = std::io::stdout().lock();
        writeln!(out, "  toy {line}\telapsed={:.0}s", t.elapsed().as_secs_f64()).unwrap();
    })
    .unwrap();
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let v = r.val.last().unwrap().1;
    // step-0 loss against the tail of the run, both averaged over a few steps
    let head = r.losses[..5.min(r.losses.len())].iter().sum::<f64>() / 5.0f64.min(r.losses.len() as f64);
    let k = 100.min(r.losses.len());
    let tail = r.losses[r.losses.len() - k..].iter().sum::<f64>() / k as f64;
    let drop = head / tail;

    // three identical frames should come out as (near) zero motion
    let val = train::validation_set(&opts).unwrap();
    let still: [Tensor<f32>; 3] = std::array::from_fn(|_| val[0].frames[0].clone());
    let pred = m.predict(&still, None).unwrap();
    let zero = Tensor::zeros(pred.f1.shape());
    let still_epe = (metrics::epe(&pred.f1, &zero, None).unwrap() + metrics::epe(&pred.f2, &zero, None).unwrap()) / 2.0;

    let ok = steps == 2000 && minutes < 45.0 && v.epe < 1.0 && v.d0_10 < 3.0 && drop >= 5.0;
    report(
        "toy",
        ok,
        &format!(
            "steps={steps} minutes={minutes:.1} val_epe={:.3} d0_10={:.3} loss_drop={drop:.1}x still_frames_epe={still_epe:.3}",
            v.epe, v.d0_10
        ),
    );
    assert!(ok);
}
