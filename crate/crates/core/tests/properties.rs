use proptest::prelude::*;

use sstm_core::attention::AttentionWeights;
use sstm_core::autodiff::{ConvAxis, Tape};
use sstm_core::flow_io::{self, FlowFile};
use sstm_core::metrics::{self, BandKind, Mask, RegionSpec};
use sstm_core::synth::{Dataset, SceneDistribution, Split};
use sstm_core::update;
use sstm_core::{oracle, Tensor};

fn tensor(shape: &[usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn dims(lo: usize, hi: usize) -> impl Strategy<Value = (usize, usize)> {
    (lo..=hi, lo..=hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[4, 7], -30.0, 30.0)) {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let s = t.softmax(v, 1).unwrap();
        let y = t.value(s);
        for r in 0..4 {
            let row = &y.data()[r * 7..(r + 1) * 7];
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tanh_and_sigmoid_stay_in_range(x in tensor(&[32], -20.0, 20.0)) {
        let mut t = Tape::<f32>::new();
        let v = t.constant(x.cast());
        let a = t.tanh(v).unwrap();
        let b = t.sigmoid(v).unwrap();
        prop_assert!(t.value(a).data().iter().all(|&y| (-1.0..=1.0).contains(&y)));
        prop_assert!(t.value(b).data().iter().all(|&y| (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn conv_extent_formula(len in 3usize..12, k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        prop_assume!(k <= len + 2 * pad);
        let x = Tensor::<f64>::from_fn(&[2, 3, len], |i| (i as f64 * 0.37).sin());
        let kern = Tensor::<f64>::from_fn(&[3, 2, k], |i| (i as f64 * 0.11).cos());
        let mut t = Tape::<f64>::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
        let y = t.conv_axis(xv, kv, ConvAxis::X, stride, pad).unwrap();
        let want = (len + 2 * pad - k) / stride + 1;
        prop_assert_eq!(t.shape(y), &[3, 3, want][..]);
        let o = oracle::conv_axis(&x, &kern, ConvAxis::X, stride, pad);
        prop_assert!(t.value(y).max_abs_diff(&o) < 1e-9);
    }

    #[test]
    fn avg_pool_preserves_constants(c in -5.0f64..5.0, (h, w) in dims(1, 4)) {
        let x = Tensor::full(&[2, 2 * h, 2 * w], c);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let y = t.avg_pool2(v).unwrap();
        prop_assert!(t.value(y).data().iter().all(|&p| (p - c).abs() < 1e-12));
    }

    #[test]
    fn identity_grid_sampling_is_exact(m in tensor(&[2, 5, 6], -3.0, 3.0)) {
        let mut t = Tape::<f64>::new();
        let v = t.constant(m.clone());
        let g = t.constant(update::pixel_grid::<f64>(5, 6));
        let y = t.bilinear_sample(v, g).unwrap();
        prop_assert_eq!(t.value(y), &m);
    }

    #[test]
    fn attention_rows_sum_to_one(c in tensor(&[5, 3, 3], -2.0, 2.0), wq in tensor(&[5, 4], -1.0, 1.0), wk in tensor(&[5, 4], -1.0, 1.0)) {
        let mut t = Tape::<f64>::new();
        let cv = t.constant(c.reshape(&[5, 9]).unwrap());
        let ct = t.transpose(cv).unwrap();
        let (q, k) = (t.constant(wq), t.constant(wk));
        let theta = t.matmul(ct, q).unwrap();
        let phi = t.matmul(ct, k).unwrap();
        let a = sstm_core::attention::attention_matrix(&mut t, theta, phi).unwrap();
        for r in 0..9 {
            let s: f64 = t.value(a).data()[r * 9..(r + 1) * 9].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(
        c in tensor(&[4, 2, 3], -2.0, 2.0),
        m in tensor(&[3, 2, 3], -2.0, 2.0),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let run = |c: &Tensor<f64>, m: &Tensor<f64>| {
            let mut t = Tape::<f64>::new();
            let w = AttentionWeights {
                w_q: t.constant(Tensor::from_fn(&[4, 4], |i| ((i * 5 % 7) as f64 - 3.0) / 4.0)),
                w_k: t.constant(Tensor::from_fn(&[4, 4], |i| ((i * 3 % 5) as f64 - 2.0) / 3.0)),
                w_v: t.constant(Tensor::from_fn(&[3, 3], |i| ((i % 4) as f64 - 1.5) / 2.0)),
                alpha: t.constant(Tensor::scalar(0.7)),
                heads: 1,
            };
            let (cv, mv) = (t.constant(c.clone()), t.constant(m.clone()));
            let y = sstm_core::attention::attend(&mut t, cv, mv, &w).unwrap();
            t.value(y).clone()
        };
        let permute = |x: &Tensor<f64>| {
            let ch = x.shape()[0];
            Tensor::from_fn(x.shape(), |i| x.data()[(i / 6) * 6 + perm[i % 6]]).reshape(&[ch, 2, 3]).unwrap()
        };
        let y = run(&c, &m);
        let yp = run(&permute(&c), &permute(&m));
        prop_assert!(yp.max_abs_diff(&permute(&y)) < 1e-12);
    }

    #[test]
    fn flo_round_trip_is_bitwise(f in tensor(&[2, 3, 5], -1e3, 1e3)) {
        let ff = FlowFile::new(f.cast()).unwrap();
        let bytes = flow_io::encode_flo(&ff);
        let back = flow_io::decode_flo(&bytes).unwrap();
        prop_assert_eq!(flow_io::encode_flo(&back), bytes);
        prop_assert!(back.flow.data().iter().zip(ff.flow.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn kitti_quantization_within_half_step(v in -500.0f32..500.0) {
        let q = flow_io::kitti_encode(v).unwrap();
        prop_assert!((flow_io::kitti_decode(q) - v).abs() <= 1.0 / 128.0);
    }

    #[test]
    fn speed_bands_partition_global_epe(p in tensor(&[2, 6, 7], -6.0, 6.0), g in tensor(&[2, 6, 7], -6.0, 6.0), cut in 0.5f64..6.0) {
        let (p, g) = (p.cast::<f32>(), g.cast::<f32>());
        let bands = [
            RegionSpec::new(BandKind::Speed, 0.0, cut).unwrap(),
            RegionSpec::new(BandKind::Speed, cut, f64::INFINITY).unwrap(),
        ];
        let r = metrics::evaluate(&p, &g, None, None, &bands).unwrap();
        let global: f64 = r.get("epe").unwrap().parse().unwrap();
        let recon: f64 = r.get("partition.s.epe").unwrap().parse().unwrap();
        prop_assert!((global - recon).abs() <= 1e-6 * global.max(1.0));
    }

    #[test]
    fn occlusion_distance_zero_exactly_on_mask(bits in prop::collection::vec(any::<bool>(), 30)) {
        prop_assume!(bits.iter().any(|&b| b));
        let m = Mask::new(5, 6, bits.clone()).unwrap();
        let d = metrics::occlusion_distance(&m);
        for (i, &b) in bits.iter().enumerate() {
            prop_assert_eq!(d[i] == 0.0, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_is_deterministic_and_split_by_parity(seed in any::<u64>(), count in 1usize..6) {
        let mut dist = SceneDistribution::toy();
        dist.h = 24;
        dist.w = 24;
        let a = Dataset::new(dist.clone(), count, seed).unwrap();
        let b = Dataset::new(dist, count, seed).unwrap();
        for i in 0..count {
            prop_assert_eq!(a.get(i).unwrap().checksum(), b.get(i).unwrap().checksum());
        }
        let train: Vec<usize> = a.indices(Split::Train).collect();
        let val: Vec<usize> = a.indices(Split::Val).collect();
        prop_assert_eq!(train.len() + val.len(), count);
        prop_assert!(train.iter().all(|i| i % 2 == 0) && val.iter().all(|i| i % 2 == 1));
    }

    #[test]
    fn residual_steps_are_multiples_of_interval(n in 1usize..20, r in 1usize..6) {
        let steps: Vec<usize> = (1..=n).filter(|&k| update::residual_applies(k, r)).collect();
        prop_assert_eq!(steps, (1..=n).filter(|k| k % r == 0).collect::<Vec<_>>());
    }
}
