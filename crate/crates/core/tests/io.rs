use sstm_core::flow_io::{self, FlowFile};
use sstm_core::metrics::{self, Mask, RegionSpec};
use sstm_core::synth::{generate, SceneSpec};
use sstm_core::{checkpoint, Error, Tensor};

fn ramp(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[2, h, w], |i| (i as f32 * 0.731).sin() * 40.0 - 0.125)
}

#[test]
fn flo_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.flo");
    let f = FlowFile::new(ramp(7, 11)).unwrap();
    flow_io::write_flo(&path, &f).unwrap();
    let back = flow_io::read_flo(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), flow_io::encode_flo(&back));
    assert_eq!((back.width, back.height), (11, 7));
}

#[test]
fn kitti_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let mut f = FlowFile::new(ramp(9, 13)).unwrap();
    f.valid = Some(Mask::from_fn(9, 13, |y, x| (x + y) % 5 != 0));
    flow_io::write_kitti_png(&path, &f).unwrap();
    let back = flow_io::read_kitti_png(&path).unwrap();
    assert_eq!(back.valid, f.valid);
    let m = f.valid.as_ref().unwrap();
    let n = 9 * 13;
    let worst = (0..2 * n)
        .filter(|&i| m.data[i % n])
        .map(|i| (back.flow.data()[i] - f.flow.data()[i]).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 128.0, "{worst}");
}

#[test]
fn corrupt_flo_rejected() {
    let f = FlowFile::new(ramp(4, 5)).unwrap();
    let good = flow_io::encode_flo(&f);
    // bad sentinel
    let mut bad = good.clone();
    bad[0] ^= 0xff;
    assert!(flow_io::decode_flo(&bad).is_err());
    // every truncation
    for n in 0..good.len() {
        assert!(flow_io::decode_flo(&good[..n]).is_err(), "prefix {n}");
    }
    // trailing garbage
    let mut long = good.clone();
    long.push(0);
    assert!(flow_io::decode_flo(&long).is_err());
    // negative width
    let mut neg = good;
    neg[4..8].copy_from_slice(&(-5i32).to_le_bytes());
    assert!(flow_io::decode_flo(&neg).is_err());
}

#[test]
fn corrupt_png_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    flow_io::write_kitti_png(&path, &FlowFile::new(ramp(4, 4)).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.png");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(flow_io::read_kitti_png(&cut).is_err());
    // an 8-bit image is not a KITTI flow map
    let rgb = dir.path().join("rgb.png");
    flow_io::write_rgb_png(&rgb, &Tensor::full(&[3, 4, 4], 0.5)).unwrap();
    assert!(flow_io::read_kitti_png(&rgb).is_err());
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not a png at all").unwrap();
    assert!(flow_io::read_rgb_png(&junk).is_err());
}

#[test]
fn corrupt_checkpoint_rejected() {
    let cfg = sstm_core::config::ModelConfig::sstm().toy();
    let w = sstm_core::model::init_weights(&cfg, 1).unwrap();
    let mut bytes = checkpoint::encode(&w, &cfg);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x04;
    assert!(matches!(checkpoint::decode(&bytes), Err(Error::Checksum { .. })));
}

#[test]
fn occlusion_bands_partition_on_synthetic_scene() {
    let spec = SceneSpec {
        h: 40,
        w: 48,
        background_seed: 3,
        background_velocity: (0.5, 0.0),
        foreground: Some(sstm_core::synth::Foreground {
            shape: sstm_core::synth::Shape::Rect { half_w: 8.0, half_h: 6.0 },
            center: (20.0, 18.0),
            velocity: (2.5, -1.0),
            texture_seed: 4,
        }),
        noise_sigma: 0.0,
    };
    let s = generate(&spec, 0).unwrap();
    let gt = s.gt.gt_f2.as_ref().unwrap();
    let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + ((i * 7) % 5) as f32 * 0.3);
    let bands: Vec<RegionSpec> = ["d0-10", "d10-60", "d60+"].iter().map(|b| RegionSpec::parse(b).unwrap()).collect();
    let r = metrics::evaluate(&pred, gt, None, Some(&s.gt.occlusion), &bands).unwrap();
    let global: f64 = r.get("epe").unwrap().parse().unwrap();
    let recon: f64 = r.get("partition.d.epe").unwrap().parse().unwrap();
    assert!((global - recon).abs() <= 1e-6 * global.max(1.0), "{global} vs {recon}");
    assert_eq!(r.get("partition.d.ok"), Some("true"));
}

#[test]
fn zero_flow_renders_white() {
    let rgb = flow_io::flow_to_color(&Tensor::zeros(&[2, 3, 4]), None).unwrap();
    assert!(rgb.iter().all(|&c| c == 255));
}
