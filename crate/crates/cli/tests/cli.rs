use std::path::Path;
use std::process::{Command, Output};

use sstm_core::checkpoint;
use sstm_core::flow_io::{self, FlowFile};
use sstm_core::Tensor;

fn sstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sstm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn check_count(o: &Output) -> usize {
    let out = stdout(o);
    let line = out.lines().find(|l| l.starts_with("checks=")).expect("totals line");
    line.split_whitespace().next().unwrap()["checks=".len()..].parse().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "feature_dim=8\ncontext_dim=8\nhidden_dim=8\nmotion_dim=8\nkey_dim=8\niters=2\nval_samples=2\nlog_every=1\nbatch=1\n";

#[test]
fn help_and_usage_errors() {
    assert_eq!(sstm(&["--help"]).status.code(), Some(0));
    let bad = sstm(&["selftest", "--frobnicate"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("Usage"));
    assert_eq!(sstm(&["selftest", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn selftest_gradcheck_passes_and_detects_injected_fault() {
    let ok = sstm(&["selftest", "--suite", "gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = sstm(&["selftest", "--suite", "gradcheck", "--inject-fault", "bilinear-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    let out = stdout(&bad);
    let line = out.lines().find(|l| l.contains("bilinear_sample")).unwrap();
    assert!(line.contains("FAIL"), "{line}");
}

#[test]
fn selftest_all_runs_more_checks() {
    let all = sstm(&["selftest", "--suite", "all"]);
    assert_eq!(all.status.code(), Some(0));
    let n_all = check_count(&all);
    for s in ["oracle", "invariants"] {
        let o = sstm(&["selftest", "--suite", s]);
        assert_eq!(o.status.code(), Some(0));
        assert!(n_all > check_count(&o));
    }
    assert!(stderr(&all).contains("config suite=all"));
}

#[test]
fn synth_exports_parse_and_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = sstm(&["synth", "--count", "2", "--seed", seed, "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run("1", "a");
    let b = run("2", "b");
    let a2 = run("1", "c");
    assert_eq!(a, a2);
    assert_ne!(a, b);
    let f = flow_io::read_flo(dir.path().join("a/0000/flow23.flo")).unwrap();
    assert_eq!((f.height, f.width), (64, 64));
    let bytes = std::fs::read(dir.path().join("a/0000/flow23.flo")).unwrap();
    assert_eq!(flow_io::encode_flo(&f), bytes);
}

#[test]
fn viz_of_zero_flow_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("z.flo");
    flow_io::write_flo(&flo, &FlowFile::new(Tensor::zeros(&[2, 5, 6])).unwrap()).unwrap();
    let png = dir.path().join("z.png");
    let o = sstm(&["viz", "--flow", p(&flo), "--out", p(&png)]);
    assert_eq!(o.status.code(), Some(0));
    let img = flow_io::read_rgb_png(&png).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn eval_reports_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    assert_eq!(sstm(&["synth", "--out", p(&s), "--seed", "5"]).status.code(), Some(0));
    let gt = s.join("0000/flow23.flo");
    let occ = s.join("0000/occ.png");
    let o = sstm(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--occ", p(&occ), "--bands", "d0-10,d10+"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("epe=0.000000") && out.contains("fl=0.0000"), "{out}");
    assert!(out.contains("partition.d.ok=true"), "{out}");

    let no_occ = sstm(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--bands", "d0-10"]);
    assert_eq!(no_occ.status.code(), Some(2));

    let small = dir.path().join("small.flo");
    flow_io::write_flo(&small, &FlowFile::new(Tensor::zeros(&[2, 8, 8])).unwrap()).unwrap();
    let mismatch = sstm(&["eval", "--pred", p(&small), "--gt", p(&gt)]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(stderr(&mismatch).contains("resolution mismatch"));
}

#[test]
fn train_is_deterministic_and_infer_writes_flows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let train = |variant: &str, out: &str| {
        let ck = dir.path().join(out);
        let o = sstm(&["train", "--config", p(&cfg), "--steps", "3", "--variant", variant, "--seed", "7", "--out", p(&ck)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stderr(&o).contains("config feature_dim=8"));
        let losses: Vec<String> = stdout(&o)
            .lines()
            .filter(|l| l.starts_with("step="))
            .map(|l| l.split('\t').take(2).collect::<Vec<_>>().join("\t"))
            .collect();
        assert_eq!(losses.len(), 3);
        (ck, losses)
    };
    let (ck, a) = train("sstm++", "a.ckpt");
    let (_, b) = train("sstm++", "b.ckpt");
    assert_eq!(a, b);
    let (ck_plain, _) = train("sstm", "c.ckpt");
    let (w, _) = checkpoint::load(&ck).unwrap();
    let (w_plain, _) = checkpoint::load(&ck_plain).unwrap();
    assert!(w.names().any(|n| n.starts_with("attn.")));
    assert!(!w_plain.names().any(|n| n.starts_with("attn.")));

    let s = dir.path().join("s");
    assert_eq!(sstm(&["synth", "--out", p(&s)]).status.code(), Some(0));
    let frames: Vec<String> = (1..=3).map(|t| p(&s.join(format!("0000/frame{t}.png"))).to_string()).collect();
    let out = dir.path().join("pred");
    let mut args = vec!["infer", "--ckpt", p(&ck), "--out", p(&out), "--frames"];
    args.extend(frames.iter().map(String::as_str));
    let o = sstm(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("init=zero"));
    for stem in ["flow12", "flow23"] {
        let f = flow_io::read_flo(out.join(format!("{stem}.flo"))).unwrap();
        assert_eq!((f.height, f.width), (64, 64));
        assert!(out.join(format!("{stem}.png")).exists());
    }

    let prev = out.join("flow23.flo");
    let mut warm = args.clone();
    warm.extend(["--warm-start", "shift_pair", "--prev", p(&prev)]);
    let o = sstm(&warm);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("init=shift_pair"));
}

#[test]
fn train_rejects_conflicting_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "variant=sstm\n").unwrap();
    let o = sstm(&["train", "--config", p(&cfg), "--variant", "sstm++", "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conflicts"));
}
