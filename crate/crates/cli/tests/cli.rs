use std::path::Path;
use std::process::{Command, Output};

fn bisic(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bisic")).args(args).current_dir(dir).output().expect("spawn bisic")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--data", "data", "--out", out, "--progress", "0"];
    for s in ["steps=3", "batch_size=1", "crop_size=64"] {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    let o = bisic(&args, dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = bisic(&["gen-data", "--out", "data", "--count", "2", "--height", "64", "--width", "128"], dir.path());
    assert!(o.status.success());
    dir
}

#[test]
fn compress_decompress_roundtrip_and_exit_codes() {
    let dir = setup();
    let d = dir.path();
    train_tiny(d, "m.ckpt", &[]);
    let left = "data/pair_0000_left.png";
    let right = "data/pair_0000_right.png";
    let o = bisic(&["compress", "--in-left", left, "--in-right", right, "--model", "m.ckpt", "--out", "p.bsic"], d);
    assert!(o.status.success());
    assert!(stdout(&o).contains("bpp left"));
    let o = bisic(&["decompress", "--in", "p.bsic", "--model", "m.ckpt", "--out-left", "l.png", "--out-right", "r.png"], d);
    assert!(o.status.success());
    let a = image::open(d.join("l.png")).unwrap();
    assert_eq!((a.width(), a.height()), (128, 64));

    let bytes = std::fs::read(d.join("p.bsic")).unwrap();
    std::fs::write(d.join("short.bsic"), &bytes[..10]).unwrap();
    let o = bisic(&["decompress", "--in", "short.bsic", "--model", "m.ckpt", "--out-left", "x.png", "--out-right", "y.png"], d);
    assert_eq!(o.status.code(), Some(2));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    std::fs::write(d.join("flip.bsic"), &flipped).unwrap();
    let o = bisic(&["decompress", "--in", "flip.bsic", "--model", "m.ckpt", "--out-left", "x.png", "--out-right", "y.png"], d);
    assert_eq!(o.status.code(), Some(3));
    assert!(!d.join("x.png").exists());

    let o = bisic(&["compress", "--in-left", left, "--in-right", right, "--model", "m.ckpt", "--mode", "ckbd", "--out", "q.bsic"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("q.bsic").exists());
}

#[test]
fn ckbd_model_roundtrips() {
    let dir = setup();
    let d = dir.path();
    train_tiny(d, "c.ckpt", &["--set", "mode=ckbd"]);
    let o = bisic(
        &["compress", "--in-left", "data/pair_0001_left.png", "--in-right", "data/pair_0001_right.png", "--model", "c.ckpt", "--mode", "ckbd", "--out", "c.bsic"],
        d,
    );
    assert!(o.status.success());
    let o = bisic(&["decompress", "--in", "c.bsic", "--model", "c.ckpt", "--out-left", "l.png", "--out-right", "r.png"], d);
    assert!(o.status.success());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bisic(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(bisic(&["--help"], dir.path()).status.code(), Some(0));
    let o = bisic(&["gen-data", "--out", "d", "--set", "nonsense=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = bisic(&["train", "--synthetic", "2", "--out", "m.ckpt", "--set", "lambda=-1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

const CURVE: &str = "lambda,bpp_left,bpp_right,bpp_avg,psnr_left,psnr_right,psnr_avg,msssim_left,msssim_right,msssim_avg
256,0.1,0.1,0.1,30,30,30,0.90,0.90,0.90
512,0.2,0.2,0.2,32,32,32,0.93,0.93,0.93
1024,0.4,0.4,0.4,34,34,34,0.95,0.95,0.95
2048,0.8,0.8,0.8,36,36,36,0.97,0.97,0.97
";

#[test]
fn bd_of_identical_curves_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), CURVE).unwrap();
    let o = bisic(&["bd", "a.csv", "a.csv"], dir.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("BDBR (PSNR)    +0.00%") || s.contains("BDBR (PSNR)    -0.00%"), "{s}");
}

#[test]
fn plot_emits_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.csv"), CURVE).unwrap();
    let halved: String = CURVE
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { l.to_string() } else { l.replace("0.1,0.1,0.1", "0.05,0.05,0.05").replace("0.2,0.2,0.2", "0.1,0.1,0.1").replace("0.4,0.4,0.4", "0.2,0.2,0.2").replace("0.8,0.8,0.8", "0.4,0.4,0.4") })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(d.join("b.csv"), halved).unwrap();
    let o = bisic(&["bd", "a.csv", "b.csv"], d);
    assert!(stdout(&o).contains("BDBR (PSNR)    -50.00%"), "{}", stdout(&o));
    let o = bisic(&["plot", "--curves", "a.csv", "b.csv", "--reference", "a", "--out", "report"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rd_psnr.png", "rd_msssim.png", "rd_points.csv", "bd_table.md"] {
        assert!(d.join("report").join(f).exists(), "{f}");
    }
}

#[test]
fn selftest_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bisic(&["selftest", "--quick"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(!stdout(&o).contains("FAIL"));
}
