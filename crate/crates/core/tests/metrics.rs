use bisic::data::{desk_spec, generate_synthetic_pair, Image};
use bisic::eval::{bd_psnr, bd_rate, psnr, psnr_from_mse, RdPoint, PSNR_CAP};
use bisic::msssim::ms_ssim;
use bisic::report::{curves_from_csv, curves_to_csv, emit_report, Curve};
use bisic::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn filled(h: usize, w: usize, v: f32) -> Image {
    let mut im = Image::new(h, w);
    im.data.iter_mut().for_each(|p| *p = v);
    im
}

fn rd(lambda: f64, bpp: f64, psnr: f64, msssim: f64) -> RdPoint {
    RdPoint { lambda, bpp: [bpp; 2], psnr: [psnr; 2], msssim: [msssim; 2] }
}

fn curve(scale: f64, shift: f64) -> Vec<RdPoint> {
    [0.1, 0.2, 0.4, 0.8]
        .iter()
        .enumerate()
        .map(|(i, &b)| rd(256.0 * 2f64.powi(i as i32), b * scale, 35.0 + 5.0 * b.log2() + shift, 0.99 - 0.02 / b))
        .collect()
}

#[test]
fn psnr_closed_forms() {
    assert!((psnr(&filled(4, 4, 0.0), &filled(4, 4, 0.5)).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    assert!((psnr(&filled(4, 4, 0.0), &filled(4, 4, 1.0)).unwrap()).abs() < 1e-9);
    assert_eq!(psnr(&filled(4, 4, 0.3), &filled(4, 4, 0.3)).unwrap(), PSNR_CAP);
    assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-9);
    assert!(psnr(&filled(4, 4, 0.0), &filled(4, 8, 0.0)).is_err());
}

#[test]
fn msssim_identity_and_independent_noise() {
    let pair = generate_synthetic_pair(&desk_spec(3, 192, 192)).unwrap();
    assert!((ms_ssim(&pair.left, &pair.left).unwrap() - 1.0).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut a = Image::new(192, 192);
    let mut b = Image::new(192, 192);
    a.data.iter_mut().for_each(|p| *p = rng.gen());
    b.data.iter_mut().for_each(|p| *p = rng.gen());
    assert!(ms_ssim(&a, &b).unwrap() < 0.5);
}

#[test]
fn bd_identical_and_halved() {
    let r = curve(1.0, 0.0);
    assert!(bd_rate(&r, &r).unwrap().abs() < 1e-9);
    assert!(bd_psnr(&r, &r).unwrap().abs() < 1e-9);
    assert!((bd_rate(&r, &curve(0.5, 0.0)).unwrap() + 50.0).abs() < 0.1);
    assert!((bd_psnr(&r, &curve(1.0, 0.7)).unwrap() - 0.7).abs() < 1e-6);
}

#[test]
fn bd_needs_overlap_and_points() {
    let r = curve(1.0, 0.0);
    let far = curve(1.0, 40.0);
    assert!(matches!(bd_rate(&r, &far), Err(Error::Overlap { .. })));
    assert!(bd_rate(&r[..3], &r).is_err());
}

#[test]
fn csv_roundtrip_keeps_curves() {
    let curves = vec![Curve::new("a", curve(1.0, 0.0)), Curve::new("b", curve(0.8, 0.1))];
    let back = curves_from_csv(&curves_to_csv(&curves).unwrap(), "x").unwrap();
    assert_eq!(back.len(), 2);
    for (c, d) in curves.iter().zip(&back) {
        assert_eq!(c.name, d.name);
        assert_eq!(c.points, d.points);
    }
}

#[test]
fn report_emits_two_plots_a_csv_and_a_table() {
    let dir = tempfile_dir();
    let curves = vec![Curve::new("ref", curve(1.0, 0.0)), Curve::new("test", curve(0.8, 0.0))];
    let files = emit_report(&curves, "ref", &dir).unwrap();
    for f in [&files.psnr_plot, &files.msssim_plot, &files.csv, &files.bd_table] {
        assert!(std::fs::metadata(f).unwrap().len() > 0);
    }
    let table = std::fs::read_to_string(&files.bd_table).unwrap();
    assert!(table.contains("test"));
    std::fs::remove_dir_all(&dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("bisic-report-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bd_rate_of_scaled_curve_is_the_scale(s in 0.3f64..3.0, shift in -0.5f64..0.5) {
        let r = curve(1.0, shift);
        let t: Vec<RdPoint> = r.iter().map(|p| rd(p.lambda, p.bpp_avg() * s, p.psnr_avg(), p.msssim_avg())).collect();
        prop_assert!((bd_rate(&r, &t).unwrap() - (s - 1.0) * 100.0).abs() < 1e-6);
    }

    #[test]
    fn bd_rate_is_antisymmetric_in_log_domain(s in 0.5f64..2.0, shift in -0.3f64..0.3) {
        let r = curve(1.0, 0.0);
        let t = curve(s, shift);
        let fwd = (1.0 + bd_rate(&r, &t).unwrap() / 100.0).log10();
        let back = (1.0 + bd_rate(&t, &r).unwrap() / 100.0).log10();
        prop_assert!((fwd + back).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric(v in prop::collection::vec(0.0f32..1.0, 48), u in prop::collection::vec(0.0f32..1.0, 48)) {
        let a = Image { height: 4, width: 4, data: v };
        let b = Image { height: 4, width: 4, data: u };
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
