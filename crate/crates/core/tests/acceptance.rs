//! Acceptance run: one PASS/FAIL line per criterion P1..P9.
//!
//! P6 trains four desk models for 2000 steps each and dominates the runtime.
//! `BISIC_ACCEPT_ONLY=P1,P8` restricts the run to the listed criteria.

use std::time::{Duration, Instant};

use bisic::coding::{compress, decompress};
use bisic::config::{AttentionKind, Mode, ModelConfig, TrainConfig};
use bisic::data::{desk_spec, generate_synthetic_pair, pairs_to_tensor, synthetic_dataset, Image};
use bisic::eval::{bd_rate, evaluate_set, psnr, Fit, RdPoint, PSNR_CAP};
use bisic::model::{Model, Quantizer, HYPER_STRIDE, LATENT_STRIDE};
use bisic::msssim::ms_ssim;
use bisic::nn::Ctx;
use bisic::selftest::{ar_causality, ckbd_causality, coder_fuzz, coding_checks, gradcheck_aggregate_likelihood, gradcheck_masked_conv, gradcheck_mutual_attention, CheckResult, SuiteSize};
use bisic::train::{median_loss, train, TrainOptions};
use bisic_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;
const P1_BUDGET: Duration = Duration::from_secs(120);
const P6_BUDGET: Duration = Duration::from_secs(2 * 3600);
const P6_STEPS: usize = 2000;
const P6_LAMBDA: f64 = 512.0;
const P6_TAIL: usize = 100;
const P7_SIDE: usize = 256;
const P7_RATIO: f64 = 0.5;
const MSSSIM_TOL: f64 = 1e-6;
const PSNR_TOL: f64 = 1e-9;
const BD_IDENTITY_TOL: f64 = 1e-9;
const BD_ORACLE_TOL: f64 = 0.1;
const BD_ORACLE_CURVES: usize = 50;
const ORACLE_INTERVALS: usize = 200_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn from_checks(checks: &[CheckResult]) -> Outcome {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks.iter().map(|c| format!("{}: {} ({:.1?})", c.name, c.detail, c.elapsed)).collect::<Vec<_>>().join("; ");
    outcome(passed, detail)
}

fn p1() -> bisic::Result<Outcome> {
    let c = ar_causality(SuiteSize::FULL.causality_trials, SEED)?;
    let within = c.elapsed < P1_BUDGET;
    let mut o = from_checks(&[c]);
    o.passed &= within;
    Ok(o)
}

fn p2() -> bisic::Result<Outcome> {
    Ok(from_checks(&[ckbd_causality(SuiteSize::FULL.causality_trials, SEED)?]))
}

fn p3_p4() -> bisic::Result<(Outcome, Outcome)> {
    let [roundtrip, rate] = coding_checks(SuiteSize::FULL.coding_pairs, SEED)?;
    let fuzz = coder_fuzz(SuiteSize::FULL.fuzz_draws, SEED)?;
    Ok((from_checks(&[roundtrip, fuzz]), from_checks(&[rate])))
}

fn p5() -> bisic::Result<Outcome> {
    Ok(from_checks(&[
        gradcheck_mutual_attention(SEED),
        gradcheck_masked_conv(SEED),
        gradcheck_aggregate_likelihood(SEED)?,
    ]))
}

struct Trained {
    name: &'static str,
    model: Model,
    final_loss: f64,
}

fn p6() -> bisic::Result<Outcome> {
    let start = Instant::now();
    let data = synthetic_dataset(64, 128, 128, SEED)?;
    let test = synthetic_dataset(10, 128, 128, 10_000)?;
    let cfg = TrainConfig { steps: P6_STEPS, lambda: P6_LAMBDA, seed: SEED, ..TrainConfig::default() };
    let variants: [(&str, fn(&mut ModelConfig)); 4] = [
        ("full", |_| {}),
        ("entropy_minnen", |c| c.ablations.entropy_minnen = true),
        ("attention_none", |c| c.ablations.attention = AttentionKind::None),
        ("channel_context_off", |c| c.ablations.channel_context_off = true),
    ];
    let mut runs = Vec::new();
    for (name, tweak) in variants {
        let mut mc = ModelConfig::desk();
        tweak(&mut mc);
        let mut model = Model::new(mc, SEED)?;
        let report = train(&mut model, &data, &cfg, &TrainOptions::default())?;
        let final_loss = median_loss(&report.log[report.log.len() - P6_TAIL..]);
        eprintln!("  P6 {name}: final RD loss {final_loss:.4} after {:.0?}", start.elapsed());
        runs.push(Trained { name, model, final_loss });
    }
    let full = &runs[0];
    let mut passed = true;
    let mut detail = vec![format!("full L {:.4}", full.final_loss)];
    for r in &runs[1..] {
        let lower = full.final_loss < r.final_loss;
        passed &= lower;
        detail.push(format!("{} L {:.4} ({})", r.name, r.final_loss, if lower { "full lower" } else { "full NOT lower" }));
    }
    let pf = evaluate_set(&full.model, &test, P6_LAMBDA)?;
    let pa = evaluate_set(&runs[2].model, &test, P6_LAMBDA)?;
    let rd_better = pf.bpp_avg() < pa.bpp_avg() && pf.psnr_avg() >= pa.psnr_avg();
    passed &= rd_better;
    detail.push(format!(
        "test set full {:.4} bpp {:.3} dB, attention_none {:.4} bpp {:.3} dB ({})",
        pf.bpp_avg(),
        pf.psnr_avg(),
        pa.bpp_avg(),
        pa.psnr_avg(),
        if rd_better { "full better" } else { "full NOT better" }
    ));
    let elapsed = start.elapsed();
    passed &= elapsed < P6_BUDGET;
    detail.push(format!("{elapsed:.0?}"));
    Ok(outcome(passed, detail.join("; ")))
}

fn p7() -> bisic::Result<Outcome> {
    let pair = generate_synthetic_pair(&desk_spec(SEED, P7_SIDE, P7_SIDE))?;
    let grid = (P7_SIDE / LATENT_STRIDE) * (P7_SIDE / LATENT_STRIDE);
    let mut times = Vec::new();
    let mut counters_ok = true;
    let mut detail = Vec::new();
    for (mode, expected) in [(Mode::Ar, grid), (Mode::Ckbd, 2)] {
        let model = Model::new(ModelConfig { mode, ..ModelConfig::desk() }, SEED)?;
        let t = Instant::now();
        let c = compress(&model, &pair)?;
        let d = decompress(&model, &c.bitstream.to_bytes())?;
        times.push(t.elapsed().as_secs_f64());
        let evals_ok = [&c.stats.evaluations, &d.stats.evaluations]
            .iter()
            .all(|e| !e.is_empty() && e.iter().all(|v| *v == [expected, expected]));
        counters_ok &= evals_ok;
        detail.push(format!("{mode} {:.2}s, evaluations per slice per view {:?}", times.last().unwrap(), c.stats.evaluations[0]));
    }
    let ratio = times[1] / times[0];
    detail.push(format!("ratio {ratio:.3}"));
    Ok(outcome(ratio < P7_RATIO && counters_ok, detail.join("; ")))
}

fn constant_image(h: usize, w: usize, v: f32) -> Image {
    let mut im = Image::new(h, w);
    im.data.iter_mut().for_each(|p| *p = v);
    im
}

fn rd(bpp: f64, quality: f64) -> RdPoint {
    RdPoint { lambda: 0.0, bpp: [bpp; 2], psnr: [quality; 2], msssim: [0.9; 2] }
}

/// Log-rate as a function of quality, integrated by dense trapezoids over
/// the common quality interval; curves are interpolated with Lagrange
/// polynomials or, when the production fit chose it, the same PCHIP knots.
fn bd_rate_oracle(reference: &[RdPoint], test: &[RdPoint]) -> f64 {
    let curve = |pts: &[RdPoint]| -> (Vec<f64>, Vec<f64>) {
        let mut v: Vec<(f64, f64)> = pts.iter().map(|p| (p.psnr_avg(), p.bpp_avg().log10())).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.into_iter().unzip()
    };
    let (xr, yr) = curve(reference);
    let (xt, yt) = curve(test);
    let interp = |x: &[f64], y: &[f64]| -> Box<dyn Fn(f64) -> f64> {
        match Fit::new(x, y).unwrap() {
            Fit::Cubic(_) => {
                let (x, y) = (x.to_vec(), y.to_vec());
                Box::new(move |t| {
                    (0..x.len())
                        .map(|i| y[i] * (0..x.len()).filter(|&j| j != i).map(|j| (t - x[j]) / (x[i] - x[j])).product::<f64>())
                        .sum()
                })
            }
            pchip => Box::new(move |t| pchip.eval(t)),
        }
    };
    let (fr, ft) = (interp(&xr, &yr), interp(&xt, &yt));
    let lo = xr[0].max(xt[0]);
    let hi = xr[xr.len() - 1].min(xt[xt.len() - 1]);
    let h = (hi - lo) / ORACLE_INTERVALS as f64;
    let mut area = 0.0;
    for i in 0..ORACLE_INTERVALS {
        let (a, b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        area += 0.5 * h * ((ft(a) - fr(a)) + (ft(b) - fr(b)));
    }
    (10f64.powf(area / (hi - lo)) - 1.0) * 100.0
}

fn random_curve(rng: &mut impl Rng) -> Vec<RdPoint> {
    let a = rng.gen_range(30.0..36.0);
    let b = rng.gen_range(3.0..8.0);
    let mut r = rng.gen_range(0.05..0.2);
    (0..4)
        .map(|_| {
            r *= rng.gen_range(1.5..2.5);
            rd(r, a + b * r.ln() + rng.gen_range(-0.05..0.05))
        })
        .collect()
}

fn p8() -> bisic::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let pair = generate_synthetic_pair(&desk_spec(SEED, 192, 192))?;
    let ms = ms_ssim(&pair.left, &pair.left)?;
    let ms_ok = (ms - 1.0).abs() <= MSSSIM_TOL;

    let mut psnr_err: f64 = 0.0;
    let ten_log2 = 10.0 * 2f64.log10();
    for (a, b, expected) in [(0.0, 0.125, 6.0 * ten_log2), (0.25, 0.75, 2.0 * ten_log2), (0.0, 1.0, 0.0), (0.5, 0.5, PSNR_CAP)] {
        let p = psnr(&constant_image(8, 8, a), &constant_image(8, 8, b))?;
        psnr_err = psnr_err.max((p - expected).abs());
    }
    let mut half = constant_image(8, 8, 0.25);
    half.data.iter_mut().step_by(2).for_each(|p| *p = 0.75);
    psnr_err = psnr_err.max((psnr(&constant_image(8, 8, 0.25), &half)? - 3.0 * ten_log2).abs());
    let psnr_ok = psnr_err <= PSNR_TOL;

    let base = random_curve(&mut rng);
    let identity = bd_rate(&base, &base)?;
    let identity_ok = identity.abs() <= BD_IDENTITY_TOL;

    let halved: Vec<RdPoint> = base.iter().map(|p| rd(p.bpp_avg() / 2.0, p.psnr_avg())).collect();
    let half = bd_rate(&base, &halved)?;
    let half_ok = (half + 50.0).abs() <= BD_ORACLE_TOL;

    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < BD_ORACLE_CURVES {
        let (r, t) = (random_curve(&mut rng), random_curve(&mut rng));
        let Ok(bd) = bd_rate(&r, &t) else { continue };
        worst = worst.max((bd - bd_rate_oracle(&r, &t)).abs());
        done += 1;
    }
    let oracle_ok = worst <= BD_ORACLE_TOL;
    Ok(outcome(
        ms_ok && psnr_ok && identity_ok && half_ok && oracle_ok,
        format!(
            "MS-SSIM(x,x) {ms:.9}; PSNR max error {psnr_err:.2e} dB; BDBR identical {identity:.2e}%; rate halved {half:.4}%; oracle max |diff| {worst:.2e} over {BD_ORACLE_CURVES} pairs"
        ),
    ))
}

fn p9() -> bisic::Result<Outcome> {
    let model = Model::new(ModelConfig::desk(), SEED)?;
    let mut shapes_ok = true;
    let mut maps = Vec::new();
    let sizes = [(64, 64), (64, 128), (128, 64), (128, 192), (256, 256)];
    for (h, w) in sizes {
        let pair = generate_synthetic_pair(&desk_spec(SEED, h, w))?;
        let g = Graph::<f32>::inference();
        let cx = Ctx::new(&g, &model.params);
        let x = cx.constant(pairs_to_tensor(&[&pair]));
        let out = model.forward(&cx, x, &mut Quantizer::<ChaCha8Rng>::Round);
        let n = model.config.n;
        let m = model.config.m;
        shapes_ok &= out.y.shape() == [1, n, 2, h / LATENT_STRIDE, w / LATENT_STRIDE];
        shapes_ok &= out.z_hat.shape() == [1, m, 2, h / HYPER_STRIDE, w / HYPER_STRIDE];
        shapes_ok &= out.x_hat.shape() == [1, 3, 2, h, w];
        maps.push(model.backbone.encoder_attention_maps(&cx, x));
    }
    let maps_ok = !maps[0].is_empty() && maps.iter().all(|m| *m == maps[0]);
    Ok(outcome(
        shapes_ok && maps_ok,
        format!("{} sizes; attention maps {:?} at every size", sizes.len(), maps[0]),
    ))
}

type Results = Vec<(&'static str, bisic::Result<Outcome>, Duration)>;

fn run(results: &mut Results, wanted: &dyn Fn(&str) -> bool, id: &'static str, f: fn() -> bisic::Result<Outcome>) {
    if wanted(id) {
        let t = Instant::now();
        let r = f();
        let e = t.elapsed();
        print_line(id, &r, e);
        results.push((id, r, e));
    }
}

fn main() {
    let only: Option<Vec<String>> =
        std::env::var("BISIC_ACCEPT_ONLY").ok().map(|s| s.split(',').map(|p| p.trim().to_uppercase()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|p| p == id));
    let mut results = Results::new();
    run(&mut results, &wanted, "P1", p1);
    run(&mut results, &wanted, "P2", p2);
    if wanted("P3") || wanted("P4") {
        let t = Instant::now();
        let (a, b) = match p3_p4() {
            Ok((a, b)) => (Ok(a), Ok(b)),
            Err(e) => (Err(bisic::Error::Other(e.to_string())), Err(e)),
        };
        let e = t.elapsed();
        for (id, r) in [("P3", a), ("P4", b)] {
            if wanted(id) {
                print_line(id, &r, e);
                results.push((id, r, e));
            }
        }
    }
    run(&mut results, &wanted, "P5", p5);
    run(&mut results, &wanted, "P6", p6);
    run(&mut results, &wanted, "P7", p7);
    run(&mut results, &wanted, "P8", p8);
    run(&mut results, &wanted, "P9", p9);
    let failed = results.iter().filter(|(_, r, _)| !matches!(r, Ok(o) if o.passed)).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
}

fn print_line(id: &str, r: &bisic::Result<Outcome>, elapsed: Duration) {
    match r {
        Ok(o) => println!("{id} {} [{elapsed:.1?}] {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => println!("{id} FAIL [{elapsed:.1?}] error: {e}"),
    }
}
