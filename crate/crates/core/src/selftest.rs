//! Property suites shared by the `selftest` command and the acceptance run:
//! causality of the entropy model, bit-exact coding, rate consistency, range
//! coder fuzzing and finite-difference gradient checks.

use std::time::{Duration, Instant};

use bisic_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::CrossViewAttention;
use crate::coding::buffer::encode_buffer;
use crate::coding::cdf::{decode_value, QuantizedCdf, ALPHABET};
use crate::coding::codec::{at_position, window};
use crate::coding::rc::RangeDecoder;
use crate::coding::{compress, decompress, CoderBuffer};
use crate::config::{AttentionKind, CoderBackend, Mode, ModelConfig};
use crate::data::{desk_spec, generate_synthetic_pair, pairs_to_tensor, StereoPair};
use crate::entropy_model::{causal_tap_mask, is_anchor, EntropyModel, CONTEXT_KERNEL};
use crate::error::Result;
use crate::model::{round_latent, Model, Quantizer};
use crate::nn::{Conv, Ctx, Init, ParamStore};

/// Outcome of one property check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String, start: Instant) -> Self {
        CheckResult { name: name.to_string(), passed, detail, elapsed: start.elapsed() }
    }
}

/// Sizes of the suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSize {
    pub causality_trials: usize,
    pub coding_pairs: usize,
    pub fuzz_draws: usize,
}

impl SuiteSize {
    pub const FULL: SuiteSize = SuiteSize { causality_trials: 100, coding_pairs: 20, fuzz_draws: 100_000 };
    pub const QUICK: SuiteSize = SuiteSize { causality_trials: 20, coding_pairs: 2, fuzz_draws: 10_000 };
}

/// Input size of the causality and coding suites.
pub const SUITE_SIDE: usize = 64;
/// Relative error bound of the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn tiny_model(mode: Mode, seed: u64) -> Result<Model> {
    Model::new(ModelConfig { mode, ..ModelConfig::desk() }, seed)
}

/// Rounded latents and hyper feature of `pair`.
fn latents(model: &Model, pair: &StereoPair) -> (Tensor<f32>, Tensor<f32>) {
    let g = Graph::inference();
    let cx = Ctx::new(&g, &model.params);
    let x = cx.constant(pairs_to_tensor(&[pair]));
    let y = model.backbone.encode(&cx, x);
    let z = model.backbone.hyper_encode(&cx, y);
    let zt = model.backbone.hyper_decode(&cx, cx.constant(z.value().map(round_latent)));
    (y.value().map(round_latent), zt.value().as_ref().clone())
}

fn full_params(model: &Model, y_hat: &Tensor<f32>, zt: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let g = Graph::inference();
    let cx = Ctx::new(&g, &model.params);
    let p = model.entropy.params(&cx, cx.constant(y_hat.clone()), cx.constant(zt.clone()));
    (p.mu.value().as_ref().clone(), p.sigma.value().as_ref().clone())
}

fn window_params(model: &Model, y_hat: &Tensor<f32>, zt: &Tensor<f32>, k: usize, r: usize, c: usize) -> (Tensor<f32>, Tensor<f32>) {
    let em = &model.entropy;
    let sc = em.slice_channels;
    let g = Graph::inference();
    let cx = Ctx::new(&g, &model.params);
    let (h, w) = (y_hat.dim(3), y_hat.dim(4));
    let prev = (k > 0).then(|| cx.constant(y_hat.narrow(1, 0, k * sc)));
    let theta = em.channel_context(&cx, k, prev, [1, 2, h, w]).map(|t| cx.constant(at_position(&t.value(), r, c)));
    let win = cx.constant(window(y_hat, k * sc, sc, r, c));
    let p = em.ar_params_window(&cx, k, win, cx.constant(at_position(zt, r, c)), theta);
    (p.mu.value().as_ref().clone(), p.sigma.value().as_ref().clone())
}

fn same_bits(a: f32, b: f32) -> bool {
    a.to_bits() == b.to_bits()
}

fn random_latent(rng: &mut impl Rng) -> f32 {
    rng.gen_range(-20i32..=20) as f32
}

/// Autoregressive causality: at random (slice, position, view) targets,
/// randomizing every latent the decoder has not yet decoded must leave the
/// target's `(μ, σ)` bitwise unchanged, through both the full-grid training
/// path and the windowed coding path.
pub fn ar_causality(trials: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let model = tiny_model(Mode::Ar, seed)?;
    let pair = generate_synthetic_pair(&desk_spec(seed, SUITE_SIDE, SUITE_SIDE))?;
    let (y_hat, zt) = latents(&model, &pair);
    let (n, h, w) = (y_hat.dim(1), y_hat.dim(3), y_hat.dim(4));
    let sc = model.entropy.slice_channels;
    let (base_mu, base_sigma) = full_params(&model, &y_hat, &zt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let (mut violations, mut sensitive) = (0usize, 0usize);
    for _ in 0..trials {
        let k = rng.gen_range(0..model.entropy.slices);
        let (r, c, v) = (rng.gen_range(0..h), rng.gen_range(0..w), rng.gen_range(0..2));
        let target = r * w + c;
        let mut pert = y_hat.clone();
        for ch in k * sc..n {
            for p in 0..h * w {
                if ch >= (k + 1) * sc || p >= target {
                    for view in 0..2 {
                        pert.set(&[0, ch, view, p / w, p % w], random_latent(&mut rng));
                    }
                }
            }
        }
        let (mu, sigma) = full_params(&model, &pert, &zt);
        let (wmu0, wsig0) = window_params(&model, &y_hat, &zt, k, r, c);
        let (wmu, wsig) = window_params(&model, &pert, &zt, k, r, c);
        let mut ok = true;
        for j in 0..sc {
            let at = [0, k * sc + j, v, r, c];
            ok &= same_bits(mu.at(&at), base_mu.at(&at)) && same_bits(sigma.at(&at), base_sigma.at(&at));
            let wat = [0, j, v, 0, 0];
            ok &= same_bits(wmu.at(&wat), wmu0.at(&wat)) && same_bits(wsig.at(&wat), wsig0.at(&wat));
        }
        if !ok {
            violations += 1;
        }
        // Control: changing a latent the target may depend on should move it.
        if target > 0 || k > 0 {
            let mut ctl = y_hat.clone();
            let (cch, cp) = if target > 0 { (k * sc, target - 1) } else { (0, rng.gen_range(0..h * w)) };
            for view in 0..2 {
                let old = ctl.at(&[0, cch, view, cp / w, cp % w]);
                ctl.set(&[0, cch, view, cp / w, cp % w], old + 7.0);
            }
            let (cmu, csig) = full_params(&model, &ctl, &zt);
            let moved = (0..sc).any(|j| {
                let at = [0, k * sc + j, v, r, c];
                !same_bits(cmu.at(&at), base_mu.at(&at)) || !same_bits(csig.at(&at), base_sigma.at(&at))
            });
            sensitive += moved as usize;
        }
    }
    let detail = format!("{violations} violations in {trials} trials; causal controls moved the target in {sensitive}");
    Ok(CheckResult::new("causality (autoregressive)", violations == 0, detail, start))
}

/// Checkerboard causality: perturbing the non-anchor half of a slice (and all
/// later slices) leaves every anchor `(μ, σ)` of the slice bitwise unchanged,
/// and non-anchor parameters depend on the anchors only.
pub fn ckbd_causality(trials: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let model = tiny_model(Mode::Ckbd, seed)?;
    let pair = generate_synthetic_pair(&desk_spec(seed, SUITE_SIDE, SUITE_SIDE))?;
    let (y_hat, zt) = latents(&model, &pair);
    let (n, h, w) = (y_hat.dim(1), y_hat.dim(3), y_hat.dim(4));
    let sc = model.entropy.slice_channels;
    let (base_mu, base_sigma) = full_params(&model, &y_hat, &zt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A);
    let (mut anchor_violations, mut nonanchor_violations) = (0usize, 0usize);
    for _ in 0..trials {
        let k = rng.gen_range(0..model.entropy.slices);
        let mut pert = y_hat.clone();
        for ch in k * sc..n {
            for p in 0..h * w {
                if ch >= (k + 1) * sc || !is_anchor(p / w, p % w) {
                    for view in 0..2 {
                        pert.set(&[0, ch, view, p / w, p % w], random_latent(&mut rng));
                    }
                }
            }
        }
        let (mu, sigma) = full_params(&model, &pert, &zt);
        let (mut a_ok, mut n_ok) = (true, true);
        for j in 0..sc {
            for view in 0..2 {
                for p in 0..h * w {
                    let at = [0, k * sc + j, view, p / w, p % w];
                    let same = same_bits(mu.at(&at), base_mu.at(&at)) && same_bits(sigma.at(&at), base_sigma.at(&at));
                    if is_anchor(p / w, p % w) {
                        a_ok &= same;
                    } else {
                        n_ok &= same;
                    }
                }
            }
        }
        anchor_violations += !a_ok as usize;
        nonanchor_violations += !n_ok as usize;
    }
    let detail = format!(
        "{anchor_violations} anchor and {nonanchor_violations} non-anchor violations in {trials} trials"
    );
    Ok(CheckResult::new("causality (checkerboard)", anchor_violations + nonanchor_violations == 0, detail, start))
}

/// Bit-exact round trip and rate consistency over `pairs` synthetic pairs in
/// both modes. Returns the round-trip result and the rate result.
pub fn coding_checks(pairs: usize, seed: u64) -> Result<[CheckResult; 2]> {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut max_diff = 0f32;
    let mut rate_failures = 0usize;
    let mut worst_overhead = f64::NEG_INFINITY;
    let mut substreams = 0usize;
    for mode in [Mode::Ar, Mode::Ckbd] {
        let model = tiny_model(mode, seed)?;
        for i in 0..pairs {
            let pair = generate_synthetic_pair(&desk_spec(seed.wrapping_add(1000 + i as u64), SUITE_SIDE, 2 * SUITE_SIDE))?;
            let c = compress(&model, &pair)?;
            let bytes = c.bitstream.to_bytes();
            let d = decompress(&model, &bytes)?;
            let g = Graph::<f32>::inference();
            let cx = Ctx::new(&g, &model.params);
            let out = model.forward(&cx, cx.constant(pairs_to_tensor(&[&pair])), &mut Quantizer::<ChaCha8Rng>::Round);
            let reference = out.x_hat.value();
            let diff = reference.data().iter().zip(d.x_hat.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            let y_same = out.y_hat.value().data() == d.y_hat.data();
            max_diff = max_diff.max(diff);
            if diff != 0.0 || !y_same || reference.data().iter().zip(d.x_hat.data()).any(|(a, b)| !same_bits(*a, *b)) {
                mismatches += 1;
            }
            let bs = &c.bitstream;
            let streams = [&bs.z[0], &bs.z[1], &bs.y[0], &bs.y[1]];
            for (s, est) in streams.iter().zip(c.stats.estimate_bits) {
                let measured = 8.0 * s.len() as f64;
                substreams += 1;
                worst_overhead = worst_overhead.max(measured - est);
                if !(measured >= est && measured <= est * 1.02 + 128.0) {
                    rate_failures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let roundtrip = CheckResult {
        name: "round trip (both modes)".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatching of {} pairs; max abs diff {max_diff}", 2 * pairs),
        elapsed,
    };
    let rate = CheckResult {
        name: "rate consistency".into(),
        passed: rate_failures == 0,
        detail: format!("{rate_failures} of {substreams} substreams outside bounds; worst excess {worst_overhead:.1} bits"),
        elapsed,
    };
    Ok([roundtrip, rate])
}

fn random_table(rng: &mut impl Rng) -> QuantizedCdf {
    match rng.gen_range(0..3) {
        0 => QuantizedCdf::gaussian(rng.gen_range(-130.0..130.0), rng.gen_range(0.04..60.0)),
        1 => {
            let probs: Vec<f64> = (0..ALPHABET).map(|_| rng.gen::<f64>().powi(8)).collect();
            QuantizedCdf::from_probs(&probs)
        }
        _ => {
            let mut probs = vec![0.0; ALPHABET];
            for _ in 0..rng.gen_range(1..6) {
                probs[rng.gen_range(0..ALPHABET)] = rng.gen::<f64>();
            }
            QuantizedCdf::from_probs(&probs)
        }
    }
}

/// Encodes `draws` random values against random tables and decodes them back.
pub fn coder_fuzz(draws: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF0F0);
    let tables: Vec<QuantizedCdf> = (0..1000).map(|_| random_table(&mut rng)).collect();
    let mut mismatches = 0usize;
    let mut escapes = 0usize;
    const CHUNK: usize = 5000;
    let mut done = 0;
    while done < draws {
        let count = CHUNK.min(draws - done);
        let mut buf = CoderBuffer::new();
        let mut coded = Vec::with_capacity(count);
        for _ in 0..count {
            let t = rng.gen_range(0..tables.len());
            let value = if rng.gen_bool(0.05) {
                rng.gen_range(-32767..=32767)
            } else {
                rng.gen_range(-140..=140)
            };
            escapes += !(-128..=127).contains(&value) as usize;
            buf.push_value(&tables[t], value);
            coded.push((t, value));
        }
        let bytes = encode_buffer(CoderBackend::Reference, &buf)?;
        let mut dec = RangeDecoder::new(&bytes)?;
        for &(t, value) in &coded {
            match decode_value(&mut dec, &tables[t]) {
                Ok(v) if v == value => {}
                _ => mismatches += 1,
            }
        }
        done += count;
    }
    let detail = format!("{mismatches} mismatches in {draws} values ({escapes} escapes) over {} tables", tables.len());
    Ok(CheckResult::new("range coder fuzz", mismatches == 0, detail, start))
}

/// Builds the checked function from parameters and inputs.
pub type GradFn<'a> = dyn for<'g> Fn(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64> + 'a;

/// Maximum relative error between analytic and central-difference gradients
/// of `sum(f · R)` for a fixed random `R`, over every input element and every
/// parameter the function uses.
pub fn max_gradient_error(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &GradFn<'_>, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::new();
    let cx = Ctx::new(&g, store);
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&cx, &vars);
    let weights = Tensor::from_fn(&out.shape(), |_| rng.gen_range(-1.0..1.0));
    let loss = out.mul(cx.constant(weights.clone())).sum_all();
    let mut grads = g.backward(loss);
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
    let param_grads = cx.param_grads(&mut grads);

    let probe = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let cx = Ctx::new(&g, store);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&cx, &vars).value();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
    let mut worst = 0f64;
    let mut checked = 0usize;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (probe(store, &plus) - probe(store, &minus)) / (2.0 * FD_STEP);
            let analytic = input_grads[k].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel(analytic, numeric));
            checked += 1;
        }
    }
    for id in store.ids() {
        let Some(grad) = &param_grads[id.0] else { continue };
        for i in 0..store.get(id).numel() {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += FD_STEP;
            let up = probe(&s, inputs);
            s.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = probe(&s, inputs);
            worst = worst.max(rel(grad.data()[i], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn grad_result(name: &str, worst: f64, checked: usize, extra: &str, start: Instant) -> CheckResult {
    let passed = worst < GRAD_TOLERANCE && extra.is_empty();
    let mut detail = format!("max relative error {worst:.2e} over {checked} derivatives");
    if !extra.is_empty() {
        detail.push_str("; ");
        detail.push_str(extra);
    }
    CheckResult::new(name, passed, detail, start)
}

/// Mutual attention block between the two views.
pub fn gradcheck_mutual_attention(seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut store = ParamStore::default();
    let block = CrossViewAttention::new(&mut Init::new(&mut store, seed), "attention", AttentionKind::Mutual, 4, 3);
    let store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[1, 4, 2, 3, 4], &mut rng, 1.0);
    let (worst, checked) = max_gradient_error(&store, &[x], &|cx, v| block.forward(cx, v[0]), seed);
    grad_result("gradient: mutual attention", worst, checked, "", start)
}

/// Masked 3D context convolution; masked taps must get exactly zero gradient.
pub fn gradcheck_masked_conv(seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut store = ParamStore::default();
    let [kd, kh, kw] = CONTEXT_KERNEL;
    let mask = causal_tap_mask(true);
    let conv = Conv::new_masked(
        &mut Init::new(&mut store, seed),
        "context",
        2,
        3,
        CONTEXT_KERNEL,
        [1, 1, 1],
        [kd / 2, kh / 2, kw / 2],
        Some(mask.clone()),
    );
    let store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[1, 2, 2, 4, 5], &mut rng, 1.0);
    let (worst, checked) = max_gradient_error(&store, std::slice::from_ref(&x), &|cx, v| conv.forward(cx, v[0]), seed);

    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    let out = conv.forward(&cx, g.constant(x));
    let mut grads = g.backward(out.square().sum_all());
    let pg = cx.param_grads(&mut grads);
    let wg = pg[conv.w.0].as_ref().expect("weight gradient");
    let leaked = wg.data().iter().enumerate().filter(|(i, v)| mask[i % mask.len()] == 0.0 && **v != 0.0).count();
    let extra = if leaked > 0 { format!("{leaked} masked taps received gradient") } else { String::new() };
    grad_result("gradient: masked 3D convolution", worst, checked, &extra, start)
}

/// Aggregation layers of a slice followed by the discretized Gaussian rate.
pub fn gradcheck_aggregate_likelihood(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let cfg = ModelConfig { n: 4, m: 4, k: 2, attention_embed: 2, channel_features: 4, ..ModelConfig::desk() };
    cfg.validate()?;
    let mut store = ParamStore::default();
    let em = EntropyModel::new(&mut Init::new(&mut store, seed), &cfg);
    let store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (2, 3);
    let zt = random_tensor(&[1, 2 * cfg.n, 2, h, w], &mut rng, 1.0);
    let theta = random_tensor(&[1, cfg.channel_features, 2, h, w], &mut rng, 1.0);
    let ups = random_tensor(&[1, cfg.context_channels(), 2, h, w], &mut rng, 1.0);
    let k = 1;
    // Integer targets at the rounded means keep every likelihood well above the floor.
    let y = {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let p = em.aggregate(&cx, k, g.constant(zt.clone()), Some(g.constant(theta.clone())), g.constant(ups.clone()));
        p.mu.value().map(|v| v.round())
    };
    let (worst, checked) = max_gradient_error(
        &store,
        &[zt, theta, ups],
        &|cx, v| {
            let p = em.aggregate(cx, k, v[0], Some(v[1]), v[2]);
            cx.constant(y.clone()).gaussian_rate(p.mu, p.sigma)
        },
        seed,
    );
    Ok(grad_result("gradient: aggregation and likelihood", worst, checked, "", start))
}

/// Every suite at the given size.
pub fn run_suite(size: SuiteSize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![ar_causality(size.causality_trials, seed)?, ckbd_causality(size.causality_trials, seed)?];
    out.extend(coding_checks(size.coding_pairs, seed)?);
    out.push(coder_fuzz(size.fuzz_draws, seed)?);
    out.push(gradcheck_mutual_attention(seed));
    out.push(gradcheck_masked_conv(seed));
    out.push(gradcheck_aggregate_likelihood(seed)?);
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  result  time      detail\n", "check");
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:<6}  {:>7.2}s  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.elapsed.as_secs_f64(),
            r.detail
        ));
    }
    s
}
