//! Conditional entropy model for stereo latents.
//!
//! Latents `[B, N, 2, h, w]` are split into `K` channel slices. For slice `k`
//! the Gaussian parameters of both views come from the hyperprior feature
//! `z̃`, a channel context `Θ` computed from slices `< k` of both views, and a
//! spatial context `Υ`. In autoregressive mode `Υ` is a masked 3D convolution
//! that sees strictly earlier raster positions of both views. In checkerboard
//! mode anchors use `(z̃, Θ)` only and non-anchors add `Υ` computed from the
//! decoded anchors.

use bisic_tensor::{ConvGeom, Float, Tensor, Var};

use crate::attention::MutualAttention;
use crate::config::{Mode, ModelConfig};
use crate::nn::{Conv, Ctx, Init, ParamId, Pointwise};

/// Half-width, in standard deviations, of the window outside which Gaussian
/// bins are treated as empty when building coding tables.
pub const TABLE_WINDOW_SIGMAS: f64 = 8.0;

/// Kernel of every spatial context convolution.
pub const CONTEXT_KERNEL: [usize; 3] = [3, 5, 5];

/// Tap mask for the autoregressive context. Spatial taps strictly before the
/// centre in raster order are kept; with `stereo` every view tap is kept,
/// otherwise only the same-view tap.
pub fn causal_tap_mask(stereo: bool) -> Vec<f32> {
    let [kd, kh, kw] = CONTEXT_KERNEL;
    let (ch, cw) = (kh / 2, kw / 2);
    let mut m = vec![0.0f32; kd * kh * kw];
    for d in 0..kd {
        for r in 0..kh {
            for c in 0..kw {
                let past = r < ch || (r == ch && c < cw);
                if past && (stereo || d == kd / 2) {
                    m[(d * kh + r) * kw + c] = 1.0;
                }
            }
        }
    }
    m
}

/// Tap mask keeping only the same-view taps of the anchor context kernel.
pub fn same_view_tap_mask() -> Vec<f32> {
    let [kd, kh, kw] = CONTEXT_KERNEL;
    (0..kd * kh * kw).map(|i| if i / (kh * kw) == kd / 2 { 1.0 } else { 0.0 }).collect()
}

pub fn is_anchor(row: usize, col: usize) -> bool {
    (row + col).is_multiple_of(2)
}

/// `[1, 1, 1, h, w]` indicator of anchor positions (same parity in both views).
pub fn anchor_mask<T: Float>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, 1, h, w], |i| if is_anchor(i / w, i % w) { T::one() } else { T::zero() })
}

/// Splits `[B, C, V, h, w]` into anchor and non-anchor parts, each zero at the
/// other part's positions.
pub fn checkerboard_split<T: Float>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let (h, w) = (s[3], s[4]);
    let mut anchor = t.clone();
    let mut non = t.clone();
    for (i, (a, n)) in anchor.data_mut().iter_mut().zip(non.data_mut().iter_mut()).enumerate() {
        let p = i % (h * w);
        if is_anchor(p / w, p % w) {
            *n = T::zero();
        } else {
            *a = T::zero();
        }
    }
    (anchor, non)
}

pub fn checkerboard_merge<T: Float>(anchor: &Tensor<T>, non: &Tensor<T>) -> Tensor<T> {
    assert_eq!(anchor.shape(), non.shape());
    let s = anchor.shape();
    let (h, w) = (s[3], s[4]);
    let data = anchor
        .data()
        .iter()
        .zip(non.data())
        .enumerate()
        .map(|(i, (&a, &n))| {
            let p = i % (h * w);
            if is_anchor(p / w, p % w) {
                a
            } else {
                n
            }
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Probability of the unit bin around `y` under `N(mu, sigma^2)`.
pub fn gaussian_likelihood(y: f64, mu: f64, sigma: f64) -> f64 {
    let v = (y - mu).abs();
    bisic_tensor::std_normal_cdf((0.5 - v) / sigma) - bisic_tensor::std_normal_cdf((-0.5 - v) / sigma)
}

/// Per-channel monotone cumulative density for the hyper-latents, evaluated
/// by a small network with softplus-positive matrices and tanh gates.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl FactorizedPrior {
    pub const FILTERS: [usize; 3] = [3, 3, 3];
    pub const INIT_SCALE: f64 = 10.0;

    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(&Self::FILTERS);
        widths.push(1);
        let layers = widths.len() - 1;
        let scale = Self::INIT_SCALE.powf(1.0 / layers as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..layers {
            let (fin, fout) = (widths[i], widths[i + 1]);
            let v = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(init.constant(&format!("{name}.matrix{i}"), &[channels, fout, fin], v as f32));
            biases.push(init.uniform(&format!("{name}.bias{i}"), &[channels, fout, 1], 0.5));
            if i + 1 < layers {
                factors.push(init.constant(&format!("{name}.factor{i}"), &[channels, fout, 1], 0.0));
            }
        }
        FactorizedPrior { channels, matrices, biases, factors }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits of the cumulative density at points `x: [C, 1, L]`, returned as `[C, 1, L]`.
    pub fn logits_cumulative<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for i in 0..self.matrices.len() {
            let m = cx.p(self.matrices[i]).softplus();
            h = m.matmul(h, false, false).add(cx.p(self.biases[i]));
            if let Some(&f) = self.factors.get(i) {
                h = h.add(cx.p(f).tanh().mul(h.tanh()));
            }
        }
        h
    }

    /// Bin probabilities of `z: [B, C, V, h, w]`, same shape.
    pub fn likelihood<'g, T: Float>(&self, cx: &Ctx<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let s = z.shape();
        assert_eq!(s[1], self.channels, "factorized prior channel mismatch");
        let l = s[0] * s[2] * s[3] * s[4];
        let flat = z.permute(&[1, 0, 2, 3, 4]).reshape(&[s[1], 1, l]);
        let lower = self.logits_cumulative(cx, flat.add_scalar(-0.5));
        let upper = self.logits_cumulative(cx, flat.add_scalar(0.5));
        let sum = lower.value().zip_map(&upper.value(), |a, b| a + b);
        let sign = cx.constant(sum.map(|v| if v > T::zero() { -T::one() } else { T::one() }));
        let p = sign.mul(upper).sigmoid().sub(sign.mul(lower).sigmoid()).abs();
        p.reshape(&[s[1], s[0], s[2], s[3], s[4]]).permute(&[1, 0, 2, 3, 4])
    }

    /// Bits of `z` under the prior (sum over all elements).
    pub fn bits<'g, T: Float>(&self, cx: &Ctx<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        self.likelihood(cx, z)
            .lower_bound(bisic_tensor::LIKELIHOOD_FLOOR)
            .ln()
            .scale(-1.0 / std::f64::consts::LN_2)
            .sum_all()
    }

    /// Probability of every integer in `lo..=hi` for each channel, `[C][hi-lo+1]`.
    pub fn integer_pmf(&self, cx: &Ctx<'_, f32>, lo: i32, hi: i32) -> Vec<Vec<f64>> {
        let n = (hi - lo + 1) as usize;
        let c = self.channels;
        let edges = Tensor::from_fn(&[c, 1, n + 1], |i| (lo as f32 - 0.5) + (i % (n + 1)) as f32);
        let logits = self.logits_cumulative(cx, cx.constant(edges)).value();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        (0..c)
            .map(|ch| {
                let row = &logits.data()[ch * (n + 1)..(ch + 1) * (n + 1)];
                (0..n)
                    .map(|s| {
                        let (a, b) = (row[s] as f64, row[s + 1] as f64);
                        let sg = if a + b > 0.0 { -1.0 } else { 1.0 };
                        (sig(sg * b) - sig(sg * a)).abs()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Channel context for one slice: mutual attention over the concatenated
/// earlier slices followed by four 1×1 layers.
#[derive(Clone, Debug)]
pub struct ChannelContext {
    attention: MutualAttention,
    project: Pointwise,
}

impl ChannelContext {
    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, prev: Var<'g, T>) -> Var<'g, T> {
        self.project.forward(cx, self.attention.forward(cx, prev))
    }
}

/// Learned modules of one channel slice.
#[derive(Clone, Debug)]
pub struct SliceModel {
    /// `None` for the first slice (its channel context is zero) and when
    /// channel context is disabled.
    pub channel: Option<ChannelContext>,
    /// Masked context (autoregressive) or anchor context (checkerboard).
    pub spatial: Conv,
    /// Parameters from all features (autoregressive) or for non-anchors.
    pub aggregate: Pointwise,
    /// Parameters of anchors (checkerboard only).
    pub anchor_aggregate: Option<Pointwise>,
}

/// Gaussian parameters of a latent tensor or slice.
#[derive(Clone, Copy)]
pub struct Params<'g, T: Float> {
    pub mu: Var<'g, T>,
    pub sigma: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub mode: Mode,
    pub n: usize,
    pub slices: usize,
    pub slice_channels: usize,
    /// Width of `Θ`, or 0 without channel context.
    pub theta_channels: usize,
    pub sigma_floor: f64,
    pub slice_models: Vec<SliceModel>,
    pub prior: FactorizedPrior,
}

fn aggregate_widths(input: usize, output: usize) -> Vec<usize> {
    vec![input, (input * 3 / 4).max(output), (input / 2).max(output), (input / 3).max(output), output]
}

impl EntropyModel {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let slices = cfg.slices();
        let sc = cfg.slice_channels();
        let theta = if cfg.uses_channel_context() { cfg.channel_features } else { 0 };
        let ctx_ch = cfg.context_channels();
        let hyper = 2 * cfg.n;
        let stereo = !cfg.ablations.entropy_minnen;
        let mut slice_models = Vec::with_capacity(slices);
        for k in 0..slices {
            let name = format!("entropy.slice{k}");
            let channel = (theta > 0 && k > 0).then(|| {
                let cin = k * sc;
                ChannelContext {
                    attention: MutualAttention::new(
                        init,
                        &format!("{name}.channel_attention"),
                        cin,
                        cfg.attention_embed.min(cin),
                    ),
                    project: Pointwise::new(init, &format!("{name}.channel_project"), &[cin, theta, theta, theta, theta]),
                }
            });
            let (spatial, anchor_aggregate) = match cfg.mode {
                Mode::Ar => {
                    let conv = Conv::new_masked(
                        init,
                        &format!("{name}.spatial"),
                        sc,
                        ctx_ch,
                        CONTEXT_KERNEL,
                        [1, 1, 1],
                        [1, 2, 2],
                        Some(causal_tap_mask(stereo)),
                    );
                    (conv, None)
                }
                Mode::Ckbd => {
                    let within = cfg.ablations.vanilla_ckbd || !stereo;
                    let conv = Conv::new_masked(
                        init,
                        &format!("{name}.anchor_context"),
                        sc,
                        ctx_ch,
                        CONTEXT_KERNEL,
                        [1, 1, 1],
                        [1, 2, 2],
                        within.then(same_view_tap_mask),
                    );
                    let ach = Pointwise::new(init, &format!("{name}.anchor_aggregate"), &aggregate_widths(hyper + theta, 2 * sc));
                    (conv, Some(ach))
                }
            };
            let aggregate = Pointwise::new(init, &format!("{name}.aggregate"), &aggregate_widths(hyper + theta + ctx_ch, 2 * sc));
            slice_models.push(SliceModel { channel, spatial, aggregate, anchor_aggregate });
        }
        let prior = FactorizedPrior::new(init, "entropy.prior", cfg.m);
        EntropyModel {
            mode: cfg.mode,
            n: cfg.n,
            slices,
            slice_channels: sc,
            theta_channels: theta,
            sigma_floor: cfg.sigma_floor,
            slice_models,
            prior,
        }
    }

    /// Channel context of slice `k` from the decoded slices `< k`
    /// (`prev: [B, k·N/K, 2, h, w]`, ignored for `k = 0`). `None` when the
    /// model has no channel context.
    pub fn channel_context<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        prev: Option<Var<'g, T>>,
        grid: [usize; 4],
    ) -> Option<Var<'g, T>> {
        if self.theta_channels == 0 {
            return None;
        }
        let [b, v, h, w] = grid;
        match &self.slice_models[k].channel {
            None => Some(cx.constant(Tensor::zeros(&[b, self.theta_channels, v, h, w]))),
            Some(cc) => {
                let prev = prev.expect("channel context needs the earlier slices");
                assert_eq!(prev.shape()[1], k * self.slice_channels, "channel context input width");
                Some(cc.forward(cx, prev))
            }
        }
    }

    fn to_params<'g, T: Float>(&self, raw: Var<'g, T>) -> Params<'g, T> {
        let sc = self.slice_channels;
        let mu = raw.narrow(1, 0, sc);
        let sigma = raw.narrow(1, sc, sc).softplus().add_scalar(self.sigma_floor);
        Params { mu, sigma }
    }

    fn features<'g, T: Float>(zt: Var<'g, T>, theta: Option<Var<'g, T>>, ups: Option<Var<'g, T>>) -> Var<'g, T> {
        let mut parts = vec![zt];
        parts.extend(theta);
        parts.extend(ups);
        let s0 = zt.shape();
        for p in &parts[1..] {
            let s = p.shape();
            assert!(s[0] == s0[0] && s[2..] == s0[2..], "context features are not aligned: {s0:?} vs {s:?}");
        }
        if parts.len() == 1 {
            zt
        } else {
            Var::concat(&parts, 1)
        }
    }

    /// Masked spatial context of slice `k` over the full grid.
    pub fn spatial_context<'g, T: Float>(&self, cx: &Ctx<'g, T>, k: usize, slice: Var<'g, T>) -> Var<'g, T> {
        self.slice_models[k].spatial.forward(cx, slice)
    }

    /// Autoregressive parameters of slice `k` over the full grid.
    pub fn ar_params<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        slice: Var<'g, T>,
        zt: Var<'g, T>,
        theta: Option<Var<'g, T>>,
    ) -> Params<'g, T> {
        let ups = self.spatial_context(cx, k, slice);
        self.aggregate(cx, k, zt, theta, ups)
    }

    /// Parameters from aligned features through the slice's aggregation layers.
    pub fn aggregate<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        zt: Var<'g, T>,
        theta: Option<Var<'g, T>>,
        ups: Var<'g, T>,
    ) -> Params<'g, T> {
        let f = Self::features(zt, theta, Some(ups));
        self.to_params(self.slice_models[k].aggregate.forward(cx, f))
    }

    /// Autoregressive parameters of a single position from a `[1, N/K, 2, 5, 5]`
    /// window centred on it; `zt` and `theta` are the features at that position.
    pub fn ar_params_window<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        window: Var<'g, T>,
        zt: Var<'g, T>,
        theta: Option<Var<'g, T>>,
    ) -> Params<'g, T> {
        let conv = &self.slice_models[k].spatial;
        let geom = ConvGeom::new(conv.geom.kernel, conv.geom.stride, [conv.geom.padding[0], 0, 0]);
        let ups = window.conv3d(conv.weight(cx), Some(cx.p(conv.b)), geom);
        self.aggregate(cx, k, zt, theta, ups)
    }

    /// Anchor parameters of slice `k` (checkerboard mode), full grid.
    pub fn anchor_params<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        zt: Var<'g, T>,
        theta: Option<Var<'g, T>>,
    ) -> Params<'g, T> {
        let agg = self.slice_models[k].anchor_aggregate.as_ref().expect("anchor parameters need checkerboard mode");
        self.to_params(agg.forward(cx, Self::features(zt, theta, None)))
    }

    /// Non-anchor parameters of slice `k` from the decoded anchors
    /// (`anchors` zero at non-anchor positions), full grid.
    pub fn nonanchor_params<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        k: usize,
        zt: Var<'g, T>,
        theta: Option<Var<'g, T>>,
        anchors: Var<'g, T>,
    ) -> Params<'g, T> {
        let ups = self.slice_models[k].spatial.forward(cx, anchors);
        self.aggregate(cx, k, zt, theta, ups)
    }

    /// Parameters of all latents given the full (noisy or rounded) `y_hat` and
    /// hyper feature `zt = [B, 2N, 2, h, w]`. Each slice only reads the
    /// elements its coding order allows.
    pub fn params<'g, T: Float>(&self, cx: &Ctx<'g, T>, y_hat: Var<'g, T>, zt: Var<'g, T>) -> Params<'g, T> {
        let s = y_hat.shape();
        assert_eq!(s[1], self.n, "latent channel mismatch");
        let grid = [s[0], s[2], s[3], s[4]];
        let sc = self.slice_channels;
        let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
        for k in 0..self.slices {
            let slice = y_hat.narrow(1, k * sc, sc);
            let prev = (k > 0).then(|| y_hat.narrow(1, 0, k * sc));
            let theta = self.channel_context(cx, k, prev, grid);
            let p = match self.mode {
                Mode::Ar => self.ar_params(cx, k, slice, zt, theta),
                Mode::Ckbd => {
                    let am = cx.constant(anchor_mask::<T>(s[3], s[4]));
                    let nm = cx.constant(anchor_mask::<T>(s[3], s[4]).map(|v| T::one() - v));
                    let a = self.anchor_params(cx, k, zt, theta);
                    let n = self.nonanchor_params(cx, k, zt, theta, slice.mul(am));
                    Params { mu: a.mu.mul(am).add(n.mu.mul(nm)), sigma: a.sigma.mul(am).add(n.sigma.mul(nm)) }
                }
            };
            mus.push(p.mu);
            sigmas.push(p.sigma);
        }
        if self.slices == 1 {
            Params { mu: mus[0], sigma: sigmas[0] }
        } else {
            Params { mu: Var::concat(&mus, 1), sigma: Var::concat(&sigmas, 1) }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use bisic_tensor::Graph;

    #[test]
    fn causal_mask_counts() {
        let stereo = causal_tap_mask(true);
        let mono = causal_tap_mask(false);
        assert_eq!(stereo.iter().filter(|&&v| v == 1.0).count(), 3 * 12);
        assert_eq!(mono.iter().filter(|&&v| v == 1.0).count(), 12);
        // centre tap of every view is masked
        for d in 0..3 {
            assert_eq!(stereo[d * 25 + 12], 0.0);
        }
    }

    #[test]
    fn two_by_two_checkerboard() {
        let t = Tensor::<f32>::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (a, n) = checkerboard_split(&t);
        assert_eq!(a.data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(n.data(), &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(checkerboard_merge(&a, &n).data(), t.data());
    }

    #[test]
    fn prior_normalizes() {
        let mut store = ParamStore::default();
        let mut init = Init::new(&mut store, 3);
        let prior = FactorizedPrior::new(&mut init, "p", 4);
        let g = Graph::<f32>::inference();
        let cx = Ctx::new(&g, &store);
        for row in prior.integer_pmf(&cx, -4096, 4095) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "mass {total}");
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
