//! Compression and decompression of stereo pairs.
//!
//! The encoder and the decoder run the same driver over the latent grid. The
//! driver keeps a buffer of the latents decoded so far (the encoder fills it
//! with the values it codes) and computes every entropy parameter from that
//! buffer only, so both sides see identical inputs.

use bisic_tensor::{Graph, Tensor};

use super::bitstream::{Bitstream, Header};
use super::buffer::{encode_buffer, CoderBuffer};
use super::cdf::{decode_value, QuantizedCdf, SYMBOL_MAX, SYMBOL_MIN};
use super::rc::RangeDecoder;
use crate::config::Mode;
use crate::data::{pairs_to_tensor, tensor_to_pair, StereoPair};
use crate::entropy_model::{checkerboard_split, is_anchor, CONTEXT_KERNEL};
use crate::error::{Error, Result};
use crate::model::{round_latent, Model, LATENT_LIMIT};
use crate::nn::Ctx;

/// Counters and estimates collected while coding one pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodingStats {
    /// Entropy-parameter evaluations per slice, per view.
    pub evaluations: Vec<[usize; 2]>,
    /// `Σ -log2(freq / 2^16)` plus the raw escape fields, per substream in
    /// container order: z left, z right, y left, y right.
    pub estimate_bits: [f64; 4],
    /// Values coded through the escape symbol.
    pub escapes: usize,
    /// Values clamped to the 16-bit range before coding.
    pub clamped: usize,
}

pub struct Compressed {
    pub bitstream: Bitstream,
    pub stats: CodingStats,
    /// Quantized latents `[1, N, 2, h, w]` as coded.
    pub y_hat: Tensor<f32>,
}

pub struct Decompressed {
    pub pair: StereoPair,
    /// Unclamped reconstruction `[1, 3, 2, H, W]`.
    pub x_hat: Tensor<f32>,
    pub y_hat: Tensor<f32>,
    pub stats: CodingStats,
}

const VIEW_NAMES: [&str; 2] = ["left", "right"];

/// Codes one latent element and returns the value the decoder reconstructs.
trait Sink {
    fn code(&mut self, view: usize, index: [usize; 3], table: &QuantizedCdf) -> Result<i32>;
}

struct EncodeSink<'a> {
    source: &'a Tensor<f32>,
    buffers: [CoderBuffer; 2],
    estimate: [f64; 2],
    escapes: usize,
}

impl Sink for EncodeSink<'_> {
    fn code(&mut self, view: usize, [ch, r, c]: [usize; 3], table: &QuantizedCdf) -> Result<i32> {
        let v = self.source.at(&[0, ch, view, r, c]) as i32;
        if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&v) {
            self.escapes += 1;
        }
        self.estimate[view] += table.cost(v);
        self.buffers[view].push_value(table, v);
        Ok(v)
    }
}

struct DecodeSink<'a> {
    decoders: [RangeDecoder<'a>; 2],
}

impl Sink for DecodeSink<'_> {
    fn code(&mut self, view: usize, [ch, r, c]: [usize; 3], table: &QuantizedCdf) -> Result<i32> {
        decode_value(&mut self.decoders[view], table).map_err(|e| {
            Error::Integrity(format!("{} latent stream at channel {ch}, position ({r}, {c}): {e}", VIEW_NAMES[view]))
        })
    }
}

pub(crate) fn window(y_hat: &Tensor<f32>, ch0: usize, chans: usize, r: usize, c: usize) -> Tensor<f32> {
    let [_, kh, kw] = CONTEXT_KERNEL;
    let (h, w) = (y_hat.dim(3), y_hat.dim(4));
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[1, chans, 2, kh, kw]);
    for ch in 0..chans {
        for v in 0..2 {
            for dy in 0..kh {
                for dx in 0..kw {
                    let (yy, xx) = (r as isize + dy as isize - ry, c as isize + dx as isize - rx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let val = y_hat.at(&[0, ch0 + ch, v, yy as usize, xx as usize]);
                        out.set(&[0, ch, v, dy, dx], val);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn at_position(t: &Tensor<f32>, r: usize, c: usize) -> Tensor<f32> {
    t.narrow(3, r, 1).narrow(4, c, 1)
}

/// Runs the slice-by-slice coding protocol. `zt` is the hyper feature
/// `[1, 2N, 2, h, w]` computed from the decoded hyper-latents.
fn run_latents(model: &Model, zt: &Tensor<f32>, sink: &mut dyn Sink, stats: &mut CodingStats) -> Result<Tensor<f32>> {
    let em = &model.entropy;
    let (h, w) = (zt.dim(3), zt.dim(4));
    let sc = em.slice_channels;
    let mut y_hat = Tensor::<f32>::zeros(&[1, em.n, 2, h, w]);
    stats.evaluations = vec![[0, 0]; em.slices];

    let mut code_position = |y_hat: &mut Tensor<f32>, k: usize, r: usize, c: usize, mu: &Tensor<f32>, sigma: &Tensor<f32>, pr: usize, pc: usize| -> Result<()> {
        for v in 0..2 {
            for j in 0..sc {
                let table = QuantizedCdf::gaussian(mu.at(&[0, j, v, pr, pc]) as f64, sigma.at(&[0, j, v, pr, pc]) as f64);
                let val = sink.code(v, [k * sc + j, r, c], &table)?;
                y_hat.set(&[0, k * sc + j, v, r, c], val as f32);
            }
        }
        Ok(())
    };

    for k in 0..em.slices {
        let theta = {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &model.params);
            let prev = (k > 0).then(|| cx.constant(y_hat.narrow(1, 0, k * sc)));
            em.channel_context(&cx, k, prev, [1, 2, h, w]).map(|t| t.value().as_ref().clone())
        };
        match model.config.mode {
            Mode::Ar => {
                for r in 0..h {
                    for c in 0..w {
                        let (mu, sigma) = {
                            let g = Graph::inference();
                            let cx = Ctx::new(&g, &model.params);
                            let win = cx.constant(window(&y_hat, k * sc, sc, r, c));
                            let zt_at = cx.constant(at_position(zt, r, c));
                            let th_at = theta.as_ref().map(|t| cx.constant(at_position(t, r, c)));
                            let p = em.ar_params_window(&cx, k, win, zt_at, th_at);
                            (p.mu.value().as_ref().clone(), p.sigma.value().as_ref().clone())
                        };
                        stats.evaluations[k][0] += 1;
                        stats.evaluations[k][1] += 1;
                        code_position(&mut y_hat, k, r, c, &mu, &sigma, 0, 0)?;
                    }
                }
            }
            Mode::Ckbd => {
                for anchors in [true, false] {
                    let (mu, sigma) = {
                        let g = Graph::inference();
                        let cx = Ctx::new(&g, &model.params);
                        let zt_v = cx.constant(zt.clone());
                        let th = theta.as_ref().map(|t| cx.constant(t.clone()));
                        let p = if anchors {
                            em.anchor_params(&cx, k, zt_v, th)
                        } else {
                            let (decoded, _) = checkerboard_split(&y_hat.narrow(1, k * sc, sc));
                            em.nonanchor_params(&cx, k, zt_v, th, cx.constant(decoded))
                        };
                        (p.mu.value().as_ref().clone(), p.sigma.value().as_ref().clone())
                    };
                    stats.evaluations[k][0] += 1;
                    stats.evaluations[k][1] += 1;
                    for r in 0..h {
                        for c in 0..w {
                            if is_anchor(r, c) == anchors {
                                code_position(&mut y_hat, k, r, c, &mu, &sigma, r, c)?;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y_hat)
}

/// Per channel tables of the hyper-latent prior.
fn prior_tables(model: &Model) -> Vec<QuantizedCdf> {
    let g = Graph::inference();
    let cx = Ctx::new(&g, &model.params);
    model.entropy.prior.integer_pmf(&cx, SYMBOL_MIN, SYMBOL_MAX).iter().map(|p| QuantizedCdf::from_probs(p)).collect()
}

fn crc_of(values: impl Iterator<Item = f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in values {
        h.update(&(v as i32).to_le_bytes());
    }
    h.finalize()
}

fn view_values(t: &Tensor<f32>, view: usize, ch0: usize, chans: usize) -> impl Iterator<Item = f32> + '_ {
    let (h, w) = (t.dim(3), t.dim(4));
    (ch0..ch0 + chans).flat_map(move |ch| (0..h * w).map(move |p| t.at(&[0, ch, view, p / w, p % w])))
}

fn checksums(model: &Model, z_hat: &Tensor<f32>, y_hat: &Tensor<f32>) -> ([u32; 2], [Vec<u32>; 2]) {
    let sc = model.entropy.slice_channels;
    let z = [0, 1].map(|v| crc_of(view_values(z_hat, v, 0, z_hat.dim(1))));
    let y = [0, 1].map(|v| (0..model.entropy.slices).map(|k| crc_of(view_values(y_hat, v, k * sc, sc))).collect());
    (z, y)
}

fn header_of(model: &Model, height: usize, width: usize) -> Header {
    Header {
        mode: model.config.mode,
        height: height as u16,
        width: width as u16,
        n: model.config.n as u16,
        m: model.config.m as u16,
        k: model.config.k as u8,
    }
}

pub fn compress(model: &Model, pair: &StereoPair) -> Result<Compressed> {
    let (height, width) = (pair.height(), pair.width());
    model.check_input(height, width)?;
    if height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(Error::Shape(format!("image {height}x{width} exceeds the container range")));
    }
    let mut stats = CodingStats::default();
    let (y, z_hat, zt) = {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &model.params);
        let x = cx.constant(pairs_to_tensor(&[pair]));
        let y = model.backbone.encode(&cx, x);
        let z = model.backbone.hyper_encode(&cx, y);
        let z_hat = z.value().map(round_latent);
        let zt = model.backbone.hyper_decode(&cx, cx.constant(z_hat.clone()));
        (y.value().as_ref().clone(), z_hat, zt.value().as_ref().clone())
    };
    stats.clamped += y.data().iter().chain(z_hat.data()).filter(|v| v.round().abs() > LATENT_LIMIT).count();
    if stats.clamped > 0 {
        log::warn!("{} latent values clamped to the 16-bit range", stats.clamped);
    }

    let tables = prior_tables(model);
    let mut z_streams: [Vec<u8>; 2] = Default::default();
    for v in 0..2 {
        let mut buf = CoderBuffer::new();
        let offsets: Vec<u32> = tables.iter().map(|t| buf.push_table(&t.cdf)).collect();
        for (ch, t) in tables.iter().enumerate() {
            for value in view_values(&z_hat, v, ch, 1) {
                let value = value as i32;
                stats.estimate_bits[v] += t.cost(value);
                if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&value) {
                    stats.escapes += 1;
                }
                buf.push_value_at(offsets[ch], t.cdf.len() as u32, value);
            }
        }
        z_streams[v] = encode_buffer(model.config.coder_backend, &buf)?;
    }

    let y_round = y.map(round_latent);
    let mut sink = EncodeSink { source: &y_round, buffers: Default::default(), estimate: [0.0; 2], escapes: 0 };
    let y_hat = run_latents(model, &zt, &mut sink, &mut stats)?;
    stats.estimate_bits[2] = sink.estimate[0];
    stats.estimate_bits[3] = sink.estimate[1];
    stats.escapes += sink.escapes;
    let y_streams = [
        encode_buffer(model.config.coder_backend, &sink.buffers[0])?,
        encode_buffer(model.config.coder_backend, &sink.buffers[1])?,
    ];
    let (z_crc, y_crc) = checksums(model, &z_hat, &y_hat);
    let bitstream = Bitstream { header: header_of(model, height, width), z: z_streams, y: y_streams, z_crc, y_crc };
    Ok(Compressed { bitstream, stats, y_hat })
}

pub fn decompress(model: &Model, bytes: &[u8]) -> Result<Decompressed> {
    let bs = Bitstream::from_bytes(bytes, model.entropy.slices)?;
    let hd = bs.header;
    let expected = header_of(model, hd.height as usize, hd.width as usize);
    if hd != expected {
        return Err(Error::Format(format!("stream header {hd:?} does not match the model ({expected:?})")));
    }
    let (height, width) = (hd.height as usize, hd.width as usize);
    model.check_input(height, width).map_err(|e| Error::Format(e.to_string()))?;
    let (zh, zw) = (height / crate::model::HYPER_STRIDE, width / crate::model::HYPER_STRIDE);
    let mut stats = CodingStats::default();

    let tables = prior_tables(model);
    let mut z_hat = Tensor::<f32>::zeros(&[1, model.config.m, 2, zh, zw]);
    for v in 0..2 {
        let mut dec = RangeDecoder::new(&bs.z[v]).map_err(|e| Error::Integrity(format!("{} hyper stream: {e}", VIEW_NAMES[v])))?;
        for (ch, t) in tables.iter().enumerate() {
            for p in 0..zh * zw {
                let val = decode_value(&mut dec, t)
                    .map_err(|e| Error::Integrity(format!("{} hyper stream at channel {ch}: {e}", VIEW_NAMES[v])))?;
                stats.estimate_bits[v] += t.cost(val);
                z_hat.set(&[0, ch, v, p / zw, p % zw], val as f32);
            }
        }
        if !dec.is_exhausted() {
            return Err(Error::Integrity(format!("{} hyper stream has unread bytes", VIEW_NAMES[v])));
        }
    }

    let zt = {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &model.params);
        model.backbone.hyper_decode(&cx, cx.constant(z_hat.clone())).value().as_ref().clone()
    };
    let decoders = [
        RangeDecoder::new(&bs.y[0]).map_err(|e| Error::Integrity(format!("left latent stream: {e}")))?,
        RangeDecoder::new(&bs.y[1]).map_err(|e| Error::Integrity(format!("right latent stream: {e}")))?,
    ];
    let mut sink = DecodeSink { decoders };
    let y_hat = run_latents(model, &zt, &mut sink, &mut stats)?;
    for (v, d) in sink.decoders.iter().enumerate() {
        if !d.is_exhausted() {
            return Err(Error::Integrity(format!("{} latent stream has unread bytes", VIEW_NAMES[v])));
        }
    }
    let (z_crc, y_crc) = checksums(model, &z_hat, &y_hat);
    for v in 0..2 {
        if z_crc[v] != bs.z_crc[v] {
            return Err(Error::Integrity(format!("{} hyper-latent symbols do not match the stream checksum", VIEW_NAMES[v])));
        }
        for k in 0..model.entropy.slices {
            if y_crc[v][k] != bs.y_crc[v][k] {
                return Err(Error::Integrity(format!(
                    "{} latent symbols of slice {k} do not match the stream checksum",
                    VIEW_NAMES[v]
                )));
            }
        }
    }

    let x_hat = {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &model.params);
        model.backbone.decode(&cx, cx.constant(y_hat.clone())).value().as_ref().clone()
    };
    let mut pair = tensor_to_pair(&x_hat, 0);
    pair.left.clamp01();
    pair.right.clamp01();
    Ok(Decompressed { pair, x_hat, y_hat, stats })
}
