//! Cross-view attention blocks over `[B, C, 2, h, w]` stereo features.
//!
//! Attention math runs in a "views" layout `[B, 2, C, n]` with `n = h·w`, so
//! both views are processed by one batched product and the other view is a
//! flip of axis 1 away.

use bisic_tensor::{Float, Var};

use crate::config::AttentionKind;
use crate::nn::{leaky, Conv, Ctx, Init};

/// `[B, C, 2, h, w] -> [B, 2, C, h·w]`.
pub fn to_views<'g, T: Float>(x: Var<'g, T>) -> Var<'g, T> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3, 4]).reshape(&[s[0], 2, s[1], s[3] * s[4]])
}

/// `[B, 2, C, h·w] -> [B, C, 2, h, w]`.
pub fn from_views<'g, T: Float>(x: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let s = x.shape();
    x.reshape(&[s[0], 2, s[2], h, w]).permute(&[0, 2, 1, 3, 4])
}

/// Context matrix `σ_pos(K) × Vᵀ` of shape `[.., C_K, C_V]`; σ_pos normalizes
/// each key channel over spatial positions.
pub fn attention_map<'g, T: Float>(k: Var<'g, T>, v: Var<'g, T>) -> Var<'g, T> {
    let axis = k.shape().len() - 1;
    k.softmax(axis).matmul(v, false, true)
}

/// `(σ_pos(K) × Vᵀ)ᵀ × σ_chan(Q)`: `q, k` are `[.., C_K, n]`, `v` is `[.., C_V, n]`,
/// the result is `[.., C_V, n]`.
pub fn efficient_attention<'g, T: Float>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Var<'g, T> {
    efficient_attention_traced(q, k, v, &mut Vec::new())
}

fn efficient_attention_traced<'g, T: Float>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    maps: &mut Vec<Vec<usize>>,
) -> Var<'g, T> {
    let chan_axis = q.shape().len() - 2;
    let map = attention_map(k, v);
    maps.push(map.shape());
    map.matmul(q.softmax(chan_axis), true, false)
}

/// Cross-key features in views layout. Slot `l` holds `Φ_{r→l} = (σ(K_r) V_lᵀ)ᵀ σ(Q_r)`
/// and slot `r` holds `Φ_{l→r}`.
pub fn cross_key<'g, T: Float>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Var<'g, T> {
    efficient_attention(q.flip(1), k.flip(1), v)
}

/// Cross-query features in views layout. Slot `l` holds `Ψ_{r→l} = (σ(K_l) V_lᵀ)ᵀ σ(Q_r)`
/// and slot `r` holds `Ψ_{l→r}`.
pub fn cross_query<'g, T: Float>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Var<'g, T> {
    efficient_attention(q.flip(1), k, v)
}

/// Two 3×3 per-view convolutions (weights shared across views) with a skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let k = [1, 3, 3];
        let s = [1, 1, 1];
        let p = [0, 1, 1];
        ResBlock {
            c1: Conv::new(init, &format!("{name}.conv1"), c, c, k, s, p),
            c2: Conv::new(init, &format!("{name}.conv2"), c, c, k, s, p),
        }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.c2.forward(cx, leaky(self.c1.forward(cx, x)));
        x.add(h)
    }
}

/// 1×1 query/key/value embeddings.
#[derive(Clone, Debug)]
pub struct Embed {
    q: Conv,
    k: Conv,
    v: Conv,
}

impl Embed {
    pub fn new(init: &mut Init, name: &str, cin: usize, c: usize) -> Self {
        Embed {
            q: Conv::pointwise(init, &format!("{name}.query"), cin, c),
            k: Conv::pointwise(init, &format!("{name}.key"), cin, c),
            v: Conv::pointwise(init, &format!("{name}.value"), cin, c),
        }
    }

    /// Q, K, V in views layout.
    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> [Var<'g, T>; 3] {
        [
            to_views(self.q.forward(cx, x)),
            to_views(self.k.forward(cx, x)),
            to_views(self.v.forward(cx, x)),
        ]
    }
}

/// Per-view efficient self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    embed: Embed,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        SelfAttention { embed: Embed::new(init, name, c, c) }
    }

    fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>, maps: &mut Vec<Vec<usize>>) -> Var<'g, T> {
        let s = x.shape();
        let [q, k, v] = self.embed.forward(cx, x);
        let out = efficient_attention_traced(q, k, v, maps);
        x.add(from_views(out, s[3], s[4]))
    }
}

/// Bidirectional mutual attention: a cross-key stage and a cross-query stage,
/// each with its own residual block and embeddings and followed by
/// self-attention, then a combine block shared by both views.
#[derive(Clone, Debug)]
pub struct MutualAttention {
    res_key: ResBlock,
    embed_key: Embed,
    self_key: SelfAttention,
    res_query: ResBlock,
    embed_query: Embed,
    self_query: SelfAttention,
    combine: Conv,
    pub channels: usize,
    pub embed: usize,
}

impl MutualAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, embed: usize) -> Self {
        MutualAttention {
            res_key: ResBlock::new(init, &format!("{name}.res_key"), channels),
            embed_key: Embed::new(init, &format!("{name}.embed_key"), channels, embed),
            self_key: SelfAttention::new(init, &format!("{name}.self_key"), embed),
            res_query: ResBlock::new(init, &format!("{name}.res_query"), channels),
            embed_query: Embed::new(init, &format!("{name}.embed_query"), channels, embed),
            self_query: SelfAttention::new(init, &format!("{name}.self_query"), embed),
            combine: Conv::pointwise(init, &format!("{name}.combine"), 2 * embed + channels, channels),
            channels,
            embed,
        }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.forward_traced(cx, x, &mut Vec::new())
    }

    /// Forward pass that also records the shape of every attention map.
    pub fn forward_traced<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        maps: &mut Vec<Vec<usize>>,
    ) -> Var<'g, T> {
        let s = x.shape();
        assert_eq!(s.len(), 5, "mutual attention expects [B, C, 2, h, w], got {s:?}");
        assert_eq!(s[2], 2, "mutual attention expects two views, got {s:?}");
        assert_eq!(s[1], self.channels, "mutual attention built for {} channels, got {s:?}", self.channels);
        let (h, w) = (s[3], s[4]);

        let [q, k, v] = self.embed_key.forward(cx, self.res_key.forward(cx, x));
        let phi = efficient_attention_traced(q.flip(1), k.flip(1), v, maps);
        let phi = self.self_key.forward(cx, from_views(phi, h, w), maps);

        let [q, k, v] = self.embed_query.forward(cx, self.res_query.forward(cx, x));
        let psi = efficient_attention_traced(q.flip(1), k, v, maps);
        let psi = self.self_query.forward(cx, from_views(psi, h, w), maps);

        self.combine.forward(cx, Var::concat(&[phi, psi, x], 1))
    }
}

/// Row-wise parallax attention in both directions: every position attends to
/// all positions of the same row in the other view.
#[derive(Clone, Debug)]
pub struct ParallaxAttention {
    res: ResBlock,
    embed: Embed,
    combine: Conv,
    embed_channels: usize,
}

impl ParallaxAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, embed: usize) -> Self {
        ParallaxAttention {
            res: ResBlock::new(init, &format!("{name}.res"), channels),
            embed: Embed::new(init, &format!("{name}.embed"), channels, embed),
            combine: Conv::pointwise(init, &format!("{name}.combine"), embed + channels, channels),
            embed_channels: embed,
        }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let s = x.shape();
        let (b, h, w) = (s[0], s[3], s[4]);
        let c = self.embed_channels;
        let r = self.res.forward(cx, x);
        let q = self.embed.q.forward(cx, r);
        let k = self.embed.k.forward(cx, r).flip(2);
        let v = self.embed.v.forward(cx, r).flip(2);
        // rows as batch: [B·2·h, w, C] queries, [B·2·h, C, w] keys
        let qr = q.permute(&[0, 2, 3, 4, 1]).reshape(&[b * 2 * h, w, c]);
        let kr = k.permute(&[0, 2, 3, 1, 4]).reshape(&[b * 2 * h, c, w]);
        let vr = v.permute(&[0, 2, 3, 4, 1]).reshape(&[b * 2 * h, w, c]);
        let scores = qr.matmul(kr, false, false).scale(1.0 / (c as f64).sqrt()).softmax(2);
        let out = scores.matmul(vr, false, false).reshape(&[b, 2, h, w, c]).permute(&[0, 4, 1, 2, 3]);
        self.combine.forward(cx, Var::concat(&[out, x], 1))
    }
}

#[derive(Clone, Debug)]
pub enum CrossViewAttention {
    Mutual(MutualAttention),
    Parallax(ParallaxAttention),
    Identity,
}

impl CrossViewAttention {
    pub fn new(init: &mut Init, name: &str, kind: AttentionKind, channels: usize, embed: usize) -> Self {
        match kind {
            AttentionKind::Mutual => CrossViewAttention::Mutual(MutualAttention::new(init, name, channels, embed)),
            AttentionKind::YingStyle => {
                CrossViewAttention::Parallax(ParallaxAttention::new(init, name, channels, embed))
            }
            AttentionKind::None => CrossViewAttention::Identity,
        }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            CrossViewAttention::Mutual(m) => m.forward(cx, x),
            CrossViewAttention::Parallax(p) => p.forward(cx, x),
            CrossViewAttention::Identity => x,
        }
    }

    pub fn forward_traced<'g, T: Float>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        maps: &mut Vec<Vec<usize>>,
    ) -> Var<'g, T> {
        match self {
            CrossViewAttention::Mutual(m) => m.forward_traced(cx, x, maps),
            other => other.forward(cx, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use bisic_tensor::{Graph, Tensor};

    #[test]
    fn views_layout_roundtrip() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 4, 5], |i| i as f64));
        let v = to_views(x);
        assert_eq!(v.shape(), vec![2, 2, 3, 20]);
        assert_eq!(*from_views(v, 4, 5).value(), *x.value());
    }

    #[test]
    fn single_position_returns_value() {
        let g = Graph::<f64>::inference();
        let q = g.constant(Tensor::from_vec(&[1, 2, 1], vec![0.3, -1.0]));
        let k = g.constant(Tensor::from_vec(&[1, 2, 1], vec![2.0, 0.5]));
        let v = g.constant(Tensor::from_vec(&[1, 3, 1], vec![1.0, -2.0, 4.0]));
        let out = efficient_attention(q, k, v).value();
        for (a, b) in out.data().iter().zip([1.0, -2.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_keeps_channels_and_grid() {
        let mut store = ParamStore::default();
        let mut init = Init::new(&mut store, 3);
        let ma = MutualAttention::new(&mut init, "ma", 8, 4);
        let pa = ParallaxAttention::new(&mut init, "pa", 8, 4);
        let g = Graph::<f32>::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::full(&[1, 8, 2, 3, 5], 0.1));
        assert_eq!(ma.forward(&cx, x).shape(), vec![1, 8, 2, 3, 5]);
        assert_eq!(pa.forward(&cx, x).shape(), vec![1, 8, 2, 3, 5]);
    }
}
