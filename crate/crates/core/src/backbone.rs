//! Joint analysis/synthesis transforms and the hyper transforms.
//!
//! Every stage is a convolution over the `(view, height, width)` volume with a
//! `(3, 5, 5)` kernel: the view axis is zero-padded by one so it keeps length
//! two, and the spatial axes are strided by two. With `backbone_2d` the view
//! extent of every kernel is 1, which turns each stage into the same 2D
//! convolution applied to each view separately.

use bisic_tensor::{Float, Var};

use crate::attention::CrossViewAttention;
use crate::config::ModelConfig;
use crate::nn::{down_geom, leaky, Conv, ConvT, Ctx, Init};

#[derive(Clone, Debug)]
pub struct Backbone {
    enc: Vec<Conv>,
    enc_att: [CrossViewAttention; 2],
    dec: Vec<ConvT>,
    dec_att: [CrossViewAttention; 2],
    ha: Vec<Conv>,
    hs_up: Vec<ConvT>,
    hs_out: Conv,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let kd = if cfg.ablations.backbone_2d { 1 } else { 3 };
        let (kernel, stride, pad) = down_geom(kd, 5);
        let (n, m) = (cfg.n, cfg.m);
        let att = |init: &mut Init, name: &str| {
            CrossViewAttention::new(init, name, cfg.ablations.attention, n, cfg.attention_embed)
        };
        let up = |init: &mut Init, name: &str, cin, cout| ConvT::new(init, name, cin, cout, kernel, stride, pad, [0, 1, 1]);
        let flat = [1, 1, 1];
        let flat_pad = [kd / 2, 2, 2];

        let enc = vec![
            Conv::new(init, "encoder.0", 3, n, kernel, stride, pad),
            Conv::new(init, "encoder.1", n, n, kernel, stride, pad),
            Conv::new(init, "encoder.2", n, n, kernel, stride, pad),
            Conv::new(init, "encoder.3", n, n, kernel, stride, pad),
        ];
        let enc_att = [att(init, "encoder.attention0"), att(init, "encoder.attention1")];
        let dec_att = [att(init, "decoder.attention0"), att(init, "decoder.attention1")];
        let dec = vec![
            up(init, "decoder.0", n, n),
            up(init, "decoder.1", n, n),
            up(init, "decoder.2", n, n),
            up(init, "decoder.3", n, 3),
        ];
        let ha = vec![
            Conv::new(init, "hyper_encoder.0", n, m, kernel, flat, flat_pad),
            Conv::new(init, "hyper_encoder.1", m, m, kernel, stride, pad),
            Conv::new(init, "hyper_encoder.2", m, m, kernel, stride, pad),
        ];
        let hs_up = vec![up(init, "hyper_decoder.0", m, m), up(init, "hyper_decoder.1", m, m)];
        let hs_out = Conv::new(init, "hyper_decoder.2", m, 2 * n, kernel, flat, flat_pad);
        Backbone { enc, enc_att, dec, dec_att, ha, hs_up, hs_out }
    }

    /// `[B, 3, 2, H, W] -> [B, N, 2, H/16, W/16]`.
    pub fn encode<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = leaky(self.enc[0].forward(cx, x));
        h = leaky(self.enc[1].forward(cx, h));
        h = self.enc_att[0].forward(cx, h);
        h = leaky(self.enc[2].forward(cx, h));
        h = self.enc[3].forward(cx, h);
        self.enc_att[1].forward(cx, h)
    }

    /// `[B, N, 2, h, w] -> [B, 3, 2, 16h, 16w]`.
    pub fn decode<'g, T: Float>(&self, cx: &Ctx<'g, T>, y: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.dec_att[0].forward(cx, y);
        h = leaky(self.dec[0].forward(cx, h));
        h = leaky(self.dec[1].forward(cx, h));
        h = self.dec_att[1].forward(cx, h);
        h = leaky(self.dec[2].forward(cx, h));
        self.dec[3].forward(cx, h)
    }

    /// `[B, N, 2, h, w] -> [B, M, 2, h/4, w/4]`.
    pub fn hyper_encode<'g, T: Float>(&self, cx: &Ctx<'g, T>, y: Var<'g, T>) -> Var<'g, T> {
        let mut h = leaky(self.ha[0].forward(cx, y));
        h = leaky(self.ha[1].forward(cx, h));
        self.ha[2].forward(cx, h)
    }

    /// `[B, M, 2, h/4, w/4] -> [B, 2N, 2, h, w]`.
    pub fn hyper_decode<'g, T: Float>(&self, cx: &Ctx<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut h = leaky(self.hs_up[0].forward(cx, z));
        h = leaky(self.hs_up[1].forward(cx, h));
        self.hs_out.forward(cx, h)
    }

    /// Shapes of the attention maps built by the encoder for one input.
    pub fn encoder_attention_maps<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Vec<Vec<usize>> {
        let mut maps = Vec::new();
        let mut h = leaky(self.enc[0].forward(cx, x));
        h = leaky(self.enc[1].forward(cx, h));
        h = self.enc_att[0].forward_traced(cx, h, &mut maps);
        h = leaky(self.enc[2].forward(cx, h));
        h = self.enc[3].forward(cx, h);
        self.enc_att[1].forward_traced(cx, h, &mut maps);
        maps
    }
}
