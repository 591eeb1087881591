//! Full stereo codec network: transforms, hyperprior and entropy model.

use bisic_tensor::{Float, Tensor, Var};
use rand::Rng;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::entropy_model::{EntropyModel, Params};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};

/// Total downsampling of the latent grid.
pub const LATENT_STRIDE: usize = 16;
/// Total downsampling of the hyper-latent grid.
pub const HYPER_STRIDE: usize = 64;
/// Quantized latents are clamped to this magnitude before coding.
pub const LATENT_LIMIT: f32 = i16::MAX as f32;

/// Quantization applied to `y` and `z`.
pub enum Quantizer<'a, R: Rng> {
    /// Additive `U(-0.5, 0.5)` noise (training).
    Noise(&'a mut R),
    /// Nearest integer, as used by the coder.
    Round,
}

/// Rounds to the nearest integer (ties away from zero) and clamps to the coder range.
pub fn round_latent<T: Float>(v: T) -> T {
    let l = T::of(LATENT_LIMIT as f64);
    v.round().max(-l).min(l)
}

pub fn quantize<'g, T: Float, R: Rng>(cx: &Ctx<'g, T>, x: Var<'g, T>, q: &mut Quantizer<'_, R>) -> Var<'g, T> {
    match q {
        Quantizer::Noise(rng) => {
            let noise = Tensor::from_fn(&x.shape(), |_| T::of(rng.gen_range(-0.5..0.5)));
            x.add(cx.constant(noise))
        }
        Quantizer::Round => cx.constant(x.value().map(round_latent)),
    }
}

/// Everything one forward pass produces.
pub struct Outputs<'g, T: Float> {
    pub x_hat: Var<'g, T>,
    pub y: Var<'g, T>,
    pub y_hat: Var<'g, T>,
    pub z_hat: Var<'g, T>,
    pub params: Params<'g, T>,
    /// Bits of every latent element, shaped like `y`.
    pub y_bits: Var<'g, T>,
    /// Total bits of `z_hat`.
    pub z_bits: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub backbone: Backbone,
    pub entropy: EntropyModel,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init::new(&mut params, seed);
        let backbone = Backbone::new(&mut init, &config);
        let entropy = EntropyModel::new(&mut init, &config);
        Ok(Model { config, params, backbone, entropy })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which must
    /// hold exactly the expected names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, the configured model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let src = params.id(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            let t = params.get(src);
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, t.clone());
        }
        Ok(model)
    }

    /// Accepts images whose sides are positive multiples of 64.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(HYPER_STRIDE) || !width.is_multiple_of(HYPER_STRIDE) {
            return Err(Error::Shape(format!(
                "image {height}x{width} must have sides that are positive multiples of {HYPER_STRIDE}"
            )));
        }
        Ok(())
    }

    /// Forward pass on `x: [B, 3, 2, H, W]`.
    pub fn forward<'g, T: Float, R: Rng>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        q: &mut Quantizer<'_, R>,
    ) -> Outputs<'g, T> {
        let y = self.backbone.encode(cx, x);
        let z = self.backbone.hyper_encode(cx, y);
        let z_hat = quantize(cx, z, q);
        let zt = self.backbone.hyper_decode(cx, z_hat);
        let y_hat = quantize(cx, y, q);
        let params = self.entropy.params(cx, y_hat, zt);
        let y_bits = y_hat.gaussian_rate(params.mu, params.sigma);
        let z_bits = self.entropy.prior.bits(cx, z_hat);
        let x_hat = self.backbone.decode(cx, y_hat);
        Outputs { x_hat, y, y_hat, z_hat, params, y_bits, z_bits }
    }

    /// Copy of the parameters in another precision.
    pub fn params_as<T: Float>(&self) -> ParamStore<T> {
        self.params.cast::<T>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bisic_tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_sides_not_divisible_by_64() {
        let m = Model::new(ModelConfig::desk(), 0).unwrap();
        assert!(m.check_input(64, 128).is_ok());
        assert!(matches!(m.check_input(64, 80), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(ModelConfig::desk(), 0).unwrap();
        let g = Graph::<f32>::inference();
        let cx = Ctx::new(&g, &m.params);
        let x = cx.constant(Tensor::full(&[1, 3, 2, 64, 128], 0.5));
        let mut q = Quantizer::<ChaCha8Rng>::Round;
        let out = m.forward(&cx, x, &mut q);
        assert_eq!(out.y.shape(), vec![1, 32, 2, 4, 8]);
        assert_eq!(out.z_hat.shape(), vec![1, 32, 2, 1, 2]);
        assert_eq!(out.x_hat.shape(), vec![1, 3, 2, 64, 128]);
        assert!(out.y_bits.value().all_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = Quantizer::Noise(&mut rng);
        let out = m.forward(&cx, x, &mut q);
        let d = out.y_hat.value().zip_map(&out.y.value(), |a, b| a - b);
        assert!(d.max_abs() <= 0.5);
    }
}
