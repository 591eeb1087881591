use bisic::coding::cdf::{decode_value, encode_value, QuantizedCdf, ALPHABET, BINS, SYMBOL_MAX, SYMBOL_MIN};
use bisic::coding::rc::{RangeDecoder, RangeEncoder, TOTAL};
use bisic::coding::{compress, decompress};
use bisic::config::{Mode, ModelConfig};
use bisic::data::{desk_spec, generate_synthetic_pair, pairs_to_tensor};
use bisic::eval::bit_allocation_map;
use bisic::model::{Model, Quantizer, LATENT_STRIDE};
use bisic::nn::Ctx;
use bisic::Error;
use bisic_tensor::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(mode: Mode, seed: u64) -> Model {
    let cfg = ModelConfig { mode, ..ModelConfig::desk() };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn roundtrip_matches_quantized_forward() {
    for mode in [Mode::Ar, Mode::Ckbd] {
        let m = model(mode, 1);
        let pair = generate_synthetic_pair(&desk_spec(5, 64, 64)).unwrap();
        let c = compress(&m, &pair).unwrap();
        let bytes = c.bitstream.to_bytes();
        let d = decompress(&m, &bytes).unwrap();
        assert_eq!(d.y_hat.data(), c.y_hat.data());
        let g = Graph::<f32>::inference();
        let cx = Ctx::new(&g, &m.params);
        let x = cx.constant(pairs_to_tensor(&[&pair]));
        let out = m.forward(&cx, x, &mut Quantizer::<ChaCha8Rng>::Round);
        assert_eq!(out.y_hat.value().data(), d.y_hat.data());
        assert_eq!(out.x_hat.value().data(), d.x_hat.data());
    }
}

#[test]
fn corrupted_containers_are_rejected() {
    let m = model(Mode::Ckbd, 2);
    let pair = generate_synthetic_pair(&desk_spec(9, 64, 64)).unwrap();
    let bytes = compress(&m, &pair).unwrap().bitstream.to_bytes();
    let clean = decompress(&m, &bytes).unwrap().x_hat;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut rejected, mut silent) = (0, 0);
    for _ in 0..100 {
        let mut bad = bytes.clone();
        let i = rng.gen_range(0..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        match decompress(&m, &bad) {
            Err(Error::Format(_) | Error::Integrity(_) | Error::Coder(_)) => rejected += 1,
            Err(e) => panic!("byte {i}: unexpected error kind {e}"),
            Ok(d) => silent += usize::from(d.x_hat != clean),
        }
    }
    assert_eq!(silent, 0, "wrong images accepted without an error");
    assert!(rejected >= 80, "only {rejected} of 100 corruptions rejected");
    assert!(matches!(decompress(&m, &bytes[..bytes.len() - 1]), Err(Error::Format(_) | Error::Integrity(_))));
}

#[test]
fn bit_map_matches_rate_and_grid() {
    let m = model(Mode::Ar, 3);
    let pair = generate_synthetic_pair(&desk_spec(11, 64, 128)).unwrap();
    let map = bit_allocation_map(&m, &pair).unwrap();
    assert_eq!((map.height, map.width), (64 / LATENT_STRIDE, 128 / LATENT_STRIDE));
    let g = Graph::<f64>::inference();
    let params = m.params_as::<f64>();
    let cx = Ctx::new(&g, &params);
    let x = cx.constant(pairs_to_tensor(&[&pair]).cast());
    let out = m.forward(&cx, x, &mut Quantizer::<ChaCha8Rng>::Round);
    let total: f64 = out.y_bits.value().data().iter().sum();
    assert!((map.total() - total).abs() <= 1e-9 * total.max(1.0));
    let est = compress(&m, &pair).unwrap().stats.estimate_bits;
    for v in 0..2 {
        let mapped: f64 = map.bits[v].iter().sum();
        assert!((mapped - est[2 + v]).abs() <= 0.05 * est[2 + v] + 256.0, "view {v}: map {mapped} coded {}", est[2 + v]);
    }
    let img = map.to_gray(0, LATENT_STRIDE);
    assert_eq!((img.width(), img.height()), (128, 64));
}

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, ALPHABET).prop_flat_map(|w| {
        (Just(w), 0.5f64..1.5).prop_map(|(w, mass)| {
            let s: f64 = w.iter().sum::<f64>().max(1e-12);
            w.iter().map(|x| x / s * mass).collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tables_are_valid_for_any_probabilities(p in probs()) {
        let t = QuantizedCdf::from_probs(&p);
        prop_assert_eq!(t.cdf.len(), BINS + 1);
        prop_assert!(QuantizedCdf::validate(&t.cdf).is_ok());
        prop_assert_eq!(*t.cdf.last().unwrap(), TOTAL);
    }

    #[test]
    fn gaussian_tables_are_valid(mu in -150.0f64..150.0, sigma in 0.04f64..200.0) {
        prop_assert!(QuantizedCdf::validate(&QuantizedCdf::gaussian(mu, sigma).cdf).is_ok());
    }

    #[test]
    fn range_coder_roundtrips(
        mu in -20.0f64..20.0,
        sigma in 0.05f64..30.0,
        values in prop::collection::vec(prop_oneof![8 => SYMBOL_MIN..=SYMBOL_MAX, 1 => -32768i32..=32767], 1..300),
    ) {
        let table = QuantizedCdf::gaussian(mu, sigma);
        let mut enc = RangeEncoder::new();
        for &v in &values {
            encode_value(&mut enc, &table, v).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &v in &values {
            prop_assert_eq!(decode_value(&mut dec, &table).unwrap(), v);
        }
    }
}
