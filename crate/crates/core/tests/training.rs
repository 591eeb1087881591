use bisic::checkpoint;
use bisic::coding::compress;
use bisic::config::{Distortion, ModelConfig, TrainConfig};
use bisic::data::{pairs_to_tensor, synthetic_dataset};
use bisic::model::{Model, Quantizer};
use bisic::nn::Ctx;
use bisic::train::{rd_loss, train, TrainOptions};
use bisic_tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn loss_is_lambda_distortion_plus_rates() {
    let m = Model::new(ModelConfig::desk(), 0).unwrap();
    let data = synthetic_dataset(2, 64, 64, 0).unwrap();
    let g = Graph::<f64>::inference();
    let params = m.params_as::<f64>();
    let cx = Ctx::new(&g, &params);
    let x = cx.constant(pairs_to_tensor(&[&data[0], &data[1]]).cast());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lambda = 1024.0;
    let l = rd_loss(&m, &cx, x, lambda, Distortion::Mse, &mut Quantizer::Noise(&mut rng)).unwrap();
    let b = l.breakdown(lambda);
    assert!((l.loss.value().item() - (lambda * b.distortion + b.rate_y + b.rate_z)).abs() < 1e-9 * b.total.abs());
    assert!(b.distortion > 0.0 && b.rate_y > 0.0 && b.rate_z > 0.0);
    let y_bits: f64 = l.outputs.y_bits.value().data().iter().sum();
    assert!((b.rate_y - y_bits / (2.0 * 64.0 * 64.0)).abs() < 1e-9 * b.rate_y);
}

#[test]
fn short_training_logs_and_checkpoints_reload_identically() {
    let dir = std::env::temp_dir().join(format!("bisic-train-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let data = synthetic_dataset(4, 64, 64, 1).unwrap();
    let cfg = TrainConfig { steps: 4, batch_size: 2, checkpoint_every: 2, ..TrainConfig::default() };
    let mut m = Model::new(ModelConfig::desk(), 1).unwrap();
    let ckpt = dir.join("m.ckpt");
    let log = dir.join("log.csv");
    let opts = TrainOptions { log_path: Some(log.clone()), checkpoint_path: Some(ckpt.clone()), ..Default::default() };
    let report = train(&mut m, &data, &cfg, &opts).unwrap();
    assert_eq!(report.log.len(), 4);
    assert!(report.log.iter().all(|r| r.loss.total.is_finite()));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 5);
    assert!(dir.join("m.ckpt.step2").exists());
    let c = checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.step, 4);
    assert_eq!(c.train.as_ref(), Some(&cfg));
    assert_eq!(compress(&c.model, &data[0]).unwrap().bitstream.to_bytes(), compress(&m, &data[0]).unwrap().bitstream.to_bytes());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_dataset(2, 64, 64, 2).unwrap();
    let cfg = TrainConfig { steps: 2, batch_size: 1, ..TrainConfig::default() };
    let run = || {
        let mut m = Model::new(ModelConfig::desk(), 5).unwrap();
        let log = train(&mut m, &data, &cfg, &TrainOptions::default()).unwrap().log;
        (log, compress(&m, &data[0]).unwrap().bitstream.to_bytes())
    };
    assert_eq!(run(), run());
}
