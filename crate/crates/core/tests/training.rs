mod support;

use skullstrip_core::data::{stack_batch, Dataset};
use skullstrip_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use skullstrip_core::nn::{Mode, StrategyKind};
use skullstrip_core::training::{predict_samples, train, NoObserver, TrainConfig};
use support::overfit;

#[test]
fn post_memorizes_the_fixture() {
    let report = overfit::run(StrategyKind::Post);
    println!("{}", report.summary());
    assert!(report.passed(), "{}", report.summary());
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let samples = overfit::fixture();
    let data = Dataset { train: samples[..6].to_vec(), val: samples[6..].to_vec(), test: Vec::new() };
    let model = Model::<f32>::build(ModelConfig { base_channels: 8, ..overfit::model_config(StrategyKind::Identity) });
    let cfg = TrainConfig { epochs: 3, batch_size: 4, initial_lr: 1e-3, ..Default::default() };
    let mut out = train(model.unwrap(), &data, &cfg, &mut NoObserver).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ssck");
    save_checkpoint(&path, &out.best).unwrap();
    let mut loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.config(), out.best.config());
    let (x, _) = stack_batch(&data.val.iter().collect::<Vec<_>>()).unwrap();
    let before = out.best.logits(&x, Mode::Eval).unwrap();
    let after = loaded.logits(&x, Mode::Eval).unwrap();
    assert_eq!(before.data(), after.data());
    let a = predict_samples(&mut out.best, &data.val, 2).unwrap();
    let b = predict_samples(&mut loaded, &data.val, 2).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.data() == q.data()));
    let resaved = dir.path().join("again.ssck");
    save_checkpoint(&resaved, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&resaved).unwrap());
}
