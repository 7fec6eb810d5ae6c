mod common;

use lrcr::{LrcrWeights, ModelConfig, Tensor};

#[test]
fn soft_argmin_properties() {
    common::soft_argmin_checks().unwrap();
}

#[test]
fn convlstm_matches_scalar_oracle() {
    common::convlstm_checks().unwrap();
}

#[test]
fn geometry_agrees_with_generator() {
    common::geometry_checks(5).unwrap();
}

#[test]
fn zero_model_predicts_the_middle_at_every_step() {
    let cfg = ModelConfig::new(6, 8, 10);
    let mut w = LrcrWeights::init(cfg, 4).unwrap();
    for t in &mut w.store.tensors {
        *t = Tensor::zeros(t.shape());
    }
    let mut r = common::rng(2);
    let cost = lrcr::CostVolume::new(lrcr::View::Left, common::rand_tensor(&[6, 8, 10], 0.0, 1.0, &mut r)).unwrap();
    let cost_r = lrcr::CostVolume::new(lrcr::View::Right, common::rand_tensor(&[6, 8, 10], 0.0, 1.0, &mut r)).unwrap();
    for (t, m) in w.infer(&cost, &cost_r, 4).unwrap().iter().enumerate() {
        assert!(m.left.values().iter().all(|&v| v == 2.5), "step {t}");
        assert!(m.err_left.values.iter().all(|&v| v == 0.5), "step {t}");
    }
}

#[test]
fn untrained_model_is_deterministic_per_seed() {
    let cfg = ModelConfig::new(4, 8, 8);
    assert_eq!(LrcrWeights::init(cfg.clone(), 9).unwrap(), LrcrWeights::init(cfg.clone(), 9).unwrap());
    assert_ne!(LrcrWeights::init(cfg.clone(), 9).unwrap(), LrcrWeights::init(cfg, 10).unwrap());
}
