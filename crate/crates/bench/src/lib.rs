//! Fixed inputs shared by the benchmarks.

use lrcr::data::{generate_sample, SceneParams, StereoSample};
use lrcr::training::{prepare_census, PreparedSample};
use lrcr::{LrcrWeights, ModelConfig};

/// A desk-scale scene and its census volumes.
pub fn desk_sample() -> (StereoSample, PreparedSample) {
    let params = SceneParams::desk();
    let s = generate_sample(&params, 1).expect("desk params are valid");
    let p = prepare_census(std::slice::from_ref(&s), params.d_max, 5).expect("census on a valid scene");
    (s, p.into_iter().next().unwrap())
}

pub fn desk_model() -> LrcrWeights {
    let params = SceneParams::desk();
    LrcrWeights::init(ModelConfig::new(params.d_max, params.height, params.width), 7).expect("desk model config is valid")
}
