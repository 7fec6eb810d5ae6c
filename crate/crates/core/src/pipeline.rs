//! End-to-end desk experiment: synthetic data, census costs, both training
//! stages and the per-step comparison against the classical baselines.

use crate::data::{generate_dataset, make_split, SceneParams, StereoSample};
use crate::error::{bail, Result};
use crate::evaluation::{evaluate_pipeline, Baseline, DisparityPredictor, LrcrPredictor, MetricsReport};
use crate::image::DisparityMap;
use crate::model::{LrcrWeights, ModelConfig};
use crate::training::{prepare_census, train_stage1, train_stage2, EpochLog, PreparedSample, TrainConfig};

/// Census window used throughout the desk setup.
pub const DEFAULT_CENSUS_WINDOW: usize = 5;

/// Gradient-norm ceiling of the desk stage-1 recipe.
pub const DESK_CLIP_NORM: f64 = 0.3;

/// Stage-2 ceiling: the stage-1 value per summed step loss.
pub const DESK_STAGE2_CLIP_NORM: f64 = DESK_CLIP_NORM * 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scene: SceneParams,
    pub n_train: usize,
    pub n_val: usize,
    pub census_window: usize,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Seeds the data, the split and the model initialization.
    pub seed: u64,
}

impl PipelineConfig {
    /// Small, fast, and hard enough that WTA makes real mistakes: weak texture
    /// under sensor noise, a dozen overlapping planes.
    pub fn desk() -> Self {
        let stage1 = TrainConfig {
            base_lr: 0.05,
            lr_decay_every: 10,
            clip_norm: Some(DESK_CLIP_NORM),
            ..TrainConfig::stage1()
        };
        let stage2 = TrainConfig {
            base_lr: 0.05,
            clip_norm: Some(DESK_STAGE2_CLIP_NORM),
            ..TrainConfig::stage2()
        };
        PipelineConfig {
            scene: SceneParams::desk(),
            n_train: 20,
            n_val: 5,
            census_window: DEFAULT_CENSUS_WINDOW,
            stage1,
            stage2,
            seed: 7,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.scene.d_max, self.scene.height, self.scene.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_train == 0 || self.n_val == 0 {
            bail!(Config, "need at least one training and one validation sample");
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.model_config().validate()
    }
}

/// Generated samples split into training and validation sets.
pub struct DeskData {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub val_samples: Vec<StereoSample>,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<DeskData> {
    cfg.validate()?;
    let n = cfg.n_train + cfg.n_val;
    let samples = generate_dataset(&cfg.scene, n, cfg.seed)?;
    let (train_ids, val_ids) = make_split(n, cfg.n_val, cfg.seed)?;
    let pick = |ids: &[usize]| -> Vec<StereoSample> { ids.iter().map(|&i| samples[i].clone()).collect() };
    let val_samples = pick(&val_ids);
    Ok(DeskData {
        train: prepare_census(&pick(&train_ids), cfg.scene.d_max, cfg.census_window)?,
        val: prepare_census(&val_samples, cfg.scene.d_max, cfg.census_window)?,
        val_samples,
    })
}

pub struct PipelineOutcome {
    pub stage1: LrcrWeights,
    pub stage2: LrcrWeights,
    pub logs: Vec<EpochLog>,
    pub wta: MetricsReport,
    pub refined: MetricsReport,
    /// The stage-1 model evaluated as a single non-recurrent step.
    pub non_recurrent: MetricsReport,
    /// One row per recurrent step of the final model.
    pub lrcr: MetricsReport,
}

impl PipelineOutcome {
    /// Training log of both stages as CSV, sized for the stage-2 step count.
    pub fn log_csv(&self) -> String {
        let steps = self.logs.iter().map(|l| l.val_epe.len()).max().unwrap_or(0);
        let mut s = EpochLog::csv_header(steps);
        s.push('\n');
        for l in &self.logs {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Single-step predictions of a stage-1 checkpoint.
struct NonRecurrent<'a>(&'a LrcrWeights);

impl DisparityPredictor for NonRecurrent<'_> {
    fn predict(&self, s: &PreparedSample) -> Result<Vec<DisparityMap>> {
        LrcrPredictor { weights: self.0, steps: 1 }.predict(s)
    }
}

pub fn run_pipeline(cfg: &PipelineConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<PipelineOutcome> {
    let data = prepare_data(cfg)?;
    run_on_data(cfg, &data, &mut on_epoch)
}

pub fn run_on_data(cfg: &PipelineConfig, data: &DeskData, mut on_epoch: impl FnMut(&EpochLog)) -> Result<PipelineOutcome> {
    let init = LrcrWeights::init(cfg.model_config(), cfg.seed)?;
    let mut logs = Vec::new();
    let (stage1, l1) = train_stage1(&data.train, &init, &cfg.stage1, &data.val, &mut on_epoch)?;
    logs.extend(l1);
    let (stage2, l2) = train_stage2(&data.train, Some(&stage1), &cfg.stage2, &data.val, &mut on_epoch)?;
    logs.extend(l2);
    Ok(PipelineOutcome {
        wta: evaluate_pipeline(&Baseline::Wta, &data.val)?,
        refined: evaluate_pipeline(&Baseline::Refined, &data.val)?,
        non_recurrent: evaluate_pipeline(&NonRecurrent(&stage1), &data.val)?,
        lrcr: evaluate_pipeline(
            &LrcrPredictor {
                weights: &stage2,
                steps: cfg.stage2.steps,
            },
            &data.val,
        )?,
        stage1,
        stage2,
        logs,
    })
}
