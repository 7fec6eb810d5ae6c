//! Two-stage optimization of the recurrent model.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::cost_volume::{census_cost_volume, normalize_cost_volume, CostVolume};
use crate::data::StereoSample;
use crate::error::{bail, Result};
use crate::evaluation::MetricsAccumulator;
use crate::image::DisparityMap;
use crate::init::seeded_rng;
use crate::model::{forward_single, lrcr_unroll, LrcrWeights, ParamKind};
use crate::tensor::Tensor;

/// Mean absolute error over the pixels labeled in `gt`, recorded on `g`.
pub fn l1_disparity_loss(g: &Graph, pred: Var, gt: &DisparityMap) -> Result<Var> {
    let shape = g.shape(pred);
    if shape.iter().product::<usize>() != gt.values().len() {
        bail!(Dimension, "prediction {:?} vs {}x{} ground truth", shape, gt.height(), gt.width());
    }
    if gt.valid_count() == 0 {
        bail!(Contract, "ground truth has no labeled pixels");
    }
    let target = g.constant(Tensor::from_parts(shape, gt.values().to_vec()));
    let diff = g.abs(g.sub(pred, target)?);
    g.masked_mean(diff, gt.valid())
}

pub fn l1_disparity_loss_value(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let g = Graph::new();
    let p = g.constant(Tensor::from_parts(vec![pred.height(), pred.width()], pred.values().to_vec()));
    pred.same_dims(gt)?;
    let l = l1_disparity_loss(&g, p, gt)?;
    g.value(l).item()
}

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", momentum);
        }
        Ok(Sgd {
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Updates `params` in place. Velocity buffers are matched to parameters by
    /// position and persist across calls.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            bail!(Config, "learning rate must be non-negative, got {}", lr);
        }
        if params.len() != grads.len() {
            bail!(Dimension, "{} parameters but {} gradients", params.len(), grads.len());
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            bail!(Dimension, "optimizer tracks {} parameters, got {}", self.velocity.len(), params.len());
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.len() {
                bail!(Dimension, "gradient {:?} for parameter {:?}", g.shape(), p.shape());
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Single step from zero state; recurrent and peephole weights frozen.
    NonRecurrent,
    /// Full unrolled recurrence; everything trainable.
    Recurrent,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::NonRecurrent => 1,
            Stage::Recurrent => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_every: usize,
    pub decay_factor: f64,
    /// Recurrent steps; stage 1 always uses one.
    pub steps: usize,
    pub momentum: f64,
    /// Joint gradient-norm ceiling applied before each update.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: Stage::NonRecurrent,
            epochs: 15,
            base_lr: 0.01,
            lr_decay_every: 5,
            decay_factor: 10.0,
            steps: 1,
            momentum: 0.9,
            clip_norm: None,
            seed: 1,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: Stage::Recurrent,
            epochs: 30,
            lr_decay_every: 10,
            steps: 5,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) {
            bail!(Config, "base learning rate must be non-negative");
        }
        if !(self.decay_factor > 1.0) || self.lr_decay_every == 0 {
            bail!(Config, "decay factor must exceed 1 and decay period be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            bail!(Config, "gradient clip norm must be positive");
        }
        match self.stage {
            Stage::NonRecurrent if self.steps != 1 => bail!(Config, "stage 1 runs exactly one step"),
            Stage::Recurrent if self.steps < 2 => bail!(Config, "stage 2 needs at least two steps"),
            _ => Ok(()),
        }
    }
}

/// `base_lr / decay_factor^floor(epoch / lr_decay_every)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr / cfg.decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// A sample with its (normalized) cost volumes precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub raw_left: CostVolume,
    pub raw_right: CostVolume,
    pub cost_left: CostVolume,
    pub cost_right: CostVolume,
    pub gt_left: DisparityMap,
    pub gt_right: DisparityMap,
}

impl PreparedSample {
    pub fn from_volumes(raw_left: CostVolume, raw_right: CostVolume, gt_left: DisparityMap, gt_right: DisparityMap) -> Self {
        PreparedSample {
            cost_left: normalize_cost_volume(&raw_left),
            cost_right: normalize_cost_volume(&raw_right),
            raw_left,
            raw_right,
            gt_left,
            gt_right,
        }
    }
}

/// Census volumes (normalized for the model) for every sample.
pub fn prepare_census(samples: &[StereoSample], d_max: usize, window: usize) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let (l, r) = census_cost_volume(&s.left, &s.right, d_max, window)?;
            Ok(PreparedSample::from_volumes(l, r, s.gt_left.clone(), s.gt_right.clone()))
        })
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    /// Left-view validation EPE per recurrent step (empty without a validation set).
    pub val_epe: Vec<f64>,
}

impl EpochLog {
    pub fn csv_header(steps: usize) -> String {
        let mut s = String::from("epoch,stage,lr,train_loss");
        for t in 1..=steps {
            write!(s, ",val_epe_t{t}").unwrap();
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{:e},{:.9}", self.epoch, self.stage, self.lr, self.train_loss);
        for e in &self.val_epe {
            write!(s, ",{e:.9}").unwrap();
        }
        s
    }
}

fn trainable(stage: Stage, kind: ParamKind) -> bool {
    match stage {
        Stage::NonRecurrent => matches!(kind, ParamKind::InputKernel | ParamKind::CellBias | ParamKind::Head),
        Stage::Recurrent => true,
    }
}

/// Summed per-view, per-step L1 loss of one sample, recorded on `g`.
pub fn sample_loss(g: &Graph, weights: &LrcrWeights, sample: &PreparedSample, stage: Stage, steps: usize) -> Result<(Var, Vec<Var>)> {
    let model = weights.bind(g);
    let cl = g.constant(sample.cost_left.values().clone());
    let cr = g.constant(sample.cost_right.values().clone());
    let pairs: Vec<(Var, Var)> = match stage {
        Stage::NonRecurrent => vec![forward_single(g, &model, cl, cr)?],
        Stage::Recurrent => lrcr_unroll(g, &model, cl, cr, steps)?
            .into_iter()
            .map(|o| (o.disp_left, o.disp_right))
            .collect(),
    };
    let mut total: Option<Var> = None;
    for (dl, dr) in pairs {
        let l = l1_disparity_loss(g, dl, &sample.gt_left)?;
        let r = l1_disparity_loss(g, dr, &sample.gt_right)?;
        let step = g.add(l, r)?;
        total = Some(match total {
            Some(t) => g.add(t, step)?,
            None => step,
        });
    }
    Ok((total.expect("at least one step"), model.vars))
}

/// Left-view EPE per step, pixel-weighted over `data`.
pub fn validation_epe(weights: &LrcrWeights, data: &[PreparedSample], steps: usize) -> Result<Vec<f64>> {
    let mut acc = vec![MetricsAccumulator::default(); steps];
    for s in data {
        let maps = weights.infer(&s.cost_left, &s.cost_right, steps)?;
        for (a, m) in acc.iter_mut().zip(&maps) {
            a.add(&m.left, &s.gt_left)?;
        }
    }
    acc.iter().map(MetricsAccumulator::epe).collect()
}

fn run_stage(
    data: &[PreparedSample],
    init: &LrcrWeights,
    cfg: &TrainConfig,
    val: &[PreparedSample],
    val_steps: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(LrcrWeights, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Contract, "training needs at least one sample");
    }
    let mut weights = init.clone();
    let active: Vec<usize> = (0..weights.store.len())
        .filter(|&i| trainable(cfg.stage, weights.store.kinds[i]))
        .collect();
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let g = Graph::new();
            let (loss, vars) = sample_loss(&g, &weights, &data[i], cfg.stage, cfg.steps)?;
            total += g.value(loss).item()?;
            let mut grads = g.backward(loss)?;
            let mut grads: Vec<Tensor> = active
                .iter()
                .map(|&p| grads.take(vars[p]).expect("parameters are tracked leaves"))
                .collect();
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(active.len());
            let mut next = active.iter().peekable();
            for (i, t) in weights.store.tensors.iter_mut().enumerate() {
                if next.peek() == Some(&&i) {
                    params.push(t);
                    next.next();
                }
            }
            opt.step(params, &grads, lr)?;
        }
        let val_epe = if val.is_empty() {
            Vec::new()
        } else {
            validation_epe(&weights, val, val_steps)?
        };
        let log = EpochLog {
            epoch,
            stage: cfg.stage.number(),
            lr,
            train_loss: total / data.len() as f64,
            val_epe,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((weights, logs))
}

/// Trains the non-recurrent model: input kernels, cell biases and head only.
pub fn train_stage1(
    data: &[PreparedSample],
    weights: &LrcrWeights,
    cfg: &TrainConfig,
    val: &[PreparedSample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(LrcrWeights, Vec<EpochLog>)> {
    if cfg.stage != Stage::NonRecurrent {
        bail!(Config, "stage-1 training called with a stage-2 config");
    }
    run_stage(data, weights, cfg, val, 1, on_epoch)
}

/// Trains the full recurrence starting from a stage-1 checkpoint.
pub fn train_stage2(
    data: &[PreparedSample],
    stage1: Option<&LrcrWeights>,
    cfg: &TrainConfig,
    val: &[PreparedSample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(LrcrWeights, Vec<EpochLog>)> {
    let Some(init) = stage1 else {
        bail!(Contract, "stage-2 training requires a stage-1 checkpoint");
    };
    if cfg.stage != Stage::Recurrent {
        bail!(Config, "stage-2 training called with a stage-1 config");
    }
    run_stage(data, init, cfg, val, cfg.steps, on_epoch)
}
