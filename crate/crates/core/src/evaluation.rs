//! Disparity metrics, the classical baselines, and per-step reports.

use std::fmt::Write as _;

use crate::cost_volume::CostVolume;
use crate::error::{bail, Result};
use crate::geometry::{
    interpolate_mismatched, lr_consistency_check, median_filter, subpixel_enhance, warp_disparity,
    WarpDirection, DEFAULT_LR_THRESHOLD,
};
use crate::image::DisparityMap;
use crate::model::LrcrWeights;
use crate::training::PreparedSample;

/// Bad-pixel thresholds reported in every table.
pub const BAD_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

fn labeled_errors<'a>(pred: &'a DisparityMap, gt: &'a DisparityMap) -> Result<impl Iterator<Item = f64> + 'a> {
    pred.same_dims(gt)?;
    if gt.valid_count() == 0 {
        bail!(Contract, "ground truth has no labeled pixels");
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.valid())
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p - g).abs()))
}

/// Mean absolute disparity error over labeled pixels.
pub fn end_point_error(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let (sum, n) = labeled_errors(pred, gt)?.fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Percentage of labeled pixels whose error strictly exceeds `k`.
pub fn bad_pixel_rate(pred: &DisparityMap, gt: &DisparityMap, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        bail!(Config, "bad-pixel threshold must be positive, got {}", k);
    }
    let (bad, n) = labeled_errors(pred, gt)?.fold((0usize, 0usize), |(b, n), e| (b + usize::from(e > k), n + 1));
    Ok(100.0 * bad as f64 / n as f64)
}

/// Pixel-weighted running sums behind one report row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    abs_error: f64,
    pixels: usize,
    bad: [usize; BAD_THRESHOLDS.len()],
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &DisparityMap, gt: &DisparityMap) -> Result<()> {
        self.add_masked(pred, gt, None)
    }

    /// Only pixels that are labeled in `gt` and selected by `mask` contribute.
    pub fn add_masked(&mut self, pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<()> {
        pred.same_dims(gt)?;
        for (i, ((p, g), &m)) in pred.values().iter().zip(gt.values()).zip(gt.valid()).enumerate() {
            if !m || mask.is_some_and(|sel| !sel[i]) {
                continue;
            }
            let e = (p - g).abs();
            self.abs_error += e;
            self.pixels += 1;
            for (b, &k) in self.bad.iter_mut().zip(&BAD_THRESHOLDS) {
                *b += usize::from(e > k);
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn epe(&self) -> Result<f64> {
        if self.pixels == 0 {
            bail!(Contract, "no labeled pixels accumulated");
        }
        Ok(self.abs_error / self.pixels as f64)
    }

    pub fn row(&self, step: usize) -> Result<MetricsRow> {
        let epe = self.epe()?;
        Ok(MetricsRow {
            step,
            epe,
            bad: self.bad.map(|b| 100.0 * b as f64 / self.pixels as f64),
            n_pixels: self.pixels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based recurrent step; baselines report a single step 1.
    pub step: usize,
    pub epe: f64,
    /// Percentages for each of [`BAD_THRESHOLDS`].
    pub bad: [f64; BAD_THRESHOLDS.len()],
    pub n_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epe,bad1,bad2,bad3,bad5\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.4},{:.4},{:.4},{:.4}",
                r.step, r.epe, r.bad[0], r.bad[1], r.bad[2], r.bad[3]
            )
            .unwrap();
        }
        s
    }

    pub fn epe_per_step(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epe).collect()
    }
}

/// Per-pixel argmin over disparities, ties to the smallest disparity.
pub fn wta_disparity(costs: &CostVolume) -> DisparityMap {
    let (d, h, w) = (costs.disparities(), costs.height(), costs.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for k in 1..d {
                if costs.cost(k, y, x) < costs.cost(best, y, x) {
                    best = k;
                }
            }
            out[y * w + x] = best as f64;
        }
    }
    DisparityMap::dense(h, w, out).expect("dimensions match the volume")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Plain winner-takes-all.
    Wta,
    /// WTA, sub-pixel refinement and 3x3 median on both views, then the
    /// left-right check and occlusion-style fill on the left view.
    Refined,
}

/// Left-view prediction of a baseline on raw cost volumes.
pub fn baseline_disparity(kind: Baseline, left: &CostVolume, right: &CostVolume) -> Result<DisparityMap> {
    let wta_l = wta_disparity(left);
    if kind == Baseline::Wta {
        return Ok(wta_l);
    }
    let refine = |costs: &CostVolume, wta: &DisparityMap| -> Result<DisparityMap> {
        median_filter(&subpixel_enhance(costs, wta)?, 3)
    };
    let dl = refine(left, &wta_l)?;
    let dr = refine(right, &wta_disparity(right))?;
    let induced = warp_disparity(&dr, WarpDirection::RightToLeft);
    let mask = lr_consistency_check(&dl, &induced, DEFAULT_LR_THRESHOLD)?;
    interpolate_mismatched(&dl, &mask)
}

/// Anything that maps a prepared sample to one left-view map per step.
pub trait DisparityPredictor {
    fn predict(&self, sample: &PreparedSample) -> Result<Vec<DisparityMap>>;
}

impl DisparityPredictor for Baseline {
    fn predict(&self, sample: &PreparedSample) -> Result<Vec<DisparityMap>> {
        Ok(vec![baseline_disparity(*self, &sample.raw_left, &sample.raw_right)?])
    }
}

/// The recurrent model unrolled for a fixed number of steps.
pub struct LrcrPredictor<'a> {
    pub weights: &'a LrcrWeights,
    pub steps: usize,
}

impl DisparityPredictor for LrcrPredictor<'_> {
    fn predict(&self, sample: &PreparedSample) -> Result<Vec<DisparityMap>> {
        Ok(self
            .weights
            .infer(&sample.cost_left, &sample.cost_right, self.steps)?
            .into_iter()
            .map(|m| m.left)
            .collect())
    }
}

impl<F> DisparityPredictor for F
where
    F: Fn(&PreparedSample) -> Result<Vec<DisparityMap>>,
{
    fn predict(&self, sample: &PreparedSample) -> Result<Vec<DisparityMap>> {
        self(sample)
    }
}

/// Left-view metrics for every step a predictor emits, pixel-weighted over
/// the dataset.
pub fn evaluate_pipeline(predictor: &dyn DisparityPredictor, dataset: &[PreparedSample]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        bail!(Contract, "evaluation needs at least one sample");
    }
    let mut acc: Vec<MetricsAccumulator> = Vec::new();
    for s in dataset {
        let maps = predictor.predict(s)?;
        if acc.is_empty() {
            acc = vec![MetricsAccumulator::default(); maps.len()];
        } else if acc.len() != maps.len() {
            bail!(Contract, "predictor emitted {} steps after {}", maps.len(), acc.len());
        }
        for (a, m) in acc.iter_mut().zip(&maps) {
            a.add(m, &s.gt_left)?;
        }
    }
    let rows = acc
        .iter()
        .enumerate()
        .map(|(i, a)| a.row(i + 1))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

/// Pixels of the left view that are hidden in the right view: inside the
/// image, but whose ground-truth match is occluded or leaves the frame.
/// Derived from the right-view ground truth warped into left coordinates.
pub fn occlusion_mask(gt_left: &DisparityMap, gt_right: &DisparityMap) -> Vec<bool> {
    let induced = warp_disparity(gt_right, WarpDirection::RightToLeft);
    gt_left
        .valid()
        .iter()
        .zip(induced.map.valid())
        .map(|(&l, &r)| !l && !r)
        .collect()
}
