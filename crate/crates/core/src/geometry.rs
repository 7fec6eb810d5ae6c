//! View conversion of disparity maps, the classical left-right consistency
//! check, and post-processing.

use crate::cost_volume::CostVolume;
use crate::error::{bail, Result};
use crate::image::DisparityMap;

pub const DEFAULT_LR_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpDirection {
    /// Right-view map into left coordinates: `x_l = x_r + round(d)`.
    RightToLeft,
    /// Left-view map into right coordinates: `x_r = x_l - round(d)`.
    LeftToRight,
}

/// A disparity map forward-warped into the opposite view. Pixels that no
/// source pixel reached are holes (`valid == false`).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub map: DisparityMap,
}

impl WarpResult {
    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.map.get(y, x).is_none()
    }

    pub fn hole_count(&self) -> usize {
        self.map.valid().len() - self.map.valid_count()
    }
}

/// For every target pixel, the flat index of the source pixel that lands on
/// it, or `None` for holes. Collisions keep the larger disparity.
pub fn warp_route(src: &DisparityMap, direction: WarpDirection) -> Vec<Option<usize>> {
    let (h, w) = (src.height(), src.width());
    let mut route: Vec<Option<usize>> = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = src.get(y, x) else { continue };
            let shift = d.round() as isize;
            let target = match direction {
                WarpDirection::RightToLeft => x as isize + shift,
                WarpDirection::LeftToRight => x as isize - shift,
            };
            if target < 0 || target >= w as isize {
                continue;
            }
            let t = y * w + target as usize;
            let s = y * w + x;
            match route[t] {
                Some(prev) if src.values()[prev] >= d => {}
                _ => route[t] = Some(s),
            }
        }
    }
    route
}

pub fn warp_disparity(src: &DisparityMap, direction: WarpDirection) -> WarpResult {
    let route = warp_route(src, direction);
    let values = route.iter().map(|r| r.map_or(0.0, |i| src.values()[i])).collect();
    let valid = route.iter().map(Option::is_some).collect();
    WarpResult {
        map: DisparityMap::new(src.height(), src.width(), values, valid)
            .expect("warp preserves dimensions"),
    }
}

/// Flags pixels whose induced disparity is a hole or differs by more than `threshold`.
pub fn lr_consistency_check(
    disparity: &DisparityMap,
    induced: &WarpResult,
    threshold: f64,
) -> Result<Vec<bool>> {
    disparity.same_dims(&induced.map)?;
    if !(threshold > 0.0) {
        bail!(Config, "consistency threshold must be positive, got {}", threshold);
    }
    Ok(disparity
        .values()
        .iter()
        .zip(induced.map.values())
        .zip(induced.map.valid())
        .map(|((&d, &e), &ok)| !ok || (d - e).abs() > threshold)
        .collect())
}

fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Fills flagged pixels with the smaller of the nearest unflagged disparities
/// to the left and right on the same row. Rows without any unflagged pixel
/// take the median of all unflagged pixels.
pub fn interpolate_mismatched(disparity: &DisparityMap, mask: &[bool]) -> Result<DisparityMap> {
    let (h, w) = (disparity.height(), disparity.width());
    if mask.len() != h * w {
        bail!(Dimension, "mask of {} entries for a {}x{} map", mask.len(), h, w);
    }
    let mut kept: Vec<f64> = disparity
        .values()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .collect();
    if kept.is_empty() {
        bail!(Contract, "every pixel is flagged; nothing to interpolate from");
    }
    let fallback = lower_median(&mut kept);
    let src = disparity.values();
    let mut out = src.to_vec();
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            if !mask[row + x] {
                continue;
            }
            let left = (0..x).rev().find(|&i| !mask[row + i]).map(|i| src[row + i]);
            let right = (x + 1..w).find(|&i| !mask[row + i]).map(|i| src[row + i]);
            out[row + x] = match (left, right) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => fallback,
            };
        }
    }
    DisparityMap::new(h, w, out, disparity.valid().to_vec())
}

/// Parabola offset through `(d-1, c_minus), (d, c0), (d+1, c_plus)`, clamped to
/// `[-0.5, 0.5]`; 0 when the parabola is degenerate.
pub fn parabola_offset(c_minus: f64, c0: f64, c_plus: f64) -> f64 {
    let denom = 2.0 * (c_minus + c_plus - 2.0 * c0);
    if denom > 1e-9 {
        ((c_minus - c_plus) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Refines integer disparities by parabola fitting on the cost volume they
/// came from. Disparities 0 and `D - 1` are left unchanged.
pub fn subpixel_enhance(costs: &CostVolume, wta: &DisparityMap) -> Result<DisparityMap> {
    let (d_count, h, w) = costs.values().dims3()?;
    if (h, w) != (wta.height(), wta.width()) {
        bail!(Dimension, "{}x{} volume for a {}x{} map", h, w, wta.height(), wta.width());
    }
    let mut out = wta.values().to_vec();
    for y in 0..h {
        for x in 0..w {
            let Some(v) = wta.get(y, x) else { continue };
            let d = v.round();
            if d < 1.0 || d > (d_count - 2) as f64 {
                continue;
            }
            let d = d as usize;
            let off = parabola_offset(
                costs.cost(d - 1, y, x),
                costs.cost(d, y, x),
                costs.cost(d + 1, y, x),
            );
            out[y * w + x] = d as f64 + off;
        }
    }
    DisparityMap::new(h, w, out, wta.valid().to_vec())
}

/// `k x k` median over valid pixels of an edge-replicated window. Invalid
/// pixels stay invalid.
pub fn median_filter(disparity: &DisparityMap, k: usize) -> Result<DisparityMap> {
    if k % 2 == 0 || k < 3 {
        bail!(Config, "median window must be odd and at least 3, got {}", k);
    }
    let (h, w) = (disparity.height(), disparity.width());
    let r = (k / 2) as isize;
    let mut out = disparity.values().to_vec();
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for x in 0..w {
            if disparity.get(y, x).is_none() {
                continue;
            }
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    if let Some(v) = disparity.get(yy, xx) {
                        window.push(v);
                    }
                }
            }
            out[y * w + x] = lower_median(&mut window);
        }
    }
    DisparityMap::new(h, w, out, disparity.valid().to_vec())
}
