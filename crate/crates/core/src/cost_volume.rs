//! Matching-cost volumes for both views: a fixed census matcher and a small
//! learnable siamese matcher compared by cosine similarity.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{shift_col, Graph, Var};
use crate::data::StereoSample;
use crate::error::{bail, Result};
use crate::image::{GrayImage, View};
use crate::init::{seeded_rng, uniform};
use crate::tensor::Tensor;
use crate::training::Sgd;

/// Matching costs of one view over candidate disparities `0..D`; lower is better.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub view: View,
    values: Tensor,
}

impl CostVolume {
    pub fn new(view: View, values: Tensor) -> Result<Self> {
        let (d, _, _) = values.dims3()?;
        if d < 2 {
            bail!(Dimension, "cost volume needs at least 2 disparities, got {}", d);
        }
        if values.data().iter().any(|&v| v < 0.0) {
            bail!(Numeric, "negative matching cost");
        }
        Ok(CostVolume { view, values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn disparities(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cost(&self, d: usize, y: usize, x: usize) -> f64 {
        self.values.at3(d, y, x)
    }

    /// Writes `D, H, W` as little-endian `u32` followed by `D*H*W` little-endian
    /// `f32` costs in `(d, y, x)` order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for &n in self.values.shape() {
            out.write_all(&(n as u32).to_le_bytes())?;
        }
        for &v in self.values.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path, view: View) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 {
            bail!(Format, "cost volume file shorter than its header");
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let shape = [dim(0), dim(1), dim(2)];
        let n: usize = shape.iter().product();
        if bytes.len() != 12 + 4 * n {
            bail!(Format, "cost volume {:?} needs {} payload bytes, found {}", shape, 4 * n, bytes.len() - 12);
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        CostVolume::new(view, Tensor::new(&shape, data)?)
    }
}

/// Per-pixel census signatures.
#[derive(Clone, Debug)]
pub struct CensusMap {
    height: usize,
    width: usize,
    bit_count: u32,
    bits: Vec<u128>,
}

impl CensusMap {
    pub fn bit_count(&self) -> u32 {
        self.bit_count
    }

    /// Signature at `(y, x)`; the first neighbour in row-major order is the
    /// most significant of the `bit_count` bits.
    pub fn get(&self, y: usize, x: usize) -> u128 {
        self.bits[y * self.width + x]
    }

    pub fn bit_string(&self, y: usize, x: usize) -> String {
        format!("{:0width$b}", self.get(y, x), width = self.bit_count as usize)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Census transform with edge replication: one bit per non-centre neighbour,
/// set iff the neighbour is strictly darker than the centre.
pub fn census_transform(img: &GrayImage, window: usize) -> Result<CensusMap> {
    if window % 2 == 0 || window < 3 {
        bail!(Config, "census window must be odd and at least 3, got {}", window);
    }
    if window * window - 1 > 128 {
        bail!(Config, "census window {} exceeds 128 signature bits", window);
    }
    let r = (window / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut bits = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = img.get(y as usize, x as usize);
            let mut sig = 0u128;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    sig = (sig << 1) | u128::from(img.get_clamped(y + dy, x + dx) < center);
                }
            }
            bits.push(sig);
        }
    }
    Ok(CensusMap {
        height: h,
        width: w,
        bit_count: (window * window - 1) as u32,
        bits,
    })
}

fn check_pair(left: &GrayImage, right: &GrayImage, d_max: usize) -> Result<()> {
    if (left.height(), left.width()) != (right.height(), right.width()) {
        bail!(
            Dimension,
            "left image is {}x{}, right is {}x{}",
            left.height(),
            left.width(),
            right.height(),
            right.width()
        );
    }
    if d_max < 2 || d_max > left.width() / 2 {
        bail!(Config, "d_max {} outside [2, W/2] for width {}", d_max, left.width());
    }
    Ok(())
}

/// Normalized Hamming costs for both views. Candidates falling outside the
/// opposite image cost 1.
pub fn census_cost_volume(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    window: usize,
) -> Result<(CostVolume, CostVolume)> {
    check_pair(left, right, d_max)?;
    let cl = census_transform(left, window)?;
    let cr = census_transform(right, window)?;
    let (h, w) = (left.height(), left.width());
    let bits = f64::from(cl.bit_count);
    let build = |anchor: &CensusMap, other: &CensusMap, toward_right: bool| {
        let mut data = vec![1.0; d_max * h * w];
        for d in 0..d_max {
            for y in 0..h {
                for x in 0..w {
                    if let Some(xs) = shift_col(x, d, w, toward_right) {
                        let ham = (anchor.get(y, x) ^ other.get(y, xs)).count_ones();
                        data[(d * h + y) * w + x] = f64::from(ham) / bits;
                    }
                }
            }
        }
        Tensor::from_parts(vec![d_max, h, w], data)
    };
    Ok((
        CostVolume::new(View::Left, build(&cl, &cr, false))?,
        CostVolume::new(View::Right, build(&cr, &cl, true))?,
    ))
}

/// Affine min-max rescale of the whole volume to `[0, 1]`; a constant volume maps to 0.5.
pub fn normalize_cost_volume(v: &CostVolume) -> CostVolume {
    let data = v.values.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = Tensor::from_parts(
        v.values.shape().to_vec(),
        data.iter()
            .map(|&c| if span > 0.0 { (c - lo) / span } else { 0.5 })
            .collect(),
    );
    CostVolume {
        view: v.view,
        values,
    }
}

pub const SIAMESE_CHANNELS: usize = 8;
const SIAMESE_LAYERS: usize = 3;
const FEATURE_EPS: f64 = 1e-12;

/// Shared three-layer 3x3 convolutional feature extractor (1 -> 8 -> 8 -> 8).
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseWeights {
    /// `(kernel, bias)` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl SiameseWeights {
    pub fn init(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let layers = (0..SIAMESE_LAYERS)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { SIAMESE_CHANNELS };
                let bound = (1.0 / (c_in * 9) as f64).sqrt();
                (
                    uniform(&[SIAMESE_CHANNELS, c_in, 3, 3], bound, &mut rng),
                    uniform(&[SIAMESE_CHANNELS], bound, &mut rng),
                )
            })
            .collect();
        SiameseWeights { layers }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (k, b))| [(format!("siamese.{i}.kernel"), k), (format!("siamese.{i}.bias"), b)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(k, b)| [k, b]).collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let reference = SiameseWeights::init(0);
        let expected = reference.named_tensors();
        if named.len() != expected.len() {
            bail!(Format, "siamese checkpoint holds {} tensors, expected {}", named.len(), expected.len());
        }
        for ((name, t), (ename, et)) in named.iter().zip(&expected) {
            if name != ename || t.shape() != et.shape() {
                bail!(Format, "unexpected tensor {} {:?}", name, t.shape());
            }
        }
        let mut it = named.into_iter().map(|(_, t)| t);
        let layers = (0..SIAMESE_LAYERS)
            .map(|_| (it.next().unwrap(), it.next().unwrap()))
            .collect();
        Ok(SiameseWeights { layers })
    }

    /// Places the parameters on a graph as differentiable leaves.
    pub fn bind(&self, g: &Graph) -> Vec<(Var, Var)> {
        self.layers.iter().map(|(k, b)| (g.param(k), g.param(b))).collect()
    }
}

fn image_var(g: &Graph, img: &GrayImage) -> Var {
    g.constant(Tensor::from_parts(
        vec![1, img.height(), img.width()],
        img.data().to_vec(),
    ))
}

/// Unit-length feature vectors `[8, H, W]` of one image.
pub fn siamese_features(g: &Graph, img: &GrayImage, layers: &[(Var, Var)]) -> Result<Var> {
    let mut x = image_var(g, img);
    for (i, &(k, b)) in layers.iter().enumerate() {
        x = g.conv2d(x, k, Some(b), 1)?;
        if i + 1 < layers.len() {
            x = g.tanh(x);
        }
    }
    g.normalize_channels(x, FEATURE_EPS)
}

/// Cosine similarities for both views, `-1` where the candidate leaves the image.
pub fn siamese_similarity_graph(
    g: &Graph,
    left: &GrayImage,
    right: &GrayImage,
    layers: &[(Var, Var)],
    d_max: usize,
) -> Result<(Var, Var)> {
    check_pair(left, right, d_max)?;
    let fl = siamese_features(g, left, layers)?;
    let fr = siamese_features(g, right, layers)?;
    Ok((
        g.shifted_dot(fl, fr, d_max, false, -1.0)?,
        g.shifted_dot(fr, fl, d_max, true, -1.0)?,
    ))
}

/// `1 - cosine` costs in `[0, 2]` for both views, recorded on `g`.
pub fn siamese_cost_graph(
    g: &Graph,
    left: &GrayImage,
    right: &GrayImage,
    layers: &[(Var, Var)],
    d_max: usize,
) -> Result<(Var, Var)> {
    let (sl, sr) = siamese_similarity_graph(g, left, right, layers, d_max)?;
    let cost = |s: Var| g.add_scalar(g.neg(s), 1.0);
    Ok((cost(sl), cost(sr)))
}

pub fn siamese_cost_volume(
    left: &GrayImage,
    right: &GrayImage,
    weights: &SiameseWeights,
    d_max: usize,
) -> Result<(CostVolume, CostVolume)> {
    let g = Graph::new();
    let layers = weights.bind(&g);
    let (cl, cr) = siamese_cost_graph(&g, left, right, &layers, d_max)?;
    // Rounding can leave 1 - cos a hair below zero.
    let clamp = |v: Var| {
        let t = g.value(v);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|c| c.clamp(0.0, 2.0)).collect())
    };
    Ok((
        CostVolume::new(View::Left, clamp(cl))?,
        CostVolume::new(View::Right, clamp(cr))?,
    ))
}

#[derive(Clone, Debug)]
pub struct MatcherConfig {
    pub d_max: usize,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Labeled pixels drawn per sample for the hinge loss; 0 uses all of them.
    pub pixels_per_sample: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            d_max: 16,
            margin: 0.2,
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            seed: 7,
            pixels_per_sample: 0,
        }
    }
}

/// `max(0, margin + s_neg - s_pos)`.
pub fn hinge_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin + s_neg - s_pos).max(0.0)
}

/// Flat indices into a `[D, H, W]` similarity volume for the positive and
/// negative candidates of one sample's labeled left pixels.
struct HingePairs {
    pos: Vec<usize>,
    neg: Vec<usize>,
}

fn sample_pairs(sample: &StereoSample, d_max: usize, limit: usize, rng: &mut ChaCha8Rng) -> HingePairs {
    let gt = &sample.gt_left;
    let (h, w) = (gt.height(), gt.width());
    let mut pairs = HingePairs {
        pos: Vec::new(),
        neg: Vec::new(),
    };
    for y in 0..h {
        for x in 0..w {
            let Some(d) = gt.get(y, x) else { continue };
            let d_true = d.round() as usize;
            if d_true >= d_max || d_true > x {
                continue;
            }
            // Negatives stay inside the image so both scores are real matches.
            let candidates: Vec<usize> = (0..d_max.min(x + 1))
                .filter(|&dn| dn.abs_diff(d_true) >= 2)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let d_neg = candidates[rng.gen_range(0..candidates.len())];
            pairs.pos.push((d_true * h + y) * w + x);
            pairs.neg.push((d_neg * h + y) * w + x);
        }
    }
    if limit > 0 && pairs.pos.len() > limit {
        let mut keep: Vec<usize> = (0..pairs.pos.len()).collect();
        for i in 0..limit {
            let j = rng.gen_range(i..keep.len());
            keep.swap(i, j);
        }
        keep.truncate(limit);
        keep.sort_unstable();
        pairs.pos = keep.iter().map(|&i| pairs.pos[i]).collect();
        pairs.neg = keep.iter().map(|&i| pairs.neg[i]).collect();
    }
    pairs
}

/// Hinge-loss training of the siamese matcher on left-view ground truth.
///
/// Negatives are drawn once per sample, so every epoch minimizes the same
/// objective. Returns the trained weights and the mean loss of each epoch.
pub fn train_matcher(
    dataset: &[StereoSample],
    weights: &SiameseWeights,
    cfg: &MatcherConfig,
) -> Result<(SiameseWeights, Vec<f64>)> {
    if dataset.is_empty() {
        bail!(Contract, "matcher training needs at least one sample");
    }
    if !(cfg.margin > 0.0) {
        bail!(Config, "hinge margin must be positive, got {}", cfg.margin);
    }
    let mut rng = seeded_rng(cfg.seed);
    let pairs: Vec<HingePairs> = dataset
        .iter()
        .map(|s| sample_pairs(s, cfg.d_max, cfg.pixels_per_sample, &mut rng))
        .collect();

    let mut weights = weights.clone();
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for (sample, p) in dataset.iter().zip(&pairs) {
            if p.pos.is_empty() {
                continue;
            }
            let g = Graph::new();
            let layers = weights.bind(&g);
            let (sim_l, _) = siamese_similarity_graph(&g, &sample.left, &sample.right, &layers, cfg.d_max)?;
            let s_pos = g.gather(sim_l, &p.pos)?;
            let s_neg = g.gather(sim_l, &p.neg)?;
            let diff = g.sub(s_neg, s_pos)?;
            let hinge = g.relu(g.add_scalar(diff, cfg.margin));
            let loss = g.mean(hinge);
            total += g.value(loss).item()?;
            let vars: Vec<Var> = layers.iter().flat_map(|&(k, b)| [k, b]).collect();
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
            opt.step(weights.tensors_mut(), &grads, cfg.lr)?;
        }
        history.push(total / dataset.len() as f64);
    }
    Ok((weights, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl FnMut(usize, usize) -> f64) -> GrayImage {
        GrayImage::from_fn(h, w, f).unwrap()
    }

    #[test]
    fn census_reference_patch() {
        let patch = img(3, 3, |y, x| (3 * y + x + 1) as f64 / 10.0);
        let c = census_transform(&patch, 3).unwrap();
        assert_eq!(c.bit_string(1, 1), "11110000");
        assert_eq!(c.bit_count(), 8);
    }

    #[test]
    fn census_constant_patch_is_zero() {
        let c = census_transform(&img(8, 8, |_, _| 0.4), 5).unwrap();
        assert!((0..8).all(|y| (0..8).all(|x| c.get(y, x) == 0)));
    }

    #[test]
    fn census_rejects_even_window() {
        assert!(matches!(census_transform(&img(8, 8, |_, _| 0.0), 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn out_of_bounds_candidates_cost_one() {
        let a = img(8, 16, |y, x| ((y * 7 + x * 13) % 11) as f64 / 10.0);
        let (l, r) = census_cost_volume(&a, &a, 4, 3).unwrap();
        for y in 0..8 {
            assert_eq!(l.cost(3, y, 2), 1.0);
            assert_eq!(r.cost(3, y, 13), 1.0);
            for x in 0..16 {
                assert_eq!(l.cost(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn census_volume_rejects_mismatched_pair() {
        let a = img(8, 16, |_, _| 0.0);
        let b = img(8, 12, |_, _| 0.0);
        assert!(matches!(census_cost_volume(&a, &b, 4, 3), Err(crate::Error::Dimension(_))));
        assert!(census_cost_volume(&a, &a, 9, 3).is_err());
    }

    #[test]
    fn normalization_rules() {
        let v = CostVolume::new(View::Left, Tensor::new(&[2, 1, 1], vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(normalize_cost_volume(&v).values().data(), &[0.0, 1.0]);
        let v = CostVolume::new(View::Left, Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(normalize_cost_volume(&v).values().data(), &[0.0, 1.0]);
        let v = CostVolume::new(View::Left, Tensor::full(&[3, 2, 2], 7.0)).unwrap();
        assert_eq!(normalize_cost_volume(&v).values().data(), &[0.5; 12]);
    }

    #[test]
    fn siamese_identical_views_have_zero_cost_at_zero_disparity() {
        let a = img(12, 16, |y, x| ((y * 5 + x * 3) % 7) as f64 / 7.0);
        let (l, r) = siamese_cost_volume(&a, &a, &SiameseWeights::init(3), 4).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                assert!(l.cost(0, y, x) < 1e-8);
                assert!(r.cost(0, y, x) < 1e-8);
            }
        }
        assert!(l.values().data().iter().all(|&c| (0.0..=2.0).contains(&c)));
        assert_eq!(l.cost(2, 0, 1), 2.0);
    }

    #[test]
    fn degenerate_features_give_equal_costs() {
        let mut w = SiameseWeights::init(1);
        let (k, b) = &mut w.layers[2];
        *k = Tensor::zeros(k.shape());
        *b = Tensor::zeros(b.shape());
        let a = img(10, 16, |y, x| ((y + 2 * x) % 5) as f64 / 5.0);
        let bimg = img(10, 16, |y, x| ((3 * y + x) % 4) as f64 / 4.0);
        let (l, _) = siamese_cost_volume(&a, &bimg, &w, 4).unwrap();
        for d in 0..4 {
            for y in 0..10 {
                for x in d..16 {
                    assert_eq!(l.cost(d, y, x), l.cost(0, 0, 0));
                }
            }
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(1.0, 0.0, 0.2), 0.0);
        assert_eq!(hinge_loss(0.3, 0.3, 0.2), 0.2);
    }

    #[test]
    fn binary_export_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let v = CostVolume::new(View::Left, Tensor::from_fn(&[2, 2, 3], |i| i as f64 / 4.0)).unwrap();
        v.write_binary(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 4 * 12);
        assert_eq!(&bytes[16..20], &0.25f32.to_le_bytes());
        let back = CostVolume::read_binary(&path, View::Left).unwrap();
        assert_eq!(back, v);
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(CostVolume::read_binary(&path, View::Left), Err(crate::Error::Format(_))));
    }
}
