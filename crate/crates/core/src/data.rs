//! Synthetic stereo pairs with exact two-view ground truth, plus PFM/PGM IO
//! and the on-disk dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Result};
use crate::image::{DisparityMap, GrayImage, View};
use crate::init::seeded_rng;

/// Scene recipe: a textured fronto-parallel background plus `rect_count`
/// textured fronto-parallel rectangles in front of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub d_max: usize,
    pub d_bg: usize,
    pub rect_count: usize,
    pub rect_disp_min: usize,
    pub rect_disp_max: usize,
    /// Texture intensities span `0.5 +/- texture_amplitude`.
    pub texture_amplitude: f64,
    /// Independent per-view uniform noise of this half-width added after rendering.
    pub sensor_noise: f64,
}

/// 64x64 scenes with 16 disparities: a dozen planes over a near background,
/// weak texture and visible sensor noise.
impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 64,
            width: 64,
            d_max: 16,
            d_bg: 1,
            rect_count: 12,
            rect_disp_min: 2,
            rect_disp_max: 15,
            texture_amplitude: 0.15,
            sensor_noise: 0.06,
        }
    }
}

impl SceneParams {
    /// The default recipe at 32x32 with 8 disparities.
    pub fn desk() -> Self {
        SceneParams {
            height: 32,
            width: 32,
            d_max: 8,
            rect_disp_max: 7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            bail!(Config, "scene must be at least 8x8, got {}x{}", self.height, self.width);
        }
        if self.d_max < 2 || self.d_max > self.width / 2 {
            bail!(Config, "d_max {} outside [2, W/2]", self.d_max);
        }
        if self.d_bg >= self.d_max {
            bail!(Config, "background disparity {} not below d_max {}", self.d_bg, self.d_max);
        }
        if self.rect_count > 0
            && !(self.d_bg < self.rect_disp_min
                && self.rect_disp_min <= self.rect_disp_max
                && self.rect_disp_max < self.d_max)
        {
            bail!(
                Config,
                "rectangle disparities [{}, {}] must lie in ({}, {}]",
                self.rect_disp_min,
                self.rect_disp_max,
                self.d_bg,
                self.d_max - 1
            );
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) || !(0.0..=0.5).contains(&self.sensor_noise) {
            bail!(Config, "texture amplitude and sensor noise must lie in [0, 0.5]");
        }
        Ok(())
    }
}

/// Rectangle footprint in left-image coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub disparity: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: GrayImage,
    pub right: GrayImage,
    pub gt_left: DisparityMap,
    pub gt_right: DisparityMap,
    pub seed: u64,
}

/// Layer geometry of a generated scene; layer 0 is the background and
/// rectangles follow in increasing disparity.
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub d_bg: usize,
    pub rects: Vec<Rect>,
}

impl SceneLayout {
    fn disparity(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d_bg
        } else {
            self.rects[layer - 1].disparity
        }
    }

    /// Nearest layer seen by the left camera at `(y, x)`.
    pub fn top_left(&self, y: usize, x: usize) -> usize {
        self.rects
            .iter()
            .enumerate()
            .rev()
            .find(|(_, r)| r.contains(y, x))
            .map_or(0, |(i, _)| i + 1)
    }

    /// Nearest layer seen by the right camera at `(y, x_r)`: the layer whose
    /// left-coordinate footprint contains `x_r + d` with the largest `d`.
    pub fn top_right(&self, y: usize, x: usize) -> usize {
        self.rects
            .iter()
            .enumerate()
            .rev()
            .find(|(_, r)| r.contains(y, x + r.disparity))
            .map_or(0, |(i, _)| i + 1)
    }

    /// Disparity of the visible surface at every pixel of `view`, occluded or not.
    pub fn surface_disparity(&self, view: View) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let layer = match view {
                    View::Left => self.top_left(y, x),
                    View::Right => self.top_right(y, x),
                };
                out.push(self.disparity(layer) as f64);
            }
        }
        out
    }

    pub fn ground_truth(&self) -> (DisparityMap, DisparityMap) {
        let (h, w) = (self.height, self.width);
        let mut left = (vec![0.0; h * w], vec![false; h * w]);
        let mut right = (vec![0.0; h * w], vec![false; h * w]);
        for y in 0..h {
            for x in 0..w {
                let l = self.top_left(y, x);
                let d = self.disparity(l);
                left.0[y * w + x] = d as f64;
                left.1[y * w + x] = x >= d && self.top_right(y, x - d) == l;

                let r = self.top_right(y, x);
                let d = self.disparity(r);
                right.0[y * w + x] = d as f64;
                right.1[y * w + x] = x + d < w && self.top_left(y, x + d) == r;
            }
        }
        (
            DisparityMap::new(h, w, left.0, left.1).unwrap(),
            DisparityMap::new(h, w, right.0, right.1).unwrap(),
        )
    }
}

fn smoothed_texture(h: usize, w: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let mut blurred = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += raw[yy * w + xx];
                    n += 1.0;
                }
            }
            blurred[y * w + x] = s / n;
        }
    }
    let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    blurred
        .into_iter()
        .map(|v| 0.5 + amplitude * (2.0 * (v - lo) / span - 1.0))
        .collect()
}

/// Draws the layer layout for a seed.
pub fn generate_layout(params: &SceneParams, seed: u64) -> Result<SceneLayout> {
    params.validate()?;
    let mut rng = seeded_rng(seed);
    let (h, w) = (params.height, params.width);
    let mut rects: Vec<Rect> = (0..params.rect_count)
        .map(|_| {
            let rw = rng.gen_range(w / 6..=w / 3).max(2);
            let rh = rng.gen_range(h / 5..=h / 2).max(2);
            let x0 = rng.gen_range(0..=w - rw);
            let y0 = rng.gen_range(0..=h - rh);
            Rect {
                x0,
                x1: x0 + rw,
                y0,
                y1: y0 + rh,
                disparity: rng.gen_range(params.rect_disp_min..=params.rect_disp_max),
            }
        })
        .collect();
    rects.sort_by_key(|r| r.disparity);
    Ok(SceneLayout {
        height: h,
        width: w,
        d_bg: params.d_bg,
        rects,
    })
}

/// Renders a scene. Deterministic in `(params, seed)`.
pub fn generate_sample(params: &SceneParams, seed: u64) -> Result<StereoSample> {
    let layout = generate_layout(params, seed)?;
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (h, w) = (params.height, params.width);
    let cw = w + params.d_max;
    let textures: Vec<Vec<f64>> = (0..=layout.rects.len())
        .map(|_| smoothed_texture(h, cw, params.texture_amplitude, &mut rng))
        .collect();
    let tex = |layer: usize, y: usize, x: usize| textures[layer][y * cw + x];

    let mut noise = |v: f64| {
        if params.sensor_noise > 0.0 {
            v + rng.gen_range(-params.sensor_noise..params.sensor_noise)
        } else {
            v
        }
    };
    let mut left = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            left.push(noise(tex(layout.top_left(y, x), y, x)));
        }
    }
    let mut right = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let l = layout.top_right(y, x);
            right.push(noise(tex(l, y, x + layout.disparity(l))));
        }
    }
    let (gt_left, gt_right) = layout.ground_truth();
    Ok(StereoSample {
        left: GrayImage::new(h, w, left)?,
        right: GrayImage::new(h, w, right)?,
        gt_left,
        gt_right,
        seed,
    })
}

/// Samples for seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(params: &SceneParams, n: usize, base_seed: u64) -> Result<Vec<StereoSample>> {
    (0..n as u64).map(|i| generate_sample(params, base_seed + i)).collect()
}

/// Grayscale little-endian PFM; invalid pixels are stored as `+Inf`.
pub fn encode_pfm(map: &DisparityMap) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("Pf\n{} {}\n-1.0\n", w, h).into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            let v = map.get(y, x).map_or(f32::INFINITY, |d| d as f32);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits off `count` whitespace-separated header tokens, returning them and
/// the payload that starts after the single whitespace byte ending the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, &[u8])> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            bail!(Format, "truncated header");
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        bail!(Format, "header not terminated");
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => bail!(Format, "bad dimension {:?}", tok),
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let (tok, payload) = header_tokens(bytes, 4)?;
    match tok[0].as_str() {
        "Pf" => {}
        "PF" => bail!(Format, "colour PFM is not a disparity map"),
        other => bail!(Format, "not a PFM file (magic {:?})", other),
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| crate::Error::Format(format!("bad PFM scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        bail!(Format, "bad PFM scale {}", scale);
    }
    let little = scale < 0.0;
    if payload.len() < 4 * w * h {
        bail!(Format, "PFM payload has {} bytes, expected {}", payload.len(), 4 * w * h);
    }
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (i, chunk) in payload.chunks_exact(4).take(w * h).enumerate() {
        let raw = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / w, i % w);
        let y = h - 1 - row;
        if v.is_finite() {
            values[y * w + x] = v as f64;
            valid[y * w + x] = true;
        }
    }
    DisparityMap::new(h, w, values, valid)
}

pub fn write_pfm(map: &DisparityMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    decode_pfm(&fs::read(path)?)
}

/// Binary P5 with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (tok, payload) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        bail!(Format, "not a binary PGM (magic {:?})", tok[0]);
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    if tok[3] != "255" {
        bail!(Format, "unsupported PGM maxval {}", tok[3]);
    }
    if payload.len() < w * h {
        bail!(Format, "PGM payload has {} bytes, expected {}", payload.len(), w * h);
    }
    GrayImage::new(h, w, payload[..w * h].iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

/// Linear map of `values` from `[lo, hi]` onto `[0, 1]` for visualization.
pub fn heat_image(height: usize, width: usize, values: &[f64], lo: f64, hi: f64) -> Result<GrayImage> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::new(height, width, values.iter().map(|v| (v - lo) / span).collect())
}

/// Deterministic disjoint split of `0..n_total` into sorted train and validation ids.
pub fn make_split(n_total: usize, n_val: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_val == 0 || n_val >= n_total {
        bail!(Contract, "need 0 < n_val < n_total, got n_val={} n_total={}", n_val, n_total);
    }
    let mut ids: Vec<usize> = (0..n_total).collect();
    ids.shuffle(&mut seeded_rng(seed));
    let mut val = ids[..n_val].to_vec();
    let mut train = ids[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:04}"))
}

pub const SAMPLE_FILES: [&str; 4] = ["left.pgm", "right.pgm", "gt_left.pfm", "gt_right.pfm"];

pub fn write_sample(root: &Path, index: usize, s: &StereoSample) -> Result<PathBuf> {
    let dir = sample_dir(root, index);
    fs::create_dir_all(&dir)?;
    write_pgm(&s.left, &dir.join(SAMPLE_FILES[0]))?;
    write_pgm(&s.right, &dir.join(SAMPLE_FILES[1]))?;
    write_pfm(&s.gt_left, &dir.join(SAMPLE_FILES[2]))?;
    write_pfm(&s.gt_right, &dir.join(SAMPLE_FILES[3]))?;
    Ok(dir)
}

/// Loads every `sample_NNNN` directory under `root`, in name order. The
/// sample index doubles as its seed.
pub fn read_dataset(root: &Path) -> Result<Vec<StereoSample>> {
    let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(idx) = name.strip_prefix("sample_").and_then(|s| s.parse().ok()) {
            if path.is_dir() {
                dirs.push((idx, path));
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!(Contract, "no sample_NNNN directories under {}", root.display());
    }
    dirs.into_iter()
        .map(|(idx, dir)| {
            Ok(StereoSample {
                left: read_pgm(&dir.join(SAMPLE_FILES[0]))?,
                right: read_pgm(&dir.join(SAMPLE_FILES[1]))?,
                gt_left: read_pfm(&dir.join(SAMPLE_FILES[2]))?,
                gt_right: read_pfm(&dir.join(SAMPLE_FILES[3]))?,
                seed: idx as u64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_plane() -> SceneParams {
        SceneParams {
            height: 16,
            width: 32,
            d_max: 8,
            d_bg: 3,
            rect_count: 0,
            sensor_noise: 0.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn single_plane_scene_is_a_pure_shift() {
        let s = generate_sample(&single_plane(), 11).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                match s.gt_left.get(y, x) {
                    Some(d) => assert_eq!(d, 3.0),
                    None => assert!(x < 3),
                }
                if x >= 3 {
                    assert_eq!(s.right.get(y, x - 3), s.left.get(y, x));
                }
            }
        }
        assert_eq!(s.gt_left.valid_count(), 16 * 29);
    }

    #[test]
    fn same_seed_same_sample() {
        let p = SceneParams::default();
        assert_eq!(generate_sample(&p, 5).unwrap(), generate_sample(&p, 5).unwrap());
        assert_ne!(generate_sample(&p, 5).unwrap().left, generate_sample(&p, 6).unwrap().left);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = SceneParams::default();
        p.rect_disp_max = p.d_max;
        assert!(matches!(generate_sample(&p, 0), Err(crate::Error::Config(_))));
        let p = SceneParams {
            d_bg: 6,
            rect_disp_min: 5,
            ..SceneParams::default()
        };
        assert!(generate_sample(&p, 0).is_err());
    }

    #[test]
    fn pfm_layout_is_bottom_up() {
        let m = DisparityMap::dense(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&m);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let floats: Vec<f32> = bytes[header.len()..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn pfm_roundtrip_keeps_mask() {
        let m = DisparityMap::new(2, 3, vec![1.25, 0.0, 3.5, 7.0, 2.0, 0.5], vec![true, false, true, true, true, false])
            .unwrap();
        assert_eq!(decode_pfm(&encode_pfm(&m)).unwrap(), m);
    }

    #[test]
    fn pfm_rejects_colour_and_truncation() {
        assert!(matches!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0"), Err(crate::Error::Format(_))));
        assert!(matches!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0"), Err(crate::Error::Format(_))));
        assert!(decode_pfm(b"Pf\n2").is_err());
    }

    #[test]
    fn pgm_examples() {
        let img = GrayImage::new(1, 2, vec![0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[bytes.len() - 2..], &[0x00, 0xFF]);
        let zero = GrayImage::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(encode_pgm(&zero).ends_with(&[0, 0, 0, 0]));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(crate::Error::Format(_))));
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn split_contract() {
        let (train, val) = make_split(10, 2, 3).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(make_split(10, 2, 3).unwrap(), (train, val));
        assert!(make_split(10, 0, 1).is_err());
        assert!(make_split(3, 3, 1).is_err());
    }

    #[test]
    fn splits_vary_with_seed() {
        let distinct: std::collections::HashSet<_> =
            (0..100).map(|s| make_split(40, 10, s).unwrap().1).collect();
        assert!(distinct.len() >= 99);
    }
}
