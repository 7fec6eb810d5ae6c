//! Oracles shared by the integration tests.
#![allow(dead_code)]

use lrcr::model::{convlstm_step, soft_argmin, ConvLstmState};
use lrcr::{DisparityMap, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Direct quadruple-loop cross-correlation with zero padding.
pub fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, pad: usize) -> Tensor {
    let (ci, h, w) = input.dims3().unwrap();
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    assert_eq!(kernel.shape()[1], ci);
    let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (y + ky, x + kx);
                            if iy < pad || ix < pad || iy - pad >= h || ix - pad >= w {
                                continue;
                            }
                            s += kernel.data()[((o * ci + c) * k + ky) * k + kx]
                                * input.at3(c, iy - pad, ix - pad);
                        }
                    }
                }
                out[(o * ho + y) * wo + x] = s;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

/// Outcome of one check: a short measurement on success or the reason for failure.
pub type Check = std::result::Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Softmax normalization, soft-argmin range, sharpening and the uniform case.
pub fn soft_argmin_checks() -> Check {
    let mut r = rng(21);
    let (d, h, w) = (8, 6, 7);
    let mut worst_sum = 0.0_f64;
    let mut worst_hard = 0.0_f64;
    for _ in 0..20 {
        let scores = rand_tensor(&[d, h, w], -4.0, 4.0, &mut r);
        let g = Graph::new();
        let s = g.constant(scores.clone());
        let p = g.value(g.softmax_channels(s).map_err(|e| e.to_string())?);
        let disp = g.value(soft_argmin(&g, s).map_err(|e| e.to_string())?);
        for px in 0..h * w {
            let total: f64 = (0..d).map(|k| p.data()[k * h * w + px]).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            let v = disp.data()[px];
            ensure((0.0..=(d - 1) as f64).contains(&v), || format!("soft-argmin {v} out of range"))?;
        }
        // One candidate clearly ahead, then sharpened.
        let winners: Vec<usize> = (0..h * w).map(|_| r.gen_range(0..d)).collect();
        let sharp = Tensor::from_fn(&[d, h, w], |i| {
            let (k, px) = (i / (h * w), i % (h * w));
            let base = scores.data()[i].clamp(-1.0, 0.0);
            50.0 * if k == winners[px] { base + 2.0 } else { base }
        });
        let g = Graph::new();
        let out = g.value(soft_argmin(&g, g.constant(sharp)).map_err(|e| e.to_string())?);
        for (px, &win) in winners.iter().enumerate() {
            worst_hard = worst_hard.max((out.data()[px] - win as f64).abs());
        }
    }
    ensure(worst_sum <= 1e-9, || format!("probabilities off by {worst_sum:e}"))?;
    ensure(worst_hard <= 1e-3, || format!("sharpened scores off by {worst_hard:e}"))?;
    let g = Graph::new();
    let uniform = g.value(soft_argmin(&g, g.constant(Tensor::full(&[d, 2, 2], 0.7))).map_err(|e| e.to_string())?);
    ensure(uniform.data().iter().all(|&v| v == (d - 1) as f64 / 2.0), || {
        format!("uniform scores gave {:?}", uniform.data())
    })?;
    Ok(format!("sum err {worst_sum:.1e}, sharpened err {worst_hard:.1e}, uniform exact"))
}

fn scalar_cell(vals: [f64; 15]) -> Vec<Tensor> {
    vals.iter()
        .enumerate()
        .map(|(i, &v)| match i {
            0..=7 => Tensor::from_fn(&[1, 1, 3, 3], |j| if j == 4 { v } else { 0.3 }),
            8..=10 => Tensor::full(&[1, 1, 1], v),
            _ => Tensor::full(&[1], v),
        })
        .collect()
}

fn run_cell(tensors: &[Tensor], x: f64, h: f64, c: f64, zero_state: bool) -> Result<(f64, f64)> {
    let g = Graph::new();
    let v: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    let cell = lrcr::model::ConvLstmCell {
        w_xi: v[0],
        w_xf: v[1],
        w_xo: v[2],
        w_xc: v[3],
        w_hi: v[4],
        w_hf: v[5],
        w_ho: v[6],
        w_hc: v[7],
        w_ci: v[8],
        w_cf: v[9],
        w_co: v[10],
        b_i: v[11],
        b_f: v[12],
        b_o: v[13],
        b_c: v[14],
    };
    let xv = g.constant(Tensor::full(&[1, 1, 1], x));
    let prev = if zero_state {
        ConvLstmState::zeros(&g, 1, 1, 1)
    } else {
        ConvLstmState::new(g.constant(Tensor::full(&[1, 1, 1], h)), g.constant(Tensor::full(&[1, 1, 1], c)))
    };
    let s = convlstm_step(&g, &cell, xv, &prev)?;
    Ok((g.value(s.h).data()[0], g.value(s.c).data()[0]))
}

/// Zero-weight contraction and the scalar oracle on a 1x1 image, where only
/// the centre tap of each 3x3 kernel sees data.
pub fn convlstm_checks() -> Check {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let zero = scalar_cell([0.0; 15]);
    for &(x, h, c) in &[(0.3, -0.2, 0.8), (-1.5, 0.9, -2.0), (2.0, 0.0, 0.0)] {
        let (h1, c1) = run_cell(&zero, x, h, c, false).map_err(|e| e.to_string())?;
        ensure(c1 == c / 2.0 && h1 == 0.5 * (c / 2.0).tanh(), || {
            format!("zero weights gave (h, c) = ({h1}, {c1}) from c = {c}")
        })?;
    }
    let mut r = rng(33);
    let mut worst = 0.0_f64;
    for trial in 0..50 {
        let p: [f64; 15] = std::array::from_fn(|_| r.gen_range(-1.5..1.5));
        let (x, h, c) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0), r.gen_range(-2.0..2.0));
        let zero_state = trial % 5 == 0;
        let (h, c) = if zero_state { (0.0, 0.0) } else { (h, c) };
        let i = sig(p[0] * x + p[4] * h + p[8] * c + p[11]);
        let f = sig(p[1] * x + p[5] * h + p[9] * c + p[12]);
        let o = sig(p[2] * x + p[6] * h + p[10] * c + p[13]);
        let c1 = f * c + i * (p[3] * x + p[7] * h + p[14]).tanh();
        let h1 = o * c1.tanh();
        let (gh, gc) = run_cell(&scalar_cell(p), x, h, c, zero_state).map_err(|e| e.to_string())?;
        worst = worst.max((gh - h1).abs()).max((gc - c1).abs());
    }
    ensure(worst <= 1e-12, || format!("scalar oracle differs by {worst:e}"))?;
    Ok(format!("zero-weight contraction exact, scalar oracle err {worst:.1e}"))
}

/// Warp of the right truth against the left truth on generated scenes,
/// constant round trips, and the sub-pixel offset bounds.
pub fn geometry_checks(scenes: u64) -> Check {
    use lrcr::data::{generate_sample, SceneParams};
    use lrcr::geometry::{parabola_offset, subpixel_enhance, warp_disparity, WarpDirection};
    let params = SceneParams::default();
    let mut compared = 0usize;
    for seed in 0..scenes {
        let s = generate_sample(&params, seed).map_err(|e| e.to_string())?;
        let warped = warp_disparity(&s.gt_right, WarpDirection::RightToLeft).map;
        for i in 0..warped.values().len() {
            if warped.valid()[i] && s.gt_left.valid()[i] {
                compared += 1;
                ensure(warped.values()[i].to_bits() == s.gt_left.values()[i].to_bits(), || {
                    format!("scene {seed} pixel {i}: {} vs {}", warped.values()[i], s.gt_left.values()[i])
                })?;
            }
        }
        // Sub-pixel refinement of the true disparities on the census volume.
        let (cl, _) = lrcr::cost_volume::census_cost_volume(&s.left, &s.right, params.d_max, 5)
            .map_err(|e| e.to_string())?;
        let wta = lrcr::evaluation::wta_disparity(&cl);
        let refined = subpixel_enhance(&cl, &wta).map_err(|e| e.to_string())?;
        for (a, b) in refined.values().iter().zip(wta.values()) {
            ensure((a - b).abs() <= 0.5, || format!("sub-pixel offset {}", a - b))?;
        }
    }
    for d in 0..4 {
        let m = DisparityMap::constant(3, 16, d as f64);
        let there = warp_disparity(&m, WarpDirection::LeftToRight).map;
        let back = warp_disparity(&there, WarpDirection::RightToLeft).map;
        for y in 0..3 {
            for x in d..16 {
                ensure(back.get(y, x) == Some(d as f64), || format!("constant {d} round trip broke at ({y},{x})"))?;
            }
        }
    }
    let off = parabola_offset(3.0, 1.0, 2.0);
    ensure((off - 1.0 / 6.0).abs() <= 1e-12, || format!("(3,1,2) offset {off}"))?;
    Ok(format!("{scenes} scenes, {compared} mutually valid pixels exact"))
}
