use lrcr::cost_volume::{census_cost_volume, census_transform, normalize_cost_volume};
use lrcr::evaluation::wta_disparity;
use lrcr::{CostVolume, GrayImage, Tensor, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(h, w, |_, _| r.gen()).unwrap()
}

/// Census signature spelled out as a bit string, row-major over the window.
fn census_oracle(img: &GrayImage, y: usize, x: usize, window: usize) -> String {
    let r = (window / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut s = String::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let yy = (y as isize + dy).clamp(0, h - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            s.push(if img.get(yy, xx) < img.get(y, x) { '1' } else { '0' });
        }
    }
    s
}

#[test]
fn census_matches_brute_force() {
    let img = noise_image(9, 11, 4);
    for window in [3, 5, 7] {
        let c = census_transform(&img, window).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                assert_eq!(c.bit_string(y, x), census_oracle(&img, y, x, window));
            }
        }
    }
}

#[test]
fn census_costs_are_normalized_hamming_distances() {
    let (l, r) = (noise_image(8, 12, 1), noise_image(8, 12, 2));
    let (cl, cr) = census_cost_volume(&l, &r, 4, 3).unwrap();
    for d in 0..4 {
        for y in 0..8 {
            for x in 0..12 {
                let ham = |a: String, b: String| a.chars().zip(b.chars()).filter(|(p, q)| p != q).count() as f64 / 8.0;
                let expect_l = if x >= d {
                    ham(census_oracle(&l, y, x, 3), census_oracle(&r, y, x - d, 3))
                } else {
                    1.0
                };
                let expect_r = if x + d < 12 {
                    ham(census_oracle(&r, y, x, 3), census_oracle(&l, y, x + d, 3))
                } else {
                    1.0
                };
                assert_eq!(cl.cost(d, y, x), expect_l);
                assert_eq!(cr.cost(d, y, x), expect_r);
            }
        }
    }
}

#[test]
fn shifted_pair_is_recovered_by_wta() {
    let (h, w, shift, d_max) = (16, 40, 5, 12);
    let wide = noise_image(h, w + shift, 8);
    let left = GrayImage::from_fn(h, w, |y, x| wide.get(y, x)).unwrap();
    let right = GrayImage::from_fn(h, w, |y, x| wide.get(y, x + shift)).unwrap();
    let (cl, cr) = census_cost_volume(&left, &right, d_max, 5).unwrap();
    let (wl, wr) = (wta_disparity(&cl), wta_disparity(&cr));
    // The true shift always costs zero; WTA can only lose it to an exact tie,
    // which happens when the centre is an extremum of its window in both views.
    let (mut hits, mut total) = (0, 0);
    for y in 0..h {
        for x in shift + 2..w - 2 {
            assert_eq!(cl.cost(shift, y, x), 0.0, "left ({y},{x})");
            hits += usize::from(wl.get(y, x) == Some(shift as f64));
            total += 1;
        }
        for x in 2..w - shift - 2 {
            assert_eq!(cr.cost(shift, y, x), 0.0, "right ({y},{x})");
            hits += usize::from(wr.get(y, x) == Some(shift as f64));
            total += 1;
        }
    }
    assert!(hits as f64 >= 0.97 * total as f64, "{hits}/{total}");
}

#[test]
fn wta_takes_first_minimum() {
    let v = Tensor::new(&[3, 1, 2], vec![0.2, 0.3, 0.2, 0.1, 0.5, 0.1]).unwrap();
    let wta = wta_disparity(&CostVolume::new(View::Left, v).unwrap());
    assert_eq!(wta.values(), &[0.0, 1.0]);
}

#[test]
fn normalization_spans_unit_interval() {
    let (cl, _) = census_cost_volume(&noise_image(8, 16, 3), &noise_image(8, 16, 5), 6, 5).unwrap();
    let n = normalize_cost_volume(&cl);
    let lo = n.values().data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = n.values().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));
    assert_eq!(wta_disparity(&n), wta_disparity(&cl));
}
