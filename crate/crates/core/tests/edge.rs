mod common;

use evpose_core::edge::{edge_map, enhance, enhance_cloud, sobel_gradients, Border, EdgeParams};
use evpose_core::raster::{rasterize, to_point_cloud};
use evpose_core::{Event, TimeWindow, VoxelGrid};
use proptest::prelude::*;
use rand::Rng;

const W: u16 = 23;
const H: u16 = 15;

fn grid(seed: u64, n: usize, k: usize) -> (Vec<Event>, VoxelGrid) {
    let mut rng = common::rng(seed);
    let events = common::random_events(&mut rng, n, W, H, 0, 1000);
    let g = rasterize(&events, TimeWindow::new(0, 1000).unwrap(), W, H, k).unwrap();
    (events, g)
}

/// Explicitly padded map, then a straight 3x3 cross-correlation.
fn correlate(map: &[f64], w: usize, h: usize, border: Border) -> (Vec<f64>, Vec<f64>) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let pw = w + 2;
    let mut pad = vec![0.0; pw * (h + 2)];
    for py in 0..h + 2 {
        for px in 0..pw {
            let inside = (1..=w).contains(&px) && (1..=h).contains(&py);
            pad[py * pw + px] = match (inside, border) {
                (true, _) => map[(py - 1) * w + px - 1],
                (false, Border::Zero) => 0.0,
                (false, Border::Replicate) => {
                    let x = px.clamp(1, w) - 1;
                    let y = py.clamp(1, h) - 1;
                    map[y * w + x]
                }
            };
        }
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            for i in 0..3 {
                for j in 0..3 {
                    let v = pad[(y + i) * pw + x + j];
                    gx[y * w + x] += kx[i][j] * v;
                    gy[y * w + x] += ky[i][j] * v;
                }
            }
        }
    }
    (gx, gy)
}

#[test]
fn sobel_matches_padded_correlation() {
    let mut rng = common::rng(5);
    for border in [Border::Zero, Border::Replicate] {
        for _ in 0..30 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let map: Vec<f64> = (0..w * h).map(|_| rng.random_range(-50.0..50.0)).collect();
            let (gx, gy) = sobel_gradients(&map, w, h, border).unwrap();
            let (ox, oy) = correlate(&map, w, h, border);
            for i in 0..w * h {
                assert!((gx[i] - ox[i]).abs() <= 1e-12 * ox[i].abs().max(1.0));
                assert!((gy[i] - oy[i]).abs() <= 1e-12 * oy[i].abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enhancement_bounds_and_sign(seed in any::<u64>(), n in 1usize..800, k in 1usize..5, zero in any::<bool>()) {
        let border = if zero { Border::Zero } else { Border::Replicate };
        let params = EdgeParams::new(0.5, 1e-8, border).unwrap();
        let (_, g) = grid(seed, n, k);
        for s in edge_map(&g, &params).slices {
            for e in s {
                prop_assert!((0.0..1.0).contains(&e));
            }
        }
        let out = enhance(&g, &params);
        for idx in 0..g.cells().len() {
            let (before, after) = (g.p_acc(idx), out.p_acc(idx));
            prop_assert!(after.abs() <= 1.5 * before.abs());
            prop_assert!(after.abs() >= before.abs());
            prop_assert_eq!(after.signum() * before.signum() >= 0.0, true);
            prop_assert_eq!(after == 0.0, before == 0.0);
        }
    }

    #[test]
    fn slices_are_enhanced_independently(seed in any::<u64>(), n in 1usize..400) {
        let params = EdgeParams::default();
        let (events, g) = grid(seed, n, 2);
        // only events in the first half of the window feed slice 0
        let first: Vec<Event> = events.iter().copied().filter(|e| e.t < 500).collect();
        let g0 = rasterize(&first, g.window(), W, H, 2).unwrap();
        let (a, b) = (edge_map(&g, &params), edge_map(&g0, &params));
        prop_assert_eq!(&a.slices[0], &b.slices[0]);
    }

    #[test]
    fn normalized_edges_scale_invariant(seed in any::<u64>(), n in 1usize..400) {
        let params = EdgeParams::new(0.5, 1e-12, Border::Replicate).unwrap();
        let (events, g) = grid(seed, n, 1);
        let tenfold: Vec<Event> = events.iter().flat_map(|&e| std::iter::repeat_n(e, 10)).collect();
        let g10 = rasterize(&tenfold, g.window(), W, H, 1).unwrap();
        let (a, b) = (edge_map(&g, &params), edge_map(&g10, &params));
        for (x, y) in a.slices[0].iter().zip(&b.slices[0]) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_alpha_is_identity_on_grids_and_clouds() {
    let params = EdgeParams::new(0.0, 1e-8, Border::Replicate).unwrap();
    for seed in 0..10 {
        let (_, g) = grid(seed, 500, 4);
        let out = enhance(&g, &params);
        assert_eq!(out, g);
        for idx in 0..g.cells().len() {
            assert_eq!(out.p_acc(idx).to_bits(), g.p_acc(idx).to_bits());
        }
        let cloud = to_point_cloud(&g);
        assert_eq!(enhance_cloud(&cloud, &params).unwrap(), cloud);
    }
}
