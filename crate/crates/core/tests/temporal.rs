mod common;

use evpose_core::temporal::{es_seq, slice_assign, EtscParams, PointFeatures, SliceTokens};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_features(rng: &mut impl Rng, c: usize, n: usize) -> PointFeatures {
    let feat = (0..c * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let t = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    PointFeatures::new(c, feat, t).unwrap()
}

fn random_tokens(rng: &mut impl Rng, k: usize, c: usize) -> SliceTokens {
    SliceTokens::new(k, c, (0..k * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Residual block written as explicit sums over taps.
fn etsc_oracle(p: &EtscParams, x: &SliceTokens) -> Vec<f64> {
    let (k, c) = (x.k() as isize, x.channels());
    let conv = |w: &[f64], b: &[f64], d: isize, inp: &dyn Fn(isize, usize) -> f64, s: isize, o: usize| {
        let mut acc = b[o];
        for i in 0..c {
            for j in 0..3isize {
                let src = s + (j - 1) * d;
                if (0..k).contains(&src) {
                    acc += w[(o * c + i) * 3 + j as usize] * inp(src, i);
                }
            }
        }
        acc
    };
    let xin = |s: isize, i: usize| x.get(s as usize, i);
    let hidden: Vec<f64> = (0..k)
        .flat_map(|s| (0..c).map(move |o| (s, o)))
        .map(|(s, o)| conv(&p.conv1.weight, &p.conv1.bias, 1, &xin, s, o).max(0.0))
        .collect();
    let hin = |s: isize, i: usize| hidden[s as usize * c + i];
    (0..k)
        .flat_map(|s| (0..c).map(move |o| (s, o)))
        .map(|(s, o)| x.get(s as usize, o) + conv(&p.conv2.weight, &p.conv2.bias, 2, &hin, s, o))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn es_seq_ignores_point_order(seed in any::<u64>(), n in 1usize..200, k in 1usize..7) {
        let mut rng = common::rng(seed);
        let pf = random_features(&mut rng, 5, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let feat = (0..5).flat_map(|c| perm.iter().map(move |&i| (c, i))).map(|(c, i)| pf.get(c, i)).collect();
        let t = perm.iter().map(|&i| pf.t_avg()[i]).collect();
        let shuffled = PointFeatures::new(5, feat, t).unwrap();
        prop_assert_eq!(es_seq(&pf, k).unwrap(), es_seq(&shuffled, k).unwrap());
    }

    #[test]
    fn es_seq_is_slice_local(seed in any::<u64>(), n in 1usize..200, k in 2usize..7) {
        let mut rng = common::rng(seed);
        let pf = random_features(&mut rng, 3, n);
        let slices = slice_assign(pf.t_avg(), k).unwrap();
        let victim = rng.random_range(0..n);
        let mut feat = pf.feat().to_vec();
        for c in 0..3 {
            feat[c * n + victim] += 100.0;
        }
        let bumped = PointFeatures::new(3, feat, pf.t_avg().to_vec()).unwrap();
        let (a, b) = (es_seq(&pf, k).unwrap(), es_seq(&bumped, k).unwrap());
        for s in 0..k {
            if s != slices[victim] {
                prop_assert_eq!(a.row(s), b.row(s));
            }
        }
    }

    #[test]
    fn etsc_matches_oracle(seed in any::<u64>(), k in 1usize..9, c in 1usize..9) {
        let mut rng = common::rng(seed);
        let p = EtscParams::init(c, seed);
        let x = random_tokens(&mut rng, k, c);
        let y = p.forward(&x).unwrap();
        prop_assert_eq!((y.k(), y.channels()), (k, c));
        for (a, b) in y.data().iter().zip(etsc_oracle(&p, &x)) {
            prop_assert!(common::rel_err(*a, b) < 1e-10 || (a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn etsc_receptive_field_is_three(seed in any::<u64>(), at in 0usize..12) {
        let mut rng = common::rng(seed);
        let (k, c) = (12, 4);
        let p = EtscParams::init(c, seed ^ 1);
        let x = random_tokens(&mut rng, k, c);
        let mut data = x.data().to_vec();
        for v in &mut data[at * c..(at + 1) * c] {
            *v += rng.random_range(1.0..5.0);
        }
        let x2 = SliceTokens::new(k, c, data).unwrap();
        let (y, y2) = (p.forward(&x).unwrap(), p.forward(&x2).unwrap());
        for s in 0..k {
            if s.abs_diff(at) > 3 {
                prop_assert_eq!(y.row(s), y2.row(s));
            }
        }
    }
}

#[test]
fn zero_weights_give_exact_identity() {
    let mut rng = common::rng(3);
    let x = random_tokens(&mut rng, 4, 64);
    let y = EtscParams::zeros(64).forward(&x).unwrap();
    assert_eq!(y, x);
}

#[test]
fn batch_forward_matches_single() {
    let mut rng = common::rng(4);
    let p = EtscParams::init(6, 9);
    let batch: Vec<SliceTokens> = (0..5).map(|_| random_tokens(&mut rng, 4, 6)).collect();
    let out = p.forward_batch(&batch).unwrap();
    for (x, y) in batch.iter().zip(&out) {
        assert_eq!(&p.forward(x).unwrap(), y);
    }
}
