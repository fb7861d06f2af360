//! Central finite-difference verification of the hand-written backward passes.
//!
//! Each check builds a random instance, defines a scalar loss `L = sum(r * y)`
//! with fixed random `r`, and compares the analytic gradient of every input
//! and parameter coordinate against `(L(x + h) - L(x - h)) / 2h`.
//!
//! Kink rule: a coordinate is excluded when the probe changes any discrete
//! state of the pass (a ReLU sign, a max selection or a slice id) on either
//! side, because the finite difference then straddles a non-differentiable
//! point. A ReLU input sitting exactly at zero is always excluded this way.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backward::{backward, forward_cached, pointwise_backward, pointwise_cached};
use super::{Linear, MicroNetConfig, MicroNetParams, INPUT_DIM};
use crate::error::{invalid, Error, Result};
use crate::temporal::{EtscParams, SliceTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Linear,
    Relu,
    EtscForward,
    PointwiseFeatures,
    Forward,
}

impl GradOp {
    pub const ALL: [GradOp; 5] = [
        GradOp::Linear,
        GradOp::Relu,
        GradOp::EtscForward,
        GradOp::PointwiseFeatures,
        GradOp::Forward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Linear => "linear",
            GradOp::Relu => "relu",
            GradOp::EtscForward => "etsc_forward",
            GradOp::PointwiseFeatures => "pointwise_features",
            GradOp::Forward => "forward",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| invalid(format!("unknown differentiable op {s:?}")))
    }
}

/// Size of the random instance and the comparison thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub points: usize,
    pub channels: usize,
    pub hidden: [usize; 2],
    pub joints: usize,
    pub w_bins: usize,
    pub h_bins: usize,
    pub k: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates whose gradient magnitude is at or below this are skipped.
    pub grad_floor: f64,
    /// Places one ReLU input exactly on the kink (`relu` op only).
    pub probe_relu_at_zero: bool,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            points: 24,
            channels: 6,
            hidden: [8, 12],
            joints: 2,
            w_bins: 7,
            h_bins: 5,
            k: 4,
            step: 1e-5,
            tolerance: 1e-4,
            grad_floor: 1e-8,
            probe_relu_at_zero: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: GradOp,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped by the kink rule.
    pub excluded: usize,
    /// Coordinates skipped for having a negligible gradient.
    pub negligible: usize,
    pub pass: bool,
}

type Eval<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<i64>)> + 'a;

fn compare(
    op: GradOp,
    seed: u64,
    spec: &InstanceSpec,
    x0: &[f64],
    analytic: &[f64],
    eval: &Eval,
) -> Result<GradCheckReport> {
    let (_, base) = eval(x0)?;
    let mut report = GradCheckReport {
        op,
        seed,
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        negligible: 0,
        pass: false,
    };
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + spec.step;
        let plus = eval(&x);
        x[i] = x0[i] - spec.step;
        let minus = eval(&x);
        x[i] = x0[i];
        let (lp, lm) = match (plus, minus) {
            (Ok((lp, pp)), Ok((lm, pm))) if pp == base && pm == base => (lp, lm),
            _ => {
                report.excluded += 1;
                continue;
            }
        };
        let numeric = (lp - lm) / (2.0 * spec.step);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale <= spec.grad_floor {
            report.negligible += 1;
            continue;
        }
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max((analytic[i] - numeric).abs() / scale);
    }
    report.pass = report.max_rel_err < spec.tolerance;
    Ok(report)
}

/// Positive MLP biases keep most units off the ReLU floor, so the check
/// compares many non-zero gradients instead of confirming zeros on dead
/// units (with a handful of output channels a whole layer can die).
fn live_instance(mut params: MicroNetParams<f64>, rng: &mut ChaCha8Rng) -> MicroNetParams<f64> {
    for layer in &mut params.mlp {
        for b in &mut layer.bias {
            *b = rng.random_range(0.0..0.5);
        }
    }
    params
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random normalized network input, `5 x N` channel-major, in the ranges
/// produced by `normalize_input`.
pub fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(INPUT_DIM * n);
    v.extend(uniform(rng, n, 0.0, 1.0));
    v.extend(uniform(rng, n, 0.0, 1.0));
    v.extend(uniform(rng, n, 0.02, 0.98));
    v.extend(uniform(rng, n, -0.5, 0.5));
    v.extend(uniform(rng, n, std::f64::consts::LN_2, 6f64.ln()));
    v
}

fn net_config(spec: &InstanceSpec) -> MicroNetConfig {
    MicroNetConfig {
        hidden: spec.hidden,
        channels: spec.channels,
        joints: spec.joints,
        w_bins: spec.w_bins,
        h_bins: spec.h_bins,
    }
}

/// Compares analytic and finite-difference gradients for `op`.
pub fn grad_check(op: GradOp, spec: &InstanceSpec, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        GradOp::Linear => {
            let (din, dout) = (5, 4);
            let x = uniform(&mut rng, din, -1.0, 1.0);
            let w = uniform(&mut rng, din * dout, -1.0, 1.0);
            let b = uniform(&mut rng, dout, -1.0, 1.0);
            let r = uniform(&mut rng, dout, -1.0, 1.0);
            let unpack = |flat: &[f64]| {
                let mut l = Linear::zeros(din, dout);
                l.weight.copy_from_slice(&flat[din..din + din * dout]);
                l.bias.copy_from_slice(&flat[din + din * dout..]);
                (flat[..din].to_vec(), l)
            };
            let x0: Vec<f64> = [x.as_slice(), &w, &b].concat();
            let eval = |flat: &[f64]| -> Result<(f64, Vec<i64>)> {
                let (x, l) = unpack(flat);
                Ok((dot(&r, &l.apply(&x)), Vec::new()))
            };
            let mut analytic = vec![0.0; x0.len()];
            for o in 0..dout {
                for i in 0..din {
                    analytic[i] += r[o] * w[o * din + i];
                    analytic[din + o * din + i] = r[o] * x[i];
                }
                analytic[din + din * dout + o] = r[o];
            }
            compare(op, seed, spec, &x0, &analytic, &eval)
        }
        GradOp::Relu => {
            let mut x = uniform(&mut rng, 8, -1.0, 1.0);
            if spec.probe_relu_at_zero {
                x[0] = 0.0;
            }
            let r = uniform(&mut rng, 8, -1.0, 1.0);
            let eval = |v: &[f64]| -> Result<(f64, Vec<i64>)> {
                let y: Vec<f64> = v.iter().map(|a| a.max(0.0)).collect();
                let pattern = v.iter().map(|&a| (a > 0.0) as i64 - (a < 0.0) as i64).collect();
                Ok((dot(&r, &y), pattern))
            };
            let analytic: Vec<f64> = x.iter().zip(&r).map(|(a, g)| if *a > 0.0 { *g } else { 0.0 }).collect();
            compare(op, seed, spec, &x, &analytic, &eval)
        }
        GradOp::EtscForward => {
            let (k, c) = (spec.k, spec.channels);
            let tokens = uniform(&mut rng, k * c, -1.0, 1.0);
            let params = EtscParams::init(c, rng.random());
            let r = uniform(&mut rng, k * c, -1.0, 1.0);
            let x0: Vec<f64> = [tokens.as_slice(), &params.to_flat()].concat();
            let eval = |flat: &[f64]| -> Result<(f64, Vec<i64>)> {
                let t = SliceTokens::new(k, c, flat[..k * c].to_vec())?;
                let p = EtscParams::from_flat(c, &flat[k * c..])?;
                let (y, cache) = p.forward_cached(&t)?;
                let pattern = cache
                    .pre_relu
                    .iter()
                    .map(|&v| (v > 0.0) as i64 - (v < 0.0) as i64)
                    .collect();
                Ok((dot(&r, y.data()), pattern))
            };
            let t = SliceTokens::new(k, c, tokens.clone())?;
            let (_, cache) = params.forward_cached(&t)?;
            let (dx, grads) = params.backward(&t, &cache, &r);
            let analytic: Vec<f64> = [dx.as_slice(), &grads.to_flat()].concat();
            compare(op, seed, spec, &x0, &analytic, &eval)
        }
        GradOp::PointwiseFeatures => {
            let n = spec.points;
            let cfg = net_config(spec);
            let input = random_input(&mut rng, n);
            let params = live_instance(MicroNetParams::init(&cfg, rng.random())?, &mut rng);
            let r = uniform(&mut rng, spec.channels * n, -1.0, 1.0);
            let x0: Vec<f64> = [input.as_slice(), &params.to_flat()].concat();
            let split = INPUT_DIM * n;
            let eval = |flat: &[f64]| -> Result<(f64, Vec<i64>)> {
                let p = MicroNetParams::from_flat(&cfg, &flat[split..])?;
                let cache = pointwise_cached(&flat[..split], n, &p)?;
                Ok((dot(&r, &cache.features(cfg.channels)), cache.pattern()))
            };
            let cache = pointwise_cached(&input, n, &params)?;
            let mut grads = MicroNetParams::zeros(&cfg)?;
            let d_input = pointwise_backward(&cache, &params, &r, &mut grads.mlp);
            let analytic: Vec<f64> = [d_input.as_slice(), &grads.to_flat()].concat();
            compare(op, seed, spec, &x0, &analytic, &eval)
        }
        GradOp::Forward => {
            let n = spec.points;
            let cfg = net_config(spec);
            let input = random_input(&mut rng, n);
            let params = live_instance(MicroNetParams::init(&cfg, rng.random())?, &mut rng);
            let etsc = EtscParams::init(cfg.channels, rng.random());
            let r = uniform(&mut rng, cfg.joints * (cfg.w_bins + cfg.h_bins), -1.0, 1.0);
            let net_len = params.param_count();
            let split = INPUT_DIM * n;
            let x0: Vec<f64> = [input.as_slice(), &params.to_flat(), &etsc.to_flat()].concat();
            let eval = |flat: &[f64]| -> Result<(f64, Vec<i64>)> {
                let (inp, rest) = flat.split_at(split);
                let p = MicroNetParams::from_flat(&cfg, &rest[..net_len])?;
                let e = EtscParams::from_flat(cfg.channels, &rest[net_len..])?;
                let t_avg = &inp[2 * n..3 * n];
                let cache = forward_cached(inp, t_avg, &p, &e, spec.k)?;
                Ok((dot(&r, &cache.head_out), cache.pattern()))
            };
            let cache = forward_cached(&input, &input[2 * n..3 * n], &params, &etsc, spec.k)?;
            // slice ids are piecewise constant in t_avg: only the direct
            // input path carries gradient
            let g = backward(&cache, &params, &etsc, &r);
            let analytic: Vec<f64> = [g.input.as_slice(), &g.net.to_flat(), &g.etsc.to_flat()].concat();
            compare(op, seed, spec, &x0, &analytic, &eval)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_tight() {
        let r = grad_check(GradOp::Linear, &InstanceSpec::default(), 3).unwrap();
        assert!(r.pass && r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn relu_off_kink_passes() {
        let r = grad_check(GradOp::Relu, &InstanceSpec::default(), 5).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let spec = InstanceSpec {
            probe_relu_at_zero: true,
            ..Default::default()
        };
        let r = grad_check(GradOp::Relu, &spec, 5).unwrap();
        assert_eq!(r.excluded, 1);
        assert!(r.pass);
    }

    #[test]
    fn backbone_ops_pass() {
        for op in [GradOp::EtscForward, GradOp::PointwiseFeatures, GradOp::Forward] {
            let r = grad_check(op, &InstanceSpec::default(), 1).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.checked > 50, "{r:?}");
        }
    }

    #[test]
    fn unknown_op() {
        assert!("conv3d".parse::<GradOp>().is_err());
        assert_eq!("etsc_forward".parse::<GradOp>().unwrap(), GradOp::EtscForward);
    }
}
