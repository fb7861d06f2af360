//! PointNet-style toy backbone with slice-token temporal fusion and
//! coordinate-classification (SimDR) heads.
//!
//! Per point: `5 -> h1 -> h2 -> C`, each layer linear + ReLU, no batch norm.
//! The per-point feature map feeds both the global max/mean pools and the
//! slice tokenizer; the fused `3C` vector goes through one linear head that
//! emits `J * (W_bins + H_bins)` logits.

mod backward;
pub mod gradcheck;

pub use backward::{
    backward, forward_cached, pointwise_backward, pointwise_cached, ForwardCache, NetGrads, PointwiseCache,
};
pub use gradcheck::{grad_check, GradCheckReport, GradOp, InstanceSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{Joint2D, Pose2D};
use crate::raster::RasterCloud;
use crate::real::Real;
use crate::temporal::{es_seq_with_slices, fuse, slice_assign, temporal_global, EtscParams, PointFeatures};

/// Input features per point: x, y, t_avg, p_acc, e_cnt.
pub const INPUT_DIM: usize = 5;

/// Divisor applied to `p_acc` before it enters the network.
pub const POLARITY_SCALE: f64 = 10.0;

/// Fully connected layer, `weight[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f64> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    #[inline]
    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *y = row.iter().zip(x).fold(self.bias[o], |acc, (&w, &v)| acc + w * v);
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_dim];
        self.apply_into(x, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self
                .weight
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                .collect(),
            bias: self
                .bias
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl Linear<f64> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Self::zeros(in_dim, out_dim);
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = rng.random_range(-bound..=bound);
        }
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroNetConfig {
    pub hidden: [usize; 2],
    pub channels: usize,
    pub joints: usize,
    pub w_bins: usize,
    pub h_bins: usize,
}

impl Default for MicroNetConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 128],
            channels: 64,
            joints: 13,
            w_bins: usize::from(crate::DEFAULT_SENSOR_WIDTH),
            h_bins: usize::from(crate::DEFAULT_SENSOR_HEIGHT),
        }
    }
}

impl MicroNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.channels == 0 || self.joints == 0 {
            return Err(invalid("layer widths and joint count must be >= 1"));
        }
        if self.w_bins == 0 || self.h_bins == 0 {
            return Err(invalid("bin counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNetParams<T = f64> {
    /// Shared per-point layers, each followed by ReLU.
    pub mlp: [Linear<T>; 3],
    pub head: Linear<T>,
    pub joints: usize,
    pub w_bins: usize,
    pub h_bins: usize,
}

impl MicroNetParams<f64> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a seeded ChaCha8 stream.
    pub fn init(cfg: &MicroNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2] = cfg.hidden;
        let mlp = [
            Linear::init(INPUT_DIM, h1, &mut rng),
            Linear::init(h1, h2, &mut rng),
            Linear::init(h2, cfg.channels, &mut rng),
        ];
        let head = Linear::init(3 * cfg.channels, cfg.joints * (cfg.w_bins + cfg.h_bins), &mut rng);
        Ok(Self {
            mlp,
            head,
            joints: cfg.joints,
            w_bins: cfg.w_bins,
            h_bins: cfg.h_bins,
        })
    }

    /// Layers in file order: mlp0, mlp1, mlp2, head; weight then bias each.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn from_flat(cfg: &MicroNetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if flat.len() != p.param_count() {
            return Err(shape(format!(
                "{} values for a network with {} parameters",
                flat.len(),
                p.param_count()
            )));
        }
        let mut rest = flat;
        for l in p.mlp.iter_mut().chain(std::iter::once(&mut p.head)) {
            let (w, r) = rest.split_at(l.weight.len());
            l.weight.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(p)
    }
}

impl<T: Real> MicroNetParams<T> {
    pub fn zeros(cfg: &MicroNetConfig) -> Result<Self> {
        cfg.validate()?;
        let [h1, h2] = cfg.hidden;
        Ok(Self {
            mlp: [
                Linear::zeros(INPUT_DIM, h1),
                Linear::zeros(h1, h2),
                Linear::zeros(h2, cfg.channels),
            ],
            head: Linear::zeros(3 * cfg.channels, cfg.joints * (cfg.w_bins + cfg.h_bins)),
            joints: cfg.joints,
            w_bins: cfg.w_bins,
            h_bins: cfg.h_bins,
        })
    }

    pub fn config(&self) -> MicroNetConfig {
        MicroNetConfig {
            hidden: [self.mlp[0].out_dim, self.mlp[1].out_dim],
            channels: self.channels(),
            joints: self.joints,
            w_bins: self.w_bins,
            h_bins: self.h_bins,
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp[2].out_dim
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        self.mlp.iter().chain(std::iter::once(&self.head))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Linear::param_count).sum()
    }

    /// Checks that layer shapes chain and the head matches the bin layout.
    pub fn check_shapes(&self) -> Result<()> {
        let dims = [INPUT_DIM, self.mlp[0].out_dim, self.mlp[1].out_dim];
        for (l, &d) in self.mlp.iter().zip(&dims) {
            if l.in_dim != d || l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(shape("per-point layers do not chain"));
            }
        }
        let out = self.joints * (self.w_bins + self.h_bins);
        if self.head.in_dim != 3 * self.channels() || self.head.out_dim != out {
            return Err(shape(format!(
                "head is {}x{}, expected {}x{out}",
                self.head.in_dim,
                self.head.out_dim,
                3 * self.channels()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MicroNetParams<U> {
        MicroNetParams {
            mlp: [self.mlp[0].cast(), self.mlp[1].cast(), self.mlp[2].cast()],
            head: self.head.cast(),
            joints: self.joints,
            w_bins: self.w_bins,
            h_bins: self.h_bins,
        }
    }
}

/// Network input for a cloud: `5 x N`, channel-major, with x and y scaled
/// by the sensor size, `p_acc / 10` and `ln(1 + e_cnt)`.
pub fn normalize_input<T: Real>(cloud: &RasterCloud) -> Vec<T> {
    let n = cloud.len();
    let (w, h) = (f64::from(cloud.width), f64::from(cloud.height));
    let mut x = vec![T::zero(); INPUT_DIM * n];
    for (i, p) in cloud.points.iter().enumerate() {
        let row = [
            f64::from(p.x) / w,
            f64::from(p.y) / h,
            p.t_avg,
            p.p_acc / POLARITY_SCALE,
            f64::from(p.e_cnt).ln_1p(),
        ];
        for (c, v) in row.into_iter().enumerate() {
            x[c * n + i] = T::from_f64_lossy(v);
        }
    }
    x
}

/// Applies the shared per-point MLP to a `5 x N` input.
pub fn pointwise_features<T: Real>(input: &[T], t_avg: &[f64], params: &MicroNetParams<T>) -> Result<PointFeatures<T>> {
    params.check_shapes()?;
    let n = t_avg.len();
    if input.len() != INPUT_DIM * n {
        return Err(shape(format!("input has {} values for {INPUT_DIM} x {n}", input.len())));
    }
    let c_out = params.channels();
    let mut feat = vec![T::zero(); c_out * n];
    let mut x = [T::zero(); INPUT_DIM];
    let mut h1 = vec![T::zero(); params.mlp[0].out_dim];
    let mut h2 = vec![T::zero(); params.mlp[1].out_dim];
    let mut f = vec![T::zero(); c_out];
    for i in 0..n {
        for (c, xv) in x.iter_mut().enumerate() {
            *xv = input[c * n + i];
        }
        params.mlp[0].apply_into(&x, &mut h1);
        relu_in_place(&mut h1);
        params.mlp[1].apply_into(&h1, &mut h2);
        relu_in_place(&mut h2);
        params.mlp[2].apply_into(&h2, &mut f);
        relu_in_place(&mut f);
        for (c, &v) in f.iter().enumerate() {
            feat[c * n + i] = v;
        }
    }
    PointFeatures::new(c_out, feat, t_avg.to_vec())
}

#[inline]
fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::zero());
    }
}

/// Column-wise max and mean over points. The mean sums the values in
/// ascending order so the result does not depend on point order.
pub fn global_pool<T: Real>(pf: &PointFeatures<T>) -> Result<(Vec<T>, Vec<T>)> {
    if pf.points() == 0 {
        return Err(invalid("global pooling needs at least one point"));
    }
    let n = T::from_usize(pf.points()).expect("point count fits");
    let mut g_max = Vec::with_capacity(pf.channels());
    let mut g_avg = Vec::with_capacity(pf.channels());
    for c in 0..pf.channels() {
        let row = pf.channel(c);
        g_max.push(row[1..].iter().fold(row[0], |m, &v| if v > m { v } else { m }));
        let mut sorted = row.to_vec();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        g_avg.push(sorted.into_iter().sum::<T>() / n);
    }
    Ok((g_max, g_avg))
}

/// Per-joint 1-D logits over horizontal and vertical bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SimdrLogits<T = f64> {
    pub joints: usize,
    pub w_bins: usize,
    pub h_bins: usize,
    /// `joints x w_bins`
    pub x: Vec<T>,
    /// `joints x h_bins`
    pub y: Vec<T>,
}

impl<T: Real> SimdrLogits<T> {
    /// Splits a head output laid out as `[x_0, y_0, x_1, y_1, ...]` per joint.
    pub fn from_head(raw: &[T], joints: usize, w_bins: usize, h_bins: usize) -> Result<Self> {
        let stride = w_bins + h_bins;
        if raw.len() != joints * stride {
            return Err(shape(format!(
                "{} logits for {joints} joints x {stride} bins",
                raw.len()
            )));
        }
        let mut x = Vec::with_capacity(joints * w_bins);
        let mut y = Vec::with_capacity(joints * h_bins);
        for chunk in raw.chunks_exact(stride) {
            x.extend_from_slice(&chunk[..w_bins]);
            y.extend_from_slice(&chunk[w_bins..]);
        }
        Ok(Self {
            joints,
            w_bins,
            h_bins,
            x,
            y,
        })
    }

    pub fn joint_x(&self, j: usize) -> &[T] {
        &self.x[j * self.w_bins..(j + 1) * self.w_bins]
    }

    pub fn joint_y(&self, j: usize) -> &[T] {
        &self.y[j * self.h_bins..(j + 1) * self.h_bins]
    }
}

/// Runs the whole network on one cloud.
pub fn forward<T: Real>(
    cloud: &RasterCloud,
    params: &MicroNetParams<T>,
    etsc: &EtscParams<T>,
    k: usize,
) -> Result<SimdrLogits<T>> {
    let input = normalize_input::<T>(cloud);
    let t_avg: Vec<f64> = cloud.points.iter().map(|p| p.t_avg).collect();
    forward_input(&input, &t_avg, params, etsc, k)
}

/// Forward pass from an already normalized `5 x N` input.
pub fn forward_input<T: Real>(
    input: &[T],
    t_avg: &[f64],
    params: &MicroNetParams<T>,
    etsc: &EtscParams<T>,
    k: usize,
) -> Result<SimdrLogits<T>> {
    if etsc.channels() != params.channels() {
        return Err(shape(format!(
            "temporal block has {} channels, backbone emits {}",
            etsc.channels(),
            params.channels()
        )));
    }
    let pf = pointwise_features(input, t_avg, params)?;
    let (g_max, g_avg) = global_pool(&pf)?;
    let slices = slice_assign(t_avg, k)?;
    let (tokens, _) = es_seq_with_slices(&pf, &slices, k)?;
    let refined = etsc.forward(&tokens)?;
    let t_global = temporal_global(&refined);
    let fused = fuse(&g_max, &g_avg, &t_global)?;
    let raw = params.head.apply(fused.values());
    SimdrLogits::from_head(&raw, params.joints, params.w_bins, params.h_bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Highest bin, lowest index on ties.
    #[default]
    Argmax,
    /// Expected bin under the softmax distribution.
    Soft,
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn soft_expectation<T: Real>(v: &[T]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64().unwrap()));
    let (mut num, mut den) = (0.0, 0.0);
    for (i, x) in v.iter().enumerate() {
        let e = (x.to_f64().unwrap() - m).exp();
        num += e * i as f64;
        den += e;
    }
    num / den
}

/// Converts bin logits to pixel coordinates on a `width x height` sensor.
pub fn simdr_decode<T: Real>(logits: &SimdrLogits<T>, width: u16, height: u16, mode: DecodeMode) -> Result<Pose2D> {
    if logits.w_bins == 0 || logits.h_bins == 0 {
        return Err(invalid("bin counts must be >= 1"));
    }
    if logits.x.iter().chain(&logits.y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SimDR logits".into()));
    }
    let sx = f64::from(width) / logits.w_bins as f64;
    let sy = f64::from(height) / logits.h_bins as f64;
    let joints = (0..logits.joints)
        .map(|j| {
            let (bx, by) = match mode {
                DecodeMode::Argmax => (argmax(logits.joint_x(j)) as f64, argmax(logits.joint_y(j)) as f64),
                DecodeMode::Soft => (soft_expectation(logits.joint_x(j)), soft_expectation(logits.joint_y(j))),
            };
            Joint2D {
                u: bx * sx,
                v: by * sy,
                valid: true,
            }
        })
        .collect();
    Ok(Pose2D { joints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterPoint;

    fn small_cfg() -> MicroNetConfig {
        MicroNetConfig {
            hidden: [8, 12],
            channels: 6,
            joints: 3,
            w_bins: 10,
            h_bins: 8,
        }
    }

    fn cloud(n: usize) -> RasterCloud {
        RasterCloud {
            points: (0..n)
                .map(|i| RasterPoint {
                    x: (i * 7 % 10) as u16,
                    y: (i * 3 % 8) as u16,
                    slice: 0,
                    t_avg: (i as f64 + 0.5) / n as f64,
                    p_acc: if i % 2 == 0 { 2.0 } else { -1.0 },
                    e_cnt: 1 + (i % 4) as u32,
                })
                .collect(),
            width: 10,
            height: 8,
            k: 4,
            window: None,
        }
    }

    #[test]
    fn duplicate_points_identical_columns() {
        let p = MicroNetParams::init(&small_cfg(), 1).unwrap();
        let mut c = cloud(5);
        c.points[3] = c.points[1];
        let t: Vec<f64> = c.points.iter().map(|p| p.t_avg).collect();
        let pf = pointwise_features(&normalize_input::<f64>(&c), &t, &p).unwrap();
        for ch in 0..6 {
            assert_eq!(pf.get(ch, 1), pf.get(ch, 3));
        }
    }

    #[test]
    fn zero_weights_zero_features_and_logits() {
        let p = MicroNetParams::<f64>::zeros(&small_cfg()).unwrap();
        let c = cloud(9);
        let t: Vec<f64> = c.points.iter().map(|p| p.t_avg).collect();
        let pf = pointwise_features(&normalize_input::<f64>(&c), &t, &p).unwrap();
        assert!(pf.feat().iter().all(|&v| v == 0.0));

        let mut p = MicroNetParams::init(&small_cfg(), 2).unwrap();
        p.head = Linear::zeros(p.head.in_dim, p.head.out_dim);
        let l = forward(&c, &p, &EtscParams::init(6, 3), 4).unwrap();
        assert!(l.x.iter().chain(&l.y).all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_cases() {
        let pf = PointFeatures::new(2, vec![1.5, -3.0], vec![0.2]).unwrap();
        assert_eq!(global_pool(&pf).unwrap(), (vec![1.5, -3.0], vec![1.5, -3.0]));
        let pf = PointFeatures::new(2, vec![1.5, -1.5, -3.0, 3.0], vec![0.2, 0.7]).unwrap();
        assert_eq!(global_pool(&pf).unwrap(), (vec![1.5, 3.0], vec![0.0, 0.0]));
        let empty = PointFeatures::<f64>::new(2, vec![], vec![]).unwrap();
        assert!(global_pool(&empty).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = MicroNetParams::init(&small_cfg(), 1).unwrap();
        assert!(pointwise_features(&[0.0; 7], &[0.5], &p).is_err());
        let c = cloud(4);
        assert!(forward(&c, &p, &EtscParams::init(5, 1), 4).is_err());
        let mut bad = p.clone();
        bad.head = Linear::zeros(17, 54);
        assert!(bad.check_shapes().is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let p = MicroNetParams::init(&small_cfg(), 4).unwrap();
        assert_eq!(MicroNetParams::from_flat(&small_cfg(), &p.to_flat()).unwrap(), p);
    }

    #[test]
    fn decode_one_hot_and_ties() {
        let mut l = SimdrLogits::<f64> {
            joints: 1,
            w_bins: 346,
            h_bins: 260,
            x: vec![0.0; 346],
            y: vec![0.0; 260],
        };
        l.x[123] = 1.0;
        l.y[45] = 2.0;
        let p = simdr_decode(&l, 346, 260, DecodeMode::Argmax).unwrap();
        assert_eq!((p.joints[0].u, p.joints[0].v), (123.0, 45.0));

        l.x.fill(0.25);
        let p = simdr_decode(&l, 346, 260, DecodeMode::Argmax).unwrap();
        assert_eq!(p.joints[0].u, 0.0);

        l.y[7] = f64::NAN;
        assert!(simdr_decode(&l, 346, 260, DecodeMode::Argmax).is_err());
    }

    #[test]
    fn soft_decode_centered_peak() {
        let mut x = vec![-50.0; 11];
        x[4] = 0.0;
        x[5] = 0.0;
        x[6] = 0.0;
        let l = SimdrLogits::<f64> {
            joints: 1,
            w_bins: 11,
            h_bins: 11,
            x: x.clone(),
            y: x,
        };
        let p = simdr_decode(&l, 11, 11, DecodeMode::Soft).unwrap();
        assert!((p.joints[0].u - 5.0).abs() < 1e-12);
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let p = MicroNetParams::init(&small_cfg(), 8).unwrap();
        let e = EtscParams::init(6, 9);
        let c = cloud(40);
        let a = forward(&c, &p, &e, 4).unwrap();
        let b = forward(&c, &p.cast::<f32>(), &e.cast::<f32>(), 4).unwrap();
        for (u, v) in a.x.iter().zip(&b.x) {
            assert!((u - f64::from(*v)).abs() < 1e-4);
        }
    }
}
