//! Slice tokens and the residual temporal convolution over them.
//!
//! Points are bucketed into `k` slices by normalized timestamp, each slice is
//! max-pooled into one `C`-channel token, and the resulting `k x C` sequence
//! is refined by `y = x + conv_d2(relu(conv_d1(x)))` with kernel 3 and
//! centered zero padding. The refined tokens are averaged into a global
//! temporal vector and concatenated with the spatial max/mean pools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};
use crate::raster::slice_of;
use crate::real::Real;

/// Per-point features, `channels x points`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures<T = f64> {
    channels: usize,
    points: usize,
    feat: Vec<T>,
    t_avg: Vec<f64>,
}

impl<T: Real> PointFeatures<T> {
    /// `feat[c * points + n]` is channel `c` of point `n`.
    pub fn new(channels: usize, feat: Vec<T>, t_avg: Vec<f64>) -> Result<Self> {
        let points = t_avg.len();
        if channels == 0 {
            return Err(invalid("features need at least one channel"));
        }
        if feat.len() != channels * points {
            return Err(shape(format!(
                "{} feature values for {channels} channels x {points} points",
                feat.len()
            )));
        }
        if let Some(t) = t_avg.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid(format!("t_avg {t} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            points,
            feat,
            t_avg,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn feat(&self) -> &[T] {
        &self.feat
    }

    pub fn t_avg(&self) -> &[f64] {
        &self.t_avg
    }

    #[inline]
    pub fn get(&self, c: usize, n: usize) -> T {
        self.feat[c * self.points + n]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.feat[c * self.points..(c + 1) * self.points]
    }
}

/// `k x channels` token matrix, one row per slice in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTokens<T = f64> {
    k: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> SliceTokens<T> {
    pub fn new(k: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if k == 0 || channels == 0 {
            return Err(invalid("token matrix needs k >= 1 and C >= 1"));
        }
        if data.len() != k * channels {
            return Err(shape(format!("{} values for {k}x{channels} tokens", data.len())));
        }
        Ok(Self { k, channels, data })
    }

    pub fn zeros(k: usize, channels: usize) -> Result<Self> {
        Self::new(k, channels, vec![T::zero(); k * channels])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, s: usize) -> &[T] {
        &self.data[s * self.channels..(s + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize) -> T {
        self.data[s * self.channels + c]
    }
}

/// `min(floor(t * k), k - 1)` for every timestamp.
pub fn slice_assign(t_avg: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    t_avg
        .iter()
        .map(|&t| {
            if (0.0..=1.0).contains(&t) {
                Ok(slice_of(t, k))
            } else {
                Err(invalid(format!("t_avg {t} outside [0, 1]")))
            }
        })
        .collect()
}

/// Max-pools each slice into a token. Empty slices give zero tokens.
pub fn es_seq<T: Real>(pf: &PointFeatures<T>, k: usize) -> Result<SliceTokens<T>> {
    let slices = slice_assign(pf.t_avg(), k)?;
    Ok(es_seq_with_slices(pf, &slices, k)?.0)
}

/// Token matrix plus, per `(slice, channel)`, the point that supplied the
/// maximum (first one on ties), or `None` for an empty slice.
pub fn es_seq_with_slices<T: Real>(
    pf: &PointFeatures<T>,
    slices: &[usize],
    k: usize,
) -> Result<(SliceTokens<T>, Vec<Option<usize>>)> {
    if slices.len() != pf.points() {
        return Err(shape("one slice id per point required"));
    }
    let c_n = pf.channels();
    let mut tokens = vec![T::zero(); k * c_n];
    let mut arg: Vec<Option<usize>> = vec![None; k * c_n];
    for c in 0..c_n {
        let row = pf.channel(c);
        for (n, (&v, &s)) in row.iter().zip(slices).enumerate() {
            if s >= k {
                return Err(invalid(format!("slice id {s} >= k = {k}")));
            }
            let at = s * c_n + c;
            match arg[at] {
                Some(_) if v <= tokens[at] => {}
                _ => {
                    tokens[at] = v;
                    arg[at] = Some(n);
                }
            }
        }
    }
    Ok((SliceTokens::new(k, c_n, tokens)?, arg))
}

/// 1-D convolution over the slice axis, centered zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T = f64> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `[out][in][tap]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight: vec![T::zero(); out_channels * in_channels * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Offset (in sequence steps) read by tap `j`.
    #[inline]
    pub fn tap_offset(&self, j: usize) -> isize {
        (j as isize - (self.kernel as isize - 1) / 2) * self.dilation as isize
    }

    #[inline]
    fn w(&self, o: usize, i: usize, j: usize) -> T {
        self.weight[(o * self.in_channels + i) * self.kernel + j]
    }

    /// `x` is `len x in_channels`, row-major; output is `len x out_channels`.
    pub fn forward(&self, x: &[T], len: usize) -> Vec<T> {
        let mut y = vec![T::zero(); len * self.out_channels];
        for k in 0..len {
            for o in 0..self.out_channels {
                let mut acc = self.bias[o];
                for j in 0..self.kernel {
                    let src = k as isize + self.tap_offset(j);
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &x[src as usize * self.in_channels..][..self.in_channels];
                    for (i, &xv) in xrow.iter().enumerate() {
                        acc = acc + self.w(o, i, j) * xv;
                    }
                }
                y[k * self.out_channels + o] = acc;
            }
        }
        y
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            dilation: self.dilation,
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

impl Conv1d<f64> {
    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], len: usize, dy: &[f64], grad: &mut Conv1d<f64>) -> Vec<f64> {
        let mut dx = vec![0.0; len * self.in_channels];
        for k in 0..len {
            for o in 0..self.out_channels {
                let g = dy[k * self.out_channels + o];
                grad.bias[o] += g;
                for j in 0..self.kernel {
                    let src = k as isize + self.tap_offset(j);
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for i in 0..self.in_channels {
                        let wi = (o * self.in_channels + i) * self.kernel + j;
                        grad.weight[wi] += g * x[src * self.in_channels + i];
                        dx[src * self.in_channels + i] += g * self.weight[wi];
                    }
                }
            }
        }
        dx
    }
}

pub const ETSC_KERNEL: usize = 3;
pub const ETSC_DILATIONS: [usize; 2] = [1, 2];

/// Residual temporal block: `y = x + conv_d2(relu(conv_d1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtscParams<T = f64> {
    pub conv1: Conv1d<T>,
    pub conv2: Conv1d<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EtscCache {
    pub pre_relu: Vec<f64>,
    pub post_relu: Vec<f64>,
}

impl<T: Real> EtscParams<T> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv1: Conv1d::zeros(channels, channels, ETSC_KERNEL, ETSC_DILATIONS[0]),
            conv2: Conv1d::zeros(channels, channels, ETSC_KERNEL, ETSC_DILATIONS[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels
    }

    /// Applies the block to one `k x C` token matrix.
    pub fn forward(&self, tokens: &SliceTokens<T>) -> Result<SliceTokens<T>> {
        if tokens.channels() != self.channels() {
            return Err(shape(format!(
                "tokens have {} channels, block expects {}",
                tokens.channels(),
                self.channels()
            )));
        }
        let k = tokens.k();
        let mut h = self.conv1.forward(tokens.data(), k);
        for v in &mut h {
            *v = v.max(T::zero());
        }
        let r = self.conv2.forward(&h, k);
        let out = tokens.data().iter().zip(&r).map(|(&a, &b)| a + b).collect();
        SliceTokens::new(k, self.channels(), out)
    }

    /// Batch of independent `k x C` instances (`B x K x C`).
    pub fn forward_batch(&self, batch: &[SliceTokens<T>]) -> Result<Vec<SliceTokens<T>>> {
        batch.iter().map(|t| self.forward(t)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn cast<U: Real>(&self) -> EtscParams<U> {
        EtscParams {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
        }
    }
}

impl EtscParams<f64> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, `fan_in = 3C`.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(channels);
        let bound = 1.0 / ((channels * ETSC_KERNEL) as f64).sqrt();
        for conv in [&mut p.conv1, &mut p.conv2] {
            for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    /// Parameters in file order: conv1 weight, conv1 bias, conv2 weight, conv2 bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for conv in [&self.conv1, &self.conv2] {
            v.extend_from_slice(&conv.weight);
            v.extend_from_slice(&conv.bias);
        }
        v
    }

    pub fn from_flat(channels: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(channels);
        if flat.len() != p.param_count() {
            return Err(shape(format!(
                "{} values for a {channels}-channel block ({} expected)",
                flat.len(),
                p.param_count()
            )));
        }
        let mut rest = flat;
        for conv in [&mut p.conv1, &mut p.conv2] {
            let (w, r) = rest.split_at(conv.weight.len());
            conv.weight.copy_from_slice(w);
            let (b, r) = r.split_at(conv.bias.len());
            conv.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(p)
    }

    pub fn forward_cached(&self, tokens: &SliceTokens<f64>) -> Result<(SliceTokens<f64>, EtscCache)> {
        if tokens.channels() != self.channels() {
            return Err(shape("channel mismatch"));
        }
        let k = tokens.k();
        let pre_relu = self.conv1.forward(tokens.data(), k);
        let post_relu: Vec<f64> = pre_relu.iter().map(|v| v.max(0.0)).collect();
        let r = self.conv2.forward(&post_relu, k);
        let out = tokens.data().iter().zip(&r).map(|(a, b)| a + b).collect();
        Ok((
            SliceTokens::new(k, self.channels(), out)?,
            EtscCache { pre_relu, post_relu },
        ))
    }

    /// Returns `(dL/dx, parameter gradients)` given `dL/dy`.
    pub fn backward(&self, tokens: &SliceTokens<f64>, cache: &EtscCache, dy: &[f64]) -> (Vec<f64>, EtscParams<f64>) {
        let k = tokens.k();
        let mut grad = Self::zeros(self.channels());
        let dz = self.conv2.backward(&cache.post_relu, k, dy, &mut grad.conv2);
        let dh: Vec<f64> = dz
            .iter()
            .zip(&cache.pre_relu)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dx = self.conv1.backward(tokens.data(), k, &dh, &mut grad.conv1);
        for (d, g) in dx.iter_mut().zip(dy) {
            *d += g;
        }
        (dx, grad)
    }
}

/// Mean over the slice axis.
pub fn temporal_global<T: Real>(tokens: &SliceTokens<T>) -> Vec<T> {
    let k = T::from_usize(tokens.k()).expect("k fits");
    (0..tokens.channels())
        .map(|c| (0..tokens.k()).map(|s| tokens.get(s, c)).sum::<T>() / k)
        .collect()
}

/// `[g_max; g_avg; t_global]`, length `3C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGlobal<T = f64> {
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> FusedGlobal<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn g_max(&self) -> &[T] {
        &self.values[..self.channels]
    }

    pub fn g_avg(&self) -> &[T] {
        &self.values[self.channels..2 * self.channels]
    }

    pub fn t_global(&self) -> &[T] {
        &self.values[2 * self.channels..]
    }
}

pub fn fuse<T: Real>(g_max: &[T], g_avg: &[T], t_global: &[T]) -> Result<FusedGlobal<T>> {
    let c = g_max.len();
    if g_avg.len() != c || t_global.len() != c {
        return Err(shape(format!(
            "fusion inputs differ in length: {c}, {}, {}",
            g_avg.len(),
            t_global.len()
        )));
    }
    let mut values = Vec::with_capacity(3 * c);
    values.extend_from_slice(g_max);
    values.extend_from_slice(g_avg);
    values.extend_from_slice(t_global);
    Ok(FusedGlobal { channels: c, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_assign_clamps() {
        assert_eq!(slice_assign(&[0.0, 1.0, 0.5, 0.24999], 4).unwrap(), vec![0, 3, 2, 0]);
        assert!(slice_assign(&[1.5], 4).is_err());
        assert!(slice_assign(&[-0.1], 4).is_err());
        assert!(slice_assign(&[0.5], 0).is_err());
    }

    #[test]
    fn all_points_in_one_slice() {
        // C = 2, N = 3, all in slice 1 of 4
        let pf = PointFeatures::new(2, vec![1.0, 5.0, 3.0, -1.0, -4.0, 2.0], vec![0.3; 3]).unwrap();
        let t = es_seq(&pf, 4).unwrap();
        assert_eq!(t.row(1), &[5.0, 2.0]);
        for s in [0, 2, 3] {
            assert_eq!(t.row(s), &[0.0, 0.0]);
        }
    }

    #[test]
    fn one_point_per_slice() {
        let pf = PointFeatures::new(1, vec![7.0, 8.0, 9.0, 10.0], vec![0.9, 0.1, 0.6, 0.3]).unwrap();
        let t = es_seq(&pf, 4).unwrap();
        assert_eq!(t.data(), &[8.0, 10.0, 9.0, 7.0]);
    }

    #[test]
    fn zero_block_is_identity() {
        let p = EtscParams::<f64>::zeros(3);
        let t = SliceTokens::new(4, 3, (0..12).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        assert_eq!(p.forward(&t).unwrap(), t);
    }

    #[test]
    fn single_slice_uses_center_tap() {
        let p = EtscParams::init(2, 5);
        let x = [0.4, -1.3];
        let t = SliceTokens::new(1, 2, x.to_vec()).unwrap();
        let y = p.forward(&t).unwrap();
        let center = |conv: &Conv1d<f64>, v: &[f64]| -> Vec<f64> {
            (0..2)
                .map(|o| conv.bias[o] + (0..2).map(|i| conv.weight[(o * 2 + i) * 3 + 1] * v[i]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = center(&p.conv1, &x).into_iter().map(|v| v.max(0.0)).collect();
        let r = center(&p.conv2, &h);
        for c in 0..2 {
            assert!((y.get(0, c) - (x[c] + r[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = EtscParams::<f64>::zeros(3);
        let t = SliceTokens::<f64>::zeros(4, 2).unwrap();
        assert!(p.forward(&t).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let p = EtscParams::init(4, 11);
        assert_eq!(EtscParams::from_flat(4, &p.to_flat()).unwrap(), p);
        assert!(EtscParams::from_flat(4, &[0.0; 3]).is_err());
    }

    #[test]
    fn global_mean_and_fusion() {
        let t = SliceTokens::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(temporal_global(&t), vec![1.0, 2.0]);
        let t = SliceTokens::new(2, 2, vec![1.5, -2.0, -1.5, 2.0]).unwrap();
        assert_eq!(temporal_global(&t), vec![0.0, 0.0]);

        let f = fuse(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]).unwrap();
        assert_eq!(f.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(f.g_avg(), &[3.0, 4.0]);
        assert_eq!(f.t_global(), &[5.0, 6.0]);
        assert_eq!(fuse(&[0.0; 3], &[0.0; 3], &[0.0; 3]).unwrap().values(), &[0.0; 9]);
        assert!(fuse(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }
}
