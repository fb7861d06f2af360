//! Hand-derived reverse mode for the backbone, f64 only.

use super::{global_pool, Linear, MicroNetParams, SimdrLogits, INPUT_DIM};
use crate::error::{shape, Result};
use crate::temporal::{
    es_seq_with_slices, fuse, slice_assign, temporal_global, EtscCache, EtscParams, PointFeatures, SliceTokens,
};

/// Per-point MLP activations, point-major (`[point][unit]`).
#[derive(Debug, Clone)]
pub struct PointwiseCache {
    pub n: usize,
    pub input: Vec<f64>,
    pub pre: [Vec<f64>; 3],
    pub act: [Vec<f64>; 3],
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pointwise: PointwiseCache,
    pub features: PointFeatures<f64>,
    pub k: usize,
    pub slices: Vec<usize>,
    pub token_argmax: Vec<Option<usize>>,
    pub tokens: SliceTokens<f64>,
    pub refined: SliceTokens<f64>,
    pub etsc: EtscCache,
    pub pool_argmax: Vec<usize>,
    pub fused: Vec<f64>,
    pub head_out: Vec<f64>,
}

/// Gradients with respect to the normalized input and every parameter.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub input: Vec<f64>,
    pub net: MicroNetParams<f64>,
    pub etsc: EtscParams<f64>,
}

fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

impl PointwiseCache {
    /// ReLU sign pattern; a change under perturbation means a kink was crossed.
    pub fn pattern(&self) -> Vec<i64> {
        self.pre.iter().flatten().map(|&v| sign(v)).collect()
    }

    /// Features as `C x N`, channel-major.
    pub fn features(&self, channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; channels * self.n];
        for i in 0..self.n {
            for c in 0..channels {
                out[c * self.n + i] = self.act[2][i * channels + c];
            }
        }
        out
    }
}

impl ForwardCache {
    /// Discrete state of the pass: ReLU signs, slice ids and every max
    /// selection. Finite differences are only meaningful where this is
    /// unchanged on both sides of the probe.
    pub fn pattern(&self) -> Vec<i64> {
        let mut p = self.pointwise.pattern();
        p.extend(self.etsc.pre_relu.iter().map(|&v| sign(v)));
        p.extend(self.slices.iter().map(|&s| s as i64));
        p.extend(self.token_argmax.iter().map(|a| a.map_or(-1, |i| i as i64)));
        p.extend(self.pool_argmax.iter().map(|&i| i as i64));
        p
    }
}

pub fn pointwise_cached(input: &[f64], n: usize, params: &MicroNetParams<f64>) -> Result<PointwiseCache> {
    params.check_shapes()?;
    if input.len() != INPUT_DIM * n {
        return Err(shape(format!("input has {} values for {INPUT_DIM} x {n}", input.len())));
    }
    let dims: Vec<usize> = params.mlp.iter().map(|l| l.out_dim).collect();
    let mut pre: [Vec<f64>; 3] = std::array::from_fn(|l| Vec::with_capacity(dims[l] * n));
    let mut act: [Vec<f64>; 3] = std::array::from_fn(|l| Vec::with_capacity(dims[l] * n));
    for i in 0..n {
        let mut x: Vec<f64> = (0..INPUT_DIM).map(|c| input[c * n + i]).collect();
        for (l, layer) in params.mlp.iter().enumerate() {
            let z = layer.apply(&x);
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            pre[l].extend_from_slice(&z);
            act[l].extend_from_slice(&a);
            x = a;
        }
    }
    Ok(PointwiseCache {
        n,
        input: input.to_vec(),
        pre,
        act,
    })
}

/// `d_feat` is `C x N` channel-major. Accumulates layer gradients into
/// `grads` and returns the input gradient (`5 x N` channel-major).
pub fn pointwise_backward(
    cache: &PointwiseCache,
    params: &MicroNetParams<f64>,
    d_feat: &[f64],
    grads: &mut [Linear<f64>; 3],
) -> Vec<f64> {
    let n = cache.n;
    let c_out = params.channels();
    let mut d_input = vec![0.0; INPUT_DIM * n];
    for i in 0..n {
        let mut d_act: Vec<f64> = (0..c_out).map(|c| d_feat[c * n + i]).collect();
        for l in (0..3).rev() {
            let layer = &params.mlp[l];
            let (din, dout) = (layer.in_dim, layer.out_dim);
            let pre = &cache.pre[l][i * dout..(i + 1) * dout];
            let x_in: Vec<f64> = if l == 0 {
                (0..INPUT_DIM).map(|c| cache.input[c * n + i]).collect()
            } else {
                cache.act[l - 1][i * din..(i + 1) * din].to_vec()
            };
            let mut d_x = vec![0.0; din];
            for o in 0..dout {
                let g = if pre[o] > 0.0 { d_act[o] } else { 0.0 };
                if g == 0.0 {
                    continue;
                }
                grads[l].bias[o] += g;
                let row = &layer.weight[o * din..(o + 1) * din];
                let grow = &mut grads[l].weight[o * din..(o + 1) * din];
                for q in 0..din {
                    grow[q] += g * x_in[q];
                    d_x[q] += g * row[q];
                }
            }
            d_act = d_x;
        }
        for c in 0..INPUT_DIM {
            d_input[c * n + i] = d_act[c];
        }
    }
    d_input
}

/// Forward pass that keeps every intermediate.
pub fn forward_cached(
    input: &[f64],
    t_avg: &[f64],
    params: &MicroNetParams<f64>,
    etsc: &EtscParams<f64>,
    k: usize,
) -> Result<ForwardCache> {
    if etsc.channels() != params.channels() {
        return Err(shape("temporal block and backbone disagree on channels"));
    }
    let n = t_avg.len();
    let pointwise = pointwise_cached(input, n, params)?;
    let features = PointFeatures::new(params.channels(), pointwise.features(params.channels()), t_avg.to_vec())?;
    let (g_max, g_avg) = global_pool(&features)?;
    let pool_argmax = (0..features.channels())
        .map(|c| {
            let row = features.channel(c);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let slices = slice_assign(t_avg, k)?;
    let (tokens, token_argmax) = es_seq_with_slices(&features, &slices, k)?;
    let (refined, etsc_cache) = etsc.forward_cached(&tokens)?;
    let t_global = temporal_global(&refined);
    let fused = fuse(&g_max, &g_avg, &t_global)?.into_values();
    let head_out = params.head.apply(&fused);
    Ok(ForwardCache {
        pointwise,
        features,
        k,
        slices,
        token_argmax,
        tokens,
        refined,
        etsc: etsc_cache,
        pool_argmax,
        fused,
        head_out,
    })
}

impl ForwardCache {
    pub fn logits(&self, params: &MicroNetParams<f64>) -> Result<SimdrLogits<f64>> {
        SimdrLogits::from_head(&self.head_out, params.joints, params.w_bins, params.h_bins)
    }
}

/// Back-propagates `d_head` (gradient of the loss w.r.t. the raw head
/// output, same layout as [`ForwardCache::head_out`]).
pub fn backward(
    cache: &ForwardCache,
    params: &MicroNetParams<f64>,
    etsc: &EtscParams<f64>,
    d_head: &[f64],
) -> NetGrads {
    let mut g_net = MicroNetParams::zeros(&params.config()).expect("config came from valid params");
    let c = params.channels();
    let n = cache.pointwise.n;
    let k = cache.k;

    // head
    let head = &params.head;
    let mut d_fused = vec![0.0; head.in_dim];
    for (o, &g) in d_head.iter().enumerate() {
        g_net.head.bias[o] += g;
        let row = &head.weight[o * head.in_dim..(o + 1) * head.in_dim];
        let grow = &mut g_net.head.weight[o * head.in_dim..(o + 1) * head.in_dim];
        for q in 0..head.in_dim {
            grow[q] += g * cache.fused[q];
            d_fused[q] += g * row[q];
        }
    }
    let (d_max, rest) = d_fused.split_at(c);
    let (d_avg, d_tg) = rest.split_at(c);

    let mut d_feat = vec![0.0; c * n];
    for ch in 0..c {
        d_feat[ch * n + cache.pool_argmax[ch]] += d_max[ch];
        let share = d_avg[ch] / n as f64;
        for v in &mut d_feat[ch * n..(ch + 1) * n] {
            *v += share;
        }
    }

    // temporal mean -> residual block -> slice max
    let d_refined: Vec<f64> = (0..k * c).map(|i| d_tg[i % c] / k as f64).collect();
    let (d_tokens, g_etsc) = etsc.backward(&cache.tokens, &cache.etsc, &d_refined);
    for (at, arg) in cache.token_argmax.iter().enumerate() {
        if let Some(pt) = arg {
            let ch = at % c;
            d_feat[ch * n + pt] += d_tokens[at];
        }
    }

    let d_input = pointwise_backward(&cache.pointwise, params, &d_feat, &mut g_net.mlp);
    NetGrads {
        input: d_input,
        net: g_net,
        etsc: g_etsc,
    }
}
