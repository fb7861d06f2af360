//! Sobel edge weighting of the polarity channel.
//!
//! For each slice the event-count map is filtered with the 3x3 Sobel pair,
//! the gradient magnitude is normalized by its slice maximum, and every
//! cell's `p_acc` is scaled by `1 + alpha * E_norm`. Counts and timestamps
//! are left alone.

use std::str::FromStr;

use crate::error::{invalid, shape, Error, Result};
use crate::raster::{RasterCloud, VoxelGrid};

/// Horizontal Sobel kernel; the vertical one is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// How the filter reads outside the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Clamp to the nearest edge pixel. A constant map has zero gradient.
    #[default]
    Replicate,
    /// Treat outside pixels as zero.
    Zero,
}

impl FromStr for Border {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate" => Ok(Border::Replicate),
            "zero" => Ok(Border::Zero),
            other => Err(invalid(format!("unknown border mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    alpha: f64,
    epsilon: f64,
    border: Border,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: 1e-8,
            border: Border::Replicate,
        }
    }
}

impl EdgeParams {
    pub fn new(alpha: f64, epsilon: f64, border: Border) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon {epsilon} must be positive")));
        }
        Ok(Self { alpha, epsilon, border })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn border(&self) -> Border {
        self.border
    }
}

#[inline]
fn sample(map: &[f64], width: usize, height: usize, x: isize, y: isize, border: Border) -> f64 {
    let inside = x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
    match (inside, border) {
        (true, _) => map[y as usize * width + x as usize],
        (false, Border::Zero) => 0.0,
        (false, Border::Replicate) => {
            let cx = x.clamp(0, width as isize - 1) as usize;
            let cy = y.clamp(0, height as isize - 1) as usize;
            map[cy * width + cx]
        }
    }
}

#[inline]
fn gradient_at(map: &[f64], width: usize, height: usize, x: usize, y: usize, border: Border) -> (f64, f64) {
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (dy, (kx_row, ky_row)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
        for dx in 0..3 {
            let v = sample(
                map,
                width,
                height,
                x as isize + dx as isize - 1,
                y as isize + dy as isize - 1,
                border,
            );
            gx += kx_row[dx] * v;
            gy += ky_row[dx] * v;
        }
    }
    (gx, gy)
}

/// Cross-correlates a row-major `height x width` map with the Sobel pair.
pub fn sobel_gradients(map: &[f64], width: usize, height: usize, border: Border) -> Result<(Vec<f64>, Vec<f64>)> {
    if width == 0 || height == 0 {
        return Err(invalid("map must be at least 1x1"));
    }
    if map.len() != width * height {
        return Err(shape(format!("map has {} values for {width}x{height}", map.len())));
    }
    let mut gx = vec![0.0; map.len()];
    let mut gy = vec![0.0; map.len()];
    for y in 0..height {
        for x in 0..width {
            let (a, b) = gradient_at(map, width, height, x, y, border);
            gx[y * width + x] = a;
            gy[y * width + x] = b;
        }
    }
    Ok((gx, gy))
}

pub fn edge_magnitude(gx: &[f64], gy: &[f64]) -> Result<Vec<f64>> {
    if gx.len() != gy.len() {
        return Err(shape("gradient maps differ in size"));
    }
    Ok(gx.iter().zip(gy).map(|(a, b)| (a * a + b * b).sqrt()).collect())
}

/// `E / (max E + epsilon)`, max over the whole map.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN epsilon too
pub fn normalize_edges(e: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let max = e.iter().copied().fold(0.0, f64::max);
    let denom = max + epsilon;
    Ok(e.iter().map(|v| v / denom).collect())
}

/// Normalized edge magnitudes for every slice of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub slices: Vec<Vec<f64>>,
}

/// Dense reference computation of the per-slice normalized edge map.
pub fn edge_map(grid: &VoxelGrid, params: &EdgeParams) -> EdgeMap {
    let (w, h) = (usize::from(grid.width()), usize::from(grid.height()));
    let slices = (0..grid.k())
        .map(|s| {
            let counts = grid.count_map(s);
            let (gx, gy) = sobel_gradients(&counts, w, h, params.border).expect("grid dims are valid");
            let e = edge_magnitude(&gx, &gy).expect("same shape");
            normalize_edges(&e, params.epsilon).expect("epsilon validated")
        })
        .collect();
    EdgeMap {
        width: w,
        height: h,
        slices,
    }
}

/// Normalized edge strength at each occupied pixel of one slice.
///
/// `counts` is the dense count map (zero where unoccupied) and `occupied`
/// lists the pixel indices with non-zero count. The gradient can only be
/// non-zero within one pixel of an occupied cell, so the slice maximum is
/// found by visiting that neighbourhood alone. `stamp` is scratch space of
/// the map's size; `stamp_id` must differ between calls sharing it.
fn sparse_normalized_edges(
    counts: &[f64],
    width: usize,
    height: usize,
    occupied: &[usize],
    params: &EdgeParams,
    stamp: &mut [u32],
    stamp_id: u32,
) -> Vec<f64> {
    let mut max = 0.0f64;
    for &idx in occupied {
        let (x0, y0) = (idx % width, idx / width);
        for y in y0.saturating_sub(1)..=(y0 + 1).min(height - 1) {
            for x in x0.saturating_sub(1)..=(x0 + 1).min(width - 1) {
                let q = y * width + x;
                if stamp[q] == stamp_id {
                    continue;
                }
                stamp[q] = stamp_id;
                let (gx, gy) = gradient_at(counts, width, height, x, y, params.border);
                max = max.max((gx * gx + gy * gy).sqrt());
            }
        }
    }
    let denom = max + params.epsilon;
    occupied
        .iter()
        .map(|&idx| {
            let (gx, gy) = gradient_at(counts, width, height, idx % width, idx / width, params.border);
            (gx * gx + gy * gy).sqrt() / denom
        })
        .collect()
}

/// Scales each cell's polarity by `1 + alpha * E_norm` of its slice.
pub fn enhance(grid: &VoxelGrid, params: &EdgeParams) -> VoxelGrid {
    let (w, h) = (usize::from(grid.width()), usize::from(grid.height()));
    let plane = w * h;
    let mut gain: Vec<f64> = match grid.gain() {
        Some(g) => g.to_vec(),
        None => vec![1.0; grid.cells().len()],
    };
    let mut stamp = vec![0u32; plane];
    let mut counts = vec![0.0f64; plane];
    for s in 0..grid.k() {
        let cells = grid.slice_cells(s);
        let occupied: Vec<usize> = (0..plane).filter(|&i| cells[i].e_cnt > 0).collect();
        if occupied.is_empty() {
            continue;
        }
        for &i in &occupied {
            counts[i] = f64::from(cells[i].e_cnt);
        }
        let e_norm = sparse_normalized_edges(&counts, w, h, &occupied, params, &mut stamp, s as u32 + 1);
        for (&i, en) in occupied.iter().zip(e_norm) {
            gain[s * plane + i] *= 1.0 + params.alpha * en;
            counts[i] = 0.0;
        }
    }
    let mut out = grid.clone();
    out.set_gain(gain).expect("gain sized from grid");
    out
}

/// Applies the same weighting to an exported cloud, rebuilding each slice's
/// count map from the points. Must be called before resampling: duplicated
/// points would otherwise count once.
pub fn enhance_cloud(cloud: &RasterCloud, params: &EdgeParams) -> Result<RasterCloud> {
    let (w, h) = (usize::from(cloud.width), usize::from(cloud.height));
    if w == 0 || h == 0 || cloud.k == 0 {
        return Err(invalid("cloud has empty dimensions"));
    }
    let plane = w * h;
    let mut by_slice: Vec<Vec<usize>> = vec![Vec::new(); cloud.k];
    for (i, p) in cloud.points.iter().enumerate() {
        let s = usize::from(p.slice);
        if s >= cloud.k || p.x >= cloud.width || p.y >= cloud.height {
            return Err(invalid(format!("point {i} outside cloud bounds")));
        }
        by_slice[s].push(i);
    }
    let mut out = cloud.clone();
    let mut stamp = vec![0u32; plane];
    let mut counts = vec![0.0f64; plane];
    for (s, members) in by_slice.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let pix: Vec<usize> = members
            .iter()
            .map(|&i| usize::from(cloud.points[i].y) * w + usize::from(cloud.points[i].x))
            .collect();
        for (&i, &q) in members.iter().zip(&pix) {
            counts[q] = f64::from(cloud.points[i].e_cnt);
        }
        let e_norm = sparse_normalized_edges(&counts, w, h, &pix, params, &mut stamp, s as u32 + 1);
        for ((&i, &q), en) in members.iter().zip(&pix).zip(e_norm) {
            out.points[i].p_acc *= 1.0 + params.alpha * en;
            counts[q] = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, TimeWindow};
    use crate::raster::{rasterize, to_point_cloud};

    fn naive_corr(map: &[f64], w: usize, h: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..3isize {
                    for j in 0..3isize {
                        let (yy, xx) = (y + i - 1, x + j - 1);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += k[i as usize][j as usize] * map[yy as usize * w + xx as usize];
                        }
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_map_has_no_gradient() {
        let map = vec![3.0; 20];
        let (gx, gy) = sobel_gradients(&map, 5, 4, Border::Replicate).unwrap();
        assert!(gx.iter().chain(&gy).all(|&v| v == 0.0));
        // zero padding only sees the step at the border
        let (gx, _) = sobel_gradients(&map, 5, 4, Border::Zero).unwrap();
        assert_eq!(gx[5 + 2], 0.0);
        assert_ne!(gx[5], 0.0);
    }

    #[test]
    fn vertical_step_column_values() {
        let (w, h, c) = (8, 6, 4);
        let map: Vec<f64> = (0..w * h).map(|i| if i % w >= c { 1.0 } else { 0.0 }).collect();
        let (gx, gy) = sobel_gradients(&map, w, h, Border::Zero).unwrap();
        let row = 2;
        assert_eq!(gx[row * w + c - 1], 4.0);
        assert_eq!(gx[row * w + c], 4.0);
        assert_eq!(gx[row * w + c - 2], 0.0);
        assert_eq!(gx[row * w + c + 1], 0.0);
        assert_eq!(gy[row * w + c], 0.0);
        assert_eq!(gx, naive_corr(&map, w, h, &SOBEL_X));
    }

    #[test]
    fn transposed_step_swaps_axes() {
        let (w, h) = (6, 7);
        let map: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64).collect();
        let mut t = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = map[y * w + x];
            }
        }
        let (gx, _) = sobel_gradients(&map, w, h, Border::Zero).unwrap();
        let (_, gy_t) = sobel_gradients(&t, h, w, Border::Zero).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(gx[y * w + x], gy_t[x * h + y]);
            }
        }
    }

    #[test]
    fn magnitude_and_normalization() {
        assert_eq!(edge_magnitude(&[3.0], &[4.0]).unwrap(), vec![5.0]);
        assert_eq!(edge_magnitude(&[0.0; 4], &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(edge_magnitude(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(normalize_edges(&[0.0; 3], 1e-8).unwrap(), vec![0.0; 3]);
        let n = normalize_edges(&[0.0, 2.0, 0.0], 1e-8).unwrap();
        assert_eq!(n[1], 2.0 / (2.0 + 1e-8));
        assert!(n[1] < 1.0);
        assert!(normalize_edges(&[1.0], 0.0).is_err());
    }

    #[test]
    fn params_validated() {
        assert!(EdgeParams::new(1.5, 1e-8, Border::Zero).is_err());
        assert!(EdgeParams::new(0.5, 0.0, Border::Zero).is_err());
        assert!("mirror".parse::<Border>().is_err());
    }

    fn grid() -> VoxelGrid {
        let ev: Vec<Event> = (0..400u64)
            .map(|i| {
                Event::new(
                    (i * 7 % 13) as u16,
                    (i * 5 % 9) as u16,
                    i,
                    if i % 3 == 0 { -1 } else { 1 },
                )
            })
            .collect();
        rasterize(&ev, TimeWindow::new(0, 400).unwrap(), 13, 9, 4).unwrap()
    }

    #[test]
    fn sparse_path_matches_dense_reference() {
        for border in [Border::Replicate, Border::Zero] {
            let params = EdgeParams::new(0.5, 1e-8, border).unwrap();
            let g = grid();
            let dense = edge_map(&g, &params);
            let out = enhance(&g, &params);
            let plane = 13 * 9;
            for s in 0..4 {
                for i in 0..plane {
                    let idx = s * plane + i;
                    let expect = (1.0 + 0.5 * dense.slices[s][i]) * f64::from(g.cells()[idx].p_acc);
                    assert!((out.p_acc(idx) - expect).abs() <= 1e-14 * expect.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn alpha_zero_is_identity() {
        let g = grid();
        let params = EdgeParams::new(0.0, 1e-8, Border::Replicate).unwrap();
        let out = enhance(&g, &params);
        assert_eq!(out, g);
        assert_eq!(to_point_cloud(&out), to_point_cloud(&g));
    }

    #[test]
    fn cloud_route_matches_grid_route() {
        let g = grid();
        let params = EdgeParams::default();
        let via_grid = to_point_cloud(&enhance(&g, &params));
        let via_cloud = enhance_cloud(&to_point_cloud(&g), &params).unwrap();
        assert_eq!(via_grid, via_cloud);
    }
}
