//! Rasterized event point clouds.
//!
//! A window `[start, end)` is cut into `k` equal sub-segments. Within each
//! sub-segment, events on the same pixel collapse into one cell holding the
//! summed relative timestamp, the signed polarity sum and the event count.
//! Every occupied cell becomes one 5-D point `(x, y, t_avg, p_acc, e_cnt)`.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::event::{Event, TimeWindow};

/// Accumulator for one (slice, pixel). Integer so that accumulation is exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct VoxelCell {
    /// Sum of `t - window.start` over the cell's events.
    pub t_sum: u64,
    pub p_acc: i32,
    pub e_cnt: u32,
}

impl VoxelCell {
    pub fn is_empty(&self) -> bool {
        self.e_cnt == 0
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    width: u16,
    height: u16,
    k: usize,
    window: TimeWindow,
    cells: Vec<VoxelCell>,
    /// Per-cell multiplier on `p_acc`, set by edge enhancement.
    gain: Option<Vec<f64>>,
}

impl VoxelGrid {
    pub fn zeros(width: u16, height: u16, k: usize, window: TimeWindow) -> Result<Self> {
        if k == 0 {
            return Err(invalid("slice count k must be >= 1"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if window.start >= window.end {
            return Err(invalid("zero-length window"));
        }
        let n = k * usize::from(width) * usize::from(height);
        Ok(Self {
            width,
            height,
            k,
            window,
            cells: vec![VoxelCell::default(); n],
            gain: None,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn cells(&self) -> &[VoxelCell] {
        &self.cells
    }

    pub fn slice_len(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    #[inline]
    pub fn index(&self, slice: usize, x: usize, y: usize) -> usize {
        (slice * usize::from(self.height) + y) * usize::from(self.width) + x
    }

    pub fn cell(&self, slice: usize, x: usize, y: usize) -> &VoxelCell {
        &self.cells[self.index(slice, x, y)]
    }

    pub fn slice_cells(&self, slice: usize) -> &[VoxelCell] {
        let n = self.slice_len();
        &self.cells[slice * n..(slice + 1) * n]
    }

    pub fn gain(&self) -> Option<&[f64]> {
        self.gain.as_deref()
    }

    /// Replaces the polarity multiplier. Length must match the cell count.
    pub fn set_gain(&mut self, gain: Vec<f64>) -> Result<()> {
        if gain.len() != self.cells.len() {
            return Err(crate::error::shape(format!(
                "gain has {} entries for {} cells",
                gain.len(),
                self.cells.len()
            )));
        }
        self.gain = Some(gain);
        Ok(())
    }

    /// Polarity after any enhancement gain.
    #[inline]
    pub fn p_acc(&self, idx: usize) -> f64 {
        let raw = f64::from(self.cells[idx].p_acc);
        match &self.gain {
            Some(g) => g[idx] * raw,
            None => raw,
        }
    }

    /// Event-count map of one slice, row-major `height x width`.
    pub fn count_map(&self, slice: usize) -> Vec<f64> {
        self.slice_cells(slice).iter().map(|c| f64::from(c.e_cnt)).collect()
    }

    pub fn total_events(&self) -> u64 {
        self.cells.iter().map(|c| u64::from(c.e_cnt)).sum()
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.e_cnt > 0).count()
    }
}

/// Grids are equal when every observable value is: dimensions, window,
/// integer cells and effective (gain-applied) polarity. A unit gain equals
/// no gain.
impl PartialEq for VoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.k == other.k
            && self.window == other.window
            && self.cells == other.cells
            && (0..self.cells.len()).all(|i| self.p_acc(i).to_bits() == other.p_acc(i).to_bits())
    }
}

/// Sub-segment of `t` inside `window`: `floor(k * (t - start) / len)`,
/// clamped to `k - 1`. A timestamp exactly on a boundary goes to the later
/// slice.
#[inline]
pub fn slice_index(t: u64, window: TimeWindow, k: usize) -> usize {
    let rel = u128::from(t - window.start);
    let s = (rel * k as u128 / u128::from(window.len())) as usize;
    s.min(k - 1)
}

/// Slice of a normalized timestamp: `min(floor(t_avg * k), k - 1)`.
#[inline]
pub fn slice_of(t_avg: f64, k: usize) -> usize {
    ((t_avg * k as f64).floor() as usize).min(k - 1)
}

/// Accumulates `events` into a `k`-slice voxel grid over `window`.
pub fn rasterize(events: &[Event], window: TimeWindow, width: u16, height: u16, k: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::zeros(width, height, k, window)?;
    if window.len().checked_mul(events.len() as u64).is_none() {
        return Err(invalid("window too long for exact timestamp accumulation"));
    }
    for e in events {
        if !window.contains(e.t) {
            return Err(Error::OutsideWindow {
                t: e.t,
                start: window.start,
                end: window.end,
            });
        }
        if e.x >= width || e.y >= height {
            return Err(Error::OutOfBounds {
                x: e.x.into(),
                y: e.y.into(),
                width,
                height,
            });
        }
        let s = slice_index(e.t, window, k);
        let idx = grid.index(s, usize::from(e.x), usize::from(e.y));
        let cell = &mut grid.cells[idx];
        cell.t_sum += e.t - window.start;
        cell.p_acc += i32::from(e.p);
        cell.e_cnt += 1;
    }
    Ok(grid)
}

/// One rasterized point. `slice` is carried alongside the five features so
/// slice membership never depends on float rounding of `t_avg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterPoint {
    pub x: u16,
    pub y: u16,
    pub slice: u16,
    /// Mean timestamp, normalized by the full window length.
    pub t_avg: f64,
    pub p_acc: f64,
    pub e_cnt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterCloud {
    pub points: Vec<RasterPoint>,
    pub width: u16,
    pub height: u16,
    pub k: usize,
    /// Unknown for clouds read back from CSV.
    pub window: Option<TimeWindow>,
}

impl RasterCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_events(&self) -> u64 {
        self.points.iter().map(|p| u64::from(p.e_cnt)).sum()
    }

    pub fn polarity_sum(&self) -> f64 {
        self.points.iter().map(|p| p.p_acc).sum()
    }
}

/// Mean normalized timestamp of a cell, adjusted by at most a few ulps so
/// that [`slice_of`] reproduces the slice the events were binned into.
fn normalized_mean(cell: &VoxelCell, window_len: u64, slice: usize, k: usize) -> f64 {
    let denom = f64::from(cell.e_cnt) * window_len as f64;
    let mut t = cell.t_sum as f64 / denom;
    for _ in 0..8 {
        match slice_of(t, k).cmp(&slice) {
            std::cmp::Ordering::Equal => break,
            std::cmp::Ordering::Less => t = t.next_up(),
            std::cmp::Ordering::Greater => t = t.next_down(),
        }
    }
    t.clamp(0.0, 1.0)
}

/// One point per occupied cell, slice-major then row-major.
pub fn to_point_cloud(grid: &VoxelGrid) -> RasterCloud {
    let (w, h) = (usize::from(grid.width), usize::from(grid.height));
    let len = grid.window.len();
    let mut points = Vec::new();
    for s in 0..grid.k {
        for y in 0..h {
            let row = grid.index(s, 0, y);
            for x in 0..w {
                let idx = row + x;
                let cell = &grid.cells[idx];
                if cell.e_cnt == 0 {
                    continue;
                }
                points.push(RasterPoint {
                    x: x as u16,
                    y: y as u16,
                    slice: s as u16,
                    t_avg: normalized_mean(cell, len, s, grid.k),
                    p_acc: grid.p_acc(idx),
                    e_cnt: cell.e_cnt,
                });
            }
        }
    }
    RasterCloud {
        points,
        width: grid.width,
        height: grid.height,
        k: grid.k,
        window: Some(grid.window),
    }
}

/// Resamples a cloud to exactly `n` points.
///
/// With at least `n` points, draws a uniform subset without replacement.
/// With fewer, keeps every point and pads with draws (with replacement) from
/// the existing ones. Output keeps the input's slice-major order.
pub fn sample_points(cloud: &RasterCloud, n: usize, seed: u64) -> Result<RasterCloud> {
    if n == 0 {
        return Err(invalid("sample size must be >= 1"));
    }
    if cloud.is_empty() {
        return Err(invalid("cannot sample from an empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let mut picks: Vec<usize> = if len >= n {
        index::sample(&mut rng, len, n).into_vec()
    } else {
        let mut v: Vec<usize> = (0..len).collect();
        v.extend((len..n).map(|_| rng.random_range(0..len)));
        v
    };
    picks.sort_unstable();
    Ok(RasterCloud {
        points: picks.into_iter().map(|i| cloud.points[i]).collect(),
        width: cloud.width,
        height: cloud.height,
        k: cloud.k,
        window: cloud.window,
    })
}

/// Formats `v` with nine significant digits in plain decimal notation.
fn fmt_sig9(v: f64) -> (String, usize) {
    let decimals = if v == 0.0 {
        8
    } else {
        (8 - v.abs().log10().floor() as i32).max(0) as usize
    };
    (format!("{v:.decimals$}"), decimals)
}

/// `t_avg` at nine significant digits, nudged in the last digit if rounding
/// would move it across a slice boundary.
pub fn format_t_avg(t_avg: f64, slice: usize, k: usize) -> String {
    let (mut text, decimals) = fmt_sig9(t_avg);
    let unit = 10f64.powi(-(decimals as i32));
    for _ in 0..4 {
        let parsed: f64 = text.parse().expect("formatted float parses");
        let got = slice_of(parsed, k);
        if got == slice {
            break;
        }
        let step = if got < slice { unit } else { -unit };
        text = format!("{:.decimals$}", (parsed + step).clamp(0.0, 1.0));
    }
    text
}

pub const CLOUD_CSV_HEADER: &str = "x,y,t_avg,p_acc,e_cnt";

/// Writes `x,y,t_avg,p_acc,e_cnt` rows.
pub fn write_cloud_csv<W: Write>(cloud: &RasterCloud, mut out: W) -> Result<()> {
    writeln!(out, "{CLOUD_CSV_HEADER}")?;
    for p in &cloud.points {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.x,
            p.y,
            format_t_avg(p.t_avg, usize::from(p.slice), cloud.k),
            p.p_acc,
            p.e_cnt
        )?;
    }
    Ok(())
}

/// Reads a cloud CSV. Slice membership is recovered from `t_avg`.
pub fn read_cloud_csv(bytes: &[u8], width: u16, height: u16, k: usize) -> Result<RasterCloud> {
    if k == 0 {
        return Err(invalid("slice count k must be >= 1"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CLOUD_CSV_HEADER {
        return Err(Error::MalformedCsv {
            line: 1,
            msg: format!("expected header {CLOUD_CSV_HEADER:?}"),
        });
    }
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| Error::MalformedCsv { line, msg };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let x: u16 = rec[0].parse().map_err(|_| bad(format!("bad x {:?}", &rec[0])))?;
        let y: u16 = rec[1].parse().map_err(|_| bad(format!("bad y {:?}", &rec[1])))?;
        let t_avg: f64 = rec[2].parse().map_err(|_| bad(format!("bad t_avg {:?}", &rec[2])))?;
        let p_acc: f64 = rec[3].parse().map_err(|_| bad(format!("bad p_acc {:?}", &rec[3])))?;
        let e_cnt: u32 = rec[4].parse().map_err(|_| bad(format!("bad e_cnt {:?}", &rec[4])))?;
        if x >= width || y >= height {
            return Err(Error::OutOfBounds {
                x: x.into(),
                y: y.into(),
                width,
                height,
            });
        }
        if !(0.0..=1.0).contains(&t_avg) {
            return Err(bad(format!("t_avg {t_avg} outside [0, 1]")));
        }
        if e_cnt == 0 || !p_acc.is_finite() {
            return Err(bad("points need e_cnt >= 1 and finite p_acc".into()));
        }
        points.push(RasterPoint {
            x,
            y,
            slice: slice_of(t_avg, k) as u16,
            t_avg,
            p_acc,
            e_cnt,
        });
    }
    Ok(RasterCloud {
        points,
        width,
        height,
        k,
        window: None,
    })
}
