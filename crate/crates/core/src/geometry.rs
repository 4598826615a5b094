//! Continuous coordinate grids, nearest-latent grouping of output pixels and
//! the ordered slicing of each group.
//!
//! Coordinates live in `[-1, 1]²`; pixel `i` of an axis with `n` pixels sits
//! at `-1 + (2i + 1) / n`. All distance comparisons are carried out on exact
//! integer numerators so that ties (pixel centres on a latent-cell edge) are
//! resolved identically on every platform.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-centre coordinate of index `i` on an axis of `n` pixels.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Output side length for a real scale factor: `floor(s · n)`.
pub fn scaled_len(n: usize, scale: f64) -> usize {
    (scale * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
}

pub fn make_grid(height: usize, width: usize) -> Result<CoordGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(CoordGrid { height, width })
}

impl CoordGrid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(y, x)` coordinate of a pixel.
    pub fn coord(&self, row: usize, col: usize) -> [f64; 2] {
        [pixel_center(row, self.height), pixel_center(col, self.width)]
    }

    /// Every pixel coordinate in row-major order.
    pub fn coords(&self) -> Vec<[f64; 2]> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| self.coord(r, c)))
            .collect()
    }
}

/// How the slice interval `u` is chosen for a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SliceStrategy {
    /// The same interval for every scale.
    Fixed(usize),
    /// `u = n·s`.
    Linear(u32),
    /// `u = s² / n`.
    Constant(u32),
}

impl SliceStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SliceStrategy::Fixed(_) => "fixed",
            SliceStrategy::Linear(_) => "linear",
            SliceStrategy::Constant(_) => "constant",
        }
    }
}

impl Default for SliceStrategy {
    fn default() -> Self {
        SliceStrategy::Linear(1)
    }
}

/// Slice interval for a group of `g` coordinates at scale `s`, clamped to
/// `1..=g`. Fractional `n·s` is rounded; `s²/n` is rounded up.
pub fn slice_interval(strategy: SliceStrategy, scale: f64, group_size: usize) -> Result<usize> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(Error::Argument(format!(
            "scale must be a finite value >= 1, got {scale}"
        )));
    }
    if group_size == 0 {
        return Err(Error::Argument("group size must be positive".into()));
    }
    let raw = match strategy {
        SliceStrategy::Fixed(0) | SliceStrategy::Linear(0) | SliceStrategy::Constant(0) => {
            return Err(Error::Argument(format!(
                "{} slicing needs a positive parameter",
                strategy.name()
            )));
        }
        SliceStrategy::Fixed(c) => c,
        SliceStrategy::Linear(n) => (n as f64 * scale).round() as usize,
        SliceStrategy::Constant(n) => (scale * scale / n as f64 - 1e-9).ceil() as usize,
    };
    Ok(raw.clamp(1, group_size))
}

/// Slices of a group of `g` members with interval `u`, as ranges into the
/// group's member order. The last slice is truncated when `u` does not
/// divide `g`.
pub fn slice_group(group_size: usize, interval: usize) -> Vec<Range<usize>> {
    assert!(
        interval > 0 && interval <= group_size.max(1),
        "slice interval must lie in 1..=g"
    );
    (0..group_size)
        .step_by(interval)
        .map(|start| start..(start + interval).min(group_size))
        .collect()
}

/// Nearest-latent assignment along one axis.
#[derive(Clone, Debug, PartialEq)]
struct AxisAssignment {
    /// Output indices owned by each latent index; contiguous and ordered.
    ranges: Vec<Range<usize>>,
    /// Offset of each output coordinate from its latent code in units of the
    /// latent half-cell, so the cell spans `[-1, 1]`.
    local: Vec<f64>,
}

impl AxisAssignment {
    fn new(out_n: usize, lat_n: usize) -> Self {
        let (n, m) = (out_n as i64, lat_n as i64);
        // |y - v| scaled by n·m
        let dist = |o: i64, j: i64| ((2 * o + 1) * m - (2 * j + 1) * n).abs();
        let mut owner = Vec::with_capacity(out_n);
        let mut local = Vec::with_capacity(out_n);
        for o in 0..n {
            let guess = ((2 * o + 1) * m / (2 * n)).clamp(0, m - 1);
            let mut best = guess;
            for j in [guess - 1, guess, guess + 1] {
                if j < 0 || j >= m {
                    continue;
                }
                let (dj, db) = (dist(o, j), dist(o, best));
                if dj < db || (dj == db && j < best) {
                    best = j;
                }
            }
            owner.push(best as usize);
            local.push(((2 * o + 1) * m - (2 * best + 1) * n) as f64 / n as f64);
        }
        let mut start = 0;
        let ranges: Vec<_> = (0..lat_n)
            .map(|j| {
                let end = start + owner[start..].iter().take_while(|&&k| k == j).count();
                let range = start..end;
                start = end;
                range
            })
            .collect();
        debug_assert_eq!(start, out_n);
        Self { ranges, local }
    }
}

/// Partition of an output grid into per-latent-code coordinate groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub output: CoordGrid,
    pub latent: CoordGrid,
    rows: AxisAssignment,
    cols: AxisAssignment,
}

/// One coordinate group: the output pixels nearest latent `(lat_row, lat_col)`.
///
/// Because both grids are separable, a group is the product of a run of
/// output rows and a run of output columns; members are ordered left to
/// right, then top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub id: usize,
    pub lat_row: usize,
    pub lat_col: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Output `(row, col)` of the `k`-th member.
    #[inline]
    pub fn member(&self, k: usize) -> (usize, usize) {
        let w = self.cols.len();
        (self.rows.start + k / w, self.cols.start + k % w)
    }

    /// Flat (row-major) output indices of all members in group order.
    pub fn member_indices(&self, out_width: usize) -> Vec<usize> {
        (0..self.size())
            .map(|k| {
                let (r, c) = self.member(k);
                r * out_width + c
            })
            .collect()
    }
}

/// Nearest-latent grouping of `out_grid` (Euclidean distance, ties to the
/// smaller latent index).
pub fn group_coordinates(out_grid: CoordGrid, latent_grid: CoordGrid) -> Result<Grouping> {
    if latent_grid.height > out_grid.height || latent_grid.width > out_grid.width {
        return Err(Error::Argument(format!(
            "latent grid {}x{} is larger than output grid {}x{}",
            latent_grid.height, latent_grid.width, out_grid.height, out_grid.width
        )));
    }
    if out_grid.is_empty() || latent_grid.is_empty() {
        return Err(Error::Argument("grids must be non-empty".into()));
    }
    Ok(Grouping {
        output: out_grid,
        latent: latent_grid,
        rows: AxisAssignment::new(out_grid.height, latent_grid.height),
        cols: AxisAssignment::new(out_grid.width, latent_grid.width),
    })
}

impl Grouping {
    pub fn group_count(&self) -> usize {
        self.latent.len()
    }

    pub fn group(&self, id: usize) -> Group {
        let (lat_row, lat_col) = (id / self.latent.width, id % self.latent.width);
        Group {
            id,
            lat_row,
            lat_col,
            rows: self.rows.ranges[lat_row].clone(),
            cols: self.cols.ranges[lat_col].clone(),
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = Group> + '_ {
        (0..self.group_count()).map(move |id| self.group(id))
    }

    /// Latent index owning each output pixel, row-major.
    pub fn owners(&self) -> Vec<usize> {
        let mut row_owner = vec![0; self.output.height];
        for (j, r) in self.rows.ranges.iter().enumerate() {
            row_owner[r.clone()].fill(j);
        }
        let mut col_owner = vec![0; self.output.width];
        for (j, r) in self.cols.ranges.iter().enumerate() {
            col_owner[r.clone()].fill(j);
        }
        row_owner
            .iter()
            .flat_map(|&i| col_owner.iter().map(move |&j| i * self.latent.width + j))
            .collect()
    }

    /// Offset of output pixel `(row, col)` from its latent code, with the
    /// owning latent cell mapped onto `[-1, 1]²`.
    #[inline]
    pub fn local(&self, row: usize, col: usize) -> [f64; 2] {
        [self.rows.local[row], self.cols.local[col]]
    }

    /// Local coordinates of every member of `group`, in group order.
    pub fn local_coords(&self, group: &Group) -> Vec<[f64; 2]> {
        (0..group.size())
            .map(|k| {
                let (r, c) = group.member(k);
                self.local(r, c)
            })
            .collect()
    }

    /// Top-left and bottom-right member coordinates (`x_tl`, `x_br`).
    pub fn bounds(&self, group: &Group) -> Option<([f64; 2], [f64; 2])> {
        if group.size() == 0 {
            return None;
        }
        let tl = self.output.coord(group.rows.start, group.cols.start);
        let br = self.output.coord(group.rows.end - 1, group.cols.end - 1);
        Some((tl, br))
    }
}

/// A contiguous run of group members decoded with one shared coarse pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub group: usize,
    /// Range into the group's member order.
    pub members: Range<usize>,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Grouping plus the per-group slice interval.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlan {
    pub grouping: Grouping,
    pub scale: f64,
    pub strategy: SliceStrategy,
    intervals: Vec<usize>,
}

impl GroupPlan {
    pub fn new(grouping: Grouping, scale: f64, strategy: SliceStrategy) -> Result<Self> {
        let intervals = grouping
            .groups()
            .map(|g| {
                if g.size() == 0 {
                    Ok(0)
                } else {
                    slice_interval(strategy, scale, g.size())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grouping,
            scale,
            strategy,
            intervals,
        })
    }

    /// Plan for upscaling a `lat_h × lat_w` latent grid by `scale`, with
    /// output size `floor(s·H) × floor(s·W)`.
    pub fn for_scale(lat_h: usize, lat_w: usize, scale: f64, strategy: SliceStrategy) -> Result<Self> {
        if !(scale >= 1.0) || !scale.is_finite() {
            return Err(Error::Argument(format!(
                "scale must be a finite value >= 1, got {scale}"
            )));
        }
        let latent = make_grid(lat_h, lat_w)?;
        let out = make_grid(scaled_len(lat_h, scale), scaled_len(lat_w, scale))?;
        Self::new(group_coordinates(out, latent)?, scale, strategy)
    }

    /// Plan for an explicit output size. The slicing scale is the geometric
    /// mean of the two axis ratios.
    pub fn for_size(lat_h: usize, lat_w: usize, out_h: usize, out_w: usize, strategy: SliceStrategy) -> Result<Self> {
        let latent = make_grid(lat_h, lat_w)?;
        let out = make_grid(out_h, out_w)?;
        let scale = ((out.len() as f64) / (latent.len() as f64)).sqrt().max(1.0);
        Self::new(group_coordinates(out, latent)?, scale, strategy)
    }

    /// Same plan with a caller-chosen slicing scale (used when the output
    /// size was fixed first and the nominal scale is known separately).
    pub fn with_scale(self, scale: f64) -> Result<Self> {
        Self::new(self.grouping, scale, self.strategy)
    }

    pub fn output(&self) -> CoordGrid {
        self.grouping.output
    }

    pub fn latent(&self) -> CoordGrid {
        self.grouping.latent
    }

    pub fn interval(&self, group: usize) -> usize {
        self.intervals[group]
    }

    pub fn slices_of(&self, group: &Group) -> Vec<Slice> {
        let g = group.size();
        if g == 0 {
            return Vec::new();
        }
        slice_group(g, self.intervals[group.id])
            .into_iter()
            .map(|members| Slice {
                group: group.id,
                members,
            })
            .collect()
    }

    /// Every slice in the plan, ordered by group then position.
    pub fn slices(&self) -> Vec<Slice> {
        self.grouping.groups().flat_map(|g| self.slices_of(&g)).collect()
    }

    /// `Σ_groups ceil(g / u)` without materialising slices.
    pub fn slice_count(&self) -> u64 {
        self.grouping
            .groups()
            .map(|g| {
                let u = self.intervals[g.id];
                if u == 0 {
                    0
                } else {
                    g.size().div_ceil(u) as u64
                }
            })
            .sum()
    }

    /// JSON debug dump of the plan: grid sizes, scale, strategy and per-group
    /// output ranges, interval and slice count.
    pub fn debug_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct GroupDump {
            latent: [usize; 2],
            rows: [usize; 2],
            cols: [usize; 2],
            size: usize,
            interval: usize,
            slices: usize,
        }
        let groups: Vec<GroupDump> = self
            .grouping
            .groups()
            .map(|g| GroupDump {
                latent: [g.lat_row, g.lat_col],
                rows: [g.rows.start, g.rows.end],
                cols: [g.cols.start, g.cols.end],
                size: g.size(),
                interval: self.intervals[g.id],
                slices: self.slices_of(&g).len(),
            })
            .collect();
        serde_json::json!({
            "output": self.output(),
            "latent": self.latent(),
            "scale": self.scale,
            "strategy": self.strategy,
            "groups": groups,
        })
    }
}
