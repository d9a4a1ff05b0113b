//! Spatial grid, demographic overlays and the spatio-temporal tensor types
//! shared by every other module.
//!
//! Cells are indexed row-major with the origin at the north-west corner:
//! cell `(row, col)` has index `row * width + col`, row 0 is the northern
//! edge and column 0 the western edge.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};

/// Geographic extent of the grid (degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub min_lon: f64,
    pub max_lon: f64,
    pub min_lat: f64,
    pub max_lat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_time_step")]
    pub time_step_minutes: u32,
    #[serde(default)]
    pub bounds: Option<GeoBounds>,
}

fn default_time_step() -> u32 {
    30
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let g = Self {
            height,
            width,
            time_step_minutes: default_time_step(),
            bounds: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_bounds(mut self, bounds: GeoBounds) -> Result<Self> {
        if !(bounds.max_lon > bounds.min_lon && bounds.max_lat > bounds.min_lat) {
            return Err(FairError::invalid("grid bounds", format!("{bounds:?} is empty")));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_time_step(mut self, minutes: u32) -> Result<Self> {
        self.time_step_minutes = minutes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(FairError::invalid(
                "grid",
                format!("dimensions must be positive, got {}x{}", self.height, self.width),
            ));
        }
        if self.time_step_minutes == 0 {
            return Err(FairError::invalid("grid", "time_step_minutes must be positive"));
        }
        Ok(())
    }

    /// Total number of cells `n = H * W`.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    /// Same spatial layout and time step; bounds are metadata and ignored.
    pub fn same_layout(&self, other: &GridSpec) -> bool {
        self.height == other.height && self.width == other.width && self.time_step_minutes == other.time_step_minutes
    }

    fn bounds_or_err(&self) -> Result<GeoBounds> {
        self.bounds
            .ok_or_else(|| FairError::invalid("grid", "geographic bounds are required to map coordinates"))
    }

    /// Cell containing `(lon, lat)`, or `None` when outside the bounds.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Result<Option<(usize, usize)>> {
        let b = self.bounds_or_err()?;
        if !(lon >= b.min_lon && lon <= b.max_lon && lat >= b.min_lat && lat <= b.max_lat) {
            return Ok(None);
        }
        let fx = (lon - b.min_lon) / (b.max_lon - b.min_lon) * self.width as f64;
        let fy = (b.max_lat - lat) / (b.max_lat - b.min_lat) * self.height as f64;
        let col = (fx.floor() as usize).min(self.width - 1);
        let row = (fy.floor() as usize).min(self.height - 1);
        Ok(Some((row, col)))
    }

    /// Fractions of the lon/lat rectangle falling in each cell, as
    /// `(cell index, fraction)` pairs. Fractions sum to the in-bounds share.
    pub fn overlap_fractions(&self, min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Vec<(usize, f64)>> {
        let b = self.bounds_or_err()?;
        let area = (max_lon - min_lon) * (max_lat - min_lat);
        if !(area > 0.0) {
            return Err(FairError::invalid("rectangle", "area must be positive"));
        }
        let cw = (b.max_lon - b.min_lon) / self.width as f64;
        let ch = (b.max_lat - b.min_lat) / self.height as f64;
        let mut out = Vec::new();
        for row in 0..self.height {
            let top = b.max_lat - row as f64 * ch;
            let bottom = top - ch;
            let oy = (max_lat.min(top) - min_lat.max(bottom)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for col in 0..self.width {
                let left = b.min_lon + col as f64 * cw;
                let right = left + cw;
                let ox = (max_lon.min(right) - min_lon.max(left)).max(0.0);
                if ox > 0.0 {
                    out.push((self.index(row, col), ox * oy / area));
                }
            }
        }
        Ok(out)
    }
}

/// Per-cell population shares and advantaged-group fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicMap {
    grid: GridSpec,
    p: Vec<f64>,
    w_plus: Vec<f64>,
    w_minus: Vec<f64>,
}

impl DemographicMap {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(grid: GridSpec, p: Vec<f64>, w_plus: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        let n = grid.n();
        if p.len() != n || w_plus.len() != n {
            return Err(FairError::Shape {
                expected: format!("{n} cells"),
                got: format!("p has {}, w_plus has {}", p.len(), w_plus.len()),
            });
        }
        if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(FairError::invalid("population share", format!("{bad} is negative or non-finite")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(FairError::invalid("population shares", format!("sum to {total}, expected 1")));
        }
        if let Some(bad) = w_plus.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FairError::invalid("w_plus", format!("{bad} outside [0, 1]")));
        }
        let w_minus = w_plus.iter().map(|w| 1.0 - w).collect();
        Ok(Self { grid, p, w_plus, w_minus })
    }

    /// Builds a map from raw population counts, normalizing them to shares.
    pub fn from_counts(grid: GridSpec, counts: &[f64], w_plus: Vec<f64>) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) || counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(FairError::invalid("population counts", "must be non-negative with positive total"));
        }
        Self::new(grid, counts.iter().map(|c| c / total).collect(), w_plus)
    }

    /// Reads `cell_row,cell_col,population,w_plus`. Cells absent from the file
    /// get zero population and `w_plus = 0.5`.
    pub fn read_csv(path: &Path, grid: GridSpec) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            cell_row: usize,
            cell_col: usize,
            population: f64,
            w_plus: f64,
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let n = grid.n();
        let mut counts = vec![0.0; n];
        let mut w_plus = vec![0.5; n];
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|source| FairError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            if row.cell_row >= grid.height || row.cell_col >= grid.width {
                return Err(FairError::invalid(
                    "demographics",
                    format!("cell ({}, {}) outside {}x{} grid", row.cell_row, row.cell_col, grid.height, grid.width),
                ));
            }
            let i = grid.index(row.cell_row, row.cell_col);
            counts[i] = row.population;
            w_plus[i] = row.w_plus;
        }
        Self::from_counts(grid, &counts, w_plus)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let wrap = |source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        };
        w.write_record(["cell_row", "cell_col", "population", "w_plus"]).map_err(wrap)?;
        for i in 0..self.grid.n() {
            let (r, c) = self.grid.row_col(i);
            w.write_record([r.to_string(), c.to_string(), format!("{:?}", self.p[i]), format!("{:?}", self.w_plus[i])])
                .map_err(wrap)?;
        }
        w.flush().map_err(|e| FairError::io(path, e))
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn w_plus(&self) -> &[f64] {
        &self.w_plus
    }

    pub fn w_minus(&self) -> &[f64] {
        &self.w_minus
    }

    pub fn sensitive_map(&self) -> SensitiveMap {
        SensitiveMap {
            grid: self.grid.clone(),
            s: self.w_minus.clone(),
        }
    }
}

/// Static per-cell sensitive-attribute intensity (disadvantaged share).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveMap {
    grid: GridSpec,
    s: Vec<f64>,
}

impl SensitiveMap {
    pub fn new(grid: GridSpec, s: Vec<f64>) -> Result<Self> {
        if s.len() != grid.n() {
            return Err(FairError::Shape {
                expected: format!("{} cells", grid.n()),
                got: s.len().to_string(),
            });
        }
        if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FairError::invalid("sensitive map", format!("{bad} outside [0, 1]")));
        }
        Ok(Self { grid, s })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }
}

/// Per-channel inverse-scaling record: `original = scaled * max + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub max: Vec<f64>,
    pub shift: Vec<f64>,
}

/// `H x W x T x C` tensor, stored with channel fastest:
/// `((row * W + col) * T + t) * C + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct STTensor {
    pub grid: GridSpec,
    pub t: usize,
    pub c: usize,
    pub values: Vec<f64>,
    pub start_time: NaiveDateTime,
    pub scale_record: Option<ScaleRecord>,
    pub missing_mask: Option<Vec<bool>>,
}

impl STTensor {
    pub fn new(grid: GridSpec, t: usize, c: usize, values: Vec<f64>, start_time: NaiveDateTime) -> Result<Self> {
        let expected = grid.n() * t * c;
        if values.len() != expected {
            return Err(FairError::Shape {
                expected: format!("{}x{}x{t}x{c} = {expected} values", grid.height, grid.width),
                got: values.len().to_string(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FairError::invalid("tensor", "values must be finite"));
        }
        Ok(Self {
            grid,
            t,
            c,
            values,
            start_time,
            scale_record: None,
            missing_mask: None,
        })
    }

    pub fn zeros(grid: GridSpec, t: usize, c: usize, start_time: NaiveDateTime) -> Self {
        let len = grid.n() * t * c;
        Self {
            grid,
            t,
            c,
            values: vec![0.0; len],
            start_time,
            scale_record: None,
            missing_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(FairError::Shape {
                expected: self.values.len().to_string(),
                got: mask.len().to_string(),
            });
        }
        self.missing_mask = Some(mask);
        Ok(self)
    }

    #[inline]
    pub fn offset(&self, cell: usize, t: usize, c: usize) -> usize {
        (cell * self.t + t) * self.c + c
    }

    #[inline]
    pub fn get(&self, cell: usize, t: usize, c: usize) -> f64 {
        self.values[self.offset(cell, t, c)]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, t: usize, c: usize, v: f64) {
        let o = self.offset(cell, t, c);
        self.values[o] = v;
    }

    /// Copies channel `c` into a single-channel tensor (scale record and mask follow).
    pub fn channel(&self, c: usize) -> STTensor {
        let n = self.grid.n();
        let mut values = Vec::with_capacity(n * self.t);
        let mut mask = self.missing_mask.as_ref().map(|_| Vec::with_capacity(n * self.t));
        for cell in 0..n {
            for t in 0..self.t {
                let o = self.offset(cell, t, c);
                values.push(self.values[o]);
                if let (Some(m), Some(src)) = (mask.as_mut(), self.missing_mask.as_ref()) {
                    m.push(src[o]);
                }
            }
        }
        STTensor {
            grid: self.grid.clone(),
            t: self.t,
            c: 1,
            values,
            start_time: self.start_time,
            scale_record: self.scale_record.as_ref().map(|r| ScaleRecord {
                max: vec![r.max[c]],
                shift: vec![r.shift[c]],
            }),
            missing_mask: mask,
        }
    }

    /// Frames `range` as a new tensor.
    pub fn slice_time(&self, range: Range<usize>) -> STTensor {
        assert!(range.end <= self.t && range.start <= range.end);
        let n = self.grid.n();
        let len = range.len();
        let mut values = Vec::with_capacity(n * len * self.c);
        for cell in 0..n {
            let a = self.offset(cell, range.start, 0);
            values.extend_from_slice(&self.values[a..a + len * self.c]);
        }
        let start_time = self.start_time + chrono::Duration::minutes(self.grid.time_step_minutes as i64 * range.start as i64);
        STTensor {
            grid: self.grid.clone(),
            t: len,
            c: self.c,
            values,
            start_time,
            scale_record: self.scale_record.clone(),
            missing_mask: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Advantaged,
    Disadvantaged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabels(pub Vec<Group>);

impl GroupLabels {
    pub fn count(&self, g: Group) -> usize {
        self.0.iter().filter(|x| **x == g).count()
    }
}

/// Majority labelling: a cell is advantaged iff `w_plus >= 0.5`.
pub fn label_groups(dem: &DemographicMap) -> GroupLabels {
    label_fractions(dem.w_plus())
}

pub(crate) fn label_fractions(w_plus: &[f64]) -> GroupLabels {
    GroupLabels(
        w_plus
            .iter()
            .map(|&w| if w >= 0.5 { Group::Advantaged } else { Group::Disadvantaged })
            .collect(),
    )
}

/// Per-cell predicted demand over an evaluation horizon, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSeries {
    grid: GridSpec,
    horizon: usize,
    /// `yhat[cell * horizon + t]`
    yhat: Vec<f64>,
    truth: Option<Vec<f64>>,
    mean_yhat: Vec<f64>,
}

impl PredictionSeries {
    pub fn new(grid: GridSpec, horizon: usize, yhat: Vec<f64>, truth: Option<Vec<f64>>) -> Result<Self> {
        let n = grid.n();
        if horizon == 0 {
            return Err(FairError::Empty("prediction horizon".into()));
        }
        if yhat.len() != n * horizon {
            return Err(FairError::Shape {
                expected: format!("{n} cells x {horizon} steps"),
                got: yhat.len().to_string(),
            });
        }
        if let Some(y) = &truth {
            if y.len() != yhat.len() {
                return Err(FairError::Shape {
                    expected: yhat.len().to_string(),
                    got: format!("{} ground-truth values", y.len()),
                });
            }
        }
        let mean_yhat = yhat.chunks(horizon).map(|c| c.iter().sum::<f64>() / horizon as f64).collect();
        Ok(Self {
            grid,
            horizon,
            yhat,
            truth,
            mean_yhat,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn yhat(&self) -> &[f64] {
        &self.yhat
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    /// `E_T[yhat]` per cell.
    pub fn mean_yhat(&self) -> &[f64] {
        &self.mean_yhat
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Result<Self> {
        if truth.len() != self.yhat.len() {
            return Err(FairError::Shape {
                expected: self.yhat.len().to_string(),
                got: truth.len().to_string(),
            });
        }
        self.truth = Some(truth);
        Ok(self)
    }
}

/// One training example: input frames `inputs` and the frame right after them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPair {
    pub inputs: Range<usize>,
    pub target: usize,
}

/// Sliding windows over the frames of `x`; see [`window_pairs`].
pub fn make_windows(x: &STTensor, window_len: usize, stride: usize) -> Result<Vec<WindowPair>> {
    window_pairs(x.t, window_len, stride)
}

/// Sliding windows of length `window_len` advanced by `stride` over `t`
/// frames, each paired with the frame that follows it.
pub fn window_pairs(t: usize, window_len: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if window_len == 0 || stride == 0 {
        return Err(FairError::invalid("window", "window length and stride must be at least 1"));
    }
    if t < window_len + 1 {
        return Err(FairError::SeriesTooShort {
            len: t,
            needed: window_len + 1,
        });
    }
    Ok((0..t - window_len)
        .step_by(stride)
        .map(|s| WindowPair {
            inputs: s..s + window_len,
            target: s + window_len,
        })
        .collect())
}

/// Checks that every tensor shares the demographic map's grid and a compatible
/// horizon (equal, or static with `T = 1`).
pub fn validate_alignment(tensors: &[(&str, &STTensor)], dem: &DemographicMap) -> Result<()> {
    for (name, x) in tensors {
        if x.grid.height != dem.grid().height || x.grid.width != dem.grid().width {
            return Err(FairError::GridMismatch {
                left: (*name).to_string(),
                right: "demographics".into(),
                detail: format!(
                    "{}x{} vs {}x{}",
                    x.grid.height,
                    x.grid.width,
                    dem.grid().height,
                    dem.grid().width
                ),
            });
        }
    }
    for (i, (na, a)) in tensors.iter().enumerate() {
        for (nb, b) in &tensors[i + 1..] {
            if !a.grid.same_layout(&b.grid) {
                return Err(FairError::GridMismatch {
                    left: (*na).to_string(),
                    right: (*nb).to_string(),
                    detail: "time step differs".into(),
                });
            }
            if a.t != b.t && a.t != 1 && b.t != 1 {
                return Err(FairError::HorizonMismatch {
                    left: (*na).to_string(),
                    right: (*nb).to_string(),
                    left_t: a.t,
                    right_t: b.t,
                });
            }
        }
    }
    Ok(())
}
