//! Rasterization of temporal (1D), spatial (2D) and spatio-temporal (3D)
//! records onto the grid, followed by imputation, max scaling and broadcast
//! into a uniform `H x W x T x 1` feature stack.
//!
//! 1D series are carried as `STTensor`s on a 1x1 grid and 2D layers as
//! `STTensor`s with a single frame, so imputation and scaling share one code
//! path.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDateTime;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::grid::{GridSpec, ScaleRecord, STTensor};

/// Counters for records that could not be placed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub out_of_bounds: usize,
    pub out_of_period: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn merge(&mut self, other: Diagnostics) {
        self.out_of_bounds += other.out_of_bounds;
        self.out_of_period += other.out_of_period;
        self.warnings.extend(other.warnings);
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Timestamped multi-channel sample of a city-wide series (weather etc.).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSample {
    pub time: NaiveDateTime,
    pub values: Vec<f64>,
}

/// A static spatial record.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialRecord {
    /// Counts one occurrence in its cell, plus `values` added per attribute channel.
    Point { lon: f64, lat: f64, values: Vec<f64> },
    /// Counts one occurrence in every cell the polyline passes through.
    Line { coords: Vec<(f64, f64)> },
    /// `value` spread over cells in proportion to rectangle overlap.
    Area {
        min_lon: f64,
        min_lat: f64,
        max_lon: f64,
        max_lat: f64,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub pickup_lon: f64,
    pub pickup_lat: f64,
    pub dropoff_time: NaiveDateTime,
    pub dropoff_lon: f64,
    pub dropoff_lat: f64,
}

/// Which raw dimensionality a stacked feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    Spatiotemporal,
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub name: String,
    pub origin: Origin,
    /// `H x W x T x 1`, scaled to `[0, 1]`.
    pub tensor: STTensor,
}

/// Aligned, scaled features sharing one grid and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub grid: GridSpec,
    pub t: usize,
    pub features: Vec<Feature>,
}

fn bin_of(time: NaiveDateTime, start: NaiveDateTime, grid: &GridSpec, t: usize) -> Option<usize> {
    if time < start {
        return None;
    }
    let minutes = (time - start).num_seconds() as f64 / 60.0;
    let bin = (minutes / grid.time_step_minutes as f64).floor() as usize;
    (bin < t).then_some(bin)
}

/// Averages samples into `t` bins of `grid.time_step_minutes` starting at
/// `start`. Empty bins are flagged in the missing mask. Output lives on a 1x1
/// grid with `C = channels`.
pub fn aggregate_1d(samples: &[TemporalSample], grid: &GridSpec, start: NaiveDateTime, t: usize) -> Result<STTensor> {
    let Some(first) = samples.first() else {
        return Err(FairError::Empty("no temporal samples".into()));
    };
    let c = first.values.len();
    if samples.iter().any(|s| s.values.len() != c) {
        return Err(FairError::invalid("temporal samples", "inconsistent channel count"));
    }
    let mut sums = vec![0.0; t * c];
    let mut counts = vec![0usize; t];
    for s in samples {
        if let Some(b) = bin_of(s.time, start, grid, t) {
            counts[b] += 1;
            for (k, v) in s.values.iter().enumerate() {
                sums[b * c + k] += v;
            }
        }
    }
    let mut mask = vec![false; t * c];
    for b in 0..t {
        for k in 0..c {
            if counts[b] == 0 {
                mask[b * c + k] = true;
            } else {
                sums[b * c + k] /= counts[b] as f64;
            }
        }
    }
    let point = GridSpec {
        height: 1,
        width: 1,
        time_step_minutes: grid.time_step_minutes,
        bounds: None,
    };
    STTensor::new(point, t, c, sums, start)?.with_mask(mask)
}

fn cells_on_line(grid: &GridSpec, coords: &[(f64, f64)]) -> Result<BTreeSet<usize>> {
    let mut cells = BTreeSet::new();
    let b = grid
        .bounds
        .ok_or_else(|| FairError::invalid("grid", "geographic bounds are required to map coordinates"))?;
    let res = ((b.max_lon - b.min_lon) / grid.width as f64).min((b.max_lat - b.min_lat) / grid.height as f64) / 4.0;
    let mut visit = |lon: f64, lat: f64| -> Result<()> {
        if let Some((r, c)) = grid.cell_of(lon, lat)? {
            cells.insert(grid.index(r, c));
        }
        Ok(())
    };
    if let [(lon, lat)] = coords {
        visit(*lon, *lat)?;
    }
    for seg in coords.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len / res).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let f = k as f64 / steps as f64;
            visit(x0 + f * (x1 - x0), y0 + f * (y1 - y0))?;
        }
    }
    Ok(cells)
}

/// Rasterizes static layers into a single-frame `H x W x 1 x C` tensor.
///
/// Each layer contributes one count channel, followed by one channel per
/// point attribute when its points carry values.
pub fn rasterize_2d(layers: &[(String, Vec<SpatialRecord>)], grid: &GridSpec, start: NaiveDateTime) -> Result<(STTensor, Vec<String>, Diagnostics)> {
    let n = grid.n();
    let mut diag = Diagnostics::default();
    let mut channels: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (name, records) in layers {
        let attrs = records
            .iter()
            .filter_map(|r| match r {
                SpatialRecord::Point { values, .. } => Some(values.len()),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut count = vec![0.0; n];
        let mut attr = vec![vec![0.0; n]; attrs];
        let mut placed = 0usize;
        for rec in records {
            match rec {
                SpatialRecord::Point { lon, lat, values } => match grid.cell_of(*lon, *lat)? {
                    Some((r, c)) => {
                        let i = grid.index(r, c);
                        count[i] += 1.0;
                        for (k, v) in values.iter().enumerate() {
                            attr[k][i] += v;
                        }
                        placed += 1;
                    }
                    None => diag.out_of_bounds += 1,
                },
                SpatialRecord::Line { coords } => {
                    let cells = cells_on_line(grid, coords)?;
                    if cells.is_empty() {
                        diag.out_of_bounds += 1;
                    } else {
                        placed += 1;
                    }
                    for i in cells {
                        count[i] += 1.0;
                    }
                }
                SpatialRecord::Area {
                    min_lon,
                    min_lat,
                    max_lon,
                    max_lat,
                    value,
                } => {
                    let parts = grid.overlap_fractions(*min_lon, *min_lat, *max_lon, *max_lat)?;
                    if parts.is_empty() {
                        diag.out_of_bounds += 1;
                    } else {
                        placed += 1;
                    }
                    for (i, f) in parts {
                        count[i] += value * f;
                    }
                }
            }
        }
        if placed == 0 {
            diag.warn(format!("layer '{name}' has no in-bounds records; emitting zeros"));
        }
        channels.push(count);
        names.push(name.clone());
        for (k, a) in attr.into_iter().enumerate() {
            channels.push(a);
            names.push(format!("{name}.v{k}"));
        }
    }
    let c = channels.len();
    let mut values = vec![0.0; n * c];
    for (k, ch) in channels.iter().enumerate() {
        for i in 0..n {
            values[i * c + k] = ch[i];
        }
    }
    Ok((STTensor::new(grid.clone(), 1, c, values, start)?, names, diag))
}

/// Counts trips into `H x W x T x 2` flows: channel 0 in-flow (drop-offs),
/// channel 1 out-flow (pick-ups). Ends outside the grid or period are dropped
/// and tallied.
pub fn rasterize_3d(trips: &[TripRecord], grid: &GridSpec, start: NaiveDateTime, t: usize) -> Result<(STTensor, Diagnostics)> {
    let mut x = STTensor::zeros(grid.clone(), t, 2, start);
    let mut diag = Diagnostics::default();
    for trip in trips {
        for (channel, time, lon, lat) in [
            (1, trip.pickup_time, trip.pickup_lon, trip.pickup_lat),
            (0, trip.dropoff_time, trip.dropoff_lon, trip.dropoff_lat),
        ] {
            let Some(bin) = bin_of(time, start, grid, t) else {
                diag.out_of_period += 1;
                continue;
            };
            match grid.cell_of(lon, lat)? {
                Some((r, c)) => {
                    let o = x.offset(grid.index(r, c), bin, channel);
                    x.values[o] += 1.0;
                }
                None => diag.out_of_bounds += 1,
            }
        }
    }
    if !trips.is_empty() && x.values.iter().all(|v| *v == 0.0) {
        diag.warn("no trip endpoints fall inside the grid and period; emitting zeros".into());
    }
    Ok((x, diag))
}

/// Fills masked entries from originally observed values only:
/// 8-connected spatial neighbours at the same `(t, c)`, else temporal
/// neighbours `t - 1`, `t + 1`, else the channel's observed mean, else 0.
pub fn impute_missing(x: &STTensor) -> Result<(STTensor, Diagnostics)> {
    let Some(mask) = x.missing_mask.as_ref() else {
        return Err(FairError::invalid("imputation", "tensor has no missing mask"));
    };
    let mut diag = Diagnostics::default();
    let mut out = x.clone();
    out.missing_mask = None;
    let (h, w) = (x.grid.height as isize, x.grid.width as isize);
    let observed = |cell: usize, t: usize, c: usize| -> Option<f64> {
        let o = x.offset(cell, t, c);
        (!mask[o]).then(|| x.values[o])
    };
    let mut channel_mean = vec![None; x.c];
    for (c, slot) in channel_mean.iter_mut().enumerate() {
        let (mut s, mut k) = (0.0, 0usize);
        for cell in 0..x.grid.n() {
            for t in 0..x.t {
                if let Some(v) = observed(cell, t, c) {
                    s += v;
                    k += 1;
                }
            }
        }
        if k > 0 {
            *slot = Some(s / k as f64);
        } else if mask.iter().skip(c).step_by(x.c).any(|m| *m) {
            diag.warn(format!("channel {c} is entirely missing; filling with zeros"));
        }
    }
    for cell in 0..x.grid.n() {
        let (r, col) = x.grid.row_col(cell);
        for t in 0..x.t {
            for c in 0..x.c {
                let o = x.offset(cell, t, c);
                if !mask[o] {
                    continue;
                }
                let mean = |vals: &mut dyn Iterator<Item = f64>| {
                    let (mut s, mut k) = (0.0, 0usize);
                    for v in vals {
                        s += v;
                        k += 1;
                    }
                    (k > 0).then(|| s / k as f64)
                };
                let mut spatial = (-1isize..=1).flat_map(|dr| (-1isize..=1).map(move |dc| (dr, dc))).filter_map(|(dr, dc)| {
                    let (rr, cc) = (r as isize + dr, col as isize + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h || cc >= w {
                        return None;
                    }
                    observed(x.grid.index(rr as usize, cc as usize), t, c)
                });
                let mut temporal = [t.checked_sub(1), (t + 1 < x.t).then_some(t + 1)]
                    .into_iter()
                    .flatten()
                    .filter_map(|tt| observed(cell, tt, c));
                out.values[o] = mean(&mut spatial)
                    .or_else(|| mean(&mut temporal))
                    .or(channel_mean[c])
                    .unwrap_or(0.0);
            }
        }
    }
    Ok((out, diag))
}

/// Divides each channel by its maximum (after shifting channels with negative
/// values by their minimum). Zero-max channels stay zero with max 0.
pub fn max_scale(x: &STTensor) -> STTensor {
    let mut out = x.clone();
    let mut record = ScaleRecord {
        max: vec![0.0; x.c],
        shift: vec![0.0; x.c],
    };
    for c in 0..x.c {
        let vals = x.values.iter().skip(c).step_by(x.c);
        let min = vals.clone().copied().fold(f64::INFINITY, f64::min);
        let shift = if min < 0.0 { min } else { 0.0 };
        let max = vals.map(|v| v - shift).fold(0.0, f64::max);
        record.shift[c] = shift;
        record.max[c] = max;
        for v in out.values.iter_mut().skip(c).step_by(x.c) {
            *v = if max > 0.0 { ((*v - shift) / max).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out.scale_record = Some(record);
    out
}

/// Maps scaled values of `channel` back to original units.
pub fn unscale(values: &[f64], record: Option<&ScaleRecord>, channel: usize) -> Result<Vec<f64>> {
    let record = record.ok_or_else(|| FairError::MissingScaleRecord(channel.to_string()))?;
    let (max, shift) = match (record.max.get(channel), record.shift.get(channel)) {
        (Some(m), Some(s)) => (*m, *s),
        _ => return Err(FairError::MissingScaleRecord(channel.to_string())),
    };
    Ok(values.iter().map(|v| if max == 0.0 { shift } else { v * max + shift }).collect())
}

/// Named single-channel input for [`broadcast_align`].
pub struct NamedLayer {
    pub name: String,
    pub tensor: STTensor,
}

impl NamedLayer {
    /// Splits a multi-channel tensor into named single-channel layers.
    pub fn split(x: &STTensor, names: &[String]) -> Vec<NamedLayer> {
        assert_eq!(names.len(), x.c);
        names
            .iter()
            .enumerate()
            .map(|(c, name)| NamedLayer {
                name: name.clone(),
                tensor: x.channel(c),
            })
            .collect()
    }
}

/// Broadcasts 1D layers over space and 2D layers over time, producing a stack
/// ordered 3D, 2D, 1D with names sorted within each group.
pub fn broadcast_align(
    one_d: Vec<NamedLayer>,
    two_d: Vec<NamedLayer>,
    three_d: Vec<NamedLayer>,
    grid: &GridSpec,
    t: usize,
) -> Result<FeatureStack> {
    let n = grid.n();
    let mut features = Vec::new();
    let start = three_d
        .first()
        .or(one_d.first())
        .or(two_d.first())
        .map(|l| l.tensor.start_time)
        .unwrap_or_default();
    let check_scaled = |l: &NamedLayer| -> Result<()> {
        if l.tensor.c != 1 {
            return Err(FairError::Shape {
                expected: "single-channel layer".into(),
                got: format!("{} channels in '{}'", l.tensor.c, l.name),
            });
        }
        if l.tensor.scale_record.is_none() {
            return Err(FairError::invalid("feature", format!("layer '{}' is not max-scaled", l.name)));
        }
        Ok(())
    };
    let mismatch = |l: &NamedLayer| FairError::GridMismatch {
        left: l.name.clone(),
        right: "stack".into(),
        detail: format!("{}x{} vs {}x{}", l.tensor.grid.height, l.tensor.grid.width, grid.height, grid.width),
    };
    let horizon = |l: &NamedLayer| FairError::HorizonMismatch {
        left: l.name.clone(),
        right: "stack".into(),
        left_t: l.tensor.t,
        right_t: t,
    };
    let sorted = |mut layers: Vec<NamedLayer>| {
        layers.sort_by(|a, b| a.name.cmp(&b.name));
        layers
    };
    for l in sorted(three_d) {
        check_scaled(&l)?;
        if !l.tensor.grid.same_layout(grid) {
            return Err(mismatch(&l));
        }
        if l.tensor.t != t {
            return Err(horizon(&l));
        }
        features.push(Feature {
            name: l.name,
            origin: Origin::Spatiotemporal,
            tensor: l.tensor,
        });
    }
    for l in sorted(two_d) {
        check_scaled(&l)?;
        if l.tensor.grid.height != grid.height || l.tensor.grid.width != grid.width {
            return Err(mismatch(&l));
        }
        let mut x = STTensor::zeros(grid.clone(), t, 1, start);
        for cell in 0..n {
            let v = l.tensor.get(cell, 0, 0);
            for tt in 0..t {
                x.set(cell, tt, 0, v);
            }
        }
        x.scale_record = l.tensor.scale_record.clone();
        features.push(Feature {
            name: l.name,
            origin: Origin::Spatial,
            tensor: x,
        });
    }
    for l in sorted(one_d) {
        check_scaled(&l)?;
        if l.tensor.t != t {
            return Err(horizon(&l));
        }
        let mut x = STTensor::zeros(grid.clone(), t, 1, start);
        for cell in 0..n {
            for tt in 0..t {
                x.set(cell, tt, 0, l.tensor.get(0, tt, 0));
            }
        }
        x.scale_record = l.tensor.scale_record.clone();
        features.push(Feature {
            name: l.name,
            origin: Origin::Temporal,
            tensor: x,
        });
    }
    Ok(FeatureStack {
        grid: grid.clone(),
        t,
        features,
    })
}

impl FeatureStack {
    pub fn k(&self) -> usize {
        self.features.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn origins(&self) -> Vec<Origin> {
        self.features.iter().map(|f| f.origin).collect()
    }

    /// Scaled value of feature `k` at `(cell, t)`.
    #[inline]
    pub fn value(&self, k: usize, cell: usize, t: usize) -> f64 {
        self.features[k].tensor.get(cell, t, 0)
    }

    /// Frames `range` of every feature.
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> FeatureStack {
        FeatureStack {
            grid: self.grid.clone(),
            t: range.len(),
            features: self
                .features
                .iter()
                .map(|f| Feature {
                    name: f.name.clone(),
                    origin: f.origin,
                    tensor: f.tensor.slice_time(range.clone()),
                })
                .collect(),
        }
    }
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    s.parse::<i64>()
        .ok()
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .map(|d| d.naive_utc())
}

fn csv_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|source| FairError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    rdr.records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| FairError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn malformed(path: &Path, line: usize, what: &str) -> FairError {
    FairError::invalid("csv", format!("{}: row {line}: {what}", path.display()))
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| malformed(path, line, &format!("'{s}' is not a number")))
}

/// `timestamp,value[,value...]`
pub fn read_temporal_csv(path: &Path) -> Result<Vec<TemporalSample>> {
    csv_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let time = r
                .get(0)
                .and_then(parse_time)
                .ok_or_else(|| malformed(path, i + 1, "bad timestamp"))?;
            let values = r.iter().skip(1).map(|v| parse_f64(path, i + 1, v)).collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(malformed(path, i + 1, "missing value column"));
            }
            Ok(TemporalSample { time, values })
        })
        .collect()
}

/// `lon,lat[,value...]`
pub fn read_points_csv(path: &Path) -> Result<Vec<SpatialRecord>> {
    csv_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() < 2 {
                return Err(malformed(path, i + 1, "expected lon,lat"));
            }
            let lon = parse_f64(path, i + 1, &r[0])?;
            let lat = parse_f64(path, i + 1, &r[1])?;
            let values = r.iter().skip(2).map(|v| parse_f64(path, i + 1, v)).collect::<Result<Vec<_>>>()?;
            Ok(SpatialRecord::Point { lon, lat, values })
        })
        .collect()
}

/// `pickup_time,pickup_lon,pickup_lat,dropoff_time,dropoff_lon,dropoff_lat`
pub fn read_trips_csv(path: &Path) -> Result<Vec<TripRecord>> {
    csv_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != 6 {
                return Err(malformed(path, i + 1, "expected 6 columns"));
            }
            let time = |s: &str| parse_time(s).ok_or_else(|| malformed(path, i + 1, "bad timestamp"));
            Ok(TripRecord {
                pickup_time: time(&r[0])?,
                pickup_lon: parse_f64(path, i + 1, &r[1])?,
                pickup_lat: parse_f64(path, i + 1, &r[2])?,
                dropoff_time: time(&r[3])?,
                dropoff_lon: parse_f64(path, i + 1, &r[4])?,
                dropoff_lat: parse_f64(path, i + 1, &r[5])?,
            })
        })
        .collect()
}

pub fn write_trips_csv(path: &Path, trips: &[TripRecord]) -> Result<()> {
    let wrap = |source| FairError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["pickup_time", "pickup_lon", "pickup_lat", "dropoff_time", "dropoff_lon", "dropoff_lat"])
        .map_err(wrap)?;
    let fmt = |t: NaiveDateTime| t.format("%Y-%m-%d %H:%M:%S").to_string();
    for t in trips {
        w.write_record([
            fmt(t.pickup_time),
            t.pickup_lon.to_string(),
            t.pickup_lat.to_string(),
            fmt(t.dropoff_time),
            t.dropoff_lon.to_string(),
            t.dropoff_lat.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| FairError::io(path, e))
}
