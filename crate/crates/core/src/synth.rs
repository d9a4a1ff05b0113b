//! Synthetic urban scenarios with a planted demographic bias.
//!
//! Observed demand is `X = max(0, B * (1 + beta * (1 - s)) + noise)` where
//! `B` is a per-cell seasonal base demand and `s` the disadvantaged share.
//! Advantaged cells (low `s`) are therefore over-represented in observed
//! demand by a factor that is known exactly.

use std::f64::consts::PI;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::grid::{label_groups, DemographicMap, GeoBounds, GridSpec, STTensor, SensitiveMap};
use crate::raster::{broadcast_align, max_scale, FeatureStack, NamedLayer, TripRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Box-smoothed random field.
    #[default]
    Smooth,
    /// `s = 1` on the western half, 0 on the eastern half.
    TwoBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub height: usize,
    pub width: usize,
    pub t: usize,
    pub seed: u64,
    pub beta_bias: f64,
    /// Box-kernel radius in cells.
    pub smooth_radius: usize,
    /// Seasonal period in steps.
    pub period: usize,
    pub noise: f64,
    /// Mean base demand of a cell with average population.
    pub base_demand: f64,
    /// Relative spread of per-cell amplitudes around the population share.
    pub amp_spread: f64,
    /// Relative spread of population counts.
    pub pop_spread: f64,
    pub layout: Layout,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            t: 256,
            seed: 0,
            beta_bias: 1.0,
            smooth_radius: 2,
            period: 24,
            noise: 1.0,
            base_demand: 20.0,
            amp_spread: 0.5,
            pop_spread: 1.0,
            layout: Layout::Smooth,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, reason: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(FairError::invalid("scenario config", format!("{what}: {reason}")))
            }
        };
        check(self.height > 0 && self.width > 0, "grid", "dimensions must be positive")?;
        check(self.height * self.width >= 2, "grid", "needs at least two cells")?;
        check(self.t > 0, "t", "must be positive")?;
        check(self.period > 0, "period", "must be positive")?;
        check(self.beta_bias >= 0.0 && self.beta_bias.is_finite(), "beta_bias", "must be finite and >= 0")?;
        check(self.noise >= 0.0 && self.noise.is_finite(), "noise", "must be finite and >= 0")?;
        check(self.base_demand > 0.0 && self.base_demand.is_finite(), "base_demand", "must be positive")?;
        check((0.0..2.0).contains(&self.amp_spread), "amp_spread", "must lie in [0, 2)")?;
        check(self.pop_spread >= 0.0 && self.pop_spread.is_finite(), "pop_spread", "must be finite and >= 0")
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.height, self.width)?.with_bounds(default_bounds())
    }
}

/// Lower Manhattan-sized box used when exporting synthetic trips.
pub fn default_bounds() -> GeoBounds {
    GeoBounds {
        min_lon: -74.02,
        max_lon: -73.94,
        min_lat: 40.70,
        max_lat: 40.78,
    }
}

pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// Everything needed to recompute the scenario's observed demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub config: ScenarioConfig,
    pub s: SensitiveMap,
    pub demographics: DemographicMap,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    /// Unbiased base demand, `base[cell * T + t]`.
    pub base: Vec<f64>,
    /// Realized biased demand, same layout.
    pub x: Vec<f64>,
}

impl ScenarioTruth {
    /// Noise-free biased demand `B * (1 + beta * (1 - s))`.
    pub fn expected_demand(&self) -> Vec<f64> {
        let t = self.config.t;
        self.base
            .iter()
            .enumerate()
            .map(|(k, b)| b * (1.0 + self.config.beta_bias * (1.0 - self.s.values()[k / t])))
            .collect()
    }

    /// Observed demand as a single-channel tensor in original units.
    pub fn demand_tensor(&self) -> Result<STTensor> {
        STTensor::new(self.s.grid().clone(), self.config.t, 1, self.x.clone(), default_start())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|source| FairError::Json {
            context: "scenario truth".into(),
            source,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|source| FairError::Json {
            context: "scenario truth".into(),
            source,
        })
    }
}

/// Mean over a `(2r+1)^2` window clipped at the grid edge.
fn box_smooth(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for row in 0..h {
        for col in 0..w {
            let (r0, r1) = (row.saturating_sub(r), (row + r).min(h - 1));
            let (c0, c1) = (col.saturating_sub(r), (col + r).min(w - 1));
            let mut sum = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    sum += v[rr * w + cc];
                }
            }
            out[row * w + col] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; v.len()]
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, r: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    min_max(&box_smooth(&raw, h, w, r))
}

/// Generates the feature stack (`demand`, `poi`, `temperature`), the
/// sensitive map, demographics and the full ground truth.
///
/// Random draws happen in a fixed order that does not depend on `beta_bias`,
/// so scenarios that differ only in bias share every draw, noise included.
pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<(FeatureStack, SensitiveMap, DemographicMap, ScenarioTruth)> {
    cfg.validate()?;
    let (h, w, t) = (cfg.height, cfg.width, cfg.t);
    let n = h * w;
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let smooth_s = smooth_field(&mut rng, h, w, cfg.smooth_radius);
    let s = match cfg.layout {
        Layout::Smooth => smooth_s,
        Layout::TwoBlock => (0..n).map(|i| if i % w < w.div_ceil(2) { 1.0 } else { 0.0 }).collect(),
    };
    let pop = smooth_field(&mut rng, h, w, cfg.smooth_radius);
    let counts: Vec<f64> = pop.iter().map(|f| 1.0 + cfg.pop_spread * f).collect();
    let w_plus: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
    let dem = DemographicMap::from_counts(grid.clone(), &counts, w_plus)?;

    let amp_u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let phase: Vec<f64> = (0..n).map(|_| 2.0 * PI * rng.random::<f64>()).collect();
    let amplitude: Vec<f64> = (0..n)
        .map(|i| cfg.base_demand * n as f64 * dem.p()[i] * (1.0 + cfg.amp_spread * (amp_u[i] - 0.5)))
        .collect();
    let poi_noise = smooth_field(&mut rng, h, w, cfg.smooth_radius);
    let temp_phase = 2.0 * PI * rng.random::<f64>();

    let mut base = vec![0.0; n * t];
    let mut x = vec![0.0; n * t];
    for i in 0..n {
        for tt in 0..t {
            let k = i * t + tt;
            let eps: f64 = StandardNormal.sample(&mut rng);
            base[k] = amplitude[i] * (1.0 + (2.0 * PI * tt as f64 / cfg.period as f64 + phase[i]).sin());
            x[k] = (base[k] * (1.0 + cfg.beta_bias * (1.0 - s[i])) + cfg.noise * eps).max(0.0);
        }
    }

    let start = default_start();
    let demand = max_scale(&STTensor::new(grid.clone(), t, 1, x.clone(), start)?);
    let poi_raw: Vec<f64> = (0..n).map(|i| 0.7 * (1.0 - s[i]) + 0.3 * poi_noise[i]).collect();
    let poi = max_scale(&STTensor::new(grid.clone(), 1, 1, poi_raw, start)?);
    let point = GridSpec {
        height: 1,
        width: 1,
        ..grid.clone()
    };
    let temp_raw: Vec<f64> = (0..t)
        .map(|tt| 10.0 + 8.0 * (2.0 * PI * tt as f64 / cfg.period as f64 + temp_phase).sin())
        .collect();
    let temperature = max_scale(&STTensor::new(point, t, 1, temp_raw, start)?);
    let stack = broadcast_align(
        vec![NamedLayer {
            name: "temperature".into(),
            tensor: temperature,
        }],
        vec![NamedLayer {
            name: "poi".into(),
            tensor: poi,
        }],
        vec![NamedLayer {
            name: "demand".into(),
            tensor: demand,
        }],
        &grid,
        t,
    )?;

    let sens = SensitiveMap::new(grid, s)?;
    let truth = ScenarioTruth {
        config: cfg.clone(),
        s: sens.clone(),
        demographics: dem.clone(),
        amplitude,
        phase,
        base,
        x,
    };
    Ok((stack, sens, dem, truth))
}

/// Region-based fairness gap of the realized demand over the whole horizon.
pub fn oracle_rfg(truth: &ScenarioTruth) -> Result<f64> {
    oracle_rfg_range(truth, 0..truth.config.t)
}

/// Direct evaluation of the per-capita group gap over frames `range`.
pub fn oracle_rfg_range(truth: &ScenarioTruth, range: std::ops::Range<usize>) -> Result<f64> {
    let t = truth.config.t;
    if range.is_empty() || range.end > t {
        return Err(FairError::invalid("oracle range", format!("{range:?} not within 0..{t}")));
    }
    let len = range.len() as f64;
    let p = truth.demographics.p();
    let w_plus = truth.demographics.w_plus();
    let mut adv = (0.0, 0.0, 0usize);
    let mut dis = (0.0, 0.0, 0usize);
    for cell in 0..p.len() {
        let mut total = 0.0;
        for tt in range.clone() {
            total += truth.x[cell * t + tt];
        }
        let acc = if w_plus[cell] >= 0.5 { &mut adv } else { &mut dis };
        acc.0 += total / len;
        acc.1 += p[cell];
        acc.2 += 1;
    }
    for (acc, name) in [(&adv, "advantaged"), (&dis, "disadvantaged")] {
        if acc.2 == 0 {
            return Err(FairError::EmptyGroup(name));
        }
        if acc.1 <= 0.0 {
            return Err(FairError::ZeroMass(name));
        }
    }
    Ok(adv.0 / adv.1 - dis.0 / dis.1)
}

/// Null distribution of the gap when per-cell mean demands are shuffled
/// across cells. Returns `(mean, std)` over `n_perm` permutations.
pub fn permutation_null(truth: &ScenarioTruth, n_perm: usize, seed: u64) -> Result<(f64, f64)> {
    use rand::seq::SliceRandom;
    let t = truth.config.t;
    let means: Vec<f64> = truth.x.chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
    let labels = label_groups(&truth.demographics);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = means.clone();
    let mut values = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        values.push(crate::fairness::rfg_from_means(&shuffled, truth.demographics.p(), &labels)?);
    }
    let m = values.iter().sum::<f64>() / n_perm as f64;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_perm.max(2) - 1) as f64;
    Ok((m, var.sqrt()))
}

/// Turns rounded demand into individual trips: pick-ups in the demand cell,
/// drop-offs in a random cell during the same step.
pub fn export_trips(truth: &ScenarioTruth, seed: u64) -> Result<Vec<TripRecord>> {
    let grid = truth.config.grid()?;
    let b = grid.bounds.expect("scenario grid has bounds");
    let (h, w, t) = (grid.height, grid.width, truth.config.t);
    let dlon = (b.max_lon - b.min_lon) / w as f64;
    let dlat = (b.max_lat - b.min_lat) / h as f64;
    let point_in = |rng: &mut ChaCha8Rng, cell: usize| {
        let (r, c) = grid.row_col(cell);
        let lon = b.min_lon + (c as f64 + 0.1 + 0.8 * rng.random::<f64>()) * dlon;
        let lat = b.max_lat - (r as f64 + 0.1 + 0.8 * rng.random::<f64>()) * dlat;
        (lon, lat)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = i64::from(grid.time_step_minutes) * 60;
    let start = default_start();
    let mut trips = Vec::new();
    for cell in 0..grid.n() {
        for tt in 0..t {
            for _ in 0..truth.x[cell * t + tt].round() as usize {
                let at = start + TimeDelta::seconds(tt as i64 * step + rng.random_range(0..step));
                let (plon, plat) = point_in(&mut rng, cell);
                let dest = rng.random_range(0..grid.n());
                let (dlon_, dlat_) = point_in(&mut rng, dest);
                trips.push(TripRecord {
                    pickup_time: at,
                    pickup_lon: plon,
                    pickup_lat: plat,
                    dropoff_time: at,
                    dropoff_lon: dlon_,
                    dropoff_lat: dlat_,
                });
            }
        }
    }
    Ok(trips)
}
