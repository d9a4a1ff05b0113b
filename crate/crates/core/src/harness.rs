//! Run configuration and the commands behind the `fairdrl` binary.
//!
//! Every command writes into its own output directory and depends only on
//! its inputs, the configuration and the seed, so re-running into a fresh
//! directory reproduces the same artifacts (timestamps aside).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::fairness::{build_report, compute_metrics, FairnessReport, Metrics, ReportMeta};
use crate::fdt::{container_to_stack, stack_to_container, FdtContainer};
use crate::grid::{label_groups, DemographicMap, GridSpec, PredictionSeries, SensitiveMap};
use crate::model::Model;
use crate::raster::{
    aggregate_1d, broadcast_align, impute_missing, max_scale, rasterize_2d, rasterize_3d, read_points_csv,
    read_temporal_csv, read_trips_csv, write_trips_csv, Diagnostics, FeatureStack, NamedLayer,
};
use crate::synth::{export_trips, gen_scenario, ScenarioConfig, ScenarioTruth};
use crate::train::{
    checkpoint_load, checkpoint_save, config_hash, fit_forecast_head, ha_baseline, predict, rolling_predict,
    train_with, HeadFit, TrainConfig, TrainLog,
};

/// Where the data of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        scenario: ScenarioConfig,
    },
    /// A rasterized `.fdt` stack and a demographics CSV on the same grid.
    Files { stack: PathBuf, demographics: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            scenario: ScenarioConfig::default(),
        }
    }
}

/// Inputs of `rasterize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub grid: GridSpec,
    pub start: NaiveDateTime,
    /// Number of time bins.
    pub t: usize,
    /// Trips CSV rasterized to `inflow`/`outflow` channels.
    pub trips: Option<PathBuf>,
    /// Static point layers, by name.
    #[serde(default)]
    pub points: BTreeMap<String, PathBuf>,
    /// City-wide series CSV; columns after the timestamp are named here.
    pub temporal: Option<PathBuf>,
    #[serde(default)]
    pub temporal_names: Vec<String>,
}

/// Which fairness modules an ablation cell keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Both,
    SensitiveOnly,
    NonsensitiveOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Both, Variant::SensitiveOnly, Variant::NonsensitiveOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Both => "both",
            Variant::SensitiveOnly => "sensitive_only",
            Variant::NonsensitiveOnly => "nonsensitive_only",
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        cfg.sensitive = self != Variant::NonsensitiveOnly;
        cfg.nonsensitive = self != Variant::SensitiveOnly;
    }
}

/// Complete declarative description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub data: DataSource,
    pub raster: Option<RasterConfig>,
    pub train: TrainConfig,
    /// Leading fraction of frames used for training; the rest is evaluated.
    pub train_fraction: f64,
    /// Evaluation frames after the split; all remaining frames when absent.
    pub horizon: Option<usize>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            data: DataSource::default(),
            raster: None,
            train: TrainConfig::default(),
            train_fraction: 0.75,
            horizon: None,
            out_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2, 3, 4],
            lambdas: vec![0.0, 0.1, 0.3, 0.6],
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| FairError::Json {
            context: context.to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FairError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(FairError::invalid(
                "run config",
                format!("train_fraction must be in (0, 1), got {}", self.train_fraction),
            ));
        }
        if self.horizon == Some(0) {
            return Err(FairError::invalid("run config", "horizon must be at least 1"));
        }
        if self.seeds.is_empty() || self.lambdas.is_empty() {
            return Err(FairError::invalid("run config", "seeds and lambdas must be non-empty"));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(FairError::invalid("run config", format!("lambda must be >= 0, got {bad}")));
        }
        if let DataSource::Synthetic { scenario } = &self.data {
            scenario.validate()?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; independent of key order.
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Training config of one sweep cell.
    pub fn cell_train_config(&self, lambda: f64, seed: u64, variant: Variant) -> TrainConfig {
        let mut t = self.train.clone();
        t.lambda = lambda;
        t.seed = seed;
        variant.apply(&mut t);
        t
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FairError::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| FairError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FairError::io(dir, e))
}

fn now() -> String {
    Utc::now().to_rfc3339()
}

/// Loaded data of a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub stack: FeatureStack,
    pub s: SensitiveMap,
    pub dem: DemographicMap,
    pub truth: Option<ScenarioTruth>,
}

impl Dataset {
    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Synthetic { scenario } => {
                let (stack, s, dem, truth) = gen_scenario(scenario)?;
                Ok(Self {
                    id: format!("synthetic-seed{}-beta{}", scenario.seed, scenario.beta_bias),
                    stack,
                    s,
                    dem,
                    truth: Some(truth),
                })
            }
            DataSource::Files { stack, demographics } => {
                let container = FdtContainer::read(stack)?;
                let features = container_to_stack(&container, stack)?;
                if !demographics.exists() {
                    return Err(FairError::io(
                        demographics,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "demographics file not found"),
                    ));
                }
                let dem = DemographicMap::read_csv(demographics, features.grid.clone())?;
                Ok(Self {
                    id: stack.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
                    s: dem.sensitive_map(),
                    stack: features,
                    dem,
                    truth: None,
                })
            }
        }
    }

    /// First evaluation frame and the evaluation frame range.
    pub fn split(&self, cfg: &RunConfig) -> Result<(usize, std::ops::Range<usize>)> {
        let t = self.stack.t;
        let split = ((t as f64) * cfg.train_fraction).round() as usize;
        let w = cfg.train.window;
        if split < w + 1 || split >= t {
            return Err(FairError::SeriesTooShort {
                len: t,
                needed: w + 2,
            });
        }
        let end = cfg.horizon.map_or(t, |h| (split + h).min(t));
        Ok((split, split..end))
    }
}

// ---------------------------------------------------------------------------
// synth / rasterize

/// Output paths of `synth`.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub stack: PathBuf,
    pub demographics: PathBuf,
    pub trips: PathBuf,
    pub truth: PathBuf,
}

pub fn cmd_synth(scenario: &ScenarioConfig, out: &Path) -> Result<SynthOutput> {
    ensure_dir(out)?;
    let (stack, _, dem, truth) = gen_scenario(scenario)?;
    let paths = SynthOutput {
        stack: out.join("stack.fdt"),
        demographics: out.join("demographics.csv"),
        trips: out.join("trips.csv"),
        truth: out.join("truth.json"),
    };
    let meta = serde_json::json!({ "kind": "feature_stack", "scenario": scenario });
    stack_to_container(&stack, meta).write(&paths.stack)?;
    dem.write_csv(&paths.demographics)?;
    write_trips_csv(&paths.trips, &export_trips(&truth, scenario.seed)?)?;
    let text = truth.to_json()?;
    fs::write(&paths.truth, text).map_err(|e| FairError::io(&paths.truth, e))?;
    write_json(&out.join("scenario.json"), scenario)?;
    info!("synthetic scenario written to {}", out.display());
    Ok(paths)
}

/// Rasterizes, imputes, scales and aligns the configured inputs into
/// `stack.fdt`, with dropped-record tallies in `diagnostics.json`.
pub fn cmd_rasterize(cfg: &RasterConfig, out: &Path) -> Result<Diagnostics> {
    ensure_dir(out)?;
    cfg.grid.validate()?;
    if cfg.t == 0 {
        return Err(FairError::invalid("raster config", "t must be at least 1"));
    }
    let mut diag = Diagnostics::default();
    let mut three_d = Vec::new();
    if let Some(path) = &cfg.trips {
        let trips = read_trips_csv(path)?;
        let (flows, d) = rasterize_3d(&trips, &cfg.grid, cfg.start, cfg.t)?;
        diag.merge(d);
        for layer in NamedLayer::split(&flows, &["inflow".into(), "outflow".into()]) {
            three_d.push(NamedLayer {
                name: layer.name,
                tensor: max_scale(&layer.tensor),
            });
        }
    }
    let mut two_d = Vec::new();
    if !cfg.points.is_empty() {
        let layers = cfg
            .points
            .iter()
            .map(|(name, path)| Ok((name.clone(), read_points_csv(path)?)))
            .collect::<Result<Vec<_>>>()?;
        let (x, names, d) = rasterize_2d(&layers, &cfg.grid, cfg.start)?;
        diag.merge(d);
        for layer in NamedLayer::split(&x, &names) {
            two_d.push(NamedLayer {
                name: layer.name,
                tensor: max_scale(&layer.tensor),
            });
        }
    }
    let mut one_d = Vec::new();
    if let Some(path) = &cfg.temporal {
        let samples = read_temporal_csv(path)?;
        let x = aggregate_1d(&samples, &cfg.grid, cfg.start, cfg.t)?;
        let x = if x.missing_mask.as_ref().is_some_and(|m| m.iter().any(|v| *v)) {
            let (filled, d) = impute_missing(&x)?;
            diag.merge(d);
            filled
        } else {
            x
        };
        let names: Vec<String> = (0..x.c)
            .map(|c| cfg.temporal_names.get(c).cloned().unwrap_or_else(|| format!("temporal.{c}")))
            .collect();
        for layer in NamedLayer::split(&x, &names) {
            one_d.push(NamedLayer {
                name: layer.name,
                tensor: max_scale(&layer.tensor),
            });
        }
    }
    if three_d.is_empty() && two_d.is_empty() && one_d.is_empty() {
        return Err(FairError::invalid("raster config", "no inputs given"));
    }
    let stack = broadcast_align(one_d, two_d, three_d, &cfg.grid, cfg.t)?;
    let meta = serde_json::json!({ "kind": "feature_stack", "raster": cfg });
    stack_to_container(&stack, meta).write(&out.join("stack.fdt"))?;
    write_json(&out.join("diagnostics.json"), &diag)?;
    Ok(diag)
}

// ---------------------------------------------------------------------------
// train / evaluate / predict

/// Result of `train`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub head: HeadFit,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    status: &'a str,
    seed: u64,
    config_hash: &'a str,
    wall_clock_secs: f64,
    steps: usize,
    head_initial_mse: Option<f64>,
    head_final_mse: Option<f64>,
    error: Option<String>,
    train: &'a TrainConfig,
}

/// Trains on the leading frames of `data` and writes `checkpoint.fdt`,
/// `train_log.csv` and `train_meta.json` into `out`. On a non-finite loss the
/// partial log and `train_meta.json` (with the failing step) are still
/// written before the error is returned.
pub fn train_run(data: &Dataset, run: &RunConfig, tcfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    tcfg.validate()?;
    let (split, _) = data.split(run)?;
    let train_stack = data.stack.slice_time(0..split);
    let hash = tcfg.hash()?;
    let mut log = TrainLog::new(tcfg.seed, hash.clone());
    let every = tcfg.checkpoint_every;
    let result = train_with(&train_stack, &data.s, tcfg, &mut log, |step, model| {
        if every > 0 && step % every == 0 {
            checkpoint_save(model, &hash, &out.join(format!("checkpoint_step{step:06}.fdt")))?;
        }
        Ok(())
    });
    log.write_csv(&out.join("train_log.csv"))?;
    let mut meta = TrainMeta {
        status: "ok",
        seed: tcfg.seed,
        config_hash: &hash,
        wall_clock_secs: log.wall_clock_secs,
        steps: log.rows.len(),
        head_initial_mse: None,
        head_final_mse: None,
        error: None,
        train: tcfg,
    };
    let mut model = match result {
        Ok(m) => m,
        Err(e) => {
            meta.status = "failed";
            meta.error = Some(e.to_string());
            write_json(&out.join("train_meta.json"), &meta)?;
            return Err(e);
        }
    };
    let head = fit_forecast_head(&mut model, &train_stack, tcfg)?;
    meta.head_initial_mse = Some(head.initial_mse);
    meta.head_final_mse = Some(head.final_mse);
    let checkpoint = out.join("checkpoint.fdt");
    checkpoint_save(&model, &hash, &checkpoint)?;
    write_json(&out.join("train_meta.json"), &meta)?;
    Ok(TrainOutcome {
        model,
        log,
        head,
        checkpoint,
    })
}

pub fn cmd_train(run: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    let data = Dataset::load(&run.data)?;
    ensure_dir(out)?;
    run.write(&out.join("run_config.json"))?;
    train_run(&data, run, &run.train, out)
}

/// Model and HA metrics over the evaluation frames.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: Metrics,
    pub ha: Metrics,
    pub preds: PredictionSeries,
    pub horizon: usize,
}

pub fn evaluate_model(data: &Dataset, run: &RunConfig, model: &Model) -> Result<Evaluation> {
    let (split, range) = data.split(run)?;
    let tcfg = &run.train;
    let preds = rolling_predict(model, &data.stack, &tcfg.target, tcfg.window, range.clone())?;
    let k = data
        .stack
        .position(&tcfg.target)
        .ok_or_else(|| FairError::invalid("target feature", tcfg.target.clone()))?;
    let truth = preds.truth().map(<[f64]>::to_vec).unwrap_or_default();
    let ha = ha_baseline(&data.stack.features[k].tensor.slice_time(0..split), range.len())?.with_truth(truth)?;
    let labels = label_groups(&data.dem);
    Ok(Evaluation {
        model: compute_metrics(&preds, &data.dem, &labels)?,
        ha: compute_metrics(&ha, &data.dem, &labels)?,
        preds,
        horizon: range.len(),
    })
}

fn reports(run: &RunConfig, data: &Dataset, lambda: f64, ev: &Evaluation, started_at: &str) -> Result<Vec<FairnessReport>> {
    let finished_at = now();
    [("model", &ev.model), ("ha", &ev.ha)]
        .into_iter()
        .map(|(method, m)| {
            build_report(
                m,
                &ReportMeta {
                    lambda,
                    run_id: run.run_id.clone(),
                    method: method.into(),
                    dataset_id: data.id.clone(),
                    horizon: ev.horizon,
                    started_at: started_at.to_string(),
                    finished_at: finished_at.clone(),
                },
            )
        })
        .collect()
}

/// Writes `report.csv` (model and HA rows) and `report.json`. Returns the
/// reports and any config-hash warnings.
pub fn cmd_evaluate(run: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(Vec<FairnessReport>, Vec<String>)> {
    run.validate()?;
    let started_at = now();
    let data = Dataset::load(&run.data)?;
    let ck = checkpoint_load(checkpoint, Some(&run.train.hash()?))?;
    ensure_dir(out)?;
    let ev = evaluate_model(&data, run, &ck.model)?;
    let reports = reports(run, &data, run.train.lambda, &ev, &started_at)?;
    FairnessReport::write_csv(&reports, &out.join("report.csv"))?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "reports": reports, "warnings": ck.warnings }),
    )?;
    Ok((reports, ck.warnings))
}

/// Autoregressive forecast of `horizon` frames after the training frames,
/// written to `predictions.csv` as `cell,row,col,step,yhat`. The sensitive
/// map is not used.
pub fn cmd_predict(run: &RunConfig, checkpoint: &Path, horizon: usize, out: &Path) -> Result<PredictionSeries> {
    run.validate()?;
    let data = Dataset::load(&run.data)?;
    let ck = checkpoint_load(checkpoint, Some(&run.train.hash()?))?;
    let (split, _) = data.split(run)?;
    let history = data.stack.slice_time(0..split);
    let preds = predict(&ck.model, &history, &run.train.target, run.train.window, horizon)?;
    ensure_dir(out)?;
    let path = out.join("predictions.csv");
    let csv_err = |e| FairError::Csv {
        path: path.clone(),
        source: e,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["cell", "row", "col", "step", "yhat"]).map_err(csv_err)?;
    let grid = preds.grid().clone();
    for cell in 0..grid.n() {
        let (r, c) = grid.row_col(cell);
        for h in 0..horizon {
            let v = preds.yhat()[cell * horizon + h];
            w.write_record([cell.to_string(), r.to_string(), c.to_string(), (h + 1).to_string(), format!("{v:?}")])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| FairError::io(&path, e))?;
    Ok(preds)
}

// ---------------------------------------------------------------------------
// sweep / ablate

/// One `(variant, lambda, seed)` cell of a sweep. Metrics are absent when the
/// cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub lambda: f64,
    pub seed: u64,
    pub mae: Option<f64>,
    pub rfg: Option<f64>,
    pub ifg: Option<f64>,
    pub sr: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Median of the successful cells for one `(variant, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianRow {
    pub variant: Variant,
    pub lambda: f64,
    pub n: usize,
    pub mae: Option<f64>,
    pub rfg: Option<f64>,
    pub ifg: Option<f64>,
    pub sr: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn medians(rows: &[SweepRow]) -> Vec<MedianRow> {
    let mut keys: Vec<(Variant, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(v, l)| *v == r.variant && l.to_bits() == r.lambda.to_bits()) {
            keys.push((r.variant, r.lambda));
        }
    }
    keys.into_iter()
        .map(|(variant, lambda)| {
            let ok: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.lambda.to_bits() == lambda.to_bits() && !r.failed())
                .collect();
            let col = |f: fn(&SweepRow) -> Option<f64>| median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            MedianRow {
                variant,
                lambda,
                n: ok.len(),
                mae: col(|r| r.mae),
                rfg: col(|r| r.rfg),
                ifg: col(|r| r.ifg),
                sr: col(|r| r.sr),
            }
        })
        .collect()
}

/// Worker count for sweeps: `FAIRDRL_THREADS` when set, else the available
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var("FAIRDRL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Output directory of one cell.
pub fn cell_dir(out: &Path, variant: Variant, lambda: f64, seed: u64) -> PathBuf {
    out.join(format!("{}_lambda{lambda}_seed{seed}", variant.name()))
}

fn run_cell(data: &Dataset, run: &RunConfig, variant: Variant, lambda: f64, seed: u64, out: &Path) -> SweepRow {
    let tcfg = run.cell_train_config(lambda, seed, variant);
    let dir = cell_dir(out, variant, lambda, seed);
    let started_at = now();
    let result = train_run(data, run, &tcfg, &dir).and_then(|t| {
        let ev = evaluate_model(data, run, &t.model)?;
        let cell_run = RunConfig {
            train: tcfg.clone(),
            ..run.clone()
        };
        let reports = reports(&cell_run, data, lambda, &ev, &started_at)?;
        FairnessReport::write_csv(&reports, &dir.join("report.csv"))?;
        Ok(ev.model)
    });
    match result {
        Ok(m) => SweepRow {
            variant,
            lambda,
            seed,
            mae: m.mae,
            rfg: m.rfg,
            ifg: m.ifg,
            sr: Some(m.sr.rho),
            error: None,
        },
        Err(e) => {
            warn!("cell {} lambda {lambda} seed {seed} failed: {e}", variant.name());
            SweepRow {
                variant,
                lambda,
                seed,
                mae: None,
                rfg: None,
                ifg: None,
                sr: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Runs every cell, `worker_count()` at a time. Rows come back in cell
/// order regardless of scheduling.
pub fn run_grid(run: &RunConfig, cells: &[(Variant, f64, u64)], out: &Path) -> Result<Vec<SweepRow>> {
    run.validate()?;
    for &(variant, lambda, seed) in cells {
        run.cell_train_config(lambda, seed, variant).validate()?;
    }
    let data = Dataset::load(&run.data)?;
    ensure_dir(out)?;
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..worker_count().min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(variant, lambda, seed)) = cells.get(i) else {
                    break;
                };
                let row = run_cell(&data, run, variant, lambda, seed, out);
                info!(
                    "cell {} lambda {lambda} seed {seed}: rfg {:?} mae {:?}",
                    variant.name(),
                    row.rfg,
                    row.mae
                );
                results.lock().expect("results lock")[i] = Some(row);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// `lambda,seed,mae,rfg,ifg,sr,status` rows then one `median` row per lambda.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_table(rows, path, false)
}

/// As [`write_sweep_csv`] with a leading `variant` column.
pub fn write_ablation_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_table(rows, path, true)
}

fn write_table(rows: &[SweepRow], path: &Path, with_variant: bool) -> Result<()> {
    let csv_err = |e| FairError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["lambda", "seed", "mae", "rfg", "ifg", "sr", "status"];
    if with_variant {
        header.insert(0, "variant");
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut write = |variant: Variant, fields: [String; 7]| {
        let mut rec: Vec<String> = Vec::with_capacity(8);
        if with_variant {
            rec.push(variant.name().to_string());
        }
        rec.extend(fields);
        w.write_record(&rec).map_err(csv_err)
    };
    for r in rows {
        let status = if r.failed() { "failed" } else { "ok" };
        write(
            r.variant,
            [
                format!("{:?}", r.lambda),
                r.seed.to_string(),
                opt(r.mae),
                opt(r.rfg),
                opt(r.ifg),
                opt(r.sr),
                status.into(),
            ],
        )?;
    }
    for m in medians(rows) {
        write(
            m.variant,
            [
                format!("{:?}", m.lambda),
                "median".into(),
                opt(m.mae),
                opt(m.rfg),
                opt(m.ifg),
                opt(m.sr),
                format!("n={}", m.n),
            ],
        )?;
    }
    w.flush().map_err(|e| FairError::io(path, e))
}

/// Trains and evaluates every `(lambda, seed)` with both modules on and
/// writes `sweep.csv`.
pub fn cmd_sweep(run: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let cells: Vec<(Variant, f64, u64)> = run
        .lambdas
        .iter()
        .flat_map(|&l| run.seeds.iter().map(move |&s| (Variant::Both, l, s)))
        .collect();
    let rows = run_grid(run, &cells, out)?;
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    Ok(rows)
}

/// Runs the configured variants over every `(lambda, seed)` and writes
/// `ablation.csv`.
pub fn cmd_ablate(run: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    if run.variants.is_empty() {
        return Err(FairError::invalid("run config", "no ablation variants selected"));
    }
    let cells: Vec<(Variant, f64, u64)> = run
        .variants
        .iter()
        .flat_map(|&v| run.lambdas.iter().flat_map(move |&l| run.seeds.iter().map(move |&s| (v, l, s))))
        .collect();
    let rows = run_grid(run, &cells, out)?;
    write_ablation_csv(&rows, &out.join("ablation.csv"))?;
    Ok(rows)
}
