//! Training loop, forecast head, prediction, the historical-average baseline
//! and checkpoints.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FairError, Result};
use crate::fdt::{FdtContainer, NamedTensor};
use crate::grid::{PredictionSeries, STTensor, SensitiveMap};
use crate::model::{encode_vars, head_features_vars, head_vars, vae_forward, Batch, Model, ModelConfig, Noise};
use crate::nn::{clip_grads, Adam, Binder, Group, Param, ParamSet};
use crate::raster::{unscale, FeatureStack};
use crate::regularizers::{adversary_graph, regularizer_terms, Detached, Weights};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Hex SHA-256 of the canonical JSON form of `value`. Object keys are sorted,
/// so the hash does not depend on field or key order.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| FairError::Json {
        context: "config hash".into(),
        source: e,
    })?;
    let digest = Sha256::digest(v.to_string().as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub adv_lr: f64,
    /// Windows per batch.
    pub batch_size: usize,
    /// Window length `T_w`.
    pub window: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d_s: usize,
    pub d_ns: usize,
    /// Gradient-norm clip for the main step; 0 disables clipping.
    pub clip: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Generator/discriminator pair on.
    pub sensitive: bool,
    /// Leakage predictor on.
    pub nonsensitive: bool,
    pub learn_sigma_x: bool,
    /// Feature forecast by the head.
    pub target: String,
    pub head_epochs: usize,
    pub head_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            gamma: 1.0,
            lr: 1e-3,
            adv_lr: 1e-3,
            batch_size: 8,
            window: 8,
            epochs: 10,
            seed: 0,
            d_s: 8,
            d_ns: 16,
            clip: 5.0,
            checkpoint_every: 0,
            sensitive: true,
            nonsensitive: true,
            learn_sigma_x: true,
            target: "demand".into(),
            head_epochs: 100,
            head_lr: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(FairError::invalid("train config", reason));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be a finite value >= 0, got {}", self.gamma));
        }
        for (name, v) in [("lr", self.lr), ("adv_lr", self.adv_lr), ("head_lr", self.head_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.clip >= 0.0) {
            return bad(format!("clip must be >= 0, got {}", self.clip));
        }
        if self.batch_size == 0 || self.window == 0 || self.d_s == 0 || self.d_ns == 0 {
            return bad("batch_size, window, d_s and d_ns must be at least 1".into());
        }
        if !self.sensitive && !self.nonsensitive && self.lambda > 0.0 {
            return bad("both fairness modules off with lambda > 0 has no effect".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        Weights {
            lambda: self.lambda,
            gamma: self.gamma,
            sensitive: self.sensitive,
            nonsensitive: self.nonsensitive,
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    fn main_groups(&self) -> Vec<Group> {
        let mut g = vec![Group::Encoder, Group::Prior, Group::Decoder];
        if self.sensitive {
            g.push(Group::SensGen);
        }
        g
    }

    fn adversary_groups(&self) -> Vec<Group> {
        let mut g = vec![Group::TcDisc];
        if self.sensitive {
            g.push(Group::SensDisc);
        }
        if self.nonsensitive {
            g.push(Group::Predictor);
        }
        g
    }
}

/// One optimizer step. Terms of disabled modules are logged as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub neg_elbo: f64,
    pub tc: f64,
    pub l_s: f64,
    pub l_ns: f64,
    pub l_disc_tc: f64,
    pub l_disc_s: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Self {
            seed,
            config_hash,
            ..Self::default()
        }
    }

    /// Appends a row; step indices must increase.
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(FairError::invalid(
                    "log row",
                    format!("step {} after step {}", row.step, last.step),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Moving average of `neg_elbo` over the first and last `k` rows.
    pub fn neg_elbo_ends(&self, k: usize) -> Option<(f64, f64)> {
        let k = k.min(self.rows.len());
        if k == 0 {
            return None;
        }
        let avg = |rows: &[LogRow]| rows.iter().map(|r| r.neg_elbo).sum::<f64>() / rows.len() as f64;
        Some((avg(&self.rows[..k]), avg(&self.rows[self.rows.len() - k..])))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| FairError::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| FairError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<LogRow>> {
        let csv_err = |e| FairError::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(csv_err)
    }
}

fn target_index(stack: &FeatureStack, name: &str) -> Result<usize> {
    stack
        .position(name)
        .ok_or_else(|| FairError::invalid("target feature", format!("{name:?} not in stack {:?}", stack.names())))
}

fn check_sensitive(stack: &FeatureStack, s: &SensitiveMap) -> Result<()> {
    if !stack.grid.same_layout(s.grid()) {
        return Err(FairError::GridMismatch {
            left: "feature stack".into(),
            right: "sensitive map".into(),
            detail: format!(
                "{}x{} vs {}x{}",
                stack.grid.height,
                stack.grid.width,
                s.grid().height,
                s.grid().width
            ),
        });
    }
    Ok(())
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains the model and returns it with its log. The forecast head is left
/// untouched; see [`fit_forecast_head`].
pub fn train(stack: &FeatureStack, s: &SensitiveMap, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut log = TrainLog::new(cfg.seed, cfg.hash()?);
    let model = train_with(stack, s, cfg, &mut log, |_, _| Ok(()))?;
    Ok((model, log))
}

/// [`train`] writing into a caller-owned log, so rows survive an abort, and
/// calling `on_step(step, model)` after every step.
pub fn train_with(
    stack: &FeatureStack,
    s: &SensitiveMap,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_step: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Model> {
    cfg.validate()?;
    check_sensitive(stack, s)?;
    let target = target_index(stack, &cfg.target)?;
    if stack.t < cfg.window {
        return Err(FairError::SeriesTooShort {
            len: stack.t,
            needed: cfg.window,
        });
    }
    let started = Instant::now();
    let mut model = Model::new(ModelConfig::for_stack(stack, cfg.d_s, cfg.d_ns, cfg.learn_sigma_x)?, cfg.seed)?;
    let weights = cfg.weights();
    let (main_groups, adv_groups) = (cfg.main_groups(), cfg.adversary_groups());
    let mut main_opt = Adam::new(cfg.lr);
    let mut adv_opt = Adam::new(cfg.adv_lr);
    let mut order_rng = rng_stream(cfg.seed, 1);
    let mut noise_rng = rng_stream(cfg.seed, 2);
    let mut starts: Vec<usize> = (0..=stack.t - cfg.window).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        starts.shuffle(&mut order_rng);
        for chunk in starts.chunks(cfg.batch_size) {
            step += 1;
            let batch = Batch::from_stack(stack, s.values(), chunk, cfg.window, target)?;
            let noise = Noise::draw(&model.cfg, batch.n, batch.t, &mut noise_rng);

            // VAE part of the main graph; its parameters do not change during
            // the adversary step, so the forward pass is shared.
            let mut tape = Tape::new();
            let (fwd, mut bound) = {
                let mut bind = Binder::new(&model.params, &[Group::Encoder, Group::Prior, Group::Decoder]);
                let fwd = vae_forward(&mut tape, &mut bind, &model, &batch, &noise);
                (fwd, bind.into_bound())
            };
            let latents = Detached::from_tape(&tape, &fwd);

            let (l_disc_tc, l_disc_s) = {
                let mut adv_tape = Tape::new();
                let mut bind = Binder::new(&model.params, &adv_groups);
                let av = adversary_graph(&mut adv_tape, &mut bind, &model, &batch.s, &latents, noise.perm_seed, &weights);
                let total = adv_tape.item(av.total);
                if !total.is_finite() {
                    return Err(FairError::NonFiniteLoss {
                        step,
                        detail: format!("adversary loss {total}"),
                    });
                }
                let grads = bind.grads(&adv_tape.backward(av.total));
                let terms = (adv_tape.item(av.l_disc_tc), av.l_disc_s.map_or(0.0, |v| adv_tape.item(v)));
                drop(bind);
                adv_opt.step(&mut model.params, &grads);
                terms
            };

            let main_rest: Vec<Group> = main_groups.iter().copied().filter(|g| *g == Group::SensGen).collect();
            let comp = {
                let mut bind = Binder::new(&model.params, &main_rest);
                let comp = regularizer_terms(&mut tape, &mut bind, &model, &batch, fwd, &weights);
                bound.extend(bind.into_bound());
                comp
            };
            let row = LogRow {
                step,
                neg_elbo: tape.item(comp.neg_elbo),
                tc: tape.item(comp.tc),
                l_s: comp.l_s.map_or(0.0, |v| tape.item(v)),
                l_ns: comp.l_ns.map_or(0.0, |v| tape.item(v)),
                l_disc_tc,
                l_disc_s,
                grad_norm: 0.0,
            };
            let loss = tape.item(comp.loss);
            if !loss.is_finite() {
                return Err(FairError::NonFiniteLoss {
                    step,
                    detail: format!("{row:?}"),
                });
            }
            let mut grads = bound.grads(&tape.backward(comp.loss));
            let grad_norm = clip_grads(&mut grads, cfg.clip);
            if !grad_norm.is_finite() {
                return Err(FairError::NonFiniteLoss {
                    step,
                    detail: format!("gradient norm {grad_norm}"),
                });
            }
            main_opt.step(&mut model.params, &grads);
            log.push(LogRow { grad_norm, ..row })?;
            on_step(step, &model)?;
        }
        debug!("epoch {epoch}: step {step}, neg_elbo {:.4}", log.rows.last().map_or(f64::NAN, |r| r.neg_elbo));
    }
    log.wall_clock_secs += started.elapsed().as_secs_f64();
    Ok(model)
}

/// Head input features for windows of a batch, from posterior means only.
fn head_inputs(model: &Model, batch: &Batch) -> Tensor {
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let post = encode_vars(&mut tape, &mut bind, model, batch);
    let feats = head_features_vars(&mut tape, &mut bind, model, post.mu_ns);
    tape.value(feats).clone()
}

fn head_output(model: &Model, features: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let f = tape.constant(features.clone());
    let out = head_vars(&mut tape, &mut bind, model, f);
    tape.value(out).clone()
}

/// Scaled next-frame forecast `[N, H, W, 1]` for each window in `batch`.
/// Only the encoder's `mu^Ns`, the prior and the head are involved.
pub fn forecast_scaled(model: &Model, batch: &Batch) -> Tensor {
    head_output(model, &head_inputs(model, batch))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadFit {
    pub initial_mse: f64,
    pub final_mse: f64,
}

const FEATURE_CHUNK: usize = 32;

/// Fits the forecast head by squared error against the next frame of the
/// target feature. Everything except the head is frozen, so features are
/// computed once.
pub fn fit_forecast_head(model: &mut Model, stack: &FeatureStack, cfg: &TrainConfig) -> Result<HeadFit> {
    let target = target_index(stack, &cfg.target)?;
    let starts: Vec<usize> = crate::grid::window_pairs(stack.t, cfg.window, 1)?
        .into_iter()
        .map(|w| w.inputs.start)
        .collect();
    let mut data = Vec::new();
    for chunk in starts.chunks(FEATURE_CHUNK) {
        let batch = Batch::from_stack(stack, &[], chunk, cfg.window, target)?;
        let next = batch.next.clone().expect("window pairs have a next frame");
        data.push((head_inputs(model, &batch), next));
    }
    let mse = |model: &Model| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (f, y) in &data {
            let out = head_output(model, f);
            sum += out.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += y.len();
        }
        sum / n as f64
    };
    let initial_mse = mse(model);
    let mut opt = Adam::new(cfg.head_lr);
    let mut rng = rng_stream(cfg.seed, 3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.head_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (f, y) = &data[i];
            let mut tape = Tape::new();
            let mut bind = Binder::new(&model.params, &[Group::Head]);
            let fv = tape.constant(f.clone());
            let out = head_vars(&mut tape, &mut bind, model, fv);
            let yv = tape.constant(y.clone());
            let d = tape.sub(out, yv);
            let sq = tape.square(d);
            let loss = tape.mean(sq);
            let grads = bind.grads(&tape.backward(loss));
            drop(bind);
            opt.step(&mut model.params, &grads);
        }
    }
    Ok(HeadFit {
        initial_mse,
        final_mse: mse(model),
    })
}

fn check_stack(model: &Model, stack: &FeatureStack) -> Result<()> {
    let c = &model.cfg;
    if stack.grid.height != c.height || stack.grid.width != c.width || stack.k() != c.k() {
        return Err(FairError::Shape {
            expected: format!("{}x{} grid with {} features", c.height, c.width, c.k()),
            got: format!("{}x{} grid with {} features", stack.grid.height, stack.grid.width, stack.k()),
        });
    }
    Ok(())
}

/// Forecasts `horizon` frames of `target` after the last `window` frames of
/// `history`, in original units. Later steps feed earlier predictions back
/// into the target channel; other features keep their last observed value.
pub fn predict(model: &Model, history: &FeatureStack, target: &str, window: usize, horizon: usize) -> Result<PredictionSeries> {
    check_stack(model, history)?;
    let k_target = target_index(history, target)?;
    let record = history.features[k_target].tensor.scale_record.as_ref();
    if record.is_none() {
        return Err(FairError::MissingScaleRecord(target.to_string()));
    }
    if window == 0 || history.t < window {
        return Err(FairError::SeriesTooShort {
            len: history.t,
            needed: window.max(1),
        });
    }
    let (n_cells, k) = (history.grid.n(), history.k());
    let mut frames: Vec<Vec<f64>> = (history.t - window..history.t)
        .map(|t| {
            (0..n_cells)
                .flat_map(|cell| (0..k).map(move |f| (cell, f)))
                .map(|(cell, f)| history.value(f, cell, t))
                .collect()
        })
        .collect();
    let mut yhat = vec![0.0; n_cells * horizon];
    for h in 0..horizon {
        let x: Vec<f64> = frames[frames.len() - window..].concat();
        let batch = Batch {
            n: 1,
            t: window,
            x: Tensor::new(vec![1, window, history.grid.height, history.grid.width, k], x),
            s: Tensor::zeros(&[1, history.grid.height, history.grid.width, 1]),
            next: None,
        };
        let out = forecast_scaled(model, &batch);
        let mut frame = frames.last().expect("window is non-empty").clone();
        for (cell, v) in out.data().iter().enumerate() {
            frame[cell * k + k_target] = *v;
            yhat[cell * horizon + h] = *v;
        }
        frames.push(frame);
    }
    let yhat = unscale(&yhat, record, 0)?;
    PredictionSeries::new(history.grid.clone(), horizon, yhat, None)
}

/// One-step forecasts for every frame in `frames`, each from the true
/// preceding `window` frames, with ground truth attached (original units).
pub fn rolling_predict(model: &Model, stack: &FeatureStack, target: &str, window: usize, frames: Range<usize>) -> Result<PredictionSeries> {
    check_stack(model, stack)?;
    let k_target = target_index(stack, target)?;
    let record = stack.features[k_target].tensor.scale_record.as_ref();
    if record.is_none() {
        return Err(FairError::MissingScaleRecord(target.to_string()));
    }
    if frames.start < window || frames.end > stack.t || frames.is_empty() {
        return Err(FairError::invalid(
            "evaluation range",
            format!("{frames:?} with window {window} over {} frames", stack.t),
        ));
    }
    let horizon = frames.len();
    let n_cells = stack.grid.n();
    let mut yhat = vec![0.0; n_cells * horizon];
    let mut truth = vec![0.0; n_cells * horizon];
    let starts: Vec<usize> = frames.clone().map(|f| f - window).collect();
    for (c, chunk) in starts.chunks(FEATURE_CHUNK).enumerate() {
        let batch = Batch::from_stack(stack, &[], chunk, window, k_target)?;
        let out = forecast_scaled(model, &batch);
        for (b, &st) in chunk.iter().enumerate() {
            let h = c * FEATURE_CHUNK + b;
            for cell in 0..n_cells {
                yhat[cell * horizon + h] = out.data()[b * n_cells + cell];
                truth[cell * horizon + h] = stack.value(k_target, cell, st + window);
            }
        }
    }
    PredictionSeries::new(
        stack.grid.clone(),
        horizon,
        unscale(&yhat, record, 0)?,
        Some(unscale(&truth, record, 0)?),
    )
}

/// Historical average: each cell's mean over all frames of channel 0 of
/// `history`, repeated over `horizon`. Returned in original units when
/// `history` carries a scale record.
pub fn ha_baseline(history: &STTensor, horizon: usize) -> Result<PredictionSeries> {
    if history.t == 0 {
        return Err(FairError::Empty("history".into()));
    }
    let n = history.grid.n();
    let mut means: Vec<f64> = (0..n)
        .map(|cell| (0..history.t).map(|t| history.get(cell, t, 0)).sum::<f64>() / history.t as f64)
        .collect();
    if history.scale_record.is_some() {
        means = unscale(&means, history.scale_record.as_ref(), 0)?;
    }
    let yhat = means.iter().flat_map(|&m| std::iter::repeat_n(m, horizon)).collect();
    PredictionSeries::new(history.grid.clone(), horizon, yhat, None)
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: String,
    /// Non-fatal findings such as a config-hash mismatch.
    pub warnings: Vec<String>,
}

pub fn checkpoint_save(model: &Model, config_hash: &str, path: &Path) -> Result<()> {
    let groups: BTreeMap<&str, &str> = model.params.params.iter().map(|p| (p.name.as_str(), p.group.name())).collect();
    let meta = serde_json::json!({
        "kind": "checkpoint",
        "config_hash": config_hash,
        "model_config": model.cfg,
        "groups": groups,
    });
    let tensors = model
        .params
        .params
        .iter()
        .map(|p| NamedTensor::f64(p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    FdtContainer {
        tensors,
        grid: None,
        meta,
    }
    .write(path)
}

/// Loads a checkpoint. A hash differing from `expected_hash` is reported as a
/// warning, not an error.
pub fn checkpoint_load(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let c = FdtContainer::read(path)?;
    let corrupt = |reason: String| FairError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if c.meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
        return Err(corrupt("not a checkpoint container".into()));
    }
    let cfg: ModelConfig = serde_json::from_value(c.meta.get("model_config").cloned().unwrap_or_default())
        .map_err(|e| corrupt(format!("model config: {e}")))?;
    let groups = c.meta.get("groups").and_then(|g| g.as_object()).ok_or_else(|| corrupt("missing groups".into()))?;
    let mut params = ParamSet::default();
    for t in &c.tensors {
        let group = groups
            .get(&t.name)
            .and_then(|g| g.as_str())
            .and_then(Group::from_name)
            .ok_or_else(|| corrupt(format!("no group for {}", t.name)))?;
        params.params.push(Param {
            name: t.name.clone(),
            group,
            value: Tensor::new(t.shape.clone(), t.data.to_f64()),
        });
    }
    let model = Model::from_params(cfg, params)?;
    let config_hash = c.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let mut warnings = Vec::new();
    if let Some(want) = expected_hash {
        if want != config_hash {
            let msg = format!("checkpoint {} has config hash {config_hash}, expected {want}", path.display());
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(Checkpoint {
        model,
        config_hash,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::synth::{gen_scenario, ScenarioConfig};

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            window: 4,
            d_s: 4,
            d_ns: 4,
            head_epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let neg = TrainConfig {
            lambda: -0.1,
            ..TrainConfig::default()
        };
        assert!(neg.validate().unwrap_err().is_validation());
        let both_off = TrainConfig {
            sensitive: false,
            nonsensitive: false,
            ..TrainConfig::default()
        };
        assert!(both_off.validate().is_err());
        let both_off_zero = TrainConfig { lambda: 0.0, ..both_off };
        assert!(both_off_zero.validate().is_ok());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": {"x": 2, "y": 3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": {"y": 3, "x": 2}, "a": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(
            TrainConfig::default().hash().unwrap(),
            TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            }
            .hash()
            .unwrap()
        );
    }

    #[test]
    fn ha_hand_values() {
        let grid = crate::grid::GridSpec::new(1, 2).unwrap();
        let x = STTensor::new(grid, 3, 1, vec![2.0, 4.0, 6.0, 5.0, 5.0, 5.0], crate::synth::default_start()).unwrap();
        let ha = ha_baseline(&x, 2).unwrap();
        assert_eq!(ha.yhat(), &[4.0, 4.0, 5.0, 5.0]);
        let one = ha_baseline(&x.slice_time(1..2), 1).unwrap();
        assert_eq!(one.yhat(), &[4.0, 5.0]);
        assert!(ha_baseline(&x.slice_time(0..0), 1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let (stack, s, _) = tiny();
        let s = SensitiveMap::new(stack.grid.clone(), s).unwrap();
        let cfg = TrainConfig {
            sensitive: false,
            ..quick_cfg()
        };
        let init = Model::new(ModelConfig::for_stack(&stack, 4, 4, false).unwrap(), cfg.seed).unwrap();
        let (a, log_a) = train(&stack, &s, &cfg).unwrap();
        let (b, log_b) = train(&stack, &s, &cfg).unwrap();
        assert_eq!(log_a.rows, log_b.rows);
        assert_eq!(a.params, b.params);
        for g in [Group::SensGen, Group::SensDisc, Group::Head] {
            assert_eq!(a.params.fingerprint(g), init.params.fingerprint(g), "{g:?}");
        }
        for g in [Group::Encoder, Group::Predictor, Group::TcDisc] {
            assert_ne!(a.params.fingerprint(g), init.params.fingerprint(g), "{g:?}");
        }
        assert!(log_a.rows.iter().all(|r| r.l_s == 0.0 && r.l_disc_s == 0.0));
        assert!(log_a.rows.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (_, _, cfg) = tiny();
        let model = Model::new(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fdt");
        checkpoint_save(&model, "abc", &path).unwrap();
        let back = checkpoint_load(&path, Some("abc")).unwrap();
        assert_eq!(back.model.params, model.params);
        assert!(back.warnings.is_empty());
        let other = checkpoint_load(&path, Some("def")).unwrap();
        assert_eq!(other.warnings.len(), 1);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(checkpoint_load(&path, None), Err(FairError::Corrupt { .. })));
    }

    #[test]
    fn predictions_are_nonnegative_and_ignore_sensitive_input() {
        let sc = ScenarioConfig {
            height: 4,
            width: 4,
            t: 24,
            ..ScenarioConfig::default()
        };
        let (stack, s, _, _) = gen_scenario(&sc).unwrap();
        let cfg = quick_cfg();
        let (mut model, _) = train(&stack, &s, &cfg).unwrap();
        fit_forecast_head(&mut model, &stack, &cfg).unwrap();
        let p = predict(&model, &stack, "demand", 4, 3).unwrap();
        assert_eq!(p.horizon(), 3);
        assert!(p.yhat().iter().all(|v| *v >= 0.0));
        let r = rolling_predict(&model, &stack, "demand", 4, 20..24).unwrap();
        assert!(r.yhat().iter().all(|v| *v >= 0.0));
        assert_eq!(r.truth().unwrap().len(), 16 * 4);
    }
}
