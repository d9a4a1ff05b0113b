//! Linear probes measuring how much of the sensitive map each latent group
//! carries.

use nalgebra::{DMatrix, DVector};

use crate::error::{FairError, Result};
use crate::grid::SensitiveMap;
use crate::model::{encode, Batch, Model};
use crate::raster::FeatureStack;

/// Ridge regression with an unpenalized intercept. The penalty acts on
/// standardized columns, so it does not depend on feature scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearProbe {
    /// Fits `y ~ x w + b` over rows of `x` (each of length `dim`).
    pub fn fit(x: &[f64], y: &[f64], dim: usize, ridge: f64) -> Result<Self> {
        if dim == 0 || y.is_empty() || x.len() != y.len() * dim {
            return Err(FairError::Shape {
                expected: format!("{} rows of width {dim}", y.len()),
                got: format!("{} values", x.len()),
            });
        }
        let n = y.len();
        let mean_y = y.iter().sum::<f64>() / n as f64;
        let mut mean_x = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, v) in mean_x.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean_x) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let scale: Vec<f64> = scale.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        let xc = DMatrix::from_fn(n, dim, |i, j| (x[i * dim + j] - mean_x[j]) / scale[j]);
        let yc = DVector::from_fn(n, |i, _| y[i] - mean_y);
        let mut gram = xc.transpose() * &xc;
        for j in 0..dim {
            gram[(j, j)] += ridge.max(1e-12) * n as f64;
        }
        let rhs = xc.transpose() * yc;
        let w = gram
            .cholesky()
            .ok_or_else(|| FairError::invalid("probe", "normal equations are not positive definite"))?
            .solve(&rhs);
        let weights: Vec<f64> = w.iter().zip(&scale).map(|(a, s)| a / s).collect();
        let intercept = mean_y - weights.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
        Ok(Self { weights, intercept })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Mean absolute error over rows of `x`.
    pub fn mae(&self, x: &[f64], y: &[f64]) -> f64 {
        let dim = self.weights.len();
        x.chunks(dim).zip(y).map(|(r, t)| (self.predict(r) - t).abs()).sum::<f64>() / y.len() as f64
    }
}

/// Evaluation MAE of probes predicting `S` per cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// From `mu^S`.
    pub mae_s: f64,
    /// From `mu^Ns` averaged over the window.
    pub mae_ns: f64,
}

/// Per-cell posterior-mean features for windows starting at `starts`:
/// `(mu^S rows, time-pooled mu^Ns rows, targets)`.
fn probe_rows(model: &Model, stack: &FeatureStack, s: &SensitiveMap, starts: &[usize], window: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n_cells, d_s, d_ns) = (stack.grid.n(), model.cfg.d_s, model.cfg.d_ns);
    let (mut zs, mut zns, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in starts.chunks(32) {
        let batch = Batch::from_stack(stack, &[], chunk, window, 0)?;
        let post = encode(model, &batch)?;
        let (mu_s, mu_ns) = (post.mu_s.data(), post.mu_ns.data());
        for b in 0..chunk.len() {
            for cell in 0..n_cells {
                let base = (b * n_cells + cell) * d_s;
                zs.extend_from_slice(&mu_s[base..base + d_s]);
                let mut pooled = vec![0.0; d_ns];
                for t in 0..window {
                    let base = ((b * window + t) * n_cells + cell) * d_ns;
                    for (p, v) in pooled.iter_mut().zip(&mu_ns[base..base + d_ns]) {
                        *p += v / window as f64;
                    }
                }
                zns.extend(pooled);
                y.push(s.values()[cell]);
            }
        }
    }
    Ok((zs, zns, y))
}

/// Fits one probe per latent group on windows inside `train_frames` frames
/// and scores both on windows of the remaining frames.
pub fn disentanglement_probe(model: &Model, stack: &FeatureStack, s: &SensitiveMap, window: usize, train_frames: usize, ridge: f64) -> Result<ProbeReport> {
    if train_frames < window || stack.t < train_frames + window {
        return Err(FairError::SeriesTooShort {
            len: stack.t,
            needed: train_frames + window,
        });
    }
    let fit_starts: Vec<usize> = (0..=train_frames - window).collect();
    let eval_starts: Vec<usize> = (train_frames..=stack.t - window).collect();
    let (fs, fns, fy) = probe_rows(model, stack, s, &fit_starts, window)?;
    let (es, ens, ey) = probe_rows(model, stack, s, &eval_starts, window)?;
    let ps = LinearProbe::fit(&fs, &fy, model.cfg.d_s, ridge)?;
    let pns = LinearProbe::fit(&fns, &fy, model.cfg.d_ns, ridge)?;
    Ok(ProbeReport {
        mae_s: ps.mae(&es, &ey),
        mae_ns: pns.mae(&ens, &ey),
    })
}
