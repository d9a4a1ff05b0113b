//! Spatio-temporal sequence VAE.
//!
//! Latents are kept per grid cell: `z^S` is a static `H x W x d_S` map and
//! `z^Ns_t` an `H x W x d_Ns` map per step. Every network applied to latents
//! is a shared per-cell (or small-kernel convolutional) function, so the
//! model is translation equivariant and cannot memorize cell identities.
//!
//! Tensors follow the `[N, T, H, W, C]` layout of [`Tape::conv`]; per-window
//! maps drop the `T` axis.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::nn::{Binder, Group, Initializer, ParamSet, Pid};
use crate::raster::{FeatureStack, Origin};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOGVAR_CLAMP: f64 = 10.0;
pub const LOGIT_CAP: f64 = 10.0;
const ENC_CHANNELS: [usize; 3] = [32, 16, 1];
const DRL_CHANNELS: [usize; 2] = [16, 4];
/// Width of the hidden layer in front of each posterior group.
const POST_HIDDEN: usize = 16;
const GRU_HIDDEN: usize = 16;
const DEC_HIDDEN: usize = 16;
const TC_HIDDEN: usize = 32;
const GEN_HIDDEN: usize = 16;
const SDISC_HIDDEN: usize = 32;
const PRED_HIDDEN: usize = 16;
const HEAD_HIDDEN: usize = 16;
/// Starting observation scale when `sigma_x` is learned. Inputs are scaled to
/// `[0, 1]`, where `sigma_x = 1` makes reconstruction nearly free.
pub const SIGMA_X_INIT: f64 = 0.1;
/// Most recent `mu^Ns` steps fed to the forecast head.
pub const HEAD_LAGS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channel counts of spatio-temporal, spatial and temporal features, in
    /// that order within the stack.
    pub k3: usize,
    pub k2: usize,
    pub k1: usize,
    pub d_s: usize,
    pub d_ns: usize,
    /// Learn a per-channel observation scale instead of fixing it at 1.
    #[serde(default)]
    pub learn_sigma_x: bool,
}

impl ModelConfig {
    pub fn for_stack(stack: &FeatureStack, d_s: usize, d_ns: usize, learn_sigma_x: bool) -> Result<Self> {
        let origins = stack.origins();
        let count = |o| origins.iter().filter(|x| **x == o).count();
        let (k3, k2, k1) = (count(Origin::Spatiotemporal), count(Origin::Spatial), count(Origin::Temporal));
        let mut sorted = origins.clone();
        sorted.sort();
        if sorted != origins {
            return Err(FairError::invalid("feature stack", "features must be ordered 3D, 2D, 1D"));
        }
        let cfg = Self {
            height: stack.grid.height,
            width: stack.grid.width,
            k3,
            k2,
            k1,
            d_s,
            d_ns,
            learn_sigma_x,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(FairError::invalid("model grid", "dimensions must be positive"));
        }
        if self.k() == 0 {
            return Err(FairError::invalid("model input", "no features"));
        }
        if self.d_s == 0 || self.d_ns == 0 {
            return Err(FairError::invalid("latent widths", "d_s and d_ns must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k3 + self.k2 + self.k1
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }

    fn modalities(&self) -> usize {
        [self.k3, self.k2, self.k1].iter().filter(|k| **k > 0).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub(crate) w: Pid,
    pub(crate) b: Pid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub(crate) w: Pid,
    pub(crate) b: Option<Pid>,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    xr: Dense,
    xu: Dense,
    xc: Dense,
    hr: Dense,
    hu: Dense,
    hc: Dense,
}

#[derive(Debug, Clone)]
pub(crate) struct Arch {
    enc3: Option<Vec<Conv>>,
    enc2: Option<Vec<Conv>>,
    enc1: Option<Vec<Conv>>,
    drl: Vec<Conv>,
    ns_hid: Dense,
    ns_mu: Dense,
    ns_lv: Dense,
    s_hid: Dense,
    s_mu: Dense,
    s_lv: Dense,
    prior_mu1: Pid,
    prior_lv1: Pid,
    gru: Gru,
    prior_mu: Dense,
    prior_lv: Dense,
    dec: Vec<Conv>,
    log_sigma_x: Option<Pid>,
    tc: Vec<Dense>,
    pub(crate) gen: Vec<Conv>,
    pub(crate) sdisc: Vec<Dense>,
    pub(crate) pred: Vec<Conv>,
    pub(crate) head: Vec<Conv>,
}

struct Builder<'a> {
    ps: &'a mut ParamSet,
    init: Initializer,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, group: Group, k: [usize; 3], cin: usize, cout: usize) -> Conv {
        let fan_in = k[0] * k[1] * k[2] * cin;
        let w = self.init.uniform(&[k[0], k[1], k[2], cin, cout], fan_in);
        Conv {
            w: self.ps.add(format!("{name}.w"), group, w),
            b: self.ps.add(format!("{name}.b"), group, Tensor::zeros(&[cout])),
        }
    }

    fn dense(&mut self, name: &str, group: Group, din: usize, dout: usize, bias: bool) -> Dense {
        let w = self.init.uniform(&[din, dout], din);
        Dense {
            w: self.ps.add(format!("{name}.w"), group, w),
            b: bias.then(|| self.ps.add(format!("{name}.b"), group, Tensor::zeros(&[dout]))),
        }
    }

    fn enc_stack(&mut self, name: &str, kt: usize, ks: usize, cin: usize) -> Vec<Conv> {
        let mut c = cin;
        ENC_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let kt = if i == 0 { kt } else { 1 };
                let layer = self.conv(&format!("enc.{name}.{i}"), Group::Encoder, [kt, ks, ks], c, out);
                c = out;
                layer
            })
            .collect()
    }
}

/// Model parameters together with the architecture handles into them.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub(crate) arch: Arch,
}

impl Model {
    /// Fresh model; weights are fan-in scaled uniform draws, biases zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::default();
        let mut b = Builder {
            ps: &mut ps,
            init: Initializer::new(seed),
        };
        let (d_s, d_ns, k, n) = (cfg.d_s, cfg.d_ns, cfg.k(), cfg.n());
        let enc3 = (cfg.k3 > 0).then(|| b.enc_stack("st", 2, 3, cfg.k3));
        let enc2 = (cfg.k2 > 0).then(|| b.enc_stack("sp", 1, 3, cfg.k2));
        let enc1 = (cfg.k1 > 0).then(|| b.enc_stack("tm", 2, 1, cfg.k1));
        let m = cfg.modalities();
        let drl = vec![
            b.conv("drl.0", Group::Encoder, [2, 3, 3], m, DRL_CHANNELS[0]),
            b.conv("drl.1", Group::Encoder, [2, 3, 3], DRL_CHANNELS[0], DRL_CHANNELS[1]),
        ];
        let f = DRL_CHANNELS[1];
        let ph = POST_HIDDEN;
        let ns_hid = b.dense("post.ns_hid", Group::Encoder, f, ph, true);
        let ns_mu = b.dense("post.ns_mu", Group::Encoder, ph, d_ns, true);
        let ns_lv = b.dense("post.ns_lv", Group::Encoder, ph, d_ns, true);
        let s_hid = b.dense("post.s_hid", Group::Encoder, f, ph, true);
        let s_mu = b.dense("post.s_mu", Group::Encoder, ph, d_s, true);
        let s_lv = b.dense("post.s_lv", Group::Encoder, ph, d_s, true);

        let prior_mu1 = b.ps.add("prior.mu1", Group::Prior, Tensor::zeros(&[d_ns]));
        let prior_lv1 = b.ps.add("prior.lv1", Group::Prior, Tensor::zeros(&[d_ns]));
        let g = GRU_HIDDEN;
        let gru = Gru {
            xr: b.dense("prior.gru.xr", Group::Prior, d_ns, g, true),
            xu: b.dense("prior.gru.xu", Group::Prior, d_ns, g, true),
            xc: b.dense("prior.gru.xc", Group::Prior, d_ns, g, true),
            hr: b.dense("prior.gru.hr", Group::Prior, g, g, false),
            hu: b.dense("prior.gru.hu", Group::Prior, g, g, false),
            hc: b.dense("prior.gru.hc", Group::Prior, g, g, false),
        };
        let prior_mu = b.dense("prior.mu", Group::Prior, g, d_ns, true);
        let prior_lv = b.dense("prior.lv", Group::Prior, g, d_ns, true);

        let dec = vec![
            b.conv("dec.0", Group::Decoder, [1, 3, 3], 1 + d_ns, DEC_HIDDEN),
            b.conv("dec.1", Group::Decoder, [1, 3, 3], DEC_HIDDEN, k),
        ];
        let log_sigma_x = cfg
            .learn_sigma_x
            .then(|| b.ps.add("dec.log_sigma_x", Group::Decoder, Tensor::full(&[k], SIGMA_X_INIT.ln())));

        let tc = vec![
            b.dense("tc.0", Group::TcDisc, d_s + d_ns, TC_HIDDEN, true),
            b.dense("tc.1", Group::TcDisc, TC_HIDDEN, TC_HIDDEN, true),
            b.dense("tc.2", Group::TcDisc, TC_HIDDEN, 1, true),
        ];
        let gen = vec![
            b.conv("gen.0", Group::SensGen, [1, 1, 1], d_s, GEN_HIDDEN),
            b.conv("gen.1", Group::SensGen, [1, 3, 3], GEN_HIDDEN, 1),
        ];
        let sdisc = vec![
            b.dense("sdisc.0", Group::SensDisc, n, SDISC_HIDDEN, true),
            b.dense("sdisc.1", Group::SensDisc, SDISC_HIDDEN, 1, true),
        ];
        let pred = vec![
            b.conv("pred.0", Group::Predictor, [1, 1, 1], d_ns, PRED_HIDDEN),
            b.conv("pred.1", Group::Predictor, [1, 1, 1], PRED_HIDDEN, 1),
        ];
        let head = vec![
            b.conv("head.0", Group::Head, [1, 3, 3], (HEAD_LAGS + 1) * d_ns, HEAD_HIDDEN),
            b.conv("head.1", Group::Head, [1, 3, 3], HEAD_HIDDEN, 1),
        ];
        let arch = Arch {
            enc3,
            enc2,
            enc1,
            drl,
            ns_hid,
            ns_mu,
            ns_lv,
            s_hid,
            s_mu,
            s_lv,
            prior_mu1,
            prior_lv1,
            gru,
            prior_mu,
            prior_lv,
            dec,
            log_sigma_x,
            tc,
            gen,
            sdisc,
            pred,
            head,
        };
        Ok(Self { cfg, params: ps, arch })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, stored: ParamSet) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if stored.len() != model.params.len() {
            return Err(FairError::Shape {
                expected: format!("{} parameter tensors", model.params.len()),
                got: stored.len().to_string(),
            });
        }
        for (dst, src) in model.params.params.iter_mut().zip(stored.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() || dst.group != src.group {
                return Err(FairError::Shape {
                    expected: format!("{} {:?}", dst.name, dst.value.shape()),
                    got: format!("{} {:?}", src.name, src.value.shape()),
                });
            }
            dst.value = src.value;
        }
        Ok(model)
    }
}

/// A batch of windows cut from a feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub t: usize,
    /// `[N, T, H, W, K]`
    pub x: Tensor,
    /// Sensitive map repeated per window, `[N, H, W, 1]`.
    pub s: Tensor,
    /// Frame following each window for the target feature, `[N, H, W, 1]`,
    /// when it exists.
    pub next: Option<Tensor>,
}

impl Batch {
    /// Windows `start..start + t` for every start. `s` may be empty when the
    /// sensitive map is not needed (inference).
    pub fn from_stack(stack: &FeatureStack, s: &[f64], starts: &[usize], t: usize, target: usize) -> Result<Self> {
        let (n_cells, k) = (stack.grid.n(), stack.k());
        if t == 0 {
            return Err(FairError::invalid("window length", "must be positive"));
        }
        if let Some(&bad) = starts.iter().find(|&&st| st + t > stack.t) {
            return Err(FairError::SeriesTooShort {
                len: stack.t,
                needed: bad + t,
            });
        }
        if target >= k {
            return Err(FairError::invalid("target feature", format!("index {target} >= {k}")));
        }
        let nb = starts.len();
        let mut x = vec![0.0; nb * t * n_cells * k];
        for (b, &st) in starts.iter().enumerate() {
            for tt in 0..t {
                for cell in 0..n_cells {
                    let base = ((b * t + tt) * n_cells + cell) * k;
                    for f in 0..k {
                        x[base + f] = stack.value(f, cell, st + tt);
                    }
                }
            }
        }
        let has_next = starts.iter().all(|&st| st + t < stack.t);
        let next = has_next.then(|| {
            let mut v = Vec::with_capacity(nb * n_cells);
            for &st in starts {
                v.extend((0..n_cells).map(|cell| stack.value(target, cell, st + t)));
            }
            Tensor::new(vec![nb, stack.grid.height, stack.grid.width, 1], v)
        });
        let s_rep = if s.is_empty() {
            Tensor::zeros(&[nb, stack.grid.height, stack.grid.width, 1])
        } else {
            if s.len() != n_cells {
                return Err(FairError::Shape {
                    expected: format!("{n_cells} sensitive values"),
                    got: s.len().to_string(),
                });
            }
            Tensor::new(
                vec![nb, stack.grid.height, stack.grid.width, 1],
                (0..nb).flat_map(|_| s.iter().copied()).collect(),
            )
        };
        Ok(Self {
            n: nb,
            t,
            x: Tensor::new(vec![nb, t, stack.grid.height, stack.grid.width, k], x),
            s: s_rep,
            next,
        })
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = [self.n, self.t, cfg.height, cfg.width, cfg.k()];
        if self.x.shape() != want {
            return Err(FairError::Shape {
                expected: format!("{want:?}"),
                got: format!("{:?}", self.x.shape()),
            });
        }
        Ok(())
    }

    /// Splits channels into the per-modality encoder inputs.
    fn modality_inputs(&self, cfg: &ModelConfig) -> [Option<Tensor>; 3] {
        let (n, t, h, w, k) = (self.n, self.t, cfg.height, cfg.width, cfg.k());
        let x = self.x.data();
        let at = |b: usize, tt: usize, cell: usize, f: usize| x[((b * t + tt) * h * w + cell) * k + f];
        let x3 = (cfg.k3 > 0).then(|| {
            let mut v = Vec::with_capacity(n * t * h * w * cfg.k3);
            for b in 0..n {
                for tt in 0..t {
                    for cell in 0..h * w {
                        v.extend((0..cfg.k3).map(|f| at(b, tt, cell, f)));
                    }
                }
            }
            Tensor::new(vec![n, t, h, w, cfg.k3], v)
        });
        let x2 = (cfg.k2 > 0).then(|| {
            let mut v = Vec::with_capacity(n * h * w * cfg.k2);
            for b in 0..n {
                for cell in 0..h * w {
                    v.extend((0..cfg.k2).map(|f| at(b, 0, cell, cfg.k3 + f)));
                }
            }
            Tensor::new(vec![n, 1, h, w, cfg.k2], v)
        });
        let x1 = (cfg.k1 > 0).then(|| {
            let mut v = Vec::with_capacity(n * t * cfg.k1);
            for b in 0..n {
                for tt in 0..t {
                    v.extend((0..cfg.k1).map(|f| at(b, tt, 0, cfg.k3 + cfg.k2 + f)));
                }
            }
            Tensor::new(vec![n, t, 1, 1, cfg.k1], v)
        });
        [x3, x2, x1]
    }
}

/// Reparameterization noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `[N, H, W, d_S]`
    pub eps_s: Tensor,
    /// `[N, T, H, W, d_Ns]`
    pub eps_ns: Tensor,
    /// Seed for the total-correlation dimension shuffle.
    pub perm_seed: u64,
}

impl Noise {
    pub fn draw(cfg: &ModelConfig, n: usize, t: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};
        let (h, w) = (cfg.height, cfg.width);
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| StandardNormal.sample(&mut *rng));
        let eps_s = normal(&[n, h, w, cfg.d_s]);
        let eps_ns = normal(&[n, t, h, w, cfg.d_ns]);
        Self {
            eps_s,
            eps_ns,
            perm_seed: rng.random(),
        }
    }

    pub fn zeros(cfg: &ModelConfig, n: usize, t: usize) -> Self {
        Self {
            eps_s: Tensor::zeros(&[n, cfg.height, cfg.width, cfg.d_s]),
            eps_ns: Tensor::zeros(&[n, t, cfg.height, cfg.width, cfg.d_ns]),
            perm_seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Graph building blocks

pub(crate) fn conv_layer(tape: &mut Tape, bind: &mut Binder, c: Conv, x: Var) -> Var {
    let w = bind.var(tape, c.w);
    let b = bind.var(tape, c.b);
    let y = tape.conv(x, w);
    tape.add_row(y, b)
}

pub(crate) fn dense(tape: &mut Tape, bind: &mut Binder, d: Dense, x: Var) -> Var {
    let w = bind.var(tape, d.w);
    let y = tape.matmul(x, w);
    match d.b {
        Some(b) => {
            let b = bind.var(tape, b);
            tape.add_row(y, b)
        }
        None => y,
    }
}

/// Convolution stack with `tanh` between layers and after the last one.
pub(crate) fn conv_stack(tape: &mut Tape, bind: &mut Binder, layers: &[Conv], mut x: Var) -> Var {
    for &c in layers {
        let y = conv_layer(tape, bind, c, x);
        x = tape.tanh(y);
    }
    x
}

/// Broadcasts singleton `T`, `H` or `W` axes of a 5-D tensor.
pub(crate) fn broadcast5(tape: &mut Tape, x: Var, to: [usize; 5]) -> Var {
    let s = tape.shape(x).to_vec();
    assert_eq!(s.len(), 5);
    assert!(s[0] == to[0] && s[4] == to[4]);
    if s == to {
        return x;
    }
    let mut idx = Vec::with_capacity(to.iter().product());
    for n in 0..to[0] {
        for t in 0..to[1] {
            let st = if s[1] == 1 { 0 } else { t };
            for h in 0..to[2] {
                let sh = if s[2] == 1 { 0 } else { h };
                for w in 0..to[3] {
                    let sw = if s[3] == 1 { 0 } else { w };
                    let base = (((n * s[1] + st) * s[2] + sh) * s[3] + sw) * s[4];
                    idx.extend(base..base + s[4]);
                }
            }
        }
    }
    tape.gather(x, Rc::new(idx), to.to_vec())
}

/// Repeats a vector `[d]` into `[rows.., d]`.
fn tile_row(tape: &mut Tape, v: Var, shape: Vec<usize>) -> Var {
    let d = tape.value(v).len();
    let total: usize = shape.iter().product();
    let idx: Vec<usize> = (0..total).map(|i| i % d).collect();
    tape.gather(v, Rc::new(idx), shape)
}

/// Frame `t` of `[N, T, H, W, d]` as `[N, H, W, d]`.
fn slice_t(tape: &mut Tape, x: Var, t: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, tt, inner) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut idx = Vec::with_capacity(n * inner);
    for b in 0..n {
        let base = (b * tt + t) * inner;
        idx.extend(base..base + inner);
    }
    tape.gather(x, Rc::new(idx), vec![s[0], s[2], s[3], s[4]])
}

/// Stacks `T` maps `[N, H, W, d]` into `[N, T, H, W, d]`.
fn stack_t(tape: &mut Tape, frames: &[Var]) -> Var {
    let s = tape.shape(frames[0]).to_vec();
    let (n, hw, d, t) = (s[0], s[1] * s[2], s[3], frames.len());
    let cat = tape.concat_last(frames);
    // `cat` is [N, H, W, T * d]
    let mut idx = Vec::with_capacity(n * t * hw * d);
    for b in 0..n {
        for tt in 0..t {
            for cell in 0..hw {
                let base = ((b * hw + cell) * t + tt) * d;
                idx.extend(base..base + d);
            }
        }
    }
    tape.gather(cat, Rc::new(idx), vec![n, t, s[1], s[2], d])
}

/// Mean over the `T` axis of `[N, T, H, W, d]`.
pub(crate) fn mean_over_t(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    tape.mean_mid(x, s[0], s[1], s[2] * s[3] * s[4], vec![s[0], s[2], s[3], s[4]])
}

/// Posterior parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu_s: Var,
    pub lv_s: Var,
    pub mu_ns: Var,
    pub lv_ns: Var,
}

pub(crate) fn encode_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, batch: &Batch) -> PosteriorVars {
    let cfg = &model.cfg;
    let a = &model.arch;
    let (n, t, h, w) = (batch.n, batch.t, cfg.height, cfg.width);
    let inputs = batch.modality_inputs(cfg);
    let stacks = [&a.enc3, &a.enc2, &a.enc1];
    let mut parts = Vec::new();
    for (x, layers) in inputs.into_iter().zip(stacks) {
        if let (Some(x), Some(layers)) = (x, layers) {
            let xv = tape.constant(x);
            let y = conv_stack(tape, bind, layers, xv);
            parts.push(broadcast5(tape, y, [n, t, h, w, 1]));
        }
    }
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat_last(&parts) };
    let feats = conv_stack(tape, bind, &a.drl, joined);
    let hid = dense(tape, bind, a.ns_hid, feats);
    let hid = tape.tanh(hid);
    let mu_ns = dense(tape, bind, a.ns_mu, hid);
    let lv_raw = dense(tape, bind, a.ns_lv, hid);
    let lv_ns = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let pooled = mean_over_t(tape, feats);
    let hid = dense(tape, bind, a.s_hid, pooled);
    let hid = tape.tanh(hid);
    let mu_s = dense(tape, bind, a.s_mu, hid);
    let lv_raw = dense(tape, bind, a.s_lv, hid);
    let lv_s = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    PosteriorVars { mu_s, lv_s, mu_ns, lv_ns }
}

/// `mu + exp(lv / 2) * eps`.
pub(crate) fn reparam(tape: &mut Tape, mu: Var, lv: Var, eps: &Tensor) -> Var {
    let half = tape.scale(lv, 0.5);
    let sigma = tape.exp(half);
    let e = tape.constant(eps.clone());
    let se = tape.mul(sigma, e);
    tape.add(mu, se)
}

fn gru_step(tape: &mut Tape, bind: &mut Binder, g: &Gru, h: Var, z: Var) -> Var {
    let gate = |tape: &mut Tape, bind: &mut Binder, dx: Dense, dh: Dense, hin: Var| {
        let a = dense(tape, bind, dx, z);
        let b = dense(tape, bind, dh, hin);
        tape.add(a, b)
    };
    let r_pre = gate(tape, bind, g.xr, g.hr, h);
    let r = tape.sigmoid(r_pre);
    let u_pre = gate(tape, bind, g.xu, g.hu, h);
    let u = tape.sigmoid(u_pre);
    let rh = tape.mul(r, h);
    let c_pre = gate(tape, bind, g.xc, g.hc, rh);
    let c = tape.tanh(c_pre);
    let diff = tape.sub(c, h);
    let step = tape.mul(u, diff);
    tape.add(h, step)
}

/// Sequential prior over `z [N, T, H, W, d]`: step 0 uses the learned
/// initial pair, step `t` the recurrent map of frames `< t`. Also returns the
/// one-step-ahead mean after the last frame.
pub(crate) fn prior_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, z: Var) -> (Var, Var, Var) {
    let a = &model.arch;
    let s = tape.shape(z).to_vec();
    let (n, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    let mu1 = bind.var(tape, a.prior_mu1);
    let lv1 = bind.var(tape, a.prior_lv1);
    let mut mus = vec![tile_row(tape, mu1, vec![n, h, w, d])];
    let lv1 = tape.clamp(lv1, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let mut lvs = vec![tile_row(tape, lv1, vec![n, h, w, d])];
    let mut hidden = tape.constant(Tensor::zeros(&[n, h, w, GRU_HIDDEN]));
    let mut next_mu = None;
    for tt in 0..t {
        let zt = slice_t(tape, z, tt);
        hidden = gru_step(tape, bind, &a.gru, hidden, zt);
        let mu = dense(tape, bind, a.prior_mu, hidden);
        if tt + 1 < t {
            let lv_raw = dense(tape, bind, a.prior_lv, hidden);
            mus.push(mu);
            lvs.push(tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP));
        } else {
            next_mu = Some(mu);
        }
    }
    let mu = stack_t(tape, &mus);
    let lv = stack_t(tape, &lvs);
    (mu, lv, next_mu.expect("window has at least one frame"))
}

/// Decoder mean `[N, T, H, W, K]` from the sensitive map and `z^Ns`.
pub(crate) fn decode_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, s_map: Var, z_ns: Var) -> Var {
    let a = &model.arch;
    let zs = tape.shape(z_ns).to_vec();
    let ss = tape.shape(s_map).to_vec();
    let s5 = tape.reshape(s_map, vec![ss[0], 1, ss[1], ss[2], 1]);
    let s_b = broadcast5(tape, s5, [zs[0], zs[1], zs[2], zs[3], 1]);
    let inp = tape.concat_last(&[s_b, z_ns]);
    let hid = conv_layer(tape, bind, a.dec[0], inp);
    let hid = tape.tanh(hid);
    conv_layer(tape, bind, a.dec[1], hid)
}

/// Per-channel observation log-scale broadcast to the shape of `mu_x`, or
/// `None` for the fixed unit scale.
fn log_sigma_x(tape: &mut Tape, bind: &mut Binder, model: &Model, like: &[usize]) -> Option<Var> {
    let id = model.arch.log_sigma_x?;
    let ls = bind.var(tape, id);
    let ls = tape.clamp(ls, 1e-3f64.ln(), 10f64.ln());
    Some(tile_row(tape, ls, like.to_vec()))
}

/// `sum log N(x; mu, sigma^2)`.
fn recon_ll(tape: &mut Tape, x: Var, mu: Var, log_sigma: Option<Var>) -> Var {
    let count = tape.value(x).len() as f64;
    let diff = tape.sub(x, mu);
    let sq = tape.square(diff);
    let constant = -0.5 * count * (2.0 * PI).ln();
    match log_sigma {
        None => {
            let s = tape.sum(sq);
            let half = tape.scale(s, -0.5);
            tape.add_scalar(half, constant)
        }
        Some(ls) => {
            let m2 = tape.scale(ls, -2.0);
            let inv_var = tape.exp(m2);
            let scaled = tape.mul(sq, inv_var);
            let s = tape.sum(scaled);
            let half = tape.scale(s, -0.5);
            let ls_sum = tape.sum(ls);
            let out = tape.sub(half, ls_sum);
            tape.add_scalar(out, constant)
        }
    }
}

/// `KL(N(mu, e^lv) || N(0, 1))` summed over every element.
pub(crate) fn kl_standard(tape: &mut Tape, mu: Var, lv: Var) -> Var {
    let e = tape.exp(lv);
    let m2 = tape.square(mu);
    let a = tape.add(e, m2);
    let b = tape.sub(a, lv);
    let s = tape.sum(b);
    let count = tape.value(mu).len() as f64;
    let shifted = tape.add_scalar(s, -count);
    tape.scale(shifted, 0.5)
}

/// `KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))` summed over every element.
pub(crate) fn kl_gauss(tape: &mut Tape, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Var {
    let eq = tape.exp(lv_q);
    let dm = tape.sub(mu_q, mu_p);
    let dm2 = tape.square(dm);
    let num = tape.add(eq, dm2);
    let neg = tape.neg(lv_p);
    let inv = tape.exp(neg);
    let ratio = tape.mul(num, inv);
    let dl = tape.sub(lv_p, lv_q);
    let inner = tape.add(dl, ratio);
    let s = tape.sum(inner);
    let count = tape.value(mu_q).len() as f64;
    let shifted = tape.add_scalar(s, -count);
    tape.scale(shifted, 0.5)
}

/// Scalar nodes of the sequential ELBO.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub recon_ll: Var,
    pub kl_s: Var,
    pub kl_ns: Var,
    /// `(-recon_ll + kl_s + kl_ns) / (N * cells * T)`
    pub neg_elbo: Var,
}

/// Latent samples and derived quantities on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub post: PosteriorVars,
    pub z_s: Var,
    pub z_ns: Var,
    pub elbo: ElboVars,
    pub mu_x: Var,
}

pub(crate) fn vae_forward(tape: &mut Tape, bind: &mut Binder, model: &Model, batch: &Batch, noise: &Noise) -> ForwardVars {
    let post = encode_vars(tape, bind, model, batch);
    let z_s = reparam(tape, post.mu_s, post.lv_s, &noise.eps_s);
    let z_ns = reparam(tape, post.mu_ns, post.lv_ns, &noise.eps_ns);
    let (p_mu, p_lv, _) = prior_vars(tape, bind, model, z_ns);
    let s_map = tape.constant(batch.s.clone());
    let mu_x = decode_vars(tape, bind, model, s_map, z_ns);
    let x = tape.constant(batch.x.clone());
    let ls = log_sigma_x(tape, bind, model, batch.x.shape());
    let recon = recon_ll(tape, x, mu_x, ls);
    let kl_s = kl_standard(tape, post.mu_s, post.lv_s);
    let kl_ns = kl_gauss(tape, post.mu_ns, post.lv_ns, p_mu, p_lv);
    let kls = tape.add(kl_s, kl_ns);
    let neg = tape.sub(kls, recon);
    let norm = (batch.n * model.cfg.n() * batch.t) as f64;
    let neg_elbo = tape.scale(neg, 1.0 / norm);
    ForwardVars {
        post,
        z_s,
        z_ns,
        elbo: ElboVars {
            recon_ll: recon,
            kl_s,
            kl_ns,
            neg_elbo,
        },
        mu_x,
    }
}

/// Per-(window, cell) latent vectors `[z^S, mean_t z^Ns]` as `[N*H*W, D]`.
pub(crate) fn tc_vectors(tape: &mut Tape, z_s: Var, z_ns: Var) -> Var {
    let pooled = mean_over_t(tape, z_ns);
    let cat = tape.concat_last(&[z_s, pooled]);
    let s = tape.shape(cat).to_vec();
    tape.reshape(cat, vec![s[0] * s[1] * s[2], s[3]])
}

/// Discriminator logits `[B, 1]`, softly capped at `LOGIT_CAP`.
pub(crate) fn tc_logits(tape: &mut Tape, bind: &mut Binder, model: &Model, z: Var) -> Var {
    let layers = &model.arch.tc;
    let mut x = z;
    for (i, &d) in layers.iter().enumerate() {
        let y = dense(tape, bind, d, x);
        x = if i + 1 < layers.len() { tape.tanh(y) } else { y };
    }
    tape.soft_cap(x, LOGIT_CAP)
}

pub(crate) fn tc_disc_loss_vars(tape: &mut Tape, joint_logits: Var, perm_logits: Var) -> Var {
    let nj = tape.neg(joint_logits);
    let a = tape.softplus(nj);
    let a = tape.mean(a);
    let b = tape.softplus(perm_logits);
    let b = tape.mean(b);
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Forecast head on the features of [`head_features_vars`], output `[N, H, W, 1]`.
pub(crate) fn head_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, features: Var) -> Var {
    let s = tape.shape(features).to_vec();
    let x = tape.reshape(features, vec![s[0], 1, s[1], s[2], s[3]]);
    let a = &model.arch;
    let hid = conv_layer(tape, bind, a.head[0], x);
    let hid = tape.tanh(hid);
    let out = conv_layer(tape, bind, a.head[1], hid);
    let out = tape.softplus(out);
    tape.reshape(out, vec![s[0], s[1], s[2], 1])
}

/// Head input features from posterior means: `mu^Ns` of the last
/// [`HEAD_LAGS`] steps (the first step repeated for shorter windows) and the
/// prior's next-step mean, `[N, H, W, (HEAD_LAGS + 1) d_Ns]`.
pub(crate) fn head_features_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, mu_ns: Var) -> Var {
    let t = tape.shape(mu_ns)[1];
    let mut parts: Vec<Var> = (0..HEAD_LAGS)
        .map(|lag| slice_t(tape, mu_ns, (t - 1).saturating_sub(HEAD_LAGS - 1 - lag)))
        .collect();
    let (_, _, next) = prior_vars(tape, bind, model, mu_ns);
    parts.push(next);
    tape.concat_last(&parts)
}

// ---------------------------------------------------------------------------
// Tensor-level operations

/// Diagonal Gaussian posterior over both latent groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu_s: Tensor,
    pub sigma_s: Tensor,
    pub mu_ns: Tensor,
    pub sigma_ns: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_s: Tensor,
    pub z_ns: Tensor,
    pub eps_s: Tensor,
    pub eps_ns: Tensor,
}

fn sigma_of(lv: &Tensor) -> Tensor {
    lv.map(|v| (0.5 * v).exp())
}

pub fn encode(model: &Model, batch: &Batch) -> Result<LatentPosterior> {
    batch.check(&model.cfg)?;
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let p = encode_vars(&mut tape, &mut bind, model, batch);
    Ok(LatentPosterior {
        mu_s: tape.value(p.mu_s).clone(),
        sigma_s: sigma_of(tape.value(p.lv_s)),
        mu_ns: tape.value(p.mu_ns).clone(),
        sigma_ns: sigma_of(tape.value(p.lv_ns)),
    })
}

/// `z = mu + sigma * eps`, elementwise.
pub fn sample_latents(post: &LatentPosterior, eps_s: &Tensor, eps_ns: &Tensor) -> Result<LatentSample> {
    let draw = |mu: &Tensor, sigma: &Tensor, eps: &Tensor| -> Result<Tensor> {
        if eps.shape() != mu.shape() {
            return Err(FairError::Shape {
                expected: format!("{:?}", mu.shape()),
                got: format!("{:?}", eps.shape()),
            });
        }
        let data = mu
            .data()
            .iter()
            .zip(sigma.data())
            .zip(eps.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        Ok(Tensor::new(mu.shape().to_vec(), data))
    };
    Ok(LatentSample {
        z_s: draw(&post.mu_s, &post.sigma_s, eps_s)?,
        z_ns: draw(&post.mu_ns, &post.sigma_ns, eps_ns)?,
        eps_s: eps_s.clone(),
        eps_ns: eps_ns.clone(),
    })
}

/// Prior parameters for step `t = prefix_len + 1` of `R` independent
/// sequences, given `z_prefix [R, t - 1, d_Ns]`. Returns `(mu, sigma)` of
/// shape `[R, d_Ns]`.
pub fn prior_step(model: &Model, rows: usize, z_prefix: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = model.cfg.d_ns;
    let len = z_prefix.len() / (rows * d).max(1);
    if z_prefix.len() != rows * len * d {
        return Err(FairError::Shape {
            expected: format!("[{rows}, t, {d}]"),
            got: format!("{:?}", z_prefix.shape()),
        });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let a = &model.arch;
    if len == 0 {
        let mu = model.params.get(a.prior_mu1).clone();
        let lv = model.params.get(a.prior_lv1).clone();
        let tile = |v: &Tensor| Tensor::from_fn(&[rows, d], |i| v.data()[i % d]);
        let lv = lv.map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        return Ok((tile(&mu), sigma_of(&tile(&lv))));
    }
    // Lay the prefix out as [rows, len, 1, 1, d] so each row is a "cell".
    let data = z_prefix.data();
    let mut reordered = vec![0.0; rows * len * d];
    for r in 0..rows {
        for t in 0..len {
            for k in 0..d {
                reordered[(t * rows + r) * d + k] = data[(r * len + t) * d + k];
            }
        }
    }
    let z = tape.constant(Tensor::new(vec![1, len, rows, 1, d], reordered));
    let mut hidden = tape.constant(Tensor::zeros(&[1, rows, 1, GRU_HIDDEN]));
    for t in 0..len {
        let zt = slice_t(&mut tape, z, t);
        hidden = gru_step(&mut tape, &mut bind, &a.gru, hidden, zt);
    }
    let mu = dense(&mut tape, &mut bind, a.prior_mu, hidden);
    let lv = dense(&mut tape, &mut bind, a.prior_lv, hidden);
    let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok((
        tape.value(mu).clone().reshaped(vec![rows, d]),
        sigma_of(tape.value(lv)).reshaped(vec![rows, d]),
    ))
}

/// Reconstruction mean and scale for `z_ns [N, T, H, W, d_Ns]` given the
/// sensitive map `[N, H, W, 1]`. `z^S` is not an input.
pub fn decode(model: &Model, s_map: &Tensor, z_ns: &Tensor) -> Result<(Tensor, Tensor)> {
    let cfg = &model.cfg;
    let zs = z_ns.shape();
    if zs.len() != 5 || zs[2] != cfg.height || zs[3] != cfg.width || zs[4] != cfg.d_ns {
        return Err(FairError::Shape {
            expected: format!("[N, T, {}, {}, {}]", cfg.height, cfg.width, cfg.d_ns),
            got: format!("{zs:?}"),
        });
    }
    if s_map.shape() != [zs[0], cfg.height, cfg.width, 1] {
        return Err(FairError::Shape {
            expected: format!("[{}, {}, {}, 1]", zs[0], cfg.height, cfg.width),
            got: format!("{:?}", s_map.shape()),
        });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let s = tape.constant(s_map.clone());
    let z = tape.constant(z_ns.clone());
    let mu = decode_vars(&mut tape, &mut bind, model, s, z);
    let shape = tape.shape(mu).to_vec();
    let sigma = match log_sigma_x(&mut tape, &mut bind, model, &shape) {
        Some(ls) => tape.value(ls).map(f64::exp),
        None => Tensor::full(&shape, 1.0),
    };
    Ok((tape.value(mu).clone(), sigma))
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions.
pub fn gaussian_kl(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let d = mu_q.len();
    if sigma_q.len() != d || mu_p.len() != d || sigma_p.len() != d {
        return Err(FairError::Shape {
            expected: format!("{d} dimensions"),
            got: format!("{}, {}, {}", sigma_q.len(), mu_p.len(), sigma_p.len()),
        });
    }
    if let Some(&bad) = sigma_q.iter().chain(sigma_p).find(|s| !(**s > 0.0)) {
        return Err(FairError::NonPositiveSigma(bad));
    }
    Ok((0..d)
        .map(|i| {
            let (sq, sp) = (sigma_q[i], sigma_p[i]);
            let dm = mu_q[i] - mu_p[i];
            (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon_ll: f64,
    pub kl_s: f64,
    pub kl_ns_sum: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.recon_ll - self.kl_s - self.kl_ns_sum
    }
}

/// ELBO terms for a batch with the given posterior and sample. Prior pairs
/// come from the sampled `z^Ns` prefix.
pub fn elbo_terms(model: &Model, batch: &Batch, post: &LatentPosterior, sample: &LatentSample) -> Result<ElboTerms> {
    batch.check(&model.cfg)?;
    let (n, t, h, w, d) = (batch.n, batch.t, model.cfg.height, model.cfg.width, model.cfg.d_ns);
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let z_ns = tape.constant(sample.z_ns.clone());
    let (p_mu, p_lv, _) = prior_vars(&mut tape, &mut bind, model, z_ns);
    let s_map = tape.constant(batch.s.clone());
    let mu_x = decode_vars(&mut tape, &mut bind, model, s_map, z_ns);
    let x = tape.constant(batch.x.clone());
    let ls = log_sigma_x(&mut tape, &mut bind, model, batch.x.shape());
    let recon = recon_ll(&mut tape, x, mu_x, ls);

    let kl_s = gaussian_kl(
        post.mu_s.data(),
        post.sigma_s.data(),
        &vec![0.0; post.mu_s.len()],
        &vec![1.0; post.mu_s.len()],
    )?;
    let p_sigma = sigma_of(tape.value(p_lv));
    let kl_ns = gaussian_kl(post.mu_ns.data(), post.sigma_ns.data(), tape.value(p_mu).data(), p_sigma.data())?;
    debug_assert_eq!(post.mu_ns.shape(), [n, t, h, w, d]);
    Ok(ElboTerms {
        recon_ll: tape.item(recon),
        kl_s,
        kl_ns_sum: kl_ns,
    })
}

/// Independently shuffles every column of `z [B, d]` across the batch.
pub fn permute_dims(z: &Tensor, seed: u64) -> Tensor {
    let (b, d) = (z.shape()[0], z.last_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = z.data();
    let mut out = vec![0.0; src.len()];
    let mut order: Vec<usize> = (0..b).collect();
    for k in 0..d {
        order.shuffle(&mut rng);
        for (row, &from) in order.iter().enumerate() {
            out[row * d + k] = src[from * d + k];
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Mean discriminator logit: the density-ratio estimate of total
/// correlation.
pub fn tc_penalty(model: &Model, z: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let zv = tape.constant(z.clone());
    let l = tc_logits(&mut tape, &mut bind, model, zv);
    let m = tape.mean(l);
    tape.item(m)
}

/// Binary cross-entropy of joint (label 1) against permuted (label 0)
/// samples, averaged over both halves.
pub fn tc_disc_loss(model: &Model, z_joint: &Tensor, z_perm: &Tensor) -> Result<f64> {
    if z_joint.shape() != z_perm.shape() {
        return Err(FairError::Shape {
            expected: format!("{:?}", z_joint.shape()),
            got: format!("{:?}", z_perm.shape()),
        });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let j = tape.constant(z_joint.clone());
    let p = tape.constant(z_perm.clone());
    let lj = tc_logits(&mut tape, &mut bind, model, j);
    let lp = tc_logits(&mut tape, &mut bind, model, p);
    let loss = tc_disc_loss_vars(&mut tape, lj, lp);
    Ok(tape.item(loss))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::{gen_scenario, ScenarioConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny() -> (FeatureStack, Vec<f64>, ModelConfig) {
        let cfg = ScenarioConfig {
            height: 4,
            width: 4,
            t: 24,
            period: 8,
            smooth_radius: 1,
            ..Default::default()
        };
        let (stack, s, _, _) = gen_scenario(&cfg).unwrap();
        let mcfg = ModelConfig::for_stack(&stack, 4, 4, false).unwrap();
        (stack, s.values().to_vec(), mcfg)
    }

    #[test]
    fn encode_respects_clamp_and_is_deterministic() {
        let (stack, s, cfg) = tiny();
        let model = Model::new(cfg, 1).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[0, 5], 6, 0).unwrap();
        let a = encode(&model, &batch).unwrap();
        let b = encode(&model, &batch).unwrap();
        assert_eq!(a, b);
        let lo = (-5.0f64).exp();
        let hi = 5.0f64.exp();
        for sig in a.sigma_s.data().iter().chain(a.sigma_ns.data()) {
            assert!(*sig >= lo && *sig <= hi);
        }
        assert_eq!(a.mu_ns.shape(), [2, 6, 4, 4, 4]);
        assert_eq!(a.mu_s.shape(), [2, 4, 4, 4]);
    }

    #[test]
    fn encoder_is_causal() {
        let (stack, s, cfg) = tiny();
        let model = Model::new(cfg, 2).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[3], 8, 0).unwrap();
        let base = encode(&model, &batch).unwrap();
        let (t, inner) = (8, 16 * 3);
        for swap in 1..7 {
            let mut perm = batch.clone();
            let x = perm.x.data_mut();
            for i in 0..inner {
                x.swap(swap * inner + i, (swap + 1) * inner + i);
            }
            let post = encode(&model, &perm).unwrap();
            let per_t = 16 * 4;
            assert_eq!(&base.mu_ns.data()[..swap * per_t], &post.mu_ns.data()[..swap * per_t], "swap {swap}");
            assert_eq!(&base.sigma_ns.data()[..swap * per_t], &post.sigma_ns.data()[..swap * per_t]);
            assert_ne!(base.mu_ns.data()[..t * per_t], post.mu_ns.data()[..t * per_t]);
        }
    }

    #[test]
    fn sampling_examples() {
        let post = LatentPosterior {
            mu_s: Tensor::zeros(&[2]),
            sigma_s: Tensor::full(&[2], 1.0),
            mu_ns: Tensor::new(vec![2], vec![0.5, -0.25]),
            sigma_ns: Tensor::new(vec![2], vec![2.0, 3.0]),
        };
        let e = Tensor::new(vec![2], vec![1.0, -1.0]);
        let z = sample_latents(&post, &e, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(z.z_s.data(), &[1.0, -1.0]);
        assert_eq!(z.z_ns, post.mu_ns);
        let shifted = LatentPosterior {
            mu_ns: post.mu_ns.map(|v| v + 2.0),
            ..post.clone()
        };
        let a = sample_latents(&post, &e, &e).unwrap().z_ns.map(|v| v + 2.0);
        let b = sample_latents(&shifted, &e, &e).unwrap().z_ns;
        assert_eq!(a, b);
        assert!(sample_latents(&post, &Tensor::zeros(&[3]), &e).is_err());
    }

    #[test]
    fn prior_base_case_and_positivity() {
        let (_, _, cfg) = tiny();
        let mut model = Model::new(cfg, 3).unwrap();
        let mu1 = model.arch.prior_mu1;
        model.params.get_mut(mu1).data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let (mu, sigma) = prior_step(&model, 2, &Tensor::zeros(&[2, 0, 4])).unwrap();
        assert_eq!(&mu.data()[4..], &[0.1, 0.2, 0.3, 0.4]);
        assert!(sigma.data().iter().all(|s| *s == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let len = rng.random_range(1..6);
            let prefix = Tensor::from_fn(&[3, len, 4], |_| rng.random_range(-20.0..20.0));
            let (m1, s1) = prior_step(&model, 3, &prefix).unwrap();
            let (m2, s2) = prior_step(&model, 3, &prefix).unwrap();
            assert_eq!((m1.clone(), s1.clone()), (m2, s2));
            assert!(s1.data().iter().all(|s| *s > 0.0) && m1.all_finite());
        }
    }

    #[test]
    fn prior_step_matches_sequence_prior() {
        let (_, _, cfg) = tiny();
        let model = Model::new(cfg, 4).unwrap();
        let z = Tensor::from_fn(&[1, 3, 4, 4, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &[]);
        let zv = tape.constant(z.clone());
        let (mu, _, _) = prior_vars(&mut tape, &mut bind, &model, zv);
        let seq_mu = tape.value(mu).clone();
        // Step 3 for every cell from the explicit prefix of frames 0 and 1.
        let mut prefix = vec![0.0; 16 * 2 * 4];
        for cell in 0..16 {
            for t in 0..2 {
                for k in 0..4 {
                    prefix[(cell * 2 + t) * 4 + k] = z.data()[(t * 16 + cell) * 4 + k];
                }
            }
        }
        let (m, _) = prior_step(&model, 16, &Tensor::new(vec![16, 2, 4], prefix)).unwrap();
        for cell in 0..16 {
            for k in 0..4 {
                assert_relative_eq!(m.data()[cell * 4 + k], seq_mu.data()[(2 * 16 + cell) * 4 + k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn decode_shape_and_determinism() {
        let (_, _, cfg) = tiny();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let s = Tensor::from_fn(&[2, 4, 4, 1], |i| (i % 5) as f64 / 4.0);
        let z = Tensor::from_fn(&[2, 3, 4, 4, 4], |i| (i % 7) as f64 - 3.0);
        let (mu, sigma) = decode(&model, &s, &z).unwrap();
        assert_eq!(mu.shape(), [2, 3, 4, 4, cfg.k()]);
        assert!(mu.all_finite() && sigma.data().iter().all(|v| *v == 1.0));
        assert_eq!(decode(&model, &s, &z).unwrap().0, mu);
        assert!(decode(&model, &Tensor::zeros(&[1, 4, 4, 1]), &z).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(&[0.0], &[1.0], &[0.0], &[1.0]).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        let v = gaussian_kl(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);
        assert!((v - 0.8069).abs() < 1e-4);
        assert!(matches!(
            gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(FairError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn kl_on_tape_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |n| Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0));
        let (mq, lq, mp, lp) = (r(6), r(6), r(6), r(6));
        let mut tape = Tape::new();
        let v: Vec<Var> = [&mq, &lq, &mp, &lp].iter().map(|t| tape.constant((*t).clone())).collect();
        let kl = kl_gauss(&mut tape, v[0], v[1], v[2], v[3]);
        let want = gaussian_kl(mq.data(), sigma_of(&lq).data(), mp.data(), sigma_of(&lp).data()).unwrap();
        assert_relative_eq!(tape.item(kl), want, epsilon = 1e-12);
    }

    #[test]
    fn elbo_at_mode_with_prior_posterior() {
        let (stack, s, cfg) = tiny();
        let model = Model::new(cfg.clone(), 6).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[0], 3, 0).unwrap();
        let post = encode(&model, &batch).unwrap();
        let sample = sample_latents(&post, &Tensor::zeros(post.mu_s.shape()), &Tensor::zeros(post.mu_ns.shape())).unwrap();
        // Replace data by the decoder mean so the reconstruction is exact.
        let (mu_x, _) = decode(&model, &batch.s, &sample.z_ns).unwrap();
        let exact = Batch { x: mu_x, ..batch.clone() };
        let terms = elbo_terms(&model, &exact, &post, &sample).unwrap();
        let count = (3 * 16 * cfg.k()) as f64;
        assert_relative_eq!(terms.recon_ll, -0.5 * count * (2.0 * PI).ln(), epsilon = 1e-9);
        assert!(terms.kl_s >= 0.0 && terms.kl_ns_sum >= 0.0);

        // A posterior equal to the prior at every step has zero KL.
        let z = sample.z_ns.clone();
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &[]);
        let zv = tape.constant(z.clone());
        let (p_mu, p_lv, _) = prior_vars(&mut tape, &mut bind, &model, zv);
        let matched = LatentPosterior {
            mu_s: Tensor::zeros(post.mu_s.shape()),
            sigma_s: Tensor::full(post.mu_s.shape(), 1.0),
            mu_ns: tape.value(p_mu).clone(),
            sigma_ns: sigma_of(tape.value(p_lv)),
        };
        let terms = elbo_terms(&model, &batch, &matched, &sample).unwrap();
        assert_eq!(terms.kl_s, 0.0);
        assert!(terms.kl_ns_sum.abs() < 1e-12);
    }

    #[test]
    fn permute_dims_examples() {
        let one = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(permute_dims(&one, 5), one);
        let pair = Tensor::new(vec![2, 1], vec![3.0, 7.0]);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..20 {
            let p = permute_dims(&pair, seed);
            assert_eq!(p, permute_dims(&pair, seed));
            seen.insert(p.data().iter().map(|v| *v as i64).collect::<Vec<_>>());
        }
        assert_eq!(seen, [vec![3, 7], vec![7, 3]].into_iter().collect());
    }

    proptest! {
        #[test]
        fn permute_dims_preserves_columns(b in 1usize..20, d in 1usize..5, seed in any::<u64>()) {
            let z = Tensor::from_fn(&[b, d], |i| ((i * 7919) % 101) as f64);
            let p = permute_dims(&z, seed);
            for k in 0..d {
                let col = |t: &Tensor| {
                    let mut v: Vec<f64> = (0..b).map(|r| t.data()[r * d + k]).collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                prop_assert_eq!(col(&z), col(&p));
            }
        }

        #[test]
        fn kl_non_negative(mq in -3.0f64..3.0, sq in 0.05f64..5.0, mp in -3.0f64..3.0, sp in 0.05f64..5.0) {
            prop_assert!(gaussian_kl(&[mq], &[sq], &[mp], &[sp]).unwrap() >= -1e-15);
            prop_assert!(gaussian_kl(&[mq], &[sq], &[mq], &[sq]).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn tc_terms_at_zero_logit() {
        let (_, _, cfg) = tiny();
        let mut model = Model::new(cfg, 7).unwrap();
        for id in [model.arch.tc[2].w, model.arch.tc[2].b.unwrap()] {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let z = Tensor::from_fn(&[10, 8], |i| (i as f64).sin());
        assert_eq!(tc_penalty(&model, &z), 0.0);
        let loss = tc_disc_loss(&model, &z, &permute_dims(&z, 1)).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        model.params.get_mut(model.arch.tc[2].b.unwrap()).data_mut()[0] = 0.7;
        assert_relative_eq!(tc_penalty(&model, &z), LOGIT_CAP * (0.07f64).tanh(), epsilon = 1e-15);
    }
}
