//! Disentanglement regularizers and the composite objective.
//!
//! `z^S` is pushed to carry the sensitive attribute through an adversarial
//! generator/discriminator pair, while `z^Ns` is pushed to hide it from a
//! per-cell predictor `P`.

use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::model::{
    conv_layer, dense, mean_over_t, permute_dims, tc_disc_loss_vars, tc_logits, tc_vectors, vae_forward, Batch,
    ForwardVars, Model, Noise, LOGIT_CAP,
};
use crate::nn::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `Ŝ` map `[N, H, W, 1]` in `[0, 1]` from `z^S [N, H, W, d_S]`.
pub(crate) fn gen_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, z_s: Var) -> Var {
    let s = tape.shape(z_s).to_vec();
    let x = tape.reshape(z_s, vec![s[0], 1, s[1], s[2], s[3]]);
    let g = &model.arch.gen;
    let hid = conv_layer(tape, bind, g[0], x);
    let hid = tape.tanh(hid);
    let out = conv_layer(tape, bind, g[1], hid);
    let out = tape.sigmoid(out);
    tape.reshape(out, vec![s[0], s[1], s[2], 1])
}

/// Discriminator logit `[N, 1]` for whole maps `[N, H, W, 1]`.
pub(crate) fn sdisc_logits(tape: &mut Tape, bind: &mut Binder, model: &Model, map: Var) -> Var {
    let s = tape.shape(map).to_vec();
    let flat = tape.reshape(map, vec![s[0], s[1] * s[2]]);
    let d = &model.arch.sdisc;
    let hid = dense(tape, bind, d[0], flat);
    let hid = tape.tanh(hid);
    let out = dense(tape, bind, d[1], hid);
    tape.soft_cap(out, LOGIT_CAP)
}

/// `(L_disc, L_S)` from discriminator logits on real and generated maps.
pub(crate) fn sens_adv_vars(tape: &mut Tape, real: Var, fake: Var) -> (Var, Var) {
    let neg_real = tape.neg(real);
    let a = tape.softplus(neg_real);
    let a = tape.mean(a);
    let b = tape.softplus(fake);
    let b = tape.mean(b);
    let l_disc = tape.add(a, b);
    let neg_fake = tape.neg(fake);
    let c = tape.softplus(neg_fake);
    let l_s = tape.mean(c);
    (l_disc, l_s)
}

/// `P` applied to `z^Ns [N, T, H, W, d_Ns]` pooled over time: `[N, H, W, 1]`.
pub(crate) fn pred_vars(tape: &mut Tape, bind: &mut Binder, model: &Model, z_ns: Var) -> Var {
    let pooled = mean_over_t(tape, z_ns);
    let s = tape.shape(pooled).to_vec();
    let x = tape.reshape(pooled, vec![s[0], 1, s[1], s[2], s[3]]);
    let p = &model.arch.pred;
    let hid = conv_layer(tape, bind, p[0], x);
    let hid = tape.tanh(hid);
    let out = conv_layer(tape, bind, p[1], hid);
    let out = tape.sigmoid(out);
    tape.reshape(out, vec![s[0], s[1], s[2], 1])
}

/// Mean absolute error between `P`'s output and `S`.
pub(crate) fn leak_vars(tape: &mut Tape, pred: Var, s: Var) -> Var {
    let d = tape.sub(pred, s);
    let a = tape.abs(d);
    tape.mean(a)
}

pub fn gen_sensitive(model: &Model, z_s: &Tensor) -> Result<Tensor> {
    let c = &model.cfg;
    let s = z_s.shape();
    if s.len() != 4 || s[1] != c.height || s[2] != c.width || s[3] != c.d_s {
        return Err(FairError::Shape {
            expected: format!("[N, {}, {}, {}]", c.height, c.width, c.d_s),
            got: format!("{s:?}"),
        });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let z = tape.constant(z_s.clone());
    let out = gen_vars(&mut tape, &mut bind, model, z);
    Ok(tape.value(out).clone())
}

fn check_map(model: &Model, m: &Tensor) -> Result<()> {
    let c = &model.cfg;
    let s = m.shape();
    if s.len() != 4 || s[1] != c.height || s[2] != c.width || s[3] != 1 {
        return Err(FairError::Shape {
            expected: format!("[N, {}, {}, 1]", c.height, c.width),
            got: format!("{s:?}"),
        });
    }
    Ok(())
}

/// Discriminator loss and non-saturating generator loss.
pub fn sens_adv_losses(model: &Model, s: &Tensor, s_hat: &Tensor) -> Result<(f64, f64)> {
    check_map(model, s)?;
    check_map(model, s_hat)?;
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let sv = tape.constant(s.clone());
    let fv = tape.constant(s_hat.clone());
    let real = sdisc_logits(&mut tape, &mut bind, model, sv);
    let fake = sdisc_logits(&mut tape, &mut bind, model, fv);
    let (l_disc, l_s) = sens_adv_vars(&mut tape, real, fake);
    Ok((tape.item(l_disc), tape.item(l_s)))
}

/// `L_Ns = mean_i |P(z^Ns_i) - S_i|`.
pub fn ns_leakage_loss(model: &Model, z_ns: &Tensor, s: &Tensor) -> Result<f64> {
    check_map(model, s)?;
    let zs = z_ns.shape();
    if zs.len() != 5 || zs[0] != s.shape()[0] || zs[4] != model.cfg.d_ns {
        return Err(FairError::Shape {
            expected: format!("[{}, T, H, W, {}]", s.shape()[0], model.cfg.d_ns),
            got: format!("{zs:?}"),
        });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.params, &[]);
    let z = tape.constant(z_ns.clone());
    let sv = tape.constant(s.clone());
    let p = pred_vars(&mut tape, &mut bind, model, z);
    let l = leak_vars(&mut tape, p, sv);
    Ok(tape.item(l))
}

/// `neg_elbo + gamma * tc + lambda * (l_s - l_ns)`.
pub fn composite_loss(neg_elbo: f64, tc: f64, l_s: f64, l_ns: f64, lambda: f64, gamma: f64) -> f64 {
    neg_elbo + gamma * tc + lambda * (l_s - l_ns.max(0.0))
}

/// Objective weights and module switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub lambda: f64,
    pub gamma: f64,
    /// Generator/discriminator pair active.
    pub sensitive: bool,
    /// Leakage predictor active.
    pub nonsensitive: bool,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            gamma: 1.0,
            sensitive: true,
            nonsensitive: true,
        }
    }
}

/// Scalar nodes of the main objective.
#[derive(Debug, Clone, Copy)]
pub struct CompositeVars {
    pub loss: Var,
    pub neg_elbo: Var,
    pub tc: Var,
    pub l_s: Option<Var>,
    pub l_ns: Option<Var>,
    pub fwd: ForwardVars,
}

/// Builds the full main objective. Which parameters receive gradients is
/// decided by `bind`.
pub(crate) fn composite_graph(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &Model,
    batch: &Batch,
    noise: &Noise,
    w: &Weights,
) -> CompositeVars {
    let fwd = vae_forward(tape, bind, model, batch, noise);
    regularizer_terms(tape, bind, model, batch, fwd, w)
}

/// Adds the total-correlation and fairness terms to an existing VAE forward
/// pass. Binds only generator, discriminator and predictor parameters, so
/// it may use a different binder than the forward pass.
pub(crate) fn regularizer_terms(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &Model,
    batch: &Batch,
    fwd: ForwardVars,
    w: &Weights,
) -> CompositeVars {
    let zt = tc_vectors(tape, fwd.z_s, fwd.z_ns);
    let logits = tc_logits(tape, bind, model, zt);
    let tc = tape.mean(logits);
    let weighted_tc = tape.scale(tc, w.gamma);
    let mut loss = tape.add(fwd.elbo.neg_elbo, weighted_tc);
    let s_map = tape.constant(batch.s.clone());
    let l_s = w.sensitive.then(|| {
        let fake = gen_vars(tape, bind, model, fwd.z_s);
        let logits = sdisc_logits(tape, bind, model, fake);
        let neg = tape.neg(logits);
        let sp = tape.softplus(neg);
        tape.mean(sp)
    });
    let l_ns = w.nonsensitive.then(|| {
        let p = pred_vars(tape, bind, model, fwd.post.mu_ns);
        leak_vars(tape, p, s_map)
    });
    if let Some(l) = l_s {
        let t = tape.scale(l, w.lambda);
        loss = tape.add(loss, t);
    }
    if let Some(l) = l_ns {
        let t = tape.scale(l, -w.lambda);
        loss = tape.add(loss, t);
    }
    CompositeVars {
        loss,
        neg_elbo: fwd.elbo.neg_elbo,
        tc,
        l_s,
        l_ns,
        fwd,
    }
}

/// Detached latent values handed to the adversaries.
#[derive(Debug, Clone)]
pub struct Detached {
    pub z_s: Tensor,
    pub z_ns: Tensor,
    pub mu_ns: Tensor,
}

impl Detached {
    pub(crate) fn from_tape(tape: &Tape, fwd: &ForwardVars) -> Self {
        Self {
            z_s: tape.value(fwd.z_s).clone(),
            z_ns: tape.value(fwd.z_ns).clone(),
            mu_ns: tape.value(fwd.post.mu_ns).clone(),
        }
    }
}

/// Scalar nodes of the adversary objective.
#[derive(Debug, Clone, Copy)]
pub struct AdversaryVars {
    pub total: Var,
    pub l_disc_tc: Var,
    pub l_disc_s: Option<Var>,
    pub l_ns: Option<Var>,
}

/// TC discriminator, sensitive discriminator and `P` losses on detached
/// latents. The three groups share no parameters, so one backward pass on
/// the sum yields each group's own gradient.
pub(crate) fn adversary_graph(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &Model,
    s: &Tensor,
    lat: &Detached,
    perm_seed: u64,
    w: &Weights,
) -> AdversaryVars {
    let z_s = tape.constant(lat.z_s.clone());
    let z_ns = tape.constant(lat.z_ns.clone());
    let joint = tc_vectors(tape, z_s, z_ns);
    let perm = tape.constant(permute_dims(tape.value(joint), perm_seed));
    let lj = tc_logits(tape, bind, model, joint);
    let lp = tc_logits(tape, bind, model, perm);
    let l_disc_tc = tc_disc_loss_vars(tape, lj, lp);
    let mut total = l_disc_tc;
    let s_map = tape.constant(s.clone());
    let l_disc_s = w.sensitive.then(|| {
        let fake = gen_vars(tape, bind, model, z_s);
        let real_l = sdisc_logits(tape, bind, model, s_map);
        let fake_l = sdisc_logits(tape, bind, model, fake);
        sens_adv_vars(tape, real_l, fake_l).0
    });
    let l_ns = w.nonsensitive.then(|| {
        let mu = tape.constant(lat.mu_ns.clone());
        let p = pred_vars(tape, bind, model, mu);
        leak_vars(tape, p, s_map)
    });
    for l in [l_disc_s, l_ns].into_iter().flatten() {
        total = tape.add(total, l);
    }
    AdversaryVars {
        total,
        l_disc_tc,
        l_disc_s,
        l_ns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::nn::Group;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn zero_last(model: &mut Model, w: crate::nn::Pid, b: Option<crate::nn::Pid>) {
        model.params.get_mut(w).data_mut().fill(0.0);
        if let Some(b) = b {
            model.params.get_mut(b).data_mut().fill(0.0);
        }
    }

    #[test]
    fn generator_outputs_are_bounded() {
        let (_, _, cfg) = tiny();
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let z = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.random_range(-50.0..50.0));
            let s = gen_sensitive(&model, &z).unwrap();
            assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s, gen_sensitive(&model, &z).unwrap());
        }
        assert!(gen_sensitive(&model, &Tensor::zeros(&[1, 4, 4, 3])).is_err());
    }

    #[test]
    fn adversarial_losses_at_zero_logit_and_cap() {
        let (_, _, cfg) = tiny();
        let mut model = Model::new(cfg, 2).unwrap();
        let last = model.arch.sdisc[1];
        zero_last(&mut model, last.w, last.b);
        let s = Tensor::from_fn(&[2, 4, 4, 1], |i| (i % 3) as f64 / 2.0);
        let fake = Tensor::full(&[2, 4, 4, 1], 0.3);
        let (l_disc, l_s) = sens_adv_losses(&model, &s, &fake).unwrap();
        assert_relative_eq!(l_disc, 2.0 * LN_2, epsilon = 1e-15);
        assert_relative_eq!(l_s, LN_2, epsilon = 1e-15);
        // A saturated discriminator that rejects every fake.
        model.params.get_mut(last.b.unwrap()).data_mut()[0] = -1e6;
        let (_, l_s) = sens_adv_losses(&model, &s, &fake).unwrap();
        assert_relative_eq!(l_s, 10.0, epsilon = 1e-3);
    }

    #[test]
    fn leakage_examples() {
        let (_, _, cfg) = tiny();
        let mut model = Model::new(cfg, 3).unwrap();
        let last = model.arch.pred[1];
        zero_last(&mut model, last.w, Some(last.b));
        let z = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| i as f64 * 0.01);
        let s = Tensor::from_fn(&[1, 4, 4, 1], |i| (i % 2) as f64);
        // P outputs sigmoid(0) = 0.5 everywhere.
        assert_relative_eq!(ns_leakage_loss(&model, &z, &s).unwrap(), 0.5, epsilon = 1e-15);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 1, 2, 1], vec![0.3, 0.8]));
        let sv = tape.constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]));
        let l = leak_vars(&mut tape, p, sv);
        assert_relative_eq!(tape.item(l), 0.75, epsilon = 1e-15);
        let exact = tape.constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]));
        let l = leak_vars(&mut tape, exact, sv);
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn composite_examples() {
        assert_relative_eq!(composite_loss(10.0, 2.0, 3.0, 1.0, 0.6, 1.0), 13.2, epsilon = 1e-12);
        assert_eq!(composite_loss(10.0, 2.0, 3.0, 1.0, 0.0, 1.0), 12.0);
        let f = |l| composite_loss(4.5, 0.3, 0.9, 0.2, l, 1.0);
        assert_relative_eq!(f(0.1) + f(0.5), 2.0 * f(0.3), epsilon = 1e-12);
        for l in [0.0, 0.3, 1.7] {
            assert_relative_eq!(f(l) - f(0.0), l * (0.9 - 0.2), epsilon = 1e-12);
        }
    }

    #[test]
    fn graph_terms_match_scalar_formula() {
        let (stack, s, cfg) = tiny();
        let model = Model::new(cfg.clone(), 4).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[0, 4], 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Noise::draw(&cfg, 2, 5, &mut rng);
        let w = Weights::default();
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &[]);
        let g = composite_graph(&mut tape, &mut bind, &model, &batch, &noise, &w);
        let want = composite_loss(
            tape.item(g.neg_elbo),
            tape.item(g.tc),
            tape.item(g.l_s.unwrap()),
            tape.item(g.l_ns.unwrap()),
            w.lambda,
            w.gamma,
        );
        assert_relative_eq!(tape.item(g.loss), want, epsilon = 1e-12);
        let l_ns = tape.item(g.l_ns.unwrap());
        assert!((0.0..=1.0).contains(&l_ns));
    }

    #[test]
    fn adversary_graph_only_touches_adversaries() {
        let (stack, s, cfg) = tiny();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[1], 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Noise::draw(&cfg, 1, 4, &mut rng);
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &[]);
        let g = composite_graph(&mut tape, &mut bind, &model, &batch, &noise, &Weights::default());
        let lat = Detached::from_tape(&tape, &g.fwd);
        let groups = [Group::TcDisc, Group::SensDisc, Group::Predictor];
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &groups);
        let adv = adversary_graph(&mut tape, &mut bind, &model, &batch.s, &lat, 3, &Weights::default());
        let grads = bind.grads(&tape.backward(adv.total));
        assert!(!grads.is_empty());
        for i in grads.keys() {
            assert!(groups.contains(&model.params.params[*i].group));
        }
    }
}
