//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::model::{head_features_vars, head_vars, Batch, Model, Noise};
use crate::nn::{Binder, Group};
use crate::regularizers::{adversary_graph, composite_graph, Detached, Weights};
use crate::tape::{Tape, Var};

/// Worst relative error per parameter group.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub per_group: BTreeMap<Group, f64>,
    pub checked: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_group.values().copied().fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor on the denominator, so entries whose
/// true gradient is ~0 are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` against central differences with step
/// `h` for every element of every parameter in `groups`.
pub fn check<F>(model: &Model, groups: &[Group], h: f64, floor: f64, loss: F) -> GradReport
where
    F: Fn(&mut Tape, &mut Binder, &Model) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, groups);
        let out = loss(&mut tape, &mut bind, model);
        bind.grads(&tape.backward(out))
    };
    let eval = |m: &Model| {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&m.params, &[]);
        let out = loss(&mut tape, &mut bind, m);
        tape.item(out)
    };
    let mut report = GradReport::default();
    let mut probe = model.clone();
    for (i, p) in model.params.params.iter().enumerate() {
        if !groups.contains(&p.group) {
            continue;
        }
        let zeros = vec![0.0; p.value.len()];
        let grad = analytic.get(&i).unwrap_or(&zeros);
        let worst = report.per_group.entry(p.group).or_insert(0.0);
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            probe.params.params[i].value.data_mut()[k] = orig + h;
            let up = eval(&probe);
            probe.params.params[i].value.data_mut()[k] = orig - h;
            let down = eval(&probe);
            probe.params.params[i].value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            *worst = worst.max(rel_err(grad[k], numeric, floor));
            report.checked += 1;
        }
    }
    report
}

/// Gradient check of the composite objective over every group it touches.
pub fn check_composite(model: &Model, batch: &Batch, noise: &Noise, w: &Weights, h: f64, floor: f64) -> GradReport {
    let groups = [
        Group::Encoder,
        Group::Prior,
        Group::Decoder,
        Group::TcDisc,
        Group::SensGen,
        Group::SensDisc,
        Group::Predictor,
    ];
    check(model, &groups, h, floor, |tape, bind, m| {
        composite_graph(tape, bind, m, batch, noise, w).loss
    })
}

/// Gradient check of the adversaries' own objective on fixed latents.
pub fn check_adversaries(model: &Model, batch: &Batch, noise: &Noise, w: &Weights, h: f64, floor: f64) -> GradReport {
    let lat = {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&model.params, &[]);
        let g = composite_graph(&mut tape, &mut bind, model, batch, noise, w);
        Detached::from_tape(&tape, &g.fwd)
    };
    check(model, &[Group::TcDisc, Group::SensDisc, Group::Predictor], h, floor, |tape, bind, m| {
        adversary_graph(tape, bind, m, &batch.s, &lat, noise.perm_seed, w).total
    })
}

/// Gradient check of the forecast head's squared-error loss.
pub fn check_head(model: &Model, batch: &Batch, h: f64, floor: f64) -> GradReport {
    let target = batch.next.clone().expect("batch needs a next frame");
    check(model, &[Group::Head], h, floor, |tape, bind, m| {
        let mu = {
            let mut inner = Tape::new();
            let mut b = Binder::new(&m.params, &[]);
            let p = crate::model::encode_vars(&mut inner, &mut b, m, batch);
            inner.value(p.mu_ns).clone()
        };
        let mu = tape.constant(mu);
        let feats = head_features_vars(tape, bind, m, mu);
        let out = head_vars(tape, bind, m, feats);
        let y = tape.constant(target.clone());
        let d = tape.sub(out, y);
        let sq = tape.square(d);
        tape.mean(sq)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composite_gradients_match_finite_differences() {
        let (stack, s, _) = tiny();
        let cfg = ModelConfig::for_stack(&stack, 4, 4, false).unwrap();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[2], 3, 0).unwrap();
        let noise = Noise::draw(&cfg, 1, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let report = check_composite(&model, &batch, &noise, &Weights::default(), 1e-5, 1e-5);
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.per_group);
        assert_eq!(report.per_group.len(), 7);
        let adv = check_adversaries(&model, &batch, &noise, &Weights::default(), 1e-5, 1e-5);
        assert!(adv.max_rel_err() < 1e-4, "{:?}", adv.per_group);
        let head = check_head(&model, &batch, 1e-5, 1e-5);
        assert!(head.max_rel_err() < 1e-4, "{:?}", head.per_group);
    }

    #[test]
    fn learned_observation_scale_gradients() {
        let (stack, s, _) = tiny();
        let cfg = ModelConfig::for_stack(&stack, 4, 4, true).unwrap();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let batch = Batch::from_stack(&stack, &s, &[1], 3, 0).unwrap();
        let noise = Noise::draw(&cfg, 1, 3, &mut ChaCha8Rng::seed_from_u64(8));
        let w = Weights::default();
        let report = check(&model, &[Group::Decoder], 1e-5, 1e-5, |tape, bind, m| {
            composite_graph(tape, bind, m, &batch, &noise, &w).loss
        });
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.per_group);
    }
}
