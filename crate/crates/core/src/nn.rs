//! Parameter storage, initialization, binding onto a [`Tape`] and the Adam
//! optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Parameter groups, updated and frozen as units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Prior,
    Decoder,
    TcDisc,
    SensGen,
    SensDisc,
    Predictor,
    Head,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Encoder,
        Group::Prior,
        Group::Decoder,
        Group::TcDisc,
        Group::SensGen,
        Group::SensDisc,
        Group::Predictor,
        Group::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Prior => "prior",
            Group::Decoder => "decoder",
            Group::TcDisc => "tc_disc",
            Group::SensGen => "sens_gen",
            Group::SensDisc => "sens_disc",
            Group::Predictor => "predictor",
            Group::Head => "head",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Ordered parameter list. Creation order fixes both the initialization
/// stream and the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pid(pub usize);

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, i.e. weight variance `1/fan_in`,
    /// which keeps activation scale roughly constant through deep stacks.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Pid {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        Pid(self.params.len() - 1)
    }

    pub fn get(&self, id: Pid) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: Pid) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<Pid> {
        self.params.iter().position(|p| p.name == name).map(Pid)
    }

    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Bit patterns of every parameter in `group`; used to check freezing.
    pub fn fingerprint(&self, group: Group) -> Vec<u64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Lazily places parameters on a tape, as differentiable leaves for the
/// groups in `trainable` and as constants otherwise.
pub struct Binder<'a> {
    pub params: &'a ParamSet,
    trainable: [bool; 8],
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, trainable: &[Group]) -> Self {
        let mut mask = [false; 8];
        for g in trainable {
            mask[*g as usize] = true;
        }
        Self {
            params,
            trainable: mask,
            vars: vec![None; params.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, id: Pid) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.params.params[id.0];
        let v = if self.trainable[p.group as usize] {
            tape.leaf(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn into_bound(self) -> Bound {
        let leaves = self
            .vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let p = &self.params.params[i];
                self.trainable[p.group as usize].then_some((i, (*v)?, p.value.len()))
            })
            .collect();
        Bound { leaves }
    }

    /// Gradients of the bound trainable parameters, keyed by parameter index.
    pub fn grads(&self, g: &Grads) -> BTreeMap<usize, Vec<f64>> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = &self.params.params[i];
                self.trainable[p.group as usize].then(|| (i, g.get_or_zeros(v, p.value.len())))
            })
            .collect()
    }
}

/// Trainable leaves of a finished [`Binder`], detached from the parameter
/// borrow so parameters can change before the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    leaves: Vec<(usize, Var, usize)>,
}

impl Bound {
    pub fn grads(&self, g: &Grads) -> BTreeMap<usize, Vec<f64>> {
        self.leaves.iter().map(|&(i, v, n)| (i, g.get_or_zeros(v, n))).collect()
    }

    pub fn extend(&mut self, other: Bound) {
        self.leaves.extend(other.leaves);
    }
}

pub fn grad_norm(grads: &BTreeMap<usize, Vec<f64>>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut BTreeMap<usize, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<usize, Vec<f64>>,
    v: BTreeMap<usize, Vec<f64>>,
    steps: BTreeMap<usize, u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<usize, Vec<f64>>) {
        for (&i, g) in grads {
            let value = params.params[i].value.data_mut();
            let m = self.m.entry(i).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(i).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.steps.entry(i).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                value[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}
