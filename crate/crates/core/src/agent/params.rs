//! Named parameter storage shared by every network of one agent.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{
    adam_step, init_bias, init_layer, AdamConfig, AdamState, InitScheme, Parameter, Real, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the agent a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Actor,
    Critic,
    CriticTarget,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Actor => "actor",
            Group::Critic => "critic",
            Group::CriticTarget => "critic_target",
        }
    }
}

/// How a parameter is (re-)initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Weight { scheme: InitScheme, gain: f64 },
    Zeros,
    Ones,
}

impl InitKind {
    pub fn draw<T: Real, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
        match *self {
            InitKind::Weight { scheme, gain } => init_layer(shape, scheme, gain, rng),
            InitKind::Zeros => Ok(init_bias(shape)),
            InitKind::Ones => Ok(Tensor::full(shape, T::one())),
        }
    }
}

pub struct ParamSlot<T> {
    pub param: Parameter<T>,
    pub group: Group,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
    pub init: InitKind,
    pub adam: Option<AdamState<T>>,
    /// Persisted power-iteration vector when the weight is spectrally normalized.
    pub sn_u: Option<Vec<T>>,
}

pub struct ParamStore<T> {
    slots: Vec<ParamSlot<T>>,
    by_name: HashMap<String, ParamId>,
    adam_cfg: AdamConfig,
}

pub(crate) fn random_unit<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| T::lit(x / norm)).collect()
}

impl<T: Real> ParamStore<T> {
    pub fn new(adam_cfg: AdamConfig) -> Self {
        Self {
            slots: Vec::new(),
            by_name: HashMap::new(),
            adam_cfg,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam_cfg
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: Group,
        frozen: bool,
        init: InitKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(LabError::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.slots.len());
        let adam = (!frozen).then(|| AdamState::new(value.len(), self.adam_cfg));
        self.by_name.insert(name.clone(), id);
        self.slots.push(ParamSlot {
            param: Parameter::new(name, value),
            group,
            frozen,
            init,
            adam,
            sn_u: None,
        });
        Ok(id)
    }

    /// Draws a fresh tensor for `init` and registers it.
    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: Group,
        init: InitKind,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = init.draw(shape, rng)?;
        self.add(name, value, group, false, init)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ParamSlot<T> {
        &mut self.slots[id.0]
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.slots[id.0].param
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.slots[id.0].param
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].param.name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Parameters whose names match any of the glob patterns.
    pub fn matching(&self, patterns: &[String]) -> Result<Vec<ParamId>> {
        let pats = patterns
            .iter()
            .map(|p| {
                glob::Pattern::new(p)
                    .map_err(|e| LabError::Config(format!("bad parameter pattern '{p}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .ids()
            .filter(|&id| pats.iter().any(|p| p.matches(self.name(id))))
            .collect())
    }

    pub fn freeze(&mut self, id: ParamId) {
        let s = &mut self.slots[id.0];
        s.frozen = true;
        s.adam = None;
    }

    /// Duplicates `src` under a new name (value, initial snapshot and
    /// power-iteration vector), frozen and without optimizer state.
    pub fn duplicate(&mut self, src: ParamId, name: String, group: Group) -> Result<ParamId> {
        let s = &self.slots[src.0];
        let (value, initial, init, sn_u) = (
            s.param.value.clone(),
            s.param.initial_value().clone(),
            s.init,
            s.sn_u.clone(),
        );
        let id = self.add(name.clone(), value, group, true, init)?;
        let slot = &mut self.slots[id.0];
        slot.param = Parameter::with_initial(name, slot.param.value.clone(), initial);
        slot.sn_u = sn_u;
        Ok(id)
    }

    /// Re-draws a parameter from its initializer and zeroes its optimizer moments.
    pub fn reinit<R: Rng + ?Sized>(&mut self, id: ParamId, rng: &mut R) -> Result<()> {
        let s = &mut self.slots[id.0];
        let fresh = s.init.draw(s.param.value.shape(), rng)?;
        s.param.value = fresh;
        if let Some(a) = &mut s.adam {
            a.zero();
        }
        if let Some(u) = &mut s.sn_u {
            *u = random_unit(u.len(), rng);
        }
        Ok(())
    }

    /// Applies Adam to every parameter in `ids` that holds a gradient.
    pub fn step(&mut self, ids: &[ParamId], weight_decay: f64) -> Result<()> {
        for &id in ids {
            let s = &mut self.slots[id.0];
            if s.frozen {
                s.param.value.clear_grad();
                continue;
            }
            if s.param.value.grad().is_none() {
                continue;
            }
            let adam = s.adam.as_mut().ok_or_else(|| {
                LabError::Contract(format!("trainable '{}' has no optimizer state", s.param.name))
            })?;
            adam_step(&mut s.param, adam, weight_decay)?;
        }
        Ok(())
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.slots[id.0].group == group).collect()
    }
}
