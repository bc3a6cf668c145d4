//! Fraction-of-active-units probes, weight-norm logging and the plasticity
//! interventions: Reset, plasticity injection, Shrink & Perturb and L2-Init.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::nets::duplicate_mlp;
use crate::agent::{l2_init_penalty_var, Agent, AgentConfig, Fwd, Group, Injection, Mlp, ModuleTag, ParamId, ParamStore};
use crate::error::{LabError, Result};
use crate::numerics::{Real, Tensor};

/// Plasticity snapshot taken at a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct FAUReport {
    pub step: u64,
    pub phi_encoder: f64,
    pub phi_actor: f64,
    pub phi_critic: f64,
    pub weight_norms: BTreeMap<String, f64>,
}

fn ratio((active, total): (u64, u64), what: &str) -> Result<f64> {
    if total == 0 {
        return Err(LabError::Config(format!("{what} has no rectified units to measure")));
    }
    Ok(active as f64 / total as f64)
}

fn tag_name(tag: ModuleTag) -> &'static str {
    match tag {
        ModuleTag::Encoder => "encoder",
        ModuleTag::Actor => "actor",
        ModuleTag::Critic => "critic",
    }
}

/// Fraction of post-rectifier units of `module` that are strictly positive,
/// averaged over units and over the evaluation batch. The critic sees the
/// batch's stored actions. Nothing in the agent is modified.
pub fn measure_fau<T: Real>(
    module: ModuleTag,
    agent: &mut Agent<T>,
    obs: &Tensor<T>,
    action: &Tensor<T>,
) -> Result<f64> {
    let counts = agent.probe_activity(obs, action)?;
    ratio(counts.get(module), tag_name(module))
}

/// FAU of all three modules from one forward pass, plus weight norms.
pub fn fau_report<T: Real>(
    agent: &mut Agent<T>,
    step: u64,
    obs: &Tensor<T>,
    action: &Tensor<T>,
) -> Result<FAUReport> {
    let counts = agent.probe_activity(obs, action)?;
    Ok(FAUReport {
        step,
        phi_encoder: ratio(counts.encoder, "encoder")?,
        phi_actor: ratio(counts.actor, "actor")?,
        phi_critic: ratio(counts.critic, "critic")?,
        weight_norms: snapshot_weight_norms(agent),
    })
}

/// FAU of a standalone MLP on inputs `x` of shape `[B, in]`.
pub fn measure_mlp_fau<T: Real>(store: &mut ParamStore<T>, mlp: &Mlp, x: &Tensor<T>) -> Result<f64> {
    if !mlp.has_rectifier() {
        return Err(LabError::Config("network has no rectified units to measure".into()));
    }
    let mut f = Fwd::new(store, &[], false).recording();
    let input = f.g.constant(x.clone());
    mlp.forward(&mut f, input, Some(ModuleTag::Critic))?;
    let mut counts = (0u64, 0u64);
    for &(_, v) in f.probes() {
        let data = f.g.value(v).data();
        counts.0 += data.iter().filter(|&&a| a > T::zero()).count() as u64;
        counts.1 += data.len() as u64;
    }
    ratio(counts, "network")
}

/// L2 norm of every parameter, keyed by name.
pub fn parameter_norms<T: Real>(agent: &Agent<T>) -> BTreeMap<String, f64> {
    agent
        .store
        .ids()
        .map(|id| {
            let p = agent.store.param(id);
            (p.name.clone(), p.value.sq_norm().as_f64().sqrt())
        })
        .collect()
}

/// Aggregate L2 norm per module group: `√Σ‖w‖²` over the group's parameters.
pub fn snapshot_weight_norms<T: Real>(agent: &Agent<T>) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for id in agent.store.ids() {
        let slot = agent.store.slot(id);
        *sq.entry(slot.group.as_str().to_string()).or_default() += slot.param.value.sq_norm().as_f64();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Periodic head re-initialization schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetConfig {
    /// Number of evenly spaced resets; the interval is `total_steps / count`.
    pub count: Option<u64>,
    /// Explicit interval in environment steps; overrides `count`.
    pub interval: Option<u64>,
    pub targets: Vec<String>,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self {
            count: Some(10),
            interval: None,
            targets: vec!["actor.*".into(), "critic.*".into()],
        }
    }
}

/// Interval shared by the periodic interventions.
fn periodic_interval(count: Option<u64>, interval: Option<u64>, total_steps: u64) -> Result<u64> {
    let iv = match (interval, count) {
        (Some(i), _) => i,
        (None, Some(c)) if c > 0 => total_steps / c,
        _ => return Err(LabError::Config("periodic intervention needs count or interval".into())),
    };
    if iv == 0 {
        return Err(LabError::Config("periodic intervention interval is zero".into()));
    }
    Ok(iv)
}

/// Multiples of `interval` strictly inside `(0, total_steps)`.
pub fn periodic_steps(interval: u64, total_steps: u64) -> Vec<u64> {
    (1..).map(|k| k * interval).take_while(|&s| s < total_steps).collect()
}

impl ResetConfig {
    pub fn interval(&self, total_steps: u64) -> Result<u64> {
        periodic_interval(self.count, self.interval, total_steps)
    }

    pub fn schedule(&self, total_steps: u64) -> Result<Vec<u64>> {
        Ok(periodic_steps(self.interval(total_steps)?, total_steps))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectModule {
    Actor,
    Critic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub module: InjectModule,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShrinkPerturbConfig {
    /// Defaults to the Reset interval when both are unset.
    pub interval: Option<u64>,
    pub count: Option<u64>,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for ShrinkPerturbConfig {
    fn default() -> Self {
        Self {
            interval: None,
            count: Some(10),
            alpha: 0.8,
            targets: vec!["critic.*".into()],
        }
    }
}

impl ShrinkPerturbConfig {
    pub fn schedule(&self, total_steps: u64) -> Result<Vec<u64>> {
        let iv = periodic_interval(self.count, self.interval, total_steps)?;
        Ok(periodic_steps(iv, total_steps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2InitConfig {
    pub coef: f64,
    pub targets: Vec<String>,
    /// Also anchor the encoder, which is trained by the critic loss.
    pub include_encoder: bool,
}

impl Default for L2InitConfig {
    fn default() -> Self {
        Self {
            coef: 1e-2,
            targets: vec!["critic.*".into()],
            include_encoder: false,
        }
    }
}

impl L2InitConfig {
    pub fn patterns(&self) -> Vec<String> {
        let mut p = self.targets.clone();
        if self.include_encoder {
            p.push("encoder.*".into());
        }
        p
    }
}

/// Which plasticity interventions are active in a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub reset: Option<ResetConfig>,
    pub injection: Option<InjectionConfig>,
    pub shrink_perturb: Option<ShrinkPerturbConfig>,
    pub l2_init: Option<L2InitConfig>,
    pub weight_decay: f64,
    pub layer_norm: bool,
    pub spectral_norm: bool,
    pub crelu_critic: bool,
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("interventions: {m}")));
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(l2) = &self.l2_init {
            if !(l2.coef >= 0.0) {
                return bad("l2_init.coef must be non-negative");
            }
        }
        if let Some(sp) = &self.shrink_perturb {
            if !(sp.alpha > 0.0 && sp.alpha <= 1.0) {
                return bad("shrink_perturb.alpha must be in (0, 1]");
            }
        }
        if let Some(r) = &self.reset {
            if r.targets.is_empty() {
                return bad("reset.targets is empty");
            }
        }
        Ok(())
    }

    /// Turns on the architectural switches in an agent configuration. A
    /// switch already on in the agent section stays on.
    pub fn apply_architecture(&self, cfg: &mut AgentConfig) {
        cfg.layer_norm |= self.layer_norm;
        cfg.spectral_norm |= self.spectral_norm;
        cfg.crelu_critic |= self.crelu_critic;
    }

    /// Installs weight decay and L2-Init on a freshly built agent.
    pub fn apply_regularization<T: Real>(&self, agent: &mut Agent<T>) -> Result<()> {
        agent.reg.weight_decay = self.weight_decay;
        if let Some(l2) = &self.l2_init {
            let ids = agent.store.matching(&l2.patterns())?;
            if ids.is_empty() {
                return Err(LabError::Config("l2_init.targets match no parameters".into()));
            }
            agent.reg.l2_init_coef = l2.coef;
            agent.reg.l2_init_params = ids;
        }
        Ok(())
    }
}

/// Re-draws every parameter matching `targets`, zeroes its Adam moments and
/// copies the fresh values into the corresponding target-critic parameters.
/// The encoder is left untouched unless a pattern names it explicitly.
pub fn reset_heads<T: Real, R: Rng + ?Sized>(
    agent: &mut Agent<T>,
    targets: &[String],
    rng: &mut R,
) -> Result<Vec<ParamId>> {
    let ids = agent.store.matching(targets)?;
    if ids.is_empty() {
        return Err(LabError::Config(format!("reset targets {targets:?} match no parameters")));
    }
    for &id in &ids {
        agent.store.reinit(id, rng)?;
    }
    let pairs: Vec<_> = agent.target_pairs().to_vec();
    for (t, o) in pairs {
        if ids.contains(&o) {
            let value = agent.store.param(o).value.clone();
            let u = agent.store.slot(o).sn_u.clone();
            let slot = agent.store.slot_mut(t);
            slot.param.value = value;
            slot.sn_u = u;
        }
    }
    Ok(ids)
}

/// Output-preserving injection: freezes the module's head θ and adds a
/// trainable fresh head θ'₁ together with a frozen copy θ'₂ of the same
/// initialization, so the head computes `h_θ + h_θ'₁ − h_θ'₂`.
pub fn inject_plasticity<T: Real, R: Rng + ?Sized>(
    agent: &mut Agent<T>,
    module: InjectModule,
    rng: &mut R,
) -> Result<()> {
    let hidden = agent.hidden();
    let init = agent.init;
    match module {
        InjectModule::Actor => {
            if agent.actor.head.injection.is_some() {
                return Err(LabError::Config("actor already injected".into()));
            }
            let spec = agent.actor_spec(&hidden);
            let fresh = Mlp::build(&mut agent.store, "actor.inject", Group::Actor, spec, init, rng)?;
            let (frozen, _) = duplicate_mlp(&mut agent.store, &fresh, "actor.inject", "actor.inject_frozen", Group::Actor)?;
            for id in agent.actor.head.base.params() {
                agent.store.freeze(id);
            }
            agent.actor.head.injection = Some(Injection {
                trainable: fresh,
                frozen,
            });
        }
        InjectModule::Critic => {
            if agent.critic.q1.injection.is_some() {
                return Err(LabError::Config("critic already injected".into()));
            }
            let spec = agent.critic_spec(&hidden);
            for q in ["q1", "q2"] {
                let prefix = format!("critic.{q}.inject");
                let fresh = Mlp::build(&mut agent.store, &prefix, Group::Critic, spec, init, rng)?;
                let (frozen, _) =
                    duplicate_mlp(&mut agent.store, &fresh, &prefix, &format!("{prefix}_frozen"), Group::Critic)?;
                let (target_fresh, pairs) =
                    duplicate_mlp(&mut agent.store, &fresh, "critic.", "critic_target.", Group::CriticTarget)?;
                agent.target_pairs.extend(pairs);
                let (head, target_head) = if q == "q1" {
                    (&mut agent.critic.q1, &mut agent.critic_target.q1)
                } else {
                    (&mut agent.critic.q2, &mut agent.critic_target.q2)
                };
                for id in head.base.params() {
                    agent.store.freeze(id);
                }
                head.injection = Some(Injection {
                    trainable: fresh,
                    frozen: frozen.clone(),
                });
                target_head.injection = Some(Injection {
                    trainable: target_fresh,
                    frozen,
                });
            }
        }
    }
    Ok(())
}

/// `w ← α·w + w_fresh` for every parameter matching `targets`, with
/// `w_fresh` drawn from the parameter's own initializer.
pub fn shrink_and_perturb<T: Real, R: Rng + ?Sized>(
    agent: &mut Agent<T>,
    targets: &[String],
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ParamId>> {
    shrink_and_perturb_with(agent, targets, alpha, |store, id| {
        let slot = store.slot(id);
        slot.init.draw(slot.param.value.shape(), rng)
    })
}

/// [`shrink_and_perturb`] with a caller-supplied fresh draw per parameter.
pub fn shrink_and_perturb_with<T: Real, F>(
    agent: &mut Agent<T>,
    targets: &[String],
    alpha: f64,
    mut fresh: F,
) -> Result<Vec<ParamId>>
where
    F: FnMut(&ParamStore<T>, ParamId) -> Result<Tensor<T>>,
{
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(LabError::Config(format!("shrink alpha {alpha} outside (0, 1]")));
    }
    let ids = agent.store.matching(targets)?;
    if ids.is_empty() {
        return Err(LabError::Config(format!("shrink targets {targets:?} match no parameters")));
    }
    let a = T::lit(alpha);
    for &id in &ids {
        let noise = fresh(&agent.store, id)?;
        let p = agent.store.param_mut(id);
        if noise.shape() != p.value.shape() {
            return Err(LabError::Shape(format!("fresh draw for '{}' has wrong shape", p.name)));
        }
        for (w, &n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *w = a * *w + n;
        }
    }
    Ok(ids)
}

/// `coef · Σ‖θ − θ₀‖²` over `ids` and its gradient with respect to each
/// parameter, evaluated through the same graph used by the critic update.
pub fn l2_init_penalty<T: Real>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    coef: f64,
) -> Result<(T, Vec<Vec<T>>)> {
    let groups: Vec<Group> = ids.iter().map(|&id| store.slot(id).group).collect();
    let mut f = Fwd::new(store, &groups, false);
    let vars: Vec<_> = ids.iter().map(|&id| f.p(id)).collect();
    let pen = l2_init_penalty_var(&mut f, ids, coef)?;
    let value = f.g.value(pen).data()[0];
    f.g.backward(pen)?;
    let grads = vars
        .iter()
        .zip(ids)
        .map(|(&v, &id)| {
            f.g.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); f.store_param(id).len()])
        })
        .collect();
    Ok((value, grads))
}
