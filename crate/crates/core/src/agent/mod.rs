//! Deterministic actor–critic over pixels with a shared conv encoder, twin
//! critics, target critics and n-step TD targets.

pub mod checkpoint;
pub mod nets;
pub mod params;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::random_shift;
use crate::error::{LabError, Result};
use crate::numerics::{polyak_update, Activation, AdamConfig, InitScheme, Real, Tensor};
use crate::replay::{Batch, ReplayBuffer};

pub use nets::{Actor, Critic, Encoder, EncoderSpec, Fwd, Head, InitSpec, Injection, Mlp, MlpSpec, ModuleTag};
pub use params::{Group, InitKind, ParamId, ParamSlot, ParamStore};

/// Hyperparameters of the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub tau: f64,
    pub stddev_start: f64,
    pub stddev_end: f64,
    pub stddev_horizon: u64,
    pub noise_clip: f64,
    pub init: InitScheme,
    pub layer_norm: bool,
    pub spectral_norm: bool,
    pub crelu_critic: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            feature_dim: 50,
            hidden_dim: 64,
            hidden_layers: 2,
            filters: 8,
            kernel: 3,
            strides: vec![2, 2, 1],
            batch_size: 32,
            lr: 1e-4,
            gamma: 0.99,
            n_step: 3,
            tau: 0.01,
            stddev_start: 1.0,
            stddev_end: 0.1,
            stddev_horizon: 50_000,
            noise_clip: 0.3,
            init: InitScheme::Orthogonal,
            layer_norm: false,
            spectral_norm: false,
            crelu_critic: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("agent: {m}")));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.filters == 0 || self.kernel == 0 {
            return bad("layer sizes must be positive");
        }
        if self.strides.is_empty() {
            return bad("at least one conv layer is required");
        }
        if self.batch_size == 0 || self.n_step == 0 {
            return bad("batch_size and n_step must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("lr must be positive and gamma in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.stddev_start < 0.0 || self.stddev_end < 0.0 || self.noise_clip < 0.0 {
            return bad("noise parameters must be non-negative");
        }
        Ok(())
    }

    fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_dim; self.hidden_layers]
    }
}

/// Regularizers applied inside the update step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Regularization {
    /// Decoupled weight decay on every trainable parameter.
    pub weight_decay: f64,
    /// Coefficient of the `Σ‖θ − θ₀‖²` term added to the critic loss.
    pub l2_init_coef: f64,
    /// Parameters covered by the L2-Init term.
    pub l2_init_params: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Losses of one full agent update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Post-rectifier activation counts per module from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivityCounts {
    pub encoder: (u64, u64),
    pub actor: (u64, u64),
    pub critic: (u64, u64),
}

impl ActivityCounts {
    /// `(active, total)` for a module.
    pub fn get(&self, tag: ModuleTag) -> (u64, u64) {
        match tag {
            ModuleTag::Encoder => self.encoder,
            ModuleTag::Actor => self.actor,
            ModuleTag::Critic => self.critic,
        }
    }

    fn slot(&mut self, tag: ModuleTag) -> &mut (u64, u64) {
        match tag {
            ModuleTag::Encoder => &mut self.encoder,
            ModuleTag::Actor => &mut self.actor,
            ModuleTag::Critic => &mut self.critic,
        }
    }
}

pub struct Agent<T: Real> {
    pub cfg: AgentConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub actor: Actor,
    pub critic: Critic,
    pub critic_target: Critic,
    pub reg: Regularization,
    pub(crate) target_pairs: Vec<(ParamId, ParamId)>,
    pub(crate) obs_shape: [usize; 3],
    pub(crate) action_dim: usize,
    pub(crate) init: InitSpec,
    updates: u64,
}

impl<T: Real> Agent<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: AgentConfig,
        obs_shape: [usize; 3],
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if action_dim == 0 {
            return Err(LabError::Config("action_dim must be positive".into()));
        }
        let mut store = ParamStore::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let init = InitSpec {
            scheme: cfg.init,
            linear_gain: 1.0,
            conv_gain: std::f64::consts::SQRT_2,
        };
        let enc_spec = EncoderSpec {
            obs_shape,
            filters: cfg.filters,
            kernel: cfg.kernel,
            strides: cfg.strides.clone(),
            feature_dim: cfg.feature_dim,
            layer_norm: cfg.layer_norm,
        };
        let encoder = Encoder::build(&mut store, &enc_spec, init, rng)?;
        let hidden = cfg.hidden();
        let actor = Actor {
            head: Head {
                base: Mlp::build(
                    &mut store,
                    "actor",
                    Group::Actor,
                    actor_spec(&cfg, &hidden, action_dim),
                    init,
                    rng,
                )?,
                injection: None,
            },
        };
        let mut q = |name: &str, store: &mut ParamStore<T>| -> Result<Head> {
            Ok(Head {
                base: Mlp::build(
                    store,
                    name,
                    Group::Critic,
                    critic_spec(&cfg, &hidden, action_dim),
                    init,
                    rng,
                )?,
                injection: None,
            })
        };
        let critic = Critic {
            q1: q("critic.q1", &mut store)?,
            q2: q("critic.q2", &mut store)?,
        };
        let (critic_target, target_pairs) =
            nets::duplicate_critic(&mut store, &critic, "critic.", "critic_target.", Group::CriticTarget)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            actor,
            critic,
            critic_target,
            reg: Regularization::default(),
            target_pairs,
            obs_shape,
            action_dim,
            init,
            updates: 0,
        })
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.obs_shape
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Number of full updates performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub(crate) fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    /// `(target, online)` parameter pairs tracked by Polyak averaging.
    pub fn target_pairs(&self) -> &[(ParamId, ParamId)] {
        &self.target_pairs
    }

    /// Exploration stddev: linear from `stddev_start` to `stddev_end` over
    /// `stddev_horizon` steps, constant afterwards.
    pub fn stddev(&self, step: u64) -> f64 {
        let c = &self.cfg;
        if c.stddev_horizon == 0 {
            return c.stddev_end;
        }
        let mix = (step as f64 / c.stddev_horizon as f64).clamp(0.0, 1.0);
        (1.0 - mix) * c.stddev_start + mix * c.stddev_end
    }

    fn check_obs(&self, obs: &Tensor<T>) -> Result<usize> {
        let s = obs.shape();
        if s.len() != 4 || s[1..] != self.obs_shape {
            return Err(LabError::Shape(format!(
                "expected observations [B, {}, {}, {}], got {s:?}",
                self.obs_shape[0], self.obs_shape[1], self.obs_shape[2]
            )));
        }
        Ok(s[0])
    }

    /// Noiseless policy output for a batch, without touching any state.
    pub fn policy(&mut self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_obs(obs)?;
        let mut f = Fwd::new(&mut self.store, &[], false);
        let z = self.encoder.forward(&mut f, obs, None)?;
        let a = self.actor.forward(&mut f, z, None)?;
        Ok(f.g.value(a).clone())
    }

    /// Action for a single `[C, H, W]` observation.
    pub fn act<R: Rng + ?Sized>(
        &mut self,
        obs: &Tensor<T>,
        mode: ActMode,
        step: u64,
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let batch = obs.clone().reshape(&shape)?;
        let mu = self.policy(&batch)?;
        let std = self.stddev(step);
        let clip = self.cfg.noise_clip;
        let action: Vec<f32> = mu
            .data()
            .iter()
            .map(|&m| {
                let mut a = m.as_f64();
                if mode == ActMode::Explore {
                    let eps: f64 = StandardNormal.sample(rng);
                    a += (eps * std).clamp(-clip, clip);
                }
                a.clamp(-1.0, 1.0) as f32
            })
            .collect();
        debug_assert!(action.iter().all(|a| (-1.0..=1.0).contains(a)));
        Ok(action)
    }

    /// `y = r⁽ⁿ⁾ + γⁿ·min(Q'₁, Q'₂)(z', clip(π(z') + ε))`, computed without
    /// gradient tracking. `z'` encodes `next_obs_n` with the online encoder.
    pub fn td_target<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch<T>,
        step: u64,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let b = self.check_obs(&batch.next_obs_n)?;
        let std = self.stddev(step);
        let clip = self.cfg.noise_clip;
        let mut f = Fwd::new(&mut self.store, &[], false);
        let z = self.encoder.forward(&mut f, &batch.next_obs_n, None)?;
        let mu = self.actor.forward(&mut f, z, None)?;
        let mu_t = f.g.value(mu);
        let noisy: Vec<T> = mu_t
            .data()
            .iter()
            .map(|m| {
                let eps: f64 = StandardNormal.sample(rng);
                T::lit((m.as_f64() + (eps * std).clamp(-clip, clip)).clamp(-1.0, 1.0))
            })
            .collect();
        let noisy = Tensor::new(mu_t.shape().to_vec(), noisy)?;
        let a = f.g.constant(noisy);
        let (q1, q2) = self.critic_target.forward(&mut f, z, a, None)?;
        let (q1, q2) = (f.g.value(q1).data(), f.g.value(q2).data());
        let r = batch.n_step_reward.data();
        let d = batch.discount_n.data();
        if r.len() != b || d.len() != b || q1.len() != b {
            return Err(LabError::Shape("batch columns disagree in length".into()));
        }
        Ok((0..b).map(|i| r[i] + d[i] * q1[i].min(q2[i])).collect())
    }

    /// Critic loss `MSE(Q₁, y) + MSE(Q₂, y)` (plus L2-Init when enabled).
    /// Leaves gradients in the store for the encoder and critic parameters
    /// and returns the loss, the features of `obs` and the parameters that
    /// received a gradient. `update_sn` advances the power iteration.
    pub fn critic_grads(
        &mut self,
        batch: &Batch<T>,
        target: &[T],
        update_sn: bool,
    ) -> Result<(f64, Tensor<T>, Vec<ParamId>)> {
        self.check_obs(&batch.obs)?;
        let l2 = std::mem::take(&mut self.reg.l2_init_params);
        let coef = self.reg.l2_init_coef;
        let out = (|| {
            let mut f = Fwd::new(&mut self.store, &[Group::Encoder, Group::Critic], update_sn);
            let z = self.encoder.forward(&mut f, &batch.obs, None)?;
            let features = f.g.value(z).clone();
            let a = f.g.constant(batch.action.clone());
            let (q1, q2) = self.critic.forward(&mut f, z, a, None)?;
            let l1 = f.g.mse(q1, target)?;
            let l2q = f.g.mse(q2, target)?;
            let mut loss = f.g.add(l1, l2q)?;
            if coef != 0.0 && !l2.is_empty() {
                let pen = l2_init_penalty_var(&mut f, &l2, coef)?;
                loss = f.g.add(loss, pen)?;
            }
            let value = f.g.value(loss).data()[0].as_f64();
            let ids = if value.is_finite() {
                f.backward_into_store(loss)?
            } else {
                Vec::new()
            };
            Ok((value, features, ids))
        })();
        self.reg.l2_init_params = l2;
        out
    }

    /// One critic step training the encoder and both critics, followed by
    /// Polyak averaging of the targets. Returns the loss and the pre-update
    /// features of `obs`.
    pub fn update_critic(&mut self, batch: &Batch<T>, target: &[T], step: u64) -> Result<(f64, Tensor<T>)> {
        let (loss, features, ids) = self.critic_grads(batch, target, true)?;
        if !loss.is_finite() {
            return Err(LabError::NonFinite {
                what: "critic loss".into(),
                step,
            });
        }
        self.store.step(&ids, self.reg.weight_decay)?;
        self.update_targets()?;
        Ok((loss, features))
    }

    /// Soft-updates every target parameter toward its online counterpart and
    /// mirrors the power-iteration vectors.
    pub fn update_targets(&mut self) -> Result<()> {
        let tau = self.cfg.tau;
        for &(t, o) in &self.target_pairs {
            let online = self.store.param(o).clone();
            polyak_update(self.store.param_mut(t), &online, tau)?;
            if let Some(u) = self.store.slot(o).sn_u.clone() {
                self.store.slot_mut(t).sn_u = Some(u);
            }
        }
        Ok(())
    }

    /// Actor loss `−mean(min(Q₁, Q₂)(z, π(z)))` with `z` detached; leaves
    /// gradients on the actor parameters only.
    pub fn actor_grads(&mut self, features: &Tensor<T>, update_sn: bool) -> Result<(f64, Vec<ParamId>)> {
        let mut f = Fwd::new(&mut self.store, &[Group::Actor], update_sn);
        let z = f.g.constant(features.clone());
        let a = self.actor.forward(&mut f, z, None)?;
        f.set_update_sn(false);
        let (q1, q2) = self.critic.forward(&mut f, z, a, None)?;
        let q = f.g.minimum(q1, q2)?;
        let m = f.g.mean(q);
        let loss = f.g.scale(m, -T::one());
        let value = f.g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        Ok((value, f.backward_into_store(loss)?))
    }

    pub fn update_actor(&mut self, features: &Tensor<T>, step: u64) -> Result<f64> {
        let (loss, ids) = self.actor_grads(features, true)?;
        if !loss.is_finite() {
            return Err(LabError::NonFinite {
                what: "actor loss".into(),
                step,
            });
        }
        self.store.step(&ids, self.reg.weight_decay)?;
        Ok(loss)
    }

    /// One full update: sample, optionally augment, TD target, critic step,
    /// actor step.
    pub fn update<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        step: u64,
        augment_pad: Option<usize>,
        sample_rng: &mut R1,
        augment_rng: &mut R2,
    ) -> Result<UpdateStats> {
        let mut batch: Batch<T> =
            buffer.sample_nstep(self.cfg.batch_size, self.cfg.n_step, self.cfg.gamma, sample_rng)?;
        if let Some(pad) = augment_pad {
            batch.obs = random_shift(&batch.obs, pad, augment_rng)?;
            batch.next_obs_n = random_shift(&batch.next_obs_n, pad, augment_rng)?;
        }
        let y = self.td_target(&batch, step, sample_rng)?;
        let (critic_loss, features) = self.update_critic(&batch, &y, step)?;
        let actor_loss = self.update_actor(&features, step)?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
        })
    }

    /// Side-effect-free forward pass counting positive post-rectifier units.
    /// The critic is evaluated on the batch's stored actions.
    pub fn probe_activity(&mut self, obs: &Tensor<T>, action: &Tensor<T>) -> Result<ActivityCounts> {
        self.check_obs(obs)?;
        let mut f = Fwd::new(&mut self.store, &[], false).recording();
        let z = self.encoder.forward(&mut f, obs, Some(ModuleTag::Encoder))?;
        self.actor.forward(&mut f, z, Some(ModuleTag::Actor))?;
        let a = f.g.constant(action.clone());
        self.critic.forward(&mut f, z, a, Some(ModuleTag::Critic))?;
        let mut counts = ActivityCounts::default();
        for &(tag, v) in f.probes() {
            let data = f.g.value(v).data();
            let active = data.iter().filter(|&&x| x > T::zero()).count() as u64;
            let slot = counts.slot(tag);
            slot.0 += active;
            slot.1 += data.len() as u64;
        }
        Ok(counts)
    }

    pub(crate) fn actor_spec<'s>(&self, hidden: &'s [usize]) -> MlpSpec<'s> {
        actor_spec(&self.cfg, hidden, self.action_dim)
    }

    pub(crate) fn critic_spec<'s>(&self, hidden: &'s [usize]) -> MlpSpec<'s> {
        critic_spec(&self.cfg, hidden, self.action_dim)
    }

    pub(crate) fn hidden(&self) -> Vec<usize> {
        self.cfg.hidden()
    }
}

/// `coef · Σ‖θ − θ₀‖²` over `ids` as a graph node.
pub(crate) fn l2_init_penalty_var<T: Real>(
    f: &mut Fwd<'_, T>,
    ids: &[ParamId],
    coef: f64,
) -> Result<crate::numerics::Var> {
    let mut total = None;
    for &id in ids {
        let anchor = f.store_param(id).initial_value().data().to_vec();
        let v = f.p(id);
        let d = f.g.sq_dist(v, &anchor)?;
        total = Some(match total {
            None => d,
            Some(t) => f.g.add(t, d)?,
        });
    }
    let t = total.ok_or_else(|| LabError::Config("L2-Init over an empty parameter set".into()))?;
    Ok(f.g.scale(t, T::lit(coef)))
}

fn actor_spec<'s>(cfg: &AgentConfig, hidden: &'s [usize], action_dim: usize) -> MlpSpec<'s> {
    MlpSpec {
        in_dim: cfg.feature_dim,
        hidden,
        out_dim: action_dim,
        act: Activation::Relu,
        layer_norm: cfg.layer_norm,
        spectral_first: cfg.spectral_norm,
    }
}

fn critic_spec<'s>(cfg: &AgentConfig, hidden: &'s [usize], action_dim: usize) -> MlpSpec<'s> {
    MlpSpec {
        in_dim: cfg.feature_dim + action_dim,
        hidden,
        out_dim: 1,
        act: if cfg.crelu_critic {
            Activation::Crelu
        } else {
            Activation::Relu
        },
        layer_norm: cfg.layer_norm,
        spectral_first: cfg.spectral_norm,
    }
}
