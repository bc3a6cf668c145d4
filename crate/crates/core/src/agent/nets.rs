//! Layer blocks and the encoder / actor / critic networks built from them.
//!
//! Networks hold only [`ParamId`]s; values live in the agent's [`ParamStore`]
//! and are bound into a fresh [`Graph`] by a [`Fwd`] context per forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{LabError, Result};
use crate::numerics::{Activation, Graph, InitScheme, Real, Tensor, Var};

use super::params::{random_unit, Group, InitKind, ParamId, ParamStore};

/// Module tags used by the activation probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleTag {
    Encoder,
    Actor,
    Critic,
}

/// One forward pass: owns the graph and binds store parameters on first use.
pub struct Fwd<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    train: Vec<Group>,
    update_sn: bool,
    record: bool,
    probes: Vec<(ModuleTag, Var)>,
}

impl<'a, T: Real> Fwd<'a, T> {
    /// Parameters of groups in `train` (and not frozen) require gradients.
    pub fn new(store: &'a mut ParamStore<T>, train: &[Group], update_sn: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            train: train.to_vec(),
            update_sn,
            record: false,
            probes: Vec::new(),
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    /// Whether subsequent spectral-normalized layers advance their power iteration.
    pub fn set_update_sn(&mut self, on: bool) {
        self.update_sn = on;
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let slot = self.store.slot(id);
        let rg = !slot.frozen && self.train.contains(&slot.group);
        let v = self.g.leaf(slot.param.value.clone(), rg);
        self.bound.insert(id, v);
        v
    }

    fn spectral_weight(&mut self, id: ParamId) -> Result<Var> {
        let w = self.p(id);
        let slot = self.store.slot_mut(id);
        let iters = usize::from(self.update_sn && !slot.frozen);
        let u = slot
            .sn_u
            .as_mut()
            .ok_or_else(|| LabError::Contract(format!("'{}' has no power-iteration vector", slot.param.name)))?;
        self.g.spectral_norm(w, u, iters)
    }

    fn probe(&mut self, tag: Option<ModuleTag>, v: Var) {
        if let (true, Some(t)) = (self.record, tag) {
            self.probes.push((t, v));
        }
    }

    pub fn store_param(&self, id: ParamId) -> &crate::numerics::Parameter<T> {
        self.store.param(id)
    }

    pub fn probes(&self) -> &[(ModuleTag, Var)] {
        &self.probes
    }

    /// Back-propagates `loss` and moves every trainable gradient into the
    /// store's gradient slots. Returns the parameters that received one.
    pub fn backward_into_store(&mut self, loss: Var) -> Result<Vec<ParamId>> {
        self.g.backward(loss)?;
        let mut ids: Vec<ParamId> = Vec::new();
        let mut bound: Vec<(ParamId, Var)> = self.bound.iter().map(|(&a, &b)| (a, b)).collect();
        bound.sort_by_key(|(id, _)| *id);
        for (id, var) in bound {
            if !self.g.requires_grad(var) {
                continue;
            }
            if let Some(grad) = self.g.take_grad(var) {
                self.store.param_mut(id).value.set_grad(grad)?;
                ids.push(id);
            }
        }
        Ok(ids)
    }
}

type Remap<'m> = dyn FnMut(ParamId) -> Result<ParamId> + 'm;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub spectral: bool,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Weight initialization shared by all layers of one agent.
#[derive(Clone, Copy, Debug)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub linear_gain: f64,
    pub conv_gain: f64,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        spectral: bool,
        init: InitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_init(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            group,
            InitKind::Weight {
                scheme: init.scheme,
                gain: init.linear_gain,
            },
            rng,
        )?;
        let b = store.add_init(format!("{name}.bias"), &[out_dim], group, InitKind::Zeros, rng)?;
        if spectral {
            store.slot_mut(w).sn_u = Some(random_unit(out_dim, rng));
        }
        Ok(Self {
            w,
            b,
            spectral,
            in_dim,
            out_dim,
        })
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = if self.spectral {
            f.spectral_weight(self.w)?
        } else {
            f.p(self.w)
        };
        let b = f.p(self.b);
        f.g.linear(x, w, Some(b))
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    fn remap(&self, m: &mut Remap<'_>) -> Result<Self> {
        Ok(Self {
            w: m(self.w)?,
            b: m(self.b)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.add_init(format!("{name}.ln.gain"), &[dim], group, InitKind::Ones, rng)?,
            bias: store.add_init(format!("{name}.ln.bias"), &[dim], group, InitKind::Zeros, rng)?,
        })
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gain), f.p(self.bias));
        f.g.layer_norm(x, g, b)
    }

    fn remap(&self, m: &mut Remap<'_>) -> Result<Self> {
        Ok(Self {
            gain: m(self.gain)?,
            bias: m(self.bias)?,
        })
    }
}

/// Hidden layer: linear → optional LayerNorm → activation.
#[derive(Clone, Debug)]
pub struct Dense {
    pub lin: Linear,
    pub norm: Option<Norm>,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub out: Linear,
}

/// Shape and regularization options for an [`Mlp`].
#[derive(Clone, Copy, Debug)]
pub struct MlpSpec<'s> {
    pub in_dim: usize,
    pub hidden: &'s [usize],
    pub out_dim: usize,
    pub act: Activation,
    pub layer_norm: bool,
    /// Spectrally normalize the first linear layer.
    pub spectral_first: bool,
}

impl Mlp {
    pub fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        spec: MlpSpec<'_>,
        init: InitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut width = spec.in_dim;
        for (i, &h) in spec.hidden.iter().enumerate() {
            let name = format!("{prefix}.fc{}", i + 1);
            let lin = Linear::build(
                store,
                &name,
                group,
                width,
                h,
                spec.spectral_first && i == 0,
                init,
                rng,
            )?;
            let norm = if spec.layer_norm {
                Some(Norm::build(store, &name, group, h, rng)?)
            } else {
                None
            };
            hidden.push(Dense {
                lin,
                norm,
                act: spec.act,
            });
            width = h * spec.act.width_factor();
        }
        let out = Linear::build(
            store,
            &format!("{prefix}.out"),
            group,
            width,
            spec.out_dim,
            spec.spectral_first && spec.hidden.is_empty(),
            init,
            rng,
        )?;
        Ok(Self { hidden, out })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var, tag: Option<ModuleTag>) -> Result<Var> {
        let mut h = x;
        for d in &self.hidden {
            h = d.lin.forward(f, h)?;
            if let Some(n) = &d.norm {
                h = n.forward(f, h)?;
            }
            h = f.g.activate(h, d.act)?;
            if d.act.is_rectifier() {
                f.probe(tag, h);
            }
        }
        self.out.forward(f, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for d in &self.hidden {
            v.extend(d.lin.params());
            if let Some(n) = &d.norm {
                v.extend([n.gain, n.bias]);
            }
        }
        v.extend(self.out.params());
        v
    }

    fn remap(&self, m: &mut Remap<'_>) -> Result<Self> {
        Ok(Self {
            hidden: self
                .hidden
                .iter()
                .map(|d| {
                    Ok(Dense {
                        lin: d.lin.remap(m)?,
                        norm: d.norm.as_ref().map(|n| n.remap(m)).transpose()?,
                        act: d.act,
                    })
                })
                .collect::<Result<_>>()?,
            out: self.out.remap(m)?,
        })
    }

    pub fn has_rectifier(&self) -> bool {
        self.hidden.iter().any(|d| d.act.is_rectifier())
    }
}

/// Output-preserving residual pair added by plasticity injection.
#[derive(Clone, Debug)]
pub struct Injection {
    /// θ'₁: trainable fresh head.
    pub trainable: Mlp,
    /// θ'₂: frozen copy of θ'₁ at creation.
    pub frozen: Mlp,
}

/// `h_θ(z)`, or `h_θ(z) + h_θ'₁(z) − h_θ'₂(z)` once injected.
#[derive(Clone, Debug)]
pub struct Head {
    pub base: Mlp,
    pub injection: Option<Injection>,
}

impl Head {
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var, tag: Option<ModuleTag>) -> Result<Var> {
        let base = self.base.forward(f, x, tag)?;
        match &self.injection {
            None => Ok(base),
            Some(inj) => {
                let fresh = inj.trainable.forward(f, x, tag)?;
                let anchor = inj.frozen.forward(f, x, None)?;
                let sum = f.g.add(base, fresh)?;
                f.g.sub(sum, anchor)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.base.params();
        if let Some(inj) = &self.injection {
            v.extend(inj.trainable.params());
            v.extend(inj.frozen.params());
        }
        v
    }

    fn remap(&self, m: &mut Remap<'_>) -> Result<Self> {
        Ok(Self {
            base: self.base.remap(m)?,
            injection: self
                .injection
                .as_ref()
                .map(|i| {
                    Ok::<_, LabError>(Injection {
                        trainable: i.trainable.remap(m)?,
                        frozen: i.frozen.remap(m)?,
                    })
                })
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub norm: Option<Norm>,
}

/// Conv trunk (ReLU after every conv) followed by a projection to the
/// feature vector, squashed by tanh.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<ConvBlock>,
    pub proj: Linear,
    pub proj_norm: Option<Norm>,
    pub feature_dim: usize,
}

/// Encoder architecture.
#[derive(Clone, Debug)]
pub struct EncoderSpec {
    pub obs_shape: [usize; 3],
    pub filters: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub feature_dim: usize,
    pub layer_norm: bool,
}

impl EncoderSpec {
    /// `(channels, height, width)` after the conv trunk.
    pub fn trunk_shape(&self) -> Result<(usize, usize, usize)> {
        let [c, mut h, mut w] = self.obs_shape;
        let mut ch = c;
        for &s in &self.strides {
            if self.kernel > h || self.kernel > w || s == 0 {
                return Err(LabError::Config(format!(
                    "conv trunk does not fit a {}x{} frame",
                    self.obs_shape[1], self.obs_shape[2]
                )));
            }
            h = (h - self.kernel) / s + 1;
            w = (w - self.kernel) / s + 1;
            ch = self.filters;
        }
        Ok((ch, h, w))
    }
}

impl Encoder {
    pub fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        spec: &EncoderSpec,
        init: InitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (_, _, _) = spec.trunk_shape()?;
        let [mut ch, mut h, mut w] = spec.obs_shape;
        let mut convs = Vec::new();
        for (i, &stride) in spec.strides.iter().enumerate() {
            let name = format!("encoder.conv{}", i + 1);
            let kernel = store.add_init(
                format!("{name}.weight"),
                &[spec.filters, ch, spec.kernel, spec.kernel],
                Group::Encoder,
                InitKind::Weight {
                    scheme: init.scheme,
                    gain: init.conv_gain,
                },
                rng,
            )?;
            let bias = store.add_init(
                format!("{name}.bias"),
                &[spec.filters],
                Group::Encoder,
                InitKind::Zeros,
                rng,
            )?;
            h = (h - spec.kernel) / stride + 1;
            w = (w - spec.kernel) / stride + 1;
            ch = spec.filters;
            let norm = if spec.layer_norm {
                if ch * h * w < 2 {
                    return Err(LabError::Config(format!("{name}: layer norm over a single unit")));
                }
                Some(Norm::build(store, &name, Group::Encoder, ch * h * w, rng)?)
            } else {
                None
            };
            convs.push(ConvBlock {
                kernel,
                bias,
                stride,
                norm,
            });
        }
        let repr = ch * h * w;
        let proj = Linear::build(
            store,
            "encoder.proj",
            Group::Encoder,
            repr,
            spec.feature_dim,
            false,
            init,
            rng,
        )?;
        let proj_norm = if spec.layer_norm {
            Some(Norm::build(
                store,
                "encoder.proj",
                Group::Encoder,
                spec.feature_dim,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            convs,
            proj,
            proj_norm,
            feature_dim: spec.feature_dim,
        })
    }

    /// `obs` holds pixels in `[0, 1]`; they are centred to `[-0.5, 0.5]`.
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, obs: &Tensor<T>, tag: Option<ModuleTag>) -> Result<Var> {
        let half = T::lit(0.5);
        let mut h = f.g.constant(obs.map(|p| p - half));
        for c in &self.convs {
            let (k, b) = (f.p(c.kernel), f.p(c.bias));
            h = f.g.conv2d(h, k, Some(b), c.stride)?;
            if let Some(n) = &c.norm {
                h = n.forward(f, h)?;
            }
            h = f.g.relu(h);
            f.probe(tag, h);
        }
        h = f.g.flatten(h)?;
        h = self.proj.forward(f, h)?;
        if let Some(n) = &self.proj_norm {
            h = n.forward(f, h)?;
        }
        Ok(f.g.tanh(h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend([c.kernel, c.bias]);
            if let Some(n) = &c.norm {
                v.extend([n.gain, n.bias]);
            }
        }
        v.extend(self.proj.params());
        if let Some(n) = &self.proj_norm {
            v.extend([n.gain, n.bias]);
        }
        v
    }
}

/// Deterministic policy: `tanh(head(z))`.
#[derive(Clone, Debug)]
pub struct Actor {
    pub head: Head,
}

impl Actor {
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, z: Var, tag: Option<ModuleTag>) -> Result<Var> {
        let h = self.head.forward(f, z, tag)?;
        Ok(f.g.tanh(h))
    }
}

/// Twin Q heads over `[z, a]`.
#[derive(Clone, Debug)]
pub struct Critic {
    pub q1: Head,
    pub q2: Head,
}

impl Critic {
    pub fn forward<T: Real>(
        &self,
        f: &mut Fwd<'_, T>,
        z: Var,
        a: Var,
        tag: Option<ModuleTag>,
    ) -> Result<(Var, Var)> {
        let x = f.g.concat(z, a)?;
        Ok((self.q1.forward(f, x, tag)?, self.q2.forward(f, x, tag)?))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.q1.params();
        v.extend(self.q2.params());
        v
    }

    pub(crate) fn remap(&self, m: &mut Remap<'_>) -> Result<Self> {
        Ok(Self {
            q1: self.q1.remap(m)?,
            q2: self.q2.remap(m)?,
        })
    }
}

/// Registers frozen duplicates of every parameter of `net` under names with
/// `from` replaced by `to`, returning `(duplicate, source)` pairs.
pub(crate) fn duplicate_critic<T: Real>(
    store: &mut ParamStore<T>,
    net: &Critic,
    from: &str,
    to: &str,
    group: Group,
) -> Result<(Critic, Vec<(ParamId, ParamId)>)> {
    let mut pairs = Vec::new();
    let copy = net.remap(&mut |id| {
        let name = store.name(id).replacen(from, to, 1);
        let dup = store.duplicate(id, name, group)?;
        pairs.push((dup, id));
        Ok(dup)
    })?;
    Ok((copy, pairs))
}

/// Frozen copy of an [`Mlp`] with renamed parameters.
pub(crate) fn duplicate_mlp<T: Real>(
    store: &mut ParamStore<T>,
    net: &Mlp,
    from: &str,
    to: &str,
    group: Group,
) -> Result<(Mlp, Vec<(ParamId, ParamId)>)> {
    let mut pairs = Vec::new();
    let copy = net.remap(&mut |id| {
        let name = store.name(id).replacen(from, to, 1);
        let dup = store.duplicate(id, name, group)?;
        pairs.push((dup, id));
        Ok(dup)
    })?;
    Ok((copy, pairs))
}
