//! Checks shared by the plasticity tests and the acceptance runner. Each
//! panics on the first violated expectation.

use super::{random_batch, rng, tiny_agent, tiny_config};
use plasticity_lab::agent::{Agent, AgentConfig, Fwd, Group, InitKind, InitSpec, Mlp, MlpSpec, ModuleTag, ParamId, ParamStore};
use plasticity_lab::envlab::Observation;
use plasticity_lab::numerics::{Activation, AdamConfig, InitScheme, Real, Tensor};
use plasticity_lab::plasticity::{
    inject_plasticity, l2_init_penalty, measure_fau, measure_mlp_fau, reset_heads, shrink_and_perturb_with,
    InjectModule,
};
use plasticity_lab::replay::{ReplayBuffer, Transition};
use plasticity_lab::LabError;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const OBS: [usize; 3] = [2, 9, 9];

pub fn snapshot<T: Real>(agent: &Agent<T>, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|&id| agent.store.param(id).value.data().iter().map(|x| x.as_f64().to_bits()).collect())
        .collect()
}

pub fn names_matching<T: Real>(agent: &Agent<T>, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
    agent.store.ids().filter(|&id| pred(agent.store.name(id))).collect()
}

pub fn filled_buffer(r: &mut impl Rng, n: usize) -> ReplayBuffer {
    let px = OBS.iter().product::<usize>();
    let mut buf = ReplayBuffer::new(64).unwrap();
    for k in 0..n {
        buf.push(Transition {
            obs: Observation::new(OBS, (0..px).map(|_| r.random()).collect()).unwrap(),
            action: vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            reward: r.random(),
            discount: 1.0,
            last: k % 8 == 7,
            next_obs: Observation::new(OBS, (0..px).map(|_| r.random()).collect()).unwrap(),
        })
        .unwrap();
    }
    buf
}

pub fn head_outputs(agent: &mut Agent<f32>, obs: &Tensor<f32>, action: &Tensor<f32>) -> Vec<f32> {
    let mut f = Fwd::new(&mut agent.store, &[], false);
    let z = agent.encoder.forward(&mut f, obs, None).unwrap();
    let pi = agent.actor.forward(&mut f, z, None).unwrap();
    let a = f.g.constant(action.clone());
    let (q1, q2) = agent.critic.forward(&mut f, z, a, None).unwrap();
    let (t1, t2) = agent.critic_target.forward(&mut f, z, a, None).unwrap();
    [pi, q1, q2, t1, t2].iter().flat_map(|&v| f.g.value(v).data().to_vec()).collect()
}

pub fn f32_batch(r: &mut impl Rng, b: usize) -> (Tensor<f32>, Tensor<f32>) {
    let px = OBS.iter().product::<usize>();
    let obs = Tensor::new(vec![b, OBS[0], OBS[1], OBS[2]], (0..b * px).map(|_| r.random()).collect()).unwrap();
    let act = Tensor::new(vec![b, 2], (0..b * 2).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    (obs, act)
}

pub fn crelu_critic_fau_is_exactly_half() {
    for layer_norm in [false, true] {
        let cfg = AgentConfig {
            crelu_critic: true,
            layer_norm,
            ..tiny_config()
        };
        let mut agent = tiny_agent(cfg, OBS, 2, 2);
        let mut r = rng(3);
        for _ in 0..50 {
            let b = random_batch(OBS, 2, 16, &mut r);
            assert_eq!(measure_fau(ModuleTag::Critic, &mut agent, &b.obs, &b.action).unwrap(), 0.5);
        }
    }
}

/// Returns the lowest and highest FAU seen.
pub fn fresh_orthogonal_relu_network_is_half_active() -> (f64, f64) {
    let init = InitSpec {
        scheme: InitScheme::Orthogonal,
        linear_gain: 1.0,
        conv_gain: 1.0,
    };
    let mut r = rng(4);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for i in 0..100 {
        let mut store = ParamStore::<f64>::new(AdamConfig::default());
        let spec = MlpSpec {
            in_dim: 32,
            hidden: &[64, 64],
            out_dim: 1,
            act: Activation::Relu,
            layer_norm: false,
            spectral_first: false,
        };
        let mlp = Mlp::build(&mut store, &format!("net{i}"), Group::Critic, spec, init, &mut r).unwrap();
        let x: Vec<f64> = (0..256 * 32).map(|_| StandardNormal.sample(&mut r)).collect();
        let phi = measure_mlp_fau(&mut store, &mlp, &Tensor::new(vec![256, 32], x).unwrap()).unwrap();
        assert!((0.4..=0.6).contains(&phi), "init {i}: {phi}");
        lo = lo.min(phi);
        hi = hi.max(phi);
    }
    (lo, hi)
}

pub fn reset_keeps_buffer_and_encoder_and_redraws_heads() {
    let mut agent = tiny_agent(AgentConfig { spectral_norm: true, ..tiny_config() }, OBS, 2, 9);
    let mut r = rng(10);
    let buf = filled_buffer(&mut r, 40);
    let (mut s, mut a) = (rng(11), rng(12));
    for i in 0..3 {
        agent.update(&buf, i, Some(1), &mut s, &mut a).unwrap();
    }
    let stored: Vec<Transition> = buf.iter().cloned().collect();
    let encoder = agent.store.group_ids(Group::Encoder);
    let enc_before = snapshot(&agent, &encoder);
    let heads = names_matching(&agent, |n| n.starts_with("actor.") || n.starts_with("critic."));
    let head_before = snapshot(&agent, &heads);

    let targets = vec!["actor.*".to_string(), "critic.*".to_string()];
    let reset = reset_heads(&mut agent, &targets, &mut r).unwrap();
    assert_eq!(reset.len(), heads.len());

    assert_eq!(stored, buf.iter().cloned().collect::<Vec<_>>());
    assert_eq!(enc_before, snapshot(&agent, &encoder));
    let head_after = snapshot(&agent, &heads);
    for ((&id, old), new) in heads.iter().zip(&head_before).zip(&head_after) {
        if agent.store.name(id).ends_with(".weight") {
            assert_ne!(old, new, "{}", agent.store.name(id));
        }
        let adam = agent.store.slot(id).adam.as_ref().unwrap();
        assert!(adam.m.iter().chain(&adam.v).all(|&x| x == 0.0));
    }
    for &(t, o) in agent.target_pairs() {
        assert_eq!(agent.store.param(t).value.data(), agent.store.param(o).value.data());
        assert_eq!(agent.store.slot(t).sn_u, agent.store.slot(o).sn_u);
    }
}

/// Returns the largest output deviation seen at injection time.
pub fn injection_preserves_outputs_and_freezes_anchors() -> f32 {
    let mut largest = 0.0f32;
    for module in [InjectModule::Critic, InjectModule::Actor] {
        for layer_norm in [false, true] {
            let cfg = AgentConfig {
                layer_norm,
                ..tiny_config()
            };
            let mut r = rng(14);
            let mut agent: Agent<f32> = Agent::new(cfg, OBS, 2, &mut r).unwrap();
            let buf = filled_buffer(&mut r, 40);
            let (mut s, mut a) = (rng(15), rng(16));
            for i in 0..5 {
                agent.update(&buf, i, Some(1), &mut s, &mut a).unwrap();
            }
            let (obs, act) = f32_batch(&mut r, 100);
            let before = head_outputs(&mut agent, &obs, &act);
            inject_plasticity(&mut agent, module, &mut r).unwrap();
            let after = head_outputs(&mut agent, &obs, &act);
            let worst = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1e-6, "{module:?} ln={layer_norm}: {worst}");
            largest = largest.max(worst);

            let prefix = match module {
                InjectModule::Actor => "actor.",
                InjectModule::Critic => "critic.",
            };
            let base = names_matching(&agent, |n| n.starts_with(prefix) && !n.contains(".inject"));
            let anchor = names_matching(&agent, |n| n.starts_with(prefix) && n.contains(".inject_frozen"));
            let fresh = names_matching(&agent, |n| {
                n.starts_with(prefix) && n.contains(".inject.") && n.ends_with(".weight")
            });
            assert!(!base.is_empty() && !anchor.is_empty() && !fresh.is_empty());
            for &id in base.iter().chain(&anchor) {
                assert!(agent.store.slot(id).frozen && agent.store.slot(id).adam.is_none());
            }
            let (base0, anchor0, fresh0) =
                (snapshot(&agent, &base), snapshot(&agent, &anchor), snapshot(&agent, &fresh));
            for i in 0..100 {
                agent.update(&buf, 5 + i, Some(1), &mut s, &mut a).unwrap();
            }
            assert_eq!(base0, snapshot(&agent, &base));
            assert_eq!(anchor0, snapshot(&agent, &anchor));
            assert_ne!(fresh0, snapshot(&agent, &fresh));
            assert!(matches!(inject_plasticity(&mut agent, module, &mut r), Err(LabError::Config(_))));
        }
    }
    largest
}

pub fn shrink_with_zero_draw_is_alpha_scaling() {
    let mut agent = tiny_agent(tiny_config(), OBS, 2, 20);
    let targets = vec!["critic.*".to_string()];
    let ids = agent.store.matching(&targets).unwrap();
    let before: Vec<Vec<f64>> = ids.iter().map(|&id| agent.store.param(id).value.data().to_vec()).collect();
    let zero = |s: &ParamStore<f64>, id: ParamId| Ok(Tensor::zeros(s.param(id).value.shape()));
    shrink_and_perturb_with(&mut agent, &targets, 0.8, zero).unwrap();
    for (&id, old) in ids.iter().zip(&before) {
        let want: Vec<f64> = old.iter().map(|w| 0.8 * w).collect();
        assert_eq!(agent.store.param(id).value.data(), &want[..]);
    }
    let mid: Vec<Vec<f64>> = ids.iter().map(|&id| agent.store.param(id).value.data().to_vec()).collect();
    shrink_and_perturb_with(&mut agent, &targets, 1.0, zero).unwrap();
    let end: Vec<Vec<f64>> = ids.iter().map(|&id| agent.store.param(id).value.data().to_vec()).collect();
    assert_eq!(mid, end);
    assert!(matches!(
        shrink_and_perturb_with(&mut agent, &targets, 0.0, zero),
        Err(LabError::Config(_))
    ));
}

pub fn l2_init_closed_form() {
    let mut store = ParamStore::<f64>::new(AdamConfig::default());
    let id = store
        .add("w", Tensor::new(vec![1], vec![1.0]).unwrap(), Group::Critic, false, InitKind::Zeros)
        .unwrap();
    let (pen, grads) = l2_init_penalty(&mut store, &[id], 1e-2).unwrap();
    assert_eq!((pen, grads[0][0]), (0.0, 0.0));
    store.param_mut(id).value.data_mut()[0] = 3.0;
    let (pen, grads) = l2_init_penalty(&mut store, &[id], 1e-2).unwrap();
    assert!((pen - 0.04).abs() < 1e-15);
    assert!((grads[0][0] - 0.04).abs() < 1e-15);

    let mut agent = tiny_agent(tiny_config(), OBS, 2, 23);
    let ids = agent.store.matching(&["critic.*".to_string()]).unwrap();
    let mut r = rng(24);
    for &id in &ids {
        for v in agent.store.param_mut(id).value.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let (pen, grads) = l2_init_penalty(&mut agent.store, &ids, 1e-2).unwrap();
    let mut want = 0.0;
    for (&id, g) in ids.iter().zip(&grads) {
        let p = agent.store.param(id);
        for ((w, w0), gi) in p.value.data().iter().zip(p.initial_value().data()).zip(g) {
            want += (w - w0) * (w - w0);
            assert!((gi - 2e-2 * (w - w0)).abs() < 1e-15);
        }
    }
    assert!((pen - 1e-2 * want).abs() < 1e-12 * want.max(1.0));
}

