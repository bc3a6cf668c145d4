//! Layer and loss compositions checked against central finite differences.
//! Each case draws its own random shape from `seed` and returns the worst
//! relative gradient error.

use plasticity_lab::agent::{Agent, AgentConfig, ParamId};
use plasticity_lab::plasticity::{inject_plasticity, l2_init_penalty, InjectModule};
use rand::Rng;

use super::{graph_fd, rand_tensor, random_batch, rng, store_fd, take_grads, GRAD_FLOOR};

pub type Case = fn(u64) -> f64;

pub const CASES: &[(&str, Case)] = &[
    ("linear + mse", linear_mse),
    ("conv2d + squared distance", conv_sq),
    ("relu + linear + mse", relu_chain),
    ("crelu + linear + mse", crelu_chain),
    ("tanh + mse", tanh_mse),
    ("layer norm rows + mse", ln_rows),
    ("layer norm feature maps + mse", ln_maps),
    ("spectral norm + linear + mse", spectral_linear),
    ("concat + linear + mse", concat_linear),
    ("add / sub / scale + mse", arith),
    ("minimum + mean", minimum_mean),
    ("flatten + linear + sum", flatten_linear),
    ("conv trunk + layer norm + tanh", conv_trunk),
    ("critic loss (full agent)", critic_loss),
    ("actor loss (full agent)", actor_loss),
    ("injected critic loss", injected_critic),
    ("l2-init penalty", l2_init),
];

fn target(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed ^ 0xfeed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn linear_mse(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (r.random_range(1..6), r.random_range(1..8), r.random_range(1..8));
    let inputs = [
        rand_tensor(&[b, i], -1.0, 1.0, &mut r),
        rand_tensor(&[o, i], -1.0, 1.0, &mut r),
        rand_tensor(&[o], -1.0, 1.0, &mut r),
    ];
    let t = target(b * o, seed);
    graph_fd(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        g.mse(y, &t)
    })
}

fn conv_sq(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, f) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (h, w) = (r.random_range(3..8), r.random_range(3..8));
    let k = r.random_range(1..4);
    let stride = r.random_range(1..3);
    let inputs = [
        rand_tensor(&[b, c, h, w], -1.0, 1.0, &mut r),
        rand_tensor(&[f, c, k, k], -1.0, 1.0, &mut r),
        rand_tensor(&[f], -1.0, 1.0, &mut r),
    ];
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let anchor = target(b * f * oh * ow, seed);
    graph_fd(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride)?;
        g.sq_dist(y, &anchor)
    })
}

fn rectified_chain(seed: u64, crelu: bool) -> f64 {
    let mut r = rng(seed);
    let (b, d, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..5));
    let width = if crelu { 2 * d } else { d };
    let inputs = [
        rand_tensor(&[b, d], -1.0, 1.0, &mut r),
        rand_tensor(&[o, width], -1.0, 1.0, &mut r),
    ];
    let t = target(b * o, seed);
    graph_fd(&inputs, |g, v| {
        let h = if crelu { g.crelu(v[0])? } else { g.relu(v[0]) };
        let y = g.linear(h, v[1], None)?;
        g.mse(y, &t)
    })
}

fn relu_chain(seed: u64) -> f64 {
    rectified_chain(seed, false)
}

fn crelu_chain(seed: u64) -> f64 {
    rectified_chain(seed, true)
}

fn tanh_mse(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (r.random_range(1..5), r.random_range(1..9));
    let inputs = [rand_tensor(&[b, d], -2.0, 2.0, &mut r)];
    let t = target(b * d, seed);
    graph_fd(&inputs, |g, v| {
        let y = g.tanh(v[0]);
        g.mse(y, &t)
    })
}

fn ln_case(seed: u64, shape: Vec<usize>) -> f64 {
    let mut r = rng(seed);
    let d: usize = shape[1..].iter().product();
    let inputs = [
        rand_tensor(&shape, -2.0, 2.0, &mut r),
        rand_tensor(&[d], 0.5, 1.5, &mut r),
        rand_tensor(&[d], -0.5, 0.5, &mut r),
    ];
    let t = target(shape.iter().product(), seed);
    graph_fd(&inputs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        g.mse(y, &t)
    })
}

fn ln_rows(seed: u64) -> f64 {
    let mut r = rng(seed.wrapping_add(7));
    ln_case(seed, vec![r.random_range(1..5), r.random_range(2..9)])
}

fn ln_maps(seed: u64) -> f64 {
    let mut r = rng(seed.wrapping_add(7));
    ln_case(
        seed,
        vec![r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(2..4)],
    )
}

fn spectral_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..7));
    let inputs = [
        rand_tensor(&[b, i], -1.0, 1.0, &mut r),
        rand_tensor(&[o, i], -1.0, 1.0, &mut r),
    ];
    let mut u0: Vec<f64> = (0..o).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = u0.iter().map(|x| x * x).sum::<f64>().sqrt();
    u0.iter_mut().for_each(|x| *x /= n);
    let t = target(b * o, seed);
    graph_fd(&inputs, |g, v| {
        let mut u = u0.clone();
        let w = g.spectral_norm(v[1], &mut u, 0)?;
        let y = g.linear(v[0], w, None)?;
        g.mse(y, &t)
    })
}

fn concat_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, da, db, o) = (
        r.random_range(1..5),
        r.random_range(1..5),
        r.random_range(1..5),
        r.random_range(1..4),
    );
    let inputs = [
        rand_tensor(&[b, da], -1.0, 1.0, &mut r),
        rand_tensor(&[b, db], -1.0, 1.0, &mut r),
        rand_tensor(&[o, da + db], -1.0, 1.0, &mut r),
    ];
    let t = target(b * o, seed);
    graph_fd(&inputs, |g, v| {
        let x = g.concat(v[0], v[1])?;
        let y = g.linear(x, v[2], None)?;
        g.mse(y, &t)
    })
}

fn arith(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..5), r.random_range(1..5)];
    let c: f64 = r.random_range(-2.0..2.0);
    let inputs = [
        rand_tensor(&shape, -1.0, 1.0, &mut r),
        rand_tensor(&shape, -1.0, 1.0, &mut r),
        rand_tensor(&shape, -1.0, 1.0, &mut r),
    ];
    let t = target(shape[0] * shape[1], seed);
    graph_fd(&inputs, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[2])?;
        let y = g.scale(d, c);
        g.mse(y, &t)
    })
}

fn minimum_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..6), 1];
    let inputs = [
        rand_tensor(&shape, -1.0, 1.0, &mut r),
        rand_tensor(&shape, -1.0, 1.0, &mut r),
    ];
    graph_fd(&inputs, |g, v| {
        let m = g.minimum(v[0], v[1])?;
        let y = g.mean(m);
        Ok(g.scale(y, -1.0))
    })
}

fn flatten_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)];
    let d = s[1] * s[2] * s[3];
    let o = r.random_range(1..4);
    let inputs = [
        rand_tensor(&s, -1.0, 1.0, &mut r),
        rand_tensor(&[o, d], -1.0, 1.0, &mut r),
    ];
    graph_fd(&inputs, |g, v| {
        let x = g.flatten(v[0])?;
        let y = g.linear(x, v[1], None)?;
        let y = g.tanh(y);
        Ok(g.sum(y))
    })
}

fn conv_trunk(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, f) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..3));
    let hw = r.random_range(5..8);
    let oh = (hw - 3) / 2 + 1;
    let d = f * oh * oh;
    let feat = r.random_range(2..5);
    let inputs = [
        rand_tensor(&[b, c, hw, hw], 0.0, 1.0, &mut r),
        rand_tensor(&[f, c, 3, 3], -1.0, 1.0, &mut r),
        rand_tensor(&[feat, d], -1.0, 1.0, &mut r),
        rand_tensor(&[feat], 0.5, 1.5, &mut r),
        rand_tensor(&[feat], -0.5, 0.5, &mut r),
    ];
    let t = target(b * feat, seed);
    graph_fd(&inputs, |g, v| {
        let h = g.conv2d(v[0], v[1], None, 2)?;
        let h = g.relu(h);
        let h = g.flatten(h)?;
        let z = g.linear(h, v[2], None)?;
        let z = g.layer_norm(z, v[3], v[4])?;
        let z = g.tanh(z);
        g.mse(z, &t)
    })
}

/// A tiny agent with randomly chosen architectural switches.
pub fn random_agent(seed: u64) -> (Agent<f64>, [usize; 3], usize) {
    let mut r = rng(seed);
    let cfg = AgentConfig {
        feature_dim: r.random_range(3..6),
        hidden_dim: r.random_range(3..6),
        hidden_layers: r.random_range(1..3),
        filters: 2,
        kernel: 3,
        strides: vec![2, 1],
        batch_size: 3,
        layer_norm: r.random_bool(0.5),
        spectral_norm: r.random_bool(0.5),
        crelu_critic: r.random_bool(0.5),
        ..AgentConfig::default()
    };
    let hw = r.random_range(7..11);
    let obs = [r.random_range(1..3), hw, hw];
    let adim = r.random_range(1..3);
    (Agent::new(cfg, obs, adim, &mut r).unwrap(), obs, adim)
}

/// Per-tensor relative error, with the denominator floored at a fraction of the
/// whole-model gradient norm. A tensor whose gradient is orders of magnitude below
/// the rest cannot be resolved by f64 central differences (the quotient noise is
/// about `f64::EPSILON * |loss| / FD_STEP`), so it is judged on the model's scale.
fn worst(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let norm = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let scale = MODEL_SCALE_FRACTION * (norm(analytic) + norm(numeric));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let own: f64 = norm(std::slice::from_ref(a)) + norm(std::slice::from_ref(n));
            diff / own.max(scale).max(GRAD_FLOOR)
        })
        .fold(0.0, f64::max)
}

const MODEL_SCALE_FRACTION: f64 = 1e-2;

fn trainable(agent: &Agent<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    agent
        .store
        .ids()
        .filter(|&id| {
            let s = agent.store.slot(id);
            !s.frozen && prefixes.iter().any(|p| s.param.name.starts_with(p))
        })
        .collect()
}

fn critic_loss(seed: u64) -> f64 {
    let (mut agent, obs, adim) = random_agent(seed);
    let mut r = rng(seed ^ 1);
    let batch = random_batch(obs, adim, 3, &mut r);
    let y = target(3, seed);
    if r.random_bool(0.5) {
        agent.reg.l2_init_coef = 1e-2;
        agent.reg.l2_init_params = agent.store.matching(&["critic.*".to_string()]).unwrap();
        let ids = agent.reg.l2_init_params.clone();
        for id in ids {
            for x in agent.store.param_mut(id).value.data_mut() {
                *x += 0.1;
            }
        }
    }
    let ids = trainable(&agent, &["encoder.", "critic."]);
    agent.critic_grads(&batch, &y, false).unwrap();
    let analytic = take_grads(&mut agent, &ids);
    let numeric = store_fd(&mut agent, &ids, |a| a.critic_grads(&batch, &y, false).unwrap().0);
    worst(&analytic, &numeric)
}

fn actor_loss(seed: u64) -> f64 {
    let (mut agent, _, _) = random_agent(seed);
    let mut r = rng(seed ^ 2);
    let features = rand_tensor(&[3, agent.cfg.feature_dim], -1.0, 1.0, &mut r);
    let ids = trainable(&agent, &["actor."]);
    agent.actor_grads(&features, false).unwrap();
    let analytic = take_grads(&mut agent, &ids);
    let numeric = store_fd(&mut agent, &ids, |a| a.actor_grads(&features, false).unwrap().0);
    worst(&analytic, &numeric)
}

fn injected_critic(seed: u64) -> f64 {
    let (mut agent, obs, adim) = random_agent(seed);
    let mut r = rng(seed ^ 3);
    inject_plasticity(&mut agent, InjectModule::Critic, &mut r).unwrap();
    // Move θ'₁ away from θ'₂ so the residual is not identically zero.
    let fresh = agent.store.matching(&["critic.q?.inject.*".to_string()]).unwrap();
    for id in fresh {
        for x in agent.store.param_mut(id).value.data_mut() {
            *x += r.random_range(-0.1..0.1);
        }
    }
    let batch = random_batch(obs, adim, 3, &mut r);
    let y = target(3, seed);
    let ids = trainable(&agent, &["encoder.", "critic."]);
    agent.critic_grads(&batch, &y, false).unwrap();
    let analytic = take_grads(&mut agent, &ids);
    let numeric = store_fd(&mut agent, &ids, |a| a.critic_grads(&batch, &y, false).unwrap().0);
    worst(&analytic, &numeric)
}

fn l2_init(seed: u64) -> f64 {
    let (mut agent, _, _) = random_agent(seed);
    let mut r = rng(seed ^ 4);
    let ids = agent.store.matching(&["critic.*".to_string()]).unwrap();
    for &id in &ids {
        for x in agent.store.param_mut(id).value.data_mut() {
            *x += r.random_range(-0.5..0.5);
        }
    }
    let (_, analytic) = l2_init_penalty(&mut agent.store, &ids, 1e-2).unwrap();
    let numeric = store_fd(&mut agent, &ids, |a| {
        let ids = ids.clone();
        l2_init_penalty(&mut a.store, &ids, 1e-2).unwrap().0
    });
    worst(&analytic, &numeric)
}
