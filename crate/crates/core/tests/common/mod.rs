#![allow(dead_code)]

use plasticity_lab::agent::{Agent, AgentConfig, ParamId};
use plasticity_lab::numerics::{Graph, Tensor, Var};
use plasticity_lab::replay::Batch;
use plasticity_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Gradient norms below this are treated as zero when forming relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖ + ‖b‖, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(GRAD_FLOOR)
}

/// Compares reverse-mode gradients of a scalar graph function with central
/// differences, input by input. Returns the worst relative error.
pub fn graph_fd<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let loss = build(&mut g, &vars).unwrap();
        let value = g.value(loss).data()[0];
        if !grad {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            *slot = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Central differences of `loss` with respect to stored parameter values.
pub fn store_fd<F>(agent: &mut Agent<f64>, ids: &[ParamId], mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&mut Agent<f64>) -> f64,
{
    ids.iter()
        .map(|&id| {
            let n = agent.store.param(id).len();
            (0..n)
                .map(|k| {
                    let orig = agent.store.param(id).value.data()[k];
                    agent.store.param_mut(id).value.data_mut()[k] = orig + FD_STEP;
                    let up = loss(agent);
                    agent.store.param_mut(id).value.data_mut()[k] = orig - FD_STEP;
                    let down = loss(agent);
                    agent.store.param_mut(id).value.data_mut()[k] = orig;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}

pub fn take_grads(agent: &mut Agent<f64>, ids: &[ParamId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let n = agent.store.param(id).len();
            agent
                .store
                .param_mut(id)
                .value
                .take_grad()
                .unwrap_or_else(|| vec![0.0; n])
        })
        .collect()
}

pub fn tiny_config() -> AgentConfig {
    AgentConfig {
        feature_dim: 6,
        hidden_dim: 5,
        hidden_layers: 2,
        filters: 2,
        kernel: 3,
        strides: vec![2, 1],
        batch_size: 4,
        ..AgentConfig::default()
    }
}

pub fn tiny_agent(cfg: AgentConfig, obs_shape: [usize; 3], action_dim: usize, seed: u64) -> Agent<f64> {
    Agent::new(cfg, obs_shape, action_dim, &mut rng(seed)).unwrap()
}

/// Random batch with pixels in `[0, 1]` and actions in `[-1, 1]`.
pub fn random_batch<R: Rng>(obs_shape: [usize; 3], action_dim: usize, b: usize, rng: &mut R) -> Batch<f64> {
    let [c, h, w] = obs_shape;
    Batch {
        obs: rand_tensor(&[b, c, h, w], 0.0, 1.0, rng),
        action: rand_tensor(&[b, action_dim], -1.0, 1.0, rng),
        n_step_reward: rand_tensor(&[b], 0.0, 3.0, rng),
        discount_n: rand_tensor(&[b], 0.0, 1.0, rng),
        next_obs_n: rand_tensor(&[b, c, h, w], 0.0, 1.0, rng),
    }
}
pub mod gradcases;
pub mod controller_cases;
pub mod criteria;
pub mod nstep;
