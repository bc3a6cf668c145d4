//! n-step batches against a brute-force recomputation from the raw episode log.

use plasticity_lab::envlab::Observation;
use plasticity_lab::replay::{ReplayBuffer, Transition};
use rand::Rng;

const EPISODES: usize = 1000;
const CAPACITY: usize = 1500;

/// One logged step with a globally unique id.
#[derive(Clone, Copy)]
struct Logged {
    id: u32,
    reward: f32,
    terminal: bool,
    last: bool,
}

pub fn frame(value: u32) -> Observation {
    Observation::new([1, 2, 2], value.to_le_bytes().to_vec()).unwrap()
}

fn next_frame_code(id: u32) -> u32 {
    id ^ 0x5a5a_0000
}

fn decode(px: &[f64]) -> u32 {
    let bytes: Vec<u8> = px.iter().map(|&p| (p * 255.0).round() as u8).collect();
    u32::from_le_bytes(bytes.try_into().unwrap())
}

/// Expected (reward, discount, bootstrap id) computed straight from the log.
fn brute_force(log: &[Logged], pos: usize, n: usize, gamma: f64) -> (f64, f64, u32) {
    let mut reward = 0.0;
    let mut scale = 1.0;
    let mut end = pos;
    for (k, step) in log[pos..].iter().take(n).enumerate() {
        reward += scale * step.reward as f64;
        scale *= gamma;
        end = pos + k;
        if step.last {
            if step.terminal {
                scale = 0.0;
            }
            break;
        }
    }
    (reward, scale, log[end].id)
}

/// Stored positions that have `n` steps ahead in the log, or reach their episode end.
fn brute_force_valid(log: &[Logged], first: usize, n: usize) -> Vec<usize> {
    (first..log.len())
        .filter(|&p| (p..log.len()).take(n).any(|q| log[q].last) || p + n <= log.len())
        .collect()
}

fn check_buffer(buf: &ReplayBuffer, log: &[Logged], n: usize, gamma: f64, rng: &mut impl Rng) {
    let first = log.len() - buf.len();
    let expected_valid = brute_force_valid(log, first, n);
    let valid = buf.valid_starts(n);
    assert_eq!(valid, expected_valid.len(), "valid start count");
    assert!(expected_valid.iter().enumerate().all(|(i, &p)| p == first + i));
    if valid == 0 {
        return;
    }
    let mut starts: Vec<usize> = (0..valid).collect();
    starts.extend(buf.sample_starts(64, n, rng).unwrap());
    let batch = buf.assemble::<f64>(&starts, n, gamma).unwrap();
    for (row, &s) in starts.iter().enumerate() {
        let pos = first + s;
        let (reward, discount, boot) = brute_force(log, pos, n, gamma);
        assert_eq!(batch.n_step_reward.data()[row], reward, "reward at {pos}");
        assert_eq!(batch.discount_n.data()[row], discount, "discount at {pos}");
        assert_eq!(batch.action.data()[row], log[pos].id as f64);
        assert_eq!(decode(&batch.obs.data()[row * 4..row * 4 + 4]), log[pos].id);
        assert_eq!(
            decode(&batch.next_obs_n.data()[row * 4..row * 4 + 4]),
            next_frame_code(boot)
        );
    }
}

/// Streams 1000 episodes into a bounded buffer for three (n, γ) settings and
/// compares every valid window, plus sampled ones, with the brute force.
pub fn nstep_batches_match_brute_force_over_1000_episodes() {
    let mut rng = super::rng(77);
    for &(n, gamma) in &[(1usize, 0.99), (3, 0.99), (5, 0.9)] {
        let mut buf = ReplayBuffer::new(CAPACITY).unwrap();
        let mut log = Vec::new();
        let mut id = 0u32;
        for ep in 0..EPISODES {
            let len = rng.random_range(1..=9);
            let terminal = rng.random_bool(0.3);
            for k in 0..len {
                let last = k + 1 == len;
                let step = Logged {
                    id,
                    reward: rng.random_range(-2.0f32..2.0),
                    terminal: last && terminal,
                    last,
                };
                buf.push(Transition {
                    obs: frame(id),
                    action: vec![id as f32],
                    reward: step.reward,
                    discount: if step.terminal { 0.0 } else { 1.0 },
                    last,
                    next_obs: frame(next_frame_code(id)),
                })
                .unwrap();
                log.push(step);
                id += 1;
                // Mid-episode checks exercise the open tail.
                if k == len / 2 && ep % 7 == 0 {
                    check_buffer(&buf, &log, n, gamma, &mut rng);
                }
            }
            if ep % 25 == 0 || ep + 1 == EPISODES {
                check_buffer(&buf, &log, n, gamma, &mut rng);
            }
        }
        assert!(buf.total_pushed() as usize > CAPACITY, "eviction exercised");
    }
}
