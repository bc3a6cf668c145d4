mod common;

use common::nstep::frame;
use plasticity_lab::replay::{ReplayBuffer, Transition};

#[test]
fn nstep_batches_match_brute_force_over_1000_episodes() {
    common::nstep::nstep_batches_match_brute_force_over_1000_episodes();
}

#[test]
fn sampled_starts_cover_every_valid_index() {
    let mut rng = common::rng(5);
    let mut buf = ReplayBuffer::new(20).unwrap();
    for id in 0..12u32 {
        buf.push(Transition {
            obs: frame(id),
            action: vec![0.0],
            reward: 0.0,
            discount: 1.0,
            last: id == 5,
            next_obs: frame(id),
        })
        .unwrap();
    }
    let valid = buf.valid_starts(3);
    assert_eq!(valid, 10);
    let mut seen = vec![0usize; valid];
    for s in buf.sample_starts(5000, 3, &mut rng).unwrap() {
        seen[s] += 1;
    }
    assert!(seen.iter().all(|&c| c > 350 && c < 650), "{seen:?}");
}
