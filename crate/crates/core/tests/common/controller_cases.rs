//! Scripted critic-FAU sequences for the adaptive replay-ratio controller.

use plasticity_lab::adaptive_rr::{RRControllerState, RRDecision, RRMode};

pub const EPSILON: f64 = 1e-3;
pub const RR_LOW: f64 = 0.5;
pub const RR_HIGH: f64 = 2.0;
pub const INTERVAL: u64 = 2_000;
pub const WARMUP: u64 = 1_000;

pub struct Case {
    pub name: &'static str,
    pub phis: &'static [f64],
    /// Index of the reading that triggers the switch.
    pub switch_at: Option<usize>,
}

pub const CASES: &[Case] = &[
    Case { name: "single reading", phis: &[0.5], switch_at: None },
    Case { name: "immediate plateau", phis: &[0.5, 0.5], switch_at: Some(1) },
    Case { name: "never plateaus (steady rise)", phis: &[0.30, 0.32, 0.34, 0.36, 0.38, 0.40, 0.42, 0.44], switch_at: None },
    Case { name: "plateau after overshoot", phis: &[0.30, 0.60, 0.45, 0.40, 0.3995], switch_at: Some(4) },
    Case { name: "oscillation never settles", phis: &[0.4, 0.5, 0.4, 0.5, 0.4, 0.5], switch_at: None },
    Case { name: "delta just above epsilon", phis: &[0.5, 0.5011, 0.5022], switch_at: None },
    Case { name: "delta just below epsilon", phis: &[0.5, 0.5009], switch_at: Some(1) },
    Case { name: "slow decline then plateau", phis: &[0.7, 0.65, 0.6, 0.59, 0.5895], switch_at: Some(4) },
    Case { name: "latched despite later jumps", phis: &[0.5, 0.5, 0.9, 0.1, 0.1], switch_at: Some(1) },
    Case { name: "second plateau ignored", phis: &[0.4, 0.4004, 0.6, 0.6], switch_at: Some(1) },
    Case { name: "collapsed units", phis: &[0.0, 0.0], switch_at: Some(1) },
    Case { name: "saturated units", phis: &[1.0, 1.0], switch_at: Some(1) },
    Case { name: "overshoot crossing previous level", phis: &[0.45, 0.55, 0.449, 0.551], switch_at: None },
];

/// Check steps are the interval multiples from `WARMUP + INTERVAL` onwards.
fn check_step(k: usize) -> u64 {
    INTERVAL * (k as u64 + 2)
}

/// Drives a fresh controller through `case` and checks every decision, the
/// switch step, the replay ratio in force and the latch. Returns a
/// description of the first mismatch.
pub fn run(case: &Case) -> Result<(), String> {
    let mut c = RRControllerState::adaptive(RR_LOW, RR_HIGH, EPSILON, INTERVAL);
    c.min_steps_before_check = WARMUP + INTERVAL;
    for (k, &phi) in case.phis.iter().enumerate() {
        let step = check_step(k);
        if !c.is_check_step(step) {
            return Err(format!("step {step} is not a check step"));
        }
        let got = c.observe_fau(step, phi).map_err(|e| e.to_string())?;
        let want = if case.switch_at == Some(k) { RRDecision::Switch } else { RRDecision::Keep };
        if got != want {
            return Err(format!("reading {k} (phi {phi}): got {got:?}, want {want:?}"));
        }
        let switched = case.switch_at.is_some_and(|s| k >= s);
        let rr = if switched { RR_HIGH } else { RR_LOW };
        if c.rr_current != rr || c.switched != switched {
            return Err(format!("reading {k}: rr {} switched {}", c.rr_current, c.switched));
        }
    }
    let want_step = case.switch_at.map(check_step);
    if c.switch_step != want_step {
        return Err(format!("switch step {:?}, want {want_step:?}", c.switch_step));
    }
    // Latch: once switched, any further readings keep the high ratio.
    if c.switched {
        for phi in [0.0, 1.0, 0.5, 0.5] {
            if c.observe_fau(10_000_000, phi).map_err(|e| e.to_string())? != RRDecision::Keep {
                return Err("switched twice".into());
            }
        }
        if c.rr_current != RR_HIGH || c.switch_step != want_step {
            return Err("latch released".into());
        }
    }
    if c.mode != RRMode::Adaptive {
        return Err("mode changed".into());
    }
    Ok(())
}

/// Updates produced by a static controller over `steps` environment steps.
pub fn static_updates(rr: f64, steps: u64) -> u64 {
    let mut c = RRControllerState::fixed(rr);
    let per_step: u64 = (0..steps).map(|_| c.updates_due()).sum();
    assert_eq!(per_step, c.total_updates());
    per_step
}
