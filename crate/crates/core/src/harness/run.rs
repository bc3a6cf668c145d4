//! Training loop, protocol arms and the multi-run scheduler.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;

use crate::adaptive_rr::{RRConfig, RRDecision, RRMode, RRSummary};
use crate::agent::{ActMode, Agent};
use crate::augment::{da_active, Toggle};
use crate::envlab::PixelEnv;
use crate::error::{LabError, Result};
use crate::harness::config::{ExperimentConfig, Protocol};
use crate::harness::metrics::{MetricsRow, MetricsWriter};
use crate::harness::rng::{rng_stream, rng_substream, StreamRng};
use crate::plasticity::{fau_report, inject_plasticity, reset_heads, shrink_and_perturb, FAUReport, ResetConfig};
use crate::replay::{Batch, ReplayBuffer, Transition};

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::FactorialDaReset => "factorial_da_reset",
            Protocol::DaToggle => "da_toggle",
            Protocol::RrSweep => "rr_sweep",
            Protocol::AdaptiveRr => "adaptive_rr",
            Protocol::HeavyPriming => "heavy_priming",
        }
    }
}

/// One configuration variant within a protocol.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub cfg: ExperimentConfig,
    /// Run the heavy-priming phase.
    pub primed: bool,
}

fn arm(name: impl Into<String>, cfg: ExperimentConfig) -> Arm {
    Arm {
        name: name.into(),
        cfg,
        primed: false,
    }
}

/// Expands a protocol into its arms.
pub fn expand_arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    match cfg.protocol {
        Protocol::Standard => vec![arm("main", cfg.clone())],
        Protocol::FactorialDaReset => {
            let mut out = Vec::new();
            for da in [true, false] {
                for reset in [true, false] {
                    let mut c = cfg.clone();
                    c.da.enabled = da;
                    c.da.schedule.clear();
                    c.interventions.reset = reset.then(|| cfg.interventions.reset.clone().unwrap_or_default());
                    let name = format!(
                        "{}_{}",
                        if da { "da" } else { "noda" },
                        if reset { "reset" } else { "noreset" }
                    );
                    out.push(arm(name, c));
                }
            }
            out
        }
        Protocol::DaToggle => {
            let ep = cfg.env.episode_len as u64;
            let at = cfg
                .da
                .schedule
                .first()
                .map(|t| t.step)
                .unwrap_or((cfg.total_steps / 4 / ep).max(1) * ep);
            let variant = |name: &str, enabled: bool, toggle: Option<bool>| {
                let mut c = cfg.clone();
                c.da.enabled = enabled;
                c.da.schedule = toggle.map(|on| vec![Toggle { step: at, on }]).unwrap_or_default();
                arm(name, c)
            };
            vec![
                variant("always_on", true, None),
                variant("always_off", false, None),
                variant("turn_on", false, Some(true)),
                variant("turn_off", true, Some(false)),
            ]
        }
        Protocol::RrSweep => cfg
            .rr
            .sweep
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.rr = RRConfig {
                    mode: RRMode::Static,
                    value: Some(v),
                    ..cfg.rr.clone()
                };
                arm(format!("rr{v}"), c)
            })
            .collect(),
        Protocol::AdaptiveRr => {
            let with = |mode: RRMode, value: Option<f64>| {
                let mut c = cfg.clone();
                c.rr.mode = mode;
                c.rr.value = value;
                c
            };
            vec![
                arm("adaptive", with(RRMode::Adaptive, None)),
                arm("static_low", with(RRMode::Static, Some(cfg.rr.low))),
                arm("static_high", with(RRMode::Static, Some(cfg.rr.high))),
            ]
        }
        Protocol::HeavyPriming => vec![
            Arm {
                primed: true,
                ..arm("primed", cfg.clone())
            },
            arm("baseline", cfg.clone()),
        ],
    }
}

/// Outcome of one (arm, seed) run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub protocol: Protocol,
    pub arm: String,
    pub seed: u64,
    pub csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub steps: u64,
    pub seed_steps: u64,
    pub episode_returns: Vec<f64>,
    pub eval_returns: Vec<(u64, f64)>,
    /// Updates issued by the replay-ratio controller.
    pub controller_updates: u64,
    /// All agent updates, including any priming phase.
    pub agent_updates: u64,
    pub rr_low: f64,
    pub rr_high: f64,
    pub controller: RRSummary,
    pub fau: Vec<FAUReport>,
    pub events: Vec<(u64, String)>,
    pub wall_secs: f64,
}

impl RunSummary {
    /// Mean training return over the last `k` episodes.
    pub fn final_return(&self, k: usize) -> Option<f64> {
        let n = self.episode_returns.len();
        if n == 0 {
            return None;
        }
        let tail = &self.episode_returns[n.saturating_sub(k)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    pub fn phi_critic_at(&self, step: u64) -> Option<f64> {
        self.fau.iter().find(|r| r.step == step).map(|r| r.phi_critic)
    }

    /// Update count implied by the controller trajectory:
    /// `rr_low · (switch − warm-up) + rr_high · (end − switch)`.
    pub fn expected_updates(&self) -> f64 {
        let start = self.seed_steps.min(self.steps);
        match self.controller.switch_step {
            Some(s) => self.rr_low * (s - start) as f64 + self.rr_high * (self.steps - s) as f64,
            None => self.controller.rr_current * (self.steps - start) as f64,
        }
    }
}

/// Options for a single run beyond its configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for the metrics CSV and checkpoint; `None` writes nothing.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps instead of `total_steps`.
    pub stop_at: Option<u64>,
}

struct Streams {
    noise: StreamRng,
    augment: StreamRng,
    sample: StreamRng,
    intervention: StreamRng,
}

fn to_f64(a: &[f32]) -> Vec<f64> {
    a.iter().map(|&x| x as f64).collect()
}

/// Noiseless evaluation on an environment seeded independently of training.
fn evaluate(agent: &mut Agent<f32>, cfg: &ExperimentConfig, seed: u64, index: u64, rng: &mut StreamRng) -> Result<f64> {
    let mut env = PixelEnv::new(cfg.env.clone(), rng_substream(seed, "env", index + 1)?)?;
    let mut total = 0.0;
    for _ in 0..cfg.eval.episodes {
        let mut obs = env.reset();
        loop {
            let a = agent.act(&obs.to_tensor(), ActMode::Eval, 0, rng)?;
            let r = env.step(&to_f64(&a))?;
            total += r.reward;
            if r.done {
                break;
            }
            obs = r.obs;
        }
    }
    Ok(total / cfg.eval.episodes as f64)
}

/// Runs one arm for one seed.
pub fn run_arm(arm: &Arm, seed: u64, opts: &RunOptions) -> Result<RunSummary> {
    let started = Instant::now();
    let cfg = &arm.cfg;
    cfg.validate()?;
    let total = opts.stop_at.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let stem = csv_stem(cfg.protocol, &arm.name, seed);
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some((MetricsWriter::create(&csv_path(dir, cfg.protocol, &arm.name, seed))?, dir.clone()))
        }
        None => None,
    };

    let spec = cfg.env.clone();
    let mut env = PixelEnv::new(spec.clone(), rng_stream(seed, "env")?)?;
    let mut agent_cfg = cfg.agent.clone();
    cfg.interventions.apply_architecture(&mut agent_cfg);
    let mut agent: Agent<f32> = Agent::new(
        agent_cfg,
        spec.obs_shape(),
        spec.action_dim(),
        &mut rng_stream(seed, "init")?,
    )?;
    cfg.interventions.apply_regularization(&mut agent)?;
    let mut rngs = Streams {
        noise: rng_stream(seed, "action_noise")?,
        augment: rng_stream(seed, "augment")?,
        sample: rng_stream(seed, "sample")?,
        intervention: rng_stream(seed, "intervention")?,
    };
    let mut rr = cfg.rr.build(spec.episode_len as u64, cfg.seed_steps)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let reset_cfg: Option<&ResetConfig> = cfg.interventions.reset.as_ref();
    let reset_steps = reset_cfg.map(|r| r.schedule(cfg.total_steps)).transpose()?.unwrap_or_default();
    let sp_steps = cfg
        .interventions
        .shrink_perturb
        .as_ref()
        .map(|s| s.schedule(cfg.total_steps))
        .transpose()?
        .unwrap_or_default();
    let pad = cfg.da.pad_for(spec.frame_size);

    let mut summary = RunSummary {
        protocol: cfg.protocol,
        arm: arm.name.clone(),
        seed,
        csv: opts.out_dir.as_ref().map(|d| csv_path(d, cfg.protocol, &arm.name, seed)),
        checkpoint: None,
        steps: 0,
        seed_steps: cfg.seed_steps,
        episode_returns: Vec::new(),
        eval_returns: Vec::new(),
        controller_updates: 0,
        agent_updates: 0,
        rr_low: rr.rr_low,
        rr_high: rr.rr_high,
        controller: rr.describe(),
        fau: Vec::new(),
        events: Vec::new(),
        wall_secs: 0.0,
    };

    let mut obs = env.reset();
    let mut ep_return = 0.0;
    let mut episode = 0u64;
    let mut losses = (0.0f64, 0.0f64, 0u64);
    let mut prev_da = da_active(&cfg.da, 0);

    for step in 1..=total {
        let mut row = MetricsRow {
            step,
            episode,
            ..Default::default()
        };
        let outcome: Result<bool> = (|| {
            let action: Vec<f32> = if step <= cfg.seed_steps {
                (0..spec.action_dim()).map(|_| rngs.noise.random_range(-1.0f32..=1.0)).collect()
            } else {
                agent.act(&obs.to_tensor(), ActMode::Explore, step, &mut rngs.noise)?
            };
            let res = env.step(&to_f64(&action))?;
            ep_return += res.reward;
            let next = res.obs;
            buffer.push(Transition {
                obs: std::mem::replace(&mut obs, next.clone()),
                action,
                reward: res.reward as f32,
                discount: 1.0,
                last: res.done,
                next_obs: next,
            })?;

            let da_now = da_active(&cfg.da, step);
            if da_now != prev_da {
                row.events.push(if da_now { "da_on" } else { "da_off" }.into());
                prev_da = da_now;
            }
            let aug = da_now.then_some(pad);
            let mut do_update = |agent: &mut Agent<f32>, rngs: &mut Streams| -> Result<()> {
                let s = agent.update(&buffer, step, aug, &mut rngs.sample, &mut rngs.augment)?;
                losses.0 += s.critic_loss;
                losses.1 += s.actor_loss;
                losses.2 += 1;
                Ok(())
            };
            if arm.primed && step == cfg.priming.transitions {
                for _ in 0..cfg.priming.updates {
                    do_update(&mut agent, &mut rngs)?;
                }
                row.events.push("priming".into());
            }
            if step > cfg.seed_steps {
                for _ in 0..rr.updates_due() {
                    do_update(&mut agent, &mut rngs)?;
                }
            }

            if let Some(r) = reset_cfg {
                if reset_steps.contains(&step) {
                    reset_heads(&mut agent, &r.targets, &mut rngs.intervention)?;
                    row.events.push("reset".into());
                }
            }
            if let Some(sp) = &cfg.interventions.shrink_perturb {
                if sp_steps.contains(&step) {
                    shrink_and_perturb(&mut agent, &sp.targets, sp.alpha, &mut rngs.intervention)?;
                    row.events.push("shrink_perturb".into());
                }
            }
            if let Some(inj) = &cfg.interventions.injection {
                if inj.step == step {
                    inject_plasticity(&mut agent, inj.module, &mut rngs.intervention)?;
                    row.events.push("injection".into());
                }
            }

            let check = rr.is_check_step(step);
            let periodic = res.done && (episode + 1) % cfg.fau_every_episodes == 0;
            if check || periodic {
                let report = measure(&mut agent, &buffer, cfg, seed, step)?;
                row.phi_encoder = Some(report.phi_encoder);
                row.phi_actor = Some(report.phi_actor);
                row.phi_critic = Some(report.phi_critic);
                row.norm_encoder = report.weight_norms.get("encoder").copied();
                row.norm_actor = report.weight_norms.get("actor").copied();
                row.norm_critic = report.weight_norms.get("critic").copied();
                if check && rr.observe_fau(step, report.phi_critic)? == RRDecision::Switch {
                    row.events.push("rr_switch".into());
                }
                summary.fau.push(report);
            }

            if res.done {
                episode += 1;
                row.episode = episode;
                row.episode_return = Some(ep_return);
                summary.episode_returns.push(ep_return);
                if losses.2 > 0 {
                    row.critic_loss = Some(losses.0 / losses.2 as f64);
                    row.actor_loss = Some(losses.1 / losses.2 as f64);
                }
                losses = (0.0, 0.0, 0);
                if cfg.eval.enabled && episode % cfg.eval.every_episodes == 0 {
                    let v = evaluate(&mut agent, cfg, seed, episode, &mut rngs.noise)?;
                    row.eval_return = Some(v);
                    summary.eval_returns.push((step, v));
                }
                ep_return = 0.0;
                obs = env.reset();
            }
            Ok(res.done)
        })();
        row.rr_current = rr.rr_current;
        row.updates = agent.updates();
        for e in &row.events {
            summary.events.push((step, e.clone()));
        }
        match outcome {
            Ok(episode_end) => {
                if let Some((w, _)) = writer.as_mut() {
                    if row.has_payload() {
                        w.write(&row)?;
                    }
                    if episode_end {
                        w.flush()?;
                    }
                }
            }
            Err(e) => {
                if let Some((w, _)) = writer.as_mut() {
                    row.events.push("aborted".into());
                    w.write(&row)?;
                    w.flush()?;
                }
                return Err(e);
            }
        }
        summary.steps = step;
    }

    if let Some((w, dir)) = writer.as_mut() {
        w.flush()?;
        if cfg.save_checkpoint {
            let mut archive = agent.to_archive();
            archive.set_counter("counter/env_steps", summary.steps);
            archive.set_counter("counter/episodes", episode);
            archive.set_counter("counter/controller_updates", rr.total_updates());
            if let Some(s) = rr.switch_step {
                archive.set_counter("counter/rr_switch_step", s);
            }
            let path = dir.join(format!("{stem}.ckpt"));
            archive.write(&path)?;
            summary.checkpoint = Some(path);
        }
    }
    summary.controller_updates = rr.total_updates();
    summary.agent_updates = agent.updates();
    summary.controller = rr.describe();
    summary.wall_secs = started.elapsed().as_secs_f64();
    Ok(summary)
}

/// FAU over an evaluation batch drawn from a per-step substream, without
/// augmentation.
fn measure(
    agent: &mut Agent<f32>,
    buffer: &ReplayBuffer,
    cfg: &ExperimentConfig,
    seed: u64,
    step: u64,
) -> Result<FAUReport> {
    let mut rng = rng_substream(seed, "sample", step)?;
    let batch: Batch<f32> = buffer.sample_nstep(cfg.fau_batch, 1, cfg.agent.gamma, &mut rng)?;
    fau_report(agent, step, &batch.obs, &batch.action)
}

/// Runs every (arm, seed) pair of the configured protocol on up to `jobs`
/// threads. Results come back in arm-major, seed-minor order.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let out = cfg.output_root();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let arms = expand_arms(cfg);
    let work: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let opts = RunOptions {
        out_dir: Some(out),
        stop_at: None,
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(a, seed)) = work.get(i) else { break };
                let r = run_arm(&arms[a], seed, &opts);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(LabError::Contract("run did not complete".into()))))
        .collect()
}

/// File stem shared by a run's metrics CSV and checkpoint.
pub fn csv_stem(protocol: Protocol, arm: &str, seed: u64) -> String {
    format!("{}_{}_seed{}", protocol.as_str(), arm, seed)
}

pub fn csv_path(dir: &Path, protocol: Protocol, arm: &str, seed: u64) -> PathBuf {
    dir.join(format!("{}.csv", csv_stem(protocol, arm, seed)))
}
