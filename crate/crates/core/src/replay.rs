//! Ring-buffer experience replay with n-step return assembly.
//!
//! Transitions are stored in insertion order. A sampled window starting at
//! logical index `t` covers `t, t+1, …, t+m-1` where `m = min(n, steps to the
//! end of t's episode)`; windows never cross an episode boundary and never run
//! past the newest stored transition.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::envlab::{to_unit, Observation};
use crate::error::{LabError, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f32>,
    pub reward: f32,
    /// `0.0` when the episode terminated for real (no bootstrap), else `1.0`.
    pub discount: f32,
    /// Last transition of its episode (terminal or time limit).
    pub last: bool,
    pub next_obs: Observation,
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub obs: Tensor<T>,
    pub action: Tensor<T>,
    pub n_step_reward: Tensor<T>,
    pub discount_n: Tensor<T>,
    pub next_obs_n: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One assembled n-step window.
#[derive(Clone, Debug, PartialEq)]
pub struct NStepWindow {
    pub start: usize,
    pub len: usize,
    pub reward: f64,
    pub discount: f64,
    /// Logical index of the transition whose `next_obs` is the bootstrap state.
    pub next_index: usize,
}

pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
    /// Transitions at the back that belong to a still-running episode.
    open_tail: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(LabError::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
            open_tail: 0,
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Total transitions ever pushed (including evicted ones).
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    /// Logical index 0 is the oldest stored transition.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if let Some(first) = self.storage.front() {
            if first.obs.shape() != t.obs.shape()
                || first.next_obs.shape() != t.next_obs.shape()
                || first.action.len() != t.action.len()
            {
                return Err(LabError::Shape(
                    "transition shape differs from stored transitions".into(),
                ));
            }
        }
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        let last = t.last;
        self.storage.push_back(t);
        self.open_tail = if last { 0 } else { self.open_tail + 1 };
        self.open_tail = self.open_tail.min(self.storage.len());
        self.pushed += 1;
        Ok(())
    }

    /// Number of start indices that currently admit a complete `n`-step window.
    /// Valid starts are exactly the logical indices `0..valid_starts(n)`.
    pub fn valid_starts(&self, n: usize) -> usize {
        let blocked = self.open_tail.min(n.saturating_sub(1));
        self.storage.len() - blocked
    }

    pub fn window(&self, start: usize, n: usize, gamma: f64) -> Result<NStepWindow> {
        if n == 0 {
            return Err(LabError::Config("n-step must be >= 1".into()));
        }
        if start >= self.valid_starts(n) {
            return Err(LabError::NotReady(format!(
                "no complete {n}-step window at index {start}"
            )));
        }
        let mut reward = 0.0;
        let mut disc = 1.0;
        let mut len = 0;
        let mut bootstrap = 1.0;
        for j in 0..n {
            let t = &self.storage[start + j];
            reward += disc * t.reward as f64;
            disc *= gamma;
            len += 1;
            if t.last {
                bootstrap = t.discount as f64;
                break;
            }
        }
        Ok(NStepWindow {
            start,
            len,
            reward,
            discount: disc * bootstrap,
            next_index: start + len - 1,
        })
    }

    /// Uniform draws over valid start indices.
    pub fn sample_starts<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let valid = self.valid_starts(n);
        if valid == 0 {
            return Err(LabError::NotReady(format!(
                "{} stored transitions, none starts a complete {n}-step window",
                self.len()
            )));
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..valid)).collect())
    }

    pub fn sample_nstep<T: Real, R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Batch<T>> {
        let starts = self.sample_starts(batch_size, n, rng)?;
        self.assemble(&starts, n, gamma)
    }

    /// Builds a batch from explicit start indices.
    pub fn assemble<T: Real>(&self, starts: &[usize], n: usize, gamma: f64) -> Result<Batch<T>> {
        let first = self
            .storage
            .front()
            .ok_or_else(|| LabError::NotReady("empty buffer".into()))?;
        let [c, h, w] = first.obs.shape();
        let a = first.action.len();
        let b = starts.len();
        let px = c * h * w;
        let mut obs = Vec::with_capacity(b * px);
        let mut next = Vec::with_capacity(b * px);
        let mut act = Vec::with_capacity(b * a);
        let mut rew = Vec::with_capacity(b);
        let mut disc = Vec::with_capacity(b);
        for &s in starts {
            let win = self.window(s, n, gamma)?;
            let t = &self.storage[s];
            obs.extend(t.obs.pixels().iter().map(|&p| to_unit::<T>(p)));
            act.extend(t.action.iter().map(|&x| T::lit(x as f64)));
            next.extend(
                self.storage[win.next_index]
                    .next_obs
                    .pixels()
                    .iter()
                    .map(|&p| to_unit::<T>(p)),
            );
            rew.push(T::lit(win.reward));
            disc.push(T::lit(win.discount));
        }
        Ok(Batch {
            obs: Tensor::new(vec![b, c, h, w], obs)?,
            action: Tensor::new(vec![b, a], act)?,
            n_step_reward: Tensor::new(vec![b], rew)?,
            discount_n: Tensor::new(vec![b], disc)?,
            next_obs_n: Tensor::new(vec![b, c, h, w], next)?,
        })
    }

    /// Writes every stored transition to a flat little-endian file: a header
    /// (`RPLY`, version, count, C, H, W, action dim) followed by the records
    /// in insertion order, frames row-major.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(DUMP_MAGIC)?;
        let (shape, a) = match self.storage.front() {
            Some(t) => (t.obs.shape(), t.action.len()),
            None => ([0; 3], 0),
        };
        for v in [
            DUMP_VERSION,
            self.storage.len() as u32,
            shape[0] as u32,
            shape[1] as u32,
            shape[2] as u32,
            a as u32,
        ] {
            f.write_all(&v.to_le_bytes())?;
        }
        for t in &self.storage {
            f.write_all(t.obs.pixels())?;
            for x in &t.action {
                f.write_all(&x.to_le_bytes())?;
            }
            f.write_all(&t.reward.to_le_bytes())?;
            f.write_all(&t.discount.to_le_bytes())?;
            f.write_all(&[t.last as u8])?;
            f.write_all(t.next_obs.pixels())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_dump(path: &Path) -> Result<Vec<Transition>> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(LabError::Format("not a replay dump".into()));
        }
        let mut u = || -> Result<u32> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u()?;
        if version != DUMP_VERSION {
            return Err(LabError::Format(format!("unsupported dump version {version}")));
        }
        let count = u()? as usize;
        let shape = [u()? as usize, u()? as usize, u()? as usize];
        let a = u()? as usize;
        let px: usize = shape.iter().product();
        let mut out = Vec::with_capacity(count);
        let f32_at = |f: &mut BufReader<File>| -> Result<f32> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            Ok(f32::from_le_bytes(b))
        };
        for _ in 0..count {
            let mut obs = vec![0u8; px];
            f.read_exact(&mut obs)?;
            let action = (0..a).map(|_| f32_at(&mut f)).collect::<Result<Vec<_>>>()?;
            let reward = f32_at(&mut f)?;
            let discount = f32_at(&mut f)?;
            let mut last = [0u8; 1];
            f.read_exact(&mut last)?;
            let mut next = vec![0u8; px];
            f.read_exact(&mut next)?;
            out.push(Transition {
                obs: Observation::new(shape, obs)?,
                action,
                reward,
                discount,
                last: last[0] != 0,
                next_obs: Observation::new(shape, next)?,
            });
        }
        Ok(out)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"RPLY";
const DUMP_VERSION: u32 = 1;
