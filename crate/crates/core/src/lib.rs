//! A small visual reinforcement-learning laboratory for studying plasticity
//! loss: a from-scratch autodiff engine, pixel-rendered control tasks, a
//! DrQ-v2-style actor-critic agent, fraction-of-active-units probes, the usual
//! plasticity interventions and an adaptive replay-ratio controller, tied
//! together by a reproducible experiment harness.

pub mod error;
pub mod numerics;

pub use error::{LabError, Result};
pub mod envlab;
pub mod harness;
pub mod replay;
pub mod augment;
pub mod agent;
pub mod plasticity;
pub mod adaptive_rr;
