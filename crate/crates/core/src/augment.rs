//! Random-shift image augmentation and its on/off schedule.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, LabError, Result};
use crate::numerics::{Real, Tensor};

/// A `step:on|off` schedule entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggle {
    pub step: u64,
    pub on: bool,
}

impl FromStr for Toggle {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Config(format!("bad DA toggle '{s}', expected 'step:on|off'"));
        let (step, state) = s.split_once(':').ok_or_else(bad)?;
        let step = step.trim().parse().map_err(|_| bad())?;
        let on = match state.trim() {
            "on" => true,
            "off" => false,
            _ => return Err(bad()),
        };
        Ok(Toggle { step, on })
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.step, if self.on { "on" } else { "off" })
    }
}

impl Serialize for Toggle {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Toggle {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftAugmentConfig {
    /// Replicate padding in pixels; `None` picks [`default_pad`] for the frame size.
    pub pad: Option<usize>,
    pub enabled: bool,
    pub schedule: Vec<Toggle>,
}

impl Default for ShiftAugmentConfig {
    fn default() -> Self {
        Self {
            pad: None,
            enabled: true,
            schedule: Vec::new(),
        }
    }
}

impl ShiftAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(LabError::Config(
                "DA schedule steps must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn pad_for(&self, frame_size: usize) -> usize {
        self.pad.unwrap_or_else(|| default_pad(frame_size))
    }
}

/// ±4 px at 84 px, scaled to the frame size.
pub fn default_pad(frame_size: usize) -> usize {
    (frame_size as f64 * 4.0 / 84.0).round() as usize
}

/// Whether augmentation is on at `step`: the last toggle at or before it wins.
pub fn da_active(cfg: &ShiftAugmentConfig, step: u64) -> bool {
    cfg.schedule
        .iter()
        .take_while(|t| t.step <= step)
        .last()
        .map_or(cfg.enabled, |t| t.on)
}

/// Replicate-pads each image by `pad` and crops an `H × W` window at an offset
/// drawn uniformly from `[0, 2·pad]²`, independently per image.
pub fn random_shift<T: Real, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    pad: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let b = batch.shape().first().copied().unwrap_or(0);
    let offsets: Vec<(usize, usize)> = (0..b)
        .map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad)))
        .collect();
    shift_with_offsets(batch, pad, &offsets)
}

/// [`random_shift`] with explicit `(dy, dx)` crop offsets into the padded image.
pub fn shift_with_offsets<T: Real>(
    batch: &Tensor<T>,
    pad: usize,
    offsets: &[(usize, usize)],
) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 {
        return shape_err(format!("random_shift expects [B,C,H,W], got {s:?}"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if 2 * pad > h.min(w) {
        return shape_err(format!("pad {pad} exceeds half of {h}x{w}"));
    }
    if offsets.len() != b {
        return shape_err("one offset pair per image required");
    }
    if pad == 0 {
        return Ok(batch.clone());
    }
    let src = batch.data();
    let mut out = vec![T::zero(); src.len()];
    let plane = h * w;
    for (i, &(dy, dx)) in offsets.iter().enumerate() {
        if dy > 2 * pad || dx > 2 * pad {
            return shape_err(format!("offset ({dy},{dx}) outside [0, {}]", 2 * pad));
        }
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for y in 0..h {
                // padded row y+dy maps back to source row y+dy-pad, clamped
                let sy = (y + dy).saturating_sub(pad).min(h - 1);
                let srow = &src[base + sy * w..base + (sy + 1) * w];
                let drow = &mut out[base + y * w..base + (y + 1) * w];
                for (x, d) in drow.iter_mut().enumerate() {
                    let sx = (x + dx).saturating_sub(pad).min(w - 1);
                    *d = srow[sx];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
