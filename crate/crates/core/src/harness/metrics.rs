//! Per-run metrics CSV.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::Result;

pub const COLUMNS: [&str; 15] = [
    "step",
    "episode",
    "episode_return",
    "eval_return",
    "critic_loss",
    "actor_loss",
    "phi_encoder",
    "phi_actor",
    "phi_critic",
    "rr_current",
    "norm_encoder",
    "norm_actor",
    "norm_critic",
    "updates",
    "event",
];

/// One CSV line. Absent values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub episode_return: Option<f64>,
    pub eval_return: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub phi_encoder: Option<f64>,
    pub phi_actor: Option<f64>,
    pub phi_critic: Option<f64>,
    pub rr_current: f64,
    pub norm_encoder: Option<f64>,
    pub norm_actor: Option<f64>,
    pub norm_critic: Option<f64>,
    pub updates: u64,
    pub events: Vec<String>,
}

impl MetricsRow {
    pub fn has_payload(&self) -> bool {
        self.episode_return.is_some()
            || self.eval_return.is_some()
            || self.phi_critic.is_some()
            || !self.events.is_empty()
    }

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.filter(|x| x.is_finite()).map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.step.to_string(),
            self.episode.to_string(),
            opt(self.episode_return),
            opt(self.eval_return),
            opt(self.critic_loss),
            opt(self.actor_loss),
            opt(self.phi_encoder),
            opt(self.phi_actor),
            opt(self.phi_critic),
            opt(Some(self.rr_current)),
            opt(self.norm_encoder),
            opt(self.norm_actor),
            opt(self.norm_critic),
            self.updates.to_string(),
            self.events.join(";"),
        ]
    }
}

pub struct MetricsWriter {
    w: csv::Writer<BufWriter<File>>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncating) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(COLUMNS)?;
        w.flush()?;
        Ok(Self { w, last_step: None })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(prev) = self.last_step {
            if row.step <= prev {
                return Err(crate::LabError::Contract(format!(
                    "metrics step {} does not follow {prev}",
                    row.step
                )));
            }
        }
        self.w.write_record(row.fields())?;
        self.last_step = Some(row.step);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// A metrics file read back as named columns of optional numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// `(step, value)` pairs where the column is non-empty.
    pub fn series(&self, name: &str) -> Option<Vec<(f64, f64)>> {
        let s = self.column_index("step")?;
        let c = self.column_index(name)?;
        Some(
            self.rows
                .iter()
                .filter_map(|r| Some((r[s].parse().ok()?, r[c].parse().ok()?)))
                .collect(),
        )
    }
}
