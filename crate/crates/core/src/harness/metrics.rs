//! Per-round metrics and their CSV form.
//!
//! Column order is fixed:
//!
//! ```text
//! round, cum_time_s, round_latency_s, test_acc, test_loss, mean_fi,
//! mean_level, train_loss,
//! client0_level, client0_latency_s, client0_u_n, client0_fi, client1_level, …
//! ```
//!
//! Clients that sat out a round have empty cells. `u_n` is empty for
//! non-adaptive strategies. Floats use Rust's shortest round-trip form.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    pub level: usize,
    pub latency_s: f64,
    pub tx_s: f64,
    pub compute_s: f64,
    pub u_n: Option<f64>,
    pub util: Option<f64>,
    pub te: f64,
    pub se: f64,
    /// Mean per-batch Fisher trace measured this round.
    pub fi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub cum_time_s: f64,
    pub round_latency_s: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub train_loss: Option<f64>,
    pub mean_fi: f64,
    pub mean_level: f64,
    /// Participants in ascending client order.
    pub clients: Vec<ClientRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub strategy: String,
    pub client_count: usize,
    pub rounds: Vec<RoundRecord>,
}

pub const FIXED_COLUMNS: [&str; 8] = [
    "round",
    "cum_time_s",
    "round_latency_s",
    "test_acc",
    "test_loss",
    "mean_fi",
    "mean_level",
    "train_loss",
];

pub const CLIENT_COLUMNS: [&str; 4] = ["level", "latency_s", "u_n", "fi"];

fn num(v: f64) -> String {
    format!("{v:?}")
}

impl MetricsLog {
    pub fn new(strategy: impl Into<String>, client_count: usize) -> Self {
        Self {
            strategy: strategy.into(),
            client_count,
            rounds: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for c in 0..self.client_count {
            for name in CLIENT_COLUMNS {
                cols.push(format!("client{c}_{name}"));
            }
        }
        cols
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.last().map(|r| r.test_acc)
    }

    /// Simulated time at the first round whose accuracy reaches `target`.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.rounds
            .iter()
            .find(|r| r.test_acc >= target)
            .map(|r| r.cum_time_s)
    }

    pub fn rounds_to_accuracy(&self, target: f64) -> Option<usize> {
        self.rounds
            .iter()
            .find(|r| r.test_acc >= target)
            .map(|r| r.round)
    }

    /// Mean selected level over all rounds and clients.
    pub fn mean_level(&self) -> f64 {
        let n = self.rounds.len().max(1) as f64;
        self.rounds.iter().map(|r| r.mean_level).sum::<f64>() / n
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rounds {
            let mut row = vec![
                r.round.to_string(),
                num(r.cum_time_s),
                num(r.round_latency_s),
                num(r.test_acc),
                num(r.test_loss),
                num(r.mean_fi),
                num(r.mean_level),
                r.train_loss.map(num).unwrap_or_default(),
            ];
            let mut by_client: Vec<Option<&ClientRecord>> = vec![None; self.client_count];
            for c in &r.clients {
                by_client[c.client] = Some(c);
            }
            for c in by_client {
                match c {
                    Some(c) => {
                        row.push(c.level.to_string());
                        row.push(num(c.latency_s));
                        row.push(c.u_n.map(num).unwrap_or_default());
                        row.push(num(c.fi));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), CLIENT_COLUMNS.len())),
                }
            }
            w.write_record(row)?;
        }
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }
}
