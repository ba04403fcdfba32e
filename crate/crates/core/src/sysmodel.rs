//! Simulated device fleet, per-round system dynamics and delay accounting.
//!
//! Rounds are synchronous: a round lasts as long as its slowest participant,
//! whose latency is upload time plus local compute time (plus download when
//! enabled). Server-side aggregation is free.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    A,
    B,
    C,
    D,
    E,
}

impl Tier {
    pub const ALL: [Tier; 5] = [Tier::A, Tier::B, Tier::C, Tier::D, Tier::E];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub tier: Tier,
    /// Sustained FLOP/s with no background load.
    pub base_speed: f64,
    /// Largest subnetwork the device can train, as a level index.
    pub max_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub devices_per_tier: usize,
    /// FLOP/s of the slowest tier (E).
    pub base_flops: f64,
    /// Speed multipliers for tiers A..E relative to `base_flops`.
    pub speed_ratios: [f64; 5],
    pub max_levels: [usize; 5],
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            devices_per_tier: 4,
            base_flops: 1.0e8,
            speed_ratios: [16.0, 8.0, 4.0, 2.0, 1.0],
            max_levels: [1, 2, 3, 4, 5],
        }
    }
}

impl FleetConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.devices_per_tier == 0 {
            return Err(Error::InvalidArgument("fleet is empty".into()));
        }
        if !(self.base_flops > 0.0) || self.speed_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidArgument(
                "device speeds must be positive".into(),
            ));
        }
        if self.speed_ratios.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "tier speeds must be nonincreasing from A to E".into(),
            ));
        }
        if self.max_levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "tier caps must be nondecreasing from A to E".into(),
            ));
        }
        if let Some(&bad) = self.max_levels.iter().find(|&&l| l == 0 || l > levels) {
            return Err(Error::LevelOutOfRange {
                level: bad,
                max: levels,
            });
        }
        Ok(())
    }
}

/// Client `i` belongs to tier `i / devices_per_tier`.
pub fn make_fleet(config: &FleetConfig) -> Result<Vec<DeviceProfile>> {
    if config.devices_per_tier == 0 {
        return Err(Error::InvalidArgument("fleet is empty".into()));
    }
    Ok(Tier::ALL
        .iter()
        .enumerate()
        .flat_map(|(t, &tier)| {
            std::iter::repeat_n(
                DeviceProfile {
                    tier,
                    base_speed: config.base_flops * config.speed_ratios[t],
                    max_level: config.max_levels[t],
                },
                config.devices_per_tier,
            )
        })
        .collect())
}

/// Link rates and background load for every (round, client).
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrace {
    rounds: usize,
    clients: usize,
    /// Row-major by round then client.
    link_bps: Vec<f64>,
    compute_multiplier: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub link_bps: f64,
    pub compute_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovConfig {
    /// WiFi, LTE, Bluetooth.
    pub link_rates_bps: Vec<f64>,
    pub link_stay: f64,
    pub fading: (f64, f64),
    /// Idle, moderate, heavy background load.
    pub compute_levels: Vec<f64>,
    pub compute_stay: f64,
    /// Start state for every client; `None` draws it uniformly.
    pub initial_link: Option<usize>,
    pub initial_compute: Option<usize>,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        Self {
            link_rates_bps: vec![80.0e6, 20.0e6, 10.0e6],
            link_stay: 0.8,
            fading: (0.7, 1.0),
            compute_levels: vec![1.0, 0.6, 0.3],
            compute_stay: 0.8,
            initial_link: None,
            initial_compute: None,
        }
    }
}

impl MarkovConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.link_rates_bps.is_empty() || self.link_rates_bps.iter().any(|&r| !(r > 0.0)) {
            errs.push("link rates must be positive and non-empty");
        }
        if self.compute_levels.is_empty()
            || self.compute_levels.iter().any(|&m| !(m > 0.0 && m <= 1.0))
        {
            errs.push("compute multipliers must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.link_stay) || !(0.0..=1.0).contains(&self.compute_stay) {
            errs.push("stay probabilities must lie in [0, 1]");
        }
        let (lo, hi) = self.fading;
        if !(lo > 0.0 && lo <= hi) {
            errs.push("fading band must satisfy 0 < lo ≤ hi");
        }
        if self
            .initial_link
            .is_some_and(|s| s >= self.link_rates_bps.len())
            || self
                .initial_compute
                .is_some_and(|s| s >= self.compute_levels.len())
        {
            errs.push("initial state out of range");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }
}

/// Stay with probability `stay`, otherwise jump to one of the other states
/// uniformly.
fn markov_step<R: Rng + ?Sized>(state: usize, states: usize, stay: f64, rng: &mut R) -> usize {
    if states == 1 || rng.random::<f64>() < stay {
        return state;
    }
    let j = rng.random_range(0..states - 1);
    if j >= state {
        j + 1
    } else {
        j
    }
}

/// Per-client Markov chains for link type and background load.
///
/// Each client has its own seeded stream so traces for a larger fleet extend
/// those of a smaller one.
pub fn gen_trace(
    clients: usize,
    rounds: usize,
    seed: u64,
    config: &MarkovConfig,
) -> Result<DynamicsTrace> {
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "trace needs at least one round".into(),
        ));
    }
    config.validate()?;
    let mut link_bps = vec![0.0; rounds * clients];
    let mut compute_multiplier = vec![0.0; rounds * clients];
    let nl = config.link_rates_bps.len();
    let nc = config.compute_levels.len();
    let (lo, hi) = config.fading;
    for c in 0..clients {
        let mut rng = seed::rng(seed, Stream::Trace, &[c as u64]);
        let mut link = config
            .initial_link
            .unwrap_or_else(|| rng.random_range(0..nl));
        let mut load = config
            .initial_compute
            .unwrap_or_else(|| rng.random_range(0..nc));
        for r in 0..rounds {
            if r > 0 {
                link = markov_step(link, nl, config.link_stay, &mut rng);
                load = markov_step(load, nc, config.compute_stay, &mut rng);
            }
            let fade = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            link_bps[r * clients + c] = config.link_rates_bps[link] * fade;
            compute_multiplier[r * clients + c] = config.compute_levels[load];
        }
    }
    Ok(DynamicsTrace {
        rounds,
        clients,
        link_bps,
        compute_multiplier,
    })
}

impl DynamicsTrace {
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// Conditions for 1-based `round`.
    pub fn at(&self, round: usize, client: usize) -> Result<TraceEntry> {
        if round == 0 || round > self.rounds || client >= self.clients {
            return Err(Error::InvalidArgument(format!(
                "trace has rounds 1..={} and clients 0..{}, asked for ({round}, {client})",
                self.rounds, self.clients
            )));
        }
        let i = (round - 1) * self.clients + client;
        Ok(TraceEntry {
            link_bps: self.link_bps[i],
            compute_multiplier: self.compute_multiplier[i],
        })
    }

    /// `round,client,link_bps,compute_multiplier` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "client", "link_bps", "compute_multiplier"])?;
        for r in 1..=self.rounds {
            for c in 0..self.clients {
                let e = self.at(r, c)?;
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    format!("{:?}", e.link_bps),
                    format!("{:?}", e.compute_multiplier),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if header != ["round", "client", "link_bps", "compute_multiplier"] {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_owned();
            let parse_err = |what: &str| bad(format!("row {}: bad {what}", line + 2));
            let round: usize = field(0).parse().map_err(|_| parse_err("round"))?;
            let client: usize = field(1).parse().map_err(|_| parse_err("client"))?;
            let link: f64 = field(2).parse().map_err(|_| parse_err("link_bps"))?;
            let mult: f64 = field(3)
                .parse()
                .map_err(|_| parse_err("compute_multiplier"))?;
            if !(link > 0.0) || !(mult > 0.0 && mult <= 1.0) {
                return Err(bad(format!(
                    "row {}: rate must be > 0 and multiplier in (0, 1]",
                    line + 2
                )));
            }
            rows.push((round, client, link, mult));
        }
        let rounds = rows.iter().map(|r| r.0).max().unwrap_or(0);
        let clients = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rounds == 0 || rows.iter().any(|r| r.0 == 0) {
            return Err(bad("rounds are numbered from 1".into()));
        }
        let mut link_bps = vec![f64::NAN; rounds * clients];
        let mut compute_multiplier = vec![f64::NAN; rounds * clients];
        for (r, c, l, m) in rows {
            let i = (r - 1) * clients + c;
            if !link_bps[i].is_nan() {
                return Err(bad(format!("duplicate row for round {r}, client {c}")));
            }
            link_bps[i] = l;
            compute_multiplier[i] = m;
        }
        if link_bps.iter().any(|v| v.is_nan()) {
            return Err(bad(format!(
                "missing rows: expected every client 0..{clients} in every round 1..={rounds}"
            )));
        }
        Ok(Self {
            rounds,
            clients,
            link_bps,
            compute_multiplier,
        })
    }
}

/// Transmission and compute delay of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub tx_seconds: f64,
    pub compute_seconds: f64,
}

impl CostEstimate {
    pub fn total(&self) -> f64 {
        self.tx_seconds + self.compute_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    /// Wire size of one parameter.
    pub bits_per_param: f64,
    /// Also charge the download of the submodel at the same rate.
    pub include_downlink: bool,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            bits_per_param: 32.0,
            include_downlink: false,
        }
    }
}

/// Seconds to send `param_count` parameters at `rate_bps`.
pub fn tx_delay(param_count: u64, rate_bps: f64, cost: &CostConfig) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "link rate {rate_bps} must be > 0"
        )));
    }
    let bits = cost.bits_per_param * param_count as f64;
    let trips = if cost.include_downlink { 2.0 } else { 1.0 };
    Ok(trips * bits / rate_bps)
}

/// `local_steps · batch_size · flops_per_example / (speed · multiplier)`.
pub fn compute_delay(
    flops_per_example: u64,
    local_steps: usize,
    batch_size: usize,
    base_speed: f64,
    multiplier: f64,
) -> Result<f64> {
    if !(base_speed > 0.0 && multiplier > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "compute speed {base_speed}×{multiplier} must be > 0"
        )));
    }
    Ok(
        local_steps as f64 * batch_size as f64 * flops_per_example as f64
            / (base_speed * multiplier),
    )
}

/// Delays for a subnetwork of the given size on `device` under `entry`.
pub fn estimate(
    param_count: u64,
    flops_per_example: u64,
    local_steps: usize,
    batch_size: usize,
    device: &DeviceProfile,
    entry: &TraceEntry,
    cost: &CostConfig,
) -> Result<CostEstimate> {
    Ok(CostEstimate {
        tx_seconds: tx_delay(param_count, entry.link_bps, cost)?,
        compute_seconds: compute_delay(
            flops_per_example,
            local_steps,
            batch_size,
            device.base_speed,
            entry.compute_multiplier,
        )?,
    })
}

/// Synchronous round: the slowest participant sets the pace.
pub fn round_latency(client_latencies: &[f64]) -> Result<f64> {
    if client_latencies.is_empty() {
        return Err(Error::InvalidArgument("round has no participants".into()));
    }
    Ok(client_latencies
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fleet() {
        let fleet = make_fleet(&FleetConfig::default()).unwrap();
        assert_eq!(fleet.len(), 20);
        for tier in Tier::ALL {
            assert_eq!(fleet.iter().filter(|d| d.tier == tier).count(), 4);
        }
        assert_eq!(fleet[0].max_level, 1);
        assert_eq!(fleet[19].max_level, 5);
        assert_eq!(fleet[0].base_speed / fleet[19].base_speed, 16.0);
        FleetConfig::default().validate(5).unwrap();
        let empty = FleetConfig {
            devices_per_tier: 0,
            ..FleetConfig::default()
        };
        assert!(make_fleet(&empty).is_err());
    }

    #[test]
    fn sticky_wifi_trace() {
        let cfg = MarkovConfig {
            link_stay: 1.0,
            initial_link: Some(0),
            ..MarkovConfig::default()
        };
        let t = gen_trace(3, 50, 1, &cfg).unwrap();
        for r in 1..=50 {
            for c in 0..3 {
                let e = t.at(r, c).unwrap();
                assert!((56.0e6..=80.0e6).contains(&e.link_bps));
            }
        }
        assert_eq!(t, gen_trace(3, 50, 1, &cfg).unwrap());
        assert_ne!(t, gen_trace(3, 50, 2, &cfg).unwrap());
        assert!(gen_trace(3, 0, 1, &cfg).is_err());
        assert!(t.at(0, 0).is_err());
        assert!(t.at(51, 0).is_err());
    }

    #[test]
    fn delay_arithmetic() {
        let cost = CostConfig::default();
        assert!((tx_delay(1_000_000, 80e6, &cost).unwrap() - 0.4).abs() < 1e-12);
        assert!((tx_delay(1_000_000, 10e6, &cost).unwrap() - 3.2).abs() < 1e-12);
        assert!(tx_delay(1, 0.0, &cost).is_err());
        let down = CostConfig {
            include_downlink: true,
            ..cost
        };
        assert!((tx_delay(1_000_000, 80e6, &down).unwrap() - 0.8).abs() < 1e-12);

        assert!((compute_delay(336, 100, 32, 1e6, 1.0).unwrap() - 1.0752).abs() < 1e-12);
        let full = compute_delay(336, 100, 32, 1e6, 1.0).unwrap();
        assert_eq!(compute_delay(336, 100, 32, 1e6, 0.5).unwrap(), 2.0 * full);
        assert_eq!(
            compute_delay(336, 100, 32, 1e6 / 16.0, 1.0).unwrap(),
            16.0 * full
        );
        assert!(compute_delay(336, 100, 32, 0.0, 1.0).is_err());
    }

    #[test]
    fn latency_is_the_max() {
        assert_eq!(round_latency(&[3.0]).unwrap(), 3.0);
        assert_eq!(round_latency(&[1.0, 5.0]).unwrap(), 5.0);
        assert!(round_latency(&[]).is_err());
    }

    #[test]
    fn trace_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = gen_trace(4, 6, 3, &MarkovConfig::default()).unwrap();
        t.write_csv(&path).unwrap();
        assert_eq!(DynamicsTrace::read_csv(&path).unwrap(), t);

        std::fs::write(
            &path,
            "round,client,link_bps,compute_multiplier\n1,0,1e6,1.0\n1,1,1e6,1.0\n2,0,1e6,1.0\n",
        )
        .unwrap();
        assert!(DynamicsTrace::read_csv(&path)
            .unwrap_err()
            .to_string()
            .contains("missing"));
        std::fs::write(&path, "r,c,l,m\n").unwrap();
        assert!(DynamicsTrace::read_csv(&path).is_err());
    }
}
