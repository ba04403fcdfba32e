//! Client-local subnetwork selection.
//!
//! The selection pipeline turns a client's recent Fisher traces and its
//! current system conditions into a size level:
//!
//! ```text
//! TE  = training efficiency from the Fisher window
//! SE  = T / (T_tx + T_compute)          for the smallest subnetwork
//! U   = TE · SE^β
//! u_n = min(U / U_th, 1)
//! p   = quantize(u_n)                    level 1 when u_n ≥ (P−1)/P
//! p'  = max(p, cap)                      never larger than the device allows
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherHistory;
use crate::subnet::LevelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    /// Trade-off exponent on system efficiency.
    pub beta: f64,
    /// Preferred round duration in seconds.
    pub round_seconds: f64,
    /// Utility at which the normalized utility saturates.
    pub u_threshold: f64,
    pub levels: LevelSpec,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            round_seconds: 60.0,
            u_threshold: 30.0,
            levels: LevelSpec::default(),
        }
    }
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta {} must be ≥ 0",
                self.beta
            )));
        }
        if !(self.round_seconds > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "round duration {} must be > 0",
                self.round_seconds
            )));
        }
        if !(self.u_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "utility threshold {} must be > 0",
                self.u_threshold
            )));
        }
        self.levels.validate()
    }
}

/// Outcome of one client's selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub client: usize,
    pub level: usize,
    pub util: f64,
    pub u_n: f64,
    pub se: f64,
    pub te: f64,
}

/// `T / (T_tx + T_compute)` for the unit subnetwork.
pub fn system_efficiency(
    unit_tx_seconds: f64,
    unit_compute_seconds: f64,
    round_seconds: f64,
) -> Result<f64> {
    if !(unit_tx_seconds > 0.0 && unit_compute_seconds > 0.0 && round_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "system efficiency needs positive delays and duration, got tx={unit_tx_seconds} compute={unit_compute_seconds} T={round_seconds}"
        )));
    }
    Ok(round_seconds / (unit_tx_seconds + unit_compute_seconds))
}

/// `TE · SE^β`.
pub fn selection_utility(te: f64, se: f64, beta: f64) -> f64 {
    if te == 0.0 {
        return 0.0;
    }
    te * se.powf(beta)
}

pub fn normalize(util: f64, u_threshold: f64) -> Result<f64> {
    if !(u_threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "utility threshold {u_threshold} must be > 0"
        )));
    }
    Ok((util / u_threshold).clamp(0.0, 1.0))
}

/// Maps `u_n ∈ [0, 1]` to a level in `1..=P`.
///
/// Level `p` covers `[(P−p)/P, (P−p+1)/P)`, with level 1 closed at 1.
pub fn quantize(u_n: f64, levels: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&u_n) {
        return Err(Error::InvalidArgument(format!(
            "normalized utility {u_n} outside [0, 1]"
        )));
    }
    if levels == 0 {
        return Err(Error::InvalidLevelSpec("P must be ≥ 1".into()));
    }
    let p = levels as f64;
    // Compare against k/P directly rather than via floor(u·P), which can
    // misplace values sitting on a boundary.
    for level in 1..=levels {
        let lower = (p - level as f64) / p;
        if u_n >= lower {
            return Ok(level);
        }
    }
    Ok(levels)
}

/// Smaller of the proposed subnetwork and the device's largest supported one.
pub fn cap(level: usize, max_level: usize, levels: usize) -> Result<usize> {
    for v in [level, max_level] {
        if v == 0 || v > levels {
            return Err(Error::LevelOutOfRange {
                level: v,
                max: levels,
            });
        }
    }
    // higher index = smaller network
    Ok(level.max(max_level))
}

/// Inputs of one selection that come from outside the scheduler.
#[derive(Debug, Clone, Copy)]
pub struct ClientView {
    pub client: usize,
    pub cap_level: usize,
    /// Transmission delay of the level-`P` subnetwork this round.
    pub unit_tx_seconds: f64,
    /// Compute delay of the level-`P` subnetwork this round.
    pub unit_compute_seconds: f64,
}

/// How utilities enter the pipeline; the two ablations pin one factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UtilityTerms {
    #[default]
    Both,
    /// Training efficiency fixed at 1.
    SystemOnly,
    /// System efficiency fixed at 1.
    TrainingOnly,
}

/// Runs the full pipeline for one client.
///
/// With an empty Fisher window the client is in its bootstrap round and
/// trains at `bootstrap_level` (usually its cap).
pub fn select(
    view: &ClientView,
    history: &FisherHistory,
    round: usize,
    params: &SchedulerParams,
    terms: UtilityTerms,
    bootstrap_level: Option<usize>,
) -> Result<Selection> {
    let levels = params.levels.levels;
    let se_raw = system_efficiency(
        view.unit_tx_seconds,
        view.unit_compute_seconds,
        params.round_seconds,
    )?;
    let has_history = history.windowed(round).next().is_some();
    let (te, se) = match terms {
        UtilityTerms::Both => (history.training_efficiency(round), se_raw),
        UtilityTerms::SystemOnly => (1.0, se_raw),
        UtilityTerms::TrainingOnly => (history.training_efficiency(round), 1.0),
    };
    if !has_history && terms != UtilityTerms::SystemOnly {
        if let Some(boot) = bootstrap_level {
            let level = cap(boot, view.cap_level, levels)?;
            return Ok(Selection {
                client: view.client,
                level,
                util: f64::NAN,
                u_n: 1.0,
                se,
                te,
            });
        }
    }
    let util = selection_utility(te, se, params.beta);
    let u_n = normalize(util, params.u_threshold)?;
    let level = cap(quantize(u_n, levels)?, view.cap_level, levels)?;
    Ok(Selection {
        client: view.client,
        level,
        util,
        u_n,
        se,
        te,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_efficiency_cases() {
        assert_eq!(system_efficiency(25.0, 25.0, 100.0).unwrap(), 2.0);
        assert_eq!(system_efficiency(40.0, 60.0, 100.0).unwrap(), 1.0);
        // halving the rate doubles tx time; with compute ~0 SE halves
        let a = system_efficiency(1.0, 1e-12, 10.0).unwrap();
        let b = system_efficiency(2.0, 1e-12, 10.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-9);
        assert!(system_efficiency(0.0, 1.0, 1.0).is_err());
        assert!(system_efficiency(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn utility_cases() {
        assert_eq!(selection_utility(4.0, 2.0, 2.0), 16.0);
        assert_eq!(selection_utility(4.0, 2.0, 0.0), 4.0);
        assert_eq!(selection_utility(0.0, 1e9, 5.0), 0.0);
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(5.0, 10.0).unwrap(), 0.5);
        assert_eq!(normalize(20.0, 10.0).unwrap(), 1.0);
        assert_eq!(normalize(0.0, 10.0).unwrap(), 0.0);
        assert!(normalize(1.0, 0.0).is_err());
    }

    #[test]
    fn quantize_cases() {
        assert_eq!(quantize(0.85, 5).unwrap(), 1);
        assert_eq!(quantize(0.5, 5).unwrap(), 3);
        assert_eq!(quantize(0.0, 5).unwrap(), 5);
        assert_eq!(quantize(1.0, 5).unwrap(), 1);
        assert_eq!(quantize(0.8, 5).unwrap(), 1);
        assert_eq!(quantize(0.2, 5).unwrap(), 4);
        assert!(quantize(1.01, 5).is_err());
        assert!(quantize(-0.1, 5).is_err());
        assert_eq!(quantize(0.3, 1).unwrap(), 1);
    }

    #[test]
    fn cap_cases() {
        assert_eq!(cap(1, 3, 5).unwrap(), 3);
        assert_eq!(cap(4, 2, 5).unwrap(), 4);
        assert_eq!(cap(2, 1, 5).unwrap(), 2);
        assert!(cap(0, 1, 5).is_err());
        assert!(cap(1, 6, 5).is_err());
    }

    fn view(cap_level: usize) -> ClientView {
        ClientView {
            client: 0,
            cap_level,
            unit_tx_seconds: 1.0,
            unit_compute_seconds: 1.0,
        }
    }

    #[test]
    fn scripted_pipeline() {
        // TE=4 from one batch with FI=4; SE = 4/(1+1) = 2; β=2; U_th=20
        let mut h = FisherHistory::new(1, 10, 10).unwrap();
        h.record_round(1, vec![4.0]).unwrap();
        let params = SchedulerParams {
            beta: 2.0,
            round_seconds: 4.0,
            u_threshold: 20.0,
            levels: LevelSpec::new(5, 0.5).unwrap(),
        };
        let s = select(&view(2), &h, 2, &params, UtilityTerms::Both, Some(2)).unwrap();
        assert_eq!(s.te, 4.0);
        assert_eq!(s.se, 2.0);
        assert_eq!(s.util, 16.0);
        assert!((s.u_n - 0.8).abs() < 1e-15);
        assert_eq!(quantize(s.u_n, 5).unwrap(), 1);
        assert_eq!(s.level, 2);
    }

    #[test]
    fn zero_training_efficiency_selects_smallest() {
        let mut h = FisherHistory::new(1, 10, 10).unwrap();
        h.record_round(1, vec![0.0]).unwrap();
        let s = select(
            &view(1),
            &h,
            2,
            &SchedulerParams::default(),
            UtilityTerms::Both,
            Some(1),
        )
        .unwrap();
        assert_eq!(s.level, 5);
    }

    #[test]
    fn bootstrap_uses_cap() {
        let h = FisherHistory::new(1, 10, 10).unwrap();
        let s = select(
            &view(3),
            &h,
            1,
            &SchedulerParams::default(),
            UtilityTerms::Both,
            Some(1),
        )
        .unwrap();
        assert_eq!(s.level, 3);
        assert_eq!(s.u_n, 1.0);
    }

    #[test]
    fn high_utility_on_uncapped_client_gives_full_model() {
        let mut h = FisherHistory::new(1, 10, 10).unwrap();
        h.record_round(1, vec![1e6]).unwrap();
        let s = select(
            &view(1),
            &h,
            2,
            &SchedulerParams::default(),
            UtilityTerms::Both,
            Some(1),
        )
        .unwrap();
        assert_eq!(s.level, 1);
    }
}
