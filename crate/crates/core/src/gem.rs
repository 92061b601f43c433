//! Global energy manager: chip-level arbitration of execution requests by
//! battery and temperature class, plus the shared energy-estimate ledger.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{BatteryClass, TempClass};

#[derive(Debug, Error, PartialEq)]
pub enum GemError {
    /// An operation named an IP that was never registered.
    #[error("unknown ip {0:?}")]
    UnknownIp(String),
    /// Estimates are joules and must be non-negative.
    #[error("negative energy estimate {0}J")]
    NegativeEnergy(f64),
}

/// One IP as the arbiter sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpRegistration {
    pub ip_id: String,
    /// Fixed rank, 1 = most important. Used only under scarcity.
    pub static_priority: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    /// Largest static priority still served when the battery runs low.
    pub priority_threshold: u32,
}

impl Default for GemConfig {
    fn default() -> GemConfig {
        GemConfig { priority_threshold: 2 }
    }
}

/// Outcome of one arbitration round over the current requesters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GemDecision {
    /// Requesters allowed to run their task now.
    pub enabled: BTreeSet<String>,
    /// Requesters denied and sent to shallow sleep instead.
    pub forced_sleep1: BTreeSet<String>,
    /// Whether the fan must be on after this round.
    pub fan_on: bool,
}

/// The chip-level arbiter: grants or denies concurrent execution requests
/// and keeps the ledger of posted per-IP energy estimates.
#[derive(Debug, Clone)]
pub struct Gem {
    pub config: GemConfig,
    ips: BTreeMap<String, IpRegistration>,
    estimates: BTreeMap<String, f64>,
}

impl Gem {
    pub fn new(config: GemConfig, registrations: Vec<IpRegistration>) -> Result<Gem, GemError> {
        let mut ips = BTreeMap::new();
        for reg in registrations {
            if ips.insert(reg.ip_id.clone(), reg).is_some() {
                // Same id twice: the second registration would silently win.
                return Err(GemError::UnknownIp("duplicate registration".into()));
            }
        }
        Ok(Gem { config, ips, estimates: BTreeMap::new() })
    }

    pub fn is_registered(&self, ip_id: &str) -> bool {
        self.ips.contains_key(ip_id)
    }

    /// Splits `requesters` into enabled and denied sets for the current
    /// environment classes and reports the required fan state.
    ///
    /// Comfortable battery at safe temperature serves everyone; a low
    /// battery serves only IPs at or under the priority threshold; high
    /// temperature serves no one and turns the fan on.
    pub fn arbitrate(
        &self,
        battery_class: BatteryClass,
        temp_class: TempClass,
        requesters: &[&str],
    ) -> Result<GemDecision, GemError> {
        let mut enabled = BTreeSet::new();
        let mut forced_sleep1 = BTreeSet::new();
        let scarce = matches!(battery_class, BatteryClass::Empty | BatteryClass::Low);
        let hot = temp_class == TempClass::High;
        for &ip_id in requesters {
            let reg = self
                .ips
                .get(ip_id)
                .ok_or_else(|| GemError::UnknownIp(ip_id.into()))?;
            let grant = if hot {
                false
            } else if scarce {
                reg.static_priority <= self.config.priority_threshold
            } else {
                true
            };
            if grant {
                enabled.insert(ip_id.to_string());
            } else {
                forced_sleep1.insert(ip_id.to_string());
            }
        }
        Ok(GemDecision { enabled, forced_sleep1, fan_on: hot })
    }

    /// Records the energy an IP expects its granted task to draw.
    pub fn post_estimate(&mut self, ip_id: &str, energy: f64) -> Result<(), GemError> {
        if !self.is_registered(ip_id) {
            return Err(GemError::UnknownIp(ip_id.into()));
        }
        // NaN estimates are rejected along with negative ones.
        if energy.is_nan() || energy < 0.0 {
            return Err(GemError::NegativeEnergy(energy));
        }
        self.estimates.insert(ip_id.to_string(), energy);
        Ok(())
    }

    /// Drops an IP's posted estimate. A no-op if none is posted.
    pub fn clear_estimate(&mut self, ip_id: &str) -> Result<(), GemError> {
        if !self.is_registered(ip_id) {
            return Err(GemError::UnknownIp(ip_id.into()));
        }
        self.estimates.remove(ip_id);
        Ok(())
    }

    /// Joules currently posted by every IP except `ip_id`; what that IP's
    /// forecast should count as concurrent drain.
    pub fn others_energy(&self, ip_id: &str) -> Result<f64, GemError> {
        if !self.is_registered(ip_id) {
            return Err(GemError::UnknownIp(ip_id.into()));
        }
        Ok(self
            .estimates
            .iter()
            .filter(|(id, _)| id.as_str() != ip_id)
            .map(|(_, e)| e)
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gem() -> Gem {
        Gem::new(
            GemConfig::default(),
            vec![
                IpRegistration { ip_id: "cpu".into(), static_priority: 1 },
                IpRegistration { ip_id: "gpu".into(), static_priority: 2 },
                IpRegistration { ip_id: "dsp".into(), static_priority: 3 },
                IpRegistration { ip_id: "io".into(), static_priority: 4 },
            ],
        )
        .unwrap()
    }

    fn names(set: &BTreeSet<String>) -> Vec<&str> {
        set.iter().map(String::as_str).collect()
    }

    #[test]
    fn comfortable_battery_serves_everyone() {
        let d = gem()
            .arbitrate(BatteryClass::High, TempClass::Low, &["cpu", "gpu", "dsp", "io"])
            .unwrap();
        assert_eq!(names(&d.enabled), vec!["cpu", "dsp", "gpu", "io"]);
        assert!(d.forced_sleep1.is_empty());
        assert!(!d.fan_on);
    }

    #[test]
    fn low_battery_serves_only_under_threshold() {
        let d = gem()
            .arbitrate(BatteryClass::Low, TempClass::Medium, &["cpu", "gpu", "dsp", "io"])
            .unwrap();
        assert_eq!(names(&d.enabled), vec!["cpu", "gpu"]);
        assert_eq!(names(&d.forced_sleep1), vec!["dsp", "io"]);
        assert!(!d.fan_on);
    }

    #[test]
    fn hot_chip_serves_no_one_and_starts_the_fan() {
        let d = gem()
            .arbitrate(BatteryClass::Full, TempClass::High, &["cpu", "io"])
            .unwrap();
        assert!(d.enabled.is_empty());
        assert_eq!(names(&d.forced_sleep1), vec!["cpu", "io"]);
        assert!(d.fan_on);
    }

    #[test]
    fn power_supply_counts_as_comfortable() {
        let d = gem()
            .arbitrate(BatteryClass::PowerSupply, TempClass::Medium, &["io"])
            .unwrap();
        assert_eq!(names(&d.enabled), vec!["io"]);
    }

    #[test]
    fn every_class_pair_lands_in_exactly_one_branch() {
        let g = gem();
        for b in BatteryClass::ALL {
            for t in TempClass::ALL {
                let d = g.arbitrate(b, t, &["cpu", "io"]).unwrap();
                let scarce = matches!(b, BatteryClass::Empty | BatteryClass::Low);
                match (t == TempClass::High, scarce) {
                    (true, _) => {
                        assert!(d.enabled.is_empty());
                        assert_eq!(d.forced_sleep1.len(), 2);
                        assert!(d.fan_on);
                    }
                    (false, true) => {
                        assert_eq!(names(&d.enabled), vec!["cpu"]);
                        assert_eq!(names(&d.forced_sleep1), vec!["io"]);
                        assert!(!d.fan_on);
                    }
                    (false, false) => {
                        assert_eq!(d.enabled.len(), 2);
                        assert!(d.forced_sleep1.is_empty());
                        assert!(!d.fan_on);
                    }
                }
            }
        }
    }

    #[test]
    fn fan_runs_only_when_hot() {
        let g = gem();
        for b in BatteryClass::ALL {
            for t in TempClass::ALL {
                let d = g.arbitrate(b, t, &[]).unwrap();
                assert_eq!(d.fan_on, t == TempClass::High);
            }
        }
    }

    #[test]
    fn unknown_requester_is_an_error() {
        assert_eq!(
            gem().arbitrate(BatteryClass::Full, TempClass::Low, &["ghost"]),
            Err(GemError::UnknownIp("ghost".into()))
        );
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let err = Gem::new(
            GemConfig::default(),
            vec![
                IpRegistration { ip_id: "cpu".into(), static_priority: 1 },
                IpRegistration { ip_id: "cpu".into(), static_priority: 2 },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, GemError::UnknownIp(_)));
    }

    #[test]
    fn ledger_sums_everyone_else() {
        let mut g = gem();
        g.post_estimate("cpu", 2.0).unwrap();
        g.post_estimate("gpu", 0.5).unwrap();
        assert_eq!(g.others_energy("dsp").unwrap(), 2.5);
        assert_eq!(g.others_energy("cpu").unwrap(), 0.5);
        g.clear_estimate("cpu").unwrap();
        assert_eq!(g.others_energy("dsp").unwrap(), 0.5);
    }

    #[test]
    fn clearing_an_absent_estimate_is_a_no_op() {
        let mut g = gem();
        g.clear_estimate("cpu").unwrap();
        g.clear_estimate("cpu").unwrap();
        assert_eq!(g.others_energy("gpu").unwrap(), 0.0);
    }

    #[test]
    fn ledger_rejects_bad_posts() {
        let mut g = gem();
        assert_eq!(
            g.post_estimate("ghost", 1.0),
            Err(GemError::UnknownIp("ghost".into()))
        );
        assert_eq!(g.post_estimate("cpu", -0.1), Err(GemError::NegativeEnergy(-0.1)));
        assert!(g.post_estimate("cpu", f64::NAN).is_err());
    }

    #[test]
    fn reposting_replaces_rather_than_accumulates() {
        let mut g = gem();
        g.post_estimate("cpu", 2.0).unwrap();
        g.post_estimate("cpu", 3.0).unwrap();
        assert_eq!(g.others_energy("gpu").unwrap(), 3.0);
    }

    proptest! {
        // Arbitration partitions the requesters: every requester lands in
        // exactly one of the two sets, and nobody else appears.
        #[test]
        fn arbitration_partitions_requesters(
            mask in proptest::collection::vec(proptest::bool::ANY, 4),
            bi in 0usize..6,
            ti in 0usize..3,
        ) {
            let all = ["cpu", "gpu", "dsp", "io"];
            let requesters: Vec<&str> = all
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(&n, _)| n)
                .collect();
            let d = gem()
                .arbitrate(BatteryClass::ALL[bi], TempClass::ALL[ti], &requesters)
                .unwrap();
            prop_assert_eq!(d.enabled.len() + d.forced_sleep1.len(), requesters.len());
            prop_assert!(d.enabled.is_disjoint(&d.forced_sleep1));
            for r in &requesters {
                prop_assert!(
                    d.enabled.contains(*r) ^ d.forced_sleep1.contains(*r)
                );
            }
        }
    }
}
