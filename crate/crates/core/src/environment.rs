//! Shared environment of the chip: the energy source (battery or mains), a
//! lumped-RC thermal node, and the coarse classification of both into the
//! symbolic classes the energy managers reason over.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    /// `drain` was asked to remove a negative amount of energy.
    #[error("cannot drain negative energy ({0} J)")]
    NegativeEnergy(f64),
    /// An explicit-Euler step larger than the stability bound was requested.
    #[error("temperature step dt = {dt}s exceeds the stability bound {bound}s")]
    UnstableStep { dt: f64, bound: f64 },
    /// A negative time step was requested.
    #[error("temperature step dt = {0}s is negative")]
    NegativeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSource {
    /// Finite energy store; draining reduces the charge.
    Battery,
    /// Mains supply; charge never changes and classification is pinned.
    PowerSupply,
}

/// Energy store of the system, tracked in joules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub capacity: f64,
    pub charge: f64,
    pub source: PowerSource,
}

impl Battery {
    /// Removes `energy` joules. On battery the charge clamps at zero; on a
    /// power supply the charge is untouched.
    pub fn drain(&self, energy: f64) -> Result<Battery, EnvError> {
        if energy < 0.0 || energy.is_nan() {
            return Err(EnvError::NegativeEnergy(energy));
        }
        match self.source {
            PowerSource::PowerSupply => Ok(*self),
            PowerSource::Battery => Ok(Battery {
                charge: (self.charge - energy).max(0.0),
                ..*self
            }),
        }
    }

    /// Remaining charge as a fraction of capacity.
    pub fn fraction(&self) -> f64 {
        self.charge / self.capacity
    }
}

/// Battery charge classes, coarsest view first-match rules operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BatteryClass {
    Empty,
    Low,
    Medium,
    High,
    Full,
    /// Mains-powered; rules treat this as at least Full.
    PowerSupply,
}

impl BatteryClass {
    pub const ALL: [BatteryClass; 6] = [
        BatteryClass::Empty,
        BatteryClass::Low,
        BatteryClass::Medium,
        BatteryClass::High,
        BatteryClass::Full,
        BatteryClass::PowerSupply,
    ];

    /// Short symbol used in rule tables.
    pub fn symbol(self) -> &'static str {
        match self {
            BatteryClass::Empty => "E",
            BatteryClass::Low => "L",
            BatteryClass::Medium => "M",
            BatteryClass::High => "H",
            BatteryClass::Full => "F",
            BatteryClass::PowerSupply => "PS",
        }
    }

    pub fn parse_symbol(s: &str) -> Option<BatteryClass> {
        BatteryClass::ALL.into_iter().find(|c| c.symbol() == s)
    }
}

impl fmt::Display for BatteryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Chip temperature classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TempClass {
    Low,
    Medium,
    High,
}

impl TempClass {
    pub const ALL: [TempClass; 3] = [TempClass::Low, TempClass::Medium, TempClass::High];

    pub fn symbol(self) -> &'static str {
        match self {
            TempClass::Low => "L",
            TempClass::Medium => "M",
            TempClass::High => "H",
        }
    }

    pub fn parse_symbol(s: &str) -> Option<TempClass> {
        TempClass::ALL.into_iter().find(|c| c.symbol() == s)
    }
}

impl fmt::Display for TempClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Class boundaries for battery fraction and temperature.
///
/// Battery bounds split [0, 1] into Empty/Low/Medium/High/Full with
/// half-open intervals `[lo, hi)`; the top interval is closed. Temperature
/// bounds split degrees Celsius into Low/Medium/High the same way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub battery_bounds: [f64; 4],
    pub temp_bounds: [f64; 2],
}

impl Default for ClassThresholds {
    fn default() -> Self {
        ClassThresholds {
            battery_bounds: [0.05, 0.25, 0.50, 0.80],
            temp_bounds: [60.0, 85.0],
        }
    }
}

impl ClassThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let b = self.battery_bounds;
        if !(0.0 < b[0] && b[0] < b[1] && b[1] < b[2] && b[2] < b[3] && b[3] < 1.0) {
            return Err(format!(
                "battery_bounds must be strictly ascending inside (0, 1), got {b:?}"
            ));
        }
        let t = self.temp_bounds;
        if !(t[0].is_finite() && t[1].is_finite() && t[0] < t[1]) {
            return Err(format!("temp_bounds must be ascending and finite, got {t:?}"));
        }
        Ok(())
    }
}

/// Maps the battery to its symbolic class. A mains-powered source always
/// classifies as [`BatteryClass::PowerSupply`].
pub fn classify_battery(battery: &Battery, thresholds: &ClassThresholds) -> BatteryClass {
    if battery.source == PowerSource::PowerSupply {
        return BatteryClass::PowerSupply;
    }
    let f = battery.fraction();
    let b = thresholds.battery_bounds;
    if f < b[0] {
        BatteryClass::Empty
    } else if f < b[1] {
        BatteryClass::Low
    } else if f < b[2] {
        BatteryClass::Medium
    } else if f < b[3] {
        BatteryClass::High
    } else {
        BatteryClass::Full
    }
}

/// Single lumped-RC thermal node for the whole chip.
///
/// `d(temperature)/dt = power/c_th - (temperature - ambient)/(r_th_eff * c_th)`
/// with `r_th_eff = r_th * fan_factor` while the fan runs, integrated with
/// explicit Euler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalNode {
    /// Current junction temperature, degrees Celsius.
    pub temperature: f64,
    pub ambient: f64,
    /// Thermal resistance to ambient, K/W.
    pub r_th: f64,
    /// Thermal capacitance, J/K.
    pub c_th: f64,
    /// Multiplier applied to `r_th` while the fan runs, in (0, 1].
    pub fan_factor: f64,
    #[serde(default)]
    pub fan_on: bool,
}

impl ThermalNode {
    pub fn r_th_eff(&self) -> f64 {
        if self.fan_on {
            self.r_th * self.fan_factor
        } else {
            self.r_th
        }
    }

    /// Largest explicit-Euler step the node accepts: `c_th * r_th_eff / 2`.
    pub fn max_stable_dt(&self) -> f64 {
        self.c_th * self.r_th_eff() / 2.0
    }

    /// Advances the node by `dt` seconds under constant `power` watts.
    pub fn step(&self, power: f64, dt: f64) -> Result<ThermalNode, EnvError> {
        if dt < 0.0 || dt.is_nan() {
            return Err(EnvError::NegativeStep(dt));
        }
        if dt == 0.0 {
            return Ok(*self);
        }
        let bound = self.max_stable_dt();
        if dt > bound {
            return Err(EnvError::UnstableStep { dt, bound });
        }
        let r_eff = self.r_th_eff();
        let dtemp = dt * (power / self.c_th - (self.temperature - self.ambient) / (r_eff * self.c_th));
        Ok(ThermalNode { temperature: self.temperature + dtemp, ..*self })
    }

    /// Switches the supplementary fan, changing the effective thermal
    /// resistance for subsequent steps.
    pub fn set_fan(&self, on: bool) -> ThermalNode {
        ThermalNode { fan_on: on, ..*self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_th > 0.0 && self.r_th.is_finite()) {
            return Err(format!("r_th must be positive, got {}", self.r_th));
        }
        if !(self.c_th > 0.0 && self.c_th.is_finite()) {
            return Err(format!("c_th must be positive, got {}", self.c_th));
        }
        if !(self.fan_factor > 0.0 && self.fan_factor <= 1.0) {
            return Err(format!("fan_factor must be in (0, 1], got {}", self.fan_factor));
        }
        if !self.temperature.is_finite() || !self.ambient.is_finite() {
            return Err("temperature and ambient must be finite".into());
        }
        if self.temperature < self.ambient {
            return Err(format!(
                "initial temperature {} is below ambient {}",
                self.temperature, self.ambient
            ));
        }
        Ok(())
    }
}

/// Maps the node's current temperature to its symbolic class.
pub fn classify_temperature(node: &ThermalNode, thresholds: &ClassThresholds) -> TempClass {
    let t = node.temperature;
    let b = thresholds.temp_bounds;
    if t < b[0] {
        TempClass::Low
    } else if t < b[1] {
        TempClass::Medium
    } else {
        TempClass::High
    }
}
