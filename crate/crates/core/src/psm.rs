//! Power state machine: the nine per-IP power states, execution cost under
//! voltage/frequency scaling, per-state idle power, and the delay/energy cost
//! of every state transition.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The nine power states of an IP block: soft-off, four sleep states of
/// increasing depth, and four execution states of decreasing speed.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "UPPERCASE")]
pub enum PowerState {
    Off,
    Sl1,
    Sl2,
    Sl3,
    Sl4,
    On1,
    On2,
    On3,
    On4,
}

impl PowerState {
    /// Every state, in storage order (not a power or speed ordering).
    pub const ALL: [PowerState; 9] = [
        PowerState::Off,
        PowerState::Sl1,
        PowerState::Sl2,
        PowerState::Sl3,
        PowerState::Sl4,
        PowerState::On1,
        PowerState::On2,
        PowerState::On3,
        PowerState::On4,
    ];

    /// Execution states, fastest first.
    pub const ON_STATES: [PowerState; 4] = [
        PowerState::On1,
        PowerState::On2,
        PowerState::On3,
        PowerState::On4,
    ];

    /// Sleep states, shallowest first.
    pub const SLEEP_STATES: [PowerState; 4] = [
        PowerState::Sl1,
        PowerState::Sl2,
        PowerState::Sl3,
        PowerState::Sl4,
    ];

    pub fn is_on(self) -> bool {
        matches!(
            self,
            PowerState::On1 | PowerState::On2 | PowerState::On3 | PowerState::On4
        )
    }

    pub fn is_sleep(self) -> bool {
        matches!(
            self,
            PowerState::Sl1 | PowerState::Sl2 | PowerState::Sl3 | PowerState::Sl4
        )
    }

    /// Speed rank of an execution state: ON1 -> 1 (fastest) .. ON4 -> 4.
    pub fn on_rank(self) -> Option<u8> {
        match self {
            PowerState::On1 => Some(1),
            PowerState::On2 => Some(2),
            PowerState::On3 => Some(3),
            PowerState::On4 => Some(4),
            _ => None,
        }
    }

    /// Depth of a sleep state: SL1 -> 1 (shallowest) .. SL4 -> 4.
    pub fn sleep_depth(self) -> Option<u8> {
        match self {
            PowerState::Sl1 => Some(1),
            PowerState::Sl2 => Some(2),
            PowerState::Sl3 => Some(3),
            PowerState::Sl4 => Some(4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PowerState::Off => "OFF",
            PowerState::Sl1 => "SL1",
            PowerState::Sl2 => "SL2",
            PowerState::Sl3 => "SL3",
            PowerState::Sl4 => "SL4",
            PowerState::On1 => "ON1",
            PowerState::On2 => "ON2",
            PowerState::On3 => "ON3",
            PowerState::On4 => "ON4",
        }
    }

    pub fn parse(s: &str) -> Option<PowerState> {
        PowerState::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for PowerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PsmError {
    /// An operation that needs an execution state was given a sleep or off state.
    #[error("{0} is not an executable state")]
    NotExecutableState(PowerState),
}

/// Scaling factors and idle draw of one power state.
///
/// `voltage_scale` and `freq_scale` are fractions of the nominal supply
/// voltage and clock; they are meaningful for ON states and zero elsewhere.
/// `idle_power` is the draw in watts while resident in the state with no
/// instruction executing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    pub voltage_scale: f64,
    pub freq_scale: f64,
    pub idle_power: f64,
}

/// Delay (seconds) and energy (joules) of one state transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionCost {
    pub delay: f64,
    pub energy: f64,
}

impl TransitionCost {
    pub const ZERO: TransitionCost = TransitionCost { delay: 0.0, energy: 0.0 };

    fn add(self, other: TransitionCost) -> TransitionCost {
        TransitionCost {
            delay: self.delay + other.delay,
            energy: self.energy + other.energy,
        }
    }
}

/// Cost of entering and of leaving one state, used to synthesize the full
/// transition table as `cost(A -> B) = exit(A) + entry(B)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryExit {
    pub entry: TransitionCost,
    pub exit: TransitionCost,
}

/// One explicit entry of a full transition table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub from: PowerState,
    pub to: PowerState,
    pub delay: f64,
    pub energy: f64,
}

/// How transition costs are specified: either per-state entry/exit scalars or
/// a full explicit table covering all ordered state pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransitionSpec {
    EntryExit { entry_exit: BTreeMap<PowerState, EntryExit> },
    Table { table: Vec<TransitionEntry> },
}

/// Full power state machine configuration of one IP class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmConfig {
    /// Seconds per cycle at nominal frequency (ON1).
    pub nominal_cycle_time: f64,
    /// Joules per cycle at nominal voltage (ON1).
    pub nominal_cycle_energy: f64,
    pub states: BTreeMap<PowerState, StateParams>,
    pub transitions: TransitionSpec,
}

impl PsmConfig {
    pub fn params(&self, state: PowerState) -> &StateParams {
        self.states
            .get(&state)
            .unwrap_or_else(|| panic!("state {state} missing from validated config"))
    }

    /// Execution cost of `cycles` cycles in `state`.
    ///
    /// Duration stretches with the inverse frequency scale; per-cycle energy
    /// shrinks with the square of the voltage scale. Returns
    /// `(duration_s, energy_j)`, linear in `cycles`.
    pub fn instruction_cost(
        &self,
        state: PowerState,
        cycles: u64,
    ) -> Result<(f64, f64), PsmError> {
        if !state.is_on() {
            return Err(PsmError::NotExecutableState(state));
        }
        let p = self.params(state);
        let n = cycles as f64;
        let duration = n * self.nominal_cycle_time / p.freq_scale;
        let energy = n * self.nominal_cycle_energy * p.voltage_scale * p.voltage_scale;
        Ok((duration, energy))
    }

    /// Delay and energy of switching `current -> target`. Self-transitions are
    /// free.
    pub fn transition(&self, current: PowerState, target: PowerState) -> TransitionCost {
        if current == target {
            return TransitionCost::ZERO;
        }
        match &self.transitions {
            TransitionSpec::EntryExit { entry_exit } => {
                let from = entry_exit
                    .get(&current)
                    .unwrap_or_else(|| panic!("state {current} missing entry/exit cost"));
                let to = entry_exit
                    .get(&target)
                    .unwrap_or_else(|| panic!("state {target} missing entry/exit cost"));
                from.exit.add(to.entry)
            }
            TransitionSpec::Table { table } => table
                .iter()
                .find(|e| e.from == current && e.to == target)
                .map(|e| TransitionCost { delay: e.delay, energy: e.energy })
                .unwrap_or_else(|| panic!("transition {current}->{target} missing from table")),
        }
    }

    /// Idle draw (watts) while resident in `state` with nothing executing.
    pub fn idle_power(&self, state: PowerState) -> f64 {
        self.params(state).idle_power
    }

    /// Validates the configuration. Returns advisory warnings (e.g. transition
    /// delay triangle violations) on success, or the first hard error.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        if !(self.nominal_cycle_time > 0.0 && self.nominal_cycle_time.is_finite()) {
            return Err(format!(
                "nominal_cycle_time must be positive and finite, got {}",
                self.nominal_cycle_time
            ));
        }
        if !(self.nominal_cycle_energy > 0.0 && self.nominal_cycle_energy.is_finite()) {
            return Err(format!(
                "nominal_cycle_energy must be positive and finite, got {}",
                self.nominal_cycle_energy
            ));
        }
        for state in PowerState::ALL {
            let p = self
                .states
                .get(&state)
                .ok_or_else(|| format!("state {state} missing from psm.states"))?;
            if !(p.idle_power >= 0.0 && p.idle_power.is_finite()) {
                return Err(format!("{state}: idle_power must be finite and >= 0"));
            }
            if state.is_on() {
                for (name, v) in [("voltage_scale", p.voltage_scale), ("freq_scale", p.freq_scale)]
                {
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(format!("{state}: {name} must be in (0, 1], got {v}"));
                    }
                }
            } else if p.freq_scale != 0.0 {
                return Err(format!("{state}: freq_scale must be 0 for non-ON states"));
            }
        }
        let on1 = self.params(PowerState::On1);
        if on1.voltage_scale != 1.0 || on1.freq_scale != 1.0 {
            return Err("ON1 must have voltage_scale = freq_scale = 1.0".into());
        }
        for pair in PowerState::ON_STATES.windows(2) {
            let (a, b) = (self.params(pair[0]), self.params(pair[1]));
            if !(b.voltage_scale < a.voltage_scale && b.freq_scale < a.freq_scale) {
                return Err(format!(
                    "{} must scale strictly below {} in both voltage and frequency",
                    pair[1], pair[0]
                ));
            }
        }
        for pair in PowerState::SLEEP_STATES.windows(2) {
            if self.idle_power(pair[1]) >= self.idle_power(pair[0]) {
                return Err(format!(
                    "{} idle_power must be strictly below {}",
                    pair[1], pair[0]
                ));
            }
        }
        if self.idle_power(PowerState::Off) != 0.0 {
            return Err("OFF idle_power must be 0".into());
        }

        match &self.transitions {
            TransitionSpec::EntryExit { entry_exit } => {
                for state in PowerState::ALL {
                    let ee = entry_exit
                        .get(&state)
                        .ok_or_else(|| format!("state {state} missing entry/exit cost"))?;
                    for (name, c) in [("entry", ee.entry), ("exit", ee.exit)] {
                        if !(c.delay >= 0.0 && c.delay.is_finite())
                            || !(c.energy >= 0.0 && c.energy.is_finite())
                        {
                            return Err(format!(
                                "{state}: {name} cost must be finite and >= 0"
                            ));
                        }
                    }
                }
            }
            TransitionSpec::Table { table } => {
                let mut seen = BTreeMap::new();
                for e in table {
                    if seen.insert((e.from, e.to), ()).is_some() {
                        return Err(format!("duplicate transition entry {}->{}", e.from, e.to));
                    }
                    if !(e.delay >= 0.0 && e.delay.is_finite())
                        || !(e.energy >= 0.0 && e.energy.is_finite())
                    {
                        return Err(format!(
                            "transition {}->{}: costs must be finite and >= 0",
                            e.from, e.to
                        ));
                    }
                    if e.from == e.to && (e.delay != 0.0 || e.energy != 0.0) {
                        return Err(format!("self transition {}->{} must cost zero", e.from, e.to));
                    }
                }
                for a in PowerState::ALL {
                    for b in PowerState::ALL {
                        if a != b && !seen.contains_key(&(a, b)) {
                            return Err(format!("transition table is missing {a}->{b}"));
                        }
                    }
                }
            }
        }

        // Deeper sleep must cost strictly more to wake from, in both delay and
        // energy; otherwise the depth ordering is meaningless.
        for pair in PowerState::SLEEP_STATES.windows(2) {
            let shallow = self.transition(pair[0], PowerState::On1);
            let deep = self.transition(pair[1], PowerState::On1);
            if !(deep.delay > shallow.delay && deep.energy > shallow.energy) {
                return Err(format!(
                    "wake cost of {} must strictly exceed {} in both delay and energy",
                    pair[1], pair[0]
                ));
            }
        }

        // Advisory: direct transitions should not be slower than a detour.
        let mut warnings = Vec::new();
        for a in PowerState::ALL {
            for c in PowerState::ALL {
                if a == c {
                    continue;
                }
                let direct = self.transition(a, c);
                for b in PowerState::ALL {
                    if b == a || b == c {
                        continue;
                    }
                    let via = self.transition(a, b).add(self.transition(b, c));
                    if direct.delay > via.delay + 1e-15 {
                        warnings.push(format!(
                            "transition delay {a}->{c} ({}s) exceeds the detour via {b} ({}s)",
                            direct.delay, via.delay
                        ));
                    }
                }
            }
        }
        Ok(warnings)
    }
}

impl Default for PsmConfig {
    /// Default single-instruction-class configuration: 100 MHz nominal clock,
    /// 5 nJ per cycle at nominal voltage, and entry/exit transition scalars
    /// that make deeper sleep strictly costlier to wake from.
    fn default() -> Self {
        let mut states = BTreeMap::new();
        let on = |v, f, p| StateParams { voltage_scale: v, freq_scale: f, idle_power: p };
        let low = |p| StateParams { voltage_scale: 0.0, freq_scale: 0.0, idle_power: p };
        states.insert(PowerState::On1, on(1.00, 1.00, 0.40));
        states.insert(PowerState::On2, on(0.85, 0.80, 0.30));
        states.insert(PowerState::On3, on(0.70, 0.60, 0.22));
        states.insert(PowerState::On4, on(0.55, 0.40, 0.15));
        states.insert(PowerState::Sl1, low(0.05));
        states.insert(PowerState::Sl2, low(0.02));
        states.insert(PowerState::Sl3, low(0.008));
        states.insert(PowerState::Sl4, low(0.003));
        states.insert(PowerState::Off, low(0.0));

        let cost = |delay, energy| TransitionCost { delay, energy };
        let mut entry_exit = BTreeMap::new();
        for s in PowerState::ON_STATES {
            entry_exit.insert(
                s,
                EntryExit { entry: cost(2e-5, 1e-5), exit: cost(1e-5, 5e-6) },
            );
        }
        entry_exit.insert(
            PowerState::Sl1,
            EntryExit { entry: cost(1e-4, 8e-6), exit: cost(1.5e-4, 1.2e-5) },
        );
        entry_exit.insert(
            PowerState::Sl2,
            EntryExit { entry: cost(3e-4, 2e-5), exit: cost(4e-4, 3e-5) },
        );
        entry_exit.insert(
            PowerState::Sl3,
            EntryExit { entry: cost(1e-3, 5e-5), exit: cost(1.5e-3, 8e-5) },
        );
        entry_exit.insert(
            PowerState::Sl4,
            EntryExit { entry: cost(4e-3, 1.2e-4), exit: cost(6e-3, 2e-4) },
        );
        entry_exit.insert(
            PowerState::Off,
            EntryExit { entry: cost(1e-2, 3e-4), exit: cost(2e-2, 8e-4) },
        );

        PsmConfig {
            nominal_cycle_time: 1e-8,
            nominal_cycle_energy: 5e-9,
            states,
            transitions: TransitionSpec::EntryExit { entry_exit },
        }
    }
}
