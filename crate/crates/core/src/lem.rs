//! Local energy manager: per-task execution state selection from an ordered
//! first-match rule table over forecast battery/temperature classes, and the
//! break-even sleep policy used between tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{
    classify_battery, classify_temperature, Battery, BatteryClass, ClassThresholds, TempClass,
    ThermalNode,
};
use crate::psm::{PowerState, PsmConfig, PsmError};
use crate::workload::Task;

#[derive(Debug, Error, PartialEq)]
pub enum LemError {
    /// Break-even needs an ON idle state and a non-ON sleep target.
    #[error("invalid state pair for break-even: idle {idle}, sleep {sleep}")]
    InvalidStates { idle: PowerState, sleep: PowerState },
    /// The observed idle interval fed to the predictor was negative.
    #[error("observed idle time {0}s is negative")]
    NegativeIdle(f64),
}

/// Task priority classes, least to most urgent.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum PriorityClass {
    L,
    M,
    H,
    V,
}

impl PriorityClass {
    pub const ALL: [PriorityClass; 4] =
        [PriorityClass::L, PriorityClass::M, PriorityClass::H, PriorityClass::V];

    pub fn symbol(self) -> &'static str {
        match self {
            PriorityClass::L => "L",
            PriorityClass::M => "M",
            PriorityClass::H => "H",
            PriorityClass::V => "V",
        }
    }

    pub fn parse_symbol(s: &str) -> Option<PriorityClass> {
        PriorityClass::ALL.into_iter().find(|c| c.symbol() == s)
    }
}

// ---------------------------------------------------------------------------
// Rule table
// ---------------------------------------------------------------------------

/// One rule row in its textual form: comma-separated class symbols per field,
/// `-` for "any". This is the form scenario files carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRowRaw {
    pub priority: String,
    pub battery: String,
    pub temperature: String,
    pub state: String,
}

impl RuleRowRaw {
    pub fn new(priority: &str, battery: &str, temperature: &str, state: &str) -> RuleRowRaw {
        RuleRowRaw {
            priority: priority.into(),
            battery: battery.into(),
            temperature: temperature.into(),
            state: state.into(),
        }
    }
}

/// A compiled rule row. `None` on a field means "matches any class".
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub priority: Option<Vec<PriorityClass>>,
    pub battery: Option<Vec<BatteryClass>>,
    pub temperature: Option<Vec<TempClass>>,
    pub result: PowerState,
}

impl Rule {
    pub fn matches(&self, p: PriorityClass, b: BatteryClass, t: TempClass) -> bool {
        self.priority.as_ref().is_none_or(|set| set.contains(&p))
            && self.battery.as_ref().is_none_or(|set| set.contains(&b))
            && self.temperature.as_ref().is_none_or(|set| set.contains(&t))
    }
}

fn parse_set<T: Copy + PartialEq>(
    field: &str,
    text: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<Vec<T>>, String> {
    let text = text.trim();
    if text == "-" {
        return Ok(None);
    }
    let mut out = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let class = parse(token)
            .ok_or_else(|| format!("unknown {field} class {token:?}"))?;
        if out.contains(&class) {
            return Err(format!("duplicate {field} class {token:?}"));
        }
        out.push(class);
    }
    if out.is_empty() {
        return Err(format!("empty {field} class set"));
    }
    Ok(Some(out))
}

fn set_to_string<T: Copy>(set: &Option<Vec<T>>, symbol: impl Fn(T) -> &'static str) -> String {
    match set {
        None => "-".into(),
        Some(v) => v.iter().map(|&c| symbol(c)).collect::<Vec<_>>().join(","),
    }
}

/// Ordered first-match rule table mapping (priority, battery class,
/// temperature class) to an execution state, or SL1 to defer the task.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    pub rules: Vec<Rule>,
    pub fallback: PowerState,
}

impl RuleTable {
    /// Compiles textual rows. Error messages carry the offending row index.
    pub fn from_raw_rows(rows: &[RuleRowRaw], fallback: PowerState) -> Result<RuleTable, String> {
        if !fallback.is_on() {
            return Err(format!("rule fallback must be an ON state, got {fallback}"));
        }
        let mut rules = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let at = |e| format!("rules[{i}]: {e}");
            let priority =
                parse_set("priority", &row.priority, PriorityClass::parse_symbol).map_err(at)?;
            let battery =
                parse_set("battery", &row.battery, BatteryClass::parse_symbol)
                    .map_err(|e| format!("rules[{i}]: {e}"))?;
            let temperature =
                parse_set("temperature", &row.temperature, TempClass::parse_symbol)
                    .map_err(|e| format!("rules[{i}]: {e}"))?;
            let result = PowerState::parse(row.state.trim())
                .ok_or_else(|| format!("rules[{i}]: unknown power state {:?}", row.state))?;
            if !result.is_on() && result != PowerState::Sl1 {
                return Err(format!(
                    "rules[{i}]: rule result must be an ON state or SL1, got {result}"
                ));
            }
            rules.push(Rule { priority, battery, temperature, result });
        }
        Ok(RuleTable { rules, fallback })
    }

    /// The textual form of the table, row order preserved.
    pub fn raw_rows(&self) -> Vec<RuleRowRaw> {
        self.rules
            .iter()
            .map(|r| RuleRowRaw {
                priority: set_to_string(&r.priority, PriorityClass::symbol),
                battery: set_to_string(&r.battery, BatteryClass::symbol),
                temperature: set_to_string(&r.temperature, TempClass::symbol),
                state: r.result.name().into(),
            })
            .collect()
    }

    /// First matching rule wins; with no match the fallback state applies.
    pub fn select_power_state(
        &self,
        priority: PriorityClass,
        battery: BatteryClass,
        temperature: TempClass,
    ) -> PowerState {
        self.rules
            .iter()
            .find(|r| r.matches(priority, battery, temperature))
            .map(|r| r.result)
            .unwrap_or(self.fallback)
    }

    /// Indices of rules that can never fire: every combination they match is
    /// claimed by an earlier row.
    pub fn shadowed_rows(&self) -> Vec<usize> {
        let mut first_match_seen = vec![false; self.rules.len()];
        for p in PriorityClass::ALL {
            for b in BatteryClass::ALL {
                for t in TempClass::ALL {
                    if let Some(i) = self.rules.iter().position(|r| r.matches(p, b, t)) {
                        first_match_seen[i] = true;
                    }
                }
            }
        }
        first_match_seen
            .iter()
            .enumerate()
            .filter(|(_, seen)| !**seen)
            .map(|(i, _)| i)
            .collect()
    }

    /// The default 13-row policy table. Row 6 is kept although row 3 shadows
    /// it completely; the validator reports it as dead.
    pub fn default_rows() -> Vec<RuleRowRaw> {
        vec![
            RuleRowRaw::new("V", "E", "-", "ON4"),
            RuleRowRaw::new("V", "-", "H", "ON4"),
            RuleRowRaw::new("H,M,L", "E", "-", "SL1"),
            RuleRowRaw::new("H,M,L", "-", "H", "SL1"),
            RuleRowRaw::new("-", "L", "M,L", "ON4"),
            RuleRowRaw::new("-", "E", "M", "ON4"),
            RuleRowRaw::new("V", "M,H", "L", "ON1"),
            RuleRowRaw::new("H", "M,H", "L", "ON2"),
            RuleRowRaw::new("M", "M,H", "L", "ON3"),
            RuleRowRaw::new("L", "M,H", "L", "ON4"),
            RuleRowRaw::new("V,H,M", "F", "L", "ON1"),
            RuleRowRaw::new("L", "F", "L", "ON2"),
            RuleRowRaw::new("-", "PS", "M,L", "ON1"),
        ]
    }

    pub fn default_table() -> RuleTable {
        RuleTable::from_raw_rows(&Self::default_rows(), PowerState::On4)
            .expect("built-in table compiles")
    }
}

// ---------------------------------------------------------------------------
// Forecasting and the per-task decision
// ---------------------------------------------------------------------------

/// Environment classes expected at the end of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forecast {
    pub battery_class: BatteryClass,
    pub temp_class: TempClass,
}

/// Projects battery and temperature classes to the completion of `task`, were
/// it run in `candidate`, with `others_energy` joules of concurrently granted
/// work drawn alongside it.
pub fn forecast_end_of_task(
    task: &Task,
    candidate: PowerState,
    others_energy: f64,
    battery: &Battery,
    node: &ThermalNode,
    thresholds: &ClassThresholds,
    psm: &PsmConfig,
) -> Result<Forecast, PsmError> {
    let (duration, energy) = psm.instruction_cost(candidate, task.cycles)?;
    if duration <= 0.0 {
        return Ok(Forecast {
            battery_class: classify_battery(battery, thresholds),
            temp_class: classify_temperature(node, thresholds),
        });
    }
    let total = energy + others_energy;
    let drained = battery.drain(total).expect("non-negative energy");
    let power = total / duration;
    let mut projected = *node;
    let steps = (duration / projected.max_stable_dt()).ceil().max(1.0);
    let dt = duration / steps;
    for _ in 0..steps as u64 {
        projected = projected.step(power, dt).expect("dt within stability bound");
    }
    Ok(Forecast {
        battery_class: classify_battery(&drained, thresholds),
        temp_class: classify_temperature(&projected, thresholds),
    })
}

/// Picks the execution state for a granted task, or SL1 to defer it.
///
/// With `gem_enable` false the answer is SL1 outright. Otherwise the forecast
/// is taken at nominal speed, the rule table consulted, and — when it selects
/// a different ON state — the forecast is refined once under that state; the
/// second selection is final.
#[allow(clippy::too_many_arguments)]
pub fn decide_task_state(
    task: &Task,
    gem_enable: bool,
    others_energy: f64,
    battery: &Battery,
    node: &ThermalNode,
    thresholds: &ClassThresholds,
    table: &RuleTable,
    psm: &PsmConfig,
) -> Result<PowerState, PsmError> {
    if !gem_enable {
        return Ok(PowerState::Sl1);
    }
    let first = forecast_end_of_task(
        task,
        PowerState::On1,
        others_energy,
        battery,
        node,
        thresholds,
        psm,
    )?;
    let s1 = table.select_power_state(task.priority, first.battery_class, first.temp_class);
    if s1 == PowerState::On1 || s1 == PowerState::Sl1 {
        return Ok(s1);
    }
    let second =
        forecast_end_of_task(task, s1, others_energy, battery, node, thresholds, psm)?;
    Ok(table.select_power_state(task.priority, second.battery_class, second.temp_class))
}

// ---------------------------------------------------------------------------
// Idle policy
// ---------------------------------------------------------------------------

/// Minimum idle length (seconds) for which parking in `sleep_state` beats
/// staying resident in `idle_state`, or infinity when it never does.
///
/// With transition round-trip delay `T_tr` and energy `E_tr`, idle power
/// `P_i` and sleep power `P_s`, the break-even point is
/// `max(T_tr, (E_tr - P_s * T_tr) / (P_i - P_s))`.
pub fn break_even_time(
    idle_state: PowerState,
    sleep_state: PowerState,
    psm: &PsmConfig,
) -> Result<f64, LemError> {
    if !idle_state.is_on() || sleep_state.is_on() {
        return Err(LemError::InvalidStates { idle: idle_state, sleep: sleep_state });
    }
    let down = psm.transition(idle_state, sleep_state);
    let up = psm.transition(sleep_state, idle_state);
    let t_tr = down.delay + up.delay;
    let e_tr = down.energy + up.energy;
    let p_i = psm.idle_power(idle_state);
    let p_s = psm.idle_power(sleep_state);
    if p_i <= p_s {
        return Ok(f64::INFINITY);
    }
    Ok(t_tr.max((e_tr - p_s * t_tr) / (p_i - p_s)))
}

/// Picks where to park for a predicted idle interval: the lowest-power state
/// among SL1..SL4 (and OFF when allowed) whose break-even time fits within
/// the prediction, or `idle_state` itself (stay awake) when none qualifies.
pub fn choose_idle_state(
    predicted_idle: f64,
    idle_state: PowerState,
    psm: &PsmConfig,
    allow_off: bool,
) -> PowerState {
    if !idle_state.is_on() {
        return idle_state;
    }
    let mut candidates = PowerState::SLEEP_STATES.to_vec();
    if allow_off {
        candidates.push(PowerState::Off);
    }
    let mut best = idle_state;
    let mut best_power = f64::INFINITY;
    for s in candidates {
        let t_be = break_even_time(idle_state, s, psm).expect("ON idle, non-ON sleep");
        if t_be <= predicted_idle && psm.idle_power(s) < best_power {
            best = s;
            best_power = psm.idle_power(s);
        }
    }
    best
}

/// Exponentially weighted moving average of observed idle intervals; seeded
/// by the first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdlePredictor {
    pub alpha: f64,
    predicted: Option<f64>,
}

impl IdlePredictor {
    pub fn new(alpha: f64) -> IdlePredictor {
        IdlePredictor { alpha, predicted: None }
    }

    /// Folds one observed idle interval in and returns the new prediction.
    pub fn observe(&mut self, observed_idle: f64) -> Result<f64, LemError> {
        if observed_idle < 0.0 || observed_idle.is_nan() {
            return Err(LemError::NegativeIdle(observed_idle));
        }
        let next = match self.predicted {
            None => observed_idle,
            Some(prev) => self.alpha * observed_idle + (1.0 - self.alpha) * prev,
        };
        self.predicted = Some(next);
        Ok(next)
    }

    /// Current prediction; `None` until the first observation.
    pub fn prediction(&self) -> Option<f64> {
        self.predicted
    }
}

/// Energy the LEM quotes to the global manager for running `task` in `state`.
/// Exact by default; any configured estimate noise is applied by the caller.
pub fn task_energy_estimate(
    task: &Task,
    state: PowerState,
    psm: &PsmConfig,
) -> Result<f64, PsmError> {
    Ok(psm.instruction_cost(state, task.cycles)?.1)
}
