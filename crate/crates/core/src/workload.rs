//! Workload generation and scenario configuration: deterministic per-IP task
//! streams, the scenario file format, and the built-in experiment presets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{Battery, ClassThresholds, PowerSource, ThermalNode};
use crate::gem::GemConfig;
use crate::lem::{PriorityClass, RuleRowRaw, RuleTable};
use crate::psm::{PowerState, PsmConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("scenario parse error: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Deterministic random numbers
// ---------------------------------------------------------------------------

/// SplitMix64 generator. Small, fast, and fully specified here so that task
/// streams are reproducible bit-for-bit on any platform:
/// state += 0x9E3779B97F4A7C15; z = state; z ^= z >> 30;
/// z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB;
/// z ^= z >> 31.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> SplitMix64 {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1): the top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi); returns `lo` when the range is degenerate.
    /// Always consumes exactly one draw.
    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform over the inclusive integer range [lo, hi] by modulo reduction
    /// (the ranges used here are far below 2^64, so the bias is negligible).
    /// Always consumes exactly one draw.
    pub fn uniform_u64(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next_u64() % (hi - lo + 1)
    }
}

/// FNV-1a 64-bit hash; used to give every IP its own seed stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Per-IP seed: the master seed folded with the IP id, so adding an IP never
/// perturbs another IP's stream.
pub fn derive_ip_seed(master_seed: u64, ip_id: &str) -> u64 {
    master_seed ^ fnv1a64(ip_id.as_bytes())
}

// ---------------------------------------------------------------------------
// Tasks and generators
// ---------------------------------------------------------------------------

/// One unit of work for one IP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    /// Per-IP sequence number, starting at 0.
    pub id: u64,
    pub cycles: u64,
    pub priority: PriorityClass,
    pub arrival_time: f64,
}

/// Coarse activity level; shorthand for an idle-gap range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityClass {
    High,
    Low,
}

impl ActivityClass {
    /// Idle-gap bounds in seconds implied by the activity level.
    pub fn gap_bounds(self) -> GapBounds {
        match self {
            ActivityClass::High => GapBounds { min: 1.0e-4, max: 1.0e-3 },
            ActivityClass::Low => GapBounds { min: 2.0e-3, max: 2.0e-2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBounds {
    pub min: u64,
    pub max: u64,
}

fn default_cycle_bounds() -> CycleBounds {
    CycleBounds { min: 10_000, max: 100_000 }
}

fn uniform_weights() -> BTreeMap<PriorityClass, f64> {
    PriorityClass::ALL.into_iter().map(|p| (p, 0.25)).collect()
}

/// One IP's workload description as it appears in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub ip_id: String,
    /// Fixed arbitration rank, 1 = most important.
    #[serde(default = "default_static_priority")]
    pub static_priority: u32,
    /// Coarse activity level; ignored when `idle_gap` is given explicitly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<ActivityClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_gap: Option<GapBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<CycleBounds>,
    /// Relative weights per priority class; normalized at compile time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_weights: Option<BTreeMap<PriorityClass, f64>>,
    /// Explicit seed override; by default the seed derives from the master
    /// seed and the IP id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_static_priority() -> u32 {
    1
}

/// A generator with every option resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGenerator {
    pub ip_id: String,
    pub static_priority: u32,
    pub gap: GapBounds,
    pub cycles: CycleBounds,
    /// Probabilities in `PriorityClass::ALL` order (L, M, H, V), summing to 1.
    pub weights: [f64; 4],
    pub seed: u64,
}

impl ResolvedGenerator {
    pub fn instantiate(&self) -> TaskGenerator {
        TaskGenerator { spec: self.clone(), rng: SplitMix64::new(self.seed), next_id: 0 }
    }
}

/// Draws one IP's task stream. Tasks are produced one at a time: the next
/// task becomes known when the previous one completes, after an idle gap.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    pub spec: ResolvedGenerator,
    rng: SplitMix64,
    next_id: u64,
}

impl TaskGenerator {
    /// Draws the next task to arrive after `earliest` (the previous
    /// completion, or the simulation start). Per task the draw order is
    /// fixed: idle gap, then cycle count, then priority.
    pub fn next_task(&mut self, earliest: f64) -> Task {
        let gap = self.rng.uniform_f64(self.spec.gap.min, self.spec.gap.max);
        let cycles = self.rng.uniform_u64(self.spec.cycles.min, self.spec.cycles.max);
        let r = self.rng.next_f64();
        let mut acc = 0.0;
        let mut chosen = None;
        let mut last_weighted = PriorityClass::ALL[0];
        for (p, w) in PriorityClass::ALL.into_iter().zip(self.spec.weights) {
            if w > 0.0 {
                last_weighted = p;
            }
            acc += w;
            if chosen.is_none() && r < acc {
                chosen = Some(p);
            }
        }
        // Rounding in the cumulative sum must never surface a zero-weight
        // class, so the fallback is the heaviest-indexed weighted one.
        let priority = chosen.unwrap_or(last_weighted);
        let id = self.next_id;
        self.next_id += 1;
        Task { id, cycles, priority, arrival_time: earliest + gap }
    }
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

/// Battery and thermal starting conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub battery: Battery,
    pub thermal: ThermalNode,
}

/// A complete simulation description as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Simulated horizon in seconds.
    pub duration: f64,
    /// Whether idle IPs may power fully off. Defaults to true without an
    /// arbiter and false with one (a powered-off IP cannot answer it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allow_off: Option<bool>,
    #[serde(default)]
    pub psm: PsmConfig,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub thresholds: ClassThresholds,
    /// Policy rows; the built-in table when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<RuleRowRaw>>,
    #[serde(default = "default_rule_fallback")]
    pub rule_fallback: String,
    /// Smoothing factor of the idle-time predictor.
    #[serde(default = "default_idle_alpha")]
    pub idle_alpha: f64,
    /// Relative amplitude of multiplicative noise on posted energy
    /// estimates; 0 disables it.
    #[serde(default)]
    pub estimate_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gem: Option<GemConfig>,
    pub generators: Vec<GeneratorConfig>,
}

fn default_rule_fallback() -> String {
    "ON4".into()
}

fn default_idle_alpha() -> f64 {
    0.5
}

/// A scenario with everything validated and resolved, ready to run.
#[derive(Debug, Clone)]
pub struct CompiledScenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub allow_off: bool,
    pub psm: PsmConfig,
    pub battery: Battery,
    pub thermal: ThermalNode,
    pub thresholds: ClassThresholds,
    pub rule_table: RuleTable,
    pub idle_alpha: f64,
    pub estimate_noise: f64,
    pub gem: Option<GemConfig>,
    pub generators: Vec<ResolvedGenerator>,
    /// Non-fatal findings: dead rule rows, questionable transition costs.
    pub warnings: Vec<String>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Validates every part and resolves defaults. All errors carry enough
    /// context to point at the offending field.
    pub fn compile(&self) -> Result<CompiledScenario, ConfigError> {
        let inv = ConfigError::Invalid;
        let mut warnings = self.psm.validate().map_err(inv)?;

        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "duration must be positive and finite, got {}",
                self.duration
            )));
        }
        if !(self.idle_alpha > 0.0 && self.idle_alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "idle_alpha must be in (0, 1], got {}",
                self.idle_alpha
            )));
        }
        if !(self.estimate_noise >= 0.0 && self.estimate_noise < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "estimate_noise must be in [0, 1), got {}",
                self.estimate_noise
            )));
        }

        self.thresholds.validate().map_err(ConfigError::Invalid)?;
        self.environment.thermal.validate().map_err(ConfigError::Invalid)?;
        let b = &self.environment.battery;
        if !(b.capacity > 0.0 && b.capacity.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "battery capacity must be positive, got {}",
                b.capacity
            )));
        }
        if !(b.charge >= 0.0 && b.charge <= b.capacity) {
            return Err(ConfigError::Invalid(format!(
                "battery charge {} outside [0, capacity {}]",
                b.charge, b.capacity
            )));
        }

        let fallback = PowerState::parse(&self.rule_fallback).ok_or_else(|| {
            ConfigError::Invalid(format!("unknown rule fallback state {:?}", self.rule_fallback))
        })?;
        let rows = self.rules.clone().unwrap_or_else(RuleTable::default_rows);
        let rule_table = RuleTable::from_raw_rows(&rows, fallback).map_err(ConfigError::Invalid)?;
        for i in rule_table.shadowed_rows() {
            warnings.push(format!("rules[{i}] can never fire; earlier rows cover it"));
        }

        if self.generators.is_empty() {
            return Err(ConfigError::Invalid("at least one generator is required".into()));
        }
        let mut generators = Vec::with_capacity(self.generators.len());
        for (i, g) in self.generators.iter().enumerate() {
            let at = |e: String| ConfigError::Invalid(format!("generators[{i}]: {e}"));
            if g.ip_id.trim().is_empty() {
                return Err(at("ip_id must not be empty".into()));
            }
            if generators.iter().any(|r: &ResolvedGenerator| r.ip_id == g.ip_id) {
                return Err(at(format!("duplicate ip_id {:?}", g.ip_id)));
            }
            if g.static_priority == 0 {
                return Err(at("static_priority starts at 1".into()));
            }
            let gap = g
                .idle_gap
                .or_else(|| g.activity.map(ActivityClass::gap_bounds))
                .unwrap_or_else(|| ActivityClass::High.gap_bounds());
            if !(gap.min >= 0.0 && gap.min <= gap.max && gap.max.is_finite()) {
                return Err(at(format!(
                    "idle gap bounds must satisfy 0 <= min <= max, got [{}, {}]",
                    gap.min, gap.max
                )));
            }
            let cycles = g.cycles.unwrap_or_else(default_cycle_bounds);
            if cycles.min == 0 || cycles.min > cycles.max {
                return Err(at(format!(
                    "cycle bounds must satisfy 1 <= min <= max, got [{}, {}]",
                    cycles.min, cycles.max
                )));
            }
            let weight_map = g.priority_weights.clone().unwrap_or_else(uniform_weights);
            let mut weights = [0.0f64; 4];
            for (j, p) in PriorityClass::ALL.into_iter().enumerate() {
                let w = weight_map.get(&p).copied().unwrap_or(0.0);
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(at(format!("priority weight for {} must be >= 0", p.symbol())));
                }
                weights[j] = w;
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(at("priority weights must not all be zero".into()));
            }
            for w in &mut weights {
                *w /= total;
            }
            generators.push(ResolvedGenerator {
                ip_id: g.ip_id.clone(),
                static_priority: g.static_priority,
                gap,
                cycles,
                weights,
                seed: g.seed.unwrap_or_else(|| derive_ip_seed(self.seed, &g.ip_id)),
            });
        }

        if let Some(gem) = &self.gem {
            if gem.priority_threshold == 0 {
                return Err(ConfigError::Invalid(
                    "gem priority_threshold starts at 1".into(),
                ));
            }
        }

        Ok(CompiledScenario {
            name: self.name.clone(),
            seed: self.seed,
            duration: self.duration,
            allow_off: self.allow_off.unwrap_or(self.gem.is_none()),
            psm: self.psm.clone(),
            battery: self.environment.battery,
            thermal: self.environment.thermal,
            thresholds: self.thresholds,
            rule_table,
            idle_alpha: self.idle_alpha,
            estimate_noise: self.estimate_noise,
            gem: self.gem.clone(),
            generators,
            warnings,
        })
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Names of the built-in scenarios, in their conventional order.
pub const PRESET_NAMES: [&str; 6] = ["a1", "a2", "a3", "a4", "b", "c"];

fn battery(charge: f64) -> Battery {
    Battery { capacity: 1000.0, charge, source: PowerSource::Battery }
}

fn thermal(temperature: f64, r_th: f64) -> ThermalNode {
    ThermalNode {
        temperature,
        ambient: 25.0,
        r_th,
        c_th: 0.02,
        fan_factor: 0.5,
        fan_on: false,
    }
}

fn single_ip(activity: ActivityClass) -> Vec<GeneratorConfig> {
    vec![GeneratorConfig {
        ip_id: "ip1".into(),
        static_priority: 1,
        activity: Some(activity),
        idle_gap: None,
        cycles: None,
        priority_weights: None,
        seed: None,
    }]
}

fn skewed_weights(favored: PriorityClass) -> BTreeMap<PriorityClass, f64> {
    PriorityClass::ALL
        .into_iter()
        .map(|p| (p, if p == favored { 0.55 } else { 0.15 }))
        .collect()
}

fn four_ips(activities: [ActivityClass; 4]) -> Vec<GeneratorConfig> {
    let favored =
        [PriorityClass::V, PriorityClass::H, PriorityClass::M, PriorityClass::L];
    (0..4)
        .map(|i| GeneratorConfig {
            ip_id: format!("ip{}", i + 1),
            static_priority: (i + 1) as u32,
            activity: Some(activities[i]),
            idle_gap: None,
            cycles: None,
            priority_weights: Some(skewed_weights(favored[i])),
            seed: None,
        })
        .collect()
}

fn base_scenario(name: &str, env: EnvironmentConfig, generators: Vec<GeneratorConfig>) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 1,
        duration: 10.0,
        allow_off: None,
        psm: PsmConfig::default(),
        environment: env,
        thresholds: ClassThresholds::default(),
        rules: None,
        rule_fallback: default_rule_fallback(),
        idle_alpha: default_idle_alpha(),
        estimate_noise: 0.0,
        gem: None,
        generators,
    }
}

/// Returns a built-in scenario by name (case-insensitive), or `None`.
///
/// The single-IP family varies the starting environment: `a1` full battery
/// and cool, `a2` low battery, `a3` full battery but warm, `a4` low battery
/// and warm. `b` is a four-IP chip with an arbiter on a low battery, busy
/// high-rank IPs and quiet low-rank ones; `c` swaps the activity levels.
pub fn preset(name: &str) -> Option<Scenario> {
    let env_a = |charge, t0| EnvironmentConfig {
        battery: battery(charge),
        thermal: thermal(t0, 100.0),
    };
    let env_multi = EnvironmentConfig { battery: battery(150.0), thermal: thermal(40.0, 30.0) };
    use ActivityClass::{High, Low};
    let mut s = match name.to_ascii_lowercase().as_str() {
        "a1" => base_scenario("a1", env_a(900.0, 40.0), single_ip(High)),
        "a2" => base_scenario("a2", env_a(150.0, 40.0), single_ip(High)),
        "a3" => base_scenario("a3", env_a(900.0, 61.0), single_ip(High)),
        "a4" => base_scenario("a4", env_a(150.0, 61.0), single_ip(High)),
        "b" => base_scenario("b", env_multi, four_ips([High, High, Low, Low])),
        "c" => base_scenario("c", env_multi, four_ips([Low, Low, High, High])),
        _ => return None,
    };
    match s.name.as_str() {
        "b" | "c" => {
            s.gem = Some(GemConfig::default());
            s.allow_off = Some(false);
        }
        _ => {
            s.allow_off = Some(true);
        }
    }
    Some(s)
}
