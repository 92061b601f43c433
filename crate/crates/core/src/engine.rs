//! Discrete-event simulation engine: event queue, per-IP runtime state,
//! continuous battery/thermal integration between events, the managed and
//! baseline runs, and the comparison metrics.

use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::environment::{
    classify_battery, classify_temperature, Battery, BatteryClass, PowerSource, TempClass,
    ThermalNode,
};
use crate::gem::{Gem, IpRegistration};
use crate::lem::{choose_idle_state, decide_task_state, task_energy_estimate, IdlePredictor};
use crate::psm::PowerState;
use crate::workload::{fnv1a64, CompiledScenario, SplitMix64, Task, TaskGenerator};

#[derive(Debug, Error)]
pub enum SimError {
    /// The scenario failed validation before the run started.
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    /// An internal invariant broke mid-run; always a bug, never bad input.
    #[error("internal simulation error: {0}")]
    Internal(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    /// A comparison denominator is zero or negative, so the ratio is
    /// undefined (e.g. the baseline consumed no energy, or no task completed
    /// in both runs).
    #[error("baseline is degenerate: {0}")]
    DegenerateBaseline(String),
}

// ---------------------------------------------------------------------------
// Event queue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    TaskArrival { ip: usize, task: Task },
    TaskComplete { ip: usize },
    TransitionComplete { ip: usize },
    IdleTimeout { ip: usize },
    ClassChange,
    FanChange { on: bool },
    SimEnd,
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Event) -> bool {
        self.seq == other.seq
    }
}
impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Event) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the BinaryHeap pops the earliest time; ties go to the
    // earlier insertion (FIFO).
    fn cmp(&self, other: &Event) -> std::cmp::Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// One completed task with its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub ip: String,
    pub task_id: u64,
    pub cycles: u64,
    pub arrival: f64,
    pub completion: f64,
}

impl TaskOutcome {
    pub fn latency(&self) -> f64 {
        self.completion - self.arrival
    }
}

/// One line of the simulation trace. Global records (class changes, fan
/// flips, end of run) carry no IP and no state.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub ip: Option<String>,
    pub event: String,
    pub state: Option<PowerState>,
    pub battery: f64,
    pub temperature: f64,
    pub cum_energy: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub scenario_name: String,
    pub seed: u64,
    pub duration: f64,
    /// Joules consumed by all IPs together, transitions included.
    pub total_energy: f64,
    pub per_ip_energy: BTreeMap<String, f64>,
    /// Time average of (temperature - ambient) over the whole run.
    pub avg_excess_temp: f64,
    pub final_temperature: f64,
    pub initial_charge: f64,
    pub final_charge: f64,
    /// Joules actually taken out of the battery.
    pub drained_energy: f64,
    /// Joules demanded past an empty battery (the run keeps going; this
    /// records how much demand the battery could not cover).
    pub clamped_energy: f64,
    pub tasks: Vec<TaskOutcome>,
    pub tasks_completed: u64,
    pub events_processed: u64,
    pub trace: Vec<TraceRecord>,
}

impl SimResult {
    /// The trace as CSV, one record per line under a fixed header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("time_s,ip,event,state,battery_J,temp_C,cum_energy_J\n");
        for r in &self.trace {
            let ip = r.ip.as_deref().unwrap_or("-");
            let state = r.state.map(|s| s.name()).unwrap_or("-");
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.time, ip, r.event, state, r.battery, r.temperature, r.cum_energy
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Headline comparison of a managed run against its baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub energy_saving_pct: f64,
    pub temp_reduction_pct: f64,
    pub avg_delay_overhead_pct: f64,
    /// Tasks completed in both runs; the delay overhead averages over these.
    pub matched_tasks: usize,
}

/// Compares a managed run against the always-on baseline.
///
/// Energy saving and temperature reduction are relative drops of total
/// energy and of time-averaged excess temperature. Delay overhead is the
/// relative rise of mean task latency over tasks completed in both runs,
/// matched by (IP, task id).
pub fn compute_metrics(dpm: &SimResult, baseline: &SimResult) -> Result<Metrics, MetricsError> {
    // NaN denominators are rejected along with zero and negative ones.
    if baseline.total_energy.is_nan() || baseline.total_energy <= 0.0 {
        return Err(MetricsError::DegenerateBaseline(format!(
            "baseline total energy is {}",
            baseline.total_energy
        )));
    }
    if baseline.avg_excess_temp.is_nan() || baseline.avg_excess_temp <= 0.0 {
        return Err(MetricsError::DegenerateBaseline(format!(
            "baseline average excess temperature is {}",
            baseline.avg_excess_temp
        )));
    }
    let base_latency: BTreeMap<(&str, u64), f64> = baseline
        .tasks
        .iter()
        .map(|t| ((t.ip.as_str(), t.task_id), t.latency()))
        .collect();
    let mut matched = 0usize;
    let mut dpm_sum = 0.0;
    let mut base_sum = 0.0;
    for t in &dpm.tasks {
        if let Some(b) = base_latency.get(&(t.ip.as_str(), t.task_id)) {
            matched += 1;
            dpm_sum += t.latency();
            base_sum += b;
        }
    }
    if matched == 0 || base_sum.is_nan() || base_sum <= 0.0 {
        return Err(MetricsError::DegenerateBaseline(
            "no task completed in both runs with positive baseline latency".into(),
        ));
    }
    let mean_dpm = dpm_sum / matched as f64;
    let mean_base = base_sum / matched as f64;
    Ok(Metrics {
        energy_saving_pct: 100.0 * (baseline.total_energy - dpm.total_energy)
            / baseline.total_energy,
        temp_reduction_pct: 100.0 * (baseline.avg_excess_temp - dpm.avg_excess_temp)
            / baseline.avg_excess_temp,
        avg_delay_overhead_pct: 100.0 * (mean_dpm - mean_base) / mean_base,
        matched_tasks: matched,
    })
}

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Purpose {
    /// Entering a lower-power state to wait.
    Park,
    /// Heading to an execution state to run the pending task.
    Wake,
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Idle,
    Transitioning { target: PowerState, purpose: Purpose },
    Executing { task: Task },
}

#[derive(Debug)]
struct IpRuntime {
    ip_id: String,
    generator: TaskGenerator,
    state: PowerState,
    phase: Phase,
    /// A task that has arrived but not yet started executing.
    pending: Option<Task>,
    predictor: IdlePredictor,
    /// Current electrical draw in watts; piecewise constant between events.
    draw: f64,
    /// Joules consumed so far, transitions included.
    energy: f64,
    /// When this IP last finished executing (0 before the first task).
    last_busy_end: f64,
    tasks_completed: u64,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Managed,
    Baseline,
}

struct Sim<'a> {
    cfg: &'a CompiledScenario,
    mode: Mode,
    now: f64,
    battery: Battery,
    node: ThermalNode,
    tracked_battery: BatteryClass,
    tracked_temp: TempClass,
    gem: Option<Gem>,
    ips: Vec<IpRuntime>,
    queue: EventQueue,
    noise_rng: SplitMix64,
    excess_temp_integral: f64,
    drained: f64,
    clamped: f64,
    events_processed: u64,
    tasks: Vec<TaskOutcome>,
    trace: Vec<TraceRecord>,
}

/// Runs the managed simulation: rule-table execution states, break-even
/// sleeping, and (when configured) global arbitration.
pub fn run(cfg: &CompiledScenario) -> Result<SimResult, SimError> {
    Sim::new(cfg, Mode::Managed)?.run_to_end()
}

/// Runs the reference baseline: every IP stays in the fastest ON state for
/// the whole horizon and executes each task the moment it arrives.
pub fn run_baseline(cfg: &CompiledScenario) -> Result<SimResult, SimError> {
    Sim::new(cfg, Mode::Baseline)?.run_to_end()
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a CompiledScenario, mode: Mode) -> Result<Sim<'a>, SimError> {
        let gem = match (&cfg.gem, mode) {
            (Some(gc), Mode::Managed) => {
                let regs = cfg
                    .generators
                    .iter()
                    .map(|g| IpRegistration {
                        ip_id: g.ip_id.clone(),
                        static_priority: g.static_priority,
                    })
                    .collect();
                Some(
                    Gem::new(gc.clone(), regs)
                        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?,
                )
            }
            _ => None,
        };
        let ips = cfg
            .generators
            .iter()
            .map(|g| IpRuntime {
                ip_id: g.ip_id.clone(),
                generator: g.instantiate(),
                state: PowerState::On1,
                phase: Phase::Idle,
                pending: None,
                predictor: IdlePredictor::new(cfg.idle_alpha),
                draw: cfg.psm.idle_power(PowerState::On1),
                energy: 0.0,
                last_busy_end: 0.0,
                tasks_completed: 0,
            })
            .collect();
        let mut sim = Sim {
            cfg,
            mode,
            now: 0.0,
            battery: cfg.battery,
            node: cfg.thermal,
            tracked_battery: classify_battery(&cfg.battery, &cfg.thresholds),
            tracked_temp: classify_temperature(&cfg.thermal, &cfg.thresholds),
            gem,
            ips,
            queue: EventQueue::default(),
            noise_rng: SplitMix64::new(cfg.seed ^ fnv1a64(b"estimate-noise")),
            excess_temp_integral: 0.0,
            drained: 0.0,
            clamped: 0.0,
            events_processed: 0,
            tasks: Vec::new(),
            trace: Vec::new(),
        };
        // The end event is queued first so it wins any same-instant tie.
        sim.queue.push(cfg.duration, EventKind::SimEnd);
        for idx in 0..sim.ips.len() {
            let task = sim.ips[idx].generator.next_task(0.0);
            sim.queue.push(task.arrival_time, EventKind::TaskArrival { ip: idx, task });
        }
        Ok(sim)
    }

    fn total_energy(&self) -> f64 {
        self.ips.iter().map(|ip| ip.energy).sum()
    }

    fn record(&mut self, ip: Option<usize>, event: &str, state: Option<PowerState>) {
        self.trace.push(TraceRecord {
            time: self.now,
            ip: ip.map(|i| self.ips[i].ip_id.clone()),
            event: event.into(),
            state,
            battery: self.battery.charge,
            temperature: self.node.temperature,
            cum_energy: self.total_energy(),
        });
    }

    fn classes(&self, battery: &Battery, node: &ThermalNode) -> (BatteryClass, TempClass) {
        (
            classify_battery(battery, &self.cfg.thresholds),
            classify_temperature(node, &self.cfg.thresholds),
        )
    }

    // -- continuous integration between events ------------------------------

    /// Advances battery and temperature up to `target`. In the managed run,
    /// stops early at the first class-boundary crossing (located to 1 us by
    /// bisection) and reports it; the caller schedules the class-change
    /// event at that instant.
    fn advance_env_until(&mut self, target: f64) -> Result<Option<f64>, SimError> {
        let detect = self.mode == Mode::Managed;
        while self.now < target {
            let gap = target - self.now;
            let bound = self.node.max_stable_dt();
            let steps = (gap / bound).ceil().max(1.0);
            let dt = gap / steps;
            if self.now + dt == self.now {
                // The remaining gap is below representable resolution.
                self.now = target;
                break;
            }
            if self.step_env(dt, detect)? {
                return Ok(Some(self.now));
            }
        }
        self.now = target;
        Ok(None)
    }

    /// Takes one Euler substep of at most `dt`. Returns true if a class
    /// boundary was crossed; the environment then sits just past the
    /// crossing instant.
    fn step_env(&mut self, dt: f64, detect: bool) -> Result<bool, SimError> {
        let power: f64 = self.ips.iter().map(|ip| ip.draw).sum();
        let apply = |h: f64| -> Result<(Battery, ThermalNode), SimError> {
            let b = self
                .battery
                .drain(power * h)
                .map_err(|e| SimError::Internal(e.to_string()))?;
            let n = self
                .node
                .step(power, h)
                .map_err(|e| SimError::Internal(e.to_string()))?;
            Ok((b, n))
        };
        let (full_b, full_n) = apply(dt)?;
        let crossed = detect && self.classes(&full_b, &full_n) != (self.tracked_battery, self.tracked_temp);
        let (h, next_b, next_n) = if crossed {
            // One Euler step is linear in its length, so the first crossing
            // is found by bisection; the committed step ends just past it.
            let mut lo = 0.0f64;
            let mut hi = dt;
            while hi - lo > 1e-6 {
                let mid = 0.5 * (lo + hi);
                let (mb, mn) = apply(mid)?;
                if self.classes(&mb, &mn) != (self.tracked_battery, self.tracked_temp) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (b, n) = apply(hi)?;
            (hi, b, n)
        } else {
            (dt, full_b, full_n)
        };

        let requested = power * h;
        let actual = self.battery.charge - next_b.charge;
        if self.battery.source == PowerSource::Battery {
            self.drained += actual;
            if next_b.charge == 0.0 {
                // Only an empty battery clamps; anything else is rounding.
                self.clamped += (requested - actual).max(0.0);
            }
        }
        for ip in &mut self.ips {
            ip.energy += ip.draw * h;
        }
        self.excess_temp_integral +=
            (0.5 * (self.node.temperature + next_n.temperature) - self.node.ambient) * h;
        self.battery = next_b;
        self.node = next_n;
        self.now += h;
        Ok(crossed)
    }

    /// Applies an instantaneous energy cost (a zero-delay transition): the
    /// battery drops and the node heats by E / c_th at a single instant.
    fn impulse(&mut self, idx: usize, energy: f64) {
        let before = self.battery.charge;
        let next = self.battery.drain(energy).expect("non-negative impulse");
        if self.battery.source == PowerSource::Battery {
            let actual = before - next.charge;
            self.drained += actual;
            if next.charge == 0.0 {
                self.clamped += (energy - actual).max(0.0);
            }
        }
        self.battery = next;
        self.node.temperature += energy / self.node.c_th;
        self.ips[idx].energy += energy;
    }

    // -- state machinery ----------------------------------------------------

    fn set_phase(&mut self, idx: usize, phase: Phase, draw: f64) {
        self.ips[idx].phase = phase;
        self.ips[idx].draw = draw;
    }

    fn begin_transition(&mut self, idx: usize, target: PowerState, purpose: Purpose) {
        let current = self.ips[idx].state;
        let cost = self.cfg.psm.transition(current, target);
        if cost.delay <= 0.0 {
            if cost.energy > 0.0 {
                self.impulse(idx, cost.energy);
            }
            self.set_phase(idx, Phase::Transitioning { target, purpose }, 0.0);
            self.queue.push(self.now, EventKind::TransitionComplete { ip: idx });
        } else {
            self.set_phase(
                idx,
                Phase::Transitioning { target, purpose },
                cost.energy / cost.delay,
            );
            self.queue
                .push(self.now + cost.delay, EventKind::TransitionComplete { ip: idx });
        }
    }

    fn start_execution(&mut self, idx: usize, exec_state: PowerState) -> Result<(), SimError> {
        let task = self.ips[idx]
            .pending
            .take()
            .ok_or_else(|| SimError::Internal("execution start without a pending task".into()))?;
        let (duration, energy) = self
            .cfg
            .psm
            .instruction_cost(exec_state, task.cycles)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        self.ips[idx].state = exec_state;
        self.set_phase(idx, Phase::Executing { task }, energy / duration);
        self.queue.push(self.now + duration, EventKind::TaskComplete { ip: idx });
        Ok(())
    }

    /// Parks an idle IP in shallow sleep after a denial or deferral. An IP
    /// already sleeping just stays where it is.
    fn park(&mut self, idx: usize) {
        if self.ips[idx].state.is_on() {
            self.begin_transition(idx, PowerState::Sl1, Purpose::Park);
        }
    }

    // -- request evaluation -------------------------------------------------

    /// Considers every pending task whose IP can act (idle, not mid
    /// transition), clears them with the arbiter when one is configured, and
    /// starts executions, deferrals, or denials accordingly.
    fn evaluate_requests(&mut self) -> Result<(), SimError> {
        let (battery, node) = (self.battery, self.node);
        let (b_class, t_class) = self.classes(&battery, &node);
        let requesters: Vec<usize> = self
            .ips
            .iter()
            .enumerate()
            .filter(|(_, ip)| ip.pending.is_some() && ip.phase == Phase::Idle)
            .map(|(i, _)| i)
            .collect();

        let enabled: Vec<bool> = match &self.gem {
            Some(gem) => {
                let names: Vec<&str> =
                    requesters.iter().map(|&i| self.ips[i].ip_id.as_str()).collect();
                let decision = gem
                    .arbitrate(b_class, t_class, &names)
                    .map_err(|e| SimError::Internal(e.to_string()))?;
                if decision.fan_on != self.node.fan_on {
                    self.queue
                        .push(self.now, EventKind::FanChange { on: decision.fan_on });
                }
                requesters
                    .iter()
                    .map(|&i| decision.enabled.contains(&self.ips[i].ip_id))
                    .collect()
            }
            None => vec![true; requesters.len()],
        };

        for (&idx, &ok) in requesters.iter().zip(&enabled) {
            if !ok {
                self.record(Some(idx), "deny", Some(PowerState::Sl1));
                self.park(idx);
                continue;
            }
            let task = self.ips[idx]
                .pending
                .ok_or_else(|| SimError::Internal("requester lost its pending task".into()))?;
            if self.mode == Mode::Baseline {
                self.record(Some(idx), "grant", Some(PowerState::On1));
                self.start_execution(idx, PowerState::On1)?;
                continue;
            }
            let others = match &self.gem {
                Some(gem) => gem
                    .others_energy(&self.ips[idx].ip_id)
                    .map_err(|e| SimError::Internal(e.to_string()))?,
                None => 0.0,
            };
            let chosen = decide_task_state(
                &task,
                true,
                others,
                &self.battery,
                &self.node,
                &self.cfg.thresholds,
                &self.cfg.rule_table,
                &self.cfg.psm,
            )
            .map_err(|e| SimError::Internal(e.to_string()))?;
            if chosen == PowerState::Sl1 {
                self.record(Some(idx), "defer", Some(PowerState::Sl1));
                self.park(idx);
                continue;
            }
            if let Some(gem) = &mut self.gem {
                let mut estimate = task_energy_estimate(&task, chosen, &self.cfg.psm)
                    .map_err(|e| SimError::Internal(e.to_string()))?;
                if self.cfg.estimate_noise > 0.0 {
                    let u = self.noise_rng.next_f64();
                    estimate *= 1.0 + self.cfg.estimate_noise * (2.0 * u - 1.0);
                }
                gem.post_estimate(&self.ips[idx].ip_id, estimate)
                    .map_err(|e| SimError::Internal(e.to_string()))?;
            }
            self.record(Some(idx), "grant", Some(chosen));
            if self.ips[idx].state == chosen {
                self.start_execution(idx, chosen)?;
            } else {
                self.begin_transition(idx, chosen, Purpose::Wake);
            }
        }
        Ok(())
    }

    // -- event handlers -----------------------------------------------------

    fn on_arrival(&mut self, idx: usize, task: Task) -> Result<(), SimError> {
        if self.mode == Mode::Managed {
            let observed = self.now - self.ips[idx].last_busy_end;
            self.ips[idx]
                .predictor
                .observe(observed.max(0.0))
                .map_err(|e| SimError::Internal(e.to_string()))?;
        }
        self.ips[idx].pending = Some(task);
        let state = self.ips[idx].state;
        self.record(Some(idx), "arrival", Some(state));
        self.evaluate_requests()
    }

    fn on_complete(&mut self, idx: usize) -> Result<(), SimError> {
        let Phase::Executing { task } = self.ips[idx].phase.clone() else {
            return Err(SimError::Internal("completion while not executing".into()));
        };
        self.tasks.push(TaskOutcome {
            ip: self.ips[idx].ip_id.clone(),
            task_id: task.id,
            cycles: task.cycles,
            arrival: task.arrival_time,
            completion: self.now,
        });
        self.ips[idx].tasks_completed += 1;
        self.ips[idx].last_busy_end = self.now;
        let state = self.ips[idx].state;
        self.set_phase(idx, Phase::Idle, self.cfg.psm.idle_power(state));

        if let Some(gem) = &mut self.gem {
            gem.clear_estimate(&self.ips[idx].ip_id)
                .map_err(|e| SimError::Internal(e.to_string()))?;
        }
        let next = self.ips[idx].generator.next_task(self.now);
        self.queue
            .push(next.arrival_time, EventKind::TaskArrival { ip: idx, task: next });
        self.record(Some(idx), "complete", Some(state));
        if self.mode == Mode::Managed {
            self.evaluate_requests()?;
            self.queue.push(self.now, EventKind::IdleTimeout { ip: idx });
        }
        Ok(())
    }

    fn on_transition_complete(&mut self, idx: usize) -> Result<(), SimError> {
        let Phase::Transitioning { target, purpose } = self.ips[idx].phase.clone() else {
            return Err(SimError::Internal("transition completion while not transitioning".into()));
        };
        self.ips[idx].state = target;
        self.set_phase(idx, Phase::Idle, self.cfg.psm.idle_power(target));
        self.record(Some(idx), "transition", Some(target));
        match purpose {
            Purpose::Wake => self.start_execution(idx, target)?,
            Purpose::Park => {
                // A task may have arrived mid-transition; consider it now.
                if self.ips[idx].pending.is_some() {
                    self.evaluate_requests()?;
                }
            }
        }
        Ok(())
    }

    fn on_idle_timeout(&mut self, idx: usize) -> Result<(), SimError> {
        let ip = &self.ips[idx];
        if ip.phase != Phase::Idle || ip.pending.is_some() || !ip.state.is_on() {
            return Ok(());
        }
        let Some(predicted) = ip.predictor.prediction() else {
            self.record(Some(idx), "stay", Some(self.ips[idx].state));
            return Ok(());
        };
        let state = ip.state;
        let target = choose_idle_state(predicted, state, &self.cfg.psm, self.cfg.allow_off);
        if target == state {
            self.record(Some(idx), "stay", Some(state));
        } else {
            self.record(Some(idx), "sleep", Some(target));
            self.begin_transition(idx, target, Purpose::Park);
        }
        Ok(())
    }

    fn on_class_change(&mut self) -> Result<(), SimError> {
        let (battery, node) = (self.battery, self.node);
        let (b, t) = self.classes(&battery, &node);
        self.tracked_battery = b;
        self.tracked_temp = t;
        self.record(None, "class", None);
        self.evaluate_requests()
    }

    fn on_fan_change(&mut self, on: bool) {
        self.node = self.node.set_fan(on);
        self.record(None, "fan", None);
    }

    // -- main loop ----------------------------------------------------------

    fn run_to_end(mut self) -> Result<SimResult, SimError> {
        loop {
            let Some(next_time) = self.queue.peek_time() else {
                return Err(SimError::Internal("event queue drained before the end".into()));
            };
            if let Some(crossing) = self.advance_env_until(next_time)? {
                self.queue.push(crossing, EventKind::ClassChange);
                continue;
            }
            let event = self.queue.pop().expect("peeked event exists");
            self.now = event.time;
            self.events_processed += 1;
            match event.kind {
                EventKind::TaskArrival { ip, task } => self.on_arrival(ip, task)?,
                EventKind::TaskComplete { ip } => self.on_complete(ip)?,
                EventKind::TransitionComplete { ip } => self.on_transition_complete(ip)?,
                EventKind::IdleTimeout { ip } => self.on_idle_timeout(ip)?,
                EventKind::ClassChange => self.on_class_change()?,
                EventKind::FanChange { on } => self.on_fan_change(on),
                EventKind::SimEnd => {
                    self.record(None, "end", None);
                    break;
                }
            }
        }
        let per_ip_energy: BTreeMap<String, f64> =
            self.ips.iter().map(|ip| (ip.ip_id.clone(), ip.energy)).collect();
        Ok(SimResult {
            scenario_name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            duration: self.cfg.duration,
            total_energy: self.total_energy(),
            per_ip_energy,
            avg_excess_temp: self.excess_temp_integral / self.cfg.duration,
            final_temperature: self.node.temperature,
            initial_charge: self.cfg.battery.charge,
            final_charge: self.battery.charge,
            drained_energy: self.drained,
            clamped_energy: self.clamped,
            tasks: self.tasks,
            tasks_completed: self.ips.iter().map(|ip| ip.tasks_completed).sum(),
            events_processed: self.events_processed,
            trace: self.trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ClassThresholds;
    use crate::lem::PriorityClass;
    use crate::psm::{EntryExit, PsmConfig, TransitionCost, TransitionSpec};
    use crate::workload::{
        preset, CycleBounds, EnvironmentConfig, GapBounds, GeneratorConfig, Scenario,
    };
    use std::collections::BTreeMap as Map;

    fn degenerate_generator(ip: &str, gap: f64, cycles: u64, priority: PriorityClass) -> GeneratorConfig {
        let mut weights = Map::new();
        weights.insert(priority, 1.0);
        GeneratorConfig {
            ip_id: ip.into(),
            static_priority: 1,
            activity: None,
            idle_gap: Some(GapBounds { min: gap, max: gap }),
            cycles: Some(CycleBounds { min: cycles, max: cycles }),
            priority_weights: Some(weights),
            seed: None,
        }
    }

    fn small_scenario() -> Scenario {
        Scenario {
            name: "unit".into(),
            seed: 1,
            duration: 0.25,
            allow_off: Some(false),
            psm: PsmConfig::default(),
            environment: EnvironmentConfig {
                battery: Battery {
                    capacity: 100.0,
                    charge: 90.0,
                    source: PowerSource::Battery,
                },
                thermal: ThermalNode {
                    temperature: 40.0,
                    ambient: 25.0,
                    r_th: 100.0,
                    c_th: 0.02,
                    fan_factor: 0.5,
                    fan_on: false,
                },
            },
            thresholds: ClassThresholds::default(),
            rules: None,
            rule_fallback: "ON4".into(),
            idle_alpha: 0.5,
            estimate_noise: 0.0,
            gem: None,
            generators: vec![degenerate_generator("ip0", 0.1, 10_000, PriorityClass::V)],
        }
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::default();
        q.push(2.0, EventKind::SimEnd);
        q.push(1.0, EventKind::ClassChange);
        q.push(1.0, EventKind::FanChange { on: true });
        q.push(0.5, EventKind::SimEnd);
        assert_eq!(q.peek_time(), Some(0.5));
        assert_eq!(q.pop().unwrap().time, 0.5);
        let a = q.pop().unwrap();
        assert_eq!(a.time, 1.0);
        assert_eq!(a.kind, EventKind::ClassChange, "FIFO within one instant");
        assert_eq!(q.pop().unwrap().kind, EventKind::FanChange { on: true });
        assert_eq!(q.pop().unwrap().time, 2.0);
        assert!(q.pop().is_none());
    }

    #[test]
    fn baseline_two_task_arithmetic() {
        let cfg = small_scenario().compile().unwrap();
        let r = run_baseline(&cfg).unwrap();
        // Arrivals at 0.1 and 0.2001; each executes for 1e-4 s at 0.5 W; the
        // rest of the 0.25 s horizon idles at 0.4 W.
        assert_eq!(r.tasks_completed, 2);
        let exec_time = 2.0 * 1e-4;
        let idle_time = 0.25 - exec_time;
        let expect = 0.5 * exec_time + 0.4 * idle_time;
        assert!((r.total_energy - expect).abs() < 1e-12, "{}", r.total_energy);
        assert!((r.final_charge - (90.0 - expect)).abs() < 1e-9);
        for t in &r.tasks {
            assert!((t.latency() - 1e-4).abs() < 1e-16 * 1e4);
        }
    }

    #[test]
    fn baseline_latency_is_nominal_execution_time() {
        let cfg = preset("a1").unwrap();
        let mut cfg = cfg;
        cfg.duration = 0.2;
        let compiled = cfg.compile().unwrap();
        let r = run_baseline(&compiled).unwrap();
        assert!(r.tasks_completed > 10);
        for t in &r.tasks {
            let nominal = t.cycles as f64 * compiled.psm.nominal_cycle_time;
            assert!(
                (t.latency() - nominal).abs() <= 1e-12 * nominal.max(1.0),
                "latency {} vs nominal {}",
                t.latency(),
                nominal
            );
        }
    }

    #[test]
    fn short_gaps_keep_the_ip_awake_and_match_baseline() {
        // Gaps shorter than the shallowest break-even time: the managed run
        // must never transition and must cost exactly the baseline energy.
        let mut s = small_scenario();
        s.generators = vec![degenerate_generator("ip0", 2.0e-4, 10_000, PriorityClass::V)];
        let cfg = s.compile().unwrap();
        let dpm = run(&cfg).unwrap();
        let base = run_baseline(&cfg).unwrap();
        assert!(dpm.tasks_completed > 100);
        assert_eq!(dpm.tasks_completed, base.tasks_completed);
        assert!(!dpm.trace.iter().any(|r| r.event == "transition"));
        assert!(!dpm.trace.iter().any(|r| r.event == "sleep"));
        assert!((dpm.total_energy - base.total_energy).abs() < 1e-12 * base.total_energy);
    }

    #[test]
    fn long_gaps_sleep_and_save_energy() {
        let cfg = small_scenario().compile().unwrap();
        let dpm = run(&cfg).unwrap();
        let base = run_baseline(&cfg).unwrap();
        assert!(dpm.trace.iter().any(|r| r.event == "sleep"));
        assert!(dpm.total_energy < base.total_energy);
        assert_eq!(dpm.tasks_completed, base.tasks_completed);
    }

    #[test]
    fn energy_ledger_balances() {
        let cfg = small_scenario().compile().unwrap();
        for r in [run(&cfg).unwrap(), run_baseline(&cfg).unwrap()] {
            assert!(
                (r.total_energy - (r.drained_energy + r.clamped_energy)).abs()
                    <= 1e-9 * r.total_energy.max(1.0)
            );
            assert!(
                (r.initial_charge - r.final_charge - r.drained_energy).abs() <= 1e-9
            );
            assert_eq!(r.clamped_energy, 0.0);
        }
    }

    #[test]
    fn power_supply_never_drains() {
        let mut s = small_scenario();
        s.environment.battery.source = PowerSource::PowerSupply;
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        assert_eq!(r.final_charge, r.initial_charge);
        assert_eq!(r.drained_energy, 0.0);
        assert!(r.total_energy > 0.0);
    }

    #[test]
    fn instant_transitions_drain_as_impulses() {
        // Shallow sleep costs no time, only a small energy kick. Gaps of
        // 1e-4 s qualify SL1 alone, so every park exercises the zero-delay
        // path.
        let mut s = small_scenario();
        s.generators = vec![degenerate_generator("ip0", 1e-4, 10_000, PriorityClass::V)];
        let TransitionSpec::EntryExit { entry_exit } = &mut s.psm.transitions else {
            unreachable!()
        };
        entry_exit.insert(
            PowerState::Sl1,
            EntryExit {
                entry: TransitionCost { delay: 0.0, energy: 3e-6 },
                exit: TransitionCost { delay: 0.0, energy: 4e-6 },
            },
        );
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        assert!(r.trace.iter().any(|t| t.event == "sleep"));
        // Conservation still holds with the impulse path in play.
        assert!(
            (r.total_energy - (r.drained_energy + r.clamped_energy)).abs()
                <= 1e-9 * r.total_energy.max(1.0)
        );
        assert!((r.initial_charge - r.final_charge - r.drained_energy).abs() <= 1e-9);
    }

    #[test]
    fn zero_gap_arrivals_chain_executions() {
        let mut s = small_scenario();
        s.duration = 0.01;
        s.generators = vec![degenerate_generator("ip0", 0.0, 10_000, PriorityClass::V)];
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        // Back-to-back tasks: one every 1e-4 s of pure execution.
        assert!(r.tasks_completed >= 95, "{}", r.tasks_completed);
        assert!(!r.trace.iter().any(|t| t.event == "sleep"));
    }

    #[test]
    fn arbitration_parks_low_rank_ips() {
        let mut s = small_scenario();
        s.duration = 0.05;
        s.environment.battery.charge = 15.0; // Low
        s.gem = Some(crate::gem::GemConfig { priority_threshold: 1 });
        s.generators = vec![
            degenerate_generator("lead", 1e-3, 10_000, PriorityClass::H),
            {
                let mut g = degenerate_generator("tail", 1e-3, 10_000, PriorityClass::H);
                g.static_priority = 2;
                g
            },
        ];
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        let completed_by = |ip: &str| r.tasks.iter().filter(|t| t.ip == ip).count();
        assert!(completed_by("lead") > 10);
        assert_eq!(completed_by("tail"), 0);
        assert!(r
            .trace
            .iter()
            .any(|t| t.event == "deny" && t.ip.as_deref() == Some("tail")));
        // The denied IP ends parked in shallow sleep.
        let last_tail_transition = r
            .trace
            .iter()
            .rev()
            .find(|t| t.event == "transition" && t.ip.as_deref() == Some("tail"))
            .expect("tail parked at least once");
        assert_eq!(last_tail_transition.state, Some(PowerState::Sl1));
    }

    #[test]
    fn hot_start_parks_everyone_until_the_fan_cools_the_chip() {
        let mut s = small_scenario();
        s.duration = 0.05;
        s.environment.thermal.temperature = 86.0;
        s.environment.thermal.r_th = 30.0;
        s.gem = Some(crate::gem::GemConfig::default());
        s.generators = vec![degenerate_generator("ip0", 1e-4, 20_000, PriorityClass::H)];
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        let first = |event: &str| r.trace.iter().find(|t| t.event == event).map(|t| t.time);
        let fan_at = first("fan").expect("fan turned on");
        let class_at = first("class").expect("chip cooled below the hot bound");
        let grant_at = first("grant").expect("work resumed");
        assert!(first("deny").unwrap() < class_at);
        assert!(fan_at < class_at);
        assert!(grant_at >= class_at);
        assert!(r.tasks_completed >= 1);
        assert!(r.final_temperature < 86.0);
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let mut s = preset("a1").unwrap();
        s.duration = 0.2;
        let cfg = s.compile().unwrap();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.trace_csv(), b.trace_csv());
        assert_eq!(a.total_energy, b.total_energy);
        assert_eq!(a.final_charge, b.final_charge);
    }

    #[test]
    fn csv_layout_is_stable() {
        let mut s = small_scenario();
        s.duration = 0.06;
        let cfg = s.compile().unwrap();
        let r = run(&cfg).unwrap();
        let csv = r.trace_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time_s,ip,event,state,battery_J,temp_C,cum_energy_J"
        );
        assert_eq!(csv.lines().count(), r.trace.len() + 1);
        let end_line = csv.lines().last().unwrap();
        assert!(end_line.contains(",-,end,-,"), "global rows use placeholders: {end_line}");
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 7, "{line}");
        }
    }

    #[test]
    fn metrics_of_identical_runs_are_zero() {
        let cfg = small_scenario().compile().unwrap();
        let r = run_baseline(&cfg).unwrap();
        let m = compute_metrics(&r, &r).unwrap();
        assert_eq!(m.energy_saving_pct, 0.0);
        assert_eq!(m.temp_reduction_pct, 0.0);
        assert_eq!(m.avg_delay_overhead_pct, 0.0);
        assert_eq!(m.matched_tasks as u64, r.tasks_completed);
    }

    fn synthetic_result(energy: f64, excess: f64, latency: f64, n: u64) -> SimResult {
        SimResult {
            scenario_name: "synthetic".into(),
            seed: 0,
            duration: 1.0,
            total_energy: energy,
            per_ip_energy: Map::new(),
            avg_excess_temp: excess,
            final_temperature: 0.0,
            initial_charge: 0.0,
            final_charge: 0.0,
            drained_energy: 0.0,
            clamped_energy: 0.0,
            tasks: (0..n)
                .map(|i| TaskOutcome {
                    ip: "x".into(),
                    task_id: i,
                    cycles: 1,
                    arrival: i as f64,
                    completion: i as f64 + latency,
                })
                .collect(),
            tasks_completed: n,
            events_processed: 0,
            trace: Vec::new(),
        }
    }

    #[test]
    fn metrics_match_hand_computed_examples() {
        let base = synthetic_result(100.0, 13.56, 10.0, 5);
        let dpm = synthetic_result(45.0, 10.0, 13.56, 5);
        let m = compute_metrics(&dpm, &base).unwrap();
        assert!((m.energy_saving_pct - 55.0).abs() < 1e-12);
        assert!((m.temp_reduction_pct - 100.0 * 3.56 / 13.56).abs() < 1e-12);
        assert!((m.avg_delay_overhead_pct - 35.6).abs() < 1e-12);
        assert_eq!(m.matched_tasks, 5);
    }

    #[test]
    fn unmatched_tasks_are_ignored() {
        let base = synthetic_result(100.0, 10.0, 10.0, 6);
        let dpm = synthetic_result(80.0, 8.0, 20.0, 3);
        let m = compute_metrics(&dpm, &base).unwrap();
        assert_eq!(m.matched_tasks, 3);
        assert!((m.avg_delay_overhead_pct - 100.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_baselines_are_errors() {
        let good = synthetic_result(10.0, 5.0, 1.0, 2);
        let no_energy = synthetic_result(0.0, 5.0, 1.0, 2);
        assert!(matches!(
            compute_metrics(&good, &no_energy),
            Err(MetricsError::DegenerateBaseline(_))
        ));
        let no_excess = synthetic_result(10.0, 0.0, 1.0, 2);
        assert!(matches!(
            compute_metrics(&good, &no_excess),
            Err(MetricsError::DegenerateBaseline(_))
        ));
        let no_tasks = synthetic_result(10.0, 5.0, 1.0, 0);
        assert!(matches!(
            compute_metrics(&no_tasks, &good),
            Err(MetricsError::DegenerateBaseline(_))
        ));
    }

    #[test]
    fn managed_run_never_exceeds_event_horizon() {
        let cfg = small_scenario().compile().unwrap();
        let r = run(&cfg).unwrap();
        for t in &r.trace {
            assert!(t.time <= cfg.duration + 1e-12);
        }
        assert_eq!(r.trace.last().unwrap().event, "end");
    }
}
