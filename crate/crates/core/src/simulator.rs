//! Discrete-event play-out of an [`EnrichedTree`] into an event log.
//!
//! Draw order per case, all from one ChaCha8 stream seeded by the config:
//! the interarrival gap (none for the first case), then the control-flow
//! choices in pre-order (XOR child, loop redo coin, redo child), then one
//! duration per emitted activity in emission order. Scheduling itself draws
//! nothing, so a case's behavior is independent of contention.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enrichment::{ArrivalKind, EnrichError, EnrichedTree, ParameterPatch};
use crate::event_log::{Event, EventLog, Trace, Variant};
use crate::process_tree::{flatten, FlatKind, FlatNode, Operator};

const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NotASimulatedLog: waiting times need the engine's schedule")]
    NotASimulatedLog,
    #[error(transparent)]
    Model(#[from] EnrichError),
}

impl SimError {
    pub fn name(&self) -> &'static str {
        match self {
            SimError::InvalidConfig(_) => "InvalidConfig",
            SimError::NotASimulatedLog => "NotASimulatedLog",
            SimError::Model(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub number_of_cases: u32,
    /// Epoch milliseconds.
    pub start_time: i64,
    pub seed: u64,
    /// Overrides the model's process capacity when set.
    pub process_capacity: Option<u32>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            number_of_cases: 100,
            start_time: 0,
            seed: 0,
            process_capacity: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.number_of_cases < 1 {
            return Err(SimError::InvalidConfig("number_of_cases ≥ 1".into()));
        }
        if self.process_capacity == Some(0) {
            return Err(SimError::InvalidConfig("process_capacity ≥ 1".into()));
        }
        Ok(())
    }

    /// Takes over the run settings carried by a patch.
    pub fn patched(&self, patch: &ParameterPatch) -> Self {
        Self {
            number_of_cases: patch.number_of_cases.unwrap_or(self.number_of_cases),
            start_time: patch.start_time.unwrap_or(self.start_time),
            seed: patch.seed.unwrap_or(self.seed),
            process_capacity: self.process_capacity,
        }
    }
}

/// One executed activity as the engine saw it; all instants in epoch ms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub case_id: String,
    pub activity: String,
    pub org: String,
    pub resource: String,
    pub enqueue: i64,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub log: EventLog,
    /// Engine schedule; absent for logs that were not simulated.
    pub schedule: Option<Vec<ScheduledTask>>,
}

impl SimulationRun {
    /// Wraps a log of unknown origin, for which no schedule exists.
    pub fn observed(log: EventLog) -> Self {
        Self { log, schedule: None }
    }
}

/// A case's resolved control flow: choices made, loops unrolled.
#[derive(Debug, Clone, PartialEq)]
enum Instance {
    Task(String),
    Seq(Vec<Instance>),
    Par(Vec<Instance>),
}

fn instantiate(model: &EnrichedTree, flat: &[FlatNode], id: usize, rng: &mut ChaCha8Rng) -> Instance {
    let node = &flat[id];
    match &node.kind {
        FlatKind::Activity(a) => Instance::Task(a.clone()),
        FlatKind::Silent => Instance::Seq(Vec::new()),
        FlatKind::Op(Operator::Sequence) => {
            Instance::Seq(node.children.iter().map(|&c| instantiate(model, flat, c, rng)).collect())
        }
        FlatKind::Op(Operator::Parallel) => {
            Instance::Par(node.children.iter().map(|&c| instantiate(model, flat, c, rng)).collect())
        }
        FlatKind::Op(Operator::Xor) => {
            let weights = &model.xor_weights[&id];
            let k = WeightedIndex::new(weights).expect("validated weights").sample(rng);
            instantiate(model, flat, node.children[k], rng)
        }
        FlatKind::Op(Operator::Loop) => {
            let params = model.loop_params[&id];
            let (body, redo) = (node.children[0], node.children[1]);
            let mut parts = vec![instantiate(model, flat, body, rng)];
            let mut redos = 0;
            while redos < params.max_redos && rng.random::<f64>() < params.redo_probability {
                parts.push(instantiate(model, flat, redo, rng));
                parts.push(instantiate(model, flat, body, rng));
                redos += 1;
            }
            Instance::Seq(parts)
        }
    }
}

fn interleave(inst: &Instance, rng: &mut ChaCha8Rng, out: &mut Variant) {
    match inst {
        Instance::Task(a) => out.push(a.clone()),
        Instance::Seq(parts) => parts.iter().for_each(|p| interleave(p, rng, out)),
        Instance::Par(parts) => {
            let mut branches: Vec<VecDeque<String>> = parts
                .iter()
                .map(|p| {
                    let mut v = Vec::new();
                    interleave(p, rng, &mut v);
                    v.into()
                })
                .collect();
            let mut remaining: usize = branches.iter().map(VecDeque::len).sum();
            while remaining > 0 {
                // a branch is picked in proportion to its pending length,
                // which makes every interleaving equally likely
                let mut pick = rng.random_range(0..remaining);
                let b = branches
                    .iter()
                    .position(|b| {
                        if pick < b.len() {
                            true
                        } else {
                            pick -= b.len();
                            false
                        }
                    })
                    .expect("pick within remaining");
                out.push(branches[b].pop_front().expect("non-empty branch"));
                remaining -= 1;
            }
        }
    }
}

/// Draws one activity sequence from the model's control flow.
pub fn playout_control_flow(model: &EnrichedTree, rng: &mut ChaCha8Rng) -> Variant {
    let flat = flatten(&model.tree);
    let inst = instantiate(model, &flat, 0, rng);
    let mut out = Vec::new();
    interleave(&inst, rng, &mut out);
    out
}

/// Normal(mean, std) truncated below at 0 by resampling; seconds in, ms out.
fn sample_duration(mean: f64, std: f64, rng: &mut ChaCha8Rng) -> i64 {
    let seconds = if std == 0.0 {
        mean
    } else {
        let normal = Normal::new(mean, std).expect("finite non-negative std");
        (0..MAX_RESAMPLES)
            .map(|_| normal.sample(rng))
            .find(|x| *x >= 0.0)
            .unwrap_or(0.0)
    };
    (seconds * 1000.0).round() as i64
}

struct Task {
    activity: String,
    org: String,
    duration: i64,
    successors: Vec<usize>,
    pending: usize,
}

/// Turns an instance into tasks with precedence; returns the exits.
fn build_tasks(inst: &Instance, preds: Vec<usize>, tasks: &mut Vec<Task>, model: &EnrichedTree) -> Vec<usize> {
    match inst {
        Instance::Task(a) => {
            let id = tasks.len();
            tasks.push(Task {
                activity: a.clone(),
                org: model.activity_org[a].clone(),
                duration: 0,
                successors: Vec::new(),
                pending: preds.len(),
            });
            for p in preds {
                tasks[p].successors.push(id);
            }
            vec![id]
        }
        Instance::Seq(parts) => parts.iter().fold(preds, |frontier, p| build_tasks(p, frontier, tasks, model)),
        Instance::Par(parts) => {
            let mut exits = Vec::new();
            for p in parts {
                exits.extend(build_tasks(p, preds.clone(), tasks, model));
            }
            exits
        }
    }
}

struct Case {
    arrival: i64,
    tasks: Vec<Task>,
    open: usize,
    events: Vec<(i64, usize, Event)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Arrive(usize),
    Finish { case: usize, task: usize, slot: usize },
    Wake(usize),
}

struct Pool {
    name: String,
    labels: Vec<String>,
    free: BTreeSet<usize>,
    queue: VecDeque<(usize, usize, i64)>,
    wake: Option<i64>,
}

struct Engine<'m> {
    model: &'m EnrichedTree,
    cases: Vec<Case>,
    pools: Vec<Pool>,
    pool_of: BTreeMap<String, usize>,
    agenda: BinaryHeap<Reverse<(i64, u64, Action)>>,
    seq: u64,
    capacity: Option<u32>,
    active: u32,
    waiting_cases: VecDeque<usize>,
    schedule: Vec<ScheduledTask>,
}

impl<'m> Engine<'m> {
    fn push(&mut self, at: i64, action: Action) {
        self.seq += 1;
        self.agenda.push(Reverse((at, self.seq, action)));
    }

    fn start_case(&mut self, c: usize, now: i64) {
        self.active += 1;
        let ready: Vec<usize> = (0..self.cases[c].tasks.len())
            .filter(|&t| self.cases[c].tasks[t].pending == 0)
            .collect();
        if self.cases[c].open == 0 {
            self.finish_case(now);
            return;
        }
        for t in ready {
            self.enqueue(c, t, now);
        }
    }

    fn finish_case(&mut self, now: i64) {
        self.active -= 1;
        if let Some(next) = self.waiting_cases.pop_front() {
            self.start_case(next, now);
        }
    }

    fn enqueue(&mut self, c: usize, t: usize, now: i64) {
        let p = self.pool_of[&self.cases[c].tasks[t].org];
        self.pools[p].queue.push_back((c, t, now));
        self.dispatch(p, now);
    }

    fn dispatch(&mut self, p: usize, now: i64) {
        while !self.pools[p].queue.is_empty() && !self.pools[p].free.is_empty() {
            let allowed = self.model.next_start_allowed(now);
            if allowed > now {
                if self.pools[p].wake.is_none_or(|w| w > allowed || w < now) {
                    self.pools[p].wake = Some(allowed);
                    self.push(allowed, Action::Wake(p));
                }
                return;
            }
            let (c, t, enqueued) = self.pools[p].queue.pop_front().expect("non-empty queue");
            let slot = self.pools[p].free.pop_first().expect("free slot");
            let task = &self.cases[c].tasks[t];
            let end = now + task.duration;
            self.schedule.push(ScheduledTask {
                case_id: (c + 1).to_string(),
                activity: task.activity.clone(),
                org: self.pools[p].name.clone(),
                resource: self.pools[p].labels[slot].clone(),
                enqueue: enqueued,
                start: now,
                end,
            });
            self.push(end, Action::Finish { case: c, task: t, slot });
        }
    }

    fn finish(&mut self, c: usize, t: usize, slot: usize, now: i64) {
        let p = self.pool_of[&self.cases[c].tasks[t].org];
        self.pools[p].free.insert(slot);
        let case_id = (c + 1).to_string();
        let event = Event::new(&case_id, &self.cases[c].tasks[t].activity, &self.pools[p].labels[slot], now);
        self.cases[c].events.push((now, t, event));
        self.cases[c].open -= 1;
        let successors = std::mem::take(&mut self.cases[c].tasks[t].successors);
        for s in successors {
            self.cases[c].tasks[s].pending -= 1;
            if self.cases[c].tasks[s].pending == 0 {
                self.enqueue(c, s, now);
            }
        }
        self.dispatch(p, now);
        if self.cases[c].open == 0 {
            self.finish_case(now);
        }
    }

    fn run(&mut self) {
        while let Some(Reverse((now, _, action))) = self.agenda.pop() {
            match action {
                Action::Arrive(c) => {
                    if self.capacity.is_some_and(|cap| self.active >= cap) {
                        self.waiting_cases.push_back(c);
                    } else {
                        self.start_case(c, now);
                    }
                }
                Action::Finish { case, task, slot } => self.finish(case, task, slot, now),
                Action::Wake(p) => {
                    if self.pools[p].wake == Some(now) {
                        self.pools[p].wake = None;
                    }
                    self.dispatch(p, now);
                }
            }
        }
    }
}

/// Simulates `config.number_of_cases` cases. Cases whose play-out emits no
/// activity have no events and are therefore absent from the log.
pub fn simulate(model: &EnrichedTree, config: &SimulationConfig) -> Result<SimulationRun, SimError> {
    model.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let flat = flatten(&model.tree);
    let exp = Exp::new(1.0 / model.arrival).map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let mut cases = Vec::with_capacity(config.number_of_cases as usize);
    let mut clock = config.start_time;
    for i in 0..config.number_of_cases {
        if i > 0 {
            let gap = match model.arrival_kind {
                ArrivalKind::Exponential => exp.sample(&mut rng),
                ArrivalKind::Fixed => model.arrival,
            };
            clock += (gap * 1000.0).round() as i64;
        }
        let inst = instantiate(model, &flat, 0, &mut rng);
        let mut tasks = Vec::new();
        build_tasks(&inst, Vec::new(), &mut tasks, model);
        for t in tasks.iter_mut() {
            let s = model.activity_stats[&t.activity];
            t.duration = sample_duration(s.mean_duration, s.std_duration, &mut rng);
        }
        cases.push(Case {
            arrival: clock,
            open: tasks.len(),
            tasks,
            events: Vec::new(),
        });
    }

    let mut pools = Vec::new();
    let mut pool_of = BTreeMap::new();
    for (name, org) in &model.organizations {
        let resources: Vec<&String> = org.resources.iter().collect();
        let labels = (0..org.capacity as usize)
            .map(|k| resources.get(k).map(|r| r.to_string()).unwrap_or_else(|| format!("{name}_{}", k + 1)))
            .collect();
        pool_of.insert(name.clone(), pools.len());
        pools.push(Pool {
            name: name.clone(),
            labels,
            free: (0..org.capacity as usize).collect(),
            queue: VecDeque::new(),
            wake: None,
        });
    }

    let mut engine = Engine {
        model,
        cases,
        pools,
        pool_of,
        agenda: BinaryHeap::new(),
        seq: 0,
        capacity: config.process_capacity.or(model.process_capacity),
        active: 0,
        waiting_cases: VecDeque::new(),
        schedule: Vec::new(),
    };
    for c in 0..engine.cases.len() {
        let at = engine.cases[c].arrival;
        engine.push(at, Action::Arrive(c));
    }
    engine.run();

    let mut traces = Vec::new();
    for (i, case) in engine.cases.into_iter().enumerate() {
        if case.events.is_empty() {
            continue;
        }
        let mut events = case.events;
        events.sort_by_key(|(at, task, _)| (*at, *task));
        let events = events.into_iter().map(|(_, _, e)| e).collect();
        traces.push(Trace::new((i + 1).to_string(), events).expect("engine emits ordered traces"));
    }
    let log = EventLog::new(traces).expect("case ids are unique");
    Ok(SimulationRun {
        log,
        schedule: Some(engine.schedule),
    })
}

/// Mean queueing delay (service start − enqueue) per activity, seconds.
pub fn waiting_time_report(run: &SimulationRun) -> Result<BTreeMap<String, f64>, SimError> {
    let schedule = run.schedule.as_ref().ok_or(SimError::NotASimulatedLog)?;
    let mut sums: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for t in schedule {
        let e = sums.entry(t.activity.as_str()).or_insert((0.0, 0));
        e.0 += (t.start - t.enqueue) as f64 / 1000.0;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(a, (s, n))| (a.to_string(), s / n as f64)).collect())
}
