//! Interactive what-if state: the original log, the current model, and the
//! append-only list of simulated scenarios.

use std::collections::BTreeMap;
use std::sync::Arc;

use ptsim_core::comparison::{compare_logs, CompareError, Comparison};
use ptsim_core::enrichment::{apply_patch, EnrichError};
use ptsim_core::event_log::{ingest_csv, to_csv_string, ColumnMapping, LogError, TimestampFormat, Variant};
use ptsim_core::simulator::{simulate, waiting_time_report, SimError};
use ptsim_core::spectrum::{spectrum_diff, Presence, SpectrumDiffRecord};
use ptsim_core::{EnrichedTree, EventLog, ParameterPatch, SimulationConfig};
use serde::{Deserialize, Serialize};

/// Rows of the effort matrix included in a scenario report.
pub const REPORT_EFFORT_ROWS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Model(#[from] EnrichError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Comparison(#[from] CompareError),
}

impl SessionError {
    pub fn name(&self) -> &'static str {
        match self {
            SessionError::Log(e) => e.name(),
            SessionError::Model(e) => e.name(),
            SessionError::Simulation(e) => e.name(),
            SessionError::Comparison(e) => e.name(),
        }
    }
}

/// One simulation of the session model; never modified once created.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    /// Model revision the scenario was simulated from.
    pub revision: u64,
    /// Patches applied to the model since the previous scenario.
    pub patches: Vec<ParameterPatch>,
    pub config: SimulationConfig,
    pub model: EnrichedTree,
    #[serde(skip)]
    pub log: EventLog,
    pub comparison: Comparison,
    pub spectrum: Vec<SpectrumDiffRecord>,
    pub waiting_times: BTreeMap<String, f64>,
}

impl Scenario {
    pub fn compute(
        original: &EventLog,
        model: &EnrichedTree,
        config: SimulationConfig,
        revision: u64,
        patches: Vec<ParameterPatch>,
    ) -> Result<Self, SessionError> {
        let run = simulate(model, &config)?;
        if run.log.is_empty() {
            return Err(SessionError::Log(LogError::EmptyLog));
        }
        let comparison = compare_logs(original, &run.log)?;
        let spectrum = spectrum_diff(original, &run.log, None);
        let waiting_times = waiting_time_report(&run)?;
        Ok(Self {
            revision,
            patches,
            config,
            model: model.clone(),
            log: run.log,
            comparison,
            spectrum,
            waiting_times,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffortRow {
    pub variant: Variant,
    pub frequency: f64,
    pub exact_match: bool,
    /// (column index, effort) for every nonzero effort.
    pub efforts: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub counts: BTreeMap<String, usize>,
    /// The records with the largest |avg_time_delta|, at most five.
    pub largest_changes: Vec<SpectrumDiffRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub session_id: String,
    pub revision: u64,
    pub scenario: usize,
    pub patches: Vec<ParameterPatch>,
    pub config: SimulationConfig,
    pub new_fraction: f64,
    pub removed_fraction: f64,
    pub delta: ptsim_core::BehaviorDelta,
    pub emd: f64,
    pub effort_rows: Vec<EffortRow>,
    pub col_variants: Vec<Variant>,
    pub spectrum: SpectrumSummary,
    pub waiting_times: BTreeMap<String, f64>,
}

fn presence_name(p: Presence) -> String {
    serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub struct Session {
    pub id: String,
    pub original_log: EventLog,
    pub model: EnrichedTree,
    pub revision: u64,
    /// Run settings; patches may change them.
    pub config: SimulationConfig,
    pending: Vec<ParameterPatch>,
    scenarios: Vec<Arc<Scenario>>,
}

/// Settings a simulate request may override.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverride {
    pub number_of_cases: Option<u32>,
    pub start_time: Option<i64>,
    pub seed: Option<u64>,
    pub process_capacity: Option<u32>,
}

impl Session {
    /// Default run settings replay the original log's size and start.
    pub fn new(id: String, original_log: EventLog, model: EnrichedTree) -> Self {
        let start_time = original_log.events().map(|e| e.timestamp).min().unwrap_or(0);
        let config = SimulationConfig {
            number_of_cases: original_log.len().max(1) as u32,
            start_time,
            seed: 0,
            process_capacity: None,
        };
        Self {
            id,
            original_log,
            model,
            revision: 0,
            config,
            pending: Vec::new(),
            scenarios: Vec::new(),
        }
    }

    pub fn apply(&mut self, patch: ParameterPatch) -> Result<&EnrichedTree, SessionError> {
        self.model = apply_patch(&self.model, &patch)?;
        self.config = self.config.patched(&patch);
        self.revision += 1;
        self.pending.push(patch);
        Ok(&self.model)
    }

    pub fn effective_config(&self, o: &ConfigOverride) -> SimulationConfig {
        SimulationConfig {
            number_of_cases: o.number_of_cases.unwrap_or(self.config.number_of_cases),
            start_time: o.start_time.unwrap_or(self.config.start_time),
            seed: o.seed.unwrap_or(self.config.seed),
            process_capacity: o.process_capacity.or(self.config.process_capacity),
        }
    }

    /// Patches waiting for the next scenario.
    pub fn pending(&self) -> &[ParameterPatch] {
        &self.pending
    }

    /// Appends a scenario computed from `revision`; returns its index.
    pub fn push(&mut self, scenario: Scenario) -> usize {
        let consumed = self
            .pending
            .len()
            .min(scenario.patches.len());
        self.pending.drain(..consumed);
        self.scenarios.push(Arc::new(scenario));
        self.scenarios.len() - 1
    }

    pub fn scenario(&self, k: usize) -> Option<Arc<Scenario>> {
        self.scenarios.get(k).cloned()
    }

    pub fn scenarios(&self) -> &[Arc<Scenario>] {
        &self.scenarios
    }

    pub fn report(&self, k: usize) -> Option<ScenarioReport> {
        let s = self.scenarios.get(k)?;
        let plan = &s.comparison.plan;
        let effort_rows = plan
            .row_variants
            .iter()
            .enumerate()
            .take(REPORT_EFFORT_ROWS)
            .map(|(i, v)| EffortRow {
                variant: v.clone(),
                frequency: plan.row_frequencies[i],
                exact_match: plan.exact_match[i],
                efforts: plan.efforts[i]
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| **e > 0.0)
                    .map(|(j, e)| (j, *e))
                    .collect(),
            })
            .collect();
        let mut counts = BTreeMap::new();
        for r in &s.spectrum {
            *counts.entry(presence_name(r.presence)).or_insert(0) += 1;
        }
        Some(ScenarioReport {
            session_id: self.id.clone(),
            revision: self.revision,
            scenario: k,
            patches: s.patches.clone(),
            config: s.config,
            new_fraction: s.comparison.delta.new_fraction,
            removed_fraction: s.comparison.delta.removed_fraction,
            delta: s.comparison.delta.clone(),
            emd: plan.emd,
            effort_rows,
            col_variants: plan.col_variants.clone(),
            spectrum: SpectrumSummary {
                counts,
                largest_changes: s.spectrum.iter().take(5).cloned().collect(),
            },
            waiting_times: s.waiting_times.clone(),
        })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            id: self.id.clone(),
            revision: self.revision,
            original_log: to_csv_string(&self.original_log),
            model: self.model.clone(),
            config: self.config,
            pending: self.pending.clone(),
            scenarios: self
                .scenarios
                .iter()
                .map(|s| SnapshotScenario {
                    revision: s.revision,
                    patches: s.patches.clone(),
                    config: s.config,
                    model: s.model.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a session; scenarios are re-simulated from their stored
    /// model and config, which reproduces them exactly.
    pub fn restore(snapshot: Snapshot) -> Result<Self, SessionError> {
        let original_log = ingest_csv(snapshot.original_log.as_bytes(), &ColumnMapping::default(), &TimestampFormat::default())?;
        snapshot.model.validate()?;
        let mut scenarios = Vec::new();
        for s in snapshot.scenarios {
            let scenario = Scenario::compute(&original_log, &s.model, s.config, s.revision, s.patches)?;
            scenarios.push(Arc::new(scenario));
        }
        Ok(Self {
            id: snapshot.id,
            original_log,
            model: snapshot.model,
            revision: snapshot.revision,
            config: snapshot.config,
            pending: snapshot.pending,
            scenarios,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotScenario {
    pub revision: u64,
    pub patches: Vec<ParameterPatch>,
    pub config: SimulationConfig,
    pub model: EnrichedTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub revision: u64,
    /// The original log in CSV form.
    pub original_log: String,
    pub model: EnrichedTree,
    pub config: SimulationConfig,
    pub pending: Vec<ParameterPatch>,
    pub scenarios: Vec<SnapshotScenario>,
}
