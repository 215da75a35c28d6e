//! Regenerate a business process from its event log and measure what-if
//! changes.
//!
//! The pipeline is: [`event_log`] ingestion, [`discovery`] of a
//! [`process_tree::ProcessTree`], [`enrichment`] into a simulation model,
//! [`simulator`] play-out back into an event log, and comparison of the two
//! logs by activity flow ([`comparison`]) and performance ([`spectrum`]).

pub mod comparison;
pub mod discovery;
pub mod enrichment;
pub mod event_log;
pub mod process_tree;
pub mod simulator;
pub mod spectrum;

pub use event_log::{EventLog, Variant, VariantDistribution};
pub use process_tree::{Operator, ProcessTree, TreeEdge};
pub use enrichment::{EnrichedTree, ParameterPatch};
pub use simulator::{simulate, SimulationConfig, SimulationRun};
pub use comparison::{compare_logs, BehaviorDelta, Comparison, TransportPlan};
pub use spectrum::{spectrum_diff, Presence, SegmentStats, SpectrumDiffRecord};
