//! Run events and the sink they are streamed to.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Local training iteration (past-task constraints).
    Local,
    /// Post-aggregation fine-tuning iteration (pre-aggregation constraint).
    Finetune,
}

/// One gradient step's integration outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationEvent {
    pub task: usize,
    pub round: usize,
    pub client: usize,
    pub phase: Phase,
    /// Constraint rows handed to the integrator (0 when integration is off or the store is empty).
    pub constraint_rows: usize,
    /// Task ids of the selected signature tasks, farthest first.
    pub selected_tasks: Vec<usize>,
    pub projected: bool,
    pub fell_back: bool,
    /// `||g'||^2` of the applied gradient.
    pub sq_norm: f64,
    pub bound_exceeded: bool,
}

/// Bytes moved between one client and the server in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub task: usize,
    pub round: usize,
    pub client: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Host time spent on this client's round; informational only.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Integration(IntegrationEvent),
    Protocol(ProtocolEvent),
}

/// Single-writer destination for run events.
pub trait MetricsSink {
    fn record(&mut self, event: Event);
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _event: Event) {}
}

/// Keeps every event in memory, in arrival order.
#[derive(Debug, Default, Clone)]
pub struct VecSink {
    pub events: Vec<Event>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, event: Event) {
        self.events.push(event);
    }
}

impl VecSink {
    pub fn integration_events(&self) -> impl Iterator<Item = &IntegrationEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Integration(i) => Some(i),
            _ => None,
        })
    }

    pub fn protocol_events(&self) -> impl Iterator<Item = &ProtocolEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Protocol(p) => Some(p),
            _ => None,
        })
    }
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, event: Event) {
        (**self).record(event);
    }
}
