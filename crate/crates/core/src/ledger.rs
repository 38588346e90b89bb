//! Instrumented record of which samples were read in which phase.
//!
//! Every read of a client's samples goes through
//! [`ClientDataset::samples`](crate::dataset::ClientDataset::samples), which
//! reports to the ledger. Tests use it to show that test clients never reach
//! any training phase.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    /// Data loading, normalization statistics and anything before training.
    Setup,
    /// Step 1 global FedAvg.
    FedAvg,
    /// Per-client fine-tuning of `w_T` that produces the clustering deltas.
    Deltas,
    /// Per-cluster FedAvg.
    ClusterTraining,
    /// Plain FedAvg baseline continuation.
    Baseline,
    /// A new client fine-tuning `w_T` during registration.
    Registration,
    /// Scoring a model on held-out data.
    Evaluation,
}

impl Phase {
    /// Phases that produce the global and cluster models.
    pub const TRAINING: [Phase; 4] = [
        Phase::FedAvg,
        Phase::Deltas,
        Phase::ClusterTraining,
        Phase::Baseline,
    ];
}

/// Identifies one sample: its client and the visit it came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SampleId {
    pub client_id: String,
    pub visit: u32,
}

#[derive(Debug, Default)]
struct State {
    phase: Option<Phase>,
    reads: BTreeMap<(Phase, SampleId), u64>,
}

/// Thread-safe counter of sample reads per phase.
#[derive(Debug, Default)]
pub struct AccessLedger {
    state: Mutex<State>,
}

impl AccessLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the phase attributed to subsequent reads.
    pub fn enter(&self, phase: Phase) {
        self.state.lock().expect("ledger poisoned").phase = Some(phase);
    }

    pub fn phase(&self) -> Phase {
        self.state
            .lock()
            .expect("ledger poisoned")
            .phase
            .unwrap_or(Phase::Setup)
    }

    pub(crate) fn record<'a>(&self, client_id: &str, visits: impl Iterator<Item = &'a u32>) {
        let mut state = self.state.lock().expect("ledger poisoned");
        let phase = state.phase.unwrap_or(Phase::Setup);
        for &visit in visits {
            let id = SampleId {
                client_id: client_id.to_owned(),
                visit,
            };
            *state.reads.entry((phase, id)).or_default() += 1;
        }
    }

    /// Number of reads of `id` during `phase`.
    pub fn reads(&self, phase: Phase, id: &SampleId) -> u64 {
        let state = self.state.lock().expect("ledger poisoned");
        state.reads.get(&(phase, id.clone())).copied().unwrap_or(0)
    }

    /// All samples read during `phase`.
    pub fn samples_read(&self, phase: Phase) -> BTreeSet<SampleId> {
        let state = self.state.lock().expect("ledger poisoned");
        state
            .reads
            .keys()
            .filter(|(p, _)| *p == phase)
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Total reads of any sample in `forbidden` during any of `phases`.
    pub fn count_reads(&self, phases: &[Phase], forbidden: &BTreeSet<SampleId>) -> u64 {
        let state = self.state.lock().expect("ledger poisoned");
        state
            .reads
            .iter()
            .filter(|((p, id), _)| phases.contains(p) && forbidden.contains(id))
            .map(|(_, n)| n)
            .sum()
    }
}
