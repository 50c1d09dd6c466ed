use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token passing through one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeEvent {
    /// 1 for prefill, `1 + k` for the k-th decode step.
    pub step: usize,
    pub token: usize,
    pub layer: usize,
}

/// Every compute event of a generation, plus live-set sizes per step and
/// layer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComputeLedger {
    prompt_len: usize,
    num_layers: usize,
    events: Vec<ComputeEvent>,
    #[serde(skip)]
    counts: HashMap<(usize, usize), u32>,
    live_sizes: Vec<Vec<usize>>,
}

impl ComputeLedger {
    pub fn new(prompt_len: usize, num_layers: usize) -> Self {
        ComputeLedger {
            prompt_len,
            num_layers,
            ..Default::default()
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub(crate) fn set_prompt_len(&mut self, n: usize) {
        self.prompt_len = n;
    }

    pub(crate) fn begin_step(&mut self) {
        self.live_sizes.push(vec![0; self.num_layers]);
    }

    pub(crate) fn record_live(&mut self, layer: usize, size: usize) {
        if let Some(last) = self.live_sizes.last_mut() {
            last[layer] = size;
        }
    }

    /// Records an event; a second event for the same `(token, layer)` is
    /// still counted but reported as an error.
    pub(crate) fn record(&mut self, step: usize, token: usize, layer: usize) -> Result<()> {
        self.events.push(ComputeEvent { step, token, layer });
        let count = self.counts.entry((token, layer)).or_insert(0);
        *count += 1;
        if *count > 1 {
            return Err(Error::invariant(format!(
                "token {token} computed {count} times at layer {layer}"
            )));
        }
        Ok(())
    }

    pub fn events(&self) -> &[ComputeEvent] {
        &self.events
    }

    pub fn count(&self, token: usize, layer: usize) -> u32 {
        self.counts.get(&(token, layer)).copied().unwrap_or(0)
    }

    /// Step in which `(token, layer)` was first computed.
    pub fn step_of(&self, token: usize, layer: usize) -> Option<usize> {
        self.events
            .iter()
            .find(|e| e.token == token && e.layer == layer)
            .map(|e| e.step)
    }

    pub fn max_count(&self) -> u32 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// `(token, layer, count)` for every pair computed more than once.
    pub fn repeated(&self) -> Vec<(usize, usize, u32)> {
        let mut out: Vec<_> = self
            .counts
            .iter()
            .filter(|(_, &c)| c > 1)
            .map(|(&(t, l), &c)| (t, l, c))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn total_events(&self) -> usize {
        self.events.len()
    }

    pub fn prompt_events(&self) -> usize {
        self.events.iter().filter(|e| e.token < self.prompt_len).count()
    }

    /// Prompt-token events that happened after prefill.
    pub fn revival_events(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.token < self.prompt_len && e.step > 1)
            .count()
    }

    pub fn steps(&self) -> usize {
        self.live_sizes.len()
    }

    /// Live-set size per step and layer.
    pub fn live_sizes(&self) -> &[Vec<usize>] {
        &self.live_sizes
    }
}
