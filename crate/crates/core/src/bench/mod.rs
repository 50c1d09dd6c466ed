//! Metrics, timing and experiment runners.

mod metrics;
mod profile;
mod sweep;

use serde::{Deserialize, Serialize};

pub use metrics::{
    cumulative_usage_series, fidelity, kl_divergence, measure_generation, measure_ttft,
    percent_prompt_tokens_computed, softmax_f64, FidelityResult, TimingStats, DEFAULT_WARMUP,
};
pub use profile::{attention_profile, AttentionProfile, LayerProfile, ThresholdFraction};
pub use sweep::{
    run_bench, run_sweep, BenchOptions, BenchRow, BenchSummary, PromptTiming, SweepGrid, SweepOptions,
    SweepRow,
};

use crate::engine::Session;

/// Outcome of one generation. Everything except the two walltime fields
/// is deterministic for a fixed model, prompt and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub policy: String,
    pub schedule: String,
    pub policy_seed: Option<u64>,
    pub prompt_len: usize,
    pub num_layers: usize,
    pub generated_ids: Vec<u32>,
    pub ttft_seconds: f64,
    pub total_seconds: f64,
    pub prompt_compute_events: usize,
    pub total_compute_events: usize,
    pub percent_prompt_tokens_computed: f64,
    pub revival_events: usize,
    /// `[step][layer]` fraction of prompt tokens computed so far.
    pub cumulative_usage: Vec<Vec<f64>>,
    /// `[step][layer]` live-set sizes.
    pub live_set_sizes: Vec<Vec<usize>>,
    pub first_token_logits: Vec<f32>,
}

impl GenerationReport {
    pub fn from_session(session: &Session<'_>, ttft_seconds: f64, total_seconds: f64) -> Self {
        let ledger = session.ledger();
        let n = session.prompt().len();
        let layers = session.model().config().num_layers;
        GenerationReport {
            policy: session.policy().tag().to_string(),
            schedule: session.policy().describe(),
            policy_seed: session.policy().seed(),
            prompt_len: n,
            num_layers: layers,
            generated_ids: session.generated().to_vec(),
            ttft_seconds,
            total_seconds,
            prompt_compute_events: ledger.prompt_events(),
            total_compute_events: ledger.total_events(),
            percent_prompt_tokens_computed: percent_prompt_tokens_computed(ledger, n, layers),
            revival_events: ledger.revival_events(),
            cumulative_usage: cumulative_usage_series(ledger),
            live_set_sizes: ledger.live_sizes().to_vec(),
            first_token_logits: session.first_logits().to_vec(),
        }
    }

    /// Copy with walltime fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        GenerationReport {
            ttft_seconds: 0.0,
            total_seconds: 0.0,
            ..self.clone()
        }
    }
}
