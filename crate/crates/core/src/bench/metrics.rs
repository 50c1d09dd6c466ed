use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::GenerationReport;
use crate::engine::{ComputeLedger, Session};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::Policy;

/// Untimed runs before measurement starts.
pub const DEFAULT_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub stdev: f64,
    pub min: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

impl TimingStats {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("no timing samples"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Ok(TimingStats {
            mean,
            stdev: var.sqrt(),
            min: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            samples,
        })
    }
}

fn timed_runs<F>(repeats: usize, warmup: usize, mut run: F) -> Result<TimingStats>
where
    F: FnMut() -> Result<f64>,
{
    if repeats == 0 {
        return Err(Error::input("repeats must be at least 1"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let samples = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
    TimingStats::from_samples(samples)
}

/// Walltime from handing the prompt to a fresh session until the first
/// token id is available.
pub fn measure_ttft(model: &Model, prompt: &[u32], policy: &Policy, repeats: usize, warmup: usize) -> Result<TimingStats> {
    timed_runs(repeats, warmup, || {
        let mut session = Session::new(model, policy.clone())?;
        let start = Instant::now();
        session.prefill(prompt)?;
        Ok(start.elapsed().as_secs_f64())
    })
}

/// Walltime from handing the prompt over until all output ids exist.
pub fn measure_generation(
    model: &Model,
    prompt: &[u32],
    policy: &Policy,
    max_new_tokens: usize,
    repeats: usize,
    warmup: usize,
) -> Result<TimingStats> {
    timed_runs(repeats, warmup, || {
        let mut session = Session::new(model, policy.clone())?;
        let start = Instant::now();
        session.generate(prompt, max_new_tokens, &[])?;
        Ok(start.elapsed().as_secs_f64())
    })
}

/// `100 * prompt-token compute events / (N * L)`.
pub fn percent_prompt_tokens_computed(ledger: &ComputeLedger, prompt_len: usize, num_layers: usize) -> f64 {
    if prompt_len == 0 || num_layers == 0 {
        return 0.0;
    }
    100.0 * ledger.prompt_events() as f64 / (prompt_len * num_layers) as f64
}

/// `[step][layer]`: fraction of prompt tokens with an event at that layer in
/// any step up to and including this one.
pub fn cumulative_usage_series(ledger: &ComputeLedger) -> Vec<Vec<f64>> {
    let n = ledger.prompt_len();
    let layers = ledger.num_layers();
    let steps = ledger.steps();
    if n == 0 {
        return vec![vec![0.0; layers]; steps];
    }
    let mut new_per_step = vec![vec![0usize; layers]; steps];
    let mut seen = HashSet::new();
    for e in ledger.events() {
        if e.token < n && e.step >= 1 && e.step <= steps && seen.insert((e.token, e.layer)) {
            new_per_step[e.step - 1][e.layer] += 1;
        }
    }
    let mut running = vec![0usize; layers];
    new_per_step
        .into_iter()
        .map(|fresh| {
            for (r, f) in running.iter_mut().zip(fresh) {
                *r += f;
            }
            running.iter().map(|&c| c as f64 / n as f64).collect()
        })
        .collect()
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `KL(softmax(p) || softmax(q))` in nats.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let p = softmax_f64(p_logits);
    let q = softmax_f64(q_logits);
    p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    /// Longest common prefix of generated ids over the longer output.
    pub token_match_rate: f64,
    pub first_token_agreement: bool,
    pub first_logit_divergence: f64,
}

pub fn fidelity(baseline: &GenerationReport, policy: &GenerationReport) -> FidelityResult {
    let a = &baseline.generated_ids;
    let b = &policy.generated_ids;
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let longest = a.len().max(b.len());
    FidelityResult {
        token_match_rate: if longest == 0 { 1.0 } else { prefix as f64 / longest as f64 },
        first_token_agreement: a.first() == b.first(),
        first_logit_divergence: kl_divergence(&baseline.first_token_logits, &policy.first_token_logits),
    }
}
