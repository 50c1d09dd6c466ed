use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{fidelity, measure_generation, measure_ttft};
use super::GenerationReport;
use crate::engine::Session;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::{Policy, PruningSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub max_new_tokens: usize,
    /// Timed prefills per prompt and cell. With `repeats == 1` and no warmup
    /// the TTFT of the fidelity run itself is used.
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prune_layer: usize,
    pub keep_fraction: f64,
    pub fidelity: f64,
    pub ttft_speedup: f64,
    pub percent_computed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub prompts: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prune_layer,keep_fraction,fidelity,ttft_speedup,percent_computed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.prune_layer, r.keep_fraction, r.fidelity, r.ttft_speedup, r.percent_computed
            );
        }
        out
    }
}

fn run_once(model: &Model, prompt: &[u32], policy: &Policy, max_new: usize) -> Result<GenerationReport> {
    Session::new(model, policy.clone())?.generate(prompt, max_new, &[])
}

fn ttft_of(model: &Model, prompt: &[u32], policy: &Policy, report: &GenerationReport, repeats: usize, warmup: usize) -> Result<f64> {
    if repeats <= 1 && warmup == 0 {
        return Ok(report.ttft_seconds);
    }
    Ok(measure_ttft(model, prompt, policy, repeats, warmup)?.mean)
}

/// Single-boundary lazy pruning over a grid of `(layer, fraction)` cells,
/// each compared against the unpruned run on every corpus prompt.
pub fn run_sweep(
    model: &Model,
    corpus: &[Vec<u32>],
    layer_grid: &[usize],
    fraction_grid: &[f64],
    opts: &SweepOptions,
) -> Result<SweepGrid> {
    if corpus.is_empty() {
        return Err(Error::input("sweep corpus is empty"));
    }
    let cells: Vec<Policy> = layer_grid
        .iter()
        .flat_map(|&l| fraction_grid.iter().map(move |&f| Policy::lazy(PruningSchedule::single(l, f))))
        .collect();
    for cell in &cells {
        cell.validate(model.config())?;
    }

    let mut sums = vec![(0.0, 0.0, 0.0); cells.len()];
    for prompt in corpus {
        let base = run_once(model, prompt, &Policy::Baseline, opts.max_new_tokens)?;
        let base_ttft = ttft_of(model, prompt, &Policy::Baseline, &base, opts.repeats, opts.warmup)?;
        for (cell, sum) in cells.iter().zip(sums.iter_mut()) {
            let report = run_once(model, prompt, cell, opts.max_new_tokens)?;
            let ttft = ttft_of(model, prompt, cell, &report, opts.repeats, opts.warmup)?;
            sum.0 += fidelity(&base, &report).token_match_rate;
            sum.1 += base_ttft / ttft;
            sum.2 += report.percent_prompt_tokens_computed;
        }
    }
    let k = corpus.len() as f64;
    let rows = cells
        .iter()
        .zip(sums)
        .map(|(cell, (fid, speed, pct))| {
            let Policy::Lazy { schedule } = cell else { unreachable!() };
            let b = schedule.boundaries[0];
            SweepRow {
                prune_layer: b.after_layer,
                keep_fraction: b.keep_fraction,
                fidelity: fid / k,
                ttft_speedup: speed / k,
                percent_computed: pct / k,
            }
        })
        .collect();
    Ok(SweepGrid {
        prompts: corpus.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub max_new_tokens: usize,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTiming {
    pub prompt_index: usize,
    pub prompt_len: usize,
    pub baseline_ttft: f64,
    pub policy_ttft: f64,
    pub baseline_total: f64,
    pub policy_total: f64,
    pub ttft_speedup: f64,
    pub generation_speedup: f64,
    pub percent_computed: f64,
    pub token_match_rate: f64,
    pub first_token_agreement: bool,
    pub first_logit_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub params: String,
    pub mean_ttft_speedup: f64,
    pub mean_generation_speedup: f64,
    pub mean_percent_computed: f64,
    pub mean_token_match_rate: f64,
    pub first_token_agreement_rate: f64,
    pub mean_first_logit_kl: f64,
    pub prompts: Vec<PromptTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
}

impl BenchSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "policy,params,ttft_speedup,generation_speedup,percent_computed,token_match_rate,first_token_agreement,first_logit_kl\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}",
                r.policy,
                r.params,
                r.mean_ttft_speedup,
                r.mean_generation_speedup,
                r.mean_percent_computed,
                r.mean_token_match_rate,
                r.first_token_agreement_rate,
                r.mean_first_logit_kl
            );
        }
        out
    }
}

/// Each policy against the unpruned baseline on every corpus prompt.
/// Speedups are per-prompt ratios of mean walltimes, averaged over prompts.
pub fn run_bench(model: &Model, corpus: &[Vec<u32>], policies: &[Policy], opts: &BenchOptions) -> Result<BenchSummary> {
    if corpus.is_empty() {
        return Err(Error::input("bench corpus is empty"));
    }
    for p in policies {
        p.validate(model.config())?;
    }
    let mut per_policy: Vec<Vec<PromptTiming>> = vec![Vec::new(); policies.len()];
    for (i, prompt) in corpus.iter().enumerate() {
        let base = run_once(model, prompt, &Policy::Baseline, opts.max_new_tokens)?;
        let base_ttft = measure_ttft(model, prompt, &Policy::Baseline, opts.repeats, opts.warmup)?.mean;
        let base_total =
            measure_generation(model, prompt, &Policy::Baseline, opts.max_new_tokens, opts.repeats, opts.warmup)?.mean;
        for (policy, out) in policies.iter().zip(per_policy.iter_mut()) {
            let (report, ttft, total) = if *policy == Policy::Baseline {
                (base.clone(), base_ttft, base_total)
            } else {
                (
                    run_once(model, prompt, policy, opts.max_new_tokens)?,
                    measure_ttft(model, prompt, policy, opts.repeats, opts.warmup)?.mean,
                    measure_generation(model, prompt, policy, opts.max_new_tokens, opts.repeats, opts.warmup)?.mean,
                )
            };
            let fid = fidelity(&base, &report);
            out.push(PromptTiming {
                prompt_index: i,
                prompt_len: prompt.len(),
                baseline_ttft: base_ttft,
                policy_ttft: ttft,
                baseline_total: base_total,
                policy_total: total,
                ttft_speedup: base_ttft / ttft,
                generation_speedup: base_total / total,
                percent_computed: report.percent_prompt_tokens_computed,
                token_match_rate: fid.token_match_rate,
                first_token_agreement: fid.first_token_agreement,
                first_logit_kl: fid.first_logit_divergence,
            });
        }
    }
    let mean = |xs: &[PromptTiming], f: fn(&PromptTiming) -> f64| xs.iter().map(f).sum::<f64>() / xs.len() as f64;
    let rows = policies
        .iter()
        .zip(per_policy)
        .map(|(policy, prompts)| BenchRow {
            policy: policy.tag().to_string(),
            params: policy.describe(),
            mean_ttft_speedup: mean(&prompts, |p| p.ttft_speedup),
            mean_generation_speedup: mean(&prompts, |p| p.generation_speedup),
            mean_percent_computed: mean(&prompts, |p| p.percent_computed),
            mean_token_match_rate: mean(&prompts, |p| p.token_match_rate),
            first_token_agreement_rate: mean(&prompts, |p| f64::from(u8::from(p.first_token_agreement))),
            mean_first_logit_kl: mean(&prompts, |p| p.first_logit_kl),
            prompts,
        })
        .collect();
    Ok(BenchSummary { options: *opts, rows })
}
