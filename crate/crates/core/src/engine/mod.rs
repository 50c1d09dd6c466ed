//! Generation sessions: prefill and decode with per-step token pruning.
//!
//! Every step walks the layers with a *live set* (tokens whose hidden states
//! are computed at that layer) and a *keep set* (tokens attended to). At a
//! schedule boundary the newest token's attention picks a new keep set from
//! the current one. Live tokens that fall out are parked in the aux store at
//! the next layer; kept tokens whose KV stops exactly at the next layer are
//! revived from their parked hidden state and stay live from there on.

mod ledger;
mod tokenizer;

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::Serialize;

pub use ledger::{ComputeEvent, ComputeLedger};
pub use tokenizer::{detokenize, tokenize, BOS, BYTE_VOCAB, EOS};

use crate::bench::GenerationReport;
use crate::cache::{CacheViolation, LayeredCaches};
use crate::error::{Error, Result};
use crate::model::{KvContext, Model};
use crate::pruning::{self, KeepSet, Policy, PruningSchedule};
use crate::tensor::Matrix;

/// Argmax with ties resolved to the lowest id.
pub fn greedy_sample(logits: &[f32]) -> Result<u32> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as u32)
        .ok_or_else(|| Error::input("cannot sample from empty logits"))
}

/// Selection made at one boundary of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryRecord {
    pub step: usize,
    pub after_layer: usize,
    pub keep: Vec<usize>,
    /// Live tokens parked in the aux store at this boundary.
    pub parked: Vec<usize>,
    /// Tokens brought back from the aux store at this boundary.
    pub revived: Vec<usize>,
}

/// Hidden state a revived token re-entered the live set with.
#[derive(Debug, Clone, PartialEq)]
pub struct Revival {
    pub step: usize,
    pub token: usize,
    pub layer: usize,
    pub hidden: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub step: usize,
    pub cache: Vec<String>,
    pub ledger: Vec<String>,
    pub frontier: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.cache.is_empty() && self.ledger.is_empty() && self.frontier.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.cache.len() + self.ledger.len() + self.frontier.len()
    }
}

pub struct Session<'m> {
    model: &'m Model,
    policy: Policy,
    caches: LayeredCaches,
    ledger: ComputeLedger,
    prompt: Vec<u32>,
    generated: Vec<u32>,
    step: usize,
    /// Keep set shared by every decode step under random/static policies.
    fixed_keep: Option<BTreeSet<usize>>,
    forced: HashMap<(usize, usize), BTreeSet<usize>>,
    first_logits: Vec<f32>,
    final_hidden: Vec<Vec<f32>>,
    boundaries: Vec<BoundaryRecord>,
    revivals: Vec<Revival>,
    last_frontiers: HashMap<usize, usize>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, policy: Policy) -> Result<Self> {
        policy.validate(model.config())?;
        let cfg = model.config();
        Ok(Session {
            model,
            policy,
            caches: LayeredCaches::new(cfg.num_layers, cfg.d_model),
            ledger: ComputeLedger::new(0, cfg.num_layers),
            prompt: Vec::new(),
            generated: Vec::new(),
            step: 0,
            fixed_keep: None,
            forced: HashMap::new(),
            first_logits: Vec::new(),
            final_hidden: Vec::new(),
            boundaries: Vec::new(),
            revivals: Vec::new(),
            last_frontiers: HashMap::new(),
        })
    }

    /// Overrides the selection at boundary `after_layer` of `step`: the keep
    /// set becomes `tokens` restricted to the current candidates, plus the
    /// protected tokens. Scores are ignored for that boundary.
    pub fn force_keep(&mut self, step: usize, after_layer: usize, tokens: impl IntoIterator<Item = usize>) {
        self.forced.insert((step, after_layer), tokens.into_iter().collect());
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn caches(&self) -> &LayeredCaches {
        &self.caches
    }

    pub fn ledger(&self) -> &ComputeLedger {
        &self.ledger
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    /// Number of steps run so far (prefill is step 1).
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn fixed_keep(&self) -> Option<&BTreeSet<usize>> {
        self.fixed_keep.as_ref()
    }

    pub fn first_logits(&self) -> &[f32] {
        &self.first_logits
    }

    /// Final-layer hidden state (before the final norm) of the token that
    /// produced each generated id.
    pub fn final_hidden(&self) -> &[Vec<f32>] {
        &self.final_hidden
    }

    pub fn boundary_records(&self) -> &[BoundaryRecord] {
        &self.boundaries
    }

    pub fn revivals(&self) -> &[Revival] {
        &self.revivals
    }

    fn schedule_for_step(&self, prefill: bool) -> Option<PruningSchedule> {
        match &self.policy {
            Policy::Lazy { schedule } if !schedule.is_empty() => Some(schedule.clone()),
            Policy::Static {
                after_layer,
                keep_fraction,
            } if prefill => Some(PruningSchedule::single(*after_layer, *keep_fraction)),
            _ => None,
        }
    }

    fn protected(&self, newest: usize) -> BTreeSet<usize> {
        let n = self.prompt.len();
        let mut p: BTreeSet<usize> = (n..=newest).collect();
        p.insert(n - 1);
        p
    }

    pub fn prefill(&mut self, prompt_ids: &[u32]) -> Result<u32> {
        if prompt_ids.is_empty() {
            return Err(Error::input("empty prompt"));
        }
        if self.step != 0 || !self.caches.is_empty() {
            return Err(Error::input("session already prefilled"));
        }
        let cfg = *self.model.config();
        if prompt_ids.len() > cfg.max_position {
            return Err(Error::input(format!(
                "prompt of {} tokens exceeds max_position {}",
                prompt_ids.len(),
                cfg.max_position
            )));
        }
        let n = prompt_ids.len();
        self.prompt = prompt_ids.to_vec();
        self.ledger.set_prompt_len(n);
        self.step = 1;

        let protected = self.protected(n - 1);
        let live: Vec<usize> = match &self.policy {
            Policy::Random { drop_ratio, seed } => {
                let all: Vec<usize> = (0..n).collect();
                let keep = pruning::random_keep_set(&all, *drop_ratio, *seed, &protected)?;
                self.fixed_keep = Some(keep.as_set().clone());
                keep.iter().collect()
            }
            _ => (0..n).collect(),
        };
        let ids: Vec<u32> = live.iter().map(|&t| self.prompt[t]).collect();
        let hidden = self.model.embed(&ids)?;
        let keep: BTreeSet<usize> = live.iter().copied().collect();
        let schedule = self.schedule_for_step(true);

        let final_row = self.run_layers(live, hidden, keep, schedule.as_ref(), &protected)?;
        let logits = self.model.next_token_logits(&final_row)?;
        let token = greedy_sample(&logits)?;
        self.first_logits = logits;
        self.final_hidden.push(final_row);
        self.generated.push(token);
        Ok(token)
    }

    pub fn decode_step(&mut self) -> Result<u32> {
        let Some(&id) = self.generated.last() else {
            return Err(Error::input("decode_step before prefill"));
        };
        let n = self.prompt.len();
        let newest = n + self.generated.len() - 1;
        if newest >= self.model.config().max_position {
            return Err(Error::input(format!(
                "position {newest} exceeds max_position {}",
                self.model.config().max_position
            )));
        }
        self.step += 1;
        let protected = self.protected(newest);
        let mut keep: BTreeSet<usize> = match &self.fixed_keep {
            Some(fixed) => fixed.clone(),
            None => (0..newest).collect(),
        };
        keep.extend(protected.iter().copied());
        let hidden = self.model.embed(&[id])?;
        let schedule = self.schedule_for_step(false);

        let final_row = self.run_layers(vec![newest], hidden, keep, schedule.as_ref(), &protected)?;
        let logits = self.model.next_token_logits(&final_row)?;
        let token = greedy_sample(&logits)?;
        self.final_hidden.push(final_row);
        self.generated.push(token);
        Ok(token)
    }

    /// Runs one step through every layer. `live` must be sorted and its last
    /// entry is the newest token; `keep` is the initial attention set and
    /// includes `live`. Returns the newest token's final hidden row.
    fn run_layers(
        &mut self,
        mut live: Vec<usize>,
        mut hidden: Matrix,
        mut keep: BTreeSet<usize>,
        schedule: Option<&PruningSchedule>,
        protected: &BTreeSet<usize>,
    ) -> Result<Vec<f32>> {
        let num_layers = self.model.config().num_layers;
        let step = self.step;
        self.ledger.begin_step();

        for layer in 0..num_layers {
            let context_tokens: Vec<usize> = keep
                .iter()
                .copied()
                .filter(|t| live.binary_search(t).is_err())
                .collect();
            let context = if context_tokens.is_empty() {
                KvContext::empty(self.model.config().d_model)
            } else {
                self.caches.kv_gather(layer, &context_tokens)?
            };
            let fraction = schedule.and_then(|s| s.fraction_after(layer + 1));
            let capture = if fraction.is_some() {
                vec![live.len() - 1]
            } else {
                Vec::new()
            };
            let out = self
                .model
                .layer_forward(layer, &hidden, &live, &context, &capture)?;

            for (r, &token) in live.iter().enumerate() {
                self.caches
                    .kv_insert(layer, token, out.keys.row(r), out.values.row(r))?;
                self.ledger.record(step, token, layer)?;
            }
            self.ledger.record_live(layer, live.len());
            hidden = out.hidden;

            let Some(fraction) = fraction else { continue };
            let boundary = layer + 1;
            let candidates: Vec<usize> = out
                .key_positions
                .iter()
                .copied()
                .filter(|t| !protected.contains(t))
                .collect();
            let new_keep: KeepSet = match self.forced.get(&(step, boundary)) {
                Some(forced) => candidates
                    .iter()
                    .copied()
                    .filter(|t| forced.contains(t))
                    .chain(protected.iter().copied())
                    .collect(),
                None => {
                    let scores =
                        pruning::importance_scores(&out.probs, live.len() - 1, &out.key_positions, &candidates)?;
                    pruning::select_keep_set(&scores, fraction, protected)?
                }
            };
            if let Some(t) = new_keep.iter().find(|t| out.key_positions.binary_search(t).is_err()) {
                return Err(Error::invariant(format!(
                    "token {t} kept at boundary {boundary} but not attended to at layer {layer}"
                )));
            }
            if matches!(self.policy, Policy::Static { .. }) && step == 1 {
                self.fixed_keep = Some(new_keep.as_set().clone());
            }

            let mut parked = Vec::new();
            let mut next_live = Vec::with_capacity(live.len());
            let mut next_rows: Vec<Vec<f32>> = Vec::with_capacity(live.len());
            for (r, &token) in live.iter().enumerate() {
                if new_keep.contains(token) {
                    next_live.push(token);
                    next_rows.push(hidden.row(r).to_vec());
                } else {
                    self.caches.aux_store(boundary, token, hidden.row(r))?;
                    parked.push(token);
                }
            }
            let mut revived = Vec::new();
            for token in new_keep.iter() {
                if live.binary_search(&token).is_ok() {
                    continue;
                }
                let frontier = self.caches.frontier(token);
                if frontier < boundary {
                    return Err(Error::invariant(format!(
                        "token {token} kept at boundary {boundary} with frontier {frontier}"
                    )));
                }
                if frontier == boundary {
                    let row = self.caches.aux_take(boundary, token)?.to_vec();
                    self.revivals.push(Revival {
                        step,
                        token,
                        layer: boundary,
                        hidden: row.clone(),
                    });
                    let at = next_live.partition_point(|&t| t < token);
                    next_live.insert(at, token);
                    next_rows.insert(at, row);
                    revived.push(token);
                }
            }
            self.boundaries.push(BoundaryRecord {
                step,
                after_layer: boundary,
                keep: new_keep.iter().collect(),
                parked,
                revived,
            });
            let width = hidden.cols();
            hidden = Matrix::from_rows(width, next_rows.iter().map(Vec::as_slice))?;
            live = next_live;
            keep = new_keep.into_set();
        }
        Ok(hidden.row(hidden.rows() - 1).to_vec())
    }

    /// Checks cache layout, the at-most-once ledger and frontier
    /// monotonicity since the previous call.
    pub fn verify(&mut self) -> VerifyReport {
        let num_layers = self.model.config().num_layers;
        let n = self.prompt.len();
        let mut report = VerifyReport {
            step: self.step,
            cache: self
                .caches
                .verify_invariants()
                .iter()
                .map(CacheViolation::to_string)
                .collect(),
            ..Default::default()
        };
        for (token, layer, count) in self.ledger.repeated() {
            report
                .ledger
                .push(format!("token {token} computed {count} times at layer {layer}"));
        }
        if self.ledger.prompt_events() > n * num_layers {
            report.ledger.push(format!(
                "{} prompt events exceed {n} x {num_layers}",
                self.ledger.prompt_events()
            ));
        }
        // Every generated token except the newest (not yet fed back) is complete.
        for g in 0..self.generated.len().saturating_sub(1) {
            let token = n + g;
            let f = self.caches.frontier(token);
            if f != num_layers {
                report
                    .cache
                    .push(format!("generated token {token} has frontier {f}, expected {num_layers}"));
            }
        }
        let current = self.caches.frontiers().clone();
        for (&token, &before) in &self.last_frontiers {
            let after = current.get(&token).copied().unwrap_or(0);
            if after < before {
                report
                    .frontier
                    .push(format!("token {token} frontier went from {before} to {after}"));
            }
        }
        self.last_frontiers = current;
        report
    }

    /// Prefill plus greedy decoding until `max_new_tokens` ids exist or a
    /// stop id is produced. `after_step` runs after every step.
    pub fn generate_with<F>(
        &mut self,
        prompt_ids: &[u32],
        max_new_tokens: usize,
        stop_ids: &[u32],
        mut after_step: F,
    ) -> Result<GenerationReport>
    where
        F: FnMut(&mut Session<'m>) -> Result<()>,
    {
        if max_new_tokens == 0 {
            return Err(Error::input("max_new_tokens must be at least 1"));
        }
        let start = Instant::now();
        let first = self.prefill(prompt_ids)?;
        let ttft = start.elapsed().as_secs_f64();
        after_step(self)?;
        let mut last = first;
        while self.generated.len() < max_new_tokens && !stop_ids.contains(&last) {
            last = self.decode_step()?;
            after_step(self)?;
        }
        let total = start.elapsed().as_secs_f64();
        Ok(GenerationReport::from_session(self, ttft, total))
    }

    pub fn generate(&mut self, prompt_ids: &[u32], max_new_tokens: usize, stop_ids: &[u32]) -> Result<GenerationReport> {
        self.generate_with(prompt_ids, max_new_tokens, stop_ids, |_| Ok(()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_sample_cases() {
        assert_eq!(greedy_sample(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(greedy_sample(&[0.5; 4]).unwrap(), 0);
        assert_eq!(greedy_sample(&[-1.0, 2.0, 2.0]).unwrap(), 1);
        assert!(greedy_sample(&[]).is_err());
    }
}
