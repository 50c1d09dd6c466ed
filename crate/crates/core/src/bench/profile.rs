use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvContext, Model};
use crate::pruning;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    /// Importance of every prompt token for predicting the next token.
    pub scores: Vec<f32>,
    /// Counts over equal-width bins of `[0, 1]`; 1.0 lands in the last bin.
    pub histogram: Vec<usize>,
    /// Fraction of tokens scoring below `1 / N` (below uniform attention).
    pub below_uniform: f64,
    pub below: Vec<ThresholdFraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub prompt_len: usize,
    pub bins: usize,
    pub layers: Vec<LayerProfile>,
}

impl AttentionProfile {
    /// `layer,bin_low,bin_high,count` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("layer,bin_low,bin_high,count\n");
        for lp in &self.layers {
            for (b, &count) in lp.histogram.iter().enumerate() {
                let low = b as f64 / self.bins as f64;
                let high = (b + 1) as f64 / self.bins as f64;
                let _ = writeln!(out, "{},{low},{high},{count}", lp.layer);
            }
        }
        out
    }
}

/// Unpruned forward over the prompt, recording at every layer how much
/// attention the last prompt token pays to each token.
pub fn attention_profile(model: &Model, prompt: &[u32], bins: usize, thresholds: &[f64]) -> Result<AttentionProfile> {
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    if bins == 0 {
        return Err(Error::input("histogram needs at least one bin"));
    }
    let n = prompt.len();
    let positions: Vec<usize> = (0..n).collect();
    let context = KvContext::empty(model.config().d_model);
    let mut hidden = model.embed(prompt)?;
    let mut layers = Vec::with_capacity(model.config().num_layers);
    for layer in 0..model.config().num_layers {
        let out = model.layer_forward(layer, &hidden, &positions, &context, &[n - 1])?;
        let scores = pruning::importance_scores(&out.probs, n - 1, &out.key_positions, &positions)?;
        let scores: Vec<f32> = scores.entries().iter().map(|&(_, s)| s).collect();
        let mut histogram = vec![0usize; bins];
        for &s in &scores {
            let b = ((s as f64 * bins as f64) as usize).min(bins - 1);
            histogram[b] += 1;
        }
        let frac_below = |t: f64| scores.iter().filter(|&&s| (s as f64) < t).count() as f64 / n as f64;
        layers.push(LayerProfile {
            layer,
            histogram,
            below_uniform: frac_below(1.0 / n as f64),
            below: thresholds
                .iter()
                .map(|&threshold| ThresholdFraction {
                    threshold,
                    fraction: frac_below(threshold),
                })
                .collect(),
            scores,
        });
        hidden = out.hidden;
    }
    Ok(AttentionProfile {
        prompt_len: n,
        bins,
        layers,
    })
}
