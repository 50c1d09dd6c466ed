//! Token importance scoring and keep-set selection.
//!
//! A token's importance at a layer is the head-averaged attention
//! probability the newest token puts on it. At a schedule boundary the
//! engine keeps the top `ceil(f * candidates)` tokens by importance plus the
//! protected tokens, and the kept set for a deeper boundary is always drawn
//! from the kept set of the shallower one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::AttentionProbs;

/// Importance of each scored token, in the order the candidates were given.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    entries: Vec<(usize, f32)>,
}

impl ImportanceScores {
    pub fn new(entries: Vec<(usize, f32)>) -> Self {
        ImportanceScores { entries }
    }

    pub fn entries(&self) -> &[(usize, f32)] {
        &self.entries
    }

    pub fn get(&self, token: usize) -> Option<f32> {
        self.entries.iter().find(|(t, _)| *t == token).map(|&(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tokens retained past a boundary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeepSet(BTreeSet<usize>);

impl KeepSet {
    pub fn contains(&self, token: usize) -> bool {
        self.0.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_set(&self) -> &BTreeSet<usize> {
        &self.0
    }

    pub fn into_set(self) -> BTreeSet<usize> {
        self.0
    }
}

impl FromIterator<usize> for KeepSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        KeepSet(iter.into_iter().collect())
    }
}

/// Head-averaged attention from `query_row` to each candidate token.
/// `key_positions[c]` is the token at attention column `c`.
pub fn importance_scores(
    probs: &AttentionProbs,
    query_row: usize,
    key_positions: &[usize],
    candidates: &[usize],
) -> Result<ImportanceScores> {
    if key_positions.len() != probs.keys() {
        return Err(Error::shape(format!(
            "{} key positions for {} attention columns",
            key_positions.len(),
            probs.keys()
        )));
    }
    let heads = probs.heads();
    let rows: Vec<&[f32]> = (0..heads)
        .map(|h| {
            probs
                .row(h, query_row)
                .ok_or_else(|| Error::input(format!("query row {query_row} was not captured")))
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(candidates.len());
    for &token in candidates {
        let col = key_positions
            .binary_search(&token)
            .map_err(|_| Error::input(format!("candidate {token} is not an attention key")))?;
        let mut sum = 0.0f32;
        for row in &rows {
            sum += row[col];
        }
        entries.push((token, sum / heads as f32));
    }
    Ok(ImportanceScores { entries })
}

/// `ceil(fraction * n)`, tolerant of decimal fractions such as 0.7 not
/// being exact in binary.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::input(format!("keep fraction {f} outside (0, 1]")));
    }
    Ok(())
}

/// Top `ceil(f * |candidates|)` scored tokens by score (ties to the lower
/// index), plus every protected token.
pub fn select_keep_set(
    scores: &ImportanceScores,
    keep_fraction: f64,
    protected: &BTreeSet<usize>,
) -> Result<KeepSet> {
    check_fraction(keep_fraction)?;
    let mut candidates: Vec<(usize, f32)> = scores
        .entries
        .iter()
        .filter(|(t, _)| !protected.contains(t))
        .copied()
        .collect();
    if candidates.is_empty() && protected.is_empty() {
        return Err(Error::input("nothing to select from: no candidates and no protected tokens"));
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = keep_count(keep_fraction, candidates.len());
    let mut out: BTreeSet<usize> = candidates[..k].iter().map(|&(t, _)| t).collect();
    out.extend(protected.iter().copied());
    Ok(KeepSet(out))
}

/// Static pruning uses the same selection rule, once.
pub fn static_keep_set(
    scores: &ImportanceScores,
    keep_fraction: f64,
    protected: &BTreeSet<usize>,
) -> Result<KeepSet> {
    select_keep_set(scores, keep_fraction, protected)
}

/// Seeded uniform sample of `ceil((1 - drop_ratio) * |candidates|)`
/// unprotected prompt tokens, plus the protected ones.
pub fn random_keep_set(
    prompt_tokens: &[usize],
    drop_ratio: f64,
    seed: u64,
    protected: &BTreeSet<usize>,
) -> Result<KeepSet> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::input(format!("drop ratio {drop_ratio} outside [0, 1)")));
    }
    let mut candidates: Vec<usize> = prompt_tokens
        .iter()
        .copied()
        .filter(|t| !protected.contains(t))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let k = keep_count(1.0 - drop_ratio, candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
    let mut out: BTreeSet<usize> = picked.iter().map(|i| candidates[i]).collect();
    out.extend(protected.iter().copied());
    Ok(KeepSet(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    /// Number of layers computed before pruning; dropped tokens stop with
    /// frontier `after_layer` and scores come from layer `after_layer - 1`.
    pub after_layer: usize,
    pub keep_fraction: f64,
}

/// Ordered pruning boundaries, written `layer:fraction[,layer:fraction]*`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruningSchedule {
    pub boundaries: Vec<Boundary>,
}

impl PruningSchedule {
    pub fn empty() -> Self {
        PruningSchedule::default()
    }

    pub fn single(after_layer: usize, keep_fraction: f64) -> Self {
        PruningSchedule {
            boundaries: vec![Boundary {
                after_layer,
                keep_fraction,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    /// Keep fraction of the boundary that fires once `layers_done` layers
    /// have been computed.
    pub fn fraction_after(&self, layers_done: usize) -> Option<f64> {
        self.boundaries
            .iter()
            .find(|b| b.after_layer == layers_done)
            .map(|b| b.keep_fraction)
    }
}

impl FromStr for PruningSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(PruningSchedule::empty());
        }
        let boundaries = s
            .split(',')
            .map(|pair| {
                let (layer, frac) = pair
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("boundary {pair:?} is not layer:fraction")))?;
                let after_layer = layer
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad layer in boundary {pair:?}")))?;
                let keep_fraction = frac
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad fraction in boundary {pair:?}")))?;
                Ok(Boundary {
                    after_layer,
                    keep_fraction,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PruningSchedule { boundaries })
    }
}

impl fmt::Display for PruningSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.boundaries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", b.after_layer, b.keep_fraction)?;
        }
        Ok(())
    }
}

pub fn validate_schedule(schedule: &PruningSchedule, config: &ModelConfig) -> Result<()> {
    let last = config.num_layers - 1;
    let mut prev = 0;
    for b in &schedule.boundaries {
        if b.after_layer < 1 || b.after_layer > last {
            return Err(Error::config(format!(
                "boundary {}:{} outside layer range [1, {last}]",
                b.after_layer, b.keep_fraction
            )));
        }
        if b.after_layer <= prev {
            return Err(Error::config(format!(
                "boundary {}:{} does not come after layer {prev}",
                b.after_layer, b.keep_fraction
            )));
        }
        if !(b.keep_fraction > 0.0 && b.keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "boundary {}:{} has keep fraction outside (0, 1]",
                b.after_layer, b.keep_fraction
            )));
        }
        prev = b.after_layer;
    }
    Ok(())
}

/// How prompt tokens are pruned during a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum Policy {
    /// Every token through every layer.
    Baseline,
    /// Progressive per-step pruning with aux-cache revival.
    Lazy { schedule: PruningSchedule },
    /// Prompt tokens dropped at random before prefill.
    Random { drop_ratio: f64, seed: u64 },
    /// One selection from prefill attention at `after_layer`, reused for
    /// every later layer and step.
    Static { after_layer: usize, keep_fraction: f64 },
}

impl Policy {
    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Lazy { .. } => "lazy",
            Policy::Random { .. } => "random",
            Policy::Static { .. } => "static",
        }
    }

    pub fn lazy(schedule: PruningSchedule) -> Self {
        Policy::Lazy { schedule }
    }

    /// Human-readable parameter echo.
    pub fn describe(&self) -> String {
        match self {
            Policy::Baseline => String::new(),
            Policy::Lazy { schedule } => schedule.to_string(),
            Policy::Random { drop_ratio, .. } => format!("drop:{drop_ratio}"),
            Policy::Static {
                after_layer,
                keep_fraction,
            } => format!("{after_layer}:{keep_fraction}"),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Policy::Random { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            Policy::Baseline => Ok(()),
            Policy::Lazy { schedule } => validate_schedule(schedule, config),
            Policy::Random { drop_ratio, .. } => {
                if (0.0..1.0).contains(drop_ratio) {
                    Ok(())
                } else {
                    Err(Error::config(format!("drop ratio {drop_ratio} outside [0, 1)")))
                }
            }
            Policy::Static {
                after_layer,
                keep_fraction,
            } => validate_schedule(&PruningSchedule::single(*after_layer, *keep_fraction), config),
        }
    }
}
