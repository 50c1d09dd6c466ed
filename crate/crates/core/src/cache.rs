//! Per-layer KV store, aux store of pruned tokens' hidden states, and the
//! per-token frontier.
//!
//! A token's frontier is the first layer at which it has no KV. KV always
//! covers the contiguous prefix `[0, frontier)`. A token stopped short of
//! the last layer keeps exactly one aux entry, at its frontier, holding its
//! input hidden state to that layer; that entry is what lets a later step
//! resume the token from there instead of recomputing earlier layers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KvContext;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
struct KvEntry {
    key: Vec<f32>,
    value: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LayeredCaches {
    num_layers: usize,
    width: usize,
    kv: Vec<HashMap<usize, KvEntry>>,
    aux: Vec<HashMap<usize, Vec<f32>>>,
    frontier: HashMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheViolation {
    /// KV layers of a token are not exactly `[0, frontier)`.
    PrefixCoverage {
        token: usize,
        frontier: usize,
        layer: usize,
    },
    /// Aux entry at a layer other than the token's frontier.
    AuxMisplaced {
        token: usize,
        layer: usize,
        frontier: usize,
    },
    /// Token stopped below the last layer without an aux entry.
    AuxMissing { token: usize, frontier: usize },
    MultipleAux { token: usize, count: usize },
    RowWidth { token: usize, layer: usize },
}

impl fmt::Display for CacheViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheViolation::PrefixCoverage {
                token,
                frontier,
                layer,
            } => write!(
                f,
                "token {token}: KV presence at layer {layer} contradicts frontier {frontier}"
            ),
            CacheViolation::AuxMisplaced {
                token,
                layer,
                frontier,
            } => write!(f, "token {token}: aux entry at layer {layer} but frontier {frontier}"),
            CacheViolation::AuxMissing { token, frontier } => {
                write!(f, "token {token}: frontier {frontier} below last layer without aux entry")
            }
            CacheViolation::MultipleAux { token, count } => {
                write!(f, "token {token}: {count} aux entries")
            }
            CacheViolation::RowWidth { token, layer } => {
                write!(f, "token {token}: wrong row width at layer {layer}")
            }
        }
    }
}

/// JSON-friendly view of the cache layout (no tensor contents).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub frontiers: BTreeMap<usize, usize>,
    pub kv_tokens: Vec<Vec<usize>>,
    pub aux_tokens: Vec<Vec<usize>>,
}

impl LayeredCaches {
    pub fn new(num_layers: usize, width: usize) -> Self {
        LayeredCaches {
            num_layers,
            width,
            kv: (0..num_layers).map(|_| HashMap::new()).collect(),
            aux: (0..num_layers).map(|_| HashMap::new()).collect(),
            frontier: HashMap::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// First layer without KV for `token`; 0 for tokens never computed.
    pub fn frontier(&self, token: usize) -> usize {
        self.frontier.get(&token).copied().unwrap_or(0)
    }

    pub fn frontiers(&self) -> &HashMap<usize, usize> {
        &self.frontier
    }

    pub fn is_empty(&self) -> bool {
        self.frontier.is_empty()
    }

    /// Extends `token`'s KV prefix by one layer, consuming any aux entry
    /// parked at that layer.
    pub fn kv_insert(&mut self, layer: usize, token: usize, key: &[f32], value: &[f32]) -> Result<()> {
        let frontier = self.frontier(token);
        if layer >= self.num_layers || layer != frontier {
            return Err(Error::invariant(format!(
                "kv_insert for token {token} at layer {layer}, frontier is {frontier}"
            )));
        }
        if key.len() != self.width || value.len() != self.width {
            return Err(Error::shape(format!(
                "kv rows of {}/{} for width {}",
                key.len(),
                value.len(),
                self.width
            )));
        }
        self.kv[layer].insert(
            token,
            KvEntry {
                key: key.to_vec(),
                value: value.to_vec(),
            },
        );
        self.aux[layer].remove(&token);
        self.frontier.insert(token, layer + 1);
        Ok(())
    }

    /// Dense keys/values for `tokens` at `layer`, ordered by position.
    pub fn kv_gather(&self, layer: usize, tokens: &[usize]) -> Result<KvContext> {
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut keys = Vec::with_capacity(sorted.len() * self.width);
        let mut values = Vec::with_capacity(sorted.len() * self.width);
        for &token in &sorted {
            let entry = self
                .kv
                .get(layer)
                .and_then(|m| m.get(&token))
                .ok_or(Error::MissingKv {
                    layer,
                    token,
                    frontier: self.frontier(token),
                })?;
            keys.extend_from_slice(&entry.key);
            values.extend_from_slice(&entry.value);
        }
        Ok(KvContext {
            keys: Matrix::from_vec(sorted.len(), self.width, keys)?,
            values: Matrix::from_vec(sorted.len(), self.width, values)?,
            positions: sorted,
        })
    }

    pub fn aux_store(&mut self, layer: usize, token: usize, hidden: &[f32]) -> Result<()> {
        let frontier = self.frontier(token);
        if layer >= self.num_layers || frontier != layer {
            return Err(Error::invariant(format!(
                "aux_store for token {token} at layer {layer}, frontier is {frontier}"
            )));
        }
        if hidden.len() != self.width {
            return Err(Error::shape(format!(
                "aux row of {} for width {}",
                hidden.len(),
                self.width
            )));
        }
        if let Some(existing) = self.aux.iter().position(|m| m.contains_key(&token)) {
            return Err(Error::invariant(format!(
                "token {token} already has an aux entry at layer {existing}"
            )));
        }
        self.aux[layer].insert(token, hidden.to_vec());
        Ok(())
    }

    /// Reads the aux entry without removing it; the entry goes away when the
    /// token's KV is inserted at this layer.
    pub fn aux_take(&self, layer: usize, token: usize) -> Result<&[f32]> {
        self.aux
            .get(layer)
            .and_then(|m| m.get(&token))
            .map(Vec::as_slice)
            .ok_or(Error::MissingAux { layer, token })
    }

    pub fn verify_invariants(&self) -> Vec<CacheViolation> {
        let mut out = Vec::new();
        let mut tokens: Vec<(usize, usize)> = self.frontier.iter().map(|(&t, &f)| (t, f)).collect();
        tokens.sort_unstable();
        for &(token, frontier) in &tokens {
            for layer in 0..self.num_layers {
                let entry = self.kv[layer].get(&token);
                if entry.is_some() != (layer < frontier) {
                    out.push(CacheViolation::PrefixCoverage {
                        token,
                        frontier,
                        layer,
                    });
                }
                if let Some(e) = entry {
                    if e.key.len() != self.width || e.value.len() != self.width {
                        out.push(CacheViolation::RowWidth { token, layer });
                    }
                }
            }
            let aux_layers: Vec<usize> = (0..self.num_layers)
                .filter(|&l| self.aux[l].contains_key(&token))
                .collect();
            if aux_layers.len() > 1 {
                out.push(CacheViolation::MultipleAux {
                    token,
                    count: aux_layers.len(),
                });
            }
            for &layer in &aux_layers {
                if layer != frontier {
                    out.push(CacheViolation::AuxMisplaced {
                        token,
                        layer,
                        frontier,
                    });
                }
            }
            if frontier < self.num_layers && !aux_layers.contains(&frontier) {
                out.push(CacheViolation::AuxMissing { token, frontier });
            }
        }
        // Entries for tokens that never got a frontier.
        for layer in 0..self.num_layers {
            let mut strays: Vec<usize> = self.kv[layer]
                .keys()
                .chain(self.aux[layer].keys())
                .filter(|t| !self.frontier.contains_key(t))
                .copied()
                .collect();
            strays.sort_unstable();
            strays.dedup();
            for token in strays {
                out.push(CacheViolation::PrefixCoverage {
                    token,
                    frontier: 0,
                    layer,
                });
            }
        }
        out
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let sorted_keys = |keys: Vec<usize>| {
            let mut k = keys;
            k.sort_unstable();
            k
        };
        CacheSnapshot {
            frontiers: self.frontier.iter().map(|(&t, &f)| (t, f)).collect(),
            kv_tokens: self.kv.iter().map(|m| sorted_keys(m.keys().copied().collect())).collect(),
            aux_tokens: self.aux.iter().map(|m| sorted_keys(m.keys().copied().collect())).collect(),
        }
    }

    /// Number of aux entries across all layers.
    pub fn aux_len(&self) -> usize {
        self.aux.iter().map(HashMap::len).sum()
    }

    #[doc(hidden)]
    pub fn remove_kv_for_testing(&mut self, layer: usize, token: usize) {
        self.kv[layer].remove(&token);
    }
}
