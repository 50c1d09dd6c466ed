//! Decoder-only transformer: configuration, weights, the LZWT weight file
//! and a single-layer forward pass over an arbitrary live token subset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, AttentionProbs, Matrix};

pub const LZWT_MAGIC: &[u8; 4] = b"LZWT";
pub const LZWT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    #[serde(default = "default_tied")]
    pub tied_embeddings: bool,
}

fn default_tied() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 12,
            num_heads: 8,
            d_model: 256,
            d_ff: 688,
            vocab_size: 258,
            max_position: 8192,
            tied_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::config(format!("need at least 2 layers, got {}", self.num_layers)));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.head_dim() == 0 || !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!("head_dim {} must be even", self.head_dim())));
        }
        if self.vocab_size < 2 {
            return Err(Error::config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.d_ff == 0 || self.max_position == 0 {
            return Err(Error::config("d_ff and max_position must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// Projections are stored `[in, out]`, applied as `x · W`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab, d_model]`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[vocab, d_model]`; `None` when tied to `embedding`.
    pub unembedding: Option<Matrix>,
}

/// Keys and values of already computed tokens, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvContext {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl KvContext {
    pub fn empty(d_model: usize) -> Self {
        KvContext {
            keys: Matrix::zeros(0, d_model),
            values: Matrix::zeros(0, d_model),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Output hidden states of the live tokens.
    pub hidden: Matrix,
    /// Rotated keys of the live tokens (cache rows).
    pub keys: Matrix,
    pub values: Matrix,
    pub probs: AttentionProbs,
    /// Position of each attention key column (context and live merged).
    pub key_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn embed(&self, token_ids: &[u32]) -> Result<Matrix> {
        let vocab = self.config.vocab_size;
        if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let rows: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        Ok(self.weights.embedding.select_rows(&rows))
    }

    /// One pre-norm decoder block over the live tokens. The live tokens'
    /// fresh keys/values are merged with `context` so every query attends to
    /// itself and to every visible context token. `capture` lists live rows
    /// whose attention probabilities are kept.
    pub fn layer_forward(
        &self,
        layer: usize,
        live_hidden: &Matrix,
        live_positions: &[usize],
        context: &KvContext,
        capture: &[usize],
    ) -> Result<LayerOutput> {
        let lw = self
            .weights
            .layers
            .get(layer)
            .ok_or_else(|| Error::input(format!("layer {layer} out of range")))?;
        if live_hidden.rows() != live_positions.len() {
            return Err(Error::shape(format!(
                "{} live rows, {} live positions",
                live_hidden.rows(),
                live_positions.len()
            )));
        }
        if live_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("live positions must be strictly ascending"));
        }
        let head_dim = self.config.head_dim();

        let normed = tensor::rms_norm(live_hidden, &lw.attn_norm)?;
        let q = tensor::rope_apply(&tensor::matmul(&normed, &lw.wq)?, live_positions, head_dim)?;
        let k = tensor::rope_apply(&tensor::matmul(&normed, &lw.wk)?, live_positions, head_dim)?;
        let v = tensor::matmul(&normed, &lw.wv)?;

        let (attn, probs, key_positions) = if context.is_empty() {
            let (attn, probs) = tensor::attention_rows(
                &q,
                &k,
                &v,
                live_positions,
                live_positions,
                self.config.num_heads,
                capture,
            )?;
            (attn, probs, live_positions.to_vec())
        } else {
            let merged = merge_kv(context, &k, &v, live_positions)?;
            let (attn, probs) = tensor::attention_rows(
                &q,
                &merged.keys,
                &merged.values,
                live_positions,
                &merged.positions,
                self.config.num_heads,
                capture,
            )?;
            (attn, probs, merged.positions)
        };

        let mut hidden = live_hidden.clone();
        tensor::add_in_place(&mut hidden, &tensor::matmul(&attn, &lw.wo)?)?;
        let mlp_in = tensor::rms_norm(&hidden, &lw.mlp_norm)?;
        let mlp_out = tensor::gated_mlp(&mlp_in, &lw.w_gate, &lw.w_up, &lw.w_down)?;
        tensor::add_in_place(&mut hidden, &mlp_out)?;

        Ok(LayerOutput {
            hidden,
            keys: k,
            values: v,
            probs,
            key_positions,
        })
    }

    pub fn final_norm(&self, hidden_row: &[f32]) -> Result<Vec<f32>> {
        let row = Matrix::from_vec(1, hidden_row.len(), hidden_row.to_vec())?;
        Ok(tensor::rms_norm(&row, &self.weights.final_norm)?.into_data())
    }

    /// Unembedding scores for an already normalized final hidden row.
    pub fn logits(&self, normed_row: &[f32]) -> Result<Vec<f32>> {
        let table = self.weights.unembedding.as_ref().unwrap_or(&self.weights.embedding);
        if normed_row.len() != table.cols() {
            return Err(Error::shape(format!(
                "hidden row of {} for d_model {}",
                normed_row.len(),
                table.cols()
            )));
        }
        Ok((0..table.rows())
            .map(|v| {
                let mut acc = 0.0f32;
                for (&a, &b) in table.row(v).iter().zip(normed_row) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }

    pub fn next_token_logits(&self, hidden_row: &[f32]) -> Result<Vec<f32>> {
        self.logits(&self.final_norm(hidden_row)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_lzwt_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_lzwt_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, shape, data) in named_tensors(&self.config, &self.weights) {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.insert(
                name,
                TensorEntry {
                    dtype: "f32".to_string(),
                    shape,
                    offset,
                    length: payload.len() as u64 - offset,
                },
            );
        }
        let header = serde_json::to_vec(&Header {
            config: self.config,
            tensors,
        })
        .map_err(|e| Error::Format(e.to_string()))?;

        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 4);
        out.extend_from_slice(LZWT_MAGIC);
        out.extend_from_slice(&LZWT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_lzwt_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |msg: String| Error::Format(msg);
        if bytes.len() < 16 {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != LZWT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != LZWT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&e| e + 4 <= bytes.len() as u64)
            .ok_or_else(|| fmt("header length exceeds file".into()))? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| fmt(format!("header: {e}")))?;
        let payload = &bytes[header_end..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Err(fmt("payload checksum mismatch".into()));
        }
        let config = header.config;
        config.validate().map_err(|e| fmt(e.to_string()))?;

        let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let entry = header
                .tensors
                .get(name)
                .ok_or_else(|| fmt(format!("missing tensor {name}")))?;
            if entry.dtype != "f32" {
                return Err(fmt(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            if entry.shape != shape {
                return Err(fmt(format!(
                    "{name}: shape {:?}, expected {:?}",
                    entry.shape, shape
                )));
            }
            let count: usize = shape.iter().product();
            if entry.length != (count * 4) as u64 {
                return Err(fmt(format!("{name}: byte length {} for {count} values", entry.length)));
            }
            let start = entry.offset as usize;
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| fmt(format!("{name}: extends past payload")))? as usize;
            let values: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fmt(format!("{name}: non-finite values")));
            }
            Ok(values)
        };
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, read(name, &[rows, cols])?)
        };

        let (d, ff, vocab) = (config.d_model, config.d_ff, config.vocab_size);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerWeights {
                attn_norm: read(&p("attn_norm"), &[d])?,
                wq: mat(&p("attn.wq"), d, d)?,
                wk: mat(&p("attn.wk"), d, d)?,
                wv: mat(&p("attn.wv"), d, d)?,
                wo: mat(&p("attn.wo"), d, d)?,
                mlp_norm: read(&p("mlp_norm"), &[d])?,
                w_gate: mat(&p("mlp.w_gate"), d, ff)?,
                w_up: mat(&p("mlp.w_up"), d, ff)?,
                w_down: mat(&p("mlp.w_down"), ff, d)?,
            });
        }
        let weights = ModelWeights {
            embedding: mat("tok_embeddings", vocab, d)?,
            layers,
            final_norm: read("final_norm", &[d])?,
            unembedding: if config.tied_embeddings {
                None
            } else {
                Some(mat("unembedding", vocab, d)?)
            },
        };
        Model::new(config, weights)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Model::from_lzwt_bytes(&fs::read(path)?)
}

/// Random model with weights drawn from `N(0, 1) / sqrt(d_model)` and unit
/// norm gains. Same `(config, seed)` always gives the same bytes.
pub fn generate_random_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let mut mat = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized")
    };
    let (d, ff, vocab) = (config.d_model, config.d_ff, config.vocab_size);
    let embedding = mat(vocab, d);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            mlp_norm: vec![1.0; d],
            w_gate: mat(d, ff),
            w_up: mat(d, ff),
            w_down: mat(ff, d),
        })
        .collect();
    let unembedding = (!config.tied_embeddings).then(|| mat(vocab, d));
    Model::new(
        config,
        ModelWeights {
            embedding,
            layers,
            final_norm: vec![1.0; d],
            unembedding,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

fn named_tensors<'a>(
    config: &ModelConfig,
    w: &'a ModelWeights,
) -> Vec<(String, Vec<usize>, &'a [f32])> {
    let m = |name: String, x: &'a Matrix| (name, vec![x.rows(), x.cols()], x.data());
    let v = |name: String, x: &'a [f32]| (name, vec![x.len()], x);
    let mut out = vec![m("tok_embeddings".into(), &w.embedding)];
    for (l, lw) in w.layers.iter().enumerate() {
        out.push(v(format!("layers.{l}.attn_norm"), &lw.attn_norm));
        out.push(m(format!("layers.{l}.attn.wq"), &lw.wq));
        out.push(m(format!("layers.{l}.attn.wk"), &lw.wk));
        out.push(m(format!("layers.{l}.attn.wv"), &lw.wv));
        out.push(m(format!("layers.{l}.attn.wo"), &lw.wo));
        out.push(v(format!("layers.{l}.mlp_norm"), &lw.mlp_norm));
        out.push(m(format!("layers.{l}.mlp.w_gate"), &lw.w_gate));
        out.push(m(format!("layers.{l}.mlp.w_up"), &lw.w_up));
        out.push(m(format!("layers.{l}.mlp.w_down"), &lw.w_down));
    }
    out.push(v("final_norm".into(), &w.final_norm));
    if let (false, Some(u)) = (config.tied_embeddings, &w.unembedding) {
        out.push(m("unembedding".into(), u));
    }
    out
}

fn check_shapes(config: &ModelConfig, w: &ModelWeights) -> Result<()> {
    let (d, ff, vocab) = (config.d_model, config.d_ff, config.vocab_size);
    let expect = |name: &str, x: &Matrix, rows: usize, cols: usize| -> Result<()> {
        if x.rows() != rows || x.cols() != cols {
            return Err(Error::shape(format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                x.rows(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::input(format!("{name} has non-finite values")));
        }
        Ok(())
    };
    let expect_vec = |name: &str, x: &[f32]| -> Result<()> {
        if x.len() != d {
            return Err(Error::shape(format!("{name} has length {}, expected {d}", x.len())));
        }
        Ok(())
    };
    expect("tok_embeddings", &w.embedding, vocab, d)?;
    if w.layers.len() != config.num_layers {
        return Err(Error::shape(format!(
            "{} layers of weights for {} configured",
            w.layers.len(),
            config.num_layers
        )));
    }
    for (l, lw) in w.layers.iter().enumerate() {
        expect_vec(&format!("layers.{l}.attn_norm"), &lw.attn_norm)?;
        expect_vec(&format!("layers.{l}.mlp_norm"), &lw.mlp_norm)?;
        expect(&format!("layers.{l}.attn.wq"), &lw.wq, d, d)?;
        expect(&format!("layers.{l}.attn.wk"), &lw.wk, d, d)?;
        expect(&format!("layers.{l}.attn.wv"), &lw.wv, d, d)?;
        expect(&format!("layers.{l}.attn.wo"), &lw.wo, d, d)?;
        expect(&format!("layers.{l}.mlp.w_gate"), &lw.w_gate, d, ff)?;
        expect(&format!("layers.{l}.mlp.w_up"), &lw.w_up, d, ff)?;
        expect(&format!("layers.{l}.mlp.w_down"), &lw.w_down, ff, d)?;
    }
    expect_vec("final_norm", &w.final_norm)?;
    match (&w.unembedding, config.tied_embeddings) {
        (None, true) => {}
        (Some(u), false) => expect("unembedding", u, vocab, d)?,
        (Some(_), true) => return Err(Error::shape("untied unembedding on a tied config")),
        (None, false) => return Err(Error::shape("missing unembedding for untied config")),
    }
    Ok(())
}

struct Merged {
    keys: Matrix,
    values: Matrix,
    positions: Vec<usize>,
}

fn merge_kv(context: &KvContext, keys: &Matrix, values: &Matrix, positions: &[usize]) -> Result<Merged> {
    let d = keys.cols();
    let total = context.len() + positions.len();
    let mut merged_positions = Vec::with_capacity(total);
    let mut kd = Vec::with_capacity(total * d);
    let mut vd = Vec::with_capacity(total * d);
    let (mut a, mut b) = (0, 0);
    while a < context.len() || b < positions.len() {
        let take_context = match (context.positions.get(a), positions.get(b)) {
            (Some(&pa), Some(&pb)) if pa == pb => {
                return Err(Error::input(format!("position {pa} is both live and in context")));
            }
            (Some(&pa), Some(&pb)) => pa < pb,
            (Some(_), None) => true,
            _ => false,
        };
        if take_context {
            kd.extend_from_slice(context.keys.row(a));
            vd.extend_from_slice(context.values.row(a));
            merged_positions.push(context.positions[a]);
            a += 1;
        } else {
            kd.extend_from_slice(keys.row(b));
            vd.extend_from_slice(values.row(b));
            merged_positions.push(positions[b]);
            b += 1;
        }
    }
    Ok(Merged {
        keys: Matrix::from_vec(total, d, kd)?,
        values: Matrix::from_vec(total, d, vd)?,
        positions: merged_positions,
    })
}
