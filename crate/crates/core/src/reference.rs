//! Cache-free reference forward pass.
//!
//! Recomputes the whole sequence through every layer with a dense causal
//! mask. It shares the elementwise kernels with the runtime but none of the
//! live-set, cache or pruning machinery, so it is the yardstick for the
//! unpruned engine.

use crate::engine::greedy_sample;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::{self, Matrix};

/// Final-layer hidden states (before the final norm) of every token.
pub fn dense_forward(model: &Model, tokens: &[u32]) -> Result<Matrix> {
    let cfg = model.config();
    let n = tokens.len();
    let (d, heads, head_dim) = (cfg.d_model, cfg.num_heads, cfg.head_dim());
    let positions: Vec<usize> = (0..n).collect();
    let mask: Vec<bool> = (0..n * n).map(|idx| idx % n > idx / n).collect();
    let scale = 1.0 / (head_dim as f32).sqrt();

    let mut hidden = model.embed(tokens)?;
    for lw in &model.weights().layers {
        let normed = tensor::rms_norm(&hidden, &lw.attn_norm)?;
        let q = tensor::rope_apply(&tensor::matmul(&normed, &lw.wq)?, &positions, head_dim)?;
        let k = tensor::rope_apply(&tensor::matmul(&normed, &lw.wk)?, &positions, head_dim)?;
        let v = tensor::matmul(&normed, &lw.wv)?;

        let mut attn = Matrix::zeros(n, d);
        for h in 0..heads {
            let cols: Vec<usize> = (h * head_dim..(h + 1) * head_dim).collect();
            let q_h = column_slice(&q, &cols);
            let k_h = column_slice(&k, &cols);
            let v_h = column_slice(&v, &cols);
            let mut scores = tensor::matmul(&q_h, &transpose(&k_h))?;
            for s in scores.data_mut() {
                *s *= scale;
            }
            let probs = tensor::softmax_rows(&scores, Some(&mask))?;
            let out_h = tensor::matmul(&probs, &v_h)?;
            for i in 0..n {
                attn.row_mut(i)[h * head_dim..(h + 1) * head_dim].copy_from_slice(out_h.row(i));
            }
        }
        tensor::add_in_place(&mut hidden, &tensor::matmul(&attn, &lw.wo)?)?;
        let mlp_in = tensor::rms_norm(&hidden, &lw.mlp_norm)?;
        tensor::add_in_place(&mut hidden, &tensor::gated_mlp(&mlp_in, &lw.w_gate, &lw.w_up, &lw.w_down)?)?;
    }
    Ok(hidden)
}

/// Greedy generation that re-runs [`dense_forward`] on the full sequence
/// for every token. Returns the ids and the last-token hidden state behind
/// each of them.
pub fn dense_generate(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
    let mut seq = prompt.to_vec();
    let mut ids = Vec::with_capacity(max_new_tokens);
    let mut hiddens = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        let h = dense_forward(model, &seq)?;
        let last = h.row(h.rows() - 1).to_vec();
        let id = greedy_sample(&model.next_token_logits(&last)?)?;
        hiddens.push(last);
        ids.push(id);
        seq.push(id);
    }
    Ok((ids, hiddens))
}

fn column_slice(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * cols.len());
    for r in 0..m.rows() {
        let row = m.row(r);
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Matrix::from_vec(m.rows(), cols.len(), data).expect("sized")
}

fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.data_mut()[c * m.rows() + r] = m.get(r, c);
        }
    }
    out
}
