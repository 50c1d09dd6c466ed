//! Dense f32 kernels used by the transformer layers.
//!
//! Everything here is single-threaded and accumulates in a fixed order, so
//! identical inputs always give bit-identical outputs. The attention kernel
//! works on arbitrary (sorted) key position sets, which is what lets the
//! engine attend over a pruned context without compacting positions.

use crate::error::{Error, Result};

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. `cols` is needed for the
    /// zero-row case.
    pub fn from_rows<'a, I>(cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {n} has length {}, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
            n += 1;
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "pushed row has length {}, expected {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Per-head attention probabilities for a subset of query rows.
///
/// Layout is `[captured row][head][key]`. Masked (future) keys hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    heads: usize,
    queries: usize,
    keys: usize,
    rows: Vec<usize>,
    probs: Vec<f32>,
}

impl AttentionProbs {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    /// Query rows whose probabilities were retained.
    pub fn captured_rows(&self) -> &[usize] {
        &self.rows
    }

    /// Probability row of `query` for `head`, if that query was captured.
    pub fn row(&self, head: usize, query: usize) -> Option<&[f32]> {
        let slot = self.rows.iter().position(|&r| r == query)?;
        let start = (slot * self.heads + head) * self.keys;
        Some(&self.probs[start..start + self.keys])
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> Option<f32> {
        self.row(head, query).map(|r| r[key])
    }
}

/// `a · b`, accumulating each output element over the shared dimension
/// strictly left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    // Register tiles of MR rows by NR columns; every output element still
    // sums its products in ascending k starting from 0.
    const MR: usize = 8;
    const NR: usize = 16;
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f32; NR]; MR];
            for kk in 0..k {
                let b_tile: &[f32; NR] = b.data[kk * n + j0..kk * n + j0 + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let aik = a.data[(i0 + r) * k + kk];
                    for t in 0..NR {
                        row[t] += aik * b_tile[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out.data[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if full_cols < n {
            matmul_strip(a, b, i0..i0 + MR, full_cols, &mut out);
        }
    }
    if full_rows < m {
        matmul_strip(a, b, full_rows..m, 0, &mut out);
    }
    Ok(out)
}

fn matmul_strip(a: &Matrix, b: &Matrix, rows: std::ops::Range<usize>, col0: usize, out: &mut Matrix) {
    let (k, n) = (a.cols, b.cols);
    for i in rows {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out.data[i * n + col0..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n + col0..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Exponentials and their sum are carried in f64 so each output is the
/// correctly rounded f32 of the exact ratio, give or take one rounding.
fn softmax_in_place(xs: &mut [f32], scratch: &mut Vec<f64>) {
    let mut max = f32::NEG_INFINITY;
    for &x in xs.iter() {
        max = max.max(x);
    }
    let max = max as f64;
    scratch.clear();
    let mut sum = 0.0f64;
    for &x in xs.iter() {
        let e = (x as f64 - max).exp();
        scratch.push(e);
        sum += e;
    }
    for (x, &e) in xs.iter_mut().zip(scratch.iter()) {
        *x = (e / sum) as f32;
    }
}

/// Row-wise softmax. `mask[i]` set means entry `i` is excluded and comes
/// out as exactly 0.
pub fn softmax_rows(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.len() != x.data.len() {
            return Err(Error::shape(format!(
                "mask has {} entries for a {}x{} matrix",
                m.len(),
                x.rows,
                x.cols
            )));
        }
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut buf = Vec::with_capacity(x.cols);
    let mut scratch = Vec::with_capacity(x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let row_mask = mask.map(|m| &m[r * x.cols..(r + 1) * x.cols]);
        buf.clear();
        match row_mask {
            Some(m) => buf.extend(row.iter().zip(m).filter(|(_, &masked)| !masked).map(|(&v, _)| v)),
            None => buf.extend_from_slice(row),
        }
        if buf.is_empty() {
            return Err(Error::DegenerateRow { row: r });
        }
        softmax_in_place(&mut buf, &mut scratch);
        let out_row = out.row_mut(r);
        let mut next = buf.iter();
        for (c, o) in out_row.iter_mut().enumerate() {
            if row_mask.is_some_and(|m| m[c]) {
                continue;
            }
            *o = *next.next().expect("unmasked count matches");
        }
    }
    Ok(out)
}

pub fn rms_norm(x: &Matrix, gain: &[f32]) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::shape(format!(
            "rms_norm gain length {} for {} columns",
            gain.len(),
            x.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut sum_sq = 0.0f32;
        for &v in row {
            sum_sq += v * v;
        }
        let inv = 1.0 / (sum_sq / x.cols as f32 + RMS_EPS).sqrt();
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * inv * g;
        }
    }
    Ok(out)
}

/// Rotary embedding over every `head_dim` segment of each row, pairing
/// adjacent lanes `(2i, 2i+1)`. `positions` are absolute sequence indices.
pub fn rope_apply(x: &Matrix, positions: &[usize], head_dim: usize) -> Result<Matrix> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::config(format!("head_dim must be even and non-zero, got {head_dim}")));
    }
    if !x.cols.is_multiple_of(head_dim) {
        return Err(Error::shape(format!(
            "{} columns not divisible by head_dim {head_dim}",
            x.cols
        )));
    }
    if positions.len() != x.rows {
        return Err(Error::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows
        )));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    let mut out = x.clone();
    let mut cos = vec![0.0f32; half];
    let mut sin = vec![0.0f32; half];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let angle = pos as f64 * inv_freq[i];
            cos[i] = angle.cos() as f32;
            sin[i] = angle.sin() as f32;
        }
        for seg in out.row_mut(r).chunks_exact_mut(head_dim) {
            for i in 0..half {
                let (a, b) = (seg[2 * i], seg[2 * i + 1]);
                seg[2 * i] = a * cos[i] - b * sin[i];
                seg[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }
    Ok(out)
}

/// Causal multi-head attention over explicit position sets, keeping the
/// probabilities of every query row.
pub fn attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    query_positions: &[usize],
    key_positions: &[usize],
    heads: usize,
) -> Result<(Matrix, AttentionProbs)> {
    let all: Vec<usize> = (0..queries.rows).collect();
    attention_rows(queries, keys, values, query_positions, key_positions, heads, &all)
}

/// Same as [`attention`] but only retains probabilities for the query rows
/// in `capture`. A query at position `p` sees keys at positions `<= p`;
/// `key_positions` must be strictly ascending.
pub fn attention_rows(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    query_positions: &[usize],
    key_positions: &[usize],
    heads: usize,
    capture: &[usize],
) -> Result<(Matrix, AttentionProbs)> {
    let d = queries.cols;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(format!("{d} columns not divisible into {heads} heads")));
    }
    if keys.cols != d || values.cols != d {
        return Err(Error::shape(format!(
            "query width {d}, key width {}, value width {}",
            keys.cols, values.cols
        )));
    }
    if keys.rows != values.rows || keys.rows != key_positions.len() {
        return Err(Error::shape(format!(
            "{} keys, {} values, {} key positions",
            keys.rows,
            values.rows,
            key_positions.len()
        )));
    }
    if queries.rows != query_positions.len() {
        return Err(Error::shape(format!(
            "{} queries, {} query positions",
            queries.rows,
            query_positions.len()
        )));
    }
    if key_positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("key positions must be strictly ascending"));
    }
    if let Some(&bad) = capture.iter().find(|&&r| r >= queries.rows) {
        return Err(Error::input(format!("capture row {bad} out of range")));
    }

    let (n, m) = (queries.rows, keys.rows);
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();

    // Keys are sorted, so each query sees a prefix of them.
    let visible: Vec<usize> = query_positions
        .iter()
        .map(|&p| key_positions.partition_point(|&kp| kp <= p))
        .collect();
    if let Some(row) = visible.iter().position(|&v| v == 0) {
        return Err(Error::DegenerateRow { row });
    }

    let mut slot_of = vec![usize::MAX; n];
    for (slot, &r) in capture.iter().enumerate() {
        slot_of[r] = slot;
    }
    let mut probs = vec![0.0f32; capture.len() * heads * m];
    let mut out = Matrix::zeros(n, d);
    let mut keys_t = vec![0.0f32; head_dim * m];
    let mut scores = vec![0.0f32; QB * m];
    let mut q_block = vec![0.0f32; QB * head_dim];
    let mut scratch = Vec::with_capacity(m);

    for h in 0..heads {
        let col = h * head_dim;
        for j in 0..m {
            let k_row = &keys.data[j * d + col..j * d + col + head_dim];
            for (dd, &kv) in k_row.iter().enumerate() {
                keys_t[dd * m + j] = kv;
            }
        }
        for i0 in (0..n).step_by(QB) {
            let nq = QB.min(n - i0);
            let vis = &visible[i0..i0 + nq];
            q_block.fill(0.0);
            for q in 0..nq {
                let src = &queries.data[(i0 + q) * d + col..(i0 + q) * d + col + head_dim];
                q_block[q * head_dim..(q + 1) * head_dim].copy_from_slice(src);
            }
            let vis_max = vis.iter().copied().max().unwrap_or(0);
            block_scores(&q_block, &keys_t, head_dim, m, vis_max, &mut scores);

            for (q, &v) in vis.iter().enumerate() {
                let s = &mut scores[q * m..q * m + v];
                for sj in s.iter_mut() {
                    *sj *= scale;
                }
                softmax_in_place(s, &mut scratch);
                let slot = slot_of[i0 + q];
                if slot != usize::MAX {
                    let start = (slot * heads + h) * m;
                    probs[start..start + v].copy_from_slice(s);
                }
            }
            block_weighted_values(&scores, m, vis, &values.data, d, col, head_dim, &mut out.data[i0 * d..]);
        }
    }

    Ok((
        out,
        AttentionProbs {
            heads,
            queries: n,
            keys: m,
            rows: capture.to_vec(),
            probs,
        },
    ))
}

/// Query rows per attention block.
const QB: usize = 4;
/// Key columns per register tile.
const KT: usize = 16;

/// `scores[q][j] = Σ_dd q_block[q][dd] · keys_t[dd][j]` for `j < vis`,
/// accumulated over `dd` in ascending order like [`matmul`].
fn block_scores(q_block: &[f32], keys_t: &[f32], head_dim: usize, m: usize, vis: usize, scores: &mut [f32]) {
    let mut jt = 0;
    while jt + KT <= vis {
        let mut acc = [[0.0f32; KT]; QB];
        for dd in 0..head_dim {
            let kt: &[f32; KT] = keys_t[dd * m + jt..dd * m + jt + KT].try_into().expect("tile");
            for (q, a) in acc.iter_mut().enumerate() {
                let qd = q_block[q * head_dim + dd];
                for t in 0..KT {
                    a[t] += qd * kt[t];
                }
            }
        }
        for (q, a) in acc.iter().enumerate() {
            scores[q * m + jt..q * m + jt + KT].copy_from_slice(a);
        }
        jt += KT;
    }
    for j in jt..vis {
        for q in 0..QB {
            let mut s = 0.0f32;
            for dd in 0..head_dim {
                s += q_block[q * head_dim + dd] * keys_t[dd * m + j];
            }
            scores[q * m + j] = s;
        }
    }
}

/// `out[q][col..col+head_dim] = Σ_j p[q][j] · v[j]` over each row's visible
/// prefix, accumulated over `j` in ascending order.
#[allow(clippy::too_many_arguments)]
fn block_weighted_values(
    probs: &[f32],
    m: usize,
    vis: &[usize],
    values: &[f32],
    d: usize,
    col: usize,
    head_dim: usize,
    out: &mut [f32],
) {
    const CW: usize = 32;
    let nq = vis.len();
    let shared = vis.iter().copied().min().unwrap_or(0);
    let mut c0 = 0;
    while c0 < head_dim {
        let w = CW.min(head_dim - c0);
        let mut acc = [[0.0f32; CW]; QB];
        if w == CW && nq == QB {
            for j in 0..shared {
                let v: &[f32; CW] = values[j * d + col + c0..j * d + col + c0 + CW].try_into().expect("tile");
                for (q, a) in acc.iter_mut().enumerate() {
                    let p = probs[q * m + j];
                    for t in 0..CW {
                        a[t] += p * v[t];
                    }
                }
            }
        } else {
            for j in 0..shared {
                let v = &values[j * d + col + c0..j * d + col + c0 + w];
                for (q, a) in acc.iter_mut().enumerate().take(nq) {
                    let p = probs[q * m + j];
                    for (at, &vt) in a.iter_mut().zip(v) {
                        *at += p * vt;
                    }
                }
            }
        }
        for (q, a) in acc.iter_mut().enumerate().take(nq) {
            for j in shared..vis[q] {
                let p = probs[q * m + j];
                let v = &values[j * d + col + c0..j * d + col + c0 + w];
                for (at, &vt) in a.iter_mut().zip(v) {
                    *at += p * vt;
                }
            }
            out[q * d + col + c0..q * d + col + c0 + w].copy_from_slice(&a[..w]);
        }
        c0 += w;
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Llama-style gated MLP: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
pub fn gated_mlp(x: &Matrix, w_gate: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    if w_gate.cols != w_up.cols || w_gate.rows != w_up.rows || w_down.rows != w_gate.cols {
        return Err(Error::shape(format!(
            "mlp weights gate {}x{}, up {}x{}, down {}x{}",
            w_gate.rows, w_gate.cols, w_up.rows, w_up.cols, w_down.rows, w_down.cols
        )));
    }
    let mut gate = matmul(x, w_gate)?;
    let up = matmul(x, w_up)?;
    for (g, &u) in gate.data.iter_mut().zip(&up.data) {
        *g = silu(*g) * u;
    }
    matmul(&gate, w_down)
}

/// `a += b`, element-wise.
pub fn add_in_place(a: &mut Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(format!(
            "add {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    a.add_assign(b);
    Ok(())
}
