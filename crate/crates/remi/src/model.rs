//! Forward computation: history embedding, item-to-interest routing via
//! additive attention, interest extraction, argmax interest selection and
//! serving scores. All math is f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

/// Model dimensions: embedding size `d`, attention size `d_a`, interest
/// count `k`, max history length `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub d_a: usize,
    pub k: usize,
    pub n: usize,
}

/// Learnable parameters. Row 0 of the item embedding table is the padding
/// row and stays identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|I| x d`, row 0 zero.
    pub item_emb: Array2<f64>,
    /// `n x d` positional embeddings.
    pub pos_emb: Array2<f64>,
    /// `d_a x d` attention projection.
    pub attn_w1: Array2<f64>,
    /// `d_a x k` per-interest scoring heads.
    pub attn_w2: Array2<f64>,
    pub dims: Dims,
}

impl ModelParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]`; padding row forced to zero.
    pub fn init(dims: Dims, embedding_rows: usize, seed: u64) -> Self {
        let mut rng = crate::seeded_rng(seed);
        let bound = 1.0 / (dims.d as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let mut item_emb = draw(embedding_rows, dims.d);
        item_emb.row_mut(0).fill(0.0);
        let pos_emb = draw(dims.n, dims.d);
        let attn_w1 = draw(dims.d_a, dims.d);
        let attn_w2 = draw(dims.d_a, dims.k);
        ModelParams { item_emb, pos_emb, attn_w1, attn_w2, dims }
    }

    pub fn embedding_rows(&self) -> usize {
        self.item_emb.nrows()
    }

    /// Checkpoint format: text header `d d_a K n |I|`, then per block a
    /// 4-byte tag, an 8-byte little-endian byte length, and the block's
    /// values as little-endian f64 in row-major order (E, P, W1, W2).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "{} {} {} {} {}",
            self.dims.d,
            self.dims.d_a,
            self.dims.k,
            self.dims.n,
            self.embedding_rows()
        )?;
        for (tag, block) in self.blocks() {
            w.write_all(tag)?;
            let bytes = (block.len() * 8) as u64;
            w.write_all(&bytes.to_le_bytes())?;
            for &v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            if b[0] == b'\n' {
                break;
            }
            header.push(b[0]);
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Data("checkpoint header is not UTF-8".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Data(format!("bad checkpoint header {header:?}"))))
            .collect::<Result<_>>()?;
        let [d, d_a, k, n, rows] = nums[..] else {
            return Err(Error::Data("checkpoint header must have 5 fields".into()));
        };
        let dims = Dims { d, d_a, k, n };
        let shapes: [(&[u8; 4], (usize, usize)); 4] = [
            (b"EMB ", (rows, d)),
            (b"POS ", (n, d)),
            (b"ATW1", (d_a, d)),
            (b"ATW2", (d_a, k)),
        ];
        let mut blocks = Vec::new();
        for (tag, shape) in shapes {
            let mut got = [0u8; 4];
            r.read_exact(&mut got)?;
            if &got != tag {
                return Err(Error::Data(format!(
                    "checkpoint block tag mismatch: expected {:?}",
                    String::from_utf8_lossy(tag)
                )));
            }
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let bytes = u64::from_le_bytes(len) as usize;
            if bytes != shape.0 * shape.1 * 8 {
                return Err(Error::Data("checkpoint block length mismatch".into()));
            }
            let mut buf = vec![0u8; bytes];
            r.read_exact(&mut buf)?;
            let vals: Vec<f64> =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.push(
                Array2::from_shape_vec(shape, vals)
                    .map_err(|e| Error::Data(format!("checkpoint shape error: {e}")))?,
            );
        }
        let attn_w2 = blocks.pop().unwrap();
        let attn_w1 = blocks.pop().unwrap();
        let pos_emb = blocks.pop().unwrap();
        let item_emb = blocks.pop().unwrap();
        Ok(ModelParams { item_emb, pos_emb, attn_w1, attn_w2, dims })
    }

    fn blocks(&self) -> [(&'static [u8; 4], &Array2<f64>); 4] {
        [
            (b"EMB ", &self.item_emb),
            (b"POS ", &self.pos_emb),
            (b"ATW1", &self.attn_w1),
            (b"ATW2", &self.attn_w2),
        ]
    }
}

/// `n x k` nonnegative routing weights; each interest's weights over valid
/// positions sum to 1, and weights at masked positions are exactly zero.
#[derive(Debug, Clone)]
pub struct RoutingMatrix {
    pub weights: Array2<f64>,
    pub mask: Vec<bool>,
}

impl RoutingMatrix {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Embeds a left-padded history row: column `t` is `E[id] + P[t]` for valid
/// positions, zero elsewhere. Returns the `d x n` matrix and validity mask.
pub fn embed_history(
    params: &ModelParams,
    history_ids: &[u32],
    valid_length: usize,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let Dims { d, n, .. } = params.dims;
    if valid_length == 0 {
        return Err(Error::Data("embed_history needs at least one valid item".into()));
    }
    debug_assert_eq!(history_ids.len(), n);
    let mut h = Array2::zeros((d, n));
    let mut mask = vec![false; n];
    for t in n - valid_length..n {
        let id = history_ids[t] as usize;
        let e = params.item_emb.row(id);
        let p = params.pos_emb.row(t);
        for j in 0..d {
            h[[j, t]] = e[j] + p[j];
        }
        mask[t] = true;
    }
    Ok((h, mask))
}

/// Attention logits `W2^T tanh(W1 H)` as a `k x n` matrix, plus the tanh
/// activations the backward pass needs.
pub(crate) fn attention_logits(
    params: &ModelParams,
    h: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let tanh = params.attn_w1.dot(h).mapv(f64::tanh);
    let logits = params.attn_w2.t().dot(&tanh);
    (logits, tanh)
}

/// Softmax over valid sequence positions, per interest. Masked positions get
/// exactly zero weight.
pub(crate) fn masked_softmax(logits: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let (k, n) = logits.dim();
    let mut a = Array2::zeros((n, k));
    for ki in 0..k {
        let mut max = f64::NEG_INFINITY;
        for t in 0..n {
            if mask[t] {
                max = max.max(logits[[ki, t]]);
            }
        }
        let mut sum = 0.0;
        for t in 0..n {
            if mask[t] {
                let e = (logits[[ki, t]] - max).exp();
                a[[t, ki]] = e;
                sum += e;
            }
        }
        for t in 0..n {
            if mask[t] {
                a[[t, ki]] /= sum;
            }
        }
    }
    a
}

/// Computes the item-to-interest routing matrix for one history.
pub fn route(params: &ModelParams, h: &Array2<f64>, mask: &[bool]) -> Result<RoutingMatrix> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("route: all positions masked".into()));
    }
    let (logits, _) = attention_logits(params, h);
    Ok(RoutingMatrix { weights: masked_softmax(&logits, mask), mask: mask.to_vec() })
}

/// Interest vectors `V = H A`, a `d x k` matrix.
pub fn extract_interests(h: &Array2<f64>, routing: &RoutingMatrix) -> Array2<f64> {
    h.dot(&routing.weights)
}

/// Argmax interest for a positive item, ties broken by lowest index.
pub fn select_interest(v: &Array2<f64>, target_embedding: ArrayView1<f64>) -> (usize, Array1<f64>) {
    let scores = v.t().dot(&target_embedding);
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    (best, v.column(best).to_owned())
}

/// Serving score `f(u, i) = max_k v_k . e_i`.
pub fn score_item(v: &Array2<f64>, item_embedding: ArrayView1<f64>) -> f64 {
    let scores = v.t().dot(&item_embedding);
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
