//! Reverse pass for the full objective, Adam updates with lazy embedding
//! rows, and the training loop with periodic validation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::corpus::{draw_training_batch, sample_negatives, InteractionCorpus, TrainingBatch, UserSplit};
use crate::error::{Error, Result};
use crate::eval::evaluate_users;
use crate::model::{
    attention_logits, embed_history, masked_softmax, Dims, ModelParams, RoutingMatrix,
};
use crate::objective::{ihn_loss, ihn_loss_grad, routing_regularizer, routing_regularizer_grad, LogitBundle};

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dims: Dims,
    pub batch_size: usize,
    pub neg_multiplier: usize,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub max_iters: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn negative_count(&self) -> usize {
        self.batch_size * self.neg_multiplier
    }
}

/// Gradients per parameter block; embedding gradients are sparse, keyed by
/// row id. The padding row never appears.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub item_emb: BTreeMap<usize, Array1<f64>>,
    pub pos_emb: Array2<f64>,
    pub attn_w1: Array2<f64>,
    pub attn_w2: Array2<f64>,
}

/// Per-batch training diagnostics.
#[derive(Debug, Clone)]
pub struct BatchDiagnostics {
    pub selected: Vec<usize>,
    /// Mean over rows and interests of each interest's max routing weight.
    pub mean_max_routing_weight: f64,
    pub mean_loss_term: f64,
    pub mean_reg_term: f64,
}

struct RowState {
    h: Array2<f64>,
    tanh: Array2<f64>,
    routing: RoutingMatrix,
    v: Array1<f64>,
    selected_k: usize,
    target: usize,
}

fn row_forward(params: &ModelParams, batch: &TrainingBatch, row: usize) -> Result<RowState> {
    let ids = batch.history_row(row);
    let (h, mask) = embed_history(params, ids, batch.valid_lengths[row])?;
    let (logits, tanh) = attention_logits(params, &h);
    let routing = RoutingMatrix { weights: masked_softmax(&logits, &mask), mask };
    let v_mat = h.dot(&routing.weights);
    let target = batch.targets[row] as usize;
    let (selected_k, v) = crate::model::select_interest(&v_mat, params.item_emb.row(target));
    Ok(RowState { h, tanh, routing, v, selected_k, target })
}

struct RowGrad {
    pos_emb: Array2<f64>,
    attn_w1: Array2<f64>,
    attn_w2: Array2<f64>,
    /// History embedding contributions (row id, gradient).
    hist: Vec<(usize, Array1<f64>)>,
    reg: f64,
    max_routing: f64,
}

/// Backward through interest extraction, routing softmax, additive attention
/// and the positional/item embeddings, given the loss gradient w.r.t. the
/// selected interest vector.
fn row_backward(
    params: &ModelParams,
    state: &RowState,
    dv: &Array1<f64>,
    lambda: f64,
) -> RowGrad {
    let Dims { d, n, k, .. } = params.dims;
    let a = &state.routing.weights;
    let mask = &state.routing.mask;

    // dV has a single nonzero column (the selected interest).
    // dA = H^T dV + lambda * dA_reg
    let mut da = Array2::zeros((n, k));
    for t in 0..n {
        if mask[t] {
            let mut acc = 0.0;
            for j in 0..d {
                acc += state.h[[j, t]] * dv[j];
            }
            da[[t, state.selected_k]] = acc;
        }
    }
    let reg = routing_regularizer(&state.routing);
    if lambda != 0.0 {
        da += &(routing_regularizer_grad(&state.routing) * lambda);
    }

    // softmax backward per interest over valid positions
    let mut dz = Array2::zeros((k, n));
    for ki in 0..k {
        let mut dot = 0.0;
        for t in 0..n {
            if mask[t] {
                dot += a[[t, ki]] * da[[t, ki]];
            }
        }
        for t in 0..n {
            if mask[t] {
                dz[[ki, t]] = a[[t, ki]] * (da[[t, ki]] - dot);
            }
        }
    }

    // Z = W2^T T  =>  dW2 = T dZ^T, dT = W2 dZ
    let attn_w2 = state.tanh.dot(&dz.t());
    let dtanh = params.attn_w2.dot(&dz);
    // T = tanh(S) => dS = dT * (1 - T^2)
    let ds = &dtanh * &state.tanh.mapv(|x| 1.0 - x * x);
    // S = W1 H => dW1 = dS H^T, dH += W1^T dS
    let attn_w1 = ds.dot(&state.h.t());
    let mut dh = params.attn_w1.t().dot(&ds);
    // V = H A contributes dH += dv a_k*^T
    for t in 0..n {
        if mask[t] {
            let w = a[[t, state.selected_k]];
            for j in 0..d {
                dh[[j, t]] += dv[j] * w;
            }
        }
    }

    let mut pos_emb = Array2::zeros((n, d));
    let mut hist = Vec::new();
    for t in 0..n {
        if mask[t] {
            let col = dh.column(t).to_owned();
            pos_emb.row_mut(t).assign(&col);
            hist.push((0usize, col)); // id filled by caller
        }
    }

    let max_routing = (0..k)
        .map(|ki| {
            (0..n)
                .filter(|&t| mask[t])
                .map(|t| a[[t, ki]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64;

    RowGrad { pos_emb, attn_w1, attn_w2, hist, reg, max_routing }
}

fn map_rows<T: Send, F: Fn(usize) -> T + Sync + Send>(count: usize, f: F, parallel: bool) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..count).map(f).collect()
}

/// Forward and exact analytic backward for one batch. The loss is the batch
/// mean of `ihn_loss + lambda * L_reg`; the argmax interest selection passes
/// no gradient. Rows run on the rayon lane when the `parallel` feature is
/// enabled; reduction order is fixed either way, so results are
/// bit-identical across lanes.
pub fn forward_backward(
    params: &ModelParams,
    batch: &TrainingBatch,
    beta: f64,
    lambda: f64,
) -> Result<(f64, GradientSet, BatchDiagnostics)> {
    forward_backward_impl(params, batch, beta, lambda, true)
}

/// Sequential lane, callable regardless of features for benchmarking.
pub fn forward_backward_sequential(
    params: &ModelParams,
    batch: &TrainingBatch,
    beta: f64,
    lambda: f64,
) -> Result<(f64, GradientSet, BatchDiagnostics)> {
    forward_backward_impl(params, batch, beta, lambda, false)
}

fn forward_backward_impl(
    params: &ModelParams,
    batch: &TrainingBatch,
    beta: f64,
    lambda: f64,
    parallel: bool,
) -> Result<(f64, GradientSet, BatchDiagnostics)> {
    let b = batch.batch_size();
    let l = batch.negatives.len();
    let Dims { d, .. } = params.dims;

    let states = map_rows(b, |row| row_forward(params, batch, row), parallel);
    let mut rows = Vec::with_capacity(b);
    for s in states {
        rows.push(s?);
    }

    // Shared negative logits: N = E_neg V_sel^T (l x b).
    let mut e_neg = Array2::zeros((l, d));
    for (i, &id) in batch.negatives.iter().enumerate() {
        e_neg.row_mut(i).assign(&params.item_emb.row(id as usize));
    }
    let mut v_sel = Array2::zeros((d, b));
    for (row, s) in rows.iter().enumerate() {
        v_sel.column_mut(row).assign(&s.v);
    }
    let neg_logits = e_neg.dot(&v_sel);

    let mut loss_sum = 0.0;
    let mut dpos = vec![0.0; b];
    let mut dneg = Array2::zeros((l, b));
    for (row, s) in rows.iter().enumerate() {
        let pos = s.v.dot(&params.item_emb.row(s.target));
        let negs: Vec<f64> = neg_logits.column(row).to_vec();
        let bundle = LogitBundle { pos, negs, beta };
        let (loss, dp, dns) = ihn_loss_grad(&bundle);
        loss_sum += loss;
        dpos[row] = dp;
        dneg.column_mut(row).assign(&Array1::from_vec(dns));
    }

    // dv per row: E_neg^T dneg (+ dpos * e_target)
    let dv_all = e_neg.t().dot(&dneg); // d x b
    let scale = 1.0 / b as f64;

    let grads = map_rows(
        b,
        |row| {
            let s = &rows[row];
            let mut dv = dv_all.column(row).to_owned();
            dv.scaled_add(dpos[row], &params.item_emb.row(s.target));
            row_backward(params, s, &dv, lambda)
        },
        parallel,
    );

    let mut item_emb: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    let mut add_emb = |id: usize, g: &Array1<f64>, coeff: f64| {
        if id == 0 {
            return; // padding row never updates
        }
        item_emb
            .entry(id)
            .and_modify(|acc| acc.scaled_add(coeff, g))
            .or_insert_with(|| g * coeff);
    };

    // Negative rows: G_neg = dneg V_sel^T (l x d), accumulated by item id.
    let g_neg = dneg.dot(&v_sel.t());
    for (i, &id) in batch.negatives.iter().enumerate() {
        let row = g_neg.row(i).to_owned();
        add_emb(id as usize, &row, scale);
    }

    let mut pos_emb = Array2::zeros(params.pos_emb.dim());
    let mut attn_w1 = Array2::zeros(params.attn_w1.dim());
    let mut attn_w2 = Array2::zeros(params.attn_w2.dim());
    let mut reg_sum = 0.0;
    let mut max_routing_sum = 0.0;
    let mut selected = Vec::with_capacity(b);
    for (row, g) in grads.iter().enumerate() {
        let s = &rows[row];
        selected.push(s.selected_k);
        reg_sum += g.reg;
        max_routing_sum += g.max_routing;
        pos_emb.scaled_add(scale, &g.pos_emb);
        attn_w1.scaled_add(scale, &g.attn_w1);
        attn_w2.scaled_add(scale, &g.attn_w2);
        // target row
        add_emb(s.target, &s.v, dpos[row] * scale);
        // history rows, in position order
        let ids = batch.history_row(row);
        let n = batch.n;
        let valid_start = n - batch.valid_lengths[row];
        for (slot, (_, ghist)) in g.hist.iter().enumerate() {
            let t = valid_start + slot;
            add_emb(ids[t] as usize, ghist, scale);
        }
    }

    let loss = loss_sum * scale + lambda * reg_sum * scale;
    if !loss.is_finite() {
        return Err(Error::Data("non-finite loss in forward_backward".into()));
    }
    let diag = BatchDiagnostics {
        selected,
        mean_max_routing_weight: max_routing_sum * scale,
        mean_loss_term: loss_sum * scale,
        mean_reg_term: reg_sum * scale,
    };
    Ok((loss, GradientSet { item_emb, pos_emb, attn_w1, attn_w2 }, diag))
}

/// Forward-only batch loss, used by finite-difference checks.
pub fn batch_loss(params: &ModelParams, batch: &TrainingBatch, beta: f64, lambda: f64) -> Result<f64> {
    let b = batch.batch_size();
    let mut total = 0.0;
    for row in 0..b {
        let s = row_forward(params, batch, row)?;
        let pos = s.v.dot(&params.item_emb.row(s.target));
        let negs: Vec<f64> = batch
            .negatives
            .iter()
            .map(|&id| s.v.dot(&params.item_emb.row(id as usize)))
            .collect();
        let loss = ihn_loss(&LogitBundle { pos, negs, beta });
        total += loss + lambda * routing_regularizer(&s.routing);
    }
    Ok(total / b as f64)
}

/// Adam accumulators. Embedding moments follow lazy semantics: rows update
/// only when they carry gradient.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_emb: Array2<f64>,
    v_emb: Array2<f64>,
    m_pos: Array2<f64>,
    v_pos: Array2<f64>,
    m_w1: Array2<f64>,
    v_w1: Array2<f64>,
    m_w2: Array2<f64>,
    v_w2: Array2<f64>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_emb: Array2::zeros(params.item_emb.dim()),
            v_emb: Array2::zeros(params.item_emb.dim()),
            m_pos: Array2::zeros(params.pos_emb.dim()),
            v_pos: Array2::zeros(params.pos_emb.dim()),
            m_w1: Array2::zeros(params.attn_w1.dim()),
            v_w1: Array2::zeros(params.attn_w1.dim()),
            m_w2: Array2::zeros(params.attn_w2.dim()),
            v_w2: Array2::zeros(params.attn_w2.dim()),
        }
    }
}

/// One Adam step with bias correction. Dense blocks update fully; embedding
/// rows update only where gradient is present.
pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);

    let dense = |p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>| {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        });
    };
    dense(&mut params.pos_emb, &grads.pos_emb, &mut state.m_pos, &mut state.v_pos);
    dense(&mut params.attn_w1, &grads.attn_w1, &mut state.m_w1, &mut state.v_w1);
    dense(&mut params.attn_w2, &grads.attn_w2, &mut state.m_w2, &mut state.v_w2);

    for (&id, g) in &grads.item_emb {
        debug_assert_ne!(id, 0);
        for (j, &gj) in g.iter().enumerate() {
            let m = &mut state.m_emb[[id, j]];
            *m = b1 * *m + (1.0 - b1) * gj;
            let v = &mut state.v_emb[[id, j]];
            *v = b2 * *v + (1.0 - b2) * gj * gj;
            params.item_emb[[id, j]] -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

/// One row of the metric history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub loss: f64,
    pub recall50: f64,
    pub ndcg50: f64,
    pub hr50: f64,
    pub mean_max_routing_weight: f64,
}

impl HistoryRow {
    pub fn csv_header() -> &'static str {
        "iter,loss,recall50,ndcg50,hr50,mean_max_routing_weight"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.loss, self.recall50, self.ndcg50, self.hr50,
            self.mean_max_routing_weight
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub best_iter: u64,
    pub best_recall50: f64,
    pub history: Vec<HistoryRow>,
}

/// Runs iteration-budget training: draw batch, forward/backward, Adam step,
/// with validation Recall@50 every `eval_every` iterations. Keeps the
/// best-validation checkpoint.
pub fn train_loop(
    corpus: &InteractionCorpus,
    split: &UserSplit,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let mut params = ModelParams::init(config.dims, corpus.embedding_rows(), config.seed);
    let mut adam = AdamState::new(&params, config.lr);
    let mut rng = crate::seeded_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut best_params = params.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut history = Vec::new();
    let mut window_loss = 0.0;
    let mut window_routing = 0.0;
    let mut window_count = 0u64;

    for iter in 1..=config.max_iters {
        let mut batch = draw_training_batch(
            corpus,
            &split.train,
            config.batch_size,
            config.dims.n,
            &mut rng,
        )?;
        batch.negatives = sample_negatives(corpus, config.negative_count(), &mut rng)?;
        let (loss, grads, diag) =
            forward_backward(&params, &batch, config.beta, config.lambda)
                .map_err(|_| Error::NonFinite { iter })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { iter });
        }
        adam_step(&mut params, &grads, &mut adam);
        window_loss += loss;
        window_routing += diag.mean_max_routing_weight;
        window_count += 1;

        if iter % config.eval_every == 0 || iter == config.max_iters {
            let (recall50, ndcg50, hr50) = if split.valid.is_empty() {
                eprintln!("warning: empty validation set, skipping validation");
                (0.0, 0.0, 0.0)
            } else {
                let m = evaluate_users(&params, corpus, &split.valid, &[50])?;
                let at = &m.per_n[0];
                (at.recall, at.ndcg, at.hit_rate)
            };
            history.push(HistoryRow {
                iter,
                loss: window_loss / window_count.max(1) as f64,
                recall50,
                ndcg50,
                hr50,
                mean_max_routing_weight: window_routing / window_count.max(1) as f64,
            });
            window_loss = 0.0;
            window_routing = 0.0;
            window_count = 0;
            if recall50 > best_recall {
                best_recall = recall50;
                best_iter = iter;
                best_params = params.clone();
            }
        }
    }
    if config.max_iters == 0 {
        best_params = params.clone();
    }
    Ok(TrainResult {
        best_params,
        final_params: params,
        best_iter,
        best_recall50: best_recall.max(0.0),
        history,
    })
}
