//! Exact top-N retrieval, ranking metrics under the 80/20 holdout protocol,
//! and routing-collapse diagnostics.

use std::collections::HashSet;

use ndarray::Array2;

use crate::corpus::{eval_split, InteractionCorpus};
use crate::error::{Error, Result};
use crate::model::{
    embed_history, extract_interests, route, ModelParams, RoutingMatrix,
};
use crate::objective::column_variances;

/// Ranking metrics at one cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAtN {
    pub n: usize,
    pub recall: f64,
    pub hit_rate: f64,
    pub ndcg: f64,
}

/// Mean metrics over evaluated users.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub per_n: Vec<MetricsAtN>,
    pub users: usize,
}

impl EvalMetrics {
    pub fn csv_header() -> &'static str {
        "metric,N,value,users"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in &self.per_n {
            out.push_str(&format!("recall,{},{},{}\n", m.n, m.recall, self.users));
            out.push_str(&format!("hit_rate,{},{},{}\n", m.n, m.hit_rate, self.users));
            out.push_str(&format!("ndcg,{},{},{}\n", m.n, m.ndcg, self.users));
        }
        out
    }
}

/// Exact MIPS over all real items: score is `max_k v_k . e_i`, top `n` by
/// score with ties broken by lower item id. The padding item is excluded.
pub fn retrieve_top_n(v: &Array2<f64>, embedding_table: &Array2<f64>, n: usize) -> Vec<(u32, f64)> {
    let items = embedding_table.nrows() - 1;
    let n = n.min(items);
    // scores = E V, then max over interests per item
    let scores = embedding_table.dot(v);
    let mut ranked: Vec<(u32, f64)> = (1..=items)
        .map(|id| {
            let s = scores.row(id).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (id as u32, s)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

/// Recall, hit and NDCG at `n` for one ranked list against a holdout set.
/// `DCG = sum over hit ranks r of 1/log2(r+1)`; `IDCG` uses the first
/// `min(n, |holdout|)` ranks.
pub fn compute_rank_metrics(ranked: &[u32], holdout: &HashSet<u32>, n: usize) -> MetricsAtN {
    let top = &ranked[..n.min(ranked.len())];
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (idx, id) in top.iter().enumerate() {
        if holdout.contains(id) {
            hits += 1;
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal = n.min(holdout.len());
    let idcg: f64 = (0..ideal).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    MetricsAtN {
        n,
        recall: hits as f64 / holdout.len() as f64,
        hit_rate: if hits > 0 { 1.0 } else { 0.0 },
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
    }
}

fn user_interests(
    params: &ModelParams,
    corpus: &InteractionCorpus,
    user: usize,
) -> Result<Option<(Array2<f64>, RoutingMatrix, HashSet<u32>)>> {
    let seq = &corpus.sequences[user];
    let Some((observed, holdout)) = eval_split(seq) else {
        return Ok(None);
    };
    let n = params.dims.n;
    let window = if observed.len() > n { &observed[observed.len() - n..] } else { observed };
    let mut ids = vec![0u32; n];
    ids[n - window.len()..].copy_from_slice(window);
    let (h, mask) = embed_history(params, &ids, window.len())?;
    let routing = route(params, &h, &mask)?;
    let v = extract_interests(&h, &routing);
    Ok(Some((v, routing, holdout.iter().copied().collect())))
}

/// Per-user 80/20 evaluation: infer interests from the observed prefix,
/// retrieve exactly, score against the holdout. Users with sequences
/// shorter than 2 are skipped. Holdout items are not removed from the
/// candidate pool.
pub fn evaluate_users(
    params: &ModelParams,
    corpus: &InteractionCorpus,
    user_set: &[usize],
    n_list: &[usize],
) -> Result<EvalMetrics> {
    evaluate_users_impl(params, corpus, user_set, n_list, true)
}

/// Sequential lane, callable regardless of features for benchmarking.
pub fn evaluate_users_sequential(
    params: &ModelParams,
    corpus: &InteractionCorpus,
    user_set: &[usize],
    n_list: &[usize],
) -> Result<EvalMetrics> {
    evaluate_users_impl(params, corpus, user_set, n_list, false)
}

fn evaluate_users_impl(
    params: &ModelParams,
    corpus: &InteractionCorpus,
    user_set: &[usize],
    n_list: &[usize],
    parallel: bool,
) -> Result<EvalMetrics> {
    if user_set.is_empty() {
        return Err(Error::Data("evaluate_users: empty user set".into()));
    }
    let max_n = n_list.iter().copied().max().unwrap_or(50);

    let per_user = map_users(user_set, parallel, |&user| -> Result<Option<Vec<MetricsAtN>>> {
        let Some((v, _, holdout)) = user_interests(params, corpus, user)? else {
            return Ok(None);
        };
        let ranked: Vec<u32> =
            retrieve_top_n(&v, &params.item_emb, max_n).into_iter().map(|(id, _)| id).collect();
        Ok(Some(n_list.iter().map(|&n| compute_rank_metrics(&ranked, &holdout, n)).collect()))
    });

    let mut sums = vec![MetricsAtN { n: 0, recall: 0.0, hit_rate: 0.0, ndcg: 0.0 }; n_list.len()];
    let mut users = 0usize;
    for result in per_user {
        let Some(metrics) = result? else { continue };
        users += 1;
        for (s, m) in sums.iter_mut().zip(&metrics) {
            s.n = m.n;
            s.recall += m.recall;
            s.hit_rate += m.hit_rate;
            s.ndcg += m.ndcg;
        }
    }
    if users == 0 {
        return Err(Error::Data("evaluate_users: all users skipped".into()));
    }
    for s in &mut sums {
        s.recall /= users as f64;
        s.hit_rate /= users as f64;
        s.ndcg /= users as f64;
    }
    Ok(EvalMetrics { per_n: sums, users })
}

fn map_users<T: Send, F: Fn(&usize) -> T + Sync + Send>(users: &[usize], parallel: bool, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return users.par_iter().map(f).collect();
    }
    let _ = parallel;
    users.iter().map(f).collect()
}

/// Routing-collapse diagnostics over a user sample, per interest, averaged
/// over users: max routing weight, routing entropy, and the covariance
/// diagonal.
#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub max_weight: Vec<f64>,
    pub entropy: Vec<f64>,
    pub variance: Vec<f64>,
    pub users: usize,
    /// Per-user routing matrices when dumps are requested:
    /// `(user, weights, mask)`.
    pub routing_dumps: Vec<(usize, Array2<f64>, Vec<bool>)>,
}

impl CollapseReport {
    pub fn csv_header() -> &'static str {
        "interest,mean_max_weight,mean_entropy,mean_variance,users"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.max_weight.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k, self.max_weight[k], self.entropy[k], self.variance[k], self.users
            ));
        }
        out
    }

    pub fn mean_max_weight(&self) -> f64 {
        self.max_weight.iter().sum::<f64>() / self.max_weight.len() as f64
    }

    pub fn mean_variance(&self) -> f64 {
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }
}

/// Routing stats per interest for one routing matrix: (max weight, entropy,
/// covariance diagonal).
pub fn routing_stats(routing: &RoutingMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, k) = routing.weights.dim();
    let mut max_w = vec![0.0; k];
    let mut ent = vec![0.0; k];
    for ki in 0..k {
        let mut m = 0.0;
        let mut e = 0.0;
        for t in 0..n {
            if routing.mask[t] {
                let w = routing.weights[[t, ki]];
                m = f64::max(m, w);
                if w > 0.0 {
                    e -= w * w.ln();
                }
            }
        }
        max_w[ki] = m;
        ent[ki] = e;
    }
    (max_w, ent, column_variances(routing))
}

pub fn collapse_diagnostics(
    params: &ModelParams,
    corpus: &InteractionCorpus,
    user_sample: &[usize],
    keep_dumps: bool,
) -> Result<CollapseReport> {
    if user_sample.is_empty() {
        return Err(Error::Data("collapse_diagnostics: empty user sample".into()));
    }
    let k = params.dims.k;
    let mut report = CollapseReport {
        max_weight: vec![0.0; k],
        entropy: vec![0.0; k],
        variance: vec![0.0; k],
        users: 0,
        routing_dumps: Vec::new(),
    };
    for &user in user_sample {
        let Some((_, routing, _)) = user_interests(params, corpus, user)? else { continue };
        let (max_w, ent, var) = routing_stats(&routing);
        for ki in 0..k {
            report.max_weight[ki] += max_w[ki];
            report.entropy[ki] += ent[ki];
            report.variance[ki] += var[ki];
        }
        if keep_dumps {
            report.routing_dumps.push((user, routing.weights.clone(), routing.mask.clone()));
        }
        report.users += 1;
    }
    if report.users == 0 {
        return Err(Error::Data("collapse_diagnostics: all users skipped".into()));
    }
    for ki in 0..k {
        report.max_weight[ki] /= report.users as f64;
        report.entropy[ki] /= report.users as f64;
        report.variance[ki] /= report.users as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{score_item, Dims};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn single_interest_ranking_is_inner_product_sort() {
        let v = array![[1.0], [0.0]];
        let e = array![[0.0, 0.0], [3.0, 0.0], [1.0, 5.0], [2.0, -1.0]];
        let ranked = retrieve_top_n(&v, &e, 3);
        let ids: Vec<u32> = ranked.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![1, 3, 2]);
        assert_abs_diff_eq!(ranked[0].1, 3.0);
    }

    #[test]
    fn merged_scores_match_score_item() {
        let mut rng = crate::seeded_rng(17);
        let v = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let mut e = Array2::from_shape_fn((51, 8), |_| rng.random_range(-1.0..1.0));
        e.row_mut(0).fill(0.0);
        let ranked = retrieve_top_n(&v, &e, 10);
        for (id, score) in &ranked {
            assert_abs_diff_eq!(*score, score_item(&v, e.row(*id as usize)), epsilon = 1e-12);
        }
    }

    #[test]
    fn retrieval_matches_naive_oracle() {
        let mut rng = crate::seeded_rng(18);
        for _ in 0..20 {
            let v = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
            let mut e = Array2::from_shape_fn((51, 8), |_| rng.random_range(-1.0..1.0));
            e.row_mut(0).fill(0.0);
            let ranked = retrieve_top_n(&v, &e, 10);

            // naive double loop
            let mut oracle: Vec<(u32, f64)> = (1..=50u32)
                .map(|id| {
                    let mut best = f64::NEG_INFINITY;
                    for k in 0..2 {
                        let mut dot = 0.0;
                        for j in 0..8 {
                            dot += v[[j, k]] * e[[id as usize, j]];
                        }
                        best = best.max(dot);
                    }
                    (id, best)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(10);
            let ids: Vec<u32> = ranked.iter().map(|(id, _)| *id).collect();
            let oracle_ids: Vec<u32> = oracle.iter().map(|(id, _)| *id).collect();
            assert_eq!(ids, oracle_ids);
        }
    }

    #[test]
    fn retrieval_truncates_when_n_exceeds_items() {
        let v = array![[1.0], [0.0]];
        let e = array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(retrieve_top_n(&v, &e, 10).len(), 2);
    }

    #[test]
    fn rank_metrics_hand_values() {
        let holdout: HashSet<u32> = [1, 3].into_iter().collect();
        let m = compute_rank_metrics(&[1, 2, 3], &holdout, 3);
        assert_abs_diff_eq!(m.recall, 1.0);
        assert_abs_diff_eq!(m.hit_rate, 1.0);
        let dcg = 1.0 + 1.0 / 4.0_f64.log2();
        let idcg = 1.0 + 1.0 / 3.0_f64.log2();
        assert_abs_diff_eq!(m.ndcg, dcg / idcg, epsilon = 1e-12);
        assert_abs_diff_eq!(m.ndcg, 0.9197, epsilon = 1e-4);
    }

    #[test]
    fn rank_metrics_no_overlap_and_perfect() {
        let holdout: HashSet<u32> = [7, 8].into_iter().collect();
        let none = compute_rank_metrics(&[1, 2, 3], &holdout, 3);
        assert_eq!((none.recall, none.hit_rate, none.ndcg), (0.0, 0.0, 0.0));

        let perfect = compute_rank_metrics(&[7, 8, 3], &holdout, 3);
        assert_abs_diff_eq!(perfect.ndcg, 1.0, epsilon = 1e-12);
        assert!(perfect.recall <= perfect.hit_rate);
    }

    fn small_setup() -> (ModelParams, InteractionCorpus) {
        let corpus = crate::corpus::generate_synthetic(&crate::corpus::SyntheticSpec {
            n_topics: 3,
            items_per_topic: 12,
            n_users: 40,
            topics_per_user: (1, 2),
            seq_length: (5, 12),
            popularity_skew: 0.8,
            seed: 23,
        })
        .unwrap();
        let dims = Dims { d: 8, d_a: 16, k: 2, n: 6 };
        let params = ModelParams::init(dims, corpus.embedding_rows(), 24);
        (params, corpus)
    }

    #[test]
    fn duplicated_users_keep_means() {
        let (params, corpus) = small_setup();
        let users: Vec<usize> = (0..10).collect();
        let doubled: Vec<usize> = users.iter().chain(&users).copied().collect();
        let a = evaluate_users(&params, &corpus, &users, &[20, 50]).unwrap();
        let b = evaluate_users(&params, &corpus, &doubled, &[20, 50]).unwrap();
        for (x, y) in a.per_n.iter().zip(&b.per_n) {
            assert_abs_diff_eq!(x.recall, y.recall, epsilon = 1e-12);
            assert_abs_diff_eq!(x.ndcg, y.ndcg, epsilon = 1e-12);
        }
        assert_eq!(b.users, 2 * a.users);
    }

    #[test]
    fn metric_bounds_hold() {
        let (params, corpus) = small_setup();
        let users: Vec<usize> = (0..corpus.user_count()).collect();
        let m = evaluate_users(&params, &corpus, &users, &[20, 50]).unwrap();
        for at in &m.per_n {
            assert!(at.recall <= at.hit_rate + 1e-12);
            assert!(at.hit_rate <= 1.0);
            assert!((0.0..=1.0).contains(&at.ndcg));
        }
    }

    #[test]
    fn collapse_stats_one_hot_and_uniform() {
        let onehot = RoutingMatrix {
            weights: array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
            mask: vec![true, true, true],
        };
        let (max_w, ent, _) = routing_stats(&onehot);
        assert_abs_diff_eq!(max_w[0], 1.0);
        assert_abs_diff_eq!(ent[0], 0.0);

        let nv = 4;
        let uniform = RoutingMatrix {
            weights: Array2::from_elem((nv, 1), 1.0 / nv as f64),
            mask: vec![true; nv],
        };
        let (max_w, ent, _) = routing_stats(&uniform);
        assert_abs_diff_eq!(max_w[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(ent[0], (nv as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn collapse_stats_two_of_eight() {
        let mut weights = Array2::zeros((8, 1));
        weights[[0, 0]] = 0.5;
        weights[[1, 0]] = 0.5;
        let r = RoutingMatrix { weights, mask: vec![true; 8] };
        let (max_w, ent, _) = routing_stats(&r);
        assert_abs_diff_eq!(max_w[0], 0.5);
        assert_abs_diff_eq!(ent[0], 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn collapse_report_bounds() {
        let (params, corpus) = small_setup();
        let users: Vec<usize> = (0..20).collect();
        let report = collapse_diagnostics(&params, &corpus, &users, false).unwrap();
        for k in 0..2 {
            assert!(report.max_weight[k] > 0.0 && report.max_weight[k] <= 1.0);
            assert!(report.entropy[k] >= 0.0);
            assert!(report.entropy[k] <= (params.dims.n as f64).ln() + 1e-12);
        }
    }
}
