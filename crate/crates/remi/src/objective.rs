//! Loss terms: uniform sampled softmax, the importance-sampled hard-negative
//! aggregate, the routing-variance regularizer, and their combination.
//! Everything runs in log space so logits in [-50, 50] with beta up to 10
//! stay finite.

use ndarray::Array2;

use crate::model::RoutingMatrix;

/// Logits for one training pair: the positive inner product, the `L` shared
/// negative inner products, and the hardness concentration `beta`.
#[derive(Debug, Clone)]
pub struct LogitBundle {
    pub pos: f64,
    pub negs: Vec<f64>,
    pub beta: f64,
}

/// Hard-negative aggregate in log space plus the normalized per-negative
/// importance weights `w_i = exp(beta*neg_i) / sum_j exp(beta*neg_j)`.
#[derive(Debug, Clone)]
pub struct NegAggregate {
    /// `log(L * E_p[exp((beta+1) neg)] / Z_beta)`.
    pub log_neg: f64,
    pub weights: Vec<f64>,
}

impl NegAggregate {
    /// Linear-space aggregate; may overflow to infinity for extreme logits,
    /// the loss path never uses it.
    pub fn linear(&self) -> f64 {
        self.log_neg.exp()
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Uniform sampled softmax without the correction term:
/// `-log(exp(pos) / (exp(pos) + sum_i exp(neg_i)))`.
pub fn sampled_softmax_loss(bundle: &LogitBundle) -> f64 {
    let log_neg = log_sum_exp(bundle.negs.iter().copied());
    softplus(log_neg - bundle.pos)
}

/// Gradient of `sampled_softmax_loss` w.r.t. `(pos, negs)`.
pub fn sampled_softmax_grad(bundle: &LogitBundle) -> (f64, Vec<f64>) {
    let log_neg = log_sum_exp(bundle.negs.iter().copied());
    let sigma = sigmoid(log_neg - bundle.pos);
    let dnegs = softmax_of(&bundle.negs, 1.0).into_iter().map(|p| sigma * p).collect();
    (-sigma, dnegs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_of(values: &[f64], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = values.iter().map(|&v| scale * v).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Importance-sampled negative aggregate. With `x_i = exp(neg_i)` this is
/// `Neg = L * sum_i x_i^(beta+1) / sum_i x_i^beta`, evaluated as
/// `log Neg = lse((beta+1) negs) - lse(beta negs) + log L`.
pub fn ihn_negative_term(negs: &[f64], beta: f64) -> NegAggregate {
    let l = negs.len() as f64;
    let lse_b1 = log_sum_exp(negs.iter().map(|&v| (beta + 1.0) * v));
    let lse_b = log_sum_exp(negs.iter().map(|&v| beta * v));
    NegAggregate { log_neg: lse_b1 - lse_b + l.ln(), weights: softmax_of(negs, beta) }
}

/// `-log(exp(pos) / (exp(pos) + Neg))` with the IHN aggregate.
pub fn ihn_loss(bundle: &LogitBundle) -> f64 {
    let agg = ihn_negative_term(&bundle.negs, bundle.beta);
    softplus(agg.log_neg - bundle.pos)
}

/// IHN loss and its gradient w.r.t. `(pos, negs)`. The importance weights
/// are functions of the logits and receive gradient:
/// `d log Neg / d neg_i = (beta+1) a_i - beta b_i` with
/// `a = softmax((beta+1) negs)`, `b = softmax(beta negs)`.
pub fn ihn_loss_grad(bundle: &LogitBundle) -> (f64, f64, Vec<f64>) {
    let agg = ihn_negative_term(&bundle.negs, bundle.beta);
    let m = agg.log_neg - bundle.pos;
    let loss = softplus(m);
    let sigma = sigmoid(m);
    let a = softmax_of(&bundle.negs, bundle.beta + 1.0);
    let b = softmax_of(&bundle.negs, bundle.beta);
    let dnegs = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| sigma * ((bundle.beta + 1.0) * ai - bundle.beta * bi))
        .collect();
    (loss, -sigma, dnegs)
}

/// Variance regularizer over valid routing rows: with `A_v` the valid rows,
/// `C = (A_v - mean)^T (A_v - mean)` and `L_reg = sum_k C[k,k]^2`.
pub fn routing_regularizer(routing: &RoutingMatrix) -> f64 {
    column_variances(routing).iter().map(|c| c * c).sum()
}

/// Diagonal of the routing covariance `C`, one entry per interest.
pub fn column_variances(routing: &RoutingMatrix) -> Vec<f64> {
    let (n, k) = routing.weights.dim();
    let n_v = routing.valid_count();
    let mut out = vec![0.0; k];
    if n_v == 0 {
        return out;
    }
    for ki in 0..k {
        let mut mean = 0.0;
        for t in 0..n {
            if routing.mask[t] {
                mean += routing.weights[[t, ki]];
            }
        }
        mean /= n_v as f64;
        let mut c = 0.0;
        for t in 0..n {
            if routing.mask[t] {
                let dev = routing.weights[[t, ki]] - mean;
                c += dev * dev;
            }
        }
        out[ki] = c;
    }
    out
}

/// Gradient of `routing_regularizer` w.r.t. the routing weights. Because
/// deviations sum to zero per column, `dL/dA[t,k] = 4 * C[k,k] * dev[t,k]`
/// on valid rows.
pub fn routing_regularizer_grad(routing: &RoutingMatrix) -> Array2<f64> {
    let (n, k) = routing.weights.dim();
    let n_v = routing.valid_count();
    let diag = column_variances(routing);
    let mut grad = Array2::zeros((n, k));
    for ki in 0..k {
        let mut mean = 0.0;
        for t in 0..n {
            if routing.mask[t] {
                mean += routing.weights[[t, ki]];
            }
        }
        mean /= n_v as f64;
        for t in 0..n {
            if routing.mask[t] {
                grad[[t, ki]] = 4.0 * diag[ki] * (routing.weights[[t, ki]] - mean);
            }
        }
    }
    grad
}

/// `loss + lambda * L_reg`; callers average both terms over the batch.
pub fn total_loss(base_loss: f64, l_reg: f64, lambda: f64) -> f64 {
    base_loss + lambda * l_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn ssm_symmetric_logits() {
        let b = LogitBundle { pos: 0.0, negs: vec![0.0; 10], beta: 0.0 };
        assert_abs_diff_eq!(sampled_softmax_loss(&b), 11.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ssm_hand_value() {
        // pos=ln2, negs=[0, ln3] -> -ln(2/6) = ln3
        let b = LogitBundle { pos: 2.0_f64.ln(), negs: vec![0.0, 3.0_f64.ln()], beta: 0.0 };
        assert_abs_diff_eq!(sampled_softmax_loss(&b), 3.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ssm_dominant_positive_limit() {
        let b = LogitBundle { pos: 200.0, negs: vec![0.0, 1.0], beta: 0.0 };
        assert!(sampled_softmax_loss(&b) < 1e-80);
    }

    #[test]
    fn ihn_beta_zero_is_uniform_sum() {
        let negs = vec![0.2, -1.0, 3.0];
        let agg = ihn_negative_term(&negs, 0.0);
        let direct: f64 = negs.iter().map(|&v| v.exp()).sum();
        assert_abs_diff_eq!(agg.linear(), direct, epsilon = 1e-10);
        for w in agg.weights {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ihn_negative_term_hand_value() {
        // negs=[0, ln3], beta=1: x=[1,3], imp=[1,3], Neg=(1+9)/2=5
        let agg = ihn_negative_term(&[0.0, 3.0_f64.ln()], 1.0);
        assert_abs_diff_eq!(agg.linear(), 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(agg.weights[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.weights[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn ihn_large_beta_focuses_on_hardest() {
        let negs = vec![0.1, 1.5, -0.7];
        let agg = ihn_negative_term(&negs, 200.0);
        // Neg -> L * max(x)
        assert_abs_diff_eq!(agg.log_neg, 1.5 + 3.0_f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn ihn_loss_hand_value() {
        // Neg=5 from above, pos=ln2 -> -ln(2/7)
        let b = LogitBundle { pos: 2.0_f64.ln(), negs: vec![0.0, 3.0_f64.ln()], beta: 1.0 };
        assert_abs_diff_eq!(ihn_loss(&b), (7.0_f64 / 2.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn ihn_symmetric_logits_any_beta() {
        for beta in [0.0, 0.5, 4.0, 10.0] {
            let b = LogitBundle { pos: 0.0, negs: vec![0.0; 7], beta };
            assert_abs_diff_eq!(ihn_loss(&b), 8.0_f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ihn_grad_matches_finite_differences() {
        let bundle = LogitBundle { pos: 0.4, negs: vec![0.1, -0.3, 1.2, 0.0], beta: 1.7 };
        let (_, dpos, dnegs) = ihn_loss_grad(&bundle);
        let h = 1e-6;
        let mut b = bundle.clone();
        b.pos += h;
        let up = ihn_loss(&b);
        b.pos -= 2.0 * h;
        let dn = ihn_loss(&b);
        assert_abs_diff_eq!(dpos, (up - dn) / (2.0 * h), epsilon = 1e-8);
        for i in 0..bundle.negs.len() {
            let mut b = bundle.clone();
            b.negs[i] += h;
            let up = ihn_loss(&b);
            b.negs[i] -= 2.0 * h;
            let dn = ihn_loss(&b);
            assert_abs_diff_eq!(dnegs[i], (up - dn) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn regularizer_worked_examples() {
        // constant columns -> 0
        let uniform = RoutingMatrix {
            weights: array![[0.5, 0.5], [0.5, 0.5]],
            mask: vec![true, true],
        };
        assert_abs_diff_eq!(routing_regularizer(&uniform), 0.0);

        // A = [[1,0],[0,1]] -> each diag 0.5 -> L_reg 0.5
        let ident = RoutingMatrix {
            weights: array![[1.0, 0.0], [0.0, 1.0]],
            mask: vec![true, true],
        };
        assert_abs_diff_eq!(routing_regularizer(&ident), 0.5, epsilon = 1e-12);

        // single interest, column [1,0,0] -> diag 2/3 -> 4/9
        let onehot = RoutingMatrix {
            weights: array![[1.0], [0.0], [0.0]],
            mask: vec![true, true, true],
        };
        assert_abs_diff_eq!(routing_regularizer(&onehot), 4.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn regularizer_ignores_padded_rows() {
        let r = RoutingMatrix {
            weights: array![[0.0, 0.0], [0.5, 0.5], [0.5, 0.5]],
            mask: vec![false, true, true],
        };
        assert_abs_diff_eq!(routing_regularizer(&r), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let weights = array![[0.6, 0.1], [0.3, 0.2], [0.1, 0.7], [0.0, 0.0]];
        let mask = vec![true, true, true, false];
        let r = RoutingMatrix { weights: weights.clone(), mask: mask.clone() };
        let grad = routing_regularizer_grad(&r);
        let h = 1e-6;
        for t in 0..3 {
            for k in 0..2 {
                let mut up = weights.clone();
                up[[t, k]] += h;
                let mut dn = weights.clone();
                dn[[t, k]] -= h;
                let fu = routing_regularizer(&RoutingMatrix { weights: up, mask: mask.clone() });
                let fd = routing_regularizer(&RoutingMatrix { weights: dn, mask: mask.clone() });
                assert_abs_diff_eq!(grad[[t, k]], (fu - fd) / (2.0 * h), epsilon = 1e-7);
            }
        }
        assert_eq!(grad[[3, 0]], 0.0);
    }

    #[test]
    fn total_loss_combination() {
        assert_abs_diff_eq!(total_loss(1.0, 0.01, 100.0), 2.0);
        assert_abs_diff_eq!(total_loss(1.5, 10.0, 0.0), 1.5);
    }

    proptest! {
        #[test]
        fn beta_zero_reduces_to_sampled_softmax(
            pos in -10.0..10.0f64,
            negs in proptest::collection::vec(-10.0..10.0f64, 1..40),
        ) {
            let b = LogitBundle { pos, negs, beta: 0.0 };
            let ssm = sampled_softmax_loss(&b);
            let ihn = ihn_loss(&b);
            prop_assert!((ssm - ihn).abs() <= 1e-12 * ssm.abs().max(1.0));
            let (dp0, dn0) = sampled_softmax_grad(&b);
            let (_, dp1, dn1) = ihn_loss_grad(&b);
            prop_assert!((dp0 - dp1).abs() <= 1e-12);
            for (a, c) in dn0.iter().zip(&dn1) {
                prop_assert!((a - c).abs() <= 1e-12);
            }
        }

        #[test]
        fn aggregate_monotone_in_beta(
            negs in proptest::collection::vec(-5.0..5.0f64, 2..30),
        ) {
            let grid = [0.0, 0.1, 1.0, 4.0, 10.0];
            let mut prev = f64::NEG_INFINITY;
            for &beta in &grid {
                let agg = ihn_negative_term(&negs, beta);
                prop_assert!(agg.log_neg >= prev - 1e-10);
                prev = agg.log_neg;
            }
        }

        #[test]
        fn log_space_path_stays_finite(
            pos in -50.0..50.0f64,
            negs in proptest::collection::vec(-50.0..50.0f64, 1..20),
            beta in 0.0..10.0f64,
        ) {
            let b = LogitBundle { pos, negs, beta };
            let loss = ihn_loss(&b);
            prop_assert!(loss.is_finite());
            let (_, dpos, dnegs) = ihn_loss_grad(&b);
            prop_assert!(dpos.is_finite());
            prop_assert!(dnegs.iter().all(|d| d.is_finite()));
        }
    }
}
