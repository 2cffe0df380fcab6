//! Contrastive loss with in-batch target negatives and optional query
//! negatives.
//!
//! For query `i` the logits are `sim(q_i, t_j) / tau` for every target `j`
//! and, when query negatives are on, `sim(q_i, t'_j) / tau` for every query
//! negative `j` (the query image encoded with empty text), own index
//! included. `L_i = logsumexp(logits_i) - sim(q_i, t_i) / tau` and the batch
//! loss is the mean over `i`. Inputs are unit-norm, so `sim` is a dot
//! product.

use crate::error::{Error, Result};
use crate::model::Tensor;
use crate::scalar::{dot, norm, Scalar};

/// Loss value with per-query diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<S> {
    pub loss: S,
    pub per_query: Vec<S>,
    /// Summands in each query's softmax denominator (`N` or `2N`).
    pub denominator_terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<S> {
    pub queries: Tensor<S>,
    pub targets: Tensor<S>,
    pub query_negatives: Option<Tensor<S>>,
    pub tau: S,
}

fn check_unit<S: Scalar>(name: &str, m: &Tensor<S>) -> Result<()> {
    let tol = S::from_f64_lossy(1e-4);
    for r in 0..m.rows {
        let n = norm(m.row(r));
        if !n.is_finite() || (n - S::one()).abs() > tol {
            return Err(Error::invalid(format!("{name} row {r} is not unit norm ({n})")));
        }
    }
    Ok(())
}

/// Loss and its gradient with respect to every input, `tau` included.
pub fn contrastive_loss_with_grad<S: Scalar>(
    queries: &Tensor<S>,
    targets: &Tensor<S>,
    query_negatives: Option<&Tensor<S>>,
    tau: S,
) -> Result<(LossTerms<S>, LossGrads<S>)> {
    let n = queries.rows;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if targets.shape() != queries.shape() || query_negatives.is_some_and(|m| m.shape() != queries.shape()) {
        return Err(Error::invalid("query/target/negative shapes differ"));
    }
    if query_negatives.is_none() && n < 2 {
        return Err(Error::invalid("a batch without query negatives needs at least 2 entries"));
    }
    if !(tau > S::zero()) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_unit("query", queries)?;
    check_unit("target", targets)?;
    if let Some(m) = query_negatives {
        check_unit("query negative", m)?;
    }

    let terms = if query_negatives.is_some() { 2 * n } else { n };
    let inv_n = S::one() / S::from_usize_lossy(n);
    let mut per_query = Vec::with_capacity(n);
    let mut dq = Tensor::zeros(n, queries.cols);
    let mut dt = Tensor::zeros(n, queries.cols);
    let mut dn = query_negatives.map(|m| Tensor::zeros(m.rows, m.cols));
    let mut dtau = S::zero();
    let mut sims = vec![S::zero(); terms];
    let mut probs = vec![S::zero(); terms];

    for i in 0..n {
        let q = queries.row(i);
        for j in 0..n {
            sims[j] = dot(q, targets.row(j));
        }
        if let Some(m) = query_negatives {
            for j in 0..n {
                sims[n + j] = dot(q, m.row(j));
            }
        }
        let max = sims.iter().fold(S::neg_infinity(), |a, &s| a.max(s / tau));
        let mut z = S::zero();
        for (p, &s) in probs.iter_mut().zip(&sims) {
            *p = (s / tau - max).exp();
            z += *p;
        }
        let lse = max + z.ln();
        let li = lse - sims[i] / tau;
        if !li.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss for query {i} paired with target {i}"
            )));
        }
        per_query.push(li);
        for p in probs.iter_mut() {
            *p /= z;
        }

        // dL_i/dlogit_k = p_k - [k == i]; logit = sim / tau
        for k in 0..terms {
            let g = (probs[k] - if k == i { S::one() } else { S::zero() }) * inv_n;
            if g == S::zero() {
                continue;
            }
            dtau -= g * sims[k] / (tau * tau);
            let gs = g / tau;
            let (other, dother) = if k < n {
                (targets.row(k), dt.row_mut(k))
            } else {
                let m = query_negatives.expect("negatives present");
                (m.row(k - n), dn.as_mut().expect("negatives present").row_mut(k - n))
            };
            for (d, &x) in dother.iter_mut().zip(q) {
                *d += gs * x;
            }
            for (d, &x) in dq.row_mut(i).iter_mut().zip(other) {
                *d += gs * x;
            }
        }
    }

    let loss = per_query.iter().copied().sum::<S>() * inv_n;
    Ok((
        LossTerms {
            loss,
            per_query,
            denominator_terms: terms,
        },
        LossGrads {
            queries: dq,
            targets: dt,
            query_negatives: dn,
            tau: dtau,
        },
    ))
}

pub fn contrastive_loss<S: Scalar>(
    queries: &Tensor<S>,
    targets: &Tensor<S>,
    query_negatives: Option<&Tensor<S>>,
    tau: S,
) -> Result<LossTerms<S>> {
    contrastive_loss_with_grad(queries, targets, query_negatives, tau).map(|(l, _)| l)
}
