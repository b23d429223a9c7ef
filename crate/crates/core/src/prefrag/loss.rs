//! InfoNCE over cosine similarity of projected embeddings.
//!
//! For a batch of `B` groups `(q, a+, a-_1..a-_m)` and projection `W`:
//!
//! ```text
//! s_j  = cos(W q, W a_j)
//! L    = -(1/B) sum_i log( exp(s_i+/tau) / (exp(s_i+/tau) + sum_j exp(s_ij-/tau)) )
//! ```
//!
//! With `p = W q`, `c_j = W a_j`, `g_j = (softmax_j - [j = +]) / tau`:
//!
//! ```text
//! dL/dp   = sum_j g_j (c_j/|c_j| - s_j p/|p|) / |p|
//! dL/dc_j = g_j (p/|p| - s_j c_j/|c_j|) / |c_j|
//! dL/dW   = dL/dp q^T + sum_j dL/dc_j a_j^T
//! ```

use ndarray::{Array2, ArrayView1, Axis};

use super::adapter::ProjectionAdapter;
use super::PrefragError;

/// Raw (unprojected) embeddings of one query with its answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGroup {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl ContrastiveGroup {
    fn width(&self) -> usize {
        2 + self.negatives.len()
    }

    fn columns(&self) -> impl Iterator<Item = &Vec<f64>> {
        std::iter::once(&self.query)
            .chain(std::iter::once(&self.positive))
            .chain(self.negatives.iter())
    }
}

fn check_batch(batch: &[ContrastiveGroup], in_dim: usize) -> Result<(), PrefragError> {
    if batch.is_empty() {
        return Err(PrefragError::Domain("empty batch".into()));
    }
    for g in batch {
        if g.negatives.is_empty() {
            return Err(PrefragError::Domain("query without negatives".into()));
        }
        for v in g.columns() {
            if v.len() != in_dim {
                return Err(PrefragError::Dimension {
                    expected: in_dim,
                    actual: v.len(),
                });
            }
        }
    }
    Ok(())
}

/// Stack every vector of the batch as a column: `in_dim x N`.
fn stack(batch: &[ContrastiveGroup], in_dim: usize) -> Array2<f64> {
    let n: usize = batch.iter().map(ContrastiveGroup::width).sum();
    let mut x = Array2::zeros((in_dim, n));
    for (col, v) in batch.iter().flat_map(ContrastiveGroup::columns).enumerate() {
        x.column_mut(col).assign(&ArrayView1::from(v.as_slice()));
    }
    x
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Cosine scores `[s+, s-_1, ..., s-_m]` of every group under `w`.
pub fn group_scores(batch: &[ContrastiveGroup], w: &Array2<f64>) -> Result<Vec<Vec<f64>>, PrefragError> {
    check_batch(batch, w.ncols())?;
    let projected = w.dot(&stack(batch, w.ncols()));
    let norms: Vec<f64> = projected
        .axis_iter(Axis(1))
        .map(|c| c.dot(&c).sqrt())
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    let mut base = 0;
    for g in batch {
        let p = projected.column(base);
        let np = norms[base];
        if np == 0.0 {
            return Err(PrefragError::Domain("query projects to the zero vector".into()));
        }
        let mut scores = Vec::with_capacity(g.width() - 1);
        for j in 1..g.width() {
            let nc = norms[base + j];
            if nc == 0.0 {
                return Err(PrefragError::Domain("answer projects to the zero vector".into()));
            }
            scores.push(p.dot(&projected.column(base + j)) / (np * nc));
        }
        out.push(scores);
        base += g.width();
    }
    Ok(out)
}

/// Loss and (optionally) gradient with respect to `w` in f64.
pub fn loss_and_grad(
    batch: &[ContrastiveGroup],
    w: &Array2<f64>,
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>), PrefragError> {
    if !(tau > 0.0) {
        return Err(PrefragError::Domain(format!("temperature must be positive, got {tau}")));
    }
    check_batch(batch, w.ncols())?;
    let x = stack(batch, w.ncols());
    let projected = w.dot(&x);
    let norms: Vec<f64> = projected
        .axis_iter(Axis(1))
        .map(|c| c.dot(&c).sqrt())
        .collect();
    let mut d_projected = Array2::<f64>::zeros(projected.raw_dim());
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut base = 0;

    for g in batch {
        let width = g.width();
        if norms[base..base + width].iter().any(|&n| n == 0.0) {
            return Err(PrefragError::Domain("vector projects to the zero vector".into()));
        }
        let np = norms[base];
        let p_hat = projected.column(base).mapv(|v| v / np);
        let c_hats: Vec<_> = (1..width)
            .map(|j| projected.column(base + j).mapv(|v| v / norms[base + j]))
            .collect();
        let scores: Vec<f64> = c_hats.iter().map(|c| p_hat.dot(c)).collect();
        let logits: Vec<f64> = scores.iter().map(|s| s / tau).collect();
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];

        if with_grad {
            let mut dp = ndarray::Array1::<f64>::zeros(p_hat.len());
            for (j, (c_hat, &s)) in c_hats.iter().zip(&scores).enumerate() {
                let softmax = (logits[j] - lse).exp();
                let gj = (softmax - if j == 0 { 1.0 } else { 0.0 }) / tau / b;
                dp.scaled_add(gj / np, &(c_hat - &(&p_hat * s)));
                let nc = norms[base + 1 + j];
                let dc = (&p_hat - &(c_hat * s)) * (gj / nc);
                d_projected.column_mut(base + 1 + j).assign(&dc);
            }
            d_projected.column_mut(base).assign(&dp);
        }
        base += width;
    }

    let loss = total / b;
    let grad = with_grad.then(|| d_projected.dot(&x.t()));
    Ok((loss, grad))
}

pub fn infonce_loss(batch: &[ContrastiveGroup], adapter: &ProjectionAdapter, tau: f64) -> Result<f64, PrefragError> {
    loss_and_grad(batch, &adapter.weights_f64(), tau, false).map(|(l, _)| l)
}

/// Exact gradient of [`infonce_loss`] with respect to the adapter weights.
pub fn infonce_grad(
    batch: &[ContrastiveGroup],
    adapter: &ProjectionAdapter,
    tau: f64,
) -> Result<Array2<f64>, PrefragError> {
    loss_and_grad(batch, &adapter.weights_f64(), tau, true).map(|(_, g)| g.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn e(dim: usize, i: usize, s: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = s;
        v
    }

    #[test]
    fn equal_scores_give_ln_two() {
        let v = vec![0.3, -0.2, 0.9];
        let g = ContrastiveGroup {
            query: vec![1.0, 0.5, 0.0],
            positive: v.clone(),
            negatives: vec![v],
        };
        let l = infonce_loss(&[g], &ProjectionAdapter::identity(3), 1.0).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn opposite_answers() {
        let g = ContrastiveGroup {
            query: e(2, 0, 1.0),
            positive: e(2, 0, 1.0),
            negatives: vec![e(2, 0, -1.0)],
        };
        let l = infonce_loss(&[g], &ProjectionAdapter::identity(2), 1.0).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_answers_have_zero_gradient() {
        let a = vec![0.1, 0.7, -0.4, 0.2];
        let g = ContrastiveGroup {
            query: vec![0.5, -0.1, 0.3, 0.9],
            positive: a.clone(),
            negatives: vec![a.clone(), a.clone(), a],
        };
        let adapter = ProjectionAdapter::init(4, 4, 3, Default::default());
        let grad = infonce_grad(&[g], &adapter, 1.0).unwrap();
        assert!(grad.iter().all(|x| x.abs() < 1e-15), "{grad}");
    }

    #[test]
    fn domain_errors() {
        let adapter = ProjectionAdapter::identity(2);
        assert!(matches!(infonce_loss(&[], &adapter, 1.0), Err(PrefragError::Domain(_))));
        let no_neg = ContrastiveGroup {
            query: e(2, 0, 1.0),
            positive: e(2, 1, 1.0),
            negatives: vec![],
        };
        assert!(matches!(infonce_loss(&[no_neg], &adapter, 1.0), Err(PrefragError::Domain(_))));
        let zero = ContrastiveGroup {
            query: vec![0.0, 0.0],
            positive: e(2, 1, 1.0),
            negatives: vec![e(2, 0, 1.0)],
        };
        assert!(matches!(infonce_loss(&[zero.clone()], &adapter, 1.0), Err(PrefragError::Domain(_))));
        assert!(matches!(infonce_loss(&[zero], &adapter, 0.0), Err(PrefragError::Domain(_))));
    }

    #[test]
    fn shift_invariance_of_log_softmax() {
        // Adding a constant to every logit leaves the loss unchanged.
        let s = [0.3, -0.2, 0.7, 0.1];
        let base = log_sum_exp(&s) - s[0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 0.37).collect();
        assert!((log_sum_exp(&shifted) - shifted[0] - base).abs() < 1e-12);
    }
}
