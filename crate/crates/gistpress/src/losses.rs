//! Sequence-level distributions and the training losses over them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-position log-probabilities over the vocabulary, with a mask selecting
/// which positions count toward losses (true = counted).
#[derive(Debug, Clone)]
pub struct Distribution<S: Scalar> {
    pub logprobs: Tensor<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> Distribution<S> {
    pub fn new(logprobs: Tensor<S>, mask: Vec<bool>) -> Distribution<S> {
        assert_eq!(logprobs.rows(), mask.len(), "mask length != seq_len");
        Distribution { logprobs, mask }
    }

    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.logprobs.cols()
    }

    /// Detached copy (no gradient history).
    pub fn detach(&self) -> Distribution<S> {
        Distribution {
            logprobs: self.logprobs.detach(),
            mask: self.mask.clone(),
        }
    }
}

/// Which argument order the divergence is evaluated in.
///
/// `AsPaper` puts the compressed (student) distribution first:
/// KL(P || Q) = sum_v P_v * (log P_v - log Q_v). `Reversed` swaps the roles.
/// Gradients flow into `p` in both modes; `q` is treated as a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    AsPaper,
    Reversed,
}

fn check_finite<S: Scalar>(name: &str, values: &[S]) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite logprob in {name}")));
        }
    }
    Ok(())
}

/// Mean over unmasked positions of the per-position KL divergence between
/// two log-space distributions. Gradient flows into `p` only.
pub fn kl_divergence<S: Scalar>(
    p: &Distribution<S>,
    q: &Distribution<S>,
    direction: KlDirection,
) -> Result<Tensor<S>> {
    if p.logprobs.shape() != q.logprobs.shape() {
        return Err(Error::Contract(format!(
            "kl_divergence: shape mismatch {:?} vs {:?}",
            p.logprobs.shape(),
            q.logprobs.shape()
        )));
    }
    if p.mask != q.mask {
        return Err(Error::Contract("kl_divergence: mask mismatch".into()));
    }
    check_finite("p", p.logprobs.data())?;
    check_finite("q", q.logprobs.data())?;
    let n_active = p.mask.iter().filter(|&&m| m).count();
    if n_active == 0 {
        return Err(Error::Contract("kl_divergence: empty mask".into()));
    }

    let rows = p.seq_len();
    let cols = p.vocab_size();
    let q_data: Vec<S> = q.logprobs.data().to_vec();
    let mask = p.mask.clone();
    let inv_n = S::one() / S::from_usize(n_active);

    let p_data = p.logprobs.data();
    let mut total = S::zero();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let base = r * cols;
        for v in 0..cols {
            match direction {
                KlDirection::AsPaper => {
                    // sum_v exp(p) * (p - q); exp(p)=0 contributes nothing.
                    let pv = p_data[base + v];
                    total = total + pv.exp() * (pv - q_data[base + v]);
                }
                KlDirection::Reversed => {
                    let qv = q_data[base + v];
                    total = total + qv.exp() * (qv - p_data[base + v]);
                }
            }
        }
    }
    total = total * inv_n;

    // Single fused node: d/dp of the masked mean.
    let node = crate::tensor::Tensor::from_loss_op(
        p.logprobs.clone(),
        total,
        Box::new(move |parents, d_out, sink| {
            let p_data = parents[0].data();
            let scale = d_out[0] * inv_n;
            let mut dp = vec![S::zero(); rows * cols];
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let base = r * cols;
                for v in 0..cols {
                    let g = match direction {
                        KlDirection::AsPaper => {
                            let pv = p_data[base + v];
                            pv.exp() * (S::one() + pv - q_data[base + v])
                        }
                        KlDirection::Reversed => -q_data[base + v].exp(),
                    };
                    dp[base + v] = g * scale;
                }
            }
            sink(0, dp);
        }),
    );
    Ok(node)
}

/// Mean negative log-likelihood of `targets` under `logits`, over unmasked
/// positions. Differentiable w.r.t. `logits`.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u32],
    mask: &[bool],
) -> Result<Tensor<S>> {
    let rows = logits.rows();
    let cols = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Contract(format!(
            "cross_entropy: {rows} logit rows vs {} targets / {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    for (i, &t) in targets.iter().enumerate() {
        if mask[i] && t as usize >= cols {
            return Err(Error::Contract(format!(
                "cross_entropy: target id {t} at position {i} out of vocab {cols}"
            )));
        }
    }
    let n_active = mask.iter().filter(|&&m| m).count();
    if n_active == 0 {
        return Err(Error::Contract("cross_entropy: empty mask".into()));
    }

    // Fused log-softmax + NLL; saves the softmax for the backward pass.
    let data = logits.data();
    let mut probs = vec![S::zero(); rows * cols];
    let mut total = S::zero();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &x) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = S::one() / sum;
        for o in &mut probs[r * cols..(r + 1) * cols] {
            *o = *o * inv;
        }
        if mask[r] {
            let t = targets[r] as usize;
            total = total - (row[t] - max - sum.ln());
        }
    }
    let inv_n = S::one() / S::from_usize(n_active);
    total = total * inv_n;

    let mask_owned = mask.to_vec();
    let targets_owned = targets.to_vec();
    let node = crate::tensor::Tensor::from_loss_op(
        logits.clone(),
        total,
        Box::new(move |_, d_out, sink| {
            let scale = d_out[0] * inv_n;
            let mut dl = vec![S::zero(); rows * cols];
            for r in 0..rows {
                if !mask_owned[r] {
                    continue;
                }
                let base = r * cols;
                for v in 0..cols {
                    dl[base + v] = probs[base + v] * scale;
                }
                dl[base + targets_owned[r] as usize] =
                    dl[base + targets_owned[r] as usize] - scale;
            }
            sink(0, dl);
        }),
    );
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(rows: Vec<Vec<f64>>, mask: Vec<bool>) -> Distribution<f64> {
        let cols = rows[0].len();
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Distribution::new(Tensor::constant(data, vec![n, cols]), mask)
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = dist(vec![vec![0.25f64.ln(); 4]], vec![true]);
        let q = p.clone();
        let kl = kl_divergence(&p, &q, KlDirection::AsPaper).unwrap();
        assert!(kl.item().abs() < 1e-9);
    }

    #[test]
    fn kl_hand_case_ln2() {
        // p = log[1, 0+], q = log[0.5, 0.5] -> ln 2
        let p = dist(vec![vec![0.0, -30.0]], vec![true]);
        let q = dist(vec![vec![0.5f64.ln(), 0.5f64.ln()]], vec![true]);
        let kl = kl_divergence(&p, &q, KlDirection::AsPaper).unwrap();
        assert!((kl.item() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_masked_row_contributes_nothing() {
        let p = dist(
            vec![vec![0.0, -30.0], vec![0.9f64.ln(), 0.1f64.ln()]],
            vec![true, false],
        );
        let q = dist(
            vec![vec![0.5f64.ln(), 0.5f64.ln()], vec![0.5f64.ln(), 0.5f64.ln()]],
            vec![true, false],
        );
        let kl = kl_divergence(&p, &q, KlDirection::AsPaper).unwrap();
        assert!((kl.item() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_mask_mismatch_and_nonfinite() {
        let p = dist(vec![vec![0.0, -30.0]], vec![true]);
        let q = dist(vec![vec![0.5f64.ln(), 0.5f64.ln()]], vec![false]);
        assert!(matches!(
            kl_divergence(&p, &q, KlDirection::AsPaper),
            Err(Error::Contract(_))
        ));
        let bad = dist(vec![vec![f64::NEG_INFINITY, 0.0]], vec![true]);
        let q2 = dist(vec![vec![0.5f64.ln(), 0.5f64.ln()]], vec![true]);
        assert!(matches!(
            kl_divergence(&bad, &q2, KlDirection::AsPaper),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn kl_gradient_flows_into_p_only() {
        let p_leaf = Tensor::<f64>::param(vec![-0.5, -1.2], vec![1, 2]);
        let q_leaf = Tensor::<f64>::param(vec![-0.7, -0.9], vec![1, 2]);
        let p = Distribution::new(p_leaf.clone().log_softmax(), vec![true]);
        let q = Distribution::new(q_leaf.clone().log_softmax().detach(), vec![true]);
        let kl = kl_divergence(&p, &q, KlDirection::AsPaper).unwrap();
        kl.backward().unwrap();
        assert!(p_leaf.grad().is_some());
        assert!(q_leaf.grad().is_none());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let logits = Tensor::<f64>::constant(vec![0.0; v], vec![1, v]);
        let ce = cross_entropy(&logits, &[3], &[true]).unwrap();
        assert!((ce.item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        // logit mass concentrated on the target -> logprob ~ 0 -> loss ~ 0
        let logits = Tensor::<f64>::constant(vec![50.0, 0.0, 0.0], vec![1, 3]);
        let ce = cross_entropy(&logits, &[0], &[true]).unwrap();
        assert!(ce.item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let logits = Tensor::<f64>::constant(vec![0.0; 6], vec![2, 3]);
        let err = cross_entropy(&logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("empty mask"));
    }

    #[test]
    fn cross_entropy_out_of_range_target_errors() {
        let logits = Tensor::<f64>::constant(vec![0.0; 3], vec![1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[9], &[true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        // d loss / d logits == softmax(logits) - onehot(target)
        let logits = Tensor::<f64>::param(vec![0.2, -1.3, 0.7, 0.1], vec![1, 4]);
        let ce = cross_entropy(&logits, &[2], &[true]).unwrap();
        ce.backward().unwrap();
        let sm = logits.softmax();
        let grad = logits.grad().unwrap();
        for v in 0..4 {
            let expected = sm.data()[v] - if v == 2 { 1.0 } else { 0.0 };
            assert!((grad[v] - expected).abs() < 1e-12, "coord {v}");
        }
    }
}
