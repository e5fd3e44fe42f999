//! Single self-attention layer and its forward pass.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Projection matrices of one self-attention layer. Each matrix maps row
/// features by right-multiplication with its transpose: `Y = X W^T`, with
/// `W: (d_out, d_in)`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub name: String,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    /// Query/key dimensionality; equals the row count of `w_q` and `w_k`.
    pub d_k: usize,
}

impl AttentionLayer {
    pub fn new(
        name: impl Into<String>,
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let d_in = w_q.dim().1;
        if w_k.dim().1 != d_in || w_v.dim().1 != d_in {
            return Err(Error::shape(
                format!("attention layer {name}"),
                format!("q/k/v input dim {d_in}"),
                format!("k: {}, v: {}", w_k.dim().1, w_v.dim().1),
            ));
        }
        if w_q.dim().0 != w_k.dim().0 {
            return Err(Error::shape(
                format!("attention layer {name}"),
                "matching q/k output dims",
                format!("q: {}, k: {}", w_q.dim().0, w_k.dim().0),
            ));
        }
        if w_o.dim().1 != w_v.dim().0 {
            return Err(Error::shape(
                format!("attention layer {name}"),
                format!("o input dim {}", w_v.dim().0),
                format!("{}", w_o.dim().1),
            ));
        }
        let d_k = w_q.dim().0;
        Ok(AttentionLayer {
            name,
            w_q,
            w_k,
            w_v,
            w_o,
            d_k,
        })
    }

    /// Identity-projection layer of width `d`, handy in tests.
    pub fn identity(name: impl Into<String>, d: usize) -> Self {
        AttentionLayer {
            name: name.into(),
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
            w_v: Array2::eye(d),
            w_o: Array2::eye(d),
            d_k: d,
        }
    }
}

/// Softmax attention over token rows:
/// `f_o(softmax(Q K^T / sqrt(d_k)) V)` with `Q = f_q(F)`, `K = f_k(F)`,
/// `V = f_v(F)`.
pub fn attention_forward(layer: &AttentionLayer, tokens: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d_in) = tokens.dim();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "attention layer {}: empty token matrix",
            layer.name
        )));
    }
    if d_in != layer.w_q.dim().1 {
        return Err(Error::shape(
            format!("attention layer {}", layer.name),
            format!("token feature dim {}", layer.w_q.dim().1),
            format!("{d_in}"),
        ));
    }
    let q = tokens.dot(&layer.w_q.t());
    let k = tokens.dot(&layer.w_k.t());
    let v = tokens.dot(&layer.w_v.t());
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|s| s / (layer.d_k as f64).sqrt());
    let probs = softmax_rows(&scores);
    Ok(probs.dot(&v).dot(&layer.w_o.t()))
}

pub(crate) fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn single_token_with_identity_projections_returns_the_token() {
        let layer = AttentionLayer::identity("t", 3);
        let v = array![[0.3, -1.2, 2.0]];
        let out = attention_forward(&layer, &v).unwrap();
        for (a, b) in out.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_attend_to_their_mean() {
        // two equal rows: uniform softmax, mean of value rows = the row
        let layer = AttentionLayer::identity("t", 3);
        let f = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let out = attention_forward(&layer, &f).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip([1.0, 2.0, 3.0].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scores_average_the_value_rows() {
        // zero query projection makes every q.k product equal, so the
        // softmax is uniform and each output row is the mean of the values
        let mut layer = AttentionLayer::identity("t", 3);
        layer.w_q = Array2::zeros((3, 3));
        let f = array![[2.0, 0.0, 4.0], [0.0, 6.0, 0.0]];
        let out = attention_forward(&layer, &f).unwrap();
        let mean = [1.0, 3.0, 2.0];
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Independently coded dense oracle: explicit loops, no shared code with
    /// the implementation above.
    fn attention_oracle(layer: &AttentionLayer, f: &Array2<f64>) -> Array2<f64> {
        let (n, _) = f.dim();
        let dk = layer.d_k;
        let proj = |x: &Array2<f64>, w: &Array2<f64>| -> Array2<f64> {
            let (rows, _) = x.dim();
            let (dout, din) = w.dim();
            let mut y = Array2::zeros((rows, dout));
            for i in 0..rows {
                for o in 0..dout {
                    let mut acc = 0.0;
                    for j in 0..din {
                        acc += x[[i, j]] * w[[o, j]];
                    }
                    y[[i, o]] = acc;
                }
            }
            y
        };
        let q = proj(f, &layer.w_q);
        let k = proj(f, &layer.w_k);
        let v = proj(f, &layer.w_v);
        let mut ctx = Array2::zeros((n, v.dim().1));
        for i in 0..n {
            let mut weights = vec![0.0; n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += q[[i, c]] * k[[j, c]];
                }
                weights[j] = dot / (dk as f64).sqrt();
                max = max.max(weights[j]);
            }
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            for (j, w) in weights.iter().enumerate() {
                for c in 0..v.dim().1 {
                    ctx[[i, c]] += w / sum * v[[j, c]];
                }
            }
        }
        proj(&ctx, &layer.w_o)
    }

    #[test]
    fn random_case_matches_dense_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut randn = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
            })
        };
        let layer = AttentionLayer::new("rnd", randn(8, 8), randn(8, 8), randn(8, 8), randn(8, 8))
            .unwrap();
        let f = randn(4, 8);
        let fast = attention_forward(&layer, &f).unwrap();
        let slow = attention_oracle(&layer, &f);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let layer = AttentionLayer::identity("down.1.0.attn", 4);
        let bad = Array2::zeros((2, 5));
        let err = attention_forward(&layer, &bad).unwrap_err();
        assert!(err.to_string().contains("down.1.0.attn"));
    }
}
