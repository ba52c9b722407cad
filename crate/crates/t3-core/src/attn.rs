//! Reference multi-head full self-attention over the flattened token
//! sequence: forward and hand-derived analytic backward.
//!
//! No RoPE, bias, or norm layers; softmax scaling is 1/sqrt(head_dim). The
//! windowed kernel reuses the per-head core here so both modes share one
//! attention definition.

use crate::error::{Result, T3Error};
use crate::tensor::{matmul, softmax_rows, Phase, Rng, Scalar, Tensor};

/// Channel/head/depth configuration of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub depth: usize,
}

impl ModelDims {
    pub fn new(channels: usize, heads: usize, ffn_width: usize, depth: usize) -> Result<Self> {
        if heads == 0 || channels == 0 {
            return Err(T3Error::Shape("channels and heads must be >= 1".into()));
        }
        if channels % heads != 0 {
            return Err(T3Error::Shape(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(ModelDims {
            channels,
            heads,
            ffn_width,
            depth,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Shared projection matrices; one instance serves both full attention and
/// every windowed block at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> AttnWeights<T> {
    pub fn zeros(c: usize) -> Self {
        AttnWeights {
            w_q: Tensor::zeros(vec![c, c]),
            w_k: Tensor::zeros(vec![c, c]),
            w_v: Tensor::zeros(vec![c, c]),
            w_o: Tensor::zeros(vec![c, c]),
        }
    }

    pub fn random(c: usize, rng: &mut Rng) -> Self {
        // uniform(-√3/√C, √3/√C) has variance 1/C, which keeps activation
        // variance roughly constant through a stack of projections
        let a = (3.0 / c as f64).sqrt();
        AttnWeights {
            w_q: rng.uniform_tensor(vec![c, c], -a, a),
            w_k: rng.uniform_tensor(vec![c, c], -a, a),
            w_v: rng.uniform_tensor(vec![c, c], -a, a),
            w_o: rng.uniform_tensor(vec![c, c], -a, a),
        }
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let c = dims.channels;
        for (name, t) in self.tensors() {
            if t.shape() != [c, c] {
                return Err(T3Error::Shape(format!(
                    "{name} has shape {:?}, expected [{c}, {c}]",
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(T3Error::Numeric(format!("{name} contains non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> AttnWeights<U> {
        AttnWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
        }
    }

    /// w -= lr * grad, in place.
    pub fn sgd_step(&mut self, grad: &AttnWeights<T>, lr: T) {
        for (dst, src) in [
            (&mut self.w_q, &grad.w_q),
            (&mut self.w_k, &grad.w_k),
            (&mut self.w_v, &grad.w_v),
            (&mut self.w_o, &grad.w_o),
        ] {
            for (d, &g) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = *d - lr * g;
            }
        }
    }
}

pub(crate) fn column_slice<T: Scalar>(t: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let rows = t.rows();
    let mut out = Tensor::zeros(vec![rows, width]);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&t.row(i)[start..start + width]);
    }
    out
}

pub(crate) fn column_write<T: Scalar>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let width = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + width].copy_from_slice(src.row(i));
    }
}

/// Per-head attention over already-projected Q, K, V (no output projection).
/// Returns the concatenated head outputs and the attention matrices needed
/// by the backward pass.
pub(crate) fn attn_heads_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (l, c) = (q.rows(), q.cols());
    let hd = c / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut concat = Tensor::zeros(vec![l, c]);
    let mut attn_mats = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = column_slice(q, h * hd, hd);
        let k_h = column_slice(k, h * hd, hd);
        let v_h = column_slice(v, h * hd, hd);
        T::phase(Phase::Attn);
        let logits = matmul(&q_h, &k_h.transpose())?.scale(scale);
        T::phase(Phase::Other);
        let a = softmax_rows(&logits)?;
        T::phase(Phase::Attn);
        let out_h = matmul(&a, &v_h)?;
        T::phase(Phase::Other);
        column_write(&mut concat, h * hd, &out_h);
        attn_mats.push(a);
    }
    Ok((concat, attn_mats))
}

/// Backward of [`attn_heads_forward`]: gradients w.r.t. projected Q, K, V.
pub(crate) fn attn_heads_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    attn_mats: &[Tensor<T>],
    grad_concat: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (l, c) = (q.rows(), q.cols());
    let hd = c / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut grad_q = Tensor::zeros(vec![l, c]);
    let mut grad_k = Tensor::zeros(vec![l, c]);
    let mut grad_v = Tensor::zeros(vec![l, c]);
    for h in 0..heads {
        let q_h = column_slice(q, h * hd, hd);
        let k_h = column_slice(k, h * hd, hd);
        let v_h = column_slice(v, h * hd, hd);
        let a = &attn_mats[h];
        let grad_out_h = column_slice(grad_concat, h * hd, hd);

        let grad_a = matmul(&grad_out_h, &v_h.transpose())?;
        let grad_v_h = matmul(&a.transpose(), &grad_out_h)?;

        // softmax rows: dS[i,j] = A[i,j] * (dA[i,j] - Σ_j' dA[i,j']·A[i,j'])
        let mut grad_s = Tensor::zeros(vec![l, l]);
        for i in 0..l {
            let mut dot = T::ZERO;
            for j in 0..l {
                dot = T::mul_acc(dot, grad_a.row(i)[j], a.row(i)[j]);
            }
            for j in 0..l {
                grad_s.row_mut(i)[j] = a.row(i)[j] * (grad_a.row(i)[j] - dot);
            }
        }
        let grad_s = grad_s.scale(scale);
        let grad_q_h = matmul(&grad_s, &k_h)?;
        let grad_k_h = matmul(&grad_s.transpose(), &q_h)?;

        column_write(&mut grad_q, h * hd, &grad_q_h);
        column_write(&mut grad_k, h * hd, &grad_k_h);
        column_write(&mut grad_v, h * hd, &grad_v_h);
    }
    Ok((grad_q, grad_k, grad_v))
}

fn check_input<T: Scalar>(x: &Tensor<T>, w: &AttnWeights<T>, dims: &ModelDims) -> Result<()> {
    w.validate(dims)?;
    if x.shape().len() != 2 || x.cols() != dims.channels {
        return Err(T3Error::Shape(format!(
            "input shape {:?} incompatible with channels {}",
            x.shape(),
            dims.channels
        )));
    }
    Ok(())
}

/// Standard multi-head self-attention: softmax(QKᵀ/√d)·V per head, heads
/// concatenated and projected by W_O.
pub fn full_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    dims: &ModelDims,
) -> Result<Tensor<T>> {
    check_input(x, w, dims)?;
    T::phase(Phase::Proj);
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let (concat, _) = attn_heads_forward(&q, &k, &v, dims.heads)?;
    T::phase(Phase::Proj);
    let out = matmul(&concat, &w.w_o)?;
    T::phase(Phase::Other);
    Ok(out)
}

/// Gradients returned by the backward passes.
#[derive(Debug, Clone)]
pub struct AttnGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub weights: AttnWeights<T>,
}

/// Analytic backward of [`full_attention_forward`].
pub fn full_attention_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    dims: &ModelDims,
    grad_out: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    check_input(x, w, dims)?;
    if grad_out.shape() != x.shape() {
        return Err(T3Error::Shape(format!(
            "grad_out shape {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let (concat, attn_mats) = attn_heads_forward(&q, &k, &v, dims.heads)?;

    let grad_w_o = matmul(&concat.transpose(), grad_out)?;
    let grad_concat = matmul(grad_out, &w.w_o.transpose())?;
    let (grad_q, grad_k, grad_v) =
        attn_heads_backward(&q, &k, &v, dims.heads, &attn_mats, &grad_concat)?;

    let xt = x.transpose();
    let grad_w_q = matmul(&xt, &grad_q)?;
    let grad_w_k = matmul(&xt, &grad_k)?;
    let grad_w_v = matmul(&xt, &grad_v)?;

    let grad_x = matmul(&grad_q, &w.w_q.transpose())?
        .add(&matmul(&grad_k, &w.w_k.transpose())?)?
        .add(&matmul(&grad_v, &w.w_v.transpose())?)?;

    Ok(AttnGrads {
        x: grad_x,
        weights: AttnWeights {
            w_q: grad_w_q,
            w_k: grad_w_k,
            w_v: grad_w_v,
            w_o: grad_w_o,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn dims(c: usize, h: usize) -> ModelDims {
        ModelDims::new(c, h, 4 * c, 1).unwrap()
    }

    /// Naive three-loop scalar attention, written independently of the
    /// kernel path above.
    fn naive_attention(x: &Tensor<f64>, w: &AttnWeights<f64>, d: &ModelDims) -> Tensor<f64> {
        let l = x.rows();
        let c = d.channels;
        let hd = c / d.heads;
        let proj = |m: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..l)
                .map(|i| {
                    (0..c)
                        .map(|j| (0..c).map(|k| x.row(i)[k] * m.row(k)[j]).sum())
                        .collect()
                })
                .collect()
        };
        let q = proj(&w.w_q);
        let k = proj(&w.w_k);
        let v = proj(&w.w_v);
        let mut concat = vec![vec![0.0; c]; l];
        for head in 0..d.heads {
            let off = head * hd;
            for i in 0..l {
                let mut logits = vec![0.0; l];
                for (j, lj) in logits.iter_mut().enumerate() {
                    for dd in 0..hd {
                        *lj += q[i][off + dd] * k[j][off + dd];
                    }
                    *lj /= (hd as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for dd in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += exps[j] / sum * v[j][off + dd];
                    }
                    concat[i][off + dd] = acc;
                }
            }
        }
        let mut out = Tensor::zeros(vec![l, c]);
        for i in 0..l {
            for j in 0..c {
                out.row_mut(i)[j] = (0..c).map(|k2| concat[i][k2] * w.w_o.row(k2)[j]).sum();
            }
        }
        out
    }

    #[test]
    fn single_token_is_value_path() {
        let d = dims(4, 2);
        let mut rng = Rng::new(1);
        let w = AttnWeights::<f64>::random(4, &mut rng);
        let x: Tensor<f64> = rng.uniform_tensor(vec![1, 4], -1.0, 1.0);
        let out = full_attention_forward(&x, &w, &d).unwrap();
        let expected = matmul(&matmul(&x, &w.w_v).unwrap(), &w.w_o).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_query_key_mean_pools() {
        let d = dims(4, 1);
        let mut rng = Rng::new(2);
        let mut w = AttnWeights::<f64>::random(4, &mut rng);
        w.w_q = Tensor::zeros(vec![4, 4]);
        w.w_k = Tensor::zeros(vec![4, 4]);
        let x: Tensor<f64> = rng.uniform_tensor(vec![5, 4], -1.0, 1.0);
        let out = full_attention_forward(&x, &w, &d).unwrap();

        let v = matmul(&x, &w.w_v).unwrap();
        let mut mean = Tensor::zeros(vec![1, 4]);
        for i in 0..5 {
            for j in 0..4 {
                mean.row_mut(0)[j] += v.row(i)[j] / 5.0;
            }
        }
        let pooled = matmul(&mean, &w.w_o).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((out.row(i)[j] - pooled.row(0)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_three_loop_oracle() {
        let d = dims(8, 2);
        let mut rng = Rng::new(3);
        let w = AttnWeights::<f64>::random(8, &mut rng);
        let x: Tensor<f64> = rng.uniform_tensor(vec![4, 8], -1.0, 1.0);
        let out = full_attention_forward(&x, &w, &d).unwrap();
        let oracle = naive_attention(&x, &w, &d);
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let d = dims(8, 4);
        let mut rng = Rng::new(4);
        let w = AttnWeights::<f32>::random(8, &mut rng);
        let x: Tensor<f32> = rng.uniform_tensor(vec![6, 8], -1.0, 1.0);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = Tensor::zeros(vec![6, 8]);
        for (i, &p) in perm.iter().enumerate() {
            px.row_mut(i).copy_from_slice(x.row(p));
        }
        let out = full_attention_forward(&x, &w, &d).unwrap();
        let pout = full_attention_forward(&px, &w, &d).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((pout.row(i)[j] - out.row(p)[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let d = dims(4, 2);
        let mut rng = Rng::new(5);
        let w = AttnWeights::<f64>::random(4, &mut rng);
        let x: Tensor<f64> = rng.uniform_tensor(vec![3, 4], -1.0, 1.0);
        let grads =
            full_attention_backward(&x, &w, &d, &Tensor::zeros(vec![3, 4])).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.w_q.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.w_o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_token_value_grad() {
        let d = dims(4, 1);
        let mut rng = Rng::new(6);
        let w = AttnWeights::<f64>::random(4, &mut rng);
        let x: Tensor<f64> = rng.uniform_tensor(vec![1, 4], -1.0, 1.0);
        let g: Tensor<f64> = rng.uniform_tensor(vec![1, 4], -1.0, 1.0);
        let grads = full_attention_backward(&x, &w, &d, &g).unwrap();
        // L=1: out = x·W_V·W_O, so dW_V = xᵀ·(g·W_Oᵀ)
        let expected = matmul(&x.transpose(), &matmul(&g, &w.w_o.transpose()).unwrap()).unwrap();
        assert!(grads.weights.w_v.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = dims(4, 2);
        let w = AttnWeights::<f64>::zeros(4);
        let x: Tensor<f64> = Tensor::zeros(vec![3, 6]);
        assert!(matches!(
            full_attention_forward(&x, &w, &d),
            Err(T3Error::Shape(_))
        ));
    }
}
