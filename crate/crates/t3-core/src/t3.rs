//! The windowed multi-scale attention module: per-scale gather, block
//! attention with shared projection weights, scatter, and scale-weighted
//! mean aggregation, plus its analytic backward and a masked full-attention
//! oracle.
//!
//! Q, K, V are projected once before the scale loop and W_O is applied once
//! after aggregation, so projection cost does not multiply with the scale
//! count.

use crate::attn::{
    attn_heads_backward, attn_heads_forward, AttnGrads, AttnWeights, ModelDims,
};
use crate::error::{Result, T3Error};
use crate::grid::{GridDims, LayerConfig};
use crate::tensor::{matmul, softmax_rows, Phase, Scalar, Tensor};

/// One windowed attention layer: shared weights plus a resolved tiling
/// config for a concrete grid.
#[derive(Debug, Clone)]
pub struct T3Layer<T: Scalar> {
    pub weights: AttnWeights<T>,
    pub config: LayerConfig,
    pub dims: ModelDims,
    pub grid: GridDims,
}

impl<T: Scalar> T3Layer<T> {
    pub fn new(
        weights: AttnWeights<T>,
        config: LayerConfig,
        dims: ModelDims,
        grid: GridDims,
    ) -> Result<Self> {
        weights.validate(&dims)?;
        for plan in &config.scales {
            if plan.voxel_to_block.len() != grid.len() {
                return Err(T3Error::Plan(format!(
                    "scale {} built for {} voxels, grid has {}",
                    plan.scale_index,
                    plan.voxel_to_block.len(),
                    grid.len()
                )));
            }
        }
        Ok(T3Layer {
            weights,
            config,
            dims,
            grid,
        })
    }
}

fn check_rows<T: Scalar>(x: &Tensor<T>, layer: &T3Layer<T>) -> Result<()> {
    if x.shape().len() != 2 || x.rows() != layer.grid.len() || x.cols() != layer.dims.channels {
        return Err(T3Error::Shape(format!(
            "input shape {:?} incompatible with grid L={} and channels {}",
            x.shape(),
            layer.grid.len(),
            layer.dims.channels
        )));
    }
    Ok(())
}

fn gather_rows<T: Scalar>(src: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = src.cols();
    let mut out = Tensor::zeros(vec![rows.len(), c]);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(src.row(r));
    }
    out
}

fn scatter_add_rows<T: Scalar>(dst: &mut Tensor<T>, rows: &[usize], src: &Tensor<T>) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, &s) in dst.row_mut(r).iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

/// Multi-scale windowed attention forward. Scales are processed ascending
/// and blocks in lexicographic order, so the output is schedule-independent.
pub fn t3_forward<T: Scalar>(x: &Tensor<T>, layer: &T3Layer<T>) -> Result<Tensor<T>> {
    check_rows(x, layer)?;
    let w = &layer.weights;
    T::phase(Phase::Proj);
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    T::phase(Phase::Other);

    let l = x.rows();
    let c = x.cols();
    let z = layer.config.normalization();
    let mut agg = Tensor::zeros(vec![l, c]);
    for (plan, &omega) in layer.config.scales.iter().zip(&layer.config.scale_weights) {
        let coef = T::from_f64(omega / z);
        for members in &plan.blocks {
            let q_b = gather_rows(&q, members);
            let k_b = gather_rows(&k, members);
            let v_b = gather_rows(&v, members);
            let (out_b, _) = attn_heads_forward(&q_b, &k_b, &v_b, layer.dims.heads)?;
            for (i, &r) in members.iter().enumerate() {
                for (d, &s) in agg.row_mut(r).iter_mut().zip(out_b.row(i)) {
                    *d += coef * s;
                }
            }
        }
    }

    T::phase(Phase::Proj);
    let out = matmul(&agg, &w.w_o)?;
    T::phase(Phase::Other);
    Ok(out)
}

/// Analytic backward of [`t3_forward`]. Weight gradients accumulate
/// contributions from every block at every scale (shared parameters).
pub fn t3_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &T3Layer<T>,
    grad_out: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    check_rows(x, layer)?;
    if grad_out.shape() != x.shape() {
        return Err(T3Error::Shape(format!(
            "grad_out shape {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let w = &layer.weights;
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;

    let l = x.rows();
    let c = x.cols();
    let z = layer.config.normalization();

    // recompute the aggregated pre-W_O activation for grad_W_O
    let mut agg = Tensor::zeros(vec![l, c]);
    let mut grad_q = Tensor::zeros(vec![l, c]);
    let mut grad_k = Tensor::zeros(vec![l, c]);
    let mut grad_v = Tensor::zeros(vec![l, c]);
    let grad_agg = matmul(grad_out, &w.w_o.transpose())?;

    for (plan, &omega) in layer.config.scales.iter().zip(&layer.config.scale_weights) {
        let coef = T::from_f64(omega / z);
        for members in &plan.blocks {
            let q_b = gather_rows(&q, members);
            let k_b = gather_rows(&k, members);
            let v_b = gather_rows(&v, members);
            let (out_b, attn_mats) = attn_heads_forward(&q_b, &k_b, &v_b, layer.dims.heads)?;
            for (i, &r) in members.iter().enumerate() {
                for (d, &s) in agg.row_mut(r).iter_mut().zip(out_b.row(i)) {
                    *d += coef * s;
                }
            }
            let grad_block = gather_rows(&grad_agg, members).scale(coef);
            let (gq_b, gk_b, gv_b) = attn_heads_backward(
                &q_b,
                &k_b,
                &v_b,
                layer.dims.heads,
                &attn_mats,
                &grad_block,
            )?;
            scatter_add_rows(&mut grad_q, members, &gq_b);
            scatter_add_rows(&mut grad_k, members, &gk_b);
            scatter_add_rows(&mut grad_v, members, &gv_b);
        }
    }

    let grad_w_o = matmul(&agg.transpose(), grad_out)?;
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

/// Brute-force reference: materializes full L×L attention per scale, zeroes
/// entries outside blocks, renormalizes rows within blocks, applies V, then
/// averages scales and applies W_O. Independent of the gather/scatter path.
pub fn masked_attention_oracle<T: Scalar>(x: &Tensor<T>, layer: &T3Layer<T>) -> Result<Tensor<T>> {
    check_rows(x, layer)?;
    let w = &layer.weights;
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let l = x.rows();
    let c = x.cols();
    let heads = layer.dims.heads;
    let hd = c / heads;
    let z = layer.config.normalization();

    let mut agg = Tensor::zeros(vec![l, c]);
    for (plan, &omega) in layer.config.scales.iter().zip(&layer.config.scale_weights) {
        let coef = T::from_f64(omega / z);
        for h in 0..heads {
            let off = h * hd;
            // full logits for this head, masked to same-block pairs
            let q_h = crate::attn::column_slice(&q, off, hd);
            let k_h = crate::attn::column_slice(&k, off, hd);
            let logits = matmul(&q_h, &k_h.transpose())?
                .scale(T::from_f64(1.0 / (hd as f64).sqrt()));
            let mut masked = Tensor::zeros(vec![l, l]);
            for i in 0..l {
                let bi = plan.voxel_to_block[i];
                let row_mask: Vec<bool> =
                    (0..l).map(|j| plan.voxel_to_block[j] == bi).collect();
                let mut max = None::<T>;
                for j in 0..l {
                    if row_mask[j] {
                        let val = logits.row(i)[j];
                        max = Some(match max {
                            Some(m) if m > val => m,
                            _ => val,
                        });
                    }
                }
                let max = max.expect("every voxel belongs to a block");
                let mut sum = T::ZERO;
                for j in 0..l {
                    if row_mask[j] {
                        let e = (logits.row(i)[j] - max).exp();
                        masked.row_mut(i)[j] = e;
                        sum += e;
                    }
                }
                for j in 0..l {
                    masked.row_mut(i)[j] = masked.row(i)[j] / sum;
                }
            }
            let v_h = crate::attn::column_slice(&v, off, hd);
            let out_h = matmul(&masked, &v_h)?;
            for i in 0..l {
                for d in 0..hd {
                    let cur = agg.row(i)[off + d];
                    agg.row_mut(i)[off + d] = cur + coef * out_h.row(i)[d];
                }
            }
        }
    }
    matmul(&agg, &w.w_o)
}

/// Renormalized softmax check helper used by the verify command: every row
/// of every per-block attention matrix sums to 1 within `tol`.
pub fn attention_rows_stochastic<T: Scalar>(x: &Tensor<T>, layer: &T3Layer<T>, tol: f64) -> Result<bool> {
    let w = &layer.weights;
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    for plan in &layer.config.scales {
        for members in &plan.blocks {
            let q_b = gather_rows(&q, members);
            let k_b = gather_rows(&k, members);
            let hd = layer.dims.head_dim();
            for h in 0..layer.dims.heads {
                let q_h = crate::attn::column_slice(&q_b, h * hd, hd);
                let k_h = crate::attn::column_slice(&k_b, h * hd, hd);
                let logits =
                    matmul(&q_h, &k_h.transpose())?.scale(T::from_f64(1.0 / (hd as f64).sqrt()));
                let a = softmax_rows(&logits)?;
                for i in 0..a.rows() {
                    let s: f64 = a.row(i).iter().map(|v| v.to_f64()).sum();
                    if (s - 1.0).abs() > tol {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::full_attention_forward;
    use crate::grid::{default_group, AxisPreserve, LayerBlueprint, StrideSpec};
    use crate::tensor::Rng;

    fn blueprint(window: [usize; 3], scales: usize) -> LayerBlueprint {
        LayerBlueprint {
            window,
            scales,
            strides: StrideSpec::default(),
            axis_preserving: AxisPreserve::None,
            scale_weights: None,
        }
    }

    fn layer_for(
        grid: GridDims,
        window: [usize; 3],
        scales: usize,
        c: usize,
        heads: usize,
        seed: u64,
    ) -> (T3Layer<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let weights = AttnWeights::random(c, &mut rng);
        let dims = ModelDims::new(c, heads, 4 * c, 1).unwrap();
        let config = blueprint(window, scales).resolve(grid).unwrap();
        let x = rng.uniform_tensor(vec![grid.len(), c], -1.0, 1.0);
        (T3Layer::new(weights, config, dims, grid).unwrap(), x)
    }

    #[test]
    fn full_window_single_scale_equals_full_attention() {
        let grid = GridDims::new(2, 2, 2).unwrap();
        let (layer, x) = layer_for(grid, [2, 2, 2], 1, 8, 2, 10);
        let t3 = t3_forward(&x, &layer).unwrap();
        let full = full_attention_forward(&x, &layer.weights, &layer.dims).unwrap();
        assert!(t3.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn unit_window_is_value_output_path() {
        let grid = GridDims::new(2, 2, 2).unwrap();
        let (layer, x) = layer_for(grid, [1, 1, 1], 2, 4, 1, 11);
        let t3 = t3_forward(&x, &layer).unwrap();
        let linear = matmul(&matmul(&x, &layer.weights.w_v).unwrap(), &layer.weights.w_o).unwrap();
        assert!(t3.max_abs_diff(&linear) < 1e-12);
    }

    #[test]
    fn matches_masked_oracle() {
        let grid = GridDims::new(2, 2, 2).unwrap();
        let (layer, x) = layer_for(grid, [1, 2, 2], 2, 4, 2, 12);
        let t3 = t3_forward(&x, &layer).unwrap();
        let oracle = masked_attention_oracle(&x, &layer).unwrap();
        assert!(t3.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn oracle_degenerate_cases() {
        let grid = GridDims::new(2, 2, 2).unwrap();
        let (layer, x) = layer_for(grid, [2, 2, 2], 1, 8, 2, 13);
        let full = full_attention_forward(&x, &layer.weights, &layer.dims).unwrap();
        assert!(masked_attention_oracle(&x, &layer).unwrap().max_abs_diff(&full) < 1e-12);

        let (unit_layer, x2) = layer_for(grid, [1, 1, 1], 2, 4, 1, 14);
        let linear = matmul(
            &matmul(&x2, &unit_layer.weights.w_v).unwrap(),
            &unit_layer.weights.w_o,
        )
        .unwrap();
        assert!(masked_attention_oracle(&x2, &unit_layer).unwrap().max_abs_diff(&linear) < 1e-12);
    }

    #[test]
    fn locality_of_perturbations() {
        let grid = GridDims::new(4, 4, 1).unwrap();
        let (layer, x) = layer_for(grid, [2, 2, 1], 2, 4, 1, 15);
        let base = t3_forward(&x, &layer).unwrap();

        let voxel = 5usize;
        let mut x2 = x.clone();
        x2.row_mut(voxel)[0] += 0.5;
        let bumped = t3_forward(&x2, &layer).unwrap();

        let mut mates: std::collections::HashSet<usize> = std::collections::HashSet::new();
        for plan in &layer.config.scales {
            let b = plan.voxel_to_block[voxel];
            mates.extend(plan.blocks[b].iter().copied());
        }
        for r in 0..grid.len() {
            let changed = (0..4).any(|j| (base.row(r)[j] - bumped.row(r)[j]).abs() > 1e-12);
            assert_eq!(changed, mates.contains(&r), "voxel {r}");
        }
    }

    #[test]
    fn backward_reduces_to_full_attention_backward() {
        let grid = GridDims::new(2, 2, 2).unwrap();
        let (layer, x) = layer_for(grid, [2, 2, 2], 1, 8, 2, 16);
        let mut rng = Rng::new(99);
        let g: Tensor<f64> = rng.uniform_tensor(vec![8, 8], -1.0, 1.0);
        let t3_grads = t3_backward(&x, &layer, &g).unwrap();
        let full_grads =
            crate::attn::full_attention_backward(&x, &layer.weights, &layer.dims, &g).unwrap();
        assert!(t3_grads.x.max_abs_diff(&full_grads.x) < 1e-12);
        assert!(t3_grads.weights.w_q.max_abs_diff(&full_grads.weights.w_q) < 1e-12);
        assert!(t3_grads.weights.w_o.max_abs_diff(&full_grads.weights.w_o) < 1e-12);
    }

    #[test]
    fn backward_zero_upstream() {
        let grid = GridDims::new(2, 2, 4).unwrap();
        let (layer, x) = layer_for(grid, [1, 2, 2], 2, 4, 1, 17);
        let grads = t3_backward(&x, &layer, &Tensor::zeros(vec![16, 4])).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.w_v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_weight_grads_accumulate_over_blocks() {
        // single scale, so per-block accumulation can be reproduced by
        // running each block as its own full-attention instance
        let grid = GridDims::new(2, 2, 1).unwrap();
        let bp = LayerBlueprint {
            window: [2, 2, 1],
            scales: 1,
            strides: StrideSpec::Named("boundary".into()),
            axis_preserving: AxisPreserve::None,
            scale_weights: None,
        };
        let mut rng = Rng::new(18);
        let weights = AttnWeights::<f64>::random(4, &mut rng);
        let dims = ModelDims::new(4, 1, 16, 1).unwrap();
        let config = bp.resolve(grid).unwrap();
        let layer = T3Layer::new(weights.clone(), config, dims, grid).unwrap();
        let x: Tensor<f64> = rng.uniform_tensor(vec![4, 4], -1.0, 1.0);
        let g: Tensor<f64> = rng.uniform_tensor(vec![4, 4], -1.0, 1.0);
        let t3_grads = t3_backward(&x, &layer, &g).unwrap();
        // full window over the whole grid: identical to one full-attention block
        let full = crate::attn::full_attention_backward(&x, &weights, &dims, &g).unwrap();
        assert!(t3_grads.weights.w_k.max_abs_diff(&full.weights.w_k) < 1e-12);
    }

    #[test]
    fn hierarchical_group_configs_all_run() {
        let grid = GridDims::new(4, 8, 8).unwrap();
        let mut rng = Rng::new(19);
        let weights = AttnWeights::<f64>::random(8, &mut rng);
        let dims = ModelDims::new(8, 2, 32, 1).unwrap();
        let x: Tensor<f64> = rng.uniform_tensor(vec![grid.len(), 8], -1.0, 1.0);
        for bp in default_group([2, 2, 2]) {
            let config = bp.resolve(grid).unwrap();
            let layer = T3Layer::new(weights.clone(), config, dims, grid).unwrap();
            let out = t3_forward(&x, &layer).unwrap();
            let oracle = masked_attention_oracle(&x, &layer).unwrap();
            assert!(out.max_abs_diff(&oracle) < 1e-10);
        }
    }
}
