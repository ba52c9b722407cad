//! Central finite-difference gradient checking for both attention kernels.
//!
//! The check perturbs each input/parameter entry by ±ε, differences the
//! scalar objective `Σ grad_out ⊙ forward(...)`, and compares against the
//! analytic backward. Runs in f64 so a 1e-6 relative tolerance is
//! meaningful.

use crate::attn::{full_attention_backward, full_attention_forward, AttnWeights, ModelDims};
use crate::error::Result;
use crate::grid::{GridDims, LayerConfig};
use crate::t3::{t3_backward, t3_forward, T3Layer};
use crate::tensor::{Rng, Tensor};

/// Worst observed relative error, with the parameter it came from.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom
}

fn update(report: &mut GradCheckReport, name: &str, idx: usize, analytic: f64, numeric: f64) {
    let e = rel_error(analytic, numeric);
    report.checked += 1;
    if e > report.max_rel_error {
        report.max_rel_error = e;
        report.worst_param = format!("{name}[{idx}]");
    }
}

fn check_generic(
    forward: impl Fn(&Tensor<f64>, &AttnWeights<f64>) -> Result<Tensor<f64>>,
    backward: impl Fn(&Tensor<f64>, &AttnWeights<f64>, &Tensor<f64>) -> Result<crate::attn::AttnGrads<f64>>,
    x: &Tensor<f64>,
    w: &AttnWeights<f64>,
    grad_out: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let objective = |x: &Tensor<f64>, w: &AttnWeights<f64>| -> Result<f64> {
        let y = forward(x, w)?;
        Ok(y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&a, &b)| a * b)
            .sum())
    };
    let grads = backward(x, w, grad_out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };

    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (objective(&xp, w)? - objective(&xm, w)?) / (2.0 * eps);
        update(&mut report, "x", i, grads.x.data()[i], numeric);
    }

    for (name, which) in [("w_q", 0usize), ("w_k", 1), ("w_v", 2), ("w_o", 3)] {
        let analytic = match which {
            0 => &grads.weights.w_q,
            1 => &grads.weights.w_k,
            2 => &grads.weights.w_v,
            _ => &grads.weights.w_o,
        };
        for i in 0..analytic.data().len() {
            let perturb = |delta: f64| -> AttnWeights<f64> {
                let mut wp = w.clone();
                let t = match which {
                    0 => &mut wp.w_q,
                    1 => &mut wp.w_k,
                    2 => &mut wp.w_v,
                    _ => &mut wp.w_o,
                };
                t.data_mut()[i] += delta;
                wp
            };
            let numeric =
                (objective(x, &perturb(eps))? - objective(x, &perturb(-eps))?) / (2.0 * eps);
            update(&mut report, name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks the full-attention kernel at the given size.
pub fn check_full_attention(
    l: usize,
    dims: ModelDims,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let w = AttnWeights::<f64>::random(dims.channels, &mut rng);
    let x = rng.uniform_tensor(vec![l, dims.channels], -1.0, 1.0);
    let grad_out = rng.uniform_tensor(vec![l, dims.channels], -1.0, 1.0);
    check_generic(
        |x, w| full_attention_forward(x, w, &dims),
        |x, w, g| full_attention_backward(x, w, &dims, g),
        &x,
        &w,
        &grad_out,
        eps,
    )
}

/// Checks the windowed kernel for a resolved layer config.
pub fn check_t3(
    grid: GridDims,
    config: &LayerConfig,
    dims: ModelDims,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let w = AttnWeights::<f64>::random(dims.channels, &mut rng);
    let x = rng.uniform_tensor(vec![grid.len(), dims.channels], -1.0, 1.0);
    let grad_out = rng.uniform_tensor(vec![grid.len(), dims.channels], -1.0, 1.0);
    check_generic(
        |x, w| {
            let layer = T3Layer::new(w.clone(), config.clone(), dims, grid)?;
            t3_forward(x, &layer)
        },
        |x, w, g| {
            let layer = T3Layer::new(w.clone(), config.clone(), dims, grid)?;
            t3_backward(x, &layer, g)
        },
        &x,
        &w,
        &grad_out,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AxisPreserve, LayerBlueprint, StrideSpec};

    #[test]
    fn full_attention_gradients_match_central_differences() {
        let dims = ModelDims::new(4, 1, 16, 1).unwrap();
        let report = check_full_attention(3, dims, 42, 1e-5).unwrap();
        assert!(
            report.max_rel_error <= 1e-6,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn full_attention_gradients_multi_head() {
        let dims = ModelDims::new(8, 2, 32, 1).unwrap();
        let report = check_full_attention(6, dims, 43, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn t3_gradients_match_central_differences() {
        let grid = GridDims::new(2, 2, 4).unwrap();
        let bp = LayerBlueprint {
            window: [1, 2, 2],
            scales: 2,
            strides: StrideSpec::Named("boundary".into()),
            axis_preserving: AxisPreserve::None,
            scale_weights: None,
        };
        let config = bp.resolve(grid).unwrap();
        let dims = ModelDims::new(4, 2, 16, 1).unwrap();
        let report = check_t3(grid, &config, dims, 44, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
