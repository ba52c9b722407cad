//! Analytic parameter and MACs accounting for full vs windowed attention,
//! a latent-token calculator, and an instrumented op-count oracle.
//!
//! Per layer, ignoring bias terms:
//!   params_full = 4C² (proj) + 0 (attn) + 2·C·C_ffn (ffn)
//!   macs_full   = 4LC² + 2L²C + 2LC·C_ffn
//!   macs_window = 4LC² + Σ_s 2·L·L_b·C + 2LC·C_ffn
//! One MAC is one multiply-accumulate; a matmul M×K×N costs M·K·N.

use serde::Serialize;

use crate::attn::{full_attention_forward, AttnWeights, ModelDims};
use crate::error::{Result, T3Error};
use crate::grid::{GridDims, LayerConfig, LayerSchedule};
use crate::t3::{t3_forward, T3Layer};
use crate::tensor::{mac_counters_read, mac_counters_reset, CountScalar, Rng, Tensor};

/// Which computation mode a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    T3,
}

/// Parameter counts across the whole depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCosts {
    pub proj_qkv: u128,
    pub proj_o: u128,
    pub ffn: u128,
    pub rest: u128,
    pub total: u128,
}

/// MAC counts across the whole depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacCosts {
    pub proj_qkv: u128,
    pub proj_o: u128,
    pub ffn: u128,
    pub attn: u128,
    pub rest: u128,
    pub total: u128,
}

/// Combined accounting for one (resolution, mode) pair.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub mode: Mode,
    pub params: ParamCosts,
    pub macs: MacCosts,
    /// Full-attention attn MACs divided by this mode's attn MACs.
    pub speedup_attn: f64,
}

/// Parameter breakdown for the full-attention transformer. `rest` covers
/// embeddings and cross-attention and is supplied externally.
pub fn params_full(dims: &ModelDims, rest: u128) -> ParamCosts {
    let c = dims.channels as u128;
    let d = dims.depth as u128;
    let proj_qkv = 3 * c * c * d;
    let proj_o = c * c * d;
    let ffn = 2 * c * dims.ffn_width as u128 * d;
    ParamCosts {
        proj_qkv,
        proj_o,
        ffn,
        rest,
        total: proj_qkv + proj_o + ffn + rest,
    }
}

/// MAC breakdown for full attention at `l` tokens.
pub fn macs_full(l: usize, dims: &ModelDims, rest: u128) -> MacCosts {
    let l = l as u128;
    let c = dims.channels as u128;
    let d = dims.depth as u128;
    let proj_qkv = 3 * l * c * c * d;
    let proj_o = l * c * c * d;
    let attn = 2 * l * l * c * d;
    let ffn = 2 * l * c * dims.ffn_width as u128 * d;
    MacCosts {
        proj_qkv,
        proj_o,
        ffn,
        attn,
        rest,
        total: proj_qkv + proj_o + ffn + attn + rest,
    }
}

/// MAC breakdown for the windowed schedule: projection and FFN terms match
/// full attention (QKV is computed once, before the scale loop); the attn
/// term is Σ_layers Σ_s 2·L·L_b·C.
pub fn macs_t3(
    schedule: &LayerSchedule,
    grid: GridDims,
    dims: &ModelDims,
    rest: u128,
) -> Result<MacCosts> {
    if schedule.depth != dims.depth {
        return Err(T3Error::Plan(format!(
            "schedule depth {} does not match model depth {}",
            schedule.depth, dims.depth
        )));
    }
    let l = grid.len() as u128;
    let c = dims.channels as u128;
    let mut attn = 0u128;
    for config in schedule.iter_configs() {
        for plan in &config.scales {
            if plan.voxel_to_block.len() != grid.len() {
                return Err(T3Error::Plan(format!(
                    "scale plan covers {} voxels, grid has {}",
                    plan.voxel_to_block.len(),
                    grid.len()
                )));
            }
            attn += 2 * l * plan.block_len() as u128 * c;
        }
    }
    let d = dims.depth as u128;
    let proj_qkv = 3 * l * c * c * d;
    let proj_o = l * c * c * d;
    let ffn = 2 * l * c * dims.ffn_width as u128 * d;
    Ok(MacCosts {
        proj_qkv,
        proj_o,
        ffn,
        attn,
        rest,
        total: proj_qkv + proj_o + ffn + attn + rest,
    })
}

/// Full report pair for one resolution.
pub fn cost_reports(
    l: usize,
    schedule: &LayerSchedule,
    grid: GridDims,
    dims: &ModelDims,
    rest_params: u128,
    rest_macs: u128,
) -> Result<(CostReport, CostReport)> {
    let params = params_full(dims, rest_params);
    let full = macs_full(l, dims, rest_macs);
    let t3 = macs_t3(schedule, grid, dims, rest_macs)?;
    let speedup = full.attn as f64 / t3.attn as f64;
    Ok((
        CostReport {
            mode: Mode::Full,
            params,
            macs: full,
            speedup_attn: 1.0,
        },
        CostReport {
            mode: Mode::T3,
            params,
            macs: t3,
            speedup_attn: speedup,
        },
    ))
}

/// Maps a pixel-space video spec to the latent token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatentSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Temporal VAE compression factor.
    pub f_t: usize,
    /// Spatial VAE compression factor.
    pub f_s: usize,
    pub p_t: usize,
    pub p_h: usize,
    pub p_w: usize,
}

impl LatentSpec {
    /// Default compression: temporal 4, spatial 8, patch (1, 2, 2).
    pub fn new(height: usize, width: usize, frames: usize) -> Self {
        LatentSpec {
            height,
            width,
            frames,
            f_t: 4,
            f_s: 8,
            p_t: 1,
            p_h: 2,
            p_w: 2,
        }
    }
}

/// T = ((frames−1)/f_t + 1)/p_t, H = height/(f_s·p_h), W = width/(f_s·p_w).
pub fn token_count(spec: &LatentSpec) -> Result<(GridDims, usize)> {
    if spec.f_t == 0 || spec.f_s == 0 || spec.p_t == 0 || spec.p_h == 0 || spec.p_w == 0 {
        return Err(T3Error::Spec("compression and patch factors must be >= 1".into()));
    }
    if spec.frames == 0 || (spec.frames - 1) % spec.f_t != 0 {
        return Err(T3Error::Spec(format!(
            "frame count {} must satisfy frames ≡ 1 mod {}",
            spec.frames, spec.f_t
        )));
    }
    let t_latent = (spec.frames - 1) / spec.f_t + 1;
    if t_latent % spec.p_t != 0 {
        return Err(T3Error::Spec(format!(
            "latent frame count {t_latent} not divisible by patch p_t={}",
            spec.p_t
        )));
    }
    let (dh, dw) = (spec.f_s * spec.p_h, spec.f_s * spec.p_w);
    if spec.height % dh != 0 || spec.width % dw != 0 {
        return Err(T3Error::Spec(format!(
            "pixel dims {}x{} not divisible by compression*patch ({dh}, {dw})",
            spec.height, spec.width
        )));
    }
    let grid = GridDims::new(t_latent / spec.p_t, spec.height / dh, spec.width / dw)?;
    let l = grid.len();
    Ok((grid, l))
}

/// Measured (proj, attn) MACs for a single full-attention forward, obtained
/// by running the kernel with the counting scalar type.
pub fn instrumented_full(l: usize, dims: &ModelDims, seed: u64) -> Result<(u128, u128)> {
    let mut rng = Rng::new(seed);
    let w = AttnWeights::<CountScalar>::random(dims.channels, &mut rng);
    let x: Tensor<CountScalar> = rng.uniform_tensor(vec![l, dims.channels], -1.0, 1.0);
    mac_counters_reset();
    full_attention_forward(&x, &w, dims)?;
    let (proj, attn, _) = mac_counters_read();
    Ok((proj, attn))
}

/// Measured (proj, attn) MACs for a single windowed forward.
pub fn instrumented_t3(
    grid: GridDims,
    config: &LayerConfig,
    dims: &ModelDims,
    seed: u64,
) -> Result<(u128, u128)> {
    let mut rng = Rng::new(seed);
    let w = AttnWeights::<CountScalar>::random(dims.channels, &mut rng);
    let x: Tensor<CountScalar> = rng.uniform_tensor(vec![grid.len(), dims.channels], -1.0, 1.0);
    let layer = T3Layer::new(w, config.clone(), *dims, grid)?;
    mac_counters_reset();
    t3_forward(&x, &layer)?;
    let (proj, attn, _) = mac_counters_read();
    Ok((proj, attn))
}
