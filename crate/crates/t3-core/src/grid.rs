//! Multi-scale disjoint tilings of the T×H×W token grid and the per-layer
//! hierarchical schedule.
//!
//! A scale partitions the grid into blocks of a fixed window shape
//! `(m_t, m_h, m_w)` with per-axis stride `Δ`. Stride 1 gives contiguous
//! blocks; stride `extent/m` gives maximally dilated blocks whose members
//! uniformly span the axis. Every voxel belongs to exactly one block per
//! scale.

use serde::{Deserialize, Serialize};

use crate::error::{Result, T3Error};

/// Token grid extents along time, height, and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(T3Error::Plan(format!("grid extents must be >= 1, got ({t},{h},{w})")));
        }
        Ok(GridDims { t, h, w })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// Total token count L = T·H·W.
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major voxel index: t·H·W + h·W + w.
    pub fn voxel_index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

/// Tokens per window along each axis; `L_b = m_t·m_h·m_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub m_t: usize,
    pub m_h: usize,
    pub m_w: usize,
}

impl WindowShape {
    pub fn new(m_t: usize, m_h: usize, m_w: usize) -> Self {
        WindowShape { m_t, m_h, m_w }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.m_t, self.m_h, self.m_w]
    }

    /// Tokens per block.
    pub fn len(&self) -> usize {
        self.m_t * self.m_h * self.m_w
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-axis stride (Δt, Δh, Δw) between consecutive members of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stride {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Stride {
    pub const UNIT: Stride = Stride { t: 1, h: 1, w: 1 };

    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Stride { t, h, w }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

const AXIS_NAMES: [&str; 3] = ["t", "h", "w"];

/// One scale's disjoint tiling of the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePlan {
    pub scale_index: usize,
    pub window: WindowShape,
    pub stride: Stride,
    /// Blocks per axis, n_a = extent_a / m_a.
    pub block_counts: [usize; 3],
    /// Block id (lexicographic over axis block ids) -> member voxel indices,
    /// lexicographic in (t, h, w) member order.
    pub blocks: Vec<Vec<usize>>,
    /// Voxel index -> owning block id.
    pub voxel_to_block: Vec<usize>,
}

impl ScalePlan {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_len(&self) -> usize {
        self.window.len()
    }
}

/// Member positions of each block along one axis.
///
/// Positions tile into super-cells of length `m·Δ`; within a super-cell,
/// position `p` joins the interleaved residue `p mod Δ`. Block id along the
/// axis is `cell·Δ + residue`, members are `cell·mΔ + residue + j·Δ`.
fn axis_blocks(extent: usize, m: usize, delta: usize) -> Vec<Vec<usize>> {
    let cell = m * delta;
    let n_cells = extent / cell;
    let n_blocks = extent / m;
    let mut out = vec![Vec::with_capacity(m); n_blocks];
    for c in 0..n_cells {
        for r in 0..delta {
            let b = c * delta + r;
            for j in 0..m {
                out[b].push(c * cell + r + j * delta);
            }
        }
    }
    out
}

/// Builds the disjoint tiling for one scale.
pub fn build_scale_plan(
    dims: GridDims,
    window: WindowShape,
    stride: Stride,
    scale_index: usize,
) -> Result<ScalePlan> {
    let extents = dims.extents();
    let ms = window.extents();
    let ds = stride.extents();
    for axis in 0..3 {
        let (e, m, d) = (extents[axis], ms[axis], ds[axis]);
        if m == 0 || d == 0 {
            return Err(T3Error::Plan(format!(
                "axis {}: window and stride must be >= 1 (m={m}, stride={d})",
                AXIS_NAMES[axis]
            )));
        }
        if m > e {
            return Err(T3Error::Plan(format!(
                "axis {}: window {m} exceeds extent {e}",
                AXIS_NAMES[axis]
            )));
        }
        if e % (m * d) != 0 {
            return Err(T3Error::Plan(format!(
                "axis {}: window*stride {}*{} does not divide extent {e}",
                AXIS_NAMES[axis], m, d
            )));
        }
    }

    let tb = axis_blocks(dims.t, window.m_t, stride.t);
    let hb = axis_blocks(dims.h, window.m_h, stride.h);
    let wb = axis_blocks(dims.w, window.m_w, stride.w);
    let block_counts = [tb.len(), hb.len(), wb.len()];

    let mut blocks = Vec::with_capacity(tb.len() * hb.len() * wb.len());
    for bt in &tb {
        for bh in &hb {
            for bw in &wb {
                let mut members = Vec::with_capacity(window.len());
                for &t in bt {
                    for &h in bh {
                        for &w in bw {
                            members.push(dims.voxel_index(t, h, w));
                        }
                    }
                }
                blocks.push(members);
            }
        }
    }

    let mut voxel_to_block = vec![usize::MAX; dims.len()];
    for (bid, members) in blocks.iter().enumerate() {
        for &v in members {
            voxel_to_block[v] = bid;
        }
    }

    Ok(ScalePlan {
        scale_index,
        window,
        stride,
        block_counts,
        blocks,
        voxel_to_block,
    })
}

/// A tiling defect found by [`validate_tiling`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TilingViolation {
    /// A voxel not covered by any block.
    Coverage { voxel: usize },
    /// A voxel appearing in more than one block (or twice in one).
    Multiplicity { voxel: usize, blocks: (usize, usize) },
    /// A block whose member count differs from L_b.
    BlockSize { block: usize, expected: usize, got: usize },
}

/// Checks that every voxel appears in exactly one block and every block has
/// exactly L_b members. Returns the first violation found, if any.
pub fn validate_tiling(plan: &ScalePlan, dims: GridDims) -> Option<TilingViolation> {
    let expected = plan.window.len();
    for (bid, members) in plan.blocks.iter().enumerate() {
        if members.len() != expected {
            return Some(TilingViolation::BlockSize {
                block: bid,
                expected,
                got: members.len(),
            });
        }
    }
    let mut owner = vec![usize::MAX; dims.len()];
    for (bid, members) in plan.blocks.iter().enumerate() {
        for &v in members {
            if v >= dims.len() {
                return Some(TilingViolation::Coverage { voxel: v });
            }
            if owner[v] != usize::MAX {
                return Some(TilingViolation::Multiplicity {
                    voxel: v,
                    blocks: (owner[v], bid),
                });
            }
            owner[v] = bid;
        }
    }
    owner
        .iter()
        .position(|&b| b == usize::MAX)
        .map(|voxel| TilingViolation::Coverage { voxel })
}

/// Boundary-scale strides: the finest scale is voxel-adjacent (stride 1),
/// the coarsest uses strides that evenly cover the whole extent
/// (`m·Δ = extent`). Intermediate strides for S > 2 are geometric between
/// the endpoints, snapped per axis to the nearest valid divisor.
pub fn boundary_scale_strides(
    dims: GridDims,
    window: WindowShape,
    scale_count: usize,
) -> Result<Vec<Stride>> {
    if scale_count == 0 {
        return Err(T3Error::Plan("scale count must be >= 1".into()));
    }
    let extents = dims.extents();
    let ms = window.extents();
    let mut max_stride = [0usize; 3];
    for axis in 0..3 {
        if ms[axis] == 0 || extents[axis] % ms[axis] != 0 {
            return Err(T3Error::Plan(format!(
                "axis {}: window {} does not divide extent {}",
                AXIS_NAMES[axis], ms[axis], extents[axis]
            )));
        }
        max_stride[axis] = extents[axis] / ms[axis];
    }

    if scale_count == 1 {
        if max_stride != [1, 1, 1] {
            return Err(T3Error::Plan(
                "a single scale must span the whole grid (window = dims)".into(),
            ));
        }
        return Ok(vec![Stride::UNIT]);
    }

    let mut strides = Vec::with_capacity(scale_count);
    strides.push(Stride::UNIT);
    for s in 1..scale_count - 1 {
        let frac = s as f64 / (scale_count - 1) as f64;
        let mut mid = [1usize; 3];
        for axis in 0..3 {
            mid[axis] = nearest_divisor_geometric(max_stride[axis], frac);
        }
        strides.push(Stride::new(mid[0], mid[1], mid[2]));
    }
    strides.push(Stride::new(max_stride[0], max_stride[1], max_stride[2]));
    Ok(strides)
}

/// Divisor of `n` closest (in log space) to `n^frac`; ties pick the smaller.
fn nearest_divisor_geometric(n: usize, frac: f64) -> usize {
    let target = (n as f64).powf(frac);
    let mut best = 1usize;
    let mut best_dist = f64::INFINITY;
    for d in 1..=n {
        if n % d != 0 {
            continue;
        }
        let dist = ((d as f64).ln() - target.ln()).abs();
        if dist + 1e-12 < best_dist {
            best = d;
            best_dist = dist;
        }
    }
    best
}

/// Which axis, if any, a layer leaves unpartitioned (n = 1), giving full
/// attention along it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AxisPreserve {
    #[default]
    #[serde(rename = "none")]
    None,
    /// n_t = 1: windows span the full time extent.
    #[serde(rename = "t")]
    Time,
    /// n_h = n_w = 1: windows span the full spatial extents.
    #[serde(rename = "hw")]
    Space,
}

/// One layer's set of scale plans sharing a single window shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub scales: Vec<ScalePlan>,
    /// ω_s per scale; defaults to 1/S.
    pub scale_weights: Vec<f64>,
    pub axis_preserving: AxisPreserve,
}

impl LayerConfig {
    pub fn new(
        scales: Vec<ScalePlan>,
        scale_weights: Option<Vec<f64>>,
        axis_preserving: AxisPreserve,
        dims: GridDims,
    ) -> Result<Self> {
        if scales.is_empty() {
            return Err(T3Error::Plan("layer config needs at least one scale".into()));
        }
        let window = scales[0].window;
        let s_count = scales.len();
        for (i, plan) in scales.iter().enumerate() {
            if plan.window != window {
                return Err(T3Error::Plan(format!(
                    "scale {i} window {:?} differs from shared window {:?}",
                    plan.window, window
                )));
            }
        }
        if scales[0].stride != Stride::UNIT {
            return Err(T3Error::Plan(format!(
                "finest scale must be voxel-adjacent (stride 1), got {:?}",
                scales[0].stride
            )));
        }
        let last = &scales[s_count - 1];
        let max = [dims.t / window.m_t, dims.h / window.m_h, dims.w / window.m_w];
        if last.stride.extents() != max {
            return Err(T3Error::Plan(format!(
                "coarsest scale stride {:?} must evenly cover the grid (expected {:?})",
                last.stride, max
            )));
        }
        let weights = match scale_weights {
            Some(w) => {
                if w.len() != s_count {
                    return Err(T3Error::Plan(format!(
                        "{} scale weights for {} scales",
                        w.len(),
                        s_count
                    )));
                }
                if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(T3Error::Plan("scale weights must be finite and >= 0".into()));
                }
                if w.iter().sum::<f64>() <= 0.0 {
                    return Err(T3Error::Plan("scale weights must not all be zero".into()));
                }
                w
            }
            None => vec![1.0 / s_count as f64; s_count],
        };
        Ok(LayerConfig {
            scales,
            scale_weights: weights,
            axis_preserving,
        })
    }

    pub fn scale_count(&self) -> usize {
        self.scales.len()
    }

    pub fn window(&self) -> WindowShape {
        self.scales[0].window
    }

    /// Normalization Z = Σ_Ω ω_s; the same for every voxel since each scale
    /// contributes exactly one block.
    pub fn normalization(&self) -> f64 {
        self.scale_weights.iter().sum()
    }
}

/// Membership Ω(t,h,w): the (scale, block) pairs containing the voxel.
pub fn membership(
    dims: GridDims,
    config: &LayerConfig,
    voxel: (usize, usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let (t, h, w) = voxel;
    if t >= dims.t || h >= dims.h || w >= dims.w {
        return Err(T3Error::Index(format!(
            "voxel ({t},{h},{w}) out of range for grid ({},{},{})",
            dims.t, dims.h, dims.w
        )));
    }
    let idx = dims.voxel_index(t, h, w);
    Ok(config
        .scales
        .iter()
        .map(|plan| (plan.scale_index, plan.voxel_to_block[idx]))
        .collect())
}

/// Stride selection for one group slot of the schedule blueprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrideSpec {
    /// The literal string "boundary": derive strides from the boundary rule.
    Named(String),
    /// Explicit per-scale strides.
    Explicit(Vec<[usize; 3]>),
}

impl Default for StrideSpec {
    fn default() -> Self {
        StrideSpec::Named("boundary".into())
    }
}

/// One slot of the 5-layer group: everything needed to resolve a
/// [`LayerConfig`] against concrete grid dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBlueprint {
    /// Window shape [m_t, m_h, m_w]; axis-preserving slots override the
    /// preserved axes with the full grid extent at resolve time.
    pub window: [usize; 3],
    pub scales: usize,
    #[serde(default)]
    pub strides: StrideSpec,
    #[serde(default)]
    pub axis_preserving: AxisPreserve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_weights: Option<Vec<f64>>,
}

impl LayerBlueprint {
    pub fn resolve(&self, dims: GridDims) -> Result<LayerConfig> {
        let [mut m_t, mut m_h, mut m_w] = self.window;
        match self.axis_preserving {
            AxisPreserve::None => {}
            AxisPreserve::Time => m_t = dims.t,
            AxisPreserve::Space => {
                m_h = dims.h;
                m_w = dims.w;
            }
        }
        let window = WindowShape::new(m_t, m_h, m_w);
        let strides = match &self.strides {
            StrideSpec::Named(name) if name == "boundary" => {
                boundary_scale_strides(dims, window, self.scales)?
            }
            StrideSpec::Named(other) => {
                return Err(T3Error::Config(format!(
                    "unknown stride spec {other:?} (expected \"boundary\" or explicit list)"
                )))
            }
            StrideSpec::Explicit(list) => {
                if list.len() != self.scales {
                    return Err(T3Error::Config(format!(
                        "{} explicit strides for {} scales",
                        list.len(),
                        self.scales
                    )));
                }
                list.iter().map(|&[t, h, w]| Stride::new(t, h, w)).collect()
            }
        };
        let scales = strides
            .into_iter()
            .enumerate()
            .map(|(i, stride)| build_scale_plan(dims, window, stride, i + 1))
            .collect::<Result<Vec<_>>>()?;
        LayerConfig::new(scales, self.scale_weights.clone(), self.axis_preserving, dims)
    }
}

/// Per-layer configs cycled in groups across the model depth. The resolved
/// group is stored once; layer `i` uses slot `i mod group_size`.
#[derive(Debug, Clone)]
pub struct LayerSchedule {
    pub depth: usize,
    pub group: Vec<LayerConfig>,
    pub group_size: usize,
}

impl LayerSchedule {
    pub fn config(&self, layer: usize) -> &LayerConfig {
        &self.group[layer % self.group_size]
    }

    pub fn iter_configs(&self) -> impl Iterator<Item = &LayerConfig> {
        (0..self.depth).map(|i| self.config(i))
    }
}

/// Resolves `group` against `dims` and cycles it across `depth` layers.
pub fn build_layer_schedule(
    depth: usize,
    group: &[LayerBlueprint],
    dims: GridDims,
) -> Result<LayerSchedule> {
    if group.is_empty() {
        return Err(T3Error::Plan("schedule group must not be empty".into()));
    }
    if depth == 0 {
        return Err(T3Error::Plan("schedule depth must be >= 1".into()));
    }
    let group_size = group.len();
    let resolved: Vec<LayerConfig> = group
        .iter()
        .enumerate()
        .map(|(i, bp)| {
            bp.resolve(dims).map_err(|e| {
                T3Error::Plan(format!("group slot {i} invalid for grid {dims:?}: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerSchedule {
        depth,
        group: resolved,
        group_size,
    })
}

/// The default 5-layer group used when no blueprint file is supplied:
/// close/remote pair, the same with halved per-axis block counts, an
/// axis-preserving time layer, the close/remote pair again, and an
/// axis-preserving space layer.
pub fn default_group(window: [usize; 3]) -> Vec<LayerBlueprint> {
    let base = LayerBlueprint {
        window,
        scales: 2,
        strides: StrideSpec::default(),
        axis_preserving: AxisPreserve::None,
        scale_weights: None,
    };
    let doubled = LayerBlueprint {
        window: [window[0] * 2, window[1] * 2, window[2] * 2],
        ..base.clone()
    };
    let time = LayerBlueprint {
        axis_preserving: AxisPreserve::Time,
        ..base.clone()
    };
    let space = LayerBlueprint {
        axis_preserving: AxisPreserve::Space,
        ..base.clone()
    };
    vec![base.clone(), doubled, time, base, space]
}
