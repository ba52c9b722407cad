//! Run configuration for the CLI: a JSON file with strict (unknown-key
//! rejecting) parsing plus built-in defaults for every section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, T3Error};
use crate::grid::{build_layer_schedule, default_group, GridDims, LayerBlueprint, LayerSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::str::FromStr for Dtype {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: 64,
            heads: 4,
            ffn_width: 256,
            depth: 5,
        }
    }
}

/// One resolution row of the cost table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostResolution {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Shared window for the S=2 close/remote schedule used on this row.
    pub window: [usize; 3],
    #[serde(default)]
    pub rest_params: u128,
    #[serde(default)]
    pub rest_macs: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub resolutions: Vec<CostResolution>,
}

impl Default for CostSection {
    fn default() -> Self {
        // windows chosen per grid divisibility; the published table does not
        // disclose its window configurations
        let row = |name: &str, height, width, window| CostResolution {
            name: name.into(),
            height,
            width,
            frames: 81,
            window,
            rest_params: 0,
            rest_macs: 0,
        };
        CostSection {
            resolutions: vec![
                row("480x832", 480, 832, [7, 10, 13]),
                row("720x1280", 720, 1280, [7, 15, 16]),
                row("1088x1920", 1088, 1920, [7, 17, 24]),
                row("2176x3840", 2176, 3840, [7, 34, 40]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Median-of-N runs per mode.
    pub runs: usize,
    /// Full attention is skipped above this token count.
    pub full_cap: usize,
    /// Bench-specific grid; the main grid is sized for the oracle suites
    /// and is too small for a meaningful timing comparison.
    pub grid: [usize; 3],
    /// Shared window for the S=2 bench schedule.
    pub window: [usize; 3],
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            runs: 5,
            full_cap: 16384,
            grid: [8, 32, 32],
            window: [2, 8, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub pool: usize,
    /// "full_to_t3" or "t3_to_full".
    pub reverse: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            steps: 100,
            learning_rate: 4.0,
            pool: 4,
            reverse: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: [usize; 3],
    pub model: ModelSection,
    /// Base window for the default 5-layer group.
    pub window: [usize; 3],
    /// Explicit blueprint group; overrides the default when present.
    pub group: Option<Vec<LayerBlueprint>>,
    pub seed: u64,
    pub dtype: Dtype,
    pub cost: CostSection,
    pub bench: BenchSection,
    pub distill: DistillSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: [4, 8, 8],
            model: ModelSection::default(),
            window: [2, 4, 4],
            group: None,
            seed: 0,
            dtype: Dtype::F32,
            cost: CostSection::default(),
            bench: BenchSection::default(),
            distill: DistillSection::default(),
        }
    }
}

/// Parses a JSON array of layer blueprints (the same schema as the
/// `group` field of [`RunConfig`]).
pub fn parse_blueprint_group(json: &str) -> Result<Vec<LayerBlueprint>> {
    serde_json::from_str(json).map_err(|e| T3Error::Config(format!("blueprint group: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| T3Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| T3Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn grid_dims(&self) -> Result<GridDims> {
        GridDims::new(self.grid[0], self.grid[1], self.grid[2])
    }

    pub fn blueprint_group(&self) -> Vec<LayerBlueprint> {
        self.group.clone().unwrap_or_else(|| default_group(self.window))
    }

    pub fn schedule(&self) -> Result<LayerSchedule> {
        build_layer_schedule(self.model.depth, &self.blueprint_group(), self.grid_dims()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_a_valid_schedule() {
        let config = RunConfig::default();
        let schedule = config.schedule().unwrap();
        assert_eq!(schedule.depth, 5);
        assert_eq!(schedule.group_size, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"grid": [2,2,2], "bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config: RunConfig =
            serde_json::from_str(r#"{"grid": [4, 8, 8], "seed": 7}"#).unwrap();
        assert_eq!(config.grid, [4, 8, 8]);
        assert_eq!(config.seed, 7);
        assert_eq!(config.model.channels, 64);
    }

    #[test]
    fn cost_defaults_are_valid_schedules() {
        let config = RunConfig::default();
        for res in &config.cost.resolutions {
            let spec = crate::cost::LatentSpec::new(res.height, res.width, res.frames);
            let (grid, _) = crate::cost::token_count(&spec).unwrap();
            let bp = LayerBlueprint {
                window: res.window,
                scales: 2,
                strides: crate::grid::StrideSpec::Named("boundary".into()),
                axis_preserving: crate::grid::AxisPreserve::None,
                scale_weights: None,
            };
            bp.resolve(grid).unwrap_or_else(|e| panic!("{}: {e}", res.name));
        }
    }
}
