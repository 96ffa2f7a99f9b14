//! Experiment configuration files.
//!
//! A config names a scenario preset and overrides any subset of its fields:
//!
//! ```toml
//! preset = "narma-wdm4"
//! workers = 2
//!
//! [scenario]
//! seeds = [0, 1, 2]
//! total_power_dbm = 3.0
//!
//! [scenario.feedback]
//! delta_phi_rad = 3.14159
//!
//! [grid]
//! preset = "region-map"
//! ```
//!
//! Overrides are merged into the preset table key by key, then the result is
//! deserialized with unknown keys rejected.

use anyhow::{bail, Context, Result};
use ringtdrc::sweep::{Axis, Scenario, SweepGrid};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario preset the overrides apply to.
    pub preset: Option<String>,
    #[serde(default)]
    pub scenario: toml::Table,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    pub workers: Option<usize>,
    pub seed_base: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub preset: Option<String>,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Preset (command line wins over the file) with the overrides applied.
    pub fn scenario(&self, preset_flag: Option<&str>, seed_base: Option<u64>) -> Result<Scenario> {
        let name = preset_flag.or(self.preset.as_deref()).unwrap_or("narma-single");
        let base = Scenario::preset(name)?;
        let mut table = toml::Table::try_from(&base).context("cannot serialise the preset")?;
        merge(&mut table, &self.scenario);
        let mut sc: Scenario = toml::Value::Table(table).try_into().context("scenario overrides")?;
        if let Some(k) = seed_base.or(self.seed_base) {
            sc.seeds = (k..k + sc.seeds.len() as u64).collect();
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn grid(&self, preset_flag: Option<&str>) -> Result<SweepGrid> {
        let from_file = self.grid.as_ref();
        let grid = match (preset_flag, from_file) {
            (Some(name), _) => SweepGrid::preset(name)?,
            (None, Some(g)) if !g.axes.is_empty() => {
                if g.preset.is_some() {
                    bail!("[grid] takes either `preset` or `axes`, not both");
                }
                SweepGrid { axes: g.axes.clone() }
            }
            (None, Some(GridConfig { preset: Some(name), .. })) => SweepGrid::preset(name)?,
            _ => bail!("no grid given; use --grid or a [grid] table"),
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Recursive table merge; scalars and arrays in `over` replace those in `base`.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
