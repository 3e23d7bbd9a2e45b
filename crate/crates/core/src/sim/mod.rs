//! Analytical cost model of a photonic accelerator with a dense engine for
//! dense and low-rank products and a row-gated sparse engine for condensed
//! structured-sparse products.
//!
//! Energies are in picojoules. The default [`EnergyParams`] are placeholder
//! values that make the relative comparison meaningful; they are not
//! calibrated against any device.

mod cost;
mod ptc;
mod schedule;
mod splitter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{
    compare, edp, laser_energy, simulate, uniform_plan, vit_base_graph, Comparison, CostReport,
    EnergyBreakdown, LayerCost, COMPONENTS,
};
pub use ptc::{
    invocations, ptc_matmul, sparse_tiled_matmul, tile_weight, tiled_matmul, untile, BlockGrid,
    PtcConfig, PtcExecutor,
};
pub use schedule::{engine_cycles, round_robin};
pub use splitter::{operating_rows, plan_splitters, quarter_rows, SplitterPlan, SplitterState};

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid hardware configuration: {0}")]
    Config(String),
    #[error("layer {layer}: {msg}")]
    Plan { layer: String, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Size of one sparse index entry in bytes.
pub const INDEX_ENTRY_BYTES: u64 = 2;
/// Size of one weight or activation element in bytes (8-bit).
pub const ELEMENT_BYTES: u64 = 1;
/// Default token count per simulated layer invocation.
pub const DEFAULT_BATCH_TOKENS: usize = 197;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSpec {
    pub tiles: usize,
    pub cores_per_tile: usize,
    pub ptc: PtcConfig,
}

impl EngineSpec {
    pub fn cores(&self) -> usize {
        self.tiles * self.cores_per_tile
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.tiles == 0 || self.cores_per_tile == 0 {
            return Err(SimError::Config(format!(
                "{name} engine needs at least one tile and core"
            )));
        }
        self.ptc.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub dense: EngineSpec,
    pub sparse: EngineSpec,
    /// One input modulator drives every dense tile.
    pub broadcast_enabled: bool,
    /// Cores of a tile accumulate in analog before one shared ADC/TIA bank.
    pub adc_sharing_enabled: bool,
    /// Unused sparse-engine row quarters are switched dark.
    pub gating_enabled: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dense: EngineSpec {
                tiles: 4,
                cores_per_tile: 2,
                ptc: PtcConfig::square(12, 12),
            },
            sparse: EngineSpec {
                tiles: 3,
                cores_per_tile: 2,
                ptc: PtcConfig::square(8, 12),
            },
            broadcast_enabled: true,
            adc_sharing_enabled: true,
            gating_enabled: true,
        }
    }
}

impl EngineConfig {
    /// Dense-only reference accelerator with two extra dense tiles, matching
    /// the default configuration's area budget.
    pub fn baseline_scaled() -> Self {
        let mut c = Self::default();
        c.dense.tiles += 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.dense.validate("dense")?;
        self.sparse.validate("sparse")?;
        if self.gating_enabled {
            splitter::quarter_rows(&self.sparse.ptc)?;
        }
        Ok(())
    }
}

/// Per-event energies in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    pub dac_weight: f64,
    pub dac_input: f64,
    pub modulation: f64,
    pub adc: f64,
    pub tia: f64,
    pub laser_per_channel_cycle: f64,
    pub sram_per_byte: f64,
    pub dram_per_byte: f64,
    pub index_fetch: f64,
    pub clock_ghz: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            dac_weight: 1.0,
            dac_input: 1.0,
            modulation: 0.5,
            adc: 2.0,
            tia: 0.5,
            laser_per_channel_cycle: 0.2,
            sram_per_byte: 2.0,
            dram_per_byte: 100.0,
            index_fetch: 0.1,
            clock_ghz: 5.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dac_weight,
            self.dac_input,
            self.modulation,
            self.adc,
            self.tia,
            self.laser_per_channel_cycle,
            self.sram_per_byte,
            self.dram_per_byte,
            self.index_fetch,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::Config(
                "energy parameters must be finite and >= 0".into(),
            ));
        }
        if !(self.clock_ghz.is_finite() && self.clock_ghz > 0.0) {
            return Err(SimError::Config(format!(
                "clock {} GHz must be positive",
                self.clock_ghz
            )));
        }
        Ok(())
    }

    /// Every per-event energy multiplied by `k`; the clock is unchanged.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            dac_weight: self.dac_weight * k,
            dac_input: self.dac_input * k,
            modulation: self.modulation * k,
            adc: self.adc * k,
            tia: self.tia * k,
            laser_per_channel_cycle: self.laser_per_channel_cycle * k,
            sram_per_byte: self.sram_per_byte * k,
            dram_per_byte: self.dram_per_byte * k,
            index_fetch: self.index_fetch * k,
            clock_ghz: self.clock_ghz,
        }
    }
}

/// Hardware description read from a JSON config file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub engines: EngineConfig,
    pub energy: EnergyParams,
}
