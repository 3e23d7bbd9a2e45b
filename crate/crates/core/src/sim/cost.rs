use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ptc::invocations;
use super::schedule::engine_cycles;
use super::splitter::operating_rows;
use super::{EnergyParams, EngineConfig, Result, SimError, ELEMENT_BYTES, INDEX_ENTRY_BYTES};
use crate::alloc::{max_rank, psi, CompressionPlan, LayerPlan};
use crate::decompose::kept_columns;
use crate::model::vit::{block_op_id, BLOCK_OPS};
use crate::store::{BlockGroup, LayerKind, LayerSpec, ModelGraph};

/// Energy components, in the order used by CSV output.
pub const COMPONENTS: [&str; 6] = [
    "data_movement",
    "weight_encode",
    "input_encode",
    "readout",
    "laser",
    "index_overhead",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub data_movement: f64,
    pub weight_encode: f64,
    pub input_encode: f64,
    pub readout: f64,
    pub laser: f64,
    pub index_overhead: f64,
}

impl EnergyBreakdown {
    pub fn values(&self) -> [f64; 6] {
        [
            self.data_movement,
            self.weight_encode,
            self.input_encode,
            self.readout,
            self.laser,
            self.index_overhead,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    fn accumulate(&mut self, o: &Self) {
        self.data_movement += o.data_movement;
        self.weight_encode += o.weight_encode;
        self.input_encode += o.input_encode;
        self.readout += o.readout;
        self.laser += o.laser;
        self.index_overhead += o.index_overhead;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub energy: EnergyBreakdown,
    pub dense_invocations: u64,
    pub sparse_invocations: u64,
    pub dense_cycles: u64,
    pub sparse_cycles: u64,
    /// `max(dense_cycles, sparse_cycles)`: the engines run side by side.
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub energy: EnergyBreakdown,
    /// Picojoules.
    pub total_energy: f64,
    pub cycles: u64,
    pub latency_s: f64,
    /// Picojoule-seconds.
    pub edp: f64,
    pub batch_tokens: usize,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `layer,component,energy_pj` row per layer and component.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component,energy_pj\n");
        for l in &self.layers {
            for (name, v) in COMPONENTS.iter().zip(l.energy.values()) {
                out.push_str(&format!("{},{},{}\n", l.id, name, v));
            }
        }
        out
    }
}

/// Total energy times latency.
pub fn edp(report: &CostReport) -> f64 {
    report.total_energy * report.latency_s
}

/// Laser energy of an engine that keeps `active_rows` rows of each of its
/// `cores` cores lit at `n_lambda` wavelengths for `cycles` cycles.
pub fn laser_energy(
    cycles: u64,
    cores: usize,
    n_lambda: usize,
    active_rows: usize,
    e: &EnergyParams,
) -> f64 {
    (cycles as f64) * (cores * n_lambda * active_rows) as f64 * e.laser_per_channel_cycle
}

/// Shape of the work one layer puts on the engines.
struct Workload<'a> {
    id: &'a str,
    rows: usize,
    cols: usize,
    /// `None` runs the dense weight.
    low_rank: Option<usize>,
    d: usize,
    g: usize,
}

fn layer_cost(
    w: &Workload,
    hw: &EngineConfig,
    e: &EnergyParams,
    tokens: usize,
) -> Result<LayerCost> {
    let dense = &hw.dense;
    let dp = dense.ptc;
    let t = tokens as f64;
    let mut en = EnergyBreakdown::default();

    // Dense engine: one pass for W, or B·X then A·(B·X).
    let passes: Vec<(usize, usize)> = match w.low_rank {
        None => vec![(w.rows, w.cols)],
        Some(r) => vec![(r, w.cols), (w.rows, r)],
    };
    let broadcast = if hw.broadcast_enabled {
        dense.tiles as f64
    } else {
        1.0
    };
    let share = |cores_per_tile: usize| {
        if hw.adc_sharing_enabled {
            cores_per_tile as f64
        } else {
            1.0
        }
    };
    let (mut dense_inv, mut dense_cycles) = (0u64, 0u64);
    for &(rows, inner) in &passes {
        let i = invocations(rows, inner, tokens, &dp);
        let fi = i as f64;
        en.weight_encode += fi * (dp.n_h * dp.n_lambda) as f64 * (e.dac_weight + e.modulation);
        en.input_encode +=
            fi * (dp.n_lambda * dp.n_v) as f64 * (e.dac_input + e.modulation) / broadcast;
        en.readout += fi * (dp.n_h * dp.n_v) as f64 * (e.adc + e.tia) / share(dense.cores_per_tile);
        en.data_movement += (rows * inner) as f64 * ELEMENT_BYTES as f64 * e.dram_per_byte;
        en.data_movement += (inner + rows) as f64 * t * ELEMENT_BYTES as f64 * e.sram_per_byte;
        dense_inv += i;
        dense_cycles += engine_cycles(i, dense.cores());
    }
    en.laser += laser_energy(dense_cycles, dense.cores(), dp.n_lambda, dp.n_h, e);

    // Sparse engine: condensed g x d chunks on gated rows.
    let (mut sparse_inv, mut sparse_cycles) = (0u64, 0u64);
    if w.low_rank.is_some() && w.d > 0 {
        let sp = &hw.sparse;
        let spc = sp.ptc;
        let g = w.g.max(1);
        let chunks = w.rows.div_ceil(g);
        let height = if hw.gating_enabled {
            operating_rows(g.min(spc.n_v), &spc)?
        } else {
            spc.n_v
        };
        let i =
            (chunks * g.div_ceil(spc.n_v) * w.d.div_ceil(spc.n_lambda) * tokens.div_ceil(spc.n_v))
                as u64;
        let fi = i as f64;
        en.weight_encode += fi * (height * spc.n_lambda) as f64 * (e.dac_weight + e.modulation);
        en.input_encode += fi * (spc.n_lambda * spc.n_v) as f64 * (e.dac_input + e.modulation);
        en.readout += fi * (height * spc.n_v) as f64 * (e.adc + e.tia) / share(sp.cores_per_tile);
        let gathered = (chunks * w.d) as f64 * t;
        en.data_movement += (w.rows * w.d) as f64 * ELEMENT_BYTES as f64 * e.dram_per_byte;
        en.data_movement += gathered * ELEMENT_BYTES as f64 * e.sram_per_byte;
        en.index_overhead += (chunks * w.d) as f64 * INDEX_ENTRY_BYTES as f64 * e.dram_per_byte;
        en.index_overhead += gathered * e.index_fetch;
        sparse_inv = i;
        sparse_cycles = engine_cycles(i, sp.cores());
        en.laser += laser_energy(sparse_cycles, sp.cores(), spc.n_lambda, height, e);
    }

    Ok(LayerCost {
        id: w.id.to_string(),
        energy: en,
        dense_invocations: dense_inv,
        sparse_invocations: sparse_inv,
        dense_cycles,
        sparse_cycles,
        cycles: dense_cycles.max(sparse_cycles),
    })
}

/// Cost of running every compressible layer of `graph` once over
/// `batch_tokens` tokens. An empty plan simulates the dense weights.
pub fn simulate(
    plan: &CompressionPlan,
    graph: &ModelGraph,
    engines: &EngineConfig,
    energy: &EnergyParams,
    batch_tokens: usize,
) -> Result<CostReport> {
    engines.validate()?;
    energy.validate()?;
    if batch_tokens == 0 {
        return Err(SimError::Config("batch_tokens must be >= 1".into()));
    }
    let by_id: BTreeMap<&str, &LayerPlan> =
        plan.layers.iter().map(|l| (l.id.as_str(), l)).collect();
    let targets: Vec<&LayerSpec> = graph.compressible().collect();
    if let Some(extra) = plan
        .layers
        .iter()
        .find(|l| !targets.iter().any(|s| s.id == l.id))
    {
        return Err(SimError::Plan {
            layer: extra.id.clone(),
            msg: "not a compressible layer of the model".into(),
        });
    }

    let mut layers = Vec::with_capacity(targets.len());
    for spec in targets {
        let work = if plan.layers.is_empty() {
            Workload {
                id: &spec.id,
                rows: spec.rows,
                cols: spec.cols,
                low_rank: None,
                d: 0,
                g: 1,
            }
        } else {
            let lp = by_id.get(spec.id.as_str()).ok_or_else(|| SimError::Plan {
                layer: spec.id.clone(),
                msg: "missing from the compression plan".into(),
            })?;
            if (lp.rows, lp.cols) != (spec.rows, spec.cols) {
                return Err(SimError::Plan {
                    layer: spec.id.clone(),
                    msg: format!(
                        "plan shape {}x{} differs from model {}x{}",
                        lp.rows, lp.cols, spec.rows, spec.cols
                    ),
                });
            }
            if lp.r == 0 || lp.g == 0 {
                return Err(SimError::Plan {
                    layer: spec.id.clone(),
                    msg: "rank and granularity must be >= 1".into(),
                });
            }
            Workload {
                id: &spec.id,
                rows: spec.rows,
                cols: spec.cols,
                low_rank: Some(lp.r),
                d: lp.d,
                g: lp.g,
            }
        };
        layers.push(layer_cost(&work, engines, energy, batch_tokens)?);
    }

    let mut total = EnergyBreakdown::default();
    for l in &layers {
        total.accumulate(&l.energy);
    }
    let cycles: u64 = layers.iter().map(|l| l.cycles).sum();
    let latency_s = cycles as f64 / (energy.clock_ghz * 1e9);
    let total_energy = total.total();
    Ok(CostReport {
        energy: total,
        total_energy,
        cycles,
        latency_s,
        edp: total_energy * latency_s,
        batch_tokens,
        layers,
    })
}

/// Side-by-side numbers; every ratio is `baseline / compressed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: CostReport,
    pub compressed: CostReport,
    pub energy_ratio: f64,
    pub latency_ratio: f64,
    pub edp_ratio: f64,
}

impl Comparison {
    pub fn new(baseline: CostReport, compressed: CostReport) -> Self {
        Self {
            energy_ratio: baseline.total_energy / compressed.total_energy,
            latency_ratio: baseline.latency_s / compressed.latency_s,
            edp_ratio: baseline.edp / compressed.edp,
            baseline,
            compressed,
        }
    }

    /// Plain-text table of the component totals and ratios.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16}{:>18}{:>18}{:>10}\n",
            "component", "baseline_pj", "compressed_pj", "ratio"
        );
        let rows = COMPONENTS.iter().zip(
            self.baseline
                .energy
                .values()
                .into_iter()
                .zip(self.compressed.energy.values()),
        );
        for (name, (b, c)) in rows {
            let ratio = if c > 0.0 {
                format!("{:.3}", b / c)
            } else {
                "-".into()
            };
            out.push_str(&format!("{name:<16}{b:>18.1}{c:>18.1}{ratio:>10}\n"));
        }
        out.push_str(&format!(
            "{:<16}{:>18.1}{:>18.1}{:>10.3}\n",
            "total", self.baseline.total_energy, self.compressed.total_energy, self.energy_ratio
        ));
        out.push_str(&format!(
            "{:<16}{:>18}{:>18}{:>10.3}\n",
            "cycles", self.baseline.cycles, self.compressed.cycles, self.latency_ratio
        ));
        out.push_str(&format!(
            "{:<16}{:>18.4e}{:>18.4e}{:>10.3}\n",
            "edp_pj_s", self.baseline.edp, self.compressed.edp, self.edp_ratio
        ));
        out
    }
}

/// Simulate the dense baseline on `baseline_hw` and the plan on `hw`.
pub fn compare(
    plan: &CompressionPlan,
    graph: &ModelGraph,
    hw: &EngineConfig,
    baseline_hw: &EngineConfig,
    energy: &EnergyParams,
    batch_tokens: usize,
) -> Result<Comparison> {
    let empty = CompressionPlan {
        layers: vec![],
        ..plan.clone()
    };
    let base = simulate(&empty, graph, baseline_hw, energy, batch_tokens)?;
    let comp = simulate(plan, graph, hw, energy, batch_tokens)?;
    Ok(Comparison::new(base, comp))
}

/// Layer graph of a ViT-Base-shaped encoder: hidden 768, 12 blocks, MLP 3072,
/// with a 16x16x3 patch embedding and a 1000-class head.
pub fn vit_base_graph() -> ModelGraph {
    let (h, blocks, mlp) = (768, 12, 3072);
    let mut layers = vec![LayerSpec::new("embed", LayerKind::Embed, h, 768)];
    let mut groups = Vec::new();
    for b in 0..blocks {
        for (name, kind, rows, cols) in [
            ("attn.q", LayerKind::AttnQ, h, h),
            ("attn.k", LayerKind::AttnK, h, h),
            ("attn.v", LayerKind::AttnV, h, h),
            ("attn.o", LayerKind::AttnO, h, h),
            ("mlp.fc1", LayerKind::MlpFc1, mlp, h),
            ("mlp.fc2", LayerKind::MlpFc2, h, mlp),
        ] {
            layers.push(LayerSpec::new(block_op_id(b, name), kind, rows, cols));
        }
        groups.push(BlockGroup {
            attn: BLOCK_OPS[..4].iter().map(|n| block_op_id(b, n)).collect(),
            mlp: BLOCK_OPS[4..].iter().map(|n| block_op_id(b, n)).collect(),
        });
    }
    layers.push(LayerSpec::new("head", LayerKind::Head, 1000, h));
    ModelGraph {
        layers,
        blocks: groups,
        hidden_size: h,
        meta: BTreeMap::from([("arch".to_string(), "vit_base_shape".to_string())]),
    }
}

/// Same rank fraction everywhere: each compressible layer gets the largest
/// rank with `r(m+n) + m·d <= (1-alpha)·m·n` at sparse ratio `s`.
pub fn uniform_plan(graph: &ModelGraph, alpha: f64, s: f64, g: usize) -> Result<CompressionPlan> {
    let mut layers = Vec::new();
    for spec in graph.compressible() {
        let (m, n) = (spec.rows, spec.cols);
        let d = kept_columns(n, s);
        let allowed = ((1.0 - alpha) * (m * n) as f64).floor() as usize;
        let r = allowed.saturating_sub(m * d) / (m + n);
        if r == 0 {
            return Err(SimError::Plan {
                layer: spec.id.clone(),
                msg: format!("no rank fits alpha {alpha} with sparse ratio {s}"),
            });
        }
        let r = r.min(max_rank(m, n));
        layers.push(LayerPlan {
            id: spec.id.clone(),
            rows: m,
            cols: n,
            r,
            d,
            g,
            params: (r * (m + n) + m * d) as u64,
            error: 0.0,
            index_digest: None,
        });
    }
    let mut plan = CompressionPlan {
        alpha,
        psi_achieved: 0.0,
        iterations: 0,
        original_params: layers.iter().map(|l| (l.rows * l.cols) as u64).sum(),
        compressed_params: layers.iter().map(|l| l.params).sum(),
        index_entries: layers.iter().map(LayerPlan::index_entries).sum(),
        layers,
        wall_time: None,
    };
    plan.psi_achieved = psi(&plan);
    Ok(plan)
}
