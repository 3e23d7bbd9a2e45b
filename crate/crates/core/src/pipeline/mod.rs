//! End-to-end commands behind the `lighten` binary. Every command reads its
//! inputs from the paths in [`PipelineConfig`] and writes only under the
//! configured output directory.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AllocatorSettings, DecompositionSettings, HardwareSettings, Paths, PipelineConfig, Targets,
    ToySettings, VerifySettings,
};

use crate::alloc::{
    allocate_ranks, basis_rank, budget_for, prepare_full_rank, psi, AllocConfig, CompressionPlan,
    LayerInput,
};
use crate::decompose::{
    compute_scaling, decompose_layer, layer_error, local_adapt, AdaptConfig, Decomposition,
    ScalingDiag, StructuredSparse,
};
use crate::linalg::Matrix;
use crate::model::{
    block_loss, dataset_from_store, dataset_to_store, evaluate, logit_loss_parts, Dataset,
    LinearOp, Model, ToyViT, VitDims,
};
use crate::par::par_map;
use crate::quant::{evaluate_with_precision, fnv1a, QuantNoiseConfig};
use crate::sim::{self, CostReport, EngineConfig, SimConfig};
use crate::store::{
    self, calibration_from_store, calibration_to_store, collect_calibration, load_model,
    save_model, CalibrationSet, ModelGraph,
};

/// Distillation temperature used for the logit drift metric.
pub const DRIFT_TEMPERATURE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {msg}")]
    Stage { stage: &'static str, msg: String },
    #[error("{0}")]
    Io(String),
}

impl PipelineError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        msg: e.to_string(),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn load_model_f64(path: &Path) -> Result<(Model<f64>, ModelGraph)> {
    require(path, "model")?;
    let (graph, tensors) = load_model(path).map_err(stage("load model"))?;
    let model = Model::from_store(&graph, &tensors).map_err(stage("load model"))?;
    Ok((model, graph))
}

fn load_dataset(path: &Path) -> Result<Dataset<f64>> {
    require(path, "dataset")?;
    let (_, tensors) = store::load(path).map_err(stage("load dataset"))?;
    dataset_from_store(&tensors).map_err(stage("load dataset"))
}

fn load_calibration(path: &Path) -> Result<CalibrationSet<f64>> {
    require(path, "calibration")?;
    let (_, tensors) = store::load(path).map_err(stage("load calibration"))?;
    calibration_from_store(&tensors).map_err(stage("load calibration"))
}

/// Hex FNV-1a of the index table, each entry as a little-endian `u32`.
pub fn index_digest<T: crate::Scalar>(sp: &StructuredSparse<T>) -> String {
    let bytes: Vec<u8> = sp
        .chunks
        .iter()
        .flat_map(|c| c.kept_cols.iter())
        .flat_map(|&i| (i as u32).to_le_bytes())
        .collect();
    format!("{:016x}", fnv1a(&bytes))
}

// ---------------------------------------------------------------- gen-toy

#[derive(Debug, Clone, PartialEq)]
pub struct GenToyOutput {
    pub model_path: PathBuf,
    pub data_path: PathBuf,
    pub layers: usize,
}

/// Seeded random toy ViT plus a dataset labelled by the model's own
/// predictions, so the dense model scores 100%.
pub fn gen_toy(cfg: &PipelineConfig) -> Result<GenToyOutput> {
    let t = cfg.toy;
    let dims = VitDims {
        input_dim: t.input_dim,
        hidden: t.hidden,
        heads: t.heads,
        mlp_ratio: t.mlp_ratio,
        blocks: t.blocks,
        classes: t.classes,
        seq_len: t.seq_len,
    };
    if t.samples == 0 {
        return Err(PipelineError::Config("toy.samples must be >= 1".into()));
    }
    let vit = ToyViT::<f64>::random(dims, cfg.seed)
        .map_err(|e| PipelineError::Config(format!("toy: {e}")))?;
    // Round through storage precision so later stages see the same weights.
    let model: Model<f64> = Model::Vit(vit).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6461_7461);
    let inputs = Matrix::from_fn(t.input_dim, t.samples * t.seq_len, |_, _| {
        f64::from(rng.gen_range(-1.0f32..1.0))
    });
    let logits = model.forward(&inputs).map_err(stage("gen-toy"))?.logits;
    let labels = (0..logits.rows())
        .map(|i| crate::model::argmax(logits.row(i)))
        .collect();
    let data = Dataset { inputs, labels };

    let model_path = cfg.output_dir().join("model.lten");
    let data_path = cfg.output_dir().join("data.lten");
    let (graph, tensors) = model.to_store();
    ensure_parent(&model_path)?;
    save_model(&model_path, &graph, &tensors).map_err(stage("gen-toy"))?;
    store::save(&data_path, None, &dataset_to_store(&data)).map_err(stage("gen-toy"))?;
    Ok(GenToyOutput {
        model_path,
        data_path,
        layers: graph.layers.len(),
    })
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateOutput {
    pub path: PathBuf,
    pub layers: usize,
    pub tokens: usize,
}

/// Record the inputs of every compressible layer on the leading
/// `toy.calib_samples` samples of the dataset.
pub fn calibrate(cfg: &PipelineConfig) -> Result<CalibrateOutput> {
    let model_path = cfg.model_path();
    require(&model_path, "model")?;
    let (graph, tensors) = load_model(&model_path).map_err(stage("calibrate"))?;
    let data = load_dataset(&cfg.data_path())?;
    let model: Model<f64> = Model::from_store(&graph, &tensors).map_err(stage("calibrate"))?;
    let samples = cfg.toy.calib_samples.clamp(1, data.labels.len().max(1));
    let tokens = (samples * model.tokens_per_sample()).min(data.inputs.cols());
    let inputs = data.inputs.left_cols(tokens);
    let set = collect_calibration(&graph, &tensors, &inputs).map_err(stage("calibrate"))?;
    let path = cfg.output_dir().join("calib.lten");
    ensure_parent(&path)?;
    store::save(&path, None, &calibration_to_store(&set)).map_err(stage("calibrate"))?;
    Ok(CalibrateOutput {
        path,
        layers: set.activations.len(),
        tokens,
    })
}

// ---------------------------------------------------------------- compress

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub id: String,
    pub r: usize,
    pub d: usize,
    pub error: f64,
    pub adapt_initial: f64,
    pub adapt_final: f64,
    pub adapt_accepted: usize,
}

/// Everything about a compression run that is not part of the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub wall_time_s: f64,
    pub psi: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub basis_rank: usize,
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressOutput {
    pub plan: CompressionPlan,
    pub stats: RunStats,
    pub model_path: PathBuf,
    pub plan_path: PathBuf,
}

impl CompressOutput {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "psi {:.6} (target {}), {} allocation iterations, wall time {:.3}s\n",
            self.plan.psi_achieved, self.plan.alpha, self.plan.iterations, self.stats.wall_time_s
        );
        for l in &self.plan.layers {
            s.push_str(&format!(
                "  {:<20} r={:<4} d={:<4} error={:.6}\n",
                l.id, l.r, l.d, l.error
            ));
        }
        s.push_str(&format!(
            "wrote {}\nwrote {}\n",
            self.model_path.display(),
            self.plan_path.display()
        ));
        s
    }
}

struct LayerJob<'a> {
    id: String,
    w: Matrix<f64>,
    x: &'a Matrix<f64>,
    scaling: ScalingDiag<f64>,
}

/// Calibration, full-rank preparation, rank allocation, per-layer
/// decomposition at the assigned ranks and local adaptation. Writes
/// `compressed.lten`, `plan.json` and `run_stats.json`.
pub fn compress(cfg: &PipelineConfig) -> Result<CompressOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let (model, graph) = load_model_f64(&cfg.model_path())?;
    let calib = load_calibration(&cfg.calibration_path())?;
    let t = cfg.targets;

    let mut jobs = Vec::new();
    for spec in graph.compressible() {
        let op = model
            .ops()
            .into_iter()
            .find(|(id, _)| *id == spec.id)
            .map(|(_, op)| op.clone())
            .ok_or_else(|| PipelineError::Stage {
                stage: "compress",
                msg: format!("layer {} missing from the model", spec.id),
            })?;
        let LinearOp::Dense(w) = op else {
            return Err(PipelineError::Stage {
                stage: "compress",
                msg: format!("layer {} is already compressed", spec.id),
            });
        };
        let x = calib.get(&spec.id).ok_or_else(|| PipelineError::Stage {
            stage: "collect_calibration",
            msg: format!("no calibration activations for layer {}", spec.id),
        })?;
        let scaling = compute_scaling(x).map_err(|e| PipelineError::Stage {
            stage: "compute_scaling",
            msg: format!("layer {}: {e}", spec.id),
        })?;
        jobs.push(LayerJob {
            id: spec.id.clone(),
            w,
            x,
            scaling,
        });
    }

    let inputs: Vec<LayerInput<'_, f64>> = jobs
        .iter()
        .map(|j| LayerInput {
            id: &j.id,
            w: &j.w,
            scaling: &j.scaling,
        })
        .collect();
    let mut state = prepare_full_rank(
        &inputs,
        t.sparse_ratio,
        t.granularity,
        cfg.decomposition.iters,
    )
    .map_err(stage("prepare_full_rank"))?;
    let budget = budget_for(&state, t.alpha).map_err(stage("allocate_ranks"))?;
    let b = basis_rank(
        graph.hidden_size,
        cfg.allocator.ptc_dim,
        cfg.allocator.basis_rank,
    );
    let alloc_cfg = AllocConfig {
        threshold: cfg.allocator.threshold,
        temperature: cfg.allocator.temperature,
        basis_rank: b,
        ..AllocConfig::default()
    };
    let (mut plan, _) =
        allocate_ranks(&mut state, budget, &alloc_cfg).map_err(stage("allocate_ranks"))?;

    let work: Vec<(&LayerJob, usize)> = jobs.iter().zip(plan.layers.iter().map(|l| l.r)).collect();
    let results = par_map(
        &work,
        |(job, r)| -> Result<(Decomposition<f64>, crate::decompose::AdaptReport)> {
            let ctx = |e: crate::decompose::DecomposeError| format!("layer {}: {e}", job.id);
            let dec = decompose_layer(
                &job.w,
                &job.scaling,
                *r,
                t.sparse_ratio,
                t.granularity,
                cfg.decomposition.iters,
            )
            .map_err(|e| PipelineError::Stage {
                stage: "decompose_layer",
                msg: ctx(e),
            })?;
            let adapt = AdaptConfig {
                steps: cfg.decomposition.adapt_steps,
                lr: cfg.decomposition.adapt_lr,
                seed: cfg.seed ^ fnv1a(job.id.as_bytes()),
            };
            local_adapt(&dec, &job.w, job.x, &adapt).map_err(|e| PipelineError::Stage {
                stage: "local_adapt",
                msg: ctx(e),
            })
        },
    );

    let mut compressed = model.clone();
    let mut reports = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let (dec, rep) = res?;
        *compressed.op_mut(&job.id).expect("layer exists") = LinearOp::Compressed(dec);
        reports.push(rep);
    }
    // Errors and digests describe what is stored, at storage precision.
    let compressed: Model<f64> = compressed.cast();
    let ops: BTreeMap<String, &LinearOp<f64>> = compressed.ops().into_iter().collect();
    let mut layer_stats = Vec::new();
    for ((job, lp), rep) in jobs.iter().zip(plan.layers.iter_mut()).zip(&reports) {
        let LinearOp::Compressed(dec) = ops[&job.id] else {
            unreachable!("layer {} was just compressed", job.id)
        };
        lp.error = layer_error(&job.w, &job.scaling, dec).map_err(stage("layer_error"))?;
        lp.index_digest = Some(index_digest(&dec.sparse));
        layer_stats.push(LayerStats {
            id: job.id.clone(),
            r: lp.r,
            d: lp.d,
            error: lp.error,
            adapt_initial: rep.initial_objective,
            adapt_final: rep.final_objective,
            adapt_accepted: rep.accepted_steps,
        });
    }

    let out = cfg.output_dir();
    let model_path = out.join("compressed.lten");
    let plan_path = out.join("plan.json");
    let (cgraph, tensors) = compressed.to_store();
    ensure_parent(&model_path)?;
    save_model(&model_path, &cgraph, &tensors).map_err(stage("write model"))?;
    write(&plan_path, plan.to_json())?;
    let stats = RunStats {
        wall_time_s: start.elapsed().as_secs_f64(),
        psi: plan.psi_achieved,
        alpha: plan.alpha,
        iterations: plan.iterations,
        basis_rank: b,
        layers: layer_stats,
    };
    write(
        &out.join("run_stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;
    plan.wall_time = None;
    Ok(CompressOutput {
        plan,
        stats,
        model_path,
        plan_path,
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub report: CostReport,
    pub comparison: Option<sim::Comparison>,
    pub written: Vec<PathBuf>,
}

impl SimulateOutput {
    pub fn summary(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "total energy {:.4e} pJ, {} cycles, latency {:.4e} s, EDP {:.4e} pJ*s\n",
            r.total_energy, r.cycles, r.latency_s, r.edp
        );
        if let Some(c) = &self.comparison {
            s.push_str(&c.table());
        }
        for p in &self.written {
            s.push_str(&format!("wrote {}\n", p.display()));
        }
        s
    }
}

pub fn load_sim_config(cfg: &PipelineConfig) -> Result<SimConfig> {
    if cfg.hardware.config.is_empty() {
        return Ok(SimConfig::default());
    }
    let path = PathBuf::from(&cfg.hardware.config);
    require(&path, "hardware config")?;
    serde_json::from_str(&read_text(&path)?)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Dense-only reference: the configured dense engine with two extra tiles.
pub fn baseline_engines(hw: &EngineConfig) -> EngineConfig {
    let mut b = *hw;
    b.dense.tiles += 2;
    b
}

/// Cost report for the plan (or the dense model with `baseline`), optionally
/// next to the dense baseline.
pub fn simulate_cmd(
    cfg: &PipelineConfig,
    plan_path: Option<&Path>,
    baseline: bool,
    compare: bool,
) -> Result<SimulateOutput> {
    cfg.validate()?;
    let sc = load_sim_config(cfg)?;
    let model_path = cfg.model_path();
    require(&model_path, "model")?;
    let (graph, _) = load_model(&model_path).map_err(stage("simulate"))?;
    let out = cfg.output_dir();
    let tokens = cfg.hardware.batch_tokens;
    let empty = CompressionPlan {
        alpha: 0.0,
        psi_achieved: 0.0,
        iterations: 0,
        original_params: 0,
        compressed_params: 0,
        index_entries: 0,
        layers: vec![],
        wall_time: None,
    };
    let mut written = Vec::new();
    let mut emit = |name: &str, report: &CostReport| -> Result<()> {
        let j = out.join(format!("{name}.json"));
        let c = out.join(format!("{name}.csv"));
        write(&j, report.to_json())?;
        write(&c, report.to_csv())?;
        written.push(j);
        written.push(c);
        Ok(())
    };
    if baseline {
        let report = sim::simulate(
            &empty,
            &graph,
            &baseline_engines(&sc.engines),
            &sc.energy,
            tokens,
        )
        .map_err(stage("simulate"))?;
        emit("baseline_report", &report)?;
        return Ok(SimulateOutput {
            report,
            comparison: None,
            written,
        });
    }
    let plan_path = plan_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("plan.json"));
    if !plan_path.exists() {
        return Err(PipelineError::Usage(format!(
            "missing plan {} (pass --plan or --baseline)",
            plan_path.display()
        )));
    }
    let plan = CompressionPlan::from_json(&read_text(&plan_path)?)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", plan_path.display())))?;
    let report =
        sim::simulate(&plan, &graph, &sc.engines, &sc.energy, tokens).map_err(stage("simulate"))?;
    emit("report", &report)?;
    let comparison = if compare {
        let base = sim::simulate(
            &empty,
            &graph,
            &baseline_engines(&sc.engines),
            &sc.energy,
            tokens,
        )
        .map_err(stage("simulate"))?;
        emit("baseline_report", &base)?;
        let c = sim::Comparison::new(base, report.clone());
        let p = out.join("comparison.json");
        write(
            &p,
            serde_json::to_string_pretty(&c).expect("comparison serializes"),
        )?;
        written.push(p);
        Some(c)
    } else {
        None
    };
    Ok(SimulateOutput {
        report,
        comparison,
        written,
    })
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyMetrics {
    pub block_loss: f64,
    pub logit_kl: f64,
    pub logit_loss: f64,
    pub accuracy_original: f64,
    pub accuracy_compressed: f64,
    pub accuracy_quant: Option<f64>,
    pub accuracy_quant_noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub checks: Vec<Check>,
    pub metrics: Option<VerifyMetrics>,
}

impl VerifyOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        s
    }
}

struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, name: &str, failures: Vec<String>, ok_detail: String) {
        let passed = failures.is_empty();
        self.0.push(Check {
            name: name.into(),
            passed,
            detail: if passed {
                ok_detail
            } else {
                failures.join("; ")
            },
        });
    }
}

/// Re-check a compressed model against its plan and the original model.
/// Writes `verify.json`; the caller decides the exit status from
/// [`VerifyOutput::passed`].
pub fn verify(
    cfg: &PipelineConfig,
    compressed_path: Option<&Path>,
    plan_path: Option<&Path>,
) -> Result<VerifyOutput> {
    let out = cfg.output_dir();
    let cpath = compressed_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("compressed.lten"));
    let ppath = plan_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("plan.json"));
    let (original, _) = load_model_f64(&cfg.model_path())?;
    let (compressed, cgraph) = load_model_f64(&cpath)?;
    require(&ppath, "plan")?;
    let plan = CompressionPlan::from_json(&read_text(&ppath)?)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", ppath.display())))?;
    let calib = load_calibration(&cfg.calibration_path())?;
    let orig_ops: BTreeMap<String, &LinearOp<f64>> = original.ops().into_iter().collect();
    let comp_ops: BTreeMap<String, &LinearOp<f64>> = compressed.ops().into_iter().collect();
    let mut checks = Checks(Vec::new());

    // Structure: every planned layer is stored with the planned shape.
    let mut bad = Vec::new();
    let mut decs: Vec<(&str, &Decomposition<f64>)> = Vec::new();
    for lp in &plan.layers {
        match (cgraph.layer(&lp.id), comp_ops.get(&lp.id)) {
            (Some(spec), Some(LinearOp::Compressed(dec))) => {
                let c = spec
                    .compression
                    .expect("compressed layers carry compression info");
                if (c.rank, c.kept, c.granularity, spec.rows, spec.cols)
                    != (lp.r, lp.d, lp.g, lp.rows, lp.cols)
                {
                    bad.push(format!("layer {} stored shape differs from plan", lp.id));
                } else {
                    decs.push((&lp.id, dec));
                }
            }
            _ => bad.push(format!("layer {} is not stored compressed", lp.id)),
        }
    }
    for spec in cgraph.compressible() {
        if plan.layer(&spec.id).is_none() {
            bad.push(format!("layer {} missing from plan", spec.id));
        }
    }
    checks.push(
        "structure",
        bad,
        format!("{} compressed layers match the plan", decs.len()),
    );

    // Psi recomputed from the stored shapes.
    let (mut stored, mut orig) = (0u64, 0u64);
    for spec in cgraph.compressible() {
        orig += spec.params() as u64;
        stored += match spec.compression {
            Some(c) => (c.rank * (spec.rows + spec.cols) + spec.rows * c.kept) as u64,
            None => spec.params() as u64,
        };
    }
    let psi_stored = 1.0 - stored as f64 / orig.max(1) as f64;
    let psi_plan = psi(&plan);
    let mut bad = Vec::new();
    if (psi_stored - psi_plan).abs() > 1e-12 || (psi_plan - plan.psi_achieved).abs() > 1e-12 {
        bad.push(format!(
            "psi stored {psi_stored}, recomputed {psi_plan}, recorded {}",
            plan.psi_achieved
        ));
    }
    if psi_stored < plan.alpha {
        bad.push(format!("psi {psi_stored} below target {}", plan.alpha));
    }
    checks.push(
        "psi",
        bad,
        format!("psi {psi_stored:.6} >= alpha {}", plan.alpha),
    );

    // Reconstruction fidelity and condensed products.
    let mut fid = Vec::new();
    let mut cond = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for &(id, dec) in &decs {
        let Some(x) = calib.get(id) else {
            fid.push(format!("layer {id}: no calibration activations"));
            continue;
        };
        let w = orig_ops[id].dense();
        if let Err(e) = dec.sparse.validate() {
            cond.push(format!("layer {id}: {e}"));
        }
        let recorded = plan.layer(id).and_then(|l| l.index_digest.clone());
        if let Some(want) = recorded {
            let got = index_digest(&dec.sparse);
            if got != want {
                cond.push(format!("layer {id}: index digest {got} != recorded {want}"));
            }
        }
        match dec.sparse.condensed_matmul(x) {
            Ok(y) => {
                let reference = dec.sparse.expand().matmul(x).expect("shapes checked");
                let diff = y.sub(&reference).expect("same shape").max_abs();
                if diff > 1e-12 * reference.max_abs().max(1.0) {
                    cond.push(format!("layer {id}: condensed product differs by {diff:e}"));
                }
            }
            Err(e) => cond.push(format!("layer {id}: {e}")),
        }
        match compute_scaling(x).and_then(|s| layer_error(&w, &s, dec)) {
            Ok(e) => {
                let rec = plan.layer(id).map(|l| l.error).unwrap_or(f64::NAN);
                let gap = (e - rec).abs();
                worst_gap = worst_gap.max(gap);
                if !(gap <= cfg.verify.error_tolerance) {
                    fid.push(format!("layer {id}: error {e:.6} vs recorded {rec:.6}"));
                }
            }
            Err(e) => fid.push(format!("layer {id}: {e}")),
        }
    }
    checks.push(
        "reconstruction",
        fid,
        format!("largest gap to recorded error {worst_gap:.2e}"),
    );
    checks.push(
        "condensed_matmul",
        cond,
        "indices valid, digests match, products equal".into(),
    );

    // Drift and precision metrics on the dataset.
    let metrics = match cfg.data_path().exists() {
        false => None,
        true => {
            let data = load_dataset(&cfg.data_path())?;
            let mut bad = Vec::new();
            let m = drift_metrics(cfg, &original, &compressed, &data);
            match &m {
                Ok(m) => {
                    let values = [m.block_loss, m.logit_loss, m.accuracy_compressed];
                    if values.iter().any(|v| !v.is_finite()) {
                        bad.push("non-finite drift metric".into());
                    }
                }
                Err(e) => bad.push(e.to_string()),
            }
            let detail = match &m {
                Ok(m) => format!(
                    "block_loss {:.4e}, logit_loss {:.4}, accuracy {:.3} -> {:.3}",
                    m.block_loss, m.logit_loss, m.accuracy_original, m.accuracy_compressed
                ),
                Err(_) => String::new(),
            };
            checks.push("drift", bad, detail);
            if let Ok(m) = &m {
                if let (Some(q), Some(qn)) = (m.accuracy_quant, m.accuracy_quant_noise) {
                    let bad = if q.is_finite() && qn.is_finite() {
                        vec![]
                    } else {
                        vec!["non-finite accuracy".into()]
                    };
                    checks.push(
                        "quant_noise",
                        bad,
                        format!(
                            "accuracy quant {q:.3}, quant+noise({}) {qn:.3}",
                            cfg.verify.noise_ratio
                        ),
                    );
                }
            }
            m.ok()
        }
    };

    let result = VerifyOutput {
        checks: checks.0,
        metrics,
    };
    write(
        &out.join("verify.json"),
        serde_json::to_string_pretty(&result).expect("verify output serializes"),
    )?;
    Ok(result)
}

fn drift_metrics(
    cfg: &PipelineConfig,
    original: &Model<f64>,
    compressed: &Model<f64>,
    data: &Dataset<f64>,
) -> Result<VerifyMetrics> {
    let teacher = original.forward(&data.inputs).map_err(stage("verify"))?;
    let student = compressed.forward(&data.inputs).map_err(stage("verify"))?;
    let bl = block_loss(&student.features, &teacher.features).map_err(stage("verify"))?;
    let ll = logit_loss_parts(
        &student.logits,
        &teacher.logits,
        &data.labels,
        DRIFT_TEMPERATURE,
    )
    .map_err(stage("verify"))?;
    let (mut aq, mut aqn) = (None, None);
    if cfg.verify.quantize || cfg.verify.noise_ratio > 0.0 {
        let base = QuantNoiseConfig {
            quantize: cfg.verify.quantize,
            noise_ratio: 0.0,
            noise_kind: cfg.verify.noise_kind,
            seed: cfg.seed,
        };
        aq = Some(evaluate_with_precision(compressed, data, &base).map_err(stage("verify"))?);
        let noisy = QuantNoiseConfig {
            noise_ratio: cfg.verify.noise_ratio,
            ..base
        };
        aqn = Some(evaluate_with_precision(compressed, data, &noisy).map_err(stage("verify"))?);
    }
    Ok(VerifyMetrics {
        block_loss: bl,
        logit_kl: ll.kl,
        logit_loss: ll.total,
        accuracy_original: evaluate(original, data).map_err(stage("verify"))?,
        accuracy_compressed: evaluate(compressed, data).map_err(stage("verify"))?,
        accuracy_quant: aq,
        accuracy_quant_noise: aqn,
    })
}

// ---------------------------------------------------------------- report

/// Collect whatever artifacts exist in the output directory into
/// `summary.md`.
pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let out = cfg.output_dir();
    let mut md = String::from("# Compression run summary\n\n");
    let mut found = false;
    let plan_path = out.join("plan.json");
    if plan_path.exists() {
        found = true;
        let plan = CompressionPlan::from_json(&read_text(&plan_path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", plan_path.display())))?;
        md.push_str(&format!(
            "Target alpha {}, achieved psi {:.6}, {} allocation iterations.\n\n",
            plan.alpha, plan.psi_achieved, plan.iterations
        ));
        md.push_str("| layer | shape | r | d | g | error |\n|---|---|---|---|---|---|\n");
        for l in &plan.layers {
            md.push_str(&format!(
                "| {} | {}x{} | {} | {} | {} | {:.6} |\n",
                l.id, l.rows, l.cols, l.r, l.d, l.g, l.error
            ));
        }
        md.push('\n');
    }
    let stats_path = out.join("run_stats.json");
    if stats_path.exists() {
        found = true;
        let stats: RunStats = serde_json::from_str(&read_text(&stats_path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", stats_path.display())))?;
        md.push_str(&format!(
            "Compression wall time {:.3}s, basis rank {}.\n\n",
            stats.wall_time_s, stats.basis_rank
        ));
    }
    let cmp_path = out.join("comparison.json");
    let rep_path = out.join("report.json");
    if cmp_path.exists() {
        found = true;
        let c: sim::Comparison = serde_json::from_str(&read_text(&cmp_path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", cmp_path.display())))?;
        md.push_str("## Hardware cost\n\n```\n");
        md.push_str(&c.table());
        md.push_str("```\n\n");
    } else if rep_path.exists() {
        found = true;
        let r: CostReport = serde_json::from_str(&read_text(&rep_path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", rep_path.display())))?;
        md.push_str(&format!(
            "## Hardware cost\n\nTotal energy {:.4e} pJ, {} cycles, EDP {:.4e} pJ*s.\n\n",
            r.total_energy, r.cycles, r.edp
        ));
    }
    let ver_path = out.join("verify.json");
    if ver_path.exists() {
        found = true;
        let v: VerifyOutput = serde_json::from_str(&read_text(&ver_path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", ver_path.display())))?;
        md.push_str("## Verification\n\n");
        for c in &v.checks {
            md.push_str(&format!(
                "- {} {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        md.push('\n');
    }
    if !found {
        return Err(PipelineError::Usage(format!(
            "no artifacts found in {}",
            out.display()
        )));
    }
    write(&out.join("summary.md"), &md)?;
    Ok(md)
}
