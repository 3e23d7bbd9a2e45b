//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines are always visible under
//! `cargo test`. Pass substrings as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lighten_core::alloc::{
    allocate_ranks, budget_for, prepare_full_rank, step_size, uniform_allocation, AllocConfig,
    LayerInput,
};
use lighten_core::decompose::{
    compute_scaling, decompose_layer, local_adapt, structured_sparsify, AdaptConfig, AdaptProblem,
    ScalingDiag, SparseChunk, StructuredSparse,
};
use lighten_core::linalg::Matrix;
use lighten_core::model::{
    block_loss, evaluate, logit_loss_parts, BlockFeatures, Dataset, LinearOp, Model, ToyViT,
    VitDims,
};
use lighten_core::pipeline::{self, PipelineConfig};
use lighten_core::quant::{
    dequantize, evaluate_with_precision, inject_noise, quantize, QuantAxis, QuantNoiseConfig,
};
use lighten_core::sim::{
    self, laser_energy, plan_splitters, uniform_plan, vit_base_graph, EnergyParams, EngineConfig,
    PtcConfig, PtcExecutor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Matrix<f64>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: usize, c: usize, lo: f64, hi: f64, g: &mut ChaCha8Rng) -> M {
    M::from_fn(r, c, |_, _| g.gen_range(lo..hi))
}

/// Neumaier-compensated sum.
fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() {
            (s - t) + v
        } else {
            (v - t) + s
        };
        s = t;
    }
    s + c
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
fn sym_eigenvalues(a: &M) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let scale: f64 = m.iter().flatten().map(|v| v * v).sum();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn naive_matmul(a: &M, b: &M) -> M {
    M::from_fn(a.rows(), b.cols(), |i, j| {
        ksum((0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]))
    })
}

/// Dense matrix rebuilt from the chunk list, without library helpers.
fn oracle_expand(sp: &StructuredSparse<f64>) -> M {
    let mut out = M::zeros(sp.full_rows, sp.full_cols);
    let mut row = 0;
    for chunk in &sp.chunks {
        for i in 0..chunk.values.rows() {
            for (k, &c) in chunk.kept_cols.iter().enumerate() {
                out[(row + i, c)] = chunk.values[(i, k)];
            }
        }
        row += chunk.values.rows();
    }
    out
}

fn rel_fro(a: &M, b: &M) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

// ------------------------------------------------------------------ 1

fn c1_svd_dominance() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let r = [2, 4, 8][seed as usize % 3];
        let w = uniform(32, 48, -1.0, 1.0, &mut rng(seed));
        let dec = decompose_layer(&w, &ScalingDiag::identity(48), r, 0.125, 4, 10).unwrap();
        let gram = naive_matmul(&w, &w.transpose());
        let ev = sym_eigenvalues(&gram);
        let svd_only = ksum(ev[r..].iter().map(|v| v.max(0.0))).sqrt();
        let gap = dec.best_objective - svd_only;
        worst = worst.max(gap);
        if gap <= 1e-9 {
            wins += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        wins == 50 && secs < 30.0,
        format!(
            "{wins}/50 at or below the truncated-SVD objective, worst gap {worst:.2e}, {secs:.2}s"
        ),
    )
}

// ------------------------------------------------------------------ 2

/// Rank-2 matrix plus a planted structured-sparse part (g = 4, d = 6). Each
/// planted length-4 column vector has an L2 norm `factor` times that of the
/// low-rank matrix on the same rows and column.
fn planted_instance(seed: u64, factor: f64) -> M {
    let mut g = rng(1000 + seed);
    let u = uniform(48, 2, -1.0, 1.0, &mut g);
    let v = uniform(2, 48, -1.0, 1.0, &mut g);
    let low = u.matmul(&v).unwrap();
    let mut w = low.clone();
    for c in 0..12 {
        let rows = 4 * c..4 * c + 4;
        let mut cols: Vec<usize> = (0..48).collect();
        for k in 0..6 {
            let j = g.gen_range(k..48);
            cols.swap(k, j);
        }
        for &col in &cols[..6] {
            let seg = rows
                .clone()
                .map(|i| low[(i, col)] * low[(i, col)])
                .sum::<f64>()
                .sqrt();
            let dir: Vec<f64> = (0..4)
                .map(|_| {
                    let m = g.gen_range(0.5..1.0);
                    if g.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (k, i) in rows.clone().enumerate() {
                w[(i, col)] += factor * seg * dir[k] / dn;
            }
        }
    }
    w
}

fn recovered(factor: f64) -> (usize, f64) {
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let w = planted_instance(seed, factor);
        let dec = decompose_layer(&w, &ScalingDiag::identity(48), 2, 0.125, 4, 80).unwrap();
        let e = rel_fro(&dec.reconstruct(), &w);
        worst = worst.max(e);
        if e <= 1e-6 {
            ok += 1;
        }
    }
    (ok, worst)
}

fn c2_planted_recovery() -> Outcome {
    let start = Instant::now();
    let (ok, worst) = recovered(3.0);
    let secs = start.elapsed().as_secs_f64();
    // Reported only: far stronger planting pulls the first truncated SVD
    // (taken with S = 0) onto the sparse part.
    let (ok10, _) = recovered(10.0);
    outcome(
        ok >= 19 && secs < 30.0,
        format!("{ok}/20 recovered to 1e-6 (worst {worst:.2e}) in {secs:.2}s; at 10x planting {ok10}/20"),
    )
}

// ------------------------------------------------------------------ 3

fn adapt_setup(seed: u64) -> (M, M, lighten_core::decompose::Decomposition<f64>) {
    let mut g = rng(2000 + seed);
    let w = uniform(16, 24, -1.0, 1.0, &mut g);
    let x = M::from_fn(24, 64, |j, _| {
        g.gen_range(-1.0..1.0) * (1.0 + (j % 5) as f64)
    });
    let sc = compute_scaling(&x).unwrap();
    let dec = decompose_layer(&w, &sc, 4, 0.125, 4, 10).unwrap();
    (w, x, dec)
}

fn c3_local_adaptation() -> Outcome {
    // Gradient check on 20 random coordinates.
    let (w, x, dec) = adapt_setup(0);
    let problem = AdaptProblem::new(&dec, &w, &x).unwrap();
    let mut g = rng(77);
    let mut p = problem.init_params(1);
    for i in 0..p.len() {
        p.set(i, g.gen_range(-0.1..0.1));
    }
    let grad = problem.gradient(&p);
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let i = g.gen_range(0..p.len());
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus.set(i, p.get(i) + h);
        minus.set(i, p.get(i) - h);
        let fd = (problem.objective(&plus) - problem.objective(&minus)) / (2.0 * h);
        let rel = (fd - grad.get(i)).abs() / fd.abs().max(grad.get(i).abs()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }

    let (mut monotone, mut improved) = (0, 0);
    for seed in 0..20 {
        let (w, x, dec) = adapt_setup(seed);
        let cfg = AdaptConfig {
            steps: 100,
            lr: 1e-3,
            seed,
        };
        let (_, rep) = local_adapt(&dec, &w, &x, &cfg).unwrap();
        if rep.final_objective <= rep.initial_objective
            && rep.trace.windows(2).all(|t| t[1] <= t[0])
        {
            monotone += 1;
        }
        if rep.final_objective <= 0.99 * rep.initial_objective {
            improved += 1;
        }
    }
    outcome(
        worst_rel <= 1e-4 && monotone == 20 && improved >= 18,
        format!(
            "gradient rel err {worst_rel:.2e}, non-increasing {monotone}/20, improved >=1% {improved}/20"
        ),
    )
}

// ------------------------------------------------------------------ 4, 5

struct AllocRun {
    psi_ok: bool,
    monotone: bool,
    secs: f64,
    beats_uniform: bool,
    coarse_beats_uniform: bool,
    planted_low: bool,
    balanced: bool,
    detail: String,
}

/// Normalized error of the best rank-r approximation of each layer's
/// fixed-sparse target, from its singular spectrum.
struct ErrorOracle {
    tails: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl ErrorOracle {
    fn new(layers: &[(String, M, ScalingDiag<f64>)], sparse: &[&StructuredSparse<f64>]) -> Self {
        let mut tails = Vec::new();
        let mut norms = Vec::new();
        for ((_, w, sc), sp) in layers.iter().zip(sparse) {
            let d = &sc.d;
            let wd = M::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)] * d[j]);
            let s = oracle_expand(sp);
            let t = M::from_fn(w.rows(), w.cols(), |i, j| (w[(i, j)] - s[(i, j)]) * d[j]);
            let ev = sym_eigenvalues(&naive_matmul(&t, &t.transpose()));
            // tails[r] = sum of eigenvalues beyond the r largest
            let mut tail = vec![0.0; ev.len() + 1];
            for r in (0..ev.len()).rev() {
                tail[r] = tail[r + 1] + ev[r].max(0.0);
            }
            tails.push(tail);
            norms.push(wd.frobenius_norm());
        }
        Self { tails, norms }
    }

    fn weighted(&self, ranks: &[usize], sizes: &[f64]) -> f64 {
        let total: f64 = sizes.iter().sum();
        ksum(
            (0..ranks.len())
                .map(|l| sizes[l] / total * self.tails[l][ranks[l]].sqrt() / self.norms[l]),
        )
    }
}

fn alloc_run(seed: u64) -> AllocRun {
    let mut g = rng(3000 + seed);
    let mut kinds = vec![4usize; 3];
    kinds.extend([32usize; 9]);
    for i in (1..12).rev() {
        let j = g.gen_range(0..=i);
        kinds.swap(i, j);
    }
    let mut layers = Vec::new();
    for (l, &k) in kinds.iter().enumerate() {
        let u = uniform(64, k, -1.0, 1.0, &mut g);
        let v = uniform(k, 64, -1.0, 1.0, &mut g);
        let noise = uniform(64, 64, -0.01, 0.01, &mut g);
        let w = u
            .matmul(&v)
            .unwrap()
            .scale(1.0 / (k as f64).sqrt())
            .add(&noise)
            .unwrap();
        let x = M::from_fn(64, 96, |j, _| {
            g.gen_range(-1.0..1.0) * (0.5 + (j % 7) as f64 * 0.25)
        });
        let sc = compute_scaling(&x).unwrap();
        layers.push((format!("layer{l}"), w, sc));
    }
    let inputs: Vec<LayerInput<'_, f64>> = layers
        .iter()
        .map(|(id, w, s)| LayerInput { id, w, scaling: s })
        .collect();
    let prepared = prepare_full_rank(&inputs, 0.125, 4, 3).unwrap();
    let alpha = 0.5;
    let budget = budget_for(&prepared, alpha).unwrap();
    let rank_budget = budget.budget;

    // The basis rank is overridden to 2 for these 64-wide layers (break-even
    // rank 28), keeping the step resolution comparable to b = 12 on 768-wide
    // layers. The P/2 = 6 default is run as well and reported.
    let mut coarse_state = prepared.clone();
    let coarse_cfg = AllocConfig {
        basis_rank: 6,
        ..AllocConfig::default()
    };
    let (coarse_plan, _) = allocate_ranks(&mut coarse_state, budget.clone(), &coarse_cfg).unwrap();

    let mut state = prepared;
    let cfg = AllocConfig {
        basis_rank: 2,
        ..AllocConfig::default()
    };
    let t0 = Instant::now();
    let (plan, trace) = allocate_ranks(&mut state, budget, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let stored: u64 = plan
        .layers
        .iter()
        .map(|l| (l.r * (l.rows + l.cols) + l.rows * l.d) as u64)
        .sum();
    let orig: u64 = plan.layers.iter().map(|l| (l.rows * l.cols) as u64).sum();
    let psi = 1.0 - stored as f64 / orig as f64;
    let monotone = trace
        .ranks
        .windows(2)
        .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));

    let sparse: Vec<&StructuredSparse<f64>> = state.layers.iter().map(|l| &l.full.sparse).collect();
    let oracle = ErrorOracle::new(&layers, &sparse);
    let sizes: Vec<f64> = plan
        .layers
        .iter()
        .map(|l| (l.rows * l.cols) as f64)
        .collect();
    let ranks: Vec<usize> = plan.layers.iter().map(|l| l.r).collect();
    let coarse_ranks: Vec<usize> = coarse_plan.layers.iter().map(|l| l.r).collect();
    let (uranks, _) = uniform_allocation(&state, rank_budget);
    let ucost: u64 = state
        .layers
        .iter()
        .zip(&uranks)
        .map(|(l, &r)| r as u64 * l.unit_cost())
        .sum();
    assert!(ucost <= rank_budget, "uniform baseline over budget");
    let (ws, wc, wu) = (
        oracle.weighted(&ranks, &sizes),
        oracle.weighted(&coarse_ranks, &sizes),
        oracle.weighted(&uranks, &sizes),
    );

    let low_max = (0..12)
        .filter(|&l| kinds[l] == 4)
        .map(|l| ranks[l])
        .max()
        .unwrap();
    let high_min = (0..12)
        .filter(|&l| kinds[l] == 32)
        .map(|l| ranks[l])
        .min()
        .unwrap();
    let max_init = trace.initial_errors.iter().cloned().fold(0.0, f64::max);
    let max_final = trace.final_errors.iter().cloned().fold(0.0, f64::max);
    AllocRun {
        psi_ok: psi >= alpha,
        monotone,
        secs,
        beats_uniform: ws < wu,
        coarse_beats_uniform: wc < wu,
        planted_low: 2 * low_max <= high_min,
        balanced: max_final <= max_init,
        detail: format!(
            "searched {ws:.4} vs uniform {wu:.4} (uniform rank {}), ranks {ranks:?}",
            uranks[0]
        ),
    }
}

fn alloc_runs() -> &'static [AllocRun] {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<AllocRun>> = OnceLock::new();
    RUNS.get_or_init(|| (0..20).map(alloc_run).collect())
}

fn c4_allocator_contract() -> Outcome {
    let runs = alloc_runs();
    let count = |f: fn(&AllocRun) -> bool| runs.iter().filter(|r| f(r)).count();
    let psi_ok = count(|r| r.psi_ok);
    let mono = count(|r| r.monotone);
    let wins = count(|r| r.beats_uniform);
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    outcome(
        psi_ok == 20 && mono == 20 && slowest < 5.0 && wins >= 18,
        format!(
            "psi>=alpha {psi_ok}/20, monotone ranks {mono}/20, slowest allocation {slowest:.3}s, beats uniform {wins}/20 \
             (with b=6: {}/20), planted rank-4 layers at <= half the others' rank {}/20; seed 0: {}",
            count(|r| r.coarse_beats_uniform),
            count(|r| r.planted_low),
            runs[0].detail
        ),
    )
}

fn c5_error_balancing() -> Outcome {
    let runs = alloc_runs();
    let ok = runs.iter().filter(|r| r.balanced).count();
    outcome(
        ok == 20,
        format!("max error not above its initial value on {ok}/20 seeds"),
    )
}

// ------------------------------------------------------------------ 6

fn c6_condensed_matmul() -> Outcome {
    // Hand example: g = 2, 4x4, one kept column per chunk.
    let hand = StructuredSparse {
        granularity: 2,
        full_rows: 4,
        full_cols: 4,
        chunks: vec![
            SparseChunk {
                kept_cols: vec![1],
                values: M::from_rows(&[[2.0], [3.0]]),
            },
            SparseChunk {
                kept_cols: vec![3],
                values: M::from_rows(&[[-1.0], [5.0]]),
            },
        ],
    };
    let hand_ok = hand.condensed_matmul(&M::identity(4)).unwrap() == oracle_expand(&hand);
    let zero = StructuredSparse::<f64>::zeros(6, 5, 4, 2);
    let zero_ok = zero
        .condensed_matmul(&uniform(5, 3, -1.0, 1.0, &mut rng(1)))
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0);

    let mut g = rng(6000);
    let mut worst: f64 = 0.0;
    let mut n_done = 0;
    while n_done < 200 {
        let m = g.gen_range(1..40);
        let n = g.gen_range(2..40);
        let gran = g.gen_range(1..9);
        let s = g.gen_range(0.05..0.9);
        if (n as f64 * s).round() < 1.0 {
            continue;
        }
        let sp = structured_sparsify(&uniform(m, n, -2.0, 2.0, &mut g), gran, s).unwrap();
        let x = uniform(n, g.gen_range(1..20), -2.0, 2.0, &mut g);
        let got = sp.condensed_matmul(&x).unwrap();
        let want = naive_matmul(&oracle_expand(&sp), &x);
        worst = worst.max(got.sub(&want).unwrap().max_abs());
        n_done += 1;
    }
    outcome(
        hand_ok && zero_ok && worst <= 1e-12,
        format!("hand example {hand_ok}, zero values {zero_ok}, 200 random max diff {worst:.2e}"),
    )
}

// ------------------------------------------------------------------ 7

fn c7_ptc_fidelity() -> Outcome {
    let dims = VitDims {
        input_dim: 16,
        hidden: 20,
        heads: 4,
        mlp_ratio: 2,
        blocks: 2,
        classes: 5,
        seq_len: 7,
    };
    let mut model = Model::Vit(ToyViT::<f64>::random(dims, 5).unwrap());
    let ids: Vec<String> = model.ops().into_iter().map(|(id, _)| id).collect();
    for (k, id) in ids.iter().enumerate() {
        if id.starts_with("blocks") && k % 2 == 0 {
            let op = model.op_mut(id).unwrap();
            let w = op.dense();
            let dec = decompose_layer(&w, &ScalingDiag::identity(w.cols()), 3, 0.25, 4, 5).unwrap();
            *op = LinearOp::Compressed(dec);
        }
    }
    let x = uniform(16, 7 * 6, -1.0, 1.0, &mut rng(70));
    let reference = model.forward(&x).unwrap().logits;
    let cfg = EngineConfig::default();
    let mut exec = PtcExecutor::new(cfg.dense.ptc, cfg.sparse.ptc);
    let tiled = model.forward_with(&x, &mut exec).unwrap().logits;
    let rel = tiled.sub(&reference).unwrap().max_abs() / reference.max_abs();
    outcome(
        rel <= 1e-9 && exec.sparse_invocations > 0,
        format!(
            "max relative logit deviation {rel:.2e} over {} dense and {} sparse PTC invocations",
            exec.dense_invocations, exec.sparse_invocations
        ),
    )
}

// ------------------------------------------------------------------ 8

fn c8_step_schedule() -> Outcome {
    let budget = 1200u64;
    let mut all = true;
    let mut seen = Vec::new();
    for b in [12usize, 6, 5] {
        let half = (b as f64 / 2.0).ceil() as usize;
        let cases = [
            (budget, 2 * b),
            (budget / 2, 2 * b),
            (budget / 2 - 1, b),
            (budget / 4, b),
            (budget / 4 - 1, half),
        ];
        for (rem, want) in cases {
            let got = step_size(rem, budget, b);
            all &= got == want;
            if b == 12 {
                seen.push(got);
            }
        }
    }
    outcome(
        all,
        format!("b=12 at B, B/2, B/2-1, B/4, B/4-1 -> {seen:?}"),
    )
}

// ------------------------------------------------------------------ 9

fn c9_simulator_direction() -> Outcome {
    let start = Instant::now();
    let graph = vit_base_graph();
    let plan = uniform_plan(&graph, 0.5, 0.1, 6).unwrap();
    let e = EnergyParams::default();
    let hw = EngineConfig::default();
    let cmp = sim::compare(
        &plan,
        &graph,
        &hw,
        &EngineConfig::baseline_scaled(),
        &e,
        197,
    )
    .unwrap();
    let mut ungated = hw;
    ungated.gating_enabled = false;
    let off = sim::simulate(&plan, &graph, &ungated, &e, 197).unwrap();
    let (b, c) = (&cmp.baseline.energy, &cmp.compressed.energy);
    let secs = start.elapsed().as_secs_f64();
    let ok = c.weight_encode < b.weight_encode
        && c.data_movement < b.data_movement
        && cmp.compressed.energy.laser < off.energy.laser
        && cmp.edp_ratio > 1.0
        && secs < 10.0;
    outcome(
        ok,
        format!(
            "psi {:.3}; weight_encode {:.3}x, data_movement {:.3}x lower; gated laser {:.3} of ungated; EDP ratio {:.3}; {secs:.2}s",
            plan.psi_achieved,
            b.weight_encode / c.weight_encode,
            b.data_movement / c.data_movement,
            cmp.compressed.energy.laser / off.energy.laser,
            cmp.edp_ratio
        ),
    )
}

// ------------------------------------------------------------------ 10

fn c10_splitters() -> Outcome {
    let ptc = PtcConfig::square(8, 12);
    let mut ok = true;
    let mut levels = Vec::new();
    for k in 1..=4 {
        let p = plan_splitters(2 * k, &ptc).unwrap();
        let power = p.quarter_power();
        let lit = power.iter().filter(|&&v| v > 0.0).count();
        ok &= p.is_consistent() && lit == k && p.active_quarters.len() == k;
        ok &= (0..4).all(|q| p.active_quarters.contains(&q) || power[q] == 0.0);
        levels.push(format!("{k}:{:?}/{:?}", p.stage1, p.stage2));
    }
    ok &= plan_splitters(3, &ptc).is_err();
    let e = EnergyParams {
        laser_per_channel_cycle: 0.25,
        ..EnergyParams::default()
    };
    let one = laser_energy(1234, 6, 12, 2, &e);
    let linear = (1..=4).all(|k| laser_energy(1234, 6, 12, 2 * k, &e) == k as f64 * one);
    outcome(
        ok && linear,
        format!("{}; laser linear in quarters: {linear}", levels.join(", ")),
    )
}

// ------------------------------------------------------------------ 11

fn c11_quantization() -> Outcome {
    let mut g = rng(1100);
    let mut bound_ok = true;
    for t in 0..100 {
        let axis = if t % 2 == 0 {
            QuantAxis::PerOutputChannel
        } else {
            QuantAxis::PerTensor
        };
        let scale = 10f64.powf(g.gen_range(-3.0..3.0));
        let m = uniform(
            g.gen_range(1..20),
            g.gen_range(1..20),
            -scale,
            scale,
            &mut g,
        );
        let q = quantize(&m, axis).unwrap();
        let back: M = dequantize(&q);
        for i in 0..m.rows() {
            let half = q.scale_of_row(i) / 2.0;
            for j in 0..m.cols() {
                // Allow the rounding of the division and product themselves.
                let slack = 4.0 * f64::EPSILON * m[(i, j)].abs();
                bound_ok &= (m[(i, j)] - back[(i, j)]).abs() <= half + slack;
            }
        }
    }

    let ones = M::from_fn(1000, 1000, |_, _| 1.0);
    let noisy = inject_noise(&ones, 0.03, 11).unwrap();
    let dev: Vec<f64> = noisy.data().iter().map(|v| v - 1.0).collect();
    let mean = ksum(dev.iter().copied()) / dev.len() as f64;
    let sigma = (ksum(dev.iter().map(|d| (d - mean) * (d - mean))) / (dev.len() - 1) as f64).sqrt();
    let sigma_ok = (sigma - 0.03).abs() <= 0.003;

    let mut drops = Vec::new();
    for seed in 0..3 {
        let dims = VitDims {
            input_dim: 16,
            hidden: 32,
            heads: 4,
            mlp_ratio: 4,
            blocks: 2,
            classes: 10,
            seq_len: 8,
        };
        let model: Model<f64> = Model::Vit(ToyViT::<f64>::random(dims, seed).unwrap());
        let inputs = uniform(16, 8 * 128, -1.0, 1.0, &mut rng(seed + 50));
        let logits = model.forward(&inputs).unwrap().logits;
        let labels = (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
            })
            .collect();
        let data = Dataset { inputs, labels };
        assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
        let q = QuantNoiseConfig {
            quantize: true,
            noise_ratio: 0.0,
            seed,
            ..QuantNoiseConfig::default()
        };
        let qn = QuantNoiseConfig {
            noise_ratio: 0.03,
            ..q
        };
        let aq = evaluate_with_precision(&model, &data, &q).unwrap();
        let aqn = evaluate_with_precision(&model, &data, &qn).unwrap();
        drops.push(aq - aqn);
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    outcome(
        bound_ok && sigma_ok && mean_drop <= 0.10,
        format!(
            "bound holds on 100 tensors: {bound_ok}; noise sigma {sigma:.5}; toy accuracy drop quant -> quant+3% noise {:?} (mean {mean_drop:.3})",
            drops.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ------------------------------------------------------------------ 12

fn oracle_logit_loss(ys: &M, yt: &M, labels: &[usize], tau: f64) -> f64 {
    let probs = |row: &[f64], t: f64| -> (Vec<f64>, Vec<f64>) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let z = ksum(row.iter().map(|&v| (v / t - max).exp()));
        let logp: Vec<f64> = row.iter().map(|&v| (v / t - max) - z.ln()).collect();
        (logp.iter().map(|l| l.exp()).collect(), logp)
    };
    let n = ys.rows();
    let kl = ksum((0..n).map(|i| {
        let (ps, ls) = probs(ys.row(i), tau);
        let (_, lt) = probs(yt.row(i), tau);
        ksum((0..ps.len()).map(|k| ps[k] * (ls[k] - lt[k])))
    })) / n as f64;
    let ce = ksum((0..n).map(|i| -probs(ys.row(i), 1.0).1[labels[i]])) / n as f64;
    0.5 * kl + 0.5 * ce
}

fn oracle_block_loss(a: &BlockFeatures<f64>, b: &BlockFeatures<f64>) -> f64 {
    let pairs = a.attn.len() + a.mlp.len();
    let fa = a.attn.iter().chain(&a.mlp);
    let fb = b.attn.iter().chain(&b.mlp);
    ksum(fa.zip(fb).map(|(x, y)| {
        ksum(
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q)),
        )
    })) / pairs as f64
}

fn c12_losses() -> Outcome {
    let mut g = rng(1200);
    let (mut shift_worst, mut oracle_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let ys = uniform(6, 9, -5.0, 5.0, &mut g);
        let yt = uniform(6, 9, -5.0, 5.0, &mut g);
        let labels: Vec<usize> = (0..6).map(|_| g.gen_range(0..9)).collect();
        let base = logit_loss_parts(&ys, &yt, &labels, 4.0).unwrap().total;
        let shifts: Vec<f64> = (0..6).map(|_| g.gen_range(-50.0..50.0)).collect();
        let ys2 = M::from_fn(6, 9, |i, j| ys[(i, j)] + shifts[i]);
        let yt2 = M::from_fn(6, 9, |i, j| yt[(i, j)] + shifts[i]);
        let moved = logit_loss_parts(&ys2, &yt2, &labels, 4.0).unwrap().total;
        shift_worst = shift_worst.max((base - moved).abs());
        oracle_worst = oracle_worst.max((base - oracle_logit_loss(&ys, &yt, &labels, 4.0)).abs());
    }

    let feats = |g: &mut ChaCha8Rng| BlockFeatures {
        attn: (0..2).map(|_| uniform(7, 5, -1.0, 1.0, g)).collect(),
        mlp: (0..2).map(|_| uniform(7, 5, -1.0, 1.0, g)).collect(),
    };
    let a = feats(&mut g);
    let b = feats(&mut g);
    let zero_same = block_loss(&a, &a).unwrap() == 0.0;
    let mut tweaked = a.clone();
    tweaked.mlp[1][(3, 2)] += 1e-6;
    let positive_diff =
        block_loss(&tweaked, &a).unwrap() > 0.0 && block_loss(&b, &a).unwrap() > 0.0;
    let block_gap = (block_loss(&b, &a).unwrap() - oracle_block_loss(&b, &a)).abs();
    oracle_worst = oracle_worst.max(block_gap);
    outcome(
        shift_worst <= 1e-10 && oracle_worst <= 1e-10 && zero_same && positive_diff,
        format!(
            "shift invariance {shift_worst:.2e}, oracle gap {oracle_worst:.2e}, zero iff identical {}",
            zero_same && positive_diff
        ),
    )
}

// ------------------------------------------------------------------ 13

fn c13_reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = PipelineConfig::default();
        cfg.paths.output = d.path().to_string_lossy().into_owned();
        cfg.seed = 2024;
        pipeline::gen_toy(&cfg).unwrap();
        pipeline::calibrate(&cfg).unwrap();
        pipeline::compress(&cfg).unwrap();
    }
    let same = |name: &str| {
        std::fs::read(dirs[0].path().join(name)).unwrap()
            == std::fs::read(dirs[1].path().join(name)).unwrap()
    };
    let (plan, lten) = (same("plan.json"), same("compressed.lten"));
    outcome(
        plan && lten,
        format!("plan.json identical {plan}, compressed.lten identical {lten}"),
    )
}

// ------------------------------------------------------------------ runner

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 13] = [
        ("svd_baseline_dominance", c1_svd_dominance),
        ("planted_recovery", c2_planted_recovery),
        ("local_adaptation", c3_local_adaptation),
        ("allocator_contract", c4_allocator_contract),
        ("error_balancing", c5_error_balancing),
        ("condensed_matmul", c6_condensed_matmul),
        ("ptc_fidelity", c7_ptc_fidelity),
        ("step_schedule", c8_step_schedule),
        ("simulator_direction", c9_simulator_direction),
        ("splitter_planner", c10_splitters),
        ("quantization", c11_quantization),
        ("losses", c12_losses),
        ("reproducibility", c13_reproducibility),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let took: Duration = start.elapsed();
        println!(
            "criterion {:>2} {:<24} {} ({}) [{:.2}s]",
            n + 1,
            name,
            if result.passed { "PASS" } else { "FAIL" },
            result.detail,
            took.as_secs_f64()
        );
        if !result.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
