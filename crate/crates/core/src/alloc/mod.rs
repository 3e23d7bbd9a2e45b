//! Global rank allocation under a parameter-reduction target.
//!
//! Every layer is decomposed once at its break-even rank. Candidate ranks are
//! then evaluated by slicing those factors, so the greedy search needs no
//! further SVDs.

mod greedy;

pub use greedy::{basis_rank, redistribute, select_batch, step_size, Batch, BASE_SCALE_HIDDEN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{decompose_layer, kept_columns, DecomposeError, Decomposition, ScalingDiag};
use crate::linalg::{frobenius_norm, truncated_svd, Matrix};
use crate::par::par_map;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("layer {layer}: {source}")]
    Decompose {
        layer: String,
        #[source]
        source: DecomposeError,
    },
    #[error(
        "target infeasible: sparse components alone need {sparse} of {allowed} allowed parameters"
    )]
    SparseExceedsTarget { sparse: u64, allowed: u64 },
    #[error(
        "target infeasible at 10% floor: initial ranks cost {cost} but the budget is {budget}"
    )]
    InfeasibleFloor { cost: u64, budget: u64 },
    #[error("invalid allocator parameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, AllocError>;

/// Largest rank whose factors are no bigger than the dense matrix.
pub fn max_rank(m: usize, n: usize) -> usize {
    ((m * n) / (m + n)).max(1)
}

/// Parameter accounting for a compression target `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetModel {
    pub alpha: f64,
    pub original_params: u64,
    pub sparse_params: u64,
    /// Parameters available to the low-rank factors.
    pub budget: u64,
    pub spent: u64,
}

impl BudgetModel {
    /// `budget` is the largest count with `1 − (budget + sparse)/original ≥ alpha`.
    pub fn new(alpha: f64, original_params: u64, sparse_params: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(AllocError::InvalidParam(format!(
                "alpha {alpha} outside (0,1)"
            )));
        }
        if original_params == 0 {
            return Err(AllocError::InvalidParam(
                "no compressible parameters".into(),
            ));
        }
        let allowed = ((1.0 - alpha) * original_params as f64).floor() as i128;
        // Start just above the estimate; the float product may round either way.
        let mut budget = allowed + 2 - sparse_params as i128;
        while budget >= 0 && psi_of(budget as u64 + sparse_params, original_params) < alpha {
            budget -= 1;
        }
        if budget < 0 {
            return Err(AllocError::SparseExceedsTarget {
                sparse: sparse_params,
                allowed: allowed.max(0) as u64,
            });
        }
        Ok(Self {
            alpha,
            original_params,
            sparse_params,
            budget: budget as u64,
            spent: 0,
        })
    }

    /// Explicit low-rank budget, bypassing the target.
    pub fn with_budget(original_params: u64, sparse_params: u64, budget: u64) -> Self {
        Self {
            alpha: psi_of(budget + sparse_params, original_params),
            original_params,
            sparse_params,
            budget,
            spent: 0,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.spent
    }
}

fn psi_of(stored: u64, original: u64) -> f64 {
    1.0 - stored as f64 / original as f64
}

/// One layer to be allocated.
pub struct LayerInput<'a, T> {
    pub id: &'a str,
    pub w: &'a Matrix<T>,
    pub scaling: &'a ScalingDiag<T>,
}

/// Per-layer search state backed by full-rank factors.
#[derive(Debug, Clone)]
pub struct LayerState<T> {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub kept: usize,
    pub granularity: usize,
    pub r_max: usize,
    pub rank: usize,
    /// De-scaled full-rank decomposition; factor columns ordered by singular value.
    pub full: Decomposition<T>,
    pub error: f64,
    /// `W·D − S·D`
    target: Matrix<T>,
    a: Matrix<T>,
    b_scaled: Matrix<T>,
    wd_norm: T,
}

impl<T: Scalar> LayerState<T> {
    /// Normalized activation-aware error of the rank-`r` slice.
    pub fn error_at(&self, r: usize) -> f64 {
        let r = r.clamp(1, self.r_max);
        let low = self
            .a
            .left_cols(r)
            .matmul(&self.b_scaled.top_rows(r))
            .expect("factor shapes agree");
        let resid = self.target.sub(&low).expect("same shape");
        (frobenius_norm(&resid) / self.wd_norm).to_f64_lossy()
    }

    /// Cost in parameters of one rank unit.
    pub fn unit_cost(&self) -> u64 {
        (self.rows + self.cols) as u64
    }

    pub fn sparse_params(&self) -> u64 {
        (self.rows * self.kept) as u64
    }

    pub fn dense_params(&self) -> u64 {
        (self.rows * self.cols) as u64
    }

    /// The scaled-domain matrix whose truncated SVDs the slices reproduce.
    pub fn scaled_target(&self) -> &Matrix<T> {
        &self.target
    }
}

#[derive(Debug, Clone)]
pub struct RankState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> RankState<T> {
    pub fn errors(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.error).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.rank).collect()
    }
}

fn prepare_one<T: Scalar>(
    l: &LayerInput<'_, T>,
    s: f64,
    g: usize,
    iters: usize,
) -> Result<LayerState<T>> {
    let wrap = |source| AllocError::Decompose {
        layer: l.id.to_string(),
        source,
    };
    let (m, n) = l.w.shape();
    let r_max = max_rank(m, n);
    let dec = decompose_layer(l.w, l.scaling, r_max, s, g, iters).map_err(wrap)?;
    let wd = l.w.scale_columns(&l.scaling.d);
    let wd_norm = frobenius_norm(&wd);
    if wd_norm == T::zero() {
        return Err(wrap(DecomposeError::ZeroNorm));
    }
    // Re-fit the factors to the final sparse part so every slice is exactly a
    // truncated SVD of the same residual.
    let sd = dec.sparse.scale_columns(&l.scaling.d).expand();
    let target = wd.sub(&sd).map_err(|e| wrap(e.into()))?;
    let svd = truncated_svd(&target, r_max).map_err(|e| wrap(e.into()))?;
    let (a, b_scaled) = svd.balanced_factors();
    let full = Decomposition {
        a: a.clone(),
        b: b_scaled.scale_columns(&l.scaling.inverse()),
        sparse: dec.sparse,
        rank: r_max,
        objective_trace: dec.objective_trace,
        best_objective: dec.best_objective,
    };
    let mut st = LayerState {
        id: l.id.to_string(),
        rows: m,
        cols: n,
        kept: kept_columns(n, s),
        granularity: g,
        r_max,
        rank: r_max,
        full,
        error: 0.0,
        target,
        a,
        b_scaled,
        wd_norm,
    };
    st.error = st.error_at(r_max);
    Ok(st)
}

/// Decompose every layer once at its break-even rank (layers run in parallel).
pub fn prepare_full_rank<T: Scalar>(
    layers: &[LayerInput<'_, T>],
    s: f64,
    g: usize,
    iters: usize,
) -> Result<RankState<T>> {
    let states = par_map(layers, |l| prepare_one(l, s, g, iters));
    Ok(RankState {
        layers: states.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub threshold: f64,
    pub temperature: f64,
    pub basis_rank: usize,
    /// Starting rank as a fraction of each layer's break-even rank.
    pub init_fraction: f64,
}

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            temperature: 1.0,
            basis_rank: 6,
            init_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub r: usize,
    pub d: usize,
    pub g: usize,
    pub params: u64,
    /// Normalized activation-aware error at the assigned rank.
    pub error: f64,
    /// Hex FNV-1a digest of the stored sparse index table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_digest: Option<String>,
}

impl LayerPlan {
    /// Stored index entries: one per kept column per row chunk.
    pub fn index_entries(&self) -> u64 {
        (self.rows.div_ceil(self.g.max(1)) * self.d) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub alpha: f64,
    pub psi_achieved: f64,
    pub iterations: usize,
    pub original_params: u64,
    pub compressed_params: u64,
    /// Sparse index storage, excluded from `psi`.
    pub index_entries: u64,
    pub layers: Vec<LayerPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

impl CompressionPlan {
    pub fn layer(&self, id: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// `1 − Σ(r(m+n) + m·d) / Σ m·n`.
pub fn psi(plan: &CompressionPlan) -> f64 {
    let (mut stored, mut orig) = (0u64, 0u64);
    for l in &plan.layers {
        stored += (l.r * (l.rows + l.cols) + l.rows * l.d) as u64;
        orig += (l.rows * l.cols) as u64;
    }
    if orig == 0 {
        return 1.0;
    }
    psi_of(stored, orig)
}

/// What happened during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocTrace {
    /// Ranks after initialization and after every iteration.
    pub ranks: Vec<Vec<usize>>,
    pub initial_errors: Vec<f64>,
    pub final_errors: Vec<f64>,
    pub budget: BudgetModel,
}

/// Budget for a reduction target over the prepared layers.
pub fn budget_for<T: Scalar>(state: &RankState<T>, alpha: f64) -> Result<BudgetModel> {
    let orig = state.layers.iter().map(LayerState::dense_params).sum();
    let sparse = state.layers.iter().map(LayerState::sparse_params).sum();
    BudgetModel::new(alpha, orig, sparse)
}

/// Batch-wise greedy rank allocation.
///
/// Starts every layer at `max(1, round(init_fraction · r_max))` and keeps
/// handing rank to the highest-error layers until the budget cannot pay for
/// one more unit anywhere.
pub fn allocate_ranks<T: Scalar>(
    state: &mut RankState<T>,
    mut budget: BudgetModel,
    cfg: &AllocConfig,
) -> Result<(CompressionPlan, AllocTrace)> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(AllocError::InvalidParam(format!(
            "threshold {} outside (0,1]",
            cfg.threshold
        )));
    }
    let layers = &mut state.layers;
    for l in layers.iter_mut() {
        l.rank = ((cfg.init_fraction * l.r_max as f64).round() as usize).clamp(1, l.r_max);
    }
    let init_cost: u64 = layers.iter().map(|l| l.rank as u64 * l.unit_cost()).sum();
    if init_cost > budget.budget {
        return Err(AllocError::InfeasibleFloor {
            cost: init_cost,
            budget: budget.budget,
        });
    }
    budget.spent = init_cost;
    let updated: Vec<f64> = par_map(layers, |l| l.error_at(l.rank));
    for (l, e) in layers.iter_mut().zip(updated) {
        l.error = e;
    }
    let mut trace = AllocTrace {
        ranks: vec![layers.iter().map(|l| l.rank).collect()],
        initial_errors: layers.iter().map(|l| l.error).collect(),
        final_errors: vec![],
        budget: budget.clone(),
    };

    let mut iterations = 0;
    loop {
        let remaining = budget.remaining();
        let candidates: Vec<usize> = (0..layers.len())
            .filter(|&i| layers[i].rank < layers[i].r_max && layers[i].unit_cost() <= remaining)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let errors: Vec<f64> = layers.iter().map(|l| l.error).collect();
        let batch = select_batch(&errors, &candidates, cfg.threshold, cfg.temperature);
        let delta = step_size(remaining, budget.budget, cfg.basis_rank);
        let caps: Vec<usize> = batch
            .layers
            .iter()
            .map(|&i| layers[i].r_max - layers[i].rank)
            .collect();
        let inc = redistribute(&batch.probs, delta, &caps);

        // When the budget cannot cover every increment, the cheapest layers are
        // served first and each increment is clipped to what is affordable.
        let want: u64 = batch
            .layers
            .iter()
            .zip(&inc)
            .map(|(&i, &k)| k as u64 * layers[i].unit_cost())
            .sum();
        let mut order: Vec<usize> = (0..batch.layers.len()).collect();
        if want > remaining {
            order.sort_by_key(|&j| (layers[batch.layers[j]].unit_cost(), j));
        }
        let mut changed = Vec::new();
        for j in order {
            let l = &mut layers[batch.layers[j]];
            let affordable = (budget.remaining() / l.unit_cost()) as usize;
            let k = inc[j].min(affordable);
            if k > 0 {
                l.rank += k;
                budget.spent += k as u64 * l.unit_cost();
                changed.push(batch.layers[j]);
            }
        }
        if changed.is_empty() {
            // The batch is unaffordable; fund one unit of the worst affordable layer.
            let &i = candidates
                .iter()
                .max_by(|&&a, &&b| errors[a].total_cmp(&errors[b]).then(b.cmp(&a)))
                .expect("candidates non-empty");
            layers[i].rank += 1;
            budget.spent += layers[i].unit_cost();
            changed.push(i);
        }
        let fresh: Vec<f64> = {
            let view: Vec<&LayerState<T>> = changed.iter().map(|&i| &layers[i]).collect();
            par_map(&view, |l| l.error_at(l.rank))
        };
        for (&i, e) in changed.iter().zip(fresh) {
            layers[i].error = e;
        }
        iterations += 1;
        trace.ranks.push(layers.iter().map(|l| l.rank).collect());
    }
    trace.final_errors = layers.iter().map(|l| l.error).collect();
    trace.budget = budget.clone();

    let plan_layers: Vec<LayerPlan> = layers
        .iter()
        .map(|l| LayerPlan {
            id: l.id.clone(),
            rows: l.rows,
            cols: l.cols,
            r: l.rank,
            d: l.kept,
            g: l.granularity,
            params: l.rank as u64 * l.unit_cost() + l.sparse_params(),
            error: l.error,
            index_digest: None,
        })
        .collect();
    let mut plan = CompressionPlan {
        alpha: budget.alpha,
        psi_achieved: 0.0,
        iterations,
        original_params: budget.original_params,
        compressed_params: plan_layers.iter().map(|l| l.params).sum(),
        index_entries: plan_layers.iter().map(LayerPlan::index_entries).sum(),
        layers: plan_layers,
        wall_time: None,
    };
    plan.psi_achieved = psi(&plan);
    Ok((plan, trace))
}

/// Largest common rank (capped per layer at `r_max`) that fits the budget,
/// with the resulting per-layer errors.
pub fn uniform_allocation<T: Scalar>(state: &RankState<T>, budget: u64) -> (Vec<usize>, Vec<f64>) {
    let cost = |r: usize| -> u64 {
        state
            .layers
            .iter()
            .map(|l| r.min(l.r_max) as u64 * l.unit_cost())
            .sum()
    };
    let top = state.layers.iter().map(|l| l.r_max).max().unwrap_or(1);
    let r = (1..=top)
        .take_while(|&r| cost(r) <= budget)
        .last()
        .unwrap_or(1);
    let ranks: Vec<usize> = state.layers.iter().map(|l| r.min(l.r_max)).collect();
    let errors = state
        .layers
        .iter()
        .zip(&ranks)
        .map(|(l, &r)| l.error_at(r))
        .collect();
    (ranks, errors)
}

/// Parameter-weighted mean error: `Σ (m·n / Σ m·n) · e`.
pub fn weighted_error<T: Scalar>(state: &RankState<T>, errors: &[f64]) -> f64 {
    let total: f64 = state.layers.iter().map(|l| l.dense_params() as f64).sum();
    state
        .layers
        .iter()
        .zip(errors)
        .map(|(l, e)| l.dense_params() as f64 / total * e)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{compute_scaling, layer_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn random_layers(count: usize, seed: u64) -> Vec<(String, M, ScalingDiag<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let (m, n) = (12 + 4 * (i % 2), 16);
                let w = M::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
                let x = M::from_fn(n, 32, |j, _| {
                    rng.gen_range(-1.0..1.0) * (1.0 + (j % 3) as f64)
                });
                (format!("l{i}"), w, compute_scaling(&x).unwrap())
            })
            .collect()
    }

    fn inputs(v: &[(String, M, ScalingDiag<f64>)]) -> Vec<LayerInput<'_, f64>> {
        v.iter()
            .map(|(id, w, s)| LayerInput { id, w, scaling: s })
            .collect()
    }

    #[test]
    fn diagonal_slices_are_top_triplets() {
        let w = M::diag(&[3.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
        let s = ScalingDiag::identity(6);
        let l = [LayerInput {
            id: "d",
            w: &w,
            scaling: &s,
        }];
        let st = prepare_full_rank(&l, 1.0 / 6.0, 6, 4).unwrap();
        let layer = &st.layers[0];
        assert_eq!(layer.r_max, 3);
        let top = layer.full.truncated(2);
        let rec = top.a.matmul(&top.b).unwrap();
        let svd = truncated_svd(layer.scaled_target(), 2).unwrap();
        assert!(rec.sub(&svd.reconstruct()).unwrap().max_abs() < 1e-10);
        assert!(layer.error_at(3) <= layer.error_at(1));
    }

    #[test]
    fn slice_errors_match_recomputed_svd() {
        let v = random_layers(4, 1);
        let st = prepare_full_rank(&inputs(&v), 0.125, 4, 4).unwrap();
        for (l, (_, w, sc)) in st.layers.iter().zip(&v) {
            let norm = frobenius_norm(&w.scale_columns(&sc.d));
            for r in 1..=l.r_max {
                let svd = truncated_svd(l.scaled_target(), r).unwrap();
                let direct =
                    frobenius_norm(&l.scaled_target().sub(&svd.reconstruct()).unwrap()) / norm;
                assert!((l.error_at(r) - direct).abs() <= 1e-10, "{} r={r}", l.id);
                let via_layer_error = layer_error(w, sc, &l.full.truncated(r)).unwrap();
                assert!((l.error_at(r) - via_layer_error).abs() <= 1e-10);
            }
            assert!(l.error_at(l.r_max) <= l.error_at(1));
        }
    }

    #[test]
    fn psi_hand_count() {
        let plan = CompressionPlan {
            alpha: 0.2,
            psi_achieved: 0.0,
            iterations: 0,
            original_params: 16,
            compressed_params: 12,
            index_entries: 1,
            layers: vec![LayerPlan {
                id: "x".into(),
                rows: 4,
                cols: 4,
                r: 1,
                d: 1,
                g: 4,
                params: 12,
                error: 0.0,
                index_digest: None,
            }],
            wall_time: None,
        };
        assert_eq!(psi(&plan), 0.25);
        let mut zero = plan.clone();
        zero.layers[0].r = 0;
        zero.layers[0].d = 0;
        assert_eq!(psi(&zero), 1.0);
    }

    #[test]
    fn budget_exactly_funding_max_rank() {
        let v = random_layers(1, 2);
        let mut st = prepare_full_rank(&inputs(&v), 0.125, 4, 3).unwrap();
        let l = &st.layers[0];
        let budget = BudgetModel::with_budget(
            l.dense_params(),
            l.sparse_params(),
            l.r_max as u64 * l.unit_cost(),
        );
        let (plan, _) = allocate_ranks(&mut st, budget, &AllocConfig::default()).unwrap();
        assert_eq!(plan.layers[0].r, st.layers[0].r_max);
    }

    #[test]
    fn plan_respects_target_and_is_monotone() {
        let v = random_layers(6, 3);
        let mut st = prepare_full_rank(&inputs(&v), 0.125, 4, 3).unwrap();
        let budget = budget_for(&st, 0.3).unwrap();
        let (plan, trace) = allocate_ranks(&mut st, budget, &AllocConfig::default()).unwrap();
        assert!(psi(&plan) >= 0.3);
        assert!(trace.budget.spent <= trace.budget.budget);
        for w in trace.ranks.windows(2) {
            assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        }
        let max0 = trace.initial_errors.iter().cloned().fold(0.0, f64::max);
        let max1 = trace.final_errors.iter().cloned().fold(0.0, f64::max);
        assert!(max1 <= max0);
        let json = plan.to_json();
        assert_eq!(CompressionPlan::from_json(&json).unwrap(), plan);
    }

    #[test]
    fn infeasible_targets() {
        let v = random_layers(2, 4);
        let st = prepare_full_rank(&inputs(&v), 0.125, 4, 2).unwrap();
        assert!(matches!(
            budget_for(&st, 0.95),
            Err(AllocError::SparseExceedsTarget { .. })
        ));
        let mut st2 = st.clone();
        let tight = budget_for(&st, 0.85).unwrap();
        assert!(matches!(
            allocate_ranks(&mut st2, tight, &AllocConfig::default()),
            Err(AllocError::InfeasibleFloor { .. })
        ));
    }

    #[test]
    fn budget_rounding_is_exact() {
        for orig in [97u64, 1000, 12345] {
            for alpha in [0.1, 0.3, 0.5, 0.77] {
                let b = BudgetModel::new(alpha, orig, 3).unwrap();
                assert!(psi_of(b.budget + 3, orig) >= alpha);
                assert!(psi_of(b.budget + 4, orig) < alpha);
            }
        }
    }
}
