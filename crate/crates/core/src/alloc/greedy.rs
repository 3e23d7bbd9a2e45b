//! Batch selection, step schedule and proportional redistribution.

/// Hidden size from which the full PTC dimension is used as the basis rank.
pub const BASE_SCALE_HIDDEN: usize = 768;

/// Rank quantum: `P` for base-scale models, `P/2` below, or the override.
pub fn basis_rank(hidden_size: usize, ptc_dim: usize, override_b: Option<usize>) -> usize {
    if let Some(b) = override_b {
        return b.max(1);
    }
    if hidden_size >= BASE_SCALE_HIDDEN {
        ptc_dim
    } else {
        (ptc_dim / 2).max(1)
    }
}

/// Per-layer rank step for the current budget position:
/// `2b` while at least half the budget remains, `b` down to a quarter,
/// `ceil(b/2)` (at least 1) after that.
pub fn step_size(remaining: u64, budget: u64, b: usize) -> usize {
    let b = b.max(1);
    if 2 * remaining >= budget {
        2 * b
    } else if 4 * remaining >= budget {
        b
    } else {
        b.div_ceil(2).max(1)
    }
}

/// A batch of layers with their selection probabilities, in descending
/// probability order (ties by ascending layer index).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub layers: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Softmax of `errors[i] / temperature` over the `candidates`, then the
/// shortest prefix (by descending probability) whose cumulative probability
/// reaches `threshold`. An empty candidate set yields an empty batch.
pub fn select_batch(
    errors: &[f64],
    candidates: &[usize],
    threshold: f64,
    temperature: f64,
) -> Batch {
    if candidates.is_empty() {
        return Batch {
            layers: vec![],
            probs: vec![],
        };
    }
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = candidates
        .iter()
        .map(|&i| errors[i] / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| (errors[i] / t - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .zip(&weights)
        .map(|(&i, &w)| (i, w / total))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut batch = Batch {
        layers: vec![],
        probs: vec![],
    };
    let mut acc = 0.0;
    for (i, p) in ranked {
        batch.layers.push(i);
        batch.probs.push(p);
        acc += p;
        // Slack absorbs rounding when the threshold is 1.
        if acc >= threshold - 1e-12 {
            break;
        }
    }
    batch
}

/// Split `|batch| · delta_r` rank units over the batch in proportion to the
/// probabilities. Every member receives at least one unit; leftovers from
/// flooring go one by one in batch order; anything above `caps[i]` spills to
/// the members that still have headroom, again in batch order.
pub fn redistribute(probs: &[f64], delta_r: usize, caps: &[usize]) -> Vec<usize> {
    let k = probs.len();
    assert_eq!(k, caps.len(), "one cap per batch member");
    if k == 0 {
        return vec![];
    }
    let total = k * delta_r.max(1);
    let psum: f64 = probs.iter().sum();
    let remainder = total - k;
    let mut inc: Vec<usize> = probs
        .iter()
        .map(|&p| {
            1 + if psum > 0.0 {
                (remainder as f64 * p / psum).floor() as usize
            } else {
                0
            }
        })
        .collect();
    let mut assigned: usize = inc.iter().sum();
    // Rounding can only lose units; the guard keeps a float edge case from overshooting.
    while assigned > total {
        let j = inc
            .iter()
            .rposition(|&v| v > 1)
            .expect("more than one unit each");
        inc[j] -= 1;
        assigned -= 1;
    }
    let mut i = 0;
    while assigned < total {
        inc[i % k] += 1;
        assigned += 1;
        i += 1;
    }

    let mut spill = 0;
    for (v, &cap) in inc.iter_mut().zip(caps) {
        if *v > cap {
            spill += *v - cap;
            *v = cap;
        }
    }
    for (v, &cap) in inc.iter_mut().zip(caps) {
        if spill == 0 {
            break;
        }
        let take = (cap - *v).min(spill);
        *v += take;
        spill -= take;
    }
    inc
}
