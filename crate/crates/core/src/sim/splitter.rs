//! Two-stage optical splitter tree that powers quarters of the sparse PTC rows.
//!
//! Stage 1 splits the laser between branch A (quarters 0, 1) and branch B
//! (quarters 2, 3). Each stage-2 splitter divides its branch between its two
//! quarters.

use serde::{Deserialize, Serialize};

use super::{PtcConfig, Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitterState {
    /// 1:1
    Equal,
    /// 2:0, everything to the first output.
    FullA,
    /// 0:2, everything to the second output.
    FullB,
}

impl SplitterState {
    fn fractions(self) -> [f64; 2] {
        match self {
            SplitterState::Equal => [0.5, 0.5],
            SplitterState::FullA => [1.0, 0.0],
            SplitterState::FullB => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitterPlan {
    pub stage1: SplitterState,
    pub stage2: [SplitterState; 2],
    pub active_quarters: Vec<usize>,
}

impl SplitterPlan {
    /// Fraction of the input optical power reaching each quarter.
    pub fn quarter_power(&self) -> [f64; 4] {
        let s1 = self.stage1.fractions();
        let mut out = [0.0; 4];
        for (branch, state) in self.stage2.iter().enumerate() {
            let s2 = state.fractions();
            out[2 * branch] = s1[branch] * s2[0];
            out[2 * branch + 1] = s1[branch] * s2[1];
        }
        out
    }

    /// Quarters that receive any light, ascending.
    pub fn powered_quarters(&self) -> Vec<usize> {
        self.quarter_power()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether the splitter states light exactly the claimed quarters.
    pub fn is_consistent(&self) -> bool {
        self.powered_quarters() == self.active_quarters
    }
}

/// Rows per quarter of the gated row dimension.
pub fn quarter_rows(ptc: &PtcConfig) -> Result<usize> {
    if !ptc.n_v.is_multiple_of(4) || ptc.n_v == 0 {
        return Err(SimError::Config(format!(
            "sparse gating needs a row dimension divisible by 4, got {}",
            ptc.n_v
        )));
    }
    Ok(ptc.n_v / 4)
}

/// Smallest quarter multiple of the row dimension that holds `g` rows,
/// capped at the full row dimension.
pub fn operating_rows(g: usize, ptc: &PtcConfig) -> Result<usize> {
    let q = quarter_rows(ptc)?;
    Ok((g.max(1).div_ceil(q) * q).min(ptc.n_v))
}

pub fn plan_splitters(active_rows: usize, ptc: &PtcConfig) -> Result<SplitterPlan> {
    use SplitterState::*;
    let q = quarter_rows(ptc)?;
    if active_rows == 0 || !active_rows.is_multiple_of(q) || active_rows > ptc.n_v {
        let up = (active_rows.max(1).div_ceil(q) * q).min(ptc.n_v);
        return Err(SimError::Config(format!(
            "{active_rows} active rows is not a quarter multiple of {}; round up to {up}",
            ptc.n_v
        )));
    }
    let (stage1, stage2, active) = match active_rows / q {
        4 => (Equal, [Equal, Equal], vec![0, 1, 2, 3]),
        3 => (Equal, [Equal, FullA], vec![0, 1, 2]),
        2 => (FullA, [Equal, Equal], vec![0, 1]),
        _ => (FullA, [FullA, Equal], vec![0]),
    };
    Ok(SplitterPlan {
        stage1,
        stage2,
        active_quarters: active,
    })
}
