//! Local low-rank adaptation.
//!
//! Small adapters `ΔA = U_A·V_A` and `ΔB = U_B·V_B` of rank `max(1, r/4)` are
//! fit by gradient descent on the calibration objective
//! `‖W·X − ((A+ΔA)(B+ΔB) + S)·X‖²` and then merged into the factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecomposeError, Decomposition, Result};
use crate::linalg::{frobenius_norm, Matrix};
use crate::scalar::Scalar;

const LR_FLOOR: f64 = 1e-8;
const INIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Adapter parameters. `ua: m x k`, `va: k x r`, `ub: r x k`, `vb: k x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptParams<T> {
    pub ua: Matrix<T>,
    pub va: Matrix<T>,
    pub ub: Matrix<T>,
    pub vb: Matrix<T>,
}

impl<T: Scalar> AdaptParams<T> {
    pub fn len(&self) -> usize {
        self.ua.data().len() + self.va.data().len() + self.ub.data().len() + self.vb.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn parts(&self) -> [&Matrix<T>; 4] {
        [&self.ua, &self.va, &self.ub, &self.vb]
    }

    fn parts_mut(&mut self) -> [&mut Matrix<T>; 4] {
        [&mut self.ua, &mut self.va, &mut self.ub, &mut self.vb]
    }

    /// Flat coordinate access across all four blocks.
    pub fn get(&self, idx: usize) -> T {
        let mut i = idx;
        for p in self.parts() {
            if i < p.data().len() {
                return p.data()[i];
            }
            i -= p.data().len();
        }
        panic!("coordinate {idx} out of range");
    }

    pub fn set(&mut self, idx: usize, v: T) {
        let mut i = idx;
        for p in self.parts_mut() {
            if i < p.data().len() {
                p.data_mut()[i] = v;
                return;
            }
            i -= p.data().len();
        }
        panic!("coordinate {idx} out of range");
    }

    fn axpy(&self, step: T, dir: &Self) -> Self {
        let mut out = self.clone();
        for (o, d) in out.parts_mut().into_iter().zip(dir.parts()) {
            for (x, &g) in o.data_mut().iter_mut().zip(d.data()) {
                *x -= step * g;
            }
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.parts().iter().all(|p| p.is_finite())
    }
}

/// Calibration regression for one layer with fixed `A`, `B`, `S`.
pub struct AdaptProblem<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    x: Matrix<T>,
    /// `(W − S)·X`
    target: Matrix<T>,
}

impl<T: Scalar> AdaptProblem<T> {
    pub fn new(dec: &Decomposition<T>, w: &Matrix<T>, x_calib: &Matrix<T>) -> Result<Self> {
        if w.shape() != dec.sparse.shape() || x_calib.rows() != w.cols() {
            return Err(DecomposeError::InvalidParam(format!(
                "weight {:?}, sparse {:?}, calibration {:?} disagree",
                w.shape(),
                dec.sparse.shape(),
                x_calib.shape()
            )));
        }
        let target = w.sub(&dec.sparse.expand())?.matmul(x_calib)?;
        Ok(Self {
            a: dec.a.clone(),
            b: dec.b.clone(),
            x: x_calib.clone(),
            target,
        })
    }

    /// Adapter rank for factor rank `r`.
    pub fn adapter_rank(r: usize) -> usize {
        (r / 4).max(1)
    }

    /// `U ~ U(±1e-3)`, `V = 0`: both adapters start at zero.
    pub fn init_params(&self, seed: u64) -> AdaptParams<T> {
        let (m, r) = self.a.shape();
        let n = self.b.cols();
        let k = Self::adapter_rank(r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows, cols| {
            Matrix::from_fn(rows, cols, |_, _| {
                T::of(rng.gen_range(-INIT_SCALE..INIT_SCALE))
            })
        };
        AdaptParams {
            ua: uniform(m, k),
            va: Matrix::zeros(k, r),
            ub: uniform(r, k),
            vb: Matrix::zeros(k, n),
        }
    }

    fn merged(&self, p: &AdaptParams<T>) -> (Matrix<T>, Matrix<T>) {
        let a = self
            .a
            .add(&p.ua.matmul(&p.va).expect("adapter shapes"))
            .expect("adapter shapes");
        let b = self
            .b
            .add(&p.ub.matmul(&p.vb).expect("adapter shapes"))
            .expect("adapter shapes");
        (a, b)
    }

    /// `(W−S)·X − A'·(B'·X)` together with `B'·X` and the merged factors.
    fn residual(&self, p: &AdaptParams<T>) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (a, b) = self.merged(p);
        let bx = b.matmul(&self.x).expect("calibration shape checked");
        let r = self
            .target
            .sub(&a.matmul(&bx).expect("factor shapes"))
            .expect("output shape");
        (r, bx, a)
    }

    pub fn objective(&self, p: &AdaptParams<T>) -> T {
        let n = frobenius_norm(&self.residual(p).0);
        n * n
    }

    /// Analytic gradient of [`objective`](Self::objective).
    pub fn gradient(&self, p: &AdaptParams<T>) -> AdaptParams<T> {
        let (r, bx, a) = self.residual(p);
        let minus_two = T::of(-2.0);
        // ∂f/∂A' = −2·R·(B'X)ᵀ,  ∂f/∂B' = −2·A'ᵀ·R·Xᵀ
        let ga = r.matmul(&bx.transpose()).expect("shapes").scale(minus_two);
        let gb = a
            .transpose()
            .matmul(&r)
            .expect("shapes")
            .matmul(&self.x.transpose())
            .expect("shapes")
            .scale(minus_two);
        AdaptParams {
            ua: ga.matmul(&p.va.transpose()).expect("shapes"),
            va: p.ua.transpose().matmul(&ga).expect("shapes"),
            ub: gb.matmul(&p.vb.transpose()).expect("shapes"),
            vb: p.ub.transpose().matmul(&gb).expect("shapes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
    pub trace: Vec<f64>,
}

/// Fit and merge local adapters.
///
/// Gradient descent with step control: an increase rejects the step and
/// halves the rate; an accepted step doubles it. Stops after `steps`
/// attempts or when the rate falls under `1e-8`. The step is taken on the
/// objective normalized by `‖(W−S)·X‖²`.
pub fn local_adapt<T: Scalar>(
    dec: &Decomposition<T>,
    w: &Matrix<T>,
    x_calib: &Matrix<T>,
    cfg: &AdaptConfig,
) -> Result<(Decomposition<T>, AdaptReport)> {
    let problem = AdaptProblem::new(dec, w, x_calib)?;
    let mut params = problem.init_params(cfg.seed);
    let mut obj = problem.objective(&params);
    let initial = obj.to_f64_lossy();
    let norm = frobenius_norm(&problem.target);
    let scale = if norm > T::zero() {
        T::one() / (norm * norm)
    } else {
        T::one()
    };
    let mut lr = cfg.lr;
    let mut trace = vec![initial];
    let mut accepted = 0;

    for step in 0..cfg.steps {
        if obj == T::zero() || lr < LR_FLOOR {
            break;
        }
        let grad = problem.gradient(&params);
        if !grad.all_finite() {
            return Err(DecomposeError::NonFiniteGradient { step });
        }
        let candidate = params.axpy(T::of(lr) * scale, &grad);
        let cand_obj = problem.objective(&candidate);
        if cand_obj.is_finite() && cand_obj < obj {
            params = candidate;
            obj = cand_obj;
            accepted += 1;
            lr *= 2.0;
        } else {
            lr *= 0.5;
        }
        trace.push(obj.to_f64_lossy());
    }

    let (a, b) = problem.merged(&params);
    let out = Decomposition {
        a,
        b,
        ..dec.clone()
    };
    Ok((
        out,
        AdaptReport {
            initial_objective: initial,
            final_objective: obj.to_f64_lossy(),
            accepted_steps: accepted,
            trace,
        },
    ))
}

/// Calibration objective `‖W·X − (A·B + S)·X‖²` of a decomposition.
pub fn calibration_objective<T: Scalar>(
    dec: &Decomposition<T>,
    w: &Matrix<T>,
    x: &Matrix<T>,
) -> Result<T> {
    let diff = w.sub(&dec.reconstruct())?.matmul(x)?;
    let n = frobenius_norm(&diff);
    Ok(n * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{compute_scaling, decompose_layer, StructuredSparse};

    type M = Matrix<f64>;

    fn setup(seed: u64) -> (M, M, Decomposition<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = M::from_fn(16, 24, |_, _| rng.gen_range(-1.0..1.0));
        let x = M::from_fn(24, 64, |j, _| {
            rng.gen_range(-1.0..1.0) * (1.0 + (j % 5) as f64)
        });
        let sc = compute_scaling(&x).unwrap();
        let dec = decompose_layer(&w, &sc, 4, 0.125, 4, 10).unwrap();
        (w, x, dec)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (w, x, dec) = setup(1);
        let cfg = AdaptConfig {
            steps: 0,
            ..Default::default()
        };
        let (out, rep) = local_adapt(&dec, &w, &x, &cfg).unwrap();
        assert_eq!(out, dec);
        assert_eq!(rep.initial_objective, rep.final_objective);
    }

    #[test]
    fn perfect_decomposition_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = M::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let b = M::from_fn(2, 8, |_, _| rng.gen_range(-1.0..1.0));
        let w = a.matmul(&b).unwrap();
        let x = M::from_fn(8, 20, |_, _| rng.gen_range(-1.0..1.0));
        let dec = Decomposition {
            a,
            b,
            sparse: StructuredSparse::zeros(6, 8, 2, 1),
            rank: 2,
            objective_trace: vec![0.0],
            best_objective: 0.0,
        };
        let problem = AdaptProblem::new(&dec, &w, &x).unwrap();
        let p = problem.init_params(0);
        let g = problem.gradient(&p);
        assert!((0..g.len()).all(|i| g.get(i).abs() < 1e-12));
        let (out, rep) = local_adapt(&dec, &w, &x, &AdaptConfig::default()).unwrap();
        assert!(rep.final_objective < 1e-20);
        assert!(calibration_objective(&out, &w, &x).unwrap() < 1e-20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, x, dec) = setup(3);
        let problem = AdaptProblem::new(&dec, &w, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut p = problem.init_params(1);
        for i in 0..p.len() {
            p.set(i, rng.gen_range(-0.1..0.1));
        }
        let g = problem.gradient(&p);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..p.len());
            let mut plus = p.clone();
            plus.set(i, p.get(i) + h);
            let mut minus = p.clone();
            minus.set(i, p.get(i) - h);
            let fd = (problem.objective(&plus) - problem.objective(&minus)) / (2.0 * h);
            let rel = (fd - g.get(i)).abs() / fd.abs().max(g.get(i).abs()).max(1e-8);
            assert!(rel <= 1e-4, "coord {i}: fd {fd} vs analytic {}", g.get(i));
        }
    }

    #[test]
    fn improves_calibration_objective() {
        let (w, x, dec) = setup(4);
        let before = calibration_objective(&dec, &w, &x).unwrap();
        let cfg = AdaptConfig {
            steps: 50,
            ..Default::default()
        };
        let (out, rep) = local_adapt(&dec, &w, &x, &cfg).unwrap();
        let after = calibration_objective(&out, &w, &x).unwrap();
        assert!((rep.initial_objective - before).abs() <= 1e-9 * before);
        assert!((rep.final_objective - after).abs() <= 1e-9 * before);
        assert!(after <= before);
        assert!(rep.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.sparse, dec.sparse);
    }

    #[test]
    fn adapter_rank_floor() {
        assert_eq!(AdaptProblem::<f64>::adapter_rank(1), 1);
        assert_eq!(AdaptProblem::<f64>::adapter_rank(8), 2);
        assert_eq!(AdaptProblem::<f64>::adapter_rank(13), 3);
    }
}
