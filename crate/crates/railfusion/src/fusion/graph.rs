//! Dense nonlinear least-squares machinery for the sliding window.
//!
//! Variables are heterogeneous blocks (full vehicle states, point landmarks,
//! plain vectors for tests); factors produce whitened residuals and Jacobian
//! blocks. The solver is Levenberg-Marquardt over the block retraction with
//! an explicit gauge check: an unanchored problem is reported rank-deficient
//! (with the offending block identified) instead of being silently solved.

use crate::geom::{so3_inv_right_jacobian, so3_log, State, Vec3, STATE_DIM};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone)]
pub enum Variable {
    State(State),
    Point(Vec3),
    Vector(DVector<f64>),
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::State(_) => STATE_DIM,
            Variable::Point(_) => 3,
            Variable::Vector(v) => v.len(),
        }
    }

    pub fn retract(&self, dx: &[f64]) -> Variable {
        match self {
            Variable::State(s) => Variable::State(s.retract(dx)),
            Variable::Point(p) => {
                Variable::Point(Vec3::new(p.x + dx[0], p.y + dx[1], p.z + dx[2]))
            }
            Variable::Vector(v) => {
                let mut out = v.clone();
                for (o, d) in out.iter_mut().zip(dx) {
                    *o += d;
                }
                Variable::Vector(out)
            }
        }
    }

    /// Local coordinates of `other` around `self`.
    pub fn local(&self, other: &Variable) -> DVector<f64> {
        match (self, other) {
            (Variable::State(a), Variable::State(b)) => DVector::from_row_slice(&a.local(b)),
            (Variable::Point(a), Variable::Point(b)) => {
                DVector::from_row_slice(&[b.x - a.x, b.y - a.y, b.z - a.z])
            }
            (Variable::Vector(a), Variable::Vector(b)) => b - a,
            _ => panic!("variable kind mismatch in local()"),
        }
    }

    /// Jacobian of `self.local(x)` with respect to the retraction of `x`,
    /// evaluated at `x = other`. Identity except for the rotation block.
    pub fn local_jacobian(&self, other: &Variable) -> DMatrix<f64> {
        match (self, other) {
            (Variable::State(a), Variable::State(b)) => {
                let mut j = DMatrix::identity(STATE_DIM, STATE_DIM);
                let th = so3_log(&(a.q.inverse() * b.q));
                j.view_mut((6, 6), (3, 3))
                    .copy_from(&so3_inv_right_jacobian(&th));
                j
            }
            _ => DMatrix::identity(self.dim(), self.dim()),
        }
    }

    pub fn as_state(&self) -> &State {
        match self {
            Variable::State(s) => s,
            _ => panic!("expected state variable"),
        }
    }

    pub fn as_point(&self) -> &Vec3 {
        match self {
            Variable::Point(p) => p,
            _ => panic!("expected point variable"),
        }
    }
}

pub type VarKey = usize;

/// Whitened linearization of one factor.
pub struct FactorEval {
    pub residual: DVector<f64>,
    /// One block per key, dimensions residual.len() x vars[key].dim().
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait Factor {
    fn keys(&self) -> &[VarKey];
    fn dim(&self) -> usize;
    fn linearize(&self, vars: &[Variable]) -> FactorEval;
    /// Huber threshold in whitened units; `None` disables the robust loss.
    fn robust(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub cost_rel_tol: f64,
    pub step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 20,
            lambda_init: 1e-4,
            cost_rel_tol: 1e-6,
            step_tol: 1e-8,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("normal equations rank-deficient at variable {var} (block min eigenvalue {min_eig:.3e})")]
    RankDeficient { var: VarKey, min_eig: f64 },
    #[error("problem has no variables or factors")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

pub struct FactorGraph {
    pub vars: Vec<Variable>,
    pub factors: Vec<Box<dyn Factor>>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl Default for FactorGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph {
            vars: Vec::new(),
            factors: Vec::new(),
            offsets: Vec::new(),
            total_dim: 0,
        }
    }

    pub fn add_variable(&mut self, v: Variable) -> VarKey {
        self.vars.push(v);
        self.vars.len() - 1
    }

    pub fn add_factor(&mut self, f: Box<dyn Factor>) {
        debug_assert!(f.keys().iter().all(|&k| k < self.vars.len()));
        self.factors.push(f);
    }

    fn rebuild_offsets(&mut self) {
        self.offsets.clear();
        let mut off = 0;
        for v in &self.vars {
            self.offsets.push(off);
            off += v.dim();
        }
        self.total_dim = off;
    }

    /// Robust cost at the current values.
    pub fn cost(&self) -> f64 {
        self.cost_at(&self.vars)
    }

    fn cost_at(&self, vars: &[Variable]) -> f64 {
        let mut c = 0.0;
        for f in &self.factors {
            let eval = f.linearize(vars);
            let n2 = eval.residual.norm_squared();
            c += match f.robust() {
                Some(delta) => {
                    let n = n2.sqrt();
                    if n <= delta {
                        0.5 * n2
                    } else {
                        delta * n - 0.5 * delta * delta
                    }
                }
                None => 0.5 * n2,
            };
        }
        c
    }

    /// Assemble the (robust-reweighted) normal equations at the current
    /// values: `H dx = -g`.
    fn assemble(&self, vars: &[Variable]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.total_dim;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in &self.factors {
            let mut eval = f.linearize(vars);
            if let Some(delta) = f.robust() {
                let norm = eval.residual.norm();
                if norm > delta {
                    let w = (delta / norm).sqrt();
                    eval.residual *= w;
                    for j in &mut eval.jacobians {
                        *j *= w;
                    }
                }
            }
            let keys = f.keys();
            for (i, &ki) in keys.iter().enumerate() {
                let ji = &eval.jacobians[i];
                let oi = self.offsets[ki];
                let di = vars[ki].dim();
                g.rows_mut(oi, di)
                    .gemv_tr(1.0, ji, &eval.residual, 1.0);
                for (j, &kj) in keys.iter().enumerate() {
                    let jj = &eval.jacobians[j];
                    let oj = self.offsets[kj];
                    let dj = vars[kj].dim();
                    let mut block = h.view_mut((oi, oj), (di, dj));
                    block.gemm_tr(1.0, ji, jj, 1.0);
                }
            }
        }
        (h, g)
    }

    /// Locate the weakest diagonal block of `h`, for rank-deficiency reports.
    fn weakest_block(&self, h: &DMatrix<f64>) -> (VarKey, f64) {
        let mut worst = (0, f64::INFINITY);
        for (k, v) in self.vars.iter().enumerate() {
            let o = self.offsets[k];
            let d = v.dim();
            let block = h.view((o, o), (d, d)).into_owned();
            let min_eig = block
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if min_eig < worst.1 {
                worst = (k, min_eig);
            }
        }
        worst
    }

    /// Levenberg-Marquardt; on success the variables hold the optimum, on a
    /// rank-deficiency report they are left unchanged.
    pub fn solve(&mut self, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
        if self.vars.is_empty() || self.factors.is_empty() {
            return Err(SolveError::Empty);
        }
        self.rebuild_offsets();

        let mut vars = self.vars.clone();
        let initial_cost = self.cost_at(&vars);
        let mut cost = initial_cost;
        let mut lambda = cfg.lambda_init;
        let mut iterations = 0;

        for iter in 0..cfg.max_iterations {
            let (h, g) = self.assemble(&vars);

            if iter == 0 {
                // Gauge check on the undamped system.
                let scale = h.diagonal().amax().max(1e-300);
                let ok = match h.clone().cholesky() {
                    Some(chol) => {
                        let min_pivot = chol.l().diagonal().amin();
                        min_pivot * min_pivot > 1e-12 * scale
                    }
                    None => false,
                };
                if !ok {
                    let (var, min_eig) = self.weakest_block(&h);
                    return Err(SolveError::RankDeficient { var, min_eig });
                }
            }

            if cost == 0.0 {
                break;
            }

            let mut accepted = false;
            for _ in 0..8 {
                let mut hd = h.clone();
                for i in 0..hd.nrows() {
                    hd[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(chol) = hd.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let dx = chol.solve(&(-&g));
                let step_norm = dx.norm();
                let mut cand = vars.clone();
                for (k, v) in cand.iter_mut().enumerate() {
                    let o = self.offsets[k];
                    let d = v.dim();
                    *v = v.retract(dx.rows(o, d).as_slice());
                }
                let cand_cost = self.cost_at(&cand);
                if cand_cost <= cost {
                    let rel_drop = (cost - cand_cost) / cost.max(1e-300);
                    vars = cand;
                    cost = cand_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    iterations = iter + 1;
                    if rel_drop < cfg.cost_rel_tol || step_norm < cfg.step_tol {
                        self.vars = vars;
                        return Ok(SolveReport {
                            iterations,
                            initial_cost,
                            final_cost: cost,
                        });
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }

        self.vars = vars;
        Ok(SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
        })
    }

    /// Marginal covariance block of one variable at the current linearization
    /// (inverse of the undamped normal matrix restricted to that block).
    pub fn marginal_covariance(&mut self, key: VarKey) -> Option<DMatrix<f64>> {
        self.rebuild_offsets();
        let (h, _) = self.assemble(&self.vars);
        let chol = h.cholesky()?;
        let o = self.offsets[key];
        let d = self.vars[key].dim();
        let mut cov = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(self.total_dim);
            e[o + j] = 1.0;
            let col = chol.solve(&e);
            cov.column_mut(j).copy_from(&col.rows(o, d));
        }
        Some(cov)
    }
}
