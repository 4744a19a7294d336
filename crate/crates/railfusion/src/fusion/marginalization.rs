//! Schur-complement marginalization of sliding-window variables into a
//! Gaussian prior on the retained variables.
//!
//! The linearization point is frozen at marginalization time, so on linear
//! problems the windowed solution reproduces the batch solution exactly and
//! on nonlinear ones no spurious information is injected along directions
//! that were unobservable at the time of elimination.

use super::graph::{Factor, FactorEval, Variable, VarKey};
use nalgebra::{DMatrix, DVector};

/// Gaussian prior over a set of retained variables, stored in square-root
/// form: cost = 1/2 || r0 + J * local(lin, x) ||^2.
#[derive(Debug, Clone)]
pub struct PriorDensity {
    /// Linearization points of the retained variables, in key order.
    pub lin: Vec<Variable>,
    pub jac: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl PriorDensity {
    /// Information matrix recovered from the square-root form.
    pub fn information(&self) -> DMatrix<f64> {
        self.jac.transpose() * &self.jac
    }
}

/// Eliminate `marg` (indices into `vars`) from the subproblem formed by
/// `factors`, producing a prior over the remaining variables referenced by
/// those factors. Returns the prior plus the retained keys in the order the
/// prior blocks are laid out.
pub fn marginalize(
    factors: &[&dyn Factor],
    vars: &[Variable],
    marg: &[VarKey],
) -> (PriorDensity, Vec<VarKey>) {
    // Involved variables: marginalized first, then retained in first-seen order.
    let mut retained: Vec<VarKey> = Vec::new();
    for f in factors {
        for &k in f.keys() {
            if !marg.contains(&k) && !retained.contains(&k) {
                retained.push(k);
            }
        }
    }
    let mut order: Vec<VarKey> = marg.to_vec();
    order.extend(retained.iter().cloned());

    let mut offsets = Vec::with_capacity(order.len());
    let mut total = 0;
    for &k in &order {
        offsets.push(total);
        total += vars[k].dim();
    }
    let m_dim: usize = marg.iter().map(|&k| vars[k].dim()).sum();
    let r_dim = total - m_dim;

    let mut h = DMatrix::zeros(total, total);
    let mut g = DVector::zeros(total);
    for f in factors {
        let mut eval: FactorEval = f.linearize(vars);
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
        for (i, &ki) in f.keys().iter().enumerate() {
            let oi = offsets[order.iter().position(|&k| k == ki).unwrap()];
            let ji = &eval.jacobians[i];
            g.rows_mut(oi, ji.ncols())
                .gemv_tr(1.0, ji, &eval.residual, 1.0);
            for (j, &kj) in f.keys().iter().enumerate() {
                let oj = offsets[order.iter().position(|&k| k == kj).unwrap()];
                let jj = &eval.jacobians[j];
                let mut blk = h.view_mut((oi, oj), (ji.ncols(), jj.ncols()));
                blk.gemm_tr(1.0, ji, jj, 1.0);
            }
        }
    }

    let h_mm = h.view((0, 0), (m_dim, m_dim)).into_owned();
    let h_mr = h.view((0, m_dim), (m_dim, r_dim)).into_owned();
    let h_rr = h.view((m_dim, m_dim), (r_dim, r_dim)).into_owned();
    let g_m = g.rows(0, m_dim).into_owned();
    let g_r = g.rows(m_dim, r_dim).into_owned();

    // Invert the marginal block with a jitter fallback for directions the
    // subproblem never constrained.
    let scale = h_mm.diagonal().amax().max(1.0);
    let mut h_mm_reg = h_mm.clone();
    let chol = loop {
        match h_mm_reg.clone().cholesky() {
            Some(c) => break c,
            None => {
                for i in 0..m_dim {
                    h_mm_reg[(i, i)] += 1e-9 * scale;
                }
            }
        }
    };
    let hm_inv_hmr = chol.solve(&h_mr);
    let hm_inv_gm = chol.solve(&g_m);

    let h_new = &h_rr - h_mr.transpose() * &hm_inv_hmr;
    let g_new = g_r - h_mr.transpose() * hm_inv_gm;
    let h_new = (&h_new + h_new.transpose()) * 0.5;

    // Square-root form via eigendecomposition, dropping the null space.
    let eig = h_new.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.amax().max(1e-300);
    let kept: Vec<usize> = (0..r_dim)
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * max_eig)
        .collect();
    let mut jac = DMatrix::zeros(kept.len(), r_dim);
    let mut r0 = DVector::zeros(kept.len());
    // g_new in the eigenbasis gives the residual at the linearization point.
    for (row, &i) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        let u = eig.eigenvectors.column(i);
        let srt = lam.sqrt();
        for c in 0..r_dim {
            jac[(row, c)] = srt * u[c];
        }
        r0[row] = u.dot(&g_new) / srt;
    }

    let lin = retained.iter().map(|&k| vars[k].clone()).collect();
    (PriorDensity { lin, jac, r0 }, retained)
}

/// Factor wrapping a [`PriorDensity`] with graph keys resolved.
pub struct PriorFactor {
    keys: Vec<VarKey>,
    density: PriorDensity,
}

impl PriorFactor {
    pub fn new(keys: Vec<VarKey>, density: PriorDensity) -> Self {
        debug_assert_eq!(keys.len(), density.lin.len());
        PriorFactor { keys, density }
    }

    pub fn density(&self) -> &PriorDensity {
        &self.density
    }
}

impl Factor for PriorFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        self.density.r0.len()
    }

    fn linearize(&self, vars: &[Variable]) -> FactorEval {
        let d = &self.density;
        let mut dx = DVector::zeros(d.jac.ncols());
        let mut jacobians = Vec::with_capacity(self.keys.len());
        let mut off = 0;
        for (i, &k) in self.keys.iter().enumerate() {
            let lin = &d.lin[i];
            let local = lin.local(&vars[k]);
            let dim = local.len();
            dx.rows_mut(off, dim).copy_from(&local);
            let cols = d.jac.columns(off, dim).into_owned();
            jacobians.push(cols * lin.local_jacobian(&vars[k]));
            off += dim;
        }
        FactorEval {
            residual: &d.r0 + &d.jac * dx,
            jacobians,
        }
    }
}
