//! Cost evaluation and the model-free minimization oracle.
//!
//! The cost functional J(t, xi; u) is evaluated by solving the state BSDE
//! under u and averaging the quadratic form over paths. Independently of the
//! Riccati construction, the discretized problem is a strictly convex
//! quadratic in the control coordinates; [`DiscreteOperatorBundle`] exposes
//! matrix-free applications of the discrete solution map and of its exact
//! transpose, and [`oracle_minimize`] drives conjugate gradients on the
//! induced normal equations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bsde::{solve_state_bsde, ControlProcess, StepCoeff};
use crate::error::{Error, Result};
use crate::fields::VecField;
use crate::grid::{PathEnsemble, TimeGrid};
use crate::problem::ProblemInstance;
use crate::regression::{Projector, RegressionBasis};

/// Monte Carlo cost value split into its quadratic parts.
#[derive(Debug, Clone, Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    /// <G Y(t0), Y(t0)> part.
    pub terminal_part: f64,
    pub q_part: f64,
    pub n_part: f64,
    pub r_part: f64,
    /// Monte Carlo standard error of `total`.
    pub stderr: f64,
}

/// Per-path cost totals alongside the aggregate breakdown.
pub struct CostSample {
    pub breakdown: CostBreakdown,
    pub per_path: Vec<f64>,
}

/// Evaluate the cost of a control: solve the state BSDE under (xi, u), then
/// average <G Y(t0), Y(t0)> + sum_k [<Q Y, Y> + <N Z, Z> + <R u, u>] dt.
pub fn evaluate_cost(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    u: &ControlProcess,
    xi_values: &[DMatrix<f64>],
    basis: &RegressionBasis,
) -> Result<CostBreakdown> {
    Ok(evaluate_cost_per_path(p, paths, u, xi_values, basis)?.breakdown)
}

pub fn evaluate_cost_per_path(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    u: &ControlProcess,
    xi_values: &[DMatrix<f64>],
    basis: &RegressionBasis,
) -> Result<CostSample> {
    let sol = solve_state_bsde(p, paths, u, xi_values, basis)?;
    cost_of_solution(p, paths, &sol.y, &sol.z, u)
}

/// Quadratic form of given (Y, Z, u) samples; shared by the direct evaluator
/// and the verification paths.
pub(crate) fn cost_of_solution(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    y: &VecField,
    z: &VecField,
    u: &ControlProcess,
) -> Result<CostSample> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let dt = grid.dt();
    let mut per_path = vec![0.0; m_paths];
    let mut terminal_acc = 0.0;
    let mut q_acc = 0.0;
    let mut n_acc = 0.0;
    let mut r_acc = 0.0;

    let g = p.G.eval(grid.t0(), 0.0)?;
    for i in 0..m_paths {
        let y0 = DVector::from_column_slice(y.at(i, 0));
        let gterm = (&g * &y0).dot(&y0);
        terminal_acc += gterm;
        per_path[i] += gterm;
    }
    for k in 0..k_steps {
        let t_k = grid.time(k);
        let q_step = StepCoeff::new(&p.Q, t_k)?;
        let n_step = StepCoeff::new(&p.N, t_k)?;
        let r_step = StepCoeff::new(&p.R, t_k)?;
        for i in 0..m_paths {
            let w = paths.value(i, k);
            let qm = q_step.at(w)?;
            let nm = n_step.at(w)?;
            let rm = r_step.at(w)?;
            let y_k = DVector::from_column_slice(y.at(i, k));
            let z_k = DVector::from_column_slice(z.at(i, k));
            let u_k = DVector::from_column_slice(u.values.at(i, k));
            let q_c = (qm * &y_k).dot(&y_k) * dt;
            let n_c = (nm * &z_k).dot(&z_k) * dt;
            let r_c = (rm * &u_k).dot(&u_k) * dt;
            q_acc += q_c;
            n_acc += n_c;
            r_acc += r_c;
            per_path[i] += q_c + n_c + r_c;
        }
    }
    let m = m_paths as f64;
    let total = per_path.iter().sum::<f64>() / m;
    let var = per_path
        .iter()
        .map(|v| (v - total) * (v - total))
        .sum::<f64>()
        / m;
    let stderr = (var / m).sqrt();
    Ok(CostSample {
        breakdown: CostBreakdown {
            total,
            terminal_part: terminal_acc / m,
            q_part: q_acc / m,
            n_part: n_acc / m,
            r_part: r_acc / m,
            stderr,
        },
        per_path,
    })
}

/// Least-squares quadratic fit of eps -> J(u* + eps * direction).
#[derive(Debug, Clone, Serialize)]
pub struct QuadraticExpansion {
    /// Linear coefficient; vanishes at the optimum.
    pub linear: f64,
    /// Monte Carlo standard error of the linear coefficient.
    pub linear_stderr: f64,
    /// Quadratic coefficient; at least delta * |direction|^2 under uniform
    /// convexity.
    pub quadratic: f64,
    /// Squared L2 norm of the direction.
    pub direction_norm_sq: f64,
}

/// Cost expansion along a direction with common random numbers: the same
/// ensemble drives every evaluation, so the per-path fit is an exact
/// quadratic and the linear coefficient is the discrete directional
/// derivative.
pub fn quadratic_expansion_check(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    u_star: &ControlProcess,
    direction: &ControlProcess,
    eps_list: &[f64],
    xi_values: &[DMatrix<f64>],
    basis: &RegressionBasis,
) -> Result<QuadraticExpansion> {
    if eps_list.is_empty() {
        return Err(Error::Validation("eps list must be nonempty".into()));
    }
    for &e in eps_list {
        if !eps_list.iter().any(|&o| (o + e).abs() < 1e-15) {
            return Err(Error::Validation(
                "eps list must be symmetric around 0".into(),
            ));
        }
    }
    let mut points: Vec<f64> = vec![0.0];
    points.extend_from_slice(eps_list);
    points.sort_by(|a, b| a.total_cmp(b));
    points.dedup();

    let m_paths = paths.paths();
    let mut costs: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for &e in &points {
        let mut u_e = u_star.clone();
        u_e.values.axpby(1.0, e, &direction.values);
        costs.push(evaluate_cost_per_path(p, paths, &u_e, xi_values, basis)?.per_path);
    }

    // Normal equations of the fit J(e) ~ c0 + c1 e + c2 e^2, shared by paths.
    let cols = 3.min(points.len());
    let mut xtx = DMatrix::<f64>::zeros(cols, cols);
    for &e in &points {
        let row = [1.0, e, e * e];
        for r in 0..cols {
            for c in 0..cols {
                xtx[(r, c)] += row[r] * row[c];
            }
        }
    }
    let xtx_inv = xtx
        .try_inverse()
        .ok_or(Error::DegenerateInput("eps design singular".into()))?;

    let mut lin = vec![0.0; m_paths];
    let mut quad = vec![0.0; m_paths];
    for i in 0..m_paths {
        let mut xty = DVector::<f64>::zeros(cols);
        for (pt, &e) in points.iter().enumerate() {
            let row = [1.0, e, e * e];
            for r in 0..cols {
                xty[r] += row[r] * costs[pt][i];
            }
        }
        let coef = &xtx_inv * xty;
        lin[i] = if cols > 1 { coef[1] } else { 0.0 };
        quad[i] = if cols > 2 { coef[2] } else { 0.0 };
    }
    let m = m_paths as f64;
    let linear = lin.iter().sum::<f64>() / m;
    let lin_var = lin.iter().map(|v| (v - linear) * (v - linear)).sum::<f64>() / m;
    let quadratic = quad.iter().sum::<f64>() / m;
    let dt = paths.grid().dt();
    let dir_norm_sq = direction.values.dot(&direction.values) * dt / m;
    Ok(QuadraticExpansion {
        linear,
        linear_stderr: (lin_var / m).sqrt(),
        quadratic,
        direction_norm_sq: dir_norm_sq,
    })
}

/// Matrix-free discretization of the control-to-state maps and the weights,
/// with exact transposes. Intended for modest sizes (the conjugate-gradient
/// oracle); per-step pieces are precomputed.
pub struct DiscreteOperatorBundle<'a> {
    p: &'a ProblemInstance,
    paths: &'a PathEnsemble,
    grid: TimeGrid,
    projectors: Vec<Projector>,
    increments: Vec<Vec<f64>>,
    /// (I + dt A)^{-1} per (step, path).
    s_inv: Vec<Vec<DMatrix<f64>>>,
    b_mats: Vec<Vec<DMatrix<f64>>>,
    c_mats: Vec<Vec<DMatrix<f64>>>,
    q_mats: Vec<Vec<DMatrix<f64>>>,
    n_mats: Vec<Vec<DMatrix<f64>>>,
    r_mats: Vec<Vec<DMatrix<f64>>>,
    g_mat: DMatrix<f64>,
}

impl<'a> DiscreteOperatorBundle<'a> {
    pub fn new(
        p: &'a ProblemInstance,
        paths: &'a PathEnsemble,
        basis: &RegressionBasis,
    ) -> Result<Self> {
        let grid = *paths.grid();
        let k_steps = grid.steps();
        let m_paths = paths.paths();
        let n = p.n;
        let dt = grid.dt();
        let eye = DMatrix::<f64>::identity(n, n);
        let mut projectors = Vec::with_capacity(k_steps);
        let mut increments = Vec::with_capacity(k_steps);
        let mut s_inv = Vec::with_capacity(k_steps);
        let mut b_mats = Vec::with_capacity(k_steps);
        let mut c_mats = Vec::with_capacity(k_steps);
        let mut q_mats = Vec::with_capacity(k_steps);
        let mut n_mats = Vec::with_capacity(k_steps);
        let mut r_mats = Vec::with_capacity(k_steps);
        for k in 0..k_steps {
            let t_k = grid.time(k);
            let w_col = paths.step_values(k);
            projectors.push(Projector::new(&w_col, basis)?);
            increments.push(paths.step_increments(k));
            let a_step = StepCoeff::new(&p.A, t_k)?;
            let b_step = StepCoeff::new(&p.B, t_k)?;
            let c_step = StepCoeff::new(&p.C, t_k)?;
            let q_step = StepCoeff::new(&p.Q, t_k)?;
            let n_step = StepCoeff::new(&p.N, t_k)?;
            let r_step = StepCoeff::new(&p.R, t_k)?;
            let mut s_row = Vec::with_capacity(m_paths);
            let mut b_row = Vec::with_capacity(m_paths);
            let mut c_row = Vec::with_capacity(m_paths);
            let mut q_row = Vec::with_capacity(m_paths);
            let mut n_row = Vec::with_capacity(m_paths);
            let mut r_row = Vec::with_capacity(m_paths);
            for i in 0..m_paths {
                let w = w_col[i];
                let a = a_step.at(w)?;
                let lhs = &eye + a * dt;
                let inv = lhs.try_inverse().ok_or(Error::LinearSolve { step: k })?;
                s_row.push(inv);
                b_row.push(b_step.at(w)?);
                c_row.push(c_step.at(w)?);
                q_row.push(q_step.at(w)?);
                n_row.push(n_step.at(w)?);
                r_row.push(r_step.at(w)?);
            }
            s_inv.push(s_row);
            b_mats.push(b_row);
            c_mats.push(c_row);
            q_mats.push(q_row);
            n_mats.push(n_row);
            r_mats.push(r_row);
        }
        let g_mat = p.G.eval(grid.t0(), 0.0)?;
        Ok(DiscreteOperatorBundle {
            p,
            paths,
            grid,
            projectors,
            increments,
            s_inv,
            b_mats,
            c_mats,
            q_mats,
            n_mats,
            r_mats,
            g_mat,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn control_dim(&self) -> usize {
        self.p.m
    }

    fn m_paths(&self) -> usize {
        self.paths.paths()
    }

    /// Componentwise projection of an (path x dim) step slice.
    fn project(&self, k: usize, field: &VecField, step: usize, out: &mut [Vec<f64>]) {
        let dim = field.dim();
        for d in 0..dim {
            let col = field.component_column(step, d);
            out[d] = self.projectors[k].fitted(&col);
        }
    }

    /// T_k v = P[(v - P v) dW]/dt, applied componentwise on step `step` of `field`.
    fn t_apply(&self, k: usize, field: &VecField, step: usize) -> Vec<Vec<f64>> {
        let dim = field.dim();
        let dt = self.grid.dt();
        let dw = &self.increments[k];
        let mut out = Vec::with_capacity(dim);
        for d in 0..dim {
            let col = field.component_column(step, d);
            out.push(self.projectors[k].dw_coefficient(&col, dw, dt));
        }
        out
    }

    /// Transpose of `t_apply` on per-component columns:
    /// T^T x = (I - P)[dW * (P x)]/dt.
    fn t_transpose(&self, k: usize, cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dt = self.grid.dt();
        let dw = &self.increments[k];
        cols.iter()
            .map(|col| {
                let px = self.projectors[k].fitted(col);
                let weighted: Vec<f64> = px.iter().zip(dw.iter()).map(|(&v, &w)| v * w).collect();
                let pw = self.projectors[k].fitted(&weighted);
                weighted
                    .iter()
                    .zip(pw.iter())
                    .map(|(&a, &b)| (a - b) / dt)
                    .collect()
            })
            .collect()
    }

    /// Discrete solution map (u, xi) -> (Y, Z); mirrors the state-BSDE solver
    /// using the precomputed step pieces.
    pub fn forward_map(&self, u: &VecField, xi: Option<&[DVector<f64>]>) -> (VecField, VecField) {
        let k_steps = self.grid.steps();
        let m_paths = self.m_paths();
        let n = self.p.n;
        let dt = self.grid.dt();
        let mut y = VecField::zeros(m_paths, k_steps + 1, n);
        let mut z = VecField::zeros(m_paths, k_steps, n);
        if let Some(xi) = xi {
            for i in 0..m_paths {
                y.at_mut(i, k_steps).copy_from_slice(xi[i].as_slice());
            }
        }
        let mut cond = vec![vec![0.0; m_paths]; n];
        for k in (0..k_steps).rev() {
            self.project(k, &y, k + 1, &mut cond);
            let zq = self.t_apply(k, &y, k + 1);
            for d in 0..n {
                z.set_component_column(k, d, &zq[d]);
            }
            for i in 0..m_paths {
                let u_i = DVector::from_column_slice(u.at(i, k));
                let z_i = DVector::from_column_slice(z.at(i, k));
                let mut rhs = DVector::from_fn(n, |d, _| cond[d][i]);
                rhs -= (&self.b_mats[k][i] * u_i + &self.c_mats[k][i] * z_i) * dt;
                let y_i = &self.s_inv[k][i] * rhs;
                y.at_mut(i, k).copy_from_slice(y_i.as_slice());
            }
        }
        (y, z)
    }

    /// Exact transpose of the linear part of `forward_map` with respect to the
    /// plain Euclidean pairings: given duals on (Y_0..Y_{K-1}) and
    /// (Z_0..Z_{K-1}), returns the control dual and the terminal dual.
    pub fn adjoint_map(&self, y_dual: &VecField, z_dual: &VecField) -> (VecField, VecField) {
        let k_steps = self.grid.steps();
        let m_paths = self.m_paths();
        let n = self.p.n;
        let m_dim = self.p.m;
        let dt = self.grid.dt();
        let mut u_dual = VecField::zeros(m_paths, k_steps, m_dim);
        let mut xi_dual = VecField::zeros(m_paths, 1, n);
        // lambda_k accumulates the dual of v_k.
        let mut lambda: Vec<DVector<f64>> = (0..m_paths)
            .map(|i| DVector::from_column_slice(y_dual.at(i, 0)))
            .collect();
        let mut scratch_cols: Vec<Vec<f64>> = vec![vec![0.0; m_paths]; n];
        for k in 0..k_steps {
            // w = S_k^T lambda_k; control dual u_k = -dt B^T w.
            let mut w_vecs: Vec<DVector<f64>> = Vec::with_capacity(m_paths);
            for i in 0..m_paths {
                let w_i = self.s_inv[k][i].transpose() * &lambda[i];
                let du = self.b_mats[k][i].transpose() * &w_i * (-dt);
                u_dual.at_mut(i, k).copy_from_slice(du.as_slice());
                w_vecs.push(w_i);
            }
            // lambda_{k+1} = y_dual_{k+1} + P w + T^T (z_dual_k - dt C^T w).
            for d in 0..n {
                for i in 0..m_paths {
                    scratch_cols[d][i] = w_vecs[i][d];
                }
            }
            let pw: Vec<Vec<f64>> = (0..n)
                .map(|d| self.projectors[k].fitted(&scratch_cols[d]))
                .collect();
            let mut tt_in: Vec<Vec<f64>> = vec![vec![0.0; m_paths]; n];
            for i in 0..m_paths {
                let ctw = self.c_mats[k][i].transpose() * &w_vecs[i];
                for d in 0..n {
                    tt_in[d][i] = z_dual.at(i, k)[d] - dt * ctw[d];
                }
            }
            let tt = self.t_transpose(k, &tt_in);
            for (i, lam) in lambda.iter_mut().enumerate() {
                for d in 0..n {
                    let direct = if k + 1 < k_steps {
                        y_dual.at(i, k + 1)[d]
                    } else {
                        0.0
                    };
                    lam[d] = direct + pw[d][i] + tt[d][i];
                }
            }
        }
        for (i, lam) in lambda.iter().enumerate() {
            xi_dual.at_mut(i, 0).copy_from_slice(lam.as_slice());
        }
        (u_dual, xi_dual)
    }

    /// Cost-gradient duals of a state pair: y-dual dt*Q*Y (plus G*Y(t0) at
    /// step 0), z-dual dt*N*Z.
    fn cost_duals(&self, y: &VecField, z: &VecField) -> (VecField, VecField) {
        let k_steps = self.grid.steps();
        let m_paths = self.m_paths();
        let n = self.p.n;
        let dt = self.grid.dt();
        let mut y_dual = VecField::zeros(m_paths, k_steps, n);
        let mut z_dual = VecField::zeros(m_paths, k_steps, n);
        for k in 0..k_steps {
            for i in 0..m_paths {
                let y_i = DVector::from_column_slice(y.at(i, k));
                let z_i = DVector::from_column_slice(z.at(i, k));
                let mut yd = &self.q_mats[k][i] * y_i * dt;
                if k == 0 {
                    let y0 = DVector::from_column_slice(y.at(i, 0));
                    yd += &self.g_mat * y0;
                }
                let zd = &self.n_mats[k][i] * z_i * dt;
                y_dual.at_mut(i, k).copy_from_slice(yd.as_slice());
                z_dual.at_mut(i, k).copy_from_slice(zd.as_slice());
            }
        }
        (y_dual, z_dual)
    }

    /// Hessian application of the plain-coordinate quadratic
    /// J(u) = <H u, u> + 2 <h, u> + const (up to the 1/M factor, which
    /// multiplies both sides of the normal equations and is dropped).
    pub fn apply_hessian(&self, u: &VecField) -> VecField {
        let (y, z) = self.forward_map(u, None);
        let (y_dual, z_dual) = self.cost_duals(&y, &z);
        let (mut hu, _) = self.adjoint_map(&y_dual, &z_dual);
        let dt = self.grid.dt();
        for k in 0..self.grid.steps() {
            for i in 0..self.m_paths() {
                let u_i = DVector::from_column_slice(u.at(i, k));
                let ru = &self.r_mats[k][i] * u_i * dt;
                for (d, v) in ru.iter().enumerate() {
                    hu.at_mut(i, k)[d] += v;
                }
            }
        }
        hu
    }

    /// Linear term h of the quadratic, from the xi-propagation.
    pub fn linear_term(&self, xi_values: &[DMatrix<f64>]) -> VecField {
        let xi: Vec<DVector<f64>> = xi_values
            .iter()
            .map(|m| DVector::from_column_slice(m.as_slice()))
            .collect();
        let zero_u = VecField::zeros(self.m_paths(), self.grid.steps(), self.p.m);
        let (y, z) = self.forward_map(&zero_u, Some(&xi));
        let (y_dual, z_dual) = self.cost_duals(&y, &z);
        let (h, _) = self.adjoint_map(&y_dual, &z_dual);
        h
    }
}

/// Outcome of the conjugate-gradient minimization.
pub struct OracleOutcome {
    pub control: ControlProcess,
    pub cost: CostBreakdown,
    pub iterations: usize,
    pub residual: f64,
}

/// Minimize the discretized cost by conjugate gradients on H u = -h. The
/// quadratic is strictly convex (R >= delta I), so CG converges; failure to
/// reach tolerance within `max_iters` is reported as an error.
pub fn oracle_minimize(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
    xi_values: &[DMatrix<f64>],
    max_iters: usize,
    tol: f64,
) -> Result<OracleOutcome> {
    let bundle = DiscreteOperatorBundle::new(p, paths, basis)?;
    let h = bundle.linear_term(xi_values);
    let mut rhs = h.clone();
    rhs.scale(-1.0);
    let rhs_norm = rhs.norm().max(1e-300);

    let mut u = VecField::zeros(rhs.paths(), rhs.steps(), rhs.dim());
    let mut r = rhs.clone();
    let mut pdir = r.clone();
    let mut rs_old = r.dot(&r);
    let mut iterations = 0;
    let mut residual = rs_old.sqrt() / rhs_norm;
    for it in 0..max_iters {
        if residual <= tol {
            break;
        }
        let hp = bundle.apply_hessian(&pdir);
        let curvature = pdir.dot(&hp);
        if curvature <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "nonpositive curvature {curvature:.3e} in CG"
            )));
        }
        let alpha = rs_old / curvature;
        u.axpby(1.0, alpha, &pdir);
        r.axpby(1.0, -alpha, &hp);
        let rs_new = r.dot(&r);
        iterations = it + 1;
        residual = rs_new.sqrt() / rhs_norm;
        let beta = rs_new / rs_old;
        pdir.axpby(beta, 1.0, &r);
        rs_old = rs_new;
    }
    if residual > tol {
        return Err(Error::NoConvergence {
            iters: iterations,
            residual,
        });
    }
    let control = ControlProcess {
        values: u,
        grid: *paths.grid(),
    };
    let cost = evaluate_cost(p, paths, &control, xi_values, basis)?;
    Ok(OracleOutcome {
        control,
        cost,
        iterations,
        residual,
    })
}
