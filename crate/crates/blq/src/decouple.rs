//! Decoupling of the optimality system: given (Sigma, Lambda), solve the
//! auxiliary backward equation
//!
//! ```text
//! dphi = {(A + Sigma Q) phi + (Lambda N - C)(I + Sigma N)^{-1} beta} ds - beta dW,
//! phi(T) = -xi,
//! ```
//!
//! then the forward equation for the adjoint state X started from
//! X(t0) = -(I + G Sigma(t0))^{-1} G phi(t0), and assemble the optimal triple
//!
//! ```text
//! (Y*, Z*, X*) = (-Sigma X - phi, (I + Sigma N)^{-1}(Lambda X + Sigma C^T X + beta), X),
//! u* = R^{-1} B^T X.
//! ```
//!
//! The coefficients multiplying beta and X are unbounded in general; nothing
//! is clipped. Magnitudes are recorded and a blow-up aborts the run.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bsde::{ControlProcess, StepCoeff};
use crate::error::{Error, Result};
use crate::fields::VecField;
use crate::grid::{PathEnsemble, TimeGrid};
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::regression::{Projector, RegressionBasis};
use crate::riccati::RiccatiSolution;
use serde::Serialize;

const BLOWUP_LIMIT: f64 = 1e6;
const COND_LIMIT: f64 = 1e12;

/// Solution (phi, beta) of the auxiliary backward equation; phi on grid
/// points 0..K, beta on steps 0..K-1.
#[derive(Debug, Clone)]
pub struct AuxiliaryBackward {
    pub phi: VecField,
    pub beta: VecField,
    pub grid: TimeGrid,
    /// Largest drift-coefficient norm seen (the equation is unbounded).
    pub max_coeff_norm: f64,
}

/// Adjoint state samples X on grid points 0..K.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub x: VecField,
    pub grid: TimeGrid,
}

/// Reconstructed optimal processes.
#[derive(Debug, Clone)]
pub struct OptimalTriple {
    pub y: VecField,
    pub z: VecField,
    pub x: VecField,
    pub u: ControlProcess,
    pub grid: TimeGrid,
}

/// Solve the auxiliary backward equation. When the problem and Sigma are
/// deterministic and xi is w-free, beta vanishes and phi reduces to a matrix
/// ODE solved by the same drift-implicit stepping; otherwise the regression
/// scheme with the martingale-increment beta estimator is used.
pub fn solve_auxiliary_bsde(
    p: &ProblemInstance,
    sigma: &RiccatiSolution,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
    xi_values: &[DMatrix<f64>],
) -> Result<AuxiliaryBackward> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let n = p.n;
    let dt = grid.dt();
    if xi_values.len() != m_paths {
        return Err(Error::Dimension(
            "one terminal value per path required".into(),
        ));
    }
    let mut phi = VecField::zeros(m_paths, k_steps + 1, n);
    let mut beta = VecField::zeros(m_paths, k_steps, n);
    for (i, xi) in xi_values.iter().enumerate() {
        for d in 0..n {
            phi.at_mut(i, k_steps)[d] = -xi[(d, 0)];
        }
    }
    let mut max_coeff: f64 = 0.0;

    let xi_uniform = xi_values.iter().all(|v| v == &xi_values[0]);
    let deterministic = sigma.is_deterministic() && p.coefficients_deterministic() && xi_uniform;
    if deterministic {
        // beta = 0; phi follows dphi = (A + Sigma Q) phi ds, one implicit
        // step per grid interval, identical across paths.
        let eye = DMatrix::<f64>::identity(n, n);
        let mut cur = DVector::from_fn(n, |d, _| phi.at(0, k_steps)[d]);
        for k in (0..k_steps).rev() {
            let t_k = grid.time(k);
            let a = p.A.eval(t_k, 0.0)?;
            let q = p.Q.eval(t_k, 0.0)?;
            let drift = &a + sigma.sigma_at(k, 0) * q;
            max_coeff = max_coeff.max(drift.norm());
            let lhs = &eye + drift * dt;
            cur = lhs.lu().solve(&cur).ok_or(Error::LinearSolve { step: k })?;
            for i in 0..m_paths {
                phi.at_mut(i, k).copy_from_slice(cur.as_slice());
            }
        }
        return Ok(AuxiliaryBackward {
            phi,
            beta,
            grid,
            max_coeff_norm: max_coeff,
        });
    }

    let mut cond = vec![vec![0.0; m_paths]; n];
    for k in (0..k_steps).rev() {
        let t_k = grid.time(k);
        let w_col = paths.step_values(k);
        let dw = paths.step_increments(k);
        let proj = Projector::new(&w_col, basis)?;
        for d in 0..n {
            let next = phi.component_column(k + 1, d);
            cond[d] = proj.fitted(&next);
            // dphi carries -beta dW: the dW-coefficient of phi_{k+1} is -beta.
            let mut b_d = proj.dw_coefficient(&next, &dw, dt);
            for v in b_d.iter_mut() {
                *v = -*v;
            }
            beta.set_component_column(k, d, &b_d);
        }
        let a_step = StepCoeff::new(&p.A, t_k)?;
        let q_step = StepCoeff::new(&p.Q, t_k)?;
        let c_step = StepCoeff::new(&p.C, t_k)?;
        let n_step = StepCoeff::new(&p.N, t_k)?;
        let eye = DMatrix::<f64>::identity(n, n);
        for i in 0..m_paths {
            let w = w_col[i];
            let sig = sigma.sigma_at(k, i);
            let lam = sigma.lambda_at(k, i);
            let a = a_step.at(w)?;
            let q = q_step.at(w)?;
            let c = c_step.at(w)?;
            let nw = n_step.at(w)?;
            let ip_sn = &eye + &sig * &nw;
            let cnd = linalg::cond_estimate(&ip_sn);
            if cnd > COND_LIMIT {
                return Err(Error::Conditioning {
                    what: "I + Sigma*N".into(),
                    cond: cnd,
                });
            }
            let inv_sn = ip_sn.try_inverse().unwrap();
            let beta_coef = (&lam * &nw - &c) * &inv_sn;
            let drift_mat = &a + &sig * &q;
            max_coeff = max_coeff.max(drift_mat.norm()).max(beta_coef.norm());
            let b_i = DVector::from_column_slice(beta.at(i, k));
            let mut rhs = DVector::from_fn(n, |d, _| cond[d][i]);
            rhs -= beta_coef * b_i * dt;
            let lhs = &eye + drift_mat * dt;
            let sol = lhs.lu().solve(&rhs).ok_or(Error::LinearSolve { step: k })?;
            let norm = sol.norm();
            if !norm.is_finite() || norm > BLOWUP_LIMIT {
                return Err(Error::Blowup {
                    what: "auxiliary BSDE".into(),
                    norm,
                    step: k,
                });
            }
            phi.at_mut(i, k).copy_from_slice(sol.as_slice());
        }
    }
    Ok(AuxiliaryBackward {
        phi,
        beta,
        grid,
        max_coeff_norm: max_coeff,
    })
}

/// Euler-Maruyama forward solve of the adjoint state equation, parallel
/// across paths.
pub fn solve_forward_sde(
    p: &ProblemInstance,
    sigma: &RiccatiSolution,
    aux: &AuxiliaryBackward,
    paths: &PathEnsemble,
) -> Result<ForwardSolution> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let n = p.n;
    let dt = grid.dt();
    let mut x = VecField::zeros(m_paths, k_steps + 1, n);

    x.par_paths_mut()
        .enumerate()
        .try_for_each(|(i, chunk)| -> Result<()> {
            let eye = DMatrix::<f64>::identity(n, n);
            // Initial coupling: X(t0) = -(I + G Sigma(t0))^{-1} G phi(t0).
            let w0 = paths.value(i, 0);
            let g = p.G.eval(grid.t0(), w0)?;
            let sig0 = sigma.sigma_at(0, i);
            let phi0 = DVector::from_column_slice(aux.phi.at(i, 0));
            let lhs = &eye + &g * &sig0;
            let cnd = linalg::cond_estimate(&lhs);
            if cnd > COND_LIMIT {
                return Err(Error::Conditioning {
                    what: "I + G*Sigma(t0)".into(),
                    cond: cnd,
                });
            }
            let x0 = lhs
                .lu()
                .solve(&(-(&g * phi0)))
                .ok_or(Error::LinearSolve { step: 0 })?;
            chunk[..n].copy_from_slice(x0.as_slice());

            for k in 0..k_steps {
                let t_k = grid.time(k);
                let w = paths.value(i, k);
                let dw = paths.increment(i, k);
                let a = p.A.eval(t_k, w)?;
                let q = p.Q.eval(t_k, w)?;
                let c = p.C.eval(t_k, w)?;
                let nw = p.N.eval(t_k, w)?;
                let sig = sigma.sigma_at(k, i);
                let lam = sigma.lambda_at(k, i);
                let ip_sn = &eye + &sig * &nw;
                let cnd = linalg::cond_estimate(&ip_sn);
                if cnd > COND_LIMIT {
                    return Err(Error::Conditioning {
                        what: "I + Sigma*N".into(),
                        cond: cnd,
                    });
                }
                let inv_sn = ip_sn.try_inverse().unwrap();
                let n_inv_sn = &nw * &inv_sn;

                let x_k = DVector::from_column_slice(&chunk[k * n..(k + 1) * n]);
                let phi_k = DVector::from_column_slice(aux.phi.at(i, k));
                let beta_k = DVector::from_column_slice(aux.beta.at(i, k));

                let drift = -((a.transpose() + &q * &sig) * &x_k + q * phi_k);
                let diff_mat = -c.transpose() + &n_inv_sn * (&lam + &sig * c.transpose());
                let diffusion = diff_mat * &x_k + n_inv_sn * beta_k;
                let next = x_k + drift * dt + diffusion * dw;
                let norm = next.norm();
                if !norm.is_finite() || norm > BLOWUP_LIMIT {
                    return Err(Error::Blowup {
                        what: "forward SDE".into(),
                        norm,
                        step: k,
                    });
                }
                chunk[(k + 1) * n..(k + 2) * n].copy_from_slice(next.as_slice());
            }
            Ok(())
        })?;
    Ok(ForwardSolution { x, grid })
}

/// Pointwise evaluation of the decoupling formulas and u* = R^{-1} B^T X.
pub fn reconstruct_triple(
    p: &ProblemInstance,
    sigma: &RiccatiSolution,
    aux: &AuxiliaryBackward,
    forward: &ForwardSolution,
    paths: &PathEnsemble,
) -> Result<OptimalTriple> {
    let grid = forward.grid;
    let k_steps = grid.steps();
    let m_paths = forward.x.paths();
    let n = p.n;
    let mut y = VecField::zeros(m_paths, k_steps + 1, n);
    let mut z = VecField::zeros(m_paths, k_steps, n);
    let mut u = ControlProcess::zeros(grid, m_paths, p.m);
    let eye = DMatrix::<f64>::identity(n, n);

    for k in 0..=k_steps {
        let t_k = grid.time(k);
        let c_step = StepCoeff::new(&p.C, t_k)?;
        let n_step = StepCoeff::new(&p.N, t_k)?;
        let b_step = StepCoeff::new(&p.B, t_k)?;
        let r_step = StepCoeff::new(&p.R, t_k)?;
        for i in 0..m_paths {
            let x_k = DVector::from_column_slice(forward.x.at(i, k));
            let sig = sigma.sigma_at(k, i);
            let phi_k = DVector::from_column_slice(aux.phi.at(i, k));
            let y_k = -(&sig * &x_k + phi_k);
            y.at_mut(i, k).copy_from_slice(y_k.as_slice());
            if k == k_steps {
                continue;
            }
            let w = paths.value(i, k);
            let c = c_step.at(w)?;
            let nw = n_step.at(w)?;
            let lam = sigma.lambda_at(k, i);
            let beta_k = DVector::from_column_slice(aux.beta.at(i, k));
            let ip_sn = &eye + &sig * &nw;
            let cnd = linalg::cond_estimate(&ip_sn);
            if cnd > COND_LIMIT {
                return Err(Error::Conditioning {
                    what: "I + Sigma*N".into(),
                    cond: cnd,
                });
            }
            let rhs = lam * &x_k + &sig * c.transpose() * &x_k + beta_k;
            let z_k = ip_sn
                .lu()
                .solve(&rhs)
                .ok_or(Error::LinearSolve { step: k })?;
            z.at_mut(i, k).copy_from_slice(z_k.as_slice());

            let b = b_step.at(w)?;
            let r = r_step.at(w)?;
            let u_k = r
                .lu()
                .solve(&(b.transpose() * &x_k))
                .ok_or(Error::LinearSolve { step: k })?;
            u.values.at_mut(i, k).copy_from_slice(u_k.as_slice());
        }
    }
    Ok(OptimalTriple {
        y,
        z,
        x: forward.x.clone(),
        u,
        grid,
    })
}

/// Residuals of the coupled optimality system evaluated on a triple.
#[derive(Debug, Clone, Serialize)]
pub struct FbsdeResiduals {
    /// RMS one-step defect of the backward equation.
    pub backward_rms: f64,
    /// RMS one-step defect of the forward equation.
    pub forward_rms: f64,
    /// RMS terminal defect |Y(T) - xi|.
    pub terminal_rms: f64,
    /// RMS initial-coupling defect |X(t0) - G Y(t0)|.
    pub initial_coupling_rms: f64,
}

impl FbsdeResiduals {
    pub fn within(&self, one_step_tol: f64, coupling_tol: f64) -> bool {
        self.backward_rms <= one_step_tol
            && self.forward_rms <= one_step_tol
            && self.terminal_rms <= coupling_tol
            && self.initial_coupling_rms <= coupling_tol
    }
}

/// One-step defects of both equations of the coupled optimality system, plus
/// the terminal and initial-coupling defects.
pub fn fbsde_residuals(
    p: &ProblemInstance,
    triple: &OptimalTriple,
    paths: &PathEnsemble,
    xi_values: &[DMatrix<f64>],
) -> Result<FbsdeResiduals> {
    let grid = triple.grid;
    let k_steps = grid.steps();
    let m_paths = triple.y.paths();
    let n = p.n;
    let dt = grid.dt();
    let mut back_acc = 0.0;
    let mut fwd_acc = 0.0;
    for k in 0..k_steps {
        let t_k = grid.time(k);
        let a_step = StepCoeff::new(&p.A, t_k)?;
        let b_step = StepCoeff::new(&p.B, t_k)?;
        let c_step = StepCoeff::new(&p.C, t_k)?;
        let q_step = StepCoeff::new(&p.Q, t_k)?;
        let n_step = StepCoeff::new(&p.N, t_k)?;
        let r_step = StepCoeff::new(&p.R, t_k)?;
        for i in 0..m_paths {
            let w = paths.value(i, k);
            let dw = paths.increment(i, k);
            let a = a_step.at(w)?;
            let b = b_step.at(w)?;
            let c = c_step.at(w)?;
            let q = q_step.at(w)?;
            let nw = n_step.at(w)?;
            let r = r_step.at(w)?;
            let y_k = DVector::from_column_slice(triple.y.at(i, k));
            let y_next = DVector::from_column_slice(triple.y.at(i, k + 1));
            let z_k = DVector::from_column_slice(triple.z.at(i, k));
            let x_k = DVector::from_column_slice(triple.x.at(i, k));
            let x_next = DVector::from_column_slice(triple.x.at(i, k + 1));
            // Backward equation with the control substituted: B R^{-1} B^T X.
            let rinv_btx = r
                .clone()
                .lu()
                .solve(&(b.transpose() * &x_k))
                .ok_or(Error::LinearSolve { step: k })?;
            let back_drift = &a * &y_k + &b * rinv_btx + &c * &z_k;
            let back_defect = &y_next - &y_k - back_drift * dt - &z_k * dw;
            back_acc += back_defect.norm_squared();
            let fwd_drift = -(a.transpose() * &x_k) + &q * &y_k;
            let fwd_diff = -(c.transpose() * &x_k) + &nw * &z_k;
            let fwd_defect = &x_next - &x_k - fwd_drift * dt - fwd_diff * dw;
            fwd_acc += fwd_defect.norm_squared();
        }
    }
    let cells = (m_paths * k_steps) as f64;
    let mut term_acc = 0.0;
    let mut init_acc = 0.0;
    for i in 0..m_paths {
        let y_t = DVector::from_column_slice(triple.y.at(i, k_steps));
        let xi = DVector::from_fn(n, |d, _| xi_values[i][(d, 0)]);
        term_acc += (y_t - xi).norm_squared();
        let g = p.G.eval(grid.t0(), paths.value(i, 0))?;
        let y_0 = DVector::from_column_slice(triple.y.at(i, 0));
        let x_0 = DVector::from_column_slice(triple.x.at(i, 0));
        init_acc += (x_0 - g * y_0).norm_squared();
    }
    Ok(FbsdeResiduals {
        backward_rms: (back_acc / cells).sqrt(),
        forward_rms: (fwd_acc / cells).sqrt(),
        terminal_rms: (term_acc / m_paths as f64).sqrt(),
        initial_coupling_rms: (init_acc / m_paths as f64).sqrt(),
    })
}

/// Max-abs defect of the decoupling identity Y + Sigma X + phi, recomputed
/// from the parts; zero for a triple produced by [`reconstruct_triple`].
pub fn decoupling_residual(
    sigma: &RiccatiSolution,
    aux: &AuxiliaryBackward,
    triple: &OptimalTriple,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..triple.y.paths() {
        for k in 0..triple.y.steps() {
            let x_k = DVector::from_column_slice(triple.x.at(i, k));
            let phi_k = DVector::from_column_slice(aux.phi.at(i, k));
            let recon = sigma.sigma_at(k, i) * x_k + phi_k;
            for (d, &y_d) in triple.y.at(i, k).iter().enumerate() {
                worst = worst.max((y_d + recon[d]).abs());
            }
        }
    }
    worst
}

/// Re-solve the adjoint state forward from the coupled optimality system
/// using the triple's (Y, Z): an independent route to X* for the
/// stationarity audit.
pub fn resolve_adjoint_forward(
    p: &ProblemInstance,
    triple: &OptimalTriple,
    paths: &PathEnsemble,
) -> Result<VecField> {
    let grid = triple.grid;
    let k_steps = grid.steps();
    let m_paths = triple.y.paths();
    let n = p.n;
    let dt = grid.dt();
    let mut x = VecField::zeros(m_paths, k_steps + 1, n);
    x.par_paths_mut()
        .enumerate()
        .try_for_each(|(i, chunk)| -> Result<()> {
            let g = p.G.eval(grid.t0(), paths.value(i, 0))?;
            let y0 = DVector::from_column_slice(triple.y.at(i, 0));
            let x0 = g * y0;
            chunk[..n].copy_from_slice(x0.as_slice());
            for k in 0..k_steps {
                let t_k = grid.time(k);
                let w = paths.value(i, k);
                let dw = paths.increment(i, k);
                let a = p.A.eval(t_k, w)?;
                let c = p.C.eval(t_k, w)?;
                let q = p.Q.eval(t_k, w)?;
                let nw = p.N.eval(t_k, w)?;
                let x_k = DVector::from_column_slice(&chunk[k * n..(k + 1) * n]);
                let y_k = DVector::from_column_slice(triple.y.at(i, k));
                let z_k = DVector::from_column_slice(triple.z.at(i, k));
                let drift = -(a.transpose() * &x_k) + q * y_k;
                let diffusion = -(c.transpose() * &x_k) + nw * z_k;
                let next = x_k + drift * dt + diffusion * dw;
                let norm = next.norm();
                if !norm.is_finite() || norm > BLOWUP_LIMIT {
                    return Err(Error::Blowup {
                        what: "adjoint re-solve".into(),
                        norm,
                        step: k,
                    });
                }
                chunk[(k + 1) * n..(k + 2) * n].copy_from_slice(next.as_slice());
            }
            Ok(())
        })?;
    Ok(x)
}


#[cfg(test)]
mod scheduling_tests {
    use super::*;
    use crate::problem::example_instance;
    use crate::riccati::solve_riccati_markovian;

    #[test]
    fn forward_solve_is_schedule_independent() {
        let p = example_instance(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 15).unwrap();
        let paths = PathEnsemble::generate(grid, 600, 9).unwrap();
        let basis = RegressionBasis::with_rational(3);
        let sigma = solve_riccati_markovian(&p, &paths, &basis).unwrap();
        let xi = p.xi_values(&paths.step_values(15)).unwrap();
        let aux = solve_auxiliary_bsde(&p, &sigma, &paths, &basis, &xi).unwrap();
        let parallel = solve_forward_sde(&p, &sigma, &aux, &paths).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| solve_forward_sde(&p, &sigma, &aux, &paths).unwrap());
        assert_eq!(parallel.x.as_slice(), serial.x.as_slice());
        let re_par = resolve_adjoint_forward(&p, &reconstruct_triple(&p, &sigma, &aux, &parallel, &paths).unwrap(), &paths).unwrap();
        let re_ser = pool.install(|| {
            resolve_adjoint_forward(&p, &reconstruct_triple(&p, &sigma, &aux, &serial, &paths).unwrap(), &paths).unwrap()
        });
        assert_eq!(re_par.as_slice(), re_ser.as_slice());
    }
}
