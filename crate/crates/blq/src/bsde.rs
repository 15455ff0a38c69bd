//! Backward-Euler solver for the linear state BSDE
//! dY = {A Y + B u + C Z} ds + Z dW, Y(T) = xi.
//!
//! One backward step: Z_k is the martingale-increment regression estimate of
//! the dW-coefficient of Y_{k+1}; the conditional mean of Y_{k+1} is a
//! least-squares fit on the step-k basis; Y_k then solves the drift-implicit
//! per-path system (I + dt*A) Y_k = E_k[Y_{k+1}] - dt*(B u_k + C Z_k). The
//! C Z term stays explicit, the terminal condition is exact.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::VecField;
use crate::grid::{PathEnsemble, TimeGrid};
use crate::problem::{CoefficientExpr, ProblemInstance};
use crate::regression::{Projector, RegressionBasis};

/// Control samples on grid steps 0..K-1.
#[derive(Debug, Clone)]
pub struct ControlProcess {
    pub values: VecField,
    pub grid: TimeGrid,
}

impl ControlProcess {
    pub fn zeros(grid: TimeGrid, paths: usize, control_dim: usize) -> Self {
        ControlProcess {
            values: VecField::zeros(paths, grid.steps(), control_dim),
            grid,
        }
    }

    /// L2 norm (E integral |u|^2 ds)^(1/2) on the grid.
    pub fn l2_norm(&self) -> f64 {
        let dt = self.grid.dt();
        let m = self.values.paths() as f64;
        (self.values.dot(&self.values) * dt / m).sqrt()
    }
}

/// Adapted solution samples: Y on grid points 0..K, Z on steps 0..K-1.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub y: VecField,
    pub z: VecField,
    pub grid: TimeGrid,
}

impl BackwardSolution {
    /// CSV dump with header `path,k,t,Y_1..Y_n,Z_1..Z_n`; Z cells are empty on
    /// the terminal row.
    pub fn dump_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        let n = self.y.dim();
        let mut header = String::from("path,k,t");
        for d in 0..n {
            header.push_str(&format!(",Y_{}", d + 1));
        }
        for d in 0..n {
            header.push_str(&format!(",Z_{}", d + 1));
        }
        writeln!(out, "{header}")?;
        for i in 0..self.y.paths() {
            for k in 0..self.y.steps() {
                let mut line = format!("{},{},{}", i, k, self.grid.time(k));
                for &v in self.y.at(i, k) {
                    line.push_str(&format!(",{v}"));
                }
                if k < self.z.steps() {
                    for &v in self.z.at(i, k) {
                        line.push_str(&format!(",{v}"));
                    }
                } else {
                    for _ in 0..n {
                        line.push(',');
                    }
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Evaluate a coefficient once per step when it is w-free, per path otherwise.
pub(crate) struct StepCoeff<'a> {
    expr: &'a CoefficientExpr,
    frozen: Option<DMatrix<f64>>,
    s: f64,
}

impl<'a> StepCoeff<'a> {
    pub(crate) fn new(expr: &'a CoefficientExpr, s: f64) -> Result<Self> {
        let frozen = if expr.depends_on_w() {
            None
        } else {
            Some(expr.eval(s, 0.0)?)
        };
        Ok(StepCoeff { expr, frozen, s })
    }

    pub(crate) fn at(&self, w: f64) -> Result<DMatrix<f64>> {
        match &self.frozen {
            Some(m) => Ok(m.clone()),
            None => self.expr.eval(self.s, w),
        }
    }
}

/// Solve the state BSDE under the given control and per-path terminal values.
pub fn solve_state_bsde(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    u: &ControlProcess,
    xi_values: &[DMatrix<f64>],
    basis: &RegressionBasis,
) -> Result<BackwardSolution> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let n = p.n;
    if u.values.paths() != m_paths || u.values.steps() != k_steps || u.values.dim() != p.m {
        return Err(Error::Dimension(
            "control shape does not match ensemble".into(),
        ));
    }
    if xi_values.len() != m_paths {
        return Err(Error::Dimension(
            "one terminal value per path required".into(),
        ));
    }
    let dt = grid.dt();
    let mut y = VecField::zeros(m_paths, k_steps + 1, n);
    let mut z = VecField::zeros(m_paths, k_steps, n);

    for (i, xi) in xi_values.iter().enumerate() {
        for d in 0..n {
            if !xi[(d, 0)].is_finite() {
                return Err(Error::Validation("terminal values must be finite".into()));
            }
            y.at_mut(i, k_steps)[d] = xi[(d, 0)];
        }
    }

    let mut cond = vec![vec![0.0; m_paths]; n];
    for k in (0..k_steps).rev() {
        let t_k = grid.time(k);
        let w_col = paths.step_values(k);
        let dw = paths.step_increments(k);
        let proj = Projector::new(&w_col, basis)?;
        for d in 0..n {
            let y_next = y.component_column(k + 1, d);
            cond[d] = proj.fitted(&y_next);
            let z_d = proj.dw_coefficient(&y_next, &dw, dt);
            z.set_component_column(k, d, &z_d);
        }
        let a_step = StepCoeff::new(&p.A, t_k)?;
        let b_step = StepCoeff::new(&p.B, t_k)?;
        let c_step = StepCoeff::new(&p.C, t_k)?;
        let eye = DMatrix::<f64>::identity(n, n);
        for i in 0..m_paths {
            let w = w_col[i];
            let a = a_step.at(w)?;
            let b = b_step.at(w)?;
            let c = c_step.at(w)?;
            let u_i = DVector::from_column_slice(u.values.at(i, k));
            let z_i = DVector::from_column_slice(z.at(i, k));
            let mut rhs = DVector::from_fn(n, |d, _| cond[d][i]);
            rhs -= (b * u_i + c * z_i) * dt;
            let lhs = &eye + &a * dt;
            let sol = lhs.lu().solve(&rhs).ok_or(Error::LinearSolve { step: k })?;
            y.at_mut(i, k).copy_from_slice(sol.as_slice());
        }
    }
    Ok(BackwardSolution { y, z, grid })
}

/// Ratio of the a priori estimate: E[sup_k |Y|^2 + sum_k |Z|^2 dt] over
/// E[|xi|^2 + sum_k |u|^2 dt]. Defined as 0 when both sides vanish.
pub fn audit_apriori_estimate(
    sol: &BackwardSolution,
    u: &ControlProcess,
    xi_values: &[DMatrix<f64>],
) -> Result<f64> {
    let m_paths = sol.y.paths();
    let dt = sol.grid.dt();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m_paths {
        let mut sup_y = 0.0f64;
        for k in 0..sol.y.steps() {
            let norm2: f64 = sol.y.at(i, k).iter().map(|v| v * v).sum();
            sup_y = sup_y.max(norm2);
        }
        let mut z_int = 0.0;
        for k in 0..sol.z.steps() {
            z_int += sol.z.at(i, k).iter().map(|v| v * v).sum::<f64>() * dt;
        }
        num += sup_y + z_int;
        let xi2: f64 = xi_values[i].iter().map(|v| v * v).sum();
        let mut u_int = 0.0;
        for k in 0..u.values.steps() {
            u_int += u.values.at(i, k).iter().map(|v| v * v).sum::<f64>() * dt;
        }
        den += xi2 + u_int;
    }
    num /= m_paths as f64;
    den /= m_paths as f64;
    if den < 1e-14 {
        if num <= 1e-10 {
            return Ok(0.0);
        }
        return Err(Error::DegenerateInput(format!(
            "zero right-hand side with nonzero energy {num:.3e}"
        )));
    }
    Ok(num / den)
}


#[cfg(test)]
mod dump_tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn csv_dump_shape() {
        let mk = |v: f64| DMatrix::from_element(1, 1, v);
        let p = ProblemInstance::from_matrices(
            0.0,
            1.0,
            &mk(0.0),
            &mk(1.0),
            &mk(0.0),
            &mk(0.0),
            &mk(1.0),
            &mk(1.0),
            &mk(0.0),
            &mk(1.0),
            1.0,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let paths = PathEnsemble::generate(grid, 4, 1).unwrap();
        let u = ControlProcess::zeros(grid, 4, 1);
        let xi: Vec<DMatrix<f64>> = (0..4).map(|_| mk(1.0)).collect();
        let sol = solve_state_bsde(&p, &paths, &u, &xi, &RegressionBasis::polynomial(1)).unwrap();
        let mut buf = Vec::new();
        sol.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "path,k,t,Y_1,Z_1");
        // 4 paths x 4 grid points, terminal rows leave Z empty.
        assert_eq!(text.lines().count(), 1 + 4 * 4);
        let terminal = text.lines().nth(4).unwrap();
        assert!(terminal.ends_with(",1,"), "{terminal}");
    }
}
