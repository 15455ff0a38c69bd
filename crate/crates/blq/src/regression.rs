//! Least-squares Monte Carlo regression: conditional expectations are
//! estimated by projecting per-path samples onto basis functions of the
//! current Brownian value.
//!
//! The design matrix is column-equilibrated and factored by a column-pivoted
//! modified Gram-Schmidt QR with a relative rank cutoff. Rank-deficient
//! designs (all paths share W=0 at the initial grid point, for instance)
//! therefore fall back to the projection onto the realized column span, which
//! is the correct discrete conditional expectation on that sample. The public
//! [`regress_conditional`] entry point is strict and rejects designs whose
//! normal-equations condition number exceeds 1e12.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const NORMAL_EQ_COND_LIMIT: f64 = 1e12;
const RANK_CUTOFF: f64 = 1e-12;

/// Polynomial basis in `w` (monomials 1, w, ..., w^degree), optionally
/// augmented with the rational feature 1/(1+w^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
    pub rational: bool,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        RegressionBasis {
            degree,
            rational: false,
        }
    }

    pub fn with_rational(degree: usize) -> Self {
        RegressionBasis {
            degree,
            rational: true,
        }
    }

    pub fn count(&self) -> usize {
        self.degree + 1 + usize::from(self.rational)
    }

    pub fn eval_into(&self, w: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.count());
        let mut p = 1.0;
        for j in 0..=self.degree {
            out[j] = p;
            p *= w;
        }
        if self.rational {
            out[self.degree + 1] = 1.0 / (1.0 + w * w);
        }
    }
}

/// Least-squares fit of one batch of per-path values.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Coefficients in the raw (unequilibrated) basis; dropped directions are 0.
    pub coefficients: Vec<f64>,
    /// Fitted values per path.
    pub fitted: Vec<f64>,
}

/// Projection operator onto the basis span at one grid point, reusable for
/// every regression at that step.
pub struct Projector {
    samples: usize,
    basis_count: usize,
    /// Orthonormal basis of the realized design span, samples x rank.
    q: DMatrix<f64>,
    /// Expansion of every equilibrated column in the q basis, rank x basis_count.
    r: DMatrix<f64>,
    /// Pivot order: column chosen at each stage.
    pivots: Vec<usize>,
    /// Column equilibration factors (0 marks an all-zero column).
    col_scale: Vec<f64>,
    /// Condition estimate of the equilibrated design from the pivot diagonal.
    design_cond: f64,
    rank: usize,
}

impl Projector {
    pub fn new(w_samples: &[f64], basis: &RegressionBasis) -> Result<Self> {
        let m = w_samples.len();
        let b = basis.count();
        if m <= b {
            return Err(Error::Dimension(format!(
                "regression needs more samples than basis functions: {m} <= {b}"
            )));
        }
        let mut cols: Vec<DVector<f64>> = vec![DVector::zeros(m); b];
        let mut row = vec![0.0; b];
        for (i, &w) in w_samples.iter().enumerate() {
            basis.eval_into(w, &mut row);
            for j in 0..b {
                cols[j][i] = row[j];
            }
        }
        let mut col_scale = vec![0.0; b];
        for j in 0..b {
            let norm = cols[j].norm();
            if norm > 0.0 {
                col_scale[j] = norm;
                cols[j] /= norm;
            }
        }
        // Column-pivoted modified Gram-Schmidt with a second orthogonalization
        // pass; robust on rank-deficient designs where an SVD may not be.
        let mut q = DMatrix::<f64>::zeros(m, b);
        let mut r = DMatrix::<f64>::zeros(b, b);
        let mut pivots = Vec::with_capacity(b);
        let mut remaining: Vec<usize> = (0..b).filter(|&j| col_scale[j] > 0.0).collect();
        let mut r_diag_min = f64::INFINITY;
        let mut rank = 0;
        while !remaining.is_empty() && rank < b {
            let (pos, &best) = remaining
                .iter()
                .enumerate()
                .max_by(|a, c| cols[*a.1].norm().total_cmp(&cols[*c.1].norm()))
                .unwrap();
            let best_norm = cols[best].norm();
            if best_norm <= RANK_CUTOFF {
                break;
            }
            let mut q_new = cols[best].clone() / best_norm;
            // Reorthogonalize against the accepted directions.
            for s in 0..rank {
                let proj = q.column(s).dot(&q_new);
                q_new -= q.column(s) * proj;
            }
            let q_norm = q_new.norm();
            if q_norm <= RANK_CUTOFF {
                remaining.swap_remove(pos);
                continue;
            }
            q_new /= q_norm;
            q.set_column(rank, &q_new);
            r[(rank, best)] = best_norm * q_norm;
            r_diag_min = r_diag_min.min(best_norm * q_norm);
            pivots.push(best);
            remaining.swap_remove(pos);
            for &j in &remaining {
                let coef = q_new.dot(&cols[j]);
                r[(rank, j)] = coef;
                let update = &q_new * coef;
                cols[j] -= update;
            }
            rank += 1;
        }
        if rank == 0 {
            return Err(Error::SingularDesign {
                cond: f64::INFINITY,
            });
        }
        let q = q.columns(0, rank).into_owned();
        let r = r.rows(0, rank).into_owned();
        Ok(Projector {
            samples: m,
            basis_count: b,
            q,
            r,
            pivots,
            col_scale,
            design_cond: 1.0 / r_diag_min,
            rank,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Condition number of the normal-equations matrix (squared design condition).
    pub fn normal_eq_cond(&self) -> f64 {
        self.design_cond * self.design_cond
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.basis_count
    }

    /// Fitted values: orthogonal projection of `values` onto the basis span.
    pub fn fitted(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.samples);
        let v = DVector::from_column_slice(values);
        let coeffs = self.q.transpose() * &v;
        let fit = &self.q * coeffs;
        fit.as_slice().to_vec()
    }

    /// Raw-basis coefficients of the least-squares fit (basic solution on the
    /// pivot columns; dropped columns get zero).
    pub fn coefficients(&self, values: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(values);
        let scores = self.q.transpose() * &v;
        // Back-substitute through the triangular system on the pivot columns.
        let mut pivot_coeffs = vec![0.0; self.rank];
        for s in (0..self.rank).rev() {
            let mut acc = scores[s];
            for s2 in (s + 1)..self.rank {
                acc -= self.r[(s, self.pivots[s2])] * pivot_coeffs[s2];
            }
            pivot_coeffs[s] = acc / self.r[(s, self.pivots[s])];
        }
        let mut out = vec![0.0; self.basis_count];
        for s in 0..self.rank {
            let j = self.pivots[s];
            out[j] = pivot_coeffs[s] / self.col_scale[j];
        }
        out
    }

    /// Martingale-increment estimator of the dW-coefficient: projects
    /// `(values - E_k values) * dW` and divides by dt. Centering by the fitted
    /// conditional mean leaves the estimated coefficient unchanged in
    /// expectation and suppresses the 1/dt noise amplification of the plain
    /// product estimator.
    pub fn dw_coefficient(&self, values_next: &[f64], increments: &[f64], dt: f64) -> Vec<f64> {
        debug_assert_eq!(values_next.len(), self.samples);
        debug_assert_eq!(increments.len(), self.samples);
        let cond = self.fitted(values_next);
        let regressand: Vec<f64> = values_next
            .iter()
            .zip(cond.iter())
            .zip(increments.iter())
            .map(|((&v, &c), &dw)| (v - c) * dw)
            .collect();
        let mut fit = self.fitted(&regressand);
        for f in fit.iter_mut() {
            *f /= dt;
        }
        fit
    }
}

/// Strict least-squares regression of per-path values onto the basis
/// evaluated at the per-path Brownian samples.
pub fn regress_conditional(
    values: &[f64],
    w_samples: &[f64],
    basis: &RegressionBasis,
) -> Result<RegressionFit> {
    if values.len() != w_samples.len() {
        return Err(Error::Dimension(format!(
            "values ({}) and samples ({}) differ",
            values.len(),
            w_samples.len()
        )));
    }
    let proj = Projector::new(w_samples, basis)?;
    let cond = proj.normal_eq_cond();
    if proj.is_rank_deficient() || cond > NORMAL_EQ_COND_LIMIT {
        return Err(Error::SingularDesign {
            cond: if proj.is_rank_deficient() {
                f64::INFINITY
            } else {
                cond
            },
        });
    }
    Ok(RegressionFit {
        coefficients: proj.coefficients(values),
        fitted: proj.fitted(values),
    })
}
