//! Problem data: coefficient processes, weighting matrices, terminal state,
//! and the numerical audit of the standing assumptions (H1)-(H3).
//!
//! Coefficients are matrices of expressions in `(s, w)`, which covers constant
//! matrices and the rational-polynomial random coefficients of the worked
//! example. Assumption checks are sampled on a configurable `(s, w)` grid, not
//! symbolic.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;

/// Matrix-valued coefficient: every entry is an expression in `(s, w)`.
#[derive(Debug, Clone)]
pub struct CoefficientExpr {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl CoefficientExpr {
    pub fn from_strings(rows: &[Vec<String>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Dimension("empty coefficient matrix".into()));
        }
        let c = rows[0].len();
        if c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged coefficient matrix".into()));
        }
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            for text in row {
                entries.push(Expr::parse(text)?);
            }
        }
        Ok(CoefficientExpr {
            rows: r,
            cols: c,
            entries,
        })
    }

    /// Constant matrix coefficient.
    pub fn constant(m: &DMatrix<f64>) -> Self {
        CoefficientExpr {
            rows: m.nrows(),
            cols: m.ncols(),
            entries: m.transpose().iter().copied().map(Expr::Const).collect(),
        }
    }

    pub fn scalar(text: &str) -> Result<Self> {
        Ok(CoefficientExpr {
            rows: 1,
            cols: 1,
            entries: vec![Expr::parse(text)?],
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Evaluate the matrix at `(s, w)`. Deterministic and reentrant.
    pub fn eval(&self, s: f64, w: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        self.eval_into(s, w, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, s: f64, w: f64, out: &mut DMatrix<f64>) -> Result<()> {
        debug_assert_eq!(out.nrows(), self.rows);
        debug_assert_eq!(out.ncols(), self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.entries[i * self.cols + j].eval(s, w)?;
            }
        }
        Ok(())
    }

    pub fn depends_on_w(&self) -> bool {
        self.entries.iter().any(|e| e.depends_on_w())
    }
}

/// Complete problem data for the backward LQ control problem.
#[allow(non_snake_case)]
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub n: usize,
    pub m: usize,
    pub t0: f64,
    pub t_end: f64,
    /// State drift coefficient, n x n.
    pub A: CoefficientExpr,
    /// Control coefficient, n x m.
    pub B: CoefficientExpr,
    /// Z coefficient in the drift, n x n.
    pub C: CoefficientExpr,
    /// Running weight on Y, n x n symmetric PSD.
    pub Q: CoefficientExpr,
    /// Running weight on Z, n x n symmetric, delta*I <= N <= lambda*I.
    pub N: CoefficientExpr,
    /// Running weight on u, m x m symmetric, R >= delta*I.
    pub R: CoefficientExpr,
    /// Initial-time weight, n x n symmetric PSD, evaluated at (t0, w).
    pub G: CoefficientExpr,
    /// Terminal state, n x 1, evaluated at (t_end, w).
    pub xi: CoefficientExpr,
    /// Claimed lower bound for N and R.
    pub delta: f64,
    /// Claimed upper bound for N.
    pub lambda: f64,
}

/// Outcome of the sampled assumption audit. Failures are reported, not thrown.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub h3_ok: bool,
    pub observed_min_eig_n: f64,
    pub observed_min_eig_r: f64,
    pub observed_max_norm: f64,
    pub sample_count: usize,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.h1_ok && self.h2_ok && self.h3_ok
    }
}

const EIG_TOL: f64 = 1e-10;
const SYM_TOL: f64 = 1e-9;
const NORM_BOUND: f64 = 1e9;

#[derive(Deserialize)]
struct ProblemFile {
    n: usize,
    m: usize,
    t0: f64,
    #[serde(rename = "T")]
    t_end: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<String>>,
    #[serde(rename = "B")]
    b: Vec<Vec<String>>,
    #[serde(rename = "C")]
    c: Vec<Vec<String>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<String>>,
    #[serde(rename = "N")]
    nw: Vec<Vec<String>>,
    #[serde(rename = "R")]
    rw: Vec<Vec<String>>,
    #[serde(rename = "G")]
    g: Vec<Vec<String>>,
    xi: Vec<String>,
    delta: f64,
    lambda: f64,
}

impl ProblemInstance {
    #[allow(clippy::too_many_arguments)]
    #[allow(non_snake_case)]
    pub fn new(
        n: usize,
        m: usize,
        t0: f64,
        t_end: f64,
        A: CoefficientExpr,
        B: CoefficientExpr,
        C: CoefficientExpr,
        Q: CoefficientExpr,
        N: CoefficientExpr,
        R: CoefficientExpr,
        G: CoefficientExpr,
        xi: CoefficientExpr,
        delta: f64,
        lambda: f64,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Validation(
                "state and control dimensions must be positive".into(),
            ));
        }
        if t0 < 0.0 || t0 >= t_end {
            return Err(Error::Validation(format!(
                "need 0 <= t0 < T, got t0={t0}, T={t_end}"
            )));
        }
        if delta <= 0.0 {
            return Err(Error::Validation("delta must be positive".into()));
        }
        if lambda < delta {
            return Err(Error::Validation("lambda must be >= delta".into()));
        }
        let dims: [(&CoefficientExpr, usize, usize, &str); 8] = [
            (&A, n, n, "A"),
            (&B, n, m, "B"),
            (&C, n, n, "C"),
            (&Q, n, n, "Q"),
            (&N, n, n, "N"),
            (&R, m, m, "R"),
            (&G, n, n, "G"),
            (&xi, n, 1, "xi"),
        ];
        for (expr, r, c, name) in dims {
            if expr.rows() != r || expr.cols() != c {
                return Err(Error::Dimension(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    expr.rows(),
                    expr.cols()
                )));
            }
        }
        Ok(ProblemInstance {
            n,
            m,
            t0,
            t_end,
            A,
            B,
            C,
            Q,
            N,
            R,
            G,
            xi,
            delta,
            lambda,
        })
    }

    /// Constant-coefficient instance from plain matrices.
    #[allow(clippy::too_many_arguments)]
    #[allow(non_snake_case)]
    pub fn from_matrices(
        t0: f64,
        t_end: f64,
        A: &DMatrix<f64>,
        B: &DMatrix<f64>,
        C: &DMatrix<f64>,
        Q: &DMatrix<f64>,
        N: &DMatrix<f64>,
        R: &DMatrix<f64>,
        G: &DMatrix<f64>,
        xi: &DMatrix<f64>,
        delta: f64,
        lambda: f64,
    ) -> Result<Self> {
        ProblemInstance::new(
            A.nrows(),
            B.ncols(),
            t0,
            t_end,
            CoefficientExpr::constant(A),
            CoefficientExpr::constant(B),
            CoefficientExpr::constant(C),
            CoefficientExpr::constant(Q),
            CoefficientExpr::constant(N),
            CoefficientExpr::constant(R),
            CoefficientExpr::constant(G),
            CoefficientExpr::constant(xi),
            delta,
            lambda,
        )
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: ProblemFile = serde_json::from_str(text)?;
        let xi_rows: Vec<Vec<String>> = f.xi.into_iter().map(|e| vec![e]).collect();
        ProblemInstance::new(
            f.n,
            f.m,
            f.t0,
            f.t_end,
            CoefficientExpr::from_strings(&f.a)?,
            CoefficientExpr::from_strings(&f.b)?,
            CoefficientExpr::from_strings(&f.c)?,
            CoefficientExpr::from_strings(&f.q)?,
            CoefficientExpr::from_strings(&f.nw)?,
            CoefficientExpr::from_strings(&f.rw)?,
            CoefficientExpr::from_strings(&f.g)?,
            CoefficientExpr::from_strings(&xi_rows)?,
            f.delta,
            f.lambda,
        )
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// True when A, B, C, Q, N, R are all w-free (Riccati ODE route applies).
    pub fn coefficients_deterministic(&self) -> bool {
        !(self.A.depends_on_w()
            || self.B.depends_on_w()
            || self.C.depends_on_w()
            || self.Q.depends_on_w()
            || self.N.depends_on_w()
            || self.R.depends_on_w())
    }

    pub fn xi_deterministic(&self) -> bool {
        !self.xi.depends_on_w()
    }

    /// Terminal state per path at the given terminal Brownian values.
    pub fn xi_values(&self, w_terminal: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        w_terminal
            .iter()
            .map(|&w| self.xi.eval(self.t_end, w))
            .collect()
    }

    /// Default audit grid: 21 times across the horizon, w in [-6, 6] with 121 points.
    pub fn default_sample_grid(&self) -> Vec<(f64, f64)> {
        let mut grid = Vec::with_capacity(21 * 121);
        for ti in 0..21 {
            let s = self.t0 + (self.t_end - self.t0) * ti as f64 / 20.0;
            for wi in 0..121 {
                let w = -6.0 + 0.1 * wi as f64;
                grid.push((s, w));
            }
        }
        grid
    }

    /// Sampled audit of (H1)-(H3). Adding sample points can only lower the
    /// observed minima.
    pub fn validate_assumptions(&self, sample_grid: &[(f64, f64)]) -> AssumptionReport {
        let mut h1_ok = true;
        let mut h2_ok = true;
        let mut h3_ok = true;
        let mut min_eig_n = f64::INFINITY;
        let mut min_eig_r = f64::INFINITY;
        let mut max_norm: f64 = 0.0;

        for &(s, w) in sample_grid {
            // (H1): coefficients evaluable and bounded.
            for coef in [&self.A, &self.B, &self.C] {
                match coef.eval(s, w) {
                    Ok(mat) => {
                        let nrm = mat.norm();
                        max_norm = max_norm.max(nrm);
                        if !nrm.is_finite() || nrm > NORM_BOUND {
                            h1_ok = false;
                        }
                    }
                    Err(_) => h1_ok = false,
                }
            }
            // (H2): Q, N PSD symmetric; R >= delta I; G PSD at (t0, w).
            for (coef, name) in [(&self.Q, "Q"), (&self.N, "N"), (&self.R, "R")] {
                match coef.eval(s, w) {
                    Ok(mat) => {
                        max_norm = max_norm.max(mat.norm());
                        if linalg::asymmetry(&mat) > SYM_TOL {
                            h2_ok = false;
                        }
                        let lo = linalg::min_eig_sym(&mat);
                        match name {
                            "N" => {
                                min_eig_n = min_eig_n.min(lo);
                                if lo < -EIG_TOL {
                                    h2_ok = false;
                                }
                                let hi = linalg::max_eig_sym(&mat);
                                if lo < self.delta - EIG_TOL || hi > self.lambda + EIG_TOL {
                                    h3_ok = false;
                                }
                            }
                            "R" => {
                                min_eig_r = min_eig_r.min(lo);
                                if lo < self.delta - EIG_TOL {
                                    h2_ok = false;
                                }
                            }
                            _ => {
                                if lo < -EIG_TOL {
                                    h2_ok = false;
                                }
                            }
                        }
                    }
                    Err(_) => h2_ok = false,
                }
            }
            match self.G.eval(self.t0, w) {
                Ok(g) => {
                    if linalg::asymmetry(&g) > SYM_TOL || linalg::min_eig_sym(&g) < -EIG_TOL {
                        h2_ok = false;
                    }
                }
                Err(_) => h2_ok = false,
            }
        }

        AssumptionReport {
            h1_ok,
            h2_ok,
            h3_ok,
            observed_min_eig_n: min_eig_n,
            observed_min_eig_r: min_eig_r,
            observed_max_norm: max_norm,
            sample_count: sample_grid.len(),
        }
    }
}

/// The worked one-dimensional example: dY = u/(1+w^2) ds + Z dW, Y(T) = 1,
/// with weights N = R = (2+w^2)/(1+w^2), Q = G = 0.
pub fn example_instance(t_end: f64) -> ProblemInstance {
    ProblemInstance::new(
        1,
        1,
        0.0,
        t_end,
        CoefficientExpr::scalar("0").unwrap(),
        CoefficientExpr::scalar("1/(1+w^2)").unwrap(),
        CoefficientExpr::scalar("0").unwrap(),
        CoefficientExpr::scalar("0").unwrap(),
        CoefficientExpr::scalar("(2+w^2)/(1+w^2)").unwrap(),
        CoefficientExpr::scalar("(2+w^2)/(1+w^2)").unwrap(),
        CoefficientExpr::scalar("0").unwrap(),
        CoefficientExpr::scalar("1").unwrap(),
        1.0,
        2.0,
    )
    .unwrap()
}
