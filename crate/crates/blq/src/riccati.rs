//! Solvers for the stochastic Riccati-type equation
//!
//! ```text
//! dSigma = [Sigma A^T + A Sigma + Sigma Q Sigma - B R^{-1} B^T
//!           + Lambda N (I + Sigma N)^{-1} Lambda
//!           - C (I + Sigma N)^{-1} Sigma C^T
//!           - C (I + Sigma N)^{-1} Lambda
//!           - Lambda (I + N Sigma)^{-1} C^T] ds - Lambda dW,
//! Sigma(T) = 0,
//! ```
//!
//! by three routes:
//!
//! 1. deterministic coefficients: classical RK4 on the matrix ODE (Lambda = 0);
//! 2. epsilon-perturbation: the terminal condition is replaced by eps*I, the
//!    perturbed solution is the inverse of the forward-LQ Riccati solution
//!    P_eps, and Sigma is recovered as the monotone limit eps -> 0;
//! 3. random Markovian coefficients: backward least-squares regression on a
//!    w-basis, with Lambda extracted by the martingale-increment estimator.
//!
//! A candidate (Sigma, Lambda) is certified by the method of undetermined
//! coefficients: the candidate induces a forward-LQ Riccati equation whose
//! solution must coincide with the candidate; `fixed_point_residual` measures
//! the defect of that identity.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fields::MatField;
use crate::grid::{PathEnsemble, TimeGrid};
use crate::linalg;
use crate::problem::ProblemInstance;
use crate::regression::{Projector, RegressionBasis};

const BLOWUP_LIMIT: f64 = 1e6;
const COND_LIMIT: f64 = 1e12;
const MONOTONE_TOL: f64 = 1e-6;
const PD_FLOOR_EPS: f64 = 1e-10;

/// Matrix samples of a Riccati component: one matrix per step in the
/// deterministic case, one per (path, step) in the random case.
#[derive(Debug, Clone)]
pub enum SigmaSamples {
    PerStep(Vec<DMatrix<f64>>),
    PerPath(MatField),
}

impl SigmaSamples {
    pub fn is_per_step(&self) -> bool {
        matches!(self, SigmaSamples::PerStep(_))
    }

    pub fn steps(&self) -> usize {
        match self {
            SigmaSamples::PerStep(v) => v.len(),
            SigmaSamples::PerPath(f) => f.steps(),
        }
    }

    pub fn at(&self, k: usize, path: usize) -> DMatrix<f64> {
        match self {
            SigmaSamples::PerStep(v) => v[k].clone(),
            SigmaSamples::PerPath(f) => f.get(path, k),
        }
    }
}

/// Solution samples (Sigma, Lambda) of the stochastic Riccati equation.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub sigma: SigmaSamples,
    pub lambda: SigmaSamples,
    pub grid: TimeGrid,
}

impl RiccatiSolution {
    pub fn is_deterministic(&self) -> bool {
        self.sigma.is_per_step()
    }

    pub fn sigma_at(&self, k: usize, path: usize) -> DMatrix<f64> {
        self.sigma.at(k, path)
    }

    pub fn lambda_at(&self, k: usize, path: usize) -> DMatrix<f64> {
        self.lambda.at(k, path)
    }

    /// CSV dump: `k,t,Sigma_11..Sigma_nn,Lambda_11..Lambda_nn` per step in the
    /// deterministic case, prefixed by a `path` column otherwise.
    pub fn dump_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        let n = self.sigma.at(0, 0).nrows();
        let mut cols = String::new();
        for r in 0..n {
            for c in 0..n {
                cols.push_str(&format!(",Sigma_{}{}", r + 1, c + 1));
            }
        }
        for r in 0..n {
            for c in 0..n {
                cols.push_str(&format!(",Lambda_{}{}", r + 1, c + 1));
            }
        }
        let paths = match &self.sigma {
            SigmaSamples::PerStep(_) => 1,
            SigmaSamples::PerPath(f) => f.paths(),
        };
        if self.is_deterministic() {
            writeln!(out, "k,t{cols}")?;
        } else {
            writeln!(out, "path,k,t{cols}")?;
        }
        for i in 0..paths {
            for k in 0..self.sigma.steps() {
                let mut line = if self.is_deterministic() {
                    format!("{},{}", k, self.grid.time(k))
                } else {
                    format!("{},{},{}", i, k, self.grid.time(k))
                };
                for m in [self.sigma.at(k, i), self.lambda.at(k, i)] {
                    for r in 0..n {
                        for c in 0..n {
                            line.push_str(&format!(",{}", m[(r, c)]));
                        }
                    }
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Forward-LQ Riccati solution (P_eps, Pi_eps) with P(T) = eps^{-1} I.
#[derive(Debug, Clone)]
pub struct ForwardRiccatiSolution {
    pub p: SigmaSamples,
    pub pi: SigmaSamples,
    pub epsilon: f64,
    pub grid: TimeGrid,
    /// Recorded uniform positivity bound: smallest sampled eigenvalue of P.
    pub min_eig: f64,
}

/// Coefficient evaluators at one (s, w, Sigma) sample.
struct CoeffSet {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    n: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CoeffSet {
    fn eval(p: &ProblemInstance, s: f64, w: f64) -> Result<Self> {
        Ok(CoeffSet {
            a: p.A.eval(s, w)?,
            b: p.B.eval(s, w)?,
            c: p.C.eval(s, w)?,
            q: p.Q.eval(s, w)?,
            n: p.N.eval(s, w)?,
            r: p.R.eval(s, w)?,
        })
    }

    /// B R^{-1} B^T.
    fn brb(&self) -> Result<DMatrix<f64>> {
        let rinv_bt =
            self.r
                .clone()
                .lu()
                .solve(&self.b.transpose())
                .ok_or(Error::Conditioning {
                    what: "R".into(),
                    cond: f64::INFINITY,
                })?;
        Ok(&self.b * rinv_bt)
    }
}

/// Full drift of the stochastic Riccati equation at one sample.
fn sre_drift(sigma: &DMatrix<f64>, lambda: &DMatrix<f64>, cs: &CoeffSet) -> Result<DMatrix<f64>> {
    let n_dim = sigma.nrows();
    let eye = DMatrix::<f64>::identity(n_dim, n_dim);
    let ip_sn = &eye + sigma * &cs.n;
    let cond = linalg::cond_estimate(&ip_sn);
    if cond > COND_LIMIT {
        return Err(Error::Conditioning {
            what: "I + Sigma*N".into(),
            cond,
        });
    }
    let inv_sn = ip_sn.clone().try_inverse().unwrap();
    let inv_ns = (&eye + &cs.n * sigma).try_inverse().unwrap();

    let mut drift = sigma * cs.a.transpose() + &cs.a * sigma + sigma * &cs.q * sigma - cs.brb()?
        + lambda * &cs.n * &inv_sn * lambda
        - &cs.c * &inv_sn * sigma * cs.c.transpose()
        - &cs.c * &inv_sn * lambda
        - lambda * inv_ns * cs.c.transpose();
    linalg::symmetrize(&mut drift);
    Ok(drift)
}

/// Backward RK4 over the grid: integrates dM/ds = f(s, M) from M(T) = terminal
/// down to t0, storing one matrix per grid point and symmetrizing each step.
fn rk4_backward<F>(grid: &TimeGrid, terminal: DMatrix<f64>, mut f: F) -> Result<Vec<DMatrix<f64>>>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let k_steps = grid.steps();
    let h = -grid.dt();
    let mut out = vec![DMatrix::zeros(terminal.nrows(), terminal.ncols()); k_steps + 1];
    out[k_steps] = terminal;
    for k in (0..k_steps).rev() {
        let s1 = grid.time(k + 1);
        let m = &out[k + 1];
        let k1 = f(s1, m)?;
        let k2 = f(s1 + 0.5 * h, &(m + &k1 * (0.5 * h)))?;
        let k3 = f(s1 + 0.5 * h, &(m + &k2 * (0.5 * h)))?;
        let k4 = f(s1 + h, &(m + &k3 * h))?;
        let mut next = m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        linalg::symmetrize(&mut next);
        let norm = next.norm();
        if !norm.is_finite() || norm > BLOWUP_LIMIT {
            return Err(Error::Blowup {
                what: "Riccati".into(),
                norm,
                step: k,
            });
        }
        out[k] = next;
    }
    Ok(out)
}

/// Deterministic RK4 route for the perturbed equation with Sigma(T) = eps*I.
fn solve_sigma_deterministic_terminal(
    p: &ProblemInstance,
    grid: &TimeGrid,
    terminal_eps: f64,
) -> Result<RiccatiSolution> {
    if !p.coefficients_deterministic() {
        return Err(Error::Validation(
            "deterministic Riccati route requires w-free coefficients".into(),
        ));
    }
    let zero = DMatrix::zeros(p.n, p.n);
    let terminal = DMatrix::identity(p.n, p.n) * terminal_eps;
    let sigmas = rk4_backward(grid, terminal, |s, m| {
        let cs = CoeffSet::eval(p, s, 0.0)?;
        sre_drift(m, &zero, &cs)
    })?;
    let lambdas = vec![DMatrix::zeros(p.n, p.n); grid.steps() + 1];
    Ok(RiccatiSolution {
        sigma: SigmaSamples::PerStep(sigmas),
        lambda: SigmaSamples::PerStep(lambdas),
        grid: *grid,
    })
}

/// Deterministic matrix-ODE route: RK4 with Lambda = 0 and Sigma(T) = 0.
pub fn solve_riccati_deterministic(
    p: &ProblemInstance,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    solve_sigma_deterministic_terminal(p, grid, 0.0)
}

/// Backward regression route for random Markovian coefficients: at each step,
/// Lambda is the (negated) martingale-increment regression of Sigma_{k+1},
/// the conditional mean is a least-squares fit, and the drift is applied
/// explicitly; every step is symmetrized and projected onto the PSD cone.
pub fn solve_riccati_markovian(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<RiccatiSolution> {
    solve_sigma_markovian_terminal(p, paths, basis, 0.0, 0.0)
}

fn solve_sigma_markovian_terminal(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
    terminal_eps: f64,
    floor: f64,
) -> Result<RiccatiSolution> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let n = p.n;
    let dt = grid.dt();
    let mut sigma = MatField::zeros(m_paths, k_steps + 1, n);
    let mut lambda = MatField::zeros(m_paths, k_steps + 1, n);
    if terminal_eps != 0.0 {
        let term = DMatrix::identity(n, n) * terminal_eps;
        for i in 0..m_paths {
            sigma.set(i, k_steps, &term);
        }
    }

    let mut cond_cols = vec![vec![0.0; m_paths]; n * n];
    let mut lam_cols = vec![vec![0.0; m_paths]; n * n];
    for k in (0..k_steps).rev() {
        let t_k = grid.time(k);
        let w_col = paths.step_values(k);
        let dw = paths.step_increments(k);
        let proj = Projector::new(&w_col, basis)?;
        for r in 0..n {
            for c in r..n {
                let next = sigma.entry_column(k + 1, r, c);
                let cond = proj.fitted(&next);
                // dSigma carries -Lambda dW, so the dW-coefficient of
                // Sigma_{k+1} is -Lambda.
                let mut lam = proj.dw_coefficient(&next, &dw, dt);
                for v in lam.iter_mut() {
                    *v = -*v;
                }
                cond_cols[r * n + c] = cond;
                lam_cols[r * n + c] = lam;
            }
        }
        for i in 0..m_paths {
            let mut sig_bar = DMatrix::zeros(n, n);
            let mut lam_i = DMatrix::zeros(n, n);
            for r in 0..n {
                for c in r..n {
                    sig_bar[(r, c)] = cond_cols[r * n + c][i];
                    sig_bar[(c, r)] = sig_bar[(r, c)];
                    lam_i[(r, c)] = lam_cols[r * n + c][i];
                    lam_i[(c, r)] = lam_i[(r, c)];
                }
            }
            let cs = CoeffSet::eval(p, t_k, w_col[i])?;
            let drift = sre_drift(&sig_bar, &lam_i, &cs)?;
            let mut next = sig_bar - drift * dt;
            linalg::psd_floor(&mut next, floor);
            let norm = next.norm();
            if !norm.is_finite() || norm > BLOWUP_LIMIT {
                return Err(Error::Blowup {
                    what: "Riccati".into(),
                    norm,
                    step: k,
                });
            }
            sigma.set(i, k, &next);
            lambda.set(i, k, &lam_i);
        }
    }
    Ok(RiccatiSolution {
        sigma: SigmaSamples::PerPath(sigma),
        lambda: SigmaSamples::PerPath(lambda),
        grid,
    })
}

/// Route selector for operations that work both deterministically and by
/// regression on a path ensemble.
#[derive(Clone, Copy)]
pub enum SamplingMode<'a> {
    Deterministic,
    Regression {
        paths: &'a PathEnsemble,
        basis: &'a RegressionBasis,
    },
}

/// Perturbed solution (Sigma_eps, Lambda_eps) with terminal eps*I.
pub fn solve_sigma_eps(
    p: &ProblemInstance,
    grid: &TimeGrid,
    epsilon: f64,
    sampling: SamplingMode<'_>,
) -> Result<RiccatiSolution> {
    if epsilon <= 0.0 {
        return Err(Error::Validation("epsilon must be positive".into()));
    }
    match sampling {
        SamplingMode::Deterministic => solve_sigma_deterministic_terminal(p, grid, epsilon),
        SamplingMode::Regression { paths, basis } => {
            solve_sigma_markovian_terminal(p, paths, basis, epsilon, PD_FLOOR_EPS)
        }
    }
}

/// Forward-LQ Riccati solution for the given eps: P_eps = Sigma_eps^{-1} with
/// the terminal slice set to eps^{-1} I exactly, and Pi_eps = P Lambda_eps P.
pub fn solve_forward_riccati_eps(
    p: &ProblemInstance,
    grid: &TimeGrid,
    epsilon: f64,
    sampling: SamplingMode<'_>,
) -> Result<ForwardRiccatiSolution> {
    let sig = solve_sigma_eps(p, grid, epsilon, sampling)?;
    let k_steps = grid.steps();
    let n = p.n;
    let terminal = DMatrix::<f64>::identity(n, n) / epsilon;
    let mut min_eig = f64::INFINITY;
    let invert = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        m.clone().try_inverse().ok_or(Error::Conditioning {
            what: "Sigma_eps".into(),
            cond: f64::INFINITY,
        })
    };
    match &sig.sigma {
        SigmaSamples::PerStep(sigmas) => {
            let mut ps = Vec::with_capacity(k_steps + 1);
            for (k, s) in sigmas.iter().enumerate() {
                let mut pk = if k == k_steps {
                    terminal.clone()
                } else {
                    invert(s)?
                };
                linalg::symmetrize(&mut pk);
                min_eig = min_eig.min(linalg::min_eig_sym(&pk));
                ps.push(pk);
            }
            Ok(ForwardRiccatiSolution {
                p: SigmaSamples::PerStep(ps),
                pi: SigmaSamples::PerStep(vec![DMatrix::zeros(n, n); k_steps + 1]),
                epsilon,
                grid: *grid,
                min_eig,
            })
        }
        SigmaSamples::PerPath(field) => {
            let m_paths = field.paths();
            let mut pf = MatField::zeros(m_paths, k_steps + 1, n);
            let mut pif = MatField::zeros(m_paths, k_steps + 1, n);
            for i in 0..m_paths {
                for k in 0..=k_steps {
                    let mut pk = if k == k_steps {
                        terminal.clone()
                    } else {
                        invert(&field.get(i, k))?
                    };
                    linalg::symmetrize(&mut pk);
                    min_eig = min_eig.min(linalg::min_eig_sym(&pk));
                    let lam = sig.lambda_at(k, i);
                    let pi = &pk * lam * &pk;
                    pf.set(i, k, &pk);
                    pif.set(i, k, &pi);
                }
            }
            Ok(ForwardRiccatiSolution {
                p: SigmaSamples::PerPath(pf),
                pi: SigmaSamples::PerPath(pif),
                epsilon,
                grid: *grid,
                min_eig,
            })
        }
    }
}

/// Convergence table of the eps limit.
#[derive(Debug)]
pub struct EpsStudy {
    pub eps: Vec<f64>,
    /// Sup-norm (over time; RMS over paths in the random case) of
    /// Sigma_{eps_i} - Sigma_{eps_{i+1}}.
    pub sup_diffs: Vec<f64>,
    /// PSD-order flags: Sigma_{eps_{i+1}} <= Sigma_{eps_i} within 1e-6.
    pub monotone_ok: Vec<bool>,
    /// Most negative eigenvalue seen across all consecutive differences.
    pub worst_violation: f64,
    /// Smallest-eps member (Sigma_eps, Lambda_eps).
    pub limit: RiccatiSolution,
}

impl EpsStudy {
    pub fn all_monotone(&self) -> bool {
        self.monotone_ok.iter().all(|&b| b)
    }
}

fn sample_paths_count(s: &SigmaSamples) -> usize {
    match s {
        SigmaSamples::PerStep(_) => 1,
        SigmaSamples::PerPath(f) => f.paths(),
    }
}

/// Sup-over-time, RMS-over-paths distance between two Sigma families.
fn sigma_distance(a: &RiccatiSolution, b: &RiccatiSolution) -> f64 {
    let paths = sample_paths_count(&a.sigma);
    let steps = a.sigma.steps();
    let mut sup = 0.0f64;
    for k in 0..steps {
        let mut acc = 0.0;
        for i in 0..paths {
            acc += (a.sigma_at(k, i) - b.sigma_at(k, i)).norm_squared();
        }
        sup = sup.max((acc / paths as f64).sqrt());
    }
    sup
}

/// Smallest eigenvalue of Sigma_a - Sigma_b over all samples.
fn sigma_order_margin(a: &RiccatiSolution, b: &RiccatiSolution) -> f64 {
    let paths = sample_paths_count(&a.sigma);
    let steps = a.sigma.steps();
    let mut worst = f64::INFINITY;
    for k in 0..steps {
        for i in 0..paths {
            let diff = a.sigma_at(k, i) - b.sigma_at(k, i);
            worst = worst.min(linalg::min_eig_sym(&diff));
        }
    }
    worst
}

/// Non-strict eps study: computes the table and flags without failing on a
/// monotonicity violation (the CLI writes the table either way).
pub fn eps_study(
    p: &ProblemInstance,
    grid: &TimeGrid,
    eps_sequence: &[f64],
    sampling: SamplingMode<'_>,
) -> Result<EpsStudy> {
    if eps_sequence.len() < 2 {
        return Err(Error::Validation(
            "eps sequence needs at least two entries".into(),
        ));
    }
    if eps_sequence.iter().any(|&e| e <= 0.0) {
        return Err(Error::Validation("eps values must be positive".into()));
    }
    if eps_sequence.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Validation(
            "eps sequence must be strictly decreasing".into(),
        ));
    }
    let mut solutions = Vec::with_capacity(eps_sequence.len());
    for &e in eps_sequence {
        solutions.push(solve_sigma_eps(p, grid, e, sampling)?);
    }
    let mut sup_diffs = Vec::new();
    let mut monotone_ok = Vec::new();
    let mut worst = f64::INFINITY;
    for pair in solutions.windows(2) {
        sup_diffs.push(sigma_distance(&pair[0], &pair[1]));
        let margin = sigma_order_margin(&pair[0], &pair[1]);
        monotone_ok.push(margin >= -MONOTONE_TOL);
        worst = worst.min(margin);
    }
    let limit = solutions.pop().unwrap();
    Ok(EpsStudy {
        eps: eps_sequence.to_vec(),
        sup_diffs,
        monotone_ok,
        worst_violation: worst,
        limit,
    })
}

/// Strict eps limit: as [`eps_study`], but a PSD-order violation beyond
/// tolerance is an error.
pub fn eps_limit_sigma(
    p: &ProblemInstance,
    grid: &TimeGrid,
    eps_sequence: &[f64],
    sampling: SamplingMode<'_>,
) -> Result<EpsStudy> {
    let study = eps_study(p, grid, eps_sequence, sampling)?;
    if let Some(idx) = study.monotone_ok.iter().position(|&ok| !ok) {
        return Err(Error::Nonmonotone {
            eps_hi: study.eps[idx],
            eps_lo: study.eps[idx + 1],
            min_eig: study.worst_violation,
        });
    }
    Ok(study)
}

/// Coefficients of the induced forward-LQ Riccati equation, built from a
/// candidate Sigma at one sample.
pub struct UndeterminedCoefficients {
    pub tilde_a: DMatrix<f64>,
    pub tilde_q: DMatrix<f64>,
    pub tilde_s: DMatrix<f64>,
    pub tilde_r: DMatrix<f64>,
    pub tilde_g: DMatrix<f64>,
}

impl UndeterminedCoefficients {
    pub fn build(p: &ProblemInstance, s: f64, w: f64, sigma: &DMatrix<f64>) -> Result<Self> {
        let cs = CoeffSet::eval(p, s, w)?;
        Self::from_coeffs(&cs, sigma)
    }

    fn from_coeffs(cs: &CoeffSet, sigma: &DMatrix<f64>) -> Result<Self> {
        let n_dim = sigma.nrows();
        let eye = DMatrix::<f64>::identity(n_dim, n_dim);
        let n_inv = cs.n.clone().try_inverse().ok_or(Error::Conditioning {
            what: "N".into(),
            cond: f64::INFINITY,
        })?;
        let ip_sn = &eye + sigma * &cs.n;
        let cond = linalg::cond_estimate(&ip_sn);
        if cond > COND_LIMIT {
            return Err(Error::Conditioning {
                what: "I + Sigma*N".into(),
                cond,
            });
        }
        let inv_sn = ip_sn.try_inverse().unwrap();
        let tilde_a = -cs.a.transpose() - &cs.q * sigma;
        let mut tilde_q = cs.brb()?
            + sigma * &cs.q * sigma
            + &cs.c * &inv_sn * sigma * cs.c.transpose()
            + &cs.c * &inv_sn * &n_inv * cs.c.transpose();
        linalg::symmetrize(&mut tilde_q);
        let tilde_s = &n_inv * cs.c.transpose();
        Ok(UndeterminedCoefficients {
            tilde_a,
            tilde_q,
            tilde_s,
            tilde_r: n_inv,
            tilde_g: DMatrix::zeros(n_dim, n_dim),
        })
    }

    /// Backward drift F of the induced equation: dP = -F ds + Pi dW with
    /// F = P*Atilde + Atilde^T*P + Qtilde - (Stilde^T + Pi)(Rtilde + P)^{-1}(Stilde + Pi).
    fn backward_drift(&self, p_mat: &DMatrix<f64>, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rp = &self.tilde_r + p_mat;
        let cond = linalg::cond_estimate(&rp);
        if cond > COND_LIMIT {
            return Err(Error::Conditioning {
                what: "Rtilde + P".into(),
                cond,
            });
        }
        let inv_rp = rp.try_inverse().unwrap();
        let s_plus = &self.tilde_s + pi;
        let mut f = p_mat * &self.tilde_a + self.tilde_a.transpose() * p_mat + &self.tilde_q
            - s_plus.transpose() * inv_rp * s_plus;
        linalg::symmetrize(&mut f);
        Ok(f)
    }
}

/// Cubic Lagrange interpolation of per-step matrices at time s.
fn interp_per_step(values: &[DMatrix<f64>], grid: &TimeGrid, s: f64) -> DMatrix<f64> {
    let k_steps = grid.steps();
    if k_steps < 3 {
        // Linear fallback on coarse grids.
        let pos = ((s - grid.t0()) / grid.dt()).clamp(0.0, k_steps as f64);
        let k0 = (pos.floor() as usize).min(k_steps - 1);
        let theta = pos - k0 as f64;
        return &values[k0] * (1.0 - theta) + &values[k0 + 1] * theta;
    }
    let pos = (s - grid.t0()) / grid.dt();
    let anchor = (pos.floor() as isize).clamp(0, k_steps as isize - 1) as usize;
    let lo = anchor.saturating_sub(1).min(k_steps - 3);
    let times: Vec<f64> = (0..4).map(|j| grid.time(lo + j)).collect();
    let mut out = DMatrix::zeros(values[0].nrows(), values[0].ncols());
    for j in 0..4 {
        let mut weight = 1.0;
        for l in 0..4 {
            if l != j {
                weight *= (s - times[l]) / (times[j] - times[l]);
            }
        }
        out += &values[lo + j] * weight;
    }
    out
}

/// Sup-norm fixed-point residual of the undetermined-coefficients identity:
/// the forward-LQ equation induced by the candidate is solved and compared
/// against the candidate itself.
pub fn fixed_point_residual(
    p: &ProblemInstance,
    candidate: &RiccatiSolution,
    sampling: SamplingMode<'_>,
) -> Result<f64> {
    let grid = candidate.grid;
    match (&candidate.sigma, sampling) {
        (SigmaSamples::PerStep(sigmas), SamplingMode::Deterministic) => {
            let tilde = rk4_backward(&grid, DMatrix::zeros(p.n, p.n), |s, m| {
                let sigma_s = interp_per_step(sigmas, &grid, s);
                let cs = CoeffSet::eval(p, s, 0.0)?;
                let uc = UndeterminedCoefficients::from_coeffs(&cs, &sigma_s)?;
                let zero = DMatrix::zeros(p.n, p.n);
                Ok(-uc.backward_drift(m, &zero)?)
            })?;
            let mut sup = 0.0f64;
            for (k, s) in sigmas.iter().enumerate() {
                sup = sup.max((&tilde[k] - s).norm());
            }
            Ok(sup)
        }
        (_, SamplingMode::Regression { paths, basis }) => {
            fixed_point_residual_markovian(p, candidate, paths, basis)
        }
        (SigmaSamples::PerPath(_), SamplingMode::Deterministic) => Err(Error::Validation(
            "per-path candidate requires the regression sampling mode".into(),
        )),
    }
}

fn fixed_point_residual_markovian(
    p: &ProblemInstance,
    candidate: &RiccatiSolution,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<f64> {
    let grid = *paths.grid();
    let k_steps = grid.steps();
    let m_paths = paths.paths();
    let n = p.n;
    let dt = grid.dt();
    if candidate.sigma.steps() != k_steps + 1 {
        return Err(Error::Dimension(
            "candidate grid does not match ensemble".into(),
        ));
    }
    let mut tilde = MatField::zeros(m_paths, k_steps + 1, n);
    let mut residual: f64 = {
        let mut acc = 0.0;
        for i in 0..m_paths {
            acc += candidate.sigma_at(k_steps, i).norm_squared();
        }
        (acc / m_paths as f64).sqrt()
    };

    let mut cond_cols = vec![vec![0.0; m_paths]; n * n];
    let mut pi_cols = vec![vec![0.0; m_paths]; n * n];
    for k in (0..k_steps).rev() {
        let t_k = grid.time(k);
        let w_col = paths.step_values(k);
        let dw = paths.step_increments(k);
        let proj = Projector::new(&w_col, basis)?;
        for r in 0..n {
            for c in r..n {
                let next = tilde.entry_column(k + 1, r, c);
                cond_cols[r * n + c] = proj.fitted(&next);
                pi_cols[r * n + c] = proj.dw_coefficient(&next, &dw, dt);
            }
        }
        let mut step_err = 0.0;
        for i in 0..m_paths {
            let mut p_bar = DMatrix::zeros(n, n);
            let mut pi_i = DMatrix::zeros(n, n);
            for r in 0..n {
                for c in r..n {
                    p_bar[(r, c)] = cond_cols[r * n + c][i];
                    p_bar[(c, r)] = p_bar[(r, c)];
                    pi_i[(r, c)] = pi_cols[r * n + c][i];
                    pi_i[(c, r)] = pi_i[(r, c)];
                }
            }
            let sigma_i = candidate.sigma_at(k, i);
            let cs = CoeffSet::eval(p, t_k, w_col[i])?;
            let uc = UndeterminedCoefficients::from_coeffs(&cs, &sigma_i)?;
            // dP = -F ds + Pi dW backward in time: P_k = E_k[P_{k+1}] + F dt.
            let f = uc.backward_drift(&p_bar, &pi_i)?;
            let mut next = p_bar + f * dt;
            linalg::psd_floor(&mut next, 0.0);
            let norm = next.norm();
            if !norm.is_finite() || norm > BLOWUP_LIMIT {
                return Err(Error::Blowup {
                    what: "tilde Riccati".into(),
                    norm,
                    step: k,
                });
            }
            tilde.set(i, k, &next);
            step_err += (next - sigma_i).norm_squared();
        }
        residual = residual.max((step_err / m_paths as f64).sqrt());
    }
    Ok(residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::example_instance;

    fn scalar_instance(a: f64, b: f64, c: f64, q: f64, nw: f64, rw: f64) -> ProblemInstance {
        let mk = |v: f64| DMatrix::from_element(1, 1, v);
        ProblemInstance::from_matrices(
            0.0,
            1.0,
            &mk(a),
            &mk(b),
            &mk(c),
            &mk(q),
            &mk(nw),
            &mk(rw),
            &mk(0.0),
            &mk(1.0),
            nw.min(rw),
            nw,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_one_minus_s() {
        let p = scalar_instance(0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let sol = solve_riccati_deterministic(&p, &grid).unwrap();
        let mut max_err = 0.0f64;
        for k in 0..=1000 {
            let exact = 1.0 - grid.time(k);
            max_err = max_err.max((sol.sigma_at(k, 0)[(0, 0)] - exact).abs());
        }
        assert!(max_err < 1e-10, "max error {max_err}");
        assert_eq!(sol.sigma_at(1000, 0)[(0, 0)], 0.0);
    }

    #[test]
    fn zero_b_gives_zero_sigma() {
        let p = scalar_instance(0.5, 0.0, 0.3, 0.2, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sol = solve_riccati_deterministic(&p, &grid).unwrap();
        for k in 0..=50 {
            assert_eq!(sol.sigma_at(k, 0)[(0, 0)], 0.0);
        }
    }

    #[test]
    fn self_convergence_at_fine_resolution() {
        let p = scalar_instance(0.0, 1.0, 1.0, 0.0, 1.0, 1.0);
        let coarse = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let fine = TimeGrid::new(0.0, 1.0, 100_000).unwrap();
        let s_coarse = solve_riccati_deterministic(&p, &coarse).unwrap();
        let s_fine = solve_riccati_deterministic(&p, &fine).unwrap();
        let diff = (s_coarse.sigma_at(0, 0)[(0, 0)] - s_fine.sigma_at(0, 0)[(0, 0)]).abs();
        assert!(diff < 1e-8, "self-convergence gap {diff}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let p = scalar_instance(0.4, 1.0, 0.8, 0.5, 1.0, 1.0);
        let err = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let sol = solve_riccati_deterministic(&p, &grid).unwrap();
            sol.sigma_at(0, 0)[(0, 0)]
        };
        let reference = err(4096);
        let e1 = (err(16) - reference).abs();
        let e2 = (err(32) - reference).abs();
        let rate = (e1 / e2).log2();
        assert!(rate > 3.5, "observed order {rate}");
    }

    #[test]
    fn eps_terminal_and_closed_form() {
        let p = scalar_instance(0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let fr = solve_forward_riccati_eps(&p, &grid, 0.5, SamplingMode::Deterministic).unwrap();
        assert_eq!(fr.p.at(1000, 0)[(0, 0)], 2.0);
        // P_eps(s) = 1/(eps + T - s): at s=0, eps=1 the value is 0.5.
        let fr1 = solve_forward_riccati_eps(&p, &grid, 1.0, SamplingMode::Deterministic).unwrap();
        assert!((fr1.p.at(0, 0)[(0, 0)] - 0.5).abs() < 1e-10);
        assert!(fr1.min_eig > 0.0);
    }

    #[test]
    fn p_eps_is_monotone_in_eps() {
        // P_{eps1} <= P_{eps2} for eps2 <= eps1, i.e. Sigma_{eps2} <= Sigma_{eps1}.
        let p = scalar_instance(0.4, 1.0, 0.6, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let hi = solve_sigma_eps(&p, &grid, 0.5, SamplingMode::Deterministic).unwrap();
        let lo = solve_sigma_eps(&p, &grid, 0.05, SamplingMode::Deterministic).unwrap();
        for k in 0..=200 {
            let margin = (hi.sigma_at(k, 0) - lo.sigma_at(k, 0))[(0, 0)];
            assert!(margin >= -1e-10, "order violated at step {k}: {margin}");
        }
    }

    #[test]
    fn eps_limit_scalar_table() {
        let p = scalar_instance(0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let eps = [0.1, 0.01, 0.001];
        let study = eps_limit_sigma(&p, &grid, &eps, SamplingMode::Deterministic).unwrap();
        // Sigma_eps(s) = eps + (1 - s): differences are exactly eps_i - eps_{i+1}.
        assert!(
            (study.sup_diffs[0] - 0.09).abs() < 1e-8,
            "{}",
            study.sup_diffs[0]
        );
        assert!((study.sup_diffs[1] - 0.009).abs() < 1e-8);
        assert!(study.all_monotone());
        let limit0 = study.limit.sigma_at(0, 0)[(0, 0)];
        assert!((limit0 - 1.0).abs() < 2e-3, "limit {limit0}");
    }

    #[test]
    fn eps_limit_vanishes_without_control() {
        let p = scalar_instance(0.5, 0.0, 0.3, 0.2, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 400).unwrap();
        let eps = [0.1, 0.01, 0.001];
        let study = eps_limit_sigma(&p, &grid, &eps, SamplingMode::Deterministic).unwrap();
        let mut sup = 0.0f64;
        for k in 0..=400 {
            sup = sup.max(study.limit.sigma_at(k, 0)[(0, 0)].abs());
        }
        assert!(sup <= 10.0 * 0.001, "uncontrolled limit {sup}");
    }

    #[test]
    fn eps_sequence_validation() {
        let p = scalar_instance(0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        for bad in [vec![0.1], vec![0.1, 0.2], vec![0.1, -0.01]] {
            let err = eps_limit_sigma(&p, &grid, &bad, SamplingMode::Deterministic).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{bad:?}");
        }
    }

    #[test]
    fn example_drift_at_origin() {
        // Worked example at w=0: -B R^{-1} B^T = -1/((1+0)(2+0)) = -0.5.
        let p = example_instance(1.0);
        let cs = CoeffSet::eval(&p, 0.3, 0.0).unwrap();
        let zero = DMatrix::zeros(1, 1);
        let drift = sre_drift(&zero, &zero, &cs).unwrap();
        assert!((drift[(0, 0)] + 0.5).abs() < 1e-12);
        // And at w=1: -1/((1+1)(2+1)) = -1/6.
        let cs1 = CoeffSet::eval(&p, 0.3, 1.0).unwrap();
        let drift1 = sre_drift(&zero, &zero, &cs1).unwrap();
        assert!((drift1[(0, 0)] + 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn markovian_terminal_slice_is_zero() {
        let p = example_instance(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let paths = PathEnsemble::generate(grid, 500, 1).unwrap();
        let sol = solve_riccati_markovian(&p, &paths, &RegressionBasis::with_rational(3)).unwrap();
        for i in (0..500).step_by(53) {
            assert_eq!(sol.sigma_at(20, i).norm(), 0.0);
        }
    }

    #[test]
    fn markovian_matches_ode_on_deterministic_instance() {
        let p = scalar_instance(0.3, 1.0, 0.5, 0.2, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let ode = solve_riccati_deterministic(&p, &grid).unwrap();
        let paths = PathEnsemble::generate(grid, 10_000, 1).unwrap();
        let markov = solve_riccati_markovian(&p, &paths, &RegressionBasis::polynomial(4)).unwrap();
        let mut sup = 0.0f64;
        for k in 0..=200 {
            for i in (0..10_000).step_by(487) {
                sup = sup.max((markov.sigma_at(k, i) - ode.sigma_at(k, 0)).norm());
            }
        }
        assert!(sup < 5e-3, "cross-route deviation {sup}");
    }

    #[test]
    fn fixed_point_accepts_exact_solution_and_rejects_perturbation() {
        let p = scalar_instance(0.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 500).unwrap();
        let sol = solve_riccati_deterministic(&p, &grid).unwrap();
        let res = fixed_point_residual(&p, &sol, SamplingMode::Deterministic).unwrap();
        assert!(res < 1e-6, "residual of exact solution {res}");

        let shifted = match &sol.sigma {
            SigmaSamples::PerStep(v) => SigmaSamples::PerStep(
                v.iter()
                    .map(|m| m + DMatrix::identity(1, 1) * 0.1)
                    .collect(),
            ),
            _ => unreachable!(),
        };
        let bad = RiccatiSolution {
            sigma: shifted,
            lambda: sol.lambda.clone(),
            grid,
        };
        let res_bad = fixed_point_residual(&p, &bad, SamplingMode::Deterministic).unwrap();
        assert!(res_bad >= 0.05, "perturbed residual {res_bad}");
    }

    #[test]
    fn fixed_point_zero_candidate_without_control() {
        let p = scalar_instance(0.4, 0.0, 0.6, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let sol = solve_riccati_deterministic(&p, &grid).unwrap();
        let res = fixed_point_residual(&p, &sol, SamplingMode::Deterministic).unwrap();
        assert!(res < 1e-8, "zero fixed point residual {res}");
    }
}

#[cfg(test)]
mod eps_markovian_tests {
    use super::*;
    use crate::problem::example_instance;

    #[test]
    fn markovian_eps_terminal_and_positivity() {
        let p = example_instance(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let paths = PathEnsemble::generate(grid, 400, 2).unwrap();
        let basis = RegressionBasis::with_rational(3);
        let sampling = SamplingMode::Regression { paths: &paths, basis: &basis };
        let fr = solve_forward_riccati_eps(&p, &grid, 0.5, sampling).unwrap();
        // Terminal slice is exactly eps^{-1} I on every path.
        for i in (0..400).step_by(37) {
            assert_eq!(fr.p.at(10, i)[(0, 0)], 2.0);
        }
        assert!(fr.min_eig > 0.0, "min eig {}", fr.min_eig);
        // The inverse relation holds sample by sample away from the floor.
        let sig = solve_sigma_eps(&p, &grid, 0.5, sampling).unwrap();
        for i in (0..400).step_by(61) {
            for k in 0..10 {
                let prod = fr.p.at(k, i) * sig.sigma_at(k, i);
                assert!((prod[(0, 0)] - 1.0).abs() < 1e-9, "P*Sigma at ({k},{i}) = {}", prod[(0, 0)]);
            }
        }
    }

    #[test]
    fn markovian_eps_study_is_monotone_on_shared_paths() {
        let p = example_instance(1.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let paths = PathEnsemble::generate(grid, 400, 3).unwrap();
        let basis = RegressionBasis::with_rational(3);
        let sampling = SamplingMode::Regression { paths: &paths, basis: &basis };
        let study = eps_limit_sigma(&p, &grid, &[0.5, 0.25, 0.1], sampling).unwrap();
        assert!(study.all_monotone(), "worst violation {}", study.worst_violation);
        // The perturbation is nearly additive for this instance: gaps track
        // the eps gaps.
        assert!((study.sup_diffs[0] - 0.25).abs() < 0.05, "{:?}", study.sup_diffs);
        assert!((study.sup_diffs[1] - 0.15).abs() < 0.05, "{:?}", study.sup_diffs);
    }

    #[test]
    fn markovian_scheme_is_first_order_on_deterministic_instances() {
        let mk = |v: f64| DMatrix::from_element(1, 1, v);
        let p = ProblemInstance::from_matrices(
            0.0,
            1.0,
            &mk(0.3),
            &mk(1.0),
            &mk(0.5),
            &mk(0.2),
            &mk(1.0),
            &mk(1.0),
            &mk(0.0),
            &mk(1.0),
            1.0,
            1.0,
        )
        .unwrap();
        let err_at = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let ode = solve_riccati_deterministic(&p, &grid).unwrap();
            let paths = PathEnsemble::generate(grid, 4000, 1).unwrap();
            let markov = solve_riccati_markovian(&p, &paths, &RegressionBasis::polynomial(2)).unwrap();
            let mut sup = 0.0f64;
            for k in 0..=steps {
                sup = sup.max((markov.sigma_at(k, 0) - ode.sigma_at(k, 0)).norm());
            }
            sup
        };
        let e50 = err_at(50);
        let e100 = err_at(100);
        let ratio = e50 / e100;
        assert!((1.5..=2.6).contains(&ratio), "refinement ratio {ratio} (e50={e50:.2e}, e100={e100:.2e})");
    }
}
