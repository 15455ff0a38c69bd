//! End-to-end orchestration: route selection, the full solve pipeline
//! (validate, Riccati, auxiliary backward, forward, reconstruct), optimality
//! verification, and the artifact-writing runs behind the CLI and the C API.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bsde::ControlProcess;
use crate::cost::{evaluate_cost, oracle_minimize, quadratic_expansion_check};
use crate::decouple::{
    fbsde_residuals, reconstruct_triple, resolve_adjoint_forward, solve_auxiliary_bsde,
    solve_forward_sde, AuxiliaryBackward, OptimalTriple,
};
use crate::error::{Error, Result, StageContext};
use crate::fields::VecField;
use crate::grid::{child_seed, PathEnsemble, TimeGrid};
use crate::problem::{AssumptionReport, ProblemInstance};
use crate::regression::RegressionBasis;
use crate::report::{config_hash, EpsTableFile, SolveReport, VerificationReport, VerifyReportFile};
use crate::riccati::{
    eps_study, fixed_point_residual, solve_riccati_deterministic, solve_riccati_markovian,
    EpsStudy, RiccatiSolution, SamplingMode,
};

/// Pinned verification tolerances.
pub const STATIONARITY_CONSTRUCTION_TOL: f64 = 1e-6;
pub const STATIONARITY_RESOLVED_TOL: f64 = 5e-2;
pub const ORACLE_REL_TOL: f64 = 0.05;
pub const ORACLE_GAP_TOL: f64 = 1e-4;
pub const FIXED_POINT_DET_TOL: f64 = 1e-6;
pub const FIXED_POINT_MARKOV_TOL: f64 = 5e-2;
pub const FBSDE_ONE_STEP_TOL: f64 = 5e-2;
pub const FBSDE_COUPLING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteChoice {
    Auto,
    Ode,
    Eps,
    Markov,
}

impl RouteChoice {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "auto" => Ok(RouteChoice::Auto),
            "ode" => Ok(RouteChoice::Ode),
            "eps" => Ok(RouteChoice::Eps),
            "markov" => Ok(RouteChoice::Markov),
            other => Err(Error::Validation(format!("unknown route '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    Control,
    State,
}

impl Defect {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "control" => Ok(Defect::Control),
            "state" => Ok(Defect::State),
            other => Err(Error::Validation(format!("unknown defect '{other}'"))),
        }
    }
}

/// Settings shared by the CLI commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem_path: PathBuf,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub degree: usize,
    pub rational: bool,
    pub eps_sequence: Vec<f64>,
    pub route: RouteChoice,
    pub out_dir: PathBuf,
    pub inject_defect: Option<Defect>,
    pub dump_paths: bool,
}

impl RunConfig {
    pub fn new(problem_path: PathBuf, out_dir: PathBuf) -> Self {
        RunConfig {
            problem_path,
            steps: 100,
            paths: 10_000,
            seed: 1,
            degree: 4,
            rational: true,
            eps_sequence: vec![1.0, 0.1, 0.01, 0.001],
            route: RouteChoice::Auto,
            out_dir,
            inject_defect: None,
            dump_paths: false,
        }
    }

    pub fn basis(&self) -> RegressionBasis {
        if self.rational {
            RegressionBasis::with_rational(self.degree)
        } else {
            RegressionBasis::polynomial(self.degree)
        }
    }

    pub fn hash(&self, problem_text: &str) -> String {
        config_hash(&[
            problem_text,
            &format!("steps={}", self.steps),
            &format!("paths={}", self.paths),
            &format!("seed={}", self.seed),
            &format!("degree={}", self.degree),
            &format!("rational={}", self.rational),
            &format!("eps={:?}", self.eps_sequence),
            &format!("route={:?}", self.route),
            &format!("defect={:?}", self.inject_defect),
        ])
    }
}

/// Everything produced by one solve.
pub struct SolveOutput {
    pub route_used: &'static str,
    pub assumptions: AssumptionReport,
    pub sigma: RiccatiSolution,
    pub aux: AuxiliaryBackward,
    pub triple: OptimalTriple,
    pub xi: Vec<DMatrix<f64>>,
    pub cost: crate::cost::CostBreakdown,
}

/// Pick the Riccati route: the matrix ODE when all coefficients are w-free,
/// the regression scheme otherwise.
fn resolve_route(p: &ProblemInstance, route: RouteChoice) -> Result<RouteChoice> {
    match route {
        RouteChoice::Auto => Ok(if p.coefficients_deterministic() {
            RouteChoice::Ode
        } else {
            RouteChoice::Markov
        }),
        RouteChoice::Ode if !p.coefficients_deterministic() => Err(Error::Validation(
            "route 'ode' requires w-free coefficients".into(),
        )),
        other => Ok(other),
    }
}

/// Full pipeline on a given ensemble: validate, solve the Riccati equation by
/// the selected route, solve the auxiliary backward equation and the forward
/// adjoint equation, reconstruct the optimal triple, and price it.
pub fn solve_problem(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    basis: &RegressionBasis,
    route: RouteChoice,
    eps_sequence: &[f64],
) -> Result<SolveOutput> {
    let assumptions = p.validate_assumptions(&p.default_sample_grid());
    if !assumptions.all_ok() {
        return Err(Error::Validation(format!(
            "standing assumptions violated: h1={} h2={} h3={} (min eig N {:.3e}, min eig R {:.3e})",
            assumptions.h1_ok,
            assumptions.h2_ok,
            assumptions.h3_ok,
            assumptions.observed_min_eig_n,
            assumptions.observed_min_eig_r
        )));
    }
    let grid = *paths.grid();
    let route = resolve_route(p, route)?;
    let (sigma, route_used): (RiccatiSolution, &'static str) = match route {
        RouteChoice::Ode => (
            solve_riccati_deterministic(p, &grid).stage("riccati")?,
            "ode",
        ),
        RouteChoice::Markov => (
            solve_riccati_markovian(p, paths, basis).stage("riccati")?,
            "markov",
        ),
        RouteChoice::Eps => {
            let sampling = if p.coefficients_deterministic() {
                SamplingMode::Deterministic
            } else {
                SamplingMode::Regression { paths, basis }
            };
            let study = crate::riccati::eps_limit_sigma(p, &grid, eps_sequence, sampling)
                .stage("riccati")?;
            (study.limit, "eps")
        }
        RouteChoice::Auto => unreachable!(),
    };
    let xi = p
        .xi_values(&paths.step_values(grid.steps()))
        .stage("terminal state")?;
    let aux = solve_auxiliary_bsde(p, &sigma, paths, basis, &xi).stage("auxiliary BSDE")?;
    let forward = solve_forward_sde(p, &sigma, &aux, paths).stage("forward SDE")?;
    let triple = reconstruct_triple(p, &sigma, &aux, &forward, paths).stage("reconstruction")?;
    let cost = evaluate_cost(p, paths, &triple.u, &xi, basis).stage("cost evaluation")?;
    Ok(SolveOutput {
        route_used,
        assumptions,
        sigma,
        aux,
        triple,
        xi,
        cost,
    })
}

/// L2 norm of R u - B^T X over the ensemble.
fn stationarity_norm(
    p: &ProblemInstance,
    u: &ControlProcess,
    x: &VecField,
    paths: &PathEnsemble,
) -> Result<f64> {
    let grid = *paths.grid();
    let dt = grid.dt();
    let m_paths = paths.paths();
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let t_k = grid.time(k);
        let b_step = crate::bsde::StepCoeff::new(&p.B, t_k)?;
        let r_step = crate::bsde::StepCoeff::new(&p.R, t_k)?;
        for i in 0..m_paths {
            let w = paths.value(i, k);
            let b = b_step.at(w)?;
            let r = r_step.at(w)?;
            let u_i = DVector::from_column_slice(u.values.at(i, k));
            let x_i = DVector::from_column_slice(x.at(i, k));
            acc += (r * u_i - b.transpose() * x_i).norm_squared() * dt;
        }
    }
    Ok((acc / m_paths as f64).sqrt())
}

/// Verification settings; the oracle comparison runs on its own coarse
/// configuration because the conjugate-gradient oracle is meant for modest
/// sizes.
#[derive(Debug, Clone)]
pub struct VerifySettings {
    pub oracle_steps: usize,
    pub oracle_paths: usize,
    pub oracle_max_iters: usize,
    pub oracle_tol: f64,
    /// Basis degree for the oracle run; None picks 0 for fully deterministic
    /// problems and the main degree otherwise.
    pub oracle_degree: Option<usize>,
    pub directions: usize,
    pub expansion_eps: f64,
    pub seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            oracle_steps: 20,
            oracle_paths: 200,
            oracle_max_iters: 2000,
            oracle_tol: 1e-9,
            oracle_degree: None,
            directions: 3,
            expansion_eps: 0.1,
            seed: 1,
        }
    }
}

fn gaussian_direction(grid: TimeGrid, m_paths: usize, dim: usize, seed: u64) -> ControlProcess {
    let mut values = VecField::zeros(m_paths, grid.steps(), dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in values.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    let mut dir = ControlProcess { values, grid };
    let norm = dir.l2_norm();
    if norm > 0.0 {
        dir.values.scale(1.0 / norm);
    }
    dir
}

/// Aggregate optimality verification: stationarity along an independently
/// re-solved adjoint, the variational expansion over random directions, the
/// conjugate-gradient oracle comparison, and the value estimate.
pub fn verify_optimality(
    p: &ProblemInstance,
    paths: &PathEnsemble,
    triple: &OptimalTriple,
    xi: &[DMatrix<f64>],
    basis: &RegressionBasis,
    settings: &VerifySettings,
) -> Result<VerificationReport> {
    let grid = *paths.grid();
    // (i) Stationarity: by construction and against the re-solved adjoint.
    let construction = stationarity_norm(p, &triple.u, &triple.x, paths)?;
    let x_resolved = resolve_adjoint_forward(p, triple, paths)?;
    let resolved = stationarity_norm(p, &triple.u, &x_resolved, paths)?;

    // (ii) Variational expansion over random unit directions.
    let mut expansions = Vec::with_capacity(settings.directions);
    let mut max_linear: f64 = 0.0;
    let mut pass_variational = true;
    for j in 0..settings.directions {
        let dir = gaussian_direction(
            grid,
            paths.paths(),
            p.m,
            child_seed(settings.seed, 1000 + j as u64),
        );
        let exp = quadratic_expansion_check(
            p,
            paths,
            &triple.u,
            &dir,
            &[-settings.expansion_eps, settings.expansion_eps],
            xi,
            basis,
        )?;
        max_linear = max_linear.max(exp.linear.abs());
        if exp.linear.abs() > 3.0 * exp.linear_stderr + 1e-12 {
            pass_variational = false;
        }
        if exp.quadratic < p.delta * exp.direction_norm_sq * (1.0 - 1e-9) {
            pass_variational = false;
        }
        expansions.push(exp);
    }

    // (iii) Oracle comparison on the coarse configuration with common random
    // numbers: the Riccati route is re-run at the oracle scale and compared
    // against the direct CG minimizer on the same paths.
    let oracle_grid = TimeGrid::new(grid.t0(), grid.t_end(), settings.oracle_steps)?;
    let oracle_paths = PathEnsemble::generate(oracle_grid, settings.oracle_paths, settings.seed)?;
    let oracle_degree = settings.oracle_degree.unwrap_or(
        if p.coefficients_deterministic() && p.xi_deterministic() {
            0
        } else {
            basis.degree
        },
    );
    let oracle_basis = if basis.rational && oracle_degree > 0 {
        RegressionBasis::with_rational(oracle_degree)
    } else {
        RegressionBasis::polynomial(oracle_degree)
    };
    let small = solve_problem(
        p,
        &oracle_paths,
        &oracle_basis,
        RouteChoice::Auto,
        &[1.0, 0.1],
    )?;
    let oracle = oracle_minimize(
        p,
        &oracle_paths,
        &oracle_basis,
        &small.xi,
        settings.oracle_max_iters,
        settings.oracle_tol,
    )?;
    let mut diff = small.triple.u.values.clone();
    diff.axpby(1.0, -1.0, &oracle.control.values);
    let dt_oracle = oracle_grid.dt();
    let distance = (diff.dot(&diff) * dt_oracle / settings.oracle_paths as f64).sqrt();
    let oracle_norm = oracle.control.l2_norm();
    let cost_gap = small.cost.total - oracle.cost.total;
    let pass_oracle =
        distance <= ORACLE_REL_TOL * (oracle_norm + 1e-6) && cost_gap <= ORACLE_GAP_TOL;

    // (iv) Value estimate on the main configuration.
    let value = evaluate_cost(p, paths, &triple.u, xi, basis)?;

    Ok(VerificationReport {
        stationarity_residual: resolved,
        stationarity_construction: construction,
        quadratic_expansion_linear_coeff: max_linear,
        quadratic_expansions: expansions,
        oracle_control_distance: distance,
        oracle_control_norm: oracle_norm,
        cost_gap,
        value: value.total,
        value_stderr: value.stderr,
        pass_stationarity: construction <= STATIONARITY_CONSTRUCTION_TOL
            && resolved <= STATIONARITY_RESOLVED_TOL,
        pass_variational,
        pass_oracle,
    })
}

type ArtifactWriter = std::io::BufWriter<std::fs::File>;

fn write_artifact<F>(dir: &Path, name: &str, hash: &str, seed: u64, body: F) -> Result<()>
where
    F: FnOnce(&mut ArtifactWriter) -> Result<()>,
{
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
    writeln!(file, "# config_hash={hash} seed={seed}")?;
    body(&mut file)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn dump_control_csv<W: Write>(out: &mut W, triple: &OptimalTriple) -> Result<()> {
    let m_dim = triple.u.values.dim();
    let mut header = String::from("path,k,t");
    for d in 0..m_dim {
        header.push_str(&format!(",u_{}", d + 1));
    }
    writeln!(out, "{header}")?;
    for i in 0..triple.u.values.paths() {
        for k in 0..triple.u.values.steps() {
            let mut line = format!("{},{},{}", i, k, triple.grid.time(k));
            for &v in triple.u.values.at(i, k) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn dump_triple_csv<W: Write>(out: &mut W, triple: &OptimalTriple) -> Result<()> {
    let n = triple.y.dim();
    let m_dim = triple.u.values.dim();
    let mut header = String::from("path,k,t");
    for d in 0..n {
        header.push_str(&format!(",Y_{}", d + 1));
    }
    for d in 0..n {
        header.push_str(&format!(",Z_{}", d + 1));
    }
    for d in 0..n {
        header.push_str(&format!(",X_{}", d + 1));
    }
    for d in 0..m_dim {
        header.push_str(&format!(",u_{}", d + 1));
    }
    writeln!(out, "{header}")?;
    let k_steps = triple.grid.steps();
    for i in 0..triple.y.paths() {
        for k in 0..=k_steps {
            let mut line = format!("{},{},{}", i, k, triple.grid.time(k));
            for &v in triple.y.at(i, k) {
                line.push_str(&format!(",{v}"));
            }
            if k < k_steps {
                for &v in triple.z.at(i, k) {
                    line.push_str(&format!(",{v}"));
                }
            } else {
                for _ in 0..n {
                    line.push(',');
                }
            }
            for &v in triple.x.at(i, k) {
                line.push_str(&format!(",{v}"));
            }
            if k < k_steps {
                for &v in triple.u.values.at(i, k) {
                    line.push_str(&format!(",{v}"));
                }
            } else {
                for _ in 0..m_dim {
                    line.push(',');
                }
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Perturb a solved triple in place for defect-injection testing.
fn inject_defect(triple: &mut OptimalTriple, defect: Defect, seed: u64) {
    match defect {
        Defect::Control => {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 0xDEFEC7));
            for v in triple.u.values.as_mut_slice() {
                let noise: f64 = rng.sample(StandardNormal);
                *v += 0.5 * noise;
            }
        }
        Defect::State => {
            for v in triple.y.as_mut_slice() {
                *v += 1.0;
            }
        }
    }
}

fn load_problem(config: &RunConfig) -> Result<(ProblemInstance, String)> {
    let text = std::fs::read_to_string(&config.problem_path)?;
    let p = ProblemInstance::from_json_str(&text)?;
    Ok((p, text))
}

fn make_ensemble(p: &ProblemInstance, config: &RunConfig) -> Result<PathEnsemble> {
    let grid = TimeGrid::new(p.t0, p.t_end, config.steps)?;
    PathEnsemble::generate(grid, config.paths, config.seed)
}

/// `solve` command: run the pipeline and write Sigma.csv, control.csv,
/// triple.csv, and report.json.
pub fn run_solve(config: &RunConfig) -> Result<SolveReport> {
    let (p, text) = load_problem(config)?;
    let paths = make_ensemble(&p, config)?;
    let basis = config.basis();
    let out = solve_problem(&p, &paths, &basis, config.route, &config.eps_sequence)?;
    let fbsde = fbsde_residuals(&p, &out.triple, &paths, &out.xi)?;
    let hash = config.hash(&text);
    std::fs::create_dir_all(&config.out_dir)?;
    write_artifact(&config.out_dir, "Sigma.csv", &hash, config.seed, |w| {
        out.sigma.dump_csv(w)
    })?;
    write_artifact(&config.out_dir, "control.csv", &hash, config.seed, |w| {
        dump_control_csv(w, &out.triple)
    })?;
    write_artifact(&config.out_dir, "triple.csv", &hash, config.seed, |w| {
        dump_triple_csv(w, &out.triple)
    })?;
    if config.dump_paths {
        write_artifact(&config.out_dir, "paths.csv", &hash, config.seed, |w| {
            paths.dump_csv(w)
        })?;
    }
    let report = SolveReport {
        config_hash: hash,
        seed: config.seed,
        route: out.route_used.to_string(),
        steps: config.steps,
        paths: config.paths,
        degree: config.degree,
        assumptions: out.assumptions,
        control_l2_norm: out.triple.u.l2_norm(),
        cost: out.cost,
        fbsde,
    };
    write_json(&config.out_dir, "report.json", &report)?;
    Ok(report)
}

/// `verify` command: solve in place, optionally inject a defect, and run the
/// full verification battery. The report is written even when criteria fail.
pub fn run_verify(config: &RunConfig, settings: &VerifySettings) -> Result<VerifyReportFile> {
    let (p, text) = load_problem(config)?;
    let paths = make_ensemble(&p, config)?;
    let basis = config.basis();
    let mut out = solve_problem(&p, &paths, &basis, config.route, &config.eps_sequence)?;
    if let Some(defect) = config.inject_defect {
        inject_defect(&mut out.triple, defect, config.seed);
    }
    let verification = verify_optimality(&p, &paths, &out.triple, &out.xi, &basis, settings)?;
    let fbsde = fbsde_residuals(&p, &out.triple, &paths, &out.xi)?;
    let pass_fbsde = fbsde.within(FBSDE_ONE_STEP_TOL, FBSDE_COUPLING_TOL);
    let sampling = if out.sigma.is_deterministic() {
        SamplingMode::Deterministic
    } else {
        SamplingMode::Regression {
            paths: &paths,
            basis: &basis,
        }
    };
    let fixed_point = fixed_point_residual(&p, &out.sigma, sampling)?;
    let fixed_point_tolerance = if out.sigma.is_deterministic() {
        FIXED_POINT_DET_TOL
    } else {
        FIXED_POINT_MARKOV_TOL
    };
    let pass_fixed_point = fixed_point <= fixed_point_tolerance;
    let overall = verification.all_pass() && pass_fbsde && pass_fixed_point;
    let file = VerifyReportFile {
        config_hash: config.hash(&text),
        seed: config.seed,
        route: out.route_used.to_string(),
        verification,
        fbsde,
        pass_fbsde,
        fixed_point_residual: fixed_point,
        fixed_point_tolerance,
        pass_fixed_point,
        overall_pass: overall,
    };
    std::fs::create_dir_all(&config.out_dir)?;
    write_json(&config.out_dir, "verify_report.json", &file)?;
    Ok(file)
}

/// `eps-study` command: convergence table of the eps limit.
pub fn run_eps_study(config: &RunConfig) -> Result<(EpsTableFile, EpsStudy)> {
    let (p, text) = load_problem(config)?;
    let grid = TimeGrid::new(p.t0, p.t_end, config.steps)?;
    let basis = config.basis();
    let study = if p.coefficients_deterministic() {
        eps_study(&p, &grid, &config.eps_sequence, SamplingMode::Deterministic)?
    } else {
        let paths = PathEnsemble::generate(grid, config.paths, config.seed)?;
        eps_study(
            &p,
            &grid,
            &config.eps_sequence,
            SamplingMode::Regression {
                paths: &paths,
                basis: &basis,
            },
        )?
    };
    let file = EpsTableFile {
        config_hash: config.hash(&text),
        seed: config.seed,
        eps: study.eps.clone(),
        sup_diffs: study.sup_diffs.clone(),
        monotone_ok: study.monotone_ok.clone(),
        all_monotone: study.all_monotone(),
        worst_violation: study.worst_violation,
    };
    std::fs::create_dir_all(&config.out_dir)?;
    write_json(&config.out_dir, "eps_table.json", &file)?;
    Ok((file, study))
}

/// `validate` command: audit the standing assumptions.
pub fn run_validate(config: &RunConfig) -> Result<AssumptionReport> {
    let (p, _) = load_problem(config)?;
    let report = p.validate_assumptions(&p.default_sample_grid());
    std::fs::create_dir_all(&config.out_dir)?;
    write_json(&config.out_dir, "assumptions.json", &report)?;
    Ok(report)
}
