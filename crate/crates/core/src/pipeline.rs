//! Problem files, the end-to-end solve/verify pipeline, refinement studies
//! and canonical JSON output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::duality::{
    certificate_from_lp, duality_gap, solve_dual_budget, verify_budget_feasibility,
    verify_dual_feasibility, CertificateFile, DualCertificate, DualFeasibility, GapReport,
};
use crate::embedding::{
    default_depth, embedding_report, solve_primal, BudgetProblem, EmbeddingError, EmbeddingProblem,
    EmbeddingReport, InfeasibilityWitness, LatticeError, PayoffSpec, PrimalSolution, DEFAULT_STATE_CAP,
};
use crate::measures::{check_convex_order, project_to_grid, validate_measure, DiscreteMeasure, MeasureFile, PhiSpec};
use crate::superrep::{
    certificate_to_strategy, first_hit_embeds, monte_carlo_model_check, verify_pathwise_superhedge, CheckMode,
    McReport, ModelSpec, SuperhedgeReport,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the lattice state cap.
pub const STATE_BUDGET_ENV: &str = "SKH_STATE_BUDGET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    ProjectToGrid,
    ConvexOrder,
    SolvePrimal,
    SolveDual,
    Gap,
    CertificateToStrategy,
    Verify,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Infeasible,
    BudgetExceeded,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::Infeasible => 3,
            ErrorKind::BudgetExceeded => 4,
            ErrorKind::Internal => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<InfeasibilityWitness>,
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
            witness: None,
        }
    }

    pub fn validation(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Validation, message)
    }

    pub fn from_embedding(stage: Stage, e: EmbeddingError) -> Self {
        let message = e.to_string();
        match e {
            EmbeddingError::Infeasible(w) => Self {
                stage,
                kind: ErrorKind::Infeasible,
                message,
                witness: Some(w),
            },
            EmbeddingError::Lattice(LatticeError::StateBudgetExceeded { .. }) => {
                Self::new(stage, ErrorKind::BudgetExceeded, message)
            }
            EmbeddingError::Solver(_) => Self::new(stage, ErrorKind::Internal, message),
            _ => Self::new(stage, ErrorKind::Validation, message),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// `{"error": {...}, "version": ...}` as canonical JSON.
    pub fn document(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            error: &'a PipelineError,
            version: &'static str,
        }
        canonical_json(&Doc {
            error: self,
            version: TOOL_VERSION,
        })
    }
}

/// Where a marginal comes from in a problem file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MarginalSource {
    File(String),
    Inline(MeasureFile),
    Atoms(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    h: f64,
    #[serde(rename = "T", alias = "depth", default)]
    depth: Option<usize>,
    marginals: BTreeMap<String, MarginalSource>,
    payoff: PayoffSpec,
    #[serde(default)]
    phi: Option<PhiSpec>,
    #[serde(default)]
    budget: Option<f64>,
}

/// A problem with every marginal loaded and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub h: f64,
    pub depth: usize,
    pub measures: BTreeMap<usize, DiscreteMeasure>,
    pub payoff: PayoffSpec,
    pub phi: PhiSpec,
    pub budget: Option<f64>,
    pub state_cap: usize,
}

/// Canonical description of a problem, hashed into every report.
#[derive(Debug, Clone, Serialize)]
struct ProblemSummary<'a> {
    h: f64,
    depth: usize,
    marginals: BTreeMap<String, MeasureFile>,
    payoff: &'a PayoffSpec,
    phi: PhiSpec,
    budget: Option<f64>,
}

impl Problem {
    pub fn new(h: f64, depth: Option<usize>, measures: BTreeMap<usize, DiscreteMeasure>, payoff: PayoffSpec) -> Result<Self, PipelineError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(PipelineError::validation(Stage::Validate, format!("step h = {h} must be positive")));
        }
        let terminal = measures
            .values()
            .next_back()
            .ok_or_else(|| PipelineError::validation(Stage::Validate, "no marginals given"))?;
        if measures.keys().next() == Some(&0) {
            return Err(PipelineError::validation(Stage::Validate, "stop indices start at 1"));
        }
        let mut checked = BTreeMap::new();
        for (&i, mu) in &measures {
            let raw: Vec<(f64, f64)> = mu.atoms().iter().map(|a| (a.value, a.mass)).collect();
            let v = validate_measure(&raw, true)
                .map_err(|e| PipelineError::validation(Stage::Validate, format!("marginal {i}: {e}")))?;
            checked.insert(i, v.measure);
        }
        let depth = depth.unwrap_or_else(|| default_depth(terminal, h));
        Ok(Self {
            h,
            depth,
            measures: checked,
            payoff,
            phi: PhiSpec::even_power(1),
            budget: None,
            state_cap: state_cap_from_env()?,
        })
    }

    /// Parse a problem file; relative marginal paths resolve against `base`.
    pub fn from_json_str(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let file: ProblemFile = serde_json::from_str(text)
            .map_err(|e| PipelineError::validation(Stage::Validate, format!("problem file: {e}")))?;
        let mut measures = BTreeMap::new();
        for (key, source) in &file.marginals {
            let i: usize = key
                .parse()
                .map_err(|_| PipelineError::validation(Stage::Validate, format!("bad stop index `{key}`")))?;
            let measure = match source {
                MarginalSource::File(p) => {
                    let path = resolve(base, p);
                    DiscreteMeasure::load(&path)
                }
                MarginalSource::Inline(f) => DiscreteMeasure::new(f.atoms.iter().map(|[v, m]| (*v, *m))),
                MarginalSource::Atoms(a) => DiscreteMeasure::new(a.iter().map(|[v, m]| (*v, *m))),
            }
            .map_err(|e| PipelineError::validation(Stage::Validate, format!("marginal {i}: {e}")))?;
            measures.insert(i, measure);
        }
        let mut problem = Self::new(file.h, file.depth, measures, file.payoff)?;
        if let Some(phi) = file.phi {
            if phi.i == 0 {
                return Err(PipelineError::validation(Stage::Validate, "growth index must be at least 1"));
            }
            problem.phi = phi;
        }
        if let Some(b) = file.budget {
            if !b.is_finite() {
                return Err(PipelineError::validation(Stage::Validate, "budget must be finite"));
            }
            if problem.measures.keys().ne([1usize].iter()) {
                return Err(PipelineError::validation(
                    Stage::Validate,
                    "budget problems constrain exactly the first stop",
                ));
            }
            problem.budget = Some(b);
        }
        Ok(problem)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::validation(Stage::Validate, format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, &base)
    }

    /// Same problem on another lattice.
    pub fn with_lattice(&self, h: f64, depth: usize) -> Self {
        Self {
            h,
            depth,
            ..self.clone()
        }
    }

    fn summary(&self) -> ProblemSummary<'_> {
        ProblemSummary {
            h: self.h,
            depth: self.depth,
            marginals: self
                .measures
                .iter()
                .map(|(i, m)| (i.to_string(), m.to_file()))
                .collect(),
            payoff: &self.payoff,
            phi: self.phi,
            budget: self.budget,
        }
    }

    /// SHA-256 of the canonical problem description.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(canonical_json(&self.summary()).as_bytes());
        hex::encode(digest)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn state_cap_from_env() -> Result<usize, PipelineError> {
    match std::env::var(STATE_BUDGET_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            PipelineError::validation(Stage::Validate, format!("{STATE_BUDGET_ENV} = `{v}` is not a count"))
        }),
        Err(_) => Ok(DEFAULT_STATE_CAP),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub stage: usize,
    pub moved: bool,
    pub atoms: usize,
}

/// Grid projection and convex-order screening of the marginals.
pub fn prepare_marginals(
    problem: &Problem,
) -> Result<(BTreeMap<usize, DiscreteMeasure>, Vec<Projection>), PipelineError> {
    let mut projected = BTreeMap::new();
    let mut log = Vec::new();
    for (&i, mu) in &problem.measures {
        let p = project_to_grid(mu, problem.h)
            .map_err(|e| PipelineError::validation(Stage::ProjectToGrid, format!("marginal {i}: {e}")))?;
        log.push(Projection {
            stage: i,
            moved: &p != mu,
            atoms: p.atoms().len(),
        });
        projected.insert(i, p);
    }
    let ordered: Vec<(&usize, &DiscreteMeasure)> = projected.iter().collect();
    for w in ordered.windows(2) {
        let (&from, mu) = w[0];
        let (&to, nu) = w[1];
        let order = check_convex_order(mu, nu)
            .map_err(|e| PipelineError::validation(Stage::ConvexOrder, e.to_string()))?;
        if let Some(strike) = order.witness {
            return Err(PipelineError {
                stage: Stage::ConvexOrder,
                kind: ErrorKind::Infeasible,
                message: format!("marginals {from} and {to} are not in convex order"),
                witness: Some(InfeasibilityWitness::ConvexOrder {
                    from,
                    to,
                    strike,
                    excess: order.excess,
                }),
            });
        }
    }
    Ok((projected, log))
}

/// Build the lattice problem (its errors belong to the primal stage).
pub fn build_problem(problem: &Problem) -> Result<EmbeddingProblem, PipelineError> {
    let (measures, _) = prepare_marginals(problem)?;
    EmbeddingProblem::new(problem.h, problem.depth, &measures, &problem.payoff, problem.state_cap)
        .map_err(|e| PipelineError::from_embedding(Stage::SolvePrimal, e))
}

pub fn build_budget_problem(problem: &Problem) -> Result<BudgetProblem, PipelineError> {
    let (measures, _) = prepare_marginals(problem)?;
    let budget = problem
        .budget
        .ok_or_else(|| PipelineError::validation(Stage::Validate, "problem has no budget"))?;
    BudgetProblem::new(
        problem.h,
        problem.depth,
        &measures[&1],
        budget,
        problem.phi,
        &problem.payoff,
        problem.state_cap,
    )
    .map_err(|e| PipelineError::from_embedding(Stage::SolvePrimal, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeSummary {
    pub h: f64,
    pub depth: usize,
    pub stops: usize,
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSummary {
    pub value: f64,
    pub lp_objective: f64,
    pub embedding: EmbeddingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSummary {
    pub value: f64,
    pub p: f64,
    pub alpha: f64,
    pub feasibility: DualFeasibility,
    pub certificate: CertificateFile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeSummary {
    pub replication_residual: f64,
    pub verification: SuperhedgeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetSummary {
    pub budget: f64,
    pub budget_slack: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub version: &'static str,
    pub config_hash: String,
    pub lattice: LatticeSummary,
    pub projection: Vec<Projection>,
    pub primal: PrimalSummary,
    pub dual: DualSummary,
    pub gap: GapReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hedge: Option<HedgeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSummary>,
}

/// Solved problem kept in memory for later stages.
pub struct Solved {
    pub problem: EmbeddingProblem,
    pub primal: PrimalSolution,
    pub certificate: DualCertificate,
}

pub fn solve(problem: &Problem) -> Result<Solved, PipelineError> {
    let lp = build_problem(problem)?;
    let primal = solve_primal(&lp).map_err(|e| PipelineError::from_embedding(Stage::SolvePrimal, e))?;
    let certificate = certificate_from_lp(&lp, &primal.artifacts);
    Ok(Solved {
        problem: lp,
        primal,
        certificate,
    })
}

/// validate → project → convex order → primal → dual → gap → hedge → verify.
pub fn run_pipeline(problem: &Problem) -> Result<PipelineReport, PipelineError> {
    if problem.budget.is_some() {
        return run_budget_pipeline(problem);
    }
    let (_, projection) = prepare_marginals(problem)?;
    let Solved {
        problem: lp,
        primal,
        certificate,
    } = solve(problem)?;
    let lattice = &lp.lattice;
    let feasibility = verify_dual_feasibility(&certificate, lattice, &lp.payoff);
    let d = certificate.value(&lp.marginals);
    let gap = duality_gap(primal.value, d);
    let hedge = certificate_to_strategy(&certificate, lattice);
    let residual = hedge.replication_residual(&certificate, lattice);
    let verification = verify_pathwise_superhedge(&certificate, &hedge, lattice, &lp.payoff, CheckMode::Exhaustive);
    Ok(PipelineReport {
        version: TOOL_VERSION,
        config_hash: problem.config_hash(),
        lattice: lattice_summary(lattice),
        projection,
        primal: PrimalSummary {
            value: primal.value,
            lp_objective: primal.lp_objective,
            embedding: embedding_report(&primal.measure, lattice, &lp.marginals, problem.phi),
        },
        dual: DualSummary {
            value: d,
            p: certificate.p,
            alpha: certificate.alpha,
            feasibility,
            certificate: certificate.to_file(lattice),
        },
        gap,
        hedge: Some(HedgeSummary {
            replication_residual: residual,
            verification,
        }),
        budget: None,
    })
}

fn run_budget_pipeline(problem: &Problem) -> Result<PipelineReport, PipelineError> {
    let (measures, projection) = prepare_marginals(problem)?;
    let bp = build_budget_problem(problem)?;
    let dual = solve_dual_budget(&bp).map_err(|e| match e {
        crate::duality::DualityError::Embedding(e) => PipelineError::from_embedding(Stage::SolvePrimal, e),
        other => PipelineError::new(Stage::SolveDual, ErrorKind::Internal, other.to_string()),
    })?;
    let cert = &dual.certificate;
    let feasibility = verify_budget_feasibility(cert, &bp);
    let gap = duality_gap(dual.primal_value, cert.value());
    let primal = solve_budget_summary(&bp, &measures[&1])?;
    Ok(PipelineReport {
        version: TOOL_VERSION,
        config_hash: problem.config_hash(),
        lattice: lattice_summary(&bp.lattice),
        projection,
        primal,
        dual: DualSummary {
            value: cert.value(),
            p: cert.base.p,
            alpha: cert.alpha2,
            feasibility,
            certificate: cert.base.to_file(&bp.lattice),
        },
        gap,
        hedge: None,
        budget: Some(BudgetSummary {
            budget: cert.budget,
            budget_slack: dual.budget_slack,
            alpha1: cert.alpha1,
            alpha2: cert.alpha2,
        }),
    })
}

fn solve_budget_summary(bp: &BudgetProblem, first: &DiscreteMeasure) -> Result<PrimalSummary, PipelineError> {
    let primal = crate::embedding::solve_primal_budget(bp)
        .map_err(|e| PipelineError::from_embedding(Stage::SolvePrimal, e))?;
    let mut one = BTreeMap::new();
    one.insert(1, first.clone());
    let marginals = crate::embedding::MarginalSet::new(&one, bp.lattice.h())
        .map_err(|e| PipelineError::from_embedding(Stage::SolvePrimal, e))?;
    Ok(PrimalSummary {
        value: primal.value,
        lp_objective: primal.lp_objective,
        embedding: embedding_report(&primal.measure, &bp.lattice, &marginals, bp.phi),
    })
}

fn lattice_summary(lattice: &crate::embedding::LatticeModel) -> LatticeSummary {
    LatticeSummary {
        h: lattice.h(),
        depth: lattice.depth(),
        stops: lattice.n_stages(),
        states: lattice.state_count(),
    }
}

/// Load a certificate file against the problem's lattice.
pub fn load_certificate(lp: &EmbeddingProblem, text: &str) -> Result<DualCertificate, PipelineError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(CertificateFile),
        Wrapped { certificate: CertificateFile },
        Report { dual: Wrapped },
    }
    #[derive(Deserialize)]
    struct Wrapped {
        certificate: CertificateFile,
    }
    let doc: Doc = serde_json::from_str(text)
        .map_err(|e| PipelineError::validation(Stage::Validate, format!("certificate: {e}")))?;
    let file = match doc {
        Doc::Bare(f) => f,
        Doc::Wrapped { certificate } => certificate,
        Doc::Report { dual } => dual.certificate,
    };
    DualCertificate::from_file(&file, &lp.lattice)
        .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub version: &'static str,
    pub config_hash: String,
    pub value: f64,
    pub feasibility: DualFeasibility,
    pub replication_residual: f64,
    pub min_slack: f64,
    pub violations: Vec<crate::superrep::Violation>,
    pub histogram: crate::superrep::SlackHistogram,
    pub checked: usize,
}

pub fn verify_certificate(
    problem: &Problem,
    lp: &EmbeddingProblem,
    cert: &DualCertificate,
    mode: CheckMode,
) -> VerifyReport {
    let hedge = certificate_to_strategy(cert, &lp.lattice);
    let r = verify_pathwise_superhedge(cert, &hedge, &lp.lattice, &lp.payoff, mode);
    VerifyReport {
        version: TOOL_VERSION,
        config_hash: problem.config_hash(),
        value: cert.value(&lp.marginals),
        feasibility: verify_dual_feasibility(cert, &lp.lattice, &lp.payoff),
        replication_residual: hedge.replication_residual(cert, &lp.lattice),
        min_slack: r.min_slack,
        violations: r.violations,
        histogram: r.histogram,
        checked: r.checked,
    }
}

/// Named martingale models for Monte Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelName {
    Optimizer,
    AntiOptimizer,
    Mixture,
    FirstHit,
}

impl std::str::FromStr for ModelName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "optimizer" => Ok(Self::Optimizer),
            "anti_optimizer" => Ok(Self::AntiOptimizer),
            "mixture" => Ok(Self::Mixture),
            "first_hit" => Ok(Self::FirstHit),
            other => Err(format!(
                "unknown model `{other}` (expected optimizer, anti_optimizer, mixture or first_hit)"
            )),
        }
    }
}

/// Build a model on the problem's lattice: the optimizer, the minimizer of
/// the payoff, their even mixture, or the first exit from the two atoms.
pub fn model_for(name: ModelName, lp: &EmbeddingProblem) -> Result<ModelSpec, PipelineError> {
    let solve = |p: &EmbeddingProblem| {
        solve_primal(p)
            .map(|s| s.measure)
            .map_err(|e| PipelineError::from_embedding(Stage::MonteCarlo, e))
    };
    Ok(match name {
        ModelName::Optimizer => ModelSpec::Stopping(solve(lp)?),
        ModelName::AntiOptimizer => ModelSpec::Stopping(solve(&lp.negated())?),
        ModelName::Mixture => ModelSpec::Stopping(solve(lp)?.mix(&solve(&lp.negated())?, 0.5)),
        ModelName::FirstHit => {
            let atoms = lp
                .marginals
                .get(1)
                .filter(|_| lp.marginals.n() == 1)
                .map(|mu| mu.iter().map(|(k, _)| k).collect::<Vec<_>>())
                .unwrap_or_default();
            if atoms.len() != 2 || !first_hit_embeds(&lp.lattice, &lp.marginals, atoms[0], atoms[1]) {
                return Err(PipelineError::validation(
                    Stage::MonteCarlo,
                    "first-hit model needs one two-atom marginal absorbed within the lattice depth",
                ));
            }
            ModelSpec::FirstHit {
                lower: atoms[0],
                upper: atoms[1],
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDocument {
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub mc: McReport,
}

pub fn monte_carlo(
    problem: &Problem,
    lp: &EmbeddingProblem,
    bound: f64,
    model: ModelName,
    n: usize,
    seed: u64,
) -> Result<McDocument, PipelineError> {
    let spec = model_for(model, lp)?;
    let mc = monte_carlo_model_check(bound, &spec, &lp.lattice, &lp.marginals, &lp.payoff, n, seed).map_err(|e| {
        let kind = match e {
            crate::superrep::SuperrepError::ModelMarginalMismatch { .. } => ErrorKind::Infeasible,
            crate::superrep::SuperrepError::InvalidModel(_) => ErrorKind::Validation,
        };
        PipelineError::new(Stage::MonteCarlo, kind, e.to_string())
    })?;
    Ok(McDocument {
        version: TOOL_VERSION,
        config_hash: problem.config_hash(),
        seed,
        mc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RungStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub h: f64,
    pub depth: usize,
    pub status: RungStatus,
    pub primal: Option<f64>,
    pub dual: Option<f64>,
    pub gap: Option<f64>,
    pub gap_pass: Option<bool>,
    pub states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementTable {
    pub version: &'static str,
    pub config_hash: String,
    pub rungs: Vec<Rung>,
    /// At every fixed step, the primal value never decreases with depth.
    pub primal_nondecreasing_in_depth: bool,
    pub all_gaps_pass: bool,
}

/// Parse a ladder like `1:4,0.5:16`.
pub fn parse_ladder(text: &str) -> Result<Vec<(f64, usize)>, PipelineError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|rung| {
            let (h, t) = rung
                .split_once(':')
                .ok_or_else(|| PipelineError::validation(Stage::Validate, format!("rung `{rung}` is not h:T")))?;
            let h: f64 = h
                .trim()
                .parse()
                .map_err(|_| PipelineError::validation(Stage::Validate, format!("bad step in `{rung}`")))?;
            let t: usize = t
                .trim()
                .parse()
                .map_err(|_| PipelineError::validation(Stage::Validate, format!("bad depth in `{rung}`")))?;
            Ok((h, t))
        })
        .collect()
}

/// Solve the problem on each rung of a refining ladder of `(h, T)`.
pub fn refinement_study(problem: &Problem, ladder: &[(f64, usize)]) -> Result<RefinementTable, PipelineError> {
    if ladder.is_empty() {
        return Err(PipelineError::validation(Stage::Validate, "empty ladder"));
    }
    for w in ladder.windows(2) {
        let ((h0, t0), (h1, t1)) = (w[0], w[1]);
        if h1 > h0 || (h1 == h0 && t1 < t0) {
            return Err(PipelineError::validation(
                Stage::Validate,
                format!("ladder coarsens from ({h0}, {t0}) to ({h1}, {t1})"),
            ));
        }
    }
    let mut rungs = Vec::with_capacity(ladder.len());
    for &(h, depth) in ladder {
        let p = problem.with_lattice(h, depth);
        let rung = match solve(&p) {
            Ok(s) => {
                let d = s.certificate.value(&s.problem.marginals);
                let g = duality_gap(s.primal.value, d);
                Rung {
                    h,
                    depth,
                    status: RungStatus::Ok,
                    primal: Some(s.primal.value),
                    dual: Some(d),
                    gap: Some(g.gap),
                    gap_pass: Some(g.pass),
                    states: Some(s.problem.lattice.state_count()),
                    message: None,
                }
            }
            Err(e) => Rung {
                h,
                depth,
                status: if e.kind == ErrorKind::BudgetExceeded {
                    RungStatus::Skipped
                } else {
                    RungStatus::Failed
                },
                primal: None,
                dual: None,
                gap: None,
                gap_pass: None,
                states: None,
                message: Some(e.to_string()),
            },
        };
        rungs.push(rung);
    }
    let mut monotone = true;
    let solved: Vec<&Rung> = rungs.iter().filter(|r| r.status == RungStatus::Ok).collect();
    for (i, a) in solved.iter().enumerate() {
        for b in &solved[i + 1..] {
            if a.h == b.h && b.depth >= a.depth && b.primal.unwrap() < a.primal.unwrap() - 1e-9 {
                monotone = false;
            }
        }
    }
    Ok(RefinementTable {
        version: TOOL_VERSION,
        config_hash: problem.config_hash(),
        all_gaps_pass: solved.iter().all(|r| r.gap_pass == Some(true)),
        primal_nondecreasing_in_depth: monotone,
        rungs,
    })
}

/// JSON with sorted object keys and every float written with 17
/// significant digits.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out.push('\n');
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                let _ = write!(out, "{:.16e}", n.as_f64().unwrap_or(f64::NAN));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}
