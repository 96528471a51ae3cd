use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use skorokhod::duality::min_sup_norm_certificate;
use skorokhod::embedding::embedding_report;
use skorokhod::paths::{qv_limit, QVPath, SampledPath};
use skorokhod::pipeline::{
    build_problem, canonical_json, load_certificate, monte_carlo, parse_ladder, refinement_study,
    run_pipeline, solve, verify_certificate, ErrorKind, ModelName, PipelineError, Problem, Stage,
    TOOL_VERSION,
};
use skorokhod::strategies::{capital_process, SimpleStrategy, Strategy};
use skorokhod::superrep::CheckMode;
use skorokhod::timechange::ntt;

#[derive(Parser)]
#[command(name = "skh", version, about = "Robust prices and super-replication certificates on a martingale lattice")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the embedding LP and its dual.
    #[command(subcommand)]
    Embed(Embed),
    /// Check certificates pathwise or against Monte Carlo models.
    #[command(subcommand)]
    Verify(Verify),
    /// Quadratic variation and time changes of sampled paths.
    #[command(subcommand)]
    Paths(Paths),
    /// Capital processes of simple strategies.
    #[command(subcommand)]
    Strategy(StrategyCmd),
    /// Convergence studies over lattice refinements.
    #[command(subcommand)]
    Study(Study),
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem file (JSON).
    #[arg(long)]
    problem: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Embed {
    /// Primal optimum and embedding diagnostics.
    Solve(ProblemArgs),
    /// Dual certificate.
    Dual {
        #[command(flatten)]
        args: ProblemArgs,
        /// Replace the solver's static payoffs by ones of least sup norm.
        #[arg(long)]
        min_sup_norm: bool,
    },
    /// Full pipeline: primal, dual, gap, hedge and exhaustive verification.
    Gap(ProblemArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exhaustive,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Optimizer,
    AntiOptimizer,
    Mixture,
    FirstHit,
}

#[derive(Subcommand)]
enum Verify {
    /// Super-replication check of a certificate.
    Cert {
        #[command(flatten)]
        args: ProblemArgs,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long, value_enum, default_value = "exhaustive")]
        mode: Mode,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo estimate under a lattice martingale model.
    Mc {
        #[command(flatten)]
        args: ProblemArgs,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long, value_enum, default_value = "optimizer")]
        model: Model,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum Paths {
    /// Quadratic variation along dyadic Lebesgue partitions.
    Qv {
        /// Path file (CSV, `time,value`).
        #[arg(long)]
        input: PathBuf,
        /// Levels as `n_min:n_max`.
        #[arg(long, default_value = "2:10")]
        levels: String,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path run on its quadratic-variation clock (CSV output).
    Ntt {
        #[arg(long)]
        input: PathBuf,
        /// Partition level used for the quadratic variation.
        #[arg(long, default_value_t = 8)]
        level: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StrategyCmd {
    /// Capital process of a strategy along a path.
    Eval {
        #[arg(long)]
        strategy: PathBuf,
        #[arg(long)]
        path: PathBuf,
        /// Partition level used for the quadratic variation.
        #[arg(long, default_value_t = 8)]
        level: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Solve on each rung of a ladder `h:T,h:T,...`.
    Refine {
        #[command(flatten)]
        args: ProblemArgs,
        #[arg(long)]
        ladder: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{}", e.document());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), PipelineError> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| PipelineError::new(Stage::Validate, ErrorKind::Internal, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path)
        .map_err(|e| PipelineError::validation(Stage::Validate, format!("{}: {e}", path.display())))
}

fn load_path(path: &Path) -> Result<SampledPath, PipelineError> {
    SampledPath::load(path).map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Embed(Embed::Solve(args)) => {
            let problem = Problem::load(&args.problem)?;
            let text = if problem.budget.is_some() {
                let report = run_pipeline(&problem)?;
                canonical_json(&json!({
                    "version": TOOL_VERSION,
                    "config_hash": report.config_hash,
                    "lattice": report.lattice,
                    "primal": report.primal,
                    "budget": report.budget,
                }))
            } else {
                let solved = solve(&problem)?;
                let lp = &solved.problem;
                canonical_json(&json!({
                    "version": TOOL_VERSION,
                    "config_hash": problem.config_hash(),
                    "lattice": {
                        "h": lp.lattice.h(),
                        "depth": lp.lattice.depth(),
                        "stops": lp.lattice.n_stages(),
                        "states": lp.lattice.state_count(),
                    },
                    "primal": {
                        "value": solved.primal.value,
                        "lp_objective": solved.primal.lp_objective,
                        "embedding": embedding_report(&solved.primal.measure, &lp.lattice, &lp.marginals, problem.phi),
                    },
                }))
            };
            emit(&text, args.out.as_deref())
        }
        Command::Embed(Embed::Dual { args, min_sup_norm }) => {
            let problem = Problem::load(&args.problem)?;
            if problem.budget.is_some() {
                let report = run_pipeline(&problem)?;
                return emit(
                    &canonical_json(&json!({
                        "certificate": report.dual.certificate,
                        "value": report.dual.value,
                        "budget": report.budget,
                    })),
                    args.out.as_deref(),
                );
            }
            let solved = solve(&problem)?;
            let lp = &solved.problem;
            let cert = if min_sup_norm {
                let d = solved.certificate.value(&lp.marginals);
                min_sup_norm_certificate(lp, d)
                    .map_err(|e| PipelineError::new(Stage::SolveDual, ErrorKind::Internal, e.to_string()))?
            } else {
                solved.certificate
            };
            emit(&canonical_json(&cert.to_file(&lp.lattice)), args.out.as_deref())
        }
        Command::Embed(Embed::Gap(args)) => {
            let problem = Problem::load(&args.problem)?;
            let report = run_pipeline(&problem)?;
            emit(&canonical_json(&report), args.out.as_deref())
        }
        Command::Verify(Verify::Cert {
            args,
            cert,
            mode,
            n,
            seed,
        }) => {
            let problem = Problem::load(&args.problem)?;
            let lp = build_problem(&problem)?;
            let certificate = load_certificate(&lp, &read(&cert)?)?;
            let mode = match mode {
                Mode::Exhaustive => CheckMode::Exhaustive,
                Mode::Sampled => CheckMode::Sampled { n, seed },
            };
            let report = verify_certificate(&problem, &lp, &certificate, mode);
            emit(&canonical_json(&report), args.out.as_deref())
        }
        Command::Verify(Verify::Mc {
            args,
            cert,
            model,
            n,
            seed,
        }) => {
            let problem = Problem::load(&args.problem)?;
            let lp = build_problem(&problem)?;
            let certificate = load_certificate(&lp, &read(&cert)?)?;
            let model = match model {
                Model::Optimizer => ModelName::Optimizer,
                Model::AntiOptimizer => ModelName::AntiOptimizer,
                Model::Mixture => ModelName::Mixture,
                Model::FirstHit => ModelName::FirstHit,
            };
            let bound = certificate.value(&lp.marginals);
            let doc = monte_carlo(&problem, &lp, bound, model, n, seed)?;
            emit(&canonical_json(&doc), args.out.as_deref())
        }
        Command::Paths(Paths::Qv { input, levels, tol, out }) => {
            let path = load_path(&input)?;
            let (lo, hi) = levels
                .split_once(':')
                .and_then(|(a, b)| Some((a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?)))
                .filter(|(a, b)| a <= b)
                .ok_or_else(|| PipelineError::validation(Stage::Validate, format!("bad levels `{levels}`")))?;
            let limit = qv_limit(&path, lo, hi, tol);
            let qv: Vec<[f64; 2]> = match limit.path() {
                Some(qp) => qp.base().times().iter().zip(qp.qv()).map(|(&t, &q)| [t, q]).collect(),
                None => Vec::new(),
            };
            let text = canonical_json(&json!({
                "converged": limit.is_converged(),
                "qv": qv,
                "profile": limit.profile(),
                "version": TOOL_VERSION,
            }));
            emit(&text, out.as_deref())
        }
        Command::Paths(Paths::Ntt { input, level, out }) => {
            let path = load_path(&input)?;
            let qp = QVPath::from_level(path, level);
            emit(&ntt(&qp).to_csv_string(), out.as_deref())
        }
        Command::Strategy(StrategyCmd::Eval {
            strategy,
            path,
            level,
            out,
        }) => {
            let s = SimpleStrategy::from_json_str(&read(&strategy)?)
                .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
            let qp = QVPath::from_level(load_path(&path)?, level);
            let plan = s
                .plan(&qp)
                .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
            let capital: Vec<[f64; 2]> = qp
                .base()
                .times()
                .iter()
                .zip(plan.capital_on_samples(qp.base()))
                .map(|(&t, k)| [t, k])
                .collect();
            let terminal = capital_process(&s, &qp, qp.base().horizon())
                .map_err(|e| PipelineError::validation(Stage::Validate, e.to_string()))?;
            let text = canonical_json(&json!({
                "capital": capital,
                "terminal": terminal,
                "version": TOOL_VERSION,
            }));
            emit(&text, out.as_deref())
        }
        Command::Study(Study::Refine { args, ladder }) => {
            let problem = Problem::load(&args.problem)?;
            let table = refinement_study(&problem, &parse_ladder(&ladder)?)?;
            emit(&canonical_json(&table), args.out.as_deref())
        }
    }
}
