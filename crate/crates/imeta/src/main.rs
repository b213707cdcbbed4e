//! Command-line entry point: validates a JSON experiment config, then runs
//! meta-training, meta-gradient comparison sweeps, oracle verification, or
//! meta-test evaluation, writing metrics and results under the output
//! directory. Validation failures exit 2, runtime failures exit 1, both with
//! a machine-readable error JSON on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use imeta::config::{ExperimentConfig, ExperimentKind, FieldProvenance, RawConfig};
use imeta::error::Error;
use imeta::model::Model;
use imeta::oracle;
use imeta::solvers;
use imeta::tasks::{sample_tasks, DistKind};
use imeta::telemetry::{self, CompareRow};
use imeta::trainer;

#[derive(Parser)]
#[command(name = "imeta", about = "Bi-level meta-gradient experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the outer meta-training loop and checkpoint the result.
    Train(RunArgs),
    /// Sweep every meta-gradient engine over budget grids against the oracle.
    CompareMetagrad(RunArgs),
    /// Check the closed-form, finite-difference, and bound machinery.
    VerifyOracle(RunArgs),
    /// Adapt and score meta-parameters on freshly sampled tasks.
    Eval(RunArgs),
    /// Resolve and print the config with per-field provenance; no compute.
    Validate(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, results, and checkpoints.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads for per-task parallelism; 1 is the determinism
    /// reference.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, kind) = match &cli.command {
        Command::Train(a) => (a, ExperimentKind::Train),
        Command::CompareMetagrad(a) => (a, ExperimentKind::CompareMetagrad),
        Command::VerifyOracle(a) => (a, ExperimentKind::VerifyOracle),
        Command::Eval(a) => (a, ExperimentKind::Eval),
        Command::Validate(a) => (a, ExperimentKind::Eval),
    };

    let (config, provenance) = match load_config(args, kind) {
        Ok(v) => v,
        Err(e) => return fail(2, "validation", &e),
    };

    if args.workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build_global();
    }

    let result = match &cli.command {
        Command::Validate(_) => run_validate(&config, &provenance),
        Command::Train(_) => run_train(args, &config, &provenance),
        Command::CompareMetagrad(_) => run_compare(args, &config, &provenance),
        Command::VerifyOracle(_) => run_verify(args, &config, &provenance),
        Command::Eval(_) => run_eval(args, &config, &provenance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => fail(2, "validation", &e),
        Err(e) => fail(1, "runtime", &e),
    }
}

fn fail(code: u8, kind: &str, err: &Error) -> ExitCode {
    let payload = json!({"error": err.to_string(), "kind": kind});
    println!("{payload}");
    ExitCode::from(code)
}

fn load_config(
    args: &RunArgs,
    kind: ExperimentKind,
) -> Result<(ExperimentConfig, Vec<FieldProvenance>), Error> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut raw = RawConfig::from_json_with_env(&text, std::env::vars())?;
    raw.experiment = kind;
    if let Some(seed) = args.seed {
        raw.seed = Some(seed);
    }
    raw.resolve()
}

fn write_resolved(
    out: &Path,
    config: &ExperimentConfig,
    provenance: &[FieldProvenance],
) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let doc = json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "config": config,
        "provenance": provenance,
    });
    std::fs::write(out.join("config.resolved.json"), format!("{doc:#}\n"))?;
    Ok(())
}

fn write_results(out: &Path, doc: &serde_json::Value) -> Result<(), Error> {
    std::fs::write(out.join("results.json"), format!("{doc:#}\n"))?;
    Ok(())
}

fn print_summary(format: Format, doc: &serde_json::Value, csv: impl FnOnce() -> String) {
    match format {
        Format::Json => println!("{doc:#}"),
        Format::Csv => print!("{}", csv()),
    }
}

fn run_validate(config: &ExperimentConfig, provenance: &[FieldProvenance]) -> Result<(), Error> {
    let doc = json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "config": config,
        "provenance": provenance,
    });
    println!("{doc:#}");
    Ok(())
}

fn run_train(
    args: &RunArgs,
    config: &ExperimentConfig,
    provenance: &[FieldProvenance],
) -> Result<(), Error> {
    write_resolved(&args.out, config, provenance)?;
    let run = trainer::train(config, None, args.workers)?;
    let hash = config.hash();

    let mut csv = format!("# config_hash={hash} seed={}\n", config.seed);
    csv.push_str(&trainer::metrics_to_csv(&run.metrics));
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    trainer::save_checkpoint(
        &args.out.join("checkpoint.bin"),
        &run.state,
        &hash,
        config.seed,
    )?;

    let last = run.metrics.last();
    let doc = json!({
        "config_hash": hash,
        "seed": config.seed,
        "iterations_run": run.state.iter,
        "final_outer_loss": last.map(|r| r.outer_loss),
        "final_grad_norm": last.map(|r| r.grad_norm),
        "grad_evals_total": run.state.grad_evals_cum,
        "hvps_total": run.state.hvps_cum,
    });
    write_results(&args.out, &doc)?;
    print_summary(args.format, &doc, || csv.clone());
    Ok(())
}

fn compare_rows_csv(hash: &str, seed: u64, rows: &[CompareRow]) -> String {
    let mut out = format!("# config_hash={hash} seed={seed}\n");
    out.push_str("method,inner_steps,cg_steps,exact_solve_error,grad_evals,hvps,peak_tape_nodes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.inner_steps,
            r.cg_steps.map_or(String::new(), |c| c.to_string()),
            r.exact_solve_error,
            r.ledger.grad_evals,
            r.ledger.hvps,
            r.ledger.peak_tape_nodes
        ));
    }
    out
}

fn run_compare(
    args: &RunArgs,
    config: &ExperimentConfig,
    provenance: &[FieldProvenance],
) -> Result<(), Error> {
    write_resolved(&args.out, config, provenance)?;
    let tasks = sample_tasks(&config.tasks, config.task_count, config.seed)?;
    let model = config.build_model();
    let theta = config.init_theta(&model);
    let rows = telemetry::compare_methods(
        &tasks,
        &theta,
        config.lambda,
        &config.inner_grid,
        &config.cg_grid,
    )?;
    let hash = config.hash();
    let csv = compare_rows_csv(&hash, config.seed, &rows);
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    let doc = json!({
        "config_hash": hash,
        "seed": config.seed,
        "rows": rows,
    });
    write_results(&args.out, &doc)?;
    print_summary(args.format, &doc, || csv.clone());
    Ok(())
}

struct CheckOutcome {
    name: &'static str,
    instances: usize,
    failures: usize,
    worst: f64,
}

fn run_verify(
    args: &RunArgs,
    config: &ExperimentConfig,
    provenance: &[FieldProvenance],
) -> Result<(), Error> {
    write_resolved(&args.out, config, provenance)?;
    let DistKind::Quadratic { dim, kappa, .. } = config.tasks.kind else {
        return Err(Error::Config(
            "oracle verification requires a quadratic task distribution".into(),
        ));
    };
    let tasks = sample_tasks(&config.tasks, config.task_count, config.seed)?;
    let model = Model::explicit_quadratic(dim);
    let lambda = config.lambda;
    let mut checks = Vec::new();

    // Implicit Jacobian against coordinate-wise perturb-and-resolve.
    {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for (i, task) in tasks.iter().enumerate() {
            let theta = model.init_params(config.seed.wrapping_add(i as u64));
            let phi = oracle::exact_inner_solution(task, &theta, lambda)?;
            let jac = oracle::implicit_jacobian_dense(&model, task, &phi, lambda)?;
            let h = 1e-6;
            let mut numeric = DMatrix::zeros(dim, dim);
            for col in 0..dim {
                let mut t = theta.clone();
                t[col] += h;
                let up = oracle::exact_inner_solution(task, &t, lambda)?;
                t[col] -= 2.0 * h;
                let down = oracle::exact_inner_solution(task, &t, lambda)?;
                numeric.set_column(col, &((up - down) / (2.0 * h)));
            }
            let rel = (&jac - &numeric).norm() / jac.norm();
            worst = worst.max(rel);
            if rel >= 1e-5 {
                failures += 1;
            }
        }
        checks.push(CheckOutcome {
            name: "implicit-jacobian-vs-perturbation",
            instances: tasks.len(),
            failures,
            worst,
        });
    }

    // Closed-form meta-gradient against central finite differences.
    {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for (i, task) in tasks.iter().enumerate() {
            let theta = model.init_params(config.seed.wrapping_add(1000 + i as u64));
            let exact = oracle::exact_meta_gradient(task, &theta, lambda)?.grad;
            let fd = oracle::finite_difference_meta_gradient(task, &theta, lambda, 1e-5, None)?;
            let rel = (&exact - &fd.grad).norm() / exact.norm();
            worst = worst.max(rel);
            if rel >= 1e-6 {
                failures += 1;
            }
        }
        checks.push(CheckOutcome {
            name: "exact-vs-finite-difference",
            instances: tasks.len(),
            failures,
            worst,
        });
    }

    // Stationarity of the closed-form inner solution.
    {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for (i, task) in tasks.iter().enumerate() {
            let theta = model.init_params(config.seed.wrapping_add(2000 + i as u64));
            let phi = oracle::exact_inner_solution(task, &theta, lambda)?;
            let obj = imeta::model::InnerObjective::new(&model, task, theta, lambda)?;
            let g = obj
                .gradient(&phi, &imeta::telemetry::Ledger::new())?
                .norm();
            worst = worst.max(g);
            if g >= 1e-8 {
                failures += 1;
            }
        }
        checks.push(CheckOutcome {
            name: "inner-solution-stationarity",
            instances: tasks.len(),
            failures,
            worst,
        });
    }

    // AGD iteration counts against the sqrt(kappa) log bound.
    {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        let delta = 1e-6;
        for task in &tasks {
            let theta = DVector::from_element(dim, 0.5);
            let consts = oracle::AnalysisConstants::from_quadratic(task, &theta, lambda)?;
            let phi_star = oracle::exact_inner_solution(task, &theta, lambda)?;
            let bound = oracle::agd_iteration_bound(consts.kappa, delta, phi_star.norm())?;
            let obj = imeta::model::InnerObjective::new(&model, task, theta, lambda)?;
            let init = DVector::zeros(dim);
            let out = solvers::solve_agd(
                &obj,
                &init,
                consts.mu,
                consts.beta,
                bound.max(1) * 4,
                Some(delta),
                &imeta::telemetry::Ledger::new(),
            )?;
            let dist = (&out.phi - &phi_star).norm();
            worst = worst.max(out.iterations as f64 / bound.max(1) as f64);
            if dist > delta || out.iterations > bound {
                failures += 1;
            }
        }
        checks.push(CheckOutcome {
            name: "agd-iteration-bound",
            instances: tasks.len(),
            failures,
            worst,
        });
    }

    // Implicit meta-gradient error against its instrumented bound.
    {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for (i, task) in tasks.iter().enumerate() {
            let theta = model.init_params(config.seed.wrapping_add(3000 + i as u64));
            let consts = oracle::AnalysisConstants::from_quadratic(task, &theta, lambda)?;
            let budget = config.inner_budget(task)?;
            let rep = imeta::meta::imaml_meta_gradient(
                &model,
                task,
                &theta,
                lambda,
                &budget,
                config.cg_steps,
                config.cg_tol,
            )?;
            let exact = oracle::exact_meta_gradient(task, &theta, lambda)?;
            let delta = (&rep.inner.phi - &exact.phi_star).norm();
            let q = task.quad_train.as_ref().unwrap();
            let mu_op = 1.0 + q.a.clone().symmetric_eigen().eigenvalues.min() / lambda;
            let delta_prime = rep.cg_residual.unwrap_or(0.0) / mu_op;
            let bound = oracle::implicit_gradient_error_bound(&consts, delta, delta_prime)?;
            let measured = (&rep.g - &exact.grad).norm();
            worst = worst.max(if bound > 0.0 { measured / bound } else { 0.0 });
            if measured > bound {
                failures += 1;
            }
        }
        checks.push(CheckOutcome {
            name: "implicit-gradient-error-bound",
            instances: tasks.len(),
            failures,
            worst,
        });
    }

    let failures_total: usize = checks.iter().map(|c| c.failures).sum();
    let hash = config.hash();
    let doc = json!({
        "config_hash": hash,
        "seed": config.seed,
        "kappa": kappa,
        "checks": checks.iter().map(|c| json!({
            "name": c.name,
            "instances": c.instances,
            "failures": c.failures,
            "worst": c.worst,
        })).collect::<Vec<_>>(),
        "failures_total": failures_total,
    });
    write_results(&args.out, &doc)?;
    let csv = {
        let mut s = format!("# config_hash={hash} seed={}\n", config.seed);
        s.push_str("check,instances,failures,worst\n");
        for c in &checks {
            s.push_str(&format!("{},{},{},{}\n", c.name, c.instances, c.failures, c.worst));
        }
        s
    };
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    print_summary(args.format, &doc, || csv.clone());
    if failures_total > 0 {
        return Err(Error::Runtime(format!(
            "oracle verification reported {failures_total} failing instances"
        )));
    }
    Ok(())
}

fn run_eval(
    args: &RunArgs,
    config: &ExperimentConfig,
    provenance: &[FieldProvenance],
) -> Result<(), Error> {
    write_resolved(&args.out, config, provenance)?;
    let model = config.build_model();
    let checkpoint_path = args.out.join("checkpoint.bin");
    let hash = config.hash();
    let (theta, source) = if checkpoint_path.exists() {
        let loaded = trainer::load_checkpoint(&checkpoint_path, Some(&hash))?;
        (loaded.state.theta, "checkpoint")
    } else {
        (config.init_theta(&model), "fresh-init")
    };
    // Evaluation draws a task set disjoint from the training iterations'
    // derived seeds.
    let tasks = sample_tasks(&config.tasks, config.task_count, config.seed ^ 0xE7A1_55E7)?;
    let budgets: Result<Vec<_>, Error> = tasks.iter().map(|t| config.inner_budget(t)).collect();
    let rows = trainer::evaluate_meta_test(&model, &theta, &tasks, config.lambda, &budgets?)?;
    let mean_loss = rows.iter().map(|r| r.test_loss).sum::<f64>() / rows.len() as f64;
    let doc = json!({
        "config_hash": hash,
        "seed": config.seed,
        "theta_source": source,
        "mean_test_loss": mean_loss,
        "tasks": rows,
    });
    write_results(&args.out, &doc)?;
    let csv = {
        let mut s = format!("# config_hash={hash} seed={}\n", config.seed);
        s.push_str("task_id,test_loss,accuracy\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{},{}\n",
                r.task_id,
                r.test_loss,
                r.accuracy.map_or(String::new(), |a| a.to_string())
            ));
        }
        s
    };
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    print_summary(args.format, &doc, || csv.clone());
    Ok(())
}
