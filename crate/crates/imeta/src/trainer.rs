//! Outer training loop: batch task sampling, meta-gradient averaging,
//! meta-parameter updates, meta-test evaluation, and checkpointing.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OuterOptimizer, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::meta::{meta_gradient, Engine, MetaGradReport};
use crate::model::{Model, Split};
use crate::solvers::InnerBudget;
use crate::tasks::{sample_tasks, Task};
use crate::telemetry::Ledger;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterState {
    pub theta: DVector<f64>,
    pub iter: u64,
    /// First/second moment accumulators; present only under the adaptive
    /// optimizer.
    pub moment1: Option<DVector<f64>>,
    pub moment2: Option<DVector<f64>>,
    /// Lifetime cost counters, carried across resume so the metrics log of
    /// a resumed run matches the uninterrupted one byte for byte.
    pub grad_evals_cum: u64,
    pub hvps_cum: u64,
}

impl OuterState {
    pub fn new(theta: DVector<f64>) -> Self {
        Self {
            theta,
            iter: 0,
            moment1: None,
            moment2: None,
            grad_evals_cum: 0,
            hvps_cum: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub outer_loss: f64,
    pub grad_norm: f64,
    pub grad_evals_cum: u64,
    pub hvps_cum: u64,
    pub peak_mem_proxy: u64,
}

/// Metrics CSV bytes. Float formatting uses the shortest round-trip form,
/// so identical trajectories produce identical bytes.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iter,outer_loss,grad_norm,grad_evals_cum,hvps_cum,peak_mem_proxy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.outer_loss, r.grad_norm, r.grad_evals_cum, r.hvps_cum, r.peak_mem_proxy
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub mean_grad: DVector<f64>,
    pub outer_loss: f64,
    pub grad_evals: u64,
    pub hvps: u64,
    pub peak_mem_proxy: u64,
}

fn task_reports(
    model: &Model,
    tasks: &[Task],
    theta: &DVector<f64>,
    engine: &Engine,
    lambda: f64,
    budgets: &[InnerBudget],
    workers: usize,
) -> Result<Vec<MetaGradReport>> {
    let compute = |(task, budget): (&Task, &InnerBudget)| -> Result<MetaGradReport> {
        meta_gradient(engine, model, task, theta, lambda, budget).map_err(|e| Error::TaskFailed {
            task_id: task.id,
            source: Box::new(e),
        })
    };
    if workers > 1 {
        tasks
            .par_iter()
            .zip(budgets.par_iter())
            .map(compute)
            .collect()
    } else {
        tasks.iter().zip(budgets.iter()).map(compute).collect()
    }
}

/// One outer update: average the per-task meta-gradients in task order and
/// apply the configured optimizer. Reduction order is fixed regardless of
/// worker count, so parallel runs match serial ones.
pub fn outer_step(
    state: &mut OuterState,
    model: &Model,
    tasks: &[Task],
    engine: &Engine,
    lambda: f64,
    budgets: &[InnerBudget],
    optimizer: OuterOptimizer,
    eta: f64,
    workers: usize,
) -> Result<StepStats> {
    if tasks.is_empty() {
        return Err(Error::Config("outer step needs a nonempty task batch".into()));
    }
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::Config(format!(
            "outer learning rate must be positive, got {eta}"
        )));
    }
    let reports = task_reports(model, tasks, &state.theta, engine, lambda, budgets, workers)?;

    let d = state.theta.len();
    let mut mean_grad = DVector::zeros(d);
    let mut outer_loss = 0.0;
    let mut grad_evals = 0;
    let mut hvps = 0;
    let mut peak = 0;
    let scratch = Ledger::new();
    for (task, rep) in tasks.iter().zip(&reports) {
        mean_grad += &rep.g;
        outer_loss += model.test_loss(&rep.inner.phi, task, &scratch)?;
        grad_evals += rep.grad_evals;
        hvps += rep.hvps;
        peak = peak.max(rep.peak_tape_nodes);
    }
    mean_grad /= tasks.len() as f64;
    outer_loss /= tasks.len() as f64;

    match optimizer {
        OuterOptimizer::Gd => {
            state.theta.axpy(-eta, &mean_grad, 1.0);
        }
        OuterOptimizer::Adam => {
            let m = state
                .moment1
                .get_or_insert_with(|| DVector::zeros(d));
            *m = &*m * ADAM_BETA1 + &mean_grad * (1.0 - ADAM_BETA1);
            let m = m.clone();
            let v = state
                .moment2
                .get_or_insert_with(|| DVector::zeros(d));
            for i in 0..d {
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * mean_grad[i] * mean_grad[i];
            }
            let t = (state.iter + 1) as i32;
            let m_hat_scale = 1.0 / (1.0 - ADAM_BETA1.powi(t));
            let v_hat_scale = 1.0 / (1.0 - ADAM_BETA2.powi(t));
            for i in 0..d {
                let m_hat = m[i] * m_hat_scale;
                let v_hat = state.moment2.as_ref().unwrap()[i] * v_hat_scale;
                state.theta[i] -= eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    state.iter += 1;

    Ok(StepStats {
        mean_grad: grad_norm_stats_guard(&mean_grad)?,
        outer_loss,
        grad_evals,
        hvps,
        peak_mem_proxy: peak,
    })
}

fn grad_norm_stats_guard(g: &DVector<f64>) -> Result<DVector<f64>> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(g.clone())
    } else {
        Err(Error::Divergence { step: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub state: OuterState,
    pub metrics: Vec<MetricsRow>,
    pub config_hash: String,
}

/// Runs the configured number of outer iterations, optionally resuming from
/// a checkpointed state. Each iteration draws its task batch from a seed
/// derived from (config seed, iteration index), so a resumed run retraces
/// the uninterrupted trajectory exactly.
pub fn train(
    config: &ExperimentConfig,
    resume: Option<OuterState>,
    workers: usize,
) -> Result<TrainRun> {
    let model = config.build_model();
    let engine = config.engine();
    let mut state = resume.unwrap_or_else(|| OuterState::new(config.init_theta(&model)));
    if state.theta.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.param_dim(),
            got: state.theta.len(),
            context: "checkpointed meta-parameters",
        });
    }
    let mut metrics = Vec::new();
    while state.iter < config.iterations {
        let batch_seed = config.seed.wrapping_add(state.iter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let tasks = sample_tasks(&config.tasks, config.batch_size, batch_seed)?;
        let budgets: Vec<InnerBudget> = tasks
            .iter()
            .map(|t| config.inner_budget(t))
            .collect::<Result<_>>()?;
        let stats = outer_step(
            &mut state,
            &model,
            &tasks,
            &engine,
            config.lambda,
            &budgets,
            config.optimizer,
            config.eta,
            workers,
        )?;
        state.grad_evals_cum += stats.grad_evals;
        state.hvps_cum += stats.hvps;
        let grad_norm = stats.mean_grad.norm();
        metrics.push(MetricsRow {
            iter: state.iter,
            outer_loss: stats.outer_loss,
            grad_norm,
            grad_evals_cum: state.grad_evals_cum,
            hvps_cum: state.hvps_cum,
            peak_mem_proxy: stats.peak_mem_proxy,
        });
        if let Some(stop) = config.grad_norm_stop {
            if grad_norm <= stop {
                break;
            }
        }
    }
    Ok(TrainRun {
        state,
        metrics,
        config_hash: config.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: u64,
    pub test_loss: f64,
    pub accuracy: Option<f64>,
}

/// Adapts theta on each task's train split and scores the result on the
/// test split.
pub fn evaluate_meta_test(
    model: &Model,
    theta: &DVector<f64>,
    tasks: &[Task],
    lambda: f64,
    budgets: &[InnerBudget],
) -> Result<Vec<EvalRow>> {
    let meter = Ledger::new();
    tasks
        .iter()
        .zip(budgets)
        .map(|(task, budget)| {
            let obj = crate::model::InnerObjective::new(model, task, theta.clone(), lambda)?;
            let solved = crate::solvers::solve(&obj, theta, budget, &meter)?;
            let test_loss = model.test_loss(&solved.phi, task, &meter)?;
            let accuracy = if task.test.labels.is_some() {
                Some(model.accuracy(&solved.phi, task, Split::Test, &meter)?)
            } else {
                None
            };
            Ok(EvalRow {
                task_id: task.id,
                test_loss,
                accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    seed: u64,
    iter: u64,
    theta_len: usize,
    has_moments: bool,
    grad_evals_cum: u64,
    hvps_cum: u64,
}

pub struct LoadedCheckpoint {
    pub state: OuterState,
    pub config_hash: String,
    pub seed: u64,
    /// Set when the stored config hash differs from the caller's.
    pub config_mismatch: bool,
}

fn write_vec(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_vec(bytes: &[u8], offset: &mut usize, len: usize) -> Result<DVector<f64>> {
    let need = len * 8;
    if bytes.len() < *offset + need {
        return Err(Error::Checkpoint("truncated parameter payload".into()));
    }
    let mut v = DVector::zeros(len);
    for i in 0..len {
        let mut chunk = [0u8; 8];
        chunk.copy_from_slice(&bytes[*offset + i * 8..*offset + i * 8 + 8]);
        v[i] = f64::from_le_bytes(chunk);
    }
    *offset += need;
    Ok(v)
}

/// One JSON header line, then raw little-endian 64-bit floats for theta and
/// (when present) the two moment vectors.
pub fn save_checkpoint(
    path: &Path,
    state: &OuterState,
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        iter: state.iter,
        theta_len: state.theta.len(),
        has_moments: state.moment1.is_some(),
        grad_evals_cum: state.grad_evals_cum,
        hvps_cum: state.hvps_cum,
    };
    let mut buf = serde_json::to_string(&header)?.into_bytes();
    buf.push(b'\n');
    write_vec(&mut buf, &state.theta);
    if let (Some(m1), Some(m2)) = (&state.moment1, &state.moment2) {
        write_vec(&mut buf, m1);
        write_vec(&mut buf, m2);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_config_hash: Option<&str>) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, this build reads {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let mut offset = newline + 1;
    let theta = read_vec(&bytes, &mut offset, header.theta_len)?;
    let (moment1, moment2) = if header.has_moments {
        (
            Some(read_vec(&bytes, &mut offset, header.theta_len)?),
            Some(read_vec(&bytes, &mut offset, header.theta_len)?),
        )
    } else {
        (None, None)
    };
    let config_mismatch = expected_config_hash.is_some_and(|h| h != header.config_hash);
    Ok(LoadedCheckpoint {
        state: OuterState {
            theta,
            iter: header.iter,
            moment1,
            moment2,
            grad_evals_cum: header.grad_evals_cum,
            hvps_cum: header.hvps_cum,
        },
        config_hash: header.config_hash,
        seed: header.seed,
        config_mismatch,
    })
}
