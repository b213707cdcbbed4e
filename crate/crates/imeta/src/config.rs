//! Experiment configuration: JSON schema with strict unknown-key rejection,
//! defaulting with per-field provenance, environment-variable overrides, and
//! a content hash that stamps every output artifact.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::Engine;
use crate::model::Model;
use crate::solvers::{InnerBudget, SolveMethod};
use crate::tasks::{DistKind, Task, TaskDistribution};

/// Prefix for environment overrides; `__` in the variable name descends one
/// level in the config tree, e.g. `IMETA_METHOD__LAMBDA=1.5`.
pub const ENV_PREFIX: &str = "IMETA_";

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    CompareMetagrad,
    VerifyOracle,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// Optional in the file; the CLI subcommand overrides it anyway.
    #[serde(default = "default_experiment")]
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub tasks: RawTasks,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub method: RawMethod,
    #[serde(default)]
    pub outer: RawOuter,
    #[serde(default)]
    pub sweep: RawSweep,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_experiment() -> ExperimentKind {
    ExperimentKind::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawTasks {
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub spectrum_levels: Option<usize>,
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub ways: Option<usize>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub base_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "arch")]
pub enum ModelSpec {
    ExplicitQuadratic,
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
        out_dim: usize,
        #[serde(default)]
        classification: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawMethod {
    #[serde(default)]
    pub engine: Option<String>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub cg_steps: Option<u64>,
    #[serde(default)]
    pub cg_tol: Option<f64>,
    #[serde(default)]
    pub inner_method: Option<String>,
    #[serde(default)]
    pub inner_steps: Option<u64>,
    /// Gradient-descent step size; omit on quadratic families to derive
    /// 2/(mu+beta) per task from the spectrum.
    #[serde(default)]
    pub inner_lr: Option<f64>,
    #[serde(default)]
    pub newton_repetitions: Option<u64>,
    #[serde(default)]
    pub target_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawOuter {
    #[serde(default)]
    pub optimizer: Option<String>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub grad_norm_stop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawSweep {
    #[serde(default)]
    pub inner_grid: Option<Vec<u64>>,
    #[serde(default)]
    pub cg_grid: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PaperDefault,
    ArtifactDefault,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub field: String,
    pub value: serde_json::Value,
    pub source: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Imaml,
    Maml,
    Fomaml,
    Reptile,
}

/// Fully resolved, validated configuration. Every field is concrete; the
/// provenance list records where each defaulted value came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub tasks: TaskDistribution,
    pub task_count: usize,
    pub model: ModelSpec,
    pub engine: EngineKind,
    pub lambda: f64,
    pub cg_steps: u64,
    pub cg_tol: f64,
    pub inner_method: String,
    pub inner_steps: u64,
    pub inner_lr: Option<f64>,
    pub newton_repetitions: u64,
    pub target_delta: Option<f64>,
    pub optimizer: OuterOptimizer,
    pub eta: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub grad_norm_stop: Option<f64>,
    pub inner_grid: Vec<u64>,
    pub cg_grid: Vec<u64>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Stable content hash over the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_model(&self) -> Model {
        match &self.model {
            ModelSpec::ExplicitQuadratic => {
                let dim = match self.tasks.kind {
                    DistKind::Quadratic { dim, .. } => dim,
                    _ => 0,
                };
                Model::explicit_quadratic(dim)
            }
            ModelSpec::Linear { in_dim, out_dim } => Model::linear(*in_dim, *out_dim),
            ModelSpec::Mlp {
                in_dim,
                hidden,
                out_dim,
                classification,
            } => {
                if *classification {
                    Model::mlp_classifier(*in_dim, hidden.clone(), *out_dim)
                } else {
                    Model::mlp(*in_dim, hidden.clone(), *out_dim)
                }
            }
        }
    }

    pub fn engine(&self) -> Engine {
        match self.engine {
            EngineKind::Imaml => Engine::Imaml {
                cg_steps: self.cg_steps,
                cg_tol: self.cg_tol,
            },
            EngineKind::Maml => Engine::Maml,
            EngineKind::Fomaml => Engine::Fomaml,
            EngineKind::Reptile => Engine::Reptile,
        }
    }

    /// Inner budget for one task; on quadratic payloads a missing learning
    /// rate resolves to 2/(mu+beta) from the exact spectrum.
    pub fn inner_budget(&self, task: &Task) -> Result<InnerBudget> {
        let method = match self.inner_method.as_str() {
            "gd" => {
                let lr = match self.inner_lr {
                    Some(lr) => lr,
                    None => {
                        let q = task.quad_train.as_ref().ok_or_else(|| {
                            Error::Config(
                                "method.inner_lr is required for non-quadratic tasks".into(),
                            )
                        })?;
                        let eigs = q.a.clone().symmetric_eigen().eigenvalues;
                        2.0 / (2.0 * self.lambda + eigs.min() + eigs.max())
                    }
                };
                SolveMethod::Gd { lr }
            }
            "agd" => {
                let q = task.quad_train.as_ref().ok_or_else(|| {
                    Error::Config(
                        "accelerated inner solver needs quadratic tasks for exact constants".into(),
                    )
                })?;
                let eigs = q.a.clone().symmetric_eigen().eigenvalues;
                SolveMethod::Agd {
                    mu: self.lambda + eigs.min(),
                    beta: self.lambda + eigs.max(),
                }
            }
            "newton-cg" => SolveMethod::NewtonCg {
                cg_steps: self.cg_steps,
                repetitions: self.newton_repetitions,
            },
            other => return Err(Error::Config(format!("unknown inner method '{other}'"))),
        };
        Ok(InnerBudget {
            method,
            steps: self.inner_steps,
            target_delta: self.target_delta,
        })
    }

    pub fn init_theta(&self, model: &Model) -> DVector<f64> {
        model.init_params(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
    }
}

fn tag<T: Serialize>(
    list: &mut Vec<FieldProvenance>,
    field: &str,
    value: &T,
    source: Provenance,
) {
    list.push(FieldProvenance {
        field: field.to_string(),
        value: serde_json::to_value(value).expect("provenance value serializes"),
        source,
    });
}

macro_rules! resolve_field {
    ($prov:ident, $raw:expr, $name:expr, $default:expr, $tag:expr) => {
        match $raw {
            Some(v) => {
                tag(&mut $prov, $name, &v, Provenance::User);
                v
            }
            None => {
                let v = $default;
                tag(&mut $prov, $name, &v, $tag);
                v
            }
        }
    };
}

impl RawConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    /// Applies `IMETA_*` environment overrides onto the JSON tree before
    /// deserialization. Values parse as JSON when possible, else as strings.
    pub fn from_json_with_env(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut tree: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for (key, val) in env {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
            let mut node = &mut tree;
            for seg in &segments[..segments.len() - 1] {
                node = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override {key} crosses a non-object")))?
                    .entry(seg.clone())
                    .or_insert_with(|| serde_json::json!({}));
            }
            let leaf = segments.last().unwrap().clone();
            let parsed = serde_json::from_str(&val).unwrap_or(serde_json::Value::String(val));
            node.as_object_mut()
                .ok_or_else(|| Error::Config(format!("override {key} crosses a non-object")))?
                .insert(leaf, parsed);
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    /// Fills defaults, validates everything, and reports per-field origins.
    pub fn resolve(self) -> Result<(ExperimentConfig, Vec<FieldProvenance>)> {
        let mut prov = Vec::new();

        let kind_str = resolve_field!(
            prov,
            self.tasks.kind.clone(),
            "tasks.kind",
            "quadratic".to_string(),
            Provenance::ArtifactDefault
        );
        let dist_kind = match kind_str.as_str() {
            "quadratic" => {
                let dim = resolve_field!(
                    prov,
                    self.tasks.dim,
                    "tasks.dim",
                    5usize,
                    Provenance::ArtifactDefault
                );
                let kappa = resolve_field!(
                    prov,
                    self.tasks.kappa,
                    "tasks.kappa",
                    10.0f64,
                    Provenance::ArtifactDefault
                );
                if let Some(levels) = self.tasks.spectrum_levels {
                    tag(&mut prov, "tasks.spectrum_levels", &levels, Provenance::User);
                }
                DistKind::Quadratic {
                    dim,
                    kappa,
                    spectrum_levels: self.tasks.spectrum_levels,
                }
            }
            "sinusoid" => {
                let shots = resolve_field!(
                    prov,
                    self.tasks.shots,
                    "tasks.shots",
                    10usize,
                    Provenance::ArtifactDefault
                );
                DistKind::Sinusoid { shots }
            }
            "gaussian-classes" => {
                let dim = resolve_field!(
                    prov,
                    self.tasks.dim,
                    "tasks.dim",
                    4usize,
                    Provenance::ArtifactDefault
                );
                let ways = resolve_field!(
                    prov,
                    self.tasks.ways,
                    "tasks.ways",
                    3usize,
                    Provenance::ArtifactDefault
                );
                let shots = resolve_field!(
                    prov,
                    self.tasks.shots,
                    "tasks.shots",
                    5usize,
                    Provenance::ArtifactDefault
                );
                DistKind::GaussianClasses { dim, ways, shots }
            }
            other => return Err(Error::Config(format!("unknown task kind '{other}'"))),
        };
        let base_seed = resolve_field!(
            prov,
            self.tasks.base_seed,
            "tasks.base_seed",
            0u64,
            Provenance::ArtifactDefault
        );
        let task_count = resolve_field!(
            prov,
            self.tasks.count,
            "tasks.count",
            8usize,
            Provenance::ArtifactDefault
        );
        let tasks = TaskDistribution {
            kind: dist_kind.clone(),
            base_seed,
        };
        tasks.validate()?;

        let model = match self.model {
            Some(m) => {
                tag(&mut prov, "model", &m, Provenance::User);
                m
            }
            None => {
                let m = match &dist_kind {
                    DistKind::Quadratic { .. } => ModelSpec::ExplicitQuadratic,
                    DistKind::Sinusoid { .. } => ModelSpec::Mlp {
                        in_dim: 1,
                        hidden: vec![40, 40],
                        out_dim: 1,
                        classification: false,
                    },
                    DistKind::GaussianClasses { dim, ways, .. } => ModelSpec::Mlp {
                        in_dim: *dim,
                        hidden: vec![40, 40],
                        out_dim: *ways,
                        classification: true,
                    },
                };
                // Two 40-unit hidden layers mirror the usual small-scale
                // regression benchmark architecture.
                tag(&mut prov, "model", &m, Provenance::PaperDefault);
                m
            }
        };
        if matches!(model, ModelSpec::ExplicitQuadratic)
            && !matches!(dist_kind, DistKind::Quadratic { .. })
        {
            return Err(Error::Config(
                "explicit-quadratic model requires a quadratic task distribution".into(),
            ));
        }

        let engine_str = resolve_field!(
            prov,
            self.method.engine.clone(),
            "method.engine",
            "imaml".to_string(),
            Provenance::ArtifactDefault
        );
        let engine = match engine_str.as_str() {
            "imaml" => EngineKind::Imaml,
            "maml" => EngineKind::Maml,
            "fomaml" => EngineKind::Fomaml,
            "reptile" => EngineKind::Reptile,
            other => return Err(Error::Config(format!("unknown engine '{other}'"))),
        };

        let lambda = resolve_field!(
            prov,
            self.method.lambda,
            "method.lambda",
            2.0f64,
            Provenance::PaperDefault
        );
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "method.lambda must be positive, got {lambda}"
            )));
        }
        let cg_steps = resolve_field!(
            prov,
            self.method.cg_steps,
            "method.cg_steps",
            5u64,
            Provenance::PaperDefault
        );
        let cg_tol = resolve_field!(
            prov,
            self.method.cg_tol,
            "method.cg_tol",
            1e-10f64,
            Provenance::ArtifactDefault
        );
        if cg_tol < 0.0 {
            return Err(Error::Config(format!(
                "method.cg_tol must be nonnegative, got {cg_tol}"
            )));
        }
        let inner_method = resolve_field!(
            prov,
            self.method.inner_method.clone(),
            "method.inner_method",
            "gd".to_string(),
            Provenance::ArtifactDefault
        );
        if !matches!(inner_method.as_str(), "gd" | "agd" | "newton-cg") {
            return Err(Error::Config(format!(
                "unknown inner method '{inner_method}'"
            )));
        }
        let inner_steps = resolve_field!(
            prov,
            self.method.inner_steps,
            "method.inner_steps",
            16u64,
            Provenance::PaperDefault
        );
        if let Some(lr) = self.method.inner_lr {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "method.inner_lr must be positive, got {lr}"
                )));
            }
            tag(&mut prov, "method.inner_lr", &lr, Provenance::User);
        }
        let newton_repetitions = resolve_field!(
            prov,
            self.method.newton_repetitions,
            "method.newton_repetitions",
            3u64,
            Provenance::PaperDefault
        );
        if let Some(delta) = self.method.target_delta {
            if delta <= 0.0 || !delta.is_finite() {
                return Err(Error::Config(format!(
                    "method.target_delta must be positive, got {delta}"
                )));
            }
            tag(&mut prov, "method.target_delta", &delta, Provenance::User);
        }

        let optimizer_str = resolve_field!(
            prov,
            self.outer.optimizer.clone(),
            "outer.optimizer",
            "gd".to_string(),
            Provenance::PaperDefault
        );
        let optimizer = match optimizer_str.as_str() {
            "gd" => OuterOptimizer::Gd,
            "adam" => OuterOptimizer::Adam,
            other => return Err(Error::Config(format!("unknown outer optimizer '{other}'"))),
        };
        let eta = resolve_field!(
            prov,
            self.outer.eta,
            "outer.eta",
            0.01f64,
            Provenance::ArtifactDefault
        );
        if eta <= 0.0 || !eta.is_finite() {
            return Err(Error::Config(format!(
                "outer.eta must be positive, got {eta}"
            )));
        }
        let iterations = resolve_field!(
            prov,
            self.outer.iterations,
            "outer.iterations",
            100u64,
            Provenance::ArtifactDefault
        );
        let batch_size = resolve_field!(
            prov,
            self.outer.batch_size,
            "outer.batch_size",
            4usize,
            Provenance::ArtifactDefault
        );
        if batch_size == 0 {
            return Err(Error::Config("outer.batch_size must be at least 1".into()));
        }
        if let Some(stop) = self.outer.grad_norm_stop {
            if stop <= 0.0 {
                return Err(Error::Config(format!(
                    "outer.grad_norm_stop must be positive, got {stop}"
                )));
            }
            tag(&mut prov, "outer.grad_norm_stop", &stop, Provenance::User);
        }

        let inner_grid = resolve_field!(
            prov,
            self.sweep.inner_grid.clone(),
            "sweep.inner_grid",
            crate::telemetry::DEFAULT_INNER_GRID.to_vec(),
            Provenance::ArtifactDefault
        );
        let cg_grid = resolve_field!(
            prov,
            self.sweep.cg_grid.clone(),
            "sweep.cg_grid",
            crate::telemetry::DEFAULT_CG_GRID.to_vec(),
            Provenance::ArtifactDefault
        );
        if inner_grid.is_empty() || cg_grid.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }

        let seed = resolve_field!(prov, self.seed, "seed", 0u64, Provenance::ArtifactDefault);

        if task_count == 0 {
            return Err(Error::Config("tasks.count must be at least 1".into()));
        }

        let resolved = ExperimentConfig {
            experiment: self.experiment,
            tasks,
            task_count,
            model,
            engine,
            lambda,
            cg_steps,
            cg_tol,
            inner_method,
            inner_steps,
            inner_lr: self.method.inner_lr,
            newton_repetitions,
            target_delta: self.method.target_delta,
            optimizer,
            eta,
            iterations,
            batch_size,
            grad_norm_stop: self.outer.grad_norm_stop,
            inner_grid,
            cg_grid,
            seed,
        };
        Ok((resolved, prov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(experiment: &str) -> String {
        format!("{{\"experiment\": \"{experiment}\"}}")
    }

    #[test]
    fn defaults_resolve_with_paper_tags() {
        let raw = RawConfig::from_json(&minimal("train")).unwrap();
        let (cfg, prov) = raw.resolve().unwrap();
        assert_eq!(cfg.lambda, 2.0);
        assert_eq!(cfg.cg_steps, 5);
        let lam = prov.iter().find(|p| p.field == "method.lambda").unwrap();
        assert_eq!(lam.source, Provenance::PaperDefault);
        let seed = prov.iter().find(|p| p.field == "seed").unwrap();
        assert_eq!(seed.source, Provenance::ArtifactDefault);
    }

    #[test]
    fn user_values_tagged_as_user() {
        let text = r#"{"experiment": "train", "method": {"lambda": 0.5, "inner_steps": 10}}"#;
        let (cfg, prov) = RawConfig::from_json(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.inner_steps, 10);
        let lam = prov.iter().find(|p| p.field == "method.lambda").unwrap();
        assert_eq!(lam.source, Provenance::User);
    }

    #[test]
    fn negative_lambda_rejected() {
        let text = r#"{"experiment": "train", "method": {"lambda": -1.0}}"#;
        assert!(RawConfig::from_json(text).unwrap().resolve().is_err());
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = r#"{"experiment": "train", "method": {"lambdda": 1.0}}"#;
        let err = RawConfig::from_json(text).unwrap_err();
        assert!(format!("{err}").contains("lambdda"));
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("IMETA_METHOD__LAMBDA".to_string(), "1.5".to_string()),
            ("IMETA_SEED".to_string(), "42".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        let raw = RawConfig::from_json_with_env(&minimal("train"), env.into_iter()).unwrap();
        let (cfg, _) = raw.resolve().unwrap();
        assert_eq!(cfg.lambda, 1.5);
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let (a, _) = RawConfig::from_json(&minimal("train")).unwrap().resolve().unwrap();
        let (b, _) = RawConfig::from_json(&minimal("train")).unwrap().resolve().unwrap();
        assert_eq!(a.hash(), b.hash());
        let (c, _) = RawConfig::from_json(
            r#"{"experiment": "train", "method": {"lambda": 3.0}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn sinusoid_defaults_to_mlp() {
        let text = r#"{"experiment": "train", "tasks": {"kind": "sinusoid"}}"#;
        let (cfg, _) = RawConfig::from_json(text).unwrap().resolve().unwrap();
        assert!(matches!(cfg.model, ModelSpec::Mlp { in_dim: 1, .. }));
    }

    #[test]
    fn quadratic_budget_derives_learning_rate() {
        let text = r#"{"experiment": "train"}"#;
        let (cfg, _) = RawConfig::from_json(text).unwrap().resolve().unwrap();
        let task = crate::tasks::make_quadratic_task(5, 10.0, None, 3).unwrap();
        let budget = cfg.inner_budget(&task).unwrap();
        match budget.method {
            SolveMethod::Gd { lr } => assert!(lr > 0.0),
            _ => panic!("expected gradient descent"),
        }
    }
}
