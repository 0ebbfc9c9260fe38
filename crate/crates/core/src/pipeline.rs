//! Declarative run configuration and the five pipeline stages. Every
//! stage reads its inputs from and writes its outputs to one run
//! directory, so the stages can be driven one at a time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{collect_dataset, derive_seed, derive_subset, Dataset, SubsetRule};
use crate::env::{EnvConfig, PolicyKind, TaskId};
use crate::error::{CtError, Result};
use crate::eval::{emit_report, evaluate_policy_with, Curve, EvalConfig, LabelledResult};
use crate::model::{Checkpoint, ModelConfig};
use crate::objectives::ObjectiveConfig;
use crate::training::{
    adapt_action_space, finetune, pretrain, read_evals_csv, FinetuneConfig, InitMode, PretrainConfig,
};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ctck";
pub const BEST_CHECKPOINT_FILE: &str = "best.ctck";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const EVALS_FILE: &str = "evals.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pretrain_tasks: Vec<TaskId>,
    pub pretrain_kind: PolicyKind,
    /// Transitions collected per pretraining task.
    pub pretrain_steps: usize,
    pub finetune_tasks: Vec<TaskId>,
    pub finetune_kind: PolicyKind,
    pub finetune_steps: usize,
    /// Optional episode subset applied to each finetuning dataset.
    pub finetune_subset: Option<SubsetRule>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_tasks: vec![
                TaskId::PendulumSwingup,
                TaskId::PendulumBalance,
                TaskId::PointmassReachCenter,
            ],
            pretrain_kind: PolicyKind::Exploratory,
            pretrain_steps: 20_000,
            finetune_tasks: vec![
                TaskId::PointmassReachCenter,
                TaskId::PointmassReachCorner,
                TaskId::TwolinkarmReach,
            ],
            finetune_kind: PolicyKind::Expert,
            finetune_steps: 5_000,
            finetune_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Re-draw the action interfaces before finetuning on a domain the
    /// checkpoint was never trained on.
    pub adapt_unseen_domains: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_episodes: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Single-threaded numerics; runs are then bit-reproducible.
    pub deterministic: bool,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objectives: ObjectiveConfig,
    pub training: TrainingConfig,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.pretrain.validate()?;
        self.training.finetune.validate()?;
        let s = self.env.image_size;
        if self.model.image_shape != [s, s, 3] {
            return Err(CtError::Config(format!(
                "model.image_shape {:?} does not match env.image_size {s}",
                self.model.image_shape
            )));
        }
        let tasks = self.data.pretrain_tasks.iter().chain(&self.data.finetune_tasks);
        if let Some(t) = tasks.clone().find(|t| t.action_dim() > self.model.a_max) {
            return Err(CtError::Config(format!(
                "{t} needs {} action dims but model.a_max is {}",
                t.action_dim(),
                self.model.a_max
            )));
        }
        for steps in [self.data.pretrain_steps, self.data.finetune_steps] {
            if steps < self.env.episode_length {
                return Err(CtError::Config(format!(
                    "collection budget {steps} is shorter than one episode ({})",
                    self.env.episode_length
                )));
            }
        }
        if self.eval.n_episodes == 0 {
            return Err(CtError::Config("eval.n_episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.eval.n_episodes,
            seed: self.eval.seed,
            episode_length: self.env.episode_length,
        }
    }

    /// Label of the finetuning run: `scratch`, `smart`, or the pretraining
    /// variant's name.
    pub fn method(&self) -> String {
        match (self.training.finetune.init, self.objectives.variant) {
            (InitMode::Scratch, _) => "scratch".into(),
            (InitMode::Checkpoint, None) => "smart".into(),
            (InitMode::Checkpoint, Some(v)) => serde_json::to_value(v)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| format!("{v:?}")),
        }
    }
}

/// Sets `key` (dotted path) in a JSON object tree. `raw` is parsed as
/// JSON when possible and otherwise taken as a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CtError::Schema(key.to_string()));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CtError::Type {
                path: key.to_string(),
                message: "parent is not an object".into(),
            })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| CtError::Type {
        path: key.to_string(),
        message: "parent is not an object".into(),
    })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Strict deserialization of a JSON tree; unknown keys and type errors
/// name the offending path.
pub fn config_from_value(value: Value) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        if message.starts_with("unknown field") {
            CtError::Schema(path)
        } else {
            CtError::Type { path, message }
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config file (or starts from `{}`), applies `key=value`
/// overrides in order, and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CtError::storage(p, e))?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    if !value.is_object() {
        return Err(CtError::Type {
            path: ".".into(),
            message: "config root must be a JSON object".into(),
        });
    }
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    config_from_value(value)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CtError::Config(format!("override `{s}` is not key=value")))
}

fn task_slug(task: TaskId) -> String {
    task.name().replace('/', "_")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CtError::storage(p, e))
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir(PathBuf);

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self(root.into())
    }

    pub fn root(&self) -> &Path {
        &self.0
    }

    pub fn pretrain_data(&self) -> PathBuf {
        self.0.join("data").join("pretrain")
    }

    pub fn finetune_data(&self, task: TaskId) -> PathBuf {
        self.0.join("data").join("finetune").join(task_slug(task))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.0.join("pretrain")
    }

    pub fn finetune_dir(&self, method: &str, task: TaskId) -> PathBuf {
        self.0.join("finetune").join(method).join(task_slug(task))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.0.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.0.join("report")
    }

    /// Method names that have a finetuning directory, sorted.
    pub fn methods(&self) -> Result<Vec<String>> {
        let dir = self.0.join("finetune");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| CtError::storage(&dir, e))? {
            let entry = entry.map_err(|e| CtError::storage(&dir, e))?;
            if entry.path().is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn write_resolved_config(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    create_dir(dir.root())?;
    let path = dir.root().join(RESOLVED_CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, text + "\n").map_err(|e| CtError::storage(&path, e))
}

/// Collects the pretraining dataset and one dataset per finetuning task.
pub fn collect_stage(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    let d = &cfg.data;
    if !d.pretrain_tasks.is_empty() {
        let ds = collect_dataset(
            &d.pretrain_tasks,
            d.pretrain_kind,
            d.pretrain_steps,
            derive_seed(cfg.seed, 1),
            cfg.env,
        )?;
        ds.save(dir.pretrain_data())?;
    }
    for &task in &d.finetune_tasks {
        let mut ds = collect_dataset(&[task], d.finetune_kind, d.finetune_steps, derive_seed(cfg.seed, 2), cfg.env)?;
        if let Some(rule) = d.finetune_subset {
            ds = derive_subset(&ds, rule, derive_seed(cfg.seed, 3))?;
        }
        ds.save(dir.finetune_data(task))?;
    }
    Ok(())
}

pub fn pretrain_stage(cfg: &PipelineConfig, dir: &RunDir) -> Result<Checkpoint> {
    let ds = Dataset::load(dir.pretrain_data())?;
    let out = pretrain(&ds, &cfg.model, &cfg.training.pretrain, &cfg.objectives, cfg.seed)?;
    let pd = dir.pretrain_dir();
    create_dir(&pd)?;
    out.checkpoint.save(&pd.join(CHECKPOINT_FILE))?;
    out.log.write_csv(&pd.join(RUNLOG_FILE))?;
    Ok(out.checkpoint)
}

fn knows_domain(ck: &Checkpoint, task: TaskId) -> bool {
    ck.trained_tasks()
        .iter()
        .filter_map(|t| t.parse::<TaskId>().ok())
        .any(|t| t.domain() == task.domain())
}

/// Finetunes one policy per finetuning task, starting from the
/// pretrained checkpoint or from scratch per `training.finetune.init`.
pub fn finetune_stage(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    let fc = &cfg.training.finetune;
    let start = match fc.init {
        InitMode::Checkpoint => Some(Checkpoint::load(&dir.pretrain_dir().join(CHECKPOINT_FILE))?),
        InitMode::Scratch => None,
    };
    let eval = cfg.eval_config();
    let method = cfg.method();
    for &task in &cfg.data.finetune_tasks {
        let ds = Dataset::load(dir.finetune_data(task))?;
        let start = match &start {
            Some(ck) if cfg.training.adapt_unseen_domains && !knows_domain(ck, task) => {
                Some(adapt_action_space(ck, task.action_dim(), cfg.seed)?)
            }
            other => other.clone(),
        };
        let out = finetune(&ds, start.as_ref(), &cfg.model, fc, Some(&eval), cfg.seed)?;
        let fd = dir.finetune_dir(&method, task);
        create_dir(&fd)?;
        out.checkpoint.save(&fd.join(CHECKPOINT_FILE))?;
        if let Some(best) = &out.best {
            best.save(&fd.join(BEST_CHECKPOINT_FILE))?;
        }
        out.log.write_csv(&fd.join(RUNLOG_FILE))?;
        out.log.write_evals_csv(&fd.join(EVALS_FILE))?;
    }
    Ok(())
}

/// Evaluates the best (else final) checkpoint of every finetuned
/// `(method, task)` and stores each result as JSON.
pub fn eval_stage(cfg: &PipelineConfig, dir: &RunDir) -> Result<Vec<LabelledResult>> {
    let methods = dir.methods()?;
    if methods.is_empty() {
        return Err(CtError::Config(format!(
            "no finetuned checkpoints under {}",
            dir.root().display()
        )));
    }
    let ed = dir.eval_dir();
    create_dir(&ed)?;
    let eval = cfg.eval_config();
    let mut out = Vec::new();
    for method in methods {
        for &task in &cfg.data.finetune_tasks {
            let fd = dir.finetune_dir(&method, task);
            let best = fd.join(BEST_CHECKPOINT_FILE);
            let path = if best.exists() { best } else { fd.join(CHECKPOINT_FILE) };
            if !path.exists() {
                continue;
            }
            let ck = Checkpoint::load(&path)?;
            let result = evaluate_policy_with(&ck, task, cfg.training.finetune.mode, &eval, |_| {})?;
            let labelled = LabelledResult {
                method: method.clone(),
                result,
            };
            let p = ed.join(format!("{method}__{}.json", task_slug(task)));
            let text = serde_json::to_string_pretty(&labelled)?;
            fs::write(&p, text).map_err(|e| CtError::storage(&p, e))?;
            out.push(labelled);
        }
    }
    Ok(out)
}

/// Builds the report from stored evaluation results and finetuning curves.
pub fn report_stage(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    let ed = dir.eval_dir();
    let mut files: Vec<PathBuf> = match fs::read_dir(&ed) {
        Ok(rd) => rd
            .map(|e| e.map(|e| e.path()).map_err(|err| CtError::storage(&ed, err)))
            .collect::<Result<_>>()?,
        Err(e) => return Err(CtError::storage(&ed, e)),
    };
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    let mut results = Vec::new();
    for p in &files {
        let text = fs::read_to_string(p).map_err(|e| CtError::storage(p, e))?;
        results.push(serde_json::from_str::<LabelledResult>(&text)?);
    }
    let mut curves = Vec::new();
    for method in dir.methods()? {
        for &task in &cfg.data.finetune_tasks {
            let p = dir.finetune_dir(&method, task).join(EVALS_FILE);
            if p.exists() {
                let points = read_evals_csv(&p)?
                    .into_iter()
                    .map(|s| (s.epoch, s.mean_return))
                    .collect();
                curves.push(Curve {
                    task,
                    method: method.clone(),
                    points,
                });
            }
        }
    }
    emit_report(&dir.report_dir(), &results, &curves)
}

/// collect, pretrain (unless finetuning from scratch), finetune, eval,
/// report.
pub fn run_all(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    write_resolved_config(cfg, dir)?;
    collect_stage(cfg, dir)?;
    if cfg.training.finetune.init == InitMode::Checkpoint {
        pretrain_stage(cfg, dir)?;
    }
    finetune_stage(cfg, dir)?;
    eval_stage(cfg, dir)?;
    report_stage(cfg, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg.model.n_layers, 8);
        assert_eq!(cfg.model.n_heads, 8);
        assert_eq!(cfg.model.d_embed, 256);
        assert_eq!(cfg.model.context_pairs, 30);
        assert_eq!(cfg.training.pretrain.optim.base_lr, 6e-4);
        assert_eq!(cfg.training.pretrain.batch_size, 256);
        assert_eq!(cfg.training.finetune.batch_size, 256);
        assert_eq!(cfg.training.pretrain.epochs, 10);
        assert_eq!(cfg.training.finetune.epochs, 20);
    }

    #[test]
    fn override_sets_nested_value() {
        let cfg = parse_config(None, &[("model.T".into(), "4".into())]).unwrap();
        assert_eq!(cfg.model.context_pairs, 4);
        let cfg = parse_config(None, &[("training.finetune.init".into(), "scratch".into())]).unwrap();
        assert_eq!(cfg.training.finetune.init, InitMode::Scratch);
        assert_eq!(cfg.method(), "scratch");
    }

    #[test]
    fn unknown_key_is_named() {
        let v: Value = serde_json::json!({"model": {"nlayers": 4}});
        match config_from_value(v) {
            Err(CtError::Schema(path)) => assert_eq!(path, "model.nlayers"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let v: Value = serde_json::json!({"model": {"n_layers": "eight"}});
        match config_from_value(v) {
            Err(CtError::Type { path, message }) => {
                assert_eq!(path, "model.n_layers");
                assert!(message.contains("expected usize"), "{message}");
            }
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = parse_config(None, &[("seed".into(), "7".into()), ("eval.n_episodes".into(), "5".into())]).unwrap();
        let back = config_from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn inconsistent_image_size_is_rejected() {
        assert!(parse_config(None, &[("env.image_size".into(), "16".into())]).is_err());
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("a.b=1").unwrap(), ("a.b".into(), "1".into()));
        assert_eq!(parse_assignment("x=y=z").unwrap(), ("x".into(), "y=z".into()));
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    proptest::proptest! {
        #[test]
        fn any_stray_key_is_rejected_by_path(section in 0usize..8, key in "[a-z]{3,10}") {
            let full = serde_json::to_value(PipelineConfig::default()).unwrap();
            let sections = ["", "env", "data", "model", "objectives", "training", "training.pretrain", "eval"];
            let prefix = sections[section];
            let target = if prefix.is_empty() { &full } else { full.pointer(&format!("/{}", prefix.replace('.', "/"))).unwrap() };
            proptest::prop_assume!(target.get(&key).is_none());
            let mut v = Value::Object(Default::default());
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            apply_override(&mut v, &path, "1").unwrap();
            match config_from_value(v) {
                Err(CtError::Schema(p)) => proptest::prop_assert_eq!(p, path),
                other => proptest::prop_assert!(false, "expected schema error, got {:?}", other),
            }
        }
    }
}

