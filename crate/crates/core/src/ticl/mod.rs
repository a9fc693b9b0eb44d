//! Task-incremental continual learning: a sequence of class-disjoint tasks
//! learned one after another, with the task id known at train and test time.
//!
//! A [`TiclRun`] holds the shared trunk, the per-task state each mode
//! needs, and the accuracy matrix `A[i][j]` (accuracy on task `j` right after
//! finishing task `i`). Training only ever sees the current task's data:
//! [`TiclRun::register_task`] keeps the test split and hands the training
//! split back to the caller, who passes it to [`TiclRun::train_task`].

pub mod checkpoint;
mod config;
mod data;
mod synthetic;

pub use config::{grid_for, parse_kv, RunConfig, TrainMode, TrainOptions, RUN_KEYS};
pub use data::{Dataset, TaskSpec};
pub use synthetic::{class_patterns, make_synthetic_tasks, nearest_pattern, PatternFamily, SyntheticTaskConfig};

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterSet};
use crate::encoder::{forward, Backbone, Head};
use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::params::{rng_for, Binder, ParamSet};
use crate::tensor::optim::{adam_step, AdamState};
use crate::tensor::{io as tensor_io, Graph, Tensor};

use checkpoint::{Checkpoint, FORMAT_VERSION};

/// Everything a run keeps about one registered task.
#[derive(Clone, Debug)]
pub struct TaskState {
    pub id: usize,
    pub name: String,
    pub classes: usize,
    pub head: Head,
    /// Adapter-incremental only.
    pub adapters: Option<AdapterSet>,
    /// Model-incremental only: this task's own trunk.
    pub model: Option<Backbone>,
    pub test: Dataset,
    pub trained: bool,
}

/// `A[i][j]`: accuracy on task `j` after finishing task `i`, for `j <= i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Number of completed stages.
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Largest drop from a task's just-trained accuracy to its accuracy
    /// after the last completed stage, floored at 0; 0 with fewer than two
    /// stages.
    pub fn forgetting(&self) -> f64 {
        let Some(last) = self.rows.last() else { return 0.0 };
        let n = self.rows.len();
        (0..n - 1)
            .map(|j| self.rows[j][j] - last[j])
            .fold(0.0, f64::max)
    }

    /// Per-task drop `A[j][j] - A[last][j]` for every earlier task.
    pub fn drops(&self) -> Vec<f64> {
        let Some(last) = self.rows.last() else { return Vec::new() };
        (0..self.rows.len() - 1).map(|j| self.rows[j][j] - last[j]).collect()
    }
}

/// Fixed-format text report: a header, one row per stage, and the
/// forgetting summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixReport {
    pub mode: TrainMode,
    pub task_names: Vec<String>,
    pub matrix: AccuracyMatrix,
}

impl MatrixReport {
    pub fn forgetting(&self) -> f64 {
        self.matrix.forgetting()
    }
}

impl fmt::Display for MatrixReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# rows: after training task i; cols: accuracy on task j")?;
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "tasks={}", self.task_names.join(","))?;
        write!(f, "{:>8}", "after")?;
        for j in 0..self.task_names.len() {
            write!(f, " {:>8}", format!("t{j}"))?;
        }
        writeln!(f)?;
        for (i, row) in self.matrix.rows().iter().enumerate() {
            write!(f, "{:>8}", format!("t{i}"))?;
            for j in 0..self.task_names.len() {
                match row.get(j) {
                    Some(a) => write!(f, " {a:>8.6}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        writeln!(f, "forgetting={:.6}", self.forgetting())
    }
}

/// Loss per epoch and final training-set accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub task_id: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TiclRun {
    cfg: RunConfig,
    backbone: Backbone,
    tasks: Vec<TaskState>,
    matrix: AccuracyMatrix,
}

/// Views of the weights that produce one task's logits.
struct Route<'a> {
    trunk: &'a Backbone,
    adapters: Option<&'a AdapterSet>,
    head: &'a Head,
}

const EVAL_CHUNK: usize = 32;

impl TiclRun {
    /// Fresh run; the trunk is drawn from the run seed and stands in for
    /// pretrained weights shared by every mode.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::init(cfg.model, &mut rng_for(cfg.seed, "backbone", 0))?;
        Ok(TiclRun {
            cfg,
            backbone,
            tasks: Vec::new(),
            matrix: AccuracyMatrix::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn mode(&self) -> TrainMode {
        self.cfg.mode
    }

    /// The shared trunk (the frozen one in adapter mode, the evolving one in
    /// sequential mode, the common starting point in incremental mode).
    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn tasks(&self) -> &[TaskState] {
        &self.tasks
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.tasks.iter().position(|t| t.id == id).ok_or(Error::UnknownTask(id))
    }

    pub fn task(&self, id: usize) -> Result<&TaskState> {
        Ok(&self.tasks[self.position(id)?])
    }

    /// Allocates the new task's head plus its adapters (adapter mode) or
    /// its own trunk copy (incremental mode). Keeps the test split and
    /// returns the training split.
    pub fn register_task(&mut self, spec: TaskSpec) -> Result<Dataset> {
        spec.validate()?;
        if self.tasks.iter().any(|t| t.id == spec.id) {
            return Err(Error::DuplicateTask(spec.id));
        }
        if let Some(last) = self.tasks.last() {
            if spec.id < last.id {
                return Err(Error::InvalidArgument(format!(
                    "task {} registered after task {}; ids must increase",
                    spec.id, last.id
                )));
            }
        }
        let d = self.cfg.model.embed_dim();
        let head = Head::init(d, spec.classes, &mut rng_for(self.cfg.seed, "head", spec.id as u64));
        let (adapters, model) = match self.cfg.mode {
            TrainMode::AdapterIncremental => {
                let acfg = AdapterConfig::new(d, self.cfg.model.bottleneck)?;
                let mut rng = rng_for(self.cfg.seed, "adapter", spec.id as u64);
                (Some(AdapterSet::init(acfg, self.cfg.model.encoder.layers, &mut rng)), None)
            }
            TrainMode::ModelIncremental => (None, Some(self.backbone.clone())),
            TrainMode::ModelSequential => (None, None),
        };
        self.tasks.push(TaskState {
            id: spec.id,
            name: spec.name,
            classes: spec.classes,
            head,
            adapters,
            model,
            test: spec.test,
            trained: false,
        });
        Ok(spec.train)
    }

    fn route(&self, pos: usize) -> Route<'_> {
        let task = &self.tasks[pos];
        Route {
            trunk: task.model.as_ref().unwrap_or(&self.backbone),
            adapters: task.adapters.as_ref(),
            head: &task.head,
        }
    }

    /// Trains the next untrained task on `train` only, then appends a row
    /// to the accuracy matrix by evaluating every task trained so far.
    pub fn train_task(&mut self, id: usize, train: &Dataset, opts: &TrainOptions) -> Result<TrainLog> {
        opts.validate()?;
        let pos = self.position(id)?;
        if self.tasks[pos].trained {
            return Err(Error::InvalidArgument(format!("task {id} is already trained")));
        }
        if let Some(next) = self.tasks.iter().position(|t| !t.trained) {
            if next != pos {
                return Err(Error::InvalidArgument(format!(
                    "tasks train in registration order; task {} is next",
                    self.tasks[next].id
                )));
            }
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset(id));
        }
        train.check_labels(self.tasks[pos].classes)?;

        let mode = self.cfg.mode;
        let seed = self.cfg.seed;
        let task = &mut self.tasks[pos];
        let (trunk, train_trunk): (&mut Backbone, bool) = match mode {
            TrainMode::AdapterIncremental => (&mut self.backbone, false),
            TrainMode::ModelSequential => (&mut self.backbone, true),
            TrainMode::ModelIncremental => (task.model.as_mut().expect("incremental task owns a trunk"), true),
        };
        let mut state = {
            let mut params: Vec<&Tensor> = Vec::new();
            if train_trunk {
                trunk.visit("", &mut |_, t| params.push(t));
            }
            if let Some(a) = &task.adapters {
                a.visit("", &mut |_, t| params.push(t));
            }
            task.head.visit("", &mut |_, t| params.push(t));
            AdamState::for_params(&params)
        };

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng_for(seed, "shuffle", ((id as u64) << 32) | epoch as u64));
            let mut total = 0.0;
            for batch in order.chunks(opts.batch_size) {
                let (loss, grads) = batch_gradients(trunk, train_trunk, task.adapters.as_ref(), &task.head, train, batch)?;
                total += loss * batch.len() as f64;
                let mut params: Vec<&mut Tensor> = Vec::new();
                if train_trunk {
                    params.extend(trunk.tensors_mut());
                }
                if let Some(a) = task.adapters.as_mut() {
                    params.extend(a.tensors_mut());
                }
                params.extend(task.head.tensors_mut());
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                adam_step(&mut params, &grad_refs, &mut state, &opts.adam)?;
            }
            epoch_losses.push(total / train.len() as f64);
        }
        self.tasks[pos].trained = true;

        let train_accuracy = accuracy(&self.route(pos), train)?;
        let row = self
            .tasks
            .iter()
            .enumerate()
            .take(pos + 1)
            .map(|(j, t)| accuracy(&self.route(j), &t.test))
            .collect::<Result<Vec<f64>>>()?;
        self.matrix.rows.push(row);
        Ok(TrainLog {
            task_id: id,
            epoch_losses,
            train_accuracy,
        })
    }

    /// Logits `[1 x classes]` of task `id` for one input, through that
    /// task's adapters, trunk and head.
    pub fn route_and_predict(&self, x: &Spectrogram, id: usize) -> Result<Tensor> {
        let pos = self.position(id)?;
        let mut out = logits(&self.route(pos), std::slice::from_ref(x))?;
        Ok(out.remove(0))
    }

    /// Logits for every input of `data` under task `id`.
    pub fn predict_all(&self, data: &Dataset, id: usize) -> Result<Vec<Tensor>> {
        let pos = self.position(id)?;
        logits(&self.route(pos), &data.inputs)
    }

    pub fn accuracy(&self, id: usize, data: &Dataset) -> Result<f64> {
        accuracy(&self.route(self.position(id)?), data)
    }

    /// The accuracy matrix recorded so far, with task names and mode.
    pub fn evaluate_matrix(&self) -> Result<MatrixReport> {
        if self.matrix.stages() == 0 {
            return Err(Error::InvalidArgument("no task has been trained yet".into()));
        }
        Ok(MatrixReport {
            mode: self.cfg.mode,
            task_names: self.tasks.iter().map(|t| t.name.clone()).collect(),
            matrix: self.matrix.clone(),
        })
    }

    /// SHA-256 over the shared trunk's encoded tensors.
    pub fn backbone_checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.backbone.visit("", &mut |name, t| {
            h.update(name.as_bytes());
            h.update(tensor_io::to_bytes(t));
        });
        h.finalize().into()
    }

    /// Writes `run.cfg`, `state.cfg`, `backbone.ckpt` (unless every task
    /// owns its trunk), per task `task_<id>.ckpt` (weights) and
    /// `task_<id>_test.ckpt` (held-out data), and `matrix.txt` once a task
    /// is trained.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.cfg"), self.cfg.to_text())?;
        let ids: Vec<String> = self.tasks.iter().map(|t| t.id.to_string()).collect();
        fs::write(
            dir.join("state.cfg"),
            format!(
                "tasks={}\ntrained={}\n",
                ids.join(","),
                self.tasks.iter().filter(|t| t.trained).count()
            ),
        )?;
        if self.cfg.mode != TrainMode::ModelIncremental {
            let mut ck = Checkpoint::new();
            ck.set_meta("kind", "backbone");
            ck.set_meta("mode", self.cfg.mode);
            ck.set_meta("d", self.cfg.model.embed_dim());
            ck.set_meta("version", FORMAT_VERSION);
            ck.push_set("backbone", &self.backbone);
            ck.save(dir.join("backbone.ckpt"))?;
        }
        for (pos, task) in self.tasks.iter().enumerate() {
            self.task_checkpoint(pos, task).save(dir.join(format!("task_{}.ckpt", task.id)))?;
            test_checkpoint(task).save(dir.join(format!("task_{}_test.ckpt", task.id)))?;
        }
        if self.matrix.stages() > 0 {
            fs::write(dir.join("matrix.txt"), self.evaluate_matrix()?.to_string())?;
        }
        Ok(())
    }

    fn task_checkpoint(&self, pos: usize, task: &TaskState) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "task");
        ck.set_meta("mode", self.cfg.mode);
        ck.set_meta("task_id", task.id);
        ck.set_meta("task_name", &task.name);
        ck.set_meta("d", self.cfg.model.embed_dim());
        ck.set_meta("bottleneck", self.cfg.model.bottleneck);
        ck.set_meta("classes", task.classes);
        ck.set_meta("trained", task.trained);
        ck.set_meta("version", FORMAT_VERSION);
        if let Some(a) = &task.adapters {
            ck.push_set("adapters", a);
        }
        if let Some(m) = &task.model {
            ck.push_set("backbone", m);
        }
        ck.push_set("head", &task.head);
        if let Some(row) = self.matrix.rows().get(pos) {
            ck.push("accuracy_row", Tensor::new(&[row.len()], row.clone()).expect("finite accuracies"));
        }
        ck
    }

    /// Inverse of [`TiclRun::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = RunConfig::from_text(&fs::read_to_string(dir.join("run.cfg"))?)?;
        let state = parse_kv(&fs::read_to_string(dir.join("state.cfg"))?)?;
        let ids: Vec<usize> = match state.get("tasks").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad task id {s:?}"))))
                .collect::<Result<_>>()?,
        };
        let trained: usize = state
            .get("trained")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("state.cfg lacks a valid trained count".into()))?;

        let mut run = TiclRun::new(cfg)?;
        if run.cfg.mode != TrainMode::ModelIncremental {
            let ck = Checkpoint::load(dir.join("backbone.ckpt"))?;
            ck.restore_set("backbone", &mut run.backbone)?;
        }
        for (pos, &id) in ids.iter().enumerate() {
            let ck = Checkpoint::load(dir.join(format!("task_{id}.ckpt")))?;
            if ck.meta_parse::<usize>("task_id")? != id {
                return Err(Error::Format(format!("task_{id}.ckpt holds a different task id")));
            }
            let test = read_test_checkpoint(&Checkpoint::load(dir.join(format!("task_{id}_test.ckpt")))?)?;
            let spec = TaskSpec {
                id,
                name: ck.meta_parse("task_name")?,
                classes: ck.meta_parse("classes")?,
                train: Dataset::default(),
                test,
            };
            run.register_task(spec)?;
            let task = &mut run.tasks[pos];
            ck.restore_set("head", &mut task.head)?;
            if let Some(a) = task.adapters.as_mut() {
                ck.restore_set("adapters", a)?;
            }
            if let Some(m) = task.model.as_mut() {
                ck.restore_set("backbone", m)?;
            }
            task.trained = pos < trained;
            if task.trained {
                let row = ck
                    .tensor("accuracy_row")
                    .ok_or_else(|| Error::Format(format!("task {id} lacks its accuracy row")))?;
                run.matrix.rows.push(row.data().to_vec());
            }
        }
        Ok(run)
    }
}

fn test_checkpoint(task: &TaskState) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "test-set");
    ck.set_meta("task_id", task.id);
    ck.set_meta("len", task.test.len());
    if !task.test.is_empty() {
        ck.push("labels", labels_tensor(&task.test.labels));
    }
    for (k, x) in task.test.inputs.iter().enumerate() {
        ck.push(format!("inputs.{k}"), x.values().clone());
    }
    ck
}

fn read_test_checkpoint(ck: &Checkpoint) -> Result<Dataset> {
    let n: usize = ck.meta_parse("len")?;
    if n == 0 {
        return Ok(Dataset::default());
    }
    let labels = tensor_labels(ck.tensor("labels").ok_or_else(|| Error::Format("missing test labels".into()))?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("expected {n} test labels, found {}", labels.len())));
    }
    let inputs = (0..n)
        .map(|k| {
            let t = ck
                .tensor(&format!("inputs.{k}"))
                .ok_or_else(|| Error::Format(format!("missing test input {k}")))?;
            Spectrogram::new(t.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, labels)
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::new(&[labels.len()], labels.iter().map(|&l| l as f64).collect()).expect("finite labels")
}

fn tensor_labels(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("invalid label {v}")))
            }
        })
        .collect()
}

/// Mean cross-entropy over `batch` and gradients of every trainable tensor
/// in binding order: trunk (if trained), adapters, head.
fn batch_gradients(
    trunk: &Backbone,
    train_trunk: bool,
    adapters: Option<&AdapterSet>,
    head: &Head,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, train_trunk);
    let trunk_vars = trunk.bind(&mut b);
    b.set_trainable(true);
    let adapter_vars = adapters.map(|a| a.bind(&mut b));
    let head_vars = head.bind(&mut b);
    let vars = b.take_trainable();

    let mut rows = Vec::with_capacity(batch.len());
    for &k in batch {
        rows.push(forward(&mut g, &data.inputs[k], &trunk_vars, adapter_vars.as_ref(), &head_vars)?);
    }
    let logits = g.concat_rows(&rows)?;
    let labels: Vec<usize> = batch.iter().map(|&k| data.labels[k]).collect();
    let loss = g.cross_entropy(logits, &labels)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_task" });
    }
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((value, out))
}

fn logits(route: &Route<'_>, inputs: &[Spectrogram]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, false);
        let trunk = route.trunk.bind(&mut b);
        let adapters = route.adapters.map(|a| a.bind(&mut b));
        let head = route.head.bind(&mut b);
        for x in chunk {
            let y = forward(&mut g, x, &trunk, adapters.as_ref(), &head)?;
            out.push(g.value(y).clone());
        }
    }
    Ok(out)
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

fn accuracy(route: &Route<'_>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let correct = logits(route, &data.inputs)?
        .iter()
        .zip(&data.labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
