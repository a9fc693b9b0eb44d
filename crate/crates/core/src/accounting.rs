//! Attention pair counts and closed-form parameter/storage reports.
//!
//! Complexity is counted in attended (query, key) pairs, reported both per
//! channel (`/d`) and multiplied by `d`. Parameter counts are derived from
//! shapes alone, so full-scale configs never need to be instantiated.

use std::fmt;
use std::str::FromStr;

use crate::adapter::{adapter_param_count, AdapterConfig};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::ticl::checkpoint;
use crate::tokenizer::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityReport {
    pub m: u64,
    pub t: u64,
    pub d: u64,
    /// `(MT + 1)^2 * d`
    pub o_gsa: u64,
    /// `(MT (M + T + 1) + 1) * d`
    pub o_fta: u64,
}

impl ComplexityReport {
    pub fn o_gsa_over_d(&self) -> u64 {
        self.o_gsa / self.d
    }

    pub fn o_fta_over_d(&self) -> u64 {
        self.o_fta / self.d
    }

    /// Fraction of global-attention work that factorized attention needs.
    pub fn k(&self) -> f64 {
        self.o_fta as f64 / self.o_gsa as f64
    }

    /// `k` with up to three significant figures and trailing zeros trimmed,
    /// always keeping one decimal (`0.2`, `0.105`, `1.0`).
    pub fn k_display(&self) -> String {
        format_sig3(self.k())
    }
}

fn format_sig3(v: f64) -> String {
    if v == 0.0 {
        return "0.0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(1) as usize;
    let mut s = format!("{v:.decimals$}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

pub fn complexity_report(grid: TokenGrid, d: usize) -> Result<ComplexityReport> {
    if d == 0 {
        return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
    }
    let (m, t, d) = (grid.m as u64, grid.t as u64, d as u64);
    let mt = m * t;
    Ok(ComplexityReport {
        m,
        t,
        d,
        o_gsa: (mt + 1) * (mt + 1) * d,
        o_fta: (mt * (m + t + 1) + 1) * d,
    })
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.m,
            self.t,
            self.o_gsa_over_d(),
            self.o_fta_over_d(),
            self.k_display()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccountingMode {
    /// One model, everything trainable.
    FullFinetune,
    /// Frozen trunk, trainable head only.
    LinearProbe,
    /// One trunk fine-tuned through every task, a head per task.
    ModelSequential,
    /// An independent trunk and head per task.
    ModelIncremental,
    /// One frozen trunk, adapters and a head per task.
    AdapterIncremental,
}

impl FromStr for AccountingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-finetune" => Ok(AccountingMode::FullFinetune),
            "linear" | "linear-probe" => Ok(AccountingMode::LinearProbe),
            "model-seq" => Ok(AccountingMode::ModelSequential),
            "model-inc" => Ok(AccountingMode::ModelIncremental),
            "adapter-inc" => Ok(AccountingMode::AdapterIncremental),
            other => Err(Error::InvalidArgument(format!("unknown accounting mode {other:?}"))),
        }
    }
}

impl fmt::Display for AccountingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccountingMode::FullFinetune => "full",
            AccountingMode::LinearProbe => "linear",
            AccountingMode::ModelSequential => "model-seq",
            AccountingMode::ModelIncremental => "model-inc",
            AccountingMode::AdapterIncremental => "adapter-inc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub name: String,
    pub params: u64,
    pub copies: u64,
    /// Whether this component is trained while learning a single task.
    pub trainable: bool,
}

impl Component {
    pub fn total(&self) -> u64 {
        self.params * self.copies
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub mode: AccountingMode,
    pub components: Vec<Component>,
    /// Parameters held after all tasks are learned.
    pub total: u64,
    /// Parameters updated while learning one task (largest task).
    pub trainable: u64,
    /// `total * 4` (f32 storage).
    pub storage_bytes: u64,
    /// Serialized size of the shared trunk checkpoint, 0 when there is none.
    pub shared_checkpoint_bytes: u64,
    /// Serialized size of each task's checkpoint file.
    pub task_checkpoint_bytes: Vec<u64>,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "{:<24} {:>12} {:>7} {:>14} {:>9}", "component", "params", "copies", "total", "trainable")?;
        for c in &self.components {
            writeln!(
                f,
                "{:<24} {:>12} {:>7} {:>14} {:>9}",
                c.name,
                c.params,
                c.copies,
                c.total(),
                if c.trainable { "yes" } else { "no" }
            )?;
        }
        writeln!(f, "total_params={}", self.total)?;
        writeln!(f, "trainable_params={}", self.trainable)?;
        writeln!(f, "trainable_fraction={:.6}", self.trainable_fraction())?;
        writeln!(f, "storage_bytes_f32={}", self.storage_bytes)?;
        writeln!(f, "shared_checkpoint_bytes={}", self.shared_checkpoint_bytes)?;
        let per_task: Vec<String> = self.task_checkpoint_bytes.iter().map(u64::to_string).collect();
        write!(f, "task_checkpoint_bytes={}", per_task.join(","))
    }
}

/// `(name, shape)` of every tensor in the trunk, in checkpoint order.
pub fn backbone_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim();
    let k = cfg.tokenizer.kernel;
    let hidden = d * cfg.encoder.mlp_ratio;
    let mut out = vec![
        ("patch.kernel".to_string(), vec![d, cfg.tokenizer.in_channels, k, k]),
        ("patch.bias".to_string(), vec![d]),
        ("patch.cls".to_string(), vec![1, d]),
        ("patch.pos".to_string(), vec![cfg.pos_grid.seq_len(), d]),
    ];
    for l in 0..cfg.encoder.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for proj in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
            out.push((p(&format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("mlp.fc1.weight"), vec![d, hidden]));
        out.push((p("mlp.fc1.bias"), vec![hidden]));
        out.push((p("mlp.fc2.weight"), vec![hidden, d]));
        out.push((p("mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.gamma".to_string(), vec![d]));
    out.push(("norm.beta".to_string(), vec![d]));
    out
}

pub fn head_shapes(d: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.weight".to_string(), vec![d, classes]),
        ("head.bias".to_string(), vec![classes]),
    ]
}

pub fn adapter_shapes(cfg: &AdapterConfig, layers: usize) -> Vec<(String, Vec<usize>)> {
    let (d, b) = (cfg.dim, cfg.bottleneck);
    let mut out = Vec::new();
    for l in 0..layers {
        for side in ["attn_side", "mlp_side"] {
            let p = |s: &str| format!("adapters.layers.{l}.{side}.{s}");
            out.push((p("down.weight"), vec![d, b]));
            out.push((p("down.bias"), vec![b]));
            out.push((p("conv.kernel"), vec![b, b, 3, 3]));
            out.push((p("conv.bias"), vec![b]));
            out.push((p("up.weight"), vec![b, d]));
            out.push((p("up.bias"), vec![d]));
        }
    }
    out
}

fn count(shapes: &[(String, Vec<usize>)]) -> u64 {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
}

/// Closed-form parameter and storage report after learning one task per
/// entry of `task_classes`.
pub fn param_report(cfg: &ModelConfig, mode: AccountingMode, task_classes: &[usize]) -> Result<ParamReport> {
    cfg.validate()?;
    if task_classes.is_empty() || task_classes.contains(&0) {
        return Err(Error::InvalidArgument("need at least one task with >= 1 class".into()));
    }
    let d = cfg.embed_dim();
    let trunk_shapes = backbone_shapes(cfg);
    let trunk = count(&trunk_shapes);
    let tasks = task_classes.len() as u64;
    let heads: Vec<u64> = task_classes.iter().map(|&c| count(&head_shapes(d, c))).collect();
    let heads_total: u64 = heads.iter().sum();
    let max_head = *heads.iter().max().unwrap();
    let acfg = AdapterConfig::new(d, cfg.bottleneck)?;
    let adapters = adapter_param_count(&acfg, cfg.encoder.layers) as u64;

    let dtype = DType::F32;
    let trunk_bytes = checkpoint::encoded_len(&trunk_shapes, dtype) as u64;
    let head_bytes = |c: usize| checkpoint::encoded_len(&head_shapes(d, c), dtype) as u64;
    let adapter_bytes = |c: usize| {
        let mut shapes = adapter_shapes(&acfg, cfg.encoder.layers);
        shapes.extend(head_shapes(d, c));
        checkpoint::encoded_len(&shapes, dtype) as u64
    };
    let model_bytes = |c: usize| {
        let mut shapes = trunk_shapes.clone();
        shapes.extend(head_shapes(d, c));
        checkpoint::encoded_len(&shapes, dtype) as u64
    };

    let comp = |name: &str, params: u64, copies: u64, trainable: bool| Component {
        name: name.to_string(),
        params,
        copies,
        trainable,
    };
    let (components, trainable, shared, per_task) = match mode {
        AccountingMode::FullFinetune => (
            vec![comp("backbone", trunk, 1, true), comp("heads", heads_total, 1, true)],
            trunk + max_head,
            0,
            task_classes.iter().map(|&c| model_bytes(c)).collect(),
        ),
        AccountingMode::LinearProbe => (
            vec![comp("backbone", trunk, 1, false), comp("heads", heads_total, 1, true)],
            max_head,
            trunk_bytes,
            task_classes.iter().map(|&c| head_bytes(c)).collect(),
        ),
        AccountingMode::ModelSequential => (
            vec![comp("backbone", trunk, 1, true), comp("heads", heads_total, 1, true)],
            trunk + max_head,
            trunk_bytes,
            task_classes.iter().map(|&c| head_bytes(c)).collect(),
        ),
        AccountingMode::ModelIncremental => (
            vec![comp("backbone", trunk, tasks, true), comp("heads", heads_total, 1, true)],
            trunk + max_head,
            0,
            task_classes.iter().map(|&c| model_bytes(c)).collect(),
        ),
        AccountingMode::AdapterIncremental => (
            vec![
                comp("backbone", trunk, 1, false),
                comp("adapters", adapters, tasks, true),
                comp("heads", heads_total, 1, true),
            ],
            adapters + max_head,
            trunk_bytes,
            task_classes.iter().map(|&c| adapter_bytes(c)).collect(),
        ),
    };
    let total: u64 = components.iter().map(Component::total).sum();
    Ok(ParamReport {
        mode,
        components,
        total,
        trainable,
        storage_bytes: total * dtype.size_of() as u64,
        shared_checkpoint_bytes: shared,
        task_checkpoint_bytes: per_task,
    })
}

/// Class counts of the three reference tasks (speech commands, environmental
/// sounds, audio-visual events), cycled for more tasks.
pub const REFERENCE_TASK_CLASSES: [usize; 3] = [35, 50, 28];

pub fn reference_task_classes(tasks: usize) -> Vec<usize> {
    (0..tasks).map(|i| REFERENCE_TASK_CLASSES[i % 3]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows() {
        let rows = [((12, 9), 11881, 2377, "0.2"), ((12, 49), 346921, 36457, "0.105"), ((12, 100), 1442401, 135601, "0.094")];
        for ((m, t), gsa, fta, k) in rows {
            let r = complexity_report(TokenGrid { m, t }, 768).unwrap();
            assert_eq!(r.o_gsa_over_d(), gsa);
            assert_eq!(r.o_fta_over_d(), fta);
            assert_eq!(r.o_gsa, gsa * 768);
            assert_eq!(r.k_display(), k);
        }
    }

    #[test]
    fn degenerate_grid() {
        let r = complexity_report(TokenGrid { m: 1, t: 1 }, 5).unwrap();
        assert_eq!((r.o_gsa_over_d(), r.o_fta_over_d()), (4, 4));
        assert_eq!(r.k(), 1.0);
        assert_eq!(r.to_string(), "1 1 4 4 1.0");
        assert!(complexity_report(TokenGrid { m: 1, t: 1 }, 0).is_err());
    }

    #[test]
    fn sig3_formatting() {
        assert_eq!(format_sig3(0.19998), "0.2");
        assert_eq!(format_sig3(0.105087), "0.105");
        assert_eq!(format_sig3(0.0940099), "0.094");
        assert_eq!(format_sig3(1.0), "1.0");
    }

    #[test]
    fn paper_full_single_model() {
        let r = param_report(&ModelConfig::paper_full(), AccountingMode::FullFinetune, &[35]).unwrap();
        assert_eq!(r.component("backbone").unwrap().params, 86_090_496);
        assert_eq!(r.total, 86_090_496 + 768 * 35 + 35);
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in [
            AccountingMode::FullFinetune,
            AccountingMode::LinearProbe,
            AccountingMode::ModelSequential,
            AccountingMode::ModelIncremental,
            AccountingMode::AdapterIncremental,
        ] {
            assert_eq!(m.to_string().parse::<AccountingMode>().unwrap(), m);
        }
    }
}
