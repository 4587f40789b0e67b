//! Fine-tuning variants: Adapter I (a one-layer shortcut block beside the
//! frozen backbone plus an output block merging both), Adapter II
//! (bottleneck inserts before each LayerNorm), freeze partitions and
//! parameter accounting.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    init_layer, init_linear, AdapterKind, Architecture, Model, ModelConfig, ModelParams, TaskSpec,
};
use crate::tensor::Tensor;

pub const DEFAULT_BOTTLENECK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Full,
    Adapter1,
    Adapter2,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Full => "full",
            FinetuneMode::Adapter1 => "adapter1",
            FinetuneMode::Adapter2 => "adapter2",
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "adapter1" => Ok(FinetuneMode::Adapter1),
            "adapter2" => Ok(FinetuneMode::Adapter2),
            other => Err(Error::Config(format!("unknown fine-tune mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub mode: FinetuneMode,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub elements: usize,
    pub trainable: bool,
}

/// Document written as `partition.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub mode: FinetuneMode,
    pub trainable: usize,
    pub frozen: usize,
    pub reduction_fraction: f64,
    pub per_tensor: Vec<TensorEntry>,
}

fn is_pretrain_head(name: &str) -> bool {
    ["head.mlm.", "head.nsp.", "head.caption."]
        .iter()
        .any(|p| name.starts_with(p))
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("emb.") || name.starts_with("vis.") || name.starts_with("layer.")
}

fn is_layer_norm(name: &str) -> bool {
    name.starts_with("layer.") && (name.contains(".ln1.") || name.contains(".ln2."))
}

fn is_bottleneck(name: &str) -> bool {
    name.starts_with("layer.") && name.contains(".adapter.")
}

/// Name-based trainable rule; `None` when no rule covers the name.
fn rule(mode: FinetuneMode, name: &str) -> Option<bool> {
    let known = is_backbone(name)
        || is_pretrain_head(name)
        || name.starts_with("head.task.")
        || name.starts_with("adapter1.");
    if !known {
        return None;
    }
    match mode {
        FinetuneMode::Full => Some(true),
        FinetuneMode::Adapter1 => {
            if name.starts_with("adapter1.") || name.starts_with("head.task.") {
                Some(true)
            } else if is_bottleneck(name) {
                None
            } else {
                Some(false)
            }
        }
        FinetuneMode::Adapter2 => {
            if name.starts_with("adapter1.") {
                None
            } else {
                Some(is_bottleneck(name) || is_layer_norm(name) || name.starts_with("head.task."))
            }
        }
    }
}

pub fn partition_parameters(params: &ModelParams, mode: FinetuneMode) -> Result<ParameterPartition> {
    let mut p = ParameterPartition {
        mode,
        trainable: BTreeSet::new(),
        frozen: BTreeSet::new(),
        trainable_count: 0,
        frozen_count: 0,
    };
    for (name, t) in params.iter() {
        match rule(mode, name) {
            None => return Err(Error::UnknownParameter(name.to_string())),
            Some(true) => {
                p.trainable.insert(name.to_string());
                p.trainable_count += t.len();
            }
            Some(false) => {
                p.frozen.insert(name.to_string());
                p.frozen_count += t.len();
            }
        }
    }
    Ok(p)
}

/// Sets every tensor's trainable flag from the partition.
pub fn apply_partition(params: &mut ModelParams, partition: &ParameterPartition) -> Result<()> {
    for name in &partition.trainable {
        params.set_trainable(name, true)?;
    }
    for name in &partition.frozen {
        params.set_trainable(name, false)?;
    }
    Ok(())
}

pub fn count_parameters(params: &ModelParams, partition: &ParameterPartition) -> PartitionReport {
    let per_tensor = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            elements: t.len(),
            trainable: partition.trainable.contains(name),
        })
        .collect();
    let total = partition.trainable_count + partition.frozen_count;
    PartitionReport {
        mode: partition.mode,
        trainable: partition.trainable_count,
        frozen: partition.frozen_count,
        reduction_fraction: if total == 0 {
            0.0
        } else {
            1.0 - partition.trainable_count as f64 / total as f64
        },
        per_tensor,
    }
}

/// Pre-trained backbone without the pre-training heads.
fn backbone_params(pretrained: &Model) -> ModelParams {
    let mut p = pretrained.params.clone();
    let heads: Vec<String> = p
        .names()
        .filter(|n| is_pretrain_head(n) || n.starts_with("head.task."))
        .map(str::to_string)
        .collect();
    for n in heads {
        p.remove(&n);
    }
    p
}

fn check_pretrained(model: &Model) -> Result<()> {
    if model.arch.adapter != AdapterKind::None {
        return Err(Error::Config(
            "adapters must be built on a plain pre-trained backbone".into(),
        ));
    }
    Ok(())
}

/// Task head on `[E' ; F']` for classification; retrieval needs none.
fn add_task_head<R: Rng + ?Sized>(p: &mut ModelParams, cfg: &ModelConfig, task: TaskSpec, rng: &mut R) {
    if let TaskSpec::Classification { classes } = task {
        init_linear(p, "head.task", 2 * cfg.hidden, classes, cfg.init_std, rng);
    }
}

/// Output dimension of Adapter I's output block.
pub fn adapter1_task_dim(cfg: &ModelConfig, task: TaskSpec) -> usize {
    match task {
        TaskSpec::Retrieval => cfg.hidden,
        TaskSpec::Classification { classes } => classes,
    }
}

fn finish(
    cfg: &ModelConfig,
    mut params: ModelParams,
    arch: Architecture,
    mode: FinetuneMode,
) -> Result<(Model, ParameterPartition)> {
    let partition = partition_parameters(&params, mode)?;
    apply_partition(&mut params, &partition)?;
    Ok((Model::from_parts(cfg.clone(), params, arch)?, partition))
}

/// Backbone frozen; one-layer shortcut over the fused input embeddings and
/// an output block `linear(2D->D) -> GELU -> linear(D->task)` trainable.
pub fn build_adapter1<R: Rng + ?Sized>(
    pretrained: &Model,
    task: TaskSpec,
    rng: &mut R,
) -> Result<(Model, ParameterPartition)> {
    check_pretrained(pretrained)?;
    let cfg = &pretrained.config;
    let mut p = backbone_params(pretrained);
    init_layer(&mut p, "adapter1.shortcut", cfg, rng);
    init_linear(&mut p, "adapter1.out.1", 2 * cfg.hidden, cfg.hidden, cfg.init_std, rng);
    init_linear(
        &mut p,
        "adapter1.out.2",
        cfg.hidden,
        adapter1_task_dim(cfg, task),
        cfg.init_std,
        rng,
    );
    let arch = Architecture {
        adapter: AdapterKind::AdapterI,
        task: Some(task),
    };
    finish(cfg, p, arch, FinetuneMode::Adapter1)
}

/// Two bottleneck adapters per layer (after attention, after FFN); the
/// up-projection starts at zero so the initial forward equals the backbone's.
pub fn build_adapter2<R: Rng + ?Sized>(
    pretrained: &Model,
    bottleneck: usize,
    task: TaskSpec,
    rng: &mut R,
) -> Result<(Model, ParameterPartition)> {
    check_pretrained(pretrained)?;
    let cfg = &pretrained.config;
    if bottleneck < 1 || bottleneck >= cfg.hidden {
        return Err(Error::InvalidBottleneck {
            bottleneck,
            hidden: cfg.hidden,
        });
    }
    let mut p = backbone_params(pretrained);
    for l in 0..cfg.layers {
        for which in ["attn", "ffn"] {
            let base = format!("layer.{l}.adapter.{which}");
            init_linear(&mut p, &format!("{base}.down"), cfg.hidden, bottleneck, cfg.init_std, rng);
            p.insert(format!("{base}.up.w"), Tensor::zeros(&[bottleneck, cfg.hidden]));
            p.insert(format!("{base}.up.b"), Tensor::zeros(&[cfg.hidden]));
        }
    }
    add_task_head(&mut p, cfg, task, rng);
    let arch = Architecture {
        adapter: AdapterKind::AdapterII { bottleneck },
        task: Some(task),
    };
    finish(cfg, p, arch, FinetuneMode::Adapter2)
}

/// Every backbone tensor trainable, pre-training heads dropped.
pub fn build_full<R: Rng + ?Sized>(
    pretrained: &Model,
    task: TaskSpec,
    rng: &mut R,
) -> Result<(Model, ParameterPartition)> {
    check_pretrained(pretrained)?;
    let cfg = &pretrained.config;
    let mut p = backbone_params(pretrained);
    add_task_head(&mut p, cfg, task, rng);
    let arch = Architecture {
        adapter: AdapterKind::None,
        task: Some(task),
    };
    finish(cfg, p, arch, FinetuneMode::Full)
}

pub fn build_finetune_model<R: Rng + ?Sized>(
    pretrained: &Model,
    mode: FinetuneMode,
    bottleneck: usize,
    task: TaskSpec,
    rng: &mut R,
) -> Result<(Model, ParameterPartition)> {
    match mode {
        FinetuneMode::Full => build_full(pretrained, task, rng),
        FinetuneMode::Adapter1 => build_adapter1(pretrained, task, rng),
        FinetuneMode::Adapter2 => build_adapter2(pretrained, bottleneck, task, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn pretrained() -> Model {
        Model::new(ModelConfig::default(), &mut stream(1, domain::INIT, 0)).unwrap()
    }

    #[test]
    fn bottleneck_bounds() {
        let m = pretrained();
        let mut rng = stream(1, domain::ADAPTER, 0);
        for bad in [0, 64, 65] {
            assert!(matches!(
                build_adapter2(&m, bad, TaskSpec::Retrieval, &mut rng),
                Err(Error::InvalidBottleneck { .. })
            ));
        }
    }

    #[test]
    fn unknown_name_rejected() {
        let mut p = pretrained().params;
        p.insert("mystery.w", Tensor::zeros(&[2]));
        assert!(matches!(
            partition_parameters(&p, FinetuneMode::Full),
            Err(Error::UnknownParameter(n)) if n == "mystery.w"
        ));
    }

    #[test]
    fn full_mode_freezes_nothing() {
        let m = pretrained();
        let part = partition_parameters(&m.params, FinetuneMode::Full).unwrap();
        assert!(part.frozen.is_empty());
        let r = count_parameters(&m.params, &part);
        assert_eq!(r.reduction_fraction, 0.0);
        assert_eq!(r.trainable, m.params.total_elements());
    }

    #[test]
    fn adapter2_freezes_attention_and_ffn() {
        let m = pretrained();
        let (ft, part) = build_adapter2(&m, 8, TaskSpec::Retrieval, &mut stream(1, domain::ADAPTER, 0)).unwrap();
        for name in ft.params.names() {
            if name.contains(".attn.") || name.contains(".ffn.") {
                if !name.contains(".adapter.") {
                    assert!(part.frozen.contains(name), "{name}");
                }
            }
        }
        assert!(part.trainable.contains("layer.0.ln1.g"));
        assert!(part.trainable.contains("layer.3.adapter.ffn.up.w"));
        assert_eq!(part.trainable.len() + part.frozen.len(), ft.params.len());
        assert!(part.trainable.is_disjoint(&part.frozen));
        for (name, t) in ft.params.iter() {
            assert_eq!(t.requires_grad, part.trainable.contains(name));
        }
    }

    #[test]
    fn pretrain_heads_dropped() {
        let m = pretrained();
        let (ft, _) = build_adapter1(&m, TaskSpec::Retrieval, &mut stream(1, domain::ADAPTER, 0)).unwrap();
        assert!(!ft.has_pretrain_heads());
        assert!(!ft.params.contains("head.mlm.w"));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [FinetuneMode::Full, FinetuneMode::Adapter1, FinetuneMode::Adapter2] {
            assert_eq!(m.as_str().parse::<FinetuneMode>().unwrap(), m);
        }
        assert!("adapter3".parse::<FinetuneMode>().is_err());
    }
}
