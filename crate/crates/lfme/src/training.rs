//! End-to-end training pipelines: per-subset experts, the plain baseline,
//! and the distilled student with both adaptive schedules.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::distribution::{self, ClassDistribution, Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{self, CardinalitySplit, ComparisonRow, Subset};
use crate::neural::{
    self, loss_and_gradients, DenseNet, ExpertTerm, LossConfig, SgdConfig, SgdState,
};
use crate::sampling::{self, SamplerMode};
use crate::schedules::{self, ExpertWeightState, ScheduleKind};
use crate::DenseNet64;

/// One training stage's hyperparameters. Defaults follow the reference
/// recipe: momentum 0.9, weight decay 5e-4, distillation temperature 2,
/// expert weight threshold alpha 0.6, linear curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub schedule: ScheduleKind,
    pub kd_t2_scaling: bool,
    pub sampler: SamplerMode,
    /// When set, overrides `sampler`: instance-level before this epoch,
    /// class-balanced at and after.
    pub deferred_switch_epoch: Option<usize>,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 0.1,
            lr_milestones: vec![],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 2.0,
            alpha: 0.6,
            schedule: ScheduleKind::Linear,
            kd_t2_scaling: false,
            sampler: SamplerMode::InstanceRandom,
            deferred_switch_epoch: None,
            seed: 0,
            hidden_dims: vec![32],
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay_factor.powi(hits as i32)
    }

    fn sampler_at(&self, epoch: usize) -> SamplerMode {
        match self.deferred_switch_epoch {
            Some(switch) => sampling::deferred_schedule(switch, epoch),
            None => self.sampler,
        }
    }
}

/// Maps class ids to contiguous output indices (sorted id order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIndex {
    ids: Vec<u32>,
}

impl ClassIndex {
    pub fn from_distribution(dist: &ClassDistribution) -> Self {
        let mut ids: Vec<u32> = dist.counts().iter().map(|&(id, _)| id).collect();
        ids.sort_unstable();
        Self { ids }
    }

    pub fn from_subset(subset: &Subset) -> Self {
        Self {
            ids: subset.class_ids.clone(), // already sorted
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.ids.binary_search(&class_id).ok()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Frozen experts plus everything the student trainer needs from them.
#[derive(Debug, Clone)]
pub struct ExpertBundle {
    pub split: CardinalitySplit,
    pub experts: Vec<DenseNet64>,
    /// Subset-restricted validation top-1, computed once after training.
    pub expert_val_acc: Vec<f64>,
    /// (instance_id, expert confidence for the true class), train instances
    /// in dataset order.
    pub confidences: Vec<(u64, f64)>,
}

/// Per-split accuracy table (fewest-shot subset first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub per_subset: Vec<f64>,
    pub counts: Vec<usize>,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub expert_weights: Vec<f64>,
    pub val_acc: f64,
    pub val_acc_per_subset: Vec<f64>,
    pub mean_v_per_subset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub val: SplitAccuracy,
    pub test: SplitAccuracy,
}

/// How the student trainer's adaptive schedules may be pinned for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentOptions {
    pub fixed_expert_weight: Option<f64>,
    pub fixed_instance_weight: Option<f64>,
}

impl StudentOptions {
    pub fn from_ablation(ablation: Option<Ablation>) -> Self {
        Self::from_ablations(ablation.as_slice())
    }

    /// Combine any number of ablation arms (e.g. `no-spes` + `no-curriculum`
    /// together give the plain class-balanced KD arm).
    pub fn from_ablations(ablations: &[Ablation]) -> Self {
        let mut options = Self::default();
        for ablation in ablations {
            match ablation {
                Ablation::NoSpes => options.fixed_expert_weight = Some(1.0),
                Ablation::NoCurriculum => options.fixed_instance_weight = Some(1.0),
            }
        }
        options
    }
}

/// Top-1 accuracy of a model over one partition, reported per subset and
/// overall. The model's output index for class id c is `class_index`'s
/// position for c; instances whose labels the model does not cover count
/// as errors.
pub fn evaluate(
    net: &DenseNet64,
    dataset: &Dataset,
    split: &CardinalitySplit,
    partition: Partition,
    class_index: &ClassIndex,
) -> Result<SplitAccuracy> {
    let num_subsets = split.num_subsets();
    let mut correct = vec![0usize; num_subsets];
    let mut counts = vec![0usize; num_subsets];
    let mut correct_all = 0usize;
    let mut total = 0usize;
    for inst in dataset.partition(partition) {
        let Some(l) = split.subset_of(inst.label) else {
            continue;
        };
        let logits = net.forward(&inst.features)?;
        let pred = argmax(&logits);
        let hit = class_index.index_of(inst.label) == Some(pred);
        counts[l] += 1;
        total += 1;
        if hit {
            correct[l] += 1;
            correct_all += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation(format!(
            "no {partition} instances to evaluate"
        )));
    }
    let per_subset = correct
        .iter()
        .zip(counts.iter())
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(SplitAccuracy {
        per_subset,
        counts,
        all: correct_all as f64 / total as f64,
    })
}

/// The student's validation accuracy on one subset's labels (full C-way
/// argmax). Same definition as the corresponding `evaluate` entry.
pub fn student_subset_accuracy(
    net: &DenseNet64,
    dataset: &Dataset,
    split: &CardinalitySplit,
    subset_idx: usize,
    class_index: &ClassIndex,
) -> Result<f64> {
    let acc = evaluate(net, dataset, split, Partition::Val, class_index)?;
    if acc.counts[subset_idx] == 0 {
        return Err(Error::Validation(format!(
            "subset {subset_idx} has no validation instances"
        )));
    }
    Ok(acc.per_subset[subset_idx])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// |S_l|-way accuracy of an expert on validation instances of its subset.
fn expert_accuracy(
    net: &DenseNet64,
    dataset: &Dataset,
    subset_index: &ClassIndex,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in dataset.partition(Partition::Val) {
        let Some(target) = subset_index.index_of(inst.label) else {
            continue;
        };
        let logits = net.forward(&inst.features)?;
        total += 1;
        if argmax(&logits) == target {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("subset has no validation instances".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Train one expert on the subset's train instances with plain CE and
/// instance-level random sampling; labels are remapped to 0..|S_l|-1 by
/// sorted class id.
pub fn train_expert(
    dataset: &Dataset,
    subset: &Subset,
    config: &TrainConfig,
) -> Result<(DenseNet64, f64)> {
    let subset_index = ClassIndex::from_subset(subset);
    if subset_index.is_empty() {
        return Err(Error::Validation("empty subset".into()));
    }
    let ids: Vec<u64> = dataset
        .partition(Partition::Train)
        .filter(|i| subset_index.index_of(i.label).is_some())
        .map(|i| i.id)
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation("subset has no train instances".into()));
    }

    let dims = net_dims(dataset.feature_dim(), &config.hidden_dims, subset_index.len());
    let mut net = DenseNet::init(&dims, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut opt = SgdState::new(&net);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let loss_cfg = LossConfig::new(config.temperature);

    for epoch in 1..=config.epochs {
        let batches = sampling::instance_batches_from_ids(&ids, config.batch_size, &mut sample_rng)?;
        let sgd = SgdConfig {
            lr: config.lr_at(epoch),
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        for batch in batches {
            let (features, labels) = gather(dataset, &batch, &subset_index)?;
            let v = vec![1.0; features.len()];
            let (_, grads) =
                loss_and_gradients(&net, &features, &labels, &v, &[], &[], &loss_cfg)?;
            neural::sgd_step(&mut net, &grads, &mut opt, &sgd);
        }
    }
    let acc = expert_accuracy(&net, dataset, &subset_index)?;
    Ok((net, acc))
}

/// Train all experts for a split (expert l seeded from `config.seed + l + 1`)
/// and extract per-instance confidences.
pub fn train_experts(
    dataset: &Dataset,
    split: &CardinalitySplit,
    config: &TrainConfig,
) -> Result<ExpertBundle> {
    let mut experts = Vec::new();
    let mut expert_val_acc = Vec::new();
    for (l, subset) in split.subsets.iter().enumerate() {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(l as u64 + 1),
            ..config.clone()
        };
        let (net, acc) = train_expert(dataset, subset, &cfg)?;
        experts.push(net);
        expert_val_acc.push(acc);
    }
    let confidences = schedules::compute_confidences(&experts, split, dataset)?;
    Ok(ExpertBundle {
        split: split.clone(),
        experts,
        expert_val_acc,
        confidences,
    })
}

fn net_dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(out);
    dims
}

fn gather(
    dataset: &Dataset,
    ids: &[u64],
    class_index: &ClassIndex,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut features = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let inst = dataset
            .instance(id)
            .ok_or_else(|| Error::Validation(format!("unknown instance id {id}")))?;
        let label = class_index.index_of(inst.label).ok_or_else(|| {
            Error::Validation(format!("label {} not covered by model", inst.label))
        })?;
        features.push(inst.features.clone());
        labels.push(label);
    }
    Ok((features, labels))
}

/// Plain C-way baseline: CE only, sampler per config.
pub fn train_plain(
    dataset: &Dataset,
    split: &CardinalitySplit,
    config: &TrainConfig,
) -> Result<(DenseNet64, TrainReport)> {
    train_core(dataset, split, config, None, &StudentOptions::default())
}

/// LFME student: class-balanced batches, weighted CE with curriculum
/// instance weights, plus per-expert distillation with self-paced weights
/// updated at the end of each epoch.
pub fn train_student(
    dataset: &Dataset,
    experts: &ExpertBundle,
    config: &TrainConfig,
    options: &StudentOptions,
) -> Result<(DenseNet64, TrainReport)> {
    train_core(dataset, split_check(experts)?, config, Some(experts), options)
}

fn split_check(experts: &ExpertBundle) -> Result<&CardinalitySplit> {
    if experts.experts.len() != experts.split.num_subsets()
        || experts.expert_val_acc.len() != experts.split.num_subsets()
    {
        return Err(Error::Shape("expert bundle does not match its split".into()));
    }
    Ok(&experts.split)
}

fn train_core(
    dataset: &Dataset,
    split: &CardinalitySplit,
    config: &TrainConfig,
    teachers: Option<&ExpertBundle>,
    options: &StudentOptions,
) -> Result<(DenseNet64, TrainReport)> {
    let dist = dataset.train_distribution()?;
    let class_index = ClassIndex::from_distribution(&dist);
    let dims = net_dims(dataset.feature_dim(), &config.hidden_dims, class_index.len());
    let mut net = DenseNet::init(&dims, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut opt = SgdState::new(&net);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let loss_cfg = LossConfig {
        temperature: config.temperature,
        kd_t2_scaling: config.kd_t2_scaling,
    };

    let train_ids: Vec<u64> = dataset.partition(Partition::Train).map(|i| i.id).collect();
    let ids_by_class = sampling::train_ids_by_class(dataset);
    let num_experts = teachers.map_or(0, |t| t.experts.len());

    // Student logit indices covered by each expert.
    let slices: Vec<Vec<usize>> = split
        .subsets
        .iter()
        .map(|s| {
            s.class_ids
                .iter()
                .map(|&id| {
                    class_index
                        .index_of(id)
                        .ok_or_else(|| Error::Validation(format!("class {id} missing from train set")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // Initial curriculum weights v^(1) = p_i * N_{S_min} / N_{S_l}.
    let min_avg = split.min_avg_shot();
    let mut v1: BTreeMap<u64, f64> = BTreeMap::new();
    let mut subset_of_instance: BTreeMap<u64, usize> = BTreeMap::new();
    if let Some(bundle) = teachers {
        for &(id, p) in &bundle.confidences {
            let inst = dataset
                .instance(id)
                .ok_or_else(|| Error::Validation(format!("confidence for unknown id {id}")))?;
            let l = split
                .subset_of(inst.label)
                .ok_or_else(|| Error::Validation(format!("label {} not in split", inst.label)))?;
            let w1 = schedules::initial_instance_weight(p, min_avg, split.subsets[l].avg_shot)?;
            v1.insert(id, w1);
            subset_of_instance.insert(id, l);
        }
    }

    // Frozen teachers: logits per instance are cached on first use.
    let mut logit_cache: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();

    let mut weight_states: Vec<ExpertWeightState<f64>> = teachers
        .map(|t| {
            t.expert_val_acc
                .iter()
                .map(|&acc| ExpertWeightState::new(acc, config.alpha))
                .collect()
        })
        .unwrap_or_default();

    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        // (a) curriculum weights for this epoch, stateless from v^(1)
        let current_v: BTreeMap<u64, f64> = if teachers.is_some() {
            v1.iter()
                .map(|(&id, &w1)| {
                    let v = match options.fixed_instance_weight {
                        Some(fixed) => fixed,
                        None => schedules::schedule_value(config.schedule, w1, epoch, config.epochs)?,
                    };
                    Ok((id, v))
                })
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let w: Vec<f64> = weight_states
            .iter()
            .map(|s| options.fixed_expert_weight.unwrap_or(s.current))
            .collect();

        // (b) one epoch of batches
        let batches = match config.sampler_at(epoch) {
            SamplerMode::InstanceRandom => {
                sampling::instance_batches_from_ids(&train_ids, config.batch_size, &mut sample_rng)?
            }
            SamplerMode::ClassBalanced => {
                let epoch_len = train_ids.len().div_ceil(config.batch_size);
                sampling::class_balanced_batches_from_ids(
                    &ids_by_class,
                    config.batch_size,
                    epoch_len,
                    &mut sample_rng,
                )?
            }
        };
        let sgd = SgdConfig {
            lr: config.lr_at(epoch),
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };

        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_kd = 0.0;
        let num_batches = batches.len();
        for batch in batches {
            let (features, labels) = gather(dataset, &batch, &class_index)?;
            let v: Vec<f64> = if teachers.is_some() {
                batch
                    .iter()
                    .map(|id| {
                        current_v.get(id).copied().ok_or_else(|| {
                            Error::Validation(format!("no curriculum weight for instance {id}"))
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                vec![1.0; batch.len()]
            };
            let expert_terms: Vec<ExpertTerm<f64>> = if let Some(bundle) = teachers {
                (0..num_experts)
                    .map(|l| {
                        let logits = batch
                            .iter()
                            .zip(features.iter())
                            .map(|(&id, x)| {
                                if let Some(cached) = logit_cache.get(&id) {
                                    return Ok(cached[l].clone());
                                }
                                let all: Vec<Vec<f64>> = bundle
                                    .experts
                                    .iter()
                                    .map(|e| e.forward(x))
                                    .collect::<Result<_>>()?;
                                let out = all[l].clone();
                                logit_cache.insert(id, all);
                                Ok(out)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(ExpertTerm {
                            logits,
                            slice: slices[l].clone(),
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };

            let (loss, grads) =
                loss_and_gradients(&net, &features, &labels, &v, &expert_terms, &w, &loss_cfg)?;
            sum_total += loss.total;
            sum_ce += loss.weighted_ce;
            sum_kd += loss.total - loss.weighted_ce;
            neural::sgd_step(&mut net, &grads, &mut opt, &sgd);
        }

        // (c) end of epoch: validate, then update each expert weight
        let val = evaluate(&net, dataset, split, Partition::Val, &class_index)?;
        for (l, state) in weight_states.iter_mut().enumerate() {
            state.update(val.per_subset[l]);
        }
        let mean_v_per_subset = mean_v_by_subset(&current_v, &subset_of_instance, split);
        records.push(EpochRecord {
            epoch,
            loss_total: sum_total / num_batches as f64,
            loss_ce: sum_ce / num_batches as f64,
            loss_kd: sum_kd / num_batches as f64,
            expert_weights: w,
            val_acc: val.all,
            val_acc_per_subset: val.per_subset,
            mean_v_per_subset,
        });
    }

    let val = evaluate(&net, dataset, split, Partition::Val, &class_index)?;
    let test = evaluate(&net, dataset, split, Partition::Test, &class_index)?;
    Ok((
        net,
        TrainReport {
            epochs: records,
            val,
            test,
        },
    ))
}

fn mean_v_by_subset(
    current_v: &BTreeMap<u64, f64>,
    subset_of_instance: &BTreeMap<u64, usize>,
    split: &CardinalitySplit,
) -> Vec<f64> {
    let mut sums = vec![0.0; split.num_subsets()];
    let mut counts = vec![0usize; split.num_subsets()];
    for (id, &v) in current_v {
        if let Some(&l) = subset_of_instance.get(id) {
            sums[l] += v;
            counts[l] += 1;
        }
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(&s, &n)| if n == 0 { 1.0 } else { s / n as f64 })
        .collect()
}

/// Full report written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub thresholds: Vec<u64>,
    pub metrics: Vec<ComparisonRow<f64>>,
    pub expert_val_acc: Vec<f64>,
    pub plain: TrainReport,
    pub student: TrainReport,
}

/// Artifact file describing trained experts (checkpoints live next to it).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertsArtifact {
    pub split: CardinalitySplit,
    pub expert_val_acc: Vec<f64>,
    pub confidences: Vec<(u64, f64)>,
}

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const EXPERTS_FILE: &str = "experts.json";
pub const PLAIN_CKPT: &str = "plain.ckpt";
pub const PLAIN_REPORT: &str = "plain_report.json";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Generate (or load) the run's dataset and write data artifacts.
pub fn stage_data(config: &RunConfig, run_dir: &Path) -> Result<(Dataset, ClassDistribution)> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    std::fs::write(run_dir.join(CONFIG_FILE), config.to_toml()?)
        .map_err(|e| Error::io(run_dir.join(CONFIG_FILE), e))?;
    let dataset_path = run_dir.join(DATASET_FILE);
    if dataset_path.exists() {
        let dataset = distribution::load_dataset(&dataset_path)?;
        let dist = dataset.train_distribution()?;
        return Ok((dataset, dist));
    }
    let (dataset, dist) = distribution::generate(&config.generator)?;
    distribution::save_dataset(&dataset, &dataset_path)?;
    distribution::save_manifest(&dist, run_dir.join(MANIFEST_FILE))?;
    Ok((dataset, dist))
}

/// Train experts for the run and persist checkpoints plus `experts.json`.
pub fn stage_experts(
    config: &RunConfig,
    run_dir: &Path,
    dataset: &Dataset,
    dist: &ClassDistribution,
) -> Result<ExpertBundle> {
    let thresholds = config.split.resolve(dist)?;
    let split = metrics::split_by_thresholds(dist, &thresholds)?;
    let bundle = train_experts(dataset, &split, &config.expert)?;
    let experts_dir = run_dir.join("experts");
    std::fs::create_dir_all(&experts_dir).map_err(|e| Error::io(&experts_dir, e))?;
    for (l, net) in bundle.experts.iter().enumerate() {
        neural::save_checkpoint(net, experts_dir.join(format!("expert_{l}.ckpt")))?;
    }
    write_json(
        &ExpertsArtifact {
            split: bundle.split.clone(),
            expert_val_acc: bundle.expert_val_acc.clone(),
            confidences: bundle.confidences.clone(),
        },
        &run_dir.join(EXPERTS_FILE),
    )?;
    Ok(bundle)
}

/// Load the expert artifacts written by [`stage_experts`].
pub fn load_experts(run_dir: &Path) -> Result<ExpertBundle> {
    let artifact_path = run_dir.join(EXPERTS_FILE);
    if !artifact_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run train-experts first)",
            artifact_path.display()
        )));
    }
    let artifact: ExpertsArtifact = read_json(&artifact_path)?;
    let experts = (0..artifact.split.num_subsets())
        .map(|l| neural::load_checkpoint(&run_dir.join(format!("experts/expert_{l}.ckpt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertBundle {
        split: artifact.split,
        experts,
        expert_val_acc: artifact.expert_val_acc,
        confidences: artifact.confidences,
    })
}

pub fn stage_plain(
    config: &RunConfig,
    run_dir: &Path,
    dataset: &Dataset,
    split: &CardinalitySplit,
) -> Result<(DenseNet64, TrainReport)> {
    let (net, report) = train_plain(dataset, split, &config.plain)?;
    neural::save_checkpoint(&net, run_dir.join(PLAIN_CKPT))?;
    write_json(&report, &run_dir.join(PLAIN_REPORT))?;
    Ok((net, report))
}

pub fn stage_student(
    config: &RunConfig,
    run_dir: &Path,
    dataset: &Dataset,
    experts: &ExpertBundle,
    options: &StudentOptions,
) -> Result<(DenseNet64, TrainReport)> {
    let (net, report) = train_student(dataset, experts, &config.student, options)?;
    neural::save_checkpoint(&net, run_dir.join(STUDENT_CKPT))?;
    Ok((net, report))
}

fn write_trajectories(report: &TrainReport, num_experts: usize, path: &Path) -> Result<()> {
    let mut out = String::from("epoch");
    for l in 0..num_experts {
        out.push_str(&format!(",w_{}", l + 1));
    }
    for l in 0..num_experts {
        out.push_str(&format!(",mean_v_{}", l + 1));
    }
    out.push_str(",loss_total,loss_ce,loss_kd,val_acc\n");
    for rec in &report.epochs {
        out.push_str(&rec.epoch.to_string());
        for w in &rec.expert_weights {
            out.push_str(&format!(",{w}"));
        }
        for v in &rec.mean_v_per_subset {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            rec.loss_total, rec.loss_ce, rec.loss_kd, rec.val_acc
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Full pipeline: generate, measure, train experts, train plain baseline,
/// train student, evaluate, and persist everything under `run_dir`.
pub fn run_experiment(config: &RunConfig, run_dir: &Path) -> Result<RunReport> {
    let (dataset, dist) = stage_data(config, run_dir).map_err(Error::stage("generate"))?;
    let thresholds = config.split.resolve(&dist).map_err(Error::stage("metrics"))?;
    let split =
        metrics::split_by_thresholds(&dist, &thresholds).map_err(Error::stage("metrics"))?;
    let metric_rows = metrics::longtailness_comparison(&dist, &split, config.log_base)
        .map_err(Error::stage("metrics"))?;
    let experts =
        stage_experts(config, run_dir, &dataset, &dist).map_err(Error::stage("experts"))?;
    let (_, plain_report) =
        stage_plain(config, run_dir, &dataset, &split).map_err(Error::stage("plain"))?;
    let (_, student_report) = stage_student(
        config,
        run_dir,
        &dataset,
        &experts,
        &StudentOptions::default(),
    )
    .map_err(Error::stage("student"))?;

    let report = RunReport {
        config_hash: config.hash()?,
        thresholds,
        metrics: metric_rows,
        expert_val_acc: experts.expert_val_acc.clone(),
        plain: plain_report,
        student: student_report,
    };
    write_json(&report, &run_dir.join(REPORT_FILE)).map_err(Error::stage("report"))?;
    write_trajectories(
        &report.student,
        experts.experts.len(),
        &run_dir.join(TRAJECTORIES_FILE),
    )
    .map_err(Error::stage("report"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{generate, GeneratorSpec, Profile};

    fn small_dataset() -> (Dataset, ClassDistribution) {
        generate(&GeneratorSpec {
            num_classes: 6,
            max_cardinality: 40,
            min_cardinality: 2,
            profile: Profile::Exponential,
            feature_dim: 6,
            class_separation: 4.0,
            seed: 5,
            eval_per_class: 10,
        })
        .unwrap()
    }

    fn quick_config(epochs: usize, sampler: SamplerMode) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.05,
            hidden_dims: vec![12],
            sampler,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn expert_on_separated_subset_is_accurate() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let cfg = quick_config(20, SamplerMode::InstanceRandom);
        // many-shot subset: well separated blobs with plenty of data
        let (_, acc) = train_expert(&dataset, &split.subsets[1], &cfg).unwrap();
        assert!(acc > 0.95, "acc = {acc}");
    }

    #[test]
    fn expert_training_is_deterministic() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let cfg = quick_config(4, SamplerMode::InstanceRandom);
        let (a, acc_a) = train_expert(&dataset, &split.subsets[0], &cfg).unwrap();
        let (b, acc_b) = train_expert(&dataset, &split.subsets[0], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(acc_a, acc_b);
    }

    #[test]
    fn student_with_degenerate_schedules_equals_plain() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let expert_cfg = quick_config(5, SamplerMode::InstanceRandom);
        let bundle = train_experts(&dataset, &split, &expert_cfg).unwrap();

        let cfg = quick_config(5, SamplerMode::ClassBalanced);
        let options = StudentOptions {
            fixed_expert_weight: Some(0.0),
            fixed_instance_weight: Some(1.0),
        };
        let (student, _) = train_student(&dataset, &bundle, &cfg, &options).unwrap();
        let (plain, _) = train_plain(&dataset, &split, &cfg).unwrap();
        assert_eq!(student, plain);
    }

    #[test]
    fn experts_frozen_during_student_training() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let bundle =
            train_experts(&dataset, &split, &quick_config(3, SamplerMode::InstanceRandom)).unwrap();
        let before = bundle.experts.clone();
        let cfg = quick_config(3, SamplerMode::ClassBalanced);
        train_student(&dataset, &bundle, &cfg, &StudentOptions::default()).unwrap();
        assert_eq!(bundle.experts, before);
    }

    #[test]
    fn student_report_shape_and_curriculum_monotone() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let bundle =
            train_experts(&dataset, &split, &quick_config(5, SamplerMode::InstanceRandom)).unwrap();
        let cfg = quick_config(6, SamplerMode::ClassBalanced);
        let (_, report) =
            train_student(&dataset, &bundle, &cfg, &StudentOptions::default()).unwrap();
        assert_eq!(report.epochs.len(), 6);
        // exactly one w update per epoch, v non-decreasing, terminal v = 1
        for l in 0..split.num_subsets() {
            let vs: Vec<f64> = report.epochs.iter().map(|r| r.mean_v_per_subset[l]).collect();
            assert!(vs.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{vs:?}");
            assert!((vs.last().unwrap() - 1.0).abs() < 1e-9, "{vs:?}");
        }
    }

    #[test]
    fn evaluate_consistency() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[10]).unwrap();
        let class_index = ClassIndex::from_distribution(&dist);
        let net = DenseNet::init(
            &[6, 8, 6],
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let acc = evaluate(&net, &dataset, &split, Partition::Test, &class_index).unwrap();
        // "all" equals the count-weighted mean of per-subset accuracies
        let total: usize = acc.counts.iter().sum();
        let weighted: f64 = acc
            .per_subset
            .iter()
            .zip(acc.counts.iter())
            .map(|(&a, &n)| a * n as f64 / total as f64)
            .sum();
        assert!((acc.all - weighted).abs() < 1e-12);
        let sub = student_subset_accuracy(&net, &dataset, &split, 0, &class_index).unwrap();
        let val = evaluate(&net, &dataset, &split, Partition::Val, &class_index).unwrap();
        assert_eq!(sub, val.per_subset[0]);
    }

    #[test]
    fn run_experiment_is_reproducible() {
        let mut config = RunConfig::default();
        config.generator.num_classes = 5;
        config.generator.max_cardinality = 30;
        config.generator.min_cardinality = 2;
        config.generator.feature_dim = 4;
        config.generator.eval_per_class = 5;
        config.split.thresholds = Some(vec![10]);
        for stage in [&mut config.expert, &mut config.plain, &mut config.student] {
            stage.epochs = 3;
            stage.hidden_dims = vec![8];
        }
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&config, dir_a.path()).unwrap();
        run_experiment(&config, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join(REPORT_FILE)).unwrap();
        let b = std::fs::read(dir_b.path().join(REPORT_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_experts_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        match load_experts(dir.path()) {
            Err(Error::MissingArtifact(msg)) => assert!(msg.contains("train-experts"), "{msg}"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn single_subset_degenerate_split() {
        let (dataset, dist) = small_dataset();
        let split = metrics::split_by_thresholds(&dist, &[]).unwrap();
        let bundle =
            train_experts(&dataset, &split, &quick_config(3, SamplerMode::InstanceRandom)).unwrap();
        assert_eq!(bundle.experts.len(), 1);
        let cfg = quick_config(3, SamplerMode::ClassBalanced);
        let (_, report) =
            train_student(&dataset, &bundle, &cfg, &StudentOptions::default()).unwrap();
        assert_eq!(report.epochs[0].expert_weights.len(), 1);
    }
}
